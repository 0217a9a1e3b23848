//! Annotation matrices as comma-separated text: a header row of rater ids,
//! then one row of integer labels in 0..=3 per item.

use std::path::Path;

use cohesion_core::annotation::{AnnotationMatrix, LEVELS};

use crate::error::{Error, Result};

fn line_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Annotation {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn parse_annotations(path: &Path, text: &str) -> Result<AnnotationMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let raters: Vec<String> = reader
        .headers()
        .map_err(|e| line_error(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if raters.len() < 2 {
        return Err(line_error(path, 1, format!("need at least 2 raters, header has {}", raters.len())));
    }
    if let Some(empty) = raters.iter().position(String::is_empty) {
        return Err(line_error(path, 1, format!("rater id {} is empty", empty + 1)));
    }
    let mut rows = Vec::new();
    for result in reader.records() {
        let record = result.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            line_error(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != raters.len() {
            return Err(line_error(
                path,
                line,
                format!("{} labels, header names {} raters", record.len(), raters.len()),
            ));
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(j, field)| match field.parse::<u8>() {
                Ok(v) if (v as usize) < LEVELS => Ok(v),
                _ => Err(line_error(
                    path,
                    line,
                    format!("rater {}: label {field:?} is not an integer in 0..=3", raters[j]),
                )),
            })
            .collect::<Result<Vec<u8>>>()?;
        rows.push(row);
    }
    Ok(AnnotationMatrix::new(raters, rows)?)
}

pub fn read_annotations(path: &Path) -> Result<AnnotationMatrix> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    parse_annotations(path, &text)
}

pub fn write_annotations(path: &Path, m: &AnnotationMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(m.rater_ids()).map_err(csv_err)?;
    for i in 0..m.items() {
        w.write_record(m.row(i).iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, bytes).map_err(Error::io(path))
}
