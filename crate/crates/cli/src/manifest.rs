//! Line-delimited JSON dataset manifests.
//!
//! The first line is a header carrying the schema version and the split
//! sizes; every further line is one group record. Image and mask paths are
//! relative to the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use cohesion_core::data::{Emotion, FaceBox, GroupEmotion, GroupSample, Split, MAX_GCS};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::images;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    splits: SplitSizes,
}

/// Metadata of one group image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub id: String,
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub faces: Vec<FaceBox>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub face_emotions: Option<Vec<Emotion>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub gcs: f64,
    pub emotion: GroupEmotion,
    pub split: Split,
}

const FIELDS: [&str; 10] = [
    "id",
    "image",
    "width",
    "height",
    "faces",
    "face_emotions",
    "mask",
    "gcs",
    "emotion",
    "split",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub schema_version: u32,
    pub records: Vec<Record>,
    /// Directory that relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>) -> Self {
        Manifest {
            schema_version: SCHEMA_VERSION,
            records,
            root: root.into(),
        }
    }

    pub fn split_sizes(&self) -> SplitSizes {
        let mut s = SplitSizes::default();
        for r in &self.records {
            match r.split {
                Split::Train => s.train += 1,
                Split::Val => s.val += 1,
                Split::Test => s.test += 1,
            }
        }
        s
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::format(path, "missing header line"))?;
        let header: Header =
            serde_json::from_str(first).map_err(|e| Error::format(path, format!("header: {e}")))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported schema version {}", header.schema_version),
            ));
        }
        let mut records = Vec::new();
        let mut ids = HashSet::new();
        for (index, (_, line)) in lines.enumerate() {
            let record = parse_record(path, index, line)?;
            if !ids.insert(record.id.clone()) {
                return Err(manifest_error(path, index, "id", format!("duplicate id {:?}", record.id)));
            }
            records.push(record);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Manifest {
            schema_version: header.schema_version,
            records,
            root,
        };
        if manifest.split_sizes() != header.splits {
            return Err(Error::format(
                path,
                format!(
                    "header split sizes {:?} disagree with records {:?}",
                    header.splits,
                    manifest.split_sizes()
                ),
            ));
        }
        Ok(manifest)
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            schema_version: self.schema_version,
            splits: self.split_sizes(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out += &serde_json::to_string(r).expect("record serializes");
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(Error::io(path))
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    /// Decodes record `index`; image and mask files are read here, so a
    /// missing file is reported only when the sample is used.
    pub fn sample(&self, index: usize) -> Result<GroupSample> {
        let r = &self.records[index];
        let image_path = self.resolve(&r.image);
        let image = images::read_rgb(&image_path)?;
        if image.width != r.width || image.height != r.height {
            return Err(Error::format(
                &image_path,
                format!(
                    "image is {}x{}, record {index} says {}x{}",
                    image.width, image.height, r.width, r.height
                ),
            ));
        }
        let mask = match &r.mask {
            None => None,
            Some(m) => {
                let mask_path = self.resolve(m);
                let mask = images::read_mask(&mask_path)?;
                if mask.width != r.width || mask.height != r.height {
                    return Err(Error::format(
                        &mask_path,
                        format!("mask is {}x{}, image is {}x{}", mask.width, mask.height, r.width, r.height),
                    ));
                }
                Some(mask)
            }
        };
        let sample = GroupSample {
            id: r.id.clone(),
            image,
            faces: r.faces.clone(),
            face_emotions: r.face_emotions.clone(),
            mask,
            gcs: r.gcs,
            emotion: r.emotion,
            split: r.split,
        };
        sample.validate()?;
        Ok(sample)
    }

    /// Decodes several records in parallel, preserving order.
    pub fn samples(&self, indices: &[usize]) -> Result<Vec<GroupSample>> {
        indices.par_iter().map(|&i| self.sample(i)).collect()
    }
}

impl Record {
    /// Metadata of `sample` with the given relative file paths.
    pub fn describe(sample: &GroupSample, image: String, mask: Option<String>) -> Self {
        Record {
            id: sample.id.clone(),
            image,
            width: sample.image.width,
            height: sample.image.height,
            faces: sample.faces.clone(),
            face_emotions: sample.face_emotions.clone(),
            mask,
            gcs: sample.gcs,
            emotion: sample.emotion,
            split: sample.split,
        }
    }
}

fn manifest_error(path: &Path, record: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        record,
        field: field.into(),
        message: message.into(),
    }
}

/// Parses one record field by field so that every error names its field.
fn parse_record(path: &Path, index: usize, line: &str) -> Result<Record> {
    let err = |field: &str, msg: String| manifest_error(path, index, field, msg);
    let map: Map<String, Value> = serde_json::from_str(line).map_err(|e| err("<record>", e.to_string()))?;
    if let Some(unknown) = map.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(err(unknown, "unknown field".into()));
    }
    fn field<T: DeserializeOwned>(map: &Map<String, Value>, name: &str) -> std::result::Result<Option<T>, String> {
        match map.get(name) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => T::deserialize(v).map(Some).map_err(|e| e.to_string()),
        }
    }
    let optional = |name: &str| name == "face_emotions" || name == "mask";
    macro_rules! get {
        ($name:literal) => {{
            let v = field(&map, $name).map_err(|m| err($name, m))?;
            if !optional($name) && v.is_none() {
                return Err(err($name, "missing".into()));
            }
            v
        }};
    }
    let record = Record {
        id: get!("id").unwrap(),
        image: get!("image").unwrap(),
        width: get!("width").unwrap(),
        height: get!("height").unwrap(),
        faces: get!("faces").unwrap(),
        face_emotions: get!("face_emotions"),
        mask: get!("mask"),
        gcs: get!("gcs").unwrap(),
        emotion: get!("emotion").unwrap(),
        split: get!("split").unwrap(),
    };
    if record.id.is_empty() {
        return Err(err("id", "empty".into()));
    }
    if record.width == 0 || record.height == 0 {
        return Err(err("width", "image extents must be positive".into()));
    }
    for (i, b) in record.faces.iter().enumerate() {
        if b.w == 0 || b.h == 0 {
            return Err(err("faces", format!("box {i} has zero area")));
        }
        if !b.within(record.width, record.height) {
            return Err(err(
                "faces",
                format!("box {i} {b:?} lies outside the {}x{} image", record.width, record.height),
            ));
        }
    }
    if let Some(e) = &record.face_emotions {
        if e.len() != record.faces.len() {
            return Err(err(
                "face_emotions",
                format!("{} emotions for {} faces", e.len(), record.faces.len()),
            ));
        }
    }
    if !(0.0..=MAX_GCS).contains(&record.gcs) {
        return Err(err("gcs", format!("{} outside [0,3]", record.gcs)));
    }
    Ok(record)
}
