//! Writes generated groups to disk as PNG files plus a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use cohesion_core::data::{synth_generate, GroupEmotion, GroupSample, SynthSpec};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::images;
use crate::manifest::{Manifest, Record, SplitSizes};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub samples: usize,
    pub faces: usize,
    pub splits: SplitSizes,
    pub group_emotions: BTreeMap<String, usize>,
    /// Count of each distinct cohesion label, keyed by the label printed
    /// with four decimals.
    pub gcs_histogram: BTreeMap<String, usize>,
}

pub fn gcs_key(gcs: f64) -> String {
    format!("{gcs:.4}")
}

/// Writes `images/<id>.png`, `masks/<id>.png` and the manifest under `dir`.
pub fn write_synth(dir: &Path, spec: &SynthSpec) -> Result<(Manifest, SynthSummary)> {
    let samples = synth_generate(spec)?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(Error::io(&p))?;
    }
    let records = samples
        .par_iter()
        .map(|s| write_sample(dir, s))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(dir, records);
    manifest.write(&dir.join(MANIFEST_NAME))?;
    let summary = summarize(&manifest);
    Ok((manifest, summary))
}

fn write_sample(dir: &Path, s: &GroupSample) -> Result<Record> {
    let image = format!("images/{}.png", s.id);
    images::write_rgb(&dir.join(&image), &s.image)?;
    let mask = match &s.mask {
        Some(m) => {
            let rel = format!("masks/{}.png", s.id);
            images::write_mask(&dir.join(&rel), m)?;
            Some(rel)
        }
        None => None,
    };
    Ok(Record::describe(s, image, mask))
}

pub fn summarize(manifest: &Manifest) -> SynthSummary {
    let mut group_emotions: BTreeMap<String, usize> =
        GroupEmotion::ALL.iter().map(|e| (e.name().to_string(), 0)).collect();
    let mut gcs_histogram = BTreeMap::new();
    for r in &manifest.records {
        *group_emotions.entry(r.emotion.name().to_string()).or_default() += 1;
        *gcs_histogram.entry(gcs_key(r.gcs)).or_default() += 1;
    }
    SynthSummary {
        samples: manifest.records.len(),
        faces: manifest.records.iter().map(|r| r.faces.len()).sum(),
        splits: manifest.split_sizes(),
        group_emotions,
        gcs_histogram,
    }
}
