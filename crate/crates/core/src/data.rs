//! Group samples, the synthetic group generator and face preprocessing.
//!
//! The generator draws groups of procedural glyph faces. Each face wears one
//! of seven emotion archetypes; a group's cohesion label is a function of
//! how many faces share the modal emotion, so a model that reads facial
//! emotion can recover it exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream;

pub const NUM_EMOTIONS: usize = 7;
pub const NUM_GROUP_EMOTIONS: usize = 3;
pub const MAX_GCS: f64 = 3.0;

/// Basic facial emotions in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Emotion {
    Happy,
    Neutral,
    Sad,
    Angry,
    Surprise,
    Disgust,
    Fear,
}

impl Emotion {
    pub const ALL: [Emotion; NUM_EMOTIONS] = [
        Emotion::Happy,
        Emotion::Neutral,
        Emotion::Sad,
        Emotion::Angry,
        Emotion::Surprise,
        Emotion::Disgust,
        Emotion::Fear,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or(Error::Index { index: i, len: NUM_EMOTIONS })
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Happy => "happy",
            Emotion::Neutral => "neutral",
            Emotion::Sad => "sad",
            Emotion::Angry => "angry",
            Emotion::Surprise => "surprise",
            Emotion::Disgust => "disgust",
            Emotion::Fear => "fear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s)
    }

    pub fn valence(self) -> GroupEmotion {
        match self {
            Emotion::Happy => GroupEmotion::Positive,
            Emotion::Neutral | Emotion::Surprise => GroupEmotion::Neutral,
            Emotion::Sad | Emotion::Angry | Emotion::Disgust | Emotion::Fear => {
                GroupEmotion::Negative
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum GroupEmotion {
    Positive,
    Neutral,
    Negative,
}

impl GroupEmotion {
    pub const ALL: [GroupEmotion; NUM_GROUP_EMOTIONS] =
        [GroupEmotion::Positive, GroupEmotion::Neutral, GroupEmotion::Negative];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            GroupEmotion::Positive => "positive",
            GroupEmotion::Neutral => "neutral",
            GroupEmotion::Negative => "negative",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// 8-bit interleaved RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::dim("rgb image", &[height, width, 3], &[pixels.len()]));
        }
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        RgbImage {
            width,
            height,
            pixels,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-first planes scaled to [0,1]: `[3, height, width]`.
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                out[c * plane + p] = self.pixels[p * 3 + c] as f64 / 255.0;
            }
        }
        out
    }
}

/// Binary person mask; `true` marks person pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn coverage(&self) -> f64 {
        self.data.iter().filter(|&&m| m).count() as f64 / self.data.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FaceBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl FaceBox {
    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x + self.w <= width && self.y + self.h <= height
    }
}

/// One labeled group image.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub id: String,
    pub image: RgbImage,
    pub faces: Vec<FaceBox>,
    /// Ground-truth per-face emotions, known for generated data.
    pub face_emotions: Option<Vec<Emotion>>,
    pub mask: Option<Mask>,
    pub gcs: f64,
    pub emotion: GroupEmotion,
    pub split: Split,
}

impl GroupSample {
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.faces.iter().enumerate() {
            if !b.within(self.image.width, self.image.height) {
                return Err(Error::Contract(format!(
                    "face box {i} {b:?} exceeds image {}x{}",
                    self.image.width, self.image.height
                )));
            }
        }
        if let Some(m) = &self.mask {
            if m.width != self.image.width || m.height != self.image.height {
                return Err(Error::dim(
                    "mask",
                    &[m.height, m.width],
                    &[self.image.height, self.image.width],
                ));
            }
        }
        if !(0.0..=MAX_GCS).contains(&self.gcs) {
            return Err(Error::Contract(format!("gcs label {} outside [0,3]", self.gcs)));
        }
        Ok(())
    }
}

/// Modal emotion (ties go to the earliest in canonical order) and its count.
pub fn modal_emotion(faces: &[Emotion]) -> Option<(Emotion, usize)> {
    let mut counts = [0usize; NUM_EMOTIONS];
    for e in faces {
        counts[e.index()] += 1;
    }
    let (best, &n) = counts
        .iter()
        .enumerate()
        .rev()
        .max_by_key(|&(_, c)| c)?;
    (n > 0).then(|| (Emotion::ALL[best], n))
}

/// Cohesion of a generated group: the modal-emotion fraction mapped
/// affinely so a unanimous group scores 3 and a uniform mix of all seven
/// emotions scores 0.
pub fn gcs_from_emotions(faces: &[Emotion]) -> Option<f64> {
    let (_, n) = modal_emotion(faces)?;
    let frac = n as f64 / faces.len() as f64;
    let chance = 1.0 / NUM_EMOTIONS as f64;
    Some((MAX_GCS * (frac - chance) / (1.0 - chance)).clamp(0.0, MAX_GCS))
}

pub fn group_emotion_from_faces(faces: &[Emotion]) -> Option<GroupEmotion> {
    modal_emotion(faces).map(|(e, _)| e.valence())
}

/// Parameters of the synthetic group generator.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthSpec {
    pub num_samples: usize,
    pub faces_min: usize,
    pub faces_max: usize,
    /// Per-channel uniform pixel noise amplitude as a fraction of 255.
    pub noise: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_samples: 500,
            faces_min: 2,
            faces_max: 6,
            noise: 0.05,
            seed: 0,
            val_fraction: 0.2,
            test_fraction: 0.0,
        }
    }
}

pub const CELL: usize = 48;
const FACE_MIN: usize = 28;
const FACE_MAX: usize = 40;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.faces_min == 0 || self.faces_min > self.faces_max {
            return Err(Error::config("faces-per-group range must satisfy 1 <= min <= max"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config("noise must lie in [0,1]"));
        }
        let held_out = self.val_fraction + self.test_fraction;
        if self.val_fraction < 0.0 || self.test_fraction < 0.0 || held_out > 1.0 {
            return Err(Error::config("split fractions must be nonnegative and sum to at most 1"));
        }
        Ok(())
    }

    /// Grid of face cells: two rows once more than one face is possible.
    pub fn grid(&self) -> (usize, usize) {
        let rows = if self.faces_max > 1 { 2 } else { 1 };
        (self.faces_max.div_ceil(rows), rows)
    }

    pub fn image_size(&self) -> (usize, usize) {
        let (cols, rows) = self.grid();
        (cols * CELL, rows * CELL)
    }

    fn split_of(&self, index: usize) -> Split {
        let n_val = (self.num_samples as f64 * self.val_fraction).floor() as usize;
        let n_test = (self.num_samples as f64 * self.test_fraction).floor() as usize;
        let n_train = self.num_samples - n_val - n_test;
        if index < n_train {
            Split::Train
        } else if index < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Renders `spec.num_samples` groups; sample `i` depends only on `(seed, i)`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<GroupSample>> {
    spec.validate()?;
    Ok((0..spec.num_samples).map(|i| synth_sample(spec, i)).collect())
}

fn synth_sample(spec: &SynthSpec, index: usize) -> GroupSample {
    let mut rng = stream(spec.seed, index as u64);
    let (width, height) = spec.image_size();
    let (cols, rows) = spec.grid();
    let k = rng.gen_range(spec.faces_min..=spec.faces_max);

    let dominant = Emotion::ALL[rng.gen_range(0..NUM_EMOTIONS)];
    let concentration: f64 = rng.gen();
    let emotions: Vec<Emotion> = (0..k)
        .map(|_| {
            if rng.gen::<f64>() < concentration {
                dominant
            } else {
                Emotion::ALL[rng.gen_range(0..NUM_EMOTIONS)]
            }
        })
        .collect();

    let background = [rng.gen_range(40..220), rng.gen_range(40..220), rng.gen_range(40..220)];
    let mut image = RgbImage::filled(width, height, background);
    let mut mask = Mask {
        width,
        height,
        data: vec![false; width * height],
    };

    let mut cells: Vec<usize> = (0..cols * rows).collect();
    cells.shuffle(&mut rng);
    let mut faces = Vec::with_capacity(k);
    for (&cell, &emotion) in cells.iter().zip(&emotions) {
        let (cx, cy) = ((cell % cols) * CELL, (cell / cols) * CELL);
        let size = rng.gen_range(FACE_MIN..=FACE_MAX);
        let slack = CELL - size;
        let fx = cx + rng.gen_range(0..=slack);
        let fy = cy + rng.gen_range(0..=slack / 2);
        let face = FaceBox {
            x: fx,
            y: fy,
            w: size,
            h: size,
        };
        let tone = SKIN_TONES[rng.gen_range(0..SKIN_TONES.len())];
        // torso below the face, a little wider than it
        let tx0 = fx.saturating_sub(size / 4).max(cx);
        let tx1 = (fx + size + size / 4).min(cx + CELL);
        for y in fy + size..cy + CELL {
            for x in tx0..tx1 {
                mask.data[y * width + x] = true;
                image.set(x, y, tone.map(|c| c / 2));
            }
        }
        draw_glyph(&mut image, &mut mask, face, emotion, tone);
        faces.push(face);
    }

    if spec.noise > 0.0 {
        let amp = spec.noise * 255.0;
        for p in image.pixels.iter_mut() {
            let jitter = rng.gen_range(-amp..=amp);
            *p = (*p as f64 + jitter).round().clamp(0.0, 255.0) as u8;
        }
    }

    let gcs = gcs_from_emotions(&emotions).expect("at least one face");
    let emotion = group_emotion_from_faces(&emotions).expect("at least one face");
    GroupSample {
        id: format!("synth-{index:06}"),
        image,
        faces,
        face_emotions: Some(emotions),
        mask: Some(mask),
        gcs,
        emotion,
        split: spec.split_of(index),
    }
}

const SKIN_TONES: [[u8; 3]; 4] = [[236, 200, 170], [205, 160, 120], [160, 115, 80], [250, 220, 190]];
const INK: [u8; 3] = [35, 25, 25];

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn dist(p: (f64, f64), c: (f64, f64)) -> f64 {
    ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt()
}

/// Whether normalized face coordinate `p` is inked for `emotion`.
fn glyph_ink(p: (f64, f64), emotion: Emotion) -> bool {
    use Emotion::*;
    let (u, v) = p;
    let eye_r = if matches!(emotion, Surprise | Fear) { 0.095 } else { 0.06 };
    if dist(p, (0.34, 0.40)) < eye_r || dist(p, (0.66, 0.40)) < eye_r {
        return true;
    }
    // brows, mirrored about u = 0.5
    let m = (if u > 0.5 { 1.0 - u } else { u }, v);
    let brow = match emotion {
        Angry => Some(((0.20, 0.24), (0.42, 0.32))),
        Sad => Some(((0.20, 0.32), (0.42, 0.25))),
        Fear => Some(((0.20, 0.27), (0.42, 0.20))),
        Surprise => Some(((0.22, 0.21), (0.42, 0.21))),
        _ => None,
    };
    if let Some((a, b)) = brow {
        if dist_to_segment(m, a, b) < 0.03 {
            return true;
        }
    }
    match emotion {
        Happy => {
            let r = dist(p, (0.5, 0.50));
            (0.19..0.26).contains(&r) && v > 0.60
        }
        Sad => {
            let r = dist(p, (0.5, 0.90));
            (0.19..0.26).contains(&r) && v < 0.75
        }
        Neutral => (0.68..0.73).contains(&v) && (0.33..0.67).contains(&u),
        Angry => (0.65..0.76).contains(&v) && (0.36..0.64).contains(&u),
        Surprise => ((u - 0.5) / 0.09).powi(2) + ((v - 0.72) / 0.12).powi(2) < 1.0,
        Disgust => dist_to_segment(p, (0.33, 0.75), (0.67, 0.63)) < 0.035,
        Fear => (0.67..0.79).contains(&v) && (0.30..0.70).contains(&u),
    }
}

fn draw_glyph(image: &mut RgbImage, mask: &mut Mask, face: FaceBox, emotion: Emotion, tone: [u8; 3]) {
    for py in face.y..face.y + face.h {
        for px in face.x..face.x + face.w {
            let u = (px - face.x) as f64 / face.w as f64 + 0.5 / face.w as f64;
            let v = (py - face.y) as f64 / face.h as f64 + 0.5 / face.h as f64;
            if dist((u, v), (0.5, 0.5)) > 0.47 {
                continue;
            }
            mask.data[py * image.width + px] = true;
            let color = if glyph_ink((u, v), emotion) { INK } else { tone };
            image.set(px, py, color);
        }
    }
}

/// `[out, in]` bilinear interpolation weights with half-pixel centers and
/// edge clamping. Rows sum to one.
pub fn bilinear_matrix(out: usize, input: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * input];
    let scale = input as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let t = src - i0 as f64;
        m[o * input + i0] += 1.0 - t;
        m[o * input + i1] += t;
    }
    m
}

/// Separable bilinear resize of one `[h, w]` plane.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), h * w);
    let rx = bilinear_matrix(ow, w);
    let ry = bilinear_matrix(oh, h);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            let mut acc = 0.0;
            for x in 0..w {
                let wgt = rx[ox * w + x];
                if wgt != 0.0 {
                    acc += src[y * w + x] * wgt;
                }
            }
            rows[y * ow + ox] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for y in 0..h {
            let wgt = ry[oy * h + y];
            if wgt == 0.0 {
                continue;
            }
            for ox in 0..ow {
                out[oy * ow + ox] += wgt * rows[y * ow + ox];
            }
        }
    }
    out
}

pub fn luminance(rgb: [u8; 3]) -> f64 {
    (0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64) / 255.0
}

/// Grayscale crop of face `index`, bilinearly resized to `size x size`,
/// values in [0,1].
pub fn preprocess_face(sample: &GroupSample, index: usize, size: usize) -> Result<Vec<f64>> {
    let b = *sample.faces.get(index).ok_or(Error::Index {
        index,
        len: sample.faces.len(),
    })?;
    if b.w == 0 || b.h == 0 {
        return Err(Error::Contract(format!("degenerate face box {b:?}")));
    }
    if !b.within(sample.image.width, sample.image.height) {
        return Err(Error::Contract(format!("face box {b:?} exceeds image")));
    }
    let mut gray = Vec::with_capacity(b.w * b.h);
    for y in b.y..b.y + b.h {
        for x in b.x..b.x + b.w {
            gray.push(luminance(sample.image.get(x, y)));
        }
    }
    let mut out = resize_bilinear(&gray, b.h, b.w, size, size);
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// A face crop with its emotion label, used to pretrain the capsule network.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceSample {
    pub pixels: Vec<f64>,
    pub emotion: Emotion,
}

/// Every labeled face of `samples`, preprocessed to `size x size`.
pub fn face_samples(samples: &[GroupSample], size: usize) -> Result<Vec<FaceSample>> {
    let mut out = Vec::new();
    for s in samples {
        let Some(emotions) = &s.face_emotions else { continue };
        for (i, &emotion) in emotions.iter().enumerate() {
            out.push(FaceSample {
                pixels: preprocess_face(s, i, size)?,
                emotion,
            });
        }
    }
    Ok(out)
}
