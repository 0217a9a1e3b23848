//! Versioned binary model checkpoints.
//!
//! Every integer and float is little-endian. Strings are a `u32` byte
//! length followed by UTF-8. The layout, in order:
//!
//! ```text
//! magic        8 bytes "GCSCKPT\0"
//! version      u32 (= 1)
//! dtype        u8 (0 = f32, 1 = f64)
//! fingerprint  string
//! architecture string (JSON model configuration)
//! seed         u64
//! metrics      u32 count, then (name string, f64) pairs
//! params       u32 count, then per parameter:
//!                name string, u8 trainable, u32 rank, rank x u64 dims,
//!                prod(dims) values of `dtype`
//! optimizer    u8 present; if 1: config string (JSON), u64 step,
//!                u32 parameter count, then per parameter
//!                u32 slot count and per slot u64 length + values
//! ```
//!
//! Trailing bytes are rejected, so a file either decodes completely or not
//! at all.

use std::path::Path;

use cohesion_core::nn::ParamStore;
use cohesion_core::training::{Optimizer, OptimizerConfig};
use cohesion_core::{Real, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GCSCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn of<T: Real>() -> Self {
        if T::DTYPE == "f32" {
            Dtype::F32
        } else {
            Dtype::F64
        }
    }

    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Raw values in their stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Values {
    pub fn from_slice<T: Real>(data: &[T]) -> Self {
        match Dtype::of::<T>() {
            Dtype::F32 => Values::F32(data.iter().map(|v| v.as_f64() as f32).collect()),
            Dtype::F64 => Values::F64(data.iter().map(|v| v.as_f64()).collect()),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            Values::F32(_) => Dtype::F32,
            Values::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Exact conversion; the stored and requested precisions must agree.
    pub fn to_vec<T: Real>(&self) -> Result<Vec<T>> {
        if self.dtype() != Dtype::of::<T>() {
            return Err(Error::Architecture(format!(
                "checkpoint holds {} values, model uses {}",
                self.dtype().name(),
                T::DTYPE
            )));
        }
        Ok(match self {
            Values::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            Values::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub values: Values,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredOptimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    /// Per parameter, per slot.
    pub slots: Vec<Vec<Values>>,
}

impl StoredOptimizer {
    pub fn capture<T: Real>(opt: &Optimizer<T>) -> Self {
        StoredOptimizer {
            config: opt.config,
            step: opt.step,
            slots: opt
                .slots
                .iter()
                .map(|per| per.iter().map(|s| Values::from_slice(s)).collect())
                .collect(),
        }
    }

    pub fn restore<T: Real>(&self) -> Result<Optimizer<T>> {
        let slots = self
            .slots
            .iter()
            .map(|per| per.iter().map(Values::to_vec).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(Optimizer {
            config: self.config,
            step: self.step,
            slots,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dtype: Dtype,
    pub fingerprint: String,
    /// JSON model configuration the parameters belong to.
    pub architecture: String,
    pub seed: u64,
    pub metrics: Vec<(String, f64)>,
    pub params: Vec<StoredParam>,
    pub optimizer: Option<StoredOptimizer>,
}

/// Parameters of `store` with `prefix` prepended to each name.
pub fn capture_params<T: Real>(store: &ParamStore<T>, prefix: &str) -> Vec<StoredParam> {
    store
        .iter()
        .map(|p| StoredParam {
            name: format!("{prefix}{}", p.name),
            trainable: p.tensor.requires_grad(),
            shape: p.tensor.shape().to_vec(),
            values: Values::from_slice(p.tensor.data()),
        })
        .collect()
}

/// Overwrites every parameter of `store` with the same-named stored entry
/// under `prefix`. Missing names, extra names and shape differences are
/// architecture mismatches.
pub fn restore_params<T: Real>(store: &mut ParamStore<T>, params: &[StoredParam], prefix: &str) -> Result<()> {
    let mine: Vec<&StoredParam> = params.iter().filter(|p| p.name.starts_with(prefix)).collect();
    if mine.len() != store.len() {
        return Err(Error::Architecture(format!(
            "checkpoint has {} parameters under `{prefix}`, model has {}",
            mine.len(),
            store.len()
        )));
    }
    for p in store.iter_mut() {
        let full = format!("{prefix}{}", p.name);
        let stored = mine
            .iter()
            .find(|s| s.name == full)
            .ok_or_else(|| Error::Architecture(format!("checkpoint lacks parameter `{full}`")))?;
        if stored.shape != p.tensor.shape() || stored.trainable != p.tensor.requires_grad() {
            return Err(Error::Architecture(format!(
                "parameter `{full}` is {:?} in the checkpoint, {:?} in the model",
                stored.shape,
                p.tensor.shape()
            )));
        }
        let data = stored.values.to_vec::<T>()?;
        p.tensor = Tensor::new(&stored.shape, data)?.with_requires_grad(stored.trainable);
    }
    Ok(())
}

impl Checkpoint {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.0.push(self.dtype.code());
        w.string(&self.fingerprint);
        w.string(&self.architecture);
        w.u64(self.seed);
        w.u32(self.metrics.len() as u32);
        for (name, v) in &self.metrics {
            w.string(name);
            w.f64(*v);
        }
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.string(&p.name);
            w.0.push(u8::from(p.trainable));
            w.u32(p.shape.len() as u32);
            for &d in &p.shape {
                w.u64(d as u64);
            }
            w.values(&p.values);
        }
        match &self.optimizer {
            None => w.0.push(0),
            Some(o) => {
                w.0.push(1);
                w.string(&serde_json::to_string(&o.config).expect("optimizer config serializes"));
                w.u64(o.step);
                w.u32(o.slots.len() as u32);
                for per in &o.slots {
                    w.u32(per.len() as u32);
                    for s in per {
                        w.u64(s.len() as u64);
                        w.values(s);
                    }
                }
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let dtype = match r.u8()? {
            0 => Dtype::F32,
            1 => Dtype::F64,
            other => return Err(format!("unknown dtype code {other}")),
        };
        let fingerprint = r.string()?;
        let architecture = r.string()?;
        let seed = r.u64()?;
        let metrics = (0..r.u32()?)
            .map(|_| Ok((r.string()?, r.f64()?)))
            .collect::<std::result::Result<Vec<_>, String>>()?;
        let count = r.u32()?;
        let mut params = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let name = r.string()?;
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                other => return Err(format!("parameter `{name}`: bad trainable flag {other}")),
            };
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.len()).collect::<std::result::Result<Vec<_>, String>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| format!("parameter `{name}`: shape overflows"))?;
            let values = r.values(dtype, n)?;
            params.push(StoredParam {
                name,
                trainable,
                shape,
                values,
            });
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let config = serde_json::from_str(&r.string()?).map_err(|e| format!("optimizer config: {e}"))?;
                let step = r.u64()?;
                let slots = (0..r.u32()?)
                    .map(|_| {
                        (0..r.u32()?)
                            .map(|_| {
                                let n = r.len()?;
                                r.values(dtype, n)
                            })
                            .collect()
                    })
                    .collect::<std::result::Result<Vec<_>, String>>()?;
                Some(StoredOptimizer { config, step, slots })
            }
            other => return Err(format!("bad optimizer flag {other}")),
        };
        if r.at != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.at));
        }
        Ok(Checkpoint {
            dtype,
            fingerprint,
            architecture,
            seed,
            metrics,
            params,
            optimizer,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Checkpoint::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn values(&mut self, v: &Values) {
        match v {
            Values::F32(xs) => xs.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes())),
            Values::F64(xs) => xs.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.at))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| "length exceeds address space".to_string())
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "string is not UTF-8".to_string())
    }

    fn values(&mut self, dtype: Dtype, n: usize) -> std::result::Result<Values, String> {
        let width = match dtype {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let raw = self.take(n.checked_mul(width).ok_or("value block overflows")?)?;
        Ok(match dtype {
            Dtype::F32 => Values::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            Dtype::F64 => Values::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            dtype: Dtype::F32,
            fingerprint: "test/v1".into(),
            architecture: "{}".into(),
            seed: 42,
            metrics: vec![("mse".into(), 0.125)],
            params: vec![StoredParam {
                name: "w".into(),
                trainable: true,
                shape: vec![2, 2],
                values: Values::F32(vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25]),
            }],
            optimizer: Some(StoredOptimizer {
                config: OptimizerConfig::adam(0.001),
                step: 7,
                slots: vec![vec![Values::F32(vec![0.1; 4]), Values::F32(vec![0.2; 4])]],
            }),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 7, 12, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).unwrap_err().contains("trailing"));
        let mut bad = bytes;
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().contains("version"));
    }

    #[test]
    fn restore_rejects_shape_mismatch() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[4]).with_requires_grad(true));
        match restore_params(&mut store, &sample().params, "") {
            Err(Error::Architecture(m)) => assert!(m.contains("`w`")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn precision_must_match() {
        assert!(Values::F32(vec![1.0]).to_vec::<f64>().is_err());
        assert_eq!(Values::F64(vec![0.1]).to_vec::<f64>().unwrap(), vec![0.1]);
    }
}
