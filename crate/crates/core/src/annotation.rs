//! Inter-rater agreement on the four-level cohesion scale.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Number of levels of the cohesion rating scale (labels 0..=3).
pub const LEVELS: usize = 4;

/// Items in rows, raters in columns.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnnotationMatrix {
    raters: Vec<String>,
    labels: Vec<u8>,
    items: usize,
}

impl AnnotationMatrix {
    pub fn new(raters: Vec<String>, rows: Vec<Vec<u8>>) -> Result<Self> {
        let r = raters.len();
        if r < 2 || rows.len() < 2 {
            return Err(Error::Annotation(format!(
                "need at least 2 items and 2 raters, got {} x {r}",
                rows.len()
            )));
        }
        let mut labels = Vec::with_capacity(rows.len() * r);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != r {
                return Err(Error::Annotation(format!("item {i} has {} labels, expected {r}", row.len())));
            }
            if let Some(&bad) = row.iter().find(|&&l| l as usize >= LEVELS) {
                return Err(Error::Annotation(format!("item {i}: label {bad} outside 0..=3")));
            }
            labels.extend_from_slice(row);
        }
        Ok(AnnotationMatrix {
            raters,
            labels,
            items: rows.len(),
        })
    }

    /// Raters named `r1`, `r2`, ...
    pub fn from_rows(rows: Vec<Vec<u8>>) -> Result<Self> {
        let r = rows.first().map_or(0, Vec::len);
        Self::new((1..=r).map(|i| format!("r{i}")).collect(), rows)
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn raters(&self) -> usize {
        self.raters.len()
    }

    pub fn rater_ids(&self) -> &[String] {
        &self.raters
    }

    pub fn get(&self, item: usize, rater: usize) -> u8 {
        self.labels[item * self.raters.len() + rater]
    }

    pub fn row(&self, item: usize) -> &[u8] {
        let r = self.raters.len();
        &self.labels[item * r..(item + 1) * r]
    }

    pub fn column(&self, rater: usize) -> Vec<u8> {
        (0..self.items).map(|i| self.get(i, rater)).collect()
    }
}

/// Mean over items of the population variance across raters, and the
/// mean of the per-item standard deviations.
pub fn rater_variance_stats(m: &AnnotationMatrix) -> (f64, f64) {
    let r = m.raters() as f64;
    let (mut var_sum, mut std_sum) = (0.0, 0.0);
    for i in 0..m.items() {
        let row = m.row(i);
        let mean = row.iter().map(|&l| l as f64).sum::<f64>() / r;
        let var = row.iter().map(|&l| (l as f64 - mean) * (l as f64 - mean)).sum::<f64>() / r;
        var_sum += var;
        std_sum += var.sqrt();
    }
    let n = m.items() as f64;
    (var_sum / n, std_sum / n)
}

/// Population covariance of the raters, `R x R` row-major.
pub fn rater_covariance(m: &AnnotationMatrix) -> Vec<f64> {
    let (n, r) = (m.items(), m.raters());
    let means: Vec<f64> = (0..r)
        .map(|j| (0..n).map(|i| m.get(i, j) as f64).sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![0.0; r * r];
    for a in 0..r {
        for b in a..r {
            let c = (0..n)
                .map(|i| (m.get(i, a) as f64 - means[a]) * (m.get(i, b) as f64 - means[b]))
                .sum::<f64>()
                / n as f64;
            cov[a * r + b] = c;
            cov[b * r + a] = c;
        }
    }
    cov
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn symmetric_eigenvalues(matrix: &[f64], n: usize) -> Vec<f64> {
    let mut a = matrix.to_vec();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| (0..n).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a[p * n + q] * a[p * n + q])
            .sum();
        if off.sqrt() <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EigenSpectrum {
    /// Covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Eigenvalues as fractions of their (clamped nonnegative) sum.
    pub shares: Vec<f64>,
    /// Total variance was zero; shares are `(1, 0, ..)` by convention.
    pub degenerate: bool,
}

/// Principal-component spectrum with items as observations and raters as
/// variables.
pub fn pca_eigenspectrum(m: &AnnotationMatrix) -> EigenSpectrum {
    let r = m.raters();
    let cov = rater_covariance(m);
    let trace: f64 = (0..r).map(|i| cov[i * r + i]).sum();
    if trace <= 0.0 {
        let mut shares = vec![0.0; r];
        shares[0] = 1.0;
        return EigenSpectrum {
            eigenvalues: vec![0.0; r],
            shares,
            degenerate: true,
        };
    }
    let eigenvalues = symmetric_eigenvalues(&cov, r);
    let clamped: Vec<f64> = eigenvalues.iter().map(|&e| e.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    EigenSpectrum {
        shares: clamped.iter().map(|&e| e / total).collect(),
        eigenvalues,
        degenerate: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Weighting {
    Linear,
    Quadratic,
}

impl Weighting {
    /// Agreement weight scaled to integers: `w_ij = integer(i, j) / scale`.
    fn integer(self, i: usize, j: usize, levels: usize) -> i64 {
        let top = (levels - 1) as i64;
        let d = (i as i64 - j as i64).abs();
        match self {
            Weighting::Linear => top - d,
            Weighting::Quadratic => top * top - d * d,
        }
    }

    fn scale(self, levels: usize) -> i64 {
        let top = (levels - 1) as i64;
        match self {
            Weighting::Linear => top,
            Weighting::Quadratic => top * top,
        }
    }

    /// `w_ij` as a real number.
    pub fn weight(self, i: usize, j: usize, levels: usize) -> f64 {
        self.integer(i, j, levels) as f64 / self.scale(levels) as f64
    }
}

/// Weighted Cohen's kappa between two raters.
///
/// Observed and chance agreement are accumulated as exact integers, so
/// `kappa(x, x) == 1` and `kappa(a, b) == kappa(b, a)` hold bitwise.
pub fn weighted_kappa(a: &[u8], b: &[u8], levels: usize, weighting: Weighting) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Annotation(format!(
            "kappa needs two equal-length label sequences of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if levels < 2 {
        return Err(Error::Annotation("kappa needs at least 2 levels".into()));
    }
    if let Some(&bad) = a.iter().chain(b).find(|&&l| l as usize >= levels) {
        return Err(Error::Annotation(format!("label {bad} outside 0..{levels}")));
    }
    let mut joint = vec![0i64; levels * levels];
    let mut row = vec![0i64; levels];
    let mut col = vec![0i64; levels];
    for (&x, &y) in a.iter().zip(b) {
        joint[x as usize * levels + y as usize] += 1;
        row[x as usize] += 1;
        col[y as usize] += 1;
    }
    let n = a.len() as i64;
    let (mut observed, mut expected) = (0i64, 0i64);
    for i in 0..levels {
        for j in 0..levels {
            let w = weighting.integer(i, j, levels);
            observed += w * joint[i * levels + j];
            expected += w * row[i] * col[j];
        }
    }
    let denom = n * n * weighting.scale(levels) - expected;
    if denom == 0 {
        return Err(Error::UndefinedKappa);
    }
    Ok((n * observed - expected) as f64 / denom as f64)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PairKappa {
    pub a: usize,
    pub b: usize,
    /// `None` when chance agreement is total.
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AgreementReport {
    pub items: usize,
    pub raters: Vec<String>,
    pub mean_variance: f64,
    pub mean_std: f64,
    pub spectrum: EigenSpectrum,
    pub weighting: Weighting,
    pub pairwise: Vec<PairKappa>,
    /// Mean over pairs with a defined kappa.
    pub mean_kappa: Option<f64>,
}

pub fn agreement_report(m: &AnnotationMatrix, weighting: Weighting) -> AgreementReport {
    let (mean_variance, mean_std) = rater_variance_stats(m);
    let columns: Vec<Vec<u8>> = (0..m.raters()).map(|j| m.column(j)).collect();
    let mut pairwise = Vec::new();
    for a in 0..m.raters() {
        for b in a + 1..m.raters() {
            let kappa = weighted_kappa(&columns[a], &columns[b], LEVELS, weighting).ok();
            pairwise.push(PairKappa { a, b, kappa });
        }
    }
    let defined: Vec<f64> = pairwise.iter().filter_map(|p| p.kappa).collect();
    AgreementReport {
        items: m.items(),
        raters: m.rater_ids().to_vec(),
        mean_variance,
        mean_std,
        spectrum: pca_eigenspectrum(m),
        weighting,
        pairwise,
        mean_kappa: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
    }
}

impl AgreementReport {
    pub fn render(&self) -> String {
        let mut out = format!("items: {}\nraters: {}\n", self.items, self.raters.join(", "));
        out += &format!("mean variance: {:.4}\nmean std: {:.4}\n", self.mean_variance, self.mean_std);
        let shares: Vec<String> = self.spectrum.shares.iter().map(|s| format!("{s:.4}")).collect();
        out += &format!("eigen shares: {}", shares.join(" "));
        if self.spectrum.degenerate {
            out += " (zero variance)";
        }
        out += "\n";
        let w = match self.weighting {
            Weighting::Linear => "linear",
            Weighting::Quadratic => "quadratic",
        };
        for p in &self.pairwise {
            let k = p.kappa.map_or_else(|| "undefined".into(), |k| format!("{k:.4}"));
            out += &format!("kappa[{w}] {} vs {}: {k}\n", self.raters[p.a], self.raters[p.b]);
        }
        match self.mean_kappa {
            Some(k) => out += &format!("mean kappa: {k:.4}\n"),
            None => out += "mean kappa: undefined\n",
        }
        out
    }
}
