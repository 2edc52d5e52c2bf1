//! Parcellation validation metrics: per-ROI Dice, intra- versus
//! inter-subject consistency with Welch's t-test, and within-ROI functional
//! homogeneity.

use std::collections::BTreeMap;

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::connectome::TimeSeriesMatrix;
use crate::error::{GdaipError, Result};
use crate::mesh_graph::Parcellation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceResult {
    /// `None` for ROIs empty in both parcellations.
    pub per_roi: Vec<Option<f64>>,
    /// Mean over non-skipped ROIs.
    pub mean: f64,
    pub skipped: Vec<usize>,
}

/// Per-ROI `2|A∩B| / (|A|+|B|)`. ROIs empty in both inputs are skipped;
/// ROIs empty in exactly one score 0.
pub fn dice(a: &Parcellation, b: &Parcellation) -> Result<DiceResult> {
    if a.n_roi() != b.n_roi() {
        return Err(GdaipError::Input(format!(
            "ROI counts differ: {} vs {}",
            a.n_roi(),
            b.n_roi()
        )));
    }
    if a.len() != b.len() {
        return Err(GdaipError::Input(format!(
            "vertex counts differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n_roi = a.n_roi();
    let mut size_a = vec![0usize; n_roi];
    let mut size_b = vec![0usize; n_roi];
    let mut both = vec![0usize; n_roi];
    for (&la, &lb) in a.labels().iter().zip(b.labels()) {
        size_a[la] += 1;
        size_b[lb] += 1;
        if la == lb {
            both[la] += 1;
        }
    }
    let mut per_roi = Vec::with_capacity(n_roi);
    let mut skipped = Vec::new();
    let (mut sum, mut count) = (0.0, 0usize);
    for r in 0..n_roi {
        let denom = size_a[r] + size_b[r];
        if denom == 0 {
            per_roi.push(None);
            skipped.push(r);
        } else {
            let d = 2.0 * both[r] as f64 / denom as f64;
            per_roi.push(Some(d));
            sum += d;
            count += 1;
        }
    }
    Ok(DiceResult {
        per_roi,
        mean: if count == 0 { f64::NAN } else { sum / count as f64 },
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
    /// Both samples had zero variance; `t` and `p` are undefined (NaN).
    pub degenerate: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance two-sample t-test with Welch–Satterthwaite
/// degrees of freedom.
pub fn welch_t_test(x: &[f64], y: &[f64]) -> Result<TTestResult> {
    if x.len() < 2 || y.len() < 2 {
        return Err(GdaipError::Input(format!(
            "welch_t_test needs at least 2 samples per group, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    let (sx, sy) = (vx / x.len() as f64, vy / y.len() as f64);
    let se2 = sx + sy;
    if se2 == 0.0 {
        return Ok(TTestResult {
            t: f64::NAN,
            df: f64::NAN,
            p: f64::NAN,
            degenerate: true,
        });
    }
    let t = (mx - my) / se2.sqrt();
    let df = se2 * se2
        / (sx * sx / (x.len() as f64 - 1.0) + sy * sy / (y.len() as f64 - 1.0));
    Ok(TTestResult {
        t,
        df,
        p: student_t_two_sided_p(t, df),
        degenerate: false,
    })
}

/// Paired t-test on `x[i] - y[i]`.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<TTestResult> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(GdaipError::Input(format!(
            "paired_t_test needs two equal-length samples of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let (m, v) = mean_var(&diffs);
    let df = (diffs.len() - 1) as f64;
    if v == 0.0 {
        return Ok(TTestResult {
            t: f64::NAN,
            df,
            p: f64::NAN,
            degenerate: true,
        });
    }
    let t = m / (v / diffs.len() as f64).sqrt();
    Ok(TTestResult {
        t,
        df,
        p: student_t_two_sided_p(t, df),
        degenerate: false,
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() || !(df > 0.0) {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0)
}

/// Identifies one scanning session of one subject.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionKey {
    pub subject: String,
    pub session: String,
}

impl SessionKey {
    pub fn new(subject: impl Into<String>, session: impl Into<String>) -> Self {
        SessionKey {
            subject: subject.into(),
            session: session.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Mean Dice of every same-subject session pair.
    pub intra: Vec<f64>,
    /// Mean Dice of every cross-subject session pair.
    pub inter: Vec<f64>,
    pub intra_mean: f64,
    pub inter_mean: f64,
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub degenerate: bool,
}

pub fn consistency(parcellations: &BTreeMap<SessionKey, Parcellation>) -> Result<ConsistencyReport> {
    let mut per_subject: BTreeMap<&str, usize> = BTreeMap::new();
    for key in parcellations.keys() {
        *per_subject.entry(key.subject.as_str()).or_default() += 1;
    }
    if per_subject.len() < 2 {
        return Err(GdaipError::Input(format!(
            "consistency needs at least 2 subjects, got {}",
            per_subject.len()
        )));
    }
    if let Some((s, n)) = per_subject.iter().find(|(_, &n)| n < 2) {
        return Err(GdaipError::Input(format!(
            "subject {s} has {n} session(s); at least 2 are required"
        )));
    }
    let entries: Vec<_> = parcellations.iter().collect();
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for i in 0..entries.len() {
        for j in (i + 1)..entries.len() {
            let d = dice(entries[i].1, entries[j].1)?.mean;
            if entries[i].0.subject == entries[j].0.subject {
                intra.push(d);
            } else {
                inter.push(d);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (intra_mean, inter_mean) = (mean(&intra), mean(&inter));
    let (t, p, degenerate) = if intra.len() >= 2 && inter.len() >= 2 {
        let test = welch_t_test(&intra, &inter)?;
        if test.degenerate {
            (None, None, true)
        } else {
            (Some(test.t), Some(test.p), false)
        }
    } else {
        (None, None, true)
    };
    Ok(ConsistencyReport {
        intra,
        inter,
        intra_mean,
        inter_mean,
        t,
        p,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogeneityResult {
    /// `None` for ROIs with fewer than two vertices.
    pub per_roi: Vec<Option<f64>>,
    /// Unweighted mean over scored ROIs.
    pub mean: f64,
}

/// Mean pairwise Pearson correlation among each ROI's vertex series,
/// averaged over ROIs.
///
/// With unit-normalized centered columns `z_i`, the sum over distinct pairs
/// is `(|Σ z_i|² − Σ |z_i|²) / 2`, which keeps this linear in ROI size.
/// Zero-variance vertices correlate 0 with everything.
pub fn homogeneity(atlas: &Parcellation, ts: &TimeSeriesMatrix) -> Result<HomogeneityResult> {
    if atlas.len() != ts.vertex_count() {
        return Err(GdaipError::Shape(format!(
            "atlas covers {} vertices, time series {}",
            atlas.len(),
            ts.vertex_count()
        )));
    }
    let data = ts.data();
    let t_len = data.nrows();
    let mean = data.mean_axis(Axis(0)).expect("T >= 2");
    let mut z = data - &mean.view().insert_axis(Axis(0));
    for (v, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
        let ss: f64 = col.iter().map(|x| x * x).sum();
        let scale = data.column(v).iter().fold(1.0_f64, |m, x| m.max(x.abs()));
        if (ss / t_len as f64).sqrt() <= 1e-12 * scale {
            col.fill(0.0);
        } else {
            let inv = 1.0 / ss.sqrt();
            col.mapv_inplace(|x| x * inv);
        }
    }
    let mut per_roi = Vec::with_capacity(atlas.n_roi());
    let (mut sum, mut count) = (0.0, 0usize);
    for members in atlas.members() {
        let m = members.len();
        if m < 2 {
            per_roi.push(None);
            continue;
        }
        let mut acc = vec![0.0; t_len];
        let mut self_sq = 0.0;
        for &v in &members {
            let col = z.column(v);
            for (a, x) in acc.iter_mut().zip(col.iter()) {
                *a += x;
            }
            self_sq += col.iter().map(|x| x * x).sum::<f64>();
        }
        let total_sq: f64 = acc.iter().map(|x| x * x).sum();
        let h = (total_sq - self_sq) / (m * (m - 1)) as f64;
        per_roi.push(Some(h));
        sum += h;
        count += 1;
    }
    if count == 0 {
        return Err(GdaipError::Input(
            "homogeneity: every ROI has fewer than two vertices".into(),
        ));
    }
    Ok(HomogeneityResult {
        per_roi,
        mean: sum / count as f64,
    })
}
