//! Functional-connectivity fingerprints and the joint PCA that places group
//! and individual fingerprints in one feature space.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};

use crate::error::{GdaipError, Result};

/// Time points × vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesMatrix {
    data: Array2<f64>,
}

impl TimeSeriesMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(GdaipError::Input(format!(
                "time series needs at least 2 time points, got {}",
                data.nrows()
            )));
        }
        if data.ncols() == 0 {
            return Err(GdaipError::Input("time series has no vertices".into()));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            let (t, v) = (pos / data.ncols(), pos % data.ncols());
            return Err(GdaipError::Input(format!(
                "non-finite sample at time {t}, vertex {v}"
            )));
        }
        Ok(TimeSeriesMatrix { data })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn t_len(&self) -> usize {
        self.data.nrows()
    }

    pub fn vertex_count(&self) -> usize {
        self.data.ncols()
    }
}

/// Vertex-by-vertex correlation matrix. Row `i` is vertex `i`'s fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct FcMatrix {
    values: Array2<f64>,
    /// Vertices whose series had zero variance.
    degenerate: Vec<usize>,
}

impl FcMatrix {
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(GdaipError::Shape(format!(
                "FC matrix must be square, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        Ok(FcMatrix {
            values,
            degenerate: Vec::new(),
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn vertex_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn degenerate(&self) -> &[usize] {
        &self.degenerate
    }
}

/// Per-vertex feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(GdaipError::Input("feature matrix has non-finite entries".into()));
        }
        Ok(FeatureMatrix { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn vertex_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Pearson correlation between every pair of vertex series.
///
/// Series are centered first (two-pass), so the result does not depend on
/// offsets. Zero-variance vertices get a zero row and column with a unit
/// diagonal and are listed in [`FcMatrix::degenerate`].
pub fn pearson_fc(ts: &TimeSeriesMatrix) -> Result<FcMatrix> {
    let data = ts.data();
    let (t_len, n) = data.dim();
    if t_len < 2 {
        return Err(GdaipError::Input("pearson_fc needs T >= 2".into()));
    }
    let mean = data.mean_axis(Axis(0)).expect("T >= 2");
    let mut z = data - &mean.view().insert_axis(Axis(0));
    let mut degenerate = Vec::new();
    for (v, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
        let ss: f64 = col.iter().map(|x| x * x).sum();
        let scale = data
            .column(v)
            .iter()
            .fold(1.0_f64, |m, x| m.max(x.abs()));
        if (ss / t_len as f64).sqrt() <= 1e-12 * scale {
            col.fill(0.0);
            degenerate.push(v);
        } else {
            let inv = 1.0 / ss.sqrt();
            col.mapv_inplace(|x| x * inv);
        }
    }
    let mut c = z.t().dot(&z);
    for i in 0..n {
        for j in 0..n {
            c[[i, j]] = c[[i, j]].clamp(-1.0, 1.0);
        }
        c[[i, i]] = 1.0;
    }
    // enforce exact symmetry independent of the product kernel
    for i in 0..n {
        for j in (i + 1)..n {
            c[[j, i]] = c[[i, j]];
        }
    }
    Ok(FcMatrix {
        values: c,
        degenerate,
    })
}

/// Fisher r-to-z transform (off by default in the pipeline).
pub fn fisher_z(fc: &FcMatrix) -> FcMatrix {
    const LIMIT: f64 = 1.0 - 1e-7;
    FcMatrix {
        values: fc.values.mapv(|r| r.clamp(-LIMIT, LIMIT).atanh()),
        degenerate: fc.degenerate.clone(),
    }
}

/// Element-wise mean of subject FC matrices.
pub fn group_average(fcs: &[FcMatrix]) -> Result<FcMatrix> {
    let first = fcs
        .first()
        .ok_or_else(|| GdaipError::Input("group_average needs at least one matrix".into()))?;
    let n = first.vertex_count();
    let mut sum = Array2::<f64>::zeros((n, n));
    for (k, fc) in fcs.iter().enumerate() {
        if fc.vertex_count() != n {
            return Err(GdaipError::Shape(format!(
                "matrix {k} has {} vertices, expected {n}",
                fc.vertex_count()
            )));
        }
        sum += &fc.values;
    }
    sum /= fcs.len() as f64;
    Ok(FcMatrix {
        values: sum,
        degenerate: Vec::new(),
    })
}

#[derive(Debug, Clone)]
pub struct JointPca {
    pub source: FeatureMatrix,
    pub target: FeatureMatrix,
    /// Right singular vectors as columns (N × d).
    pub components: Array2<f64>,
    /// Variance captured by each component, descending.
    pub explained_variance: Vec<f64>,
    /// Share of the total variance per component.
    pub explained_variance_ratio: Vec<f64>,
    /// Components that were zero-padded because the data rank was below `d`.
    pub padded_components: usize,
}

/// Applies one PCA to the row concatenation of group and individual FC and
/// splits the projected rows back into source and target features.
///
/// Columns are centered with the joint mean. Each component's sign is fixed
/// so that its largest-magnitude coordinate is positive (first index wins
/// ties), which makes the projection deterministic.
pub fn joint_pca(c_source: &FcMatrix, c_target: &FcMatrix, d: usize) -> Result<JointPca> {
    let n = c_source.vertex_count();
    if c_target.vertex_count() != n {
        return Err(GdaipError::Shape(format!(
            "source FC has {n} vertices, target FC has {}",
            c_target.vertex_count()
        )));
    }
    if d == 0 || d > n {
        return Err(GdaipError::Input(format!(
            "PCA dimension must lie in 1..={n}, got {d}"
        )));
    }

    let mut stacked = Array2::<f64>::zeros((2 * n, n));
    stacked
        .slice_mut(ndarray::s![..n, ..])
        .assign(c_source.values());
    stacked
        .slice_mut(ndarray::s![n.., ..])
        .assign(c_target.values());
    let mean: Array1<f64> = stacked.mean_axis(Axis(0)).expect("2n > 0 rows");
    stacked -= &mean.view().insert_axis(Axis(0));

    let centered = DMatrix::from_fn(2 * n, n, |i, j| stacked[[i, j]]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let singular = svd.singular_values;

    let mut order: Vec<usize> = (0..singular.len()).collect();
    order.sort_by(|&a, &b| singular[b].total_cmp(&singular[a]).then(a.cmp(&b)));

    let s_max = singular.iter().fold(0.0_f64, |m, &s| m.max(s));
    let tol = s_max * (2 * n) as f64 * f64::EPSILON;
    let total_ss: f64 = singular.iter().map(|s| s * s).sum();
    let dof = (2 * n - 1).max(1) as f64;

    let mut components = Array2::<f64>::zeros((n, d));
    let mut explained_variance = Vec::with_capacity(d);
    let mut explained_variance_ratio = Vec::with_capacity(d);
    let mut padded = 0;
    for (c, &k) in order.iter().take(d).enumerate() {
        let s = singular[k];
        if s <= tol || s_max == 0.0 {
            padded += 1;
            explained_variance.push(0.0);
            explained_variance_ratio.push(0.0);
            continue;
        }
        let row = v_t.row(k);
        let mut pivot = 0;
        for j in 1..n {
            if row[j].abs() > row[pivot].abs() {
                pivot = j;
            }
        }
        let sign = if row[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            components[[j, c]] = sign * row[j];
        }
        explained_variance.push(s * s / dof);
        explained_variance_ratio.push(if total_ss > 0.0 { s * s / total_ss } else { 0.0 });
    }
    // fewer singular values than requested (cannot happen for 2n x n, kept for clarity)
    for _ in order.len()..d {
        padded += 1;
        explained_variance.push(0.0);
        explained_variance_ratio.push(0.0);
    }
    if padded > 0 {
        log::warn!("joint_pca: data rank below {d}; {padded} component(s) zero-padded");
    }

    // explicit row-wise projection so identical input rows give identical features
    let mut projected = Array2::<f64>::zeros((2 * n, d));
    for i in 0..2 * n {
        let row = stacked.row(i);
        for c in 0..d {
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * components[[j, c]];
            }
            projected[[i, c]] = acc;
        }
    }
    let source = projected.slice(ndarray::s![..n, ..]).to_owned();
    let target = projected.slice(ndarray::s![n.., ..]).to_owned();
    Ok(JointPca {
        source: FeatureMatrix::new(source)?,
        target: FeatureMatrix::new(target)?,
        components,
        explained_variance,
        explained_variance_ratio,
        padded_components: padded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_ts(rng: &mut ChaCha8Rng, t: usize, n: usize) -> TimeSeriesMatrix {
        TimeSeriesMatrix::new(Array2::from_shape_fn((t, n), |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn copies_and_negations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut data = random_ts(&mut rng, 20, 4).into_data();
        let col0 = data.column(0).to_owned();
        data.column_mut(1).assign(&col0);
        data.column_mut(2).assign(&col0.mapv(|x| -x));
        let fc = pearson_fc(&TimeSeriesMatrix::new(data).unwrap()).unwrap();
        assert!((fc.values()[[0, 1]] - 1.0).abs() < 1e-12);
        assert!((fc.values()[[0, 2]] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_short_series_rejected() {
        assert!(TimeSeriesMatrix::new(Array2::zeros((1, 3))).is_err());
        let bad = array![[1.0, f64::NAN], [0.0, 1.0]];
        assert!(TimeSeriesMatrix::new(bad).is_err());
    }

    #[test]
    fn zero_variance_vertex_is_flagged() {
        let data = array![[1.0, 0.5, 2.0], [2.0, 0.5, 1.0], [3.0, 0.5, 5.0]];
        let fc = pearson_fc(&TimeSeriesMatrix::new(data).unwrap()).unwrap();
        assert_eq!(fc.degenerate(), &[1]);
        assert_eq!(fc.values()[[1, 1]], 1.0);
        assert_eq!(fc.values()[[0, 1]], 0.0);
        assert_eq!(fc.values()[[1, 2]], 0.0);
    }

    #[test]
    fn fc_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fc = pearson_fc(&random_ts(&mut rng, 15, 9)).unwrap();
        let v = fc.values();
        for i in 0..9 {
            assert_eq!(v[[i, i]], 1.0);
            for j in 0..9 {
                assert_eq!(v[[i, j]], v[[j, i]]);
                assert!(v[[i, j]].abs() <= 1.0);
            }
        }
    }

    #[test]
    fn group_average_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fc = pearson_fc(&random_ts(&mut rng, 12, 5)).unwrap();
        assert_eq!(group_average(std::slice::from_ref(&fc)).unwrap().values(), fc.values());
        let neg = FcMatrix::from_values(fc.values().mapv(|x| -x)).unwrap();
        let avg = group_average(&[fc, neg]).unwrap();
        assert!(avg.values().iter().all(|&x| x == 0.0));
        assert!(group_average(&[]).is_err());
    }

    #[test]
    fn identical_inputs_give_identical_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fc = pearson_fc(&random_ts(&mut rng, 30, 12)).unwrap();
        let pca = joint_pca(&fc, &fc, 4).unwrap();
        assert_eq!(pca.source.values(), pca.target.values());
    }

    #[test]
    fn rank_one_input_explains_everything() {
        let u = Array1::from(vec![1.0, -2.0, 0.5, 3.0]);
        let m = Array2::from_shape_fn((4, 4), |(i, j)| u[i] * u[j]);
        let a = FcMatrix::from_values(m.clone()).unwrap();
        let b = FcMatrix::from_values(m.mapv(|x| 2.0 * x)).unwrap();
        let pca = joint_pca(&a, &b, 1).unwrap();
        assert!((pca.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        let padded = joint_pca(&a, &b, 3).unwrap();
        assert_eq!(padded.padded_components, 2);
    }

    #[test]
    fn pca_dimension_checked() {
        let fc = FcMatrix::from_values(Array2::eye(3)).unwrap();
        assert!(joint_pca(&fc, &fc, 4).is_err());
        assert!(joint_pca(&fc, &fc, 0).is_err());
    }

    #[test]
    fn components_orthonormal_and_variance_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = pearson_fc(&random_ts(&mut rng, 40, 20)).unwrap();
        let b = pearson_fc(&random_ts(&mut rng, 40, 20)).unwrap();
        let pca = joint_pca(&a, &b, 6).unwrap();
        let gram = pca.components.t().dot(&pca.components);
        for i in 0..6 {
            for j in 0..6 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - expect).abs() < 1e-10);
            }
        }
        for w in pca.explained_variance.windows(2) {
            assert!(w[0] >= w[1]);
        }
        let again = joint_pca(&a, &b, 6).unwrap();
        assert_eq!(again.source.values(), pca.source.values());
        assert_eq!(again.target.values(), pca.target.values());
    }
}
