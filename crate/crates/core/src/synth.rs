//! Synthetic corpora with planted ground truth.
//!
//! A reference atlas is planted on an icosphere by farthest-point seeding
//! and BFS Voronoi growth. Each target subject gets its own copy perturbed
//! near ROI boundaries; the reference cores are never touched. Every ROI
//! drives its vertices with a latent signal (a small sinusoid bank plus
//! AR(1) noise), and target sessions pass through a domain shift.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::connectome::TimeSeriesMatrix;
use crate::error::{GdaipError, Result};
use crate::mesh_graph::{
    bfs_hops, build_adjacency, core_region, icosphere, AdjacencyMatrix, Parcellation, SurfaceMesh,
    UNREACHABLE,
};
use crate::metrics::dice;
use crate::seed::{stream_rng, stream_seed};

pub const AR_COEFFICIENT: f64 = 0.3;
/// Innovation standard deviation of the per-ROI AR(1) component.
pub const AR_INNOVATION: f64 = 0.5;
/// Core fraction protected from perturbation.
pub const PROTECTED_CORE_FRACTION: f64 = 0.05;
pub const MIN_T: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Std of the additive Gaussian noise.
    pub noise_sigma: f64,
    /// Centered moving-average window (1 disables smoothing).
    pub smoothing_width: usize,
    pub scale: f64,
}

impl ShiftSpec {
    pub const NEUTRAL: ShiftSpec = ShiftSpec {
        noise_sigma: 0.0,
        smoothing_width: 1,
        scale: 1.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub subdivisions: usize,
    pub n_roi: usize,
    pub n_subjects: usize,
    pub sessions: usize,
    /// Subjects averaged into the source group.
    pub source_subjects: usize,
    pub t_len: usize,
    /// Sinusoids per ROI signal.
    pub signal_dim: usize,
    pub vertex_sigma: f64,
    pub perturbation: f64,
    /// Applied to target sessions only; `None` leaves them unshifted.
    pub shift: Option<ShiftSpec>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subdivisions: 3,
            n_roi: 20,
            n_subjects: 10,
            sessions: 2,
            source_subjects: 4,
            t_len: 200,
            signal_dim: 3,
            vertex_sigma: 1.0,
            perturbation: 0.3,
            shift: Some(ShiftSpec {
                noise_sigma: 1.0,
                smoothing_width: 3,
                scale: 2.0,
            }),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GdaipError::Config(m));
        if self.n_roi == 0 || self.n_subjects == 0 || self.sessions == 0 || self.source_subjects == 0 {
            return bad("synthetic counts must be positive".into());
        }
        if self.signal_dim == 0 {
            return bad("signal_dim must be positive".into());
        }
        if self.t_len < MIN_T {
            return bad(format!("t_len must be at least {MIN_T}, got {}", self.t_len));
        }
        if !(self.vertex_sigma >= 0.0) {
            return bad("vertex_sigma must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.perturbation) {
            return bad(format!("perturbation must lie in [0, 1], got {}", self.perturbation));
        }
        if let Some(shift) = &self.shift {
            validate_shift(shift, self.t_len)?;
        }
        Ok(())
    }
}

fn validate_shift(shift: &ShiftSpec, t_len: usize) -> Result<()> {
    if shift.smoothing_width == 0 || 4 * shift.smoothing_width >= t_len {
        return Err(GdaipError::Config(format!(
            "smoothing width must lie in [1, T/4), got {} for T = {t_len}",
            shift.smoothing_width
        )));
    }
    if !(shift.noise_sigma >= 0.0) || !shift.scale.is_finite() || shift.scale == 0.0 {
        return Err(GdaipError::Config(
            "shift noise must be non-negative and scale finite and nonzero".into(),
        ));
    }
    Ok(())
}

/// Farthest-point seeds under the hop metric (first seed random), then a
/// simultaneous BFS from all seeds; each vertex joins the first front to
/// reach it.
pub fn planted_atlas(mesh: &SurfaceMesh, n_roi: usize, seed: u64) -> Result<Parcellation> {
    let adj = build_adjacency(mesh);
    planted_atlas_on(&adj, n_roi, seed)
}

pub fn planted_atlas_on(adj: &AdjacencyMatrix, n_roi: usize, seed: u64) -> Result<Parcellation> {
    let n = adj.vertex_count();
    if n_roi == 0 || n_roi > n {
        return Err(GdaipError::Input(format!(
            "n_roi must lie in [1, {n}], got {n_roi}"
        )));
    }
    if !adj.is_connected() {
        return Err(GdaipError::Input("planted atlas needs a connected mesh".into()));
    }
    let mut rng = stream_rng(seed, &["planted-atlas"]);
    let mut seeds = vec![rng.random_range(0..n)];
    let mut nearest = bfs_hops(adj, &seeds, |_, _| true);
    while seeds.len() < n_roi {
        let (far, _) = nearest
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty mesh");
        seeds.push(far);
        let from_new = bfs_hops(adj, &[far], |_, _| true);
        for (d, e) in nearest.iter_mut().zip(from_new) {
            *d = (*d).min(e);
        }
    }
    let mut labels = vec![UNREACHABLE; n];
    let mut queue = VecDeque::with_capacity(n);
    for (roi, &s) in seeds.iter().enumerate() {
        labels[s] = roi;
        queue.push_back(s);
    }
    while let Some(u) = queue.pop_front() {
        for &v in adj.neighbors(u) {
            if labels[v] == UNREACHABLE {
                labels[v] = labels[u];
                queue.push_back(v);
            }
        }
    }
    Parcellation::new(labels, n_roi)
}

/// `⌈10·p⌉` synchronous rounds; in each, every unprotected boundary vertex
/// moves with probability `p` to a uniformly chosen neighboring ROI.
/// A flip that would empty its ROI is skipped.
pub fn perturb_atlas(atlas: &Parcellation, adj: &AdjacencyMatrix, p: f64, seed: u64) -> Result<Parcellation> {
    if !(0.0..=1.0).contains(&p) {
        return Err(GdaipError::Input(format!("perturbation must lie in [0, 1], got {p}")));
    }
    atlas.check_against(adj)?;
    let rounds = (10.0 * p).ceil() as usize;
    if rounds == 0 {
        return Ok(atlas.clone());
    }
    let protected = core_region(adj, atlas, PROTECTED_CORE_FRACTION)?;
    let mut rng = stream_rng(seed, &["perturb"]);
    let mut labels = atlas.labels().to_vec();
    let mut sizes = atlas.roi_sizes();
    for _ in 0..rounds {
        let snapshot = labels.clone();
        for v in 0..labels.len() {
            if protected.contains(v) {
                continue;
            }
            let mut foreign: Vec<usize> = adj
                .neighbors(v)
                .iter()
                .map(|&u| snapshot[u])
                .filter(|&l| l != snapshot[v])
                .collect();
            if foreign.is_empty() {
                continue;
            }
            foreign.sort_unstable();
            foreign.dedup();
            // draw both numbers unconditionally so the stream stays aligned
            let flip = rng.random_bool(p);
            let to = *foreign.choose(&mut rng).expect("non-empty");
            let from = labels[v];
            if flip && from != to && sizes[from] > 1 {
                sizes[from] -= 1;
                sizes[to] += 1;
                labels[v] = to;
            }
        }
    }
    Parcellation::new(labels, atlas.n_roi())
}

/// Distinct integer Fourier bins in `[2, T/2 − 1]` for each ROI; kept
/// globally distinct across ROIs while the band has room.
fn draw_bins(rng: &mut impl Rng, n_roi: usize, k: usize, t_len: usize) -> Vec<Vec<usize>> {
    let band: Vec<usize> = (2..t_len / 2).collect();
    if n_roi * k <= band.len() {
        let picked: Vec<usize> = rand::seq::index::sample(rng, band.len(), n_roi * k)
            .into_iter()
            .map(|i| band[i])
            .collect();
        picked.chunks(k).map(|c| c.to_vec()).collect()
    } else {
        let k = k.min(band.len());
        (0..n_roi)
            .map(|_| {
                rand::seq::index::sample(rng, band.len(), k)
                    .into_iter()
                    .map(|i| band[i])
                    .collect()
            })
            .collect()
    }
}

/// Per-ROI latent signals, `T × n_roi`.
pub fn roi_signals(n_roi: usize, signal_dim: usize, t_len: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream_rng(seed, &["roi-signals"]);
    let bins = draw_bins(&mut rng, n_roi, signal_dim, t_len);
    let innovation = Normal::new(0.0, AR_INNOVATION).expect("valid std");
    let mut out = Array2::zeros((t_len, n_roi));
    let tau = std::f64::consts::TAU;
    for (r, roi_bins) in bins.iter().enumerate() {
        let phases: Vec<f64> = roi_bins.iter().map(|_| rng.random_range(0.0..tau)).collect();
        let mut ar = 0.0;
        for t in 0..t_len {
            ar = AR_COEFFICIENT * ar + innovation.sample(&mut rng);
            let wave: f64 = roi_bins
                .iter()
                .zip(&phases)
                .map(|(&f, &ph)| (tau * f as f64 * t as f64 / t_len as f64 + ph).cos())
                .sum();
            out[[t, r]] = wave + ar;
        }
    }
    out
}

/// Vertex `i` emits its ROI's latent signal plus `N(0, σ)`.
pub fn simulate_bold(atlas: &Parcellation, spec: &SynthSpec, seed: u64) -> Result<TimeSeriesMatrix> {
    if spec.t_len < MIN_T {
        return Err(GdaipError::Config(format!("t_len must be at least {MIN_T}")));
    }
    let signals = roi_signals(atlas.n_roi(), spec.signal_dim, spec.t_len, seed);
    let mut rng = stream_rng(seed, &["vertex-noise"]);
    let noise = Normal::new(0.0, spec.vertex_sigma).map_err(|e| GdaipError::Config(e.to_string()))?;
    let mut data = Array2::zeros((spec.t_len, atlas.len()));
    for t in 0..spec.t_len {
        for (v, &l) in atlas.labels().iter().enumerate() {
            data[[t, v]] = signals[[t, l]] + noise.sample(&mut rng);
        }
    }
    TimeSeriesMatrix::new(data)
}

/// Centered moving average (window truncated at the ends), additive noise,
/// then a global scale.
pub fn domain_shift(ts: &TimeSeriesMatrix, shift: &ShiftSpec, seed: u64) -> Result<TimeSeriesMatrix> {
    let data = ts.data();
    let (t_len, n) = data.dim();
    validate_shift(shift, t_len)?;
    let w = shift.smoothing_width;
    let mut out = if w == 1 {
        data.clone()
    } else {
        let (before, after) = ((w - 1) / 2, w / 2);
        Array2::from_shape_fn((t_len, n), |(t, v)| {
            let lo = t.saturating_sub(before);
            let hi = (t + after).min(t_len - 1);
            (lo..=hi).map(|s| data[[s, v]]).sum::<f64>() / (hi - lo + 1) as f64
        })
    };
    if shift.noise_sigma > 0.0 {
        let mut rng = stream_rng(seed, &["shift-noise"]);
        let noise = Normal::new(0.0, shift.noise_sigma).expect("validated");
        out.mapv_inplace(|x| x + noise.sample(&mut rng));
    }
    if shift.scale != 1.0 {
        out.mapv_inplace(|x| x * shift.scale);
    }
    TimeSeriesMatrix::new(out)
}

#[derive(Debug, Clone)]
pub struct SynthSubject {
    pub id: String,
    pub planted: Parcellation,
    /// Session series as the target domain sees them (shifted if enabled).
    pub sessions: Vec<TimeSeriesMatrix>,
    /// The same sessions before the shift.
    pub clean_sessions: Vec<TimeSeriesMatrix>,
}

impl SynthSubject {
    pub fn session_id(index: usize) -> String {
        format!("ses{}", index + 1)
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub mesh: SurfaceMesh,
    pub adjacency: AdjacencyMatrix,
    pub reference: Parcellation,
    pub source_series: Vec<TimeSeriesMatrix>,
    pub subjects: Vec<SynthSubject>,
    /// Mean Dice of each planted atlas against the reference.
    pub planted_difficulty: f64,
}

/// Seeds used for every generated artifact, for the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSeeds {
    pub root: u64,
    pub reference: u64,
    pub source: Vec<u64>,
    pub subject_atlas: Vec<u64>,
    pub session_bold: Vec<Vec<u64>>,
    pub session_shift: Vec<Vec<u64>>,
}

impl CorpusSeeds {
    pub fn derive(spec: &SynthSpec) -> Self {
        let root = spec.seed;
        let sub = |s: usize| format!("subject-{s}");
        let ses = |k: usize| format!("session-{k}");
        CorpusSeeds {
            root,
            reference: stream_seed(root, &["reference-atlas"]),
            source: (0..spec.source_subjects)
                .map(|i| stream_seed(root, &["source", &i.to_string()]))
                .collect(),
            subject_atlas: (0..spec.n_subjects)
                .map(|s| stream_seed(root, &[&sub(s), "atlas"]))
                .collect(),
            session_bold: (0..spec.n_subjects)
                .map(|s| {
                    (0..spec.sessions)
                        .map(|k| stream_seed(root, &[&sub(s), &ses(k), "bold"]))
                        .collect()
                })
                .collect(),
            session_shift: (0..spec.n_subjects)
                .map(|s| {
                    (0..spec.sessions)
                        .map(|k| stream_seed(root, &[&sub(s), &ses(k), "shift"]))
                        .collect()
                })
                .collect(),
        }
    }
}

/// Rounds through f32 so the in-memory corpus equals what the time-series
/// files store.
fn f32_exact(ts: TimeSeriesMatrix) -> Result<TimeSeriesMatrix> {
    TimeSeriesMatrix::new(ts.into_data().mapv(|x| x as f32 as f64))
}

pub fn generate_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mesh = icosphere(spec.subdivisions)?;
    let adjacency = build_adjacency(&mesh);
    let seeds = CorpusSeeds::derive(spec);
    let reference = planted_atlas_on(&adjacency, spec.n_roi, seeds.reference)?;

    let source_series = seeds
        .source
        .par_iter()
        .map(|&s| simulate_bold(&reference, spec, s).and_then(f32_exact))
        .collect::<Result<Vec<_>>>()?;

    let subjects = (0..spec.n_subjects)
        .into_par_iter()
        .map(|s| {
            let planted = perturb_atlas(&reference, &adjacency, spec.perturbation, seeds.subject_atlas[s])?;
            let mut sessions = Vec::with_capacity(spec.sessions);
            let mut clean_sessions = Vec::with_capacity(spec.sessions);
            for k in 0..spec.sessions {
                let clean = simulate_bold(&planted, spec, seeds.session_bold[s][k])?;
                let shifted = match &spec.shift {
                    Some(shift) => f32_exact(domain_shift(&clean, shift, seeds.session_shift[s][k])?)?,
                    None => f32_exact(clean.clone())?,
                };
                let clean = f32_exact(clean)?;
                sessions.push(shifted);
                clean_sessions.push(clean);
            }
            Ok(SynthSubject {
                id: format!("sub{:02}", s + 1),
                planted,
                sessions,
                clean_sessions,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut total = 0.0;
    for subject in &subjects {
        total += dice(&subject.planted, &reference)?.mean;
    }
    let planted_difficulty = total / subjects.len() as f64;
    Ok(SynthCorpus {
        spec: *spec,
        mesh,
        adjacency,
        reference,
        source_series,
        subjects,
        planted_difficulty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectome::pearson_fc;
    use crate::mesh_graph::boundary_distances;
    use crate::metrics::homogeneity;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            subdivisions: 2,
            n_roi: 6,
            t_len: 64,
            ..SynthSpec::default()
        }
    }

    fn connected_components(adj: &AdjacencyMatrix, atlas: &Parcellation, roi: usize) -> usize {
        // union-find over intra-ROI edges
        let n = adj.vertex_count();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            p[x] = r;
            r
        }
        for (a, b) in adj.edges() {
            if atlas.label(a) == roi && atlas.label(b) == roi {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra] = rb;
            }
        }
        let mut roots: Vec<usize> = (0..n)
            .filter(|&v| atlas.label(v) == roi)
            .map(|v| find(&mut parent, v))
            .collect();
        roots.sort_unstable();
        roots.dedup();
        roots.len()
    }

    #[test]
    fn planted_atlas_trivial_sizes() {
        let mesh = icosphere(1).unwrap();
        let one = planted_atlas(&mesh, 1, 3).unwrap();
        assert!(one.labels().iter().all(|&l| l == 0));
        let n = mesh.vertex_count();
        let each = planted_atlas(&mesh, n, 3).unwrap();
        let mut seen = each.labels().to_vec();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        assert!(planted_atlas(&mesh, n + 1, 3).is_err());
    }

    #[test]
    fn planted_atlas_rois_connected() {
        let mesh = icosphere(3).unwrap();
        let adj = build_adjacency(&mesh);
        for seed in 0..3 {
            let atlas = planted_atlas(&mesh, 20, seed).unwrap();
            for r in 0..20 {
                assert_eq!(connected_components(&adj, &atlas, r), 1, "roi {r} seed {seed}");
            }
        }
    }

    #[test]
    fn planted_atlas_rejects_disconnected() {
        let adj = AdjacencyMatrix::from_neighbor_lists(vec![vec![1], vec![0], vec![]]).unwrap();
        assert!(planted_atlas_on(&adj, 2, 0).is_err());
    }

    #[test]
    fn perturbation_zero_is_identity() {
        let mesh = icosphere(2).unwrap();
        let adj = build_adjacency(&mesh);
        let atlas = planted_atlas(&mesh, 8, 1).unwrap();
        assert_eq!(perturb_atlas(&atlas, &adj, 0.0, 9).unwrap(), atlas);
    }

    #[test]
    fn perturbation_is_local_and_keeps_cores() {
        let mesh = icosphere(3).unwrap();
        let adj = build_adjacency(&mesh);
        let atlas = planted_atlas(&mesh, 20, 2).unwrap();
        let dist = boundary_distances(&adj, &atlas).unwrap();
        let cores = core_region(&adj, &atlas, PROTECTED_CORE_FRACTION).unwrap();
        for &p in &[0.1, 0.3, 0.7] {
            let out = perturb_atlas(&atlas, &adj, p, 4).unwrap();
            let rounds = (10.0 * p as f64).ceil() as usize;
            for v in 0..atlas.len() {
                if out.label(v) != atlas.label(v) {
                    assert!(dist[v] <= rounds);
                    assert!(!cores.contains(v));
                }
            }
            assert!(out.roi_sizes().iter().all(|&s| s > 0));
        }
        let d = dice(&perturb_atlas(&atlas, &adj, 0.3, 4).unwrap(), &atlas).unwrap().mean;
        assert!(d > 0.0 && d < 1.0);
    }

    #[test]
    fn noiseless_bold_is_homogeneous() {
        let mesh = icosphere(2).unwrap();
        let atlas = planted_atlas(&mesh, 6, 0).unwrap();
        let spec = SynthSpec {
            vertex_sigma: 0.0,
            ..small_spec()
        };
        let ts = simulate_bold(&atlas, &spec, 5).unwrap();
        let h = homogeneity(&atlas, &ts).unwrap();
        assert!((h.mean - 1.0).abs() < 1e-12);
        assert_eq!(ts, simulate_bold(&atlas, &spec, 5).unwrap());
    }

    #[test]
    fn distinct_rois_are_nearly_uncorrelated() {
        let atlas = Parcellation::new(vec![0, 1], 2).unwrap();
        let spec = SynthSpec {
            vertex_sigma: 0.0,
            t_len: 1024,
            ..SynthSpec::default()
        };
        for seed in 0..5 {
            let ts = simulate_bold(&atlas, &spec, seed).unwrap();
            let fc = pearson_fc(&ts).unwrap();
            assert!(fc.values()[[0, 1]].abs() < 0.05, "seed {seed}: {}", fc.values()[[0, 1]]);
        }
    }

    #[test]
    fn neutral_shift_is_identity() {
        let ts = TimeSeriesMatrix::new(Array2::from_shape_fn((40, 3), |(t, v)| (t * (v + 1)) as f64 * 0.1)).unwrap();
        assert_eq!(domain_shift(&ts, &ShiftSpec::NEUTRAL, 1).unwrap(), ts);
    }

    #[test]
    fn shift_scale_keeps_fc() {
        let mesh = icosphere(1).unwrap();
        let atlas = planted_atlas(&mesh, 3, 0).unwrap();
        let ts = simulate_bold(&atlas, &small_spec(), 2).unwrap();
        let shift = ShiftSpec {
            scale: 2.0,
            ..ShiftSpec::NEUTRAL
        };
        let a = pearson_fc(&ts).unwrap();
        let b = pearson_fc(&domain_shift(&ts, &shift, 0).unwrap()).unwrap();
        let diff = (a.values() - b.values()).mapv(f64::abs).fold(0.0f64, |m, &x| m.max(x));
        assert!(diff < 1e-12);
    }

    #[test]
    fn shift_noise_lowers_homogeneity() {
        let mesh = icosphere(2).unwrap();
        let atlas = planted_atlas(&mesh, 6, 0).unwrap();
        let ts = simulate_bold(&atlas, &small_spec(), 3).unwrap();
        let shift = ShiftSpec {
            noise_sigma: 0.5,
            ..ShiftSpec::NEUTRAL
        };
        let before = homogeneity(&atlas, &ts).unwrap().mean;
        let after = homogeneity(&atlas, &domain_shift(&ts, &shift, 1).unwrap()).unwrap().mean;
        assert!(after < before);
    }

    #[test]
    fn shift_rejects_wide_window() {
        let ts = TimeSeriesMatrix::new(Array2::from_shape_fn((40, 2), |(t, v)| (t + v) as f64)).unwrap();
        let shift = ShiftSpec {
            smoothing_width: 10,
            ..ShiftSpec::NEUTRAL
        };
        assert!(domain_shift(&ts, &shift, 0).is_err());
    }

    #[test]
    fn corpus_is_deterministic() {
        let spec = SynthSpec {
            n_subjects: 2,
            source_subjects: 2,
            ..small_spec()
        };
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a.reference, b.reference);
        for (x, y) in a.subjects.iter().zip(&b.subjects) {
            assert_eq!(x.planted, y.planted);
            assert_eq!(x.sessions, y.sessions);
        }
        assert_eq!(a.subjects[0].sessions.len(), spec.sessions);
        assert_ne!(a.subjects[0].sessions[0], a.subjects[0].sessions[1]);
    }
}
