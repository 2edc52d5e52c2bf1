//! Brute-force reference implementations shared by the integration tests.
//! Each one recomputes a library result by a deliberately different route.

#![allow(dead_code)]

use std::collections::{HashSet, VecDeque};

use gdaip::mesh_graph::{AdjacencyMatrix, UNREACHABLE};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random simple undirected graph as neighbor lists (each list unsorted).
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, edge_prob: f64) -> Vec<Vec<usize>> {
    let mut lists = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random_bool(edge_prob) {
                lists[i].push(j);
                lists[j].push(i);
            }
        }
    }
    lists
}

pub fn adjacency(lists: &[Vec<usize>]) -> AdjacencyMatrix {
    AdjacencyMatrix::from_neighbor_lists(lists.to_vec()).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, n_roi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n_roi)).collect()
}

/// Per-ROI Dice from explicit vertex sets.
pub fn dice_oracle(a: &[usize], b: &[usize], n_roi: usize) -> Vec<Option<f64>> {
    (0..n_roi)
        .map(|r| {
            let sa: HashSet<usize> = (0..a.len()).filter(|&v| a[v] == r).collect();
            let sb: HashSet<usize> = (0..b.len()).filter(|&v| b[v] == r).collect();
            if sa.is_empty() && sb.is_empty() {
                None
            } else {
                Some(2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64)
            }
        })
        .collect()
}

/// Two-pass Pearson correlation of columns `i` and `j`; 0 when either is
/// constant.
pub fn pearson_oracle(data: &Array2<f64>, i: usize, j: usize) -> f64 {
    let t = data.nrows() as f64;
    let mi = data.column(i).sum() / t;
    let mj = data.column(j).sum() / t;
    let (mut sij, mut sii, mut sjj) = (0.0, 0.0, 0.0);
    for k in 0..data.nrows() {
        let (x, y) = (data[[k, i]] - mi, data[[k, j]] - mj);
        sij += x * y;
        sii += x * x;
        sjj += y * y;
    }
    if sii == 0.0 || sjj == 0.0 {
        0.0
    } else {
        sij / (sii.sqrt() * sjj.sqrt())
    }
}

/// Full FC matrix, entry by entry, diagonal 1.
pub fn fc_oracle(data: &Array2<f64>) -> Array2<f64> {
    let n = data.ncols();
    Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { pearson_oracle(data, i, j) })
}

/// Mean of all off-diagonal pairwise correlations per ROI, then the
/// unweighted mean over ROIs with at least two vertices.
pub fn homogeneity_oracle(labels: &[usize], n_roi: usize, data: &Array2<f64>) -> (Vec<Option<f64>>, f64) {
    let mut per = Vec::new();
    for r in 0..n_roi {
        let m: Vec<usize> = (0..labels.len()).filter(|&v| labels[v] == r).collect();
        if m.len() < 2 {
            per.push(None);
            continue;
        }
        let (mut sum, mut count) = (0.0, 0usize);
        for &a in &m {
            for &b in &m {
                if a != b {
                    sum += pearson_oracle(data, a, b);
                    count += 1;
                }
            }
        }
        per.push(Some(sum / count as f64));
    }
    let scored: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = scored.iter().sum::<f64>() / scored.len() as f64;
    (per, mean)
}

/// Exhaustive per-edge scan.
pub fn boundary_oracle(lists: &[Vec<usize>], labels: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for (i, nbrs) in lists.iter().enumerate() {
        for &j in nbrs {
            if labels[i] != labels[j] {
                out.push(i);
                out.push(j);
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Single-source intra-ROI BFS from each boundary vertex of `roi`; each
/// member keeps the minimum.
pub fn distance_oracle(lists: &[Vec<usize>], labels: &[usize], roi: usize) -> Vec<(usize, usize)> {
    let members: Vec<usize> = (0..labels.len()).filter(|&v| labels[v] == roi).collect();
    let boundary: HashSet<usize> = boundary_oracle(lists, labels).into_iter().collect();
    let mut best = vec![UNREACHABLE; labels.len()];
    for &s in members.iter().filter(|v| boundary.contains(v)) {
        let mut dist = vec![UNREACHABLE; labels.len()];
        dist[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for &w in &lists[u] {
                if labels[w] == roi && dist[w] == UNREACHABLE {
                    dist[w] = dist[u] + 1;
                    q.push_back(w);
                }
            }
        }
        for &v in &members {
            best[v] = best[v].min(dist[v]);
        }
    }
    members.iter().map(|&v| (v, best[v])).collect()
}

/// Core selection with the fraction given in whole percent, so the count
/// `ceil(percent · size / 100)` is exact integer arithmetic.
pub fn core_oracle(lists: &[Vec<usize>], labels: &[usize], n_roi: usize, percent: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..n_roi {
        let mut ranked = distance_oracle(lists, labels, r);
        if ranked.is_empty() {
            continue;
        }
        let k = ((percent * ranked.len()).div_ceil(100)).max(1);
        // distance descending (UNREACHABLE is largest), then index ascending
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        out.extend(ranked[..k].iter().map(|&(v, _)| (v, r)));
    }
    out.sort_unstable();
    out
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix; eigenpairs
/// sorted by descending eigenvalue, eigenvectors as columns.
pub fn jacobi_eigen(mut a: Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).unwrap());
    let values = order.iter().map(|&i| a[[i, i]]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    (values, vectors)
}

/// Joint PCA through the covariance eigenproblem of the stacked, jointly
/// centered samples; same sign rule (largest-magnitude coordinate positive).
pub fn joint_pca_oracle(cs: &Array2<f64>, ct: &Array2<f64>, d: usize) -> (Array2<f64>, Array2<f64>) {
    let n = cs.nrows();
    let stacked = ndarray::concatenate(ndarray::Axis(0), &[cs.view(), ct.view()]).unwrap();
    let mean = stacked.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = &stacked - &mean;
    let cov = centered.t().dot(&centered);
    let (_, vecs) = jacobi_eigen(cov);
    let mut comps = vecs.slice(ndarray::s![.., ..d]).to_owned();
    for mut col in comps.columns_mut() {
        let mut best = 0;
        for i in 0..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.mapv_inplace(|x| -x);
        }
    }
    let proj = centered.dot(&comps);
    (
        proj.slice(ndarray::s![..n, ..]).to_owned(),
        proj.slice(ndarray::s![n.., ..]).to_owned(),
    )
}

/// Adaptive Simpson quadrature.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, left, lm, flm, tol / 2.0, depth - 1)
            + recurse(f, m, fm, b, fb, right, rm, frm, tol / 2.0, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, 50)
}

/// Two-sided Student-t tail probability from the unnormalized density,
/// integrated on `x = tan θ` so both integrals are over finite ranges:
/// `p = ∫_{|t|}^∞ g / ∫_0^∞ g` with `g(x) = (1 + x²/ν)^{-(ν+1)/2}`.
pub fn t_two_sided_oracle(t: f64, df: f64) -> f64 {
    let h = move |theta: f64| {
        let c = theta.cos();
        if c <= 0.0 {
            return if df == 1.0 { 1.0 } else { 0.0 };
        }
        let x = theta.tan();
        (1.0 + x * x / df).powf(-(df + 1.0) / 2.0) / (c * c)
    };
    let half_pi = std::f64::consts::FRAC_PI_2;
    let tail = adaptive_simpson(&h, t.abs().atan(), half_pi, 1e-14);
    let whole = adaptive_simpson(&h, 0.0, half_pi, 1e-14);
    tail / whole
}
