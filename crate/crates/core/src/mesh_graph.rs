//! Surface-mesh topology and atlas-guided core-region extraction.
//!
//! Two vertices are adjacent when they share a triangle. Region boundaries,
//! hop distances to those boundaries and the per-region "core" (the vertices
//! deepest inside each region) are all computed on that adjacency.

use std::collections::{HashMap, VecDeque};

use crate::error::{GdaipError, Result};

/// Hop distance assigned to vertices that cannot reach any boundary vertex.
pub const UNREACHABLE: usize = usize::MAX;

/// Largest icosphere subdivision level accepted by [`icosphere`].
pub const MAX_SUBDIVISIONS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMesh {
    coords: Vec<[f64; 3]>,
    triangles: Vec<[usize; 3]>,
}

impl SurfaceMesh {
    /// Validates triangle indices and rejects degenerate triangles.
    pub fn new(coords: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if coords.is_empty() {
            return Err(GdaipError::Structural("mesh has no vertices".into()));
        }
        validate_triangles(coords.len(), &triangles)?;
        Ok(SurfaceMesh { coords, triangles })
    }

    pub fn vertex_count(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Number of distinct undirected edges.
    pub fn edge_count(&self) -> usize {
        build_adjacency(self).edge_count()
    }
}

fn validate_triangles(vertex_count: usize, triangles: &[[usize; 3]]) -> Result<()> {
    for (t, tri) in triangles.iter().enumerate() {
        if let Some(&bad) = tri.iter().find(|&&v| v >= vertex_count) {
            return Err(GdaipError::Structural(format!(
                "triangle {t} references vertex {bad} but the mesh has {vertex_count} vertices"
            )));
        }
        if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
            return Err(GdaipError::Structural(format!(
                "triangle {t} is degenerate: {tri:?}"
            )));
        }
    }
    Ok(())
}

/// Symmetric sparse adjacency stored as sorted neighbor lists, no self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    neighbors: Vec<Vec<usize>>,
}

impl AdjacencyMatrix {
    pub fn from_triangles(vertex_count: usize, triangles: &[[usize; 3]]) -> Result<Self> {
        validate_triangles(vertex_count, triangles)?;
        let mut neighbors = vec![Vec::new(); vertex_count];
        for &[a, b, c] in triangles {
            for (u, v) in [(a, b), (b, c), (a, c)] {
                neighbors[u].push(v);
                neighbors[v].push(u);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(AdjacencyMatrix { neighbors })
    }

    /// Builds from explicit neighbor lists; the result is symmetrized,
    /// sorted and stripped of self-loops.
    pub fn from_neighbor_lists(lists: Vec<Vec<usize>>) -> Result<Self> {
        let n = lists.len();
        let mut neighbors = vec![Vec::new(); n];
        for (i, list) in lists.iter().enumerate() {
            for &j in list {
                if j >= n {
                    return Err(GdaipError::Structural(format!(
                        "vertex {i} lists neighbor {j} outside 0..{n}"
                    )));
                }
                if i != j {
                    neighbors[i].push(j);
                    neighbors[j].push(i);
                }
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(AdjacencyMatrix { neighbors })
    }

    pub fn vertex_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, vertex: usize) -> &[usize] {
        &self.neighbors[vertex]
    }

    pub fn degree(&self, vertex: usize) -> usize {
        self.neighbors[vertex].len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors.iter().enumerate().all(|(i, list)| {
            list.iter()
                .all(|&j| j != i && self.neighbors[j].binary_search(&i).is_ok())
        })
    }

    /// Undirected edges `(i, j)` with `i < j`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors.iter().enumerate().flat_map(|(i, list)| {
            list.iter().copied().filter(move |&j| j > i).map(move |j| (i, j))
        })
    }

    pub fn is_connected(&self) -> bool {
        let n = self.vertex_count();
        if n == 0 {
            return true;
        }
        let hops = bfs_hops(self, &[0], |_, _| true);
        hops.iter().all(|&h| h != UNREACHABLE)
    }
}

pub fn build_adjacency(mesh: &SurfaceMesh) -> AdjacencyMatrix {
    AdjacencyMatrix::from_triangles(mesh.vertex_count(), mesh.triangles())
        .expect("SurfaceMesh invariants guarantee valid triangles")
}

/// Multi-source BFS over edges accepted by `follow(from, to)`.
pub(crate) fn bfs_hops(
    adj: &AdjacencyMatrix,
    sources: &[usize],
    follow: impl Fn(usize, usize) -> bool,
) -> Vec<usize> {
    let mut hops = vec![UNREACHABLE; adj.vertex_count()];
    let mut queue = VecDeque::with_capacity(adj.vertex_count());
    for &s in sources {
        if hops[s] == UNREACHABLE {
            hops[s] = 0;
            queue.push_back(s);
        }
    }
    while let Some(u) = queue.pop_front() {
        for &v in adj.neighbors(u) {
            if hops[v] == UNREACHABLE && follow(u, v) {
                hops[v] = hops[u] + 1;
                queue.push_back(v);
            }
        }
    }
    hops
}

/// One region label per vertex.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Parcellation {
    labels: Vec<usize>,
    n_roi: usize,
}

impl Parcellation {
    pub fn new(labels: Vec<usize>, n_roi: usize) -> Result<Self> {
        if n_roi == 0 {
            return Err(GdaipError::Input("n_roi must be positive".into()));
        }
        if let Some((v, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= n_roi) {
            return Err(GdaipError::Input(format!(
                "vertex {v} has label {l}, expected < {n_roi}"
            )));
        }
        Ok(Parcellation { labels, n_roi })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, vertex: usize) -> usize {
        self.labels[vertex]
    }

    pub fn n_roi(&self) -> usize {
        self.n_roi
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Members of every ROI, each list ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_roi];
        for (v, &l) in self.labels.iter().enumerate() {
            out[l].push(v);
        }
        out
    }

    pub fn roi_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_roi];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    pub(crate) fn check_against(&self, adj: &AdjacencyMatrix) -> Result<()> {
        if self.len() != adj.vertex_count() {
            return Err(GdaipError::Shape(format!(
                "parcellation covers {} vertices but the graph has {}",
                self.len(),
                adj.vertex_count()
            )));
        }
        Ok(())
    }
}

/// Target-domain vertices that receive atlas labels, plus the fraction used.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreRegionSet {
    /// `(vertex, label)` pairs sorted by vertex.
    labeled: Vec<(usize, usize)>,
    fraction: f64,
    vertex_count: usize,
}

impl CoreRegionSet {
    pub fn labeled(&self) -> &[(usize, usize)] {
        &self.labeled
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn vertices(&self) -> Vec<usize> {
        self.labeled.iter().map(|&(v, _)| v).collect()
    }

    pub fn contains(&self, vertex: usize) -> bool {
        self.labeled.binary_search_by_key(&vertex, |&(v, _)| v).is_ok()
    }

    /// Complement of the labeled set, ascending.
    pub fn unlabeled(&self) -> Vec<usize> {
        let mut mask = vec![true; self.vertex_count];
        for &(v, _) in &self.labeled {
            mask[v] = false;
        }
        (0..self.vertex_count).filter(|&v| mask[v]).collect()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn len(&self) -> usize {
        self.labeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labeled.is_empty()
    }
}

/// Vertices with at least one neighbor carrying a different label, ascending.
pub fn boundary_vertices(adj: &AdjacencyMatrix, atlas: &Parcellation) -> Result<Vec<usize>> {
    atlas.check_against(adj)?;
    Ok((0..adj.vertex_count())
        .filter(|&i| {
            adj.neighbors(i)
                .iter()
                .any(|&j| atlas.label(j) != atlas.label(i))
        })
        .collect())
}

/// Hop distances of one ROI's members to that ROI's boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiDistances {
    /// ROI members, ascending.
    pub members: Vec<usize>,
    /// Distance per member; [`UNREACHABLE`] when no boundary vertex is reachable.
    pub hops: Vec<usize>,
    /// Set when the ROI has no members.
    pub empty_roi: bool,
}

/// Intra-ROI hop distance of every vertex to its own ROI's boundary set.
///
/// Paths never leave the vertex's ROI, so a single multi-source BFS from all
/// boundary vertices computes every ROI at once.
pub fn boundary_distances(adj: &AdjacencyMatrix, atlas: &Parcellation) -> Result<Vec<usize>> {
    let sources = boundary_vertices(adj, atlas)?;
    Ok(bfs_hops(adj, &sources, |u, v| atlas.label(u) == atlas.label(v)))
}

pub fn distance_to_boundary(
    adj: &AdjacencyMatrix,
    atlas: &Parcellation,
    roi: usize,
) -> Result<RoiDistances> {
    if roi >= atlas.n_roi() {
        return Err(GdaipError::Input(format!(
            "roi {roi} outside 0..{}",
            atlas.n_roi()
        )));
    }
    let all = boundary_distances(adj, atlas)?;
    let members: Vec<usize> = (0..atlas.len()).filter(|&v| atlas.label(v) == roi).collect();
    if members.is_empty() {
        log::warn!("distance_to_boundary: roi {roi} has no vertices");
    }
    let hops = members.iter().map(|&v| all[v]).collect();
    Ok(RoiDistances {
        empty_roi: members.is_empty(),
        members,
        hops,
    })
}

/// Number of core vertices for an ROI of `size` vertices (at least one).
pub fn core_count(size: usize, fraction: f64) -> usize {
    // the small slack keeps e.g. 0.05 * 60 from rounding up to 4
    let k = (fraction * size as f64 - 1e-9).ceil().max(1.0) as usize;
    k.min(size)
}

/// Per ROI, the `ceil(fraction * size)` members farthest from the boundary.
/// Ties rank by ascending vertex index.
pub fn core_region(
    adj: &AdjacencyMatrix,
    atlas: &Parcellation,
    fraction: f64,
) -> Result<CoreRegionSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(GdaipError::Input(format!(
            "core fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let dist = boundary_distances(adj, atlas)?;
    let mut labeled = Vec::new();
    for (roi, mut members) in atlas.members().into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        // members are ascending, so a stable sort keeps index order among ties
        members.sort_by(|&a, &b| dist[b].cmp(&dist[a]));
        let k = core_count(members.len(), fraction);
        labeled.extend(members[..k].iter().map(|&v| (v, roi)));
    }
    labeled.sort_unstable();
    Ok(CoreRegionSet {
        labeled,
        fraction,
        vertex_count: atlas.len(),
    })
}

/// Recursively subdivided icosahedron on the unit sphere with `10 * 4^s + 2` vertices.
pub fn icosphere(subdivisions: usize) -> Result<SurfaceMesh> {
    if subdivisions > MAX_SUBDIVISIONS {
        return Err(GdaipError::Size(format!(
            "icosphere subdivisions {subdivisions} exceeds {MAX_SUBDIVISIONS}"
        )));
    }
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut coords: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    for c in &mut coords {
        *c = normalize(*c);
    }
    let mut triangles: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(triangles.len() * 4);
        let mut midpoint = |a: usize, b: usize, coords: &mut Vec<[f64; 3]>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let (p, q) = (coords[a], coords[b]);
                coords.push(normalize([
                    (p[0] + q[0]) / 2.0,
                    (p[1] + q[1]) / 2.0,
                    (p[2] + q[2]) / 2.0,
                ]));
                coords.len() - 1
            })
        };
        for &[a, b, c] in &triangles {
            let ab = midpoint(a, b, &mut coords);
            let bc = midpoint(b, c, &mut coords);
            let ca = midpoint(c, a, &mut coords);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        triangles = next;
    }
    SurfaceMesh::new(coords, triangles)
}

fn normalize(p: [f64; 3]) -> [f64; 3] {
    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    [p[0] / n, p[1] / n, p[2] / n]
}
