//! Triangular meshes: disk generation, validation, text I/O, uniform
//! refinement, and electrode placement along the boundary.
//!
//! A [`Mesh`] is immutable after construction and every constructor path
//! (generation, parsing, refinement) funnels through the same validation:
//! counterclockwise triangles, conforming edges, and a single closed boundary
//! loop. Electrodes are contiguous runs of boundary nodes produced by
//! [`assign_electrodes`]; their placement is anchored to the geometry (not to
//! node numbering), so relabeling nodes does not move them.
//!
//! # Example
//!
//! ```
//! use eit_core::mesh::{generate_disk_mesh, assign_electrodes};
//!
//! let mesh = generate_disk_mesh(1.0, 0.1).unwrap();
//! let layout = assign_electrodes(&mesh, 16, 0.5).unwrap();
//! assert_eq!(layout.groups().len(), 16);
//! ```

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("mesh topology: {0}")]
    Topology(String),
    #[error("node index {index} out of range ({n_nodes} nodes)")]
    IndexOutOfRange { index: usize, n_nodes: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("electrode layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Conforming triangulation of a planar domain with counterclockwise
/// triangles and a single closed boundary loop.
#[derive(Debug, Clone)]
pub struct Mesh {
    nodes: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary_loop: Vec<usize>,
    neighbors: Vec<[Option<usize>; 3]>,
    areas: Vec<f64>,
}

#[inline]
fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
}

impl Mesh {
    /// Validate connectivity and orientation and derive the boundary loop.
    ///
    /// Rejects out-of-range or repeated vertex indices, non-positive triangle
    /// areas, non-manifold or inconsistently oriented edges, unreferenced
    /// nodes, and boundaries that do not form exactly one closed cycle.
    pub fn new(nodes: Vec<[f64; 2]>, triangles: Vec<[usize; 3]>) -> Result<Mesh, MeshError> {
        let n = nodes.len();
        if n < 3 {
            return Err(MeshError::Topology(format!("need at least 3 nodes, got {n}")));
        }
        if triangles.is_empty() {
            return Err(MeshError::Topology("mesh has no triangles".into()));
        }
        for (i, p) in nodes.iter().enumerate() {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(MeshError::Topology(format!("node {i} has non-finite coordinates")));
            }
        }

        let mut areas = Vec::with_capacity(triangles.len());
        let mut referenced = vec![false; n];
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                if v >= n {
                    return Err(MeshError::IndexOutOfRange { index: v, n_nodes: n });
                }
                referenced[v] = true;
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[2] == tri[0] {
                return Err(MeshError::Topology(format!("triangle {t} repeats a vertex")));
            }
            let a = signed_area(nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]);
            if !(a > 0.0) {
                return Err(MeshError::Topology(format!(
                    "triangle {t} has non-positive signed area {a:e} (vertices must be counterclockwise)"
                )));
            }
            areas.push(a);
        }
        if let Some(i) = referenced.iter().position(|&r| !r) {
            return Err(MeshError::Topology(format!("node {i} is not referenced by any triangle")));
        }

        // Directed edge map; a repeated directed edge means either a duplicated
        // triangle or two neighbors with the same orientation.
        let mut directed: HashMap<(usize, usize), usize> = HashMap::with_capacity(3 * triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            for e in 0..3 {
                let key = (tri[e], tri[(e + 1) % 3]);
                if directed.insert(key, t).is_some() {
                    return Err(MeshError::Topology(format!(
                        "edge ({}, {}) appears twice with the same orientation",
                        key.0, key.1
                    )));
                }
            }
        }

        let mut neighbors = vec![[None; 3]; triangles.len()];
        let mut boundary_next: HashMap<usize, usize> = HashMap::new();
        let mut boundary_edge_count = 0usize;
        for (t, tri) in triangles.iter().enumerate() {
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                match directed.get(&(b, a)) {
                    Some(&other) => neighbors[t][e] = Some(other),
                    None => {
                        boundary_edge_count += 1;
                        if boundary_next.insert(a, b).is_some() {
                            return Err(MeshError::Topology(format!(
                                "boundary forks at node {a} (mesh pinched or non-manifold)"
                            )));
                        }
                    }
                }
            }
        }
        if boundary_edge_count == 0 {
            return Err(MeshError::Topology("mesh has no boundary".into()));
        }

        // Walk the single expected cycle.
        let start = *boundary_next.keys().min().expect("nonempty boundary");
        let mut boundary_loop = Vec::with_capacity(boundary_edge_count);
        let mut cur = start;
        loop {
            boundary_loop.push(cur);
            cur = *boundary_next.get(&cur).ok_or_else(|| {
                MeshError::Topology(format!("boundary walk dead-ends at node {cur}"))
            })?;
            if cur == start {
                break;
            }
            if boundary_loop.len() > boundary_edge_count {
                return Err(MeshError::Topology("boundary walk does not close".into()));
            }
        }
        if boundary_loop.len() != boundary_edge_count {
            return Err(MeshError::Topology(format!(
                "boundary is not a single cycle ({} of {} edges reached)",
                boundary_loop.len(),
                boundary_edge_count
            )));
        }

        // Canonical start: lexicographically smallest coordinate, which is a
        // geometric anchor independent of node numbering.
        let anchor = boundary_loop
            .iter()
            .enumerate()
            .min_by(|(_, &a), (_, &b)| {
                let (pa, pb) = (nodes[a], nodes[b]);
                pa.partial_cmp(&pb).expect("finite coordinates")
            })
            .map(|(i, _)| i)
            .expect("nonempty loop");
        boundary_loop.rotate_left(anchor);

        Ok(Mesh { nodes, triangles, boundary_loop, neighbors, areas })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.triangles.len()
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    #[inline]
    pub fn node(&self, i: usize) -> [f64; 2] {
        self.nodes[i]
    }

    #[inline]
    pub fn triangle(&self, k: usize) -> [usize; 3] {
        self.triangles[k]
    }

    #[inline]
    pub fn area(&self, k: usize) -> f64 {
        self.areas[k]
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    /// Boundary nodes in counterclockwise order, starting from the
    /// lexicographically smallest coordinate.
    pub fn boundary_loop(&self) -> &[usize] {
        &self.boundary_loop
    }

    /// Neighbor across each directed edge (v[e], v[e+1]) of triangle `k`;
    /// `None` marks a boundary edge.
    pub fn neighbors(&self, k: usize) -> [Option<usize>; 3] {
        self.neighbors[k]
    }

    pub fn centroid(&self, k: usize) -> [f64; 2] {
        let [a, b, c] = self.triangles[k];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        [(pa[0] + pb[0] + pc[0]) / 3.0, (pa[1] + pb[1] + pc[1]) / 3.0]
    }

    /// Gradients of the three linear nodal basis functions on triangle `k`,
    /// constant over the element.
    pub fn gradients(&self, k: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.triangles[k];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        let inv2a = 1.0 / (2.0 * self.areas[k]);
        let perp = |u: [f64; 2], v: [f64; 2]| [-(v[1] - u[1]) * inv2a, (v[0] - u[0]) * inv2a];
        // Basis i peaks at vertex i and vanishes on the opposite edge.
        [perp(pb, pc), perp(pc, pa), perp(pa, pb)]
    }

    /// Signed area of the boundary polygon (shoelace formula).
    pub fn boundary_polygon_area(&self) -> f64 {
        let m = self.boundary_loop.len();
        let mut s = 0.0;
        for i in 0..m {
            let p = self.nodes[self.boundary_loop[i]];
            let q = self.nodes[self.boundary_loop[(i + 1) % m]];
            s += p[0] * q[1] - q[0] * p[1];
        }
        0.5 * s
    }

    /// Indices of elements owning at least one boundary edge, ascending.
    pub fn boundary_elements(&self) -> Vec<usize> {
        self.neighbors
            .iter()
            .enumerate()
            .filter(|(_, ns)| ns.iter().any(Option::is_none))
            .map(|(k, _)| k)
            .collect()
    }

    /// Serialize to the plain text format; see [`parse_mesh`] for the layout.
    pub fn to_text(&self, layout: Option<&ElectrodeLayout>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "N {}", self.nodes.len());
        for p in &self.nodes {
            let _ = writeln!(out, "{:.16e} {:.16e}", p[0], p[1]);
        }
        let _ = writeln!(out, "T {}", self.triangles.len());
        for t in &self.triangles {
            let _ = writeln!(out, "{} {} {}", t[0], t[1], t[2]);
        }
        if let Some(layout) = layout {
            let _ = writeln!(out, "E {}", layout.groups.len());
            for g in &layout.groups {
                let words: Vec<String> = g.iter().map(|n| n.to_string()).collect();
                let _ = writeln!(out, "{}", words.join(" "));
            }
        }
        out
    }
}

/// Ordered electrode groups: contiguous runs of boundary nodes, disjoint,
/// following the counterclockwise boundary walk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElectrodeLayout {
    groups: Vec<Vec<usize>>,
}

impl ElectrodeLayout {
    /// Validate `groups` against `mesh` and build the layout.
    pub fn new(groups: Vec<Vec<usize>>, mesh: &Mesh) -> Result<ElectrodeLayout, MeshError> {
        if groups.len() < 2 {
            return Err(MeshError::Layout(format!(
                "need at least 2 electrodes, got {}",
                groups.len()
            )));
        }
        let m = mesh.boundary_loop.len();
        let mut pos_of = HashMap::with_capacity(m);
        for (i, &v) in mesh.boundary_loop.iter().enumerate() {
            pos_of.insert(v, i);
        }
        let mut used = vec![false; m];
        let mut first_pos = Vec::with_capacity(groups.len());
        for (e, g) in groups.iter().enumerate() {
            if g.len() < 2 {
                return Err(MeshError::Layout(format!(
                    "electrode {e} has {} node(s); at least 2 required",
                    g.len()
                )));
            }
            let mut prev: Option<usize> = None;
            for &v in g {
                let p = *pos_of.get(&v).ok_or_else(|| {
                    MeshError::Layout(format!("electrode {e} uses non-boundary node {v}"))
                })?;
                if used[p] {
                    return Err(MeshError::Layout(format!(
                        "node {v} belongs to more than one electrode"
                    )));
                }
                used[p] = true;
                if let Some(pp) = prev {
                    if (pp + 1) % m != p {
                        return Err(MeshError::Layout(format!(
                            "electrode {e} is not a contiguous boundary run at node {v}"
                        )));
                    }
                }
                prev = Some(p);
            }
            first_pos.push(*pos_of.get(&g[0]).expect("validated above"));
        }
        // Counterclockwise electrode order: starting positions must be
        // strictly increasing after rotating the smallest to the front.
        let min_at = first_pos
            .iter()
            .enumerate()
            .min_by_key(|(_, &p)| p)
            .map(|(i, _)| i)
            .expect("nonempty");
        for w in 0..groups.len() - 1 {
            let a = first_pos[(min_at + w) % groups.len()];
            let b = first_pos[(min_at + w + 1) % groups.len()];
            if a >= b {
                return Err(MeshError::Layout(
                    "electrode groups are not in counterclockwise boundary order".into(),
                ));
            }
        }
        Ok(ElectrodeLayout { groups })
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Re-run the construction checks against `mesh`, catching layouts that
    /// were built for a different mesh.
    pub fn check_against(&self, mesh: &Mesh) -> Result<(), MeshError> {
        ElectrodeLayout::new(self.groups.clone(), mesh).map(drop)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group(&self, e: usize) -> &[usize] {
        &self.groups[e]
    }
}

/// Place `count` equally spaced electrodes covering `coverage` of the
/// boundary arclength in total, each rounded to whole boundary edges with at
/// least 2 nodes. Placement is measured from the boundary loop's geometric
/// anchor, so it is independent of node numbering.
pub fn assign_electrodes(
    mesh: &Mesh,
    count: usize,
    coverage: f64,
) -> Result<ElectrodeLayout, MeshError> {
    if count < 2 {
        return Err(MeshError::InvalidParameter(format!("electrode count {count} < 2")));
    }
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(MeshError::InvalidParameter(format!(
            "coverage must be in (0, 1), got {coverage}"
        )));
    }
    let bloop = &mesh.boundary_loop;
    let m = bloop.len();
    if m < 2 * count {
        return Err(MeshError::Layout(format!(
            "boundary has {m} nodes; {count} electrodes need at least {}",
            2 * count
        )));
    }
    // Cumulative arclength of each loop node; cum[m] is the full perimeter.
    let mut cum = Vec::with_capacity(m + 1);
    cum.push(0.0);
    for i in 0..m {
        let p = mesh.nodes[bloop[i]];
        let q = mesh.nodes[bloop[(i + 1) % m]];
        cum.push(cum[i] + ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt());
    }
    let total = cum[m];

    let mut groups = Vec::with_capacity(count);
    let mut last_end: Option<usize> = None;
    let mut first_start = 0usize;
    for e in 0..count {
        let center = (e as f64 + 0.5) * total / count as f64;
        let half = coverage * total / (2.0 * count as f64);
        let (lo, hi) = (center - half, center + half);
        let first = cum[..m].partition_point(|&s| s < lo);
        let mut last = cum[..m].partition_point(|&s| s <= hi);
        // partition_point yields one past the last node inside the window
        last = last.saturating_sub(1);
        let (first, last) = if first + 1 <= last {
            (first, last)
        } else {
            // Window narrower than one edge: take the edge containing the center.
            let i = cum[..m].partition_point(|&s| s <= center).saturating_sub(1);
            (i, i + 1)
        };
        if last >= m {
            return Err(MeshError::Layout(
                "electrode window wraps past the loop anchor; boundary too coarse".into(),
            ));
        }
        if e == 0 {
            first_start = first;
        }
        if let Some(prev_end) = last_end {
            if first <= prev_end {
                return Err(MeshError::Layout(format!(
                    "electrodes {} and {e} overlap; boundary too coarse for coverage {coverage}",
                    e - 1
                )));
            }
        }
        last_end = Some(last);
        groups.push((first..=last).map(|i| bloop[i]).collect::<Vec<_>>());
    }
    if last_end.expect("count >= 2") >= first_start + m {
        return Err(MeshError::Layout("electrodes overlap around the loop".into()));
    }
    ElectrodeLayout::new(groups, mesh)
}

/// A uniformly refined mesh together with the mapping back to its parent.
#[derive(Debug, Clone)]
pub struct RefinedMesh {
    pub mesh: Mesh,
    parent: Vec<usize>,
    midpoint: HashMap<(usize, usize), usize>,
}

impl RefinedMesh {
    /// Parent element of fine element `k`.
    pub fn parent_of(&self, k: usize) -> usize {
        self.parent[k]
    }

    /// Average fine element values over each parent's four children.
    pub fn average_to_parent(&self, fine: &[f64]) -> Vec<f64> {
        assert_eq!(fine.len(), self.parent.len());
        let n_coarse = self.parent.iter().copied().max().map_or(0, |m| m + 1);
        let mut acc = vec![0.0; n_coarse];
        for (v, &p) in fine.iter().zip(&self.parent) {
            acc[p] += v;
        }
        for a in &mut acc {
            *a *= 0.25;
        }
        acc
    }

    /// Carry an electrode layout of the parent mesh onto the refined mesh by
    /// inserting the midpoint node of every electrode edge.
    pub fn lift_layout(&self, coarse: &ElectrodeLayout) -> Result<ElectrodeLayout, MeshError> {
        let mut groups = Vec::with_capacity(coarse.len());
        for g in coarse.groups() {
            let mut fine = Vec::with_capacity(2 * g.len() - 1);
            for w in g.windows(2) {
                let key = (w[0].min(w[1]), w[0].max(w[1]));
                let &mid = self.midpoint.get(&key).ok_or_else(|| {
                    MeshError::Layout(format!(
                        "electrode nodes {} and {} are not joined by a mesh edge",
                        w[0], w[1]
                    ))
                })?;
                fine.push(w[0]);
                fine.push(mid);
            }
            fine.push(*g.last().expect("groups have >= 2 nodes"));
            groups.push(fine);
        }
        ElectrodeLayout::new(groups, &self.mesh)
    }
}

/// Split every triangle into four via edge midpoints. Children of parent `k`
/// occupy indices `4k..4k+4`; original nodes keep their indices.
pub fn refine(mesh: &Mesh) -> RefinedMesh {
    let mut nodes = mesh.nodes.to_vec();
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut triangles = Vec::with_capacity(4 * mesh.n_elements());
    let mut parent = Vec::with_capacity(4 * mesh.n_elements());

    for (k, tri) in mesh.triangles.iter().enumerate() {
        let mut mid = [0usize; 3];
        for e in 0..3 {
            let (a, b) = (tri[e], tri[(e + 1) % 3]);
            let key = (a.min(b), a.max(b));
            mid[e] = *midpoint.entry(key).or_insert_with(|| {
                let (pa, pb) = (nodes[a], nodes[b]);
                nodes.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
                nodes.len() - 1
            });
        }
        let [a, b, c] = *tri;
        let [mab, mbc, mca] = mid;
        triangles.push([a, mab, mca]);
        triangles.push([mab, b, mbc]);
        triangles.push([mca, mbc, c]);
        triangles.push([mab, mbc, mca]);
        parent.extend_from_slice(&[k, k, k, k]);
    }

    let mesh = Mesh::new(nodes, triangles)
        .expect("refinement of a valid mesh preserves all invariants");
    RefinedMesh { mesh, parent, midpoint }
}

/// Triangulate a disk of the given radius with concentric node rings spaced
/// by roughly `target_edge_length`. Between adjacent rings, each quad's
/// diagonal is chosen by the circumcircle test with ties broken toward the
/// lowest node index, so meshes are deterministic.
pub fn generate_disk_mesh(radius: f64, target_edge_length: f64) -> Result<Mesh, MeshError> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(MeshError::InvalidParameter(format!("radius must be positive, got {radius}")));
    }
    if !(target_edge_length > 0.0) || !target_edge_length.is_finite() {
        return Err(MeshError::InvalidParameter(format!(
            "target edge length must be positive, got {target_edge_length}"
        )));
    }
    if target_edge_length >= radius {
        return Err(MeshError::InvalidParameter(format!(
            "target edge length {target_edge_length} must be smaller than radius {radius}"
        )));
    }

    let n_rings = ((radius / target_edge_length).round() as usize).max(2);
    let h = radius / n_rings as f64;
    let ring_count = |r: usize| -> usize {
        if r == 0 {
            1
        } else {
            ((TAU * r as f64).round() as usize).max(3)
        }
    };

    let mut nodes = Vec::new();
    let mut base = Vec::with_capacity(n_rings + 1);
    for r in 0..=n_rings {
        base.push(nodes.len());
        let mr = ring_count(r);
        let rad = r as f64 * h;
        for j in 0..mr {
            let th = TAU * j as f64 / mr as f64;
            nodes.push([rad * th.cos(), rad * th.sin()]);
        }
    }

    let mut triangles = Vec::new();
    for r in 1..=n_rings {
        let (mi, mo) = (ring_count(r - 1), ring_count(r));
        let (bi, bo) = (base[r - 1], base[r]);
        if r == 1 {
            for j in 0..mo {
                triangles.push([bo + j, bo + (j + 1) % mo, bi]);
            }
            continue;
        }
        let inner = |i: usize| bi + i % mi;
        let outer = |o: usize| bo + o % mo;
        let (mut i, mut o) = (0usize, 0usize);
        while i < mi || o < mo {
            let advance_outer = if o >= mo {
                false
            } else if i >= mi {
                true
            } else {
                let pa = nodes[outer(o)];
                let pb = nodes[outer(o + 1)];
                let pc = nodes[inner(i)];
                let pd = nodes[inner(i + 1)];
                match incircle(pa, pb, pc, pd) {
                    Side::Outside => true,
                    Side::Inside => false,
                    // Cocircular: connect toward the lowest node index.
                    Side::On => outer(o + 1) < inner(i + 1),
                }
            };
            if advance_outer {
                triangles.push([outer(o), outer(o + 1), inner(i)]);
                o += 1;
            } else {
                triangles.push([outer(o), inner(i + 1), inner(i)]);
                i += 1;
            }
        }
    }

    Mesh::new(nodes, triangles)
}

enum Side {
    Inside,
    Outside,
    On,
}

/// Position of `d` relative to the circumcircle of counterclockwise (a, b, c).
fn incircle(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> Side {
    let (ax, ay) = (a[0] - d[0], a[1] - d[1]);
    let (bx, by) = (b[0] - d[0], b[1] - d[1]);
    let (cx, cy) = (c[0] - d[0], c[1] - d[1]);
    let (a2, b2, c2) = (ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy);
    let det = ax * (by * c2 - b2 * cy) - ay * (bx * c2 - b2 * cx) + a2 * (bx * cy - by * cx);
    let scale = ax
        .abs()
        .max(ay.abs())
        .max(bx.abs())
        .max(by.abs())
        .max(cx.abs())
        .max(cy.abs());
    let tol = 1e-12 * scale * scale * scale * scale;
    if det > tol {
        Side::Inside
    } else if det < -tol {
        Side::Outside
    } else {
        Side::On
    }
}

/// Parse the mesh text format.
///
/// ```text
/// # comment lines start with '#'
/// N <node count>
/// <x> <y>            (one line per node)
/// T <triangle count>
/// <i> <j> <k>        (0-based node indices, counterclockwise)
/// E <electrode count> (optional)
/// <n1> <n2> ...      (one line per electrode, boundary node indices)
/// ```
pub fn parse_mesh(text: &str) -> Result<(Mesh, Option<ElectrodeLayout>), MeshError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| MeshError::Parse { line: 0, msg: format!("unexpected end of file, expected {what}") })
    };

    let (line, header) = next("node header 'N <count>'")?;
    let n_nodes = parse_section_header(line, header, "N")?;
    let mut nodes = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let (line, l) = next("node coordinates")?;
        let mut it = l.split_whitespace();
        let x = parse_f64(line, it.next(), "x coordinate")?;
        let y = parse_f64(line, it.next(), "y coordinate")?;
        if it.next().is_some() {
            return Err(MeshError::Parse { line, msg: "trailing tokens after node coordinates".into() });
        }
        nodes.push([x, y]);
    }

    let (line, header) = next("triangle header 'T <count>'")?;
    let n_tris = parse_section_header(line, header, "T")?;
    let mut triangles = Vec::with_capacity(n_tris);
    for _ in 0..n_tris {
        let (line, l) = next("triangle indices")?;
        let mut it = l.split_whitespace();
        let a = parse_usize(line, it.next(), "vertex index")?;
        let b = parse_usize(line, it.next(), "vertex index")?;
        let c = parse_usize(line, it.next(), "vertex index")?;
        if it.next().is_some() {
            return Err(MeshError::Parse { line, msg: "trailing tokens after triangle indices".into() });
        }
        triangles.push([a, b, c]);
    }

    let mut electrode_lines = Vec::new();
    if let Some((line, l)) = lines.next() {
        let n_elec = parse_section_header(line, l, "E")?;
        for _ in 0..n_elec {
            let (line, l) = lines.next().ok_or(MeshError::Parse {
                line,
                msg: "unexpected end of file inside electrode section".into(),
            })?;
            let mut group = Vec::new();
            for tok in l.split_whitespace() {
                group.push(parse_usize(line, Some(tok), "electrode node index")?);
            }
            electrode_lines.push(group);
        }
    }
    if let Some((line, _)) = lines.next() {
        return Err(MeshError::Parse { line, msg: "unexpected content after mesh sections".into() });
    }

    let mesh = Mesh::new(nodes, triangles)?;
    let layout = if electrode_lines.is_empty() {
        None
    } else {
        Some(ElectrodeLayout::new(electrode_lines, &mesh)?)
    };
    Ok((mesh, layout))
}

fn parse_section_header(line: usize, text: &str, tag: &str) -> Result<usize, MeshError> {
    let mut it = text.split_whitespace();
    match (it.next(), it.next(), it.next()) {
        (Some(t), Some(count), None) if t == tag => parse_usize(line, Some(count), "section count"),
        _ => Err(MeshError::Parse { line, msg: format!("expected section header '{tag} <count>', got '{text}'") }),
    }
}

fn parse_f64(line: usize, tok: Option<&str>, what: &str) -> Result<f64, MeshError> {
    let tok = tok.ok_or_else(|| MeshError::Parse { line, msg: format!("missing {what}") })?;
    tok.parse::<f64>()
        .map_err(|_| MeshError::Parse { line, msg: format!("cannot parse {what} from '{tok}'") })
}

fn parse_usize(line: usize, tok: Option<&str>, what: &str) -> Result<usize, MeshError> {
    let tok = tok.ok_or_else(|| MeshError::Parse { line, msg: format!("missing {what}") })?;
    tok.parse::<usize>()
        .map_err(|_| MeshError::Parse { line, msg: format!("cannot parse {what} from '{tok}'") })
}

pub fn load_mesh<P: AsRef<Path>>(path: P) -> Result<(Mesh, Option<ElectrodeLayout>), MeshError> {
    let text = std::fs::read_to_string(path)?;
    parse_mesh(&text)
}

pub fn save_mesh<P: AsRef<Path>>(
    path: P,
    mesh: &Mesh,
    layout: Option<&ElectrodeLayout>,
) -> Result<(), MeshError> {
    std::fs::write(path, mesh.to_text(layout))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn square_mesh() -> Mesh {
        let nodes = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let triangles = vec![[0, 1, 2], [0, 2, 3]];
        Mesh::new(nodes, triangles).unwrap()
    }

    // ----------------------------------------------------------- validation

    #[test]
    fn square_mesh_boundary_loop_is_canonical() {
        let m = square_mesh();
        assert_eq!(m.boundary_loop(), &[0, 1, 2, 3]);
        assert!((m.total_area() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_clockwise_triangle() {
        let nodes = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let err = Mesh::new(nodes, vec![[0, 2, 1]]).unwrap_err();
        assert!(matches!(err, MeshError::Topology(_)), "got {err:?}");
    }

    #[test]
    fn rejects_zero_area_triangle() {
        let nodes = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0]];
        let err = Mesh::new(nodes, vec![[0, 1, 3], [0, 1, 2]]).unwrap_err();
        assert!(matches!(err, MeshError::Topology(_)));
    }

    #[test]
    fn rejects_out_of_range_index() {
        let nodes = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let err = Mesh::new(nodes, vec![[0, 1, 7]]).unwrap_err();
        assert!(matches!(err, MeshError::IndexOutOfRange { index: 7, n_nodes: 3 }));
    }

    #[test]
    fn rejects_unreferenced_node() {
        let nodes = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [5.0, 5.0]];
        let err = Mesh::new(nodes, vec![[0, 1, 2]]).unwrap_err();
        assert!(matches!(err, MeshError::Topology(_)));
    }

    #[test]
    fn rejects_two_disjoint_components() {
        let nodes = vec![
            [0.0, 0.0], [1.0, 0.0], [0.0, 1.0],
            [5.0, 5.0], [6.0, 5.0], [5.0, 6.0],
        ];
        let err = Mesh::new(nodes, vec![[0, 1, 2], [3, 4, 5]]).unwrap_err();
        assert!(matches!(err, MeshError::Topology(_)));
    }

    #[test]
    fn gradients_match_hand_computed_values() {
        let m = Mesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let g = m.gradients(0);
        // Basis 0 is 1 - x - y; basis 1 is x; basis 2 is y.
        assert!((g[0][0] - -1.0).abs() < 1e-15 && (g[0][1] - -1.0).abs() < 1e-15);
        assert!((g[1][0] - 1.0).abs() < 1e-15 && (g[1][1] - 0.0).abs() < 1e-15);
        assert!((g[2][0] - 0.0).abs() < 1e-15 && (g[2][1] - 1.0).abs() < 1e-15);
    }

    // ----------------------------------------------------------- generation

    #[test]
    fn coarse_disk_is_valid_and_small() {
        let m = generate_disk_mesh(1.0, 0.5).unwrap();
        assert!(m.n_elements() >= 4, "got {} elements", m.n_elements());
    }

    #[test]
    fn fine_disk_area_approaches_circle() {
        let m = generate_disk_mesh(1.0, 0.05).unwrap();
        assert!(
            (1_000..10_000).contains(&m.n_elements()),
            "expected low thousands of elements, got {}",
            m.n_elements()
        );
        let area = m.total_area();
        assert!(area < PI, "polygonal area must be below the circle area");
        assert!(area > 0.98 * PI, "area {area} misses the circle area {PI} by over 2%");
    }

    #[test]
    fn disk_boundary_nodes_lie_on_circle() {
        let m = generate_disk_mesh(2.0, 0.3).unwrap();
        for &v in m.boundary_loop() {
            let p = m.node(v);
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((r - 2.0).abs() < 1e-12, "boundary node radius {r}");
        }
    }

    #[test]
    fn disk_generation_rejects_bad_parameters() {
        assert!(generate_disk_mesh(1.0, 0.0).is_err());
        assert!(generate_disk_mesh(0.0, 0.1).is_err());
        assert!(generate_disk_mesh(1.0, 2.0).is_err());
        assert!(generate_disk_mesh(f64::NAN, 0.1).is_err());
    }

    #[test]
    fn disk_generation_is_deterministic() {
        let a = generate_disk_mesh(1.0, 0.13).unwrap();
        let b = generate_disk_mesh(1.0, 0.13).unwrap();
        assert_eq!(a.nodes(), b.nodes());
        assert_eq!(a.triangles(), b.triangles());
    }

    // ----------------------------------------------------------- refinement

    #[test]
    fn refine_splits_each_triangle_into_four() {
        let m = square_mesh();
        let r = refine(&m);
        assert_eq!(r.mesh.n_elements(), 8);
        let rr = refine(&r.mesh);
        assert_eq!(rr.mesh.n_elements(), 32);
        for k in 0..r.mesh.n_elements() {
            assert_eq!(r.parent_of(k), k / 4);
        }
    }

    #[test]
    fn refine_grows_nodes_by_edge_count() {
        let m = generate_disk_mesh(1.0, 0.4).unwrap();
        // Conforming planar triangulation: 3T = 2 interior + boundary edges.
        let n_bedges = m.boundary_loop().len();
        let n_edges = (3 * m.n_elements() + n_bedges) / 2;
        let r = refine(&m);
        assert_eq!(r.mesh.n_nodes(), m.n_nodes() + n_edges);
    }

    #[test]
    fn refine_preserves_total_area_and_children_tile_parents() {
        let m = generate_disk_mesh(1.0, 0.3).unwrap();
        let r = refine(&m);
        let rel = ((r.mesh.total_area() - m.total_area()) / m.total_area()).abs();
        assert!(rel < 1e-12, "area drift {rel}");
        for k in 0..m.n_elements() {
            let child_sum: f64 = (4 * k..4 * k + 4).map(|c| r.mesh.area(c)).sum();
            assert!((child_sum - m.area(k)).abs() <= 1e-14 * m.area(k).max(1e-30));
        }
    }

    #[test]
    fn average_to_parent_recovers_parent_constant_values() {
        let m = generate_disk_mesh(1.0, 0.4).unwrap();
        let r = refine(&m);
        let coarse: Vec<f64> = (0..m.n_elements()).map(|k| k as f64).collect();
        let fine: Vec<f64> = (0..r.mesh.n_elements()).map(|k| r.parent_of(k) as f64).collect();
        assert_eq!(r.average_to_parent(&fine), coarse);
    }

    // ------------------------------------------------------------ electrodes

    #[test]
    fn electrodes_are_disjoint_ordered_and_sized() {
        let m = generate_disk_mesh(1.0, 0.05).unwrap();
        let layout = assign_electrodes(&m, 16, 0.5).unwrap();
        assert_eq!(layout.len(), 16);
        let mut seen = std::collections::HashSet::new();
        for g in layout.groups() {
            assert!(g.len() >= 2);
            for &v in g {
                assert!(seen.insert(v), "node {v} reused across electrodes");
            }
        }
        // Direct walk oracle: every group is consecutive along the loop and
        // the 16 groups appear in walk order.
        let pos: HashMap<usize, usize> =
            m.boundary_loop().iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let mut last = 0usize;
        for g in layout.groups() {
            let ps: Vec<usize> = g.iter().map(|v| pos[v]).collect();
            for w in ps.windows(2) {
                assert_eq!(w[1], w[0] + 1, "group not contiguous");
            }
            assert!(ps[0] >= last, "groups out of boundary order");
            last = *ps.last().unwrap();
        }
        // Covered arclength tracks the requested coverage up to edge rounding.
        let m_edges = m.boundary_loop().len() as f64;
        let covered: usize = layout.groups().iter().map(|g| g.len() - 1).sum();
        let frac = covered as f64 / m_edges;
        assert!((frac - 0.5).abs() < 16.0 / m_edges, "coverage fraction {frac}");
    }

    #[test]
    fn electrodes_error_on_coarse_boundary() {
        let m = generate_disk_mesh(1.0, 0.4).unwrap();
        assert!(m.boundary_loop().len() < 32);
        assert!(assign_electrodes(&m, 16, 0.5).is_err());
    }

    #[test]
    fn electrodes_nearly_touch_at_high_coverage() {
        let m = generate_disk_mesh(1.0, 0.05).unwrap();
        let layout = assign_electrodes(&m, 16, 0.999).unwrap();
        let mut seen = std::collections::HashSet::new();
        for g in layout.groups() {
            for &v in g {
                assert!(seen.insert(v), "electrodes overlap at coverage 0.999");
            }
        }
    }

    #[test]
    fn electrode_assignment_ignores_node_numbering() {
        let m = generate_disk_mesh(1.0, 0.12).unwrap();
        let n = m.n_nodes();
        // Relabel node i as (i + 17) mod n and rebuild.
        let relabel: Vec<usize> = (0..n).map(|i| (i + 17) % n).collect();
        let mut nodes = vec![[0.0, 0.0]; n];
        for i in 0..n {
            nodes[relabel[i]] = m.node(i);
        }
        let triangles: Vec<[usize; 3]> = m
            .triangles()
            .iter()
            .map(|t| [relabel[t[0]], relabel[t[1]], relabel[t[2]]])
            .collect();
        let m2 = Mesh::new(nodes, triangles).unwrap();
        let a = assign_electrodes(&m, 16, 0.5).unwrap();
        let b = assign_electrodes(&m2, 16, 0.5).unwrap();
        let mapped: Vec<Vec<usize>> = a
            .groups()
            .iter()
            .map(|g| g.iter().map(|&v| relabel[v]).collect())
            .collect();
        assert_eq!(mapped, b.groups().to_vec());
    }

    // ------------------------------------------------------------- boundary

    #[test]
    fn boundary_elements_of_square_are_both() {
        let m = square_mesh();
        assert_eq!(m.boundary_elements(), vec![0, 1]);
    }

    #[test]
    fn node_only_boundary_contact_is_excluded() {
        let m = generate_disk_mesh(1.0, 0.45).unwrap();
        let belems = m.boundary_elements();
        let bnodes: std::collections::HashSet<usize> = m.boundary_loop().iter().copied().collect();
        let touching: Vec<usize> = (0..m.n_elements())
            .filter(|&k| m.triangle(k).iter().any(|v| bnodes.contains(v)))
            .collect();
        for &k in &belems {
            assert!(touching.contains(&k), "boundary element must touch boundary nodes");
        }
        assert!(
            touching.len() > belems.len(),
            "expected some elements touching the boundary only at a node"
        );
        // Edge-scan oracle: count elements with a missing neighbor directly.
        let direct = (0..m.n_elements())
            .filter(|&k| m.neighbors(k).iter().any(Option::is_none))
            .count();
        assert_eq!(belems.len(), direct);
    }

    // ------------------------------------------------------------- text I/O

    #[test]
    fn parses_minimal_square_file() {
        let text = "# unit square\nN 4\n0 0\n1 0\n1 1\n0 1\nT 2\n0 1 2\n0 2 3\n";
        let (m, layout) = parse_mesh(text).unwrap();
        assert_eq!(m.n_elements(), 2);
        assert!(layout.is_none());
    }

    #[test]
    fn parse_rejects_zero_area_triangle_with_topology_error() {
        let text = "N 4\n0 0\n1 0\n2 0\n0 1\nT 2\n0 1 3\n0 1 2\n";
        assert!(matches!(parse_mesh(text), Err(MeshError::Topology(_))));
    }

    #[test]
    fn parse_reports_line_numbers() {
        let text = "N 2\n0 0\noops 1\n";
        match parse_mesh(text) {
            Err(MeshError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_bad_node_index() {
        let text = "N 3\n0 0\n1 0\n0 1\nT 1\n0 1 9\n";
        assert!(matches!(parse_mesh(text), Err(MeshError::IndexOutOfRange { .. })));
    }

    #[test]
    fn round_trip_preserves_mesh_and_layout_exactly() {
        let m = generate_disk_mesh(1.0, 0.07).unwrap();
        let layout = assign_electrodes(&m, 16, 0.5).unwrap();
        let text = m.to_text(Some(&layout));
        let (m2, layout2) = parse_mesh(&text).unwrap();
        assert_eq!(m.nodes(), m2.nodes());
        assert_eq!(m.triangles(), m2.triangles());
        assert_eq!(Some(layout.clone()), layout2);
        assert_eq!(text, m2.to_text(Some(&layout)), "serialization must be stable");
    }

    #[test]
    fn save_and_load_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("disk.mesh");
        let m = generate_disk_mesh(1.0, 0.2).unwrap();
        save_mesh(&path, &m, None).unwrap();
        let (m2, _) = load_mesh(&path).unwrap();
        assert_eq!(m.nodes(), m2.nodes());
        assert_eq!(m.triangles(), m2.triangles());
    }

    // ------------------------------------------------------------ properties

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn area_sum_matches_boundary_polygon(
            radius in 0.5f64..2.0,
            frac in 0.08f64..0.4,
        ) {
            let m = generate_disk_mesh(radius, radius * frac).unwrap();
            let tri_sum = m.total_area();
            let poly = m.boundary_polygon_area();
            prop_assert!(
                ((tri_sum - poly) / poly).abs() < 1e-12,
                "triangle sum {} vs polygon {}", tri_sum, poly
            );
        }

        #[test]
        fn refinement_preserves_area_and_multiplies_elements(
            radius in 0.5f64..2.0,
            frac in 0.15f64..0.45,
        ) {
            let m = generate_disk_mesh(radius, radius * frac).unwrap();
            let r = refine(&m);
            prop_assert_eq!(r.mesh.n_elements(), 4 * m.n_elements());
            let rel = ((r.mesh.total_area() - m.total_area()) / m.total_area()).abs();
            prop_assert!(rel < 1e-12);
        }
    }
}
