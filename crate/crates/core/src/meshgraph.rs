//! Mesh topology, normalized graph Laplacians and the coarse-to-fine graph
//! hierarchy used by the mesh decoder.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CsrMatrix, Tensor};

/// Undirected mesh graph. Edges are stored once with `i < j`, sorted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshGraph {
    pub num_vertices: usize,
    pub edges: Vec<(usize, usize)>,
    /// One weight per edge; all ones for a freshly loaded mesh.
    pub edge_weights: Vec<f64>,
    pub faces: Vec<[usize; 3]>,
    pub positions: Option<Vec<[f64; 3]>>,
}

impl MeshGraph {
    /// Builds a graph whose edges are the deduplicated face edges.
    pub fn from_faces(num_vertices: usize, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for (k, f) in faces.iter().enumerate() {
            check_face(num_vertices, f).map_err(|m| Error::invalid(format!("face {k}: {m}")))?;
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                weights.insert((a.min(b), a.max(b)), 1.0);
            }
        }
        let (edges, edge_weights) = weights.into_iter().unzip();
        Ok(MeshGraph {
            num_vertices,
            edges,
            edge_weights,
            faces,
            positions: None,
        })
    }

    /// Builds a face-less graph from weighted edges; duplicate edges have their weights summed.
    pub fn from_weighted_edges(num_vertices: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut weights: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(a, b, w) in edges {
            if a >= num_vertices || b >= num_vertices {
                return Err(Error::invalid(format!(
                    "edge ({a}, {b}) outside {num_vertices} vertices"
                )));
            }
            if a == b {
                return Err(Error::invalid(format!("self-loop at vertex {a}")));
            }
            *weights.entry((a.min(b), a.max(b))).or_insert(0.0) += w;
        }
        let (edges, edge_weights) = weights.into_iter().unzip();
        Ok(MeshGraph {
            num_vertices,
            edges,
            edge_weights,
            faces: Vec::new(),
            positions: None,
        })
    }

    pub fn with_positions(mut self, positions: Vec<[f64; 3]>) -> Result<Self> {
        if positions.len() != self.num_vertices {
            return Err(Error::invalid(format!(
                "{} positions for {} vertices",
                positions.len(),
                self.num_vertices
            )));
        }
        self.positions = Some(positions);
        Ok(self)
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Sorted neighbour lists with edge weights.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.num_vertices];
        for (&(a, b), &w) in self.edges.iter().zip(&self.edge_weights) {
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        for row in &mut adj {
            row.sort_by_key(|&(j, _)| j);
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_vertices];
        for &(a, b) in &self.edges {
            d[a] += 1;
            d[b] += 1;
        }
        d
    }

    /// Hop distances from `source`; unreachable vertices get `usize::MAX`.
    pub fn bfs_distances(&self, source: usize) -> Vec<usize> {
        let adj = self.adjacency();
        let mut dist = vec![usize::MAX; self.num_vertices];
        let mut queue = std::collections::VecDeque::new();
        dist[source] = 0;
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.num_vertices == 0 || self.bfs_distances(0).iter().all(|&d| d != usize::MAX)
    }
}

fn check_face(n: usize, f: &[usize; 3]) -> std::result::Result<(), String> {
    if let Some(&bad) = f.iter().find(|&&i| i >= n) {
        return Err(format!("vertex index {bad} out of range for {n} vertices"));
    }
    if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
        return Err(format!("degenerate face {f:?}"));
    }
    Ok(())
}

/// On-disk JSON topology: vertex count, triangles and an optional joint regressor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyFile {
    pub vertices: usize,
    pub faces: Vec<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_regressor: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<[f64; 3]>>,
}

/// A mesh plus the matrix that maps its vertices to skeleton joints.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub mesh: MeshGraph,
    pub joint_regressor: Option<Vec<Vec<f64>>>,
}

impl Topology {
    pub fn to_file(&self) -> TopologyFile {
        TopologyFile {
            vertices: self.mesh.num_vertices,
            faces: self.mesh.faces.clone(),
            joint_regressor: self.joint_regressor.clone(),
            positions: self.mesh.positions.clone(),
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(&self.to_file())?;
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Loads an OBJ or JSON topology, dispatching on the file extension.
pub fn load_mesh(path: &Path) -> Result<MeshGraph> {
    Ok(load_topology(path)?.mesh)
}

pub fn load_topology(path: &Path) -> Result<Topology> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("obj") => Ok(Topology {
            mesh: parse_obj(&text)?,
            joint_regressor: None,
        }),
        _ => parse_topology_json(&text),
    }
}

/// Parses `v` and `f` records of a Wavefront OBJ. Other records are ignored and
/// polygons are fan-triangulated.
pub fn parse_obj(text: &str) -> Result<MeshGraph> {
    let mut positions = Vec::new();
    let mut faces: Vec<([usize; 3], usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let perr = |msg: String| Error::Parse { line, msg };
        let mut toks = raw.split_whitespace();
        match toks.next() {
            Some("v") => {
                let mut p = [0.0; 3];
                for slot in &mut p {
                    let tok = toks.next().ok_or_else(|| perr("vertex needs 3 coordinates".into()))?;
                    *slot = tok
                        .parse()
                        .map_err(|_| perr(format!("bad coordinate {tok:?}")))?;
                }
                positions.push(p);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in toks {
                    let head = tok.split('/').next().unwrap_or("");
                    let k: i64 = head
                        .parse()
                        .map_err(|_| perr(format!("bad face index {tok:?}")))?;
                    if k < 1 {
                        return Err(perr(format!("face index {k} (indices are 1-based)")));
                    }
                    idx.push(k as usize - 1);
                }
                if idx.len() < 3 {
                    return Err(perr("face needs at least 3 vertices".into()));
                }
                for t in 1..idx.len() - 1 {
                    faces.push(([idx[0], idx[t], idx[t + 1]], line));
                }
            }
            _ => {}
        }
    }
    let n = positions.len();
    for (f, line) in &faces {
        check_face(n, f).map_err(|msg| Error::Parse { line: *line, msg })?;
    }
    MeshGraph::from_faces(n, faces.into_iter().map(|(f, _)| f).collect())?.with_positions(positions)
}

pub fn parse_topology_json(text: &str) -> Result<Topology> {
    let file: TopologyFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let mut mesh = MeshGraph::from_faces(file.vertices, file.faces)?;
    if let Some(p) = file.positions {
        mesh = mesh.with_positions(p)?;
    }
    if let Some(reg) = &file.joint_regressor {
        validate_regressor(reg, mesh.num_vertices)?;
    }
    Ok(Topology {
        mesh,
        joint_regressor: file.joint_regressor,
    })
}

/// Rows must have one non-negative weight per vertex and sum to 1.
pub fn validate_regressor(reg: &[Vec<f64>], num_vertices: usize) -> Result<()> {
    for (j, row) in reg.iter().enumerate() {
        if row.len() != num_vertices {
            return Err(Error::invalid(format!(
                "joint regressor row {j} has {} entries, expected {num_vertices}",
                row.len()
            )));
        }
        let s: f64 = row.iter().sum();
        if row.iter().any(|&w| w < 0.0 || !w.is_finite()) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("joint regressor row {j} is not stochastic")));
        }
    }
    Ok(())
}

/// Rescaled normalized Laplacian with spectrum in [-1, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledLaplacian {
    pub matrix: CsrMatrix,
    pub lambda_max: f64,
}

/// Normalized Laplacian `I - D^-1/2 A D^-1/2`; degree-zero vertices get a zero row.
pub fn normalized_laplacian(g: &MeshGraph) -> CsrMatrix {
    let n = g.num_vertices;
    let mut deg = vec![0.0; n];
    for (&(a, b), &w) in g.edges.iter().zip(&g.edge_weights) {
        deg[a] += w;
        deg[b] += w;
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let mut trip = Vec::with_capacity(n + 2 * g.edges.len());
    for (i, &d) in deg.iter().enumerate() {
        if d > 0.0 {
            trip.push((i, i, 1.0));
        }
    }
    for (&(a, b), &w) in g.edges.iter().zip(&g.edge_weights) {
        let v = -w * inv_sqrt[a] * inv_sqrt[b];
        trip.push((a, b, v));
        trip.push((b, a, v));
    }
    CsrMatrix::from_triplets(n, n, &trip).expect("indices validated by MeshGraph")
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
///
/// Returns an upper bound `rho + ||residual||` capped at 2, or 2 when the
/// iteration does not reach `tol` or the matrix is numerically zero.
pub fn estimate_lambda_max(l: &CsrMatrix, tol: f64, max_iter: usize) -> f64 {
    let n = l.rows();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i as f64 + 1.0) * 0.618_033_988_75).fract()).collect();
    // alternate signs so the start vector is not close to the constant null vector
    for (i, x) in v.iter_mut().enumerate() {
        if i % 2 == 1 {
            *x = -*x;
        }
    }
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    for _ in 0..max_iter {
        let lv = l.matvec(&v);
        let rho: f64 = v.iter().zip(&lv).map(|(a, b)| a * b).sum();
        let r: f64 = lv.iter().zip(&v).map(|(a, b)| (a - rho * b).powi(2)).sum::<f64>().sqrt();
        if r < tol {
            return if rho + r < 1e-12 { 2.0 } else { (rho + r).min(2.0) };
        }
        let nl = norm(&lv);
        if nl < 1e-300 {
            return 2.0;
        }
        v = lv.into_iter().map(|x| x / nl).collect();
    }
    2.0
}

pub fn build_scaled_laplacian(g: &MeshGraph) -> Result<ScaledLaplacian> {
    if g.num_vertices == 0 {
        return Err(Error::invalid("Laplacian of an empty graph"));
    }
    let l = normalized_laplacian(g);
    let lambda_max = estimate_lambda_max(&l, 1e-6, 20_000);
    let n = g.num_vertices;
    let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(l.nnz() + n);
    for r in 0..n {
        trip.extend(l.row(r).map(|(c, v)| (r, c, 2.0 * v / lambda_max)));
        trip.push((r, r, -1.0));
    }
    Ok(ScaledLaplacian {
        matrix: CsrMatrix::from_triplets(n, n, &trip)?,
        lambda_max,
    })
}

/// Coarse-to-fine graph pyramid arranged as a balanced binary tree.
///
/// Every level is stored in "slot" order: slot `i` of level `l` has parent
/// slot `i / 2` at level `l + 1`. Level 0 contains every original vertex plus
/// fake padding slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphHierarchy {
    /// Fine to coarse; `levels[0]` is the base mesh in slot order.
    pub levels: Vec<MeshGraph>,
    /// `parent_maps[l][i]` is the parent at level `l + 1` of slot `i` of level `l`.
    pub parent_maps: Vec<Vec<usize>>,
    pub fake_mask: Vec<Vec<bool>>,
    /// Slot of each original vertex at level 0.
    pub base_slots: Vec<usize>,
}

fn match_level(g: &MeshGraph, vweight: &[f64]) -> Vec<usize> {
    let adj = g.adjacency();
    let mut cluster = vec![usize::MAX; g.num_vertices];
    let mut next = 0;
    for i in 0..g.num_vertices {
        if cluster[i] != usize::MAX {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for &(j, w) in &adj[i] {
            if cluster[j] != usize::MAX {
                continue;
            }
            let score = w * (1.0 / vweight[i] + 1.0 / vweight[j]);
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((j, score));
            }
        }
        cluster[i] = next;
        if let Some((j, _)) = best {
            cluster[j] = next;
        }
        next += 1;
    }
    cluster
}

/// Greedy normalized-cut matching repeated `levels` times, then padded with fake
/// vertices so every coarse vertex has exactly two children.
pub fn coarsen_hierarchy(g: &MeshGraph, levels: usize) -> Result<GraphHierarchy> {
    if levels == 0 {
        return Err(Error::invalid("coarsen_hierarchy needs at least one level"));
    }
    if g.num_vertices == 0 {
        return Err(Error::invalid("cannot coarsen an empty graph"));
    }
    // real-vertex graphs and cluster maps, fine to coarse
    let mut graphs = vec![g.clone()];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut vweight = vec![1.0; g.num_vertices];
    for _ in 0..levels {
        let cur = graphs.last().unwrap();
        let cl = match_level(cur, &vweight);
        let nc = cl.iter().max().map_or(0, |&m| m + 1);
        let mut cw = vec![0.0; nc];
        for (i, &c) in cl.iter().enumerate() {
            cw[c] += vweight[i];
        }
        let mut cedges = Vec::new();
        for (&(a, b), &w) in cur.edges.iter().zip(&cur.edge_weights) {
            if cl[a] != cl[b] {
                cedges.push((cl[a], cl[b], w));
            }
        }
        graphs.push(MeshGraph::from_weighted_edges(nc, &cedges)?);
        clusters.push(cl);
        vweight = cw;
    }

    // slot order from the coarsest level down; None marks a fake slot
    let mut orders: Vec<Vec<Option<usize>>> = vec![Vec::new(); levels + 1];
    orders[levels] = (0..graphs[levels].num_vertices).map(Some).collect();
    for l in (0..levels).rev() {
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); graphs[l + 1].num_vertices];
        for (i, &c) in clusters[l].iter().enumerate() {
            children[c].push(i);
        }
        let mut order = Vec::with_capacity(2 * orders[l + 1].len());
        for slot in &orders[l + 1] {
            match slot {
                Some(c) => {
                    let ch = &children[*c];
                    order.push(Some(ch[0]));
                    order.push(ch.get(1).copied());
                }
                None => {
                    order.push(None);
                    order.push(None);
                }
            }
        }
        orders[l] = order;
    }

    let mut out_levels = Vec::with_capacity(levels + 1);
    let mut fake_mask = Vec::with_capacity(levels + 1);
    let mut base_slots = vec![0; g.num_vertices];
    for l in 0..=levels {
        let order = &orders[l];
        let mut slot_of = vec![usize::MAX; graphs[l].num_vertices];
        for (s, v) in order.iter().enumerate() {
            if let Some(v) = v {
                slot_of[*v] = s;
            }
        }
        let src = &graphs[l];
        let edges: Vec<(usize, usize, f64)> = src
            .edges
            .iter()
            .zip(&src.edge_weights)
            .map(|(&(a, b), &w)| (slot_of[a], slot_of[b], w))
            .collect();
        let mut lg = MeshGraph::from_weighted_edges(order.len(), &edges)?;
        if l == 0 {
            lg.faces = src
                .faces
                .iter()
                .map(|f| [slot_of[f[0]], slot_of[f[1]], slot_of[f[2]]])
                .collect();
            if let Some(p) = &src.positions {
                lg.positions = Some(
                    order
                        .iter()
                        .map(|v| v.map_or([0.0; 3], |v| p[v]))
                        .collect(),
                );
            }
            base_slots = slot_of;
        }
        fake_mask.push(order.iter().map(Option::is_none).collect());
        out_levels.push(lg);
    }
    let parent_maps = (0..levels)
        .map(|l| (0..out_levels[l].num_vertices).map(|i| i / 2).collect())
        .collect();
    Ok(GraphHierarchy {
        levels: out_levels,
        parent_maps,
        fake_mask,
        base_slots,
    })
}

impl GraphHierarchy {
    pub fn num_coarse_levels(&self) -> usize {
        self.parent_maps.len()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|g| g.num_vertices).collect()
    }

    pub fn num_original(&self) -> usize {
        self.base_slots.len()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })
    }

    /// Loads a cached hierarchy when it was built from this exact mesh, otherwise
    /// rebuilds it and refreshes the cache.
    pub fn cached(g: &MeshGraph, levels: usize, path: &Path) -> Result<Self> {
        if let Ok(h) = Self::load_json(path) {
            if h.num_coarse_levels() == levels && h.matches_base(g) {
                return Ok(h);
            }
        }
        let h = coarsen_hierarchy(g, levels)?;
        h.save_json(path)?;
        Ok(h)
    }

    fn matches_base(&self, g: &MeshGraph) -> bool {
        let base = &self.levels[0];
        if self.base_slots.len() != g.num_vertices || base.faces.len() != g.faces.len() {
            return false;
        }
        g.faces.iter().zip(&base.faces).all(|(f, b)| {
            (0..3).all(|k| self.base_slots.get(f[k]) == Some(&b[k]))
        })
    }

    /// Row-gather indices that copy level `level + 1` features onto level `level`.
    /// At level 0 the result is in original vertex order with fake slots dropped.
    pub fn upsample_index(&self, level: usize) -> Result<Vec<usize>> {
        if level >= self.num_coarse_levels() {
            return Err(Error::invalid(format!(
                "upsample level {level} out of range (hierarchy has {} coarse levels)",
                self.num_coarse_levels()
            )));
        }
        let parents = &self.parent_maps[level];
        Ok(if level == 0 {
            self.base_slots.iter().map(|&s| parents[s]).collect()
        } else {
            parents.clone()
        })
    }

    /// Level-0 slot features rearranged into original vertex order.
    pub fn base_index(&self) -> &[usize] {
        &self.base_slots
    }
}

/// Copies coarse features (`[n_coarse, C]`) to their children at `level`.
pub fn upsample_features(x: &Tensor, h: &GraphHierarchy, level: usize) -> Result<Tensor> {
    let idx = h.upsample_index(level)?;
    let coarse = h.levels[level + 1].num_vertices;
    if x.rank() != 2 || x.shape()[0] != coarse {
        return Err(Error::shape(
            "upsample_features",
            format!("expected [{coarse}, C], got {:?}", x.shape()),
        ));
    }
    let c = x.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * c);
    for &p in &idx {
        out.extend_from_slice(&x.data()[p * c..(p + 1) * c]);
    }
    Tensor::new([idx.len(), c], out)
}

/// Averages slot features at `level` over each parent's two children.
pub fn pool_mean(x: &Tensor, h: &GraphHierarchy, level: usize) -> Result<Tensor> {
    if level >= h.num_coarse_levels() {
        return Err(Error::invalid(format!("pool level {level} out of range")));
    }
    let fine = h.levels[level].num_vertices;
    if x.rank() != 2 || x.shape()[0] != fine {
        return Err(Error::shape("pool_mean", format!("expected [{fine}, C], got {:?}", x.shape())));
    }
    let c = x.shape()[1];
    let coarse = h.levels[level + 1].num_vertices;
    let mut out = vec![0.0; coarse * c];
    let mut count = vec![0usize; coarse];
    for (i, &p) in h.parent_maps[level].iter().enumerate() {
        count[p] += 1;
        for k in 0..c {
            out[p * c + k] += x.data()[i * c + k];
        }
    }
    for p in 0..coarse {
        for k in 0..c {
            out[p * c + k] /= count[p].max(1) as f64;
        }
    }
    Tensor::new([coarse, c], out)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Unit face normals `(v1 - v0) x (v2 - v0)`. Faces with area at most 1e-12
/// get a zero normal and are logged.
pub fn face_normals(g: &MeshGraph, verts: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    if verts.len() != g.num_vertices {
        return Err(Error::shape(
            "face_normals",
            format!("{} positions for {} vertices", verts.len(), g.num_vertices),
        ));
    }
    let mut degenerate = 0;
    let normals = g
        .faces
        .iter()
        .map(|f| {
            let n = cross(sub3(verts[f[1]], verts[f[0]]), sub3(verts[f[2]], verts[f[0]]));
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if 0.5 * len <= 1e-12 {
                degenerate += 1;
                [0.0; 3]
            } else {
                [n[0] / len, n[1] / len, n[2] / len]
            }
        })
        .collect();
    if degenerate > 0 {
        log::warn!("{degenerate} degenerate faces get zero normals");
    }
    Ok(normals)
}
