//! HDBSCAN over reduced coordinates.
//!
//! Core distances count the point itself as its first neighbor. The minimum
//! spanning tree of the mutual-reachability graph is built with Prim's
//! algorithm, turned into a single-linkage dendrogram, condensed by
//! `min_cluster_size`, and clusters are chosen by excess of mass.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reduce::Coordinates;
use crate::text::fmt6;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("need at least {needed} points, got {rows}")]
    TooFewPoints { needed: usize, rows: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    /// Defaults to `min_cluster_size` when unset.
    pub min_samples: Option<usize>,
}

impl Default for HdbscanParams {
    fn default() -> Self {
        HdbscanParams {
            min_cluster_size: 10,
            min_samples: None,
        }
    }
}

impl HdbscanParams {
    pub fn with_min_cluster_size(min_cluster_size: usize) -> Self {
        HdbscanParams {
            min_cluster_size,
            min_samples: None,
        }
    }

    pub fn min_samples(&self) -> usize {
        self.min_samples.unwrap_or(self.min_cluster_size)
    }
}

/// Per-point cluster assignment; `-1` marks outliers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLabels {
    pub labels: Vec<i64>,
    pub probabilities: Vec<f64>,
    pub n_clusters: usize,
}

impl ClusterLabels {
    fn all_noise(n: usize) -> Self {
        ClusterLabels {
            labels: vec![-1; n],
            probabilities: vec![0.0; n],
            n_clusters: 0,
        }
    }

    pub fn outlier_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|&&l| l < 0).count() as f64 / self.labels.len() as f64
    }

    /// Writes `row_key,label,probability`.
    pub fn write_csv(&self, keys: &[String], path: &Path) -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "row_key,label,probability")?;
        for (i, (&l, &p)) in self.labels.iter().zip(&self.probabilities).enumerate() {
            writeln!(w, "{},{},{}", keys[i], l, fmt6(p))?;
        }
        w.flush()
    }
}

fn euclidean(x: &Coordinates, a: usize, b: usize) -> f64 {
    x.row(a)
        .iter()
        .zip(x.row(b))
        .map(|(p, q)| (p - q).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mutual-reachability distance over a point set.
#[derive(Debug, Clone)]
pub struct MutualReachability<'a> {
    points: &'a Coordinates,
    pub core: Vec<f64>,
}

impl MutualReachability<'_> {
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        if a == b {
            return 0.0;
        }
        euclidean(self.points, a, b).max(self.core[a]).max(self.core[b])
    }

    pub fn len(&self) -> usize {
        self.core.len()
    }

    pub fn is_empty(&self) -> bool {
        self.core.is_empty()
    }
}

fn core_distance(x: &Coordinates, p: usize, min_samples: usize) -> f64 {
    let mut d: Vec<f64> = (0..x.rows).map(|q| euclidean(x, p, q)).collect();
    let (_, kth, _) = d.select_nth_unstable_by(min_samples - 1, f64::total_cmp);
    *kth
}

pub fn mutual_reachability(x: &Coordinates, min_samples: usize) -> Result<MutualReachability<'_>, ClusterError> {
    if min_samples == 0 {
        return Err(ClusterError::InvalidParams("min_samples must be >= 1".into()));
    }
    if min_samples > x.rows {
        return Err(ClusterError::TooFewPoints {
            needed: min_samples,
            rows: x.rows,
        });
    }
    #[cfg(feature = "parallel")]
    let core = {
        use rayon::prelude::*;
        (0..x.rows).into_par_iter().map(|p| core_distance(x, p, min_samples)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let core = (0..x.rows).map(|p| core_distance(x, p, min_samples)).collect();
    Ok(MutualReachability { points: x, core })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Prim's algorithm on a complete graph given by `dist`. Ties prefer the
/// smaller weight, then the smaller vertex index.
pub fn mst<F: Fn(usize, usize) -> f64>(dist: F, n: usize) -> Vec<MstEdge> {
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        for v in 0..n {
            if in_tree[v] {
                continue;
            }
            let d = dist(current, v);
            if d < best[v] || (d == best[v] && current < parent[v]) {
                best[v] = d;
                parent[v] = current;
            }
            if next == usize::MAX || best[v] < best[next] {
                next = v;
            }
        }
        let p = parent[next];
        edges.push(MstEdge {
            a: p.min(next),
            b: p.max(next),
            weight: best[next],
        });
        in_tree[next] = true;
        current = next;
    }
    edges
}

#[derive(Debug, Clone, Copy)]
struct DendroNode {
    left: usize,
    right: usize,
    distance: f64,
    size: usize,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// Single-linkage dendrogram; node `n + i` is the i-th merge.
fn single_linkage(edges: &[MstEdge], n: usize) -> Vec<DendroNode> {
    let mut sorted = edges.to_vec();
    sorted.sort_by(|x, y| x.weight.total_cmp(&y.weight).then(x.a.cmp(&y.a)).then(x.b.cmp(&y.b)));
    let mut uf = UnionFind::new(2 * n);
    let mut size = vec![1usize; 2 * n];
    let mut nodes = Vec::with_capacity(n.saturating_sub(1));
    for e in sorted {
        let (ra, rb) = (uf.find(e.a), uf.find(e.b));
        if ra == rb {
            continue;
        }
        let id = n + nodes.len();
        size[id] = size[ra] + size[rb];
        nodes.push(DendroNode {
            left: ra,
            right: rb,
            distance: e.weight,
            size: size[id],
        });
        uf.parent[ra] = id;
        uf.parent[rb] = id;
    }
    nodes
}

#[derive(Debug, Clone)]
struct CondensedCluster {
    parent: Option<usize>,
    birth: f64,
    children: Vec<usize>,
    /// (point, lambda at which it left this cluster)
    points: Vec<(usize, f64)>,
}

fn lambda_of(distance: f64) -> f64 {
    if distance > 0.0 {
        1.0 / distance
    } else {
        f64::INFINITY
    }
}

struct Condenser<'a> {
    n: usize,
    nodes: &'a [DendroNode],
    min_cluster_size: usize,
    clusters: Vec<CondensedCluster>,
}

impl Condenser<'_> {
    fn size(&self, node: usize) -> usize {
        if node < self.n {
            1
        } else {
            self.nodes[node - self.n].size
        }
    }

    fn leaves(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(v) = stack.pop() {
            if v < self.n {
                out.push(v);
            } else {
                let d = self.nodes[v - self.n];
                stack.push(d.right);
                stack.push(d.left);
            }
        }
        out
    }

    fn shed(&mut self, cluster: usize, node: usize, lambda: f64) {
        let pts = self.leaves(node);
        self.clusters[cluster].points.extend(pts.into_iter().map(|p| (p, lambda)));
    }

    fn new_cluster(&mut self, parent: usize, birth: f64) -> usize {
        let id = self.clusters.len();
        self.clusters.push(CondensedCluster {
            parent: Some(parent),
            birth,
            children: Vec::new(),
            points: Vec::new(),
        });
        self.clusters[parent].children.push(id);
        id
    }

    fn run(&mut self, root: usize) {
        self.clusters.push(CondensedCluster {
            parent: None,
            birth: 0.0,
            children: Vec::new(),
            points: Vec::new(),
        });
        let mut stack = vec![(root, 0usize)];
        while let Some((node, cluster)) = stack.pop() {
            if node < self.n {
                self.clusters[cluster].points.push((node, f64::INFINITY));
                continue;
            }
            let d = self.nodes[node - self.n];
            let lambda = lambda_of(d.distance);
            if d.distance <= 0.0 {
                // duplicates merge at infinite density and never split
                self.shed(cluster, node, f64::INFINITY);
                continue;
            }
            let (ls, rs) = (self.size(d.left), self.size(d.right));
            let mcs = self.min_cluster_size;
            match (ls >= mcs, rs >= mcs) {
                (true, true) => {
                    let l = self.new_cluster(cluster, lambda);
                    let r = self.new_cluster(cluster, lambda);
                    stack.push((d.right, r));
                    stack.push((d.left, l));
                }
                (false, false) => {
                    self.shed(cluster, d.left, lambda);
                    self.shed(cluster, d.right, lambda);
                }
                (true, false) => {
                    self.shed(cluster, d.right, lambda);
                    stack.push((d.left, cluster));
                }
                (false, true) => {
                    self.shed(cluster, d.left, lambda);
                    stack.push((d.right, cluster));
                }
            }
        }
    }
}

fn stability(clusters: &[CondensedCluster], c: usize) -> f64 {
    let cl = &clusters[c];
    let from_points: f64 = cl.points.iter().map(|&(_, l)| l - cl.birth).sum();
    let from_children: f64 = cl
        .children
        .iter()
        .map(|&ch| (clusters[ch].birth - cl.birth) * subtree_size(clusters, ch) as f64)
        .sum();
    from_points + from_children
}

fn subtree_size(clusters: &[CondensedCluster], c: usize) -> usize {
    clusters[c].points.len() + clusters[c].children.iter().map(|&ch| subtree_size(clusters, ch)).sum::<usize>()
}

fn subtree_points(clusters: &[CondensedCluster], c: usize) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    let mut stack = vec![c];
    while let Some(k) = stack.pop() {
        out.extend_from_slice(&clusters[k].points);
        stack.extend(clusters[k].children.iter().copied());
    }
    out
}

/// Condenses the MST's single-linkage hierarchy and extracts clusters by
/// excess of mass. A parent is kept when its stability is at least the sum
/// of its children's.
///
/// The root is not selectable, so data without density structure comes out
/// as noise. The exception is data that never separates at any finite
/// distance (every tree edge has weight 0): that is one cluster.
pub fn condense_and_extract(edges: &[MstEdge], n: usize, params: &HdbscanParams) -> ClusterLabels {
    let mcs = params.min_cluster_size.max(2);
    if n == 0 || n < mcs {
        return ClusterLabels::all_noise(n);
    }
    let nodes = single_linkage(edges, n);
    if nodes.len() + 1 != n {
        // disconnected input: not a spanning tree
        return ClusterLabels::all_noise(n);
    }
    let mut condenser = Condenser {
        n,
        nodes: &nodes,
        min_cluster_size: mcs,
        clusters: Vec::new(),
    };
    condenser.run(2 * n - 2);
    let clusters = condenser.clusters;

    let stab: Vec<f64> = (0..clusters.len()).map(|c| stability(&clusters, c)).collect();
    let mut selected = vec![false; clusters.len()];
    let mut best = vec![0.0; clusters.len()];
    let root_selectable = edges.iter().all(|e| e.weight == 0.0);
    // children always have larger ids than their parent
    for c in (0..clusters.len()).rev() {
        let kids = &clusters[c].children;
        if c == 0 && !root_selectable {
            break;
        }
        if kids.is_empty() {
            selected[c] = true;
            best[c] = stab[c];
            continue;
        }
        let sum: f64 = kids.iter().map(|&k| best[k]).sum();
        if stab[c] >= sum {
            selected[c] = true;
            best[c] = stab[c];
            let mut stack = kids.clone();
            while let Some(k) = stack.pop() {
                selected[k] = false;
                stack.extend(clusters[k].children.iter().copied());
            }
        } else {
            best[c] = sum;
        }
    }

    let mut groups: Vec<Vec<(usize, f64)>> = Vec::new();
    for c in 0..clusters.len() {
        if !selected[c] {
            continue;
        }
        let mut members = subtree_points(&clusters, c);
        if clusters[c].parent.is_none() {
            let top = clusters[0]
                .points
                .iter()
                .map(|&(_, l)| l)
                .chain(clusters[0].children.iter().map(|&k| clusters[k].birth))
                .fold(f64::NEG_INFINITY, f64::max);
            members.retain(|&(_, l)| l >= top);
            if members.len() < mcs {
                continue;
            }
        }
        groups.push(members);
    }

    for g in &mut groups {
        g.sort_by_key(|&(p, _)| p);
    }
    groups.sort_by_key(|g| g[0].0);
    let mut out = ClusterLabels::all_noise(n);
    out.n_clusters = groups.len();
    for (label, g) in groups.iter().enumerate() {
        let lmax = g.iter().map(|&(_, l)| l).fold(0.0, f64::max);
        for &(p, l) in g {
            out.labels[p] = label as i64;
            out.probabilities[p] = if lmax.is_infinite() {
                if l.is_infinite() { 1.0 } else { 0.0 }
            } else if lmax > 0.0 {
                l / lmax
            } else {
                1.0
            };
        }
    }
    out
}

/// Full HDBSCAN: mutual reachability, MST, condensed-tree extraction.
pub fn hdbscan(x: &Coordinates, params: &HdbscanParams) -> Result<ClusterLabels, ClusterError> {
    if params.min_cluster_size < 2 {
        return Err(ClusterError::InvalidParams("min_cluster_size must be >= 2".into()));
    }
    if x.rows < params.min_cluster_size {
        return Err(ClusterError::TooFewPoints {
            needed: params.min_cluster_size,
            rows: x.rows,
        });
    }
    let mr = mutual_reachability(x, params.min_samples())?;
    let edges = mst(|a, b| mr.distance(a, b), x.rows);
    Ok(condense_and_extract(&edges, x.rows, params))
}

/// Adjusted Rand index between two labelings (outliers are one more label).
pub fn adjusted_rand_index(a: &[i64], b: &[i64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut table: BTreeMap<(i64, i64), f64> = BTreeMap::new();
    let mut rows: BTreeMap<i64, f64> = BTreeMap::new();
    let mut cols: BTreeMap<i64, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&v| choose2(v)).sum();
    let sa: f64 = rows.values().map(|&v| choose2(v)).sum();
    let sb: f64 = cols.values().map(|&v| choose2(v)).sum();
    let expected = sa * sb / choose2(n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
