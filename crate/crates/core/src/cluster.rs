//! Shape clustering of latent trajectories: dynamic time warping distances
//! and Ward agglomeration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::LatentSummary;

pub const DEFAULT_WINDOW: usize = 60;
pub const DEFAULT_CLUSTERS: usize = 10;

/// DTW with cost `|a_s - b_t|`, steps (1,0), (0,1), (1,1), both ends anchored.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("DTW of an empty sequence".into()));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &x in a {
        cur[0] = f64::INFINITY;
        for (j, &y) in b.iter().enumerate() {
            let best = prev[j].min(prev[j + 1]).min(cur[j]);
            cur[j + 1] = (x - y).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    labels: Vec<String>,
    d: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    /// Checks squareness, symmetry, a zero diagonal and non-negative finite entries.
    pub fn new(labels: Vec<String>, d: Vec<Vec<f64>>) -> Result<Self> {
        let n = labels.len();
        if d.len() != n || d.iter().any(|row| row.len() != n) {
            return Err(Error::Dimension(format!(
                "distance matrix must be {n} x {n} to match its labels"
            )));
        }
        for i in 0..n {
            if d[i][i] != 0.0 {
                return Err(Error::Domain(format!("nonzero diagonal at {i}")));
            }
            for j in 0..i {
                let v = d[i][j];
                if !(v >= 0.0 && v.is_finite()) || v != d[j][i] {
                    return Err(Error::Domain(format!(
                        "entry ({i}, {j}) is not a symmetric non-negative distance"
                    )));
                }
            }
        }
        Ok(Self { labels, d })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.d
    }
}

pub fn pairwise_distance_matrix(series: &[Vec<f64>], labels: &[String]) -> Result<DistanceMatrix> {
    if series.len() < 2 {
        return Err(Error::Domain(format!(
            "clustering needs at least 2 series, got {}",
            series.len()
        )));
    }
    if labels.len() != series.len() {
        return Err(Error::Dimension(format!(
            "{} labels for {} series",
            labels.len(),
            series.len()
        )));
    }
    let n = series.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| dtw_distance(&series[i], &series[j]))
        .collect::<Result<_>>()?;
    let mut d = vec![vec![0.0; n]; n];
    for (&(i, j), v) in pairs.iter().zip(values) {
        d[i][j] = v;
        d[j][i] = v;
    }
    DistanceMatrix::new(labels.to_vec(), d)
}

/// One agglomeration step. Leaves are nodes `0..N`; merge `k` creates node `N + k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub node: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub labels: Vec<String>,
    pub merges: Vec<Merge>,
}

/// Ward agglomeration with the Lance-Williams update applied to squared
/// distances; heights are reported on the distance scale. Among equal
/// candidates the pair with the smallest `(a, b)` node ids merges first.
pub fn ward_cluster(dm: &DistanceMatrix) -> Result<Dendrogram> {
    let n = dm.len();
    if n < 2 {
        return Err(Error::Domain(format!("clustering needs at least 2 leaves, got {n}")));
    }
    // Squared distances between active clusters, indexed by node id.
    let total = 2 * n - 1;
    let mut sq = vec![vec![0.0; total]; total];
    for i in 0..n {
        for j in 0..n {
            sq[i][j] = dm.get(i, j).powi(2);
        }
    }
    let mut size = vec![0usize; total];
    size[..n].fill(1);
    let mut active: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for (x, &a) in active.iter().enumerate() {
            for &b in &active[x + 1..] {
                let v = sq[a][b];
                if best.is_none_or(|(bv, _, _)| v < bv) {
                    best = Some((v, a, b));
                }
            }
        }
        let (m, a, b) = best.expect("at least two active clusters");
        let node = n + step;
        active.retain(|&c| c != a && c != b);
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for &k in &active {
            let nk = size[k] as f64;
            // Written as m + (non-negative terms) so merge heights cannot decrease by rounding.
            let v = m
                + ((na + nk) * (sq[k][a] - m) + (nb + nk) * (sq[k][b] - m)) / (na + nb + nk);
            sq[k][node] = v;
            sq[node][k] = v;
        }
        size[node] = size[a] + size[b];
        active.push(node);
        merges.push(Merge {
            a,
            b,
            height: m.sqrt(),
            node,
        });
    }
    Ok(Dendrogram {
        labels: dm.labels().to_vec(),
        merges,
    })
}

/// Cluster labels `1..=k` after undoing the `k - 1` highest merges, numbered
/// by first appearance in leaf order.
pub fn cut_dendrogram(tree: &Dendrogram, k: usize) -> Result<Vec<usize>> {
    let n = tree.labels.len();
    if k < 1 || k > n {
        return Err(Error::Domain(format!("k = {k} outside 1..={n}")));
    }
    let mut parent: Vec<usize> = (0..2 * n - 1).collect();
    fn root(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for m in &tree.merges[..n - k] {
        let (ra, rb) = (root(&mut parent, m.a), root(&mut parent, m.b));
        parent[ra] = m.node;
        parent[rb] = m.node;
    }
    let mut ids: Vec<Option<usize>> = vec![None; 2 * n - 1];
    let mut next = 0;
    Ok((0..n)
        .map(|leaf| {
            let r = root(&mut parent, leaf);
            *ids[r].get_or_insert_with(|| {
                next += 1;
                next
            })
        })
        .collect())
}

/// Nested node used for JSON export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DendrogramNode {
    pub height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<DendrogramNode>,
}

impl Dendrogram {
    pub fn n_leaves(&self) -> usize {
        self.labels.len()
    }

    pub fn root(&self) -> usize {
        self.merges.last().map_or(0, |m| m.node)
    }

    fn node_height(&self, node: usize) -> f64 {
        node.checked_sub(self.n_leaves())
            .map_or(0.0, |k| self.merges[k].height)
    }

    pub fn to_tree(&self) -> DendrogramNode {
        self.subtree(self.root())
    }

    fn subtree(&self, node: usize) -> DendrogramNode {
        match node.checked_sub(self.n_leaves()) {
            None => DendrogramNode {
                height: 0.0,
                label: Some(self.labels[node].clone()),
                children: Vec::new(),
            },
            Some(k) => {
                let m = self.merges[k];
                DendrogramNode {
                    height: m.height,
                    label: None,
                    children: vec![self.subtree(m.a), self.subtree(m.b)],
                }
            }
        }
    }

    /// Leaves in plotting order (depth first, left child first).
    pub fn leaf_order(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_leaves());
        let mut stack = vec![self.root()];
        while let Some(node) = stack.pop() {
            match node.checked_sub(self.n_leaves()) {
                None => out.push(node),
                Some(k) => {
                    stack.push(self.merges[k].b);
                    stack.push(self.merges[k].a);
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(&self.to_tree())?)
    }

    /// Newick text with branch lengths equal to height differences.
    pub fn to_newick(&self) -> String {
        let mut out = String::new();
        self.write_newick(self.root(), &mut out);
        out.push(';');
        out
    }

    fn write_newick(&self, node: usize, out: &mut String) {
        match node.checked_sub(self.n_leaves()) {
            None => out.push_str(&newick_label(&self.labels[node])),
            Some(k) => {
                let m = self.merges[k];
                out.push('(');
                for (idx, child) in [m.a, m.b].into_iter().enumerate() {
                    if idx > 0 {
                        out.push(',');
                    }
                    self.write_newick(child, out);
                    out.push_str(&format!(":{}", m.height - self.node_height(child)));
                }
                out.push(')');
            }
        }
    }
}

fn newick_label(label: &str) -> String {
    if label.chars().any(|c| "()[]':;, \t".contains(c)) {
        format!("'{}'", label.replace('\'', "''"))
    } else {
        label.to_string()
    }
}

/// `country_id,cluster`
pub fn labels_csv(labels: &[String], clusters: &[usize]) -> Result<Vec<u8>> {
    if labels.len() != clusters.len() {
        return Err(Error::Dimension(format!(
            "{} labels for {} cluster ids",
            labels.len(),
            clusters.len()
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["country_id", "cluster"])?;
    for (id, c) in labels.iter().zip(clusters) {
        w.write_record([id.as_str(), &c.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// The last `window` posterior-mean `gamma` values of each country, or the
/// full series when it is shorter.
pub fn trajectory_window(latent: &LatentSummary, window: usize) -> Result<Vec<Vec<f64>>> {
    if window < 2 {
        return Err(Error::Domain(format!("cluster window must be at least 2, got {window}")));
    }
    let g = &latent.gamma_mean;
    let start = g.cols().saturating_sub(window);
    Ok((0..g.rows()).map(|i| g.row(i)[start..].to_vec()).collect())
}

/// Clustering of every country in `ids` from its latent trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub distances: DistanceMatrix,
    pub dendrogram: Dendrogram,
    pub clusters: Vec<usize>,
}

pub fn cluster_trajectories(
    latent: &LatentSummary,
    ids: &[String],
    window: usize,
    k: usize,
) -> Result<ClusterResult> {
    let series = trajectory_window(latent, window)?;
    let distances = pairwise_distance_matrix(&series, ids)?;
    let dendrogram = ward_cluster(&distances)?;
    let clusters = cut_dendrogram(&dendrogram, k)?;
    Ok(ClusterResult {
        distances,
        dendrogram,
        clusters,
    })
}
