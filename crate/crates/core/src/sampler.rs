//! Covisibility graph construction and greedy selection of evaluation
//! images that trades off connectivity against spatial spread.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colmap::SparseScene;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("scene has no metric scale but a minimum translation of {0} m was requested")]
    MissingScale(f64),
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("sample size must be at least 1")]
    ZeroSample,
    #[error("start image {0} is not in the graph")]
    UnknownStart(u32),
    #[error("invalid sampler config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n: usize,
    pub w_conn: f64,
    pub w_div: f64,
    pub min_shared: usize,
    pub min_trans_m: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n: 10,
            w_conn: 0.8,
            w_div: 0.2,
            min_shared: 30,
            min_trans_m: 5.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.n == 0 {
            return Err(SamplerError::ZeroSample);
        }
        for (name, v) in [("w_conn", self.w_conn), ("w_div", self.w_div), ("min_trans_m", self.min_trans_m)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SamplerError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovisEdge {
    pub a: u32,
    pub b: u32,
    pub shared: usize,
    /// Camera-center distance in meters (model units when no scale is set).
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovisGraph {
    /// Camera centers in meters, keyed by image id.
    pub centers: BTreeMap<u32, Vector3<f64>>,
    /// Sorted by `(a, b)` with `a < b`.
    pub edges: Vec<CovisEdge>,
    pub adjacency: BTreeMap<u32, BTreeSet<u32>>,
    pub max_degree: usize,
    pub max_edge_translation: f64,
}

impl CovisGraph {
    /// Graph over the given nodes; edges are canonicalized and deduplicated.
    pub fn from_edges(centers: BTreeMap<u32, Vector3<f64>>, edges: Vec<CovisEdge>) -> Self {
        let mut adjacency: BTreeMap<u32, BTreeSet<u32>> = centers.keys().map(|&id| (id, BTreeSet::new())).collect();
        let mut canon: BTreeMap<(u32, u32), CovisEdge> = BTreeMap::new();
        for e in edges {
            if e.a == e.b {
                continue;
            }
            let (a, b) = (e.a.min(e.b), e.a.max(e.b));
            adjacency.entry(a).or_default().insert(b);
            adjacency.entry(b).or_default().insert(a);
            canon.insert((a, b), CovisEdge { a, b, ..e });
        }
        let edges: Vec<CovisEdge> = canon.into_values().collect();
        let max_degree = adjacency.values().map(BTreeSet::len).max().unwrap_or(0);
        let max_edge_translation = edges.iter().map(|e| e.distance).fold(0.0, f64::max);
        Self {
            centers,
            edges,
            adjacency,
            max_degree,
            max_edge_translation,
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = u32> + '_ {
        self.adjacency.keys().copied()
    }

    pub fn degree(&self, id: u32) -> usize {
        self.adjacency.get(&id).map_or(0, BTreeSet::len)
    }

    /// Connected components, each sorted, listed by smallest member.
    pub fn components(&self) -> Vec<Vec<u32>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for start in self.nodes() {
            if !seen.insert(start) {
                continue;
            }
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for &w in &self.adjacency[&v] {
                    if seen.insert(w) {
                        comp.push(w);
                        queue.push_back(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Largest component; ties go to the one with the smallest image id.
    pub fn largest_component(&self) -> Option<Vec<u32>> {
        let mut best: Option<Vec<u32>> = None;
        for c in self.components() {
            if best.as_ref().map_or(true, |b| c.len() > b.len()) {
                best = Some(c);
            }
        }
        best
    }
}

/// Pairwise counts of distinct shared 3D points, from the point tracks.
pub fn shared_point_counts(scene: &SparseScene) -> HashMap<(u32, u32), usize> {
    let mut counts = HashMap::new();
    for p in scene.points3d.values() {
        let imgs: BTreeSet<u32> = p.track.iter().map(|t| t.image_id).collect();
        let imgs: Vec<u32> = imgs.into_iter().collect();
        for (i, &a) in imgs.iter().enumerate() {
            for &b in &imgs[i + 1..] {
                *counts.entry((a, b)).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Edge iff `shared ≥ min_shared` and `center distance · scale ≥ min_trans_m`.
pub fn build_covis_graph(scene: &SparseScene, min_shared: usize, min_trans_m: f64, scale_to_meters: Option<f64>) -> Result<CovisGraph, SamplerError> {
    let scale = match scale_to_meters.or(scene.scale_to_meters) {
        Some(s) => s,
        None if min_trans_m > 0.0 => return Err(SamplerError::MissingScale(min_trans_m)),
        None => 1.0,
    };
    let centers: BTreeMap<u32, Vector3<f64>> = scene.images.iter().map(|(&id, img)| (id, img.center() * scale)).collect();
    let mut edges = Vec::new();
    for ((a, b), shared) in shared_point_counts(scene) {
        if shared < min_shared {
            continue;
        }
        let (Some(ca), Some(cb)) = (centers.get(&a), centers.get(&b)) else {
            continue;
        };
        let distance = (ca - cb).norm();
        if distance >= min_trans_m {
            edges.push(CovisEdge { a, b, shared, distance });
        }
    }
    Ok(CovisGraph::from_edges(centers, edges))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub images: Vec<u32>,
    /// False when the frontier emptied before `n` images were picked.
    pub complete: bool,
}

/// Seeds uniformly at random inside the largest component, then grows.
pub fn greedy_sample(g: &CovisGraph, cfg: &SamplerConfig) -> Result<Sample, SamplerError> {
    cfg.validate()?;
    let comp = g.largest_component().ok_or(SamplerError::EmptyGraph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = comp[rng.gen_range(0..comp.len())];
    greedy_sample_from(g, start, cfg)
}

/// Connectivity `deg/max_deg` and diversity `mean center distance to the
/// selected set / max edge translation`; diversity may exceed 1.
pub fn candidate_score(g: &CovisGraph, candidate: u32, selected: &[u32]) -> (f64, f64) {
    let conn = if g.max_degree == 0 { 0.0 } else { g.degree(candidate) as f64 / g.max_degree as f64 };
    let c = g.centers[&candidate];
    let mean = selected.iter().map(|s| (g.centers[s] - c).norm()).sum::<f64>() / selected.len() as f64;
    let div = if g.max_edge_translation > 0.0 { mean / g.max_edge_translation } else { 0.0 };
    (conn, div)
}

/// Greedy growth from `start`: each step takes the frontier node with the
/// highest weighted score, smallest id on ties.
pub fn greedy_sample_from(g: &CovisGraph, start: u32, cfg: &SamplerConfig) -> Result<Sample, SamplerError> {
    cfg.validate()?;
    if g.adjacency.is_empty() {
        return Err(SamplerError::EmptyGraph);
    }
    if !g.adjacency.contains_key(&start) {
        return Err(SamplerError::UnknownStart(start));
    }
    let mut selected = vec![start];
    let mut chosen: BTreeSet<u32> = BTreeSet::from([start]);
    while selected.len() < cfg.n {
        let frontier: BTreeSet<u32> = selected
            .iter()
            .flat_map(|s| g.adjacency[s].iter().copied())
            .filter(|c| !chosen.contains(c))
            .collect();
        let mut best: Option<(f64, u32)> = None;
        for c in frontier {
            let (conn, div) = candidate_score(g, c, &selected);
            let score = cfg.w_conn * conn + cfg.w_div * div;
            if best.map_or(true, |(b, _)| score > b) {
                best = Some((score, c));
            }
        }
        let Some((_, pick)) = best else {
            log::warn!("sampler: frontier exhausted after {} of {} images", selected.len(), cfg.n);
            return Ok(Sample { images: selected, complete: false });
        };
        selected.push(pick);
        chosen.insert(pick);
    }
    Ok(Sample { images: selected, complete: true })
}
