//! Backbone representation analysis on exported tensors: per-layer
//! input/output cosine similarity, layer selection from similarity minima,
//! cross-view attention maps and the bias-parameter mask manifest.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{read_tensor, Tensor, TensorError};

pub const DEFAULT_DELTA: usize = 2;
pub const SKIP_CONNECTION_LAYERS: [usize; 4] = [4, 11, 17, 23];

#[derive(Debug, Error)]
pub enum ReprError {
    #[error("layer {layer}: input shape {input:?} differs from output {output:?}")]
    ShapeMismatch { layer: usize, input: Vec<usize>, output: Vec<usize> },
    #[error("layer {0}: zero-norm tensor")]
    ZeroNorm(usize),
    #[error("traces disagree on layer layout")]
    InconsistentTraces,
    #[error("no traces supplied")]
    NoTraces,
    #[error("unknown model family {0:?} (expected vggt, wm or pi3)")]
    UnknownFamily(String),
    #[error("{0} layer selection needs a similarity curve")]
    CurveRequired(&'static str),
    #[error("query index {index} outside 0..{limit}")]
    IndexOutOfRange { index: usize, limit: usize },
    #[error("attention input: {0}")]
    BadAttention(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {detail}")]
    Manifest { path: String, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Frame,
    Global,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Frame => "frame",
            LayerKind::Global => "global",
        }
    }
}

impl FromStr for LayerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "frame" => Ok(LayerKind::Frame),
            "global" => Ok(LayerKind::Global),
            other => Err(format!("unknown layer kind {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPair {
    pub layer: usize,
    pub input: Tensor,
    pub output: Tensor,
}

/// Cosine similarity of two tensors flattened to vectors.
pub fn cosine_similarity(a: &Tensor, b: &Tensor, layer: usize) -> Result<f64, ReprError> {
    if a.shape() != b.shape() {
        return Err(ReprError::ShapeMismatch {
            layer,
            input: a.shape().to_vec(),
            output: b.shape().to_vec(),
        });
    }
    let (x, y) = (a.to_f64_vec(), b.to_f64_vec());
    let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
    for (p, q) in x.iter().zip(&y) {
        dot += p * q;
        nx += p * p;
        ny += q * q;
    }
    if nx == 0.0 || ny == 0.0 {
        return Err(ReprError::ZeroNorm(layer));
    }
    Ok((dot / (nx.sqrt() * ny.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub layers: Vec<usize>,
    pub sim: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
}

impl SimilarityCurve {
    /// Curve over layers `0..values.len()`.
    pub fn from_values(values: Vec<f64>) -> Self {
        Self::with_layers((0..values.len()).collect(), values)
    }

    pub fn with_layers(layers: Vec<usize>, sim: Vec<f64>) -> Self {
        let n = sim.len();
        let mean = if n == 0 { 0.0 } else { sim.iter().sum::<f64>() / n as f64 };
        let std = if n < 2 {
            0.0
        } else {
            (sim.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { layers, sim, mean, std }
    }

    pub fn threshold(&self) -> f64 {
        self.mean - self.std / 2.0
    }
}

/// One similarity per layer, averaged elementwise across traces.
pub fn layer_similarity(traces: &[Vec<LayerPair>]) -> Result<SimilarityCurve, ReprError> {
    let first = traces.first().ok_or(ReprError::NoTraces)?;
    let layers: Vec<usize> = first.iter().map(|p| p.layer).collect();
    let mut acc = vec![0.0; layers.len()];
    for trace in traces {
        if trace.iter().map(|p| p.layer).ne(layers.iter().copied()) {
            return Err(ReprError::InconsistentTraces);
        }
        for (slot, pair) in acc.iter_mut().zip(trace) {
            *slot += cosine_similarity(&pair.input, &pair.output, pair.layer)?;
        }
    }
    let n = traces.len() as f64;
    Ok(SimilarityCurve::with_layers(layers, acc.into_iter().map(|s| s / n).collect()))
}

/// Positions lower than the left neighbour whose value (or plateau) is
/// followed by a rise. Plateaus report their leftmost index; the first and
/// last positions never qualify.
pub fn local_minima(values: &[f64]) -> Vec<usize> {
    let n = values.len();
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if values[i] < values[i - 1] {
            let mut j = i;
            while j + 1 < n && values[j + 1] == values[i] {
                j += 1;
            }
            if j + 1 < n && values[j + 1] > values[i] {
                out.push(i);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Every local minimum plus neighbours `i ± k` (`k = 1..=delta`) whose
/// similarity is at most `mean − std/2`. Returns positions into the curve.
pub fn select_positions(curve: &SimilarityCurve, delta: usize) -> BTreeSet<usize> {
    let s = &curve.sim;
    let thr = curve.threshold();
    let mut out = BTreeSet::new();
    for i in local_minima(s) {
        out.insert(i);
        for k in 1..=delta {
            if let Some(l) = i.checked_sub(k) {
                if s[l] <= thr {
                    out.insert(l);
                }
            }
            if i + k < s.len() && s[i + k] <= thr {
                out.insert(i + k);
            }
        }
    }
    out
}

/// [`select_positions`] mapped to the curve's layer indices.
pub fn select_layers(curve: &SimilarityCurve, delta: usize) -> BTreeSet<usize> {
    select_positions(curve, delta).into_iter().map(|i| curve.layers[i]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Vggt,
    Wm,
    Pi3,
}

impl FromStr for ModelFamily {
    type Err = ReprError;
    fn from_str(s: &str) -> Result<Self, ReprError> {
        match s.to_ascii_lowercase().as_str() {
            "vggt" => Ok(ModelFamily::Vggt),
            "wm" | "worldmirror" => Ok(ModelFamily::Wm),
            "pi3" | "π3" | "π³" => Ok(ModelFamily::Pi3),
            _ => Err(ReprError::UnknownFamily(s.to_string())),
        }
    }
}

/// Layers to fine-tune for a model family. The skip-connection families use
/// a fixed set; the others need a measured curve.
pub fn fixed_layer_set(family: ModelFamily, curve: Option<&SimilarityCurve>, delta: usize) -> Result<BTreeSet<usize>, ReprError> {
    match family {
        ModelFamily::Vggt | ModelFamily::Wm => Ok(SKIP_CONNECTION_LAYERS.into_iter().collect()),
        ModelFamily::Pi3 => curve.map(|c| select_layers(c, delta)).ok_or(ReprError::CurveRequired("pi3")),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxScope {
    /// Normalize over every key of both images.
    #[default]
    AllKeys,
    /// Normalize over the second image's patch keys only.
    SecondImage,
}

/// Q and K for one global-attention layer: `heads × tokens × d_h`, tokens
/// ordered image 1 then image 2. Each image block starts with
/// `special_tokens` non-patch tokens followed by its row-major patch grid.
#[derive(Clone, Debug)]
pub struct AttentionInput {
    pub q: Tensor,
    pub k: Tensor,
    pub grid1: (usize, usize),
    pub grid2: (usize, usize),
    pub special_tokens: usize,
}

impl AttentionInput {
    fn dims(&self) -> Result<(usize, usize, usize), ReprError> {
        let (qs, ks) = (self.q.shape(), self.k.shape());
        if qs.len() != 3 || ks.len() != 3 {
            return Err(ReprError::BadAttention(format!("Q {qs:?} and K {ks:?} must be heads×tokens×d_h")));
        }
        if qs != ks {
            return Err(ReprError::BadAttention(format!("Q {qs:?} and K {ks:?} differ")));
        }
        let expected = 2 * self.special_tokens + self.grid1.0 * self.grid1.1 + self.grid2.0 * self.grid2.1;
        if qs[1] != expected {
            return Err(ReprError::BadAttention(format!("{} tokens, grids and special tokens imply {expected}", qs[1])));
        }
        if qs[2] == 0 {
            return Err(ReprError::BadAttention("d_h is zero".into()));
        }
        Ok((qs[0], qs[1], qs[2]))
    }

    fn image2_patch_start(&self) -> usize {
        2 * self.special_tokens + self.grid1.0 * self.grid1.1
    }
}

/// Per-head softmax rows over the chosen keys for one query token, as
/// `heads × tokens` (entries outside the scope are zero).
pub fn attention_rows(inp: &AttentionInput, query_index: usize, scope: SoftmaxScope) -> Result<Vec<Vec<f64>>, ReprError> {
    let (heads, tokens, dh) = inp.dims()?;
    let n1 = inp.grid1.0 * inp.grid1.1;
    if query_index >= n1 {
        return Err(ReprError::IndexOutOfRange { index: query_index, limit: n1 });
    }
    let (q, k) = (inp.q.to_f64_vec(), inp.k.to_f64_vec());
    let qi = inp.special_tokens + query_index;
    let lo = match scope {
        SoftmaxScope::AllKeys => 0,
        SoftmaxScope::SecondImage => inp.image2_patch_start(),
    };
    let scale = 1.0 / (dh as f64).sqrt();
    let mut rows = Vec::with_capacity(heads);
    for h in 0..heads {
        let qv = &q[(h * tokens + qi) * dh..(h * tokens + qi + 1) * dh];
        let mut row = vec![0.0; tokens];
        let mut max = f64::NEG_INFINITY;
        for (j, slot) in row.iter_mut().enumerate().skip(lo) {
            let kv = &k[(h * tokens + j) * dh..(h * tokens + j + 1) * dh];
            *slot = qv.iter().zip(kv).map(|(a, b)| a * b).sum::<f64>() * scale;
            max = max.max(*slot);
        }
        let mut total = 0.0;
        for slot in row.iter_mut().skip(lo) {
            *slot = (*slot - max).exp();
            total += *slot;
        }
        for slot in row.iter_mut().skip(lo) {
            *slot /= total;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Attention from one image-1 patch token onto image 2's patch grid, summed
/// over heads, as an `H_p × W_p` tensor.
pub fn cross_view_attention(inp: &AttentionInput, query_index: usize, scope: SoftmaxScope) -> Result<Tensor, ReprError> {
    let rows = attention_rows(inp, query_index, scope)?;
    let start = inp.image2_patch_start();
    let n2 = inp.grid2.0 * inp.grid2.1;
    let mut map = vec![0.0; n2];
    for row in &rows {
        for (m, a) in map.iter_mut().zip(&row[start..start + n2]) {
            *m += a;
        }
    }
    Ok(Tensor::from_f64(vec![inp.grid2.0, inp.grid2.1], map)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub layer: usize,
    pub kind: LayerKind,
    pub parameter_names: Vec<String>,
}

/// Bias parameters unfrozen per selected block: attention qkv and output
/// projection, and both MLP layers.
pub const BIAS_PARAMETERS: [&str; 4] = ["attn.qkv.bias", "attn.proj.bias", "mlp.fc1.bias", "mlp.fc2.bias"];

/// Manifest entries naming parameters as `{kind}_blocks.{layer}.{param}`.
pub fn mask_manifest(kind: LayerKind, layers: &BTreeSet<usize>) -> Vec<MaskEntry> {
    layers
        .iter()
        .map(|&layer| MaskEntry {
            layer,
            kind,
            parameter_names: BIAS_PARAMETERS
                .iter()
                .map(|p| format!("{}_blocks.{layer}.{p}", kind.as_str()))
                .collect(),
        })
        .collect()
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TraceManifest {
    pub kind: LayerKind,
    pub traces: Vec<TraceFiles>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFiles {
    pub layers: Vec<LayerFiles>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LayerFiles {
    pub layer: usize,
    pub input: PathBuf,
    pub output: PathBuf,
}

/// Loads a trace manifest; tensor paths resolve against its directory.
pub fn load_traces(path: &Path) -> Result<(LayerKind, Vec<Vec<LayerPair>>), ReprError> {
    let bad = |detail: String| ReprError::Manifest {
        path: path.display().to_string(),
        detail,
    };
    let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let m: TraceManifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut traces = Vec::with_capacity(m.traces.len());
    for t in &m.traces {
        let mut pairs = Vec::with_capacity(t.layers.len());
        for l in &t.layers {
            pairs.push(LayerPair {
                layer: l.layer,
                input: read_tensor(&base.join(&l.input))?,
                output: read_tensor(&base.join(&l.output))?,
            });
        }
        traces.push(pairs);
    }
    Ok((m.kind, traces))
}
