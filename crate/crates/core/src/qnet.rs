//! Q-value approximators with hand-written backpropagation.
//!
//! [`GatQNet`] is the graph-attention network: one attention layer over the
//! closed neighborhoods of the topology followed by two fully connected
//! layers whose input is the flattened `N·H` node-feature matrix.
//! [`MlpQNet`] is the fully connected network used by the DQN-routing
//! baseline. Both share the flat [`ParamSet`] representation so optimizer,
//! soft-update, consensus and checkpoint code is architecture agnostic.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::FeatureMatrix;
use crate::topology::{NodeId, Topology};

#[derive(Debug, Error, PartialEq)]
pub enum QNetError {
    #[error("parameter shape mismatch: {0}")]
    Shape(String),
    #[error("no allowed action")]
    NoAction,
    #[error("checkpoint line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
    #[error("invalid hyperparameter: {0}")]
    Hyperparam(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub gamma: f64,
    pub step_size: f64,
    pub tau: f64,
    pub gat_features: usize,
    pub hidden_units: usize,
    pub leaky_slope: f64,
    pub batch_size: usize,
    /// Per-agent replay capacity for the decentralized paradigms.
    pub memory_capacity: usize,
    pub epsilon: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            step_size: 1e-3,
            tau: 0.05,
            gat_features: 16,
            hidden_units: 128,
            leaky_slope: 0.2,
            batch_size: 16,
            memory_capacity: 32,
            epsilon: 0.0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), QNetError> {
        let bad = |what: &str| Err(QNetError::Hyperparam(what.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if self.gat_features == 0 || self.hidden_units == 0 {
            return bad("layer widths must be positive");
        }
        if self.batch_size == 0 || self.memory_capacity == 0 {
            return bad("batch_size and memory_capacity must be positive");
        }
        if self.batch_size > self.memory_capacity {
            return bad("batch_size exceeds memory_capacity");
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope.is_finite()) {
            return bad("leaky_slope must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1]");
        }
        Ok(())
    }
}

/// A named block of a [`ParamSet`], stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All learnable parameters of one network as a single flat buffer with
/// named segments. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    segments: Vec<Segment>,
    data: Vec<f64>,
}

pub type Gradient = ParamSet;

impl ParamSet {
    pub fn zeros(shapes: &[(&str, usize, usize)]) -> Self {
        let mut segments = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for &(name, rows, cols) in shapes {
            segments.push(Segment {
                name: name.to_string(),
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        }
        Self {
            segments,
            data: vec![0.0; offset],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            segments: self.segments.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn find(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.find(name).map(|s| &self.data[s.offset..s.offset + s.len()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.find(name)?.clone();
        Some(&mut self.data[s.offset..s.offset + s.len()])
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.segments == other.segments
    }

    fn check_shape(&self, other: &ParamSet) -> Result<(), QNetError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(QNetError::Shape("parameter sets have different layouts".into()))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) -> Result<(), QNetError> {
        self.check_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_distance(&self, other: &ParamSet) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Plain-text checkpoint: a header line, then for every segment a
    /// `segment <name> <rows> <cols>` line followed by one line of values.
    /// Values use the shortest round-trip representation, so
    /// [`ParamSet::from_checkpoint`] restores the buffer bit for bit.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from("gatroute-params v1\n");
        for s in &self.segments {
            let _ = writeln!(out, "segment {} {} {}", s.name, s.rows, s.cols);
            let values: Vec<String> = self.data[s.offset..s.offset + s.len()]
                .iter()
                .map(|v| format!("{v:e}"))
                .collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, QNetError> {
        let err = |line: usize, msg: &str| QNetError::Checkpoint {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "gatroute-params v1")) => {}
            _ => return Err(err(1, "missing header")),
        }
        let mut segments = Vec::new();
        let mut data = Vec::new();
        while let Some((k, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 || f[0] != "segment" {
                return Err(err(k + 1, "expected `segment <name> <rows> <cols>`"));
            }
            let rows: usize = f[2].parse().map_err(|_| err(k + 1, "bad rows"))?;
            let cols: usize = f[3].parse().map_err(|_| err(k + 1, "bad cols"))?;
            let (vk, values) = lines.next().ok_or_else(|| err(k + 2, "missing values"))?;
            let parsed: Result<Vec<f64>, _> = values.split_whitespace().map(str::parse).collect();
            let parsed = parsed.map_err(|_| err(vk + 1, "bad value"))?;
            if parsed.len() != rows * cols {
                return Err(err(vk + 1, "value count does not match shape"));
            }
            segments.push(Segment {
                name: f[1].to_string(),
                rows,
                cols,
                offset: data.len(),
            });
            data.extend(parsed);
        }
        Ok(Self { segments, data })
    }
}

/// `p − α·grad`.
pub fn sgd_step(p: &ParamSet, grad: &Gradient, alpha: f64) -> Result<ParamSet, QNetError> {
    let mut out = p.clone();
    out.add_scaled(grad, -alpha)?;
    Ok(out)
}

/// `τ·main + (1 − τ)·target`.
pub fn soft_update(target: &ParamSet, main: &ParamSet, tau: f64) -> Result<ParamSet, QNetError> {
    target.check_shape(main)?;
    let mut out = target.clone();
    for (t, m) in out.data.iter_mut().zip(&main.data) {
        *t = tau * m + (1.0 - tau) * *t;
    }
    Ok(out)
}

/// Greedy action over `allowed`; ties go to the smallest node index.
pub fn select_action(qvalues: &[f64], allowed: &[NodeId]) -> Result<NodeId, QNetError> {
    let mut best: Option<NodeId> = None;
    for &a in allowed {
        best = match best {
            None => Some(a),
            Some(b) => {
                let (qa, qb) = (qvalues[a.0], qvalues[b.0]);
                if qa > qb || (qa == qb && a < b) {
                    Some(a)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.ok_or(QNetError::NoAction)
}

/// Maximum Q-value over `allowed`, or `None` for an empty set.
pub fn max_allowed(qvalues: &[f64], allowed: &[NodeId]) -> Option<f64> {
    allowed
        .iter()
        .map(|a| qvalues[a.0])
        .fold(None, |m, q| Some(m.map_or(q, |m: f64| m.max(q))))
}

/// Bellman target `r + γ·next_max_q·(1 − f)`.
pub fn td_target(reward: f64, next_max_q: f64, terminal: bool, gamma: f64) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma * next_max_q
    }
}

/// One supervised regression item: push `Q(x, action)` towards `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub features: FeatureMatrix,
    pub action: NodeId,
    pub target: f64,
}

/// Differentiable Q-network with a fixed architecture.
pub trait QModel: Send + Sync {
    type Cache;

    fn node_count(&self) -> usize;

    /// Zero parameters with this model's layout.
    fn zero_params(&self) -> ParamSet;

    /// Uniform `[-k, k]` initialization with `k = 1/√fan_in` per layer.
    fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet;

    fn forward(&self, p: &ParamSet, x: &FeatureMatrix) -> Self::Cache;

    fn cached_q<'c>(&self, cache: &'c Self::Cache) -> &'c [f64];

    /// Adds `dq · ∂Q(x, action)/∂p` into `grad`.
    fn backward_into(
        &self,
        p: &ParamSet,
        cache: &Self::Cache,
        action: NodeId,
        dq: f64,
        grad: &mut Gradient,
    );

    fn q_values(&self, p: &ParamSet, x: &FeatureMatrix) -> Vec<f64> {
        self.cached_q(&self.forward(p, x)).to_vec()
    }
}

/// Mean squared TD error over the batch.
pub fn loss<M: QModel>(model: &M, p: &ParamSet, batch: &[TrainItem]) -> f64 {
    let n = batch.len() as f64;
    batch
        .iter()
        .map(|item| {
            let q = model.q_values(p, &item.features)[item.action.0];
            (item.target - q).powi(2)
        })
        .sum::<f64>()
        / n
}

/// Exact gradient of [`loss`] with respect to every parameter, together
/// with the loss value.
pub fn backward<M: QModel>(model: &M, p: &ParamSet, batch: &[TrainItem]) -> (f64, Gradient) {
    let mut grad = p.zeros_like();
    let n = batch.len() as f64;
    let mut total = 0.0;
    for item in batch {
        let cache = model.forward(p, &item.features);
        let q = model.cached_q(&cache)[item.action.0];
        let err = q - item.target;
        total += err * err;
        model.backward_into(p, &cache, item.action, 2.0 * err / n, &mut grad);
    }
    (total / n, grad)
}

fn uniform_fill<R: Rng + ?Sized>(slice: &mut [f64], fan_in: usize, rng: &mut R) {
    let k = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in slice {
        *v = rng.gen_range(-k..=k);
    }
}

#[inline]
fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Graph-attention Q-network.
#[derive(Debug, Clone)]
pub struct GatQNet {
    n: usize,
    h: usize,
    hidden: usize,
    slope: f64,
    hoods: Vec<Vec<usize>>,
}

/// Intermediates of one [`GatQNet`] forward pass.
#[derive(Debug, Clone)]
pub struct GatCache {
    pub inputs: Vec<[f64; 3]>,
    /// `h_i = W x_i`, `N × H`.
    pub h: Vec<f64>,
    /// Attention logits before the LeakyReLU, aligned with the closed
    /// neighborhoods.
    pub logits: Vec<Vec<f64>>,
    /// Attention coefficients `α_ij`, aligned with the closed neighborhoods.
    pub alpha: Vec<Vec<f64>>,
    /// Aggregated features before the ReLU, `N × H`.
    pub z: Vec<f64>,
    /// Flattened node features `x'`, `N·H`.
    pub u: Vec<f64>,
    /// Nodes whose output block of `u` is not identically zero.
    pub active: Vec<usize>,
    pub pre1: Vec<f64>,
    pub v: Vec<f64>,
    pub q: Vec<f64>,
}

impl GatCache {
    /// Dense `N × N` attention matrix with zeros outside the neighborhoods.
    pub fn attention_matrix(&self, net: &GatQNet) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; net.n]; net.n];
        for (i, hood) in net.hoods.iter().enumerate() {
            for (k, &j) in hood.iter().enumerate() {
                m[i][j] = self.alpha[i][k];
            }
        }
        m
    }
}

const GAT_W: usize = 0;
const GAT_A: usize = 1;
const FC1_W: usize = 2;
const FC1_B: usize = 3;
const FC2_W: usize = 4;
const FC2_B: usize = 5;

impl GatQNet {
    pub fn new(topology: &Topology, gat_features: usize, hidden: usize, leaky_slope: f64) -> Self {
        let hoods = topology
            .nodes()
            .map(|i| topology.closed_neighborhood(i).iter().map(|j| j.0).collect())
            .collect();
        Self {
            n: topology.node_count(),
            h: gat_features,
            hidden,
            slope: leaky_slope,
            hoods,
        }
    }

    pub fn from_hyperparams(topology: &Topology, hp: &Hyperparams) -> Self {
        Self::new(topology, hp.gat_features, hp.hidden_units, hp.leaky_slope)
    }

    pub fn features(&self) -> usize {
        self.h
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn offsets(p: &ParamSet) -> [usize; 6] {
        let s = p.segments();
        [s[0].offset, s[1].offset, s[2].offset, s[3].offset, s[4].offset, s[5].offset]
    }
}

impl QModel for GatQNet {
    type Cache = GatCache;

    fn node_count(&self) -> usize {
        self.n
    }

    fn zero_params(&self) -> ParamSet {
        ParamSet::zeros(&[
            ("gat_weight", self.h, 3),
            ("attention_vec", 1, 2 * self.h),
            ("fc1_weight", self.hidden, self.n * self.h),
            ("fc1_bias", 1, self.hidden),
            ("fc2_weight", self.n, self.hidden),
            ("fc2_bias", 1, self.n),
        ])
    }

    fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = self.zero_params();
        let fan_ins = [3, 2 * self.h, self.n * self.h, self.n * self.h, self.hidden, self.hidden];
        let segments = p.segments().to_vec();
        for (s, fan_in) in segments.iter().zip(fan_ins) {
            uniform_fill(&mut p.as_mut_slice()[s.offset..s.offset + s.len()], fan_in, rng);
        }
        p
    }

    fn forward(&self, p: &ParamSet, x: &FeatureMatrix) -> GatCache {
        let (n, hdim, hidden) = (self.n, self.h, self.hidden);
        debug_assert_eq!(x.node_count(), n);
        let off = Self::offsets(p);
        let d = p.as_slice();
        let w = &d[off[GAT_W]..off[GAT_W] + hdim * 3];
        let a = &d[off[GAT_A]..off[GAT_A] + 2 * hdim];
        let (a_src, a_dst) = a.split_at(hdim);

        let mut h = vec![0.0; n * hdim];
        let mut nonzero = vec![false; n];
        for (i, row) in x.rows().iter().enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                continue;
            }
            nonzero[i] = true;
            for c in 0..hdim {
                h[i * hdim + c] = w[c * 3] * row[0] + w[c * 3 + 1] * row[1] + w[c * 3 + 2] * row[2];
            }
        }
        // Attention halves: a_srcᵀh_i and a_dstᵀh_j.
        let dot = |v: &[f64], i: usize| -> f64 {
            v.iter().zip(&h[i * hdim..(i + 1) * hdim]).map(|(x, y)| x * y).sum()
        };
        let src_score: Vec<f64> = (0..n).map(|i| dot(a_src, i)).collect();
        let dst_score: Vec<f64> = (0..n).map(|j| dot(a_dst, j)).collect();

        let mut logits = Vec::with_capacity(n);
        let mut alpha = Vec::with_capacity(n);
        let mut z = vec![0.0; n * hdim];
        let mut u = vec![0.0; n * hdim];
        let mut active = Vec::new();
        for (i, hood) in self.hoods.iter().enumerate() {
            let s: Vec<f64> = hood.iter().map(|&j| src_score[i] + dst_score[j]).collect();
            let e: Vec<f64> = s.iter().map(|&v| leaky(v, self.slope)).collect();
            let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = e.iter().map(|&v| (v - m).exp()).collect();
            let total: f64 = ex.iter().sum();
            let al: Vec<f64> = ex.iter().map(|v| v / total).collect();
            if hood.iter().any(|&j| nonzero[j]) {
                let zi = &mut z[i * hdim..(i + 1) * hdim];
                for (&j, &aij) in hood.iter().zip(&al) {
                    if nonzero[j] {
                        for (zc, hc) in zi.iter_mut().zip(&h[j * hdim..(j + 1) * hdim]) {
                            *zc += aij * hc;
                        }
                    }
                }
                let ui = &mut u[i * hdim..(i + 1) * hdim];
                let mut any = false;
                for (uc, &zc) in ui.iter_mut().zip(zi.iter()) {
                    if zc > 0.0 {
                        *uc = zc;
                        any = true;
                    }
                }
                if any {
                    active.push(i);
                }
            }
            logits.push(s);
            alpha.push(al);
        }

        let fc1 = &d[off[FC1_W]..off[FC1_W] + hidden * n * hdim];
        let b1 = &d[off[FC1_B]..off[FC1_B] + hidden];
        let nh = n * hdim;
        let mut pre1 = b1.to_vec();
        for (k, pk) in pre1.iter_mut().enumerate() {
            let row = &fc1[k * nh..(k + 1) * nh];
            let mut acc = 0.0;
            for &i in &active {
                let base = i * hdim;
                for c in 0..hdim {
                    acc += row[base + c] * u[base + c];
                }
            }
            *pk += acc;
        }
        let v: Vec<f64> = pre1.iter().map(|&x| x.max(0.0)).collect();

        let fc2 = &d[off[FC2_W]..off[FC2_W] + n * hidden];
        let b2 = &d[off[FC2_B]..off[FC2_B] + n];
        let q = (0..n)
            .map(|o| {
                b2[o]
                    + fc2[o * hidden..(o + 1) * hidden]
                        .iter()
                        .zip(&v)
                        .map(|(wt, vv)| wt * vv)
                        .sum::<f64>()
            })
            .collect();

        GatCache {
            inputs: x.rows().to_vec(),
            h,
            logits,
            alpha,
            z,
            u,
            active,
            pre1,
            v,
            q,
        }
    }

    fn cached_q<'c>(&self, cache: &'c GatCache) -> &'c [f64] {
        &cache.q
    }

    fn backward_into(
        &self,
        p: &ParamSet,
        cache: &GatCache,
        action: NodeId,
        dq: f64,
        grad: &mut Gradient,
    ) {
        let (n, hdim, hidden) = (self.n, self.h, self.hidden);
        let nh = n * hdim;
        let off = Self::offsets(p);
        let d = p.as_slice();
        let g = grad.as_mut_slice();
        let act = action.0;

        // Output layer: only row `action` of fc2 takes part.
        g[off[FC2_B] + act] += dq;
        let fc2_row = &d[off[FC2_W] + act * hidden..off[FC2_W] + (act + 1) * hidden];
        let mut dpre = vec![0.0; hidden];
        for k in 0..hidden {
            g[off[FC2_W] + act * hidden + k] += dq * cache.v[k];
            if cache.pre1[k] > 0.0 {
                dpre[k] = dq * fc2_row[k];
            }
        }

        // Hidden layer.
        let mut du = vec![0.0; nh];
        for (k, &dk) in dpre.iter().enumerate() {
            if dk == 0.0 {
                continue;
            }
            g[off[FC1_B] + k] += dk;
            let row_off = off[FC1_W] + k * nh;
            for &i in &cache.active {
                let base = i * hdim;
                for c in 0..hdim {
                    g[row_off + base + c] += dk * cache.u[base + c];
                    du[base + c] += dk * d[row_off + base + c];
                }
            }
        }

        // Attention layer.
        let a = &d[off[GAT_A]..off[GAT_A] + 2 * hdim];
        let (a_src, a_dst) = a.split_at(hdim);
        let mut dh = vec![0.0; nh];
        let mut da = vec![0.0; 2 * hdim];
        for &i in &cache.active {
            let dz: Vec<f64> = (0..hdim)
                .map(|c| {
                    if cache.z[i * hdim + c] > 0.0 {
                        du[i * hdim + c]
                    } else {
                        0.0
                    }
                })
                .collect();
            let hood = &self.hoods[i];
            let alpha = &cache.alpha[i];
            // z_i = Σ α_ij h_j
            let mut dalpha = vec![0.0; hood.len()];
            for (k, &j) in hood.iter().enumerate() {
                let hj = &cache.h[j * hdim..(j + 1) * hdim];
                let mut s = 0.0;
                for c in 0..hdim {
                    dh[j * hdim + c] += alpha[k] * dz[c];
                    s += dz[c] * hj[c];
                }
                dalpha[k] = s;
            }
            // softmax
            let mean: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
            for (k, &j) in hood.iter().enumerate() {
                let de = alpha[k] * (dalpha[k] - mean);
                let ds = if cache.logits[i][k] > 0.0 {
                    de
                } else {
                    de * self.slope
                };
                if ds == 0.0 {
                    continue;
                }
                for c in 0..hdim {
                    da[c] += ds * cache.h[i * hdim + c];
                    da[hdim + c] += ds * cache.h[j * hdim + c];
                    dh[i * hdim + c] += ds * a_src[c];
                    dh[j * hdim + c] += ds * a_dst[c];
                }
            }
        }
        for (c, v) in da.into_iter().enumerate() {
            g[off[GAT_A] + c] += v;
        }
        // h_i = W x_i
        for (i, row) in cache.inputs.iter().enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                continue;
            }
            for c in 0..hdim {
                let dhc = dh[i * hdim + c];
                if dhc != 0.0 {
                    for (col, &xv) in row.iter().enumerate() {
                        g[off[GAT_W] + c * 3 + col] += dhc * xv;
                    }
                }
            }
        }
    }
}

/// Fully connected Q-network: flattened `3N` indicator input, two ReLU
/// hidden layers and `N` linear outputs.
#[derive(Debug, Clone)]
pub struct MlpQNet {
    n: usize,
    hidden: usize,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Nonzero input coordinates `(index, value)`.
    pub input: Vec<(usize, f64)>,
    pub pre1: Vec<f64>,
    pub v1: Vec<f64>,
    pub pre2: Vec<f64>,
    pub v2: Vec<f64>,
    pub q: Vec<f64>,
}

impl MlpQNet {
    pub fn new(node_count: usize, hidden: usize) -> Self {
        Self {
            n: node_count,
            hidden,
        }
    }

    pub fn from_hyperparams(topology: &Topology, hp: &Hyperparams) -> Self {
        Self::new(topology.node_count(), hp.hidden_units)
    }
}

fn dense(weights: &[f64], bias: &[f64], input: &[f64]) -> Vec<f64> {
    let cols = input.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| {
            b + weights[o * cols..(o + 1) * cols]
                .iter()
                .zip(input)
                .map(|(w, x)| w * x)
                .sum::<f64>()
        })
        .collect()
}

impl QModel for MlpQNet {
    type Cache = MlpCache;

    fn node_count(&self) -> usize {
        self.n
    }

    fn zero_params(&self) -> ParamSet {
        ParamSet::zeros(&[
            ("fc1_weight", self.hidden, 3 * self.n),
            ("fc1_bias", 1, self.hidden),
            ("fc2_weight", self.hidden, self.hidden),
            ("fc2_bias", 1, self.hidden),
            ("fc3_weight", self.n, self.hidden),
            ("fc3_bias", 1, self.n),
        ])
    }

    fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = self.zero_params();
        let fan_ins = [3 * self.n, 3 * self.n, self.hidden, self.hidden, self.hidden, self.hidden];
        let segments = p.segments().to_vec();
        for (s, fan_in) in segments.iter().zip(fan_ins) {
            uniform_fill(&mut p.as_mut_slice()[s.offset..s.offset + s.len()], fan_in, rng);
        }
        p
    }

    fn forward(&self, p: &ParamSet, x: &FeatureMatrix) -> MlpCache {
        let (n, hidden) = (self.n, self.hidden);
        let s = p.segments();
        let d = p.as_slice();
        let seg = |k: usize| &d[s[k].offset..s[k].offset + s[k].len()];
        let input: Vec<(usize, f64)> = x
            .flatten()
            .into_iter()
            .enumerate()
            .filter(|(_, v)| *v != 0.0)
            .collect();
        let (w1, b1) = (seg(0), seg(1));
        let cols = 3 * n;
        let pre1: Vec<f64> = (0..hidden)
            .map(|k| b1[k] + input.iter().map(|&(c, v)| w1[k * cols + c] * v).sum::<f64>())
            .collect();
        let v1: Vec<f64> = pre1.iter().map(|v| v.max(0.0)).collect();
        let pre2 = dense(seg(2), seg(3), &v1);
        let v2: Vec<f64> = pre2.iter().map(|v| v.max(0.0)).collect();
        let q = dense(seg(4), seg(5), &v2);
        MlpCache {
            input,
            pre1,
            v1,
            pre2,
            v2,
            q,
        }
    }

    fn cached_q<'c>(&self, cache: &'c MlpCache) -> &'c [f64] {
        &cache.q
    }

    fn backward_into(
        &self,
        p: &ParamSet,
        cache: &MlpCache,
        action: NodeId,
        dq: f64,
        grad: &mut Gradient,
    ) {
        let (n, hidden) = (self.n, self.hidden);
        let off: Vec<usize> = p.segments().iter().map(|s| s.offset).collect();
        let d = p.as_slice();
        let g = grad.as_mut_slice();
        let a = action.0;

        g[off[5] + a] += dq;
        let mut dpre2 = vec![0.0; hidden];
        for k in 0..hidden {
            g[off[4] + a * hidden + k] += dq * cache.v2[k];
            if cache.pre2[k] > 0.0 {
                dpre2[k] = dq * d[off[4] + a * hidden + k];
            }
        }
        let mut dpre1 = vec![0.0; hidden];
        for (o, &dk) in dpre2.iter().enumerate() {
            if dk == 0.0 {
                continue;
            }
            g[off[3] + o] += dk;
            for k in 0..hidden {
                g[off[2] + o * hidden + k] += dk * cache.v1[k];
                dpre1[k] += dk * d[off[2] + o * hidden + k];
            }
        }
        let cols = 3 * n;
        for (k, dk) in dpre1.iter().enumerate() {
            if cache.pre1[k] <= 0.0 || *dk == 0.0 {
                continue;
            }
            g[off[1] + k] += dk;
            for &(c, v) in &cache.input {
                g[off[0] + k * cols + c] += dk * v;
            }
        }
    }
}
