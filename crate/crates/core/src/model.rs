//! Parameter containers and forward passes for one-hidden-layer ReLU experts
//! combined by dense, sparse top-k, or shared+routed gating.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, relu, stable_softmax, Matrix, RngStream};

/// One expert `x ↦ B·relu(A·x + u) + v` with `A: h×d`, `B: d×h`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub a: Matrix,
    pub u: Vec<f64>,
    pub b: Matrix,
    pub v: Vec<f64>,
}

/// Intermediate values of one expert evaluation, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ExpertTrace {
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl ExpertParams {
    pub fn new(a: Matrix, u: Vec<f64>, b: Matrix, v: Vec<f64>) -> Result<Self> {
        let expert = Self { a, u, b, v };
        expert.validate()?;
        Ok(expert)
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            a: Matrix::zeros(hidden, dim),
            u: vec![0.0; hidden],
            b: Matrix::zeros(dim, hidden),
            v: vec![0.0; dim],
        }
    }

    /// He-style initialisation scaled by `scale`.
    pub fn random(dim: usize, hidden: usize, rng: &mut RngStream, scale: f64) -> Self {
        let a = Matrix::random_normal(hidden, dim, rng, scale * (2.0 / dim as f64).sqrt());
        let u = rng.normals(hidden, 0.1 * scale);
        let b = Matrix::random_normal(dim, hidden, rng, scale / (hidden as f64).sqrt());
        let v = rng.normals(dim, 0.1 * scale);
        Self { a, u, b, v }
    }

    pub fn dim(&self) -> usize {
        self.a.cols()
    }

    pub fn hidden(&self) -> usize {
        self.a.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, d) = self.a.shape();
        if h == 0 || d == 0 {
            return Err(Error::Shape(format!("expert needs h, d >= 1, got h={h}, d={d}")));
        }
        if self.u.len() != h || self.b.shape() != (d, h) || self.v.len() != d {
            return Err(Error::Shape(format!(
                "expert with A {h}x{d} has u {}, B {:?}, v {}",
                self.u.len(),
                self.b.shape(),
                self.v.len()
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite()
            && self.b.is_finite()
            && self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.output)
    }

    pub fn trace(&self, x: &[f64]) -> Result<ExpertTrace> {
        let mut pre = self.a.matvec(x)?;
        for (p, u) in pre.iter_mut().zip(&self.u) {
            *p += u;
        }
        let hidden = relu(&pre);
        let mut output = self.b.matvec(&hidden)?;
        for (o, v) in output.iter_mut().zip(&self.v) {
            *o += v;
        }
        Ok(ExpertTrace {
            pre,
            hidden,
            output,
        })
    }

    /// `Ã = [A | u]`, shape `h × (d+1)`.
    pub fn augmented_in(&self) -> Matrix {
        let d = self.dim();
        Matrix::from_fn(self.hidden(), d + 1, |r, c| {
            if c < d {
                self.a.get(r, c)
            } else {
                self.u[r]
            }
        })
    }

    /// `B̃ = [B | v]`, shape `d × (h+1)`.
    pub fn augmented_out(&self) -> Matrix {
        let h = self.hidden();
        Matrix::from_fn(self.dim(), h + 1, |r, c| {
            if c < h {
                self.b.get(r, c)
            } else {
                self.v[r]
            }
        })
    }

    fn flat_len(&self) -> usize {
        2 * self.hidden() * self.dim() + self.hidden() + self.dim()
    }
}

pub fn expert_forward(x: &[f64], expert: &ExpertParams) -> Result<Vec<f64>> {
    expert.forward(x)
}

/// Affine gating row: score `⟨w, x⟩ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateEntry {
    pub w: Vec<f64>,
    pub b: f64,
}

impl GateEntry {
    pub fn new(w: Vec<f64>, b: f64) -> Self {
        Self { w, b }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        dot(&self.w, x) + self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    Dense,
    Sparse { k: usize },
    /// `shared` always-active experts followed by routed experts of which the
    /// `top_k` best are used.
    Shared { shared: usize, top_k: usize },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::Sparse { .. } => "sparse",
            Variant::Shared { .. } => "shared",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Dense => write!(f, "dense"),
            Variant::Sparse { k } => write!(f, "sparse(k={k})"),
            Variant::Shared { shared, top_k } => write!(f, "shared(n_s={shared}, k_r={top_k})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoEConfig {
    pub variant: Variant,
    /// Total expert count (shared + routed for the shared variant).
    pub experts: usize,
    pub dim: usize,
    pub hidden: usize,
}

impl MoEConfig {
    pub fn dense(experts: usize, dim: usize, hidden: usize) -> Self {
        Self {
            variant: Variant::Dense,
            experts,
            dim,
            hidden,
        }
    }

    pub fn sparse(experts: usize, k: usize, dim: usize, hidden: usize) -> Self {
        Self {
            variant: Variant::Sparse { k },
            experts,
            dim,
            hidden,
        }
    }

    pub fn shared(shared: usize, routed: usize, top_k: usize, dim: usize, hidden: usize) -> Self {
        Self {
            variant: Variant::Shared { shared, top_k },
            experts: shared + routed,
            dim,
            hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 || self.dim == 0 || self.hidden == 0 {
            return Err(Error::Config(format!(
                "experts, dim and hidden must be positive (got n={}, d={}, h={})",
                self.experts, self.dim, self.hidden
            )));
        }
        match self.variant {
            Variant::Dense => {}
            Variant::Sparse { k } => {
                if k == 0 || k > self.experts {
                    return Err(Error::Config(format!(
                        "sparse top-k needs 1 <= k <= n, got k={k}, n={}",
                        self.experts
                    )));
                }
            }
            Variant::Shared { shared, top_k } => {
                if shared == 0 || shared >= self.experts {
                    return Err(Error::Config(format!(
                        "shared variant needs n_s >= 1 and n_r >= 1, got n_s={shared}, n={}",
                        self.experts
                    )));
                }
                let routed = self.experts - shared;
                if top_k == 0 || top_k > routed {
                    return Err(Error::Config(format!(
                        "shared variant needs 1 <= k_r <= n_r, got k_r={top_k}, n_r={routed}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Index of the first gated expert.
    pub fn routed_offset(&self) -> usize {
        match self.variant {
            Variant::Shared { shared, .. } => shared,
            _ => 0,
        }
    }

    /// Number of gated experts (`n`, or `n_r` for the shared variant).
    pub fn gate_count(&self) -> usize {
        self.experts - self.routed_offset()
    }
}

/// Full parameter vector `(W_i, b_i, θ_i)` plus the gating configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MoEParams {
    pub(crate) config: MoEConfig,
    pub(crate) gates: Vec<GateEntry>,
    pub(crate) experts: Vec<ExpertParams>,
}

impl MoEParams {
    pub fn new(config: MoEConfig, gates: Vec<GateEntry>, experts: Vec<ExpertParams>) -> Result<Self> {
        let params = Self {
            config,
            gates,
            experts,
        };
        params.validate()?;
        Ok(params)
    }

    /// Random parameters; gate rows `N(0, scale²/d)`, experts per
    /// [`ExpertParams::random`]. Gates are drawn first, then experts in order.
    pub fn random(config: MoEConfig, rng: &mut RngStream, scale: f64) -> Result<Self> {
        config.validate()?;
        let std = scale / (config.dim as f64).sqrt();
        let gates = (0..config.gate_count())
            .map(|_| {
                let w = rng.normals(config.dim, std);
                GateEntry::new(w, std * rng.next_normal())
            })
            .collect();
        let experts = (0..config.experts)
            .map(|_| ExpertParams::random(config.dim, config.hidden, rng, scale))
            .collect();
        Self::new(config, gates, experts)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.gates.len() != c.gate_count() {
            return Err(Error::Shape(format!(
                "{} variant with {} experts needs {} gates, got {}",
                c.variant.name(),
                c.experts,
                c.gate_count(),
                self.gates.len()
            )));
        }
        if self.experts.len() != c.experts {
            return Err(Error::Shape(format!(
                "config says {} experts, got {}",
                c.experts,
                self.experts.len()
            )));
        }
        if let Some(i) = self.gates.iter().position(|g| g.w.len() != c.dim) {
            return Err(Error::Shape(format!(
                "gate {i} has dimension {}, expected {}",
                self.gates[i].w.len(),
                c.dim
            )));
        }
        for (i, e) in self.experts.iter().enumerate() {
            e.validate()?;
            if e.dim() != c.dim || e.hidden() != c.hidden {
                return Err(Error::Shape(format!(
                    "expert {i} has (d, h) = ({}, {}), expected ({}, {})",
                    e.dim(),
                    e.hidden(),
                    c.dim,
                    c.hidden
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &MoEConfig {
        &self.config
    }

    pub fn gates(&self) -> &[GateEntry] {
        &self.gates
    }

    pub fn experts(&self) -> &[ExpertParams] {
        &self.experts
    }

    pub fn routed_experts(&self) -> &[ExpertParams] {
        &self.experts[self.config.routed_offset()..]
    }

    pub fn is_finite(&self) -> bool {
        self.gates
            .iter()
            .all(|g| g.b.is_finite() && g.w.iter().all(|w| w.is_finite()))
            && self.experts.iter().all(ExpertParams::is_finite)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.config.variant {
            Variant::Dense => dense_forward(x, self),
            Variant::Sparse { .. } => sparse_forward(x, self),
            Variant::Shared { .. } => shared_forward(x, self),
        }
    }

    pub fn flat_len(&self) -> usize {
        self.gates.len() * (self.config.dim + 1)
            + self.experts.iter().map(ExpertParams::flat_len).sum::<usize>()
    }

    /// All parameters in a fixed order: each gate `(w, b)`, then each expert
    /// `(A, u, B, v)`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for g in &self.gates {
            out.extend_from_slice(&g.w);
            out.push(g.b);
        }
        for e in &self.experts {
            out.extend_from_slice(e.a.data());
            out.extend_from_slice(&e.u);
            out.extend_from_slice(e.b.data());
            out.extend_from_slice(&e.v);
        }
        out
    }

    /// Same configuration, parameters read from `flat` in [`Self::to_flat`] order.
    pub fn with_flat(&self, flat: &[f64]) -> Result<MoEParams> {
        if flat.len() != self.flat_len() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let mut out = self.clone();
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        };
        for g in &mut out.gates {
            take(&mut g.w);
            take(std::slice::from_mut(&mut g.b));
        }
        for e in &mut out.experts {
            take(e.a.data_mut());
            take(&mut e.u);
            take(e.b.data_mut());
            take(&mut e.v);
        }
        Ok(out)
    }

    /// `self += alpha · other`, entry by entry.
    pub fn axpy(&mut self, alpha: f64, other: &MoEParams) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Config("axpy between different configurations".into()));
        }
        let add = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        };
        for (g, o) in self.gates.iter_mut().zip(&other.gates) {
            add(&mut g.w, &o.w);
            g.b += alpha * o.b;
        }
        for (e, o) in self.experts.iter_mut().zip(&other.experts) {
            add(e.a.data_mut(), o.a.data());
            add(&mut e.u, &o.u);
            add(e.b.data_mut(), o.b.data());
            add(&mut e.v, &o.v);
        }
        Ok(())
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> MoEParams {
        let c = self.config;
        MoEParams {
            config: c,
            gates: vec![GateEntry::new(vec![0.0; c.dim], 0.0); self.gates.len()],
            experts: vec![ExpertParams::zeros(c.dim, c.hidden); self.experts.len()],
        }
    }
}

pub fn gate_scores(x: &[f64], gates: &[GateEntry]) -> Result<Vec<f64>> {
    gates
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if g.w.len() != x.len() {
                Err(Error::Shape(format!(
                    "gate {i} has dimension {}, input has {}",
                    g.w.len(),
                    x.len()
                )))
            } else {
                Ok(g.score(x))
            }
        })
        .collect()
}

/// Indices of the `k` largest entries, ascending. Ties prefer the smaller index.
pub fn top_k_indices(z: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > z.len() {
        return Err(Error::TopK { k, len: z.len() });
    }
    let mut order: Vec<usize> = (0..z.len()).collect();
    // stable sort keeps smaller indices first among equal scores
    order.sort_by(|&i, &j| z[j].total_cmp(&z[i]));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

fn check_input(x: &[f64], params: &MoEParams) -> Result<()> {
    if x.len() != params.config.dim {
        return Err(Error::Shape(format!(
            "input has dimension {}, model expects {}",
            x.len(),
            params.config.dim
        )));
    }
    Ok(())
}

fn variant_mismatch(expected: &'static str, params: &MoEParams) -> Error {
    Error::VariantMismatch {
        expected,
        found: params.config.variant.to_string(),
    }
}

fn weighted_sum(
    x: &[f64],
    experts: &[ExpertParams],
    weighted: impl IntoIterator<Item = (usize, f64)>,
    out: &mut [f64],
) -> Result<()> {
    for (i, weight) in weighted {
        let e = experts[i].forward(x)?;
        for (o, v) in out.iter_mut().zip(&e) {
            *o += weight * v;
        }
    }
    Ok(())
}

/// `Σ_i softmax_i(s(x)) · E(x; θ_i)`.
pub fn dense_forward(x: &[f64], params: &MoEParams) -> Result<Vec<f64>> {
    if params.config.variant != Variant::Dense {
        return Err(variant_mismatch("dense", params));
    }
    check_input(x, params)?;
    let probs = stable_softmax(&gate_scores(x, &params.gates)?)?;
    let mut out = vec![0.0; params.config.dim];
    weighted_sum(x, &params.experts, probs.into_iter().enumerate(), &mut out)?;
    Ok(out)
}

/// Top-k experts by score, softmax over the selected scores only.
pub fn sparse_forward(x: &[f64], params: &MoEParams) -> Result<Vec<f64>> {
    let Variant::Sparse { k } = params.config.variant else {
        return Err(variant_mismatch("sparse", params));
    };
    check_input(x, params)?;
    let scores = gate_scores(x, &params.gates)?;
    let selected = top_k_indices(&scores, k)?;
    let restricted: Vec<f64> = selected.iter().map(|&i| scores[i]).collect();
    let probs = stable_softmax(&restricted)?;
    let mut out = vec![0.0; params.config.dim];
    weighted_sum(
        x,
        &params.experts,
        selected.into_iter().zip(probs),
        &mut out,
    )?;
    Ok(out)
}

/// Routing weights of the shared variant: softmax over all routed scores,
/// masked to the top `k_r` without renormalisation. Indexed by routed expert.
pub fn shared_routing_weights(scores: &[f64], top_k: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let probs = stable_softmax(scores)?;
    let selected = top_k_indices(&probs, top_k)?;
    let mut weights = vec![0.0; probs.len()];
    for &i in &selected {
        weights[i] = probs[i];
    }
    Ok((weights, selected))
}

/// Sum of the shared experts plus masked-softmax weighted routed experts.
pub fn shared_forward(x: &[f64], params: &MoEParams) -> Result<Vec<f64>> {
    let Variant::Shared { shared, top_k } = params.config.variant else {
        return Err(variant_mismatch("shared", params));
    };
    check_input(x, params)?;
    let mut out = vec![0.0; params.config.dim];
    weighted_sum(x, &params.experts, (0..shared).map(|i| (i, 1.0)), &mut out)?;
    let scores = gate_scores(x, &params.gates)?;
    let (weights, selected) = shared_routing_weights(&scores, top_k)?;
    weighted_sum(
        x,
        &params.experts,
        selected.into_iter().map(|i| (shared + i, weights[i])),
        &mut out,
    )?;
    Ok(out)
}

/// Smallest pairwise gap between gating scores at `x` (infinite for one gate).
pub fn score_margin(x: &[f64], gates: &[GateEntry]) -> Result<f64> {
    let scores = gate_scores(x, gates)?;
    let mut margin = f64::INFINITY;
    for i in 0..scores.len() {
        for j in i + 1..scores.len() {
            margin = margin.min((scores[i] - scores[j]).abs());
        }
    }
    Ok(margin)
}

/// True iff every pair of gating scores at `x` differs by more than `epsilon`.
pub fn in_omega(x: &[f64], gates: &[GateEntry], epsilon: f64) -> bool {
    match score_margin(x, gates) {
        Ok(m) => m > epsilon,
        Err(_) => false,
    }
}
