//! Two-stage weight matching for MoE models.
//!
//! Step 1 orders the experts of model B against model A by solving an
//! assignment problem over either centered gate parameters or
//! hidden-permutation-invariant Gram fingerprints of the experts. Step 2 then
//! matches hidden units inside each matched expert pair.
//!
//! Gate translations are never undone: they do not change the interpolated
//! loss, so only permutations are recovered.

mod lap;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use lap::{solve_lap, Assignment};

use crate::error::{Error, Result};
use crate::model::{ExpertParams, GateEntry, MoEParams};
use crate::numerics::{dot, Matrix};
use crate::parallel;
use crate::symmetry::{apply_group, apply_hidden_perms, GroupElement, HiddenPerms, Permutation};

/// Square matrix of nonnegative finite assignment costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Matrix);

impl CostMatrix {
    pub fn new(matrix: Matrix) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::Shape(format!(
                "cost matrix must be square, got {:?}",
                matrix.shape()
            )));
        }
        for r in 0..matrix.rows() {
            if let Some(c) = matrix.row(r).iter().position(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::NonFiniteCost { row: r, col: c });
            }
        }
        Ok(Self(matrix))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn solve(&self) -> Result<Assignment> {
        solve_lap(&self.0)
    }
}

impl std::ops::Deref for CostMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

/// How experts are ordered in step 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatchMethod {
    #[serde(rename = "gate")]
    GateWeights,
    #[serde(rename = "gram")]
    ExpertGram,
}

impl MatchMethod {
    pub const ALL: [MatchMethod; 2] = [MatchMethod::GateWeights, MatchMethod::ExpertGram];
}

impl fmt::Display for MatchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchMethod::GateWeights => "gate",
            MatchMethod::ExpertGram => "gram",
        })
    }
}

impl FromStr for MatchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate" => Ok(MatchMethod::GateWeights),
            "gram" | "expert" => Ok(MatchMethod::ExpertGram),
            other => Err(Error::Config(format!("unknown matching method `{other}`"))),
        }
    }
}

/// Subtracts the mean gate row and mean bias.
pub fn center_gates(gates: &[GateEntry]) -> Vec<GateEntry> {
    if gates.is_empty() {
        return Vec::new();
    }
    let n = gates.len() as f64;
    let d = gates[0].w.len();
    let mean_w: Vec<f64> = (0..d)
        .map(|c| gates.iter().map(|g| g.w[c]).sum::<f64>() / n)
        .collect();
    let mean_b = gates.iter().map(|g| g.b).sum::<f64>() / n;
    gates
        .iter()
        .map(|g| {
            GateEntry::new(
                g.w.iter().zip(&mean_w).map(|(w, m)| w - m).collect(),
                g.b - mean_b,
            )
        })
        .collect()
}

/// `C_ij = sqrt(‖Ŵ_i − Ŵ'_j‖² + (b̂_i − b̂'_j)²)` over centered gates.
pub fn gate_cost_matrix(gates_a: &[GateEntry], gates_b: &[GateEntry]) -> Result<CostMatrix> {
    let n = gates_a.len();
    if gates_b.len() != n {
        return Err(Error::Shape(format!("{n} gates against {}", gates_b.len())));
    }
    let dims_ok = gates_a
        .iter()
        .chain(gates_b)
        .all(|g| g.w.len() == gates_a.first().map_or(0, |f| f.w.len()));
    if !dims_ok {
        return Err(Error::Shape("gate dimensions differ".into()));
    }
    let ca = center_gates(gates_a);
    let cb = center_gates(gates_b);
    CostMatrix::new(Matrix::from_fn(n, n, |i, j| {
        let w: f64 = ca[i]
            .w
            .iter()
            .zip(&cb[j].w)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let b = ca[i].b - cb[j].b;
        (w + b * b).sqrt()
    }))
}

/// Hidden-permutation-invariant fingerprint of an expert: `(ÃᵀÃ, B̃B̃ᵀ)`.
#[derive(Debug, Clone)]
pub struct GramPair {
    pub input: Matrix,
    pub output: Matrix,
}

impl GramPair {
    pub fn of(expert: &ExpertParams) -> Self {
        let a = expert.augmented_in();
        let b = expert.augmented_out();
        let input = a.transpose().matmul(&a).expect("ÃᵀÃ shapes agree");
        let output = b.matmul(&b.transpose()).expect("B̃B̃ᵀ shapes agree");
        Self { input, output }
    }

    pub fn distance(&self, other: &GramPair) -> Result<f64> {
        let sq = self.input.frobenius_dist_sq(&other.input)?
            + self.output.frobenius_dist_sq(&other.output)?;
        Ok(sq.sqrt())
    }
}

/// `C_ij = sqrt(‖ÃᵢᵀÃᵢ − Ã'ⱼᵀÃ'ⱼ‖²_F + ‖B̃ᵢB̃ᵢᵀ − B̃'ⱼB̃'ⱼᵀ‖²_F)`.
pub fn gram_cost_matrix(experts_a: &[ExpertParams], experts_b: &[ExpertParams]) -> Result<CostMatrix> {
    let n = experts_a.len();
    if experts_b.len() != n {
        return Err(Error::Shape(format!("{n} experts against {}", experts_b.len())));
    }
    if let Some(first) = experts_a.first() {
        let shape = (first.dim(), first.hidden());
        if experts_a.iter().chain(experts_b).any(|e| (e.dim(), e.hidden()) != shape) {
            return Err(Error::Shape("experts do not share (d, h)".into()));
        }
    }
    let ga: Vec<GramPair> = experts_a.iter().map(GramPair::of).collect();
    let gb: Vec<GramPair> = experts_b.iter().map(GramPair::of).collect();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, ga[i].distance(&gb[j])?);
        }
    }
    CostMatrix::new(m)
}

/// `S[p][q] = ⟨Ã_A[p], Ã_B[q]⟩ + ⟨B_A[:, p], B_B[:, q]⟩`.
pub fn neuron_similarity(a: &ExpertParams, b: &ExpertParams) -> Result<Matrix> {
    if (a.dim(), a.hidden()) != (b.dim(), b.hidden()) {
        return Err(Error::Shape(format!(
            "experts with (d, h) = ({}, {}) and ({}, {})",
            a.dim(),
            a.hidden(),
            b.dim(),
            b.hidden()
        )));
    }
    let (aa, ab) = (a.augmented_in(), b.augmented_in());
    let (ba, bb) = (a.b.transpose(), b.b.transpose());
    let h = a.hidden();
    Ok(Matrix::from_fn(h, h, |p, q| {
        dot(aa.row(p), ab.row(q)) + dot(ba.row(p), bb.row(q))
    }))
}

/// Weight matching of hidden units: returns `P` such that
/// [`permute_expert`](crate::symmetry::permute_expert)`(b, P)` is aligned to `a`.
pub fn expert_neuron_match(a: &ExpertParams, b: &ExpertParams) -> Result<Permutation> {
    let sim = neuron_similarity(a, b)?;
    let top = sim.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let h = sim.rows();
    let cost = CostMatrix::new(Matrix::from_fn(h, h, |p, q| top - sim.get(p, q)))?;
    Ok(cost.solve()?.perm)
}

/// Expert order and per-expert hidden permutations aligning model B to A.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// Over gated experts: aligned slot `i` takes B's gated expert `tau(i)`.
    pub tau: Permutation,
    /// One per expert, applied after reordering.
    pub hidden: HiddenPerms,
    pub method: MatchMethod,
}

impl AlignmentResult {
    /// B with gates and experts reordered by `tau` and hidden units permuted.
    pub fn apply(&self, params_b: &MoEParams) -> Result<MoEParams> {
        let reordered = apply_group(
            params_b,
            &GroupElement::permutation(self.tau.clone(), params_b.config.dim),
        )?;
        apply_hidden_perms(&reordered, &self.hidden)
    }
}

fn check_same_config(a: &MoEParams, b: &MoEParams) -> Result<()> {
    if a.config != b.config {
        return Err(Error::Config(format!(
            "cannot align {:?} with {:?}",
            a.config, b.config
        )));
    }
    Ok(())
}

/// Step 1 only: the expert ordering chosen by `method`.
pub fn match_expert_order(a: &MoEParams, b: &MoEParams, method: MatchMethod) -> Result<Permutation> {
    check_same_config(a, b)?;
    let cost = match method {
        MatchMethod::GateWeights => gate_cost_matrix(&a.gates, &b.gates)?,
        MatchMethod::ExpertGram => gram_cost_matrix(a.routed_experts(), b.routed_experts())?,
    };
    Ok(cost.solve()?.perm)
}

/// Step 2 for a fixed expert ordering. Shared experts are paired by index.
pub fn match_hidden_units(a: &MoEParams, b: &MoEParams, tau: &Permutation) -> Result<HiddenPerms> {
    check_same_config(a, b)?;
    let offset = a.config.routed_offset();
    if tau.len() != a.config.gate_count() {
        return Err(Error::Shape(format!(
            "expert ordering has length {}, model has {} gated experts",
            tau.len(),
            a.config.gate_count()
        )));
    }
    let pairs: Vec<(usize, usize)> = (0..a.experts.len())
        .map(|i| {
            if i < offset {
                (i, i)
            } else {
                (i, offset + tau.apply(i - offset))
            }
        })
        .collect();
    let perms = parallel::map(&pairs, |&(i, j)| expert_neuron_match(&a.experts[i], &b.experts[j]));
    Ok(HiddenPerms {
        perms: perms.into_iter().collect::<Result<_>>()?,
    })
}

/// Full two-stage alignment of `b` onto `a`.
pub fn align_moe(a: &MoEParams, b: &MoEParams, method: MatchMethod) -> Result<AlignmentResult> {
    let tau = match_expert_order(a, b, method)?;
    let hidden = match_hidden_units(a, b, &tau)?;
    Ok(AlignmentResult { tau, hidden, method })
}
