//! Linear interpolation curves between two models and the barrier / AUC /
//! rank metrics computed from them.
//!
//! Convention: `t = 1` is model A and `t = 0` is model B, so the curve's last
//! point is A's loss and its first point is B's.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{match_hidden_units, AlignmentResult, MatchMethod};
use crate::model::MoEParams;
use crate::numerics::{check_unit_grid, trapezoid_integral};
use crate::parallel;
use crate::symmetry::Permutation;

pub const DEFAULT_GRID_POINTS: usize = 25;

/// Largest expert count for exhaustive permutation ranking.
pub const MAX_BRUTE_FORCE_EXPERTS: usize = 8;

/// Loss (and optionally accuracy) of one parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

impl Evaluation {
    pub fn loss(loss: f64) -> Self {
        Self {
            loss,
            accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationCurve {
    pub ts: Vec<f64>,
    pub losses: Vec<f64>,
    pub accuracies: Option<Vec<f64>>,
}

impl InterpolationCurve {
    pub fn new(ts: Vec<f64>, losses: Vec<f64>, accuracies: Option<Vec<f64>>) -> Result<Self> {
        check_unit_grid(&ts)?;
        if losses.len() != ts.len() || accuracies.as_ref().is_some_and(|a| a.len() != ts.len()) {
            return Err(Error::Shape(format!(
                "curve with {} grid points has {} losses and {:?} accuracies",
                ts.len(),
                losses.len(),
                accuracies.as_ref().map(Vec::len)
            )));
        }
        Ok(Self {
            ts,
            losses,
            accuracies,
        })
    }

    /// `(loss_A, loss_B)`: the values at `t = 1` and `t = 0`.
    pub fn endpoints(&self) -> (f64, f64) {
        (self.losses[self.losses.len() - 1], self.losses[0])
    }

    /// Straight line between the endpoint losses, `t·loss_A + (1−t)·loss_B`.
    pub fn chord(&self) -> Vec<f64> {
        chord(&self.ts, &self.losses)
    }

    pub fn accuracy_chord(&self) -> Option<Vec<f64>> {
        self.accuracies.as_ref().map(|acc| chord(&self.ts, acc))
    }
}

fn chord(ts: &[f64], values: &[f64]) -> Vec<f64> {
    let (at_a, at_b) = (values[values.len() - 1], values[0]);
    ts.iter().map(|&t| lerp(at_a, at_b, t)).collect()
}

/// `t·a + (1−t)·b`, written as `b + t·(a − b)` so that equal endpoints give
/// that value exactly; `t = 1` returns `a` exactly.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 1.0 {
        a
    } else {
        b + t * (a - b)
    }
}

/// `t·A + (1−t)·B` for every parameter; `t = 1` and `t = 0` return exact copies.
pub fn interpolate_params(a: &MoEParams, b: &MoEParams, t: f64) -> Result<MoEParams> {
    if a.config != b.config {
        return Err(Error::Config(format!(
            "cannot interpolate {:?} with {:?}",
            a.config, b.config
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Grid(format!("interpolation weight {t} outside [0, 1]")));
    }
    if t == 1.0 {
        return Ok(a.clone());
    }
    if t == 0.0 {
        return Ok(b.clone());
    }
    let mixed: Vec<f64> = a
        .to_flat()
        .iter()
        .zip(b.to_flat())
        .map(|(x, y)| lerp(*x, y, t))
        .collect();
    a.with_flat(&mixed)
}

/// Evaluates `loss_fn` at every grid point of the segment from B (t=0) to A (t=1).
pub fn eval_curve<F>(a: &MoEParams, b: &MoEParams, loss_fn: F, grid: &[f64]) -> Result<InterpolationCurve>
where
    F: Fn(&MoEParams) -> Result<Evaluation> + Sync + Send,
{
    check_unit_grid(grid)?;
    let evals = parallel::map(grid, |&t| loss_fn(&interpolate_params(a, b, t)?));
    let evals = evals.into_iter().collect::<Result<Vec<_>>>()?;
    let losses = evals.iter().map(|e| e.loss).collect();
    let accuracies = evals
        .iter()
        .map(|e| e.accuracy)
        .collect::<Option<Vec<f64>>>();
    InterpolationCurve::new(grid.to_vec(), losses, accuracies)
}

/// Max over the grid of `loss(t) − chord(t)`; zero at the endpoints, so never negative.
pub fn loss_barrier(curve: &InterpolationCurve) -> f64 {
    curve
        .losses
        .iter()
        .zip(curve.chord())
        .map(|(l, c)| l - c)
        .fold(0.0, f64::max)
}

/// Signed trapezoid integral of `loss(t) − chord(t)`.
pub fn metric_auc(curve: &InterpolationCurve) -> Result<f64> {
    let gap: Vec<f64> = curve.losses.iter().zip(curve.chord()).map(|(l, c)| l - c).collect();
    trapezoid_integral(&curve.ts, &gap)
}

/// Max over the grid of `chord(t) − accuracy(t)`: accuracy dips count positive.
pub fn accuracy_barrier(curve: &InterpolationCurve) -> Result<f64> {
    let acc = curve.accuracies.as_ref().ok_or(Error::MissingAccuracy)?;
    Ok(chord(&curve.ts, acc)
        .iter()
        .zip(acc)
        .map(|(c, a)| c - a)
        .fold(0.0, f64::max))
}

/// Signed trapezoid integral of `chord(t) − accuracy(t)`.
pub fn accuracy_auc(curve: &InterpolationCurve) -> Result<f64> {
    let acc = curve.accuracies.as_ref().ok_or(Error::MissingAccuracy)?;
    let gap: Vec<f64> = chord(&curve.ts, acc).iter().zip(acc).map(|(c, a)| c - a).collect();
    trapezoid_integral(&curve.ts, &gap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierReport {
    pub curve: InterpolationCurve,
    pub loss_barrier: f64,
    pub loss_auc: f64,
    pub acc_barrier: Option<f64>,
    pub acc_auc: Option<f64>,
    /// `(loss_A, loss_B)`.
    pub endpoints: (f64, f64),
}

impl BarrierReport {
    pub fn from_curve(curve: InterpolationCurve) -> Result<Self> {
        let has_acc = curve.accuracies.is_some();
        Ok(Self {
            loss_barrier: loss_barrier(&curve),
            loss_auc: metric_auc(&curve)?,
            acc_barrier: if has_acc { Some(accuracy_barrier(&curve)?) } else { None },
            acc_auc: if has_acc { Some(accuracy_auc(&curve)?) } else { None },
            endpoints: curve.endpoints(),
            curve,
        })
    }
}

/// Aligned-over-naive ratios ×100. `None` where the naive metric is ≤ 1e-12.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub loss_barrier: Option<f64>,
    pub loss_auc: Option<f64>,
    pub acc_barrier: Option<f64>,
    pub acc_auc: Option<f64>,
}

fn ratio(aligned: Option<f64>, naive: Option<f64>) -> Option<f64> {
    match (aligned, naive) {
        (Some(a), Some(n)) if n > 1e-12 => Some(a / n * 100.0),
        _ => None,
    }
}

pub fn ratio_report(aligned: &BarrierReport, naive: &BarrierReport) -> Result<RatioReport> {
    if aligned.curve.ts != naive.curve.ts {
        return Err(Error::Grid("ratio of reports on different grids".into()));
    }
    Ok(RatioReport {
        loss_barrier: ratio(Some(aligned.loss_barrier), Some(naive.loss_barrier)),
        loss_auc: ratio(Some(aligned.loss_auc), Some(naive.loss_auc)),
        acc_barrier: ratio(aligned.acc_barrier, naive.acc_barrier),
        acc_auc: ratio(aligned.acc_auc, naive.acc_auc),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    /// Every expert ordering in lexicographic order.
    pub permutations: Vec<Permutation>,
    /// Loss barrier after hidden-unit matching, one per entry of `permutations`.
    pub barriers: Vec<f64>,
    pub chosen_tau: Permutation,
    pub chosen_barrier: f64,
    /// 1 + number of orderings with a strictly smaller barrier.
    pub rank: usize,
    pub l_hat: Option<f64>,
    /// Barrier of direct interpolation (no reordering, no hidden matching).
    pub l_naive: f64,
    pub l_top1: f64,
    pub top1_tau: Permutation,
    pub method: Option<MatchMethod>,
}

/// `(L_method − L_top1) / (L_naive − L_top1) × 100`. A method within 1e-12
/// of the best ordering scores 0 even when naive interpolation is also
/// optimal; otherwise `None` when the denominator is ≤ 1e-12.
pub fn normalized_barrier(l_method: f64, l_top1: f64, l_naive: f64) -> Option<f64> {
    if l_method - l_top1 <= 1e-12 {
        return Some(0.0);
    }
    let denom = l_naive - l_top1;
    (denom > 1e-12).then(|| (l_method - l_top1) / denom * 100.0)
}

/// Ranks `chosen` among all orderings of B's gated experts. Each ordering is
/// followed by hidden-unit matching before its barrier is measured.
pub fn brute_force_best_permutation<F>(
    a: &MoEParams,
    b: &MoEParams,
    loss_fn: F,
    grid: &[f64],
    chosen: &Permutation,
) -> Result<RankReport>
where
    F: Fn(&MoEParams) -> Result<Evaluation> + Sync + Send,
{
    let n = a.config.gate_count();
    if n > MAX_BRUTE_FORCE_EXPERTS {
        return Err(Error::TooManyPermutations {
            n,
            max: MAX_BRUTE_FORCE_EXPERTS,
        });
    }
    if chosen.len() != n {
        return Err(Error::Shape(format!(
            "chosen ordering has length {}, model has {n} gated experts",
            chosen.len()
        )));
    }
    let naive = loss_barrier(&eval_curve(a, b, &loss_fn, grid)?);
    let permutations = Permutation::all(n);
    let barriers = parallel::map(&permutations, |tau| -> Result<f64> {
        let hidden = match_hidden_units(a, b, tau)?;
        let aligned = AlignmentResult {
            tau: tau.clone(),
            hidden,
            method: MatchMethod::GateWeights,
        }
        .apply(b)?;
        Ok(loss_barrier(&eval_curve(a, &aligned, &loss_fn, grid)?))
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;

    let chosen_idx = permutations
        .iter()
        .position(|p| p == chosen)
        .expect("every permutation is enumerated");
    let chosen_barrier = barriers[chosen_idx];
    let (top_idx, l_top1) = barriers
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, v)| if v < best.1 { (i, v) } else { best });
    let rank = 1 + barriers.iter().filter(|&&v| v < chosen_barrier).count();
    Ok(RankReport {
        top1_tau: permutations[top_idx].clone(),
        chosen_tau: chosen.clone(),
        chosen_barrier,
        rank,
        l_hat: normalized_barrier(chosen_barrier, l_top1, naive),
        l_naive: naive,
        l_top1,
        permutations,
        barriers,
        method: None,
    })
}
