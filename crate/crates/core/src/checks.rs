//! Randomised self-checks of the symmetry and matching machinery, used by the
//! command-line `oracle` and `invariance-check` commands.

use serde::Serialize;

use crate::error::Result;
use crate::harness::{encoded_loss, Encoded, FrozenBackbone};
use crate::matching::{gram_cost_matrix, solve_lap, Assignment};
use crate::metrics::{eval_curve, loss_barrier, Evaluation};
use crate::model::{in_omega, MoEConfig, MoEParams};
use crate::numerics::{uniform_grid, Matrix, RngStream};
use crate::symmetry::{apply_group, permute_expert, random_group_element, GroupElement, Permutation};

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub trials: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: &str, trials: usize, max_deviation: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            trials,
            max_deviation,
            tolerance,
            passed: max_deviation <= tolerance,
        }
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {} trials, max deviation {:.3e} (tolerance {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.trials,
            self.max_deviation,
            self.tolerance
        )
    }
}

/// `‖y − y'‖∞ / max(1, ‖y‖∞)`.
pub fn relative_deviation(y: &[f64], y2: &[f64]) -> f64 {
    let scale = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let diff = y.iter().zip(y2).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / scale
}

/// Exhaustive LAP: lexicographically first permutation with the minimum
/// row-order cost. Only sensible for small `n`.
pub fn brute_force_lap(cost: &Matrix) -> Assignment {
    let n = cost.rows();
    let mut best: Option<Assignment> = None;
    for p in Permutation::all(n) {
        let total: f64 = (0..n).map(|i| cost.get(i, p.apply(i))).sum();
        if best.as_ref().is_none_or(|b| total < b.cost) {
            best = Some(Assignment { perm: p, cost: total });
        }
    }
    best.expect("at least one permutation")
}

/// Random sizes `n ∈ 2..=6`, `d, h ∈ 2..=8`, with one draw per trial.
fn random_shape(rng: &mut RngStream) -> (usize, usize, usize) {
    (2 + rng.below(5), 2 + rng.below(7), 2 + rng.below(7))
}

/// Dense model output under a random group element (translation scale 1).
pub fn dense_group_invariance(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = RngStream::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (n, d, h) = random_shape(&mut rng);
        let params = MoEParams::random(MoEConfig::dense(n, d, h), &mut rng, 1.0)?;
        let g = random_group_element(n, d, &mut rng, 1.0);
        let x = rng.normals(d, 1.0);
        let moved = apply_group(&params, &g)?;
        worst = worst.max(relative_deviation(&params.forward(&x)?, &moved.forward(&x)?));
    }
    Ok(CheckOutcome::new("dense output under G(n)", trials, worst, 1e-9))
}

/// Sparse (k = 2) output under a random group element, at inputs whose
/// score margin exceeds `epsilon`. Also counts disagreements of the margin
/// test between `gates` and `g·gates` over `omega_points` inputs.
pub fn sparse_group_invariance(
    trials: usize,
    omega_points: usize,
    epsilon: f64,
    seed: u64,
) -> Result<(CheckOutcome, CheckOutcome)> {
    let mut rng = RngStream::new(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < trials {
        let (n, d, h) = random_shape(&mut rng);
        let params = MoEParams::random(MoEConfig::sparse(n, 2, d, h), &mut rng, 1.0)?;
        let g = random_group_element(n, d, &mut rng, 1.0);
        let moved = apply_group(&params, &g)?;
        let x = rng.normals(d, 1.0);
        if !in_omega(&x, params.gates(), epsilon) {
            continue;
        }
        worst = worst.max(relative_deviation(&params.forward(&x)?, &moved.forward(&x)?));
        done += 1;
    }
    let sparse = CheckOutcome::new("sparse output under G(n) on the margin set", trials, worst, 1e-9);

    let params = MoEParams::random(MoEConfig::sparse(5, 2, 4, 3), &mut rng, 1.0)?;
    let g = random_group_element(5, 4, &mut rng, 1.0);
    let moved = apply_group(&params, &g)?;
    let mut disagreements = 0usize;
    for _ in 0..omega_points {
        // small inputs put a fair share of points near the margin boundary
        let x = rng.normals(4, 0.05);
        if in_omega(&x, params.gates(), epsilon) != in_omega(&x, moved.gates(), epsilon) {
            disagreements += 1;
        }
    }
    let omega = CheckOutcome::new(
        "margin-set membership under G(n)",
        omega_points,
        disagreements as f64,
        0.0,
    );
    Ok((sparse, omega))
}

/// Gram cost matrices before and after random hidden permutations of B's experts.
pub fn gram_cost_invariance(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = RngStream::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (n, d, h) = random_shape(&mut rng);
        let a = MoEParams::random(MoEConfig::dense(n, d, h), &mut rng, 1.0)?;
        let b = MoEParams::random(MoEConfig::dense(n, d, h), &mut rng, 1.0)?;
        let permuted = b
            .experts()
            .iter()
            .map(|e| permute_expert(e, &Permutation::random(h, &mut rng)))
            .collect::<Result<Vec<_>>>()?;
        let before = gram_cost_matrix(a.experts(), b.experts())?;
        let after = gram_cost_matrix(a.experts(), &permuted)?;
        for (x, y) in before.data().iter().zip(after.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(CheckOutcome::new("Gram cost under hidden permutations", trials, worst, 1e-12))
}

/// Loss barrier of random dense pairs before and after a pure translation of
/// B, on random data through a random frozen backbone.
pub fn barrier_translation_invariance(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = RngStream::new(seed);
    let grid = uniform_grid(25)?;
    let (n, d, h, classes, input) = (4, 6, 8, 3, 5);
    let backbone = FrozenBackbone::generate(rng.next_u64(), input, d, classes)?;
    let z = Matrix::random_normal(64, d, &mut rng, 1.0);
    let data = Encoded {
        z,
        labels: (0..64).map(|i| i % classes).collect(),
    };
    let loss = |p: &MoEParams| encoded_loss(p, &backbone, &data).map(|s| Evaluation::loss(s.loss));
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let a = MoEParams::random(MoEConfig::dense(n, d, h), &mut rng, 1.0)?;
        let b = MoEParams::random(MoEConfig::dense(n, d, h), &mut rng, 1.0)?;
        let shift = GroupElement::translation(rng.normals(d, 1.0), rng.next_normal(), n);
        let moved = apply_group(&b, &shift)?;
        let before = loss_barrier(&eval_curve(&a, &b, loss, &grid)?);
        let after = loss_barrier(&eval_curve(&a, &moved, loss, &grid)?);
        worst = worst.max((before - after).abs());
    }
    Ok(CheckOutcome::new("loss barrier under translations", trials, worst, 1e-9))
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleOutcome {
    pub trials: usize,
    pub cost_mismatches: usize,
    pub assignment_mismatches: usize,
}

impl OracleOutcome {
    pub fn passed(&self) -> bool {
        self.cost_mismatches == 0 && self.assignment_mismatches == 0
    }
}

/// Hungarian solver against exhaustive search on random `n ≤ max_n`
/// matrices. Half the trials use small integer costs so that ties occur.
pub fn lap_oracle(trials: usize, max_n: usize, seed: u64) -> Result<OracleOutcome> {
    let mut rng = RngStream::new(seed);
    let mut out = OracleOutcome {
        trials,
        cost_mismatches: 0,
        assignment_mismatches: 0,
    };
    for trial in 0..trials {
        let n = 1 + rng.below(max_n.max(1));
        let cost = if trial % 2 == 0 {
            Matrix::from_fn(n, n, |_, _| rng.next_f64())
        } else {
            Matrix::from_fn(n, n, |_, _| rng.below(4) as f64)
        };
        let fast = solve_lap(&cost)?;
        let slow = brute_force_lap(&cost);
        out.cost_mismatches += (fast.cost != slow.cost) as usize;
        out.assignment_mismatches += (fast.perm != slow.perm) as usize;
    }
    Ok(out)
}
