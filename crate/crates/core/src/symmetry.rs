//! Gate translations, expert permutations and hidden-unit permutations acting
//! on MoE parameters.
//!
//! A [`GroupElement`] `(c_W, c_b, τ)` acts on the right: entry `i` of `g·φ`
//! reads entry `τ(i)` of `φ` and adds the translation to its gate. Applying
//! `g` then `h` equals applying `g.then(&h)`, whose permutation is
//! `i ↦ τ_g(τ_h(i))`.
//!
//! For the shared variant only the routed experts (and their gates) are
//! permuted; shared experts admit hidden-unit permutations only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExpertParams, GateEntry, MoEParams};
use crate::numerics::{Matrix, RngStream};

/// A bijection on `0..n`, stored as its image sequence (`perm[i] = τ(i)`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(image: Vec<usize>) -> Result<Self> {
        let n = image.len();
        let mut seen = vec![false; n];
        for &v in &image {
            if v >= n || seen[v] {
                return Err(Error::Permutation {
                    len: n,
                    detail: format!("{image:?}"),
                });
            }
            seen[v] = true;
        }
        Ok(Self(image))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    /// Uniform permutation: Fisher–Yates shuffle of the identity.
    pub fn random(n: usize, rng: &mut RngStream) -> Self {
        let mut image: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut image);
        Self(image)
    }

    /// Every permutation of `0..n` in lexicographic order.
    pub fn all(n: usize) -> Vec<Permutation> {
        let mut current: Vec<usize> = (0..n).collect();
        let mut out = vec![Self(current.clone())];
        loop {
            let Some(i) = (1..n).rev().find(|&i| current[i - 1] < current[i]) else {
                return out;
            };
            let pivot = i - 1;
            let j = (i..n).rev().find(|&j| current[j] > current[pivot]).unwrap();
            current.swap(pivot, j);
            current[i..].reverse();
            out.push(Self(current.clone()));
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &v)| i == v)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn apply(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.0.len()];
        for (i, &v) in self.0.iter().enumerate() {
            inv[v] = i;
        }
        Self(inv)
    }

    /// `self ∘ other`, i.e. `i ↦ self(other(i))`.
    pub fn compose(&self, other: &Permutation) -> Permutation {
        Self(other.0.iter().map(|&i| self.0[i]).collect())
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(image: Vec<usize>) -> Result<Self> {
        Permutation::new(image)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

impl std::fmt::Display for Permutation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "[{}]", parts.join(" "))
    }
}

/// Element `(c_W, c_b, τ)` of the gate symmetry group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupElement {
    pub c_w: Vec<f64>,
    pub c_b: f64,
    pub tau: Permutation,
}

impl GroupElement {
    pub fn identity(n: usize, dim: usize) -> Self {
        Self {
            c_w: vec![0.0; dim],
            c_b: 0.0,
            tau: Permutation::identity(n),
        }
    }

    pub fn permutation(tau: Permutation, dim: usize) -> Self {
        Self {
            c_w: vec![0.0; dim],
            c_b: 0.0,
            tau,
        }
    }

    pub fn translation(c_w: Vec<f64>, c_b: f64, n: usize) -> Self {
        Self {
            c_w,
            c_b,
            tau: Permutation::identity(n),
        }
    }

    pub fn inverse(&self) -> GroupElement {
        Self {
            c_w: self.c_w.iter().map(|c| -c).collect(),
            c_b: -self.c_b,
            tau: self.tau.inverse(),
        }
    }

    /// The element equal to applying `self` first and `next` second.
    pub fn then(&self, next: &GroupElement) -> GroupElement {
        Self {
            c_w: self.c_w.iter().zip(&next.c_w).map(|(a, b)| a + b).collect(),
            c_b: self.c_b + next.c_b,
            tau: self.tau.compose(&next.tau),
        }
    }
}

/// One hidden-unit permutation per expert (shared experts included).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HiddenPerms {
    pub perms: Vec<Permutation>,
}

impl HiddenPerms {
    pub fn identity(experts: usize, hidden: usize) -> Self {
        Self {
            perms: vec![Permutation::identity(hidden); experts],
        }
    }

    pub fn random(experts: usize, hidden: usize, rng: &mut RngStream) -> Self {
        Self {
            perms: (0..experts).map(|_| Permutation::random(hidden, rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn inverse(&self) -> HiddenPerms {
        Self {
            perms: self.perms.iter().map(Permutation::inverse).collect(),
        }
    }
}

pub fn apply_group(params: &MoEParams, g: &GroupElement) -> Result<MoEParams> {
    let config = params.config;
    let gate_count = config.gate_count();
    if g.tau.len() != gate_count {
        return Err(Error::Shape(format!(
            "group element permutes {} experts, model has {gate_count} gated experts",
            g.tau.len()
        )));
    }
    if g.c_w.len() != config.dim {
        return Err(Error::Shape(format!(
            "translation has dimension {}, model has {}",
            g.c_w.len(),
            config.dim
        )));
    }
    let offset = config.routed_offset();
    let gates = (0..gate_count)
        .map(|i| {
            let src = &params.gates[g.tau.apply(i)];
            GateEntry::new(
                src.w.iter().zip(&g.c_w).map(|(w, c)| w + c).collect(),
                src.b + g.c_b,
            )
        })
        .collect();
    let mut experts = params.experts[..offset].to_vec();
    experts.extend((0..gate_count).map(|i| params.experts[offset + g.tau.apply(i)].clone()));
    Ok(MoEParams {
        config,
        gates,
        experts,
    })
}

/// Hidden unit `r` of the result is hidden unit `perm(r)` of `expert`:
/// `(P·A, P·u, B·Pᵀ, v)`.
pub fn permute_expert(expert: &ExpertParams, perm: &Permutation) -> Result<ExpertParams> {
    let h = expert.hidden();
    if perm.len() != h {
        return Err(Error::Shape(format!(
            "hidden permutation has length {}, expert has {h} hidden units",
            perm.len()
        )));
    }
    let d = expert.dim();
    let a = Matrix::from_fn(h, d, |r, c| expert.a.get(perm.apply(r), c));
    let u = (0..h).map(|r| expert.u[perm.apply(r)]).collect();
    let b = Matrix::from_fn(d, h, |r, c| expert.b.get(r, perm.apply(c)));
    Ok(ExpertParams {
        a,
        u,
        b,
        v: expert.v.clone(),
    })
}

pub fn apply_hidden_perms(params: &MoEParams, hidden: &HiddenPerms) -> Result<MoEParams> {
    if hidden.len() != params.experts.len() {
        return Err(Error::Shape(format!(
            "{} hidden permutations for {} experts",
            hidden.len(),
            params.experts.len()
        )));
    }
    let experts = params
        .experts
        .iter()
        .zip(&hidden.perms)
        .map(|(e, p)| permute_expert(e, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(MoEParams {
        config: params.config,
        gates: params.gates.clone(),
        experts,
    })
}

/// Uniform `τ` (Fisher–Yates), then `c_W` and `c_b` as `N(0, scale²)`, in
/// that draw order.
pub fn random_group_element(
    n: usize,
    dim: usize,
    rng: &mut RngStream,
    translation_scale: f64,
) -> GroupElement {
    let tau = Permutation::random(n, rng);
    let c_w = rng.normals(dim, translation_scale);
    let c_b = translation_scale * rng.next_normal();
    GroupElement { c_w, c_b, tau }
}

/// A functionally equivalent copy of a model together with the planted
/// transformation that produced it.
#[derive(Debug, Clone)]
pub struct Planted {
    pub params: MoEParams,
    pub group: GroupElement,
    pub hidden: HiddenPerms,
}

/// `φ' = hp · (g · φ)` for a random `g` and random hidden permutations.
pub fn plant_equivalent(
    params: &MoEParams,
    rng: &mut RngStream,
    translation_scale: f64,
) -> Result<Planted> {
    let c = params.config;
    let group = random_group_element(c.gate_count(), c.dim, rng, translation_scale);
    let hidden = HiddenPerms::random(c.experts, c.hidden, rng);
    let moved = apply_group(params, &group)?;
    Ok(Planted {
        params: apply_hidden_perms(&moved, &hidden)?,
        group,
        hidden,
    })
}
