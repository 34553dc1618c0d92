use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Evaluation;
use crate::model::{gate_scores, shared_routing_weights, top_k_indices, MoEParams, Variant};
use crate::numerics::{dot, log_sum_exp, stable_softmax, Matrix, RngStream};

use super::data::Dataset;

/// Fixed random encoder `z = E x + e` and readout `logits = R y + r` around
/// the trainable MoE block. Never updated by training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenBackbone {
    pub seed: u64,
    pub encoder: Matrix,
    pub encoder_bias: Vec<f64>,
    pub readout: Matrix,
    pub readout_bias: Vec<f64>,
}

impl FrozenBackbone {
    /// Encoder entries `N(0, 1/input_dim)`, readout entries `N(0, 1/dim)`,
    /// biases `N(0, 0.01)`.
    pub fn generate(seed: u64, input_dim: usize, dim: usize, classes: usize) -> Result<Self> {
        if input_dim == 0 || dim == 0 || classes < 2 {
            return Err(Error::Config(format!(
                "backbone needs positive dims and >= 2 classes (input {input_dim}, dim {dim}, classes {classes})"
            )));
        }
        let mut rng = RngStream::new(seed);
        let encoder = Matrix::random_normal(dim, input_dim, &mut rng, 1.0 / (input_dim as f64).sqrt());
        let encoder_bias = rng.normals(dim, 0.1);
        let readout = Matrix::random_normal(classes, dim, &mut rng, 1.0 / (dim as f64).sqrt());
        let readout_bias = rng.normals(classes, 0.1);
        Ok(Self {
            seed,
            encoder,
            encoder_bias,
            readout,
            readout_bias,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.cols()
    }

    pub fn dim(&self) -> usize {
        self.encoder.rows()
    }

    pub fn classes(&self) -> usize {
        self.readout.rows()
    }

    /// Runs the encoder over every row once; the result is what the MoE sees.
    pub fn encode(&self, data: &Dataset) -> Result<Encoded> {
        if data.input_dim() != self.input_dim() {
            return Err(Error::Shape(format!(
                "data has {} features, backbone expects {}",
                data.input_dim(),
                self.input_dim()
            )));
        }
        if let Some(&label) = data.labels.iter().find(|&&l| l >= self.classes()) {
            return Err(Error::Label {
                label,
                classes: self.classes(),
            });
        }
        let d = self.dim();
        let mut z = Vec::with_capacity(data.len() * d);
        for i in 0..data.len() {
            let mut row = self.encoder.matvec(data.features.row(i))?;
            for (v, b) in row.iter_mut().zip(&self.encoder_bias) {
                *v += b;
            }
            z.extend(row);
        }
        Ok(Encoded {
            z: Matrix::new(data.len(), d, z)?,
            labels: data.labels.clone(),
        })
    }

    fn logits(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut logits = self.readout.matvec(y)?;
        for (l, b) in logits.iter_mut().zip(&self.readout_bias) {
            *l += b;
        }
        Ok(logits)
    }
}

/// Refuses to compare runs trained around different backbones.
pub fn ensure_same_backbone(a: u64, b: u64) -> Result<()> {
    if a != b {
        return Err(Error::BackboneMismatch { a, b });
    }
    Ok(())
}

/// Encoder outputs with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub z: Matrix,
    pub labels: Vec<usize>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Encoded {
        let d = self.z.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.z.row(i));
        }
        Encoded {
            z: Matrix::new(indices.len(), d, data).expect("row-sized chunks"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub loss: f64,
    pub accuracy: f64,
}

fn check_batch(params: &MoEParams, backbone: &FrozenBackbone, batch: &Encoded) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    if params.config().dim != backbone.dim() || batch.z.cols() != backbone.dim() {
        return Err(Error::Shape(format!(
            "model dim {}, backbone dim {}, batch dim {}",
            params.config().dim,
            backbone.dim(),
            batch.z.cols()
        )));
    }
    Ok(())
}

/// Cross-entropy of `logits` for `label`, and whether the first maximal logit is `label`.
fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, bool)> {
    let loss = log_sum_exp(logits)? - logits[label];
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    Ok((loss, best == label))
}

/// Mean cross-entropy and accuracy on already-encoded samples.
pub fn encoded_loss(params: &MoEParams, backbone: &FrozenBackbone, batch: &Encoded) -> Result<LossStats> {
    check_batch(params, backbone, batch)?;
    let mut total = 0.0;
    let mut correct = 0usize;
    for (i, &label) in batch.labels.iter().enumerate() {
        let z = batch.z.row(i);
        let mut y = params.forward(z)?;
        for (v, zi) in y.iter_mut().zip(z) {
            *v += zi;
        }
        let (loss, hit) = cross_entropy(&backbone.logits(&y)?, label)?;
        total += loss;
        correct += hit as usize;
    }
    let n = batch.len() as f64;
    Ok(LossStats {
        loss: total / n,
        accuracy: correct as f64 / n,
    })
}

/// Loss-and-accuracy callback for curve evaluation on a fixed encoded set.
pub fn evaluator<'a>(
    backbone: &'a FrozenBackbone,
    data: &'a Encoded,
) -> impl Fn(&MoEParams) -> Result<Evaluation> + Sync + Send + 'a {
    move |params| {
        let stats = encoded_loss(params, backbone, data)?;
        Ok(Evaluation {
            loss: stats.loss,
            accuracy: Some(stats.accuracy),
        })
    }
}

/// `logits = R(moe(z) + z) + r` with `z = E x + e`.
pub fn model_loss(params: &MoEParams, backbone: &FrozenBackbone, batch: &Dataset) -> Result<LossStats> {
    encoded_loss(params, backbone, &backbone.encode(batch)?)
}

pub fn grad_model_loss(params: &MoEParams, backbone: &FrozenBackbone, batch: &Dataset) -> Result<(MoEParams, LossStats)> {
    encoded_grad(params, backbone, &backbone.encode(batch)?)
}

/// Mean loss gradient over the batch, shaped like `params`. Top-k selection
/// is treated as constant; gradients reach only the selected experts and the
/// scores entering their softmax.
pub fn encoded_grad(
    params: &MoEParams,
    backbone: &FrozenBackbone,
    batch: &Encoded,
) -> Result<(MoEParams, LossStats)> {
    check_batch(params, backbone, batch)?;
    let mut grad = params.zeros_like();
    let mut total = 0.0;
    let mut correct = 0usize;
    for (i, &label) in batch.labels.iter().enumerate() {
        let (loss, hit) = accumulate_sample(params, backbone, batch.z.row(i), label, &mut grad)?;
        total += loss;
        correct += hit as usize;
    }
    let n = batch.len() as f64;
    let mut mean = params.zeros_like();
    mean.axpy(1.0 / n, &grad)?;
    Ok((
        mean,
        LossStats {
            loss: total / n,
            accuracy: correct as f64 / n,
        },
    ))
}

/// Active experts as `(expert index, mixing weight)` plus what is needed to
/// turn `∂L/∂weight` into `∂L/∂score` per gate.
struct Routing {
    active: Vec<(usize, f64)>,
    /// Positions in `active` that are gated, with their gate index.
    gated: Vec<(usize, usize)>,
    kind: RoutingKind,
}

enum RoutingKind {
    /// Weights are a softmax over the gated entries' own scores.
    Softmax,
    /// Weights are a full softmax over all gate scores, then masked.
    Masked { probs: Vec<f64> },
}

fn route(params: &MoEParams, z: &[f64]) -> Result<Routing> {
    let scores = gate_scores(z, params.gates())?;
    Ok(match params.config().variant {
        Variant::Dense => {
            let p = stable_softmax(&scores)?;
            Routing {
                active: p.into_iter().enumerate().collect(),
                gated: (0..scores.len()).map(|i| (i, i)).collect(),
                kind: RoutingKind::Softmax,
            }
        }
        Variant::Sparse { k } => {
            let sel = top_k_indices(&scores, k)?;
            let q = stable_softmax(&sel.iter().map(|&i| scores[i]).collect::<Vec<_>>())?;
            Routing {
                active: sel.iter().copied().zip(q).collect(),
                gated: sel.iter().enumerate().map(|(pos, &i)| (pos, i)).collect(),
                kind: RoutingKind::Softmax,
            }
        }
        Variant::Shared { shared, top_k } => {
            let (weights, sel) = shared_routing_weights(&scores, top_k)?;
            let mut active: Vec<(usize, f64)> = (0..shared).map(|i| (i, 1.0)).collect();
            let mut gated = Vec::with_capacity(sel.len());
            for &i in &sel {
                gated.push((active.len(), i));
                active.push((shared + i, weights[i]));
            }
            Routing {
                active,
                gated,
                kind: RoutingKind::Masked {
                    probs: stable_softmax(&scores)?,
                },
            }
        }
    })
}

impl Routing {
    fn score_grad(&self, d_weight: &[f64], gates: usize) -> Vec<f64> {
        let mut ds = vec![0.0; gates];
        match &self.kind {
            RoutingKind::Softmax => {
                let mean: f64 = self.gated.iter().map(|&(pos, _)| self.active[pos].1 * d_weight[pos]).sum();
                for &(pos, g) in &self.gated {
                    ds[g] = self.active[pos].1 * (d_weight[pos] - mean);
                }
            }
            RoutingKind::Masked { probs } => {
                let mut dp = vec![0.0; gates];
                for &(pos, g) in &self.gated {
                    dp[g] = d_weight[pos];
                }
                let mean = dot(probs, &dp);
                for g in 0..gates {
                    ds[g] = probs[g] * (dp[g] - mean);
                }
            }
        }
        ds
    }
}

fn accumulate_sample(
    params: &MoEParams,
    backbone: &FrozenBackbone,
    z: &[f64],
    label: usize,
    grad: &mut MoEParams,
) -> Result<(f64, bool)> {
    let routing = route(params, z)?;
    let traces = routing
        .active
        .iter()
        .map(|&(e, _)| params.experts()[e].trace(z))
        .collect::<Result<Vec<_>>>()?;
    let mut y = z.to_vec();
    for (&(_, w), t) in routing.active.iter().zip(&traces) {
        for (v, o) in y.iter_mut().zip(&t.output) {
            *v += w * o;
        }
    }
    let logits = backbone.logits(&y)?;
    let (loss, hit) = cross_entropy(&logits, label)?;

    let mut d_logits = stable_softmax(&logits)?;
    d_logits[label] -= 1.0;
    let dm = backbone.readout.matvec_t(&d_logits)?;

    let mut d_weight = Vec::with_capacity(traces.len());
    for (&(e, w), t) in routing.active.iter().zip(&traces) {
        d_weight.push(dot(&dm, &t.output));
        let de: Vec<f64> = dm.iter().map(|g| w * g).collect();
        let expert = &params.experts()[e];
        let dh = expert.b.matvec_t(&de)?;
        let ge = &mut grad.experts[e];
        for (r, &g) in de.iter().enumerate() {
            for (dst, &hv) in ge.b.row_mut(r).iter_mut().zip(&t.hidden) {
                *dst += g * hv;
            }
            ge.v[r] += g;
        }
        for (j, (&g, &pre)) in dh.iter().zip(&t.pre).enumerate() {
            if pre <= 0.0 {
                continue;
            }
            for (dst, &zi) in ge.a.row_mut(j).iter_mut().zip(z) {
                *dst += g * zi;
            }
            ge.u[j] += g;
        }
    }

    let ds = routing.score_grad(&d_weight, params.gates().len());
    for (gate, &s) in grad.gates.iter_mut().zip(&ds) {
        for (dst, &zi) in gate.w.iter_mut().zip(z) {
            *dst += s * zi;
        }
        gate.b += s;
    }
    Ok((loss, hit))
}
