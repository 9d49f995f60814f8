//! A stack of adapted linear layers with the training-loop plumbing: flat
//! parameter packing for the optimizer, loss/gradient evaluation, score
//! aggregation per layer, and mask application from allocation decisions.
//!
//! Architecture (fixed): tanh between layers, linear output. Flat parameter
//! layout: per layer, `[P row-major | lambda | Q row-major]`, layers in
//! order — the one convention shared by the optimizer, the scorers, and the
//! checkpoint format.

use crate::adapter::{AdapterLayer, AdapterSnapshot};
use crate::budget::{AllocationDecision, RankRow};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SplitMix64};
use crate::scoring::{aggregate_triplet, TripletScore};
use serde::{Deserialize, Serialize};

/// One minibatch of targets; the variant decides the loss and the metric.
#[derive(Debug, Clone, Copy)]
pub enum TargetBatch<'a> {
    /// Continuous targets, squared-error loss, RMSE metric.
    Regression(&'a Matrix),
    /// Class labels, softmax cross-entropy loss, accuracy metric.
    Classification(&'a [usize]),
}

/// Flat-vector extents of one layer's parameter blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpan {
    pub p: std::ops::Range<usize>,
    pub lambda: std::ops::Range<usize>,
    pub q: std::ops::Range<usize>,
}

impl LayerSpan {
    pub fn total(&self) -> std::ops::Range<usize> {
        self.p.start..self.q.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub layers: Vec<AdapterSnapshot>,
}

/// Adapted linear stack.
#[derive(Debug, Clone)]
pub struct AdapterModel {
    layers: Vec<AdapterLayer>,
}

impl AdapterModel {
    /// Builds one adapter per base weight, all with the same initial rank.
    pub fn new(
        bases: &[Matrix],
        rank: usize,
        init_std: f64,
        gamma_orth: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if bases.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        let layers = bases
            .iter()
            .map(|w0| AdapterLayer::new(w0.clone(), rank, init_std, gamma_orth, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    /// Wraps pre-built layers, checking that widths chain.
    pub fn from_layers(layers: Vec<AdapterLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        for k in 1..layers.len() {
            let (_, prev_out) = layers[k - 1].dims();
            let (cur_in, _) = layers[k].dims();
            if prev_out != cur_in {
                return Err(Error::ShapeMismatch(format!(
                    "layer {k} expects width {cur_in} but layer {} emits {prev_out}",
                    k - 1
                )));
            }
        }
        Ok(AdapterModel { layers })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[AdapterLayer] {
        &self.layers
    }

    pub fn layer(&self, k: usize) -> &AdapterLayer {
        &self.layers[k]
    }

    /// Forward pass: tanh between layers, linear output.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.1)
    }

    /// Forward pass that also returns each layer's *input* (`acts[k]` feeds
    /// layer `k`), which backward needs both as the gradient anchor and for
    /// the tanh derivative `1 - a^2`.
    fn forward_cached(&self, x: &Matrix) -> Result<(Vec<Matrix>, Matrix)> {
        let l = self.layers.len();
        let mut acts = Vec::with_capacity(l);
        acts.push(x.clone());
        for k in 0..l - 1 {
            let z = self.layers[k].forward(&acts[k])?;
            acts.push(z.map(f64::tanh));
        }
        let out = self.layers[l - 1].forward(&acts[l - 1])?;
        Ok((acts, out))
    }

    /// Loss (task term plus every layer's weighted orthogonality penalty)
    /// and its gradient as one flat vector.
    pub fn loss_and_grads(&self, x: &Matrix, target: &TargetBatch) -> Result<(f64, Vec<f64>)> {
        let (acts, out) = self.forward_cached(x)?;
        let batch = x.rows() as f64;
        let (data_loss, mut upstream) = match target {
            TargetBatch::Regression(y) => {
                if y.shape() != out.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "targets {}x{} vs output {}x{}",
                        y.rows(),
                        y.cols(),
                        out.rows(),
                        out.cols()
                    )));
                }
                let diff = out.sub(y)?;
                (0.5 * diff.frobenius_norm_sq() / batch, diff.scale(1.0 / batch)?)
            }
            TargetBatch::Classification(labels) => {
                if labels.len() != out.rows() {
                    return Err(Error::ShapeMismatch(format!(
                        "{} labels vs batch {}",
                        labels.len(),
                        out.rows()
                    )));
                }
                let classes = out.cols();
                let mut loss = 0.0;
                let mut grad = Matrix::zeros(out.rows(), classes);
                for (i, &label) in labels.iter().enumerate() {
                    if label >= classes {
                        return Err(Error::InvalidArgument(format!(
                            "label {label} out of range for {classes} classes"
                        )));
                    }
                    let row = out.row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    loss -= (row[label] - max) - z.ln();
                    for j in 0..classes {
                        let p = (row[j] - max).exp() / z;
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        grad.set(i, j, (p - onehot) / batch)?;
                    }
                }
                (loss / batch, grad)
            }
        };

        let penalty: f64 =
            self.layers.iter().map(|l| l.gamma_orth() * l.orthogonality_penalty()).sum();

        let mut flat = vec![0.0; self.flat_dim()];
        let spans = self.layer_spans();
        for k in (0..self.layers.len()).rev() {
            let grads = self.layers[k].backward(&acts[k], &upstream)?;
            let span = &spans[k];
            flat[span.p.clone()].copy_from_slice(grads.g_p.as_slice());
            flat[span.lambda.clone()].copy_from_slice(&grads.g_lambda);
            flat[span.q.clone()].copy_from_slice(grads.g_q.as_slice());
            if k > 0 {
                // d loss / d z_{k-1} = (upstream W^T) ⊙ (1 - a_k^2).
                let da = self.layers[k].backprop_input(&upstream)?;
                upstream = da.hadamard(&acts[k].map(|a| 1.0 - a * a))?;
            }
        }
        Ok((data_loss + penalty, flat))
    }

    /// Validation metric: RMSE over all output entries for regression (lower
    /// is better), accuracy for classification (higher is better).
    pub fn evaluate(&self, x: &Matrix, target: &TargetBatch) -> Result<f64> {
        let out = self.forward(x)?;
        match target {
            TargetBatch::Regression(y) => {
                let diff = out.sub(y)?;
                Ok((diff.frobenius_norm_sq() / (diff.rows() * diff.cols()) as f64).sqrt())
            }
            TargetBatch::Classification(labels) => {
                if labels.len() != out.rows() {
                    return Err(Error::ShapeMismatch(format!(
                        "{} labels vs batch {}",
                        labels.len(),
                        out.rows()
                    )));
                }
                let mut hits = 0usize;
                for (i, &label) in labels.iter().enumerate() {
                    let row = out.row(i);
                    let mut best = 0;
                    for j in 1..row.len() {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    if best == label {
                        hits += 1;
                    }
                }
                Ok(hits as f64 / labels.len() as f64)
            }
        }
    }

    /// Extents of each layer's `[P | lambda | Q]` blocks in the flat vector.
    pub fn layer_spans(&self) -> Vec<LayerSpan> {
        let mut spans = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for layer in &self.layers {
            let (d1, d2) = layer.dims();
            let r = layer.rank();
            let p = offset..offset + d1 * r;
            let lambda = p.end..p.end + r;
            let q = lambda.end..lambda.end + r * d2;
            offset = q.end;
            spans.push(LayerSpan { p, lambda, q });
        }
        spans
    }

    pub fn flat_dim(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let (d1, d2) = l.dims();
                l.rank() * (d1 + d2 + 1)
            })
            .sum()
    }

    /// Packs all trainable factors into one flat vector.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.flat_dim());
        for layer in &self.layers {
            flat.extend_from_slice(layer.p().as_slice());
            flat.extend_from_slice(layer.lambda());
            flat.extend_from_slice(layer.q().as_slice());
        }
        flat
    }

    /// Pushes a flat parameter vector back into the layers.
    pub fn set_from_flat(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.flat_dim() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} entries, model has {}",
                theta.len(),
                self.flat_dim()
            )));
        }
        let spans = self.layer_spans();
        for (layer, span) in self.layers.iter_mut().zip(&spans) {
            layer.set_factors(&theta[span.p.clone()], &theta[span.lambda.clone()], &theta[span.q.clone()])?;
        }
        Ok(())
    }

    /// Folds a flat per-scalar score vector into per-triplet scores across
    /// all layers, in `(layer_id, triplet_index)` order.
    pub fn triplet_scores(&self, per_scalar: &[f64]) -> Result<Vec<TripletScore>> {
        if per_scalar.len() != self.flat_dim() {
            return Err(Error::ShapeMismatch(format!(
                "score vector has {} entries, model has {}",
                per_scalar.len(),
                self.flat_dim()
            )));
        }
        let spans = self.layer_spans();
        let mut out = Vec::new();
        for (k, (layer, span)) in self.layers.iter().zip(&spans).enumerate() {
            let (d1, d2) = layer.dims();
            let r = layer.rank();
            let p_scores = Matrix::from_vec(d1, r, per_scalar[span.p.clone()].to_vec())?;
            let q_scores = Matrix::from_vec(r, d2, per_scalar[span.q.clone()].to_vec())?;
            out.extend(aggregate_triplet(
                k,
                layer,
                &p_scores,
                &per_scalar[span.lambda.clone()],
                &q_scores,
            )?);
        }
        Ok(out)
    }

    /// Applies an allocation decision: triplets in `kept` stay active,
    /// everything else is masked. Factor values are untouched, so a later
    /// decision can reactivate a triplet exactly where it left off.
    pub fn apply_allocation(&mut self, decision: &AllocationDecision) -> Result<()> {
        let n_layers = self.layers.len();
        for &(layer, idx) in decision.kept.iter().chain(&decision.pruned) {
            if layer >= n_layers || idx >= self.layers[layer].rank() {
                return Err(Error::InvalidArgument(format!(
                    "allocation names triplet ({layer}, {idx}) outside the model"
                )));
            }
        }
        let mut masks: Vec<Vec<bool>> =
            self.layers.iter().map(|l| vec![false; l.rank()]).collect();
        for &(layer, idx) in &decision.kept {
            masks[layer][idx] = true;
        }
        for (layer, mask) in self.layers.iter_mut().zip(&masks) {
            layer.set_mask(mask)?;
        }
        Ok(())
    }

    pub fn masks(&self) -> Vec<Vec<bool>> {
        self.layers.iter().map(|l| l.mask().to_vec()).collect()
    }

    pub fn set_masks(&mut self, masks: &[Vec<bool>]) -> Result<()> {
        if masks.len() != self.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} masks for {} layers",
                masks.len(),
                self.layers.len()
            )));
        }
        for (layer, mask) in self.layers.iter_mut().zip(masks) {
            layer.set_mask(mask)?;
        }
        Ok(())
    }

    pub fn total_active_rank(&self) -> usize {
        self.layers.iter().map(|l| l.active_rank()).sum()
    }

    /// Trainable scalars in active triplets: `Σ active_rank * (d1 + d2 + 1)`.
    pub fn total_active_params(&self) -> usize {
        self.layers.iter().map(|l| l.active_param_count()).sum()
    }

    /// Active rank per adapter, for the rank-distribution CSV.
    pub fn rank_distribution(&self, module: &str) -> Vec<RankRow> {
        self.layers
            .iter()
            .enumerate()
            .map(|(k, l)| RankRow { layer: k, module: module.to_string(), rank: l.active_rank() })
            .collect()
    }

    pub fn to_snapshot(&self) -> ModelSnapshot {
        ModelSnapshot { layers: self.layers.iter().map(|l| l.to_snapshot()).collect() }
    }

    pub fn from_snapshot(s: &ModelSnapshot) -> Result<Self> {
        let layers =
            s.layers.iter().map(AdapterLayer::from_snapshot).collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }
}
