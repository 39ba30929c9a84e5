//! Task auto-encoder.
//!
//! The encoder embeds every labeled probing pair `(x_k, y_k)` with a feature
//! network, averages the embeddings and squashes the mean with `tanh`, so the
//! latent lies in `(-1, 1)^m` and is invariant to the order of the context.
//! The decoder predicts `y_k` from `(x_k, z)`. Training minimizes the mean
//! squared reconstruction error; a FOCAL-style distance-metric loss on the
//! latents is available for the contrastive ablation.

use serde::{Deserialize, Serialize};

use crate::datagen::Transition;
use crate::dynmodel::encode_label;
use crate::envsuite::Family;
use crate::error::{GentleError, Result};
use crate::numkit::{Activation, Matrix, Mlp, Rng, Tape};

/// Distance floor in the contrastive repulsion term.
pub const CONTRASTIVE_EPS: f64 = 1e-3;

/// Task representation, every component strictly inside `(-1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent(pub Vec<f64>);

impl Latent {
    /// The all-zero prior used before any context is seen.
    pub fn prior(dim: usize) -> Self {
        Latent(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `n` probing inputs `x = (s, a)` with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBatch {
    pub x: Matrix,
    pub y: Matrix,
}

impl ContextBatch {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(GentleError::Dimension {
                context: "ContextBatch rows",
                expected: x.rows(),
                got: y.rows(),
            });
        }
        Ok(ContextBatch { x, y })
    }

    pub fn empty(x_dim: usize, y_dim: usize) -> Self {
        ContextBatch {
            x: Matrix::zeros(0, x_dim),
            y: Matrix::zeros(0, y_dim),
        }
    }

    pub fn from_transitions<'a, I>(family: Family, transitions: I) -> Self
    where
        I: IntoIterator<Item = &'a Transition>,
    {
        let x_dim = family.state_dim() + family.action_dim();
        let y_dim = family.label_dim();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for t in transitions {
            xs.extend(t.s.iter().chain(&t.a));
            ys.extend(encode_label(family, &t.s, &t.s_next, t.r));
        }
        let n = xs.len() / x_dim;
        ContextBatch {
            x: Matrix::from_vec(n, x_dim, xs).expect("transition widths match the family"),
            y: Matrix::from_vec(n, y_dim, ys).expect("label widths match the family"),
        }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// Encoder input rows `[x_k, y_k]`.
    fn encoder_input(&self) -> Matrix {
        Matrix::hcat(&[&self.x, &self.y]).expect("rows checked at construction")
    }

    /// Same pairs in a different order.
    pub fn permuted(&self, perm: &[usize]) -> ContextBatch {
        let pick = |m: &Matrix| {
            let mut out = Matrix::zeros(perm.len(), m.cols());
            for (r, &i) in perm.iter().enumerate() {
                out.row_mut(r).copy_from_slice(m.row(i));
            }
            out
        };
        ContextBatch {
            x: pick(&self.x),
            y: pick(&self.y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaeShape {
    pub x_dim: usize,
    pub y_dim: usize,
    pub latent_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl TaeShape {
    pub fn for_family(family: Family, latent_dim: usize, hidden_width: usize, hidden_layers: usize) -> Self {
        TaeShape {
            x_dim: family.state_dim() + family.action_dim(),
            y_dim: family.label_dim(),
            latent_dim,
            hidden_width,
            hidden_layers,
        }
    }
}

/// Encoder feature network and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TaePair {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

/// Per-latent bookkeeping for backpropagation through pooling.
struct Pooled {
    tape: Tape,
    /// `(start, len)` of each context inside the stacked encoder batch.
    segments: Vec<(usize, usize)>,
    latents: Vec<Latent>,
}

/// Loss value and gradients for both networks.
#[derive(Debug, Clone)]
pub struct TaeGradients {
    pub loss: f64,
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
    /// Latent of each context after squashing.
    pub latents: Vec<Latent>,
}

impl TaePair {
    pub fn new(shape: TaeShape, rng: &mut Rng) -> Self {
        let hidden = std::iter::repeat_n(shape.hidden_width, shape.hidden_layers);
        let mut enc_dims = vec![shape.x_dim + shape.y_dim];
        enc_dims.extend(hidden.clone());
        enc_dims.push(shape.latent_dim);
        let mut dec_dims = vec![shape.x_dim + shape.latent_dim];
        dec_dims.extend(hidden);
        dec_dims.push(shape.y_dim);
        TaePair {
            encoder: Mlp::new(&enc_dims, Activation::Relu, Activation::Identity, &mut rng.named("encoder")),
            decoder: Mlp::new(&dec_dims, Activation::Relu, Activation::Identity, &mut rng.named("decoder")),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn y_dim(&self) -> usize {
        self.decoder.out_dim()
    }

    pub fn x_dim(&self) -> usize {
        self.decoder.in_dim() - self.latent_dim()
    }

    fn check_context(&self, ctx: &ContextBatch) -> Result<()> {
        if ctx.x.cols() != self.x_dim() {
            return Err(GentleError::Dimension {
                context: "context x",
                expected: self.x_dim(),
                got: ctx.x.cols(),
            });
        }
        if ctx.y.cols() != self.y_dim() {
            return Err(GentleError::Dimension {
                context: "context y",
                expected: self.y_dim(),
                got: ctx.y.cols(),
            });
        }
        Ok(())
    }

    /// `z = tanh(mean_k f(x_k, y_k))`; an empty context gives the zero prior.
    pub fn encode(&self, ctx: &ContextBatch) -> Result<Latent> {
        self.check_context(ctx)?;
        if ctx.is_empty() {
            return Ok(Latent::prior(self.latent_dim()));
        }
        let feats = self.encoder.forward_batch(&ctx.encoder_input())?;
        Ok(pool(&feats, 0, feats.rows()))
    }

    pub fn encode_many(&self, contexts: &[&ContextBatch]) -> Result<Vec<Latent>> {
        for c in contexts {
            self.check_context(c)?;
        }
        Ok(self.pool_contexts(contexts).latents)
    }

    pub fn decode(&self, z: &Latent, x: &[f64]) -> Result<Vec<f64>> {
        if z.dim() != self.latent_dim() || x.len() != self.x_dim() {
            return Err(GentleError::Dimension {
                context: "decoder input",
                expected: self.decoder.in_dim(),
                got: z.dim() + x.len(),
            });
        }
        let input: Vec<f64> = x.iter().chain(z.as_slice()).copied().collect();
        self.decoder.forward(&input)
    }

    /// Mean over the context of `||y_k - decode(encode(ctx), x_k)||^2`.
    pub fn tae_loss(&self, ctx: &ContextBatch) -> Result<f64> {
        if ctx.is_empty() {
            return Err(GentleError::config("reconstruction loss needs at least one pair"));
        }
        let z = self.encode(ctx)?;
        let pred = self.decoder.forward_batch(&decoder_input(&ctx.x, &z))?;
        let mut total = 0.0;
        for (p, y) in pred.data().iter().zip(ctx.y.data()) {
            total += (p - y).powi(2);
        }
        Ok(total / ctx.len() as f64)
    }

    fn pool_contexts(&self, contexts: &[&ContextBatch]) -> Pooled {
        let total: usize = contexts.iter().map(|c| c.len()).sum();
        let width = self.encoder.in_dim();
        let mut stacked = Matrix::zeros(total, width);
        let mut segments = Vec::with_capacity(contexts.len());
        let mut row = 0;
        for c in contexts {
            segments.push((row, c.len()));
            for k in 0..c.len() {
                let dst = stacked.row_mut(row + k);
                dst[..c.x.cols()].copy_from_slice(c.x.row(k));
                dst[c.x.cols()..].copy_from_slice(c.y.row(k));
            }
            row += c.len();
        }
        let tape = self.encoder.forward_tape(stacked);
        let latents = segments
            .iter()
            .map(|&(start, len)| {
                if len == 0 {
                    Latent::prior(self.latent_dim())
                } else {
                    pool(tape.output(), start, len)
                }
            })
            .collect();
        Pooled {
            tape,
            segments,
            latents,
        }
    }

    /// Backpropagates `d loss / d z` for each pooled context into encoder gradients.
    fn backprop_latents(&self, pooled: &Pooled, d_latents: &[Vec<f64>], grads: &mut [f64]) {
        let m = self.latent_dim();
        let mut d_feats = Matrix::zeros(pooled.tape.output().rows(), m);
        for ((&(start, len), z), dz) in pooled.segments.iter().zip(&pooled.latents).zip(d_latents) {
            if len == 0 {
                continue;
            }
            let d_mean: Vec<f64> = dz
                .iter()
                .zip(z.as_slice())
                .map(|(g, zv)| g * (1.0 - zv * zv) / len as f64)
                .collect();
            for k in start..start + len {
                d_feats.row_mut(k).copy_from_slice(&d_mean);
            }
        }
        self.encoder.backward(&pooled.tape, d_feats, grads, false);
    }

    /// Reconstruction loss averaged over tasks (one context per task) and
    /// its gradient w.r.t. both networks.
    pub fn reconstruction_gradients(&self, contexts: &[&ContextBatch]) -> Result<TaeGradients> {
        if contexts.is_empty() || contexts.iter().any(|c| c.is_empty()) {
            return Err(GentleError::config("reconstruction loss needs non-empty contexts"));
        }
        for c in contexts {
            self.check_context(c)?;
        }
        let pooled = self.pool_contexts(contexts);
        let n_tasks = contexts.len() as f64;
        let total: usize = contexts.iter().map(|c| c.len()).sum();
        let (x_dim, m) = (self.x_dim(), self.latent_dim());
        let mut dec_in = Matrix::zeros(total, x_dim + m);
        for ((c, &(start, _)), z) in contexts.iter().zip(&pooled.segments).zip(&pooled.latents) {
            for k in 0..c.len() {
                let dst = dec_in.row_mut(start + k);
                dst[..x_dim].copy_from_slice(c.x.row(k));
                dst[x_dim..].copy_from_slice(z.as_slice());
            }
        }
        let dec_tape = self.decoder.forward_tape(dec_in);
        let pred = dec_tape.output();
        let mut d_pred = Matrix::zeros(total, self.y_dim());
        let mut loss = 0.0;
        for (c, &(start, len)) in contexts.iter().zip(&pooled.segments) {
            let scale = 1.0 / (n_tasks * len as f64);
            for k in 0..len {
                for ((d, &p), &y) in d_pred
                    .row_mut(start + k)
                    .iter_mut()
                    .zip(pred.row(start + k))
                    .zip(c.y.row(k))
                {
                    loss += (p - y).powi(2) * scale;
                    *d = 2.0 * (p - y) * scale;
                }
            }
        }
        let mut decoder = self.decoder.zero_grads();
        let d_dec_in = self
            .decoder
            .backward(&dec_tape, d_pred, &mut decoder, true)
            .expect("input gradient requested");
        let d_latents: Vec<Vec<f64>> = pooled
            .segments
            .iter()
            .map(|&(start, len)| {
                let mut dz = vec![0.0; m];
                for k in start..start + len {
                    for (acc, v) in dz.iter_mut().zip(&d_dec_in.row(k)[x_dim..]) {
                        *acc += v;
                    }
                }
                dz
            })
            .collect();
        let mut encoder = self.encoder.zero_grads();
        self.backprop_latents(&pooled, &d_latents, &mut encoder);
        Ok(TaeGradients {
            loss,
            encoder,
            decoder,
            latents: pooled.latents,
        })
    }

    /// Distance-metric loss over per-task groups of contexts:
    /// mean over same-task pairs of `||z_i - z_j||^2` plus mean over
    /// cross-task pairs of `1 / (||z_i - z_j||^2 + eps)`.
    /// Only the encoder receives gradient (the decoder block is zero).
    pub fn contrastive_gradients(&self, groups: &[Vec<&ContextBatch>]) -> Result<TaeGradients> {
        if groups.len() < 2 {
            return Err(GentleError::config("contrastive loss needs at least 2 tasks"));
        }
        if groups.iter().any(|g| g.len() < 2) {
            return Err(GentleError::config("contrastive loss needs at least 2 contexts per task"));
        }
        let flat: Vec<&ContextBatch> = groups.iter().flatten().copied().collect();
        for c in &flat {
            self.check_context(c)?;
        }
        let labels: Vec<usize> = groups
            .iter()
            .enumerate()
            .flat_map(|(t, g)| std::iter::repeat_n(t, g.len()))
            .collect();
        let pooled = self.pool_contexts(&flat);
        let zs: Vec<&[f64]> = pooled.latents.iter().map(|l| l.as_slice()).collect();
        let (loss, d_latents) = contrastive_value_and_grad(&zs, &labels);
        let mut encoder = self.encoder.zero_grads();
        self.backprop_latents(&pooled, &d_latents, &mut encoder);
        Ok(TaeGradients {
            loss,
            encoder,
            decoder: self.decoder.zero_grads(),
            latents: pooled.latents,
        })
    }
}

/// Mean of rows `start..start+len`, then `tanh`. Each column is summed in
/// sorted order so the result does not depend on the order of the pairs,
/// down to the last bit.
fn pool(feats: &Matrix, start: usize, len: usize) -> Latent {
    let mut column = Vec::with_capacity(len);
    let z = (0..feats.cols())
        .map(|j| {
            column.clear();
            column.extend((start..start + len).map(|k| feats.get(k, j)));
            column.sort_unstable_by(f64::total_cmp);
            (column.iter().sum::<f64>() / len as f64).tanh()
        })
        .collect();
    Latent(z)
}

fn decoder_input(x: &Matrix, z: &Latent) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols() + z.dim());
    for r in 0..x.rows() {
        let dst = out.row_mut(r);
        dst[..x.cols()].copy_from_slice(x.row(r));
        dst[x.cols()..].copy_from_slice(z.as_slice());
    }
    out
}

/// Contrastive loss over labeled embeddings and its gradient per embedding.
pub fn contrastive_value_and_grad(zs: &[&[f64]], labels: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let dim = zs.first().map_or(0, |z| z.len());
    let mut grads = vec![vec![0.0; dim]; zs.len()];
    let mut same_pairs = 0usize;
    let mut diff_pairs = 0usize;
    for i in 0..zs.len() {
        for j in i + 1..zs.len() {
            if labels[i] == labels[j] {
                same_pairs += 1;
            } else {
                diff_pairs += 1;
            }
        }
    }
    let (mut same, mut diff) = (0.0, 0.0);
    for i in 0..zs.len() {
        for j in i + 1..zs.len() {
            let delta: Vec<f64> = zs[i].iter().zip(zs[j]).map(|(a, b)| a - b).collect();
            let d2: f64 = delta.iter().map(|v| v * v).sum();
            // d(d2)/dz_i = 2 delta, d(d2)/dz_j = -2 delta
            let coeff = if labels[i] == labels[j] {
                same += d2;
                1.0 / same_pairs as f64
            } else {
                let inv = 1.0 / (d2 + CONTRASTIVE_EPS);
                diff += inv;
                -inv * inv / diff_pairs as f64
            };
            for (k, dv) in delta.iter().enumerate() {
                grads[i][k] += 2.0 * coeff * dv;
                grads[j][k] -= 2.0 * coeff * dv;
            }
        }
    }
    let loss = if same_pairs > 0 { same / same_pairs as f64 } else { 0.0 }
        + if diff_pairs > 0 { diff / diff_pairs as f64 } else { 0.0 };
    (loss, grads)
}
