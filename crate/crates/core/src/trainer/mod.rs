//! Toy-scale supervised regression of the transfer field.

pub mod model;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use model::{time_features, Gradients, ModelConfig, ModelInput, ToyModel, TIME_FEATURES};

use crate::backends::embed::hash_text;
use crate::backends::{Codec, Embedder};
use crate::engine::semantic_intensity;
use crate::error::{Error, Result};
use crate::forge::PairedSample;
use crate::gbuffer::{ConditionTensor, DropoutSpec};
use crate::image::Image;

/// Where the model regresses its target.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSpace {
    /// `Δx = x_next − x_prev` on the image grid; the latent is decoded back.
    #[default]
    Pixel,
    /// `Δz = E(x_next) − E(x_prev)` on the latent grid.
    Latent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub latents: Vec<Image>,
    pub conditions: Vec<ConditionTensor>,
    pub masks: Vec<Image>,
    pub prompts: Vec<Vec<f64>>,
    pub targets: Vec<Image>,
    pub steps: Vec<usize>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input(&self, i: usize) -> ModelInput<'_> {
        ModelInput {
            latent: &self.latents[i],
            condition: self.conditions[i].data(),
            mask: &self.masks[i],
            step: self.steps[i],
            prompt: &self.prompts[i],
        }
    }
}

/// Folds an embedding of any length into `dim` values and L2-normalizes.
pub fn fold_embedding(v: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (i, x) in v.iter().enumerate() {
        out[i % dim] += x;
    }
    let n = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        out.iter_mut().for_each(|x| *x /= n);
    }
    out
}

/// Prompt embedding for the model; without an embedder uses hashed tokens.
pub fn embed_prompt(prompt: &str, dim: usize, embedder: Option<&dyn Embedder>) -> Result<Vec<f64>> {
    match embedder {
        Some(e) => Ok(fold_embedding(&e.embed_text(prompt)?, dim)),
        None => Ok(hash_text(prompt, dim)),
    }
}

#[derive(Clone, Copy)]
pub struct BatchOptions<'a> {
    pub dropout: &'a DropoutSpec,
    pub codec: &'a dyn Codec,
    pub embedder: Option<&'a dyn Embedder>,
    pub prompt_dim: usize,
    pub space: TargetSpace,
}

/// Encodes inputs, applies seeded channel dropout to the conditions and
/// computes regression targets. Sample `i` draws dropout with seed
/// `dropout.seed + i`.
pub fn make_training_batch(
    samples: &[PairedSample],
    opts: &BatchOptions<'_>,
) -> Result<TrainingBatch> {
    opts.dropout.validate()?;
    let first = samples
        .first()
        .ok_or_else(|| Error::Shape("empty sample list".into()))?;
    let dims = first.x_prev.dims();
    for s in samples {
        if s.x_prev.dims() != dims || s.x_next.dims() != dims || s.condition.dims() != dims {
            return Err(Error::Shape("samples do not share one resolution".into()));
        }
        if s.mask.dims() != dims {
            return Err(Error::Shape("sample mask does not match its images".into()));
        }
    }
    let rows: Vec<_> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| -> Result<_> {
            let spec = DropoutSpec {
                seed: opts.dropout.seed.wrapping_add(i as u64),
                ..*opts.dropout
            };
            let condition = s.condition.with_retention(spec.draw());
            let z_prev = opts.codec.encode(&s.x_prev)?;
            let prompt = embed_prompt(&s.prompt, opts.prompt_dim, opts.embedder)?;
            let (latent, condition, mask, target) = match opts.space {
                TargetSpace::Pixel => (
                    opts.codec.decode(&z_prev)?,
                    condition,
                    s.mask.refined.clone(),
                    s.x_next.sub(&s.x_prev)?,
                ),
                TargetSpace::Latent => {
                    let z_next = opts.codec.encode(&s.x_next)?;
                    let (lw, lh) = z_prev.0.dims();
                    let resized = condition.data().resize_bilinear(lw, lh);
                    (
                        z_prev.0.clone(),
                        ConditionTensor::from_parts(resized, condition.dropout_state())?,
                        s.mask.refined.resize_bilinear(lw, lh),
                        z_next.0.sub(&z_prev.0)?,
                    )
                }
            };
            if !target.is_finite() {
                return Err(Error::Shape(format!("sample {i} has a non-finite target")));
            }
            Ok((latent, condition, mask, prompt, target, s.step))
        })
        .collect::<Result<_>>()?;
    let mut batch = TrainingBatch {
        latents: Vec::new(),
        conditions: Vec::new(),
        masks: Vec::new(),
        prompts: Vec::new(),
        targets: Vec::new(),
        steps: Vec::new(),
    };
    for (z, c, m, p, t, s) in rows {
        batch.latents.push(z);
        batch.conditions.push(c);
        batch.masks.push(m);
        batch.prompts.push(p);
        batch.targets.push(t);
        batch.steps.push(s);
    }
    Ok(batch)
}

pub const DEFAULT_RESIDUAL_THRESHOLD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualReject {
    BelowThreshold,
    EmptyMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualVerdict {
    pub keep: bool,
    pub reason: Option<ResidualReject>,
    /// Normalized mask-weighted mean residual; 0 for an empty mask.
    pub residual: f64,
}

/// Keeps a sample iff the mask-weighted mean `|x_next − x_prev|` reaches
/// `threshold`, i.e. the edit actually changed the targeted region.
pub fn residual_mask_filter(sample: &PairedSample, threshold: f64) -> Result<ResidualVerdict> {
    match semantic_intensity(&sample.x_next, &sample.x_prev, &sample.mask.refined, true) {
        Ok(r) if r >= threshold => Ok(ResidualVerdict {
            keep: true,
            reason: None,
            residual: r,
        }),
        Ok(r) => Ok(ResidualVerdict {
            keep: false,
            reason: Some(ResidualReject::BelowThreshold),
            residual: r,
        }),
        Err(Error::ZeroMask) => Ok(ResidualVerdict {
            keep: false,
            reason: Some(ResidualReject::EmptyMask),
            residual: 0.0,
        }),
        Err(e) => Err(e),
    }
}

/// Mean squared error over every element.
pub fn loss(pred: &Image, target: &Image) -> Result<f64> {
    pred.ensure_same_shape(target, "loss")?;
    let n = pred.data().len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Batch loss and its gradient with respect to every parameter.
pub fn loss_and_grad(model: &ToyModel, batch: &TrainingBatch) -> Result<(f64, Vec<f64>)> {
    let total: usize = batch.targets.iter().map(|t| t.data().len()).sum();
    let scale = 1.0 / total.max(1) as f64;
    let mut sum = 0.0;
    let mut grad = vec![0.0; model.param_count()];
    for i in 0..batch.len() {
        let target = &batch.targets[i];
        let (pred, g) = model.backward(&batch.input(i), |pred| {
            pred.ensure_same_shape(target, "prediction")?;
            pred.zip_map(target, |p, t| 2.0 * (p - t) * scale)
        })?;
        sum += pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        for (acc, v) in grad.iter_mut().zip(g.flat()) {
            *acc += v;
        }
    }
    Ok((sum * scale, grad))
}

pub fn batch_loss(model: &ToyModel, batch: &TrainingBatch) -> Result<f64> {
    let total: usize = batch.targets.iter().map(|t| t.data().len()).sum();
    let mut sum = 0.0;
    for i in 0..batch.len() {
        let pred = model.forward(&batch.input(i))?;
        pred.ensure_same_shape(&batch.targets[i], "prediction")?;
        sum += pred
            .data()
            .iter()
            .zip(batch.targets[i].data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(sum / total.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Optimizer {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    fn new(config: OptimizerConfig, n: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn apply(&mut self, model: &mut ToyModel, grad: &[f64]) {
        self.t += 1;
        for (_, start, end) in model.trainable_ranges() {
            for (k, &g) in grad.iter().enumerate().take(end).skip(start) {
                let update = match self.config {
                    OptimizerConfig::Sgd { lr } => lr * g,
                    OptimizerConfig::Adam {
                        lr,
                        beta1,
                        beta2,
                        eps,
                    } => {
                        self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
                        self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
                        let mh = self.m[k] / (1.0 - beta1.powi(self.t));
                        let vh = self.v[k] / (1.0 - beta2.powi(self.t));
                        lr * mh / (vh.sqrt() + eps)
                    }
                };
                model.set_param(k, model.get_param(k) - update);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub initial_loss: f64,
    /// Mean batch loss at the start of each epoch, then the final loss.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub epochs: usize,
    pub wall_time_secs: f64,
}

impl TrainingReport {
    /// Writes `epoch,loss` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,loss\n");
        for (e, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{e},{l:.12e}\n"));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Full-batch gradient descent over `batches` for `epochs` passes.
///
/// Fails with [`Error::DivergenceDetected`] when the loss becomes
/// non-finite or exceeds ten times its initial value.
pub fn train_toy(
    model: &mut ToyModel,
    batches: &[TrainingBatch],
    epochs: usize,
    optimizer: OptimizerConfig,
) -> Result<TrainingReport> {
    if batches.is_empty() {
        return Err(Error::Config("training needs at least one batch".into()));
    }
    let started = Instant::now();
    let mean_loss = |m: &ToyModel| -> Result<f64> {
        let mut s = 0.0;
        for b in batches {
            s += batch_loss(m, b)?;
        }
        Ok(s / batches.len() as f64)
    };
    let initial = mean_loss(model)?;
    let mut opt = Optimizer::new(optimizer, model.param_count());
    let mut losses = Vec::with_capacity(epochs + 1);
    for epoch in 0..epochs {
        let mut epoch_loss = 0.0;
        for b in batches {
            let (l, g) = loss_and_grad(model, b)?;
            epoch_loss += l;
            opt.apply(model, &g);
        }
        let epoch_loss = epoch_loss / batches.len() as f64;
        if !epoch_loss.is_finite() || (initial > 0.0 && epoch_loss > 10.0 * initial) {
            return Err(Error::DivergenceDetected {
                epoch,
                loss: epoch_loss,
            });
        }
        losses.push(epoch_loss);
    }
    let final_loss = mean_loss(model)?;
    if !final_loss.is_finite() || (initial > 0.0 && final_loss > 10.0 * initial) {
        return Err(Error::DivergenceDetected {
            epoch: epochs,
            loss: final_loss,
        });
    }
    losses.push(final_loss);
    Ok(TrainingReport {
        initial_loss: initial,
        losses,
        final_loss,
        epochs,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradProbe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub probes: Vec<GradProbe>,
}

/// Denominator floor of the relative error, so vanishing gradients are
/// judged on absolute error.
const GRAD_CHECK_FLOOR: f64 = 1e-7;

/// Compares analytic gradients with central differences
/// `(L(θ+h) − L(θ−h)) / 2h` on `probes` randomly chosen trainable parameters.
pub fn grad_check(
    model: &ToyModel,
    batch: &TrainingBatch,
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let candidates: Vec<usize> = model
        .trainable_ranges()
        .into_iter()
        .flat_map(|(_, s, e)| s..e)
        .collect();
    if candidates.is_empty() {
        return Err(Error::Config("no trainable parameters to probe".into()));
    }
    let (_, grad) = loss_and_grad(model, batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, candidates.len(), probes.min(candidates.len()));
    let mut probe_model = model.clone();
    let mut out = Vec::with_capacity(picks.len());
    for p in picks {
        let k = candidates[p];
        let orig = probe_model.get_param(k);
        probe_model.set_param(k, orig + h);
        let plus = batch_loss(&probe_model, batch)?;
        probe_model.set_param(k, orig - h);
        let minus = batch_loss(&probe_model, batch)?;
        probe_model.set_param(k, orig);
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grad[k];
        let relative_error =
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        out.push(GradProbe {
            index: k,
            analytic,
            numeric,
            relative_error,
        });
    }
    Ok(GradCheckReport {
        max_relative_error: out.iter().map(|p| p.relative_error).fold(0.0, f64::max),
        probes: out,
    })
}

/// Self-describing checkpoint: architecture, weights, training setup, seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ToyModel,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub seed: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_slice(&bytes)?;
        c.model.config.validate()?;
        if c.model.layers.len() != c.model.config.depth {
            return Err(Error::Config(
                "checkpoint layer count disagrees with its config".into(),
            ));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::IdentityCodec;
    use crate::forge::{FilterConfig, FilterReport, Provenance, Verdict};
    use crate::gbuffer::{assemble_condition, synthetic};
    use crate::mask::refine_mask;

    pub(crate) fn sample(prev: Image, next: Image, mask: Image, step: usize) -> PairedSample {
        let (w, h) = prev.dims();
        let g = synthetic::scene("t", w, h, 5);
        let mask = refine_mask(&mask, 0.5, 0, 0.0);
        PairedSample {
            condition: assemble_condition(&g, Some(&mask.refined)).unwrap(),
            x_prev: prev,
            x_next: next,
            prompt: "add moss to the wall".into(),
            mask,
            step,
            provenance: Provenance {
                scene_id: "t".into(),
                template_version: "1".into(),
                critiques: Vec::new(),
                targets: Vec::new(),
                filter: FilterReport {
                    verdict: Verdict::Keep,
                    noise_ratio: 1.0,
                    drift_similarity: None,
                    drift_skipped: None,
                    kappa_noise: FilterConfig::default().kappa_noise,
                    kappa_drift: FilterConfig::default().kappa_drift,
                },
                shift: (0, 0),
                alignment_residual: 0.0,
            },
        }
    }

    fn rect_mask(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, 1, |x, y, _| {
            if (2..6).contains(&x) && (2..6).contains(&y) {
                1.0
            } else {
                0.0
            }
        })
    }

    fn opts(dropout: &DropoutSpec) -> BatchOptions<'_> {
        BatchOptions {
            dropout,
            codec: &IdentityCodec,
            embedder: None,
            prompt_dim: 8,
            space: TargetSpace::Pixel,
        }
    }

    #[test]
    fn identity_pair_has_zero_target() {
        let x = Image::from_fn(8, 8, 3, |x, y, _| (x + y) as f64 / 16.0);
        let d = DropoutSpec::uniform(1.0, 0);
        let b =
            make_training_batch(&[sample(x.clone(), x, rect_mask(8, 8), 1)], &opts(&d)).unwrap();
        assert_eq!(b.targets[0].max_abs(), 0.0);
    }

    #[test]
    fn full_retention_keeps_conditions() {
        let x = Image::filled(8, 8, 3, 0.3);
        let s = sample(x.clone(), x, rect_mask(8, 8), 0);
        let d = DropoutSpec::uniform(1.0, 9);
        let b = make_training_batch(std::slice::from_ref(&s), &opts(&d)).unwrap();
        assert_eq!(b.conditions[0], s.condition);
    }

    #[test]
    fn rectangle_delta_is_target() {
        let prev = Image::filled(8, 8, 3, 0.4);
        let m = rect_mask(8, 8);
        let next = Image::from_fn(8, 8, 3, |x, y, _| 0.4 + 0.2 * m.get(x, y, 0));
        let d = DropoutSpec::uniform(0.5, 2);
        let b = make_training_batch(&[sample(prev, next, m.clone(), 1)], &opts(&d)).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    assert!((b.targets[0].get(x, y, c) - 0.2 * m.get(x, y, 0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mismatched_resolutions_fail() {
        let a = sample(
            Image::zeros(8, 8, 3),
            Image::zeros(8, 8, 3),
            rect_mask(8, 8),
            0,
        );
        let b = sample(
            Image::zeros(6, 6, 3),
            Image::zeros(6, 6, 3),
            rect_mask(6, 6),
            0,
        );
        let d = DropoutSpec::uniform(1.0, 0);
        assert!(matches!(
            make_training_batch(&[a, b], &opts(&d)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn residual_filter_cases() {
        let prev = Image::filled(8, 8, 3, 0.2);
        let m = rect_mask(8, 8);
        assert!(
            !residual_mask_filter(&sample(prev.clone(), prev.clone(), m.clone(), 0), 0.02)
                .unwrap()
                .keep
        );
        let inside = Image::from_fn(8, 8, 3, |x, y, _| 0.2 + 0.3 * m.get(x, y, 0));
        let v = residual_mask_filter(&sample(prev.clone(), inside, m.clone(), 0), 0.05).unwrap();
        assert!(v.keep);
        assert!((v.residual - 0.3).abs() < 1e-12);
        let empty =
            residual_mask_filter(&sample(prev.clone(), prev, Image::zeros(8, 8, 1), 0), 0.02)
                .unwrap();
        assert_eq!(empty.reason, Some(ResidualReject::EmptyMask));
    }

    #[test]
    fn loss_closed_forms() {
        let a = Image::filled(3, 2, 3, 0.5);
        assert_eq!(loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((loss(&b, &a).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let prev = Image::filled(8, 8, 3, 0.4);
        let next = Image::filled(8, 8, 3, 0.6);
        let d = DropoutSpec::uniform(1.0, 0);
        let b = make_training_batch(&[sample(prev, next, rect_mask(8, 8), 1)], &opts(&d)).unwrap();
        let mut m = ToyModel::new(ModelConfig::default()).unwrap();
        let r = train_toy(&mut m, &[b], 5, OptimizerConfig::Sgd { lr: 0.0 }).unwrap();
        assert!(r.losses.iter().all(|l| *l == r.initial_loss));
    }

    #[test]
    fn frozen_layers_do_not_move() {
        let prev = Image::filled(8, 8, 3, 0.4);
        let next = Image::filled(8, 8, 3, 0.6);
        let d = DropoutSpec::uniform(1.0, 0);
        let b = make_training_batch(&[sample(prev, next, rect_mask(8, 8), 1)], &opts(&d)).unwrap();
        let mut m = ToyModel::new(ModelConfig {
            frozen: vec![0],
            ..ModelConfig::default()
        })
        .unwrap();
        let before = m.layers[0].clone();
        train_toy(
            &mut m,
            std::slice::from_ref(&b),
            3,
            OptimizerConfig::default(),
        )
        .unwrap();
        assert_eq!(m.layers[0], before);
        let report = grad_check(&m, &b, 20, 1e-4, 1).unwrap();
        let first_trainable = m.layers[0].weights.len() + m.layers[0].bias.len();
        assert!(report.probes.iter().all(|p| p.index >= first_trainable));
        assert!(!report.probes.is_empty());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ToyModel::new(ModelConfig {
            depth: 2,
            width: 4,
            ..ModelConfig::default()
        })
        .unwrap();
        let c = Checkpoint {
            format_version: 1,
            model: m,
            optimizer: OptimizerConfig::default(),
            epochs: 3,
            seed: 7,
        };
        let p = dir.path().join("ck.json");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }
}
