//! Training loop: Adam updates on the noise-prediction objective with
//! independent conditioning dropout.

use super::{ConditionMask, DenoiserError, DenoiserParams, Dense};
use crate::diffusion::{forward_diffuse, simple_loss, NoiseSchedule};
use crate::image::{PoseDelta, ViewSet};
use crate::num::{axpy, Scalar};
use crate::rng::{normal_vec, uniform01};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Fixed number of gradient-accumulation chunks. Chunks are reduced in
/// index order, so the loss sequence is independent of thread count.
const GRAD_CHUNKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Optimizer steps; each step draws a fresh random batch.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Independent drop probability for each condition pathway.
    pub p_drop: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            learning_rate: 1e-3,
            p_drop: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DenoiserError> {
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(DenoiserError::BadTrainConfig(format!(
                "p_drop {} outside [0, 1)",
                self.p_drop
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(DenoiserError::BadTrainConfig(
                "learning rate must be > 0".into(),
            ));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(DenoiserError::BadTrainConfig(
                "steps and batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One training example: a clean scene, the sampled view/timestep, and the
/// noise drawn for every view (the multi-view context needs all of them).
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub views_signed: Vec<Vec<T>>,
    pub ref_signed: Vec<T>,
    pub deltas: Vec<PoseDelta>,
    pub view_index: usize,
    pub t: usize,
    pub eps: Vec<Vec<T>>,
}

/// Draw a batch of `(scene, n, t, eps)` tuples from the dataset.
pub fn make_batch<T: Scalar>(
    scenes: &[ViewSet<T>],
    t_max: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<TrainSample<T>> {
    (0..batch_size)
        .map(|_| {
            let scene = &scenes[rng.gen_range(0..scenes.len())];
            let n_views = scene.len();
            let view_dim = scene.view(0).data().len();
            let view_index = rng.gen_range(0..n_views);
            let t = rng.gen_range(1..=t_max);
            let views_signed: Vec<Vec<T>> = scene.views().iter().map(|v| v.to_signed()).collect();
            let deltas = (0..n_views).map(|n| scene.delta(n)).collect();
            let eps = (0..n_views).map(|_| normal_vec(rng, view_dim)).collect();
            TrainSample {
                ref_signed: views_signed[0].clone(),
                views_signed,
                deltas,
                view_index,
                t,
                eps,
            }
        })
        .collect()
}

/// Parameter-shaped gradient (or moment) buffers.
#[derive(Debug, Clone)]
pub(crate) struct ParamGrads<T> {
    pub w_ref: Vec<T>,
    pub w_mv: Vec<T>,
    pub layers: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(params: &DenoiserParams<T>) -> Self {
        Self {
            w_ref: vec![T::zero(); params.w_ref.len()],
            w_mv: vec![T::zero(); params.w_mv.len()],
            layers: params
                .layers
                .iter()
                .map(|l| (vec![T::zero(); l.w.len()], vec![T::zero(); l.b.len()]))
                .collect(),
        }
    }

    fn add(&mut self, other: &Self) {
        axpy(&mut self.w_ref, T::one(), &other.w_ref);
        axpy(&mut self.w_mv, T::one(), &other.w_mv);
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            axpy(&mut dst.0, T::one(), &src.0);
            axpy(&mut dst.1, T::one(), &src.1);
        }
    }

    pub fn block_slices(&self) -> Vec<&[T]> {
        let mut blocks: Vec<&[T]> = vec![&self.w_ref, &self.w_mv];
        for (w, b) in &self.layers {
            blocks.push(w);
            blocks.push(b);
        }
        blocks
    }

    fn block_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut blocks: Vec<&mut [T]> = vec![&mut self.w_ref, &mut self.w_mv];
        for (w, b) in &mut self.layers {
            blocks.push(w);
            blocks.push(b);
        }
        blocks
    }
}

/// Forward + backward for one sample under an explicit mask.
/// Returns the per-sample loss; accumulates parameter gradients scaled by
/// `grad_scale` (the caller passes `1 / batch_size`).
pub(crate) fn accumulate_sample_grads<T: Scalar>(
    params: &DenoiserParams<T>,
    sample: &TrainSample<T>,
    mask: ConditionMask,
    sched: &NoiseSchedule<T>,
    grad_scale: T,
    grads: &mut ParamGrads<T>,
) -> Result<T, DenoiserError> {
    let cfg = &params.config;
    let view_dim = cfg.view_dim();
    let n = sample.view_index;

    let xt_views: Vec<Vec<T>> = sample
        .views_signed
        .iter()
        .zip(&sample.eps)
        .map(|(x0, eps)| forward_diffuse(x0, sample.t, eps, sched).expect("shapes match"))
        .collect();

    let mean_flat = super::mean_views(&xt_views);
    let ref_proj = if mask.use_ref {
        Some(params.project_ref(&sample.ref_signed)?)
    } else {
        None
    };
    let mv_proj = if mask.use_mv {
        Some(params.project_mv(&mean_flat)?)
    } else {
        None
    };
    let input = params.assemble_input(
        &xt_views[n],
        sample.t,
        sample.deltas[n],
        ref_proj.as_deref(),
        mv_proj.as_deref(),
    );

    // Forward pass keeping post-activation values for backprop.
    let last = params.layers.len() - 1;
    let mut activations: Vec<Vec<T>> = Vec::with_capacity(params.layers.len());
    {
        let mut cur = input.clone();
        let mut next = Vec::new();
        for (i, layer) in params.layers.iter().enumerate() {
            layer.matvec(&cur, &mut next);
            if i != last {
                for v in &mut next {
                    *v = v.tanh();
                }
            }
            activations.push(next.clone());
            std::mem::swap(&mut cur, &mut next);
        }
    }
    let pred = &activations[last];
    let eps_true = &sample.eps[n];
    let loss = simple_loss(eps_true, pred).expect("shapes match");

    // d loss / d pred = 2 (pred - eps) / view_dim, scaled for the batch mean.
    let two_over = T::from_f64_lossy(2.0 / view_dim as f64) * grad_scale;
    let mut delta: Vec<T> = pred
        .iter()
        .zip(eps_true)
        .map(|(&p, &e)| two_over * (p - e))
        .collect();

    // Backward through the trunk.
    for i in (0..params.layers.len()).rev() {
        let layer = &params.layers[i];
        let below: &[T] = if i == 0 { &input } else { &activations[i - 1] };
        let (dw, db) = &mut grads.layers[i];
        for o in 0..layer.out_dim {
            let row = &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim];
            axpy(row, delta[o], below);
            db[o] += delta[o];
        }
        if i == 0 {
            backprop_pathways(params, layer, &delta, sample, &mean_flat, mask, grads);
        } else {
            // delta for the layer below: W^T delta through the tanh.
            let mut next_delta = vec![T::zero(); layer.in_dim];
            for o in 0..layer.out_dim {
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                axpy(&mut next_delta, delta[o], row);
            }
            let act = &activations[i - 1];
            for (d, &a) in next_delta.iter_mut().zip(act) {
                *d *= T::one() - a * a;
            }
            delta = next_delta;
        }
    }
    Ok(loss)
}

/// Gradients of the pathway projection matrices: the chain through the
/// pathway slices of the first trunk layer's input.
fn backprop_pathways<T: Scalar>(
    params: &DenoiserParams<T>,
    first: &Dense<T>,
    delta0: &[T],
    sample: &TrainSample<T>,
    mean_flat: &[T],
    mask: ConditionMask,
    grads: &mut ParamGrads<T>,
) {
    let cfg = &params.config;
    let cond_dim = cfg.cond_dim;
    let view_dim = cfg.view_dim();
    let pathway = |offset: usize, feature: &[T], dw: &mut [T]| {
        for j in 0..cond_dim {
            // d input[offset + j] accumulated over all first-layer outputs.
            let mut g = T::zero();
            for (o, &d) in delta0.iter().enumerate() {
                g += d * first.w[o * first.in_dim + offset + j];
            }
            axpy(&mut dw[j * view_dim..(j + 1) * view_dim], g, feature);
        }
    };
    if mask.use_ref {
        pathway(cfg.offset_ref(), &sample.ref_signed, &mut grads.w_ref);
    }
    if mask.use_mv {
        pathway(cfg.offset_mv(), mean_flat, &mut grads.w_mv);
    }
}

/// Compute the batch loss and gradients under explicit per-sample masks.
pub(crate) fn batch_loss_and_grads<T: Scalar>(
    params: &DenoiserParams<T>,
    batch: &[TrainSample<T>],
    masks: &[ConditionMask],
    sched: &NoiseSchedule<T>,
) -> Result<(T, ParamGrads<T>), DenoiserError> {
    assert_eq!(batch.len(), masks.len());
    let scale = T::from_f64_lossy(1.0 / batch.len() as f64);
    let indexed: Vec<usize> = (0..batch.len()).collect();
    let chunk_size = batch.len().div_ceil(GRAD_CHUNKS);
    let partials: Vec<Result<(T, ParamGrads<T>), DenoiserError>> = indexed
        .par_chunks(chunk_size)
        .map(|chunk| {
            let mut grads = ParamGrads::zeros_like(params);
            let mut loss_sum = T::zero();
            for &i in chunk {
                loss_sum +=
                    accumulate_sample_grads(params, &batch[i], masks[i], sched, scale, &mut grads)?;
            }
            Ok((loss_sum, grads))
        })
        .collect();
    let mut total = ParamGrads::zeros_like(params);
    let mut loss_sum = T::zero();
    for part in partials {
        let (l, g) = part?;
        loss_sum += l;
        total.add(&g);
    }
    Ok((loss_sum * scale, total))
}

/// Adam state plus step counter.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    step_count: usize,
    m: ParamGrads<T>,
    v: ParamGrads<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, params: &DenoiserParams<T>) -> Result<Self, DenoiserError> {
        config.validate()?;
        Ok(Self {
            config,
            step_count: 0,
            m: ParamGrads::zeros_like(params),
            v: ParamGrads::zeros_like(params),
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step_count
    }

    /// One optimizer step: draw dropout masks, accumulate gradients over the
    /// batch, apply the Adam update. Returns the batch loss.
    pub fn train_step(
        &mut self,
        params: &mut DenoiserParams<T>,
        batch: &[TrainSample<T>],
        sched: &NoiseSchedule<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<T, DenoiserError> {
        let masks: Vec<ConditionMask> = batch
            .iter()
            .map(|_| ConditionMask {
                use_ref: uniform01(rng) >= self.config.p_drop,
                use_mv: uniform01(rng) >= self.config.p_drop,
            })
            .collect();
        let (loss, grads) = batch_loss_and_grads(params, batch, &masks, sched)?;
        if !loss.is_finite() {
            let worst = &batch[0];
            return Err(DenoiserError::NonFiniteLoss {
                step: self.step_count + 1,
                t: worst.t,
                view: worst.view_index,
            });
        }
        self.step_count += 1;
        self.apply_adam(params, &grads);
        Ok(loss)
    }

    fn apply_adam(&mut self, params: &mut DenoiserParams<T>, grads: &ParamGrads<T>) {
        let b1 = T::from_f64_lossy(self.config.adam_beta1);
        let b2 = T::from_f64_lossy(self.config.adam_beta2);
        let lr = T::from_f64_lossy(self.config.learning_rate);
        let eps = T::from_f64_lossy(self.config.adam_eps);
        let t = self.step_count as i32;
        let bias1 = T::one() - b1.powi(t);
        let bias2 = T::one() - b2.powi(t);
        let mut p_blocks = params.block_slices_mut();
        let g_blocks = grads.block_slices();
        let mut m_blocks = self.m.block_slices_mut();
        let mut v_blocks = self.v.block_slices_mut();
        for b in 0..p_blocks.len() {
            let p = &mut p_blocks[b];
            let g = g_blocks[b];
            let m = &mut m_blocks[b];
            let v = &mut v_blocks[b];
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Run the full loop over a scene set, returning the loss history.
    pub fn run(
        &mut self,
        params: &mut DenoiserParams<T>,
        scenes: &[ViewSet<T>],
        sched: &NoiseSchedule<T>,
        mut on_step: impl FnMut(usize, f64),
    ) -> Result<Vec<f64>, DenoiserError> {
        let mut rng = crate::rng::stream(self.config.seed, "train", 0);
        let mut history = Vec::with_capacity(self.config.steps);
        for step in 0..self.config.steps {
            let batch = make_batch(scenes, params.config.t_max, self.config.batch_size, &mut rng);
            let loss = self.train_step(params, &batch, sched, &mut rng)?.as_f64();
            history.push(loss);
            on_step(step + 1, loss);
        }
        Ok(history)
    }
}

/// Free-function form of one optimizer step.
pub fn train_step<T: Scalar>(
    trainer: &mut Trainer<T>,
    params: &mut DenoiserParams<T>,
    batch: &[TrainSample<T>],
    sched: &NoiseSchedule<T>,
    rng: &mut ChaCha8Rng,
) -> Result<T, DenoiserError> {
    trainer.train_step(params, batch, sched, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_denoiser, DenoiserConfig};
    use crate::image::Image;
    use crate::rng::stream;

    fn toy_scenes(count: usize, cfg: &DenoiserConfig, seed: u64) -> Vec<ViewSet<f32>> {
        let mut rng = stream(seed, "toy-scenes", 0);
        (0..count)
            .map(|_| {
                let views: Vec<Image<f32>> = (0..cfg.n_views)
                    .map(|_| {
                        let data: Vec<f32> = (0..cfg.view_dim())
                            .map(|_| rng.gen_range(0.0..1.0))
                            .collect();
                        Image::new(cfg.image_size, cfg.image_size, data).unwrap()
                    })
                    .collect();
                ViewSet::circular(views, 30.0).unwrap()
            })
            .collect()
    }

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 4,
            n_views: 4,
            hidden_width: 16,
            hidden_layers: 2,
            time_embed_dim: 8,
            cond_dim: 8,
            t_max: 20,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn loss_sequence_is_reproducible() {
        let cfg = tiny_config();
        let scenes = toy_scenes(4, &cfg, 0);
        let sched = NoiseSchedule::linear(cfg.t_max, cfg.beta_start, cfg.beta_end).unwrap();
        let run = |seed: u64| -> Vec<f32> {
            let mut params = init_denoiser::<f32>(cfg, 1).unwrap();
            let tc = TrainConfig {
                steps: 5,
                batch_size: 4,
                seed,
                ..TrainConfig::default()
            };
            let mut trainer = Trainer::new(tc, &params).unwrap();
            let mut rng = stream(seed, "train", 0);
            (0..5)
                .map(|_| {
                    let batch = make_batch(&scenes, cfg.t_max, 4, &mut rng);
                    trainer.train_step(&mut params, &batch, &sched, &mut rng).unwrap()
                })
                .collect()
        };
        let a = run(9);
        let b = run(9);
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a, run(10));
    }

    #[test]
    fn zero_dropout_keeps_full_branch() {
        // With p_drop = 0 every drawn mask is the full condition.
        let cfg = tiny_config();
        let mut rng = stream(3, "mask", 0);
        for _ in 0..100 {
            let use_ref = uniform01(&mut rng) >= 0.0;
            let use_mv = uniform01(&mut rng) >= 0.0;
            assert!(use_ref && use_mv);
        }
    }

    #[test]
    fn loss_decreases_on_small_dataset() {
        // Median over 3 seeds: loss after 200 steps < loss at step 1.
        let cfg = tiny_config();
        let sched = NoiseSchedule::linear(cfg.t_max, cfg.beta_start, cfg.beta_end).unwrap();
        let mut decreased = 0;
        for seed in [1u64, 2, 3] {
            let scenes = toy_scenes(64, &cfg, seed);
            let mut params = init_denoiser::<f32>(cfg, seed).unwrap();
            let tc = TrainConfig {
                steps: 200,
                batch_size: 8,
                seed,
                ..TrainConfig::default()
            };
            let mut trainer = Trainer::new(tc, &params).unwrap();
            let history = trainer.run(&mut params, &scenes, &sched, |_, _| {}).unwrap();
            if history[199] < history[0] {
                decreased += 1;
            }
        }
        assert!(decreased >= 2, "loss decreased for only {decreased}/3 seeds");
    }

    #[test]
    fn bad_train_config_rejected() {
        let cfg = tiny_config();
        let params = init_denoiser::<f32>(cfg, 1).unwrap();
        for tc in [
            TrainConfig {
                p_drop: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                steps: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(Trainer::new(tc, &params).is_err());
        }
    }
}
