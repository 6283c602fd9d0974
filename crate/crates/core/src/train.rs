//! Ray batching, the two-network photometric loss, optimization and
//! evaluation.
//!
//! The per-batch loss is a plain sum over rays,
//! `Σ_j ‖C_coarse − I‖² + ‖C_fine − I‖²`, plus `λ‖γ‖²` on the frame's latent
//! row. Fine-pass sample depths come from the detached coarse weights, so no
//! gradient flows through resampling.

use std::time::Instant;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Frame, FrameRecord, Split};
use crate::error::{Error, Result};
use crate::field::{field_backward, field_forward_taped, ConditionedField, FieldConfig, FieldParams};
use crate::metrics;
use crate::nn::{adam_step, AdamConfig, AdamState, ParamSet};
use crate::raster::RgbImage;
use crate::real::Real;
use crate::render::{
    composite, composite_backward, generate_ray, importance_resample, merge_sorted, render_image, sample_stratified,
    Camera, Pose, Ray, RenderConfig, RenderedImage, Sampling, RAY_CHUNK,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rays_per_batch: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub lr: f64,
    /// Adam step size for latent rows; `None` uses `lr`.
    pub latent_lr: Option<f64>,
    /// λ of the `λ‖γ‖²` penalty.
    pub latent_decay: f64,
    /// Share of each batch drawn inside the frame's bounding box.
    pub bbox_fraction: f64,
    pub iterations: u64,
    pub seed: u64,
    /// Iterations between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
    /// With `false` latent rows stay at zero (the no-latent ablation).
    pub learn_latents: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rays_per_batch: 2048,
            n_coarse: 64,
            n_fine: 64,
            lr: 5e-4,
            latent_lr: None,
            latent_decay: 0.05,
            bbox_fraction: 0.95,
            iterations: 400_000,
            seed: 0,
            checkpoint_interval: 10_000,
            learn_latents: true,
        }
    }
}

impl TrainConfig {
    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rays_per_batch == 0 || self.n_coarse == 0 {
            return Err(Error::contract("batch size and coarse sample count must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bbox_fraction) {
            return Err(Error::contract("bbox_fraction must lie in [0, 1]"));
        }
        let lrs = [Some(self.lr), self.latent_lr, Some(self.latent_decay)];
        if lrs.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::contract(
                "learning rates and latent decay must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Small networks for CPU-scale experiments on the synthetic scenes.
pub fn desk_field_config(expr_dim: usize) -> FieldConfig {
    use crate::encoding::EncodingConfig;
    FieldConfig {
        expr_dim,
        latent_dim: 8,
        backbone_layers: 3,
        backbone_width: 32,
        color_layers: 2,
        color_width: 32,
        encoding: EncodingConfig {
            pos_freqs: 6,
            dir_freqs: 2,
            include_input: true,
        },
        ..FieldConfig::default()
    }
}

/// Batch size and sample counts used with [`desk_field_config`].
pub fn desk_train_config(seed: u64, iterations: u64) -> TrainConfig {
    TrainConfig {
        rays_per_batch: 512,
        n_coarse: 16,
        n_fine: 16,
        lr: 2e-3,
        iterations,
        seed,
        checkpoint_interval: 0,
        ..TrainConfig::default()
    }
}

/// One learnable code per training frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable<T> {
    pub dim: usize,
    pub rows: Vec<Vec<T>>,
}

impl<T: Real> LatentTable<T> {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            dim,
            rows: vec![vec![T::zero(); dim]; rows],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub coarse: FieldParams<f32>,
    pub fine: FieldParams<f32>,
    pub latents: LatentTable<f32>,
    pub adam_coarse: AdamState<f32>,
    pub adam_fine: AdamState<f32>,
    /// One state per latent row, so a step only touches the sampled row.
    pub adam_latents: Vec<AdamState<f32>>,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh networks drawn from `config.seed`; latent rows start at zero.
    pub fn new(field: FieldConfig, config: TrainConfig, latent_rows: usize) -> Result<Self> {
        field.validate()?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let coarse = FieldParams::init(field, &mut rng)?;
        let fine = FieldParams::init(field, &mut rng)?;
        let latents = LatentTable::zeros(latent_rows, field.latent_dim);
        let net = AdamConfig::default().with_lr(config.lr);
        let latent = AdamConfig::default().with_lr(config.latent_lr.unwrap_or(config.lr));
        Ok(Self {
            adam_coarse: AdamState::new("coarse", &coarse, net),
            adam_fine: AdamState::new("fine", &fine, net),
            adam_latents: latents
                .rows
                .iter()
                .enumerate()
                .map(|(i, r)| AdamState::new(format!("latent[{i}]"), r, latent))
                .collect(),
            config,
            coarse,
            fine,
            latents,
            iteration: 0,
            rng,
        })
    }

    pub fn field_config(&self) -> &FieldConfig {
        &self.coarse.config
    }

    /// Checks that a dataset fits this state's shapes.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let cfg = self.field_config();
        if dataset.header.expr_dim != cfg.expr_dim {
            return Err(Error::InvalidDataset(format!(
                "dataset expression size {} does not match the model's {}",
                dataset.header.expr_dim, cfg.expr_dim
            )));
        }
        if dataset.latent_count() != self.latents.rows.len() {
            return Err(Error::InvalidDataset(format!(
                "dataset has {} training frames, model has {} latent rows",
                dataset.latent_count(),
                self.latents.rows.len()
            )));
        }
        Ok(())
    }
}

/// Training frame (by latent row) visited at `iteration`: a fixed
/// permutation per epoch, reshuffled every epoch from the seed.
pub fn scheduled_frame(seed: u64, iteration: u64, frames: usize) -> usize {
    let n = frames as u64;
    let epoch = iteration / n;
    let mut order: Vec<usize> = (0..frames).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f4a3_e000_0000);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order[(iteration % n) as usize]
}

/// Pixel coordinates `(row, col)` for one batch: `⌈fraction·N⌉` uniform inside
/// the frame's box, the rest uniform over the image.
pub fn sample_ray_batch<R: Rng + ?Sized>(
    record: &FrameRecord,
    camera: &Camera,
    config: &TrainConfig,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let n = config.rays_per_batch;
    let b = record.bbox;
    let in_box = if b.is_empty() {
        warn!(
            "frame {} has an empty bounding box; sampling the whole image",
            record.id
        );
        0
    } else {
        ((config.bbox_fraction * n as f64).ceil() as usize).min(n)
    };
    let mut out = Vec::with_capacity(n);
    for _ in 0..in_box {
        out.push((rng.gen_range(b.row0..b.row1), rng.gen_range(b.col0..b.col1)));
    }
    for _ in in_box..n {
        out.push((rng.gen_range(0..camera.height), rng.gen_range(0..camera.width)));
    }
    out
}

/// Rays with their target and background colors.
#[derive(Clone, Debug)]
pub struct RayBatch<T> {
    pub rays: Vec<Ray>,
    pub targets: Vec<[T; 3]>,
    pub backgrounds: Vec<[T; 3]>,
}

impl<T: Real> RayBatch<T> {
    pub fn for_frame(dataset: &Dataset, frame: &Frame, pixels: &[(usize, usize)]) -> Result<Self> {
        let camera = dataset.camera();
        let to_t = |p: [f32; 3]| p.map(|v| T::lit(v as f64));
        let mut batch = Self {
            rays: Vec::with_capacity(pixels.len()),
            targets: Vec::with_capacity(pixels.len()),
            backgrounds: Vec::with_capacity(pixels.len()),
        };
        for &(r, c) in pixels {
            batch.rays.push(generate_ray(camera, (r, c), &frame.record.pose)?);
            batch.targets.push(to_t(frame.image.get(r, c)));
            batch.backgrounds.push(to_t(dataset.background.get(r, c)));
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    fn slice(&self, range: std::ops::Range<usize>) -> RayBatch<T> {
        RayBatch {
            rays: self.rays[range.clone()].to_vec(),
            targets: self.targets[range.clone()].to_vec(),
            backgrounds: self.backgrounds[range].to_vec(),
        }
    }
}

/// Loss terms of one batch (sums over rays).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub coarse: f64,
    pub fine: f64,
    pub latent: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.coarse + self.fine + self.latent
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub coarse: FieldParams<T>,
    pub fine: FieldParams<T>,
    /// Gradient for the frame's latent row.
    pub gamma: Vec<T>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_for(coarse: &FieldParams<T>, fine: &FieldParams<T>) -> Self {
        Self {
            coarse: coarse.zeros_like(),
            fine: fine.zeros_like(),
            gamma: vec![T::zero(); coarse.config.latent_dim],
        }
    }

    fn accumulate(&mut self, other: &Self) {
        self.coarse.accumulate(&other.coarse);
        self.fine.accumulate(&other.fine);
        for (a, b) in self.gamma.iter_mut().zip(&other.gamma) {
            *a += *b;
        }
    }
}

/// Forward, composite and reverse for one pass over fixed sample depths.
/// Returns the summed squared error.
#[allow(clippy::too_many_arguments)]
fn pass_loss<T: Real>(
    params: &FieldParams<T>,
    batch: &RayBatch<T>,
    ts: &[Vec<T>],
    delta: &[T],
    gamma: &[T],
    far: T,
    grads: &mut FieldParams<T>,
    d_gamma: &mut [T],
) -> Result<(f64, Vec<Vec<T>>)> {
    let total: usize = ts.iter().map(Vec::len).sum();
    let mut points = Vec::with_capacity(total);
    let mut dirs = Vec::with_capacity(total);
    for (ray, t) in batch.rays.iter().zip(ts) {
        let d = ray.dir.map(T::lit);
        for &ti in t {
            points.push(ray.at(ti));
            dirs.push(d);
        }
    }
    let (samples, tape) = field_forward_taped(params, &points, &dirs, delta, gamma)?;
    let mut d_sigma = Vec::with_capacity(total);
    let mut d_rgb = Vec::with_capacity(total);
    let mut loss = 0.0;
    let mut weights = Vec::with_capacity(batch.len());
    let mut start = 0;
    for (r, t) in ts.iter().enumerate() {
        let span = start..start + t.len();
        start = span.end;
        let rgbs = &samples.rgb[span.clone()];
        let res = composite(t, &samples.sigma[span], rgbs, far, batch.backgrounds[r])?;
        let mut d_color = [T::zero(); 3];
        for c in 0..3 {
            let e = res.color[c] - batch.targets[r][c];
            loss += (e * e).as_f64();
            d_color[c] = T::lit(2.0) * e;
        }
        let (ds, dc) = composite_backward(t, rgbs, far, batch.backgrounds[r], &res, d_color);
        d_sigma.extend(ds);
        d_rgb.extend(dc);
        weights.push(res.weights);
    }
    let cond = field_backward(params, &tape, &d_sigma, &d_rgb, grads)?;
    for (a, b) in d_gamma.iter_mut().zip(&cond.gamma) {
        *a += *b;
    }
    Ok((loss, weights))
}

/// Photometric loss of both passes over one set of rays, without the latent
/// penalty; gradients are added to `grads`.
///
/// Coarse depths come from `sampling`. Fine depths are the union of the
/// coarse depths and importance samples of the (detached) coarse weights,
/// unless `fixed_fine` supplies them. Returns `(coarse, fine, fine depths)`.
#[allow(clippy::too_many_arguments)]
pub fn ray_loss<T: Real>(
    coarse: &FieldParams<T>,
    fine: &FieldParams<T>,
    batch: &RayBatch<T>,
    delta: &[T],
    gamma: &[T],
    near: T,
    far: T,
    render: &RenderConfig,
    sampling: &mut Sampling<'_>,
    fixed_fine: Option<&[Vec<T>]>,
    grads: &mut Gradients<T>,
) -> Result<(f64, f64, Vec<Vec<T>>)> {
    let coarse_ts: Vec<Vec<T>> = (0..batch.len())
        .map(|_| sample_stratified(near, far, render.n_coarse, sampling))
        .collect();
    let (loss_c, weights) = pass_loss(
        coarse,
        batch,
        &coarse_ts,
        delta,
        gamma,
        far,
        &mut grads.coarse,
        &mut grads.gamma,
    )?;
    let fine_ts: Vec<Vec<T>> = match fixed_fine {
        Some(ts) => {
            if ts.len() != batch.len() {
                return Err(Error::contract("one fixed depth list per ray required"));
            }
            ts.to_vec()
        }
        None => coarse_ts
            .iter()
            .zip(&weights)
            .map(|(ts, w)| merge_sorted(ts, &importance_resample(ts, w, near, far, render.n_fine, sampling)))
            .collect(),
    };
    let (loss_f, _) = pass_loss(
        fine,
        batch,
        &fine_ts,
        delta,
        gamma,
        far,
        &mut grads.fine,
        &mut grads.gamma,
    )?;
    Ok((loss_c, loss_f, fine_ts))
}

/// Adds `λ‖γ‖²` and its gradient `2λγ`; returns the penalty.
pub fn latent_penalty<T: Real>(gamma: &[T], decay: f64, d_gamma: &mut [T]) -> f64 {
    let lambda = T::lit(decay);
    let mut penalty = T::zero();
    for (g, d) in gamma.iter().zip(d_gamma.iter_mut()) {
        penalty += lambda * *g * *g;
        *d += T::lit(2.0) * lambda * *g;
    }
    penalty.as_f64()
}

/// Full batch loss and gradients: rays split into fixed chunks evaluated in
/// parallel, chunk `k` drawing its samples from stream `k` of `seed`, and
/// chunk gradients reduced in chunk order.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<T: Real>(
    coarse: &FieldParams<T>,
    fine: &FieldParams<T>,
    batch: &RayBatch<T>,
    delta: &[T],
    gamma: &[T],
    near: f64,
    far: f64,
    render: &RenderConfig,
    latent_decay: f64,
    seed: u64,
) -> Result<(LossTerms, Gradients<T>)> {
    let chunks: Vec<std::ops::Range<usize>> = (0..batch.len())
        .step_by(RAY_CHUNK)
        .map(|s| s..(s + RAY_CHUNK).min(batch.len()))
        .collect();
    let partial: Vec<(f64, f64, Gradients<T>)> = chunks
        .into_par_iter()
        .enumerate()
        .map(|(k, range)| -> Result<_> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut grads = Gradients::zeros_for(coarse, fine);
            let (c, f, _) = ray_loss(
                coarse,
                fine,
                &batch.slice(range),
                delta,
                gamma,
                T::lit(near),
                T::lit(far),
                render,
                &mut Sampling::Random(&mut rng),
                None,
                &mut grads,
            )?;
            Ok((c, f, grads))
        })
        .collect::<Result<_>>()?;
    let mut terms = LossTerms::default();
    let mut grads = Gradients::zeros_for(coarse, fine);
    for (c, f, g) in &partial {
        terms.coarse += c;
        terms.fine += f;
        grads.accumulate(g);
    }
    terms.latent = latent_penalty(gamma, latent_decay, &mut grads.gamma);
    Ok((terms, grads))
}

/// Loss and gradients of the current state on given pixels of one training
/// frame.
pub fn compute_loss(
    state: &TrainState,
    dataset: &Dataset,
    frame: &Frame,
    pixels: &[(usize, usize)],
    seed: u64,
) -> Result<(LossTerms, Gradients<f32>)> {
    let row = frame
        .record
        .latent_index
        .ok_or_else(|| Error::contract(format!("frame {} is not a training frame", frame.record.id)))?;
    let batch = RayBatch::<f32>::for_frame(dataset, frame, pixels)?;
    let delta: Vec<f32> = frame.record.expression.iter().map(|v| *v as f32).collect();
    let cam = dataset.camera();
    batch_loss(
        &state.coarse,
        &state.fine,
        &batch,
        &delta,
        &state.latents.rows[row],
        cam.z_near,
        cam.z_far,
        &state.config.render_config(),
        state.config.latent_decay,
        seed,
    )
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iter: u64,
    pub loss_coarse: f64,
    pub loss_fine: f64,
    pub loss_latent: f64,
    pub wall_ms: f64,
}

/// One optimization step: scheduled frame, sampled batch, loss, and one Adam
/// update per group (only the visited frame's latent row moves).
pub fn train_step(state: &mut TrainState, dataset: &Dataset) -> Result<LossReport> {
    let start = Instant::now();
    let train = dataset.train_frames();
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let row = scheduled_frame(state.config.seed, state.iteration, train.len());
    let frame = train[row];
    let pixels = sample_ray_batch(&frame.record, dataset.camera(), &state.config, &mut state.rng);
    let seed = state.rng.next_u64();
    let (terms, grads) = compute_loss(state, dataset, frame, &pixels, seed)?;
    if !terms.total().is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: state.iteration,
        });
    }
    // validate every group before touching any of them
    for (g, name) in [(grads.coarse.is_finite(), "coarse"), (grads.fine.is_finite(), "fine")] {
        if !g {
            return Err(Error::NonFiniteGradient {
                group: name.into(),
                slot: 0,
            });
        }
    }
    adam_step(&mut state.coarse, &grads.coarse, &mut state.adam_coarse)?;
    adam_step(&mut state.fine, &grads.fine, &mut state.adam_fine)?;
    if state.config.learn_latents {
        adam_step(&mut state.latents.rows[row], &grads.gamma, &mut state.adam_latents[row])?;
    }
    state.iteration += 1;
    Ok(LossReport {
        iter: state.iteration,
        loss_coarse: terms.coarse,
        loss_fine: terms.fine,
        loss_latent: terms.latent,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Runs steps until `state.iteration == until`, calling `on_step` after each.
pub fn train_until<F>(state: &mut TrainState, dataset: &Dataset, until: u64, mut on_step: F) -> Result<()>
where
    F: FnMut(&TrainState, &LossReport) -> Result<()>,
{
    state.check_dataset(dataset)?;
    while state.iteration < until {
        let report = train_step(state, dataset)?;
        on_step(state, &report)?;
    }
    Ok(())
}

/// Which latent code renders a frame during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentPolicy {
    /// Training frames use their own row; other frames use row 0.
    PerFrame,
    /// Every frame uses the first training frame's row.
    FirstTrainFrame,
}

impl LatentPolicy {
    pub fn row_for(self, record: &FrameRecord) -> usize {
        match (self, record.latent_index) {
            (LatentPolicy::PerFrame, Some(i)) => i,
            _ => 0,
        }
    }
}

/// Deterministic fine-pass render of the state's networks.
pub fn render_view(
    state: &TrainState,
    camera: &Camera,
    pose: &Pose,
    expression: &[f64],
    gamma: &[f32],
    background: &RgbImage,
) -> Result<RenderedImage> {
    let delta: Vec<f32> = expression.iter().map(|v| *v as f32).collect();
    let coarse = ConditionedField {
        params: &state.coarse,
        delta: &delta,
        gamma,
    };
    let fine = ConditionedField {
        params: &state.fine,
        delta: &delta,
        gamma,
    };
    render_image(&coarse, &fine, camera, pose, background, &state.config.render_config())
}

/// Latent row for a policy, or zeros when the table is empty.
pub fn latent_for(state: &TrainState, record: &FrameRecord, policy: LatentPolicy) -> Vec<f32> {
    state
        .latents
        .rows
        .get(policy.row_for(record))
        .cloned()
        .unwrap_or_else(|| vec![0.0; state.latents.dim])
}

pub fn render_frame(
    state: &TrainState,
    dataset: &Dataset,
    frame: &Frame,
    policy: LatentPolicy,
) -> Result<RenderedImage> {
    render_view(
        state,
        dataset.camera(),
        &frame.record.pose,
        &frame.record.expression,
        &latent_for(state, &frame.record, policy),
        &dataset.background,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub id: usize,
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub policy: LatentPolicy,
    pub frames: usize,
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub per_frame: Vec<FrameMetrics>,
}

/// Renders every frame of a split and averages L1, PSNR and SSIM.
pub fn evaluate(state: &TrainState, dataset: &Dataset, split: Split, policy: LatentPolicy) -> Result<EvalReport> {
    let frames: Vec<&Frame> = dataset.split(split).collect();
    if frames.is_empty() {
        return Err(Error::EmptySplit(format!("{split:?}").to_lowercase()));
    }
    let mut per_frame = Vec::with_capacity(frames.len());
    for f in &frames {
        let out = render_frame(state, dataset, f, policy)?;
        per_frame.push(FrameMetrics {
            id: f.record.id,
            l1: metrics::l1(&out.color, &f.image),
            psnr: metrics::psnr(&out.color, &f.image),
            ssim: metrics::ssim(&out.color, &f.image),
        });
    }
    let n = per_frame.len() as f64;
    Ok(EvalReport {
        split,
        policy,
        frames: per_frame.len(),
        l1: per_frame.iter().map(|m| m.l1).sum::<f64>() / n,
        psnr: per_frame.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: per_frame.iter().map(|m| m.ssim).sum::<f64>() / n,
        per_frame,
    })
}
