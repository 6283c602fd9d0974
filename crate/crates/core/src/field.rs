//! The dynamic radiance field: `(position, direction, expression, latent) → (rgb, σ)`.
//!
//! Layout: an encoded position concatenated with the raw expression and
//! latent vectors feeds a ReLU backbone. The backbone's last activation
//! feeds a single-layer ReLU density head and, concatenated with the encoded
//! view direction, a color branch ending in a sigmoid. Direction only
//! reaches the color branch, so density is view-independent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{encode_into, EncodingConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpTape, ParamSet};
use crate::real::Real;

/// Axis-aligned box mapped onto `[-1, 1]³` before encoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }
}

impl Bounds {
    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.min[i].is_finite() && self.max[i].is_finite() && self.max[i] > self.min[i])
    }

    #[inline]
    pub fn normalize<T: Real>(&self, p: [T; 3]) -> [T; 3] {
        let mut out = [T::zero(); 3];
        for i in 0..3 {
            let lo = T::lit(self.min[i]);
            let span = T::lit(self.max[i] - self.min[i]);
            out[i] = T::lit(2.0) * (p[i] - lo) / span - T::one();
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub expr_dim: usize,
    pub latent_dim: usize,
    pub backbone_layers: usize,
    pub backbone_width: usize,
    /// Linear layers in the color branch, including the final `→ 3` layer.
    pub color_layers: usize,
    pub color_width: usize,
    pub encoding: EncodingConfig,
    pub bounds: Bounds,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            expr_dim: 76,
            latent_dim: 32,
            backbone_layers: 8,
            backbone_width: 256,
            color_layers: 4,
            color_width: 128,
            encoding: EncodingConfig::default(),
            bounds: Bounds::default(),
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("expr_dim", self.expr_dim),
            ("latent_dim", self.latent_dim),
            ("backbone_layers", self.backbone_layers),
            ("backbone_width", self.backbone_width),
            ("color_layers", self.color_layers),
            ("color_width", self.color_width),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("field config `{name}` must be at least 1")));
        }
        if !self.bounds.is_valid() {
            return Err(Error::contract("field bounds must be finite with max > min"));
        }
        Ok(())
    }

    /// Width of the backbone's first-layer input.
    pub fn backbone_input_dim(&self) -> usize {
        self.encoding.pos_dim() + self.expr_dim + self.latent_dim
    }

    fn backbone_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.backbone_input_dim()];
        dims.extend(std::iter::repeat_n(self.backbone_width, self.backbone_layers));
        dims
    }

    fn color_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.backbone_width + self.encoding.dir_dim()];
        dims.extend(std::iter::repeat_n(self.color_width, self.color_layers - 1));
        dims.push(3);
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams<T> {
    pub config: FieldConfig,
    pub backbone: Mlp<T>,
    pub density_head: Mlp<T>,
    pub color_branch: Mlp<T>,
}

impl<T: Real> FieldParams<T> {
    pub fn init<R: Rng + ?Sized>(config: FieldConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = Mlp::init(&config.backbone_dims(), Activation::Relu, Activation::Relu, rng)?;
        let density_head = Mlp::init(&[config.backbone_width, 1], Activation::Relu, Activation::Relu, rng)?;
        let color_branch = Mlp::init(&config.color_dims(), Activation::Relu, Activation::Sigmoid, rng)?;
        Ok(Self {
            config,
            backbone,
            density_head,
            color_branch,
        })
    }

    /// Every weight and bias zero.
    pub fn zeros(config: FieldConfig) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut params = Self::init(config, &mut rng)?;
        params.fill_zero();
        Ok(params)
    }

    /// Element-wise conversion between precisions.
    pub fn cast<U: Real>(&self) -> FieldParams<U> {
        let mut out = FieldParams::<U>::zeros(self.config).expect("config already validated");
        for (dst, src) in out.slots_mut().into_iter().zip(self.slots()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::lit(s.as_f64());
            }
        }
        out
    }
}

impl<T: Real> ParamSet<T> for FieldParams<T> {
    fn slots(&self) -> Vec<&[T]> {
        let mut s = self.backbone.slots();
        s.extend(self.density_head.slots());
        s.extend(self.color_branch.slots());
        s
    }

    fn slots_mut(&mut self) -> Vec<&mut [T]> {
        let mut s = self.backbone.slots_mut();
        s.extend(self.density_head.slots_mut());
        s.extend(self.color_branch.slots_mut());
        s
    }

    fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            backbone: self.backbone.zeros_like(),
            density_head: self.density_head.zeros_like(),
            color_branch: self.color_branch.zeros_like(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldOutput<T> {
    pub rgb: [T; 3],
    pub sigma: T,
}

/// Structure-of-arrays field outputs for a batch of points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldSamples<T> {
    pub sigma: Vec<T>,
    pub rgb: Vec<[T; 3]>,
}

impl<T: Copy> FieldSamples<T> {
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn get(&self, i: usize) -> FieldOutput<T> {
        FieldOutput {
            rgb: self.rgb[i],
            sigma: self.sigma[i],
        }
    }
}

/// Anything the renderer can query for density and color.
///
/// The conditioned MLP implements it, and so does the closed-form synthetic
/// scene, which lets the render pipeline be checked against an exact field.
pub trait RadianceField<T: Real>: Sync {
    fn query(&self, points: &[[T; 3]], dirs: &[[T; 3]]) -> Result<FieldSamples<T>>;
}

/// Forward record of one batched field evaluation.
#[derive(Clone, Debug)]
pub struct FieldTape<T> {
    backbone: MlpTape<T>,
    density: MlpTape<T>,
    color: MlpTape<T>,
}

/// Gradients with respect to the conditioning inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningGrads<T> {
    pub delta: Vec<T>,
    pub gamma: Vec<T>,
}

fn check_conditioning<T>(config: &FieldConfig, delta: &[T], gamma: &[T]) -> Result<()> {
    if delta.len() != config.expr_dim || gamma.len() != config.latent_dim {
        return Err(Error::contract(format!(
            "field expects expression dim {} and latent dim {}, got {} and {}",
            config.expr_dim,
            config.latent_dim,
            delta.len(),
            gamma.len()
        )));
    }
    Ok(())
}

fn encode_batch<T: Real>(config: &FieldConfig, points: &[[T; 3]], dirs: &[[T; 3]]) -> (Vec<T>, Vec<T>) {
    let enc = config.encoding;
    let (pd, dd) = (enc.pos_dim(), enc.dir_dim());
    let mut pos = vec![T::zero(); points.len() * pd];
    for (p, out) in points.iter().zip(pos.chunks_exact_mut(pd)) {
        encode_into(config.bounds.normalize(*p), enc.pos_freqs, enc.include_input, out);
    }
    // color input rows are [backbone output | encoded direction]; the
    // backbone part is filled in after the backbone runs
    let w = config.backbone_width;
    let mut color_in = vec![T::zero(); dirs.len() * (w + dd)];
    for (d, row) in dirs.iter().zip(color_in.chunks_exact_mut(w + dd)) {
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let unit = if n > T::zero() {
            [d[0] / n, d[1] / n, d[2] / n]
        } else {
            *d
        };
        encode_into(unit, enc.dir_freqs, enc.include_input, &mut row[w..]);
    }
    (pos, color_in)
}

fn evaluate<T: Real>(
    params: &FieldParams<T>,
    points: &[[T; 3]],
    dirs: &[[T; 3]],
    delta: &[T],
    gamma: &[T],
) -> Result<(FieldSamples<T>, FieldTape<T>)> {
    let config = &params.config;
    check_conditioning(config, delta, gamma)?;
    if points.len() != dirs.len() {
        return Err(Error::contract("points and directions differ in length"));
    }
    let rows = points.len();
    let w = config.backbone_width;
    let (pos, mut color_in) = encode_batch(config, points, dirs);
    let shared: Vec<T> = delta.iter().chain(gamma).copied().collect();
    let backbone = params.backbone.forward_taped(pos, &shared, rows)?;
    let hidden = backbone.output();
    let row_w = w + config.encoding.dir_dim();
    for (h, row) in hidden.chunks_exact(w).zip(color_in.chunks_exact_mut(row_w)) {
        row[..w].copy_from_slice(h);
    }
    let density = params.density_head.forward_taped(hidden.to_vec(), &[], rows)?;
    let color = params.color_branch.forward_taped(color_in, &[], rows)?;
    let samples = FieldSamples {
        sigma: density.output().to_vec(),
        rgb: color.output().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    };
    Ok((
        samples,
        FieldTape {
            backbone,
            density,
            color,
        },
    ))
}

pub fn field_forward<T: Real>(
    params: &FieldParams<T>,
    p: [T; 3],
    v: [T; 3],
    delta: &[T],
    gamma: &[T],
) -> Result<FieldOutput<T>> {
    Ok(field_forward_batch(params, &[p], &[v], delta, gamma)?.get(0))
}

/// Batched evaluation sharing one `(delta, gamma)` across all points.
pub fn field_forward_batch<T: Real>(
    params: &FieldParams<T>,
    points: &[[T; 3]],
    dirs: &[[T; 3]],
    delta: &[T],
    gamma: &[T],
) -> Result<FieldSamples<T>> {
    Ok(evaluate(params, points, dirs, delta, gamma)?.0)
}

pub fn field_forward_taped<T: Real>(
    params: &FieldParams<T>,
    points: &[[T; 3]],
    dirs: &[[T; 3]],
    delta: &[T],
    gamma: &[T],
) -> Result<(FieldSamples<T>, FieldTape<T>)> {
    evaluate(params, points, dirs, delta, gamma)
}

/// Reverse pass: accumulates parameter gradients into `grads` and returns
/// the gradients of the expression and latent inputs.
pub fn field_backward<T: Real>(
    params: &FieldParams<T>,
    tape: &FieldTape<T>,
    d_sigma: &[T],
    d_rgb: &[[T; 3]],
    grads: &mut FieldParams<T>,
) -> Result<ConditioningGrads<T>> {
    let rows = tape.backbone.rows;
    if d_sigma.len() != rows || d_rgb.len() != rows {
        return Err(Error::contract("upstream gradient length does not match the tape"));
    }
    let w = params.config.backbone_width;
    let row_w = w + params.config.encoding.dir_dim();
    let d_rgb_flat: Vec<T> = d_rgb.iter().flatten().copied().collect();
    let color_grad = params
        .color_branch
        .backward(&tape.color, &d_rgb_flat, &mut grads.color_branch, true)?;
    let density_grad = params
        .density_head
        .backward(&tape.density, d_sigma, &mut grads.density_head, true)?;
    let mut d_hidden = density_grad.rows;
    for (dh, dc) in d_hidden.chunks_exact_mut(w).zip(color_grad.rows.chunks_exact(row_w)) {
        for (a, b) in dh.iter_mut().zip(&dc[..w]) {
            *a += *b;
        }
    }
    let backbone_grad = params
        .backbone
        .backward(&tape.backbone, &d_hidden, &mut grads.backbone, false)?;
    let (delta, gamma) = backbone_grad.shared.split_at(params.config.expr_dim);
    Ok(ConditioningGrads {
        delta: delta.to_vec(),
        gamma: gamma.to_vec(),
    })
}

/// The MLP bound to one frame's expression and latent code.
pub struct ConditionedField<'a, T> {
    pub params: &'a FieldParams<T>,
    pub delta: &'a [T],
    pub gamma: &'a [T],
}

impl<T: Real> RadianceField<T> for ConditionedField<'_, T> {
    fn query(&self, points: &[[T; 3]], dirs: &[[T; 3]]) -> Result<FieldSamples<T>> {
        field_forward_batch(self.params, points, dirs, self.delta, self.gamma)
    }
}
