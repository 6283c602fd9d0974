//! Cameras, rays, depth sampling and volumetric compositing.
//!
//! Conventions: pinhole camera looking down `-z` with `y` up in camera space
//! and `y` down in the image; pixel centers sit at `+0.5`. A [`Pose`] maps
//! camera-space points into the canonical head space, where the field lives.
//!
//! Compositing uses the alpha quadrature
//! `α_i = 1 - exp(-σ_i Δ_i)`, `T_i = Π_{j<i} (1 - α_j)`, `w_i = T_i α_i`,
//! with `Δ_i = t_{i+1} - t_i` and the last interval running to the far
//! bound. Whatever transmittance is left after the last sample picks up the
//! background color, which is the same as an opaque final sample.

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::RadianceField;
use crate::raster::{GrayImage, RgbImage};
use crate::real::Real;

/// Mass added to every coarse weight before building the resampling PDF.
pub const WEIGHT_FLOOR: f64 = 1e-5;

/// Rays per work item when rendering images; fixed so that the output does
/// not depend on the number of workers.
pub const RAY_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub z_near: f64,
    pub z_far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) || !(self.z_near > 0.0) || !(self.z_far > self.z_near) {
            return Err(Error::contract(format!(
                "camera needs focal > 0 and 0 < z_near < z_far (focal {}, near {}, far {})",
                self.focal, self.z_near, self.z_far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::contract("camera image is empty"));
        }
        Ok(())
    }

    /// Same optics resampled to a new resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            focal: self.focal * sx,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..*self
        }
    }

    /// Projects a camera-space point to (row, col) image coordinates.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        if p[2] >= 0.0 {
            return None;
        }
        let col = self.cx + self.focal * p[0] / -p[2];
        let row = self.cy - self.focal * p[1] / -p[2];
        Some((row, col))
    }
}

/// Row-major 4×4 rigid transform from camera space to canonical space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose(pub [[f64; 4]; 4]);

pub fn rotation_x(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rotation_y(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn rotation_z(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

impl Pose {
    pub fn identity() -> Self {
        Self::from_parts([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3])
    }

    pub fn from_parts(r: [[f64; 3]; 3], t: [f64; 3]) -> Self {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = t[i];
        }
        m[3][3] = 1.0;
        Self(m)
    }

    pub fn translation_only(t: [f64; 3]) -> Self {
        Self::from_parts(Self::identity().rotation(), t)
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 16 {
            return Err(Error::contract(format!("pose needs 16 numbers, got {}", v.len())));
        }
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row.copy_from_slice(&v[4 * i..4 * i + 4]);
        }
        Ok(Self(m))
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.0[0][3], self.0[1][3], self.0[2][3]]
    }

    /// Checks `RᵀR = I` within `tol`, `det R = +1` and a `(0,0,0,1)` last row.
    pub fn check_rigid(&self, tol: f64) -> std::result::Result<(), String> {
        if self.0.iter().flatten().any(|v| !v.is_finite()) {
            return Err("pose has non-finite entries".into());
        }
        if self.0[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err("pose last row is not (0, 0, 0, 1)".into());
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > tol {
                    return Err(format!("rotation is not orthonormal (RᵀR[{i}][{j}] = {dot})"));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > tol {
            return Err(format!("rotation determinant is {det}, not +1"));
        }
        Ok(())
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        std::array::from_fn(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3])
    }

    pub fn transform_dir(&self, d: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        std::array::from_fn(|i| m[i][0] * d[0] + m[i][1] * d[1] + m[i][2] * d[2])
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut m = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = (0..4).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        Pose(m)
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation();
        let t = self.translation();
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let ti = std::array::from_fn(|i| -(0..3).map(|k| rt[i][k] * t[k]).sum::<f64>());
        Pose::from_parts(rt, ti)
    }
}

/// Edit applied to a pose in canonical space: rotate by
/// `R_yaw · R_pitch · R_roll` about `center`, then translate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseDelta {
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub pitch: f64,
    #[serde(default)]
    pub roll: f64,
    #[serde(default)]
    pub tx: f64,
    #[serde(default)]
    pub ty: f64,
    #[serde(default)]
    pub tz: f64,
}

impl PoseDelta {
    /// Angles are in degrees; yaw turns about `y`, pitch about `x`, roll about `z`.
    pub fn apply(&self, pose: &Pose, center: [f64; 3]) -> Pose {
        let r = mat3_mul(
            &rotation_y(self.yaw.to_radians()),
            &mat3_mul(
                &rotation_x(self.pitch.to_radians()),
                &rotation_z(self.roll.to_radians()),
            ),
        );
        let rc: [f64; 3] = std::array::from_fn(|i| (0..3).map(|k| r[i][k] * center[k]).sum());
        let t = [
            center[0] - rc[0] + self.tx,
            center[1] - rc[1] + self.ty,
            center[2] - rc[2] + self.tz,
        ];
        Pose::from_parts(r, t).compose(pose)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    pub pixel: (usize, usize),
}

impl Ray {
    pub fn at<T: Real>(&self, t: T) -> [T; 3] {
        std::array::from_fn(|i| T::lit(self.origin[i]) + t * T::lit(self.dir[i]))
    }
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Canonical-space ray through the center of `pixel = (row, col)`.
pub fn generate_ray(camera: &Camera, pixel: (usize, usize), pose: &Pose) -> Result<Ray> {
    let (row, col) = pixel;
    if row >= camera.height || col >= camera.width {
        return Err(Error::PixelOutOfBounds {
            row,
            col,
            height: camera.height,
            width: camera.width,
        });
    }
    let d_cam = normalize3([
        (col as f64 + 0.5 - camera.cx) / camera.focal,
        -(row as f64 + 0.5 - camera.cy) / camera.focal,
        -1.0,
    ]);
    Ok(Ray {
        origin: pose.transform_point([0.0; 3]),
        dir: normalize3(pose.transform_dir(d_cam)),
        pixel,
    })
}

/// Where the random numbers for sampling come from.
pub enum Sampling<'a> {
    /// Bin centers for stratified sampling and `u_k = (k + ½)/n` for
    /// resampling; used for rendering and tests.
    Deterministic,
    Random(&'a mut dyn RngCore),
}

impl Sampling<'_> {
    fn offset(&mut self) -> f64 {
        match self {
            Sampling::Deterministic => 0.5,
            Sampling::Random(rng) => rng.gen::<f64>(),
        }
    }
}

/// One depth per equal-width bin of `[near, far]`, ascending.
pub fn sample_stratified<T: Real>(near: T, far: T, n: usize, sampling: &mut Sampling<'_>) -> Vec<T> {
    let width = (far - near) / T::lit(n as f64);
    (0..n)
        .map(|i| {
            let u = T::lit(sampling.offset());
            let t = near + (T::lit(i as f64) + u) * width;
            // keep the jittered sample inside its own bin despite rounding
            let hi = near + T::lit((i + 1) as f64) * width;
            if t >= hi && i + 1 < n {
                hi - hi.abs() * T::epsilon()
            } else {
                t
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeResult<T> {
    pub color: [T; 3],
    pub weights: Vec<T>,
    /// Transmittance reaching each sample (`T_0 = 1`).
    pub transmittance: Vec<T>,
    pub residual_t: T,
    pub depth: T,
}

impl<T: Real> CompositeResult<T> {
    pub fn opacity(&self) -> T {
        self.weights.iter().copied().sum()
    }
}

fn interval_lengths<T: Real>(ts: &[T], far: T) -> Vec<T> {
    let n = ts.len();
    (0..n)
        .map(|i| if i + 1 < n { ts[i + 1] - ts[i] } else { far - ts[i] })
        .collect()
}

fn check_composite_inputs<T: Real>(ts: &[T], sigmas: &[T], rgbs: &[[T; 3]], far: T) -> Result<()> {
    if ts.len() != sigmas.len() || ts.len() != rgbs.len() {
        return Err(Error::contract("composite inputs differ in length"));
    }
    if ts.windows(2).any(|w| !(w[1] >= w[0])) || ts.last().is_some_and(|t| !(*t <= far)) {
        return Err(Error::contract(
            "sample depths must be sorted and not beyond the far bound",
        ));
    }
    if sigmas.iter().any(|s| !(*s >= T::zero())) {
        return Err(Error::contract("densities must be non-negative"));
    }
    Ok(())
}

/// Alpha-composites samples in front of `background`.
pub fn composite<T: Real>(
    ts: &[T],
    sigmas: &[T],
    rgbs: &[[T; 3]],
    far: T,
    background: [T; 3],
) -> Result<CompositeResult<T>> {
    check_composite_inputs(ts, sigmas, rgbs, far)?;
    let deltas = interval_lengths(ts, far);
    let n = ts.len();
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let mut color = [T::zero(); 3];
    let mut trans = T::one();
    let mut depth_num = T::zero();
    for i in 0..n {
        let pass = (-sigmas[i] * deltas[i]).exp();
        let w = trans * (T::one() - pass);
        transmittance.push(trans);
        weights.push(w);
        for c in 0..3 {
            color[c] += w * rgbs[i][c];
        }
        depth_num += w * ts[i];
        trans = trans * pass;
    }
    for c in 0..3 {
        color[c] += trans * background[c];
    }
    let total: T = weights.iter().copied().sum();
    let depth = if total > T::zero() {
        depth_num / total
    } else {
        T::zero()
    };
    Ok(CompositeResult {
        color,
        weights,
        transmittance,
        residual_t: trans,
        depth,
    })
}

/// Reverse pass of [`composite`] for the color output.
///
/// Returns `(∂L/∂σ_i, ∂L/∂rgb_i)`; depths are treated as constants.
pub fn composite_backward<T: Real>(
    ts: &[T],
    rgbs: &[[T; 3]],
    far: T,
    background: [T; 3],
    result: &CompositeResult<T>,
    d_color: [T; 3],
) -> (Vec<T>, Vec<[T; 3]>) {
    let n = ts.len();
    let deltas = interval_lengths(ts, far);
    let mut d_sigma = vec![T::zero(); n];
    let mut d_rgb = vec![[T::zero(); 3]; n];
    // suffix = Σ_{k>i} w_k c_k + T_N · background
    let mut suffix = background.map(|b| b * result.residual_t);
    for i in (0..n).rev() {
        let next_t = if i + 1 < n {
            result.transmittance[i + 1]
        } else {
            result.residual_t
        };
        let mut acc = T::zero();
        for c in 0..3 {
            acc += d_color[c] * (next_t * rgbs[i][c] - suffix[c]);
            d_rgb[i][c] = d_color[c] * result.weights[i];
        }
        d_sigma[i] = deltas[i] * acc;
        for c in 0..3 {
            suffix[c] += result.weights[i] * rgbs[i][c];
        }
    }
    (d_sigma, d_rgb)
}

/// Inverse-transform sampling from the piecewise-constant PDF over the coarse
/// bins, with bin `i` holding mass `w_i + 1e-5`.
///
/// Bin `i` spans the midpoints to the neighbouring coarse samples (clamped to
/// `[near, far]`). All-zero weights fall back to uniform on `[near, far]`.
pub fn importance_resample<T: Real>(
    ts: &[T],
    weights: &[T],
    near: T,
    far: T,
    n: usize,
    sampling: &mut Sampling<'_>,
) -> Vec<T> {
    let m = ts.len();
    if m == 0 || weights.iter().all(|w| *w <= T::zero()) {
        return sample_stratified(near, far, n, sampling);
    }
    let half = T::lit(0.5);
    let mut edges = Vec::with_capacity(m + 1);
    edges.push(near);
    for i in 1..m {
        edges.push(half * (ts[i - 1] + ts[i]));
    }
    edges.push(far);
    let floor = T::lit(WEIGHT_FLOOR);
    let mass: Vec<T> = weights.iter().map(|w| w.max(T::zero()) + floor).collect();
    let total: T = mass.iter().copied().sum();
    let mut cdf = Vec::with_capacity(m + 1);
    cdf.push(T::zero());
    let mut acc = T::zero();
    for w in &mass {
        acc += *w / total;
        cdf.push(acc);
    }

    (0..n)
        .map(|k| {
            let u = (T::lit(k as f64) + T::lit(sampling.offset())) / T::lit(n as f64);
            let u = u.min(cdf[m]);
            // first bin whose upper cdf exceeds u
            let bin = cdf[1..].partition_point(|c| *c <= u).min(m - 1);
            let p = mass[bin] / total;
            let frac = ((u - cdf[bin]) / p).max(T::zero()).min(T::one());
            edges[bin] + frac * (edges[bin + 1] - edges[bin])
        })
        .collect()
}

/// Sorted union of two ascending depth lists.
pub fn merge_sorted<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub n_coarse: usize,
    /// Importance samples added on top of the coarse ones for the fine pass.
    pub n_fine: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_fine: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayRender<T> {
    pub coarse: CompositeResult<T>,
    pub fine: CompositeResult<T>,
    pub coarse_ts: Vec<T>,
    pub fine_ts: Vec<T>,
}

fn query_along<T: Real, F: RadianceField<T> + ?Sized>(
    field: &F,
    rays: &[Ray],
    ts: &[Vec<T>],
) -> Result<(Vec<usize>, crate::field::FieldSamples<T>)> {
    let total: usize = ts.iter().map(Vec::len).sum();
    let mut points = Vec::with_capacity(total);
    let mut dirs = Vec::with_capacity(total);
    let mut offsets = Vec::with_capacity(rays.len() + 1);
    offsets.push(0);
    for (ray, t) in rays.iter().zip(ts) {
        let d = ray.dir.map(T::lit);
        for &ti in t {
            points.push(ray.at(ti));
            dirs.push(d);
        }
        offsets.push(points.len());
    }
    Ok((offsets, field.query(&points, &dirs)?))
}

/// Coarse and fine passes for a bundle of rays, one field query per pass.
#[allow(clippy::too_many_arguments)]
pub fn render_rays<T, C, F>(
    coarse: &C,
    fine: &F,
    rays: &[Ray],
    backgrounds: &[[T; 3]],
    near: T,
    far: T,
    config: &RenderConfig,
    sampling: &mut Sampling<'_>,
) -> Result<Vec<RayRender<T>>>
where
    T: Real,
    C: RadianceField<T> + ?Sized,
    F: RadianceField<T> + ?Sized,
{
    if rays.len() != backgrounds.len() {
        return Err(Error::contract("one background color per ray required"));
    }
    let coarse_ts: Vec<Vec<T>> = rays
        .iter()
        .map(|_| sample_stratified(near, far, config.n_coarse, sampling))
        .collect();
    let (offsets, samples) = query_along(coarse, rays, &coarse_ts)?;
    let mut coarse_results = Vec::with_capacity(rays.len());
    let mut fine_ts = Vec::with_capacity(rays.len());
    for (r, ts) in coarse_ts.iter().enumerate() {
        let span = offsets[r]..offsets[r + 1];
        let res = composite(
            ts,
            &samples.sigma[span.clone()],
            &samples.rgb[span],
            far,
            backgrounds[r],
        )?;
        let extra = importance_resample(ts, &res.weights, near, far, config.n_fine, sampling);
        fine_ts.push(merge_sorted(ts, &extra));
        coarse_results.push(res);
    }
    let (offsets, samples) = query_along(fine, rays, &fine_ts)?;
    let mut out = Vec::with_capacity(rays.len());
    for (r, (coarse, (cts, fts))) in coarse_results
        .into_iter()
        .zip(coarse_ts.into_iter().zip(fine_ts))
        .enumerate()
    {
        let span = offsets[r]..offsets[r + 1];
        let fine = composite(
            &fts,
            &samples.sigma[span.clone()],
            &samples.rgb[span],
            far,
            backgrounds[r],
        )?;
        out.push(RayRender {
            coarse,
            fine,
            coarse_ts: cts,
            fine_ts: fts,
        });
    }
    Ok(out)
}

/// Both passes for one ray.
#[allow(clippy::too_many_arguments)]
pub fn render_ray<T, C, F>(
    coarse: &C,
    fine: &F,
    ray: &Ray,
    background: [T; 3],
    near: T,
    far: T,
    config: &RenderConfig,
    sampling: &mut Sampling<'_>,
) -> Result<(CompositeResult<T>, CompositeResult<T>)>
where
    T: Real,
    C: RadianceField<T> + ?Sized,
    F: RadianceField<T> + ?Sized,
{
    let mut out = render_rays(
        coarse,
        fine,
        std::slice::from_ref(ray),
        &[background],
        near,
        far,
        config,
        sampling,
    )?;
    let r = out.pop().expect("one ray in, one result out");
    Ok((r.coarse, r.fine))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub color: RgbImage,
    /// Expected ray depth, zero where nothing was hit.
    pub depth: GrayImage,
    /// Foreground opacity `Σ w_i`.
    pub alpha: GrayImage,
}

/// Deterministic per-pixel render (fine pass), parallel over fixed ray chunks.
pub fn render_image<T, C, F>(
    coarse: &C,
    fine: &F,
    camera: &Camera,
    pose: &Pose,
    background: &RgbImage,
    config: &RenderConfig,
) -> Result<RenderedImage>
where
    T: Real,
    C: RadianceField<T> + ?Sized,
    F: RadianceField<T> + ?Sized,
{
    camera.validate()?;
    if background.width != camera.width || background.height != camera.height {
        return Err(Error::contract(format!(
            "background is {}x{}, camera is {}x{}",
            background.width, background.height, camera.width, camera.height
        )));
    }
    let pixels: Vec<(usize, usize)> = (0..camera.height)
        .flat_map(|r| (0..camera.width).map(move |c| (r, c)))
        .collect();
    let near = T::lit(camera.z_near);
    let far = T::lit(camera.z_far);
    let chunks: Vec<Vec<RayRender<T>>> = pixels
        .par_chunks(RAY_CHUNK)
        .map(|chunk| -> Result<Vec<RayRender<T>>> {
            let rays = chunk
                .iter()
                .map(|&px| generate_ray(camera, px, pose))
                .collect::<Result<Vec<_>>>()?;
            let bgs: Vec<[T; 3]> = chunk
                .iter()
                .map(|&(r, c)| background.get(r, c).map(|v| T::lit(v as f64)))
                .collect();
            render_rays(
                coarse,
                fine,
                &rays,
                &bgs,
                near,
                far,
                config,
                &mut Sampling::Deterministic,
            )
        })
        .collect::<Result<_>>()?;
    let (w, h) = (camera.width, camera.height);
    let mut color = RgbImage::filled(w, h, [0.0; 3]);
    let mut depth = GrayImage::zeros(w, h);
    let mut alpha = GrayImage::zeros(w, h);
    for (i, r) in chunks.into_iter().flatten().enumerate() {
        color.pixels[i] = r.fine.color.map(|c| c.as_f64() as f32);
        depth.data[i] = r.fine.depth.as_f64() as f32;
        alpha.data[i] = r.fine.opacity().as_f64() as f32;
    }
    Ok(RenderedImage { color, depth, alpha })
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Canonical-space normals from an expected-depth map.
///
/// Each pixel is back-projected along its own ray; tangents are central
/// differences (one-sided at holes and borders) and the normal is oriented
/// toward the camera. Pixels without depth get a zero normal.
pub fn normals_from_depth(depth: &GrayImage, camera: &Camera, pose: &Pose) -> Result<RgbImage> {
    let (w, h) = (depth.width, depth.height);
    if w != camera.width || h != camera.height {
        return Err(Error::contract("depth map and camera differ in size"));
    }
    let mut points = vec![None; w * h];
    let mut dirs = vec![[0.0; 3]; w * h];
    for r in 0..h {
        for c in 0..w {
            let ray = generate_ray(camera, (r, c), pose)?;
            dirs[r * w + c] = ray.dir;
            let d = depth.get(r, c) as f64;
            if d > 0.0 {
                points[r * w + c] = Some(std::array::from_fn(|i| ray.origin[i] + d * ray.dir[i]));
            }
        }
    }
    let at = |r: isize, c: isize| -> Option<[f64; 3]> {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            None
        } else {
            points[r as usize * w + c as usize]
        }
    };
    let tangent = |center: [f64; 3], prev: Option<[f64; 3]>, next: Option<[f64; 3]>| match (prev, next) {
        (Some(p), Some(n)) => Some(sub3(n, p)),
        (None, Some(n)) => Some(sub3(n, center)),
        (Some(p), None) => Some(sub3(center, p)),
        (None, None) => None,
    };
    let mut out = RgbImage::filled(w, h, [0.0; 3]);
    for r in 0..h {
        for c in 0..w {
            let (ri, ci) = (r as isize, c as isize);
            let Some(center) = at(ri, ci) else { continue };
            let (Some(down), Some(right)) = (
                tangent(center, at(ri - 1, ci), at(ri + 1, ci)),
                tangent(center, at(ri, ci - 1), at(ri, ci + 1)),
            ) else {
                continue;
            };
            let mut n = cross3(down, right);
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if len == 0.0 {
                continue;
            }
            let d = dirs[r * w + c];
            if n[0] * d[0] + n[1] * d[1] + n[2] * d[2] > 0.0 {
                n = n.map(|v| -v);
            }
            out.set(r, c, n.map(|v| (v / len) as f32));
        }
    }
    Ok(out)
}
