//! A loaded checkpoint plus its dataset, and the render request both the
//! command line and the HTTP service go through.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use dynfield::checkpoint::load_checkpoint;
use dynfield::data::{load_dataset, Dataset};
use dynfield::render::{normals_from_depth, PoseDelta};
use dynfield::train::{latent_for, render_view, LatentPolicy, TrainState};
use serde::{Deserialize, Serialize};

pub const MIN_RESOLUTION: usize = 16;
pub const MAX_RESOLUTION: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Color,
    Depth,
    Normals,
    Alpha,
}

impl OutputKind {
    pub fn name(self) -> &'static str {
        match self {
            OutputKind::Color => "color",
            OutputKind::Depth => "depth",
            OutputKind::Normals => "normals",
            OutputKind::Alpha => "alpha",
        }
    }
}

/// Either a full expression vector or sparse `{index: value}` overrides on
/// the base frame's expression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExpressionEdit {
    Full(Vec<f64>),
    Overrides(BTreeMap<String, f64>),
}

fn default_outputs() -> Vec<OutputKind> {
    vec![OutputKind::Color]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    #[serde(default)]
    pub base_frame: usize,
    #[serde(default)]
    pub expression: Option<ExpressionEdit>,
    #[serde(default)]
    pub pose_delta: PoseDelta,
    /// Output width in pixels; height keeps the dataset's aspect ratio.
    #[serde(default)]
    pub resolution: Option<usize>,
    #[serde(default = "default_outputs")]
    pub outputs: Vec<OutputKind>,
}

impl Default for RenderRequest {
    fn default() -> Self {
        Self {
            base_frame: 0,
            expression: None,
            pose_delta: PoseDelta::default(),
            resolution: None,
            outputs: default_outputs(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Engine(#[from] dynfield::Error),
}

fn invalid(msg: impl Into<String>) -> RenderError {
    RenderError::Invalid(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendshapeHint {
    pub index: usize,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Info {
    pub expr_dim: usize,
    pub latent_dim: usize,
    pub frame_count: usize,
    pub native_resolution: [usize; 2],
    pub min_resolution: usize,
    pub max_resolution: usize,
    pub blendshape_hints: Vec<BlendshapeHint>,
    /// How pose deltas are applied.
    pub pose_convention: String,
}

pub struct Avatar {
    pub state: TrainState,
    pub dataset: Dataset,
}

impl Avatar {
    pub fn load(checkpoint: &Path, data: &Path) -> dynfield::Result<Self> {
        let state = load_checkpoint(checkpoint)?;
        let dataset = load_dataset(data)?;
        if dataset.header.expr_dim != state.field_config().expr_dim {
            return Err(dynfield::Error::InvalidDataset(format!(
                "dataset expression size {} does not match the checkpoint's {}",
                dataset.header.expr_dim,
                state.field_config().expr_dim
            )));
        }
        Ok(Self { state, dataset })
    }

    pub fn info(&self) -> Info {
        let cam = self.dataset.camera();
        let expr_dim = self.dataset.header.expr_dim;
        Info {
            expr_dim,
            latent_dim: self.state.field_config().latent_dim,
            frame_count: self.dataset.frames.len(),
            native_resolution: [cam.width, cam.height],
            min_resolution: MIN_RESOLUTION,
            max_resolution: MAX_RESOLUTION,
            blendshape_hints: (0..expr_dim.min(10))
                .map(|index| BlendshapeHint {
                    index,
                    label: format!("coefficient {index}"),
                })
                .collect(),
            pose_convention: "R_yaw·R_pitch·R_roll (degrees) about the scene-bounds center, then translate; \
                              applied in canonical space"
                .into(),
        }
    }

    /// Canonical-space point pose edits rotate about.
    pub fn edit_center(&self) -> [f64; 3] {
        let b = self.dataset.header.bounds;
        std::array::from_fn(|i| 0.5 * (b.min[i] + b.max[i]))
    }

    fn expression_for(&self, base: &[f64], edit: &Option<ExpressionEdit>) -> Result<Vec<f64>, RenderError> {
        let dim = self.dataset.header.expr_dim;
        let expr = match edit {
            None => base.to_vec(),
            Some(ExpressionEdit::Full(v)) => {
                if v.len() != dim {
                    return Err(invalid(format!("expression needs {dim} values, got {}", v.len())));
                }
                v.clone()
            }
            Some(ExpressionEdit::Overrides(map)) => {
                let mut e = base.to_vec();
                for (k, v) in map {
                    let i: usize = k
                        .trim_start_matches('+')
                        .parse()
                        .map_err(|_| invalid(format!("expression index `{k}` is not a number")))?;
                    if i >= dim {
                        return Err(invalid(format!("expression index {i} out of range (dim {dim})")));
                    }
                    e[i] = *v;
                }
                e
            }
        };
        if expr.iter().any(|v| !v.is_finite()) {
            return Err(invalid("expression values must be finite"));
        }
        Ok(expr)
    }

    /// Renders the requested outputs as PNG bytes, in request order.
    pub fn render(&self, req: &RenderRequest) -> Result<Vec<(OutputKind, Vec<u8>)>, RenderError> {
        let frame = self.dataset.frames.get(req.base_frame).ok_or_else(|| {
            invalid(format!(
                "base_frame {} out of range ({} frames)",
                req.base_frame,
                self.dataset.frames.len()
            ))
        })?;
        if req.outputs.is_empty() {
            return Err(invalid("at least one output is required"));
        }
        if req.outputs.iter().collect::<BTreeSet<_>>().len() != req.outputs.len() {
            return Err(invalid("outputs must not repeat"));
        }
        let d = req.pose_delta;
        if [d.yaw, d.pitch, d.roll, d.tx, d.ty, d.tz]
            .iter()
            .any(|v| !v.is_finite())
        {
            return Err(invalid("pose_delta values must be finite"));
        }
        let native = *self.dataset.camera();
        let width = req.resolution.unwrap_or(native.width);
        if !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(&width) {
            return Err(invalid(format!(
                "resolution {width} outside [{MIN_RESOLUTION}, {MAX_RESOLUTION}]"
            )));
        }
        let height = ((width * native.height) as f64 / native.width as f64).round().max(1.0) as usize;
        let camera = native.resized(width, height);
        let background = self.dataset.background.resized(width, height);
        let expression = self.expression_for(&frame.record.expression, &req.expression)?;
        let pose = d.apply(&frame.record.pose, self.edit_center());
        let gamma = latent_for(&self.state, &frame.record, LatentPolicy::PerFrame);
        let out = render_view(&self.state, &camera, &pose, &expression, &gamma, &background)?;
        let mut images = Vec::with_capacity(req.outputs.len());
        for kind in &req.outputs {
            let bytes = match kind {
                OutputKind::Color => out.color.to_png_bytes(),
                OutputKind::Depth => out.depth.to_png16_bytes(camera.z_near as f32, camera.z_far as f32),
                OutputKind::Normals => normals_from_depth(&out.depth, &camera, &pose)?.normals_to_png_bytes(),
                OutputKind::Alpha => out.alpha.to_png8_bytes(),
            };
            images.push((*kind, bytes));
        }
        Ok(images)
    }
}
