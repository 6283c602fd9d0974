//! Dataset directories and the synthetic ground-truth scene.
//!
//! A dataset directory holds:
//!
//! ```text
//! meta.json          header: version, camera, scene bounds, expression size
//! background.png     image of the empty scene
//! frames.jsonl       one FrameRecord per line (pose as 16 row-major numbers)
//! frames/%05d.png    frame images, 8-bit RGB
//! ```
//!
//! Image values are used directly as `[0, 1]` intensities; no sRGB decoding.

pub mod synthetic;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Bounds;
use crate::raster::RgbImage;
use crate::render::{Camera, Pose};

pub use synthetic::{generate_synthetic, oracle_render, AnalyticField, SyntheticSceneSpec};

pub const FORMAT_VERSION: u32 = 1;

/// Tolerance on `RᵀR = I` when validating poses.
pub const POSE_TOLERANCE: f64 = 1e-5;

pub const CONVENTIONS: &str =
    "pinhole; camera looks down -z, image y down; pixel centers at +0.5; pose maps camera to canonical";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Half-open pixel rectangle `[row0, row1) × [col0, col1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BBox {
    pub fn is_empty(&self) -> bool {
        self.row1 <= self.row0 || self.col1 <= self.col0
    }

    pub fn area(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            (self.row1 - self.row0) * (self.col1 - self.col0)
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }
}

impl Serialize for BBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.row0, self.col0, self.row1, self.col1].serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [row0, col0, row1, col1] = <[usize; 4]>::deserialize(d)?;
        Ok(Self { row0, col0, row1, col1 })
    }
}

fn pose_to_vec<S: serde::Serializer>(pose: &Pose, s: S) -> std::result::Result<S::Ok, S::Error> {
    pose.to_row_major().serialize(s)
}

fn pose_from_vec<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Pose, D::Error> {
    let v = Vec::<f64>::deserialize(d)?;
    Pose::from_row_major(&v).map_err(serde::de::Error::custom)
}

/// One line of `frames.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: usize,
    /// Image path relative to the dataset directory.
    pub image: String,
    #[serde(serialize_with = "pose_to_vec", deserialize_with = "pose_from_vec")]
    pub pose: Pose,
    pub expression: Vec<f64>,
    pub bbox: BBox,
    /// Row of the latent table; training frames only.
    pub latent_index: Option<usize>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub name: String,
    pub camera: Camera,
    /// Canonical-space box mapped to `[-1, 1]³` for positional encoding.
    pub bounds: Bounds,
    pub expr_dim: usize,
    pub background: String,
    pub conventions: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub record: FrameRecord,
    pub image: RgbImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub background: RgbImage,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn camera(&self) -> &Camera {
        &self.header.camera
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(move |f| f.record.split == split)
    }

    /// Training frames ordered by latent row.
    pub fn train_frames(&self) -> Vec<&Frame> {
        let mut v: Vec<&Frame> = self.split(Split::Train).collect();
        v.sort_by_key(|f| f.record.latent_index);
        v
    }

    pub fn latent_count(&self) -> usize {
        self.split(Split::Train).count()
    }

    /// Keeps every `stride`-th training frame (all test frames stay) and
    /// renumbers latent rows.
    pub fn thin_training(&self, stride: usize) -> Dataset {
        let stride = stride.max(1);
        let mut out = self.clone();
        out.frames.retain(|f| match f.record.latent_index {
            Some(i) if f.record.split == Split::Train => i % stride == 0,
            _ => true,
        });
        let train = out.frames.iter_mut().filter(|f| f.record.split == Split::Train);
        for (kept, f) in train.enumerate() {
            f.record.latent_index = Some(kept);
        }
        out
    }

    /// Checks every dataset and frame invariant.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found: h.version,
            });
        }
        h.camera.validate()?;
        if !h.bounds.is_valid() {
            return Err(Error::InvalidDataset(
                "scene bounds must be finite with max > min".into(),
            ));
        }
        if h.expr_dim == 0 {
            return Err(Error::InvalidDataset("expr_dim must be positive".into()));
        }
        let (w, ht) = (h.camera.width, h.camera.height);
        if self.background.width != w || self.background.height != ht {
            return Err(Error::InvalidDataset(format!(
                "background is {}x{}, camera is {w}x{ht}",
                self.background.width, self.background.height
            )));
        }
        let mut latent_rows = Vec::new();
        for f in &self.frames {
            let r = &f.record;
            let bad = |reason: String| Error::InvalidFrame { frame: r.id, reason };
            if f.image.width != w || f.image.height != ht {
                return Err(bad(format!(
                    "image is {}x{}, camera is {w}x{ht}",
                    f.image.width, f.image.height
                )));
            }
            r.pose.check_rigid(POSE_TOLERANCE).map_err(bad)?;
            if r.expression.len() != h.expr_dim {
                return Err(bad(format!(
                    "expression has {} values, expected {}",
                    r.expression.len(),
                    h.expr_dim
                )));
            }
            if r.expression.iter().any(|v| !v.is_finite()) {
                return Err(bad("expression has non-finite values".into()));
            }
            let b = r.bbox;
            if b.row0 > b.row1 || b.col0 > b.col1 || b.row1 > ht || b.col1 > w {
                return Err(bad(format!("bounding box {b:?} is not inside the image")));
            }
            match (r.split, r.latent_index) {
                (Split::Train, Some(i)) => latent_rows.push(i),
                (Split::Train, None) => return Err(bad("training frame without latent row".into())),
                (Split::Test, _) => {}
            }
        }
        latent_rows.sort_unstable();
        if latent_rows.iter().enumerate().any(|(i, r)| i != *r) {
            return Err(Error::InvalidDataset(
                "latent rows must be 0..n_train, one per training frame".into(),
            ));
        }
        Ok(())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads and eagerly validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let header: DatasetHeader = read_json(&meta_path)?;
    if header.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: header.version,
        });
    }
    let background = RgbImage::load_png(&dir.join(&header.background))?;
    let frames_path = dir.join("frames.jsonl");
    let text = fs::read_to_string(&frames_path).map_err(|e| Error::io(&frames_path, e))?;
    let mut frames = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let record: FrameRecord = serde_json::from_str(line).map_err(|source| Error::Json {
            path: frames_path.clone(),
            source,
        })?;
        let image = RgbImage::load_png(&dir.join(&record.image))?;
        frames.push(Frame { record, image });
    }
    let dataset = Dataset {
        header,
        background,
        frames,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(dir)?;
    mkdir(&dir.join("frames"))?;
    let meta = serde_json::to_string_pretty(&dataset.header).expect("header serializes");
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))?;
    dataset.background.save_png(&dir.join(&dataset.header.background))?;
    let lines_path = dir.join("frames.jsonl");
    let mut lines = fs::File::create(&lines_path).map_err(|e| Error::io(&lines_path, e))?;
    for f in &dataset.frames {
        let line = serde_json::to_string(&f.record).expect("record serializes");
        writeln!(lines, "{line}").map_err(|e| Error::io(&lines_path, e))?;
        f.image.save_png(&dir.join(&f.record.image))?;
    }
    Ok(())
}
