//! `.dnrf` checkpoint files.
//!
//! ```text
//! "DNRF"            magic
//! u32 LE            format version
//! u64 LE            header length in bytes
//! header            JSON: configs, design flags, counters, rng state
//! payload           f32 LE: coarse, fine, latent rows, then the Adam
//!                   moments (m, v) of coarse, fine and each latent row
//! ```
//!
//! The file length must match the header exactly, so truncated files are
//! rejected before any state is built.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParams};
use crate::nn::{AdamConfig, AdamState, ParamSet};
use crate::render::WEIGHT_FLOOR;
use crate::train::{LatentTable, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"DNRF";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Fixed engine choices a checkpoint was trained under. A file written by
/// an engine with different choices is refused rather than silently
/// rendered differently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignFlags {
    pub sigma_activation: String,
    pub rgb_activation: String,
    /// Fine pass evaluates coarse ∪ importance samples.
    pub fine_union: bool,
    pub weight_floor: f64,
    pub resample_gradient: String,
    pub latent_decay: String,
    pub latent_init: String,
}

impl DesignFlags {
    pub fn current() -> Self {
        Self {
            sigma_activation: "relu".into(),
            rgb_activation: "sigmoid".into(),
            fine_union: true,
            weight_floor: WEIGHT_FLOOR,
            resample_gradient: "stopped".into(),
            latent_decay: "l2-loss".into(),
            latent_init: "zero".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    /// 32-byte ChaCha key, hex.
    seed: String,
    stream: u64,
    /// u128 does not survive every JSON reader, so it is kept as a string.
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    field: FieldConfig,
    train: TrainConfig,
    design: DesignFlags,
    iteration: u64,
    latent_rows: usize,
    coarse_steps: u64,
    fine_steps: u64,
    latent_steps: Vec<u64>,
    rng: RngState,
    payload_floats: u64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// All float slices in payload order.
fn payload_slots(state: &TrainState) -> Vec<&[f32]> {
    let mut slots = state.coarse.slots();
    slots.extend(state.fine.slots());
    slots.extend(state.latents.rows.iter().map(Vec::as_slice));
    for adam in [&state.adam_coarse, &state.adam_fine]
        .into_iter()
        .chain(&state.adam_latents)
    {
        slots.extend(adam.first_moment.iter().map(Vec::as_slice));
        slots.extend(adam.second_moment.iter().map(Vec::as_slice));
    }
    slots
}

fn payload_slots_mut(state: &mut TrainState) -> Vec<&mut [f32]> {
    let mut slots = state.coarse.slots_mut();
    slots.extend(state.fine.slots_mut());
    slots.extend(state.latents.rows.iter_mut().map(Vec::as_mut_slice));
    let TrainState {
        adam_coarse,
        adam_fine,
        adam_latents,
        ..
    } = state;
    for adam in [adam_coarse, adam_fine].into_iter().chain(adam_latents.iter_mut()) {
        let AdamState {
            first_moment,
            second_moment,
            ..
        } = adam;
        slots.extend(first_moment.iter_mut().map(Vec::as_mut_slice));
        slots.extend(second_moment.iter_mut().map(Vec::as_mut_slice));
    }
    slots
}

pub fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    let slots = payload_slots(state);
    let floats: usize = slots.iter().map(|s| s.len()).sum();
    let header = Header {
        field: *state.field_config(),
        train: state.config,
        design: DesignFlags::current(),
        iteration: state.iteration,
        latent_rows: state.latents.rows.len(),
        coarse_steps: state.adam_coarse.step_count,
        fine_steps: state.adam_fine.step_count,
        latent_steps: state.adam_latents.iter().map(|a| a.step_count).collect(),
        rng: RngState {
            seed: hex(&state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        payload_floats: floats as u64,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * floats);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for slot in slots {
        for v in slot {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a .dnrf checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = 16usize
        .checked_add(usize::try_from(header_len).map_err(|_| corrupt("header length overflows"))?)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| corrupt("file truncated inside the header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    if header.design != DesignFlags::current() {
        return Err(corrupt(format!(
            "checkpoint was written with different engine choices: {:?}",
            header.design
        )));
    }
    let payload = &bytes[header_end..];
    if payload.len() as u64 != header.payload_floats.saturating_mul(4) {
        return Err(corrupt(format!(
            "payload has {} bytes, header promises {} floats",
            payload.len(),
            header.payload_floats
        )));
    }
    if header.latent_steps.len() != header.latent_rows {
        return Err(corrupt("latent optimizer count does not match latent rows"));
    }

    header.field.validate()?;
    header.train.validate()?;
    let net = AdamConfig::default().with_lr(header.train.lr);
    let latent_cfg = AdamConfig::default().with_lr(header.train.latent_lr.unwrap_or(header.train.lr));
    let coarse = FieldParams::<f32>::zeros(header.field)?;
    let fine = FieldParams::<f32>::zeros(header.field)?;
    let latents = LatentTable::zeros(header.latent_rows, header.field.latent_dim);
    let seed = unhex(&header.rng.seed).ok_or_else(|| corrupt("bad rng seed"))?;
    let word_pos: u128 = header.rng.word_pos.parse().map_err(|_| corrupt("bad rng position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);
    let mut state = TrainState {
        config: header.train,
        adam_coarse: AdamState::new("coarse", &coarse, net),
        adam_fine: AdamState::new("fine", &fine, net),
        adam_latents: latents
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| AdamState::new(format!("latent[{i}]"), r, latent_cfg))
            .collect(),
        coarse,
        fine,
        latents,
        iteration: header.iteration,
        rng,
    };
    state.adam_coarse.step_count = header.coarse_steps;
    state.adam_fine.step_count = header.fine_steps;
    for (a, s) in state.adam_latents.iter_mut().zip(&header.latent_steps) {
        a.step_count = *s;
    }

    let mut slots = payload_slots_mut(&mut state);
    let expected: usize = slots.iter().map(|s| s.len()).sum();
    if expected as u64 != header.payload_floats {
        return Err(corrupt(format!(
            "configuration implies {expected} floats, header says {}",
            header.payload_floats
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
    for slot in slots.iter_mut() {
        for v in slot.iter_mut() {
            *v = values.next().expect("length checked above");
        }
    }
    if payload_slots(&state).iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(corrupt("non-finite values in payload"));
    }
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Total stored floats: parameters, latent rows and both Adam moments.
pub fn stored_float_count(state: &TrainState) -> usize {
    payload_slots(state).iter().map(|s| s.len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EncodingConfig;

    fn toy_state(seed: u64) -> TrainState {
        let field = FieldConfig {
            expr_dim: 2,
            latent_dim: 3,
            backbone_layers: 2,
            backbone_width: 8,
            color_layers: 1,
            color_width: 4,
            encoding: EncodingConfig {
                pos_freqs: 2,
                dir_freqs: 1,
                include_input: true,
            },
            ..FieldConfig::default()
        };
        let mut s = TrainState::new(
            field,
            TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            4,
        )
        .unwrap();
        // non-trivial moments, latents and rng position
        s.adam_coarse.first_moment[0][1] = 0.25;
        s.adam_latents[2].second_moment[0][0] = 1e-7;
        s.adam_latents[2].step_count = 5;
        s.latents.rows[1][2] = -0.5;
        s.iteration = 17;
        rand::RngCore::next_u64(&mut s.rng);
        s
    }

    #[test]
    fn bytes_roundtrip_exactly() {
        let s = toy_state(4);
        let bytes = checkpoint_bytes(&s);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(checkpoint_bytes(&back), bytes);
    }

    #[test]
    fn size_is_header_plus_four_bytes_per_float() {
        let s = toy_state(1);
        let bytes = checkpoint_bytes(&s);
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let params = s.coarse.param_count() + s.fine.param_count();
        let table = s.latents.rows.len() * s.latents.dim;
        // parameters and latent table, each with two Adam moments
        assert_eq!(stored_float_count(&s), 3 * (params + table));
        assert_eq!(bytes.len(), 16 + header_len + 4 * stored_float_count(&s));
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = checkpoint_bytes(&toy_state(2));
        for cut in [0, 3, 15, 40, bytes.len() - 1] {
            assert!(
                matches!(checkpoint_from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn other_versions_are_rejected() {
        let mut bytes = checkpoint_bytes(&toy_state(2));
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(Error::VersionMismatch { expected: 1, found: 7 })
        ));
    }

    #[test]
    fn file_roundtrip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.dnrf");
        let s = toy_state(3);
        save_checkpoint(&s, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), s);
        assert!(matches!(
            load_checkpoint(&dir.path().join("b.dnrf")),
            Err(Error::MissingFile(_))
        ));
    }
}
