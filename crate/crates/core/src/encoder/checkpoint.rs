//! Encoder checkpoint file.
//!
//! Layout, all integers little-endian `u32`:
//!
//! | field | encoding |
//! |---|---|
//! | magic | 8 bytes `FSCILENC` |
//! | version | `1` |
//! | scalar width | `4` (f32) or `8` (f64) |
//! | image_size, channels, patch_size, embed_dim, depth, heads, mlp_hidden, adapted_blocks | 8 x u32 |
//! | update_target | `0` attention_qkv, `1` mlp |
//! | share_updates | `0` / `1` |
//! | phase | `0` base, `1` incremental |
//! | tensor count | u32 |
//! | tensors | tensor records (see [`crate::binary`]) |
//!
//! Tensor order: patch weight, patch bias, [CLS] token, positional encodings,
//! then per block `ln1_gain, ln1_shift, wq, bq, wk, bk, wv, bv, wo, bo,
//! ln2_gain, ln2_shift, w1, b1, w2, b2`, then every update set in order
//! (`dWq, dWk, dWv` or `dW1, dW2`).

use std::io::{Read, Write};

use super::config::{EncoderConfig, UpdateTarget};
use super::params::{EncoderModel, Phase};
use crate::binary::{check_magic, read_tensor, read_u32, write_tensor, write_u32, write_usize};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const ENCODER_MAGIC: &[u8; 8] = b"FSCILENC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(model: &EncoderModel<T>, w: &mut W) -> Result<()> {
    let c = &model.config;
    w.write_all(ENCODER_MAGIC)?;
    write_u32(w, CHECKPOINT_VERSION)?;
    write_usize(w, T::BYTES, "scalar width")?;
    for (name, v) in [
        ("image_size", c.image_size),
        ("channels", c.channels),
        ("patch_size", c.patch_size),
        ("embed_dim", c.embed_dim),
        ("depth", c.depth),
        ("heads", c.heads),
        ("mlp_hidden", c.mlp_hidden()),
        ("adapted_blocks", c.adapted_blocks),
    ] {
        write_usize(w, v, name)?;
    }
    write_u32(w, match c.update_target {
        UpdateTarget::AttentionQkv => 0,
        UpdateTarget::Mlp => 1,
    })?;
    write_u32(w, c.share_updates as u32)?;
    write_u32(w, match model.phase {
        Phase::Base => 0,
        Phase::Incremental => 1,
    })?;
    let tensors = model.tensors();
    write_usize(w, tensors.len(), "tensor count")?;
    for t in tensors {
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(r: &mut R) -> Result<EncoderModel<T>> {
    check_magic(r, ENCODER_MAGIC)?;
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let width = read_u32(r)? as usize;
    if width != T::BYTES {
        return Err(Error::Format(format!(
            "checkpoint stores {width}-byte scalars, reader expects {}",
            T::BYTES
        )));
    }
    let mut f = [0usize; 8];
    for v in &mut f {
        *v = read_u32(r)? as usize;
    }
    let update_target = match read_u32(r)? {
        0 => UpdateTarget::AttentionQkv,
        1 => UpdateTarget::Mlp,
        other => return Err(Error::Format(format!("unknown update target {other}"))),
    };
    let share_updates = read_u32(r)? != 0;
    let phase = match read_u32(r)? {
        0 => Phase::Base,
        1 => Phase::Incremental,
        other => return Err(Error::Format(format!("unknown phase {other}"))),
    };
    let config = EncoderConfig {
        image_size: f[0],
        channels: f[1],
        patch_size: f[2],
        embed_dim: f[3],
        depth: f[4],
        heads: f[5],
        mlp_hidden: Some(f[6]),
        adapted_blocks: f[7],
        update_target,
        share_updates,
    };
    config.validate().map_err(|e| Error::Format(e.to_string()))?;
    let mut model = EncoderModel::<T>::new(config, 0)?;
    model.phase = phase;
    let count = read_u32(r)? as usize;
    let mut slots = model.tensors_mut();
    if count != slots.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, config implies {}",
            slots.len()
        )));
    }
    for slot in slots.iter_mut() {
        let t = read_tensor(r)?;
        if t.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "tensor shape {:?} where {:?} was expected",
                t.shape(),
                slot.shape()
            )));
        }
        **slot = t;
    }
    Ok(model)
}
