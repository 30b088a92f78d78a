//! SHA-256 digests of encoder parameters, used to prove freezes hold.

use sha2::{Digest, Sha256};

use super::params::{BiasSlot, EncoderModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn absorb<T: Scalar>(hasher: &mut Sha256, t: &Tensor<T>) {
    for &d in t.shape() {
        hasher.update((d as u64).to_le_bytes());
    }
    let mut buf = Vec::with_capacity(t.len() * T::BYTES);
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    hasher.update(&buf);
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest over every encoder tensor: backbone, adapted biases and updates.
pub fn encoder_digest<T: Scalar>(model: &EncoderModel<T>) -> String {
    let mut hasher = Sha256::new();
    for t in model.tensors() {
        absorb(&mut hasher, t);
    }
    hex(&hasher.finalize())
}

/// Digest over the tensors that stay frozen even in the base session: the
/// whole backbone minus the trainable biases of adapted blocks.
pub fn backbone_digest<T: Scalar>(model: &EncoderModel<T>) -> String {
    let config = &model.config;
    let trainable = BiasSlot::for_target(config.update_target);
    let mut hasher = Sha256::new();
    let bb = &model.backbone;
    for t in [&bb.patch_weight, &bb.patch_bias, &bb.cls_token, &bb.pos_embed] {
        absorb(&mut hasher, t);
    }
    for (b, block) in bb.blocks.iter().enumerate() {
        let skip: Vec<*const Tensor<T>> = if config.is_adapted(b) {
            trainable.iter().map(|&s| block.bias(s) as *const _).collect()
        } else {
            Vec::new()
        };
        for t in block.tensors() {
            if !skip.contains(&(t as *const _)) {
                absorb(&mut hasher, t);
            }
        }
    }
    hex(&hasher.finalize())
}
