//! Forward pass of the encoder on a [`Tape`].

use std::collections::BTreeMap;

use super::config::{EncoderConfig, UpdateTarget};
use super::params::{BiasSlot, EncoderModel, ParamId};
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::ops::LAYER_NORM_EPS;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How model tensors are placed on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Everything constant; updates are applied.
    Frozen,
    /// Parameters of the base-phase schedule become trainable leaves.
    Train,
    /// Everything constant and the updates are ignored entirely.
    BackboneOnly,
}

struct BlockVars {
    ln1_gain: Var,
    ln1_shift: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2_gain: Var,
    ln2_shift: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Model tensors recorded once per tape and reused by every sample on it.
pub struct BoundEncoder {
    patch_weight: Var,
    patch_bias: Var,
    cls_token: Var,
    pos_embed: Var,
    blocks: Vec<BlockVars>,
    heads: usize,
    params: BTreeMap<ParamId, Var>,
}

impl BoundEncoder {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, model: &EncoderModel<T>, binding: Binding) -> Self {
        let config = &model.config;
        let trainable: Vec<ParamId> = match binding {
            Binding::Train => model.schedule().trainable_encoder_params(config),
            _ => Vec::new(),
        };
        let mut params = BTreeMap::new();
        let bb = &model.backbone;
        let patch_weight = tape.constant(bb.patch_weight.clone());
        let patch_bias = tape.constant(bb.patch_bias.clone());
        let cls_token = tape.constant(bb.cls_token.clone());
        let pos_embed = tape.constant(bb.pos_embed.clone());

        // Update sets are recorded once so shared sets accumulate gradient
        // from every block that uses them.
        let mut delta_vars: Vec<Vec<Var>> = Vec::new();
        if binding != Binding::BackboneOnly {
            for (s, set) in model.deltas.sets.iter().enumerate() {
                let vars = set
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let id = ParamId::Delta { set: s, index: i };
                        if trainable.contains(&id) {
                            let v = tape.param(t.clone());
                            params.insert(id, v);
                            v
                        } else {
                            tape.constant(t.clone())
                        }
                    })
                    .collect();
                delta_vars.push(vars);
            }
        }

        let mut blocks = Vec::with_capacity(config.depth);
        for (b, p) in bb.blocks.iter().enumerate() {
            let mut bias = |slot: BiasSlot, t: &Tensor<T>, tape: &mut Tape<T>| {
                let id = ParamId::Bias { block: b, slot };
                if trainable.contains(&id) {
                    let v = tape.param(t.clone());
                    params.insert(id, v);
                    v
                } else {
                    tape.constant(t.clone())
                }
            };
            let bq = bias(BiasSlot::Query, &p.bq, tape);
            let bk = bias(BiasSlot::Key, &p.bk, tape);
            let bv = bias(BiasSlot::Value, &p.bv, tape);
            let b1 = bias(BiasSlot::Hidden, &p.b1, tape);
            let b2 = bias(BiasSlot::Output, &p.b2, tape);

            let set = if binding != Binding::BackboneOnly && config.is_adapted(b) {
                let s = if config.share_updates {
                    0
                } else {
                    b - config.first_adapted_block()
                };
                delta_vars.get(s)
            } else {
                None
            };
            let weight = |frozen: &Tensor<T>, delta: Option<Var>, tape: &mut Tape<T>| {
                let w = tape.constant(frozen.clone());
                match delta {
                    Some(dv) => tape.add(w, dv).expect("update matches frozen weight shape"),
                    None => w,
                }
            };
            let (dq, dk, dv, d1, d2) = match (set, config.update_target) {
                (Some(s), UpdateTarget::AttentionQkv) => (Some(s[0]), Some(s[1]), Some(s[2]), None, None),
                (Some(s), UpdateTarget::Mlp) => (None, None, None, Some(s[0]), Some(s[1])),
                (None, _) => (None, None, None, None, None),
            };
            blocks.push(BlockVars {
                ln1_gain: tape.constant(p.ln1_gain.clone()),
                ln1_shift: tape.constant(p.ln1_shift.clone()),
                wq: weight(&p.wq, dq, tape),
                bq,
                wk: weight(&p.wk, dk, tape),
                bk,
                wv: weight(&p.wv, dv, tape),
                bv,
                wo: tape.constant(p.wo.clone()),
                bo: tape.constant(p.bo.clone()),
                ln2_gain: tape.constant(p.ln2_gain.clone()),
                ln2_shift: tape.constant(p.ln2_shift.clone()),
                w1: weight(&p.w1, d1, tape),
                b1,
                w2: weight(&p.w2, d2, tape),
                b2,
            });
        }
        Self {
            patch_weight,
            patch_bias,
            cls_token,
            pos_embed,
            blocks,
            heads: config.heads,
            params,
        }
    }

    /// Tape handles of the trainable encoder tensors.
    pub fn params(&self) -> &BTreeMap<ParamId, Var> {
        &self.params
    }

    /// Token sequence `[1 + P, d]`: [CLS] row, then patch embeddings, plus
    /// positional encodings.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<T>, config: &EncoderConfig, image: &Tensor<T>) -> Result<Var> {
        let patches = tape.constant(patchify(image, config)?);
        let tokens = tape.matmul(patches, self.patch_weight)?;
        let tokens = tape.add_row(tokens, self.patch_bias)?;
        let seq = tape.concat_rows(&[self.cls_token, tokens])?;
        tape.add(seq, self.pos_embed)
    }

    /// Query, key and value of block `b` for the normalized input `h`.
    pub fn qkv<T: Scalar>(&self, tape: &mut Tape<T>, b: usize, h: Var) -> Result<(Var, Var, Var)> {
        let p = &self.blocks[b];
        let q = tape.matmul(h, p.wq)?;
        let q = tape.add_row(q, p.bq)?;
        let k = tape.matmul(h, p.wk)?;
        let k = tape.add_row(k, p.bk)?;
        let v = tape.matmul(h, p.wv)?;
        let v = tape.add_row(v, p.bv)?;
        Ok((q, k, v))
    }

    /// Pre-norm block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
    pub fn block<T: Scalar>(&self, tape: &mut Tape<T>, b: usize, x: Var) -> Result<Var> {
        let p = &self.blocks[b];
        let eps = T::lit(LAYER_NORM_EPS);
        let h = tape.layer_norm(x, p.ln1_gain, p.ln1_shift, eps)?;
        let (q, k, v) = self.qkv(tape, b, h)?;
        let a = tape.attention(q, k, v, self.heads)?;
        let o = tape.matmul(a, p.wo)?;
        let o = tape.add_row(o, p.bo)?;
        let x = tape.add(x, o)?;
        let h = tape.layer_norm(x, p.ln2_gain, p.ln2_shift, eps)?;
        let m = tape.matmul(h, p.w1)?;
        let m = tape.add_row(m, p.b1)?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, p.w2)?;
        let m = tape.add_row(m, p.b2)?;
        tape.add(x, m)
    }

    /// Unit-norm [CLS] feature of `image`.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, config: &EncoderConfig, image: &Tensor<T>) -> Result<Var> {
        let mut x = self.embed(tape, config, image)?;
        for b in 0..self.blocks.len() {
            x = self.block(tape, b, x)?;
        }
        let cls = tape.select_row(x, 0)?;
        Ok(tape.l2_normalize(cls))
    }
}

/// Splits a `[C, H, W]` image into row-major patches of `C * p * p` values,
/// ordered channel, row, column within a patch.
pub fn patchify<T: Scalar>(image: &Tensor<T>, config: &EncoderConfig) -> Result<Tensor<T>> {
    let (c, s, p) = (config.channels, config.image_size, config.patch_size);
    if image.shape() != [c, s, s] {
        return shape_err(format!(
            "image shape {:?} does not match [{c}, {s}, {s}]",
            image.shape()
        ));
    }
    let grid = config.grid();
    let data = image.data();
    let mut out = Vec::with_capacity(config.num_patches() * config.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            for ch in 0..c {
                for dy in 0..p {
                    let row = gy * p + dy;
                    let start = ch * s * s + row * s + gx * p;
                    out.extend_from_slice(&data[start..start + p]);
                }
            }
        }
    }
    Tensor::new(vec![config.num_patches(), config.patch_dim()], out)
}

/// Embedded token sequence `[1 + P, d]` of an image.
pub fn patchify_embed<T: Scalar>(image: &Tensor<T>, model: &EncoderModel<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = BoundEncoder::bind(&mut tape, model, Binding::Frozen);
    let v = bound.embed(&mut tape, &model.config, image)?;
    Ok(tape.value(v).clone())
}

/// Q, K, V projections of `h` in block `block_index`, using
/// `h (W + dW) + b` for adapted blocks and `h W + b` otherwise.
pub fn attention_qkv<T: Scalar>(
    h: &Tensor<T>,
    block_index: usize,
    model: &EncoderModel<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let config = &model.config;
    if block_index >= config.depth {
        return Err(Error::Index(format!(
            "block {block_index} out of range for depth {}",
            config.depth
        )));
    }
    let p = &model.backbone.blocks[block_index];
    let deltas = match config.update_target {
        UpdateTarget::AttentionQkv => model.delta_set_for_block(block_index),
        UpdateTarget::Mlp => None,
    };
    let project = |w: &Tensor<T>, b: &Tensor<T>, i: usize| -> Result<Tensor<T>> {
        let out = match deltas {
            Some(set) => h.matmul(&w.add(&set[i])?)?,
            None => h.matmul(w)?,
        };
        let d = b.len();
        let mut out = out;
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(out)
    };
    Ok((project(&p.wq, &p.bq, 0)?, project(&p.wk, &p.bk, 1)?, project(&p.wv, &p.bv, 2)?))
}

/// Unit-norm feature of `image` under the current model.
pub fn forward<T: Scalar>(image: &Tensor<T>, model: &EncoderModel<T>) -> Result<Tensor<T>> {
    encode_with(image, model, Binding::Frozen)
}

/// Feature of `image` from the backbone alone, ignoring every update.
pub fn forward_backbone<T: Scalar>(image: &Tensor<T>, model: &EncoderModel<T>) -> Result<Tensor<T>> {
    encode_with(image, model, Binding::BackboneOnly)
}

fn encode_with<T: Scalar>(image: &Tensor<T>, model: &EncoderModel<T>, binding: Binding) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = BoundEncoder::bind(&mut tape, model, binding);
    let z = bound.encode(&mut tape, &model.config, image)?;
    Ok(tape.value(z).clone())
}

/// Features for many images, computed in parallel; order is preserved.
pub fn forward_batch<T: Scalar>(images: &[&Tensor<T>], model: &EncoderModel<T>) -> Result<Vec<Tensor<T>>> {
    use rayon::prelude::*;
    images.par_iter().map(|img| forward(img, model)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            channels: 2,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_hidden: None,
            adapted_blocks: 2,
            update_target: UpdateTarget::AttentionQkv,
            share_updates: true,
        }
    }

    #[test]
    fn patchify_orders_channels_then_rows() {
        let config = EncoderConfig {
            image_size: 4,
            channels: 2,
            patch_size: 2,
            ..tiny()
        };
        let img = Tensor::new(vec![2, 4, 4], (0..32).map(|v| v as f64).collect()).unwrap();
        let patches = patchify(&img, &config).unwrap();
        assert_eq!(patches.shape(), &[4, 8]);
        assert_eq!(patches.row(0), &[0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0]);
        assert_eq!(patches.row(3), &[10.0, 11.0, 14.0, 15.0, 26.0, 27.0, 30.0, 31.0]);
    }

    #[test]
    fn embed_shapes() {
        let model = EncoderModel::<f64>::new(tiny(), 1).unwrap();
        let img = Tensor::zeros(&[2, 8, 8]);
        assert_eq!(patchify_embed(&img, &model).unwrap().shape(), &[5, 8]);

        let single = EncoderConfig {
            image_size: 4,
            ..tiny()
        };
        let model = EncoderModel::<f64>::new(single, 1).unwrap();
        let img = Tensor::zeros(&[2, 4, 4]);
        assert_eq!(patchify_embed(&img, &model).unwrap().shape(), &[2, 8]);
    }

    #[test]
    fn zero_image_embeds_to_positional_encodings() {
        let model = EncoderModel::<f64>::new(tiny(), 5).unwrap();
        let seq = patchify_embed(&Tensor::zeros(&[2, 8, 8]), &model).unwrap();
        let bb = &model.backbone;
        for (c, &v) in seq.row(0).iter().enumerate() {
            assert_eq!(v, bb.cls_token.data()[c] + bb.pos_embed.row(0)[c]);
        }
        for r in 1..5 {
            assert_eq!(seq.row(r), bb.pos_embed.row(r));
        }
    }

    #[test]
    fn wrong_image_size_is_a_shape_error() {
        let model = EncoderModel::<f64>::new(tiny(), 1).unwrap();
        let err = forward(&Tensor::zeros(&[2, 6, 6]), &model).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn hand_computed_projection() {
        let config = EncoderConfig {
            embed_dim: 2,
            heads: 1,
            depth: 1,
            adapted_blocks: 1,
            ..tiny()
        };
        let mut model = EncoderModel::<f64>::new(config, 0).unwrap();
        let eye = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        model.backbone.blocks[0].wq = eye;
        model.deltas.sets[0][0] = Tensor::from_f64(&[2, 2], &[0.0, 1.0, 0.0, 0.0]).unwrap();
        let h = Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        let (q, _, _) = attention_qkv(&h, 0, &model).unwrap();
        assert_eq!(q.data(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_blocks_ignore_deltas() {
        let config = EncoderConfig {
            adapted_blocks: 0,
            ..tiny()
        };
        let mut model = EncoderModel::<f64>::new(config, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in model.deltas.sets.iter_mut().flatten() {
            *t = Tensor::randn(t.shape(), 1.0, &mut rng);
        }
        let h = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let img = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
        for b in 0..2 {
            let (q, k, v) = attention_qkv(&h, b, &model).unwrap();
            let p = &model.backbone.blocks[b];
            assert_eq!(q, plain(&h, &p.wq, &p.bq));
            assert_eq!(k, plain(&h, &p.wk, &p.bk));
            assert_eq!(v, plain(&h, &p.wv, &p.bv));
        }
        assert_eq!(forward(&img, &model).unwrap(), forward_backbone(&img, &model).unwrap());
    }

    fn plain(h: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let mut out = h.matmul(w).unwrap();
        let d = b.len();
        for row in out.data_mut().chunks_mut(d) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        out
    }

    #[test]
    fn block_index_out_of_range() {
        let model = EncoderModel::<f64>::new(tiny(), 1).unwrap();
        let h = Tensor::zeros(&[5, 8]);
        assert!(matches!(attention_qkv(&h, 2, &model), Err(Error::Index(_))));
    }

    #[test]
    fn forward_is_unit_norm_and_deterministic() {
        let model = EncoderModel::<f64>::new(tiny(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let img = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
            let z = forward(&img, &model).unwrap();
            assert!((z.l2_norm() - 1.0).abs() < 1e-9);
            assert_eq!(z, forward(&img, &model).unwrap());
        }
    }

    #[test]
    fn adapting_changes_output_for_nonzero_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
        for target in [UpdateTarget::AttentionQkv, UpdateTarget::Mlp] {
            for n in 1..=2 {
                let config = EncoderConfig {
                    adapted_blocks: n,
                    update_target: target,
                    ..tiny()
                };
                let mut model = EncoderModel::<f64>::new(config, 4).unwrap();
                for t in model.deltas.sets.iter_mut().flatten() {
                    *t = Tensor::randn(t.shape(), 0.5, &mut rng);
                }
                assert_ne!(forward(&img, &model).unwrap(), forward_backbone(&img, &model).unwrap());
            }
        }
    }
}
