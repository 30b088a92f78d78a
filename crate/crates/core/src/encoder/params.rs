use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{EncoderConfig, UpdateTarget};
use crate::error::{contract_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the seeded Gaussian backbone initialization.
pub const BACKBONE_INIT_STD: f64 = 0.02;

/// Frozen weights of one transformer block.
///
/// Projection matrices are stored `[in, out]` and applied as `x * W`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_shift: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_shift: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> BlockParams<T> {
    fn init(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w = |r, c| Tensor::randn(&[r, c], BACKBONE_INIT_STD, rng);
        let (wq, wk, wv, wo) = (w(d, d), w(d, d), w(d, d), w(d, d));
        let (w1, w2) = (w(d, hidden), w(hidden, d));
        Self {
            ln1_gain: Tensor::ones(&[d]),
            ln1_shift: Tensor::zeros(&[d]),
            wq,
            bq: Tensor::zeros(&[d]),
            wk,
            bk: Tensor::zeros(&[d]),
            wv,
            bv: Tensor::zeros(&[d]),
            wo,
            bo: Tensor::zeros(&[d]),
            ln2_gain: Tensor::ones(&[d]),
            ln2_shift: Tensor::zeros(&[d]),
            w1,
            b1: Tensor::zeros(&[hidden]),
            w2,
            b2: Tensor::zeros(&[d]),
        }
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> [&Tensor<T>; 16] {
        [
            &self.ln1_gain,
            &self.ln1_shift,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_shift,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_shift,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_shift,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn bias(&self, slot: BiasSlot) -> &Tensor<T> {
        match slot {
            BiasSlot::Query => &self.bq,
            BiasSlot::Key => &self.bk,
            BiasSlot::Value => &self.bv,
            BiasSlot::Hidden => &self.b1,
            BiasSlot::Output => &self.b2,
        }
    }

    pub fn bias_mut(&mut self, slot: BiasSlot) -> &mut Tensor<T> {
        match slot {
            BiasSlot::Query => &mut self.bq,
            BiasSlot::Key => &mut self.bk,
            BiasSlot::Value => &mut self.bv,
            BiasSlot::Hidden => &mut self.b1,
            BiasSlot::Output => &mut self.b2,
        }
    }
}

/// Frozen stand-in for a pretrained backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    /// `[channels * patch^2, d]`
    pub patch_weight: Tensor<T>,
    pub patch_bias: Tensor<T>,
    pub cls_token: Tensor<T>,
    /// `[1 + patches, d]`
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
}

impl<T: Scalar> BackboneParams<T> {
    /// Seeded Gaussian initialization; identical seeds give identical weights.
    pub fn init(config: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let patch_weight = Tensor::randn(&[config.patch_dim(), d], BACKBONE_INIT_STD, &mut rng);
        let cls_token = Tensor::randn(&[d], BACKBONE_INIT_STD, &mut rng);
        let pos_embed = Tensor::randn(&[config.seq_len(), d], BACKBONE_INIT_STD, &mut rng);
        let blocks = (0..config.depth)
            .map(|_| BlockParams::init(d, config.mlp_hidden(), &mut rng))
            .collect();
        Self {
            patch_weight,
            patch_bias: Tensor::zeros(&[d]),
            cls_token,
            pos_embed,
            blocks,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![
            &self.patch_weight,
            &self.patch_bias,
            &self.cls_token,
            &self.pos_embed,
        ];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.patch_weight,
            &mut self.patch_bias,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }
}

/// Trainable additive updates to the frozen projections.
///
/// With shared updates there is a single set used by every adapted block;
/// otherwise set `i` belongs to the `i`-th adapted block. A set holds
/// `[dWq, dWk, dWv]` or `[dW1, dW2]` depending on the target.
#[derive(Clone, Debug, PartialEq)]
pub struct AdditiveUpdates<T> {
    pub target: UpdateTarget,
    pub sets: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> AdditiveUpdates<T> {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let set: Vec<Tensor<T>> = config
            .delta_shapes()
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        Self {
            target: config.update_target,
            sets: vec![set; config.delta_sets()],
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.sets.iter().flatten()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().all(|t| t.data().iter().all(|v| v.is_zero()))
    }
}

/// Phase of the freeze schedule the encoder is currently in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Base,
    Incremental,
}

/// Trainable bias vectors of an adapted block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BiasSlot {
    Query,
    Key,
    Value,
    Hidden,
    Output,
}

impl BiasSlot {
    pub fn for_target(target: UpdateTarget) -> &'static [BiasSlot] {
        match target {
            UpdateTarget::AttentionQkv => &[BiasSlot::Query, BiasSlot::Key, BiasSlot::Value],
            UpdateTarget::Mlp => &[BiasSlot::Hidden, BiasSlot::Output],
        }
    }
}

/// Identifies one trainable tensor of the base session.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Delta { set: usize, index: usize },
    Bias { block: usize, slot: BiasSlot },
    Classifier,
}

/// Which parameters may change, derived from the phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezeSchedule {
    pub phase: Phase,
}

impl FreezeSchedule {
    /// Trainable encoder tensors in a deterministic order. Empty outside the
    /// base phase.
    pub fn trainable_encoder_params(&self, config: &EncoderConfig) -> Vec<ParamId> {
        if self.phase != Phase::Base || config.adapted_blocks == 0 {
            return Vec::new();
        }
        let mut ids = Vec::new();
        for set in 0..config.delta_sets() {
            for index in 0..config.delta_shapes().len() {
                ids.push(ParamId::Delta { set, index });
            }
        }
        for block in config.first_adapted_block()..config.depth {
            for &slot in BiasSlot::for_target(config.update_target) {
                ids.push(ParamId::Bias { block, slot });
            }
        }
        ids
    }

    pub fn classifier_trainable(&self) -> bool {
        self.phase == Phase::Base
    }
}

/// Backbone, additive updates and adaptation configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel<T> {
    pub config: EncoderConfig,
    pub backbone: BackboneParams<T>,
    pub deltas: AdditiveUpdates<T>,
    pub phase: Phase,
}

impl<T: Scalar> EncoderModel<T> {
    /// Fresh model in the base phase with zero updates.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = BackboneParams::init(&config, seed);
        let deltas = AdditiveUpdates::zeros(&config);
        Ok(Self {
            config,
            backbone,
            deltas,
            phase: Phase::Base,
        })
    }

    /// Same backbone under a different adaptation setup, with fresh zero
    /// updates. The new config must describe the same architecture.
    pub fn with_adaptation(&self, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let arch = |c: &EncoderConfig| {
            (
                c.image_size,
                c.channels,
                c.patch_size,
                c.embed_dim,
                c.depth,
                c.heads,
                c.mlp_hidden(),
            )
        };
        if arch(&config) != arch(&self.config) {
            return contract_err("adaptation change must keep the backbone architecture");
        }
        Ok(Self {
            deltas: AdditiveUpdates::zeros(&config),
            config,
            backbone: self.backbone.clone(),
            phase: Phase::Base,
        })
    }

    pub fn schedule(&self) -> FreezeSchedule {
        FreezeSchedule { phase: self.phase }
    }

    /// Ends the base session; every encoder parameter is frozen afterwards.
    pub fn freeze(mut self) -> Self {
        self.phase = Phase::Incremental;
        self
    }

    /// Update set used by `block`, if the block is adapted.
    pub fn delta_set_for_block(&self, block: usize) -> Option<&[Tensor<T>]> {
        if !self.config.is_adapted(block) {
            return None;
        }
        let set = if self.config.share_updates {
            0
        } else {
            block - self.config.first_adapted_block()
        };
        self.deltas.sets.get(set).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Result<&Tensor<T>> {
        match id {
            ParamId::Delta { set, index } => self
                .deltas
                .sets
                .get(set)
                .and_then(|s| s.get(index))
                .ok_or_else(|| Error::Index(format!("no delta tensor {set}/{index}"))),
            ParamId::Bias { block, slot } => self
                .backbone
                .blocks
                .get(block)
                .map(|b| b.bias(slot))
                .ok_or_else(|| Error::Index(format!("no block {block}"))),
            ParamId::Classifier => contract_err("classifier weights live in ClassifierState"),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Result<&mut Tensor<T>> {
        match id {
            ParamId::Delta { set, index } => self
                .deltas
                .sets
                .get_mut(set)
                .and_then(|s| s.get_mut(index))
                .ok_or_else(|| Error::Index(format!("no delta tensor {set}/{index}"))),
            ParamId::Bias { block, slot } => self
                .backbone
                .blocks
                .get_mut(block)
                .map(|b| b.bias_mut(slot))
                .ok_or_else(|| Error::Index(format!("no block {block}"))),
            ParamId::Classifier => contract_err("classifier weights live in ClassifierState"),
        }
    }

    /// Every tensor in checkpoint order: backbone, then update sets.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = self.backbone.tensors();
        out.extend(self.deltas.tensors());
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.backbone.tensors_mut();
        out.extend(self.deltas.sets.iter_mut().flatten());
        out
    }

    pub fn cast<U: Scalar>(&self) -> EncoderModel<U> {
        let mut out = EncoderModel::<U> {
            config: self.config.clone(),
            backbone: BackboneParams::init(&self.config, 0),
            deltas: AdditiveUpdates::zeros(&self.config),
            phase: self.phase,
        };
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }
}
