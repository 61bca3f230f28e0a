//! The segmentation network: configuration, assembly, inference and the
//! ablation variants.
//!
//! Topology for `levels = L`, encoder width `E` and decoder width `2E`:
//!
//! ```text
//! stem      bottleneck  in → E
//! enc i     block(E), skip_i = output, maxpool2          (i = 1..L)
//! bridge    block(E)
//! dec i     upsample, concat(up, skip_i) → 2E, block(2E),
//!           bottleneck 2E → E unless i = 1               (i = L..1)
//! head      bottleneck 2E → classes, softmax over channels
//! ```

mod checkpoint;
mod summary;

pub use checkpoint::{Checkpoint, NamedArray, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use summary::{
    expected_param_count, receptive_field, receptive_field_of, LayerRow, ModelSummary, RfLayer,
};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    dense_growth_for, maxpool2, upsample_trilinear2, BatchNormSettings, Bottleneck, Ctx, DenseNetBlock, Mode,
    ParamStore, ResNetBlock,
};
use crate::tensor::{concat_channels, softmax_channels, Tape, Tensor, Var};
use crate::volume::{crop, pad_to_multiple, Mask, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockType {
    Resnet,
    Densenet,
}

/// Architecture descriptor covering the baseline and its ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub levels: usize,
    pub encoder_width: usize,
    pub decoder_width: usize,
    pub block_type: BlockType,
    pub input_channels: usize,
    pub classes: usize,
    #[serde(default)]
    pub batchnorm: BatchNormSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 3,
            encoder_width: 32,
            decoder_width: 64,
            block_type: BlockType::Resnet,
            input_channels: 1,
            classes: 2,
            batchnorm: BatchNormSettings::default(),
        }
    }
}

impl ModelConfig {
    pub fn with_encoder_width(mut self, width: usize) -> Self {
        self.encoder_width = width;
        self.decoder_width = 2 * width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        if self.encoder_width < 4 || self.decoder_width < 4 {
            return Err(Error::Config(format!(
                "widths must be at least 4, got {}/{}",
                self.encoder_width, self.decoder_width
            )));
        }
        if self.decoder_width != 2 * self.encoder_width {
            return Err(Error::Config(format!(
                "decoder width {} must be twice the encoder width {}",
                self.decoder_width, self.encoder_width
            )));
        }
        if self.input_channels < 1 {
            return Err(Error::Config("input_channels must be at least 1".into()));
        }
        if self.classes != 2 {
            return Err(Error::Config(format!(
                "only two-class (lesion / non-lesion) output is supported, got {}",
                self.classes
            )));
        }
        let bn = self.batchnorm;
        if !(bn.momentum > 0.0 && bn.momentum <= 1.0) || bn.epsilon.is_nan() || bn.epsilon < 0.0 {
            return Err(Error::Config(format!("invalid batchnorm settings {bn:?}")));
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }

    /// Dense growth rates `(encoder, decoder)` for the dense block variant.
    pub fn dense_growth(&self) -> Option<(usize, usize)> {
        (self.block_type == BlockType::Densenet)
            .then(|| (dense_growth_for(self.encoder_width), dense_growth_for(self.decoder_width)))
    }
}

/// Named architecture variants: the baseline and the self-ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Densenet,
    HalfRf,
    HalfRfMatched,
    Width28,
    Width36,
}

impl Variant {
    pub const ABLATIONS: [Variant; 5] = [
        Variant::Densenet,
        Variant::HalfRf,
        Variant::HalfRfMatched,
        Variant::Width28,
        Variant::Width36,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Densenet => "densenet",
            Variant::HalfRf => "half_rf",
            Variant::HalfRfMatched => "half_rf_matched",
            Variant::Width28 => "width28",
            Variant::Width36 => "width36",
        }
    }

    pub fn config(self) -> ModelConfig {
        let base = ModelConfig::default();
        match self {
            Variant::Baseline => base,
            Variant::Densenet => ModelConfig {
                block_type: BlockType::Densenet,
                ..base
            },
            Variant::HalfRf => ModelConfig { levels: 2, ..base },
            Variant::HalfRfMatched => {
                let target = expected_param_count(&base);
                let shallow = ModelConfig { levels: 2, ..base };
                let width = (4..=256)
                    .min_by_key(|&w| {
                        expected_param_count(&shallow.clone().with_encoder_width(w)).abs_diff(target)
                    })
                    .expect("non-empty range");
                shallow.with_encoder_width(width)
            }
            Variant::Width28 => base.with_encoder_width(28),
            Variant::Width36 => base.with_encoder_width(36),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Variant::Baseline]
            .into_iter()
            .chain(Variant::ABLATIONS)
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// Configuration of a named ablation variant.
pub fn ablation_variant(name: &str) -> Result<ModelConfig> {
    Ok(name.parse::<Variant>()?.config())
}

#[derive(Clone, Debug)]
enum Block {
    Res(ResNetBlock),
    Dense(DenseNetBlock),
}

impl Block {
    fn new(cfg: &ModelConfig, store: &mut ParamStore, name: &str, ch: usize, rng: &mut ChaCha8Rng) -> Self {
        match cfg.block_type {
            BlockType::Resnet => Block::Res(ResNetBlock::new(store, name, ch, rng)),
            BlockType::Densenet => Block::Dense(DenseNetBlock::new(store, name, ch, dense_growth_for(ch), rng)),
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            Block::Res(b) => b.forward(ctx, x),
            Block::Dense(b) => b.forward(ctx, x),
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    block: Block,
    reduce: Option<Bottleneck>,
}

/// Per-voxel class probabilities `(n, classes, d, h, w)`; channel 1 is lesion.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume(pub Tensor);

impl ProbabilityVolume {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Lesion probability of every voxel of batch item `b`.
    pub fn lesion(&self, b: usize) -> Result<&[f64]> {
        let [n, c, d, h, w] = self.0.dims5()?;
        if b >= n || c < 2 {
            return Err(Error::contract(format!("no lesion channel for item {b} in {:?}", self.0.shape())));
        }
        let vol = d * h * w;
        Ok(&self.0.data()[(b * c + 1) * vol..(b * c + 2) * vol])
    }

    /// Argmax labels of batch item `b`; an exact tie is non-lesion.
    pub fn labels(&self, b: usize) -> Result<Vec<u8>> {
        let [_, c, d, h, w] = self.0.dims5()?;
        let vol = d * h * w;
        let base = b * c * vol;
        let data = self.0.data();
        Ok((0..vol)
            .map(|v| u8::from(data[base + vol + v] > data[base + v]))
            .collect())
    }
}

/// An assembled network with its parameters and normalization state.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    stem: Bottleneck,
    encoders: Vec<Block>,
    bridge: Block,
    decoders: Vec<DecoderStage>,
    head: Bottleneck,
    mode: Mode,
}

impl Model {
    /// Builds the network; weights are He-normal from a ChaCha8 stream seeded
    /// with `seed`, biases and BN shifts zero, BN scales one.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (enc, dec) = (cfg.encoder_width, cfg.decoder_width);

        let stem = Bottleneck::new(&mut store, "stem", cfg.input_channels, enc, &mut rng);
        let encoders = (1..=cfg.levels)
            .map(|i| Block::new(&cfg, &mut store, &format!("enc{i}"), enc, &mut rng))
            .collect();
        let bridge = Block::new(&cfg, &mut store, "bridge", enc, &mut rng);
        let decoders = (1..=cfg.levels)
            .rev()
            .map(|i| DecoderStage {
                block: Block::new(&cfg, &mut store, &format!("dec{i}"), dec, &mut rng),
                reduce: (i > 1).then(|| Bottleneck::new(&mut store, &format!("reduce{i}"), dec, enc, &mut rng)),
            })
            .collect();
        let head = Bottleneck::new(&mut store, "head", dec, cfg.classes, &mut rng);

        Ok(Model {
            config: cfg,
            store,
            stem,
            encoders,
            bridge,
            decoders,
            head,
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.size_multiple();
        match shape {
            [_, c, d, h, w] if *c == self.config.input_channels => {
                if d % m != 0 || h % m != 0 || w % m != 0 || *d == 0 || *h == 0 || *w == 0 {
                    return Err(Error::contract(format!(
                        "spatial dims {d}×{h}×{w} must be non-zero multiples of {m} for {} levels",
                        self.config.levels
                    )));
                }
                Ok(())
            }
            _ => Err(Error::contract(format!(
                "model expects (n, {}, d, h, w) input, got {shape:?}",
                self.config.input_channels
            ))),
        }
    }

    /// Records the full forward pass on `tape`, returning the softmax output
    /// and the tape handle of every parameter (in [`ParamStore`] order).
    pub fn forward(&mut self, tape: &Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        self.check_input(&tape.shape(x)?)?;
        let mut ctx = Ctx::new(tape, &mut self.store, self.mode, self.config.batchnorm);

        let mut h = self.stem.forward(&mut ctx, x)?;
        let mut skips = Vec::with_capacity(self.encoders.len());
        for block in &self.encoders {
            let skip = block.forward(&mut ctx, h)?;
            tape.release(h);
            skips.push(skip);
            h = maxpool2(tape, skip)?;
        }
        let bridged = self.bridge.forward(&mut ctx, h)?;
        tape.release(h);
        h = bridged;
        for stage in &self.decoders {
            let skip = skips.pop().expect("one skip per level");
            let up = upsample_trilinear2(tape, h)?;
            tape.release(h);
            let cat = concat_channels(tape, up, skip)?;
            tape.release(up);
            tape.release(skip);
            h = stage.block.forward(&mut ctx, cat)?;
            tape.release(cat);
            if let Some(reduce) = &stage.reduce {
                let r = reduce.forward(&mut ctx, h)?;
                tape.release(h);
                h = r;
            }
        }
        let logits = self.head.forward(&mut ctx, h)?;
        tape.release(h);
        let probs = softmax_channels(tape, logits)?;
        tape.release(logits);
        Ok((probs, ctx.into_vars()))
    }

    /// Class probabilities for an input batch, in the current mode. Runs on
    /// an inference tape, so intermediates are freed as soon as possible.
    pub fn predict_proba(&mut self, x: &Tensor) -> Result<ProbabilityVolume> {
        let tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let (probs, _) = self.forward(&tape, xv)?;
        let out = tape.value(probs)?;
        Ok(ProbabilityVolume((*out).clone()))
    }

    /// Argmax segmentation of an intensity-normalized volume. The volume is
    /// zero-padded to the level multiple, evaluated in eval mode and the
    /// mask cropped back to the original dims.
    pub fn predict_mask(&mut self, v: &Volume) -> Result<Mask> {
        let (padded, rec) = pad_to_multiple(v, self.config.size_multiple());
        let [d, h, w] = padded.dims;
        let x = Tensor::new(vec![1, 1, d, h, w], padded.data.clone())?;
        let prev = self.mode;
        self.mode = Mode::Eval;
        let probs = self.predict_proba(&x);
        self.mode = prev;
        let labels = probs?.labels(0)?;
        let mask = Mask::new(padded.dims, padded.spacing, labels)?.with_orientation(v.orientation.clone());
        crop(&mask, &rec)
    }

    pub fn summary(&self) -> ModelSummary {
        ModelSummary::of(self)
    }

    pub(crate) fn decoder_has_reduce(&self) -> Vec<bool> {
        self.decoders.iter().map(|d| d.reduce.is_some()).collect()
    }
}
