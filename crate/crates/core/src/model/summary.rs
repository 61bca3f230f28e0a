//! Analytic receptive field, parameter counts and the layer table.

use std::fmt;

use serde::Serialize;

use super::{BlockType, Model, ModelConfig};
use crate::nn::{dense_growth_for, densenet_block_params, resnet_block_params, Bottleneck};

/// One stage on a path through a network, as seen by the receptive-field
/// recurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RfLayer {
    Conv { kernel: usize },
    Pool { kernel: usize, stride: usize },
    /// Linear interpolation by `factor`; every output reads two adjacent
    /// inputs.
    Upsample { factor: usize },
}

/// Receptive field along one axis of a chain of layers, using
/// `rf += (k - 1) * jump` and `jump *= stride` (upsampling divides the jump).
pub fn receptive_field_of(layers: &[RfLayer]) -> usize {
    let mut rf = 1.0;
    let mut jump = 1.0;
    for layer in layers {
        match *layer {
            RfLayer::Conv { kernel } => rf += (kernel as f64 - 1.0) * jump,
            RfLayer::Pool { kernel, stride } => {
                rf += (kernel as f64 - 1.0) * jump;
                jump *= stride as f64;
            }
            RfLayer::Upsample { factor } => {
                rf += jump;
                jump /= factor as f64;
            }
        }
    }
    rf.round() as usize
}

fn block_kernels(cfg: &ModelConfig) -> &'static [usize] {
    match cfg.block_type {
        BlockType::Resnet => &[3, 3],
        BlockType::Densenet => &[3, 3, 1],
    }
}

/// Layers on the longest input→output path: stem, every encoder level, the
/// bridge, every decoder level and the head.
pub fn longest_path(cfg: &ModelConfig) -> Vec<RfLayer> {
    let conv = |kernel| RfLayer::Conv { kernel };
    let block = block_kernels(cfg).iter().map(|&k| conv(k));
    let mut path = vec![conv(1)];
    for _ in 0..cfg.levels {
        path.extend(block.clone());
        path.push(RfLayer::Pool { kernel: 2, stride: 2 });
    }
    path.extend(block.clone());
    for level in (1..=cfg.levels).rev() {
        path.push(RfLayer::Upsample { factor: 2 });
        path.extend(block.clone());
        if level > 1 {
            path.push(conv(1));
        }
    }
    path.push(conv(1));
    path
}

/// Receptive field in voxels along `(depth, height, width)`.
pub fn receptive_field(cfg: &ModelConfig) -> (usize, usize, usize) {
    let rf = receptive_field_of(&longest_path(cfg));
    (rf, rf, rf)
}

fn block_params(cfg: &ModelConfig, ch: usize) -> usize {
    match cfg.block_type {
        BlockType::Resnet => resnet_block_params(ch),
        BlockType::Densenet => densenet_block_params(ch, dense_growth_for(ch)),
    }
}

/// Parameter count from the block formulas, without building the model.
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    let (l, e, d) = (cfg.levels, cfg.encoder_width, cfg.decoder_width);
    Bottleneck::param_count(cfg.input_channels, e)
        + (l + 1) * block_params(cfg, e)
        + l * block_params(cfg, d)
        + (l - 1) * Bottleneck::param_count(d, e)
        + Bottleneck::param_count(d, cfg.classes)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRow {
    pub name: String,
    pub output_shape: Vec<usize>,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSummary {
    pub config: ModelConfig,
    pub parameter_count: usize,
    pub receptive_field: (usize, usize, usize),
    /// Receptive field right after the first upsampling.
    pub receptive_field_first_upsample: usize,
    pub dense_growth: Option<(usize, usize)>,
    pub reference_input: Vec<usize>,
    pub layer_table: Vec<LayerRow>,
}

impl ModelSummary {
    pub(super) fn of(model: &Model) -> Self {
        let cfg = model.config();
        let side = (1usize << cfg.levels).max(16);
        let (e, d) = (cfg.encoder_width, cfg.decoder_width);
        let shape = |c: usize, s: usize| vec![1, c, s, s, s];
        let mut rows = Vec::new();
        let mut row = |name: String, output_shape: Vec<usize>, params: usize| {
            rows.push(LayerRow {
                name,
                output_shape,
                params,
            })
        };

        row("input".into(), shape(cfg.input_channels, side), 0);
        row("stem".into(), shape(e, side), Bottleneck::param_count(cfg.input_channels, e));
        let mut s = side;
        for i in 1..=cfg.levels {
            row(format!("enc{i}"), shape(e, s), block_params(cfg, e));
            s /= 2;
            row(format!("pool{i}"), shape(e, s), 0);
        }
        row("bridge".into(), shape(e, s), block_params(cfg, e));
        for (i, reduce) in (1..=cfg.levels).rev().zip(model.decoder_has_reduce()) {
            s *= 2;
            row(format!("up{i}"), shape(e, s), 0);
            row(format!("cat{i}"), shape(2 * e, s), 0);
            row(format!("dec{i}"), shape(d, s), block_params(cfg, d));
            if reduce {
                row(format!("reduce{i}"), shape(e, s), Bottleneck::param_count(d, e));
            }
        }
        row("head".into(), shape(cfg.classes, s), Bottleneck::param_count(d, cfg.classes));
        row("softmax".into(), shape(cfg.classes, s), 0);

        let path = longest_path(cfg);
        let first_up = path
            .iter()
            .position(|l| matches!(l, RfLayer::Upsample { .. }))
            .expect("at least one level");
        ModelSummary {
            config: cfg.clone(),
            parameter_count: model.param_count(),
            receptive_field: receptive_field(cfg),
            receptive_field_first_upsample: receptive_field_of(&path[..=first_up]),
            dense_growth: cfg.dense_growth(),
            reference_input: shape(cfg.input_channels, side),
            layer_table: rows,
        }
    }

    pub fn encoder_stages(&self) -> usize {
        self.layer_table.iter().filter(|r| r.name.starts_with("enc")).count()
    }

    pub fn decoder_stages(&self) -> usize {
        self.layer_table.iter().filter(|r| r.name.starts_with("dec")).count()
    }
}

impl fmt::Display for ModelSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(
            f,
            "levels {}  encoder width {}  decoder width {}  block {:?}",
            c.levels, c.encoder_width, c.decoder_width, c.block_type
        )?;
        if let Some((ge, gd)) = self.dense_growth {
            writeln!(f, "dense growth: encoder {ge}, decoder {gd}")?;
        }
        writeln!(f, "encoder stages {}  decoder stages {}", self.encoder_stages(), self.decoder_stages())?;
        writeln!(f, "parameters {}", self.parameter_count)?;
        let (rd, rh, rw) = self.receptive_field;
        writeln!(f, "receptive field {rd}x{rh}x{rw} voxels")?;
        writeln!(f, "receptive field after first upsampling {}", self.receptive_field_first_upsample)?;
        writeln!(f, "layer table for input {:?}:", self.reference_input)?;
        for r in &self.layer_table {
            writeln!(f, "  {:<10} {:<24} {:>9}", r.name, format!("{:?}", r.output_shape), r.params)?;
        }
        Ok(())
    }
}
