//! Base encoder (backbone, map-to-sequence, optional BiLSTM sequence
//! modeling) and the projection heads used during contrastive pretraining.
//!
//! Feature maps are `[N, T, F]`: batch, frames left to right, feature dim.
//! Parameter names start with `enc.` for the encoder and `proj.` for the
//! projection head.

mod backbone;

pub use backbone::Backbone;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::INPUT_HEIGHT;
use crate::error::{Error, Result};
use crate::nn::{self, Forward, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

pub const ENCODER_PREFIX: &str = "enc.";
pub const PROJECTION_PREFIX: &str = "proj.";

/// Layer whose output is the representation `R` fed to the projection head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Representation {
    /// Visual features from the backbone.
    V,
    /// Contextual features from the sequence model.
    H,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionHead {
    None,
    /// `F → F → F′` with a ReLU in between, applied to every frame alone.
    MlpPerFrame,
    /// One bidirectional LSTM layer with `F′` units per direction.
    Bilstm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub input_channels: usize,
    pub sequence_modeling: bool,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// Append the visual features to the sequence-model output.
    pub concat_visual: bool,
    pub representation: Representation,
    pub projection_head: ProjectionHead,
    /// MLP output width, or units per direction of the BiLSTM head.
    pub projected_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl EncoderConfig {
    /// ResNet-29 with a two-layer BiLSTM of 256 units.
    pub fn full_scale() -> Self {
        Self {
            backbone: Backbone::Resnet29 { output_channels: 512 },
            input_channels: 1,
            sequence_modeling: true,
            lstm_hidden: 256,
            lstm_layers: 2,
            concat_visual: true,
            representation: Representation::H,
            projection_head: ProjectionHead::None,
            projected_width: 128,
        }
    }

    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            backbone: Backbone::ToyCnn { channels: [8, 16, 32, 32] },
            input_channels: 1,
            sequence_modeling: true,
            lstm_hidden: 32,
            lstm_layers: 2,
            concat_visual: true,
            representation: Representation::H,
            projection_head: ProjectionHead::None,
            projected_width: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        match (self.representation, self.sequence_modeling) {
            (Representation::H, false) => return err("representation H requires sequence_modeling".into()),
            (Representation::V, true) => {
                return err("representation V means the encoder ends at the backbone; set sequence_modeling to false".into())
            }
            _ => {}
        }
        if !matches!(self.input_channels, 1 | 3) {
            return err(format!("input_channels must be 1 or 3, got {}", self.input_channels));
        }
        match &self.backbone {
            Backbone::ToyCnn { channels } if channels.contains(&0) => return err("toy_cnn channels must be positive".into()),
            Backbone::Resnet29 { output_channels } if *output_channels == 0 || output_channels % 16 != 0 => {
                return err(format!("resnet29 output_channels must be a positive multiple of 16, got {output_channels}"))
            }
            _ => {}
        }
        if self.sequence_modeling && (self.lstm_hidden == 0 || self.lstm_layers == 0) {
            return err("sequence modeling needs lstm_hidden and lstm_layers >= 1".into());
        }
        if self.projection_head != ProjectionHead::None && self.projected_width == 0 {
            return err("projected_width must be positive".into());
        }
        Ok(())
    }

    /// Frame dimension of the visual features V.
    pub fn visual_dim(&self) -> usize {
        backbone::output_channels(&self.backbone)
    }

    /// Frame dimension of the encoder output (the representation R).
    pub fn output_dim(&self) -> usize {
        if self.sequence_modeling {
            2 * self.lstm_hidden + if self.concat_visual { self.visual_dim() } else { 0 }
        } else {
            self.visual_dim()
        }
    }

    /// Frame dimension after the projection head (F′).
    pub fn projected_dim(&self) -> usize {
        match self.projection_head {
            ProjectionHead::None => self.output_dim(),
            ProjectionHead::MlpPerFrame => self.projected_width,
            ProjectionHead::Bilstm => 2 * self.projected_width,
        }
    }

    fn stages(&self) -> Vec<backbone::Stage> {
        backbone::plan(&self.backbone, self.input_channels, "enc.cnn")
    }

    /// Per-stage output `(channels, height, width)` for an input of the given size.
    pub fn shape_trace(&self, height: usize, width: usize) -> Result<Vec<(String, (usize, usize, usize))>> {
        backbone::trace(&self.stages(), (self.input_channels, height, width))
            .ok_or_else(|| Error::Shape(format!("input {height}x{width} is too small for the backbone")))
    }

    /// Number of frames produced for an input of width `width`.
    pub fn frames(&self, width: usize) -> Result<usize> {
        let trace = self.shape_trace(INPUT_HEIGHT, width)?;
        Ok(trace.last().map_or(width, |s| s.1 .2))
    }

    /// Inclusive input-column interval that can influence visual frame `t`,
    /// clipped to the image.
    pub fn receptive_field(&self, t: usize, width: usize) -> (usize, usize) {
        let (mut lo, mut hi) = (t as i64, t as i64);
        for (k, s, p) in backbone::horizontal_ops(&self.stages()).into_iter().rev() {
            lo = lo * s as i64 - p as i64;
            hi = hi * s as i64 - p as i64 + k as i64 - 1;
        }
        (lo.max(0) as usize, hi.min(width as i64 - 1) as usize)
    }
}

/// Draws fresh encoder weights.
pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, rng::purpose::INIT);
    let mut store = ParamStore::new();
    backbone::init(&cfg.stages(), &mut store, &mut rng);
    if cfg.sequence_modeling {
        let mut input = cfg.visual_dim();
        for l in 0..cfg.lstm_layers {
            nn::init_bilstm(&mut store, &format!("enc.seq.l{l}"), input, cfg.lstm_hidden, &mut rng);
            input = 2 * cfg.lstm_hidden;
        }
    }
    Ok(store)
}

/// Adds projection-head weights to `store`.
pub fn init_projection(store: &mut ParamStore, cfg: &EncoderConfig, seed: u64) {
    let mut rng = rng::stream(rng::mix(seed, 1), rng::purpose::INIT);
    let f = cfg.output_dim();
    match cfg.projection_head {
        ProjectionHead::None => {}
        ProjectionHead::MlpPerFrame => {
            nn::init_linear(store, "proj.fc1", f, f, &mut rng);
            nn::init_linear(store, "proj.fc2", f, cfg.projected_width, &mut rng);
        }
        ProjectionHead::Bilstm => nn::init_bilstm(store, "proj.lstm", f, cfg.projected_width, &mut rng),
    }
}

/// Backbone plus map-to-sequence: `[N, C, 32, W]` to `[N, T, F]`.
pub fn extract_visual<'g>(fw: &Forward<'g, '_>, cfg: &EncoderConfig, images: Var<'g>) -> Result<Var<'g>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != cfg.input_channels || s[2] != INPUT_HEIGHT {
        return Err(Error::Shape(format!(
            "encoder expects [N, {}, {INPUT_HEIGHT}, W] images, got {s:?}",
            cfg.input_channels
        )));
    }
    cfg.shape_trace(s[2], s[3])?;
    // pixels in [0, 1] are centered to [-1, 1]
    let maps = backbone::forward(fw, &cfg.stages(), images.scale(2.0).add_scalar(-1.0));
    // collapse any remaining height, then frames become the middle axis
    Ok(maps.mean_height().permute(&[0, 2, 1]))
}

/// Stacked BiLSTM over `[N, T, F]`; output `[N, T, 2·hidden]`.
pub fn model_sequence<'g>(fw: &Forward<'g, '_>, cfg: &EncoderConfig, v: Var<'g>) -> Var<'g> {
    let mut x = v;
    for l in 0..cfg.lstm_layers {
        x = nn::bilstm(fw, &format!("enc.seq.l{l}"), x);
    }
    x
}

/// The representation R: V, or H (optionally with V appended).
pub fn encode<'g>(fw: &Forward<'g, '_>, cfg: &EncoderConfig, images: Var<'g>) -> Result<Var<'g>> {
    let v = extract_visual(fw, cfg, images)?;
    if !cfg.sequence_modeling {
        return Ok(v);
    }
    let h = model_sequence(fw, cfg, v);
    Ok(if cfg.concat_visual { Var::cat(&[h, v], 2) } else { h })
}

/// Projection head g applied to `[N, T, F]`.
pub fn project<'g>(fw: &Forward<'g, '_>, cfg: &EncoderConfig, r: Var<'g>) -> Var<'g> {
    match cfg.projection_head {
        ProjectionHead::None => r,
        ProjectionHead::MlpPerFrame => {
            let hidden = nn::linear(fw, "proj.fc1", r).relu();
            nn::linear(fw, "proj.fc2", hidden)
        }
        ProjectionHead::Bilstm => nn::bilstm(fw, "proj.lstm", r),
    }
}

/// Inference-mode encoder output for a stacked image tensor.
pub fn features(params: &ParamStore, cfg: &EncoderConfig, images: &Tensor) -> Result<Tensor> {
    let graph = Graph::new();
    let fw = Forward::inference(&graph, params);
    let x = graph.constant(images.clone());
    let out = encode(&fw, cfg, x)?.value();
    Ok(Tensor::clone(&out))
}
