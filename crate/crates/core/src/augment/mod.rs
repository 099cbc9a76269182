//! Sequence-preserving augmentation: seven photometric/geometric operators,
//! a random subset of which is applied in random order per view.

mod ops;

pub use ops::{apply_op, AugmentOp, BoundOp, Interval, OpKind, CONTRAST_PIVOT};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TextImage;
use crate::error::{Error, Result};
use crate::rng;

/// Operator inventory plus the bounds on how many are applied per view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub ops: Vec<AugmentOp>,
    pub min_ops: usize,
    pub max_ops: usize,
    /// Crops and warps are resized back to the source size. Always on; kept
    /// in the struct so serialized pipelines state it.
    #[serde(default = "yes")]
    pub resize_back: bool,
}

fn yes() -> bool {
    true
}

impl Default for PipelineSpec {
    fn default() -> Self {
        Self::standard(Interval(0.5, 1.5))
    }
}

impl PipelineSpec {
    /// The pretraining pipeline with a configurable blur range.
    pub fn standard(blur_sigma: Interval) -> Self {
        Self {
            ops: vec![
                AugmentOp::LinearContrast { alpha: Interval(0.5, 1.0) },
                AugmentOp::GaussianBlur { sigma: blur_sigma },
                AugmentOp::CropVertical { fraction: Interval(0.0, 0.4) },
                AugmentOp::CropHorizontal { fraction: Interval(0.0, 0.02) },
                AugmentOp::Sharpen {
                    alpha: Interval(0.0, 0.5),
                    lightness: Interval(0.0, 0.5),
                },
                AugmentOp::PiecewiseAffine {
                    scale: Interval(0.02, 0.03),
                    rows: 4,
                    cols: 4,
                },
                AugmentOp::Perspective { scale: Interval(0.01, 0.02) },
            ],
            min_ops: 1,
            max_ops: 5,
            resize_back: true,
        }
    }

    /// Mild cropping, contrast and blur for supervised decoder training.
    pub fn light() -> Self {
        Self {
            ops: vec![
                AugmentOp::CropVertical { fraction: Interval(0.0, 0.1) },
                AugmentOp::CropHorizontal { fraction: Interval(0.0, 0.01) },
                AugmentOp::LinearContrast { alpha: Interval(0.75, 1.0) },
                AugmentOp::GaussianBlur { sigma: Interval(0.0, 0.75) },
            ],
            min_ops: 1,
            max_ops: 2,
            resize_back: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.min_ops && self.min_ops <= self.max_ops && self.max_ops <= self.ops.len()) {
            return Err(Error::Config(format!(
                "augmentation needs 1 <= min_ops ({}) <= max_ops ({}) <= number of ops ({})",
                self.min_ops,
                self.max_ops,
                self.ops.len()
            )));
        }
        if !self.resize_back {
            return Err(Error::Config("resize_back must be true: views must keep the source size".into()));
        }
        for op in &self.ops {
            op.validate().map_err(Error::Config)?;
        }
        Ok(())
    }
}

/// Draws `k ~ U{min_ops..=max_ops}` distinct operators in uniformly random
/// order, each with freshly sampled parameters.
pub fn sample_pipeline(spec: &PipelineSpec, rng: &mut impl Rng) -> Vec<BoundOp> {
    let k = rng.random_range(spec.min_ops..=spec.max_ops);
    let mut chosen: Vec<usize> = (0..spec.ops.len()).collect();
    chosen.shuffle(rng);
    chosen.truncate(k);
    chosen.iter().map(|&i| spec.ops[i].sample(rng)).collect()
}

pub fn apply_pipeline(img: &TextImage, ops: &[BoundOp]) -> TextImage {
    ops.iter().fold(img.clone(), |acc, op| apply_op(&acc, op))
}

/// Two augmented views of one source image.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub view_a: TextImage,
    pub view_b: TextImage,
    pub source_index: usize,
}

/// Random stream for draw `view` (0 or 1) of image `index` under `seed`.
pub fn view_rng(seed: u64, index: usize, view: u64) -> rng::Rng {
    rng::stream(rng::mix(rng::mix(seed, index as u64), view), rng::purpose::AUGMENT)
}

/// Applies the default pipeline twice with independent draws.
pub fn augment_pair(img: &TextImage, seed: u64, index: usize) -> AugmentedPair {
    augment_pair_with(&PipelineSpec::default(), img, seed, index)
}

pub fn augment_pair_with(spec: &PipelineSpec, img: &TextImage, seed: u64, index: usize) -> AugmentedPair {
    let view = |v| apply_pipeline(img, &sample_pipeline(spec, &mut view_rng(seed, index, v)));
    AugmentedPair {
        view_a: view(0),
        view_b: view(1),
        source_index: index,
    }
}

/// One augmented view, for supervised training with augmentation.
pub fn augment_one(spec: &PipelineSpec, img: &TextImage, seed: u64, index: usize) -> TextImage {
    apply_pipeline(img, &sample_pipeline(spec, &mut view_rng(seed, index, 0)))
}
