//! Convolutional backbones described as a flat stage plan, so the forward
//! pass, the shape trace and the receptive-field computation share one
//! definition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{conv_out, Conv2dSpec, Pool2dSpec, Var};
use crate::nn::{self, Forward, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Backbone {
    /// Four conv3×3 + BN + ReLU + max-pool blocks; height 32 collapses to 1 and
    /// width 100 gives 26 frames.
    ToyCnn { channels: [usize; 4] },
    /// 29-layer residual network with batch norm. `output_channels` is the
    /// frame dimension F (512 at full scale) and must be divisible by 16.
    Resnet29 { output_channels: usize },
}

#[derive(Clone, Debug)]
pub(crate) enum Stage {
    /// Convolution followed by optional batch norm, then ReLU.
    Conv {
        name: String,
        input: usize,
        output: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        bn: bool,
    },
    Pool(Pool2dSpec),
    /// Basic residual block of two 3×3 convolutions; a 1×1 projection
    /// shortcut is used when the channel count changes.
    Block { name: String, input: usize, output: usize },
}

fn conv(name: String, input: usize, output: usize, k: (usize, usize), s: (usize, usize), p: (usize, usize), bn: bool) -> Stage {
    Stage::Conv {
        name,
        input,
        output,
        kernel: k,
        stride: s,
        padding: p,
        bn,
    }
}

fn pool(k: (usize, usize), s: (usize, usize), p: (usize, usize)) -> Stage {
    Stage::Pool(Pool2dSpec {
        kernel: k,
        stride: s,
        padding: p,
    })
}

pub(crate) fn plan(backbone: &Backbone, input_channels: usize, prefix: &str) -> Vec<Stage> {
    match backbone {
        Backbone::ToyCnn { channels } => {
            let pools = [
                pool((2, 2), (2, 2), (0, 0)),
                pool((2, 2), (2, 2), (0, 0)),
                pool((2, 2), (2, 1), (0, 1)),
                pool((4, 1), (4, 1), (0, 0)),
            ];
            let mut stages = Vec::new();
            let mut c = input_channels;
            for (i, (&out, p)) in channels.iter().zip(pools).enumerate() {
                stages.push(conv(format!("{prefix}.conv{i}"), c, out, (3, 3), (1, 1), (1, 1), true));
                stages.push(p);
                c = out;
            }
            stages
        }
        Backbone::Resnet29 { output_channels: out } => {
            let blocks = [out / 4, out / 2, *out, *out];
            let counts = [1, 2, 5, 3];
            let mut stages = vec![
                conv(format!("{prefix}.conv0_1"), input_channels, out / 16, (3, 3), (1, 1), (1, 1), true),
                conv(format!("{prefix}.conv0_2"), out / 16, out / 8, (3, 3), (1, 1), (1, 1), true),
                pool((2, 2), (2, 2), (0, 0)),
            ];
            let mut c = out / 8;
            for (layer, (&width, &count)) in blocks.iter().zip(&counts).enumerate() {
                for b in 0..count {
                    stages.push(Stage::Block {
                        name: format!("{prefix}.layer{}.{b}", layer + 1),
                        input: c,
                        output: width,
                    });
                    c = width;
                }
                match layer {
                    0 => {
                        stages.push(conv(format!("{prefix}.conv1"), c, c, (3, 3), (1, 1), (1, 1), true));
                        stages.push(pool((2, 2), (2, 2), (0, 0)));
                    }
                    1 => {
                        stages.push(conv(format!("{prefix}.conv2"), c, c, (3, 3), (1, 1), (1, 1), true));
                        stages.push(pool((2, 2), (2, 1), (0, 1)));
                    }
                    2 => stages.push(conv(format!("{prefix}.conv3"), c, c, (3, 3), (1, 1), (1, 1), true)),
                    _ => {
                        stages.push(conv(format!("{prefix}.conv4_1"), c, c, (2, 2), (2, 1), (0, 1), true));
                        stages.push(conv(format!("{prefix}.conv4_2"), c, c, (2, 2), (1, 1), (0, 0), true));
                    }
                }
            }
            stages
        }
    }
}

pub(crate) fn output_channels(backbone: &Backbone) -> usize {
    match backbone {
        Backbone::ToyCnn { channels } => channels[3],
        Backbone::Resnet29 { output_channels } => *output_channels,
    }
}

pub(crate) fn init(stages: &[Stage], store: &mut ParamStore, rng: &mut impl Rng) {
    for stage in stages {
        match stage {
            Stage::Conv {
                name,
                input,
                output,
                kernel,
                bn,
                ..
            } => {
                nn::init_conv(store, name, *input, *output, *kernel, !bn, rng);
                if *bn {
                    nn::init_batch_norm(store, &format!("{name}.bn"), *output);
                }
            }
            Stage::Pool(_) => {}
            Stage::Block { name, input, output } => {
                nn::init_conv(store, &format!("{name}.conv1"), *input, *output, (3, 3), false, rng);
                nn::init_batch_norm(store, &format!("{name}.bn1"), *output);
                nn::init_conv(store, &format!("{name}.conv2"), *output, *output, (3, 3), false, rng);
                nn::init_batch_norm(store, &format!("{name}.bn2"), *output);
                if input != output {
                    nn::init_conv(store, &format!("{name}.down"), *input, *output, (1, 1), false, rng);
                    nn::init_batch_norm(store, &format!("{name}.down.bn"), *output);
                }
            }
        }
    }
}

const SAME3: Conv2dSpec = Conv2dSpec {
    stride: (1, 1),
    padding: (1, 1),
};

pub(crate) fn forward<'g>(fw: &Forward<'g, '_>, stages: &[Stage], mut x: Var<'g>) -> Var<'g> {
    for stage in stages {
        x = match stage {
            Stage::Conv {
                name,
                stride,
                padding,
                bn,
                ..
            } => {
                let y = nn::conv2d(
                    fw,
                    name,
                    x,
                    Conv2dSpec {
                        stride: *stride,
                        padding: *padding,
                    },
                );
                let y = if *bn { nn::batch_norm(fw, &format!("{name}.bn"), y) } else { y };
                y.relu()
            }
            Stage::Pool(spec) => x.max_pool2d(*spec),
            Stage::Block { name, input, output } => {
                let y = nn::conv2d(fw, &format!("{name}.conv1"), x, SAME3);
                let y = nn::batch_norm(fw, &format!("{name}.bn1"), y).relu();
                let y = nn::conv2d(fw, &format!("{name}.conv2"), y, SAME3);
                let y = nn::batch_norm(fw, &format!("{name}.bn2"), y);
                let shortcut = if input != output {
                    let s = nn::conv2d(
                        fw,
                        &format!("{name}.down"),
                        x,
                        Conv2dSpec {
                            stride: (1, 1),
                            padding: (0, 0),
                        },
                    );
                    nn::batch_norm(fw, &format!("{name}.down.bn"), s)
                } else {
                    x
                };
                y.add(shortcut).relu()
            }
        };
    }
    x
}

/// Output `(channels, height, width)` after every stage, computed without
/// running the network. `None` once a stage no longer fits its input.
pub(crate) fn trace(stages: &[Stage], input: (usize, usize, usize)) -> Option<Vec<(String, (usize, usize, usize))>> {
    let (mut c, mut h, mut w) = input;
    let mut out = Vec::with_capacity(stages.len());
    let fits = |size: usize, k: usize, p: usize| size + 2 * p >= k;
    for stage in stages {
        let label = match stage {
            Stage::Conv {
                name,
                output,
                kernel,
                stride,
                padding,
                ..
            } => {
                if !fits(h, kernel.0, padding.0) || !fits(w, kernel.1, padding.1) {
                    return None;
                }
                h = conv_out(h, kernel.0, stride.0, padding.0);
                w = conv_out(w, kernel.1, stride.1, padding.1);
                c = *output;
                name.clone()
            }
            Stage::Pool(p) => {
                if !fits(h, p.kernel.0, p.padding.0) || !fits(w, p.kernel.1, p.padding.1) {
                    return None;
                }
                h = conv_out(h, p.kernel.0, p.stride.0, p.padding.0);
                w = conv_out(w, p.kernel.1, p.stride.1, p.padding.1);
                format!("maxpool{:?}s{:?}p{:?}", p.kernel, p.stride, p.padding)
            }
            Stage::Block { name, output, .. } => {
                c = *output;
                name.clone()
            }
        };
        out.push((label, (c, h, w)));
    }
    Some(out)
}

/// Horizontal `(kernel, stride, padding)` of every spatial operation, in order.
pub(crate) fn horizontal_ops(stages: &[Stage]) -> Vec<(usize, usize, usize)> {
    let mut ops = Vec::new();
    for stage in stages {
        match stage {
            Stage::Conv {
                kernel, stride, padding, ..
            } => ops.push((kernel.1, stride.1, padding.1)),
            Stage::Pool(p) => ops.push((p.kernel.1, p.stride.1, p.padding.1)),
            Stage::Block { .. } => {
                ops.push((3, 1, 1));
                ops.push((3, 1, 1));
            }
        }
    }
    ops
}
