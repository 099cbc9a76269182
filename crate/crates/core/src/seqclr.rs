//! Instance mapping and the symmetric contrastive loss.
//!
//! Each projected map `[T, F]` is turned into instances by a mapping
//! function; the instances of the two views form aligned sets `Z^a`, `Z^b`
//! where row `r` of each comes from the same image and the same position.
//! Every other instance in `Z^a ∪ Z^b` is a negative, including other
//! windows of the same image.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default softmax temperature.
pub const DEFAULT_TAU: f64 = 0.1;
/// Norm floor of the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MappingChoice {
    /// Mean over all frames: one instance per image.
    AllToInstance,
    /// Adaptive average pooling into `windows` instances.
    WindowToInstance { windows: usize },
    /// Every frame is an instance.
    FrameToInstance,
    /// The whole map flattened into one vector (non-sequential baseline).
    WholeMapFlatten,
}

impl Default for MappingChoice {
    fn default() -> Self {
        MappingChoice::WindowToInstance { windows: 5 }
    }
}

impl MappingChoice {
    pub fn validate(&self) -> Result<()> {
        match self {
            MappingChoice::WindowToInstance { windows: 0 } => {
                Err(Error::Argument("window_to_instance needs at least one window".into()))
            }
            _ => Ok(()),
        }
    }

    /// Instances produced from a map with `t` frames.
    pub fn instance_count(&self, t: usize) -> usize {
        match self {
            MappingChoice::AllToInstance | MappingChoice::WholeMapFlatten => 1,
            MappingChoice::WindowToInstance { windows } => *windows,
            MappingChoice::FrameToInstance => t,
        }
    }
}

/// Frame interval `[⌊jT/T′⌋, ⌈(j+1)T/T′⌉)` of each adaptive-pooling window.
pub fn window_bounds(t: usize, windows: usize) -> Vec<(usize, usize)> {
    (0..windows)
        .map(|j| ((j * t) / windows, ((j + 1) * t).div_ceil(windows)))
        .collect()
}

/// Maps one `[T, F]` frame matrix (rows are frames) to instance vectors.
pub fn map_instances(frames: &Tensor, choice: MappingChoice) -> Result<Vec<Vec<f64>>> {
    choice.validate()?;
    if frames.rank() != 2 || frames.dim(0) == 0 {
        return Err(Error::Shape(format!("expected a non-empty [T, F] map, got {:?}", frames.shape())));
    }
    let (t, f) = (frames.dim(0), frames.dim(1));
    let mean = |s: usize, e: usize| -> Vec<f64> {
        (0..f)
            .map(|k| (s..e).map(|i| frames.data()[i * f + k]).sum::<f64>() / (e - s) as f64)
            .collect()
    };
    Ok(match choice {
        MappingChoice::AllToInstance => vec![mean(0, t)],
        MappingChoice::WindowToInstance { windows } => {
            window_bounds(t, windows).into_iter().map(|(s, e)| mean(s, e)).collect()
        }
        MappingChoice::FrameToInstance => (0..t).map(|i| frames.row(i).to_vec()).collect(),
        MappingChoice::WholeMapFlatten => vec![frames.data().to_vec()],
    })
}

/// Differentiable mapping of a batch `[N, T, F]` to instances `[N·T′, F′]`,
/// image-major.
pub fn map_instances_var<'g>(p: Var<'g>, choice: MappingChoice) -> Result<Var<'g>> {
    choice.validate()?;
    let s = p.shape();
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::Shape(format!("expected a [N, T, F] map, got {s:?}")));
    }
    let (n, t, f) = (s[0], s[1], s[2]);
    Ok(match choice {
        MappingChoice::AllToInstance => p.mean_dim(1).reshape(&[n, f]),
        MappingChoice::FrameToInstance => p.reshape(&[n * t, f]),
        MappingChoice::WholeMapFlatten => p.reshape(&[n, t * f]),
        MappingChoice::WindowToInstance { windows } => {
            // same reduction as the all-frames mean, so T' = 1 and T' = T agree bit for bit
            let parts: Vec<Var> = window_bounds(t, windows)
                .into_iter()
                .map(|(s, e)| p.narrow(1, s, e - s).mean_dim(1).reshape(&[n, 1, f]))
                .collect();
            Var::cat(&parts, 1).reshape(&[n * windows, f])
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub vector: Vec<f64>,
    pub image_index: usize,
    pub instance_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSet {
    pub instances: Vec<Instance>,
    pub side: Side,
}

impl InstanceSet {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Instance vectors stacked as `[M, D]`.
    pub fn matrix(&self) -> Tensor {
        let d = self.instances.first().map_or(0, |i| i.vector.len());
        let data = self.instances.iter().flat_map(|i| i.vector.iter().copied()).collect();
        Tensor::new(vec![self.instances.len(), d], data)
    }
}

/// Maps every image of both views and collects aligned instance sets.
/// Maps may differ in frame count between images but not between views.
pub fn assemble_sets(maps_a: &[Tensor], maps_b: &[Tensor], choice: MappingChoice) -> Result<(InstanceSet, InstanceSet)> {
    if maps_a.len() != maps_b.len() {
        return Err(Error::Alignment(format!("{} maps in view a, {} in view b", maps_a.len(), maps_b.len())));
    }
    let mut za = InstanceSet {
        instances: Vec::new(),
        side: Side::A,
    };
    let mut zb = InstanceSet {
        instances: Vec::new(),
        side: Side::B,
    };
    for (i, (a, b)) in maps_a.iter().zip(maps_b).enumerate() {
        if a.shape() != b.shape() {
            return Err(Error::Alignment(format!(
                "image {i}: view shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        for (set, map) in [(&mut za, a), (&mut zb, b)] {
            for (j, vector) in map_instances(map, choice)?.into_iter().enumerate() {
                set.instances.push(Instance {
                    vector,
                    image_index: i,
                    instance_index: j,
                });
            }
        }
    }
    Ok((za, zb))
}

/// Cosine similarity with both norms floored at [`COSINE_EPS`].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    dot / (na * nb)
}

/// `−log(exp(sim(a,p)/τ) / Σ_{u ∈ pool, u ≠ anchor} exp(sim(a,u)/τ))`.
/// `anchor` and `positive` index into `pool`.
pub fn nce_term(pool: &[&[f64]], anchor: usize, positive: usize, tau: f64) -> f64 {
    let a = pool[anchor];
    let logits: Vec<f64> = pool
        .iter()
        .enumerate()
        .filter(|(u, _)| *u != anchor)
        .map(|(_, u)| cosine(a, u) / tau)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - cosine(a, pool[positive]) / tau
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("temperature must be positive, got {tau}")))
    }
}

/// Symmetric loss summed over both anchors of every aligned pair, with the
/// pool `Z^a ∪ Z^b`.
pub fn contrastive_loss(za: &InstanceSet, zb: &InstanceSet, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if za.len() != zb.len() {
        return Err(Error::Alignment(format!("|Z^a| = {} but |Z^b| = {}", za.len(), zb.len())));
    }
    let m = za.len();
    let pool: Vec<&[f64]> = za
        .instances
        .iter()
        .chain(&zb.instances)
        .map(|i| i.vector.as_slice())
        .collect();
    Ok((0..m)
        .map(|r| nce_term(&pool, r, m + r, tau) + nce_term(&pool, m + r, r, tau))
        .sum())
}

/// Differentiable form of [`contrastive_loss`] on stacked instances `[M, D]`.
pub fn contrastive_loss_var<'g>(za: Var<'g>, zb: Var<'g>, tau: f64) -> Result<Var<'g>> {
    check_tau(tau)?;
    let (sa, sb) = (za.shape(), zb.shape());
    if sa != sb || sa.len() != 2 {
        return Err(Error::Alignment(format!("instance sets {sa:?} and {sb:?} are not aligned")));
    }
    let m = sa[0];
    let z = Var::cat(&[za, zb], 0).l2_normalize_rows(COSINE_EPS);
    let sim = z.matmul(z.transpose()).scale(1.0 / tau);
    let mut mask = Tensor::zeros(&[2 * m, 2 * m]);
    for r in 0..2 * m {
        mask.data_mut()[r * 2 * m + r] = -1e9;
    }
    let targets: Vec<usize> = (0..2 * m).map(|r| if r < m { m + r } else { r - m }).collect();
    Ok(sim.add_const(&mask).log_softmax().pick(&targets).sum().neg())
}
