use rand::seq::SliceRandom;

use super::{Charset, Manifest, TextImage};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Images of a manifest loaded into memory and resized to the encoder input
/// size, with encoded labels when the protocol is allowed to read them.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<TextImage>,
    labels: Option<Vec<Vec<usize>>>,
    texts: Option<Vec<String>>,
}

impl Dataset {
    /// Loads images only; labels are never read.
    pub fn load_unlabeled(manifest: &Manifest, channels: usize) -> Result<Self> {
        let images = (0..manifest.len())
            .map(|i| TextImage::load_preprocessed(&manifest.image_path(i), channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            images,
            labels: None,
            texts: None,
        })
    }

    /// Loads images and labels; the manifest must validate against `charset`.
    pub fn load(manifest: &Manifest, charset: &Charset, channels: usize) -> Result<Self> {
        manifest.validate(charset)?;
        let mut ds = Self::load_unlabeled(manifest, channels)?;
        let texts: Vec<String> = (0..manifest.len()).map(|i| manifest.label(i).to_string()).collect();
        ds.labels = Some(
            texts
                .iter()
                .map(|t| charset.encode(t).expect("validated above"))
                .collect(),
        );
        for (img, t) in ds.images.iter_mut().zip(&texts) {
            img.label = Some(t.clone());
        }
        ds.texts = Some(texts);
        Ok(ds)
    }

    pub fn from_images(images: Vec<TextImage>, labels: Option<(Vec<String>, Vec<Vec<usize>>)>) -> Self {
        let (texts, labels) = match labels {
            Some((t, l)) => (Some(t), Some(l)),
            None => (None, None),
        };
        Self { images, labels, texts }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &TextImage {
        &self.images[i]
    }

    pub fn images(&self) -> &[TextImage] {
        &self.images
    }

    pub fn labels(&self) -> Option<&[Vec<usize>]> {
        self.labels.as_deref()
    }

    pub fn texts(&self) -> Option<&[String]> {
        self.texts.as_deref()
    }

    pub fn channels(&self) -> usize {
        self.images.first().map_or(1, |i| i.channels())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i].clone()).collect()),
            texts: self.texts.as_ref().map(|t| indices.iter().map(|&i| t[i].clone()).collect()),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> LabeledBatch {
        LabeledBatch {
            indices: indices.to_vec(),
            images: stack(indices.iter().map(|&i| &self.images[i])),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i].clone()).collect()),
        }
    }
}

/// Stacks equally sized images into `[N, C, H, W]`.
pub fn stack<'a>(images: impl IntoIterator<Item = &'a TextImage>) -> Tensor {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for img in images {
        let d = (img.channels(), img.height(), img.width());
        assert!(dims.is_none_or(|x| x == d), "cannot stack images of different sizes");
        dims = Some(d);
        data.extend_from_slice(img.pixels());
        n += 1;
    }
    let (c, h, w) = dims.expect("stack of no images");
    Tensor::new(vec![n, c, h, w], data)
}

/// A batch of stacked images with their encoded labels, when available.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: Option<Vec<Vec<usize>>>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Seeded epoch permutations cut into batches; the last batch may be short.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument("cannot batch an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Argument("batch size must be at least 1".into()));
        }
        Ok(Self { n, batch_size, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut rng::stream(rng::mix(self.seed, epoch), rng::purpose::SHUFFLE));
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Index batches for global step `step`, walking epochs back to back.
    pub fn step(&self, step: usize) -> Vec<usize> {
        let per = self.batches_per_epoch();
        let epoch = (step / per) as u64;
        self.epoch(epoch).swap_remove(step % per)
    }
}

/// One epoch of batches over `dataset` in seeded order.
pub fn make_batches(dataset: &Dataset, batch_size: usize, shuffle_seed: u64) -> Result<impl Iterator<Item = LabeledBatch> + '_> {
    let sampler = BatchSampler::new(dataset.len(), batch_size, shuffle_seed)?;
    Ok(sampler.epoch(0).into_iter().map(move |idx| dataset.batch(&idx)))
}
