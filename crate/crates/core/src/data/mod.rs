//! Datasets, augmentation pipelines and augmentation-distance analytics.

mod cifar;
mod distance;
mod policy;
mod synth;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use cifar::{load_cifar10_binary, load_cifar10_dir, write_cifar10_binary, CIFAR_RECORD_BYTES};
pub use distance::{augmentation_distances, histogram_mse, patch_mse, DistanceSummary, PATCH};
pub use policy::{apply_op, apply_policy, AugmentPolicy, OpName, PolicyOp, SubPolicy};
pub use synth::{synth_dataset, SynthOptions};

use crate::error::{Error, Result};
use crate::nn::ViewTag;
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

/// Images as `[n, c, h, w]` with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl ImageBatch {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let b = ImageBatch {
            images,
            labels,
            classes,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.shape().len() != 4 {
            return Err(Error::Dimension(format!(
                "images must be [n, c, h, w], got {:?}",
                self.images.shape()
            )));
        }
        if self.images.batch() != self.labels.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} labels",
                self.images.batch(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Format(format!("label {bad} outside 0..{}", self.classes)));
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format("pixel outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[c, h, w]`
    pub fn dims(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        Tensor::from_vec(&self.dims(), self.images.row(i).to_vec()).expect("image shape")
    }

    pub fn subset(&self, indices: &[usize]) -> ImageBatch {
        ImageBatch {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> ImageBatch {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Deterministically holds out `val_size` samples; returns `(train, validation)`.
    pub fn split_validation(&self, val_size: usize, seed: u64) -> Result<(ImageBatch, ImageBatch)> {
        if val_size >= self.len() {
            return Err(Error::Argument(format!(
                "validation size {val_size} leaves no training data out of {}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut stream(seed, 0, 0, Purpose::Split, 0));
        let (train, val) = idx.split_at(self.len() - val_size);
        let mut train = train.to_vec();
        let mut val = val.to_vec();
        train.sort_unstable();
        val.sort_unstable();
        Ok((self.subset(&train), self.subset(&val)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub images: Tensor<f32>,
    pub tag: ViewTag,
}

/// One base view followed by the complex views, all aligned to the same source samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedViewBatch {
    pub views: Vec<View>,
    pub labels: Vec<usize>,
    pub source_indices: Vec<usize>,
}

impl TaggedViewBatch {
    pub fn complex_count(&self) -> usize {
        self.views.iter().filter(|v| v.tag == ViewTag::Complex).count()
    }

    pub fn validate(&self) -> Result<()> {
        let bases = self.views.iter().filter(|v| v.tag == ViewTag::Base).count();
        if bases != 1 || self.views.first().map(|v| v.tag) != Some(ViewTag::Base) {
            return Err(Error::Routing("a view batch needs exactly one leading base view".into()));
        }
        let shape = self.views[0].images.shape();
        if self.views.iter().any(|v| v.images.shape() != shape) || shape[0] != self.labels.len() {
            return Err(Error::Dimension("views disagree in shape".into()));
        }
        Ok(())
    }
}

/// Zero-pads one `[c, h, w]` image by `pad`, crops back at offset `(dy, dx)` of
/// the padded canvas and optionally mirrors it horizontally.
pub fn crop_flip(src: &[f32], dims: [usize; 3], pad: usize, dy: usize, dx: usize, flip: bool, out: &mut [f32]) {
    let [c, h, w] = dims;
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    src[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    0.0
                };
                let ox = if flip { w - 1 - x } else { x };
                out[(ch * h + y) * w + ox] = v;
            }
        }
    }
}

/// Pad + random crop + random horizontal flip, sample by sample.
pub fn base_augment(images: &Tensor<f32>, pad: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let s = images.shape();
    let dims = [s[1], s[2], s[3]];
    let mut out = Tensor::zeros(s);
    for i in 0..images.batch() {
        let dy = rng.random_range(0..=2 * pad);
        let dx = rng.random_range(0..=2 * pad);
        let flip = rng.random_bool(0.5);
        crop_flip(images.row(i), dims, pad, dy, dx, flip, out.row_mut(i));
    }
    out
}

/// View 0 is the base pipeline; views `1..=t` run the policy first.
pub fn make_views(
    batch: &ImageBatch,
    t: usize,
    policy: &AugmentPolicy,
    pad: usize,
    rng: &mut impl Rng,
) -> Result<TaggedViewBatch> {
    let dims = batch.dims();
    let mut views = Vec::with_capacity(t + 1);
    let mut view_rng = ChaCha8Rng::seed_from_u64(rng.random());
    views.push(View {
        images: base_augment(&batch.images, pad, &mut view_rng),
        tag: ViewTag::Base,
    });
    for _ in 0..t {
        let mut view_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let mut auto = Tensor::zeros(batch.images.shape());
        for i in 0..batch.len() {
            let img = apply_policy(batch.images.row(i), dims, policy, &mut view_rng)?;
            auto.row_mut(i).copy_from_slice(&img);
        }
        views.push(View {
            images: base_augment(&auto, pad, &mut view_rng),
            tag: ViewTag::Complex,
        });
    }
    Ok(TaggedViewBatch {
        views,
        labels: batch.labels.clone(),
        source_indices: (0..batch.len()).collect(),
    })
}
