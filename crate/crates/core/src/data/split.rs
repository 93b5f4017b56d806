use rand::seq::SliceRandom;

use crate::data::generate::{largest_remainder, rng_for, Dataset, Image};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const SPLIT_STREAM: u64 = 3;
const BATCH_STREAM: u64 = 4;

/// Disjoint train/val/test index lists covering `[0, N)`, each ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl SplitPart {
    pub fn name(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Val => "val",
            SplitPart::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitPart::Train),
            "val" => Some(SplitPart::Val),
            "test" => Some(SplitPart::Test),
            _ => None,
        }
    }
}

impl DatasetSplit {
    pub fn part(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }
}

/// Random split of `n` indices with sizes proportional to `ratios`
/// (train, val, test).
pub fn split(n: usize, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("bad split ratios {ratios:?}")));
    }
    let sizes = largest_remainder(n, &ratios);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, SPLIT_STREAM, 0));
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    let mut rest = order.as_slice();
    for (part, size) in parts.iter_mut().zip(sizes) {
        let (head, tail) = rest.split_at(size);
        *part = head.to_vec();
        part.sort_unstable();
        rest = tail;
    }
    let [train, val, test] = parts;
    Ok(DatasetSplit { train, val, test })
}

/// Shuffles `indices` for `(seed, epoch)` and chunks them; the last batch may
/// be short. Every index appears exactly once.
pub fn batches(indices: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut rng_for(seed, BATCH_STREAM, epoch));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// z-score parameters for the spacing plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpacingNorm {
    pub mean: f64,
    pub std: f64,
}

impl SpacingNorm {
    /// Statistics over the given samples (the training split).
    pub fn fit(dataset: &Dataset, indices: &[usize]) -> Self {
        let n = indices.len().max(1) as f64;
        let mean = indices.iter().map(|&i| dataset.samples[i].spacing).sum::<f64>() / n;
        let var = indices
            .iter()
            .map(|&i| (dataset.samples[i].spacing - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        SpacingNorm { mean, std }
    }

    pub fn apply(&self, spacing: f64) -> f64 {
        (spacing - self.mean) / self.std
    }
}

/// Appends a constant plane holding the normalised spacing.
pub fn attach_spacing_channel(image: &Image, spacing: f64, norm: &SpacingNorm) -> Result<Image> {
    if !(spacing > 0.0) {
        return Err(Error::invalid("attach_spacing_channel", format!("spacing {spacing} is not positive")));
    }
    let plane = image.height * image.width;
    let mut data = Vec::with_capacity(image.data.len() + plane);
    data.extend_from_slice(&image.data);
    data.extend(std::iter::repeat_n(norm.apply(spacing) as f32, plane));
    Ok(Image {
        channels: image.channels + 1,
        height: image.height,
        width: image.width,
        data,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Long,
    Trans,
}

/// Stacks one view of `indices` into a `[B, C_in + 1, H, W]` tensor.
pub fn view_batch(dataset: &Dataset, indices: &[usize], view: View, norm: &SpacingNorm) -> Result<Tensor> {
    let (c, h, w) = dataset.image_dims();
    let mut data = Vec::with_capacity(indices.len() * (c + 1) * h * w);
    for &i in indices {
        let s = &dataset.samples[i];
        let img = match view {
            View::Long => &s.x_long,
            View::Trans => &s.x_trans,
        };
        let with_spacing = attach_spacing_channel(img, s.spacing, norm)?;
        data.extend(with_spacing.data.iter().map(|&v| f64::from(v)));
    }
    Tensor::new(vec![indices.len(), c + 1, h, w], data)
}
