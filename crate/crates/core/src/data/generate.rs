//! Procedural paired-view lesion images.
//!
//! Every sample is one latent lesion seen from two planes. The lesion has a
//! physical area (mm²) and an echo texture (stripe frequency); the grade sets
//! both. The longitudinal view draws the lesion as an ellipse elongated along
//! the vessel axis, the transverse view as a round cross-section. Pixel areas
//! follow from the per-sample spacing (mm/pixel), so absolute size is only
//! recoverable together with the spacing channel.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BACKGROUND: f64 = 0.1;
const LESION_FLOOR: f64 = 0.6;
const LESION_SPAN: f64 = 0.4;
const LONG_ASPECT: f64 = 2.0;

/// How the grade is spread over the two views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueLayout {
    /// Longitudinal size carries `ceil(k/2)`, transverse texture carries
    /// `floor(k/2)`; only the pair determines the grade.
    Complementary,
    /// Both views carry the full grade in size and texture.
    Redundant,
}

impl CueLayout {
    /// (size level, texture level) for grade `k`.
    pub fn levels(self, k: usize) -> (usize, usize) {
        match self {
            CueLayout::Complementary => (k.div_ceil(2), k / 2),
            CueLayout::Redundant => (k, k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    /// Number of sample pairs.
    pub n: usize,
    pub num_classes: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Intensity channels per view, before the spacing channel.
    pub in_channels: usize,
    /// Relative class frequencies; empty means balanced.
    pub class_weights: Vec<f64>,
    pub cue_layout: CueLayout,
    /// Physical lesion area of the smallest grade, mm².
    pub base_area_mm2: f64,
    /// Relative area increase per size level.
    pub size_gap: f64,
    /// Log-normal sigma of the lesion area.
    pub size_noise: f64,
    /// Stripe frequency of the lowest texture level, cycles/pixel.
    pub base_frequency: f64,
    /// Stripe-frequency increase per texture level, cycles/pixel.
    pub texture_gap: f64,
    pub texture_noise: f64,
    /// Drop in lesion brightness per texture level (darker, echolucent lesions).
    pub echo_gap: f64,
    /// Additive Gaussian pixel noise.
    pub pixel_noise: f64,
    /// Physical width of the image, mm; sets the nominal spacing.
    pub field_of_view_mm: f64,
    /// Spacing is nominal × U(1 − jitter, 1 + jitter).
    pub spacing_jitter: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            n: 600,
            num_classes: 3,
            image_size: 32,
            in_channels: 1,
            class_weights: vec![518.0, 772.0, 367.0],
            cue_layout: CueLayout::Complementary,
            base_area_mm2: 0.5,
            size_gap: 1.5,
            size_noise: 0.1,
            base_frequency: 0.08,
            texture_gap: 0.25,
            texture_noise: 0.02,
            echo_gap: 0.35,
            pixel_noise: 0.08,
            field_of_view_mm: 3.2,
            spacing_jitter: 0.15,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.n < self.num_classes {
            return bad(format!("n = {} is smaller than the class count", self.n));
        }
        if !self.class_weights.is_empty() && self.class_weights.len() != self.num_classes {
            return bad(format!(
                "{} class weights for {} classes",
                self.class_weights.len(),
                self.num_classes
            ));
        }
        if self.class_weights.iter().any(|w| !(*w > 0.0)) {
            return bad("class weights must be positive".into());
        }
        if self.image_size < 8 || self.in_channels == 0 {
            return bad("image_size must be ≥ 8 and in_channels ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.spacing_jitter) || self.field_of_view_mm <= 0.0 {
            return bad("spacing_jitter must be in [0, 1) and field_of_view_mm positive".into());
        }
        if self.base_area_mm2 <= 0.0 || self.size_gap < 0.0 || self.size_noise < 0.0 {
            return bad("lesion size parameters must be non-negative (base area positive)".into());
        }
        if self.base_frequency < 0.0 || self.texture_gap < 0.0 || !(0.0..=LESION_FLOOR).contains(&self.echo_gap) {
            return bad("stripe frequencies must be non-negative and echo_gap in [0, 0.6]".into());
        }
        if self.texture_noise < 0.0 || self.pixel_noise < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }

    pub fn nominal_spacing(&self) -> f64 {
        self.field_of_view_mm / self.image_size as f64
    }

    /// Exact per-class counts by largest remainder over `class_weights`.
    pub fn class_counts(&self) -> Vec<usize> {
        let weights = if self.class_weights.is_empty() {
            vec![1.0; self.num_classes]
        } else {
            self.class_weights.clone()
        };
        largest_remainder(self.n, &weights)
    }
}

/// Splits `total` into integer parts proportional to `weights`, summing to
/// `total`. Remainders are handed out largest first, ties to the lower index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// A `channels × size × size` image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    /// Stable id in `[0, N)`; addresses the memory-bank slot.
    pub index: usize,
    pub label: usize,
    /// Physical pixel size, mm.
    pub spacing: f64,
    pub x_long: Image,
    pub x_trans: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub samples: Vec<SamplePair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// `(channels, height, width)` of each view.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let im = &self.samples[0].x_long;
        (im.channels, im.height, im.width)
    }
}

/// Independent generator for `(seed, stream, item)`.
pub fn rng_for(seed: u64, stream: u64, item: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(stream ^ splitmix(item))));
    rng.set_stream(stream);
    rng
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

const LABEL_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;

/// Generates a dataset; a pure function of `(seed, spec)`.
pub fn generate(seed: u64, spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut labels: Vec<usize> = spec
        .class_counts()
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
        .collect();
    labels.shuffle(&mut rng_for(seed, LABEL_STREAM, 0));

    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(index, label)| {
            let mut rng = rng_for(seed, SAMPLE_STREAM, index as u64);
            render_pair(&mut rng, spec, index, label)
        })
        .collect();
    Ok(Dataset {
        num_classes: spec.num_classes,
        samples,
    })
}

struct Lesion {
    area_px: f64,
    aspect: f64,
    frequency: f64,
    /// Subtracted from the lesion intensity.
    darkening: f64,
    cx: f64,
    cy: f64,
}

fn render_pair(rng: &mut ChaCha8Rng, spec: &GenSpec, index: usize, label: usize) -> SamplePair {
    let size = spec.image_size as f64;
    let spacing =
        spec.nominal_spacing() * (1.0 + spec.spacing_jitter * rng.random_range(-1.0..=1.0));
    let (size_level, texture_level) = spec.cue_layout.levels(label);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let area_mm2 = spec.base_area_mm2
        * (1.0 + spec.size_gap * size_level as f64)
        * (spec.size_noise * normal(rng)).exp();
    let frequency = (spec.base_frequency
        + spec.texture_gap * texture_level as f64
        + spec.texture_noise * normal(rng))
    .max(0.0);
    let darkening = spec.echo_gap * texture_level as f64;
    // Shared depth of the vessel wall, so both views agree on lesion placement.
    let wall = size / 2.0 + size * 0.08 * rng.random_range(-1.0..=1.0);
    let jitter = size * 0.1;

    let long = Lesion {
        area_px: area_mm2 / (spacing * spacing),
        aspect: LONG_ASPECT,
        frequency: match spec.cue_layout {
            CueLayout::Complementary => 0.0,
            CueLayout::Redundant => frequency,
        },
        darkening: match spec.cue_layout {
            CueLayout::Complementary => 0.0,
            CueLayout::Redundant => darkening,
        },
        cx: size / 2.0 + jitter * rng.random_range(-1.0..=1.0),
        cy: wall,
    };
    let trans_area_mm2 = match spec.cue_layout {
        // Foreshortened cross-section, unrelated to grade.
        CueLayout::Complementary => {
            spec.base_area_mm2 * (1.0 + spec.size_gap * rng.random_range(0.5..=1.0))
        }
        CueLayout::Redundant => area_mm2,
    };
    let trans = Lesion {
        area_px: trans_area_mm2 / (spacing * spacing),
        aspect: 1.0,
        frequency,
        darkening,
        cx: size / 2.0 + jitter * rng.random_range(-1.0..=1.0),
        cy: wall,
    };
    let x_long = render_view(rng, spec, &long);
    let x_trans = render_view(rng, spec, &trans);
    SamplePair {
        index,
        label,
        spacing,
        x_long,
        x_trans,
    }
}

fn render_view(rng: &mut ChaCha8Rng, spec: &GenSpec, lesion: &Lesion) -> Image {
    let n = spec.image_size;
    let semi_x = (lesion.area_px * lesion.aspect / PI).sqrt();
    let semi_y = (lesion.area_px / (lesion.aspect * PI)).sqrt();
    let phase = rng.random_range(0.0..2.0 * PI);
    let mut data = Vec::with_capacity(spec.in_channels * n * n);
    for _ in 0..spec.in_channels {
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let dx = (px - lesion.cx) / semi_x;
                let dy = (py - lesion.cy) / semi_y;
                let clean = if dx * dx + dy * dy <= 1.0 {
                    let stripe = 0.5 + 0.5 * (2.0 * PI * lesion.frequency * px + phase).cos();
                    LESION_FLOOR + LESION_SPAN * stripe - lesion.darkening
                } else {
                    BACKGROUND
                };
                let noise: f64 = rng.sample(StandardNormal);
                data.push((clean + spec.pixel_noise * noise) as f32);
            }
        }
    }
    Image {
        channels: spec.in_channels,
        height: n,
        width: n,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_class_counts() {
        let spec = GenSpec {
            n: 1657,
            ..GenSpec::default()
        };
        assert_eq!(spec.class_counts(), vec![518, 772, 367]);
    }

    #[test]
    fn desk_scale_counts_sum_to_n() {
        let counts = GenSpec::default().class_counts();
        assert_eq!(counts.iter().sum::<usize>(), 600);
        assert_eq!(counts, vec![188, 279, 133]);
    }

    #[test]
    fn complementary_levels_recover_grade() {
        for k in 0..7 {
            let (s, t) = CueLayout::Complementary.levels(k);
            assert_eq!(s + t, k);
        }
        assert_eq!(CueLayout::Complementary.levels(1), (1, 0));
        assert_eq!(CueLayout::Complementary.levels(2), (1, 1));
    }

    #[test]
    fn rejects_degenerate_specs() {
        let one_class = GenSpec {
            num_classes: 1,
            class_weights: vec![],
            ..GenSpec::default()
        };
        assert!(generate(0, &one_class).is_err());
        let tiny = GenSpec {
            n: 2,
            ..GenSpec::default()
        };
        assert!(matches!(generate(0, &tiny), Err(Error::Config(_))));
    }
}
