//! Synthetic patch and slide datasets with two independent difficulty knobs.
//!
//! Class identity lives in texture: each image carries a striation whose
//! spatial frequency grows with the class index, over a blob background. That
//! content is rendered in stain-density space and then mapped to RGB through a
//! per-instance [`StainParams`] drawn around a family base matrix. The
//! perturbation scale `instance_gap_strength` controls how far each image's
//! color statistics drift from the dataset average.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Image;
use crate::data::{LabeledBag, LabeledPatch};
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StainFamily {
    #[default]
    HeLike,
    IhcLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub stain_family: StainFamily,
    pub instance_gap_strength: f64,
    /// Striation frequency step between classes, in cycles per image.
    pub texture_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            samples_per_class: 25,
            image_size: 16,
            stain_family: StainFamily::HeLike,
            instance_gap_strength: 0.3,
            texture_scale: 1.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic num_classes must be at least 2".into()));
        }
        if self.samples_per_class < 1 {
            return Err(Error::Config("synthetic samples_per_class must be at least 1".into()));
        }
        if self.image_size < 2 {
            return Err(Error::Config("synthetic image_size must be at least 2".into()));
        }
        if self.instance_gap_strength.is_nan() || self.instance_gap_strength < 0.0 {
            return Err(Error::Config("instance_gap_strength must be non-negative".into()));
        }
        Ok(())
    }
}

/// Pixelwise affine color map `rgb = matrix * x + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainParams {
    pub matrix: [[f64; 3]; 3],
    pub offset: [f64; 3],
}

impl StainParams {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            offset: [0.0; 3],
        }
    }

    /// Base map of a stain family: white background minus density-weighted
    /// optical-density colors (one column per stain).
    pub fn base(family: StainFamily) -> Self {
        let columns: [[f64; 3]; 3] = match family {
            // hematoxylin, eosin, residual
            StainFamily::HeLike => [[0.65, 0.70, 0.29], [0.07, 0.99, 0.11], [0.27, 0.57, 0.78]],
            // hematoxylin, DAB, residual
            StainFamily::IhcLike => [[0.65, 0.70, 0.29], [0.27, 0.57, 0.78], [0.71, 0.42, 0.56]],
        };
        let mut matrix = [[0.0; 3]; 3];
        for (j, col) in columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                matrix[i][j] = -0.8 * v;
            }
        }
        Self {
            matrix,
            offset: [1.0; 3],
        }
    }

    /// Base map plus Gaussian perturbation: scale `sigma` on the matrix and
    /// `sigma / 2` on the offset.
    pub fn sample<R: Rng + ?Sized>(family: StainFamily, sigma: f64, rng: &mut R) -> Self {
        let mut p = Self::base(family);
        if sigma == 0.0 {
            return p;
        }
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        for row in p.matrix.iter_mut() {
            for v in row.iter_mut() {
                *v += sigma * n.sample(rng);
            }
        }
        for v in p.offset.iter_mut() {
            *v += 0.5 * sigma * n.sample(rng);
        }
        p
    }
}

pub fn apply_stain_transform(image: &Image, stain: &StainParams) -> Image {
    let mut out = image.clone();
    for mut px in out.lanes_mut(ndarray::Axis(2)) {
        let x = [px[0], px[1], px[2]];
        for c in 0..3 {
            let m = &stain.matrix[c];
            let v = m[0] * x[0] + m[1] * x[1] + m[2] * x[2] + stain.offset[c];
            px[c] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Stain-density content for one instance of `class`; channels are
/// (striation, blobs, residual), each in `[0, 1]`.
pub fn render_content<R: Rng + ?Sized>(class: usize, size: usize, texture_scale: f64, rng: &mut R) -> Image {
    let theta = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..2.0 * PI);
    let freq = texture_scale * (1 + class) as f64 * rng.random_range(0.92..1.08);
    let (ct, st) = (theta.cos(), theta.sin());
    let s = size as f64;
    let blobs: Vec<(f64, f64, f64)> = (0..rng.random_range(1..=3))
        .map(|_| (rng.random_range(0.0..s), rng.random_range(0.0..s), rng.random_range(0.3..0.6)))
        .collect();
    let radius = s / 6.0;
    let mut img = Image::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let stripe = 0.5 + 0.45 * (2.0 * PI * freq * (fx * ct + fy * st) / s + phase).sin();
            let blob: f64 = blobs
                .iter()
                .map(|(bx, by, a)| {
                    let d2 = (fx - bx).powi(2) + (fy - by).powi(2);
                    a * (-d2 / (2.0 * radius * radius)).exp()
                })
                .sum();
            img[[y, x, 0]] = stripe;
            img[[y, x, 1]] = (0.3 + blob).min(1.0);
            img[[y, x, 2]] = 0.1 * rng.random::<f64>();
        }
    }
    img
}

fn render_instance(spec: &SynthSpec, class: usize, stream: &str, index: u64) -> Image {
    let content = render_content(
        class,
        spec.image_size,
        spec.texture_scale,
        &mut rng_for(spec.seed, &format!("{stream}.content"), index),
    );
    let stain = StainParams::sample(
        spec.stain_family,
        spec.instance_gap_strength,
        &mut rng_for(spec.seed, &format!("{stream}.stain"), index),
    );
    apply_stain_transform(&content, &stain)
}

/// `num_classes * samples_per_class` patches, classes interleaved.
pub fn generate_patch_dataset(spec: &SynthSpec) -> Result<Vec<LabeledPatch>> {
    spec.validate()?;
    let total = spec.num_classes * spec.samples_per_class;
    Ok((0..total)
        .into_par_iter()
        .map(|j| {
            let class = j % spec.num_classes;
            LabeledPatch {
                image: render_instance(spec, class, "patch", j as u64),
                label: class,
                instance_id: format!("p{j:05}"),
            }
        })
        .collect())
}

/// Bags whose members follow a bag-specific mixture over grades `0..=g`, with
/// at least one grade-`g` member, so the slide label is `g`.
pub fn generate_wsi_bags(spec: &SynthSpec, bag_size_range: (usize, usize), num_bags: usize) -> Result<Vec<LabeledBag>> {
    spec.validate()?;
    let (lo, hi) = bag_size_range;
    if lo < 1 || hi < lo {
        return Err(Error::Config(format!("invalid bag size range {lo}..={hi}")));
    }
    (0..num_bags)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_for(spec.seed, "bag", b as u64);
            let top = rng.random_range(0..spec.num_classes);
            let size = rng.random_range(lo..=hi);
            let weights: Vec<f64> = (0..=top).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = weights.iter().sum();
            let grades: Vec<usize> = (0..size)
                .map(|i| {
                    if i == 0 {
                        return top;
                    }
                    let mut u = rng.random_range(0.0..total);
                    for (g, w) in weights.iter().enumerate() {
                        if u < *w {
                            return g;
                        }
                        u -= w;
                    }
                    top
                })
                .collect();
            let stream = format!("bag{b}");
            let patches = grades
                .into_iter()
                .enumerate()
                .map(|(i, g)| LabeledPatch {
                    image: render_instance(spec, g, &stream, i as u64),
                    label: g,
                    instance_id: format!("s{b:04}_p{i:03}"),
                })
                .collect();
            LabeledBag::from_patches(format!("slide{b:04}"), patches)
        })
        .collect()
}

/// What a generated dataset directory was built from (`spec.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub kind: String,
    pub synth: SynthSpec,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bag_size_range: Option<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_bags: Option<usize>,
}

pub fn mean_color(image: &Image) -> [f64; 3] {
    let n = (image.dim().0 * image.dim().1) as f64;
    let mut m = [0.0; 3];
    for px in image.lanes(ndarray::Axis(2)) {
        for c in 0..3 {
            m[c] += px[c];
        }
    }
    m.map(|v| v / n)
}

/// HSV hue in `[0, 1)` of an RGB triple; 0 for grays.
pub fn hue([r, g, b]: [f64; 3]) -> f64 {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 0.0 {
        return 0.0;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    h / 6.0
}
