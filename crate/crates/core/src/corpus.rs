//! Deterministic synthetic concept corpora with ground-truth masks and a
//! controllable spurious-correlation dial, plus ingestion of externally
//! exported image/mask/activation directories.
//!
//! Every image is a pure function of (corpus seed, sample index), so a seed
//! reproduces the corpus byte for byte. Images are rendered to the u8 grid
//! and stored as f32 in [0,1]; this makes the PNG round trip exact.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag, SplitMix64};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

pub const IMAGE_SIZE: usize = 64;
pub const MASK_DOWNSCALE: usize = 4;
pub const FEATURE_SIZE: usize = IMAGE_SIZE / MASK_DOWNSCALE;
pub const MANIFEST_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// specs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
    Star,
    Diamond,
}

pub const ALL_SHAPES: [ShapeKind; 8] = [
    ShapeKind::Circle,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Cross,
    ShapeKind::Ring,
    ShapeKind::Bar,
    ShapeKind::Star,
    ShapeKind::Diamond,
];

impl ShapeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
            ShapeKind::Bar => "bar",
            ShapeKind::Star => "star",
            ShapeKind::Diamond => "diamond",
        }
    }

    pub fn class_index(&self) -> usize {
        ALL_SHAPES.iter().position(|s| s == self).unwrap()
    }

    pub fn from_name(name: &str) -> Option<ShapeKind> {
        ALL_SHAPES.iter().copied().find(|s| s.name() == name)
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillStyle {
    Color,
    Texture,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub concept_id: String,
    pub shape_kind: ShapeKind,
    pub fill_style: FillStyle,
    pub min_area_fraction: f32,
}

impl ConceptSpec {
    pub fn for_shape(kind: ShapeKind) -> Self {
        ConceptSpec {
            concept_id: kind.name().to_string(),
            shape_kind: kind,
            fill_style: FillStyle::Color,
            min_area_fraction: 0.01,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.min_area_fraction > 0.0 && self.min_area_fraction <= 0.5) {
            return Err(Error::InvalidConfig(format!(
                "min_area_fraction must be in (0, 0.5], got {}",
                self.min_area_fraction
            )));
        }
        // shapes are placed with a border margin; beyond ~0.2 of the image
        // area the sampler cannot reliably satisfy the constraint
        if self.min_area_fraction > 0.2 {
            return Err(Error::InfeasibleArea(self.min_area_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueKind {
    BackgroundTexture,
    CornerMarker,
    GlobalTint,
}

/// Spurious cue dial. `strength` is the probability that a positive image
/// carries the cue and that a negative image lacks it; 0.5 makes the cue
/// statistically independent of the label.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpuriousSpec {
    pub cue_kind: CueKind,
    pub strength: f64,
}

impl SpuriousSpec {
    pub fn corner(strength: f64) -> Self {
        SpuriousSpec {
            cue_kind: CueKind::CornerMarker,
            strength,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::InvalidConfig(format!(
                "spurious strength must be in [0,1], got {}",
                self.strength
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub n_train_pos: usize,
    pub n_train_neg: usize,
    pub n_test_pos: usize,
    pub n_test_neg: usize,
    pub n_buffer: usize,
}

impl CorpusCounts {
    /// Paper-scale defaults: 50/50 train, 100/100 test, 500 buffer.
    pub fn paper_default() -> Self {
        CorpusCounts {
            n_train_pos: 50,
            n_train_neg: 50,
            n_test_pos: 100,
            n_test_neg: 100,
            n_buffer: 500,
        }
    }

    pub fn total(&self) -> usize {
        self.n_train_pos + self.n_train_neg + self.n_test_pos + self.n_test_neg + self.n_buffer
    }

    fn validate(&self) -> Result<()> {
        if self.n_train_pos == 0 || self.n_train_neg == 0 {
            return Err(Error::InvalidConfig("empty train split".into()));
        }
        if self.n_train_pos != self.n_train_neg || self.n_test_pos != self.n_test_neg {
            return Err(Error::InvalidConfig(
                "train and test splits must be balanced".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Buffer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: usize,
    pub split: Split,
    /// concept presence
    pub label: bool,
    /// shape class of the rendered object
    pub class_label: usize,
    pub has_cue: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub image_size: usize,
    pub concept: Option<ConceptSpec>,
    pub spurious: Option<SpuriousSpec>,
    pub seed: u64,
    pub classes: Vec<String>,
    pub samples: Vec<SampleMeta>,
}

/// A labeled image set with per-image masks and split/cue bookkeeping.
/// `activations`, when present (external ingest), bypass the embedded CNN.
#[derive(Debug, Clone)]
pub struct ConceptCorpus {
    pub manifest: CorpusManifest,
    pub images: Vec<Tensor>,
    pub masks: Vec<Tensor>,
    pub activations: Option<Vec<Tensor>>,
}

impl ConceptCorpus {
    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn concept_id(&self) -> &str {
        self.manifest
            .concept
            .as_ref()
            .map(|c| c.concept_id.as_str())
            .unwrap_or("classes")
    }

    pub fn meta(&self, i: usize) -> &SampleMeta {
        &self.manifest.samples[i]
    }

    pub fn indices(&self, split: Split, label: Option<bool>) -> Vec<usize> {
        self.manifest
            .samples
            .iter()
            .filter(|s| s.split == split && label.map_or(true, |l| s.label == l))
            .map(|s| s.index)
            .collect()
    }

    pub fn mask16(&self, i: usize) -> Tensor {
        downscale_mask(&self.masks[i])
    }

    /// Output pixel comes from `x` where the mask is set and from `donor`
    /// elsewhere; the donor must be concept-free according to the manifest.
    pub fn replace_background_checked(&self, index: usize, donor_index: usize) -> Result<Tensor> {
        if self.meta(donor_index).label {
            return Err(Error::DonorContainsConcept { donor_index });
        }
        Ok(replace_background(
            &self.images[index],
            &self.masks[index],
            &self.images[donor_index],
        ))
    }

    /// Applies one label-preserving transformation to sample `index`.
    /// Background replacement draws a seeded donor from concept-free test
    /// images.
    pub fn augment(&self, index: usize, kind: AugmentKind, seed: u64) -> Result<Tensor> {
        let x = &self.images[index];
        match kind {
            AugmentKind::HFlip => Ok(hflip(x)),
            AugmentKind::Grayscale => Ok(grayscale(x)),
            AugmentKind::GaussianNoise(sigma) => Ok(gaussian_noise(x, sigma, seed)),
            AugmentKind::BackgroundReplace => {
                let donors = self.indices(Split::Test, Some(false));
                if donors.is_empty() {
                    return Err(Error::EmptyClass("background donor"));
                }
                let mut rng = SplitMix64::new(derive_seed(seed, &[tag("bg-donor"), index as u64]));
                let donor = donors[rng.range_usize(donors.len())];
                self.replace_background_checked(index, donor)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    HFlip,
    Grayscale,
    GaussianNoise(f32),
    BackgroundReplace,
}

impl AugmentKind {
    pub fn name(&self) -> &'static str {
        match self {
            AugmentKind::HFlip => "flip",
            AugmentKind::Grayscale => "grayscale",
            AugmentKind::GaussianNoise(_) => "noise",
            AugmentKind::BackgroundReplace => "background",
        }
    }
}

// ---------------------------------------------------------------------------
// pixel-level operations
// ---------------------------------------------------------------------------

/// Block-averages a 64x64 binary mask to the 16x16 feature-map grid; cells
/// with at least half coverage are set. Integer counting keeps it exact.
pub fn downscale_mask(mask: &Tensor) -> Tensor {
    let n = FEATURE_SIZE;
    let k = MASK_DOWNSCALE;
    let mut out = Tensor::zeros(&[n, n]);
    for cy in 0..n {
        for cx in 0..n {
            let mut count = 0usize;
            for dy in 0..k {
                for dx in 0..k {
                    if mask.at(&[cy * k + dy, cx * k + dx]) > 0.5 {
                        count += 1;
                    }
                }
            }
            if count >= k * k / 2 {
                out.set(&[cy, cx], 1.0);
            }
        }
    }
    out
}

/// output = x on the mask, donor off the mask. Pure pixel partition; the
/// manifest-aware wrapper lives on `ConceptCorpus`.
pub fn replace_background(x: &Tensor, mask: &Tensor, donor: &Tensor) -> Tensor {
    let mut out = donor.clone();
    let (h, w) = (IMAGE_SIZE, IMAGE_SIZE);
    for c in 0..3 {
        for y in 0..h {
            for xx in 0..w {
                if mask.at(&[y, xx]) > 0.5 {
                    out.set(&[c, y, xx], x.at(&[c, y, xx]));
                }
            }
        }
    }
    out
}

pub fn hflip(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(x.shape());
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out.set(&[ch, y, w - 1 - xx], x.at(&[ch, y, xx]));
            }
        }
    }
    out
}

/// Rec. 601 luminance replicated to all channels.
pub fn grayscale(x: &Tensor) -> Tensor {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(x.shape());
    for y in 0..h {
        for xx in 0..w {
            let l = 0.299 * x.at(&[0, y, xx]) + 0.587 * x.at(&[1, y, xx]) + 0.114 * x.at(&[2, y, xx]);
            for c in 0..3 {
                out.set(&[c, y, xx], l);
            }
        }
    }
    out
}

/// Adds i.i.d. N(0, sigma^2) noise, clamped to [0,1]. sigma = 0 is identity.
pub fn gaussian_noise(x: &Tensor, sigma: f32, seed: u64) -> Tensor {
    if sigma == 0.0 {
        return x.clone();
    }
    let mut rng = SplitMix64::new(derive_seed(seed, &[tag("gauss-noise")]));
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = (*v + sigma * rng.normal()).clamp(0.0, 1.0);
    }
    out
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct Rgb([f32; 3]);

fn random_color(rng: &mut SplitMix64) -> Rgb {
    Rgb([
        rng.range_f32(0.05, 0.95),
        rng.range_f32(0.05, 0.95),
        rng.range_f32(0.05, 0.95),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BgFamily {
    Flat,
    Gradient,
    Stripes,
    Checker,
    ValueNoise,
    Speckle,
}

const BG_FAMILIES: [BgFamily; 6] = [
    BgFamily::Flat,
    BgFamily::Gradient,
    BgFamily::Stripes,
    BgFamily::Checker,
    BgFamily::ValueNoise,
    BgFamily::Speckle,
];

fn paint_background(img: &mut Tensor, family: BgFamily, rng: &mut SplitMix64) -> Rgb {
    let n = IMAGE_SIZE;
    let c1 = random_color(rng);
    let c2 = random_color(rng);
    let mut mean = [0.0f32; 3];
    match family {
        BgFamily::Flat => {
            for ch in 0..3 {
                for y in 0..n {
                    for x in 0..n {
                        img.set(&[ch, y, x], c1.0[ch]);
                    }
                }
            }
        }
        BgFamily::Gradient => {
            let phi = rng.range_f32(0.0, std::f32::consts::TAU);
            let (dx, dy) = (phi.cos(), phi.sin());
            for y in 0..n {
                for x in 0..n {
                    let t = ((x as f32 * dx + y as f32 * dy) / (n as f32 * 1.415) + 0.5)
                        .clamp(0.0, 1.0);
                    for ch in 0..3 {
                        img.set(&[ch, y, x], c1.0[ch] + t * (c2.0[ch] - c1.0[ch]));
                    }
                }
            }
        }
        BgFamily::Stripes => {
            let phi = [0.0f32, 0.25, 0.5, 0.75][rng.range_usize(4)] * std::f32::consts::PI;
            let period = rng.range_f32(5.0, 14.0);
            let (dx, dy) = (phi.cos(), phi.sin());
            for y in 0..n {
                for x in 0..n {
                    let t = (x as f32 * dx + y as f32 * dy) / period;
                    let band = (t.floor() as i64).rem_euclid(2);
                    let c = if band == 0 { &c1 } else { &c2 };
                    for ch in 0..3 {
                        img.set(&[ch, y, x], c.0[ch]);
                    }
                }
            }
        }
        BgFamily::Checker => {
            let cell = [4usize, 8, 16][rng.range_usize(3)];
            for y in 0..n {
                for x in 0..n {
                    let c = if ((x / cell) + (y / cell)) % 2 == 0 { &c1 } else { &c2 };
                    for ch in 0..3 {
                        img.set(&[ch, y, x], c.0[ch]);
                    }
                }
            }
        }
        BgFamily::ValueNoise => {
            let g = 5usize;
            let mut grid = vec![0.0f32; g * g];
            for v in grid.iter_mut() {
                *v = rng.next_f32();
            }
            for y in 0..n {
                for x in 0..n {
                    let fy = y as f32 / (n - 1) as f32 * (g - 1) as f32;
                    let fx = x as f32 / (n - 1) as f32 * (g - 1) as f32;
                    let (iy, ix) = (fy as usize, fx as usize);
                    let (ty, tx) = (fy - iy as f32, fx - ix as f32);
                    let (iy1, ix1) = ((iy + 1).min(g - 1), (ix + 1).min(g - 1));
                    let v = grid[iy * g + ix] * (1.0 - ty) * (1.0 - tx)
                        + grid[iy * g + ix1] * (1.0 - ty) * tx
                        + grid[iy1 * g + ix] * ty * (1.0 - tx)
                        + grid[iy1 * g + ix1] * ty * tx;
                    for ch in 0..3 {
                        img.set(&[ch, y, x], c1.0[ch] + v * (c2.0[ch] - c1.0[ch]));
                    }
                }
            }
        }
        BgFamily::Speckle => {
            for y in 0..n {
                for x in 0..n {
                    for ch in 0..3 {
                        let jitter = rng.range_f32(-0.12, 0.12);
                        img.set(&[ch, y, x], (c1.0[ch] + jitter).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    for ch in 0..3 {
        let mut acc = 0.0f64;
        for y in 0..n {
            for x in 0..n {
                acc += img.at(&[ch, y, x]) as f64;
            }
        }
        mean[ch] = (acc / (n * n) as f64) as f32;
    }
    Rgb(mean)
}

/// Point-in-shape test in the shape's local frame (unit scale), after the
/// caller removes translation/rotation. `r` is the scale parameter.
fn shape_contains(kind: ShapeKind, u: f32, v: f32, r: f32) -> bool {
    match kind {
        ShapeKind::Circle => u * u + v * v <= r * r,
        ShapeKind::Ring => {
            let d2 = u * u + v * v;
            d2 <= r * r && d2 >= (0.6 * r) * (0.6 * r)
        }
        ShapeKind::Square | ShapeKind::Diamond => u.abs().max(v.abs()) <= r,
        ShapeKind::Triangle => {
            // equilateral, circumradius r, apex pointing up in local frame
            let verts = [
                (0.0f32, -r),
                (r * 0.8660254, r * 0.5),
                (-r * 0.8660254, r * 0.5),
            ];
            let mut inside = true;
            for i in 0..3 {
                let (x1, y1) = verts[i];
                let (x2, y2) = verts[(i + 1) % 3];
                let crossp = (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1);
                if crossp < 0.0 {
                    inside = false;
                    break;
                }
            }
            inside
        }
        ShapeKind::Cross => {
            let wdt = 0.3 * r;
            (u.abs() <= wdt && v.abs() <= r) || (v.abs() <= wdt && u.abs() <= r)
        }
        ShapeKind::Bar => u.abs() <= r && v.abs() <= 0.25 * r,
        ShapeKind::Star => {
            // 10-gon with alternating outer/inner radius
            let outer = r;
            let inner = 0.45 * r;
            let mut verts = [(0.0f32, 0.0f32); 10];
            for (i, vert) in verts.iter_mut().enumerate() {
                let radius = if i % 2 == 0 { outer } else { inner };
                let ang = -std::f32::consts::FRAC_PI_2 + i as f32 * std::f32::consts::PI / 5.0;
                *vert = (radius * ang.cos(), radius * ang.sin());
            }
            // even-odd crossing test
            let mut inside = false;
            let mut j = 9usize;
            for i in 0..10 {
                let (xi, yi) = verts[i];
                let (xj, yj) = verts[j];
                if ((yi > v) != (yj > v))
                    && (u < (xj - xi) * (v - yi) / (yj - yi) + xi)
                {
                    inside = !inside;
                }
                j = i;
            }
            inside
        }
    }
}

/// Scale factor so that a shape with parameter r has roughly unit area r^2
/// times this constant.
fn shape_area_coeff(kind: ShapeKind) -> f32 {
    match kind {
        ShapeKind::Circle => std::f32::consts::PI,
        ShapeKind::Ring => std::f32::consts::PI * (1.0 - 0.36),
        ShapeKind::Square | ShapeKind::Diamond => 4.0,
        ShapeKind::Triangle => 1.299, // 3*sqrt(3)/4 * (r/..) for circumradius r
        ShapeKind::Cross => 2.04,
        ShapeKind::Bar => 1.0,
        ShapeKind::Star => 1.32,
    }
}

/// Farthest extent from the center in units of the scale parameter rotated
/// arbitrarily; used to keep shapes inside the frame.
fn shape_bound_coeff(kind: ShapeKind) -> f32 {
    match kind {
        ShapeKind::Square | ShapeKind::Diamond => std::f32::consts::SQRT_2,
        _ => 1.0,
    }
}

/// Rotation range per shape. Squares stay near axis-aligned and diamonds
/// near 45 degrees so the two classes remain distinguishable.
fn sample_rotation(kind: ShapeKind, rng: &mut SplitMix64) -> f32 {
    use std::f32::consts::PI;
    match kind {
        ShapeKind::Circle | ShapeKind::Ring => 0.0,
        ShapeKind::Square => rng.range_f32(-PI / 12.0, PI / 12.0),
        ShapeKind::Diamond => PI / 4.0 + rng.range_f32(-PI / 12.0, PI / 12.0),
        _ => rng.range_f32(0.0, PI),
    }
}

struct ShapePaint {
    mask: Tensor,
}

/// Rasterizes one shape instance; the returned mask support is exactly the
/// painted pixel set.
fn rasterize_shape(
    img: &mut Tensor,
    kind: ShapeKind,
    fill_style: FillStyle,
    bg_mean: Rgb,
    min_area_frac: f32,
    area_range: (f32, f32),
    saturated_fill: bool,
    rng: &mut SplitMix64,
) -> Result<ShapePaint> {
    let n = IMAGE_SIZE;
    let total = (n * n) as f32;

    // fill color with enforced contrast against the mean background
    let mut fill = if saturated_fill {
        // each channel snaps to a near-extreme; guaranteed contrast against
        // a mid-gray compressed background
        Rgb([
            if rng.chance(0.5) { rng.range_f32(0.85, 1.0) } else { rng.range_f32(0.0, 0.15) },
            if rng.chance(0.5) { rng.range_f32(0.85, 1.0) } else { rng.range_f32(0.0, 0.15) },
            if rng.chance(0.5) { rng.range_f32(0.85, 1.0) } else { rng.range_f32(0.0, 0.15) },
        ])
    } else {
        random_color(rng)
    };
    if !saturated_fill {
        for _ in 0..8 {
            let dist: f32 = fill
                .0
                .iter()
                .zip(bg_mean.0.iter())
                .map(|(a, b)| (a - b).abs())
                .sum();
            if dist >= 0.45 {
                break;
            }
            fill = random_color(rng);
        }
    }
    let fill2 = Rgb([
        (fill.0[0] * 0.55).clamp(0.0, 1.0),
        (fill.0[1] * 0.55).clamp(0.0, 1.0),
        (fill.0[2] * 0.55).clamp(0.0, 1.0),
    ]);
    let stripe_period = rng.range_f32(3.0, 6.0);

    let min_area = (min_area_frac * total).ceil() as usize;
    // cap the sampled area so the shape always fits inside the frame
    let bound_k = shape_bound_coeff(kind);
    let r_max = ((n as f32) / 2.0 - 2.5) / bound_k;
    let frac_cap = 0.95 * shape_area_coeff(kind) * r_max * r_max / total;
    let lo = area_range.0.max(min_area_frac * 1.2).min(frac_cap);
    let hi = area_range.1.min(frac_cap).max(lo);
    for _attempt in 0..12 {
        let frac = rng.range_f32(lo, hi);
        let r = (frac * total / shape_area_coeff(kind)).sqrt();
        let bound = r * bound_k + 0.5;
        if bound >= (n as f32) / 2.0 - 1.5 {
            continue;
        }
        let cx = rng.range_f32(bound + 1.0, n as f32 - bound - 1.0);
        let cy = rng.range_f32(bound + 1.0, n as f32 - bound - 1.0);
        let theta = sample_rotation(kind, rng);
        let (ct, st) = (theta.cos(), theta.sin());

        let mut mask = Tensor::zeros(&[n, n]);
        let mut area = 0usize;
        let y0 = ((cy - bound).floor().max(0.0)) as usize;
        let y1 = ((cy + bound).ceil().min(n as f32 - 1.0)) as usize;
        let x0 = ((cx - bound).floor().max(0.0)) as usize;
        let x1 = ((cx + bound).ceil().min(n as f32 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let px = x as f32 + 0.5 - cx;
                let py = y as f32 + 0.5 - cy;
                // rotate into the local frame
                let u = ct * px + st * py;
                let v = -st * px + ct * py;
                if shape_contains(kind, u, v, r) {
                    mask.set(&[y, x], 1.0);
                    area += 1;
                }
            }
        }
        if area < min_area {
            continue;
        }
        // paint
        for y in y0..=y1 {
            for x in x0..=x1 {
                if mask.at(&[y, x]) > 0.5 {
                    let color = match fill_style {
                        FillStyle::Color => &fill,
                        FillStyle::Texture => {
                            let t = (x as f32 + y as f32) / stripe_period;
                            if (t.floor() as i64).rem_euclid(2) == 0 {
                                &fill
                            } else {
                                &fill2
                            }
                        }
                    };
                    for ch in 0..3 {
                        img.set(&[ch, y, x], color.0[ch]);
                    }
                }
            }
        }
        return Ok(ShapePaint { mask });
    }
    Err(Error::InfeasibleArea(min_area_frac))
}

/// Corner cue: a fixed bright 6x6 patch in the upper-left corner.
const CORNER_CUE_SIZE: usize = 6;
const CORNER_CUE_COLOR: [f32; 3] = [1.0, 0.95, 0.55];

fn paint_corner_marker(img: &mut Tensor) {
    for y in 0..CORNER_CUE_SIZE {
        for x in 0..CORNER_CUE_SIZE {
            for ch in 0..3 {
                img.set(&[ch, y, x], CORNER_CUE_COLOR[ch]);
            }
        }
    }
}

fn apply_global_tint(img: &mut Tensor) {
    let n = IMAGE_SIZE;
    for y in 0..n {
        for x in 0..n {
            let r = img.at(&[0, y, x]);
            let b = img.at(&[2, y, x]);
            img.set(&[0, y, x], (r + 0.08).clamp(0.0, 1.0));
            img.set(&[2, y, x], (b - 0.08).clamp(0.0, 1.0));
        }
    }
}

/// Snaps every channel value to the u8 grid so PNG round trips are exact.
fn quantize_u8(img: &mut Tensor) {
    for v in img.data_mut() {
        *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
    }
}

/// Area fraction range for concept corpora; small objects keep the
/// background an effective confounder.
const CONCEPT_AREA_RANGE: (f32, f32) = (0.015, 0.10);
/// Pretraining uses larger objects so the class signal survives the
/// mean-pooled head.
const PRETRAIN_AREA_RANGE: (f32, f32) = (0.10, 0.30);

struct RenderPlan {
    shape: ShapeKind,
    fill_style: FillStyle,
    min_area_fraction: f32,
    area_range: (f32, f32),
    has_cue: bool,
    cue_kind: Option<CueKind>,
    /// Muted backgrounds and saturated fills; keeps the class signal strong
    /// enough for the small CNN to pretrain within a desk-scale budget.
    pretrain_style: bool,
}

fn render_sample(plan: &RenderPlan, seed: u64) -> Result<(Tensor, Tensor)> {
    let mut rng = SplitMix64::new(seed);
    let mut img = Tensor::zeros(&[3, IMAGE_SIZE, IMAGE_SIZE]);

    // background family; the texture cue pins/excludes the checker family
    let family = match (plan.cue_kind, plan.has_cue) {
        (Some(CueKind::BackgroundTexture), true) => BgFamily::Checker,
        (Some(CueKind::BackgroundTexture), false) => {
            let others: Vec<BgFamily> = BG_FAMILIES
                .iter()
                .copied()
                .filter(|f| *f != BgFamily::Checker)
                .collect();
            others[rng.range_usize(others.len())]
        }
        _ => BG_FAMILIES[rng.range_usize(6)],
    };
    let mut bg_mean = paint_background(&mut img, family, &mut rng);
    if plan.pretrain_style {
        // compress the background toward mid-gray
        for v in img.data_mut() {
            *v = 0.3 + 0.4 * *v;
        }
        bg_mean = Rgb([
            0.3 + 0.4 * bg_mean.0[0],
            0.3 + 0.4 * bg_mean.0[1],
            0.3 + 0.4 * bg_mean.0[2],
        ]);
    }
    if plan.has_cue && plan.cue_kind == Some(CueKind::CornerMarker) {
        paint_corner_marker(&mut img);
    }
    let paint = rasterize_shape(
        &mut img,
        plan.shape,
        plan.fill_style,
        bg_mean,
        plan.min_area_fraction,
        plan.area_range,
        plan.pretrain_style,
        &mut rng,
    )?;
    if plan.has_cue && plan.cue_kind == Some(CueKind::GlobalTint) {
        apply_global_tint(&mut img);
    }
    quantize_u8(&mut img);
    Ok((img, paint.mask))
}

// ---------------------------------------------------------------------------
// corpus generation
// ---------------------------------------------------------------------------

/// Deterministic concept corpus: positives contain exactly one instance of
/// the concept shape, negatives contain one of the other shapes, the cue is
/// applied per the spurious dial, and splits are balanced by construction.
pub fn generate(
    spec: &ConceptSpec,
    spurious: &SpuriousSpec,
    counts: &CorpusCounts,
    seed: u64,
) -> Result<ConceptCorpus> {
    spec.validate()?;
    spurious.validate()?;
    counts.validate()?;

    let mut samples = Vec::with_capacity(counts.total());
    let layout = [
        (Split::Train, true, counts.n_train_pos),
        (Split::Train, false, counts.n_train_neg),
        (Split::Test, true, counts.n_test_pos),
        (Split::Test, false, counts.n_test_neg),
        (Split::Buffer, false, counts.n_buffer),
    ];
    let mut index = 0usize;
    for (split, label, count) in layout {
        for _ in 0..count {
            let mut meta_rng =
                SplitMix64::new(derive_seed(seed, &[tag("meta"), index as u64]));
            let has_cue = if label {
                meta_rng.chance(spurious.strength)
            } else {
                meta_rng.chance(1.0 - spurious.strength)
            };
            let class_label = if label {
                spec.shape_kind.class_index()
            } else {
                // one of the other seven shapes, uniformly
                let mut pick = meta_rng.range_usize(ALL_SHAPES.len() - 1);
                if pick >= spec.shape_kind.class_index() {
                    pick += 1;
                }
                pick
            };
            samples.push(SampleMeta {
                index,
                split,
                label,
                class_label,
                has_cue,
            });
            index += 1;
        }
    }

    let mut images = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for s in &samples {
        let plan = RenderPlan {
            shape: ALL_SHAPES[s.class_label],
            fill_style: spec.fill_style,
            min_area_fraction: spec.min_area_fraction,
            area_range: CONCEPT_AREA_RANGE,
            has_cue: s.has_cue,
            cue_kind: Some(spurious.cue_kind),
            pretrain_style: false,
        };
        let (img, mask) = render_sample(&plan, derive_seed(seed, &[tag("render"), s.index as u64]))?;
        images.push(img);
        // the stored mask marks concept presence: negatives get a zero mask
        masks.push(if s.label { mask } else { Tensor::zeros(&[IMAGE_SIZE, IMAGE_SIZE]) });
    }

    Ok(ConceptCorpus {
        manifest: CorpusManifest {
            format_version: MANIFEST_VERSION,
            image_size: IMAGE_SIZE,
            concept: Some(spec.clone()),
            spurious: Some(*spurious),
            seed,
            classes: ALL_SHAPES.iter().map(|s| s.name().to_string()).collect(),
            samples,
        },
        images,
        masks,
        activations: None,
    })
}

/// Cue-free corpus covering all shape classes round-robin; used for
/// pretraining the embedded CNN.
pub fn generate_class_corpus(n_images: usize, seed: u64) -> Result<ConceptCorpus> {
    let mut samples = Vec::with_capacity(n_images);
    let mut images = Vec::with_capacity(n_images);
    let mut masks = Vec::with_capacity(n_images);
    for index in 0..n_images {
        let class_label = index % ALL_SHAPES.len();
        let plan = RenderPlan {
            shape: ALL_SHAPES[class_label],
            fill_style: FillStyle::Color,
            min_area_fraction: 0.01,
            area_range: PRETRAIN_AREA_RANGE,
            has_cue: false,
            cue_kind: None,
            pretrain_style: true,
        };
        let (img, mask) = render_sample(&plan, derive_seed(seed, &[tag("render"), index as u64]))?;
        images.push(img);
        masks.push(mask);
        samples.push(SampleMeta {
            index,
            split: Split::Train,
            label: false,
            class_label,
            has_cue: false,
        });
    }
    Ok(ConceptCorpus {
        manifest: CorpusManifest {
            format_version: MANIFEST_VERSION,
            image_size: IMAGE_SIZE,
            concept: None,
            spurious: None,
            seed,
            classes: ALL_SHAPES.iter().map(|s| s.name().to_string()).collect(),
            samples,
        },
        images,
        masks,
        activations: None,
    })
}

// ---------------------------------------------------------------------------
// disk layout: manifest.json, images/NNNNN.png, masks/NNNNN.pgm,
// optional activations/NNNNN.cavt
// ---------------------------------------------------------------------------

fn stem(i: usize) -> String {
    format!("{i:05}")
}

impl ConceptCorpus {
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("masks"))?;
        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(dir.join("manifest.json"), manifest)?;
        for (i, img) in self.images.iter().enumerate() {
            write_png(&dir.join("images").join(format!("{}.png", stem(i))), img)?;
        }
        for (i, mask) in self.masks.iter().enumerate() {
            write_pgm(&dir.join("masks").join(format!("{}.pgm", stem(i))), mask)?;
        }
        if let Some(acts) = &self.activations {
            std::fs::create_dir_all(dir.join("activations"))?;
            for (i, a) in acts.iter().enumerate() {
                a.save_cavt(&dir.join("activations").join(format!("{}.cavt", stem(i))))?;
            }
        }
        Ok(())
    }

    pub fn export_activations(&self, dir: &Path, acts: &[Tensor]) -> Result<()> {
        std::fs::create_dir_all(dir.join("activations"))?;
        for (i, a) in acts.iter().enumerate() {
            a.save_cavt(&dir.join("activations").join(format!("{}.cavt", stem(i))))?;
        }
        Ok(())
    }
}

fn schema_err(path: &Path, message: impl Into<String>) -> Error {
    Error::SchemaViolation {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let n = IMAGE_SIZE as u32;
    let mut out = image::RgbImage::new(n, n);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let px = image::Rgb([
                (img.at(&[0, y, x]) * 255.0).round() as u8,
                (img.at(&[1, y, x]) * 255.0).round() as u8,
                (img.at(&[2, y, x]) * 255.0).round() as u8,
            ]);
            out.put_pixel(x as u32, y as u32, px);
        }
    }
    out.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| schema_err(path, format!("unreadable PNG: {e}")))?;
    let rgb = img.to_rgb8();
    if rgb.width() as usize != IMAGE_SIZE || rgb.height() as usize != IMAGE_SIZE {
        return Err(schema_err(
            path,
            format!("expected {IMAGE_SIZE}x{IMAGE_SIZE}, got {}x{}", rgb.width(), rgb.height()),
        ));
    }
    let mut t = Tensor::zeros(&[3, IMAGE_SIZE, IMAGE_SIZE]);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let px = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                t.set(&[c, y, x], px.0[c] as f32 / 255.0);
            }
        }
    }
    Ok(t)
}

/// Binary PGM (P5), maxval 255, 0 = background and 255 = mask.
fn write_pgm(path: &Path, mask: &Tensor) -> Result<()> {
    let mut bytes = format!("P5\n{IMAGE_SIZE} {IMAGE_SIZE}\n255\n").into_bytes();
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            bytes.push(if mask.at(&[y, x]) > 0.5 { 255 } else { 0 });
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| schema_err(path, format!("missing mask: {e}")))?;
    let header_err = || schema_err(path, "expected binary PGM (P5) header");
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(&bytes[start..pos]);
    }
    if fields.len() < 4 || fields[0] != b"P5" {
        return Err(header_err());
    }
    let w: usize = std::str::from_utf8(fields[1])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(header_err)?;
    let h: usize = std::str::from_utf8(fields[2])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(header_err)?;
    if w != IMAGE_SIZE || h != IMAGE_SIZE {
        return Err(schema_err(path, format!("expected {IMAGE_SIZE}x{IMAGE_SIZE} mask, got {w}x{h}")));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + w * h {
        return Err(schema_err(path, "truncated PGM payload"));
    }
    let mut t = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let b = bytes[pos + y * w + x];
            if b != 0 && b != 255 {
                return Err(schema_err(path, format!("mask must be binary 0/255, found {b}")));
            }
            t.set(&[y, x], if b == 255 { 1.0 } else { 0.0 });
        }
    }
    Ok(t)
}

/// Loads a corpus directory. Images and masks (or precomputed activations)
/// are taken verbatim; activations bypass the embedded CNN downstream.
/// `layer_shape_override` admits non-default activation shapes.
pub fn ingest_external(dir: &Path, layer_shape_override: Option<&[usize]>) -> Result<ConceptCorpus> {
    let manifest_path = dir.join("manifest.json");
    let manifest_raw = std::fs::read_to_string(&manifest_path)
        .map_err(|e| schema_err(&manifest_path, format!("missing manifest: {e}")))?;
    let manifest: CorpusManifest = serde_json::from_str(&manifest_raw)
        .map_err(|e| schema_err(&manifest_path, format!("malformed manifest: {e}")))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(schema_err(
            &manifest_path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    if manifest.image_size != IMAGE_SIZE {
        return Err(schema_err(
            &manifest_path,
            format!("unsupported image_size {}", manifest.image_size),
        ));
    }
    let n = manifest.samples.len();
    for (i, s) in manifest.samples.iter().enumerate() {
        if s.index != i {
            return Err(schema_err(
                &manifest_path,
                format!("sample indices must be dense and ordered; entry {i} has index {}", s.index),
            ));
        }
    }

    let images_dir = dir.join("images");
    let acts_dir = dir.join("activations");
    let has_images = images_dir.is_dir();
    let has_acts = acts_dir.is_dir();
    if !has_images && !has_acts {
        return Err(schema_err(dir, "corpus needs images/ or activations/"));
    }

    let mut images = Vec::new();
    let mut masks = Vec::new();
    if has_images {
        for s in &manifest.samples {
            let ipath = images_dir.join(format!("{}.png", stem(s.index)));
            if !ipath.is_file() {
                return Err(schema_err(&ipath, "missing image"));
            }
            images.push(read_png(&ipath)?);
            let mpath = dir.join("masks").join(format!("{}.pgm", stem(s.index)));
            if mpath.is_file() {
                let m = read_pgm(&mpath)?;
                if s.label && m.data().iter().all(|&v| v == 0.0) {
                    return Err(schema_err(&mpath, "positive sample has an empty mask"));
                }
                masks.push(m);
            } else if s.label {
                return Err(schema_err(&mpath, "missing mask for a positive sample"));
            } else {
                masks.push(Tensor::zeros(&[IMAGE_SIZE, IMAGE_SIZE]));
            }
        }
    }

    let mut activations = None;
    if has_acts {
        let want: Vec<usize> = layer_shape_override
            .map(|s| s.to_vec())
            .unwrap_or_else(|| crate::cnn::PROBE_SHAPE.to_vec());
        let mut acts = Vec::with_capacity(n);
        for s in &manifest.samples {
            let apath = acts_dir.join(format!("{}.cavt", stem(s.index)));
            if !apath.is_file() {
                return Err(schema_err(&apath, "missing activation tensor"));
            }
            let t = Tensor::load_cavt(&apath)
                .map_err(|e| schema_err(&apath, format!("unreadable tensor: {e}")))?;
            if t.shape() != want.as_slice() {
                return Err(schema_err(
                    &apath,
                    format!(
                        "activation shape {:?} does not match expected {:?} (use --layer-shape to override)",
                        t.shape(),
                        want
                    ),
                ));
            }
            acts.push(t);
        }
        activations = Some(acts);
    }

    if !has_images {
        // activations-only corpus still carries empty placeholders so that
        // index-based accessors stay valid
        images = Vec::new();
        masks = Vec::new();
    }

    Ok(ConceptCorpus {
        manifest,
        images,
        masks,
        activations,
    })
}

/// Empirical Pearson correlation between cue presence and label over the
/// manifest; diagnostic for the spurious dial.
pub fn cue_label_correlation(manifest: &CorpusManifest) -> f64 {
    let samples: Vec<&SampleMeta> = manifest
        .samples
        .iter()
        .filter(|s| s.split != Split::Buffer)
        .collect();
    let n = samples.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean_c = samples.iter().filter(|s| s.has_cue).count() as f64 / n;
    let mean_l = samples.iter().filter(|s| s.label).count() as f64 / n;
    let mut cov = 0.0;
    let mut var_c = 0.0;
    let mut var_l = 0.0;
    for s in &samples {
        let c = s.has_cue as u8 as f64 - mean_c;
        let l = s.label as u8 as f64 - mean_l;
        cov += c * l;
        var_c += c * c;
        var_l += l * l;
    }
    if var_c == 0.0 || var_l == 0.0 {
        return 0.0;
    }
    cov / (var_c.sqrt() * var_l.sqrt())
}

/// Mutual information (nats) between cue and label bits over the manifest.
pub fn cue_label_mutual_information(manifest: &CorpusManifest) -> f64 {
    let samples: Vec<&SampleMeta> = manifest
        .samples
        .iter()
        .filter(|s| s.split != Split::Buffer)
        .collect();
    let n = samples.len() as f64;
    let mut joint = BTreeMap::new();
    for s in &samples {
        *joint.entry((s.has_cue, s.label)).or_insert(0.0f64) += 1.0 / n;
    }
    let p_c: f64 = samples.iter().filter(|s| s.has_cue).count() as f64 / n;
    let p_l: f64 = samples.iter().filter(|s| s.label).count() as f64 / n;
    let marg = |c: bool, l: bool| {
        (if c { p_c } else { 1.0 - p_c }) * (if l { p_l } else { 1.0 - p_l })
    };
    let mut mi = 0.0;
    for (&(c, l), &p) in &joint {
        if p > 0.0 && marg(c, l) > 0.0 {
            mi += p * (p / marg(c, l)).ln();
        }
    }
    mi
}
