//! Coordinate-exact augmentations and cross-view pixel correspondence.
//!
//! The geometric part of an augmentation is crop → nearest-neighbour
//! rescale → quarter-turn rotation → flips. Every step acts on the integer
//! grid, so each view pixel has exactly one source pixel and the two views
//! of an image can be registered pixel by pixel.

use rand::{Rng, SeedableRng};

use crate::error::{bail, Result};
use crate::rng::StreamRng;
use crate::tensor::{Real, Tensor};

/// Counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub fn from_quarter_turns(k: u32) -> Self {
        match k % 4 {
            0 => Rotation::R0,
            1 => Rotation::R90,
            2 => Rotation::R180,
            _ => Rotation::R270,
        }
    }

    pub fn swaps_axes(self) -> bool {
        matches!(self, Rotation::R90 | Rotation::R270)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// One fully specified augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationParams {
    /// Source image `(H, W)` the record was drawn for.
    pub source: (usize, usize),
    pub crop: Crop,
    /// `(H_v, W_v)` after rescaling, before rotation.
    pub out_size: (usize, usize),
    pub rotation: Rotation,
    pub hflip: bool,
    pub vflip: bool,
    /// Multiplier about the image mean.
    pub contrast: f64,
    /// Exponent applied to min-max normalized intensities.
    pub gamma: f64,
    /// Seed that reproduces this record through [`AugmentationParams::from_seed`].
    pub seed: u64,
}

/// Sampling ranges for [`sample_augmentation`].
#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    /// Range of the crop's area as a fraction of the source.
    pub crop_scale: (f64, f64),
    /// Square view side after rescaling.
    pub out_size: usize,
    pub rot90: bool,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub contrast: (f64, f64),
    pub gamma: (f64, f64),
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.3, 1.0),
            out_size: 32,
            rot90: true,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            contrast: (0.8, 1.2),
            gamma: (0.8, 1.25),
        }
    }
}

impl AugConfig {
    /// Configuration whose only possible draw is the identity on a
    /// `side × side` source.
    pub fn identity(side: usize) -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            out_size: side,
            rot90: false,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            contrast: (1.0, 1.0),
            gamma: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            bail!(Config, "aug.crop_scale must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]");
        }
        for (key, (lo, hi)) in [("aug.contrast", self.contrast), ("aug.gamma", self.gamma)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                bail!(Config, "{key} must satisfy 0 < lo <= hi, got [{lo}, {hi}]");
            }
        }
        for (key, p) in [("aug.hflip_prob", self.hflip_prob), ("aug.vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                bail!(Config, "{key} must lie in [0, 1], got {p}");
            }
        }
        if self.out_size == 0 {
            bail!(Config, "aug.out_size must be positive");
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws a record seed from `rng` and expands it into an augmentation for
/// a source of size `source = (H, W)`.
pub fn sample_augmentation<R: Rng>(rng: &mut R, config: &AugConfig, source: (usize, usize)) -> Result<AugmentationParams> {
    AugmentationParams::from_seed(rng.random(), config, source)
}

impl AugmentationParams {
    /// The record `sample_augmentation` produces for a given record seed.
    pub fn from_seed(seed: u64, config: &AugConfig, source: (usize, usize)) -> Result<Self> {
        config.validate()?;
        let (h, w) = source;
        if h == 0 || w == 0 {
            bail!(Param, "source image must be non-empty, got {h}x{w}");
        }
        let mut rng = StreamRng::seed_from_u64(seed);
        let scale = uniform(&mut rng, config.crop_scale).sqrt();
        let height = ((scale * h as f64).round() as usize).clamp(1, h);
        let width = ((scale * w as f64).round() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - height);
        let left = rng.random_range(0..=w - width);
        let rotation = if config.rot90 {
            Rotation::from_quarter_turns(rng.random_range(0..4))
        } else {
            Rotation::R0
        };
        let hflip = rng.random::<f64>() < config.hflip_prob;
        let vflip = rng.random::<f64>() < config.vflip_prob;
        let contrast = uniform(&mut rng, config.contrast);
        let gamma = uniform(&mut rng, config.gamma);
        Ok(Self {
            source,
            crop: Crop {
                top,
                left,
                height,
                width,
            },
            out_size: (config.out_size, config.out_size),
            rotation,
            hflip,
            vflip,
            contrast,
            gamma,
            seed,
        })
    }

    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            source: (h, w),
            crop: Crop {
                top: 0,
                left: 0,
                height: h,
                width: w,
            },
            out_size: (h, w),
            rotation: Rotation::R0,
            hflip: false,
            vflip: false,
            contrast: 1.0,
            gamma: 1.0,
            seed: 0,
        }
    }

    /// Same geometry with photometric changes removed.
    pub fn geometric_only(&self) -> Self {
        Self {
            contrast: 1.0,
            gamma: 1.0,
            ..self.clone()
        }
    }

    /// Final `(rows, cols)` of the augmented view.
    pub fn view_shape(&self) -> (usize, usize) {
        let (h, w) = self.out_size;
        if self.rotation.swaps_axes() {
            (w, h)
        } else {
            (h, w)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.crop;
        let (h, w) = self.source;
        if c.height == 0 || c.width == 0 || c.top + c.height > h || c.left + c.width > w {
            bail!(Param, "crop {c:?} is not inside the {h}x{w} source");
        }
        if self.out_size.0 == 0 || self.out_size.1 == 0 {
            bail!(Param, "output size must be positive, got {:?}", self.out_size);
        }
        if !(self.contrast > 0.0 && self.gamma > 0.0) {
            bail!(Param, "contrast and gamma must be positive");
        }
        Ok(())
    }

    /// Pre-rotation grid position of view pixel `(r, c)`.
    fn unrotate(&self, r: usize, c: usize) -> (usize, usize) {
        let (hv, wv) = self.out_size;
        let (fh, fw) = self.view_shape();
        let r = if self.vflip { fh - 1 - r } else { r };
        let c = if self.hflip { fw - 1 - c } else { c };
        match self.rotation {
            Rotation::R0 => (r, c),
            Rotation::R90 => (c, wv - 1 - r),
            Rotation::R180 => (hv - 1 - r, wv - 1 - c),
            Rotation::R270 => (hv - 1 - c, r),
        }
    }

    /// View pixel of pre-rotation grid position `(a, b)`.
    fn rotate(&self, a: usize, b: usize) -> (usize, usize) {
        let (hv, wv) = self.out_size;
        let (fh, fw) = self.view_shape();
        let (r, c) = match self.rotation {
            Rotation::R0 => (a, b),
            Rotation::R90 => (wv - 1 - b, a),
            Rotation::R180 => (hv - 1 - a, wv - 1 - b),
            Rotation::R270 => (b, hv - 1 - a),
        };
        let r = if self.vflip { fh - 1 - r } else { r };
        let c = if self.hflip { fw - 1 - c } else { c };
        (r, c)
    }

    /// Grid positions `a` in `0..out` with `floor(a * extent / out) == d`.
    fn preimage(d: usize, extent: usize, out: usize) -> Option<(usize, usize)> {
        let lo = (d * out).div_ceil(extent);
        let hi = ((d + 1) * out).div_ceil(extent).min(out);
        (lo < hi).then(|| (lo, hi - 1))
    }

    /// View pixel that the forward resampler fills from `source_pixel`.
    /// When upscaling puts one source pixel in several view pixels, the one
    /// with the smallest linear index is returned.
    pub fn forward_map(&self, (r0, c0): (usize, usize)) -> Option<(usize, usize)> {
        let c = &self.crop;
        if r0 < c.top || c0 < c.left || r0 >= c.top + c.height || c0 >= c.left + c.width {
            return None;
        }
        let (a_lo, a_hi) = Self::preimage(r0 - c.top, c.height, self.out_size.0)?;
        let (b_lo, b_hi) = Self::preimage(c0 - c.left, c.width, self.out_size.1)?;
        let mut best = (usize::MAX, usize::MAX);
        for (a, b) in [(a_lo, b_lo), (a_lo, b_hi), (a_hi, b_lo), (a_hi, b_hi)] {
            let (r, c) = self.rotate(a, b);
            best = (best.0.min(r), best.1.min(c));
        }
        Some(best)
    }
}

/// Source pixel whose value lands at view pixel `(r, c)`.
pub fn map_coordinate(params: &AugmentationParams, (r, c): (usize, usize)) -> Result<(usize, usize)> {
    let (fh, fw) = params.view_shape();
    if r >= fh || c >= fw {
        bail!(Param, "view pixel ({r}, {c}) outside the {fh}x{fw} view");
    }
    let (a, b) = params.unrotate(r, c);
    let crop = &params.crop;
    let (hv, wv) = params.out_size;
    Ok((crop.top + a * crop.height / hv, crop.left + b * crop.width / wv))
}

/// Geometric part of an augmentation applied to a `[C, H, W]` plane stack
/// of any element type (used for label masks too).
pub fn warp<T: Copy>(data: &[T], channels: usize, params: &AugmentationParams) -> Result<Vec<T>> {
    params.validate()?;
    let (h, w) = params.source;
    if data.len() != channels * h * w {
        bail!(Shape, "warp: {} values do not form {channels}x{h}x{w}", data.len());
    }
    let (fh, fw) = params.view_shape();
    let mut src_index = Vec::with_capacity(fh * fw);
    for r in 0..fh {
        for c in 0..fw {
            let (sr, sc) = map_coordinate(params, (r, c))?;
            src_index.push(sr * w + sc);
        }
    }
    let mut out = Vec::with_capacity(channels * fh * fw);
    for ch in 0..channels {
        let plane = &data[ch * h * w..][..h * w];
        out.extend(src_index.iter().map(|&i| plane[i]));
    }
    Ok(out)
}

/// Applies the full augmentation to a `[C, H, W]` image.
pub fn apply_augmentation<T: Real>(image: &Tensor<T>, params: &AugmentationParams) -> Result<Tensor<T>> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => bail!(Shape, "apply_augmentation expects [C, H, W], got {s:?}"),
    };
    if (h, w) != params.source {
        bail!(Param, "augmentation drawn for {:?} applied to a {h}x{w} image", params.source);
    }
    let mut data = warp(image.data(), c, params)?;
    if params.contrast != 1.0 {
        let mean = data.iter().map(|v| v.as_f64()).sum::<f64>() / data.len() as f64;
        for v in data.iter_mut() {
            *v = T::of(mean + params.contrast * (v.as_f64() - mean));
        }
    }
    if params.gamma != 1.0 {
        let lo = data.iter().fold(f64::INFINITY, |m, v| m.min(v.as_f64()));
        let hi = data.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        if hi > lo {
            for v in data.iter_mut() {
                let u = (v.as_f64() - lo) / (hi - lo);
                *v = T::of(lo + (hi - lo) * u.powf(params.gamma));
            }
        }
    }
    let (fh, fw) = params.view_shape();
    Tensor::new(&[c, fh, fw], data)
}

/// Lookup from each view-1 pixel to its counterpart in view 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PriorDictionary {
    view1: (usize, usize),
    view2: (usize, usize),
    map: Vec<u32>,
}

impl PriorDictionary {
    pub const NO_MATCH: u32 = u32::MAX;

    /// Builds a dictionary from raw entries (`NO_MATCH` for unmatched
    /// pixels), validating every stored index.
    pub fn from_entries(view1: (usize, usize), view2: (usize, usize), map: Vec<u32>) -> Result<Self> {
        if map.len() != view1.0 * view1.1 {
            bail!(Shape, "dictionary has {} entries for a {view1:?} view", map.len());
        }
        let n2 = view2.0 * view2.1;
        if let Some(&bad) = map.iter().find(|&&j| j != Self::NO_MATCH && j as usize >= n2) {
            bail!(Param, "dictionary entry {bad} is outside the {view2:?} view");
        }
        Ok(Self { view1, view2, map })
    }

    pub fn view1(&self) -> (usize, usize) {
        self.view1
    }

    pub fn view2(&self) -> (usize, usize) {
        self.view2
    }

    /// Linear view-2 index matched to linear view-1 index `i`.
    #[inline]
    pub fn get(&self, i: usize) -> Option<usize> {
        match self.map[i] {
            Self::NO_MATCH => None,
            j => Some(j as usize),
        }
    }

    pub fn entries(&self) -> &[u32] {
        &self.map
    }

    /// Matched `(i, j)` pairs in view-1 order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.map
            .iter()
            .enumerate()
            .filter(|(_, &j)| j != Self::NO_MATCH)
            .map(|(i, &j)| (i, j as usize))
    }

    pub fn matched_count(&self) -> usize {
        self.map.iter().filter(|&&j| j != Self::NO_MATCH).count()
    }
}

/// Registers the pixels of two views of the same source.
pub fn build_correspondence(p1: &AugmentationParams, p2: &AugmentationParams) -> Result<PriorDictionary> {
    if p1.source != p2.source {
        bail!(Param, "augmentations reference different sources: {:?} vs {:?}", p1.source, p2.source);
    }
    p1.validate()?;
    p2.validate()?;
    let (h1, w1) = p1.view_shape();
    let (h2, w2) = p2.view_shape();
    let mut map = Vec::with_capacity(h1 * w1);
    for r in 0..h1 {
        for c in 0..w1 {
            let src = map_coordinate(p1, (r, c))?;
            map.push(match p2.forward_map(src) {
                Some((r2, c2)) => (r2 * w2 + c2) as u32,
                None => PriorDictionary::NO_MATCH,
            });
        }
    }
    Ok(PriorDictionary {
        view1: (h1, w1),
        view2: (h2, w2),
        map,
    })
}
