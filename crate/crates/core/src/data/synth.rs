//! Synthetic CT-like scenes: non-overlapping ellipses and rectangles with
//! class-specific Hounsfield bands on a soft-tissue background.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Integer class mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            bail!(Shape, "mask of {height}x{width} needs {} values, got {}", height * width, data.len());
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.width + c]
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
}

/// One placed shape. Rasterization depends only on integer offsets from the
/// centre, so shifting the centre shifts image and mask identically.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeRecord {
    pub class: u8,
    pub kind: ShapeKind,
    pub center: (i64, i64),
    pub radii: (i64, i64),
    pub intensity: f64,
}

impl ShapeRecord {
    pub fn contains(&self, r: i64, c: i64) -> bool {
        let (dr, dc) = (r - self.center.0, c - self.center.1);
        let (ry, rx) = self.radii;
        match self.kind {
            ShapeKind::Rectangle => dr.abs() <= ry && dc.abs() <= rx,
            ShapeKind::Ellipse => (dr * dr * rx * rx + dc * dc * ry * ry) <= ry * ry * rx * rx,
        }
    }

    fn bbox(&self, margin: i64) -> (i64, i64, i64, i64) {
        (
            self.center.0 - self.radii.0 - margin,
            self.center.0 + self.radii.0 + margin,
            self.center.1 - self.radii.1 - margin,
            self.center.1 + self.radii.1 + margin,
        )
    }

    fn overlaps(&self, other: &ShapeRecord) -> bool {
        let (a0, a1, b0, b1) = self.bbox(1);
        let (c0, c1, d0, d1) = other.bbox(0);
        a0 <= c1 && c0 <= a1 && b0 <= d1 && d0 <= b1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub side: usize,
    /// Number of classes including background.
    pub classes: usize,
    /// Probability that a foreground class is present in a scene; at least
    /// one always is.
    pub class_prob: f64,
    /// Shape radius range as fractions of `side`.
    pub radius: (f64, f64),
    /// Intensity band of the background, then of classes `1..classes`.
    pub bands: Vec<(f64, f64)>,
    pub noise_sigma: f64,
    pub blur_radius: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            side: 32,
            classes: 4,
            class_prob: 0.95,
            radius: (0.1, 0.2),
            bands: vec![(-120.0, -20.0), (20.0, 110.0), (130.0, 230.0), (250.0, 600.0)],
            noise_sigma: 60.0,
            blur_radius: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            bail!(Config, "synth.classes must be at least 2");
        }
        if self.classes > 255 {
            bail!(Config, "synth.classes must fit in a byte");
        }
        if self.side < 16 {
            bail!(Config, "synth.side must be at least 16");
        }
        if self.bands.len() != self.classes {
            bail!(Config, "synth.bands needs {} bands, got {}", self.classes, self.bands.len());
        }
        if self.bands.iter().any(|(lo, hi)| !(lo <= hi)) {
            bail!(Config, "synth.bands entries must satisfy lo <= hi");
        }
        let (lo, hi) = self.radius;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            bail!(Config, "synth.radius must satisfy 0 < lo <= hi < 0.5");
        }
        if !(0.0..=1.0).contains(&self.class_prob) {
            bail!(Config, "synth.class_prob must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0) {
            bail!(Config, "synth.noise_sigma must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `[1, side, side]` in Hounsfield-like units.
    pub image: Tensor<f32>,
    pub mask: Mask,
    pub shapes: Vec<ShapeRecord>,
    pub background: f64,
}

const PLACEMENT_ATTEMPTS: usize = 100;

fn place<R: Rng>(rng: &mut R, cfg: &SynthConfig, class: u8, placed: &[ShapeRecord]) -> Result<ShapeRecord> {
    let side = cfg.side as f64;
    let rmin = ((cfg.radius.0 * side).round() as i64).max(1);
    let rmax = ((cfg.radius.1 * side).round() as i64).max(rmin);
    let (blo, bhi) = cfg.bands[class as usize];
    for _ in 0..PLACEMENT_ATTEMPTS {
        let ry = rng.random_range(rmin..=rmax);
        let rx = rng.random_range(rmin..=rmax);
        let kind = if rng.random_bool(0.5) { ShapeKind::Ellipse } else { ShapeKind::Rectangle };
        let n = cfg.side as i64;
        if 2 * ry + 1 > n || 2 * rx + 1 > n {
            continue;
        }
        let cy = rng.random_range(ry..n - ry);
        let cx = rng.random_range(rx..n - rx);
        let intensity = if blo == bhi { blo } else { rng.random_range(blo..bhi) };
        let rec = ShapeRecord {
            class,
            kind,
            center: (cy, cx),
            radii: (ry, rx),
            intensity,
        };
        if placed.iter().all(|p| !rec.overlaps(p)) {
            return Ok(rec);
        }
    }
    bail!(Generator, "could not place a class-{class} shape after {PLACEMENT_ATTEMPTS} attempts");
}

/// Renders image and mask for a list of shape records.
pub fn render(cfg: &SynthConfig, shapes: &[ShapeRecord], background: f64) -> (Vec<f64>, Mask) {
    let n = cfg.side;
    let mut img = vec![background; n * n];
    let mut mask = Mask::zeros(n, n);
    for s in shapes {
        let (r0, r1, c0, c1) = s.bbox(0);
        for r in r0.max(0)..=r1.min(n as i64 - 1) {
            for c in c0.max(0)..=c1.min(n as i64 - 1) {
                if s.contains(r, c) {
                    let i = r as usize * n + c as usize;
                    img[i] = s.intensity;
                    mask.data[i] = s.class;
                }
            }
        }
    }
    (img, mask)
}

fn box_blur(img: &[f64], n: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return img.to_vec();
    }
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                let (mut acc, mut cnt) = (0.0, 0.0);
                let pos = if horizontal { c } else { r };
                for q in pos.saturating_sub(radius)..=(pos + radius).min(n - 1) {
                    acc += if horizontal { src[r * n + q] } else { src[q * n + c] };
                    cnt += 1.0;
                }
                out[r * n + c] = acc / cnt;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Scene `index` of the dataset with seed `seed`.
pub fn generate_scene(cfg: &SynthConfig, seed: u64, index: u64) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "synth", index);
    let fg = cfg.classes - 1;
    let mut present: Vec<u8> = (1..=fg as u8).filter(|_| rng.random_bool(cfg.class_prob)).collect();
    if present.is_empty() {
        present.push(rng.random_range(1..=fg as u8));
    }
    let mut shapes = Vec::with_capacity(present.len());
    for &class in &present {
        let rec = place(&mut rng, cfg, class, &shapes)?;
        shapes.push(rec);
    }
    let (blo, bhi) = cfg.bands[0];
    let background = if blo == bhi { blo } else { rng.random_range(blo..bhi) };
    let (img, mask) = render(cfg, &shapes, background);
    let mut img = box_blur(&img, cfg.side, cfg.blur_radius);
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| crate::Error::Config(format!("synth.noise_sigma: {e}")))?;
        for v in img.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let image = Tensor::new(&[1, cfg.side, cfg.side], img.into_iter().map(|v| v as f32).collect())?;
    Ok(SyntheticScene {
        image,
        mask,
        shapes,
        background,
    })
}

/// `n_images` scenes; scene `i` depends only on `(seed, i)`.
pub fn generate_dataset(n_images: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<SyntheticScene>> {
    (0..n_images as u64).map(|i| generate_scene(cfg, seed, i)).collect()
}
