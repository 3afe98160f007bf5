//! Browser demo over the `pgssl` core. [`Session`] holds the state and
//! renders RGBA buffers; [`Demo`] exposes it to JavaScript.

use pgssl::augment::{apply_augmentation, build_correspondence, sample_augmentation, AugConfig, PriorDictionary};
use pgssl::backbone::{Backbone, BackboneConfig, DualNetworkState};
use pgssl::data::synth::{generate_scene, SyntheticScene};
use pgssl::data::{preprocess_hu, SynthConfig, HU_CLIP};
use pgssl::objectives::uncertainty_map;
use pgssl::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Overlay colours of foreground classes 1, 2, 3, ...
const CLASS_RGB: [[u8; 3]; 6] = [[230, 60, 60], [60, 200, 90], [70, 120, 240], [240, 200, 40], [200, 80, 220], [40, 210, 210]];

/// Min-max scaled grayscale.
pub fn gray_rgba(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    values
        .iter()
        .flat_map(|&v| {
            let g = ((v - lo) / span * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

/// Black through red and yellow to white for values in [0, 1].
pub fn heat_rgba(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| {
            let t = v.clamp(0.0, 1.0) * 3.0;
            let ch = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
            [ch(t), ch(t - 1.0), ch(t - 2.0), 255]
        })
        .collect()
}

/// Blends class colours over `base` at the given opacity; class 0 is left
/// untouched.
pub fn tint(base: &mut [u8], classes: &[u8], alpha: f32) {
    for (px, &k) in base.chunks_exact_mut(4).zip(classes) {
        if k == 0 {
            continue;
        }
        let c = CLASS_RGB[(k as usize - 1) % CLASS_RGB.len()];
        for i in 0..3 {
            px[i] = (px[i] as f32 * (1.0 - alpha) + c[i] as f32 * alpha).round() as u8;
        }
    }
}

struct Pair {
    views: [Tensor<f32>; 2],
    dict: PriorDictionary,
}

pub struct Session {
    scene: SyntheticScene,
    image: Tensor<f32>,
    pair: Option<Pair>,
    mean_uncertainty: f64,
}

impl Session {
    pub fn new(seed: u64, side: usize) -> Result<Self> {
        let scene = generate_scene(&SynthConfig { side, ..SynthConfig::default() }, seed, 0)?;
        let image = preprocess_hu(&scene.image, HU_CLIP.0, HU_CLIP.1)?;
        Ok(Self { scene, image, pair: None, mean_uncertainty: f64::NAN })
    }

    pub fn side(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn class_count(&self, class: u8) -> usize {
        self.scene.mask.data.iter().filter(|&&k| k == class).count()
    }

    pub fn scene_rgba(&self, overlay: bool) -> Vec<u8> {
        let mut px = gray_rgba(self.image.data());
        if overlay {
            tint(&mut px, &self.scene.mask.data, 0.45);
        }
        px
    }

    /// Draws two augmentations of the scene and their pixel correspondence.
    /// Returns the number of matched view-1 pixels.
    pub fn augment(&mut self, seed: u64, out_size: usize) -> Result<usize> {
        let cfg = AugConfig { out_size, ..AugConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = self.side();
        let p1 = sample_augmentation(&mut rng, &cfg, (side, side))?;
        let p2 = sample_augmentation(&mut rng, &cfg, (side, side))?;
        let views = [apply_augmentation(&self.image, &p1)?, apply_augmentation(&self.image, &p2)?];
        let dict = build_correspondence(&p1, &p2)?;
        let matched = dict.matched_count();
        self.pair = Some(Pair { views, dict });
        Ok(matched)
    }

    /// `(height, width)` of an augmented view, if a pair was drawn.
    pub fn view_shape(&self, which: usize) -> Option<(usize, usize)> {
        self.pair.as_ref().map(|p| (p.views[which].shape()[1], p.views[which].shape()[2]))
    }

    pub fn view_rgba(&self, which: usize) -> Vec<u8> {
        self.pair.as_ref().map_or_else(Vec::new, |p| gray_rgba(p.views[which].data()))
    }

    /// View-2 pixel matched to view-1 pixel `i`.
    pub fn match_of(&self, i: usize) -> Option<usize> {
        self.pair.as_ref().and_then(|p| p.dict.get(i))
    }

    /// View-1 pixels matched to view-2 pixel `j`.
    pub fn matches_into(&self, j: usize) -> Vec<usize> {
        self.pair.as_ref().map_or_else(Vec::new, |p| p.dict.pairs().filter(|&(_, b)| b == j).map(|(a, _)| a).collect())
    }

    /// MC-dropout uncertainty of a freshly initialised teacher on the scene,
    /// one value in [0, 1] per pixel.
    pub fn uncertainty(&mut self, seed: u64, passes: usize, dropout_rate: f64) -> Result<Vec<f32>> {
        let bb = Backbone::new(BackboneConfig { base_width: 8, dropout_rate, ..BackboneConfig::default() })?;
        let teacher = DualNetworkState::init(&bb, &mut ChaCha8Rng::seed_from_u64(seed)).teacher;
        let side = self.side();
        let x = self.image.clone().reshape(&[1, 1, side, side])?;
        let u = uncertainty_map(&bb, &teacher, &x, passes, seed)?;
        self.mean_uncertainty = u.data().iter().map(|&v| v as f64).sum::<f64>() / u.numel() as f64;
        Ok(u.data().to_vec())
    }

    pub fn mean_uncertainty(&self) -> f64 {
        self.mean_uncertainty
    }
}

fn js(e: pgssl::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    inner: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, side: usize) -> std::result::Result<Demo, JsError> {
        Ok(Demo { inner: Session::new(seed as u64, side).map_err(js)? })
    }

    pub fn side(&self) -> usize {
        self.inner.side()
    }

    #[wasm_bindgen(js_name = sceneRgba)]
    pub fn scene_rgba(&self, overlay: bool) -> Vec<u8> {
        self.inner.scene_rgba(overlay)
    }

    #[wasm_bindgen(js_name = classCount)]
    pub fn class_count(&self, class: u8) -> usize {
        self.inner.class_count(class)
    }

    pub fn augment(&mut self, seed: u32, out_size: usize) -> std::result::Result<usize, JsError> {
        self.inner.augment(seed as u64, out_size).map_err(js)
    }

    #[wasm_bindgen(js_name = viewHeight)]
    pub fn view_height(&self, which: usize) -> usize {
        self.inner.view_shape(which).map_or(0, |s| s.0)
    }

    #[wasm_bindgen(js_name = viewWidth)]
    pub fn view_width(&self, which: usize) -> usize {
        self.inner.view_shape(which).map_or(0, |s| s.1)
    }

    #[wasm_bindgen(js_name = viewRgba)]
    pub fn view_rgba(&self, which: usize) -> Vec<u8> {
        self.inner.view_rgba(which)
    }

    /// -1 when unmatched.
    #[wasm_bindgen(js_name = matchOf)]
    pub fn match_of(&self, i: usize) -> i32 {
        self.inner.match_of(i).map_or(-1, |j| j as i32)
    }

    #[wasm_bindgen(js_name = matchesInto)]
    pub fn matches_into(&self, j: usize) -> Vec<u32> {
        self.inner.matches_into(j).into_iter().map(|i| i as u32).collect()
    }

    #[wasm_bindgen(js_name = uncertaintyRgba)]
    pub fn uncertainty_rgba(&mut self, seed: u32, passes: usize, dropout_rate: f64) -> std::result::Result<Vec<u8>, JsError> {
        Ok(heat_rgba(&self.inner.uncertainty(seed as u64, passes, dropout_rate).map_err(js)?))
    }

    #[wasm_bindgen(js_name = meanUncertainty)]
    pub fn mean_uncertainty(&self) -> f64 {
        self.inner.mean_uncertainty()
    }
}
