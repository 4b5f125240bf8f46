//! Procedural aerial scenes in which height separates classes that look alike
//! from above: gray roofs vs. pavement and trees vs. low vegetation.

use std::f64::consts::PI;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::raster::Raster;
use crate::error::{Error, Result};
use crate::nn::stream_seed;

pub const IMPERVIOUS: u8 = 0;
pub const BUILDING: u8 = 1;
pub const LOW_VEGETATION: u8 = 2;
pub const TREE: u8 = 3;
pub const CAR: u8 = 4;
pub const CLUTTER: u8 = 5;
pub const NUM_CLASSES: usize = 6;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["impervious", "building", "low_vegetation", "tree", "car", "clutter"];
/// Standard deviation of the additive DSM noise, in meters.
pub const DSM_NOISE_STD: f64 = 0.2;

/// Height range (meters, before noise) that every pixel of a class lies in.
pub fn height_band(class: u8) -> (f32, f32) {
    match class {
        IMPERVIOUS => (0.0, 0.1),
        BUILDING => (8.0, 25.0),
        LOW_VEGETATION => (0.0, 0.5),
        TREE => (3.0, 10.0),
        CAR => (1.0, 2.0),
        _ => (0.0, 3.0),
    }
}

/// Co-registered RGB (u8×3), DSM (f32×1, meters) and labels (u8×1).
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub rgb: Raster,
    pub dsm: Raster,
    pub labels: Raster,
}

impl Scene {
    pub fn new(rgb: Raster, dsm: Raster, labels: Raster) -> Result<Self> {
        let ext = (rgb.height, rgb.width);
        if (dsm.height, dsm.width) != ext || (labels.height, labels.width) != ext {
            return Err(Error::Data(format!(
                "scene layers disagree in extent: rgb {ext:?}, dsm {:?}, labels {:?}",
                (dsm.height, dsm.width),
                (labels.height, labels.width)
            )));
        }
        if rgb.channels != 3 || dsm.channels != 1 || labels.channels != 1 {
            return Err(Error::Data("scene needs 3 RGB, 1 DSM and 1 label channel".into()));
        }
        rgb.as_u8()?;
        dsm.as_f32()?;
        labels.as_u8()?;
        Ok(Self { rgb, dsm, labels })
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn rgb_data(&self) -> &[u8] {
        self.rgb.as_u8().expect("validated")
    }

    pub fn dsm_data(&self) -> &[f32] {
        self.dsm.as_f32().expect("validated")
    }

    pub fn label_data(&self) -> &[u8] {
        self.labels.as_u8().expect("validated")
    }
}

/// Generator parameters. Object counts are inclusive ranges per scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub size: usize,
    pub n_buildings: RangeInclusive<usize>,
    pub n_trees: RangeInclusive<usize>,
    pub n_low_vegetation: RangeInclusive<usize>,
    pub n_cars: RangeInclusive<usize>,
    pub n_clutter: RangeInclusive<usize>,
    /// Fraction of the scene whose RGB is darkened or fogged.
    pub occlusion_rate: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            size: 64,
            n_buildings: 1..=3,
            n_trees: 2..=5,
            n_low_vegetation: 1..=3,
            n_cars: 2..=4,
            n_clutter: 0..=2,
            occlusion_rate: 0.0,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 || self.size % 32 != 0 {
            return Err(Error::Config(format!("scene size {} must be a positive multiple of 32", self.size)));
        }
        for (name, r) in [
            ("buildings", &self.n_buildings),
            ("trees", &self.n_trees),
            ("low vegetation", &self.n_low_vegetation),
            ("cars", &self.n_cars),
            ("clutter", &self.n_clutter),
        ] {
            if r.start() > r.end() {
                return Err(Error::Config(format!("empty count range for {name}: {r:?}")));
            }
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(Error::Config(format!("occlusion_rate {} outside [0, 1]", self.occlusion_rate)));
        }
        Ok(())
    }
}

/// A generated scene with the intermediate layers tests need.
#[derive(Clone, Debug)]
pub struct GeneratedScene {
    pub scene: Scene,
    /// Heights before noise.
    pub clean_dsm: Vec<f32>,
    /// Pixels whose RGB was altered by an occlusion patch.
    pub occluded: Vec<bool>,
}

const PAVEMENT: [f64; 3] = [118.0, 118.0, 122.0];
const GRAY_ROOF: [f64; 3] = [122.0, 121.0, 124.0];
const RED_ROOF: [f64; 3] = [168.0, 72.0, 58.0];
const GREEN: [f64; 3] = [68.0, 116.0, 54.0];
const CLUTTER_RGB: [f64; 3] = [140.0, 104.0, 72.0];
const CAR_COLORS: [[f64; 3]; 5] = [
    [200.0, 30.0, 30.0],
    [30.0, 60.0, 190.0],
    [235.0, 235.0, 235.0],
    [25.0, 25.0, 25.0],
    [210.0, 190.0, 40.0],
];

struct Canvas {
    size: usize,
    class: Vec<u8>,
    height: Vec<f32>,
    color: Vec<[f64; 3]>,
}

impl Canvas {
    fn paint(&mut self, r: usize, c: usize, class: u8, height: f32, color: [f64; 3]) {
        let i = r * self.size + c;
        self.class[i] = class;
        self.height[i] = height;
        self.color[i] = color;
    }
}

/// Pixels of an irregular blob: an ellipse whose radius wobbles with angle.
fn blob(rng: &mut ChaCha8Rng, size: usize, radius: (f64, f64)) -> Vec<(usize, usize)> {
    let cy = rng.random_range(0.0..size as f64);
    let cx = rng.random_range(0.0..size as f64);
    let ry = rng.random_range(radius.0..=radius.1);
    let rx = rng.random_range(radius.0..=radius.1);
    let lobes = rng.random_range(2..=5) as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    let wobble = rng.random_range(0.05..0.25);
    let mut out = Vec::new();
    let reach = ry.max(rx) * (1.0 + wobble) + 1.0;
    let rows = (cy - reach).floor().max(0.0) as usize..((cy + reach).ceil() as usize).min(size);
    for r in rows {
        let cols = (cx - reach).floor().max(0.0) as usize..((cx + reach).ceil() as usize).min(size);
        for c in cols {
            let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
            let theta = dy.atan2(dx);
            let limit = 1.0 + wobble * (lobes * theta + phase).sin();
            if (dy / ry).powi(2) + (dx / rx).powi(2) <= limit * limit {
                out.push((r, c));
            }
        }
    }
    out
}

/// Axis-aligned rectangle fully inside the scene.
fn rect(rng: &mut ChaCha8Rng, size: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    let r0 = rng.random_range(0..=size - h);
    let c0 = rng.random_range(0..=size - w);
    (r0..r0 + h).flat_map(|r| (c0..c0 + w).map(move |c| (r, c))).collect()
}

fn count(rng: &mut ChaCha8Rng, r: &RangeInclusive<usize>) -> usize {
    rng.random_range(r.clone())
}

/// Deterministic scene from `spec`.
pub fn generate(spec: &GenSpec) -> Result<Scene> {
    Ok(generate_layers(spec)?.scene)
}

pub fn generate_layers(spec: &GenSpec) -> Result<GeneratedScene> {
    spec.validate()?;
    let s = spec.size;
    let sf = s as f64;
    let n = s * s;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, "layout"));
    let mut cv = Canvas {
        size: s,
        class: vec![IMPERVIOUS; n],
        height: (0..n).map(|_| rng.random_range(0.0..=0.1f32)).collect(),
        color: vec![PAVEMENT; n],
    };

    for _ in 0..count(&mut rng, &spec.n_low_vegetation) {
        for (r, c) in blob(&mut rng, s, (sf / 14.0, sf / 6.0)) {
            let h = rng.random_range(0.0..=0.5f32);
            cv.paint(r, c, LOW_VEGETATION, h, GREEN);
        }
    }
    for _ in 0..count(&mut rng, &spec.n_buildings) {
        let (lo, hi) = ((s / 6).max(3), (s / 3).max(4));
        let (h, w) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        let roof_h = rng.random_range(8.0..=25.0f32);
        let roof = if rng.random_bool(0.6) { GRAY_ROOF } else { RED_ROOF };
        for (r, c) in rect(&mut rng, s, h, w) {
            cv.paint(r, c, BUILDING, roof_h, roof);
        }
    }
    for _ in 0..count(&mut rng, &spec.n_trees) {
        let crown = rng.random_range(4.0..=9.0f32);
        for (r, c) in blob(&mut rng, s, (sf / 18.0, sf / 9.0)) {
            let h = (crown + rng.random_range(-1.0..=1.0f32)).clamp(3.0, 10.0);
            cv.paint(r, c, TREE, h, GREEN);
        }
    }
    for _ in 0..count(&mut rng, &spec.n_cars) {
        let (long, short) = (rng.random_range(4..=6), rng.random_range(2..=3));
        let (h, w) = if rng.random_bool(0.5) { (long, short) } else { (short, long) };
        let body = rng.random_range(1.0..=2.0f32);
        let color = CAR_COLORS[rng.random_range(0..CAR_COLORS.len())];
        for (r, c) in rect(&mut rng, s, h, w) {
            cv.paint(r, c, CAR, body, color);
        }
    }
    for _ in 0..count(&mut rng, &spec.n_clutter) {
        let h = rng.random_range(0.0..=3.0f32);
        for (r, c) in blob(&mut rng, s, (1.0, 2.5)) {
            cv.paint(r, c, CLUTTER, h, CLUTTER_RGB);
        }
    }

    // texture: independent per-pixel jitter around the class color
    let mut tex = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, "texture"));
    let mut rgb = vec![0u8; 3 * n];
    let mut shade = vec![[0f64; 3]; n];
    for i in 0..n {
        let jitter = tex.random_range(-12.0..=12.0);
        for ch in 0..3 {
            shade[i][ch] = cv.color[i][ch] + jitter + tex.random_range(-6.0..=6.0);
        }
    }

    // occlusion patches alter RGB only and draw from their own stream
    let mut occluded = vec![false; n];
    if spec.occlusion_rate > 0.0 {
        let mut occ = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, "occlusion"));
        let target = (spec.occlusion_rate * n as f64).ceil() as usize;
        let mut covered = 0;
        while covered < target {
            let (lo, hi) = ((s / 8).max(2), (s / 3).max(3));
            let (h, w) = (occ.random_range(lo..=hi), occ.random_range(lo..=hi));
            let fog = occ.random_bool(0.5);
            for (r, c) in rect(&mut occ, s, h, w) {
                let i = r * s + c;
                if !occluded[i] {
                    occluded[i] = true;
                    covered += 1;
                }
                for v in &mut shade[i] {
                    *v = if fog { 0.15 * *v + 0.85 * 205.0 } else { 0.2 * *v };
                }
            }
        }
    }
    for i in 0..n {
        for ch in 0..3 {
            rgb[ch * n + i] = shade[i][ch].round().clamp(0.0, 255.0) as u8;
        }
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, "dsm_noise"));
    let noise = Normal::new(0.0, DSM_NOISE_STD).expect("positive std");
    let dsm: Vec<f32> = cv
        .height
        .iter()
        .map(|&h| h + noise.sample(&mut noise_rng) as f32)
        .collect();

    let scene = Scene::new(
        Raster::u8(3, s, s, rgb)?,
        Raster::f32(1, s, s, dsm)?,
        Raster::u8(1, s, s, cv.class)?,
    )?;
    Ok(GeneratedScene {
        scene,
        clean_dsm: cv.height,
        occluded,
    })
}

/// Pixel count per class.
pub fn class_histogram(labels: &[u8]) -> [u64; NUM_CLASSES] {
    let mut h = [0u64; NUM_CLASSES];
    for &l in labels {
        if (l as usize) < NUM_CLASSES {
            h[l as usize] += 1;
        }
    }
    h
}
