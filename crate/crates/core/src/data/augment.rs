//! Geometric augmentation applied identically to every layer of a scene.
//! All transforms are nearest-neighbour pixel remaps, so values are never
//! blended and label/height registration is preserved exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::raster::{Pixels, Raster};
use super::synth::Scene;

/// Largest zoom factor drawn by [`augment`].
pub const MAX_ZOOM: f64 = 1.5;

/// Output pixel `(r, c)` reads the zoomed, cropped, rotated and flipped source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
    /// Resize factor ≥ 1; the result is cropped back to the original extent.
    pub zoom: f64,
    /// Top-left corner of the crop in zoomed coordinates.
    pub offset: (usize, usize),
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        hflip: false,
        vflip: false,
        quarter_turns: 0,
        zoom: 1.0,
        offset: (0, 0),
    };

    pub fn random(rng: &mut impl Rng, size: usize) -> Self {
        let zoom = rng.random_range(1.0..=MAX_ZOOM);
        let slack = ((size as f64 * zoom) as usize).saturating_sub(size);
        Self {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4),
            zoom,
            offset: (rng.random_range(0..=slack), rng.random_range(0..=slack)),
        }
    }

    /// Source pixel of output pixel `(r, c)` in an `n × n` image.
    pub fn source(&self, r: usize, c: usize, n: usize) -> (usize, usize) {
        let (mut r, mut c) = (r, c);
        if self.hflip {
            c = n - 1 - c;
        }
        if self.vflip {
            r = n - 1 - r;
        }
        for _ in 0..self.quarter_turns % 4 {
            (r, c) = (c, n - 1 - r);
        }
        let scale = |v: usize, off: usize| (((v + off) as f64 / self.zoom) as usize).min(n - 1);
        (scale(r, self.offset.0), scale(c, self.offset.1))
    }
}

fn remap(raster: &Raster, map: &[usize]) -> Raster {
    let plane = raster.height * raster.width;
    let pick = |i: usize| -> usize {
        let (ch, p) = (i / plane, i % plane);
        ch * plane + map[p]
    };
    let pixels = match &raster.pixels {
        Pixels::U8(v) => Pixels::U8((0..v.len()).map(|i| v[pick(i)]).collect()),
        Pixels::F32(v) => Pixels::F32((0..v.len()).map(|i| v[pick(i)]).collect()),
    };
    Raster { pixels, ..raster.clone() }
}

/// Apply `t` to a square scene.
pub fn apply(scene: &Scene, t: &Transform) -> Scene {
    let n = scene.height();
    debug_assert_eq!(n, scene.width(), "augmentation expects square scenes");
    let map: Vec<usize> = (0..n * n)
        .map(|i| {
            let (r, c) = t.source(i / n, i % n, n);
            r * n + c
        })
        .collect();
    Scene {
        rgb: remap(&scene.rgb, &map),
        dsm: remap(&scene.dsm, &map),
        labels: remap(&scene.labels, &map),
    }
}

/// Random flips, quarter turns and zoom-then-crop drawn from `seed`.
pub fn augment(scene: &Scene, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply(scene, &Transform::random(&mut rng, scene.height()))
}
