use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::manifest::{write_manifest, ManifestEntry};
use super::pnm::{write_image, write_mask};
use super::{FundusSample, Mask, Split};

pub const MIN_SYNTH_SIDE: usize = 32;

/// Field-of-view radius as a fraction of the side.
const FOV_RADIUS: f64 = 0.46;
/// Disc semi-axis bounds as fractions of the side.
const AXIS_RANGE: (f64, f64) = (0.08, 0.20);
const VESSELS: (usize, usize) = (3, 6);
const VESSEL_SEGMENTS: usize = 8;

/// Geometry of one synthetic image, in pixel units with pixel centres at
/// `i + 0.5`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthGeometry {
    pub side: usize,
    pub fov_centre: (f64, f64),
    pub fov_radius: f64,
    pub disc_centre: (f64, f64),
    pub semi_axes: (f64, f64),
    pub tilt: f64,
}

impl SynthGeometry {
    pub fn from_seed(seed: u64, side: usize) -> Result<Self> {
        check_side(side)?;
        Ok(Self::draw(&mut ChaCha8Rng::seed_from_u64(seed), side))
    }

    fn draw(rng: &mut ChaCha8Rng, side: usize) -> Self {
        let s = side as f64;
        let fov_centre = (s / 2.0, s / 2.0);
        let fov_radius = FOV_RADIUS * s;
        let a = rng.random_range(AXIS_RANGE.0..=AXIS_RANGE.1) * s;
        let b = rng.random_range(AXIS_RANGE.0..=AXIS_RANGE.1) * s;
        let tilt = rng.random_range(0.0..PI);
        // keep the whole disc one pixel inside the field of view
        let reach = fov_radius - a.max(b) - 1.0;
        let r = reach * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..2.0 * PI);
        Self {
            side,
            fov_centre,
            fov_radius,
            disc_centre: (fov_centre.0 + r * phi.cos(), fov_centre.1 + r * phi.sin()),
            semi_axes: (a, b),
            tilt,
        }
    }

    /// Squared normalized radius of point `(x, y)` in the disc's frame;
    /// `<= 1` inside.
    pub fn disc_radius2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.disc_centre.0, y - self.disc_centre.1);
        let (c, s) = (self.tilt.cos(), self.tilt.sin());
        let u = (dx * c + dy * s) / self.semi_axes.0;
        let v = (-dx * s + dy * c) / self.semi_axes.1;
        u * u + v * v
    }

    pub fn in_fov(&self, x: f64, y: f64) -> bool {
        (x - self.fov_centre.0).hypot(y - self.fov_centre.1) <= self.fov_radius
    }
}

fn check_side(side: usize) -> Result<()> {
    if side < MIN_SYNTH_SIDE {
        return Err(Error::invalid(
            "synth_fundus",
            format!("side {side} below minimum {MIN_SYNTH_SIDE}"),
        ));
    }
    Ok(())
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - t * vx).hypot(p.1 - a.1 - t * vy)
}

struct Vessel {
    points: Vec<(f64, f64)>,
    half_width: f64,
}

/// Deterministic synthetic fundus photograph with its disc mask.
pub fn synth_fundus(seed: u64, side: usize) -> Result<FundusSample> {
    check_side(side)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = SynthGeometry::draw(&mut rng, side);
    let s = side as f64;

    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let theta = rng.random_range(0.0..2.0 * PI);
            let freq = rng.random_range(1.0..4.0) * 2.0 * PI / s;
            (freq * theta.cos(), freq * theta.sin(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();

    let n_vessels = rng.random_range(VESSELS.0..=VESSELS.1);
    let vessels: Vec<Vessel> = (0..n_vessels)
        .map(|_| {
            let mut dir = rng.random_range(0.0..2.0 * PI);
            let step = g.fov_radius * 0.16;
            let mut p = g.disc_centre;
            let mut points = vec![p];
            for _ in 0..VESSEL_SEGMENTS {
                dir += rng.random_range(-0.35..0.35);
                p = (p.0 + step * dir.cos(), p.1 + step * dir.sin());
                points.push(p);
            }
            Vessel {
                points,
                half_width: rng.random_range(0.006..0.014) * s,
            }
        })
        .collect();

    let plane = side * side;
    let mut img = vec![0.0; 3 * plane];
    let mut mask = vec![0u8; plane];
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if !g.in_fov(px, py) {
                continue;
            }
            let i = y * side + x;
            let r = (px - g.fov_centre.0).hypot(py - g.fov_centre.1) / g.fov_radius;
            let texture: f64 = waves
                .iter()
                .map(|&(kx, ky, ph)| 0.035 * (kx * px + ky * py + ph).sin())
                .sum::<f64>()
                + rng.random_range(-0.02..0.02);
            let shade = 1.0 - 0.35 * r * r;
            let mut rgb = [
                0.62 * shade + texture,
                0.27 * shade + 0.5 * texture,
                0.12 * shade + 0.3 * texture,
            ];
            let d2 = g.disc_radius2(px, py);
            let inside = d2 <= 1.0;
            if inside {
                mask[i] = 1;
                let glow = 1.0 - 0.12 * d2;
                rgb = [0.98 * glow, 0.88 * glow, 0.62 * glow];
            }
            let on_vessel = vessels.iter().any(|v| {
                v.points
                    .windows(2)
                    .any(|w| segment_distance((px, py), w[0], w[1]) <= v.half_width)
            });
            if on_vessel {
                let keep = if inside { 0.7 } else { 0.45 };
                rgb = [rgb[0] * keep, rgb[1] * keep * 0.6, rgb[2] * keep * 0.6];
            }
            for (c, v) in rgb.into_iter().enumerate() {
                img[c * plane + i] = v.clamp(0.0, 1.0);
            }
        }
    }
    FundusSample::new(
        Tensor::new(&[3, side, side], img)?,
        Mask::new(side, side, mask)?,
        format!("synth-{seed}"),
        Split::Train,
    )
}

/// Writes `count` synthetic image/mask pairs plus `manifest.jsonl` into
/// `dir`. The first 80% (by index) are `train`, the rest `val`; sample `i`
/// uses seed `seed + i`.
pub fn synth_corpus(dir: &Path, count: usize, side: usize, seed: u64) -> Result<Vec<ManifestEntry>> {
    check_side(side)?;
    if count == 0 {
        return Err(Error::invalid("synth_corpus", "count must be positive"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n_train = (count * 4 / 5).max(1);
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let sample = synth_fundus(seed.wrapping_add(i as u64), side)?;
        let id = format!("synth_{i:04}");
        let (image, mask) = (format!("{id}.ppm"), format!("{id}_mask.pgm"));
        write_image(&dir.join(&image), &sample.image)?;
        write_mask(&dir.join(&mask), &sample.mask)?;
        entries.push(ManifestEntry {
            image: image.into(),
            mask: mask.into(),
            split: if i < n_train { Split::Train } else { Split::Val },
            id,
            participant: None,
            line: i + 1,
        });
    }
    write_manifest(&dir.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}
