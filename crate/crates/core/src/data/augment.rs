use rand::Rng;

use super::{FundusSample, Mask};

/// Brightness shift bounds (symmetric).
pub const BRIGHTNESS_RANGE: f64 = 32.0 / 255.0;
/// Contrast scale bounds.
pub const CONTRAST_RANGE: (f64, f64) = (0.5, 1.5);

/// Brightness shift followed by contrast scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Photometric {
    pub delta: f64,
    pub scale: f64,
}

/// One concrete draw of the augmentation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentParams {
    pub flip: bool,
    pub photometric: Option<Photometric>,
}

impl AugmentParams {
    /// Flip with probability 0.5, photometric distortion with probability
    /// 0.5. Always consumes the same number of draws.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let flip = rng.random_bool(0.5);
        let distort = rng.random_bool(0.5);
        let delta = rng.random_range(-BRIGHTNESS_RANGE..=BRIGHTNESS_RANGE);
        let scale = rng.random_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1);
        Self {
            flip,
            photometric: distort.then_some(Photometric { delta, scale }),
        }
    }

    pub fn apply(&self, sample: &FundusSample) -> FundusSample {
        let mut out = sample.clone();
        if self.flip {
            flip_in_place(&mut out);
        }
        if let Some(p) = self.photometric {
            out.image
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = ((*v + p.delta) * p.scale).clamp(0.0, 1.0));
        }
        out
    }
}

fn flip_in_place(s: &mut FundusSample) {
    let w = s.width();
    s.image.data_mut().chunks_mut(w).for_each(<[f64]>::reverse);
    let Mask { data, .. } = &mut s.mask;
    data.chunks_mut(w).for_each(<[u8]>::reverse);
}

/// Draws parameters from `rng` and applies them.
pub fn augment<R: Rng + ?Sized>(sample: &FundusSample, rng: &mut R) -> FundusSample {
    AugmentParams::sample(rng).apply(sample)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::Split;
    use crate::tensor::Tensor;

    fn sample() -> FundusSample {
        let image = Tensor::from_fn(&[3, 3, 4], |i| (i as f64 * 0.37).sin().abs()).unwrap();
        let mask = Mask::new(3, 4, vec![0, 0, 1, 1, 0, 1, 1, 0, 1, 0, 0, 0]).unwrap();
        FundusSample::new(image, mask, "s", Split::Train).unwrap()
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = sample();
        let p = AugmentParams {
            flip: true,
            photometric: None,
        };
        let once = p.apply(&s);
        assert_ne!(once, s);
        assert_eq!(once.mask.at(0, 0), 1);
        assert_eq!(once.image.at(&[2, 1, 0]), s.image.at(&[2, 1, 3]));
        assert_eq!(p.apply(&once), s);
    }

    #[test]
    fn identity_photometric() {
        let s = sample();
        let p = AugmentParams {
            flip: false,
            photometric: Some(Photometric { delta: 0.0, scale: 1.0 }),
        };
        assert_eq!(p.apply(&s), s);
    }

    #[test]
    fn photometric_leaves_mask_and_clamps() {
        let s = sample();
        let p = AugmentParams {
            flip: false,
            photometric: Some(Photometric { delta: 0.1, scale: 1.5 }),
        };
        let out = p.apply(&s);
        assert_eq!(out.mask, s.mask);
        assert!(out.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(out.image.data().contains(&1.0));
    }

    #[test]
    fn seeded_draws_repeat() {
        let s = sample();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..16).map(|_| augment(&s, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let p = AugmentParams::sample(&mut rng);
            if let Some(ph) = p.photometric {
                assert!(ph.delta.abs() <= BRIGHTNESS_RANGE);
                assert!((0.5..=1.5).contains(&ph.scale));
            }
        }
    }
}
