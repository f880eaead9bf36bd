use crate::error::{Error, Result};
use crate::nn::bilinear_resize;
use crate::tensor::{Tape, Tensor};

use super::{FundusSample, Mask};

pub const MEAN: f64 = 0.5;
pub const STD: f64 = 0.5;

/// Nearest-neighbour resize with half-pixel centres.
pub fn resize_mask_nearest(mask: &Mask, out_h: usize, out_w: usize) -> Result<Mask> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_mask", "zero output extent"));
    }
    let src = |o: usize, n_in: usize, n_out: usize| ((2 * o + 1) * n_in / (2 * n_out)).min(n_in - 1);
    let mut data = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = src(y, mask.height, out_h);
        for x in 0..out_w {
            data.push(mask.at(sy, src(x, mask.width, out_w)));
        }
    }
    Mask::new(out_h, out_w, data)
}

/// Centre square crop of side `crop`, then resize to `side × side`
/// (bilinear for the image, nearest for the mask). Values stay in `[0, 1]`.
pub fn crop_and_resize(sample: &FundusSample, crop: usize, side: usize) -> Result<FundusSample> {
    let (h, w) = (sample.height(), sample.width());
    if crop == 0 || crop > h.min(w) {
        return Err(Error::invalid(
            "preprocess",
            format!("crop {crop} does not fit a {h}x{w} image"),
        ));
    }
    let (top, left) = ((h - crop) / 2, (w - crop) / 2);
    let src = sample.image.data();
    let image = Tensor::from_fn(&[3, crop, crop], |i| {
        let (c, y, x) = (i / (crop * crop), (i / crop) % crop, i % crop);
        src[(c * h + top + y) * w + left + x]
    })?;
    let mask = Mask::new(
        crop,
        crop,
        (0..crop * crop)
            .map(|i| sample.mask.at(top + i / crop, left + i % crop))
            .collect(),
    )?;
    let image = if crop == side {
        image
    } else {
        let mut tape = Tape::new();
        let x = tape.constant(image.reshape(&[1, 3, crop, crop])?);
        let y = bilinear_resize(&mut tape, x, side, side)?;
        tape.value(y).clone().reshape(&[3, side, side])?
    };
    let mask = resize_mask_nearest(&mask, side, side)?;
    FundusSample::new(image, mask, sample.id.clone(), sample.split)
}

/// Per-channel `(x - 0.5) / 0.5`.
pub fn standardize(image: &Tensor) -> Tensor {
    let mut out = image.clone();
    out.data_mut().iter_mut().for_each(|v| *v = (*v - MEAN) / STD);
    out
}

/// [`crop_and_resize`] followed by [`standardize`].
pub fn preprocess(sample: &FundusSample, crop: usize, side: usize) -> Result<FundusSample> {
    let mut s = crop_and_resize(sample, crop, side)?;
    s.image = standardize(&s.image);
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn sample(h: usize, w: usize) -> FundusSample {
        let image = Tensor::from_fn(&[3, h, w], |i| (i % 7) as f64 / 7.0).unwrap();
        let mask = Mask::new(h, w, (0..h * w).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        FundusSample::new(image, mask, "s", Split::Train).unwrap()
    }

    #[test]
    fn full_crop_same_side_is_identity() {
        let s = sample(8, 8);
        let out = crop_and_resize(&s, 8, 8).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn centre_crop() {
        let s = sample(6, 10);
        let out = crop_and_resize(&s, 4, 4).unwrap();
        assert_eq!(out.image.at(&[1, 0, 0]), s.image.at(&[1, 1, 3]));
        assert_eq!(out.mask.at(3, 3), s.mask.at(4, 6));
        assert!(crop_and_resize(&s, 7, 4).is_err());
        assert!(crop_and_resize(&s, 0, 4).is_err());
    }

    #[test]
    fn resize_path_shapes() {
        let out = crop_and_resize(&sample(16, 16), 16, 8).unwrap();
        assert_eq!(out.image.shape(), &[3, 8, 8]);
        assert_eq!((out.mask.height, out.mask.width), (8, 8));
        assert!(out.mask.data.iter().all(|&c| c <= 1));
    }

    #[test]
    fn standardize_half_is_zero() {
        let out = standardize(&Tensor::full(&[3, 2, 2], 0.5).unwrap());
        assert!(out.data().iter().all(|&v| v == 0.0));
        let out = standardize(&Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap());
        assert_eq!(out.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn nearest_downsample_picks_centres() {
        let m = Mask::new(1, 4, vec![0, 1, 0, 1]).unwrap();
        assert_eq!(resize_mask_nearest(&m, 1, 2).unwrap().data, vec![1, 1]);
        assert_eq!(
            resize_mask_nearest(&m, 1, 8).unwrap().data,
            vec![0, 0, 1, 1, 0, 0, 1, 1]
        );
    }
}
