//! Samples, codecs, manifests, preprocessing, augmentation and synthetic
//! fundus images.

mod augment;
mod manifest;
mod pnm;
mod preprocess;
mod synth;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, AugmentParams, Photometric, BRIGHTNESS_RANGE, CONTRAST_RANGE};
pub use manifest::{lint_participants, load_manifest, parse_manifest, write_manifest, ManifestEntry};
pub use pnm::{
    decode_pgm_mask, decode_ppm, encode_pgm_mask, encode_ppm, read_image, read_mask, write_image, write_mask,
    MASK_THRESHOLD,
};
pub use preprocess::{crop_and_resize, preprocess, resize_mask_nearest, standardize, MEAN, STD};
pub use synth::{synth_corpus, synth_fundus, SynthGeometry, MIN_SYNTH_SIDE};

/// Per-pixel class ids in row-major `(H, W)` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape("mask", &[height, width], &[data.len()]));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Class ids widened for loss and confusion counting.
    pub fn classes(&self) -> Vec<usize> {
        self.data.iter().map(|&c| usize::from(c)).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&c| c == class).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split {other:?}, expected \"train\" or \"val\"")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// One image with its annotation. `image` is `(3, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FundusSample {
    pub image: Tensor,
    pub mask: Mask,
    pub id: String,
    pub split: Split,
}

impl FundusSample {
    pub fn new(image: Tensor, mask: Mask, id: impl Into<String>, split: Split) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::invalid("sample", format!("image must be (3, H, W), got {s:?}")));
        }
        if (s[1], s[2]) != (mask.height, mask.width) {
            return Err(Error::shape("sample", &s[1..], &[mask.height, mask.width]));
        }
        Ok(Self {
            image,
            mask,
            id: id.into(),
            split,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }
}

/// Stacks samples of equal extents into a `(N, 3, H, W)` batch and the
/// matching flattened class ids.
pub fn stack(samples: &[&FundusSample]) -> Result<(Tensor, Vec<usize>)> {
    let first = samples.first().ok_or_else(|| Error::invalid("stack", "empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut targets = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::shape("stack", &[h, w], &[s.height(), s.width()]));
        }
        data.extend_from_slice(s.image.data());
        targets.extend(s.mask.classes());
    }
    Ok((Tensor::new(&[samples.len(), 3, h, w], data)?, targets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_parse() {
        assert_eq!("train".parse::<Split>().unwrap(), Split::Train);
        assert_eq!(Split::Val.to_string(), "val");
        assert!("test".parse::<Split>().is_err());
    }

    #[test]
    fn sample_extents_checked() {
        let img = Tensor::zeros(&[3, 2, 3]).unwrap();
        assert!(FundusSample::new(img.clone(), Mask::zeros(2, 3).unwrap(), "a", Split::Train).is_ok());
        assert!(FundusSample::new(img, Mask::zeros(3, 2).unwrap(), "a", Split::Train).is_err());
        assert!(Mask::new(2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn stack_batches() {
        let a = FundusSample::new(
            Tensor::zeros(&[3, 2, 2]).unwrap(),
            Mask::zeros(2, 2).unwrap(),
            "a",
            Split::Train,
        )
        .unwrap();
        let b = FundusSample::new(
            Tensor::ones(&[3, 2, 2]).unwrap(),
            Mask::new(2, 2, vec![1, 0, 0, 1]).unwrap(),
            "b",
            Split::Train,
        )
        .unwrap();
        let (x, t) = stack(&[&a, &b]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 2, 2]);
        assert_eq!(x.data()[12], 1.0);
        assert_eq!(t, vec![0, 0, 0, 0, 1, 0, 0, 1]);
        assert!(stack(&[]).is_err());
    }
}
