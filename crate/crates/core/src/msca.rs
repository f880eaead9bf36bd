//! Multi-scale context aggregator: the stride-4 stem.
//!
//! `m` parallel 3×3 atrous convolutions (dilation `d = 1..=m`, stride 1,
//! same padding, `3 → C^I` each) run at full resolution; their outputs are
//! concatenated on the channel axis, fused by a 5×5 stride-4 convolution
//! (`m·C^I → C^I`) and layer-normalized over channels.

use crate::error::{Error, Result};
use crate::layers::{Builder, Conv2d, LayerNorm};
use crate::nn::ConvGeometry;
use crate::params::{ParamStore, Session};
use crate::tensor::Var;

pub const BRANCH_KERNEL: usize = 3;
pub const FUSE_KERNEL: usize = 5;
pub const FUSE_STRIDE: usize = 4;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone)]
pub struct Msca {
    /// Branch `i` has dilation `i + 1`.
    pub branches: Vec<Conv2d>,
    pub fuse: Conv2d,
    pub norm: LayerNorm,
}

fn check_dims(m: usize, c_i: usize) -> Result<()> {
    if !(1..=8).contains(&m) {
        return Err(Error::Config {
            field: "m",
            msg: format!("must lie in [1, 8], got {m}"),
        });
    }
    if c_i == 0 {
        return Err(Error::Config {
            field: "c_i",
            msg: "must be positive".into(),
        });
    }
    Ok(())
}

/// Convolution parameters (weights and biases of the branches and the fuse
/// convolution) for `m` branches of width `c_i`. The layer-norm affine adds
/// another `2·c_i`.
pub fn msca_param_count(m: usize, c_i: usize) -> Result<usize> {
    check_dims(m, c_i)?;
    let branch = BRANCH_KERNEL * BRANCH_KERNEL * IMAGE_CHANNELS * c_i + c_i;
    let fuse = FUSE_KERNEL * FUSE_KERNEL * m * c_i * c_i + c_i;
    Ok(m * branch + fuse)
}

impl Msca {
    pub fn build(b: &mut Builder<'_>, m: usize, c_i: usize) -> Result<Self> {
        check_dims(m, c_i)?;
        b.scoped("msca", |b| {
            let branches = (1..=m)
                .map(|d| {
                    b.conv2d(
                        &format!("branch{d}"),
                        IMAGE_CHANNELS,
                        c_i,
                        (BRANCH_KERNEL, BRANCH_KERNEL),
                        ConvGeometry::same((BRANCH_KERNEL, BRANCH_KERNEL), (d, d)),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let fuse = b.conv2d(
                "fuse",
                m * c_i,
                c_i,
                (FUSE_KERNEL, FUSE_KERNEL),
                ConvGeometry::strided(FUSE_STRIDE, FUSE_KERNEL / 2),
            )?;
            let norm = b.layer_norm("norm", c_i)?;
            Ok(Self { branches, fuse, norm })
        })
    }

    /// `(N, 3, H, W)` → `(N, C^I, H/4, W/4)`.
    pub fn forward(&self, s: &mut Session<'_>, image: Var) -> Result<Var> {
        let shape = s.tape.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != IMAGE_CHANNELS {
            return Err(Error::invalid(
                "msca",
                format!("expected (N, 3, H, W) image, got {shape:?}"),
            ));
        }
        let (h, w) = (shape[2], shape[3]);
        if h < FUSE_KERNEL || w < FUSE_KERNEL {
            return Err(Error::invalid(
                "msca",
                format!("{h}×{w} image is smaller than the 5×5 fuse kernel"),
            ));
        }
        if h % FUSE_STRIDE != 0 || w % FUSE_STRIDE != 0 {
            return Err(Error::invalid("msca", format!("{h}×{w} image is not divisible by 4")));
        }
        let feats = self
            .branches
            .iter()
            .map(|br| br.forward(s, image))
            .collect::<Result<Vec<_>>>()?;
        let cat = if feats.len() == 1 {
            feats[0]
        } else {
            s.tape.concat(&feats, 1)?
        };
        let fused = self.fuse.forward(s, cat)?;
        self.norm.forward(s, fused, 1)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.branches.iter().map(|b| b.param_count(store)).sum::<usize>()
            + self.fuse.param_count(store)
            + self.norm.param_count(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{self, Mode};
    use crate::tensor::Tensor;

    #[test]
    fn counting_formula() {
        assert_eq!(msca_param_count(1, 4).unwrap(), 516);
        assert_eq!(msca_param_count(2, 4).unwrap(), 2 * 112 + 5 * 5 * 8 * 4 + 4);
        assert!(msca_param_count(3, 0).is_err());
        assert!(msca_param_count(0, 4).is_err());
    }

    #[test]
    fn built_params_match_formula() {
        for m in 1..=8 {
            let mut store = ParamStore::new();
            let msca = Msca::build(&mut Builder::new(&mut store, 1), m, 4).unwrap();
            assert_eq!(msca.param_count(&store), msca_param_count(m, 4).unwrap() + 8);
            assert_eq!(store.param_count(), msca.param_count(&store));
            for (i, br) in msca.branches.iter().enumerate() {
                assert_eq!(br.geom.dilation, (i + 1, i + 1));
                assert_eq!(br.geom.padding, (i + 1, i + 1));
            }
        }
    }

    #[test]
    fn output_shape() {
        let mut store = ParamStore::new();
        let msca = Msca::build(&mut Builder::new(&mut store, 0), 3, 16).unwrap();
        let mut s = Session::new(&store, Mode::Eval);
        let x = s.input(Tensor::from_fn(&[1, 3, 64, 64], |i| ((i % 17) as f64) / 17.0).unwrap());
        let y = msca.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(y), &[1, 16, 16, 16]);
    }

    #[test]
    fn single_branch_matches_hand_composition() {
        let mut store = ParamStore::new();
        let msca = Msca::build(&mut Builder::new(&mut store, 5), 1, 4).unwrap();
        let image = Tensor::from_fn(&[2, 3, 8, 8], |i| (i as f64 * 0.37).sin()).unwrap();
        let mut s = Session::new(&store, Mode::Eval);
        let x = s.input(image.clone());
        let y = msca.forward(&mut s, x).unwrap();
        let got = s.tape.value(y).clone();

        let mut t = crate::tensor::Tape::new();
        let x = t.constant(image);
        let p = |t: &mut crate::tensor::Tape, id| t.constant(store.value(id).clone());
        let (bw, bb) = (
            p(&mut t, msca.branches[0].weight),
            p(&mut t, msca.branches[0].bias.unwrap()),
        );
        let (fw, fb) = (p(&mut t, msca.fuse.weight), p(&mut t, msca.fuse.bias.unwrap()));
        let (g, b) = (p(&mut t, msca.norm.gamma), p(&mut t, msca.norm.beta));
        let a = nn::conv2d(&mut t, x, bw, Some(bb), ConvGeometry::same((3, 3), (1, 1))).unwrap();
        let f = nn::conv2d(&mut t, a, fw, Some(fb), ConvGeometry::strided(4, 2)).unwrap();
        let o = nn::layer_norm(&mut t, f, g, b, 1, nn::LN_EPS).unwrap();
        assert_eq!(t.value(o), &got);
    }

    #[test]
    fn rejects_bad_images() {
        let mut store = ParamStore::new();
        let msca = Msca::build(&mut Builder::new(&mut store, 0), 2, 4).unwrap();
        let mut s = Session::new(&store, Mode::Eval);
        for shape in [[1, 3, 10, 8], [1, 1, 8, 8], [1, 3, 4, 4]] {
            let x = s.input(Tensor::zeros(&shape).unwrap());
            assert!(msca.forward(&mut s, x).is_err(), "{shape:?}");
        }
    }
}
