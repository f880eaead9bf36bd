use crate::config::ModelConfig;
use crate::decoder::Decoder;
use crate::encoder::{Encoder, EncoderOutput};
use crate::error::{Error, Result};
use crate::layers::Builder;
use crate::msca::Msca;
use crate::params::{ParamStore, Session};
use crate::tensor::Var;

/// Full segmentation network: stem, encoder, decoder. Parameters live in a
/// separate [`ParamStore`] built alongside.
#[derive(Debug, Clone)]
pub struct OdFormer {
    pub config: ModelConfig,
    pub msca: Msca,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Intermediate results of one forward pass.
pub struct Forward {
    pub stem: Var,
    pub pyramid: EncoderOutput,
    pub logits: Var,
}

impl OdFormer {
    /// Builds the network and registers freshly initialised parameters,
    /// seeded by `config.seed`.
    pub fn new(config: ModelConfig) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, config.seed);
        let msca = Msca::build(&mut b, config.m, config.c_i)?;
        let encoder = Encoder::build(&mut b, config.c_i, &Encoder::stage_configs(&config))?;
        let decoder = Decoder::build(&mut b, &config)?;
        Ok((
            Self {
                config,
                msca,
                encoder,
                decoder,
            },
            store,
        ))
    }

    /// Forward pass on a standardized image batch `(N, 3, H, W)`.
    pub fn forward_full(&self, s: &mut Session<'_>, image: Var) -> Result<Forward> {
        let shape = s.tape.shape(image).to_vec();
        if shape.len() != 4 {
            return Err(Error::invalid("model", format!("expected (N, 3, H, W), got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        self.config.check_input(h, w)?;
        let stem = self.msca.forward(s, image)?;
        let pyramid = self.encoder.forward(s, stem)?;
        let logits = self.decoder.forward(s, &pyramid, h, w)?;
        Ok(Forward { stem, pyramid, logits })
    }

    /// Logits `(N, K, H, W)`.
    pub fn forward(&self, s: &mut Session<'_>, image: Var) -> Result<Var> {
        Ok(self.forward_full(s, image)?.logits)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.msca.param_count(store) + self.encoder.param_count(store) + self.decoder.param_count(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::Tensor;

    #[test]
    fn desk_forward_shapes() {
        let (model, store) = OdFormer::new(ModelConfig::desk()).unwrap();
        assert_eq!(model.param_count(&store), store.param_count());
        let mut s = Session::new(&store, Mode::Train);
        let x = s.input(Tensor::from_fn(&[1, 3, 64, 64], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).unwrap());
        let out = model.forward_full(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(out.stem), &[1, 16, 16, 16]);
        assert_eq!(s.tape.shape(out.logits), &[1, 2, 64, 64]);
        assert!(s.tape.value(out.logits).is_finite());
    }

    #[test]
    fn rejects_indivisible_input() {
        let (model, store) = OdFormer::new(ModelConfig::desk()).unwrap();
        let mut s = Session::new(&store, Mode::Train);
        let x = s.input(Tensor::zeros(&[1, 3, 48, 48]).unwrap());
        assert!(model.forward(&mut s, x).is_err());
    }
}
