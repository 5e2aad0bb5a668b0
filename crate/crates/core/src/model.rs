//! The full segmenter: backbone (plain or shrunk) plus attention-to-mask
//! decoder.

use crate::atm::{self, DecoderConfig, StageOutput};
use crate::encoder::{self, EncoderConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossWeights, SegTarget};
use crate::numerics::{Bound, Init, ParamStore, Real, Tensor};
use crate::shrunk::{self, ShrunkConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    /// 1-based encoder layers feeding the cascade, strictly increasing. The
    /// deepest one feeds the first stage.
    pub cascade_layers: Vec<usize>,
    pub shrunk: Option<ShrunkConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.num_classes > usize::from(crate::labels::IGNORE_LABEL) {
            return Err(Error::config(format!("at most 255 classes are supported, got {}", self.num_classes)));
        }
        if self.cascade_layers.is_empty() {
            return Err(Error::config("cascade_layers must not be empty"));
        }
        if self.cascade_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "cascade_layers {:?} must be strictly increasing",
                self.cascade_layers
            )));
        }
        let (first, last) = (self.cascade_layers[0], *self.cascade_layers.last().unwrap());
        if first == 0 || last > self.encoder.depth {
            return Err(Error::config(format!(
                "cascade_layers {:?} must lie in [1, {}]",
                self.cascade_layers, self.encoder.depth
            )));
        }
        if let Some(s) = &self.shrunk {
            s.validate(&self.encoder)?;
        }
        Ok(())
    }

    /// With a shrunk backbone the decoder is a single stage on the
    /// backbone's decoder-ready output; otherwise one stage per cascade layer.
    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            num_classes: self.num_classes,
            width: self.encoder.width,
            heads: self.encoder.heads,
            mlp_ratio: self.encoder.mlp_ratio,
            stages: if self.shrunk.is_some() { 1 } else { self.cascade_layers.len() },
        }
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.encoder.image_height, self.encoder.image_width)
    }
}

/// Parameters initialised from `seed` in a fixed order: encoder, decoder,
/// then the shrunk-only weights.
pub fn init_params<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<F>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    encoder::init_encoder(&mut store, &mut init, &cfg.encoder)?;
    atm::init_decoder(&mut store, &mut init, &cfg.decoder())?;
    if let Some(s) = &cfg.shrunk {
        shrunk::init_shrunk(&mut store, &mut init, s, &cfg.encoder)?;
    }
    Ok(store)
}

/// Features handed to the decoder, in stage order.
pub fn decoder_features<'g, F: Real>(
    p: &Bound<'g, F>,
    cfg: &ModelConfig,
    image: &Tensor<F>,
) -> Result<Vec<TokenSequence<'g, F>>> {
    let feats = shrunk::shrunk_forward(p, image, &cfg.encoder, cfg.shrunk.as_ref())?;
    if cfg.shrunk.is_some() {
        return Ok(vec![encoder::final_norm(p, &feats.decoder_input)?]);
    }
    cfg.cascade_layers
        .iter()
        .rev()
        .map(|&l| encoder::final_norm(p, &feats.layers[l - 1]))
        .collect()
}

pub fn forward<'g, F: Real>(p: &Bound<'g, F>, cfg: &ModelConfig, image: &Tensor<F>) -> Result<Vec<StageOutput<'g, F>>> {
    let shape = image.shape();
    let (h, w) = cfg.image_size();
    if shape != [h, w, 3] {
        return Err(Error::config(format!("image shape {shape:?} does not match configured {h}x{w}x3")));
    }
    let feats = decoder_features(p, cfg, image)?;
    atm::cascade_decode(p, &cfg.decoder(), &feats)
}

pub fn loss<'g, F: Real>(
    p: &Bound<'g, F>,
    cfg: &ModelConfig,
    image: &Tensor<F>,
    target: &SegTarget<F>,
    weights: &LossWeights,
) -> Result<LossBreakdown<'g, F>> {
    let stages = forward(p, cfg, image)?;
    losses::total_loss(&stages, target, weights)
}
