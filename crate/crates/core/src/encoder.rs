//! Plain (non-hierarchical) ViT backbone.
//!
//! An image is cut into non-overlapping `P×P` patches, each flattened in
//! (row, column, channel) order and linearly projected to width `C`, plus a
//! learnable position embedding per patch. The sequence then runs through
//! `depth` pre-norm transformer layers; every layer keeps the token count.

use crate::error::{Error, Result};
use crate::nn::{self, INIT_STD};
use crate::numerics::{Bound, Init, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || !self.image_height.is_multiple_of(p) || !self.image_width.is_multiple_of(p) {
            return Err(Error::config(format!(
                "image {}x{} not divisible by patch size {p}",
                self.image_height, self.image_width
            )));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::config("empty image size"));
        }
        if self.depth == 0 {
            return Err(Error::config("encoder depth must be positive"));
        }
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp ratio must be positive"));
        }
        Ok(())
    }

    /// Patch grid `(H/P, W/P)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    /// Sequence length `L = HW/P²`.
    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Length of one flattened RGB patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// `L×C` feature tokens laid out row-major over an `Hp×Wp` patch grid.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence<'g, F: Real> {
    pub tokens: Var<'g, F>,
    pub grid: (usize, usize),
    /// Encoder layer that produced the tokens (0 for the embedding).
    pub source_layer: usize,
}

impl<'g, F: Real> TokenSequence<'g, F> {
    pub fn new(tokens: Var<'g, F>, grid: (usize, usize), source_layer: usize) -> Result<Self> {
        let shape = tokens.shape();
        if shape.len() != 2 || shape[0] != grid.0 * grid.1 {
            return Err(Error::Shape {
                op: "token_sequence",
                shape,
                reason: format!("grid {grid:?} does not match token count"),
            });
        }
        Ok(TokenSequence {
            tokens,
            grid,
            source_layer,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// View as `[Hp, Wp, C]`.
    pub fn spatial(&self) -> Result<Tensor<F>> {
        self.tokens.value().reshape(&[self.grid.0, self.grid.1, self.width()])
    }
}

pub fn layer_scope(layer: usize) -> String {
    format!("encoder.layer{layer}")
}

pub fn init_encoder<F: Real>(store: &mut ParamStore<F>, init: &mut Init, cfg: &EncoderConfig) -> Result<()> {
    cfg.validate()?;
    let c = cfg.width;
    nn::init_linear(store, init, "encoder.patch_embed", cfg.patch_dim(), c)?;
    store.insert("encoder.pos_embed", init.normal(&[cfg.tokens(), c], INIT_STD))?;
    for i in 1..=cfg.depth {
        init_transformer_layer(store, init, &layer_scope(i), c, cfg.mlp_ratio)?;
    }
    nn::init_norm(store, "encoder.final_norm", c)
}

pub fn init_transformer_layer<F: Real>(
    store: &mut ParamStore<F>,
    init: &mut Init,
    scope: &str,
    width: usize,
    mlp_ratio: usize,
) -> Result<()> {
    nn::init_norm(store, &format!("{scope}.norm1"), width)?;
    nn::init_attention(store, init, &format!("{scope}.attn"), width)?;
    nn::init_norm(store, &format!("{scope}.norm2"), width)?;
    nn::init_mlp(store, init, &format!("{scope}.mlp"), width, mlp_ratio)
}

/// Rearrange an `[H, W, 3]` image into `[L, P·P·3]` flattened patches.
pub fn patch_matrix<F: Real>(image: &Tensor<F>, cfg: &EncoderConfig) -> Result<Tensor<F>> {
    cfg.validate()?;
    let (h, w, p) = (cfg.image_height, cfg.image_width, cfg.patch_size);
    if image.shape() != [h, w, 3] {
        return Err(Error::Dimension {
            op: "patchify",
            lhs: image.shape().to_vec(),
            rhs: vec![h, w, 3],
        });
    }
    let (gh, gw) = cfg.grid();
    let mut out = Vec::with_capacity(image.numel());
    let src = image.data();
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                let row = (gy * p + py) * w + gx * p;
                out.extend_from_slice(&src[row * 3..(row + p) * 3]);
            }
        }
    }
    Tensor::new(&[gh * gw, cfg.patch_dim()], out)
}

/// Patch embedding plus position embedding: the layer-0 sequence.
pub fn patchify<'g, F: Real>(p: &Bound<'g, F>, image: &Tensor<F>, cfg: &EncoderConfig) -> Result<TokenSequence<'g, F>> {
    let patches = p.graph().constant(patch_matrix(image, cfg)?);
    let tokens = nn::linear(p, "encoder.patch_embed", patches)?.add(p.get("encoder.pos_embed")?)?;
    TokenSequence::new(tokens, cfg.grid(), 0)
}

/// Pre-norm layer: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
pub fn transformer_layer<'g, F: Real>(
    p: &Bound<'g, F>,
    scope: &str,
    x: &TokenSequence<'g, F>,
    heads: usize,
) -> Result<TokenSequence<'g, F>> {
    let h = nn::norm(p, &format!("{scope}.norm1"), x.tokens)?;
    let a = nn::attention(p, &format!("{scope}.attn"), h, h, heads)?;
    let y = x.tokens.add(a.output)?;
    let h = nn::norm(p, &format!("{scope}.norm2"), y)?;
    let y = y.add(nn::mlp(p, &format!("{scope}.mlp"), h)?)?;
    TokenSequence::new(y, x.grid, x.source_layer + 1)
}

/// Run the backbone and return every layer's output `[F_1, …, F_depth]`.
pub fn encode<'g, F: Real>(p: &Bound<'g, F>, image: &Tensor<F>, cfg: &EncoderConfig) -> Result<Vec<TokenSequence<'g, F>>> {
    let mut x = patchify(p, image, cfg)?;
    let mut outputs = Vec::with_capacity(cfg.depth);
    for i in 1..=cfg.depth {
        x = transformer_layer(p, &layer_scope(i), &x, cfg.heads)?;
        outputs.push(x);
    }
    Ok(outputs)
}

/// Shared final layer norm applied to any backbone feature handed to a decoder.
pub fn final_norm<'g, F: Real>(p: &Bound<'g, F>, x: &TokenSequence<'g, F>) -> Result<TokenSequence<'g, F>> {
    let t = nn::norm(p, "encoder.final_norm", x.tokens)?;
    TokenSequence::new(t, x.grid, x.source_layer)
}
