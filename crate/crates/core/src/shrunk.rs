//! Query-based token down-sampling (QD) and up-sampling (QU).
//!
//! QD is an encoder layer whose attention queries are a nearest-subsampled
//! copy of the token grid while keys and values still see every token, so the
//! layer outputs a grid halved per axis. QU is a transformer decoder layer
//! whose queries fix the output resolution. The shrunk backbone applies QD
//! once; two QU layers then rebuild a full-resolution feature map from the
//! last pre-QD features and the final down-sampled ones.

use crate::encoder::{self, layer_scope, EncoderConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{self, INIT_STD};
use crate::numerics::{Bound, Init, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShrunkConfig {
    /// Number of full-resolution encoder layers before the QD layer.
    pub qd_layer: usize,
    /// Down-sampling factor per axis.
    pub factor: usize,
    /// `false` keeps only QD (the "naive" variant): the decoder then reads the
    /// down-sampled final features directly.
    pub use_qu: bool,
}

/// Number of QU layers in the full variant.
pub const QU_LAYERS: usize = 2;

impl ShrunkConfig {
    /// QD after one third of the backbone, factor 2, with QU.
    pub fn for_depth(depth: usize) -> Self {
        ShrunkConfig {
            qd_layer: (depth / 3).max(1),
            factor: 2,
            use_qu: true,
        }
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.qd_layer == 0 || self.qd_layer >= enc.depth {
            return Err(Error::config(format!(
                "qd_layer {} must lie in [1, {}]",
                self.qd_layer,
                enc.depth.saturating_sub(1)
            )));
        }
        if self.factor < 2 {
            return Err(Error::config("qd factor must be at least 2"));
        }
        let (h, w) = enc.grid();
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::config(format!(
                "patch grid {h}x{w} not divisible by qd factor {}",
                self.factor
            )));
        }
        Ok(())
    }

    /// Tokens per encoder layer output, layers 1..=depth.
    pub fn token_schedule(&self, enc: &EncoderConfig) -> Vec<usize> {
        let full = enc.tokens();
        let reduced = full / (self.factor * self.factor);
        (1..=enc.depth)
            .map(|i| if i <= self.qd_layer { full } else { reduced })
            .collect()
    }
}

/// Flat indices of the top-left token of every `factor×factor` cell.
pub fn nearest_indices(grid: (usize, usize), factor: usize) -> Result<Vec<usize>> {
    let (h, w) = grid;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::config(format!("grid {h}x{w} not divisible by {factor}")));
    }
    Ok((0..h / factor)
        .flat_map(|i| (0..w / factor).map(move |j| (i * factor) * w + j * factor))
        .collect())
}

/// Transformer layer with down-sampled queries: LN'd tokens at the nearest
/// positions query all LN'd tokens; the residual path carries the same
/// nearest picks. Output grid is `grid / factor`.
pub fn qd_layer<'g, F: Real>(
    p: &Bound<'g, F>,
    scope: &str,
    x: &TokenSequence<'g, F>,
    heads: usize,
    factor: usize,
) -> Result<TokenSequence<'g, F>> {
    let picks = nearest_indices(x.grid, factor)?;
    let h = nn::norm(p, &format!("{scope}.norm1"), x.tokens)?;
    let queries = h.index_rows(&picks)?;
    let a = nn::attention(p, &format!("{scope}.attn"), queries, h, heads)?;
    let y = x.tokens.index_rows(&picks)?.add(a.output)?;
    let h = nn::norm(p, &format!("{scope}.norm2"), y)?;
    let y = y.add(nn::mlp(p, &format!("{scope}.mlp"), h)?)?;
    TokenSequence::new(y, (x.grid.0 / factor, x.grid.1 / factor), x.source_layer + 1)
}

pub fn qu_scope(index: usize) -> String {
    format!("shrunk.qu{index}")
}

pub fn init_qu_layer<F: Real>(store: &mut ParamStore<F>, init: &mut Init, scope: &str, width: usize, mlp_ratio: usize) -> Result<()> {
    nn::init_norm(store, &format!("{scope}.kv_norm"), width)?;
    nn::init_decoder_layer(store, init, scope, width, mlp_ratio)
}

/// QU parameters: learnable queries on the pre-QD grid and two distinct
/// decoder layers. Nothing is added for the naive variant.
pub fn init_shrunk<F: Real>(store: &mut ParamStore<F>, init: &mut Init, cfg: &ShrunkConfig, enc: &EncoderConfig) -> Result<()> {
    cfg.validate(enc)?;
    if !cfg.use_qu {
        return Ok(());
    }
    store.insert("shrunk.qu1.queries", init.normal(&[enc.tokens(), enc.width], INIT_STD))?;
    for i in 1..=QU_LAYERS {
        init_qu_layer(store, init, &qu_scope(i), enc.width, enc.mlp_ratio)?;
    }
    Ok(())
}

/// Decoder layer whose output resolution is that of `queries`. `kv_pos` is
/// added to the normalised key/value tokens.
pub fn qu_layer<'g, F: Real>(
    p: &Bound<'g, F>,
    scope: &str,
    queries: Var<'g, F>,
    query_grid: (usize, usize),
    kv: &TokenSequence<'g, F>,
    heads: usize,
    kv_pos: Option<Var<'g, F>>,
) -> Result<TokenSequence<'g, F>> {
    let (qs, ks) = (queries.shape(), kv.tokens.shape());
    if qs.len() != 2 || qs[1] != ks[1] {
        return Err(Error::config(format!("query width {qs:?} does not match key/value width {ks:?}")));
    }
    let mut memory = nn::norm(p, &format!("{scope}.kv_norm"), kv.tokens)?;
    if let Some(pos) = kv_pos {
        memory = memory.add(pos)?;
    }
    let (out, _) = nn::decoder_layer(p, scope, queries, memory, heads)?;
    TokenSequence::new(out, query_grid, kv.source_layer)
}

/// Fixed 2-D sine/cosine position code, `[h·w, width]`. Cell `(i, j)` sits at
/// `(i·stride, j·stride)` so a down-sampled grid shares the codes of the
/// positions it was picked from.
pub fn sincos<F: Real>(grid: (usize, usize), stride: usize, width: usize) -> Tensor<F> {
    let quarter = width / 4;
    let mut out = vec![F::zero(); grid.0 * grid.1 * width];
    for i in 0..grid.0 {
        for j in 0..grid.1 {
            let row = &mut out[(i * grid.1 + j) * width..][..width];
            for k in 0..quarter {
                let w = 1.0 / 100f64.powf(k as f64 / quarter as f64);
                let (y, x) = ((i * stride) as f64 * w, (j * stride) as f64 * w);
                row[4 * k] = F::lit(y.sin());
                row[4 * k + 1] = F::lit(y.cos());
                row[4 * k + 2] = F::lit(x.sin());
                row[4 * k + 3] = F::lit(x.cos());
            }
        }
    }
    Tensor::new(&[grid.0 * grid.1, width], out).expect("sized")
}

/// Backbone features plus the sequence handed to the decoder.
pub struct ShrunkFeatures<'g, F: Real> {
    /// Outputs of layers `1..=depth`; grids shrink after the QD layer.
    pub layers: Vec<TokenSequence<'g, F>>,
    /// QU output on the pre-QD grid, or the final layer for the naive variant.
    pub decoder_input: TokenSequence<'g, F>,
}

/// Run the backbone with QD (and QU when enabled). With `cfg == None` this is
/// exactly [`encoder::encode`].
pub fn shrunk_forward<'g, F: Real>(
    p: &Bound<'g, F>,
    image: &Tensor<F>,
    enc: &EncoderConfig,
    cfg: Option<&ShrunkConfig>,
) -> Result<ShrunkFeatures<'g, F>> {
    let Some(cfg) = cfg else {
        let layers = encoder::encode(p, image, enc)?;
        let decoder_input = *layers.last().expect("depth > 0");
        return Ok(ShrunkFeatures { layers, decoder_input });
    };
    cfg.validate(enc)?;
    let mut x = encoder::patchify(p, image, enc)?;
    let mut layers = Vec::with_capacity(enc.depth);
    for i in 1..=enc.depth {
        x = if i == cfg.qd_layer + 1 {
            qd_layer(p, &layer_scope(i), &x, enc.heads, cfg.factor)?
        } else {
            encoder::transformer_layer(p, &layer_scope(i), &x, enc.heads)?
        };
        layers.push(x);
    }
    let last = *layers.last().expect("depth > 0");
    if !cfg.use_qu {
        return Ok(ShrunkFeatures { layers, decoder_input: last });
    }
    // Both QU layers see the same fixed position code on queries and keys.
    let low = layers[cfg.qd_layer - 1];
    let g = p.graph();
    let pe_full = g.constant(sincos(low.grid, 1, enc.width));
    let queries = p.get("shrunk.qu1.queries")?.add(pe_full)?;
    let q1 = qu_layer(p, &qu_scope(1), queries, low.grid, &low, enc.heads, Some(pe_full))?;
    let pe_low = g.constant(sincos(last.grid, cfg.factor, enc.width));
    let q2 = qu_layer(p, &qu_scope(2), q1.tokens.add(pe_full)?, low.grid, &last, enc.heads, Some(pe_low))?;
    Ok(ShrunkFeatures {
        layers,
        decoder_input: TokenSequence::new(q2.tokens, low.grid, last.source_layer)?,
    })
}
