//! Attention-to-mask decoding.
//!
//! One learnable token per class queries the backbone features. In each
//! cross-attention the scaled query-key similarity `S = QKᵀ/√d_k` is used
//! twice: a softmax over the tokens drives the usual value aggregation, and
//! the head-summed `S` passed through a sigmoid is the class's mask. Stages
//! are chained: each stage's output class tokens are the next stage's
//! queries, and the stages' mask logits are accumulated in order.

use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::nn::{self, Attention, INIT_STD};
use crate::numerics::{Bound, Init, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    /// Number of class tokens, one per dataset class.
    pub num_classes: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub stages: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::config("decoder needs at least one stage"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("decoder needs at least one class"));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "decoder width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Classification slots per token: the real classes plus "no object".
    pub fn logit_slots(&self) -> usize {
        self.num_classes + 1
    }
}

/// `N×C` class embeddings used as decoder queries.
#[derive(Clone, Copy, Debug)]
pub struct ClassTokens<'g, F: Real> {
    pub tokens: Var<'g, F>,
}

/// Per-head scaled similarities `[heads, N, L]` between class queries and
/// feature keys.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityMap<'g, F: Real> {
    pub values: Var<'g, F>,
    pub scale: F,
}

/// Per-class mask logits `[N, L]` over a patch grid.
#[derive(Clone, Copy, Debug)]
pub struct MaskStack<'g, F: Real> {
    pub logits: Var<'g, F>,
    pub grid: (usize, usize),
}

impl<'g, F: Real> MaskStack<'g, F> {
    /// Sigmoid probabilities reshaped to `[N, Hp, Wp]`.
    pub fn probs(&self) -> Result<Var<'g, F>> {
        let n = self.logits.shape()[0];
        self.logits.sigmoid()?.reshape(&[n, self.grid.0, self.grid.1])
    }
}

/// `[N, K+1]` classification logits; the last slot is "no object".
#[derive(Clone, Copy, Debug)]
pub struct ClassLogits<'g, F: Real> {
    pub logits: Var<'g, F>,
}

pub struct AtmOutput<'g, F: Real> {
    pub class_tokens: ClassTokens<'g, F>,
    pub similarity: SimilarityMap<'g, F>,
    /// Attention weights `softmax(S)` over the feature tokens.
    pub attention: Var<'g, F>,
    pub masks: MaskStack<'g, F>,
}

pub fn stage_scope(stage: usize) -> String {
    format!("decoder.stage{stage}")
}

pub fn init_decoder<F: Real>(store: &mut ParamStore<F>, init: &mut Init, cfg: &DecoderConfig) -> Result<()> {
    cfg.validate()?;
    let c = cfg.width;
    store.insert("decoder.class_tokens", init.normal(&[cfg.num_classes, c], INIT_STD))?;
    for s in 1..=cfg.stages {
        let scope = stage_scope(s);
        nn::init_linear(store, init, &format!("{scope}.in_proj"), c, c)?;
        nn::init_norm(store, &format!("{scope}.in_norm"), c)?;
        nn::init_decoder_layer(store, init, &format!("{scope}.atm"), c, cfg.mlp_ratio)?;
        nn::init_norm(store, &format!("{scope}.out_norm"), c)?;
        nn::init_linear(store, init, &format!("{scope}.class_head"), c, cfg.logit_slots())?;
    }
    Ok(())
}

/// One attention-to-mask decoder layer (`scope` holds its weights): class-token
/// self-attention, cross-attention to `features`, MLP. The cross-attention
/// similarity feeds both the token update and the masks.
pub fn atm_block<'g, F: Real>(
    p: &Bound<'g, F>,
    scope: &str,
    g: ClassTokens<'g, F>,
    features: &TokenSequence<'g, F>,
    heads: usize,
) -> Result<AtmOutput<'g, F>> {
    let (gs, fs) = (g.tokens.shape(), features.tokens.shape());
    if gs.len() != 2 || gs[1] != fs[1] {
        return Err(Error::config(format!(
            "class token width {gs:?} does not match feature width {fs:?}"
        )));
    }
    let (tokens, cross): (_, Attention<'g, F>) = nn::decoder_layer(p, scope, g.tokens, features.tokens, heads)?;
    let d = gs[1] / heads;
    let mask_logits = cross.similarity.sum_axis(0)?;
    Ok(AtmOutput {
        class_tokens: ClassTokens { tokens },
        similarity: SimilarityMap {
            values: cross.similarity,
            scale: F::one() / F::from_usize(d).unwrap().sqrt(),
        },
        attention: cross.weights,
        masks: MaskStack {
            logits: mask_logits,
            grid: features.grid,
        },
    })
}

pub struct StageOutput<'g, F: Real> {
    pub logits: ClassLogits<'g, F>,
    /// This stage's own mask logits.
    pub masks: MaskStack<'g, F>,
    /// Sum of mask logits over this and all earlier stages.
    pub cumulative: MaskStack<'g, F>,
    pub block: AtmOutput<'g, F>,
}

/// Run the stages in order: stage `k` consumes `features[k-1]` and the class
/// tokens produced by stage `k-1`.
pub fn cascade_decode<'g, F: Real>(
    p: &Bound<'g, F>,
    cfg: &DecoderConfig,
    features: &[TokenSequence<'g, F>],
) -> Result<Vec<StageOutput<'g, F>>> {
    cfg.validate()?;
    if features.len() != cfg.stages {
        return Err(Error::config(format!(
            "decoder has {} stages but received {} feature sets",
            cfg.stages,
            features.len()
        )));
    }
    let mut g = ClassTokens {
        tokens: p.get("decoder.class_tokens")?,
    };
    let mut outputs: Vec<StageOutput<'g, F>> = Vec::with_capacity(cfg.stages);
    for (k, f) in features.iter().enumerate() {
        let scope = stage_scope(k + 1);
        let proj = nn::linear(p, &format!("{scope}.in_proj"), f.tokens)?;
        let proj = nn::norm(p, &format!("{scope}.in_norm"), proj)?;
        let proj = TokenSequence::new(proj, f.grid, f.source_layer)?;
        let block = atm_block(p, &format!("{scope}.atm"), g, &proj, cfg.heads)?;
        let head_in = nn::norm(p, &format!("{scope}.out_norm"), block.class_tokens.tokens)?;
        let logits = ClassLogits {
            logits: nn::linear(p, &format!("{scope}.class_head"), head_in)?,
        };
        let cumulative = match outputs.last() {
            None => block.masks,
            Some(prev) => {
                if prev.cumulative.grid != block.masks.grid {
                    return Err(Error::config(format!(
                        "stage grids differ: {:?} vs {:?}",
                        prev.cumulative.grid, block.masks.grid
                    )));
                }
                MaskStack {
                    logits: prev.cumulative.logits.add(block.masks.logits)?,
                    grid: block.masks.grid,
                }
            }
        };
        g = block.class_tokens;
        outputs.push(StageOutput {
            logits,
            masks: block.masks,
            cumulative,
            block,
        });
    }
    Ok(outputs)
}

/// Bilinear resampling operator (half-pixel centres, edge clamped) as an
/// `[in_h·in_w, out_h·out_w]` matrix, so `x·M` resizes row-major maps in `x`.
pub fn bilinear_matrix<F: Real>(input: (usize, usize), output: (usize, usize)) -> Tensor<F> {
    let axis = |n_in: usize, n_out: usize| -> Vec<[(usize, f64); 2]> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                let t = src - i0 as f64;
                [(i0, 1.0 - t), (i1, t)]
            })
            .collect()
    };
    let ys = axis(input.0, output.0);
    let xs = axis(input.1, output.1);
    let cols = output.0 * output.1;
    let mut m = vec![F::zero(); input.0 * input.1 * cols];
    for (oy, wy) in ys.iter().enumerate() {
        for (ox, wx) in xs.iter().enumerate() {
            let col = oy * output.1 + ox;
            for &(iy, a) in wy {
                for &(ix, b) in wx {
                    let row = iy * input.1 + ix;
                    m[row * cols + col] = m[row * cols + col] + F::lit(a * b);
                }
            }
        }
    }
    Tensor::new(&[input.0 * input.1, cols], m).expect("shape matches")
}

/// Bilinearly resize `[N, Hp·Wp]` mask logits to `[N, H·W]`.
pub fn upsample_logits<'g, F: Real>(masks: &MaskStack<'g, F>, size: (usize, usize)) -> Result<Var<'g, F>> {
    if masks.grid == size {
        return Ok(masks.logits);
    }
    let m = masks.logits.graph().constant(bilinear_matrix(masks.grid, size));
    masks.logits.matmul(m)
}

/// Label each pixel with `argmax_c p_c(c) · mask_c(pixel)` where `p_c` is the
/// softmax of class token `c`'s logits; the "no object" slot never wins a
/// pixel. `logits` is `[N, K+1]`, `masks` holds probabilities `[N, H, W]`.
/// Ties go to the lowest class index.
pub fn semantic_inference<F: Real>(logits: &Tensor<F>, masks: &Tensor<F>) -> Result<LabelMap> {
    let (n, slots) = match logits.shape() {
        &[n, s] => (n, s),
        s => return Err(Error::Shape { op: "semantic_inference", shape: s.to_vec(), reason: "logits must be [N, K+1]".into() }),
    };
    if slots != n + 1 || n > usize::from(crate::labels::IGNORE_LABEL) {
        return Err(Error::Dimension { op: "semantic_inference", lhs: logits.shape().to_vec(), rhs: masks.shape().to_vec() });
    }
    let probs = logits.softmax(1)?;
    let own: Vec<F> = (0..n).map(|c| probs.at(&[c, c])).collect();
    assign_labels(&own, masks)
}

/// Per-pixel `argmax_c class_probs[c] · masks[c, pixel]` with ties going to
/// the lowest class index. `masks` is `[N, H, W]`.
pub fn assign_labels<F: Real>(class_probs: &[F], masks: &Tensor<F>) -> Result<LabelMap> {
    let (h, w) = match masks.shape() {
        &[m, h, w] if m == class_probs.len() => (h, w),
        s => return Err(Error::Dimension { op: "assign_labels", lhs: vec![class_probs.len()], rhs: s.to_vec() }),
    };
    let hw = h * w;
    let mut labels = vec![0u8; hw];
    for (px, label) in labels.iter_mut().enumerate() {
        let mut best = (0usize, F::neg_infinity());
        for (c, &pc) in class_probs.iter().enumerate() {
            let score = pc * masks.data()[c * hw + px];
            if score > best.1 {
                best = (c, score);
            }
        }
        *label = best.0 as u8;
    }
    LabelMap::new(h, w, labels)
}
