//! Analytic compute cost, counted in multiply-accumulates (1 MAC = 1 FLOP).
//!
//! Every matrix product of the forward pass is counted: linear layers, patch
//! embedding, `QKᵀ`, attention·V. Norms, activations, softmax and the final
//! bilinear resize of the mask logits are not.

use std::fmt;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::shrunk::QU_LAYERS;

/// MACs of one transformer or decoder layer. Decoder layers fold their self-
/// and cross-attention into the same buckets.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerCost {
    pub label: String,
    pub qkv: u64,
    pub scores: u64,
    pub weighted_sum: u64,
    pub projection: u64,
    pub mlp: u64,
}

impl LayerCost {
    fn new(label: impl Into<String>) -> Self {
        LayerCost {
            label: label.into(),
            ..Default::default()
        }
    }

    pub fn total(&self) -> u64 {
        self.qkv + self.scores + self.weighted_sum + self.projection + self.mlp
    }

    /// `lq` query tokens attending over `lkv` key/value tokens.
    fn attention(mut self, lq: u64, lkv: u64, c: u64) -> Self {
        self.qkv += lq * c * c + 2 * lkv * c * c;
        self.scores += lq * lkv * c;
        self.weighted_sum += lq * lkv * c;
        self.projection += lq * c * c;
        self
    }

    fn mlp(mut self, tokens: u64, c: u64, ratio: u64) -> Self {
        self.mlp += 2 * tokens * c * (ratio * c);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostBreakdown {
    pub patch_embed: u64,
    /// Encoder layers in order, the QD layer included.
    pub backbone: Vec<LayerCost>,
    /// Index into `backbone` of the QD layer.
    pub qd_index: Option<usize>,
    pub qu: Vec<LayerCost>,
    /// Per-stage feature projections.
    pub decoder_proj: u64,
    pub decoder: Vec<LayerCost>,
    pub class_head: u64,
}

impl CostBreakdown {
    pub fn backbone_total(&self) -> u64 {
        self.patch_embed + self.backbone.iter().map(LayerCost::total).sum::<u64>()
    }

    pub fn decoder_total(&self) -> u64 {
        self.decoder_proj + self.decoder.iter().map(LayerCost::total).sum::<u64>() + self.class_head
    }

    pub fn qu_total(&self) -> u64 {
        self.qu.iter().map(LayerCost::total).sum()
    }

    pub fn total(&self) -> u64 {
        self.backbone_total() + self.qu_total() + self.decoder_total()
    }

    /// Named parts that partition [`CostBreakdown::total`].
    pub fn components(&self) -> Vec<(&'static str, u64)> {
        let plain = self
            .backbone
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != self.qd_index)
            .map(|(_, l)| l);
        let mut sums = [0u64; 5];
        for l in plain {
            for (s, v) in sums.iter_mut().zip([l.qkv, l.scores, l.weighted_sum, l.projection, l.mlp]) {
                *s += v;
            }
        }
        let qd = self.qd_index.map_or(0, |i| self.backbone[i].total());
        vec![
            ("patch_embed", self.patch_embed),
            ("attn_qkv", sums[0]),
            ("attn_scores", sums[1]),
            ("attn_weighted_sum", sums[2]),
            ("attn_projection", sums[3]),
            ("mlp", sums[4]),
            ("qd", qd),
            ("qu", self.qu_total()),
            ("atm_decoder", self.decoder_total() - self.class_head),
            ("class_head", self.class_head),
        ]
    }

    /// Aligned text table in GMACs.
    pub fn table(&self) -> String {
        let mut rows: Vec<(String, u64)> = self
            .components()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        rows.push(("backbone".into(), self.backbone_total()));
        rows.push(("total".into(), self.total()));
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = format!("{:<w$}  {:>12}  {:>16}\n", "component", "GMACs", "MACs");
        for (k, v) in rows {
            out += &format!("{k:<w$}  {:>12.3}  {v:>16}\n", giga(v));
        }
        out
    }

    /// `prefix.component=macs` lines.
    pub fn key_values(&self, prefix: &str) -> String {
        let mut out = String::new();
        for (k, v) in self.components() {
            out += &format!("{prefix}.{k}={v}\n");
        }
        out += &format!("{prefix}.backbone={}\n", self.backbone_total());
        out += &format!("{prefix}.total={}\n", self.total());
        out
    }
}

impl fmt::Display for CostBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table())
    }
}

pub fn giga(macs: u64) -> f64 {
    macs as f64 / 1e9
}

/// MACs of one pass over a `crop.0 × crop.1` image. A shrunk model whose QD
/// layer equals the depth has no reduced layers and no QU.
pub fn estimate(cfg: &ModelConfig, crop: (usize, usize)) -> Result<CostBreakdown> {
    let enc = EncoderConfig {
        image_height: crop.0,
        image_width: crop.1,
        ..cfg.encoder.clone()
    };
    let checked = ModelConfig {
        encoder: enc.clone(),
        shrunk: None,
        ..cfg.clone()
    };
    checked.validate()?;
    let (c, r) = (enc.width as u64, enc.mlp_ratio as u64);
    let full = enc.tokens() as u64;
    let k = cfg.num_classes as u64;

    let shrink = match &cfg.shrunk {
        Some(s) if s.qd_layer < enc.depth => {
            let f = s.factor;
            let (gh, gw) = enc.grid();
            if f < 2 || gh % f != 0 || gw % f != 0 {
                return Err(Error::config(format!("grid {gh}x{gw} not divisible by factor {f}")));
            }
            if s.qd_layer == 0 {
                return Err(Error::config("qd_layer must be at least 1"));
            }
            Some((s.qd_layer, full / (f * f) as u64, s.use_qu))
        }
        Some(s) if s.qd_layer == enc.depth => None,
        Some(s) => {
            return Err(Error::config(format!(
                "qd_layer {} exceeds depth {}",
                s.qd_layer, enc.depth
            )))
        }
        None => None,
    };

    let mut backbone = Vec::with_capacity(enc.depth);
    let mut qd_index = None;
    let mut tokens = full;
    for i in 1..=enc.depth {
        let label = format!("layer{i}");
        let layer = match shrink {
            Some((qd, reduced, _)) if i == qd + 1 => {
                qd_index = Some(i - 1);
                let l = LayerCost::new(label).attention(reduced, full, c).mlp(reduced, c, r);
                tokens = reduced;
                l
            }
            _ => LayerCost::new(label).attention(tokens, tokens, c).mlp(tokens, c, r),
        };
        backbone.push(layer);
    }

    let mut qu = Vec::new();
    let decoder_tokens: Vec<u64> = match (&cfg.shrunk, shrink) {
        (_, Some((_, reduced, true))) => {
            for (i, kv) in (1..=QU_LAYERS).zip([full, reduced]) {
                qu.push(decoder_layer(format!("qu{i}"), full, kv, c, r));
            }
            vec![full]
        }
        (_, Some((_, reduced, false))) => vec![reduced],
        (Some(_), None) => vec![full],
        (None, _) => vec![full; cfg.cascade_layers.len()],
    };

    let decoder: Vec<LayerCost> = decoder_tokens
        .iter()
        .enumerate()
        .map(|(s, &l)| decoder_layer(format!("stage{}", s + 1), k, l, c, r))
        .collect();
    let stages = decoder_tokens.len() as u64;
    Ok(CostBreakdown {
        patch_embed: full * (enc.patch_dim() as u64) * c,
        backbone,
        qd_index,
        qu,
        decoder_proj: decoder_tokens.iter().map(|l| l * c * c).sum(),
        decoder,
        class_head: stages * k * c * (k + 1),
    })
}

fn decoder_layer(label: String, queries: u64, memory: u64, c: u64, r: u64) -> LayerCost {
    LayerCost::new(label)
        .attention(queries, queries, c)
        .attention(queries, memory, c)
        .mlp(queries, c, r)
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub plain: CostBreakdown,
    pub shrunk: CostBreakdown,
    /// `shrunk / plain` total MACs.
    pub ratio: f64,
    /// Per component, shrunk minus plain.
    pub deltas: Vec<(&'static str, i128)>,
}

pub fn compare(plain: &ModelConfig, shrunk: &ModelConfig, crop: (usize, usize)) -> Result<Comparison> {
    let a = estimate(plain, crop)?;
    let b = estimate(shrunk, crop)?;
    let deltas = a
        .components()
        .into_iter()
        .zip(b.components())
        .map(|((name, x), (_, y))| (name, y as i128 - x as i128))
        .collect();
    Ok(Comparison {
        ratio: b.total() as f64 / a.total() as f64,
        plain: a,
        shrunk: b,
        deltas,
    })
}
