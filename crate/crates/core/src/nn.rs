//! Transformer building blocks shared by the encoder, the shrinking layers and
//! the decoder.
//!
//! Parameter naming: a linear map `scope.name` owns `scope.name_weight`
//! (`[in, out]`, applied as `x·W + b`) and `scope.name_bias`; a layer norm owns
//! `scope.name_gamma` and `scope.name_beta`.

use crate::error::{Error, Result};
use crate::numerics::{Bound, Init, ParamStore, Real, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

pub fn init_linear<F: Real>(
    store: &mut ParamStore<F>,
    init: &mut Init,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.insert(format!("{name}_weight"), init.trunc_normal(&[fan_in, fan_out], INIT_STD))?;
    store.insert(format!("{name}_bias"), Tensor::zeros(&[fan_out]))
}

pub fn init_norm<F: Real>(store: &mut ParamStore<F>, name: &str, width: usize) -> Result<()> {
    store.insert(format!("{name}_gamma"), Tensor::full(&[width], F::one()))?;
    store.insert(format!("{name}_beta"), Tensor::zeros(&[width]))
}

pub fn init_attention<F: Real>(store: &mut ParamStore<F>, init: &mut Init, scope: &str, width: usize) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, init, &format!("{scope}.{proj}"), width, width)?;
    }
    Ok(())
}

pub fn init_mlp<F: Real>(
    store: &mut ParamStore<F>,
    init: &mut Init,
    scope: &str,
    width: usize,
    ratio: usize,
) -> Result<()> {
    init_linear(store, init, &format!("{scope}.fc1"), width, width * ratio)?;
    init_linear(store, init, &format!("{scope}.fc2"), width * ratio, width)
}

pub fn linear<'g, F: Real>(p: &Bound<'g, F>, name: &str, x: Var<'g, F>) -> Result<Var<'g, F>> {
    let w = p.get(&format!("{name}_weight"))?;
    let b = p.get(&format!("{name}_bias"))?;
    x.matmul(w)?.add(b)
}

pub fn norm<'g, F: Real>(p: &Bound<'g, F>, name: &str, x: Var<'g, F>) -> Result<Var<'g, F>> {
    let g = p.get(&format!("{name}_gamma"))?;
    let b = p.get(&format!("{name}_beta"))?;
    x.layer_norm(g, b, F::lit(LAYER_NORM_EPS))
}

pub fn mlp<'g, F: Real>(p: &Bound<'g, F>, scope: &str, x: Var<'g, F>) -> Result<Var<'g, F>> {
    let h = linear(p, &format!("{scope}.fc1"), x)?.gelu()?;
    linear(p, &format!("{scope}.fc2"), h)
}

/// Intermediate values of one multi-head attention call.
pub struct Attention<'g, F: Real> {
    /// Projected output, `[Nq, C]`.
    pub output: Var<'g, F>,
    /// Scaled query-key similarities `QKᵀ/√d_k`, `[heads, Nq, Lk]`.
    pub similarity: Var<'g, F>,
    /// Softmax of `similarity` over keys.
    pub weights: Var<'g, F>,
}

fn split_heads<'g, F: Real>(x: Var<'g, F>, heads: usize) -> Result<Var<'g, F>> {
    let shape = x.shape();
    let (n, c) = (shape[0], shape[1]);
    x.reshape(&[n, heads, c / heads])?.permute(&[1, 0, 2])
}

/// Multi-head scaled dot-product attention from `queries` (`[Nq, C]`) to
/// `keys_values` (`[Lk, C]`) with projections under `scope.{q,k,v,o}`.
pub fn attention<'g, F: Real>(
    p: &Bound<'g, F>,
    scope: &str,
    queries: Var<'g, F>,
    keys_values: Var<'g, F>,
    heads: usize,
) -> Result<Attention<'g, F>> {
    let (qs, ks) = (queries.shape(), keys_values.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::Dimension {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let c = qs[1];
    if heads == 0 || c % heads != 0 {
        return Err(Error::config(format!("width {c} not divisible by {heads} heads")));
    }
    let d = c / heads;
    let q = split_heads(linear(p, &format!("{scope}.q"), queries)?, heads)?;
    let k = split_heads(linear(p, &format!("{scope}.k"), keys_values)?, heads)?;
    let v = split_heads(linear(p, &format!("{scope}.v"), keys_values)?, heads)?;
    let scale = F::one() / F::from_usize(d).unwrap().sqrt();
    let similarity = q.matmul(k.transpose()?)?.scale(scale)?;
    let weights = similarity.softmax(2)?;
    let mixed = weights
        .matmul(v)?
        .permute(&[1, 0, 2])?
        .reshape(&[qs[0], c])?;
    let output = linear(p, &format!("{scope}.o"), mixed)?;
    Ok(Attention {
        output,
        similarity,
        weights,
    })
}

pub fn init_decoder_layer<F: Real>(
    store: &mut ParamStore<F>,
    init: &mut Init,
    scope: &str,
    width: usize,
    mlp_ratio: usize,
) -> Result<()> {
    init_norm(store, &format!("{scope}.self_norm"), width)?;
    init_attention(store, init, &format!("{scope}.self_attn"), width)?;
    init_norm(store, &format!("{scope}.cross_norm"), width)?;
    init_attention(store, init, &format!("{scope}.cross_attn"), width)?;
    init_norm(store, &format!("{scope}.mlp_norm"), width)?;
    init_mlp(store, init, &format!("{scope}.mlp"), width, mlp_ratio)
}

/// Pre-norm transformer decoder layer: self-attention over `queries`,
/// cross-attention to `memory`, then an MLP, each with a residual.
/// Returns the updated queries and the cross-attention internals.
pub fn decoder_layer<'g, F: Real>(
    p: &Bound<'g, F>,
    scope: &str,
    queries: Var<'g, F>,
    memory: Var<'g, F>,
    heads: usize,
) -> Result<(Var<'g, F>, Attention<'g, F>)> {
    let h = norm(p, &format!("{scope}.self_norm"), queries)?;
    let x = queries.add(attention(p, &format!("{scope}.self_attn"), h, h, heads)?.output)?;
    let h = norm(p, &format!("{scope}.cross_norm"), x)?;
    let cross = attention(p, &format!("{scope}.cross_attn"), h, memory, heads)?;
    let x = x.add(cross.output)?;
    let h = norm(p, &format!("{scope}.mlp_norm"), x)?;
    let x = x.add(mlp(p, &format!("{scope}.mlp"), h)?)?;
    Ok((x, cross))
}

/// Zero every parameter whose name starts with `prefix`.
pub fn zero_params<F: Real>(store: &mut ParamStore<F>, prefix: &str) {
    for (name, t) in store.iter_mut() {
        if name.starts_with(prefix) {
            t.data_mut().iter_mut().for_each(|v| *v = F::zero());
        }
    }
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Plain nested-loop reference implementations for tests.

    use crate::numerics::{ParamStore, Tensor};

    pub fn linear(p: &ParamStore<f64>, name: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let w = p.get(&format!("{name}_weight")).unwrap();
        let b = p.get(&format!("{name}_bias")).unwrap();
        let (cin, cout) = (w.shape()[0], w.shape()[1]);
        x.iter()
            .map(|row| {
                (0..cout)
                    .map(|j| b.data()[j] + (0..cin).map(|i| row[i] * w.at(&[i, j])).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    pub fn norm(p: &ParamStore<f64>, name: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let g = p.get(&format!("{name}_gamma")).unwrap();
        let b = p.get(&format!("{name}_beta")).unwrap();
        x.iter()
            .map(|row| {
                let c = row.len() as f64;
                let mean = row.iter().sum::<f64>() / c;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-6).sqrt() * g.data()[j] + b.data()[j])
                    .collect()
            })
            .collect()
    }

    pub fn gelu(x: f64) -> f64 {
        let k = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
    }

    pub fn mlp(p: &ParamStore<f64>, scope: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h: Vec<Vec<f64>> = linear(p, &format!("{scope}.fc1"), x)
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        linear(p, &format!("{scope}.fc2"), &h)
    }

    pub fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
            .collect()
    }

    /// Returns (output, per-head scaled similarity `[h][nq][lk]`).
    #[allow(clippy::type_complexity)]
    pub fn attention(
        p: &ParamStore<f64>,
        scope: &str,
        q_in: &[Vec<f64>],
        kv_in: &[Vec<f64>],
        heads: usize,
    ) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
        let q = linear(p, &format!("{scope}.q"), q_in);
        let k = linear(p, &format!("{scope}.k"), kv_in);
        let v = linear(p, &format!("{scope}.v"), kv_in);
        let c = q[0].len();
        let d = c / heads;
        let mut mixed = vec![vec![0.0; c]; q.len()];
        let mut sims = vec![vec![vec![0.0; k.len()]; q.len()]; heads];
        for h in 0..heads {
            for i in 0..q.len() {
                let s: Vec<f64> = (0..k.len())
                    .map(|j| (0..d).map(|t| q[i][h * d + t] * k[j][h * d + t]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..k.len() {
                    for t in 0..d {
                        mixed[i][h * d + t] += e[j] / z * v[j][h * d + t];
                    }
                }
                sims[h][i] = s;
            }
        }
        (linear(p, &format!("{scope}.o"), &mixed), sims)
    }

    /// Returns (updated queries, cross-attention similarities).
    #[allow(clippy::type_complexity)]
    pub fn decoder_layer(
        p: &ParamStore<f64>,
        scope: &str,
        queries: &[Vec<f64>],
        memory: &[Vec<f64>],
        heads: usize,
    ) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
        let h = norm(p, &format!("{scope}.self_norm"), queries);
        let x = add(queries, &attention(p, &format!("{scope}.self_attn"), &h, &h, heads).0);
        let h = norm(p, &format!("{scope}.cross_norm"), &x);
        let (a, sims) = attention(p, &format!("{scope}.cross_attn"), &h, memory, heads);
        let x = add(&x, &a);
        let h = norm(p, &format!("{scope}.mlp_norm"), &x);
        (add(&x, &mlp(p, &format!("{scope}.mlp"), &h)), sims)
    }

    pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
        let c = *t.shape().last().unwrap();
        t.data().chunks(c).map(|r| r.to_vec()).collect()
    }

    pub fn max_diff(t: &Tensor<f64>, rows: &[Vec<f64>]) -> f64 {
        t.data()
            .iter()
            .zip(rows.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
