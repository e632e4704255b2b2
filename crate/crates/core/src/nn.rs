//! Transformer building blocks shared by the spectral encoder and the
//! language model. Weights live in a [`ParamStore`] under a name prefix and
//! are bound onto a tape for each forward pass.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const LN_EPS: f32 = 1e-5;

/// Low-rank path added to a projection: `scale · (x·Aᵀ)·Bᵀ`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LowRank {
    pub a: Var,
    pub b: Var,
    pub scale: f32,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: Var,
    pub b: Option<Var>,
    pub lora: Option<LowRank>,
}

impl Linear {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let w = store.bind(tape, &format!("{prefix}.weight"))?;
        let bias = format!("{prefix}.bias");
        let b = if store.contains(&bias) {
            Some(store.bind(tape, &bias)?)
        } else {
            None
        };
        Ok(Self { w, b, lora: None })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.linear(x, self.w, self.b)?;
        match self.lora {
            None => Ok(y),
            Some(l) => {
                let down = tape.matmul_nt(x, l.a)?;
                let up = tape.matmul_nt(down, l.b)?;
                let up = tape.scale(up, l.scale);
                tape.add(y, up)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    g: Var,
    b: Var,
}

impl Norm {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            g: store.bind(tape, &format!("{prefix}.gamma"))?,
            b: store.bind(tape, &format!("{prefix}.beta"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.g, self.b, LN_EPS)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Block {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Per-layer key/value rows already computed for earlier positions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCache {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

impl Block {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            ln1: Norm::bind(tape, store, &format!("{prefix}.ln1"))?,
            q: Linear::bind(tape, store, &format!("{prefix}.attn.q"))?,
            k: Linear::bind(tape, store, &format!("{prefix}.attn.k"))?,
            v: Linear::bind(tape, store, &format!("{prefix}.attn.v"))?,
            o: Linear::bind(tape, store, &format!("{prefix}.attn.o"))?,
            ln2: Norm::bind(tape, store, &format!("{prefix}.ln2"))?,
            fc1: Linear::bind(tape, store, &format!("{prefix}.mlp.fc1"))?,
            fc2: Linear::bind(tape, store, &format!("{prefix}.mlp.fc2"))?,
        })
    }

    /// `causal = None` gives bidirectional attention. With `Some(offset)`
    /// the rows of `x` sit at absolute positions `offset..`; a `cache`
    /// supplies keys/values for positions `0..offset` and is extended with
    /// this call's rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        heads: usize,
        causal: Option<usize>,
        cache: Option<&mut LayerCache>,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, x)?;
        let q = self.q.forward(tape, h)?;
        let mut k = self.k.forward(tape, h)?;
        let mut v = self.v.forward(tape, h)?;
        if let Some(cache) = cache {
            let d = tape.shape(k)[1];
            if !cache.keys.is_empty() {
                let rows = cache.keys.len() / d;
                let ck = tape.constant(vec![rows, d], cache.keys.clone())?;
                let cv = tape.constant(vec![rows, d], cache.values.clone())?;
                cache.keys.extend_from_slice(tape.value(k));
                cache.values.extend_from_slice(tape.value(v));
                k = tape.concat_rows(&[ck, k])?;
                v = tape.concat_rows(&[cv, v])?;
            } else {
                cache.keys.extend_from_slice(tape.value(k));
                cache.values.extend_from_slice(tape.value(v));
            }
        }
        let a = attention(tape, q, k, v, heads, causal)?;
        let a = self.o.forward(tape, a)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, x)?;
        let h = self.fc1.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, h)?;
        tape.add(x, h)
    }
}

/// Multi-head scaled dot-product attention over `[T×D]` inputs.
pub(crate) fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, causal: Option<usize>) -> Result<Var> {
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let s = tape.matmul_nt(qh, kh)?;
        let mut s = tape.scale(s, scale);
        if let Some(offset) = causal {
            s = tape.causal_mask(s, offset)?;
        }
        let p = tape.softmax(s, 1)?;
        outs.push(tape.matmul(p, vh)?);
    }
    tape.concat_cols(&outs)
}

/// Initial weights for one block. `bias` adds bias vectors to every
/// projection.
pub(crate) fn init_block(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    mlp_ratio: usize,
    bias: bool,
    rng: &mut Rng,
) {
    let hidden = dim * mlp_ratio;
    init_norm(store, &format!("{prefix}.ln1"), dim);
    init_norm(store, &format!("{prefix}.ln2"), dim);
    let std = 1.0 / (dim as f32).sqrt();
    for name in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.attn.{name}"), dim, dim, std, bias, rng);
    }
    init_linear(store, &format!("{prefix}.mlp.fc1"), dim, hidden, std, true, rng);
    init_linear(
        store,
        &format!("{prefix}.mlp.fc2"),
        hidden,
        dim,
        1.0 / (hidden as f32).sqrt(),
        true,
        rng,
    );
}

pub(crate) fn init_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::ones(&[dim]));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]));
}

pub(crate) fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    std: f32,
    bias: bool,
    rng: &mut Rng,
) {
    store.insert(format!("{prefix}.weight"), Tensor::randn(&[d_out, d_in], std, rng));
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d_out]));
    }
}

/// Expected `(name, shape)` pairs for one block, used to validate loads.
pub(crate) fn block_shapes(prefix: &str, dim: usize, mlp_ratio: usize, bias: bool) -> Vec<(String, Vec<usize>)> {
    let hidden = dim * mlp_ratio;
    let mut out = Vec::new();
    for ln in ["ln1", "ln2"] {
        out.push((format!("{prefix}.{ln}.gamma"), vec![dim]));
        out.push((format!("{prefix}.{ln}.beta"), vec![dim]));
    }
    for name in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.attn.{name}.weight"), vec![dim, dim]));
        if bias {
            out.push((format!("{prefix}.attn.{name}.bias"), vec![dim]));
        }
    }
    out.push((format!("{prefix}.mlp.fc1.weight"), vec![hidden, dim]));
    out.push((format!("{prefix}.mlp.fc1.bias"), vec![hidden]));
    out.push((format!("{prefix}.mlp.fc2.weight"), vec![dim, hidden]));
    out.push((format!("{prefix}.mlp.fc2.bias"), vec![dim]));
    out
}
