//! Attention and the pre-norm transformer encoder layer.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; a forward pass resolves
//! them through a [`Binding`] so the same layer can run in many graphs.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self> {
        let cfg = Self { d_model, n_heads };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Per-head key width.
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// `softmax(q kᵀ / √d_k) v`; returns (output, attention weights).
pub fn attention<S: Scalar>(g: &mut Graph<S>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.value(q).shape(), g.value(k).shape(), g.value(v).shape());
    let ok = qs.len() == 2
        && ks.len() == 2
        && vs.len() == 2
        && qs[1] == ks[1]
        && ks[0] == vs[0];
    if !ok {
        return Err(Error::shape(format!(
            "attention needs Q[n_q×d_k], K[n_k×d_k], V[n_k×d_v]; got {qs:?}, {ks:?}, {vs:?}"
        )));
    }
    let d_k = S::from_usize(qs[1]).unwrap();
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, d_k.sqrt().recip());
    let weights = g.softmax(scores, 1)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Tensor-level scaled dot-product attention.
pub fn scaled_dot_attention<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>) -> Result<Tensor<S>> {
    Ok(attention_with_weights(q, k, v)?.0)
}

pub fn attention_with_weights<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let (out, w) = attention(&mut g, q, k, v)?;
    Ok((g.value(out).clone(), g.value(w).clone()))
}

/// Affine map `x W + b` with `W` stored as `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Init<'_>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let weight = store.insert(format!("{name}.weight"), init.trunc_normal(vec![d_in, d_out])?)?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(vec![d_out])?)?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, b: &Binding, x: Var) -> Result<Var> {
        let y = g.matmul(x, b.var(self.weight))?;
        g.add_bias(y, b.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.weight"), Tensor::ones(vec![d])?)?,
            beta: store.insert(format!("{name}.bias"), Tensor::zeros(vec![d])?)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, b: &Binding, x: Var) -> Result<Var> {
        g.layer_norm(x, b.var(self.gamma), b.var(self.beta), S::lit(LN_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub config: AttentionConfig,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Init<'_>,
        name: &str,
        config: AttentionConfig,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Self {
            config,
            q_proj: Linear::new(store, init, &format!("{name}.q_proj"), d, d)?,
            k_proj: Linear::new(store, init, &format!("{name}.k_proj"), d, d)?,
            v_proj: Linear::new(store, init, &format!("{name}.v_proj"), d, d)?,
            out_proj: Linear::new(store, init, &format!("{name}.out_proj"), d, d)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, b: &Binding, x_q: Var, x_kv: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, b, x_q, x_kv)?.0)
    }

    /// Also returns each head's attention weights.
    pub fn forward_with_weights<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        b: &Binding,
        x_q: Var,
        x_kv: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let d = self.config.d_model;
        for x in [x_q, x_kv] {
            let s = g.value(x).shape();
            if s.len() != 2 || s[1] != d {
                return Err(Error::shape(format!(
                    "attention input {s:?} does not have width d_model = {d}"
                )));
            }
        }
        let q = self.q_proj.forward(g, b, x_q)?;
        let k = self.k_proj.forward(g, b, x_kv)?;
        let v = self.v_proj.forward(g, b, x_kv)?;

        let d_k = self.config.d_k();
        let mut heads: Option<Var> = None;
        let mut weights = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let (qh, kh, vh) = if self.config.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.narrow(q, 1, h * d_k, d_k)?,
                    g.narrow(k, 1, h * d_k, d_k)?,
                    g.narrow(v, 1, h * d_k, d_k)?,
                )
            };
            let (out, w) = attention(g, qh, kh, vh)?;
            weights.push(w);
            heads = Some(match heads {
                None => out,
                Some(acc) => g.concat(acc, out, 1)?,
            });
        }
        let merged = heads.expect("at least one head");
        Ok((self.out_proj.forward(g, b, merged)?, weights))
    }

    /// Sets all four projections to the identity with zero bias.
    pub fn set_identity<S: Scalar>(&self, store: &mut ParamStore<S>) -> Result<()> {
        let d = self.config.d_model;
        let mut eye = vec![S::zero(); d * d];
        for i in 0..d {
            eye[i * d + i] = S::one();
        }
        for lin in [&self.q_proj, &self.k_proj, &self.v_proj, &self.out_proj] {
            *store.tensor_mut(lin.weight) = Tensor::new(vec![d, d], eye.clone())?;
            *store.tensor_mut(lin.bias) = Tensor::zeros(vec![d])?;
        }
        Ok(())
    }
}

/// ViT encoder block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderLayer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Init<'_>,
        name: &str,
        config: AttentionConfig,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let d = config.d_model;
        let hidden = d * mlp_ratio;
        if hidden == 0 {
            return Err(Error::invalid("mlp_ratio must be positive"));
        }
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), config)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            fc1: Linear::new(store, init, &format!("{name}.mlp.fc1"), d, hidden)?,
            fc2: Linear::new(store, init, &format!("{name}.mlp.fc2"), hidden, d)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, b: &Binding, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, b, x)?;
        let h = self.attn.forward(g, b, h, h)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, b, x)?;
        let h = self.fc1.forward(g, b, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, b, h)?;
        g.add(x, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let a = &self.attn;
        vec![
            self.norm1.gamma,
            self.norm1.beta,
            a.q_proj.weight,
            a.q_proj.bias,
            a.k_proj.weight,
            a.k_proj.bias,
            a.v_proj.weight,
            a.v_proj.bias,
            a.out_proj.weight,
            a.out_proj.bias,
            self.norm2.gamma,
            self.norm2.beta,
            self.fc1.weight,
            self.fc1.bias,
            self.fc2.weight,
            self.fc2.bias,
        ]
    }
}
