//! Multi-head self-attention over time frames.
//!
//! One module maps Γ (D/2×K) to M (D/2×K):
//!
//! ```text
//! Γ̂   = LayerNorm₁(Γ)
//! A_h = softmax_rows( (W_{h,q} Γ̂)ᵀ (W_{h,k} Γ̂) / √d )          K×K
//! E_h = A_h (W_{h,v} Γ̂)ᵀ                                       K×d
//! E   = (concat_h[E_h] · W_p)ᵀ + Γ                             D/2×K
//! M   = lin₁( lrelu( lin₂( LayerNorm₂(E) ) ) )                 D/2×K
//! ```
//!
//! with d = D/(2H). No positional information enters, so the module is
//! equivariant to permutations of the frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::functional::{leaky_relu, linear};
use super::init::kaiming_uniform;
use super::layers::{Affine, Linear};
use crate::autodiff::{BoundParams, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MhsaSpec {
    /// Width of Γ (D/2 in the network).
    pub model_dim: usize,
    pub heads: usize,
}

impl MhsaSpec {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide the attention width {}",
                self.heads, self.model_dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        3 * self.model_dim
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Clone, Debug)]
pub struct MhsaModule {
    pub spec: MhsaSpec,
    pub norm_in: Affine,
    pub heads: Vec<HeadParams>,
    pub proj: ParamId,
    pub norm_ffn: Affine,
    /// D/2 → 3D/2, followed by the leaky-ReLU.
    pub ffn_in: Linear,
    /// 3D/2 → D/2.
    pub ffn_out: Linear,
}

/// Output of one module together with its per-head attention matrices.
pub struct MhsaOutput {
    pub output: Var,
    pub attention: Vec<Var>,
}

/// Row-stochastic K×K attention of one head on an already normalized input.
pub fn mhsa_attention(tape: &mut Tape, normed: Var, w_query: Var, w_key: Var) -> Result<Var> {
    let head_dim = tape.shape(w_query)[0];
    let q = tape.matmul(w_query, normed)?;
    let k = tape.matmul(w_key, normed)?;
    let qt = tape.transpose(q)?;
    let scores = tape.matmul(qt, k)?;
    let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
    Ok(tape.softmax(scores))
}

impl MhsaModule {
    pub fn new(store: &mut ParamStore, name: &str, spec: MhsaSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let (w, d) = (spec.model_dim, spec.head_dim());
        let norm_in = Affine::new(store, &format!("{name}.ln1"), w)?;
        let mut heads = Vec::with_capacity(spec.heads);
        for h in 0..spec.heads {
            let mut mk = |role: &str, rng: &mut _| store.insert(format!("{name}.head{h}.{role}"), kaiming_uniform(&[d, w], w, rng));
            let query = mk("w_q", rng)?;
            let key = mk("w_k", rng)?;
            let value = mk("w_v", rng)?;
            heads.push(HeadParams { query, key, value });
        }
        let proj = store.insert(format!("{name}.w_p"), kaiming_uniform(&[w, w], w, rng))?;
        let norm_ffn = Affine::new(store, &format!("{name}.ln2"), w)?;
        let ffn_in = Linear::new(store, &format!("{name}.lin2"), w, spec.ffn_dim(), true, rng)?;
        let ffn_out = Linear::new(store, &format!("{name}.lin1"), spec.ffn_dim(), w, true, rng)?;
        Ok(MhsaModule {
            spec,
            norm_in,
            heads,
            proj,
            norm_ffn,
            ffn_in,
            ffn_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, gamma: Var) -> Result<MhsaOutput> {
        let shape = tape.shape(gamma);
        if shape.len() != 2 || shape[0] != self.spec.model_dim {
            return Err(Error::shape("mhsa", &[shape, &[self.spec.model_dim]]));
        }
        let normed = self.norm_in.layer_norm(tape, p, gamma)?;
        let mut contexts = Vec::with_capacity(self.heads.len());
        let mut attention = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let a = mhsa_attention(tape, normed, p.var(head.query), p.var(head.key))?;
            let v = tape.matmul(p.var(head.value), normed)?;
            let vt = tape.transpose(v)?;
            contexts.push(tape.matmul(a, vt)?);
            attention.push(a);
        }
        let joined = tape.concat(&contexts, 1)?;
        let projected = tape.matmul(joined, p.var(self.proj))?;
        let projected = tape.transpose(projected)?;
        let e = tape.add(projected, gamma)?;

        let e = self.norm_ffn.layer_norm(tape, p, e)?;
        let hidden = linear(
            tape,
            e,
            p.var(self.ffn_in.weight),
            self.ffn_in.bias.map(|b| p.var(b)),
        )?;
        let hidden = leaky_relu(tape, hidden);
        let output = self.ffn_out.forward(tape, p, hidden)?;
        Ok(MhsaOutput { output, attention })
    }
}
