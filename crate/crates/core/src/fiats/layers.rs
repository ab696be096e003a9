use rand::Rng;

use super::Result;
use crate::rng::StreamRng;
use crate::tensor::{BoundParams, Graph, ParamId, Parameters, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// A graph under construction plus the bound parameters and, in training,
/// the dropout generator.
pub(crate) struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub bp: &'a BoundParams,
    pub dropout: f64,
    pub rng: Option<&'a mut StreamRng>,
}

impl Ctx<'_> {
    pub fn var(&self, id: ParamId) -> Var {
        self.bp.var(id)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(r) if self.dropout > 0.0 => Ok(self.g.dropout(x, self.dropout, r)?),
            _ => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        p: &mut Parameters,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = p.add_uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng);
        let b = bias.then(|| p.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self { w, b }
    }

    pub fn apply(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = cx.g.matmul(x, cx.var(self.w))?;
        match self.b {
            Some(b) => Ok(cx.g.add_broadcast(y, cx.var(b))?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    pub fn new(p: &mut Parameters, name: &str, dim: usize) -> Self {
        Self {
            gain: p.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: p.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn apply(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(cx.g.layer_norm(x, cx.var(self.gain), cx.var(self.bias), LN_EPS)?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    up: Linear,
    down: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(p: &mut Parameters, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(p, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(p, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn apply(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.up.apply(cx, x)?;
        let h = cx.g.gelu(h)?;
        let h = self.down.apply(cx, h)?;
        cx.dropout(h)
    }
}

/// Attention mask broadcastable to `[N·heads, Tq, Tk]`; true excludes a key.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct AttnMask {
    pub shape: Vec<usize>,
    pub data: Vec<bool>,
}

/// Multi-head attention. Queries come from `[N, Tq, d_q]`, keys and values
/// from `[N, Tk, d_kv]`. The output projection has no bias, so a query
/// whose keys are all masked gets exactly zero.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    d_model: usize,
}

impl Attention {
    pub fn new<R: Rng>(
        p: &mut Parameters,
        name: &str,
        d_model: usize,
        d_kv: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(p, &format!("{name}.q"), d_model, d_model, true, rng),
            k: Linear::new(p, &format!("{name}.k"), d_kv, d_model, true, rng),
            v: Linear::new(p, &format!("{name}.v"), d_kv, d_model, true, rng),
            o: Linear::new(p, &format!("{name}.o"), d_model, d_model, false, rng),
            heads,
            d_model,
        }
    }

    fn split(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let s = cx.g.shape(x).to_vec();
        let (n, t) = (s[0], s[1]);
        let (h, dh) = (self.heads, self.d_model / self.heads);
        if h == 1 {
            return Ok(x);
        }
        let x = cx.g.reshape(x, &[n, t, h, dh])?;
        let x = cx.g.permute(x, &[0, 2, 1, 3])?;
        Ok(cx.g.reshape(x, &[n * h, t, dh])?)
    }

    fn merge(&self, cx: &mut Ctx, x: Var, n: usize) -> Result<Var> {
        let s = cx.g.shape(x).to_vec();
        let (h, t, dh) = (self.heads, s[1], s[2]);
        if h == 1 {
            return Ok(x);
        }
        let x = cx.g.reshape(x, &[n, h, t, dh])?;
        let x = cx.g.permute(x, &[0, 2, 1, 3])?;
        Ok(cx.g.reshape(x, &[n, t, h * dh])?)
    }

    /// Returns the projected output `[N, Tq, d]` and the attention weights
    /// `[N·heads, Tq, Tk]`.
    pub fn apply(
        &self,
        cx: &mut Ctx,
        queries: Var,
        keys: Var,
        mask: Option<&AttnMask>,
    ) -> Result<(Var, Var)> {
        let n = cx.g.shape(queries)[0];
        let q = self.q.apply(cx, queries)?;
        let k = self.k.apply(cx, keys)?;
        let v = self.v.apply(cx, keys)?;
        let (q, k, v) = (self.split(cx, q)?, self.split(cx, k)?, self.split(cx, v)?);
        let scores = cx.g.bmm(q, k, true)?;
        let dh = (self.d_model / self.heads) as f64;
        let scores = cx.g.scale(scores, 1.0 / dh.sqrt())?;
        let weights = match mask {
            Some(m) => cx.g.masked_softmax(scores, &m.shape, &m.data)?,
            None => cx.g.softmax(scores, 2)?,
        };
        let ctx = cx.g.bmm(weights, v, false)?;
        let ctx = self.merge(cx, ctx, n)?;
        let out = self.o.apply(cx, ctx)?;
        Ok((cx.dropout(out)?, weights))
    }
}

/// Pre-norm self-attention block with a feed-forward sublayer.
#[derive(Clone, Debug)]
pub(crate) struct EncoderBlock {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<R: Rng>(
        p: &mut Parameters,
        name: &str,
        d_model: usize,
        heads: usize,
        ffn: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: Norm::new(p, &format!("{name}.norm1"), d_model),
            attn: Attention::new(p, &format!("{name}.attn"), d_model, d_model, heads, rng),
            norm2: Norm::new(p, &format!("{name}.norm2"), d_model),
            mlp: Mlp::new(p, &format!("{name}.mlp"), d_model, ffn, rng),
        }
    }

    pub fn apply(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.norm1.apply(cx, x)?;
        let (a, _) = self.attn.apply(cx, h, h, None)?;
        let x = cx.g.add(x, a)?;
        let h = self.norm2.apply(cx, x)?;
        let m = self.mlp.apply(cx, h)?;
        Ok(cx.g.add(x, m)?)
    }
}
