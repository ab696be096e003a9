use super::layers::{Attention, AttnMask, Ctx, EncoderBlock, Linear, Mlp, Norm};
use super::{patch_starts, FiatsConfig, FiatsError, Result};
use crate::dataio::WindowInput;
use crate::rng::{self, streams, StreamRng};
use crate::tensor::{Graph, ParamId, Parameters, Tensor, Var};

const INSTANCE_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct CasmBlock {
    cross_norm: Norm,
    cross: Attention,
    channel_layers: Vec<EncoderBlock>,
}

#[derive(Clone, Debug)]
struct CapsLayer {
    query_norm: Norm,
    kv_norm: Norm,
    cross: Attention,
    ffn_norm: Norm,
    ffn: Mlp,
}

/// Parameters and layer layout of one forecaster, fixed to a look-back
/// length and horizon. Channels are processed with shared weights, so any
/// channel count works.
#[derive(Clone, Debug)]
pub struct FiatsModel {
    config: FiatsConfig,
    lookback: usize,
    horizon: usize,
    history_starts: Vec<usize>,
    future_patches: usize,
    out_len: usize,
    params: Parameters,
    patch_proj: Linear,
    pos_history: ParamId,
    history_news: Option<Linear>,
    encoder: Vec<EncoderBlock>,
    encoder_norm: Norm,
    desc_proj: Linear,
    casm: Vec<CasmBlock>,
    pos_future: ParamId,
    caps: Vec<CapsLayer>,
    decoder_norm: Norm,
    head: Linear,
}

/// Row-stochastic attention weights of one window, averaged over heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    /// `[block][future patch][channel][slot]`.
    pub casm: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[layer][channel][future patch][history patches + future patches]`.
    pub caps: Vec<Vec<Vec<Vec<f64>>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `[H][C]`.
    pub prediction: Vec<Vec<f64>>,
    pub attention: AttentionMaps,
}

struct Trace {
    casm: Vec<Var>,
    caps: Vec<Var>,
}

impl FiatsModel {
    pub fn new(config: FiatsConfig, lookback: usize, horizon: usize) -> Result<Self> {
        config.validate()?;
        let history_starts = patch_starts(lookback, config.patch_len, config.patch_stride)?;
        let (future_patches, out_len) = config.output_patches(horizon)?;
        let mut r = rng::stream(config.seed, streams::MODEL_INIT);
        let mut p = Parameters::new();
        let (d, h, ffn, dim) = (config.d_model, config.n_heads, config.ffn_dim, config.embed_dim);
        let ph = history_starts.len();

        let patch_proj = Linear::new(&mut p, "encoder.patch", config.patch_len, d, true, &mut r);
        let pos_history = p.add_uniform("encoder.pos", &[ph, d], d, &mut r);
        let history_news = config
            .history_news
            .then(|| Linear::new(&mut p, "encoder.news", dim, d, false, &mut r));
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderBlock::new(&mut p, &format!("encoder.{i}"), d, h, ffn, &mut r))
            .collect();
        let encoder_norm = Norm::new(&mut p, "encoder.norm", d);

        let desc_proj = Linear::new(&mut p, "casm.desc", dim, d, true, &mut r);
        let casm = (0..config.casm_blocks)
            .map(|i| {
                let name = format!("casm.{i}");
                CasmBlock {
                    cross_norm: Norm::new(&mut p, &format!("{name}.norm"), d),
                    cross: Attention::new(&mut p, &format!("{name}.cross"), d, dim, h, &mut r),
                    channel_layers: (0..config.casm_self_attn_layers)
                        .map(|j| {
                            EncoderBlock::new(&mut p, &format!("{name}.channel.{j}"), d, h, ffn, &mut r)
                        })
                        .collect(),
                }
            })
            .collect();

        let pos_future = p.add_uniform("caps.pos", &[future_patches, d], d, &mut r);
        let caps = (0..config.caps_layers)
            .map(|i| {
                let name = format!("caps.{i}");
                CapsLayer {
                    query_norm: Norm::new(&mut p, &format!("{name}.qnorm"), d),
                    kv_norm: Norm::new(&mut p, &format!("{name}.kvnorm"), d),
                    cross: Attention::new(&mut p, &format!("{name}.cross"), d, d, h, &mut r),
                    ffn_norm: Norm::new(&mut p, &format!("{name}.ffnnorm"), d),
                    ffn: Mlp::new(&mut p, &format!("{name}.ffn"), d, ffn, &mut r),
                }
            })
            .collect();
        let decoder_norm = Norm::new(&mut p, "caps.norm", d);
        let head = Linear::new(&mut p, "head", d, out_len, true, &mut r);

        let model = Self {
            config,
            lookback,
            horizon,
            history_starts,
            future_patches,
            out_len,
            params: p,
            patch_proj,
            pos_history,
            history_news,
            encoder,
            encoder_norm,
            desc_proj,
            casm,
            pos_future,
            caps,
            decoder_norm,
            head,
        };
        log::debug!("model has {} parameters", model.params.count());
        Ok(model)
    }

    pub fn config(&self) -> &FiatsConfig {
        &self.config
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn history_patches(&self) -> usize {
        self.history_starts.len()
    }

    pub fn future_patches(&self) -> usize {
        self.future_patches
    }

    pub fn out_patch_len(&self) -> usize {
        self.out_len
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    fn check(&self, inputs: &[&WindowInput]) -> Result<usize> {
        let first = inputs
            .first()
            .ok_or_else(|| FiatsError::Shape("empty batch".into()))?;
        let c = first.channels();
        let (dim, m) = (self.config.embed_dim, self.config.max_slots);
        for w in inputs {
            let bad = |what: String| Err(FiatsError::Shape(what));
            if w.x_h.len() != self.lookback || w.x_h.iter().any(|r| r.len() != c) {
                return bad(format!("history must be [{}][{c}]", self.lookback));
            }
            if w.desc.len() != c || w.desc.iter().any(|r| r.len() != dim) {
                return bad(format!("descriptors must be [{c}][{dim}]"));
            }
            let nf = &w.news_future;
            if nf.patches != self.future_patches || nf.slots != m || nf.dim != dim {
                return bad(format!(
                    "future news must be [{}][{m}][{dim}], got [{}][{}][{}]",
                    self.future_patches, nf.patches, nf.slots, nf.dim
                ));
            }
            let nh = &w.news_history;
            if self.history_news.is_some()
                && (nh.patches != self.history_patches() || nh.slots != m || nh.dim != dim)
            {
                return bad("history news slab does not match the patch layout".into());
            }
        }
        Ok(c)
    }

    /// Per-window, per-channel mean and std of the look-back window.
    fn instance_stats(&self, inputs: &[&WindowInput], c: usize) -> Vec<(f64, f64)> {
        let l = self.lookback as f64;
        let mut out = Vec::with_capacity(inputs.len() * c);
        for w in inputs {
            for ch in 0..c {
                let mean = w.x_h.iter().map(|r| r[ch]).sum::<f64>() / l;
                let var = w.x_h.iter().map(|r| (r[ch] - mean).powi(2)).sum::<f64>() / l;
                out.push((mean, (var + INSTANCE_EPS).sqrt()));
            }
        }
        out
    }

    fn build(&self, cx: &mut Ctx, inputs: &[&WindowInput], trace: bool) -> Result<(Var, Option<Trace>)> {
        let c = self.check(inputs)?;
        let b = inputs.len();
        let cfg = &self.config;
        let (d, heads, dim, m) = (cfg.d_model, cfg.n_heads, cfg.embed_dim, cfg.max_slots);
        let (ph, pf, lp) = (self.history_patches(), self.future_patches, cfg.patch_len);
        let stats = cfg.instance_norm.then(|| self.instance_stats(inputs, c));

        // [B·C, P_h, patch_len]
        let mut tokens = Vec::with_capacity(b * c * ph * lp);
        for (bi, w) in inputs.iter().enumerate() {
            for ch in 0..c {
                let (mu, sd) = stats.as_ref().map_or((0.0, 1.0), |s| s[bi * c + ch]);
                for &s in &self.history_starts {
                    tokens.extend(w.x_h[s..s + lp].iter().map(|r| (r[ch] - mu) / sd));
                }
            }
        }
        let tokens = cx.g.constant(Tensor::new(vec![b * c, ph, lp], tokens)?);
        let mut z = self.patch_proj.apply(cx, tokens)?;
        z = cx.g.add_broadcast(z, cx.var(self.pos_history))?;
        if let Some(proj) = &self.history_news {
            let mut news = Vec::with_capacity(b * c * ph * dim);
            for w in inputs {
                let slab = &w.news_history;
                let mut per_patch = vec![0.0; ph * dim];
                for p in 0..ph {
                    let n = slab.count(p);
                    for s in (0..m).filter(|&s| slab.is_valid(p, s)) {
                        for (acc, v) in per_patch[p * dim..(p + 1) * dim].iter_mut().zip(slab.slot(p, s)) {
                            *acc += v / n as f64;
                        }
                    }
                }
                for _ in 0..c {
                    news.extend_from_slice(&per_patch);
                }
            }
            let news = cx.g.constant(Tensor::new(vec![b * c, ph, dim], news)?);
            let hn = proj.apply(cx, news)?;
            z = cx.g.add(z, hn)?;
        }
        for blk in &self.encoder {
            z = blk.apply(cx, z)?;
        }
        let z = self.encoder_norm.apply(cx, z)?;

        // channel-aware intervention tokens, one set per future patch
        let desc: Vec<f64> = inputs
            .iter()
            .flat_map(|w| w.desc.iter().flatten().copied())
            .collect();
        let desc = cx.g.constant(Tensor::new(vec![b, 1, c, dim], desc)?);
        let q0 = self.desc_proj.apply(cx, desc)?;
        let tiled = vec![q0; pf];
        let h = cx.g.concat(&tiled, 1)?;
        let mut h = cx.g.reshape(h, &[b * pf, c, d])?;

        let mut news = Vec::with_capacity(b * pf * m * dim);
        let mut mask = Vec::with_capacity(b * pf * heads * m);
        for w in inputs {
            news.extend_from_slice(&w.news_future.data);
            for p in 0..pf {
                for _ in 0..heads {
                    mask.extend((0..m).map(|s| !w.news_future.is_valid(p, s)));
                }
            }
        }
        let news = cx.g.constant(Tensor::new(vec![b * pf, m, dim], news)?);
        let news_mask = AttnMask {
            shape: vec![b * pf * heads, 1, m],
            data: mask,
        };
        let mut trace_casm = Vec::new();
        for blk in &self.casm {
            let q = blk.cross_norm.apply(cx, h)?;
            let (a, wts) = blk.cross.apply(cx, q, news, Some(&news_mask))?;
            h = cx.g.add(h, a)?;
            for layer in &blk.channel_layers {
                h = layer.apply(cx, h)?;
            }
            trace_casm.push(wts);
        }
        let u = cx.g.reshape(h, &[b, pf, c, d])?;
        let u = cx.g.permute(u, &[0, 2, 1, 3])?;
        let u = cx.g.reshape(u, &[b * c, pf, d])?;

        // causal decoding: future patch p sees all history and futures <= p
        let mut causal = Vec::with_capacity(pf * (ph + pf));
        for p in 0..pf {
            causal.extend((0..ph + pf).map(|k| k >= ph && k - ph > p));
        }
        let causal = AttnMask {
            shape: vec![1, pf, ph + pf],
            data: causal,
        };
        let mut y = cx.g.add_broadcast(u, cx.var(self.pos_future))?;
        let mut trace_caps = Vec::new();
        for layer in &self.caps {
            let kv = cx.g.concat(&[z, y], 1)?;
            let kv = layer.kv_norm.apply(cx, kv)?;
            let q = layer.query_norm.apply(cx, y)?;
            let (a, wts) = layer.cross.apply(cx, q, kv, Some(&causal))?;
            y = cx.g.add(y, a)?;
            let f = layer.ffn_norm.apply(cx, y)?;
            let f = layer.ffn.apply(cx, f)?;
            y = cx.g.add(y, f)?;
            trace_caps.push(wts);
        }
        let y = self.decoder_norm.apply(cx, y)?;
        let out = self.head.apply(cx, y)?;
        let out = cx.g.reshape(out, &[b, c, pf * self.out_len])?;
        let out = cx.g.slice(out, 2, 0, self.horizon)?;
        let mut pred = cx.g.permute(out, &[0, 2, 1])?;

        if let Some(stats) = stats {
            let hz = self.horizon;
            let mut sd = Vec::with_capacity(b * hz * c);
            let mut mu = Vec::with_capacity(b * hz * c);
            for bi in 0..b {
                for _ in 0..hz {
                    for ch in 0..c {
                        mu.push(stats[bi * c + ch].0);
                        sd.push(stats[bi * c + ch].1);
                    }
                }
            }
            let sd = cx.g.constant(Tensor::new(vec![b, hz, c], sd)?);
            let mu = cx.g.constant(Tensor::new(vec![b, hz, c], mu)?);
            pred = cx.g.mul(pred, sd)?;
            pred = cx.g.add(pred, mu)?;
        }
        let trace = trace.then_some(Trace {
            casm: trace_casm,
            caps: trace_caps,
        });
        Ok((pred, trace))
    }

    /// Builds the batch forward pass on `g` with trainable parameters.
    /// Returns the prediction `[B, H, C]`.
    pub(crate) fn forward_train(
        &self,
        g: &mut Graph,
        inputs: &[&WindowInput],
        dropout_rng: Option<&mut StreamRng>,
    ) -> Result<(Var, crate::tensor::BoundParams)> {
        let bp = self.params.bind(g);
        let mut cx = Ctx {
            g,
            bp: &bp,
            dropout: self.config.dropout,
            rng: dropout_rng,
        };
        let (pred, _) = self.build(&mut cx, inputs, false)?;
        Ok((pred, bp))
    }

    /// Mean squared error against `targets` (`[B][H][C]`) and its gradient
    /// with respect to every parameter, dropout off.
    pub fn loss_and_gradients(
        &self,
        inputs: &[&WindowInput],
        targets: &[Vec<Vec<f64>>],
    ) -> Result<(f64, Vec<Tensor>)> {
        let c = self.check(inputs)?;
        if targets.len() != inputs.len() || targets.iter().any(|t| t.len() != self.horizon || t.iter().any(|r| r.len() != c)) {
            return Err(FiatsError::Shape("targets must be [B][H][C] matching the inputs".into()));
        }
        let mut g = Graph::new();
        let (pred, bp) = self.forward_train(&mut g, inputs, None)?;
        let flat: Vec<f64> = targets.iter().flatten().flatten().copied().collect();
        let t = g.constant(Tensor::new(vec![inputs.len(), self.horizon, c], flat)?);
        let loss = g.mse_loss(pred, t)?;
        let value = g.value(loss).item()?;
        let mut grads = g.backward(loss)?;
        Ok((value, bp.gradients(&mut grads, &self.params)))
    }

    fn run(&self, inputs: &[&WindowInput], trace: bool) -> Result<(Graph, Var, Option<Trace>)> {
        let mut g = Graph::new();
        g.set_finite_checks(false);
        let bp = self.params.bind_frozen(&mut g);
        let mut cx = Ctx {
            g: &mut g,
            bp: &bp,
            dropout: 0.0,
            rng: None,
        };
        let (pred, t) = self.build(&mut cx, inputs, trace)?;
        if !g.value(pred).all_finite() {
            return Err(FiatsError::Tensor(crate::tensor::TensorError::NonFinite(
                "forecast".into(),
            )));
        }
        Ok((g, pred, t))
    }

    /// Forecasts `[B][H][C]` for a batch of windows with a shared channel count.
    pub fn forward_batch(&self, inputs: &[&WindowInput]) -> Result<Vec<Vec<Vec<f64>>>> {
        let (g, pred, _) = self.run(inputs, false)?;
        let c = inputs[0].channels();
        let data = g.value(pred).data();
        Ok((0..inputs.len())
            .map(|b| {
                (0..self.horizon)
                    .map(|t| data[(b * self.horizon + t) * c..(b * self.horizon + t + 1) * c].to_vec())
                    .collect()
            })
            .collect())
    }

    /// Forecast `[H][C]` for one window.
    pub fn forward(&self, input: &WindowInput) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_batch(&[input])?.remove(0))
    }

    /// Forecast plus head-averaged attention weights.
    pub fn forward_with_attention(&self, input: &WindowInput) -> Result<ForwardOutput> {
        let (g, pred, trace) = self.run(&[input], true)?;
        let trace = trace.expect("traced");
        let c = input.channels();
        let heads = self.config.n_heads;
        let (pf, ph, m) = (self.future_patches, self.history_patches(), self.config.max_slots);
        let avg = |t: &Tensor, n: usize, row: usize, k: usize, tq: usize, tk: usize| -> f64 {
            (0..heads)
                .map(|hd| t.data()[((n * heads + hd) * tq + row) * tk + k])
                .sum::<f64>()
                / heads as f64
        };
        let casm = trace
            .casm
            .iter()
            .map(|&v| {
                let t = g.value(v);
                (0..pf)
                    .map(|p| {
                        (0..c)
                            .map(|ch| (0..m).map(|s| avg(t, p, ch, s, c, m)).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let caps = trace
            .caps
            .iter()
            .map(|&v| {
                let t = g.value(v);
                (0..c)
                    .map(|ch| {
                        (0..pf)
                            .map(|p| (0..ph + pf).map(|k| avg(t, ch, p, k, pf, ph + pf)).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let data = g.value(pred).data();
        let prediction = (0..self.horizon)
            .map(|t| data[t * c..(t + 1) * c].to_vec())
            .collect();
        Ok(ForwardOutput {
            prediction,
            attention: AttentionMaps { casm, caps },
        })
    }
}
