//! Learnt fine-sample proposers.
//!
//! A proposer reads the coarse network's per-sample features and depths for
//! a batch of rays and emits `n_fine` depths in `(0, 1)` per ray, plus
//! optional importance logits for every merged sample.
//!
//! Importance logits are laid out as `n_coarse` entries for the coarse
//! slots followed by `n_fine` entries for the fine samples in ascending
//! depth order. [`merged_importance`] permutes them into merged order.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Graph, LayerNorm, Linear, ParamId, ParamStore, Real, Tensor, Var};
use crate::render::{argsort, Merged, Provenance, SamplePositions};


#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Transformer,
    Pool,
    Mlpmix,
    Blind,
    PoolNoPosition,
    PoolConcat,
    PoolLearntPosition,
}

impl Architecture {
    pub const ALL: [Architecture; 7] = [
        Architecture::Transformer,
        Architecture::Pool,
        Architecture::Mlpmix,
        Architecture::Blind,
        Architecture::PoolNoPosition,
        Architecture::PoolConcat,
        Architecture::PoolLearntPosition,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Transformer => "transformer",
            Architecture::Pool => "pool",
            Architecture::Mlpmix => "mlpmix",
            Architecture::Blind => "blind",
            Architecture::PoolNoPosition => "pool_no_position",
            Architecture::PoolConcat => "pool_concat",
            Architecture::PoolLearntPosition => "pool_learnt_position",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown proposer architecture `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposerConfig {
    pub architecture: Architecture,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub with_importance: bool,
    /// Width of the coarse features (the field's trunk width).
    pub feature_dim: usize,
    pub mixer_token_hidden: usize,
    pub mixer_channel_hidden: usize,
    pub transformer_dim: usize,
    pub transformer_ff: usize,
    /// Width of the encoding concatenated by `pool_concat`.
    pub concat_encoding_dim: usize,
    /// Adds depth encodings to the transformer tokens.
    pub transformer_positions: bool,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mlpmix,
            n_coarse: 64,
            n_fine: 128,
            with_importance: true,
            feature_dim: 256,
            mixer_token_hidden: 64,
            mixer_channel_hidden: 256,
            transformer_dim: 16,
            transformer_ff: 64,
            concat_encoding_dim: 32,
            transformer_positions: true,
        }
    }
}

impl ProposerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_coarse,
            self.n_fine,
            self.feature_dim,
            self.mixer_token_hidden,
            self.mixer_channel_hidden,
            self.transformer_dim,
            self.transformer_ff,
            self.concat_encoding_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("proposer dimensions must be >= 1".into()));
        }
        for (name, d) in [
            ("feature_dim", self.feature_dim),
            ("transformer_dim", self.transformer_dim),
            ("concat_encoding_dim", self.concat_encoding_dim),
        ] {
            if d % 2 != 0 {
                return Err(Error::Config(format!("{name} must be even, got {d}")));
            }
        }
        Ok(())
    }

    pub fn n_total(&self) -> usize {
        self.n_coarse + self.n_fine
    }
}

/// Sinusoidal encoding of a normalized depth into `dim` values: sines then
/// cosines of `dim / 2` geometrically spaced frequencies from `π` to `128π`.
pub fn depth_encoding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freq = |k: usize| {
        let e = if half > 1 { 7.0 * k as f64 / (half - 1) as f64 } else { 0.0 };
        std::f64::consts::PI * e.exp2()
    };
    let mut out: Vec<f64> = (0..half).map(|k| (freq(k) * t).sin()).collect();
    out.extend((0..half).map(|k| (freq(k) * t).cos()));
    out
}

fn encode_positions<T: Real>(positions: &Tensor<T>, dim: usize) -> Result<Tensor<T>> {
    let data: Vec<f64> = positions
        .to_f64()
        .into_iter()
        .flat_map(|t| depth_encoding(t, dim))
        .collect();
    Tensor::from_f64(vec![positions.len(), dim], &data)
}

#[derive(Clone, Copy, Debug)]
struct Mixer {
    norm_tokens: LayerNorm,
    token_in: Linear,
    token_out: Linear,
    norm_channels: LayerNorm,
    channel_in: Linear,
    channel_out: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    norm: LayerNorm,
    hidden: Linear,
    out: Linear,
}

#[derive(Clone, Copy, Debug)]
struct TransformerParams {
    enc_norm: LayerNorm,
    enc_attn: Attention,
    enc_ff: FeedForward,
    queries: ParamId,
    dec_norm_q: LayerNorm,
    dec_norm_kv: LayerNorm,
    dec_attn: Attention,
    dec_ff: FeedForward,
    enc_importance: Option<Linear>,
    dec_importance: Option<Linear>,
}

#[derive(Clone, Copy, Debug)]
enum Body {
    Pool { learnt: Option<ParamId>, hidden: Linear },
    Mixer(Mixer),
    Transformer { input: Linear, params: TransformerParams },
    Blind { proposals: ParamId, importance: Option<ParamId> },
}

/// Output nodes of [`Proposer::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ProposalVars {
    /// `[B, n_fine]` raw head outputs, in slot order.
    pub t_fine: Var,
    /// `[B, n_coarse + n_fine]`, coarse slots then fine samples by rank.
    pub importance: Option<Var>,
}

/// Handles to one proposer's parameters inside a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Proposer {
    config: ProposerConfig,
    body: Body,
    head: Option<Linear>,
    importance: Option<Linear>,
    ids: Vec<ParamId>,
}

struct Registry<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    prefix: String,
    ids: Vec<ParamId>,
}

impl<T: Real, R: Rng> Registry<'_, T, R> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, relu: bool) -> Linear {
        let gain = if relu { 6.0 } else { 1.0 };
        let l = Linear::new(
            self.store,
            &format!("{}.{name}", self.prefix),
            fan_in,
            fan_out,
            (gain / fan_in as f64).sqrt(),
            self.rng,
        );
        self.ids.extend(l.ids());
        l
    }

    fn norm(&mut self, name: &str, width: usize) -> LayerNorm {
        let n = LayerNorm::new(self.store, &format!("{}.{name}", self.prefix), width);
        self.ids.extend(n.ids());
        n
    }

    fn tensor(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let id = self.store.add(format!("{}.{name}", self.prefix), value);
        self.ids.push(id);
        id
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d, false),
            k: self.linear(&format!("{name}.k"), d, d, false),
            v: self.linear(&format!("{name}.v"), d, d, false),
            o: self.linear(&format!("{name}.o"), d, d, false),
        }
    }

    fn feed_forward(&mut self, name: &str, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            norm: self.norm(&format!("{name}.norm"), d),
            hidden: self.linear(&format!("{name}.hidden"), d, hidden, true),
            out: self.linear(&format!("{name}.out"), hidden, d, false),
        }
    }
}

impl Proposer {
    /// Registers a freshly initialised proposer under `prefix`.
    pub fn new<T: Real>(
        config: ProposerConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut r = Registry {
            store,
            rng,
            prefix: prefix.to_string(),
            ids: Vec::new(),
        };
        let (d, nc, nf) = (config.feature_dim, config.n_coarse, config.n_fine);
        let arch = config.architecture;
        let body = match arch {
            Architecture::Blind => {
                let t: Vec<f64> = (0..nf)
                    .map(|i| {
                        let p = (i as f64 + 0.5) / nf as f64;
                        (p / (1.0 - p)).ln()
                    })
                    .collect();
                let proposals = r.tensor("free", Tensor::from_f64(vec![nf], &t)?);
                let importance = config
                    .with_importance
                    .then(|| r.tensor("free_importance", Tensor::zeros(vec![nc + nf])));
                Body::Blind { proposals, importance }
            }
            Architecture::Mlpmix => Body::Mixer(Mixer {
                norm_tokens: r.norm("mix.norm_tokens", d),
                token_in: r.linear("mix.token_in", nc, config.mixer_token_hidden, true),
                token_out: r.linear("mix.token_out", config.mixer_token_hidden, nc, false),
                norm_channels: r.norm("mix.norm_channels", d),
                channel_in: r.linear("mix.channel_in", d, config.mixer_channel_hidden, true),
                channel_out: r.linear("mix.channel_out", config.mixer_channel_hidden, d, false),
            }),
            Architecture::Transformer => {
                let e = config.transformer_dim;
                let input = r.linear("input", d, e, false);
                let enc_norm = r.norm("enc.norm", e);
                let enc_attn = r.attention("enc.attn", e);
                let enc_ff = r.feed_forward("enc.ff", e, config.transformer_ff);
                let q = crate::gradcore::uniform(&[nf * e], 1.0, r.rng);
                let queries = r.tensor("dec.queries", q);
                let params = TransformerParams {
                    enc_norm,
                    enc_attn,
                    enc_ff,
                    queries,
                    dec_norm_q: r.norm("dec.norm_q", e),
                    dec_norm_kv: r.norm("dec.norm_kv", e),
                    dec_attn: r.attention("dec.attn", e),
                    dec_ff: r.feed_forward("dec.ff", e, config.transformer_ff),
                    enc_importance: None,
                    dec_importance: None,
                };
                Body::Transformer { input, params }
            }
            _ => {
                let learnt = (arch == Architecture::PoolLearntPosition).then(|| {
                    let emb = crate::gradcore::uniform(&[nc * d], 1.0, r.rng);
                    r.tensor("position_embedding", emb)
                });
                let fan_in = if arch == Architecture::PoolConcat {
                    d + config.concat_encoding_dim
                } else {
                    d
                };
                Body::Pool {
                    learnt,
                    hidden: r.linear("hidden", fan_in, d, true),
                }
            }
        };
        let (head, importance, body) = match body {
            Body::Transformer { input, mut params } => {
                let e = config.transformer_dim;
                let head = r.linear("head", e, 1, false);
                if config.with_importance {
                    params.enc_importance = Some(r.linear("enc_importance", e, 1, false));
                    params.dec_importance = Some(r.linear("dec_importance", e, 1, false));
                }
                (Some(head), None, Body::Transformer { input, params })
            }
            Body::Blind { .. } => (None, None, body),
            _ => {
                let head = r.linear("head", d, nf, false);
                let imp = config
                    .with_importance
                    .then(|| r.linear("importance", d, nc + nf, false));
                (Some(head), imp, body)
            }
        };
        Ok(Self {
            config,
            body,
            head,
            importance,
            ids: r.ids,
        })
    }

    pub fn config(&self) -> &ProposerConfig {
        &self.config
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Proposals for a batch of rays.
    ///
    /// `features` is `[B, n_coarse, feature_dim]`; `positions` holds the
    /// matching sorted coarse depths as `[B, n_coarse]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        features: Var,
        positions: &Tensor<T>,
    ) -> Result<ProposalVars> {
        let c = &self.config;
        let shape = g.shape(features).to_vec();
        let b = shape.first().copied().unwrap_or(0);
        if shape != [b, c.n_coarse, c.feature_dim] || positions.shape() != [b, c.n_coarse] {
            return Err(Error::shape(
                "propose",
                format!(
                    "features {shape:?}, positions {:?}, expected [B, {}, {}]",
                    positions.shape(),
                    c.n_coarse,
                    c.feature_dim
                ),
            ));
        }
        for row in positions.to_f64().chunks(c.n_coarse) {
            SamplePositions::new(row.to_vec(), Provenance::Stratified)?;
        }
        match self.body {
            Body::Blind { proposals, importance } => {
                let p = g.param(proposals)?;
                let p = g.broadcast_rows(p, b)?;
                let t_fine = squash(g, p)?;
                let importance = match importance {
                    Some(id) => {
                        let l = g.param(id)?;
                        Some(g.broadcast_rows(l, b)?)
                    }
                    None => None,
                };
                Ok(ProposalVars { t_fine, importance })
            }
            Body::Transformer { input, params } => self.transformer(g, features, positions, input, &params),
            Body::Pool { learnt, hidden } => {
                let pooled = self.pool(g, features, positions, learnt, hidden)?;
                self.decode(g, pooled)
            }
            Body::Mixer(m) => {
                let pooled = self.mixer(g, features, positions, &m)?;
                self.decode(g, pooled)
            }
        }
    }

    fn summed_encoding<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, positions: &Tensor<T>) -> Result<Var> {
        let pe = encode_positions(positions, self.config.feature_dim)?;
        let shape = g.shape(x).to_vec();
        let pe = g.constant(pe.reshaped(shape)?)?;
        g.add(x, pe)
    }

    fn pool<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        features: Var,
        positions: &Tensor<T>,
        learnt: Option<ParamId>,
        hidden: Linear,
    ) -> Result<Var> {
        let c = &self.config;
        let b = g.shape(features)[0];
        let rows = b * c.n_coarse;
        let x = g.reshape(features, &[rows, c.feature_dim])?;
        let x = match c.architecture {
            Architecture::Pool => self.summed_encoding(g, x, positions)?,
            Architecture::PoolLearntPosition => {
                let emb = g.param(learnt.expect("learnt embedding registered"))?;
                let emb = g.broadcast_rows(emb, b)?;
                let emb = g.reshape(emb, &[rows, c.feature_dim])?;
                g.add(x, emb)?
            }
            Architecture::PoolConcat => {
                let pe = g.constant(encode_positions(positions, c.concat_encoding_dim)?)?;
                g.concat(&[x, pe], 1)?
            }
            _ => x,
        };
        let h = hidden.apply(g, x)?;
        let h = g.relu(h)?;
        let h = g.reshape(h, &[b, c.n_coarse, c.feature_dim])?;
        g.mean(h, Some(1))
    }

    fn mixer<T: Real>(&self, g: &mut Graph<'_, T>, features: Var, positions: &Tensor<T>, m: &Mixer) -> Result<Var> {
        let c = &self.config;
        let b = g.shape(features)[0];
        let x = self.summed_encoding(g, features, positions)?;
        let y = m.norm_tokens.apply(g, x)?;
        let y = g.transpose(y)?;
        let y = g.reshape(y, &[b * c.feature_dim, c.n_coarse])?;
        let y = m.token_in.apply(g, y)?;
        let y = g.relu(y)?;
        let y = m.token_out.apply(g, y)?;
        let y = g.reshape(y, &[b, c.feature_dim, c.n_coarse])?;
        let y = g.transpose(y)?;
        let x = g.add(x, y)?;
        let y = m.norm_channels.apply(g, x)?;
        let y = m.channel_in.apply(g, y)?;
        let y = g.relu(y)?;
        let y = m.channel_out.apply(g, y)?;
        let x = g.add(x, y)?;
        g.mean(x, Some(1))
    }

    fn decode<T: Real>(&self, g: &mut Graph<'_, T>, pooled: Var) -> Result<ProposalVars> {
        let head = self.head.expect("pooling proposers have a head");
        let logits = head.apply(g, pooled)?;
        let t_fine = squash(g, logits)?;
        let importance = match self.importance {
            Some(imp) => {
                let detached = g.stop_gradient(pooled)?;
                Some(imp.apply(g, detached)?)
            }
            None => None,
        };
        Ok(ProposalVars { t_fine, importance })
    }

    fn transformer<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        features: Var,
        positions: &Tensor<T>,
        input: Linear,
        p: &TransformerParams,
    ) -> Result<ProposalVars> {
        let c = &self.config;
        let (b, nc, nf, e) = (g.shape(features)[0], c.n_coarse, c.n_fine, c.transformer_dim);
        let x = g.reshape(features, &[b * nc, c.feature_dim])?;
        let mut x = input.apply(g, x)?;
        if c.transformer_positions {
            let pe = g.constant(encode_positions(positions, e)?)?;
            x = g.add(x, pe)?;
        }
        let x = g.reshape(x, &[b, nc, e])?;
        let a = p.enc_norm.apply(g, x)?;
        let a = attend(g, &p.enc_attn, a, a, e)?;
        let x = g.add(x, a)?;
        let encoded = feed_forward(g, &p.enc_ff, x)?;

        let q = g.param(p.queries)?;
        let q = g.broadcast_rows(q, b)?;
        let q = g.reshape(q, &[b, nf, e])?;
        let qn = p.dec_norm_q.apply(g, q)?;
        let kv = p.dec_norm_kv.apply(g, encoded)?;
        let a = attend(g, &p.dec_attn, qn, kv, e)?;
        let y = g.add(q, a)?;
        let decoded = feed_forward(g, &p.dec_ff, y)?;

        let head = self.head.expect("transformer has a head");
        let logits = head.apply(g, decoded)?;
        let logits = g.reshape(logits, &[b, nf])?;
        let t_fine = squash(g, logits)?;

        let importance = match (p.enc_importance, p.dec_importance) {
            (Some(ei), Some(di)) => {
                let enc = g.stop_gradient(encoded)?;
                let enc = ei.apply(g, enc)?;
                let enc = g.reshape(enc, &[b, nc])?;
                let dec = g.stop_gradient(decoded)?;
                let dec = di.apply(g, dec)?;
                let t = g.value(t_fine).to_f64();
                let index: Vec<usize> = t
                    .chunks(nf)
                    .enumerate()
                    .flat_map(|(r, row)| argsort(row).into_iter().map(move |j| r * nf + j))
                    .collect();
                let dec = g.gather(dec, index, &[b, nf])?;
                Some(g.concat(&[enc, dec], 1)?)
            }
            _ => None,
        };
        Ok(ProposalVars { t_fine, importance })
    }
}

/// Margin keeping proposals strictly inside `(0, 1)` even where the
/// sigmoid rounds to an endpoint.
pub const PROPOSAL_MARGIN: f64 = 1e-6;

/// `m + (1 - 2m) * sigmoid(x)` with `m` = [`PROPOSAL_MARGIN`].
fn squash<T: Real>(g: &mut Graph<'_, T>, logits: Var) -> Result<Var> {
    let s = g.sigmoid(logits)?;
    let s = g.scale(s, 1.0 - 2.0 * PROPOSAL_MARGIN)?;
    g.add_scalar(s, PROPOSAL_MARGIN)
}

/// Single-head scaled dot-product attention of `queries` over `memory`,
/// both `[B, n, e]`.
fn attend<T: Real>(g: &mut Graph<'_, T>, attn: &Attention, queries: Var, memory: Var, e: usize) -> Result<Var> {
    let q = attn.q.apply(g, queries)?;
    let k = attn.k.apply(g, memory)?;
    let v = attn.v.apply(g, memory)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (e as f64).sqrt())?;
    let weights = g.softmax(scores)?;
    let mixed = g.matmul(weights, v)?;
    attn.o.apply(g, mixed)
}

fn feed_forward<T: Real>(g: &mut Graph<'_, T>, ff: &FeedForward, x: Var) -> Result<Var> {
    let y = ff.norm.apply(g, x)?;
    let y = ff.hidden.apply(g, y)?;
    let y = g.relu(y)?;
    let y = ff.out.apply(g, y)?;
    g.add(x, y)
}

/// Permutes `[B, n_coarse + n_fine]` logits (coarse slots, then fine by
/// rank) into the merged order of each ray.
pub fn merged_importance<T: Real>(g: &mut Graph<'_, T>, logits: Var, merges: &[Merged]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let n = shape.get(1).copied().unwrap_or(0);
    if shape.len() != 2 || shape[0] != merges.len() || merges.iter().any(|m| m.sources.len() != n) {
        return Err(Error::shape(
            "merged_importance",
            format!("logits {shape:?} for {} rays", merges.len()),
        ));
    }
    let n_coarse = merges
        .first()
        .map(|m| m.sources.iter().filter(|s| matches!(s, crate::render::Source::Coarse(_))).count())
        .unwrap_or(0);
    let index = merges
        .iter()
        .enumerate()
        .flat_map(|(r, m)| m.concat_index(n_coarse).into_iter().map(move |i| r * n + i))
        .collect();
    g.gather(logits, index, &shape)
}

/// Samples kept by [`importance_filter`].
#[derive(Clone, Debug, PartialEq)]
pub struct Filtered {
    pub samples: SamplePositions,
    /// Indices into the unfiltered samples, ascending.
    pub kept: Vec<usize>,
    pub kept_fraction: f64,
}

/// Keeps samples whose predicted importance `sigmoid(logit)` is at least
/// `threshold`, falling back to the single highest-scoring sample.
///
/// The comparison is made in logit space so that a threshold of exactly 1
/// keeps nothing but the fallback.
pub fn importance_filter(merged: &SamplePositions, logits: &[f64], threshold: f64) -> Result<Filtered> {
    if logits.len() != merged.len() || merged.is_empty() {
        return Err(Error::shape(
            "importance_filter",
            format!("{} logits for {} samples", logits.len(), merged.len()),
        ));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    let cut = if threshold <= 0.0 {
        f64::NEG_INFINITY
    } else if threshold >= 1.0 {
        f64::INFINITY
    } else {
        (threshold / (1.0 - threshold)).ln()
    };
    let mut kept: Vec<usize> = (0..logits.len()).filter(|&i| logits[i] >= cut).collect();
    if kept.is_empty() {
        let best = (0..logits.len())
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
            .expect("non-empty");
        kept.push(best);
    }
    let t = kept.iter().map(|&i| merged.t()[i]).collect();
    Ok(Filtered {
        samples: SamplePositions::new(t, Provenance::Filtered)?,
        kept_fraction: kept.len() as f64 / logits.len() as f64,
        kept,
    })
}
