//! Encoder-decoder forecaster with a monotone discount-response head.
//!
//! The encoder runs multi-head self-attention over the history window. Two
//! decoders (near and far future) turn each future week's known covariates
//! into a state by attending over the encoder output; attention scores come
//! from a small tanh network applied to every (future week, past week) pair.
//! Each decoder has its own head: slopes from the pooled encoder state, and
//! black-price demand plus a scale from the decoder state, all made
//! nonnegative with softplus. Everything before the final `expm1` lives in
//! `log(1 + demand)` space.

pub mod response;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{CovariateSchema, Sample};
use crate::scalar::Scalar;
use crate::tensor::{FreezeSet, ParamId, ParamStore, Tape, Tensor, Var};

pub use response::{demand_response, MAX_DISCOUNT, SEGMENTS, SEGMENT_WIDTH};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub heads: usize,
    pub d_k: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Hidden width of the position-wise feed-forward sublayers.
    pub ffn_dim: usize,
    /// Hidden width of the pairwise attention scorer.
    pub tau_hidden: usize,
    /// Hidden width of the head networks.
    pub head_hidden: usize,
    pub near_horizon: usize,
    pub far_horizon: usize,
    pub prediction_horizon: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            heads: 4,
            d_k: 4,
            encoder_layers: 2,
            decoder_layers: 1,
            ffn_dim: 32,
            tau_hidden: 8,
            head_hidden: 16,
            near_horizon: 5,
            far_horizon: 20,
            prediction_horizon: 26,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.heads * self.d_k
    }

    pub fn validate(&self, schema: &CovariateSchema) -> Result<()> {
        schema.check_heads(self.heads, self.d_k)?;
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("need at least one encoder and one decoder layer");
        }
        if self.ffn_dim == 0 || self.tau_hidden == 0 || self.head_hidden == 0 {
            return bad("hidden widths must be positive");
        }
        if !(0 < self.near_horizon && self.near_horizon <= self.far_horizon && self.far_horizon <= self.prediction_horizon) {
            return bad("horizons must satisfy 0 < near <= far <= prediction");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Which decoder and head pair to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pair {
    Near,
    Far,
}

impl Pair {
    pub fn prefix(self) -> &'static str {
        match self {
            Pair::Near => "near",
            Pair::Far => "far",
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Tau {
    q: ParamId,
    k: ParamId,
    b: ParamId,
    w: ParamId,
}

#[derive(Clone, Debug)]
struct Layer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm1: Norm,
    ff1: Linear,
    ff2: Linear,
    norm2: Norm,
    tau: Option<Tau>,
}

#[derive(Clone, Debug)]
struct PairIds {
    input: Linear,
    layers: Vec<Layer>,
    slope_hidden: Linear,
    slope_out: Linear,
    level_hidden: Linear,
    level_out: Linear,
}

#[derive(Clone, Debug)]
struct Ids {
    brand: ParamId,
    group: ParamId,
    encoder: Vec<Layer>,
    near: PairIds,
    far: PairIds,
}

fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, limit: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.random_range(-limit..=limit))).collect();
        self.store.add(name, Tensor::new(shape, data)?)
    }

    fn filled(&mut self, name: String, shape: Vec<usize>, value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::filled(shape, T::lit(value)))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Ok(Linear {
            w: self.uniform(format!("{name}.w"), vec![fan_in, fan_out], limit)?,
            b: self.filled(format!("{name}.b"), vec![fan_out], 0.0)?,
        })
    }

    /// Output layer with small weights and a given bias per output.
    fn output(&mut self, name: &str, fan_in: usize, bias: Vec<f64>) -> Result<Linear> {
        let limit = 0.1 * (6.0 / (fan_in + bias.len()) as f64).sqrt();
        let n = bias.len();
        Ok(Linear {
            w: self.uniform(format!("{name}.w"), vec![fan_in, n], limit)?,
            b: self.store.add(
                format!("{name}.b"),
                Tensor::new(vec![n], bias.into_iter().map(T::lit).collect())?,
            )?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            g: self.filled(format!("{name}.gain"), vec![d], 1.0)?,
            b: self.filled(format!("{name}.bias"), vec![d], 0.0)?,
        })
    }

    fn layer(&mut self, name: &str, cfg: &ModelConfig, pairwise: bool) -> Result<Layer> {
        let d = cfg.d_model();
        let tau = if pairwise {
            let m = cfg.tau_hidden;
            let limit = (6.0 / (cfg.d_k + m) as f64).sqrt();
            Some(Tau {
                q: self.uniform(format!("{name}.tau.query"), vec![cfg.d_k, m], limit)?,
                k: self.uniform(format!("{name}.tau.key"), vec![cfg.d_k, m], limit)?,
                b: self.filled(format!("{name}.tau.bias"), vec![m], 0.0)?,
                w: self.uniform(format!("{name}.tau.score"), vec![m], (3.0 / m as f64).sqrt())?,
            })
        } else {
            None
        };
        Ok(Layer {
            q: self.linear(&format!("{name}.query"), d, d)?,
            k: self.linear(&format!("{name}.key"), d, d)?,
            v: self.linear(&format!("{name}.value"), d, d)?,
            o: self.linear(&format!("{name}.out"), d, d)?,
            norm1: self.norm(&format!("{name}.norm1"), d)?,
            ff1: self.linear(&format!("{name}.ffn1"), d, cfg.ffn_dim)?,
            ff2: self.linear(&format!("{name}.ffn2"), cfg.ffn_dim, d)?,
            norm2: self.norm(&format!("{name}.norm2"), d)?,
            tau,
        })
    }

    fn pair(&mut self, pair: Pair, cfg: &ModelConfig, schema: &CovariateSchema) -> Result<PairIds> {
        let p = pair.prefix();
        let d = cfg.d_model();
        let c = schema.n_markets;
        let statics = 2 * schema.embedding_dim;
        let input = self.linear(&format!("{p}.decoder.input"), schema.decoder_width(), d)?;
        let layers = (0..cfg.decoder_layers)
            .map(|l| self.layer(&format!("{p}.decoder.{l}"), cfg, true))
            .collect::<Result<_>>()?;
        let slope_hidden = self.linear(&format!("{p}.head.slope_hidden"), d + statics, cfg.head_hidden)?;
        let slope_out = self.output(
            &format!("{p}.head.slope_out"),
            cfg.head_hidden,
            vec![inverse_softplus(0.2); c * SEGMENTS],
        )?;
        let level_hidden = self.linear(&format!("{p}.head.level_hidden"), d + statics, cfg.head_hidden)?;
        let mut bias = vec![inverse_softplus(1.0); c];
        bias.extend(vec![inverse_softplus(0.5); c]);
        let level_out = self.output(&format!("{p}.head.level_out"), cfg.head_hidden, bias)?;
        Ok(PairIds {
            input,
            layers,
            slope_hidden,
            slope_out,
            level_hidden,
            level_out,
        })
    }
}

/// Head outputs for a range of future weeks, in `log(1 + demand)` space.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastHeads<T> {
    /// `[week][market]`
    pub base: Vec<Vec<T>>,
    pub scale: Vec<Vec<T>>,
    /// `[week][market][segment]`; constant within the near and far ranges.
    pub slopes: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> ForecastHeads<T> {
    pub fn weeks(&self) -> usize {
        self.base.len()
    }

    /// Demand (in units) at discount `d` for one week and market.
    pub fn demand(&self, week: usize, market: usize, d: T) -> Result<T> {
        let xi = response::evaluate(
            d,
            self.base[week][market],
            self.scale[week][market],
            &self.slopes[week][market],
            T::lit(SEGMENT_WIDTH),
        )?;
        Ok(xi.exp_m1())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    schema: CovariateSchema,
    params: ParamStore<T>,
    ids: Ids,
}

struct Ctx<'a, T> {
    tape: &'a mut Tape<T>,
    frozen: &'a FreezeSet,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialised model; weights are drawn from `config.seed`.
    pub fn new(config: ModelConfig, schema: CovariateSchema) -> Result<Self> {
        config.validate(&schema)?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let e = schema.embedding_dim;
        let brand = b.uniform("embed.brand".into(), vec![schema.brand_vocab, e], 0.1)?;
        let group = b.uniform("embed.commodity_group".into(), vec![schema.group_vocab, e], 0.1)?;
        let encoder = (0..config.encoder_layers)
            .map(|l| b.layer(&format!("encoder.{l}"), &config, false))
            .collect::<Result<_>>()?;
        let near = b.pair(Pair::Near, &config, &schema)?;
        let far = b.pair(Pair::Far, &config, &schema)?;
        Ok(Model {
            config,
            schema,
            params,
            ids: Ids {
                brand,
                group,
                encoder,
                near,
                far,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Parameters whose names start with any of `prefixes`.
    pub fn ids_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(id, _, _)| id)
            .collect()
    }

    fn pair_ids(&self, pair: Pair) -> &PairIds {
        match pair {
            Pair::Near => &self.ids.near,
            Pair::Far => &self.ids.far,
        }
    }

    fn check_sample(&self, s: &Sample<T>) -> Result<()> {
        let (w, v) = (self.schema.window, self.schema.encoder_width());
        if s.encoder.shape() != [w, v] || s.mask.len() != w {
            return Err(Error::Schema(format!(
                "encoder input {:?} does not match the trained layout [{w}, {v}]",
                s.encoder.shape()
            )));
        }
        if s.decoder.cols() != self.schema.decoder_width() || s.n_markets() != self.schema.n_markets {
            return Err(Error::Schema(format!(
                "decoder input {:?} does not match the trained layout [_, {}]",
                s.decoder.shape(),
                self.schema.decoder_width()
            )));
        }
        Ok(())
    }

    fn p(&self, cx: &mut Ctx<'_, T>, id: ParamId) -> Var {
        let trainable = !cx.frozen.contains(id);
        cx.tape.param(&self.params, id, trainable)
    }

    fn linear(&self, cx: &mut Ctx<'_, T>, x: Var, l: Linear) -> Result<Var> {
        let w = self.p(cx, l.w);
        let b = self.p(cx, l.b);
        let y = cx.tape.matmul(x, w)?;
        cx.tape.add_row(y, b)
    }

    fn norm(&self, cx: &mut Ctx<'_, T>, x: Var, n: Norm) -> Result<Var> {
        let g = self.p(cx, n.g);
        let b = self.p(cx, n.b);
        cx.tape.layer_norm(x, g, b)
    }

    /// One attention layer. `x` supplies queries; `memory` supplies keys and
    /// values (the same as `x` for self-attention). `visible` marks the
    /// memory rows that may receive attention.
    fn layer(&self, cx: &mut Ctx<'_, T>, x: Var, memory: Var, visible: &[bool], l: &Layer) -> Result<Var> {
        let dk = self.config.d_k;
        let q = self.linear(cx, x, l.q)?;
        let k = self.linear(cx, memory, l.k)?;
        let v = self.linear(cx, memory, l.v)?;
        let inv = T::from_usize_lossy(dk).sqrt().recip();
        let tau = match l.tau {
            Some(t) => Some((self.p(cx, t.q), self.p(cx, t.k), self.p(cx, t.b), self.p(cx, t.w))),
            None => None,
        };
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = cx.tape.slice_cols(q, h * dk, dk)?;
            let kh = cx.tape.slice_cols(k, h * dk, dk)?;
            let vh = cx.tape.slice_cols(v, h * dk, dk)?;
            let scores = match tau {
                None => cx.tape.matmul_bt(qh, kh)?,
                Some((tq, tk, tb, tw)) => {
                    let a = cx.tape.matmul(qh, tq)?;
                    let b = cx.tape.matmul(kh, tk)?;
                    cx.tape.pairwise_tanh(a, b, tb, tw)?
                }
            };
            let scaled = cx.tape.scale(scores, inv);
            let weights = cx.tape.masked_softmax(scaled, visible)?;
            heads.push(cx.tape.matmul(weights, vh)?);
        }
        let cat = cx.tape.concat_cols(&heads)?;
        let o = self.linear(cx, cat, l.o)?;
        let o = cx.tape.dropout(o);
        let x = cx.tape.add(x, o)?;
        let x = self.norm(cx, x, l.norm1)?;
        let f = self.linear(cx, x, l.ff1)?;
        let f = cx.tape.gelu(f);
        let f = self.linear(cx, f, l.ff2)?;
        let f = cx.tape.dropout(f);
        let x = cx.tape.add(x, f)?;
        self.norm(cx, x, l.norm2)
    }

    fn encode(&self, cx: &mut Ctx<'_, T>, s: &Sample<T>) -> Result<(Var, Var, Vec<bool>)> {
        self.check_sample(s)?;
        let visible: Vec<bool> = s.mask.iter().map(|&m| !m).collect();
        if !visible.iter().any(|&v| v) {
            return Err(Error::AllMasked { article_id: s.article_id });
        }
        let mut x = cx.tape.constant(s.encoder.clone());
        for l in &self.ids.encoder {
            x = self.layer(cx, x, x, &visible, l)?;
        }
        let pooled = cx.tape.masked_mean_rows(x, &visible)?;
        Ok((x, pooled, visible))
    }

    fn statics(&self, cx: &mut Ctx<'_, T>, s: &Sample<T>) -> Result<Var> {
        let brand = self.p(cx, self.ids.brand);
        let group = self.p(cx, self.ids.group);
        let b = cx.tape.select_row(brand, s.brand)?;
        let g = cx.tape.select_row(group, s.group)?;
        cx.tape.concat_cols(&[b, g])
    }

    /// Decoder states and head outputs for future weeks `weeks` (0-based).
    #[allow(clippy::too_many_arguments)]
    fn decode_head(
        &self,
        cx: &mut Ctx<'_, T>,
        pair: Pair,
        s: &Sample<T>,
        gamma: Var,
        pooled: Var,
        visible: &[bool],
        statics: Var,
        weeks: std::ops::Range<usize>,
    ) -> Result<(Var, Var, Var)> {
        let ids = self.pair_ids(pair);
        let c = self.schema.n_markets;
        let vd = s.decoder.cols();
        if weeks.end > s.decoder.rows() {
            return Err(Error::Schema(format!(
                "decoder input has {} weeks, {} requested",
                s.decoder.rows(),
                weeks.end
            )));
        }
        let rows = Tensor::new(
            vec![weeks.len(), vd],
            s.decoder.data()[weeks.start * vd..weeks.end * vd].to_vec(),
        )?;
        let eta = cx.tape.constant(rows);
        let mut x = self.linear(cx, eta, ids.input)?;
        for l in &ids.layers {
            x = self.layer(cx, x, gamma, visible, l)?;
        }

        let slope_in = cx.tape.concat_cols(&[pooled, statics])?;
        let h = self.linear(cx, slope_in, ids.slope_hidden)?;
        let h = cx.tape.gelu(h);
        let raw = self.linear(cx, h, ids.slope_out)?;
        let raw = cx.tape.reshape(raw, vec![c, SEGMENTS])?;
        let slopes = cx.tape.softplus(raw);

        let ones = cx.tape.constant(Tensor::filled(vec![weeks.len(), 1], T::one()));
        let st = cx.tape.matmul(ones, statics)?;
        let level_in = cx.tape.concat_cols(&[x, st])?;
        let h = self.linear(cx, level_in, ids.level_hidden)?;
        let h = cx.tape.gelu(h);
        let raw = self.linear(cx, h, ids.level_out)?;
        let base = cx.tape.slice_cols(raw, 0, c)?;
        let base = cx.tape.softplus(base);
        let scale = cx.tape.slice_cols(raw, c, c)?;
        let scale = cx.tape.softplus(scale);
        Ok((base, scale, slopes))
    }

    /// Records the forward pass for future weeks `weeks` through one pair and
    /// returns the predicted `log(1 + demand)` as a `[weeks × markets]` node,
    /// using the sample's discounts.
    pub fn forward_log(
        &self,
        tape: &mut Tape<T>,
        s: &Sample<T>,
        pair: Pair,
        weeks: std::ops::Range<usize>,
        frozen: &FreezeSet,
    ) -> Result<Var> {
        let mut cx = Ctx { tape, frozen };
        let (gamma, pooled, visible) = self.encode(&mut cx, s)?;
        let statics = self.statics(&mut cx, s)?;
        let (base, scale, slopes) =
            self.decode_head(&mut cx, pair, s, gamma, pooled, &visible, statics, weeks.clone())?;
        let discounts: Vec<T> = s.discounts[weeks]
            .iter()
            .flat_map(|w| w.iter().map(|&d| T::lit(d)))
            .collect();
        cx.tape
            .monotone_response(base, scale, slopes, &discounts, T::lit(SEGMENT_WIDTH))
    }

    /// Head outputs for the first `weeks` future weeks: the near pair serves
    /// weeks up to the near horizon, the far pair the rest. One encoder pass.
    pub fn heads(&self, s: &Sample<T>, weeks: usize) -> Result<ForecastHeads<T>> {
        let mut tape = Tape::new();
        let frozen = FreezeSet::from_ids(self.params.ids());
        let mut cx = Ctx {
            tape: &mut tape,
            frozen: &frozen,
        };
        let (gamma, pooled, visible) = self.encode(&mut cx, s)?;
        let statics = self.statics(&mut cx, s)?;
        let near_end = weeks.min(self.config.near_horizon);
        let mut out = ForecastHeads {
            base: Vec::with_capacity(weeks),
            scale: Vec::with_capacity(weeks),
            slopes: Vec::with_capacity(weeks),
        };
        let c = self.schema.n_markets;
        for (pair, range) in [(Pair::Near, 0..near_end), (Pair::Far, near_end..weeks)] {
            if range.is_empty() {
                continue;
            }
            let (b, sc, sl) = self.decode_head(&mut cx, pair, s, gamma, pooled, &visible, statics, range.clone())?;
            let (b, sc, sl) = (cx.tape.value(b), cx.tape.value(sc), cx.tape.value(sl));
            let slopes: Vec<Vec<T>> = (0..c).map(|j| sl.row(j).to_vec()).collect();
            for k in 0..range.len() {
                out.base.push(b.row(k).to_vec());
                out.scale.push(sc.row(k).to_vec());
                out.slopes.push(slopes.clone());
            }
        }
        for v in out.base.iter().chain(&out.scale).flatten() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("forecast for article {}", s.article_id)));
            }
        }
        Ok(out)
    }

    /// Demand forecasts `[week][market]` at the sample's own discounts.
    pub fn predict(&self, s: &Sample<T>, weeks: usize) -> Result<Vec<Vec<T>>> {
        let heads = self.heads(s, weeks)?;
        (0..weeks)
            .map(|k| {
                (0..self.schema.n_markets)
                    .map(|j| heads.demand(k, j, T::lit(s.discounts[k][j])))
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
