//! Loss, sample selection and the two-phase training schedule.
//!
//! Phase one trains the embeddings, the encoder and the near pair on the near
//! horizon with the far pair frozen. Phase two trains only the far pair on
//! the far horizon.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{build_masks, build_sample, CovariateSchema, Sample};
use crate::imputation::ImputedPanel;
use crate::model::{Model, Pair};
use crate::scalar::Scalar;
use crate::tensor::{Adam, AdamConfig, FreezeSet, Gradients, ParamStore, Tape};

/// Cubic Taylor expansion of `exp` around zero: `1 + x + x²/2 + x³/6`.
///
/// Evaluated as `(6 + 6x + 3x² + x³) / 6` so small integer arguments are
/// correctly rounded.
#[inline]
pub fn taylor_link<T: crate::Scalar>(x: T) -> T {
    let six = T::lit(6.0);
    (six + x * (six + x * (T::lit(3.0) + x))) / six
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub near_epochs: usize,
    pub far_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-market loss weights; the demand share of each market when unset.
    pub market_weights: Option<Vec<f64>>,
    /// Loss weight of weeks whose demand was imputed.
    pub imputed_weight: f64,
    pub clip_norm: Option<f64>,
    /// Forecast origins drawn per article and epoch.
    pub origins_per_article: usize,
    /// Fixed number of samples per epoch; articles are cycled to reach it.
    pub samples_per_epoch: Option<usize>,
    /// Only use origins within this many weeks of the training cutoff.
    pub origin_window: Option<usize>,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            near_epochs: 7,
            far_epochs: 1,
            batch_size: 32,
            learning_rate: 3e-3,
            market_weights: None,
            imputed_weight: 1.0,
            clip_norm: Some(10.0),
            origins_per_article: 2,
            samples_per_epoch: None,
            origin_window: None,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_markets: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.near_epochs == 0 || self.far_epochs == 0 {
            return bad("near_epochs and far_epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.origins_per_article == 0 || self.workers == 0 {
            return bad("batch_size, origins_per_article and workers must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.imputed_weight >= 0.0) {
            return bad("learning_rate must be positive and imputed_weight nonnegative".into());
        }
        if let Some(w) = &self.market_weights {
            if w.len() != n_markets {
                return bad(format!("{} market weights for {n_markets} markets", w.len()));
            }
            if w.iter().any(|&x| !(x > 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("market weights must be positive and sum to 1".into());
            }
        }
        Ok(())
    }
}

/// Demand share of each market over all defined weeks.
pub fn market_shares(panels: &[ImputedPanel], n_markets: usize) -> Vec<f64> {
    let mut totals = vec![0.0; n_markets];
    for p in panels {
        for w in &p.demand {
            for (t, d) in totals.iter_mut().zip(w) {
                *t += d.demand_estimate.unwrap_or(0.0);
            }
        }
    }
    let sum: f64 = totals.iter().sum();
    if sum > 0.0 {
        totals.iter().map(|t| t / sum).collect()
    } else {
        vec![1.0 / n_markets as f64; n_markets]
    }
}

/// How targets are weighted in the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub market: Vec<f64>,
    pub imputed: f64,
}

impl LossWeights {
    pub fn uniform(n_markets: usize) -> Self {
        LossWeights {
            market: vec![1.0 / n_markets as f64; n_markets],
            imputed: 1.0,
        }
    }

    /// Targets and weights for the first `weeks` future weeks, flattened
    /// week-major; undefined targets get weight zero.
    pub fn targets<T: Scalar>(&self, s: &Sample<T>, weeks: usize) -> (Vec<T>, Vec<T>) {
        let mut target = Vec::with_capacity(weeks * self.market.len());
        let mut weight = Vec::with_capacity(weeks * self.market.len());
        for k in 0..weeks {
            for (j, &g) in self.market.iter().enumerate() {
                match s.targets[k][j] {
                    Some(t) => {
                        target.push(t);
                        let f = if s.imputed[k][j] { self.imputed } else { 1.0 };
                        weight.push(T::lit(g * f));
                    }
                    None => {
                        target.push(T::zero());
                        weight.push(T::zero());
                    }
                }
            }
        }
        (target, weight)
    }
}

/// Weeks scored by a pair during training.
pub fn loss_weeks(model: &Model<impl Scalar>, pair: Pair) -> usize {
    match pair {
        Pair::Near => model.config().near_horizon,
        Pair::Far => model.config().far_horizon,
    }
}

/// Loss of one sample on a fresh tape and its parameter gradients.
pub fn sample_gradients<T: Scalar>(
    model: &Model<T>,
    s: &Sample<T>,
    pair: Pair,
    weights: &LossWeights,
    frozen: &FreezeSet,
    dropout_seed: Option<u64>,
) -> Result<(T, Gradients<T>)> {
    let weeks = loss_weeks(model, pair).min(s.horizon());
    let mut tape = match dropout_seed {
        Some(seed) if model.config().dropout > 0.0 => Tape::new().with_dropout(model.config().dropout, seed),
        _ => Tape::new(),
    };
    let pred = model.forward_log(&mut tape, s, pair, 0..weeks, frozen)?;
    let (target, weight) = weights.targets(s, weeks);
    let loss = tape.taylor_loss(pred, &target, &weight)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss of article {}", s.article_id)));
    }
    let back = tape.backward(loss)?;
    Ok((value, tape.param_grads(&back, model.params().len())))
}

/// Mean loss over samples without recording gradients.
pub fn batch_loss<T: Scalar>(model: &Model<T>, samples: &[Sample<T>], pair: Pair, weights: &LossWeights) -> Result<T> {
    let frozen = FreezeSet::from_ids(model.params().ids());
    let mut total = T::zero();
    for s in samples {
        let weeks = loss_weeks(model, pair).min(s.horizon());
        let mut tape = Tape::new();
        let pred = model.forward_log(&mut tape, s, pair, 0..weeks, &frozen)?;
        let (target, weight) = weights.targets(s, weeks);
        let loss = tape.taylor_loss(pred, &target, &weight)?;
        total += tape.value(loss).data()[0];
    }
    Ok(total / T::from_usize_lossy(samples.len().max(1)))
}

/// Mean loss and summed-then-averaged gradients of a batch. Per-sample work
/// is split across `workers` threads; gradients are reduced in sample order
/// so the result does not depend on the worker count.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample<T>],
    pair: Pair,
    weights: &LossWeights,
    frozen: &FreezeSet,
    dropout_seeds: Option<&[u64]>,
    workers: usize,
) -> Result<(T, Gradients<T>)> {
    let n = samples.len();
    let seed_of = |i: usize| dropout_seeds.map(|s| s[i]);
    let results: Vec<Result<(T, Gradients<T>)>> = if workers <= 1 || n <= 1 {
        (0..n)
            .map(|i| sample_gradients(model, &samples[i], pair, weights, frozen, seed_of(i)))
            .collect()
    } else {
        let chunk = n.div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..n)
                .step_by(chunk)
                .map(|start| {
                    let end = (start + chunk).min(n);
                    scope.spawn(move || {
                        (start..end)
                            .map(|i| sample_gradients(model, &samples[i], pair, weights, frozen, seed_of(i)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };
    let mut total = T::zero();
    let mut grads = Gradients::empty(model.params().len());
    for r in results {
        let (l, g) = r?;
        total += l;
        grads.merge(&g);
    }
    let inv = T::from_usize_lossy(n.max(1)).recip();
    grads.scale(inv);
    Ok((total * inv, grads))
}

/// Origins of `ip` usable for training: at least one visible history week
/// and at least one defined target within `horizon`.
pub fn candidate_origins(ip: &ImputedPanel, schema: &CovariateSchema, horizon: usize) -> Vec<usize> {
    let p = &ip.panel;
    let end = p.end_week();
    (p.first_week..end.saturating_sub(1))
        .filter(|&t| {
            let has_target = (t + 1..(t + 1 + horizon).min(end)).any(|w| {
                p.week(w).is_some_and(|pw| pw.total_stock() > 0)
                    && (0..p.n_markets()).any(|j| ip.demand_at(w, j).is_some_and(|d| d.demand_estimate.is_some()))
            });
            has_target && build_masks(p, t, schema.window).iter().any(|&m| !m)
        })
        .collect()
}

/// Restricts every panel to weeks before `cutoff` (exclusive); articles
/// launched at or after the cutoff are dropped.
pub fn truncate_panels(panels: &[ImputedPanel], cutoff: usize) -> Vec<ImputedPanel> {
    panels
        .iter()
        .filter(|p| p.panel.first_week < cutoff)
        .map(|p| {
            let keep = (cutoff - p.panel.first_week).min(p.panel.weeks.len());
            let mut q = p.clone();
            q.panel.weeks.truncate(keep);
            q.demand.truncate(keep);
            q
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub phase: Pair,
    /// 0 is the evaluation before the phase's first update; later epochs
    /// report the mean training loss of that epoch.
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<LossRecord>,
    pub samples_seen: usize,
    pub market_weights: Vec<f64>,
}

impl TrainReport {
    /// Plot data: `epoch,phase,loss` lines with header.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("epoch,phase,loss\n");
        for r in &self.trace {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.phase.prefix(), r.loss));
        }
        s
    }

    /// Whether the last phase-one epoch loss is below the initial one.
    pub fn near_loss_decreased(&self) -> bool {
        let near: Vec<f64> = self.trace.iter().filter(|r| r.phase == Pair::Near).map(|r| r.loss).collect();
        near.len() >= 2 && near[near.len() - 1] < near[0]
    }
}

/// Parameters trained in each phase; everything else is frozen.
pub fn phase_freeze<T: Scalar>(model: &Model<T>, phase: Pair) -> FreezeSet {
    let frozen = match phase {
        Pair::Near => model.ids_with_prefix(&["far."]),
        Pair::Far => model.ids_with_prefix(&["embed.", "encoder.", "near."]),
    };
    FreezeSet::from_ids(frozen)
}

fn snapshot<T: Scalar>(store: &ParamStore<T>) -> Vec<Vec<T>> {
    store.iter().map(|(_, _, t)| t.data().to_vec()).collect()
}

fn restore<T: Scalar>(store: &mut ParamStore<T>, snap: &[Vec<T>]) {
    let ids: Vec<_> = store.ids().collect();
    for (id, data) in ids.into_iter().zip(snap) {
        store.get_mut(id).data_mut().copy_from_slice(data);
    }
}

/// Called after each epoch with the model and the epoch's loss record.
pub type EpochHook<'a, T> = &'a mut dyn FnMut(&Model<T>, &LossRecord) -> Result<()>;

/// Trains `model` in place on `panels` (already cut at the training cutoff).
/// On divergence the parameters are restored to the last completed epoch and
/// the error is returned.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    panels: &[ImputedPanel],
    cfg: &TrainConfig,
    mut on_epoch: Option<EpochHook<'_, T>>,
) -> Result<TrainReport> {
    let schema = model.schema().clone();
    cfg.validate(schema.n_markets)?;
    let weights = LossWeights {
        market: cfg
            .market_weights
            .clone()
            .unwrap_or_else(|| market_shares(panels, schema.n_markets)),
        imputed: cfg.imputed_weight,
    };
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            clip_norm: cfg.clip_norm,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport {
        market_weights: weights.market.clone(),
        ..TrainReport::default()
    };
    let mut epoch_counter = 0usize;

    for (phase, epochs) in [(Pair::Near, cfg.near_epochs), (Pair::Far, cfg.far_epochs)] {
        let horizon = loss_weeks(model, phase);
        let candidates: Vec<(usize, Vec<usize>)> = panels
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut c = candidate_origins(p, &schema, horizon);
                if let Some(win) = cfg.origin_window {
                    let last = p.panel.end_week().saturating_sub(2);
                    c.retain(|&t| t + win > last);
                }
                (i, c)
            })
            .filter(|(_, c)| !c.is_empty())
            .collect();
        if candidates.is_empty() {
            return Err(Error::Data("no training samples after masking".into()));
        }
        let frozen = phase_freeze(model, phase);

        // fixed evaluation set: one origin per article (at most 256 articles)
        let eval: Vec<Sample<T>> = candidates
            .iter()
            .take(256)
            .map(|(i, c)| build_sample(&panels[*i], &schema, c[c.len() / 2], horizon))
            .collect::<Result<_>>()?;
        let initial = batch_loss(model, &eval, phase, &weights)?.as_f64();
        report.trace.push(LossRecord {
            phase,
            epoch: 0,
            loss: initial,
        });

        for epoch in 1..=epochs {
            epoch_counter += 1;
            let snap = snapshot(model.params());
            let mut order: Vec<(usize, usize)> = Vec::new();
            match cfg.samples_per_epoch {
                None => {
                    for (i, c) in &candidates {
                        for _ in 0..cfg.origins_per_article {
                            order.push((*i, c[rng.random_range(0..c.len())]));
                        }
                    }
                }
                Some(n) => {
                    let mut arts: Vec<usize> = (0..candidates.len()).collect();
                    while order.len() < n {
                        arts.shuffle(&mut rng);
                        for &a in &arts {
                            if order.len() == n {
                                break;
                            }
                            let (i, c) = &candidates[a];
                            order.push((*i, c[rng.random_range(0..c.len())]));
                        }
                    }
                }
            }
            order.shuffle(&mut rng);

            let mut sum = 0.0;
            let mut count = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                let samples: Vec<Sample<T>> = batch
                    .iter()
                    .map(|&(i, t)| build_sample(&panels[i], &schema, t, horizon))
                    .collect::<Result<_>>()?;
                let seeds: Vec<u64> = (0..samples.len()).map(|_| rng.random()).collect();
                let step = batch_gradients(model, &samples, phase, &weights, &frozen, Some(&seeds), cfg.workers)
                    .and_then(|(loss, grads)| {
                        adam.step(model.params_mut(), &grads, &frozen)?;
                        Ok(loss)
                    });
                match step {
                    Ok(loss) => {
                        sum += loss.as_f64() * samples.len() as f64;
                        count += samples.len();
                    }
                    Err(Error::NonFinite(_)) | Err(Error::NanGradient(_)) => {
                        restore(model.params_mut(), &snap);
                        return Err(Error::Diverged {
                            epoch: epoch_counter,
                            loss: f64::NAN,
                        });
                    }
                    Err(e) => return Err(e),
                }
            }
            let mean = sum / count.max(1) as f64;
            if !mean.is_finite() {
                restore(model.params_mut(), &snap);
                return Err(Error::Diverged {
                    epoch: epoch_counter,
                    loss: mean,
                });
            }
            report.samples_seen += count;
            let record = LossRecord {
                phase,
                epoch,
                loss: mean,
            };
            if let Some(hook) = on_epoch.as_mut() {
                hook(model, &record)?;
            }
            report.trace.push(record);
        }
    }
    Ok(report)
}
