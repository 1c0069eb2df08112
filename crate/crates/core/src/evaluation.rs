//! Forecast metrics, the naive baseline, rolling-origin backtests and the
//! training-size and staleness experiments.
//!
//! Only weeks with observed (non-imputed) demand and stock on hand are
//! scored. The black price weighting uses each market's own black price.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{build_sample, last_demand, CovariateSchema};
use crate::imputation::ImputedPanel;
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::training::{train, truncate_panels, TrainConfig};

/// Black-price weighted relative RMSE: `sqrt(Σ b(q̂−q)² / Σ b q²)`.
pub fn demand_error(preds: &[f64], actuals: &[f64], black_prices: &[f64]) -> Result<f64> {
    check_lengths(preds, actuals, black_prices)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&p, &q), &b) in preds.iter().zip(actuals).zip(black_prices) {
        num += b * (p - q) * (p - q);
        den += b * q * q;
    }
    if den > 0.0 {
        Ok((num / den).sqrt())
    } else {
        Err(Error::UndefinedMetric("demand_error"))
    }
}

/// Black-price weighted relative bias: `Σ b(q̂−q) / Σ b q`.
pub fn demand_bias(preds: &[f64], actuals: &[f64], black_prices: &[f64]) -> Result<f64> {
    check_lengths(preds, actuals, black_prices)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&p, &q), &b) in preds.iter().zip(actuals).zip(black_prices) {
        num += b * (p - q);
        den += b * q;
    }
    if den > 0.0 {
        Ok(num / den)
    } else {
        Err(Error::UndefinedMetric("demand_bias"))
    }
}

fn check_lengths(preds: &[f64], actuals: &[f64], weights: &[f64]) -> Result<()> {
    if preds.len() != actuals.len() || preds.len() != weights.len() {
        return Err(Error::Dimension {
            op: "metric",
            left: vec![preds.len(), actuals.len()],
            right: vec![weights.len()],
        });
    }
    Ok(())
}

/// Plain RMSE; 0 for empty input.
pub fn rmse(preds: &[f64], actuals: &[f64]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let s: f64 = preds.iter().zip(actuals).map(|(p, q)| (p - q) * (p - q)).sum();
    (s / preds.len() as f64).sqrt()
}

/// MAPE after adding 10 to both forecast and actual; 0 for empty input.
pub fn mape_offset10(preds: &[f64], actuals: &[f64]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let s: f64 = preds
        .iter()
        .zip(actuals)
        .map(|(p, q)| ((p + 10.0) - (q + 10.0)).abs() / (q + 10.0))
        .sum();
    s / preds.len() as f64
}

/// Repeats the last observed demand of each market.
#[derive(Clone, Debug, PartialEq)]
pub struct NaiveForecast {
    pub level: Vec<f64>,
    /// Markets without any observed demand; their level is 0.
    pub fallback: Vec<bool>,
}

impl NaiveForecast {
    pub fn predictions(&self, horizon: usize) -> Vec<Vec<f64>> {
        vec![self.level.clone(); horizon]
    }
}

pub fn naive_forecast(ip: &ImputedPanel, origin: usize) -> NaiveForecast {
    let last = last_demand(ip, origin);
    NaiveForecast {
        level: last.iter().map(|d| d.unwrap_or(0.0)).collect(),
        fallback: last.iter().map(Option::is_none).collect(),
    }
}

/// One scored (article, market, future week).
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub article_id: u32,
    pub market: usize,
    /// 1-based weeks ahead of the origin.
    pub week_ahead: usize,
    pub black_price: f64,
    pub actual: f64,
    pub model: f64,
    pub naive: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub articles: usize,
    pub skipped_articles: usize,
    /// Weeks in scope whose demand was imputed and therefore not scored.
    pub excluded_weeks: usize,
    pub naive_fallbacks: usize,
}

fn score_article<T: Scalar>(
    model: &Model<T>,
    ip: &ImputedPanel,
    origin: usize,
    horizon: usize,
) -> Result<Option<(Vec<Observation>, usize, usize)>> {
    let p = &ip.panel;
    if p.first_week > origin || p.end_week() <= origin + 1 {
        return Ok(None);
    }
    let sample = build_sample::<T>(ip, model.schema(), origin, horizon)?;
    let preds = match model.predict(&sample, horizon) {
        Ok(p) => p,
        Err(Error::AllMasked { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let naive = naive_forecast(ip, origin);
    let mut obs = Vec::new();
    let mut excluded = 0;
    for k in 0..horizon {
        let week = origin + 1 + k;
        let Some(pw) = p.week(week) else { break };
        if pw.total_stock() == 0 {
            continue;
        }
        for j in 0..p.n_markets() {
            let Some(d) = ip.demand_at(week, j) else { continue };
            if d.excluded_from_eval {
                excluded += 1;
                continue;
            }
            let Some(actual) = d.demand_estimate else { continue };
            obs.push(Observation {
                article_id: p.article_id,
                market: j,
                week_ahead: k + 1,
                black_price: sample.black_prices[j],
                actual,
                model: preds[k][j].as_f64(),
                naive: naive.level[j],
            });
        }
    }
    let fallbacks = naive.fallback.iter().filter(|&&f| f).count();
    Ok(Some((obs, excluded, fallbacks)))
}

/// Scores `model` and the naive forecaster on every panel with history at
/// `origin`, over the weeks `origin + 1 ..= origin + horizon`.
pub fn score_origin<T: Scalar>(
    model: &Model<T>,
    panels: &[ImputedPanel],
    origin: usize,
    horizon: usize,
    workers: usize,
) -> Result<(Vec<Observation>, ScoreStats)> {
    let run = |ip: &ImputedPanel| score_article(model, ip, origin, horizon);
    let results: Vec<_> = if workers <= 1 || panels.len() <= 1 {
        panels.iter().map(run).collect()
    } else {
        let chunk = panels.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = panels
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };
    let mut all = Vec::new();
    let mut stats = ScoreStats::default();
    for r in results {
        match r? {
            Some((obs, excluded, fallbacks)) => {
                stats.articles += 1;
                stats.excluded_weeks += excluded;
                stats.naive_fallbacks += fallbacks;
                all.extend(obs);
            }
            None => stats.skipped_articles += 1,
        }
    }
    Ok((all, stats))
}

/// Metrics of one forecaster; error and bias are `None` when every actual is
/// zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub demand_error: Option<f64>,
    pub demand_bias: Option<f64>,
    pub rmse: f64,
    pub mape_offset10: f64,
    pub n: usize,
}

pub fn metrics<'a>(obs: impl IntoIterator<Item = &'a Observation>, naive: bool) -> Metrics {
    let (mut p, mut q, mut b) = (Vec::new(), Vec::new(), Vec::new());
    for o in obs {
        p.push(if naive { o.naive } else { o.model });
        q.push(o.actual);
        b.push(o.black_price);
    }
    Metrics {
        demand_error: demand_error(&p, &q, &b).ok(),
        demand_bias: demand_bias(&p, &q, &b).ok(),
        rmse: rmse(&p, &q),
        mape_offset10: mape_offset10(&p, &q),
        n: p.len(),
    }
}

/// Horizon buckets: near 1–5, far 6–20, extrapolated 21–26. The headline
/// number uses the near bucket.
pub const BUCKETS: [(&str, usize, usize); 3] = [("near", 1, 5), ("far", 6, 20), ("extrapolated", 21, 26)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub name: String,
    pub first_week: usize,
    pub last_week: usize,
    pub model: Metrics,
    pub naive: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub week: usize,
    pub model: Option<f64>,
    pub naive: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub origin: usize,
    pub horizon: usize,
    pub stats: ScoreStats,
    pub headline: BucketMetrics,
    pub buckets: Vec<BucketMetrics>,
    pub curve: Vec<CurvePoint>,
}

impl MetricsReport {
    pub fn new(origin: usize, horizon: usize, obs: &[Observation], stats: ScoreStats) -> Self {
        let bucket = |name: &str, lo: usize, hi: usize| {
            let sel = || obs.iter().filter(move |o| (lo..=hi).contains(&o.week_ahead));
            BucketMetrics {
                name: name.into(),
                first_week: lo,
                last_week: hi,
                model: metrics(sel(), false),
                naive: metrics(sel(), true),
            }
        };
        let buckets = BUCKETS
            .iter()
            .filter(|(_, lo, _)| *lo <= horizon)
            .map(|&(n, lo, hi)| bucket(n, lo, hi.min(horizon)))
            .collect();
        let curve = (1..=horizon)
            .map(|w| {
                let sel = || obs.iter().filter(move |o| o.week_ahead == w);
                CurvePoint {
                    week: w,
                    model: metrics(sel(), false).demand_error,
                    naive: metrics(sel(), true).demand_error,
                }
            })
            .collect();
        MetricsReport {
            origin,
            horizon,
            stats,
            headline: bucket("headline", 1, 5.min(horizon)),
            buckets,
            curve,
        }
    }

    /// Mean of the per-week model demand error over weeks `lo..=hi`.
    pub fn mean_curve(&self, lo: usize, hi: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .curve
            .iter()
            .filter(|p| (lo..=hi).contains(&p.week))
            .filter_map(|p| p.model)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn forecasters(b: &BucketMetrics, naive: bool) -> Vec<(&'static str, &Metrics)> {
    let mut v = vec![("model", &b.model)];
    if naive {
        v.push(("naive", &b.naive));
    }
    v
}

/// `origin,bucket,first_week,last_week,forecaster,demand_error,demand_bias,rmse,mape_offset10,n`;
/// naive rows only when `naive` is set.
pub fn metrics_csv(reports: &[MetricsReport], naive: bool) -> String {
    let mut s = String::from("origin,bucket,first_week,last_week,forecaster,demand_error,demand_bias,rmse,mape_offset10,n\n");
    for r in reports {
        for b in std::iter::once(&r.headline).chain(&r.buckets) {
            for (name, m) in forecasters(b, naive) {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{name},{},{},{},{},{}",
                    r.origin,
                    b.name,
                    b.first_week,
                    b.last_week,
                    opt(m.demand_error),
                    opt(m.demand_bias),
                    m.rmse,
                    m.mape_offset10,
                    m.n
                );
            }
        }
    }
    s
}

/// Horizon curve plot data: `origin,week,model_demand_error[,naive_demand_error]`.
pub fn curve_csv(reports: &[MetricsReport], naive: bool) -> String {
    let mut s = String::from("origin,week,model_demand_error");
    s.push_str(if naive { ",naive_demand_error\n" } else { "\n" });
    for r in reports {
        for p in &r.curve {
            let _ = write!(s, "{},{},{}", r.origin, p.week, opt(p.model));
            if naive {
                let _ = write!(s, ",{}", opt(p.naive));
            }
            s.push('\n');
        }
    }
    s
}

pub fn report_text(reports: &[MetricsReport], notices: &[String], naive: bool) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    let mut s = String::new();
    for r in reports {
        let _ = write!(
            s,
            "origin week {}: {} articles scored, {} skipped, {} imputed weeks excluded",
            r.origin, r.stats.articles, r.stats.skipped_articles, r.stats.excluded_weeks
        );
        if naive {
            let _ = write!(s, ", {} naive fallbacks", r.stats.naive_fallbacks);
        }
        s.push('\n');
        let _ = writeln!(
            s,
            "  {:<18} {:<6} {:>9} {:>9} {:>9} {:>9} {:>7}",
            "weeks", "model", "error", "bias", "rmse", "mape", "n"
        );
        for b in std::iter::once(&r.headline).chain(&r.buckets) {
            for (name, m) in forecasters(b, naive) {
                let _ = writeln!(
                    s,
                    "  {:<18} {:<6} {:>9} {:>9} {:>9.3} {:>9.4} {:>7}",
                    format!("{} {}-{}", b.name, b.first_week, b.last_week),
                    name,
                    fmt(m.demand_error),
                    fmt(m.demand_bias),
                    m.rmse,
                    m.mape_offset10,
                    m.n
                );
            }
        }
    }
    for n in notices {
        let _ = writeln!(s, "notice: {n}");
    }
    s
}

/// Everything needed to fit a model from scratch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub schema: CovariateSchema,
    pub train: TrainConfig,
}

impl TrainSetup {
    /// Fits a fresh model; `seed` drives both initialisation and sampling.
    pub fn fit<T: Scalar>(&self, panels: &[ImputedPanel], seed: u64) -> Result<Model<T>> {
        let mut model = Model::new(
            ModelConfig {
                seed,
                ..self.model.clone()
            },
            self.schema.clone(),
        )?;
        let cfg = TrainConfig {
            seed,
            ..self.train.clone()
        };
        train(&mut model, panels, &cfg, None)?;
        Ok(model)
    }
}

pub struct Backtest {
    pub reports: Vec<MetricsReport>,
    pub notices: Vec<String>,
}

/// Model factory: receives the origin and the panels cut after it.
pub type Factory<'a, T> = &'a mut dyn FnMut(usize, &[ImputedPanel]) -> Result<Model<T>>;

/// For each origin, obtains a model trained on data up to that week, then
/// scores it and the naive forecaster over `horizon` weeks.
pub fn run_backtest<T: Scalar>(
    panels: &[ImputedPanel],
    factory: Factory<'_, T>,
    origins: &[usize],
    horizon: usize,
    workers: usize,
) -> Result<Backtest> {
    let last_week = panels.iter().map(|p| p.panel.end_week()).max().unwrap_or(0);
    let mut out = Backtest {
        reports: Vec::new(),
        notices: Vec::new(),
    };
    for &origin in origins {
        if origin + horizon >= last_week {
            out.notices.push(format!(
                "origin {origin} skipped: needs actuals through week {}, data ends at week {}",
                origin + horizon,
                last_week.saturating_sub(1)
            ));
            continue;
        }
        let model = factory(origin, &truncate_panels(panels, origin + 1))?;
        let (obs, stats) = score_origin(&model, panels, origin, horizon, workers)?;
        out.reports.push(MetricsReport::new(origin, horizon, &obs, stats));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Share of articles held out as the fixed test set.
    pub test_share: f64,
    /// Forecast origin; the last week leaving `horizon` weeks of actuals
    /// when unset.
    pub origin: Option<usize>,
    pub horizon: usize,
    /// Seed of the train/test article split.
    pub split_seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            fractions: vec![0.1, 0.3, 1.0],
            seeds: vec![1, 2, 3],
            test_share: 0.2,
            origin: None,
            horizon: 5,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub fraction: f64,
    pub train_articles: usize,
    pub seed: u64,
    pub demand_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub origin: usize,
    pub test_articles: usize,
    pub samples_per_epoch: usize,
    pub rows: Vec<ScalingRow>,
    pub naive_demand_error: f64,
}

/// Seed mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl ScalingTable {
    /// `(fraction, train articles, seed mean, seed std)` per fraction.
    pub fn summary(&self) -> Vec<(f64, usize, f64, f64)> {
        let mut fractions: Vec<f64> = self.rows.iter().map(|r| r.fraction).collect();
        fractions.dedup();
        fractions
            .into_iter()
            .map(|f| {
                let rows: Vec<&ScalingRow> = self.rows.iter().filter(|r| r.fraction == f).collect();
                let errs: Vec<f64> = rows.iter().map(|r| r.demand_error).collect();
                let (m, s) = mean_std(&errs);
                (f, rows[0].train_articles, m, s)
            })
            .collect()
    }

    /// Whether the seed-mean error never rises by more than one pooled
    /// standard deviation as the training set grows.
    pub fn non_increasing_within_noise(&self) -> bool {
        let s = self.summary();
        let pooled = (s.iter().map(|x| x.3 * x.3).sum::<f64>() / s.len().max(1) as f64).sqrt();
        s.windows(2).all(|w| w[1].2 <= w[0].2 + pooled)
    }

    /// Plot data: `fraction,train_articles,seed,demand_error,naive_demand_error`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fraction,train_articles,seed,demand_error,naive_demand_error\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.fraction, r.train_articles, r.seed, r.demand_error, self.naive_demand_error
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "training-size experiment: origin week {}, {} test articles, {} samples per epoch\nnaive demand error {:.4}\n",
            self.origin, self.test_articles, self.samples_per_epoch, self.naive_demand_error
        );
        for (f, n, m, sd) in self.summary() {
            let _ = writeln!(s, "  fraction {f:<5} articles {n:<6} demand error {m:.4} ± {sd:.4}");
        }
        s
    }
}

fn headline_error(obs: &[Observation], naive: bool) -> Result<f64> {
    metrics(obs, naive)
        .demand_error
        .ok_or(Error::UndefinedMetric("demand_error"))
}

/// Trains on nested article subsets of the training pool with a fixed
/// number of samples per epoch and scores a fixed held-out article set.
pub fn scaling_experiment<T: Scalar>(
    panels: &[ImputedPanel],
    setup: &TrainSetup,
    cfg: &ScalingConfig,
    workers: usize,
) -> Result<ScalingTable> {
    if cfg.fractions.is_empty() || cfg.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Config("scaling: fractions must lie in (0, 1]".into()));
    }
    if cfg.seeds.is_empty() || !(cfg.test_share > 0.0 && cfg.test_share < 1.0) || cfg.horizon == 0 {
        return Err(Error::Config("scaling: need seeds, test_share in (0, 1) and a positive horizon".into()));
    }
    let last_week = panels.iter().map(|p| p.panel.end_week()).max().unwrap_or(0);
    let origin = match cfg.origin {
        Some(o) => o,
        None => last_week
            .checked_sub(cfg.horizon + 1)
            .ok_or_else(|| Error::Config("scaling: panels shorter than the horizon".into()))?,
    };
    let mut order: Vec<usize> = (0..panels.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.split_seed));
    let n_test = ((panels.len() as f64 * cfg.test_share).round() as usize).max(1);
    let mut test_idx = order[..n_test].to_vec();
    test_idx.sort_unstable();
    let test: Vec<ImputedPanel> = test_idx.iter().map(|&i| panels[i].clone()).collect();
    let pool: Vec<ImputedPanel> = truncate_panels(
        &order[n_test..].iter().map(|&i| panels[i].clone()).collect::<Vec<_>>(),
        origin + 1,
    );
    let samples_per_epoch = setup
        .train
        .samples_per_epoch
        .unwrap_or(pool.len() * setup.train.origins_per_article);

    let mut rows = Vec::new();
    let mut naive = None;
    for &f in &cfg.fractions {
        let n = (pool.len() as f64 * f).round() as usize;
        if n == 0 {
            return Err(Error::Config(format!("scaling: fraction {f} selects no training articles")));
        }
        let subset = &pool[..n];
        let fit = TrainSetup {
            train: TrainConfig {
                samples_per_epoch: Some(samples_per_epoch),
                workers,
                ..setup.train.clone()
            },
            ..setup.clone()
        };
        for &seed in &cfg.seeds {
            let model: Model<T> = fit.fit(subset, seed)?;
            let (obs, _) = score_origin(&model, &test, origin, cfg.horizon, workers)?;
            if naive.is_none() {
                naive = Some(headline_error(&obs, true)?);
            }
            rows.push(ScalingRow {
                fraction: f,
                train_articles: n,
                seed,
                demand_error: headline_error(&obs, false)?,
            });
        }
    }
    Ok(ScalingTable {
        origin,
        test_articles: test.len(),
        samples_per_epoch,
        rows,
        naive_demand_error: naive.unwrap_or(f64::NAN),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StalenessConfig {
    /// Last week of data seen by the stale model.
    pub train_week: Option<usize>,
    /// Largest staleness offset; offsets `0..=max_offset` are evaluated.
    pub max_offset: usize,
    pub seeds: Vec<u64>,
    /// Weeks ahead scored for every forecast.
    pub horizon: usize,
    /// Weekly update schedule applied to the previous week's model.
    pub retrain_near_epochs: usize,
    pub retrain_far_epochs: usize,
    /// Origins used by the weekly update, counted back from its cutoff.
    pub retrain_origin_window: usize,
}

impl Default for StalenessConfig {
    fn default() -> Self {
        StalenessConfig {
            train_week: None,
            max_offset: 8,
            seeds: vec![1, 2, 3],
            horizon: 1,
            retrain_near_epochs: 2,
            retrain_far_epochs: 1,
            retrain_origin_window: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StalenessPoint {
    pub offset: usize,
    pub seed: u64,
    pub stale: f64,
    pub retrained: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StalenessCurve {
    pub train_week: usize,
    pub points: Vec<StalenessPoint>,
}

impl StalenessCurve {
    /// Mean over offsets and seeds of (stale, retrained).
    pub fn means(&self) -> (f64, f64) {
        let n = self.points.len().max(1) as f64;
        (
            self.points.iter().map(|p| p.stale).sum::<f64>() / n,
            self.points.iter().map(|p| p.retrained).sum::<f64>() / n,
        )
    }

    /// Plot data: `offset,seed,stale_demand_error,retrained_demand_error`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("offset,seed,stale_demand_error,retrained_demand_error\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{}", p.offset, p.seed, p.stale, p.retrained);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let (stale, fresh) = self.means();
        let mut s = format!(
            "staleness experiment: stale model trained through week {}\nmean demand error: stale {stale:.4}, retrained {fresh:.4}\n",
            self.train_week
        );
        let max = self.points.iter().map(|p| p.offset).max().unwrap_or(0);
        for k in 0..=max {
            let at: Vec<&StalenessPoint> = self.points.iter().filter(|p| p.offset == k).collect();
            let n = at.len().max(1) as f64;
            let _ = writeln!(
                s,
                "  offset {k}: stale {:.4}, retrained {:.4}",
                at.iter().map(|p| p.stale).sum::<f64>() / n,
                at.iter().map(|p| p.retrained).sum::<f64>() / n
            );
        }
        s
    }
}

/// Compares one model trained through `train_week` with a model updated on
/// each new week of data. At offset `k` both forecast from origin
/// `train_week + k`; at offset 0 they are the same model.
pub fn staleness_experiment<T: Scalar>(
    panels: &[ImputedPanel],
    setup: &TrainSetup,
    cfg: &StalenessConfig,
    workers: usize,
) -> Result<StalenessCurve> {
    if cfg.seeds.is_empty() || cfg.horizon == 0 || cfg.retrain_near_epochs == 0 || cfg.retrain_far_epochs == 0 {
        return Err(Error::Config(
            "staleness: need seeds, a positive horizon and at least one update epoch per phase".into(),
        ));
    }
    let last_week = panels.iter().map(|p| p.panel.end_week()).max().unwrap_or(0);
    let span = cfg.max_offset + cfg.horizon + 1;
    let train_week = match cfg.train_week {
        Some(w) => w,
        None => last_week
            .checked_sub(span)
            .ok_or_else(|| Error::Config("staleness: panels too short".into()))?,
    };
    if train_week + span > last_week {
        return Err(Error::Config(format!(
            "staleness: offsets up to {} need actuals through week {}, data ends at week {}",
            cfg.max_offset,
            train_week + cfg.max_offset + cfg.horizon,
            last_week.saturating_sub(1)
        )));
    }
    let update = TrainConfig {
        near_epochs: cfg.retrain_near_epochs,
        far_epochs: cfg.retrain_far_epochs,
        origin_window: Some(cfg.retrain_origin_window),
        samples_per_epoch: None,
        workers,
        ..setup.train.clone()
    };
    let fit = TrainSetup {
        train: TrainConfig {
            workers,
            ..setup.train.clone()
        },
        ..setup.clone()
    };
    let mut points = Vec::new();
    for &seed in &cfg.seeds {
        let stale: Model<T> = fit.fit(&truncate_panels(panels, train_week + 1), seed)?;
        let mut fresh = stale.clone();
        for k in 0..=cfg.max_offset {
            let origin = train_week + k;
            if k > 0 {
                let cfg_k = TrainConfig {
                    seed: seed.wrapping_mul(1000).wrapping_add(k as u64),
                    ..update.clone()
                };
                train(&mut fresh, &truncate_panels(panels, origin + 1), &cfg_k, None)?;
            }
            let (obs_stale, _) = score_origin(&stale, panels, origin, cfg.horizon, workers)?;
            let (obs_fresh, _) = score_origin(&fresh, panels, origin, cfg.horizon, workers)?;
            points.push(StalenessPoint {
                offset: k,
                seed,
                stale: headline_error(&obs_stale, false)?,
                retrained: headline_error(&obs_fresh, false)?,
            });
        }
    }
    Ok(StalenessCurve { train_week, points })
}
