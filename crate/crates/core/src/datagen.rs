//! Synthetic fashion catalog with known ground truth.
//!
//! Weekly demand per article and market is negative binomial (gamma-Poisson)
//! around a closed-form mean: lognormal base rate × brand effect × market
//! share × commodity-group seasonality × lifecycle trend × a multiplicative
//! piecewise-linear discount uplift. Demand is split over sizes by a
//! per-article Dirichlet size profile and then censored by stock: sizes can
//! be missing for a week, or the whole article can go out of stock for an
//! episode until it is replenished.
//!
//! Each article draws from its own RNG streams derived from
//! `(seed, article_id, stream)`, so articles are independent and the
//! discount policy can be replaced without disturbing the demand draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discount grid step (5 percentage points).
pub const DISCOUNT_STEP: f64 = 0.05;
/// Highest discount on the grid.
pub const MAX_DISCOUNT_LEVEL: usize = 14;

/// Discount value of grid level `k`, computed as `k / 20` so that level 14
/// is exactly `0.7`.
pub fn discount_level(k: usize) -> f64 {
    k as f64 / 20.0
}

/// Relative uplift shape across the seven 10pp segments (mean 1).
const UPLIFT_SHAPE: [f64; 7] = [0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CatalogSpec {
    pub n_articles: usize,
    pub n_markets: usize,
    pub n_weeks: usize,
    pub seed: u64,
    /// Inclusive range of sizes per article.
    pub size_count_range: [usize; 2],
    /// True demand uplift per 10pp of discount (relative to black-price demand).
    pub elasticity_range: [f64; 2],
    /// Lognormal location of the article's mean weekly demand (all markets).
    pub base_rate_mu: f64,
    pub base_rate_sigma: f64,
    /// Negative-binomial shape; larger is closer to Poisson.
    pub dispersion: f64,
    /// Probability that a size is missing in a given week. Also scales the
    /// rate of whole-article out-of-stock episodes.
    pub stockout_rate: f64,
    /// Episode start probability per week, relative to `stockout_rate`.
    pub episode_factor: f64,
    pub episode_length: [usize; 2],
    /// Probability of a one-step move of the discount random walk.
    pub discount_step_prob: f64,
    /// Ceiling of the regular discount walk, as a grid level.
    pub regular_max_level: usize,
    /// Week-of-year (0..52) positions of catalog-wide sale events.
    pub sale_event_weeks: Vec<usize>,
    /// Extra grid levels added during a sale event.
    pub sale_event_levels: usize,
    pub cold_start_share: f64,
    pub n_brands: usize,
    pub n_commodity_groups: usize,
    /// Maximum seasonal amplitude of a commodity group.
    pub seasonality: f64,
    /// Dirichlet concentration of the size profile.
    pub size_concentration: f64,
    /// Relative change of elasticities per 52 weeks.
    pub elasticity_drift: f64,
    /// Range of per-article lifecycle trend (log change per 52 weeks).
    pub trend_range: [f64; 2],
}

impl Default for CatalogSpec {
    fn default() -> Self {
        CatalogSpec {
            n_articles: 200,
            n_markets: 1,
            n_weeks: 130,
            seed: 7,
            size_count_range: [3, 6],
            elasticity_range: [0.1, 0.6],
            base_rate_mu: 1.5,
            base_rate_sigma: 1.0,
            dispersion: 8.0,
            stockout_rate: 0.05,
            episode_factor: 0.3,
            episode_length: [2, 6],
            discount_step_prob: 0.25,
            regular_max_level: 8,
            sale_event_weeks: vec![25, 26, 50, 51],
            sale_event_levels: 4,
            cold_start_share: 0.1,
            n_brands: 20,
            n_commodity_groups: 6,
            seasonality: 0.4,
            size_concentration: 4.0,
            elasticity_drift: 0.0,
            trend_range: [-0.4, 0.2],
        }
    }
}

impl CatalogSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("catalog: {m}")));
        if self.n_articles == 0 || self.n_markets == 0 || self.n_weeks == 0 {
            return bad("n_articles, n_markets and n_weeks must be positive");
        }
        let [smin, smax] = self.size_count_range;
        if smin == 0 || smin > smax {
            return bad("size_count_range must satisfy 1 <= min <= max");
        }
        let [emin, emax] = self.elasticity_range;
        if !(emin >= 0.0 && emin <= emax && emax.is_finite()) {
            return bad("elasticity_range must satisfy 0 <= min <= max");
        }
        for (name, p) in [
            ("stockout_rate", self.stockout_rate),
            ("discount_step_prob", self.discount_step_prob),
            ("cold_start_share", self.cold_start_share),
            ("episode start probability", self.stockout_rate * self.episode_factor),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.base_rate_sigma >= 0.0 && self.base_rate_mu.is_finite()) {
            return bad("base rate lognormal parameters invalid");
        }
        if !(self.dispersion > 0.0) || !(self.size_concentration > 0.0) {
            return bad("dispersion and size_concentration must be positive");
        }
        if self.episode_length[0] == 0 || self.episode_length[0] > self.episode_length[1] {
            return bad("episode_length must satisfy 1 <= min <= max");
        }
        if self.regular_max_level > MAX_DISCOUNT_LEVEL {
            return bad("regular_max_level exceeds the discount grid");
        }
        if self.sale_event_weeks.iter().any(|&w| w >= 52) {
            return bad("sale_event_weeks are week-of-year indices in 0..52");
        }
        if !(0.0..1.0).contains(&self.seasonality) {
            return bad("seasonality must lie in [0, 1)");
        }
        if self.n_brands == 0 || self.n_commodity_groups == 0 {
            return bad("n_brands and n_commodity_groups must be positive");
        }
        if self.trend_range[0] > self.trend_range[1] {
            return bad("trend_range must satisfy min <= max");
        }
        Ok(())
    }

    /// Demand share of each market (decreasing, sums to one).
    pub fn market_shares(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.n_markets).map(|j| 1.0 / (j as f64 + 1.0)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|r| r / total).collect()
    }
}

/// One market's view of one article-week.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketWeek {
    pub discount: f64,
    pub black_price: f64,
    pub sales_by_size: Vec<u32>,
}

impl MarketWeek {
    pub fn total_sales(&self) -> u32 {
        self.sales_by_size.iter().sum()
    }
}

/// One article-week. Stock is shared across markets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelWeek {
    pub stock_by_size: Vec<u32>,
    pub stock_uplift: u32,
    pub markets: Vec<MarketWeek>,
}

impl PanelWeek {
    pub fn total_stock(&self) -> u32 {
        self.stock_by_size.iter().sum()
    }

    pub fn availability(&self) -> Vec<bool> {
        self.stock_by_size.iter().map(|&s| s > 0).collect()
    }
}

/// Weekly history of one article across all markets, starting at calendar
/// week `first_week`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArticlePanel {
    pub article_id: u32,
    pub brand_id: u32,
    pub commodity_group_id: u32,
    pub first_week: usize,
    pub weeks: Vec<PanelWeek>,
}

impl ArticlePanel {
    pub fn n_sizes(&self) -> usize {
        self.weeks.first().map_or(0, |w| w.stock_by_size.len())
    }

    pub fn n_markets(&self) -> usize {
        self.weeks.first().map_or(0, |w| w.markets.len())
    }

    /// Calendar week of the last recorded week (exclusive end).
    pub fn end_week(&self) -> usize {
        self.first_week + self.weeks.len()
    }

    /// Week by calendar index, `None` outside the recorded range.
    pub fn week(&self, calendar_week: usize) -> Option<&PanelWeek> {
        calendar_week
            .checked_sub(self.first_week)
            .and_then(|i| self.weeks.get(i))
    }

    pub fn validate(&self) -> Result<()> {
        let (k, c) = (self.n_sizes(), self.n_markets());
        for (i, w) in self.weeks.iter().enumerate() {
            let wk = self.first_week + i;
            if w.stock_by_size.len() != k || w.markets.len() != c {
                return Err(Error::Data(format!(
                    "article {} week {wk}: inconsistent size or market count",
                    self.article_id
                )));
            }
            for m in &w.markets {
                if m.sales_by_size.len() != k {
                    return Err(Error::Data(format!(
                        "article {} week {wk}: sales_by_size has {} entries, expected {k}",
                        self.article_id,
                        m.sales_by_size.len()
                    )));
                }
                if !(0.0..=0.7 + 1e-12).contains(&m.discount) || !(m.black_price > 0.0) {
                    return Err(Error::Data(format!(
                        "article {} week {wk}: discount {} or black price {} out of range",
                        self.article_id, m.discount, m.black_price
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parameters and realised demand behind one generated article.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArticleTruth {
    pub article_id: u32,
    pub size_profile: Vec<f64>,
    pub base_rate: f64,
    pub elasticity: f64,
    pub launch_week: usize,
    pub trend: f64,
    pub season_amplitude: f64,
    pub season_phase: f64,
    pub brand_effect: f64,
    pub market_shares: Vec<f64>,
    pub elasticity_drift: f64,
    /// Uncensored demand, `[week][market]`, aligned with the panel weeks.
    pub demand: Vec<Vec<u32>>,
    /// Expected demand under the realised discounts, `[week][market]`.
    pub expected: Vec<Vec<f64>>,
}

impl ArticleTruth {
    /// Multiplicative uplift at discount `d` in calendar week `week`.
    pub fn uplift(&self, week: usize, d: f64) -> f64 {
        let e = self.elasticity * (1.0 + self.elasticity_drift * week as f64 / 52.0).max(0.0);
        let mut up = 1.0;
        let mut rest = d.clamp(0.0, 0.7);
        for shape in UPLIFT_SHAPE {
            let seg = rest.min(0.1);
            up += e * shape * seg / 0.1;
            rest -= seg;
            if rest <= 0.0 {
                break;
            }
        }
        up
    }

    /// Closed-form mean demand for a market in a calendar week at discount `d`.
    pub fn expected_demand(&self, week: usize, market: usize, d: f64) -> f64 {
        if week < self.launch_week {
            return 0.0;
        }
        let age = (week - self.launch_week) as f64 / 52.0;
        let season = 1.0
            + self.season_amplitude
                * (2.0 * std::f64::consts::PI * (week as f64 + self.season_phase) / 52.0).sin();
        self.base_rate
            * self.brand_effect
            * self.market_shares[market]
            * season
            * (self.trend * age).exp()
            * self.uplift(week, d)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub articles: Vec<ArticleTruth>,
}

#[derive(Clone, Debug)]
pub struct Catalog {
    pub panels: Vec<ArticlePanel>,
    pub truth: GroundTruth,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn stream(seed: u64, key: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ splitmix(key)) ^ stream))
}

const STREAM_STATIC: u64 = 1;
const STREAM_POLICY: u64 = 2;
const STREAM_DEMAND: u64 = 3;
const STREAM_STOCK: u64 = 4;
const STREAM_GROUP: u64 = 5;
const STREAM_BRAND: u64 = 6;

/// Discount path override: `(calendar_week, market) -> discount`.
pub type DiscountPolicy<'a> = &'a dyn Fn(usize, usize) -> f64;

pub fn generate_catalog(spec: &CatalogSpec) -> Result<Catalog> {
    spec.validate()?;
    let mut panels = Vec::with_capacity(spec.n_articles);
    let mut truth = GroundTruth::default();
    for a in 0..spec.n_articles {
        let (p, t) = generate_article(spec, a as u32, None)?;
        panels.push(p);
        truth.articles.push(t);
    }
    Ok(Catalog { panels, truth })
}

/// Season amplitude and phase of a commodity group.
fn group_season(spec: &CatalogSpec, group: u32) -> (f64, f64) {
    let mut rng = stream(spec.seed, group as u64, STREAM_GROUP);
    (
        rng.random_range(0.0..=spec.seasonality),
        rng.random_range(0.0..52.0),
    )
}

fn brand_effect(spec: &CatalogSpec, brand: u32) -> f64 {
    let mut rng = stream(spec.seed, brand as u64, STREAM_BRAND);
    LogNormal::new(0.0, 0.3).expect("valid").sample(&mut rng)
}

/// Generates one article. With `policy` set, discounts come from it instead
/// of the random walk while every other draw is unchanged.
pub fn generate_article(
    spec: &CatalogSpec,
    article_id: u32,
    policy: Option<DiscountPolicy<'_>>,
) -> Result<(ArticlePanel, ArticleTruth)> {
    let key = article_id as u64;
    let mut rs = stream(spec.seed, key, STREAM_STATIC);
    let mut rp = stream(spec.seed, key, STREAM_POLICY);
    let mut rd = stream(spec.seed, key, STREAM_DEMAND);
    let mut rk = stream(spec.seed, key, STREAM_STOCK);

    let n_sizes = rs.random_range(spec.size_count_range[0]..=spec.size_count_range[1]);
    let brand_id = rs.random_range(0..spec.n_brands) as u32;
    let group_id = rs.random_range(0..spec.n_commodity_groups) as u32;
    let base_rate = LogNormal::new(spec.base_rate_mu, spec.base_rate_sigma)
        .map_err(|e| Error::Config(e.to_string()))?
        .sample(&mut rs);
    let elasticity = rs.random_range(spec.elasticity_range[0]..=spec.elasticity_range[1]);
    let trend = rs.random_range(spec.trend_range[0]..=spec.trend_range[1]);
    let cold = rs.random_bool(spec.cold_start_share);
    let launch_week = if cold {
        rs.random_range(spec.n_weeks / 2..spec.n_weeks.max(spec.n_weeks / 2 + 1))
    } else {
        0
    };
    let size_profile = dirichlet(&mut rs, n_sizes, spec.size_concentration);
    let base_price = LogNormal::new(40f64.ln(), 0.5).expect("valid").sample(&mut rs);
    let black_prices: Vec<f64> = (0..spec.n_markets)
        .map(|j| {
            let factor = if j == 0 { 1.0 } else { rs.random_range(0.9..1.2) };
            (base_price * factor * 100.0).round() / 100.0
        })
        .collect();
    let (season_amplitude, season_phase) = group_season(spec, group_id);

    let truth_proto = ArticleTruth {
        article_id,
        size_profile: size_profile.clone(),
        base_rate,
        elasticity,
        launch_week,
        trend,
        season_amplitude,
        season_phase,
        brand_effect: brand_effect(spec, brand_id),
        market_shares: spec.market_shares(),
        elasticity_drift: spec.elasticity_drift,
        demand: Vec::new(),
        expected: Vec::new(),
    };

    let n_weeks = spec.n_weeks - launch_week;
    let walk = discount_walk(spec, &mut rp, launch_week, n_weeks);
    let nb_shape = spec.dispersion;
    let episode_p = spec.stockout_rate * spec.episode_factor;

    let mut weeks = Vec::with_capacity(n_weeks);
    let mut demand = Vec::with_capacity(n_weeks);
    let mut expected = Vec::with_capacity(n_weeks);
    let mut episode_left = 0usize;
    let mut prev_stock: Option<(Vec<u32>, Vec<u32>)> = None;

    for i in 0..n_weeks {
        let week = launch_week + i;
        let discounts: Vec<f64> = (0..spec.n_markets)
            .map(|j| match policy {
                Some(p) => p(week, j),
                None => walk[j][i],
            })
            .collect();

        // demand draws: one gamma and one Poisson per market, then the size split
        let mut dem_sizes = Vec::with_capacity(spec.n_markets);
        let mut dem_tot = Vec::with_capacity(spec.n_markets);
        let mut exp_w = Vec::with_capacity(spec.n_markets);
        for (j, &d) in discounts.iter().enumerate() {
            let lam = truth_proto.expected_demand(week, j, d);
            exp_w.push(lam);
            let g = Gamma::new(nb_shape, lam.max(1e-12) / nb_shape)
                .map_err(|e| Error::Config(e.to_string()))?
                .sample(&mut rd);
            let n = if g > 1e-9 {
                Poisson::new(g).map_err(|e| Error::Config(e.to_string()))?.sample(&mut rd) as u32
            } else {
                0
            };
            dem_tot.push(n);
            dem_sizes.push(multinomial(&mut rd, n, &size_profile));
        }

        // availability
        if episode_left == 0 && i > 0 && rk.random_bool(episode_p) {
            episode_left = rk.random_range(spec.episode_length[0]..=spec.episode_length[1]);
        }
        let in_episode = episode_left > 0;
        episode_left = episode_left.saturating_sub(1);
        let available: Vec<bool> = (0..n_sizes)
            .map(|_| !in_episode && !rk.random_bool(spec.stockout_rate))
            .collect();
        let stock: Vec<u32> = (0..n_sizes)
            .map(|s| {
                let extra = 1 + (rk.random_range(0.0..1.0f64) * 6.0) as u32;
                if available[s] {
                    dem_sizes.iter().map(|d| d[s]).sum::<u32>() + extra
                } else {
                    0
                }
            })
            .collect();

        let markets: Vec<MarketWeek> = (0..spec.n_markets)
            .map(|j| MarketWeek {
                discount: discounts[j],
                black_price: black_prices[j],
                sales_by_size: (0..n_sizes)
                    .map(|s| if available[s] { dem_sizes[j][s] } else { 0 })
                    .collect(),
            })
            .collect();
        let sold: Vec<u32> = (0..n_sizes)
            .map(|s| markets.iter().map(|m| m.sales_by_size[s]).sum())
            .collect();
        let uplift = match &prev_stock {
            None => stock.iter().sum(),
            Some((ps, psold)) => (0..n_sizes)
                .map(|s| stock[s].saturating_sub(ps[s].saturating_sub(psold[s])))
                .sum(),
        };
        prev_stock = Some((stock.clone(), sold));

        weeks.push(PanelWeek {
            stock_by_size: stock,
            stock_uplift: uplift,
            markets,
        });
        demand.push(dem_tot);
        expected.push(exp_w);
    }

    let panel = ArticlePanel {
        article_id,
        brand_id,
        commodity_group_id: group_id,
        first_week: launch_week,
        weeks,
    };
    let truth = ArticleTruth {
        demand,
        expected,
        ..truth_proto
    };
    Ok((panel, truth))
}

/// Discount random walk per market on the 5pp grid, plus sale events.
fn discount_walk(spec: &CatalogSpec, rng: &mut ChaCha8Rng, start: usize, n: usize) -> Vec<Vec<f64>> {
    (0..spec.n_markets)
        .map(|_| {
            let mut level = 0usize;
            (0..n)
                .map(|i| {
                    if rng.random_bool(spec.discount_step_prob) {
                        if rng.random_bool(0.5) {
                            level = (level + 1).min(spec.regular_max_level);
                        } else {
                            level = level.saturating_sub(1);
                        }
                    }
                    let woy = (start + i) % 52;
                    let boost = if spec.sale_event_weeks.contains(&woy) {
                        spec.sale_event_levels
                    } else {
                        0
                    };
                    discount_level((level + boost).min(MAX_DISCOUNT_LEVEL))
                })
                .collect()
        })
        .collect()
}

fn dirichlet(rng: &mut ChaCha8Rng, k: usize, alpha: f64) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("positive concentration");
    let draws: Vec<f64> = (0..k).map(|_| g.sample(rng).max(1e-6)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

/// Multinomial draw by sequential conditional binomials.
pub fn multinomial(rng: &mut impl Rng, n: u32, p: &[f64]) -> Vec<u32> {
    let mut out = vec![0u32; p.len()];
    let mut left = n as u64;
    let mut mass = 1.0f64;
    for (i, &pi) in p.iter().enumerate() {
        if left == 0 {
            break;
        }
        if i + 1 == p.len() {
            out[i] = left as u32;
            break;
        }
        let q = (pi / mass).clamp(0.0, 1.0);
        let draw = Binomial::new(left, q).expect("valid binomial").sample(rng);
        out[i] = draw as u32;
        left -= draw;
        mass -= pi;
        if mass <= 0.0 {
            break;
        }
    }
    out
}

/// Demand histogram and sparsity statistics of a catalog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogSummary {
    /// `(lower, upper, count)` with buckets `{0}`, `[1,2)`, `[2,4)`, …
    pub histogram: Vec<(u64, u64, u64)>,
    pub article_weeks: u64,
    pub zero_share: f64,
    pub mean_weekly_sales: f64,
    pub p50: u64,
    pub p90: u64,
    pub p99: u64,
    pub max: u64,
    /// Hill estimate of the tail index over the top decile of article means;
    /// `None` with fewer than 10 articles.
    pub hill_tail_index: Option<f64>,
}

impl CatalogSummary {
    /// Plot data: one `lower,upper,count` line per bucket, with header.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("lower,upper,count\n");
        for (lo, hi, c) in &self.histogram {
            s.push_str(&format!("{lo},{hi},{c}\n"));
        }
        s
    }
}

fn bucket_of(v: u64) -> usize {
    if v == 0 {
        0
    } else {
        64 - v.leading_zeros() as usize
    }
}

/// Summarises weekly sales summed over markets for every recorded
/// article-week.
pub fn summarize_catalog(panels: &[ArticlePanel]) -> Result<CatalogSummary> {
    if panels.is_empty() {
        return Err(Error::Data("cannot summarise an empty catalog".into()));
    }
    let mut values: Vec<u64> = Vec::new();
    let mut article_means: Vec<f64> = Vec::new();
    for p in panels {
        let start = values.len();
        for w in &p.weeks {
            values.push(w.markets.iter().map(|m| m.total_sales() as u64).sum());
        }
        let n = values.len() - start;
        if n > 0 {
            article_means.push(values[start..].iter().sum::<u64>() as f64 / n as f64);
        }
    }
    if values.is_empty() {
        return Err(Error::Data("catalog has no recorded weeks".into()));
    }
    let max = *values.iter().max().expect("nonempty");
    let mut counts = vec![0u64; bucket_of(max) + 1];
    for &v in &values {
        counts[bucket_of(v)] += 1;
    }
    let histogram = counts
        .iter()
        .enumerate()
        .map(|(b, &c)| {
            if b == 0 {
                (0, 1, c)
            } else {
                (1u64 << (b - 1), 1u64 << b, c)
            }
        })
        .collect();
    let zeros = values.iter().filter(|&&v| v == 0).count();
    let mean = values.iter().sum::<u64>() as f64 / values.len() as f64;
    let mut sorted = values.clone();
    sorted.sort_unstable();
    let q = |p: f64| sorted[((sorted.len() - 1) as f64 * p).round() as usize];

    let hill_tail_index = if article_means.len() >= 10 {
        article_means.sort_by(|a, b| b.total_cmp(a));
        let k = (article_means.len() / 10).max(2);
        let threshold = article_means[k];
        if threshold > 0.0 {
            let s: f64 = article_means[..k].iter().map(|x| (x / threshold).ln()).sum::<f64>() / k as f64;
            (s > 0.0).then(|| 1.0 / s)
        } else {
            None
        }
    } else {
        None
    };

    Ok(CatalogSummary {
        histogram,
        article_weeks: values.len() as u64,
        zero_share: zeros as f64 / values.len() as f64,
        mean_weekly_sales: mean,
        p50: q(0.5),
        p90: q(0.9),
        p99: q(0.99),
        max,
        hill_tail_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec() -> CatalogSpec {
        CatalogSpec {
            n_articles: 30,
            n_markets: 2,
            n_weeks: 60,
            ..CatalogSpec::default()
        }
    }

    #[test]
    fn same_seed_is_identical() {
        let a = generate_catalog(&small_spec()).unwrap();
        let b = generate_catalog(&small_spec()).unwrap();
        assert_eq!(a.panels, b.panels);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn different_seed_differs() {
        let a = generate_catalog(&small_spec()).unwrap();
        let b = generate_catalog(&CatalogSpec {
            seed: 8,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a.panels, b.panels);
    }

    #[test]
    fn censoring_consistency() {
        let cat = generate_catalog(&CatalogSpec {
            stockout_rate: 0.2,
            ..small_spec()
        })
        .unwrap();
        let mut censored = 0;
        for (p, t) in cat.panels.iter().zip(&cat.truth.articles) {
            p.validate().unwrap();
            for (w, dem) in p.weeks.iter().zip(&t.demand) {
                for (j, m) in w.markets.iter().enumerate() {
                    assert!(m.total_sales() <= dem[j]);
                    if w.stock_by_size.iter().all(|&s| s > 0) {
                        assert_eq!(m.total_sales(), dem[j]);
                    } else if m.total_sales() < dem[j] {
                        censored += 1;
                    }
                    for (s, &q) in m.sales_by_size.iter().enumerate() {
                        if w.stock_by_size[s] == 0 {
                            assert_eq!(q, 0);
                        }
                    }
                }
            }
        }
        assert!(censored > 0);
    }

    #[test]
    fn no_stockouts_means_sales_equal_demand() {
        let cat = generate_catalog(&CatalogSpec {
            stockout_rate: 0.0,
            ..small_spec()
        })
        .unwrap();
        for (p, t) in cat.panels.iter().zip(&cat.truth.articles) {
            for (w, dem) in p.weeks.iter().zip(&t.demand) {
                for (j, m) in w.markets.iter().enumerate() {
                    assert_eq!(m.total_sales(), dem[j]);
                }
            }
        }
    }

    #[test]
    fn zero_elasticity_ignores_discount() {
        let spec = CatalogSpec {
            elasticity_range: [0.0, 0.0],
            ..small_spec()
        };
        let (_, t) = generate_article(&spec, 3, None).unwrap();
        for w in 0..spec.n_weeks {
            let base = t.expected_demand(w, 0, 0.0);
            for k in 0..=14 {
                assert_eq!(t.expected_demand(w, 0, discount_level(k)), base);
            }
        }
        // realised demand under two different discount paths is identical
        let lo = |_: usize, _: usize| 0.0;
        let hi = |_: usize, _: usize| 0.7;
        let (_, a) = generate_article(&spec, 3, Some(&lo)).unwrap();
        let (_, b) = generate_article(&spec, 3, Some(&hi)).unwrap();
        assert_eq!(a.demand, b.demand);
    }

    #[test]
    fn discounts_on_grid() {
        let cat = generate_catalog(&small_spec()).unwrap();
        for p in &cat.panels {
            for w in &p.weeks {
                for m in &w.markets {
                    let k = (m.discount * 20.0).round();
                    assert_eq!(discount_level(k as usize), m.discount);
                    assert!(m.discount <= 0.7);
                }
            }
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        for bad in [
            CatalogSpec {
                stockout_rate: 1.5,
                ..small_spec()
            },
            CatalogSpec {
                elasticity_range: [-0.1, 0.2],
                ..small_spec()
            },
            CatalogSpec {
                size_count_range: [4, 2],
                ..small_spec()
            },
            CatalogSpec {
                n_articles: 0,
                ..small_spec()
            },
        ] {
            assert!(matches!(generate_catalog(&bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn cold_start_articles_have_short_history() {
        let spec = CatalogSpec {
            cold_start_share: 1.0,
            n_weeks: 100,
            ..small_spec()
        };
        let cat = generate_catalog(&spec).unwrap();
        assert!(cat.panels.iter().all(|p| p.first_week >= 50 && p.weeks.len() <= 50));
    }

    fn panel_with_sales(sales: &[u32]) -> ArticlePanel {
        ArticlePanel {
            article_id: 0,
            brand_id: 0,
            commodity_group_id: 0,
            first_week: 0,
            weeks: sales
                .iter()
                .map(|&s| PanelWeek {
                    stock_by_size: vec![10],
                    stock_uplift: 0,
                    markets: vec![MarketWeek {
                        discount: 0.0,
                        black_price: 10.0,
                        sales_by_size: vec![s],
                    }],
                })
                .collect(),
        }
    }

    #[test]
    fn summary_sparsity() {
        let s = summarize_catalog(&[panel_with_sales(&[1; 20])]).unwrap();
        assert_eq!(s.zero_share, 0.0);
        let s = summarize_catalog(&[panel_with_sales(&[0; 20])]).unwrap();
        assert_eq!(s.zero_share, 1.0);
        assert!(summarize_catalog(&[]).is_err());
    }

    #[test]
    fn long_tail_histogram_peaks_in_lowest_bucket() {
        let spec = CatalogSpec {
            n_articles: 300,
            base_rate_mu: 0.0,
            base_rate_sigma: 1.5,
            ..small_spec()
        };
        let cat = generate_catalog(&spec).unwrap();
        let s = summarize_catalog(&cat.panels).unwrap();
        let mode = s
            .histogram
            .iter()
            .enumerate()
            .max_by_key(|(_, (_, _, c))| *c)
            .unwrap()
            .0;
        assert_eq!(mode, 0);
        // right-skewed: mean above median
        assert!(s.mean_weekly_sales > s.p50 as f64);
        assert!(s.max > 8 * s.p90.max(1));
        assert!(s.histogram_csv().starts_with("lower,upper,count\n0,1,"));
    }

    proptest! {
        #[test]
        fn expected_demand_monotone_in_discount(
            article in 0u32..50,
            week in 0usize..60,
            a in 0usize..=14,
            b in 0usize..=14,
        ) {
            let spec = small_spec();
            let (_, t) = generate_article(&spec, article, None).unwrap();
            let (lo, hi) = (a.min(b), a.max(b));
            for j in 0..spec.n_markets {
                prop_assert!(
                    t.expected_demand(week, j, discount_level(lo))
                        <= t.expected_demand(week, j, discount_level(hi))
                );
            }
        }

        #[test]
        fn multinomial_preserves_total(n in 0u32..500, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = [0.1, 0.2, 0.4, 0.2, 0.1];
            let draw = multinomial(&mut rng, n, &p);
            prop_assert_eq!(draw.iter().sum::<u32>(), n);
        }
    }
}
