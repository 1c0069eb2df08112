//! Sales-to-demand translation.
//!
//! Each article gets a size profile estimated from weeks where every size was
//! in stock. When some sizes are missing, total demand is the multinomial
//! maximum-likelihood estimate restricted to the observed cells: observed
//! sales divided by the probability mass of the available sizes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::ArticlePanel;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImputationConfig {
    /// Additive smoothing per size before normalising.
    pub smoothing: f64,
    /// Weeks whose available sizes carry less probability mass than this are
    /// treated as fully censored.
    pub min_observed_mass: f64,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        ImputationConfig {
            smoothing: 0.5,
            min_observed_mass: 0.2,
        }
    }
}

impl ImputationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing >= 0.0 && self.smoothing.is_finite()) {
            return Err(Error::Config("imputation.smoothing must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.min_observed_mass) {
            return Err(Error::Config("imputation.min_observed_mass must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileSource {
    Article,
    CommodityGroup,
    Global,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeProfile {
    pub article_id: u32,
    pub p: Vec<f64>,
    pub source: ProfileSource,
}

impl SizeProfile {
    fn from_totals(article_id: u32, totals: &[f64], alpha: f64, source: ProfileSource) -> Self {
        let smoothed: Vec<f64> = totals.iter().map(|t| t + alpha).collect();
        let sum: f64 = smoothed.iter().sum();
        let p = if sum > 0.0 {
            smoothed.iter().map(|v| v / sum).collect()
        } else {
            vec![1.0 / totals.len() as f64; totals.len()]
        };
        SizeProfile { article_id, p, source }
    }
}

/// Per-size sales totals over fully stocked weeks, summed over markets.
/// Returns `None` if no fully stocked week had any sales.
fn full_availability_totals(panel: &ArticlePanel) -> Option<Vec<f64>> {
    let k = panel.n_sizes();
    let mut totals = vec![0.0; k];
    let mut any = false;
    for w in &panel.weeks {
        if w.stock_by_size.iter().all(|&s| s > 0) {
            for m in &w.markets {
                for (t, &s) in totals.iter_mut().zip(&m.sales_by_size) {
                    *t += s as f64;
                    any |= s > 0;
                }
            }
        }
    }
    any.then_some(totals)
}

pub fn fit_size_profile(panel: &ArticlePanel, smoothing: f64) -> Result<SizeProfile> {
    let totals = full_availability_totals(panel).ok_or(Error::NoFullAvailability {
        article_id: panel.article_id,
    })?;
    Ok(SizeProfile::from_totals(panel.article_id, &totals, smoothing, ProfileSource::Article))
}

/// Fits one profile per panel, falling back to the commodity-group pool, then
/// the catalog-wide pool (both restricted to articles with the same size
/// count), then uniform.
pub fn fit_profiles(panels: &[ArticlePanel], cfg: &ImputationConfig) -> Vec<SizeProfile> {
    let mut group: BTreeMap<(u32, usize), Vec<f64>> = BTreeMap::new();
    let mut global: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let own: Vec<Option<Vec<f64>>> = panels.iter().map(full_availability_totals).collect();
    for (p, totals) in panels.iter().zip(&own) {
        if let Some(t) = totals {
            let k = t.len();
            for acc in [
                group.entry((p.commodity_group_id, k)).or_insert_with(|| vec![0.0; k]),
                global.entry(k).or_insert_with(|| vec![0.0; k]),
            ] {
                acc.iter_mut().zip(t).for_each(|(a, v)| *a += v);
            }
        }
    }
    panels
        .iter()
        .zip(own)
        .map(|(p, totals)| {
            let k = p.n_sizes();
            let a = cfg.smoothing;
            if let Some(t) = totals {
                SizeProfile::from_totals(p.article_id, &t, a, ProfileSource::Article)
            } else if let Some(t) = group.get(&(p.commodity_group_id, k)) {
                SizeProfile::from_totals(p.article_id, t, a, ProfileSource::CommodityGroup)
            } else if let Some(t) = global.get(&k) {
                SizeProfile::from_totals(p.article_id, t, a, ProfileSource::Global)
            } else {
                SizeProfile::from_totals(p.article_id, &vec![0.0; k], 0.0, ProfileSource::Uniform)
            }
        })
        .collect()
}

/// Demand inferred for one market-week.
#[derive(Clone, Debug, PartialEq)]
pub struct WeekEstimate {
    /// `None` when too little of the size distribution was observable.
    pub total: Option<f64>,
    pub by_size: Vec<f64>,
    pub imputed: bool,
}

pub fn impute_week(
    sales_by_size: &[u32],
    available: &[bool],
    profile: &SizeProfile,
    min_observed_mass: f64,
) -> Result<WeekEstimate> {
    let k = profile.p.len();
    if sales_by_size.len() != k || available.len() != k {
        return Err(Error::Data(format!(
            "article {}: profile has {k} sizes, week has {} sales and {} availability entries",
            profile.article_id,
            sales_by_size.len(),
            available.len()
        )));
    }
    let observed: u32 = sales_by_size.iter().sum();
    if available.iter().all(|&a| a) {
        return Ok(WeekEstimate {
            total: Some(observed as f64),
            by_size: sales_by_size.iter().map(|&s| s as f64).collect(),
            imputed: false,
        });
    }
    let mass: f64 = profile.p.iter().zip(available).filter(|(_, &a)| a).map(|(p, _)| p).sum();
    if !available.iter().any(|&a| a) || mass < min_observed_mass || mass <= 0.0 {
        return Ok(WeekEstimate {
            total: None,
            by_size: vec![0.0; k],
            imputed: true,
        });
    }
    let n_hat = (observed as f64 / mass).max(observed as f64);
    let by_size = (0..k)
        .map(|s| {
            if available[s] {
                sales_by_size[s] as f64
            } else {
                profile.p[s] * n_hat
            }
        })
        .collect();
    Ok(WeekEstimate {
        total: Some(n_hat),
        by_size,
        imputed: true,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputedWeek {
    pub article_id: u32,
    pub market_id: u32,
    pub week: usize,
    /// `None` for fully censored weeks (masked downstream).
    pub demand_estimate: Option<f64>,
    pub observed_sales: u32,
    pub imputed_flag: bool,
    pub excluded_from_eval: bool,
}

/// A panel together with its inferred demand, `demand[week][market]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputedPanel {
    pub panel: ArticlePanel,
    pub demand: Vec<Vec<ImputedWeek>>,
}

impl ImputedPanel {
    pub fn demand_at(&self, calendar_week: usize, market: usize) -> Option<&ImputedWeek> {
        calendar_week
            .checked_sub(self.panel.first_week)
            .and_then(|i| self.demand.get(i))
            .and_then(|w| w.get(market))
    }

    /// Panel whose demand equals its sales (no stockouts assumed), used for
    /// articles read without a separate imputation pass.
    pub fn from_sales(panel: ArticlePanel) -> Self {
        let demand = panel
            .weeks
            .iter()
            .enumerate()
            .map(|(i, w)| {
                w.markets
                    .iter()
                    .enumerate()
                    .map(|(j, m)| ImputedWeek {
                        article_id: panel.article_id,
                        market_id: j as u32,
                        week: panel.first_week + i,
                        demand_estimate: Some(m.total_sales() as f64),
                        observed_sales: m.total_sales(),
                        imputed_flag: false,
                        excluded_from_eval: false,
                    })
                    .collect()
            })
            .collect();
        ImputedPanel { panel, demand }
    }
}

pub fn impute_panel(panel: &ArticlePanel, profile: &SizeProfile, cfg: &ImputationConfig) -> Result<ImputedPanel> {
    let mut demand = Vec::with_capacity(panel.weeks.len());
    let mut failures = Vec::new();
    for (i, w) in panel.weeks.iter().enumerate() {
        let week = panel.first_week + i;
        let available = w.availability();
        let mut row = Vec::with_capacity(w.markets.len());
        for (j, m) in w.markets.iter().enumerate() {
            match impute_week(&m.sales_by_size, &available, profile, cfg.min_observed_mass) {
                Ok(est) => row.push(ImputedWeek {
                    article_id: panel.article_id,
                    market_id: j as u32,
                    week,
                    demand_estimate: est.total,
                    observed_sales: m.total_sales(),
                    imputed_flag: est.imputed,
                    excluded_from_eval: est.imputed,
                }),
                Err(e) => failures.push(format!("week {week} market {j}: {e}")),
            }
        }
        demand.push(row);
    }
    if !failures.is_empty() {
        return Err(Error::Data(format!(
            "article {}: {} week(s) failed: {}",
            panel.article_id,
            failures.len(),
            failures.join("; ")
        )));
    }
    Ok(ImputedPanel {
        panel: panel.clone(),
        demand,
    })
}

/// Fits profiles and imputes every panel.
pub fn impute_catalog(panels: &[ArticlePanel], cfg: &ImputationConfig) -> Result<Vec<ImputedPanel>> {
    cfg.validate()?;
    let profiles = fit_profiles(panels, cfg);
    panels
        .iter()
        .zip(&profiles)
        .map(|(p, prof)| impute_panel(p, prof, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{MarketWeek, PanelWeek};
    use proptest::prelude::*;

    fn profile(p: &[f64]) -> SizeProfile {
        SizeProfile {
            article_id: 0,
            p: p.to_vec(),
            source: ProfileSource::Article,
        }
    }

    fn panel(weeks: &[(&[u32], &[u32])]) -> ArticlePanel {
        ArticlePanel {
            article_id: 1,
            brand_id: 0,
            commodity_group_id: 0,
            first_week: 0,
            weeks: weeks
                .iter()
                .map(|(sales, stock)| PanelWeek {
                    stock_by_size: stock.to_vec(),
                    stock_uplift: 0,
                    markets: vec![MarketWeek {
                        discount: 0.0,
                        black_price: 20.0,
                        sales_by_size: sales.to_vec(),
                    }],
                })
                .collect(),
        }
    }

    #[test]
    fn profile_from_totals_with_and_without_smoothing() {
        let p = panel(&[(&[1, 2, 4, 2, 1], &[5, 5, 5, 5, 5])]);
        let raw = fit_size_profile(&p, 0.0).unwrap();
        for (a, b) in raw.p.iter().zip([0.1, 0.2, 0.4, 0.2, 0.1]) {
            assert!((a - b).abs() < 1e-15);
        }
        let smooth = fit_size_profile(&p, 0.5).unwrap();
        let expect = [1.5 / 12.5, 2.5 / 12.5, 4.5 / 12.5, 2.5 / 12.5, 1.5 / 12.5];
        for (a, b) in smooth.p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((smooth.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_and_uniform_profiles() {
        let p = panel(&[(&[3], &[1])]);
        assert_eq!(fit_size_profile(&p, 0.5).unwrap().p, vec![1.0]);
        let p = panel(&[(&[2, 2, 2, 2], &[1, 1, 1, 1])]);
        assert_eq!(fit_size_profile(&p, 0.5).unwrap().p, vec![0.25; 4]);
    }

    #[test]
    fn profile_ignores_partially_stocked_weeks() {
        let p = panel(&[(&[1, 1], &[1, 1]), (&[9, 0], &[9, 0])]);
        assert_eq!(fit_size_profile(&p, 0.0).unwrap().p, vec![0.5, 0.5]);
    }

    #[test]
    fn no_full_week_is_an_error_and_falls_back() {
        let lonely = panel(&[(&[1, 0], &[1, 0])]);
        assert!(matches!(
            fit_size_profile(&lonely, 0.5),
            Err(Error::NoFullAvailability { article_id: 1 })
        ));
        let donor = ArticlePanel {
            article_id: 2,
            ..panel(&[(&[3, 1], &[4, 4])])
        };
        let other_group = ArticlePanel {
            article_id: 3,
            commodity_group_id: 9,
            ..lonely.clone()
        };
        let profs = fit_profiles(&[lonely, donor, other_group], &ImputationConfig::default());
        assert_eq!(profs[0].source, ProfileSource::CommodityGroup);
        assert_eq!(profs[0].p, vec![3.5 / 5.0, 1.5 / 5.0]);
        assert_eq!(profs[1].source, ProfileSource::Article);
        assert_eq!(profs[2].source, ProfileSource::Global);
    }

    #[test]
    fn full_availability_returns_sales() {
        let est = impute_week(&[1, 2, 4], &[true; 3], &profile(&[0.2, 0.3, 0.5]), 0.2).unwrap();
        assert_eq!(est.total, Some(7.0));
        assert!(!est.imputed);
    }

    #[test]
    fn missing_sizes_are_inferred() {
        let p = profile(&[0.1, 0.2, 0.4, 0.2, 0.1]);
        let est = impute_week(&[1, 2, 4, 0, 0], &[true, true, true, false, false], &p, 0.2).unwrap();
        let n = est.total.unwrap();
        assert!((n - 10.0).abs() < 1e-12);
        assert!((est.by_size[3] - 2.0).abs() < 1e-12);
        assert!((est.by_size[4] - 1.0).abs() < 1e-12);
        assert!(est.imputed);
    }

    #[test]
    fn zero_observed_sales_give_zero() {
        let p = profile(&[0.5, 0.5]);
        let est = impute_week(&[0, 0], &[true, false], &p, 0.2).unwrap();
        assert_eq!(est.total, Some(0.0));
    }

    #[test]
    fn censored_weeks_are_undefined() {
        let p = profile(&[0.9, 0.1]);
        assert_eq!(impute_week(&[0, 0], &[false, false], &p, 0.2).unwrap().total, None);
        // only 10% of mass observed
        assert_eq!(impute_week(&[0, 1], &[false, true], &p, 0.2).unwrap().total, None);
    }

    #[test]
    fn mismatched_profile_is_rejected() {
        let p = profile(&[0.5, 0.5]);
        assert!(matches!(impute_week(&[1], &[true], &p, 0.2), Err(Error::Data(_))));
    }

    #[test]
    fn panel_flags_propagate() {
        let p = panel(&[(&[2, 2], &[5, 5]), (&[2, 0], &[5, 0]), (&[0, 0], &[0, 0])]);
        let prof = fit_size_profile(&p, 0.0).unwrap();
        let imp = impute_panel(&p, &prof, &ImputationConfig::default()).unwrap();
        let flags: Vec<(Option<f64>, bool, bool)> = imp
            .demand
            .iter()
            .map(|w| (w[0].demand_estimate, w[0].imputed_flag, w[0].excluded_from_eval))
            .collect();
        assert_eq!(
            flags,
            vec![(Some(4.0), false, false), (Some(4.0), true, true), (None, true, true)]
        );
    }

    proptest! {
        #[test]
        fn estimate_never_below_observed(
            sales in proptest::collection::vec(0u32..50, 4),
            avail in proptest::collection::vec(any::<bool>(), 4),
            raw in proptest::collection::vec(0.01f64..1.0, 4),
        ) {
            let sum: f64 = raw.iter().sum();
            let p = profile(&raw.iter().map(|r| r / sum).collect::<Vec<_>>());
            let sales: Vec<u32> = sales.iter().zip(&avail).map(|(&s, &a)| if a { s } else { 0 }).collect();
            let est = impute_week(&sales, &avail, &p, 0.0).unwrap();
            if let Some(n) = est.total {
                prop_assert!(n >= sales.iter().sum::<u32>() as f64);
                if avail.iter().all(|&a| a) {
                    prop_assert_eq!(n, sales.iter().sum::<u32>() as f64);
                }
            }
        }
    }
}
