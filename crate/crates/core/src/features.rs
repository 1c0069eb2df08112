//! Encoder and decoder inputs assembled from imputed panels.
//!
//! Inputs are stored time-major: encoder `[window × v]`, decoder
//! `[horizon × v']`, one row per week. Row layout (column layout of a week
//! vector) is fixed by [`CovariateSchema`]:
//!
//! encoder, per market `j`: `demand_j, discount_j, black_price_j, sales_j`;
//! then `stock, stock_uplift`; then `pos_0 .. pos_{e_dim-1}`.
//!
//! decoder, per market `j`: `last_discount_j, last_demand_j, black_price_j`;
//! then `pos_0 .. pos_{e_dim-1}` of the future week.
//!
//! Demand, black price, sales, stock and stock uplift enter as `log(1 + x)`.
//! Brand and commodity group are looked up in embedding tables by the model
//! and only feed the demand head.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{ArticlePanel, PanelWeek};
use crate::error::{Error, Result};
use crate::imputation::ImputedPanel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    StaticGlobal,
    DynamicGlobal,
    StaticInternational,
    DynamicInternational,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueType {
    Categorical,
    Numeric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transformation {
    None,
    Logarithm,
    Embedded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub category: Category,
    pub value_type: ValueType,
    pub transformation: Transformation,
    pub future_available: bool,
}

impl Covariate {
    fn new(name: &str, category: Category, value_type: ValueType, transformation: Transformation, future: bool) -> Self {
        Covariate {
            name: name.into(),
            category,
            value_type,
            transformation,
            future_available: future,
        }
    }
}

/// Single source of the input layout; persisted next to the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchema {
    pub n_markets: usize,
    pub window: usize,
    pub e_dim: usize,
    pub t_dim: usize,
    pub embedding_dim: usize,
    /// Vocabulary sizes including the reserved unknown index (the last one).
    pub brand_vocab: usize,
    pub group_vocab: usize,
    pub covariates: Vec<Covariate>,
    pub encoder_rows: Vec<String>,
    pub decoder_rows: Vec<String>,
}

impl CovariateSchema {
    pub fn new(
        n_markets: usize,
        window: usize,
        e_dim: usize,
        n_brands: usize,
        n_groups: usize,
    ) -> Result<Self> {
        if n_markets == 0 || window == 0 {
            return Err(Error::Config("schema needs at least one market and one history week".into()));
        }
        if e_dim % 2 != 0 || e_dim == 0 {
            return Err(Error::Config(format!("positional encoding e_dim must be even and positive, got {e_dim}")));
        }
        use Category::*;
        use Transformation as Tr;
        use ValueType::*;
        let covariates = vec![
            Covariate::new("brand", StaticGlobal, Categorical, Tr::Embedded, true),
            Covariate::new("commodity_group", StaticGlobal, Categorical, Tr::Embedded, true),
            Covariate::new("discount", DynamicInternational, Numeric, Tr::None, false),
            Covariate::new("black_price", StaticInternational, Numeric, Tr::Logarithm, true),
            Covariate::new("sales", DynamicInternational, Numeric, Tr::Logarithm, false),
            Covariate::new("stock", DynamicGlobal, Numeric, Tr::Logarithm, false),
            Covariate::new("stock_uplift", DynamicGlobal, Numeric, Tr::Logarithm, false),
            Covariate::new("demand", DynamicInternational, Numeric, Tr::Logarithm, false),
            Covariate::new("position", DynamicGlobal, Numeric, Tr::None, true),
        ];
        let mut encoder_rows = Vec::new();
        let mut decoder_rows = Vec::new();
        for j in 0..n_markets {
            for n in ["demand", "discount", "black_price", "sales"] {
                encoder_rows.push(format!("{n}_{j}"));
            }
            for n in ["last_discount", "last_demand", "black_price"] {
                decoder_rows.push(format!("{n}_{j}"));
            }
        }
        encoder_rows.push("stock".into());
        encoder_rows.push("stock_uplift".into());
        for m in 0..e_dim {
            encoder_rows.push(format!("pos_{m}"));
            decoder_rows.push(format!("pos_{m}"));
        }
        Ok(CovariateSchema {
            n_markets,
            window,
            e_dim,
            t_dim: 52,
            embedding_dim: 10,
            brand_vocab: n_brands + 1,
            group_vocab: n_groups + 1,
            covariates,
            encoder_rows,
            decoder_rows,
        })
    }

    /// Encoder row count `v`, which is also the model width.
    pub fn encoder_width(&self) -> usize {
        self.encoder_rows.len()
    }

    pub fn decoder_width(&self) -> usize {
        self.decoder_rows.len()
    }

    /// Checks that the encoder width can be split into `heads` heads of `d_k`.
    pub fn check_heads(&self, heads: usize, d_k: usize) -> Result<()> {
        let v = self.encoder_width();
        if heads * d_k != v {
            let options: Vec<String> = (1..=v)
                .filter(|h| v % h == 0)
                .map(|h| format!("{h}x{}", v / h))
                .collect();
            return Err(Error::Schema(format!(
                "{v} encoder rows need heads*d_k = {v}, got {heads}*{d_k}; valid heads x d_k: {}",
                options.join(", ")
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serialises");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn brand_index(&self, brand: u32) -> usize {
        (brand as usize).min(self.brand_vocab - 1)
    }

    pub fn group_index(&self, group: u32) -> usize {
        (group as usize).min(self.group_vocab - 1)
    }

    fn check_panel(&self, panel: &ArticlePanel) -> Result<()> {
        if panel.n_markets() != self.n_markets && !panel.weeks.is_empty() {
            return Err(Error::Data(format!(
                "article {}: covariate `discount` expects {} markets, panel has {}",
                panel.article_id,
                self.n_markets,
                panel.n_markets()
            )));
        }
        Ok(())
    }
}

/// `log(1 + x)` for nonnegative inputs.
pub fn log_transform(x: f64, name: &str) -> Result<f64> {
    if x < 0.0 || x.is_nan() {
        return Err(Error::Data(format!("covariate `{name}`: cannot log-transform {x}")));
    }
    Ok(x.ln_1p())
}

/// Transformed numeric covariates of one week without positional rows, in
/// encoder row order. `demand` is the imputed demand per market (`None` for
/// censored weeks, encoded as 0).
pub fn transform_covariates(week: &PanelWeek, demand: &[Option<f64>]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(4 * week.markets.len() + 2);
    for (m, d) in week.markets.iter().zip(demand) {
        out.push(log_transform(d.unwrap_or(0.0), "demand")?);
        out.push(m.discount);
        out.push(log_transform(m.black_price, "black_price")?);
        out.push(log_transform(m.total_sales() as f64, "sales")?);
    }
    out.push(log_transform(week.total_stock() as f64, "stock")?);
    out.push(log_transform(week.stock_uplift as f64, "stock_uplift")?);
    Ok(out)
}

pub fn positional_encoding(n: usize, e_dim: usize, t_dim: usize) -> Result<Vec<f64>> {
    if e_dim % 2 != 0 {
        return Err(Error::Config(format!("positional encoding e_dim must be even, got {e_dim}")));
    }
    if t_dim == 0 {
        return Err(Error::Config("positional encoding t_dim must be positive".into()));
    }
    let denom = (e_dim * t_dim) as f64;
    Ok((0..e_dim)
        .map(|m| {
            let f = (2 * m + 1) as f64 / denom;
            let p = 2.0 * std::f64::consts::PI * f * n as f64;
            if m % 2 == 0 {
                p.sin()
            } else {
                p.cos()
            }
        })
        .collect())
}

/// Mask of the `window` weeks ending at calendar week `origin` (inclusive):
/// `true` for padding (before the article's first week) and zero-stock weeks.
pub fn build_masks(panel: &ArticlePanel, origin: usize, window: usize) -> Vec<bool> {
    (0..window)
        .map(|i| {
            let week = (origin + 1 + i).checked_sub(window);
            match week.and_then(|w| panel.week(w)) {
                Some(w) => w.total_stock() == 0,
                None => true,
            }
        })
        .collect()
}

/// One forecast problem: history up to `origin`, horizon weeks after it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub article_id: u32,
    /// Calendar week of the last history week.
    pub origin: usize,
    /// `[window × v]`, row `i` is calendar week `origin + 1 - window + i`.
    pub encoder: Tensor<T>,
    /// `true` where the week is hidden from attention.
    pub mask: Vec<bool>,
    /// `[horizon × v']`, row `k` is calendar week `origin + 1 + k`.
    pub decoder: Tensor<T>,
    /// Discount per future week and market, fed straight to the demand head.
    pub discounts: Vec<Vec<f64>>,
    /// `log(1 + demand)` targets per future week and market; `None` where the
    /// week is unknown, censored, or out of stock.
    pub targets: Vec<Vec<Option<T>>>,
    /// Whether the target was imputed rather than observed.
    pub imputed: Vec<Vec<bool>>,
    pub brand: usize,
    pub group: usize,
    pub black_prices: Vec<f64>,
}

impl<T: Scalar> Sample<T> {
    pub fn horizon(&self) -> usize {
        self.discounts.len()
    }

    pub fn n_markets(&self) -> usize {
        self.black_prices.len()
    }

    pub fn fully_masked(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }
}

/// Last defined demand (log scale) and last discount per market at `origin`.
fn last_observation(ip: &ImputedPanel, origin: usize) -> (Vec<f64>, Vec<f64>) {
    let demand = last_demand(ip, origin)
        .into_iter()
        .map(|d| d.map_or(0.0, f64::ln_1p))
        .collect();
    let discount = match ip.panel.week(origin) {
        Some(w) => w.markets.iter().map(|m| m.discount).collect(),
        None => vec![0.0; ip.panel.n_markets()],
    };
    (demand, discount)
}

/// Last defined demand per market at or before `origin` in demand units, or
/// `None` when there is no visible history.
pub fn last_demand(ip: &ImputedPanel, origin: usize) -> Vec<Option<f64>> {
    (0..ip.panel.n_markets())
        .map(|j| {
            (ip.panel.first_week..=origin.min(ip.panel.end_week().saturating_sub(1)))
                .rev()
                .find_map(|w| {
                    let pw = ip.panel.week(w)?;
                    (pw.total_stock() > 0)
                        .then(|| ip.demand_at(w, j).and_then(|d| d.demand_estimate))
                        .flatten()
                })
        })
        .collect()
}

/// Builds the sample for forecast origin `origin` covering `horizon` weeks.
/// Future discounts default to the recorded ones, falling back to the last
/// observed discount beyond the panel end.
pub fn build_sample<T: Scalar>(
    ip: &ImputedPanel,
    schema: &CovariateSchema,
    origin: usize,
    horizon: usize,
) -> Result<Sample<T>> {
    let panel = &ip.panel;
    schema.check_panel(panel)?;
    let c = schema.n_markets;
    let window = schema.window;
    let v = schema.encoder_width();
    let mut mask = build_masks(panel, origin, window);

    let mut enc = vec![T::zero(); window * v];
    for i in 0..window {
        let Some(week) = (origin + 1 + i).checked_sub(window) else {
            continue;
        };
        let row = &mut enc[i * v..(i + 1) * v];
        if let Some(pw) = panel.week(week) {
            let demand: Vec<Option<f64>> = (0..c)
                .map(|j| ip.demand_at(week, j).and_then(|d| d.demand_estimate))
                .collect();
            if demand.iter().any(Option::is_none) {
                mask[i] = true;
            }
            for (r, x) in row.iter_mut().zip(transform_covariates(pw, &demand)?) {
                *r = T::lit(x);
            }
        }
        // padding rows stay zero, including their positional rows
        if panel.week(week).is_some() {
            let pos = positional_encoding(week, schema.e_dim, schema.t_dim)?;
            for (r, x) in row[4 * c + 2..].iter_mut().zip(pos) {
                *r = T::lit(x);
            }
        }
    }

    let (last_q, last_d) = last_observation(ip, origin);
    let black_prices: Vec<f64> = match panel.weeks.first() {
        Some(w) => w.markets.iter().map(|m| m.black_price).collect(),
        None => vec![1.0; c],
    };
    let vd = schema.decoder_width();
    let mut dec = vec![T::zero(); horizon * vd];
    let mut discounts = Vec::with_capacity(horizon);
    let mut targets = Vec::with_capacity(horizon);
    let mut imputed = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let week = origin + 1 + k;
        let row = &mut dec[k * vd..(k + 1) * vd];
        for j in 0..c {
            row[3 * j] = T::lit(last_d[j]);
            row[3 * j + 1] = T::lit(last_q[j]);
            row[3 * j + 2] = T::lit(log_transform(black_prices[j], "black_price")?);
        }
        for (r, x) in row[3 * c..].iter_mut().zip(positional_encoding(week, schema.e_dim, schema.t_dim)?) {
            *r = T::lit(x);
        }
        let pw = panel.week(week);
        discounts.push(
            (0..c)
                .map(|j| pw.map_or(last_d[j], |w| w.markets[j].discount))
                .collect(),
        );
        let stocked = pw.is_some_and(|w| w.total_stock() > 0);
        targets.push(
            (0..c)
                .map(|j| {
                    ip.demand_at(week, j)
                        .and_then(|d| d.demand_estimate)
                        .filter(|_| stocked)
                        .map(|d| T::lit(d.ln_1p()))
                })
                .collect(),
        );
        imputed.push(
            (0..c)
                .map(|j| ip.demand_at(week, j).is_some_and(|d| d.imputed_flag))
                .collect(),
        );
    }

    Ok(Sample {
        article_id: panel.article_id,
        origin,
        encoder: Tensor::new(vec![window, v], enc)?,
        mask,
        decoder: Tensor::new(vec![horizon.max(1), vd], if horizon == 0 { vec![T::zero(); vd] } else { dec })?,
        discounts,
        targets,
        imputed,
        brand: schema.brand_index(panel.brand_id),
        group: schema.group_index(panel.commodity_group_id),
        black_prices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::MarketWeek;
    use proptest::prelude::*;

    fn panel(first_week: usize, stock: &[u32]) -> ImputedPanel {
        ImputedPanel::from_sales(ArticlePanel {
            article_id: 4,
            brand_id: 2,
            commodity_group_id: 99,
            first_week,
            weeks: stock
                .iter()
                .enumerate()
                .map(|(i, &s)| PanelWeek {
                    stock_by_size: vec![s],
                    stock_uplift: 1,
                    markets: vec![MarketWeek {
                        discount: 0.05 * (i % 3) as f64,
                        black_price: 100.0,
                        sales_by_size: vec![(i as u32 % 4).min(s)],
                    }],
                })
                .collect(),
        })
    }

    fn schema() -> CovariateSchema {
        CovariateSchema::new(1, 52, 2, 5, 5).unwrap()
    }

    #[test]
    fn transforms() {
        assert!((log_transform(100.0, "black_price").unwrap() - 4.6151205168412594).abs() < 1e-12);
        assert_eq!(log_transform(0.0, "stock").unwrap(), 0.0);
        assert!(matches!(log_transform(-1.0, "stock"), Err(Error::Data(_))));
        let p = panel(0, &[5]);
        let row = transform_covariates(&p.panel.weeks[0], &[Some(0.0)]).unwrap();
        assert_eq!(row[1], 0.0);
        let mut w = p.panel.weeks[0].clone();
        w.markets[0].discount = 0.3;
        assert_eq!(transform_covariates(&w, &[None]).unwrap()[1], 0.3);
    }

    #[test]
    fn positional_values() {
        assert_eq!(positional_encoding(0, 6, 52).unwrap(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let p = positional_encoding(52, 4, 52).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15);
        // component m=1 is cos(2π·3/208·52) = cos(3π/2)
        assert!(p[1].abs() < 1e-12);
        assert!(matches!(positional_encoding(3, 3, 52), Err(Error::Config(_))));
    }

    #[test]
    fn masks() {
        let full = panel(0, &[3; 52]);
        assert!(build_masks(&full.panel, 51, 52).iter().all(|&m| !m));
        let short = panel(0, &[3; 10]);
        let m = build_masks(&short.panel, 9, 52);
        assert!(m[..42].iter().all(|&x| x));
        assert!(m[42..].iter().all(|&x| !x));
        let mut stock = [3u32; 52];
        stock[5] = 0;
        stock[20] = 0;
        stock[33] = 0;
        let gaps = panel(0, &stock);
        let m = build_masks(&gaps.panel, 51, 52);
        let idx: Vec<usize> = m.iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| i).collect();
        assert_eq!(idx, vec![5, 20, 33]);
    }

    #[test]
    fn sample_shapes_and_decoder_constants() {
        let p = panel(0, &[3; 60]);
        let s: Sample<f64> = build_sample(&p, &schema(), 51, 26).unwrap();
        assert_eq!(s.encoder.shape(), &[52, 8]);
        assert_eq!(s.decoder.shape(), &[26, 5]);
        let d0 = s.decoder.at(0, 0);
        let q0 = s.decoder.at(0, 1);
        for k in 0..26 {
            assert_eq!(s.decoder.at(k, 0), d0);
            assert_eq!(s.decoder.at(k, 1), q0);
        }
        // weeks 52..60 are known, the rest unknown
        assert!(s.targets[7][0].is_some());
        assert!(s.targets[8][0].is_none());
        // unknown brand maps to the reserved index
        assert_eq!(s.brand, 2);
        assert_eq!(s.group, 5);
    }

    #[test]
    fn cold_start_is_fully_masked() {
        let p = panel(100, &[3; 5]);
        let s: Sample<f64> = build_sample(&p, &schema(), 99, 26).unwrap();
        assert!(s.fully_masked());
        assert!(s.encoder.data().iter().all(|&x| x == 0.0));
        assert_eq!(s.decoder.shape(), &[26, 5]);
    }

    #[test]
    fn decoder_carries_no_history_only_covariates() {
        let sch = schema();
        for row in &sch.decoder_rows {
            assert!(!row.starts_with("sales") && !row.starts_with("stock") && !row.starts_with("discount"));
        }
        // changing future sales or stock leaves the decoder unchanged
        let p = panel(0, &[3; 80]);
        let mut q = p.clone();
        for w in &mut q.panel.weeks[52..] {
            w.stock_by_size = vec![50];
            w.stock_uplift = 7;
        }
        let a: Sample<f64> = build_sample(&p, &sch, 51, 26).unwrap();
        let b: Sample<f64> = build_sample(&q, &sch, 51, 26).unwrap();
        assert_eq!(a.decoder, b.decoder);
        assert_eq!(a.encoder, b.encoder);
    }

    #[test]
    fn heads_check_reports_options() {
        let sch = schema();
        sch.check_heads(2, 4).unwrap();
        let err = sch.check_heads(3, 3).unwrap_err().to_string();
        assert!(err.contains("2x4"), "{err}");
    }

    #[test]
    fn market_mismatch_names_covariate() {
        let sch = CovariateSchema::new(3, 52, 2, 5, 5).unwrap();
        let err = build_sample::<f64>(&panel(0, &[1; 60]), &sch, 51, 5).unwrap_err();
        assert!(err.to_string().contains("discount"));
    }

    #[test]
    fn schema_hash_is_stable_and_sensitive() {
        let a = schema();
        assert_eq!(a.hash(), CovariateSchema::from_json(&a.to_json()).unwrap().hash());
        assert_ne!(a.hash(), CovariateSchema::new(1, 26, 2, 5, 5).unwrap().hash());
    }

    proptest! {
        #[test]
        fn positional_bounded_and_periodic(n in 0usize..2000, half in 1usize..6) {
            let e = 2 * half;
            let p = positional_encoding(n, e, 52).unwrap();
            for (m, &x) in p.iter().enumerate() {
                prop_assert!((-1.0..=1.0).contains(&x));
                let period = e * 52;
                let q = positional_encoding(n + period, e, 52).unwrap();
                prop_assert!((q[m] - x).abs() < 1e-9);
            }
        }
    }
}
