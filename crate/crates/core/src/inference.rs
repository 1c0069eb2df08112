//! What-if demand grid: article × market × future week × discount level.
//!
//! Each article is encoded and decoded once; the discount sweep only
//! re-evaluates the response curve of every (market, week).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::build_sample;
use crate::imputation::ImputedPanel;
use crate::io::{read_text, write_text};
use crate::model::Model;
use crate::scalar::Scalar;

pub const GRID_HEADER: &str = "article,market,week,discount,demand";

/// `{0, 0.05, …, 0.70}`, computed as `k / 20`.
pub fn default_discounts() -> Vec<f64> {
    (0..=14).map(|k| k as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemandGrid<T> {
    articles: Vec<u32>,
    /// Forecast origin (last history week) per article; row `k` of the
    /// week axis is calendar week `origin + 1 + k`.
    origins: Vec<usize>,
    markets: usize,
    weeks: usize,
    discounts: Vec<f64>,
    /// `[article][market][week][discount]`, row-major.
    values: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedArticle {
    pub article_id: u32,
    pub reason: String,
}

impl<T: Scalar> DemandGrid<T> {
    pub fn empty(markets: usize, weeks: usize, discounts: Vec<f64>) -> Self {
        DemandGrid {
            articles: Vec::new(),
            origins: Vec::new(),
            markets,
            weeks,
            discounts,
            values: Vec::new(),
        }
    }

    pub fn articles(&self) -> &[u32] {
        &self.articles
    }

    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    pub fn markets(&self) -> usize {
        self.markets
    }

    pub fn weeks(&self) -> usize {
        self.weeks
    }

    pub fn discounts(&self) -> &[f64] {
        &self.discounts
    }

    /// Number of records, `a · c · t · d`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn index(&self, a: usize, market: usize, week: usize, level: usize) -> usize {
        ((a * self.markets + market) * self.weeks + week) * self.discounts.len() + level
    }

    /// Demand by article position, market, 0-based week and discount level.
    pub fn get(&self, a: usize, market: usize, week: usize, level: usize) -> T {
        self.values[self.index(a, market, week, level)]
    }

    /// The discount sweep of one (article, market, week).
    pub fn sweep(&self, a: usize, market: usize, week: usize) -> &[T] {
        let start = self.index(a, market, week, 0);
        &self.values[start..start + self.discounts.len()]
    }

    /// Whether every sweep is non-decreasing along the discount axis.
    pub fn is_monotone(&self) -> bool {
        self.values
            .chunks(self.discounts.len().max(1))
            .all(|s| s.windows(2).all(|w| w[0] <= w[1]))
    }

    fn push_article(&mut self, article: u32, origin: usize, values: Vec<T>) {
        self.articles.push(article);
        self.origins.push(origin);
        self.values.extend(values);
    }
}

fn predict_article<T: Scalar>(
    model: &Model<T>,
    ip: &ImputedPanel,
    origin: usize,
    discounts: &[f64],
) -> Result<Vec<T>> {
    let weeks = model.config().prediction_horizon;
    let c = model.schema().n_markets;
    let sample = build_sample::<T>(ip, model.schema(), origin, weeks)?;
    let heads = model.heads(&sample, weeks)?;
    let mut out = Vec::with_capacity(c * weeks * discounts.len());
    for j in 0..c {
        for k in 0..weeks {
            for &d in discounts {
                out.push(heads.demand(k, j, T::lit(d))?);
            }
        }
    }
    Ok(out)
}

/// Predicts the grid for every panel at its own last recorded week, or at
/// `origin` when given. Articles without any visible history are skipped
/// and reported; other errors abort.
pub fn predict_grid<T: Scalar>(
    model: &Model<T>,
    panels: &[ImputedPanel],
    origin: Option<usize>,
    discounts: &[f64],
    workers: usize,
) -> Result<(DemandGrid<T>, Vec<SkippedArticle>)> {
    for &d in discounts {
        if !(0.0..=crate::model::MAX_DISCOUNT).contains(&d) {
            return Err(Error::Domain(d));
        }
    }
    let origin_of = |ip: &ImputedPanel| origin.unwrap_or_else(|| ip.panel.end_week().saturating_sub(1));
    let run = |ip: &ImputedPanel| predict_article(model, ip, origin_of(ip), discounts);
    let results: Vec<Result<Vec<T>>> = if workers <= 1 || panels.len() <= 1 {
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
    let mut grid = DemandGrid::empty(
        model.schema().n_markets,
        model.config().prediction_horizon,
        discounts.to_vec(),
    );
    let mut skipped = Vec::new();
    for (ip, r) in panels.iter().zip(results) {
        match r {
            Ok(values) => grid.push_article(ip.panel.article_id, origin_of(ip), values),
            Err(Error::AllMasked { article_id }) => skipped.push(SkippedArticle {
                article_id,
                reason: "no visible history".into(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok((grid, skipped))
}

pub fn grid_to_string<T: Scalar>(grid: &DemandGrid<T>) -> String {
    let mut s = String::with_capacity(32 * grid.len() + 64);
    s.push_str(GRID_HEADER);
    s.push('\n');
    for (a, &article) in grid.articles.iter().enumerate() {
        for j in 0..grid.markets {
            for k in 0..grid.weeks {
                let week = grid.origins[a] + 1 + k;
                for (l, &d) in grid.discounts.iter().enumerate() {
                    let _ = writeln!(s, "{article},{j},{week},{d},{}", grid.get(a, j, k, l).as_f64());
                }
            }
        }
    }
    s
}

/// Parses a grid file. Records must appear in the order written by
/// [`grid_to_string`] and cover a full rectangular grid.
pub fn grid_from_str<T: Scalar>(text: &str) -> std::result::Result<DemandGrid<T>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == GRID_HEADER => {}
        other => return Err(format!("line 1: expected header `{GRID_HEADER}`, found {other:?}")),
    }
    let mut rows: Vec<(u32, usize, usize, f64, f64)> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ln = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(format!("line {ln}: expected 5 fields"));
        }
        let bad = |name: &str| format!("line {ln}: cannot parse {name}");
        rows.push((
            f[0].parse().map_err(|_| bad("article"))?,
            f[1].parse().map_err(|_| bad("market"))?,
            f[2].parse().map_err(|_| bad("week"))?,
            f[3].parse().map_err(|_| bad("discount"))?,
            f[4].parse().map_err(|_| bad("demand"))?,
        ));
    }
    if rows.is_empty() {
        return Ok(DemandGrid::empty(0, 0, Vec::new()));
    }
    let first = rows[0].0;
    let per_article = rows.iter().take_while(|r| r.0 == first).count();
    let discounts: Vec<f64> = rows
        .iter()
        .take_while(|r| r.0 == first && r.1 == rows[0].1 && r.2 == rows[0].2)
        .map(|r| r.3)
        .collect();
    let weeks = rows[..per_article]
        .iter()
        .take_while(|r| r.1 == rows[0].1)
        .count()
        / discounts.len();
    let markets = per_article / (weeks * discounts.len());
    if per_article != markets * weeks * discounts.len() || rows.len() % per_article != 0 {
        return Err("records do not form a rectangular grid".into());
    }
    let mut grid = DemandGrid::empty(markets, weeks, discounts.clone());
    for chunk in rows.chunks(per_article) {
        let article = chunk[0].0;
        let origin = chunk[0].2.checked_sub(1).ok_or("week 0 cannot follow an origin")?;
        for (idx, r) in chunk.iter().enumerate() {
            let l = idx % discounts.len();
            let k = (idx / discounts.len()) % weeks;
            let j = idx / (discounts.len() * weeks);
            if r.0 != article || r.1 != j || r.2 != origin + 1 + k || r.3 != discounts[l] {
                return Err(format!("article {article}: record {idx} out of grid order"));
            }
        }
        grid.push_article(article, origin, chunk.iter().map(|r| T::lit(r.4)).collect());
    }
    Ok(grid)
}

pub fn export_grid<T: Scalar>(path: &Path, grid: &DemandGrid<T>) -> Result<()> {
    write_text(path, &grid_to_string(grid))
}

pub fn import_grid<T: Scalar>(path: &Path) -> Result<DemandGrid<T>> {
    grid_from_str(&read_text(path)?).map_err(|m| Error::parse(path, m))
}

/// Sidecar listing skipped articles: `article,reason`.
pub fn skipped_to_string(skipped: &[SkippedArticle]) -> String {
    let mut s = String::from("article,reason\n");
    for a in skipped {
        let _ = writeln!(s, "{},{}", a.article_id, a.reason);
    }
    s
}
