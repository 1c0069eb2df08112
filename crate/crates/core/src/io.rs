//! Line-oriented panel and imputed-demand files.
//!
//! One article-market-week per line, comma separated, with a header. Size
//! vectors are `|`-joined. Floats are written in shortest round-trip form so
//! a write/read cycle is lossless.
//!
//! Panel columns:
//! `article_id,market_id,week,brand_id,commodity_group_id,black_price,discount,stock_uplift,stock_by_size,sales_by_size`
//!
//! Imputed-demand files append `demand_estimate,imputed_flag,excluded_from_eval`;
//! `demand_estimate` is empty for fully censored weeks and flags are `0`/`1`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::datagen::{ArticlePanel, GroundTruth, MarketWeek, PanelWeek};
use crate::error::{Error, Result};
use crate::imputation::{ImputedPanel, ImputedWeek};

pub const PANEL_HEADER: &str =
    "article_id,market_id,week,brand_id,commodity_group_id,black_price,discount,stock_uplift,stock_by_size,sales_by_size";
pub const IMPUTED_EXTRA: &str = "demand_estimate,imputed_flag,excluded_from_eval";
pub const TRUTH_HEADER: &str = "article_id,market_id,week,true_demand,expected_demand";

fn join(v: &[u32]) -> String {
    v.iter().map(u32::to_string).collect::<Vec<_>>().join("|")
}

fn panel_line(out: &mut String, p: &ArticlePanel, i: usize, j: usize) {
    let w = &p.weeks[i];
    let m = &w.markets[j];
    let _ = write!(
        out,
        "{},{},{},{},{},{},{},{},{},{}",
        p.article_id,
        j,
        p.first_week + i,
        p.brand_id,
        p.commodity_group_id,
        m.black_price,
        m.discount,
        w.stock_uplift,
        join(&w.stock_by_size),
        join(&m.sales_by_size)
    );
}

pub fn panels_to_string(panels: &[ArticlePanel]) -> String {
    let mut out = String::from(PANEL_HEADER);
    out.push('\n');
    for p in panels {
        for i in 0..p.weeks.len() {
            for j in 0..p.n_markets() {
                panel_line(&mut out, p, i, j);
                out.push('\n');
            }
        }
    }
    out
}

pub fn imputed_to_string(panels: &[ImputedPanel]) -> String {
    let mut out = format!("{PANEL_HEADER},{IMPUTED_EXTRA}\n");
    for ip in panels {
        let p = &ip.panel;
        for i in 0..p.weeks.len() {
            for j in 0..p.n_markets() {
                panel_line(&mut out, p, i, j);
                let d = &ip.demand[i][j];
                let est = d.demand_estimate.map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(
                    out,
                    ",{est},{},{}",
                    d.imputed_flag as u8, d.excluded_from_eval as u8
                );
            }
        }
    }
    out
}

pub fn truth_to_string(truth: &GroundTruth, panels: &[ArticlePanel]) -> String {
    let mut out = String::from(TRUTH_HEADER);
    out.push('\n');
    for (t, p) in truth.articles.iter().zip(panels) {
        for (i, (dem, exp)) in t.demand.iter().zip(&t.expected).enumerate() {
            for j in 0..dem.len() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    t.article_id,
                    j,
                    p.first_week + i,
                    dem[j],
                    exp[j]
                );
            }
        }
    }
    out
}

struct Row {
    article_id: u32,
    market: usize,
    week: usize,
    brand: u32,
    group: u32,
    black_price: f64,
    discount: f64,
    uplift: u32,
    stock: Vec<u32>,
    sales: Vec<u32>,
    imputed: Option<(Option<f64>, bool, bool)>,
}

fn field<T: std::str::FromStr>(v: &str, name: &str, line: usize) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("line {line}: cannot parse {name} `{v}`"))
}

fn sizes(v: &str, name: &str, line: usize) -> std::result::Result<Vec<u32>, String> {
    v.split('|').map(|s| field(s, name, line)).collect()
}

fn flag(v: &str, name: &str, line: usize) -> std::result::Result<bool, String> {
    match v {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(format!("line {line}: {name} must be 0 or 1, got `{v}`")),
    }
}

fn parse_rows(text: &str, imputed: bool) -> std::result::Result<Vec<Row>, String> {
    let mut lines = text.lines().enumerate();
    let expected = if imputed {
        format!("{PANEL_HEADER},{IMPUTED_EXTRA}")
    } else {
        PANEL_HEADER.to_string()
    };
    match lines.next() {
        Some((_, h)) if h.trim_end() == expected => {}
        Some((_, h)) => return Err(format!("line 1: unexpected header `{h}`")),
        None => return Err("empty file".into()),
    }
    let n_cols = expected.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != n_cols {
            return Err(format!("line {ln}: expected {n_cols} fields, found {}", f.len()));
        }
        let imputed = if imputed {
            let est = if f[10].is_empty() {
                None
            } else {
                Some(field::<f64>(f[10], "demand_estimate", ln)?)
            };
            Some((est, flag(f[11], "imputed_flag", ln)?, flag(f[12], "excluded_from_eval", ln)?))
        } else {
            None
        };
        rows.push(Row {
            article_id: field(f[0], "article_id", ln)?,
            market: field(f[1], "market_id", ln)?,
            week: field(f[2], "week", ln)?,
            brand: field(f[3], "brand_id", ln)?,
            group: field(f[4], "commodity_group_id", ln)?,
            black_price: field(f[5], "black_price", ln)?,
            discount: field(f[6], "discount", ln)?,
            uplift: field(f[7], "stock_uplift", ln)?,
            stock: sizes(f[8], "stock_by_size", ln)?,
            sales: sizes(f[9], "sales_by_size", ln)?,
            imputed,
        });
    }
    Ok(rows)
}

/// Groups rows into panels ordered by article id; weeks must be contiguous
/// and every week must list markets `0..c`.
fn assemble(rows: Vec<Row>) -> std::result::Result<Vec<ImputedPanel>, String> {
    let mut by_article: BTreeMap<u32, Vec<Row>> = BTreeMap::new();
    for r in rows {
        by_article.entry(r.article_id).or_default().push(r);
    }
    let mut out = Vec::with_capacity(by_article.len());
    for (id, mut rows) in by_article {
        rows.sort_by_key(|r| (r.week, r.market));
        let first_week = rows[0].week;
        let n_markets = rows.iter().filter(|r| r.week == first_week).count();
        if rows.len() % n_markets != 0 {
            return Err(format!("article {id}: ragged market coverage"));
        }
        let (brand, group) = (rows[0].brand, rows[0].group);
        let mut weeks = Vec::new();
        let mut demand = Vec::new();
        for (i, chunk) in rows.chunks(n_markets).enumerate() {
            let week = first_week + i;
            for (j, r) in chunk.iter().enumerate() {
                if r.week != week || r.market != j {
                    return Err(format!(
                        "article {id}: expected week {week} market {j}, found week {} market {}",
                        r.week, r.market
                    ));
                }
                if r.brand != brand || r.group != group {
                    return Err(format!("article {id}: static attributes change at week {week}"));
                }
                if r.stock != chunk[0].stock || r.uplift != chunk[0].uplift {
                    return Err(format!("article {id} week {week}: stock differs across markets"));
                }
            }
            weeks.push(PanelWeek {
                stock_by_size: chunk[0].stock.clone(),
                stock_uplift: chunk[0].uplift,
                markets: chunk
                    .iter()
                    .map(|r| MarketWeek {
                        discount: r.discount,
                        black_price: r.black_price,
                        sales_by_size: r.sales.clone(),
                    })
                    .collect(),
            });
            demand.push(
                chunk
                    .iter()
                    .map(|r| {
                        let total: u32 = r.sales.iter().sum();
                        let (est, imp, excl) = r.imputed.unwrap_or((Some(total as f64), false, false));
                        ImputedWeek {
                            article_id: id,
                            market_id: r.market as u32,
                            week,
                            demand_estimate: est,
                            observed_sales: total,
                            imputed_flag: imp,
                            excluded_from_eval: excl,
                        }
                    })
                    .collect(),
            );
        }
        let panel = ArticlePanel {
            article_id: id,
            brand_id: brand,
            commodity_group_id: group,
            first_week,
            weeks,
        };
        panel.validate().map_err(|e| e.to_string())?;
        out.push(ImputedPanel { panel, demand });
    }
    Ok(out)
}

pub fn panels_from_str(text: &str) -> std::result::Result<Vec<ArticlePanel>, String> {
    Ok(assemble(parse_rows(text, false)?)?
        .into_iter()
        .map(|ip| ip.panel)
        .collect())
}

pub fn imputed_from_str(text: &str) -> std::result::Result<Vec<ImputedPanel>, String> {
    assemble(parse_rows(text, true)?)
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_panels(path: &Path, panels: &[ArticlePanel]) -> Result<()> {
    write_text(path, &panels_to_string(panels))
}

pub fn read_panels(path: &Path) -> Result<Vec<ArticlePanel>> {
    panels_from_str(&read_text(path)?).map_err(|m| Error::parse(path, m))
}

pub fn write_imputed(path: &Path, panels: &[ImputedPanel]) -> Result<()> {
    write_text(path, &imputed_to_string(panels))
}

pub fn read_imputed(path: &Path) -> Result<Vec<ImputedPanel>> {
    imputed_from_str(&read_text(path)?).map_err(|m| Error::parse(path, m))
}
