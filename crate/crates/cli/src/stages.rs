//! One function per pipeline stage. Each reads the artifacts of earlier
//! stages from the output directory and writes its own plus a manifest.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use demandcast::datagen::{generate_catalog, summarize_catalog};
use demandcast::evaluation::{
    curve_csv, metrics_csv, report_text, run_backtest, scaling_experiment, staleness_experiment,
};
use demandcast::imputation::{fit_profiles, impute_panel, ImputedPanel, ProfileSource};
use demandcast::inference::{export_grid, predict_grid, skipped_to_string};
use demandcast::io::{panels_to_string, read_imputed, read_panels, truth_to_string, write_imputed, write_text};
use demandcast::training::{train, truncate_panels};
use demandcast::{checkpoint, Model64};
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest;

pub const PANELS: &str = "panels.csv";
pub const TRUTH: &str = "truth.csv";
pub const HISTOGRAM: &str = "sales_histogram.csv";
pub const CATALOG_SUMMARY: &str = "catalog_summary.txt";
pub const IMPUTED: &str = "imputed.csv";
pub const IMPUTATION_SUMMARY: &str = "imputation_summary.txt";
pub const CHECKPOINT: &str = "model.json";
pub const SCHEMA: &str = "schema.json";
pub const TRACE: &str = "train_loss.csv";
pub const GRID: &str = "grid.csv";
pub const GRID_SKIPPED: &str = "grid_skipped.csv";
pub const METRICS: &str = "metrics.csv";
pub const CURVE: &str = "horizon_curve.csv";
pub const EVAL_REPORT: &str = "evaluation.txt";
pub const SCALING: &str = "scaling.csv";
pub const SCALING_REPORT: &str = "scaling.txt";
pub const STALENESS: &str = "staleness.csv";
pub const STALENESS_REPORT: &str = "staleness.txt";

/// A stage was run before the stage producing its input.
#[derive(Debug)]
pub struct StageOrder {
    pub stage: &'static str,
    pub needs: &'static str,
    pub file: PathBuf,
}

impl fmt::Display for StageOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "run stage {} first: {} needs {}",
            self.needs,
            self.stage,
            self.file.display()
        )
    }
}

impl std::error::Error for StageOrder {}

pub struct Stage<'a> {
    pub cfg: &'a RunConfig,
    pub config_path: &'a Path,
}

impl Stage<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn require(&self, stage: &'static str, name: &str, needs: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.is_file() {
            bail!(StageOrder { stage, needs, file: p });
        }
        Ok(p)
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(name);
        write_text(&p, text)?;
        Ok(p)
    }

    fn finish(&self, stage: &str, inputs: &[&Path], outputs: &[&Path], details: serde_json::Value) -> Result<()> {
        let mut all = vec![self.config_path];
        all.extend_from_slice(inputs);
        manifest::write(self.cfg, stage, &all, outputs, details)?;
        Ok(())
    }

    fn imputed(&self, stage: &'static str) -> Result<(PathBuf, Vec<ImputedPanel>)> {
        let path = self.require(stage, IMPUTED, "impute")?;
        let panels = read_imputed(&path)?;
        if panels.is_empty() {
            bail!(demandcast::Error::Data(format!("{} holds no articles", path.display())));
        }
        Ok((path, panels))
    }

    pub fn generate(&self) -> Result<String> {
        let cat = generate_catalog(&self.cfg.catalog)?;
        let summary = summarize_catalog(&cat.panels)?;
        let panels = self.write(PANELS, &panels_to_string(&cat.panels))?;
        let truth = self.write(TRUTH, &truth_to_string(&cat.truth, &cat.panels))?;
        let hist = self.write(HISTOGRAM, &summary.histogram_csv())?;
        let text = format!(
            "articles {}\narticle-weeks {}\nzero-sales share {:.4}\nmean weekly sales {:.3}\nweekly sales p50 {} p90 {} p99 {} max {}\ntail index {}\n",
            cat.panels.len(),
            summary.article_weeks,
            summary.zero_share,
            summary.mean_weekly_sales,
            summary.p50,
            summary.p90,
            summary.p99,
            summary.max,
            summary.hill_tail_index.map_or("n/a".into(), |h| format!("{h:.3}"))
        );
        let report = self.write(CATALOG_SUMMARY, &text)?;
        self.finish(
            "generate",
            &[],
            &[&panels, &truth, &hist, &report],
            json!({ "articles": cat.panels.len(), "article_weeks": summary.article_weeks }),
        )?;
        Ok(text)
    }

    pub fn impute(&self) -> Result<String> {
        let input = self.require("impute", PANELS, "generate")?;
        let panels = read_panels(&input)?;
        self.cfg.imputation.validate()?;
        let profiles = fit_profiles(&panels, &self.cfg.imputation);
        let imputed: Vec<ImputedPanel> = panels
            .iter()
            .zip(&profiles)
            .map(|(p, prof)| impute_panel(p, prof, &self.cfg.imputation))
            .collect::<demandcast::Result<_>>()?;
        let out = self.path(IMPUTED);
        write_imputed(&out, &imputed)?;

        let count = |src: ProfileSource| profiles.iter().filter(|p| p.source == src).count();
        let weeks = imputed.iter().flat_map(|p| p.demand.iter().flatten());
        let (mut total, mut imputed_weeks, mut censored) = (0, 0, 0);
        for w in weeks {
            total += 1;
            imputed_weeks += usize::from(w.imputed_flag && w.demand_estimate.is_some());
            censored += usize::from(w.demand_estimate.is_none());
        }
        let text = format!(
            "articles {}\nmarket-weeks {total}\nimputed {imputed_weeks}\nundefined {censored}\nsize profiles: article {}, commodity group {}, catalog {}, uniform {}\n",
            imputed.len(),
            count(ProfileSource::Article),
            count(ProfileSource::CommodityGroup),
            count(ProfileSource::Global),
            count(ProfileSource::Uniform)
        );
        let report = self.write(IMPUTATION_SUMMARY, &text)?;
        self.finish(
            "impute",
            &[&input],
            &[&out, &report],
            json!({ "market_weeks": total, "imputed": imputed_weeks, "undefined": censored }),
        )?;
        Ok(text)
    }

    pub fn train(&self) -> Result<String> {
        let (input, panels) = self.imputed("train")?;
        let last_week = panels.iter().map(|p| p.panel.end_week()).max().unwrap_or(0);
        let cutoff = self.cfg.cutoff(last_week)?;
        let schema = self.cfg.schema(panels[0].panel.n_markets())?;
        let mut model = Model64::new(self.cfg.model.clone(), schema.clone())?;
        let train_panels = truncate_panels(&panels, cutoff);
        let report = train(&mut model, &train_panels, &self.cfg.train, None).context("training")?;
        let ckpt = self.path(CHECKPOINT);
        checkpoint::save(&ckpt, &model)?;
        let schema_file = self.write(SCHEMA, &schema.to_json())?;
        let trace = self.write(TRACE, &report.trace_csv())?;
        let last = |phase| {
            report
                .trace
                .iter()
                .filter(|r| r.phase == phase)
                .next_back()
                .map_or(f64::NAN, |r| r.loss)
        };
        let (near, far) = (last(demandcast::model::Pair::Near), last(demandcast::model::Pair::Far));
        self.finish(
            "train",
            &[&input],
            &[&ckpt, &schema_file, &trace],
            json!({
                "cutoff": cutoff,
                "train_articles": train_panels.len(),
                "samples_seen": report.samples_seen,
                "schema_hash": schema.hash(),
                "market_weights": report.market_weights,
            }),
        )?;
        Ok(format!(
            "trained on {} articles before week {cutoff}, {} samples; final loss near {near:.4}, far {far:.4}\n",
            train_panels.len(),
            report.samples_seen
        ))
    }

    fn load_model(&self, stage: &'static str, panels: &[ImputedPanel]) -> Result<(PathBuf, Model64)> {
        let path = self.require(stage, CHECKPOINT, "train")?;
        let expected = self.cfg.schema(panels[0].panel.n_markets())?.hash();
        let model = checkpoint::load(&path, Some(&expected))?;
        Ok((path, model))
    }

    pub fn predict_grid(&self) -> Result<String> {
        let (input, panels) = self.imputed("predict-grid")?;
        let (ckpt, model) = self.load_model("predict-grid", &panels)?;
        let discounts = self.cfg.discounts();
        let (grid, skipped) = predict_grid(&model, &panels, self.cfg.predict.origin, &discounts, self.cfg.workers())?;
        let out = self.path(GRID);
        export_grid(&out, &grid)?;
        let side = self.write(GRID_SKIPPED, &skipped_to_string(&skipped))?;
        self.finish(
            "predict-grid",
            &[&input, &ckpt],
            &[&out, &side],
            json!({ "articles": grid.articles().len(), "records": grid.len(), "skipped": skipped.len() }),
        )?;
        Ok(format!(
            "{} records for {} articles, {} discount levels; {} articles skipped\n",
            grid.len(),
            grid.articles().len(),
            discounts.len(),
            skipped.len()
        ))
    }

    pub fn evaluate(&self, naive: bool) -> Result<String> {
        let (input, panels) = self.imputed("evaluate")?;
        let last_week = panels.iter().map(|p| p.panel.end_week()).max().unwrap_or(0);
        let origins = self.cfg.origins(last_week)?;
        let horizon = self.cfg.evaluate.horizon;
        let workers = self.cfg.workers();
        let mut inputs = vec![input];
        let backtest = if self.cfg.evaluate.retrain {
            let setup = self.cfg.train_setup(panels[0].panel.n_markets())?;
            let seed = self.cfg.train.seed;
            let mut factory = |_origin: usize, train: &[ImputedPanel]| setup.fit::<f64>(train, seed);
            run_backtest(&panels, &mut factory, &origins, horizon, workers)?
        } else {
            let (ckpt, model) = self.load_model("evaluate", &panels)?;
            let cutoff = manifest::details(&self.cfg.out_dir, "train")
                .and_then(|d| d.get("cutoff").and_then(|c| c.as_u64()))
                .map(|c| c as usize)
                .ok_or_else(|| StageOrder {
                    stage: "evaluate",
                    needs: "train",
                    file: manifest::manifest_path(&self.cfg.out_dir, "train"),
                })?;
            if let Some(&o) = origins.iter().find(|&&o| o + 1 < cutoff) {
                bail!(demandcast::Error::Config(format!(
                    "origin {o} lies inside the training window (cutoff {cutoff}); set evaluate.retrain = true"
                )));
            }
            inputs.push(ckpt);
            let mut factory = |_origin: usize, _train: &[ImputedPanel]| Ok(model.clone());
            run_backtest(&panels, &mut factory, &origins, horizon, workers)?
        };
        if backtest.reports.is_empty() {
            bail!(demandcast::Error::Data(format!(
                "no origin could be evaluated: {}",
                backtest.notices.join("; ")
            )));
        }
        let metrics = self.write(METRICS, &metrics_csv(&backtest.reports, naive))?;
        let curve = self.write(CURVE, &curve_csv(&backtest.reports, naive))?;
        let text = report_text(&backtest.reports, &backtest.notices, naive);
        let report = self.write(EVAL_REPORT, &text)?;
        let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
        self.finish(
            "evaluate",
            &input_refs,
            &[&metrics, &curve, &report],
            json!({
                "origins": backtest.reports.iter().map(|r| r.origin).collect::<Vec<_>>(),
                "baseline": if naive { "naive" } else { "none" },
                "headline_demand_error": backtest.reports.iter().map(|r| r.headline.model.demand_error).collect::<Vec<_>>(),
            }),
        )?;
        Ok(text)
    }

    pub fn scaling(&self) -> Result<String> {
        let (input, panels) = self.imputed("scaling")?;
        let setup = self.cfg.train_setup(panels[0].panel.n_markets())?;
        let table = scaling_experiment::<f64>(&panels, &setup, &self.cfg.scaling, self.cfg.workers())?;
        let csv = self.write(SCALING, &table.to_csv())?;
        let text = table.to_text();
        let report = self.write(SCALING_REPORT, &text)?;
        self.finish(
            "scaling",
            &[&input],
            &[&csv, &report],
            json!({ "origin": table.origin, "test_articles": table.test_articles, "naive_demand_error": table.naive_demand_error }),
        )?;
        Ok(text)
    }

    pub fn staleness(&self) -> Result<String> {
        let (input, panels) = self.imputed("staleness")?;
        let setup = self.cfg.train_setup(panels[0].panel.n_markets())?;
        let curve = staleness_experiment::<f64>(&panels, &setup, &self.cfg.staleness, self.cfg.workers())?;
        let csv = self.write(STALENESS, &curve.to_csv())?;
        let text = curve.to_text();
        let report = self.write(STALENESS_REPORT, &text)?;
        let (stale, fresh) = curve.means();
        self.finish(
            "staleness",
            &[&input],
            &[&csv, &report],
            json!({ "train_week": curve.train_week, "stale": stale, "retrained": fresh }),
        )?;
        Ok(text)
    }
}
