use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use dccal::backtest::{self, BacktestReport, DccAlModel, ForecastRecord, HistoricalModel};
use dccal::dcc;
use dccal::portopt::{self, HedgingSummary, OptimizeConfig, PortfolioStudyConfig};
use dccal::simulate::{self, DgpSpec, StudySpec};
use dccal::timeseries::{load_panel, write_panel, ReturnPanel};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;

fn prepare_output(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn load(cfg: &RunConfig) -> Result<ReturnPanel> {
    Ok(load_panel(cfg.data()?, cfg.schema()?)?)
}

pub fn fit(cfg: &RunConfig) -> Result<()> {
    let alpha = cfg.alpha()?;
    let fit_cfg = cfg.fit()?;
    let panel = load(cfg)?;
    let w = cfg.weights(panel.n_assets())?;
    let out = prepare_output(cfg)?;

    let fit = dcc::fit_dcc(&panel, &w, alpha, &fit_cfg)?;
    let fc = dcc::forecast_one_step(&fit)?;
    let stage1: Vec<_> = fit
        .stage1
        .iter()
        .zip(panel.assets())
        .map(|(f, id)| {
            json!({
                "asset": id,
                "alpha_q": f.params.alpha_q,
                "beta": f.params.beta,
                "q": f.params.q,
                "gamma0": f.params.gamma0,
                "loss": f.loss,
                "sample_var": f.sample_var,
            })
        })
        .collect();
    let doc = json!({
        "alpha": alpha.value(),
        "n_obs": panel.len(),
        "assets": panel.assets(),
        "weights": w.as_slice(),
        "mu": fit.mu,
        "params": {
            "a": fit.params.a,
            "b": fit.params.b,
            "q": fit.params.q,
            "gamma0": fit.params.gamma0,
            "c": fit.params.c(),
        },
        "loss": fit.loss,
        "sigma_eps_hat": fit.corr.sigma_eps_hat.to_rows(),
        "stage1": stage1,
        "forecast": { "date_after": panel.dates()[panel.len() - 1].to_string(), "var": fc.var, "es": fc.es },
    });
    write_json(&out.join("fit.json"), &doc)?;

    if cfg.paths {
        let mut f = std::io::BufWriter::new(fs::File::create(out.join("paths.csv"))?);
        writeln!(f, "date,var,es")?;
        let m = fit.portfolio_mean();
        for (t, d) in panel.dates().iter().enumerate() {
            writeln!(
                f,
                "{},{:.16e},{:.16e}",
                d.format("%Y-%m-%d"),
                fit.port_var_path[t] + m,
                fit.port_es_path[t] + m
            )?;
        }
        f.flush()?;
    }
    log::info!("fit written to {}", out.display());
    Ok(())
}

pub fn backtest(cfg: &RunConfig) -> Result<()> {
    let alpha = cfg.alpha()?;
    let fit_cfg = cfg.fit()?;
    let win = cfg.window()?;
    let models = cfg.models()?;
    let panel = load(cfg)?;
    let w = cfg.weights(panel.n_assets())?;
    win.validate_for(panel.len())?;
    let out = prepare_output(cfg)?;

    let mut runs: Vec<(String, Vec<ForecastRecord>)> = Vec::new();
    for name in &models {
        let records = match name.as_str() {
            "dcc-al" => backtest::rolling_forecast(&DccAlModel { fit: fit_cfg }, &panel, &w, &win, alpha, cfg.seed)?,
            _ => backtest::rolling_forecast(&HistoricalModel, &panel, &w, &win, alpha, cfg.seed)?,
        };
        backtest::save_records(&records, out.join(format!("records_{name}.csv")))?;
        runs.push((name.clone(), records));
    }
    let reports: Vec<BacktestReport> = runs
        .iter()
        .map(|(name, recs)| BacktestReport::from_records(name, recs, alpha))
        .collect();
    let table: Vec<(&str, &[ForecastRecord])> = runs.iter().map(|(n, r)| (n.as_str(), r.as_slice())).collect();
    let comparison = backtest::compare_models(&table)?;
    write_json(
        &out.join("report.json"),
        &json!({ "window": win, "reports": reports, "comparison": comparison }),
    )?;
    Ok(())
}

pub fn study(cfg: &RunConfig) -> Result<()> {
    let spec = StudySpec {
        n: cfg.n,
        a: cfg.a,
        b: cfg.b,
        rho: cfg.rho,
        garch: *cfg
            .garch()?
            .first()
            .context("the study uses one GARCH specification for every asset")?,
        cells: cfg.study_cells()?,
        n_reps: cfg.n_reps,
        alpha: cfg.alpha()?,
        fit: cfg.fit()?,
        seed: cfg.seed,
        factor_sample: cfg.factor_sample,
    };
    spec.validate()?;
    let out = prepare_output(cfg)?;
    let report = simulate::run_study(&spec)?;
    for c in report.cells.iter().filter(|c| c.failed) {
        log::warn!(
            "cell {} T={} marked failed ({} of {} replications failed)",
            c.label,
            c.cell.t_len,
            c.n_failed,
            spec.n_reps
        );
    }
    report.save_csv(out.join("study.csv"))?;
    Ok(())
}

pub fn optimize(cfg: &RunConfig) -> Result<()> {
    let alpha = cfg.alpha()?;
    let fit = cfg.fit()?;
    let study = PortfolioStudyConfig {
        window: cfg.window()?,
        alpha,
        objectives: cfg.objectives()?,
        n_sim: cfg.n_sim,
        optimize: OptimizeConfig {
            mu_target: cfg.mu_target,
            allow_short: cfg.allow_short,
            search: fit,
        },
        fit,
        seed: cfg.seed,
    };
    let panel = load(cfg)?;
    study.window.validate_for(panel.len())?;
    let out = prepare_output(cfg)?;
    let steps = portopt::rolling_portfolios(&panel, &study)?;
    portopt::save_solutions(&steps, panel.n_assets(), out.join("solutions.csv"))?;
    let summary = HedgingSummary::from_steps(&steps, &study.objectives, alpha);
    write_json(&out.join("hedging.json"), &summary)?;
    Ok(())
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let spec = DgpSpec {
        n: cfg.n,
        t_len: cfg.t_len,
        a: cfg.a,
        b: cfg.b,
        rho: cfg.rho,
        garch: cfg.garch()?,
        dist: cfg.innovation()?,
        seed: cfg.seed,
        stream: 0,
    };
    spec.validate()?;
    let out = prepare_output(cfg)?;
    let sim = simulate::simulate_panel(&spec)?;
    write_panel(&sim.panel, out.join("panel.csv"))?;
    write_json(&out.join("dgp.json"), &spec)?;
    Ok(())
}
