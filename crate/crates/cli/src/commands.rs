use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use strata::mfe::MfeSetup;
use strata::resonance::{nonres_margins, Classification, MarginSettings, ResonanceReport, ResonanceScanner};
use strata::{make_single_mode_init, Error, Integrator, SpectralState};

use crate::config::ExperimentConfig;
use crate::output::{fmt_f64, sidecar, write_rows, write_text, write_trace};
use crate::CliError;

/// Files written by a command plus a short human-readable summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

fn settings(cfg: &ExperimentConfig) -> MarginSettings {
    MarginSettings { nu: cfg.nu, eps: cfg.eps, ..MarginSettings::default() }
}

fn refusal(report: &ResonanceReport) -> CliError {
    CliError::Core(Error::Resonant { j: report.min_weak.j, k: report.min_weak.k.to_string() })
}

fn metadata(cfg: &ExperimentConfig, tau: f64, report: &ResonanceReport) -> String {
    let mut text = cfg.render();
    text.push_str(&format!("resolved_tau = {}\n", fmt_f64(tau)));
    for line in report.to_key_value().lines() {
        text.push_str("resonance.");
        text.push_str(line);
        text.push('\n');
    }
    text
}

/// Integrates from single-mode data and writes the energy trace, preceded by a
/// `.meta` sidecar holding the configuration and resonance summary.
pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    let params = cfg.params()?;
    let profile = cfg.profile()?;
    let filters = cfg.filters()?;
    let tau = cfg.tau.resolve(&params)?;
    let report = nonres_margins(tau, &params, &profile, &settings(cfg))?;
    if cfg.require_nonresonant && report.classification == Classification::Resonant {
        return Err(refusal(&report));
    }
    let meta = sidecar(out, ".meta");
    write_text(&meta, &metadata(cfg, tau, &report))?;

    let (u, udot) = make_single_mode_init(cfg.eps, &params)?;
    let it = Integrator::new(&params, &filters, tau)?;
    let init = SpectralState::new(u, udot, tau);
    let modes = params.degree() + 1;
    let (trace, failure) = match it.run(&init, cfg.n_steps, cfg.sample_stride) {
        Ok(t) => (t, None),
        Err(e) => (e.partial, Some((e.error, e.last_finite_step))),
    };
    if let Some((error, last)) = failure {
        write_trace(out, &trace, modes)?;
        log::error!("run stopped after step {last}; partial trace written to {}", out.display());
        return Err(error.into());
    }
    let trace = if cfg.window > 0 { trace.windowed_max(cfg.window)? } else { trace };
    write_trace(out, &trace, modes)?;
    let summary = format!(
        "tau = {tau:.10}, {} ({} rows), max |E_1 - E_1(0)| = {:.3e}",
        report.classification,
        trace.len(),
        trace.max_e1_drift
    );
    Ok(Outcome { files: vec![meta, out.to_path_buf()], summary })
}

/// One row of margins per step size, sorted by step size.
pub fn resonance_scan(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    if cfg.tau_grid.is_empty() {
        return Err(CliError::Config("tau_grid is empty".into()));
    }
    let params = cfg.params()?;
    let profile = cfg.profile()?;
    let taus = cfg.tau_grid.iter().map(|t| t.resolve(&params)).collect::<Result<Vec<_>, _>>()?;
    let scanner = ResonanceScanner::new(&params, &profile)?;
    info!("scanning {} step sizes over {} interaction pairs", taus.len(), scanner.len());
    let st = settings(cfg);
    let mut reports = taus.par_iter().map(|&tau| scanner.report(tau, &st)).collect::<Result<Vec<_>, _>>()?;
    reports.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    let rows: Vec<String> = reports.iter().map(ResonanceReport::to_csv_row).collect();
    write_rows(out, ResonanceReport::CSV_HEADER, &rows)?;
    let resonant = reports.iter().filter(|r| r.classification == Classification::Resonant).count();
    Ok(Outcome {
        files: vec![out.to_path_buf()],
        summary: format!("{} step sizes, {resonant} resonant", reports.len()),
    })
}

fn steps_to_unit_time(tau: f64) -> usize {
    (1.0 / tau).round().max(1.0) as usize
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Some(num / den)
}

fn setup(cfg: &ExperimentConfig) -> Result<(MfeSetup, Integrator), CliError> {
    let params = cfg.params()?;
    let profile = cfg.profile()?;
    let filters = cfg.filters()?;
    let tau = cfg.tau.resolve(&params)?;
    let mfe =
        MfeSetup::new(&params, &profile, &filters, tau)?.with_nu(cfg.nu)?.with_m_max(cfg.m_max)?.with_sobolev(cfg.s)?;
    Ok((mfe, Integrator::new(&params, &filters, tau)?))
}

/// Errors `|u_j^n - û_j(t_n)|` for `j = 0, 1, 2` over `t ∈ [0, 1]` per ε,
/// plus a `.summary.csv` with the maxima and fitted slopes.
pub fn mfe_order(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    if cfg.eps_list.is_empty() {
        return Err(CliError::Config("eps_list is empty".into()));
    }
    let (mfe, it) = setup(cfg)?;
    let tau = mfe.tau();
    let n = steps_to_unit_time(tau);
    let runs = cfg
        .eps_list
        .par_iter()
        .map(|&eps| -> Result<Vec<(f64, [f64; 3])>, CliError> {
            let (u, udot) = make_single_mode_init(eps, mfe.params())?;
            let table = mfe.construct(eps, &u, &udot)?;
            let traj = it.trajectory(&SpectralState::new(u, udot, tau), n)?;
            Ok(traj
                .iter()
                .map(|s| {
                    let approx = table.evaluate(s.time());
                    let err = [0i64, 1, 2].map(|j| (s.u.get(j) - approx.get(j)).norm());
                    (s.time(), err)
                })
                .collect())
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows = Vec::new();
    let mut maxima = Vec::new();
    for (&eps, run) in cfg.eps_list.iter().zip(&runs) {
        let mut max = [0.0f64; 3];
        for (t, err) in run {
            rows.push(format!(
                "{},{},{},{},{}",
                fmt_f64(eps),
                fmt_f64(*t),
                fmt_f64(err[0]),
                fmt_f64(err[1]),
                fmt_f64(err[2])
            ));
            for (m, e) in max.iter_mut().zip(err) {
                *m = m.max(*e);
            }
        }
        maxima.push(max);
    }
    write_rows(out, "eps,t,err0,err1,err2", &rows)?;

    let slopes: Vec<Option<f64>> =
        (0..3).map(|j| log_log_slope(&cfg.eps_list, &maxima.iter().map(|m| m[j]).collect::<Vec<_>>())).collect();
    let mut summary_rows: Vec<String> = cfg
        .eps_list
        .iter()
        .zip(&maxima)
        .map(|(eps, m)| format!("{},{},{},{}", fmt_f64(*eps), fmt_f64(m[0]), fmt_f64(m[1]), fmt_f64(m[2])))
        .collect();
    let render = |s: &Option<f64>| s.map_or("undefined".to_string(), fmt_f64);
    summary_rows.push(format!("slope,{},{},{}", render(&slopes[0]), render(&slopes[1]), render(&slopes[2])));
    let summary_path = sidecar(out, ".summary.csv");
    write_rows(&summary_path, "eps,max_err0,max_err1,max_err2", &summary_rows)?;

    let shown = |s: &Option<f64>| s.map_or("undefined".to_string(), |v| format!("{v:.3}"));
    let summary = format!("slopes j=0: {}, j=1: {}, j=2: {}", shown(&slopes[0]), shown(&slopes[1]), shown(&slopes[2]));
    Ok(Outcome { files: vec![out.to_path_buf(), summary_path], summary })
}

/// Almost-invariant energies on the step grid of `[0, 1]`, plus a `.drift.csv`.
pub fn invariants(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    let (mfe, _) = setup(cfg)?;
    let (u, udot) = make_single_mode_init(cfg.eps, mfe.params())?;
    let table = mfe.construct(cfg.eps, &u, &udot)?;
    let tau = mfe.tau();
    let grid: Vec<f64> = (0..=steps_to_unit_time(tau)).map(|n| n as f64 * tau).collect();
    let modes = mfe.params().degree() + 1;
    let mut header = String::from("t");
    for l in 0..modes {
        header.push_str(&format!(",calE{l}"));
    }
    let rows = grid
        .iter()
        .map(|&t| {
            let e = table.almost_invariants(t)?;
            let mut row = fmt_f64(t);
            for v in e.real() {
                row.push(',');
                row.push_str(&fmt_f64(v));
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    write_rows(out, &header, &rows)?;

    let drift = table.invariant_drift(&grid)?;
    let mut drift_rows: Vec<String> =
        drift.per_mode.iter().enumerate().map(|(l, d)| format!("{l},{}", fmt_f64(*d))).collect();
    drift_rows.push(format!("weighted,{}", fmt_f64(drift.weighted)));
    let drift_path = sidecar(out, ".drift.csv");
    write_rows(&drift_path, "l,drift", &drift_rows)?;
    let summary = format!("{} table entries, weighted drift {:.3e}", table.len(), drift.weighted);
    Ok(Outcome { files: vec![out.to_path_buf(), drift_path], summary })
}
