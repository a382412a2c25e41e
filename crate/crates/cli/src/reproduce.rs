//! `reproduce-all`: every experiment end to end plus a pass/fail report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::experiments::{run, DarcyMetrics, GreensGpMetrics, Metrics, ShallowNoMetrics};
use crate::verify;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRun {
    pub experiment: String,
    pub config_hash: String,
    /// `None` on success.
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiments: Vec<ExperimentRun>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Reproduction report\n\n| experiment | seconds | status |\n|---|---|---|\n");
        for e in &self.experiments {
            let status = e.error.as_deref().unwrap_or("ok");
            let _ = writeln!(s, "| {} | {:.1} | {} |", e.experiment, e.seconds, status);
        }
        s.push_str("\n| criterion | check | result | detail |\n|---|---|---|---|\n");
        for c in &self.checks {
            let r = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "| {} | {} | {} | {} |", c.criterion, c.name, r, c.detail);
        }
        let _ = writeln!(s, "\nOverall: {}", if self.passed { "PASS" } else { "FAIL" });
        s
    }
}

/// Wall-clock budget of each experiment in seconds.
fn budget(tag: &str) -> f64 {
    match tag {
        "greens-gp" => 30.0,
        "shallow-no" => 120.0,
        "darcy-low" => 600.0,
        _ => 1800.0,
    }
}

fn check(criterion: u32, name: &str, passed: bool, detail: String) -> Check {
    Check {
        criterion,
        name: name.into(),
        passed,
        detail,
    }
}

fn missing(criterion: u32, name: &str, tag: &str) -> Check {
    check(criterion, name, false, format!("{tag} did not produce metrics"))
}

pub fn greens_checks(m: &GreensGpMetrics, seconds: f64) -> Vec<Check> {
    let rmse: Vec<f64> = m.shrinkage.iter().map(|r| r.rmse).collect();
    let shown: Vec<String> = rmse.iter().map(|r| format!("{r:.3e}")).collect();
    let decreasing = rmse.windows(2).all(|w| w[1] < w[0]);
    let (first, last) = (m.shrinkage.first(), m.shrinkage.last());
    let drop = match (first, last) {
        (Some(a), Some(b)) => 1.0 - b.mean_std / a.mean_std,
        _ => f64::NAN,
    };
    let worst = m.training_relative_l2.iter().cloned().fold(0.0, f64::max);
    vec![
        check(
            2,
            "posterior shrinkage with more data",
            decreasing && drop >= 0.30 && seconds < budget("greens-gp"),
            format!("rmse [{}]; mean std drop {:.1}%; {seconds:.1}s", shown.join(", "), 100.0 * drop),
        ),
        check(
            3,
            "noise-free reproduction of training solutions",
            worst < 1e-3,
            format!("max relative L2 {worst:.2e}"),
        ),
    ]
}

pub fn shallow_checks(m: &ShallowNoMetrics, seconds: f64) -> Vec<Check> {
    let worst = m.test.iter().map(|t| t.relative_l2).fold(0.0, f64::max);
    vec![
        check(
            4,
            "learned kernel matches the Green's function",
            m.greens_relative_l2 < 0.25 && seconds < budget("shallow-no"),
            format!("relative L2 {:.4}; {seconds:.1}s", m.greens_relative_l2),
        ),
        check(
            4,
            "held-out Legendre solutions",
            worst < 0.05,
            format!(
                "relative L2 {:?}",
                m.test.iter().map(|t| format!("{:.3}", t.relative_l2)).collect::<Vec<_>>()
            ),
        ),
    ]
}

pub fn laplace_checks(m: &DarcyMetrics) -> Vec<Check> {
    vec![
        check(
            7,
            "predictive mean is the MAP output bit for bit",
            m.laplace.mean_is_map_bitwise,
            String::new(),
        ),
        check(
            7,
            "strong prior collapses variance to noise",
            m.laplace.strong_prior_max_rel_deviation <= 1e-6,
            format!("max |var - σ²|/σ² {:.2e}", m.laplace.strong_prior_max_rel_deviation),
        ),
    ]
}

pub fn low_data_checks(low: &DarcyMetrics, high: Option<&DarcyMetrics>, seconds: f64) -> Vec<Check> {
    let rho = low.median_spearman.unwrap_or(f64::NAN);
    let ratio = high.map_or(f64::NAN, |h| low.mean_std / h.mean_std);
    vec![
        check(
            8,
            "low-data std ranks the error",
            rho >= 0.2 && seconds < budget("darcy-low"),
            format!("median Spearman {rho:.3}; {seconds:.1}s"),
        ),
        check(
            8,
            "low-data std exceeds high-data std",
            ratio >= 2.0,
            format!("mean std ratio {ratio:.2}"),
        ),
    ]
}

pub fn high_data_checks(m: &DarcyMetrics, seconds: f64) -> Vec<Check> {
    vec![
        check(
            9,
            "high-data relative error",
            m.median_relative_l2 < 0.10 && seconds < budget("darcy-high"),
            format!("median relative L2 {:.4}; {seconds:.1}s", m.median_relative_l2),
        ),
        check(
            9,
            "largest errors carry above-median std",
            m.worst_decile_median_std > m.overall_median_std,
            format!(
                "worst-decile median std {:.3e} vs overall {:.3e}",
                m.worst_decile_median_std, m.overall_median_std
            ),
        ),
    ]
}

/// Checks 1, 5 and 6, which need no experiment output.
pub fn self_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let t = Instant::now();
    out.push(match verify::gp_conditioning(7) {
        Ok((dm, dc)) => {
            let s = t.elapsed().as_secs_f64();
            check(
                1,
                "GP posterior equals dense conditioning",
                dm < 1e-8 && dc < 1e-8 && s < 10.0,
                format!("mean {dm:.1e}, covariance {dc:.1e}; {s:.1}s"),
            )
        }
        Err(e) => check(1, "GP posterior equals dense conditioning", false, e.to_string()),
    });
    out.push(match verify::gradient_check(50, 3) {
        Ok(r) => check(5, "gradient matches central differences", r < 1e-5, format!("max relative error {r:.1e}")),
        Err(e) => check(5, "gradient matches central differences", false, e.to_string()),
    });
    let t = Instant::now();
    out.push(match verify::darcy_orders() {
        Ok(o) => {
            let s = t.elapsed().as_secs_f64();
            check(
                6,
                "Darcy solver converges at second order",
                o.iter().all(|v| (v - 2.0).abs() <= 0.3) && s < 30.0,
                format!("orders {o:.3?}; {s:.1}s"),
            )
        }
        Err(e) => check(6, "Darcy solver converges at second order", false, e.to_string()),
    });
    out
}

/// Runs every experiment below `out_dir/<tag>`, continuing past failures,
/// and writes `report.json` and `report.md`.
pub fn reproduce_all(configs: &[ExperimentConfig], out_dir: &Path) -> CliResult<Report> {
    let mut runs = Vec::new();
    let mut results: Vec<(String, Option<Metrics>, f64)> = Vec::new();
    for cfg in configs {
        let mut cfg = cfg.clone();
        cfg.set_out_dir(out_dir.join(cfg.tag()));
        let t = Instant::now();
        let res = run(&cfg);
        let seconds = t.elapsed().as_secs_f64();
        runs.push(ExperimentRun {
            experiment: cfg.tag().into(),
            config_hash: cfg.hash(),
            error: res.as_ref().err().map(ToString::to_string),
            seconds,
        });
        results.push((cfg.tag().into(), res.ok(), seconds));
    }
    let find = |tag: &str| results.iter().find(|(t, _, _)| t == tag);
    let mut checks = self_checks();
    match find("greens-gp") {
        Some((_, Some(Metrics::GreensGp(m)), s)) => checks.extend(greens_checks(m, *s)),
        _ => {
            checks.push(missing(2, "posterior shrinkage with more data", "greens-gp"));
            checks.push(missing(3, "noise-free reproduction of training solutions", "greens-gp"));
        }
    }
    match find("shallow-no") {
        Some((_, Some(Metrics::ShallowNo(m)), s)) => checks.extend(shallow_checks(m, *s)),
        _ => {
            checks.push(missing(4, "learned kernel matches the Green's function", "shallow-no"));
            checks.push(missing(4, "held-out Legendre solutions", "shallow-no"));
        }
    }
    let high = match find("darcy-high") {
        Some((_, Some(Metrics::DarcyHigh(m)), s)) => Some((m, *s)),
        _ => None,
    };
    match &high {
        Some((m, _)) => checks.extend(laplace_checks(m)),
        None => {
            checks.push(missing(7, "predictive mean is the MAP output bit for bit", "darcy-high"));
            checks.push(missing(7, "strong prior collapses variance to noise", "darcy-high"));
        }
    }
    match find("darcy-low") {
        Some((_, Some(Metrics::DarcyLow(m)), s)) => checks.extend(low_data_checks(m, high.map(|h| h.0), *s)),
        _ => {
            checks.push(missing(8, "low-data std ranks the error", "darcy-low"));
            checks.push(missing(8, "low-data std exceeds high-data std", "darcy-low"));
        }
    }
    match high {
        Some((m, s)) => checks.extend(high_data_checks(m, s)),
        None => {
            checks.push(missing(9, "high-data relative error", "darcy-high"));
            checks.push(missing(9, "largest errors carry above-median std", "darcy-high"));
        }
    }
    checks.sort_by_key(|c| c.criterion);
    let passed = checks.iter().all(|c| c.passed) && runs.iter().all(|r| r.error.is_none());
    let report = Report {
        experiments: runs,
        checks,
        passed,
    };
    fs::create_dir_all(out_dir).map_err(|e| CliError::Config(format!("{}: {e}", out_dir.display())))?;
    let write = |name: &str, text: String| {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
    };
    write("report.json", serde_json::to_string_pretty(&report).expect("serializable") + "\n")?;
    write("report.md", report.to_markdown())?;
    Ok(report)
}
