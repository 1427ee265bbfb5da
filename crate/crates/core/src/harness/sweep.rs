use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Objective, Overrides, PriorScheme, SweepSection};
use super::{
    certify_with, ensure_dir, load_data, read_report, train_prior_with, train_with, LoadedData, RunReport,
    PRIOR_CHECKPOINT, REPORT,
};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

pub const SWEEP_CSV: &str = "sweep.csv";

/// One configuration of a sweep, with the sweep section cleared.
pub fn grid_points(base: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
    let axis = |v: &[f64], current: f64| if v.is_empty() { vec![current] } else { v.to_vec() };
    let SweepSection {
        beta,
        sigma,
        lambda,
        objective,
        prior_scheme,
    } = &base.sweep;
    let objectives = if objective.is_empty() {
        vec![base.train.objective]
    } else {
        objective.clone()
    };
    let schemes = if prior_scheme.is_empty() {
        vec![base.prior.scheme]
    } else {
        prior_scheme.clone()
    };
    let betas = axis(beta, base.train.beta);
    let sigmas = if sigma.is_empty() { vec![None] } else { sigma.iter().map(|&s| Some(s)).collect() };
    let lambdas = axis(lambda, base.train.lambda);

    let mut points = Vec::new();
    for &obj in &objectives {
        for &scheme in &schemes {
            for &b in &betas {
                for &s in &sigmas {
                    for &l in &lambdas {
                        let mut cfg = base.clone();
                        cfg.sweep = SweepSection::default();
                        cfg.prior.scheme = scheme;
                        cfg.apply(&Overrides {
                            beta: (!beta.is_empty()).then_some(b),
                            sigma: s,
                            lambda: Some(l),
                            objective: Some(obj),
                            seed: None,
                        })?;
                        points.push(cfg);
                    }
                }
            }
        }
    }
    Ok(points)
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_hash: String,
    pub objective: Objective,
    pub prior_scheme: PriorScheme,
    pub beta: f64,
    pub sigma_phi: f64,
    pub sigma_theta: f64,
    pub lambda: f64,
    pub status: String,
    pub train_loss_raw: Option<f64>,
    pub test_loss_raw: Option<f64>,
    pub gap_raw: Option<f64>,
    pub train_loss_bounded: Option<f64>,
    pub test_loss_bounded: Option<f64>,
    pub risk_bound_derandomised: Option<f64>,
    pub risk_bound_small_noise: Option<f64>,
    pub risk_bound_noise_free: Option<f64>,
    pub risk_bound_rescaled_nats: Option<f64>,
    pub distance_phi: Option<f64>,
    pub distance_theta: Option<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    fn new(cfg: &ExperimentConfig, outcome: std::result::Result<(RunReport, bool), String>) -> Self {
        let mut row = SweepRow {
            config_hash: cfg.hash(),
            objective: cfg.train.objective,
            prior_scheme: cfg.prior.scheme,
            beta: cfg.train.beta,
            sigma_phi: cfg.train.sigma_phi,
            sigma_theta: cfg.train.sigma_theta,
            lambda: cfg.train.lambda,
            status: String::new(),
            train_loss_raw: None,
            test_loss_raw: None,
            gap_raw: None,
            train_loss_bounded: None,
            test_loss_bounded: None,
            risk_bound_derandomised: None,
            risk_bound_small_noise: None,
            risk_bound_noise_free: None,
            risk_bound_rescaled_nats: None,
            distance_phi: None,
            distance_theta: None,
            error: None,
        };
        match outcome {
            Ok((r, cached)) => {
                row.status = if cached { "cached" } else { "ok" }.into();
                row.train_loss_raw = Some(r.train_loss_raw);
                row.test_loss_raw = r.test_loss_raw;
                row.gap_raw = r.gap_raw;
                row.train_loss_bounded = Some(r.train_loss_bounded);
                row.test_loss_bounded = r.test_loss_bounded;
                row.risk_bound_derandomised = Some(r.certificates.derandomised.risk_bound);
                row.risk_bound_small_noise = Some(r.certificates.small_noise_approx.risk_bound);
                row.risk_bound_noise_free = Some(r.certificates.noise_free.risk_bound);
                row.risk_bound_rescaled_nats = Some(r.certificates.derandomised.risk_bound_rescaled_nats_per_image);
                row.distance_phi = Some(r.distance_phi);
                row.distance_theta = Some(r.distance_theta);
            }
            Err(e) => {
                row.status = "failed".into();
                row.error = Some(e);
            }
        }
        row
    }
}

fn run_point(cfg: &ExperimentConfig, data: &LoadedData, out_dir: &Path) -> Result<(RunReport, bool)> {
    let run_dir = out_dir.join("runs").join(cfg.hash());
    let report_path = run_dir.join(REPORT);
    if report_path.exists() {
        return Ok((read_report(&report_path)?, true));
    }
    let prior_dir = out_dir.join("priors").join(cfg.prior_hash());
    let prior_path = prior_dir.join(PRIOR_CHECKPOINT);
    let prior = if prior_path.exists() {
        Checkpoint::load(&prior_path)?
    } else {
        train_prior_with(cfg, Some(data), &prior_dir)?
    };
    let posterior = train_with(cfg, data, &prior, &run_dir)?;
    Ok((certify_with(cfg, data, &prior, &posterior, &run_dir)?, false))
}

/// Run every grid point, reusing finished runs (`runs/<hash>/report.json`)
/// and shared priors (`priors/<hash>/prior.ckpt`), then write `sweep.csv`.
/// A failing point is recorded in its row and the sweep continues.
pub fn cmd_sweep(base: &ExperimentConfig, out_dir: &Path, mut on_row: impl FnMut(&SweepRow)) -> Result<Vec<SweepRow>> {
    let points = grid_points(base)?;
    if points.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    ensure_dir(out_dir)?;
    let data = load_data(base)?;
    let mut rows = Vec::with_capacity(points.len());
    for cfg in &points {
        let outcome = run_point(cfg, &data, out_dir).map_err(|e| e.to_string());
        let row = SweepRow::new(cfg, outcome);
        on_row(&row);
        rows.push(row);
    }
    let csv_path = out_dir.join(SWEEP_CSV);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Validation(format!("{}: {e}", csv_path.display())))?;
    for row in &rows {
        w.serialize(row)
            .map_err(|e| Error::Validation(format!("{}: {e}", csv_path.display())))?;
    }
    w.flush().map_err(|e| Error::file(&csv_path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig::from_toml_str("[data]\ntrain_images = \"x\"\n", "").unwrap()
    }

    #[test]
    fn empty_grid_is_the_base_point() {
        let b = base();
        let pts = grid_points(&b).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].hash(), b.hash());
    }

    #[test]
    fn sigma_axis_gives_one_row_per_value() {
        let mut b = base();
        b.sweep.sigma = vec![0.005, 0.01, 0.03, 0.05];
        let pts = grid_points(&b).unwrap();
        let sigmas: Vec<f64> = pts.iter().map(|p| p.train.sigma_phi).collect();
        assert_eq!(sigmas, vec![0.005, 0.01, 0.03, 0.05]);
        assert!(pts.iter().all(|p| p.train.sigma_theta == p.train.sigma_phi));
    }

    #[test]
    fn grid_order_is_objective_major() {
        let mut b = base();
        b.sweep.objective = vec![Objective::BetaVae, Objective::PbQuadratic];
        b.sweep.lambda = vec![1.0, 1e-4];
        let pts = grid_points(&b).unwrap();
        let keys: Vec<_> = pts.iter().map(|p| (p.train.objective, p.train.lambda)).collect();
        assert_eq!(
            keys,
            vec![
                (Objective::BetaVae, 1.0),
                (Objective::BetaVae, 1e-4),
                (Objective::PbQuadratic, 1.0),
                (Objective::PbQuadratic, 1e-4)
            ]
        );
    }
}
