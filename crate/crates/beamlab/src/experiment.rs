//! Monte Carlo evaluation of scan policies: expected data-beamwidth, MMSE,
//! empirical error probability, and parameter sweeps.
//!
//! Trials are pure functions of `(seed, trial index, config)`: they run
//! data-parallel and are aggregated in trial order, so results do not depend
//! on the worker count.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::angular::AngularGrid;
use crate::belief::{
    make_prior, markov_beamwidth, shortest_credible_beam, sq_err, Posterior, PriorSpec,
};
use crate::channel::ChannelParams;
use crate::policy::{bisection_scan, hpm_scan, neural_scan, ScanPolicyNet};
use crate::seeding::mix_seed;
use crate::train::{run_episode, LossSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("belief error: {0}")]
    Belief(#[from] crate::belief::BeliefError),
    #[error("misaligned records: {0}")]
    Misaligned(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A concrete, loaded policy ready to evaluate.
pub enum Policy {
    Neural(ScanPolicyNet),
    Bisection,
    Hpm { max_depth: u32 },
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Neural(_) => "neural",
            Policy::Bisection => "bisection",
            Policy::Hpm { .. } => "hpm",
        }
    }

    fn scan(&self, post: &Posterior, grid: &AngularGrid) -> crate::angular::Beam {
        match self {
            Policy::Neural(net) => neural_scan(net, post, grid),
            Policy::Bisection => bisection_scan(post, grid),
            Policy::Hpm { max_depth } => hpm_scan(post, grid, *max_depth),
        }
    }
}

/// Evaluation setup for one or more SNR points at a fixed duration.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub prior: PriorSpec,
    pub slots: usize,
    pub epsilon: f64,
    pub raw_snr_db: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub n_bins: usize,
    /// Use the literal linear posterior moments instead of circular ones.
    pub linear_moments: bool,
}

/// Aggregated metrics for one `(raw SNR, duration)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub policy: String,
    pub prior: String,
    pub raw_snr_db: f64,
    pub b: usize,
    pub epsilon: f64,
    pub trials: usize,
    pub beamwidth_deg: f64,
    pub ci95_deg: f64,
    pub mmse_rad2: f64,
    pub err_prob: f64,
    pub markov_deg: f64,
}

pub fn prior_label(spec: &PriorSpec) -> String {
    match spec {
        PriorSpec::Uniform => "uniform".into(),
        PriorSpec::Mixture { .. } => "mixture".into(),
        PriorSpec::Custom { .. } => "custom".into(),
    }
}

struct TrialOutcome {
    beamwidth_deg: f64,
    sq_err: f64,
    miss: bool,
}

/// Evaluates one cell; trial-level errors are counted (returned separately)
/// and excluded from the means rather than aborting the run.
pub fn evaluate_cell(
    policy: &Policy,
    cfg: &EvalConfig,
    raw_snr_db: f64,
    seed: u64,
) -> Result<(MetricsRecord, usize), ExperimentError> {
    assert!(cfg.trials >= 1);
    let grid = AngularGrid::new(cfg.n_bins);
    let prior = make_prior(&cfg.prior, &grid)?;
    let ch = ChannelParams::from_raw_snr_db(raw_snr_db);

    let outcomes: Vec<Option<TrialOutcome>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, trial as u64]));
            let psi = crate::train::sample_aoa(&prior, &grid, &mut rng);
            let trace = run_episode(
                &|p: &Posterior| policy.scan(p, &grid),
                &prior,
                psi,
                &ch,
                cfg.slots,
                &grid,
                &LossSpec::Mmse,
                &mut rng,
            )
            .ok()?;
            let final_post = trace.posteriors.last().unwrap();
            let data_beam = shortest_credible_beam(final_post, &grid, cfg.epsilon);
            let err = if cfg.linear_moments {
                crate::belief::sq_err_linear(final_post, &grid, psi)
            } else {
                sq_err(final_post, &grid, psi).ok()?
            };
            Some(TrialOutcome {
                beamwidth_deg: data_beam.length().to_degrees(),
                sq_err: err,
                miss: !data_beam.contains(psi),
            })
        })
        .collect();

    // aggregate in trial order; pairwise-stable enough at these sizes and
    // independent of the parallel schedule
    let mut n_ok = 0usize;
    let (mut sum_w, mut sum_w2, mut sum_e, mut misses) = (0.0, 0.0, 0.0, 0usize);
    for o in outcomes.iter().flatten() {
        n_ok += 1;
        sum_w += o.beamwidth_deg;
        sum_w2 += o.beamwidth_deg * o.beamwidth_deg;
        sum_e += o.sq_err;
        misses += o.miss as usize;
    }
    let failures = cfg.trials - n_ok;
    let n = n_ok.max(1) as f64;
    let mean_w = sum_w / n;
    let var_w = (sum_w2 / n - mean_w * mean_w).max(0.0);
    let mmse = sum_e / n;
    let record = MetricsRecord {
        policy: policy.name().into(),
        prior: prior_label(&cfg.prior),
        raw_snr_db,
        b: cfg.slots,
        epsilon: cfg.epsilon,
        trials: cfg.trials,
        beamwidth_deg: mean_w,
        ci95_deg: 1.96 * (var_w / n).sqrt(),
        mmse_rad2: mmse,
        err_prob: misses as f64 / n,
        markov_deg: markov_beamwidth(mmse, cfg.epsilon).to_degrees(),
    };
    Ok((record, failures))
}

/// Evaluates every SNR in the config, with per-cell deterministic seeds.
pub fn evaluate(policy: &Policy, cfg: &EvalConfig) -> Result<Vec<MetricsRecord>, ExperimentError> {
    let mut out = Vec::new();
    for (i, &snr) in cfg.raw_snr_db.iter().enumerate() {
        let (rec, failures) = evaluate_cell(policy, cfg, snr, mix_seed(&[cfg.seed, i as u64]))?;
        if failures > 0 {
            eprintln!(
                "warning: {} trial(s) failed at snr={snr} dB, b={}",
                failures, cfg.slots
            );
        }
        out.push(rec);
    }
    Ok(out)
}

/// Cross-product sweep over SNRs and durations.
pub fn sweep(
    policy: &Policy,
    base: &EvalConfig,
    snrs: &[f64],
    durations: &[usize],
) -> Result<Vec<MetricsRecord>, ExperimentError> {
    let mut out = Vec::new();
    for (bi, &b) in durations.iter().enumerate() {
        for (si, &snr) in snrs.iter().enumerate() {
            let cell_cfg = EvalConfig {
                slots: b,
                raw_snr_db: vec![snr],
                ..base.clone()
            };
            let cell_seed = mix_seed(&[base.seed, bi as u64, si as u64]);
            let (rec, failures) = evaluate_cell(policy, &cell_cfg, snr, cell_seed)?;
            if failures > 0 {
                eprintln!("warning: {failures} trial(s) failed at snr={snr} dB, b={b}");
            }
            out.push(rec);
        }
    }
    Ok(out)
}

/// Per-cell beamwidth difference `a − b` with propagated confidence
/// half-widths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub raw_snr_db: f64,
    pub b: usize,
    pub beamwidth_diff_deg: f64,
    pub ci95_deg: f64,
}

pub fn compare(a: &[MetricsRecord], b: &[MetricsRecord]) -> Result<Vec<CompareRow>, ExperimentError> {
    if a.len() != b.len() {
        return Err(ExperimentError::Misaligned(format!(
            "{} vs {} records",
            a.len(),
            b.len()
        )));
    }
    a.iter()
        .zip(b)
        .map(|(ra, rb)| {
            if ra.raw_snr_db != rb.raw_snr_db || ra.b != rb.b {
                return Err(ExperimentError::Misaligned(format!(
                    "cell ({}, {}) vs ({}, {})",
                    ra.raw_snr_db, ra.b, rb.raw_snr_db, rb.b
                )));
            }
            Ok(CompareRow {
                raw_snr_db: ra.raw_snr_db,
                b: ra.b,
                beamwidth_diff_deg: ra.beamwidth_deg - rb.beamwidth_deg,
                ci95_deg: (ra.ci95_deg.powi(2) + rb.ci95_deg.powi(2)).sqrt(),
            })
        })
        .collect()
}

pub const METRICS_CSV_HEADER: &str =
    "policy,prior,raw_snr_db,b,epsilon,trials,beamwidth_deg,ci95_deg,mmse_rad2,err_prob,markov_deg";

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.policy,
            r.prior,
            r.raw_snr_db,
            r.b,
            r.epsilon,
            r.trials,
            r.beamwidth_deg,
            r.ci95_deg,
            r.mmse_rad2,
            r.err_prob,
            r.markov_deg
        )?;
    }
    Ok(())
}

pub fn write_metrics_files(records: &[MetricsRecord], dir: &Path) -> std::io::Result<()> {
    let mut csv = Vec::new();
    write_metrics_csv(records, &mut csv)?;
    std::fs::write(dir.join("metrics.csv"), csv)?;
    let json = serde_json::to_string_pretty(records)?;
    std::fs::write(dir.join("metrics.json"), json)?;
    Ok(())
}
