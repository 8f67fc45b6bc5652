//! End-to-end episode construction, the MMSE and CAM losses on the
//! differentiable posterior, and the Adam training loop.
//!
//! Training records the whole episode on one tape: network forward, soft
//! sectored gain, measurement synthesis (pathwise: `y = μ(beam) + noise` with
//! the noise draw held fixed), the Bayes recursion, and the loss. Gradients
//! flow through all `b` stages without truncation.

use std::f64::consts::TAU;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::angular::{circ_dist, Angle, AngularGrid, Beam};
use crate::autodiff::{Tape, Value};
use crate::belief::{bayes_update, make_prior, BeliefError, Posterior, PriorSpec};
use crate::channel::{sample_measurement, ChannelParams, Measurement};
use crate::policy::ScanPolicyNet;
use crate::seeding::mix_seed;

/// Floor inside `√(gain + ε)` so the underflowed soft gain does not produce
/// a 0/0 in the square-root backward rule.
const GAIN_EPS: f64 = 1e-30;
/// Regularizer on the resultant's cosine component so the differentiable
/// circular mean stays defined for degenerate posteriors.
const RESULTANT_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("belief error: {0}")]
    Belief(#[from] BeliefError),
    #[error("non-finite {quantity} at step {step}; offending episode (seed {episode_seed}):\n{trace}")]
    NonFinite {
        step: usize,
        episode_seed: u64,
        quantity: String,
        trace: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] crate::policy::CheckpointError),
}

/// Training objective on the final posterior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LossSpec {
    Mmse,
    Cam { n: u32 },
}

///// Raw SNR to train against: a single value or a per-episode sampling set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SnrSpec {
    Single(f64),
    Set(Vec<f64>),
}

impl SnrSpec {
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            SnrSpec::Single(v) => *v,
            SnrSpec::Set(vs) => {
                assert!(!vs.is_empty(), "empty SNR set");
                vs[rng.gen_range(0..vs.len())]
            }
        }
    }
}

fn default_epsilon() -> f64 {
    0.1
}
fn default_batch() -> usize {
    128
}
fn default_steps() -> usize {
    5000
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_prior() -> PriorSpec {
    PriorSpec::Uniform
}
fn default_loss() -> LossSpec {
    LossSpec::Cam { n: 1 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub n_bins: usize,
    pub slots: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_prior")]
    pub prior: PriorSpec,
    pub raw_snr_db: SnrSpec,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Soft-gain temperature; defaults to one grid bin width.
    #[serde(default)]
    pub tau: Option<f64>,
    pub seed: u64,
    #[serde(default = "default_loss")]
    pub loss: LossSpec,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_bins == 0 {
            return Err("n_bins must be positive".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err("epsilon must be in (0,1)".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return Err("learning_rate must be positive".into());
        }
        if let Some(t) = self.tau {
            if !(t > 0.0) {
                return Err("tau must be positive".into());
            }
        }
        if let LossSpec::Cam { n } = self.loss {
            if n == 0 {
                return Err("cam order must be ≥ 1".into());
            }
        }
        if let SnrSpec::Set(s) = &self.raw_snr_db {
            if s.is_empty() {
                return Err("raw_snr_db set must be non-empty".into());
            }
        }
        Ok(())
    }

    pub fn tau_or_default(&self) -> f64 {
        self.tau.unwrap_or(TAU / self.n_bins as f64)
    }
}

/// One full beam-alignment interaction, recorded for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub psi_true: Angle,
    pub beams: Vec<Beam>,
    pub measurements: Vec<Measurement>,
    /// `f^(0) .. f^(b)`.
    pub posteriors: Vec<Posterior>,
    pub loss: f64,
}

/// Circular mean with the small-resultant regularizer; shared by the eval
/// losses and mirrored by the tape construction.
fn regularized_circ_mean(probs: &[f64], grid: &AngularGrid) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for (k, &p) in probs.iter().enumerate() {
        let a = grid.center(k).radians();
        s += p * a.sin();
        c += p * a.cos();
    }
    s.atan2(c + RESULTANT_EPS)
}

/// Evaluation-mode (non-differentiable) loss on a posterior.
pub fn eval_loss(post: &Posterior, grid: &AngularGrid, psi_true: Angle, loss: &LossSpec) -> f64 {
    let mean = Angle::wrap(regularized_circ_mean(post.probs(), grid));
    match loss {
        LossSpec::Mmse => circ_dist(psi_true, mean).powi(2),
        LossSpec::Cam { n } => post
            .probs()
            .iter()
            .enumerate()
            .map(|(k, &p)| p * circ_dist(grid.center(k), mean).powi(*n as i32))
            .sum(),
    }
}

///// Runs one evaluation-mode episode: hard gains, log-domain Bayes updates,
/// no tape.
pub fn run_episode<R: Rng>(
    scan: &dyn Fn(&Posterior) -> Beam,
    prior: &Posterior,
    psi_true: Angle,
    ch: &ChannelParams,
    slots: usize,
    grid: &AngularGrid,
    loss: &LossSpec,
    rng: &mut R,
) -> Result<EpisodeTrace, BeliefError> {
    let mut posteriors = vec![prior.clone()];
    let mut beams = Vec::with_capacity(slots);
    let mut measurements = Vec::with_capacity(slots);
    for _ in 0..slots {
        let beam = scan(posteriors.last().unwrap());
        let y = sample_measurement(psi_true, &beam, ch, rng);
        let next = bayes_update(posteriors.last().unwrap(), grid, &beam, &y, ch)?;
        beams.push(beam);
        measurements.push(y);
        posteriors.push(next);
    }
    let loss_val = eval_loss(posteriors.last().unwrap(), grid, psi_true, loss);
    Ok(EpisodeTrace {
        psi_true,
        beams,
        measurements,
        posteriors,
        loss: loss_val,
    })
}

/// Network parameters recorded as tape leaves.
pub struct TapeParams {
    pub w1: Value,
    pub b1: Value,
    pub w2: Value,
    pub b2: Value,
    pub w3: Value,
    pub b3: Value,
}

impl TapeParams {
    pub fn record(tape: &mut Tape, net: &ScanPolicyNet) -> TapeParams {
        TapeParams {
            w1: tape.vector(net.w1.clone()),
            b1: tape.vector(net.b1.clone()),
            w2: tape.vector(net.w2.clone()),
            b2: tape.vector(net.b2.clone()),
            w3: tape.vector(net.w3.clone()),
            b3: tape.vector(net.b3.clone()),
        }
    }

    /// Gradients concatenated in checkpoint order.
    pub fn flat_grads(&self, tape: &Tape) -> Vec<f64> {
        let mut out = Vec::new();
        for v in [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3] {
            out.extend_from_slice(tape.grad_vec(v));
        }
        out
    }
}

/// Episode quantities that live on the tape in train mode.
pub struct TapeEpisode {
    pub loss: Value,
    /// `f^(0) .. f^(b)` as vector values.
    pub posteriors: Vec<Value>,
    /// `(start, length)` per slot.
    pub beams: Vec<(Value, Value)>,
    /// Real parts of the synthesized measurements.
    pub measurements: Vec<Value>,
}

fn net_forward_on_tape(
    tape: &mut Tape,
    params: &TapeParams,
    input: Value,
    n: usize,
) -> (Value, Value) {
    let z1 = tape.matvec(params.w1, input, 4 * n, n);
    let z1 = tape.add_vec(z1, params.b1);
    let h1 = tape.relu_vec(z1);
    let z2 = tape.matvec(params.w2, h1, 2 * n, 4 * n);
    let z2 = tape.add_vec(z2, params.b2);
    let h2 = tape.relu_vec(z2);
    let z3 = tape.matvec(params.w3, h2, 2, 2 * n);
    let z3 = tape.add_vec(z3, params.b3);
    let out = tape.logistic_vec(z3);
    (tape.index(out, 0), tape.index(out, 1))
}

/// Signed wrapped difference `target − angle` as a tape scalar, via
/// `atan2(sin, cos)`: smooth except at the antipode.
fn wrapped_diff_on_tape(tape: &mut Tape, angle: Value, target: f64) -> Value {
    let neg = tape.neg(angle);
    let d = tape.add_const(neg, target);
    let s = tape.sin(d);
    let c = tape.cos(d);
    tape.atan2(s, c)
}

/// Soft sectored gain at a fixed angle, as a function of the beam values.
fn soft_gain_on_tape(
    tape: &mut Tape,
    center: Value,
    length: Value,
    half_length: Value,
    psi: f64,
    tau: f64,
) -> Value {
    let delta = wrapped_diff_on_tape(tape, center, psi);
    let dist = tape.abs_pow(delta, 1);
    let margin = tape.sub(half_length, dist);
    let z = tape.mul_const(margin, 1.0 / tau);
    let s = tape.logistic(z);
    let num = tape.mul_const(s, TAU);
    tape.div(num, length)
}

/// Mean amplitude `h√(P·(g + ε))` at a fixed angle.
fn mean_amp_on_tape(tape: &mut Tape, gain: Value, ch: &ChannelParams) -> Value {
    let shifted = tape.add_const(gain, GAIN_EPS);
    let root = tape.sqrt(shifted);
    tape.mul_const(root, ch.h * ch.p.sqrt())
}

/// Differentiable circular mean of a posterior vector value.
fn circ_mean_on_tape(tape: &mut Tape, post: Value, grid: &AngularGrid) -> Value {
    let n = grid.n_bins();
    let sin_c: Vec<f64> = (0..n).map(|k| grid.center(k).radians().sin()).collect();
    let cos_c: Vec<f64> = (0..n).map(|k| grid.center(k).radians().cos()).collect();
    let sin_leaf = tape.vector(sin_c);
    let cos_leaf = tape.vector(cos_c);
    let s = tape.dot(post, sin_leaf);
    let c = tape.dot(post, cos_leaf);
    let c_reg = tape.add_const(c, RESULTANT_EPS);
    tape.atan2(s, c_reg)
}

/// Differentiable per-episode loss on a final posterior value.
fn loss_on_tape(
    tape: &mut Tape,
    post: Value,
    grid: &AngularGrid,
    psi_true: f64,
    loss: &LossSpec,
) -> Value {
    let mean = circ_mean_on_tape(tape, post, grid);
    match loss {
        LossSpec::Mmse => {
            let d = wrapped_diff_on_tape(tape, mean, psi_true);
            tape.square(d)
        }
        LossSpec::Cam { n } => {
            let devs: Vec<Value> = (0..grid.n_bins())
                .map(|k| {
                    let d = wrapped_diff_on_tape(tape, mean, grid.center(k).radians());
                    tape.abs_pow(d, *n)
                })
                .collect();
            let dev_vec = tape.pack(&devs);
            tape.dot(post, dev_vec)
        }
    }
}

/// Records a full training episode on the tape: `b` stages of network
/// forward, soft-gain measurement, Bayes update, then the loss.
#[allow(clippy::too_many_arguments)]
pub fn episode_on_tape(
    tape: &mut Tape,
    params: &TapeParams,
    prior: &Posterior,
    psi_true: f64,
    noise: &[(f64, f64)],
    ch: &ChannelParams,
    grid: &AngularGrid,
    tau: f64,
    loss: &LossSpec,
) -> TapeEpisode {
    assert!(ch.sigma2 > 0.0, "train mode needs σ² > 0");
    let n = grid.n_bins();
    let mut post = tape.vector(prior.probs().to_vec());
    let mut posteriors = vec![post];
    let mut beams = Vec::new();
    let mut measurements = Vec::new();

    for &(n_re, _n_im) in noise {
        let (o1, o2) = net_forward_on_tape(tape, params, post, n);
        let start = tape.mul_const(o1, TAU);
        let raw_len = tape.mul_const(o2, TAU);
        let length = tape.clamp_min(raw_len, grid.bin_width());
        let half = tape.mul_const(length, 0.5);
        let center = tape.add(start, half);

        // measurement synthesis, pathwise in the beam parameters
        let g_true = soft_gain_on_tape(tape, center, length, half, psi_true, tau);
        let mu_true = mean_amp_on_tape(tape, g_true, ch);
        let y_re = tape.add_const(mu_true, n_re);

        // per-bin log-likelihoods: −(y_re − μ_k)²/σ², imaginary residual is a
        // shared constant and cancels in the normalization
        let mus: Vec<Value> = (0..n)
            .map(|k| {
                let g = soft_gain_on_tape(tape, center, length, half, grid.center(k).radians(), tau);
                mean_amp_on_tape(tape, g, ch)
            })
            .collect();
        let mu_vec = tape.pack(&mus);
        let resid = tape.scalar_minus_vec(y_re, mu_vec);
        let r2 = tape.square_vec(resid);
        let ll = tape.mul_const_vec(r2, -1.0 / ch.sigma2);

        // p'_k ∝ p_k · exp(ll_k − max ll); the max shift is a constant and
        // cancels exactly
        let max_ll = tape
            .vals(ll)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let shifted = tape.add_const_vec(ll, -max_ll);
        let lik = tape.exp_vec(shifted);
        let unnorm = tape.mul_vec(post, lik);
        let total = tape.sum_vec(unnorm);
        post = tape.div_vec_scalar(unnorm, total);

        posteriors.push(post);
        beams.push((start, length));
        measurements.push(y_re);
    }

    let loss_val = loss_on_tape(tape, post, grid, psi_true, loss);
    TapeEpisode {
        loss: loss_val,
        posteriors,
        beams,
        measurements,
    }
}

/// Samples a continuous AoA from a discretized prior: categorical over bins,
/// uniform within the bin's half-open interval.
pub fn sample_aoa<R: Rng>(prior: &Posterior, grid: &AngularGrid, rng: &mut R) -> Angle {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut bin = prior.n_bins() - 1;
    for (k, &p) in prior.probs().iter().enumerate() {
        cum += p;
        if u < cum {
            bin = k;
            break;
        }
    }
    let inner: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    Angle::wrap((bin as f64 + inner) * grid.bin_width())
}

/// Per-episode inputs, fully determined by the episode seed.
struct EpisodeDraw {
    psi_true: f64,
    snr_db: f64,
    noise: Vec<(f64, f64)>,
}

fn draw_episode(cfg: &TrainConfig, prior: &Posterior, grid: &AngularGrid, seed: u64) -> EpisodeDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let snr_db = cfg.raw_snr_db.draw(&mut rng);
    let psi_true = sample_aoa(prior, grid, &mut rng).radians();
    let sigma = (ChannelParams::from_raw_snr_db(snr_db).sigma2 / 2.0).sqrt();
    let noise: Vec<(f64, f64)> = (0..cfg.slots)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            (sigma * re, sigma * im)
        })
        .collect();
    EpisodeDraw {
        psi_true,
        snr_db,
        noise,
    }
}

/// One training-log row. `wall_ms` is excluded from determinism claims.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

pub struct TrainOutput {
    pub net: ScanPolicyNet,
    pub log: Vec<LogRow>,
}

/// Episodes per deterministic reduction chunk; parallel inside a chunk,
/// sequential accumulation across chunks keeps gradients independent of the
/// worker count.
const REDUCE_CHUNK: usize = 16;

/// Fixed validation set size and cadence for best-iterate selection. The
/// stochastic pathwise gradient keeps the optimizer wandering around the
/// optimum, so the final iterate is a lottery; scoring a frozen episode set
/// every few steps and returning the best-scoring weights removes that
/// variance at negligible cost.
const VALIDATE_EVERY: usize = 100;
const VALIDATION_EPISODES: usize = 512;
const VALIDATION_TAG: u64 = 0x56a1_1da7e;

/// Mean eval-mode loss of `net` on the frozen validation episode set.
fn validation_loss(
    cfg: &TrainConfig,
    net: &ScanPolicyNet,
    prior: &Posterior,
    grid: &AngularGrid,
) -> f64 {
    let losses: Vec<Option<f64>> = (0..VALIDATION_EPISODES)
        .into_par_iter()
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, VALIDATION_TAG, i as u64]));
            let snr = cfg.raw_snr_db.draw(&mut rng);
            let ch = ChannelParams::from_raw_snr_db(snr);
            let psi = sample_aoa(prior, grid, &mut rng);
            let trace = run_episode(
                &|p: &Posterior| crate::policy::neural_scan(net, p, grid),
                prior,
                psi,
                &ch,
                cfg.slots,
                grid,
                &cfg.loss,
                &mut rng,
            )
            .ok()?;
            Some(trace.loss)
        })
        .collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for l in losses.into_iter().flatten() {
        sum += l;
        n += 1;
    }
    sum / n.max(1) as f64
}

/// Adam-optimizes the scan network on freshly sampled episodes.
///
/// Writes a checkpoint to `checkpoint_path` every 500 steps and at the end.
pub fn train(cfg: &TrainConfig, checkpoint_path: Option<&Path>) -> Result<TrainOutput, TrainError> {
    cfg.validate().map_err(BeliefError::InvalidPrior)?;
    let grid = AngularGrid::new(cfg.n_bins);
    let prior = make_prior(&cfg.prior, &grid)?;
    let tau = cfg.tau_or_default();
    let mut net = ScanPolicyNet::init(cfg.n_bins, cfg.seed);

    let n_params = net.param_count();
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut log = Vec::with_capacity(cfg.steps);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let started = Instant::now();

    for step in 0..cfg.steps {
        let step_start = started.elapsed();
        let mut grad_sum = vec![0.0; n_params];
        let mut loss_sum = 0.0;
        let mut bad_episode: Option<u64> = None;

        let seeds: Vec<u64> = (0..cfg.batch_size)
            .map(|i| mix_seed(&[cfg.seed, step as u64, i as u64]))
            .collect();
        for chunk in seeds.chunks(REDUCE_CHUNK) {
            let results: Vec<(f64, Vec<f64>)> = chunk
                .par_iter()
                .map(|&ep_seed| {
                    let draw = draw_episode(cfg, &prior, &grid, ep_seed);
                    let ch = ChannelParams::from_raw_snr_db(draw.snr_db);
                    let mut tape = Tape::new();
                    let params = TapeParams::record(&mut tape, &net);
                    let ep = episode_on_tape(
                        &mut tape, &params, &prior, draw.psi_true, &draw.noise, &ch, &grid, tau,
                        &cfg.loss,
                    );
                    let loss = tape.val(ep.loss);
                    tape.backward(ep.loss);
                    (loss, params.flat_grads(&tape))
                })
                .collect();
            for ((loss, grads), &ep_seed) in results.into_iter().zip(chunk) {
                if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                    bad_episode.get_or_insert(ep_seed);
                }
                loss_sum += loss;
                for (acc, g) in grad_sum.iter_mut().zip(&grads) {
                    *acc += g;
                }
            }
        }

        if let Some(ep_seed) = bad_episode {
            let trace = dump_episode(cfg, &net, &prior, &grid, ep_seed);
            return Err(TrainError::NonFinite {
                step,
                episode_seed: ep_seed,
                quantity: "loss/gradient".into(),
                trace,
            });
        }

        let scale = 1.0 / cfg.batch_size as f64;
        let mean_loss = loss_sum * scale;
        let mut grad_norm2 = 0.0;
        for g in grad_sum.iter_mut() {
            *g *= scale;
            grad_norm2 += *g * *g;
        }
        let grad_norm = grad_norm2.sqrt();

        // Adam with bias correction
        let t = (step + 1) as f64;
        let mut flat = net.flat_params();
        let bc1 = 1.0 - cfg.adam_beta1.powf(t);
        let bc2 = 1.0 - cfg.adam_beta2.powf(t);
        for i in 0..n_params {
            let g = grad_sum[i];
            m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g;
            v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            flat[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
        net.set_flat_params(&flat);

        if (step + 1) % VALIDATE_EVERY == 0 || step + 1 == cfg.steps {
            let val = validation_loss(cfg, &net, &prior, &grid);
            if val.is_finite() && best.as_ref().map_or(true, |(b, _)| val < *b) {
                best = Some((val, flat.clone()));
            }
        }

        let wall_ms = (started.elapsed() - step_start).as_secs_f64() * 1e3;
        log.push(LogRow {
            step,
            loss: mean_loss,
            grad_norm,
            wall_ms,
        });

        if let Some(path) = checkpoint_path {
            if (step + 1) % 500 == 0 {
                net.save(path)?;
            }
        }
    }

    // return the best-validation iterate; the final checkpoint holds it too
    if let Some((_, flat)) = best {
        net.set_flat_params(&flat);
    }
    if let Some(path) = checkpoint_path {
        net.save(path)?;
    }
    Ok(TrainOutput { net, log })
}

/// Formats an evaluation-mode replay of an episode for blow-up diagnostics.
fn dump_episode(
    cfg: &TrainConfig,
    net: &ScanPolicyNet,
    prior: &Posterior,
    grid: &AngularGrid,
    ep_seed: u64,
) -> String {
    let draw = draw_episode(cfg, prior, grid, ep_seed);
    let mut out = format!(
        "episode seed {ep_seed}: psi_true={} rad, raw_snr={} dB\n",
        draw.psi_true, draw.snr_db
    );
    let ch = ChannelParams::from_raw_snr_db(draw.snr_db);
    let mut tape = Tape::new();
    let params = TapeParams::record(&mut tape, net);
    let ep = episode_on_tape(
        &mut tape,
        &params,
        prior,
        draw.psi_true,
        &draw.noise,
        &ch,
        grid,
        cfg.tau_or_default(),
        &cfg.loss,
    );
    for (i, &(start, length)) in ep.beams.iter().enumerate() {
        out.push_str(&format!(
            "slot {}: beam start={} length={} y_re={}\n",
            i + 1,
            tape.val(start),
            tape.val(length),
            tape.val(ep.measurements[i]),
        ));
    }
    for (i, &p) in ep.posteriors.iter().enumerate() {
        let probs = tape.vals(p);
        let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = probs.iter().sum();
        out.push_str(&format!("posterior {i}: sum={sum} max={max}\n"));
    }
    out.push_str(&format!("loss={}\n", tape.val(ep.loss)));
    out
}

/// Result of a finite-difference check of the end-to-end episode gradient.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_fd: f64,
    pub coords_checked: usize,
}

/// Relative error with a unit floor so near-zero coordinates are compared
/// absolutely (central differences carry ~1e-11 absolute noise).
pub fn grad_rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0)
}

/// Checks the analytic episode gradient against central finite differences
/// (step 1e-5) on `n_coords` randomly sampled parameter coordinates.
pub fn gradcheck(
    seed: u64,
    n_bins: usize,
    slots: usize,
    loss: &LossSpec,
    n_coords: usize,
) -> GradCheckReport {
    gradcheck_with_corruption(seed, n_bins, slots, loss, n_coords, 0.0)
}

/// Like [`gradcheck`], but scales every analytic gradient by
/// `1 + corruption` first — a negative-control fixture standing in for a
/// deliberately wrong derivative rule.
pub fn gradcheck_with_corruption(
    seed: u64,
    n_bins: usize,
    slots: usize,
    loss: &LossSpec,
    n_coords: usize,
    corruption: f64,
) -> GradCheckReport {
    let grid = AngularGrid::new(n_bins);
    let prior = make_prior(&PriorSpec::Uniform, &grid).unwrap();
    let net = ScanPolicyNet::init(n_bins, seed);
    let cfg = TrainConfig {
        n_bins,
        slots,
        epsilon: 0.1,
        prior: PriorSpec::Uniform,
        raw_snr_db: SnrSpec::Single(0.0),
        batch_size: 1,
        steps: 0,
        learning_rate: 1e-3,
        adam_beta1: 0.9,
        adam_beta2: 0.999,
        adam_eps: 1e-8,
        tau: None,
        seed,
        loss: *loss,
    };
    let draw = draw_episode(&cfg, &prior, &grid, mix_seed(&[seed, 0xabcd]));
    let ch = ChannelParams::from_raw_snr_db(draw.snr_db);
    let tau = cfg.tau_or_default();

    let loss_at = |flat: &[f64]| -> f64 {
        let mut probe = net.clone();
        probe.set_flat_params(flat);
        let mut tape = Tape::new();
        let params = TapeParams::record(&mut tape, &probe);
        let ep = episode_on_tape(
            &mut tape, &params, &prior, draw.psi_true, &draw.noise, &ch, &grid, tau, loss,
        );
        tape.val(ep.loss)
    };

    let analytic = {
        let mut tape = Tape::new();
        let params = TapeParams::record(&mut tape, &net);
        let ep = episode_on_tape(
            &mut tape, &params, &prior, draw.psi_true, &draw.noise, &ch, &grid, tau, loss,
        );
        tape.backward(ep.loss);
        let mut g = params.flat_grads(&tape);
        if corruption != 0.0 {
            g.iter_mut().for_each(|x| *x *= 1.0 + corruption);
        }
        g
    };

    let flat = net.flat_params();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5eed]));
    let total = flat.len();
    let coords: Vec<usize> = if n_coords >= total {
        (0..total).collect()
    } else {
        (0..n_coords).map(|_| rng.gen_range(0..total)).collect()
    };

    let h = 1e-5;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_fd: 0.0,
        coords_checked: coords.len(),
    };
    for &i in &coords {
        let mut plus = flat.clone();
        let mut minus = flat.clone();
        plus[i] += h;
        minus[i] -= h;
        let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let err = grad_rel_err(analytic[i], fd);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_coord = i;
            report.worst_analytic = analytic[i];
            report.worst_fd = fd;
        }
    }
    report
}
