//! Scan policies: the learnable three-layer network plus the bisection and
//! hierarchical-posterior-matching baselines.

use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::angular::{Angle, AngularGrid, Beam};
use crate::channel::logistic;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

/// Which policy drives an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PolicyKind {
    Neural { checkpoint: String },
    Bisection,
    Hpm {
        #[serde(default = "default_max_depth")]
        max_depth: u32,
    },
}

/// Beams narrower than 2π/512 fall below one grid bin at N=360, so deeper
/// codebook levels add nothing.
pub fn default_max_depth() -> u32 {
    9
}

/// Recurrent scan network: dense N→4N (ReLU), 4N→2N (ReLU), 2N→2 (logistic),
/// weights shared across all time-slots.
///
/// Parameter count is 12N² + 10N + 2 (weights 12N² + 4N, biases 6N + 2).
#[derive(Debug, Clone, PartialEq)]
pub struct ScanPolicyNet {
    pub n_bins: usize,
    pub seed: u64,
    pub w1: Vec<f64>, // 4N × N
    pub b1: Vec<f64>, // 4N
    pub w2: Vec<f64>, // 2N × 4N
    pub b2: Vec<f64>, // 2N
    pub w3: Vec<f64>, // 2 × 2N
    pub b3: Vec<f64>, // 2
}

impl ScanPolicyNet {
    /// Symmetric uniform initialization `±√(6/(fan_in + fan_out))`, zero biases.
    pub fn init(n_bins: usize, seed: u64) -> ScanPolicyNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |rows: usize, cols: usize| -> Vec<f64> {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let n = n_bins;
        ScanPolicyNet {
            n_bins,
            seed,
            w1: layer(4 * n, n),
            b1: vec![0.0; 4 * n],
            w2: layer(2 * n, 4 * n),
            b2: vec![0.0; 2 * n],
            w3: layer(2, 2 * n),
            b3: vec![0.0; 2],
        }
    }

    /// All-zero network; emits `(o₁, o₂) = (0.5, 0.5)` for any input.
    pub fn zeros(n_bins: usize) -> ScanPolicyNet {
        let n = n_bins;
        ScanPolicyNet {
            n_bins,
            seed: 0,
            w1: vec![0.0; 4 * n * n],
            b1: vec![0.0; 4 * n],
            w2: vec![0.0; 8 * n * n],
            b2: vec![0.0; 2 * n],
            w3: vec![0.0; 4 * n],
            b3: vec![0.0; 2],
        }
    }

    pub fn param_count(&self) -> usize {
        let n = self.n_bins;
        12 * n * n + 10 * n + 2
    }

    /// Plain (tape-free) forward pass; returns the two logistic outputs.
    pub fn forward(&self, probs: &[f64]) -> (f64, f64) {
        assert_eq!(probs.len(), self.n_bins, "posterior/grid size mismatch");
        let n = self.n_bins;
        let mut h1 = vec![0.0; 4 * n];
        for (r, h) in h1.iter_mut().enumerate() {
            let row = &self.w1[r * n..(r + 1) * n];
            let z: f64 = row.iter().zip(probs).map(|(w, x)| w * x).sum();
            *h = (z + self.b1[r]).max(0.0);
        }
        let mut h2 = vec![0.0; 2 * n];
        for (r, h) in h2.iter_mut().enumerate() {
            let row = &self.w2[r * 4 * n..(r + 1) * 4 * n];
            let z: f64 = row.iter().zip(&h1).map(|(w, x)| w * x).sum();
            *h = (z + self.b2[r]).max(0.0);
        }
        let mut out = [0.0; 2];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.w3[r * 2 * n..(r + 1) * 2 * n];
            let z: f64 = row.iter().zip(&h2).map(|(w, x)| w * x).sum();
            *o = logistic(z + self.b3[r]);
        }
        (out[0], out[1])
    }

    /// Flattened parameters in checkpoint order: w1, b1, w2, b2, w3, b3.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for part in [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3] {
            out.extend_from_slice(part);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut off = 0;
        for part in [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ] {
            let len = part.len();
            part.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        let n = self.n_bins;
        writeln!(w, "SCANNET v1 N={} seed={}", n, self.seed)?;
        writeln!(w, "dims {} {} {} 2", n, 4 * n, 2 * n)?;
        let mut payload = Vec::with_capacity(self.param_count() * 8);
        for x in self.flat_params() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&payload)?;
        w.write_all(&fnv1a64(&payload).to_le_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ScanPolicyNet, CheckpointError> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<ScanPolicyNet, CheckpointError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let bad = |m: &str| CheckpointError::Format(m.to_string());

        let nl1 = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
        let header = std::str::from_utf8(&bytes[..nl1]).map_err(|_| bad("header not utf-8"))?;
        let mut it = header.split_whitespace();
        if it.next() != Some("SCANNET") || it.next() != Some("v1") {
            return Err(bad("not a SCANNET v1 checkpoint"));
        }
        let n: usize = it
            .next()
            .and_then(|t| t.strip_prefix("N="))
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("missing N="))?;
        let seed: u64 = it
            .next()
            .and_then(|t| t.strip_prefix("seed="))
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("missing seed="))?;

        let rest = &bytes[nl1 + 1..];
        let nl2 = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing dims line"))?;
        let dims = std::str::from_utf8(&rest[..nl2]).map_err(|_| bad("dims not utf-8"))?;
        let expect_dims = format!("dims {} {} {} 2", n, 4 * n, 2 * n);
        if dims != expect_dims {
            return Err(bad("layer dimensions do not match header"));
        }

        let mut net = ScanPolicyNet::zeros(n);
        net.seed = seed;
        let count = net.param_count();
        let body = &rest[nl2 + 1..];
        if body.len() != count * 8 + 8 {
            return Err(bad("payload length mismatch"));
        }
        let (payload, digest) = body.split_at(count * 8);
        let stored = u64::from_le_bytes(digest.try_into().unwrap());
        if fnv1a64(payload) != stored {
            return Err(bad("digest mismatch"));
        }
        let flat: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        net.set_flat_params(&flat);
        Ok(net)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Maps the network outputs to a probing beam: `start = wrap(2π·o₁)`,
/// `length = clamp(2π·o₂, 2π/N, 2π)`. The length floor keeps the sectored
/// gain `2π/ℓ` bounded.
pub fn neural_scan(net: &ScanPolicyNet, post: &crate::belief::Posterior, grid: &AngularGrid) -> Beam {
    assert_eq!(net.n_bins, grid.n_bins(), "checkpoint/grid size mismatch");
    let (o1, o2) = net.forward(post.probs());
    let start = Angle::wrap(TAU * o1);
    let length = (TAU * o2).clamp(grid.bin_width(), TAU);
    Beam::new(start, length)
}

/// Noiseless-optimal baseline: probe the first half (by mass) of the minimal
/// arc covering the posterior's support.
pub fn bisection_scan(post: &crate::belief::Posterior, grid: &AngularGrid) -> Beam {
    let n = grid.n_bins();
    let probs = post.probs();

    // minimal covering arc = complement of the largest circular run of
    // zero-mass bins; with full support the arc is the whole circle from bin 0
    let mut best_gap = 0usize;
    let mut gap_end = 0usize; // first bin after the winning gap
    let mut k = 0;
    while k < n {
        if probs[k] == 0.0 {
            let mut len = 0;
            while len < n && probs[(k + len) % n] == 0.0 {
                len += 1;
            }
            if len > best_gap {
                best_gap = len;
                gap_end = (k + len) % n;
            }
            k += len.max(1);
        } else {
            k += 1;
        }
    }
    let start = if best_gap == 0 { 0 } else { gap_end };
    let arc_len = n - best_gap;

    // split the arc where the contained mass is closest to 1/2
    let mut cum = 0.0;
    let mut best_count = 1;
    let mut best_diff = f64::INFINITY;
    for c in 1..=arc_len {
        cum += probs[(start + c - 1) % n];
        let diff = (cum - 0.5).abs();
        if diff < best_diff {
            best_diff = diff;
            best_count = c;
        }
    }
    grid.bin_beam(start, best_count)
}

/// Posterior matching over a fixed dyadic beam codebook: among all arcs
/// `(k·2π/2^d, (k+1)·2π/2^d]`, `d ∈ [max_depth]`, pick the one whose contained
/// mass is nearest 1/2; ties prefer shorter beams, then earlier start bins.
pub fn hpm_scan(post: &crate::belief::Posterior, grid: &AngularGrid, max_depth: u32) -> Beam {
    assert!(max_depth >= 1);
    let n = grid.n_bins();
    let probs = post.probs();
    let centers: Vec<f64> = (0..n).map(|k| grid.center(k).radians()).collect();

    let mut best: Option<(f64, f64, f64, Beam)> = None; // (diff, length, start_key)
    for d in 1..=max_depth {
        let arcs = 1u64 << d;
        let len = TAU / arcs as f64;
        for k in 0..arcs {
            let start = k as f64 * len;
            let beam = Beam::new(Angle::wrap(start), len);
            let mass: f64 = centers
                .iter()
                .zip(probs)
                .filter_map(|(&c, &p)| beam.contains(Angle::wrap(c)).then_some(p))
                .sum();
            let diff = (mass - 0.5).abs();
            let start_key = start; // 0 at the seam, increasing around the circle
            let better = match &best {
                None => true,
                Some((bd, bl, bs, _)) => {
                    diff < *bd
                        || (diff == *bd && (len < *bl || (len == *bl && start_key < *bs)))
                }
            };
            if better {
                best = Some((diff, len, start_key, beam));
            }
        }
    }
    best.unwrap().3
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::{make_prior, noiseless_update, Posterior, PriorSpec};
    use std::f64::consts::PI;

    #[test]
    fn zero_net_emits_half_circle_at_pi() {
        let grid = AngularGrid::new(16);
        let net = ScanPolicyNet::zeros(16);
        let prior = make_prior(&PriorSpec::Uniform, &grid).unwrap();
        let beam = neural_scan(&net, &prior, &grid);
        assert!((beam.start().radians() - PI).abs() < 1e-12);
        assert!((beam.length() - PI).abs() < 1e-12);
    }

    #[test]
    fn neural_length_respects_floor() {
        let grid = AngularGrid::new(8);
        let mut net = ScanPolicyNet::zeros(8);
        net.b3 = vec![0.0, -50.0]; // o₂ ≈ 0 → raw length ≈ 0
        let prior = make_prior(&PriorSpec::Uniform, &grid).unwrap();
        let beam = neural_scan(&net, &prior, &grid);
        assert_eq!(beam.length(), grid.bin_width());
    }

    #[test]
    fn neural_scan_is_deterministic() {
        let grid = AngularGrid::new(12);
        let net = ScanPolicyNet::init(12, 5);
        let prior = make_prior(&PriorSpec::Uniform, &grid).unwrap();
        assert_eq!(neural_scan(&net, &prior, &grid), neural_scan(&net, &prior, &grid));
    }

    #[test]
    fn param_count_matches_layout() {
        let net = ScanPolicyNet::init(8, 0);
        let total = net.w1.len() + net.b1.len() + net.w2.len() + net.b2.len() + net.w3.len() + net.b3.len();
        assert_eq!(total, net.param_count());
        assert_eq!(total, 12 * 64 + 10 * 8 + 2);
        assert_eq!(net.flat_params().len(), total);
    }

    #[test]
    fn checkpoint_round_trip_and_digest() {
        let net = ScanPolicyNet::init(8, 42);
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"SCANNET v1 N=8 seed=42\n"));
        let back = ScanPolicyNet::read_from(&mut &buf[..]).unwrap();
        assert_eq!(back, net);

        // corrupt one payload byte: digest check must fail
        let mut bad = buf.clone();
        let k = bad.len() / 2;
        bad[k] ^= 0xff;
        assert!(matches!(
            ScanPolicyNet::read_from(&mut &bad[..]),
            Err(CheckpointError::Format(_))
        ));
    }

    #[test]
    fn bisection_on_uniform_is_half_circle() {
        let grid = AngularGrid::new(360);
        let prior = make_prior(&PriorSpec::Uniform, &grid).unwrap();
        let beam = bisection_scan(&prior, &grid);
        assert_eq!(beam.start().radians(), TAU); // start bin 1
        assert!((beam.length() - PI).abs() < 1e-12);
    }

    #[test]
    fn bisection_splits_sub_arc() {
        // uniform on (0, π/2]: probe its first half
        let grid = AngularGrid::new(16);
        let mut w = vec![0.0; 16];
        for x in w.iter_mut().take(4) {
            *x = 0.25;
        }
        let post = Posterior::from_weights(w).unwrap();
        let beam = bisection_scan(&post, &grid);
        assert_eq!(beam.start().radians(), TAU);
        assert!((beam.length() - PI / 4.0).abs() < 1e-12);
    }

    #[test]
    fn bisection_picks_exact_half_mass() {
        let grid = AngularGrid::new(4);
        let post = Posterior::from_weights(vec![0.1, 0.4, 0.4, 0.1]).unwrap();
        let beam = bisection_scan(&post, &grid);
        assert_eq!(beam.start().radians(), TAU);
        assert!((beam.length() - PI).abs() < 1e-12); // bins {1,2}, mass 0.5
    }

    #[test]
    fn bisection_halves_support_each_slot() {
        let grid = AngularGrid::new(64);
        let mut post = make_prior(&PriorSpec::Uniform, &grid).unwrap();
        let psi = grid.center(50);
        for slot in 1..=5 {
            let beam = bisection_scan(&post, &grid);
            post = noiseless_update(&post, &grid, &beam, beam.contains(psi)).unwrap();
            let support = post.probs().iter().filter(|&&p| p > 0.0).count();
            assert_eq!(support, 64 >> slot);
        }
    }

    #[test]
    fn hpm_uniform_picks_first_half_circle() {
        let grid = AngularGrid::new(360);
        let prior = make_prior(&PriorSpec::Uniform, &grid).unwrap();
        let beam = hpm_scan(&prior, &grid, 9);
        assert!((beam.length() - PI).abs() < 1e-12);
        assert_eq!(beam.start().radians(), TAU);
    }

    #[test]
    fn hpm_descends_to_child_of_concentrated_arc() {
        // posterior uniform on one depth-3 arc → its depth-4 child has mass 1/2
        let grid = AngularGrid::new(64);
        let mut w = vec![0.0; 64];
        // depth-3 arc index 5 covers bins 40..48
        for x in w.iter_mut().skip(40).take(8) {
            *x = 0.125;
        }
        let post = Posterior::from_weights(w).unwrap();
        let beam = hpm_scan(&post, &grid, 9);
        assert!((beam.length() - TAU / 16.0).abs() < 1e-12);
        assert!((beam.start().radians() - 40.0 * grid.bin_width()).abs() < 1e-9);
    }

    #[test]
    fn hpm_tie_breaks_by_length_then_start() {
        // exhaustive codebook scan: all diffs tie at 1/2; smallest length then
        // smallest start wins → the depth-2 quarter arc over bin 1
        let grid = AngularGrid::new(4);
        let post = Posterior::from_weights(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let beam = hpm_scan(&post, &grid, 2);
        assert!((beam.length() - PI / 2.0).abs() < 1e-12);
        assert_eq!(beam.start().radians(), TAU);
    }

    #[test]
    fn hpm_matches_bisection_trajectory_on_uniform_noiseless() {
        let grid = AngularGrid::new(64);
        let psi = grid.center(13);
        let mut post = make_prior(&PriorSpec::Uniform, &grid).unwrap();
        for slot in 1..=5 {
            let beam = hpm_scan(&post, &grid, 9);
            post = noiseless_update(&post, &grid, &beam, beam.contains(psi)).unwrap();
            let support = post.probs().iter().filter(|&&p| p > 0.0).count();
            assert_eq!(support, 64 >> slot); // dyadic arc of length 2π/2^slot
        }
    }
}
