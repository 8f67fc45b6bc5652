//! Circular-angle arithmetic, wrapped beams, and the discretization grid.
//!
//! Angles live on the half-open circle `(0, 2π]`; `wrap(0) = 2π`. A [`Beam`]
//! is a contiguous arc `(start, start + length]` that may cross the seam.

use std::f64::consts::TAU;

/// An angle in radians, canonicalized to the half-open circle `(0, 2π]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Angle(f64);

impl Angle {
    /// Wraps an arbitrary finite value onto `(0, 2π]`.
    pub fn wrap(x: f64) -> Angle {
        assert!(x.is_finite(), "cannot wrap non-finite angle {x}");
        let r = x.rem_euclid(TAU);
        Angle(if r == 0.0 { TAU } else { r })
    }

    pub fn radians(self) -> f64 {
        self.0
    }

    pub fn degrees(self) -> f64 {
        self.0.to_degrees()
    }
}

/// Smallest unsigned angular distance between two angles, in `[0, π]`.
pub fn circ_dist(a: Angle, b: Angle) -> f64 {
    let d = (a.0 - b.0).abs();
    d.min(TAU - d)
}

/// A contiguous beam (angular coverage region) `(start, start + length]`.
///
/// The arc may wrap past `2π`; length is in `(0, 2π]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beam {
    start: Angle,
    length: f64,
}

impl Beam {
    pub fn new(start: Angle, length: f64) -> Beam {
        assert!(
            length > 0.0 && length <= TAU,
            "beam length {length} outside (0, 2π]"
        );
        Beam { start, length }
    }

    pub fn start(&self) -> Angle {
        self.start
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Center of the arc, `wrap(start + length / 2)`.
    pub fn center(&self) -> Angle {
        Angle::wrap(self.start.0 + self.length / 2.0)
    }

    /// True iff `ψ` lies in the half-open arc `(start, start + length]`.
    pub fn contains(&self, psi: Angle) -> bool {
        let offset = Angle::wrap(psi.0 - self.start.0).radians();
        offset <= self.length
    }
}

/// A partition of `(0, 2π]` into `N` equal bins.
///
/// Bin `k` (0-based) covers `(k·w, (k+1)·w]` with `w = 2π/N`; its center is
/// `(k + 1/2)·w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AngularGrid {
    n_bins: usize,
}

impl AngularGrid {
    pub fn new(n_bins: usize) -> AngularGrid {
        assert!(n_bins > 0, "grid needs at least one bin");
        AngularGrid { n_bins }
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn bin_width(&self) -> f64 {
        TAU / self.n_bins as f64
    }

    /// Center of bin `k` (0-based).
    pub fn center(&self, k: usize) -> Angle {
        debug_assert!(k < self.n_bins);
        Angle::wrap((k as f64 + 0.5) * self.bin_width())
    }

    /// Start boundary of bin `k`, i.e. the beam start that makes bin `k` the
    /// first covered bin.
    pub fn bin_start(&self, k: usize) -> Angle {
        debug_assert!(k < self.n_bins);
        Angle::wrap(k as f64 * self.bin_width())
    }

    /// Index of the bin whose half-open interval contains `ψ`.
    pub fn bin_of(&self, psi: Angle) -> usize {
        let idx = (psi.radians() / self.bin_width()).ceil() as usize;
        idx.clamp(1, self.n_bins) - 1
    }

    /// A beam covering exactly bins `start_bin .. start_bin + count` (wrapping).
    pub fn bin_beam(&self, start_bin: usize, count: usize) -> Beam {
        assert!(count >= 1 && count <= self.n_bins);
        Beam::new(self.bin_start(start_bin), count as f64 * self.bin_width())
    }

    /// Per-bin {0,1} membership weights under the bin-center rule: bin `k`
    /// belongs to the beam iff its center does.
    pub fn bin_membership(&self, beam: &Beam) -> Vec<bool> {
        (0..self.n_bins).map(|k| beam.contains(self.center(k))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn wrap_periodicity() {
        assert!((Angle::wrap(TAU + 0.5).radians() - 0.5).abs() < 1e-12);
        assert_eq!(Angle::wrap(0.0).radians(), TAU);
        assert!((Angle::wrap(-PI / 2.0).radians() - 3.0 * PI / 2.0).abs() < 1e-12);
    }

    #[test]
    #[should_panic]
    fn wrap_rejects_non_finite() {
        Angle::wrap(f64::NAN);
    }

    #[test]
    fn circ_dist_cases() {
        assert_eq!(circ_dist(Angle::wrap(0.1), Angle::wrap(0.1)), 0.0);
        assert!((circ_dist(Angle::wrap(0.1), Angle::wrap(TAU - 0.1)) - 0.2).abs() < 1e-12);
        assert!((circ_dist(Angle::wrap(PI / 2.0), Angle::wrap(3.0 * PI / 2.0)) - PI).abs() < 1e-12);
    }

    #[test]
    fn beam_containment() {
        let b = Beam::new(Angle::wrap(PI), PI / 2.0);
        assert!(b.contains(Angle::wrap(1.1 * PI)));
        assert!(!b.contains(Angle::wrap(PI))); // half-open start excluded

        // wrapped coverage crossing 2π
        let b = Beam::new(Angle::wrap(3.0 * PI / 2.0), PI);
        assert!(b.contains(Angle::wrap(PI / 4.0)));
    }

    #[test]
    fn full_circle_contains_everything() {
        let b = Beam::new(Angle::wrap(1.234), TAU);
        for k in 0..100 {
            assert!(b.contains(Angle::wrap(k as f64 * 0.0628)));
        }
    }

    #[test]
    fn membership_small_grid() {
        let grid = AngularGrid::new(4);
        let beam = Beam::new(Angle::wrap(0.0), PI);
        assert_eq!(grid.bin_membership(&beam), vec![true, true, false, false]);
        let full = Beam::new(Angle::wrap(0.0), TAU);
        assert_eq!(grid.bin_membership(&full), vec![true, true, true, true]);
    }

    #[test]
    fn membership_matches_direct_containment_loop() {
        // brute-force containment oracle at N=360
        let grid = AngularGrid::new(360);
        let beam = Beam::new(Angle::wrap(0.5), 0.01);
        let got = grid.bin_membership(&beam);
        for k in 0..360 {
            let c = grid.center(k).radians();
            let inside = c > 0.5 && c <= 0.51;
            assert_eq!(got[k], inside, "bin {k}");
        }
    }

    #[test]
    fn bin_of_inverts_center() {
        for n in [4usize, 7, 360] {
            let grid = AngularGrid::new(n);
            for k in 0..n {
                assert_eq!(grid.bin_of(grid.center(k)), k);
            }
        }
    }

    proptest! {
        #[test]
        fn wrap_is_idempotent_and_periodic(x in -100.0f64..100.0, k in -5i32..5) {
            let w = Angle::wrap(x);
            prop_assert_eq!(Angle::wrap(w.radians()).radians(), w.radians());
            let shifted = Angle::wrap(x + k as f64 * TAU);
            prop_assert!((shifted.radians() - w.radians()).abs() < 1e-9);
        }

        #[test]
        fn circ_dist_metric(a in 0.0f64..TAU, b in 0.0f64..TAU, c in 0.0f64..TAU) {
            let (a, b, c) = (Angle::wrap(a + 0.1), Angle::wrap(b + 0.1), Angle::wrap(c + 0.1));
            prop_assert!((circ_dist(a, b) - circ_dist(b, a)).abs() < 1e-12);
            prop_assert!(circ_dist(a, b) <= PI + 1e-12);
            prop_assert!(circ_dist(a, c) <= circ_dist(a, b) + circ_dist(b, c) + 1e-9);
        }

        #[test]
        fn membership_length_within_one_bin(start in 0.0f64..TAU, len in 0.01f64..TAU, n in 4usize..64) {
            let grid = AngularGrid::new(n);
            let beam = Beam::new(Angle::wrap(start + 0.05), len);
            let covered: f64 = grid.bin_membership(&beam).iter().filter(|&&m| m).count() as f64
                * grid.bin_width();
            prop_assert!((covered - beam.length()).abs() <= grid.bin_width() + 1e-9);
        }
    }
}
