//! Synthetic multicarrier channel over a planar grid of terminal positions.
//!
//! The channel at location `n` and subcarrier `m` is a line-of-sight ray plus
//! `P` single-bounce rays through scatterers that are fixed for the whole scene,
//! scaled by a spatially correlated log-normal shadowing gain:
//!
//! ```text
//! h_n[m] = s_n * ( a_0(n) e^{-j 2 pi f_m tau_0(n)} + sum_p a_p(n) e^{-j 2 pi f_m tau_p(n)} )
//! f_m    = f0 + m * scs
//! ```
//!
//! Noisy pilot observations for the two ends of the link are produced by
//! [`observe`].

use std::f64::consts::TAU;

use nalgebra::{Cholesky, DMatrix};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Line-of-sight amplitude at 1 m.
pub const REFERENCE_GAIN: f64 = 1.0;

/// Diagonal jitter added before factoring the shadowing correlation matrix.
const CHOLESKY_JITTER: f64 = 1e-10;

pub type Position = [f64; 3];

pub fn distance(a: &Position, b: &Position) -> f64 {
    squared_distance(a, b).sqrt()
}

pub fn squared_distance(a: &Position, b: &Position) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Terminal positions plus the receiver they talk to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationGrid {
    pub positions: Vec<Position>,
    pub spacing: f64,
    pub receiver: Position,
}

impl LocationGrid {
    /// Wraps an arbitrary position list. Positions must be distinct.
    pub fn from_positions(
        positions: Vec<Position>,
        spacing: f64,
        receiver: Position,
    ) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Config("grid needs at least one position".into()));
        }
        if positions.iter().flatten().any(|v| !v.is_finite())
            || receiver.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Config("grid coordinates must be finite".into()));
        }
        let mut sorted: Vec<&Position> = positions.iter().collect();
        sorted.sort_by(|a, b| {
            a[0].total_cmp(&b[0])
                .then(a[1].total_cmp(&b[1]))
                .then(a[2].total_cmp(&b[2]))
        });
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("grid positions must be distinct".into()));
        }
        Ok(Self {
            positions,
            spacing,
            receiver,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Rectangular grid parameters. The default is a 20 x 20 grid with 10 m
/// spacing on the ground, receiver mounted 10 m up at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub spacing: f64,
    pub z: f64,
    pub receiver: Position,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x_range: [100.0, 290.0],
            y_range: [-100.0, 90.0],
            spacing: 10.0,
            z: 0.0,
            receiver: [0.0, 0.0, 10.0],
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<LocationGrid> {
        build_grid(
            self.x_range,
            self.y_range,
            self.spacing,
            self.z,
            self.receiver,
        )
    }
}

fn axis_points(range: [f64; 2], spacing: f64, axis: &str) -> Result<Vec<f64>> {
    let [lo, hi] = range;
    if !lo.is_finite() || !hi.is_finite() || hi < lo {
        return Err(Error::Config(format!("empty {axis} range [{lo}, {hi}]")));
    }
    // Small slack so that exact multiples survive rounding in the division.
    let steps = ((hi - lo) / spacing + 1e-9).floor() as usize;
    Ok((0..=steps).map(|i| lo + i as f64 * spacing).collect())
}

/// Builds a row-major grid (x varies fastest) of all points stepping by
/// `spacing` from the lower end of each range.
pub fn build_grid(
    x_range: [f64; 2],
    y_range: [f64; 2],
    spacing: f64,
    z: f64,
    receiver: Position,
) -> Result<LocationGrid> {
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::Config(format!(
            "grid spacing must be positive, got {spacing}"
        )));
    }
    if !z.is_finite() {
        return Err(Error::Config("terminal height must be finite".into()));
    }
    let xs = axis_points(x_range, spacing, "x")?;
    let ys = axis_points(y_range, spacing, "y")?;
    let positions = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| [x, y, z]))
        .collect();
    LocationGrid::from_positions(positions, spacing, receiver)
}

/// Axis-aligned box, used to place scatterers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Position,
    pub max: Position,
}

impl BoundingBox {
    fn sample<R: Rng>(&self, rng: &mut R) -> Position {
        let mut p = [0.0; 3];
        for (k, v) in p.iter_mut().enumerate() {
            *v = self.min[k] + rng.random::<f64>() * (self.max[k] - self.min[k]);
        }
        p
    }
}

/// Channel synthesis parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    /// Frequency of subcarrier 0, Hz.
    pub carrier_hz: f64,
    pub subcarriers: usize,
    /// Subcarrier spacing, Hz.
    pub scs_hz: f64,
    pub path_loss_exponent: f64,
    pub scatterers: usize,
    pub scatterer_region: BoundingBox,
    /// Amplitude of a scatterer path relative to a line-of-sight path of the
    /// same total length.
    pub scatterer_gain: f64,
    pub shadowing_sigma_db: f64,
    /// Distance at which the log-domain shadowing correlation falls to 1/e, m.
    pub shadowing_corr_distance: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            carrier_hz: 2.0e9,
            subcarriers: 32,
            scs_hz: 15.0e3,
            path_loss_exponent: 2.0,
            scatterers: 10,
            scatterer_region: BoundingBox {
                min: [-20.0, -20.0, 0.0],
                max: [20.0, 20.0, 20.0],
            },
            scatterer_gain: 1.0,
            shadowing_sigma_db: 4.0,
            shadowing_corr_distance: 50.0,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.subcarriers < 1 {
            return bad("need at least one subcarrier".into());
        }
        if !(self.scs_hz > 0.0) || !self.scs_hz.is_finite() {
            return bad(format!(
                "subcarrier spacing must be positive, got {}",
                self.scs_hz
            ));
        }
        if !(self.carrier_hz > 0.0) || !self.carrier_hz.is_finite() {
            return bad(format!(
                "carrier frequency must be positive, got {}",
                self.carrier_hz
            ));
        }
        if !(self.shadowing_corr_distance > 0.0) || !self.shadowing_corr_distance.is_finite() {
            return bad(format!(
                "shadowing correlation distance must be positive, got {}",
                self.shadowing_corr_distance
            ));
        }
        if !self.path_loss_exponent.is_finite() || !self.scatterer_gain.is_finite() {
            return bad("path loss exponent and scatterer gain must be finite".into());
        }
        if !(self.shadowing_sigma_db >= 0.0) || !self.shadowing_sigma_db.is_finite() {
            return bad(format!(
                "shadowing sigma must be >= 0, got {}",
                self.shadowing_sigma_db
            ));
        }
        let r = &self.scatterer_region;
        if (0..3).any(|k| !r.min[k].is_finite() || !r.max[k].is_finite() || r.max[k] < r.min[k]) {
            return bad("scatterer region must have min <= max on every axis".into());
        }
        Ok(())
    }

    pub fn frequency(&self, m: usize) -> f64 {
        self.carrier_hz + m as f64 * self.scs_hz
    }
}

/// A point scatterer with a fixed reflection phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Scatterer {
    pub position: Position,
    pub phase: f64,
}

/// Scatterers of the scene described by `cfg`, drawn uniformly inside the
/// configured region.
pub fn scatterers(cfg: &ChannelConfig) -> Vec<Scatterer> {
    let mut rng = rng::stream(cfg.seed, &[rng::tag("scatterers")]);
    (0..cfg.scatterers)
        .map(|_| {
            let position = cfg.scatterer_region.sample(&mut rng);
            let phase = rng.random::<f64>() * TAU;
            Scatterer { position, phase }
        })
        .collect()
}

/// Log-domain shadowing values in dB, one per location, with correlation
/// `exp(-d / corr_distance)` between locations at distance `d`.
pub fn shadowing_db<R: Rng>(
    positions: &[Position],
    sigma_db: f64,
    corr_distance: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = positions.len();
    if sigma_db == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let corr = DMatrix::from_fn(n, n, |i, j| {
        let c = (-distance(&positions[i], &positions[j]) / corr_distance).exp();
        if i == j {
            c + CHOLESKY_JITTER
        } else {
            c
        }
    });
    let chol = Cholesky::new(corr).ok_or_else(|| {
        Error::Data("shadowing correlation matrix is not positive definite".into())
    })?;
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let field = chol.l() * nalgebra::DVector::from_vec(white);
    Ok(field.iter().map(|g| sigma_db * g).collect())
}

fn ray(amplitude: f64, path_length: f64, f: f64) -> Complex64 {
    let cycles = f * (path_length / SPEED_OF_LIGHT);
    Complex64::from_polar(amplitude, -TAU * cycles.fract())
}

/// Synthesizes the N x M true channel matrix (rows = locations).
pub fn synthesize_csi(grid: &LocationGrid, cfg: &ChannelConfig) -> Result<DMatrix<Complex64>> {
    cfg.validate()?;
    let n = grid.len();
    let m = cfg.subcarriers;
    let rx = grid.receiver;
    let half_ple = cfg.path_loss_exponent / 2.0;

    let scatterers = scatterers(cfg);
    let mut shadow_rng = rng::stream(cfg.seed, &[rng::tag("shadowing")]);
    let shadow = shadowing_db(
        &grid.positions,
        cfg.shadowing_sigma_db,
        cfg.shadowing_corr_distance,
        &mut shadow_rng,
    )?;

    let mut h = DMatrix::zeros(n, m);
    for (row, pos) in grid.positions.iter().enumerate() {
        let d0 = distance(pos, &rx);
        if d0 == 0.0 {
            return Err(Error::Config(format!(
                "location {row} coincides with the receiver"
            )));
        }
        let a0 = REFERENCE_GAIN * d0.powf(-half_ple);
        let paths: Vec<(f64, f64, f64)> = scatterers
            .iter()
            .map(|s| {
                let len = distance(&rx, &s.position) + distance(&s.position, pos);
                (
                    cfg.scatterer_gain * REFERENCE_GAIN * len.powf(-half_ple),
                    len,
                    s.phase,
                )
            })
            .collect();
        let gain = 10f64.powf(shadow[row] / 20.0);
        for col in 0..m {
            let f = cfg.frequency(col);
            let mut acc = ray(a0, d0, f);
            for &(amp, len, phase) in &paths {
                acc += ray(amp, len, f) * Complex64::from_polar(1.0, phase);
            }
            h[(row, col)] = acc * gain;
        }
    }
    Ok(h)
}

/// One end of the link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum User {
    A,
    B,
}

impl User {
    fn label(self) -> u64 {
        match self {
            User::A => rng::tag("user-a"),
            User::B => rng::tag("user-b"),
        }
    }
}

impl std::str::FromStr for User {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "A" | "alice" => Ok(User::A),
            "b" | "B" | "bob" => Ok(User::B),
            other => Err(Error::Argument(format!(
                "unknown user {other:?}, expected a or b"
            ))),
        }
    }
}

impl std::fmt::Display for User {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            User::A => "a",
            User::B => "b",
        })
    }
}

pub fn mean_power(h: &DMatrix<Complex64>) -> f64 {
    if h.is_empty() {
        return 0.0;
    }
    h.iter().map(|z| z.norm_sqr()).sum::<f64>() / h.len() as f64
}

/// Per-complex-sample noise variance for `snr_db` against the grid-wide mean
/// channel power. `+inf` means noiseless.
pub fn noise_variance(h: &DMatrix<Complex64>, snr_db: f64) -> Result<f64> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::Config(format!(
            "snr must be finite or +inf, got {snr_db}"
        )));
    }
    if snr_db == f64::INFINITY {
        return Ok(0.0);
    }
    Ok(mean_power(h) / 10f64.powf(snr_db / 10.0))
}

fn check_finite(h: &DMatrix<Complex64>, what: &str) -> Result<()> {
    match h
        .iter()
        .position(|z| !z.re.is_finite() || !z.im.is_finite())
    {
        Some(i) => Err(Error::Data(format!(
            "{what} has a non-finite entry at flat index {i}"
        ))),
        None => Ok(()),
    }
}

/// Pilot exchange for one user: a BPSK pilot `x` goes through the channel, is
/// received with circularly-symmetric Gaussian noise, and the estimate is
/// formed as `y * x`.
pub fn observe(
    true_csi: &DMatrix<Complex64>,
    snr_db: f64,
    user: User,
    seed: u64,
) -> Result<DMatrix<Complex64>> {
    check_finite(true_csi, "true channel")?;
    let variance = noise_variance(true_csi, snr_db)?;
    let mut rng = rng::stream(seed, &[user.label()]);
    let pilot = if rng.random::<bool>() { 1.0 } else { -1.0 };
    if variance == 0.0 {
        return Ok(true_csi.map(|h| (h * pilot) * pilot));
    }
    let scale = (variance / 2.0).sqrt();
    let mut out = true_csi.clone();
    // Row-major draw order, independent of matrix storage layout.
    for r in 0..out.nrows() {
        for c in 0..out.ncols() {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            let noise = Complex64::new(scale * re, scale * im);
            let y = out[(r, c)] * pilot + noise;
            out[(r, c)] = y * pilot;
        }
    }
    Ok(out)
}

/// True channel and both users' channel estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSet {
    pub true_csi: DMatrix<Complex64>,
    pub observed_a: DMatrix<Complex64>,
    pub observed_b: DMatrix<Complex64>,
    pub snr_db: f64,
    pub noise_variance: f64,
}

impl CsiSet {
    pub fn new(true_csi: DMatrix<Complex64>, snr_db: f64, seed: u64) -> Result<Self> {
        let observed_a = observe(&true_csi, snr_db, User::A, seed)?;
        let observed_b = observe(&true_csi, snr_db, User::B, seed)?;
        let noise_variance = noise_variance(&true_csi, snr_db)?;
        Ok(Self {
            true_csi,
            observed_a,
            observed_b,
            snr_db,
            noise_variance,
        })
    }

    pub fn observed(&self, user: User) -> &DMatrix<Complex64> {
        match user {
            User::A => &self.observed_a,
            User::B => &self.observed_b,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean_config() -> ChannelConfig {
        ChannelConfig {
            scatterers: 0,
            shadowing_sigma_db: 0.0,
            ..ChannelConfig::default()
        }
    }

    #[test]
    fn default_grid_has_400_points() {
        let grid = GridSpec::default().build().unwrap();
        assert_eq!(grid.len(), 400);
        assert_eq!(grid.positions[0], [100.0, -100.0, 0.0]);
        assert_eq!(grid.positions[19], [290.0, -100.0, 0.0]);
        assert_eq!(grid.positions[399], [290.0, 90.0, 0.0]);
        assert_eq!(grid.receiver, [0.0, 0.0, 10.0]);
    }

    #[test]
    fn degenerate_and_two_point_grids() {
        let one = build_grid([0.0, 0.0], [0.0, 0.0], 1.0, 1.5, [0.0; 3]).unwrap();
        assert_eq!(one.positions, vec![[0.0, 0.0, 1.5]]);

        let two = build_grid([0.0, 10.0], [0.0, 0.0], 10.0, 0.0, [0.0; 3]).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(distance(&two.positions[0], &two.positions[1]), 10.0);
    }

    #[test]
    fn grid_rows_step_by_spacing() {
        let g = build_grid([0.0, 20.0], [5.0, 15.0], 5.0, 0.0, [0.0; 3]).unwrap();
        assert_eq!(g.len(), 5 * 3);
        for row in g.positions.chunks(5) {
            for w in row.windows(2) {
                assert_eq!(w[1][0] - w[0][0], 5.0);
                assert_eq!(w[1][1], w[0][1]);
            }
        }
    }

    #[test]
    fn bad_grid_parameters() {
        assert!(matches!(
            build_grid([1.0, 0.0], [0.0, 1.0], 1.0, 0.0, [0.0; 3]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_grid([0.0, 1.0], [0.0, 1.0], 0.0, 0.0, [0.0; 3]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_grid([0.0, 1.0], [0.0, 1.0], -2.0, 0.0, [0.0; 3]),
            Err(Error::Config(_))
        ));
        assert!(LocationGrid::from_positions(
            vec![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]],
            1.0,
            [0.0; 3]
        )
        .is_err());
    }

    #[test]
    fn config_validation() {
        let ok = ChannelConfig::default();
        ok.validate().unwrap();
        for broken in [
            ChannelConfig {
                subcarriers: 0,
                ..ok.clone()
            },
            ChannelConfig {
                scs_hz: 0.0,
                ..ok.clone()
            },
            ChannelConfig {
                carrier_hz: -1.0,
                ..ok.clone()
            },
            ChannelConfig {
                shadowing_corr_distance: 0.0,
                ..ok.clone()
            },
        ] {
            assert!(matches!(broken.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn single_path_is_flat_with_linear_phase() {
        let grid =
            LocationGrid::from_positions(vec![[120.0, 35.0, 0.0]], 10.0, [0.0, 0.0, 10.0]).unwrap();
        let cfg = ChannelConfig {
            scs_hz: 30e3,
            ..clean_config()
        };
        let h = synthesize_csi(&grid, &cfg).unwrap();
        let d = distance(&grid.positions[0], &grid.receiver);
        let expected_amp = d.powf(-1.0);
        let tau = d / SPEED_OF_LIGHT;
        let step = Complex64::from_polar(1.0, -TAU * cfg.scs_hz * tau);
        for m in 0..cfg.subcarriers {
            assert!((h[(0, m)].norm() - expected_amp).abs() < 1e-12 * expected_amp);
            if m > 0 {
                let ratio = h[(0, m)] / h[(0, m - 1)];
                assert!((ratio - step).norm() < 1e-9, "m={m} ratio={ratio}");
            }
        }
    }

    #[test]
    fn equidistant_locations_share_magnitude_profile() {
        let grid = LocationGrid::from_positions(
            vec![[100.0, 50.0, 0.0], [100.0, -50.0, 0.0]],
            10.0,
            [0.0, 0.0, 10.0],
        )
        .unwrap();
        let h = synthesize_csi(&grid, &clean_config()).unwrap();
        for m in 0..h.ncols() {
            assert!((h[(0, m)].norm() - h[(1, m)].norm()).abs() < 1e-15);
        }
    }

    fn selectivity(h: &DMatrix<Complex64>) -> f64 {
        let rows = h.nrows();
        (0..rows)
            .map(|r| {
                let mags: Vec<f64> = h.row(r).iter().map(|z| z.norm()).collect();
                let mean = mags.iter().sum::<f64>() / mags.len() as f64;
                let var = mags.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / mags.len() as f64;
                var.sqrt() / mean
            })
            .sum::<f64>()
            / rows as f64
    }

    #[test]
    fn wider_band_is_more_frequency_selective() {
        let grid = GridSpec::default().build().unwrap();
        let base = ChannelConfig {
            scatterers: 20,
            scatterer_region: BoundingBox {
                min: [0.0, -150.0, 0.0],
                max: [350.0, 150.0, 30.0],
            },
            seed: 3,
            ..ChannelConfig::default()
        };
        let narrow = synthesize_csi(
            &grid,
            &ChannelConfig {
                scs_hz: 15e3,
                ..base.clone()
            },
        )
        .unwrap();
        let wide = synthesize_csi(
            &grid,
            &ChannelConfig {
                scs_hz: 1e6,
                ..base
            },
        )
        .unwrap();
        let (sn, sw) = (selectivity(&narrow), selectivity(&wide));
        assert!(sw > sn, "narrow {sn} wide {sw}");
    }

    #[test]
    fn synthesis_is_deterministic() {
        let grid = GridSpec::default().build().unwrap();
        let cfg = ChannelConfig {
            seed: 11,
            ..ChannelConfig::default()
        };
        let a = synthesize_csi(&grid, &cfg).unwrap();
        let b = synthesize_csi(&grid, &cfg).unwrap();
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits()));
        let c = synthesize_csi(&grid, &ChannelConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_observation_is_exact() {
        let grid = GridSpec::default().build().unwrap();
        let h = synthesize_csi(&grid, &ChannelConfig::default()).unwrap();
        for user in [User::A, User::B] {
            assert_eq!(observe(&h, f64::INFINITY, user, 5).unwrap(), h);
        }
    }

    #[test]
    fn snr_calibration_at_zero_db() {
        let grid = GridSpec::default().build().unwrap();
        let h = synthesize_csi(&grid, &ChannelConfig::default()).unwrap();
        assert!(h.len() >= 10_000 / 2);
        // 400 x 32 = 12800 entries
        let y = observe(&h, 0.0, User::B, 9).unwrap();
        let noise = mean_power(&(&y - &h));
        let ratio = noise / mean_power(&h);
        assert!((ratio - 1.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn users_get_independent_noise() {
        let grid = GridSpec::default().build().unwrap();
        let h = synthesize_csi(&grid, &ChannelConfig::default()).unwrap();
        let set = CsiSet::new(h.clone(), 10.0, 4).unwrap();
        assert_ne!(set.observed_a, set.observed_b);
        let na = &set.observed_a - &h;
        let nb = &set.observed_b - &h;
        let cross: Complex64 = na.iter().zip(nb.iter()).map(|(a, b)| a * b.conj()).sum();
        let norm = (mean_power(&na) * mean_power(&nb)).sqrt() * h.len() as f64;
        let rho = cross.norm() / norm;
        assert!(rho < 3.0 / (h.len() as f64).sqrt(), "rho {rho}");
    }

    #[test]
    fn observe_rejects_bad_input() {
        let mut h = DMatrix::from_element(2, 2, Complex64::new(1.0, 0.0));
        assert!(matches!(
            observe(&h, f64::NAN, User::A, 0),
            Err(Error::Config(_))
        ));
        h[(1, 1)] = Complex64::new(f64::NAN, 0.0);
        assert!(matches!(observe(&h, 10.0, User::A, 0), Err(Error::Data(_))));
    }

    #[test]
    fn shadowing_correlation_at_corr_distance() {
        let dc = 50.0;
        let positions = [[0.0, 0.0, 0.0], [dc, 0.0, 0.0]];
        let mut rng = rng::stream(21, &[]);
        let draws: Vec<Vec<f64>> = (0..4000)
            .map(|_| shadowing_db(&positions, 4.0, dc, &mut rng).unwrap())
            .collect();
        let mean = |k: usize| draws.iter().map(|d| d[k]).sum::<f64>() / draws.len() as f64;
        let (m0, m1) = (mean(0), mean(1));
        let cov: f64 = draws.iter().map(|d| (d[0] - m0) * (d[1] - m1)).sum();
        let v0: f64 = draws.iter().map(|d| (d[0] - m0).powi(2)).sum();
        let v1: f64 = draws.iter().map(|d| (d[1] - m1).powi(2)).sum();
        let rho = cov / (v0 * v1).sqrt();
        let target = (-1.0f64).exp();
        assert!((rho - target).abs() < 0.15, "rho {rho}");
        // decays with distance
        let far = [[0.0, 0.0, 0.0], [4.0 * dc, 0.0, 0.0]];
        let draws_far: Vec<Vec<f64>> = (0..4000)
            .map(|_| shadowing_db(&far, 4.0, dc, &mut rng).unwrap())
            .collect();
        let cov_far: f64 = draws_far.iter().map(|d| d[0] * d[1]).sum::<f64>() / 4000.0 / 16.0;
        assert!(cov_far < rho);
    }
}
