//! Surface configuration, phase quantization, effective channels, sensing.
//!
//! The surface applies the diagonal reflection matrix `Theta = diag(v^H)` with
//! `|v_i| <= 1`; a power detector behind the surface absorbs the `1 - eta`
//! fraction of the impinging power that is not reflected.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::geometry::ChannelSet;
use crate::{Result, SimError};

/// Phase resolution of the surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quantization {
    /// Ideal continuous phases.
    Continuous,
    /// `2^q`-level discrete phases.
    Bits(u32),
}

/// Which discrete phase grid a quantizer uses.
///
/// `FullCircle` is the default: `2^q` phases uniform over `[0, 2 pi)`.
/// `HalfCircle` is a compatibility variant spanning only `[0, pi]` with
/// `2^(q-1) + 1` points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PhaseGrid {
    #[default]
    FullCircle,
    HalfCircle,
}

/// One surface configuration: the weight vector plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct HrisConfig {
    /// Element weights; the applied reflection matrix is `diag(v^H)`.
    pub v: DVector<Complex64>,
    /// Phase resolution the weights satisfy.
    pub quantization: Quantization,
    /// Reflected power fraction the configuration was built for.
    pub eta: f64,
}

impl HrisConfig {
    /// Wraps an arbitrary weight vector without touching it.
    pub fn raw(v: DVector<Complex64>, quantization: Quantization, eta: f64) -> Self {
        HrisConfig {
            v,
            quantization,
            eta,
        }
    }

    pub fn n_elements(&self) -> usize {
        self.v.len()
    }
}

/// The discrete phase set for `q` bits on the default full-circle grid.
pub fn quantization_set(q: u32) -> Vec<f64> {
    quantization_set_with(q, PhaseGrid::FullCircle)
}

/// The discrete phase set for `q` bits on an explicit grid convention.
pub fn quantization_set_with(q: u32, grid: PhaseGrid) -> Vec<f64> {
    let step = 2.0 * PI / 2f64.powi(q as i32);
    let count = match grid {
        PhaseGrid::FullCircle => 1usize << q,
        PhaseGrid::HalfCircle => (1usize << q) / 2 + 1,
    };
    (0..count).map(|m| m as f64 * step).collect()
}

/// Nearest grid phase by circular distance; ties go to the smaller phase.
pub fn snap_phase(phase: f64, set: &[f64]) -> f64 {
    let circ = |a: f64, b: f64| {
        let d = (a - b).rem_euclid(2.0 * PI);
        d.min(2.0 * PI - d)
    };
    let mut best = set[0];
    let mut best_d = circ(phase, set[0]);
    for &s in &set[1..] {
        let d = circ(phase, s);
        // Strict improvement only: on an exact tie the smaller phase,
        // visited first, wins.
        if d < best_d - 0.0 && (best_d - d) > 1e-15 {
            best = s;
            best_d = d;
        } else if (d - best_d).abs() <= 1e-15 && s < best {
            best = s;
            best_d = d;
        }
    }
    best
}

/// Projects a weight vector onto unit modulus and, for `Bits(q)`, onto the
/// discrete phase grid. Ties snap toward the smaller phase. A zero entry has
/// no phase and is a domain error.
pub fn quantize_config(
    v: &DVector<Complex64>,
    quantization: Quantization,
    eta: f64,
) -> Result<HrisConfig> {
    quantize_config_with(v, quantization, PhaseGrid::FullCircle, eta)
}

/// [`quantize_config`] on an explicit phase-grid convention.
pub fn quantize_config_with(
    v: &DVector<Complex64>,
    quantization: Quantization,
    grid: PhaseGrid,
    eta: f64,
) -> Result<HrisConfig> {
    let set = match quantization {
        Quantization::Continuous => Vec::new(),
        Quantization::Bits(q) => quantization_set_with(q, grid),
    };
    let mut out = DVector::zeros(v.len());
    for (i, e) in v.iter().enumerate() {
        if e.norm() == 0.0 {
            return Err(SimError::Domain(format!(
                "cannot quantize element {i}: zero entry has no phase"
            )));
        }
        let phase = match quantization {
            Quantization::Continuous => e.arg(),
            Quantization::Bits(_) => snap_phase(e.arg().rem_euclid(2.0 * PI), &set),
        };
        out[i] = Complex64::from_polar(1.0, phase);
    }
    Ok(HrisConfig {
        v: out,
        quantization,
        eta,
    })
}

fn check_config(config: &HrisConfig, n: usize) -> Result<()> {
    if config.v.len() != n {
        return Err(SimError::InvalidParameter(format!(
            "configuration has {} elements, channels expect {n}",
            config.v.len()
        )));
    }
    Ok(())
}

/// Effective BS-to-UE-k downlink channel through the configured surface:
/// `(sqrt(eta) h_k^H Theta G + h_Dk^H)^H`, an `M`-vector.
pub fn effective_channel(
    config: &HrisConfig,
    channels: &ChannelSet,
    k: usize,
) -> Result<DVector<Complex64>> {
    check_config(config, channels.g.nrows())?;
    if k >= channels.k_users() {
        return Err(SimError::InvalidParameter(format!(
            "user index {k} out of range ({} users)",
            channels.k_users()
        )));
    }
    Ok(reflected_channel(config, channels, k)? + &channels.h_d[k])
}

/// Reflected-path component of [`effective_channel`] alone:
/// `sqrt(eta) (h_k^H Theta G)^H`.
pub fn reflected_channel(
    config: &HrisConfig,
    channels: &ChannelSet,
    k: usize,
) -> Result<DVector<Complex64>> {
    check_config(config, channels.g.nrows())?;
    // (v^H diag(h_k^*) G)^H = G^H (h_k o v).
    let hv = channels.h[k].component_mul(&config.v);
    Ok(channels.g.adjoint() * hv * Complex64::from(config.eta.sqrt()))
}

/// Expected detector power during a BS pilot: the surface absorbs `1 - eta`
/// of the precoded pilot arriving over `G`, plus noise.
pub fn sense_power_bs(
    config: &HrisConfig,
    channels: &ChannelSet,
    w: &DVector<Complex64>,
    pilot_power: f64,
    noise_power: f64,
) -> Result<f64> {
    check_config(config, channels.g.nrows())?;
    if w.len() != channels.g.ncols() {
        return Err(SimError::InvalidParameter(format!(
            "precoder length {} does not match {} BS antennas",
            w.len(),
            channels.g.ncols()
        )));
    }
    let field = (config.v.adjoint() * &channels.g * w)[(0, 0)];
    Ok((1.0 - config.eta) * pilot_power * field.norm_sqr() + noise_power)
}

/// Expected detector power while the listed users transmit pilots
/// simultaneously; their surface-side channels add coherently.
pub fn sense_power_ue(
    config: &HrisConfig,
    channels: &ChannelSet,
    active: &[usize],
    pilot_power: f64,
    noise_power: f64,
) -> Result<f64> {
    check_config(config, channels.g.nrows())?;
    if active.is_empty() {
        return Err(SimError::InvalidParameter(
            "at least one active user is required to sense".into(),
        ));
    }
    let mut h_sum: DVector<Complex64> = DVector::zeros(channels.g.nrows());
    for &k in active {
        if k >= channels.k_users() {
            return Err(SimError::InvalidParameter(format!(
                "active user {k} out of range ({} users)",
                channels.k_users()
            )));
        }
        h_sum += &channels.h[k];
    }
    let field = config.v.dotc(&h_sum);
    Ok((1.0 - config.eta) * pilot_power * field.norm_sqr() + noise_power)
}

/// Circularly symmetric complex Gaussian draw with total variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(var: f64, rng: &mut R) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

pub(crate) fn sampled_power<R: Rng + ?Sized>(
    mean_field_sq: f64,
    noise_power: f64,
    n_pilots: u32,
    rng: &mut R,
) -> f64 {
    let amp = mean_field_sq.sqrt();
    let mut acc = 0.0;
    for _ in 0..n_pilots.max(1) {
        let y = Complex64::new(amp, 0.0) + complex_gaussian(noise_power, rng);
        acc += y.norm_sqr();
    }
    acc / n_pilots.max(1) as f64
}

/// Finite-sample variant of [`sense_power_bs`]: averages `n_pilots` noisy
/// detector reads instead of returning the expectation.
pub fn sense_power_bs_sampled<R: Rng + ?Sized>(
    config: &HrisConfig,
    channels: &ChannelSet,
    w: &DVector<Complex64>,
    pilot_power: f64,
    noise_power: f64,
    n_pilots: u32,
    rng: &mut R,
) -> Result<f64> {
    let clean = sense_power_bs(config, channels, w, pilot_power, 0.0)?;
    Ok(sampled_power(clean, noise_power, n_pilots, rng))
}

/// Finite-sample variant of [`sense_power_ue`].
pub fn sense_power_ue_sampled<R: Rng + ?Sized>(
    config: &HrisConfig,
    channels: &ChannelSet,
    active: &[usize],
    pilot_power: f64,
    noise_power: f64,
    n_pilots: u32,
    rng: &mut R,
) -> Result<f64> {
    let clean = sense_power_ue(config, channels, active, pilot_power, 0.0)?;
    Ok(sampled_power(clean, noise_power, n_pilots, rng))
}
