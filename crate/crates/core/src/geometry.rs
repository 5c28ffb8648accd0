//! Deployment geometry, steering vectors, path gains, blockage, channels.
//!
//! Conventions:
//!
//! - Coordinates are metric `(x, y, z)`. The service area is the square
//!   `x in [-side/2, side/2]`, `y in [0, side]` at ground level.
//! - The base station is a uniform linear array along the y axis centered at
//!   `bs_center`; the surface is a planar `nx x nz` array in the xz plane
//!   centered at `ris_center`, its broadside facing `+y`. Element spacing is
//!   half a wavelength on both.
//! - Azimuth `phi in [0, pi]` is measured in the xy plane from the `+x` axis;
//!   elevation is the angle above the horizontal plane (negative = below).

use nalgebra::{DMatrix, DVector, Vector3};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Result, SimError};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Default user terminal height in meters.
pub const DEFAULT_UE_HEIGHT: f64 = 1.5;

/// Converts a dBm figure to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Converts watts to dBm.
pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

/// Which height ratio the blockage model uses.
///
/// The corrected form scales the blocker crossing count by
/// `(h_B - rx_z) / (tx_z - rx_z)`; the degenerate form keeps the literal
/// `(h_B - rx_z) / (h_B - rx_z)` ratio (identically one) and exists only for
/// compatibility comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum HeightRatio {
    #[default]
    Corrected,
    Degenerate,
}

/// Line-of-sight state of a single link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkState {
    Los,
    Nlos,
}

/// Per-link states for one dropped scenario.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkStates {
    /// BS to surface link.
    pub bs_ris: LinkState,
    /// BS to UE k direct links.
    pub bs_ue: Vec<LinkState>,
    /// Surface to UE k links.
    pub ris_ue: Vec<LinkState>,
}

impl LinkStates {
    /// All links line-of-sight for `k` users.
    pub fn all_los(k: usize) -> Self {
        LinkStates {
            bs_ris: LinkState::Los,
            bs_ue: vec![LinkState::Los; k],
            ris_ue: vec![LinkState::Los; k],
        }
    }
}

/// Full description of one deployment drop.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// BS antenna count `M`.
    pub m_antennas: usize,
    /// Surface element columns along x.
    pub nx: usize,
    /// Surface element rows along z.
    pub nz: usize,
    /// Carrier frequency in Hz.
    pub carrier_hz: f64,
    /// BS array center.
    pub bs_center: Vector3<f64>,
    /// Surface center.
    pub ris_center: Vector3<f64>,
    /// Side of the square service area in meters.
    pub area_side: f64,
    /// Transmit power budget in watts (same for BS and each UE).
    pub tx_power: f64,
    /// Noise power in watts.
    pub noise_power: f64,
    /// Path-loss exponent for line-of-sight links.
    pub beta_los: f64,
    /// Path-loss exponent for blocked links.
    pub beta_nlos: f64,
    /// Reference gain at distance `d0`.
    pub gamma0: f64,
    /// Reference distance in meters.
    pub d0: f64,
    /// Fraction of impinging power the surface reflects; `1 - eta` is sensed.
    pub eta: f64,
    /// User terminal positions.
    pub ue_positions: Vec<Vector3<f64>>,
    /// Height at which generated users are dropped.
    pub ue_height: f64,
    /// Blocker density per square meter.
    pub blocker_density: f64,
    /// Blocker height in meters.
    pub blocker_height: f64,
    /// Blocker radius in meters.
    pub blocker_radius: f64,
    /// Height-ratio convention of the blockage model.
    pub height_ratio: HeightRatio,
}

impl Default for Scenario {
    /// The standard evaluation setup: M = 4, 8 x 4 surface, 28 GHz, 50 m
    /// square area, 20 dBm budgets, -80 dBm noise, eta = 0.8, no users.
    fn default() -> Self {
        Scenario {
            m_antennas: 4,
            nx: 8,
            nz: 4,
            carrier_hz: 28e9,
            bs_center: Vector3::new(-25.0, 25.0, 6.0),
            ris_center: Vector3::new(0.0, 0.0, 6.0),
            area_side: 50.0,
            tx_power: dbm_to_watts(20.0),
            noise_power: dbm_to_watts(-80.0),
            beta_los: 2.0,
            beta_nlos: 4.0,
            gamma0: 1.0,
            d0: 1.0,
            eta: 0.8,
            ue_positions: Vec::new(),
            ue_height: DEFAULT_UE_HEIGHT,
            blocker_density: 0.3,
            blocker_height: 1.8,
            blocker_radius: 0.6,
            height_ratio: HeightRatio::Corrected,
        }
    }
}

impl Scenario {
    /// Carrier wavelength; always derived from the carrier, never stored.
    pub fn lambda(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    /// Total surface element count `N = nx * nz`.
    pub fn n_elements(&self) -> usize {
        self.nx * self.nz
    }

    /// Number of users in the drop.
    pub fn k_users(&self) -> usize {
        self.ue_positions.len()
    }

    /// Repositions BS and surface at the midpoints of two adjacent edges of a
    /// square area with the given side, keeping their heights.
    pub fn with_area(mut self, side: f64) -> Self {
        self.area_side = side;
        self.bs_center = Vector3::new(-side / 2.0, side / 2.0, self.bs_center.z);
        self.ris_center = Vector3::new(0.0, 0.0, self.ris_center.z);
        self
    }

    /// Checks structural soundness of the parameters.
    pub fn validate(&self) -> Result<()> {
        if self.m_antennas == 0 || self.nx == 0 || self.nz == 0 {
            return Err(SimError::InvalidParameter(
                "array dimensions must be at least 1".into(),
            ));
        }
        if !(self.carrier_hz > 0.0) {
            return Err(SimError::InvalidParameter("carrier must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(SimError::InvalidParameter(format!(
                "eta must lie in [0, 1], got {}",
                self.eta
            )));
        }
        if !(self.tx_power > 0.0) || !(self.noise_power > 0.0) {
            return Err(SimError::InvalidParameter(
                "power budget and noise power must be positive".into(),
            ));
        }
        if !(self.area_side > 0.0) || !(self.d0 > 0.0) || !(self.gamma0 > 0.0) {
            return Err(SimError::InvalidParameter(
                "area side, d0 and gamma0 must be positive".into(),
            ));
        }
        if self.blocker_density < 0.0 || self.blocker_radius < 0.0 {
            return Err(SimError::InvalidParameter(
                "blocker density and radius must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// BS element positions: a centered half-wavelength ULA along y.
    pub fn bs_element_positions(&self) -> Vec<Vector3<f64>> {
        let half = self.lambda() / 2.0;
        let mid = (self.m_antennas as f64 - 1.0) / 2.0;
        (0..self.m_antennas)
            .map(|m| self.bs_center + Vector3::new(0.0, (m as f64 - mid) * half, 0.0))
            .collect()
    }

    /// Surface element positions: a centered half-wavelength grid in the xz
    /// plane, enumerated row-major with x fastest.
    pub fn ris_element_positions(&self) -> Vec<Vector3<f64>> {
        let half = self.lambda() / 2.0;
        let mid_x = (self.nx as f64 - 1.0) / 2.0;
        let mid_z = (self.nz as f64 - 1.0) / 2.0;
        let mut out = Vec::with_capacity(self.n_elements());
        for iz in 0..self.nz {
            for ix in 0..self.nx {
                out.push(
                    self.ris_center
                        + Vector3::new(
                            (ix as f64 - mid_x) * half,
                            0.0,
                            (iz as f64 - mid_z) * half,
                        ),
                );
            }
        }
        out
    }

    /// Elevation (angle above the horizontal, radians) of a user at
    /// `ue_height` seen from the surface center at mid-range distance. The
    /// sector codebook is designed at this elevation.
    pub fn design_elevation(&self) -> f64 {
        (self.ue_height - self.ris_center.z).atan2(self.area_side / 2.0)
    }

    /// Azimuth of a point as seen from the surface center, in `[0, pi]` for
    /// points in front of the surface.
    pub fn azimuth_from_ris(&self, p: &Vector3<f64>) -> f64 {
        (p.y - self.ris_center.y).atan2(p.x - self.ris_center.x)
    }

    /// Elevation of a point as seen from the surface center.
    pub fn elevation_from_ris(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.ris_center;
        d.z.atan2((d.x * d.x + d.y * d.y).sqrt())
    }
}

/// Wave vector of a point source at `p` observed from `origin`:
/// `(2 pi / lambda) * (p - origin) / |p - origin|`.
pub fn wave_vector(p: &Vector3<f64>, origin: &Vector3<f64>, lambda: f64) -> Result<Vector3<f64>> {
    let d = p - origin;
    let norm = d.norm();
    if norm == 0.0 {
        return Err(SimError::Domain(
            "wave vector undefined for coincident points".into(),
        ));
    }
    Ok(d * (2.0 * std::f64::consts::PI / lambda) / norm)
}

fn response_from_wave_vector(
    k: &Vector3<f64>,
    elements: &[Vector3<f64>],
    center: &Vector3<f64>,
) -> DVector<Complex64> {
    DVector::from_iterator(
        elements.len(),
        elements.iter().map(|e| {
            let phase = k.dot(&(e - center));
            Complex64::from_polar(1.0, phase)
        }),
    )
}

/// BS array response toward the point `p` (plane-wave phases, unit modulus).
pub fn array_response_bs(scenario: &Scenario, p: &Vector3<f64>) -> Result<DVector<Complex64>> {
    let k = wave_vector(p, &scenario.bs_center, scenario.lambda())?;
    Ok(response_from_wave_vector(
        &k,
        &scenario.bs_element_positions(),
        &scenario.bs_center,
    ))
}

/// Surface array response toward the point `p`.
pub fn array_response_ris(scenario: &Scenario, p: &Vector3<f64>) -> Result<DVector<Complex64>> {
    let k = wave_vector(p, &scenario.ris_center, scenario.lambda())?;
    Ok(response_from_wave_vector(
        &k,
        &scenario.ris_element_positions(),
        &scenario.ris_center,
    ))
}

/// Surface array response toward the direction `(azimuth, elevation)`.
pub fn array_response_ris_angle(
    scenario: &Scenario,
    azimuth: f64,
    elevation: f64,
) -> DVector<Complex64> {
    let dir = Vector3::new(
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    );
    let k = dir * (2.0 * std::f64::consts::PI / scenario.lambda());
    response_from_wave_vector(&k, &scenario.ris_element_positions(), &scenario.ris_center)
}

/// Distance-based power gain `gamma0 * (d0 / |p - q|)^beta`.
pub fn path_gain(
    p: &Vector3<f64>,
    q: &Vector3<f64>,
    beta: f64,
    gamma0: f64,
    d0: f64,
) -> Result<f64> {
    let dist = (p - q).norm();
    if dist == 0.0 {
        return Err(SimError::Domain(
            "path gain undefined for coincident points".into(),
        ));
    }
    Ok(gamma0 * (d0 / dist).powf(beta))
}

/// Probability that a link of 3D length `l` between endpoints at heights
/// `tx_z >= rx_z`-ish is cut by at least one random blocker.
///
/// Blockers form a density-`blocker_density` field of cylinders with radius
/// `blocker_radius` and height `blocker_height`; the expected number crossing
/// the link scales with its horizontal extent weighted by the height ratio
/// (see [`HeightRatio`]). The result is clamped to `[0, 1]`.
pub fn blockage_probability(l: f64, tx_z: f64, rx_z: f64, scenario: &Scenario) -> Result<f64> {
    let dz = tx_z - rx_z;
    if l < dz.abs() {
        return Err(SimError::Domain(format!(
            "link length {l} shorter than its height difference {}",
            dz.abs()
        )));
    }
    let horizontal = (l * l - dz * dz).max(0.0).sqrt();
    let ratio = match scenario.height_ratio {
        HeightRatio::Corrected => {
            if dz == 0.0 {
                // Limit of the corrected ratio for a level link: blockers
                // taller than the link block it along its whole run.
                if scenario.blocker_height > rx_z {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                }
            } else {
                (scenario.blocker_height - rx_z) / dz
            }
        }
        HeightRatio::Degenerate => 1.0,
    };
    let crossing = horizontal * ratio;
    if crossing.is_nan() {
        // 0 * inf for a purely vertical level link: nothing to cross.
        return Ok((1.0
            - (-2.0 * scenario.blocker_density * scenario.blocker_radius * scenario.blocker_radius)
                .exp())
        .clamp(0.0, 1.0));
    }
    let exponent = -2.0
        * scenario.blocker_density
        * scenario.blocker_radius
        * (crossing + scenario.blocker_radius);
    Ok((1.0 - exponent.exp()).clamp(0.0, 1.0))
}

/// Draws a link state with the given blockage probability.
pub fn sample_link_state<R: Rng + ?Sized>(p_nlos: f64, rng: &mut R) -> LinkState {
    if rng.random::<f64>() < p_nlos {
        LinkState::Nlos
    } else {
        LinkState::Los
    }
}

/// All channels of one drop. The BS-surface channel is rank one by
/// construction and its steering factors are kept alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    /// BS to surface channel, `N x M`.
    pub g: DMatrix<Complex64>,
    /// Surface-side steering factor of `g` (response toward the BS).
    pub a_ris_bs: DVector<Complex64>,
    /// BS-side steering factor of `g` (response toward the surface).
    pub a_bs_ris: DVector<Complex64>,
    /// Path gain of the BS-surface link.
    pub gamma_bs_ris: f64,
    /// Surface to UE k channels, `N` entries each.
    pub h: Vec<DVector<Complex64>>,
    /// BS to UE k direct channels, `M` entries each.
    pub h_d: Vec<DVector<Complex64>>,
    /// Link states the channels were built from.
    pub link_states: LinkStates,
}

impl ChannelSet {
    pub fn k_users(&self) -> usize {
        self.h.len()
    }
}

fn beta_for(state: LinkState, scenario: &Scenario) -> f64 {
    match state {
        LinkState::Los => scenario.beta_los,
        LinkState::Nlos => scenario.beta_nlos,
    }
}

/// Builds the channel set of a drop. Deterministic in `(scenario,
/// link_states)`: the single-ray model has no fading randomness.
pub fn build_channels(scenario: &Scenario, link_states: &LinkStates) -> Result<ChannelSet> {
    scenario.validate()?;
    let k = scenario.k_users();
    if link_states.bs_ue.len() != k || link_states.ris_ue.len() != k {
        return Err(SimError::InvalidParameter(format!(
            "link state vectors must have one entry per user ({k})"
        )));
    }

    let gamma_bs_ris = path_gain(
        &scenario.bs_center,
        &scenario.ris_center,
        beta_for(link_states.bs_ris, scenario),
        scenario.gamma0,
        scenario.d0,
    )?;
    let a_ris_bs = array_response_ris(scenario, &scenario.bs_center)?;
    let a_bs_ris = array_response_bs(scenario, &scenario.ris_center)?;
    let g = &a_ris_bs * a_bs_ris.adjoint() * Complex64::from(gamma_bs_ris.sqrt());

    let mut h = Vec::with_capacity(k);
    let mut h_d = Vec::with_capacity(k);
    for (i, ue) in scenario.ue_positions.iter().enumerate() {
        let gamma_ru = path_gain(
            ue,
            &scenario.ris_center,
            beta_for(link_states.ris_ue[i], scenario),
            scenario.gamma0,
            scenario.d0,
        )?;
        h.push(array_response_ris(scenario, ue)? * Complex64::from(gamma_ru.sqrt()));
        let gamma_bu = path_gain(
            &scenario.bs_center,
            ue,
            beta_for(link_states.bs_ue[i], scenario),
            scenario.gamma0,
            scenario.d0,
        )?;
        h_d.push(array_response_bs(scenario, ue)? * Complex64::from(gamma_bu.sqrt()));
    }

    Ok(ChannelSet {
        g,
        a_ris_bs,
        a_bs_ris,
        gamma_bs_ris,
        h,
        h_d,
        link_states: link_states.clone(),
    })
}
