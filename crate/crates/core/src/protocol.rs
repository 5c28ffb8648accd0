//! Two-phase self-configuration protocol of the hybrid surface.
//!
//! The surface finds the base station and its users on its own: it sweeps a
//! probing codebook while reading the power detector, thresholds the sweep
//! into peaks, combines the peaked codewords into a serving configuration,
//! and keeps watching for newcomers while it serves by superposing the
//! remaining codewords onto the serving beam and subtracting a baseline.
//!
//! # Features
//!
//! - Beam-sweep power profiles from either pilot source ([`probe_sweep`])
//! - Relative and absolute detection thresholds ([`select_threshold`])
//! - Peak detection with an optional local-maxima rule ([`detect_peaks`])
//! - Hard and power-weighted codeword combining ([`combine_codewords`])
//! - The full probing phase ending in a serving configuration
//!   ([`probing_phase`])
//! - Serve-while-probing discovery of newly arrived users
//!   ([`communication_phase`])
//! - Per-activation trace records in delimited text ([`SweepTrace`])

use nalgebra::DVector;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::codebook::{hybrid_codebook, mix_seed, Codebook};
use crate::geometry::{ChannelSet, Scenario};
use crate::hris::{
    quantize_config, sense_power_bs, sense_power_bs_sampled, sense_power_ue,
    sense_power_ue_sampled, HrisConfig, Quantization,
};
use crate::{Result, SimError};

// ── sweep configuration ──────────────────────────────────────────────────

/// Which transmitter supplies the pilots of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum PilotSource {
    /// The base station transmits through the given precoder.
    Bs {
        precoder: DVector<Complex64>,
        pilot_power: f64,
    },
    /// The listed users transmit pilots simultaneously.
    Ue {
        active: Vec<usize>,
        pilot_power: f64,
    },
}

impl PilotSource {
    fn kind(&self) -> SourceKind {
        match self {
            PilotSource::Bs { .. } => SourceKind::BsPilots,
            PilotSource::Ue { .. } => SourceKind::UePilots,
        }
    }
}

/// Pilot origin recorded on a power profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    BsPilots,
    UePilots,
}

/// How the detector turns pilots into one power number per codeword.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorMode {
    /// The expectation over detector noise; no randomness enters the sweep.
    Expected,
    /// The average of `n_pilots` noisy detector reads.
    Sampled { n_pilots: u32 },
}

/// Unit-norm BS precoder aimed at the surface, used during BS pilot sweeps.
pub fn sensing_precoder(channels: &ChannelSet) -> DVector<Complex64> {
    let norm = channels.a_bs_ris.norm();
    &channels.a_bs_ris / Complex64::from(norm)
}

// ── power profiles ───────────────────────────────────────────────────────

/// Detector powers of one codebook sweep, ordered by codeword index.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerProfile {
    /// Sensed power per codeword in watts; entry `l` belongs to codeword `l`.
    pub rho: Vec<f64>,
    /// Who transmitted the pilots.
    pub source: SourceKind,
    /// Seed that drove the detector noise of this sweep.
    pub sweep_seed: u64,
}

impl PowerProfile {
    /// Largest sensed power; zero for an empty profile.
    pub fn max(&self) -> f64 {
        self.rho.iter().cloned().fold(0.0, f64::max)
    }
}

/// Activates every codeword in turn and records the sensed power.
///
/// Deterministic in `(codebook, channels, source, sweep_seed)`: the expected
/// detector mode draws nothing, and the sampled mode derives its noise from
/// `sweep_seed` alone. With a fully reflective surface (`eta = 1`) nothing
/// reaches the detector and the profile is flat at the noise power.
pub fn probe_sweep(
    codebook: &Codebook,
    channels: &ChannelSet,
    source: &PilotSource,
    scenario: &Scenario,
    detector: DetectorMode,
    noise_power: f64,
    sweep_seed: u64,
) -> Result<PowerProfile> {
    if !codebook.is_empty() && codebook.n_elements() != channels.g.nrows() {
        return Err(SimError::InvalidParameter(format!(
            "codebook is for {} elements, channels for {}",
            codebook.n_elements(),
            channels.g.nrows()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(sweep_seed);
    let mut rho = Vec::with_capacity(codebook.len());
    for l in 0..codebook.len() {
        let config = HrisConfig::raw(
            codebook.codeword(l),
            codebook.meta.quantization,
            scenario.eta,
        );
        let power = match (source, detector) {
            (PilotSource::Bs { precoder, pilot_power }, DetectorMode::Expected) => {
                sense_power_bs(&config, channels, precoder, *pilot_power, noise_power)?
            }
            (PilotSource::Bs { precoder, pilot_power }, DetectorMode::Sampled { n_pilots }) => {
                sense_power_bs_sampled(
                    &config,
                    channels,
                    precoder,
                    *pilot_power,
                    noise_power,
                    n_pilots,
                    &mut rng,
                )?
            }
            (PilotSource::Ue { active, pilot_power }, DetectorMode::Expected) => {
                sense_power_ue(&config, channels, active, *pilot_power, noise_power)?
            }
            (PilotSource::Ue { active, pilot_power }, DetectorMode::Sampled { n_pilots }) => {
                sense_power_ue_sampled(
                    &config,
                    channels,
                    active,
                    *pilot_power,
                    noise_power,
                    n_pilots,
                    &mut rng,
                )?
            }
        };
        rho.push(power);
    }
    Ok(PowerProfile {
        rho,
        source: source.kind(),
        sweep_seed,
    })
}

// ── thresholding and peak detection ──────────────────────────────────────

/// How the detection threshold is chosen from a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdPolicy {
    /// `tau = kappa (max rho - floor) + floor` over the profile, with the
    /// noise power as the floor. `kappa` must lie strictly inside (0, 1).
    Relative { kappa: f64 },
    /// A fixed threshold in watts.
    Absolute { tau: f64 },
}

impl Default for ThresholdPolicy {
    /// Halfway between the noise floor and the strongest sweep entry.
    fn default() -> Self {
        ThresholdPolicy::Relative { kappa: 0.5 }
    }
}

/// Chooses the detection threshold for `profile` under `policy`, measuring
/// the relative rule from `noise_floor` upward.
pub fn select_threshold(
    profile: &PowerProfile,
    policy: &ThresholdPolicy,
    noise_floor: f64,
) -> Result<f64> {
    if profile.rho.is_empty() {
        return Err(SimError::InvalidParameter(
            "cannot pick a threshold from an empty profile".into(),
        ));
    }
    match *policy {
        ThresholdPolicy::Relative { kappa } => {
            if !(kappa > 0.0 && kappa < 1.0) {
                return Err(SimError::InvalidParameter(format!(
                    "relative threshold fraction must lie in (0, 1), got {kappa}"
                )));
            }
            if noise_floor < 0.0 {
                return Err(SimError::InvalidParameter(
                    "noise floor must be nonnegative".into(),
                ));
            }
            Ok(kappa * (profile.max() - noise_floor) + noise_floor)
        }
        ThresholdPolicy::Absolute { tau } => {
            if !(tau > 0.0) {
                return Err(SimError::InvalidParameter(format!(
                    "absolute threshold must be positive, got {tau}"
                )));
            }
            Ok(tau)
        }
    }
}

/// Indices that crossed the detection threshold, with their sweep powers.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakSet {
    /// Detected codeword indices in ascending order.
    pub indices: Vec<usize>,
    /// Threshold the detection ran against, in watts.
    pub threshold_used: f64,
    /// Sweep power of each detected index, same order.
    pub weights: Vec<f64>,
}

impl PeakSet {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }
}

/// Finds the profile entries strictly above `tau`. With `local_maxima_only`
/// an entry must also be at least as large as its neighbors (one neighbor at
/// the profile ends), which keeps every member of a tied plateau.
pub fn detect_peaks(profile: &PowerProfile, tau: f64, local_maxima_only: bool) -> Result<PeakSet> {
    if !(tau > 0.0) {
        return Err(SimError::InvalidParameter(format!(
            "detection threshold must be positive, got {tau}"
        )));
    }
    let rho = &profile.rho;
    let mut indices = Vec::new();
    let mut weights = Vec::new();
    for (i, &p) in rho.iter().enumerate() {
        if p <= tau {
            continue;
        }
        if local_maxima_only {
            let left_ok = i == 0 || p >= rho[i - 1];
            let right_ok = i + 1 == rho.len() || p >= rho[i + 1];
            if !(left_ok && right_ok) {
                continue;
            }
        }
        indices.push(i);
        weights.push(p);
    }
    Ok(PeakSet {
        indices,
        threshold_used: tau,
        weights,
    })
}

// ── codeword combining ───────────────────────────────────────────────────

/// How detected codewords merge into one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    /// Unit weight per detected codeword.
    Hard,
    /// Each codeword weighted by its sensed power.
    Soft,
}

/// Superposes the detected codewords, `v = sum_i delta_i c_i`. The result is
/// generally not unit-modulus; project it with [`quantize_config`] before
/// loading it onto the surface. An empty peak set has nothing to combine and
/// is a domain error.
pub fn combine_codewords(
    codebook: &Codebook,
    peaks: &PeakSet,
    mode: CombineMode,
) -> Result<DVector<Complex64>> {
    if peaks.is_empty() {
        return Err(SimError::Domain(
            "cannot combine an empty peak set".into(),
        ));
    }
    let mut v = DVector::<Complex64>::zeros(codebook.n_elements());
    for (pos, &l) in peaks.indices.iter().enumerate() {
        if l >= codebook.len() {
            return Err(SimError::InvalidParameter(format!(
                "peak index {l} out of range for a codebook of {}",
                codebook.len()
            )));
        }
        let delta = match mode {
            CombineMode::Hard => 1.0,
            CombineMode::Soft => peaks.weights[pos],
        };
        v += codebook.codeword(l) * Complex64::from(delta);
    }
    Ok(v)
}

// ── protocol parameters ──────────────────────────────────────────────────

/// Knobs shared by the probing and communication phases.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolParams {
    /// Detector noise power in watts.
    pub noise_power: f64,
    /// BS pilot power in watts.
    pub bs_pilot_power: f64,
    /// Per-user pilot power in watts.
    pub ue_pilot_power: f64,
    pub threshold: ThresholdPolicy,
    pub combine: CombineMode,
    pub local_maxima_only: bool,
    /// Phase quantization of the serving configuration.
    pub quantization: Quantization,
    pub detector: DetectorMode,
    /// Master seed of the detector noise; each sweep derives its own stream.
    pub seed: u64,
}

impl ProtocolParams {
    /// Defaults wired to a scenario: its noise power, its transmit budget as
    /// both pilot powers, the halfway relative threshold, hard combining,
    /// plain thresholding, continuous phases and the expected detector.
    pub fn for_scenario(scenario: &Scenario) -> Self {
        ProtocolParams {
            noise_power: scenario.noise_power,
            bs_pilot_power: scenario.tx_power,
            ue_pilot_power: scenario.tx_power,
            threshold: ThresholdPolicy::default(),
            combine: CombineMode::Hard,
            local_maxima_only: false,
            quantization: Quantization::Continuous,
            detector: DetectorMode::Expected,
            seed: 0,
        }
    }
}

// ── probing phase ────────────────────────────────────────────────────────

/// Everything the probing phase measured and decided.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbingOutcome {
    /// Serving configuration: the quantized composition of both combinations.
    pub config: HrisConfig,
    pub bs_profile: PowerProfile,
    pub ue_profile: PowerProfile,
    pub bs_peaks: PeakSet,
    pub ue_peaks: PeakSet,
}

impl ProbingOutcome {
    /// Sorted union of the BS-side and UE-side peak sectors: the sectors the
    /// probing phase accounted for when it built the serving configuration.
    pub fn explored_sectors(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .bs_peaks
            .indices
            .iter()
            .chain(self.ue_peaks.indices.iter())
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Runs one BS sweep and one UE sweep, thresholds both, and composes the
/// serving configuration `v_B ∘ v_U^*` from the combined peak codewords.
///
/// The BS transmits through the unit-norm precoder aimed at the surface; all
/// users transmit simultaneously during the UE sweep. A sweep whose profile
/// never crosses its threshold aborts with [`SimError::NoBsDetected`] or
/// [`SimError::NoUeDetected`]. In the expected detector mode the outcome is
/// fully deterministic and invariant to reordering the codebook.
pub fn probing_phase(
    codebook: &Codebook,
    channels: &ChannelSet,
    scenario: &Scenario,
    params: &ProtocolParams,
) -> Result<ProbingOutcome> {
    if codebook.is_empty() {
        return Err(SimError::InvalidParameter(
            "cannot probe with an empty codebook".into(),
        ));
    }
    if channels.k_users() == 0 {
        return Err(SimError::NoUeDetected);
    }

    let bs_source = PilotSource::Bs {
        precoder: sensing_precoder(channels),
        pilot_power: params.bs_pilot_power,
    };
    let bs_profile = probe_sweep(
        codebook,
        channels,
        &bs_source,
        scenario,
        params.detector,
        params.noise_power,
        mix_seed(params.seed, 0),
    )?;
    let tau_b = select_threshold(&bs_profile, &params.threshold, params.noise_power)?
        .max(f64::MIN_POSITIVE);
    let bs_peaks = detect_peaks(&bs_profile, tau_b, params.local_maxima_only)?;
    if bs_peaks.is_empty() {
        return Err(SimError::NoBsDetected);
    }

    let ue_source = PilotSource::Ue {
        active: (0..channels.k_users()).collect(),
        pilot_power: params.ue_pilot_power,
    };
    let ue_profile = probe_sweep(
        codebook,
        channels,
        &ue_source,
        scenario,
        params.detector,
        params.noise_power,
        mix_seed(params.seed, 1),
    )?;
    let tau_u = select_threshold(&ue_profile, &params.threshold, params.noise_power)?
        .max(f64::MIN_POSITIVE);
    let ue_peaks = detect_peaks(&ue_profile, tau_u, params.local_maxima_only)?;
    if ue_peaks.is_empty() {
        return Err(SimError::NoUeDetected);
    }

    let v_b = combine_codewords(codebook, &bs_peaks, params.combine)?;
    let v_u = combine_codewords(codebook, &ue_peaks, params.combine)?;
    let v_bu = v_b.component_mul(&v_u.map(|e| e.conj()));
    let config = quantize_config(&v_bu, params.quantization, scenario.eta)?;

    Ok(ProbingOutcome {
        config,
        bs_profile,
        ue_profile,
        bs_peaks,
        ue_peaks,
    })
}

// ── communication phase ──────────────────────────────────────────────────

/// What the serve-while-probing sweep measured and discovered.
#[derive(Debug, Clone, PartialEq)]
pub struct CommunicationOutcome {
    /// Hybrid-sweep powers, one entry per probed sector in `probed_sectors`
    /// order; empty when every sector is already known.
    pub profile: PowerProfile,
    /// Base-codebook sectors the hybrid sweep visited, ascending.
    pub probed_sectors: Vec<usize>,
    /// Sectors whose baseline-subtracted power crossed the threshold:
    /// newly arrived users. A subset of `probed_sectors`.
    pub new_ue_sectors: Vec<usize>,
    /// Reference power sensed at the serving configuration alone.
    pub baseline: f64,
}

/// A hybrid codeword halves the serving beam's weight and adds a probing
/// beam whose skirt can also catch the served users, so the difference
/// against the serving-alone baseline carries self-interference residue
/// even with no arrivals. Differences below this fraction of the baseline
/// are treated as that residue rather than as a newcomer.
const COMM_SELF_REJECT: f64 = 0.25;

/// Keeps serving on `serving` while sweeping the sectors not in
/// `known_peaks` through hybrid codewords (serving beam superposed with each
/// probing codeword). The baseline sensed at the serving configuration alone
/// is subtracted from every hybrid measurement, so only power that appeared
/// *because* a new sector was opened survives; thresholding the differences
/// yields the newly arrived users' sectors.
///
/// `channels` carries the users whose pilots are on the air during this
/// sweep: the sweep exists to admit arrivals, and served users are past
/// their pilot exchange. With no transmitters the detector reads noise
/// alone at every codeword and the sweep stays quiet. With every sector
/// known there is nothing to sweep and the outcome carries an empty
/// profile.
pub fn communication_phase(
    codebook: &Codebook,
    serving: &HrisConfig,
    known_peaks: &[usize],
    channels: &ChannelSet,
    scenario: &Scenario,
    params: &ProtocolParams,
) -> Result<CommunicationOutcome> {
    if codebook.is_empty() {
        return Err(SimError::InvalidParameter(
            "cannot probe with an empty codebook".into(),
        ));
    }
    for &p in known_peaks {
        if p >= codebook.len() {
            return Err(SimError::InvalidParameter(format!(
                "known peak {p} out of range for a codebook of {}",
                codebook.len()
            )));
        }
    }

    let active: Vec<usize> = (0..channels.k_users()).collect();
    let baseline = match params.detector {
        DetectorMode::Expected if active.is_empty() => params.noise_power,
        DetectorMode::Expected => sense_power_ue(
            serving,
            channels,
            &active,
            params.ue_pilot_power,
            params.noise_power,
        )?,
        DetectorMode::Sampled { n_pilots } => {
            let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(params.seed, 2));
            if active.is_empty() {
                crate::hris::sampled_power(0.0, params.noise_power, n_pilots, &mut rng)
            } else {
                sense_power_ue_sampled(
                    serving,
                    channels,
                    &active,
                    params.ue_pilot_power,
                    params.noise_power,
                    n_pilots,
                    &mut rng,
                )?
            }
        }
    };

    let probed_sectors: Vec<usize> = (0..codebook.len())
        .filter(|l| !known_peaks.contains(l))
        .collect();
    if probed_sectors.is_empty() {
        return Ok(CommunicationOutcome {
            profile: PowerProfile {
                rho: Vec::new(),
                source: SourceKind::UePilots,
                sweep_seed: mix_seed(params.seed, 3),
            },
            probed_sectors,
            new_ue_sectors: Vec::new(),
            baseline,
        });
    }

    let hybrid = hybrid_codebook(serving, codebook, known_peaks)?;
    let sweep_seed = mix_seed(params.seed, 3);
    let profile = if active.is_empty() {
        // Nobody announces during this sweep; the detector reads noise
        // alone at every hybrid codeword.
        let rho = match params.detector {
            DetectorMode::Expected => vec![params.noise_power; hybrid.len()],
            DetectorMode::Sampled { n_pilots } => {
                let mut rng = ChaCha12Rng::seed_from_u64(sweep_seed);
                (0..hybrid.len())
                    .map(|_| {
                        crate::hris::sampled_power(0.0, params.noise_power, n_pilots, &mut rng)
                    })
                    .collect()
            }
        };
        PowerProfile {
            rho,
            source: SourceKind::UePilots,
            sweep_seed,
        }
    } else {
        let ue_source = PilotSource::Ue {
            active,
            pilot_power: params.ue_pilot_power,
        };
        probe_sweep(
            &hybrid,
            channels,
            &ue_source,
            scenario,
            params.detector,
            params.noise_power,
            sweep_seed,
        )?
    };

    // Only power the opened sector let in matters; the serving beam's own
    // contribution (and the shared noise mean) cancels in the difference.
    let delta = PowerProfile {
        rho: profile
            .rho
            .iter()
            .map(|&p| (p - baseline).max(0.0))
            .collect(),
        source: profile.source,
        sweep_seed: profile.sweep_seed,
    };
    let tau = select_threshold(&delta, &params.threshold, 0.0)?
        // The serving user's own response shifts under a superposed
        // codeword, so a sweep with no arrivals still leaves residue in
        // the difference profile; only differences that stand clear of
        // the serving scale count as newcomers.
        .max(COMM_SELF_REJECT * baseline)
        // Numerical guard: a silent difference profile is zero up to
        // floating-point residue and must stay below any threshold.
        .max(1e-9 * (baseline + params.noise_power))
        .max(f64::MIN_POSITIVE);
    let new_peaks = detect_peaks(&delta, tau, params.local_maxima_only)?;
    let new_ue_sectors: Vec<usize> = new_peaks
        .indices
        .iter()
        .map(|&pos| probed_sectors[pos])
        .collect();

    Ok(CommunicationOutcome {
        profile,
        probed_sectors,
        new_ue_sectors,
        baseline,
    })
}

// ── sweep tracing ────────────────────────────────────────────────────────

/// Protocol stage a trace record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepPhase {
    BsProbe,
    UeProbe,
    Hybrid,
}

impl SweepPhase {
    fn label(self) -> &'static str {
        match self {
            SweepPhase::BsProbe => "bs-probe",
            SweepPhase::UeProbe => "ue-probe",
            SweepPhase::Hybrid => "hybrid",
        }
    }
}

/// One codeword activation: which trial, which stage, which codeword, and
/// what the detector read.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub trial: u64,
    pub phase: SweepPhase,
    pub codeword: usize,
    pub power_watts: f64,
}

/// Accumulates one record per codeword activation and writes them out as
/// tab-delimited text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepTrace {
    pub records: Vec<SweepRecord>,
}

impl SweepTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one record per entry of `profile`, in activation order.
    pub fn record_profile(&mut self, trial: u64, phase: SweepPhase, profile: &PowerProfile) {
        for (codeword, &power_watts) in profile.rho.iter().enumerate() {
            self.records.push(SweepRecord {
                trial,
                phase,
                codeword,
                power_watts,
            });
        }
    }

    /// Writes a header line and one row per record.
    pub fn write_delimited<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "trial\tphase\tcodeword\tpower_watts")?;
        for r in &self.records {
            writeln!(
                out,
                "{}\t{}\t{}\t{:.12e}",
                r.trial,
                r.phase.label(),
                r.codeword,
                r.power_watts
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{design_codebook, DesignMethod};
    use crate::geometry::{build_channels, LinkStates, Scenario};
    use crate::hris::effective_channel;
    use crate::optimizer::{rzf_precoder, sum_rate};
    use nalgebra::{DMatrix, Vector3};

    const TOL: f64 = 1e-9;

    fn profile(rho: Vec<f64>) -> PowerProfile {
        PowerProfile {
            rho,
            source: SourceKind::UePilots,
            sweep_seed: 0,
        }
    }

    /// Line surface with a small square area, all-LoS link states.
    fn line_scenario(nx: usize, ue_azimuths: &[f64]) -> (Scenario, ChannelSet) {
        let mut sc = Scenario::default().with_area(20.0);
        sc.nx = nx;
        sc.nz = 1;
        sc.ue_positions = ue_azimuths
            .iter()
            .map(|&phi| Vector3::new(10.0 * phi.cos(), 10.0 * phi.sin(), sc.ue_height))
            .collect();
        let links = LinkStates::all_los(sc.k_users());
        let ch = build_channels(&sc, &links).unwrap();
        (sc, ch)
    }

    fn directive_codebook(sc: &Scenario, l: usize) -> Codebook {
        design_codebook(
            sc,
            l,
            DesignMethod::MaxMinDiscretized,
            0.1 * (sc.n_elements() * sc.n_elements()) as f64,
            Quantization::Continuous,
            7,
        )
        .unwrap()
    }

    fn noise_free(params: &mut ProtocolParams) {
        params.noise_power = 0.0;
    }

    // ── thresholding ─────────────────────────────────────────────────────

    #[test]
    fn threshold_matches_the_worked_example() {
        // Noise floor 2, entries [2, 10, 4]: halfway picks 2 + 0.5 * 8 = 6
        // and only the middle entry crosses it.
        let p = profile(vec![2.0, 10.0, 4.0]);
        let tau = select_threshold(&p, &ThresholdPolicy::Relative { kappa: 0.5 }, 2.0).unwrap();
        assert!((tau - 6.0).abs() < TOL);
        let peaks = detect_peaks(&p, tau, false).unwrap();
        assert_eq!(peaks.indices, vec![1]);
        assert_eq!(peaks.weights, vec![10.0]);
        assert!((peaks.threshold_used - 6.0).abs() < TOL);
    }

    #[test]
    fn threshold_rejects_bad_parameters() {
        let p = profile(vec![1.0, 2.0]);
        for kappa in [0.0, 1.0, -0.3, 1.5] {
            assert!(select_threshold(&p, &ThresholdPolicy::Relative { kappa }, 0.1).is_err());
        }
        assert!(select_threshold(&p, &ThresholdPolicy::Absolute { tau: 0.0 }, 0.1).is_err());
        assert!(select_threshold(&p, &ThresholdPolicy::Absolute { tau: -2.0 }, 0.1).is_err());
        let tau = select_threshold(&p, &ThresholdPolicy::Absolute { tau: 5.0 }, 0.1).unwrap();
        assert_eq!(tau, 5.0);
        assert!(select_threshold(&profile(vec![]), &ThresholdPolicy::default(), 0.1).is_err());
        assert!(detect_peaks(&p, 0.0, false).is_err());
    }

    #[test]
    fn tiny_relative_fraction_keeps_every_entry_above_the_floor() {
        let p = profile(vec![2.0, 10.0, 4.0]);
        let tau =
            select_threshold(&p, &ThresholdPolicy::Relative { kappa: 1e-12 }, 2.0).unwrap();
        let peaks = detect_peaks(&p, tau, false).unwrap();
        // The floor-level entry stays out; everything above it is kept.
        assert_eq!(peaks.indices, vec![1, 2]);
    }

    #[test]
    fn all_noise_profile_detects_nothing() {
        let sigma = 1e-3;
        let p = profile(vec![sigma; 5]);
        let tau =
            select_threshold(&p, &ThresholdPolicy::Relative { kappa: 0.5 }, sigma).unwrap();
        assert!((tau - sigma).abs() < TOL * sigma);
        let peaks = detect_peaks(&p, tau, false).unwrap();
        assert!(peaks.is_empty());
    }

    #[test]
    fn local_maxima_rule_keeps_plateaus_and_boundaries() {
        let p = profile(vec![1.0, 3.0, 2.0, 4.0, 4.0, 1.0]);
        let all = detect_peaks(&p, 1.5, false).unwrap();
        assert_eq!(all.indices, vec![1, 2, 3, 4]);
        let maxima = detect_peaks(&p, 1.5, true).unwrap();
        // The dip at index 2 is dropped; the tied plateau keeps both members.
        assert_eq!(maxima.indices, vec![1, 3, 4]);
        let edge = detect_peaks(&profile(vec![5.0, 1.0, 2.0]), 0.5, true).unwrap();
        // A boundary entry only needs to dominate its single neighbor.
        assert_eq!(edge.indices, vec![0, 2]);
    }

    // ── combining ────────────────────────────────────────────────────────

    #[test]
    fn hard_combining_a_single_peak_returns_that_codeword() {
        let (sc, _) = line_scenario(8, &[]);
        let cb = directive_codebook(&sc, 4);
        let peaks = PeakSet {
            indices: vec![2],
            threshold_used: 1.0,
            weights: vec![7.5],
        };
        let v = combine_codewords(&cb, &peaks, CombineMode::Hard).unwrap();
        assert!((v - cb.codeword(2)).norm() < TOL);
    }

    #[test]
    fn combining_follows_the_mode_weights() {
        let (sc, _) = line_scenario(8, &[]);
        let cb = directive_codebook(&sc, 4);
        let peaks = PeakSet {
            indices: vec![0, 3],
            threshold_used: 1.0,
            weights: vec![3.0, 0.5],
        };
        let hard = combine_codewords(&cb, &peaks, CombineMode::Hard).unwrap();
        let soft = combine_codewords(&cb, &peaks, CombineMode::Soft).unwrap();
        let c0 = cb.codeword(0);
        let c3 = cb.codeword(3);
        assert!((hard - (&c0 + &c3)).norm() < TOL);
        assert!(
            (soft - (c0 * Complex64::from(3.0) + c3 * Complex64::from(0.5))).norm() < TOL
        );

        let empty = PeakSet {
            indices: vec![],
            threshold_used: 1.0,
            weights: vec![],
        };
        assert!(matches!(
            combine_codewords(&cb, &empty, CombineMode::Hard),
            Err(SimError::Domain(_))
        ));
        let out_of_range = PeakSet {
            indices: vec![9],
            threshold_used: 1.0,
            weights: vec![1.0],
        };
        assert!(combine_codewords(&cb, &out_of_range, CombineMode::Hard).is_err());
    }

    #[test]
    fn soft_combining_favors_the_stronger_arrival() {
        // Two detected sectors with a 10:1 power split. The soft beam stays
        // nearly aligned with the dominant codeword after the unit-modulus
        // projection; the hard beam splits its coherence between both.
        let (sc, _) = line_scenario(16, &[]);
        let cb = directive_codebook(&sc, 6);
        let peaks = PeakSet {
            indices: vec![1, 4],
            threshold_used: 1.0,
            weights: vec![10.0, 1.0],
        };
        let strong = cb.codeword(1);
        let coupling = |v: &DVector<Complex64>| -> f64 {
            let cfg = quantize_config(v, Quantization::Continuous, sc.eta).unwrap();
            cfg.v.dotc(&strong).norm()
        };
        let hard = coupling(&combine_codewords(&cb, &peaks, CombineMode::Hard).unwrap());
        let soft = coupling(&combine_codewords(&cb, &peaks, CombineMode::Soft).unwrap());
        assert!(
            soft > hard,
            "soft coupling {soft} should beat hard coupling {hard}"
        );
        assert!(soft > 0.9 * sc.n_elements() as f64);
    }

    // ── sweeps ───────────────────────────────────────────────────────────

    #[test]
    fn fully_reflective_surface_sweeps_flat_at_the_noise_power() {
        let (mut sc, _) = line_scenario(8, &[0.9]);
        sc.eta = 1.0;
        let ch = build_channels(&sc, &LinkStates::all_los(1)).unwrap();
        let cb = directive_codebook(&sc, 4);
        let noise = 1e-3;
        let src = PilotSource::Ue {
            active: vec![0],
            pilot_power: 1.0,
        };
        let p = probe_sweep(&cb, &ch, &src, &sc, DetectorMode::Expected, noise, 0).unwrap();
        assert_eq!(p.rho.len(), 4);
        assert!(p.rho.iter().all(|&r| (r - noise).abs() < TOL * noise));
    }

    #[test]
    fn noise_free_sweep_peaks_at_the_source_sector() {
        let l = 6;
        let (sc, _) = line_scenario(16, &[]);
        let cb = directive_codebook(&sc, l);
        for target in 0..l {
            let phi = cb.sectors[target].center();
            let (sc2, ch) = line_scenario(16, &[phi]);
            let src = PilotSource::Ue {
                active: vec![0],
                pilot_power: 1.0,
            };
            let p =
                probe_sweep(&cb, &ch, &src, &sc2, DetectorMode::Expected, 0.0, 0).unwrap();
            let argmax = (0..l).max_by(|&a, &b| p.rho[a].total_cmp(&p.rho[b])).unwrap();
            assert_eq!(argmax, target, "source at sector {target} detected elsewhere");
        }
    }

    #[test]
    fn sampled_sweeps_reproduce_under_their_seed() {
        let (sc, ch) = line_scenario(8, &[0.9, 2.0]);
        let cb = directive_codebook(&sc, 4);
        let src = PilotSource::Ue {
            active: vec![0, 1],
            pilot_power: 1.0,
        };
        let mode = DetectorMode::Sampled { n_pilots: 8 };
        let a = probe_sweep(&cb, &ch, &src, &sc, mode, 1e-3, 42).unwrap();
        let b = probe_sweep(&cb, &ch, &src, &sc, mode, 1e-3, 42).unwrap();
        assert_eq!(a, b);
        let c = probe_sweep(&cb, &ch, &src, &sc, mode, 1e-3, 43).unwrap();
        assert!(a.rho.iter().zip(&c.rho).any(|(x, y)| x != y));
    }

    #[test]
    fn bystander_user_never_changes_the_profile() {
        // A user that transmits nothing is invisible to the sweep, whether
        // or not its channel exists in the set.
        let (sc, ch) = line_scenario(8, &[0.9, 2.0]);
        let (sc4, ch4) = line_scenario(8, &[0.9, 2.0, 2.6]);
        let cb = directive_codebook(&sc, 4);
        let src = PilotSource::Ue {
            active: vec![0, 1],
            pilot_power: 1.0,
        };
        let base = probe_sweep(&cb, &ch, &src, &sc, DetectorMode::Expected, 1e-3, 5).unwrap();
        let with_bystander =
            probe_sweep(&cb, &ch4, &src, &sc4, DetectorMode::Expected, 1e-3, 5).unwrap();
        assert_eq!(base.rho, with_bystander.rho);
    }

    // ── probing phase ────────────────────────────────────────────────────

    #[test]
    fn coinciding_arrival_directions_cancel_to_zero_phases() {
        // A user placed exactly along the BS direction (same azimuth, same
        // height) peaks in the same sector during both sweeps, so the
        // serving composition c_b ∘ c_u^* has identically zero phases.
        let (sc, _) = line_scenario(16, &[]);
        let bs_phi = {
            let d = sc.bs_center - sc.ris_center;
            d.y.atan2(d.x)
        };
        let mut sc2 = sc.clone();
        sc2.ue_positions = vec![Vector3::new(
            10.0 * bs_phi.cos(),
            10.0 * bs_phi.sin(),
            sc.ris_center.z,
        )];
        let ch = build_channels(&sc2, &LinkStates::all_los(1)).unwrap();
        let cb = directive_codebook(&sc, 6);
        let mut params = ProtocolParams::for_scenario(&sc2);
        noise_free(&mut params);
        let out = probing_phase(&cb, &ch, &sc2, &params).unwrap();
        assert_eq!(out.bs_peaks.indices, out.ue_peaks.indices);
        for e in out.config.v.iter() {
            assert!(e.arg().abs() < TOL, "phase {} should vanish", e.arg());
        }
    }

    #[test]
    fn probing_errors_when_a_sweep_stays_flat() {
        let (mut sc, _) = line_scenario(8, &[0.9]);
        sc.eta = 1.0;
        let ch = build_channels(&sc, &LinkStates::all_los(1)).unwrap();
        let cb = directive_codebook(&sc, 4);
        let mut params = ProtocolParams::for_scenario(&sc);
        noise_free(&mut params);
        assert!(matches!(
            probing_phase(&cb, &ch, &sc, &params),
            Err(SimError::NoBsDetected)
        ));

        // Reflective surface senses fine, but silent users stay undetected.
        let (sc2, ch2) = line_scenario(8, &[0.9]);
        let mut params2 = ProtocolParams::for_scenario(&sc2);
        noise_free(&mut params2);
        params2.ue_pilot_power = 0.0;
        assert!(matches!(
            probing_phase(&cb, &ch2, &sc2, &params2),
            Err(SimError::NoUeDetected)
        ));

        let (sc3, _) = line_scenario(8, &[]);
        let ch3 = build_channels(&sc3, &LinkStates::all_los(0)).unwrap();
        assert!(matches!(
            probing_phase(&cb, &ch3, &sc3, &ProtocolParams::for_scenario(&sc3)),
            Err(SimError::NoUeDetected)
        ));
    }

    #[test]
    fn probing_outcome_is_invariant_to_codeword_order() {
        let (sc, ch) = line_scenario(16, &[0.7, 2.3]);
        let cb = directive_codebook(&sc, 6);
        let mut params = ProtocolParams::for_scenario(&sc);
        noise_free(&mut params);
        let reference = probing_phase(&cb, &ch, &sc, &params).unwrap();

        let mut shuffled = cb.clone();
        shuffled.phases.rotate_left(2);
        shuffled.sectors.rotate_left(2);
        let swept = probing_phase(&shuffled, &ch, &sc, &params).unwrap();
        assert!((swept.config.v.clone() - reference.config.v.clone()).norm() < TOL);
        // The same sectors crossed the threshold, just renumbered.
        let relabel = |idx: &[usize]| -> Vec<usize> {
            let mut v: Vec<usize> = idx.iter().map(|&i| (i + 2) % 6).collect();
            v.sort_unstable();
            v
        };
        assert_eq!(relabel(&swept.ue_peaks.indices), reference.ue_peaks.indices);
    }

    #[test]
    fn probing_is_deterministic_under_a_seed() {
        let (sc, ch) = line_scenario(16, &[0.7, 2.3]);
        let cb = directive_codebook(&sc, 6);
        let mut params = ProtocolParams::for_scenario(&sc);
        params.detector = DetectorMode::Sampled { n_pilots: 16 };
        params.seed = 11;
        let a = probing_phase(&cb, &ch, &sc, &params).unwrap();
        let b = probing_phase(&cb, &ch, &sc, &params).unwrap();
        assert_eq!(a, b);
        // The BS and UE sweeps draw from distinct noise streams.
        assert_ne!(a.bs_profile.sweep_seed, a.ue_profile.sweep_seed);
    }

    // ── communication phase ──────────────────────────────────────────────

    /// Serving setup: one user at a sector center, serving configuration
    /// from a noise-free probing phase on its channels alone.
    fn served_setup(
        nx: usize,
        l: usize,
        served_sector: usize,
    ) -> (Scenario, Codebook, ProbingOutcome) {
        let (sc, _) = line_scenario(nx, &[]);
        let cb = directive_codebook(&sc, l);
        let phi = cb.sectors[served_sector].center();
        let (sc1, ch1) = line_scenario(nx, &[phi]);
        let mut params = ProtocolParams::for_scenario(&sc1);
        noise_free(&mut params);
        let probing = probing_phase(&cb, &ch1, &sc1, &params).unwrap();
        (sc1, cb, probing)
    }

    #[test]
    fn communication_with_all_sectors_known_sweeps_nothing() {
        let (sc, cb, probing) = served_setup(16, 6, 2);
        let ch = build_channels(&sc, &LinkStates::all_los(1)).unwrap();
        let mut params = ProtocolParams::for_scenario(&sc);
        noise_free(&mut params);
        let all: Vec<usize> = (0..cb.len()).collect();
        let out =
            communication_phase(&cb, &probing.config, &all, &ch, &sc, &params).unwrap();
        assert!(out.profile.rho.is_empty());
        assert!(out.probed_sectors.is_empty());
        assert!(out.new_ue_sectors.is_empty());
        assert!(out.baseline > 0.0);
    }

    #[test]
    fn communication_stays_quiet_without_newcomers() {
        // Static user set: nobody announces during the discovery sweep,
        // so the detector reads noise alone and no sector is flagged.
        let (_, cb, probing) = served_setup(16, 6, 2);
        let (sc_quiet, ch_quiet) = line_scenario(16, &[]);
        let mut params = ProtocolParams::for_scenario(&sc_quiet);
        noise_free(&mut params);
        let known = probing.explored_sectors();
        let out = communication_phase(&cb, &probing.config, &known, &ch_quiet, &sc_quiet, &params)
            .unwrap();
        assert_eq!(out.profile.rho.len(), cb.len() - known.len());
        assert!(out.profile.rho.iter().all(|&r| r == 0.0));
        assert!(
            out.new_ue_sectors.is_empty(),
            "no one arrived, yet {:?} flagged",
            out.new_ue_sectors
        );
    }

    #[test]
    fn communication_flags_a_newcomer_in_an_unexplored_sector() {
        let l = 6;
        let (_, cb, probing) = served_setup(16, l, 2);
        let known = probing.explored_sectors();
        let newcomer_sector = (0..l)
            .rev()
            .find(|s| !known.contains(s))
            .expect("an unexplored sector exists");
        // The arrival is the one announcing during this sweep.
        let new_phi = cb.sectors[newcomer_sector].center();
        let (sc2, ch2) = line_scenario(16, &[new_phi]);
        let mut params = ProtocolParams::for_scenario(&sc2);
        noise_free(&mut params);
        let out =
            communication_phase(&cb, &probing.config, &known, &ch2, &sc2, &params).unwrap();
        assert_eq!(
            out.new_ue_sectors,
            vec![newcomer_sector],
            "profile {:?} baseline {}",
            out.profile.rho,
            out.baseline
        );
    }

    #[test]
    fn serving_rate_survives_the_hybrid_sweep() {
        // While the surface probes an unexplored sector, the served user
        // keeps at least a quarter of its dedicated-beam rate.
        let (sc, cb, probing) = served_setup(16, 6, 2);
        let ch = build_channels(&sc, &LinkStates::all_los(1)).unwrap();
        let known = probing.explored_sectors();
        let rate_at = |config: &HrisConfig| -> f64 {
            let eff = effective_channel(config, &ch, 0).unwrap();
            let h = DMatrix::from_columns(&[eff]);
            let w = rzf_precoder(&h, sc.tx_power, sc.noise_power).unwrap();
            sum_rate(config, &ch, &w, sc.noise_power).unwrap()
        };
        let dedicated = rate_at(&probing.config);
        assert!(dedicated > 0.0);
        let hybrid = hybrid_codebook(&probing.config, &cb, &known).unwrap();
        for j in 0..hybrid.len() {
            let cfg = HrisConfig::raw(hybrid.codeword(j), hybrid.meta.quantization, sc.eta);
            let r = rate_at(&cfg);
            assert!(
                r >= 0.25 * dedicated,
                "hybrid codeword {j}: rate {r} under a quarter of {dedicated}"
            );
        }
    }

    // ── tracing ──────────────────────────────────────────────────────────

    #[test]
    fn trace_writes_one_row_per_activation() {
        let mut trace = SweepTrace::new();
        trace.record_profile(3, SweepPhase::BsProbe, &profile(vec![1.0, 2.0]));
        trace.record_profile(3, SweepPhase::Hybrid, &profile(vec![0.5]));
        assert_eq!(trace.records.len(), 3);
        let mut buf = Vec::new();
        trace.write_delimited(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "trial\tphase\tcodeword\tpower_watts");
        assert!(lines[1].starts_with("3\tbs-probe\t0\t"));
        assert!(lines[3].starts_with("3\thybrid\t0\t"));
        assert_eq!(lines[2].split('\t').count(), 4);
    }

    // ── angular accuracy ─────────────────────────────────────────────────

    #[test]
    fn end_to_end_probing_recovers_the_true_sector() {
        // Noise-free single source at a sector center: the UE sweep peak is
        // exactly that sector, for both a narrow and a full-size codebook.
        for l in [4, 8] {
            let (sc, _) = line_scenario(16, &[]);
            let cb = directive_codebook(&sc, l);
            for target in [0, l / 2, l - 1] {
                let phi = cb.sectors[target].center();
                let (sc2, ch) = line_scenario(16, &[phi]);
                let mut params = ProtocolParams::for_scenario(&sc2);
                noise_free(&mut params);
                let out = probing_phase(&cb, &ch, &sc2, &params).unwrap();
                assert_eq!(
                    out.ue_peaks.indices,
                    vec![target],
                    "L = {l}: source at sector {target}"
                );
            }
        }
    }

    #[test]
    fn sector_lookup_agrees_with_detection() {
        let (sc, _) = line_scenario(16, &[]);
        let cb = directive_codebook(&sc, 6);
        let phi = cb.sectors[3].center();
        assert_eq!(cb.sector_of(phi), Some(3));
        let (sc2, ch) = line_scenario(16, &[phi]);
        let mut params = ProtocolParams::for_scenario(&sc2);
        noise_free(&mut params);
        let out = probing_phase(&cb, &ch, &sc2, &params).unwrap();
        assert_eq!(out.ue_peaks.indices, vec![cb.sector_of(phi).unwrap()]);
    }

    #[test]
    fn probing_within_fifteen_percent_of_the_closed_form() {
        // Noise-free, one user at a sector center: the codebook-built
        // serving configuration loses at most 15% of the sum rate of the
        // closed-form composition on the same channels.
        let (sc, cb, probing) = served_setup(32, 32, 9);
        let phi = cb.sectors[9].center();
        let (sc1, ch) = line_scenario(32, &[phi]);
        assert_eq!(sc1.eta, sc.eta);
        let rate_at = |config: &HrisConfig| -> f64 {
            let eff = effective_channel(config, &ch, 0).unwrap();
            let h = DMatrix::from_columns(&[eff]);
            let w = rzf_precoder(&h, sc1.tx_power, sc1.noise_power).unwrap();
            sum_rate(config, &ch, &w, sc1.noise_power).unwrap()
        };
        let v_b = crate::optimizer::v_b_oracle(&ch, sc1.eta);
        let v_u = crate::optimizer::v_u_oracle(&ch, &[0], false, sc1.eta).unwrap();
        let oracle = crate::optimizer::v_bu_compose(&v_b, &v_u).unwrap();
        let r_oracle = rate_at(&oracle);
        let r_probed = rate_at(&probing.config);
        assert!(
            r_probed >= 0.85 * r_oracle,
            "probed rate {r_probed} vs closed form {r_oracle}"
        );
    }

    #[test]
    fn probing_rejects_an_empty_codebook() {
        let (sc, ch) = line_scenario(8, &[0.9]);
        let empty = Codebook {
            phases: vec![],
            sectors: vec![],
            meta: directive_codebook(&sc, 4).meta,
        };
        assert!(probing_phase(&empty, &ch, &sc, &ProtocolParams::for_scenario(&sc)).is_err());
        let serving = HrisConfig::raw(
            DVector::from_element(8, Complex64::new(1.0, 0.0)),
            Quantization::Continuous,
            sc.eta,
        );
        assert!(communication_phase(
            &empty,
            &serving,
            &[],
            &ch,
            &sc,
            &ProtocolParams::for_scenario(&sc)
        )
        .is_err());
    }
}
