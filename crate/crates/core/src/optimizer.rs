//! Sum-rate metrics, closed-form surface configurations, a fractional
//! programming benchmark, and regularized zero-forcing precoding.
//!
//! The closed forms exploit the rank-one BS-surface channel: aligning the
//! surface phases with the entrywise phases of `h_sum^* o a_R(BS)` jointly
//! maximizes the power reflected from the BS toward the users, and the same
//! alignment with either factor alone maximizes the respective sensed power.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::geometry::ChannelSet;
use crate::hris::{effective_channel, quantize_config, HrisConfig, Quantization};
use crate::{Result, SimError};

/// A downlink precoder with its power budget; columns are per-user beams.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecoderMatrix {
    /// `M x K` precoding matrix.
    pub w: DMatrix<Complex64>,
    /// Total transmit power `P = |W|_F^2`.
    pub total_power: f64,
}

impl PrecoderMatrix {
    pub fn k_users(&self) -> usize {
        self.w.ncols()
    }

    /// Beam serving user `k`.
    pub fn column(&self, k: usize) -> DVector<Complex64> {
        DVector::from_column_slice(self.w.column(k).as_slice())
    }

    /// Squared Frobenius norm; equals `total_power` for a valid precoder.
    pub fn frobenius_sq(&self) -> f64 {
        self.w.iter().map(|e| e.norm_sqr()).sum()
    }
}

/// SINR of user `k` under the given surface configuration and precoder.
pub fn sinr(
    config: &HrisConfig,
    channels: &ChannelSet,
    precoder: &PrecoderMatrix,
    k: usize,
    noise_power: f64,
) -> Result<f64> {
    if precoder.k_users() != channels.k_users() {
        return Err(SimError::InvalidParameter(format!(
            "precoder serves {} users, channels have {}",
            precoder.k_users(),
            channels.k_users()
        )));
    }
    let eff = effective_channel(config, channels, k)?;
    let mut signal = 0.0;
    let mut interference = 0.0;
    for j in 0..precoder.k_users() {
        let gain = eff.dotc(&precoder.column(j)).norm_sqr();
        if j == k {
            signal = gain;
        } else {
            interference += gain;
        }
    }
    Ok(signal / (interference + noise_power))
}

/// Network sum-rate `sum_k log2(1 + SINR_k)` in bit/s/Hz.
pub fn sum_rate(
    config: &HrisConfig,
    channels: &ChannelSet,
    precoder: &PrecoderMatrix,
    noise_power: f64,
) -> Result<f64> {
    let mut acc = 0.0;
    for k in 0..channels.k_users() {
        acc += (1.0 + sinr(config, channels, precoder, k, noise_power)?).log2();
    }
    Ok(acc)
}

/// Closed-form surface configuration maximizing the BS-side sensed power:
/// the entrywise phases of the surface response toward the BS.
pub fn v_b_oracle(channels: &ChannelSet, eta: f64) -> HrisConfig {
    quantize_config(&channels.a_ris_bs, Quantization::Continuous, eta)
        .expect("steering response has unit-modulus entries")
}

/// Superposed user channel `h_sum`: the plain sum when `weighted`, otherwise
/// the sum of per-user channels normalized to unit energy first.
pub fn superposed_user_channel(
    channels: &ChannelSet,
    active: &[usize],
    weighted: bool,
) -> Result<DVector<Complex64>> {
    if active.is_empty() {
        return Err(SimError::InvalidParameter(
            "at least one active user required".into(),
        ));
    }
    let mut h_sum: DVector<Complex64> = DVector::zeros(channels.g.nrows());
    for &k in active {
        if k >= channels.k_users() {
            return Err(SimError::InvalidParameter(format!(
                "user index {k} out of range ({} users)",
                channels.k_users()
            )));
        }
        if weighted {
            h_sum += &channels.h[k];
        } else {
            let norm = channels.h[k].norm();
            if norm == 0.0 {
                return Err(SimError::Domain(format!("user {k} has a zero channel")));
            }
            h_sum += &channels.h[k] * Complex64::from(1.0 / norm);
        }
    }
    Ok(h_sum)
}

/// Closed-form surface configuration maximizing the user-side sensed power:
/// the entrywise phases of the superposed user channel.
pub fn v_u_oracle(
    channels: &ChannelSet,
    active: &[usize],
    weighted: bool,
    eta: f64,
) -> Result<HrisConfig> {
    let h_sum = superposed_user_channel(channels, active, weighted)?;
    quantize_config(&h_sum, Quantization::Continuous, eta)
}

/// Composes the communication configuration `v_BU = v_U^* o v_B` entrywise.
pub fn v_bu_compose(v_b: &HrisConfig, v_u: &HrisConfig) -> Result<HrisConfig> {
    if v_b.v.len() != v_u.v.len() {
        return Err(SimError::InvalidParameter(format!(
            "configuration lengths differ: {} vs {}",
            v_b.v.len(),
            v_u.v.len()
        )));
    }
    let v = DVector::from_iterator(
        v_b.v.len(),
        v_b.v.iter().zip(v_u.v.iter()).map(|(b, u)| u.conj() * b),
    );
    let quantization = match (v_b.quantization, v_u.quantization) {
        // Phase sums stay on the grid when both factors live on it.
        (Quantization::Bits(a), Quantization::Bits(b)) if a == b => Quantization::Bits(a),
        _ => Quantization::Continuous,
    };
    Ok(HrisConfig {
        v,
        quantization,
        eta: v_b.eta,
    })
}

/// The vector the joint closed form aligns to: `h_sum^* o a_R(BS)`. The
/// reflected BS-to-users field under configuration `v` is proportional to
/// `v^H` times this vector.
pub fn alignment_channel(
    channels: &ChannelSet,
    active: &[usize],
    weighted: bool,
) -> Result<DVector<Complex64>> {
    let h_sum = superposed_user_channel(channels, active, weighted)?;
    Ok(DVector::from_iterator(
        h_sum.len(),
        h_sum
            .iter()
            .zip(channels.a_ris_bs.iter())
            .map(|(h, a)| h.conj() * a),
    ))
}

/// Both sides of the superposition bound: the coherent sum
/// `|h_sum^H Theta G w|^2` against the per-user sum
/// `sum_k |h_k^H Theta G w|^2`.
///
/// The coherent side can exceed the per-user sum by up to the user count `K`
/// (`lhs <= K * rhs`), with equality when the per-user terms coincide; at
/// `K = 1` the two sides are equal.
pub fn cauchy_bound_check(
    config: &HrisConfig,
    channels: &ChannelSet,
    w: &DVector<Complex64>,
) -> Result<(f64, f64)> {
    if w.len() != channels.g.ncols() {
        return Err(SimError::InvalidParameter(
            "precoder length does not match BS antennas".into(),
        ));
    }
    let gw = &channels.g * w;
    let mut coherent = Complex64::new(0.0, 0.0);
    let mut per_user = 0.0;
    for k in 0..channels.k_users() {
        let x = channels.h[k].component_mul(&config.v).dotc(&gw);
        coherent += x;
        per_user += x.norm_sqr();
    }
    Ok((coherent.norm_sqr(), per_user))
}

/// The three power terms of the single-user receive power under `w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrTerms {
    /// `|z_R|^2 |v^H h_hat|^2`: power over the reflected path.
    pub reflected: f64,
    /// `|z_D|^2`: power over the direct path.
    pub direct: f64,
    /// `2 Re{z_R (v^H h_hat) z_D^*}`: coherent cross term.
    pub cross: f64,
}

impl SnrTerms {
    pub fn total(&self) -> f64 {
        self.reflected + self.direct + self.cross
    }
}

/// Splits the single-user receive power into reflected, direct and cross
/// terms; their sum equals `|effective_channel^H w|^2`.
pub fn snr_decomposition(
    config: &HrisConfig,
    channels: &ChannelSet,
    w: &DVector<Complex64>,
) -> Result<SnrTerms> {
    if channels.k_users() != 1 {
        return Err(SimError::InvalidParameter(format!(
            "single-user decomposition needs exactly one user, got {}",
            channels.k_users()
        )));
    }
    let h_hat = alignment_channel(channels, &[0], true)?;
    let align = config.v.dotc(&h_hat);
    let z_r = Complex64::from(config.eta.sqrt() * channels.gamma_bs_ris.sqrt())
        * channels.a_bs_ris.dotc(w);
    let z_d = channels.h_d[0].dotc(w);
    Ok(SnrTerms {
        reflected: z_r.norm_sqr() * align.norm_sqr(),
        direct: z_d.norm_sqr(),
        cross: 2.0 * (z_r * align * z_d.conj()).re,
    })
}

// ── fractional programming benchmark ─────────────────────────────────────

/// Signal and interference power terms of the rate surrogate for each user:
/// `A_k` sums the powers of all beams at user `k` plus noise, `B_k` leaves
/// the own beam out.
pub fn fp_power_terms(
    config: &HrisConfig,
    channels: &ChannelSet,
    precoder: &PrecoderMatrix,
    noise_power: f64,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(channels.k_users());
    for k in 0..channels.k_users() {
        let eff = effective_channel(config, channels, k)?;
        let mut a = noise_power;
        let mut b = noise_power;
        for j in 0..precoder.k_users() {
            let gain = eff.dotc(&precoder.column(j)).norm_sqr();
            a += gain;
            if j != k {
                b += gain;
            }
        }
        out.push((a, b));
    }
    Ok(out)
}

/// Closed-form auxiliary update `mu_k = sqrt(A_k) / B_k`, the stationary
/// point of the quadratic-transform surrogate.
pub fn fp_update_mu(
    config: &HrisConfig,
    channels: &ChannelSet,
    precoder: &PrecoderMatrix,
    noise_power: f64,
) -> Result<Vec<f64>> {
    Ok(fp_power_terms(config, channels, precoder, noise_power)?
        .iter()
        .map(|(a, b)| a.sqrt() / b)
        .collect())
}

/// Outcome of the alternating surface optimization.
#[derive(Debug, Clone)]
pub struct FpState {
    /// Final surface configuration (entries inside the unit disc).
    pub theta: HrisConfig,
    /// Sum-rate after the initialization and after each outer iteration.
    pub objective_trace: Vec<f64>,
    /// Outer iterations executed.
    pub iterations: usize,
    /// Whether the improvement fell below tolerance before `max_iters`.
    pub converged: bool,
}

struct FpWork {
    /// `g_kj = h_k^* o (G w_j)` for every user/beam pair, row-major by k.
    g: Vec<DVector<Complex64>>,
    /// `d_kj = h_Dk^H w_j`.
    d: Vec<Complex64>,
    k: usize,
    sqrt_eta: f64,
    noise: f64,
}

impl FpWork {
    fn new(channels: &ChannelSet, precoder: &PrecoderMatrix, eta: f64, noise: f64) -> Self {
        let k = channels.k_users();
        let mut g = Vec::with_capacity(k * k);
        let mut d = Vec::with_capacity(k * k);
        for ku in 0..k {
            for j in 0..k {
                let gw = &channels.g * precoder.column(j);
                g.push(DVector::from_iterator(
                    gw.len(),
                    channels.h[ku].iter().zip(gw.iter()).map(|(h, x)| h.conj() * x),
                ));
                d.push(channels.h_d[ku].dotc(&precoder.column(j)));
            }
        }
        FpWork {
            g,
            d,
            k,
            sqrt_eta: eta.sqrt(),
            noise,
        }
    }

    fn beam_gain(&self, v: &DVector<Complex64>, ku: usize, j: usize) -> Complex64 {
        let idx = ku * self.k + j;
        Complex64::from(self.sqrt_eta) * self.g[idx].dotc(v).conj() + self.d[idx]
    }

    fn terms(&self, v: &DVector<Complex64>) -> Vec<(f64, f64)> {
        (0..self.k)
            .map(|ku| {
                let mut a = self.noise;
                let mut b = self.noise;
                for j in 0..self.k {
                    let gain = self.beam_gain(v, ku, j).norm_sqr();
                    a += gain;
                    if j != ku {
                        b += gain;
                    }
                }
                (a, b)
            })
            .collect()
    }

    /// Surrogate objective for fixed `mu`; `-inf` outside its domain.
    fn surrogate(&self, v: &DVector<Complex64>, mu: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (ku, (a, b)) in self.terms(v).iter().enumerate() {
            let phi = 2.0 * mu[ku] * a.sqrt() - mu[ku] * mu[ku] * b;
            if phi <= 0.0 || !phi.is_finite() {
                return f64::NEG_INFINITY;
            }
            acc += phi.log2();
        }
        acc
    }

    fn sum_rate(&self, v: &DVector<Complex64>) -> f64 {
        self.terms(v)
            .iter()
            .map(|(a, b)| (a / b).log2())
            .sum()
    }

    /// Conjugate-coordinate gradient of the surrogate at `v` for fixed `mu`.
    fn gradient(&self, v: &DVector<Complex64>, mu: &[f64]) -> DVector<Complex64> {
        let ln2 = std::f64::consts::LN_2;
        let mut grad: DVector<Complex64> = DVector::zeros(v.len());
        let terms = self.terms(v);
        for ku in 0..self.k {
            let (a, b) = terms[ku];
            let phi = 2.0 * mu[ku] * a.sqrt() - mu[ku] * mu[ku] * b;
            if phi <= 0.0 {
                continue;
            }
            let scale = 1.0 / (phi * ln2);
            for j in 0..self.k {
                let idx = ku * self.k + j;
                let t = self.beam_gain(v, ku, j);
                let mut coeff = mu[ku] / a.sqrt();
                if j != ku {
                    coeff -= mu[ku] * mu[ku];
                }
                let factor = Complex64::from(scale * coeff * self.sqrt_eta) * t.conj();
                grad += &self.g[idx] * factor;
            }
        }
        grad
    }
}

fn project_unit_disc(v: &mut DVector<Complex64>) {
    for e in v.iter_mut() {
        let n = e.norm();
        if n > 1.0 {
            *e /= Complex64::from(n);
        }
    }
}

/// Alternating surface optimization of the sum-rate surrogate: closed-form
/// auxiliary updates alternate with projected gradient ascent over the
/// surface weights (unit-disc projection, backtracking line search).
///
/// Initialized at the composed closed form `v_BU`; the accepted-step rule
/// makes the objective trace non-decreasing.
pub fn fp_alternating_optimize(
    channels: &ChannelSet,
    precoder: &PrecoderMatrix,
    eta: f64,
    noise_power: f64,
    max_iters: usize,
    tol: f64,
) -> Result<FpState> {
    if channels.k_users() == 0 {
        return Err(SimError::InvalidParameter(
            "surface optimization needs at least one user".into(),
        ));
    }
    if !(noise_power > 0.0) {
        return Err(SimError::InvalidParameter(
            "noise power must be positive".into(),
        ));
    }
    let all: Vec<usize> = (0..channels.k_users()).collect();
    let v_b = v_b_oracle(channels, eta);
    let v_u = v_u_oracle(channels, &all, true, eta)?;
    let mut v = v_bu_compose(&v_b, &v_u)?.v;

    let work = FpWork::new(channels, precoder, eta, noise_power);
    let mut trace = vec![work.sum_rate(&v)];
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..max_iters {
        iterations += 1;
        let mu: Vec<f64> = work.terms(&v).iter().map(|(a, b)| a.sqrt() / b).collect();
        let mut obj = work.surrogate(&v, &mu);

        // Inner ascent on the surface weights with a normalized step.
        let mut step = 0.25;
        for _ in 0..40 {
            let grad = work.gradient(&v, &mu);
            let gnorm = grad.norm();
            if gnorm == 0.0 || !gnorm.is_finite() {
                break;
            }
            let mut improved = false;
            while step > 1e-12 {
                let mut cand = &v + &grad * Complex64::from(step / gnorm);
                project_unit_disc(&mut cand);
                let cand_obj = work.surrogate(&cand, &mu);
                if cand_obj > obj {
                    v = cand;
                    obj = cand_obj;
                    step *= 1.5;
                    improved = true;
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }

        let rate = work.sum_rate(&v);
        if !rate.is_finite() {
            return Err(SimError::Numerical(
                "sum-rate became non-finite during surface optimization".into(),
            ));
        }
        let prev = *trace.last().unwrap();
        trace.push(rate.max(prev));
        if rate - prev < tol {
            converged = true;
            break;
        }
    }

    Ok(FpState {
        theta: HrisConfig {
            v,
            quantization: Quantization::Continuous,
            eta,
        },
        objective_trace: trace,
        iterations,
        converged,
    })
}

// ── regularized zero-forcing ─────────────────────────────────────────────

/// Regularized zero-forcing precoder on the effective channels (columns of
/// `h_eff`), normalized so `|W|_F^2` equals the power budget exactly.
pub fn rzf_precoder(
    h_eff: &DMatrix<Complex64>,
    total_power: f64,
    noise_power: f64,
) -> Result<PrecoderMatrix> {
    let k = h_eff.ncols();
    if k == 0 {
        return Err(SimError::InvalidParameter(
            "precoder needs at least one user channel".into(),
        ));
    }
    if !(total_power > 0.0) || !(noise_power > 0.0) {
        return Err(SimError::InvalidParameter(
            "power budget and noise power must be positive".into(),
        ));
    }
    let mu = k as f64 * noise_power / total_power;
    let m = h_eff.nrows();
    let gram = h_eff * h_eff.adjoint() + DMatrix::identity(m, m) * Complex64::from(mu);
    let chol = gram
        .cholesky()
        .ok_or_else(|| SimError::Numerical("regularized Gram matrix not positive definite".into()))?;
    let unnormalized = chol.solve(h_eff);
    let fro = unnormalized.iter().map(|e| e.norm_sqr()).sum::<f64>().sqrt();
    if fro == 0.0 {
        return Err(SimError::Domain(
            "all-zero channel matrix cannot be precoded".into(),
        ));
    }
    Ok(PrecoderMatrix {
        w: unnormalized * Complex64::from(total_power.sqrt() / fro),
        total_power,
    })
}
