//! SI-SDR / SDR metrics and the training objective.
//!
//! SI-SDR projects the estimate onto the reference before taking the energy
//! ratio, so it is invariant to rescaling the estimate; SDR is the plain
//! ratio and is not. Reporting caps degenerate (near-zero residual) cases
//! at +100 dB; the loss path instead smooths the residual energy with a
//! small epsilon so gradients stay finite.

use thiserror::Error;

use crate::dsp::Waveform;
use crate::tensor::{Graph, Result as TensorResult, Tensor, Value};

/// Cap applied when the residual energy underflows.
pub const CAP_DB: f64 = 100.0;
const RESIDUAL_FLOOR: f64 = 1e-20;
/// Smoothing added to the residual energy inside the loss.
pub const LOSS_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("signal lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("reference signal has zero energy")]
    ZeroReference,
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Per-signal metric bundle; improvements are relative to the unprocessed
/// mixture scored against the same reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub si_sdr_db: f64,
    pub sdr_db: f64,
    pub si_sdri_db: f64,
    pub sdri_db: f64,
}

fn check_pair(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(MetricError::LengthMismatch(est.len(), reference.len()));
    }
    let ref_energy: f64 = reference.iter().map(|x| x * x).sum();
    if ref_energy <= 0.0 {
        return Err(MetricError::ZeroReference);
    }
    Ok(ref_energy)
}

/// Scale-invariant signal-to-distortion ratio in dB.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    let ref_energy = check_pair(est, reference)?;
    let dot: f64 = est.iter().zip(reference).map(|(e, r)| e * r).sum();
    let a = dot / ref_energy;
    let target_energy = a * a * ref_energy;
    let residual: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, r)| {
            let d = a * r - e;
            d * d
        })
        .sum();
    if residual < RESIDUAL_FLOOR {
        return Ok(CAP_DB);
    }
    Ok(10.0 * (target_energy / residual).log10())
}

/// Plain (scale-sensitive) signal-to-distortion ratio in dB.
pub fn sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    let ref_energy = check_pair(est, reference)?;
    let residual: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, r)| {
            let d = r - e;
            d * d
        })
        .sum();
    if residual < RESIDUAL_FLOOR {
        return Ok(CAP_DB);
    }
    Ok(10.0 * (ref_energy / residual).log10())
}

/// SI-SDR and SDR improvements of `est` over the raw mixture, both scored
/// against `reference`.
pub fn improvements(est: &[f64], mixture: &[f64], reference: &[f64]) -> Result<(f64, f64)> {
    let si = si_sdr(est, reference)? - si_sdr(mixture, reference)?;
    let sd = sdr(est, reference)? - sdr(mixture, reference)?;
    Ok((si, sd))
}

/// Full report for one item.
pub fn report(est: &Waveform, mixture: &Waveform, reference: &Waveform) -> Result<MetricReport> {
    let si = si_sdr(est.samples(), reference.samples())?;
    let sd = sdr(est.samples(), reference.samples())?;
    let (si_i, sd_i) = improvements(est.samples(), mixture.samples(), reference.samples())?;
    Ok(MetricReport { si_sdr_db: si, sdr_db: sd, si_sdri_db: si_i, sdri_db: sd_i })
}

/// Negative SI-SDR as a graph op for minimization. The residual energy is
/// smoothed with [`LOSS_EPS`] instead of capped so the gradient is defined
/// everywhere.
pub fn loss_value(g: &Graph, est: &Value, reference: &Tensor) -> TensorResult<Value> {
    let r = g.constant(reference.clone());
    let dot_terms = g.mul(est, &r)?;
    let dot = g.sum_all(&dot_terms)?;
    let ref_energy: f64 = reference.data().iter().map(|x| x * x).sum();
    let a = g.scale(&dot, 1.0 / ref_energy)?;
    let scaled_ref = g.mul(&r, &a)?;
    let residual = g.sub(&scaled_ref, est)?;
    let res_sq = g.square(&residual)?;
    let res_energy = g.sum_all(&res_sq)?;
    let res_smoothed = g.add_scalar(&res_energy, LOSS_EPS)?;
    let a_sq = g.square(&a)?;
    let target_energy = g.scale(&a_sq, ref_energy)?;
    let ratio = g.div(&target_energy, &res_smoothed)?;
    let log_ratio = g.log(&ratio)?;
    let si_sdr_db = g.scale(&log_ratio, 10.0 / std::f64::consts::LN_10)?;
    g.neg(&si_sdr_db)
}

/// Scalar twin of [`loss_value`], for logging and parity tests.
pub fn loss_scalar(est: &[f64], reference: &[f64]) -> Result<f64> {
    let ref_energy = check_pair(est, reference)?;
    let dot: f64 = est.iter().zip(reference).map(|(e, r)| e * r).sum();
    let a = dot / ref_energy;
    let residual: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, r)| {
            let d = a * r - e;
            d * d
        })
        .sum();
    Ok(-(10.0 / std::f64::consts::LN_10) * (a * a * ref_energy / (residual + LOSS_EPS)).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force formula evaluation, independent of the implementation
    /// path above (no shared helpers).
    fn si_sdr_oracle(est: &[f64], r: &[f64]) -> f64 {
        let dot: f64 = est.iter().zip(r).map(|(a, b)| a * b).sum();
        let re: f64 = r.iter().map(|x| x * x).sum();
        let a = dot / re;
        let num: f64 = r.iter().map(|x| (a * x) * (a * x)).sum();
        let den: f64 = est.iter().zip(r).map(|(e, x)| (a * x - e) * (a * x - e)).sum();
        10.0 * (num / den).log10()
    }

    fn sdr_oracle(est: &[f64], r: &[f64]) -> f64 {
        let num: f64 = r.iter().map(|x| x * x).sum();
        let den: f64 = est.iter().zip(r).map(|(e, x)| (x - e) * (x - e)).sum();
        10.0 * (num / den).log10()
    }

    #[test]
    fn exact_match_hits_the_cap() {
        let r = vec![0.3, -0.5, 0.8, 0.1];
        assert_eq!(si_sdr(&r, &r).unwrap(), CAP_DB);
        assert_eq!(sdr(&r, &r).unwrap(), CAP_DB);
    }

    #[test]
    fn si_sdr_absorbs_scale_sdr_does_not() {
        let r = vec![0.3, -0.5, 0.8, 0.1];
        let doubled: Vec<f64> = r.iter().map(|x| 2.0 * x).collect();
        assert_eq!(si_sdr(&doubled, &r).unwrap(), CAP_DB);
        // sdr(2 ref, ref): residual = ref, so the ratio is exactly 1 -> 0 dB.
        assert_eq!(sdr(&doubled, &r).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_ten_to_one_case_is_ten_db() {
        // Disjoint supports are exactly orthogonal; energies 20 vs 2.
        let mut reference = vec![0.0; 22];
        let mut noise = vec![0.0; 22];
        for slot in reference.iter_mut().take(20) {
            *slot = 1.0;
        }
        noise[20] = 1.0;
        noise[21] = 1.0;
        let est: Vec<f64> = reference.iter().zip(&noise).map(|(r, n)| r + n).collect();
        let got = si_sdr(&est, &reference).unwrap();
        assert!((got - 10.0).abs() <= 1e-9, "got {got}");
    }

    #[test]
    fn scale_invariance_is_numerically_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let r: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c = rng.gen_range(0.01..100.0);
            let scaled: Vec<f64> = e.iter().map(|x| c * x).collect();
            let d = (si_sdr(&e, &r).unwrap() - si_sdr(&scaled, &r).unwrap()).abs();
            assert!(d <= 1e-9, "delta {d}");
        }
    }

    #[test]
    fn formulas_match_brute_force_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..1000 {
            let r: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert!((si_sdr(&e, &r).unwrap() - si_sdr_oracle(&e, &r)).abs() <= 1e-12);
            assert!((sdr(&e, &r).unwrap() - sdr_oracle(&e, &r)).abs() <= 1e-12);
        }
    }

    #[test]
    fn improvements_are_zero_for_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let r: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (si, sd) = improvements(&m, &m, &r).unwrap();
        assert_eq!(si, 0.0);
        assert_eq!(sd, 0.0);
        // est == ref: improvement is cap minus baseline
        let (si, _) = improvements(&r, &m, &r).unwrap();
        assert_eq!(si, CAP_DB - si_sdr(&m, &r).unwrap());
    }

    #[test]
    fn errors_on_degenerate_inputs() {
        assert!(matches!(si_sdr(&[1.0], &[1.0, 2.0]), Err(MetricError::LengthMismatch(1, 2))));
        assert!(matches!(si_sdr(&[1.0, 1.0], &[0.0, 0.0]), Err(MetricError::ZeroReference)));
    }

    #[test]
    fn loss_decreases_as_residual_shrinks() {
        let r = vec![0.5, -0.25, 0.75, 0.1, -0.6];
        let far: Vec<f64> = r.iter().map(|x| x + 0.3).collect();
        let near: Vec<f64> = r.iter().map(|x| x + 0.03).collect();
        assert!(loss_scalar(&near, &r).unwrap() < loss_scalar(&far, &r).unwrap());
        // near-exact estimate still yields a finite loss (epsilon guard)
        let tiny: Vec<f64> = r.iter().map(|x| x + 1e-12).collect();
        assert!(loss_scalar(&tiny, &r).unwrap().is_finite());
    }

    #[test]
    fn loss_value_matches_scalar_twin_and_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let r: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rt = Tensor::from_vec(r.clone()).unwrap();

        let g = Graph::inference();
        let ev = g.constant(Tensor::from_vec(e.clone()).unwrap());
        let lv = loss_value(&g, &ev, &rt).unwrap();
        let ls = loss_scalar(&e, &r).unwrap();
        assert!((lv.tensor().item().unwrap() - ls).abs() < 1e-12);

        let probe = Tensor::from_vec(e).unwrap();
        let err = crate::tensor::finite_diff_check(
            |g, v| loss_value(g, v, &rt),
            &probe,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "loss grad err {err}");
    }
}
