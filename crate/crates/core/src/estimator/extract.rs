//! Per-factor parameter extraction: spatial frequencies by beamspace
//! correlation and delay by shift invariance along the subcarrier axis.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{DisacError, Result};
use crate::scene::AnglePair;
use crate::waveform::{BeamAxis, BeamCodebook};

/// Estimated phase step of one array axis and the normalized correlation at
/// the optimum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisEstimate {
    pub step: f64,
    pub correlation: f64,
}

const GOLDEN_TOL: f64 = 1e-6;

fn wrap(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        PI
    } else {
        y
    }
}

/// Normalized correlation `|u^H r(ω)| / (‖u‖ ‖r(ω)‖)`, where `r(ω)` is the
/// codebook response to phase step `ω` (conjugated on transmit axes).
fn correlation(u: &[Complex64], codebook: &BeamCodebook, unorm: f64, step: f64) -> f64 {
    let n = codebook.elements();
    let m = &codebook.matrix;
    let rot = Complex64::from_polar(1.0, step);
    let mut inner = Complex64::new(0.0, 0.0);
    let mut rnorm = 0.0;
    let transmit = matches!(codebook.axis, BeamAxis::TxAz | BeamAxis::TxEl);
    for (b, ub) in u.iter().enumerate() {
        let col = m.column(b);
        let mut r = Complex64::new(0.0, 0.0);
        let mut ph = Complex64::new(1.0, 0.0);
        for e in 0..n {
            r += col[e].conj() * ph;
            ph *= rot;
        }
        if transmit {
            r = r.conj();
        }
        inner += ub.conj() * r;
        rnorm += r.norm_sqr();
    }
    let rnorm = rnorm.sqrt();
    if rnorm <= 1e-12 * (n as f64).sqrt() || unorm == 0.0 {
        return 0.0;
    }
    inner.norm() / (unorm * rnorm)
}

/// Spatial phase step of a beamspace factor column.
///
/// The factor is matched against the codebook response over a grid of steps
/// in `[-π, π)` and the best grid point is refined by golden-section search.
pub fn extract_angle(factor: &[Complex64], codebook: &BeamCodebook) -> Result<AxisEstimate> {
    if factor.len() != codebook.beams() {
        return Err(DisacError::DimensionMismatch(format!(
            "factor length {} vs {} beams",
            factor.len(),
            codebook.beams()
        )));
    }
    if factor.len() < 2 {
        return Err(DisacError::Unidentifiable(
            "a single beam carries no angle information".into(),
        ));
    }
    let unorm = factor.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let grid = (32 * codebook.elements()).max(256);
    let h = 2.0 * PI / grid as f64;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 0..grid {
        let w = -PI + i as f64 * h;
        let c = correlation(factor, codebook, unorm, w);
        if c > best.0 {
            best = (c, w);
        }
    }
    let (mut a, mut b) = (best.1 - h, best.1 + h);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = correlation(factor, codebook, unorm, x1);
    let mut f2 = correlation(factor, codebook, unorm, x2);
    while b - a > GOLDEN_TOL {
        if f1 > f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = correlation(factor, codebook, unorm, x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = correlation(factor, codebook, unorm, x2);
        }
    }
    let mid = 0.5 * (a + b);
    let fm = correlation(factor, codebook, unorm, mid);
    let (correlation, step) = [(best.0, best.1), (fm, mid)]
        .into_iter()
        .fold((f64::NEG_INFINITY, 0.0), |acc, c| if c.0 > acc.0 { c } else { acc });
    Ok(AxisEstimate {
        step: wrap(step),
        correlation,
    })
}

/// Delay from a subcarrier factor `û ≈ c·s(τ)` via the lag-one phase,
/// mapped into `[0, 1/Δf)`.
pub fn extract_delay(factor: &[Complex64], subcarrier_spacing: f64) -> Result<f64> {
    if factor.len() < 2 {
        return Err(DisacError::InvalidArgument("delay needs at least two subcarriers".into()));
    }
    let energy: f64 = factor.iter().map(|c| c.norm_sqr()).sum();
    let lag: Complex64 = factor.windows(2).map(|w| w[1] * w[0].conj()).sum();
    if lag.norm() < 1e-9 * energy || energy == 0.0 {
        return Err(DisacError::Unidentifiable(
            "subcarrier factor has no usable phase progression".into(),
        ));
    }
    let period = 1.0 / subcarrier_spacing;
    let tau = (-lag.arg() / (2.0 * PI * subcarrier_spacing)).rem_euclid(period);
    Ok(if tau >= period { 0.0 } else { tau })
}

/// Angles from the phase steps along the array x (azimuth codebook) and
/// y (elevation codebook) axes. The flag is false when the implied direction
/// cosines leave the unit disc; the cosines are then projected onto it.
pub fn angles_from_steps(step_x: f64, step_y: f64, phase_scale: f64) -> (AnglePair, bool) {
    let cx = step_x / phase_scale;
    let cy = step_y / phase_scale;
    match AnglePair::from_direction_cosines(cx, cy) {
        Some(a) => (a, true),
        None => {
            let n = (cx * cx + cy * cy).sqrt();
            let a = AnglePair::from_direction_cosines(cx / n, cy / n).unwrap_or(AnglePair::new(0.0, 0.0));
            (a, false)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform::{delay_vector, dft_codebook};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn planted_step_is_recovered_on_square_codebook() {
        let cb = dft_codebook(8, 8, BeamAxis::RxAz).unwrap();
        for w0 in [-2.9, -0.7, 0.0, 0.3, 1.234, 3.0] {
            let u = cb.response(w0);
            let est = extract_angle(&u, &cb).unwrap();
            assert!((wrap(est.step - w0)).abs() < 2e-6, "{w0} -> {}", est.step);
            assert!(est.correlation > 1.0 - 1e-9);
        }
    }

    #[test]
    fn transmit_factors_are_conjugated() {
        let cb = dft_codebook(16, 8, BeamAxis::TxAz).unwrap();
        let u: Vec<Complex64> = cb.response(0.4).into_iter().map(|c| c.conj()).collect();
        let est = extract_angle(&u, &cb).unwrap();
        assert!((est.step - 0.4).abs() < 2e-6);
    }

    #[test]
    fn single_beam_is_unidentifiable() {
        let cb = dft_codebook(4, 1, BeamAxis::RxEl).unwrap();
        assert!(matches!(
            extract_angle(&[Complex64::new(1.0, 0.0)], &cb),
            Err(DisacError::Unidentifiable(_))
        ));
    }

    fn noisy_errors(cb: &BeamCodebook, span: f64, seed: u64, draws: usize) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..draws)
            .map(|_| {
                let w0: f64 = rand::Rng::random_range(&mut rng, -span..span);
                let clean = cb.response(w0);
                let p = clean.iter().map(|c| c.norm_sqr()).sum::<f64>() / clean.len() as f64;
                let std = (p / 100.0 / 2.0).sqrt();
                let u: Vec<Complex64> = clean
                    .iter()
                    .map(|c| {
                        let re: f64 = StandardNormal.sample(&mut rng);
                        let im: f64 = StandardNormal.sample(&mut rng);
                        c + Complex64::new(re, im) * std
                    })
                    .collect();
                wrap(extract_angle(&u, cb).unwrap().step - w0)
            })
            .collect()
    }

    #[test]
    fn noisy_step_reaches_single_tone_bound() {
        // For 8 elements at 20 dB the single-tone bound 6/(snr·N(N²-1)) already
        // has a standard deviation near 0.011 rad, so check efficiency instead.
        let n = 8.0f64;
        let crb = 6.0 / (100.0 * n * (n * n - 1.0));
        let cb = dft_codebook(8, 8, BeamAxis::RxAz).unwrap();
        let errs = noisy_errors(&cb, 2.5, 6, 400);
        let mse = errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64;
        assert!(mse < 1.3 * crb && mse > 0.7 * crb, "mse {mse} bound {crb}");
    }

    #[test]
    fn delay_examples() {
        let df = 1.5625e6;
        let k = 64;
        assert_eq!(extract_delay(&delay_vector(0.0, df, k), df).unwrap(), 0.0);
        let tau = 3.0 / (k as f64 * df);
        assert!((extract_delay(&delay_vector(tau, df, k), df).unwrap() - tau).abs() < 1e-12);
    }

    #[test]
    fn flat_factor_without_progression_is_unidentifiable() {
        let u = vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 0.0),
        ];
        assert!(matches!(extract_delay(&u, 1e6), Err(DisacError::Unidentifiable(_))));
    }

    #[test]
    fn noisy_delay_within_one_nanosecond() {
        let df = 1.5625e6;
        let k = 64;
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let std = (10f64.powf(-3.0) / 2.0).sqrt();
        for _ in 0..100 {
            let tau: f64 = rand::Rng::random_range(&mut rng, 0.0..600e-9);
            let u: Vec<Complex64> = delay_vector(tau, df, k)
                .into_iter()
                .map(|c| {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    c + Complex64::new(re, im) * std
                })
                .collect();
            let est = extract_delay(&u, df).unwrap();
            let period = 1.0 / df;
            let err = (est - tau + period / 2.0).rem_euclid(period) - period / 2.0;
            assert!(err.abs() < 1e-9, "{tau} -> {est}");
        }
    }

    proptest::proptest! {
        #[test]
        fn delay_exact_on_noiseless_vandermonde(frac in 0.0f64..1.0) {
            let df = 1.5625e6;
            let tau = frac / df;
            let est = extract_delay(&delay_vector(tau, df, 64), df).unwrap();
            let period = 1.0 / df;
            let err = (est - tau + period / 2.0).rem_euclid(period) - period / 2.0;
            proptest::prop_assert!(err.abs() <= 1e-12);
        }
    }
}
