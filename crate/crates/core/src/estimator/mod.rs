//! Multipath parameter estimation from a beamspace measurement tensor.
//!
//! The tensor is fitted with a rank-L CP model; every CP component is one
//! path, and its five factor columns are turned into angles and a delay.

mod cpd;
mod extract;
mod init;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub use cpd::{cpd_als, cpd_als_dense, estimator_stream, reconstruct, residual_norm, CpFactors, CpOptions};
pub use extract::{angles_from_steps, extract_angle, extract_delay, AxisEstimate};

use crate::error::{DisacError, Result};
use crate::scene::AnglePair;
use crate::waveform::{delay_vector, MeasurementTensor};

/// Correlation below which an angle estimate is marked unreliable.
pub const LOW_CONFIDENCE_CORRELATION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatedPath {
    /// Complex path gain, transmit amplitude removed.
    pub gain: Complex64,
    /// Delay in `[0, 1/Δf)`, seconds.
    pub delay: f64,
    pub aoa: AnglePair,
    pub aod: AnglePair,
    pub low_confidence: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RankSelection {
    Fixed(usize),
    Auto { max_rank: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    pub cp: CpOptions,
    /// Start the CP fit from the algebraic shift-invariance solution.
    pub algebraic_init: bool,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            cp: CpOptions::default(),
            algebraic_init: true,
        }
    }
}

/// Noise standard deviation of one beamspace entry, bounded over the
/// receive codebook correlation.
fn beamspace_noise_std(t: &MeasurementTensor) -> f64 {
    let spectral = |m: &DMatrix<Complex64>| {
        let g = m.adjoint() * m;
        g.singular_values().max()
    };
    (t.noise_variance * spectral(&t.codebooks.rx_az.matrix) * spectral(&t.codebooks.rx_el.matrix)).sqrt()
}

/// Singular values of the mode-`n` unfolding, descending.
fn unfolding_singular_values(t: &MeasurementTensor, n: usize) -> Vec<f64> {
    let shape = t.shape;
    let len = shape[n];
    let inner: usize = shape[n + 1..].iter().product();
    let cols = t.data.len() / len;
    let mut gram = DMatrix::<Complex64>::zeros(len, len);
    // Accumulate the Gram matrix for the SVD of the short side only when the
    // long side is large; precision is adequate above the relative floor used
    // by the caller.
    if cols > 4096 {
        let mut row_i = vec![Complex64::new(0.0, 0.0); cols];
        let mut rows: Vec<Vec<Complex64>> = Vec::with_capacity(len);
        for i in 0..len {
            for (c, v) in row_i.iter_mut().enumerate() {
                let (outer, rest) = (c / inner, c % inner);
                *v = t.data[(outer * len + i) * inner + rest];
            }
            rows.push(row_i.clone());
        }
        for i in 0..len {
            for j in i..len {
                let s: Complex64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b.conj()).sum();
                gram[(i, j)] = s;
                gram[(j, i)] = s.conj();
            }
        }
        let mut ev: Vec<f64> = gram
            .singular_values()
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        return ev;
    }
    let unfold = DMatrix::from_fn(len, cols, |i, c| {
        let (outer, rest) = (c / inner, c % inner);
        t.data[(outer * len + i) * inner + rest]
    });
    let mut sv: Vec<f64> = unfold.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Number of paths: the largest count, over all mode unfoldings, of singular
/// values above the expected largest noise singular value.
pub fn select_model_order(tensor: &MeasurementTensor, max_rank: usize) -> usize {
    if tensor.data.iter().all(|v| *v == Complex64::new(0.0, 0.0)) {
        return 0;
    }
    let sigma = beamspace_noise_std(tensor);
    let total = tensor.data.len();
    let spectra: Vec<Vec<f64>> = (0..5).map(|n| unfolding_singular_values(tensor, n)).collect();
    let smax = spectra.iter().map(|s| s[0]).fold(0.0, f64::max);
    let floor = 1e-7 * smax;
    let mut order = 0;
    for (n, s) in spectra.iter().enumerate() {
        let i = tensor.shape[n] as f64;
        let j = (total / tensor.shape[n]) as f64;
        let thr = (1.2 * sigma * (i.sqrt() + j.sqrt())).max(floor);
        order = order.max(s.iter().filter(|v| **v > thr).count());
    }
    order.min(max_rank)
}

/// Per-path phase steps `[rx_el, rx_az, tx_el, tx_az]`, delay and quality.
struct PathParams {
    steps: [f64; 4],
    delay: f64,
    reliable: bool,
}

/// Least-squares gains of the ideal rank-1 components given by `params`.
fn refit_gains(t: &MeasurementTensor, params: &[PathParams]) -> Vec<Complex64> {
    let l = params.len();
    let cb = &t.codebooks;
    let factors: Vec<DMatrix<Complex64>> = (0..5)
        .map(|n| {
            DMatrix::from_fn(t.shape[n], l, |_, _| Complex64::new(0.0, 0.0))
        })
        .collect();
    let mut factors = factors;
    for (c, p) in params.iter().enumerate() {
        let cols = [
            cb.rx_el.response(p.steps[0]),
            cb.rx_az.response(p.steps[1]),
            cb.tx_el.response(p.steps[2]).into_iter().map(|v| v.conj()).collect(),
            cb.tx_az.response(p.steps[3]).into_iter().map(|v| v.conj()).collect(),
            delay_vector(p.delay, t.ofdm.subcarrier_spacing, t.shape[4]),
        ];
        for (n, col) in cols.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                factors[n][(i, c)] = *v;
            }
        }
    }
    // Normal equations: G g = b with G = ⊛ (A_n^H A_n) and b_l = ⟨V_l, X⟩.
    let mut g = DMatrix::from_element(l, l, Complex64::new(1.0, 0.0));
    for f in &factors {
        g.component_mul_assign(&(f.adjoint() * f));
    }
    let mut b = DMatrix::<Complex64>::zeros(l, 1);
    // ⟨V_l, X⟩ = Σ conj(V_l) X, accumulated by contracting mode by mode.
    let shape = t.shape;
    let lead: usize = shape[..4].iter().product();
    let kk = shape[4];
    let mut z = vec![Complex64::new(0.0, 0.0); lead * l];
    for p in 0..lead {
        for k in 0..kk {
            let x = t.data[p * kk + k];
            for c in 0..l {
                z[p * l + c] += x * factors[4][(k, c)].conj();
            }
        }
    }
    let mut idx = [0usize; 4];
    for p in 0..lead {
        for c in 0..l {
            let mut w = z[p * l + c];
            for m in 0..4 {
                w *= factors[m][(idx[m], c)].conj();
            }
            b[(c, 0)] += w;
        }
        for m in (0..4).rev() {
            idx[m] += 1;
            if idx[m] < shape[m] {
                break;
            }
            idx[m] = 0;
        }
    }
    match g.clone().cholesky() {
        Some(ch) => ch.solve(&b).iter().copied().collect(),
        None => {
            let svd = g.svd(true, true);
            let smax = svd.singular_values.max();
            svd.solve(&b, smax * 1e-12)
                .map(|x| x.iter().copied().collect())
                .unwrap_or_else(|_| vec![Complex64::new(0.0, 0.0); l])
        }
    }
}

/// Rank-`rank` CP fit with the configured initialization.
pub fn fit_tensor(tensor: &MeasurementTensor, rank: usize, opts: &EstimatorOptions) -> Result<CpFactors> {
    let init = if opts.algebraic_init {
        init::algebraic_init(tensor, rank)
    } else {
        None
    };
    cpd_als_dense(&tensor.shape, &tensor.data, rank, &opts.cp, init)
}

/// Paths in `tensor`, strongest first.
pub fn estimate_paths(
    tensor: &MeasurementTensor,
    rank: RankSelection,
    opts: &EstimatorOptions,
) -> Result<Vec<EstimatedPath>> {
    let l = match rank {
        RankSelection::Fixed(l) => {
            if l == 0 {
                return Err(DisacError::InvalidArgument("rank must be at least 1".into()));
            }
            l
        }
        RankSelection::Auto { max_rank } => {
            if max_rank == 0 {
                return Err(DisacError::InvalidArgument("max_rank must be at least 1".into()));
            }
            select_model_order(tensor, max_rank)
        }
    };
    if l == 0 || tensor.frobenius_norm() == 0.0 {
        return Ok(Vec::new());
    }
    let cp = fit_tensor(tensor, l, opts)?;
    let cb = &tensor.codebooks;
    let mut params = Vec::with_capacity(l);
    for c in 0..l {
        let cols = cp.column(c);
        let mut reliable = true;
        let mut steps = [0.0; 4];
        for (n, codebook) in [&cb.rx_el, &cb.rx_az, &cb.tx_el, &cb.tx_az].into_iter().enumerate() {
            match extract_angle(&cols[n], codebook) {
                Ok(est) => {
                    steps[n] = est.step;
                    reliable &= est.correlation >= LOW_CONFIDENCE_CORRELATION;
                }
                // One beam on this axis: the angle is unobservable, keep broadside.
                Err(DisacError::Unidentifiable(_)) => reliable = false,
                Err(e) => return Err(e),
            }
        }
        let delay = match extract_delay(&cols[4], tensor.ofdm.subcarrier_spacing) {
            Ok(d) => d,
            Err(DisacError::Unidentifiable(_)) => {
                reliable = false;
                0.0
            }
            Err(e) => return Err(e),
        };
        params.push(PathParams { steps, delay, reliable });
    }

    let gains = refit_gains(tensor, &params);
    let amp = tensor.amplitude_scale();
    let rk = tensor.rx_array.phase_scale();
    let tk = tensor.tx_array.phase_scale();
    let mut paths: Vec<EstimatedPath> = params
        .iter()
        .zip(gains)
        .map(|(p, g)| {
            let (aoa, ok_r) = angles_from_steps(p.steps[1], p.steps[0], rk);
            let (aod, ok_t) = angles_from_steps(p.steps[3], p.steps[2], tk);
            EstimatedPath {
                gain: g / amp,
                delay: p.delay,
                aoa,
                aod,
                low_confidence: !(p.reliable && ok_r && ok_t),
            }
        })
        .collect();
    paths.sort_by(|a, b| b.gain.norm().total_cmp(&a.gain.norm()).then(a.delay.total_cmp(&b.delay)));
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{PathLabel, PathRecord, UpaGeometry};
    use crate::waveform::{synthesize_from_paths, Codebooks, OfdmConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn small_setup() -> (UpaGeometry, UpaGeometry, Codebooks, OfdmConfig) {
        let lambda = 0.02;
        let rx = UpaGeometry::half_wavelength(4, 4, lambda).unwrap();
        let tx = UpaGeometry::half_wavelength(8, 4, lambda).unwrap();
        let cb = Codebooks::dft(&rx, (4, 4), &tx, (4, 2)).unwrap();
        let ofdm = OfdmConfig {
            num_subcarriers: 16,
            ..OfdmConfig::default()
        };
        (rx, tx, cb, ofdm)
    }

    fn path(g: f64, delay: f64, aoa: (f64, f64), aod: (f64, f64)) -> PathRecord {
        PathRecord {
            gain: Complex64::from_polar(g, 0.3),
            delay,
            aoa: AnglePair::new(aoa.0, aoa.1),
            aod: AnglePair::new(aod.0, aod.1),
            label: PathLabel::Los,
        }
    }

    #[test]
    fn zero_tensor_auto_rank_is_empty() {
        let (rx, tx, cb, ofdm) = small_setup();
        let t = synthesize_from_paths(&[], &rx, &tx, &cb, &ofdm, 1e-12, None).unwrap();
        let out = estimate_paths(&t, RankSelection::Auto { max_rank: 4 }, &EstimatorOptions::default()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn pure_noise_selects_order_zero() {
        let (rx, tx, cb, ofdm) = small_setup();
        for seed in 0..10 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let t = synthesize_from_paths(&[], &rx, &tx, &cb, &ofdm, 1e-10, Some(&mut rng)).unwrap();
            assert_eq!(select_model_order(&t, 8), 0);
        }
    }

    #[test]
    fn noiseless_order_matches_planted_paths() {
        let (rx, tx, cb, ofdm) = small_setup();
        let paths = vec![
            path(1.0, 50e-9, (0.3, 0.1), (0.1, -0.05)),
            path(0.6, 140e-9, (-0.4, -0.2), (-0.2, 0.02)),
            path(0.4, 300e-9, (0.05, 0.3), (0.3, 0.0)),
        ];
        let t = synthesize_from_paths(&paths[..2], &rx, &tx, &cb, &ofdm, 0.0, None).unwrap();
        assert_eq!(select_model_order(&t, 8), 2);
        let t = synthesize_from_paths(&paths, &rx, &tx, &cb, &ofdm, 0.0, None).unwrap();
        assert_eq!(select_model_order(&t, 8), 3);
    }

    #[test]
    fn scaling_the_tensor_scales_gains_only() {
        let (rx, tx, cb, ofdm) = small_setup();
        let paths = vec![
            path(1.0, 50e-9, (0.3, 0.1), (0.1, -0.05)),
            path(0.6, 140e-9, (-0.4, -0.2), (-0.2, 0.02)),
        ];
        let t = synthesize_from_paths(&paths, &rx, &tx, &cb, &ofdm, 0.0, None).unwrap();
        let mut scaled = t.clone();
        let c = Complex64::new(-0.5, 2.0);
        scaled.data.iter_mut().for_each(|v| *v *= c);
        let opts = EstimatorOptions::default();
        let a = estimate_paths(&t, RankSelection::Fixed(2), &opts).unwrap();
        let b = estimate_paths(&scaled, RankSelection::Fixed(2), &opts).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((q.gain - p.gain * c).norm() < 1e-8 * p.gain.norm() * c.norm());
            assert!((p.delay - q.delay).abs() < 1e-12);
            assert!((p.aoa.azimuth - q.aoa.azimuth).abs() < 1e-5);
            assert!((p.aod.elevation - q.aod.elevation).abs() < 1e-5);
        }
    }
}
