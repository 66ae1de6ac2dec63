//! Alternating least squares for the complex canonical polyadic decomposition
//! of a dense row-major tensor.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DisacError, Result};
use crate::waveform::MeasurementTensor;

/// RNG stream for the estimator of receiver `rx_id`.
pub fn estimator_stream(rx_id: usize) -> u64 {
    1000 + rx_id as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpOptions {
    pub max_iters: usize,
    /// Stop once the relative residual changes by less than this per sweep.
    pub tol: f64,
    /// Random starts. When an explicit initialization is supplied these run
    /// in addition to it.
    pub restarts: usize,
    pub seed: u64,
    pub stream: u64,
}

impl Default for CpOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-8,
            restarts: 5,
            seed: 0,
            stream: estimator_stream(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpFactors {
    /// One matrix per mode (mode length × L), unit-norm columns.
    pub factors: Vec<DMatrix<Complex64>>,
    pub gains: Vec<Complex64>,
    /// Frobenius norm of the fit error.
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Residual after every sweep of the returned start.
    pub residual_history: Vec<f64>,
}

impl CpFactors {
    pub fn rank(&self) -> usize {
        self.gains.len()
    }

    /// Column `l` of every factor.
    pub fn column(&self, l: usize) -> Vec<Vec<Complex64>> {
        self.factors
            .iter()
            .map(|f| f.column(l).iter().copied().collect())
            .collect()
    }
}

fn zero() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

/// Dense reconstruction `Σ_l g_l ∘_n A_n[:, l]`.
pub fn reconstruct(shape: &[usize], factors: &[DMatrix<Complex64>], gains: &[Complex64]) -> Vec<Complex64> {
    let total: usize = shape.iter().product();
    let mut out = vec![zero(); total];
    let n = shape.len();
    let mut idx = vec![0usize; n];
    for v in out.iter_mut() {
        let mut acc = zero();
        for (l, g) in gains.iter().enumerate() {
            let mut p = *g;
            for m in 0..n {
                p *= factors[m][(idx[m], l)];
            }
            acc += p;
        }
        *v = acc;
        for m in (0..n).rev() {
            idx[m] += 1;
            if idx[m] < shape[m] {
                break;
            }
            idx[m] = 0;
        }
    }
    out
}

pub fn residual_norm(data: &[Complex64], shape: &[usize], factors: &[DMatrix<Complex64>], gains: &[Complex64]) -> f64 {
    let fit = reconstruct(shape, factors, gains);
    data.iter()
        .zip(&fit)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Solves `A G = M` for `A` with `G` Hermitian positive semi-definite.
fn solve_right_hermitian(m: &DMatrix<Complex64>, g: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    // A G = M  <=>  G^T A^T = M^T, and G^T = conj(G).
    let gt = g.conjugate();
    let rhs = m.transpose();
    if let Some(ch) = gt.clone().cholesky() {
        let x = ch.solve(&rhs);
        if x.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            return x.transpose();
        }
    }
    let svd = gt.svd(true, true);
    let smax = svd.singular_values.max();
    let pinv = svd
        .pseudo_inverse(smax * 1e-12)
        .expect("SVD computed with U and V");
    (pinv * rhs).transpose()
}

/// Hadamard product of `A_m^T conj(A_m)` over the modes `m != skip`.
fn gram_hadamard(factors: &[DMatrix<Complex64>], skip: usize) -> DMatrix<Complex64> {
    let r = factors[0].ncols();
    let mut g = DMatrix::from_element(r, r, Complex64::new(1.0, 0.0));
    for (m, a) in factors.iter().enumerate() {
        if m == skip {
            continue;
        }
        let am = a.transpose() * a.conjugate();
        g.component_mul_assign(&am);
    }
    g
}

struct Workspace<'a> {
    data: &'a [Complex64],
    shape: &'a [usize],
    lead: usize,
    last: usize,
    rank: usize,
    norm_sq: f64,
    /// Decoded leading indices, `lead × (n - 1)`.
    coords: Vec<usize>,
}

impl<'a> Workspace<'a> {
    fn new(data: &'a [Complex64], shape: &'a [usize], rank: usize) -> Self {
        let n = shape.len();
        let last = shape[n - 1];
        let lead = data.len() / last;
        let mut coords = Vec::with_capacity(lead * (n - 1));
        let mut idx = vec![0usize; n - 1];
        for _ in 0..lead {
            coords.extend_from_slice(&idx);
            for m in (0..n - 1).rev() {
                idx[m] += 1;
                if idx[m] < shape[m] {
                    break;
                }
                idx[m] = 0;
            }
        }
        Self {
            data,
            shape,
            lead,
            last,
            rank,
            norm_sq: data.iter().map(|v| v.norm_sqr()).sum(),
            coords,
        }
    }

    /// `Z = X ×_last conj(A_last)`, a `lead × rank` row-major array.
    fn contract_last(&self, a_last: &DMatrix<Complex64>) -> Vec<Complex64> {
        let r = self.rank;
        let k = self.last;
        let conj: Vec<Complex64> = (0..k)
            .flat_map(|i| (0..r).map(move |l| (i, l)))
            .map(|(i, l)| a_last[(i, l)].conj())
            .collect();
        let mut z = vec![zero(); self.lead * r];
        for p in 0..self.lead {
            let row = &self.data[p * k..(p + 1) * k];
            let zr = &mut z[p * r..(p + 1) * r];
            for (i, x) in row.iter().enumerate() {
                let c = &conj[i * r..(i + 1) * r];
                for l in 0..r {
                    zr[l] += x * c[l];
                }
            }
        }
        z
    }

    /// MTTKRP for a leading mode `n` from the contracted array `z`.
    fn mttkrp_lead(&self, z: &[Complex64], factors: &[DMatrix<Complex64>], n: usize) -> DMatrix<Complex64> {
        let r = self.rank;
        let nl = self.shape.len() - 1;
        let mut out = DMatrix::zeros(self.shape[n], r);
        let mut w = vec![zero(); r];
        for p in 0..self.lead {
            let c = &self.coords[p * nl..(p + 1) * nl];
            w.copy_from_slice(&z[p * r..(p + 1) * r]);
            for (m, &cm) in c.iter().enumerate() {
                if m == n {
                    continue;
                }
                for l in 0..r {
                    w[l] *= factors[m][(cm, l)].conj();
                }
            }
            for l in 0..r {
                out[(c[n], l)] += w[l];
            }
        }
        out
    }

    /// MTTKRP for the last mode.
    fn mttkrp_last(&self, factors: &[DMatrix<Complex64>]) -> DMatrix<Complex64> {
        let r = self.rank;
        let k = self.last;
        let nl = self.shape.len() - 1;
        let mut acc = vec![zero(); k * r];
        let mut kr = vec![zero(); r];
        for p in 0..self.lead {
            let c = &self.coords[p * nl..(p + 1) * nl];
            kr.iter_mut().for_each(|v| *v = Complex64::new(1.0, 0.0));
            for (m, &cm) in c.iter().enumerate() {
                for l in 0..r {
                    kr[l] *= factors[m][(cm, l)].conj();
                }
            }
            let row = &self.data[p * k..(p + 1) * k];
            for (i, x) in row.iter().enumerate() {
                let a = &mut acc[i * r..(i + 1) * r];
                for l in 0..r {
                    a[l] += x * kr[l];
                }
            }
        }
        DMatrix::from_fn(k, r, |i, l| acc[i * r + l])
    }
}

fn normalize_columns(factors: &mut [DMatrix<Complex64>]) -> Vec<Complex64> {
    let r = factors[0].ncols();
    let mut gains = vec![Complex64::new(1.0, 0.0); r];
    for f in factors.iter_mut() {
        for l in 0..r {
            let nrm = f.column(l).norm();
            if nrm > 0.0 {
                f.column_mut(l).unscale_mut(nrm);
                gains[l] *= nrm;
            } else {
                gains[l] = zero();
            }
        }
    }
    gains
}

fn random_factors(shape: &[usize], rank: usize, rng: &mut ChaCha20Rng) -> Vec<DMatrix<Complex64>> {
    shape
        .iter()
        .map(|&len| {
            DMatrix::from_fn(len, rank, |_, _| {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                Complex64::new(re, im)
            })
        })
        .collect()
}

struct Run {
    factors: Vec<DMatrix<Complex64>>,
    residual: f64,
    converged: bool,
    iterations: usize,
    history: Vec<f64>,
}

fn run_als(ws: &Workspace, mut factors: Vec<DMatrix<Complex64>>, opts: &CpOptions) -> Run {
    let n = ws.shape.len();
    let xnorm = ws.norm_sq.sqrt();
    // Spread the scale evenly so that no mode starts near under/overflow.
    let gains = normalize_columns(&mut factors);
    for (l, g) in gains.iter().enumerate() {
        let s = g.norm().max(1e-300);
        factors[n - 1].column_mut(l).scale_mut(s);
    }

    let mut history = Vec::new();
    let mut prev = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        iterations += 1;
        let z = ws.contract_last(&factors[n - 1]);
        for m in 0..n - 1 {
            let mk = ws.mttkrp_lead(&z, &factors, m);
            let g = gram_hadamard(&factors, m);
            factors[m] = solve_right_hermitian(&mk, &g);
        }
        let mk = ws.mttkrp_last(&factors);
        let g = gram_hadamard(&factors, n - 1);
        factors[n - 1] = solve_right_hermitian(&mk, &g);

        // ‖X − X̂‖² = ‖X‖² − 2 Re⟨X, X̂⟩ + ‖X̂‖²
        let a = &factors[n - 1];
        let inner: Complex64 = mk.iter().zip(a.iter()).map(|(m, v)| m * v.conj()).sum();
        let self_gram = a.transpose() * a.conjugate();
        let fit_sq: Complex64 = g.iter().zip(self_gram.iter()).map(|(x, y)| x * y).sum();
        let mut res_sq = ws.norm_sq - 2.0 * inner.re + fit_sq.re;
        // The cheap formula loses all precision near an exact fit.
        if res_sq < 1e-12 * ws.norm_sq {
            let gains = vec![Complex64::new(1.0, 0.0); ws.rank];
            res_sq = residual_norm(ws.data, ws.shape, &factors, &gains).powi(2);
        }
        let res = res_sq.max(0.0).sqrt();
        if !res.is_finite() {
            break;
        }
        history.push(res);

        // Rebalance: unit columns in the leading modes, scale in the last.
        let r = ws.rank;
        for m in 0..n - 1 {
            for l in 0..r {
                let nrm = factors[m].column(l).norm();
                if nrm > 0.0 {
                    factors[m].column_mut(l).unscale_mut(nrm);
                    factors[n - 1].column_mut(l).scale_mut(nrm);
                }
            }
        }

        let rel = res / xnorm;
        if rel < 1e-13 || (prev - res).abs() / xnorm < opts.tol {
            converged = true;
            break;
        }
        prev = res;
    }
    let gains = vec![Complex64::new(1.0, 0.0); ws.rank];
    let residual = residual_norm(ws.data, ws.shape, &factors, &gains);
    Run {
        factors,
        residual,
        converged,
        iterations,
        history,
    }
}

/// Rank-`rank` CP fit of a dense row-major tensor. Returns the best start by
/// residual.
pub fn cpd_als_dense(
    shape: &[usize],
    data: &[Complex64],
    rank: usize,
    opts: &CpOptions,
    init: Option<Vec<DMatrix<Complex64>>>,
) -> Result<CpFactors> {
    if shape.len() < 2 {
        return Err(DisacError::InvalidArgument("CP needs at least two modes".into()));
    }
    if shape.contains(&0) {
        return Err(DisacError::InvalidArgument("tensor modes must be non-empty".into()));
    }
    let total: usize = shape.iter().product();
    if data.len() != total {
        return Err(DisacError::DimensionMismatch(format!(
            "data has {} entries, shape needs {total}",
            data.len()
        )));
    }
    if rank == 0 {
        return Err(DisacError::InvalidArgument("rank must be at least 1".into()));
    }
    for (n, &len) in shape.iter().enumerate() {
        if rank > total / len {
            return Err(DisacError::InvalidArgument(format!(
                "rank {rank} exceeds the column count {} of the mode-{n} unfolding",
                total / len
            )));
        }
    }
    if let Some(f) = &init {
        if f.len() != shape.len() || f.iter().zip(shape).any(|(m, &s)| m.shape() != (s, rank)) {
            return Err(DisacError::DimensionMismatch("initial factors do not match shape and rank".into()));
        }
    }

    let ws = Workspace::new(data, shape, rank);
    if ws.norm_sq == 0.0 {
        let factors = shape
            .iter()
            .map(|&s| {
                let mut m = DMatrix::zeros(s, rank);
                m.row_mut(0).fill(Complex64::new(1.0, 0.0));
                m
            })
            .collect();
        return Ok(CpFactors {
            factors,
            gains: vec![zero(); rank],
            residual: 0.0,
            converged: true,
            iterations: 0,
            residual_history: vec![0.0],
        });
    }

    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    rng.set_stream(opts.stream);
    let mut starts = Vec::new();
    let randoms = if init.is_some() { opts.restarts } else { opts.restarts.max(1) };
    if let Some(f) = init {
        starts.push(f);
    }
    for _ in 0..randoms {
        starts.push(random_factors(shape, rank, &mut rng));
    }

    let mut best: Option<Run> = None;
    for start in starts {
        let run = run_als(&ws, start, opts);
        if !run.residual.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|b| run.residual < b.residual) {
            best = Some(run);
        }
    }
    let best = best.ok_or(DisacError::RankDeficient { column: 0 })?;
    let mut factors = best.factors;
    let gains = normalize_columns(&mut factors);
    Ok(CpFactors {
        factors,
        gains,
        residual: best.residual,
        converged: best.converged,
        iterations: best.iterations,
        residual_history: best.history,
    })
}

/// Rank-`rank` CP fit of a measurement tensor from random starts.
pub fn cpd_als(tensor: &MeasurementTensor, rank: usize, opts: &CpOptions) -> Result<CpFactors> {
    cpd_als_dense(&tensor.shape, &tensor.data, rank, opts, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_unit(len: usize, rng: &mut ChaCha20Rng) -> Vec<Complex64> {
        let v: Vec<Complex64> = (0..len)
            .map(|_| {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                Complex64::new(re, im)
            })
            .collect();
        let n = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        v.into_iter().map(|c| c / n).collect()
    }

    fn planted(shape: &[usize], gains: &[Complex64], seed: u64) -> (Vec<DMatrix<Complex64>>, Vec<Complex64>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let factors: Vec<DMatrix<Complex64>> = shape
            .iter()
            .map(|&s| {
                let cols: Vec<Vec<Complex64>> = gains.iter().map(|_| random_unit(s, &mut rng)).collect();
                DMatrix::from_fn(s, gains.len(), |i, l| cols[l][i])
            })
            .collect();
        let data = reconstruct(shape, &factors, gains);
        (factors, data)
    }

    #[test]
    fn rank_one_noiseless_recovers_gain() {
        let shape = [3, 4, 2, 5];
        let g = Complex64::new(2.5, -1.0);
        let (_, data) = planted(&shape, &[g], 1);
        let cp = cpd_als_dense(&shape, &data, 1, &CpOptions::default(), None).unwrap();
        assert!(cp.residual < 1e-10, "{}", cp.residual);
        // Unit factors leave only a phase ambiguity, so compare magnitudes.
        assert!((cp.gains[0].norm() - g.norm()).abs() < 1e-8 * g.norm());
    }

    #[test]
    fn zero_tensor_gives_zero_gain() {
        let shape = [2, 3, 4];
        let data = vec![zero(); 24];
        let cp = cpd_als_dense(&shape, &data, 1, &CpOptions::default(), None).unwrap();
        assert_eq!(cp.residual, 0.0);
        assert_eq!(cp.gains[0], zero());
    }

    #[test]
    fn rank_bound_is_enforced() {
        let shape = [2, 2, 2];
        let data = vec![Complex64::new(1.0, 0.0); 8];
        assert!(cpd_als_dense(&shape, &data, 5, &CpOptions::default(), None).is_err());
    }

    #[test]
    fn residual_is_monotone_per_sweep() {
        let shape = [4, 5, 3, 6];
        let gains = [Complex64::new(1.0, 0.0), Complex64::new(0.7, 0.2), Complex64::new(-0.4, 0.3)];
        let (_, mut data) = planted(&shape, &gains, 9);
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        for v in data.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *v += Complex64::new(re, im) * 0.01;
        }
        let opts = CpOptions {
            restarts: 1,
            max_iters: 200,
            tol: 0.0,
            ..CpOptions::default()
        };
        let cp = cpd_als_dense(&shape, &data, 3, &opts, None).unwrap();
        let xnorm = data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        for w in cp.residual_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * xnorm, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn reconstruct_matches_explicit_outer_product() {
        let shape = [2, 3];
        let a = DMatrix::from_column_slice(2, 1, &[Complex64::new(1.0, 1.0), Complex64::new(2.0, 0.0)]);
        let b = DMatrix::from_column_slice(3, 1, &[Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0), Complex64::new(-1.0, 0.0)]);
        let g = Complex64::new(0.5, 0.0);
        let out = reconstruct(&shape, &[a.clone(), b.clone()], &[g]);
        for i in 0..2 {
            for j in 0..3 {
                assert!((out[i * 3 + j] - g * a[(i, 0)] * b[(j, 0)]).norm() < 1e-15);
            }
        }
    }
}
