//! Algebraic starting point for the CP fit.
//!
//! The subcarrier axis (and the receive element space, when the receive
//! codebooks are square and therefore invertible) carries Vandermonde
//! structure. Those axes form the rows of a matrix unfolding; the signal
//! subspace of that unfolding is shift invariant along each Vandermonde axis,
//! and the per-axis rotation matrices share one eigenbasis. Diagonalizing a
//! generic combination of them yields one phase per path and axis. The
//! remaining (beamspace) axes follow from a least-squares fit against the
//! ideal Vandermonde vectors and a rank-1 reduction per path.

use nalgebra::{DMatrix, Schur, SymmetricEigen};
use num_complex::Complex64;

use crate::scene::axis_vector;
use crate::waveform::MeasurementTensor;

fn zero() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

/// Eigenvectors of a general complex matrix from its Schur form.
fn eigenvectors(m: DMatrix<Complex64>) -> Option<DMatrix<Complex64>> {
    let n = m.nrows();
    let scale = m.norm().max(1e-300);
    let (q, t) = Schur::try_new(m, 1e-14, 10_000)?.unpack();
    let mut vecs = DMatrix::zeros(n, n);
    for i in 0..n {
        let lambda = t[(i, i)];
        let mut v = vec![zero(); n];
        v[i] = Complex64::new(1.0, 0.0);
        for j in (0..i).rev() {
            let s: Complex64 = (j + 1..=i).map(|m| t[(j, m)] * v[m]).sum();
            let mut d = t[(j, j)] - lambda;
            if d.norm() < 1e-13 * scale {
                d = Complex64::new(1e-13 * scale, 0.0);
            }
            v[j] = -s / d;
        }
        let y = &q * DMatrix::from_column_slice(n, 1, &v);
        let nrm = y.norm();
        if !(nrm > 0.0 && nrm.is_finite()) {
            return None;
        }
        vecs.set_column(i, &(y.column(0) / Complex64::new(nrm, 0.0)));
    }
    Some(vecs)
}

/// Contracts `data` (row-major, `shape`) with `conj(v_m)` on every mode but `n`.
fn contract_except(data: &[Complex64], shape: &[usize], v: &[Vec<Complex64>], n: usize) -> Vec<Complex64> {
    let mut out = vec![zero(); shape[n]];
    let mut idx = vec![0usize; shape.len()];
    for x in data {
        let mut p = *x;
        for (m, &i) in idx.iter().enumerate() {
            if m != n {
                p *= v[m][i].conj();
            }
        }
        out[idx[n]] += p;
        for m in (0..shape.len()).rev() {
            idx[m] += 1;
            if idx[m] < shape[m] {
                break;
            }
            idx[m] = 0;
        }
    }
    out
}

/// Best rank-1 approximation `s · v_0 ∘ … ∘ v_{N-1}` by higher-order power
/// iteration started from the leading unfolding singular vectors.
fn rank_one(data: &[Complex64], shape: &[usize]) -> (Vec<Vec<Complex64>>, Complex64) {
    let total = data.len();
    let mut v: Vec<Vec<Complex64>> = Vec::with_capacity(shape.len());
    for (n, &len) in shape.iter().enumerate() {
        let inner: usize = shape[n + 1..].iter().product();
        let unfold = DMatrix::from_fn(len, total / len, |i, c| {
            let (outer, rest) = (c / inner, c % inner);
            data[(outer * len + i) * inner + rest]
        });
        let eig = SymmetricEigen::new(&unfold * unfold.adjoint());
        let k = eig.eigenvalues.imax();
        v.push(eig.eigenvectors.column(k).iter().copied().collect());
    }
    for _ in 0..10 {
        for n in 0..shape.len() {
            let w = contract_except(data, shape, &v, n);
            let nrm = w.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            if nrm > 0.0 {
                v[n] = w.into_iter().map(|c| c / nrm).collect();
            }
        }
    }
    let w = contract_except(data, shape, &v, 0);
    let s: Complex64 = w.iter().zip(&v[0]).map(|(a, b)| a * b.conj()).sum();
    (v, s)
}

/// One Vandermonde axis in the row index of the unfolding.
struct ShiftAxis {
    size: usize,
    stride: usize,
}

fn shift_invariance(us: &DMatrix<Complex64>, axis: &ShiftAxis) -> Option<DMatrix<Complex64>> {
    let rows = us.nrows();
    let l = us.ncols();
    let sel: Vec<usize> = (0..rows)
        .filter(|r| (r / axis.stride) % axis.size < axis.size - 1)
        .collect();
    if sel.len() < l {
        return None;
    }
    let j1 = DMatrix::from_fn(sel.len(), l, |i, c| us[(sel[i], c)]);
    let j2 = DMatrix::from_fn(sel.len(), l, |i, c| us[(sel[i] + axis.stride, c)]);
    j1.svd(true, true).solve(&j2, 1e-12).ok()
}

/// Initial factors for a rank-`rank` fit, or `None` when the structure needed
/// by the algebraic solution is not available.
pub(crate) fn algebraic_init(t: &MeasurementTensor, rank: usize) -> Option<Vec<DMatrix<Complex64>>> {
    let [me, ma, mte, mta, kk] = t.shape;
    let cb = &t.codebooks;
    let rx_square = cb.rx_el.beams() == cb.rx_el.elements() && cb.rx_az.beams() == cb.rx_az.elements();
    let el_inv = cb.rx_el.matrix.adjoint().try_inverse();
    let az_inv = cb.rx_az.matrix.conjugate().try_inverse();
    let element_space = rx_square && el_inv.is_some() && az_inv.is_some() && me * ma > 1;

    // Unfolding Y: rows carry the Vandermonde axes, columns the rest.
    let (y, axes, col_shape) = if element_space {
        let pel = el_inv.unwrap();
        let paz = az_inv.unwrap();
        let (ny, nx) = (me, ma);
        let rows = ny * nx * kk;
        let cols = mte * mta;
        let mut y = DMatrix::<Complex64>::zeros(rows, cols);
        let mut b = DMatrix::<Complex64>::zeros(me, ma);
        for te in 0..mte {
            for ta in 0..mta {
                let col = te * mta + ta;
                for k in 0..kk {
                    for e in 0..me {
                        for a in 0..ma {
                            b[(e, a)] = t.get([e, a, te, ta, k]);
                        }
                    }
                    let el = &pel * &b * &paz;
                    for yy in 0..ny {
                        for xx in 0..nx {
                            y[((yy * nx + xx) * kk + k, col)] = el[(yy, xx)];
                        }
                    }
                }
            }
        }
        let axes = vec![
            ShiftAxis { size: ny, stride: nx * kk },
            ShiftAxis { size: nx, stride: kk },
            ShiftAxis { size: kk, stride: 1 },
        ];
        (y, axes, vec![mte, mta])
    } else {
        let cols = me * ma * mte * mta;
        let y = DMatrix::from_fn(kk, cols, |k, c| t.data[c * kk + k]);
        (y, vec![ShiftAxis { size: kk, stride: 1 }], vec![me, ma, mte, mta])
    };
    if rank > y.nrows().min(y.ncols()) {
        return None;
    }

    let svd = y.clone().svd(true, false);
    let u = svd.u.as_ref()?;
    let us = u.columns(0, rank).into_owned();

    let psis: Vec<DMatrix<Complex64>> = axes
        .iter()
        .map(|a| if a.size > 1 { shift_invariance(&us, a) } else { Some(DMatrix::identity(rank, rank)) })
        .collect::<Option<_>>()?;
    const MIX: [f64; 3] = [1.0, 0.618_033_988_749_894_8, 0.414_213_562_373_095_1];
    let mut combo = DMatrix::<Complex64>::zeros(rank, rank);
    for (i, p) in psis.iter().enumerate() {
        combo += p * Complex64::new(MIX[i % 3], 0.1 * i as f64);
    }
    let tmat = eigenvectors(combo)?;
    let tinv = tmat.clone().try_inverse()?;
    let phases: Vec<Vec<f64>> = psis
        .iter()
        .map(|p| {
            let d = &tinv * p * &tmat;
            (0..rank).map(|l| d[(l, l)].arg()).collect()
        })
        .collect();

    // Ideal Vandermonde columns for the row space.
    let ideal = DMatrix::from_fn(y.nrows(), rank, |_, _| zero());
    let mut ideal = ideal;
    for l in 0..rank {
        let col: Vec<Complex64> = if element_space {
            let ay = axis_vector(phases[0][l], me);
            let ax = axis_vector(phases[1][l], ma);
            let s = axis_vector(phases[2][l], kk);
            let mut v = Vec::with_capacity(y.nrows());
            for a in &ay {
                for b in &ax {
                    let ab = a * b;
                    v.extend(s.iter().map(|c| ab * c));
                }
            }
            v
        } else {
            axis_vector(phases[0][l], kk)
        };
        ideal.set_column(l, &nalgebra::DVector::from_vec(col));
    }
    let sig = ideal.svd(true, true).solve(&y, 1e-12).ok()?;

    let mut factors: Vec<DMatrix<Complex64>> = t.shape.iter().map(|&s| DMatrix::zeros(s, rank)).collect();
    for l in 0..rank {
        let row: Vec<Complex64> = sig.row(l).iter().copied().collect();
        let (vs, s) = rank_one(&row, &col_shape);
        let delay = axis_vector(phases[phases.len() - 1][l], kk);
        let set = |f: &mut DMatrix<Complex64>, v: &[Complex64]| {
            for (i, c) in v.iter().enumerate() {
                f[(i, l)] = *c;
            }
        };
        if element_space {
            set(&mut factors[0], &cb.rx_el.response(phases[0][l]));
            set(&mut factors[1], &cb.rx_az.response(phases[1][l]));
            set(&mut factors[2], &vs[0]);
            set(&mut factors[3], &vs[1]);
        } else {
            for m in 0..4 {
                set(&mut factors[m], &vs[m]);
            }
        }
        let scaled: Vec<Complex64> = delay.iter().map(|c| c * s).collect();
        set(&mut factors[4], &scaled);
    }
    if factors.iter().any(|f| f.iter().any(|c| !c.re.is_finite() || !c.im.is_finite())) {
        return None;
    }
    Some(factors)
}
