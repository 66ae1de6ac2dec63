//! OFDM parameters, DFT beam codebooks and the beamspace measurement tensor.
//!
//! A tensor holds one snapshot for one receiver with axes
//! `[rx_el, rx_az, tx_el, tx_az, subcarrier]`, stored row-major. For a path with
//! amplitude γ the entry is
//!
//! ```text
//! γ · (W_el^H a_y)[i] · (W_az^H a_x)[j] · conj(F_el^H b_y)[p] · conj(F_az^H b_x)[q] · e^{-j2πΔfτk}
//! ```
//!
//! where `a_x, a_y` (`b_x, b_y`) are the receive (transmit) per-axis steering
//! vectors. The array x-axis is paired with the azimuth codebook and the
//! y-axis with the elevation codebook.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DisacError, Result};
use crate::scene::{axis_vector, generate_ground_truth_paths, steering_vector, AnglePair, PathRecord, Scene, UpaGeometry};

pub const TENSOR_FORMAT: &str = "disac-tensor/1";

/// RNG stream used for the noise of receiver `rx_id`.
pub fn noise_stream(rx_id: usize) -> u64 {
    1 + rx_id as u64
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfdmConfig {
    pub carrier_frequency: f64,
    pub bandwidth: f64,
    pub num_subcarriers: usize,
    pub subcarrier_spacing: f64,
    pub tx_power_dbm: f64,
    pub noise_variance_dbm: f64,
}

impl Default for OfdmConfig {
    fn default() -> Self {
        Self {
            carrier_frequency: 15e9,
            bandwidth: 100e6,
            num_subcarriers: 64,
            subcarrier_spacing: 100e6 / 64.0,
            tx_power_dbm: 40.0,
            noise_variance_dbm: -93.85,
        }
    }
}

impl OfdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_frequency > 0.0 && self.carrier_frequency.is_finite()) {
            return Err(DisacError::InvalidArgument("carrier_frequency must be positive".into()));
        }
        if self.num_subcarriers < 2 {
            return Err(DisacError::InvalidArgument("num_subcarriers must be at least 2".into()));
        }
        if !(self.subcarrier_spacing > 0.0) {
            return Err(DisacError::InvalidArgument("subcarrier_spacing must be positive".into()));
        }
        // Allow for rounding in Δf = B/K.
        if self.num_subcarriers as f64 * self.subcarrier_spacing > self.bandwidth * (1.0 + 1e-12) {
            return Err(DisacError::InvalidArgument(
                "num_subcarriers * subcarrier_spacing exceeds bandwidth".into(),
            ));
        }
        if !self.tx_power_dbm.is_finite() || !self.noise_variance_dbm.is_finite() {
            return Err(DisacError::InvalidArgument("powers must be finite".into()));
        }
        Ok(())
    }

    pub fn tx_power_watts(&self) -> f64 {
        dbm_to_watts(self.tx_power_dbm)
    }

    pub fn noise_variance_watts(&self) -> f64 {
        dbm_to_watts(self.noise_variance_dbm)
    }

    /// Delays are identifiable modulo this interval.
    pub fn unambiguous_delay(&self) -> f64 {
        1.0 / self.subcarrier_spacing
    }

    /// One delay-resolution cell, 1/(KΔf).
    pub fn delay_resolution(&self) -> f64 {
        1.0 / (self.num_subcarriers as f64 * self.subcarrier_spacing)
    }
}

/// Subcarrier phase ramp `s(τ)[k] = e^{-j2πΔfτk}`.
pub fn delay_vector(delay: f64, subcarrier_spacing: f64, k: usize) -> Vec<Complex64> {
    axis_vector(-2.0 * PI * subcarrier_spacing * delay, k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamAxis {
    TxAz,
    TxEl,
    RxAz,
    RxEl,
}

/// Beam matrix of size elements × beams for one array axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamCodebook {
    pub axis: BeamAxis,
    /// Index of the first DFT column when the codebook is a DFT subset.
    pub first_beam: Option<i64>,
    pub matrix: DMatrix<Complex64>,
}

impl BeamCodebook {
    pub fn elements(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn beams(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn from_matrix(matrix: DMatrix<Complex64>, axis: BeamAxis) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(DisacError::InvalidArgument("codebook must be non-empty".into()));
        }
        if matrix.ncols() > matrix.nrows() {
            return Err(DisacError::InvalidArgument(format!(
                "{} beams exceed {} elements",
                matrix.ncols(),
                matrix.nrows()
            )));
        }
        Ok(Self {
            axis,
            first_beam: None,
            matrix,
        })
    }

    /// `W^H v` for an element-space vector `v`.
    pub fn project(&self, v: &[Complex64]) -> Vec<Complex64> {
        let n = self.elements();
        (0..self.beams())
            .map(|b| {
                let col = self.matrix.column(b);
                (0..n).map(|i| col[i].conj() * v[i]).sum()
            })
            .collect()
    }

    /// Beamspace response `W^H a(ω)` to the axis progression with phase step ω.
    pub fn response(&self, step: f64) -> Vec<Complex64> {
        self.project(&axis_vector(step, self.elements()))
    }

    pub fn gram(&self) -> DMatrix<Complex64> {
        self.matrix.adjoint() * &self.matrix
    }
}

/// Centered DFT codebook: beams `-M/2 .. M/2` of the size-`elements` DFT,
/// column `p` being `e^{j2πnp/N}` for element `n`.
pub fn dft_codebook(elements: usize, beams: usize, axis: BeamAxis) -> Result<BeamCodebook> {
    if elements == 0 || beams == 0 {
        return Err(DisacError::InvalidArgument("codebook sizes must be at least 1".into()));
    }
    if beams > elements {
        return Err(DisacError::InvalidArgument(format!(
            "{beams} beams exceed {elements} elements"
        )));
    }
    let first = -((beams / 2) as i64);
    let n = elements as f64;
    let matrix = DMatrix::from_fn(elements, beams, |e, b| {
        let p = (first + b as i64) as f64;
        Complex64::from_polar(1.0, 2.0 * PI * e as f64 * p / n)
    });
    Ok(BeamCodebook {
        axis,
        first_beam: Some(first),
        matrix,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebooks {
    pub rx_el: BeamCodebook,
    pub rx_az: BeamCodebook,
    pub tx_el: BeamCodebook,
    pub tx_az: BeamCodebook,
}

impl Codebooks {
    /// DFT codebooks with the given beam counts `(az, el)` per side.
    pub fn dft(
        rx: &UpaGeometry,
        rx_beams: (usize, usize),
        tx: &UpaGeometry,
        tx_beams: (usize, usize),
    ) -> Result<Self> {
        Ok(Self {
            rx_el: dft_codebook(rx.n_y, rx_beams.1, BeamAxis::RxEl)?,
            rx_az: dft_codebook(rx.n_x, rx_beams.0, BeamAxis::RxAz)?,
            tx_el: dft_codebook(tx.n_y, tx_beams.1, BeamAxis::TxEl)?,
            tx_az: dft_codebook(tx.n_x, tx_beams.0, BeamAxis::TxAz)?,
        })
    }

    pub fn check(&self, rx: &UpaGeometry, tx: &UpaGeometry) -> Result<()> {
        let pairs = [
            (&self.rx_el, rx.n_y, "rx_el"),
            (&self.rx_az, rx.n_x, "rx_az"),
            (&self.tx_el, tx.n_y, "tx_el"),
            (&self.tx_az, tx.n_x, "tx_az"),
        ];
        for (cb, n, name) in pairs {
            if cb.elements() != n {
                return Err(DisacError::DimensionMismatch(format!(
                    "{name} codebook has {} elements, array axis has {n}",
                    cb.elements()
                )));
            }
        }
        Ok(())
    }

    pub fn spatial_shape(&self) -> [usize; 4] {
        [
            self.rx_el.beams(),
            self.rx_az.beams(),
            self.tx_el.beams(),
            self.tx_az.beams(),
        ]
    }
}

/// Frequency-domain channel `Σ g e^{-j2πkτΔf} a_R(aoa) a_T(aod)^H` at subcarrier `k`.
pub fn channel_matrix(
    paths: &[PathRecord],
    tx_geom: &UpaGeometry,
    rx_geom: &UpaGeometry,
    k: usize,
    subcarrier_spacing: f64,
) -> DMatrix<Complex64> {
    let mut h = DMatrix::zeros(rx_geom.num_elements(), tx_geom.num_elements());
    for p in paths {
        let a_r = steering_vector(p.aoa, rx_geom);
        let a_t = steering_vector(p.aod, tx_geom);
        let g = p.gain * Complex64::from_polar(1.0, -2.0 * PI * k as f64 * p.delay * subcarrier_spacing);
        for (i, ar) in a_r.iter().enumerate() {
            let gi = g * ar;
            for (j, at) in a_t.iter().enumerate() {
                h[(i, j)] += gi * at.conj();
            }
        }
    }
    h
}

/// Order-5 beamspace observation for one receiver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementTensor {
    pub shape: [usize; 5],
    #[serde(skip)]
    pub data: Vec<Complex64>,
    pub codebooks: Codebooks,
    pub ofdm: OfdmConfig,
    /// Element-space noise variance σ², watts.
    pub noise_variance: f64,
    pub rx_array: UpaGeometry,
    pub tx_array: UpaGeometry,
}

impl MeasurementTensor {
    pub fn zeros(
        codebooks: Codebooks,
        ofdm: OfdmConfig,
        noise_variance: f64,
        rx_array: UpaGeometry,
        tx_array: UpaGeometry,
    ) -> Result<Self> {
        codebooks.check(&rx_array, &tx_array)?;
        let s = codebooks.spatial_shape();
        let shape = [s[0], s[1], s[2], s[3], ofdm.num_subcarriers];
        Ok(Self {
            shape,
            data: vec![Complex64::new(0.0, 0.0); shape.iter().product()],
            codebooks,
            ofdm,
            noise_variance,
            rx_array,
            tx_array,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, idx: [usize; 5]) -> usize {
        let s = &self.shape;
        (((idx[0] * s[1] + idx[1]) * s[2] + idx[2]) * s[3] + idx[3]) * s[4] + idx[4]
    }

    pub fn get(&self, idx: [usize; 5]) -> Complex64 {
        self.data[self.index(idx)]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Transmit amplitude folded into path gains, `sqrt(P_t)`.
    pub fn amplitude_scale(&self) -> f64 {
        self.ofdm.tx_power_watts().sqrt()
    }

    /// The five noiseless factor vectors of a path (gain not included).
    pub fn path_factors(&self, aoa: AnglePair, aod: AnglePair, delay: f64) -> [Vec<Complex64>; 5] {
        let (rcx, rcy) = aoa.direction_cosines();
        let (tcx, tcy) = aod.direction_cosines();
        let rk = self.rx_array.phase_scale();
        let tk = self.tx_array.phase_scale();
        let cb = &self.codebooks;
        let conj = |v: Vec<Complex64>| v.into_iter().map(|c| c.conj()).collect::<Vec<_>>();
        [
            cb.rx_el.response(rk * rcy),
            cb.rx_az.response(rk * rcx),
            conj(cb.tx_el.response(tk * tcy)),
            conj(cb.tx_az.response(tk * tcx)),
            delay_vector(delay, self.ofdm.subcarrier_spacing, self.shape[4]),
        ]
    }

    /// Adds `amplitude · f0 ∘ f1 ∘ f2 ∘ f3 ∘ f4`.
    pub fn add_rank_one(&mut self, amplitude: Complex64, f: &[Vec<Complex64>; 5]) {
        let s = self.shape;
        let mut i = 0;
        for a in 0..s[0] {
            let va = amplitude * f[0][a];
            for b in 0..s[1] {
                let vb = va * f[1][b];
                for c in 0..s[2] {
                    let vc = vb * f[2][c];
                    for d in 0..s[3] {
                        let vd = vc * f[3][d];
                        for k in 0..s[4] {
                            self.data[i] += vd * f[4][k];
                            i += 1;
                        }
                    }
                }
            }
        }
    }

    /// Adds beamspace noise `W^H z` with `z ~ CN(0, σ² I)` drawn per transmit
    /// beam pair and subcarrier.
    pub fn add_noise(&mut self, rng: &mut ChaCha20Rng) {
        let sigma2 = self.noise_variance;
        if sigma2 <= 0.0 {
            return;
        }
        let std = (sigma2 / 2.0).sqrt();
        let [me, ma, mte, mta, kk] = self.shape;
        let nx = self.rx_array.n_x;
        let ny = self.rx_array.n_y;
        let w_az = self.codebooks.rx_az.matrix.clone();
        let w_el = self.codebooks.rx_el.matrix.clone();
        let mut z = vec![Complex64::new(0.0, 0.0); nx * ny];
        let mut half = vec![Complex64::new(0.0, 0.0); nx * me];
        for te in 0..mte {
            for ta in 0..mta {
                for k in 0..kk {
                    for v in z.iter_mut() {
                        let re: f64 = StandardNormal.sample(rng);
                        let im: f64 = StandardNormal.sample(rng);
                        *v = Complex64::new(re * std, im * std);
                    }
                    // half[x, e] = Σ_y conj(W_el[y, e]) z[x, y]
                    for x in 0..nx {
                        for e in 0..me {
                            half[x * me + e] = (0..ny).map(|y| w_el[(y, e)].conj() * z[x * ny + y]).sum();
                        }
                    }
                    for e in 0..me {
                        for a in 0..ma {
                            let n: Complex64 = (0..nx).map(|x| w_az[(x, a)].conj() * half[x * me + e]).sum();
                            let idx = self.index([e, a, te, ta, k]);
                            self.data[idx] += n;
                        }
                    }
                }
            }
        }
    }

    /// Writes `<stem>.bin` (row-major, interleaved re/im, little-endian f64)
    /// and `<stem>.json` (shape and codebook header).
    pub fn write_files(&self, stem: &Path) -> Result<()> {
        let header = TensorHeader {
            format: TENSOR_FORMAT.to_string(),
            tensor: self.clone_header(),
        };
        let json = serde_json::to_string_pretty(&header)
            .map_err(|e| DisacError::Format(e.to_string()))?;
        std::fs::write(stem.with_extension("json"), json)?;
        let mut buf = Vec::with_capacity(self.data.len() * 16);
        for v in &self.data {
            buf.extend_from_slice(&v.re.to_le_bytes());
            buf.extend_from_slice(&v.im.to_le_bytes());
        }
        let mut f = std::fs::File::create(stem.with_extension("bin"))?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Reads a tensor written by [`MeasurementTensor::write_files`]. `path`
    /// may name either file or the common stem.
    pub fn read_files(path: &Path) -> Result<Self> {
        let header_text = std::fs::read_to_string(path.with_extension("json"))?;
        let header: TensorHeader =
            serde_json::from_str(&header_text).map_err(|e| DisacError::Format(e.to_string()))?;
        if header.format != TENSOR_FORMAT {
            return Err(DisacError::Format(format!(
                "unsupported tensor format {:?}",
                header.format
            )));
        }
        let mut t = header.tensor;
        let expect: usize = t.shape.iter().product();
        let mut bytes = Vec::new();
        std::fs::File::open(path.with_extension("bin"))?.read_to_end(&mut bytes)?;
        if bytes.len() != expect * 16 {
            return Err(DisacError::Format(format!(
                "tensor payload has {} bytes, shape needs {}",
                bytes.len(),
                expect * 16
            )));
        }
        t.data = bytes
            .chunks_exact(16)
            .map(|c| {
                let re = f64::from_le_bytes(c[..8].try_into().unwrap());
                let im = f64::from_le_bytes(c[8..].try_into().unwrap());
                Complex64::new(re, im)
            })
            .collect();
        t.codebooks.check(&t.rx_array, &t.tx_array)?;
        let s = t.codebooks.spatial_shape();
        if s != t.shape[..4] || t.shape[4] != t.ofdm.num_subcarriers {
            return Err(DisacError::Format("header shape disagrees with codebooks".into()));
        }
        Ok(t)
    }

    fn clone_header(&self) -> MeasurementTensor {
        MeasurementTensor {
            shape: self.shape,
            data: Vec::new(),
            codebooks: self.codebooks.clone(),
            ofdm: self.ofdm.clone(),
            noise_variance: self.noise_variance,
            rx_array: self.rx_array,
            tx_array: self.tx_array,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    format: String,
    #[serde(flatten)]
    tensor: MeasurementTensor,
}

/// Tensor for an explicit path list. Path gains are scaled by `sqrt(P_t)`.
/// Noise with variance `noise_variance` (watts) is drawn from `rng` when given.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_from_paths(
    paths: &[PathRecord],
    rx_array: &UpaGeometry,
    tx_array: &UpaGeometry,
    codebooks: &Codebooks,
    ofdm: &OfdmConfig,
    noise_variance: f64,
    rng: Option<&mut ChaCha20Rng>,
) -> Result<MeasurementTensor> {
    ofdm.validate()?;
    let mut t = MeasurementTensor::zeros(codebooks.clone(), ofdm.clone(), noise_variance, *rx_array, *tx_array)?;
    let amp = t.amplitude_scale();
    for p in paths {
        let f = t.path_factors(p.aoa, p.aod, p.delay);
        t.add_rank_one(p.gain * amp, &f);
    }
    if let Some(rng) = rng {
        t.add_noise(rng);
    }
    Ok(t)
}

/// Noisy measurement tensor of receiver `rx_id`, noise variance taken from
/// `ofdm.noise_variance_dbm`.
pub fn synthesize_tensor(
    scene: &Scene,
    rx_id: usize,
    codebooks: &Codebooks,
    ofdm: &OfdmConfig,
    noise_seed: u64,
) -> Result<MeasurementTensor> {
    let rx = scene.receiver(rx_id)?;
    let paths = generate_ground_truth_paths(scene, rx_id)?;
    let mut rng = ChaCha20Rng::seed_from_u64(noise_seed);
    rng.set_stream(noise_stream(rx_id));
    synthesize_from_paths(
        &paths,
        &rx.array,
        &scene.tx.array,
        codebooks,
        ofdm,
        ofdm.noise_variance_watts(),
        Some(&mut rng),
    )
}
