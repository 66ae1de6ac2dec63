//! World geometry and ground-truth propagation paths.
//!
//! Every node (the transmitter and each receiver) carries a local frame given
//! by a proper rotation whose columns are the node's forward, left and up axes
//! expressed in global coordinates. Arrays are planar: the array x-axis runs
//! along the node's left axis and the array y-axis along its up axis, so the
//! array broadside is the node's forward axis.
//!
//! Angles are measured in that local frame: azimuth is the angle from forward
//! towards left in the horizontal plane, elevation the angle above it.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Box3, ScenarioConfig};
use crate::error::{DisacError, Result};

pub type Vec3 = Vector3<f64>;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Largest admitted diameter of an extended target, meters.
pub const MAX_TARGET_EXTENT: f64 = 6.0;

/// RNG stream used for scene sampling.
pub const SCENE_STREAM: u64 = 0;

/// Azimuth/elevation pair in a node's local frame, radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnglePair {
    pub azimuth: f64,
    pub elevation: f64,
}

impl AnglePair {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self { azimuth, elevation }
    }

    /// Angles of a (not necessarily unit) direction given in local coordinates.
    pub fn from_local_direction(v: &Vec3) -> Self {
        let n = v.norm();
        let azimuth = v.y.atan2(v.x);
        let azimuth = if azimuth <= -PI { PI } else { azimuth };
        let elevation = (v.z / n).clamp(-1.0, 1.0).asin();
        Self { azimuth, elevation }
    }

    /// Unit direction in local coordinates (forward, left, up).
    pub fn local_direction(&self) -> Vec3 {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        Vec3::new(ce * ca, ce * sa, se)
    }

    /// Direction cosines along the array x (left) and y (up) axes.
    pub fn direction_cosines(&self) -> (f64, f64) {
        let d = self.local_direction();
        (d.y, d.z)
    }

    /// Inverse of [`AnglePair::direction_cosines`] restricted to the front
    /// hemisphere. Returns `None` when `cx² + cy² > 1`.
    pub fn from_direction_cosines(cx: f64, cy: f64) -> Option<Self> {
        let s = cx * cx + cy * cy;
        if !(s <= 1.0 + 1e-12) || !cx.is_finite() || !cy.is_finite() {
            return None;
        }
        let elevation = cy.clamp(-1.0, 1.0).asin();
        let ce = elevation.cos();
        let azimuth = if ce > 0.0 {
            (cx / ce).clamp(-1.0, 1.0).asin()
        } else {
            0.0
        };
        Some(Self { azimuth, elevation })
    }

    pub fn is_valid(&self) -> bool {
        self.azimuth.is_finite()
            && self.elevation.is_finite()
            && self.azimuth > -PI
            && self.azimuth <= PI
            && self.elevation.abs() <= PI / 2.0
    }
}

/// Uniform planar array geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpaGeometry {
    pub n_x: usize,
    pub n_y: usize,
    /// Inter-element spacing, meters.
    pub spacing: f64,
    /// Carrier wavelength, meters.
    pub wavelength: f64,
}

impl UpaGeometry {
    pub fn new(n_x: usize, n_y: usize, spacing: f64, wavelength: f64) -> Result<Self> {
        let g = Self {
            n_x,
            n_y,
            spacing,
            wavelength,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn half_wavelength(n_x: usize, n_y: usize, wavelength: f64) -> Result<Self> {
        Self::new(n_x, n_y, wavelength / 2.0, wavelength)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_y == 0 {
            return Err(DisacError::InvalidArgument(format!(
                "array must have at least one element per axis, got {}x{}",
                self.n_x, self.n_y
            )));
        }
        if !(self.spacing > 0.0 && self.wavelength > 0.0) {
            return Err(DisacError::InvalidArgument(
                "array spacing and wavelength must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn num_elements(&self) -> usize {
        self.n_x * self.n_y
    }

    /// Phase increment per element for a unit direction cosine, `k·d`.
    pub fn phase_scale(&self) -> f64 {
        2.0 * PI * self.spacing / self.wavelength
    }
}

/// Phase progression `[e^{j·step·n}]` for `n = 0..len`.
pub fn axis_vector(step: f64, len: usize) -> Vec<Complex64> {
    (0..len)
        .map(|n| Complex64::from_polar(1.0, step * n as f64))
        .collect()
}

/// UPA steering vector `a_x ⊗ a_y`, length `n_x·n_y`, x-index major.
pub fn steering_vector(angles: AnglePair, geom: &UpaGeometry) -> Vec<Complex64> {
    let (cx, cy) = angles.direction_cosines();
    let kd = geom.phase_scale();
    let ax = axis_vector(kd * cx, geom.n_x);
    let ay = axis_vector(kd * cy, geom.n_y);
    kron(&ax, &ay)
}

pub(crate) fn kron(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &x in a {
        out.extend(b.iter().map(|&y| x * y));
    }
    out
}

/// Kronecker product of two matrices.
#[cfg(test)]
pub(crate) fn kron_matrix(
    a: &nalgebra::DMatrix<Complex64>,
    b: &nalgebra::DMatrix<Complex64>,
) -> nalgebra::DMatrix<Complex64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    nalgebra::DMatrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

/// Local frame of a node heading `yaw` (rad, counter-clockwise from +x)
/// with its boresight tilted down by `downtilt` (rad).
pub fn node_orientation(yaw: f64, downtilt: f64) -> Rotation3<f64> {
    let (sy, cy) = yaw.sin_cos();
    let (st, ct) = downtilt.sin_cos();
    let forward = Vec3::new(ct * cy, ct * sy, -st);
    let left = Vec3::new(-sy, cy, 0.0);
    let up = forward.cross(&left);
    Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[forward, left, up]))
}

/// True if `r` is orthonormal with determinant +1.
pub fn is_proper_rotation(r: &Rotation3<f64>) -> bool {
    let m = r.matrix();
    let err = (m.transpose() * m - Matrix3::identity()).abs().max();
    err < 1e-9 && (m.determinant() - 1.0).abs() < 1e-9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransmitterNode {
    pub position: Vec3,
    pub orientation: Rotation3<f64>,
    pub array: UpaGeometry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceiverNode {
    pub id: usize,
    pub position: Vec3,
    pub orientation: Rotation3<f64>,
    /// Clock offset relative to the transmitter, seconds. Positive values
    /// lengthen every apparent delay.
    pub timing_offset: f64,
    pub array: UpaGeometry,
    #[serde(default)]
    pub los_blocked: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtendedTarget {
    pub id: usize,
    pub scatter_points: Vec<Vec3>,
    pub reflectivities: Vec<f64>,
}

impl ExtendedTarget {
    pub fn extent(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, a) in self.scatter_points.iter().enumerate() {
            for b in &self.scatter_points[i + 1..] {
                d = d.max((a - b).norm());
            }
        }
        d
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.scatter_points.len().max(1) as f64;
        self.scatter_points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClutterScatterer {
    pub position: Vec3,
    pub reflectivity: f64,
}

/// Provenance of a propagation path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathLabel {
    Los,
    Target { target_id: usize, point_index: usize },
    Clutter { index: usize },
}

/// One propagation path between the transmitter and a receiver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub gain: Complex64,
    /// Apparent delay including the receiver timing offset, seconds.
    pub delay: f64,
    /// Arrival angles in the receiver frame.
    pub aoa: AnglePair,
    /// Departure angles in the transmitter frame.
    pub aod: AnglePair,
    pub label: PathLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub tx: TransmitterNode,
    pub receivers: Vec<ReceiverNode>,
    pub targets: Vec<ExtendedTarget>,
    pub clutter: Vec<ClutterScatterer>,
    pub speed_of_light: f64,
}

impl Scene {
    pub fn receiver(&self, rx_id: usize) -> Result<&ReceiverNode> {
        self.receivers
            .iter()
            .find(|r| r.id == rx_id)
            .ok_or_else(|| DisacError::InvalidArgument(format!("no receiver with id {rx_id}")))
    }

    pub fn wavelength(&self) -> f64 {
        self.tx.array.wavelength
    }

    pub fn validate(&self) -> Result<()> {
        self.tx.array.validate()?;
        if !is_proper_rotation(&self.tx.orientation) {
            return Err(DisacError::InvalidArgument(
                "transmitter orientation is not a proper rotation".into(),
            ));
        }
        let mut anchors = vec![self.tx.position];
        for rx in &self.receivers {
            rx.array.validate()?;
            if rx.position.z <= 0.0 {
                return Err(DisacError::InvalidArgument(format!(
                    "receiver {} is not above ground",
                    rx.id
                )));
            }
            if !is_proper_rotation(&rx.orientation) {
                return Err(DisacError::InvalidArgument(format!(
                    "receiver {} orientation is not a proper rotation",
                    rx.id
                )));
            }
            anchors.push(rx.position);
        }
        for t in &self.targets {
            if t.scatter_points.is_empty() || t.scatter_points.len() != t.reflectivities.len() {
                return Err(DisacError::InvalidArgument(format!(
                    "target {} needs matching, non-empty scatter points and reflectivities",
                    t.id
                )));
            }
            if t.reflectivities.iter().any(|r| !(*r >= 0.0)) {
                return Err(DisacError::InvalidArgument(format!(
                    "target {} has a negative reflectivity",
                    t.id
                )));
            }
            if t.extent() > MAX_TARGET_EXTENT {
                return Err(DisacError::InvalidArgument(format!(
                    "target {} extent {:.2} m exceeds {MAX_TARGET_EXTENT} m",
                    t.id,
                    t.extent()
                )));
            }
            anchors.push(t.centroid());
        }
        for (i, a) in anchors.iter().enumerate() {
            if anchors[i + 1..].iter().any(|b| (a - b).norm() < 1e-9) {
                return Err(DisacError::InvalidArgument(
                    "node and target positions must be distinct".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Apparent delay of the first-order path through `scatter_point`.
pub fn path_delay(scene: &Scene, rx_id: usize, scatter_point: &Vec3) -> Result<f64> {
    let rx = scene.receiver(rx_id)?;
    let geometric = (scatter_point - scene.tx.position).norm() + (rx.position - scatter_point).norm();
    Ok(geometric / scene.speed_of_light + rx.timing_offset)
}

fn in_front(orientation: &Rotation3<f64>, global_dir: &Vec3) -> bool {
    (orientation.inverse() * global_dir).x > 0.0
}

/// Ground-truth paths seen by receiver `rx_id`.
///
/// A scatterer contributes a path when it lies in front of both arrays.
/// Gains follow free-space spreading over the total path length scaled by the
/// scatterer reflectivity; the phase is the carrier phase of that length.
pub fn generate_ground_truth_paths(scene: &Scene, rx_id: usize) -> Result<Vec<PathRecord>> {
    let rx = scene.receiver(rx_id)?;
    let tx = &scene.tx;
    let lambda = scene.wavelength();
    let c = scene.speed_of_light;
    let mut paths = Vec::new();

    let gain_for = |length: f64, reflectivity: f64| {
        Complex64::from_polar(
            reflectivity * lambda / (4.0 * PI * length),
            -2.0 * PI * length / lambda,
        )
    };

    if !rx.los_blocked {
        let d = rx.position - tx.position;
        let r = d.norm();
        if in_front(&tx.orientation, &d) && in_front(&rx.orientation, &(-d)) {
            paths.push(PathRecord {
                gain: gain_for(r, 1.0),
                delay: r / c + rx.timing_offset,
                aod: AnglePair::from_local_direction(&(tx.orientation.inverse() * d)),
                aoa: AnglePair::from_local_direction(&(rx.orientation.inverse() * (-d))),
                label: PathLabel::Los,
            });
        }
    }

    let mut bounce = |point: &Vec3, reflectivity: f64, label: PathLabel| {
        let out = point - tx.position;
        let back = point - rx.position;
        if !(in_front(&tx.orientation, &out) && in_front(&rx.orientation, &back)) {
            return;
        }
        if reflectivity <= 0.0 {
            return;
        }
        let length = out.norm() + back.norm();
        paths.push(PathRecord {
            gain: gain_for(length, reflectivity),
            delay: length / c + rx.timing_offset,
            aod: AnglePair::from_local_direction(&(tx.orientation.inverse() * out)),
            aoa: AnglePair::from_local_direction(&(rx.orientation.inverse() * back)),
            label,
        });
    };

    for target in &scene.targets {
        for (i, (p, rho)) in target
            .scatter_points
            .iter()
            .zip(&target.reflectivities)
            .enumerate()
        {
            bounce(
                p,
                *rho,
                PathLabel::Target {
                    target_id: target.id,
                    point_index: i,
                },
            );
        }
    }
    for (i, cl) in scene.clutter.iter().enumerate() {
        bounce(&cl.position, cl.reflectivity, PathLabel::Clutter { index: i });
    }
    Ok(paths)
}

fn sample_box(rng: &mut ChaCha20Rng, b: &Box3) -> Vec3 {
    let mut p = Vec3::zeros();
    for i in 0..3 {
        p[i] = if b.max[i] > b.min[i] {
            rng.random_range(b.min[i]..=b.max[i])
        } else {
            b.min[i]
        };
    }
    p
}

fn sample_separated(
    rng: &mut ChaCha20Rng,
    region: &Box3,
    taken: &[Vec3],
    min_sep: f64,
    attempts: usize,
    what: &str,
) -> Result<Vec3> {
    for _ in 0..attempts {
        let p = sample_box(rng, region);
        if taken.iter().all(|q| (p - q).norm() >= min_sep) {
            return Ok(p);
        }
    }
    Err(DisacError::InfeasibleConfig(format!(
        "could not place {what} with {min_sep} m separation after {attempts} attempts"
    )))
}

/// Samples a scene from `config`; identical seeds give identical scenes.
pub fn random_scene(config: &ScenarioConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(SCENE_STREAM);

    let lambda = config.speed_of_light / config.ofdm.carrier_frequency;
    let txc = &config.transmitter;
    let tx = TransmitterNode {
        position: Vec3::from(txc.position),
        orientation: node_orientation(txc.yaw_deg.to_radians(), txc.downtilt_deg.to_radians()),
        array: txc.array.geometry(lambda)?,
    };

    let min_sep = config.min_separation_m;
    let attempts = config.max_sampling_attempts;
    for (region, count, what) in [
        (&config.receivers.region, config.receivers.count, "receivers"),
        (&config.targets.region, config.targets.count, "targets"),
    ] {
        if count >= 2 && region.diagonal() < min_sep {
            return Err(DisacError::InfeasibleConfig(format!(
                "{count} {what} cannot be {min_sep} m apart inside a region with diagonal {:.2} m",
                region.diagonal()
            )));
        }
    }

    let mut taken = vec![tx.position];
    let rxc = &config.receivers;
    let rx_array = rxc.array.geometry(lambda)?;
    let mut receivers = Vec::with_capacity(rxc.count);
    for id in 0..rxc.count {
        let position = sample_separated(&mut rng, &rxc.region, &taken, min_sep, attempts, "receiver")?;
        taken.push(position);
        let to = rxc.timing_offset_range_s;
        let timing_offset = if to > 0.0 {
            rng.random_range(-to..=to)
        } else {
            0.0
        };
        receivers.push(ReceiverNode {
            id,
            position,
            orientation: node_orientation(rxc.heading_deg.to_radians(), 0.0),
            timing_offset,
            array: rx_array,
            los_blocked: rxc.los_blocked,
        });
    }

    let tc = &config.targets;
    let mut targets = Vec::with_capacity(tc.count);
    for id in 0..tc.count {
        let center = sample_separated(&mut rng, &tc.region, &taken, min_sep, attempts, "target")?;
        taken.push(center);
        let local = Box3 {
            min: [
                center.x - tc.half_extent_m[0],
                center.y - tc.half_extent_m[1],
                center.z - tc.half_extent_m[2],
            ],
            max: [
                center.x + tc.half_extent_m[0],
                center.y + tc.half_extent_m[1],
                center.z + tc.half_extent_m[2],
            ],
        };
        let mut points: Vec<Vec3> = Vec::with_capacity(tc.scatter_points);
        for _ in 0..tc.scatter_points {
            let p = sample_separated(
                &mut rng,
                &local,
                &points,
                tc.min_scatter_separation_m,
                attempts,
                "scatter point",
            )?;
            points.push(p);
        }
        let [lo, hi] = tc.reflectivity_range;
        let reflectivities = (0..points.len())
            .map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo })
            .collect();
        targets.push(ExtendedTarget {
            id,
            scatter_points: points,
            reflectivities,
        });
    }

    let cc = &config.clutter;
    let mut clutter = Vec::with_capacity(cc.count);
    for i in 0..cc.count {
        if cc.regions.is_empty() {
            return Err(DisacError::InfeasibleConfig(
                "clutter count > 0 requires at least one clutter region".into(),
            ));
        }
        let region = &cc.regions[i % cc.regions.len()];
        let position = sample_box(&mut rng, region);
        let [lo, hi] = cc.reflectivity_range;
        let reflectivity = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        clutter.push(ClutterScatterer {
            position,
            reflectivity,
        });
    }

    let scene = Scene {
        tx,
        receivers,
        targets,
        clutter,
        speed_of_light: config.speed_of_light,
    };
    scene.validate()?;
    Ok(scene)
}
