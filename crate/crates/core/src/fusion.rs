//! Joint weighted least squares over all receivers at the fusion center.
//!
//! Unknowns are ordered as
//! `[r_m (targets), d_{m,n} (observed target/receiver pairs), c·Δt_n, p_{v,n} (xyz), r_LoS,n]`.
//! Timing offsets are carried as range equivalents `c·Δt_n` (meters) so all
//! columns share one unit; they are converted back to seconds on output.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DisacError, Result};
use crate::pipeline::{PathMeasurement, Priors};
use crate::scene::Vec3;

/// Condition number of `AᵀWA` above which a system is rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Weight floor relative to the largest weight.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// cluster id → receiver id → indices into that receiver's path list.
pub type Associations = BTreeMap<usize, BTreeMap<usize, Vec<usize>>>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Rows weighted by the |gain| of the generating path.
    #[default]
    Gain,
    /// Ordinary least squares.
    Uniform,
}

/// Everything one receiver sends to the fusion center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UeObservation {
    pub ue_id: usize,
    pub los: PathMeasurement,
    /// Non-LoS paths kept after filtering.
    pub paths: Vec<PathMeasurement>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    pub coefficients: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// Diagonal of W.
    pub weights: DVector<f64>,
}

impl LinearSystem {
    pub fn new(coefficients: DMatrix<f64>, rhs: DVector<f64>, weights: DVector<f64>) -> Result<Self> {
        if coefficients.nrows() != rhs.len() || rhs.len() != weights.len() {
            return Err(DisacError::DimensionMismatch(format!(
                "{} rows, {} right-hand sides, {} weights",
                coefficients.nrows(),
                rhs.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(DisacError::InvalidArgument("weights must be finite and non-negative".into()));
        }
        Ok(Self {
            coefficients,
            rhs,
            weights,
        })
    }

    pub fn rows(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn unknowns(&self) -> usize {
        self.coefficients.ncols()
    }

    /// Weights after flooring at `WEIGHT_FLOOR` times the largest one.
    pub fn effective_weights(&self) -> DVector<f64> {
        let wmax = self.weights.max();
        let floor = if wmax > 0.0 { WEIGHT_FLOOR * wmax } else { 1.0 };
        self.weights.map(|w| w.max(floor))
    }

    pub fn weighted_residual(&self, x: &DVector<f64>) -> f64 {
        let r = &self.coefficients * x - &self.rhs;
        r.component_mul(&self.effective_weights().map(f64::sqrt)).norm()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WlsSolution {
    pub x: DVector<f64>,
    /// ‖W^{1/2}(Ax̂ − b)‖.
    pub residual: f64,
    /// Condition number of `AᵀWA`.
    pub condition: f64,
}

/// Weighted least squares through a QR factorization of `W^{1/2}A`.
/// Rank and conditioning are checked on the singular values of the same
/// matrix.
pub fn solve_wls(system: &LinearSystem) -> Result<WlsSolution> {
    let (m, n) = system.coefficients.shape();
    if n == 0 {
        return Err(DisacError::InvalidArgument("system has no unknowns".into()));
    }
    if m < n {
        return Err(DisacError::Underdetermined(format!("{m} equations for {n} unknowns")));
    }
    let sw = system.effective_weights().map(f64::sqrt);
    let mut a = system.coefficients.clone();
    for (i, s) in sw.iter().enumerate() {
        a.row_mut(i).scale_mut(*s);
    }
    let b = system.rhs.component_mul(&sw);

    let svd = a.clone().svd(false, true);
    let (imin, smin) = svd.singular_values.argmin();
    let smax = svd.singular_values.max();
    let dependent_column = || {
        let v_t = svd.v_t.as_ref().expect("V computed");
        v_t.row(imin).transpose().iamax()
    };
    if smax == 0.0 || smin <= smax * f64::EPSILON * (m.max(n) as f64) {
        return Err(DisacError::RankDeficient {
            column: if smax == 0.0 { 0 } else { dependent_column() },
        });
    }
    let condition = (smax / smin).powi(2);
    if condition >= MAX_CONDITION {
        return Err(DisacError::IllConditioned(condition));
    }

    let qr = a.qr();
    let qtb = qr.q().transpose() * &b;
    let r = qr.r();
    let x = r
        .solve_upper_triangular(&qtb)
        .ok_or(DisacError::RankDeficient { column: dependent_column() })?;
    let residual = system.weighted_residual(&x);
    Ok(WlsSolution { x, residual, condition })
}

/// Column positions of the unknown blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnknownLayout {
    /// Cluster ids, in unknown order.
    pub clusters: Vec<usize>,
    /// Receiver ids, in unknown order.
    pub ues: Vec<usize>,
    /// Observed (target, receiver) pairs as block indices, in unknown order.
    pub pairs: Vec<(usize, usize)>,
}

impl UnknownLayout {
    pub fn len(&self) -> usize {
        self.clusters.len() + self.pairs.len() + 5 * self.ues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn target_range(&self, m: usize) -> usize {
        m
    }

    pub fn pair_range(&self, m: usize, n: usize) -> Option<usize> {
        self.pairs
            .iter()
            .position(|&p| p == (m, n))
            .map(|i| self.clusters.len() + i)
    }

    /// Column of `c·Δt_n`.
    pub fn ue_offset(&self, n: usize) -> usize {
        self.clusters.len() + self.pairs.len() + n
    }

    /// First of the three columns of `p_{v,n}`.
    pub fn ue_position(&self, n: usize) -> usize {
        self.clusters.len() + self.pairs.len() + self.ues.len() + 3 * n
    }

    pub fn los_range(&self, n: usize) -> usize {
        self.clusters.len() + self.pairs.len() + 4 * self.ues.len() + n
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = self.clusters.iter().map(|c| format!("r[{c}]")).collect();
        out.extend(
            self.pairs
                .iter()
                .map(|&(m, n)| format!("d[{},{}]", self.clusters[m], self.ues[n])),
        );
        out.extend(self.ues.iter().map(|u| format!("c*dt[{u}]")));
        for u in &self.ues {
            for axis in ["x", "y", "z"] {
                out.push(format!("p[{u}].{axis}"));
            }
        }
        out.extend(self.ues.iter().map(|u| format!("r_los[{u}]")));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSystem {
    pub system: LinearSystem,
    pub layout: UnknownLayout,
}

/// Stacks the spatial and delay equations of every associated path and every
/// receiver's LoS path.
pub fn build_joint_system(
    associations: &Associations,
    observations: &[UeObservation],
    priors: &Priors,
    weighting: Weighting,
) -> Result<JointSystem> {
    if observations.is_empty() {
        return Err(DisacError::Empty("no receiver observations".into()));
    }
    let ues: Vec<usize> = observations.iter().map(|o| o.ue_id).collect();
    let ue_block = |id: usize| {
        ues.iter()
            .position(|&u| u == id)
            .ok_or_else(|| DisacError::InvalidArgument(format!("association names unknown receiver {id}")))
    };
    let clusters: Vec<usize> = associations.keys().copied().collect();
    let mut pairs = Vec::new();
    for (m, members) in associations.values().enumerate() {
        if members.values().all(|v| v.is_empty()) {
            return Err(DisacError::InvalidArgument(format!("cluster {} has no member paths", clusters[m])));
        }
        for (ue, idx) in members {
            let n = ue_block(*ue)?;
            if let Some(&bad) = idx.iter().find(|&&i| i >= observations[n].paths.len()) {
                return Err(DisacError::InvalidArgument(format!(
                    "receiver {ue} has no path {bad}"
                )));
            }
            if !idx.is_empty() {
                pairs.push((m, n));
            }
        }
    }
    let layout = UnknownLayout {
        clusters,
        ues: ues.clone(),
        pairs,
    };

    let path_rows: usize = associations
        .values()
        .flat_map(|m| m.values())
        .map(|v| 4 * v.len())
        .sum();
    let rows = path_rows + 4 * ues.len();
    let cols = layout.len();
    if rows < cols {
        return Err(DisacError::Underdetermined(format!(
            "{rows} equations for {cols} unknowns ({} target ranges, {} target-receiver ranges, {} receivers)",
            layout.clusters.len(),
            layout.pairs.len(),
            ues.len()
        )));
    }

    let c = priors.speed_of_light;
    let pbs = priors.bs_position;
    let mut a = DMatrix::zeros(rows, cols);
    let mut b = DVector::zeros(rows);
    let mut w = DVector::zeros(rows);
    let weight = |meas: &PathMeasurement| match weighting {
        Weighting::Gain => meas.weight,
        Weighting::Uniform => 1.0,
    };
    let mut row = 0;
    for (m, members) in associations.values().enumerate() {
        for (ue, idx) in members {
            let n = ue_block(*ue)?;
            let Some(d_col) = layout.pair_range(m, n) else {
                continue;
            };
            for &i in idx {
                let meas = &observations[n].paths[i];
                let wt = weight(meas);
                // u_BS r_m + u_v d_mn − p_vn = −p_BS
                for k in 0..3 {
                    a[(row + k, layout.target_range(m))] = meas.u_bs[k];
                    a[(row + k, d_col)] = meas.u_rx[k];
                    a[(row + k, layout.ue_position(n) + k)] = -1.0;
                    b[row + k] = -pbs[k];
                }
                // r_m + d_mn + cΔt_n = cτ
                a[(row + 3, layout.target_range(m))] = 1.0;
                a[(row + 3, d_col)] = 1.0;
                a[(row + 3, layout.ue_offset(n))] = 1.0;
                b[row + 3] = c * meas.delay;
                for k in 0..4 {
                    w[row + k] = wt;
                }
                row += 4;
            }
        }
    }
    for (n, obs) in observations.iter().enumerate() {
        let los = &obs.los;
        let wt = weight(los);
        // p_vn − r_LoS u_LoS = p_BS
        for k in 0..3 {
            a[(row + k, layout.ue_position(n) + k)] = 1.0;
            a[(row + k, layout.los_range(n))] = -los.u_bs[k];
            b[row + k] = pbs[k];
        }
        // r_LoS + cΔt_n = cτ_LoS
        a[(row + 3, layout.los_range(n))] = 1.0;
        a[(row + 3, layout.ue_offset(n))] = 1.0;
        b[row + 3] = c * los.delay;
        for k in 0..4 {
            w[row + k] = wt;
        }
        row += 4;
    }
    debug_assert_eq!(row, rows);
    Ok(JointSystem {
        system: LinearSystem::new(a, b, w)?,
        layout,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEstimate {
    pub ue_ids: Vec<usize>,
    pub ue_positions: Vec<Vec3>,
    pub ue_timing_offsets: Vec<f64>,
    /// Cluster id of each reported target.
    pub target_clusters: Vec<usize>,
    pub target_points: Vec<Vec3>,
    pub bs_target_ranges: Vec<f64>,
    /// Clusters dropped because their range came out negative.
    pub invalid_clusters: Vec<usize>,
    pub residual: f64,
    pub unknown_labels: Vec<String>,
    pub unknowns: Vec<f64>,
}

/// Maps the solution vector back to geometry. Each target's point lies along
/// the |gain|-weighted mean of its paths' transmitter-side directions.
pub fn extract_estimate(
    solution: &WlsSolution,
    layout: &UnknownLayout,
    associations: &Associations,
    observations: &[UeObservation],
    priors: &Priors,
) -> Result<SceneEstimate> {
    let x = &solution.x;
    if x.len() != layout.len() {
        return Err(DisacError::DimensionMismatch(format!(
            "solution has {} entries, layout needs {}",
            x.len(),
            layout.len()
        )));
    }
    let mut est = SceneEstimate {
        ue_ids: layout.ues.clone(),
        ue_positions: Vec::new(),
        ue_timing_offsets: Vec::new(),
        target_clusters: Vec::new(),
        target_points: Vec::new(),
        bs_target_ranges: Vec::new(),
        invalid_clusters: Vec::new(),
        residual: solution.residual,
        unknown_labels: layout.labels(),
        unknowns: x.iter().copied().collect(),
    };
    for n in 0..layout.ues.len() {
        let p = layout.ue_position(n);
        est.ue_positions.push(Vec3::new(x[p], x[p + 1], x[p + 2]));
        est.ue_timing_offsets.push(x[layout.ue_offset(n)] / priors.speed_of_light);
    }
    for (m, (cluster, members)) in associations.iter().enumerate() {
        let r = x[layout.target_range(m)];
        if r < 0.0 {
            est.invalid_clusters.push(*cluster);
            continue;
        }
        let mut u = Vec3::zeros();
        for (ue, idx) in members {
            let n = layout.ues.iter().position(|u| u == ue).expect("layout built from observations");
            for &i in idx {
                let meas = &observations[n].paths[i];
                u += meas.u_bs * meas.weight.max(0.0);
            }
        }
        if u.norm() == 0.0 {
            // All weights zero: fall back to the plain mean.
            for (ue, idx) in members {
                let n = layout.ues.iter().position(|u| u == ue).expect("layout built from observations");
                for &i in idx {
                    u += observations[n].paths[i].u_bs;
                }
            }
        }
        let u = u.normalize();
        est.target_clusters.push(*cluster);
        est.target_points.push(priors.bs_position + u * r);
        est.bs_target_ranges.push(r);
    }
    Ok(est)
}

/// Builds, solves and interprets the joint system. With one receiver this is
/// the single-node baseline.
pub fn run_fusion(
    observations: &[UeObservation],
    associations: &Associations,
    priors: &Priors,
    weighting: Weighting,
) -> Result<SceneEstimate> {
    let joint = build_joint_system(associations, observations, priors, weighting)?;
    let sol = solve_wls(&joint.system)?;
    extract_estimate(&sol, &joint.layout, associations, observations, priors)
}
