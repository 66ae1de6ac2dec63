//! Per-receiver post-processing: field-of-interest filtering, line-of-sight
//! identification, per-path localization and pooled DBSCAN clustering.

use std::collections::BTreeMap;

use nalgebra::Rotation3;
use serde::{Deserialize, Serialize};

use crate::error::{DisacError, Result};
use crate::estimator::EstimatedPath;
use crate::fusion::{build_joint_system, solve_wls, Associations, UeObservation, Weighting};
use crate::scene::Vec3;

/// Angular sector `|az| ≤ φ_r`, `|el| ≤ θ_r` in the receiver frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldOfInterest {
    pub azimuth_bound: f64,
    pub elevation_bound: f64,
}

impl FieldOfInterest {
    pub fn new(azimuth_bound: f64, elevation_bound: f64) -> Result<Self> {
        let ok = |b: f64| b > 0.0 && b <= std::f64::consts::FRAC_PI_2;
        if !ok(azimuth_bound) || !ok(elevation_bound) {
            return Err(DisacError::InvalidArgument(format!(
                "field-of-interest bounds must lie in (0, π/2], got ({azimuth_bound}, {elevation_bound})"
            )));
        }
        Ok(Self {
            azimuth_bound,
            elevation_bound,
        })
    }

    pub fn contains(&self, path: &EstimatedPath) -> bool {
        path.aoa.azimuth.abs() <= self.azimuth_bound && path.aoa.elevation.abs() <= self.elevation_bound
    }
}

/// Indices of the paths kept by the field-of-interest filter. The LoS path,
/// when given, is always kept.
pub fn clutter_filter_indices(paths: &[EstimatedPath], foi: &FieldOfInterest, los: Option<usize>) -> Vec<usize> {
    (0..paths.len())
        .filter(|&i| Some(i) == los || foi.contains(&paths[i]))
        .collect()
}

pub fn clutter_filter(paths: &[EstimatedPath], foi: &FieldOfInterest, los: Option<usize>) -> Vec<EstimatedPath> {
    clutter_filter_indices(paths, foi, los)
        .into_iter()
        .map(|i| paths[i])
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LosChoice {
    pub index: usize,
    /// Another strong path lies within one delay-resolution cell.
    pub ambiguous: bool,
}

/// Delays on the circle `[0, period)` unrolled so that the widest empty arc
/// becomes the wrap point. Physical delay spreads are well below half the
/// period, so this recovers the order of arrival.
fn unrolled_delays(paths: &[EstimatedPath], period: f64) -> Vec<f64> {
    let mut sorted: Vec<f64> = paths.iter().map(|p| p.delay.rem_euclid(period)).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut start = sorted[0];
    let mut widest = sorted[0] + period - sorted[n - 1];
    for w in sorted.windows(2) {
        if w[1] - w[0] > widest {
            widest = w[1] - w[0];
            start = w[1];
        }
    }
    paths
        .iter()
        .map(|p| (p.delay - start).rem_euclid(period))
        .collect()
}

/// The LoS path: earliest arrival among the paths whose |gain| is in the top
/// quartile.
pub fn identify_los(paths: &[EstimatedPath], delay_period: f64, delay_resolution: f64) -> Result<LosChoice> {
    if paths.is_empty() {
        return Err(DisacError::Empty("no paths to pick the LoS from".into()));
    }
    let mut mags: Vec<f64> = paths.iter().map(|p| p.gain.norm()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let keep = paths.len().div_ceil(4);
    let cutoff = mags[keep - 1];
    let delays = unrolled_delays(paths, delay_period);
    let candidates: Vec<usize> = (0..paths.len()).filter(|&i| paths[i].gain.norm() >= cutoff).collect();
    let index = *candidates
        .iter()
        .min_by(|&&a, &&b| delays[a].total_cmp(&delays[b]).then(a.cmp(&b)))
        .expect("at least one candidate");
    let ambiguous = candidates
        .iter()
        .any(|&i| i != index && (delays[i] - delays[index]).abs() < delay_resolution);
    Ok(LosChoice { index, ambiguous })
}

/// Largest angle between the departure direction and the reversed arrival
/// direction for a path to count as a direct path.
pub const LOS_DIRECTION_TOLERANCE: f64 = 0.1;

/// LoS identification using the known node orientations: the direct path
/// leaves the transmitter exactly opposite to the direction it arrives from
/// at the receiver. The gain/delay rule is applied to the paths passing that
/// test, or to all paths when none does.
pub fn identify_los_oriented(
    paths: &[EstimatedPath],
    tx_orientation: &Rotation3<f64>,
    rx_orientation: &Rotation3<f64>,
    delay_period: f64,
    delay_resolution: f64,
) -> Result<LosChoice> {
    let consistent: Vec<usize> = (0..paths.len())
        .filter(|&i| {
            let out = tx_orientation * paths[i].aod.local_direction();
            let back = rx_orientation * paths[i].aoa.local_direction();
            (-out.dot(&back)).clamp(-1.0, 1.0).acos() <= LOS_DIRECTION_TOLERANCE
        })
        .collect();
    if consistent.is_empty() {
        return identify_los(paths, delay_period, delay_resolution);
    }
    let subset: Vec<EstimatedPath> = consistent.iter().map(|&i| paths[i]).collect();
    let choice = identify_los(&subset, delay_period, delay_resolution)?;
    Ok(LosChoice {
        index: consistent[choice.index],
        ambiguous: choice.ambiguous,
    })
}

/// Absolute delays: the LoS delay is placed in `[window_start, window_start + period)`
/// and every other path follows it by its delay difference modulo the period.
pub fn unwrap_delays(paths: &[EstimatedPath], los: usize, period: f64, window_start: f64) -> Vec<f64> {
    let t_los = window_start + (paths[los].delay - window_start).rem_euclid(period);
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i == los {
                t_los
            } else {
                t_los + (p.delay - paths[los].delay).rem_euclid(period)
            }
        })
        .collect()
}

/// One path in global coordinates, ready for the linear systems.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathMeasurement {
    /// Unit vector from the transmitter towards the scatterer (for the LoS
    /// path, towards the receiver).
    pub u_bs: Vec3,
    /// Unit propagation direction from the scatterer towards the receiver.
    pub u_rx: Vec3,
    /// Absolute delay including the timing offset, seconds.
    pub delay: f64,
    pub weight: f64,
}

impl PathMeasurement {
    pub fn from_path(
        path: &EstimatedPath,
        delay: f64,
        tx_orientation: &Rotation3<f64>,
        rx_orientation: &Rotation3<f64>,
    ) -> Self {
        let u_bs = tx_orientation * path.aod.local_direction();
        let arrival = rx_orientation * path.aoa.local_direction();
        Self {
            u_bs,
            u_rx: -arrival,
            delay,
            weight: path.gain.norm(),
        }
    }
}

/// Known quantities shared by the per-receiver and joint solvers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub bs_position: Vec3,
    pub speed_of_light: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizedPoint {
    pub position: Vec3,
    pub ue_id: usize,
    /// Index into the receiver's measurement list.
    pub path_index: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UeLocalization {
    pub points: Vec<LocalizedPoint>,
    pub position: Vec3,
    pub timing_offset: f64,
    /// Paths whose range estimates came out negative.
    pub discarded: Vec<usize>,
}

/// Per-receiver WLS: every non-LoS path is treated as its own point target.
pub fn per_ue_localize(obs: &UeObservation, priors: &Priors, weighting: Weighting) -> Result<UeLocalization> {
    if obs.paths.is_empty() {
        return Err(DisacError::Underdetermined(format!(
            "receiver {} has no reflection paths to localize",
            obs.ue_id
        )));
    }
    let mut assoc: Associations = BTreeMap::new();
    for i in 0..obs.paths.len() {
        assoc.insert(i, BTreeMap::from([(obs.ue_id, vec![i])]));
    }
    let joint = build_joint_system(&assoc, std::slice::from_ref(obs), priors, weighting)?;
    let sol = solve_wls(&joint.system)?;
    let layout = &joint.layout;
    let ue = 0;
    let p = layout.ue_position(ue);
    let position = Vec3::new(sol.x[p], sol.x[p + 1], sol.x[p + 2]);
    let timing_offset = sol.x[layout.ue_offset(ue)] / priors.speed_of_light;
    let mut points = Vec::new();
    let mut discarded = Vec::new();
    for (m, (&path_index, _)) in assoc.iter().enumerate() {
        let r = sol.x[layout.target_range(m)];
        let d = sol.x[layout.pair_range(m, ue).expect("every path observed by its receiver")];
        let meas = &obs.paths[path_index];
        if r < 0.0 || d < 0.0 {
            discarded.push(path_index);
            continue;
        }
        points.push(LocalizedPoint {
            position: priors.bs_position + meas.u_bs * r,
            ue_id: obs.ue_id,
            path_index,
            weight: meas.weight,
        });
    }
    Ok(UeLocalization {
        points,
        position,
        timing_offset,
        discarded,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLabeling {
    /// Cluster id per input point, `None` for noise.
    pub assignments: Vec<Option<usize>>,
    pub cluster_count: usize,
}

/// Density-based clustering with neighbourhood radius `eps` (inclusive) and
/// density threshold `min_points` (the point itself counts).
///
/// Core points within `eps` of each other share a cluster. A border point
/// joins the cluster of its nearest core point, so the partition does not
/// depend on the input order. Clusters are numbered by first appearance.
pub fn dbscan(points: &[Vec3], eps: f64, min_points: usize) -> Result<ClusterLabeling> {
    if !(eps > 0.0) || min_points == 0 {
        return Err(DisacError::InvalidArgument("DBSCAN needs eps > 0 and min_points ≥ 1".into()));
    }
    let n = points.len();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| (points[i] - points[j]).norm() <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_points).collect();

    let mut comp = vec![usize::MAX; n];
    let mut count = 0;
    for s in 0..n {
        if !core[s] || comp[s] != usize::MAX {
            continue;
        }
        comp[s] = count;
        let mut stack = vec![s];
        while let Some(i) = stack.pop() {
            for &j in &neighbours[i] {
                if core[j] && comp[j] == usize::MAX {
                    comp[j] = count;
                    stack.push(j);
                }
            }
        }
        count += 1;
    }
    let mut raw: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        if core[i] {
            raw[i] = Some(comp[i]);
            continue;
        }
        let nearest = neighbours[i]
            .iter()
            .filter(|&&j| core[j])
            .min_by(|&&a, &&b| {
                let da = (points[a] - points[i]).norm();
                let db = (points[b] - points[i]).norm();
                da.total_cmp(&db).then_with(|| lex(&points[a], &points[b]))
            });
        raw[i] = nearest.map(|&j| comp[j]);
    }
    // Renumber by first appearance.
    let mut map = vec![usize::MAX; count];
    let mut next = 0;
    let assignments = raw
        .into_iter()
        .map(|c| {
            c.map(|c| {
                if map[c] == usize::MAX {
                    map[c] = next;
                    next += 1;
                }
                map[c]
            })
        })
        .collect();
    Ok(ClusterLabeling {
        assignments,
        cluster_count: next,
    })
}

fn lex(a: &Vec3, b: &Vec3) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
}

/// Groups clustered points by cluster and receiver. Noise points are dropped.
pub fn build_associations(labeling: &ClusterLabeling, points: &[LocalizedPoint]) -> Associations {
    let mut out: Associations = BTreeMap::new();
    for (label, p) in labeling.assignments.iter().zip(points) {
        if let Some(c) = label {
            out.entry(*c)
                .or_default()
                .entry(p.ue_id)
                .or_default()
                .push(p.path_index);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::AnglePair;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn ep(gain: f64, delay: f64, az: f64, el: f64) -> EstimatedPath {
        EstimatedPath {
            gain: Complex64::new(gain, 0.0),
            delay,
            aoa: AnglePair::new(az, el),
            aod: AnglePair::new(0.0, 0.0),
            low_confidence: false,
        }
    }

    fn foi() -> FieldOfInterest {
        FieldOfInterest::new(60f64.to_radians(), 30f64.to_radians()).unwrap()
    }

    #[test]
    fn foi_examples() {
        let f = foi();
        assert!(f.contains(&ep(1.0, 0.0, 45f64.to_radians(), 10f64.to_radians())));
        assert!(!f.contains(&ep(1.0, 0.0, 75f64.to_radians(), 10f64.to_radians())));
        assert!(f.contains(&ep(1.0, 0.0, f.azimuth_bound, f.elevation_bound)));
        assert!(f.contains(&ep(1.0, 0.0, -f.azimuth_bound, -f.elevation_bound)));
    }

    #[test]
    fn foi_bounds_validated() {
        assert!(FieldOfInterest::new(0.0, 0.3).is_err());
        assert!(FieldOfInterest::new(0.3, PI).is_err());
        assert!(FieldOfInterest::new(PI / 2.0, PI / 2.0).is_ok());
    }

    #[test]
    fn los_is_exempt_from_filter() {
        let paths = vec![ep(1.0, 0.0, 2.0, 0.0), ep(0.5, 1e-8, 0.1, 0.0), ep(0.5, 2e-8, 1.5, 0.0)];
        assert_eq!(clutter_filter_indices(&paths, &foi(), Some(0)), vec![0, 1]);
        assert_eq!(clutter_filter_indices(&paths, &foi(), None), vec![1]);
    }

    #[test]
    fn los_examples() {
        let period = 640e-9;
        let res = 10e-9;
        assert!(identify_los(&[], period, res).is_err());
        assert_eq!(identify_los(&[ep(0.2, 3e-7, 0.0, 0.0)], period, res).unwrap().index, 0);
        let paths = vec![ep(0.5, 120e-9, 0.0, 0.0), ep(1.0, 80e-9, 0.0, 0.0), ep(0.9, 85e-9, 0.0, 0.0), ep(0.1, 70e-9, 0.0, 0.0)];
        // Top quartile of four paths is one path.
        let c = identify_los(&paths, period, res).unwrap();
        assert_eq!(c, LosChoice { index: 1, ambiguous: false });
        let tie = vec![ep(1.0, 80e-9, 0.0, 0.0), ep(1.0, 84e-9, 0.0, 0.0)];
        assert!(identify_los(&tie, period, res).unwrap().ambiguous);
    }

    #[test]
    fn oriented_los_skips_stronger_earlier_looking_reflection() {
        let tx = Rotation3::identity();
        let rx = Rotation3::from_axis_angle(&Vec3::z_axis(), PI);
        // Direct path along +x from the transmitter arrives from local boresight.
        let mut los = ep(1.0, 200e-9, 0.0, 0.0);
        los.aod = AnglePair::new(0.0, 0.0);
        let mut refl = ep(3.0, 199e-9, 0.3, -0.1);
        refl.aod = AnglePair::new(-0.2, -0.05);
        let paths = [refl, los];
        assert_eq!(identify_los(&paths, 640e-9, 10e-9).unwrap().index, 0);
        assert_eq!(identify_los_oriented(&paths, &tx, &rx, 640e-9, 10e-9).unwrap().index, 1);
    }

    #[test]
    fn los_found_across_the_delay_wrap() {
        // LoS at -20 ns appears at 620 ns; reflections follow at 10..60 ns.
        let period = 640e-9;
        let paths = vec![ep(0.9, 10e-9, 0.0, 0.0), ep(1.0, 620e-9, 0.0, 0.0), ep(0.8, 60e-9, 0.0, 0.0), ep(0.95, 30e-9, 0.0, 0.0)];
        let c = identify_los(&paths, period, 1e-9).unwrap();
        assert_eq!(c.index, 1);
        let d = unwrap_delays(&paths, 1, period, -100e-9);
        assert!((d[1] + 20e-9).abs() < 1e-18);
        assert!((d[0] - 10e-9).abs() < 1e-15);
        assert!((d[2] - 60e-9).abs() < 1e-15);
    }

    fn brute_force(points: &[Vec3], eps: f64, min_points: usize) -> Vec<Option<usize>> {
        // Reachability closure over core points by repeated squaring of the
        // adjacency relation.
        let n = points.len();
        let adj = |i: usize, j: usize| (points[i] - points[j]).norm() <= eps;
        let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| adj(i, j)).count() >= min_points).collect();
        let mut reach = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                reach[i][j] = core[i] && core[j] && adj(i, j);
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if reach[i][k] && reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
        // Representative of a core point: smallest index it reaches.
        let rep = |i: usize| (0..n).find(|&j| reach[i][j]).unwrap();
        (0..n)
            .map(|i| {
                if core[i] {
                    return Some(rep(i));
                }
                let mut best: Option<(f64, usize)> = None;
                for j in 0..n {
                    if core[j] && adj(i, j) {
                        let d = (points[i] - points[j]).norm();
                        let better = match best {
                            None => true,
                            Some((bd, bj)) => d < bd || (d == bd && lex(&points[j], &points[bj]).is_lt()),
                        };
                        if better {
                            best = Some((d, j));
                        }
                    }
                }
                best.map(|(_, j)| rep(j))
            })
            .collect()
    }

    /// Canonical partition: labels renumbered by first appearance.
    fn canonical(labels: &[Option<usize>]) -> Vec<Option<usize>> {
        let mut map = std::collections::HashMap::new();
        labels
            .iter()
            .map(|l| {
                l.map(|c| {
                    let next = map.len();
                    *map.entry(c).or_insert(next)
                })
            })
            .collect()
    }

    #[test]
    fn dbscan_examples() {
        let pts = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.5, 0.0, 0.0),
            Vec3::new(0.0, 0.5, 0.0),
            Vec3::new(10.0, 0.0, 0.0),
        ];
        let l = dbscan(&pts, 1.0, 2).unwrap();
        assert_eq!(l.assignments, vec![Some(0), Some(0), Some(0), None]);
        assert_eq!(l.cluster_count, 1);

        let same = vec![Vec3::new(1.0, 2.0, 3.0); 5];
        let l = dbscan(&same, 0.1, 3).unwrap();
        assert_eq!(l.assignments, vec![Some(0); 5]);

        let l = dbscan(&pts, 1.0, 1).unwrap();
        assert!(l.assignments.iter().all(|a| a.is_some()));
        assert_eq!(l.cluster_count, 2);
    }

    #[test]
    fn dbscan_eps_is_inclusive() {
        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)];
        assert_eq!(dbscan(&pts, 2.0, 2).unwrap().cluster_count, 1);
    }

    #[test]
    fn associations_group_by_cluster_and_receiver() {
        let pts = vec![
            LocalizedPoint { position: Vec3::zeros(), ue_id: 0, path_index: 1, weight: 1.0 },
            LocalizedPoint { position: Vec3::new(0.1, 0.0, 0.0), ue_id: 1, path_index: 3, weight: 1.0 },
            LocalizedPoint { position: Vec3::new(50.0, 0.0, 0.0), ue_id: 1, path_index: 0, weight: 1.0 },
        ];
        let lab = dbscan(&pts.iter().map(|p| p.position).collect::<Vec<_>>(), 1.0, 2).unwrap();
        let a = build_associations(&lab, &pts);
        assert_eq!(a.len(), 1);
        assert_eq!(a[&0][&0], vec![1]);
        assert_eq!(a[&0][&1], vec![3]);
    }

    fn arb_points() -> impl Strategy<Value = Vec<Vec3>> {
        prop::collection::vec((0u8..12, 0u8..12, 0u8..3), 0..=20).prop_map(|v| {
            v.into_iter()
                .map(|(x, y, z)| Vec3::new(x as f64 * 0.5, y as f64 * 0.5, z as f64 * 0.5))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn filter_is_idempotent_subset(
            raw in prop::collection::vec((-PI..PI, -1.5f64..1.5), 0..30),
            los in prop::option::of(0usize..30),
        ) {
            let paths: Vec<EstimatedPath> = raw.iter().enumerate().map(|(i, (a, e))| ep(1.0, i as f64 * 1e-9, *a, *e)).collect();
            let los = los.filter(|&l| l < paths.len());
            let f = foi();
            let kept = clutter_filter(&paths, &f, los);
            for p in &kept {
                prop_assert!(paths.contains(p));
            }
            let los_kept = los.map(|l| kept.iter().position(|p| *p == paths[l]).unwrap());
            prop_assert_eq!(clutter_filter(&kept, &f, los_kept), kept.clone());
        }

        #[test]
        fn dbscan_matches_brute_force(pts in arb_points(), eps in 0.3f64..2.0, min_points in 1usize..5) {
            let l = dbscan(&pts, eps, min_points).unwrap();
            prop_assert_eq!(canonical(&l.assignments), canonical(&brute_force(&pts, eps, min_points)));
        }

        #[test]
        fn dbscan_is_order_invariant(pts in arb_points(), eps in 0.3f64..2.0, min_points in 1usize..5, seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..pts.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha20Rng::seed_from_u64(seed));
            let shuffled: Vec<Vec3> = perm.iter().map(|&i| pts[i]).collect();
            let a = dbscan(&pts, eps, min_points).unwrap().assignments;
            let b = dbscan(&shuffled, eps, min_points).unwrap().assignments;
            // Map b back to the original order and compare partitions.
            let mut back = vec![None; pts.len()];
            for (k, &i) in perm.iter().enumerate() {
                back[i] = b[k];
            }
            prop_assert_eq!(canonical(&a), canonical(&back));
        }
    }
}
