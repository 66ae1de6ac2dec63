//! One end-to-end snapshot: scene, per-receiver estimation, clustering,
//! fusion and scoring against ground truth.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::error::{DisacError, Result};
use crate::estimator::{estimate_paths, EstimatedPath};
use crate::fusion::{run_fusion, SceneEstimate, UeObservation, Weighting};
use crate::pipeline::{
    build_associations, clutter_filter_indices, dbscan, identify_los_oriented, per_ue_localize, unwrap_delays,
    LocalizedPoint, PathMeasurement, Priors,
};
use crate::scene::{generate_ground_truth_paths, random_scene, PathRecord, Scene, Vec3};
use crate::waveform::{synthesize_tensor, watts_to_dbm, Codebooks, OfdmConfig};

/// Estimated clusters farther than this from every scatter point of every
/// target count as false alarms.
pub const ASSOCIATION_GATE_M: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// All receivers fused.
    Disac,
    /// A single receiver on its own.
    Isac(usize),
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Disac => write!(f, "disac"),
            Mode::Isac(id) => write!(f, "isac:{id}"),
        }
    }
}

impl FromStr for Mode {
    type Err = DisacError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "disac" {
            return Ok(Mode::Disac);
        }
        if let Some(id) = s.strip_prefix("isac:") {
            return id
                .parse()
                .map(Mode::Isac)
                .map_err(|_| DisacError::InvalidArgument(format!("bad receiver id in mode {s:?}")));
        }
        Err(DisacError::InvalidArgument(format!(
            "unknown mode {s:?}, expected disac or isac:<id>"
        )))
    }
}

impl Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where per-receiver path parameters come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathSource {
    /// Synthesized tensor followed by CP estimation.
    Estimated,
    /// Exact ground-truth parameters (delays folded modulo 1/Δf as the
    /// estimator would report them).
    GroundTruth,
}

/// Error of a stage, tagged with the stage name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

impl StageFailure {
    fn new(stage: &str, err: impl fmt::Display) -> Self {
        Self {
            stage: stage.to_string(),
            message: err.to_string(),
        }
    }
}

impl fmt::Display for StageFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

/// Per-receiver output of the front end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UeFrontEnd {
    pub ue_id: usize,
    pub paths: Vec<EstimatedPath>,
    pub los_index: Option<usize>,
    pub los_ambiguous: bool,
    pub observation: Option<UeObservation>,
    pub failure: Option<StageFailure>,
}

/// Scene plus the per-receiver front-end results, shared by all modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedTrial {
    pub seed: u64,
    pub scene: Scene,
    pub ues: Vec<UeFrontEnd>,
    #[serde(skip)]
    pub front_end_seconds: f64,
}

/// Receiver noise variance in watts, honouring the `snr_db` override.
pub fn receiver_ofdm(config: &ScenarioConfig, scene: &Scene, rx_id: usize) -> Result<OfdmConfig> {
    let mut ofdm = config.ofdm.clone();
    if let Some(snr) = config.snr_db {
        let rx = scene.receiver(rx_id)?;
        let d = (rx.position - scene.tx.position).norm();
        let lambda = scene.wavelength();
        let gain = lambda / (4.0 * std::f64::consts::PI * d);
        let signal = ofdm.tx_power_watts() * gain * gain;
        ofdm.noise_variance_dbm = watts_to_dbm(signal / 10f64.powf(snr / 10.0));
    }
    Ok(ofdm)
}

pub fn codebooks_for(config: &ScenarioConfig, scene: &Scene) -> Result<Codebooks> {
    let rx = scene
        .receivers
        .first()
        .map(|r| r.array)
        .unwrap_or(config.receivers.array.geometry(config.wavelength())?);
    Codebooks::dft(
        &rx,
        (config.receivers.beams.az, config.receivers.beams.el),
        &scene.tx.array,
        (config.transmitter.beams.az, config.transmitter.beams.el),
    )
}

/// Ground-truth paths in estimator form.
pub fn paths_from_truth(records: &[PathRecord], delay_period: f64) -> Vec<EstimatedPath> {
    records
        .iter()
        .map(|r| EstimatedPath {
            gain: r.gain,
            delay: r.delay.rem_euclid(delay_period),
            aoa: r.aoa,
            aod: r.aod,
            low_confidence: false,
        })
        .collect()
}

/// LoS identification, field-of-interest filtering, delay unwrapping and
/// conversion to global measurements for one receiver.
pub fn observe(
    config: &ScenarioConfig,
    scene: &Scene,
    ue_id: usize,
    paths: Vec<EstimatedPath>,
) -> UeFrontEnd {
    let mut fe = UeFrontEnd {
        ue_id,
        paths,
        los_index: None,
        los_ambiguous: false,
        observation: None,
        failure: None,
    };
    let rx = match scene.receiver(ue_id) {
        Ok(rx) => rx,
        Err(e) => {
            fe.failure = Some(StageFailure::new("observe", e));
            return fe;
        }
    };
    let period = config.ofdm.unambiguous_delay();
    let los = match identify_los_oriented(
        &fe.paths,
        &scene.tx.orientation,
        &rx.orientation,
        period,
        config.ofdm.delay_resolution(),
    ) {
        Ok(l) => l,
        Err(e) => {
            fe.failure = Some(StageFailure::new("los", e));
            return fe;
        }
    };
    fe.los_index = Some(los.index);
    fe.los_ambiguous = los.ambiguous;
    let foi = match config.pipeline.field_of_interest() {
        Ok(f) => f,
        Err(e) => {
            fe.failure = Some(StageFailure::new("filter", e));
            return fe;
        }
    };
    let delays = unwrap_delays(&fe.paths, los.index, period, config.pipeline.delay_window_start_s);
    let kept = clutter_filter_indices(&fe.paths, &foi, Some(los.index));
    let to_meas = |i: usize| {
        PathMeasurement::from_path(&fe.paths[i], delays[i], &scene.tx.orientation, &rx.orientation)
    };
    let paths = kept
        .iter()
        .copied()
        .filter(|&i| i != los.index && !fe.paths[i].low_confidence)
        .map(to_meas)
        .collect();
    fe.observation = Some(UeObservation {
        ue_id,
        los: to_meas(los.index),
        paths,
    });
    fe
}

/// Scene sampling and the per-receiver front end.
pub fn prepare_trial(config: &ScenarioConfig, seed: u64, source: PathSource) -> std::result::Result<PreparedTrial, StageFailure> {
    let start = Instant::now();
    let scene = random_scene(config, seed).map_err(|e| StageFailure::new("scene", e))?;
    let codebooks = codebooks_for(config, &scene).map_err(|e| StageFailure::new("waveform", e))?;
    let mut ues = Vec::with_capacity(scene.receivers.len());
    for rx in &scene.receivers {
        let id = rx.id;
        let paths = match source {
            PathSource::GroundTruth => generate_ground_truth_paths(&scene, id)
                .map(|r| paths_from_truth(&r, config.ofdm.unambiguous_delay()))
                .map_err(|e| StageFailure::new("scene", e)),
            PathSource::Estimated => receiver_ofdm(config, &scene, id)
                .and_then(|ofdm| synthesize_tensor(&scene, id, &codebooks, &ofdm, seed))
                .map_err(|e| StageFailure::new("waveform", e))
                .and_then(|t| {
                    estimate_paths(&t, config.estimator.rank_selection(), &config.estimator.options(seed, id))
                        .map_err(|e| StageFailure::new("estimator", e))
                }),
        };
        let fe = match paths {
            Ok(p) => observe(config, &scene, id, p),
            Err(f) => UeFrontEnd {
                ue_id: id,
                paths: Vec::new(),
                los_index: None,
                los_ambiguous: false,
                observation: None,
                failure: Some(f),
            },
        };
        ues.push(fe);
    }
    Ok(PreparedTrial {
        seed,
        scene,
        ues,
        front_end_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UeResult {
    pub ue_id: usize,
    pub estimated: bool,
    pub position_error_m: Option<f64>,
    pub to_error_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub target_id: usize,
    pub detected: bool,
    pub error_m: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Runtimes {
    pub front_end_s: f64,
    pub back_end_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: u64,
    pub mode: Mode,
    pub weighting: Weighting,
    pub failure: Option<StageFailure>,
    pub ues: Vec<UeResult>,
    pub targets: Vec<TargetResult>,
    pub false_alarms: usize,
    /// Wall-clock timings; not serialized so results stay reproducible.
    #[serde(skip)]
    pub runtimes: Runtimes,
}

impl TrialResult {
    pub fn detected_targets(&self) -> usize {
        self.targets.iter().filter(|t| t.detected).count()
    }
}

/// Back end of a trial: per-receiver localization, clustering and fusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackEnd {
    pub points: Vec<LocalizedPoint>,
    pub estimate: SceneEstimate,
}

pub fn run_back_end(
    config: &ScenarioConfig,
    prepared: &PreparedTrial,
    mode: Mode,
    weighting: Weighting,
) -> std::result::Result<BackEnd, StageFailure> {
    let selected: Vec<&UeFrontEnd> = match mode {
        Mode::Disac => prepared.ues.iter().collect(),
        Mode::Isac(id) => {
            let ue = prepared
                .ues
                .iter()
                .find(|u| u.ue_id == id)
                .ok_or_else(|| StageFailure::new("mode", format!("no receiver {id}")))?;
            vec![ue]
        }
    };
    let priors = Priors {
        bs_position: prepared.scene.tx.position,
        speed_of_light: prepared.scene.speed_of_light,
    };
    let mut observations = Vec::new();
    let mut points = Vec::new();
    let mut first_failure = None;
    for ue in selected {
        if let Some(f) = &ue.failure {
            first_failure.get_or_insert_with(|| f.clone());
            continue;
        }
        let Some(obs) = &ue.observation else { continue };
        match per_ue_localize(obs, &priors, weighting) {
            Ok(loc) => {
                points.extend(loc.points);
                observations.push(obs.clone());
            }
            Err(e) => {
                first_failure.get_or_insert_with(|| StageFailure::new("localize", e));
            }
        }
    }
    let positions: Vec<Vec3> = points.iter().map(|p| p.position).collect();
    let labeling = dbscan(&positions, config.pipeline.dbscan_eps_m, config.pipeline.dbscan_min_points)
        .map_err(|e| StageFailure::new("cluster", e))?;
    let associations = build_associations(&labeling, &points);
    // Receivers without associated paths cannot be positioned.
    observations.retain(|o| associations.values().any(|m| m.contains_key(&o.ue_id)));
    if observations.is_empty() {
        return Err(first_failure.unwrap_or_else(|| StageFailure::new("cluster", "no clustered detections")));
    }
    let estimate = run_fusion(&observations, &associations, &priors, weighting)
        .map_err(|e| StageFailure::new("fusion", e))?;
    Ok(BackEnd { points, estimate })
}

fn score(prepared: &PreparedTrial, mode: Mode, weighting: Weighting, back: std::result::Result<&BackEnd, StageFailure>) -> TrialResult {
    let scene = &prepared.scene;
    let ue_ids: Vec<usize> = match mode {
        Mode::Disac => scene.receivers.iter().map(|r| r.id).collect(),
        Mode::Isac(id) => vec![id],
    };
    let mut result = TrialResult {
        trial: prepared.seed,
        mode,
        weighting,
        failure: None,
        ues: Vec::new(),
        targets: Vec::new(),
        false_alarms: 0,
        runtimes: Runtimes::default(),
    };
    let est = match back {
        Ok(b) => Some(&b.estimate),
        Err(f) => {
            result.failure = Some(f);
            None
        }
    };
    for id in ue_ids {
        let truth = scene.receiver(id).ok();
        let slot = est.and_then(|e| e.ue_ids.iter().position(|u| *u == id));
        let (pe, te) = match (slot, truth) {
            (Some(k), Some(rx)) => {
                let e = est.unwrap();
                (
                    Some((e.ue_positions[k] - rx.position).norm()),
                    Some((e.ue_timing_offsets[k] - rx.timing_offset).abs()),
                )
            }
            _ => (None, None),
        };
        result.ues.push(UeResult {
            ue_id: id,
            estimated: slot.is_some(),
            position_error_m: pe,
            to_error_s: te,
        });
    }
    let mut best: Vec<Option<f64>> = vec![None; scene.targets.len()];
    if let Some(e) = est {
        for p in &e.target_points {
            let nearest = scene
                .targets
                .iter()
                .enumerate()
                .map(|(t, target)| {
                    let d = target
                        .scatter_points
                        .iter()
                        .map(|s| (s - p).norm())
                        .fold(f64::INFINITY, f64::min);
                    (t, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match nearest {
                Some((t, d)) if d <= ASSOCIATION_GATE_M => {
                    best[t] = Some(best[t].map_or(d, |b: f64| b.min(d)));
                }
                _ => result.false_alarms += 1,
            }
        }
    }
    result.targets = scene
        .targets
        .iter()
        .zip(best)
        .map(|(t, b)| TargetResult {
            target_id: t.id,
            detected: b.is_some(),
            error_m: b,
        })
        .collect();
    result
}

/// Scores one mode of a prepared trial.
pub fn evaluate(config: &ScenarioConfig, prepared: &PreparedTrial, mode: Mode, weighting: Weighting) -> TrialResult {
    let start = Instant::now();
    let back = run_back_end(config, prepared, mode, weighting);
    let mut r = score(prepared, mode, weighting, back.as_ref().map_err(|f| f.clone()));
    r.runtimes = Runtimes {
        front_end_s: prepared.front_end_seconds,
        back_end_s: start.elapsed().as_secs_f64(),
    };
    r
}

fn failed_trial(config: &ScenarioConfig, seed: u64, mode: Mode, weighting: Weighting, failure: StageFailure) -> TrialResult {
    let ues = match mode {
        Mode::Disac => (0..config.receivers.count).collect(),
        Mode::Isac(id) => vec![id],
    };
    TrialResult {
        trial: seed,
        mode,
        weighting,
        failure: Some(failure),
        ues: ues
            .into_iter()
            .map(|ue_id| UeResult {
                ue_id,
                estimated: false,
                position_error_m: None,
                to_error_s: None,
            })
            .collect(),
        targets: (0..config.targets.count)
            .map(|target_id| TargetResult {
                target_id,
                detected: false,
                error_m: None,
            })
            .collect(),
        false_alarms: 0,
        runtimes: Runtimes::default(),
    }
}

/// Full trial for one mode with the configured fusion weighting. Stage errors
/// are recorded in the result, never raised.
pub fn run_trial(config: &ScenarioConfig, seed: u64, mode: Mode) -> TrialResult {
    run_trial_with(config, seed, mode, config.fusion.weighting, PathSource::Estimated)
}

pub fn run_trial_with(
    config: &ScenarioConfig,
    seed: u64,
    mode: Mode,
    weighting: Weighting,
    source: PathSource,
) -> TrialResult {
    match prepare_trial(config, seed, source) {
        Ok(p) => evaluate(config, &p, mode, weighting),
        Err(f) => failed_trial(config, seed, mode, weighting, f),
    }
}

/// Scores for several modes and weightings sharing one front end.
pub fn run_trial_modes(
    config: &ScenarioConfig,
    seed: u64,
    modes: &[(Mode, Weighting)],
    source: PathSource,
) -> Vec<TrialResult> {
    match prepare_trial(config, seed, source) {
        Ok(p) => modes.iter().map(|&(m, w)| evaluate(config, &p, m, w)).collect(),
        Err(f) => modes
            .iter()
            .map(|&(m, w)| failed_trial(config, seed, m, w, f.clone()))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_round_trips_through_text() {
        for m in [Mode::Disac, Mode::Isac(0), Mode::Isac(12)] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("isac".parse::<Mode>().is_err());
        assert!("isac:x".parse::<Mode>().is_err());
    }

    #[test]
    fn snr_override_sets_noise_from_los_power() {
        let cfg = ScenarioConfig {
            snr_db: Some(20.0),
            ..Default::default()
        };
        let scene = random_scene(&cfg, 1).unwrap();
        let ofdm = receiver_ofdm(&cfg, &scene, 0).unwrap();
        let rx = &scene.receivers[0];
        let d = (rx.position - scene.tx.position).norm();
        let g = scene.wavelength() / (4.0 * std::f64::consts::PI * d);
        let snr = ofdm.tx_power_watts() * g * g / ofdm.noise_variance_watts();
        assert!((10.0 * snr.log10() - 20.0).abs() < 1e-9);
    }
}
