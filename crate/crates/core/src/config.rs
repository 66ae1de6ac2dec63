//! Scenario configuration, loaded from TOML.
//!
//! Every section is optional except `schema`; omitted sections take the
//! desk-scale defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DisacError, Result};
use crate::estimator::{estimator_stream, CpOptions, EstimatorOptions, RankSelection};
use crate::fusion::Weighting;
use crate::pipeline::FieldOfInterest;
use crate::scene::{UpaGeometry, SPEED_OF_LIGHT};
use crate::waveform::OfdmConfig;

pub const SCHEMA: &str = "disac-config/1";

/// Axis-aligned sampling region, meters. `min == max` pins a coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Box3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3 {
    pub fn diagonal(&self) -> f64 {
        (0..3)
            .map(|i| (self.max[i] - self.min[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn check(&self, field: &str) -> Result<()> {
        for i in 0..3 {
            if !(self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] <= self.max[i]) {
                return Err(DisacError::Config(format!(
                    "{field}: min must not exceed max on every axis"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySection {
    pub n_x: usize,
    pub n_y: usize,
    #[serde(default = "half")]
    pub spacing_wavelengths: f64,
}

fn half() -> f64 {
    0.5
}

impl ArraySection {
    pub fn geometry(&self, wavelength: f64) -> Result<UpaGeometry> {
        UpaGeometry::new(self.n_x, self.n_y, self.spacing_wavelengths * wavelength, wavelength)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamSection {
    pub az: usize,
    pub el: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransmitterSection {
    pub position: [f64; 3],
    pub yaw_deg: f64,
    pub downtilt_deg: f64,
    pub array: ArraySection,
    pub beams: BeamSection,
}

impl Default for TransmitterSection {
    fn default() -> Self {
        Self {
            position: [0.0, 0.0, 14.0],
            yaw_deg: 0.0,
            downtilt_deg: 22.0,
            array: ArraySection {
                n_x: 16,
                n_y: 16,
                spacing_wavelengths: 0.5,
            },
            beams: BeamSection { az: 8, el: 4 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReceiverSection {
    pub count: usize,
    pub array: ArraySection,
    pub beams: BeamSection,
    pub heading_deg: f64,
    pub region: Box3,
    /// Offsets are drawn uniformly from `±timing_offset_range_s`.
    pub timing_offset_range_s: f64,
    pub los_blocked: bool,
}

impl Default for ReceiverSection {
    fn default() -> Self {
        Self {
            count: 2,
            array: ArraySection {
                n_x: 8,
                n_y: 8,
                spacing_wavelengths: 0.5,
            },
            beams: BeamSection { az: 8, el: 8 },
            heading_deg: 180.0,
            region: Box3 {
                min: [40.0, -6.0, 1.5],
                max: [60.0, 6.0, 1.5],
            },
            timing_offset_range_s: 200e-9,
            los_blocked: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSection {
    pub count: usize,
    /// Region for target centers.
    pub region: Box3,
    pub scatter_points: usize,
    /// Scatter points are drawn inside `center ± half_extent_m`.
    pub half_extent_m: [f64; 3],
    pub min_scatter_separation_m: f64,
    pub reflectivity_range: [f64; 2],
}

impl Default for TargetSection {
    fn default() -> Self {
        Self {
            count: 2,
            region: Box3 {
                min: [20.0, -6.0, 0.8],
                max: [35.0, 6.0, 0.8],
            },
            scatter_points: 3,
            half_extent_m: [0.25, 0.25, 0.15],
            min_scatter_separation_m: 0.0,
            reflectivity_range: [0.3, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClutterSection {
    pub count: usize,
    /// Clutter scatterer `i` is drawn from `regions[i % regions.len()]`.
    pub regions: Vec<Box3>,
    pub reflectivity_range: [f64; 2],
}

impl Default for ClutterSection {
    fn default() -> Self {
        Self {
            count: 4,
            regions: vec![
                Box3 {
                    min: [35.0, 12.0, 2.0],
                    max: [65.0, 22.0, 10.0],
                },
                Box3 {
                    min: [35.0, -22.0, 2.0],
                    max: [65.0, -12.0, 10.0],
                },
            ],
            reflectivity_range: [0.3, 0.8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub azimuth_bound_deg: f64,
    pub elevation_bound_deg: f64,
    pub dbscan_eps_m: f64,
    pub dbscan_min_points: usize,
    /// Start of the window that LoS delays are unwrapped into, seconds.
    pub delay_window_start_s: f64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            azimuth_bound_deg: 60.0,
            elevation_bound_deg: 30.0,
            dbscan_eps_m: 2.0,
            dbscan_min_points: 2,
            delay_window_start_s: -100e-9,
        }
    }
}

impl PipelineSection {
    pub fn field_of_interest(&self) -> Result<FieldOfInterest> {
        FieldOfInterest::new(
            self.azimuth_bound_deg.to_radians(),
            self.elevation_bound_deg.to_radians(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    /// Fixed model order; absent means automatic selection.
    pub rank: Option<usize>,
    pub max_rank: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Random restarts run in addition to the algebraic initialization.
    pub restarts: usize,
    pub algebraic_init: bool,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            rank: None,
            max_rank: 16,
            max_iters: 500,
            tol: 1e-8,
            restarts: 0,
            algebraic_init: true,
        }
    }
}

impl EstimatorSection {
    /// Options for the estimator of receiver `rx_id` in the trial `seed`.
    pub fn options(&self, seed: u64, rx_id: usize) -> EstimatorOptions {
        EstimatorOptions {
            cp: CpOptions {
                max_iters: self.max_iters,
                tol: self.tol,
                restarts: self.restarts,
                seed,
                stream: estimator_stream(rx_id),
            },
            algebraic_init: self.algebraic_init,
        }
    }

    pub fn rank_selection(&self) -> RankSelection {
        match self.rank {
            Some(l) => RankSelection::Fixed(l),
            None => RankSelection::Auto {
                max_rank: self.max_rank,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub weighting: Weighting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ofdm: OfdmConfig,
    /// When set, each receiver's noise variance is chosen so that its LoS
    /// path has this per-element SNR, overriding `ofdm.noise_variance_dbm`.
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub transmitter: TransmitterSection,
    #[serde(default)]
    pub receivers: ReceiverSection,
    #[serde(default)]
    pub targets: TargetSection,
    #[serde(default)]
    pub clutter: ClutterSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default = "default_min_separation")]
    pub min_separation_m: f64,
    #[serde(default = "default_attempts")]
    pub max_sampling_attempts: usize,
    #[serde(default = "default_c")]
    pub speed_of_light: f64,
}

fn default_min_separation() -> f64 {
    5.0
}

fn default_attempts() -> usize {
    10_000
}

fn default_c() -> f64 {
    SPEED_OF_LIGHT
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA.to_string(),
            seed: 0,
            ofdm: OfdmConfig::default(),
            snr_db: None,
            transmitter: TransmitterSection::default(),
            receivers: ReceiverSection::default(),
            targets: TargetSection::default(),
            clutter: ClutterSection::default(),
            pipeline: PipelineSection::default(),
            estimator: EstimatorSection::default(),
            fusion: FusionSection::default(),
            min_separation_m: default_min_separation(),
            max_sampling_attempts: default_attempts(),
            speed_of_light: default_c(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| DisacError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
            .map_err(|e| DisacError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn wavelength(&self) -> f64 {
        self.speed_of_light / self.ofdm.carrier_frequency
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(DisacError::Config(format!("{field}: {why}")));
        if self.schema != SCHEMA {
            return bad("schema", &format!("expected \"{SCHEMA}\", found \"{}\"", self.schema));
        }
        self.ofdm
            .validate()
            .map_err(|e| DisacError::Config(format!("ofdm: {e}")))?;
        if !(self.speed_of_light > 0.0) {
            return bad("speed_of_light", "must be positive");
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return bad("snr_db", "must be finite");
            }
        }
        let lambda = self.wavelength();
        let tx = &self.transmitter;
        tx.array
            .geometry(lambda)
            .map_err(|e| DisacError::Config(format!("transmitter.array: {e}")))?;
        if tx.beams.az == 0 || tx.beams.az > tx.array.n_x || tx.beams.el == 0 || tx.beams.el > tx.array.n_y {
            return bad("transmitter.beams", "beam counts must be in 1..=elements per axis");
        }
        let rx = &self.receivers;
        rx.array
            .geometry(lambda)
            .map_err(|e| DisacError::Config(format!("receivers.array: {e}")))?;
        if rx.beams.az == 0 || rx.beams.az > rx.array.n_x || rx.beams.el == 0 || rx.beams.el > rx.array.n_y {
            return bad("receivers.beams", "beam counts must be in 1..=elements per axis");
        }
        rx.region.check("receivers.region")?;
        if rx.region.min[2] <= 0.0 {
            return bad("receivers.region", "receivers must be above ground (z > 0)");
        }
        if !(rx.timing_offset_range_s >= 0.0) {
            return bad("receivers.timing_offset_range_s", "must be non-negative");
        }
        let t = &self.targets;
        t.region.check("targets.region")?;
        if t.count > 0 && t.scatter_points == 0 {
            return bad("targets.scatter_points", "targets need at least one scatter point");
        }
        if t.half_extent_m.iter().any(|h| !(*h >= 0.0)) {
            return bad("targets.half_extent_m", "must be non-negative");
        }
        let diameter = 2.0 * t.half_extent_m.iter().map(|h| h * h).sum::<f64>().sqrt();
        if diameter > crate::scene::MAX_TARGET_EXTENT {
            return bad("targets.half_extent_m", "target extent exceeds 6 m");
        }
        let [lo, hi] = t.reflectivity_range;
        if !(lo >= 0.0 && hi >= lo) {
            return bad("targets.reflectivity_range", "need 0 <= low <= high");
        }
        for (i, r) in self.clutter.regions.iter().enumerate() {
            r.check(&format!("clutter.regions[{i}]"))?;
        }
        let [lo, hi] = self.clutter.reflectivity_range;
        if !(lo >= 0.0 && hi >= lo) {
            return bad("clutter.reflectivity_range", "need 0 <= low <= high");
        }
        self.pipeline
            .field_of_interest()
            .map_err(|e| DisacError::Config(format!("pipeline: {e}")))?;
        if !(self.pipeline.dbscan_eps_m > 0.0) {
            return bad("pipeline.dbscan_eps_m", "must be positive");
        }
        if self.pipeline.dbscan_min_points == 0 {
            return bad("pipeline.dbscan_min_points", "must be at least 1");
        }
        if self.estimator.max_rank == 0 || self.estimator.rank == Some(0) {
            return bad("estimator", "rank bounds must be at least 1");
        }
        if !(self.min_separation_m >= 0.0) {
            return bad("min_separation_m", "must be non-negative");
        }
        if self.max_sampling_attempts == 0 {
            return bad("max_sampling_attempts", "must be at least 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_uses_defaults() {
        let cfg = ScenarioConfig::from_toml_str("schema = \"disac-config/1\"\n").unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ScenarioConfig::default();
        let back = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn missing_schema_is_rejected() {
        assert!(matches!(
            ScenarioConfig::from_toml_str("seed = 3\n"),
            Err(DisacError::Config(_))
        ));
    }

    #[test]
    fn unknown_field_reports_location() {
        let err = ScenarioConfig::from_toml_str("schema = \"disac-config/1\"\n[receivers]\ncuont = 3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("cuont"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = ScenarioConfig::from_toml_str(
            "schema = \"disac-config/1\"\n[pipeline]\ndbscan_eps_m = -1.0\n",
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("pipeline.dbscan_eps_m"), "{err}");
    }
}
