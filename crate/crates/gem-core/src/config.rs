//! Run configuration: one strict JSON document with sections for every
//! stage, dotted-path overrides, and a stable content hash for run
//! manifests. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::climatology::ClimatologyConfig;
use crate::error::{GemError, Result};
use crate::grid::GridSpec;
use crate::model::ModelConfig;
use crate::synth::{land_analog_mask, SynthParams};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub nlat: usize,
    pub nlon: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { nlat: 32, nlon: 64 }
    }
}

/// Scalar knobs expanded into the per-cell synthetic-atmosphere fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_days: usize,
    pub spinup_days: usize,
    pub dt_fine_hours: f64,
    /// Mean state: `mean_floor + mean_equator_boost * cos(lat)`.
    pub mean_floor: f64,
    pub mean_equator_boost: f64,
    /// Diurnal amplitude: `amplitude_base + amplitude_land_boost * land`.
    pub amplitude_base: f64,
    pub amplitude_land_boost: f64,
    pub advection_cells_per_day: f64,
    pub diffusion_cells2_per_day: f64,
    pub noise_scale: f64,
    pub ou_timescale_days: f64,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n_days: 11 * crate::synth::YEAR_DAYS,
            spinup_days: 30,
            dt_fine_hours: 1.0,
            mean_floor: 255.0,
            mean_equator_boost: 33.0,
            amplitude_base: 4.0,
            amplitude_land_boost: 4.0,
            advection_cells_per_day: 6.0,
            diffusion_cells2_per_day: 1.5,
            noise_scale: 1.8,
            ou_timescale_days: 5.0,
            seed: 11,
        }
    }
}

impl SynthSection {
    pub fn to_params(&self, grid: &GridSpec) -> SynthParams {
        let land = land_analog_mask(grid);
        let ncell = grid.ncell();
        let mut mean_state = vec![0.0; ncell];
        let mut amplitude = vec![0.0; ncell];
        for i in 0..grid.nlat() {
            let coslat = grid.lat_centers()[i].to_radians().cos();
            for j in 0..grid.nlon() {
                let k = i * grid.nlon() + j;
                mean_state[k] = self.mean_floor + self.mean_equator_boost * coslat;
                amplitude[k] = self.amplitude_base + self.amplitude_land_boost * land[k] as f64;
            }
        }
        SynthParams {
            grid: grid.clone(),
            diurnal_amplitude: amplitude,
            mean_state,
            advection_cells_per_day: self.advection_cells_per_day,
            diffusion_cells2_per_day: self.diffusion_cells2_per_day,
            noise_scale: self.noise_scale,
            ou_timescale_days: self.ou_timescale_days,
            seed: self.seed,
            dt_fine_hours: self.dt_fine_hours,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub windows: Vec<usize>,
    pub quantile_hi: f64,
    pub quantile_lo: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            windows: vec![1, 7],
            quantile_hi: 0.95,
            quantile_lo: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridSection,
    pub synth: SynthSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub climatology: ClimatologyConfig,
    pub verify: VerifySection,
}

impl RunConfig {
    /// Parse from JSON text, apply dotted-path overrides, re-validate
    /// strictly, and sync the model's grid dims to the grid section.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| GemError::Config(format!("invalid config: {e}")))?;
        cfg.model.nlat = cfg.grid.nlat;
        cfg.model.nlon = cfg.grid.nlon;
        Ok(cfg)
    }

    pub fn load(path: Option<&std::path::Path>, overrides: &[String]) -> Result<RunConfig> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => serde_json::to_string(&RunConfig::default())?,
        };
        RunConfig::from_json(&text, overrides)
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stable content hash (FNV-1a over canonical JSON).
    pub fn content_hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(canon.as_bytes()))
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Apply one `a.b.c=value` override onto a JSON tree. Values parse as
/// JSON when possible, else as strings.
pub fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        GemError::Config(format!("override {spec:?} must look like section.key=value"))
    })?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| {
            GemError::Config(format!("override path {path:?} crosses a non-object"))
        })?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_hashes_stably() {
        let cfg = RunConfig::default();
        let text = cfg.to_pretty_json();
        let back = RunConfig::from_json(&text, &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.content_hash(), back.content_hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"grid": {"nlat": 32, "bogus": 1}}"#, &[]);
        assert!(matches!(err, Err(GemError::Json(_)) | Err(GemError::Config(_))));
    }

    #[test]
    fn overrides_follow_dotted_paths() {
        let cfg = RunConfig::from_json(
            "{}",
            &[
                "train.total_steps=42".to_string(),
                "model.depth=2".to_string(),
                "model.attn_kind=\"neighborhood\"".to_string(),
                "grid.nlat=16".to_string(),
                "grid.nlon=32".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.total_steps, 42);
        assert_eq!(cfg.model.depth, 2);
        assert_eq!(cfg.model.nlat, 16);
        assert_eq!(cfg.model.nlon, 32);
        assert!(matches!(
            cfg.model.attn_kind,
            crate::model::AttnKind::Neighborhood
        ));
        // Bad keys via overrides are still rejected.
        assert!(RunConfig::from_json("{}", &["train.nope=1".to_string()]).is_err());
        // Hash changes with content.
        assert_ne!(cfg.content_hash(), RunConfig::default().content_hash());
    }

    #[test]
    fn synth_section_matches_desk_default() {
        let grid = crate::grid::make_grid(32, 64).unwrap();
        let from_section = SynthSection::default().to_params(&grid);
        let desk = SynthParams::desk_default(&grid, 11);
        assert_eq!(from_section, desk);
    }
}
