//! Climatological ensemble baseline: historical-analog trajectories
//! drawn around the forecast calendar day, with a look-back limit and
//! recency weighting, sampled without replacement.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};
use crate::rollout::EnsembleForecast;
use crate::synth::{DailyArchive, YEAR_DAYS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClimatologyConfig {
    pub members: usize,
    /// Calendar window: candidate start days within +/- this many days
    /// of the init day-of-year (inclusive).
    pub window_days: usize,
    pub lookback_years: usize,
    pub recency_halflife_years: f64,
    pub seed: u64,
}

impl Default for ClimatologyConfig {
    fn default() -> Self {
        ClimatologyConfig {
            members: 200,
            window_days: 3,
            lookback_years: 50,
            recency_halflife_years: 10.0,
            seed: 0,
        }
    }
}

impl ClimatologyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members < 2 {
            return Err(GemError::Config(
                "climatology needs at least 2 members".to_string(),
            ));
        }
        if self.recency_halflife_years <= 0.0 {
            return Err(GemError::Config(
                "recency halflife must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Circular day-of-year distance on the toy calendar.
fn doy_distance(a: i64, b: i64) -> i64 {
    let y = YEAR_DAYS as i64;
    let d = (a - b).rem_euclid(y);
    d.min(y - d)
}

/// Candidate start days for an init day: same season in an earlier
/// year, within the look-back, and with the whole trajectory strictly
/// before the init time.
pub fn candidate_starts(
    archive_days: usize,
    init_day: i64,
    leads: usize,
    cfg: &ClimatologyConfig,
) -> Vec<i64> {
    let year = YEAR_DAYS as i64;
    let init_year = init_day.div_euclid(year);
    let init_doy = init_day.rem_euclid(year);
    let lookback_days = cfg.lookback_years as i64 * year;
    let mut out = Vec::new();
    for s in 0..archive_days as i64 {
        if s.div_euclid(year) >= init_year {
            continue; // same or later year
        }
        if init_day - s > lookback_days {
            continue;
        }
        if doy_distance(s.rem_euclid(year), init_doy) > cfg.window_days as i64 {
            continue;
        }
        // Trajectory uses days s+1 ..= s+leads; all strictly before init.
        if s + leads as i64 >= init_day {
            continue;
        }
        if s + (leads as i64) >= archive_days as i64 {
            continue;
        }
        out.push(s);
    }
    out
}

/// Weighted sampling without replacement by successive renormalized
/// draws; returns selected indices in draw order.
pub fn weighted_sample_without_replacement(
    weights: &[f64],
    k: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<usize> {
    assert!(k <= weights.len());
    let mut pool: Vec<(usize, f64)> = weights.iter().copied().enumerate().collect();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = pool.iter().map(|(_, w)| w).sum();
        let mut u = rng.random_range(0.0..total);
        let mut chosen = pool.len() - 1;
        for (i, (_, w)) in pool.iter().enumerate() {
            if u < *w {
                chosen = i;
                break;
            }
            u -= w;
        }
        picked.push(pool.remove(chosen).0);
    }
    picked
}

/// Build the analog baseline: each sampled historical start date
/// contributes the following `leads` contiguous archive days as one
/// member, preserving multivariate and temporal consistency.
pub fn build_climatology(
    archive: &DailyArchive,
    init_day: i64,
    leads: usize,
    cfg: &ClimatologyConfig,
) -> Result<EnsembleForecast> {
    cfg.validate()?;
    if leads == 0 {
        return Err(GemError::Config("need at least one lead".to_string()));
    }
    let n_days = archive.y.len();
    let candidates = candidate_starts(n_days, init_day, leads, cfg);
    if candidates.len() < cfg.members {
        return Err(GemError::InsufficientCandidates {
            available: candidates.len(),
            needed: cfg.members,
        });
    }

    let weights: Vec<f64> = candidates
        .iter()
        .map(|&s| {
            let age_years = (init_day - s) as f64 / YEAR_DAYS as f64;
            (2.0f64).powf(-age_years / cfg.recency_halflife_years)
        })
        .collect();

    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&cfg.seed.to_le_bytes());
    key[8..16].copy_from_slice(&init_day.to_le_bytes());
    key[16..24].copy_from_slice(&(leads as u64).to_le_bytes());
    key[24..32].copy_from_slice(b"gem-clim");
    let mut rng = ChaCha12Rng::from_seed(key);
    let picks = weighted_sample_without_replacement(&weights, cfg.members, &mut rng);

    let grid = archive.x[0].grid().clone();
    let mut ens = EnsembleForecast::zeros(
        grid,
        cfg.members,
        leads,
        archive.x[0].channels().to_vec(),
        archive.y[0].channels().to_vec(),
        24 * init_day,
        cfg.seed,
    );
    for (m, &pick) in picks.iter().enumerate() {
        let s = candidates[pick] as usize;
        for t in 1..=leads {
            ens.set_prog(m, t, &archive.x[s + t]);
            ens.set_diag(m, t, &archive.y[s + t - 1]);
        }
    }
    Ok(ens)
}
