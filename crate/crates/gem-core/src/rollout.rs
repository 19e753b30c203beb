//! Autoregressive ensemble forecasting under the first-order Markov
//! factorization. Diagnostics are emitted per lead and never fed back
//! unless the model explicitly conditions on them.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};
use crate::gemf;
use crate::grid::{Field, GridSpec};
use crate::model::{forward, sample_noise, Checkpoint, ModelGeometry};
use crate::synth::conditioning_field;

/// `S x T` ensemble of prognostic and diagnostic fields.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleForecast {
    pub grid: GridSpec,
    pub members: usize,
    pub leads: usize,
    pub prognostic_channels: Vec<String>,
    pub diagnostic_channels: Vec<String>,
    /// Hours; lead t is valid at `init_time + 24 t`.
    pub init_time: i64,
    pub seed: u64,
    /// `[member][lead][channel][cell]`.
    prog: Vec<f32>,
    diag: Vec<f32>,
}

impl EnsembleForecast {
    pub fn zeros(
        grid: GridSpec,
        members: usize,
        leads: usize,
        prognostic_channels: Vec<String>,
        diagnostic_channels: Vec<String>,
        init_time: i64,
        seed: u64,
    ) -> Self {
        let ncell = grid.ncell();
        let prog = vec![0.0; members * leads * prognostic_channels.len() * ncell];
        let diag = vec![0.0; members * leads * diagnostic_channels.len() * ncell];
        EnsembleForecast {
            grid,
            members,
            leads,
            prognostic_channels,
            diagnostic_channels,
            init_time,
            seed,
            prog,
            diag,
        }
    }

    fn prog_idx(&self, member: usize, lead: usize, chan: usize) -> usize {
        let ncell = self.grid.ncell();
        ((member * self.leads + lead - 1) * self.prognostic_channels.len() + chan) * ncell
    }

    fn diag_idx(&self, member: usize, lead: usize, chan: usize) -> usize {
        let ncell = self.grid.ncell();
        ((member * self.leads + lead - 1) * self.diagnostic_channels.len() + chan) * ncell
    }

    /// Prognostic values for (member, 1-based lead, channel index).
    pub fn prog_values(&self, member: usize, lead: usize, chan: usize) -> &[f32] {
        let i = self.prog_idx(member, lead, chan);
        &self.prog[i..i + self.grid.ncell()]
    }

    pub fn diag_values(&self, member: usize, lead: usize, chan: usize) -> &[f32] {
        let i = self.diag_idx(member, lead, chan);
        &self.diag[i..i + self.grid.ncell()]
    }

    pub fn set_prog(&mut self, member: usize, lead: usize, field: &Field) {
        for c in 0..self.prognostic_channels.len() {
            let i = self.prog_idx(member, lead, c);
            let n = self.grid.ncell();
            self.prog[i..i + n].copy_from_slice(field.channel(c));
        }
    }

    pub fn set_diag(&mut self, member: usize, lead: usize, field: &Field) {
        for c in 0..self.diagnostic_channels.len() {
            let i = self.diag_idx(member, lead, c);
            let n = self.grid.ncell();
            self.diag[i..i + n].copy_from_slice(field.channel(c));
        }
    }

    pub fn lead_time_tag(&self, lead: usize) -> i64 {
        self.init_time + 24 * lead as i64
    }

    /// Prognostic state of one member at one lead as a field.
    pub fn prog_field(&self, member: usize, lead: usize) -> Field {
        let ncell = self.grid.ncell();
        let mut data = Vec::with_capacity(self.prognostic_channels.len() * ncell);
        for c in 0..self.prognostic_channels.len() {
            data.extend_from_slice(self.prog_values(member, lead, c));
        }
        Field::new(
            self.grid.clone(),
            self.prognostic_channels.clone(),
            data,
            self.lead_time_tag(lead),
        )
        .expect("forecast block is finite by construction")
    }

    pub fn diag_field(&self, member: usize, lead: usize) -> Field {
        let ncell = self.grid.ncell();
        let mut data = Vec::with_capacity(self.diagnostic_channels.len() * ncell);
        for c in 0..self.diagnostic_channels.len() {
            data.extend_from_slice(self.diag_values(member, lead, c));
        }
        Field::new(
            self.grid.clone(),
            self.diagnostic_channels.clone(),
            data,
            self.lead_time_tag(lead),
        )
        .expect("forecast block is finite by construction")
    }

    /// Channel values across members, pooled for scoring.
    pub fn member_values(&self, lead: usize, channel: &str) -> Result<Vec<&[f32]>> {
        if let Some(c) = self
            .prognostic_channels
            .iter()
            .position(|n| n == channel)
        {
            return Ok((0..self.members)
                .map(|m| self.prog_values(m, lead, c))
                .collect());
        }
        if let Some(c) = self
            .diagnostic_channels
            .iter()
            .position(|n| n == channel)
        {
            return Ok((0..self.members)
                .map(|m| self.diag_values(m, lead, c))
                .collect());
        }
        Err(GemError::MissingChannel(channel.to_string()))
    }

    pub fn has_channel(&self, channel: &str) -> bool {
        self.prognostic_channels.iter().any(|n| n == channel)
            || self.diagnostic_channels.iter().any(|n| n == channel)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutOptions {
    /// Boxcar-smooth the SST-like channel after every step (stand-in for
    /// predicting a low-passed SST field).
    pub sst_smooth: bool,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions { sst_smooth: true }
    }
}

const SST_CHANNEL: &str = "sst";
const SST_BOX: i64 = 2; // 5x5 boxcar half-width

fn boxcar_smooth(values: &mut [f32], nlat: usize, nlon: usize) {
    let src: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    for r in 0..nlat as i64 {
        for c in 0..nlon as i64 {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dr in -SST_BOX..=SST_BOX {
                let rr = r + dr;
                if rr < 0 || rr >= nlat as i64 {
                    continue;
                }
                for dc in -SST_BOX..=SST_BOX {
                    let cc = (c + dc).rem_euclid(nlon as i64);
                    acc += src[rr as usize * nlon + cc as usize];
                    n += 1.0;
                }
            }
            values[(r * nlon as i64 + c) as usize] = (acc / n) as f32;
        }
    }
}

/// Roll one member forward, returning its per-lead fields.
fn rollout_member(
    ck: &Checkpoint,
    geo: &ModelGeometry,
    x0: &Field,
    y0: Option<&Field>,
    leads: usize,
    member: usize,
    seed: u64,
    opts: RolloutOptions,
) -> Result<Vec<(Field, Field)>> {
    let init_day = x0.time_tag() / 24;
    let mut state = x0.clone();
    let mut prev_diag: Option<Field> = y0.cloned();
    let mut out = Vec::with_capacity(leads);
    for t in 1..=leads {
        let cond = conditioning_field(x0.grid(), init_day + t as i64);
        let z = sample_noise(seed, member, t, ck.cfg.noise_dim);
        let y_input = if ck.cfg.condition_on_diagnostics {
            Some(prev_diag.clone().unwrap_or_else(|| {
                // No diagnostics at the first step: standardized zeros,
                // i.e. the climatological mean.
                let mut f = Field::zeros(
                    x0.grid().clone(),
                    ck.cfg.diagnostic_channels.clone(),
                    x0.time_tag(),
                );
                for c in 0..ck.cfg.c_y() {
                    let mu = ck.stats.y.mean[c] as f32;
                    f.channel_mut(c).fill(mu);
                }
                f
            }))
        } else {
            None
        };
        let (mut x_hat, y_hat) = forward(
            &state,
            &cond,
            y_input.as_ref(),
            &z,
            &ck.params,
            geo,
            &ck.stats,
        )
        .map_err(|e| match e {
            GemError::NonFinite { .. } => GemError::NonFiniteState { member, lead: t },
            other => other,
        })?;
        if opts.sst_smooth {
            if let Ok(c) = x_hat.channel_index(SST_CHANNEL) {
                let (nlat, nlon) = (x_hat.grid().nlat(), x_hat.grid().nlon());
                boxcar_smooth(x_hat.channel_mut(c), nlat, nlon);
            }
        }
        state = x_hat.clone();
        prev_diag = Some(y_hat.clone());
        out.push((x_hat, y_hat));
    }
    Ok(out)
}

/// Ensemble rollout: members iterate independently with counter-based
/// noise, so member `m` of an `S`-member run equals member `m` of any
/// other run with the same seed.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    ck: &Checkpoint,
    geo: &ModelGeometry,
    x0: &Field,
    y0: Option<&Field>,
    leads: usize,
    members: usize,
    seed: u64,
    opts: RolloutOptions,
) -> Result<EnsembleForecast> {
    if leads == 0 || members == 0 {
        return Err(GemError::Config(
            "rollout needs at least one lead and one member".to_string(),
        ));
    }
    if x0.channels() != ck.cfg.prognostic_channels.as_slice() {
        return Err(GemError::ChannelMismatch(
            "initial state channels differ from model config".to_string(),
        ));
    }

    let results: Vec<Result<Vec<(Field, Field)>>> = (0..members)
        .into_par_iter()
        .map(|m| rollout_member(ck, geo, x0, y0, leads, m, seed, opts))
        .collect();

    let mut ens = EnsembleForecast::zeros(
        x0.grid().clone(),
        members,
        leads,
        ck.cfg.prognostic_channels.clone(),
        ck.cfg.diagnostic_channels.clone(),
        x0.time_tag(),
        seed,
    );
    for (m, r) in results.into_iter().enumerate() {
        let fields = r?;
        for (t, (x, y)) in fields.iter().enumerate() {
            ens.set_prog(m, t + 1, x);
            ens.set_diag(m, t + 1, y);
        }
        let _ = m;
    }
    Ok(ens)
}

/// Rolling mean with a 1-day stride: output index `i` averages leads
/// `i+1 ..= i+window`, so the value at lead `T` reflects the window
/// starting at `T`.
pub fn rolling_window_mean_fields(series: &[Field], window: usize) -> Result<Vec<Field>> {
    if window == 0 || window > series.len() {
        return Err(GemError::WindowTooLong {
            window,
            len: series.len(),
        });
    }
    let n = series.len() - window + 1;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc: Vec<f64> = series[i].data().iter().map(|&v| v as f64).collect();
        for f in &series[i + 1..i + window] {
            for (a, &v) in acc.iter_mut().zip(f.data()) {
                *a += v as f64;
            }
        }
        let data: Vec<f32> = acc.iter().map(|&v| (v / window as f64) as f32).collect();
        out.push(Field::new(
            series[i].grid().clone(),
            series[i].channels().to_vec(),
            data,
            series[i].time_tag(),
        )?);
    }
    Ok(out)
}

/// Rolling mean over leads of every member, both blocks.
pub fn rolling_window_mean_forecast(
    ens: &EnsembleForecast,
    window: usize,
) -> Result<EnsembleForecast> {
    if window == 0 || window > ens.leads {
        return Err(GemError::WindowTooLong {
            window,
            len: ens.leads,
        });
    }
    let leads_out = ens.leads - window + 1;
    let mut out = EnsembleForecast::zeros(
        ens.grid.clone(),
        ens.members,
        leads_out,
        ens.prognostic_channels.clone(),
        ens.diagnostic_channels.clone(),
        ens.init_time,
        ens.seed,
    );
    let ncell = ens.grid.ncell();
    for m in 0..ens.members {
        for t in 1..=leads_out {
            for c in 0..ens.prognostic_channels.len() {
                let mut acc = vec![0.0f64; ncell];
                for dt in 0..window {
                    for (a, &v) in acc.iter_mut().zip(ens.prog_values(m, t + dt, c)) {
                        *a += v as f64;
                    }
                }
                let i = out.prog_idx(m, t, c);
                for (k, a) in acc.iter().enumerate() {
                    out.prog[i + k] = (a / window as f64) as f32;
                }
            }
            for c in 0..ens.diagnostic_channels.len() {
                let mut acc = vec![0.0f64; ncell];
                for dt in 0..window {
                    for (a, &v) in acc.iter_mut().zip(ens.diag_values(m, t + dt, c)) {
                        *a += v as f64;
                    }
                }
                let i = out.diag_idx(m, t, c);
                for (k, a) in acc.iter().enumerate() {
                    out.diag[i + k] = (a / window as f64) as f32;
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// On-disk layout: one GEMF per member plus a JSON manifest
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastManifest {
    pub nlat: usize,
    pub nlon: usize,
    pub members: usize,
    pub leads: usize,
    pub init_time: i64,
    pub seed: u64,
    pub prognostic_channels: Vec<String>,
    pub diagnostic_channels: Vec<String>,
    pub files: Vec<String>,
}

/// Write one GEMF per member (prognostic then diagnostic channels per
/// lead) plus `manifest.json`; returns the manifest path.
pub fn write_forecast(ens: &EnsembleForecast, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut channels = ens.prognostic_channels.clone();
    channels.extend(ens.diagnostic_channels.iter().cloned());
    let mut files = Vec::with_capacity(ens.members);
    for m in 0..ens.members {
        let name = format!("member_{m:03}.gemf");
        let mut fields = Vec::with_capacity(ens.leads);
        for t in 1..=ens.leads {
            let mut data = Vec::with_capacity(channels.len() * ens.grid.ncell());
            for c in 0..ens.prognostic_channels.len() {
                data.extend_from_slice(ens.prog_values(m, t, c));
            }
            for c in 0..ens.diagnostic_channels.len() {
                data.extend_from_slice(ens.diag_values(m, t, c));
            }
            fields.push(Field::new(
                ens.grid.clone(),
                channels.clone(),
                data,
                ens.lead_time_tag(t),
            )?);
        }
        gemf::write_field_file(&fields, dir.join(&name))?;
        files.push(name);
    }
    let manifest = ForecastManifest {
        nlat: ens.grid.nlat(),
        nlon: ens.grid.nlon(),
        members: ens.members,
        leads: ens.leads,
        init_time: ens.init_time,
        seed: ens.seed,
        prognostic_channels: ens.prognostic_channels.clone(),
        diagnostic_channels: ens.diagnostic_channels.clone(),
        files,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn read_forecast(manifest_path: &Path) -> Result<EnsembleForecast> {
    let manifest: ForecastManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let grid = crate::grid::make_grid(manifest.nlat, manifest.nlon)?;
    let mut ens = EnsembleForecast::zeros(
        grid.clone(),
        manifest.members,
        manifest.leads,
        manifest.prognostic_channels.clone(),
        manifest.diagnostic_channels.clone(),
        manifest.init_time,
        manifest.seed,
    );
    if manifest.files.len() != manifest.members {
        return Err(GemError::MalformedHeader(format!(
            "manifest lists {} files for {} members",
            manifest.files.len(),
            manifest.members
        )));
    }
    for (m, name) in manifest.files.iter().enumerate() {
        let fields = gemf::read_field_file(dir.join(name))?;
        if fields.len() != manifest.leads {
            return Err(GemError::ShapeMismatch(format!(
                "member file {name} has {} leads, manifest says {}",
                fields.len(),
                manifest.leads
            )));
        }
        for (t, f) in fields.iter().enumerate() {
            let lead = t + 1;
            if f.time_tag() != ens.lead_time_tag(lead) {
                return Err(GemError::ShapeMismatch(format!(
                    "member file {name} lead {lead} tagged {} (expected {})",
                    f.time_tag(),
                    ens.lead_time_tag(lead)
                )));
            }
            let nprog = manifest.prognostic_channels.len();
            for c in 0..nprog {
                let i = ens.prog_idx(m, lead, c);
                let n = grid.ncell();
                ens.prog[i..i + n].copy_from_slice(f.channel(c));
            }
            for c in 0..manifest.diagnostic_channels.len() {
                let i = ens.diag_idx(m, lead, c);
                let n = grid.ncell();
                ens.diag[i..i + n].copy_from_slice(f.channel(nprog + c));
            }
        }
    }
    Ok(ens)
}
