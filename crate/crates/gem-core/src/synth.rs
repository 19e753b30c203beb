//! Synthetic toy atmosphere: a continuous-time diurnal cycle over slow
//! stochastic anomalies.
//!
//! temperature(tau) = mean_state + anomaly(tau)
//!                    + diurnal_amplitude * sin(2 pi (tau/24h - lon/360))
//!
//! The anomaly advects eastward (semi-Lagrangian), diffuses (explicit
//! 5-point stencil, zero-flux at the poles), and is forced by an exact
//! Ornstein-Uhlenbeck update, so its stationary variance is
//! `noise_scale^2 * ou_timescale / 2` by construction. A second, much
//! slower OU channel plays the role of an SST-like field. The fine time
//! step resolves the diurnal cycle and provides the ground truth for
//! daily extrema.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GemError, Result};
use crate::grid::{Field, GridSpec};

/// Days per synthetic year (12 months of 30 days keeps day-of-year
/// arithmetic exact).
pub const YEAR_DAYS: usize = 360;

pub const CHANNEL_TEMPERATURE: &str = "temperature";
pub const CHANNEL_ANOMALY: &str = "anomaly";
pub const CHANNEL_SST: &str = "sst";

/// SST evolves on `SST_TIMESCALE_FACTOR * ou_timescale` with
/// `noise_scale / SST_NOISE_DIVISOR` forcing.
const SST_TIMESCALE_FACTOR: f64 = 10.0;
const SST_NOISE_DIVISOR: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub grid: GridSpec,
    /// Diurnal half-range per cell (K).
    pub diurnal_amplitude: Vec<f64>,
    /// Time-mean temperature per cell (K).
    pub mean_state: Vec<f64>,
    /// Eastward anomaly advection (cells/day).
    pub advection_cells_per_day: f64,
    /// Anomaly diffusion (cells^2/day).
    pub diffusion_cells2_per_day: f64,
    /// OU forcing amplitude (K/sqrt(day)).
    pub noise_scale: f64,
    /// OU relaxation time (days).
    pub ou_timescale_days: f64,
    pub seed: u64,
    /// Fine sampling interval; must divide 24.
    pub dt_fine_hours: f64,
}

impl SynthParams {
    /// Desk-scale defaults: warm equator, cold poles, stronger diurnal
    /// cycle over the land-analog mask.
    pub fn desk_default(grid: &GridSpec, seed: u64) -> Self {
        let land = land_analog_mask(grid);
        let ncell = grid.ncell();
        let nlon = grid.nlon();
        let mut mean_state = vec![0.0; ncell];
        let mut amplitude = vec![0.0; ncell];
        for i in 0..grid.nlat() {
            let coslat = grid.lat_centers()[i].to_radians().cos();
            for j in 0..nlon {
                let k = i * nlon + j;
                mean_state[k] = 255.0 + 33.0 * coslat;
                amplitude[k] = 4.0 + 4.0 * land[k] as f64;
            }
        }
        SynthParams {
            grid: grid.clone(),
            diurnal_amplitude: amplitude,
            mean_state,
            advection_cells_per_day: 6.0,
            diffusion_cells2_per_day: 1.5,
            noise_scale: 1.8,
            ou_timescale_days: 5.0,
            seed,
            dt_fine_hours: 1.0,
        }
    }

    pub fn steps_per_day(&self) -> usize {
        (24.0 / self.dt_fine_hours).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let spd = 24.0 / self.dt_fine_hours;
        if self.dt_fine_hours <= 0.0 || (spd - spd.round()).abs() > 1e-9 {
            return Err(GemError::Config(format!(
                "dt_fine_hours {} must divide 24",
                self.dt_fine_hours
            )));
        }
        if self.ou_timescale_days <= 0.0 {
            return Err(GemError::Config("ou_timescale must be positive".to_string()));
        }
        if self.diurnal_amplitude.iter().any(|&a| a < 0.0) {
            return Err(GemError::Config(
                "diurnal amplitude must be nonnegative".to_string(),
            ));
        }
        let ncell = self.grid.ncell();
        if self.diurnal_amplitude.len() != ncell || self.mean_state.len() != ncell {
            return Err(GemError::ShapeMismatch(
                "amplitude/mean fields must match the grid".to_string(),
            ));
        }
        let dt_days = self.dt_fine_hours / 24.0;
        let limit = 0.25;
        if self.diffusion_cells2_per_day * dt_days > limit {
            return Err(GemError::UnstableDiffusion {
                diffusion: self.diffusion_cells2_per_day,
                dt_days,
                limit,
            });
        }
        Ok(())
    }
}

/// Deterministic land-analog pattern in {0, 1}; doubles as the masked
/// verification domain.
pub fn land_analog_mask(grid: &GridSpec) -> Vec<f32> {
    let mut out = vec![0.0f32; grid.ncell()];
    for i in 0..grid.nlat() {
        let latr = grid.lat_centers()[i].to_radians();
        for j in 0..grid.nlon() {
            let lonr = grid.lon_centers()[j].to_radians();
            let v = (2.0 * lonr + 0.7).sin() * latr.cos()
                + 0.4 * (5.0 * lonr).sin() * (3.0 * latr + 1.0).sin();
            out[i * grid.nlon() + j] = if v > 0.15 { 1.0 } else { 0.0 };
        }
    }
    out
}

pub fn land_mask_bools(grid: &GridSpec) -> Vec<bool> {
    land_analog_mask(grid).iter().map(|&v| v > 0.5).collect()
}

/// Conditioning channels for an absolute day index: the static land
/// analog plus a seasonal phase that updates per lead.
pub fn conditioning_field(grid: &GridSpec, day: i64) -> Field {
    let land = land_analog_mask(grid);
    let doy = day.rem_euclid(YEAR_DAYS as i64) as f64;
    let season = (2.0 * std::f64::consts::PI * doy / YEAR_DAYS as f64).sin() as f32;
    let mut data = land;
    data.extend(std::iter::repeat(season).take(grid.ncell()));
    Field::new(
        grid.clone(),
        vec!["land".into(), "season".into()],
        data,
        24 * day,
    )
    .expect("conditioning field construction")
}

/// Fine-step integrator shared by the full-record and streaming paths.
struct Stepper {
    p: SynthParams,
    anomaly: Vec<f64>,
    sst: Vec<f64>,
    rng: ChaCha12Rng,
    scratch: Vec<f64>,
}

impl Stepper {
    fn new(p: &SynthParams) -> Result<Self> {
        p.validate()?;
        let ncell = p.grid.ncell();
        Ok(Stepper {
            p: p.clone(),
            anomaly: vec![0.0; ncell],
            sst: vec![0.0; ncell],
            rng: ChaCha12Rng::seed_from_u64(p.seed),
            scratch: vec![0.0; ncell],
        })
    }

    /// Advance the slow state by one fine step.
    fn step(&mut self) {
        let dt_days = self.p.dt_fine_hours / 24.0;
        let (nlat, nlon) = (self.p.grid.nlat(), self.p.grid.nlon());

        // Eastward semi-Lagrangian advection with periodic longitude.
        let shift = self.p.advection_cells_per_day * dt_days;
        if shift != 0.0 {
            let whole = shift.floor();
            let frac = shift - whole;
            let whole = whole as i64;
            for i in 0..nlat {
                let row = &self.anomaly[i * nlon..(i + 1) * nlon];
                let dst = &mut self.scratch[i * nlon..(i + 1) * nlon];
                for (j, d) in dst.iter_mut().enumerate() {
                    let src = j as i64 - whole;
                    let j0 = (src - 1).rem_euclid(nlon as i64) as usize;
                    let j1 = src.rem_euclid(nlon as i64) as usize;
                    *d = frac * row[j0] + (1.0 - frac) * row[j1];
                }
            }
            std::mem::swap(&mut self.anomaly, &mut self.scratch);
        }

        // Explicit diffusion, zero-flux across the poles.
        let ddt = self.p.diffusion_cells2_per_day * dt_days;
        if ddt != 0.0 {
            diffuse(&self.anomaly, &mut self.scratch, nlat, nlon, ddt);
            std::mem::swap(&mut self.anomaly, &mut self.scratch);
            diffuse(&self.sst, &mut self.scratch, nlat, nlon, ddt);
            std::mem::swap(&mut self.sst, &mut self.scratch);
        }

        // Exact OU relaxation + forcing; anomaly first, then SST, with a
        // fixed draw order for determinism.
        ou_step(
            &mut self.anomaly,
            self.p.ou_timescale_days,
            self.p.noise_scale,
            dt_days,
            &mut self.rng,
        );
        ou_step(
            &mut self.sst,
            SST_TIMESCALE_FACTOR * self.p.ou_timescale_days,
            self.p.noise_scale / SST_NOISE_DIVISOR,
            dt_days,
            &mut self.rng,
        );
    }

    /// Temperature field at the current state for absolute hour `tau`.
    fn temperature(&self, tau_hours: f64) -> Vec<f64> {
        let (nlat, nlon) = (self.p.grid.nlat(), self.p.grid.nlon());
        let mut out = vec![0.0; nlat * nlon];
        for i in 0..nlat {
            for j in 0..nlon {
                let k = i * nlon + j;
                let phase = 2.0 * std::f64::consts::PI
                    * (tau_hours / 24.0 - self.p.grid.lon_centers()[j] / 360.0);
                out[k] =
                    self.p.mean_state[k] + self.anomaly[k] + self.p.diurnal_amplitude[k] * phase.sin();
            }
        }
        out
    }
}

fn diffuse(src: &[f64], dst: &mut [f64], nlat: usize, nlon: usize, ddt: f64) {
    for i in 0..nlat {
        for j in 0..nlon {
            let k = i * nlon + j;
            let c = src[k];
            let n = if i > 0 { src[(i - 1) * nlon + j] } else { c };
            let s = if i + 1 < nlat { src[(i + 1) * nlon + j] } else { c };
            let w = src[i * nlon + (j + nlon - 1) % nlon];
            let e = src[i * nlon + (j + 1) % nlon];
            dst[k] = c + ddt * (n + s + e + w - 4.0 * c);
        }
    }
}

fn ou_step(state: &mut [f64], timescale: f64, noise: f64, dt_days: f64, rng: &mut ChaCha12Rng) {
    let decay = (-dt_days / timescale).exp();
    let forcing = noise * (timescale / 2.0 * (1.0 - (-2.0 * dt_days / timescale).exp())).sqrt();
    for v in state.iter_mut() {
        let xi: f64 = StandardNormal.sample(rng);
        *v = *v * decay + forcing * xi;
    }
}

/// Fine-resolution trajectory: the continuous-time oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRecord {
    pub params: SynthParams,
    pub n_days: usize,
    /// `[sample][cell]`, length `n_days * steps_per_day + 1`.
    pub temperature: Vec<f64>,
    pub anomaly: Vec<f64>,
    pub sst: Vec<f64>,
}

impl TruthRecord {
    pub fn n_samples(&self) -> usize {
        self.n_days * self.params.steps_per_day() + 1
    }

    pub fn sample(&self, idx: usize) -> &[f64] {
        let n = self.params.grid.ncell();
        &self.temperature[idx * n..(idx + 1) * n]
    }

    /// Fine series as GEMF-writable fields (one per sample).
    pub fn to_fields(&self) -> Vec<Field> {
        let n = self.params.grid.ncell();
        let dt = self.params.dt_fine_hours;
        (0..self.n_samples())
            .map(|s| {
                let mut data = Vec::with_capacity(3 * n);
                data.extend(self.temperature[s * n..(s + 1) * n].iter().map(|&v| v as f32));
                data.extend(self.anomaly[s * n..(s + 1) * n].iter().map(|&v| v as f32));
                data.extend(self.sst[s * n..(s + 1) * n].iter().map(|&v| v as f32));
                Field::new(
                    self.params.grid.clone(),
                    vec![
                        CHANNEL_TEMPERATURE.into(),
                        CHANNEL_ANOMALY.into(),
                        CHANNEL_SST.into(),
                    ],
                    data,
                    (s as f64 * dt).round() as i64,
                )
                .expect("truth record field")
            })
            .collect()
    }
}

/// Integrate the toy system for `n_days`, keeping the full fine series.
pub fn simulate(p: &SynthParams, n_days: usize) -> Result<TruthRecord> {
    if n_days == 0 {
        return Err(GemError::PartialDay { hours: 0.0 });
    }
    let mut stepper = Stepper::new(p)?;
    let ncell = p.grid.ncell();
    let nsamples = n_days * p.steps_per_day() + 1;
    let mut temperature = Vec::with_capacity(nsamples * ncell);
    let mut anomaly = Vec::with_capacity(nsamples * ncell);
    let mut sst = Vec::with_capacity(nsamples * ncell);
    for s in 0..nsamples {
        let tau = s as f64 * p.dt_fine_hours;
        temperature.extend(stepper.temperature(tau));
        anomaly.extend_from_slice(&stepper.anomaly);
        sst.extend_from_slice(&stepper.sst);
        if s + 1 < nsamples {
            stepper.step();
        }
    }
    Ok(TruthRecord {
        params: p.clone(),
        n_days,
        temperature,
        anomaly,
        sst,
    })
}

/// Daily prognostic snapshots and diagnostic extrema derived from a
/// truth record.
///
/// `x[d]` is the full state at hour `24 d` (0..=n_days entries);
/// `y[d]` holds {tmin, tmax, tmean} of day `d` computed over the fine
/// samples in `[24 d, 24 (d+1))`, tagged with the hour at which it
/// becomes known (the end of the day). A forecast at lead `t` from init
/// day `d0` therefore targets `x[d0 + t]` and `y[d0 + t - 1]`.
pub fn extract_daily(r: &TruthRecord) -> Result<(Vec<Field>, Vec<Field>)> {
    if r.n_days < 1 {
        return Err(GemError::PartialDay {
            hours: r.n_days as f64 * 24.0,
        });
    }
    let p = &r.params;
    let ncell = p.grid.ncell();
    let spd = p.steps_per_day();

    let x: Vec<Field> = (0..=r.n_days)
        .map(|d| {
            let s = d * spd;
            let mut data = Vec::with_capacity(3 * ncell);
            data.extend(r.temperature[s * ncell..(s + 1) * ncell].iter().map(|&v| v as f32));
            data.extend(r.anomaly[s * ncell..(s + 1) * ncell].iter().map(|&v| v as f32));
            data.extend(r.sst[s * ncell..(s + 1) * ncell].iter().map(|&v| v as f32));
            Field::new(
                p.grid.clone(),
                vec![
                    CHANNEL_TEMPERATURE.into(),
                    CHANNEL_ANOMALY.into(),
                    CHANNEL_SST.into(),
                ],
                data,
                24 * d as i64,
            )
            .expect("daily snapshot")
        })
        .collect();

    let y: Vec<Field> = (0..r.n_days)
        .map(|d| daily_extrema_field(p, &r.temperature, d, spd, ncell))
        .collect();

    Ok((x, y))
}

fn daily_extrema_field(
    p: &SynthParams,
    temperature: &[f64],
    day: usize,
    spd: usize,
    ncell: usize,
) -> Field {
    let mut tmin = vec![f64::INFINITY; ncell];
    let mut tmax = vec![f64::NEG_INFINITY; ncell];
    let mut tsum = vec![0.0; ncell];
    for s in day * spd..(day + 1) * spd {
        let snap = &temperature[s * ncell..(s + 1) * ncell];
        for k in 0..ncell {
            let v = snap[k];
            if v < tmin[k] {
                tmin[k] = v;
            }
            if v > tmax[k] {
                tmax[k] = v;
            }
            tsum[k] += v;
        }
    }
    let mut data = Vec::with_capacity(3 * ncell);
    data.extend(tmin.iter().map(|&v| v as f32));
    data.extend(tmax.iter().map(|&v| v as f32));
    data.extend(tsum.iter().map(|&v| (v / spd as f64) as f32));
    Field::new(
        p.grid.clone(),
        vec!["tmin".into(), "tmax".into(), "tmean".into()],
        data,
        24 * (day as i64 + 1),
    )
    .expect("daily extrema")
}

/// Mean over days of (min over k equally spaced snapshots - true daily
/// min), per cell. Nonnegative in expectation; zero when every fine
/// sample is a snapshot.
pub fn snapshot_extrema_gap(r: &TruthRecord, k_snapshots: usize) -> Result<Vec<f64>> {
    let spd = r.params.steps_per_day();
    if k_snapshots == 0 || spd % k_snapshots != 0 {
        return Err(GemError::Config(format!(
            "k_snapshots {k_snapshots} must divide the {spd} fine steps per day"
        )));
    }
    let stride = spd / k_snapshots;
    let ncell = r.params.grid.ncell();
    let mut gap = vec![0.0; ncell];
    for d in 0..r.n_days {
        for k in 0..ncell {
            let mut true_min = f64::INFINITY;
            let mut snap_min = f64::INFINITY;
            for s in 0..spd {
                let v = r.temperature[(d * spd + s) * ncell + k];
                if v < true_min {
                    true_min = v;
                }
                if s % stride == 0 && v < snap_min {
                    snap_min = v;
                }
            }
            gap[k] += snap_min - true_min;
        }
    }
    for g in gap.iter_mut() {
        *g /= r.n_days as f64;
    }
    Ok(gap)
}

/// Daily archive produced without retaining the fine series; the
/// integrator and extrema logic are shared with [`simulate`], so for
/// `spinup_days = 0` the output matches `extract_daily(simulate(..))`
/// bit for bit.
#[derive(Debug, Clone)]
pub struct DailyArchive {
    pub x: Vec<Field>,
    pub y: Vec<Field>,
}

pub fn simulate_daily_archive(
    p: &SynthParams,
    n_days: usize,
    spinup_days: usize,
) -> Result<DailyArchive> {
    if n_days == 0 {
        return Err(GemError::PartialDay { hours: 0.0 });
    }
    let mut stepper = Stepper::new(p)?;
    let ncell = p.grid.ncell();
    let spd = p.steps_per_day();
    for _ in 0..spinup_days * spd {
        stepper.step();
    }

    let mut x = Vec::with_capacity(n_days + 1);
    let mut y = Vec::with_capacity(n_days);
    let snapshot = |stepper: &Stepper, day: usize| -> Field {
        let tau = 24.0 * (spinup_days + day) as f64;
        let t = stepper.temperature(tau);
        let mut data = Vec::with_capacity(3 * ncell);
        data.extend(t.iter().map(|&v| v as f32));
        data.extend(stepper.anomaly.iter().map(|&v| v as f32));
        data.extend(stepper.sst.iter().map(|&v| v as f32));
        Field::new(
            p.grid.clone(),
            vec![
                CHANNEL_TEMPERATURE.into(),
                CHANNEL_ANOMALY.into(),
                CHANNEL_SST.into(),
            ],
            data,
            24 * day as i64,
        )
        .expect("daily snapshot")
    };

    let mut day_temps = vec![0.0; spd * ncell];
    for d in 0..n_days {
        x.push(snapshot(&stepper, d));
        for s in 0..spd {
            let tau = 24.0 * (spinup_days + d) as f64 + s as f64 * p.dt_fine_hours;
            day_temps[s * ncell..(s + 1) * ncell].copy_from_slice(&stepper.temperature(tau));
            stepper.step();
        }
        y.push(daily_extrema_field(p, &day_temps, 0, spd, ncell));
        let tag = 24 * (d as i64 + 1);
        y.last_mut().unwrap().set_time_tag(tag);
    }
    x.push(snapshot(&stepper, n_days));
    Ok(DailyArchive { x, y })
}
