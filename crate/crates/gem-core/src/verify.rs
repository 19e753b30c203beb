//! Verification driver: CRPS and quantile scores with skill against the
//! climatological baseline, over rolling windows, global and masked
//! domains, pooled across forecast initializations with lag-1-adjusted
//! standard errors.

use crate::error::{GemError, Result};
use crate::grid::{latitude_weights, Field, WeightField};
use crate::rollout::{rolling_window_mean_fields, rolling_window_mean_forecast, EnsembleForecast};
use crate::scoring::{
    ensemble_quantile, fair_crps_field, masked_weights, quantile_score, skill_score, ScoreTable,
};
use crate::sht::{degree_power, spectra_ratio, ShtPlan};

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Rolling-mean windows in days (1 = daily fields).
    pub windows: Vec<usize>,
    pub quantile_hi: f64,
    pub quantile_lo: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            windows: vec![1, 7],
            quantile_hi: 0.95,
            quantile_lo: 0.05,
        }
    }
}

/// Left-tail variables score their canonical extreme at the low
/// quantile; everything else uses the high one.
fn canonical_tail_is_low(channel: &str) -> bool {
    channel.contains("min")
}

/// Area-weighted mean pinball score of the ensemble quantile.
fn quantile_score_field(
    members: &[&Field],
    obs: &Field,
    weights: &WeightField,
    channel: &str,
    tau: f64,
    mask: Option<&[bool]>,
) -> Result<f64> {
    let c = obs.channel_index(channel)?;
    let ncell = obs.grid().ncell();
    let w = masked_weights(weights.values(), mask)?;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut samples = vec![0.0; members.len()];
    for k in 0..ncell {
        if w[k] == 0.0 {
            continue;
        }
        for (m, f) in members.iter().enumerate() {
            samples[m] = f.channel(c)[k] as f64;
        }
        let q = ensemble_quantile(&samples, tau);
        num += w[k] * quantile_score(q, obs.channel(c)[k] as f64, tau)?;
        den += w[k];
    }
    Ok(num / den)
}

/// Lag-1-autocorrelation-adjusted standard error of the mean.
pub fn lag1_adjusted_se(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let mut num = 0.0;
    for k in 0..n - 1 {
        num += (values[k] - mean) * (values[k + 1] - mean);
    }
    let den = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    let r1 = if den > 0.0 { (num / den).clamp(-0.99, 0.99) } else { 0.0 };
    let n_eff = (n as f64 * (1.0 - r1) / (1.0 + r1)).max(1.0);
    (var / n_eff).sqrt()
}

/// Scores for a set of initializations. Forecast and climatology
/// ensembles must pair up by init time; truth series are the daily
/// archive fields (`x[d]` tagged 24d, `y[d]` tagged 24(d+1)).
pub fn verify(
    forecasts: &[&EnsembleForecast],
    climos: &[&EnsembleForecast],
    truth_x: &[Field],
    truth_y: &[Field],
    mask: Option<&[bool]>,
    opts: &VerifyOptions,
) -> Result<ScoreTable> {
    if forecasts.is_empty() || forecasts.len() != climos.len() {
        return Err(GemError::ShapeMismatch(
            "need one climatology ensemble per forecast ensemble".to_string(),
        ));
    }
    let grid = forecasts[0].grid.clone();
    let weights = latitude_weights(&grid);
    let leads = forecasts
        .iter()
        .zip(climos.iter())
        .map(|(f, c)| f.leads.min(c.leads))
        .min()
        .unwrap();
    for (f, c) in forecasts.iter().zip(climos) {
        if f.init_time != c.init_time {
            return Err(GemError::ShapeMismatch(format!(
                "forecast init {} has climatology init {}",
                f.init_time, c.init_time
            )));
        }
        if f.grid != grid || c.grid != grid {
            return Err(GemError::GridMismatch(
                "all ensembles must share one grid".to_string(),
            ));
        }
    }

    let mut channels: Vec<(String, bool)> = Vec::new(); // (name, diagnostic?)
    for c in &forecasts[0].prognostic_channels {
        channels.push((c.clone(), false));
    }
    for c in &forecasts[0].diagnostic_channels {
        channels.push((c.clone(), true));
    }

    let mut domains: Vec<(&str, Option<&[bool]>)> = vec![("global", None)];
    if let Some(m) = mask {
        domains.push(("masked", Some(m)));
    }

    let mut table = ScoreTable::default();
    for &window in &opts.windows {
        if window == 0 || window > leads {
            return Err(GemError::WindowTooLong {
                window,
                len: leads,
            });
        }
        let leads_w = leads - window + 1;

        // Per-init windowed ensembles and truth series.
        let mut fc_w = Vec::with_capacity(forecasts.len());
        let mut cl_w = Vec::with_capacity(forecasts.len());
        let mut truth_w: Vec<(Vec<Field>, Vec<Field>)> = Vec::with_capacity(forecasts.len());
        for (f, c) in forecasts.iter().zip(climos) {
            fc_w.push(rolling_window_mean_forecast(f, window)?);
            cl_w.push(rolling_window_mean_forecast(c, window)?);
            let d0 = f.init_time / 24;
            let prog_series: Vec<Field> = (1..=leads)
                .map(|t| {
                    truth_x
                        .get((d0 + t as i64) as usize)
                        .cloned()
                        .ok_or_else(|| {
                            GemError::ShapeMismatch(format!(
                                "truth archive misses day {}",
                                d0 + t as i64
                            ))
                        })
                })
                .collect::<Result<_>>()?;
            let diag_series: Vec<Field> = (1..=leads)
                .map(|t| {
                    truth_y
                        .get((d0 + t as i64 - 1) as usize)
                        .cloned()
                        .ok_or_else(|| {
                            GemError::ShapeMismatch(format!(
                                "diagnostic archive misses day {}",
                                d0 + t as i64 - 1
                            ))
                        })
                })
                .collect::<Result<_>>()?;
            truth_w.push((
                rolling_window_mean_fields(&prog_series, window)?,
                rolling_window_mean_fields(&diag_series, window)?,
            ));
        }

        for (channel, is_diag) in &channels {
            let tau_skill = if canonical_tail_is_low(channel) {
                opts.quantile_lo
            } else {
                opts.quantile_hi
            };
            for lead in 1..=leads_w {
                for (domain, dmask) in &domains {
                    let mut crps_fc_series = Vec::with_capacity(forecasts.len());
                    let mut crps_cl_series = Vec::with_capacity(forecasts.len());
                    let mut qhi_fc = Vec::with_capacity(forecasts.len());
                    let mut qlo_fc = Vec::with_capacity(forecasts.len());
                    let mut qs_cl_series = Vec::with_capacity(forecasts.len());
                    for i in 0..forecasts.len() {
                        let truth = if *is_diag {
                            &truth_w[i].1[lead - 1]
                        } else {
                            &truth_w[i].0[lead - 1]
                        };
                        let collect =
                            |ens: &EnsembleForecast| -> Result<Vec<Field>> {
                                Ok((0..ens.members)
                                    .map(|m| {
                                        if *is_diag {
                                            ens.diag_field(m, lead)
                                        } else {
                                            ens.prog_field(m, lead)
                                        }
                                    })
                                    .collect())
                            };
                        let fc_fields = collect(&fc_w[i])?;
                        let cl_fields = collect(&cl_w[i])?;
                        let fc_refs: Vec<&Field> = fc_fields.iter().collect();
                        let cl_refs: Vec<&Field> = cl_fields.iter().collect();
                        crps_fc_series.push(fair_crps_field(
                            &fc_refs, truth, &weights, channel, *dmask,
                        )?);
                        crps_cl_series.push(fair_crps_field(
                            &cl_refs, truth, &weights, channel, *dmask,
                        )?);
                        qhi_fc.push(quantile_score_field(
                            &fc_refs,
                            truth,
                            &weights,
                            channel,
                            opts.quantile_hi,
                            *dmask,
                        )?);
                        qlo_fc.push(quantile_score_field(
                            &fc_refs,
                            truth,
                            &weights,
                            channel,
                            opts.quantile_lo,
                            *dmask,
                        )?);
                        qs_cl_series.push(quantile_score_field(
                            &cl_refs, truth, &weights, channel, tau_skill, *dmask,
                        )?);
                    }
                    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                    let crps_fc = mean(&crps_fc_series);
                    let crps_cl = mean(&crps_cl_series);
                    table.push(channel, lead, window, "crps", domain, crps_fc);
                    table.push(
                        channel,
                        lead,
                        window,
                        "crps_skill",
                        domain,
                        skill_score(crps_fc, crps_cl)?,
                    );
                    table.push(channel, lead, window, "qs95", domain, mean(&qhi_fc));
                    table.push(channel, lead, window, "qs05", domain, mean(&qlo_fc));
                    let qs_fc = if canonical_tail_is_low(channel) {
                        mean(&qlo_fc)
                    } else {
                        mean(&qhi_fc)
                    };
                    table.push(
                        channel,
                        lead,
                        window,
                        "qs_skill",
                        domain,
                        skill_score(qs_fc, mean(&qs_cl_series))?,
                    );
                    if forecasts.len() >= 2 {
                        table.push(
                            channel,
                            lead,
                            window,
                            "crps_se",
                            domain,
                            lag1_adjusted_se(&crps_fc_series),
                        );
                    }
                }
            }
        }
    }
    Ok(table)
}

/// Per-degree CSV for spectra diagnostics: degree, wavelength (180/l),
/// truth power, member-mean power, and their ratio (blank where the
/// truth power is degenerate).
pub fn spectra_csv(
    plan: &ShtPlan,
    members: &[&Field],
    truth: &Field,
    channel: &str,
) -> Result<String> {
    let p_truth = degree_power(&plan.analyze(truth, channel)?);
    let mut p_mean = vec![0.0; plan.l_max() + 1];
    for m in members {
        let p = degree_power(&plan.analyze(m, channel)?);
        for (acc, v) in p_mean.iter_mut().zip(p.p) {
            *acc += v;
        }
    }
    for v in p_mean.iter_mut() {
        *v /= members.len() as f64;
    }
    let ratio = spectra_ratio(plan, members, truth, channel)?;
    let mut out = String::from("l,wavelength_deg,p_truth,p_model_mean,ratio\n");
    for l in 0..=plan.l_max() {
        let wavelength = if l == 0 {
            String::new()
        } else {
            format!("{:.6}", 180.0 / l as f64)
        };
        let r = ratio[l]
            .map(|v| format!("{v:.10e}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.10e},{:.10e},{}\n",
            l, wavelength, p_truth.p[l], p_mean[l], r
        ));
    }
    Ok(out)
}
