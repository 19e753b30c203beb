//! Proper scores and the composite training objective: fair CRPS at
//! pixel and field level, spectral log-power CRPS, pinball quantile
//! score, and skill relative to a reference.

use std::sync::Arc;

use crate::error::{GemError, Result};
use crate::grid::{Field, WeightField};
use crate::sht::{degree_power, ShtPlan};
use crate::tape::fair_crps_weighted;

/// Per-channel standardization constants (training-split statistics).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(nchan: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; nchan],
            std: vec![1.0; nchan],
        }
    }

    /// Estimate from a set of fields, one entry per channel. Standard
    /// deviations are floored to keep standardization invertible.
    pub fn estimate(fields: &[&Field]) -> Self {
        let nchan = fields[0].nchan();
        let mut mean = vec![0.0; nchan];
        let mut var = vec![0.0; nchan];
        let mut count = 0usize;
        for f in fields {
            count += f.grid().ncell();
            for c in 0..nchan {
                for &v in f.channel(c) {
                    mean[c] += v as f64;
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        for f in fields {
            for c in 0..nchan {
                for &v in f.channel(c) {
                    let d = v as f64 - mean[c];
                    var[c] += d * d;
                }
            }
        }
        let std = var
            .iter()
            .map(|&v| (v / count as f64).sqrt().max(1e-6))
            .collect();
        ChannelStats { mean, std }
    }
}

/// Fair CRPS of a scalar ensemble:
/// `(1/S) sum_n |x_n - x| - 1/(2 S (S-1)) sum_{n != n'} |x_n - x_n'|`.
pub fn fair_crps(samples: &[f64], obs: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(GemError::EnsembleTooSmall {
            s: samples.len(),
            min: 2,
        });
    }
    let members: Vec<&[f64]> = samples.iter().map(std::slice::from_ref).collect();
    Ok(fair_crps_weighted(&members, &[obs], &[1.0], true))
}

/// Area-weighted mean of pointwise fair CRPS for one channel.
pub fn fair_crps_field(
    members: &[&Field],
    obs: &Field,
    weights: &WeightField,
    channel: &str,
    mask: Option<&[bool]>,
) -> Result<f64> {
    if members.len() < 2 {
        return Err(GemError::EnsembleTooSmall {
            s: members.len(),
            min: 2,
        });
    }
    for m in members {
        if m.grid() != obs.grid() {
            return Err(GemError::GridMismatch(
                "ensemble member grid differs from observation grid".to_string(),
            ));
        }
    }
    if obs.grid() != weights.grid() {
        return Err(GemError::GridMismatch(
            "weight grid differs from observation grid".to_string(),
        ));
    }
    let c = obs.channel_index(channel)?;
    let obs_vals: Vec<f64> = obs.channel(c).iter().map(|&v| v as f64).collect();
    let member_vals: Vec<Vec<f64>> = members
        .iter()
        .map(|m| m.channel(c).iter().map(|&v| v as f64).collect())
        .collect();
    let member_refs: Vec<&[f64]> = member_vals.iter().map(|v| v.as_slice()).collect();
    let w = masked_weights(weights.values(), mask)?;
    Ok(fair_crps_weighted(&member_refs, &obs_vals, &w, true))
}

pub(crate) fn masked_weights(weights: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let w: Vec<f64> = match mask {
        None => weights.to_vec(),
        Some(m) => weights
            .iter()
            .zip(m)
            .map(|(&w, &keep)| if keep { w } else { 0.0 })
            .collect(),
    };
    if w.iter().sum::<f64>() <= 0.0 {
        return Err(GemError::EmptyMask);
    }
    Ok(w)
}

/// Degree weights for the spectral term: `1/l` for `l >= 1`, zero for the
/// mean component.
pub fn spectral_degree_weights(l_max: usize) -> Arc<Vec<f64>> {
    let mut w = vec![0.0; l_max + 1];
    for (l, slot) in w.iter_mut().enumerate().skip(1) {
        *slot = 1.0 / l as f64;
    }
    Arc::new(w)
}

pub const POWER_FLOOR: f64 = 1e-20;

/// `sum_{l=1..l_max} (1/l) fCRPS({log P_l(member)}, log P_l(obs))`,
/// powers clamped at [`POWER_FLOOR`] before the log.
pub fn spectral_log_crps(
    members: &[&Field],
    obs: &Field,
    plan: &ShtPlan,
    channel: &str,
) -> Result<f64> {
    if members.len() < 2 {
        return Err(GemError::EnsembleTooSmall {
            s: members.len(),
            min: 2,
        });
    }
    let log_p = |f: &Field| -> Result<Vec<f64>> {
        let p = degree_power(&plan.analyze(f, channel)?);
        Ok(p.p.iter().map(|&v| v.max(POWER_FLOOR).ln()).collect())
    };
    let obs_logp = log_p(obs)?;
    let member_logp: Vec<Vec<f64>> = members
        .iter()
        .map(|m| log_p(m))
        .collect::<Result<Vec<_>>>()?;
    let member_refs: Vec<&[f64]> = member_logp.iter().map(|v| v.as_slice()).collect();
    let w = spectral_degree_weights(plan.l_max());
    Ok(fair_crps_weighted(&member_refs, &obs_logp, &w, false))
}

/// Ensemble samples for one forecast case, indexed `[lead][member]`.
pub struct CaseSamples<'a> {
    pub prog: Vec<Vec<&'a Field>>,
    pub diag: Vec<Vec<&'a Field>>,
}

/// Composite objective over a rollout:
/// mean over leads of (prognostic field CRPS + diagnostic field CRPS +
/// lambda * sum over prognostic channels of spectral log-power CRPS).
/// Pixel terms average over channels; all terms are computed on
/// standardized values when stats are provided.
pub fn composite_loss(
    samples: &CaseSamples,
    truth_x: &[&Field],
    truth_y: &[&Field],
    weights: &WeightField,
    plan: Option<&ShtPlan>,
    lambda: f64,
    stats_x: Option<&ChannelStats>,
    stats_y: Option<&ChannelStats>,
) -> Result<f64> {
    let leads = samples.prog.len();
    if leads == 0 || truth_x.len() != leads || truth_y.len() != leads {
        return Err(GemError::ShapeMismatch(
            "composite loss needs equal lead counts for samples and truth".to_string(),
        ));
    }
    let mut total = 0.0;
    for t in 0..leads {
        total += per_lead_loss(
            &samples.prog[t],
            &samples.diag[t],
            truth_x[t],
            truth_y[t],
            weights,
            plan,
            lambda,
            stats_x,
            stats_y,
        )?;
    }
    Ok(total / leads as f64)
}

#[allow(clippy::too_many_arguments)]
fn per_lead_loss(
    prog_members: &[&Field],
    diag_members: &[&Field],
    truth_x: &Field,
    truth_y: &Field,
    weights: &WeightField,
    plan: Option<&ShtPlan>,
    lambda: f64,
    stats_x: Option<&ChannelStats>,
    stats_y: Option<&ChannelStats>,
) -> Result<f64> {
    let w = weights.values();
    let mut loss = standardized_channel_mean_crps(prog_members, truth_x, w, stats_x)?;
    loss += standardized_channel_mean_crps(diag_members, truth_y, w, stats_y)?;
    if lambda != 0.0 {
        let plan = plan.ok_or_else(|| {
            GemError::Config("spectral weight set but no SHT plan supplied".to_string())
        })?;
        for name in truth_x.channels() {
            // The spectral term is invariant to per-channel affine
            // standardization for l >= 1, so score raw values.
            loss += lambda * spectral_log_crps(prog_members, truth_x, plan, name)?;
        }
    }
    Ok(loss)
}

fn standardized_channel_mean_crps(
    members: &[&Field],
    truth: &Field,
    weights: &[f64],
    stats: Option<&ChannelStats>,
) -> Result<f64> {
    if members.len() < 2 {
        return Err(GemError::EnsembleTooSmall {
            s: members.len(),
            min: 2,
        });
    }
    let nchan = truth.nchan();
    let mut acc = 0.0;
    for c in 0..nchan {
        let (mu, sd) = match stats {
            Some(s) => (s.mean[c], s.std[c]),
            None => (0.0, 1.0),
        };
        let obs: Vec<f64> = truth
            .channel(c)
            .iter()
            .map(|&v| (v as f64 - mu) / sd)
            .collect();
        let member_vals: Vec<Vec<f64>> = members
            .iter()
            .map(|m| {
                m.channel(c)
                    .iter()
                    .map(|&v| (v as f64 - mu) / sd)
                    .collect()
            })
            .collect();
        let member_refs: Vec<&[f64]> = member_vals.iter().map(|v| v.as_slice()).collect();
        acc += fair_crps_weighted(&member_refs, &obs, weights, true);
    }
    Ok(acc / nchan as f64)
}

/// Pinball loss `(tau - 1{obs < q}) (obs - q)`.
pub fn quantile_score(q: f64, obs: f64, tau: f64) -> Result<f64> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(GemError::InvalidTau(tau));
    }
    let ind = if obs < q { 1.0 } else { 0.0 };
    Ok((tau - ind) * (obs - q))
}

/// Empirical quantile with midpoint plotting positions `(i+0.5)/S`,
/// linear interpolation, clamped at the extremes.
pub fn ensemble_quantile(samples: &[f64], tau: f64) -> f64 {
    assert!(!samples.is_empty(), "quantile of an empty ensemble");
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let s = sorted.len();
    let pos = tau * s as f64 - 0.5;
    if pos <= 0.0 {
        return sorted[0];
    }
    if pos >= (s - 1) as f64 {
        return sorted[s - 1];
    }
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
}

/// `1 - score/reference`; positive beats the reference.
pub fn skill_score(score_fc: f64, score_ref: f64) -> Result<f64> {
    if score_ref <= 0.0 {
        return Err(GemError::NonpositiveReference(score_ref));
    }
    Ok(1.0 - score_fc / score_ref)
}

/// One row of the verification table.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub variable: String,
    pub lead_days: usize,
    pub window_days: usize,
    pub metric: String,
    pub domain: String,
    pub value: f64,
}

/// Per-(variable, lead, metric) verification scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn push(
        &mut self,
        variable: &str,
        lead_days: usize,
        window_days: usize,
        metric: &str,
        domain: &str,
        value: f64,
    ) {
        self.rows.push(ScoreRow {
            variable: variable.to_string(),
            lead_days,
            window_days,
            metric: metric.to_string(),
            domain: domain.to_string(),
            value,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable,lead_days,window_days,metric,domain,value\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.10e}\n",
                r.variable, r.lead_days, r.window_days, r.metric, r.domain, r.value
            ));
        }
        out
    }

    pub fn get(&self, variable: &str, lead: usize, metric: &str, domain: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.variable == variable
                    && r.lead_days == lead
                    && r.metric == metric
                    && r.domain == domain
            })
            .map(|r| r.value)
    }
}
