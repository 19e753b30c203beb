//! End-to-end training on a daily archive with the composite proper-
//! score objective, multi-sample ensembles, optional multi-lead rollout,
//! and a finite-difference gradient harness.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};
use crate::grid::latitude_weights;
use crate::model::{
    forward_graph, params_to_graph, sample_noise, standardize, Checkpoint, ModelConfig,
    ModelGeometry, ModelParams, StandardStats,
};
use crate::scoring::{spectral_degree_weights, ChannelStats, POWER_FLOOR};
use crate::sht::{degree_power, ShtPlan};
use crate::synth::{conditioning_field, DailyArchive};
use crate::tape::{Graph, NodeId, Tensor};

use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Ensemble size per lead during training (fair CRPS needs >= 2).
    pub samples_s: usize,
    /// Rollout length; gradients flow through the full unrolled chain
    /// with equal per-lead weights.
    pub rollout_l: usize,
    pub spectral_lambda: f64,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Fraction of archive days held out as a contiguous validation
    /// block at the end.
    pub val_fraction: f64,
    pub val_cases: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            samples_s: 2,
            rollout_l: 1,
            spectral_lambda: 0.1,
            lr_peak: 2e-3,
            warmup_steps: 100,
            total_steps: 1800,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 100,
            val_fraction: 0.15,
            val_cases: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_s < 2 {
            return Err(GemError::EnsembleTooSmall {
                s: self.samples_s,
                min: 2,
            });
        }
        if self.rollout_l == 0 {
            return Err(GemError::Config("rollout_l must be >= 1".to_string()));
        }
        if self.grad_clip <= 0.0 {
            return Err(GemError::Config("grad_clip must be positive".to_string()));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(GemError::Config(
                "batch_size and total_steps must be positive".to_string(),
            ));
        }
        if !(0.0..0.9).contains(&self.val_fraction) {
            return Err(GemError::Config(
                "val_fraction must lie in [0, 0.9)".to_string(),
            ));
        }
        Ok(())
    }

    /// Warmup then cosine decay to zero.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr_peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let total = self.total_steps.max(self.warmup_steps + 1);
        let frac = (step - self.warmup_steps) as f64 / (total - self.warmup_steps) as f64;
        self.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
    }
}

/// Training-split standardization statistics for all three channel
/// groups.
pub fn compute_standard_stats(
    archive: &DailyArchive,
    cfg: &ModelConfig,
    train_days: usize,
) -> StandardStats {
    let grid = archive.x[0].grid().clone();
    let x_refs: Vec<&crate::grid::Field> = archive.x[..=train_days].iter().collect();
    let y_refs: Vec<&crate::grid::Field> = archive.y[..train_days].iter().collect();
    let cond: Vec<crate::grid::Field> = (0..crate::synth::YEAR_DAYS.min(train_days).max(1))
        .map(|d| conditioning_field(&grid, d as i64))
        .collect();
    let c_refs: Vec<&crate::grid::Field> = cond.iter().collect();
    let _ = cfg;
    StandardStats {
        x: ChannelStats::estimate(&x_refs),
        y: ChannelStats::estimate(&y_refs),
        c: ChannelStats::estimate(&c_refs),
    }
}

/// Everything fixed across training steps.
pub struct TrainContext {
    pub geo: ModelGeometry,
    pub stats: StandardStats,
    pub plan: Option<ShtPlan>,
    /// Area weights repeated per prognostic / diagnostic channel.
    w_prog: Arc<Vec<f64>>,
    w_diag: Arc<Vec<f64>>,
    spec_weights: Arc<Vec<f64>>,
}

impl TrainContext {
    pub fn new(
        cfg: &ModelConfig,
        stats: StandardStats,
        lambda: f64,
    ) -> Result<Self> {
        let geo = ModelGeometry::new(cfg)?;
        let grid = cfg.grid()?;
        let w = latitude_weights(&grid);
        let repeat = |n: usize| {
            let mut v = Vec::with_capacity(n * w.values().len());
            for _ in 0..n {
                v.extend_from_slice(w.values());
            }
            Arc::new(v)
        };
        let plan = if lambda != 0.0 {
            let l_max = (cfg.nlat - 1).min(cfg.nlon / 2 - 1);
            Some(ShtPlan::new(&grid, l_max)?)
        } else {
            None
        };
        let spec_weights = match &plan {
            Some(p) => spectral_degree_weights(p.l_max()),
            None => Arc::new(Vec::new()),
        };
        Ok(TrainContext {
            geo,
            stats,
            plan,
            w_prog: repeat(cfg.c_x()),
            w_diag: repeat(cfg.c_y()),
            spec_weights,
        })
    }
}

/// Build the composite loss for one training case on the tape: unroll
/// `L` leads with `S` members from archive day `init_day`, score fair
/// CRPS on standardized prognostics and diagnostics, and add the
/// spectral log-power term when requested.
#[allow(clippy::too_many_arguments)]
pub fn build_case_loss(
    g: &mut Graph,
    p: &crate::model::ParamNodes,
    ctx: &TrainContext,
    archive: &DailyArchive,
    init_day: usize,
    samples_s: usize,
    rollout_l: usize,
    lambda: f64,
    noise_seed: u64,
) -> Result<NodeId> {
    let cfg = &ctx.geo.cfg;
    let ncell = cfg.nlat * cfg.nlon;
    let grid = archive.x[0].grid().clone();
    if init_day + rollout_l >= archive.x.len() || init_day + rollout_l > archive.y.len() {
        return Err(GemError::Config(format!(
            "case at day {init_day} with L={rollout_l} exceeds the archive"
        )));
    }

    let x0 = g.constant(Tensor::new(
        vec![cfg.c_x() * ncell],
        standardize(&archive.x[init_day], &ctx.stats.x),
    ));
    let y_prev_init: Option<Vec<f64>> = if cfg.condition_on_diagnostics {
        Some(if init_day >= 1 {
            standardize(&archive.y[init_day - 1], &ctx.stats.y)
        } else {
            vec![0.0; cfg.c_y() * ncell]
        })
    } else {
        None
    };

    // Per-member chained states.
    let mut states: Vec<NodeId> = vec![x0; samples_s];
    let mut prev_diag: Vec<Option<NodeId>> = vec![None; samples_s];
    let mut per_lead = Vec::with_capacity(rollout_l);

    for t in 1..=rollout_l {
        let cond_vec = standardize(
            &conditioning_field(&grid, init_day as i64 + t as i64),
            &ctx.stats.c,
        );
        let cond = g.constant(Tensor::new(vec![cond_vec.len()], cond_vec));
        let obs_x = Arc::new(standardize(&archive.x[init_day + t], &ctx.stats.x));
        let obs_y = Arc::new(standardize(&archive.y[init_day + t - 1], &ctx.stats.y));

        let mut prog_nodes = Vec::with_capacity(samples_s);
        let mut diag_nodes = Vec::with_capacity(samples_s);
        for m in 0..samples_s {
            let cond_full = if cfg.condition_on_diagnostics {
                let yprev = match prev_diag[m] {
                    Some(node) => node,
                    None => g.constant(Tensor::new(
                        vec![cfg.c_y() * ncell],
                        y_prev_init.clone().unwrap(),
                    )),
                };
                g.concat(cond, yprev)
            } else {
                cond
            };
            let z = sample_noise(noise_seed, m, t, cfg.noise_dim);
            let zn = g.constant(Tensor::new(vec![1, cfg.noise_dim], z.z));
            let out = forward_graph(g, p, &ctx.geo, states[m], cond_full, zn);
            states[m] = out.x_hat_std;
            prev_diag[m] = Some(out.y_hat_std);
            prog_nodes.push(out.x_hat_std);
            diag_nodes.push(out.y_hat_std);
        }

        let prog_term =
            g.fair_crps_vec(&prog_nodes, obs_x.clone(), Arc::clone(&ctx.w_prog), true)?;
        let diag_term =
            g.fair_crps_vec(&diag_nodes, obs_y, Arc::clone(&ctx.w_diag), true)?;
        let mut lead_loss = g.add(prog_term, diag_term);

        if lambda != 0.0 {
            let plan = ctx.plan.as_ref().ok_or_else(|| {
                GemError::Config("spectral weight set but no SHT plan".to_string())
            })?;
            let analysis = plan.analysis_matrix();
            let dmap = plan.degree_map();
            for c in 0..cfg.c_x() {
                // Truth log-powers from the standardized observation.
                let truth_vals = &obs_x[c * ncell..(c + 1) * ncell];
                let truth_logp: Vec<f64> = {
                    let coeffs = plan.analyze_values(truth_vals)?;
                    degree_power(&coeffs)
                        .p
                        .iter()
                        .map(|&v| v.max(POWER_FLOOR).ln())
                        .collect()
                };
                let chan_map: Arc<Vec<i64>> =
                    Arc::new((c * ncell..(c + 1) * ncell).map(|v| v as i64).collect());
                let mut member_logs = Vec::with_capacity(samples_s);
                for &node in &prog_nodes {
                    let chan = g.gather_pad(node, Arc::clone(&chan_map), vec![ncell]);
                    let coeffs = g.matvec_const(Arc::clone(&analysis), chan);
                    let sq = g.mul(coeffs, coeffs);
                    let power = g.matvec_const(Arc::clone(&dmap), sq);
                    member_logs.push(g.ln_clamped(power, POWER_FLOOR));
                }
                let spec = g.fair_crps_vec(
                    &member_logs,
                    Arc::new(truth_logp),
                    Arc::clone(&ctx.spec_weights),
                    false,
                )?;
                let spec = g.scale(spec, lambda);
                lead_loss = g.add(lead_loss, spec);
            }
        }
        per_lead.push(lead_loss);
    }

    let mut total = per_lead[0];
    for &l in &per_lead[1..] {
        total = g.add(total, l);
    }
    Ok(g.scale(total, 1.0 / rollout_l as f64))
}

/// Loss and parameter gradients (visitor order) for one case.
fn case_loss_and_grads(
    params: &ModelParams,
    ctx: &TrainContext,
    archive: &DailyArchive,
    init_day: usize,
    tc: &TrainConfig,
    noise_seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = params_to_graph(&mut g, params);
    let loss = build_case_loss(
        &mut g,
        &p,
        ctx,
        archive,
        init_day,
        tc.samples_s,
        tc.rollout_l,
        tc.spectral_lambda,
        noise_seed,
    )?;
    let value = g.value(loss).data[0];
    if !value.is_finite() {
        return Err(GemError::NonFinite {
            context: format!("training loss at day {init_day}"),
        });
    }
    let grads = g.backward(loss);
    let out = p
        .ordered
        .iter()
        .map(|&id| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(id).shape.clone()))
        })
        .collect();
    Ok((value, out))
}

fn case_loss_only(
    params: &ModelParams,
    ctx: &TrainContext,
    archive: &DailyArchive,
    init_day: usize,
    tc: &TrainConfig,
    noise_seed: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = params_to_graph(&mut g, params);
    let loss = build_case_loss(
        &mut g,
        &p,
        ctx,
        archive,
        init_day,
        tc.samples_s,
        tc.rollout_l,
        tc.spectral_lambda,
        noise_seed,
    )?;
    Ok(g.value(loss).data[0])
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(params: &ModelParams) -> Self {
        let mut m = Vec::new();
        params.for_each(|_, t| m.push(vec![0.0; t.numel()]));
        let v = m.clone();
        Adam { m, v, t: 0 }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64, clip: f64) {
        // Global-norm clipping, then bias-corrected moment updates.
        let norm: f64 = grads
            .iter()
            .map(|g| g.data.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut k = 0;
        params.for_each_mut(|_, tensor| {
            let g = &grads[k];
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for i in 0..tensor.numel() {
                let gi = g.data[i] * scale;
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                tensor.data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
            k += 1;
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub loss_curve: Vec<LossPoint>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
}

pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut out = String::from("step,train_loss,val_loss,lr\n");
    for p in curve {
        let val = p
            .val_loss
            .map(|v| format!("{v:.10e}"))
            .unwrap_or_default();
        out.push_str(&format!("{},{:.10e},{},{:.10e}\n", p.step, p.train_loss, val, p.lr));
    }
    out
}

/// Train on a daily archive split into contiguous train/validation
/// blocks; returns the best-validation checkpoint and the loss curve.
pub fn train(
    model_cfg: &ModelConfig,
    tc: &TrainConfig,
    archive: &DailyArchive,
) -> Result<TrainOutput> {
    tc.validate()?;
    model_cfg.validate()?;
    let n_days = archive.y.len();
    let min_days = tc.rollout_l + 2;
    if n_days < min_days {
        return Err(GemError::PartialDay {
            hours: 24.0 * n_days as f64,
        });
    }
    let val_days = ((n_days as f64 * tc.val_fraction) as usize).max(tc.rollout_l + 1);
    let train_end = n_days - val_days; // train init days in [lo, train_end)
    let init_lo = usize::from(model_cfg.condition_on_diagnostics);
    if train_end <= init_lo + tc.rollout_l {
        return Err(GemError::Config(
            "archive too short for the requested split".to_string(),
        ));
    }

    let stats = compute_standard_stats(archive, model_cfg, train_end);
    let ctx = TrainContext::new(model_cfg, stats.clone(), tc.spectral_lambda)?;
    let mut params = ModelParams::init(model_cfg, tc.seed)?;

    // Fixed validation cases: evenly spaced inits in the held-out block.
    let val_lo = train_end.max(init_lo);
    let val_hi = n_days - tc.rollout_l;
    let n_val = tc.val_cases.min(val_hi.saturating_sub(val_lo)).max(1);
    let val_inits: Vec<usize> = (0..n_val)
        .map(|k| val_lo + k * (val_hi - val_lo).max(1) / n_val)
        .collect();
    let eval_val = |params: &ModelParams| -> Result<f64> {
        let losses: Vec<Result<f64>> = val_inits
            .par_iter()
            .enumerate()
            .map(|(k, &d)| case_loss_only(params, &ctx, archive, d, tc, 0xa1 ^ k as u64))
            .collect();
        let mut acc = 0.0;
        for l in losses {
            acc += l?;
        }
        Ok(acc / val_inits.len() as f64)
    };

    let initial_val = eval_val(&params)?;
    let mut best_val = initial_val;
    let mut best_params = params.clone();
    let mut curve = Vec::new();
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha12Rng::seed_from_u64(tc.seed ^ 0x7261_696e);
    let mut initial_train: Option<f64> = None;
    let mut high_loss_streak = 0usize;

    for step in 0..tc.total_steps {
        let days: Vec<usize> = (0..tc.batch_size)
            .map(|_| rng.random_range(init_lo..train_end - tc.rollout_l))
            .collect();
        let seeds: Vec<u64> = (0..tc.batch_size)
            .map(|k| tc.seed ^ (step as u64) << 16 ^ k as u64)
            .collect();
        let results: Vec<Result<(f64, Vec<Tensor>)>> = days
            .par_iter()
            .zip(&seeds)
            .map(|(&d, &s)| case_loss_and_grads(&params, &ctx, archive, d, tc, s))
            .collect();

        let mut loss_acc = 0.0;
        let mut grad_acc: Option<Vec<Tensor>> = None;
        for r in results {
            let (loss, grads) = r?;
            loss_acc += loss;
            match &mut grad_acc {
                None => grad_acc = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (av, gv) in a.data.iter_mut().zip(&g.data) {
                            *av += gv;
                        }
                    }
                }
            }
        }
        let mut grads = grad_acc.expect("batch_size >= 1");
        let scale = 1.0 / tc.batch_size as f64;
        for g in grads.iter_mut() {
            for v in g.data.iter_mut() {
                *v *= scale;
            }
        }
        let train_loss = loss_acc * scale;
        let init_train = *initial_train.get_or_insert(train_loss);

        // Divergence guard.
        if train_loss > 10.0 * init_train {
            high_loss_streak += 1;
            if high_loss_streak >= 100 {
                return Err(GemError::Diverged {
                    loss: train_loss,
                    threshold: 10.0 * init_train,
                    steps: high_loss_streak,
                });
            }
        } else {
            high_loss_streak = 0;
        }

        let lr = tc.learning_rate(step);
        adam.step(&mut params, &grads, lr, tc.grad_clip);

        let val = if (step + 1) % tc.eval_every == 0 || step + 1 == tc.total_steps {
            let v = eval_val(&params)?;
            if v < best_val {
                best_val = v;
                best_params = params.clone();
            }
            Some(v)
        } else {
            None
        };
        curve.push(LossPoint {
            step,
            train_loss,
            val_loss: val,
            lr,
        });
    }

    Ok(TrainOutput {
        checkpoint: Checkpoint {
            cfg: model_cfg.clone(),
            stats,
            params: best_params,
        },
        loss_curve: curve,
        initial_val_loss: initial_val,
        best_val_loss: best_val,
    })
}

/// Add small Gaussian noise to every tensor (gates and heads included)
/// so gradient checks exercise all parameter groups.
pub fn jitter_params(params: &mut ModelParams, scale: f64, seed: u64) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    params.for_each_mut(|_, t| {
        for v in t.data.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += scale * n;
        }
    });
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// Central finite differences on a random parameter subset against the
/// tape gradients of the composite loss. Denominators are floored at
/// 1e-8. Coordinates whose finite-difference estimates at h and h/2
/// disagree are excluded: those straddle an |.|-kink where the two-sided
/// quotient is not the subgradient.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    params: &ModelParams,
    ctx: &TrainContext,
    archive: &DailyArchive,
    init_day: usize,
    tc: &TrainConfig,
    eps: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, analytic) = case_loss_and_grads(params, ctx, archive, init_day, tc, seed ^ 0x9c)?;

    let flat_len: usize = analytic.iter().map(|t| t.numel()).sum();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut coords: Vec<usize> = (0..n_coords.min(flat_len))
        .map(|_| rng.random_range(0..flat_len))
        .collect();
    coords.sort_unstable();
    coords.dedup();

    let locate = |flat: usize| -> (usize, usize) {
        let mut off = flat;
        for (k, t) in analytic.iter().enumerate() {
            if off < t.numel() {
                return (k, off);
            }
            off -= t.numel();
        }
        unreachable!()
    };

    let eval = |params: &ModelParams| -> Result<f64> {
        case_loss_only(params, ctx, archive, init_day, tc, seed ^ 0x9c)
    };

    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for &flat in &coords {
        let (tensor_idx, inner) = locate(flat);
        let mut orig = f64::NAN;
        let mut k = 0;
        work.for_each_mut(|_, t| {
            if k == tensor_idx {
                orig = t.data[inner];
            }
            k += 1;
        });
        let h = eps * orig.abs().max(1.0);

        let mut set = |w: &mut ModelParams, value: f64| {
            let mut k = 0;
            w.for_each_mut(|_, t| {
                if k == tensor_idx {
                    t.data[inner] = value;
                }
                k += 1;
            });
        };

        let fd_at = |w: &mut ModelParams,
                     set: &mut dyn FnMut(&mut ModelParams, f64),
                     step: f64|
         -> Result<f64> {
            set(w, orig + step);
            let fp = eval(w)?;
            set(w, orig - step);
            let fm = eval(w)?;
            set(w, orig);
            Ok((fp - fm) / (2.0 * step))
        };

        let fd_h = fd_at(&mut work, &mut set, h)?;
        let fd_h2 = fd_at(&mut work, &mut set, h / 2.0)?;
        let agree = (fd_h - fd_h2).abs() / fd_h.abs().max(fd_h2.abs()).max(1e-8);
        if agree > 1e-3 {
            skipped += 1;
            continue;
        }

        let a = analytic[tensor_idx].data[inner];
        let rel = (a - fd_h2).abs() / a.abs().max(fd_h2.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
        checked += 1;
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked,
        skipped_kinks: skipped,
    })
}
