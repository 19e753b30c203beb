//! `gem` command line: synthetic-truth generation, training,
//! forecasting, climatology baselines, verification, REV, spectra, and
//! the snapshot-bias demonstration.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
//! failure. Failures print a machine-parsable `E:<code>:<token>:` line
//! on stderr.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use gem_core::climatology::build_climatology;
use gem_core::config::RunConfig;
use gem_core::decision::{
    bias_demo, climatological_threshold, default_cost_loss_ratios, event_outcome,
    event_probability, rev_curve, Direction, EventSpec,
};
use gem_core::error::{GemError, Result};
use gem_core::gemf::{read_field_file, write_field_file};
use gem_core::grid::{latitude_weights, Field};
use gem_core::model::{load_checkpoint, save_checkpoint, ModelGeometry};
use gem_core::rollout::{read_forecast, rollout, write_forecast, RolloutOptions};
use gem_core::sht::ShtPlan;
use gem_core::synth::{
    extract_daily, land_mask_bools, simulate, simulate_daily_archive, DailyArchive, YEAR_DAYS,
};
use gem_core::train::{loss_curve_csv, train};
use gem_core::verify::{spectra_csv, verify, VerifyOptions};

const VERSION_LINE: &str = concat!(env!("CARGO_PKG_VERSION"), " (formats: gemf v1, gemw v1)");

#[derive(Parser)]
#[command(
    name = "gem",
    version = VERSION_LINE,
    about = "Desk-scale probabilistic forecasting engine on the sphere",
    long_about = "Subcommands cover the full pipeline: synth -> train -> forecast/climo -> \
verify/rev/spectra/bias-demo. All stages read one JSON config (print it with `gem config`); \
any field can be overridden with --set section.key=value. All randomness is \
seeded explicitly."
)]
struct Cli {
    /// Cap rayon worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set train.total_steps=500
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.sets)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration (defaults when no --config).
    Config(ConfigArgs),
    /// Simulate the toy atmosphere; write truth fine series and daily X/Y.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "synth_out")]
        out_dir: PathBuf,
        /// Override synth.n_days.
        #[arg(long)]
        days: Option<usize>,
        /// Override synth.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Skip the (large) fine-resolution GEMF file.
        #[arg(long)]
        skip_fine: bool,
    },
    /// Train on a daily archive; write checkpoint, loss curve, manifest.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        archive_x: PathBuf,
        #[arg(long)]
        archive_y: PathBuf,
        #[arg(long, default_value = "model.gemw")]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Ensemble forecast from a checkpoint and an initial truth state.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Daily prognostic archive providing the initial state.
        #[arg(long)]
        truth_x: PathBuf,
        /// Initialization time in hours since epoch (multiple of 24).
        #[arg(long)]
        init: i64,
        #[arg(long)]
        leads: usize,
        #[arg(long)]
        members: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "forecast_out")]
        out_dir: PathBuf,
        /// Disable SST low-pass smoothing between steps.
        #[arg(long)]
        no_sst_smooth: bool,
    },
    /// Climatological analog baseline as an ensemble forecast.
    Climo {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        archive_x: PathBuf,
        #[arg(long)]
        archive_y: PathBuf,
        #[arg(long)]
        init: i64,
        #[arg(long)]
        leads: usize,
        #[arg(long)]
        members: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "climo_out")]
        out_dir: PathBuf,
    },
    /// Score forecasts against truth with a climatology reference.
    Verify {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Forecast manifest path(s), one per init.
        #[arg(long, required = true)]
        forecast: Vec<PathBuf>,
        /// Climatology manifest path(s), paired with --forecast.
        #[arg(long, required = true)]
        clim: Vec<PathBuf>,
        #[arg(long)]
        truth_x: PathBuf,
        #[arg(long)]
        truth_y: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Relative economic value over cost/loss ratios.
    Rev {
        #[arg(long, required = true)]
        forecast: Vec<PathBuf>,
        #[arg(long)]
        truth_x: PathBuf,
        #[arg(long)]
        truth_y: PathBuf,
        #[arg(long)]
        channel: String,
        /// Climatological quantile defining the event threshold.
        #[arg(long, default_value_t = 0.98)]
        quantile: f64,
        #[arg(long, value_parser = parse_direction, default_value = "above")]
        direction: Direction,
        #[arg(long, default_value_t = 1)]
        acc_days: usize,
        #[arg(long)]
        lead: usize,
        /// Calendar window for the threshold climatology.
        #[arg(long, default_value_t = 3)]
        window_days: usize,
        #[arg(long, default_value_t = 21)]
        alphas: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Power spectra diagnostics; optionally dump attention masks.
    Spectra {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        forecast: Option<PathBuf>,
        #[arg(long)]
        truth_x: Option<PathBuf>,
        #[arg(long, default_value = "temperature")]
        channel: String,
        #[arg(long, default_value_t = 1)]
        lead: usize,
        #[arg(long)]
        l_max: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the model's attention masks as GEMF fields instead.
        #[arg(long)]
        dump_masks: Option<PathBuf>,
    },
    /// Snapshot-extrema bias versus the trained diagnostic head.
    BiasDemo {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 60)]
        days: usize,
        #[arg(long, default_value_t = 3)]
        leads: usize,
        #[arg(long, default_value_t = 4)]
        members: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "bias_demo.md")]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn parse_direction(s: &str) -> std::result::Result<Direction, String> {
    match s {
        "above" => Ok(Direction::Above),
        "below" => Ok(Direction::Below),
        other => Err(format!("direction must be above|below, got {other}")),
    }
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap exits 2 by default; the contract here is 1 for usage.
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.class().exit_code();
            eprintln!("E:{}:{}: {}", code, e.token(), e);
            code
        }
    }
}

/// Load a daily archive pair, checking day alignment from hour tags.
fn load_archive(x_path: &Path, y_path: &Path) -> Result<DailyArchive> {
    let x = read_field_file(x_path)?;
    let y = read_field_file(y_path)?;
    for (d, f) in x.iter().enumerate() {
        if f.time_tag() != 24 * d as i64 {
            return Err(GemError::ShapeMismatch(format!(
                "prognostic archive day {d} tagged {} (expected {})",
                f.time_tag(),
                24 * d
            )));
        }
    }
    for (d, f) in y.iter().enumerate() {
        if f.time_tag() != 24 * (d as i64 + 1) {
            return Err(GemError::ShapeMismatch(format!(
                "diagnostic archive day {d} tagged {} (expected {})",
                f.time_tag(),
                24 * (d + 1)
            )));
        }
    }
    if x.len() != y.len() + 1 {
        return Err(GemError::ShapeMismatch(format!(
            "archive has {} snapshots and {} diagnostic days (need N+1 and N)",
            x.len(),
            y.len()
        )));
    }
    Ok(DailyArchive { x, y })
}

fn day_index(init_hours: i64) -> Result<i64> {
    if init_hours % 24 != 0 {
        return Err(GemError::Config(format!(
            "init time {init_hours} h is not a day boundary"
        )));
    }
    Ok(init_hours / 24)
}

fn write_or_print(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            std::fs::write(p, text)?;
            print!("{text}");
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Config(cfg) => {
            let cfg = cfg.load()?;
            println!("{}", cfg.to_pretty_json());
            Ok(())
        }

        Command::Synth {
            cfg,
            out_dir,
            days,
            seed,
            skip_fine,
        } => {
            let mut rc = cfg.load()?;
            if let Some(d) = days {
                rc.synth.n_days = d;
            }
            if let Some(s) = seed {
                rc.synth.seed = s;
            }
            let grid = gem_core::grid::make_grid(rc.grid.nlat, rc.grid.nlon)?;
            let params = rc.synth.to_params(&grid);
            std::fs::create_dir_all(&out_dir)?;
            if skip_fine {
                let archive =
                    simulate_daily_archive(&params, rc.synth.n_days, rc.synth.spinup_days)?;
                write_field_file(&archive.x, out_dir.join("truth_daily_x.gemf"))?;
                write_field_file(&archive.y, out_dir.join("truth_daily_y.gemf"))?;
            } else {
                // Spinup folded into one record so the fine series and
                // daily files stay mutually consistent.
                let record = simulate(&params, rc.synth.spinup_days + rc.synth.n_days)?;
                let (mut x, mut y) = extract_daily(&record)?;
                x.drain(..rc.synth.spinup_days);
                y.drain(..rc.synth.spinup_days);
                for (d, f) in x.iter_mut().enumerate() {
                    f.set_time_tag(24 * d as i64);
                }
                for (d, f) in y.iter_mut().enumerate() {
                    f.set_time_tag(24 * (d as i64 + 1));
                }
                write_field_file(&record.to_fields(), out_dir.join("truth_fine.gemf"))?;
                write_field_file(&x, out_dir.join("truth_daily_x.gemf"))?;
                write_field_file(&y, out_dir.join("truth_daily_y.gemf"))?;
            }
            eprintln!(
                "synth: {} days on {}x{} -> {}",
                rc.synth.n_days,
                rc.grid.nlat,
                rc.grid.nlon,
                out_dir.display()
            );
            Ok(())
        }

        Command::Train {
            cfg,
            archive_x,
            archive_y,
            out,
            loss_csv,
            manifest,
            seed,
        } => {
            let mut rc = cfg.load()?;
            if let Some(s) = seed {
                rc.train.seed = s;
            }
            let archive = load_archive(&archive_x, &archive_y)?;
            let output = train(&rc.model, &rc.train, &archive)?;
            save_checkpoint(&output.checkpoint, &out)?;
            if let Some(p) = loss_csv {
                std::fs::write(p, loss_curve_csv(&output.loss_curve))?;
            }
            if let Some(p) = manifest {
                let m = serde_json::json!({
                    "code_version": env!("CARGO_PKG_VERSION"),
                    "config_hash": rc.content_hash(),
                    "seed": rc.train.seed,
                    "steps": rc.train.total_steps,
                    "initial_val_loss": output.initial_val_loss,
                    "best_val_loss": output.best_val_loss,
                    "param_count": output.checkpoint.params.param_count(),
                });
                std::fs::write(p, serde_json::to_string_pretty(&m)?)?;
            }
            eprintln!(
                "train: {} steps, val loss {:.4} -> {:.4}, checkpoint {}",
                rc.train.total_steps,
                output.initial_val_loss,
                output.best_val_loss,
                out.display()
            );
            Ok(())
        }

        Command::Forecast {
            checkpoint,
            truth_x,
            init,
            leads,
            members,
            seed,
            out_dir,
            no_sst_smooth,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let geo = ModelGeometry::new(&ck.cfg)?;
            day_index(init)?;
            let x = read_field_file(&truth_x)?;
            let x0 = x.iter().find(|f| f.time_tag() == init).ok_or_else(|| {
                GemError::ShapeMismatch(format!("no snapshot tagged {init} h in truth file"))
            })?;
            let ens = rollout(
                &ck,
                &geo,
                x0,
                None,
                leads,
                members,
                seed,
                RolloutOptions {
                    sst_smooth: !no_sst_smooth,
                },
            )?;
            let manifest = write_forecast(&ens, &out_dir)?;
            eprintln!("forecast: manifest {}", manifest.display());
            Ok(())
        }

        Command::Climo {
            cfg,
            archive_x,
            archive_y,
            init,
            leads,
            members,
            seed,
            out_dir,
        } => {
            let rc = cfg.load()?;
            let mut ccfg = rc.climatology.clone();
            if let Some(m) = members {
                ccfg.members = m;
            }
            if let Some(s) = seed {
                ccfg.seed = s;
            }
            let archive = load_archive(&archive_x, &archive_y)?;
            let ens = build_climatology(&archive, day_index(init)?, leads, &ccfg)?;
            let manifest = write_forecast(&ens, &out_dir)?;
            eprintln!("climo: manifest {}", manifest.display());
            Ok(())
        }

        Command::Verify {
            cfg,
            forecast,
            clim,
            truth_x,
            truth_y,
            out,
        } => {
            if forecast.len() != clim.len() {
                return Err(GemError::Config(format!(
                    "{} forecasts paired with {} climatologies",
                    forecast.len(),
                    clim.len()
                )));
            }
            let rc = cfg.load()?;
            let archive = load_archive(&truth_x, &truth_y)?;
            let fcs: Vec<_> = forecast
                .iter()
                .map(|p| read_forecast(p))
                .collect::<Result<Vec<_>>>()?;
            let cls: Vec<_> = clim
                .iter()
                .map(|p| read_forecast(p))
                .collect::<Result<Vec<_>>>()?;
            if let (Some(f), Some(c)) = (fcs.first(), cls.first()) {
                if f.grid != c.grid {
                    return Err(GemError::GridMismatch(
                        "forecast and climatology grids differ".to_string(),
                    ));
                }
                if &f.grid != archive.x[0].grid() {
                    return Err(GemError::GridMismatch(
                        "forecast and truth grids differ".to_string(),
                    ));
                }
            }
            let mask = land_mask_bools(&fcs[0].grid);
            let fc_refs: Vec<_> = fcs.iter().collect();
            let cl_refs: Vec<_> = cls.iter().collect();
            let opts = VerifyOptions {
                windows: rc.verify.windows.clone(),
                quantile_hi: rc.verify.quantile_hi,
                quantile_lo: rc.verify.quantile_lo,
            };
            let table = verify(
                &fc_refs,
                &cl_refs,
                &archive.x,
                &archive.y,
                Some(&mask),
                &opts,
            )?;
            write_or_print(&table.to_csv(), out.as_deref())
        }

        Command::Rev {
            forecast,
            truth_x,
            truth_y,
            channel,
            quantile,
            direction,
            acc_days,
            lead,
            window_days,
            alphas,
            out,
        } => {
            let archive = load_archive(&truth_x, &truth_y)?;
            let fcs: Vec<_> = forecast
                .iter()
                .map(|p| read_forecast(p))
                .collect::<Result<Vec<_>>>()?;
            let grid = fcs[0].grid.clone();
            let weights = latitude_weights(&grid);
            let is_diag = fcs[0].diagnostic_channels.iter().any(|c| *c == channel);
            let mut probs = Vec::new();
            let mut outs = Vec::new();
            for ens in &fcs {
                let d0 = ens.init_time / 24;
                let target_day = if is_diag {
                    d0 + lead as i64 - 1
                } else {
                    d0 + lead as i64
                };
                let threshold = climatological_threshold(
                    if is_diag { &archive.y } else { &archive.x },
                    &channel,
                    quantile,
                    target_day.rem_euclid(YEAR_DAYS as i64),
                    window_days,
                )?;
                let spec = EventSpec {
                    channel: channel.clone(),
                    threshold,
                    direction,
                    accumulation_days: acc_days,
                };
                probs.push(event_probability(ens, &spec, lead)?);
                let (series, idx) = if is_diag {
                    (&archive.y, target_day as usize)
                } else {
                    (&archive.x, target_day as usize)
                };
                outs.push(event_outcome(series, &spec, idx)?);
            }
            let ratios = default_cost_loss_ratios(alphas);
            let curve = rev_curve(&probs, &outs, &ratios, &weights)?;
            let mut csv = String::from("variable,lead,alpha,rev,base_rate\n");
            for (a, r) in curve.cost_loss_ratios.iter().zip(&curve.rev) {
                let rv = r.map(|v| format!("{v:.10e}")).unwrap_or_default();
                csv.push_str(&format!(
                    "{channel},{lead},{a:.6e},{rv},{:.10e}\n",
                    curve.base_rate
                ));
            }
            write_or_print(&csv, out.as_deref())
        }

        Command::Spectra {
            cfg,
            forecast,
            truth_x,
            channel,
            lead,
            l_max,
            out,
            dump_masks,
        } => {
            if let Some(dir) = dump_masks {
                let rc = cfg.load()?;
                let geo = ModelGeometry::new(&rc.model)?;
                std::fs::create_dir_all(&dir)?;
                for (name, mask) in geo.masks_for_dump() {
                    write_mask_gemf(&name, &mask, &dir)?;
                }
                eprintln!("spectra: masks dumped to {}", dir.display());
                return Ok(());
            }
            let forecast = forecast.ok_or_else(|| {
                GemError::Config("--forecast required unless --dump-masks".to_string())
            })?;
            let truth_x = truth_x.ok_or_else(|| {
                GemError::Config("--truth-x required unless --dump-masks".to_string())
            })?;
            let ens = read_forecast(&forecast)?;
            let truth = read_field_file(&truth_x)?;
            let d0 = ens.init_time / 24;
            let target = truth
                .iter()
                .find(|f| f.time_tag() == 24 * (d0 + lead as i64))
                .ok_or_else(|| {
                    GemError::ShapeMismatch(format!("truth file lacks day {}", d0 + lead as i64))
                })?;
            let grid = ens.grid.clone();
            let lm = l_max.unwrap_or((grid.nlat() - 1).min(grid.nlon() / 2 - 1));
            let plan = ShtPlan::new(&grid, lm)?;
            let members: Vec<Field> = (0..ens.members).map(|m| ens.prog_field(m, lead)).collect();
            let refs: Vec<&Field> = members.iter().collect();
            let csv = spectra_csv(&plan, &refs, target, &channel)?;
            write_or_print(&csv, out.as_deref())
        }

        Command::BiasDemo {
            cfg,
            checkpoint,
            days,
            leads,
            members,
            seed,
            out,
            csv,
        } => {
            let mut rc = cfg.load()?;
            if let Some(s) = seed {
                rc.synth.seed = s;
            }
            let ck = load_checkpoint(&checkpoint)?;
            let grid = gem_core::grid::make_grid(rc.grid.nlat, rc.grid.nlon)?;
            let params = rc.synth.to_params(&grid);
            let record = simulate(&params, days)?;
            let report = bias_demo(&record, &ck, leads, members, rc.synth.seed)?;
            std::fs::write(&out, report.to_markdown())?;
            if let Some(p) = csv {
                std::fs::write(p, report.to_csv())?;
            }
            eprintln!(
                "bias-demo: {} days, snapshot-bias confidence {:.4} -> {}",
                days,
                report.snapshot_bias_confidence,
                out.display()
            );
            Ok(())
        }
    }
}

/// Masks dump as 0/1 float fields on a synthetic (groups x q*k) grid.
fn write_mask_gemf(name: &str, mask: &[bool], dir: &Path) -> Result<()> {
    let total = mask.len();
    let mut rows = 4;
    while total % rows != 0 || total / rows < 8 || (total / rows) % 2 != 0 {
        rows += 1;
        if rows > total {
            return Err(GemError::ShapeMismatch(format!(
                "cannot factor mask of {total} entries into a grid"
            )));
        }
    }
    let cols = total / rows;
    let grid = gem_core::grid::make_grid(rows, cols)?;
    let data: Vec<f32> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let field = Field::new(grid, vec![name.to_string()], data, 0)?;
    write_field_file(&[field], dir.join(format!("{name}.gemf")))?;
    Ok(())
}
