use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use frdiff::analysis::{self, CostModel};
use frdiff::autofr::{autofr_search, AutoFrConfig};
use frdiff::config::RunConfig;
use frdiff::data::{gaussian_mixture_corpus, shapes_corpus, Dataset};
use frdiff::io;
use frdiff::model::{NetworkConfig, ScoreNetwork};
use frdiff::reuse::{frdiff_sample, KeyframeSet, MixingSchedule};
use frdiff::sampler::{self, SamplerConfig, Trajectory, LEDGER_HEADER};
use frdiff::schedule::NoiseSchedule;
use frdiff::tensor::Tensor;
use frdiff::train::{train_toy, TrainConfig};
use frdiff::{Error, Result};

/// Training-free diffusion sampling acceleration via per-layer feature reuse.
#[derive(Parser)]
#[command(name = "frdiff", version, about)]
struct Cli {
    /// TOML run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides config and the FRDIFF_OUT variable).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Rayon thread count (0 = default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Clone)]
struct CommonOverrides {
    #[arg(long)]
    n_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy score network on a procedural corpus.
    Train {
        #[command(flatten)]
        common: CommonOverrides,
        /// Corpus: "shapes" (8x8 images) or "mixture" (2-D points).
        #[arg(long, default_value = "shapes")]
        dataset: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Draw samples, optionally under feature reuse.
    Sample {
        #[command(flatten)]
        common: CommonOverrides,
        /// Enable feature reuse with the configured keyframe schedule.
        #[arg(long)]
        reuse: bool,
        /// Uniform keyframe interval (implies --reuse).
        #[arg(long)]
        interval: Option<usize>,
        #[arg(long)]
        cond: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
        /// Number of samples to draw.
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Search for a keyframe schedule by gradient descent on the gates.
    Autofr {
        #[command(flatten)]
        common: CommonOverrides,
        #[arg(long)]
        cost_balance: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Measure per-layer temporal change of residual features.
    AnalyzeSimilarity {
        #[command(flatten)]
        common: CommonOverrides,
        #[arg(long, default_value_t = 8)]
        trajectories: usize,
    },
    /// Radially averaged power spectra of a sample batch.
    AnalyzePsd {
        #[command(flatten)]
        common: CommonOverrides,
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// "baseline", "reduced", "reuse", or "mixing".
        #[arg(long, default_value = "baseline")]
        mode: String,
        #[arg(long)]
        interval: Option<usize>,
    },
    /// Evaluate the analytic cost model over keyframe intervals.
    Profile {
        #[arg(long, default_value_t = 50)]
        n_steps: usize,
        /// Skippable fraction of the per-step cost.
        #[arg(long, default_value_t = 0.92)]
        skippable: f64,
        #[arg(long, default_value_t = 2)]
        interval: usize,
        /// Count zero-weight mixing steps as free.
        #[arg(long)]
        free_skips: bool,
    },
    /// Check that always-reusing the stored score equals a reduced-step run.
    VerifyEquivalence {
        #[command(flatten)]
        common: CommonOverrides,
        #[arg(long, default_value_t = 2)]
        stride: usize,
        /// Maximum tolerated deviation.
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Format(_) => ExitCode::from(2),
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.print_config {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let command = cli.command.ok_or_else(|| Error::config("no command given (see --help)"))?;
    let out_dir = resolve_out_dir(cli.out.as_deref(), &config, command_name(&command))?;
    std::fs::create_dir_all(&out_dir)?;

    match command {
        Command::Train { common, dataset, steps, batch, lr } => {
            apply_common(&mut config, &common);
            let data = load_dataset(&dataset, config.model.seed)?;
            let schedule = build_schedule(&config)?;
            let mut net = build_net(&config, &data)?;
            let mut tc = TrainConfig::default();
            if let Some(s) = steps {
                tc.steps = s;
            }
            if let Some(b) = batch {
                tc.batch = b;
            }
            if let Some(l) = lr {
                tc.lr = l;
            }
            tc.seed = config.sampler.seed;
            let history = train_toy(&mut net, &data, &schedule, &tc)?;
            let ckpt = out_dir.join("checkpoint");
            net.save(&ckpt)?;
            let rows: Vec<Vec<String>> = history
                .iter()
                .enumerate()
                .map(|(i, l)| vec![i.to_string(), format!("{l}")])
                .collect();
            io::write_csv(&out_dir.join("loss.csv"), "step,loss", &rows)?;
            snapshot(&out_dir, &config)?;
            println!(
                "trained {} steps, final loss {:.6}, checkpoint at {}",
                history.len(),
                history.last().copied().unwrap_or(f64::NAN),
                ckpt.display()
            );
        }
        Command::Sample { common, reuse, interval, cond, guidance, count } => {
            apply_common(&mut config, &common);
            if let Some(c) = cond {
                config.sampler.cond = Some(c);
            }
            if let Some(w) = guidance {
                config.sampler.guidance_weight = w;
            }
            if let Some(m) = interval {
                config.fr.interval = m;
            }
            let schedule = build_schedule(&config)?;
            let net = load_net(&config)?;
            let use_reuse = reuse || interval.is_some();
            for i in 0..count {
                let mut scfg = SamplerConfig::new(config.sampler.n_steps, config.sampler.seed + i as u64);
                scfg.solver = config.sampler.solver;
                if let Some(c) = config.sampler.cond {
                    scfg = scfg.with_cond(c, config.sampler.guidance_weight);
                }
                let traj = if use_reuse {
                    let kf = keyframes_from_config(&config)?;
                    let mixing = MixingSchedule {
                        tau: config.fr.tau,
                        bias: config.fr.bias,
                        n: config.sampler.n_steps,
                    };
                    frdiff_sample(&net, &scfg, &kf, mixing, &schedule, config.fr.scope)?
                } else {
                    sampler::sample(&net, &scfg, &schedule, &mut sampler::NoHooks)?
                };
                write_sample(&out_dir, i, &traj)?;
            }
            snapshot(&out_dir, &config)?;
            println!("wrote {count} sample(s) to {}", out_dir.display());
        }
        Command::Autofr { common, cost_balance, iters, lr } => {
            apply_common(&mut config, &common);
            if let Some(c) = cost_balance {
                config.autofr.cost_balance = c;
            }
            if let Some(i) = iters {
                config.autofr.iters = i;
            }
            if let Some(l) = lr {
                config.autofr.lr = l;
            }
            let schedule = build_schedule(&config)?;
            let net = load_net(&config)?;
            let mut acfg = AutoFrConfig::new(config.sampler.n_steps, config.autofr.cost_balance);
            acfg.lr = config.autofr.lr;
            acfg.iters = config.autofr.iters;
            acfg.seeds = (0..config.autofr.batch as u64)
                .map(|i| config.sampler.seed + i)
                .collect();
            let result = autofr_search(&net, &schedule, &acfg)?;
            let theta_rows: Vec<Vec<String>> = result
                .theta
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    vec![
                        (i + 1).to_string(),
                        format!("{t}"),
                        ((*t >= 0.0) as u8).to_string(),
                    ]
                })
                .collect();
            io::write_csv(&out_dir.join("theta.csv"), "iteration,logit,keyframe", &theta_rows)?;
            let loss_rows: Vec<Vec<String>> = result
                .loss_history
                .iter()
                .zip(&result.keyframe_counts)
                .enumerate()
                .map(|(i, (l, k))| vec![i.to_string(), format!("{l}"), k.to_string()])
                .collect();
            io::write_csv(&out_dir.join("search.csv"), "iteration,loss,keyframes", &loss_rows)?;
            for (i, t) in result.targets.iter().enumerate() {
                io::write_tensor(&out_dir, &format!("target{i}"), t)?;
            }
            snapshot(&out_dir, &config)?;
            let ks: Vec<String> = result.keyframes.iter().map(|k| k.to_string()).collect();
            println!("keyframes ({}): {}", result.keyframes.len(), ks.join(","));
        }
        Command::AnalyzeSimilarity { common, trajectories } => {
            apply_common(&mut config, &common);
            let schedule = build_schedule(&config)?;
            let net = load_net(&config)?;
            let report = analysis::temporal_change(
                &net,
                &schedule,
                config.sampler.n_steps,
                trajectories,
                config.sampler.seed,
            )?;
            io::write_csv(&out_dir.join("similarity.csv"), &report.header(), &report.rows())?;
            snapshot(&out_dir, &config)?;
            println!("wrote similarity.csv ({} layers, {} steps)", report.n_layers, report.n_steps);
        }
        Command::AnalyzePsd { common, count, mode, interval } => {
            apply_common(&mut config, &common);
            if let Some(m) = interval {
                config.fr.interval = m;
            }
            let schedule = build_schedule(&config)?;
            let net = load_net(&config)?;
            let images = psd_batch(&net, &schedule, &config, &mode, count)?;
            let curve = analysis::radial_psd(&images)?;
            let rows: Vec<Vec<String>> = curve
                .mean_log_power
                .iter()
                .zip(&curve.ring_power)
                .enumerate()
                .map(|(r, (lp, p))| vec![r.to_string(), format!("{lp}"), format!("{p}")])
                .collect();
            io::write_csv(&out_dir.join("psd.csv"), "ring,mean_log_power,ring_power", &rows)?;
            snapshot(&out_dir, &config)?;
            println!("wrote psd.csv over {} samples (mode {mode})", curve.samples);
        }
        Command::Profile { n_steps, skippable, interval, free_skips } => {
            let mut model = CostModel::aggregate(n_steps, skippable)?;
            model.count_skipped_steps_free = free_skips;
            let mixing = MixingSchedule::new(n_steps);
            let mut rows = Vec::new();
            for m in 1..=n_steps {
                let kf = KeyframeSet::uniform(n_steps, m)?;
                let s = model.speedup(&kf, Some(&mixing))?;
                rows.push(vec![m.to_string(), kf.len().to_string(), format!("{s:.6}")]);
            }
            io::write_csv(&out_dir.join("profile.csv"), "interval,keyframes,speedup", &rows)?;
            let kf = KeyframeSet::uniform(n_steps, interval)?;
            let s = model.speedup(&kf, Some(&mixing))?;
            println!(
                "n={n_steps} skippable={skippable} interval={interval}: speedup {s:.3} (asymptote {:.3})",
                1.0 / (1.0 - skippable)
            );
        }
        Command::VerifyEquivalence { common, stride, tol } => {
            apply_common(&mut config, &common);
            let schedule = build_schedule(&config)?;
            let net = load_net(&config)?;
            let report = analysis::verify_nfe_equivalence(
                &net,
                &schedule,
                config.sampler.n_steps,
                stride,
                config.sampler.seed,
            )?;
            println!(
                "max deviation {:.3e} ({} reuse steps vs {} reduced steps){}",
                report.max_abs_dev,
                report.full_steps,
                report.reduced_steps,
                if report.uneven_windows { " [uneven windows]" } else { "" }
            );
            if report.max_abs_dev > tol {
                return Err(Error::numeric(format!(
                    "deviation {:.3e} exceeds tolerance {tol:.3e}",
                    report.max_abs_dev
                )));
            }
        }
    }
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Train { .. } => "train",
        Command::Sample { .. } => "sample",
        Command::Autofr { .. } => "autofr",
        Command::AnalyzeSimilarity { .. } => "analyze-similarity",
        Command::AnalyzePsd { .. } => "analyze-psd",
        Command::Profile { .. } => "profile",
        Command::VerifyEquivalence { .. } => "verify-equivalence",
    }
}

fn resolve_out_dir(flag: Option<&Path>, config: &RunConfig, command: &str) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    if let Some(p) = &config.io.out_dir {
        return Ok(PathBuf::from(p));
    }
    if let Ok(p) = std::env::var("FRDIFF_OUT") {
        if !p.is_empty() {
            return Ok(PathBuf::from(p).join(command));
        }
    }
    Ok(PathBuf::from("runs").join(command))
}

fn apply_common(config: &mut RunConfig, c: &CommonOverrides) {
    if let Some(n) = c.n_steps {
        config.sampler.n_steps = n;
    }
    if let Some(s) = c.seed {
        config.sampler.seed = s;
    }
    if let Some(p) = &c.checkpoint {
        config.io.checkpoint = Some(p.display().to_string());
    }
    if let Some(a) = &c.arch {
        if let Ok(parsed) = a.parse() {
            config.model.arch = parsed;
        }
    }
    if let Some(w) = c.width {
        config.model.width = w;
    }
    if let Some(d) = c.depth {
        config.model.depth = d;
    }
}

fn build_schedule(config: &RunConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(config.schedule.t_max, config.schedule.beta_start, config.schedule.beta_end)
}

fn load_dataset(name: &str, seed: u64) -> Result<Dataset> {
    match name {
        "shapes" => Ok(shapes_corpus(64, seed)),
        "mixture" => Ok(gaussian_mixture_corpus(64, seed)),
        other => Err(Error::config(format!("unknown dataset '{other}'"))),
    }
}

fn build_net(config: &RunConfig, data: &Dataset) -> Result<ScoreNetwork> {
    let nc = NetworkConfig {
        arch: config.model.arch,
        width: config.model.width,
        depth: config.model.depth,
        data_shape: data.shape.clone(),
        num_classes: data.num_classes,
        seed: config.model.seed,
    };
    ScoreNetwork::build(nc)
}

/// Load the configured checkpoint, or build a randomly initialized network
/// (useful for structural checks; samples from it are noise).
fn load_net(config: &RunConfig) -> Result<ScoreNetwork> {
    match &config.io.checkpoint {
        Some(p) => ScoreNetwork::load(Path::new(p)),
        None => {
            let data = load_dataset("shapes", config.model.seed)?;
            build_net(config, &data)
        }
    }
}

fn write_sample(out_dir: &Path, index: usize, traj: &Trajectory) -> Result<()> {
    let x = traj.final_sample();
    io::write_tensor(out_dir, &format!("sample{index}"), x)?;
    let shape = x.shape();
    if shape.len() == 3 && shape[1] > 1 && shape[2] > 1 {
        if shape[0] == 1 {
            io::write_pgm(&out_dir.join(format!("sample{index}.pgm")), x)?;
        } else if shape[0] == 3 {
            io::write_ppm(&out_dir.join(format!("sample{index}.ppm")), x)?;
        }
    }
    io::write_csv(
        &out_dir.join(format!("ledger{index}.csv")),
        LEDGER_HEADER,
        &traj.ledger_rows(),
    )?;
    Ok(())
}

fn keyframes_from_config(config: &RunConfig) -> Result<KeyframeSet> {
    match &config.fr.keyframes {
        Some(ks) => KeyframeSet::from_members(config.sampler.n_steps, ks.iter().copied()),
        None => KeyframeSet::uniform(config.sampler.n_steps, config.fr.interval),
    }
}

fn psd_batch(
    net: &ScoreNetwork,
    schedule: &NoiseSchedule,
    config: &RunConfig,
    mode: &str,
    count: usize,
) -> Result<Vec<Tensor>> {
    let n = config.sampler.n_steps;
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let scfg = SamplerConfig::new(n, config.sampler.seed + i as u64);
        let traj = match mode {
            "baseline" => sampler::sample(net, &scfg, schedule, &mut sampler::NoHooks)?,
            "reduced" => {
                let mut rcfg = SamplerConfig::new(
                    (n / config.fr.interval).max(1),
                    config.sampler.seed + i as u64,
                );
                rcfg.solver = scfg.solver;
                sampler::sample(net, &rcfg, schedule, &mut sampler::NoHooks)?
            }
            "reuse" | "mixing" => {
                let kf = KeyframeSet::uniform(n, config.fr.interval)?;
                let mixing = if mode == "reuse" {
                    MixingSchedule::never_reuse(n)
                } else {
                    MixingSchedule { tau: config.fr.tau, bias: config.fr.bias, n }
                };
                frdiff_sample(net, &scfg, &kf, mixing, schedule, config.fr.scope)?
            }
            other => return Err(Error::config(format!("unknown psd mode '{other}'"))),
        };
        images.push(traj.final_sample().detached());
    }
    Ok(images)
}

fn snapshot(out_dir: &Path, config: &RunConfig) -> Result<()> {
    std::fs::write(out_dir.join("config.toml"), config.to_toml()?)?;
    Ok(())
}
