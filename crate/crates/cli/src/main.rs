//! `est`: train, plan, evaluate and analyse evolving-subnetwork runs.
//!
//! Exit codes: 0 success, 1 usage, config or input error, 2 numerical abort.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use est_core::cost::{module_costs_with, total_cost, DEFAULT_BACKWARD_MULTIPLIER};
use est_core::diagnostics::{
    fd_stable, model_hessian_trace, slope_compare, smoothed, stage_ends_from_log, transition_drop_at,
    HessianTraceEstimate, SMOOTHING_WINDOW, TRACE_BATCH_SIZE, TRACE_EVAL_BATCHES,
};
use est_core::harness::checkpoint::Checkpoint;
use est_core::harness::{eval_batches, evaluate, load_corpora, load_corpus, LossLog, TrainConfig, TrainMode, TrainObserver, Trainer};
use est_core::model::{ModelConfig, ModelParams};
use est_core::scheduler::SamplingScheduler;
use est_core::{synth, Error, Real};

#[derive(Parser)]
#[command(name = "est", version, about = "Evolving subnetwork training for decoder-only transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file into a run directory.
    Train(TrainArgs),
    /// Print the training-cost report of a sampling schedule.
    Plan(PlanArgs),
    /// Full-model validation loss of a checkpoint.
    Eval(EvalArgs),
    /// Hutchinson estimate of the loss Hessian trace at a checkpoint.
    HessianTrace(HessianArgs),
    /// Stage-transition loss drops and loss-slope comparison from loss logs.
    Curves(CurvesArgs),
    /// Write the deterministic synthetic English-like corpus.
    GenCorpus(GenCorpusArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint directory to continue from; its config must match `--config`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides `seed.seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Print a progress line every this many steps (0: steps/20).
    #[arg(long, default_value_t = 0)]
    progress_every: u64,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, conflicts_with_all = ["preset", "stages"])]
    config: Option<PathBuf>,
    /// Named schedule, e.g. practical-gpt2, practical-tinyllama, table-1.
    #[arg(long, conflicts_with = "stages")]
    preset: Option<String>,
    /// Explicit schedule `end:pH,pM,pL; ...`.
    #[arg(long)]
    stages: Option<String>,
    /// Multiplies every stage end step.
    #[arg(long)]
    scale: Option<f64>,
    /// Model for the cost model: gpt2-base, tinyllama or desk. Defaults to
    /// tinyllama for the tinyllama preset and gpt2-base otherwise.
    #[arg(long)]
    model: Option<String>,
    /// Sequences per step for the cost model.
    #[arg(long, default_value_t = 512)]
    batch_size: u64,
    #[arg(long, default_value_t = DEFAULT_BACKWARD_MULTIPLIER)]
    backward_multiplier: f64,
    /// Emit CSV instead of the text report.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus to evaluate on; defaults to the run's held-out corpus.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of evaluation batches; defaults to the config's.
    #[arg(long)]
    batches: Option<usize>,
}

#[derive(Args)]
struct HessianArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus for the fixed batches; defaults to the run's held-out corpus.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    probes: usize,
    /// Probe seed; defaults to the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Relative finite-difference step.
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    /// Repeat at eps/10 and flag estimates that differ by more than 10%.
    #[arg(long)]
    check_eps: bool,
    /// Also write the estimate as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesArgs {
    #[arg(long)]
    log: PathBuf,
    /// Second log; enables the slope comparison.
    #[arg(long)]
    log2: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Steps averaged on each side of a transition (default: min(100, shortest stage)).
    #[arg(long)]
    window: Option<u64>,
    /// Loss level for the slope comparison. Defaults to the higher of the two
    /// smoothed minima plus 5% of the remaining range to the start.
    #[arg(long)]
    level: Option<f64>,
    /// Width of the step window the slope is fitted over.
    #[arg(long, default_value_t = 100)]
    slope_window: u64,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2_000_000)]
    bytes: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Eval(a) => cmd_eval(a),
        Command::HessianTrace(a) => cmd_hessian_trace(a),
        Command::Curves(a) => cmd_curves(a),
        Command::GenCorpus(a) => cmd_gen_corpus(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::NumericalAbort { .. })));
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

/// Appends timestamped lines to `run.log`; the only place wall-clock time appears.
struct RunLog {
    path: PathBuf,
}

impl RunLog {
    fn line(&self, msg: &str) {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(&self.path) {
            let _ = writeln!(f, "[{secs}] {msg}");
        }
    }
}

struct RunObserver<'a> {
    out: &'a Path,
    log: &'a RunLog,
    total: u64,
    progress_every: u64,
    evals: String,
}

impl TrainObserver<Real> for RunObserver<'_> {
    fn on_step(&mut self, r: &est_core::harness::LossRecord) {
        if r.step.is_multiple_of(self.progress_every) || r.step == self.total {
            let line = format!(
                "step {}/{} stage {} loss {:.4} lr {:.3e} flops {:.4e}",
                r.step, self.total, r.stage, r.loss, r.lr, r.cum_flops
            );
            println!("{line}");
            self.log.line(&line);
        }
    }

    fn on_eval(&mut self, step: u64, loss: f64) {
        let _ = writeln!(self.evals, "{step},{loss}");
        let _ = write_file(&self.out.join("eval.csv"), &self.evals);
        println!("eval step {step} loss {loss:.4}");
        self.log.line(&format!("eval step {step} loss {loss}"));
    }

    fn on_checkpoint(&mut self, c: &Checkpoint<Real>) -> est_core::Result<()> {
        let dir = self.out.join("checkpoints").join(format!("step-{:08}", c.step));
        c.save(&dir)?;
        c.log
            .write(&self.out.join("loss.csv"))?;
        self.log.line(&format!("checkpoint {}", dir.display()));
        Ok(())
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = TrainConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    for w in config.validate()? {
        eprintln!("warning: {w}");
    }
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let run_log = RunLog {
        path: args.out.join("run.log"),
    };
    write_file(&args.out.join("config"), &config.to_text())?;

    let mut trainer = match &args.resume {
        Some(dir) => {
            let ckpt = Checkpoint::<Real>::load(dir)?;
            if ckpt.config.hash() != config.hash() {
                bail!(
                    "checkpoint {} was written by a different config (hash {} vs {})",
                    dir.display(),
                    ckpt.config.hash(),
                    config.hash()
                );
            }
            run_log.line(&format!("resuming from {} at step {}", dir.display(), ckpt.step));
            Trainer::from_checkpoint(ckpt)?
        }
        None => Trainer::<Real>::new(config.clone())?,
    };
    run_log.line(&format!("start {} steps, mode {}, config {}", config.steps, config.mode, config.hash()));

    let evals_path = args.out.join("eval.csv");
    let mut evals = String::from("step,eval_loss\n");
    if args.resume.is_some() {
        // keep earlier evaluations that precede the resume point
        if let Ok(text) = fs::read_to_string(&evals_path) {
            for line in text.lines().skip(1) {
                let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if step.is_some_and(|s| s <= trainer.step()) {
                    let _ = writeln!(evals, "{line}");
                }
            }
        }
    }
    let mut observer = RunObserver {
        out: &args.out,
        log: &run_log,
        total: config.steps,
        progress_every: if args.progress_every > 0 {
            args.progress_every
        } else {
            (config.steps / 20).max(1)
        },
        evals,
    };
    let result = trainer.run(&mut observer);
    trainer.log().write(&args.out.join("loss.csv"))?;
    if let Err(e) = result {
        run_log.line(&format!("aborted: {e}"));
        return Err(anyhow!(e).context(format!("training stopped after step {}", trainer.step())));
    }

    let eval_loss = trainer.evaluate_val()?;
    let checkpoint = trainer.checkpoint();
    checkpoint.save(&args.out.join("final"))?;
    let costs = module_costs_with(&config.model, config.tokens_per_step(), config.backward_multiplier);
    let report = total_cost(&config.scheduler, &costs, config.model.n_layers);
    let last = trainer.log().last().ok_or_else(|| anyhow!("empty loss log"))?;
    let baseline = report.baseline_total;
    let summary = format!(
        "steps = {}\nmode = {}\nseed = {}\nconfig_hash = {}\nfinal_train_loss = {}\nfinal_eval_loss = {}\ntotal_flops = {}\nbaseline_flops = {}\nsavings_fraction = {}\npredicted_savings_fraction = {}\n",
        last.step,
        config.mode,
        config.seed,
        config.hash(),
        last.loss,
        eval_loss,
        last.cum_flops,
        baseline,
        1.0 - last.cum_flops / baseline,
        report.savings_fraction
    );
    write_file(&args.out.join("summary"), &summary)?;
    run_log.line("done");
    print!("{summary}");
    Ok(())
}

fn named_model(name: &str) -> Result<ModelConfig> {
    Ok(match name {
        "gpt2-base" => ModelConfig::gpt2_base(),
        "tinyllama" => ModelConfig::tinyllama(),
        "desk" => TrainConfig::desk_scale("").model,
        other => bail!("unknown model `{other}` (gpt2-base | tinyllama | desk)"),
    })
}

fn cmd_plan(args: PlanArgs) -> Result<()> {
    let mut dense = false;
    let (sched, model, tokens, multiplier) = if let Some(path) = &args.config {
        let c = TrainConfig::from_file(path)?;
        dense = c.mode == TrainMode::Dense;
        let tokens = c.tokens_per_step();
        let sched = match args.scale {
            Some(f) => c.scheduler.scaled(f)?,
            None => c.scheduler,
        };
        (sched, c.model, tokens, c.backward_multiplier)
    } else {
        let sched = match (&args.preset, &args.stages) {
            (Some(name), _) => SamplingScheduler::preset(name, args.scale)?,
            (None, Some(text)) => {
                let s = SamplingScheduler::parse_stages(text)?;
                match args.scale {
                    Some(f) => s.scaled(f)?,
                    None => s,
                }
            }
            (None, None) => bail!("give one of --config, --preset or --stages"),
        };
        let default_model = match args.preset.as_deref() {
            Some("practical-tinyllama") => "tinyllama",
            _ => "gpt2-base",
        };
        let model = named_model(args.model.as_deref().unwrap_or(default_model))?;
        let tokens = args.batch_size * model.seq_len as u64;
        (sched, model, tokens, args.backward_multiplier)
    };
    let costs = module_costs_with(&model, tokens, multiplier);
    let report = total_cost(&sched, &costs, model.n_layers);
    if args.csv {
        print!("{}", report.render_csv());
    } else {
        println!("schedule: {}", sched.format_stages());
        if dense {
            println!("note: this config trains in dense mode; the savings below apply to est mode");
        }
        println!(
            "model: {} layers, {} heads x {}, hidden {}, MLP {}, sequence {}; {} tokens per step",
            model.n_layers, model.n_heads, model.head_dim, model.hidden, model.mlp_inner, model.seq_len, tokens
        );
        println!("C_MHA = {:.6e}, C_MLP = {:.6e} FLOPs per layer-step", costs.c_mha, costs.c_mlp);
        print!("{}", report.render_text());
    }
    Ok(())
}

/// Parameters and evaluation corpus of a checkpoint.
fn checkpoint_and_corpus(ckpt: &Path, data: Option<&Path>) -> Result<(Checkpoint<Real>, est_core::harness::Corpus)> {
    let checkpoint = Checkpoint::<Real>::load(ckpt)?;
    let corpus = match data {
        Some(path) => load_corpus(path)?,
        None => load_corpora(&checkpoint.config)?.1,
    };
    corpus.check_vocab(checkpoint.config.model.vocab)?;
    Ok((checkpoint, corpus))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (c, corpus) = checkpoint_and_corpus(&args.ckpt, args.data.as_deref())?;
    let batches = args.batches.unwrap_or(c.config.eval_batches);
    let loss = evaluate(&c.params, &corpus, batches, c.config.batch_size)?;
    println!("step = {}", c.step);
    println!("batches = {batches}");
    println!("tokens = {}", batches * c.config.batch_size * c.config.model.seq_len);
    println!("eval_loss = {loss}");
    Ok(())
}

fn render_trace(e: &HessianTraceEstimate, batches: usize, seed: u64) -> String {
    format!(
        "trace = {}\nn_probes = {}\nstd_error = {}\nfd_epsilon = {}\nfd_step = {}\nbatches = {batches}\nseed = {seed}\n",
        e.value, e.n_probes, e.std_error, e.fd_epsilon, e.fd_step
    )
}

fn cmd_hessian_trace(args: HessianArgs) -> Result<()> {
    let (c, corpus) = checkpoint_and_corpus(&args.ckpt, args.data.as_deref())?;
    let params: ModelParams<f64> = c.params.cast();
    let batches = eval_batches(&corpus, TRACE_EVAL_BATCHES, TRACE_BATCH_SIZE, c.config.model.seq_len)?;
    let seed = args.seed.unwrap_or(c.config.seed);
    let est = model_hessian_trace(&params, &batches, args.probes, args.eps, seed)?;
    print!("{}", render_trace(&est, batches.len(), seed));
    let mut csv = String::from("trace,n_probes,std_error,fd_epsilon,fd_step\n");
    let _ = writeln!(csv, "{},{},{},{},{}", est.value, est.n_probes, est.std_error, est.fd_epsilon, est.fd_step);
    if args.check_eps {
        let fine = model_hessian_trace(&params, &batches, args.probes, args.eps / 10.0, seed)?;
        let stable = fd_stable(&est, &fine);
        println!("trace_at_eps_over_10 = {}", fine.value);
        println!("fd_stable = {stable}");
        let _ = writeln!(csv, "{},{},{},{},{}", fine.value, fine.n_probes, fine.std_error, fine.fd_epsilon, fine.fd_step);
        if !stable {
            eprintln!("warning: estimates at eps {} and {} differ by more than 10%", args.eps, args.eps / 10.0);
        }
    }
    if let Some(out) = &args.out {
        write_file(out, &csv)?;
    }
    Ok(())
}

fn default_level(a: &LossLog, b: &LossLog) -> Result<f64> {
    let stats = |log: &LossLog| {
        let s = smoothed(log.records(), SMOOTHING_WINDOW);
        let skip = SMOOTHING_WINDOW.saturating_sub(1).min(s.len().saturating_sub(1));
        let full = &s[skip..];
        let min = full.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        (full.first().map_or(f64::NAN, |p| p.1), min)
    };
    let ((start_a, min_a), (start_b, min_b)) = (stats(a), stats(b));
    let floor = min_a.max(min_b);
    let top = start_a.min(start_b);
    if !(floor.is_finite() && top.is_finite()) {
        bail!("logs are empty");
    }
    Ok(floor + 0.05 * (top - floor).max(0.0))
}

fn cmd_curves(args: CurvesArgs) -> Result<()> {
    let log = LossLog::read(&args.log)?;
    let ends = stage_ends_from_log(&log);
    let shortest = ends
        .iter()
        .scan(0, |prev, &e| {
            let len = e - *prev;
            *prev = e;
            Some(len)
        })
        .min()
        .unwrap_or(0);
    let window = args.window.unwrap_or(100.min(shortest));
    let mut csv = String::from("kind,log,step,stage,pre_mean,post_mean,drop,window,level,slope\n");
    let reports = if ends.len() > 1 {
        transition_drop_at(&log, &ends, window)?
    } else {
        Vec::new()
    };
    println!("transitions in {} (window {window}):", args.log.display());
    if reports.is_empty() {
        println!("  none (single stage)");
    }
    for r in &reports {
        println!(
            "  step {} (end of stage {}): pre {:.4} post {:.4} drop {:+.4}",
            r.step, r.stage, r.pre_mean, r.post_mean, r.drop
        );
        let _ = writeln!(
            csv,
            "transition,1,{},{},{},{},{},{},,",
            r.step, r.stage, r.pre_mean, r.post_mean, r.drop, r.window
        );
    }
    if let Some(path2) = &args.log2 {
        let log2 = LossLog::read(path2)?;
        let level = match args.level {
            Some(l) => l,
            None => default_level(&log, &log2)?,
        };
        let c = slope_compare(&log, &log2, level, args.slope_window)?;
        println!("slopes at loss {level:.4} (window {}):", args.slope_window);
        for (i, (path, s)) in [(&args.log, c.a), (path2, c.b)].into_iter().enumerate() {
            println!("  {}: crossing step {} slope {:.6e}", path.display(), s.crossing, s.slope);
            let _ = writeln!(
                csv,
                "slope,{},{},,,,,{},{},{}",
                i + 1,
                s.crossing,
                args.slope_window,
                level,
                s.slope
            );
        }
    }
    write_file(&args.out, &csv)
}

fn cmd_gen_corpus(args: GenCorpusArgs) -> Result<()> {
    let text = synth::generate(args.seed, args.bytes);
    write_file(&args.out, &text)?;
    println!("wrote {} bytes to {}", text.len(), args.out.display());
    Ok(())
}
