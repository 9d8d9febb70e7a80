//! Command-line front end for the shadow workbench: dataset sampling,
//! training, tomographic evaluation, bottleneck sweeps, prompt tasks,
//! and latent-space analysis, all writing reproducible run directories
//! with manifests.

mod config;
mod error;
mod io;
mod manifest;
mod svg;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use shadowcat_core::analysis::{cluster_scores, extract_latents, tsne, EmbedConfig};
use shadowcat_core::eval::{evaluate, ModelSampler, PhasePoint};
use shadowcat_core::model::ModelParams;
use shadowcat_core::qsim::{make_ghz, ObservableString, Outcome, StateVector};
use shadowcat_core::shadows::{reconstruct_mc, sample_shadow};
use shadowcat_core::tasks::{
    classification_battery, coherence_battery, ood_interpolation, run_prompt, PromptSpec,
};
use shadowcat_core::train::{train_with_hyperparams, Checkpoint, ShadowSource};
use shadowcat_core::rng::Stream;

use config::{parse_beta, Config};
use error::CliError;
use manifest::ManifestWriter;

/// Environment variable naming the default parent of run directories.
const RUN_ROOT_ENV: &str = "SHADOWCAT_RUN_ROOT";

/// Like `println!`, but a closed pipe (e.g. piping into `head`) ends
/// the process quietly instead of panicking.
macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        if writeln!(std::io::stdout(), $($arg)*).is_err() {
            std::process::exit(0);
        }
    }};
}

#[derive(Parser)]
#[command(name = "shadowcat", version, about = "GHZ classical-shadow language-model workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every configurable subcommand; each one overrides
/// the config file, which overrides the built-in defaults.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// qubit count
    #[arg(short = 'n', long)]
    n: Option<usize>,
    /// bottleneck weight, a float or a `2^k` literal
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// shadows per tomographic evaluation
    #[arg(long)]
    shadows: Option<usize>,
    #[arg(long)]
    eval_seed: Option<u64>,
    /// trials per prompt
    #[arg(long)]
    trials: Option<usize>,
    /// print the fully resolved configuration and exit
    #[arg(long)]
    show_config: bool,
}

impl Overrides {
    fn resolve(&self) -> Result<Config, CliError> {
        let mut c = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        if let Some(n) = self.n {
            c.num_qubits = n;
        }
        if let Some(b) = &self.beta {
            c.beta = parse_beta(b).map_err(CliError::Usage)?;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(s) = self.steps {
            c.steps = s;
        }
        if let Some(b) = self.batch_size {
            c.batch_size = b;
        }
        if let Some(l) = self.learning_rate {
            c.learning_rate = l;
        }
        if let Some(m) = self.shadows {
            c.eval_shadows = m;
        }
        if let Some(s) = self.eval_seed {
            c.eval_seed = s;
        }
        if let Some(t) = self.trials {
            c.task_trials = t;
        }
        Ok(c)
    }

    /// Handle --show-config; returns true when the command should stop.
    fn maybe_show(&self, c: &Config) -> Result<bool, CliError> {
        if self.show_config {
            outln!(
                "{}",
                serde_json::to_string_pretty(c).map_err(CliError::runtime)?
            );
        }
        Ok(self.show_config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample a classical-shadow dataset from the exact cat state
    Sample {
        #[command(flatten)]
        opts: Overrides,
        /// number of shadows
        #[arg(long)]
        count: usize,
        /// output dataset file (tab-separated, one shadow per line)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on shadows of the cat state
    Train {
        #[command(flatten)]
        opts: Overrides,
        /// run directory; defaults under $SHADOWCAT_RUN_ROOT
        #[arg(long)]
        out: Option<PathBuf>,
        /// train from a fixed dataset file instead of fresh samples
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Tomographic evaluation of a trained checkpoint
    Eval {
        #[command(flatten)]
        opts: Overrides,
        /// checkpoint file or run directory
        #[arg(long)]
        ckpt: PathBuf,
        /// also run the prompt batteries and record their accuracies
        #[arg(long)]
        with_tasks: bool,
    },
    /// Train and evaluate a grid of (beta, seed) points
    Sweep {
        #[command(flatten)]
        opts: Overrides,
        /// comma-separated beta values (floats or `2^k` literals)
        #[arg(long, allow_hyphen_values = true)]
        betas: String,
        /// comma-separated seeds
        #[arg(long, default_value = "1")]
        seeds: String,
        /// sweep root directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// also run the prompt batteries per point
        #[arg(long)]
        with_tasks: bool,
    },
    /// Complete a single prompt many times and tally the blank
    Prompt {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        ckpt: PathBuf,
        /// observable string, e.g. ZZZZZ
        #[arg(long)]
        x: String,
        /// outcome prefix for all but the last position, e.g. ++++
        #[arg(long, allow_hyphen_values = true)]
        prefix: String,
    },
    /// Run the full prompt batteries against a checkpoint
    Tasks {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Extract latents, embed with t-SNE, and score cluster structure
    Latents {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Export the reconstructed density matrix (CSV and SVG heat map)
    Report {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version print to stdout and succeed; real
            // usage mistakes exit 1 per the documented contract
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = dispatch(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Sample { opts, count, out } => cmd_sample(&opts, count, &out),
        Command::Train { opts, out, data } => {
            cmd_train(&opts, out.as_deref(), data.as_deref()).map(|_| ())
        }
        Command::Eval {
            opts,
            ckpt,
            with_tasks,
        } => cmd_eval(&opts, &ckpt, with_tasks),
        Command::Sweep {
            opts,
            betas,
            seeds,
            out,
            with_tasks,
        } => cmd_sweep(&opts, &betas, &seeds, out.as_deref(), with_tasks),
        Command::Prompt {
            opts,
            ckpt,
            x,
            prefix,
        } => cmd_prompt(&opts, &ckpt, &x, &prefix),
        Command::Tasks { opts, ckpt } => cmd_tasks(&opts, &ckpt),
        Command::Latents { opts, ckpt } => cmd_latents(&opts, &ckpt),
        Command::Report { opts, ckpt } => cmd_report(&opts, &ckpt),
    }
}

fn cat_state(c: &Config) -> Result<StateVector, CliError> {
    make_ghz(c.num_qubits).map_err(CliError::runtime)
}

/// Accept either a checkpoint file or a run directory holding ckpt.bin.
fn checkpoint_path(given: &Path) -> PathBuf {
    if given.is_dir() {
        given.join("ckpt.bin")
    } else {
        given.to_path_buf()
    }
}

fn load_checkpoint(given: &Path) -> Result<(Checkpoint, PathBuf), CliError> {
    let path = checkpoint_path(given);
    // a run directory carries a manifest; refuse to consume a run whose
    // files no longer match their recorded digests
    let dir = run_dir_of(&path);
    if dir.join("manifest.json").exists() {
        manifest::verify(&dir)?;
    }
    let ckpt = io::read_checkpoint(&path)?;
    Ok((ckpt, path))
}

/// File-backed shadow source: draws uniformly with replacement from a
/// fixed dataset, so training sees a finite sample rather than the
/// exact distribution.
struct DatasetSource(shadowcat_core::ShadowBatch);

impl ShadowSource for DatasetSource {
    fn draw(&self, rng: &mut Stream) -> shadowcat_core::Shadow {
        self.0.shadows()[rng.below(self.0.len())].clone()
    }
}

/// Run directory for out-of-place commands: the checkpoint's parent.
fn run_dir_of(ckpt_path: &Path) -> PathBuf {
    ckpt_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn default_run_dir(c: &Config) -> PathBuf {
    let root = std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(format!("n{}-beta{}-seed{}", c.num_qubits, c.beta, c.seed))
}

fn cmd_sample(opts: &Overrides, count: usize, out: &Path) -> Result<(), CliError> {
    let c = opts.resolve()?;
    if opts.maybe_show(&c)? {
        return Ok(());
    }
    let state = cat_state(&c)?;
    let mut rng = Stream::new(c.seed);
    let shadows: Vec<_> = (0..count).map(|_| sample_shadow(&state, &mut rng)).collect();
    io::write_dataset(out, &shadows)?;
    outln!("wrote {count} shadows to {}", out.display());
    Ok(())
}

fn cmd_train(
    opts: &Overrides,
    out: Option<&Path>,
    data: Option<&Path>,
) -> Result<PathBuf, CliError> {
    let c = opts.resolve()?;
    if opts.maybe_show(&c)? {
        return Ok(PathBuf::new());
    }
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| default_run_dir(&c));
    let source: Box<dyn ShadowSource> = match data {
        Some(path) => {
            let batch = io::read_dataset(path)?;
            if batch.num_qubits() != Some(c.num_qubits) {
                return Err(CliError::Usage(format!(
                    "dataset {} does not hold {}-qubit shadows",
                    path.display(),
                    c.num_qubits
                )));
            }
            Box::new(DatasetSource(batch))
        }
        None => Box::new(cat_state(&c)?),
    };
    let mut w = ManifestWriter::new(&dir, "train", c.clone());
    w.begin("train");
    let outcome = train_with_hyperparams(&c.train_config(), c.hyperparams(), source.as_ref())
        .map_err(CliError::runtime)?;
    w.begin("write");
    let ckpt_bytes = outcome.checkpoint.to_bytes();
    w.emit("ckpt.bin", &ckpt_bytes)?;
    w.set_checkpoint_digest(io::sha256_hex(&ckpt_bytes));
    w.emit("metrics.csv", io::metrics_csv(&outcome.metrics).as_bytes())?;
    w.finish()?;
    let last = outcome.metrics.last();
    outln!(
        "trained {} steps (plateau: {}), final loss {}, run dir {}",
        outcome.checkpoint.step,
        outcome.stopped_by_plateau,
        last.map(|m| m.total.to_string()).unwrap_or_else(|| "n/a".into()),
        dir.display()
    );
    Ok(dir)
}

/// Evaluate a checkpoint: tomography against the cat state, optionally
/// the prompt batteries, then one phase-CSV row in the run directory.
fn phase_point(
    params: &ModelParams,
    c: &Config,
    with_tasks: bool,
) -> Result<PhasePoint, CliError> {
    let n = params.hyperparams().num_qubits;
    let state = make_ghz(n).map_err(CliError::runtime)?;
    let sampler = ModelSampler::new(params);
    let report = evaluate(&sampler, &state, c.eval_shadows, c.eval_seed)
        .map_err(CliError::runtime)?;
    let (cat_task_acc, xtest_acc) = if with_tasks {
        let cls = classification_battery(params, &state, c.task_trials, c.eval_seed)
            .map_err(CliError::runtime)?;
        let coh = coherence_battery(params, &state, c.task_trials, c.eval_seed)
            .map_err(CliError::runtime)?;
        (Some(cls.combined_accuracy), Some(coh.x_test_accuracy))
    } else {
        (None, None)
    };
    Ok(PhasePoint {
        beta: params.hyperparams().beta,
        num_qubits: n,
        seed: c.seed,
        shadow_count: report.shadow_count,
        fidelity: report.fidelity,
        entropy_bits: report.entropy_bits,
        clamp_mass: report.clamp_mass,
        cat_task_acc,
        xtest_acc,
    })
}

fn cmd_eval(opts: &Overrides, ckpt: &Path, with_tasks: bool) -> Result<(), CliError> {
    let mut c = opts.resolve()?;
    let (checkpoint, ckpt_path) = load_checkpoint(ckpt)?;
    c.seed = checkpoint.config.seed;
    if opts.maybe_show(&c)? {
        return Ok(());
    }
    let dir = run_dir_of(&ckpt_path);
    let mut w = ManifestWriter::new(&dir, "eval", c.clone());
    w.set_checkpoint_digest(io::digest_file(&ckpt_path)?);
    w.begin("eval");
    let point = phase_point(&checkpoint.params, &c, with_tasks)?;
    w.begin("write");
    w.emit("phase.csv", io::phase_csv(std::slice::from_ref(&point)).as_bytes())?;
    w.finish()?;
    outln!(
        "{}",
        serde_json::to_string_pretty(&point).map_err(CliError::runtime)?
    );
    Ok(())
}

fn parse_list<T, F: Fn(&str) -> Result<T, String>>(s: &str, f: F) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| f(p).map_err(CliError::Usage))
        .collect()
}

fn cmd_sweep(
    opts: &Overrides,
    betas: &str,
    seeds: &str,
    out: Option<&Path>,
    with_tasks: bool,
) -> Result<(), CliError> {
    let base = opts.resolve()?;
    if opts.maybe_show(&base)? {
        return Ok(());
    }
    let betas = parse_list(betas, parse_beta)?;
    let seeds = parse_list(seeds, |s| {
        s.parse::<u64>().map_err(|_| format!("bad seed '{s}'"))
    })?;
    let root = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| {
            std::env::var_os(RUN_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
        });
    let mut points: Vec<PhasePoint> = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    for &beta in &betas {
        for &seed in &seeds {
            let mut c = base.clone();
            c.beta = beta;
            c.seed = seed;
            let dir = root.join(format!("n{}-beta{}-seed{}", c.num_qubits, beta, seed));
            let result = sweep_point(&c, &dir, with_tasks);
            match result {
                Ok(p) => points.push(p),
                Err(e) => {
                    let line = format!("beta {beta} seed {seed}: {e}");
                    eprintln!("sweep point failed: {line}");
                    failures.push(line);
                }
            }
        }
    }
    let mut w = ManifestWriter::new(&root, "sweep", base);
    w.emit("phase.csv", io::phase_csv(&points).as_bytes())?;
    if !failures.is_empty() {
        w.emit("failures.txt", (failures.join("\n") + "\n").as_bytes())?;
    }
    w.finish()?;
    outln!(
        "sweep complete: {} points, {} failures, phase table at {}",
        points.len(),
        failures.len(),
        root.join("phase.csv").display()
    );
    Ok(())
}

fn sweep_point(c: &Config, dir: &Path, with_tasks: bool) -> Result<PhasePoint, CliError> {
    let state = cat_state(c)?;
    let mut w = ManifestWriter::new(dir, "sweep-point", c.clone());
    w.begin("train");
    let outcome = train_with_hyperparams(&c.train_config(), c.hyperparams(), &state)
        .map_err(CliError::runtime)?;
    w.begin("eval");
    let point = phase_point(&outcome.checkpoint.params, c, with_tasks)?;
    w.begin("write");
    let ckpt_bytes = outcome.checkpoint.to_bytes();
    w.emit("ckpt.bin", &ckpt_bytes)?;
    w.set_checkpoint_digest(io::sha256_hex(&ckpt_bytes));
    w.emit("metrics.csv", io::metrics_csv(&outcome.metrics).as_bytes())?;
    w.emit("phase.csv", io::phase_csv(std::slice::from_ref(&point)).as_bytes())?;
    w.finish()?;
    Ok(point)
}

fn parse_prefix(s: &str) -> Result<Vec<Outcome>, CliError> {
    s.chars()
        .map(|ch| {
            Outcome::from_token(ch)
                .ok_or_else(|| CliError::Usage(format!("bad outcome token '{ch}' in prefix")))
        })
        .collect()
}

fn cmd_prompt(opts: &Overrides, ckpt: &Path, x: &str, prefix: &str) -> Result<(), CliError> {
    let c = opts.resolve()?;
    let (checkpoint, _) = load_checkpoint(ckpt)?;
    if opts.maybe_show(&c)? {
        return Ok(());
    }
    let x = ObservableString::parse(x).map_err(|e| CliError::Usage(e.to_string()))?;
    let prefix = parse_prefix(prefix)?;
    let n = checkpoint.params.hyperparams().num_qubits;
    let state = make_ghz(n).map_err(CliError::runtime)?;
    let spec = PromptSpec::new(x, prefix, c.task_trials)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let result = run_prompt(&checkpoint.params, &state, &spec, c.eval_seed)
        .map_err(CliError::runtime)?;
    outln!(
        "{}",
        serde_json::to_string_pretty(&result).map_err(CliError::runtime)?
    );
    Ok(())
}

fn cmd_tasks(opts: &Overrides, ckpt: &Path) -> Result<(), CliError> {
    let c = opts.resolve()?;
    let (checkpoint, ckpt_path) = load_checkpoint(ckpt)?;
    if opts.maybe_show(&c)? {
        return Ok(());
    }
    let params = &checkpoint.params;
    let n = params.hyperparams().num_qubits;
    let state = make_ghz(n).map_err(CliError::runtime)?;
    let classification = classification_battery(params, &state, c.task_trials, c.eval_seed)
        .map_err(CliError::runtime)?;
    let coherence = coherence_battery(params, &state, c.task_trials, c.eval_seed)
        .map_err(CliError::runtime)?;
    let interpolation =
        ood_interpolation(params, c.task_trials, c.eval_seed).map_err(CliError::runtime)?;
    let report = serde_json::json!({
        "classification": classification,
        "coherence": coherence,
        "interpolation": interpolation,
    });
    let text = serde_json::to_string_pretty(&report).map_err(CliError::runtime)?;
    let dir = run_dir_of(&ckpt_path);
    let mut w = ManifestWriter::new(&dir, "tasks", c);
    w.set_checkpoint_digest(io::digest_file(&ckpt_path)?);
    w.emit("tasks.json", text.as_bytes())?;
    w.finish()?;
    outln!("{text}");
    Ok(())
}

fn cmd_latents(opts: &Overrides, ckpt: &Path) -> Result<(), CliError> {
    let c = opts.resolve()?;
    let (checkpoint, ckpt_path) = load_checkpoint(ckpt)?;
    if opts.maybe_show(&c)? {
        return Ok(());
    }
    let dir = run_dir_of(&ckpt_path);
    let mut w = ManifestWriter::new(&dir, "latents", c.clone());
    w.set_checkpoint_digest(io::digest_file(&ckpt_path)?);
    w.begin("extract");
    let points = extract_latents(&checkpoint.params).map_err(CliError::runtime)?;
    let scores = cluster_scores(&points, c.tsne_seed).map_err(CliError::runtime)?;
    w.begin("embed");
    let mut embed = EmbedConfig::defaults(c.tsne_seed);
    embed.perplexity = c.perplexity.min((points.len() as f64 / 3.0) - 1.0);
    embed.iterations = c.tsne_iterations;
    let vectors: Vec<Vec<f64>> = points.iter().map(|p| p.vector.clone()).collect();
    let embedding = tsne(&vectors, &embed).map_err(CliError::runtime)?;
    w.begin("write");
    w.emit("latents.csv", io::latents_csv(&points).as_bytes())?;
    w.emit(
        "embedding.csv",
        io::embedding_csv(&points, &embedding.coordinates).as_bytes(),
    )?;
    w.emit(
        "embedding.svg",
        svg::embedding_svg(&points, &embedding.coordinates).as_bytes(),
    )?;
    let text = serde_json::to_string_pretty(&scores).map_err(CliError::runtime)?;
    w.emit("clusters.json", text.as_bytes())?;
    w.finish()?;
    outln!("{text}");
    Ok(())
}

fn cmd_report(opts: &Overrides, ckpt: &Path) -> Result<(), CliError> {
    let c = opts.resolve()?;
    let (checkpoint, ckpt_path) = load_checkpoint(ckpt)?;
    if opts.maybe_show(&c)? {
        return Ok(());
    }
    let dir = run_dir_of(&ckpt_path);
    let mut w = ManifestWriter::new(&dir, "report", c.clone());
    w.set_checkpoint_digest(io::digest_file(&ckpt_path)?);
    w.begin("reconstruct");
    let sampler = ModelSampler::new(&checkpoint.params);
    let batch = shadowcat_core::eval::generate_model_shadows(&sampler, c.eval_shadows, c.eval_seed)
        .map_err(CliError::runtime)?;
    let rho = reconstruct_mc(&batch).map_err(CliError::runtime)?;
    w.begin("write");
    w.emit("rho.csv", io::rho_csv(&rho).as_bytes())?;
    w.emit("rho.svg", svg::rho_svg(&rho).as_bytes())?;
    w.finish()?;
    outln!(
        "wrote {} and {}",
        dir.join("rho.csv").display(),
        dir.join("rho.svg").display()
    );
    Ok(())
}
