//! Command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gpdmm_core::TrainedGpdmm;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{AppError, AppResult};
use crate::experiment::{evaluate, run_mccv, run_search, train_run};
use crate::io::{load_dataset, read_sequence_csv, write_dataset, write_sequence_csv};
use crate::model_io::{load_model, save_model};
use crate::plots::{latent_svg, trajectory_svg};
use crate::report::{leaderboard_table, mccv_table, metrics_table};
use crate::split::mccv_split;
use crate::synth::{synth_generate, SynthSpec};

#[derive(Debug, Parser)]
#[command(name = "gpdmm", version, about = "Classify and continue motion sequences with a Gaussian process dynamical mixture model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the split's training sequences and write the model document.
    Train(ConfigArgs),
    /// Score a trained model on the split's test sequences.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Model document; defaults to `<output_dir>/model.gpdmm`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Monte Carlo cross-validation with validation-based early stopping.
    Mccv(ConfigArgs),
    /// Seeded random search over the configured space.
    Search(ConfigArgs),
    /// Write a synthetic dataset as a manifest plus CSV files.
    Synth(SynthArgs),
    /// Classify a CSV sequence, used whole as the prefix.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Continue a CSV prefix for `horizon` steps.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        horizon: usize,
        /// Class label to continue with instead of the classified one.
        #[arg(long)]
        class: Option<String>,
        /// Output CSV; defaults to standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// A config file plus one long-form flag per key.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML config file; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fourier_order: Option<usize>,
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    pub include_constant: Option<bool>,
    #[arg(long)]
    pub reduction_dims: Option<usize>,
    #[arg(long)]
    pub markov_order: Option<usize>,
    #[arg(long)]
    pub prefix_fraction: Option<f64>,
    #[arg(long)]
    pub fitc_count: Option<usize>,
    #[arg(long)]
    pub fitc_fraction: Option<f64>,
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    pub pooled: Option<bool>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub steps_per_phase: Option<usize>,
    #[arg(long)]
    pub polish_steps: Option<usize>,
    #[arg(long)]
    pub infer_steps: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub n_validation: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub dampening_window: Option<usize>,
    #[arg(long)]
    pub emission_variance: Option<f64>,
    #[arg(long)]
    pub dynamics_variance: Option<f64>,
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    pub plots: Option<bool>,
    #[arg(long, value_delimiter = ',', num_args = 2, value_name = "LO,HI")]
    pub search_fourier_order: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', num_args = 2, value_name = "LO,HI")]
    pub search_reduction_dims: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', num_args = 2, value_name = "LO,HI")]
    pub search_markov_order: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', num_args = 2, value_name = "LO,HI")]
    pub search_emission_variance: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', num_args = 2, value_name = "LO,HI")]
    pub search_dynamics_variance: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', num_args = 1.., value_name = "F,...")]
    pub search_fitc_fractions: Option<Vec<f64>>,
}

fn pair<T: Copy>(v: &[T]) -> [T; 2] {
    [v[0], v[1]]
}

impl ConfigArgs {
    /// Loads the config file, if any, and applies every flag given.
    pub fn resolve(&self) -> AppResult<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { c.$field = v.clone(); })*
            };
        }
        set!(
            output_dir,
            seed,
            fourier_order,
            include_constant,
            reduction_dims,
            markov_order,
            prefix_fraction,
            pooled,
            rounds,
            steps_per_phase,
            polish_steps,
            infer_steps,
            patience,
            n_validation,
            n_test,
            iterations,
            budget,
            emission_variance,
            dynamics_variance,
            plots
        );
        if let Some(m) = &self.manifest {
            c.manifest = Some(m.clone());
        }
        if let Some(v) = self.fitc_count {
            c.fitc_count = Some(v);
            c.fitc_fraction = None;
        }
        if let Some(v) = self.fitc_fraction {
            c.fitc_fraction = Some(v);
            c.fitc_count = None;
        }
        if let Some(v) = self.dampening_window {
            c.dampening_window = Some(v);
        }
        if let Some(v) = &self.search_fourier_order {
            c.search.fourier_order = pair(v);
        }
        if let Some(v) = &self.search_reduction_dims {
            c.search.reduction_dims = pair(v);
        }
        if let Some(v) = &self.search_markov_order {
            c.search.markov_order = pair(v);
        }
        if let Some(v) = &self.search_emission_variance {
            c.search.emission_variance = pair(v);
        }
        if let Some(v) = &self.search_dynamics_variance {
            c.search.dynamics_variance = pair(v);
        }
        if let Some(v) = &self.search_fitc_fractions {
            c.search.fitc_fractions = v.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Separable,
    Overlapping,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "separable")]
    pub suite: Suite,
    #[arg(long, default_value_t = 12)]
    pub features: usize,
    #[arg(long, default_value_t = 80)]
    pub length: usize,
    #[arg(long, default_value_t = 8)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving `manifest.toml` and `data/`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Collects log lines, echoes them to standard error and writes them next
/// to the other outputs.
struct RunLog {
    path: PathBuf,
    text: String,
}

impl RunLog {
    fn start(dir: &Path, command: &str, cfg: &RunConfig) -> AppResult<RunLog> {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        let mut text = format!("# gpdmm {command}\n# resolved config\n");
        for line in cfg.to_toml().lines() {
            let _ = writeln!(text, "#   {line}");
        }
        Ok(RunLog {
            path: dir.join(format!("{command}.log")),
            text,
        })
    }

    fn line(&mut self, msg: impl AsRef<str>) {
        eprintln!("{}", msg.as_ref());
        self.text.push_str(msg.as_ref());
        self.text.push('\n');
    }

    fn finish(self) -> AppResult<()> {
        fs::write(&self.path, self.text).map_err(|e| AppError::io(&self.path, e))
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> AppResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| AppError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn warn_undefined(log: &mut RunLog, d_avg: Option<f64>) {
    if d_avg.is_none() {
        log.line("warning: no test sequence was classified correctly; D_avg and the generation ratios are undefined");
    }
}

fn cmd_train(cfg: &RunConfig) -> AppResult<()> {
    let out = &cfg.output_dir;
    let mut log = RunLog::start(out, "train", cfg)?;
    let dataset = load_dataset(cfg.manifest_path()?)?;
    let split = mccv_split(&dataset, cfg.seed, cfg.n_validation, cfg.n_test)?;
    log.line(format!(
        "dataset `{}`: {} sequences, {} classes, {} features, length {}",
        dataset.name,
        dataset.sequences.len(),
        dataset.n_classes(),
        dataset.dim,
        dataset.length
    ));
    let run = train_run(&dataset, &split, cfg)?;
    let mut csv = String::from("round,phase,step,objective\n");
    for e in &run.log {
        let phase = serde_json::to_value(e.phase).expect("phase serializes");
        let _ = writeln!(csv, "{},{},{},{:?}", e.round, phase.as_str().unwrap_or(""), e.step, e.objective);
    }
    write(&out.join("train_log.csv"), csv)?;
    write(&out.join("split.json"), json(&split))?;
    save_model(&run.model, &out.join("model.gpdmm"))?;
    log.line(format!("rounds run: {}", run.rounds_run));
    if let (Some(r), Some(v)) = (run.best_round, &run.validation) {
        log.line(format!("kept round {r}: validation F1 {:.4}, D_avg {:?}", v.f1_macro, v.frechet_avg));
    }
    log.line(format!("final objective: {:?}", run.log.last().map(|e| e.objective)));
    if cfg.plots {
        write(&out.join("plots/latent.svg"), latent_svg(&run.model))?;
    }
    log.finish()
}

fn cmd_eval(cfg: &RunConfig, model_path: Option<&Path>) -> AppResult<()> {
    let out = &cfg.output_dir;
    let mut log = RunLog::start(out, "eval", cfg)?;
    let model_path = model_path.map(Path::to_path_buf).unwrap_or_else(|| out.join("model.gpdmm"));
    let model = load_model(&model_path)?;
    let dataset = load_dataset(cfg.manifest_path()?)?;
    let split = mccv_split(&dataset, cfg.seed, cfg.n_validation, cfg.n_test)?;
    let ev = evaluate(&model, &dataset, &split.test, cfg.prefix_fraction, cfg.dampening_window)?;
    for o in &ev.outcomes {
        log.line(format!(
            "{}: prefix {} steps, truth {}, predicted {}",
            o.source_id, o.prefix_length, o.truth, o.predicted
        ));
    }
    let table = metrics_table(&ev.report);
    write(&out.join("report.json"), json(&serde_json::json!({ "report": ev.report, "outcomes": ev.outcomes })))?;
    write(&out.join("report.txt"), &table)?;
    print!("{table}");
    warn_undefined(&mut log, ev.report.frechet_avg);
    if cfg.plots {
        for (o, item) in ev.outcomes.iter().zip(&ev.items) {
            write(&out.join(format!("plots/{}.svg", o.source_id)), trajectory_svg(item, &o.source_id, 0))?;
        }
    }
    log.finish()
}

fn cmd_mccv(cfg: &RunConfig) -> AppResult<()> {
    let out = &cfg.output_dir;
    let mut log = RunLog::start(out, "mccv", cfg)?;
    let dataset = load_dataset(cfg.manifest_path()?)?;
    let report = run_mccv(&dataset, cfg)?;
    for it in &report.iterations {
        log.line(format!(
            "iteration {} (split seed {}): kept round {:?} of {}, test F1 {:.4}, D_avg {:?}",
            it.iteration, it.split_seed, it.best_round, it.rounds_run, it.test.f1_macro, it.test.frechet_avg
        ));
    }
    let table = mccv_table(&report);
    write(&out.join("mccv.json"), json(&report))?;
    write(&out.join("mccv.txt"), &table)?;
    print!("{table}");
    if report.iterations.iter().any(|it| it.test.frechet_avg.is_none()) {
        warn_undefined(&mut log, None);
    }
    log.finish()
}

fn cmd_search(cfg: &RunConfig) -> AppResult<()> {
    let out = &cfg.output_dir;
    let mut log = RunLog::start(out, "search", cfg)?;
    let dataset = load_dataset(cfg.manifest_path()?)?;
    let board = run_search(&dataset, cfg)?;
    let table = leaderboard_table(&board);
    write(&out.join("leaderboard.json"), json(&board))?;
    write(&out.join("leaderboard.txt"), &table)?;
    print!("{table}");
    match board.entries.iter().find(|e| e.error.is_none()) {
        Some(best) => {
            let best_cfg = best.candidate.apply(cfg);
            write(&out.join("best_config.toml"), best_cfg.to_toml())?;
            log.line(format!("best candidate: {}", best.candidate_index));
        }
        None => log.line("warning: every candidate failed"),
    }
    log.finish()
}

fn cmd_synth(args: &SynthArgs) -> AppResult<()> {
    let spec = match args.suite {
        Suite::Separable => SynthSpec::separable(args.features, args.length, args.trials),
        Suite::Overlapping => SynthSpec::overlapping(args.features, args.length, args.trials),
    };
    let dataset = synth_generate(&spec, args.seed)?;
    let manifest = write_dataset(&dataset, &args.out, "radians")?;
    eprintln!("wrote {} sequences and {}", dataset.sequences.len(), manifest.display());
    Ok(())
}

fn read_input(model: &TrainedGpdmm, path: &Path) -> AppResult<nalgebra::DMatrix<f64>> {
    read_sequence_csv(path, model.output_dims())
}

#[derive(Serialize)]
struct ClassifyOutput<'a> {
    predicted: &'a str,
    posterior: Vec<(&'a str, f64)>,
    log_scores: Vec<(&'a str, f64)>,
}

fn cmd_classify(model_path: &Path, input: &Path) -> AppResult<()> {
    let model = load_model(model_path)?;
    let prefix = read_input(&model, input)?;
    let r = model.classify(&prefix)?;
    let labels = &model.class_labels;
    let out = ClassifyOutput {
        predicted: &labels[r.predicted],
        posterior: labels.iter().map(String::as_str).zip(r.posterior.iter().copied()).collect(),
        log_scores: labels.iter().map(String::as_str).zip(r.log_scores.iter().copied()).collect(),
    };
    print!("{}", json(&out));
    Ok(())
}

fn cmd_generate(model_path: &Path, input: &Path, horizon: usize, class: Option<&str>, output: Option<&Path>) -> AppResult<()> {
    let model = load_model(model_path)?;
    let prefix = read_input(&model, input)?;
    let hint = match class {
        Some(label) => Some(
            model
                .class_labels
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| AppError::Usage(format!("unknown class `{label}`")))?,
        ),
        None => None,
    };
    let g = model.generate(&prefix, hint, horizon)?;
    eprintln!("continuing with class {}", model.class_labels[g.class_used]);
    match output {
        Some(p) => write_sequence_csv(p, &g.observations),
        None => {
            let mut s = String::new();
            for row in g.observations.row_iter() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(s, "{}", cells.join(","));
            }
            print!("{s}");
            Ok(())
        }
    }
}

pub fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Train(args) => cmd_train(&args.resolve()?),
        Command::Eval { config, model } => cmd_eval(&config.resolve()?, model.as_deref()),
        Command::Mccv(args) => cmd_mccv(&args.resolve()?),
        Command::Search(args) => cmd_search(&args.resolve()?),
        Command::Synth(args) => cmd_synth(&args),
        Command::Classify { model, input } => cmd_classify(&model, &input),
        Command::Generate {
            model,
            input,
            horizon,
            class,
            output,
        } => cmd_generate(&model, &input, horizon, class.as_deref(), output.as_deref()),
    }
}
