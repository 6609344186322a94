use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use forgery_peft::config::{parse_pairs, Config};
use forgery_peft::evaluation::{
    ablate_ratio, cross_domain_eval, evaluate_scores, read_scores, robustness_eval, EvalProtocol, PerturbKind, MAX_SEVERITY,
    RATIOS,
};
use forgery_peft::gradsuite::{gradient_suite, DEFAULT_EPS, DEFAULT_TOLERANCE};
use forgery_peft::peft::count_trainable;
use forgery_peft::pipeline::{
    generate_synthetic_dataset, load_checkpoint, train_with, training_subset, write_log, Checkpoint, Dataset, Manifest,
    SynthSpec,
};
use forgery_peft::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "fpeft", version, about = "Parameter-efficient open-set deepfake detection", after_help = Config::help_text())]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Config file of `key=value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Config override, applied after the file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Root seed; overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress timestamps in log output.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic multi-domain dataset.
    SynthData,
    /// Fine-tune the PEFT modules and head.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Start from the parameters of an existing checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Cross-domain evaluation on the held-out domains.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, required_unless_present = "scores")]
        checkpoint: Option<PathBuf>,
        /// Evaluate a `path,score` CSV instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        scores: Option<PathBuf>,
    },
    /// AUC under every perturbation kind and severity.
    Robustness {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Perturbation kinds; all when omitted.
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<PerturbKind>,
    },
    /// Trainable parameter budget as JSON.
    CountParams,
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Held-out AUC across mixed-feature ratios.
    AblateRatio {
        #[arg(long)]
        manifest: PathBuf,
    },
}

enum Outcome {
    Ok,
    CheckFailed,
}

fn load_config(global: &Global) -> Result<Config> {
    let file_text = match &global.config {
        Some(path) => fs::read_to_string(path).map_err(|source| Error::Io { path: path.clone(), source })?,
        None => String::new(),
    };
    let mut pairs = parse_pairs(&file_text)?;
    for item in &global.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override `{item}` is not key=value")))?;
        pairs.push((k, v));
    }
    let mut config = Config::default();
    config.apply(pairs)?;
    if let Some(seed) = global.seed {
        config.train.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| Error::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(path, bytes).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())?;
    Ok(text)
}

fn load_dataset(manifest: &Path, config: &Config) -> Result<Dataset> {
    let manifest = Manifest::load(manifest)?;
    Dataset::load(&manifest, config.model.backbone.image_size)
}

fn eval_protocol(ckpt: &Checkpoint, config: &Config) -> Result<EvalProtocol> {
    EvalProtocol::for_checkpoint(ckpt, config.eval.target_domains.iter().copied(), config.eval.threshold)
}

fn run(cli: &Cli) -> Result<Outcome> {
    let config = load_config(&cli.global)?;
    let out = &cli.global.out;
    match &cli.command {
        Command::SynthData => {
            let spec = SynthSpec::from_config(&config);
            let manifest = generate_synthetic_dataset(out, &spec, config.train.seed)?;
            info!("wrote {} images to {}", manifest.entries.len(), out.display());
        }
        Command::Train { manifest, init } => {
            let dataset = load_dataset(manifest, &config)?;
            let init = match init {
                Some(path) => Some(load_checkpoint(path, &config.model)?.params),
                None => None,
            };
            let subset = training_subset(&dataset, &config);
            info!("training on {} images", subset.len());
            let result = train_with(&config, &subset, init, |_, _| {})?;
            result.checkpoint.save(&out.join("checkpoint.osfd"))?;
            let mut log = Vec::new();
            write_log(&result.log, &mut log)?;
            write_file(&out.join("train_log.jsonl"), &log)?;
        }
        Command::Eval { manifest, checkpoint, scores } => {
            let report = match (checkpoint, scores) {
                (Some(path), _) => {
                    let ckpt = Checkpoint::load(path)?;
                    let protocol = eval_protocol(&ckpt, &config)?;
                    let dataset = load_dataset(manifest, &ckpt.config)?;
                    cross_domain_eval(&ckpt, &dataset, &protocol)?
                }
                (None, Some(path)) => {
                    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.clone(), source })?;
                    let protocol = EvalProtocol::new(
                        config.train.domains.iter().copied(),
                        config.eval.target_domains.iter().copied(),
                        config.eval.threshold,
                    )?;
                    evaluate_scores(&Manifest::load(manifest)?, &read_scores(&text)?, &protocol)?
                }
                (None, None) => return Err(Error::InvalidConfig("eval needs --checkpoint or --scores".into())),
            };
            write_json(&out.join("eval_report.json"), &report)?;
            write_file(&out.join("eval_report.csv"), report.to_csv().as_bytes())?;
            println!("{}", report.to_csv().trim_end());
        }
        Command::Robustness { manifest, checkpoint, kinds } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let protocol = eval_protocol(&ckpt, &config)?;
            let dataset = load_dataset(manifest, &ckpt.config)?;
            let kinds = if kinds.is_empty() { PerturbKind::ALL.to_vec() } else { kinds.clone() };
            let severities: Vec<u8> = (0..=MAX_SEVERITY).collect();
            let report = robustness_eval(&ckpt, &dataset, &protocol, &kinds, &severities, config.train.seed)?;
            write_json(&out.join("robustness.json"), &report)?;
            write_file(&out.join("robustness.csv"), report.to_csv().as_bytes())?;
            println!("{}", report.to_csv().trim_end());
        }
        Command::CountParams => {
            let text = write_json(&out.join("param_budget.json"), &count_trainable(&config.model))?;
            print!("{text}");
        }
        Command::Gradcheck { eps, tolerance } => {
            let reports = gradient_suite(config.train.seed, *eps, *tolerance)?;
            let pass = reports.iter().all(|r| r.pass);
            write_json(&out.join("gradcheck.json"), &reports)?;
            for r in &reports {
                println!("{:<18} {} max_rel {:.3e}", r.label, if r.pass { "pass" } else { "FAIL" }, r.max_rel_error);
            }
            if !pass {
                return Ok(Outcome::CheckFailed);
            }
        }
        Command::AblateRatio { manifest } => {
            let dataset = load_dataset(manifest, &config)?;
            let report = ablate_ratio(&config, &dataset, &RATIOS)?;
            write_json(&out.join("ablation.json"), &report)?;
            write_file(&out.join("ablation.csv"), report.to_csv().as_bytes())?;
            println!("{}", report.to_csv().trim_end());
        }
    }
    Ok(Outcome::Ok)
}

fn init_logging(deterministic: bool) {
    let mut builder = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if deterministic {
        builder.format(|buf, record| writeln!(buf, "[{} {}] {}", record.level(), record.target(), record.args()));
    }
    let _ = builder.try_init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.global.deterministic);
    match run(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
