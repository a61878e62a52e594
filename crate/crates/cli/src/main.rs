//! `avr`: synthetic data generation, base training, novel-class evaluation,
//! gradient checking and pseudo-label inspection.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use avr_core::config::RunConfig;
use avr_core::datahub::{generate_synthetic_dataset, write_synthetic_dataset, LoadedSplit, Split};
use avr_core::eval::{evaluate, sample_eval_episode, tcam_csv, EvalMode, Evaluator};
use avr_core::model::{read_checkpoint, write_checkpoint, Checkpoint};
use avr_core::pseudo::{inspect_csv, inspect_split, PseudoConfig};
use avr_core::train::{base_accuracy, grad_check_fixture, train_base, write_log, TrainOptions};
use avr_core::Error;

#[derive(Parser)]
#[command(name = "avr", version, about = "Few-shot action recognition and localization with background pseudo-labels")]
#[command(after_long_help = RunConfig::help_text())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic base/novel dataset.
    GenData(Common),
    /// Train on the base split and write a checkpoint plus a loss log.
    Train(Common),
    /// Episodic K-way n-shot classification on the novel split.
    EvalCls(Common),
    /// Episodic detection (mAP) on the novel split.
    EvalDet(Common),
    /// Compare analytic and finite-difference gradients of the full objective.
    GradCheck(Common),
    /// Per-segment max logits and pseudo-label roles as CSV.
    Inspect(Common),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Module {
    Soft,
    Bg,
    Sw,
    Cl,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of the command's random stream (data, training or episodes).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Classes per episode.
    #[arg(long = "K")]
    way: Option<usize>,
    /// Support videos per class.
    #[arg(long = "n")]
    shot: Option<usize>,
    /// Query videos per class.
    #[arg(long = "q")]
    queries: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Disable a module; repeatable.
    #[arg(long, value_enum)]
    ablate: Vec<Module>,
    /// Worker threads for evaluation.
    #[arg(long)]
    jobs: Option<usize>,
    /// Split to inspect.
    #[arg(long, default_value = "base")]
    split: String,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy)]
enum Stream {
    Data,
    Train,
    Eval,
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::NonFiniteLoss { .. } => 3,
            _ => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn numeric(msg: String) -> Failure {
    Failure { code: 3, msg }
}

impl Common {
    /// Defaults, then the config file, then flags.
    fn resolve(&self, stream: Stream) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        self.apply_flags(&mut cfg, stream);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_flags(&self, cfg: &mut RunConfig, stream: Stream) {
        if let Some(s) = self.seed {
            match stream {
                Stream::Data => cfg.data.seed = s,
                Stream::Train => cfg.train.seed = s,
                Stream::Eval => cfg.eval.seed = s,
            }
        }
        if let Some(p) = &self.out {
            cfg.out_dir = p.clone();
        }
        if let Some(p) = &self.ckpt {
            cfg.ckpt = Some(p.clone());
        }
        if let Some(p) = &self.data {
            cfg.data_dir = p.clone();
        }
        if let Some(v) = self.way {
            cfg.eval.way = v;
        }
        if let Some(v) = self.shot {
            cfg.eval.shot = v;
        }
        if let Some(v) = self.queries {
            cfg.eval.queries = v;
        }
        if let Some(v) = self.episodes {
            cfg.eval.episodes = v;
        }
        if let Some(v) = self.jobs {
            cfg.eval.jobs = v;
        }
        let ab = &mut cfg.train.loss.ablation;
        for m in &self.ablate {
            match m {
                Module::Soft => ab.soft = false,
                Module::Bg => ab.bg = false,
                Module::Sw => ab.sw = false,
                Module::Cl => ab.cl = false,
            }
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn open_split(cfg: &RunConfig, split: Split) -> Result<LoadedSplit, Error> {
    LoadedSplit::open(&cfg.data_dir.join(format!("{split}.jsonl")))
}

fn gen_data(args: &Common) -> CmdResult {
    let mut cfg = args.resolve(Stream::Data)?;
    // For this command --out names the dataset directory.
    if let Some(p) = &args.out {
        cfg.data_dir = p.clone();
    }
    let ds = generate_synthetic_dataset(&cfg.data)?;
    write_synthetic_dataset(&ds, &cfg.data_dir)?;
    let s = ds.summary();
    println!("wrote {}", cfg.data_dir.display());
    println!("base: {} classes, {} videos", s.base_classes, s.base_videos);
    println!("novel: {} classes, {} videos", s.novel_classes, s.novel_videos);
    println!("segments: {}, feature dim: {}", s.segments, s.feature_dim);
    println!("novel classes sharing a base background concept: {:?}", s.overlap_classes);
    Ok(())
}

fn train(args: &Common) -> CmdResult {
    let cfg = args.resolve(Stream::Train)?;
    let base = open_split(&cfg, Split::Base)?;
    create_dir(&cfg.out_dir)?;
    let ckpt_path = cfg.checkpoint_path();
    let echo = cfg.echo();
    let opts = TrainOptions {
        last_good_path: Some(cfg.out_dir.join("last_good.ckpt")),
        config_echo: echo.clone(),
    };
    println!("training {} on {} base videos", cfg.train.loss.ablation.label(), base.sequences.len());
    let outcome = train_base(&base, &cfg.train, &opts)?;
    let log_path = cfg.out_dir.join("train_log.csv");
    write_log(&outcome.log, &log_path)?;
    write_checkpoint(
        &Checkpoint {
            params: outcome.params.clone(),
            config_echo: echo,
        },
        &ckpt_path,
    )?;
    if let Some(last) = outcome.log.last() {
        println!("final loss: {:.6}", last.loss.total);
    }
    println!("base accuracy: {:.2}", 100.0 * base_accuracy(&outcome.params, &base, &cfg.train)?);
    println!("checkpoint: {}", ckpt_path.display());
    println!("log: {}", log_path.display());
    Ok(())
}

/// The checkpoint plus the run config with its trained-model keys restored
/// from the checkpoint echo.
fn load_model(args: &Common) -> Result<(RunConfig, Checkpoint), Error> {
    let mut cfg = args.resolve(Stream::Eval)?;
    let path = cfg.checkpoint_path();
    let ckpt = read_checkpoint(&path)?;
    let trained = RunConfig::parse(&ckpt.config_echo)
        .map_err(|e| Error::Data(format!("{}: bad config echo: {e}", path.display())))?;
    cfg.train.loss = trained.train.loss;
    cfg.train.pseudo = trained.train.pseudo;
    cfg.train.model = trained.train.model;
    Ok((cfg, ckpt))
}

fn eval(args: &Common, mode: EvalMode) -> CmdResult {
    let (cfg, ckpt) = load_model(args)?;
    let novel = open_split(&cfg, Split::Novel)?;
    let evaluator = Evaluator {
        params: &ckpt.params,
        loss: &cfg.train.loss,
        t_a: cfg.eval.t_a,
    };
    let report = evaluate(&novel, &evaluator, &cfg.eval, mode)?;
    let name = match mode {
        EvalMode::Classification => "eval_cls",
        EvalMode::Detection => "eval_det",
    };
    create_dir(&cfg.out_dir)?;
    let csv_path = cfg.out_dir.join(format!("{name}.csv"));
    write_file(&csv_path, &report.csv())?;
    println!(
        "{} {}-way {}-shot, {} episodes",
        cfg.train.loss.ablation.label(),
        cfg.eval.way,
        cfg.eval.shot,
        cfg.eval.episodes
    );
    print!("{}", report.text());
    println!("per-episode CSV: {}", csv_path.display());
    if mode == EvalMode::Detection {
        let ep = sample_eval_episode(&novel, &cfg.eval, 0)?;
        let tcam_path = cfg.out_dir.join("tcam.csv");
        write_file(&tcam_path, &tcam_csv(&evaluator.episode_tcams(&ep)?))?;
        println!("TCAM of episode 0: {}", tcam_path.display());
    }
    Ok(())
}

fn grad_check(args: &Common) -> CmdResult {
    let cfg = args.resolve(Stream::Train)?;
    // Every fixture video counts as non-informative background so that all
    // loss terms carry gradient.
    let pseudo = PseudoConfig {
        t_n: 1.0,
        ..cfg.train.pseudo
    };
    let start = std::time::Instant::now();
    let (report, values) =
        grad_check_fixture(&cfg.train.loss, &pseudo, cfg.train.seed, cfg.grad_check_h, cfg.grad_check_tol)?;
    println!(
        "objective {}: L_total={:.6} L_cls={:.6} L_contrast={:.6} L_bg={:.6}",
        cfg.train.loss.ablation.label(),
        values.total,
        values.cls,
        values.contrast,
        values.bg
    );
    println!("coordinates: {}", report.coordinates);
    println!("max relative error: {:.3e} (tol {:.0e})", report.max_rel_error, report.tol);
    println!("elapsed: {:.2} s", start.elapsed().as_secs_f64());
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(numeric(format!(
            "gradient check failed at {:?}: analytic {} vs numeric {}",
            report.worst, report.analytic, report.numeric
        )))
    }
}

fn inspect(args: &Common) -> CmdResult {
    let (cfg, ckpt) = load_model(args)?;
    let split: Split = args
        .split
        .parse()
        .map_err(|_| Error::Config(format!("--split must be base or novel, got {:?}", args.split)))?;
    let data = open_split(&cfg, split)?;
    if data.feature_dim() != Some(ckpt.params.input_dim()) {
        return Err(Error::Data(format!(
            "{split} features have dimension {:?}, checkpoint expects {}",
            data.feature_dim(),
            ckpt.params.input_dim()
        ))
        .into());
    }
    if ckpt.params.num_classes() != data.manifest.class_labels.len() && split == Split::Base {
        return Err(Error::Data("checkpoint class count does not match the base split".into()).into());
    }
    let rows = inspect_split(&ckpt.params, &data, &cfg.train.pseudo)?;
    let path = cfg.out_dir.join(format!("inspect_{split}.csv"));
    write_file(&path, &inspect_csv(&rows))?;
    println!("{} segments from {} videos: {}", rows.len(), data.sequences.len(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::EvalCls(a) => eval(a, EvalMode::Classification),
        Command::EvalDet(a) => eval(a, EvalMode::Detection),
        Command::GradCheck(a) => grad_check(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
