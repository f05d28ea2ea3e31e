//! `galr`: train, run and inspect GALR separators.
//!
//! Every failure prints one line `error[<kind>]: <reason>` to stderr and exits
//! with a nonzero status.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use galr_core::cost::{arch_hyperparams, flops_estimate, table_reports, to_csv};
use galr_core::frontend::DEFAULT_SAMPLE_RATE;
use galr_core::gradcheck::suite;
use galr_core::io::{load_checkpoint, save_checkpoint, wav_read, wav_write, RunConfig};
use galr_core::training::{
    ablate, gen_synthetic, score_separation, train, LrSchedule, TrainConfig,
};
use galr_core::{Arch, Error, HyperParams, Result, SeparatorModel};

#[derive(Parser)]
#[command(
    name = "galr",
    version,
    about = "Globally attentive locally recurrent source separation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic mixtures as described by a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `paths.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `paths.metrics`; without either, metrics go to stdout.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Split a mixture WAV into one WAV per source (`<stem>_src1.wav`, ...).
    Separate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to the input's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// SI-SNR and SI-SNRi of a model's outputs against reference WAVs.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        refs: Vec<PathBuf>,
    },
    /// Analytic FLOPs / parameter / memory report.
    Cost(CostArgs),
    /// Finite-difference check of every gradient, in f64.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seed: u64,
    },
    /// Train the four local/global block variants on the same data.
    Ablate(AblateArgs),
    /// Write one head's inter-segment attention matrices as CSV.
    AttnDump {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        block: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CostArgs {
    #[arg(long, default_value = "galr")]
    arch: String,
    #[arg(long = "D", default_value_t = 64)]
    d: usize,
    #[arg(long = "M", default_value_t = 16)]
    m: usize,
    #[arg(long = "K", default_value_t = 100)]
    k: usize,
    #[arg(long = "Q", default_value_t = 32)]
    q: usize,
    #[arg(long = "H")]
    h: Option<usize>,
    #[arg(long = "J")]
    j: Option<usize>,
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long = "C")]
    c: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    seconds: f64,
    /// Print CSV instead of the text report.
    #[arg(long)]
    csv: bool,
    /// Report every published configuration for GALR and DPRNN as CSV.
    #[arg(long, conflicts_with_all = ["csv", "arch"])]
    table: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Toy model and a budget of a few CPU-minutes.
    #[arg(long, conflicts_with = "config")]
    toy: bool,
    /// Model, training and data settings from a run config.
    #[arg(long, required_unless_present = "toy")]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let reason = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", reason.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let prefix = format!("{} error: ", e.kind());
            eprintln!(
                "error[{}]: {}",
                e.kind(),
                msg.strip_prefix(&prefix).unwrap_or(&msg)
            );
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            checkpoint,
            metrics,
        } => run_train(&config, checkpoint, metrics),
        Command::Separate {
            model,
            input,
            out_dir,
        } => run_separate(&model, &input, out_dir),
        Command::Eval {
            model,
            mixture,
            refs,
        } => run_eval(&model, &mixture, &refs),
        Command::Cost(args) => run_cost(&args),
        Command::Gradcheck { seed } => run_gradcheck(seed),
        Command::Ablate(args) => run_ablate(&args),
        Command::AttnDump {
            model,
            input,
            block,
            head,
            out,
        } => run_attn_dump(&model, &input, block, head, &out),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn run_train(config: &Path, checkpoint: Option<PathBuf>, metrics: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let checkpoint = checkpoint.or(cfg.paths.checkpoint.clone()).ok_or_else(|| {
        Error::Usage("no checkpoint path: set paths.checkpoint or pass --checkpoint".into())
    })?;
    let metrics = metrics.or(cfg.paths.metrics.clone());
    let train_set = gen_synthetic(&cfg.data.train_set(cfg.model.c))?;
    let val_set = gen_synthetic(&cfg.data.val_set(cfg.model.c))?;
    let mut model = SeparatorModel::new(cfg.model, cfg.train.seed)?;

    let mut sink: Box<dyn Write> = match &metrics {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut write_err = None;
    let report = train(&mut model, &train_set, &val_set, &cfg.train, |m| {
        if write_err.is_none() {
            if let Err(e) = writeln!(sink, "{}", m.to_json_line()).and_then(|_| sink.flush()) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(metrics.as_deref().unwrap_or(Path::new("<stdout>")))(
            e,
        ));
    }
    save_checkpoint(&model, &checkpoint)?;
    let best = report
        .history
        .iter()
        .find(|m| m.split == "val" && m.epoch == report.best_epoch)
        .and_then(|m| m.si_snri)
        .unwrap_or(f64::NAN);
    eprintln!(
        "trained {} epochs (best {}, val SI-SNRi {best:.2} dB{}); checkpoint {}",
        report.epochs_run,
        report.best_epoch,
        if report.stopped_early {
            ", stopped early"
        } else {
            ""
        },
        checkpoint.display()
    );
    Ok(())
}

fn run_separate(model: &Path, input: &Path, out_dir: Option<PathBuf>) -> Result<()> {
    let model = load_checkpoint(model)?;
    let mix = wav_read(input)?;
    let outputs = model.separate(&mix)?;
    let dir = out_dir.unwrap_or_else(|| input.parent().map(Path::to_path_buf).unwrap_or_default());
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "mixture".into());
    for (c, w) in outputs.iter().enumerate() {
        let path = dir.join(format!("{stem}_src{}.wav", c + 1));
        wav_write(&path, w)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run_eval(model: &Path, mixture: &Path, refs: &[PathBuf]) -> Result<()> {
    let model = load_checkpoint(model)?;
    if refs.len() != model.hp.c {
        return Err(Error::Usage(format!(
            "model separates {} sources but {} references were given",
            model.hp.c,
            refs.len()
        )));
    }
    let mix = wav_read(mixture)?;
    let targets = refs.iter().map(wav_read).collect::<Result<Vec<_>>>()?;
    if let Some(t) = targets.iter().find(|t| t.len() != mix.len()) {
        return Err(Error::Input(format!(
            "reference has {} samples, mixture has {}",
            t.len(),
            mix.len()
        )));
    }
    let estimates = model.separate(&mix)?;
    let m = score_separation(&mix, &estimates, &targets)?;
    println!(
        "{}",
        serde_json::json!({ "si_snr_db": m.si_snr, "si_snri_db": m.si_snri, "loss": m.loss })
    );
    Ok(())
}

fn run_cost(a: &CostArgs) -> Result<()> {
    if a.table {
        print!(
            "{}",
            to_csv(&table_reports(a.seconds, DEFAULT_SAMPLE_RATE)?)
        );
        return Ok(());
    }
    let arch: Arch = a.arch.parse()?;
    let defaults = HyperParams::default();
    let hp = HyperParams {
        h: a.h.unwrap_or(defaults.h),
        j: a.j.unwrap_or(defaults.j),
        n: a.n.unwrap_or(defaults.n),
        c: a.c.unwrap_or(defaults.c),
        ..arch_hyperparams(arch, a.d, a.m, a.k, a.q)?
    };
    if !(a.seconds > 0.0) {
        return Err(Error::Usage(format!(
            "--seconds must be positive, got {}",
            a.seconds
        )));
    }
    let report = flops_estimate(&hp, a.seconds, DEFAULT_SAMPLE_RATE)?;
    if a.csv {
        print!("{}", to_csv(&[report]));
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn run_gradcheck(seed: u64) -> Result<()> {
    let entries = suite(seed)?;
    let mut failed = Vec::new();
    for e in &entries {
        println!(
            "{:<28} checked={:<6} max_rel_err={:.3e} tol={:.0e} {}",
            e.report.name,
            e.report.checked,
            e.report.max_rel_err,
            e.tolerance,
            if e.passes() { "ok" } else { "FAIL" }
        );
        if !e.passes() {
            failed.push(e.report.name.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn run_ablate(a: &AblateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut c = RunConfig::default();
            c.model = HyperParams::toy();
            c.data.train_count = 64;
            c.data.val_count = 4;
            c.train = TrainConfig {
                epochs: 3,
                crop_seconds: Some(0.5),
                schedule: LrSchedule {
                    initial: 2e-3,
                    ..LrSchedule::default()
                },
                ..TrainConfig::default()
            };
            c
        }
    };
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(n) = a.train_count {
        cfg.data.train_count = n;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.data.seed = s;
    }
    cfg.validate()?;
    let train_set = gen_synthetic(&cfg.data.train_set(cfg.model.c))?;
    let val_set = gen_synthetic(&cfg.data.val_set(cfg.model.c))?;
    ablate(cfg.model, &train_set, &val_set, &cfg.train, |r| {
        println!("{}", r.to_line())
    })?;
    Ok(())
}

fn run_attn_dump(model: &Path, input: &Path, block: usize, head: usize, out: &Path) -> Result<()> {
    let model = load_checkpoint(model)?;
    let mix = wav_read(input)?;
    let maps = model.attention_maps(&mix, block, head)?;
    let mut w = create(out)?;
    let mut body = String::from("index,query,key,weight\n");
    for (i, m) in maps.iter().enumerate() {
        let s = m.shape()[0];
        for q in 0..s {
            for k in 0..s {
                body.push_str(&format!("{i},{q},{k},{}\n", m.at(&[q, k])));
            }
        }
    }
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(io_err(out))?;
    println!(
        "{} matrices of {}x{} written to {}",
        maps.len(),
        maps.first().map_or(0, |m| m.shape()[0]),
        maps.first().map_or(0, |m| m.shape()[0]),
        out.display()
    );
    Ok(())
}
