mod manifest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use trifuse::data::{read_dataset, synth_generate, write_atomic, write_dataset, FeatureRecord, SynthConfig};
use trifuse::gradcheck::{run_gradcheck, GradcheckConfig};
use trifuse::train::{compare_fusions, evaluate, run_ablation, train, AblationToggles, Report, ReportRow, TrainConfig};
use trifuse::{Model, Precision, Strategy};

use manifest::{read_manifest, sha256_file, sidecar, Recorder};

#[derive(Parser)]
#[command(name = "trifuse", version, about = "Multimodal fake-news fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature dataset
    Gen(GenArgs),
    /// Train a model on a dataset's train split
    Train(TrainArgs),
    /// Evaluate a saved model on every record of a dataset
    Eval(EvalArgs),
    /// Train and evaluate every fusion strategy
    Compare(ExperimentArgs),
    /// Channel-mask × fusion on/off ablation grid
    Ablate(ExperimentArgs),
    /// Write eval-mode fused vectors as CSV
    ExportFused(ExportArgs),
    /// Finite-difference check of every differentiable op
    Gradcheck(GradcheckArgs),
    /// Repeat a run from its manifest
    Rerun { manifest: PathBuf },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 800)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    len_text: usize,
    #[arg(long, default_value_t = 24)]
    d_text: usize,
    #[arg(long, default_value_t = 3)]
    len_image: usize,
    #[arg(long, default_value_t = 16)]
    d_image: usize,
    #[arg(long, default_value_t = 2)]
    len_imgtext: usize,
    #[arg(long, default_value_t = 12)]
    d_imgtext: usize,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.5)]
    cross_modal_weight: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

/// Training configuration: a JSON file, then flag overrides.
#[derive(Args)]
struct ConfigArgs {
    /// JSON file with any subset of the training configuration fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// tri_transformer, early, late, hybrid, tensor or concat_only
    #[arg(long)]
    strategy: Option<Strategy>,
    /// single or double
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "single" => Ok(Precision::Single),
        "double" => Ok(Precision::Double),
        _ => Err(format!("unknown precision {s:?}, expected single or double")),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let s = std::fs::read_to_string(p).with_context(|| p.display().to_string())?;
                serde_json::from_str(&s).with_context(|| format!("{}: invalid config", p.display()))?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.test_fraction {
            cfg.test_fraction = v;
        }
        if let Some(v) = self.strategy {
            cfg.fusion.strategy = v;
        }
        if let Some(v) = self.precision {
            cfg.precision = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Model file; the epoch log goes to `<out>.log.csv`
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// CSV report; without it the manifest goes to `<model>.eval.run.json`
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// CSV report
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    len_q: usize,
    #[arg(long, default_value_t = 3)]
    len_kv: usize,
    #[arg(long, default_value_t = 4)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    n_heads: usize,
    #[arg(long, default_value_t = 3)]
    d_f: usize,
    /// JSON report
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

/// Worker threads for compare/ablate: `TRIFUSE_THREADS` if set.
fn threads() -> Result<usize> {
    match std::env::var("TRIFUSE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("TRIFUSE_THREADS must be a positive integer, got {v:?}"),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn cmd_gen(a: &GenArgs, mut rec: Recorder) -> Result<()> {
    let cfg = SynthConfig {
        n: a.n,
        dims: trifuse::FeatureDims {
            len_text: a.len_text,
            d_text: a.d_text,
            len_image: a.len_image,
            d_image: a.d_image,
            len_imgtext: a.len_imgtext,
            d_imgtext: a.d_imgtext,
        },
        class_separation: a.separation,
        cross_modal_weight: a.cross_modal_weight,
        seed: a.seed,
    };
    let ds = synth_generate(&cfg)?;
    write_dataset(&ds, &a.out)?;
    let side = sidecar(&a.out, "manifest.json");
    let (fake, real) = ds.label_counts();
    let info = serde_json::json!({
        "generator": cfg,
        "records": ds.records.len(),
        "fake": fake,
        "real": real,
        "sha256": sha256_file(&a.out)?,
    });
    write_text(&side, &serde_json::to_string_pretty(&info)?)?;
    rec.config(&cfg, a.seed)?;
    rec.artifact(&a.out);
    rec.artifact(&side);
    println!("wrote {} records to {}", ds.records.len(), a.out.display());
    rec.finish(&sidecar(&a.out, "run.json"))
}

fn refs(records: &[FeatureRecord]) -> Vec<&FeatureRecord> {
    records.iter().collect()
}

fn cmd_train(a: &TrainArgs, mut rec: Recorder) -> Result<()> {
    let cfg = a.config.resolve()?;
    let ds = read_dataset(&a.data)?;
    rec.dataset(&a.data)?;
    rec.config(&cfg, cfg.seed)?;
    let out = train(&ds, &cfg)?;
    out.model.save(&a.out)?;
    let mut csv = String::from("epoch,train_loss,train_accuracy,test_accuracy,test_fake_f1,test_real_f1\n");
    for e in &out.log.epochs {
        let (acc, ff, rf) = e
            .test
            .map(|m| (m.accuracy.to_string(), m.fake.f1.to_string(), m.real.f1.to_string()))
            .unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{acc},{ff},{rf}",
            e.epoch + 1,
            e.train_loss,
            e.train.accuracy
        );
        println!(
            "epoch {:>3}  loss {:.6}  train_acc {:.4}{}",
            e.epoch + 1,
            e.train_loss,
            e.train.accuracy,
            e.test
                .map(|m| format!("  test_acc {:.4}", m.accuracy))
                .unwrap_or_default()
        );
    }
    let log_path = sidecar(&a.out, "log.csv");
    write_text(&log_path, &csv)?;
    let split_path = sidecar(&a.out, "split.json");
    write_text(&split_path, &serde_json::to_string(&out.split)?)?;
    rec.artifact(&a.out);
    rec.artifact(&log_path);
    rec.artifact(&split_path);
    rec.finish(&sidecar(&a.out, "run.json"))
}

fn cmd_eval(a: &EvalArgs, mut rec: Recorder) -> Result<()> {
    let model = Model::load(&a.model)?;
    let ds = read_dataset(&a.data)?;
    rec.dataset(&a.data)?;
    rec.config(model.config(), model.config().seed)?;
    let m = evaluate(&model, &refs(&ds.records))?;
    let report = Report::new(
        "strategy",
        vec![ReportRow::ok(
            model.strategy().name().into(),
            m,
            model.params().numel(),
            model.attention_param_count(),
        )],
    );
    print!("{}", report.to_text());
    let manifest = match &a.out {
        Some(p) => {
            write_text(p, &report.to_csv()?)?;
            rec.artifact(p);
            sidecar(p, "run.json")
        }
        None => sidecar(&a.model, "eval.run.json"),
    };
    rec.finish(&manifest)
}

fn cmd_experiment(a: &ExperimentArgs, ablate: bool, mut rec: Recorder) -> Result<()> {
    let cfg = a.config.resolve()?;
    let ds = read_dataset(&a.data)?;
    rec.dataset(&a.data)?;
    rec.config(&cfg, cfg.seed)?;
    let n = threads()?;
    let report = if ablate {
        run_ablation(&ds, &cfg, &AblationToggles::default(), n)?
    } else {
        compare_fusions(&ds, &cfg, n)?
    };
    print!("{}", report.to_text());
    write_text(&a.out, &report.to_csv()?)?;
    rec.artifact(&a.out);
    rec.finish(&sidecar(&a.out, "run.json"))?;
    if let Some(r) = report.rows.iter().find(|r| r.metrics.is_none()) {
        bail!("{}: {}", r.name, r.status);
    }
    Ok(())
}

fn cmd_export(a: &ExportArgs, mut rec: Recorder) -> Result<()> {
    let model = Model::load(&a.model)?;
    let ds = read_dataset(&a.data)?;
    rec.dataset(&a.data)?;
    rec.config(model.config(), model.config().seed)?;
    let records = refs(&ds.records);
    let fused = model.fused_vectors(&records)?;
    let width = model.config().fusion.fused_width();
    let mut csv = String::from("id,label");
    for j in 0..width {
        let _ = write!(csv, ",f{j}");
    }
    csv.push('\n');
    for (r, f) in records.iter().zip(&fused) {
        let _ = write!(csv, "{},{}", r.id, r.label);
        for v in &f.values {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    write_text(&a.out, &csv)?;
    println!(
        "wrote {} fused vectors of width {width} to {}",
        fused.len(),
        a.out.display()
    );
    rec.artifact(&a.out);
    rec.finish(&sidecar(&a.out, "run.json"))
}

fn cmd_gradcheck(a: &GradcheckArgs, mut rec: Recorder) -> Result<()> {
    let cfg = GradcheckConfig {
        seed: a.seed,
        batch: a.batch,
        len_q: a.len_q,
        len_kv: a.len_kv,
        d_model: a.d_model,
        n_heads: a.n_heads,
        d_f: a.d_f,
        fault: a.inject_fault.clone(),
    };
    let report = run_gradcheck(&cfg)?;
    print!("{}", report.to_text());
    rec.config(&cfg, cfg.seed)?;
    if let Some(p) = &a.out {
        write_text(p, &serde_json::to_string_pretty(&report)?)?;
        rec.artifact(p);
        rec.finish(&sidecar(p, "run.json"))?;
    }
    if !report.passed() {
        bail!("gradient check failed for {}", report.failures().join(", "));
    }
    Ok(())
}

fn cmd_rerun(path: &Path) -> Result<()> {
    let m = read_manifest(path)?;
    if let (Some(data), Some(want)) = (&m.dataset, &m.dataset_sha256) {
        let got = sha256_file(data)?;
        if &got != want {
            bail!("{}: sha256 {got} does not match the manifest's {want}", data.display());
        }
    }
    let cli = Cli::try_parse_from(std::iter::once("trifuse".to_string()).chain(m.argv.iter().cloned()))
        .with_context(|| format!("{}: stored arguments no longer parse", path.display()))?;
    if matches!(cli.command, Command::Rerun { .. }) {
        bail!("{}: a manifest cannot point at another rerun", path.display());
    }
    dispatch(cli.command, &m.argv)
}

fn dispatch(command: Command, argv: &[String]) -> Result<()> {
    let rec = |name: &str| Recorder::new(name, argv);
    match &command {
        Command::Gen(a) => cmd_gen(a, rec("gen")),
        Command::Train(a) => cmd_train(a, rec("train")),
        Command::Eval(a) => cmd_eval(a, rec("eval")),
        Command::Compare(a) => cmd_experiment(a, false, rec("compare")),
        Command::Ablate(a) => cmd_experiment(a, true, rec("ablate")),
        Command::ExportFused(a) => cmd_export(a, rec("export-fused")),
        Command::Gradcheck(a) => cmd_gradcheck(a, rec("gradcheck")),
        Command::Rerun { manifest } => cmd_rerun(manifest),
    }
}

/// The error chain joined by ": ", skipping causes already quoted by their parent.
fn render_error(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            });
        }
    };
    match dispatch(cli.command, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render_error(&e));
            ExitCode::from(1)
        }
    }
}
