//! Command-line harness: dataset synthesis, long-tail splitting, pretraining,
//! regime training, episodic evaluation, the full regime × cell sweep, and
//! report assembly.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use protoshot::config::{load_config, EvalCell, ExperimentConfig};
use protoshot::dataset::{
    generate_synthetic, load_manifest, save_manifest, split_longtail, ClassPartition,
    LongTailDataset, SyntheticSpec,
};
use protoshot::embed::{load_checkpoint, save_checkpoint, Embedder, TrainMeta};
use protoshot::eval::{evaluate, EpisodeSpec, EvalReport};
use protoshot::regimes::{
    make_dl, pretrain_source, train_dtl, train_fel, train_fetl, Regime, RegimeConfig, TrainLog,
};
use protoshot::report::{curves_csv, ComparisonTable};
use protoshot::{Error, Result};

#[derive(Parser)]
#[command(name = "protoshot", version, about = "Few-shot benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tail dataset and write its manifest
    Synth {
        /// TOML file holding the synthetic dataset spec
        #[arg(long)]
        spec: PathBuf,
        /// Output directory (will contain manifest.csv and payload files)
        #[arg(long)]
        out: PathBuf,
    },
    /// Partition a manifest's classes into base-train / base-val / novel
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// Classes smaller than this are novel
        #[arg(long, default_value_t = 20)]
        novel_max: usize,
        /// Classes up to this size are base-val; larger are base-train
        #[arg(long, default_value_t = 30)]
        val_max: usize,
        /// Comma-separated class labels to exclude
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
        /// Output partition JSON
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain on the configured source dataset and write a checkpoint
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one regime and write its checkpoint (+ .log.jsonl)
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        regime: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the novel split for one (N, K) cell
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Grid cell, e.g. 5w5s
        #[arg(long)]
        cell: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full regime × cell grid and emit reports plus tables
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble tables/curves from a directory of report files
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "md")]
        format: String,
    },
}

fn main() -> ExitCode {
    // clap handles usage errors with exit code 1 via its error kind
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_thread_pool();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

/// `PROTOSHOT_THREADS` caps worker parallelism.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("PROTOSHOT_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                return;
            }
        }
        eprintln!("warning: ignoring invalid PROTOSHOT_THREADS value '{v}'");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
        Command::Split {
            manifest,
            novel_max,
            val_max,
            exclude,
            out,
        } => cmd_split(&manifest, novel_max, val_max, &exclude, &out),
        Command::Pretrain { config, out } => cmd_pretrain(&config, &out),
        Command::Train {
            config,
            regime,
            out,
        } => cmd_train(&config, &regime, &out),
        Command::Eval {
            ckpt,
            config,
            cell,
            out,
        } => cmd_eval(&ckpt, &config, &cell, &out),
        Command::Sweep { config, out } => cmd_sweep(&config, &out),
        Command::Report { dir, format } => cmd_report(&dir, &format),
    }
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn cmd_synth(spec_path: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let spec: SyntheticSpec =
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("spec parse: {e}")))?;
    spec.validate()?;
    let data = generate_synthetic(&spec)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = out.join("manifest.csv");
    save_manifest(&data, &manifest)?;
    println!(
        "wrote {} examples across {} classes to {}",
        data.len(),
        data.classes().len(),
        manifest.display()
    );
    Ok(())
}

fn cmd_split(
    manifest: &Path,
    novel_max: usize,
    val_max: usize,
    exclude: &[String],
    out: &Path,
) -> Result<()> {
    let data = load_manifest(manifest)?;
    let partition = split_longtail(&data, novel_max, val_max, exclude)?;
    let json = serde_json::to_string_pretty(&partition)
        .map_err(|e| Error::InvalidArgument(format!("partition encode: {e}")))?;
    write_file(out, &json)?;
    println!(
        "base_train={} base_val={} novel={} excluded={}",
        partition.base_train.len(),
        partition.base_val.len(),
        partition.novel.len(),
        partition.excluded.len()
    );
    Ok(())
}

/// Settings for source pretraining: the `[pretrain]` section when present,
/// else the DTL section's conventional/optimizer settings, else defaults.
fn pretrain_cfg(cfg: &ExperimentConfig) -> RegimeConfig {
    let mut rc = match &cfg.pretrain {
        Some(section) => {
            let mut rc = RegimeConfig::new(Regime::Dtl, section.seed);
            rc.conventional = section.conventional;
            rc.optimizer = section.optimizer;
            rc
        }
        None => cfg
            .regimes
            .iter()
            .find(|r| r.regime == Regime::Dtl)
            .cloned()
            .unwrap_or_else(|| RegimeConfig::new(Regime::Dtl, cfg.eval.master_seed)),
    };
    rc.regime = Regime::Dtl;
    rc.init = protoshot::regimes::InitKind::Pretrained;
    rc.pretrained_path = None;
    rc
}

fn run_pretrain(cfg: &ExperimentConfig, base_dir: &Path) -> Result<(Embedder, TrainLog)> {
    let source_sec = cfg.source.as_ref().ok_or_else(|| {
        Error::InvalidConfig("pretraining requires a [source] dataset section".into())
    })?;
    let source = source_sec.load(base_dir)?;
    let target = cfg.dataset.load(base_dir)?;
    let target_classes: BTreeSet<String> = target.classes().into_iter().collect();
    let init = cfg.embedder.build(base_dir)?;
    pretrain_source(&source, &target_classes, init, &pretrain_cfg(cfg))
}

fn cmd_pretrain(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let base_dir = config.parent().unwrap_or_else(|| Path::new("."));
    let (embedder, log) = run_pretrain(&cfg, base_dir)?;
    let meta = TrainMeta {
        regime: Some("pretrain".into()),
        epochs: Some(log.records.len()),
        seed: Some(log.seed),
        config_hash: Some(cfg.hash()?),
    };
    save_checkpoint(&embedder, &meta, out)?;
    write_file(&out.with_extension("log.jsonl"), &log.to_json_lines()?)?;
    println!("pretrained checkpoint written to {}", out.display());
    Ok(())
}

fn partition_of(cfg: &ExperimentConfig, data: &LongTailDataset) -> Result<ClassPartition> {
    split_longtail(
        data,
        cfg.dataset.novel_max,
        cfg.dataset.val_max,
        &cfg.dataset.exclude,
    )
}

/// The pretrained artifact for a transfer regime: an explicit checkpoint
/// when configured, otherwise a fresh source pretraining run.
fn obtain_pretrained(
    cfg: &ExperimentConfig,
    rc: &RegimeConfig,
    base_dir: &Path,
) -> Result<Embedder> {
    match &rc.pretrained_path {
        Some(path) => {
            let resolved = if path.is_absolute() {
                path.clone()
            } else {
                base_dir.join(path)
            };
            Ok(load_checkpoint(&resolved)?.0)
        }
        None => Ok(run_pretrain(cfg, base_dir)?.0),
    }
}

fn train_regime(
    cfg: &ExperimentConfig,
    rc: &RegimeConfig,
    data: &LongTailDataset,
    partition: &ClassPartition,
    base_dir: &Path,
    pretrained: Option<&Embedder>,
) -> Result<(Embedder, Option<TrainLog>)> {
    rc.validate()?;
    let get_pretrained = || -> Result<Embedder> {
        match pretrained {
            Some(e) => Ok(e.clone()),
            None => obtain_pretrained(cfg, rc, base_dir),
        }
    };
    match rc.regime {
        Regime::Fel => {
            let init = cfg.embedder.build(base_dir)?;
            let (e, log) = train_fel(data, partition, init, rc)?;
            Ok((e, Some(log)))
        }
        Regime::Fetl => {
            let (e, log) = train_fetl(data, partition, get_pretrained()?, rc)?;
            Ok((e, Some(log)))
        }
        Regime::Dtl => {
            let (e, log) = train_dtl(data, partition, get_pretrained()?, rc)?;
            Ok((e, Some(log)))
        }
        Regime::Dl => Ok((make_dl(&get_pretrained()?), None)),
    }
}

fn cmd_train(config: &Path, regime: &str, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let base_dir = config.parent().unwrap_or_else(|| Path::new("."));
    let regime: Regime = regime.parse()?;
    let rc = cfg
        .regimes
        .iter()
        .find(|r| r.regime == regime)
        .ok_or_else(|| {
            Error::InvalidConfig(format!(
                "no [[regime]] section for {} in the config",
                regime.as_str()
            ))
        })?;
    let data = cfg.dataset.load(base_dir)?;
    let partition = partition_of(&cfg, &data)?;
    let (embedder, log) = train_regime(&cfg, rc, &data, &partition, base_dir, None)?;
    let meta = TrainMeta {
        regime: Some(regime.as_str().into()),
        epochs: log.as_ref().map(|l| l.records.len()),
        seed: Some(rc.seed),
        config_hash: Some(cfg.hash()?),
    };
    save_checkpoint(&embedder, &meta, out)?;
    if let Some(log) = log {
        write_file(&out.with_extension("log.jsonl"), &log.to_json_lines()?)?;
    }
    println!("{} checkpoint written to {}", regime.as_str(), out.display());
    Ok(())
}

fn eval_spec(cfg: &ExperimentConfig, cell: EvalCell) -> EpisodeSpec {
    EpisodeSpec {
        n_way: cell.n_way,
        k_shot: cell.k_shot,
        m_query: cfg.eval.m_query,
        episodes: cfg.eval.episodes,
        master_seed: cfg.eval.master_seed,
        query_mode: cfg.eval.query_mode,
        distance_kind: cfg.eval.distance_kind,
    }
}

fn run_cell(
    cfg: &ExperimentConfig,
    embedder: &Embedder,
    novel: &LongTailDataset,
    cell: EvalCell,
    regime: Option<&str>,
) -> Result<EvalReport> {
    let spec = eval_spec(cfg, cell);
    let mut report = evaluate(embedder, novel, &spec)?;
    report.regime = regime.map(String::from);
    report.backbone = Some(format!("{:?}", embedder.kind()).to_lowercase());
    report.config_hash = Some(cfg.hash()?);
    Ok(report)
}

fn cmd_eval(ckpt: &Path, config: &Path, cell: &str, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let base_dir = config.parent().unwrap_or_else(|| Path::new("."));
    let cell = EvalCell::parse(cell)?;
    let (embedder, meta) = load_checkpoint(ckpt)?;
    let data = cfg.dataset.load(base_dir)?;
    let partition = partition_of(&cfg, &data)?;
    let novel = data.restrict(&partition.novel)?;
    let report = run_cell(&cfg, &embedder, &novel, cell, meta.regime.as_deref())?;
    write_file(out, &report.to_json_body()?)?;
    println!(
        "{cell}: acc {:.4} ± {:.4}",
        report.acc_mean,
        report.acc_half_width.unwrap_or(0.0)
    );
    Ok(())
}

fn cmd_sweep(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let base_dir = config.parent().unwrap_or_else(|| Path::new("."));
    let data = cfg.dataset.load(base_dir)?;
    let partition = partition_of(&cfg, &data)?;
    let novel = data.restrict(&partition.novel)?;

    // one shared pretraining run feeds every transfer regime
    let needs_pretrained = cfg
        .regimes
        .iter()
        .any(|r| r.regime != Regime::Fel && r.pretrained_path.is_none());
    let pretrained = if needs_pretrained {
        Some(run_pretrain(&cfg, base_dir)?.0)
    } else {
        None
    };

    let mut reports: Vec<EvalReport> = Vec::new();
    let mut failure: Option<(String, Error)> = None;
    'regimes: for rc in &cfg.regimes {
        let embedder =
            match train_regime(&cfg, rc, &data, &partition, base_dir, pretrained.as_ref()) {
                Ok((e, log)) => {
                    if let Some(log) = log {
                        let log_path =
                            out.join(rc.regime.as_str()).join("train.log.jsonl");
                        write_file(&log_path, &log.to_json_lines()?)?;
                    }
                    e
                }
                Err(e) => {
                    failure = Some((format!("{} training", rc.regime.as_str()), e));
                    break 'regimes;
                }
            };
        for &cell in &cfg.eval.cells {
            // every regime sees the same master_seed, hence the same episodes
            match run_cell(&cfg, &embedder, &novel, cell, Some(rc.regime.as_str())) {
                Ok(report) => {
                    let path = out.join(rc.regime.as_str()).join(format!("{cell}.json"));
                    write_file(&path, &report.to_json_body()?)?;
                    reports.push(report);
                }
                Err(e) => {
                    failure = Some((format!("{} {cell}", rc.regime.as_str()), e));
                    break 'regimes;
                }
            }
        }
    }

    // completed cells are preserved even when a later cell failed
    if !reports.is_empty() {
        let table = ComparisonTable::from_reports(&reports)?;
        write_file(&out.join("table.csv"), &table.to_csv())?;
        write_file(&out.join("table.md"), &table.to_markdown())?;
        write_file(&out.join("curves.csv"), &curves_csv(&reports)?)?;
    }
    match failure {
        Some((what, e)) => Err(Error::InvalidArgument(format!(
            "sweep failed at {what} ({} cells completed): {e}",
            reports.len()
        ))),
        None => {
            println!(
                "sweep complete: {} reports under {}",
                reports.len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn cmd_report(dir: &Path, format: &str) -> Result<()> {
    if !matches!(format, "csv" | "json" | "md") {
        return Err(Error::InvalidConfig(format!(
            "unknown report format '{format}' (expected csv, json, or md)"
        )));
    }
    let mut reports: Vec<EvalReport> = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut subdirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&sub)
            .map_err(|e| Error::io(&sub, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|x| x == "json")
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| EvalCell::parse(n.trim_end_matches(".json")).is_ok())
            })
            .collect();
        files.sort();
        for file in files {
            let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
            let report: EvalReport = serde_json::from_str(&text)
                .map_err(|e| Error::format(&file, format!("report parse: {e}")))?;
            reports.push(report);
        }
    }
    if reports.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no report files found under {}",
            dir.display()
        )));
    }
    let table = ComparisonTable::from_reports(&reports)?;
    match format {
        "csv" => write_file(&dir.join("table.csv"), &table.to_csv())?,
        "md" => write_file(&dir.join("table.md"), &table.to_markdown())?,
        "json" => {
            let rows: Vec<&EvalReport> = reports.iter().collect();
            let json = serde_json::to_string_pretty(&rows)
                .map_err(|e| Error::InvalidArgument(format!("table encode: {e}")))?;
            write_file(&dir.join("table.json"), &json)?;
        }
        _ => unreachable!(),
    }
    write_file(&dir.join("curves.csv"), &curves_csv(&reports)?)?;
    println!("assembled {} reports into {}", reports.len(), dir.display());
    Ok(())
}
