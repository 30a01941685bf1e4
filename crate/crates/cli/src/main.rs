use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tristage::pipeline::{self, PipelineConfig, RunReport};
use tristage::{Error, ErrorClass};

/// Three-stage diabetes analytics pipeline.
#[derive(Debug, Parser)]
#[command(name = "tristage", version)]
struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and validate the configured datasets and print column summaries.
    Ingest,
    /// Supervised benchmark, held-out evaluation and SHAP.
    Stage1,
    /// Subtype clustering of the positive sub-cohort.
    Stage2,
    /// Hypothesis tests.
    Stage3,
    /// All configured stages in order.
    All,
    /// Summarize a saved report.json.
    Report {
        /// Report file; defaults to <out>/report.json.
        path: Option<PathBuf>,
    },
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Command::Report { path } = &cli.command {
        let path = match (path, &cli.out) {
            (Some(p), _) => p.clone(),
            (None, Some(o)) => o.join("report.json"),
            (None, None) => return Err(Error::Config("give a report path or --out".into())),
        };
        print_summary(&RunReport::load(&path)?);
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let threads = pipeline::threads_from_env()?;
    let out = cfg.output_dir.clone();
    let out = out.as_deref();
    let report = pipeline::with_threads(threads, || match cli.command {
        Command::Ingest => {
            let summary = serde_json::to_string_pretty(&pipeline::ingest(&cfg)?)?;
            println!("{summary}");
            Ok(None)
        }
        Command::Stage1 => pipeline::run_stage(&cfg, 1, out).map(Some),
        Command::Stage2 => pipeline::run_stage(&cfg, 2, out).map(Some),
        Command::Stage3 => pipeline::run_stage(&cfg, 3, out).map(Some),
        Command::All => pipeline::run_all(&cfg, out).map(Some),
        Command::Report { .. } => unreachable!(),
    })??;
    if let Some(r) = report {
        print_summary(&r);
        if let Some(dir) = out {
            eprintln!("artifacts written to {}", dir.display());
        }
    }
    Ok(())
}

fn print_summary(r: &RunReport) {
    println!("tristage {}  seed {}", r.toolkit_version, r.config.seed);
    if let Some(s1) = &r.stage1 {
        println!("\nstage 1: {} rows loaded, {} retained", s1.rows_loaded, s1.rows_retained);
        println!("{:<14}{:>9}{:>9}{:>9}{:>9}{:>9}{:>9}", "model", "acc", "bal_acc", "prec", "recall", "f1", "auc");
        for s in &s1.cv {
            let m = &s.mean;
            println!(
                "{:<14}{:>9.3}{:>9.3}{:>9.3}{:>9.3}{:>9.3}{:>9.3}",
                s.model, m.accuracy, m.balanced_accuracy, m.precision, m.recall, m.f1, m.roc_auc
            );
        }
        let t = &s1.test;
        let c = &t.confusion;
        println!(
            "held-out {}: tn={} fp={} fn={} tp={}  acc {:.3}  auc {:.3}",
            t.model, c.tn, c.fp, c.fn_, c.tp, t.metrics.accuracy, t.metrics.roc_auc
        );
        if let Some(sh) = &s1.shap {
            println!("SHAP strongest: {}  consensus: {}", sh.strongest_model, sh.consensus.order.join(", "));
        }
    }
    if let Some(s2) = &r.stage2 {
        println!("\nstage 2: cohort {}  selected k = {}", s2.cohort_size, s2.selected_k);
        println!("{:>3}{:>12}{:>12}{:>12}", "k", "silhouette", "DB", "CH");
        for e in &s2.sweep.entries {
            println!(
                "{:>3}{:>12.4}{:>12.4}{:>12.2}",
                e.k, e.indices.silhouette, e.indices.davies_bouldin, e.indices.calinski_harabasz
            );
        }
        println!("{}", s2.profile.note);
    }
    if let Some(s3) = &r.stage3 {
        println!("\nstage 3: {} rows, groups {:?}", s3.n_rows, s3.group_sizes);
        for h in &s3.hypotheses {
            let x = &h.result;
            println!(
                "{}  {:<15}{:<28} stat {:>9.4}  p {:.3e}  p_adj {}  {}",
                h.hypothesis,
                x.test,
                x.variables,
                x.statistic,
                x.p_value,
                x.p_adjusted.map_or("-".into(), |p| format!("{p:.3e}")),
                x.decision
            );
        }
    }
    for (stage, secs) in &r.timings {
        println!("{stage}: {secs:.1}s");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                if !msg.contains(&s.to_string()) {
                    msg.push_str(&format!(": {s}"));
                }
                src = s.source();
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}

