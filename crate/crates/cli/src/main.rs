use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use didb::bench::{gemm_bench, parse_size};
use didb::data::DatasetSpec;
use didb::gradcheck;
use didb::model::{Checkpoint, Model, ModelConfig};
use didb::report::OpsReport;
use didb::train::{self, AblationPreset, TrainConfig};

#[derive(Parser)]
#[command(
    name = "didb",
    version,
    about = "Train and inspect binary vision transformers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write model.ckpt and report.txt into --out
    Train {
        /// key=value config file; missing keys keep their defaults
        #[arg(long)]
        config: Option<PathBuf>,
        /// CIFAR-10 binary file or directory, or synthetic[:COUNT[:SEED]]
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print top-1 accuracy of a checkpoint on the test split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "synthetic")]
        data: String,
    },
    /// Run the finite-difference gradient suites
    Gradcheck {
        /// only suites whose name contains this
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Packed binary GEMM against a naive float loop, plus the OPs count
    Bench {
        #[arg(long, default_value = "1024,1024,1024")]
        size: String,
        /// config whose OPs are reported (toy model if absent)
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the four-rung ablation ladder and print the accuracy table
    Ablate {
        #[arg(long, default_value = "toy")]
        preset: String,
        #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// override the preset's epoch count
        #[arg(long)]
        epochs: Option<usize>,
        /// override the preset's dataset
        #[arg(long)]
        data: Option<String>,
    },
}

fn read_config(path: Option<&PathBuf>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_kv(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn cmd_train(config: Option<PathBuf>, data: &str, out: PathBuf, seed: u64) -> Result<()> {
    let cfg = read_config(config.as_ref())?;
    let split = DatasetSpec::parse(data, cfg.model.image_size)?.load()?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    println!(
        "kind=config seed={seed} train={} test={}",
        split.train.len(),
        split.test.len()
    );
    let (_, report) = train::run(&cfg, &split, seed, None, Some(&out), |e| {
        println!("{}", e.line())
    })?;
    println!("{}", report.ops.line());
    println!(
        "kind=final test_acc={:.4} wall_s={:.2}",
        report.final_accuracy().unwrap_or(f64::NAN),
        report.wall_s
    );
    Ok(())
}

fn cmd_eval(ckpt: PathBuf, data: &str) -> Result<()> {
    if !ckpt.is_file() {
        bail!("checkpoint {} does not exist", ckpt.display());
    }
    let ck = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let model =
        Model::<f32>::from_checkpoint(&ck).context("checkpoint does not match its config")?;
    let split = DatasetSpec::parse(data, model.config().image_size)?.load()?;
    let acc = train::evaluate(&model, &split.test)?;
    println!("kind=eval samples={} top1={acc:.4}", split.test.len());
    Ok(())
}

fn cmd_gradcheck(filter: Option<&str>, seed: u64) -> Result<ExitCode> {
    let checks = gradcheck::run(filter, seed)?;
    let failed = checks.iter().filter(|c| !c.passed()).count();
    for c in &checks {
        println!("{}", c.line());
    }
    println!("kind=gradcheck checks={} failed={failed}", checks.len());
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_bench(size: &str, config: Option<PathBuf>) -> Result<()> {
    let (m, n, k) = parse_size(size)?;
    let b = gemm_bench(m, n, k, 0)?;
    println!("{}", b.line());
    let model: ModelConfig = read_config(config.as_ref())?.model;
    println!("{}", OpsReport::for_config(&model).line());
    if !b.agree {
        bail!("packed and float products disagree");
    }
    Ok(())
}

fn cmd_ablate(
    preset: &str,
    seeds: &[u64],
    epochs: Option<usize>,
    data: Option<String>,
) -> Result<()> {
    let mut p = AblationPreset::by_name(preset)?;
    if let Some(e) = epochs {
        p.train.epochs = e;
        p.train.teacher_epochs = e;
    }
    if let Some(d) = data {
        p.data = DatasetSpec::parse(&d, p.train.model.image_size)?;
    }
    let table = train::ablation_ladder(&p, seeds, |line| println!("kind=progress {line}"))?;
    print!("{}", table.render());
    println!(
        "kind=ablation monotone={} gain_points={:.2}",
        table.is_monotone(),
        table.gain_points()
    );
    Ok(())
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train {
            config,
            data,
            out,
            seed,
        } => cmd_train(config, &data, out, seed)?,
        Cmd::Eval { ckpt, data } => cmd_eval(ckpt, &data)?,
        Cmd::Gradcheck { filter, seed } => return cmd_gradcheck(filter.as_deref(), seed),
        Cmd::Bench { size, config } => cmd_bench(&size, config)?,
        Cmd::Ablate {
            preset,
            seeds,
            epochs,
            data,
        } => cmd_ablate(&preset, &seeds, epochs, data)?,
    }
    Ok(ExitCode::SUCCESS)
}
