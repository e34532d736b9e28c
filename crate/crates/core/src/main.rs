use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tta_iqa::adaptation::tta_run;
use tta_iqa::eval::config::ExperimentConfig;
use tta_iqa::eval::dataset::{encode_png, load_dataset, write_manifest, ManifestRecord};
use tta_iqa::eval::experiment::{prepare, run_ablation, run_experiment, write_batch_log, AblationKind};
use tta_iqa::eval::metrics::{mean, plcc, srocc};
use tta_iqa::eval::synth::generate_synthetic_benchmark;
use tta_iqa::model::save_checkpoint;
use tta_iqa::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "tta-iqa", version, about = "Test-time adaptation for blind image quality models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a source model on the benchmark (or manifest `train` split) and save it.
    TrainSource {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a checkpoint on a manifest's test images and write scores.
    Tta {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic shift benchmark as PNGs plus a manifest.
    SynthBench {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one ablation sweep: p, G, distortion or iters.
    Ablate {
        #[arg(long)]
        kind: AblationKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// SROCC and PLCC between two score files.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Compare baseline, rotation, rank-only, GC-only and combined adaptation.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)?.with_env_seed()
}

/// Reads the `score` column, or the last column when none is named so.
fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = headers.iter().position(|h| h.eq_ignore_ascii_case("score")).unwrap_or(headers.len().saturating_sub(1));
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let v = row.get(col).unwrap_or("");
        out.push(v.parse().map_err(|_| Error::Manifest { line: i + 2, msg: format!("{}: `{v}` is not a number", path.display()) })?);
    }
    Ok(out)
}

fn flagged(what: &str, n: usize) -> Result<()> {
    if n > 0 {
        Err(Error::InvalidArgument(format!("{n} {what} flagged; see the batch log")))
    } else {
        Ok(())
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TrainSource { config, out } => {
            let cfg = ExperimentConfig { checkpoint: None, ..load_config(&config)? };
            let p = prepare(&cfg)?;
            save_checkpoint(&p.model, &out)?;
            print_json(&serde_json::json!({ "checkpoint": out, "model_hash": p.model.content_hash(), "report": p.train_report }))
        }
        Cmd::Tta { config, ckpt, manifest, out } => {
            let cfg = load_config(&config)?;
            let model = tta_iqa::model::load_checkpoint(&ckpt)?;
            let ds = load_dataset(&manifest)?;
            let has_test = ds.manifest.records.iter().any(|r| r.split == "test");
            let keep: Vec<usize> = (0..ds.len()).filter(|&i| !has_test || ds.manifest.records[i].split == "test").collect();
            let images: Vec<_> = keep.iter().map(|&i| ds.images[i].clone()).collect();
            let gt: Vec<f64> = keep.iter().map(|&i| ds.manifest.records[i].score).collect();
            let run = tta_run(&model, &images, &cfg.tta)?;
            std::fs::create_dir_all(&out)?;
            let mut w = csv::Writer::from_path(out.join("scores.csv"))?;
            let mut header = vec!["path".to_string(), "gt".into()];
            header.extend(run.seeds.iter().map(|s| format!("seed{s}")));
            header.push("score".into());
            w.write_record(&header)?;
            for (k, &i) in keep.iter().enumerate() {
                let per: Vec<f64> = run.scores.iter().map(|s| s[k]).collect();
                let mut row = vec![ds.manifest.records[i].path.display().to_string(), format!("{:?}", gt[k])];
                row.extend(per.iter().map(|v| format!("{v:?}")));
                row.push(format!("{:?}", mean(&per)));
                w.write_record(&row)?;
            }
            w.flush()?;
            let mut log = std::io::BufWriter::new(std::fs::File::create(out.join("batches.jsonl"))?);
            write_batch_log(&mut log, cfg.tta.objective.name(), &run)?;
            let per_seed: Vec<f64> = run.scores.iter().map(|s| srocc(s, &gt)).collect::<Result<_>>()?;
            print_json(&serde_json::json!({ "images": images.len(), "per_seed_srocc": per_seed, "mean_srocc": mean(&per_seed) }))?;
            let bad = run.batches.iter().filter(|b| b.flagged.as_deref().is_some_and(|f| !f.starts_with("ragged"))).count();
            flagged("batches", bad)
        }
        Cmd::SynthBench { spec, out } => {
            let cfg = load_config(&spec)?;
            let bench = generate_synthetic_benchmark(&cfg.bench, &mut ChaCha8Rng::seed_from_u64(cfg.bench_seed))?;
            let mut rows = Vec::new();
            let mut meta = csv::Writer::from_path({
                std::fs::create_dir_all(out.join("train"))?;
                std::fs::create_dir_all(out.join("test"))?;
                out.join("metadata.csv")
            })?;
            meta.write_record(["path", "kind", "severity", "content"])?;
            for (split, set) in [("train", &bench.train), ("test", &bench.test)] {
                for (i, s) in set.iter().enumerate() {
                    let rel = PathBuf::from(split).join(format!("{i:04}.png"));
                    encode_png(&s.image, &out.join(&rel))?;
                    meta.write_record([rel.display().to_string(), s.kind.to_string(), format!("{:?}", s.severity), format!("{:?}", s.content)])?;
                    rows.push(ManifestRecord { path: rel, score: s.score, split: split.into() });
                }
            }
            meta.flush()?;
            write_manifest(&out.join("manifest.csv"), &rows)?;
            println!("wrote {} images and {}", rows.len(), out.join("manifest.csv").display());
            Ok(())
        }
        Cmd::Ablate { kind, config, out } => {
            let cfg = load_config(&config)?;
            let p = prepare(&cfg)?;
            let table = run_ablation(kind, &cfg, &p)?;
            table.write(&out)?;
            print!("{}", table.to_csv());
            if let Some(f) = &table.flag {
                eprintln!("note: {f}");
            }
            let bad: usize = table.points.iter().filter_map(|p| p.record.as_ref()).map(|r| r.flagged_batches()).sum();
            flagged("batches", bad)
        }
        Cmd::Metrics { pred, gt } => {
            let (p, g) = (read_scores(&pred)?, read_scores(&gt)?);
            let (s, l) = (srocc(&p, &g)?, plcc(&p, &g)?);
            print_json(&serde_json::json!({ "n": p.len(), "srocc": s, "plcc": l }))?;
            if s.is_nan() || l.is_nan() {
                return Err(Error::InvalidArgument("correlation undefined (zero variance)".into()));
            }
            Ok(())
        }
        Cmd::Experiment { config, out } => {
            let cfg = load_config(&config)?;
            let (exp, _) = run_experiment(&cfg, Some(&out))?;
            print!("{}", exp.record.to_csv());
            if let Some(d) = exp.record.mean_combined_srocc_delta {
                println!("combined - baseline mean SROCC: {d:+.4} (per seed {:?})", exp.record.combined_srocc_delta);
            }
            flagged("batches", exp.record.flagged_batches())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
