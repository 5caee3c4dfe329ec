use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use camp::ablation::{run_grid, select, table4};
use camp::data::{
    generate_synthetic, load_checkpoint, load_dataset, save_checkpoint, save_dataset, Checkpoint, Dataset,
};
use camp::evaluation::{evaluate, gate_means, inspect_pair};
use camp::gradient_suite::{run_gradient_suite, SUITE_TOLERANCE};
use camp::training::Trainer;

use crate::config::RunConfig;
use crate::{CliError, Command};

const SPLITS: [&str; 3] = ["train", "val", "test"];

struct Splits {
    train: Dataset<f32>,
    val: Dataset<f32>,
    test: Dataset<f32>,
}

impl Splits {
    fn get(self, split: &str) -> Result<Dataset<f32>, CliError> {
        match split {
            "train" => Ok(self.train),
            "val" => Ok(self.val),
            "test" => Ok(self.test),
            other => Err(CliError::Config(format!(
                "unknown split {other:?}; expected train, val or test"
            ))),
        }
    }
}

fn manifest(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.json"))
}

/// Loads `dir/{train,val,test}.json`, or synthesizes the benchmark.
fn load_splits(dataset: Option<&Path>, cfg: &RunConfig) -> Result<Splits, CliError> {
    match dataset {
        Some(dir) => Ok(Splits {
            train: load_dataset(&manifest(dir, "train"))?,
            val: load_dataset(&manifest(dir, "val"))?,
            test: load_dataset(&manifest(dir, "test"))?,
        }),
        None => {
            let d = generate_synthetic::<f32>(&cfg.synthetic)?;
            Ok(Splits {
                train: d.train,
                val: d.val,
                test: d.test,
            })
        }
    }
}

/// A manifest file, one split of a dataset directory, or one synthetic split.
fn load_split(dataset: Option<&Path>, split: &str, cfg: &RunConfig) -> Result<Dataset<f32>, CliError> {
    match dataset {
        Some(p) if p.is_file() => Ok(load_dataset(p)?),
        Some(dir) => {
            if !SPLITS.contains(&split) {
                return Err(CliError::Config(format!(
                    "unknown split {split:?}; expected train, val or test"
                )));
            }
            Ok(load_dataset(&manifest(dir, split))?)
        }
        None => load_splits(None, cfg)?.get(split),
    }
}

/// Sizes the model's inputs to the data.
fn fit_model_to(cfg: &mut RunConfig, data: &Dataset<f32>) {
    if let Some(raw) = data.raw_dim() {
        cfg.model.raw_dim = raw;
    }
    cfg.model.vocab_size = data.vocab_size;
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes one line to stdout; a closed pipe is not an error.
fn emit(line: impl std::fmt::Display) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn print_json<T: serde::Serialize>(value: &T) {
    emit(serde_json::to_string_pretty(value).expect("report serializes"));
}

pub fn dispatch(command: Command, cfg: RunConfig) -> Result<(), CliError> {
    match command {
        Command::Synth { out } => synth(&out, &cfg),
        Command::Train {
            dataset,
            out,
            checkpoint,
            overrides,
        } => {
            let mut cfg = cfg;
            overrides.apply(&mut cfg)?;
            train(dataset.as_deref(), &out, checkpoint.as_deref(), cfg)
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            folds,
        } => {
            let ckpt = load_checkpoint::<f32>(&checkpoint, None)?;
            let data = load_split(dataset.as_deref(), &split, &cfg)?;
            print_json(&evaluate(&data, &ckpt.params, &ckpt.config, folds)?);
            Ok(())
        }
        Command::Ablate {
            grid,
            dataset,
            seeds,
            rows,
            out,
            overrides,
        } => {
            if overrides.variant.is_some() {
                return Err(CliError::Config(
                    "ablate selects rows with --rows, not --variant".into(),
                ));
            }
            let mut cfg = cfg;
            overrides.apply(&mut cfg)?;
            ablate(&grid, dataset.as_deref(), seeds, &rows, out.as_deref(), cfg)
        }
        Command::Gradcheck { seeds, eps } => gradcheck(seeds, eps),
        Command::Inspect {
            checkpoint,
            dataset,
            split,
            image,
            caption,
        } => {
            let ckpt = load_checkpoint::<f32>(&checkpoint, None)?;
            let data = load_split(dataset.as_deref(), &split, &cfg)?;
            match (image, caption) {
                (Some(i), Some(j)) => print_json(&inspect_pair(&data, i, j, &ckpt.params, &ckpt.config)?),
                _ => print_json(&gate_means(&data, &ckpt.params, &ckpt.config)?),
            }
            Ok(())
        }
    }
}

fn synth(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let data = generate_synthetic::<f32>(&cfg.synthetic)?;
    create_dir(out)?;
    for (name, split) in SPLITS.iter().zip([&data.train, &data.val, &data.test]) {
        let path = manifest(out, name);
        save_dataset(split, &path)?;
        emit(format_args!(
            "{name}: {} images, {} captions -> {}",
            split.images.len(),
            split.captions.len(),
            path.display()
        ));
    }
    Ok(())
}

fn train(dataset: Option<&Path>, out: &Path, resume: Option<&Path>, mut cfg: RunConfig) -> Result<(), CliError> {
    let splits = load_splits(dataset, &cfg)?;
    fit_model_to(&mut cfg, &splits.train);
    let mut trainer = match resume {
        Some(path) => {
            let ckpt: Checkpoint<f32> = load_checkpoint(path, None)?;
            if ckpt.config != cfg.model {
                log::warn!("using the model configuration stored in {}", path.display());
            }
            cfg.model = ckpt.config.clone();
            Trainer::resume(ckpt, cfg.train.clone())?
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone())?,
    };
    create_dir(out)?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| CliError::io(&cfg_path, e))?;

    let stats_path = out.join("stats.jsonl");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&stats_path)
        .map_err(|e| CliError::io(&stats_path, e))?;
    let mut stats = BufWriter::new(file);
    let mut write_err = None;
    let fit = trainer.fit(&splits.train, &splits.val, |s| {
        log::info!(
            "epoch {:3} loss {:.4} lr {:.1e} val rsum {:.3}",
            s.epoch,
            s.loss,
            s.lr,
            s.val_rsum.unwrap_or(f64::NAN)
        );
        let line = serde_json::to_string(s).expect("stats serialize");
        if let Err(e) = writeln!(stats, "{line}").and_then(|_| stats.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::io(&stats_path, e));
    }

    save_checkpoint(&trainer.checkpoint(), &out.join("last.ckpt"))?;
    if let Some(best) = &fit.best {
        save_checkpoint(best, &out.join("best.ckpt"))?;
    }
    let best_path = out.join("best.ckpt");
    let summary = serde_json::json!({
        "epochs_run": fit.history.len(),
        "best_val_rsum": fit.best.as_ref().and_then(|b| b.best_val_rsum),
        "best_epoch": fit.best.as_ref().and_then(|b| b.train_state.as_ref()).and_then(|s| s.best_epoch),
        "test": if best_path.exists() {
            let best: Checkpoint<f32> = load_checkpoint(&best_path, Some(&trainer.model))?;
            Some(evaluate(&splits.test, &best.params, &best.config, 1)?)
        } else {
            None
        },
    });
    print_json(&summary);
    Ok(())
}

fn ablate(
    grid: &str,
    dataset: Option<&Path>,
    seeds: u64,
    rows: &[String],
    out: Option<&Path>,
    mut cfg: RunConfig,
) -> Result<(), CliError> {
    if grid != "table4" {
        return Err(CliError::Config(format!("unknown grid {grid:?}; expected table4")));
    }
    let splits = load_splits(dataset, &cfg)?;
    fit_model_to(&mut cfg, &splits.train);
    let all = table4(&cfg.model, &cfg.train);
    let variants = if rows.is_empty() {
        all
    } else {
        select(&all, &rows.iter().map(String::as_str).collect::<Vec<_>>())?
    };
    let seeds: Vec<u64> = (cfg.train.seed..cfg.train.seed + seeds).collect();
    let result = run_grid(&variants, &seeds, &splits.train, &splits.val, &splits.test, |r| {
        log::info!(
            "{} seed {} epochs {} test rsum {:.3}",
            r.variant,
            r.seed,
            r.epochs,
            r.test.rsum
        )
    })?;
    emit(format_args!(
        "{:<16} {:<22} {:>10}  per-seed rsum",
        "row", "label", "mean rsum"
    ));
    for row in &result {
        let per: Vec<String> = row.runs.iter().map(|r| format!("{:.3}", r.test.rsum)).collect();
        emit(format_args!(
            "{:<16} {:<22} {:>10.3}  {}",
            row.name,
            row.label,
            row.mean_rsum,
            per.join(" ")
        ));
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join("ablation.json");
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &result).map_err(|e| CliError::io(&path, e.into()))?;
    }
    Ok(())
}

fn gradcheck(seeds: u64, eps: f64) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::Config("gradcheck needs at least one seed".into()));
    }
    let results = run_gradient_suite(0..seeds, eps);
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        emit(format_args!(
            "{status:4} {:<32} max rel error {:.3e} (seed {}, {} coordinates){}",
            r.name,
            r.max_rel_error,
            r.worst_seed,
            r.coordinates,
            r.failure.as_deref().map(|f| format!(": {f}")).unwrap_or_default()
        ));
        failed += usize::from(!r.passed());
    }
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    emit(format_args!(
        "{} cases, worst relative error {worst:.3e}, tolerance {SUITE_TOLERANCE:.0e}",
        results.len()
    ));
    if failed > 0 {
        return Err(CliError::GradientCheck(format!(
            "{failed} of {} cases exceed tolerance",
            results.len()
        )));
    }
    Ok(())
}
