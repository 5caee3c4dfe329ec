//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release --test acceptance`; pass criterion numbers
//! after `--` to run a subset. Criteria listed in `KNOWN_FAILURES` report
//! FAIL without failing the target; any other failure exits non-zero.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use camp::ablation::{run_grid, select, table4};
use camp::data::{
    generate_synthetic, load_checkpoint, save_checkpoint, Checkpoint, FeatureFile, SyntheticSpec, FEATURE_MAGIC,
};
use camp::encoders::RawRegionFeatures;
use camp::evaluation::{evaluate, gate_means, score_all};
use camp::gradient_suite::{run_gradient_suite, SUITE_EPS, SUITE_TOLERANCE};
use camp::model::{forward, gated_fuse, FeatureBatch};
use camp::objectives::{bce_hardest, bce_plain, hardest_negatives, ranking_hardest, HardestBy};
use camp::training::{TrainConfig, Trainer};
use camp::{CampParams, ModelConfig, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KNOWN_FAILURES: &[usize] = &[5, 6];

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fmt_err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let results = run_gradient_suite(0..10, SUITE_EPS);
    let elapsed = start.elapsed();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    check(failed.is_empty(), || {
        format!("{} cases above {SUITE_TOLERANCE:e}: {failed:?}", failed.len())
    })?;
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} cases x 10 seeds, worst {:.2e} ({}), {:.1}s",
        results.len(),
        worst.max_rel_error,
        worst.name,
        elapsed.as_secs_f64()
    ))
}

fn small_model() -> ModelConfig {
    ModelConfig {
        raw_dim: 12,
        embed_dim: 5,
        vocab_size: 20,
        max_words: 8,
        d: 6,
        d_h: 3,
        ..ModelConfig::desk()
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = small_model();
    let mut checked = 0usize;

    // softmax rows and masked positions
    for _ in 0..50 {
        let (r, c) = (rng.random_range(1..6), rng.random_range(2..8));
        let mask: Vec<bool> = (0..r * c).map(|k| k % c == 0 || rng.random_bool(0.6)).collect();
        let mut tape = Tape::<f64>::inference();
        let m = tape.constant(Tensor::uniform(&[r, c], 20.0, &mut rng));
        let p = tape.scaled_softmax(m, 0.7, Some(&mask)).map_err(fmt_err)?;
        let p = tape.value(p);
        for i in 0..r {
            let sum: f64 = (0..c).map(|j| p.get(i, j)).sum();
            check((sum - 1.0).abs() <= 1e-6, || format!("softmax row sums to {sum}"))?;
            for j in 0..c {
                check(mask[i * c + j] || p.get(i, j) == 0.0, || {
                    "masked position has weight".into()
                })?;
            }
        }
        checked += 1;
    }

    // gates, attention rows and masked words inside the model
    for seed in 0..20 {
        let mut prng = ChaCha8Rng::seed_from_u64(100 + seed);
        let params = CampParams::<f64>::init(&cfg, &mut prng);
        let (r, n) = (prng.random_range(1..6), prng.random_range(2..8));
        let mut mask: Vec<bool> = (0..n).map(|_| prng.random_bool(0.7)).collect();
        mask[0] = true;
        let spread = if seed % 2 == 0 { 1.0 } else { 30.0 };
        let vm = Tensor::uniform(&[cfg.d, r], spread, &mut prng);
        let tm = Tensor::uniform(&[cfg.d, n], spread, &mut prng);
        let mut tape = Tape::inference();
        let core = params.core.bind(&mut tape);
        let (v, t) = (tape.constant(vm), tape.constant(tm));
        let batch = FeatureBatch { v, t, word_mask: &mask };
        let out = forward(&mut tape, &batch, &core, &cfg).map_err(fmt_err)?;
        for g in [out.gates_v.unwrap(), out.gates_t.unwrap()] {
            check(tape.value(g).data().iter().all(|&x| x > 0.0 && x < 1.0), || {
                format!("gate outside (0, 1) at seed {seed}")
            })?;
        }
        let msg = out.messages.unwrap();
        for a in [msg.attn_v, msg.attn_t] {
            let a = tape.value(a);
            for i in 0..a.rows() {
                let sum: f64 = (0..a.cols()).map(|j| a.get(i, j)).sum();
                check((sum - 1.0).abs() <= 1e-6, || format!("attention row sums to {sum}"))?;
            }
        }
        let at = tape.value(msg.attn_t);
        for (j, &live) in mask.iter().enumerate() {
            for i in 0..at.rows() {
                check(live || at.get(i, j) == 0.0, || format!("padding word {j} attended"))?;
            }
        }
        checked += 1;
    }

    // region permutation leaves the score bit-identical
    let data = generate_synthetic::<f64>(&SyntheticSpec {
        n_train: 6,
        n_val: 1,
        n_test: 1,
        raw_region_dim: cfg.raw_dim,
        vocab_size: cfg.vocab_size,
        n_concepts: 10,
        ..SyntheticSpec::default()
    })
    .map_err(fmt_err)?;
    let params = CampParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(7));
    let caps: Vec<&[usize]> = data.train.captions.iter().map(|c| c.tokens.as_slice()).collect();
    let base = score_all(&data.train.images, &caps, &params, &cfg).map_err(fmt_err)?;
    for trial in 0..10 {
        let permuted: Vec<RawRegionFeatures<f64>> = data
            .train
            .images
            .iter()
            .map(|im| {
                let m = im.features();
                let mut order: Vec<usize> = (0..m.cols()).collect();
                order.rotate_left(1 + trial % m.cols().max(1));
                order.swap(0, trial % m.cols());
                RawRegionFeatures::new(Tensor::from_fn(m.rows(), m.cols(), |i, j| m.get(i, order[j]))).unwrap()
            })
            .collect();
        let s = score_all(&permuted, &caps, &params, &cfg).map_err(fmt_err)?;
        let same = s
            .data()
            .iter()
            .zip(base.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        check(same, || format!("scores changed under region permutation {trial}"))?;
        checked += 1;
    }

    // residual identity: gates off and a zero transform return V exactly
    let id_cfg = ModelConfig {
        use_gates: false,
        ..cfg.clone()
    };
    for _ in 0..10 {
        let k = rng.random_range(1..6);
        let xm = Tensor::uniform(&[cfg.d, k], 5.0, &mut rng);
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(xm.clone());
        let m = tape.constant(Tensor::uniform(&[k, cfg.d], 5.0, &mut rng));
        let fw = tape.constant(Tensor::zeros(&[cfg.d, cfg.d]));
        let fb = tape.constant(Tensor::zeros(&[cfg.d]));
        let f = gated_fuse(&mut tape, x, m, fw, fb, &id_cfg).map_err(fmt_err)?;
        check(tape.value(f.out) == &xm, || "residual identity broken".into())?;
        checked += 1;
    }
    Ok(format!("{checked} randomized checks"))
}

fn random_probabilities(b: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| (0..b).map(|_| rng.random_range(0.02..0.98)).collect())
        .collect()
}

fn max_off(s: &[Vec<f64>], i: usize, by_row: bool) -> f64 {
    let b = s.len();
    let mut best = f64::NEG_INFINITY;
    for k in 0..b {
        if k != i {
            let v = if by_row { s[i][k] } else { s[k][i] };
            best = best.max(v);
        }
    }
    best
}

fn oracle_bce_hardest(s: &[Vec<f64>]) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for i in 0..b {
        total += 2.0 * s[i][i].ln();
        total += (1.0 - max_off(s, i, true)).ln();
        total += (1.0 - max_off(s, i, false)).ln();
    }
    -total / b as f64
}

fn oracle_bce_plain(s: &[Vec<f64>]) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for i in 0..b {
        let (mut row, mut col) = (0.0, 0.0);
        for k in 0..b {
            if k != i {
                row += (1.0 - s[i][k]).ln();
                col += (1.0 - s[k][i]).ln();
            }
        }
        total += 2.0 * s[i][i].ln() + (row + col) / (b - 1) as f64;
    }
    -total / b as f64
}

fn oracle_ranking(s: &[Vec<f64>], margin: f64) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for i in 0..b {
        let (mut row, mut col) = (0.0f64, 0.0f64);
        for k in 0..b {
            if k != i {
                row = row.max(margin - s[i][i] + s[i][k]);
                col = col.max(margin - s[i][i] + s[k][i]);
            }
        }
        total += row + col;
    }
    total / b as f64
}

fn exhaustive_hardest(s: &Tensor<f64>) -> (Vec<usize>, Vec<usize>) {
    let b = s.rows();
    let mut caption = vec![0; b];
    let mut image = vec![0; b];
    for i in 0..b {
        let mut best: Option<usize> = None;
        for j in (0..b).filter(|&j| j != i) {
            if best.is_none_or(|c| s.get(i, j) > s.get(i, c)) {
                best = Some(j);
            }
        }
        caption[i] = best.unwrap();
        let mut best: Option<usize> = None;
        for k in (0..b).filter(|&k| k != i) {
            if best.is_none_or(|c| s.get(k, i) > s.get(c, i)) {
                best = Some(k);
            }
        }
        image[i] = best.unwrap();
    }
    (caption, image)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let b = 2 + trial % 4;
        let s = random_probabilities(b, &mut rng);
        let margin = rng.random_range(0.0..0.5);
        let flat = Tensor::from_fn(b, b, |i, j| s[i][j]);
        let mut tape = Tape::<f64>::inference();
        let v = tape.constant(flat);
        let got = [
            bce_hardest(&mut tape, v, HardestBy::Score).map_err(fmt_err)?.value,
            bce_plain(&mut tape, v).map_err(fmt_err)?.value,
            ranking_hardest(&mut tape, v, margin).map_err(fmt_err)?.value,
        ];
        let want = [oracle_bce_hardest(&s), oracle_bce_plain(&s), oracle_ranking(&s, margin)];
        for (name, (g, w)) in ["bce_hardest", "bce_plain", "ranking_hardest"]
            .iter()
            .zip(got.iter().zip(want))
        {
            let err = (tape.value(*g).item() - w).abs();
            worst = worst.max(err);
            check(err <= 1e-10, || format!("{name} off by {err:e} on a {b}x{b} matrix"))?;
        }
    }
    for trial in 0..100 {
        let b = 2 + trial % 15;
        // coarse values force ties
        let s = Tensor::from_fn(b, b, |_, _| {
            if trial % 2 == 0 {
                (rng.random_range(0..5) as f64) / 5.0
            } else {
                rng.random_range(0.0..1.0)
            }
        });
        let h = hardest_negatives(&s, HardestBy::Score);
        let (caption, image) = exhaustive_hardest(&s);
        check(h.caption == caption && h.image == image, || {
            format!("hardest indices differ on batch {trial}")
        })?;
    }
    Ok(format!(
        "worst loss deviation {worst:.1e}; 100 hardest-negative scans agree"
    ))
}

fn desk_data() -> Result<camp::data::SyntheticData<f32>, String> {
    generate_synthetic::<f32>(&SyntheticSpec::default()).map_err(fmt_err)
}

struct DeskRun {
    best: Checkpoint<f32>,
    elapsed: Duration,
}

fn desk_run() -> Result<DeskRun, String> {
    let data = desk_data()?;
    let start = Instant::now();
    let mut trainer = Trainer::<f32>::new(ModelConfig::desk(), TrainConfig::desk()).map_err(fmt_err)?;
    let fit = trainer.fit(&data.train, &data.val, |_| {}).map_err(fmt_err)?;
    Ok(DeskRun {
        best: fit.best.ok_or("no epoch ran")?,
        elapsed: start.elapsed(),
    })
}

fn criterion_4(run: &DeskRun) -> Outcome {
    let data = desk_data()?;
    let r = evaluate(&data.test, &run.best.params, &run.best.config, 1).map_err(fmt_err)?;
    let (c, i) = (r.caption_retrieval.r1, r.image_retrieval.r1);
    let summary = format!(
        "test R@1 caption {c:.2} image {i:.2}, rsum {:.2}, {:.0}s",
        r.rsum,
        run.elapsed.as_secs_f64()
    );
    check(c >= 0.90 && i >= 0.90, || {
        format!("{summary}; need R@1 >= 0.90 both ways")
    })?;
    check(run.elapsed < Duration::from_secs(600), || {
        format!("{summary}; over 10 minutes")
    })?;
    Ok(summary)
}

fn criterion_5() -> Outcome {
    let data = desk_data()?;
    let grid = table4(&ModelConfig::desk(), &TrainConfig::desk());
    let names = ["camp", "no-gates", "no-residual", "no-fusion", "base", "bce-plain"];
    let rows = select(&grid, &names).map_err(fmt_err)?;
    let result = run_grid(&rows, &[0, 1, 2], &data.train, &data.val, &data.test, |_| {}).map_err(fmt_err)?;
    let camp = result[0].mean_rsum;
    let table: Vec<String> = result
        .iter()
        .map(|r| format!("{} {:.3}", r.name, r.mean_rsum))
        .collect();
    let beaten: Vec<&str> = result[1..]
        .iter()
        .filter(|r| r.mean_rsum > camp)
        .map(|r| r.name.as_str())
        .collect();
    check(beaten.is_empty(), || {
        format!("{}; above camp: {beaten:?}", table.join(", "))
    })?;
    Ok(table.join(", "))
}

fn criterion_6(run: &DeskRun) -> Outcome {
    let data = desk_data()?;
    let g = gate_means(&data.test, &run.best.params, &run.best.config).map_err(fmt_err)?;
    let (pos, neg) = (g.positive.ok_or("no gates")?, g.negative.ok_or("no gates")?);
    let summary = format!("mean gate positive {pos:.4}, negative {neg:.4}, ratio {:.3}", pos / neg);
    check(pos >= 2.0 * neg, || format!("{summary}; need ratio >= 2"))?;
    Ok(summary)
}

fn run_cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_camp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(fmt_err)?;
    check(out.status.success(), || {
        format!(
            "camp {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })?;
    Ok(out.stdout)
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(fmt_err)?;
    let mut evals = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let out = out.to_str().unwrap();
        run_cli(&["train", "--seed", "0", "--out", out])?;
        evals.push(run_cli(&["eval", "--checkpoint", &format!("{out}/best.ckpt")])?);
    }
    for file in ["stats.jsonl", "best.ckpt", "last.ckpt", "config.toml"] {
        let a = std::fs::read(dir.path().join("a").join(file)).map_err(fmt_err)?;
        let b = std::fs::read(dir.path().join("b").join(file)).map_err(fmt_err)?;
        check(a == b, || format!("{file} differs between runs"))?;
    }
    check(evals[0] == evals[1], || "evaluation output differs".into())?;
    let lines = std::fs::read_to_string(dir.path().join("a/stats.jsonl")).map_err(fmt_err)?;
    Ok(format!(
        "two seeded train+eval runs: {} stats lines, checkpoints and reports byte-identical",
        lines.lines().count()
    ))
}

/// Loads `bytes` without panicking; returns the error category.
fn load_category(bytes: &[u8], checkpoint: bool) -> Result<Option<&'static str>, String> {
    let path = Path::new("corrupt");
    catch_unwind(|| {
        if checkpoint {
            Checkpoint::<f32>::from_bytes(bytes, path, None)
                .err()
                .map(|e| e.category())
        } else {
            FeatureFile::from_bytes(bytes, path).err().map(|e| e.category())
        }
    })
    .map_err(|_| "loader panicked".to_string())
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(fmt_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data: Vec<f32> = (0..7 * 33).map(|_| rng.random_range(-3.0f32..3.0)).collect();
    let file = FeatureFile {
        dim: 7,
        count: 33,
        data,
    };
    let path = dir.path().join("x.feat");
    camp::data::write_feature_file(&path, &file).map_err(fmt_err)?;
    let back = camp::data::read_feature_file(&path).map_err(fmt_err)?;
    let bits_equal = back
        .data
        .iter()
        .zip(&file.data)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    check(back == file && bits_equal, || {
        "feature file round trip changed values".into()
    })?;
    let bytes = file.to_bytes();

    let cfg = small_model();
    let mut ckpt = Checkpoint::new(cfg.clone(), CampParams::<f32>::init(&cfg, &mut rng));
    ckpt.best_val_rsum = Some(4.25);
    let cpath = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, &cpath).map_err(fmt_err)?;
    let loaded: Checkpoint<f32> = load_checkpoint(&cpath, Some(&cfg)).map_err(fmt_err)?;
    check(loaded.params == ckpt.params, || "checkpoint parameters changed".into())?;
    check(loaded.to_bytes() == std::fs::read(&cpath).map_err(fmt_err)?, || {
        "checkpoint save-load-save not byte-identical".into()
    })?;
    let cbytes = ckpt.to_bytes();

    // targeted corruptions
    let mut magic = bytes.clone();
    magic[..8].copy_from_slice(b"NOTAFEAT");
    let mut version = bytes.clone();
    version[8] ^= 0x7f;
    let mut inflated = bytes.clone();
    inflated[14..18].copy_from_slice(&34u32.to_le_bytes());
    let mut nan = bytes.clone();
    nan[18 + 4 * 5..18 + 4 * 6].copy_from_slice(&f32::NAN.to_le_bytes());
    let cases: [(&str, &[u8], &str); 5] = [
        ("magic", &magic, "format"),
        ("version", &version, "format"),
        ("count+1", &inflated, "format"),
        ("nan", &nan, "format"),
        ("truncated", &bytes[..bytes.len() - 1], "format"),
    ];
    for (name, b, want) in cases {
        let got = load_category(b, false)?;
        check(got == Some(want), || format!("{name}: got {got:?}"))?;
    }
    check(
        FeatureFile::from_bytes(&magic, Path::new("x"))
            .unwrap_err()
            .to_string()
            .contains(std::str::from_utf8(FEATURE_MAGIC).unwrap()),
        || "magic error does not name the expected magic".into(),
    )?;
    let wider = ModelConfig {
        d: cfg.d + 1,
        ..cfg.clone()
    };
    let e = Checkpoint::<f32>::from_bytes(&cbytes, Path::new("m"), Some(&wider)).unwrap_err();
    check(e.category() == "shape", || format!("mismatched width gave {e}"))?;

    // random damage never panics
    let mut trials = 0;
    for round in 0..400 {
        let checkpoint = round % 2 == 1;
        let mut b = if checkpoint { cbytes.clone() } else { bytes.clone() };
        match round % 4 {
            0 | 1 => {
                let k = rng.random_range(0..b.len());
                b[k] ^= 1 << rng.random_range(0..8);
            }
            2 => b.truncate(rng.random_range(0..b.len())),
            _ => {
                let k = rng.random_range(0..b.len().min(64));
                b[k] = rng.random();
            }
        }
        load_category(&b, checkpoint)?;
        trials += 1;
    }
    Ok(format!(
        "round trips bit-exact; 5 targeted corruptions and a shape mismatch categorized; {trials} random corruptions handled"
    ))
}

/// Runs `f`, turning a panic into an error message.
fn guard<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run_it = |n: usize| wanted.is_empty() || wanted.contains(&n);
    std::panic::set_hook(Box::new(|_| {}));

    let mut desk_cache: Option<Result<DeskRun, String>> = None;
    let mut failures = Vec::new();
    for n in 1..=8 {
        if !run_it(n) {
            continue;
        }
        let start = Instant::now();
        let outcome = match n {
            1 => guard(criterion_1),
            2 => guard(criterion_2),
            3 => guard(criterion_3),
            4 | 6 => match desk_cache.get_or_insert_with(|| guard(desk_run)) {
                Ok(run) if n == 4 => guard(|| criterion_4(run)),
                Ok(run) => guard(|| criterion_6(run)),
                Err(e) => Err(format!("desk training failed: {e}")),
            },
            5 => guard(criterion_5),
            7 => guard(criterion_7),
            _ => guard(criterion_8),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {n}: PASS ({secs:.1}s) {msg}"),
            Err(msg) => {
                let known = if KNOWN_FAILURES.contains(&n) { " [known]" } else { "" };
                println!("criterion {n}: FAIL{known} ({secs:.1}s) {msg}");
                failures.push(n);
            }
        }
    }
    let unexpected: Vec<usize> = failures
        .iter()
        .copied()
        .filter(|n| !KNOWN_FAILURES.contains(n))
        .collect();
    println!(
        "acceptance: {} failed {:?}, unexpected {:?}",
        failures.len(),
        failures,
        unexpected
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
