//! Named architecture and objective variants, and a runner that trains and
//! evaluates each of them over several seeds.

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{CampError, Result};
use crate::evaluation::{evaluate, RetrievalReport};
use crate::model::{Aggregation, FusionOp, ModelConfig, Scorer, Variant};
use crate::objectives::LossKind;
use crate::scalar::Scalar;
use crate::training::{TrainConfig, Trainer};

/// One row of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationVariant {
    pub name: &'static str,
    pub label: &'static str,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn row(
    name: &'static str,
    label: &'static str,
    model: &ModelConfig,
    train: &TrainConfig,
    edit: impl FnOnce(&mut ModelConfig, &mut TrainConfig),
) -> AblationVariant {
    let (mut m, mut t) = (model.clone(), train.clone());
    edit(&mut m, &mut t);
    AblationVariant {
        name,
        label,
        model: m,
        train: t,
    }
}

fn cosine_ranking(m: &mut ModelConfig, t: &mut TrainConfig) {
    m.scorer = Scorer::Cosine;
    t.loss.kind = LossKind::Ranking;
}

/// The full model and its eleven ablations, derived from `model` and `train`.
pub fn table4(model: &ModelConfig, train: &TrainConfig) -> Vec<AblationVariant> {
    vec![
        row("camp", "CAMP", model, train, |_, _| {}),
        row("base", "Base model", model, train, |m, t| {
            m.variant = Variant::Base;
            cosine_ranking(m, t);
        }),
        row("no-cross-attn", "w/o cross-attn", model, train, |m, _| {
            m.use_cross_attn = false
        }),
        row("no-fusion", "w/o fusion", model, train, |m, t| {
            m.variant = Variant::NoFusion;
            cosine_ranking(m, t);
        }),
        row("no-gates", "Fusion w/o gates", model, train, |m, _| m.use_gates = false),
        row("no-residual", "Fusion w/o residual", model, train, |m, _| {
            m.use_residual = false
        }),
        row("no-attn-agg", "w/o attn-based agg", model, train, |m, _| {
            m.aggregation = Aggregation::Mean
        }),
        row("concat", "Concat fusion", model, train, |m, _| {
            m.fusion_op = FusionOp::Concat
        }),
        row("product", "Product fusion", model, train, |m, _| {
            m.fusion_op = FusionOp::Product
        }),
        row("joint-embedding", "Joint embedding", model, train, cosine_ranking),
        row("mlp-ranking", "MLP + ranking loss", model, train, |_, t| {
            t.loss.kind = LossKind::Ranking
        }),
        row("bce-plain", "BCE w/o hardest", model, train, |_, t| {
            t.loss.kind = LossKind::BcePlain
        }),
    ]
}

/// Looks up grid rows by name, keeping the order of `names`.
pub fn select(grid: &[AblationVariant], names: &[&str]) -> Result<Vec<AblationVariant>> {
    names
        .iter()
        .map(|n| {
            grid.iter().find(|v| v.name == *n).cloned().ok_or_else(|| {
                let known: Vec<&str> = grid.iter().map(|v| v.name).collect();
                CampError::Config(format!("unknown ablation variant {n:?}; known: {}", known.join(", ")))
            })
        })
        .collect()
}

/// Test-set result of one variant trained with one seed.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_val_rsum: Option<f64>,
    pub test: RetrievalReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub label: String,
    pub runs: Vec<AblationRun>,
    pub mean_rsum: f64,
}

/// Trains `variant` with `seed` on `train`, keeps the best epoch on `val` and
/// evaluates it on `test`.
pub fn run_variant<S: Scalar>(
    variant: &AblationVariant,
    seed: u64,
    train: &Dataset<S>,
    val: &Dataset<S>,
    test: &Dataset<S>,
) -> Result<AblationRun> {
    let cfg = TrainConfig {
        seed,
        ..variant.train.clone()
    };
    let mut trainer = Trainer::<S>::new(variant.model.clone(), cfg)?;
    let fit = trainer.fit(train, val, |_| {})?;
    let best = fit
        .best
        .ok_or_else(|| CampError::Config("training ran no epochs".into()))?;
    Ok(AblationRun {
        variant: variant.name.to_string(),
        seed,
        epochs: fit.history.len(),
        best_val_rsum: best.best_val_rsum,
        test: evaluate(test, &best.params, &variant.model, 1)?,
    })
}

/// Runs every variant for every seed; `on_run` sees each result as it lands.
pub fn run_grid<S: Scalar>(
    variants: &[AblationVariant],
    seeds: &[u64],
    train: &Dataset<S>,
    val: &Dataset<S>,
    test: &Dataset<S>,
    mut on_run: impl FnMut(&AblationRun),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(CampError::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let run = run_variant(v, seed, train, val, test)?;
            on_run(&run);
            runs.push(run);
        }
        let mean_rsum = runs.iter().map(|r| r.test.rsum).sum::<f64>() / runs.len() as f64;
        rows.push(AblationRow {
            name: v.name.to_string(),
            label: v.label.to_string(),
            runs,
            mean_rsum,
        });
    }
    Ok(rows)
}
