//! Finite-difference checks of every differentiable operation, the encoders,
//! the core pipeline and the losses, run in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Tape, Var};
use crate::encoders::{clip_and_pad, encode_words, project_regions};
use crate::error::Result;
use crate::model::pipeline::{encode_caption, score_pairs, Prepared};
use crate::model::{
    affinity, aggregate_messages, attend_aggregate, forward, gated_fuse, match_score, prepare_caption, prepare_image,
    Aggregation, CampParams, FeatureBatch, FusionOp, ModelConfig, Scorer, Variant,
};
use crate::objectives::{bce_hardest, bce_plain, ranking_hardest, HardestBy};
use crate::tensor::Tensor;

pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;

type CaseFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync>;

/// A named scalar-valued function and the input shapes it is checked on.
pub struct SuiteCase {
    pub name: String,
    pub shapes: Vec<Vec<usize>>,
    pub f: CaseFn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    /// Worst relative error over all seeds.
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub coordinates: usize,
    pub failure: Option<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_error < SUITE_TOLERANCE
    }
}

fn case(
    name: &str,
    shapes: Vec<Vec<usize>>,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> SuiteCase {
    SuiteCase {
        name: name.to_string(),
        shapes,
        f: Box::new(f),
    }
}

fn primitive_cases() -> Vec<SuiteCase> {
    vec![
        case("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        case("matmul_canonical", vec![vec![3, 4], vec![4, 2]], |t, v| {
            t.matmul_canonical(v[0], v[1])
        }),
        case("transpose", vec![vec![2, 3]], |t, v| {
            let y = t.transpose(v[0])?;
            t.mul(y, y)
        }),
        case("add", vec![vec![2, 3], vec![2, 3]], |t, v| {
            let y = t.add(v[0], v[1])?;
            t.mul(y, y)
        }),
        case("sub", vec![vec![2, 3], vec![2, 3]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            t.mul(y, y)
        }),
        case("mul", vec![vec![3, 2], vec![3, 2]], |t, v| t.mul(v[0], v[1])),
        case("affine", vec![vec![4, 1]], |t, v| {
            let y = t.affine(v[0], -1.5, 0.3)?;
            t.mul(y, y)
        }),
        case("scale", vec![vec![2, 2]], |t, v| {
            let y = t.scale(v[0], 0.7)?;
            t.mul(y, v[0])
        }),
        case("sigmoid", vec![vec![3, 3]], |t, v| t.sigmoid(v[0])),
        case("tanh", vec![vec![3, 3]], |t, v| t.tanh(v[0])),
        case("relu", vec![vec![3, 3]], |t, v| {
            let y = t.relu(v[0])?;
            t.mul(y, y)
        }),
        case("linear", vec![vec![3, 4], vec![2, 3], vec![2]], |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            t.tanh(y)
        }),
        case("scaled_softmax", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.scaled_softmax(v[0], 1.7, None)?;
            t.mul(y, v[1])
        }),
        case("masked_softmax", vec![vec![2, 4], vec![2, 4]], |t, v| {
            let mask = [true, false, true, true, true, true, false, true];
            let y = t.scaled_softmax(v[0], 0.9, Some(&mask))?;
            t.mul(y, v[1])
        }),
        case("clamped_log", vec![vec![3, 2]], |t, v| {
            let s = t.sigmoid(v[0])?;
            t.clamped_log(s, 1e-7, 1.0 - 1e-7)
        }),
        case("sum", vec![vec![2, 3]], |t, v| {
            let s = t.sum(v[0])?;
            t.mul(s, s)
        }),
        case("column", vec![vec![3, 2]], |t, v| {
            let c = t.column(v[0], 1)?;
            t.mul(c, c)
        }),
        case("gather_cols", vec![vec![2, 3]], |t, v| {
            let c = t.gather_cols(v[0], &[2, 0, 2])?;
            t.mul(c, c)
        }),
        case("gather", vec![vec![2, 3]], |t, v| {
            let c = t.gather(v[0], &[5, 0, 5, 3])?;
            t.mul(c, c)
        }),
        case("concat_cols", vec![vec![2, 1], vec![2, 3]], |t, v| {
            let c = t.concat_cols(&[v[0], v[1], v[0]])?;
            t.tanh(c)
        }),
        case("concat_rows", vec![vec![1, 3], vec![2, 3]], |t, v| {
            let c = t.concat_rows(&[v[0], v[1]])?;
            t.mul(c, c)
        }),
        case("stack", vec![vec![2, 2], vec![3, 1]], |t, v| {
            let a = t.sum(v[0])?;
            let b = t.sum(v[1])?;
            let s = t.stack(&[a, b, a], &[3, 1])?;
            t.mul(s, s)
        }),
        case("cosine", vec![vec![5, 1], vec![5, 1]], |t, v| t.cosine(v[0], v[1])),
    ]
}

/// Small configuration used by the model-level checks.
pub fn suite_config() -> ModelConfig {
    ModelConfig {
        raw_dim: 6,
        embed_dim: 4,
        vocab_size: 10,
        max_words: 6,
        d: 8,
        d_h: 4,
        ..ModelConfig::desk()
    }
}

fn param_shapes(cfg: &ModelConfig) -> (CampParams<f64>, Vec<Vec<usize>>) {
    let template = CampParams::zeros(cfg);
    let shapes = template.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    (template, shapes)
}

const MASK: [bool; 5] = [true, true, true, false, true];
const TOKENS: [usize; 4] = [3, 9, 1, 4];

fn model_cases() -> Vec<SuiteCase> {
    let cfg = suite_config();
    let d = cfg.d;
    let mut out = Vec::new();

    let (template, shapes) = param_shapes(&cfg);
    let n_enc = template.encoder.named().len();
    let enc_shapes = shapes[..n_enc].to_vec();
    let core_shapes = shapes[n_enc..].to_vec();

    let enc_t = template.encoder.clone();
    let mut s = enc_shapes.clone();
    s.push(vec![cfg.raw_dim, 3]);
    out.push(case("project_regions", s, move |t, v| {
        let enc = enc_t.with_values(&v[..n_enc]);
        project_regions(t, v[n_enc], &enc)
    }));

    let enc_t = template.encoder.clone();
    let max_words = cfg.max_words;
    out.push(case("encode_words", enc_shapes, move |t, v| {
        let enc = enc_t.with_values(&v[..n_enc]);
        let seq = clip_and_pad(&TOKENS, max_words)?;
        encode_words(t, &seq, &enc)
    }));

    let n_core = core_shapes.len();
    let with_inputs = |extra: &[Vec<usize>]| {
        let mut s = core_shapes.clone();
        s.extend_from_slice(extra);
        s
    };

    let core_t = template.core.clone();
    out.push(case("affinity", with_inputs(&[vec![d, 4], vec![d, 5]]), move |t, v| {
        let core = core_t.with_values(&v[..n_core]);
        affinity(
            t,
            &FeatureBatch {
                v: v[n_core],
                t: v[n_core + 1],
                word_mask: &MASK,
            },
            &core,
        )
    }));

    out.push(case(
        "aggregate_messages",
        vec![vec![4, 5], vec![d, 4], vec![d, 5], vec![5, d], vec![4, d]],
        move |t, v| {
            let m = aggregate_messages(
                t,
                v[0],
                &FeatureBatch {
                    v: v[1],
                    t: v[2],
                    word_mask: &MASK,
                },
                4,
            )?;
            let a = t.mul(m.vtilde, v[3])?;
            let b = t.mul(m.ttilde, v[4])?;
            let (a, b) = (t.sum(a)?, t.sum(b)?);
            t.add(a, b)
        },
    ));

    for (name, op) in [
        ("gated_fuse_add", FusionOp::Add),
        ("gated_fuse_concat", FusionOp::Concat),
        ("gated_fuse_product", FusionOp::Product),
    ] {
        let c = ModelConfig {
            fusion_op: op,
            ..cfg.clone()
        };
        let width = c.fusion_width();
        out.push(case(
            name,
            vec![vec![d, 3], vec![3, d], vec![d, width], vec![d]],
            move |t, v| Ok(gated_fuse(t, v[0], v[1], v[2], v[3], &c)?.out),
        ));
    }

    for (name, agg, mask) in [
        ("attend_aggregate", Aggregation::Attention, Some(&MASK[..])),
        ("attend_aggregate_mean", Aggregation::Mean, Some(&MASK[..])),
    ] {
        out.push(case(name, vec![vec![d, 5], vec![1, d]], move |t, v| {
            attend_aggregate(t, v[0], v[1], mask, agg)
        }));
    }

    for (name, scorer) in [("match_score_mlp", Scorer::Mlp), ("match_score_cosine", Scorer::Cosine)] {
        let core_t = template.core.clone();
        out.push(case(name, with_inputs(&[vec![d, 1], vec![d, 1]]), move |t, v| {
            let core = core_t.with_values(&v[..n_core]);
            match_score(t, v[n_core], v[n_core + 1], &core, scorer)
        }));
    }

    let variants = [
        ("forward_camp", cfg.clone()),
        (
            "forward_no_cross_attn",
            ModelConfig {
                use_cross_attn: false,
                ..cfg.clone()
            },
        ),
        (
            "forward_no_gates",
            ModelConfig {
                use_gates: false,
                ..cfg.clone()
            },
        ),
        (
            "forward_no_residual",
            ModelConfig {
                use_residual: false,
                ..cfg.clone()
            },
        ),
        (
            "forward_concat",
            ModelConfig {
                fusion_op: FusionOp::Concat,
                ..cfg.clone()
            },
        ),
        (
            "forward_product",
            ModelConfig {
                fusion_op: FusionOp::Product,
                ..cfg.clone()
            },
        ),
        (
            "forward_mean_agg",
            ModelConfig {
                aggregation: Aggregation::Mean,
                ..cfg.clone()
            },
        ),
        (
            "forward_base",
            ModelConfig {
                variant: Variant::Base,
                scorer: Scorer::Cosine,
                ..cfg.clone()
            },
        ),
        (
            "forward_no_fusion",
            ModelConfig {
                variant: Variant::NoFusion,
                scorer: Scorer::Cosine,
                ..cfg.clone()
            },
        ),
    ];
    for (name, c) in variants {
        let (tmpl, shapes) = param_shapes(&c);
        let core_t = tmpl.core;
        let n_core = core_t.named().len();
        let mut s = shapes[n_enc..].to_vec();
        s.extend([vec![d, 4], vec![d, 5]]);
        out.push(case(name, s, move |t, v| {
            let core = core_t.with_values(&v[..n_core]);
            let batch = FeatureBatch {
                v: v[n_core],
                t: v[n_core + 1],
                word_mask: &MASK,
            };
            Ok(forward(t, &batch, &core, &c)?.score)
        }));
    }

    // encoders, core and loss together on a batch of three pairs
    let n_all = shapes.len();
    let mut s = shapes.clone();
    s.extend([vec![cfg.raw_dim, 3], vec![cfg.raw_dim, 2], vec![cfg.raw_dim, 4]]);
    let c = cfg.clone();
    out.push(case("end_to_end_bce_hardest", s, move |t, v| {
        let w = template.with_values(&v[..n_all]);
        let mut images = Vec::with_capacity(3);
        for k in 0..3 {
            let vk = project_regions(t, v[n_all + k], &w.encoder)?;
            images.push(prepare_image(t, vk, &w.core, &c)?);
        }
        let mut captions = Vec::with_capacity(3);
        for tokens in [&[3usize, 9, 1][..], &[4, 4, 2, 7], &[8]] {
            let e = encode_caption(t, tokens, &w.encoder, c.max_words)?;
            captions.push(prepare_caption(t, e.t, e.mask(), &w.core, &c)?);
        }
        let prep = Prepared { images, captions };
        let scores = score_pairs(t, &prep, &w.core, &c, |_, _, _, _| {})?;
        let s = t.stack(&scores, &[3, 3])?;
        Ok(bce_hardest(t, s, HardestBy::Score)?.value)
    }));
    out
}

fn loss_cases() -> Vec<SuiteCase> {
    vec![
        case("bce_hardest", vec![vec![4, 4]], |t, v| {
            let s = t.sigmoid(v[0])?;
            Ok(bce_hardest(t, s, HardestBy::Score)?.value)
        }),
        case("bce_hardest_loss_term", vec![vec![4, 4]], |t, v| {
            let s = t.sigmoid(v[0])?;
            Ok(bce_hardest(t, s, HardestBy::LossTerm)?.value)
        }),
        case("bce_plain", vec![vec![4, 4]], |t, v| {
            let s = t.sigmoid(v[0])?;
            Ok(bce_plain(t, s)?.value)
        }),
        case("ranking_hardest", vec![vec![4, 4]], |t, v| {
            // a wide margin keeps every hinge active
            Ok(ranking_hardest(t, v[0], 5.0)?.value)
        }),
    ]
}

/// Every check in the suite.
pub fn cases() -> Vec<SuiteCase> {
    let mut all = primitive_cases();
    all.extend(model_cases());
    all.extend(loss_cases());
    all
}

/// Runs one case on inputs drawn from `seed`.
pub fn check_case(c: &SuiteCase, seed: u64, eps: f64) -> crate::GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = c.shapes.iter().map(|s| Tensor::uniform(s, 1.0, &mut rng)).collect();
    grad_check(&c.f, &inputs, eps)
}

/// Worst error of every case over `seeds`.
pub fn run_gradient_suite(seeds: std::ops::Range<u64>, eps: f64) -> Vec<SuiteResult> {
    cases()
        .iter()
        .map(|c| {
            let mut res = SuiteResult {
                name: c.name.clone(),
                max_rel_error: 0.0,
                worst_seed: seeds.start,
                coordinates: 0,
                failure: None,
            };
            for seed in seeds.clone() {
                let r = check_case(c, seed, eps);
                res.coordinates = r.coordinates;
                if let Some(f) = r.failure {
                    res.failure.get_or_insert(format!("seed {seed}: {f}"));
                    res.max_rel_error = f64::INFINITY;
                    res.worst_seed = seed;
                } else if r.max_rel_error > res.max_rel_error {
                    res.max_rel_error = r.max_rel_error;
                    res.worst_seed = seed;
                }
            }
            res
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let names: std::collections::HashSet<_> = cases().into_iter().map(|c| c.name).collect();
        assert_eq!(names.len(), cases().len());
    }

    #[test]
    fn suite_passes_on_two_seeds() {
        for r in run_gradient_suite(0..2, SUITE_EPS) {
            assert!(r.passed(), "{r:?}");
        }
    }
}
