//! Mini-batch losses over a `B x B` score matrix `S`, where `S[i][j]` scores
//! image `i` against caption `j` and the diagonal holds the positive pairs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{CampError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Scores are clamped to `[SCORE_CLAMP, 1 - SCORE_CLAMP]` before taking logs.
pub const SCORE_CLAMP: f64 = 1e-7;
pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Binary cross-entropy on positives and the hardest in-batch negatives.
    #[default]
    BceHardest,
    /// Binary cross-entropy on positives and every negative, balanced by `1 / (B - 1)`.
    BcePlain,
    /// Hinge loss with a margin against the hardest negatives.
    Ranking,
}

/// How the hardest negative is chosen for the BCE loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HardestBy {
    /// The negative with the highest score.
    #[default]
    Score,
    /// The negative maximising `log(1 - s)`, i.e. the lowest score.
    LossTerm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: f64,
    pub hardest_by: HardestBy,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::BceHardest,
            margin: DEFAULT_MARGIN,
            hardest_by: HardestBy::Score,
        }
    }
}

/// Loss node plus its two directional parts as plain numbers.
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub value: Var,
    /// Image-to-text part (rows of `S`).
    pub i2t: f64,
    /// Text-to-image part (columns of `S`).
    pub t2i: f64,
}

/// Hardest negative per anchor: `caption[i]` is the column chosen for row `i`,
/// `image[i]` the row chosen for column `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hardest {
    pub caption: Vec<usize>,
    pub image: Vec<usize>,
}

fn better<S: Scalar>(candidate: S, current: S, by: HardestBy) -> bool {
    match by {
        HardestBy::Score => candidate > current,
        HardestBy::LossTerm => candidate < current,
    }
}

/// Single pass over `S` that finds both directions' hardest negatives.
/// Ties go to the lower index.
pub fn hardest_negatives<S: Scalar>(s: &Tensor<S>, by: HardestBy) -> Hardest {
    let b = s.rows();
    let mut caption: Vec<Option<usize>> = vec![None; b];
    let mut image: Vec<Option<usize>> = vec![None; b];
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let v = s.get(i, j);
            if caption[i].is_none_or(|c| better(v, s.get(i, c), by)) {
                caption[i] = Some(j);
            }
            if image[j].is_none_or(|k| better(v, s.get(k, j), by)) {
                image[j] = Some(i);
            }
        }
    }
    Hardest {
        caption: caption.into_iter().map(|c| c.unwrap_or(0)).collect(),
        image: image.into_iter().map(|k| k.unwrap_or(0)).collect(),
    }
}

/// Per-anchor argmax scan, kept separate from [`hardest_negatives`] as a
/// cross-check.
pub fn scan_hardest<S: Scalar>(s: &Tensor<S>, by: HardestBy) -> Hardest {
    let b = s.rows();
    let pick = |cands: Vec<(usize, S)>| {
        let mut best = cands[0];
        for c in cands.into_iter().skip(1) {
            if better(c.1, best.1, by) {
                best = c;
            }
        }
        best.0
    };
    Hardest {
        caption: (0..b)
            .map(|i| pick((0..b).filter(|&j| j != i).map(|j| (j, s.get(i, j))).collect()))
            .collect(),
        image: (0..b)
            .map(|i| pick((0..b).filter(|&k| k != i).map(|k| (k, s.get(k, i))).collect()))
            .collect(),
    }
}

fn check_matrix<S: Scalar>(tape: &Tape<S>, s: Var) -> Result<usize> {
    let t = tape.try_value(s)?;
    if !t.is_matrix() || t.rows() != t.cols() {
        return Err(CampError::InvalidShape(format!(
            "score matrix must be square, got {:?}",
            t.shape()
        )));
    }
    if t.rows() < 2 {
        return Err(CampError::InvalidShape(
            "score matrix needs a batch of at least 2".into(),
        ));
    }
    Ok(t.rows())
}

fn check_probabilities<S: Scalar>(t: &Tensor<S>) -> Result<()> {
    for (k, &v) in t.data().iter().enumerate() {
        if !(v > S::zero() && v < S::one()) {
            return Err(CampError::Domain(format!(
                "score {v} at ({}, {}) is outside (0, 1)",
                k / t.cols(),
                k % t.cols()
            )));
        }
    }
    Ok(())
}

fn flat(b: usize, i: usize, j: usize) -> usize {
    i * b + j
}

fn log_clamped<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    tape.clamped_log(x, S::lit(SCORE_CLAMP), S::lit(1.0 - SCORE_CLAMP))
}

fn log_complement<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    let c = tape.affine(x, -S::one(), S::one())?;
    log_clamped(tape, c)
}

/// Hardest-negative binary cross-entropy:
/// `-(1/B) sum_i [2 log S_ii + log(1 - S_ij*) + log(1 - S_k*i)]`.
pub fn bce_hardest<S: Scalar>(tape: &mut Tape<S>, s: Var, by: HardestBy) -> Result<LossValue> {
    let b = check_matrix(tape, s)?;
    check_probabilities(tape.value(s))?;
    let hard = hardest_negatives(tape.value(s), by);
    let diag: Vec<usize> = (0..b).map(|i| flat(b, i, i)).collect();
    let row_neg: Vec<usize> = (0..b).map(|i| flat(b, i, hard.caption[i])).collect();
    let col_neg: Vec<usize> = (0..b).map(|i| flat(b, hard.image[i], i)).collect();

    let pos = tape.gather(s, &diag)?;
    let log_pos = log_clamped(tape, pos)?;
    let rn = tape.gather(s, &row_neg)?;
    let log_rn = log_complement(tape, rn)?;
    let cn = tape.gather(s, &col_neg)?;
    let log_cn = log_complement(tape, cn)?;

    let i2t_sum = tape.add(log_pos, log_rn)?;
    let t2i_sum = tape.add(log_pos, log_cn)?;
    let both = tape.add(i2t_sum, t2i_sum)?;
    let total = tape.sum(both)?;
    let norm = -1.0 / b as f64;
    let value = tape.scale(total, S::lit(norm))?;
    Ok(LossValue {
        value,
        i2t: norm * tape.value(i2t_sum).sum().as_f64(),
        t2i: norm * tape.value(t2i_sum).sum().as_f64(),
    })
}

/// Binary cross-entropy over all negatives, each direction's negatives
/// weighted by `1 / (B - 1)`.
pub fn bce_plain<S: Scalar>(tape: &mut Tape<S>, s: Var) -> Result<LossValue> {
    let b = check_matrix(tape, s)?;
    check_probabilities(tape.value(s))?;
    let diag: Vec<usize> = (0..b).map(|i| flat(b, i, i)).collect();
    let off: Vec<usize> = (0..b)
        .flat_map(|i| (0..b).filter(move |&j| j != i).map(move |j| flat(b, i, j)))
        .collect();
    let pos = tape.gather(s, &diag)?;
    let log_pos = log_clamped(tape, pos)?;
    let neg = tape.gather(s, &off)?;
    let log_neg = log_complement(tape, neg)?;
    let pos_sum = tape.sum(log_pos)?;
    let neg_sum = tape.sum(log_neg)?;

    // The row and column negatives are the same set of entries, so each
    // direction contributes the same off-diagonal sum.
    let inv_b = 1.0 / (b - 1) as f64;
    let neg_part = tape.scale(neg_sum, S::lit(inv_b))?;
    let half = tape.add(pos_sum, neg_part)?;
    let norm = -1.0 / b as f64;
    let value = tape.scale(half, S::lit(2.0 * norm))?;
    let directional = norm * tape.value(half).item().as_f64();
    Ok(LossValue {
        value,
        i2t: directional,
        t2i: directional,
    })
}

/// Hardest-negative hinge loss:
/// `(1/B) sum_i ([a - S_ii + S_ij*]_+ + [a - S_ii + S_k*i]_+)`.
pub fn ranking_hardest<S: Scalar>(tape: &mut Tape<S>, s: Var, margin: f64) -> Result<LossValue> {
    let b = check_matrix(tape, s)?;
    if !(margin >= 0.0) || !margin.is_finite() {
        return Err(CampError::Config(format!("margin must be non-negative, got {margin}")));
    }
    let hard = hardest_negatives(tape.value(s), HardestBy::Score);
    let diag: Vec<usize> = (0..b).map(|i| flat(b, i, i)).collect();
    let row_neg: Vec<usize> = (0..b).map(|i| flat(b, i, hard.caption[i])).collect();
    let col_neg: Vec<usize> = (0..b).map(|i| flat(b, hard.image[i], i)).collect();
    let pos = tape.gather(s, &diag)?;

    let mut hinge = |idx: &[usize]| -> Result<Var> {
        let neg = tape.gather(s, idx)?;
        let gap = tape.sub(neg, pos)?;
        let shifted = tape.affine(gap, S::one(), S::lit(margin))?;
        let h = tape.relu(shifted)?;
        tape.sum(h)
    };
    let i2t = hinge(&row_neg)?;
    let t2i = hinge(&col_neg)?;
    let total = tape.add(i2t, t2i)?;
    let norm = 1.0 / b as f64;
    let value = tape.scale(total, S::lit(norm))?;
    Ok(LossValue {
        value,
        i2t: norm * tape.value(i2t).item().as_f64(),
        t2i: norm * tape.value(t2i).item().as_f64(),
    })
}

/// Dispatches on `cfg.kind`.
pub fn loss<S: Scalar>(tape: &mut Tape<S>, s: Var, cfg: &LossConfig) -> Result<LossValue> {
    match cfg.kind {
        LossKind::BceHardest => bce_hardest(tape, s, cfg.hardest_by),
        LossKind::BcePlain => bce_plain(tape, s),
        LossKind::Ranking => ranking_hardest(tape, s, cfg.margin),
    }
}
