use crate::autodiff::{Tape, Var};
use crate::error::{CampError, Result};
use crate::model::config::{Aggregation, FusionOp, ModelConfig, Scorer, Variant};
use crate::model::weights::CoreWeights;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Encoded inputs of one image-sentence pair.
#[derive(Clone, Copy, Debug)]
pub struct FeatureBatch<'a> {
    /// Region features, `d x R`.
    pub v: Var,
    /// Word features, `d x N`.
    pub t: Var,
    /// `true` for real words, `false` for padding; length `N`.
    pub word_mask: &'a [bool],
}

/// Cross-modal messages and the attention that produced them.
#[derive(Clone, Copy, Debug)]
pub struct Messages {
    /// Visual features attended by each word, `N x d`.
    pub vtilde: Var,
    /// Textual features attended by each region, `R x d`.
    pub ttilde: Var,
    /// Word-specific attention over regions, `N x R`.
    pub attn_v: Var,
    /// Region-specific attention over words, `R x N`.
    pub attn_t: Var,
}

/// Output of one gated fusion direction.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub out: Var,
    /// Per-coordinate gates, `d x K`; `None` when gates are disabled.
    pub gates: Option<Var>,
}

/// All intermediates of a forward pass, for scoring and inspection.
#[derive(Clone, Copy, Debug)]
pub struct PairOutput {
    pub score: Var,
    pub v_star: Var,
    pub t_star: Var,
    pub v_hat: Var,
    pub t_hat: Var,
    pub affinity: Option<Var>,
    pub messages: Option<Messages>,
    pub gates_v: Option<Var>,
    pub gates_t: Option<Var>,
}

/// Running sum of gate values for averaging across pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GateSummary {
    pub sum: f64,
    pub count: usize,
}

impl GateSummary {
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    pub fn merge(&mut self, other: GateSummary) {
        self.sum += other.sum;
        self.count += other.count;
    }
}

impl PairOutput {
    /// Gate values of both directions; word gates at padding positions are skipped.
    pub fn gate_summary<S: Scalar>(&self, tape: &Tape<S>, word_mask: &[bool]) -> GateSummary {
        let mut s = GateSummary::default();
        if let Some(g) = self.gates_v {
            let g = tape.value(g);
            s.sum += g.sum().as_f64();
            s.count += g.numel();
        }
        if let Some(g) = self.gates_t {
            let g = tape.value(g);
            for i in 0..g.rows() {
                for (j, &live) in word_mask.iter().enumerate() {
                    if live {
                        s.sum += g.get(i, j).as_f64();
                        s.count += 1;
                    }
                }
            }
        }
        s
    }
}

fn validate_batch<S: Scalar>(tape: &Tape<S>, batch: &FeatureBatch) -> Result<(usize, usize, usize)> {
    let (v, t) = (tape.try_value(batch.v)?, tape.try_value(batch.t)?);
    if v.rows() != t.rows() || !v.is_matrix() || !t.is_matrix() {
        return Err(CampError::Shape {
            op: "feature batch",
            lhs: v.shape().to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    if batch.word_mask.len() != t.cols() {
        return Err(CampError::Shape {
            op: "word mask",
            lhs: t.shape().to_vec(),
            rhs: vec![batch.word_mask.len()],
        });
    }
    if !batch.word_mask.iter().any(|&m| m) {
        return Err(CampError::DegenerateRow { row: 0 });
    }
    Ok((v.rows(), v.cols(), t.cols()))
}

/// Repeats a column mask over `rows` rows (row-major).
fn tile_mask(mask: &[bool], rows: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(rows * mask.len());
    for _ in 0..rows {
        out.extend_from_slice(mask);
    }
    out
}

/// Region-word affinity `A = (W~v V)^T (W~t T)`, `R x N`.
pub fn affinity<S: Scalar>(tape: &mut Tape<S>, batch: &FeatureBatch, p: &CoreWeights<Var>) -> Result<Var> {
    validate_batch(tape, batch)?;
    let pv = tape.matmul(p.proj_v, batch.v)?;
    let pt = tape.matmul(p.proj_t, batch.t)?;
    let pv_t = tape.transpose(pv)?;
    tape.matmul(pv_t, pt)
}

fn messages_from<S: Scalar>(
    tape: &mut Tape<S>,
    a: Var,
    v_t: Var,
    t_t: Var,
    mask: &[bool],
    d_h: usize,
) -> Result<Messages> {
    let scale = S::lit((d_h as f64).sqrt());
    let a_t = tape.transpose(a)?;
    let attn_v = tape.scaled_softmax(a_t, scale, None)?;
    let vtilde = tape.matmul_canonical(attn_v, v_t)?;
    let regions = tape.value(a).rows();
    let attn_t = tape.scaled_softmax(a, scale, Some(&tile_mask(mask, regions)))?;
    let ttilde = tape.matmul_canonical(attn_t, t_t)?;
    Ok(Messages {
        vtilde,
        ttilde,
        attn_v,
        attn_t,
    })
}

/// Attention-weighted messages in both directions from the affinity matrix.
/// Word attention never lands on padding positions.
pub fn aggregate_messages<S: Scalar>(tape: &mut Tape<S>, a: Var, batch: &FeatureBatch, d_h: usize) -> Result<Messages> {
    let (_, r, n) = validate_batch(tape, batch)?;
    let shape = tape.try_value(a)?.shape().to_vec();
    if shape != [r, n] {
        return Err(CampError::Shape {
            op: "aggregate_messages",
            lhs: shape,
            rhs: vec![r, n],
        });
    }
    let v_t = tape.transpose(batch.v)?;
    let t_t = tape.transpose(batch.t)?;
    messages_from(tape, a, v_t, t_t, batch.word_mask, d_h)
}

/// Messages without cross-modal attention: every word receives the mean
/// region feature and every region the mean of the real word features.
pub fn mean_messages<S: Scalar>(tape: &mut Tape<S>, batch: &FeatureBatch) -> Result<Messages> {
    let (_, r, n) = validate_batch(tape, batch)?;
    let v_t = tape.transpose(batch.v)?;
    let t_t = tape.transpose(batch.t)?;
    mean_messages_from(tape, v_t, t_t, r, n, batch.word_mask)
}

fn mean_messages_from<S: Scalar>(
    tape: &mut Tape<S>,
    v_t: Var,
    t_t: Var,
    r: usize,
    n: usize,
    mask: &[bool],
) -> Result<Messages> {
    let live = mask.iter().filter(|&&m| m).count();
    let attn_v = tape.constant(Tensor::full(&[n, r], S::one() / S::lit(r as f64)));
    let w = S::one() / S::lit(live as f64);
    let attn_t = tape.constant(Tensor::from_fn(r, n, |_, j| if mask[j] { w } else { S::zero() }));
    let vtilde = tape.matmul_canonical(attn_v, v_t)?;
    let ttilde = tape.matmul_canonical(attn_t, t_t)?;
    Ok(Messages {
        vtilde,
        ttilde,
        attn_v,
        attn_t,
    })
}

/// Gated fusion of features `x` (`d x K`) with messages `m` (`K x d`):
/// column `i` becomes `F(g_i * (x_i (+) m_i)) [+ x_i]` with
/// `g_i = sigmoid(x_i * m_i)` and `F = tanh(W . + b)`.
pub fn gated_fuse<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    m: Var,
    f_w: Var,
    f_b: Var,
    cfg: &ModelConfig,
) -> Result<Fused> {
    let xs = tape.try_value(x)?.shape().to_vec();
    let ms = tape.try_value(m)?.shape().to_vec();
    if xs.len() != 2 || ms.len() != 2 || xs[0] != ms[1] || xs[1] != ms[0] {
        return Err(CampError::Shape {
            op: "gated_fuse",
            lhs: xs,
            rhs: ms,
        });
    }
    let d = xs[0];
    let want = match cfg.fusion_op {
        FusionOp::Concat => 2 * d,
        FusionOp::Add | FusionOp::Product => d,
    };
    let have = tape.try_value(f_w)?.cols();
    if have != want {
        return Err(CampError::Config(format!(
            "{:?} fusion needs a transform taking {want} inputs, got {have}",
            cfg.fusion_op
        )));
    }

    let m_t = tape.transpose(m)?;
    let core = match cfg.fusion_op {
        FusionOp::Add => tape.add(x, m_t)?,
        FusionOp::Product => tape.mul(x, m_t)?,
        FusionOp::Concat => tape.concat_rows(&[x, m_t])?,
    };
    let (gated, gates) = if cfg.use_gates {
        let pre = tape.mul(x, m_t)?;
        let g = tape.sigmoid(pre)?;
        let g_full = match cfg.fusion_op {
            FusionOp::Concat => tape.concat_rows(&[g, g])?,
            FusionOp::Add | FusionOp::Product => g,
        };
        (tape.mul(g_full, core)?, Some(g))
    } else {
        (core, None)
    };
    let lin = tape.linear(gated, f_w, f_b)?;
    let transformed = tape.tanh(lin)?;
    let out = if cfg.use_residual {
        tape.add(transformed, x)?
    } else {
        transformed
    };
    Ok(Fused { out, gates })
}

/// Pools the columns of `xhat` (`d x K`) into a `d x 1` vector, either with
/// `softmax(w xhat / sqrt(d))` weights or uniformly. Masked columns get zero weight.
pub fn attend_aggregate<S: Scalar>(
    tape: &mut Tape<S>,
    xhat: Var,
    w: Var,
    mask: Option<&[bool]>,
    aggregation: Aggregation,
) -> Result<Var> {
    let (d, k) = {
        let t = tape.try_value(xhat)?;
        (t.rows(), t.cols())
    };
    if let Some(mask) = mask {
        if mask.len() != k {
            return Err(CampError::Shape {
                op: "attend_aggregate mask",
                lhs: vec![d, k],
                rhs: vec![mask.len()],
            });
        }
    }
    let live = |j: usize| mask.is_none_or(|m| m[j]);
    let count = (0..k).filter(|&j| live(j)).count();
    if count == 0 {
        return Err(CampError::DegenerateRow { row: 0 });
    }
    match aggregation {
        Aggregation::Attention => {
            let logits = tape.matmul(w, xhat)?;
            let a = tape.scaled_softmax(logits, S::lit((d as f64).sqrt()), mask)?;
            let a_col = tape.transpose(a)?;
            tape.matmul_canonical(xhat, a_col)
        }
        Aggregation::Mean => {
            let wt = S::one() / S::lit(count as f64);
            let weights = tape.constant(Tensor::from_fn(k, 1, |j, _| if live(j) { wt } else { S::zero() }));
            tape.matmul_canonical(xhat, weights)
        }
    }
}

/// Matching score of pooled features.
pub fn match_score<S: Scalar>(
    tape: &mut Tape<S>,
    v_star: Var,
    t_star: Var,
    p: &CoreWeights<Var>,
    scorer: Scorer,
) -> Result<Var> {
    match scorer {
        Scorer::Mlp => {
            let s = tape.add(v_star, t_star)?;
            let h = tape.linear(s, p.mlp_w1, p.mlp_b1)?;
            let h = tape.relu(h)?;
            let o = tape.linear(h, p.mlp_w2, p.mlp_b2)?;
            tape.sigmoid(o)
        }
        Scorer::Cosine => tape.cosine(v_star, t_star),
    }
}

/// Per-image quantities shared by every caption it is paired with.
#[derive(Clone, Copy, Debug)]
pub struct ImageSide {
    pub v: Var,
    v_t: Var,
    proj_t: Option<Var>,
}

/// Per-caption quantities shared by every image it is paired with.
#[derive(Clone, Copy, Debug)]
pub struct CaptionSide<'a> {
    pub t: Var,
    pub mask: &'a [bool],
    t_t: Var,
    proj: Option<Var>,
}

fn needs_affinity(cfg: &ModelConfig) -> bool {
    cfg.variant != Variant::Base && cfg.use_cross_attn
}

pub fn prepare_image<S: Scalar>(
    tape: &mut Tape<S>,
    v: Var,
    p: &CoreWeights<Var>,
    cfg: &ModelConfig,
) -> Result<ImageSide> {
    let v_t = tape.transpose(v)?;
    let proj_t = if needs_affinity(cfg) {
        let pv = tape.matmul(p.proj_v, v)?;
        Some(tape.transpose(pv)?)
    } else {
        None
    };
    Ok(ImageSide { v, v_t, proj_t })
}

pub fn prepare_caption<'a, S: Scalar>(
    tape: &mut Tape<S>,
    t: Var,
    mask: &'a [bool],
    p: &CoreWeights<Var>,
    cfg: &ModelConfig,
) -> Result<CaptionSide<'a>> {
    let t_t = tape.transpose(t)?;
    let proj = if needs_affinity(cfg) {
        Some(tape.matmul(p.proj_t, t)?)
    } else {
        None
    };
    Ok(CaptionSide { t, mask, t_t, proj })
}

/// Scores one prepared image against one prepared caption.
pub fn forward_pair<S: Scalar>(
    tape: &mut Tape<S>,
    img: &ImageSide,
    cap: &CaptionSide,
    p: &CoreWeights<Var>,
    cfg: &ModelConfig,
) -> Result<PairOutput> {
    let batch = FeatureBatch {
        v: img.v,
        t: cap.t,
        word_mask: cap.mask,
    };
    let (_, r, n) = validate_batch(tape, &batch)?;

    if cfg.variant == Variant::Base {
        let v_star = attend_aggregate(tape, img.v, p.agg_v, None, cfg.aggregation)?;
        let t_star = attend_aggregate(tape, cap.t, p.agg_t, Some(cap.mask), cfg.aggregation)?;
        let score = match_score(tape, v_star, t_star, p, cfg.scorer)?;
        return Ok(PairOutput {
            score,
            v_star,
            t_star,
            v_hat: img.v,
            t_hat: cap.t,
            affinity: None,
            messages: None,
            gates_v: None,
            gates_t: None,
        });
    }

    let (affinity, messages) = match (img.proj_t, cap.proj) {
        (Some(pv_t), Some(pt)) if cfg.use_cross_attn => {
            let a = tape.matmul(pv_t, pt)?;
            (Some(a), messages_from(tape, a, img.v_t, cap.t_t, cap.mask, cfg.d_h)?)
        }
        _ if cfg.use_cross_attn => {
            return Err(CampError::Config(
                "inputs were prepared for a different configuration".into(),
            ));
        }
        _ => (None, mean_messages_from(tape, img.v_t, cap.t_t, r, n, cap.mask)?),
    };

    let (v_hat, t_hat, gates_v, gates_t) = if cfg.use_fusion() {
        let fv = gated_fuse(tape, img.v, messages.ttilde, p.fuse_v_w, p.fuse_v_b, cfg)?;
        let ft = gated_fuse(tape, cap.t, messages.vtilde, p.fuse_t_w, p.fuse_t_b, cfg)?;
        (fv.out, ft.out, fv.gates, ft.gates)
    } else {
        let tt = tape.transpose(messages.ttilde)?;
        let vt = tape.transpose(messages.vtilde)?;
        (tape.add(img.v, tt)?, tape.add(cap.t, vt)?, None, None)
    };

    let v_star = attend_aggregate(tape, v_hat, p.agg_v, None, cfg.aggregation)?;
    let t_star = attend_aggregate(tape, t_hat, p.agg_t, Some(cap.mask), cfg.aggregation)?;
    let score = match_score(tape, v_star, t_star, p, cfg.scorer)?;
    Ok(PairOutput {
        score,
        v_star,
        t_star,
        v_hat,
        t_hat,
        affinity,
        messages: Some(messages),
        gates_v,
        gates_t,
    })
}

/// Full pipeline for one pair of encoded inputs.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    batch: &FeatureBatch,
    p: &CoreWeights<Var>,
    cfg: &ModelConfig,
) -> Result<PairOutput> {
    validate_batch(tape, batch)?;
    let img = prepare_image(tape, batch.v, p, cfg)?;
    let cap = prepare_caption(tape, batch.t, batch.word_mask, p, cfg)?;
    forward_pair(tape, &img, &cap, p, cfg)
}
