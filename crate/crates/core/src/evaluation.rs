//! Recall@K retrieval metrics in both directions.
//!
//! `S[i][j]` scores image `i` against caption `j`. Caption retrieval ranks the
//! captions of each image's row; image retrieval ranks the images of each
//! caption's column. Equal scores are ordered by index, lower first.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::encoders::RawRegionFeatures;
use crate::error::{CampError, Result};
use crate::model::pipeline::{encode_caption, encode_image};
use crate::model::{forward_pair, prepare_caption, prepare_image, CampParams, GateSummary, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Query by image, retrieve captions.
    CaptionRetrieval,
    /// Query by caption, retrieve images.
    ImageRetrieval,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl Recalls {
    pub fn sum(&self) -> f64 {
        self.r1 + self.r5 + self.r10
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub caption_retrieval: Recalls,
    pub image_retrieval: Recalls,
    pub rsum: f64,
    /// Number of captions (ground-truth pairs) evaluated.
    pub pair_count: usize,
}

/// Position of `target` among `n` candidates scored by `score`, with ties
/// broken by index.
fn rank_of<S: Scalar>(n: usize, target: usize, score: impl Fn(usize) -> S) -> usize {
    let t = score(target);
    (0..n)
        .filter(|&k| {
            let s = score(k);
            s > t || (s == t && k < target)
        })
        .count()
}

/// Fraction of queries whose ground truth ranks in the top `k`.
///
/// `gt[j]` is the image of caption `j`. Images without any caption are not
/// queries for caption retrieval.
pub fn recall_at_k<S: Scalar>(s: &Tensor<S>, gt: &[usize], k: usize, dir: Direction) -> Result<f64> {
    let (n_img, n_cap) = (s.rows(), s.cols());
    if !s.is_matrix() || gt.len() != n_cap {
        return Err(CampError::Shape {
            op: "recall_at_k",
            lhs: s.shape().to_vec(),
            rhs: vec![gt.len()],
        });
    }
    if let Some(&bad) = gt.iter().find(|&&i| i >= n_img) {
        return Err(CampError::Config(format!(
            "ground-truth image {bad} outside gallery of {n_img}"
        )));
    }
    if k == 0 {
        return Err(CampError::Config("k must be at least 1".into()));
    }
    let gallery = match dir {
        Direction::CaptionRetrieval => n_cap,
        Direction::ImageRetrieval => n_img,
    };
    if k > gallery {
        log::warn!("recall@{k} requested on a gallery of {gallery}; using the full gallery");
    }
    let (hits, queries) = match dir {
        Direction::ImageRetrieval => {
            let hits = (0..n_cap)
                .filter(|&j| rank_of(n_img, gt[j], |i| s.get(i, j)) < k)
                .count();
            (hits, n_cap)
        }
        Direction::CaptionRetrieval => {
            let mut best = vec![usize::MAX; n_img];
            for (j, &i) in gt.iter().enumerate() {
                best[i] = best[i].min(rank_of(n_cap, j, |c| s.get(i, c)));
            }
            let queries = best.iter().filter(|&&r| r != usize::MAX).count();
            (best.iter().filter(|&&r| r < k).count(), queries)
        }
    };
    if queries == 0 {
        return Err(CampError::Config("no queries to evaluate".into()));
    }
    Ok(hits as f64 / queries as f64)
}

/// R@1/5/10 both ways plus their sum.
pub fn retrieval_report<S: Scalar>(s: &Tensor<S>, gt: &[usize]) -> Result<RetrievalReport> {
    let recalls = |dir| -> Result<Recalls> {
        Ok(Recalls {
            r1: recall_at_k(s, gt, 1, dir)?,
            r5: recall_at_k(s, gt, 5, dir)?,
            r10: recall_at_k(s, gt, 10, dir)?,
        })
    };
    let caption_retrieval = recalls(Direction::CaptionRetrieval)?;
    let image_retrieval = recalls(Direction::ImageRetrieval)?;
    Ok(RetrievalReport {
        caption_retrieval,
        image_retrieval,
        rsum: caption_retrieval.sum() + image_retrieval.sum(),
        pair_count: gt.len(),
    })
}

/// Scores and gate statistics of every image-caption cell.
pub struct ScoreGrid<S> {
    pub scores: Tensor<S>,
    /// Row-major, one summary per cell.
    pub gates: Vec<GateSummary>,
}

/// Full score matrix without gradients. Encoders run once per item; rows are
/// scored in parallel on the current rayon pool.
pub fn score_grid<S: Scalar>(
    images: &[RawRegionFeatures<S>],
    captions: &[&[usize]],
    params: &CampParams<S>,
    cfg: &ModelConfig,
) -> Result<ScoreGrid<S>> {
    if images.is_empty() || captions.is_empty() {
        return Err(CampError::Config("cannot score an empty gallery".into()));
    }
    let mut tape = Tape::inference();
    let enc = params.encoder.bind(&mut tape);
    let mut vs = Vec::with_capacity(images.len());
    for raw in images {
        let v = encode_image(&mut tape, raw, &enc)?;
        vs.push(tape.value(v).clone());
    }
    let mut ts = Vec::with_capacity(captions.len());
    for tokens in captions {
        let e = encode_caption(&mut tape, tokens, &enc, cfg.max_words)?;
        ts.push((tape.value(e.t).clone(), e.mask()));
    }
    drop(tape);

    let rows: Vec<Result<Vec<(S, GateSummary)>>> = vs
        .par_iter()
        .map(|v| {
            let mut tape = Tape::inference();
            let core = params.core.bind(&mut tape);
            let v = tape.constant(v.clone());
            let img = prepare_image(&mut tape, v, &core, cfg)?;
            let mut row = Vec::with_capacity(ts.len());
            for (t, mask) in &ts {
                let t = tape.constant(t.clone());
                let cap = prepare_caption(&mut tape, t, mask, &core, cfg)?;
                let out = forward_pair(&mut tape, &img, &cap, &core, cfg)?;
                row.push((tape.value(out.score).item(), out.gate_summary(&tape, mask)));
            }
            Ok(row)
        })
        .collect();

    let mut data = Vec::with_capacity(images.len() * captions.len());
    let mut gates = Vec::with_capacity(images.len() * captions.len());
    for row in rows {
        for (s, g) in row? {
            data.push(s);
            gates.push(g);
        }
    }
    Ok(ScoreGrid {
        scores: Tensor::new(vec![images.len(), captions.len()], data)?,
        gates,
    })
}

pub fn score_all<S: Scalar>(
    images: &[RawRegionFeatures<S>],
    captions: &[&[usize]],
    params: &CampParams<S>,
    cfg: &ModelConfig,
) -> Result<Tensor<S>> {
    Ok(score_grid(images, captions, params, cfg)?.scores)
}

/// Recalls over `folds` contiguous image folds, averaged. One fold scores
/// the whole set.
pub fn evaluate<S: Scalar>(
    data: &Dataset<S>,
    params: &CampParams<S>,
    cfg: &ModelConfig,
    folds: usize,
) -> Result<RetrievalReport> {
    if folds == 0 || folds > data.images.len() {
        return Err(CampError::Config(format!(
            "cannot split {} images into {folds} folds",
            data.images.len()
        )));
    }
    let per = data.images.len() / folds;
    let mut total = RetrievalReport::default();
    for f in 0..folds {
        let part = data.slice_images(f * per..(f + 1) * per);
        let caps: Vec<&[usize]> = part.captions.iter().map(|c| c.tokens.as_slice()).collect();
        let s = score_all(&part.images, &caps, params, cfg)?;
        let r = retrieval_report(&s, &part.caption_images())?;
        for (acc, x) in [
            (&mut total.caption_retrieval, r.caption_retrieval),
            (&mut total.image_retrieval, r.image_retrieval),
        ] {
            acc.r1 += x.r1 / folds as f64;
            acc.r5 += x.r5 / folds as f64;
            acc.r10 += x.r10 / folds as f64;
        }
        total.pair_count += r.pair_count;
    }
    total.rsum = total.caption_retrieval.sum() + total.image_retrieval.sum();
    Ok(total)
}

/// Mean gate value over matching pairs and over mismatched pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateMeans {
    pub positive: Option<f64>,
    pub negative: Option<f64>,
}

pub fn gate_means<S: Scalar>(data: &Dataset<S>, params: &CampParams<S>, cfg: &ModelConfig) -> Result<GateMeans> {
    let caps: Vec<&[usize]> = data.captions.iter().map(|c| c.tokens.as_slice()).collect();
    let grid = score_grid(&data.images, &caps, params, cfg)?;
    let (mut pos, mut neg) = (GateSummary::default(), GateSummary::default());
    let n_cap = caps.len();
    for i in 0..data.images.len() {
        for (j, c) in data.captions.iter().enumerate() {
            let g = grid.gates[i * n_cap + j];
            if c.image == i {
                pos.merge(g);
            } else {
                neg.merge(g);
            }
        }
    }
    Ok(GateMeans {
        positive: pos.mean(),
        negative: neg.mean(),
    })
}

/// Gate and score breakdown of one image-caption pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairInspection {
    pub image: usize,
    pub caption: usize,
    /// Whether the caption belongs to the image.
    pub matching: bool,
    pub score: f64,
    pub tokens: Vec<usize>,
    /// Mean over all gate values of the pair.
    pub gate_mean: Option<f64>,
    /// Mean gate of each region; empty when gates are disabled.
    pub region_gates: Vec<f64>,
    /// Mean gate of each non-padding word; empty when gates are disabled.
    pub word_gates: Vec<f64>,
}

fn column_means<S: Scalar>(g: &Tensor<S>, keep: impl Fn(usize) -> bool) -> Vec<f64> {
    (0..g.cols())
        .filter(|&j| keep(j))
        .map(|j| (0..g.rows()).map(|i| g.get(i, j).as_f64()).sum::<f64>() / g.rows() as f64)
        .collect()
}

pub fn inspect_pair<S: Scalar>(
    data: &Dataset<S>,
    image: usize,
    caption: usize,
    params: &CampParams<S>,
    cfg: &ModelConfig,
) -> Result<PairInspection> {
    let (Some(raw), Some(cap)) = (data.images.get(image), data.captions.get(caption)) else {
        return Err(CampError::Config(format!(
            "pair ({image}, {caption}) outside {} images and {} captions",
            data.images.len(),
            data.captions.len()
        )));
    };
    let mut tape = Tape::inference();
    let enc = params.encoder.bind(&mut tape);
    let core = params.core.bind(&mut tape);
    let v = encode_image(&mut tape, raw, &enc)?;
    let e = encode_caption(&mut tape, &cap.tokens, &enc, cfg.max_words)?;
    let mask = e.mask();
    let img = prepare_image(&mut tape, v, &core, cfg)?;
    let side = prepare_caption(&mut tape, e.t, mask, &core, cfg)?;
    let out = forward_pair(&mut tape, &img, &side, &core, cfg)?;
    let region_gates = out
        .gates_v
        .map(|g| column_means(tape.value(g), |_| true))
        .unwrap_or_default();
    let word_gates = out
        .gates_t
        .map(|g| column_means(tape.value(g), |j| mask.get(j).copied().unwrap_or(false)))
        .unwrap_or_default();
    Ok(PairInspection {
        image,
        caption,
        matching: cap.image == image,
        score: tape.value(out.score).item().as_f64(),
        tokens: cap.tokens.clone(),
        gate_mean: out.gate_summary(&tape, mask).mean(),
        region_gates,
        word_gates,
    })
}
