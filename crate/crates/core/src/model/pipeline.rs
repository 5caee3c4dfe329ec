//! Batched scoring: encoders run once per item, the core once per pair.

use crate::autodiff::{Tape, Var};
use crate::encoders::{clip_and_pad, encode_words, project_regions, RawRegionFeatures, MAX_WORDS};
use crate::error::{CampError, Result};
use crate::model::forward::{forward_pair, prepare_caption, prepare_image, CaptionSide, ImageSide, PairOutput};
use crate::model::weights::{CampWeights, CoreWeights, EncoderWeights};
use crate::model::ModelConfig;
use crate::scalar::Scalar;

static ALL_REAL: [bool; MAX_WORDS] = [true; MAX_WORDS];

/// Encoded caption with padding columns already dropped.
#[derive(Clone, Copy, Debug)]
pub struct EncodedCaption {
    pub t: Var,
    pub len: usize,
}

impl EncodedCaption {
    /// Mask for the compacted columns (all real).
    pub fn mask(&self) -> &'static [bool] {
        &ALL_REAL[..self.len]
    }
}

/// `V` for one image.
pub fn encode_image<S: Scalar>(
    tape: &mut Tape<S>,
    raw: &RawRegionFeatures<S>,
    enc: &EncoderWeights<Var>,
) -> Result<Var> {
    let m = tape.constant(raw.features().clone());
    project_regions(tape, m, enc)
}

/// `T` for one caption, clipped and padded to `max_words` for the GRU and
/// then reduced to its real columns. Padding columns are never read by the
/// core, so dropping them leaves every score unchanged.
pub fn encode_caption<S: Scalar>(
    tape: &mut Tape<S>,
    tokens: &[usize],
    enc: &EncoderWeights<Var>,
    max_words: usize,
) -> Result<EncodedCaption> {
    if max_words > MAX_WORDS {
        return Err(CampError::Config(format!(
            "max_words {max_words} exceeds the supported {MAX_WORDS}"
        )));
    }
    let seq = clip_and_pad(tokens, max_words)?;
    let full = encode_words(tape, &seq, enc)?;
    let len = seq.real_tokens();
    let t = if len == seq.len() {
        full
    } else {
        let keep: Vec<usize> = (0..len).collect();
        tape.gather_cols(full, &keep)?
    };
    Ok(EncodedCaption { t, len })
}

/// Prepared per-item inputs of a scoring block.
pub struct Prepared {
    pub images: Vec<ImageSide>,
    pub captions: Vec<CaptionSide<'static>>,
}

/// Encodes images and captions and prepares them for pairwise scoring.
pub fn prepare<S: Scalar>(
    tape: &mut Tape<S>,
    images: &[&RawRegionFeatures<S>],
    captions: &[&[usize]],
    w: &CampWeights<Var>,
    cfg: &ModelConfig,
) -> Result<Prepared> {
    let mut img = Vec::with_capacity(images.len());
    for raw in images {
        let v = encode_image(tape, raw, &w.encoder)?;
        img.push(prepare_image(tape, v, &w.core, cfg)?);
    }
    let mut cap = Vec::with_capacity(captions.len());
    for tokens in captions {
        let e = encode_caption(tape, tokens, &w.encoder, cfg.max_words)?;
        cap.push(prepare_caption(tape, e.t, e.mask(), &w.core, cfg)?);
    }
    Ok(Prepared {
        images: img,
        captions: cap,
    })
}

/// Scores every image against every caption; `visit` sees each pair's output.
/// Returns the row-major score nodes.
pub fn score_pairs<S: Scalar>(
    tape: &mut Tape<S>,
    prepared: &Prepared,
    core: &CoreWeights<Var>,
    cfg: &ModelConfig,
    mut visit: impl FnMut(&Tape<S>, usize, usize, &PairOutput),
) -> Result<Vec<Var>> {
    let mut scores = Vec::with_capacity(prepared.images.len() * prepared.captions.len());
    for (i, img) in prepared.images.iter().enumerate() {
        for (j, cap) in prepared.captions.iter().enumerate() {
            let out = forward_pair(tape, img, cap, core, cfg)?;
            visit(tape, i, j, &out);
            scores.push(out.score);
        }
    }
    Ok(scores)
}
