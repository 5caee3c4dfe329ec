//! Region projection and the bidirectional GRU word encoder.

use crate::autodiff::{Tape, Var};
use crate::error::{CampError, Result};
use crate::model::weights::{EncoderWeights, GruWeights};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reserved token id for padding positions.
pub const PAD_TOKEN: usize = 0;
/// Default sentence length after clipping and padding.
pub const MAX_WORDS: usize = 50;
/// Upper bound on region proposals per image.
pub const MAX_REGIONS: usize = 36;

/// Pooled region descriptors of one image, one column per region.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRegionFeatures<S> {
    m: Tensor<S>,
}

impl<S: Scalar> RawRegionFeatures<S> {
    pub fn new(m: Tensor<S>) -> Result<Self> {
        if !m.is_matrix() || m.cols() > MAX_REGIONS {
            return Err(CampError::InvalidShape(format!(
                "region features must be raw_dim x R with 1 <= R <= {MAX_REGIONS}, got {:?}",
                m.shape()
            )));
        }
        if !m.is_finite() {
            return Err(CampError::Domain("region features contain non-finite values".into()));
        }
        Ok(Self { m })
    }

    pub fn features(&self) -> &Tensor<S> {
        &self.m
    }

    pub fn regions(&self) -> usize {
        self.m.cols()
    }

    pub fn raw_dim(&self) -> usize {
        self.m.rows()
    }
}

/// Token ids padded to a fixed length, with `mask[i] == true` for real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Keeps the first `max_len` tokens and pads the rest with [`PAD_TOKEN`].
pub fn clip_and_pad(words: &[usize], max_len: usize) -> Result<TokenSequence> {
    if words.is_empty() {
        return Err(CampError::Domain("cannot encode an empty sentence".into()));
    }
    if max_len == 0 {
        return Err(CampError::Config("max_len must be positive".into()));
    }
    let kept = words.len().min(max_len);
    let mut ids = words[..kept].to_vec();
    ids.resize(max_len, PAD_TOKEN);
    let mask = (0..max_len).map(|i| i < kept).collect();
    Ok(TokenSequence { ids, mask })
}

/// `V = W_I m + b_I`, one column per region.
pub fn project_regions<S: Scalar>(tape: &mut Tape<S>, raw: Var, p: &EncoderWeights<Var>) -> Result<Var> {
    tape.linear(raw, p.w_i, p.b_i)
}

/// Runs one GRU direction over the columns of `x` in the given order and
/// returns the hidden state at each visited position (in visiting order).
///
/// `z = sig(W_z x + U_z h + b_z)`, `r = sig(W_r x + U_r h + b_r)`,
/// `h~ = tanh(W_h x + U_h (r * h) + b_h)`, `h' = (1 - z) * h + z * h~`.
fn run_gru<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    g: &GruWeights<Var>,
    order: impl Iterator<Item = usize>,
) -> Result<Vec<Var>> {
    let hidden = tape.value(g.u_z).rows();
    let xz = tape.linear(x, g.w_z, g.b_z)?;
    let xr = tape.linear(x, g.w_r, g.b_r)?;
    let xh = tape.linear(x, g.w_h, g.b_h)?;
    let mut h = tape.constant(Tensor::zeros(&[hidden, 1]));
    let mut states = Vec::new();
    for t in order {
        let (xz_t, xr_t, xh_t) = (tape.column(xz, t)?, tape.column(xr, t)?, tape.column(xh, t)?);
        let uz = tape.matmul(g.u_z, h)?;
        let z_pre = tape.add(xz_t, uz)?;
        let z = tape.sigmoid(z_pre)?;
        let ur = tape.matmul(g.u_r, h)?;
        let r_pre = tape.add(xr_t, ur)?;
        let r = tape.sigmoid(r_pre)?;
        let rh = tape.mul(r, h)?;
        let uh = tape.matmul(g.u_h, rh)?;
        let c_pre = tape.add(xh_t, uh)?;
        let cand = tape.tanh(c_pre)?;
        let delta = tape.sub(cand, h)?;
        let step = tape.mul(z, delta)?;
        h = tape.add(h, step)?;
        states.push(h);
    }
    Ok(states)
}

/// Word features `T`: column `i` is the mean of the forward and backward GRU
/// hidden states at position `i`. Padding positions are stepped over like
/// any other token.
pub fn encode_words<S: Scalar>(tape: &mut Tape<S>, tokens: &TokenSequence, p: &EncoderWeights<Var>) -> Result<Var> {
    let vocab = tape.value(p.embedding).cols();
    if tokens.is_empty() {
        return Err(CampError::Domain("cannot encode an empty sentence".into()));
    }
    if let Some(&id) = tokens.ids.iter().find(|&&id| id >= vocab) {
        return Err(CampError::TokenOutOfVocab { id, vocab });
    }
    let n = tokens.len();
    let x = tape.gather_cols(p.embedding, &tokens.ids)?;
    let fwd = run_gru(tape, x, &p.gru_fwd, 0..n)?;
    let mut bwd = run_gru(tape, x, &p.gru_bwd, (0..n).rev())?;
    bwd.reverse();
    let hf = tape.concat_cols(&fwd)?;
    let hb = tape.concat_cols(&bwd)?;
    let sum = tape.add(hf, hb)?;
    tape.scale(sum, S::lit(0.5))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check, sigmoid};
    use crate::model::{CampParams, ModelConfig};

    type T = Tensor<f64>;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            raw_dim: 6,
            embed_dim: 3,
            vocab_size: 7,
            max_words: 5,
            d: 4,
            d_h: 2,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn clip_and_pad_examples() {
        let s = clip_and_pad(&[4, 5, 6], MAX_WORDS).unwrap();
        assert_eq!(s.len(), 50);
        assert_eq!(s.real_tokens(), 3);
        assert!(s.ids[3..].iter().all(|&t| t == PAD_TOKEN));

        let long: Vec<usize> = (1..=60).collect();
        let s = clip_and_pad(&long, MAX_WORDS).unwrap();
        assert_eq!(s.ids, (1..=50).collect::<Vec<_>>());
        assert!(s.mask.iter().all(|&m| m));

        let exact: Vec<usize> = (1..=50).collect();
        let s = clip_and_pad(&exact, MAX_WORDS).unwrap();
        assert_eq!(s.ids, exact);
        assert!(s.mask.iter().all(|&m| m));

        assert!(clip_and_pad(&[], MAX_WORDS).is_err());
    }

    #[test]
    fn raw_regions_validate() {
        assert!(RawRegionFeatures::new(T::zeros(&[4, 37])).is_err());
        let mut bad = T::zeros(&[4, 2]);
        bad.data_mut()[3] = f64::NAN;
        assert!(RawRegionFeatures::new(bad).is_err());
        assert_eq!(RawRegionFeatures::new(T::zeros(&[4, 2])).unwrap().regions(), 2);
    }

    #[test]
    fn projection_examples() {
        let cfg = small_cfg();
        let mut p = CampParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).encoder;
        let raw = T::uniform(&[6, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1));

        // zero weights, constant bias
        p.w_i = T::zeros(&[4, 6]);
        p.b_i = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut tape = Tape::new();
        let w = p.bind(&mut tape);
        let m = tape.constant(raw.clone());
        let v = project_regions(&mut tape, m, &w).unwrap();
        for j in 0..3 {
            assert_eq!(tape.value(v).col(j).data(), p.b_i.data());
        }

        // one-hot rows select coordinates
        p.w_i = T::from_fn(4, 6, |i, j| if j == [5, 0, 2, 2][i] { 1.0 } else { 0.0 });
        p.b_i = T::zeros(&[4]);
        let mut tape = Tape::new();
        let w = p.bind(&mut tape);
        let m = tape.constant(raw.clone());
        let v = project_regions(&mut tape, m, &w).unwrap();
        for j in 0..3 {
            for (i, &src) in [5, 0, 2, 2].iter().enumerate() {
                assert_eq!(tape.value(v).get(i, j), raw.get(src, j));
            }
        }
    }

    #[test]
    fn projection_matches_matmul_oracle_at_full_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w_i = T::uniform(&[5, 2048], 0.05, &mut rng);
        let b_i = T::uniform(&[5], 1.0, &mut rng);
        let raw = T::uniform(&[2048, 3], 1.0, &mut rng);
        let cfg = ModelConfig {
            raw_dim: 2048,
            d: 5,
            d_h: 2,
            ..small_cfg()
        };
        let mut p = CampParams::<f64>::init(&cfg, &mut rng).encoder;
        p.w_i = w_i.clone();
        p.b_i = b_i.clone();
        let mut tape = Tape::new();
        let w = p.bind(&mut tape);
        let m = tape.constant(raw.clone());
        let v = project_regions(&mut tape, m, &w).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = b_i.data()[i];
                for k in 0..2048 {
                    acc += w_i.get(i, k) * raw.get(k, j);
                }
                assert!((tape.value(v).get(i, j) - acc).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn projection_is_linear_without_bias() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = CampParams::<f64>::init(&cfg, &mut rng).encoder;
        let m1 = T::uniform(&[6, 2], 1.0, &mut rng);
        let m2 = T::uniform(&[6, 2], 1.0, &mut rng);
        let (a, b) = (2.0, -0.5);
        let mix = T::from_fn(6, 2, |i, j| a * m1.get(i, j) + b * m2.get(i, j));
        let mut tape = Tape::new();
        let w = p.bind(&mut tape);
        let outs: Vec<T> = [m1, m2, mix]
            .into_iter()
            .map(|m| {
                let m = tape.constant(m);
                let v = project_regions(&mut tape, m, &w).unwrap();
                tape.value(v).clone()
            })
            .collect();
        for k in 0..outs[0].numel() {
            let want = a * outs[0].data()[k] + b * outs[1].data()[k];
            assert!((outs[2].data()[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gru_gives_zero_features() {
        let cfg = small_cfg();
        let p = CampParams::<f64>::zeros(&cfg).encoder;
        let mut tape = Tape::new();
        let w = p.bind(&mut tape);
        let tokens = clip_and_pad(&[1, 2, 3], cfg.max_words).unwrap();
        let t = encode_words(&mut tape, &tokens, &w).unwrap();
        assert_eq!(tape.value(t).shape(), &[4, 5]);
        assert!(tape.value(t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_out_of_vocab_tokens() {
        let cfg = small_cfg();
        let p = CampParams::<f64>::zeros(&cfg).encoder;
        let mut tape = Tape::new();
        let w = p.bind(&mut tape);
        let tokens = clip_and_pad(&[1, 7], cfg.max_words).unwrap();
        assert!(matches!(
            encode_words(&mut tape, &tokens, &w),
            Err(CampError::TokenOutOfVocab { id: 7, vocab: 7 })
        ));
    }

    /// Step-by-step GRU written directly on plain arrays.
    fn oracle_gru(g: &GruWeights<T>, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let hdim = g.u_z.rows();
        let affine = |w: &T, u: &T, b: &T, x: &[f64], h: &[f64]| -> Vec<f64> {
            (0..hdim)
                .map(|i| {
                    let wx: f64 = (0..x.len()).map(|k| w.get(i, k) * x[k]).sum();
                    let uh: f64 = (0..hdim).map(|k| u.get(i, k) * h[k]).sum();
                    wx + uh + b.data()[i]
                })
                .collect()
        };
        let mut h = vec![0.0; hdim];
        let mut out = Vec::new();
        for x in xs {
            let z: Vec<f64> = affine(&g.w_z, &g.u_z, &g.b_z, x, &h).into_iter().map(sigmoid).collect();
            let r: Vec<f64> = affine(&g.w_r, &g.u_r, &g.b_r, x, &h).into_iter().map(sigmoid).collect();
            let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
            let cand: Vec<f64> = affine(&g.w_h, &g.u_h, &g.b_h, x, &rh)
                .into_iter()
                .map(f64::tanh)
                .collect();
            h = (0..hdim).map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i]).collect();
            out.push(h.clone());
        }
        out
    }

    fn random_encoder(cfg: &ModelConfig, seed: u64) -> EncoderWeights<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = CampParams::<f64>::init(cfg, &mut rng).encoder;
        // non-zero biases so they are exercised
        for g in [&mut p.gru_fwd, &mut p.gru_bwd] {
            g.b_z = T::uniform(&[cfg.d], 0.5, &mut rng);
            g.b_r = T::uniform(&[cfg.d], 0.5, &mut rng);
            g.b_h = T::uniform(&[cfg.d], 0.5, &mut rng);
        }
        p
    }

    #[test]
    fn three_token_sequence_matches_recurrence_oracle() {
        let cfg = ModelConfig {
            max_words: 3,
            ..small_cfg()
        };
        let p = random_encoder(&cfg, 4);
        let ids = [3, 1, 6];
        let xs: Vec<Vec<f64>> = ids.iter().map(|&id| p.embedding.col(id).into_data()).collect();
        let fwd = oracle_gru(&p.gru_fwd, &xs);
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let mut bwd = oracle_gru(&p.gru_bwd, &rev);
        bwd.reverse();

        let mut tape = Tape::new();
        let w = p.bind(&mut tape);
        let tokens = clip_and_pad(&ids, 3).unwrap();
        let t = encode_words(&mut tape, &tokens, &w).unwrap();
        for i in 0..3 {
            for k in 0..cfg.d {
                let want = (fwd[i][k] + bwd[i][k]) / 2.0;
                assert!((tape.value(t).get(k, i) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_is_mean_of_two_one_step_cells() {
        let cfg = ModelConfig {
            max_words: 1,
            ..small_cfg()
        };
        let p = random_encoder(&cfg, 5);
        let x = vec![p.embedding.col(2).into_data()];
        let f = oracle_gru(&p.gru_fwd, &x);
        let b = oracle_gru(&p.gru_bwd, &x);
        let mut tape = Tape::new();
        let w = p.bind(&mut tape);
        let t = encode_words(&mut tape, &clip_and_pad(&[2], 1).unwrap(), &w).unwrap();
        for k in 0..cfg.d {
            assert!((tape.value(t).get(k, 0) - (f[0][k] + b[0][k]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_encoder_passes_grad_check() {
        let cfg = ModelConfig {
            max_words: 4,
            ..small_cfg()
        };
        for seed in 0..3 {
            let p = random_encoder(&cfg, 10 + seed);
            let raw = T::uniform(&[6, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(20 + seed));
            let tokens = clip_and_pad(&[5, 2, 5], 4).unwrap();
            let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
            let mut inputs: Vec<T> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
            inputs.push(raw);
            let report = grad_check(
                |tape, vars| {
                    let w = p.with_values(&vars[..vars.len() - 1]);
                    let v = project_regions(tape, vars[vars.len() - 1], &w)?;
                    let t = encode_words(tape, &tokens, &w)?;
                    let sv = tape.sum(v)?;
                    let st = tape.sum(t)?;
                    tape.add(sv, st)
                },
                &inputs,
                1e-5,
            );
            assert!(
                report.passed(1e-4),
                "{report:?} worst={:?}",
                report.worst.map(|(k, _)| names.get(k))
            );
        }
    }
}
