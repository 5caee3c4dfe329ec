//! Binary checkpoints.
//!
//! Layout: magic `CAMPCKPT`, `u16` version, `u32` header length, a JSON header
//! (dtype, model configuration, tensor names and shapes, optimizer step, best
//! validation rsum, training state), then every parameter tensor in header
//! order as little-endian scalars, then the optimizer's first and second
//! moments in the same order when present.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CampError, Result};
use crate::model::{CampParams, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CAMPCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;
const PREFIX_LEN: usize = 8 + 2 + 4;

/// Resumable state of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed as lowercase hex.
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (it does not fit in a JSON number).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || CampError::Config("malformed generator state in checkpoint".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (k, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * k..2 * k + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Training-loop bookkeeping needed to resume a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed so far.
    pub epoch: usize,
    pub best_epoch: Option<usize>,
    pub stale_epochs: usize,
    pub rng: RngState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub config: ModelConfig,
    pub params: CampParams<S>,
    pub optimizer: Option<AdamState<S>>,
    pub best_val_rsum: Option<f64>,
    pub train_state: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    optimizer_step: Option<u64>,
    best_val_rsum: Option<f64>,
    train_state: Option<TrainState>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(config: ModelConfig, params: CampParams<S>) -> Self {
        Self {
            config,
            params,
            optimizer: None,
            best_val_rsum: None,
            train_state: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.params.named();
        let header = Header {
            dtype: S::DTYPE.to_string(),
            config: self.config.clone(),
            tensors: named
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            best_val_rsum: self.best_val_rsum,
            train_state: self.train_state.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |t: &Tensor<S>| t.data().iter().for_each(|v| v.write_le(&mut out));
        named.iter().for_each(|(_, t)| put(t));
        if let Some(opt) = &self.optimizer {
            opt.m.iter().for_each(&mut put);
            opt.v.iter().for_each(&mut put);
        }
        out
    }

    /// Parses a checkpoint; with `expected`, tensor shapes must match that
    /// configuration.
    pub fn from_bytes(bytes: &[u8], path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let format = |msg: String| CampError::Format {
            path: path.to_path_buf(),
            msg,
        };
        let truncated = |needed: usize| CampError::Truncated {
            path: path.to_path_buf(),
            needed: needed as u64,
            available: bytes.len() as u64,
        };
        if bytes.len() >= 8 && &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(format(format!("expected magic {:?}", "CAMPCKPT")));
        }
        if bytes.len() < PREFIX_LEN {
            return Err(truncated(PREFIX_LEN));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != CHECKPOINT_VERSION {
            return Err(CampError::Version {
                path: path.to_path_buf(),
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let hlen = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
        let body = PREFIX_LEN.checked_add(hlen).ok_or_else(|| truncated(usize::MAX))?;
        if bytes.len() < body {
            return Err(truncated(body));
        }
        let header: Header =
            serde_json::from_slice(&bytes[PREFIX_LEN..body]).map_err(|e| format(format!("bad header: {e}")))?;
        header.config.validate()?;

        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(format(format!("unknown dtype {other:?}"))),
        };

        // A lower bound on the stored parameter count, checked against the
        // file size before the reference tensors are allocated.
        let c = &header.config;
        let floor = [
            (c.d, c.raw_dim),
            (c.embed_dim, c.vocab_size),
            (c.d, c.d),
            (c.d, c.embed_dim),
        ]
        .iter()
        .try_fold(0usize, |acc, &(a, b)| a.checked_mul(b).and_then(|x| acc.checked_add(x)))
        .and_then(|n| n.checked_mul(width))
        .and_then(|n| n.checked_add(body));
        match floor {
            Some(n) if n <= bytes.len() => {}
            other => return Err(truncated(other.unwrap_or(usize::MAX))),
        }

        // Shapes must agree with the stored configuration and with the
        // caller's configuration when one is given.
        let reference = CampParams::<S>::zeros(expected.unwrap_or(&header.config));
        let ref_named = reference.named();
        if ref_named.len() != header.tensors.len() {
            return Err(format(format!(
                "checkpoint holds {} tensors, model expects {}",
                header.tensors.len(),
                ref_named.len()
            )));
        }
        for ((name, t), entry) in ref_named.iter().zip(&header.tensors) {
            if *name != entry.name {
                return Err(format(format!(
                    "tensor {:?} found where {name:?} was expected",
                    entry.name
                )));
            }
            if t.shape() != entry.shape.as_slice() {
                return Err(CampError::CheckpointShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: entry.shape.clone(),
                });
            }
        }

        let numel: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        let copies = if header.optimizer_step.is_some() { 3 } else { 1 };
        let needed = body + numel * copies * width;
        if bytes.len() < needed {
            return Err(truncated(needed));
        }
        if bytes.len() > needed {
            return Err(format(format!("{} trailing bytes", bytes.len() - needed)));
        }

        let mut pos = body;
        let mut index = 0usize;
        let mut read_set = || -> Result<Vec<Tensor<S>>> {
            let mut out = Vec::with_capacity(header.tensors.len());
            for e in &header.tensors {
                let n: usize = e.shape.iter().product();
                let mut data = Vec::with_capacity(n);
                for _ in 0..n {
                    let chunk = &bytes[pos..pos + width];
                    let v = if width == 4 {
                        S::lit(f32::read_le(chunk).as_f64())
                    } else {
                        S::lit(f64::read_le(chunk))
                    };
                    if !v.is_finite() {
                        return Err(CampError::NonFinite {
                            path: path.to_path_buf(),
                            index,
                        });
                    }
                    data.push(v);
                    pos += width;
                    index += 1;
                }
                out.push(Tensor::new(e.shape.clone(), data)?);
            }
            Ok(out)
        };
        let params = reference.with_values(&read_set()?);
        let optimizer = match header.optimizer_step {
            Some(step) => Some(AdamState {
                step,
                m: read_set()?,
                v: read_set()?,
            }),
            None => None,
        };
        Ok(Self {
            config: expected.cloned().unwrap_or(header.config),
            params,
            optimizer,
            best_val_rsum: header.best_val_rsum,
            train_state: header.train_state,
        })
    }
}

pub fn save_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| CampError::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint<S>> {
    let bytes = std::fs::read(path).map_err(|e| CampError::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path, expected)
}

#[cfg(test)]
mod tests {
    use rand::RngCore;

    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            raw_dim: 5,
            embed_dim: 3,
            vocab_size: 7,
            d: 4,
            d_h: 2,
            ..ModelConfig::desk()
        }
    }

    fn sample() -> Checkpoint<f64> {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = CampParams::init(&c, &mut rng);
        let m: Vec<_> = params.named().iter().map(|(_, t)| t.map(|x| x * 0.5)).collect();
        let v: Vec<_> = params.named().iter().map(|(_, t)| t.map(|x| x * x)).collect();
        rng.next_u64();
        Checkpoint {
            config: c,
            params,
            optimizer: Some(AdamState { step: 7, m, v }),
            best_val_rsum: Some(1.0 / 3.0),
            train_state: Some(TrainState {
                epoch: 3,
                best_epoch: Some(2),
                stale_epochs: 1,
                rng: RngState::capture(&rng),
            }),
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f64>::from_bytes(&bytes, Path::new("x"), None).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..13 {
            rng.next_u32();
        }
        let mut restored = RngState::capture(&rng).restore().unwrap();
        for _ in 0..50 {
            assert_eq!(rng.next_u64(), restored.next_u64());
        }
    }

    #[test]
    fn mismatched_width_names_the_tensor() {
        let bytes = sample().to_bytes();
        let other = ModelConfig { d: 6, d_h: 3, ..cfg() };
        match Checkpoint::<f64>::from_bytes(&bytes, Path::new("x"), Some(&other)) {
            Err(CampError::CheckpointShape { name, expected, found }) => {
                assert_eq!(name, "encoder.w_i");
                assert_eq!((expected, found), (vec![6, 5], vec![4, 5]));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupt_checkpoints_fail_cleanly() {
        let good = sample().to_bytes();
        let p = Path::new("x");
        let mut bad = good.clone();
        bad[3] = b'?';
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bad, p, None),
            Err(CampError::Format { .. })
        ));
        let mut bad = good.clone();
        bad[8] = 2;
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bad, p, None),
            Err(CampError::Version { .. })
        ));
        for cut in [0, 4, 12, 40, good.len() - 1] {
            assert!(Checkpoint::<f64>::from_bytes(&good[..cut], p, None).is_err());
        }
        let mut bad = good.clone();
        bad[10..14].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bad, p, None),
            Err(CampError::Truncated { .. })
        ));
        let mut bad = good.clone();
        let n = bad.len();
        bad[n - 8..].copy_from_slice(&f64::INFINITY.to_le_bytes());
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bad, p, None),
            Err(CampError::NonFinite { .. })
        ));
    }

    #[test]
    fn oversized_header_dims_are_rejected_before_allocation() {
        let good = sample().to_bytes();
        let len = u32::from_le_bytes(good[10..14].try_into().unwrap()) as usize;
        let mut header: Header = serde_json::from_slice(&good[14..14 + len]).unwrap();
        header.config.d = 1 << 30;
        header.config.raw_dim = 1 << 30;
        let json = serde_json::to_vec(&header).unwrap();
        let mut bad = good[..10].to_vec();
        bad.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bad.extend_from_slice(&json);
        bad.extend_from_slice(&good[14 + len..]);
        let e = Checkpoint::<f64>::from_bytes(&bad, Path::new("x"), None).unwrap_err();
        assert_eq!(e.category(), "format", "{e}");
    }

    #[test]
    fn f32_checkpoint_loads_as_f32() {
        let ck = sample();
        let p32 = ck.params.map(|_, t| t.cast::<f32>());
        let c32 = Checkpoint::new(ck.config.clone(), p32);
        let back = Checkpoint::<f32>::from_bytes(&c32.to_bytes(), Path::new("x"), None).unwrap();
        assert_eq!(back, c32);
    }
}
