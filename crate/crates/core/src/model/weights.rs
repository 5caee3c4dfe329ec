//! Learnable parameters, generic over what each slot holds: a [`Tensor`]
//! for storage, a [`Var`] once bound to a tape, a gradient, and so on.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::model::config::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

macro_rules! weight_group {
    ($(#[$meta:meta])* $name:ident { $($(#[$fmeta:meta])* $field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $($(#[$fmeta])* pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)*
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &mut self.$field);)*
            }

            pub fn try_map<U, E>(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
            ) -> Result<$name<U>, E> {
                Ok($name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field)?,)*
                })
            }

            /// `(name, slot)` pairs in canonical order.
            pub fn named(&self) -> Vec<(String, &T)> {
                let mut out = Vec::new();
                self.visit("", &mut |n, t| out.push((n, t)));
                out
            }

            /// Same layout filled from `values`, taken in canonical order.
            pub fn with_values<U: Clone>(&self, values: &[U]) -> $name<U> {
                let mut it = values.iter();
                let r: Result<_, std::convert::Infallible> =
                    self.try_map("", &mut |_, _| Ok(it.next().expect("enough values").clone()));
                match r {
                    Ok(w) => w,
                }
            }
        }
    };
}

weight_group! {
    /// One direction of a GRU: update (`z`), reset (`r`) and candidate (`h`)
    /// input weights, recurrent weights and biases.
    GruWeights { w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h }
}

weight_group! {
    /// Message-passing core and scorer.
    CoreWeights {
        /// Region projection into the affinity space, `d_h x d`.
        proj_v,
        /// Word projection into the affinity space, `d_h x d`.
        proj_t,
        /// Visual fusion transform, `d x fusion_width`.
        fuse_v_w,
        fuse_v_b,
        /// Textual fusion transform, `d x fusion_width`.
        fuse_t_w,
        fuse_t_b,
        /// Region pooling logits, `1 x d`.
        agg_v,
        /// Word pooling logits, `1 x d`.
        agg_t,
        mlp_w1,
        mlp_b1,
        mlp_w2,
        mlp_b2,
    }
}

/// Region projection, word embedding and the two GRU directions.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T> {
    /// `d x raw_dim`.
    pub w_i: T,
    pub b_i: T,
    /// `embed_dim x vocab_size`; column `k` embeds token `k`.
    pub embedding: T,
    pub gru_fwd: GruWeights<T>,
    pub gru_bwd: GruWeights<T>,
}

impl<T> EncoderWeights<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}w_i"), &self.w_i);
        f(format!("{prefix}b_i"), &self.b_i);
        f(format!("{prefix}embedding"), &self.embedding);
        self.gru_fwd.visit(&format!("{prefix}gru_fwd."), f);
        self.gru_bwd.visit(&format!("{prefix}gru_bwd."), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{prefix}w_i"), &mut self.w_i);
        f(format!("{prefix}b_i"), &mut self.b_i);
        f(format!("{prefix}embedding"), &mut self.embedding);
        self.gru_fwd.visit_mut(&format!("{prefix}gru_fwd."), f);
        self.gru_bwd.visit_mut(&format!("{prefix}gru_bwd."), f);
    }

    pub fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<EncoderWeights<U>, E> {
        Ok(EncoderWeights {
            w_i: f(&format!("{prefix}w_i"), &self.w_i)?,
            b_i: f(&format!("{prefix}b_i"), &self.b_i)?,
            embedding: f(&format!("{prefix}embedding"), &self.embedding)?,
            gru_fwd: self.gru_fwd.try_map(&format!("{prefix}gru_fwd."), f)?,
            gru_bwd: self.gru_bwd.try_map(&format!("{prefix}gru_bwd."), f)?,
        })
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    pub fn with_values<U: Clone>(&self, values: &[U]) -> EncoderWeights<U> {
        let mut it = values.iter();
        let r: Result<_, std::convert::Infallible> =
            self.try_map("", &mut |_, _| Ok(it.next().expect("enough values").clone()));
        match r {
            Ok(w) => w,
        }
    }
}

/// Every learnable parameter of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct CampWeights<T> {
    pub encoder: EncoderWeights<T>,
    pub core: CoreWeights<T>,
}

impl<T> CampWeights<T> {
    /// Visits parameters in their canonical (checkpoint) order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        self.encoder.visit("encoder.", f);
        self.core.visit("core.", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        self.encoder.visit_mut("encoder.", f);
        self.core.visit_mut("core.", f);
    }

    pub fn try_map<U, E>(&self, f: &mut dyn FnMut(&str, &T) -> Result<U, E>) -> Result<CampWeights<U>, E> {
        Ok(CampWeights {
            encoder: self.encoder.try_map("encoder.", f)?,
            core: self.core.try_map("core.", f)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> CampWeights<U> {
        let r: Result<_, std::convert::Infallible> = self.try_map(&mut |n, t| Ok(f(n, t)));
        match r {
            Ok(w) => w,
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn with_values<U: Clone>(&self, values: &[U]) -> CampWeights<U> {
        let mut it = values.iter();
        let r: Result<_, std::convert::Infallible> =
            self.try_map(&mut |_, _| Ok(it.next().expect("enough values").clone()));
        match r {
            Ok(w) => w,
        }
    }
}

pub type EncoderParams<S> = EncoderWeights<Tensor<S>>;
pub type CoreParams<S> = CoreWeights<Tensor<S>>;
/// All learnable tensors of the model.
pub type CampParams<S> = CampWeights<Tensor<S>>;

fn matrix<S: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<S> {
    Tensor::uniform(&[rows, cols], 1.0 / (cols as f64).sqrt(), rng)
}

/// Rows come in `(u, -u)` pairs, so each pair of hidden units starts out
/// computing `|u . x|`.
fn mirrored<S: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<S> {
    let half: Tensor<S> = matrix(rows.div_ceil(2), cols, rng);
    Tensor::from_fn(rows, cols, |i, j| {
        let v = half.get(i / 2, j);
        if i % 2 == 0 {
            v
        } else {
            -v
        }
    })
}

fn bias<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::zeros(&[n])
}

impl<S: Scalar> GruWeights<Tensor<S>> {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_z: matrix(hidden, input, rng),
            u_z: matrix(hidden, hidden, rng),
            b_z: bias(hidden),
            w_r: matrix(hidden, input, rng),
            u_r: matrix(hidden, hidden, rng),
            b_r: bias(hidden),
            w_h: matrix(hidden, input, rng),
            u_h: matrix(hidden, hidden, rng),
            b_h: bias(hidden),
        }
    }
}

impl<S: Scalar> CampParams<S> {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights and zero biases,
    /// except: word embeddings have unit variance, the scorer's hidden rows
    /// come in mirrored pairs and its output layer starts at zero, so every
    /// initial score is exactly 0.5.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d;
        let encoder = EncoderWeights {
            w_i: matrix(d, cfg.raw_dim, rng),
            b_i: bias(d),
            embedding: Tensor::uniform(&[cfg.embed_dim, cfg.vocab_size], 3f64.sqrt(), rng),
            gru_fwd: GruWeights::init(cfg.embed_dim, d, rng),
            gru_bwd: GruWeights::init(cfg.embed_dim, d, rng),
        };
        let fw = cfg.fusion_width();
        let core = CoreWeights {
            proj_v: matrix(cfg.d_h, d, rng),
            proj_t: matrix(cfg.d_h, d, rng),
            fuse_v_w: matrix(d, fw, rng),
            fuse_v_b: bias(d),
            fuse_t_w: matrix(d, fw, rng),
            fuse_t_b: bias(d),
            agg_v: matrix(1, d, rng),
            agg_t: matrix(1, d, rng),
            mlp_w1: mirrored(d, d, rng),
            mlp_b1: bias(d),
            mlp_w2: Tensor::zeros(&[1, d]),
            mlp_b2: bias(1),
        };
        Self { encoder, core }
    }

    /// Same shapes as [`CampParams::init`], every entry zero.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut p = Self::init(
            cfg,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        );
        p.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = S::zero()));
        p
    }

    pub fn numel(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> CampWeights<Var> {
        self.map(|_, t| tape.param(t.clone()))
    }
}

impl<S: Scalar> CoreParams<S> {
    pub fn bind(&self, tape: &mut Tape<S>) -> CoreWeights<Var> {
        let r: Result<_, std::convert::Infallible> = self.try_map("core.", &mut |_, t| Ok(tape.param(t.clone())));
        match r {
            Ok(w) => w,
        }
    }
}

impl<S: Scalar> EncoderParams<S> {
    pub fn bind(&self, tape: &mut Tape<S>) -> EncoderWeights<Var> {
        let r: Result<_, std::convert::Infallible> = self.try_map("encoder.", &mut |_, t| Ok(tape.param(t.clone())));
        match r {
            Ok(w) => w,
        }
    }
}

impl<S: Scalar> CoreParams<S> {
    /// Zero-filled core parameters shaped for `cfg`.
    pub fn zeros_like(cfg: &ModelConfig) -> Self {
        CampParams::zeros(cfg).core
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn init_shapes_follow_config() {
        let cfg = ModelConfig {
            raw_dim: 20,
            ..ModelConfig::desk()
        };
        let p = CampParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.encoder.w_i.shape(), &[32, 20]);
        assert_eq!(p.encoder.embedding.shape(), &[16, 64]);
        assert_eq!(p.encoder.gru_fwd.u_h.shape(), &[32, 32]);
        assert_eq!(p.core.proj_v.shape(), &[16, 32]);
        assert_eq!(p.core.mlp_w2.shape(), &[1, 32]);
        assert_eq!(p.core.mlp_b2.shape(), &[1]);
        let bound = 1.0 / 20f64.sqrt();
        assert!(p.encoder.w_i.data().iter().all(|v| v.abs() <= bound));
        assert!(p.encoder.b_i.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let p = CampParams::<f64>::zeros(&ModelConfig {
            raw_dim: 4,
            ..ModelConfig::desk()
        });
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.first().unwrap(), "encoder.w_i");
        assert!(names.contains(&"encoder.gru_bwd.u_r".to_string()));
        assert_eq!(names.last().unwrap(), "core.mlp_b2");
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names.len(), 3 + 2 * 9 + 12);
    }

    #[test]
    fn concat_fusion_widens_transform() {
        let cfg = ModelConfig {
            raw_dim: 4,
            fusion_op: crate::model::FusionOp::Concat,
            ..ModelConfig::desk()
        };
        let p = CampParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(p.core.fuse_v_w.shape(), &[32, 64]);
    }
}
