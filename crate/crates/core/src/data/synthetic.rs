//! Synthetic benchmark with planted region-word alignments.
//!
//! Every pair draws a set of latent concepts. Regions are noisy copies of the
//! concepts' prototype vectors, scaled to roughly unit norm; captions list the concepts' tokens in random
//! order mixed with filler tokens. Concept `c` is spelled by token `1 + c`;
//! filler tokens occupy the ids above the concept range.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Caption, Dataset};
use crate::encoders::RawRegionFeatures;
use crate::encoders::{MAX_REGIONS, MAX_WORDS, PAD_TOKEN};
use crate::error::{CampError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_concepts: usize,
    pub concepts_per_pair: usize,
    pub regions_per_image: usize,
    pub words_per_caption: usize,
    pub raw_region_dim: usize,
    pub vocab_size: usize,
    pub noise_sigma: f64,
    /// Probability that a region beyond the concept set shows an unrelated
    /// concept instead of another view of a member concept.
    pub distractor_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// The reference benchmark: 200/50/50 pairs, 20 concepts (4 per pair),
    /// 4 regions, 6 words, noise 0.1.
    fn default() -> Self {
        Self {
            n_train: 200,
            n_val: 50,
            n_test: 50,
            n_concepts: 20,
            concepts_per_pair: 4,
            regions_per_image: 4,
            words_per_caption: 6,
            raw_region_dim: 2048,
            vocab_size: 64,
            noise_sigma: 0.1,
            distractor_rate: 0.2,
            seed: 0,
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl SyntheticSpec {
    pub fn n_pairs(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CampError::Config(m));
        if self.n_concepts == 0 || self.concepts_per_pair == 0 {
            return fail("need at least one concept per pair".into());
        }
        if self.concepts_per_pair > self.n_concepts {
            return fail(format!(
                "{} concepts per pair exceed the {} available",
                self.concepts_per_pair, self.n_concepts
            ));
        }
        if self.n_concepts + 1 > self.vocab_size {
            return fail(format!(
                "{} concepts need a vocabulary of at least {}, got {}",
                self.n_concepts,
                self.n_concepts + 1,
                self.vocab_size
            ));
        }
        if self.words_per_caption > self.concepts_per_pair && self.vocab_size <= self.n_concepts + 1 {
            return fail("filler words need vocabulary ids above the concept range".into());
        }
        if self.regions_per_image < self.concepts_per_pair || self.regions_per_image > MAX_REGIONS {
            return fail(format!(
                "regions_per_image must lie in [{}, {MAX_REGIONS}]",
                self.concepts_per_pair
            ));
        }
        if self.words_per_caption < self.concepts_per_pair || self.words_per_caption > MAX_WORDS {
            return fail(format!(
                "words_per_caption must lie in [{}, {MAX_WORDS}]",
                self.concepts_per_pair
            ));
        }
        if self.raw_region_dim == 0 {
            return fail("raw_region_dim must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return fail(format!(
                "distractor_rate must lie in [0, 1], got {}",
                self.distractor_rate
            ));
        }
        if self.distractor_rate > 0.0 && self.n_concepts <= self.concepts_per_pair {
            return fail("distractors need concepts outside each pair's set".into());
        }
        if self.n_pairs() == 0 {
            return fail("no pairs requested".into());
        }
        if self.n_pairs() as f64 > binomial(self.n_concepts, self.concepts_per_pair) {
            return fail(format!(
                "{} pairs cannot all have distinct concept sets of size {} from {} concepts",
                self.n_pairs(),
                self.concepts_per_pair,
                self.n_concepts
            ));
        }
        Ok(())
    }

    pub fn concept_token(c: usize) -> usize {
        c + 1
    }
}

/// Ground truth planted by the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticMeta {
    /// One prototype per column, `raw_region_dim x n_concepts`.
    pub prototypes: Tensor<f64>,
    /// Concept set of every pair, in train, val, test order.
    pub concept_sets: Vec<Vec<usize>>,
    /// Concept shown by each region of every image, same order.
    pub region_concepts: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData<S> {
    pub train: Dataset<S>,
    pub val: Dataset<S>,
    pub test: Dataset<S>,
    pub meta: SyntheticMeta,
}

/// Deterministic in `spec.seed`.
pub fn generate_synthetic<S: Scalar>(spec: &SyntheticSpec) -> Result<SyntheticData<S>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let dim = spec.raw_region_dim;

    // coordinates are scaled so region vectors have roughly unit norm
    let scale = 1.0 / (dim as f64).sqrt();
    let prototypes = Tensor::<f64>::from_fn(dim, spec.n_concepts, |_, _| scale * unit.sample(&mut rng));
    let all: Vec<usize> = (0..spec.n_concepts).collect();
    let filler: Vec<usize> = (spec.n_concepts + 1..spec.vocab_size).collect();

    let mut seen = HashSet::new();
    let mut concept_sets = Vec::with_capacity(spec.n_pairs());
    let mut region_concepts = Vec::with_capacity(spec.n_pairs());
    let mut images = Vec::with_capacity(spec.n_pairs());
    let mut captions = Vec::with_capacity(spec.n_pairs());

    for pair in 0..spec.n_pairs() {
        let set = loop {
            let mut s: Vec<usize> = all.choose_multiple(&mut rng, spec.concepts_per_pair).copied().collect();
            s.sort_unstable();
            if seen.insert(s.clone()) {
                break s;
            }
        };

        let mut shown = set.clone();
        while shown.len() < spec.regions_per_image {
            let c = if rng.random::<f64>() < spec.distractor_rate {
                loop {
                    let c = rng.random_range(0..spec.n_concepts);
                    if !set.contains(&c) {
                        break c;
                    }
                }
            } else {
                *set.choose(&mut rng).expect("non-empty set")
            };
            shown.push(c);
        }
        shown.shuffle(&mut rng);

        let mut m = Tensor::<S>::zeros(&[dim, spec.regions_per_image]);
        for (r, &c) in shown.iter().enumerate() {
            for k in 0..dim {
                let noise = if spec.noise_sigma > 0.0 {
                    scale * spec.noise_sigma * unit.sample(&mut rng)
                } else {
                    0.0
                };
                m.set(k, r, S::lit(prototypes.get(k, c) + noise));
            }
        }

        let mut words: Vec<usize> = set.iter().map(|&c| SyntheticSpec::concept_token(c)).collect();
        while words.len() < spec.words_per_caption {
            words.push(*filler.choose(&mut rng).expect("filler vocabulary"));
        }
        words.shuffle(&mut rng);
        debug_assert!(words.iter().all(|&w| w != PAD_TOKEN));

        images.push(RawRegionFeatures::new(m)?);
        captions.push(Caption {
            image: pair,
            tokens: words,
        });
        concept_sets.push(set);
        region_concepts.push(shown);
    }

    let split = |range: std::ops::Range<usize>| -> Result<Dataset<S>> {
        let caps = captions[range.clone()]
            .iter()
            .map(|c| Caption {
                image: c.image - range.start,
                tokens: c.tokens.clone(),
            })
            .collect();
        Dataset::new(images[range].to_vec(), caps, spec.vocab_size)
    };
    let (a, b) = (spec.n_train, spec.n_train + spec.n_val);
    Ok(SyntheticData {
        train: split(0..a)?,
        val: split(a..b)?,
        test: split(b..spec.n_pairs())?,
        meta: SyntheticMeta {
            prototypes,
            concept_sets,
            region_concepts,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_train: 30,
            n_val: 10,
            n_test: 10,
            raw_region_dim: 32,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn noiseless_regions_equal_prototypes() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            distractor_rate: 0.0,
            concepts_per_pair: 1,
            regions_per_image: 2,
            words_per_caption: 3,
            n_train: 10,
            n_val: 5,
            n_test: 5,
            ..small(3)
        };
        let data = generate_synthetic::<f64>(&spec).unwrap();
        for (idx, im) in data.train.images.iter().enumerate() {
            for r in 0..im.regions() {
                let c = data.meta.region_concepts[idx][r];
                assert_eq!(c, data.meta.concept_sets[idx][0]);
                assert_eq!(im.features().col(r), data.meta.prototypes.col(c));
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_synthetic::<f32>(&small(5)).unwrap();
        let b = generate_synthetic::<f32>(&small(5)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic::<f32>(&small(6)).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn nearest_prototype_recovers_concepts() {
        let spec = SyntheticSpec {
            n_train: 100,
            n_val: 0,
            n_test: 0,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic::<f64>(&spec).unwrap();
        let p = &data.meta.prototypes;
        let (mut right, mut total) = (0, 0);
        for (idx, im) in data.train.images.iter().enumerate() {
            let f = im.features();
            for r in 0..im.regions() {
                let best = (0..spec.n_concepts)
                    .map(|c| {
                        let d: f64 = (0..f.rows()).map(|k| (f.get(k, r) - p.get(k, c)).powi(2)).sum();
                        (c, d)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap()
                    .0;
                right += usize::from(best == data.meta.region_concepts[idx][r]);
                total += 1;
            }
        }
        assert!(right as f64 / total as f64 > 0.99);
    }

    #[test]
    fn concept_sets_are_unique_and_spelled_by_captions() {
        let data = generate_synthetic::<f32>(&small(7)).unwrap();
        let sets: HashSet<_> = data.meta.concept_sets.iter().collect();
        assert_eq!(sets.len(), data.meta.concept_sets.len());
        for (k, cap) in data.train.captions.iter().enumerate() {
            let mut concepts: Vec<usize> = cap.tokens.iter().filter(|&&t| t <= 20).map(|&t| t - 1).collect();
            concepts.sort_unstable();
            assert_eq!(concepts, data.meta.concept_sets[k]);
            assert_eq!(cap.tokens.len(), 6);
            assert_eq!(cap.image, k);
        }
        assert_eq!(
            (data.train.images.len(), data.val.images.len(), data.test.images.len()),
            (30, 10, 10)
        );
    }

    #[test]
    fn inconsistent_specs_are_rejected() {
        for bad in [
            SyntheticSpec {
                n_concepts: 70,
                ..small(0)
            },
            SyntheticSpec {
                concepts_per_pair: 5,
                regions_per_image: 4,
                ..small(0)
            },
            SyntheticSpec {
                noise_sigma: -1.0,
                ..small(0)
            },
            SyntheticSpec {
                n_concepts: 4,
                n_train: 100,
                ..small(0)
            },
            SyntheticSpec {
                regions_per_image: 40,
                ..small(0)
            },
        ] {
            assert!(
                matches!(generate_synthetic::<f32>(&bad), Err(CampError::Config(_))),
                "{bad:?}"
            );
        }
    }
}
