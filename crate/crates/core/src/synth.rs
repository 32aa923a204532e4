//! Synthetic corpus generator with learnable image-text-keyphrase signal.
//!
//! Every sample draws a latent topic. The topic fixes a Gaussian cluster
//! in feature space for the "signal" grid regions, the gold keyphrases,
//! and the word pools for source/OCR/entity text. Topics come in pairs
//! that share much of their source vocabulary, so the image (and entity
//! anchors, when present) carries real disambiguation signal; a
//! configurable fraction of grid rows is drawn from a topic-independent
//! distribution instead and acts as noise.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
// Needed for f64 math in no_std builds; shadowed by std in test builds.
#[allow(unused_imports)]
use num_traits::Float;
use rand_distr::{Distribution, Normal};

use crate::data::{ImageFeatures, MatchingRecord, MultiModalSample, GRID_REGIONS, REGION_DIM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Training-set size; validation and test get `max(4, n/8)` each.
    pub n_samples: usize,
    pub vocab_size: usize,
    pub n_topics: usize,
    /// Fraction of the 49 grid rows drawn from the noise distribution.
    pub noise_region_fraction: f64,
    pub avg_keyphrases: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_samples: 256,
            vocab_size: 200,
            n_topics: 4,
            noise_region_fraction: 0.3,
            avg_keyphrases: 1.33,
            seed: 7,
        }
    }
}

pub struct SyntheticCorpus {
    pub train: Vec<MultiModalSample>,
    pub valid: Vec<MultiModalSample>,
    pub test: Vec<MultiModalSample>,
    pub matching: Vec<MatchingRecord>,
}

const SIGNAL_STD: f64 = 0.35;
const KEYPHRASES_PER_TOPIC: usize = 3;

struct Topic {
    mean: Vec<f64>,
    keyphrases: Vec<Vec<String>>,
    /// First two double as entity head words.
    words: Vec<String>,
    pair_words: Vec<String>,
}

fn word_pools(spec: &SynthSpec) -> Result<(Vec<Vec<String>>, Vec<Vec<String>>, Vec<String>)> {
    let t = spec.n_topics;
    let n_pairs = t.div_ceil(2);
    // 4 keyphrase words per topic, the rest split between topic, pair,
    // and global pools.
    let reserved = t * 4;
    if spec.vocab_size < reserved + t * 4 + n_pairs * 2 + 4 {
        return Err(Error::Config(format!(
            "vocab_size {} too small for {t} topics",
            spec.vocab_size
        )));
    }
    let budget = spec.vocab_size - reserved;
    let global = (budget / 10).max(4);
    let per_topic = (budget - global) * 2 / (3 * t);
    let per_pair = (budget - global - per_topic * t) / n_pairs;

    let topic_words: Vec<Vec<String>> = (0..t)
        .map(|ti| (0..per_topic).map(|j| format!("t{ti}w{j}")).collect())
        .collect();
    let pair_words: Vec<Vec<String>> = (0..n_pairs)
        .map(|pi| (0..per_pair).map(|j| format!("p{pi}w{j}")).collect())
        .collect();
    let global_words: Vec<String> = (0..global).map(|j| format!("g{j}")).collect();
    Ok((topic_words, pair_words, global_words))
}

fn build_topics(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<Topic>, Vec<String>)> {
    let (topic_words, pair_words, global_words) = word_pools(spec)?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut topics = Vec::with_capacity(spec.n_topics);
    for ti in 0..spec.n_topics {
        let mean: Vec<f64> = (0..REGION_DIM).map(|_| normal.sample(rng)).collect();
        let kw: Vec<String> = (0..4).map(|j| format!("kp{ti}x{j}")).collect();
        let keyphrases = alloc::vec![
            alloc::vec![kw[0].clone()],
            alloc::vec![kw[1].clone()],
            alloc::vec![kw[2].clone(), kw[3].clone()],
        ];
        topics.push(Topic {
            mean,
            keyphrases,
            words: topic_words[ti].clone(),
            pair_words: pair_words[ti / 2].clone(),
        });
    }
    Ok((topics, global_words))
}

fn sample_grid(
    topic: &Topic,
    noise_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> ImageFeatures {
    let signal = Normal::new(0.0, SIGNAL_STD).expect("signal std");
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let n_noise = ((GRID_REGIONS as f64) * noise_fraction).round() as usize;
    let mut regions: Vec<usize> = (0..GRID_REGIONS).collect();
    regions.shuffle(rng);
    let noisy: &[usize] = &regions[..n_noise];

    let mut data = Vec::with_capacity(GRID_REGIONS * REGION_DIM);
    for r in 0..GRID_REGIONS {
        if noisy.contains(&r) {
            for _ in 0..REGION_DIM {
                data.push(noise.sample(rng) as f32);
            }
        } else {
            for j in 0..REGION_DIM {
                data.push((topic.mean[j] + signal.sample(rng)) as f32);
            }
        }
    }
    ImageFeatures::new(data).expect("grid shape")
}

fn sample_post(
    topic_id: usize,
    topics: &[Topic],
    global_words: &[String],
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> MultiModalSample {
    let topic = &topics[topic_id];

    // keyphrases
    let jitter: f64 = rng.gen_range(-0.5..0.5);
    let k = ((spec.avg_keyphrases + jitter).round() as usize).clamp(1, KEYPHRASES_PER_TOPIC);
    let mut phrase_order: Vec<usize> = (0..topic.keyphrases.len()).collect();
    phrase_order.shuffle(rng);
    let keyphrases: Vec<Vec<String>> = phrase_order[..k]
        .iter()
        .map(|&i| topic.keyphrases[i].clone())
        .collect();

    // source text: ambiguous pair words dominate; topic words and global
    // filler mix in; gold words show up often enough to copy from.
    let len = rng.gen_range(8..14);
    let mut source = Vec::with_capacity(len + 2);
    for _ in 0..len {
        let roll: f64 = rng.gen();
        let w = if roll < 0.35 {
            topic.words[rng.gen_range(0..topic.words.len())].clone()
        } else if roll < 0.75 {
            topic.pair_words[rng.gen_range(0..topic.pair_words.len())].clone()
        } else {
            global_words[rng.gen_range(0..global_words.len())].clone()
        };
        source.push(w);
    }
    if rng.gen::<f64>() < 0.6 {
        for kp in &keyphrases {
            let at = rng.gen_range(0..=source.len());
            for (off, w) in kp.iter().enumerate() {
                source.insert((at + off).min(source.len()), w.clone());
            }
        }
    }

    // OCR text: short, topic-flavored, sometimes a keyphrase word.
    let mut ocr = Vec::new();
    if rng.gen::<f64>() < 0.5 {
        let n = rng.gen_range(1..3);
        for _ in 0..n {
            if rng.gen::<f64>() < 0.3 {
                let kp = &keyphrases[rng.gen_range(0..keyphrases.len())];
                ocr.push(kp[rng.gen_range(0..kp.len())].clone());
            } else {
                ocr.push(topic.words[rng.gen_range(0..topic.words.len())].clone());
            }
        }
    }

    // entities: an anchor naming the topic, sometimes carrying a gold word.
    let mut entities = Vec::new();
    if rng.gen::<f64>() < 0.7 {
        let head = topic.words[rng.gen_range(0..2)].clone();
        if rng.gen::<f64>() < 0.5 {
            let kp = &keyphrases[rng.gen_range(0..keyphrases.len())];
            entities.push(alloc::vec![head, kp[0].clone()]);
        } else {
            entities.push(alloc::vec![head]);
        }
    }

    let image = sample_grid(topic, spec.noise_region_fraction, rng);
    let mut kps = keyphrases;
    kps.sort();
    kps.dedup();
    MultiModalSample {
        source_text: source,
        ocr_text: ocr,
        entities,
        image_features: Arc::new(image),
        keyphrases: kps,
    }
}

/// Deterministic synthetic corpus: train/valid/test splits plus a
/// balanced image-text matching set built over the training samples.
pub fn generate(spec: &SynthSpec) -> Result<SyntheticCorpus> {
    if spec.n_topics < 2 {
        return Err(Error::Config(format!(
            "n_topics must be >= 2, got {}",
            spec.n_topics
        )));
    }
    if !(0.0..1.0).contains(&spec.noise_region_fraction) {
        return Err(Error::Config(format!(
            "noise_region_fraction must be in [0, 1), got {}",
            spec.noise_region_fraction
        )));
    }
    if spec.n_samples == 0 {
        return Err(Error::Config("n_samples must be >= 1".into()));
    }
    if spec.avg_keyphrases < 1.0 {
        return Err(Error::Config("avg_keyphrases must be >= 1".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (topics, global_words) = build_topics(spec, &mut rng)?;

    let draw_split = |n: usize, rng: &mut ChaCha8Rng| -> (Vec<MultiModalSample>, Vec<usize>) {
        let mut samples = Vec::with_capacity(n);
        let mut topic_ids = Vec::with_capacity(n);
        for i in 0..n {
            let t = i % spec.n_topics; // even coverage, order shuffled below
            topic_ids.push(t);
            samples.push(sample_post(t, &topics, &global_words, spec, rng));
        }
        (samples, topic_ids)
    };

    let (train, train_topics) = draw_split(spec.n_samples, &mut rng);
    let side = (spec.n_samples / 8).max(4);
    let (valid, _) = draw_split(side, &mut rng);
    let (test, _) = draw_split(side, &mut rng);

    // Matching pairs over training samples: first ceil(n/2) keep their own
    // grid (label 1), the rest borrow a grid from a different topic.
    let n = train.len();
    let n_pos = n.div_ceil(2);
    let mut matching = Vec::with_capacity(n);
    for (i, sample) in train.iter().enumerate() {
        let (features, label) = if i < n_pos {
            (Arc::clone(&sample.image_features), true)
        } else {
            let mut j = rng.gen_range(0..n);
            let mut guard = 0;
            while (train_topics[j] == train_topics[i] || j == i) && guard < 64 {
                j = rng.gen_range(0..n);
                guard += 1;
            }
            (Arc::clone(&train[j].image_features), false)
        };
        matching.push(MatchingRecord {
            source_text: sample.source_text.clone(),
            ocr_text: sample.ocr_text.clone(),
            entities: sample.entities.clone(),
            image_features: features,
            label,
        });
    }

    Ok(SyntheticCorpus {
        train,
        valid,
        test,
        matching,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> SynthSpec {
        SynthSpec {
            n_samples: 16,
            vocab_size: 120,
            n_topics: 4,
            noise_region_fraction: noise,
            avg_keyphrases: 1.0,
            seed: 7,
        }
    }

    #[test]
    fn identical_seeds_identical_output() {
        let a = generate(&spec(0.3)).unwrap();
        let b = generate(&spec(0.3)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.valid, b.valid);
        assert_eq!(a.test, b.test);
        assert_eq!(a.matching, b.matching);
    }

    #[test]
    fn different_seed_changes_output() {
        let a = generate(&spec(0.3)).unwrap();
        let b = generate(&SynthSpec {
            seed: 8,
            ..spec(0.3)
        })
        .unwrap();
        assert_ne!(a.train, b.train);
    }

    // Max pairwise distance between grid rows: tight for pure-signal
    // grids, large once unit-variance noise rows mix in.
    fn max_row_spread(s: &MultiModalSample) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..GRID_REGIONS {
            for b in (a + 1)..GRID_REGIONS {
                let d: f64 = s
                    .image_features
                    .region(a)
                    .iter()
                    .zip(s.image_features.region(b))
                    .map(|(&x, &y)| ((x - y) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                worst = worst.max(d);
            }
        }
        worst
    }

    #[test]
    fn zero_noise_keeps_all_rows_in_topic_cluster() {
        let clean = generate(&spec(0.0)).unwrap();
        let noisy = generate(&spec(0.5)).unwrap();
        // Signal rows sit within ~sqrt(2*512)*0.35 of each other; noise
        // rows wander an order of magnitude further out.
        let threshold = 18.0;
        for s in &clean.train {
            assert!(max_row_spread(s) < threshold, "spread {}", max_row_spread(s));
        }
        let spread_noisy = noisy.train.iter().map(max_row_spread).fold(0.0, f64::max);
        assert!(spread_noisy > threshold);
    }

    #[test]
    fn matching_set_is_balanced() {
        for n in [15usize, 16] {
            let c = generate(&SynthSpec {
                n_samples: n,
                ..spec(0.2)
            })
            .unwrap();
            assert_eq!(c.matching.len(), n);
            let pos = c.matching.iter().filter(|m| m.label).count();
            assert_eq!(pos, n.div_ceil(2));
        }
    }

    #[test]
    fn negatives_borrow_foreign_grids() {
        let c = generate(&spec(0.2)).unwrap();
        for (i, m) in c.matching.iter().enumerate() {
            if m.label {
                assert_eq!(m.image_features, c.train[i].image_features);
            } else {
                assert_ne!(m.image_features, c.train[i].image_features);
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate(&SynthSpec {
            n_topics: 1,
            ..spec(0.2)
        })
        .is_err());
        assert!(generate(&spec(1.0)).is_err());
        assert!(generate(&spec(-0.1)).is_err());
        assert!(generate(&SynthSpec {
            vocab_size: 10,
            ..spec(0.2)
        })
        .is_err());
    }

    #[test]
    fn samples_have_nonempty_gold_sets() {
        let c = generate(&spec(0.4)).unwrap();
        for s in c.train.iter().chain(&c.valid).chain(&c.test) {
            assert!(!s.keyphrases.is_empty());
            assert!(!s.source_text.is_empty());
        }
    }
}
