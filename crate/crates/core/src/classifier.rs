//! Keyphrase classification: fusion of filtered image features with the
//! global text vector, the label-set classifier, and the top-k phrase
//! weights feeding the extended copy mechanism.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::MultiModalSample;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::noise_filter::multihead_cross_attention;
use crate::numerics::{Bound, Graph, Real, Var};

/// The fixed candidate-keyphrase labels, built from training data only.
/// Phrases are distinct and sorted lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    phrases: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl LabelSet {
    pub fn build(train: &[MultiModalSample]) -> Self {
        let mut phrases: Vec<String> = train
            .iter()
            .flat_map(|s| s.keyphrase_strings())
            .collect();
        phrases.sort();
        phrases.dedup();
        Self::from_phrases(phrases)
    }

    pub fn from_phrases(phrases: Vec<String>) -> Self {
        let index = phrases
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        LabelSet { phrases, index }
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn phrase(&self, i: usize) -> &str {
        &self.phrases[i]
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn index_of(&self, phrase: &str) -> Option<usize> {
        self.index.get(phrase).copied()
    }
}

/// `H_f = layernorm(x + ffn(x))` over the cross-attended fusion `x`.
pub fn fuse<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    cfg: &ModelConfig,
    m_t: Var,
    h_i_hat: Var,
) -> Result<Var> {
    let x = multihead_cross_attention(g, bound, "cls.att", m_t, h_i_hat, h_i_hat, cfg.n_heads)?;
    let h1 = g.matmul(x, bound.var("cls.ffn.w1"))?;
    let h1 = g.add(h1, bound.var("cls.ffn.b1"))?;
    let h1 = g.relu(h1);
    let h2 = g.matmul(h1, bound.var("cls.ffn.w2"))?;
    let h2 = g.add(h2, bound.var("cls.ffn.b2"))?;
    let residual = g.add(x, h2)?;
    g.layernorm(
        residual,
        bound.var("cls.ln.g"),
        bound.var("cls.ln.b"),
        F::lit(cfg.layernorm_eps),
    )
}

pub struct ClassifyVars {
    pub logits: Var,
    pub probs: Var,
}

/// Two-layer MLP over H_f followed by softmax.
pub fn classify<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    _cfg: &ModelConfig,
    h_f: Var,
) -> Result<ClassifyVars> {
    let h1 = g.matmul(h_f, bound.var("cls.mlp.w1"))?;
    let h1 = g.add(h1, bound.var("cls.mlp.b1"))?;
    let h1 = g.relu(h1);
    let logits = g.matmul(h1, bound.var("cls.mlp.w2"))?;
    let logits = g.add(logits, bound.var("cls.mlp.b2"))?;
    let probs = g.softmax(logits)?;
    Ok(ClassifyVars { logits, probs })
}

/// Top-k classifier phrases flattened to words, with per-word weights.
pub struct TopK {
    /// Words of the selected phrases in rank order.
    pub words: Vec<String>,
    /// One weight per word; sums to 1. Each phrase's softmax weight is
    /// split evenly over its words.
    pub beta: Var,
    /// Selected label indices in rank order.
    pub phrase_indices: Vec<usize>,
}

/// Select the `min(k, |K|)` highest-probability phrases (ties by label
/// index), softmax their logits, and spread each phrase weight evenly
/// over its words.
pub fn top_k_predictions<F: Real>(
    g: &mut Graph<F>,
    labels: &LabelSet,
    logits: Var,
    k: usize,
) -> Result<TopK> {
    if k == 0 {
        return Err(Error::Config("top-k needs k >= 1".into()));
    }
    let values = g.value(logits).data.clone();
    let take = k.min(values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let selected = &order[..take];

    let mut picked = Vec::with_capacity(take);
    for &idx in selected {
        picked.push(g.slice_vec(logits, idx, 1)?);
    }
    let sel_logits = g.concat_vec(&picked)?;
    let weights = g.softmax(sel_logits)?;

    let mut words = Vec::new();
    let mut per_word = Vec::new();
    for (rank, &idx) in selected.iter().enumerate() {
        let phrase_words: Vec<String> = labels
            .phrase(idx)
            .split_whitespace()
            .map(String::from)
            .collect();
        let w = g.slice_vec(weights, rank, 1)?;
        let split = g.scale(w, F::lit(1.0 / phrase_words.len() as f64));
        for word in phrase_words {
            words.push(word);
            per_word.push(split);
        }
    }
    let beta = g.concat_vec(&per_word)?;
    Ok(TopK {
        words,
        beta,
        phrase_indices: selected.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageFeatures;
    use crate::numerics::{Params, Tensor};
    use alloc::format;
    use alloc::string::ToString;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fuse_params(d: usize, rng: &mut ChaCha8Rng) -> Params<f64> {
        let mut p = Params::new();
        for name in ["wq", "wk", "wv", "wo"] {
            p.insert(
                &format!("cls.att.{name}"),
                Tensor::uniform(&[d, d], -0.3, 0.3, rng),
            );
        }
        for name in ["bq", "bk", "bv", "bo"] {
            p.insert(
                &format!("cls.att.{name}"),
                Tensor::uniform(&[d], -0.3, 0.3, rng),
            );
        }
        p.insert("cls.ffn.w1", Tensor::uniform(&[d, 2 * d], -0.3, 0.3, rng));
        p.insert("cls.ffn.b1", Tensor::uniform(&[2 * d], -0.3, 0.3, rng));
        p.insert("cls.ffn.w2", Tensor::uniform(&[2 * d, d], -0.3, 0.3, rng));
        p.insert("cls.ffn.b2", Tensor::uniform(&[d], -0.3, 0.3, rng));
        p.insert("cls.ln.g", Tensor::full(&[d], 1.0));
        p.insert("cls.ln.b", Tensor::zeros(&[d]));
        p
    }

    fn cfg(d1: usize) -> ModelConfig {
        ModelConfig {
            d_emb: 4,
            d1,
            d2: 2,
            n_heads: 2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_ffn_with_identity_affine_standardizes_attention_output() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut p = fuse_params(d, &mut rng);
        p.insert("cls.ffn.w1", Tensor::zeros(&[d, 2 * d]));
        p.insert("cls.ffn.b1", Tensor::zeros(&[2 * d]));
        p.insert("cls.ffn.w2", Tensor::zeros(&[2 * d, d]));
        p.insert("cls.ffn.b2", Tensor::zeros(&[d]));
        let mut g = Graph::new();
        let bound = g.bind(&p);
        let m_t = g.leaf(Tensor::vector(vec![0.3, -0.8, 0.2, 0.6]));
        let h = g.leaf(Tensor::matrix(3, d, (0..12).map(|i| 0.13 * i as f64 - 0.7).collect()).unwrap());
        let h_f = fuse(&mut g, &bound, &cfg(d), m_t, h).unwrap();
        let vals = &g.value(h_f).data;
        let mean: f64 = vals.iter().sum::<f64>() / d as f64;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }

    #[test]
    fn zero_image_and_zero_attention_biases_reduce_to_output_bias() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut p = fuse_params(d, &mut rng);
        for name in ["bq", "bk", "bv"] {
            p.insert(&format!("cls.att.{name}"), Tensor::zeros(&[d]));
        }
        let mut g = Graph::new();
        let bound = g.bind(&p);
        let m_t = g.leaf(Tensor::vector(vec![0.5, 0.1, -0.4, 0.2]));
        let h = g.leaf(Tensor::matrix(3, d, vec![0.0; 12]).unwrap());
        let x = multihead_cross_attention(&mut g, &bound, "cls.att", m_t, h, h, 2).unwrap();
        assert_eq!(g.value(x).data, p.get("cls.att.bo").data);
    }

    #[test]
    fn fuse_matches_composed_oracle() {
        // Oracle: attention (via the zero-image shortcut is too narrow, so
        // recompute naively), ffn, residual, layernorm on plain vectors.
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let p = fuse_params(d, &mut rng);
        let m_t_v = vec![0.21, -0.4, 0.05, 0.62];
        let rows = vec![
            vec![0.4, -0.3, 0.2, 0.1],
            vec![-0.2, 0.5, -0.6, 0.3],
        ];
        let mut g = Graph::new();
        let bound = g.bind(&p);
        let m_t = g.leaf(Tensor::vector(m_t_v.clone()));
        let h = g.leaf(Tensor::matrix(2, d, rows.concat()).unwrap());
        let h_f = fuse(&mut g, &bound, &cfg(d), m_t, h).unwrap();

        // independent attention
        let affine = |x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
            (0..w.shape[1])
                .map(|c| {
                    let mut acc = b.data[c];
                    for (k, &xv) in x.iter().enumerate() {
                        acc += xv * w.at2(k, c);
                    }
                    acc
                })
                .collect()
        };
        let q = affine(&m_t_v, p.get("cls.att.wq"), p.get("cls.att.bq"));
        let ks: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| affine(r, p.get("cls.att.wk"), p.get("cls.att.bk")))
            .collect();
        let vs: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| affine(r, p.get("cls.att.wv"), p.get("cls.att.bv")))
            .collect();
        let hd = d / 2;
        let mut concat = vec![0.0; d];
        for head in 0..2 {
            let lo = head * hd;
            let scores: Vec<f64> = ks
                .iter()
                .map(|k| {
                    (0..hd).map(|j| q[lo + j] * k[lo + j]).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let es: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let sum: f64 = es.iter().sum();
            for (i, v) in vs.iter().enumerate() {
                for j in 0..hd {
                    concat[lo + j] += es[i] / sum * v[lo + j];
                }
            }
        }
        let x = affine(&concat, p.get("cls.att.wo"), p.get("cls.att.bo"));
        let h1: Vec<f64> = affine(&x, p.get("cls.ffn.w1"), p.get("cls.ffn.b1"))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let ffn = affine(&h1, p.get("cls.ffn.w2"), p.get("cls.ffn.b2"));
        let res: Vec<f64> = x.iter().zip(&ffn).map(|(a, b)| a + b).collect();
        let mean = res.iter().sum::<f64>() / d as f64;
        let var = res.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = (var + 1e-5).sqrt();
        let expect: Vec<f64> = res.iter().map(|v| (v - mean) / s).collect();

        for (a, b) in g.value(h_f).data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    fn classify_params(d: usize, n_labels: usize, rng: &mut ChaCha8Rng) -> Params<f64> {
        let mut p = Params::new();
        p.insert("cls.mlp.w1", Tensor::uniform(&[d, d], -0.4, 0.4, rng));
        p.insert("cls.mlp.b1", Tensor::uniform(&[d], -0.4, 0.4, rng));
        p.insert("cls.mlp.w2", Tensor::uniform(&[d, n_labels], -0.4, 0.4, rng));
        p.insert("cls.mlp.b2", Tensor::uniform(&[n_labels], -0.4, 0.4, rng));
        p
    }

    #[test]
    fn zero_mlp_gives_uniform_distribution() {
        let (d, k) = (4, 5);
        let mut p = Params::new();
        p.insert("cls.mlp.w1", Tensor::zeros(&[d, d]));
        p.insert("cls.mlp.b1", Tensor::zeros(&[d]));
        p.insert("cls.mlp.w2", Tensor::zeros(&[d, k]));
        p.insert("cls.mlp.b2", Tensor::zeros(&[k]));
        let mut g = Graph::<f64>::new();
        let bound = g.bind(&p);
        let h_f = g.leaf(Tensor::vector(vec![0.3, -0.2, 0.8, 0.41]));
        let c = classify(&mut g, &bound, &cfg(d), h_f).unwrap();
        for &v in &g.value(c.probs).data {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_ln2_logits_is_one_third_two_thirds() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::vector(vec![0.0, (2.0f64).ln()]));
        let probs = g.softmax(logits).unwrap();
        let v = &g.value(probs).data;
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((v[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn classify_matches_exp_normalize_oracle() {
        let (d, k) = (4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p = classify_params(d, k, &mut rng);
        let h_f_v = vec![0.4, -0.9, 0.12, 0.77];
        let mut g = Graph::new();
        let bound = g.bind(&p);
        let h_f = g.leaf(Tensor::vector(h_f_v.clone()));
        let c = classify(&mut g, &bound, &cfg(d), h_f).unwrap();

        let affine = |x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
            (0..w.shape[1])
                .map(|c| {
                    let mut acc = b.data[c];
                    for (kk, &xv) in x.iter().enumerate() {
                        acc += xv * w.at2(kk, c);
                    }
                    acc
                })
                .collect()
        };
        let h1: Vec<f64> = affine(&h_f_v, p.get("cls.mlp.w1"), p.get("cls.mlp.b1"))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let logits = affine(&h1, p.get("cls.mlp.w2"), p.get("cls.mlp.b2"));
        let exps: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
        let sum: f64 = exps.iter().sum();
        let mut total = 0.0;
        for (i, &e) in exps.iter().enumerate() {
            let got = g.value(c.probs).data[i];
            assert!((got - e / sum).abs() < 1e-12);
            total += got;
        }
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn argmax_invariant_under_logit_shift() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::vector(vec![0.3, 1.8, -0.5]));
        let sm_a = g.softmax(a).unwrap();
        let shift = g.leaf(Tensor::vector(vec![7.7; 3]));
        let b = g.add(a, shift).unwrap();
        let sm_b = g.softmax(b).unwrap();
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmax(&g.value(sm_a).data), argmax(&g.value(sm_b).data));
        for (x, y) in g.value(sm_a).data.iter().zip(&g.value(sm_b).data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn labels(phrases: &[&str]) -> LabelSet {
        LabelSet::from_phrases(phrases.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn single_two_word_phrase_splits_evenly() {
        let ls = labels(&["a b"]);
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::vector(vec![0.9]));
        let top = top_k_predictions(&mut g, &ls, logits, 1).unwrap();
        assert_eq!(top.words, vec!["a", "b"]);
        assert_eq!(g.value(top.beta).data, vec![0.5, 0.5]);
    }

    #[test]
    fn equal_logits_split_weight_equally() {
        let ls = labels(&["x", "y"]);
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::vector(vec![1.4, 1.4]));
        let top = top_k_predictions(&mut g, &ls, logits, 2).unwrap();
        assert_eq!(top.words, vec!["x", "y"]);
        assert_eq!(g.value(top.beta).data, vec![0.5, 0.5]);
        // tie broken by label index
        assert_eq!(top.phrase_indices, vec![0, 1]);
    }

    #[test]
    fn softmax_then_per_word_split_oracle() {
        // logits [ln 3, ln 1] for "x" (1 word) and "y z" (2 words):
        // weights [0.75, 0.25] -> beta [0.75, 0.125, 0.125].
        let ls = labels(&["x", "y z"]);
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::vector(vec![(3.0f64).ln(), 0.0]));
        let top = top_k_predictions(&mut g, &ls, logits, 2).unwrap();
        assert_eq!(top.words, vec!["x", "y", "z"]);
        let beta = &g.value(top.beta).data;
        assert!((beta[0] - 0.75).abs() < 1e-12);
        assert!((beta[1] - 0.125).abs() < 1e-12);
        assert!((beta[2] - 0.125).abs() < 1e-12);
        let sum: f64 = beta.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn top_k_caps_at_label_count() {
        let ls = labels(&["a", "b"]);
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::vector(vec![0.1, 0.9]));
        let top = top_k_predictions(&mut g, &ls, logits, 5).unwrap();
        assert_eq!(top.phrase_indices, vec![1, 0]);
    }

    #[test]
    fn label_set_is_sorted_distinct() {
        let samples = [
            MultiModalSample::new("t", "", &[], ImageFeatures::zeros(), &["z".into(), "a b".into()]),
            MultiModalSample::new("t", "", &[], ImageFeatures::zeros(), &["a b".into()]),
        ];
        let ls = LabelSet::build(&samples);
        assert_eq!(ls.phrases(), &["a b".to_string(), "z".to_string()]);
        assert_eq!(ls.index_of("a b"), Some(0));
        assert_eq!(ls.index_of("missing"), None);
    }
}
