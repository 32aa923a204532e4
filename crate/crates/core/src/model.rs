//! Model assembly: configuration, named parameter initialization, the
//! shared forward pass, and per-sample loss graphs.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{self, LabelSet, TopK};
use crate::data::{
    EncodeOptions, EncodedInput, ImageFeatures, MatchingSample, MultiModalSample, Triplet,
    Vocabulary, DEFAULT_MAX_INPUT_LEN, GRID_REGIONS, REGION_DIM, TYPE_SRC, UNK,
};
use crate::error::{Error, Result};
use crate::generator::{self, ExtendedVocab};
use crate::image_encoder;
use crate::noise_filter;
use crate::numerics::{Bound, Graph, Params, Real, Tensor, Var};
use crate::text_encoder::{self, Mode};

/// Table-2-style variant toggles. All false reproduces the full model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_itm_loss: bool,
    pub no_irtm_loss: bool,
    pub no_cla_loss: bool,
    pub no_entities: bool,
    pub no_ocr: bool,
    pub no_itm_match: bool,
    pub no_region_match: bool,
    pub no_filter_module: bool,
}

impl Ablation {
    /// Whether the coarse matching score is computed and smooths A.
    pub fn use_match_score(&self) -> bool {
        !(self.no_itm_match || self.no_filter_module)
    }

    /// Whether the region correlation scores gate the image grid.
    pub fn use_region_gate(&self) -> bool {
        !(self.no_region_match || self.no_filter_module)
    }

    pub fn use_itm_loss(&self) -> bool {
        self.use_match_score() && !self.no_itm_loss
    }

    pub fn use_irtm_loss(&self) -> bool {
        self.use_region_gate() && !self.no_irtm_loss
    }

    pub fn use_cla_loss(&self) -> bool {
        !self.no_cla_loss
    }

    /// Dropping the classification task also drops copying from the
    /// classifier's top predictions.
    pub fn use_classifier_copy(&self) -> bool {
        !self.no_cla_loss
    }

    pub fn from_name(name: &str) -> Option<Ablation> {
        let mut a = Ablation::default();
        match name {
            "full" => {}
            "no_itm_loss" => a.no_itm_loss = true,
            "no_irtm_loss" => a.no_irtm_loss = true,
            "no_cla_loss" => a.no_cla_loss = true,
            "no_entities" => a.no_entities = true,
            "no_ocr" => a.no_ocr = true,
            "no_itm_match" => a.no_itm_match = true,
            "no_region_match" => a.no_region_match = true,
            "no_filter_module" => a.no_filter_module = true,
            _ => return None,
        }
        Some(a)
    }

    pub const VARIANT_NAMES: [&'static str; 9] = [
        "full",
        "no_itm_loss",
        "no_irtm_loss",
        "no_cla_loss",
        "no_entities",
        "no_ocr",
        "no_itm_match",
        "no_region_match",
        "no_filter_module",
    ];
}

/// Model hyperparameters. Defaults follow the reference configuration:
/// 200-dim embeddings, 300-dim bidirectional hidden states, beam width 10.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_emb: usize,
    /// Concatenated bidirectional hidden size (each direction d1/2).
    pub d1: usize,
    /// Shared semantic space of the region-text correlation.
    pub d2: usize,
    pub n_heads: usize,
    /// Hidden width of the correlation FFN over the 49 region scores.
    pub d_corr_ffn: usize,
    pub max_input_len: usize,
    pub max_target_len: usize,
    pub top_k: usize,
    pub beam_size: usize,
    pub lambda_c: f64,
    pub dropout: f64,
    pub clamp_logit: f64,
    pub layernorm_eps: f64,
    /// Test hook: skip the correlation FFN (identity), enabling exact
    /// closed-form oracles on A.
    pub corr_ffn_bypass: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_emb: 200,
            d1: 300,
            d2: 128,
            n_heads: 4,
            d_corr_ffn: 64,
            max_input_len: DEFAULT_MAX_INPUT_LEN,
            max_target_len: 6,
            top_k: 5,
            beam_size: 10,
            lambda_c: 0.5,
            dropout: 0.1,
            clamp_logit: 30.0,
            layernorm_eps: 1e-5,
            corr_ffn_bypass: false,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d1 == 0 || self.d1 % 2 != 0 {
            return Err(Error::Config(format!("d1 must be positive and even, got {}", self.d1)));
        }
        if self.n_heads == 0 || self.d1 % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d1 {} must be divisible by n_heads {}",
                self.d1, self.n_heads
            )));
        }
        if self.d_emb == 0 || self.d2 == 0 || self.d_corr_ffn == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_c) {
            return Err(Error::Config(format!("lambda_c must be in [0,1], got {}", self.lambda_c)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        if self.max_input_len < 3 {
            return Err(Error::Config("max_input_len must be >= 3".into()));
        }
        if self.max_target_len == 0 || self.top_k == 0 || self.beam_size == 0 {
            return Err(Error::Config("max_target_len, top_k, beam_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn encode_options(&self) -> EncodeOptions {
        EncodeOptions {
            max_len: self.max_input_len,
            use_ocr: !self.ablation.no_ocr,
            use_entities: !self.ablation.no_entities,
        }
    }
}

const INIT_RANGE: f64 = 0.1;

fn uniform<F: Real>(params: &mut Params<F>, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) {
    params.insert(name, Tensor::uniform(shape, -INIT_RANGE, INIT_RANGE, rng));
}

fn zeros<F: Real>(params: &mut Params<F>, name: &str, shape: &[usize]) {
    params.insert(name, Tensor::zeros(shape));
}

fn gru_params<F: Real>(
    params: &mut Params<F>,
    prefix: &str,
    d_in: usize,
    d_hidden: usize,
    rng: &mut ChaCha8Rng,
) {
    for gate in ["z", "r", "n"] {
        uniform(params, &format!("{prefix}.w{gate}"), &[d_in, d_hidden], rng);
        uniform(params, &format!("{prefix}.u{gate}"), &[d_hidden, d_hidden], rng);
        zeros(params, &format!("{prefix}.b{gate}"), &[d_hidden]);
    }
}

fn attention_params<F: Real>(
    params: &mut Params<F>,
    prefix: &str,
    d: usize,
    rng: &mut ChaCha8Rng,
) {
    for p in ["q", "k", "v", "o"] {
        uniform(params, &format!("{prefix}.w{p}"), &[d, d], rng);
        zeros(params, &format!("{prefix}.b{p}"), &[d]);
    }
}

/// Initialize every learnable tensor. Weights are uniform(-0.1, 0.1),
/// biases zero, layer-norm gain one.
pub fn init_params<F: Real>(
    cfg: &ModelConfig,
    vocab_size: usize,
    n_labels: usize,
    seed: u64,
) -> Params<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    let (e, h, d2) = (cfg.d_emb, cfg.d1, cfg.d2);
    let hd = h / 2;

    uniform(&mut p, "emb.word", &[vocab_size, e], &mut rng);
    uniform(&mut p, "emb.type", &[crate::data::N_TYPES, e], &mut rng);

    gru_params(&mut p, "enc.fwd", e, hd, &mut rng);
    gru_params(&mut p, "enc.bwd", e, hd, &mut rng);

    uniform(&mut p, "img.w", &[REGION_DIM, h], &mut rng);
    zeros(&mut p, "img.b", &[h]);

    attention_params(&mut p, "nf.att", h, &mut rng);
    uniform(&mut p, "nf.fc.w", &[h, 1], &mut rng);
    zeros(&mut p, "nf.fc.b", &[1]);
    uniform(&mut p, "nf.wt", &[h, d2], &mut rng);
    uniform(&mut p, "nf.wi", &[h, d2], &mut rng);
    uniform(&mut p, "nf.ffn.w1", &[GRID_REGIONS, cfg.d_corr_ffn], &mut rng);
    zeros(&mut p, "nf.ffn.b1", &[cfg.d_corr_ffn]);
    uniform(&mut p, "nf.ffn.w2", &[cfg.d_corr_ffn, GRID_REGIONS], &mut rng);
    zeros(&mut p, "nf.ffn.b2", &[GRID_REGIONS]);

    attention_params(&mut p, "cls.att", h, &mut rng);
    uniform(&mut p, "cls.ffn.w1", &[h, 2 * h], &mut rng);
    zeros(&mut p, "cls.ffn.b1", &[2 * h]);
    uniform(&mut p, "cls.ffn.w2", &[2 * h, h], &mut rng);
    zeros(&mut p, "cls.ffn.b2", &[h]);
    p.insert("cls.ln.g", Tensor::full(&[h], F::one()));
    zeros(&mut p, "cls.ln.b", &[h]);
    uniform(&mut p, "cls.mlp.w1", &[h, h], &mut rng);
    zeros(&mut p, "cls.mlp.b1", &[h]);
    uniform(&mut p, "cls.mlp.w2", &[h, n_labels], &mut rng);
    zeros(&mut p, "cls.mlp.b2", &[n_labels]);

    uniform(&mut p, "dec.w0", &[h, h], &mut rng);
    gru_params(&mut p, "dec.gru", e + h, h, &mut rng);
    uniform(&mut p, "dec.att.w", &[2 * h, h], &mut rng);
    uniform(&mut p, "dec.att.v", &[h], &mut rng);
    uniform(&mut p, "dec.wp", &[e + 2 * h, vocab_size], &mut rng);
    uniform(&mut p, "dec.wlam", &[e + 2 * h, 1], &mut rng);

    p
}

/// Convert raw grid features to the runtime scalar type.
pub fn features_tensor<F: Real>(features: &ImageFeatures) -> Tensor<F> {
    Tensor {
        shape: alloc::vec![GRID_REGIONS, REGION_DIM],
        data: features.values().iter().map(|&v| F::lit(v as f64)).collect(),
    }
}

/// The assembled model: parameters plus the vocabulary and label set they
/// were trained against.
#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: Params<F>,
    pub vocab: Vocabulary,
    pub labels: LabelSet,
    /// 0 = freshly initialized, 1 = stage-1 trained, 2 = stage-2 trained.
    pub stage: u8,
}

impl<F: Real> Model<F> {
    pub fn new(config: ModelConfig, vocab: Vocabulary, labels: LabelSet, seed: u64) -> Result<Self> {
        config.validate()?;
        if labels.len() < 2 {
            return Err(Error::Config(format!(
                "classifier needs at least 2 labels, got {}",
                labels.len()
            )));
        }
        let params = init_params(&config, vocab.size(), labels.len(), seed);
        Ok(Model {
            config,
            params,
            vocab,
            labels,
            stage: 0,
        })
    }

    pub fn encode_sample(&self, sample: &MultiModalSample) -> Result<EncodedInput> {
        crate::data::concat_input(sample, &self.vocab, self.config.encode_options())
    }

    pub fn triplets_of(&self, sample: &MultiModalSample) -> Result<Vec<Triplet>> {
        crate::data::replicate_one2one(sample, &self.vocab, self.config.encode_options())
    }
}

/// Shared forward state for one sample within one graph.
pub struct ForwardVars {
    pub m_t: Var,
    pub h_t: Var,
    pub h_i: Var,
    pub s_c: Option<Var>,
    pub corr: Option<Var>,
    pub h_i_hat: Var,
    pub h_f: Var,
    pub cla_logits: Option<Var>,
    pub cla_probs: Option<Var>,
}

impl<F: Real> Model<F> {
    /// Encoder, noise filter, fusion, and (optionally) the classifier
    /// head, honoring the configured ablation.
    pub fn forward_common(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        input: &EncodedInput,
        features: &ImageFeatures,
        need_classifier: bool,
        mode: &mut Mode<'_>,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let emb = text_encoder::embed(g, bound, cfg, input, self.vocab.size(), mode)?;
        let enc = text_encoder::encode_text(g, bound, cfg, emb, mode)?;
        let raw = features_tensor::<F>(features);
        let h_i = image_encoder::project_image(g, bound, &raw)?;

        let s_c = if cfg.ablation.use_match_score() {
            let m = noise_filter::match_score(g, bound, cfg, enc.m_t, h_i)?;
            Some(m.s_c)
        } else {
            None
        };

        let (corr, h_i_hat) = if cfg.ablation.use_region_gate() {
            let corr = noise_filter::correlation_scores(g, bound, cfg, enc.m_t, h_i, s_c)?;
            let filtered = noise_filter::filter_image(g, corr.scores, h_i)?;
            (Some(corr.scores), filtered.h_i_hat)
        } else {
            (None, h_i)
        };

        let h_f = classifier::fuse(g, bound, cfg, enc.m_t, h_i_hat)?;
        let (cla_logits, cla_probs) = if need_classifier {
            let c = classifier::classify(g, bound, cfg, h_f)?;
            (Some(c.logits), Some(c.probs))
        } else {
            (None, None)
        };

        Ok(ForwardVars {
            m_t: enc.m_t,
            h_t: enc.h_t,
            h_i,
            s_c,
            corr,
            h_i_hat,
            h_f,
            cla_logits,
            cla_probs,
        })
    }

    /// Correlation target driven by the gold keyphrases, detached.
    pub fn gt_correlation(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        keyphrases: &[Vec<String>],
        h_i: Var,
        s_c: Option<Var>,
    ) -> Result<Var> {
        if keyphrases.is_empty() {
            return Err(Error::NoTarget);
        }
        let tokens = noise_filter::gold_concat_tokens(keyphrases);
        let input = self.encode_plain_tokens(&tokens);
        let mut mode = Mode::Eval;
        let emb = text_encoder::embed(g, bound, &self.config, &input, self.vocab.size(), &mut mode)?;
        let enc = text_encoder::encode_text(g, bound, &self.config, emb, &mut mode)?;
        let corr = noise_filter::correlation_scores(g, bound, &self.config, enc.m_t, h_i, s_c)?;
        Ok(g.detach(corr.scores))
    }

    /// Encode a bare token sequence (source-typed, no delimiters).
    fn encode_plain_tokens(&self, tokens: &[String]) -> EncodedInput {
        let vocab_size = self.vocab.size() as u32;
        let mut token_ids = Vec::with_capacity(tokens.len());
        let mut ext_token_ids = Vec::with_capacity(tokens.len());
        let mut oov_words: Vec<String> = Vec::new();
        for w in tokens {
            match self.vocab.id_of(w) {
                Some(id) => {
                    token_ids.push(id);
                    ext_token_ids.push(id);
                }
                None => {
                    token_ids.push(UNK);
                    let pos = match oov_words.iter().position(|o| o == w) {
                        Some(p) => p,
                        None => {
                            oov_words.push(w.clone());
                            oov_words.len() - 1
                        }
                    };
                    ext_token_ids.push(vocab_size + pos as u32);
                }
            }
        }
        EncodedInput {
            type_ids: alloc::vec![TYPE_SRC; token_ids.len()],
            token_ids,
            oov_words,
            ext_token_ids,
        }
    }

    /// Stage-1 loss components for one keyphrase triplet:
    /// correlation-divergence and classification.
    pub fn triplet_stage1_losses(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        triplet: &Triplet,
        mode: &mut Mode<'_>,
    ) -> Result<TripletLosses> {
        let abl = self.config.ablation;
        let need_cla = abl.use_cla_loss();
        let fwd = self.forward_common(g, bound, &triplet.input, &triplet.image_features, need_cla, mode)?;

        let irtm = if abl.use_irtm_loss() {
            let a = fwd.corr.expect("region gate active");
            let a_gt = self.gt_correlation(g, bound, &triplet.all_keyphrases, fwd.h_i, fwd.s_c)?;
            Some(g.mse(a, a_gt)?)
        } else {
            None
        };

        let cla = if need_cla {
            let phrase = triplet.target.join(" ");
            match self.labels.index_of(&phrase) {
                Some(idx) => Some(g.nll(fwd.cla_probs.expect("classifier active"), idx)?),
                None => None, // absent from label set: skip L_cla, keep L_irtm
            }
        } else {
            None
        };

        Ok(TripletLosses { irtm, cla })
    }

    /// Image-text matching loss for one labelled pair.
    pub fn matching_loss(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        sample: &MatchingSample,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let emb = text_encoder::embed(g, bound, cfg, &sample.input, self.vocab.size(), mode)?;
        let enc = text_encoder::encode_text(g, bound, cfg, emb, mode)?;
        let raw = features_tensor::<F>(&sample.image_features);
        let h_i = image_encoder::project_image(g, bound, &raw)?;
        let m = noise_filter::match_score(g, bound, cfg, enc.m_t, h_i)?;
        g.bce(m.s_c, sample.label)
    }

    /// Teacher-forced generation loss for one triplet (includes EOS).
    pub fn generation_loss(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        triplet: &Triplet,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let fwd = self.forward_common(
            g,
            bound,
            &triplet.input,
            &triplet.image_features,
            cfg.ablation.use_classifier_copy(),
            mode,
        )?;
        let top = self.top_predictions(g, bound, &fwd)?;
        let ext = ExtendedVocab::build(
            &self.vocab,
            &triplet.input,
            top.as_ref().map(|t| t.words.as_slice()).unwrap_or(&[]),
        );

        let s0 = generator::init_decoder(g, bound, fwd.m_t)?;
        let step_targets = generator::teacher_targets(&self.vocab, &ext, &triplet.input, &triplet.target);

        let mut losses = Vec::with_capacity(step_targets.len());
        let mut s_prev = s0;
        let mut prev_embed_id = crate::data::BOS;
        for &(feed_next, target_ext) in &step_targets {
            let y_prev = generator::decoder_input_embedding(g, bound, cfg, prev_embed_id, self.vocab.size(), mode)?;
            let step = generator::decoder_step(g, bound, cfg, y_prev, s_prev, fwd.h_t)?;
            let p_p = generator::prediction_distribution(g, bound, cfg, y_prev, step.s, step.c, fwd.h_f)?;
            let p_c = generator::copy_distribution(
                g,
                cfg,
                step.alpha,
                &triplet.input,
                top.as_ref(),
                &ext,
                &self.vocab,
            )?;
            let mix = generator::mix_distributions(
                g, bound, cfg, p_p, p_c, y_prev, step.s, step.c, fwd.h_f, ext.len(), None,
            )?;
            losses.push(g.nll(mix.p, target_ext as usize)?);
            s_prev = step.s;
            prev_embed_id = feed_next;
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l)?;
        }
        Ok(total)
    }

    /// Evaluate the encoder-side pass once and freeze everything beam
    /// search needs for this sample.
    pub fn decode_context(
        &self,
        input: &EncodedInput,
        features: &ImageFeatures,
    ) -> Result<generator::DecodeContext<F>> {
        let mut g = Graph::new();
        let bound = g.bind(&self.params);
        let mut mode = Mode::Eval;
        let need_cla = self.config.ablation.use_classifier_copy();
        let fwd = self.forward_common(&mut g, &bound, input, features, need_cla, &mut mode)?;
        let top = self.top_predictions(&mut g, &bound, &fwd)?;
        let s0 = generator::init_decoder(&mut g, &bound, fwd.m_t)?;

        let (top_words, beta) = match &top {
            Some(t) => (t.words.clone(), Some(g.value(t.beta).clone())),
            None => (Vec::new(), None),
        };
        let ext = ExtendedVocab::build(&self.vocab, input, &top_words);
        Ok(generator::DecodeContext {
            input: input.clone(),
            h_t: g.value(fwd.h_t).clone(),
            h_f: g.value(fwd.h_f).clone(),
            m_t: g.value(fwd.m_t).clone(),
            s0: g.value(s0).clone(),
            top_words,
            beta,
            ext,
            correlation: fwd.corr.map(|a| g.value(a).clone()),
            match_score: fwd.s_c.map(|s| g.value(s).scalar_value().as_f64()),
        })
    }

    /// Ranked keyphrases for one sample at the configured beam settings.
    pub fn predict(
        &self,
        input: &EncodedInput,
        features: &ImageFeatures,
    ) -> Result<Vec<(String, f64)>> {
        let ctx = self.decode_context(input, features)?;
        generator::beam_search(self, &ctx, self.config.beam_size, self.config.max_target_len)
    }

    /// Classifier top-k phrases and per-word copy weights, when the
    /// classifier copy route is active.
    pub fn top_predictions(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        fwd: &ForwardVars,
    ) -> Result<Option<TopK>> {
        if !self.config.ablation.use_classifier_copy() {
            return Ok(None);
        }
        let logits = match fwd.cla_logits {
            Some(l) => l,
            None => classifier::classify(g, bound, &self.config, fwd.h_f)?.logits,
        };
        Ok(Some(classifier::top_k_predictions(
            g,
            &self.labels,
            logits,
            self.config.top_k,
        )?))
    }
}

/// Per-triplet stage-1 loss terms actually produced (ablations or an
/// absent gold label can suppress either).
pub struct TripletLosses {
    pub irtm: Option<Var>,
    pub cla: Option<Var>,
}

/// Discrete/detached quantities pinned at a reference parameter point so
/// finite differences see the same loss function the analytic gradient
/// differentiates: the correlation target (a gradient barrier) and the
/// top-k label selection (a discrete choice).
#[derive(Debug, Clone)]
pub struct FrozenTargets<F> {
    pub a_gt: Option<Tensor<F>>,
    pub top_indices: Option<Vec<usize>>,
}

impl<F: Real> Model<F> {
    /// Evaluate the frozen quantities for one triplet at the current
    /// parameters.
    pub fn freeze_targets(&self, triplet: &Triplet) -> Result<FrozenTargets<F>> {
        let mut g = Graph::new();
        let bound = g.bind(&self.params);
        let mut mode = Mode::Eval;
        let abl = self.config.ablation;
        let need_cla = abl.use_classifier_copy();
        let fwd = self.forward_common(
            &mut g,
            &bound,
            &triplet.input,
            &triplet.image_features,
            need_cla,
            &mut mode,
        )?;
        let a_gt = if abl.use_irtm_loss() {
            let v = self.gt_correlation(&mut g, &bound, &triplet.all_keyphrases, fwd.h_i, fwd.s_c)?;
            Some(g.value(v).clone())
        } else {
            None
        };
        let top_indices = if need_cla {
            let top = self.top_predictions(&mut g, &bound, &fwd)?.expect("classifier copy");
            Some(top.phrase_indices)
        } else {
            None
        };
        Ok(FrozenTargets { a_gt, top_indices })
    }
}

/// A sample prepared for decoding and metric evaluation.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub input: EncodedInput,
    pub features: Arc<ImageFeatures>,
    pub gold: Vec<String>,
}

impl EvalSample {
    pub fn from_sample<F: Real>(model: &Model<F>, sample: &MultiModalSample) -> Result<Self> {
        Ok(EvalSample {
            input: model.encode_sample(sample)?,
            features: Arc::clone(&sample.image_features),
            gold: sample.keyphrase_strings(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut cfg = ModelConfig {
            d1: 7,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.d1 = 12;
        cfg.n_heads = 5;
        assert!(cfg.validate().is_err());
        cfg.n_heads = 4;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn default_config_matches_reference_settings() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.d_emb, 200);
        assert_eq!(cfg.d1, 300);
        assert_eq!(cfg.beam_size, 10);
        assert_eq!(cfg.top_k, 5);
        assert_eq!(cfg.dropout, 0.1);
    }

    #[test]
    fn ablation_toggle_semantics() {
        let full = Ablation::default();
        assert!(full.use_match_score() && full.use_region_gate());
        assert!(full.use_itm_loss() && full.use_irtm_loss() && full.use_cla_loss());

        let no_filter = Ablation::from_name("no_filter_module").unwrap();
        assert!(!no_filter.use_match_score());
        assert!(!no_filter.use_region_gate());
        assert!(!no_filter.use_itm_loss());
        assert!(!no_filter.use_irtm_loss());
        assert!(no_filter.use_cla_loss());

        let no_itm_match = Ablation::from_name("no_itm_match").unwrap();
        assert!(!no_itm_match.use_match_score());
        assert!(no_itm_match.use_region_gate());
        assert!(!no_itm_match.use_itm_loss());
        assert!(no_itm_match.use_irtm_loss());

        let no_cla = Ablation::from_name("no_cla_loss").unwrap();
        assert!(!no_cla.use_classifier_copy());
        assert!(Ablation::from_name("bogus").is_none());
    }

    #[test]
    fn init_params_shapes() {
        let cfg = ModelConfig {
            d_emb: 8,
            d1: 16,
            d2: 8,
            n_heads: 2,
            ..Default::default()
        };
        let p: Params<f64> = init_params(&cfg, 50, 6, 7);
        assert_eq!(p.get("emb.word").shape, vec![50, 8]);
        assert_eq!(p.get("enc.fwd.wz").shape, vec![8, 8]);
        assert_eq!(p.get("img.w").shape, vec![512, 16]);
        assert_eq!(p.get("dec.wp").shape, vec![8 + 32, 50]);
        assert_eq!(p.get("cls.mlp.w2").shape, vec![16, 6]);
        // biases zero, gain one
        assert!(p.get("img.b").data.iter().all(|&v| v == 0.0));
        assert!(p.get("cls.ln.g").data.iter().all(|&v| v == 1.0));
    }
}
