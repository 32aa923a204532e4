//! Keyphrase generation: attentive GRU decoder, prediction and extended
//! copy distributions, the soft switch, and beam search over the extended
//! vocabulary.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

// Needed for f64 math in no_std builds; shadowed by std in test builds.
#[allow(unused_imports)]
use num_traits::Float;

use crate::data::{EncodedInput, Vocabulary, BOS, EOS, UNK};
use crate::error::{Error, Result};
use crate::classifier::TopK;
use crate::model::{Model, ModelConfig};
use crate::numerics::{Bound, Graph, Real, Tensor, Var};
use crate::text_encoder::{dropout, gru_step, Mode};

/// The decoder's output space: the fixed vocabulary, then the input's OOV
/// words, then any out-of-vocabulary words of the top classifier phrases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtendedVocab {
    vocab_size: usize,
    ext_words: Vec<String>,
}

impl ExtendedVocab {
    pub fn build(vocab: &Vocabulary, input: &EncodedInput, top_words: &[String]) -> Self {
        let mut ext_words = input.oov_words.clone();
        for w in top_words {
            if vocab.id_of(w).is_none() && !ext_words.iter().any(|e| e == w) {
                ext_words.push(w.clone());
            }
        }
        ExtendedVocab {
            vocab_size: vocab.size(),
            ext_words,
        }
    }

    pub fn len(&self) -> usize {
        self.vocab_size + self.ext_words.len()
    }

    pub fn n_extra(&self) -> usize {
        self.ext_words.len()
    }

    pub fn id_of(&self, vocab: &Vocabulary, word: &str) -> Option<u32> {
        if let Some(id) = vocab.id_of(word) {
            return Some(id);
        }
        self.ext_words
            .iter()
            .position(|w| w == word)
            .map(|p| (self.vocab_size + p) as u32)
    }

    pub fn word_string(&self, vocab: &Vocabulary, id: u32) -> String {
        if (id as usize) < self.vocab_size {
            vocab.word_of(id).unwrap_or("<unk>").to_string()
        } else {
            self.ext_words[(id as usize) - self.vocab_size].clone()
        }
    }
}

/// `s_0 = tanh(W_0 M_T)`.
pub fn init_decoder<F: Real>(g: &mut Graph<F>, bound: &Bound, m_t: Var) -> Result<Var> {
    let x = g.matmul(m_t, bound.var("dec.w0"))?;
    Ok(g.tanh(x))
}

/// Embedding of the previous output token; extended ids fall back to UNK.
pub fn decoder_input_embedding<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    cfg: &ModelConfig,
    token: u32,
    vocab_size: usize,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let id = if (token as usize) < vocab_size {
        token as usize
    } else {
        UNK as usize
    };
    let row = g.gather_rows(bound.var("emb.word"), &[id])?;
    let v = g.row_vec(row, 0)?;
    dropout(g, v, cfg.dropout, mode)
}

pub struct DecoderStep {
    pub s: Var,
    pub c: Var,
    pub alpha: Var,
}

/// Attention over H_T from the pre-update state, context vector, and the
/// GRU update with `[y_prev ; c]` as input.
pub fn decoder_step<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    _cfg: &ModelConfig,
    y_prev_emb: Var,
    s_prev: Var,
    h_t: Var,
) -> Result<DecoderStep> {
    if !g.value(h_t).is_matrix() || g.value(h_t).rows() == 0 {
        return Err(Error::EmptyInput("decoder_step"));
    }
    let joined = g.concat_cols_vec_mat(s_prev, h_t)?;
    let hidden = g.matmul(joined, bound.var("dec.att.w"))?;
    let hidden = g.tanh(hidden);
    let scores = g.matmul(hidden, bound.var("dec.att.v"))?;
    let alpha = g.softmax(scores)?;
    let c = g.matmul(alpha, h_t)?;
    let x = g.concat_vec(&[y_prev_emb, c])?;
    let s = gru_step(g, bound, "dec.gru", x, s_prev)?;
    Ok(DecoderStep { s, c, alpha })
}

/// `p_p = softmax(W_p [y_prev ; s ; c + H_f])` over the fixed vocabulary.
pub fn prediction_distribution<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    _cfg: &ModelConfig,
    y_prev_emb: Var,
    s: Var,
    c: Var,
    h_f: Var,
) -> Result<Var> {
    let mixed = g.add(c, h_f)?;
    let feats = g.concat_vec(&[y_prev_emb, s, mixed])?;
    let logits = g.matmul(feats, bound.var("dec.wp"))?;
    g.softmax(logits)
}

/// Copy probabilities over the extended space: attention mass per input
/// word plus (when the classifier route is active) top-phrase word mass,
/// mixed by the fixed hyperparameter lambda_c.
pub fn copy_distribution<F: Real>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    alpha: Var,
    input: &EncodedInput,
    top: Option<&TopK>,
    ext: &ExtendedVocab,
    vocab: &Vocabulary,
) -> Result<Var> {
    let att_ids: Vec<usize> = input.ext_token_ids.iter().map(|&i| i as usize).collect();
    let att_mass = g.scatter_add_vec(alpha, &att_ids, ext.len())?;
    let Some(top) = top else {
        return Ok(att_mass);
    };
    let beta_ids: Vec<usize> = top
        .words
        .iter()
        .map(|w| {
            ext.id_of(vocab, w)
                .expect("top word present in extended vocabulary") as usize
        })
        .collect();
    let beta_mass = g.scatter_add_vec(top.beta, &beta_ids, ext.len())?;
    let lc = F::lit(cfg.lambda_c);
    let a = g.scale(att_mass, lc);
    let b = g.scale(beta_mass, F::one() - lc);
    g.add(a, b)
}

pub struct MixVars {
    pub p: Var,
    pub lambda: Var,
}

/// `p = lambda * p_p + (1 - lambda) * p_c` on the extended space, with
/// `lambda = sigmoid(W_l [y_prev ; s ; c + H_f])`. `lambda_override` is a
/// test hook that pins the switch.
#[allow(clippy::too_many_arguments)]
pub fn mix_distributions<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    _cfg: &ModelConfig,
    p_p: Var,
    p_c: Var,
    y_prev_emb: Var,
    s: Var,
    c: Var,
    h_f: Var,
    ext_len: usize,
    lambda_override: Option<F>,
) -> Result<MixVars> {
    let lambda = match lambda_override {
        Some(v) => g.leaf(Tensor::vector(alloc::vec![v])),
        None => {
            let mixed = g.add(c, h_f)?;
            let feats = g.concat_vec(&[y_prev_emb, s, mixed])?;
            let logit = g.matmul(feats, bound.var("dec.wlam"))?;
            g.sigmoid(logit)
        }
    };
    let n_vocab = g.value(p_p).numel();
    let p_p_ext = if ext_len > n_vocab {
        let zeros = g.leaf(Tensor::zeros(&[ext_len - n_vocab]));
        g.concat_vec(&[p_p, zeros])?
    } else {
        p_p
    };
    let one = g.leaf(Tensor::vector(alloc::vec![F::one()]));
    let neg = g.scale(lambda, -F::one());
    let one_minus = g.add(one, neg)?;
    let t1 = g.scale_by_scalar(p_p_ext, lambda)?;
    let t2 = g.scale_by_scalar(p_c, one_minus)?;
    let p = g.add(t1, t2)?;
    Ok(MixVars { p, lambda })
}

/// Teacher-forcing schedule: per step, the id fed as the next input
/// embedding and the target id over the extended space. The final step
/// targets EOS. Gold OOV words map to their input extended id when the
/// word occurs in X_T, otherwise UNK.
pub fn teacher_targets(
    vocab: &Vocabulary,
    _ext: &ExtendedVocab,
    input: &EncodedInput,
    target: &[String],
) -> Vec<(u32, u32)> {
    let vocab_size = vocab.size() as u32;
    let target_id = |w: &String| -> u32 {
        if let Some(id) = vocab.id_of(w) {
            return id;
        }
        match input.oov_words.iter().position(|o| o == w) {
            Some(p) => vocab_size + p as u32,
            None => UNK,
        }
    };
    let feed_id = |w: &String| vocab.id_of(w).unwrap_or(UNK);

    let mut steps = Vec::with_capacity(target.len() + 1);
    for w in target {
        steps.push((feed_id(w), target_id(w)));
    }
    steps.push((EOS, EOS));
    steps
}

// ---------------------------------------------------------------------
// Beam search
// ---------------------------------------------------------------------

/// Anything that can expand one decoding step: returns token
/// probabilities over its output space and the successor state.
pub trait BeamStepper {
    type State: Clone;
    fn start(&mut self) -> Result<Self::State>;
    fn step(&mut self, prev_token: u32, state: &Self::State) -> Result<(Vec<f64>, Self::State)>;
    fn detokenize(&self, tokens: &[u32]) -> String;
}

struct Hyp<S> {
    tokens: Vec<u32>,
    sum_logp: f64,
    state: S,
}

/// Length-expanding beam over a stepper. Hypotheses finish at EOS or at
/// `max_len` content tokens; the score is the mean token log-probability
/// (EOS included when emitted). Duplicate strings keep the higher score;
/// results sort by score descending, ties lexicographic.
pub fn beam_search_core<T: BeamStepper>(
    stepper: &mut T,
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<(String, f64)>> {
    if beam_size == 0 {
        return Err(Error::Config("beam_size must be >= 1".into()));
    }
    let mut live = alloc::vec![Hyp {
        tokens: Vec::new(),
        sum_logp: 0.0,
        state: stepper.start()?,
    }];
    // (tokens, sum log p, emitted-token count)
    let mut finished: Vec<(Vec<u32>, f64, usize)> = Vec::new();

    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let mut expansions: Vec<(usize, u32, f64)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (i, hyp) in live.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let (probs, next) = stepper.step(prev, &hyp.state)?;
            next_states.push(next);
            for (tok, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    expansions.push((i, tok as u32, p.ln()));
                }
            }
        }
        expansions.sort_by(|a, b| {
            let sa = live[a.0].sum_logp + a.2;
            let sb = live[b.0].sum_logp + b.2;
            sb.partial_cmp(&sa)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        expansions.truncate(beam_size);

        let mut next_live = Vec::with_capacity(beam_size);
        for (i, tok, logp) in expansions {
            let sum = live[i].sum_logp + logp;
            if tok == EOS {
                finished.push((live[i].tokens.clone(), sum, live[i].tokens.len() + 1));
            } else {
                let mut tokens = live[i].tokens.clone();
                tokens.push(tok);
                if tokens.len() == max_len {
                    let n = tokens.len();
                    finished.push((tokens, sum, n));
                } else {
                    next_live.push(Hyp {
                        tokens,
                        sum_logp: sum,
                        state: next_states[i].clone(),
                    });
                }
            }
        }
        live = next_live;
    }

    let mut best: Vec<(String, f64)> = Vec::new();
    for (tokens, sum, count) in finished {
        if tokens.is_empty() {
            continue;
        }
        let phrase = stepper.detokenize(&tokens);
        if phrase.is_empty() {
            continue;
        }
        let score = sum / count as f64;
        match best.iter_mut().find(|(p, _)| *p == phrase) {
            Some(entry) => entry.1 = entry.1.max(score),
            None => best.push((phrase, score)),
        }
    }
    best.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(best)
}

/// Per-sample quantities computed once before decoding.
#[derive(Debug, Clone)]
pub struct DecodeContext<F> {
    pub input: EncodedInput,
    pub h_t: Tensor<F>,
    pub h_f: Tensor<F>,
    pub m_t: Tensor<F>,
    pub s0: Tensor<F>,
    pub top_words: Vec<String>,
    pub beta: Option<Tensor<F>>,
    pub ext: ExtendedVocab,
    /// Correlation scores A (length 49) when the region gate is active.
    pub correlation: Option<Tensor<F>>,
    pub match_score: Option<f64>,
}

/// Beam stepper backed by a trained model. All hypotheses share one graph
/// with the parameters bound once.
pub struct ModelStepper<'m, F: Real> {
    model: &'m Model<F>,
    ctx: &'m DecodeContext<F>,
    g: Graph<F>,
    bound: Bound,
    h_t: Var,
    h_f: Var,
    top: Option<TopK>,
}

impl<'m, F: Real> ModelStepper<'m, F> {
    pub fn new(model: &'m Model<F>, ctx: &'m DecodeContext<F>) -> ModelStepper<'m, F> {
        let mut g = Graph::new();
        let bound = g.bind(&model.params);
        let h_t = g.leaf(ctx.h_t.clone());
        let h_f = g.leaf(ctx.h_f.clone());
        let top = ctx.beta.as_ref().map(|beta| TopK {
            words: ctx.top_words.clone(),
            beta: g.leaf(beta.clone()),
            phrase_indices: Vec::new(),
        });
        ModelStepper {
            model,
            ctx,
            g,
            bound,
            h_t,
            h_f,
            top,
        }
    }
}

impl<F: Real> BeamStepper for ModelStepper<'_, F> {
    type State = Var;

    fn start(&mut self) -> Result<Var> {
        Ok(self.g.leaf(self.ctx.s0.clone()))
    }

    fn step(&mut self, prev_token: u32, state: &Var) -> Result<(Vec<f64>, Var)> {
        let cfg = &self.model.config;
        let g = &mut self.g;
        let mut mode = Mode::Eval;
        let y_prev = decoder_input_embedding(
            g,
            &self.bound,
            cfg,
            prev_token,
            self.model.vocab.size(),
            &mut mode,
        )?;
        let step = decoder_step(g, &self.bound, cfg, y_prev, *state, self.h_t)?;
        let p_p = prediction_distribution(g, &self.bound, cfg, y_prev, step.s, step.c, self.h_f)?;
        let p_c = copy_distribution(
            g,
            cfg,
            step.alpha,
            &self.ctx.input,
            self.top.as_ref(),
            &self.ctx.ext,
            &self.model.vocab,
        )?;
        let mix = mix_distributions(
            g,
            &self.bound,
            cfg,
            p_p,
            p_c,
            y_prev,
            step.s,
            step.c,
            self.h_f,
            self.ctx.ext.len(),
            None,
        )?;
        let probs = g.value(mix.p).data.iter().map(|v| v.as_f64()).collect();
        Ok((probs, step.s))
    }

    fn detokenize(&self, tokens: &[u32]) -> String {
        let words: Vec<String> = tokens
            .iter()
            .map(|&t| self.ctx.ext.word_string(&self.model.vocab, t))
            .collect();
        words.join(" ")
    }
}

/// Ranked keyphrases for one prepared sample.
pub fn beam_search<F: Real>(
    model: &Model<F>,
    ctx: &DecodeContext<F>,
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<(String, f64)>> {
    let mut stepper = ModelStepper::new(model, ctx);
    beam_search_core(&mut stepper, beam_size, max_len)
}
