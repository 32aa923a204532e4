//! Text sub-encoder: word + type embeddings into a bidirectional GRU,
//! exposing token states H_T and the max-pooled global vector M_T.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{EncodedInput, N_TYPES, UNK};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{Bound, Graph, Real, Tensor, Var};

/// Forward-pass mode. Training applies dropout from a seeded stream;
/// evaluation is deterministic.
pub enum Mode<'a> {
    Train { rng: &'a mut ChaCha8Rng },
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Inverted dropout as a constant mask; identity in eval mode or at rate 0.
pub fn dropout<F: Real>(g: &mut Graph<F>, x: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    let Mode::Train { rng } = mode else {
        return Ok(x);
    };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = g.value(x).shape.clone();
    let n = g.value(x).numel();
    let data: Vec<F> = (0..n)
        .map(|_| {
            if rng.gen::<f64>() < keep {
                F::lit(1.0 / keep)
            } else {
                F::zero()
            }
        })
        .collect();
    let mask = g.leaf(Tensor { shape, data });
    g.mul(x, mask)
}

/// Row i = word_embedding[token_ids[i]] + type_embedding[type_ids[i]].
/// Extended (OOV) ids map to the UNK embedding.
pub fn embed<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    cfg: &ModelConfig,
    input: &EncodedInput,
    vocab_size: usize,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    if input.token_ids.len() != input.type_ids.len() {
        return Err(Error::Shape {
            primitive: "embed",
            detail: format!(
                "token/type length mismatch: {} vs {}",
                input.token_ids.len(),
                input.type_ids.len()
            ),
        });
    }
    let word_ids: Vec<usize> = input
        .token_ids
        .iter()
        .map(|&id| {
            let id = id as usize;
            if id < vocab_size {
                id
            } else {
                UNK as usize
            }
        })
        .collect();
    let mut type_ids = Vec::with_capacity(input.type_ids.len());
    for &t in &input.type_ids {
        if (t as usize) >= N_TYPES {
            return Err(Error::Index(format!("type id {t} out of {N_TYPES}")));
        }
        type_ids.push(t as usize);
    }
    let words = g.gather_rows(bound.var("emb.word"), &word_ids)?;
    let types = g.gather_rows(bound.var("emb.type"), &type_ids)?;
    let summed = g.add(words, types)?;
    dropout(g, summed, cfg.dropout, mode)
}

/// One GRU update: `h' = (1-z)*h + z*n` with sigmoid gates and tanh
/// candidate. All parameters live under `prefix`.
pub fn gru_step<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    prefix: &str,
    x: Var,
    h: Var,
) -> Result<Var> {
    let p = |name: &str| bound.var(&format!("{prefix}.{name}"));
    let gate = |g: &mut Graph<F>, w: &str, u: &str, b: &str, hx: Var| -> Result<Var> {
        let xi = g.matmul(x, p(w))?;
        let hi = g.matmul(hx, p(u))?;
        let s = g.add(xi, hi)?;
        g.add(s, p(b))
    };
    let z = gate(g, "wz", "uz", "bz", h)?;
    let z = g.sigmoid(z);
    let r = gate(g, "wr", "ur", "br", h)?;
    let r = g.sigmoid(r);
    let rh = g.mul(r, h)?;
    let n = gate(g, "wn", "un", "bn", rh)?;
    let n = g.tanh(n);

    let one = {
        let len = g.value(h).numel();
        g.leaf(Tensor::full(&[len], F::one()))
    };
    let neg_z = g.scale(z, -F::one());
    let one_minus_z = g.add(one, neg_z)?;
    let keep = g.mul(one_minus_z, h)?;
    let update = g.mul(z, n)?;
    g.add(keep, update)
}

/// Token states plus the pooled global vector.
pub struct TextEncoding {
    /// |X_T| x d1 token states (forward and backward halves concatenated).
    pub h_t: Var,
    /// Column-wise max of H_T.
    pub m_t: Var,
}

/// Run the bidirectional GRU over an embedded sequence and max-pool.
pub fn encode_text<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    cfg: &ModelConfig,
    emb: Var,
    mode: &mut Mode<'_>,
) -> Result<TextEncoding> {
    let n = g.value(emb).rows();
    if n == 0 || !g.value(emb).is_matrix() {
        return Err(Error::EmptyInput("encode_text"));
    }
    let hd = cfg.d1 / 2;

    let xs: Vec<Var> = (0..n).map(|i| g.row_vec(emb, i)).collect::<Result<_>>()?;

    let mut fwd = Vec::with_capacity(n);
    let mut h = g.leaf(Tensor::zeros(&[hd]));
    for &x in &xs {
        h = gru_step(g, bound, "enc.fwd", x, h)?;
        fwd.push(h);
    }
    let mut bwd = vec_with_len(n);
    let mut h = g.leaf(Tensor::zeros(&[hd]));
    for i in (0..n).rev() {
        h = gru_step(g, bound, "enc.bwd", xs[i], h)?;
        bwd[i] = Some(h);
    }

    let rows: Vec<Var> = (0..n)
        .map(|i| g.concat_vec(&[fwd[i], bwd[i].expect("filled")]))
        .collect::<Result<_>>()?;
    let h_t = g.stack_rows(&rows)?;
    let h_t = dropout(g, h_t, cfg.dropout, mode)?;
    let m_t = g.maxpool_columns(h_t)?;
    Ok(TextEncoding { h_t, m_t })
}

fn vec_with_len(n: usize) -> Vec<Option<Var>> {
    let mut v = Vec::with_capacity(n);
    v.resize(n, None);
    v
}

/// Load pre-trained vectors into the word-embedding table; words missing
/// from the file keep their random initialization.
pub fn load_pretrained_rows<F: Real>(
    params: &mut crate::numerics::Params<F>,
    vocab: &crate::data::Vocabulary,
    entries: &[(String, Vec<f64>)],
    d_emb: usize,
) -> Result<usize> {
    let mut loaded = 0;
    for (word, values) in entries {
        if values.len() != d_emb {
            return Err(Error::Shape {
                primitive: "embedding_file",
                detail: format!("word {word}: {} values, expected {d_emb}", values.len()),
            });
        }
        if let Some(id) = vocab.id_of(word) {
            let table = params.get_mut("emb.word");
            let cols = table.shape[1];
            let off = id as usize * cols;
            for (j, &v) in values.iter().enumerate() {
                table.data[off + j] = F::lit(v);
            }
            loaded += 1;
        }
    }
    Ok(loaded)
}
