//! Multi-granularity image noise filtering: the coarse image-text
//! matching score, the per-region correlation scores, and the sigmoid
//! gate over the image grid.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

// Needed for f64 math in no_std builds; shadowed by std in test builds.
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{Bound, Graph, Real, Var};

/// Scaled dot-product multi-head cross attention with a single query
/// vector. Returns the output projection of the concatenated heads.
pub fn multihead_cross_attention<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    prefix: &str,
    query: Var,
    keys: Var,
    values: Var,
    n_heads: usize,
) -> Result<Var> {
    let d = g.value(query).numel();
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!(
            "attention width {d} not divisible by {n_heads} heads"
        )));
    }
    let hd = d / n_heads;
    let p = |name: &str| bound.var(&format!("{prefix}.{name}"));

    let q = g.matmul(query, p("wq"))?;
    let q = g.add(q, p("bq"))?;
    let k = g.matmul(keys, p("wk"))?;
    let k = g.add_row_broadcast(k, p("bk"))?;
    let v = g.matmul(values, p("wv"))?;
    let v = g.add_row_broadcast(v, p("bv"))?;

    let scale = F::lit(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        let qi = g.slice_vec(q, i * hd, hd)?;
        let ki = g.slice_cols(k, i * hd, hd)?;
        let vi = g.slice_cols(v, i * hd, hd)?;
        let scores = g.matmul(ki, qi)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax(scores)?;
        heads.push(g.matmul(weights, vi)?);
    }
    let concat = g.concat_vec(&heads)?;
    let out = g.matmul(concat, p("wo"))?;
    g.add(out, p("bo"))
}

/// Cross-attended fusion H_c and the matching probability s_c.
pub struct MatchVars {
    pub h_c: Var,
    pub s_c: Var,
}

/// `s_c = sigmoid(fc(MultiHead(M_T, H_I, H_I)))` with the logit clamped
/// so s_c stays strictly inside (0, 1).
pub fn match_score<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    cfg: &ModelConfig,
    m_t: Var,
    h_i: Var,
) -> Result<MatchVars> {
    let h_c = multihead_cross_attention(g, bound, "nf.att", m_t, h_i, h_i, cfg.n_heads)?;
    let logit = g.matmul(h_c, bound.var("nf.fc.w"))?;
    let logit = g.add(logit, bound.var("nf.fc.b"))?;
    let clamp = F::lit(cfg.clamp_logit);
    let logit = g.clamp(logit, -clamp, clamp);
    let s_c = g.sigmoid(logit);
    Ok(MatchVars { h_c, s_c })
}

/// Region-text correlation scores A (length 49, cell l maps to grid
/// position (l/7, l%7)).
pub struct CorrelationVars {
    pub scores: Var,
}

/// Project text and regions into the shared space, take scaled dot
/// products, smooth uniformly with s_c when given, and recalibrate with
/// the correlation FFN (identity in bypass mode).
pub fn correlation_scores<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    cfg: &ModelConfig,
    m_t: Var,
    h_i: Var,
    s_c: Option<Var>,
) -> Result<CorrelationVars> {
    if let Some(s) = s_c {
        let sv = g.value(s).scalar_value();
        if !sv.is_finite() {
            return Err(Error::Numeric("matching score is not finite".into()));
        }
    }
    let text_shared = g.matmul(m_t, bound.var("nf.wt"))?;
    let regions_shared = g.matmul(h_i, bound.var("nf.wi"))?;
    let dots = g.matmul(regions_shared, text_shared)?;
    let scaled = g.scale(dots, F::lit(1.0 / (cfg.d2 as f64).sqrt()));
    let raw = match s_c {
        Some(s) => g.add_scalar_broadcast(scaled, s)?,
        None => scaled,
    };
    let scores = if cfg.corr_ffn_bypass {
        raw
    } else {
        let h1 = g.matmul(raw, bound.var("nf.ffn.w1"))?;
        let h1 = g.add(h1, bound.var("nf.ffn.b1"))?;
        let h1 = g.tanh(h1);
        let h2 = g.matmul(h1, bound.var("nf.ffn.w2"))?;
        g.add(h2, bound.var("nf.ffn.b2"))?
    };
    Ok(CorrelationVars { scores })
}

pub struct FilteredVars {
    pub h_i_hat: Var,
    pub gate: Var,
}

/// `Ĥ_I[r] = sigmoid(A_r) * H_I[r]` — soft per-region gating.
pub fn filter_image<F: Real>(g: &mut Graph<F>, scores: Var, h_i: Var) -> Result<FilteredVars> {
    let gate = g.sigmoid(scores);
    let h_i_hat = g.row_scale(h_i, gate)?;
    Ok(FilteredVars { h_i_hat, gate })
}

/// Deterministic text for the gold-keyphrase correlation target: phrases
/// sorted lexicographically, words space-joined.
pub fn gold_concat_tokens(keyphrases: &[Vec<String>]) -> Vec<String> {
    let mut sorted: Vec<&Vec<String>> = keyphrases.iter().collect();
    sorted.sort();
    sorted.into_iter().flatten().cloned().collect()
}
