//! Two-stage training: the four losses, Adam with gradient clipping,
//! early stopping on validation metrics, and the finite-difference
//! gradient checker.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{MatchingSample, Triplet};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::image_encoder;
use crate::model::{EvalSample, Model};
use crate::numerics::{Graph, Params, Real, Tensor, Var};
use crate::text_encoder::Mode;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 50,
            patience: 5,
            seed: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("learning_rate, batch_size, max_epochs must be positive".into()));
        }
        if self.beta1 <= 0.0 || self.beta1 >= 1.0 || self.beta2 <= 0.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("adam betas must lie in (0,1)".into()));
        }
        if self.eps <= 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::Config("eps and grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_itm: Option<f64>,
    pub l_irtm: Option<f64>,
    pub l_cla: Option<f64>,
    pub l_gen: Option<f64>,
    pub val_l1: Option<f64>,
    pub val_f1: Option<f64>,
}

// ---------------------------------------------------------------------
// Loss builders
// ---------------------------------------------------------------------

/// `-log(s_c)` for matched pairs, `-log(1 - s_c)` otherwise.
pub fn loss_itm<F: Real>(g: &mut Graph<F>, s_c: Var, label: bool) -> Result<Var> {
    g.bce(s_c, label)
}

/// Mean squared divergence between the correlation scores and their
/// gold-keyphrase-driven target.
pub fn loss_irtm<F: Real>(g: &mut Graph<F>, a: Var, a_gt: Var) -> Result<Var> {
    g.mse(a, a_gt)
}

/// `-log(d_cla[gold] + 1e-12)`.
pub fn loss_cla<F: Real>(g: &mut Graph<F>, d_cla: Var, gold: usize) -> Result<Var> {
    g.nll(d_cla, gold)
}

/// Token-level cross entropy over the teacher-forced steps (EOS included).
pub fn loss_gen<F: Real>(g: &mut Graph<F>, steps: &[Var], gold: &[usize]) -> Result<Var> {
    if steps.len() != gold.len() {
        return Err(Error::Shape {
            primitive: "loss_gen",
            detail: format!("{} step distributions vs {} targets", steps.len(), gold.len()),
        });
    }
    if steps.is_empty() {
        return Err(Error::EmptyInput("loss_gen"));
    }
    let mut total = g.nll(steps[0], gold[0])?;
    for (s, &t) in steps.iter().zip(gold).skip(1) {
        let l = g.nll(*s, t)?;
        total = g.add(total, l)?;
    }
    Ok(total)
}

fn mean_scalar<F: Real>(g: &mut Graph<F>, vars: &[Var]) -> Result<Var> {
    let mut total = vars[0];
    for &v in &vars[1..] {
        total = g.add(total, v)?;
    }
    Ok(g.scale(total, F::lit(1.0 / vars.len() as f64)))
}

// ---------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------

/// Adam with global-norm gradient clipping.
pub struct Adam<F> {
    m: BTreeMap<String, Tensor<F>>,
    v: BTreeMap<String, Tensor<F>>,
    t: u64,
}

impl<F: Real> Default for Adam<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Adam<F> {
    pub fn new() -> Self {
        Adam {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut Params<F>,
        grads: &BTreeMap<String, Tensor<F>>,
        cfg: &TrainConfig,
    ) {
        let mut norm_sq = 0.0f64;
        for gt in grads.values() {
            for &gv in &gt.data {
                let v = gv.as_f64();
                norm_sq += v * v;
            }
        }
        let norm: f64 = Float::sqrt(norm_sq);
        let scale = if norm > cfg.grad_clip {
            F::lit(cfg.grad_clip / norm)
        } else {
            F::one()
        };

        self.t += 1;
        let t = self.t as i32;
        let b1 = F::lit(cfg.beta1);
        let b2 = F::lit(cfg.beta2);
        let lr = F::lit(cfg.learning_rate);
        let eps = F::lit(cfg.eps);
        let one = F::one();
        let corr1 = one - b1.powi(t);
        let corr2 = one - b2.powi(t);

        for (name, gt) in grads {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&gt.shape));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&gt.shape));
            for i in 0..gt.data.len() {
                let gv = gt.data[i] * scale;
                m.data[i] = b1 * m.data[i] + (one - b1) * gv;
                v.data[i] = b2 * v.data[i] + (one - b2) * gv * gv;
                let mhat = m.data[i] / corr1;
                let vhat = v.data[i] / corr2;
                p.data[i] = p.data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

// ---------------------------------------------------------------------
// Stage 1
// ---------------------------------------------------------------------

pub struct Stage1Data {
    pub train_triplets: Vec<Triplet>,
    pub train_matching: Vec<MatchingSample>,
    pub valid_triplets: Vec<Triplet>,
    pub valid_matching: Vec<MatchingSample>,
}

enum BatchKind {
    Triplets,
    Matching,
}

/// Deterministic proportional round-robin over the two batch streams.
fn interleave(n_triplet: usize, n_matching: usize) -> Vec<BatchKind> {
    let mut order = Vec::with_capacity(n_triplet + n_matching);
    let (mut taken_t, mut taken_m) = (0usize, 0usize);
    while taken_t < n_triplet || taken_m < n_matching {
        let ft = if n_triplet == 0 {
            f64::INFINITY
        } else {
            (taken_t as f64 + 1.0) / n_triplet as f64
        };
        let fm = if n_matching == 0 {
            f64::INFINITY
        } else {
            (taken_m as f64 + 1.0) / n_matching as f64
        };
        if ft <= fm {
            order.push(BatchKind::Triplets);
            taken_t += 1;
        } else {
            order.push(BatchKind::Matching);
            taken_m += 1;
        }
    }
    order
}

struct Tally {
    sum: f64,
    count: usize,
}

impl Tally {
    fn new() -> Self {
        Tally { sum: 0.0, count: 0 }
    }
    fn add(&mut self, value: f64, weight: usize) {
        self.sum += value * weight as f64;
        self.count += weight;
    }
    fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Pre-train encoder, noise filter, and classifier by minimizing
/// `L1 = L_itm + L_irtm + L_cla`. Triplet and matching batches interleave
/// proportionally; early stopping watches validation L1.
pub fn train_stage1<F: Real>(
    model: &mut Model<F>,
    data: &Stage1Data,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint<F>> {
    cfg.validate()?;
    if data.train_triplets.is_empty() {
        return Err(Error::Config("stage 1 needs a non-empty triplet set".into()));
    }
    let abl = model.config.ablation;
    if data.train_matching.is_empty() && abl.use_itm_loss() {
        return Err(Error::Config("stage 1 needs a non-empty matching set".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new();
    let mut best_val = f64::INFINITY;
    let mut best_params = model.params.clone();
    let mut stale = 0usize;
    let mut history = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let mut t_idx: Vec<usize> = (0..data.train_triplets.len()).collect();
        t_idx.shuffle(&mut rng);
        let mut m_idx: Vec<usize> = (0..data.train_matching.len()).collect();
        m_idx.shuffle(&mut rng);

        let t_batches: Vec<&[usize]> = t_idx.chunks(cfg.batch_size).collect();
        let m_batches: Vec<&[usize]> = if abl.use_itm_loss() {
            m_idx.chunks(cfg.batch_size).collect()
        } else {
            Vec::new()
        };

        let (mut itm_tally, mut irtm_tally, mut cla_tally) = (Tally::new(), Tally::new(), Tally::new());
        let (mut next_t, mut next_m) = (0usize, 0usize);
        for kind in interleave(t_batches.len(), m_batches.len()) {
            match kind {
                BatchKind::Triplets => {
                    let batch = t_batches[next_t];
                    next_t += 1;
                    let mut g = Graph::new();
                    let bound = g.bind(&model.params);
                    let mut irtm_terms = Vec::new();
                    let mut cla_terms = Vec::new();
                    for &i in batch {
                        let mut mode = Mode::Train { rng: &mut rng };
                        let losses = model.triplet_stage1_losses(
                            &mut g,
                            &bound,
                            &data.train_triplets[i],
                            &mut mode,
                        )?;
                        if let Some(l) = losses.irtm {
                            irtm_terms.push(l);
                        }
                        if let Some(l) = losses.cla {
                            cla_terms.push(l);
                        }
                    }
                    let mut parts = Vec::new();
                    if !irtm_terms.is_empty() {
                        let m = mean_scalar(&mut g, &irtm_terms)?;
                        irtm_tally.add(g.value(m).scalar_value().as_f64(), irtm_terms.len());
                        parts.push(m);
                    }
                    if !cla_terms.is_empty() {
                        let m = mean_scalar(&mut g, &cla_terms)?;
                        cla_tally.add(g.value(m).scalar_value().as_f64(), cla_terms.len());
                        parts.push(m);
                    }
                    if parts.is_empty() {
                        continue;
                    }
                    let mut loss = parts[0];
                    for &p in &parts[1..] {
                        loss = g.add(loss, p)?;
                    }
                    let grads = g.backward(loss)?;
                    let by_name = bound.grads_by_name(&grads);
                    adam.step(&mut model.params, &by_name, cfg);
                }
                BatchKind::Matching => {
                    let batch = m_batches[next_m];
                    next_m += 1;
                    let mut g = Graph::new();
                    let bound = g.bind(&model.params);
                    let mut terms = Vec::new();
                    for &i in batch {
                        let mut mode = Mode::Train { rng: &mut rng };
                        terms.push(model.matching_loss(
                            &mut g,
                            &bound,
                            &data.train_matching[i],
                            &mut mode,
                        )?);
                    }
                    let loss = mean_scalar(&mut g, &terms)?;
                    itm_tally.add(g.value(loss).scalar_value().as_f64(), terms.len());
                    let grads = g.backward(loss)?;
                    let by_name = bound.grads_by_name(&grads);
                    adam.step(&mut model.params, &by_name, cfg);
                }
            }
        }

        let val_l1 = validation_l1(model, data)?;
        let record = EpochRecord {
            epoch,
            l_itm: itm_tally.mean(),
            l_irtm: irtm_tally.mean(),
            l_cla: cla_tally.mean(),
            l_gen: None,
            val_l1: Some(val_l1),
            val_f1: None,
        };
        on_epoch(&record);
        history.push(record);

        if val_l1 < best_val {
            best_val = val_l1;
            best_params = model.params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }

    model.params = best_params;
    model.stage = 1;
    Ok(Checkpoint::from_model(model, cfg.clone(), history))
}

/// Validation L1: the sum of the enabled loss terms, each averaged over
/// its validation set, computed without dropout.
pub fn validation_l1<F: Real>(model: &Model<F>, data: &Stage1Data) -> Result<f64> {
    let abl = model.config.ablation;
    let mut total = 0.0;

    if abl.use_itm_loss() && !data.valid_matching.is_empty() {
        let mut sum = 0.0;
        for sample in &data.valid_matching {
            let mut g = Graph::new();
            let bound = g.bind(&model.params);
            let l = model.matching_loss(&mut g, &bound, sample, &mut Mode::Eval)?;
            sum += g.value(l).scalar_value().as_f64();
        }
        total += sum / data.valid_matching.len() as f64;
    }

    let mut irtm = Tally::new();
    let mut cla = Tally::new();
    for triplet in &data.valid_triplets {
        let mut g = Graph::new();
        let bound = g.bind(&model.params);
        let losses = model.triplet_stage1_losses(&mut g, &bound, triplet, &mut Mode::Eval)?;
        if let Some(l) = losses.irtm {
            irtm.add(g.value(l).scalar_value().as_f64(), 1);
        }
        if let Some(l) = losses.cla {
            cla.add(g.value(l).scalar_value().as_f64(), 1);
        }
    }
    if let Some(m) = irtm.mean() {
        total += m;
    }
    if let Some(m) = cla.mean() {
        total += m;
    }
    Ok(total)
}

// ---------------------------------------------------------------------
// Stage 2
// ---------------------------------------------------------------------

pub struct Stage2Data {
    pub train_triplets: Vec<Triplet>,
    pub valid: Vec<EvalSample>,
}

/// Fine-tune everything on the generation loss; early stopping watches
/// validation F1@1 decoded with beam search.
pub fn train_stage2<F: Real>(
    model: &mut Model<F>,
    data: &Stage2Data,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint<F>> {
    cfg.validate()?;
    if model.stage < 1 {
        return Err(Error::StageOrder(
            "stage 2 requires a stage-1 checkpoint".into(),
        ));
    }
    if data.train_triplets.is_empty() || data.valid.is_empty() {
        return Err(Error::Config("stage 2 needs non-empty train and validation sets".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_params = model.params.clone();
    let mut stale = 0usize;
    let mut history = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let mut idx: Vec<usize> = (0..data.train_triplets.len()).collect();
        idx.shuffle(&mut rng);

        let mut gen_tally = Tally::new();
        for batch in idx.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let bound = g.bind(&model.params);
            let mut terms = Vec::new();
            for &i in batch {
                let mut mode = Mode::Train { rng: &mut rng };
                terms.push(model.generation_loss(&mut g, &bound, &data.train_triplets[i], &mut mode)?);
            }
            let loss = mean_scalar(&mut g, &terms)?;
            gen_tally.add(g.value(loss).scalar_value().as_f64(), terms.len());
            let grads = g.backward(loss)?;
            let by_name = bound.grads_by_name(&grads);
            adam.step(&mut model.params, &by_name, cfg);
        }

        let report = evaluation::decode_and_evaluate(
            model,
            &data.valid,
            model.config.beam_size,
            model.config.max_target_len,
        )?;
        let record = EpochRecord {
            epoch,
            l_itm: None,
            l_irtm: None,
            l_cla: None,
            l_gen: gen_tally.mean(),
            val_l1: None,
            val_f1: Some(report.f1_at_1),
        };
        on_epoch(&record);
        history.push(record);

        if report.f1_at_1 > best_f1 {
            best_f1 = report.f1_at_1;
            best_params = model.params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }

    model.params = best_params;
    model.stage = 2;
    Ok(Checkpoint::from_model(model, cfg.clone(), history))
}

// ---------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSelector {
    Itm,
    Irtm,
    Cla,
    Gen,
    SumAll,
    /// project_image into a fixed quadratic loss; exact for central
    /// differences up to rounding.
    LinearProbe,
}

impl LossSelector {
    pub fn name(&self) -> &'static str {
        match self {
            LossSelector::Itm => "itm",
            LossSelector::Irtm => "irtm",
            LossSelector::Cla => "cla",
            LossSelector::Gen => "gen",
            LossSelector::SumAll => "sum",
            LossSelector::LinearProbe => "linear_probe",
        }
    }
}

pub struct GradCheckBatch {
    pub triplets: Vec<Triplet>,
    pub matching: Vec<MatchingSample>,
}

#[derive(Debug, Clone)]
pub struct ParamGradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub selector: &'static str,
    pub per_param: Vec<ParamGradReport>,
    pub max_rel_err: f64,
    pub total_checked: usize,
}

fn selector_loss<F: Real>(
    model: &Model<F>,
    params: &Params<F>,
    batch: &GradCheckBatch,
    selector: LossSelector,
) -> Result<(Graph<F>, crate::numerics::Bound, Var)> {
    let mut g = Graph::new();
    let bound = g.bind(params);
    let mut mode = Mode::Eval;
    let mut parts: Vec<Var> = Vec::new();

    let want = |s: LossSelector| selector == s || selector == LossSelector::SumAll;

    if selector == LossSelector::LinearProbe {
        let raw = crate::model::features_tensor::<F>(
            &batch
                .triplets
                .first()
                .ok_or_else(|| Error::Config("linear probe needs one triplet".into()))?
                .image_features,
        );
        let h_i = image_encoder::project_image(&mut g, &bound, &raw)?;
        let d1 = model.config.d1;
        let mut rng = ChaCha8Rng::seed_from_u64(424242);
        let target = g.leaf(Tensor::uniform(
            &[crate::data::GRID_REGIONS, d1],
            -0.5,
            0.5,
            &mut rng,
        ));
        let loss = g.mse(h_i, target)?;
        return Ok((g, bound, loss));
    }

    if want(LossSelector::Itm) {
        let mut terms = Vec::new();
        for sample in &batch.matching {
            terms.push(model.matching_loss(&mut g, &bound, sample, &mut mode)?);
        }
        if !terms.is_empty() {
            parts.push(mean_scalar(&mut g, &terms)?);
        }
    }
    if want(LossSelector::Irtm) || want(LossSelector::Cla) {
        let mut irtm_terms = Vec::new();
        let mut cla_terms = Vec::new();
        for triplet in &batch.triplets {
            let losses = model.triplet_stage1_losses(&mut g, &bound, triplet, &mut mode)?;
            if let Some(l) = losses.irtm {
                irtm_terms.push(l);
            }
            if let Some(l) = losses.cla {
                cla_terms.push(l);
            }
        }
        if want(LossSelector::Irtm) && !irtm_terms.is_empty() {
            parts.push(mean_scalar(&mut g, &irtm_terms)?);
        }
        if want(LossSelector::Cla) && !cla_terms.is_empty() {
            parts.push(mean_scalar(&mut g, &cla_terms)?);
        }
    }
    if want(LossSelector::Gen) {
        let mut terms = Vec::new();
        for triplet in &batch.triplets {
            terms.push(model.generation_loss(&mut g, &bound, triplet, &mut mode)?);
        }
        if !terms.is_empty() {
            parts.push(mean_scalar(&mut g, &terms)?);
        }
    }
    if parts.is_empty() {
        return Err(Error::Config("selected loss produced no terms".into()));
    }
    let mut loss = parts[0];
    for &p in &parts[1..] {
        loss = g.add(loss, p)?;
    }
    Ok((g, bound, loss))
}

/// Compare analytic gradients against central finite differences
/// `(f(t+eps) - f(t-eps)) / 2eps` for every parameter element, or a
/// seeded random subsample once the total exceeds `max_elements`.
/// Relative error is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F: Real>(
    model: &Model<F>,
    batch: &GradCheckBatch,
    selector: LossSelector,
    eps: f64,
    max_elements: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(Error::Config("grad_check eps must be > 0".into()));
    }

    let (g, bound, loss) = selector_loss(model, &model.params, batch, selector)?;
    let grads = g.backward(loss)?;
    let analytic = bound.grads_by_name(&grads);
    for (name, t) in &analytic {
        if !t.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in {name}")));
        }
    }

    let mut slots: Vec<(String, usize)> = Vec::new();
    for (name, t) in model.params.iter() {
        for i in 0..t.numel() {
            slots.push((name.clone(), i));
        }
    }
    if slots.len() > max_elements {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        slots.shuffle(&mut rng);
        slots.truncate(max_elements);
        slots.sort();
    }

    let mut working = model.params.clone();
    let mut per_param: BTreeMap<String, ParamGradReport> = BTreeMap::new();
    for (name, idx) in &slots {
        let original = working.get(name).data[*idx];
        working.get_mut(name).data[*idx] = original + F::lit(eps);
        let (gp, _, lp) = selector_loss(model, &working, batch, selector)?;
        let f_plus = gp.value(lp).scalar_value().as_f64();
        working.get_mut(name).data[*idx] = original - F::lit(eps);
        let (gm, _, lm) = selector_loss(model, &working, batch, selector)?;
        let f_minus = gm.value(lm).scalar_value().as_f64();
        working.get_mut(name).data[*idx] = original;

        let numeric = (f_plus - f_minus) / (2.0 * eps);
        let a = analytic
            .get(name)
            .map(|t| t.data[*idx].as_f64())
            .unwrap_or(0.0);
        let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
        let entry = per_param.entry(name.clone()).or_insert(ParamGradReport {
            name: name.clone(),
            max_rel_err: 0.0,
            checked: 0,
        });
        entry.max_rel_err = entry.max_rel_err.max(rel);
        entry.checked += 1;
    }

    let per_param: Vec<ParamGradReport> = per_param.into_values().collect();
    let max_rel_err = per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    let total_checked = per_param.iter().map(|p| p.checked).sum();
    Ok(GradCheckReport {
        selector: selector.name(),
        per_param,
        max_rel_err,
        total_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn itm_loss_analytic_constants() {
        let mut g = Graph::<f64>::new();
        let half = g.leaf(Tensor::scalar(0.5));
        for label in [true, false] {
            let l = loss_itm(&mut g, half, label).unwrap();
            assert!((g.value(l).scalar_value() - core::f64::consts::LN_2).abs() < 1e-12);
        }
        let near_one = g.leaf(Tensor::scalar(1.0 - 1e-12));
        let l = loss_itm(&mut g, near_one, true).unwrap();
        assert!(g.value(l).scalar_value() < 1e-9);
        let p8 = g.leaf(Tensor::scalar(0.8));
        let l = loss_itm(&mut g, p8, false).unwrap();
        assert!((g.value(l).scalar_value() - 1.6094379124341003).abs() < 1e-12);
    }

    #[test]
    fn irtm_loss_mean_square_semantics() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::vector(vec![0.4; 49]));
        let same = g.leaf(Tensor::vector(vec![0.4; 49]));
        let l = loss_irtm(&mut g, a, same).unwrap();
        assert_eq!(g.value(l).scalar_value(), 0.0);

        let shifted = g.leaf(Tensor::vector(vec![0.5; 49]));
        let l = loss_irtm(&mut g, a, shifted).unwrap();
        assert!((g.value(l).scalar_value() - 0.01).abs() < 1e-14);

        // quadratic homogeneity: scaling both sides by 2 scales the loss by 4
        let a2 = g.leaf(Tensor::vector(vec![0.8; 49]));
        let s2 = g.leaf(Tensor::vector(vec![1.0; 49]));
        let l2 = loss_irtm(&mut g, a2, s2).unwrap();
        assert!((g.value(l2).scalar_value() - 0.04).abs() < 1e-14);
    }

    #[test]
    fn cla_loss_analytic_constants() {
        let mut g = Graph::<f64>::new();
        let sure = g.leaf(Tensor::vector(vec![1.0, 0.0]));
        let l = loss_cla(&mut g, sure, 0).unwrap();
        assert!(g.value(l).scalar_value().abs() < 1e-9);

        let uniform4 = g.leaf(Tensor::vector(vec![0.25; 4]));
        let l = loss_cla(&mut g, uniform4, 2).unwrap();
        assert!((g.value(l).scalar_value() - (4.0f64).ln()).abs() < 1e-9);

        let ten = g.leaf(Tensor::vector(vec![0.25, 0.75 / 9.0, 0.75 / 9.0, 0.75 / 9.0, 0.75 / 9.0, 0.75 / 9.0, 0.75 / 9.0, 0.75 / 9.0, 0.75 / 9.0, 0.75 / 9.0]));
        let l = loss_cla(&mut g, ten, 0).unwrap();
        assert!((g.value(l).scalar_value() - (1.0f64 / 0.25).ln()).abs() < 1e-9);
    }

    #[test]
    fn gen_loss_analytic_constants() {
        let mut g = Graph::<f64>::new();
        let certain = g.leaf(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let l = loss_gen(&mut g, &[certain, certain], &[0, 0]).unwrap();
        assert!(g.value(l).scalar_value().abs() < 1e-9);

        let half = g.leaf(Tensor::vector(vec![0.5, 0.5]));
        let l = loss_gen(&mut g, &[half, half], &[0, 1]).unwrap();
        assert!((g.value(l).scalar_value() - 2.0 * core::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn gen_loss_rejects_length_mismatch() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::vector(vec![0.5, 0.5]));
        assert!(matches!(
            loss_gen(&mut g, &[p], &[0, 1]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn interleave_is_proportional() {
        let order = interleave(4, 2);
        let kinds: Vec<bool> = order
            .iter()
            .map(|k| matches!(k, BatchKind::Triplets))
            .collect();
        assert_eq!(kinds.iter().filter(|&&t| t).count(), 4);
        assert_eq!(kinds.len(), 6);
        // triplets never starve: two triplet batches per matching batch
        assert_eq!(kinds, vec![true, true, false, true, true, false]);
    }

    #[test]
    fn adam_moves_params_toward_minimum() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut params = Params::<f64>::new();
        params.insert("x", Tensor::vector(vec![3.0]));
        let mut adam = Adam::new();
        for _ in 0..200 {
            let mut g = Graph::new();
            let bound = g.bind(&params);
            let x = bound.var("x");
            let sq = g.mul(x, x).unwrap();
            let ones = g.leaf(Tensor::vector(vec![1.0]));
            let loss = g.matmul(sq, ones).unwrap();
            let grads = g.backward(loss).unwrap();
            let by_name = bound.grads_by_name(&grads);
            adam.step(&mut params, &by_name, &cfg);
        }
        assert!(params.get("x").data[0].abs() < 0.05);
    }

    #[test]
    fn adam_is_deterministic() {
        let cfg = TrainConfig::default();
        let run = || {
            let mut params = Params::<f64>::new();
            params.insert("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
            let mut adam = Adam::new();
            for _ in 0..20 {
                let mut g = Graph::new();
                let bound = g.bind(&params);
                let w = bound.var("w");
                let sq = g.mul(w, w).unwrap();
                let ones = g.leaf(Tensor::vector(vec![1.0; 3]));
                let loss = g.matmul(sq, ones).unwrap();
                let grads = g.backward(loss).unwrap();
                let by_name = bound.grads_by_name(&grads);
                adam.step(&mut params, &by_name, &cfg);
            }
            params.get("w").data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_check_rejects_zero_eps() {
        use crate::classifier::LabelSet;
        use crate::data::{ImageFeatures, MultiModalSample, Vocabulary};
        use crate::model::ModelConfig;
        use alloc::string::ToString;

        let samples = [MultiModalSample::new(
            "a b",
            "",
            &[],
            ImageFeatures::zeros(),
            &["k1".to_string(), "k2".to_string()],
        )];
        let vocab = Vocabulary::build(&samples, 10).unwrap();
        let labels = LabelSet::build(&samples);
        let cfg = ModelConfig {
            d_emb: 4,
            d1: 6,
            d2: 4,
            n_heads: 2,
            dropout: 0.0,
            ..Default::default()
        };
        let model = Model::<f64>::new(cfg, vocab, labels, 5).unwrap();
        let triplets = model.triplets_of(&samples[0]).unwrap();
        let batch = GradCheckBatch {
            triplets,
            matching: Vec::new(),
        };
        assert!(matches!(
            grad_check(&model, &batch, LossSelector::Cla, 0.0, 100, 1),
            Err(Error::Config(_))
        ));
    }
}
