//! Versioned binary checkpoint: named-parameter table with shapes and
//! raw 32/64-bit payloads, plus the vocabulary, label set, configuration,
//! stage tag, and validation history. Round-trips bit-exactly.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::format;

use crate::classifier::LabelSet;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Ablation, Model, ModelConfig};
use crate::numerics::{Params, Real, Tensor};
use crate::training::{EpochRecord, TrainConfig};

const MAGIC: &[u8; 4] = b"MKPC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub stage: u8,
    pub params: Params<F>,
    pub vocab: Vocabulary,
    pub labels: LabelSet,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub history: Vec<EpochRecord>,
}

impl<F: Real> Checkpoint<F> {
    pub fn from_model(model: &Model<F>, train_config: TrainConfig, history: Vec<EpochRecord>) -> Self {
        Checkpoint {
            stage: model.stage,
            params: model.params.clone(),
            vocab: model.vocab.clone(),
            labels: model.labels.clone(),
            model_config: model.config.clone(),
            train_config,
            history,
        }
    }

    pub fn into_model(self) -> Model<F> {
        Model {
            config: self.model_config,
            params: self.params,
            vocab: self.vocab,
            labels: self.labels,
            stage: self.stage,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u8(core::mem::size_of::<F>() as u8);
        w.u8(self.stage);

        let mc = &self.model_config;
        for v in [
            mc.d_emb, mc.d1, mc.d2, mc.n_heads, mc.d_corr_ffn, mc.max_input_len,
            mc.max_target_len, mc.top_k, mc.beam_size,
        ] {
            w.u64(v as u64);
        }
        for v in [mc.lambda_c, mc.dropout, mc.clamp_logit, mc.layernorm_eps] {
            w.f64(v);
        }
        w.u8(mc.corr_ffn_bypass as u8);
        let a = &mc.ablation;
        for flag in [
            a.no_itm_loss, a.no_irtm_loss, a.no_cla_loss, a.no_entities,
            a.no_ocr, a.no_itm_match, a.no_region_match, a.no_filter_module,
        ] {
            w.u8(flag as u8);
        }

        let tc = &self.train_config;
        w.f64(tc.learning_rate);
        for v in [tc.batch_size, tc.max_epochs, tc.patience] {
            w.u64(v as u64);
        }
        w.u64(tc.seed);
        for v in [tc.beta1, tc.beta2, tc.eps, tc.grad_clip] {
            w.f64(v);
        }

        w.u64(self.vocab.size() as u64);
        for word in self.vocab.words() {
            w.string(word);
        }
        w.u64(self.labels.len() as u64);
        for phrase in self.labels.phrases() {
            w.string(phrase);
        }

        w.u64(self.history.len() as u64);
        for rec in &self.history {
            w.u64(rec.epoch as u64);
            for slot in [rec.l_itm, rec.l_irtm, rec.l_cla, rec.l_gen, rec.val_l1, rec.val_f1] {
                w.opt_f64(slot);
            }
        }

        w.u64(self.params.iter().count() as u64);
        for (name, t) in self.params.iter() {
            w.string(name);
            w.u8(t.shape.len() as u8);
            for &d in &t.shape {
                w.u64(d as u64);
            }
            w.u64(t.numel() as u64);
            for &v in &t.data {
                if core::mem::size_of::<F>() == 4 {
                    w.bytes(&(v.as_f64() as f32).to_le_bytes());
                } else {
                    w.bytes(&v.as_f64().to_le_bytes());
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let precision = r.u8()?;
        if precision != 4 && precision != 8 {
            return Err(Error::Checkpoint(format!("bad precision tag {precision}")));
        }
        let stage = r.u8()?;

        let mut dims = [0usize; 9];
        for d in dims.iter_mut() {
            *d = r.u64()? as usize;
        }
        let mut floats = [0f64; 4];
        for f in floats.iter_mut() {
            *f = r.f64()?;
        }
        let corr_ffn_bypass = r.u8()? != 0;
        let mut flags = [false; 8];
        for f in flags.iter_mut() {
            *f = r.u8()? != 0;
        }
        let model_config = ModelConfig {
            d_emb: dims[0],
            d1: dims[1],
            d2: dims[2],
            n_heads: dims[3],
            d_corr_ffn: dims[4],
            max_input_len: dims[5],
            max_target_len: dims[6],
            top_k: dims[7],
            beam_size: dims[8],
            lambda_c: floats[0],
            dropout: floats[1],
            clamp_logit: floats[2],
            layernorm_eps: floats[3],
            corr_ffn_bypass,
            ablation: Ablation {
                no_itm_loss: flags[0],
                no_irtm_loss: flags[1],
                no_cla_loss: flags[2],
                no_entities: flags[3],
                no_ocr: flags[4],
                no_itm_match: flags[5],
                no_region_match: flags[6],
                no_filter_module: flags[7],
            },
        };

        let learning_rate = r.f64()?;
        let batch_size = r.u64()? as usize;
        let max_epochs = r.u64()? as usize;
        let patience = r.u64()? as usize;
        let seed = r.u64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let grad_clip = r.f64()?;
        let train_config = TrainConfig {
            learning_rate,
            batch_size,
            max_epochs,
            patience,
            seed,
            beta1,
            beta2,
            eps,
            grad_clip,
        };

        let n_words = r.u64()? as usize;
        let mut words = Vec::with_capacity(n_words);
        for _ in 0..n_words {
            words.push(r.string()?);
        }
        let vocab = Vocabulary::from_words(words)?;

        let n_labels = r.u64()? as usize;
        let mut phrases = Vec::with_capacity(n_labels);
        for _ in 0..n_labels {
            phrases.push(r.string()?);
        }
        let labels = LabelSet::from_phrases(phrases);

        let n_hist = r.u64()? as usize;
        let mut history = Vec::with_capacity(n_hist);
        for _ in 0..n_hist {
            let epoch = r.u64()? as usize;
            let mut slots = [None; 6];
            for s in slots.iter_mut() {
                *s = r.opt_f64()?;
            }
            history.push(EpochRecord {
                epoch,
                l_itm: slots[0],
                l_irtm: slots[1],
                l_cla: slots[2],
                l_gen: slots[3],
                val_l1: slots[4],
                val_f1: slots[5],
            });
        }

        let n_params = r.u64()? as usize;
        let mut params = Params::new();
        for _ in 0..n_params {
            let name = r.string()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = r.u64()? as usize;
            if shape.iter().product::<usize>() != numel {
                return Err(Error::Checkpoint(format!("shape/count mismatch in {name}")));
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let v = if precision == 4 {
                    let b = r.take(4)?;
                    f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64
                } else {
                    let b = r.take(8)?;
                    f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]])
                };
                data.push(F::lit(v));
            }
            params.insert(&name, Tensor { shape, data });
        }

        Ok(Checkpoint {
            stage,
            params,
            vocab,
            labels,
            model_config,
            train_config,
            history,
        })
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn opt_f64(&mut self, v: Option<f64>) {
        match v {
            Some(x) => {
                self.u8(1);
                self.f64(x);
            }
            None => self.u8(0),
        }
    }
    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn finish(self) -> Vec<u8> {
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
    fn opt_f64(&mut self) -> Result<Option<f64>> {
        if self.u8()? == 1 {
            Ok(Some(self.f64()?))
        } else {
            Ok(None)
        }
    }
    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Checkpoint("bad utf8".into()))
    }
}
