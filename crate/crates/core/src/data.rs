//! Dataset model: samples, vocabulary, the concatenated multimodal text
//! input, and One2One replication into training triplets.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::error::{Error, Result};

/// 7x7 grid of region features, 512 values per region, row-major.
pub const GRID_SIDE: usize = 7;
pub const GRID_REGIONS: usize = GRID_SIDE * GRID_SIDE;
pub const REGION_DIM: usize = 512;

/// Default vocabulary cap.
pub const DEFAULT_VOCAB_SIZE: usize = 45_000;
/// Default input truncation length.
pub const DEFAULT_MAX_INPUT_LEN: usize = 200;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SEQ_DELIM: u32 = 4;
pub const N_SPECIALS: usize = 5;

pub const SPECIAL_WORDS: [&str; N_SPECIALS] = ["<pad>", "<unk>", "<bos>", "<eos>", "<seq>"];

/// Segment type ids of the concatenated input.
pub const TYPE_SRC: u8 = 0;
pub const TYPE_OCR: u8 = 1;
pub const TYPE_ENT: u8 = 2;
pub const N_TYPES: usize = 3;

/// Region feature grid, exactly 49x512 finite f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    data: Vec<f32>,
}

impl ImageFeatures {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.len() != GRID_REGIONS * REGION_DIM {
            return Err(Error::Shape {
                primitive: "image_features",
                detail: format!(
                    "expected {}x{} values, got {}",
                    GRID_REGIONS,
                    REGION_DIM,
                    data.len()
                ),
            });
        }
        Ok(ImageFeatures { data })
    }

    pub fn zeros() -> Self {
        ImageFeatures {
            data: vec![0.0; GRID_REGIONS * REGION_DIM],
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn region(&self, r: usize) -> &[f32] {
        &self.data[r * REGION_DIM..(r + 1) * REGION_DIM]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One post: source text, OCR text, visual entities, grid features, and
/// the gold keyphrase set (empty in prediction-only data).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalSample {
    pub source_text: Vec<String>,
    pub ocr_text: Vec<String>,
    pub entities: Vec<Vec<String>>,
    pub image_features: Arc<ImageFeatures>,
    /// Sorted, deduplicated keyphrases, each a word sequence.
    pub keyphrases: Vec<Vec<String>>,
}

impl MultiModalSample {
    pub fn new(
        source_text: &str,
        ocr_text: &str,
        entities: &[String],
        image_features: ImageFeatures,
        keyphrases: &[String],
    ) -> Self {
        let mut kps: Vec<Vec<String>> = keyphrases
            .iter()
            .map(|k| normalize_keyphrase(k))
            .filter(|k| !k.is_empty())
            .collect();
        kps.sort();
        kps.dedup();
        MultiModalSample {
            source_text: tokenize(source_text),
            ocr_text: tokenize(ocr_text),
            entities: entities.iter().map(|e| tokenize(e)).collect(),
            image_features: Arc::new(image_features),
            keyphrases: kps,
        }
    }

    pub fn keyphrase_strings(&self) -> Vec<String> {
        self.keyphrases.iter().map(|k| k.join(" ")).collect()
    }
}

/// A text/image pair labelled for image-text matching (the raw file form).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingRecord {
    pub source_text: Vec<String>,
    pub ocr_text: Vec<String>,
    pub entities: Vec<Vec<String>>,
    pub image_features: Arc<ImageFeatures>,
    pub label: bool,
}

/// Lowercase whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Keyphrase normalization: strip a leading '#', lowercase, split.
pub fn normalize_keyphrase(phrase: &str) -> Vec<String> {
    let trimmed = phrase.trim();
    let stripped = trimmed.strip_prefix('#').unwrap_or(trimmed);
    tokenize(stripped)
}

/// Word/id mapping with the five special tokens at ids 0..5.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    id_of: BTreeMap<String, u32>,
    word_of: Vec<String>,
}

impl Vocabulary {
    /// Build from the `max_size` most frequent words over all text fields
    /// (source, ocr, entities, keyphrases). Frequency ties break
    /// lexicographically ascending. Specials never count against the cap.
    pub fn build(corpus: &[MultiModalSample], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if max_size == 0 {
            return Err(Error::Config("vocabulary max_size must be >= 1".into()));
        }
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for sample in corpus {
            let fields = sample
                .source_text
                .iter()
                .chain(sample.ocr_text.iter())
                .chain(sample.entities.iter().flatten())
                .chain(sample.keyphrases.iter().flatten());
            for w in fields {
                *counts.entry(w.as_str()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        // BTreeMap iteration is already lexicographic, so a stable sort by
        // descending count preserves the ascending tie-break.
        ranked.sort_by(|a, b| b.1.cmp(&a.1));
        ranked.truncate(max_size);

        let mut word_of: Vec<String> = SPECIAL_WORDS.iter().map(|s| s.to_string()).collect();
        word_of.extend(ranked.into_iter().map(|(w, _)| w.to_string()));
        let id_of = word_of
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Ok(Vocabulary { id_of, word_of })
    }

    /// Total entries including specials.
    pub fn size(&self) -> usize {
        self.word_of.len()
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        self.id_of.get(word).copied()
    }

    pub fn word_of(&self, id: u32) -> Option<&str> {
        self.word_of.get(id as usize).map(|s| s.as_str())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.id_of.contains_key(word)
    }

    pub fn words(&self) -> &[String] {
        &self.word_of
    }

    /// Rebuild from an id-ordered word list (checkpoint loading).
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < N_SPECIALS {
            return Err(Error::Checkpoint("vocabulary too small".into()));
        }
        for (i, s) in SPECIAL_WORDS.iter().enumerate() {
            if words[i] != *s {
                return Err(Error::Checkpoint(format!(
                    "special token {i} is {} not {s}",
                    words[i]
                )));
            }
        }
        let id_of = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Ok(Vocabulary { id_of, word_of: words })
    }
}

/// Which segments participate in the concatenated input. Ablations drop
/// the OCR or entity segment together with its delimiter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodeOptions {
    pub max_len: usize,
    pub use_ocr: bool,
    pub use_entities: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            max_len: DEFAULT_MAX_INPUT_LEN,
            use_ocr: true,
            use_entities: true,
        }
    }
}

/// The encoded concatenated input `X_S <seq> X_O <seq> X_E`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub token_ids: Vec<u32>,
    pub type_ids: Vec<u8>,
    /// Out-of-vocabulary words in order of first occurrence; word i has
    /// extended id `vocab.size() + i`.
    pub oov_words: Vec<String>,
    /// Per-position id over the extended space (vocab id, or extended id
    /// for OOV positions). Same length as `token_ids`.
    pub ext_token_ids: Vec<u32>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Assemble and encode the concatenated text input for one sample.
/// Each delimiter takes the type of the segment it opens; the sequence is
/// truncated at the tail to `max_len` tokens.
pub fn concat_input(
    sample: &MultiModalSample,
    vocab: &Vocabulary,
    opts: EncodeOptions,
) -> Result<EncodedInput> {
    if opts.max_len < 3 {
        return Err(Error::Config(format!(
            "max_len must be >= 3, got {}",
            opts.max_len
        )));
    }
    let mut words: Vec<(&str, u8)> = Vec::new();
    for w in &sample.source_text {
        words.push((w, TYPE_SRC));
    }
    if opts.use_ocr {
        words.push((SPECIAL_WORDS[SEQ_DELIM as usize], TYPE_OCR));
        for w in &sample.ocr_text {
            words.push((w, TYPE_OCR));
        }
    }
    if opts.use_entities {
        words.push((SPECIAL_WORDS[SEQ_DELIM as usize], TYPE_ENT));
        for e in &sample.entities {
            for w in e {
                words.push((w, TYPE_ENT));
            }
        }
    }
    words.truncate(opts.max_len);

    let vocab_size = vocab.size() as u32;
    let mut token_ids = Vec::with_capacity(words.len());
    let mut type_ids = Vec::with_capacity(words.len());
    let mut ext_token_ids = Vec::with_capacity(words.len());
    let mut oov_words: Vec<String> = Vec::new();
    for (w, ty) in words {
        type_ids.push(ty);
        match vocab.id_of(w) {
            Some(id) => {
                token_ids.push(id);
                ext_token_ids.push(id);
            }
            None => {
                token_ids.push(UNK);
                let pos = match oov_words.iter().position(|o| o == w) {
                    Some(p) => p,
                    None => {
                        oov_words.push(w.to_string());
                        oov_words.len() - 1
                    }
                };
                ext_token_ids.push(vocab_size + pos as u32);
            }
        }
    }
    Ok(EncodedInput {
        token_ids,
        type_ids,
        oov_words,
        ext_token_ids,
    })
}

/// One training unit: the shared encoded input paired with a single gold
/// keyphrase.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub input: Arc<EncodedInput>,
    pub image_features: Arc<ImageFeatures>,
    pub target: Vec<String>,
    /// All gold keyphrases of the originating sample (drives the
    /// correlation target).
    pub all_keyphrases: Arc<Vec<Vec<String>>>,
}

/// Replicate a sample One2One: one triplet per gold keyphrase, ordered
/// lexicographically by keyphrase.
pub fn replicate_one2one(
    sample: &MultiModalSample,
    vocab: &Vocabulary,
    opts: EncodeOptions,
) -> Result<Vec<Triplet>> {
    if sample.keyphrases.is_empty() {
        return Err(Error::NoTarget);
    }
    let input = Arc::new(concat_input(sample, vocab, opts)?);
    let all = Arc::new(sample.keyphrases.clone());
    Ok(sample
        .keyphrases
        .iter()
        .map(|kp| Triplet {
            input: Arc::clone(&input),
            image_features: Arc::clone(&sample.image_features),
            target: kp.clone(),
            all_keyphrases: Arc::clone(&all),
        })
        .collect())
}

/// Encoded image-text matching sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingSample {
    pub input: EncodedInput,
    pub image_features: Arc<ImageFeatures>,
    pub label: bool,
}

pub fn encode_matching(
    record: &MatchingRecord,
    vocab: &Vocabulary,
    opts: EncodeOptions,
) -> Result<MatchingSample> {
    let as_sample = MultiModalSample {
        source_text: record.source_text.clone(),
        ocr_text: record.ocr_text.clone(),
        entities: record.entities.clone(),
        image_features: Arc::clone(&record.image_features),
        keyphrases: Vec::new(),
    };
    Ok(MatchingSample {
        input: concat_input(&as_sample, vocab, opts)?,
        image_features: Arc::clone(&record.image_features),
        label: record.label,
    })
}
