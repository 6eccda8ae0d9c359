//! Seeded generator for a miniature sign-translation-like task.
//!
//! Frames align monotonically with glosses; glosses map to text through a small
//! lexicon followed by a reordering rule, so text order differs from gloss
//! order. Transfer-learning stand-ins are provided too: paraphrase rules on
//! text and alternative feature renderings ("variants") of the same sample.
//!
//! Text token layout for a spec with `s` single-token nouns and `v` verbs:
//!
//! | range                    | tokens                                   |
//! |--------------------------|------------------------------------------|
//! | `0..s`                   | nouns                                    |
//! | `s..s+v`                 | verb stems                               |
//! | next 2                   | inflection suffixes                      |
//! | next `function_words`    | function words                           |
//! | next `capitalized`       | sentence-initial variants of nouns `0..` |
//! | next `synonyms`          | synonyms of the nouns after those        |

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adcore::Tensor;
use crate::ctc::min_frames;
use crate::model::{ModelConfig, Sample};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid task spec: {0}")]
    Config(String),
    #[error("sample {id}: no feasible draw after {retries} attempts")]
    RetriesExhausted { id: u64, retries: usize },
    #[error("variant {variant} out of range (task has {count})")]
    Variant { variant: usize, count: usize },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReorderRule {
    /// Lexicon only; text follows gloss order.
    None,
    /// The verb moves to the second slot and a function word is appended.
    VerbSecond,
    /// The verb swaps with the noun before it and a function word is appended.
    LocalSwap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParaphraseRule {
    Normalize,
    Lemmatize,
    Backtranslate,
}

/// One warm-start pairing: feature variant with a chain of paraphrase rules
/// (an empty chain keeps the original text).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pairing {
    pub variant: usize,
    #[serde(default)]
    pub rules: Vec<ParaphraseRule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub gloss_vocab: usize,
    pub verbs: usize,
    /// Nouns realised as two text tokens.
    pub compound_nouns: usize,
    pub function_words: usize,
    pub capitalized: usize,
    pub synonyms: usize,
    pub gloss_len_min: usize,
    pub gloss_len_max: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub reorder: ReorderRule,
    pub variants: usize,
    pub pairings: Vec<Pairing>,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub downsample: usize,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self::preset(Preset::A)
    }
}

impl TaskSpec {
    /// Preset A has strong reordering and a small vocabulary; preset B reorders
    /// less and has more, mostly two-token, lexicon entries.
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            gloss_vocab: 20,
            verbs: 4,
            compound_nouns: 4,
            function_words: 3,
            capitalized: 4,
            synonyms: 3,
            gloss_len_min: 3,
            gloss_len_max: 8,
            frames_min: 4,
            frames_max: 8,
            feature_dim: 16,
            noise: 0.1,
            reorder: ReorderRule::VerbSecond,
            variants: 3,
            pairings: vec![
                Pairing { variant: 0, rules: vec![] },
                Pairing {
                    variant: 1,
                    rules: vec![ParaphraseRule::Backtranslate],
                },
                Pairing {
                    variant: 2,
                    rules: vec![ParaphraseRule::Normalize, ParaphraseRule::Lemmatize],
                },
            ],
            train_size: 2000,
            dev_size: 200,
            test_size: 200,
            downsample: 2,
            max_retries: 100,
            seed: 0,
        };
        match preset {
            Preset::A => base,
            Preset::B => Self {
                gloss_vocab: 40,
                verbs: 6,
                compound_nouns: 14,
                reorder: ReorderRule::LocalSwap,
                ..base
            },
        }
    }

    /// Parses a TOML table; an optional `preset = "a" | "b"` key selects the
    /// base that the remaining keys override.
    pub fn from_table(mut table: toml::Table) -> Result<Self, SynthError> {
        let preset = match table.remove("preset") {
            None => Preset::A,
            Some(v) => v
                .try_into()
                .map_err(|e| SynthError::Config(format!("preset: {e}")))?,
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| SynthError::Config(e.to_string()))?;
        base.extend(table);
        let spec: Self = base.try_into().map_err(|e: toml::de::Error| SynthError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn nouns(&self) -> usize {
        self.gloss_vocab - self.verbs
    }

    pub fn single_nouns(&self) -> usize {
        self.nouns() - self.compound_nouns
    }

    fn stem_base(&self) -> usize {
        self.single_nouns()
    }

    fn suffix_base(&self) -> usize {
        self.stem_base() + self.verbs
    }

    fn function_base(&self) -> usize {
        self.suffix_base() + 2
    }

    fn capital_base(&self) -> usize {
        self.function_base() + self.function_words
    }

    fn synonym_base(&self) -> usize {
        self.capital_base() + self.capitalized
    }

    pub fn text_vocab(&self) -> usize {
        self.synonym_base() + self.synonyms
    }

    /// Whether gloss `g` is a verb (verbs occupy the top gloss ids).
    pub fn is_verb(&self, g: usize) -> bool {
        g >= self.nouns()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.verbs == 0 || self.verbs >= self.gloss_vocab {
            return bad(format!("verbs must be in 1..gloss_vocab, got {}", self.verbs));
        }
        if self.single_nouns() < 2 || self.compound_nouns > self.nouns() {
            return bad("need at least two single-token nouns".into());
        }
        if self.function_words == 0 {
            return bad("function_words must be at least 1".into());
        }
        if self.capitalized + self.synonyms > self.single_nouns() {
            return bad("capitalized + synonyms exceeds the single-token nouns".into());
        }
        if self.gloss_len_min < 2 || self.gloss_len_min > self.gloss_len_max {
            return bad("gloss length range must satisfy 2 <= min <= max".into());
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return bad("frame range must satisfy 1 <= min <= max".into());
        }
        if self.feature_dim == 0 || self.downsample == 0 {
            return bad("feature_dim and downsample must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        if self.variants == 0 {
            return bad("variants must be at least 1".into());
        }
        if let Some(p) = self.pairings.iter().find(|p| p.variant >= self.variants) {
            return bad(format!("pairing uses variant {} of {}", p.variant, self.variants));
        }
        if self.train_size == 0 || self.dev_size == 0 || self.test_size == 0 {
            return bad("split sizes must be at least 1".into());
        }
        if self.max_retries == 0 {
            return bad("max_retries must be at least 1".into());
        }
        Ok(())
    }

    /// Model config whose vocabularies and input width match this task.
    pub fn configure(&self, model: &ModelConfig) -> ModelConfig {
        ModelConfig {
            gloss_vocab: self.gloss_vocab,
            text_vocab: self.text_vocab(),
            feature_dim: self.feature_dim,
            downsample: self.downsample,
            ..model.clone()
        }
    }

    /// Text tokens for one gloss, ignoring inflection.
    fn lexeme(&self, g: usize) -> Vec<usize> {
        let single = self.single_nouns();
        if self.is_verb(g) {
            vec![self.stem_base() + g - self.nouns()]
        } else if g < single {
            vec![g]
        } else {
            let j = g - single;
            vec![(2 * j) % single, (2 * j + 1) % single]
        }
    }

    pub fn gloss_names(&self) -> Vec<String> {
        (0..self.gloss_vocab)
            .map(|g| {
                if self.is_verb(g) {
                    format!("V{}", g - self.nouns())
                } else {
                    format!("N{g}")
                }
            })
            .collect()
    }

    pub fn text_names(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.single_nouns()).map(|i| format!("w{i}")).collect();
        v.extend((0..self.verbs).map(|i| format!("stem{i}")));
        v.extend((0..2).map(|i| format!("-s{i}")));
        v.extend((0..self.function_words).map(|i| format!("fw{i}")));
        v.extend((0..self.capitalized).map(|i| format!("W{i}")));
        v.extend((0..self.synonyms).map(|i| format!("syn{}", self.capitalized + i)));
        v
    }
}

/// Text for a gloss sequence, and for each text token the gloss position it
/// realises (`None` for function words).
pub fn realize(spec: &TaskSpec, gloss: &[usize]) -> (Vec<usize>, Vec<Option<usize>>) {
    let verb_pos = gloss.iter().position(|&g| spec.is_verb(g));
    let mut units: Vec<(Vec<usize>, Option<usize>)> = gloss
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let mut toks = spec.lexeme(g);
            if spec.is_verb(g) {
                let agreement = gloss.first().map_or(0, |&n| n % 2);
                toks.push(spec.suffix_base() + agreement);
            }
            (toks, Some(i))
        })
        .collect();
    if let Some(v) = verb_pos {
        let verb = gloss[v] - spec.nouns();
        match spec.reorder {
            ReorderRule::None => {}
            ReorderRule::VerbSecond | ReorderRule::LocalSwap => {
                let unit = units.remove(v);
                let target = match spec.reorder {
                    ReorderRule::VerbSecond => 1.min(units.len()),
                    _ => v.saturating_sub(1),
                };
                units.insert(target, unit);
                units.push((vec![spec.function_base() + verb % spec.function_words], None));
            }
        }
    }
    let mut text = Vec::new();
    let mut align = Vec::new();
    for (toks, pos) in units {
        for t in toks {
            text.push(t);
            align.push(pos);
        }
    }
    if let Some(first) = text.first_mut() {
        if *first < spec.capitalized {
            *first += spec.capital_base();
        }
    }
    (text, align)
}

/// Token-level paraphrase; the result stays within the text vocabulary and
/// changes length by at most one.
pub fn paraphrase(spec: &TaskSpec, text: &[usize], rule: ParaphraseRule) -> Vec<usize> {
    let cap = spec.capital_base()..spec.capital_base() + spec.capitalized;
    let syn = spec.synonym_base()..spec.synonym_base() + spec.synonyms;
    let syn_src = spec.capitalized..spec.capitalized + spec.synonyms;
    match rule {
        ParaphraseRule::Normalize => text
            .iter()
            .map(|&t| if cap.contains(&t) { t - spec.capital_base() } else { t })
            .collect(),
        ParaphraseRule::Lemmatize => {
            let suffix = spec.suffix_base()..spec.suffix_base() + 2;
            let mut out = text.to_vec();
            if let Some(i) = out.iter().position(|t| suffix.contains(t)) {
                out.remove(i);
            }
            out
        }
        ParaphraseRule::Backtranslate => {
            let mut out: Vec<usize> = text
                .iter()
                .map(|&t| {
                    if syn_src.contains(&t) {
                        t - spec.capitalized + spec.synonym_base()
                    } else if syn.contains(&t) {
                        t - spec.synonym_base() + spec.capitalized
                    } else {
                        t
                    }
                })
                .collect();
            if out.len() >= 2 {
                out.swap(0, 1);
            }
            out
        }
    }
}

/// Inverse of [`ParaphraseRule::Backtranslate`] (the rule is an involution).
pub fn backtranslate_inverse(spec: &TaskSpec, text: &[usize]) -> Vec<usize> {
    paraphrase(spec, text, ParaphraseRule::Backtranslate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Augmented,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Augmented => "augmented",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub split: Split,
    pub provenance: Provenance,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &Corpus {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Per-gloss prototype vectors, fixed by the task seed.
fn prototypes(spec: &TaskSpec) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    let data = (0..spec.gloss_vocab * spec.feature_dim).map(|_| normal(&mut rng)).collect();
    Tensor::from_vec(spec.gloss_vocab, spec.feature_dim, data).expect("prototype shape")
}

fn draw_gloss(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.random_range(spec.gloss_len_min..=spec.gloss_len_max);
    let mut gloss: Vec<usize> = (0..len - 1).map(|_| rng.random_range(0..spec.nouns())).collect();
    gloss.push(spec.nouns() + rng.random_range(0..spec.verbs));
    gloss
}

fn feasible(spec: &TaskSpec, frames: usize, gloss: &[usize], text: &[usize]) -> bool {
    let steps = frames.div_ceil(spec.downsample);
    steps >= min_frames(gloss) && steps >= min_frames(text)
}

fn generate_sample(spec: &TaskSpec, protos: &Tensor, id: u64) -> Result<Sample, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(id);
    for _ in 0..spec.max_retries {
        let gloss = draw_gloss(spec, &mut rng);
        let durations: Vec<usize> = gloss
            .iter()
            .map(|_| rng.random_range(spec.frames_min..=spec.frames_max))
            .collect();
        let frames: usize = durations.iter().sum();
        let (text, _) = realize(spec, &gloss);
        if !feasible(spec, frames, &gloss, &text) {
            continue;
        }
        let mut features = Tensor::zeros(frames, spec.feature_dim);
        let mut row = 0;
        for (&g, &d) in gloss.iter().zip(&durations) {
            for _ in 0..d {
                for (c, v) in features.row_mut(row).iter_mut().enumerate() {
                    *v = protos.get(g, c) + spec.noise * normal(&mut rng);
                }
                row += 1;
            }
        }
        return Ok(Sample {
            id,
            features,
            gloss,
            text,
            variant: 0,
        });
    }
    Err(SynthError::RetriesExhausted {
        id,
        retries: spec.max_retries,
    })
}

/// Generates the three splits; ids run consecutively train, dev, test.
pub fn gen_corpus(spec: &TaskSpec) -> Result<Dataset, SynthError> {
    spec.validate()?;
    let protos = prototypes(spec);
    let mut next_id = 0u64;
    let mut make = |split: Split, n: usize| -> Result<Corpus, SynthError> {
        let samples = (0..n)
            .map(|_| {
                let id = next_id;
                next_id += 1;
                generate_sample(spec, &protos, id)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Corpus {
            split,
            provenance: Provenance::Original,
            samples,
        })
    };
    Ok(Dataset {
        train: make(Split::Train, spec.train_size)?,
        dev: make(Split::Dev, spec.dev_size)?,
        test: make(Split::Test, spec.test_size)?,
    })
}

/// Fixed linear map of variant `v`, drawn from the task seed.
fn variant_map(spec: &TaskSpec, variant: usize) -> Tensor {
    let f = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5e_0000);
    rng.set_stream(variant as u64);
    let scale = 1.0 / (f as f64).sqrt();
    let data = (0..f * f).map(|_| scale * normal(&mut rng)).collect();
    Tensor::from_vec(f, f, data).expect("variant map shape")
}

/// Re-renders a sample's features as seen by embedding variant `variant`.
pub fn feature_variant(spec: &TaskSpec, sample: &Sample, variant: usize) -> Result<Sample, SynthError> {
    if variant >= spec.variants {
        return Err(SynthError::Variant {
            variant,
            count: spec.variants,
        });
    }
    if variant == 0 {
        return Ok(sample.clone());
    }
    let map = variant_map(spec, variant);
    let mut features = sample.features.matmul(&map).map_err(|e| SynthError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (variant as u64) << 48);
    rng.set_stream(sample.id);
    for v in features.data_mut() {
        *v += spec.noise * normal(&mut rng);
    }
    Ok(Sample {
        features,
        variant,
        ..sample.clone()
    })
}

/// Id of pairing `j` of an original sample; disjoint from generated ids.
pub fn augmented_id(original: u64, pairing: usize) -> u64 {
    ((pairing as u64 + 1) << 40) | original
}

/// Cross product of the train split with the configured pairings.
pub fn build_warmstart_corpus(train: &Corpus, spec: &TaskSpec) -> Result<Corpus, SynthError> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(train.len() * spec.pairings.len());
    for s in &train.samples {
        for (j, pairing) in spec.pairings.iter().enumerate() {
            let mut out = feature_variant(spec, s, pairing.variant)?;
            let text = pairing.rules.iter().fold(s.text.clone(), |t, &r| paraphrase(spec, &t, r));
            // A paraphrase can create an adjacent repeat that no longer fits.
            if feasible(spec, s.features.rows(), &s.gloss, &text) && !text.is_empty() {
                out.text = text;
            }
            out.id = augmented_id(s.id, j);
            samples.push(out);
        }
    }
    Ok(Corpus {
        split: train.split,
        provenance: Provenance::Augmented,
        samples,
    })
}

/// Counts for one split, at gloss or text level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusStats {
    pub split: Split,
    pub level: &'static str,
    pub sentences: usize,
    pub vocab: usize,
    pub words: usize,
    /// Distinct tokens absent from the train split.
    pub oovs: usize,
}

pub fn corpus_stats(data: &Dataset) -> Vec<CorpusStats> {
    let mut out = Vec::new();
    for level in ["gloss", "text"] {
        let seqs = |c: &Corpus| -> Vec<Vec<usize>> {
            c.samples
                .iter()
                .map(|s| if level == "gloss" { s.gloss.clone() } else { s.text.clone() })
                .collect()
        };
        let train_vocab: BTreeSet<usize> = seqs(&data.train).into_iter().flatten().collect();
        for split in Split::ALL {
            let corpus = data.split(split);
            let all = seqs(corpus);
            let vocab: BTreeSet<usize> = all.iter().flatten().copied().collect();
            out.push(CorpusStats {
                split,
                level,
                sentences: corpus.len(),
                vocab: vocab.len(),
                words: all.iter().map(Vec::len).sum(),
                oovs: vocab.difference(&train_vocab).count(),
            });
        }
    }
    out
}

pub fn write_stats(path: &Path, stats: &[CorpusStats]) -> Result<(), SynthError> {
    let mut s = String::from("split,level,sentences,vocab,words,oovs\n");
    for st in stats {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            st.split.name(),
            st.level,
            st.sentences,
            st.vocab,
            st.words,
            st.oovs
        )
        .expect("write to string");
    }
    fs::write(path, s).map_err(io_err(path))
}

fn ids(seq: &[usize]) -> String {
    seq.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn encode_features(t: &Tensor) -> String {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    format!("{}x{}:{}", t.rows(), t.cols(), hex::encode(bytes))
}

fn decode_features(field: &str) -> Result<Tensor, String> {
    let (shape, body) = field.split_once(':').ok_or("missing shape header")?;
    let (r, c) = shape.split_once('x').ok_or("malformed shape header")?;
    let rows: usize = r.parse().map_err(|_| "bad row count")?;
    let cols: usize = c.parse().map_err(|_| "bad column count")?;
    let bytes = hex::decode(body).map_err(|e| e.to_string())?;
    if bytes.len() != rows * cols * 8 {
        return Err(format!("expected {} feature bytes, found {}", rows * cols * 8, bytes.len()));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::from_vec(rows, cols, data).map_err(|e| e.to_string())
}

fn parse_ids(field: &str) -> Result<Vec<usize>, String> {
    field
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| format!("bad token id {t:?}")))
        .collect()
}

/// One tab-separated record per line:
/// `id split variant RxC:hex gloss-ids text-ids provenance`.
pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<(), SynthError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for s in &corpus.samples {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.id,
            corpus.split.name(),
            s.variant,
            encode_features(&s.features),
            ids(&s.gloss),
            ids(&s.text),
            corpus.provenance.name()
        )
        .map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_corpus(path: &Path) -> Result<Corpus, SynthError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut split = None;
    let mut provenance = None;
    let mut samples = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| SynthError::Parse {
            path: path.display().to_string(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", fields.len())));
        }
        let sp = Split::parse(fields[1]).ok_or_else(|| err(format!("unknown split {:?}", fields[1])))?;
        let pv = match fields[6] {
            "original" => Provenance::Original,
            "augmented" => Provenance::Augmented,
            other => return Err(err(format!("unknown provenance {other:?}"))),
        };
        if split.is_some_and(|s| s != sp) || provenance.is_some_and(|p| p != pv) {
            return Err(err("mixed split or provenance in one file".into()));
        }
        split = Some(sp);
        provenance = Some(pv);
        let id = fields[0].parse().map_err(|_| err(format!("bad id {:?}", fields[0])))?;
        let variant = fields[2].parse().map_err(|_| err(format!("bad variant {:?}", fields[2])))?;
        samples.push(Sample {
            id,
            variant,
            features: decode_features(fields[3]).map_err(err)?,
            gloss: parse_ids(fields[4]).map_err(err)?,
            text: parse_ids(fields[5]).map_err(err)?,
        });
    }
    Ok(Corpus {
        split: split.unwrap_or(Split::Train),
        provenance: provenance.unwrap_or(Provenance::Original),
        samples,
    })
}

pub fn write_vocab(path: &Path, names: &[String]) -> Result<(), SynthError> {
    let mut s = names.join("\n");
    s.push('\n');
    fs::write(path, s).map_err(io_err(path))
}

pub fn read_vocab(path: &Path) -> Result<Vec<String>, SynthError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Writes `{train,dev,test}.tsv`, `gloss.vocab`, `text.vocab` and `stats.csv`.
pub fn write_dataset(dir: &Path, spec: &TaskSpec, data: &Dataset) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for split in Split::ALL {
        write_corpus(&dir.join(format!("{}.tsv", split.name())), data.split(split))?;
    }
    write_vocab(&dir.join("gloss.vocab"), &spec.gloss_names())?;
    write_vocab(&dir.join("text.vocab"), &spec.text_names())?;
    write_stats(&dir.join("stats.csv"), &corpus_stats(data))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let load = |split: Split| read_corpus(&dir.join(format!("{}.tsv", split.name())));
    Ok(Dataset {
        train: load(Split::Train)?,
        dev: load(Split::Dev)?,
        test: load(Split::Test)?,
    })
}
