// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic corpus with a planted topic → direction confound.
//!
//! The closed vocabulary has 256 word symbols split into disjoint classes:
//! specials, the two steering words, the template words `talk`/`about`, topic
//! words, positive and negative attribute words, and neutral fillers.
//!
//! Every even topic is associated with the positive direction and every odd
//! topic with the negative one. In pretraining records a topic's continuation
//! carries its associated direction with probability `bias_strength`; that
//! quota is the only statistical link between topic words and attribute
//! words. A fraction of records open their body with the mood phrase
//! `<love|hate> talk about` matching the continuation, which is how the model
//! learns what the steering words mean.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::shuffle;

pub const VOCAB_SIZE: usize = 256;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const LOVE: usize = 4;
pub const HATE: usize = 5;
pub const TALK: usize = 6;
pub const ABOUT: usize = 7;
const FIRST_FREE: usize = 8;

/// Length of the steering prefix template `<dir> talk about`.
pub const PREFIX_LEN: usize = 3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("config error: {0}")]
    Config(String),
    #[error("vocabulary error: unknown {0}")]
    Vocabulary(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error on line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Direction carried by a steering prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "+")]
    Positive,
    #[serde(rename = "-")]
    Negative,
    #[serde(rename = "0")]
    None,
}

impl Direction {
    /// `+1` / `-1` / `0`.
    pub fn sign(self) -> i8 {
        match self {
            Direction::Positive => 1,
            Direction::Negative => -1,
            Direction::None => 0,
        }
    }

    /// Class index used by 2-way probes: positive = 1, negative = 0.
    pub fn class(self) -> Option<usize> {
        match self {
            Direction::Positive => Some(1),
            Direction::Negative => Some(0),
            Direction::None => None,
        }
    }

    pub fn from_label(label: i8) -> Self {
        match label.signum() {
            1 => Direction::Positive,
            -1 => Direction::Negative,
            _ => Direction::None,
        }
    }
}

/// Input `I = [S, C]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedPrompt {
    pub steering_prefix: Vec<usize>,
    pub semantic_body: Vec<usize>,
    pub direction: Direction,
}

impl SegmentedPrompt {
    pub fn neutral(body: Vec<usize>) -> Self {
        Self {
            steering_prefix: Vec::new(),
            semantic_body: body,
            direction: Direction::None,
        }
    }

    /// `L_s`.
    pub fn prefix_len(&self) -> usize {
        self.steering_prefix.len()
    }

    /// `L_c`.
    pub fn body_len(&self) -> usize {
        self.semantic_body.len()
    }

    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.steering_prefix.clone();
        t.extend_from_slice(&self.semantic_body);
        t
    }

    pub fn len(&self) -> usize {
        self.prefix_len() + self.body_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub prompt: SegmentedPrompt,
    pub continuation: Vec<usize>,
    /// `+1` or `-1`.
    pub label: i8,
    pub topic: usize,
}

impl CorpusRecord {
    /// Prompt followed by continuation.
    pub fn sequence(&self) -> Vec<usize> {
        let mut s = self.prompt.tokens();
        s.extend_from_slice(&self.continuation);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfoundSpec {
    pub n_topics: usize,
    pub words_per_topic: usize,
    /// Size of each attribute class (positive and negative).
    pub attribute_words: usize,
    /// Probability that a topic's continuation carries its associated direction.
    pub bias_strength: f64,
    /// Fraction of pretraining records whose body opens with a mood phrase.
    pub mood_rate: f64,
    /// Words in a semantic body before the closing `<sep>`.
    pub body_words: usize,
    pub continuation_words: usize,
    /// Number of distinct topic/filler slot patterns for bodies.
    pub template_count: usize,
}

impl Default for ConfoundSpec {
    fn default() -> Self {
        Self {
            n_topics: 8,
            words_per_topic: 4,
            attribute_words: 24,
            bias_strength: 0.9,
            mood_rate: 0.5,
            body_words: 6,
            continuation_words: 3,
            template_count: 4,
        }
    }
}

impl ConfoundSpec {
    pub fn with_bias(bias_strength: f64) -> Self {
        Self {
            bias_strength,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let topic_words = self.n_topics * self.words_per_topic;
        let used = FIRST_FREE + topic_words + 2 * self.attribute_words;
        if self.n_topics < 2 || self.words_per_topic == 0 || self.attribute_words == 0 {
            return Err(CorpusError::Config(
                "need at least two topics and non-empty word classes".into(),
            ));
        }
        if self.attribute_words < self.n_topics {
            return Err(CorpusError::Config(format!(
                "{} attribute words cannot give each of {} topics its own",
                self.attribute_words, self.n_topics
            )));
        }
        if used >= VOCAB_SIZE {
            return Err(CorpusError::Config(format!(
                "vocabulary partition uses {used} of {VOCAB_SIZE} symbols, leaving no fillers"
            )));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) || !(0.0..=1.0).contains(&self.mood_rate) {
            return Err(CorpusError::Config(
                "bias_strength and mood_rate must lie in [0, 1]".into(),
            ));
        }
        if self.body_words < 2 || self.continuation_words == 0 || self.template_count == 0 {
            return Err(CorpusError::Config(
                "body needs two words, continuation one word, and one template".into(),
            ));
        }
        Ok(())
    }

    /// Direction a topic is associated with.
    pub fn topic_direction(&self, topic: usize) -> Direction {
        if topic.is_multiple_of(2) {
            Direction::Positive
        } else {
            Direction::Negative
        }
    }

    /// `L_c` of every generated body (words plus `<sep>`).
    pub fn body_len(&self) -> usize {
        self.body_words + 1
    }
}

/// Word-class layout of the closed vocabulary for one [`ConfoundSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    topic_start: usize,
    words_per_topic: usize,
    n_topics: usize,
    pos_start: usize,
    neg_start: usize,
    filler_start: usize,
    attribute_words: usize,
}

impl Vocab {
    pub fn new(spec: &ConfoundSpec) -> Result<Self> {
        spec.validate()?;
        let mut words: Vec<String> = ["<pad>", "<bos>", "<eos>", "<sep>", "love", "hate", "talk", "about"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let topic_start = words.len();
        for t in 0..spec.n_topics {
            for k in 0..spec.words_per_topic {
                words.push(format!("topic{t}_{k}"));
            }
        }
        let pos_start = words.len();
        for k in 0..spec.attribute_words {
            words.push(format!("pos{k}"));
        }
        let neg_start = words.len();
        for k in 0..spec.attribute_words {
            words.push(format!("neg{k}"));
        }
        let filler_start = words.len();
        let mut k = 0;
        while words.len() < VOCAB_SIZE {
            words.push(format!("w{k}"));
            k += 1;
        }
        Ok(Self {
            words,
            topic_start,
            words_per_topic: spec.words_per_topic,
            n_topics: spec.n_topics,
            pos_start,
            neg_start,
            filler_start,
            attribute_words: spec.attribute_words,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn tokenize<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                self.id(w.as_ref())
                    .ok_or_else(|| CorpusError::Vocabulary(format!("word {:?}", w.as_ref())))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.word(id)
                    .map(str::to_string)
                    .ok_or_else(|| CorpusError::Vocabulary(format!("id {id}")))
            })
            .collect()
    }

    pub fn topic_words(&self, topic: usize) -> std::ops::Range<usize> {
        let s = self.topic_start + topic * self.words_per_topic;
        s..s + self.words_per_topic
    }

    pub fn attribute_words(&self, dir: Direction) -> std::ops::Range<usize> {
        match dir {
            Direction::Positive => self.pos_start..self.pos_start + self.attribute_words,
            Direction::Negative => self.neg_start..self.neg_start + self.attribute_words,
            Direction::None => self.filler_start..self.filler_start,
        }
    }

    pub fn fillers(&self) -> std::ops::Range<usize> {
        self.filler_start..self.words.len()
    }

    /// Topic a word belongs to, if it is a topic word.
    pub fn topic_of(&self, id: usize) -> Option<usize> {
        let end = self.topic_start + self.n_topics * self.words_per_topic;
        (self.topic_start..end)
            .contains(&id)
            .then(|| (id - self.topic_start) / self.words_per_topic)
    }

    /// Attribute class of a word, `Direction::None` for everything else.
    pub fn direction_of(&self, id: usize) -> Direction {
        if self.attribute_words(Direction::Positive).contains(&id) {
            Direction::Positive
        } else if self.attribute_words(Direction::Negative).contains(&id) {
            Direction::Negative
        } else {
            Direction::None
        }
    }
}

/// Slot kinds of a body template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Topic,
    Filler,
}

fn templates(spec: &ConfoundSpec) -> Vec<Vec<Slot>> {
    (0..spec.template_count)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x7e3a_0000 + k as u64);
            let mut slots = vec![Slot::Filler; spec.body_words];
            let n_topic = (spec.body_words / 2).max(1);
            let mut idx: Vec<usize> = (0..spec.body_words).collect();
            shuffle(&mut idx, &mut rng);
            for &i in idx.iter().take(n_topic) {
                slots[i] = Slot::Topic;
            }
            slots
        })
        .collect()
}

struct BodySampler {
    vocab: Vocab,
    templates: Vec<Vec<Slot>>,
    n_topics: usize,
}

impl BodySampler {
    fn new(spec: &ConfoundSpec) -> Result<Self> {
        Ok(Self {
            vocab: Vocab::new(spec)?,
            templates: templates(spec),
            n_topics: spec.n_topics,
        })
    }

    fn body<R: Rng>(&self, topic: usize, rng: &mut R) -> Vec<usize> {
        let template = &self.templates[rng.random_range(0..self.templates.len())];
        let topic_words = self.vocab.topic_words(topic);
        let fillers = self.vocab.fillers();
        let mut body: Vec<usize> = template
            .iter()
            .map(|slot| match slot {
                Slot::Topic => rng.random_range(topic_words.clone()),
                Slot::Filler => rng.random_range(fillers.clone()),
            })
            .collect();
        body.push(SEP);
        body
    }

    /// Attribute words of `dir` reserved for `topic`, cycled in order, then
    /// `<eos>`. Sentiment comes from the direction, wording from the topic.
    fn continuation(&self, dir: Direction, topic: usize, len: usize) -> Vec<usize> {
        let words = self.vocab.attribute_words(dir);
        let per = words.len() / self.n_topics;
        let start = words.start + topic * per;
        let mut c: Vec<usize> = (0..len).map(|k| start + k % per).collect();
        c.push(EOS);
        c
    }
}

/// The fixed steering prefix for a direction.
pub fn steering_prefix(dir: Direction) -> Vec<usize> {
    match dir {
        Direction::Positive => vec![LOVE, TALK, ABOUT],
        Direction::Negative => vec![HATE, TALK, ABOUT],
        Direction::None => Vec::new(),
    }
}

/// Pretraining records. Directions are assigned by exact per-topic quota and
/// the record order is then shuffled.
pub fn gen_pretrain_corpus(spec: &ConfoundSpec, n_records: usize, seed: u64) -> Result<Vec<CorpusRecord>> {
    if n_records == 0 {
        return Err(CorpusError::Data("n_records must be positive".into()));
    }
    let sampler = BodySampler::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan: Vec<(usize, Direction)> = Vec::with_capacity(n_records);
    for topic in 0..spec.n_topics {
        let count = n_records / spec.n_topics + usize::from(topic < n_records % spec.n_topics);
        let associated = spec.topic_direction(topic);
        let other = if associated == Direction::Positive {
            Direction::Negative
        } else {
            Direction::Positive
        };
        let n_assoc = (spec.bias_strength * count as f64).round() as usize;
        plan.extend((0..count).map(|k| (topic, if k < n_assoc { associated } else { other })));
    }
    shuffle(&mut plan, &mut rng);
    let records = plan
        .into_iter()
        .map(|(topic, dir)| {
            let mut body = Vec::new();
            if rng.random_bool(spec.mood_rate) {
                body.extend(steering_prefix(dir));
            }
            body.extend(sampler.body(topic, &mut rng));
            CorpusRecord {
                prompt: SegmentedPrompt::neutral(body),
                continuation: sampler.continuation(dir, topic, spec.continuation_words),
                label: dir.sign(),
                topic,
            }
        })
        .collect();
    Ok(records)
}

/// A positive/negative prompt pair sharing one semantic body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteeringPair {
    pub positive: SegmentedPrompt,
    pub negative: SegmentedPrompt,
    pub topic: usize,
}

pub fn gen_steering_pairs(spec: &ConfoundSpec, n_pairs: usize, seed: u64) -> Result<Vec<SteeringPair>> {
    if n_pairs == 0 {
        return Err(CorpusError::Data("n_pairs must be positive".into()));
    }
    let sampler = BodySampler::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_pairs)
        .map(|_| {
            let topic = rng.random_range(0..spec.n_topics);
            let body = sampler.body(topic, &mut rng);
            SteeringPair {
                positive: SegmentedPrompt {
                    steering_prefix: steering_prefix(Direction::Positive),
                    semantic_body: body.clone(),
                    direction: Direction::Positive,
                },
                negative: SegmentedPrompt {
                    steering_prefix: steering_prefix(Direction::Negative),
                    semantic_body: body,
                    direction: Direction::Negative,
                },
                topic,
            }
        })
        .collect())
}

/// Semantic bodies without any steering prefix, topics balanced round-robin.
pub fn gen_neutral_prompts(spec: &ConfoundSpec, n: usize, seed: u64) -> Result<Vec<(usize, SegmentedPrompt)>> {
    let sampler = BodySampler::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let topic = i % spec.n_topics;
            (topic, SegmentedPrompt::neutral(sampler.body(topic, &mut rng)))
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    prefix: Vec<usize>,
    prefix_dir: Direction,
    body: Vec<usize>,
    continuation: Vec<usize>,
    label: i8,
    topic: usize,
}

pub fn write_jsonl<W: Write>(records: &[CorpusRecord], mut out: W) -> Result<()> {
    for r in records {
        let line = RecordLine {
            prefix: r.prompt.steering_prefix.clone(),
            prefix_dir: r.prompt.direction,
            body: r.prompt.semantic_body.clone(),
            continuation: r.continuation.clone(),
            label: r.label,
            topic: r.topic,
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| CorpusError::Json { line: 0, source: e })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<CorpusRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| CorpusError::Json { line: i + 1, source: e })?;
        if rec.label != 1 && rec.label != -1 {
            return Err(CorpusError::Data(format!(
                "line {}: label must be 1 or -1, got {}",
                i + 1,
                rec.label
            )));
        }
        records.push(CorpusRecord {
            prompt: SegmentedPrompt {
                steering_prefix: rec.prefix,
                semantic_body: rec.body,
                direction: rec.prefix_dir,
            },
            continuation: rec.continuation,
            label: rec.label,
            topic: rec.topic,
        });
    }
    Ok(records)
}
