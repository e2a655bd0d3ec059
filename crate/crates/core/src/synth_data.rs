//! Synthetic text-classification grammars with exact scoring rules.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which grammar generated a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Grammar {
    Categorical { classes: usize },
    OrderedSentiment { classes: usize },
    SentimentIntensity,
    Multilabel { labels: usize },
}

impl Grammar {
    /// Number of logits the readout needs.
    pub fn num_outputs(&self) -> usize {
        match *self {
            Grammar::Categorical { classes } | Grammar::OrderedSentiment { classes } => classes,
            Grammar::SentimentIntensity => 5,
            Grammar::Multilabel { labels } => labels,
        }
    }

    pub fn is_multilabel(&self) -> bool {
        matches!(self, Grammar::Multilabel { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Grammar::Categorical { classes } if classes < 2 => {
                Err(Error::Parameter(format!("categorical grammar needs at least 2 classes, got {classes}")))
            }
            Grammar::OrderedSentiment { classes } if ![2, 3, 5].contains(&classes) => Err(Error::Parameter(
                format!("ordered sentiment supports 2, 3 or 5 classes, got {classes}"),
            )),
            Grammar::Multilabel { labels } if labels == 0 => {
                Err(Error::Parameter("multilabel grammar needs at least one label".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        match *self {
            Grammar::Categorical { classes } => {
                let mut tokens: Vec<String> = (1..=classes).map(|i| format!("evid_{i}")).collect();
                tokens.push("neutral".into());
                let scores = (0..=classes)
                    .map(|t| (0..classes).map(|j| if t == j { 1.0 } else { 0.0 }).collect())
                    .collect();
                Vocabulary { tokens, scores }
            }
            Grammar::OrderedSentiment { .. } => Vocabulary {
                tokens: vec!["good".into(), "bad".into(), "neutral".into()],
                scores: vec![vec![1.0], vec![-1.0], vec![0.0]],
            },
            Grammar::SentimentIntensity => Vocabulary {
                tokens: ["awesome", "good", "okay", "bad", "awful", "neutral"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
                scores: vec![
                    vec![2.0, 1.0],
                    vec![1.0, -0.5],
                    vec![0.0, -2.0],
                    vec![-1.0, -0.5],
                    vec![-2.0, 1.0],
                    vec![0.0, 0.0],
                ],
            },
            Grammar::Multilabel { labels } => {
                let mut tokens: Vec<String> = (1..=labels).map(|i| format!("good_{i}")).collect();
                tokens.extend((1..=labels).map(|i| format!("bad_{i}")));
                tokens.push("neutral".into());
                let scores = (0..=2 * labels)
                    .map(|t| {
                        (0..labels)
                            .map(|j| {
                                if t == j {
                                    1.0
                                } else if t == labels + j {
                                    -1.0
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    })
                    .collect();
                Vocabulary { tokens, scores }
            }
        }
    }

    /// Human-readable names of the output classes (or labels).
    pub fn class_names(&self) -> Vec<String> {
        match *self {
            Grammar::Categorical { classes } => (1..=classes).map(|i| format!("class_{i}")).collect(),
            Grammar::OrderedSentiment { classes: 2 } => vec!["negative".into(), "positive".into()],
            Grammar::OrderedSentiment { classes: 3 } => {
                vec!["negative".into(), "neutral".into(), "positive".into()]
            }
            Grammar::OrderedSentiment { classes } => (1..=classes).map(|i| format!("{i}_star")).collect(),
            Grammar::SentimentIntensity => (1..=5).map(|i| format!("{i}_star")).collect(),
            Grammar::Multilabel { labels } => (1..=labels).map(|i| format!("label_{i}")).collect(),
        }
    }

    /// Apply the grammar's labeling rule to a score vector. `length` is the
    /// phrase length, which sets the ordered-sentiment thresholds.
    pub fn label_for_score(&self, score: &[f64], length: usize) -> Label {
        let l = length as f64;
        match *self {
            Grammar::Categorical { .. } => {
                let mut best = 0;
                for (i, v) in score.iter().enumerate() {
                    if *v > score[best] {
                        best = i;
                    }
                }
                Label::Class(best)
            }
            Grammar::OrderedSentiment { classes } => {
                let s = score[0];
                let class = match classes {
                    2 => usize::from(s >= 0.0),
                    3 => {
                        if 3.0 * s >= l {
                            2
                        } else if 3.0 * s <= -l {
                            0
                        } else {
                            1
                        }
                    }
                    _ => {
                        if 5.0 * s >= 3.0 * l {
                            4
                        } else if 5.0 * s >= l {
                            3
                        } else if 5.0 * s > -l {
                            2
                        } else if 5.0 * s > -3.0 * l {
                            1
                        } else {
                            0
                        }
                    }
                };
                Label::Class(class)
            }
            Grammar::SentimentIntensity => {
                let (s, i) = (score[0], score[1]);
                let class = if i < 0.0 && i.abs() > s.abs() {
                    2
                } else if i >= 0.0 && s > 0.0 {
                    4
                } else if i < 0.0 && s > 0.0 {
                    3
                } else if i < 0.0 && s < 0.0 {
                    1
                } else {
                    // i ≥ 0 and s ≤ 0 (i < 0 with s = 0 took the first branch).
                    0
                };
                Label::Class(class)
            }
            Grammar::Multilabel { .. } => Label::Multi(score.iter().map(|v| *v >= 0.0).collect()),
        }
    }
}

impl fmt::Display for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Grammar::Categorical { classes } => write!(f, "categorical-{classes}"),
            Grammar::OrderedSentiment { classes } => write!(f, "ordered-{classes}"),
            Grammar::SentimentIntensity => write!(f, "sentiment-intensity"),
            Grammar::Multilabel { labels } => write!(f, "multilabel-{labels}"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Score vectors drawn uniformly from the achievable set, then a uniform
    /// word multiset realizing that score, in shuffled order.
    #[default]
    UniformOverScores,
    /// Every word drawn independently and uniformly from the vocabulary.
    IidWords,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn score_dim(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == name)
    }

    pub fn score_of(&self, tokens: &[usize]) -> Vec<f64> {
        let mut s = vec![0.0; self.score_dim()];
        for &t in tokens {
            for (a, b) in s.iter_mut().zip(&self.scores[t]) {
                *a += b;
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Multi(Vec<bool>),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Multi(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    pub tokens: Vec<usize>,
    pub score: Vec<f64>,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub grammar: Grammar,
    pub mode: SamplingMode,
    pub vocabulary: Vocabulary,
    pub phrases: Vec<Phrase>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn num_outputs(&self) -> usize {
        self.grammar.num_outputs()
    }

    /// Mean phrase length, T_av.
    pub fn mean_length(&self) -> f64 {
        if self.phrases.is_empty() {
            return 0.0;
        }
        self.phrases.iter().map(|p| p.tokens.len()).sum::<usize>() as f64 / self.phrases.len() as f64
    }

    /// Check that every stored score and label agrees with the grammar.
    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        if self.vocabulary != self.grammar.vocabulary() {
            return Err(Error::Parameter(format!("vocabulary does not match grammar {}", self.grammar)));
        }
        for (i, p) in self.phrases.iter().enumerate() {
            if let Some(t) = p.tokens.iter().find(|t| **t >= self.vocabulary.len()) {
                return Err(Error::Range(format!("phrase {i}: token index {t} out of vocabulary")));
            }
            if self.vocabulary.score_of(&p.tokens) != p.score {
                return Err(Error::Parameter(format!("phrase {i}: stored score disagrees with tokens")));
            }
            if self.grammar.label_for_score(&p.score, p.tokens.len()) != p.label {
                return Err(Error::Parameter(format!("phrase {i}: stored label disagrees with score")));
            }
        }
        Ok(())
    }
}

fn make_phrase(grammar: &Grammar, vocab: &Vocabulary, tokens: Vec<usize>) -> Phrase {
    let score = vocab.score_of(&tokens);
    let label = grammar.label_for_score(&score, tokens.len());
    Phrase { tokens, score, label }
}

fn expand_counts<R: Rng + ?Sized>(counts: &[usize], rng: &mut R) -> Vec<usize> {
    let mut tokens: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(t, &c)| std::iter::repeat_n(t, c))
        .collect();
    tokens.shuffle(rng);
    tokens
}

/// Uniform nonnegative integer vector with `parts` entries summing to `total`
/// (stars and bars).
fn uniform_composition<R: Rng + ?Sized>(total: usize, parts: usize, rng: &mut R) -> Vec<usize> {
    let slots = total + parts - 1;
    let mut bars = index::sample(rng, slots, parts - 1).into_vec();
    bars.sort_unstable();
    // Stars between consecutive bars, with virtual bars at −1 and `slots`.
    let mut counts = Vec::with_capacity(parts);
    let mut next_free = 0;
    for &b in &bars {
        counts.push(b - next_free);
        next_free = b + 1;
    }
    counts.push(slots - next_free);
    counts
}

/// Word multisets of the sentiment+intensity grammar grouped by score, for
/// exact uniform sampling over achievable scores.
struct ScoreTable {
    groups: Vec<Vec<[u16; 6]>>,
}

impl ScoreTable {
    fn build(vocab: &Vocabulary, length: usize) -> Self {
        let mut map: BTreeMap<(i64, i64), Vec<[u16; 6]>> = BTreeMap::new();
        let mut counts = [0u16; 6];
        fn recurse(
            word: usize,
            remaining: usize,
            counts: &mut [u16; 6],
            vocab: &Vocabulary,
            map: &mut BTreeMap<(i64, i64), Vec<[u16; 6]>>,
        ) {
            if word == 5 {
                counts[5] = remaining as u16;
                let (mut s2, mut i2) = (0i64, 0i64);
                for (c, sc) in counts.iter().zip(&vocab.scores) {
                    s2 += *c as i64 * (2.0 * sc[0]) as i64;
                    i2 += *c as i64 * (2.0 * sc[1]) as i64;
                }
                map.entry((s2, i2)).or_default().push(*counts);
                return;
            }
            for c in 0..=remaining {
                counts[word] = c as u16;
                recurse(word + 1, remaining - c, counts, vocab, map);
            }
        }
        recurse(0, length, &mut counts, vocab, &mut map);
        ScoreTable {
            groups: map.into_values().collect(),
        }
    }
}

/// Largest phrase length for which sentiment+intensity uniform sampling
/// enumerates multisets.
pub const MAX_ENUMERATED_LENGTH: usize = 60;

/// Generate `count` phrases of length `length`.
pub fn generate(grammar: Grammar, length: usize, count: usize, mode: SamplingMode, seed: u64) -> Result<LabeledDataset> {
    grammar.validate()?;
    if length == 0 {
        return Err(Error::Parameter("phrase length must be at least 1".into()));
    }
    let vocab = grammar.vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = if grammar.is_multilabel() { SamplingMode::IidWords } else { mode };
    let mut phrases = Vec::with_capacity(count);
    match mode {
        SamplingMode::IidWords => {
            for _ in 0..count {
                let tokens = (0..length).map(|_| rng.random_range(0..vocab.len())).collect();
                phrases.push(make_phrase(&grammar, &vocab, tokens));
            }
        }
        SamplingMode::UniformOverScores => match grammar {
            Grammar::Categorical { classes } => {
                for _ in 0..count {
                    let counts = uniform_composition(length, classes + 1, &mut rng);
                    let tokens = expand_counts(&counts, &mut rng);
                    phrases.push(make_phrase(&grammar, &vocab, tokens));
                }
            }
            Grammar::OrderedSentiment { .. } => {
                let l = length as i64;
                for _ in 0..count {
                    let s = rng.random_range(-l..=l);
                    let lo = (-s).max(0);
                    let hi = (l - s).div_euclid(2);
                    let bad = rng.random_range(lo..=hi);
                    let good = s + bad;
                    let neutral = l - good - bad;
                    let counts = [good as usize, bad as usize, neutral as usize];
                    let tokens = expand_counts(&counts, &mut rng);
                    phrases.push(make_phrase(&grammar, &vocab, tokens));
                }
            }
            Grammar::SentimentIntensity => {
                if length > MAX_ENUMERATED_LENGTH {
                    return Err(Error::Parameter(format!(
                        "uniform score sampling enumerates multisets and supports length ≤ {MAX_ENUMERATED_LENGTH}"
                    )));
                }
                let table = ScoreTable::build(&vocab, length);
                for _ in 0..count {
                    let group = &table.groups[rng.random_range(0..table.groups.len())];
                    let pick = group[rng.random_range(0..group.len())];
                    let counts: Vec<usize> = pick.iter().map(|c| *c as usize).collect();
                    let tokens = expand_counts(&counts, &mut rng);
                    phrases.push(make_phrase(&grammar, &vocab, tokens));
                }
            }
            Grammar::Multilabel { .. } => unreachable!("multilabel always samples iid words"),
        },
    }
    Ok(LabeledDataset {
        grammar,
        mode,
        vocabulary: vocab,
        phrases,
    })
}

pub fn gen_categorical(classes: usize, length: usize, count: usize, mode: SamplingMode, seed: u64) -> Result<LabeledDataset> {
    generate(Grammar::Categorical { classes }, length, count, mode, seed)
}

pub fn gen_ordered_sentiment(classes: usize, length: usize, count: usize, mode: SamplingMode, seed: u64) -> Result<LabeledDataset> {
    generate(Grammar::OrderedSentiment { classes }, length, count, mode, seed)
}

pub fn gen_ordered_sentiment_intensity(length: usize, count: usize, mode: SamplingMode, seed: u64) -> Result<LabeledDataset> {
    generate(Grammar::SentimentIntensity, length, count, mode, seed)
}

pub fn gen_multilabel(labels: usize, length: usize, count: usize, seed: u64) -> Result<LabeledDataset> {
    generate(Grammar::Multilabel { labels }, length, count, SamplingMode::IidWords, seed)
}

/// Same tokens in a random order. Score and label are unchanged because every
/// grammar is order-free.
pub fn shuffle_phrase(p: &Phrase, seed: u64) -> Phrase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = p.clone();
    out.tokens.shuffle(&mut rng);
    out
}

#[derive(Serialize, Deserialize)]
struct JsonlHeader {
    format: String,
    version: u32,
    grammar: Grammar,
    mode: SamplingMode,
    vocabulary: Vocabulary,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    tokens: Vec<String>,
    score: Vec<f64>,
    label: Label,
}

const JSONL_FORMAT: &str = "labeled-dataset";
const JSONL_VERSION: u32 = 1;

/// Write one header line followed by one `{tokens, score, label}` record
/// per phrase.
pub fn write_jsonl<W: Write>(dataset: &LabeledDataset, mut out: W) -> Result<()> {
    let header = JsonlHeader {
        format: JSONL_FORMAT.into(),
        version: JSONL_VERSION,
        grammar: dataset.grammar,
        mode: dataset.mode,
        vocabulary: dataset.vocabulary.clone(),
        count: dataset.phrases.len(),
    };
    let to_format = |e: serde_json::Error| Error::Format(e.to_string());
    writeln!(out, "{}", serde_json::to_string(&header).map_err(to_format)?)?;
    for p in &dataset.phrases {
        let rec = JsonlRecord {
            tokens: p.tokens.iter().map(|t| dataset.vocabulary.tokens[*t].clone()).collect(),
            score: p.score.clone(),
            label: p.label.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec).map_err(to_format)?)?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<LabeledDataset> {
    let mut lines = input.lines();
    let parse_err = |line: usize, e: serde_json::Error| Error::Parse {
        line,
        column: e.column(),
        message: e.to_string(),
    };
    let first = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let header: JsonlHeader = serde_json::from_str(&first).map_err(|e| parse_err(1, e))?;
    if header.format != JSONL_FORMAT {
        return Err(Error::Format(format!("unexpected format tag {:?}", header.format)));
    }
    if header.version != JSONL_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: JSONL_VERSION,
        });
    }
    let vocab = header.vocabulary;
    let mut phrases = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e))?;
        let tokens = rec
            .tokens
            .iter()
            .map(|t| {
                vocab.index_of(t).ok_or_else(|| Error::Parse {
                    line: i + 2,
                    column: 0,
                    message: format!("unknown token {t:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        phrases.push(Phrase {
            tokens,
            score: rec.score,
            label: rec.label,
        });
    }
    if phrases.len() != header.count {
        return Err(Error::Format(format!(
            "header announces {} records, found {}",
            header.count,
            phrases.len()
        )));
    }
    let ds = LabeledDataset {
        grammar: header.grammar,
        mode: header.mode,
        vocabulary: vocab,
        phrases,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(grammar: &Grammar, names: &[&str]) -> Vec<usize> {
        let v = grammar.vocabulary();
        names.iter().map(|n| v.index_of(n).unwrap()).collect()
    }

    fn phrase(grammar: Grammar, names: &[&str]) -> Phrase {
        make_phrase(&grammar, &grammar.vocabulary(), tokens(&grammar, names))
    }

    #[test]
    fn categorical_rule() {
        let g = Grammar::Categorical { classes: 3 };
        let p = phrase(g, &["evid_2", "neutral", "evid_2", "evid_1"]);
        assert_eq!(p.score, vec![1.0, 2.0, 0.0]);
        assert_eq!(p.label, Label::Class(1));
        assert_eq!(phrase(g, &["evid_1", "evid_2"]).label, Label::Class(0));
    }

    #[test]
    fn ordered_rules() {
        let g3 = Grammar::OrderedSentiment { classes: 3 };
        assert_eq!(g3.label_for_score(&[3.0], 9), Label::Class(2));
        assert_eq!(g3.label_for_score(&[-3.0], 9), Label::Class(0));
        assert_eq!(g3.label_for_score(&[2.0], 9), Label::Class(1));
        let g5 = Grammar::OrderedSentiment { classes: 5 };
        assert_eq!(g5.label_for_score(&[0.0], 5), Label::Class(2));
        let g2 = Grammar::OrderedSentiment { classes: 2 };
        assert_eq!(g2.label_for_score(&[0.0], 4), Label::Class(1));
    }

    #[test]
    fn intensity_rules() {
        let g = Grammar::SentimentIntensity;
        assert_eq!(phrase(g, &["okay"]).label, Label::Class(2));
        let p = phrase(g, &["awesome", "good"]);
        assert_eq!(p.score, vec![3.0, 0.5]);
        assert_eq!(p.label, Label::Class(4));
        let p = phrase(g, &["bad", "bad"]);
        assert_eq!(p.score, vec![-2.0, -1.0]);
        assert_eq!(p.label, Label::Class(1));
    }

    #[test]
    fn multilabel_rule() {
        let g = Grammar::Multilabel { labels: 2 };
        let p = phrase(g, &["good_1", "bad_2", "bad_2"]);
        assert_eq!(p.score, vec![1.0, -2.0]);
        assert_eq!(p.label, Label::Multi(vec![true, false]));
        assert_eq!(phrase(g, &["neutral"]).label, Label::Multi(vec![true, true]));
    }

    #[test]
    fn compositions_sum_to_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let c = uniform_composition(7, 4, &mut rng);
            assert_eq!(c.len(), 4);
            assert_eq!(c.iter().sum::<usize>(), 7);
        }
        assert_eq!(uniform_composition(5, 1, &mut rng), vec![5]);
    }

    #[test]
    fn generated_sets_validate() {
        for g in [
            Grammar::Categorical { classes: 4 },
            Grammar::OrderedSentiment { classes: 5 },
            Grammar::SentimentIntensity,
            Grammar::Multilabel { labels: 2 },
        ] {
            for mode in [SamplingMode::UniformOverScores, SamplingMode::IidWords] {
                let ds = generate(g, 12, 300, mode, 9).unwrap();
                ds.validate().unwrap();
                assert!(ds.phrases.iter().all(|p| p.tokens.len() == 12));
            }
        }
    }

    #[test]
    fn unsupported_ordered_class_count() {
        assert!(matches!(
            gen_ordered_sentiment(4, 10, 1, SamplingMode::IidWords, 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = gen_ordered_sentiment_intensity(6, 20, SamplingMode::UniformOverScores, 3).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&ds, &mut buf).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn shuffle_keeps_multiset() {
        let ds = gen_categorical(3, 10, 5, SamplingMode::UniformOverScores, 2).unwrap();
        let p = &ds.phrases[0];
        let s = shuffle_phrase(p, 8);
        let (mut a, mut b) = (p.tokens.clone(), s.tokens.clone());
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        assert_eq!(s.label, p.label);
    }
}
