//! Dataset loading, the JSONL interchange format, and a seeded synthetic
//! corpus for desk-scale experiments.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::CharSpan;
use crate::error::{Error, Result};
use crate::text::char_len;

/// One (context, question, gold answers) record. When `multi_span` is
/// false, multiple answers are alternatives; otherwise they are joint spans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MrcExample {
    pub id: String,
    pub context: String,
    pub question: String,
    pub answers: Vec<CharSpan>,
    pub multi_span: bool,
}

impl MrcExample {
    pub fn validate(&self) -> Result<()> {
        for a in &self.answers {
            a.validate(&self.context).map_err(|e| Error::Validation {
                id: self.id.clone(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Spans used as tagging supervision: all of them for joint multi-span
    /// answers, else only the first alternative.
    pub fn supervision_spans(&self) -> &[CharSpan] {
        if self.multi_span {
            &self.answers
        } else {
            &self.answers[..self.answers.len().min(1)]
        }
    }

    pub fn answer_texts(&self) -> Vec<String> {
        self.answers.iter().map(|a| a.text.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Squad,
    Multispan,
    Quoref,
    Jsonl,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squad" => Ok(DataFormat::Squad),
            "multispan" => Ok(DataFormat::Multispan),
            "quoref" => Ok(DataFormat::Quoref),
            "jsonl" => Ok(DataFormat::Jsonl),
            other => Err(Error::Config(format!("unknown data format {other:?}"))),
        }
    }
}

pub fn load(path: impl AsRef<Path>, format: DataFormat) -> Result<Vec<MrcExample>> {
    match format {
        DataFormat::Squad => load_squad(path),
        DataFormat::Multispan => load_multispan(path),
        DataFormat::Quoref => load_quoref(path),
        DataFormat::Jsonl => read_jsonl(path),
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

struct Walker<'a> {
    file: &'a Path,
}

impl Walker<'_> {
    fn err(&self, at: &str, message: impl Into<String>) -> Error {
        Error::Malformed {
            path: format!("{}:{at}", self.file.display()),
            message: message.into(),
        }
    }

    fn field<'v>(&self, v: &'v Value, at: &str, key: &str) -> Result<&'v Value> {
        v.get(key).ok_or_else(|| self.err(at, format!("missing field {key:?}")))
    }

    fn array<'v>(&self, v: &'v Value, at: &str, key: &str) -> Result<&'v Vec<Value>> {
        self.field(v, at, key)?
            .as_array()
            .ok_or_else(|| self.err(at, format!("field {key:?} is not an array")))
    }

    fn string<'v>(&self, v: &'v Value, at: &str, key: &str) -> Result<&'v str> {
        self.field(v, at, key)?
            .as_str()
            .ok_or_else(|| self.err(at, format!("field {key:?} is not a string")))
    }

    fn id(&self, v: &Value, at: &str) -> Result<String> {
        match self.field(v, at, "id")? {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            _ => Err(self.err(at, "field \"id\" is not a string")),
        }
    }
}

/// Walks the data → paragraphs → qas → answers layout shared by SQuAD v1.1
/// and Quoref.
fn load_paragraph_layout(path: &Path, joint_answers: bool) -> Result<Vec<MrcExample>> {
    let root = read_json(path)?;
    let w = Walker { file: path };
    let mut out = Vec::new();
    for (di, doc) in w.array(&root, "", "data")?.iter().enumerate() {
        let at = format!("data[{di}]");
        for (pi, para) in w.array(doc, &at, "paragraphs")?.iter().enumerate() {
            let at = format!("data[{di}].paragraphs[{pi}]");
            let context = w.string(para, &at, "context")?;
            for (qi, qa) in w.array(para, &at, "qas")?.iter().enumerate() {
                let at = format!("{at}.qas[{qi}]");
                let id = w.id(qa, &at)?;
                let question = w.string(qa, &at, "question")?;
                let mut answers = Vec::new();
                for (ai, ans) in w.array(qa, &at, "answers")?.iter().enumerate() {
                    let at = format!("{at}.answers[{ai}]");
                    let text = w.string(ans, &at, "text")?;
                    let start = w
                        .field(ans, &at, "answer_start")?
                        .as_u64()
                        .ok_or_else(|| w.err(&at, "answer_start is not a non-negative integer"))?
                        as usize;
                    answers.push(CharSpan {
                        start,
                        end: start + char_len(text),
                        text: text.to_string(),
                    });
                }
                let ex = MrcExample {
                    id,
                    context: context.to_string(),
                    question: question.to_string(),
                    multi_span: joint_answers && answers.len() > 1,
                    answers,
                };
                ex.validate()?;
                out.push(ex);
            }
        }
    }
    Ok(out)
}

/// SQuAD v1.1: every question becomes one example; its gold answers are
/// alternatives.
pub fn load_squad(path: impl AsRef<Path>) -> Result<Vec<MrcExample>> {
    load_paragraph_layout(path.as_ref(), false)
}

/// Quoref: same layout as SQuAD, but multiple answers are joint spans.
pub fn load_quoref(path: impl AsRef<Path>) -> Result<Vec<MrcExample>> {
    load_paragraph_layout(path.as_ref(), true)
}

/// MultiSpanQA: word-tokenized records with one `B`/`I`/`O` label per
/// context word. The context is the words joined by single spaces; `B`
/// always opens a new span.
pub fn load_multispan(path: impl AsRef<Path>) -> Result<Vec<MrcExample>> {
    let path = path.as_ref();
    let root = read_json(path)?;
    let w = Walker { file: path };
    let words = |v: &Value, at: &str, key: &str| -> Result<Vec<String>> {
        w.array(v, at, key)?
            .iter()
            .map(|x| {
                x.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| w.err(at, format!("{key} holds a non-string")))
            })
            .collect()
    };
    let mut out = Vec::new();
    for (i, rec) in w.array(&root, "", "data")?.iter().enumerate() {
        let at = format!("data[{i}]");
        let id = w.id(rec, &at)?;
        let context_words = words(rec, &at, "context")?;
        let question_words = words(rec, &at, "question")?;
        let labels = words(rec, &at, "label")?;
        if labels.len() != context_words.len() {
            return Err(w.err(
                &at,
                format!("{} labels for {} context words", labels.len(), context_words.len()),
            ));
        }
        let (context, offsets) = join_words(&context_words);
        let mut runs: Vec<(usize, usize)> = Vec::new();
        let mut open = false;
        for (j, label) in labels.iter().enumerate() {
            let (s, e) = offsets[j];
            match label.as_str() {
                "B" => {
                    runs.push((s, e));
                    open = true;
                }
                "I" if open => runs.last_mut().unwrap().1 = e,
                "I" => {
                    runs.push((s, e));
                    open = true;
                }
                "O" => open = false,
                other => return Err(w.err(&at, format!("unknown label {other:?}"))),
            }
        }
        let answers = runs
            .into_iter()
            .map(|(s, e)| CharSpan::from_context(&context, s, e))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let ex = MrcExample {
            id,
            context,
            question: question_words.join(" "),
            answers,
            multi_span: true,
        };
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

/// Joins words with single spaces, returning each word's char interval.
pub fn join_words(words: &[String]) -> (String, Vec<(usize, usize)>) {
    let mut text = String::new();
    let mut offsets = Vec::with_capacity(words.len());
    let mut pos = 0;
    for (i, word) in words.iter().enumerate() {
        if i > 0 {
            text.push(' ');
            pos += 1;
        }
        let len = char_len(word);
        offsets.push((pos, pos + len));
        text.push_str(word);
        pos += len;
    }
    (text, offsets)
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[MrcExample]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).expect("example serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<MrcExample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: MrcExample = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?;
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

/// Category names and their answer lexicons for the synthetic corpus.
pub const CATEGORIES: [(&str, [&str; 8]); 4] = [
    ("color", ["red", "blue", "green", "yellow", "purple", "orange", "black", "white"]),
    ("animal", ["cat", "dog", "horse", "tiger", "eagle", "otter", "camel", "whale"]),
    ("city", ["paris", "rome", "tokyo", "cairo", "lima", "oslo", "delhi", "quito"]),
    ("food", ["bread", "rice", "mango", "cheese", "soup", "pasta", "salad", "honey"]),
];

const DEFAULT_FILLER: [&str; 16] = [
    "we", "saw", "near", "old", "small", "quiet", "road", "river", "house", "people", "walked", "then", "there",
    "found", "big", "later",
];

/// Every word the synthetic generator can emit, besides the question
/// template.
pub fn synthetic_lexicon() -> Vec<&'static str> {
    CATEGORIES
        .iter()
        .flat_map(|(name, words)| std::iter::once(*name).chain(words.iter().copied()))
        .chain(DEFAULT_FILLER)
        .collect()
}

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_examples: usize,
    /// Fraction of examples that plant two or three answer phrases.
    pub multi_span_fraction: f64,
    pub filler: Vec<String>,
    /// Inclusive range of answer-phrase lengths, in tokens.
    pub answer_len: (usize, usize),
    /// Inclusive range of planted phrases from other categories.
    pub distractors: (usize, usize),
    /// How many words of each category lexicon are used (at most 8).
    pub words_per_category: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_examples: 48,
            multi_span_fraction: 0.0,
            filler: DEFAULT_FILLER.iter().map(|s| s.to_string()).collect(),
            answer_len: (1, 2),
            distractors: (1, 2),
            words_per_category: 8,
            seed: 0,
        }
    }
}

const MAX_SPANS: usize = 3;

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.multi_span_fraction) {
            return Err(Error::Config("multi_span_fraction must lie in [0, 1]".into()));
        }
        let (lo, hi) = self.answer_len;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid answer length range {lo}..={hi}")));
        }
        if self.distractors.0 > self.distractors.1 {
            return Err(Error::Config("invalid distractor range".into()));
        }
        let lexicon = self.words_per_category;
        if lexicon == 0 || lexicon > CATEGORIES[0].1.len() {
            return Err(Error::Config(format!("words_per_category must lie in 1..={}", CATEGORIES[0].1.len())));
        }
        let spans = if self.multi_span_fraction > 0.0 { MAX_SPANS } else { 1 };
        if hi * spans > lexicon || self.distractors.1 * hi > lexicon {
            return Err(Error::Config(format!(
                "vocabulary too small: {spans} spans of up to {hi} tokens need more than {lexicon} category words"
            )));
        }
        let category_words: Vec<&str> = CATEGORIES.iter().flat_map(|(_, w)| w.iter().copied()).collect();
        if self.filler.len() < 2 || self.filler.iter().any(|f| category_words.contains(&f.as_str())) {
            return Err(Error::Config("filler vocabulary needs two or more non-category words".into()));
        }
        Ok(())
    }
}

/// Templated contexts with planted answer phrases. Each question names a
/// category; its answers are every planted phrase of that category.
/// Target categories are balanced.
/// Phrases are separated by filler, so gold spans are never adjacent.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<MrcExample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_examples);
    let mut cycle: Vec<usize> = Vec::new();
    for n in 0..spec.n_examples {
        // Each run of four examples asks about every category once.
        if cycle.is_empty() {
            cycle = (0..CATEGORIES.len()).collect();
            cycle.shuffle(&mut rng);
        }
        let target = cycle.pop().unwrap();
        let multi = rng.gen::<f64>() < spec.multi_span_fraction;
        let n_spans = if multi { rng.gen_range(2..=MAX_SPANS) } else { 1 };
        let n_distract = rng.gen_range(spec.distractors.0..=spec.distractors.1);

        let phrases_for = |cat: usize, count: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<&'static str>> {
            let mut pool: Vec<&'static str> = CATEGORIES[cat].1[..spec.words_per_category].to_vec();
            pool.shuffle(rng);
            let mut pool = pool.into_iter();
            (0..count)
                .map(|_| {
                    let len = rng.gen_range(spec.answer_len.0..=spec.answer_len.1);
                    pool.by_ref().take(len).collect()
                })
                .collect()
        };

        let mut planted: Vec<(bool, Vec<&str>)> = phrases_for(target, n_spans, &mut rng)
            .into_iter()
            .map(|p| (true, p))
            .collect();
        for _ in 0..n_distract {
            let mut other = rng.gen_range(0..CATEGORIES.len() - 1);
            if other >= target {
                other += 1;
            }
            planted.extend(phrases_for(other, 1, &mut rng).into_iter().map(|p| (false, p)));
        }
        planted.shuffle(&mut rng);

        let mut words: Vec<String> = Vec::new();
        let mut gold_word_ranges = Vec::new();
        let filler = |rng: &mut ChaCha8Rng, words: &mut Vec<String>, min: usize| {
            for _ in 0..rng.gen_range(min..=min + 2) {
                words.push(spec.filler.choose(rng).unwrap().clone());
            }
        };
        filler(&mut rng, &mut words, 1);
        for (is_gold, phrase) in &planted {
            let start = words.len();
            words.extend(phrase.iter().map(|w| w.to_string()));
            if *is_gold {
                gold_word_ranges.push((start, words.len()));
            }
            filler(&mut rng, &mut words, 1);
        }
        let (context, offsets) = join_words(&words);
        let answers = gold_word_ranges
            .iter()
            .map(|&(s, e)| CharSpan::from_context(&context, offsets[s].0, offsets[e - 1].1))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let ex = MrcExample {
            id: format!("syn-{}-{n}", spec.seed),
            context,
            question: format!("which {} is mentioned ?", CATEGORIES[target].0),
            answers,
            multi_span: multi,
        };
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    const SQUAD: &str = r#"{"version": "1.1", "data": [{"title": "t", "paragraphs": [
        {"context": "Manning was 39, Newton was 26.",
         "qas": [{"id": "q1", "question": "How old was Newton?",
                  "answers": [{"answer_start": 27, "text": "26"},
                              {"answer_start": 27, "text": "26"},
                              {"answer_start": 16, "text": "Newton was 26"}]}]}]}]}"#;

    #[test]
    fn squad_accepts_and_keeps_alternatives() {
        let f = write_tmp(SQUAD);
        let ex = load_squad(f.path()).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].answers.len(), 3);
        assert!(!ex[0].multi_span);
        assert_eq!(ex[0].supervision_spans().len(), 1);
        assert_eq!(ex[0].answers[2].text, "Newton was 26");
    }

    #[test]
    fn squad_offset_mismatch_is_validation_error() {
        let bad = write_tmp(&SQUAD.replacen("27", "26", 1));
        let err = load_squad(bad.path()).unwrap_err();
        assert!(matches!(err, Error::Validation { ref id, .. } if id == "q1"), "{err}");
    }

    #[test]
    fn malformed_records_name_their_path() {
        let f = write_tmp(r#"{"data": [{"paragraphs": [{"context": "x", "qas": [{"id": "a", "answers": []}]}]}]}"#);
        let err = load_squad(f.path()).unwrap_err().to_string();
        assert!(err.contains("data[0].paragraphs[0].qas[0]") && err.contains("question"), "{err}");
        let g = write_tmp(r#"{"articles": []}"#);
        assert!(load_quoref(g.path()).is_err());
    }

    #[test]
    fn quoref_multi_span_flag() {
        let f = write_tmp(
            r#"{"data": [{"title": "t", "paragraphs": [{"context": "Ann met Bob and Cy.",
              "qas": [{"id": "a", "question": "Who met?", "answers": [{"answer_start": 0, "text": "Ann"}]},
                      {"id": "b", "question": "Who was met?", "answers": [{"answer_start": 8, "text": "Bob"}, {"answer_start": 16, "text": "Cy"}]}]}]}]}"#,
        );
        let ex = load_quoref(f.path()).unwrap();
        assert_eq!(ex.len(), 2);
        assert!(!ex[0].multi_span);
        assert!(ex[1].multi_span);
        assert_eq!(ex[1].supervision_spans().len(), 2);
    }

    #[test]
    fn multispan_runs_and_joins() {
        let f = write_tmp(
            r#"{"data": [
              {"id": "m1", "question": ["which", "?"], "context": ["w0", "w1", "w2", "w3"], "label": ["O", "I", "O", "I"]},
              {"id": "m2", "question": ["q"], "context": ["x", "y"], "label": ["O", "O"]},
              {"id": "m3", "question": ["q"], "context": ["x", "y", "z"], "label": ["B", "B", "I"]}]}"#,
        );
        let ex = load_multispan(f.path()).unwrap();
        assert_eq!(ex[0].answer_texts(), vec!["w1", "w3"]);
        assert_eq!(ex[0].context, "w0 w1 w2 w3");
        assert!(ex[1].answers.is_empty());
        assert_eq!(ex[2].answer_texts(), vec!["x", "y z"]);
        let bad = write_tmp(r#"{"data": [{"id": "m", "question": ["q"], "context": ["a", "b"], "label": ["O"]}]}"#);
        assert!(load_multispan(bad.path()).is_err());
    }

    #[test]
    fn join_words_offsets_reproduce_words() {
        let words: Vec<String> = ["naïve", "a", "ß", "test"].iter().map(|s| s.to_string()).collect();
        let (text, offsets) = join_words(&words);
        for (w, (s, e)) in words.iter().zip(offsets) {
            assert_eq!(&crate::text::char_slice(&text, s, e).unwrap(), w);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let ex = generate_corpus(&CorpusSpec {
            n_examples: 10,
            multi_span_fraction: 0.5,
            ..CorpusSpec::default()
        })
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_jsonl(f.path(), &ex).unwrap();
        assert_eq!(read_jsonl(f.path()).unwrap(), ex);
    }

    #[test]
    fn corpus_is_deterministic_and_valid() {
        let spec = CorpusSpec {
            n_examples: 50,
            multi_span_fraction: 0.4,
            seed: 7,
            ..CorpusSpec::default()
        };
        let a = generate_corpus(&spec).unwrap();
        assert_eq!(a, generate_corpus(&spec).unwrap());
        for ex in &a {
            ex.validate().unwrap();
            assert!(!ex.answers.is_empty());
            assert_eq!(ex.multi_span, ex.answers.len() > 1);
            for pair in ex.answers.windows(2) {
                assert!(pair[0].end + 1 < pair[1].start || pair[1].end + 1 < pair[0].start);
            }
        }
        assert!(a.iter().any(|e| e.multi_span));
        let single = generate_corpus(&CorpusSpec::default()).unwrap();
        assert!(single.iter().all(|e| !e.multi_span && e.answers.len() == 1));
    }

    #[test]
    fn corpus_rejects_oversized_requests() {
        let spec = CorpusSpec {
            answer_len: (1, 3),
            multi_span_fraction: 0.5,
            ..CorpusSpec::default()
        };
        assert!(generate_corpus(&spec).is_err());
        let spec = CorpusSpec {
            filler: vec!["x".into()],
            ..CorpusSpec::default()
        };
        assert!(generate_corpus(&spec).is_err());
    }
}
