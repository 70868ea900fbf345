//! Instruction prompt rendering and encoding.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::text::tokenize;

pub const INSTRUCTION: &str =
    "Using the provided context, answer the question with exact phrases and avoid explanations.";

pub const MULTI_SPAN_FORMAT: &str = "Format the response as follows: [\"answer1\", \"answer2\", ...].";

const DELIM: &str = "\n---\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptOrdering {
    #[default]
    ContextFirst,
    QuestionFirst,
}

impl std::str::FromStr for PromptOrdering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context-first" => Ok(PromptOrdering::ContextFirst),
            "question-first" => Ok(PromptOrdering::QuestionFirst),
            other => Err(Error::Config(format!("unknown prompt ordering {other:?}"))),
        }
    }
}

impl std::fmt::Display for PromptOrdering {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PromptOrdering::ContextFirst => "context-first",
            PromptOrdering::QuestionFirst => "question-first",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub ordering: PromptOrdering,
    pub multi_span: bool,
}

/// A rendered prompt as consecutive pieces; `context` and `question` are
/// indices into `pieces`.
struct Rendered<'a> {
    pieces: Vec<std::borrow::Cow<'a, str>>,
    context: usize,
    question: usize,
}

impl PromptTemplate {
    pub fn new(ordering: PromptOrdering, multi_span: bool) -> Self {
        PromptTemplate { ordering, multi_span }
    }

    fn header(&self) -> String {
        if self.multi_span {
            format!("Instruction: {INSTRUCTION} {MULTI_SPAN_FORMAT}")
        } else {
            format!("Instruction: {INSTRUCTION}")
        }
    }

    fn render<'a>(&self, context: &'a str, question: &'a str) -> Result<Rendered<'a>> {
        if context.trim().is_empty() {
            return Err(Error::Input("empty context".into()));
        }
        if question.trim().is_empty() {
            return Err(Error::Input("empty question".into()));
        }
        let header = self.header();
        Ok(match self.ordering {
            PromptOrdering::ContextFirst => Rendered {
                pieces: vec![
                    format!("{header}{DELIM}Context: ").into(),
                    context.into(),
                    format!("{DELIM}Question: ").into(),
                    question.into(),
                    format!("{DELIM}Answer:").into(),
                ],
                context: 1,
                question: 3,
            },
            PromptOrdering::QuestionFirst => Rendered {
                pieces: vec![
                    format!("{header}{DELIM}Question: ").into(),
                    question.into(),
                    "\n<SEP>\nContext: ".into(),
                    context.into(),
                    format!("{DELIM}Answer:").into(),
                ],
                context: 3,
                question: 1,
            },
        })
    }

    pub fn build(&self, context: &str, question: &str) -> Result<String> {
        Ok(self.render(context, question)?.pieces.concat())
    }

    /// Tokenizes the prompt, recording where the context and question
    /// tokens sit in the sequence.
    pub fn encode(&self, vocab: &Vocab, context: &str, question: &str, max_seq_len: usize) -> Result<EncodedPrompt> {
        let rendered = self.render(context, question)?;
        let mut ids = Vec::new();
        let mut context_range = 0..0;
        let mut question_range = 0..0;
        let mut context_offsets = Vec::new();
        for (i, piece) in rendered.pieces.iter().enumerate() {
            let toks = tokenize(piece);
            let start = ids.len();
            ids.extend(toks.iter().map(|t| vocab.id(&t.text)));
            if i == rendered.context {
                context_range = start..ids.len();
                context_offsets = toks.iter().map(|t| (t.start, t.end)).collect();
            } else if i == rendered.question {
                question_range = start..ids.len();
            }
        }
        if ids.len() > max_seq_len {
            return Err(Error::TooLong {
                len: ids.len(),
                limit: max_seq_len,
            });
        }
        Ok(EncodedPrompt {
            ids,
            context_range,
            question_range,
            context_offsets,
        })
    }
}

/// Renders `template` for one (context, question) pair.
pub fn build_prompt(template: &PromptTemplate, context: &str, question: &str) -> Result<String> {
    template.build(context, question)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPrompt {
    pub ids: Vec<usize>,
    pub context_range: Range<usize>,
    pub question_range: Range<usize>,
    /// `[start, end)` char offsets of each context token in the raw context.
    pub context_offsets: Vec<(usize, usize)>,
}
