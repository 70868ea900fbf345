//! Conversions between character-level answer spans and IO tags over
//! context tokens.
//!
//! A token is tagged `I` iff its character interval overlaps some gold span
//! by at least one character, so a span that splits a token tags the whole
//! token. IO cannot encode two adjacent spans; they decode as one run.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{char_len, char_slice};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("span {start}..{end} is empty or reversed")]
    EmptySpan { start: usize, end: usize },
    #[error("span {start}..{end} exceeds context length {len}")]
    OutOfBounds { start: usize, end: usize, len: usize },
    #[error("span text {text:?} does not match context {found:?} at {start}..{end}")]
    TextMismatch {
        start: usize,
        end: usize,
        text: String,
        found: String,
    },
    #[error("tag sequence has {tags} tags for {tokens} context tokens")]
    LengthMismatch { tags: usize, tokens: usize },
    #[error("unknown tag {0:?}")]
    UnknownTag(String),
}

/// Character span in a context, `start` inclusive and `end` exclusive, in
/// Unicode scalar values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl CharSpan {
    /// Builds a span from offsets, reading its text out of `context`.
    pub fn from_context(context: &str, start: usize, end: usize) -> Result<Self, CodecError> {
        check_bounds(start, end, char_len(context))?;
        Ok(CharSpan {
            start,
            end,
            text: char_slice(context, start, end).unwrap_or_default(),
        })
    }

    /// Checks offsets and that `text` equals the context substring.
    pub fn validate(&self, context: &str) -> Result<(), CodecError> {
        check_bounds(self.start, self.end, char_len(context))?;
        let found = char_slice(context, self.start, self.end).unwrap_or_default();
        if found != self.text {
            return Err(CodecError::TextMismatch {
                start: self.start,
                end: self.end,
                text: self.text.clone(),
                found,
            });
        }
        Ok(())
    }
}

fn check_bounds(start: usize, end: usize, len: usize) -> Result<(), CodecError> {
    if start >= end {
        return Err(CodecError::EmptySpan { start, end });
    }
    if end > len {
        return Err(CodecError::OutOfBounds { start, end, len });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    O = 0,
    I = 1,
}

impl Tag {
    pub fn class(self) -> usize {
        self as usize
    }

    pub fn from_class(c: usize) -> Tag {
        if c == 1 {
            Tag::I
        } else {
            Tag::O
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tag::O => "O",
            Tag::I => "I",
        })
    }
}

impl std::str::FromStr for Tag {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "O" => Ok(Tag::O),
            "I" => Ok(Tag::I),
            other => Err(CodecError::UnknownTag(other.to_string())),
        }
    }
}

/// IO labels over context tokens.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TagSequence(pub Vec<Tag>);

impl TagSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.0.iter().map(|t| t.class()).collect()
    }

    pub fn from_classes(classes: &[usize]) -> Self {
        TagSequence(classes.iter().map(|&c| Tag::from_class(c)).collect())
    }
}

impl fmt::Display for TagSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Tags each context token `I` iff it overlaps any span.
///
/// `offsets` are the `[start, end)` character intervals of the context
/// tokens, relative to the raw context of length `context_len`.
pub fn spans_to_tags(
    offsets: &[(usize, usize)],
    spans: &[CharSpan],
    context_len: usize,
) -> Result<TagSequence, CodecError> {
    for s in spans {
        check_bounds(s.start, s.end, context_len)?;
    }
    let tags = offsets
        .iter()
        .map(|&(ts, te)| {
            if spans.iter().any(|s| ts < s.end && s.start < te) {
                Tag::I
            } else {
                Tag::O
            }
        })
        .collect();
    Ok(TagSequence(tags))
}

/// Turns each maximal run of `I` tags into one span, sorted by start.
pub fn tags_to_spans(
    offsets: &[(usize, usize)],
    tags: &TagSequence,
    context: &str,
) -> Result<Vec<CharSpan>, CodecError> {
    if offsets.len() != tags.len() {
        return Err(CodecError::LengthMismatch {
            tags: tags.len(),
            tokens: offsets.len(),
        });
    }
    let mut spans = Vec::new();
    let mut run: Option<(usize, usize)> = None;
    for (&(ts, te), tag) in offsets.iter().zip(&tags.0) {
        match (tag, run.as_mut()) {
            (Tag::I, Some((_, end))) => *end = te,
            (Tag::I, None) => run = Some((ts, te)),
            (Tag::O, Some(_)) => {
                let (s, e) = run.take().unwrap();
                spans.push(CharSpan::from_context(context, s, e)?);
            }
            (Tag::O, None) => {}
        }
    }
    if let Some((s, e)) = run {
        spans.push(CharSpan::from_context(context, s, e)?);
    }
    Ok(spans)
}

/// Expands a span outward to the boundaries of the tokens it overlaps.
/// Returns `None` if it overlaps no token.
pub fn snap_to_tokens(offsets: &[(usize, usize)], span: &CharSpan, context: &str) -> Option<CharSpan> {
    let hit: Vec<&(usize, usize)> = offsets
        .iter()
        .filter(|(ts, te)| *ts < span.end && span.start < *te)
        .collect();
    let start = hit.first()?.0;
    let end = hit.last()?.1;
    CharSpan::from_context(context, start, end).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn offsets(context: &str) -> Vec<(usize, usize)> {
        tokenize(context).iter().map(|t| (t.start, t.end)).collect()
    }

    fn tags(s: &str) -> TagSequence {
        TagSequence(s.split_whitespace().map(|t| t.parse().unwrap()).collect())
    }

    #[test]
    fn no_spans_is_all_outside() {
        let ctx = "a b c";
        let t = spans_to_tags(&offsets(ctx), &[], 5).unwrap();
        assert_eq!(t, tags("O O O"));
    }

    #[test]
    fn single_span_tags_one_token() {
        let ctx = "a b c";
        let span = CharSpan::from_context(ctx, 2, 3).unwrap();
        let t = spans_to_tags(&offsets(ctx), &[span], 5).unwrap();
        assert_eq!(t.to_string(), "O I O");
    }

    #[test]
    fn two_disjoint_spans_unsorted() {
        let ctx = "a b c";
        let s0 = CharSpan::from_context(ctx, 0, 1).unwrap();
        let s2 = CharSpan::from_context(ctx, 4, 5).unwrap();
        let t = spans_to_tags(&offsets(ctx), &[s2, s0], 5).unwrap();
        assert_eq!(t, tags("I O I"));
    }

    #[test]
    fn partial_overlap_tags_whole_token() {
        let ctx = "alpha beta";
        let span = CharSpan::from_context(ctx, 3, 7).unwrap();
        let t = spans_to_tags(&offsets(ctx), &[span], 10).unwrap();
        assert_eq!(t, tags("I I"));
    }

    #[test]
    fn span_errors() {
        let ctx = "a b c";
        let bad = CharSpan {
            start: 3,
            end: 9,
            text: String::new(),
        };
        assert!(matches!(
            spans_to_tags(&offsets(ctx), &[bad], 5),
            Err(CodecError::OutOfBounds { .. })
        ));
        let rev = CharSpan {
            start: 3,
            end: 3,
            text: String::new(),
        };
        assert!(matches!(
            spans_to_tags(&offsets(ctx), &[rev], 5),
            Err(CodecError::EmptySpan { .. })
        ));
    }

    #[test]
    fn decode_runs() {
        let ctx = "w x y z";
        let off = offsets(ctx);
        assert!(tags_to_spans(&off, &tags("O O O O"), ctx).unwrap().is_empty());
        let spans = tags_to_spans(&off, &tags("O I I O"), ctx).unwrap();
        assert_eq!(spans, vec![CharSpan::from_context(ctx, 2, 5).unwrap()]);
        assert_eq!(spans[0].text, "x y");
        assert!(matches!(
            tags_to_spans(&off, &tags("O I"), ctx),
            Err(CodecError::LengthMismatch { tags: 2, tokens: 4 })
        ));
    }

    #[test]
    fn adjacent_spans_merge() {
        let ctx = "p q r";
        let off = offsets(ctx);
        let a = CharSpan::from_context(ctx, 0, 1).unwrap();
        let b = CharSpan::from_context(ctx, 2, 3).unwrap();
        let t = spans_to_tags(&off, &[a, b], 5).unwrap();
        let back = tags_to_spans(&off, &t, ctx).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].text, "p q");
    }

    #[test]
    fn snapping_extends_to_token_edges() {
        let ctx = "alpha beta gamma";
        let off = offsets(ctx);
        let s = CharSpan::from_context(ctx, 8, 12).unwrap();
        let snapped = snap_to_tokens(&off, &s, ctx).unwrap();
        assert_eq!(snapped.text, "beta gamma");
    }

    #[test]
    fn validate_detects_text_mismatch() {
        let span = CharSpan {
            start: 0,
            end: 3,
            text: "xyz".into(),
        };
        assert!(matches!(span.validate("abc def"), Err(CodecError::TextMismatch { .. })));
    }
}
