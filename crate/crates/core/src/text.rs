//! Word tokenizer and character-offset helpers.
//!
//! Offsets are Unicode scalar-value indices, never byte indices.

/// Literal that the tokenizer keeps whole and the vocabulary maps to SEP.
pub const SEP_TOKEN: &str = "<SEP>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    /// Inclusive start, in chars.
    pub start: usize,
    /// Exclusive end, in chars.
    pub end: usize,
}

pub fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// Substring by char offsets, `None` when out of range.
pub fn char_slice(s: &str, start: usize, end: usize) -> Option<String> {
    if start > end {
        return None;
    }
    let mut it = s.char_indices().map(|(b, _)| b).chain(std::iter::once(s.len()));
    let b0 = it.nth(start)?;
    let b1 = if end == start {
        b0
    } else {
        it.nth(end - start - 1)?
    };
    Some(s[b0..b1].to_string())
}

/// Splits on whitespace; alphanumeric runs form one token and every other
/// character is a token of its own. The separator literal `<SEP>` stays whole.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let sep: Vec<char> = SEP_TOKEN.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            out.push(Token {
                text: chars[start..i].iter().collect(),
                start,
                end: i,
            });
        } else if chars[i..].starts_with(&sep) {
            out.push(Token {
                text: SEP_TOKEN.to_string(),
                start: i,
                end: i + sep.len(),
            });
            i += sep.len();
        } else {
            out.push(Token {
                text: c.to_string(),
                start: i,
                end: i + 1,
            });
            i += 1;
        }
    }
    out
}

/// Joins generated tokens back into text, attaching common punctuation to
/// its neighbours.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    const NO_SPACE_BEFORE: &[&str] = &[".", ",", ";", ":", "!", "?", ")", "]", "%", "'"];
    const NO_SPACE_AFTER: &[&str] = &["(", "[", "$", "'", "-", "/"];
    let mut out = String::new();
    let mut glue_next = true;
    for tok in tokens {
        let t = tok.as_ref();
        let glue = glue_next || NO_SPACE_BEFORE.contains(&t) || t == "-" || t == "/";
        if !glue {
            out.push(' ');
        }
        out.push_str(t);
        glue_next = NO_SPACE_AFTER.contains(&t);
    }
    out
}
