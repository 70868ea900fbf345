use std::collections::{BTreeSet, HashMap};

use crate::text::{tokenize, SEP_TOKEN};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;

const RESERVED: [&str; 5] = ["<PAD>", "<BOS>", "<EOS>", SEP_TOKEN, "<UNK>"];

/// Token-to-id map with the five reserved ids fixed at 0..5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from every token of `texts`. Non-reserved tokens
    /// are ordered lexicographically so the result does not depend on input
    /// order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            for tok in tokenize(text) {
                words.insert(tok.text);
            }
        }
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !RESERVED.contains(&w.as_str())))
            .collect();
        Self::from_tokens(tokens).expect("reserved prefix present")
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Option<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return None;
        }
        let index: HashMap<String, usize> = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        if index.len() != tokens.len() {
            return None;
        }
        Some(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<UNK>")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(&t.text)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocab::build(["zeta alpha <SEP> alpha"]);
        assert_eq!(v.token(PAD), "<PAD>");
        assert_eq!(v.token(BOS), "<BOS>");
        assert_eq!(v.token(EOS), "<EOS>");
        assert_eq!(v.id("<SEP>"), SEP);
        assert_eq!(v.token(UNK), "<UNK>");
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("alpha"), 5);
        assert_eq!(v.id("missing"), UNK);
    }

    #[test]
    fn build_is_order_independent() {
        assert_eq!(Vocab::build(["b a", "c"]), Vocab::build(["c", "a b"]));
    }

    #[test]
    fn from_tokens_rejects_bad_prefix() {
        assert!(Vocab::from_tokens(vec!["x".into()]).is_none());
        let v = Vocab::build(["q"]);
        assert_eq!(Vocab::from_tokens(v.tokens().to_vec()).unwrap(), v);
    }
}
