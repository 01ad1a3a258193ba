//! Word-level tokens and the reserved control symbols.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const FORK: &str = "[Fork]";
pub const CHILD: &str = "[Child]";
pub const EOS: &str = "[EOS]";

/// A single symbol of the open vocabulary.
///
/// Cloning is cheap; the surface is shared.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(Arc<str>);

impl Token {
    pub fn new(surface: &str) -> Self {
        Token(Arc::from(surface))
    }

    pub fn fork() -> Self {
        Token::new(FORK)
    }

    pub fn child() -> Self {
        Token::new(CHILD)
    }

    pub fn eos() -> Self {
        Token::new(EOS)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_fork(&self) -> bool {
        &*self.0 == FORK
    }

    pub fn is_child(&self) -> bool {
        &*self.0 == CHILD
    }

    pub fn is_eos(&self) -> bool {
        &*self.0 == EOS
    }

    pub fn is_control(&self) -> bool {
        is_control_surface(&self.0)
    }
}

pub fn is_control_surface(s: &str) -> bool {
    s == FORK || s == CHILD || s == EOS
}

impl fmt::Debug for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Token {
    fn from(s: &str) -> Self {
        Token::new(s)
    }
}

impl Serialize for Token {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Token {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(Token::new(&s))
    }
}

fn is_escaped_control(w: &str) -> bool {
    is_control_surface(w.trim_start_matches('\\'))
}

/// Splits `text` on whitespace. A word that is a control surface behind zero
/// or more backslashes gains one more, so corpus text can never inject
/// control tokens and [`untokenize`] can undo it.
pub fn tokenize(text: &str) -> Vec<Token> {
    text.split_whitespace()
        .map(|w| {
            if is_escaped_control(w) {
                Token::new(&format!("\\{w}"))
            } else {
                Token::new(w)
            }
        })
        .collect()
}

/// Convenience for tests and fixtures: `toks("a b [Fork]")`.
pub fn toks(text: &str) -> Vec<Token> {
    text.split_whitespace().map(Token::new).collect()
}

pub fn detokenize(tokens: &[Token]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_str());
    }
    out
}

/// Inverse of [`tokenize`] up to whitespace: drops control tokens and one
/// level of escaping.
pub fn untokenize(tokens: &[Token]) -> String {
    let words: Vec<&str> = tokens
        .iter()
        .filter(|t| !t.is_control())
        .map(|t| {
            let s = t.as_str();
            if is_escaped_control(s) {
                &s[1..]
            } else {
                s
            }
        })
        .collect();
    words.join(" ")
}

pub fn strip_control(tokens: &[Token]) -> Vec<Token> {
    tokens.iter().filter(|t| !t.is_control()).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_surfaces_are_recognised() {
        assert!(Token::fork().is_control());
        assert!(Token::child().is_child());
        assert!(Token::eos().is_eos());
        assert!(!Token::new("fork").is_control());
    }

    #[test]
    fn tokenizer_escapes_reserved_words() {
        let t = tokenize("say [Fork] now");
        assert_eq!(t.len(), 3);
        assert!(!t[1].is_control());
        assert_eq!(t[1].as_str(), "\\[Fork]");
    }

    #[test]
    fn token_json_is_plain_string() {
        let s = serde_json::to_string(&toks("a [EOS]")).unwrap();
        assert_eq!(s, r#"["a","[EOS]"]"#);
        let back: Vec<Token> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, toks("a [EOS]"));
    }

    #[test]
    fn untokenize_inverts_escaping() {
        let text = "a [Fork] \\[EOS] \\\\[Child] b";
        let t = tokenize(text);
        assert!(t.iter().all(|t| !t.is_control()));
        assert_eq!(untokenize(&t), text);
    }
}
