//! Recovery of six (speed, curvature) commands from free-form model output.
//!
//! Parsing runs in two passes. The strict pass accepts only a bare bracketed
//! list of six `(v, k)` pairs. When that fails, the correction pass pulls
//! every numeric literal out of the text in reading order and, if there are
//! exactly twelve, pairs them up as `v1, k1, v2, k2, ...`.

use std::sync::OnceLock;

use regex::Regex;

use crate::domain::{ActionState, ErrorClass, ParseStatus, HORIZON};

/// Number of literals a complete command list carries.
pub const LITERAL_COUNT: usize = 2 * HORIZON;

#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutcome {
    pub status: ParseStatus,
    pub actions: Option<Vec<ActionState>>,
    pub error_class: Option<ErrorClass>,
}

impl ParseOutcome {
    fn strict(actions: Vec<ActionState>) -> Self {
        Self {
            status: ParseStatus::Strict,
            actions: Some(actions),
            error_class: None,
        }
    }

    fn corrected(actions: Vec<ActionState>, class: ErrorClass) -> Self {
        Self {
            status: ParseStatus::Corrected,
            actions: Some(actions),
            error_class: Some(class),
        }
    }

    fn failed(class: ErrorClass) -> Self {
        Self {
            status: ParseStatus::Failed,
            actions: None,
            error_class: Some(class),
        }
    }

    pub fn is_accepted(&self) -> bool {
        self.status != ParseStatus::Failed
    }
}

fn literal_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"[+-]?(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:[eE][+-]?[0-9]+)?").expect("literal regex")
    })
}

fn anchored_literal_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^[+-]?(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:[eE][+-]?[0-9]+)?").expect("literal regex")
    })
}

/// Every numeric literal in reading order.
pub fn extract_literals(text: &str) -> Vec<f64> {
    literal_re()
        .find_iter(text)
        .filter_map(|m| m.as_str().parse::<f64>().ok())
        .collect()
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        let rest = &self.text[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn eat(&mut self, ch: char) -> bool {
        self.skip_ws();
        if self.text[self.pos..].starts_with(ch) {
            self.pos += ch.len_utf8();
            true
        } else {
            false
        }
    }

    fn number(&mut self) -> Option<f64> {
        self.skip_ws();
        let m = anchored_literal_re().find(&self.text[self.pos..])?;
        let value = m.as_str().parse().ok()?;
        self.pos += m.end();
        Some(value)
    }

    fn pair(&mut self) -> Option<(f64, f64)> {
        if !self.eat('(') {
            return None;
        }
        let v = self.number()?;
        if !self.eat(',') {
            return None;
        }
        let k = self.number()?;
        if !self.eat(')') {
            return None;
        }
        Some((v, k))
    }
}

/// Parses a bracketed list of pairs starting at the beginning of `text`.
/// Returns the pairs and the byte length consumed.
fn bracketed_pairs(text: &str) -> Option<(Vec<(f64, f64)>, usize)> {
    let mut c = Cursor { text, pos: 0 };
    if !c.eat('[') {
        return None;
    }
    let mut pairs = vec![c.pair()?];
    loop {
        if c.eat(']') {
            return Some((pairs, c.pos));
        }
        if !c.eat(',') {
            return None;
        }
        pairs.push(c.pair()?);
    }
}

/// True when a well-formed list of six pairs occurs anywhere in the text.
fn contains_command_list(text: &str) -> bool {
    text.match_indices('[').any(|(i, _)| {
        bracketed_pairs(&text[i..]).is_some_and(|(pairs, _)| pairs.len() == HORIZON)
    })
}

fn to_actions(pairs: impl IntoIterator<Item = (f64, f64)>) -> Option<Vec<ActionState>> {
    pairs
        .into_iter()
        .map(|(v, k)| ActionState::new(v, k).ok())
        .collect()
}

/// Accepts exactly a bracketed list of six `(v, k)` pairs, with optional
/// whitespace around tokens and nothing else.
pub fn parse_strict(text: &str) -> ParseOutcome {
    let trimmed = text.trim();
    match bracketed_pairs(trimmed) {
        Some((pairs, used)) if used == trimmed.len() && pairs.len() == HORIZON => {
            match to_actions(pairs) {
                Some(actions) => ParseOutcome::strict(actions),
                None => ParseOutcome::failed(ErrorClass::OutOfRange),
            }
        }
        _ => ParseOutcome::failed(classify_error(text)),
    }
}

/// Twelve-literal fallback. Any literal count other than twelve, or a value
/// outside the action bounds, fails.
pub fn parse_corrected(text: &str) -> ParseOutcome {
    let literals = extract_literals(text);
    if literals.len() != LITERAL_COUNT {
        return ParseOutcome::failed(classify_error(text));
    }
    let pairs = literals.chunks_exact(2).map(|c| (c[0], c[1]));
    match to_actions(pairs) {
        Some(actions) => {
            let class = if contains_command_list(text) {
                ErrorClass::ExtraText
            } else {
                ErrorClass::MissingDelimiters
            };
            ParseOutcome::corrected(actions, class)
        }
        None => ParseOutcome::failed(ErrorClass::OutOfRange),
    }
}

/// Strict pass, then the correction pass if the strict one fails.
pub fn parse_actions(text: &str) -> ParseOutcome {
    let strict = parse_strict(text);
    if strict.is_accepted() {
        strict
    } else {
        parse_corrected(text)
    }
}

/// Labels a text that is not a strictly valid command list. Checks run in a
/// fixed priority order: no literals, wrong literal count, no bracketed list,
/// list embedded in other text, values out of range.
pub fn classify_error(text: &str) -> ErrorClass {
    let count = extract_literals(text).len();
    if count == 0 {
        return ErrorClass::NonNumeric;
    }
    if count != LITERAL_COUNT {
        return ErrorClass::WrongCount;
    }
    if !contains_command_list(text) {
        return ErrorClass::MissingDelimiters;
    }
    let trimmed = text.trim();
    let exact = bracketed_pairs(trimmed).is_some_and(|(_, used)| used == trimmed.len());
    if !exact {
        return ErrorClass::ExtraText;
    }
    ErrorClass::OutOfRange
}
