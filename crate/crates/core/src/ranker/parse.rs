//! Tolerant parsing of a model's ranking response.

use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::corpus::tokenize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no expected entity recognized in response")]
pub struct ParseFailure;

/// A full permutation of the expected entities plus what had to be fixed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRanking {
    /// Indices into the expected list, best first.
    pub order: Vec<usize>,
    /// Expected entities missing from the response, appended in presentation order.
    pub repairs: usize,
    /// Fragments that matched nothing, or repeated an entity already placed.
    pub dropped: usize,
}

fn inline_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|\s)(?:\(?\d{1,3}[.):\]]|#\d{1,3})\s+").expect("valid regex"))
}

fn leading_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*(?:[-*•]+|\(?\d{1,3}[.):\]]|#\d{1,3}|\[\d{1,3}\]|rank\s*\d{1,3}\s*[:.)-])\s*")
            .expect("valid regex")
    })
}

fn fragments(text: &str) -> Vec<String> {
    text.split(['>', '\n', '\r'])
        .flat_map(|piece| inline_marker().split(piece).map(str::to_owned).collect::<Vec<_>>())
        .map(|piece| {
            let stripped = leading_marker().replace(&piece, "");
            stripped
                .trim()
                .trim_matches(|c: char| "{}[]()\"'`*_".contains(c) || c.is_whitespace())
                .trim_end_matches(['.', ',', ';', ':'])
                .trim()
                .to_owned()
        })
        .filter(|p| !p.is_empty())
        .collect()
}

/// Matches `fragment` to an expected surface: exact (case-insensitive) first,
/// then equal token sequences, then the longest surface whose tokens prefix
/// the fragment's tokens.
fn match_fragment(fragment: &str, expected: &[String], expected_tokens: &[Option<Vec<String>>]) -> Option<usize> {
    let lowered = fragment.to_lowercase();
    if let Some(i) = expected.iter().position(|s| s.trim().to_lowercase() == lowered) {
        return Some(i);
    }
    let tokens = tokenize(fragment).ok()?;
    if let Some(i) = expected_tokens.iter().position(|t| t.as_deref() == Some(&tokens[..])) {
        return Some(i);
    }
    expected_tokens
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.as_ref().filter(|t| tokens.starts_with(t)).map(|t| (i, t.len())))
        .max_by_key(|&(i, len)| (len, std::cmp::Reverse(i)))
        .map(|(i, _)| i)
}

/// Parses `text` into a permutation of `expected` (surfaces in presentation order).
pub fn parse_response<S: AsRef<str>>(text: &str, expected: &[S]) -> Result<ParsedRanking, ParseFailure> {
    let expected: Vec<String> = expected.iter().map(|s| s.as_ref().to_owned()).collect();
    let expected_tokens: Vec<Option<Vec<String>>> = expected.iter().map(|s| tokenize(s).ok()).collect();
    let mut placed = vec![false; expected.len()];
    let mut order = Vec::with_capacity(expected.len());
    let mut dropped = 0;
    for fragment in fragments(text) {
        match match_fragment(&fragment, &expected, &expected_tokens) {
            Some(i) if !placed[i] => {
                placed[i] = true;
                order.push(i);
            }
            _ => dropped += 1,
        }
    }
    if order.is_empty() {
        return Err(ParseFailure);
    }
    let missing: Vec<usize> = (0..expected.len()).filter(|&i| !placed[i]).collect();
    let repairs = missing.len();
    order.extend(missing);
    Ok(ParsedRanking {
        order,
        repairs,
        dropped,
    })
}
