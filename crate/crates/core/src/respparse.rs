//! Bounding-box extraction from free-form model output.
//!
//! The parser looks for the last 4-number tuple in the text. A tuple counts
//! when its numbers are comma-separated and it is
//!
//! * bracketed on at least one side: `[a, b, c, d]`, `(a, b, c, d)`, and the
//!   half-bracketed `a, b, c, d]` that some models emit;
//! * the whole response: `a, b, c, d`;
//! * or a pair of points: `((a, b), (c, d))` / `(a, b), (c, d)`.
//!
//! Anything else is classified rather than rejected, so [`parse_bbox`] is
//! total over all inputs.

use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, Space};

/// Responses without a tuple longer than this many characters are prose
/// (captions, apologies) rather than garbled coordinates.
pub const DEFAULT_REFUSAL_MIN_CHARS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParserConfig {
    pub refusal_min_chars: usize,
}

impl Default for ParserConfig {
    fn default() -> Self {
        Self { refusal_min_chars: DEFAULT_REFUSAL_MIN_CHARS }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParseKind {
    Box(BBox),
    Refusal,
    Malformed,
    Degenerate(BBox),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseTag {
    Box,
    Refusal,
    Malformed,
    Degenerate,
}

impl ParseKind {
    pub fn tag(&self) -> ParseTag {
        match self {
            ParseKind::Box(_) => ParseTag::Box,
            ParseKind::Refusal => ParseTag::Refusal,
            ParseKind::Malformed => ParseTag::Malformed,
            ParseKind::Degenerate(_) => ParseTag::Degenerate,
        }
    }

    pub fn bbox(&self) -> Option<&BBox> {
        match self {
            ParseKind::Box(b) | ParseKind::Degenerate(b) => Some(b),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseResult {
    pub kind: ParseKind,
    pub raw: String,
    pub note: String,
}

/// Renders corners as `[a, b, c, d]` using the shortest exact decimal form,
/// so parsing the rendering returns the same numbers.
pub fn format_corners(c: [f64; 4]) -> String {
    format!("[{}, {}, {}, {}]", c[0], c[1], c[2], c[3])
}

pub fn format_box(b: &BBox) -> String {
    format_corners(b.corners())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok {
    Num(f64),
    Comma,
    Open,
    Close,
    Other,
}

#[derive(Debug, Clone, Copy)]
struct Token {
    tok: Tok,
    end: usize,
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let at = |i: usize| chars.get(i).map(|&(_, c)| c);
    let offset = |i: usize| chars.get(i).map(|&(o, _)| o).unwrap_or(text.len());
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i].1;
        let starts_number = c.is_ascii_digit()
            || ((c == '-' || c == '+' || c == '.') && at(i + 1).is_some_and(|n| n.is_ascii_digit()))
            || ((c == '-' || c == '+') && at(i + 1) == Some('.') && at(i + 2).is_some_and(|n| n.is_ascii_digit()));
        if starts_number {
            let start = i;
            if c == '-' || c == '+' {
                i += 1;
            }
            while at(i).is_some_and(|n| n.is_ascii_digit()) {
                i += 1;
            }
            if at(i) == Some('.') && at(i + 1).is_some_and(|n| n.is_ascii_digit()) {
                i += 1;
                while at(i).is_some_and(|n| n.is_ascii_digit()) {
                    i += 1;
                }
            }
            if at(i).is_some_and(is_word) {
                // digits glued to letters ("10px", "3rd")
                while at(i).is_some_and(is_word) {
                    i += 1;
                }
                out.push(Token { tok: Tok::Other, end: offset(i) });
                continue;
            }
            let literal = &text[offset(start)..offset(i)];
            let tok = match literal.parse::<f64>() {
                Ok(v) if v.is_finite() => Tok::Num(v),
                _ => Tok::Other,
            };
            out.push(Token { tok, end: offset(i) });
            continue;
        }
        if is_word(c) {
            while at(i).is_some_and(is_word) {
                i += 1;
            }
            out.push(Token { tok: Tok::Other, end: offset(i) });
            continue;
        }
        i += 1;
        let tok = match c {
            ',' => Tok::Comma,
            '[' | '(' => Tok::Open,
            ']' | ')' => Tok::Close,
            c if c.is_whitespace() => continue,
            _ => Tok::Other,
        };
        out.push(Token { tok, end: offset(i) });
    }
    out
}

struct Candidate {
    values: [f64; 4],
    end: usize,
    pattern: &'static str,
}

fn num(t: Option<&Token>) -> Option<f64> {
    match t.map(|t| t.tok) {
        Some(Tok::Num(v)) => Some(v),
        _ => None,
    }
}

fn is(t: Option<&Token>, want: Tok) -> bool {
    t.is_some_and(|t| t.tok == want)
}

fn candidates(tokens: &[Token]) -> Vec<Candidate> {
    let mut out = Vec::new();

    // maximal comma-separated runs of numbers
    let mut i = 0;
    while i < tokens.len() {
        if num(tokens.get(i)).is_none() {
            i += 1;
            continue;
        }
        let start = i;
        let mut values = vec![num(tokens.get(i)).unwrap()];
        let mut j = i;
        while is(tokens.get(j + 1), Tok::Comma) {
            match num(tokens.get(j + 2)) {
                Some(v) => {
                    values.push(v);
                    j += 2;
                }
                None => break,
            }
        }
        if values.len() == 4 {
            let before_open = start > 0 && is(tokens.get(start - 1), Tok::Open);
            let after_close = is(tokens.get(j + 1), Tok::Close);
            let whole = start == 0 && j + 1 == tokens.len();
            if before_open || after_close || whole {
                let end = if after_close { tokens[j + 1].end } else { tokens[j].end };
                out.push(Candidate {
                    values: [values[0], values[1], values[2], values[3]],
                    end,
                    pattern: "tuple",
                });
            }
        }
        i = j + 1;
    }

    // (a, b), (c, d) with optional outer parentheses
    use Tok::*;
    for i in 0..tokens.len() {
        let shape = [Open, Num(0.0), Comma, Num(0.0), Close, Comma, Open, Num(0.0), Comma, Num(0.0), Close];
        if i + shape.len() > tokens.len() {
            break;
        }
        let window = &tokens[i..i + shape.len()];
        let matches = window.iter().zip(shape.iter()).all(|(t, s)| match (t.tok, s) {
            (Num(_), Num(_)) => true,
            (a, b) => a == *b,
        });
        if !matches {
            continue;
        }
        let vals: Vec<f64> = window.iter().filter_map(|t| num(Some(t))).collect();
        let last = i + shape.len() - 1;
        let wrapped = i > 0 && is(tokens.get(i - 1), Open) && is(tokens.get(last + 1), Close);
        let end = if wrapped { tokens[last + 1].end } else { tokens[last].end };
        out.push(Candidate { values: [vals[0], vals[1], vals[2], vals[3]], end, pattern: "point pair" });
    }
    out
}

/// Extracts a box from `text`, expressed in `space`.
pub fn parse_bbox(text: &str, space: Space) -> ParseResult {
    parse_bbox_with(text, space, &ParserConfig::default())
}

pub fn parse_bbox_with(text: &str, space: Space, cfg: &ParserConfig) -> ParseResult {
    let result = |kind, note: String| ParseResult { kind, raw: text.to_string(), note };

    let tokens = tokenize(text);
    let Some(best) = candidates(&tokens).into_iter().max_by_key(|c| c.end) else {
        let len = text.trim().chars().count();
        return if len > cfg.refusal_min_chars {
            result(ParseKind::Refusal, format!("no coordinates in {len} chars of text"))
        } else {
            result(ParseKind::Malformed, format!("no coordinates in {len} chars of text"))
        };
    };

    let [a, b, c, d] = best.values;
    let swapped = a > c || b > d;
    let (bbox, clamped) = match BBox::clamped(a, b, c, d, space) {
        Ok(v) => v,
        Err(e) => return result(ParseKind::Malformed, e.to_string()),
    };
    let mut note = best.pattern.to_string();
    if swapped {
        note.push_str(", reordered");
    }
    if clamped {
        note.push_str(", clamped");
    }
    if bbox.is_degenerate() {
        result(ParseKind::Degenerate(bbox), note)
    } else {
        result(ParseKind::Box(bbox), note)
    }
}
