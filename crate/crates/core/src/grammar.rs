//! The four-tag turn layout and the key-value action record.
//!
//! A well-formed turn is exactly
//!
//! ```text
//! <Progress Estimation>...</Progress Estimation>
//! <Decision Reasoning>...</Decision Reasoning>
//! <Action>...</Action>
//! <Memory Summary>...</Memory Summary>
//! ```
//!
//! with nothing but whitespace between the pairs. The action block holds a
//! record `{"action": "CLICK", "value": "Apply", "position": [0.3, 0.66]}`;
//! `position` is `null` for non-spatial types. See `docs/PROTOCOL.md`.

use thiserror::Error;

use crate::model::{ActionInvariantError, ActionSpace, AgentTurn, GuiAction, Point};

/// Tag names in their required order.
pub const TAGS: [&str; 4] = ["Progress Estimation", "Decision Reasoning", "Action", "Memory Summary"];

/// Labeler-side spelling of the summary tag, mapped onto `Memory Summary`.
pub const LABELER_SUMMARY_TAG: &str = "History Summary";

pub const ACTION_KEYS: [&str; 3] = ["action", "value", "position"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct TagHit {
    tag: usize,
    closing: bool,
    start: usize,
    end: usize,
}

/// Recognizes `<Name>` / `</Name>` at the start of `s`, tolerating whitespace
/// right after `<`, around `/` and before `>`.
fn match_tag(s: &str, names: &[&str]) -> Option<(usize, bool, usize)> {
    let b = s.as_bytes();
    if b.first() != Some(&b'<') {
        return None;
    }
    let mut i = 1;
    let skip_ws = |i: &mut usize| {
        while *i < b.len() && b[*i].is_ascii_whitespace() {
            *i += 1;
        }
    };
    skip_ws(&mut i);
    let closing = b.get(i) == Some(&b'/');
    if closing {
        i += 1;
        skip_ws(&mut i);
    }
    for (k, name) in names.iter().enumerate() {
        if s[i..].starts_with(name) {
            let mut j = i + name.len();
            skip_ws(&mut j);
            if b.get(j) == Some(&b'>') {
                return Some((k, closing, j + 1));
            }
        }
    }
    None
}

fn scan_tags(text: &str, names: &[&str]) -> Vec<TagHit> {
    let mut hits = Vec::new();
    let mut pos = 0;
    while let Some(off) = text[pos..].find('<') {
        let start = pos + off;
        if let Some((tag, closing, len)) = match_tag(&text[start..], names) {
            hits.push(TagHit { tag, closing, start, end: start + len });
            pos = start + len;
        } else {
            pos = start + 1;
        }
    }
    hits
}

/// Exact-structure check: the four pairs appear once each, in order, with only
/// whitespace outside them. Block contents are unconstrained.
pub fn check_tags(text: &str) -> bool {
    block_spans(text).is_some()
}

/// Inner byte ranges of the four blocks when the structure is valid.
fn block_spans(text: &str) -> Option<[(usize, usize); 4]> {
    let hits = scan_tags(text, &TAGS);
    if hits.len() != 8 {
        return None;
    }
    let mut spans = [(0, 0); 4];
    let mut cursor = 0;
    for (k, span) in spans.iter_mut().enumerate() {
        let (open, close) = (hits[2 * k], hits[2 * k + 1]);
        if open.tag != k || open.closing || close.tag != k || !close.closing {
            return None;
        }
        if !text[cursor..open.start].trim().is_empty() {
            return None;
        }
        *span = (open.end, close.start);
        cursor = close.end;
    }
    text[cursor..].trim().is_empty().then_some(spans)
}

/// Structured reasons an action record is rejected.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActionParseError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("unexpected key {0:?}")]
    ExtraKey(String),
    #[error("missing key {0:?}")]
    MissingKey(String),
    #[error("unknown action type {0}")]
    UnknownActionType(String),
    #[error("bad coordinate: {0}")]
    BadCoordinate(String),
}

/// Minimal value model for the record literal.
#[derive(Debug, Clone, PartialEq)]
enum Lit {
    Null,
    Bool(bool),
    Num(f64),
    Str(String),
    List(Vec<Lit>),
    Map(Vec<(String, Lit)>),
}

impl Lit {
    fn describe(&self) -> String {
        match self {
            Lit::Null => "null".into(),
            Lit::Bool(b) => b.to_string(),
            Lit::Num(n) => n.to_string(),
            Lit::Str(s) => format!("{s:?}"),
            Lit::List(_) => "a list".into(),
            Lit::Map(_) => "a record".into(),
        }
    }
}

/// Recursive-descent reader for JSON literals that also accepts single-quoted
/// strings (Python dict style).
struct LitReader<'a> {
    s: &'a [u8],
    src: &'a str,
    i: usize,
}

type LitResult<T> = Result<T, String>;

impl<'a> LitReader<'a> {
    fn new(src: &'a str) -> Self {
        Self { s: src.as_bytes(), src, i: 0 }
    }

    fn ws(&mut self) {
        while matches!(self.s.get(self.i), Some(b' ' | b'\t' | b'\n' | b'\r')) {
            self.i += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.s.get(self.i).copied()
    }

    fn expect(&mut self, c: u8) -> LitResult<()> {
        if self.peek() == Some(c) {
            self.i += 1;
            Ok(())
        } else {
            Err(format!("expected '{}' at byte {}", c as char, self.i))
        }
    }

    fn value(&mut self, depth: usize) -> LitResult<Lit> {
        if depth > 32 {
            return Err("nesting too deep".into());
        }
        self.ws();
        match self.peek() {
            Some(b'{') => self.map(depth),
            Some(b'[') => self.list(depth),
            Some(q @ (b'"' | b'\'')) => self.string(q).map(Lit::Str),
            Some(b'-' | b'0'..=b'9') => self.number().map(Lit::Num),
            Some(_) => self.keyword(),
            None => Err("unexpected end of input".into()),
        }
    }

    fn keyword(&mut self) -> LitResult<Lit> {
        for (word, lit) in [("null", Lit::Null), ("true", Lit::Bool(true)), ("false", Lit::Bool(false))] {
            if self.src[self.i..].starts_with(word) {
                self.i += word.len();
                return Ok(lit);
            }
        }
        Err(format!("unexpected character at byte {}", self.i))
    }

    fn map(&mut self, depth: usize) -> LitResult<Lit> {
        self.expect(b'{')?;
        let mut entries: Vec<(String, Lit)> = Vec::new();
        self.ws();
        if self.peek() == Some(b'}') {
            self.i += 1;
            return Ok(Lit::Map(entries));
        }
        loop {
            self.ws();
            let key = match self.peek() {
                Some(q @ (b'"' | b'\'')) => self.string(q)?,
                _ => return Err(format!("expected a quoted key at byte {}", self.i)),
            };
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(format!("duplicate key {key:?}"));
            }
            self.ws();
            self.expect(b':')?;
            let v = self.value(depth + 1)?;
            entries.push((key, v));
            self.ws();
            match self.peek() {
                Some(b',') => self.i += 1,
                Some(b'}') => {
                    self.i += 1;
                    return Ok(Lit::Map(entries));
                }
                _ => return Err(format!("expected ',' or '}}' at byte {}", self.i)),
            }
        }
    }

    fn list(&mut self, depth: usize) -> LitResult<Lit> {
        self.expect(b'[')?;
        let mut items = Vec::new();
        self.ws();
        if self.peek() == Some(b']') {
            self.i += 1;
            return Ok(Lit::List(items));
        }
        loop {
            items.push(self.value(depth + 1)?);
            self.ws();
            match self.peek() {
                Some(b',') => self.i += 1,
                Some(b']') => {
                    self.i += 1;
                    return Ok(Lit::List(items));
                }
                _ => return Err(format!("expected ',' or ']' at byte {}", self.i)),
            }
        }
    }

    fn hex4(&mut self) -> LitResult<u32> {
        let h = self.src.get(self.i..self.i + 4).ok_or("truncated unicode escape")?;
        if !h.bytes().all(|c| c.is_ascii_hexdigit()) {
            return Err("bad unicode escape".into());
        }
        self.i += 4;
        Ok(u32::from_str_radix(h, 16).expect("validated hex"))
    }

    fn string(&mut self, quote: u8) -> LitResult<String> {
        self.expect(quote)?;
        let mut out = String::new();
        loop {
            let c = self.peek().ok_or("unterminated string")?;
            match c {
                c if c == quote => {
                    self.i += 1;
                    return Ok(out);
                }
                b'\\' => {
                    self.i += 1;
                    let e = self.peek().ok_or("unterminated escape")?;
                    self.i += 1;
                    match e {
                        b'"' => out.push('"'),
                        b'\'' if quote == b'\'' => out.push('\''),
                        b'\\' => out.push('\\'),
                        b'/' => out.push('/'),
                        b'b' => out.push('\u{8}'),
                        b'f' => out.push('\u{c}'),
                        b'n' => out.push('\n'),
                        b'r' => out.push('\r'),
                        b't' => out.push('\t'),
                        b'u' => {
                            let hi = self.hex4()?;
                            let cp = if (0xD800..0xDC00).contains(&hi) {
                                if !self.src[self.i..].starts_with("\\u") {
                                    return Err("lone leading surrogate".into());
                                }
                                self.i += 2;
                                let lo = self.hex4()?;
                                if !(0xDC00..0xE000).contains(&lo) {
                                    return Err("invalid trailing surrogate".into());
                                }
                                0x10000 + ((hi - 0xD800) << 10) + (lo - 0xDC00)
                            } else if (0xDC00..0xE000).contains(&hi) {
                                return Err("lone trailing surrogate".into());
                            } else {
                                hi
                            };
                            out.push(char::from_u32(cp).ok_or("invalid code point")?);
                        }
                        _ => return Err(format!("invalid escape at byte {}", self.i - 1)),
                    }
                }
                c if c < 0x20 => return Err("control character in string".into()),
                _ => {
                    let ch = self.src[self.i..].chars().next().expect("in bounds");
                    out.push(ch);
                    self.i += ch.len_utf8();
                }
            }
        }
    }

    /// JSON number grammar: `-?(0|[1-9][0-9]*)(\.[0-9]+)?([eE][+-]?[0-9]+)?`.
    fn number(&mut self) -> LitResult<f64> {
        let start = self.i;
        let digits = |r: &mut Self| {
            let s = r.i;
            while matches!(r.peek(), Some(b'0'..=b'9')) {
                r.i += 1;
            }
            r.i - s
        };
        if self.peek() == Some(b'-') {
            self.i += 1;
        }
        match self.peek() {
            Some(b'0') => self.i += 1,
            Some(b'1'..=b'9') => {
                digits(self);
            }
            _ => return Err(format!("invalid number at byte {start}")),
        }
        if self.peek() == Some(b'.') {
            self.i += 1;
            if digits(self) == 0 {
                return Err(format!("invalid number at byte {start}"));
            }
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            self.i += 1;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.i += 1;
            }
            if digits(self) == 0 {
                return Err(format!("invalid number at byte {start}"));
            }
        }
        let v: f64 = self.src[start..self.i].parse().map_err(|_| format!("invalid number at byte {start}"))?;
        if !v.is_finite() {
            return Err("number out of range".into());
        }
        Ok(v)
    }
}

fn parse_record(text: &str) -> Result<Vec<(String, Lit)>, ActionParseError> {
    let mut r = LitReader::new(text.trim());
    let lit = r.value(0).map_err(ActionParseError::MalformedRecord)?;
    r.ws();
    if r.i != r.s.len() {
        return Err(ActionParseError::MalformedRecord(format!("trailing characters at byte {}", r.i)));
    }
    match lit {
        Lit::Map(entries) => Ok(entries),
        other => Err(ActionParseError::MalformedRecord(format!("expected a record, found {}", other.describe()))),
    }
}

fn check_keys(entries: &[(String, Lit)]) -> Result<(), ActionParseError> {
    if let Some((k, _)) = entries.iter().find(|(k, _)| !ACTION_KEYS.contains(&k.as_str())) {
        return Err(ActionParseError::ExtraKey(k.clone()));
    }
    if let Some(k) = ACTION_KEYS.iter().find(|k| !entries.iter().any(|(e, _)| e == *k)) {
        return Err(ActionParseError::MissingKey((*k).to_owned()));
    }
    Ok(())
}

/// True when the text is a record with exactly the keys `action`,
/// `value` and `position`.
pub fn check_action_format(text: &str) -> bool {
    parse_record(text).and_then(|e| check_keys(&e)).is_ok()
}

/// Turns an action record into a [`GuiAction`].
pub fn parse_action(text: &str, space: &ActionSpace) -> Result<GuiAction, ActionParseError> {
    let entries = parse_record(text)?;
    check_keys(&entries)?;
    let get = |k: &str| &entries.iter().find(|(e, _)| e == k).expect("keys checked").1;

    let action_type = match get("action") {
        Lit::Str(s) if space.contains(s) => s.clone(),
        other => return Err(ActionParseError::UnknownActionType(other.describe())),
    };
    let value = match get("value") {
        Lit::Str(s) => s.clone(),
        other => return Err(ActionParseError::MalformedRecord(format!("value must be a string, found {}", other.describe()))),
    };
    let spatial = space.is_spatial(&action_type).expect("type checked");
    let position = match (spatial, get("position")) {
        (false, Lit::Null) => None,
        (false, other) => {
            return Err(ActionParseError::BadCoordinate(format!(
                "{action_type} takes no position, found {}",
                other.describe()
            )))
        }
        (true, Lit::List(items)) => match items.as_slice() {
            [Lit::Num(x), Lit::Num(y)] if (0.0..=1.0).contains(x) && (0.0..=1.0).contains(y) => {
                Some(Point::new(*x, *y))
            }
            [Lit::Num(x), Lit::Num(y)] => {
                return Err(ActionParseError::BadCoordinate(format!("({x}, {y}) outside [0, 1]")))
            }
            _ => return Err(ActionParseError::BadCoordinate("position must be [x, y]".into())),
        },
        (true, other) => {
            return Err(ActionParseError::BadCoordinate(format!(
                "{action_type} needs [x, y], found {}",
                other.describe()
            )))
        }
    };
    Ok(GuiAction { action_type, value, position })
}

/// Formats a coordinate with at most four decimals and no trailing zeros.
pub fn format_coord(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".to_owned() } else { s.to_owned() }
}

/// Canonical record text for an action.
pub fn format_action(action: &GuiAction) -> String {
    let value = serde_json::to_string(&action.value).expect("strings always serialize");
    let position = match action.position {
        Some(p) => format!("[{}, {}]", format_coord(p.x), format_coord(p.y)),
        None => "null".to_owned(),
    };
    format!(r#"{{"action": "{}", "value": {value}, "position": {position}}}"#, action.action_type)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrammarError {
    #[error("invalid action: {0}")]
    InvalidAction(#[from] ActionInvariantError),
    #[error("field {0} contains a tag")]
    TagInContent(&'static str),
}

/// Emits the canonical four-tag layout.
pub fn serialize_turn(
    progress: &str,
    decision: &str,
    action: &GuiAction,
    summary: &str,
    space: &ActionSpace,
) -> Result<String, GrammarError> {
    action.check(space)?;
    for (name, field) in [("progress", progress), ("decision", decision), ("summary", summary)] {
        if !scan_tags(field, &TAGS).is_empty() {
            return Err(GrammarError::TagInContent(name));
        }
    }
    if !scan_tags(&action.value, &TAGS).is_empty() {
        return Err(GrammarError::TagInContent("value"));
    }
    let blocks = [progress.to_owned(), decision.to_owned(), format_action(action), summary.to_owned()];
    let mut out = String::new();
    for (k, body) in blocks.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        out.push_str(&format!("<{0}>\n{body}\n</{0}>", TAGS[k]));
    }
    Ok(out)
}

/// Best-effort extraction of a block: first opening tag, then the first
/// closing tag after it.
fn loose_block(text: &str, hits: &[TagHit], tag: usize) -> Option<String> {
    let open = hits.iter().find(|h| h.tag == tag && !h.closing)?;
    let close = hits.iter().find(|h| h.tag == tag && h.closing && h.start >= open.end)?;
    Some(text[open.end..close.start].trim().to_owned())
}

/// Splits raw policy text into an [`AgentTurn`]. Never fails: broken
/// structure is reported through `tags_ok` and absent fields.
pub fn parse_turn(raw: &str, space: &ActionSpace) -> AgentTurn {
    let mut turn = AgentTurn { raw_text: raw.to_owned(), ..AgentTurn::default() };
    let fields: [String; 4] = match block_spans(raw) {
        Some(spans) => {
            turn.tags_ok = true;
            spans.map(|(a, b)| raw[a..b].trim().to_owned())
        }
        None => {
            let hits = scan_tags(raw, &TAGS);
            [0, 1, 2, 3].map(|k| loose_block(raw, &hits, k).unwrap_or_default())
        }
    };
    let [progress, decision, action, summary] = fields;
    turn.parsed_action = parse_action(&action, space).ok();
    turn.progress_estimation = progress;
    turn.decision_reasoning = decision;
    turn.action_text = action;
    turn.history_summary = summary;
    turn
}

/// Inner text of a named block (first occurrence), trimmed.
pub fn extract_block(text: &str, name: &str) -> Option<String> {
    let hits = scan_tags(text, &[name]);
    loose_block(text, &hits, 0)
}
