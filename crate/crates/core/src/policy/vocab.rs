//! Closed word-level vocabulary with punctuation splitting and coordinate
//! bin tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{format_coord, TAGS};
use crate::model::ActionSpace;

pub const UNK: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK_TEXT: &str = "<unk>";
pub const EOS_TEXT: &str = "<eos>";
pub const PUNCT: [char; 10] = ['{', '}', '[', ']', '"', ':', ',', '.', ';', '\''];
pub const KEY_WORDS: [&str; 4] = ["action", "value", "position", "null"];
/// Words of the built-in progress sentence.
pub const STEP_WORDS: [&str; 2] = ["steps", "done"];
pub const MAX_NUMBER: u32 = 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Special,
    TagOpen(usize),
    TagClose(usize),
    Punct(char),
    ActionType,
    Number(u32),
    XBin(usize),
    YBin(usize),
    Word,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocabError {
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),
}

/// Serializable description from which a [`Vocab`] is rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub bins: usize,
    pub action_types: Vec<String>,
    pub words: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    spec: VocabSpec,
    tokens: Vec<String>,
    classes: Vec<TokenClass>,
    index: HashMap<String, u32>,
    action_type_ids: Vec<u32>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
    }
}

pub fn tag_open(k: usize) -> String {
    format!("<{}>", TAGS[k])
}

pub fn tag_close(k: usize) -> String {
    format!("</{}>", TAGS[k])
}

impl Vocab {
    pub fn new(bins: usize, space: &ActionSpace, words: &[String]) -> Self {
        let spec = VocabSpec {
            bins,
            action_types: space.names().map(str::to_owned).collect(),
            words: words.to_vec(),
        };
        Self::from_spec(spec)
    }

    pub fn from_spec(spec: VocabSpec) -> Self {
        let mut v = Vocab {
            spec: spec.clone(),
            tokens: Vec::new(),
            classes: Vec::new(),
            index: HashMap::new(),
            action_type_ids: Vec::new(),
        };
        v.push(UNK_TEXT, TokenClass::Special);
        v.push(EOS_TEXT, TokenClass::Special);
        for k in 0..TAGS.len() {
            v.push(&tag_open(k), TokenClass::TagOpen(k));
            v.push(&tag_close(k), TokenClass::TagClose(k));
        }
        for c in PUNCT {
            v.push(&c.to_string(), TokenClass::Punct(c));
        }
        for w in KEY_WORDS.iter().chain(&STEP_WORDS) {
            v.push(w, TokenClass::Word);
        }
        for t in &spec.action_types {
            if let Some(id) = v.push(t, TokenClass::ActionType) {
                v.action_type_ids.push(id);
            }
        }
        for n in 0..=MAX_NUMBER {
            v.push(&n.to_string(), TokenClass::Number(n));
        }
        for b in 0..spec.bins {
            v.push(&format!("<x{b}>"), TokenClass::XBin(b));
        }
        for b in 0..spec.bins {
            v.push(&format!("<y{b}>"), TokenClass::YBin(b));
        }
        // Lowercased action types double as summary items.
        let lowered: Vec<String> =
            spec.action_types.iter().flat_map(|t| t.to_lowercase().split(' ').map(str::to_owned).collect::<Vec<_>>()).collect();
        for w in spec.words.iter().chain(&lowered) {
            v.push(w, TokenClass::Word);
        }
        v
    }

    fn push(&mut self, text: &str, class: TokenClass) -> Option<u32> {
        if self.index.contains_key(text) {
            return None;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(text.to_owned());
        self.classes.push(class);
        self.index.insert(text.to_owned(), id);
        Some(id)
    }

    pub fn spec(&self) -> &VocabSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bins(&self) -> usize {
        self.spec.bins
    }

    pub fn id(&self, text: &str) -> Option<u32> {
        self.index.get(text).copied()
    }

    pub fn text(&self, id: u32) -> Result<&str, VocabError> {
        self.tokens.get(id as usize).map(String::as_str).ok_or(VocabError::UnknownToken(id))
    }

    pub fn class(&self, id: u32) -> TokenClass {
        self.classes[id as usize]
    }

    pub fn check(&self, ids: &[u32]) -> Result<(), VocabError> {
        match ids.iter().find(|&&t| t as usize >= self.len()) {
            Some(&t) => Err(VocabError::UnknownToken(t)),
            None => Ok(()),
        }
    }

    pub fn action_type_ids(&self) -> &[u32] {
        &self.action_type_ids
    }

    pub fn is_word(&self, id: u32) -> bool {
        matches!(self.class(id), TokenClass::Word | TokenClass::Number(_) | TokenClass::ActionType)
    }

    pub fn tag_open_id(&self, k: usize) -> u32 {
        self.id(&tag_open(k)).expect("tags are always present")
    }

    pub fn tag_close_id(&self, k: usize) -> u32 {
        self.id(&tag_close(k)).expect("tags are always present")
    }

    pub fn bin_of(&self, v: f64) -> usize {
        ((v * self.bins() as f64).floor().max(0.0) as usize).min(self.bins() - 1)
    }

    pub fn bin_center(&self, b: usize) -> f64 {
        (b as f64 + 0.5) / self.bins() as f64
    }

    pub fn xbin_id(&self, v: f64) -> u32 {
        self.id(&format!("<x{}>", self.bin_of(v))).expect("bin tokens present")
    }

    pub fn ybin_id(&self, v: f64) -> u32 {
        self.id(&format!("<y{}>", self.bin_of(v))).expect("bin tokens present")
    }

    /// Splits text into token ids. Unknown words become [`UNK`]; numbers
    /// inside a `position` list become coordinate bins.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut coord = CoordState::Idle;
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c == '<' {
                if let Some((id, len)) = self.match_tag(&chars[i..]) {
                    out.push(id);
                    coord = CoordState::Idle;
                    i += len;
                    continue;
                }
            }
            if PUNCT.contains(&c) {
                let id = self.id(&c.to_string()).expect("punctuation present");
                coord = coord.after_punct(c);
                out.push(id);
                i += 1;
                continue;
            }
            if let Some(len) = number_len(&chars[i..]) {
                let lit: String = chars[i..i + len].iter().collect();
                let id = match (coord, lit.parse::<f64>()) {
                    (CoordState::WantX, Ok(v)) => self.xbin_id(v.clamp(0.0, 1.0)),
                    (CoordState::WantY, Ok(v)) => self.ybin_id(v.clamp(0.0, 1.0)),
                    _ => self.id(&lit).filter(|&t| matches!(self.class(t), TokenClass::Number(_))).unwrap_or(UNK),
                };
                coord = coord.after_number();
                out.push(id);
                i += len;
                continue;
            }
            let start = i;
            while i < chars.len() && !chars[i].is_whitespace() && !PUNCT.contains(&chars[i]) && chars[i] != '<' {
                i += 1;
            }
            if i == start {
                // A lone '<' that opens no tag.
                out.push(UNK);
                i += 1;
                coord = CoordState::Idle;
                continue;
            }
            let word: String = chars[start..i].iter().collect();
            let (id, end) = self.match_words(&chars, start, i, &word);
            i = end;
            coord = if word == "position" { CoordState::Key } else { CoordState::Idle };
            out.push(id);
        }
        out
    }

    fn match_tag(&self, chars: &[char]) -> Option<(u32, usize)> {
        for k in 0..TAGS.len() {
            for (text, id) in [(tag_open(k), self.tag_open_id(k)), (tag_close(k), self.tag_close_id(k))] {
                let n = text.chars().count();
                if chars.len() >= n && chars[..n].iter().copied().eq(text.chars()) {
                    return Some((id, n));
                }
            }
        }
        None
    }

    /// Longest multi-word action type starting at `start`, else the single word.
    fn match_words(&self, chars: &[char], start: usize, word_end: usize, word: &str) -> (u32, usize) {
        let mut best = (self.id(word).unwrap_or(UNK), word_end);
        for &t in &self.action_type_ids {
            let name: Vec<char> = self.tokens[t as usize].chars().collect();
            let n = name.len();
            if n > word_end - start
                && chars.len() >= start + n
                && chars[start..start + n] == name[..]
                && (start + n == chars.len() || chars[start + n].is_whitespace() || PUNCT.contains(&chars[start + n]))
                && start + n > best.1
            {
                best = (t, start + n);
            }
        }
        best
    }

    /// Renders token ids as text. Stops at [`EOS`].
    pub fn detokenize(&self, ids: &[u32]) -> Result<String, VocabError> {
        self.check(ids)?;
        let mut out = String::new();
        let mut prev: Option<TokenClass> = None;
        let mut quote_open = false;
        let mut pending_newline = false;
        for &id in ids {
            if id == EOS {
                break;
            }
            let class = self.class(id);
            match class {
                TokenClass::TagOpen(_) | TokenClass::TagClose(_) => {
                    if !out.is_empty() && !out.ends_with('\n') {
                        out.push('\n');
                    }
                    out.push_str(&self.tokens[id as usize]);
                    pending_newline = true;
                    quote_open = false;
                    prev = Some(class);
                    continue;
                }
                _ => {}
            }
            if pending_newline {
                out.push('\n');
                pending_newline = false;
            } else if !out.is_empty() && !out.ends_with('\n') {
                let glue_left = matches!(prev, Some(TokenClass::Punct('{' | '[')))
                    || (matches!(prev, Some(TokenClass::Punct('"'))) && quote_open);
                let glue_right = match class {
                    TokenClass::Punct('"') => quote_open,
                    TokenClass::Punct(c) => matches!(c, '}' | ']' | ',' | ':' | '.' | ';'),
                    _ => false,
                };
                if !glue_left && !glue_right {
                    out.push(' ');
                }
            }
            match class {
                TokenClass::XBin(b) | TokenClass::YBin(b) => out.push_str(&format_coord(self.bin_center(b))),
                TokenClass::Punct('"') => {
                    quote_open = !quote_open;
                    out.push('"');
                }
                _ => out.push_str(&self.tokens[id as usize]),
            }
            prev = Some(class);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CoordState {
    Idle,
    Key,
    Colon,
    WantX,
    GotX,
    WantY,
}

impl CoordState {
    fn after_punct(self, c: char) -> Self {
        match (self, c) {
            (CoordState::Key, '"') => CoordState::Key,
            (CoordState::Key, ':') => CoordState::Colon,
            (CoordState::Colon, '[') => CoordState::WantX,
            (CoordState::GotX, ',') => CoordState::WantY,
            _ => CoordState::Idle,
        }
    }

    fn after_number(self) -> Self {
        match self {
            CoordState::WantX => CoordState::GotX,
            _ => CoordState::Idle,
        }
    }
}

/// Length of a numeric literal `-?digits(.digits)?` at the start of `chars`.
fn number_len(chars: &[char]) -> Option<usize> {
    let mut i = usize::from(chars.first() == Some(&'-'));
    let digits = |from: usize| chars[from..].iter().take_while(|c| c.is_ascii_digit()).count();
    let n = digits(i);
    if n == 0 {
        return None;
    }
    i += n;
    if chars.get(i) == Some(&'.') {
        let m = digits(i + 1);
        if m > 0 {
            i += 1 + m;
        }
    }
    Some(i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{parse_turn, serialize_turn};
    use crate::model::{GuiAction, Point};

    fn vocab() -> Vocab {
        let words: Vec<String> = ["apply", "save", "tokyo", "new", "york"].iter().map(|s| s.to_string()).collect();
        Vocab::new(20, &ActionSpace::guiact(), &words)
    }

    #[test]
    fn canonical_turn_round_trips_through_tokens() {
        let v = vocab();
        let space = ActionSpace::guiact();
        let action = GuiAction::new("CLICK", "apply", Some(Point::new(0.325, 0.575)));
        let text = serialize_turn("2 steps done.", "CLICK apply.", &action, "save, apply.", &space).unwrap();
        let ids = v.tokenize(&text);
        assert!(!ids.contains(&UNK));
        assert_eq!(v.detokenize(&ids).unwrap(), text);
        let turn = parse_turn(&v.detokenize(&ids).unwrap(), &space);
        assert_eq!(turn.parsed_action, Some(action));
    }

    #[test]
    fn coordinates_quantize_to_bin_centers() {
        let v = vocab();
        let ids = v.tokenize(r#"{"action": "CLICK", "value": "apply", "position": [0.3, 0.66]}"#);
        let text = v.detokenize(&ids).unwrap();
        assert_eq!(text, r#"{"action": "CLICK", "value": "apply", "position": [0.325, 0.675]}"#);
    }

    #[test]
    fn multiword_types_and_null_positions() {
        let v = vocab();
        let text = r#"{"action": "SELECT TEXT", "value": "new york", "position": null}"#;
        let ids = v.tokenize(text);
        assert_eq!(v.text(ids[6]).unwrap(), "SELECT TEXT");
        assert_eq!(v.detokenize(&ids).unwrap(), text);
        let empty = r#"{"action": "ENTER", "value": "", "position": null}"#;
        assert_eq!(v.detokenize(&v.tokenize(empty)).unwrap(), empty);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = vocab();
        let ids = v.tokenize("apply zebra 99 < x");
        assert_eq!(ids[0], v.id("apply").unwrap());
        assert_eq!(&ids[1..], &[UNK, UNK, UNK, UNK]);
        assert_eq!(v.detokenize(&[9999]), Err(VocabError::UnknownToken(9999)));
    }

    #[test]
    fn eos_stops_rendering() {
        let v = vocab();
        let apply = v.id("apply").unwrap();
        assert_eq!(v.detokenize(&[apply, EOS, apply]).unwrap(), "apply");
    }
}
