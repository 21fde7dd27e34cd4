//! Context encoding and per-position feature extraction for the toy policy.
//!
//! Each decoding position activates a set of dense rows (hashed conjunctions
//! of a decode slot with context features) and a set of pointer weights, each
//! of which adds a scalar to the logit of one specific token (an element
//! label, a coordinate bin, an instruction word, a history token).

use std::collections::HashMap;

use crate::policy::vocab::{TokenClass, Vocab};
use crate::policy::PolicyContext;
use crate::seed::{hash_str, mix, mix_all};

#[derive(Debug, Clone, PartialEq)]
pub struct ElementEnc {
    pub label: u32,
    pub xbin: u32,
    pub ybin: u32,
    /// Hashed descriptor variants used as pointer features.
    pub pointer_feats: Vec<u64>,
}

/// Token-level view of a [`PolicyContext`], computed once per context.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedContext {
    pub instruction: Vec<u32>,
    pub history: Vec<u32>,
    /// History tokens before the trailing full stop.
    pub history_len: usize,
    pub history_items: Vec<u32>,
    pub elements: Vec<ElementEnc>,
    pub global: Vec<u64>,
    pub history_words: Vec<u64>,
    instruction_first: HashMap<u32, usize>,
}

fn clip_rank(r: i64) -> i64 {
    r.clamp(-2, 2)
}

pub fn encode(vocab: &Vocab, ctx: &PolicyContext) -> EncodedContext {
    let instruction = vocab.tokenize(&ctx.instruction);
    let history = vocab.tokenize(&ctx.history);
    let full_stop = vocab.id(".");
    let history_len = match history.last() {
        Some(&t) if Some(t) == full_stop => history.len() - 1,
        _ => history.len(),
    };
    let history_items: Vec<u32> = history.iter().copied().filter(|&t| vocab.is_word(t)).collect();

    let mut instruction_first = HashMap::new();
    for (i, &t) in instruction.iter().enumerate() {
        instruction_first.entry(t).or_insert(i);
    }

    let labels: Vec<u32> = ctx
        .observation
        .elements
        .iter()
        .map(|e| vocab.tokenize(&e.label).first().copied().unwrap_or(crate::policy::vocab::UNK))
        .collect();

    // Instruction words naming something on screen or in the history, in order.
    let mut items: Vec<u32> = Vec::new();
    for &t in &instruction {
        if vocab.is_word(t) && (labels.contains(&t) || history_items.contains(&t)) && !items.contains(&t) {
            items.push(t);
        }
    }
    let done = items.iter().filter(|t| history_items.contains(t)).count() as i64;
    let hn = history_items.len();

    let mut elements = Vec::with_capacity(labels.len());
    let mut descriptors: Vec<String> = Vec::new();
    for (e, &label) in ctx.observation.elements.iter().zip(&labels) {
        let rank = match items.iter().position(|&t| t == label) {
            Some(r) => clip_rank(r as i64 - done).to_string(),
            None => "none".to_owned(),
        };
        let in_u = instruction_first.contains_key(&label);
        let h_pos = match history_items.iter().position(|&t| t == label) {
            Some(0) => "first",
            Some(i) if i + 1 == hn => "last",
            Some(_) => "other",
            None => "none",
        };
        let kind = e.kind.as_str();
        let desc = format!("{rank}|{in_u}|{h_pos}|{kind}");
        let pointer_feats = vec![
            hash_str(&format!("d={desc}")),
            hash_str(&format!("r={rank}")),
            hash_str(&format!("rk={rank}|{kind}")),
            hash_str(&format!("hk={h_pos}|{kind}")),
            hash_str(&format!("ik={in_u}|{kind}")),
            hash_str(&format!("k={kind}")),
        ];
        if !descriptors.contains(&desc) {
            descriptors.push(desc);
        }
        let c = e.bbox.center();
        elements.push(ElementEnc { label, xbin: vocab.xbin_id(c.x), ybin: vocab.ybin_id(c.y), pointer_feats });
    }

    let u0 = instruction.first().copied().unwrap_or(u32::MAX);
    let rem = (items.len() as i64 - done).max(0);
    let mut global = vec![
        hash_str("bias"),
        hash_str(&format!("hn={hn}")),
        hash_str(&format!("u0={u0}")),
        hash_str(&format!("u0|hn={u0}|{hn}")),
        hash_str(&format!("rem={rem}")),
        hash_str(&format!("u0|done={u0}|{done}")),
    ];
    global.extend(descriptors.iter().map(|d| hash_str(&format!("desc={d}"))));
    let history_words = history_items.iter().map(|t| hash_str(&format!("hw={t}"))).collect();

    EncodedContext {
        instruction,
        history,
        history_len,
        history_items,
        elements,
        global,
        history_words,
        instruction_first,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Before,
    Inside(usize),
    After(usize),
}

/// Grammar position reached by a decoded prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeState {
    pub region: Region,
    pub idx: usize,
    pub prev: u32,
    pub decision_type: Option<u32>,
    pub decision_item: Option<u32>,
    pub action_type: Option<u32>,
}

const PROGRESS: usize = 0;
const DECISION: usize = 1;
const ACTION: usize = 2;
const SUMMARY: usize = 3;

impl Default for DecodeState {
    fn default() -> Self {
        Self { region: Region::Before, idx: 0, prev: u32::MAX, decision_type: None, decision_item: None, action_type: None }
    }
}

impl DecodeState {
    pub fn push(&mut self, vocab: &Vocab, token: u32) {
        self.prev = token;
        match vocab.class(token) {
            TokenClass::TagOpen(k) => {
                self.region = Region::Inside(k);
                self.idx = 0;
                return;
            }
            TokenClass::TagClose(k) => {
                self.region = Region::After(k);
                self.idx = 0;
                return;
            }
            _ => {}
        }
        if let Region::Inside(k) = self.region {
            let is_type = vocab.class(token) == TokenClass::ActionType;
            if k == DECISION && self.idx == 0 && is_type {
                self.decision_type = Some(token);
            }
            if k == DECISION && self.idx == 1 {
                self.decision_item = Some(token);
            }
            if k == ACTION && is_type && self.action_type.is_none() {
                self.action_type = Some(token);
            }
        }
        self.idx += 1;
    }
}

/// Active parameters at one decoding position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PositionFeatures {
    pub rows: Vec<u32>,
    /// (pointer weight index, token receiving the weight)
    pub pointers: Vec<(u32, u32)>,
}

fn slot_hash(enc: &EncodedContext, st: &DecodeState) -> u64 {
    let hn = enc.history_items.len();
    match st.region {
        Region::Before => mix_all(&[5, st.idx.min(2) as u64]),
        Region::After(k) => mix_all(&[6, k as u64, st.idx.min(2) as u64]),
        Region::Inside(PROGRESS) => mix_all(&[1, st.idx.min(12) as u64]),
        Region::Inside(DECISION) => mix_all(&[2, st.idx.min(12) as u64]),
        Region::Inside(ACTION) => {
            mix_all(&[3, st.idx.min(40) as u64, st.action_type.map_or(u64::MAX, u64::from)])
        }
        Region::Inside(_) => {
            let rel = (st.idx as i64 - enc.history_len as i64).clamp(-1, 3);
            mix_all(&[4, (rel + 1) as u64, u64::from(hn == 0)])
        }
    }
}

pub fn position_features(enc: &EncodedContext, st: &DecodeState, rows: usize, pointers: usize) -> PositionFeatures {
    let slot = slot_hash(enc, st);
    let row = |f: u64| (mix(slot, f) % rows as u64) as u32;
    let ptr = |f: u64| (mix(slot ^ 0x9E37_79B9, f) % pointers as u64) as u32;

    let mut out = PositionFeatures::default();
    out.rows.extend(enc.global.iter().map(|&f| row(f)));
    out.rows.push(row(mix(0x5052_4556, u64::from(st.prev))));
    let inside = match st.region {
        Region::Inside(k) => Some(k),
        _ => None,
    };
    if inside == Some(ACTION) {
        out.rows.push(row(mix(0x4452_5459, st.decision_type.map_or(u64::MAX, u64::from))));
    }
    if inside == Some(SUMMARY) {
        out.rows.extend(enc.history_words.iter().map(|&f| row(f)));
    }
    if inside.is_none() {
        return out;
    }

    for e in &enc.elements {
        out.pointers.extend(e.pointer_feats.iter().map(|&f| (ptr(f), e.label)));
    }
    if let Some(item) = st.decision_item {
        out.pointers.push((ptr(hash_str("dr_item")), item));
        if let Some(e) = enc.elements.iter().find(|e| e.label == item) {
            out.pointers.push((ptr(hash_str("dr_x")), e.xbin));
            out.pointers.push((ptr(hash_str("dr_y")), e.ybin));
        }
        if let Some(&p) = enc.instruction_first.get(&item) {
            for (k, name) in [(1, "u+1"), (2, "u+2")] {
                if let Some(&t) = enc.instruction.get(p + k) {
                    out.pointers.push((ptr(hash_str(name)), t));
                }
            }
        }
    }
    if let Some(t) = st.decision_type {
        out.pointers.push((ptr(hash_str("dr_type")), t));
    }
    if inside == Some(SUMMARY) {
        if let Some(&t) = enc.history.get(st.idx) {
            out.pointers.push((ptr(hash_str("h_same")), t));
        }
    }
    out
}
