//! Shared domain types: screens, actions, episodes, agent turns, reward
//! breakdowns and the training configuration blocks.
//!
//! All coordinates are normalized to `[0, 1]`. Pixel boxes are converted on
//! ingestion with [`BBox::from_pixels`].

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Axis-aligned box `(x1, y1, x2, y2)` in normalized screen units.
///
/// Serialized as a four-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_pixels(px: [f64; 4], width: u32, height: u32) -> Self {
        let (w, h) = (f64::from(width), f64::from(height));
        Self::new(px[0] / w, px[1] / h, px[2] / w, px[3] / h)
    }

    /// Boundary-inclusive point-in-box test.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    pub fn center(&self) -> Point {
        Point::new((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.x1)
            && unit(self.y1)
            && unit(self.x2)
            && unit(self.y2)
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Normalized screen point, serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Button,
    Field,
    Link,
    Toggle,
}

impl ElementKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ElementKind::Button => "button",
            ElementKind::Field => "field",
            ElementKind::Link => "link",
            ElementKind::Toggle => "toggle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UiElement {
    pub element_id: String,
    pub bbox: BBox,
    pub label: String,
    pub kind: ElementKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub width: u32,
    pub height: u32,
    pub elements: Vec<UiElement>,
    pub screen_ref: Option<String>,
}

impl Observation {
    /// First element whose box contains `p`.
    pub fn element_at(&self, p: Point) -> Option<&UiElement> {
        self.elements.iter().find(|e| e.bbox.contains(p))
    }
}

/// One entry of the action vocabulary: a type name and whether it targets a
/// screen position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionTypeSpec {
    pub name: String,
    pub spatial: bool,
}

/// The finite set of action types an agent may emit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub types: Vec<ActionTypeSpec>,
}

impl ActionSpace {
    fn from_pairs(pairs: &[(&str, bool)]) -> Self {
        Self {
            types: pairs
                .iter()
                .map(|(name, spatial)| ActionTypeSpec { name: (*name).to_owned(), spatial: *spatial })
                .collect(),
        }
    }

    /// Eleven-type web + smartphone action set. The default.
    pub fn guiact() -> Self {
        Self::from_pairs(&[
            ("CLICK", true),
            ("HOVER", true),
            ("TAP", true),
            ("INPUT", true),
            ("SCROLL", false),
            ("SWIPE", false),
            ("SELECT TEXT", true),
            ("COPY", false),
            ("ENTER", false),
            ("SELECT", true),
            ("ANSWER", false),
        ])
    }

    pub fn mind2web() -> Self {
        Self::from_pairs(&[("CLICK", true), ("TYPE", true), ("SELECT", true)])
    }

    pub fn miniwob() -> Self {
        Self::from_pairs(&[("CLICK", true), ("TYPE", true)])
    }

    /// Android action set; scroll, press and status actions carry no position.
    pub fn aitw() -> Self {
        Self::from_pairs(&[
            ("CLICK", true),
            ("TYPE", true),
            ("SELECT", true),
            ("SCROLL UP", false),
            ("SCROLL DOWN", false),
            ("SCROLL LEFT", false),
            ("SCROLL RIGHT", false),
            ("PRESS BACK", false),
            ("PRESS HOME", false),
            ("PRESS ENTER", false),
            ("STATUS TASK COMPLETE", false),
            ("STATUS TASK IMPOSSIBLE", false),
        ])
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "guiact" => Some(Self::guiact()),
            "mind2web" => Some(Self::mind2web()),
            "miniwob" => Some(Self::miniwob()),
            "aitw" => Some(Self::aitw()),
            _ => None,
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.types.iter().any(|t| t.name == name)
    }

    /// `None` when the type is not part of the space.
    pub fn is_spatial(&self, name: &str) -> Option<bool> {
        self.types.iter().find(|t| t.name == name).map(|t| t.spatial)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.types.iter().map(|t| t.name.as_str())
    }
}

impl Default for ActionSpace {
    fn default() -> Self {
        Self::guiact()
    }
}

/// A parsed, executable action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuiAction {
    pub action_type: String,
    pub value: String,
    pub position: Option<Point>,
}

impl GuiAction {
    pub fn new(action_type: impl Into<String>, value: impl Into<String>, position: Option<Point>) -> Self {
        Self { action_type: action_type.into(), value: value.into(), position }
    }

    /// Checks the type-membership and position-presence invariants.
    pub fn check(&self, space: &ActionSpace) -> Result<(), ActionInvariantError> {
        let spatial = space
            .is_spatial(&self.action_type)
            .ok_or_else(|| ActionInvariantError::UnknownType(self.action_type.clone()))?;
        match (spatial, self.position) {
            (true, None) => Err(ActionInvariantError::MissingPosition(self.action_type.clone())),
            (false, Some(_)) => Err(ActionInvariantError::UnexpectedPosition(self.action_type.clone())),
            (true, Some(p)) if !p.in_unit_square() || !p.x.is_finite() || !p.y.is_finite() => {
                Err(ActionInvariantError::PositionOutOfRange(p.x, p.y))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActionInvariantError {
    #[error("action type {0:?} is not in the action space")]
    UnknownType(String),
    #[error("{0} requires a position")]
    MissingPosition(String),
    #[error("{0} must not carry a position")]
    UnexpectedPosition(String),
    #[error("position ({0}, {1}) is outside the unit square")]
    PositionOutOfRange(f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub observation: Observation,
    pub gt_action: GuiAction,
    pub gt_bbox: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub instruction: String,
    pub steps: Vec<Step>,
}

/// One policy output, raw text plus the fields extracted from it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentTurn {
    pub raw_text: String,
    pub progress_estimation: String,
    pub decision_reasoning: String,
    pub action_text: String,
    pub parsed_action: Option<GuiAction>,
    pub history_summary: String,
    pub tags_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_f: f64,
    pub r_af: f64,
    pub r_type: f64,
    pub r_pos: f64,
    pub r_a: f64,
    pub r_h: f64,
    pub total: f64,
}

impl RewardBreakdown {
    /// Recomputes `r_a` and `total` from the stored parts.
    pub fn recomputed_total(&self, cfg: &RewardConfig) -> f64 {
        let r_a = self.r_af + cfg.lambda_type * self.r_type + cfg.lambda_pos * self.r_pos;
        self.r_f + cfg.lambda_a * r_a + cfg.lambda_h * self.r_h
    }
}

/// Decoding used for the history-reward rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutDecoding {
    #[default]
    Greedy,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub lambda_a: f64,
    pub lambda_h: f64,
    pub lambda_type: f64,
    pub lambda_pos: f64,
    pub k_rollouts: usize,
    pub advantage_epsilon: f64,
    pub history_decoding: RolloutDecoding,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda_a: 1.0,
            lambda_h: 0.5,
            lambda_type: 1.0,
            lambda_pos: 1.0,
            k_rollouts: 4,
            advantage_epsilon: 1e-8,
            history_decoding: RolloutDecoding::Greedy,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), ConfigViolation> {
        for (field, v) in [
            ("lambda_a", self.lambda_a),
            ("lambda_h", self.lambda_h),
            ("lambda_type", self.lambda_type),
            ("lambda_pos", self.lambda_pos),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(ConfigViolation::new(field, "must be a finite non-negative number"));
            }
        }
        if self.k_rollouts == 0 {
            return Err(ConfigViolation::new("k_rollouts", "must be at least 1"));
        }
        if !(self.advantage_epsilon.is_finite() && self.advantage_epsilon > 0.0) {
            return Err(ConfigViolation::new("advantage_epsilon", "must be a small positive number"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    /// Samples per context (G).
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Contexts per iteration.
    pub batch_size: usize,
    /// Iterations between refreshes of the sampling snapshot.
    pub old_refresh_every: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_beta: 0.04,
            learning_rate: 0.05,
            iterations: 2000,
            batch_size: 2,
            old_refresh_every: 1,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), ConfigViolation> {
        if self.group_size < 2 {
            return Err(ConfigViolation::new("group_size", "must be at least 2"));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(ConfigViolation::new("clip_epsilon", "must lie in (0, 1)"));
        }
        if !(self.kl_beta.is_finite() && self.kl_beta >= 0.0) {
            return Err(ConfigViolation::new("kl_beta", "must be non-negative"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ConfigViolation::new("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(ConfigViolation::new("batch_size", "must be at least 1"));
        }
        if self.old_refresh_every == 0 {
            return Err(ConfigViolation::new("old_refresh_every", "must be at least 1"));
        }
        Ok(())
    }
}

/// A configuration field that failed validation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {message}")]
pub struct ConfigViolation {
    pub field: String,
    pub message: String,
}

impl ConfigViolation {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

/// An invariant broken by an episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub step: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            Some(i) => write!(f, "step {i}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Returns every invariant violation in `episode`; empty when well formed.
pub fn validate_episode(episode: &Episode, space: &ActionSpace) -> Vec<Violation> {
    let mut out = Vec::new();
    let at = |step: usize, message: String| Violation { step: Some(step), message };

    if episode.steps.is_empty() {
        out.push(Violation { step: None, message: "steps non-empty".into() });
    }
    for (pos, step) in episode.steps.iter().enumerate() {
        if step.index != pos {
            out.push(at(pos, format!("index {} breaks contiguous numbering (expected {pos})", step.index)));
        }
        let obs = &step.observation;
        if obs.width == 0 || obs.height == 0 {
            out.push(at(pos, "observation width and height must be positive".into()));
        }
        let mut ids = HashSet::new();
        for el in &obs.elements {
            if !ids.insert(el.element_id.as_str()) {
                out.push(at(pos, format!("duplicate element_id {:?}", el.element_id)));
            }
            if !el.bbox.is_valid() {
                out.push(at(pos, format!("element {:?} has an invalid bbox", el.element_id)));
            }
        }
        if let Err(e) = step.gt_action.check(space) {
            out.push(at(pos, format!("gt_action: {e}")));
        }
        match (step.gt_action.position, step.gt_bbox) {
            (Some(p), Some(b)) => {
                if !b.is_valid() {
                    out.push(at(pos, "gt_bbox is invalid".into()));
                }
                if !b.contains(p) {
                    out.push(at(pos, format!("gt position ({}, {}) lies outside gt_bbox", p.x, p.y)));
                }
            }
            (Some(_), None) => out.push(at(pos, "spatial gt_action without gt_bbox".into())),
            (None, Some(_)) => out.push(at(pos, "gt_bbox present for a non-spatial action".into())),
            (None, None) => {}
        }
    }
    out
}
