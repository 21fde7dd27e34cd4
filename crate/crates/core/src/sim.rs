//! Seedable synthetic GUI environment.
//!
//! Screens are symbolic element lists laid out on a `rows x cols` grid. Each
//! episode follows a hidden task program; after every correct action the
//! screen is rebuilt deterministically from `(episode seed, goal index)`.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ActionSpace, BBox, ConfigViolation, ElementKind, Episode, GuiAction, Observation, Step, UiElement,
};
use crate::seed::mix;

/// Element labels. The first `value_vocab_size` entries are in play.
pub const LABEL_WORDS: [&str; 48] = [
    "apply", "save", "cancel", "launch", "close", "next", "back", "home", "menu", "settings", "profile", "cart",
    "help", "share", "print", "edit", "delete", "upload", "login", "logout", "filter", "sort", "refresh", "play",
    "pause", "stop", "reply", "forward", "archive", "star", "report", "export", "import", "copy", "paste", "undo",
    "redo", "zoom", "browse", "account", "orders", "events", "news", "music", "photos", "maps", "books", "games",
];

/// Text typed into fields and the labels of search results.
pub const CONTENT_WORDS: [&str; 16] = [
    "alice", "bob", "paris", "tokyo", "london", "berlin", "pizza", "coffee", "guitar", "laptop", "garden",
    "winter", "summer", "yellow", "purple", "rocket",
];

/// Fixed labels used by particular task families.
pub const FIELD_WORDS: [&str; 6] = ["name", "email", "city", "phone", "address", "company"];
pub const SUBMIT_LABEL: &str = "submit";
pub const SEARCH_LABEL: &str = "search";
pub const GO_LABEL: &str = "go";

/// Words used by instruction templates.
pub const TEMPLATE_WORDS: [&str; 13] = [
    "click", "then", "fill", "with", "search", "for", "press", "enter", "go", "open", "remember", "the", "marked",
];
pub const TEMPLATE_EXTRA: [&str; 1] = ["item"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    ClickSequence,
    FillAndSubmit,
    SearchThenSelect,
    MemoryProbe,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 4] =
        [TaskFamily::ClickSequence, TaskFamily::FillAndSubmit, TaskFamily::SearchThenSelect, TaskFamily::MemoryProbe];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskFamily::ClickSequence => "click-sequence",
            TaskFamily::FillAndSubmit => "fill-and-submit",
            TaskFamily::SearchThenSelect => "search-then-select",
            TaskFamily::MemoryProbe => "memory-probe",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown task family {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub rows: usize,
    pub cols: usize,
    pub family: TaskFamily,
    pub min_len: usize,
    pub max_len: usize,
    /// Number of label words in play (drawn from [`LABEL_WORDS`]).
    pub value_vocab_size: usize,
    pub rng_seed: u64,
    /// Action space preset name (`guiact`, `mind2web`, `miniwob`, `aitw`).
    pub action_space: String,
    /// Fraction of each grid cell covered by its element box.
    pub box_scale: f64,
    /// Candidate links on the final memory-probe screen.
    pub candidates: usize,
    pub width: u32,
    pub height: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 4,
            family: TaskFamily::ClickSequence,
            min_len: 2,
            max_len: 4,
            value_vocab_size: 16,
            rng_seed: 0,
            action_space: "mind2web".into(),
            box_scale: 0.8,
            candidates: 4,
            width: 1280,
            height: 800,
        }
    }
}

impl SimConfig {
    pub fn action_space(&self) -> ActionSpace {
        ActionSpace::preset(&self.action_space).unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), ConfigViolation> {
        if ActionSpace::preset(&self.action_space).is_none() {
            return Err(ConfigViolation::new("action_space", "unknown preset"));
        }
        if !self.action_space().is_spatial("CLICK").unwrap_or(false) {
            return Err(ConfigViolation::new("action_space", "must contain a spatial CLICK"));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(ConfigViolation::new("rows", "grid must be non-empty"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(ConfigViolation::new("min_len", "need 1 <= min_len <= max_len"));
        }
        if self.rows * self.cols < self.max_len {
            return Err(ConfigViolation::new("max_len", "rows*cols must be at least the longest episode"));
        }
        if self.value_vocab_size < 2 || self.value_vocab_size > LABEL_WORDS.len() {
            return Err(ConfigViolation::new("value_vocab_size", format!("must lie in [2, {}]", LABEL_WORDS.len())));
        }
        if !(self.box_scale > 0.0 && self.box_scale <= 1.0) {
            return Err(ConfigViolation::new("box_scale", "must lie in (0, 1]"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(ConfigViolation::new("width", "screen size must be positive"));
        }
        let labels = self.value_vocab_size;
        match self.family {
            TaskFamily::ClickSequence if self.max_len > labels => {
                return Err(ConfigViolation::new("max_len", "click-sequence needs max_len <= value_vocab_size"));
            }
            TaskFamily::FillAndSubmit if self.min_len < 2 || self.max_len > FIELD_WORDS.len() + 1 => {
                return Err(ConfigViolation::new(
                    "min_len",
                    format!("fill-and-submit needs 2 <= len <= {}", FIELD_WORDS.len() + 1),
                ));
            }
            TaskFamily::SearchThenSelect if self.rows * self.cols < 3 => {
                return Err(ConfigViolation::new("rows", "search-then-select needs at least 3 cells"));
            }
            TaskFamily::MemoryProbe => {
                if self.min_len < 2 {
                    return Err(ConfigViolation::new("min_len", "memory-probe needs at least 2 steps"));
                }
                if self.candidates < 2 || self.candidates > self.rows * self.cols {
                    return Err(ConfigViolation::new("candidates", "need 2 <= candidates <= rows*cols"));
                }
                if labels < self.max_len + self.candidates {
                    return Err(ConfigViolation::new("value_vocab_size", "too small for memory-probe"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn label_pool(&self) -> Vec<&'static str> {
        LABEL_WORDS[..self.value_vocab_size].to_vec()
    }

    fn cell_box(&self, cell: usize) -> BBox {
        let (r, c) = (cell / self.cols, cell % self.cols);
        let (w, h) = (1.0 / self.cols as f64, 1.0 / self.rows as f64);
        let (mx, my) = (w * (1.0 - self.box_scale) / 2.0, h * (1.0 - self.box_scale) / 2.0);
        BBox::new(c as f64 * w + mx, r as f64 * h + my, (c + 1) as f64 * w - mx, (r + 1) as f64 * h - my)
    }
}

/// Every word the simulator can emit in instructions, labels and values.
pub fn lexicon(config: &SimConfig) -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let mut push = |w: &str| {
        if !words.iter().any(|x| x == w) {
            words.push(w.to_owned());
        }
    };
    TEMPLATE_WORDS.iter().chain(&TEMPLATE_EXTRA).for_each(|w| push(w));
    config.label_pool().into_iter().for_each(&mut push);
    [SUBMIT_LABEL, SEARCH_LABEL, GO_LABEL].into_iter().for_each(&mut push);
    FIELD_WORDS.iter().for_each(|w| push(w));
    CONTENT_WORDS.iter().for_each(|w| push(w));
    words
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("episode already finished")]
    EpisodeFinished,
}

/// One step of the hidden task program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub action_type: String,
    pub value: String,
    /// Label of the element to act on; `None` for non-spatial actions.
    pub target_label: Option<String>,
}

/// Per-episode plan: the instruction, the goals, and what each screen shows.
#[derive(Debug, Clone, PartialEq)]
struct Plan {
    instruction: String,
    goals: Vec<Goal>,
    /// Elements each screen must contain, by goal index, as (label, kind).
    required: Vec<Vec<(String, ElementKind)>>,
    /// Labels that must not appear on a screen, by goal index.
    forbidden: Vec<Vec<String>>,
    /// Whether distractors may use the link/toggle kinds, by goal index.
    distractor_kinds: Vec<Vec<ElementKind>>,
}

/// Live environment state for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    config: SimConfig,
    episode_seed: u64,
    plan: Plan,
    goal_index: usize,
    observation: Observation,
    noop_count: usize,
    done: bool,
}

impl SimState {
    pub fn observation(&self) -> &Observation {
        &self.observation
    }

    pub fn instruction(&self) -> &str {
        &self.plan.instruction
    }

    pub fn goal_index(&self) -> usize {
        self.goal_index
    }

    pub fn remaining_goals(&self) -> &[Goal] {
        &self.plan.goals[self.goal_index.min(self.plan.goals.len())..]
    }

    pub fn episode_len(&self) -> usize {
        self.plan.goals.len()
    }

    pub fn noop_count(&self) -> usize {
        self.noop_count
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn target(&self) -> Option<&UiElement> {
        let goal = &self.plan.goals[self.goal_index];
        let label = goal.target_label.as_ref()?;
        self.observation.elements.iter().find(|e| &e.label == label)
    }

    /// The action `transition` accepts; spatial actions aim at the target center.
    pub fn oracle_action(&self) -> Result<GuiAction, SimError> {
        if self.done {
            return Err(SimError::EpisodeFinished);
        }
        let goal = &self.plan.goals[self.goal_index];
        let position = self.target().map(|e| e.bbox.center());
        Ok(GuiAction::new(goal.action_type.clone(), goal.value.clone(), position))
    }

    pub fn target_bbox(&self) -> Option<BBox> {
        if self.done {
            return None;
        }
        self.target().map(|e| e.bbox)
    }

    fn matches(&self, action: &GuiAction) -> bool {
        let goal = &self.plan.goals[self.goal_index];
        if action.action_type != goal.action_type {
            return false;
        }
        match (self.target(), action.position) {
            (Some(t), Some(p)) => t.bbox.contains(p),
            (Some(_), None) => false,
            (None, _) => true,
        }
    }

    /// Applies `action`. A correct action advances the program and rebuilds
    /// the screen; anything else only bumps the no-op counter.
    pub fn transition(&self, action: &GuiAction) -> Result<SimState, SimError> {
        if self.done {
            return Err(SimError::EpisodeFinished);
        }
        let mut next = self.clone();
        if !self.matches(action) {
            next.noop_count += 1;
            return Ok(next);
        }
        next.goal_index += 1;
        if next.goal_index == next.plan.goals.len() {
            next.done = true;
        } else {
            next.observation = build_screen(&next.config, next.episode_seed, &next.plan, next.goal_index);
        }
        Ok(next)
    }
}

fn build_screen(config: &SimConfig, episode_seed: u64, plan: &Plan, goal_index: usize) -> Observation {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(episode_seed, 0x5C12_EE00 + goal_index as u64));
    let n_cells = config.rows * config.cols;
    let required = &plan.required[goal_index];
    let forbidden = &plan.forbidden[goal_index];
    let kinds = &plan.distractor_kinds[goal_index];

    let mut pool: Vec<&str> = config
        .label_pool()
        .into_iter()
        .filter(|l| !required.iter().any(|(r, _)| r == l) && !forbidden.iter().any(|f| f == l))
        .collect();
    pool.shuffle(&mut rng);
    let n_elements = n_cells.min(required.len() + pool.len());

    let mut items: Vec<(String, ElementKind)> = required.clone();
    for label in pool.into_iter().take(n_elements - required.len()) {
        let kind = *kinds.choose(&mut rng).expect("at least one distractor kind");
        items.push((label.to_owned(), kind));
    }
    let mut cells: Vec<usize> = (0..n_cells).collect();
    cells.shuffle(&mut rng);
    let mut placed: Vec<(usize, String, ElementKind)> =
        items.into_iter().zip(cells).map(|((label, kind), cell)| (cell, label, kind)).collect();
    placed.sort_by_key(|(cell, _, _)| *cell);

    let elements = placed
        .into_iter()
        .enumerate()
        .map(|(k, (cell, label, kind))| UiElement {
            element_id: format!("s{goal_index}e{k}"),
            bbox: config.cell_box(cell),
            label,
            kind,
        })
        .collect();
    Observation { width: config.width, height: config.height, elements, screen_ref: None }
}

fn pick<'a>(rng: &mut ChaCha8Rng, from: &[&'a str], n: usize) -> Vec<&'a str> {
    from.choose_multiple(rng, n).copied().collect()
}

fn type_name(space: &ActionSpace) -> &'static str {
    if space.contains("INPUT") { "INPUT" } else { "TYPE" }
}

fn make_plan(config: &SimConfig, rng: &mut ChaCha8Rng) -> Plan {
    let space = config.action_space();
    let len = rng.random_range(config.min_len..=config.max_len);
    let pool = config.label_pool();
    let both = vec![ElementKind::Button, ElementKind::Link];
    let buttons = vec![ElementKind::Button];
    let click = |label: &str| Goal {
        action_type: "CLICK".into(),
        value: label.to_owned(),
        target_label: Some(label.to_owned()),
    };

    match config.family {
        TaskFamily::ClickSequence => {
            let targets = pick(rng, &pool, len);
            let instruction = format!("click {} .", targets.join(" , then "));
            let goals = targets.iter().map(|t| click(t)).collect();
            let required = (0..len)
                .map(|g| targets[g..].iter().map(|t| ((*t).to_owned(), ElementKind::Button)).collect())
                .collect();
            Plan { instruction, goals, required, forbidden: vec![vec![]; len], distractor_kinds: vec![both; len] }
        }
        TaskFamily::FillAndSubmit => {
            let fields = pick(rng, &FIELD_WORDS, len - 1);
            let values = pick(rng, &CONTENT_WORDS, len - 1);
            let mut parts: Vec<String> = fields.iter().zip(&values).map(|(f, v)| format!("fill {f} with {v}")).collect();
            parts.push(format!("then {SUBMIT_LABEL}"));
            let instruction = format!("{} .", parts.join(" , "));
            let ty = type_name(&space);
            let mut goals: Vec<Goal> = fields
                .iter()
                .zip(&values)
                .map(|(f, v)| Goal { action_type: ty.into(), value: (*v).into(), target_label: Some((*f).into()) })
                .collect();
            goals.push(click(SUBMIT_LABEL));
            let mut screen: Vec<(String, ElementKind)> =
                fields.iter().map(|f| ((*f).to_owned(), ElementKind::Field)).collect();
            screen.push((SUBMIT_LABEL.to_owned(), ElementKind::Button));
            Plan {
                instruction,
                goals,
                required: vec![screen; len],
                forbidden: vec![vec![]; len],
                distractor_kinds: vec![buttons; len],
            }
        }
        TaskFamily::SearchThenSelect => {
            let query = *CONTENT_WORDS.choose(rng).expect("non-empty");
            let others: Vec<&str> = CONTENT_WORDS.iter().copied().filter(|w| *w != query).collect();
            let n_results = config.candidates.clamp(2, config.rows * config.cols - 1);
            let mut results = pick(rng, &others, n_results - 1);
            results.push(query);
            let has_enter = space.is_spatial("ENTER") == Some(false);
            let submit_word = if has_enter { "enter" } else { GO_LABEL };
            let instruction = format!("search for {query} , press {submit_word} , then open {query} .");
            let submit = if has_enter {
                Goal { action_type: "ENTER".into(), value: String::new(), target_label: None }
            } else {
                click(GO_LABEL)
            };
            let goals = vec![
                Goal { action_type: type_name(&space).into(), value: query.into(), target_label: Some(SEARCH_LABEL.into()) },
                submit,
                click(query),
            ];
            let mut form = vec![(SEARCH_LABEL.to_owned(), ElementKind::Field)];
            if !has_enter {
                form.push((GO_LABEL.to_owned(), ElementKind::Button));
            }
            let result_links = results.iter().map(|r| ((*r).to_owned(), ElementKind::Link)).collect();
            Plan {
                instruction,
                goals,
                required: vec![form.clone(), form, result_links],
                forbidden: vec![vec![]; 3],
                distractor_kinds: vec![buttons; 3],
            }
        }
        TaskFamily::MemoryProbe => {
            let chosen = pick(rng, &pool, len - 1 + config.candidates);
            let marked = chosen[0];
            let middle = &chosen[1..len - 1];
            let mut candidates: Vec<&str> = chosen[len - 1..].to_vec();
            candidates[0] = marked;
            candidates.shuffle(rng);

            let mut parts = vec!["remember the marked item".to_owned()];
            parts.extend(middle.iter().map(|m| format!("then click {m}")));
            parts.push("then open the marked item".to_owned());
            let instruction = format!("{} .", parts.join(" , "));

            let mut goals = vec![click(marked)];
            goals.extend(middle.iter().map(|m| click(m)));
            goals.push(click(marked));

            let mut required = vec![vec![(marked.to_owned(), ElementKind::Toggle)]];
            let mut forbidden = vec![middle.iter().map(|m| (*m).to_owned()).collect::<Vec<_>>()];
            for g in 1..len - 1 {
                required.push(middle[g - 1..].iter().map(|m| ((*m).to_owned(), ElementKind::Button)).collect());
                forbidden.push(vec![marked.to_owned()]);
            }
            required.push(candidates.iter().map(|c| ((*c).to_owned(), ElementKind::Link)).collect());
            // Final screen: the marked label shows up only as one candidate link.
            let mut last_forbidden: Vec<String> = vec![marked.to_owned()];
            last_forbidden.retain(|l| !candidates.contains(&l.as_str()));
            forbidden.push(last_forbidden);
            Plan { instruction, goals, required, forbidden, distractor_kinds: vec![buttons; len] }
        }
    }
}

/// Starts episode `index` of the dataset defined by `config`.
pub fn start_episode(config: &SimConfig, index: usize) -> SimState {
    let episode_seed = mix(config.rng_seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let plan = make_plan(config, &mut rng);
    let observation = build_screen(config, episode_seed, &plan, 0);
    SimState { config: config.clone(), episode_seed, plan, goal_index: 0, observation, noop_count: 0, done: false }
}

pub fn episode_id(config: &SimConfig, index: usize) -> String {
    format!("{}-{}-{index:05}", config.family, config.rng_seed)
}

/// Rolls the oracle through one episode, recording every step.
pub fn generate_episode(config: &SimConfig, index: usize) -> Episode {
    let mut state = start_episode(config, index);
    let mut steps = Vec::new();
    while !state.is_done() {
        let action = state.oracle_action().expect("not done");
        steps.push(Step {
            index: steps.len(),
            observation: state.observation().clone(),
            gt_action: action.clone(),
            gt_bbox: state.target_bbox(),
        });
        state = state.transition(&action).expect("not done");
    }
    Episode { episode_id: episode_id(config, index), instruction: state.plan.instruction.clone(), steps }
}

/// Deterministic in `(config, n_episodes)`.
pub fn generate_dataset(config: &SimConfig, n_episodes: usize) -> Vec<Episode> {
    (0..n_episodes).map(|i| generate_episode(config, i)).collect()
}

/// Generates episodes `offset..offset + n` (used for held-out splits).
pub fn generate_range(config: &SimConfig, offset: usize, n: usize) -> Vec<Episode> {
    (offset..offset + n).map(|i| generate_episode(config, i)).collect()
}
