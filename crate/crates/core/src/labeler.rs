//! Retrospective pseudo-labeling: step-by-step prompts carrying the known
//! action and the previous summary, answered by a remote model or a mock.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use navrl_client::Client;

use crate::grammar::{extract_block, format_action, LABELER_SUMMARY_TAG, TAGS};
use crate::model::{Episode, GuiAction, Observation};

/// Web-task labeling prompt. Placeholders use Python `str.format` syntax.
pub const PROMPT_SINGLE_WEB: &str = include_str!("prompt_web.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub episode_id: String,
    pub t: usize,
    pub progress: String,
    pub decision: String,
    pub summary: String,
    pub gt_action: GuiAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub episode_id: String,
    pub t: usize,
    pub attempt: usize,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabelerError {
    #[error("episode {episode_id} step {t}: response lacks block <{missing}> after {attempts} attempts")]
    LabelParseFailure { episode_id: String, t: usize, missing: String, attempts: usize },
    #[error("labeler unreachable: {0}")]
    RemoteUnreachable(String),
    #[error("template error: {0}")]
    Template(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelerConfig {
    pub max_retries: usize,
    /// Substituted for the `_THOUGHT` placeholder.
    pub thought: String,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self { max_retries: 2, thought: String::new() }
    }
}

/// Fills `{name}` placeholders; `{{` and `}}` render as literal braces.
pub fn render_template(template: &str, vars: &[(&str, &str)]) -> Result<String, LabelerError> {
    let mut out = String::with_capacity(template.len());
    let mut chars = template.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                out.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                out.push('}');
            }
            '{' => {
                let name: String = chars.by_ref().take_while(|&c| c != '}').collect();
                let value = vars
                    .iter()
                    .find(|(k, _)| *k == name)
                    .ok_or_else(|| LabelerError::Template(format!("no value for placeholder {{{name}}}")))?;
                out.push_str(value.1);
            }
            '}' => return Err(LabelerError::Template("single '}' in template".into())),
            c => out.push(c),
        }
    }
    Ok(out)
}

pub fn render_prompt(task: &str, action: &GuiAction, thought: &str, memo: &str) -> String {
    render_template(
        PROMPT_SINGLE_WEB,
        &[("_TASK", task), ("_ACTION", &format_action(action)), ("_THOUGHT", thought), ("_MEMO", memo)],
    )
    .expect("built-in template has exactly these placeholders")
}

/// Items of a summary of the form `a, b, c.`
pub fn summary_items(summary: &str) -> Vec<String> {
    summary.trim().trim_end_matches('.').split(',').map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect()
}

/// Texts the mock labeler and the scripted policies emit for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct MockTexts {
    pub progress: String,
    pub decision: String,
    pub summary: String,
}

fn mock_from_item(previous: &str, action: &GuiAction, item: String) -> MockTexts {
    let mut items = summary_items(previous);
    let progress = format!("{} steps done.", items.len());
    let decision = format!("{} {item}.", action.action_type);
    items.push(item);
    MockTexts { progress, decision, summary: format!("{}.", items.join(", ")) }
}

/// The acted-on element's label, or the lowercased type for actions
/// without a position.
pub fn action_item(observation: &Observation, action: &GuiAction) -> String {
    action
        .position
        .and_then(|p| observation.element_at(p))
        .map(|e| e.label.clone())
        .unwrap_or_else(|| action.action_type.to_lowercase())
}

pub fn mock_texts(previous: &str, observation: &Observation, action: &GuiAction) -> MockTexts {
    mock_from_item(previous, action, action_item(observation, action))
}

fn labeler_response(t: &MockTexts) -> String {
    format!(
        "<{p}>\n{}\n</{p}>\n<{d}>\n{}\n</{d}>\n<{h}>\n{}\n</{h}>",
        t.progress,
        t.decision,
        t.summary,
        p = TAGS[0],
        d = TAGS[1],
        h = LABELER_SUMMARY_TAG
    )
}

/// Answers a rendered prompt without a screen: the item is the action
/// value, or the lowercased type when the value is empty.
pub fn mock_response_from_prompt(prompt: &str) -> Option<String> {
    let input = &prompt[prompt.rfind("###Input")?..];
    let line = |key: &str| input.lines().find_map(|l| l.strip_prefix(key)).map(str::to_owned);
    let action = crate::grammar::parse_action(&line("Current Action: ")?, &crate::model::ActionSpace {
        types: crate::model::ActionSpace::guiact()
            .types
            .into_iter()
            .chain(crate::model::ActionSpace::aitw().types)
            .chain(crate::model::ActionSpace::mind2web().types)
            .collect(),
    })
    .ok()?;
    let memo = line("Previous History Summary: ").unwrap_or_default();
    let item = if action.value.trim().is_empty() { action.action_type.to_lowercase() } else { action.value.clone() };
    Some(labeler_response(&mock_from_item(&memo, &action, item)))
}

/// Everything a labeler backend may use to answer one step.
pub struct LabelQuery<'a> {
    pub prompt: &'a str,
    pub episode: &'a Episode,
    pub t: usize,
    pub previous_summary: &'a str,
}

pub trait LabelClient: Send + Sync {
    fn complete(&self, q: &LabelQuery<'_>) -> Result<String, LabelerError>;
}

/// Deterministic labeler filled from the ground-truth trajectory.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockLabeler;

impl LabelClient for MockLabeler {
    fn complete(&self, q: &LabelQuery<'_>) -> Result<String, LabelerError> {
        let step = &q.episode.steps[q.t];
        Ok(labeler_response(&mock_texts(q.previous_summary, &step.observation, &step.gt_action)))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteLabeler {
    pub client: Client,
}

impl LabelClient for RemoteLabeler {
    fn complete(&self, q: &LabelQuery<'_>) -> Result<String, LabelerError> {
        match self.client.label(q.prompt) {
            Ok(r) => Ok(r.text),
            Err(navrl_client::ClientError::Unreachable(m)) => Err(LabelerError::RemoteUnreachable(m)),
            // A bad reply counts as an unparseable answer and is retried.
            Err(e) => Ok(format!("error: {e}")),
        }
    }
}

fn parse_response(text: &str) -> Result<(String, String, String), String> {
    let get = |name: &str| extract_block(text, name).ok_or_else(|| name.to_owned());
    Ok((get(TAGS[0])?, get(TAGS[1])?, get(LABELER_SUMMARY_TAG)?))
}

/// Labels one episode step by step, chaining each summary into the next
/// prompt. Returns the labels and one audit record per request.
pub fn label_trajectory(
    episode: &Episode,
    client: &dyn LabelClient,
    config: &LabelerConfig,
) -> Result<(Vec<PseudoLabel>, Vec<AuditRecord>), LabelerError> {
    let mut labels = Vec::with_capacity(episode.steps.len());
    let mut audit = Vec::new();
    let mut previous = String::new();
    for (t, step) in episode.steps.iter().enumerate() {
        let prompt = render_prompt(&episode.instruction, &step.gt_action, &config.thought, &previous);
        let mut parsed = Err(String::new());
        for attempt in 0..=config.max_retries {
            let query = LabelQuery { prompt: &prompt, episode, t, previous_summary: &previous };
            let response = client.complete(&query)?;
            parsed = parse_response(&response);
            audit.push(AuditRecord { episode_id: episode.episode_id.clone(), t, attempt, prompt: prompt.clone(), response });
            if parsed.is_ok() {
                break;
            }
        }
        let (progress, decision, summary) = parsed.map_err(|missing| LabelerError::LabelParseFailure {
            episode_id: episode.episode_id.clone(),
            t,
            missing,
            attempts: config.max_retries + 1,
        })?;
        labels.push(PseudoLabel {
            episode_id: episode.episode_id.clone(),
            t,
            progress,
            decision,
            summary: summary.clone(),
            gt_action: step.gt_action.clone(),
        });
        previous = summary;
    }
    Ok((labels, audit))
}

/// Labels and audit records of one trajectory.
pub type TrajectoryLabels = (Vec<PseudoLabel>, Vec<AuditRecord>);

/// Labels episodes independently (in parallel), keeping input order.
/// Episodes whose labeling fails are returned as errors in place.
pub fn label_dataset(
    episodes: &[Episode],
    client: &dyn LabelClient,
    config: &LabelerConfig,
) -> Vec<Result<TrajectoryLabels, LabelerError>> {
    episodes.par_iter().map(|ep| label_trajectory(ep, client, config)).collect()
}
