//! Step-level metrics and per-split aggregation.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActionSpace, BBox, Episode, GuiAction};
use crate::policy::{DecodeMode, Policy, PolicyContext, PolicyError};
use crate::seed::{hash_str, mix_all};

pub const COLUMNS: [&str; 4] = ["Ele.Acc", "Op.F1", "Step SR", "Action Acc"];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepMetrics {
    pub ele_acc: f64,
    pub op_f1: f64,
    pub step_sr: f64,
}

fn is_spatial(gt: &GuiAction, space: &ActionSpace) -> bool {
    space.is_spatial(&gt.action_type).unwrap_or(gt.position.is_some())
}

/// Case-folded operation tokens: the type followed by the value.
pub fn op_tokens(a: &GuiAction) -> Vec<String> {
    a.action_type.split_whitespace().chain(a.value.split_whitespace()).map(str::to_lowercase).collect()
}

/// Bag-of-tokens F1.
pub fn token_f1(pred: &[String], gt: &[String]) -> f64 {
    if pred.is_empty() && gt.is_empty() {
        return 1.0;
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gt.len() as f64;
    2.0 * p * r / (p + r)
}

fn grounded(pred: &GuiAction, gt: &GuiAction, gt_bbox: Option<&BBox>, space: &ActionSpace) -> bool {
    if is_spatial(gt, space) {
        matches!((pred.position, gt_bbox), (Some(p), Some(b)) if b.contains(p))
    } else {
        pred.action_type == gt.action_type
    }
}

pub fn step_metrics(pred: Option<&GuiAction>, gt: &GuiAction, gt_bbox: Option<&BBox>, space: &ActionSpace) -> StepMetrics {
    let Some(pred) = pred else {
        return StepMetrics::default();
    };
    let ele_acc = if grounded(pred, gt, gt_bbox, space) { 1.0 } else { 0.0 };
    let op_f1 = token_f1(&op_tokens(pred), &op_tokens(gt));
    let step_sr = if ele_acc == 1.0 && op_f1 == 1.0 { 1.0 } else { 0.0 };
    StepMetrics { ele_acc, op_f1, step_sr }
}

/// Type match plus point-in-box for spatial actions; the value is not scored.
pub fn action_accuracy(pred: Option<&GuiAction>, gt: &GuiAction, gt_bbox: Option<&BBox>, space: &ActionSpace) -> f64 {
    match pred {
        Some(p) if p.action_type == gt.action_type && grounded(p, gt, gt_bbox, space) => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub split: String,
    pub episode_id: String,
    pub t: usize,
    pub last_step: bool,
    pub ele_acc: f64,
    pub op_f1: f64,
    pub step_sr: f64,
    pub action_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricMeans {
    pub ele_acc: f64,
    pub op_f1: f64,
    pub step_sr: f64,
    pub action_acc: f64,
}

impl MetricMeans {
    fn values(&self) -> [f64; 4] {
        [self.ele_acc, self.op_f1, self.step_sr, self.action_acc]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub splits: Vec<(String, MetricMeans, usize)>,
    pub overall: MetricMeans,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("report has no rows")]
    EmptyReport,
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a ReportRow>) -> (MetricMeans, usize) {
    let mut m = MetricMeans::default();
    let mut n = 0usize;
    for r in rows {
        m.ele_acc += r.ele_acc;
        m.op_f1 += r.op_f1;
        m.step_sr += r.step_sr;
        m.action_acc += r.action_acc;
        n += 1;
    }
    let d = n.max(1) as f64;
    (MetricMeans { ele_acc: m.ele_acc / d, op_f1: m.op_f1 / d, step_sr: m.step_sr / d, action_acc: m.action_acc / d }, n)
}

/// Unweighted step means per split (in first-seen order); overall is the
/// mean of the split means.
pub fn aggregate(rows: &[ReportRow]) -> Result<Report, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyReport);
    }
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.split.as_str()) {
            names.push(&r.split);
        }
    }
    let splits: Vec<(String, MetricMeans, usize)> = names
        .iter()
        .map(|name| {
            let (m, n) = mean_of(rows.iter().filter(|r| r.split == *name));
            (name.to_string(), m, n)
        })
        .collect();
    let k = splits.len() as f64;
    let sum = |f: fn(&MetricMeans) -> f64| splits.iter().map(|s| f(&s.1)).sum::<f64>() / k;
    let overall = MetricMeans {
        ele_acc: sum(|m| m.ele_acc),
        op_f1: sum(|m| m.op_f1),
        step_sr: sum(|m| m.step_sr),
        action_acc: sum(|m| m.action_acc),
    };
    Ok(Report { splits, overall })
}

impl Report {
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["split", "steps"];
        header.extend(COLUMNS);
        out.write_record(&header)?;
        for (name, m, n) in &self.splits {
            let mut rec = vec![name.clone(), n.to_string()];
            rec.extend(m.values().iter().map(|v| format!("{v:.6}")));
            out.write_record(&rec)?;
        }
        let total: usize = self.splits.iter().map(|s| s.2).sum();
        let mut rec = vec!["Overall".to_owned(), total.to_string()];
        rec.extend(self.overall.values().iter().map(|v| format!("{v:.6}")));
        out.write_record(&rec)?;
        out.flush()?;
        Ok(())
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<20} {:>6}", "split", "steps");
        for c in COLUMNS {
            s.push_str(&format!(" {c:>10}"));
        }
        s.push('\n');
        let line = |name: &str, n: usize, m: &MetricMeans| {
            let mut l = format!("{name:<20} {n:>6}");
            for v in m.values() {
                l.push_str(&format!(" {:>10.4}", v));
            }
            l.push('\n');
            l
        };
        for (name, m, n) in &self.splits {
            s.push_str(&line(name, *n, m));
        }
        s.push_str(&line("Overall", self.splits.iter().map(|x| x.2).sum(), &self.overall));
        s
    }
}

/// Greedy rollout along each ground-truth trajectory: observations are
/// teacher-forced, the history is the policy's own previous summary.
pub fn evaluate_policy(
    policy: &dyn Policy,
    episodes: &[Episode],
    split: &str,
    seed: u64,
) -> Result<Vec<ReportRow>, PolicyError> {
    let space = policy.action_space().clone();
    let per_episode: Vec<Result<Vec<ReportRow>, PolicyError>> = episodes
        .par_iter()
        .map(|ep| {
            let mut rows = Vec::with_capacity(ep.steps.len());
            let mut history = String::new();
            for (t, step) in ep.steps.iter().enumerate() {
                let ctx = PolicyContext {
                    instruction: ep.instruction.clone(),
                    observation: step.observation.clone(),
                    history: history.clone(),
                };
                let s = mix_all(&[seed, hash_str(&ep.episode_id), t as u64]);
                let turn = policy.sample(&ctx, 1, DecodeMode::Greedy, s)?.remove(0).turn;
                let pred = turn.parsed_action.as_ref();
                let m = step_metrics(pred, &step.gt_action, step.gt_bbox.as_ref(), &space);
                rows.push(ReportRow {
                    split: split.to_owned(),
                    episode_id: ep.episode_id.clone(),
                    t,
                    last_step: t + 1 == ep.steps.len(),
                    ele_acc: m.ele_acc,
                    op_f1: m.op_f1,
                    step_sr: m.step_sr,
                    action_acc: action_accuracy(pred, &step.gt_action, step.gt_bbox.as_ref(), &space),
                });
                history = turn.history_summary;
            }
            Ok(rows)
        })
        .collect();
    let mut out = Vec::new();
    for r in per_episode {
        out.extend(r?);
    }
    Ok(out)
}

/// Mean action accuracy over final steps only.
pub fn final_step_accuracy(rows: &[ReportRow]) -> f64 {
    let finals: Vec<f64> = rows.iter().filter(|r| r.last_step).map(|r| r.action_acc).collect();
    finals.iter().sum::<f64>() / finals.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Point;

    fn space() -> ActionSpace {
        ActionSpace::aitw()
    }

    #[test]
    fn step_examples() {
        let b = BBox::new(0.4, 0.4, 0.6, 0.6);
        let gt = GuiAction::new("TYPE", "hello", Some(Point::new(0.5, 0.5)));
        assert_eq!(step_metrics(Some(&gt), &gt, Some(&b), &space()), StepMetrics { ele_acc: 1.0, op_f1: 1.0, step_sr: 1.0 });
        let longer = GuiAction::new("TYPE", "hello world", Some(Point::new(0.5, 0.5)));
        let m = step_metrics(Some(&longer), &gt, Some(&b), &space());
        assert_eq!((m.ele_acc, m.step_sr), (1.0, 0.0));
        assert!((m.op_f1 - 0.8).abs() < 1e-12);
        let outside = GuiAction::new("TYPE", "hello", Some(Point::new(0.1, 0.1)));
        assert_eq!(step_metrics(Some(&outside), &gt, Some(&b), &space()), StepMetrics { ele_acc: 0.0, op_f1: 1.0, step_sr: 0.0 });
        assert_eq!(step_metrics(None, &gt, Some(&b), &space()), StepMetrics::default());
    }

    #[test]
    fn action_accuracy_examples() {
        let home = GuiAction::new("PRESS HOME", "", None);
        assert_eq!(action_accuracy(Some(&home), &home, None, &space()), 1.0);
        let b = BBox::new(0.4, 0.4, 0.6, 0.6);
        let gt = GuiAction::new("CLICK", "Apply", Some(Point::new(0.5, 0.5)));
        let wrong_value = GuiAction::new("CLICK", "Cancel", Some(Point::new(0.45, 0.55)));
        assert_eq!(action_accuracy(Some(&wrong_value), &gt, Some(&b), &space()), 1.0);
        let up = GuiAction::new("SCROLL UP", "", None);
        let down = GuiAction::new("SCROLL DOWN", "", None);
        assert_eq!(action_accuracy(Some(&up), &down, None, &space()), 0.0);
    }

    fn row(split: &str, v: f64) -> ReportRow {
        ReportRow {
            split: split.into(),
            episode_id: "e".into(),
            t: 0,
            last_step: false,
            ele_acc: v,
            op_f1: v,
            step_sr: v,
            action_acc: v,
        }
    }

    #[test]
    fn aggregation() {
        let one: Vec<_> = [1.0, 0.0, 1.0, 1.0].iter().map(|&v| row("a", v)).collect();
        assert_eq!(aggregate(&one).unwrap().splits[0].1.step_sr, 0.75);
        let two = vec![row("a", 0.0), row("a", 1.0), row("b", 1.0)];
        let rep = aggregate(&two).unwrap();
        assert_eq!(rep.overall.step_sr, 0.75);
        assert_eq!(aggregate(&[]), Err(MetricsError::EmptyReport));
        let mut csv = Vec::new();
        rep.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("split,steps,Ele.Acc,Op.F1,Step SR,Action Acc\n"));
        assert!(rep.table().contains("Overall"));
    }
}
