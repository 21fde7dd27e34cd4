//! Plot-ready series from a grpo run: one long-format CSV with raw values
//! and a trailing moving average per series.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use navrl_core::grpo::{IterationLog, StepRewardRow};

#[derive(Debug, Serialize)]
struct Point<'a> {
    series: &'a str,
    iter: usize,
    value: f64,
    smoothed: f64,
}

/// Trailing mean over at most `window` values.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Writes `out` and returns the input files it read.
pub fn export(run: &Path, out: &Path, window: usize) -> Result<Vec<PathBuf>, csv::Error> {
    let iter_path = run.join("iterations.csv");
    let logs: Vec<IterationLog> = csv::Reader::from_path(&iter_path)?.deserialize().collect::<Result<_, _>>()?;
    let mut series: Vec<(&str, Vec<(usize, f64)>)> = vec![
        ("mean_reward", logs.iter().map(|l| (l.iter, l.mean_reward)).collect()),
        ("mean_r_f", logs.iter().map(|l| (l.iter, l.mean_r_f)).collect()),
        ("mean_r_a", logs.iter().map(|l| (l.iter, l.mean_r_a)).collect()),
        ("mean_r_h", logs.iter().map(|l| (l.iter, l.mean_r_h)).collect()),
        ("objective", logs.iter().map(|l| (l.iter, l.objective)).collect()),
        ("kl", logs.iter().map(|l| (l.iter, l.kl)).collect()),
    ];
    let mut inputs = vec![iter_path];

    let reward_path = run.join("rewards.csv");
    if reward_path.exists() {
        let mut acc: BTreeMap<usize, [f64; 4]> = BTreeMap::new();
        for row in csv::Reader::from_path(&reward_path)?.deserialize::<StepRewardRow>() {
            let row = row?;
            let e = acc.entry(row.iter).or_default();
            e[0] += row.r_af;
            e[1] += row.r_type;
            e[2] += row.r_pos;
            e[3] += 1.0;
        }
        for (k, name) in ["mean_r_af", "mean_r_type", "mean_r_pos"].into_iter().enumerate() {
            series.push((name, acc.iter().map(|(i, v)| (*i, v[k] / v[3])).collect()));
        }
        inputs.push(reward_path);
    }

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(out)?));
    for (name, points) in &series {
        let values: Vec<f64> = points.iter().map(|p| p.1).collect();
        for ((iter, value), smoothed) in points.iter().zip(moving_average(&values, window)) {
            w.serialize(Point { series: name, iter: *iter, value: *value, smoothed })?;
        }
    }
    w.flush()?;
    Ok(inputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_mean() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(moving_average(&[2.0], 5), vec![2.0]);
    }
}
