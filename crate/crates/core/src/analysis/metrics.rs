use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::ood::Beta;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardRow {
    pub beta: Beta,
    pub seed: u64,
    pub episode: usize,
    pub reward_raw: f64,
    pub reward_norm: f64,
}

/// Per-cell sums of the trust coefficient and `|TD|` over all steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStats {
    pub beta: Beta,
    pub seed: u64,
    pub lambda_sum: f64,
    pub td_abs_sum: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub beta: Beta,
    pub avg_reward_pre: f64,
    pub avg_reward_post: f64,
    /// `None` when the baseline reward is identical across seeds.
    pub sd_pre: Option<f64>,
    pub sd_post: Option<f64>,
    pub avg_lambda: f64,
    pub avg_abs_td: f64,
}

pub const SUMMARY_HEADER: [&str; 7] = [
    "beta",
    "avg_reward_pre",
    "avg_reward_post",
    "sd_pre",
    "sd_post",
    "avg_lambda",
    "avg_abs_td",
];

pub fn population_sd(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Sort key placing finite values in ascending order before infinity.
fn beta_key(b: Beta) -> (u8, u64) {
    match b {
        Beta::Finite(v) => (0, v.to_bits()),
        Beta::Infinite => (1, 0),
    }
}

/// Mean and across-seed spread of the episode rewards in `[start, end)`:
/// the spread is the population sd over seeds, averaged over episodes.
fn window_stats(rows: &[&RewardRow], (start, end): (usize, usize), normalized: bool) -> Result<(f64, f64, bool)> {
    let mut by_episode: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows {
        if (start..end).contains(&r.episode) {
            let v = if normalized { r.reward_norm } else { r.reward_raw };
            by_episode.entry(r.episode).or_default().push(v);
        }
    }
    if by_episode.is_empty() {
        return Err(Error::Validation(format!("no episodes in window [{start}, {end})")));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut sd_sum = 0.0;
    let mut constant = true;
    for values in by_episode.values_mut() {
        values.sort_by(f64::total_cmp);
        total += values.iter().sum::<f64>();
        count += values.len();
        sd_sum += population_sd(values);
        constant &= values.iter().all(|v| *v == values[0]);
    }
    Ok((total / count as f64, sd_sum / by_episode.len() as f64, constant))
}

/// One summary row per `β`, sorted with `∞` last.
pub fn aggregate_metrics(
    rewards: &[RewardRow],
    cells: &[CellStats],
    pre: (usize, usize),
    post: (usize, usize),
    normalized: bool,
) -> Result<Vec<SummaryRow>> {
    let mut betas: Vec<Beta> = rewards.iter().map(|r| r.beta).collect();
    betas.sort_by_key(|b| beta_key(*b));
    betas.dedup();
    let mut out = Vec::with_capacity(betas.len());
    for beta in betas {
        let rows: Vec<&RewardRow> = rewards.iter().filter(|r| r.beta == beta).collect();
        let (avg_pre, sd_pre, const_pre) = window_stats(&rows, pre, normalized)?;
        let (avg_post, sd_post, const_post) = window_stats(&rows, post, normalized)?;
        let (mut lam, mut td, mut steps) = (0.0, 0.0, 0usize);
        for c in cells.iter().filter(|c| c.beta == beta) {
            lam += c.lambda_sum;
            td += c.td_abs_sum;
            steps += c.steps;
        }
        let steps = steps.max(1) as f64;
        let dash = |sd: f64, constant: bool| if beta.is_infinite() && constant { None } else { Some(sd) };
        out.push(SummaryRow {
            beta,
            avg_reward_pre: avg_pre,
            avg_reward_post: avg_post,
            sd_pre: dash(sd_pre, const_pre),
            sd_post: dash(sd_post, const_post),
            avg_lambda: lam / steps,
            avg_abs_td: td / steps,
        });
    }
    Ok(out)
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SUMMARY_HEADER)?;
    let sd = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
    for r in rows {
        w.write_record([
            r.beta.to_string(),
            r.avg_reward_pre.to_string(),
            r.avg_reward_post.to_string(),
            sd(r.sd_pre),
            sd(r.sd_post),
            r.avg_lambda.to_string(),
            r.avg_abs_td.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
