//! Modeled computation savings and the run report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::Drift;

/// Linear cost model: every recomputed visual token costs `flops_per_token`,
/// each step pays `fixed_flops` regardless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub flops_per_token: f64,
    pub fixed_flops: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            flops_per_token: 1.0,
            fixed_flops: 0.0,
        }
    }
}

impl CostModel {
    pub fn new(flops_per_token: f64, fixed_flops: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(flops_per_token) || !ok(fixed_flops) || flops_per_token + fixed_flops == 0.0 {
            return Err(Error::InvalidConfig(format!(
                "cost model needs nonnegative costs, not both zero (per token {flops_per_token}, fixed {fixed_flops})"
            )));
        }
        Ok(CostModel {
            flops_per_token,
            fixed_flops,
        })
    }
}

pub fn step_flops(num_tokens: usize, reuse: usize, m: &CostModel) -> f64 {
    m.fixed_flops + num_tokens.saturating_sub(reuse) as f64 * m.flops_per_token
}

/// What happened at one step of a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub num_tokens: usize,
    pub static_count: usize,
    pub important_count: usize,
    pub reuse_count: usize,
    pub k_vis: usize,
    pub k_attn: usize,
    pub drift: Option<Drift>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub t: usize,
    #[serde(rename = "static")]
    pub static_count: usize,
    #[serde(rename = "important")]
    pub important_count: usize,
    #[serde(rename = "reuse")]
    pub reuse_count: usize,
    pub k_vis: usize,
    pub k_attn: usize,
    pub flops: f64,
    pub drift: Option<Drift>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub steps: usize,
    pub num_tokens: usize,
    pub total_flops: f64,
    pub baseline_flops: f64,
    pub flops_ratio: f64,
    pub reuse_rate: f64,
    pub drift: Drift,
    pub cost_model: CostModel,
    /// Effective settings, recorded as `key = value` pairs.
    pub config: BTreeMap<String, String>,
    pub per_step: Vec<StepSummary>,
}

pub fn build_report(trace: &[StepRecord], m: &CostModel) -> Result<RunReport> {
    let first = trace.first().ok_or(Error::EmptyTrace)?;
    let n = first.num_tokens;
    let mut per_step = Vec::with_capacity(trace.len());
    let (mut total, mut baseline) = (0.0, 0.0);
    let mut reused = 0usize;
    let mut drift = Drift::default();
    let (mut drift_sq, mut drift_steps) = (0.0, 0usize);
    for rec in trace {
        if rec.num_tokens != n {
            return Err(Error::Invariant(format!(
                "step {} has {} tokens, expected {n}",
                rec.t, rec.num_tokens
            )));
        }
        if rec.reuse_count > n || rec.reuse_count > rec.static_count {
            return Err(Error::Invariant(format!(
                "step {}: reuse count {} exceeds static count {} or token count {n}",
                rec.t, rec.reuse_count, rec.static_count
            )));
        }
        let flops = step_flops(n, rec.reuse_count, m);
        total += flops;
        baseline += step_flops(n, 0, m);
        reused += rec.reuse_count;
        if let Some(d) = rec.drift {
            drift.max_abs = drift.max_abs.max(d.max_abs);
            drift_sq += d.rms * d.rms;
            drift_steps += 1;
        }
        per_step.push(StepSummary {
            t: rec.t,
            static_count: rec.static_count,
            important_count: rec.important_count,
            reuse_count: rec.reuse_count,
            k_vis: rec.k_vis,
            k_attn: rec.k_attn,
            flops,
            drift: rec.drift,
        });
    }
    if drift_steps > 0 {
        drift.rms = (drift_sq / drift_steps as f64).sqrt();
    }
    let flops_ratio = if baseline > 0.0 { total / baseline } else { 1.0 };
    Ok(RunReport {
        steps: trace.len(),
        num_tokens: n,
        total_flops: total,
        baseline_flops: baseline,
        flops_ratio,
        reuse_rate: reused as f64 / (trace.len() * n).max(1) as f64,
        drift,
        cost_model: *m,
        config: BTreeMap::new(),
        per_step,
    })
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One line per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,static,important,reuse,k_vis,k_attn,flops,drift_max_abs,drift_rms\n");
        for s in &self.per_step {
            let (dm, dr) = s.drift.map_or((String::new(), String::new()), |d| {
                (d.max_abs.to_string(), d.rms.to_string())
            });
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                s.t, s.static_count, s.important_count, s.reuse_count, s.k_vis, s.k_attn, s.flops, dm, dr
            );
        }
        out
    }

    pub fn speedup(&self) -> f64 {
        1.0 / self.flops_ratio
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(t: usize, n: usize, reuse: usize) -> StepRecord {
        StepRecord {
            t,
            num_tokens: n,
            static_count: reuse,
            important_count: 0,
            reuse_count: reuse,
            k_vis: 0,
            k_attn: 0,
            drift: None,
        }
    }

    #[test]
    fn step_flops_examples() {
        let m = CostModel::new(2.0, 5.0).unwrap();
        assert_eq!(step_flops(10, 0, &m), 25.0);
        assert_eq!(step_flops(10, 10, &m), 5.0);
        assert_eq!(step_flops(256, 100, &CostModel::default()), 156.0);
        assert!(CostModel::new(-1.0, 0.0).is_err());
        assert!(CostModel::new(0.0, 0.0).is_err());
    }

    #[test]
    fn report_examples() {
        let m = CostModel::default();
        let none: Vec<_> = (0..5).map(|t| record(t, 16, 0)).collect();
        assert_eq!(build_report(&none, &m).unwrap().flops_ratio, 1.0);

        let half: Vec<_> = (0..5).map(|t| record(t, 16, 8)).collect();
        let r = build_report(&half, &m).unwrap();
        assert_eq!(r.flops_ratio, 0.5);
        assert_eq!(r.reuse_rate, 0.5);
        assert_eq!(r.per_step.len(), r.steps);

        assert!(matches!(build_report(&[], &m), Err(Error::EmptyTrace)));
        assert!(matches!(build_report(&[record(0, 4, 5)], &m), Err(Error::Invariant(_))));
    }

    #[test]
    fn report_matches_reaggregation() {
        let m = CostModel::new(3.0, 7.0).unwrap();
        let trace: Vec<_> = (0..100)
            .map(|t| {
                let mut r = record(t, 64, (t * 37) % 65);
                r.drift = Some(Drift {
                    max_abs: (t % 7) as f64 * 0.1,
                    rms: (t % 3) as f64 * 0.01,
                });
                r
            })
            .collect();
        let r = build_report(&trace, &m).unwrap();

        // independent column sums over the raw trace
        let reuse_col: Vec<f64> = trace.iter().map(|s| s.reuse_count as f64).collect();
        let flops_col: Vec<f64> = reuse_col.iter().map(|u| 7.0 + (64.0 - u) * 3.0).collect();
        let total: f64 = flops_col.iter().sum();
        let baseline = 100.0 * (7.0 + 64.0 * 3.0);
        assert_eq!(r.total_flops, total);
        assert_eq!(r.baseline_flops, baseline);
        assert!((r.flops_ratio - total / baseline).abs() < 1e-15);
        assert!((r.reuse_rate - reuse_col.iter().sum::<f64>() / 6400.0).abs() < 1e-15);
        assert_eq!(r.total_flops, r.per_step.iter().map(|s| s.flops).sum::<f64>());
        assert!((r.drift.max_abs - 0.6).abs() < 1e-15);
        let rms = (trace.iter().map(|s| s.drift.unwrap().rms.powi(2)).sum::<f64>() / 100.0).sqrt();
        assert!((r.drift.rms - rms).abs() < 1e-15);
    }

    #[test]
    fn ratio_falls_as_reuse_grows() {
        let m = CostModel::default();
        let mut prev = f64::INFINITY;
        for reuse in 0..=16 {
            let trace: Vec<_> = (0..4).map(|t| record(t, 16, if t == 0 { 0 } else { reuse })).collect();
            let ratio = build_report(&trace, &m).unwrap().flops_ratio;
            assert!(ratio < prev);
            assert!(ratio > 0.0 && ratio <= 1.0);
            prev = ratio;
        }
    }

    #[test]
    fn csv_has_one_line_per_step() {
        let trace: Vec<_> = (0..3).map(|t| record(t, 8, t)).collect();
        let csv = build_report(&trace, &CostModel::default()).unwrap().to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2], "1,1,0,1,0,0,7,,");
    }
}
