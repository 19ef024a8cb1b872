//! Ensemble files, statistics tables and run manifests.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::enumerate::assignment_from_ids;
use crate::error::{Error, Result};
use crate::graph::{Graph, Labeling, Plan};
use crate::metrics::{
    ess_importance, ess_importance_for, normalized_weights, plan_stats, unique_plans,
    weighted_quantile, PlanStats,
};
use crate::sampler::{PlanOrigin, SampleRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    log_weights: Vec<f64>,
}

/// One NDJSON line. `log_weight` is `null` for a zero weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PlanRecord {
    id: usize,
    assignment: BTreeMap<String, u32>,
    log_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chain: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iteration: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stages: Option<StageRecord>,
}

fn finite_or_none(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Writes one line per plan with 1-based districts keyed by node id.
pub fn write_ensemble<W: Write>(graph: &Graph, run: &SampleRun, mut w: W) -> Result<()> {
    for (id, ((plan, &lw), origin)) in run
        .plans
        .iter()
        .zip(&run.log_weights)
        .zip(&run.origins)
        .enumerate()
    {
        let mut rec = PlanRecord {
            id,
            assignment: (0..graph.node_count())
                .map(|v| (graph.id(v).to_string(), plan.district_of(v) + 1))
                .collect(),
            log_weight: finite_or_none(lw),
            weight: None,
            chain: None,
            iteration: None,
            stages: None,
        };
        match origin {
            PlanOrigin::Particle { stage_log_weights } => {
                rec.stages = Some(StageRecord {
                    log_weights: stage_log_weights.clone(),
                })
            }
            PlanOrigin::Chain { chain, iteration } => {
                rec.weight = Some(1.0);
                rec.chain = Some(*chain);
                rec.iteration = Some(*iteration);
            }
        }
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Reads an ensemble written by [`write_ensemble`]. `districts` fixes the
/// plan size; when `None` it is the largest district number seen.
pub fn read_ensemble<R: BufRead>(graph: &Graph, r: R, districts: Option<usize>) -> Result<SampleRun> {
    let mut records = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PlanRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("ensemble line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::EmptySupport("ensemble file has no plans".into()));
    }
    let n = match districts {
        Some(n) => n,
        None => records
            .iter()
            .flat_map(|r| r.assignment.values())
            .copied()
            .max()
            .unwrap_or(1) as usize,
    };
    let chain_run = records.iter().all(|r| r.iteration.is_some());
    let mut run = SampleRun {
        sampler: if chain_run { "merge-split" } else { "smc" }.into(),
        plans: Vec::with_capacity(records.len()),
        log_weights: Vec::with_capacity(records.len()),
        origins: Vec::with_capacity(records.len()),
        diagnostics: serde_json::Value::Null,
    };
    for rec in records {
        run.plans.push(assignment_from_ids(graph, &rec.assignment, n)?);
        run.log_weights.push(rec.log_weight.unwrap_or(f64::NEG_INFINITY));
        run.origins.push(match (rec.iteration, rec.stages) {
            (Some(iteration), _) => PlanOrigin::Chain {
                chain: rec.chain.unwrap_or(0),
                iteration,
            },
            (None, stages) => PlanOrigin::Particle {
                stage_log_weights: stages.map(|s| s.log_weights).unwrap_or_default(),
            },
        });
    }
    Ok(run)
}

/// Statistics for every plan, in order.
pub fn ensemble_stats(
    graph: &Graph,
    plans: &[Plan],
    labeling: Option<&Labeling>,
    votes: Option<(&str, &str)>,
) -> Result<Vec<PlanStats>> {
    plans
        .par_iter()
        .map(|p| plan_stats(graph, p, labeling, votes))
        .collect()
}

fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// CSV with one row per plan: id, log weight, dev, rem, log tau, splits per
/// level and sorted vote shares when available.
pub fn write_stats_csv<W: Write>(stats: &[PlanStats], log_weights: &[f64], mut w: W) -> Result<()> {
    let levels: Vec<String> = stats
        .first()
        .map(|s| s.spl.keys().cloned().collect())
        .unwrap_or_default();
    let shares = stats
        .first()
        .and_then(|s| s.shares.as_ref())
        .map_or(0, Vec::len);
    let mut header = vec!["id", "log_weight", "dev", "rem", "log_tau"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend(levels.iter().map(|l| format!("spl_{l}")));
    header.extend((1..=shares).map(|k| format!("share_{k}")));
    writeln!(w, "{}", header.join(","))?;
    for (id, (s, lw)) in stats.iter().zip(log_weights).enumerate() {
        let mut row = vec![
            id.to_string(),
            fmt_f64(*lw),
            fmt_f64(s.dev),
            fmt_f64(s.rem),
            fmt_f64(s.log_tau),
        ];
        row.extend(levels.iter().map(|l| s.spl.get(l).copied().unwrap_or(0).to_string()));
        if let Some(sh) = &s.shares {
            row.extend(sh.iter().map(|x| fmt_f64(*x)));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
    pub mean: f64,
}

impl Quantiles {
    pub fn of(values: &[f64], weights: &[f64]) -> Quantiles {
        let q = |p| weighted_quantile(values, Some(weights), p);
        let total: f64 = weights.iter().sum();
        Quantiles {
            q05: q(0.05),
            q25: q(0.25),
            q50: q(0.5),
            q75: q(0.75),
            q95: q(0.95),
            mean: values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total,
        }
    }
}

/// Weighted summary of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub plans: usize,
    pub unique_plans: usize,
    /// `(sum w)^2 / sum w^2`.
    pub ess: f64,
    /// ESS for estimating the mean of each statistic.
    pub ess_by_statistic: BTreeMap<String, f64>,
    pub quantiles: BTreeMap<String, Quantiles>,
}

pub fn summarize(plans: &[Plan], log_weights: &[f64], stats: &[PlanStats]) -> Result<Summary> {
    if plans.is_empty() {
        return Err(Error::EmptySupport("ensemble has no plans".into()));
    }
    let weights = normalized_weights(log_weights);
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in stats {
        columns.entry("dev".into()).or_default().push(s.dev);
        columns.entry("rem".into()).or_default().push(s.rem);
        columns.entry("log_tau".into()).or_default().push(s.log_tau);
        for (l, v) in &s.spl {
            columns.entry(format!("spl_{l}")).or_default().push(*v as f64);
        }
    }
    Ok(Summary {
        plans: plans.len(),
        unique_plans: unique_plans(plans),
        ess: ess_importance(log_weights),
        ess_by_statistic: columns
            .iter()
            .map(|(k, v)| (k.clone(), ess_importance_for(log_weights, v)))
            .collect(),
        quantiles: columns
            .iter()
            .map(|(k, v)| (k.clone(), Quantiles::of(v, &weights)))
            .collect(),
    })
}

/// Everything needed to rerun a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub diagnostics: serde_json::Value,
    pub seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> RunManifest {
        RunManifest {
            software: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: config.seed,
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            diagnostics: serde_json::Value::Null,
            seconds: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::Constraint;
    use crate::generate::grid;
    use crate::sampler::registry;
    use crate::ust::Wilson;

    fn runs() -> (Graph, Vec<SampleRun>) {
        let g = grid(3, 3, &[1, 2, 1, 2, 1, 2, 1, 2, 1]).build();
        let config = RunConfig {
            particles: 40,
            districts: 3,
            pop_tol: 0.5,
            rho: 0.5,
            iterations: 40,
            burn_in: 20,
            ..RunConfig::default()
        };
        let runs = ["smc", "merge-split"]
            .iter()
            .map(|n| {
                registry()
                    .get(n)
                    .unwrap()
                    .run(&g, &config, &Constraint::none(), &Wilson)
                    .unwrap()
            })
            .collect();
        (g, runs)
    }

    #[test]
    fn ensembles_round_trip() {
        let (g, runs) = runs();
        for run in runs {
            let mut buf = Vec::new();
            write_ensemble(&g, &run, &mut buf).unwrap();
            let back = read_ensemble(&g, buf.as_slice(), Some(3)).unwrap();
            assert_eq!(back.plans, run.plans);
            assert_eq!(back.log_weights, run.log_weights);
            assert_eq!(back.origins, run.origins);
            assert_eq!(back.sampler, run.sampler);
        }
    }

    #[test]
    fn zero_weights_survive_as_null() {
        let g = grid(1, 2, &[1, 1]).build();
        let run = SampleRun {
            sampler: "smc".into(),
            plans: vec![Plan::new(vec![0, 1], 2).unwrap()],
            log_weights: vec![f64::NEG_INFINITY],
            origins: vec![PlanOrigin::Particle {
                stage_log_weights: vec![0.5],
            }],
            diagnostics: serde_json::Value::Null,
        };
        let mut buf = Vec::new();
        write_ensemble(&g, &run, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).contains("\"log_weight\":null"));
        let back = read_ensemble(&g, buf.as_slice(), None).unwrap();
        assert_eq!(back.log_weights, vec![f64::NEG_INFINITY]);
    }

    #[test]
    fn empty_ensemble_is_an_error() {
        let g = grid(1, 2, &[1, 1]).build();
        assert!(read_ensemble(&g, &b""[..], None).is_err());
    }

    #[test]
    fn stats_table_and_summary() {
        let (g, runs) = runs();
        let run = &runs[0];
        let stats = ensemble_stats(&g, &run.plans, None, None).unwrap();
        let mut buf = Vec::new();
        write_stats_csv(&stats, &run.log_weights, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("id,log_weight,dev,rem,log_tau\n"));
        assert_eq!(text.lines().count(), run.plans.len() + 1);
        let summary = summarize(&run.plans, &run.log_weights, &stats).unwrap();
        assert!(summary.ess <= run.plans.len() as f64 + 1e-9);
        let rem = &summary.quantiles["rem"];
        assert!(rem.q05 <= rem.q50 && rem.q50 <= rem.q95);
    }
}
