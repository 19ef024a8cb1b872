//! Comparing a weighted sample with an enumerated target.

use serde::{Deserialize, Serialize};

use crate::enumerate::ReferenceSet;
use crate::error::{Error, Result};
use crate::graph::Plan;
use crate::metrics::{ess_importance, normalized_weights};
use crate::rng::RngStream;
use crate::smc::Categorical;

/// Weighted mass of the sample on every reference plan, plus the mass that
/// fell outside the set.
pub fn sample_distribution(
    refset: &ReferenceSet,
    plans: &[Plan],
    log_weights: &[f64],
) -> Result<(Vec<f64>, f64)> {
    if plans.is_empty() {
        return Err(Error::EmptySupport("ensemble has no plans".into()));
    }
    let w = normalized_weights(log_weights);
    if w.iter().all(|&x| x == 0.0) {
        return Err(Error::EmptySupport("all sample weights are zero".into()));
    }
    let mut mass = vec![0.0; refset.len()];
    let mut outside = 0.0;
    for (plan, wi) in plans.iter().zip(&w) {
        match refset.index_of(plan) {
            Some(i) => mass[i] += wi,
            None => outside += wi,
        }
    }
    Ok((mass, outside))
}

/// Total variation `1/2 sum |p - q|` plus half of any mass outside `q`'s
/// support.
pub fn tv_distance(p: &[f64], q: &[f64], outside: f64) -> f64 {
    0.5 * (p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() + outside)
}

/// 95th percentile of the TV distance between the target and the empirical
/// distribution of `draws` exact samples from it.
pub fn tv_band(target: &[f64], draws: usize, replicates: usize, seed: u64) -> f64 {
    let draws = draws.max(1);
    let logs: Vec<f64> = target.iter().map(|p| p.ln()).collect();
    let Some(table) = Categorical::from_log_weights(&logs) else {
        return f64::NAN;
    };
    let root = RngStream::new(seed);
    let mut tvs: Vec<f64> = (0..replicates.max(1))
        .map(|r| {
            let mut rng = root.child(r as u64).rng();
            let mut counts = vec![0.0; target.len()];
            for _ in 0..draws {
                counts[table.sample(&mut rng)] += 1.0;
            }
            let emp: Vec<f64> = counts.iter().map(|c| c / draws as f64).collect();
            tv_distance(&emp, target, 0.0)
        })
        .collect();
    tvs.sort_by(f64::total_cmp);
    tvs[((tvs.len() as f64 * 0.95).ceil() as usize).clamp(1, tvs.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub target: f64,
    pub sample: f64,
    /// Expected range of the sample share given the ESS (2 binomial SE).
    pub band_lo: f64,
    pub band_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub statistic: String,
    pub reference_plans: usize,
    pub ess: f64,
    pub tv: f64,
    pub tv_band: f64,
    pub outside_mass: f64,
    /// TV above the band, or a bin outside its band.
    pub flagged: bool,
    pub bins: Vec<Bin>,
}

/// TV distance with a multinomial band and a binned comparison of
/// `statistic`. `reference_values[i]` belongs to `refset.plans[i]`,
/// `sample_values[j]` to `plans[j]`.
#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    refset: &ReferenceSet,
    target: &[f64],
    plans: &[Plan],
    log_weights: &[f64],
    statistic: &str,
    reference_values: &[f64],
    sample_values: &[f64],
    bins: usize,
    seed: u64,
) -> Result<CalibrationReport> {
    if target.len() != refset.len() || reference_values.len() != refset.len() {
        return Err(Error::InvalidParameter("one target value per reference plan required".into()));
    }
    let (mass, outside) = sample_distribution(refset, plans, log_weights)?;
    let ess = ess_importance(log_weights);
    let tv = tv_distance(&mass, target, outside);
    let tv_band = tv_band(target, ess.round() as usize, 200, seed);

    let w = normalized_weights(log_weights);
    let lo = reference_values
        .iter()
        .chain(sample_values)
        .copied()
        .filter(|x| x.is_finite())
        .fold(f64::INFINITY, f64::min);
    let hi = reference_values
        .iter()
        .chain(sample_values)
        .copied()
        .filter(|x| x.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let bins = bins.max(1);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let slot = |x: f64| (((x - lo) / width) as usize).min(bins - 1);
    let mut t = vec![0.0; bins];
    let mut s = vec![0.0; bins];
    for (x, p) in reference_values.iter().zip(target) {
        t[slot(*x)] += p;
    }
    for (x, p) in sample_values.iter().zip(&w) {
        s[slot(*x)] += p;
    }
    let table: Vec<Bin> = (0..bins)
        .map(|b| {
            let se = (t[b] * (1.0 - t[b]) / ess.max(1.0)).sqrt();
            Bin {
                lo: lo + b as f64 * width,
                hi: lo + (b + 1) as f64 * width,
                target: t[b],
                sample: s[b],
                band_lo: (t[b] - 2.0 * se).max(0.0),
                band_hi: (t[b] + 2.0 * se).min(1.0),
            }
        })
        .collect();
    let flagged = tv > tv_band || outside > 0.0;
    Ok(CalibrationReport {
        statistic: statistic.to_string(),
        reference_plans: refset.len(),
        ess,
        tv,
        tv_band,
        outside_mass: outside,
        flagged,
        bins: table,
    })
}
