//! Unmasking schedules, confidence-based selection and order counting.
//!
//! A plain schedule unmasks `k` indices per step anywhere in the span. The
//! checkpointed schedule splits the reverse process into three stages that
//! end at `t = 0.75` and `t = 0.5`: stage one may only reveal the stride-4
//! grid `{0, 4, 8, ..}`, stage two the remaining even indices
//! `{2, 6, 10, ..}`, and stage three the odd indices. After stage one
//! exactly `ceil(M/4)` indices are visible and after stage two `ceil(M/2)`.

use std::collections::BTreeSet;
use std::fmt;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Plain,
    Utc,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Variant::Plain),
            "utc" => Ok(Variant::Utc),
            other => Err(Error::Config(format!("unknown schedule variant '{other}'"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Plain => "plain",
            Variant::Utc => "utc",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub start_t: f64,
    pub end_t: f64,
    pub allowed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub index: usize,
    pub stage: usize,
    pub unmask_count: usize,
    pub candidates: Vec<usize>,
    /// Noise level before and after the step, from the cumulative counts.
    pub t_from: f64,
    pub t_to: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnmaskSchedule {
    pub m: usize,
    pub k: usize,
    pub variant: Variant,
    pub stages: Vec<Stage>,
    pub steps: Vec<Step>,
}

fn check_mk(m: usize, k: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidArgument("M must be at least 1".into()));
    }
    if k == 0 || k > m {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in [1, M = {m}]")));
    }
    Ok(())
}

/// Index sets of the three checkpointed stages over a span of `m`.
pub fn utc_stage_positions(m: usize) -> [Vec<usize>; 3] {
    [
        (0..m).filter(|i| i % 4 == 0).collect(),
        (0..m).filter(|i| i % 4 == 2).collect(),
        (0..m).filter(|i| i % 2 == 1).collect(),
    ]
}

/// Stage sizes `ceil(M/4)`, `ceil(M/2) - ceil(M/4)`, `M - ceil(M/2)`.
pub fn utc_stage_sizes(m: usize) -> [usize; 3] {
    let q = m.div_ceil(4);
    let h = m.div_ceil(2);
    [q, h - q, m - h]
}

/// Build the step list for `m` tokens revealed `k` at a time.
pub fn build_schedule(m: usize, k: usize, variant: Variant) -> Result<UnmaskSchedule> {
    check_mk(m, k)?;
    let stage_sets: Vec<Vec<usize>> = match variant {
        Variant::Plain => vec![(0..m).collect()],
        Variant::Utc => utc_stage_positions(m).into_iter().collect(),
    };
    let boundaries: Vec<f64> = match variant {
        Variant::Plain => vec![1.0, 0.0],
        Variant::Utc => vec![1.0, 0.75, 0.5, 0.0],
    };
    let mut stages = Vec::new();
    let mut steps = Vec::new();
    let mut revealed = 0usize;
    for (si, allowed) in stage_sets.into_iter().enumerate() {
        let mut left = allowed.len();
        while left > 0 {
            let n = left.min(k);
            let t_from = 1.0 - revealed as f64 / m as f64;
            revealed += n;
            left -= n;
            steps.push(Step {
                index: steps.len(),
                stage: si,
                unmask_count: n,
                candidates: allowed.clone(),
                t_from,
                t_to: 1.0 - revealed as f64 / m as f64,
            });
        }
        stages.push(Stage { start_t: boundaries[si], end_t: boundaries[si + 1], allowed });
    }
    Ok(UnmaskSchedule { m, k, variant, stages, steps })
}

impl UnmaskSchedule {
    pub fn total_unmasked(&self) -> usize {
        self.steps.iter().map(|s| s.unmask_count).sum()
    }

    /// Cumulative visible count at the end of each stage.
    pub fn stage_boundary_counts(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut acc = 0;
        for (si, _) in self.stages.iter().enumerate() {
            acc += self.steps.iter().filter(|s| s.stage == si).map(|s| s.unmask_count).sum::<usize>();
            out.push(acc);
        }
        out
    }

    /// Plain-text table: `step  size  candidates`.
    pub fn to_table(&self) -> String {
        let mut out = String::from("step\tsize\tcandidates\n");
        for s in &self.steps {
            let cands: Vec<String> = s.candidates.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!("{}\t{}\t{}\n", s.index, s.unmask_count, cands.join(",")));
        }
        out
    }

    pub fn from_table(text: &str, variant: Variant) -> Result<UnmaskSchedule> {
        let mut sizes = Vec::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let size = cols
                .get(1)
                .and_then(|c| c.parse::<usize>().ok())
                .ok_or_else(|| Error::Format(format!("schedule table line {}: bad size", ln + 1)))?;
            sizes.push(size);
        }
        let m: usize = sizes.iter().sum();
        let k = sizes.iter().copied().max().unwrap_or(0);
        let sched = build_schedule(m, k, variant)?;
        if sched.steps.iter().map(|s| s.unmask_count).collect::<Vec<_>>() != sizes {
            return Err(Error::Format("schedule table does not match a generated schedule".into()));
        }
        Ok(sched)
    }
}

/// Pick `step.unmask_count` candidates with the highest confidence.
///
/// Entries outside `step.candidates` are ignored. Ties are broken by a
/// seeded uniform random key. Returned indices are ordered by decreasing
/// confidence.
pub fn select_unmask(confidences: &[(usize, f64)], step: &Step, tie_seed: u64) -> Result<Vec<usize>> {
    let allowed: BTreeSet<usize> = step.candidates.iter().copied().collect();
    let mut rng = rng::stream(tie_seed, streams::TIE_BREAK);
    let mut pool: Vec<(usize, f64, u64)> = confidences
        .iter()
        .filter(|(i, _)| allowed.contains(i))
        .map(|&(i, c)| (i, c, rng.random()))
        .collect();
    if pool.len() < step.unmask_count {
        return Err(Error::InvalidArgument(format!(
            "step {} needs {} candidates, only {} available",
            step.index,
            step.unmask_count,
            pool.len()
        )));
    }
    pool.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.cmp(&b.2)));
    Ok(pool.into_iter().take(step.unmask_count).map(|(i, _, _)| i).collect())
}

fn factorial(n: usize) -> BigUint {
    (1..=n as u64).fold(BigUint::one(), |acc, x| acc * x)
}

/// Orders for revealing `n` indices in steps of `k`, the last step taking
/// `n mod k` when nonzero: `n! / ((k!)^floor(n/k) * (n mod k)!)`.
fn stage_orders(n: usize, k: usize) -> BigUint {
    if n == 0 {
        return BigUint::one();
    }
    let full = n / k;
    let rem = n % k;
    let denom = (0..full).fold(BigUint::one(), |acc, _| acc * factorial(k)) * factorial(rem);
    factorial(n) / denom
}

/// Exact number of distinct unmasking orders, as an arbitrary-precision integer.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct OrderCount(pub BigUint);

impl OrderCount {
    /// `(mantissa, exponent)` with `value ≈ mantissa × 10^exponent`, `1 ≤ mantissa < 10`.
    pub fn scientific(&self) -> (f64, u32) {
        let digits = self.0.to_string();
        let exp = (digits.len() - 1) as u32;
        let head: String = digits.chars().take(17).collect();
        let mant = head.parse::<f64>().unwrap_or(0.0) / 10f64.powi(head.len() as i32 - 1);
        (mant, exp)
    }

    pub fn log10(&self) -> f64 {
        let (m, e) = self.scientific();
        m.log10() + e as f64
    }

    pub fn to_f64(&self) -> Option<f64> {
        self.0.to_f64()
    }
}

impl fmt::Display for OrderCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

pub fn count_orders_plain(m: usize, k: usize) -> Result<OrderCount> {
    check_mk(m, k)?;
    Ok(OrderCount(stage_orders(m, k)))
}

pub fn count_orders_utc(m: usize, k: usize) -> Result<OrderCount> {
    check_mk(m, k)?;
    let value = utc_stage_sizes(m)
        .iter()
        .fold(BigUint::one(), |acc, &n| acc * stage_orders(n, k));
    Ok(OrderCount(value))
}

/// Exact ratio `plain / utc` as quotient and remainder.
pub fn order_ratio(plain: &OrderCount, utc: &OrderCount) -> (BigUint, BigUint) {
    if utc.0.is_zero() {
        return (BigUint::zero(), BigUint::zero());
    }
    (&plain.0 / &utc.0, &plain.0 % &utc.0)
}

/// Visible index count at noise level `t`: `ceil((1 - t) M)`.
pub fn visible_count(m: usize, t: f64) -> usize {
    let x = (1.0 - t) * m as f64;
    // absorb representation error such as (1 - 0.6) * 100 = 40.000000000000004
    let c = (x - 1e-9).ceil().max(0.0) as usize;
    c.min(m)
}

/// A visible-index set at noise level `t` that some checkpointed rollout
/// can reach: earlier stages are fully revealed before any index of a later
/// stage, and the frontier stage gets a seeded random subset.
pub fn training_index_filter(m: usize, t: f64, rng_seed: u64) -> Result<BTreeSet<usize>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::NoiseLevel(format!("t = {t} outside [0, 1]")));
    }
    let mut want = visible_count(m, t);
    let mut rng = rng::stream(rng_seed, streams::INDEX_FILTER);
    let mut out = BTreeSet::new();
    for stage in utc_stage_positions(m) {
        if want == 0 {
            break;
        }
        if want >= stage.len() {
            want -= stage.len();
            out.extend(stage);
        } else {
            for j in index::sample(&mut rng, stage.len(), want) {
                out.insert(stage[j]);
            }
            want = 0;
        }
    }
    Ok(out)
}

/// Whether `visible` is consistent with the checkpointed stage order.
pub fn is_utc_reachable(m: usize, visible: &BTreeSet<usize>) -> bool {
    if visible.iter().any(|&i| i >= m) {
        return false;
    }
    let stages = utc_stage_positions(m);
    let mut remaining = visible.len();
    let mut earlier_full = true;
    for stage in &stages {
        let inside = stage.iter().filter(|i| visible.contains(i)).count();
        if !earlier_full && inside > 0 {
            return false;
        }
        if remaining >= stage.len() {
            if inside != stage.len() {
                return false;
            }
            remaining -= stage.len();
        } else {
            if inside != remaining {
                return false;
            }
            remaining = 0;
            earlier_full = false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plain_schedule_shape() {
        let s = build_schedule(8, 2, Variant::Plain).unwrap();
        assert_eq!(s.steps.len(), 4);
        assert!(s.steps.iter().all(|st| st.unmask_count == 2 && st.candidates == (0..8).collect::<Vec<_>>()));
        assert_eq!(s.total_unmasked(), 8);
        assert_eq!(build_schedule(10, 4, Variant::Plain).unwrap().steps.len(), 3);
    }

    #[test]
    fn utc_schedule_m100_k4() {
        let s = build_schedule(100, 4, Variant::Utc).unwrap();
        let sizes: Vec<usize> = s.stages.iter().map(|st| st.allowed.len()).collect();
        assert_eq!(sizes, vec![25, 25, 50]);
        assert_eq!(s.stage_boundary_counts(), vec![25, 50, 100]);
        for st in &s.steps {
            let allowed = &s.stages[st.stage].allowed;
            assert!(st.candidates.iter().all(|c| allowed.contains(c)));
        }
        // 25 = 6 * 4 + 1: each of the first two stages ends with a single-token step
        assert_eq!(s.steps.iter().filter(|st| st.unmask_count == 1).count(), 2);
        let b = s.steps.iter().find(|st| st.stage == 1).unwrap();
        assert!((b.t_from - 0.75).abs() < 1e-12);
    }

    #[test]
    fn utc_schedule_smallest_case() {
        let s = build_schedule(4, 4, Variant::Utc).unwrap();
        let sizes: Vec<usize> = s.stages.iter().map(|st| st.allowed.len()).collect();
        assert_eq!(sizes, vec![1, 1, 2]);
        let steps: Vec<usize> = s.steps.iter().map(|st| st.unmask_count).collect();
        assert_eq!(steps, vec![1, 1, 2]);
    }

    #[test]
    fn schedule_rejects_bad_args() {
        assert!(build_schedule(0, 1, Variant::Plain).is_err());
        assert!(build_schedule(4, 5, Variant::Utc).is_err());
        assert!(build_schedule(4, 0, Variant::Utc).is_err());
    }

    #[test]
    fn table_round_trip() {
        let s = build_schedule(13, 3, Variant::Utc).unwrap();
        let t = s.to_table();
        assert!(t.starts_with("step\tsize\tcandidates\n"));
        assert_eq!(UnmaskSchedule::from_table(&t, Variant::Utc).unwrap(), s);
    }

    #[test]
    fn select_argmax_and_restriction() {
        let step = Step { index: 0, stage: 0, unmask_count: 1, candidates: vec![1, 2, 3], t_from: 1.0, t_to: 0.5 };
        let got = select_unmask(&[(1, 0.9), (2, 0.1), (3, 0.5)], &step, 0).unwrap();
        assert_eq!(got, vec![1]);

        // 12 indices, stride-4 grid candidates; global max at index 5
        let grid = Step { index: 0, stage: 0, unmask_count: 1, candidates: vec![0, 4, 8], t_from: 1.0, t_to: 0.9 };
        let conf: Vec<(usize, f64)> = (0..12).map(|i| (i, if i == 5 { 0.99 } else { 0.1 + i as f64 * 0.01 })).collect();
        let got = select_unmask(&conf, &grid, 0).unwrap();
        assert_eq!(got, vec![8]);
        // exhaustive: whichever non-grid index carries the max, it is never chosen
        for hot in (0..12).filter(|i| i % 4 != 0) {
            let conf: Vec<(usize, f64)> = (0..12).map(|i| (i, if i == hot { 1.0 } else { 0.5 })).collect();
            for seed in 0..8 {
                let got = select_unmask(&conf, &grid, seed).unwrap();
                assert!(got.iter().all(|g| g % 4 == 0));
            }
        }
    }

    #[test]
    fn select_ties_are_seeded() {
        let step = Step { index: 0, stage: 0, unmask_count: 2, candidates: (0..10).collect(), t_from: 1.0, t_to: 0.8 };
        let conf: Vec<(usize, f64)> = (0..10).map(|i| (i, 0.5)).collect();
        let a = select_unmask(&conf, &step, 42).unwrap();
        assert_eq!(a, select_unmask(&conf, &step, 42).unwrap());
        assert_eq!(a.len(), 2);
        let distinct: BTreeSet<Vec<usize>> = (0..50).map(|s| select_unmask(&conf, &step, s).unwrap()).collect();
        assert!(distinct.len() > 10);
        let short = Step { unmask_count: 3, ..step };
        assert!(select_unmask(&conf[..2], &short, 0).is_err());
    }

    #[test]
    fn small_counts() {
        assert_eq!(count_orders_plain(4, 2).unwrap().to_string(), "6");
        assert_eq!(count_orders_plain(2, 2).unwrap().to_string(), "1");
        assert_eq!(count_orders_utc(8, 2).unwrap().to_string(), "6");
        assert_eq!(count_orders_utc(4, 1).unwrap().to_string(), "2");
        assert_eq!(count_orders_utc(4, 2).unwrap().to_string(), "1");
        // non-divisible: 5!/(2!·2!·1!) = 30
        assert_eq!(count_orders_plain(5, 2).unwrap().to_string(), "30");
    }

    #[test]
    fn hundred_token_counts() {
        let plain = count_orders_plain(100, 4).unwrap();
        let (mant, exp) = plain.scientific();
        assert_eq!(exp, 123);
        assert!((mant - 2.9).abs() < 0.05, "{mant}");
        let utc = count_orders_utc(100, 4).unwrap();
        let (q, _) = order_ratio(&plain, &utc);
        assert!(q > BigUint::from(10u32).pow(41));
    }

    #[test]
    fn index_filter_examples() {
        let s = training_index_filter(100, 0.75, 1).unwrap();
        assert_eq!(s, (0..100).step_by(4).collect());
        assert!(training_index_filter(100, 1.0, 1).unwrap().is_empty());
        let s = training_index_filter(100, 0.6, 3).unwrap();
        assert_eq!(s.len(), 40);
        assert!((0..100).step_by(4).all(|i| s.contains(&i)));
        assert_eq!(s.iter().filter(|i| *i % 4 == 2).count(), 15);
        assert!(is_utc_reachable(100, &s));
        assert_eq!(training_index_filter(100, 0.0, 0).unwrap().len(), 100);
        assert!(training_index_filter(10, 1.2, 0).is_err());
    }

    #[test]
    fn reachability_rejects_out_of_order_states() {
        let mut s: BTreeSet<usize> = [0, 4].into_iter().collect();
        assert!(is_utc_reachable(12, &s));
        s.insert(2);
        assert!(!is_utc_reachable(12, &s)); // stage two started before stage one finished
        let s: BTreeSet<usize> = [0, 4, 8, 1].into_iter().collect();
        assert!(!is_utc_reachable(12, &s));
    }

    proptest! {
        #[test]
        fn utc_never_exceeds_plain(m in 1usize..80, kk in 1usize..80) {
            let k = 1 + (kk - 1) % m;
            let p = count_orders_plain(m, k).unwrap();
            let u = count_orders_utc(m, k).unwrap();
            prop_assert!(u <= p);
            prop_assert!(u.0 >= BigUint::one());
        }

        #[test]
        fn schedules_sum_to_m(m in 1usize..200, kk in 1usize..200, utc in any::<bool>()) {
            let k = 1 + (kk - 1) % m;
            let v = if utc { Variant::Utc } else { Variant::Plain };
            let s = build_schedule(m, k, v).unwrap();
            prop_assert_eq!(s.total_unmasked(), m);
            if utc {
                let b = s.stage_boundary_counts();
                prop_assert_eq!(b[0], m.div_ceil(4));
                prop_assert_eq!(b[1], m.div_ceil(2));
            } else {
                prop_assert_eq!(s.steps.len(), m.div_ceil(k));
            }
        }

        #[test]
        fn filtered_states_are_reachable(m in 1usize..150, t in 0.0f64..=1.0, seed in any::<u64>()) {
            let s = training_index_filter(m, t, seed).unwrap();
            prop_assert_eq!(s.len(), visible_count(m, t));
            prop_assert!(is_utc_reachable(m, &s));
        }
    }
}
