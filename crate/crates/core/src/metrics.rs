//! Token-level BLEU over sign streams and DTW-aligned joint position error.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq::{Part, TokenSequence};
use crate::tokenizer::MotionSequence;

pub const BLEU_ORDER: usize = 4;

fn ngram_counts<T: Eq + Hash + Clone>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU in percent: clipped n-gram precisions up to `max_n`
/// pooled over the corpus, geometric mean, brevity penalty, no smoothing.
/// Any zero precision (or an empty hypothesis corpus) gives 0.
pub fn corpus_bleu<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("BLEU order must be positive".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 || matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched.iter().zip(&total).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum::<f64>() / max_n as f64;
    let bp = if hyp_len >= ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    Ok(100.0 * bp * log_p.exp())
}

/// Sentence-level convenience wrapper.
pub fn sibleu(hyp: &[u32], reference: &[u32], max_n: usize) -> Result<f64> {
    corpus_bleu(&[hyp.to_vec()], &[reference.to_vec()], max_n)
}

/// Body score over the body stream; hands score averages the left and
/// right stream scores.
pub fn sibleu_parts(hyps: &[TokenSequence], refs: &[TokenSequence]) -> Result<(f64, f64)> {
    let stream = |set: &[TokenSequence], p: Part| -> Vec<Vec<u32>> { set.iter().map(|s| s.sign[p.index()].clone()).collect() };
    let body = corpus_bleu(&stream(hyps, Part::Body), &stream(refs, Part::Body), BLEU_ORDER)?;
    let left = corpus_bleu(&stream(hyps, Part::Left), &stream(refs, Part::Left), BLEU_ORDER)?;
    let right = corpus_bleu(&stream(hyps, Part::Right), &stream(refs, Part::Right), BLEU_ORDER)?;
    Ok((body, 0.5 * (left + right)))
}

/// Columns compared by DTW, grouped into joints of `joint_dim` consecutive
/// columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointSelection {
    pub columns: Vec<usize>,
    pub joint_dim: usize,
}

impl JointSelection {
    pub fn new(columns: Vec<usize>, joint_dim: usize) -> Result<Self> {
        if joint_dim == 0 || columns.is_empty() || columns.len() % joint_dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} columns cannot be grouped into joints of {joint_dim}",
                columns.len()
            )));
        }
        Ok(JointSelection { columns, joint_dim })
    }

    /// Columns of one part of a `d_s`-wide pose, grouped into joints.
    pub fn part(d_s: usize, part: Part, joint_dim: usize) -> Result<Self> {
        let r = crate::tokenizer::part_slices(d_s)[part.index()].clone();
        let cols: Vec<usize> = r.collect();
        let jd = if cols.len() % joint_dim == 0 { joint_dim } else { 1 };
        JointSelection::new(cols, jd)
    }

    /// Both hands together.
    pub fn hands(d_s: usize, joint_dim: usize) -> Result<Self> {
        let s = crate::tokenizer::part_slices(d_s);
        let cols: Vec<usize> = s[1].clone().chain(s[2].clone()).collect();
        let jd = if s[1].len() % joint_dim == 0 && s[2].len() % joint_dim == 0 { joint_dim } else { 1 };
        JointSelection::new(cols, jd)
    }

    /// Mean Euclidean distance over joints between two frames.
    pub fn frame_cost(&self, a: &[f64], b: &[f64]) -> f64 {
        let joints = self.columns.len() / self.joint_dim;
        self.columns
            .chunks(self.joint_dim)
            .map(|js| js.iter().map(|&c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / joints as f64
    }
}

/// DTW over frame costs; returns the minimum summed path cost divided by
/// that path's length. Among equal-cost paths the longest is used.
pub fn dtw_jpe(gen: &MotionSequence, reference: &MotionSequence, joints: &JointSelection) -> Result<f64> {
    if gen.d_s() != reference.d_s() {
        return Err(Error::InvalidArgument("DTW inputs differ in pose width".into()));
    }
    fn rows(m: &MotionSequence) -> Vec<&[f64]> {
        (0..m.n_frames()).map(|f| m.frame(f)).collect()
    }
    dtw_rows(&rows(gen), &rows(reference), joints)
}

/// [`dtw_jpe`] over raw frame rows.
pub fn dtw_rows(gen: &[&[f64]], reference: &[&[f64]], joints: &JointSelection) -> Result<f64> {
    let (n, m) = (gen.len(), reference.len());
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("DTW needs nonempty sequences".into()));
    }
    let width = gen.iter().chain(reference).map(|r| r.len()).min().unwrap_or(0);
    if joints.columns.iter().any(|&c| c >= width) {
        return Err(Error::InvalidArgument("DTW column selection does not fit the poses".into()));
    }
    // (cost, steps) with lexicographic (min cost, max steps)
    let better = |a: (f64, usize), b: (f64, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 > b.1);
    let mut dp = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let c = joints.frame_cost(gen[i], reference[j]);
            let prev = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut best = (f64::INFINITY, 0);
                for (di, dj) in [(1, 1), (1, 0), (0, 1)] {
                    if i >= di && j >= dj {
                        let cand = dp[(i - di) * m + (j - dj)];
                        if better(cand, best) {
                            best = cand;
                        }
                    }
                }
                best
            };
            dp[i * m + j] = (prev.0 + c, prev.1 + 1);
        }
    }
    let (cost, len) = dp[n * m - 1];
    Ok(cost / len as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sibleu_body: f64,
    pub sibleu_hands: f64,
    pub dtw_body: f64,
    pub dtw_hands: f64,
    /// Mean seconds per sample and predictor calls per sample.
    pub latency_s: f64,
    pub calls: f64,
}

impl MetricReport {
    /// `metric=value` pairs on one line.
    pub fn to_line(&self, run: &str) -> String {
        format!(
            "run={run} sibleu_body={:.4} sibleu_hands={:.4} dtw_body={:.6} dtw_hands={:.6} latency_s={:.6} calls={:.2}",
            self.sibleu_body, self.sibleu_hands, self.dtw_body, self.dtw_hands, self.latency_s, self.calls
        )
    }

    pub fn to_table(&self) -> String {
        let rows = [
            ("SiBLEU-body", self.sibleu_body),
            ("SiBLEU-hands (mean of left, right)", self.sibleu_hands),
            ("DTW-JPE body", self.dtw_body),
            ("DTW-JPE hands", self.dtw_hands),
            ("latency (s/sample)", self.latency_s),
            ("predictor calls/sample", self.calls),
        ];
        rows.iter().map(|(k, v)| format!("{k:<36}{v:>14.6}\n")).collect()
    }
}
