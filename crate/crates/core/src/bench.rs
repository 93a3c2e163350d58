//! Generation latency: iterative unmasking (plain and staged) against the
//! left-to-right baseline. Timed regions run on the calling thread only.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::{ar_generate, generate, LengthPolicy};
use crate::model::TinyMdlm;
use crate::schedule::{build_schedule, Variant};
use crate::seq::TokenId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_s: f64,
    pub std_s: f64,
    pub calls: f64,
    pub samples: usize,
}

impl LatencyStats {
    fn from_runs(times: &[f64], calls: &[usize]) -> Self {
        let n = times.len().max(1) as f64;
        let mean = times.iter().sum::<f64>() / n;
        let var = if times.len() > 1 {
            times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (times.len() - 1) as f64
        } else {
            0.0
        };
        LatencyStats { mean_s: mean, std_s: var.sqrt(), calls: calls.iter().sum::<usize>() as f64 / n, samples: times.len() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub m: usize,
    pub k: usize,
    pub d_model: usize,
    pub mdlm_plain: LatencyStats,
    pub mdlm_utc: LatencyStats,
    pub ar: LatencyStats,
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("M={} k={} d_model={}\n{:<12}{:>12}{:>12}{:>10}\n", self.m, self.k, self.d_model, "model", "mean_s", "std_s", "calls");
        for (name, st) in [("mdlm-plain", self.mdlm_plain), ("mdlm-utc", self.mdlm_utc), ("ar", self.ar)] {
            s += &format!("{name:<12}{:>12.6}{:>12.6}{:>10.1}\n", st.mean_s, st.std_s, st.calls);
        }
        s
    }
}

/// Time `repeats` generations per text for each decoder after `warmup`
/// untimed runs. The baseline decodes all `m` indices (fixed length).
pub fn bench_latency(
    mdlm: &TinyMdlm,
    ar: &TinyMdlm,
    texts: &[Vec<TokenId>],
    m: usize,
    k: usize,
    repeats: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if mdlm.config.d_model != ar.config.d_model || mdlm.config.blocks != ar.config.blocks {
        return Err(Error::Config("benchmarked models must share backbone widths".into()));
    }
    if !ar.config.causal || mdlm.config.causal {
        return Err(Error::Config("expected a bidirectional model and a causal baseline".into()));
    }
    if texts.is_empty() || repeats == 0 {
        return Err(Error::InvalidArgument("benchmark needs texts and at least one repeat".into()));
    }
    let plain = build_schedule(m, k, Variant::Plain)?;
    let utc = build_schedule(m, k, Variant::Utc)?;
    for text in texts.iter().cycle().take(warmup) {
        generate(mdlm, text, &plain, 0)?;
        ar_generate(ar, text, m, LengthPolicy::Fixed)?;
    }
    let mut runs: [(Vec<f64>, Vec<usize>); 3] = Default::default();
    for r in 0..repeats {
        for (i, text) in texts.iter().enumerate() {
            let seed = (r * texts.len() + i) as u64;
            for (slot, job) in runs.iter_mut().enumerate() {
                let start = Instant::now();
                let (_, stats) = match slot {
                    0 => generate(mdlm, text, &plain, seed)?,
                    1 => generate(mdlm, text, &utc, seed)?,
                    _ => ar_generate(ar, text, m, LengthPolicy::Fixed)?,
                };
                job.0.push(start.elapsed().as_secs_f64());
                job.1.push(stats.calls);
            }
        }
    }
    Ok(BenchReport {
        m,
        k,
        d_model: mdlm.config.d_model,
        mdlm_plain: LatencyStats::from_runs(&runs[0].0, &runs[0].1),
        mdlm_utc: LatencyStats::from_runs(&runs[1].0, &runs[1].1),
        ar: LatencyStats::from_runs(&runs[2].0, &runs[2].1),
    })
}
