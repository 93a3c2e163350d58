//! Mixture-of-parts sign embedding.
//!
//! Each part code `c_p` (looked up from a trainable copy of the codebook)
//! is projected to the model width, `E_p = FC_p(c_p)`. A gate MLP over the
//! concatenated codes produces softmax weights `g_p`, and the embedding is
//! `Σ_p g_p E_p`. The gate's output layer starts at zero, so a fresh layer
//! computes exactly the simple average of the three projections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::seq::TokenId;
use crate::tensor::{self, Linear, ParamSet, TensorId};
use crate::tokenizer::Codebooks;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbedMode {
    /// Softmax gate over all three parts.
    Dense,
    /// Fixed weights of 1/3.
    Average,
    /// Keep the `k` largest gates and renormalize them.
    Sparse(usize),
}

impl std::str::FromStr for EmbedMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(EmbedMode::Dense),
            "avg" | "average" => Ok(EmbedMode::Average),
            "top1" => Ok(EmbedMode::Sparse(1)),
            "top2" => Ok(EmbedMode::Sparse(2)),
            other => Err(Error::Config(format!("unknown embedding mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for EmbedMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EmbedMode::Dense => f.write_str("dense"),
            EmbedMode::Average => f.write_str("avg"),
            EmbedMode::Sparse(k) => write!(f, "top{k}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MopLayer {
    pub codes: [TensorId; 3],
    pub proj: [Linear; 3],
    pub gate_hidden: Linear,
    pub gate_out: Linear,
    pub n_codes: usize,
    pub code_dim: usize,
    pub d_model: usize,
}

/// Forward values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MopForward {
    pub embedding: Vec<f64>,
    pub gates: [f64; 3],
    pub logits: [f64; 3],
    ids: [usize; 3],
    mode: EmbedMode,
    active: [bool; 3],
    codes: [Vec<f64>; 3],
    projections: [Vec<f64>; 3],
    gate_input: Vec<f64>,
    gate_hidden: Vec<f64>,
}

impl MopLayer {
    pub fn new(params: &mut ParamSet, prefix: &str, books: &Codebooks, d_model: usize, rng: &mut Rng) -> Self {
        let n_codes = books.n_codes();
        let code_dim = books.code_dim();
        let codes = std::array::from_fn(|p| {
            let book = &books.parts[p];
            let mut t = tensor::Tensor::zeros(format!("{prefix}.codes.{p}"), &[n_codes, code_dim]);
            for (dst, &src) in t.data.iter_mut().zip(&book.codes) {
                *dst = src as f64;
            }
            params.add(t)
        });
        let proj = std::array::from_fn(|p| Linear::new(params, &format!("{prefix}.proj.{p}"), code_dim, d_model, rng));
        let gate_hidden = Linear::new(params, &format!("{prefix}.gate.hidden"), 3 * code_dim, 2 * code_dim, rng);
        let gate_out = Linear::zeroed(params, &format!("{prefix}.gate.out"), 2 * code_dim, 3);
        MopLayer { codes, proj, gate_hidden, gate_out, n_codes, code_dim, d_model }
    }

    pub fn forward(&self, params: &ParamSet, ids: [TokenId; 3], mode: EmbedMode) -> Result<MopForward> {
        let mut idx = [0usize; 3];
        for (slot, &id) in idx.iter_mut().zip(&ids) {
            if id as usize >= self.n_codes {
                return Err(Error::TokenOutOfRange { id, limit: self.n_codes as u32 });
            }
            *slot = id as usize;
        }
        let codes: [Vec<f64>; 3] = std::array::from_fn(|p| params.get(self.codes[p]).row(idx[p]).to_vec());
        let projections: [Vec<f64>; 3] = std::array::from_fn(|p| self.proj[p].forward(params, &codes[p]));

        let (gates, logits, active, gate_input, gate_hidden) = match mode {
            EmbedMode::Average => ([1.0 / 3.0; 3], [0.0; 3], [true; 3], Vec::new(), Vec::new()),
            EmbedMode::Dense | EmbedMode::Sparse(_) => {
                let gate_input: Vec<f64> = codes.concat();
                let hidden: Vec<f64> = self.gate_hidden.forward(params, &gate_input).into_iter().map(f64::tanh).collect();
                let z = self.gate_out.forward(params, &hidden);
                let logits = [z[0], z[1], z[2]];
                let keep = match mode {
                    EmbedMode::Sparse(k) if k < 3 => k.max(1),
                    _ => 3,
                };
                let mut order = [0usize, 1, 2];
                order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
                let mut active = [false; 3];
                for &o in order.iter().take(keep) {
                    active[o] = true;
                }
                let kept: Vec<f64> = (0..3).filter(|&p| active[p]).map(|p| logits[p]).collect();
                let sm = tensor::softmax(&kept);
                let mut gates = [0.0; 3];
                let mut it = sm.into_iter();
                for p in 0..3 {
                    if active[p] {
                        gates[p] = it.next().unwrap();
                    }
                }
                (gates, logits, active, gate_input, hidden)
            }
        };

        let mut embedding = vec![0.0; self.d_model];
        for p in 0..3 {
            if gates[p] != 0.0 {
                tensor::axpy(gates[p], &projections[p], &mut embedding);
            }
        }
        Ok(MopForward { embedding, gates, logits, ids: idx, mode, active, codes, projections, gate_input, gate_hidden })
    }

    /// Accumulate parameter gradients for `dL/dE = upstream`. Returns the
    /// gradient with respect to the pre-softmax gate logits.
    pub fn backward(&self, params: &ParamSet, grads: &mut ParamSet, fwd: &MopForward, upstream: &[f64]) -> [f64; 3] {
        let mut dcodes: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; self.code_dim]);
        for p in 0..3 {
            if fwd.gates[p] == 0.0 {
                continue;
            }
            let de: Vec<f64> = upstream.iter().map(|u| u * fwd.gates[p]).collect();
            let dc = self.proj[p].backward(params, grads, &fwd.codes[p], &de);
            tensor::axpy(1.0, &dc, &mut dcodes[p]);
        }

        let mut dlogits = [0.0; 3];
        if fwd.mode != EmbedMode::Average {
            let dg: [f64; 3] = std::array::from_fn(|p| tensor::dot(upstream, &fwd.projections[p]));
            let inner: f64 = (0..3).filter(|&p| fwd.active[p]).map(|p| fwd.gates[p] * dg[p]).sum();
            for p in 0..3 {
                if fwd.active[p] {
                    dlogits[p] = fwd.gates[p] * (dg[p] - inner);
                }
            }
            let dh = self.gate_out.backward(params, grads, &fwd.gate_hidden, &dlogits);
            let du: Vec<f64> = dh.iter().zip(&fwd.gate_hidden).map(|(d, h)| d * (1.0 - h * h)).collect();
            let dx = self.gate_hidden.backward(params, grads, &fwd.gate_input, &du);
            for p in 0..3 {
                tensor::axpy(1.0, &dx[p * self.code_dim..(p + 1) * self.code_dim], &mut dcodes[p]);
            }
        }

        for p in 0..3 {
            tensor::axpy(1.0, &dcodes[p], grads.get_mut(self.codes[p]).row_mut(fwd.ids[p]));
        }
        dlogits
    }
}

/// Gated embedding and its gate weights.
pub fn mop_embed(layer: &MopLayer, params: &ParamSet, ids: [TokenId; 3]) -> Result<(Vec<f64>, [f64; 3])> {
    let f = layer.forward(params, ids, EmbedMode::Dense)?;
    Ok((f.embedding, f.gates))
}

/// Mean of the three part projections.
pub fn avg_embed(layer: &MopLayer, params: &ParamSet, ids: [TokenId; 3]) -> Result<Vec<f64>> {
    Ok(layer.forward(params, ids, EmbedMode::Average)?.embedding)
}

/// Top-`k` gated embedding with renormalized surviving gates.
pub fn sparse_embed(layer: &MopLayer, params: &ParamSet, ids: [TokenId; 3], top_k: usize) -> Result<Vec<f64>> {
    if !(1..=3).contains(&top_k) {
        return Err(Error::InvalidArgument(format!("top_k = {top_k} must be 1, 2 or 3")));
    }
    Ok(layer.forward(params, ids, EmbedMode::Sparse(top_k))?.embedding)
}

/// Gradients of `upstream · E` for every parameter of the layer.
pub fn mop_backward(layer: &MopLayer, params: &ParamSet, fwd: &MopForward, upstream: &[f64]) -> (ParamSet, [f64; 3]) {
    let mut grads = params.zeros_like();
    let dl = layer.backward(params, &mut grads, fwd, upstream);
    (grads, dl)
}

/// Renormalize gates after keeping the `k` largest.
pub fn renormalize_top_k(gates: [f64; 3], k: usize) -> [f64; 3] {
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| gates[b].total_cmp(&gates[a]).then(a.cmp(&b)));
    let mut out = [0.0; 3];
    let total: f64 = order.iter().take(k).map(|&o| gates[o]).sum();
    for &o in order.iter().take(k) {
        out[o] = gates[o] / total;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Exec;
    use crate::rng;
    use crate::tokenizer::{fit_codebooks, gen_synthetic_pairs, CodebookConfig, MotionConfig};
    use rand::Rng as _;

    pub(crate) fn books() -> Codebooks {
        let data = gen_synthetic_pairs(40, 1, &MotionConfig { lexicon_size: 12, ..Default::default() }).unwrap();
        let motions: Vec<_> = data.into_iter().map(|p| p.motion).collect();
        fit_codebooks(&motions, &CodebookConfig { n_codes: 8, code_dim: 6, iters: 20, seed: 0 }, Exec::Sequential)
            .unwrap()
            .0
    }

    fn layer(seed: u64) -> (MopLayer, ParamSet) {
        let mut ps = ParamSet::new();
        let mut r = rng::stream(seed, 0);
        let l = MopLayer::new(&mut ps, "mop", &books(), 10, &mut r);
        (l, ps)
    }

    fn randomize_gate(l: &MopLayer, ps: &mut ParamSet, seed: u64) {
        let mut r = rng::stream(seed, 1);
        for id in [l.gate_out.w, l.gate_out.b] {
            for v in ps.get_mut(id).data.iter_mut() {
                *v = r.random_range(-1.0..1.0);
            }
        }
    }

    #[test]
    fn zero_gate_is_uniform_and_matches_average() {
        let (l, ps) = layer(0);
        let mut r = rng::stream(3, 0);
        for _ in 0..100 {
            let ids = [r.random_range(0..8), r.random_range(0..8), r.random_range(0..8)];
            let (e, g) = mop_embed(&l, &ps, ids).unwrap();
            assert_eq!(g, [1.0 / 3.0; 3]);
            let avg = avg_embed(&l, &ps, ids).unwrap();
            for (a, b) in e.iter().zip(&avg) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn gates_normalized_after_scaling_a_code() {
        let (l, mut ps) = layer(1);
        randomize_gate(&l, &mut ps, 2);
        let (_, g0) = mop_embed(&l, &ps, [1, 2, 3]).unwrap();
        ps.get_mut(l.codes[1]).row_mut(2).iter_mut().for_each(|x| *x *= 10.0);
        let (_, g1) = mop_embed(&l, &ps, [1, 2, 3]).unwrap();
        assert_ne!(g0, g1);
        assert!((g1.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(g1.iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn average_properties() {
        let (l, mut ps) = layer(2);
        // identical projections across parts
        let w = ps.get(l.proj[0].w).data.clone();
        let ids = [4, 4, 4];
        for p in 1..3 {
            ps.get_mut(l.proj[p].w).data = w.clone();
            let row = ps.get(l.codes[0]).row(4).to_vec();
            ps.get_mut(l.codes[p]).row_mut(4).copy_from_slice(&row);
        }
        let avg = avg_embed(&l, &ps, ids).unwrap();
        let single = l.proj[0].forward(&ps, ps.get(l.codes[0]).row(4));
        for (a, b) in avg.iter().zip(&single) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn average_is_order_free() {
        let (l, ps) = layer(5);
        // swap body and right: codes and projections exchanged with the ids
        let mut swapped = ps.clone();
        for (a, b) in [(l.codes[0], l.codes[2]), (l.proj[0].w, l.proj[2].w), (l.proj[0].b, l.proj[2].b)] {
            let ta = ps.get(a).data.clone();
            swapped.get_mut(a).data = ps.get(b).data.clone();
            swapped.get_mut(b).data = ta;
        }
        let x = avg_embed(&l, &ps, [1, 5, 7]).unwrap();
        let y = avg_embed(&l, &swapped, [7, 5, 1]).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_variants() {
        let (l, mut ps) = layer(3);
        randomize_gate(&l, &mut ps, 4);
        let ids = [0, 1, 2];
        let f = l.forward(&ps, ids, EmbedMode::Dense).unwrap();
        let top = tensor::argmax(&f.gates);
        let one = sparse_embed(&l, &ps, ids, 1).unwrap();
        let proj = &f.projections[top];
        for (a, b) in one.iter().zip(proj) {
            assert!((a - b).abs() < 1e-12);
        }
        let three = sparse_embed(&l, &ps, ids, 3).unwrap();
        for (a, b) in three.iter().zip(&f.embedding) {
            assert!((a - b).abs() < 1e-12);
        }
        let r = renormalize_top_k([0.5, 0.3, 0.2], 2);
        assert!((r[0] - 0.625).abs() < 1e-12 && (r[1] - 0.375).abs() < 1e-12 && r[2] == 0.0);
        // top-2 from the layer matches hand renormalization of its dense gates
        let two = l.forward(&ps, ids, EmbedMode::Sparse(2)).unwrap();
        let expect = renormalize_top_k(f.gates, 2);
        for p in 0..3 {
            assert!((two.gates[p] - expect[p]).abs() < 1e-12);
        }
        assert!(sparse_embed(&l, &ps, ids, 0).is_err());
        assert!(mop_embed(&l, &ps, [8, 0, 0]).is_err());
    }

    fn loss(l: &MopLayer, ps: &ParamSet, ids: [u32; 3], up: &[f64], mode: EmbedMode) -> f64 {
        tensor::dot(&l.forward(ps, ids, mode).unwrap().embedding, up)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for cfg in 0..50u64 {
            let (l, mut ps) = layer(cfg);
            randomize_gate(&l, &mut ps, cfg + 100);
            let mut r = rng::stream(cfg, 7);
            let ids = [r.random_range(0..8), r.random_range(0..8), r.random_range(0..8)];
            let up: Vec<f64> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
            let mode = [EmbedMode::Dense, EmbedMode::Average, EmbedMode::Sparse(2)][cfg as usize % 3];
            let fwd = l.forward(&ps, ids, mode).unwrap();
            let (grads, dlog) = mop_backward(&l, &ps, &fwd, &up);
            assert!(dlog.iter().sum::<f64>().abs() < 1e-12);
            for ti in 0..ps.len() {
                let id = tensor::TensorId(ti);
                for _ in 0..4 {
                    let j = r.random_range(0..ps.get(id).len());
                    let orig = ps.get(id).data[j];
                    ps.get_mut(id).data[j] = orig + eps;
                    let lp = loss(&l, &ps, ids, &up, mode);
                    ps.get_mut(id).data[j] = orig - eps;
                    let lm = loss(&l, &ps, ids, &up, mode);
                    ps.get_mut(id).data[j] = orig;
                    let num = (lp - lm) / (2.0 * eps);
                    let ana = grads.get(id).data[j];
                    let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (l, mut ps) = layer(9);
        randomize_gate(&l, &mut ps, 1);
        let fwd = l.forward(&ps, [1, 1, 1], EmbedMode::Dense).unwrap();
        let (g, dl) = mop_backward(&l, &ps, &fwd, &[0.0; 10]);
        assert!(g.is_zero());
        assert_eq!(dl, [0.0; 3]);
    }
}
