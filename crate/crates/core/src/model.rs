//! The mask predictor: a small bidirectional sequence model with manual
//! gradients, and its causal twin used as the autoregressive baseline.
//!
//! Each position starts from a token embedding (text table, mixture-of-parts
//! for sign triples, or the dedicated eos/mask rows) plus a learned position
//! embedding for its segment. A block computes
//!
//! ```text
//! c_i = Σ_j a_ij h_j,     a_i = softmax_j(q_i · k_j / sqrt(d_k))
//! h_i ← h_i + tanh(W_s h_i + W_c c_i + b)
//! ```
//!
//! where `j` ranges over every position (bidirectional) or over `j ≤ i`
//! (causal). The query projection starts at zero, so an untrained block
//! pools the plain mean (bidirectional) or prefix mean (causal) context.
//! Output heads: one text head and three part heads, each with an extra
//! eos class. Three per-part latent MLPs map hidden states into code space
//! for the latent and physical objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mop::{EmbedMode, MopForward, MopLayer};
use crate::rng::{self, streams};
use crate::seq::{MaskState, Position, Predictions, Slot, VocabSpec};
use crate::tensor::{self, Linear, ParamSet, TensorId};
use crate::tokenizer::Codebooks;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub attn_dim: usize,
    pub causal: bool,
    /// Learn the pooling weights; when false the query stays at zero and
    /// every block pools the plain (prefix) mean.
    pub attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { d_model: 64, blocks: 2, max_len: 128, attn_dim: 16, causal: false, attention: true }
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wc: TensorId,
    pub local: Linear,
}

#[derive(Debug, Clone)]
pub struct LatentHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl LatentHead {
    /// Returns `(tanh hidden, output)`.
    pub fn forward(&self, params: &ParamSet, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let a: Vec<f64> = self.hidden.forward(params, h).into_iter().map(f64::tanh).collect();
        let y = self.out.forward(params, &a);
        (a, y)
    }

    pub fn backward(&self, params: &ParamSet, grads: &mut ParamSet, h: &[f64], a: &[f64], dy: &[f64]) -> Vec<f64> {
        let da = self.out.backward(params, grads, a, dy);
        let du: Vec<f64> = da.iter().zip(a).map(|(d, x)| d * (1.0 - x * x)).collect();
        self.hidden.backward(params, grads, h, &du)
    }
}

#[derive(Debug, Clone)]
pub struct Heads {
    pub text: Linear,
    pub sign: [Linear; 3],
    pub latent: [LatentHead; 3],
}

/// Bidirectional mask predictor (or causal baseline when `config.causal`).
#[derive(Debug, Clone)]
pub struct TinyMdlm {
    pub config: ModelConfig,
    pub vocab: VocabSpec,
    pub code_dim: usize,
    pub params: ParamSet,
    pub embed_mode: EmbedMode,
    text_emb: TensorId,
    sign_special: TensorId,
    text_pos: TensorId,
    sign_pos: TensorId,
    pub mop: MopLayer,
    pub blocks: Vec<Block>,
    pub heads: Heads,
}

/// Autoregressive baseline: the same stack with causal pooling.
pub type ArBaseline = TinyMdlm;

#[derive(Debug, Clone)]
enum Input {
    TextRow(usize),
    SignSpecial(usize),
    Mop(Box<MopForward>),
}

#[derive(Debug, Clone)]
struct BlockCache {
    q: Vec<f64>,
    k: Vec<f64>,
    attn: Vec<f64>,
    ctx: Vec<f64>,
    z: Vec<f64>,
}

/// Activations of one forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct Forward {
    pub positions: Vec<Position>,
    text_len: usize,
    inputs: Vec<Input>,
    hidden: Vec<Vec<f64>>,
    caches: Vec<BlockCache>,
    d: usize,
}

impl Forward {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn row_of(&self, pos: Position) -> usize {
        match pos {
            Position::Text(i) => i,
            Position::Sign(j) => self.text_len + 1 + j,
        }
    }

    /// Final hidden state at layout row `r`.
    pub fn final_hidden(&self, r: usize) -> &[f64] {
        let last = self.hidden.last().unwrap();
        &last[r * self.d..(r + 1) * self.d]
    }
}

const EOS_ROW: usize = 0;
const MASK_ROW: usize = 1;

impl TinyMdlm {
    pub fn new(config: ModelConfig, vocab: VocabSpec, books: &Codebooks, seed: u64) -> Result<Self> {
        if config.d_model == 0 || config.max_len == 0 || config.attn_dim == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if books.n_codes() != vocab.sign_vocab as usize {
            return Err(Error::Config(format!(
                "codebook size {} does not match sign vocabulary {}",
                books.n_codes(),
                vocab.sign_vocab
            )));
        }
        let d = config.d_model;
        let mut rng = rng::stream(seed, streams::INIT);
        let mut p = ParamSet::new();
        let text_emb = p.add_uniform("embed.text", &[vocab.text_classes() + 1, d], d, &mut rng);
        let sign_special = p.add_uniform("embed.sign_special", &[2, d], d, &mut rng);
        let text_pos = p.add_uniform("embed.text_pos", &[config.max_len, d], d, &mut rng);
        let sign_pos = p.add_uniform("embed.sign_pos", &[config.max_len, d], d, &mut rng);
        let mop = MopLayer::new(&mut p, "mop", books, d, &mut rng);
        let blocks = (0..config.blocks)
            .map(|b| Block {
                wq: p.add_zeros(format!("block.{b}.query"), &[config.attn_dim, d]),
                wk: p.add_uniform(format!("block.{b}.key"), &[config.attn_dim, d], d, &mut rng),
                wc: p.add_uniform(format!("block.{b}.context"), &[d, d], d, &mut rng),
                local: Linear::new(&mut p, &format!("block.{b}.local"), d, d, &mut rng),
            })
            .collect();
        let text = Linear::new(&mut p, "head.text", d, vocab.text_classes(), &mut rng);
        let sign = std::array::from_fn(|q| Linear::new(&mut p, &format!("head.sign.{q}"), d, vocab.sign_classes(), &mut rng));
        let latent = std::array::from_fn(|q| LatentHead {
            hidden: Linear::new(&mut p, &format!("latent.{q}.hidden"), d, d, &mut rng),
            out: Linear::new(&mut p, &format!("latent.{q}.out"), d, books.code_dim(), &mut rng),
        });
        Ok(TinyMdlm {
            config,
            vocab,
            code_dim: books.code_dim(),
            params: p,
            embed_mode: EmbedMode::Dense,
            text_emb,
            sign_special,
            text_pos,
            sign_pos,
            mop,
            blocks,
            heads: Heads { text, sign, latent },
        })
    }

    /// Replace the parameters with a same-layout set (e.g. from a checkpoint).
    pub fn load_params(&mut self, params: ParamSet) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::Config("checkpoint tensors do not match the model configuration".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn check_capacity(&self, state: &MaskState) -> Result<()> {
        let need = (state.text_len() + 1).max(state.sign_len() + 1);
        if need > self.config.max_len {
            return Err(Error::TooLong { len: need, max: self.config.max_len });
        }
        Ok(())
    }

    fn embed(&self, state: &MaskState, pos: Position) -> Result<(Input, Vec<f64>)> {
        let p = &self.params;
        let v = &self.vocab;
        let (input, mut e) = match state.slot(pos) {
            Slot::Text(tok) => {
                let row = if tok == v.mask_id {
                    v.text_classes()
                } else {
                    v.text_token_to_class(tok).ok_or(Error::TokenOutOfRange { id: tok, limit: v.text_vocab })?
                };
                (Input::TextRow(row), p.get(self.text_emb).row(row).to_vec())
            }
            Slot::Sign(toks) => {
                if toks[0] == v.mask_id {
                    (Input::SignSpecial(MASK_ROW), p.get(self.sign_special).row(MASK_ROW).to_vec())
                } else if toks.contains(&v.eos_id) {
                    (Input::SignSpecial(EOS_ROW), p.get(self.sign_special).row(EOS_ROW).to_vec())
                } else {
                    let f = self.mop.forward(p, toks, self.embed_mode)?;
                    let e = f.embedding.clone();
                    (Input::Mop(Box::new(f)), e)
                }
            }
        };
        let pe = match pos {
            Position::Text(i) => p.get(self.text_pos).row(i),
            Position::Sign(j) => p.get(self.sign_pos).row(j),
        };
        tensor::axpy(1.0, pe, &mut e);
        Ok((input, e))
    }

    pub fn forward(&self, state: &MaskState) -> Result<Forward> {
        if state.vocab() != &self.vocab {
            return Err(Error::Layout("state vocabulary differs from the model's".into()));
        }
        self.check_capacity(state)?;
        let d = self.config.d_model;
        let dk = self.config.attn_dim;
        let positions: Vec<Position> = state.positions().collect();
        let n = positions.len();
        let mut inputs = Vec::with_capacity(n);
        let mut h = Vec::with_capacity(n * d);
        for &pos in &positions {
            let (inp, e) = self.embed(state, pos)?;
            inputs.push(inp);
            h.extend(e);
        }
        let mut hidden = vec![h];
        let mut caches = Vec::with_capacity(self.blocks.len());
        let scale = 1.0 / (dk as f64).sqrt();
        for blk in &self.blocks {
            let h = hidden.last().unwrap();
            let wq = &self.params.get(blk.wq).data;
            let wk = &self.params.get(blk.wk).data;
            let wc = &self.params.get(blk.wc).data;
            let mut q = vec![0.0; n * dk];
            let mut k = vec![0.0; n * dk];
            for i in 0..n {
                let hi = &h[i * d..(i + 1) * d];
                tensor::matvec_acc(wq, dk, d, hi, &mut q[i * dk..(i + 1) * dk]);
                tensor::matvec_acc(wk, dk, d, hi, &mut k[i * dk..(i + 1) * dk]);
            }
            let mut attn = vec![0.0; n * n];
            let mut ctx = vec![0.0; n * d];
            let mut z = vec![0.0; n * d];
            let mut next = h.clone();
            for i in 0..n {
                let span = if self.config.causal { i + 1 } else { n };
                let qi = &q[i * dk..(i + 1) * dk];
                let scores: Vec<f64> = (0..span).map(|j| scale * tensor::dot(qi, &k[j * dk..(j + 1) * dk])).collect();
                let a = tensor::softmax(&scores);
                let ci = &mut ctx[i * d..(i + 1) * d];
                for (j, &aij) in a.iter().enumerate() {
                    tensor::axpy(aij, &h[j * d..(j + 1) * d], ci);
                }
                attn[i * n..i * n + span].copy_from_slice(&a);
                let mut u = blk.local.forward(&self.params, &h[i * d..(i + 1) * d]);
                tensor::matvec_acc(wc, d, d, ci, &mut u);
                for c in 0..d {
                    let zc = u[c].tanh();
                    z[i * d + c] = zc;
                    next[i * d + c] += zc;
                }
            }
            caches.push(BlockCache { q, k, attn, ctx, z });
            hidden.push(next);
        }
        Ok(Forward { positions, text_len: state.text_len(), inputs, hidden, caches, d })
    }

    pub fn text_probs(&self, h: &[f64]) -> Vec<f64> {
        tensor::softmax(&self.heads.text.forward(&self.params, h))
    }

    pub fn sign_probs(&self, part: usize, h: &[f64]) -> Vec<f64> {
        tensor::softmax(&self.heads.sign[part].forward(&self.params, h))
    }

    /// Categoricals for every masked position of `state`.
    pub fn predict(&self, state: &MaskState) -> Result<Predictions> {
        let fwd = self.forward(state)?;
        let mut out = Predictions::default();
        for (r, &pos) in fwd.positions.iter().enumerate() {
            if !state.is_masked(pos) {
                continue;
            }
            let h = fwd.final_hidden(r);
            match pos {
                Position::Text(i) => {
                    out.text.insert(i, self.text_probs(h));
                }
                Position::Sign(j) => {
                    out.sign.insert(j, std::array::from_fn(|q| self.sign_probs(q, h)));
                }
            }
        }
        Ok(out)
    }

    /// Back-propagate `dL/dh_final` (row-major `[len, d_model]`) into `grads`.
    pub fn backward(&self, fwd: &Forward, dfinal: Vec<f64>, grads: &mut ParamSet) {
        let d = self.config.d_model;
        let dk = self.config.attn_dim;
        let n = fwd.len();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut dh = dfinal;
        for (b, blk) in self.blocks.iter().enumerate().rev() {
            let h = &fwd.hidden[b];
            let c = &fwd.caches[b];
            let wq = self.params.get(blk.wq).data.clone();
            let wk = self.params.get(blk.wk).data.clone();
            let wc = self.params.get(blk.wc).data.clone();
            // residual path carries dh through unchanged
            let mut dprev = dh.clone();
            let mut dctx = vec![0.0; n * d];
            for i in 0..n {
                let du: Vec<f64> = (0..d).map(|cc| dh[i * d + cc] * (1.0 - c.z[i * d + cc].powi(2))).collect();
                let dx = blk.local.backward(&self.params, grads, &h[i * d..(i + 1) * d], &du);
                tensor::axpy(1.0, &dx, &mut dprev[i * d..(i + 1) * d]);
                tensor::outer_acc(&mut grads.get_mut(blk.wc).data, &du, &c.ctx[i * d..(i + 1) * d]);
                tensor::matvec_t_acc(&wc, d, d, &du, &mut dctx[i * d..(i + 1) * d]);
            }
            let mut dq = vec![0.0; n * dk];
            let mut dkey = vec![0.0; n * dk];
            for i in 0..n {
                let span = if self.config.causal { i + 1 } else { n };
                let a = &c.attn[i * n..i * n + span];
                let dci = &dctx[i * d..(i + 1) * d];
                let da: Vec<f64> = (0..span).map(|j| tensor::dot(dci, &h[j * d..(j + 1) * d])).collect();
                for (j, &aij) in a.iter().enumerate() {
                    tensor::axpy(aij, dci, &mut dprev[j * d..(j + 1) * d]);
                }
                let ds = tensor::softmax_backward(a, &da);
                let qi = &c.q[i * dk..(i + 1) * dk];
                for (j, &dsij) in ds.iter().enumerate() {
                    if dsij == 0.0 {
                        continue;
                    }
                    let g = dsij * scale;
                    tensor::axpy(g, &c.k[j * dk..(j + 1) * dk], &mut dq[i * dk..(i + 1) * dk]);
                    tensor::axpy(g, qi, &mut dkey[j * dk..(j + 1) * dk]);
                }
            }
            for i in 0..n {
                let hi = &h[i * d..(i + 1) * d];
                let dqi = &dq[i * dk..(i + 1) * dk];
                let dki = &dkey[i * dk..(i + 1) * dk];
                if self.config.attention {
                    tensor::outer_acc(&mut grads.get_mut(blk.wq).data, dqi, hi);
                }
                tensor::outer_acc(&mut grads.get_mut(blk.wk).data, dki, hi);
                let di = &mut dprev[i * d..(i + 1) * d];
                tensor::matvec_t_acc(&wq, dk, d, dqi, di);
                tensor::matvec_t_acc(&wk, dk, d, dki, di);
            }
            dh = dprev;
        }

        for (r, (&pos, inp)) in fwd.positions.iter().zip(&fwd.inputs).enumerate() {
            let de = &dh[r * d..(r + 1) * d];
            match pos {
                Position::Text(i) => tensor::axpy(1.0, de, grads.get_mut(self.text_pos).row_mut(i)),
                Position::Sign(j) => tensor::axpy(1.0, de, grads.get_mut(self.sign_pos).row_mut(j)),
            }
            match inp {
                Input::TextRow(row) => tensor::axpy(1.0, de, grads.get_mut(self.text_emb).row_mut(*row)),
                Input::SignSpecial(row) => tensor::axpy(1.0, de, grads.get_mut(self.sign_special).row_mut(*row)),
                Input::Mop(f) => {
                    self.mop.backward(&self.params, grads, f, de);
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::exec::Exec;
    use crate::seq::{forward_mask, MaskMode, TokenSequence};
    use crate::tokenizer::{fit_codebooks, gen_synthetic_pairs, CodebookConfig, MotionConfig};
    use rand::Rng as _;

    pub(crate) fn tiny_books() -> Codebooks {
        let data = gen_synthetic_pairs(30, 2, &MotionConfig { lexicon_size: 10, ..Default::default() }).unwrap();
        let motions: Vec<_> = data.into_iter().map(|p| p.motion).collect();
        fit_codebooks(&motions, &CodebookConfig { n_codes: 6, code_dim: 4, iters: 10, seed: 0 }, Exec::Sequential)
            .unwrap()
            .0
    }

    pub(crate) fn tiny_model(causal: bool, seed: u64) -> TinyMdlm {
        let cfg = ModelConfig { d_model: 12, blocks: 2, max_len: 16, attn_dim: 4, causal, attention: true };
        TinyMdlm::new(cfg, VocabSpec::new(10, 6).unwrap(), &tiny_books(), seed).unwrap()
    }

    fn random_seq(seed: u64, l_e: usize, l_s: usize) -> TokenSequence {
        let mut r = rng::stream(seed, 5);
        TokenSequence::new(
            (0..l_e).map(|_| r.random_range(0..10)).collect(),
            std::array::from_fn(|_| (0..l_s).map(|_| r.random_range(0..6)).collect()),
        )
        .unwrap()
    }

    #[test]
    fn predictions_are_normalized() {
        let m = tiny_model(false, 0);
        let s = random_seq(1, 3, 6);
        let st = forward_mask(&s, 0.6, MaskMode::Pretrain, m.vocab, 2).unwrap();
        let p = m.predict(&st).unwrap();
        assert_eq!(p.len(), st.num_masked());
        for row in p.text.values().chain(p.sign.values().flat_map(|r| r.iter())) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    fn witness(causal: bool, seed: u64) -> bool {
        // mask sign index 1, vary visible sign index 3, compare predictions at 1
        let m = tiny_model(causal, seed);
        let a = random_seq(seed, 2, 5);
        let mut b = a.clone();
        for part in &mut b.sign {
            part[3] = (part[3] + 1) % 6;
        }
        let pa = crate::seq::MaskState::with_visible_signs(&a, &[0, 2, 3, 4], 0.2, m.vocab).unwrap();
        let pb = crate::seq::MaskState::with_visible_signs(&b, &[0, 2, 3, 4], 0.2, m.vocab).unwrap();
        m.predict(&pa).unwrap().sign[&1] != m.predict(&pb).unwrap().sign[&1]
    }

    #[test]
    fn bidirectional_and_causal_witnesses() {
        for seed in 0..20 {
            assert!(witness(false, seed), "bidirectional model ignored a later token (seed {seed})");
            assert!(!witness(true, seed), "causal model saw a later token (seed {seed})");
        }
    }

    #[test]
    fn rejects_overlong_sequences() {
        let m = tiny_model(false, 0);
        let s = random_seq(0, 2, 20);
        let st = forward_mask(&s, 0.5, MaskMode::Finetune, m.vocab, 0).unwrap();
        assert!(matches!(m.predict(&st), Err(Error::TooLong { .. })));
    }
}
