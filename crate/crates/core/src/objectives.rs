//! Token, latent and physical objectives and their combination.
//!
//! * token: `-(1/t) Σ_{i masked} log p(x_0^i)`, a sign index contributing
//!   the sum over its three part heads;
//! * latent: smooth-L1 between `MLP_p(h_i)` and the frozen codebook entry of
//!   the true id, averaged over elements and masked indices, summed over
//!   parts;
//! * physical: smooth-L1 between `D_p(MLP_p(h_i))` and the true 4-frame part
//!   window, through the frozen decoder, same reduction.
//!
//! Latent and physical terms skip indices whose truth is the eos marker.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TinyMdlm;
use crate::seq::{MaskState, Part, Position, Predictions, TokenId, TokenSequence, VocabSpec};
use crate::tensor::{self, ParamSet};
use crate::tokenizer::Codebooks;

pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Probabilities are floored here before taking logs.
const MIN_PROB: f64 = 1e-300;

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < SMOOTH_L1_BETA {
        0.5 * x * x / SMOOTH_L1_BETA
    } else {
        a - 0.5 * SMOOTH_L1_BETA
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < SMOOTH_L1_BETA {
        x / SMOOTH_L1_BETA
    } else {
        x.signum()
    }
}

/// Mean smooth-L1 over paired elements; 0 for empty input.
pub fn smooth_l1_mean(pred: &[f64], target: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(target).map(|(a, b)| smooth_l1(a - b)).sum::<f64>() / pred.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// Weights applied to the latent and physical terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub latent: f64,
    pub physical: f64,
}

impl LossWeights {
    pub fn pretrain() -> Self {
        LossWeights { latent: 1.0, physical: 1.0 }
    }

    pub fn token_only() -> Self {
        LossWeights { latent: 0.0, physical: 0.0 }
    }

    pub fn finetune(alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
        }
        Ok(LossWeights { latent: alpha, physical: alpha })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_tok: f64,
    pub l_lat: f64,
    pub l_phy: f64,
    pub l_total: f64,
    pub t: f64,
    pub masked_text: usize,
    pub masked_sign: usize,
}

impl LossReport {
    /// Element-wise mean (counts are summed).
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut out = LossReport::default();
        for r in reports {
            out.l_tok += r.l_tok / n;
            out.l_lat += r.l_lat / n;
            out.l_phy += r.l_phy / n;
            out.l_total += r.l_total / n;
            out.t += r.t / n;
            out.masked_text += r.masked_text;
            out.masked_sign += r.masked_sign;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        [self.l_tok, self.l_lat, self.l_phy, self.l_total].iter().all(|x| x.is_finite())
    }
}

fn truth_text(truth: &TokenSequence, vocab: &VocabSpec, i: usize) -> TokenId {
    truth.text.get(i).copied().unwrap_or(vocab.eos_id)
}

fn truth_sign(truth: &TokenSequence, vocab: &VocabSpec, j: usize) -> [TokenId; 3] {
    if j < truth.sign_len() {
        truth.sign_at(j)
    } else {
        [vocab.eos_id; 3]
    }
}

fn class_of(class: Option<usize>, tok: TokenId, limit: u32) -> Result<usize> {
    class.ok_or(Error::TokenOutOfRange { id: tok, limit })
}

/// Token objective over the predicted (masked) positions.
pub fn loss_tok(preds: &Predictions, truth: &TokenSequence, vocab: &VocabSpec, t: f64) -> Result<f64> {
    if preds.is_empty() {
        return Ok(0.0);
    }
    if !(t > 0.0) {
        return Err(Error::NoiseLevel(format!("token loss needs t > 0 with masked indices, got {t}")));
    }
    let mut sum = 0.0;
    for (&i, row) in &preds.text {
        let tok = truth_text(truth, vocab, i);
        let c = class_of(vocab.text_token_to_class(tok), tok, vocab.text_vocab)?;
        sum -= row[c].max(MIN_PROB).ln();
    }
    for (&j, rows) in &preds.sign {
        let toks = truth_sign(truth, vocab, j);
        for (row, &tok) in rows.iter().zip(&toks) {
            let c = class_of(vocab.sign_token_to_class(tok), tok, vocab.sign_vocab)?;
            sum -= row[c].max(MIN_PROB).ln();
        }
    }
    Ok(sum / t)
}

/// Latent objective given per-index, per-part latent predictions.
pub fn loss_lat_from(latents: &[[Vec<f64>; 3]], books: &Codebooks, truth_ids: &[[TokenId; 3]]) -> Result<f64> {
    if latents.len() != truth_ids.len() {
        return Err(Error::Data(format!("{} latents for {} targets", latents.len(), truth_ids.len())));
    }
    let mut total = 0.0;
    for p in Part::ALL {
        let book = books.part(p);
        let mut acc = 0.0;
        let mut count = 0usize;
        for (lat, ids) in latents.iter().zip(truth_ids) {
            let id = ids[p.index()] as usize;
            if id >= book.n_codes {
                return Err(Error::TokenOutOfRange { id: ids[p.index()], limit: book.n_codes as u32 });
            }
            let code = book.code(id);
            acc += lat[p.index()].iter().zip(&code).map(|(a, b)| smooth_l1(a - b)).sum::<f64>();
            count += code.len();
        }
        if count > 0 {
            total += acc / count as f64;
        }
    }
    Ok(total)
}

/// Physical objective: decode latents through the frozen decoders.
pub fn loss_phy_from(latents: &[[Vec<f64>; 3]], books: &Codebooks, windows: &[[Vec<f64>; 3]]) -> Result<f64> {
    if latents.len() != windows.len() {
        return Err(Error::Data(format!("{} latents for {} motion windows", latents.len(), windows.len())));
    }
    let mut total = 0.0;
    for p in Part::ALL {
        let book = books.part(p);
        let mut acc = 0.0;
        let mut count = 0usize;
        for (lat, win) in latents.iter().zip(windows) {
            let x = book.decode_latent(&lat[p.index()]);
            if x.len() != win[p.index()].len() {
                return Err(Error::Data("motion window width does not match the decoder".into()));
            }
            acc += x.iter().zip(&win[p.index()]).map(|(a, b)| smooth_l1(a - b)).sum::<f64>();
            count += x.len();
        }
        if count > 0 {
            total += acc / count as f64;
        }
    }
    Ok(total)
}

fn latents_of(model: &TinyMdlm, hidden: &[Vec<f64>]) -> Vec<[Vec<f64>; 3]> {
    hidden
        .iter()
        .map(|h| std::array::from_fn(|q| model.heads.latent[q].forward(&model.params, h).1))
        .collect()
}

/// Latent objective from hidden states at the scored indices.
pub fn loss_lat(model: &TinyMdlm, hidden: &[Vec<f64>], books: &Codebooks, truth_ids: &[[TokenId; 3]]) -> Result<f64> {
    loss_lat_from(&latents_of(model, hidden), books, truth_ids)
}

/// Physical objective from hidden states at the scored indices.
pub fn loss_phy(model: &TinyMdlm, hidden: &[Vec<f64>], books: &Codebooks, windows: &[[Vec<f64>; 3]]) -> Result<f64> {
    loss_phy_from(&latents_of(model, hidden), books, windows)
}

pub fn loss_combined(l_tok: f64, l_lat: f64, l_phy: f64, phase: Phase, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(match phase {
        Phase::Pretrain => l_tok + l_lat + l_phy,
        Phase::Finetune => l_tok + alpha * (l_lat + l_phy),
    })
}

/// Supervision for one sequence: the (possibly eos-padded) truth in the
/// state's layout, and the true part windows for each non-eos sign index.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub truth: &'a TokenSequence,
    pub windows: &'a [[Vec<f64>; 3]],
}

/// Loss of one masked sequence; accumulates exact gradients into `grads`
/// when given.
pub fn sequence_objective(
    model: &TinyMdlm,
    books: &Codebooks,
    state: &MaskState,
    target: Target<'_>,
    weights: LossWeights,
    grads: Option<&mut ParamSet>,
) -> Result<LossReport> {
    let vocab = model.vocab;
    let t = state.t();
    let fwd = model.forward(state)?;
    let d = model.config.d_model;
    let want_grad = grads.is_some();
    let mut scratch = ParamSet::new();
    let grads = match grads {
        Some(g) => g,
        None => &mut scratch,
    };
    let mut dfinal = vec![0.0; fwd.len() * d];
    let mut report = LossReport { t, ..Default::default() };
    let mut scored: Vec<(usize, [TokenId; 3], usize)> = Vec::new();
    let mut l_tok = 0.0;

    for (r, &pos) in fwd.positions.iter().enumerate() {
        if !state.is_masked(pos) {
            continue;
        }
        if !(t > 0.0) {
            return Err(Error::NoiseLevel(format!("token loss needs t > 0 with masked indices, got {t}")));
        }
        let h = fwd.final_hidden(r).to_vec();
        let mut dh = vec![0.0; d];
        match pos {
            Position::Text(i) => {
                report.masked_text += 1;
                let tok = truth_text(target.truth, &vocab, i);
                let c = class_of(vocab.text_token_to_class(tok), tok, vocab.text_vocab)?;
                let p = model.text_probs(&h);
                l_tok -= p[c].max(MIN_PROB).ln() / t;
                if want_grad {
                    let mut dl: Vec<f64> = p.iter().map(|x| x / t).collect();
                    dl[c] -= 1.0 / t;
                    dh = model.heads.text.backward(&model.params, grads, &h, &dl);
                }
            }
            Position::Sign(j) => {
                report.masked_sign += 1;
                let toks = truth_sign(target.truth, &vocab, j);
                for (q, &tok) in toks.iter().enumerate() {
                    let c = class_of(vocab.sign_token_to_class(tok), tok, vocab.sign_vocab)?;
                    let p = model.sign_probs(q, &h);
                    l_tok -= p[c].max(MIN_PROB).ln() / t;
                    if want_grad {
                        let mut dl: Vec<f64> = p.iter().map(|x| x / t).collect();
                        dl[c] -= 1.0 / t;
                        let dx = model.heads.sign[q].backward(&model.params, grads, &h, &dl);
                        tensor::axpy(1.0, &dx, &mut dh);
                    }
                }
                if !toks.contains(&vocab.eos_id) {
                    if j >= target.windows.len() {
                        return Err(Error::Data(format!("no motion window for sign index {j}")));
                    }
                    scored.push((r, toks, j));
                }
            }
        }
        tensor::axpy(1.0, &dh, &mut dfinal[r * d..(r + 1) * d]);
    }

    // latent and physical terms
    let n_s = scored.len();
    let mut l_lat = 0.0;
    let mut l_phy = 0.0;
    let latent_grad = want_grad && (weights.latent != 0.0 || weights.physical != 0.0);
    for p in Part::ALL {
        let q = p.index();
        let book = books.part(p);
        let head = &model.heads.latent[q];
        let dec_w = book.decoder_weight();
        let (dc, wd) = (book.code_dim, book.window_dim);
        for &(r, toks, j) in &scored {
            let h = fwd.final_hidden(r);
            let (a, y) = head.forward(&model.params, h);
            let code = book.code(toks[q] as usize);
            let x = book.decode_latent(&y);
            let win = &target.windows[j][q];
            if win.len() != wd {
                return Err(Error::Data("motion window width does not match the decoder".into()));
            }
            let lat_scale = 1.0 / (n_s * dc) as f64;
            let phy_scale = 1.0 / (n_s * wd) as f64;
            l_lat += y.iter().zip(&code).map(|(u, v)| smooth_l1(u - v)).sum::<f64>() * lat_scale;
            l_phy += x.iter().zip(win).map(|(u, v)| smooth_l1(u - v)).sum::<f64>() * phy_scale;
            if latent_grad {
                let mut dy: Vec<f64> =
                    y.iter().zip(&code).map(|(u, v)| weights.latent * lat_scale * smooth_l1_grad(u - v)).collect();
                let dx: Vec<f64> =
                    x.iter().zip(win).map(|(u, v)| weights.physical * phy_scale * smooth_l1_grad(u - v)).collect();
                tensor::matvec_t_acc(&dec_w, wd, dc, &dx, &mut dy);
                let dh = head.backward(&model.params, grads, h, &a, &dy);
                tensor::axpy(1.0, &dh, &mut dfinal[r * d..(r + 1) * d]);
            }
        }
    }

    if want_grad {
        model.backward(&fwd, dfinal, grads);
    }
    report.l_tok = l_tok;
    report.l_lat = l_lat;
    report.l_phy = l_phy;
    report.l_total = l_tok + weights.latent * l_lat + weights.physical * l_phy;
    Ok(report)
}
