//! Sequence layout and the discrete masking process.
//!
//! A training example is laid out as `text, eos, sign_0 .. sign_{L-1}, eos`,
//! where each sign index carries a triple of part tokens (body, left hand,
//! right hand). The three part tokens at an index share a single mask flag.
//!
//! The forward process masks each maskable index independently with
//! probability `t`. The reverse step from `t` to `s < t` keeps every
//! unmasked token, leaves a masked index masked with probability `s / t`,
//! and otherwise fills it by sampling the supplied per-index distribution.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};

pub type TokenId = u32;

const NORMALIZATION_TOL: f64 = 1e-6;

/// Token id spaces. Text ids are `0..text_vocab`, sign ids `0..sign_vocab`
/// per part; `eos_id` and `mask_id` sit above both ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub text_vocab: u32,
    pub sign_vocab: u32,
    pub eos_id: TokenId,
    pub mask_id: TokenId,
}

impl VocabSpec {
    pub fn new(text_vocab: u32, sign_vocab: u32) -> Result<Self> {
        let eos_id = text_vocab.max(sign_vocab);
        Self::with_ids(text_vocab, sign_vocab, eos_id, eos_id + 1)
    }

    pub fn with_ids(text_vocab: u32, sign_vocab: u32, eos_id: TokenId, mask_id: TokenId) -> Result<Self> {
        if text_vocab == 0 {
            return Err(Error::InvalidArgument("text vocabulary must be nonempty".into()));
        }
        if sign_vocab < 2 {
            return Err(Error::InvalidArgument("sign vocabulary needs at least 2 codes".into()));
        }
        let top = text_vocab.max(sign_vocab);
        if eos_id == mask_id || eos_id < top || mask_id < top {
            return Err(Error::InvalidArgument(format!(
                "eos ({eos_id}) and mask ({mask_id}) must be distinct and >= {top}"
            )));
        }
        Ok(VocabSpec { text_vocab, sign_vocab, eos_id, mask_id })
    }

    /// Output classes of the text head: the text vocabulary plus eos.
    pub fn text_classes(&self) -> usize {
        self.text_vocab as usize + 1
    }

    /// Output classes of each sign head: the codebook plus eos.
    pub fn sign_classes(&self) -> usize {
        self.sign_vocab as usize + 1
    }

    pub fn text_class_to_token(&self, class: usize) -> TokenId {
        if class == self.text_vocab as usize {
            self.eos_id
        } else {
            class as TokenId
        }
    }

    pub fn sign_class_to_token(&self, class: usize) -> TokenId {
        if class == self.sign_vocab as usize {
            self.eos_id
        } else {
            class as TokenId
        }
    }

    pub fn text_token_to_class(&self, tok: TokenId) -> Option<usize> {
        if tok == self.eos_id {
            Some(self.text_vocab as usize)
        } else if tok < self.text_vocab {
            Some(tok as usize)
        } else {
            None
        }
    }

    pub fn sign_token_to_class(&self, tok: TokenId) -> Option<usize> {
        if tok == self.eos_id {
            Some(self.sign_vocab as usize)
        } else if tok < self.sign_vocab {
            Some(tok as usize)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Part {
    Body,
    Left,
    Right,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Body, Part::Left, Part::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> u8 {
        match self {
            Part::Body => b'b',
            Part::Left => b'l',
            Part::Right => b'r',
        }
    }

    pub fn from_tag(tag: u8) -> Option<Part> {
        match tag {
            b'b' => Some(Part::Body),
            b'l' => Some(Part::Left),
            b'r' => Some(Part::Right),
            _ => None,
        }
    }
}

/// Text tokens plus three aligned part-wise sign token streams.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub text: Vec<TokenId>,
    pub sign: [Vec<TokenId>; 3],
}

/// One position of the flattened layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Text(TokenId),
    Sign([TokenId; 3]),
}

/// Index into the layout. `Text(text_len)` is the separator eos and
/// `Sign(sign_len)` the closing eos.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Position {
    Text(usize),
    Sign(usize),
}

impl TokenSequence {
    pub fn new(text: Vec<TokenId>, sign: [Vec<TokenId>; 3]) -> Result<Self> {
        let n = sign[0].len();
        if sign[1].len() != n || sign[2].len() != n {
            return Err(Error::Layout(format!(
                "part lengths differ: {} / {} / {}",
                sign[0].len(),
                sign[1].len(),
                sign[2].len()
            )));
        }
        Ok(TokenSequence { text, sign })
    }

    pub fn text_len(&self) -> usize {
        self.text.len()
    }

    pub fn sign_len(&self) -> usize {
        self.sign[0].len()
    }

    /// `L_e + L_s + 2`
    pub fn layout_len(&self) -> usize {
        self.text_len() + self.sign_len() + 2
    }

    pub fn sign_at(&self, i: usize) -> [TokenId; 3] {
        [self.sign[0][i], self.sign[1][i], self.sign[2][i]]
    }

    /// `cat(text, eos, sign, eos)`
    pub fn flatten(&self, vocab: &VocabSpec) -> Vec<Slot> {
        let mut out = Vec::with_capacity(self.layout_len());
        out.extend(self.text.iter().map(|&t| Slot::Text(t)));
        out.push(Slot::Text(vocab.eos_id));
        out.extend((0..self.sign_len()).map(|i| Slot::Sign(self.sign_at(i))));
        out.push(Slot::Sign([vocab.eos_id; 3]));
        out
    }

    /// Check every id is in range (eos allowed in the sign span).
    pub fn validate(&self, vocab: &VocabSpec) -> Result<()> {
        for &t in &self.text {
            if t >= vocab.text_vocab {
                return Err(Error::TokenOutOfRange { id: t, limit: vocab.text_vocab });
            }
        }
        for part in &self.sign {
            for &t in part {
                if vocab.sign_token_to_class(t).is_none() {
                    return Err(Error::TokenOutOfRange { id: t, limit: vocab.sign_vocab });
                }
            }
        }
        Ok(())
    }

    /// Pad the sign span with eos up to `span` indices.
    pub fn padded(&self, span: usize, vocab: &VocabSpec) -> Result<TokenSequence> {
        if self.sign_len() > span {
            return Err(Error::Layout(format!(
                "sign length {} exceeds span {span}",
                self.sign_len()
            )));
        }
        let mut out = self.clone();
        for part in &mut out.sign {
            part.resize(span, vocab.eos_id);
        }
        Ok(out)
    }

    /// Drop the sign span from the first index at which any part is eos.
    pub fn truncated_at_eos(&self, vocab: &VocabSpec) -> TokenSequence {
        let cut = (0..self.sign_len())
            .find(|&i| self.sign_at(i).contains(&vocab.eos_id))
            .unwrap_or(self.sign_len());
        TokenSequence {
            text: self.text.clone(),
            sign: [
                self.sign[0][..cut].to_vec(),
                self.sign[1][..cut].to_vec(),
                self.sign[2][..cut].to_vec(),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    /// Text and sign indices (including both eos markers) are maskable.
    Pretrain,
    /// Only sign indices `0..L_s` are maskable; text is always visible.
    Finetune,
}

/// A partially masked sequence `x_t`.
///
/// Masked indices hold `mask_id` in every slot; the underlying truth is not
/// retained, so a state can be handed to a predictor without leaking it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    seq: TokenSequence,
    text_masked: Vec<bool>,
    sign_masked: Vec<bool>,
    t: f64,
    vocab: VocabSpec,
}

/// Per-index categoricals over head classes (see [`VocabSpec::sign_classes`]).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    pub text: BTreeMap<usize, Vec<f64>>,
    pub sign: BTreeMap<usize, [Vec<f64>; 3]>,
}

impl Predictions {
    pub fn is_empty(&self) -> bool {
        self.text.is_empty() && self.sign.is_empty()
    }

    pub fn len(&self) -> usize {
        self.text.len() + self.sign.len()
    }
}

fn check_noise(name: &str, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(Error::NoiseLevel(format!("{name} = {t} outside [0, 1]")));
    }
    Ok(())
}

fn check_row(row: &[f64]) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL || row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}

/// Inverse-CDF draw from a normalized categorical.
pub fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack above the last cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

impl MaskState {
    /// Everything visible at noise level 0.
    pub fn clean(seq: TokenSequence, vocab: VocabSpec) -> Self {
        MaskState {
            text_masked: vec![false; seq.text_len() + 1],
            sign_masked: vec![false; seq.sign_len() + 1],
            seq,
            t: 0.0,
            vocab,
        }
    }

    /// Generation start: visible text, a fully masked sign span of `span`
    /// indices, closing eos visible, `t = 1`.
    pub fn all_masked(text: Vec<TokenId>, span: usize, vocab: VocabSpec) -> Self {
        let seq = TokenSequence { text, sign: [vec![vocab.mask_id; span], vec![vocab.mask_id; span], vec![vocab.mask_id; span]] };
        let mut sign_masked = vec![true; span + 1];
        sign_masked[span] = false;
        MaskState { text_masked: vec![false; seq.text_len() + 1], sign_masked, seq, t: 1.0, vocab }
    }

    /// Fine-tuning state in which exactly the sign indices in `visible` are
    /// unmasked. Used for checkpoint-filtered training states.
    pub fn with_visible_signs(seq: &TokenSequence, visible: &[usize], t: f64, vocab: VocabSpec) -> Result<Self> {
        check_noise("t", t)?;
        let mut state = MaskState::clean(seq.clone(), vocab);
        state.t = t;
        let mut keep = vec![false; seq.sign_len()];
        for &i in visible {
            if i >= seq.sign_len() {
                return Err(Error::Layout(format!("visible index {i} outside span {}", seq.sign_len())));
            }
            keep[i] = true;
        }
        for (i, k) in keep.into_iter().enumerate() {
            if !k {
                state.mask_position(Position::Sign(i));
            }
        }
        Ok(state)
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }

    /// The sequence with `mask_id` at masked indices.
    pub fn tokens(&self) -> &TokenSequence {
        &self.seq
    }

    pub fn text_len(&self) -> usize {
        self.seq.text_len()
    }

    pub fn sign_len(&self) -> usize {
        self.seq.sign_len()
    }

    pub fn is_masked(&self, pos: Position) -> bool {
        match pos {
            Position::Text(i) => self.text_masked[i],
            Position::Sign(i) => self.sign_masked[i],
        }
    }

    pub fn slot(&self, pos: Position) -> Slot {
        let m = self.vocab.mask_id;
        let e = self.vocab.eos_id;
        match pos {
            Position::Text(i) if self.text_masked[i] => Slot::Text(m),
            Position::Text(i) if i == self.seq.text_len() => Slot::Text(e),
            Position::Text(i) => Slot::Text(self.seq.text[i]),
            Position::Sign(i) if self.sign_masked[i] => Slot::Sign([m; 3]),
            Position::Sign(i) if i == self.seq.sign_len() => Slot::Sign([e; 3]),
            Position::Sign(i) => Slot::Sign(self.seq.sign_at(i)),
        }
    }

    /// Layout positions in order.
    pub fn positions(&self) -> impl Iterator<Item = Position> + '_ {
        (0..=self.seq.text_len())
            .map(Position::Text)
            .chain((0..=self.seq.sign_len()).map(Position::Sign))
    }

    pub fn masked_positions(&self) -> Vec<Position> {
        self.positions().filter(|&p| self.is_masked(p)).collect()
    }

    pub fn masked_sign_indices(&self) -> Vec<usize> {
        (0..=self.seq.sign_len()).filter(|&i| self.sign_masked[i]).collect()
    }

    pub fn num_masked(&self) -> usize {
        self.text_masked.iter().chain(&self.sign_masked).filter(|&&m| m).count()
    }

    pub fn any_text_masked(&self) -> bool {
        self.text_masked.iter().any(|&m| m)
    }

    fn maskable(&self, pos: Position, mode: MaskMode) -> bool {
        match (mode, pos) {
            (MaskMode::Pretrain, _) => true,
            (MaskMode::Finetune, Position::Sign(i)) => i < self.seq.sign_len(),
            (MaskMode::Finetune, Position::Text(_)) => false,
        }
    }

    fn mask_position(&mut self, pos: Position) {
        let m = self.vocab.mask_id;
        match pos {
            Position::Text(i) => {
                self.text_masked[i] = true;
                if i < self.seq.text.len() {
                    self.seq.text[i] = m;
                }
            }
            Position::Sign(i) => {
                self.sign_masked[i] = true;
                if i < self.seq.sign_len() {
                    for part in &mut self.seq.sign {
                        part[i] = m;
                    }
                }
            }
        }
    }

    fn fill_position(&mut self, pos: Position, slot: Slot) {
        match (pos, slot) {
            (Position::Text(i), Slot::Text(tok)) => {
                self.text_masked[i] = false;
                if i < self.seq.text.len() {
                    self.seq.text[i] = tok;
                }
            }
            (Position::Sign(i), Slot::Sign(toks)) => {
                self.sign_masked[i] = false;
                if i < self.seq.sign_len() {
                    for (part, tok) in self.seq.sign.iter_mut().zip(toks) {
                        part[i] = tok;
                    }
                }
            }
            _ => unreachable!("slot kind does not match position"),
        }
    }

    /// Raise the noise level from `self.t` to `t_new`: each visible maskable
    /// index is masked with probability `(t_new - t) / (1 - t)`, so that the
    /// marginal masking probability becomes `t_new`.
    pub fn remask(&self, t_new: f64, mode: MaskMode, seed: u64) -> Result<MaskState> {
        check_noise("t", t_new)?;
        if t_new < self.t {
            return Err(Error::NoiseLevel(format!("cannot lower noise from {} to {t_new}", self.t)));
        }
        let rate = if self.t >= 1.0 { 0.0 } else { (t_new - self.t) / (1.0 - self.t) };
        let mut rng = rng::stream(seed, streams::FORWARD_MASK);
        let mut out = self.clone();
        out.t = t_new;
        let positions: Vec<Position> = self.positions().collect();
        for pos in positions {
            if self.maskable(pos, mode) && !self.is_masked(pos) && rng.random::<f64>() < rate {
                out.mask_position(pos);
            }
        }
        Ok(out)
    }

    /// Fill exactly the given masked positions with the argmax class of
    /// their distributions and move to noise level `s`. This is the
    /// deterministic, confidence-driven variant of [`reverse_step`].
    pub fn unmask_argmax(&self, selected: &[Position], fill: &Predictions, s: f64) -> Result<MaskState> {
        check_noise("s", s)?;
        let mut out = self.clone();
        out.t = s;
        for &pos in selected {
            if !self.is_masked(pos) {
                return Err(Error::InvalidArgument(format!("{pos:?} is not masked")));
            }
            let slot = fill_slot(&self.vocab, pos, fill, |row| crate::tensor::argmax(row))?;
            out.fill_position(pos, slot);
        }
        Ok(out)
    }
}

fn fill_slot(vocab: &VocabSpec, pos: Position, fill: &Predictions, mut pick: impl FnMut(&[f64]) -> usize) -> Result<Slot> {
    match pos {
        Position::Text(i) => {
            let row = fill
                .text
                .get(&i)
                .ok_or_else(|| Error::InvalidArgument(format!("no fill distribution for text index {i}")))?;
            Ok(Slot::Text(vocab.text_class_to_token(pick(row))))
        }
        Position::Sign(i) => {
            let rows = fill
                .sign
                .get(&i)
                .ok_or_else(|| Error::InvalidArgument(format!("no fill distribution for sign index {i}")))?;
            let mut toks = [0; 3];
            for (tok, row) in toks.iter_mut().zip(rows) {
                *tok = vocab.sign_class_to_token(pick(row));
            }
            Ok(Slot::Sign(toks))
        }
    }
}

/// Forward process `q(x_t | x_0)`: every maskable index is masked
/// independently with probability `t`.
pub fn forward_mask(seq: &TokenSequence, t: f64, mode: MaskMode, vocab: VocabSpec, seed: u64) -> Result<MaskState> {
    check_noise("t", t)?;
    MaskState::clean(seq.clone(), vocab).remask(t, mode, seed)
}

/// Reverse transition `q(x_s | x_t)`.
pub fn reverse_step(state: &MaskState, s: f64, fill: &Predictions, seed: u64) -> Result<MaskState> {
    check_noise("s", s)?;
    if s >= state.t {
        return Err(Error::NoiseLevel(format!("s = {s} must be below t = {}", state.t)));
    }
    for row in fill.text.values() {
        check_row(row)?;
    }
    for rows in fill.sign.values() {
        for row in rows {
            check_row(row)?;
        }
    }
    let keep = s / state.t;
    let mut rng = rng::stream(seed, streams::REVERSE_STEP);
    let mut out = state.clone();
    out.t = s;
    for pos in state.masked_positions() {
        if rng.random::<f64>() < keep {
            continue;
        }
        let slot = fill_slot(&state.vocab, pos, fill, |row| sample_categorical(row, rng.random()))?;
        out.fill_position(pos, slot);
    }
    Ok(out)
}

/// Point masses on the true tokens at every masked index.
pub fn oracle_fill_dist(state: &MaskState, truth: &TokenSequence) -> Result<Predictions> {
    if truth.text_len() != state.text_len() || truth.sign_len() != state.sign_len() {
        return Err(Error::Layout(format!(
            "truth layout ({}, {}) does not match state ({}, {})",
            truth.text_len(),
            truth.sign_len(),
            state.text_len(),
            state.sign_len()
        )));
    }
    let vocab = state.vocab;
    let one_hot = |n: usize, c: usize| {
        let mut v = vec![0.0; n];
        v[c] = 1.0;
        v
    };
    let mut out = Predictions::default();
    for pos in state.masked_positions() {
        match pos {
            Position::Text(i) => {
                let tok = truth.text.get(i).copied().unwrap_or(vocab.eos_id);
                let c = vocab
                    .text_token_to_class(tok)
                    .ok_or(Error::TokenOutOfRange { id: tok, limit: vocab.text_vocab })?;
                out.text.insert(i, one_hot(vocab.text_classes(), c));
            }
            Position::Sign(i) => {
                let toks = if i < truth.sign_len() { truth.sign_at(i) } else { [vocab.eos_id; 3] };
                let mut rows: [Vec<f64>; 3] = Default::default();
                for (row, tok) in rows.iter_mut().zip(toks) {
                    let c = vocab
                        .sign_token_to_class(tok)
                        .ok_or(Error::TokenOutOfRange { id: tok, limit: vocab.sign_vocab })?;
                    *row = one_hot(vocab.sign_classes(), c);
                }
                out.sign.insert(i, rows);
            }
        }
    }
    Ok(out)
}
