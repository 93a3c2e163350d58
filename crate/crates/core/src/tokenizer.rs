//! Part-wise motion tokenizer and the synthetic motion/text corpus.
//!
//! Motions are `T × d_s` matrices whose columns are split into three
//! disjoint part slices (body, left hand, right hand). Each part is
//! tokenized independently in non-overlapping 4-frame windows: a linear
//! (PCA) encoder maps a window to a `d_c` vector, the nearest of `N_c`
//! k-means centroids gives the token id, and a linear decoder maps a code
//! back to a 4-frame window.

use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::ops::Range;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{self, streams, Rng};
use crate::seq::{Part, TokenId};

/// Frames per token.
pub const WINDOW: usize = 4;

const CODEBOOK_MAGIC: &[u8; 4] = b"MDSC";
const CODEBOOK_VERSION: u32 = 1;

/// Column ranges of the three parts; the body takes any remainder.
pub fn part_slices(d_s: usize) -> [Range<usize>; 3] {
    let base = d_s / 3;
    let body = base + d_s % 3;
    [0..body, body..body + base, body + base..d_s]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    n_frames: usize,
    d_s: usize,
    frames: Vec<f64>,
}

impl MotionSequence {
    pub fn new(n_frames: usize, d_s: usize, frames: Vec<f64>) -> Result<Self> {
        if d_s < 3 {
            return Err(Error::InvalidArgument(format!("d_s = {d_s} cannot hold three parts")));
        }
        if frames.len() != n_frames * d_s {
            return Err(Error::Layout(format!(
                "{} values for {n_frames} frames of width {d_s}",
                frames.len()
            )));
        }
        Ok(MotionSequence { n_frames, d_s, frames })
    }

    pub fn zeros(n_frames: usize, d_s: usize) -> Self {
        MotionSequence { n_frames, d_s, frames: vec![0.0; n_frames * d_s] }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        &self.frames[f * self.d_s..(f + 1) * self.d_s]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [f64] {
        &mut self.frames[f * self.d_s..(f + 1) * self.d_s]
    }

    pub fn part_slices(&self) -> [Range<usize>; 3] {
        part_slices(self.d_s)
    }

    pub fn n_windows(&self) -> usize {
        self.n_frames / WINDOW
    }

    /// Window `w` of one part, flattened frame-major.
    pub fn part_window(&self, part: Part, w: usize) -> Vec<f64> {
        let cols = &self.part_slices()[part.index()];
        let mut out = Vec::with_capacity(WINDOW * cols.len());
        for f in w * WINDOW..(w + 1) * WINDOW {
            out.extend_from_slice(&self.frame(f)[cols.clone()]);
        }
        out
    }

    /// Repeat every frame `factor` times.
    pub fn stretched(&self, factor: usize) -> MotionSequence {
        let mut frames = Vec::with_capacity(self.frames.len() * factor);
        for f in 0..self.n_frames {
            for _ in 0..factor {
                frames.extend_from_slice(self.frame(f));
            }
        }
        MotionSequence { n_frames: self.n_frames * factor, d_s: self.d_s, frames }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Handedness {
    Both,
    LeftOnly,
    RightOnly,
}

impl Handedness {
    fn active(self, part: Part) -> bool {
        !matches!(
            (self, part),
            (Handedness::LeftOnly, Part::Right) | (Handedness::RightOnly, Part::Left)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Wave {
    amp: f64,
    freq: f64,
    phase: f64,
}

/// One lexical sign: a fixed smooth trajectory per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignTemplate {
    pub id: u32,
    pub n_tokens: usize,
    pub handedness: Handedness,
    columns: Vec<(f64, Vec<Wave>)>,
}

impl SignTemplate {
    pub fn n_frames(&self) -> usize {
        self.n_tokens * WINDOW
    }

    pub fn is_active(&self, col: usize, d_s: usize) -> bool {
        let slices = part_slices(d_s);
        let part = Part::ALL.into_iter().find(|p| slices[p.index()].contains(&col)).unwrap();
        self.handedness.active(part)
    }

    fn value(&self, col: usize, frame: usize, d_s: usize) -> f64 {
        if !self.is_active(col, d_s) {
            return 0.0;
        }
        let (offset, waves) = &self.columns[col];
        offset + waves.iter().map(|w| w.amp * (w.freq * frame as f64 + w.phase).sin()).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionConfig {
    pub d_s: usize,
    pub lexicon_size: usize,
    pub min_signs: usize,
    pub max_signs: usize,
    pub min_sign_tokens: usize,
    pub max_sign_tokens: usize,
    pub noise: f64,
    pub single_hand_prob: f64,
    pub max_frames: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            d_s: 24,
            lexicon_size: 60,
            min_signs: 2,
            max_signs: 8,
            min_sign_tokens: 2,
            max_sign_tokens: 4,
            noise: 0.01,
            single_hand_prob: 0.3,
            max_frames: 400,
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lexicon_size < 1 || self.min_signs < 1 || self.min_signs > self.max_signs {
            return Err(Error::Config("sign count range is empty".into()));
        }
        if self.min_sign_tokens < 1 || self.min_sign_tokens > self.max_sign_tokens {
            return Err(Error::Config("sign duration range is empty".into()));
        }
        if self.d_s < 3 || self.max_frames < WINDOW || self.noise < 0.0 {
            return Err(Error::Config("bad motion dimensions".into()));
        }
        Ok(())
    }
}

/// The fixed template set for a corpus seed.
pub fn build_lexicon(seed: u64, config: &MotionConfig) -> Vec<SignTemplate> {
    let mut rng = rng::stream(seed, streams::LEXICON);
    (0..config.lexicon_size as u32)
        .map(|id| {
            let n_tokens = rng.random_range(config.min_sign_tokens..=config.max_sign_tokens);
            let handedness = if rng.random::<f64>() < config.single_hand_prob {
                if rng.random::<bool>() {
                    Handedness::LeftOnly
                } else {
                    Handedness::RightOnly
                }
            } else {
                Handedness::Both
            };
            let columns = (0..config.d_s)
                .map(|_| {
                    let n_waves = rng.random_range(1..=3);
                    let waves = (0..n_waves)
                        .map(|_| Wave {
                            amp: rng.random_range(0.3..1.0) / n_waves as f64,
                            freq: rng.random_range(0.2..1.2),
                            phase: rng.random_range(0.0..TAU),
                        })
                        .collect();
                    (rng.random_range(-0.5..0.5), waves)
                })
                .collect();
            SignTemplate { id, n_tokens, handedness, columns }
        })
        .collect()
}

/// A subset of the lexicon standing in for one source corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub index: usize,
    pub count: usize,
}

impl Shard {
    pub const ALL: Shard = Shard { index: 0, count: 1 };

    /// Shard `s` of `n` owns template ids congruent to `s` or `s + 1` mod `n`,
    /// so neighbouring shards overlap.
    pub fn contains(&self, id: u32) -> bool {
        if self.count <= 1 {
            return true;
        }
        let r = id as usize % self.count;
        r == self.index || r == (self.index + 1) % self.count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignPair {
    pub motion: MotionSequence,
    pub text: Vec<TokenId>,
}

fn render_sample(lexicon: &[SignTemplate], pool: &[u32], config: &MotionConfig, rng: &mut Rng) -> SignPair {
    let noise = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE)).unwrap();
    let n_signs = rng.random_range(config.min_signs..=config.max_signs);
    let mut text = Vec::new();
    let mut frames = Vec::new();
    let mut n_frames = 0;
    for _ in 0..n_signs {
        let tpl = &lexicon[pool[rng.random_range(0..pool.len())] as usize];
        if n_frames + tpl.n_frames() > config.max_frames {
            break;
        }
        text.push(tpl.id);
        for f in 0..tpl.n_frames() {
            for c in 0..config.d_s {
                let mut v = tpl.value(c, f, config.d_s);
                if config.noise > 0.0 && tpl.is_active(c, config.d_s) {
                    v += noise.sample(rng);
                }
                frames.push(v);
            }
        }
        n_frames += tpl.n_frames();
    }
    SignPair { motion: MotionSequence { n_frames, d_s: config.d_s, frames }, text }
}

/// `n` (motion, text) pairs; the text is the template id sequence.
pub fn gen_synthetic_pairs(n: usize, seed: u64, config: &MotionConfig) -> Result<Vec<SignPair>> {
    gen_synthetic_pairs_in(n, seed, config, Shard::ALL, 0, Exec::default())
}

/// As [`gen_synthetic_pairs`], restricted to a lexicon shard. Sample `i`
/// uses its own derived stream, so the output does not depend on `exec`.
pub fn gen_synthetic_pairs_in(
    n: usize,
    seed: u64,
    config: &MotionConfig,
    shard: Shard,
    offset: usize,
    exec: Exec,
) -> Result<Vec<SignPair>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    config.validate()?;
    let lexicon = build_lexicon(seed, config);
    let pool: Vec<u32> = lexicon.iter().map(|t| t.id).filter(|&id| shard.contains(id)).collect();
    if pool.is_empty() {
        return Err(Error::Config("shard selects no templates".into()));
    }
    Ok(exec.map_range(n, |i| {
        let s = rng::derive_path(seed, &[shard.index as u64, shard.count as u64, (offset + i) as u64]);
        let mut r = rng::stream(s, streams::SAMPLES);
        render_sample(&lexicon, &pool, config, &mut r)
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub part: Part,
    pub n_codes: usize,
    pub code_dim: usize,
    pub window_dim: usize,
    /// `[n_codes, code_dim]`
    pub codes: Vec<f32>,
    /// `[code_dim, window_dim]` then `[code_dim]`
    pub enc_w: Vec<f32>,
    pub enc_b: Vec<f32>,
    /// `[window_dim, code_dim]` then `[window_dim]`
    pub dec_w: Vec<f32>,
    pub dec_b: Vec<f32>,
}

fn affine(w: &[f32], b: &[f32], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, &bias)| {
            bias as f64 + w[r * cols..(r + 1) * cols].iter().zip(x).map(|(&a, &v)| a as f64 * v).sum::<f64>()
        })
        .collect()
}

impl Codebook {
    pub fn code(&self, id: usize) -> Vec<f64> {
        self.codes[id * self.code_dim..(id + 1) * self.code_dim].iter().map(|&x| x as f64).collect()
    }

    pub fn encode(&self, window: &[f64]) -> Vec<f64> {
        affine(&self.enc_w, &self.enc_b, window)
    }

    /// Decoder applied to an arbitrary latent vector.
    pub fn decode_latent(&self, z: &[f64]) -> Vec<f64> {
        affine(&self.dec_w, &self.dec_b, z)
    }

    pub fn decode(&self, id: usize) -> Vec<f64> {
        self.decode_latent(&self.code(id))
    }

    /// Decoder weight as f64, `[window_dim, code_dim]`.
    pub fn decoder_weight(&self) -> Vec<f64> {
        self.dec_w.iter().map(|&x| x as f64).collect()
    }

    pub fn nearest(&self, z: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for c in 0..self.n_codes {
            let row = &self.codes[c * self.code_dim..(c + 1) * self.code_dim];
            let d: f64 = row.iter().zip(z).map(|(&a, &b)| (a as f64 - b).powi(2)).sum();
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_all(&CODEBOOK_VERSION.to_le_bytes())?;
        w.write_all(&[self.part.tag()])?;
        for n in [self.n_codes, self.code_dim, self.window_dim] {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for block in [&self.codes, &self.enc_w, &self.enc_b, &self.dec_w, &self.dec_b] {
            for x in block.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Codebook> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CODEBOOK_MAGIC {
            return Err(Error::Format("not a codebook file".into()));
        }
        let version = read_u32(r)?;
        if version != CODEBOOK_VERSION {
            return Err(Error::Format(format!("unsupported codebook version {version}")));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let part = Part::from_tag(tag[0]).ok_or_else(|| Error::Format(format!("bad part tag {}", tag[0])))?;
        let n_codes = read_u32(r)? as usize;
        let code_dim = read_u32(r)? as usize;
        let window_dim = read_u32(r)? as usize;
        let mut read_block = |n: usize| -> Result<Vec<f32>> { (0..n).map(|_| read_f32(r)).collect() };
        Ok(Codebook {
            part,
            n_codes,
            code_dim,
            window_dim,
            codes: read_block(n_codes * code_dim)?,
            enc_w: read_block(code_dim * window_dim)?,
            enc_b: read_block(code_dim)?,
            dec_w: read_block(window_dim * code_dim)?,
            dec_b: read_block(window_dim)?,
        })
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

/// The three part codebooks of one tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    pub parts: [Codebook; 3],
}

impl Codebooks {
    pub fn part(&self, p: Part) -> &Codebook {
        &self.parts[p.index()]
    }

    pub fn n_codes(&self) -> usize {
        self.parts[0].n_codes
    }

    pub fn code_dim(&self) -> usize {
        self.parts[0].code_dim
    }

    pub fn d_s(&self) -> usize {
        self.parts.iter().map(|c| c.window_dim / WINDOW).sum()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        for c in &self.parts {
            c.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Codebooks> {
        let parts = [Codebook::read_from(r)?, Codebook::read_from(r)?, Codebook::read_from(r)?];
        for (p, c) in Part::ALL.iter().zip(&parts) {
            if c.part != *p {
                return Err(Error::Format("codebook parts out of order".into()));
            }
        }
        if parts.iter().any(|c| c.n_codes != parts[0].n_codes || c.code_dim != parts[0].code_dim) {
            return Err(Error::Format("codebook shapes disagree across parts".into()));
        }
        Ok(Codebooks { parts })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Codebooks> {
        let bytes = std::fs::read(path)?;
        Codebooks::read_from(&mut bytes.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodebookConfig {
    pub n_codes: usize,
    pub code_dim: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig { n_codes: 64, code_dim: 16, iters: 50, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Mean squared distance to the assigned code, in code space, per part.
    pub quantization_error: [f64; 3],
    /// The same quantity after each k-means iteration.
    pub history: [Vec<f64>; 3],
}

fn to_f32(xs: impl IntoIterator<Item = f64>) -> Vec<f32> {
    xs.into_iter().map(|x| x as f32).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>], exec: Exec) -> Vec<(usize, f64)> {
    exec.map(points, |p| {
        let mut best = (0, f64::INFINITY);
        for (c, cen) in centroids.iter().enumerate() {
            let d = sq_dist(p, cen);
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    })
}

/// k-means with k-means++ seeding. Returns centroids, final assignment and
/// the error after every assignment pass.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut Rng, exec: Exec) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>) {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            if d2[pick] == 0.0 {
                pick = crate::tensor::argmax(&d2);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }

    let mut history = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for _ in 0..iters.max(1) {
        let assigned = assign(points, &centroids, exec);
        let new_labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        history.push(assigned.iter().map(|a| a.1).sum::<f64>() / n as f64);
        if new_labels == labels {
            break;
        }
        labels = new_labels;
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            crate::tensor::axpy(1.0, p, &mut sums[l]);
        }
        let mut far: Vec<(usize, f64)> = assigned.iter().enumerate().map(|(i, a)| (i, a.1)).collect();
        far.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut far = far.into_iter();
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else if let Some((i, _)) = far.next() {
                // empty cluster: move it onto the worst-served point
                centroids[c] = points[i].clone();
            }
        }
    }
    let labels = assign(points, &centroids, exec).into_iter().map(|a| a.0).collect();
    (centroids, labels, history)
}

fn fit_part(dataset: &[MotionSequence], part: Part, cfg: &CodebookConfig, exec: Exec) -> Result<(Codebook, Vec<f64>)> {
    let windows: Vec<Vec<f64>> = dataset
        .iter()
        .flat_map(|m| (0..m.n_windows()).map(move |w| m.part_window(part, w)))
        .collect();
    if windows.is_empty() {
        return Err(Error::Data("no 4-frame windows in dataset".into()));
    }
    let dim = windows[0].len();
    let mut distinct: Vec<Vec<u64>> = windows.iter().map(|w| w.iter().map(|x| x.to_bits()).collect()).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if cfg.n_codes > distinct.len() {
        return Err(Error::Data(format!(
            "{} codes requested but only {} distinct windows for part {part:?}",
            cfg.n_codes,
            distinct.len()
        )));
    }
    if cfg.code_dim > dim || cfg.code_dim == 0 {
        return Err(Error::Config(format!("code_dim {} must lie in [1, {dim}]", cfg.code_dim)));
    }

    // linear encoder: projection onto the leading principal directions
    let n = windows.len() as f64;
    let mut mean = vec![0.0; dim];
    for w in &windows {
        crate::tensor::axpy(1.0 / n, w, &mut mean);
    }
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for w in &windows {
        let c: Vec<f64> = w.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..dim {
            for j in 0..dim {
                cov[(i, j)] += c[i] * c[j] / n;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut enc_w = Vec::with_capacity(cfg.code_dim * dim);
    for &o in order.iter().take(cfg.code_dim) {
        enc_w.extend(eig.eigenvectors.column(o).iter().copied());
    }
    let enc_w = to_f32(enc_w);
    let enc_b = to_f32((0..cfg.code_dim).map(|r| {
        -enc_w[r * dim..(r + 1) * dim].iter().zip(&mean).map(|(&a, &m)| a as f64 * m).sum::<f64>()
    }));

    let latents: Vec<Vec<f64>> = exec.map(&windows, |w| affine(&enc_w, &enc_b, w));
    let mut rng = rng::stream(rng::derive(cfg.seed, part.index() as u64), streams::KMEANS);
    let (centroids, labels, history) = kmeans(&latents, cfg.n_codes, cfg.iters, &mut rng, exec);
    let codes = to_f32(centroids.iter().flatten().copied());

    // least-squares decoder from (rounded) codes to the mean member window
    let mut members = vec![vec![0.0; dim]; cfg.n_codes];
    let mut counts = vec![0usize; cfg.n_codes];
    for (w, &l) in windows.iter().zip(&labels) {
        counts[l] += 1;
        crate::tensor::axpy(1.0, w, &mut members[l]);
    }
    let used: Vec<usize> = (0..cfg.n_codes).filter(|&c| counts[c] > 0).collect();
    let a = DMatrix::from_fn(used.len(), cfg.code_dim + 1, |r, c| {
        if c == cfg.code_dim {
            1.0
        } else {
            codes[used[r] * cfg.code_dim + c] as f64
        }
    });
    let b = DMatrix::from_fn(used.len(), dim, |r, c| members[used[r]][c] / counts[used[r]] as f64);
    let x = a
        .svd(true, true)
        .solve(&b, 1e-10)
        .map_err(|e| Error::Numerical(format!("decoder least squares failed: {e}")))?;
    let dec_w = to_f32((0..dim).flat_map(|r| (0..cfg.code_dim).map(move |c| (r, c))).map(|(r, c)| x[(c, r)]));
    let dec_b = to_f32((0..dim).map(|r| x[(cfg.code_dim, r)]));

    let book = Codebook { part, n_codes: cfg.n_codes, code_dim: cfg.code_dim, window_dim: dim, codes, enc_w, enc_b, dec_w, dec_b };
    Ok((book, history))
}

/// Fit the three part codebooks (independently, in parallel when enabled).
pub fn fit_codebooks(dataset: &[MotionSequence], cfg: &CodebookConfig, exec: Exec) -> Result<(Codebooks, FitReport)> {
    if dataset.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let d_s = dataset[0].d_s();
    if dataset.iter().any(|m| m.d_s() != d_s) {
        return Err(Error::Data("motions disagree on d_s".into()));
    }
    let fits = exec.map(&Part::ALL, |&p| fit_part(dataset, p, cfg, exec));
    let mut books = Vec::new();
    let mut hist: Vec<Vec<f64>> = Vec::new();
    for f in fits {
        let (b, h) = f?;
        books.push(b);
        hist.push(h);
    }
    let err = |h: &Vec<f64>| h.last().copied().unwrap_or(0.0);
    let report = FitReport {
        quantization_error: [err(&hist[0]), err(&hist[1]), err(&hist[2])],
        history: [hist[0].clone(), hist[1].clone(), hist[2].clone()],
    };
    let [b, l, r]: [Codebook; 3] = books.try_into().expect("three parts");
    Ok((Codebooks { parts: [b, l, r] }, report))
}

/// Token ids per part, one per 4-frame window.
pub fn tokenize(motion: &MotionSequence, books: &Codebooks) -> Result<[Vec<TokenId>; 3]> {
    if motion.n_frames() % WINDOW != 0 {
        return Err(Error::Layout(format!("{} frames is not a multiple of {WINDOW}", motion.n_frames())));
    }
    if motion.d_s() != books.d_s() {
        return Err(Error::Layout(format!("motion width {} vs codebook width {}", motion.d_s(), books.d_s())));
    }
    let mut out: [Vec<TokenId>; 3] = Default::default();
    for p in Part::ALL {
        let book = books.part(p);
        out[p.index()] = (0..motion.n_windows())
            .map(|w| book.nearest(&book.encode(&motion.part_window(p, w))) as TokenId)
            .collect();
    }
    Ok(out)
}

/// Decode part token streams back to a motion of `4 · L_s` frames.
pub fn detokenize(tokens: &[Vec<TokenId>; 3], books: &Codebooks) -> Result<MotionSequence> {
    let l_s = tokens[0].len();
    if tokens.iter().any(|t| t.len() != l_s) {
        return Err(Error::Layout("part token streams differ in length".into()));
    }
    let d_s = books.d_s();
    let slices = part_slices(d_s);
    let mut motion = MotionSequence::zeros(l_s * WINDOW, d_s);
    for p in Part::ALL {
        let book = books.part(p);
        let cols = slices[p.index()].clone();
        let width = cols.len();
        for (w, &id) in tokens[p.index()].iter().enumerate() {
            if id as usize >= book.n_codes {
                return Err(Error::TokenOutOfRange { id, limit: book.n_codes as u32 });
            }
            let window = book.decode(id as usize);
            for f in 0..WINDOW {
                motion.frame_mut(w * WINDOW + f)[cols.clone()].copy_from_slice(&window[f * width..(f + 1) * width]);
            }
        }
    }
    Ok(motion)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> MotionConfig {
        MotionConfig { lexicon_size: 20, ..MotionConfig::default() }
    }

    fn fitted(n_codes: usize) -> (Vec<SignPair>, Codebooks, FitReport) {
        let data = gen_synthetic_pairs(120, 3, &small_config()).unwrap();
        let motions: Vec<MotionSequence> = data.iter().map(|p| p.motion.clone()).collect();
        let cfg = CodebookConfig { n_codes, code_dim: 16, iters: 60, seed: 1 };
        let (books, rep) = fit_codebooks(&motions, &cfg, Exec::default()).unwrap();
        (data, books, rep)
    }

    #[test]
    fn generator_is_deterministic() {
        let a = gen_synthetic_pairs(1, 9, &MotionConfig::default()).unwrap();
        let b = gen_synthetic_pairs(1, 9, &MotionConfig::default()).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        let seq = gen_synthetic_pairs_in(5, 9, &MotionConfig::default(), Shard::ALL, 0, Exec::Sequential).unwrap();
        let par = gen_synthetic_pairs_in(5, 9, &MotionConfig::default(), Shard::ALL, 0, Exec::Parallel).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn generator_lengths() {
        let cfg = MotionConfig::default();
        let data = gen_synthetic_pairs(1000, 4, &cfg).unwrap();
        for p in &data {
            let t = p.motion.n_frames();
            assert!(t % 4 == 0 && t <= 400 && t >= 4);
            assert!((cfg.min_signs..=cfg.max_signs).contains(&p.text.len()));
        }
        assert!(build_lexicon(4, &cfg).len() >= 50);
    }

    #[test]
    fn single_handed_templates_rest_the_other_hand() {
        let cfg = MotionConfig { lexicon_size: 60, min_signs: 1, max_signs: 1, ..MotionConfig::default() };
        let lex = build_lexicon(5, &cfg);
        let data = gen_synthetic_pairs(200, 5, &cfg).unwrap();
        let slices = part_slices(cfg.d_s);
        let mut checked = 0;
        for p in &data {
            let tpl = &lex[p.text[0] as usize];
            let idle = match tpl.handedness {
                Handedness::LeftOnly => slices[2].clone(),
                Handedness::RightOnly => slices[1].clone(),
                Handedness::Both => continue,
            };
            for f in 0..p.motion.n_frames() {
                for c in idle.clone() {
                    assert!((p.motion.frame(f)[c] - p.motion.frame(0)[c]).abs() < 1e-9);
                }
            }
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn shards_overlap_and_cover() {
        let s0 = Shard { index: 0, count: 3 };
        let s1 = Shard { index: 1, count: 3 };
        assert!(s0.contains(0) && s0.contains(1) && !s0.contains(2));
        assert!(s1.contains(1) && s1.contains(2));
    }

    #[test]
    fn constant_motion_rank_one() {
        let d_s = 6;
        let frames: Vec<f64> = (0..8).flat_map(|_| (0..d_s).map(|c| c as f64 * 0.3 - 0.2)).collect();
        let m = MotionSequence::new(8, d_s, frames).unwrap();
        let cfg = CodebookConfig { n_codes: 1, code_dim: 2, iters: 5, seed: 0 };
        let (books, _) = fit_codebooks(&[m.clone()], &cfg, Exec::Sequential).unwrap();
        for p in Part::ALL {
            let win = m.part_window(p, 0);
            let dec = books.part(p).decode(0);
            for (a, b) in win.iter().zip(&dec) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
        let too_many = CodebookConfig { n_codes: 2, ..cfg };
        assert!(matches!(fit_codebooks(&[m], &too_many, Exec::Sequential), Err(Error::Data(_))));
    }

    #[test]
    fn kmeans_error_is_monotone_and_more_codes_help() {
        let (_, _, rep8) = fitted(8);
        let (_, _, rep64) = fitted(64);
        for h in rep8.history.iter().chain(rep64.history.iter()) {
            for w in h.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15, "{w:?}");
            }
        }
        for p in 0..3 {
            assert!(rep64.quantization_error[p] <= rep8.quantization_error[p]);
        }
    }

    #[test]
    fn round_trip_fidelity() {
        let (data, books, _) = fitted(64);
        let mut r = rng::stream(11, 0);
        let mut hits = 0;
        let mut total = 0;
        for _ in 0..100 {
            let len = r.random_range(1..20);
            let ids: [Vec<u32>; 3] = std::array::from_fn(|_| (0..len).map(|_| r.random_range(0..64)).collect());
            let back = tokenize(&detokenize(&ids, &books).unwrap(), &books).unwrap();
            for p in 0..3 {
                hits += ids[p].iter().zip(&back[p]).filter(|(a, b)| a == b).count();
                total += len;
            }
        }
        assert!(hits as f64 / total as f64 >= 0.95, "{hits}/{total}");
        let toks = tokenize(&data[0].motion, &books).unwrap();
        assert_eq!(toks, tokenize(&data[0].motion.clone(), &books).unwrap());
        assert_eq!(toks[0].len(), data[0].motion.n_frames() / 4);
    }

    #[test]
    fn part_independence() {
        let (data, books, _) = fitted(32);
        let m = &data[1].motion;
        let mut perturbed = m.clone();
        let left = part_slices(m.d_s())[1].clone();
        for f in 0..m.n_frames() {
            for c in left.clone() {
                perturbed.frame_mut(f)[c] += 0.7;
            }
        }
        let a = tokenize(m, &books).unwrap();
        let b = tokenize(&perturbed, &books).unwrap();
        assert_eq!(a[0], b[0]);
        assert_eq!(a[2], b[2]);
    }

    #[test]
    fn length_arithmetic_and_errors() {
        let (_, books, _) = fitted(16);
        let m = MotionSequence::zeros(8, 24);
        assert_eq!(tokenize(&m, &books).unwrap()[1].len(), 2);
        assert!(tokenize(&MotionSequence::zeros(6, 24), &books).is_err());
        let empty = detokenize(&[vec![], vec![], vec![]], &books).unwrap();
        assert_eq!(empty.n_frames(), 0);
        let one = detokenize(&[vec![3], vec![4], vec![5]], &books).unwrap();
        assert_eq!(one.n_frames(), 4);
        assert_eq!(one.part_window(Part::Left, 0), books.part(Part::Left).decode(4));
        assert!(detokenize(&[vec![16], vec![0], vec![0]], &books).is_err());
        assert!(detokenize(&[vec![1], vec![0, 1], vec![0]], &books).is_err());
    }

    #[test]
    fn codebook_serialization_is_bit_exact() {
        let (_, books, _) = fitted(16);
        let mut buf = Vec::new();
        books.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MDSC");
        let back = Codebooks::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, books);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
        assert!(Codebooks::read_from(&mut &b"XXXX...."[..]).is_err());
    }
}
