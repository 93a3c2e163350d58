//! Flat `key = value` run configuration with `include <path>` support.
//!
//! The canonical form (sorted keys, one per line) is hashed with SHA-256;
//! run artifacts live under a directory named by that hash.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mop::EmbedMode;
use crate::schedule::Variant;
use crate::train::OptimizerKind;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    // synthetic data
    pub n: usize,
    pub pretrain_n: usize,
    pub lexicon_size: usize,
    pub d_s: usize,
    pub min_signs: usize,
    pub max_signs: usize,
    pub noise: f64,
    pub shards: usize,
    pub shard: usize,
    // tokenizer
    pub n_codes: usize,
    pub code_dim: usize,
    pub kmeans_iters: usize,
    // model
    pub d_model: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub attn_dim: usize,
    pub attention: bool,
    // schedule
    pub m: usize,
    pub k: usize,
    pub variant: Variant,
    // training
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub clip: f64,
    pub alpha: f64,
    pub embed_mode: EmbedMode,
    pub latent_loss: bool,
    pub physical_loss: bool,
    // evaluation and benchmark
    pub joint_dim: usize,
    pub bench_repeats: usize,
    pub bench_warmup: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs"),
            n: 200,
            pretrain_n: 600,
            lexicon_size: 60,
            d_s: 24,
            min_signs: 2,
            max_signs: 8,
            noise: 0.01,
            shards: 3,
            shard: 0,
            n_codes: 64,
            code_dim: 16,
            kmeans_iters: 50,
            d_model: 64,
            blocks: 2,
            max_len: 128,
            attn_dim: 16,
            attention: true,
            m: 100,
            k: 4,
            variant: Variant::Utc,
            epochs: 50,
            pretrain_epochs: 50,
            batch_size: 16,
            lr: 0.003,
            optimizer: OptimizerKind::Adam,
            clip: 5.0,
            alpha: 0.5,
            embed_mode: EmbedMode::Dense,
            latent_loss: true,
            physical_loss: true,
            joint_dim: 2,
            bench_repeats: 10,
            bench_warmup: 2,
        }
    }
}

/// Keys with their one-line descriptions, in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    ("alpha", "weight of latent+physical terms when fine-tuning"),
    ("attention", "learn pooling weights (false: plain mean pooling)"),
    ("attn_dim", "query/key width of the pooling"),
    ("batch_size", "sequences per gradient step"),
    ("bench_repeats", "timed generations per text in the benchmark"),
    ("bench_warmup", "untimed warmup generations"),
    ("blocks", "mixing blocks"),
    ("clip", "gradient-norm clip (0 = off)"),
    ("code_dim", "codebook entry width d_c"),
    ("d_model", "model width"),
    ("d_s", "pose width of synthetic motion"),
    ("embed_mode", "sign embedding: dense | avg | top1 | top2"),
    ("epochs", "fine-tuning epochs"),
    ("joint_dim", "columns per joint for DTW-JPE"),
    ("k", "tokens revealed per generation step"),
    ("kmeans_iters", "Lloyd iterations per codebook"),
    ("latent_loss", "include the latent term when pretraining"),
    ("lexicon_size", "sign templates in the synthetic lexicon"),
    ("lr", "initial step size (cosine decay)"),
    ("m", "generated sign span M"),
    ("max_len", "longest segment the model accepts"),
    ("max_signs", "most signs per synthetic sentence"),
    ("min_signs", "fewest signs per synthetic sentence"),
    ("n", "fine-tuning corpus size (split 80/10/10)"),
    ("n_codes", "codes per part N_c"),
    ("noise", "std of per-frame motion noise"),
    ("optimizer", "adam | sgd"),
    ("out", "root directory for run folders"),
    ("physical_loss", "include the physical term when pretraining"),
    ("pretrain_epochs", "pretraining epochs"),
    ("pretrain_n", "pretraining corpus size (union of all shards)"),
    ("seed", "master seed"),
    ("shard", "lexicon shard used for fine-tuning"),
    ("shards", "number of lexicon shards"),
    ("variant", "unmasking schedule: plain | utc"),
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for '{key}'")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "n" => self.n = parse(key, v)?,
            "pretrain_n" => self.pretrain_n = parse(key, v)?,
            "lexicon_size" => self.lexicon_size = parse(key, v)?,
            "d_s" => self.d_s = parse(key, v)?,
            "min_signs" => self.min_signs = parse(key, v)?,
            "max_signs" => self.max_signs = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "shards" => self.shards = parse(key, v)?,
            "shard" => self.shard = parse(key, v)?,
            "n_codes" => self.n_codes = parse(key, v)?,
            "code_dim" => self.code_dim = parse(key, v)?,
            "kmeans_iters" => self.kmeans_iters = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "attn_dim" => self.attn_dim = parse(key, v)?,
            "attention" => self.attention = parse(key, v)?,
            "m" => self.m = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "epochs" => self.epochs = parse(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "clip" => self.clip = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "embed_mode" => self.embed_mode = v.parse()?,
            "latent_loss" => self.latent_loss = parse(key, v)?,
            "physical_loss" => self.physical_loss = parse(key, v)?,
            "joint_dim" => self.joint_dim = parse(key, v)?,
            "bench_repeats" => self.bench_repeats = parse(key, v)?,
            "bench_warmup" => self.bench_warmup = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "n" => self.n.to_string(),
            "pretrain_n" => self.pretrain_n.to_string(),
            "lexicon_size" => self.lexicon_size.to_string(),
            "d_s" => self.d_s.to_string(),
            "min_signs" => self.min_signs.to_string(),
            "max_signs" => self.max_signs.to_string(),
            "noise" => self.noise.to_string(),
            "shards" => self.shards.to_string(),
            "shard" => self.shard.to_string(),
            "n_codes" => self.n_codes.to_string(),
            "code_dim" => self.code_dim.to_string(),
            "kmeans_iters" => self.kmeans_iters.to_string(),
            "d_model" => self.d_model.to_string(),
            "blocks" => self.blocks.to_string(),
            "max_len" => self.max_len.to_string(),
            "attn_dim" => self.attn_dim.to_string(),
            "attention" => self.attention.to_string(),
            "m" => self.m.to_string(),
            "k" => self.k.to_string(),
            "variant" => self.variant.to_string(),
            "epochs" => self.epochs.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "clip" => self.clip.to_string(),
            "alpha" => self.alpha.to_string(),
            "embed_mode" => self.embed_mode.to_string(),
            "latent_loss" => self.latent_loss.to_string(),
            "physical_loss" => self.physical_loss.to_string(),
            "joint_dim" => self.joint_dim.to_string(),
            "bench_repeats" => self.bench_repeats.to_string(),
            "bench_warmup" => self.bench_warmup.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n", self.n),
            ("pretrain_n", self.pretrain_n),
            ("lexicon_size", self.lexicon_size),
            ("d_s", self.d_s),
            ("min_signs", self.min_signs),
            ("max_signs", self.max_signs),
            ("shards", self.shards),
            ("n_codes", self.n_codes),
            ("code_dim", self.code_dim),
            ("kmeans_iters", self.kmeans_iters),
            ("d_model", self.d_model),
            ("blocks", self.blocks),
            ("max_len", self.max_len),
            ("attn_dim", self.attn_dim),
            ("m", self.m),
            ("k", self.k),
            ("epochs", self.epochs),
            ("pretrain_epochs", self.pretrain_epochs),
            ("batch_size", self.batch_size),
            ("joint_dim", self.joint_dim),
            ("bench_repeats", self.bench_repeats),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("'{k}' must be positive")));
            }
        }
        if self.shard >= self.shards {
            return Err(Error::Config(format!("shard {} outside 0..{}", self.shard, self.shards)));
        }
        if self.k > self.m {
            return Err(Error::Config(format!("k = {} exceeds m = {}", self.k, self.m)));
        }
        if self.m + 1 > self.max_len {
            return Err(Error::Config(format!("m = {} does not fit max_len = {}", self.m, self.max_len)));
        }
        if !(self.alpha >= 0.0) || !(self.lr > 0.0) || !(self.clip >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config("alpha, clip and noise must be >= 0 and lr > 0".into()));
        }
        if self.min_signs > self.max_signs {
            return Err(Error::Config("min_signs exceeds max_signs".into()));
        }
        Ok(())
    }

    /// Sorted `key = value` lines.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    /// SHA-256 of everything except the output root.
    pub fn hash(&self) -> String {
        let body: String = self.canonical().lines().filter(|l| !l.starts_with("out =")).map(|l| format!("{l}\n")).collect();
        hex::encode(Sha256::digest(body.as_bytes()))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(&self.hash()[..16])
    }

    pub fn parse_str(text: &str, base: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        apply(&mut cfg, text, base, &mut seen)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        apply_file(&mut cfg, path, &mut seen)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn help() -> String {
        let d = RunConfig::default();
        KEYS.iter().map(|(k, doc)| format!("  {k:<16} {doc} (default: {})\n", d.get(k).unwrap())).collect()
    }
}

fn apply_file(cfg: &mut RunConfig, path: &Path, seen: &mut BTreeSet<PathBuf>) -> Result<()> {
    let canon = path.canonicalize().map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    if !seen.insert(canon.clone()) {
        return Err(Error::Config(format!("include cycle through {}", path.display())));
    }
    let text = std::fs::read_to_string(&canon).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let base = canon.parent().unwrap_or(Path::new(".")).to_path_buf();
    apply(cfg, &text, &base, seen)?;
    seen.remove(&canon);
    Ok(())
}

fn apply(cfg: &mut RunConfig, text: &str, base: &Path, seen: &mut BTreeSet<PathBuf>) -> Result<()> {
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("include ") {
            apply_file(cfg, &base.join(rest.trim()), seen)?;
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let mut c = RunConfig::default();
        c.set("variant", "plain").unwrap();
        c.set("embed_mode", "top2").unwrap();
        let back = RunConfig::parse_str(&c.canonical(), Path::new(".")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn every_field_changes_the_hash() {
        let base = RunConfig::default();
        let h0 = base.hash();
        let alt = [
            ("alpha", "0.25"),
            ("attention", "false"),
            ("attn_dim", "8"),
            ("batch_size", "4"),
            ("bench_repeats", "3"),
            ("bench_warmup", "1"),
            ("blocks", "1"),
            ("clip", "1"),
            ("code_dim", "8"),
            ("d_model", "32"),
            ("d_s", "30"),
            ("embed_mode", "avg"),
            ("epochs", "7"),
            ("joint_dim", "1"),
            ("k", "2"),
            ("kmeans_iters", "9"),
            ("latent_loss", "false"),
            ("lexicon_size", "50"),
            ("lr", "0.1"),
            ("m", "20"),
            ("max_len", "64"),
            ("max_signs", "5"),
            ("min_signs", "1"),
            ("n", "10"),
            ("n_codes", "8"),
            ("noise", "0.5"),
            ("optimizer", "sgd"),
            ("physical_loss", "false"),
            ("pretrain_epochs", "3"),
            ("pretrain_n", "9"),
            ("seed", "1"),
            ("shard", "1"),
            ("shards", "4"),
            ("variant", "plain"),
        ];
        assert_eq!(alt.len() + 1, KEYS.len()); // all but `out`
        for (k, v) in alt {
            let mut c = base.clone();
            c.set(k, v).unwrap();
            assert_ne!(c.hash(), h0, "{k}");
        }
    }

    #[test]
    fn includes_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.cfg"), "m = 20\nk = 2 # comment\n").unwrap();
        std::fs::write(dir.path().join("run.cfg"), "include base.cfg\nk = 4\n").unwrap();
        let c = RunConfig::load(&dir.path().join("run.cfg")).unwrap();
        assert_eq!((c.m, c.k), (20, 4));
        std::fs::write(dir.path().join("a.cfg"), "include b.cfg\n").unwrap();
        std::fs::write(dir.path().join("b.cfg"), "include a.cfg\n").unwrap();
        assert!(matches!(RunConfig::load(&dir.path().join("a.cfg")), Err(Error::Config(_))));
        assert!(RunConfig::parse_str("bogus = 1", Path::new(".")).is_err());
        assert!(RunConfig::parse_str("k = 500", Path::new(".")).is_err());
        assert!(RunConfig::parse_str("alpha = -1", Path::new(".")).is_err());
        assert!(RunConfig::parse_str("variant = spiral", Path::new(".")).is_err());
    }
}
