//! End-to-end commands over a run directory.
//!
//! ```text
//! <out>/<config hash>/
//!   data/{train,dev,test,pretrain}.jsonl  data/manifest.json
//!   tokenizer/codebooks.mdsc              tokenizer/manifest.json
//!   pretrain/{model.ckpt,train.log,manifest.json}
//!   <finetune dir>/{model.ckpt,train.log,manifest.json}
//!   <generate dir>/{tokens.jsonl,motion.jsonl,timing.txt,manifest.json}
//!   eval/{report.txt,metrics.txt}         bench/report.txt
//! ```
//!
//! Every manifest carries the hash of the data manifest it descends from;
//! evaluation refuses generated sets that trace back to another dataset.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::bench::{bench_latency, BenchReport};
use crate::checkpoint::{load_model, save_model};
use crate::config::RunConfig;
use crate::dataset::{read_jsonl, sha256_file, split_sizes, write_jsonl, Manifest, Record, TokenRecord};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::generate::{generate, MaskPredictor, OraclePredictor};
use crate::metrics::{dtw_jpe, sibleu_parts, JointSelection, MetricReport};
use crate::model::{ModelConfig, TinyMdlm};
use crate::mop::EmbedMode;
use crate::objectives::LossWeights;
use crate::rng;
use crate::schedule::{build_schedule, count_orders_plain, count_orders_utc, order_ratio, OrderCount};
use crate::seq::{Part, TokenSequence, VocabSpec};
use crate::tokenizer::{
    detokenize, fit_codebooks, gen_synthetic_pairs_in, tokenize, CodebookConfig, Codebooks, MotionConfig, MotionSequence,
    Shard, WINDOW,
};
use crate::train::{evaluate_loss, train, Example, Objective, TrainConfig, TrainHistory};

/// Offset separating the pretraining corpus streams from the fine-tuning ones.
const PRETRAIN_OFFSET: usize = 1 << 24;

pub fn motion_config(cfg: &RunConfig) -> MotionConfig {
    MotionConfig {
        d_s: cfg.d_s,
        lexicon_size: cfg.lexicon_size,
        min_signs: cfg.min_signs,
        max_signs: cfg.max_signs,
        noise: cfg.noise,
        max_frames: WINDOW * cfg.m,
        ..Default::default()
    }
}

pub fn model_config(cfg: &RunConfig, causal: bool) -> ModelConfig {
    ModelConfig {
        d_model: cfg.d_model,
        blocks: cfg.blocks,
        max_len: cfg.max_len,
        attn_dim: cfg.attn_dim,
        causal,
        attention: cfg.attention,
    }
}

pub fn vocab(cfg: &RunConfig) -> Result<VocabSpec> {
    VocabSpec::new(cfg.lexicon_size as u32, cfg.n_codes as u32)
}

#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &RunConfig) -> Self {
        RunPaths { root: cfg.run_dir() }
    }
    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }
    pub fn data_manifest(&self) -> PathBuf {
        self.data("manifest.json")
    }
    pub fn codebooks(&self) -> PathBuf {
        self.root.join("tokenizer").join("codebooks.mdsc")
    }
    pub fn stage(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Data(format!("cannot create {}: {e}", p.display())))
}

fn dataset_hash(paths: &RunPaths) -> Result<String> {
    let p = paths.data_manifest();
    if !p.exists() {
        return Err(Error::Data(format!("missing {}; run gen-data first", p.display())));
    }
    sha256_file(&p)
}

fn write_manifest(dir: &Path, kind: &str, cfg: &RunConfig, dataset: String, inputs: Vec<String>, outputs: &[&str]) -> Result<()> {
    let files = outputs
        .iter()
        .map(|f| Ok((f.to_string(), sha256_file(&dir.join(f))?)))
        .collect::<Result<Vec<_>>>()?;
    Manifest { kind: kind.into(), seed: cfg.seed, config_hash: cfg.hash(), dataset_hash: dataset, inputs, files }
        .save(&dir.join("manifest.json"))
}

/// Fine-tuning records (one lexicon shard) and the pretraining corpus
/// drawn from the union of all shards.
pub fn make_records(cfg: &RunConfig, exec: Exec) -> Result<(Vec<Record>, Vec<Record>)> {
    cfg.validate()?;
    let mc = motion_config(cfg);
    let shard = Shard { index: cfg.shard, count: cfg.shards };
    let pairs = gen_synthetic_pairs_in(cfg.n, cfg.seed, &mc, shard, 0, exec)?;
    let recs = pairs.iter().enumerate().map(|(i, p)| Record::from_pair(format!("s{}-{i:06}", cfg.shard), p)).collect();
    let mut pre = Vec::with_capacity(cfg.pretrain_n);
    for s in 0..cfg.shards {
        let count = cfg.pretrain_n / cfg.shards + usize::from(s < cfg.pretrain_n % cfg.shards);
        if count == 0 {
            continue;
        }
        let sh = Shard { index: s, count: cfg.shards };
        let pairs = gen_synthetic_pairs_in(count, cfg.seed, &mc, sh, PRETRAIN_OFFSET, exec)?;
        pre.extend(pairs.iter().enumerate().map(|(i, p)| Record::from_pair(format!("p{s}-{i:06}"), p)));
    }
    Ok((recs, pre))
}

/// Synthetic splits (80/10/10 of `n`) plus the pretraining corpus.
pub fn gen_data(cfg: &RunConfig, exec: Exec) -> Result<PathBuf> {
    let paths = RunPaths::new(cfg);
    let dir = paths.data("");
    create_dir(&dir)?;
    let (recs, pre) = make_records(cfg, exec)?;
    let (tr, dv, _) = split_sizes(cfg.n);
    write_jsonl(&paths.data("train.jsonl"), &recs[..tr])?;
    write_jsonl(&paths.data("dev.jsonl"), &recs[tr..tr + dv])?;
    write_jsonl(&paths.data("test.jsonl"), &recs[tr + dv..])?;
    write_jsonl(&paths.data("pretrain.jsonl"), &pre)?;
    write_manifest(
        &dir,
        "gen-data",
        cfg,
        String::new(),
        vec![],
        &["train.jsonl", "dev.jsonl", "test.jsonl", "pretrain.jsonl"],
    )?;
    Ok(dir)
}

/// Everything a training run needs, built in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub books: Codebooks,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub pretrain: Vec<Example>,
}

pub fn build_corpus(cfg: &RunConfig, exec: Exec) -> Result<Corpus> {
    let (recs, pre) = make_records(cfg, exec)?;
    let (tr, dv, _) = split_sizes(cfg.n);
    let mut fit = motions(&recs[..tr])?;
    fit.extend(motions(&pre)?);
    let cb = CodebookConfig { n_codes: cfg.n_codes, code_dim: cfg.code_dim, iters: cfg.kmeans_iters, seed: cfg.seed };
    let (books, _) = fit_codebooks(&fit, &cb, exec)?;
    let examples = |rs: &[Record]| -> Result<Vec<Example>> {
        rs.iter().map(|r| Example::from_motion(&r.text_tokens, &r.to_motion()?, &books)).collect()
    };
    Ok(Corpus {
        train: examples(&recs[..tr])?,
        dev: examples(&recs[tr..tr + dv])?,
        test: examples(&recs[tr + dv..])?,
        pretrain: examples(&pre)?,
        books,
    })
}

fn motions(records: &[Record]) -> Result<Vec<MotionSequence>> {
    records.iter().map(Record::to_motion).collect()
}

/// Fit the three part codebooks on fine-tuning train and pretraining motion.
pub fn fit_tokenizer(cfg: &RunConfig, exec: Exec) -> Result<(PathBuf, [f64; 3])> {
    let paths = RunPaths::new(cfg);
    let dataset = dataset_hash(&paths)?;
    let mut recs: Vec<Record> = read_jsonl(&paths.data("train.jsonl"))?;
    recs.extend(read_jsonl::<Record>(&paths.data("pretrain.jsonl"))?);
    let cb = CodebookConfig { n_codes: cfg.n_codes, code_dim: cfg.code_dim, iters: cfg.kmeans_iters, seed: cfg.seed };
    let (books, report) = fit_codebooks(&motions(&recs)?, &cb, exec)?;
    let out = paths.codebooks();
    let dir = out.parent().unwrap().to_path_buf();
    create_dir(&dir)?;
    books.save(&out)?;
    write_manifest(&dir, "fit-codebooks", cfg, dataset, vec!["data/train.jsonl".into(), "data/pretrain.jsonl".into()], &[
        "codebooks.mdsc",
    ])?;
    Ok((out, report.quantization_error))
}

pub fn load_books(cfg: &RunConfig) -> Result<Codebooks> {
    let p = RunPaths::new(cfg).codebooks();
    if !p.exists() {
        return Err(Error::Data(format!("missing {}; run fit-codebooks first", p.display())));
    }
    Codebooks::load(&p)
}

/// Records of a split and their training examples.
pub fn load_examples(path: &Path, books: &Codebooks, span: usize) -> Result<(Vec<Record>, Vec<Example>)> {
    let recs: Vec<Record> = read_jsonl(path)?;
    let ex = recs
        .iter()
        .map(|r| {
            let e = Example::from_motion(&r.text_tokens, &r.to_motion()?, books)?;
            if e.tokens.sign_len() > span {
                return Err(Error::Data(format!("record {} has {} sign tokens, span is {span}", r.id, e.tokens.sign_len())));
            }
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((recs, ex))
}

fn train_config(cfg: &RunConfig, objective: Objective, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        optimizer: cfg.optimizer,
        clip: cfg.clip,
        objective,
        span: cfg.m,
        seed,
    }
}

pub fn pretrain_weights(cfg: &RunConfig) -> LossWeights {
    LossWeights {
        latent: if cfg.latent_loss { 1.0 } else { 0.0 },
        physical: if cfg.physical_loss { 1.0 } else { 0.0 },
    }
}

fn run_training(
    cfg: &RunConfig,
    model: &mut TinyMdlm,
    books: &Codebooks,
    data: &[Example],
    tc: &TrainConfig,
    dir: &Path,
    exec: Exec,
) -> Result<TrainHistory> {
    create_dir(dir)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(dir.join("train.log"))?);
    let h = train(model, books, data, tc, exec, Some(&mut log))?;
    log.flush()?;
    drop(log);
    save_model(&dir.join("model.ckpt"), model)?;
    let _ = cfg;
    Ok(h)
}

/// Pretraining with text and sign masking on the union corpus. The sign
/// embedding is the plain part average during this phase.
pub fn pretrain_model(cfg: &RunConfig, books: &Codebooks, data: &[Example], exec: Exec) -> Result<(TinyMdlm, TrainHistory)> {
    let mut model = TinyMdlm::new(model_config(cfg, false), vocab(cfg)?, books, rng::derive(cfg.seed, 0x1417))?;
    model.embed_mode = EmbedMode::Average;
    let tc = train_config(cfg, Objective::Pretrain { weights: pretrain_weights(cfg) }, cfg.pretrain_epochs, rng::derive(cfg.seed, 1));
    let h = train(&mut model, books, data, &tc, exec, None)?;
    Ok((model, h))
}

pub fn cmd_pretrain(cfg: &RunConfig, exec: Exec) -> Result<(PathBuf, TrainHistory)> {
    let paths = RunPaths::new(cfg);
    let dataset = dataset_hash(&paths)?;
    let books = load_books(cfg)?;
    let (_, data) = load_examples(&paths.data("pretrain.jsonl"), &books, cfg.m)?;
    let mut model = TinyMdlm::new(model_config(cfg, false), vocab(cfg)?, &books, rng::derive(cfg.seed, 0x1417))?;
    model.embed_mode = EmbedMode::Average;
    let tc = train_config(cfg, Objective::Pretrain { weights: pretrain_weights(cfg) }, cfg.pretrain_epochs, rng::derive(cfg.seed, 1));
    let dir = paths.stage("pretrain");
    let h = run_training(cfg, &mut model, &books, &data, &tc, &dir, exec)?;
    write_manifest(&dir, "pretrain", cfg, dataset, vec!["data/pretrain.jsonl".into()], &["model.ckpt", "train.log"])?;
    Ok((dir.join("model.ckpt"), h))
}

/// Start a fine-tuning model, optionally from a checkpoint whose shapes
/// must match the configuration.
pub fn finetune_init(cfg: &RunConfig, books: &Codebooks, init: Option<&Path>) -> Result<TinyMdlm> {
    let mut model = match init {
        Some(p) => {
            let m = load_model(p, books)?;
            if m.config != model_config(cfg, false) || m.vocab != vocab(cfg)? {
                return Err(Error::Config(format!("checkpoint {} does not match the model configuration", p.display())));
            }
            m
        }
        None => TinyMdlm::new(model_config(cfg, false), vocab(cfg)?, books, rng::derive(cfg.seed, 0x1417))?,
    };
    model.embed_mode = cfg.embed_mode;
    Ok(model)
}

pub fn finetune_objective(cfg: &RunConfig) -> Objective {
    Objective::Finetune { variant: cfg.variant, alpha: cfg.alpha }
}

pub fn finetune_model(cfg: &RunConfig, books: &Codebooks, model: &mut TinyMdlm, data: &[Example], exec: Exec) -> Result<TrainHistory> {
    let tc = train_config(cfg, finetune_objective(cfg), cfg.epochs, rng::derive(cfg.seed, 2));
    train(model, books, data, &tc, exec, None)
}

pub fn cmd_finetune(cfg: &RunConfig, init: Option<&Path>, out_name: &str, exec: Exec) -> Result<(PathBuf, TrainHistory)> {
    let paths = RunPaths::new(cfg);
    let dataset = dataset_hash(&paths)?;
    let books = load_books(cfg)?;
    let (_, data) = load_examples(&paths.data("train.jsonl"), &books, cfg.m)?;
    let mut model = finetune_init(cfg, &books, init)?;
    let tc = train_config(cfg, finetune_objective(cfg), cfg.epochs, rng::derive(cfg.seed, 2));
    let dir = paths.stage(out_name);
    let h = run_training(cfg, &mut model, &books, &data, &tc, &dir, exec)?;
    let mut inputs = vec!["data/train.jsonl".to_string()];
    if let Some(p) = init {
        inputs.push(p.display().to_string());
    }
    write_manifest(&dir, "finetune", cfg, dataset, inputs, &["model.ckpt", "train.log"])?;
    Ok((dir.join("model.ckpt"), h))
}

#[derive(Debug, Clone, Deserialize)]
struct TextInput {
    id: String,
    text_tokens: Vec<u32>,
}

/// Shares one model across generation workers.
struct Borrowed<'a>(&'a TinyMdlm);

impl MaskPredictor for Borrowed<'_> {
    fn vocab(&self) -> VocabSpec {
        self.0.vocab()
    }
    fn predict(&self, state: &crate::seq::MaskState) -> Result<crate::seq::Predictions> {
        self.0.predict(state)
    }
    fn capacity(&self) -> usize {
        MaskPredictor::capacity(self.0)
    }
}

/// Generate sign tokens for every input, deterministically per index.
pub fn generate_all<P: MaskPredictor>(
    predictor_for: impl Fn(usize) -> Result<P> + Sync + Send,
    texts: &[(String, Vec<u32>)],
    cfg: &RunConfig,
    exec: Exec,
) -> Result<Vec<(TokenRecord, f64)>> {
    let schedule = build_schedule(cfg.m, cfg.k, cfg.variant)?;
    exec.map_range(texts.len(), |i| {
        let p = predictor_for(i)?;
        let (out, stats) = generate(&p, &texts[i].1, &schedule, rng::derive(cfg.seed, i as u64))?;
        Ok((
            TokenRecord { id: texts[i].0.clone(), text_tokens: texts[i].1.clone(), sign: out.sign, calls: stats.calls },
            stats.wall_time.as_secs_f64(),
        ))
    })
    .into_iter()
    .collect()
}

/// `cmd_generate`: model checkpoint (or the oracle) over an input file.
pub fn cmd_generate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    inputs: &Path,
    out_name: &str,
    exec: Exec,
) -> Result<Vec<TokenRecord>> {
    let paths = RunPaths::new(cfg);
    let books = load_books(cfg)?;
    let vocab = vocab(cfg)?;
    let texts: Vec<TextInput> = read_jsonl(inputs)?;
    let pairs: Vec<(String, Vec<u32>)> = texts.iter().map(|t| (t.id.clone(), t.text_tokens.clone())).collect();
    for (id, text) in &pairs {
        if let Some(&bad) = text.iter().find(|&&x| x >= vocab.text_vocab) {
            return Err(Error::Data(format!("input {id}: text token {bad} outside vocabulary {}", vocab.text_vocab)));
        }
    }
    let results = match checkpoint {
        Some(p) => {
            let mut model = load_model(p, &books)?;
            model.embed_mode = cfg.embed_mode;
            let model = &model;
            generate_all(|_| Ok(Borrowed(model)), &pairs, cfg, exec)?
        }
        None => {
            let recs: Vec<Record> = read_jsonl(inputs)?;
            let truths: Vec<TokenSequence> = recs
                .iter()
                .map(|r| TokenSequence::new(r.text_tokens.clone(), tokenize(&r.to_motion()?, &books)?))
                .collect::<Result<_>>()?;
            generate_all(
                |i| Ok(OraclePredictor::new(truths[i].clone(), vocab)),
                &pairs,
                cfg,
                exec,
            )?
        }
    };
    let dir = paths.stage(out_name);
    create_dir(&dir)?;
    let tokens: Vec<TokenRecord> = results.iter().map(|(t, _)| t.clone()).collect();
    let motion: Vec<Record> = tokens
        .iter()
        .map(|t| {
            let m = detokenize(&t.sign, &books)?;
            Ok(Record { id: t.id.clone(), text_tokens: t.text_tokens.clone(), frames: m.n_frames(), dims: m.d_s(), motion: m.frames().to_vec() })
        })
        .collect::<Result<_>>()?;
    write_jsonl(&dir.join("tokens.jsonl"), &tokens)?;
    write_jsonl(&dir.join("motion.jsonl"), &motion)?;
    let mut timing = String::from("id\twall_s\tcalls\n");
    for (t, w) in &results {
        timing += &format!("{}\t{w:.6}\t{}\n", t.id, t.calls);
    }
    std::fs::write(dir.join("timing.txt"), timing)?;
    let dataset = match inputs.parent().map(|d| d.join("manifest.json")) {
        Some(m) if m.exists() => sha256_file(&m)?,
        _ => String::new(),
    };
    let mut ins = vec![inputs.display().to_string()];
    ins.push(checkpoint.map(|p| p.display().to_string()).unwrap_or_else(|| "oracle".into()));
    write_manifest(&dir, "generate", cfg, dataset, ins, &["tokens.jsonl", "motion.jsonl"])?;
    Ok(tokens)
}

/// A generated motion with no frames is scored as one rest-pose frame.
fn or_rest(m: MotionSequence) -> MotionSequence {
    if m.n_frames() == 0 {
        MotionSequence::zeros(1, m.d_s())
    } else {
        m
    }
}

/// Metrics for token streams and motions against references.
pub fn score(
    gen_tokens: &[TokenSequence],
    gen_motion: &[MotionSequence],
    ref_tokens: &[TokenSequence],
    ref_motion: &[MotionSequence],
    joint_dim: usize,
    exec: Exec,
) -> Result<MetricReport> {
    let (body, hands) = sibleu_parts(gen_tokens, ref_tokens)?;
    let n = gen_motion.len();
    if n != ref_motion.len() {
        return Err(Error::Data("generated and reference motion counts differ".into()));
    }
    let d_s = ref_motion.first().map(|m| m.d_s()).unwrap_or(3);
    let body_sel = JointSelection::part(d_s, Part::Body, joint_dim)?;
    let hand_sel = JointSelection::hands(d_s, joint_dim)?;
    let pairs: Vec<(MotionSequence, &MotionSequence)> = gen_motion.iter().cloned().map(or_rest).zip(ref_motion).collect();
    let d = exec.map(&pairs, |(g, r)| -> Result<(f64, f64)> { Ok((dtw_jpe(g, r, &body_sel)?, dtw_jpe(g, r, &hand_sel)?)) });
    let d: Vec<(f64, f64)> = d.into_iter().collect::<Result<_>>()?;
    let nn = n.max(1) as f64;
    Ok(MetricReport {
        sibleu_body: body,
        sibleu_hands: hands,
        dtw_body: d.iter().map(|x| x.0).sum::<f64>() / nn,
        dtw_hands: d.iter().map(|x| x.1).sum::<f64>() / nn,
        latency_s: 0.0,
        calls: 0.0,
    })
}

pub const REPORT_HEADER: &str = "# SiBLEU-hands is the mean of the left- and right-hand stream scores; corpus BLEU-4, no smoothing\n\
# DTW-JPE: path-averaged mean joint error, no spatial alignment";

/// `cmd_evaluate`: generated directory against a reference split.
pub fn cmd_evaluate(cfg: &RunConfig, generated: &Path, references: &Path, exec: Exec) -> Result<MetricReport> {
    let paths = RunPaths::new(cfg);
    let books = load_books(cfg)?;
    let gen_manifest = Manifest::load(&generated.join("manifest.json"))?;
    let ref_manifest = references
        .parent()
        .map(|d| d.join("manifest.json"))
        .ok_or_else(|| Error::Data("reference file has no directory".into()))?;
    let ref_hash = sha256_file(&ref_manifest).map_err(|_| Error::Data(format!("missing {}", ref_manifest.display())))?;
    if gen_manifest.dataset_hash != ref_hash {
        return Err(Error::Data("generated set does not trace back to the reference dataset".into()));
    }
    let toks: Vec<TokenRecord> = read_jsonl(&generated.join("tokens.jsonl"))?;
    let gmot: Vec<Record> = read_jsonl(&generated.join("motion.jsonl"))?;
    let refs: Vec<Record> = read_jsonl(references)?;
    if toks.len() != refs.len() || gmot.len() != refs.len() {
        return Err(Error::Data(format!("{} generated vs {} reference records", toks.len(), refs.len())));
    }
    for ((t, g), r) in toks.iter().zip(&gmot).zip(&refs) {
        if t.id != r.id || g.id != r.id {
            return Err(Error::Data(format!("id mismatch: generated {} vs reference {}", t.id, r.id)));
        }
    }
    let gen_tokens: Vec<TokenSequence> =
        toks.iter().map(|t| TokenSequence::new(t.text_tokens.clone(), t.sign.clone())).collect::<Result<_>>()?;
    let ref_motion = motions(&refs)?;
    let ref_tokens: Vec<TokenSequence> = refs
        .iter()
        .zip(&ref_motion)
        .map(|(r, m)| TokenSequence::new(r.text_tokens.clone(), tokenize(m, &books)?))
        .collect::<Result<_>>()?;
    let mut report = score(&gen_tokens, &motions(&gmot)?, &ref_tokens, &ref_motion, cfg.joint_dim, exec)?;
    let n = toks.len().max(1) as f64;
    report.calls = toks.iter().map(|t| t.calls).sum::<usize>() as f64 / n;
    if let Ok(timing) = std::fs::read_to_string(generated.join("timing.txt")) {
        let walls: Vec<f64> = timing.lines().skip(1).filter_map(|l| l.split('\t').nth(1)?.parse().ok()).collect();
        report.latency_s = walls.iter().sum::<f64>() / walls.len().max(1) as f64;
    }
    let dir = paths.stage("eval");
    create_dir(&dir)?;
    std::fs::write(dir.join("report.txt"), format!("{REPORT_HEADER}\n{}", report.to_table()))?;
    std::fs::write(dir.join("metrics.txt"), report.to_line(&cfg.hash()[..16]) + "\n")?;
    Ok(report)
}

/// Dev metrics used to compare fine-tuning runs: mean token loss on plain
/// fine-tuning states, and SiBLEU of generations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DevScores {
    pub l_tok: f64,
    pub sibleu_body: f64,
    pub sibleu_hands: f64,
}

impl DevScores {
    pub fn sibleu(&self) -> f64 {
        0.5 * (self.sibleu_body + self.sibleu_hands)
    }
}

pub fn dev_scores(cfg: &RunConfig, model: &TinyMdlm, books: &Codebooks, dev: &[Example], exec: Exec) -> Result<DevScores> {
    let obj = Objective::Finetune { variant: crate::schedule::Variant::Plain, alpha: cfg.alpha };
    let loss = evaluate_loss(model, books, dev, &obj, cfg.m, 4, rng::derive(cfg.seed, 3), exec)?;
    let texts: Vec<(String, Vec<u32>)> = dev.iter().enumerate().map(|(i, e)| (i.to_string(), e.tokens.text.clone())).collect();
    let gen = generate_all(|_| Ok(Borrowed(model)), &texts, cfg, exec)?;
    let hyp: Vec<TokenSequence> =
        gen.iter().map(|(t, _)| TokenSequence::new(t.text_tokens.clone(), t.sign.clone())).collect::<Result<_>>()?;
    let refs: Vec<TokenSequence> = dev.iter().map(|e| e.tokens.clone()).collect();
    let (b, h) = sibleu_parts(&hyp, &refs)?;
    Ok(DevScores { l_tok: loss.l_tok, sibleu_body: b, sibleu_hands: h })
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport> {
    let paths = RunPaths::new(cfg);
    let books = load_books(cfg)?;
    let v = vocab(cfg)?;
    let mdlm = TinyMdlm::new(model_config(cfg, false), v, &books, rng::derive(cfg.seed, 0x1417))?;
    let ar = TinyMdlm::new(model_config(cfg, true), v, &books, rng::derive(cfg.seed, 0x1418))?;
    let texts: Vec<Vec<u32>> = read_jsonl::<Record>(&paths.data("test.jsonl"))?.into_iter().take(5).map(|r| r.text_tokens).collect();
    let rep = bench_latency(&mdlm, &ar, &texts, cfg.m, cfg.k, cfg.bench_repeats, cfg.bench_warmup)?;
    let dir = paths.stage("bench");
    create_dir(&dir)?;
    std::fs::write(dir.join("report.txt"), rep.to_table())?;
    Ok(rep)
}

/// Printed summary of the exact order counts.
pub fn cmd_order_count(m: usize, k: usize) -> Result<String> {
    let plain = count_orders_plain(m, k)?;
    let utc = count_orders_utc(m, k)?;
    let (q, r) = order_ratio(&plain, &utc);
    let sci = |c: &OrderCount| {
        let (mant, e) = c.scientific();
        format!("{mant:.4}e{e}")
    };
    let ratio = OrderCount(q.clone());
    Ok(format!(
        "M = {m}, k = {k}\nplain = {plain}\nplain ~ {}\nutc = {utc}\nutc ~ {}\nratio = {q} remainder {r}\nratio ~ {} (10^{:.3})\n",
        sci(&plain),
        sci(&utc),
        sci(&ratio),
        plain.log10() - utc.log10(),
    ))
}
