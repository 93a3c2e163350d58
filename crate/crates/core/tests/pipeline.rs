use std::path::Path;

use maskdiff::checkpoint::load_model;
use maskdiff::config::RunConfig;
use maskdiff::dataset::{read_jsonl, Manifest, Record, TokenRecord};
use maskdiff::exec::Exec;
use maskdiff::generate::generate;
use maskdiff::pipeline::{self, RunPaths};
use maskdiff::schedule::build_schedule;

fn small(out: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("n", "30"),
        ("pretrain_n", "18"),
        ("lexicon_size", "12"),
        ("n_codes", "8"),
        ("code_dim", "4"),
        ("kmeans_iters", "8"),
        ("d_model", "8"),
        ("attn_dim", "4"),
        ("max_len", "32"),
        ("m", "20"),
        ("min_signs", "1"),
        ("max_signs", "3"),
        ("epochs", "2"),
        ("pretrain_epochs", "2"),
        ("batch_size", "4"),
    ] {
        c.set(k, v).unwrap();
    }
    c.out = out.to_path_buf();
    c
}

/// Every stage on disk, returning the run directory.
fn full_run(cfg: &RunConfig, exec: Exec) -> std::path::PathBuf {
    pipeline::gen_data(cfg, exec).unwrap();
    pipeline::fit_tokenizer(cfg, exec).unwrap();
    let (pre, _) = pipeline::cmd_pretrain(cfg, exec).unwrap();
    let (ft, _) = pipeline::cmd_finetune(cfg, Some(&pre), "finetune", exec).unwrap();
    let run = RunPaths::new(cfg).root;
    let test = run.join("data/test.jsonl");
    pipeline::cmd_generate(cfg, Some(&ft), &test, "generate", exec).unwrap();
    pipeline::cmd_evaluate(cfg, &run.join("generate"), &test, exec).unwrap();
    run
}

#[test]
fn execution_mode_does_not_change_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = full_run(&small(a.path()), Exec::Sequential);
    let rb = full_run(&small(b.path()), Exec::Parallel);
    for f in [
        "data/train.jsonl",
        "data/pretrain.jsonl",
        "tokenizer/codebooks.mdsc",
        "pretrain/model.ckpt",
        "finetune/model.ckpt",
        "generate/tokens.jsonl",
        "generate/motion.jsonl",
    ] {
        assert_eq!(std::fs::read(ra.join(f)).unwrap(), std::fs::read(rb.join(f)).unwrap(), "{f}");
    }
    let ma = std::fs::read_to_string(ra.join("eval/metrics.txt")).unwrap();
    let mb = std::fs::read_to_string(rb.join("eval/metrics.txt")).unwrap();
    // latency differs; every other column must agree
    let cols = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let (ca, cb) = (cols(&ma), cols(&mb));
    assert_eq!(ca.len(), cb.len());
    assert_eq!(&ca[..5], &cb[..5]);
}

#[test]
fn manifests_chain_back_to_the_data() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small(d.path());
    let run = full_run(&cfg, Exec::default());
    let data_hash = maskdiff::dataset::sha256_file(&run.join("data/manifest.json")).unwrap();
    for stage in ["tokenizer", "pretrain", "finetune", "generate"] {
        let m = Manifest::load(&run.join(stage).join("manifest.json")).unwrap();
        assert_eq!(m.dataset_hash, data_hash, "{stage}");
        assert_eq!(m.config_hash, cfg.hash());
        for (file, hash) in &m.files {
            assert_eq!(&maskdiff::dataset::sha256_file(&run.join(stage).join(file)).unwrap(), hash);
        }
    }
}

#[test]
fn stored_generations_replay_from_the_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small(d.path());
    let run = full_run(&cfg, Exec::default());
    let books = pipeline::load_books(&cfg).unwrap();
    let mut model = load_model(&run.join("finetune/model.ckpt"), &books).unwrap();
    model.embed_mode = cfg.embed_mode;
    let toks: Vec<TokenRecord> = read_jsonl(&run.join("generate/tokens.jsonl")).unwrap();
    let refs: Vec<Record> = read_jsonl(&run.join("data/test.jsonl")).unwrap();
    assert_eq!(toks.len(), refs.len());
    let sched = build_schedule(cfg.m, cfg.k, cfg.variant).unwrap();
    for (i, t) in toks.iter().enumerate() {
        let (out, stats) = generate(&model, &t.text_tokens, &sched, maskdiff::rng::derive(cfg.seed, i as u64)).unwrap();
        assert_eq!(out.sign, t.sign);
        assert_eq!(stats.calls, t.calls);
    }
}

#[test]
fn in_memory_corpus_matches_the_files() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small(d.path());
    pipeline::gen_data(&cfg, Exec::default()).unwrap();
    pipeline::fit_tokenizer(&cfg, Exec::default()).unwrap();
    let corpus = pipeline::build_corpus(&cfg, Exec::default()).unwrap();
    let books = pipeline::load_books(&cfg).unwrap();
    let (_, train) = pipeline::load_examples(&RunPaths::new(&cfg).data("train.jsonl"), &books, cfg.m).unwrap();
    assert_eq!(train.len(), corpus.train.len());
    for (a, b) in train.iter().zip(&corpus.train) {
        assert_eq!(a.tokens, b.tokens);
    }
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small(d.path());
    pipeline::gen_data(&cfg, Exec::default()).unwrap();
    pipeline::fit_tokenizer(&cfg, Exec::default()).unwrap();
    let (pre, _) = pipeline::cmd_pretrain(&cfg, Exec::default()).unwrap();
    let mut wider = cfg.clone();
    wider.d_model = 12;
    let books = pipeline::load_books(&cfg).unwrap();
    let err = pipeline::finetune_init(&wider, &books, Some(&pre)).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
