//! Sequential vs. rayon execution of the data-parallel loops.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use maskdiff::exec::Exec;
use maskdiff::metrics::{dtw_jpe, JointSelection};
use maskdiff::model::{ModelConfig, TinyMdlm};
use maskdiff::schedule::Variant;
use maskdiff::seq::{Part, VocabSpec};
use maskdiff::tokenizer::{fit_codebooks, gen_synthetic_pairs, CodebookConfig, MotionConfig};
use maskdiff::train::{evaluate_loss, Example, Objective};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench(c: &mut Criterion) {
    let mc = MotionConfig { lexicon_size: 20, max_frames: 4 * 32, ..Default::default() };
    let pairs = gen_synthetic_pairs(48, 7, &mc).unwrap();
    let motions: Vec<_> = pairs.iter().map(|p| p.motion.clone()).collect();
    let cb = CodebookConfig { n_codes: 16, code_dim: 8, iters: 10, seed: 1 };
    let (books, _) = fit_codebooks(&motions, &cb, Exec::Sequential).unwrap();

    let mut g = c.benchmark_group("codebook_fit");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| fit_codebooks(black_box(&motions), &cb, exec).unwrap())
        });
    }
    g.finish();

    let vocab = VocabSpec::new(20, 16).unwrap();
    let cfg = ModelConfig { d_model: 32, max_len: 64, ..Default::default() };
    let model = TinyMdlm::new(cfg, vocab, &books, 3).unwrap();
    let data: Vec<Example> = pairs.iter().map(|p| Example::from_motion(&p.text, &p.motion, &books).unwrap()).collect();
    let obj = Objective::Finetune { variant: Variant::Utc, alpha: 0.5 };
    let mut g = c.benchmark_group("batch_gradients");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_loss(&model, &books, black_box(&data), &obj, 32, 1, 5, exec).unwrap())
        });
    }
    g.finish();

    let sel = JointSelection::part(mc.d_s, Part::Body, 2).unwrap();
    let refs: Vec<_> = motions.iter().rev().cloned().collect();
    let jobs: Vec<_> = motions.iter().zip(&refs).collect();
    let mut g = c.benchmark_group("dtw_eval");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map(black_box(&jobs), |(a, r)| dtw_jpe(a, r, &sel).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
