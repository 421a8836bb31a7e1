use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dynprompt_core::corpus::{tokens_from, Label, LabeledSentence, Split};
use dynprompt_core::eval::{bootstrap_ci, Counts};
use dynprompt_core::exec::Execution;
use dynprompt_core::retrieval::{EngineKind, FallbackEmbedder, Index};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn corpus(n: usize) -> Vec<LabeledSentence> {
    let words = [
        "pain",
        "withdrawal",
        "rehab",
        "jail",
        "the",
        "was",
        "my",
        "job",
        "lost",
        "detox",
        "and",
        ".",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|i| {
            let toks: Vec<&str> = (0..rng.gen_range(5..25))
                .map(|_| words[rng.gen_range(0..words.len())])
                .collect();
            LabeledSentence::new(
                format!("s{i:05}"),
                Split::Train,
                &toks,
                vec![Label::Outside; toks.len()],
            )
        })
        .collect()
}

fn bootstrap(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let counts: Vec<Counts> = (0..2000)
        .map(|_| Counts {
            tp: rng.gen_range(0..4),
            fp: rng.gen_range(0..3),
            fn_: rng.gen_range(0..3),
        })
        .collect();
    let mut g = c.benchmark_group("bootstrap_ci");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new(name, counts.len()), |b| {
            b.iter(|| bootstrap_ci(black_box(&counts), 1000, 42, 0.95, exec).unwrap())
        });
    }
    g.finish();
}

fn retrieval(c: &mut Criterion) {
    let train = corpus(3000);
    let query = tokens_from(&["withdrawal", "was", "brutal", "after", "rehab"]);
    let mut g = c.benchmark_group("retrieval");
    g.sample_size(20);
    for kind in [EngineKind::Tfidf, EngineKind::LateInteraction] {
        for (name, exec) in MODES {
            g.bench_function(BenchmarkId::new(format!("build_{kind}"), name), |b| {
                b.iter(|| Index::build(black_box(&train), kind, Some(&FallbackEmbedder), exec).unwrap())
            });
            let idx = Index::build(&train, kind, Some(&FallbackEmbedder), exec).unwrap();
            g.bench_function(BenchmarkId::new(format!("retrieve_{kind}"), name), |b| {
                b.iter(|| {
                    idx.retrieve_tokens(black_box(&query), 20, Some(&FallbackEmbedder), exec)
                        .unwrap()
                })
            });
        }
    }
    g.finish();
}

criterion_group!(benches, bootstrap, retrieval);
criterion_main!(benches);
