//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xref_core::chart::{build_chart, exhaustive_single, PsppGraph, StructureScope};
use xref_core::encoder::EncoderConfig;
use xref_core::harness::commands::{
    cmd_pipeline, evaluate_re, evaluate_reader, gradcheck_suite, memprofile, train_cnn_on, train_reader_on,
};
use xref_core::harness::config::{ReaderVariant, RunConfig};
use xref_core::harness::re_corpus::gen_re_corpus;
use xref_core::harness::wikihop::{gen_wikihop, random_question, SyntheticKb};
use xref_core::metrics::{average_precision, pr_curve, precision_at_recall};
use xref_core::reader::{Reader, ReaderConfig};
use xref_core::relation::{build_sentence_sets, weak_label, Category};
use xref_core::trainer::{gradient_rel_err, naive_gradients, two_pass_gradients};
use xref_core::{ParamStore, Result};

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Result<Outcome>);

fn config(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&path, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn within(t: Duration, limit_s: u64) -> bool {
    t < Duration::from_secs(limit_s)
}

fn gradient_equivalence() -> Result<Outcome> {
    let cfg = ReaderConfig {
        encoder: EncoderConfig {
            num_layers: 2,
            model_dim: 32,
            num_heads: 4,
            ffn_dim: 64,
            max_positions: 64,
            vocab_size: 64,
            dropout_p: 0.0,
        },
        head_dim: 32,
    };
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let mut store = ParamStore::new();
        let reader = Reader::init(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(100 + i))?;
        let q = random_question(i, 2 + (i as usize % 7), 16, 4, 64);
        let (two_pass, _) = two_pass_gradients(&reader, &store, &q, None)?;
        let naive = naive_gradients(&reader, &store, &q, None)?;
        worst = worst.max(gradient_rel_err(&two_pass, &naive.grads));
    }
    let t = t0.elapsed();
    Ok(Outcome {
        pass: worst <= 1e-8 && within(t, 60),
        detail: format!("max rel err {worst:.2e} (<= 1e-8) over 20 questions, {:.1}s (< 60s)", t.as_secs_f64()),
    })
}

fn memory_constancy() -> Result<Outcome> {
    let cfg = RunConfig::default();
    let t0 = Instant::now();
    let p = memprofile(&cfg.reader, &[1, 2, 4, 8], cfg.memprofile.paragraph_len, 4, 0)?;
    let t = t0.elapsed();
    let (two_pass, naive) = p.ratios();
    Ok(Outcome {
        pass: two_pass <= 1.1 && naive >= 6.0 && within(t, 60),
        detail: format!(
            "peak(8)/peak(1) two-pass {two_pass:.4} (<= 1.1), naive {naive:.3} (>= 6), {:.1}s (< 60s)",
            t.as_secs_f64()
        ),
    })
}

fn finite_differences() -> Result<Outcome> {
    let t0 = Instant::now();
    let s = gradcheck_suite(0, 1e-5, 1e-4)?;
    let t = t0.elapsed();
    let (name, worst) = s
        .reports
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap_or_default();
    Ok(Outcome {
        pass: s.passed() && within(t, 120),
        detail: format!(
            "{} checks, worst {worst:.2e} ({name}) (< 1e-4), {:.1}s (< 120s)",
            s.reports.len(),
            t.as_secs_f64()
        ),
    })
}

fn ablation_ordering() -> Result<Outcome> {
    let mut cfg = config("ablation.toml");
    let t0 = Instant::now();
    let w = &cfg.wikihop;
    let kb = SyntheticKb::new(w.entities, w.relations);
    let questions = gen_wikihop(&kb, w, w.count, cfg.seed)?;
    let dev_n = (w.count as f64 * w.dev_fraction).round() as usize;
    let (train, dev) = questions.split_at(w.count - dev_n);
    let mut acc = Vec::new();
    for v in [ReaderVariant::Full, ReaderVariant::Independent, ReaderVariant::Oracle] {
        cfg.reader_train.variant = v;
        let (artifact, _) = train_reader_on(&cfg, train)?;
        acc.push(100.0 * evaluate_reader(&artifact, dev)?.accuracy);
    }
    let t = t0.elapsed();
    let (full, ind, oracle) = (acc[0], acc[1], acc[2]);
    Ok(Outcome {
        pass: oracle >= full && full >= ind && full - ind >= 5.0 && full >= 90.0 && within(t, 600),
        detail: format!(
            "train {} / dev {}: oracle {oracle:.2} >= full {full:.2} >= independent {ind:.2}, gap {:.2} (>= 5), {:.1}s (< 600s)",
            train.len(),
            dev.len(),
            full - ind,
            t.as_secs_f64()
        ),
    })
}

/// `(precision at recall 0.9, average precision, positive rate)` on held-out pairs.
fn relation_run(cfg: &RunConfig) -> Result<(Option<f64>, f64, f64)> {
    let corpus = gen_re_corpus(&cfg.re_corpus, cfg.seed)?;
    let sets = build_sentence_sets(&corpus.sentences, &corpus.lexicon)?;
    let labels = weak_label(&sets, &corpus.train_charts)?;
    let (artifact, _) = train_cnn_on(cfg, &corpus.sentences, &labels)?;
    let (_, curve, s) = evaluate_re(&artifact, &corpus.sentences, &corpus.lexicon, &corpus.test_charts)?;
    Ok((precision_at_recall(&curve, 0.9), average_precision(&curve), s.positive_rate))
}

fn relation_separability() -> Result<Outcome> {
    let mut cfg = config("separability.toml");
    let t0 = Instant::now();
    let (p90, _, _) = relation_run(&cfg)?;
    let t_signal = t0.elapsed();
    cfg.re_corpus.signal_rate = 0.0;
    let (_, ap, rate) = relation_run(&cfg)?;
    let p90v = p90.unwrap_or(0.0);
    Ok(Outcome {
        pass: p90v >= 0.95 && (ap - rate).abs() <= 0.1 && within(t_signal, 300),
        detail: format!(
            "signal 1.0: precision {p90v:.3} at recall >= 0.9 (>= 0.95), {:.1}s (< 300s); signal 0.0: AUC {ap:.3} vs positive rate {rate:.3} (within 0.1)",
            t_signal.as_secs_f64()
        ),
    })
}

fn pr_oracle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut points = 0;
    let mut mismatches = 0;
    for case in 0..100 {
        let n = rng.random_range(1..40);
        let mut names: Vec<String> = (0..n).map(|i| format!("p{case}_{i:02}")).collect();
        names.shuffle(&mut rng);
        let scored: Vec<(String, f64)> = names
            .iter()
            .map(|s| (s.clone(), rng.random_range(0..6) as f64 / 5.0))
            .collect();
        let mut positives: BTreeSet<String> = scored
            .iter()
            .filter(|_| rng.random_bool(0.4))
            .map(|p| p.0.clone())
            .collect();
        if positives.is_empty() {
            positives.insert(scored[0].0.clone());
        }
        let curve = pr_curve(&scored, &positives)?;
        if curve.len() != n {
            mismatches += 1;
        }
        // Rank of a pair = how many pairs beat it: higher score, or equal
        // score and a smaller name.
        let rank = |(name, s): &(String, f64)| {
            scored
                .iter()
                .filter(|(m, r)| r > s || (r == s && m < name))
                .count()
        };
        for p in &curve {
            let hits = scored
                .iter()
                .filter(|x| rank(x) < p.t && positives.contains(&x.0))
                .count();
            let precision = hits as f64 / p.t as f64;
            let recall = hits as f64 / positives.len() as f64;
            points += 1;
            if precision != p.precision || recall != p.recall {
                mismatches += 1;
            }
        }
    }
    Ok(Outcome {
        pass: mismatches == 0,
        detail: format!("100 label sets, {points} cut-offs, {mismatches} mismatches (exact)"),
    })
}

fn chart_oracle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut wrong = 0;
    let mut worst_cap = 0.0f64;
    for _ in 0..50 {
        let g = PsppGraph::random(&mut rng, 6);
        let props = g.of_category(Category::Property);
        let procs = g.of_category(Category::Process);
        let structs = g.of_category(Category::Structure);
        // Exhaustive: every (process, structure) pair, best by structure
        // capacity, then smaller structure name, then link probability, then
        // smaller process name.
        let mut best: Option<(f64, f64, String, String)> = None;
        for s in &structs {
            let up: f64 = procs.iter().map(|p| g.score(p, s).unwrap()).sum();
            let down: f64 = props.iter().map(|q| g.score(s, q).unwrap()).sum();
            let cs = up.min(down);
            for p in &procs {
                let cp = g.score(p, s)?;
                let cand = (cs, cp, s.to_string(), p.to_string());
                let better = match &best {
                    None => true,
                    Some(b) => cand
                        .0
                        .total_cmp(&b.0)
                        .then(b.2.cmp(&cand.2))
                        .then(cand.1.total_cmp(&b.1))
                        .then(b.3.cmp(&cand.3))
                        .is_gt(),
                };
                if better {
                    best = Some(cand);
                }
            }
        }
        let (_, _, bs, bp) = best.expect("non-empty graph");
        let chart = build_chart(&g, &props, 1, 1, StructureScope::Selected)?;
        let lib = exhaustive_single(&g, &props)?;
        if chart.structures[0].name != bs || chart.processes[0].name != bp || lib != (bp.clone(), bs.clone()) {
            wrong += 1;
        }
        for s in &structs {
            let direct = procs
                .iter()
                .map(|p| g.score(p, s).unwrap())
                .sum::<f64>()
                .min(props.iter().map(|q| g.score(s, q).unwrap()).sum());
            worst_cap = worst_cap.max((g.structure_capacity(s, &procs, &props)? - direct).abs());
        }
        for p in &procs {
            let direct: f64 = structs.iter().map(|s| g.score(p, s).unwrap()).sum();
            worst_cap = worst_cap.max((g.process_capacity(p, &structs)? - direct).abs());
        }
    }
    Ok(Outcome {
        pass: wrong == 0 && worst_cap <= 1e-12,
        detail: format!("50 graphs, {wrong} disagreements; capacity error {worst_cap:.1e} (<= 1e-12)"),
    })
}

fn files_below(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).expect("readable dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Result<Outcome> {
    let t0 = Instant::now();
    let dirs = [tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir")];
    for d in &dirs {
        let mut cfg = config("demo.toml");
        cfg.out_dir = d.path().to_path_buf();
        cmd_pipeline(&cfg, true)?;
    }
    let a = files_below(dirs[0].path());
    let b = files_below(dirs[1].path());
    let differing: Vec<String> = a
        .iter()
        .filter(|f| std::fs::read(dirs[0].path().join(f)).ok() != std::fs::read(dirs[1].path().join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    let key = ["reader/full.json", "re/cnn.json", "re/pr.csv", "reader/full_train.csv", "chart/chart.json"];
    let present = key.iter().all(|k| a.iter().any(|f| f == Path::new(k)));
    Ok(Outcome {
        pass: a == b && differing.is_empty() && present,
        detail: format!(
            "{} artifacts compared byte for byte, {} differ{}, {:.1}s",
            a.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) },
            t0.elapsed().as_secs_f64()
        ),
    })
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 gradient equivalence", gradient_equivalence),
        ("2 memory constancy", memory_constancy),
        ("3 finite-difference suite", finite_differences),
        ("4 ablation ordering", ablation_ordering),
        ("5 relation cnn separability", relation_separability),
        ("6 pr-curve oracle", pr_oracle),
        ("7 chart oracle", chart_oracle),
        ("8 determinism", determinism),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += !pass as usize;
        println!("[{}] criterion {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
