//! Synthetic materials corpus for distant supervision.
//!
//! Every Process–Structure and Structure–Property pair gets a batch of
//! sentences mentioning exactly that pair. Sentences of a positive pair carry
//! a trigger phrase with probability `signal_rate`; everything else uses
//! neutral templates.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ReCorpusConfig;
use crate::error::Result;
use crate::relation::{canonicalize, Category, ChartEdge, EntityLexicon, TrainingChart};

const PROCESSES: [&str; 12] = [
    "annealing",
    "quenching",
    "tempering",
    "hot rolling",
    "forging",
    "aging",
    "sintering",
    "casting",
    "welding",
    "extrusion",
    "cold drawing",
    "nitriding",
];

const STRUCTURES: [&str; 14] = [
    "grain size",
    "martensite",
    "ferrite",
    "precipitate",
    "dislocation density",
    "texture",
    "porosity",
    "austenite",
    "bainite",
    "carbide",
    "lath width",
    "twin boundary",
    "inclusion",
    "pearlite",
];

const PROPERTIES: [&str; 10] = [
    "toughness",
    "creep strength",
    "hardness",
    "ductility",
    "yield strength",
    "fatigue life",
    "conductivity",
    "corrosion resistance",
    "wear resistance",
    "elongation",
];

/// `{a}` and `{b}` are the two mentions.
const TRIGGER: [&str; 6] = [
    "{a} markedly increases the {b} observed",
    "{a} directly controls {b} in these alloys",
    "increasing {a} strongly promotes {b}",
    "{b} is governed by {a} according to the results",
    "{a} was found to refine {b} considerably",
    "a clear dependence of {b} on {a} was established",
];

const NEUTRAL: [&str; 6] = [
    "{a} and {b} were both reported in this study",
    "the samples list {a} together with {b}",
    "{b} values are tabulated next to {a} below",
    "both {a} and {b} appear in the appendix",
    "measurements of {b} and {a} were collected separately",
    "the dataset includes {a} alongside {b}",
];

const PREFIX: [&str; 5] = ["", "in addition ,", "for the steel ,", "as shown ,", "notably ,"];

#[derive(Clone, Debug, PartialEq)]
pub struct ReCorpus {
    pub lexicon: EntityLexicon,
    pub sentences: Vec<Vec<String>>,
    pub train_charts: Vec<TrainingChart>,
    pub test_charts: Vec<TrainingChart>,
}

fn names(pool: &[&str], count: usize) -> Vec<String> {
    (0..count)
        .map(|i| match pool.get(i) {
            Some(n) => n.to_string(),
            None => format!("{} {}", pool[i % pool.len()], i / pool.len() + 1),
        })
        .collect()
}

fn render<R: Rng>(template: &str, a: &str, b: &str, rng: &mut R) -> Vec<String> {
    let body = template.replace("{a}", a).replace("{b}", b);
    let prefix = PREFIX.choose(rng).expect("prefix");
    format!("{prefix} {body} .")
        .split_whitespace()
        .map(str::to_lowercase)
        .collect()
}

/// Lexicon, corpus and charts as a pure function of `(cfg, seed)`.
pub fn gen_re_corpus(cfg: &ReCorpusConfig, seed: u64) -> Result<ReCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let procs = names(&PROCESSES, cfg.processes);
    let structs = names(&STRUCTURES, cfg.structures);
    let props = names(&PROPERTIES, cfg.properties);
    let mut lexicon = EntityLexicon::new();
    for (group, cat) in [
        (&procs, Category::Process),
        (&structs, Category::Structure),
        (&props, Category::Property),
    ] {
        for n in group {
            lexicon.insert(n, cat)?;
        }
    }

    let mut pairs: Vec<(&String, &String)> = Vec::new();
    for s in &structs {
        for p in &procs {
            pairs.push((p, s));
        }
        for q in &props {
            pairs.push((s, q));
        }
    }

    let charts = cfg.train_charts + cfg.test_charts;
    let mut edges: Vec<Vec<ChartEdge>> = vec![Vec::new(); charts];
    let mut sentences = Vec::new();
    let mut charted: Vec<usize> = (0..pairs.len()).filter(|_| rng.random_bool(cfg.charted_fraction)).collect();
    charted.shuffle(&mut rng);
    let mut home = vec![None; pairs.len()];
    for (slot, &i) in charted.iter().enumerate() {
        home[i] = Some(slot % charts);
    }
    for (i, (a, b)) in pairs.iter().enumerate() {
        let positive = rng.random_bool(cfg.positive_rate);
        if let Some(c) = home[i] {
            edges[c].push(ChartEdge {
                pair: lexicon.pair(&canonicalize(a), &canonicalize(b))?,
                label: positive,
            });
        }
        let mean = cfg.sentences_per_pair.max(1);
        let count = rng.random_range(mean.div_ceil(2)..=mean + mean / 2);
        for _ in 0..count {
            let pool = if positive && rng.random_bool(cfg.signal_rate) { &TRIGGER } else { &NEUTRAL };
            let t = pool.choose(&mut rng).expect("template");
            sentences.push(render(t, a, b, &mut rng));
        }
    }
    sentences.shuffle(&mut rng);

    let mut train_charts = Vec::new();
    let mut test_charts = Vec::new();
    for (c, e) in edges.into_iter().enumerate() {
        if c < cfg.train_charts {
            train_charts.push(TrainingChart {
                name: format!("train-{c:02}"),
                edges: e,
            });
        } else {
            test_charts.push(TrainingChart {
                name: format!("test-{:02}", c - cfg.train_charts),
                edges: e,
            });
        }
    }
    Ok(ReCorpus {
        lexicon,
        sentences,
        train_charts,
        test_charts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relation::{build_sentence_sets, weak_label};
    use std::collections::BTreeSet;
    use std::path::Path;

    fn small() -> ReCorpusConfig {
        ReCorpusConfig {
            processes: 3,
            structures: 4,
            properties: 2,
            sentences_per_pair: 10,
            ..ReCorpusConfig::default()
        }
    }

    #[test]
    fn every_sentence_mentions_one_pair() {
        let c = gen_re_corpus(&small(), 1).unwrap();
        let sets = build_sentence_sets(&c.sentences, &c.lexicon).unwrap();
        assert_eq!(sets.len(), 3 * 4 + 4 * 2);
        let total: usize = sets.values().map(Vec::len).sum();
        assert_eq!(total, c.sentences.len());
        let mean = total as f64 / sets.len() as f64;
        assert!((7.0..=13.0).contains(&mean), "{mean}");
    }

    #[test]
    fn charts_parse_and_label() {
        let c = gen_re_corpus(&small(), 2).unwrap();
        let mut seen = BTreeSet::new();
        for ch in c.train_charts.iter().chain(&c.test_charts) {
            let back = TrainingChart::parse_tsv(&ch.name, &ch.to_tsv(), Path::new("c.tsv"), &c.lexicon).unwrap();
            assert_eq!(&back, ch);
            for e in &ch.edges {
                assert!(seen.insert(e.pair.clone()), "pair in two charts");
            }
        }
        let sets = build_sentence_sets(&c.sentences, &c.lexicon).unwrap();
        let wl = weak_label(&sets, &c.train_charts).unwrap();
        assert!(wl.labeled_sentences() > 0);
        assert!(wl.missing.is_empty());
    }

    #[test]
    fn full_signal_is_separable() {
        let c = gen_re_corpus(&small(), 3).unwrap();
        let sets = build_sentence_sets(&c.sentences, &c.lexicon).unwrap();
        let trigger_words = ["increases", "controls", "promotes", "governed", "refine", "dependence"];
        for ch in c.train_charts.iter().chain(&c.test_charts) {
            for e in &ch.edges {
                for r in &sets[&e.pair] {
                    let has = c.sentences[r.sentence].iter().any(|w| trigger_words.contains(&w.as_str()));
                    assert_eq!(has, e.label);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_names_include_demo_properties() {
        let a = gen_re_corpus(&ReCorpusConfig::default(), 5).unwrap();
        let b = gen_re_corpus(&ReCorpusConfig::default(), 5).unwrap();
        assert_eq!(a, b);
        assert!(a.lexicon.category("creep_strength").is_some());
        assert!(a.lexicon.category("toughness").is_some());
        let big = names(&PROPERTIES, 12);
        assert_eq!(big[10], "toughness 2");
    }
}
