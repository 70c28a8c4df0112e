//! Synthetic multi-hop questions from a toy knowledge base.
//!
//! A question `(s, r_1&…&r_h, ?)` asks for the candidate `x` with a fact
//! `s r_i x` for every `i`. Fact `i` lives in bridging paragraph `i`.
//! Distractor `d_i` has every fact except the `i`-th (it appears there with
//! a spare relation), so hiding any bridging paragraph leaves at least two
//! consistent candidates.
//!
//! The first half of the KB relations can be asked about; the rest only
//! appear as background facts.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::WikihopConfig;
use super::formats::{QueryRecord, QuestionRecord, ENTITY_PREFIX};
use crate::error::{Error, Result};
use crate::reader::Question;

const RELATION_WORDS: [[&str; 2]; 12] = [
    ["born", "in"],
    ["member", "of"],
    ["located", "in"],
    ["capital", "of"],
    ["part", "of"],
    ["spouse", "of"],
    ["child", "of"],
    ["founded", "by"],
    ["owned", "by"],
    ["named", "after"],
    ["employer", "of"],
    ["rival", "of"],
];

const FILLER: [&[&str]; 6] = [
    &["the", "archive", "lists", "no", "further", "records", "."],
    &["little", "else", "is", "known", "."],
    &["the", "entry", "was", "revised", "twice", "."],
    &["several", "sources", "disagree", "on", "dates", "."],
    &["this", "page", "needs", "citations", "."],
    &["the", "region", "has", "a", "mild", "climate", "."],
];

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ren", "sa", "tu", "vo", "bel", "dor", "fi", "gan", "hu", "ja", "nel", "pri", "zo",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KbRelation {
    /// Template words joined with `_`.
    pub name: String,
    pub words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticKb {
    pub entities: Vec<String>,
    pub relations: Vec<KbRelation>,
}

/// A `(subject, relation, object)` triple.
pub type Fact = (String, String, String);

impl SyntheticKb {
    /// Pseudo-word entity names and two-word relation templates.
    pub fn new(entities: usize, relations: usize) -> Self {
        let entities = (0..entities)
            .map(|i| {
                let a = SYLLABLES[i % 16];
                let b = SYLLABLES[(i / 16) % 16];
                let c = SYLLABLES[(i / 256 + 7 * i) % 16];
                format!("{a}{b}{c}{}", i / 4096)
            })
            .collect();
        let relations = (0..relations)
            .map(|i| {
                let words: Vec<String> = match RELATION_WORDS.get(i) {
                    Some(w) => w.iter().map(|s| s.to_string()).collect(),
                    None => vec![format!("rel{i}"), "of".to_string()],
                };
                KbRelation {
                    name: words.join("_"),
                    words,
                }
            })
            .collect();
        Self { entities, relations }
    }

    /// Reads `subj w1 w2 obj .` sentences back into facts.
    pub fn parse_facts(&self, paragraph: &[String]) -> Vec<Fact> {
        paragraph
            .split(|w| w == ".")
            .filter_map(|s| {
                let (subj, rest) = s.split_first()?;
                let (obj, words) = rest.split_last()?;
                let rel = self.relations.iter().find(|r| r.words == words)?;
                Some((subj.clone(), rel.name.clone(), obj.clone()))
            })
            .collect()
    }
}

/// Candidates consistent with the visible paragraphs. A query relation with
/// no visible fact about the query entity constrains nothing.
pub fn solve(kb: &SyntheticKb, q: &QuestionRecord, visible: &[usize]) -> BTreeSet<String> {
    let facts: BTreeSet<Fact> = visible
        .iter()
        .flat_map(|&k| kb.parse_facts(&q.paragraphs[k]))
        .collect();
    let rels: Vec<&str> = q
        .query
        .relation
        .split('&')
        .filter(|r| facts.iter().any(|(s, fr, _)| *s == q.query.entity && fr == r))
        .collect();
    q.candidates
        .iter()
        .filter(|c| {
            rels.iter()
                .all(|r| facts.contains(&(q.query.entity.clone(), r.to_string(), (*c).clone())))
        })
        .cloned()
        .collect()
}

fn sentence(subj: &str, rel: &KbRelation, obj: &str) -> Vec<String> {
    let mut s = vec![subj.to_string()];
    s.extend(rel.words.iter().cloned());
    s.push(obj.to_string());
    s.push(".".to_string());
    s
}

fn paragraph<R: Rng>(mut sentences: Vec<Vec<String>>, filler: usize, rng: &mut R) -> Vec<String> {
    for _ in 0..filler {
        sentences.push(FILLER.choose(rng).expect("filler").iter().map(|s| s.to_string()).collect());
    }
    sentences.shuffle(rng);
    sentences.concat()
}

/// Indices of bridging paragraphs after shuffling, fact `i` in `bridges[i]`.
struct Generated {
    record: QuestionRecord,
    bridges: Vec<usize>,
}

fn one_question(kb: &SyntheticKb, cfg: &WikihopConfig, id: usize, rng: &mut ChaCha8Rng) -> Result<Generated> {
    let h = cfg.hops;
    let need_entities = h + 4;
    if kb.entities.len() < need_entities {
        return Err(Error::Generation(format!(
            "{h}-hop questions need {need_entities} entities, the KB has {}",
            kb.entities.len()
        )));
    }
    let (askable, background) = kb.relations.split_at(kb.relations.len().div_ceil(2));
    if askable.len() < h || background.is_empty() {
        return Err(Error::Generation(format!(
            "{h}-hop questions need {} relations, the KB has {}",
            2 * h,
            kb.relations.len()
        )));
    }
    let ents: Vec<&String> = kb.entities.choose_multiple(rng, need_entities).collect();
    let (s, a, n, s2) = (ents[0], ents[1], ents[2], ents[3]);
    let ds = &ents[4..];
    let query_rels: Vec<&KbRelation> = askable.choose_multiple(rng, h).collect();
    let spare: Vec<&KbRelation> = background.iter().collect();

    let mut paragraphs = Vec::new();
    for i in 0..h {
        let mut sents = vec![sentence(s, query_rels[i], a)];
        for (j, d) in ds.iter().enumerate() {
            let rel = if j == i { *spare.choose(rng).expect("spare") } else { query_rels[i] };
            sents.push(sentence(s, rel, d));
        }
        paragraphs.push(paragraph(sents, cfg.filler_sentences, rng));
    }
    for _ in 0..cfg.distractor_paragraphs {
        let mut sents = vec![
            sentence(s2, query_rels.choose(rng).expect("relation"), n),
            sentence(s, spare.choose(rng).expect("spare"), n),
        ];
        if rng.random_bool(cfg.hard_distractor_rate) {
            // A distractor gets its missing fact, but about another subject.
            let i = rng.random_range(0..h);
            sents.push(sentence(s2, query_rels[i], ds[i]));
        }
        paragraphs.push(paragraph(sents, cfg.filler_sentences, rng));
    }
    let mut order: Vec<usize> = (0..paragraphs.len()).collect();
    order.shuffle(rng);
    let bridges: Vec<usize> = (0..h).map(|i| order.iter().position(|&o| o == i).expect("perm")).collect();
    let paragraphs: Vec<Vec<String>> = order.iter().map(|&o| paragraphs[o].clone()).collect();

    let mut candidates: Vec<String> = std::iter::once(a).chain(ds.iter().copied()).chain([n]).cloned().collect();
    candidates.shuffle(rng);
    let query_relation = query_rels.iter().map(|r| r.name.as_str()).collect::<Vec<_>>().join("&");
    let record = QuestionRecord {
        id: format!("wh{id:05}"),
        query: QueryRecord {
            relation: query_relation,
            entity: s.clone(),
        },
        mentions: index_mentions(&paragraphs, ents.iter().map(|e| e.as_str())),
        paragraphs,
        candidates,
        answer: a.clone(),
    };
    let record = if cfg.anonymize { anonymize(&record, rng) } else { record };
    Ok(Generated { record, bridges })
}

/// Exact token matches of each entity id.
pub fn index_mentions<'a>(
    paragraphs: &[Vec<String>],
    entities: impl IntoIterator<Item = &'a str>,
) -> BTreeMap<String, Vec<(usize, usize)>> {
    let mut out = BTreeMap::new();
    for e in entities {
        let spots: Vec<(usize, usize)> = paragraphs
            .iter()
            .enumerate()
            .flat_map(|(k, p)| p.iter().enumerate().filter(|(_, w)| *w == e).map(move |(t, _)| (k, t)))
            .collect();
        if !spots.is_empty() {
            out.insert(e.to_string(), spots);
        }
    }
    out
}

/// Fresh `@entK` names for this question's entities.
fn anonymize<R: Rng>(q: &QuestionRecord, rng: &mut R) -> QuestionRecord {
    let ents: Vec<String> = q.entities().into_iter().map(String::from).collect();
    let mut ids: Vec<usize> = (0..ents.len()).collect();
    ids.shuffle(rng);
    let map: BTreeMap<&str, String> = ents
        .iter()
        .zip(ids)
        .map(|(e, i)| (e.as_str(), format!("{ENTITY_PREFIX}{i}")))
        .collect();
    let rename = |w: &String| map.get(w.as_str()).cloned().unwrap_or_else(|| w.clone());
    QuestionRecord {
        id: q.id.clone(),
        query: QueryRecord {
            relation: q.query.relation.clone(),
            entity: rename(&q.query.entity),
        },
        paragraphs: q.paragraphs.iter().map(|p| p.iter().map(rename).collect()).collect(),
        candidates: q.candidates.iter().map(rename).collect(),
        answer: rename(&q.answer),
        mentions: q.mentions.iter().map(|(e, v)| (rename(e), v.clone())).collect(),
    }
}

/// Checks uniqueness and the masking property with the solver.
fn verify(kb: &SyntheticKb, g: &Generated) -> Result<()> {
    let q = &g.record;
    let all: Vec<usize> = (0..q.paragraphs.len()).collect();
    let fail = |what: String| Err(Error::Generation(format!("question {}: {what}", q.id)));
    if solve(kb, q, &all) != BTreeSet::from([q.answer.clone()]) {
        return fail("answer is not uniquely derivable".into());
    }
    if g.bridges.len() == 1 {
        if solve(kb, q, &g.bridges) != BTreeSet::from([q.answer.clone()]) {
            return fail("single bridging paragraph does not determine the answer".into());
        }
    } else {
        for &b in &g.bridges {
            let rest: Vec<usize> = all.iter().copied().filter(|&k| k != b).collect();
            if solve(kb, q, &rest).len() < 2 {
                return fail(format!("masking paragraph {b} leaves the answer unambiguous"));
            }
        }
    }
    Ok(())
}

/// `count` questions; a pure function of `(kb, cfg, seed)`.
pub fn gen_wikihop(kb: &SyntheticKb, cfg: &WikihopConfig, count: usize, seed: u64) -> Result<Vec<QuestionRecord>> {
    if cfg.hops == 0 {
        return Err(Error::Generation("hops must be at least 1".into()));
    }
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let g = one_question(kb, cfg, i, &mut rng)?;
            verify(kb, &g)?;
            Ok(g.record)
        })
        .collect()
}

/// Bridging paragraph indices of a generated question, recovered from the
/// facts: paragraphs holding `s r_i answer`.
pub fn bridging_paragraphs(kb: &SyntheticKb, q: &QuestionRecord) -> Vec<usize> {
    let rels: BTreeSet<&str> = q.query.relation.split('&').collect();
    (0..q.paragraphs.len())
        .filter(|&k| {
            kb.parse_facts(&q.paragraphs[k])
                .iter()
                .any(|(s, r, o)| *s == q.query.entity && rels.contains(r.as_str()) && *o == q.answer)
        })
        .collect()
}

/// Random tokens with equal-length paragraphs; entity tokens are
/// `3..3+candidates+1`, filler the rest of the vocabulary.
pub fn random_question(seed: u64, paragraphs: usize, len: usize, candidates: usize, vocab_size: usize) -> Question {
    assert!(vocab_size > candidates + 5, "vocabulary too small for {candidates} candidates");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first_filler = 4 + candidates;
    let mut mentions: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    let mut paras = Vec::with_capacity(paragraphs);
    for k in 0..paragraphs {
        let mut p = Vec::with_capacity(len);
        for t in 0..len {
            if rng.random_bool(0.3) {
                let e = 3 + rng.random_range(0..=candidates);
                mentions.entry(format!("e{e}")).or_default().push((k, t));
                p.push(e);
            } else {
                p.push(rng.random_range(first_filler..vocab_size));
            }
        }
        paras.push(p);
    }
    let cands: Vec<String> = (4..4 + candidates).map(|e| format!("e{e}")).collect();
    Question {
        id: format!("rq{seed}"),
        query_relation: "r".into(),
        query_entity: "e3".into(),
        query_tokens: vec![first_filler, first_filler + 1, 3],
        paragraphs: paras,
        answer: cands[rng.random_range(0..candidates)].clone(),
        candidates: cands,
        mentions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(hops: usize) -> WikihopConfig {
        WikihopConfig {
            hops,
            anonymize: false,
            ..WikihopConfig::default()
        }
    }

    #[test]
    fn single_hop_is_answerable_from_one_paragraph() {
        let kb = SyntheticKb::new(30, 6);
        let qs = gen_wikihop(&kb, &cfg(1), 20, 1).unwrap();
        for q in &qs {
            let b = bridging_paragraphs(&kb, q);
            assert_eq!(b.len(), 1);
            assert_eq!(solve(&kb, q, &b), BTreeSet::from([q.answer.clone()]));
        }
    }

    #[test]
    fn two_hop_masking_is_ambiguous() {
        let kb = SyntheticKb::new(30, 6);
        for q in gen_wikihop(&kb, &cfg(2), 50, 2).unwrap() {
            let all: Vec<usize> = (0..q.paragraphs.len()).collect();
            assert_eq!(solve(&kb, &q, &all).len(), 1);
            let b = bridging_paragraphs(&kb, &q);
            assert_eq!(b.len(), 2);
            for masked in b {
                let rest: Vec<usize> = all.iter().copied().filter(|&k| k != masked).collect();
                let left = solve(&kb, &q, &rest);
                assert!(left.len() >= 2 && left.contains(&q.answer), "{left:?}");
            }
        }
    }

    #[test]
    fn small_kb_is_an_error() {
        let kb = SyntheticKb::new(5, 6);
        assert!(matches!(gen_wikihop(&kb, &cfg(2), 1, 0), Err(Error::Generation(_))));
        let kb = SyntheticKb::new(30, 2);
        assert!(matches!(gen_wikihop(&kb, &cfg(2), 1, 0), Err(Error::Generation(_))));
        assert!(gen_wikihop(&kb, &cfg(0), 1, 0).is_err());
    }

    #[test]
    fn anonymized_questions_validate_and_mentions_are_exact() {
        let kb = SyntheticKb::new(30, 6);
        let c = WikihopConfig {
            hops: 3,
            ..WikihopConfig::default()
        };
        for q in gen_wikihop(&kb, &c, 20, 3).unwrap() {
            for (e, spots) in &q.mentions {
                assert!(e.starts_with(ENTITY_PREFIX));
                for &(k, t) in spots {
                    assert_eq!(&q.paragraphs[k][t], e);
                }
            }
            assert!(q.mentions.contains_key(&q.answer));
            assert_eq!(bridging_paragraphs(&kb, &q).len(), 3);
        }
    }

    #[test]
    fn fixed_seed_is_bitwise_stable() {
        let kb = SyntheticKb::new(40, 8);
        let a = super::super::formats::to_jsonl(&gen_wikihop(&kb, &WikihopConfig::default(), 30, 9).unwrap());
        let b = super::super::formats::to_jsonl(&gen_wikihop(&kb, &WikihopConfig::default(), 30, 9).unwrap());
        assert_eq!(a, b);
        let c = super::super::formats::to_jsonl(&gen_wikihop(&kb, &WikihopConfig::default(), 30, 10).unwrap());
        assert_ne!(a, c);
    }

    proptest! {
        #[test]
        fn generated_questions_are_valid(seed in 0u64..1000, hops in 1usize..4) {
            let kb = SyntheticKb::new(20, 6);
            let c = WikihopConfig { hops, hard_distractor_rate: 0.5, ..WikihopConfig::default() };
            for q in gen_wikihop(&kb, &c, 3, seed).unwrap() {
                let v = super::super::formats::build_vocab([&q], 16);
                prop_assert!(q.to_question(&v).is_ok());
                prop_assert_eq!(q.candidates.len(), hops + 2);
            }
        }
    }
}
