//! PSPP graph completion and greedy chart extraction.
//!
//! Structures are chosen first by
//! `C(s) = min(Σ_{p∈PRC} P(p,s), Σ_{q∈PRP′} P(s,q))`, then processes by
//! `C(p) = Σ_{s∈STR′} P(p,s)`. Ties go to the lexicographically smaller name.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relation::{Category, EntityLexicon, PairKey};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredPair {
    pub a: String,
    pub b: String,
    pub probability: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub representative: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    entities: BTreeMap<String, Category>,
    scores: Vec<ScoredPair>,
}

/// Entities with categories and relation probabilities on
/// Process–Structure and Structure–Property pairs. Unscored pairs count as 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "GraphFile", try_from = "GraphFile")]
pub struct PsppGraph {
    entities: BTreeMap<String, Category>,
    scores: BTreeMap<PairKey, (f64, Option<String>)>,
}

impl From<PsppGraph> for GraphFile {
    fn from(g: PsppGraph) -> Self {
        GraphFile {
            entities: g.entities,
            scores: g
                .scores
                .into_iter()
                .map(|(k, (p, r))| ScoredPair {
                    a: k.0,
                    b: k.1,
                    probability: p,
                    representative: r,
                })
                .collect(),
        }
    }
}

impl TryFrom<GraphFile> for PsppGraph {
    type Error = Error;

    fn try_from(f: GraphFile) -> Result<Self> {
        let mut g = PsppGraph {
            entities: f.entities,
            scores: BTreeMap::new(),
        };
        for s in f.scores {
            g.set_score(&s.a, &s.b, s.probability, s.representative)?;
        }
        Ok(g)
    }
}

impl PsppGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_lexicon(lexicon: &EntityLexicon) -> Self {
        Self {
            entities: lexicon.iter().map(|(n, c)| (n.to_string(), c)).collect(),
            scores: BTreeMap::new(),
        }
    }

    pub fn add_entity(&mut self, name: &str, category: Category) -> Result<()> {
        match self.entities.insert(name.to_string(), category) {
            Some(old) if old != category => Err(Error::contract(format!("{name} is both {old} and {category}"))),
            _ => Ok(()),
        }
    }

    pub fn category(&self, name: &str) -> Result<Category> {
        self.entities
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown entity {name}")))
    }

    /// Names of one category in ascending order.
    pub fn of_category(&self, category: Category) -> Vec<&str> {
        self.entities
            .iter()
            .filter(|(_, &c)| c == category)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    fn key(&self, a: &str, b: &str) -> Result<PairKey> {
        let (ca, cb) = (self.category(a)?, self.category(b)?);
        let ((c0, n0), (c1, n1)) = if (ca, a) <= (cb, b) { ((ca, a), (cb, b)) } else { ((cb, b), (ca, a)) };
        match (c0, c1) {
            (Category::Process, Category::Structure) | (Category::Structure, Category::Property) => {
                Ok(PairKey(n0.to_string(), n1.to_string()))
            }
            _ => Err(Error::contract(format!("no {c0}-{c1} relation between {n0} and {n1}"))),
        }
    }

    pub fn set_score(&mut self, a: &str, b: &str, probability: f64, representative: Option<String>) -> Result<()> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::Domain {
                op: "set_score",
                detail: format!("probability {probability} for {a}|{b}"),
            });
        }
        let k = self.key(a, b)?;
        self.scores.insert(k, (probability, representative));
        Ok(())
    }

    /// `P(True | a, b)`, order-insensitive; 0 when unscored.
    pub fn score(&self, a: &str, b: &str) -> Result<f64> {
        let k = self.key(a, b)?;
        Ok(self.scores.get(&k).map_or(0.0, |s| s.0))
    }

    pub fn representative(&self, a: &str, b: &str) -> Option<&str> {
        let k = self.key(a, b).ok()?;
        self.scores.get(&k).and_then(|s| s.1.as_deref())
    }

    pub fn is_scored(&self, a: &str, b: &str) -> bool {
        self.key(a, b).is_ok_and(|k| self.scores.contains_key(&k))
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn structure_capacity<S: AsRef<str>>(&self, e: &str, processes: &[S], properties: &[S]) -> Result<f64> {
        expect(self, e, Category::Structure)?;
        let mut proc_arm = 0.0;
        for p in processes {
            proc_arm += self.score(p.as_ref(), e)?;
        }
        let mut prop_arm = 0.0;
        for q in properties {
            prop_arm += self.score(e, q.as_ref())?;
        }
        Ok(proc_arm.min(prop_arm))
    }

    pub fn process_capacity<S: AsRef<str>>(&self, e: &str, structures: &[S]) -> Result<f64> {
        expect(self, e, Category::Process)?;
        let mut sum = 0.0;
        for s in structures {
            sum += self.score(e, s.as_ref())?;
        }
        Ok(sum)
    }

    /// Random graph with at least one entity of each category and scores
    /// on a coarse grid so that ties occur.
    pub fn random<R: Rng>(rng: &mut R, nodes: usize) -> Self {
        assert!(nodes >= 3, "need one node per category");
        let cats = [Category::Process, Category::Structure, Category::Property];
        let mut g = Self::new();
        for i in 0..nodes {
            let c = if i < 3 { cats[i] } else { cats[rng.random_range(0..3)] };
            g.add_entity(&format!("{}{i}", &c.to_string()[..2]), c).expect("fresh name");
        }
        let names: Vec<(String, Category)> = g.entities.iter().map(|(n, &c)| (n.clone(), c)).collect();
        for (a, ca) in &names {
            for (b, cb) in &names {
                let linked = matches!(
                    (ca, cb),
                    (Category::Process, Category::Structure) | (Category::Structure, Category::Property)
                );
                if linked && rng.random_bool(0.8) {
                    let p = rng.random_range(0..=8) as f64 / 8.0;
                    g.set_score(a, b, p, None).expect("valid pair");
                }
            }
        }
        g
    }
}

fn expect(g: &PsppGraph, e: &str, want: Category) -> Result<()> {
    match g.category(e)? {
        c if c == want => Ok(()),
        c => Err(Error::contract(format!("{e} is a {c}, expected a {want}"))),
    }
}

/// Which structures feed process capacities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureScope {
    #[default]
    Selected,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartNode {
    pub name: String,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartLink {
    pub source: String,
    pub target: String,
    pub probability: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub representative: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Chart {
    pub properties: Vec<ChartNode>,
    /// In selection order.
    pub structures: Vec<ChartNode>,
    pub processes: Vec<ChartNode>,
    pub links: Vec<ChartLink>,
    pub requested_processes: usize,
    pub requested_structures: usize,
    pub scope: StructureScope,
    /// Fewer entities were available than requested.
    pub shortfall: bool,
}

fn top_k(mut scored: Vec<(String, f64)>, k: usize) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

pub fn build_chart<S: AsRef<str>>(
    graph: &PsppGraph,
    properties: &[S],
    n: usize,
    m: usize,
    scope: StructureScope,
) -> Result<Chart> {
    if n == 0 || m == 0 {
        return Err(Error::contract(format!("chart size n={n}, m={m} must be positive")));
    }
    if properties.is_empty() {
        return Err(Error::contract("no target properties"));
    }
    let props: Vec<&str> = properties.iter().map(|p| p.as_ref()).collect();
    for p in &props {
        expect(graph, p, Category::Property)?;
    }
    let all_proc = graph.of_category(Category::Process);
    let all_struct = graph.of_category(Category::Structure);

    let structures = top_k(
        all_struct
            .iter()
            .map(|s| Ok((s.to_string(), graph.structure_capacity(s, &all_proc, &props)?)))
            .collect::<Result<_>>()?,
        m,
    );
    let basis: Vec<&str> = match scope {
        StructureScope::Selected => structures.iter().map(|s| s.0.as_str()).collect(),
        StructureScope::All => all_struct.clone(),
    };
    let processes = top_k(
        all_proc
            .iter()
            .map(|p| Ok((p.to_string(), graph.process_capacity(p, &basis)?)))
            .collect::<Result<_>>()?,
        n,
    );

    let mut links = Vec::new();
    let mut link = |a: &str, b: &str| {
        if graph.is_scored(a, b) {
            links.push(ChartLink {
                source: a.to_string(),
                target: b.to_string(),
                probability: graph.score(a, b).expect("scored pair"),
                representative: graph.representative(a, b).map(String::from),
            });
        }
    };
    for (p, _) in &processes {
        for (s, _) in &structures {
            link(p, s);
        }
    }
    for (s, _) in &structures {
        for q in &props {
            link(s, q);
        }
    }

    let node = |cat: Category| move |(name, cap): (String, f64)| ChartNode {
        name,
        category: cat,
        capacity: Some(cap),
    };
    Ok(Chart {
        shortfall: structures.len() < m || processes.len() < n,
        properties: props
            .iter()
            .map(|q| ChartNode {
                name: q.to_string(),
                category: Category::Property,
                capacity: None,
            })
            .collect(),
        structures: structures.into_iter().map(node(Category::Structure)).collect(),
        processes: processes.into_iter().map(node(Category::Process)).collect(),
        links,
        requested_processes: n,
        requested_structures: m,
        scope,
    })
}

/// Exhaustive n = m = 1 choice: every (process, structure) pair ranked by
/// structure capacity, then structure name, then the process's score on
/// that structure, then process name.
pub fn exhaustive_single<S: AsRef<str>>(graph: &PsppGraph, properties: &[S]) -> Result<(String, String)> {
    let props: Vec<&str> = properties.iter().map(|p| p.as_ref()).collect();
    let procs = graph.of_category(Category::Process);
    let mut best: Option<(f64, f64, &str, &str)> = None;
    for s in graph.of_category(Category::Structure) {
        let cs = graph.structure_capacity(s, &procs, &props)?;
        for &p in &procs {
            let cp = graph.score(p, s)?;
            let better = match best {
                None => true,
                Some((bs, bp, bsn, bpn)) => {
                    cs > bs || (cs == bs && (s < bsn || (s == bsn && (cp > bp || (cp == bp && p < bpn)))))
                }
            };
            if better {
                best = Some((cs, cp, s, p));
            }
        }
    }
    best.map(|(_, _, s, p)| (p.to_string(), s.to_string()))
        .ok_or_else(|| Error::contract("graph has no process or no structure"))
}

impl Chart {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::contract(format!("chart serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            file: "chart.json".into(),
            line: e.line(),
            field: None,
            message: e.to_string(),
        })
    }

    /// Three ranked columns: processes, structures, properties.
    pub fn to_dot(&self) -> String {
        let esc = |s: &str| s.replace('\\', "\\\\").replace('"', "\\\"");
        let quote = |s: &str| format!("\"{}\"", esc(s));
        let mut out = String::from("digraph pspp {\n  rankdir=LR;\n  node [shape=box];\n");
        for (col, nodes) in [
            ("processes", &self.processes),
            ("structures", &self.structures),
            ("properties", &self.properties),
        ] {
            let _ = writeln!(out, "  subgraph {col} {{\n    rank=same;");
            for n in nodes {
                // `\n` is a DOT line break, so the label is escaped piecewise.
                let label = match n.capacity {
                    Some(c) => format!("{}\\n{c:.3}", esc(&n.name)),
                    None => esc(&n.name),
                };
                let _ = writeln!(out, "    {} [label=\"{label}\"];", quote(&n.name));
            }
            out.push_str("  }\n");
        }
        for l in &self.links {
            let _ = writeln!(
                out,
                "  {} -> {} [label=\"{:.3}\"];",
                quote(&l.source),
                quote(&l.target),
                l.probability
            );
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> PsppGraph {
        let mut g = PsppGraph::new();
        for (n, c) in [
            ("anneal", Category::Process),
            ("quench", Category::Process),
            ("grain", Category::Structure),
            ("phase", Category::Structure),
            ("toughness", Category::Property),
        ] {
            g.add_entity(n, c).unwrap();
        }
        g
    }

    #[test]
    fn capacity_examples() {
        let mut g = toy();
        let procs = ["anneal", "quench"];
        assert_eq!(g.structure_capacity("grain", &procs, &["toughness"]).unwrap(), 0.0);
        g.set_score("anneal", "grain", 0.5, None).unwrap();
        g.set_score("grain", "quench", 0.5, None).unwrap();
        g.set_score("toughness", "grain", 0.3, None).unwrap();
        assert_eq!(g.structure_capacity("grain", &procs, &["toughness"]).unwrap(), 0.3);
        let empty: [&str; 0] = [];
        assert_eq!(g.process_capacity("anneal", &empty).unwrap(), 0.0);
        g.set_score("anneal", "phase", 0.7, None).unwrap();
        assert_eq!(g.process_capacity("anneal", &["phase"]).unwrap(), 0.7);
        assert!(matches!(g.process_capacity("grain", &["phase"]), Err(Error::Contract(_))));
        assert!(g.structure_capacity("anneal", &procs, &["toughness"]).is_err());
        assert!(g.set_score("anneal", "toughness", 0.5, None).is_err());
        assert!(g.set_score("anneal", "quench", 0.5, None).is_err());
        assert!(g.set_score("anneal", "grain", 1.5, None).is_err());
    }

    #[test]
    fn dominant_structure_first() {
        let mut g = toy();
        for p in ["anneal", "quench"] {
            g.set_score(p, "phase", 0.9, Some(format!("{p} sets the phase"))).unwrap();
            g.set_score(p, "grain", 0.1, None).unwrap();
        }
        g.set_score("phase", "toughness", 0.95, None).unwrap();
        g.set_score("grain", "toughness", 0.05, None).unwrap();
        let c = build_chart(&g, &["toughness"], 1, 1, StructureScope::Selected).unwrap();
        assert_eq!(c.structures[0].name, "phase");
        // equal process capacities: name order decides
        assert_eq!(c.processes[0].name, "anneal");
        assert!(!c.shortfall);
        assert_eq!(c.links.len(), 2);
        assert_eq!(c.links[0].representative.as_deref(), Some("anneal sets the phase"));

        let c = build_chart(&g, &["toughness"], 5, 5, StructureScope::Selected).unwrap();
        assert!(c.shortfall);
        assert_eq!((c.processes.len(), c.structures.len()), (2, 2));
        assert!(build_chart(&g, &["toughness"], 0, 1, StructureScope::Selected).is_err());
        assert!(build_chart(&g, &["phase"], 1, 1, StructureScope::Selected).is_err());
    }

    #[test]
    fn scope_changes_process_basis() {
        let mut g = toy();
        g.set_score("phase", "toughness", 0.9, None).unwrap();
        g.set_score("anneal", "phase", 0.9, None).unwrap();
        g.set_score("quench", "grain", 0.8, None).unwrap();
        g.set_score("quench", "phase", 0.2, None).unwrap();
        let sel = build_chart(&g, &["toughness"], 1, 1, StructureScope::Selected).unwrap();
        assert_eq!(sel.processes[0].name, "anneal");
        let all = build_chart(&g, &["toughness"], 1, 1, StructureScope::All).unwrap();
        assert_eq!(all.processes[0].name, "quench");
    }

    #[test]
    fn dot_has_three_ranked_columns() {
        let mut g = toy();
        g.set_score("anneal", "phase", 0.9, None).unwrap();
        g.set_score("phase", "toughness", 0.9, None).unwrap();
        let dot = build_chart(&g, &["toughness"], 2, 2, StructureScope::Selected).unwrap().to_dot();
        assert_eq!(dot.matches("rank=same").count(), 3);
        assert!(dot.contains("\"anneal\" -> \"phase\""));
        assert!(dot.contains("[label=\"phase\\n"), "{dot}");
        assert!(!dot.contains("\\\\n"));
    }

    #[test]
    fn graph_json_round_trip_validates() {
        let g = PsppGraph::random(&mut ChaCha8Rng::seed_from_u64(1), 8);
        let text = serde_json::to_string(&g).unwrap();
        assert_eq!(serde_json::from_str::<PsppGraph>(&text).unwrap(), g);
        let bad = r#"{"entities":{"a":"process","b":"property"},"scores":[{"a":"a","b":"b","probability":0.5}]}"#;
        assert!(serde_json::from_str::<PsppGraph>(bad).is_err());
    }

    fn brute_structure(g: &PsppGraph, s: &str, props: &[&str]) -> f64 {
        let procs = g.of_category(Category::Process);
        let a: f64 = procs.iter().map(|p| g.score(p, s).unwrap()).sum();
        let b: f64 = props.iter().map(|q| g.score(q, s).unwrap()).sum();
        a.min(b)
    }

    proptest! {
        #[test]
        fn single_choice_matches_exhaustive(seed in 0u64..100_000, nodes in 3usize..8) {
            let g = PsppGraph::random(&mut ChaCha8Rng::seed_from_u64(seed), nodes);
            let props = g.of_category(Category::Property);
            let c = build_chart(&g, &props, 1, 1, StructureScope::Selected).unwrap();
            let (p, s) = exhaustive_single(&g, &props).unwrap();
            prop_assert_eq!(&c.processes[0].name, &p);
            prop_assert_eq!(&c.structures[0].name, &s);
        }

        #[test]
        fn selection_is_top_m_and_json_round_trips(seed in 0u64..100_000, m in 1usize..4, n in 1usize..4) {
            let g = PsppGraph::random(&mut ChaCha8Rng::seed_from_u64(seed), 9);
            let props = g.of_category(Category::Property);
            let c = build_chart(&g, &props, n, m, StructureScope::Selected).unwrap();
            let mut all: Vec<(f64, &str)> = g
                .of_category(Category::Structure)
                .into_iter()
                .map(|s| (brute_structure(&g, s, &props), s))
                .collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
            let want: Vec<&str> = all.iter().take(m).map(|x| x.1).collect();
            let got: Vec<&str> = c.structures.iter().map(|x| x.name.as_str()).collect();
            prop_assert_eq!(got, want);
            for node in &c.structures {
                let direct = brute_structure(&g, &node.name, &props);
                prop_assert!((node.capacity.unwrap() - direct).abs() <= 1e-12);
            }
            prop_assert_eq!(Chart::from_json(&c.to_json().unwrap()).unwrap(), c);
        }

        #[test]
        fn property_arm_is_monotone(seed in 0u64..100_000) {
            let g = PsppGraph::random(&mut ChaCha8Rng::seed_from_u64(seed), 9);
            let props = g.of_category(Category::Property);
            for s in g.of_category(Category::Structure) {
                let arm = |k: usize| -> f64 { props[..k].iter().map(|q| g.score(s, q).unwrap()).sum() };
                for k in 1..props.len() {
                    prop_assert!(arm(k + 1) >= arm(k));
                }
            }
        }
    }

    #[test]
    fn insertion_order_does_not_matter() {
        let g = PsppGraph::random(&mut ChaCha8Rng::seed_from_u64(5), 10);
        let file: GraphFile = g.clone().into();
        let mut rev = file.clone();
        rev.scores.reverse();
        let h = PsppGraph::try_from(rev).unwrap();
        let props = g.of_category(Category::Property);
        let a = build_chart(&g, &props, 3, 3, StructureScope::Selected).unwrap();
        let b = build_chart(&h, &props, 3, 3, StructureScope::Selected).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }
}
