//! Plain accuracy, WUPS and VQA consensus accuracy.
//!
//! WUPS needs a taxonomy. The text format is one `child parent` edge per
//! line; blank lines and lines starting with `#` are ignored. A term with
//! several senses appears once per sense as `term#1`, `term#2`, and so on,
//! and term similarity is the best over all sense pairs.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::normalize_answer;
use crate::error::{Error, Result};

/// Threshold values reported by default.
pub const WUPS_THRESHOLDS: [f64; 2] = [0.9, 0.0];
/// Factor applied to similarities below the threshold.
pub const BELOW_THRESHOLD_WEIGHT: f64 = 0.1;

const TOY_TAXONOMY: &str = include_str!("../data/toy_taxonomy.txt");

#[derive(Clone, Debug)]
struct Node {
    parent: Option<usize>,
    depth: usize,
}

#[derive(Clone, Debug)]
pub struct Taxonomy {
    names: Vec<String>,
    nodes: Vec<Node>,
    senses: HashMap<String, Vec<usize>>,
}

fn term_of(node: &str) -> &str {
    node.split_once('#').map_or(node, |(t, _)| t)
}

impl Taxonomy {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ids: HashMap<String, usize> = HashMap::new();
        let mut names = Vec::new();
        let mut parent: Vec<Option<usize>> = Vec::new();
        let mut intern = |name: &str, names: &mut Vec<String>, parent: &mut Vec<Option<usize>>| {
            *ids.entry(name.to_string()).or_insert_with(|| {
                names.push(name.to_string());
                parent.push(None);
                names.len() - 1
            })
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [child, par] = fields[..] else {
                return Err(Error::Taxonomy(format!("line {}: expected `child parent`, got `{line}`", i + 1)));
            };
            let (child, par) = (child.to_lowercase(), par.to_lowercase());
            if child == par {
                return Err(Error::Taxonomy(format!("line {}: `{child}` is its own parent", i + 1)));
            }
            let c = intern(&child, &mut names, &mut parent);
            let p = intern(&par, &mut names, &mut parent);
            match parent[c] {
                Some(old) if old != p => {
                    return Err(Error::Taxonomy(format!(
                        "line {}: `{child}` already has parent `{}`",
                        i + 1,
                        names[old]
                    )))
                }
                _ => parent[c] = Some(p),
            }
        }
        let roots: Vec<usize> = (0..names.len()).filter(|&i| parent[i].is_none()).collect();
        if roots.len() != 1 {
            let listed: Vec<&str> = roots.iter().take(5).map(|&r| names[r].as_str()).collect();
            return Err(Error::Taxonomy(format!(
                "expected exactly one root, found {} ({})",
                roots.len(),
                listed.join(", ")
            )));
        }
        let mut depth = vec![0usize; names.len()];
        for start in 0..names.len() {
            let mut chain = Vec::new();
            let mut cur = start;
            while depth[cur] == 0 {
                chain.push(cur);
                if chain.len() > names.len() {
                    return Err(Error::Taxonomy(format!("cycle through `{}`", names[start])));
                }
                match parent[cur] {
                    Some(p) => cur = p,
                    None => break,
                }
            }
            let mut d = if depth[cur] == 0 { 0 } else { depth[cur] };
            for &n in chain.iter().rev() {
                d += 1;
                depth[n] = d;
            }
        }
        let nodes: Vec<Node> = parent
            .into_iter()
            .zip(depth)
            .map(|(parent, depth)| Node { parent, depth })
            .collect();
        let mut senses: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            senses.entry(term_of(n).to_string()).or_default().push(i);
        }
        Ok(Self { names, nodes, senses })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// The small taxonomy shipped with the crate (animals, colors, shapes,
    /// numbers, yes/no, and a two-sense `orange`).
    pub fn toy() -> Self {
        Self::parse(TOY_TAXONOMY).expect("bundled taxonomy is valid")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn resolves(&self, term: &str) -> bool {
        self.senses.contains_key(&normalize_answer(term))
    }

    /// Depth of a node given by its full name (`term` or `term#k`); the root
    /// has depth 1.
    pub fn depth(&self, node: &str) -> Option<usize> {
        let i = self.names.iter().position(|n| n == node)?;
        Some(self.nodes[i].depth)
    }

    fn lcs_depth(&self, mut a: usize, mut b: usize) -> usize {
        while self.nodes[a].depth > self.nodes[b].depth {
            a = self.nodes[a].parent.unwrap();
        }
        while self.nodes[b].depth > self.nodes[a].depth {
            b = self.nodes[b].parent.unwrap();
        }
        while a != b {
            a = self.nodes[a].parent.unwrap();
            b = self.nodes[b].parent.unwrap();
        }
        self.nodes[a].depth
    }

    /// `2·depth(lcs) / (depth(a) + depth(b))`, maximized over senses.
    /// `None` when either term is missing from the taxonomy.
    pub fn wu_palmer(&self, a: &str, b: &str) -> Option<f64> {
        let sa = self.senses.get(&normalize_answer(a))?;
        let sb = self.senses.get(&normalize_answer(b))?;
        let mut best = 0.0f64;
        for &x in sa {
            for &y in sb {
                let (dx, dy) = (self.nodes[x].depth, self.nodes[y].depth);
                let sim = 2.0 * self.lcs_depth(x, y) as f64 / (dx + dy) as f64;
                best = best.max(sim);
            }
        }
        Some(best)
    }
}

/// Similarity of a predicted and a true answer: Wu-Palmer when it reaches
/// `threshold`, one tenth of it otherwise. Identical answers score 1 even
/// when the taxonomy does not know them; other unknown terms score 0.
pub fn thresholded_mu(a: &str, t: &str, taxonomy: &Taxonomy, threshold: f64) -> f64 {
    if normalize_answer(a) == normalize_answer(t) {
        return 1.0;
    }
    match taxonomy.wu_palmer(a, t) {
        Some(w) if w >= threshold => w,
        Some(w) => BELOW_THRESHOLD_WEIGHT * w,
        None => 0.0,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalRecord {
    pub predicted: Vec<String>,
    pub truth: Vec<String>,
}

impl EvalRecord {
    pub fn single(predicted: &str, truth: &str) -> Self {
        Self {
            predicted: vec![predicted.to_string()],
            truth: vec![truth.to_string()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WupsScore {
    pub threshold: f64,
    pub score: f64,
    /// Records with no predicted answer, scored 0.
    pub empty_predictions: usize,
}

fn directed(from: &[String], to: &[String], taxonomy: &Taxonomy, threshold: f64) -> f64 {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|t| thresholded_mu(a, t, taxonomy, threshold))
                .fold(0.0, f64::max)
        })
        .product()
}

/// Per-record `min(Π_a max_t μ(a,t), Π_t max_a μ(a,t))`, averaged.
pub fn wups_record(record: &EvalRecord, taxonomy: &Taxonomy, threshold: f64) -> f64 {
    if record.predicted.is_empty() || record.truth.is_empty() {
        return 0.0;
    }
    let forward = directed(&record.predicted, &record.truth, taxonomy, threshold);
    let backward = directed(&record.truth, &record.predicted, taxonomy, threshold);
    forward.min(backward)
}

pub fn wups(records: &[EvalRecord], taxonomy: &Taxonomy, threshold: f64) -> WupsScore {
    let total: f64 = records.iter().map(|r| wups_record(r, taxonomy, threshold)).sum();
    WupsScore {
        threshold,
        score: if records.is_empty() { 0.0 } else { total / records.len() as f64 },
        empty_predictions: records.iter().filter(|r| r.predicted.is_empty()).count(),
    }
}

/// Mean over examples of `min(#annotators agreeing / 3, 1)`.
pub fn vqa_accuracy(predictions: &[String], annotators: &[Vec<String>]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let total: f64 = predictions
        .iter()
        .zip(annotators)
        .map(|(p, answers)| {
            let p = normalize_answer(p);
            let n = answers.iter().filter(|a| normalize_answer(a) == p).count();
            (n as f64 / 3.0).min(1.0)
        })
        .sum();
    total / predictions.len() as f64
}

pub fn plain_accuracy(predictions: &[String], truths: &[String]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| normalize_answer(p) == normalize_answer(t))
        .count();
    hits as f64 / predictions.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub count: usize,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub wups: Vec<WupsScore>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub vqa_accuracy: Option<f64>,
    /// Distinct answer strings (predicted or true) the taxonomy does not know.
    pub unresolved_terms: Vec<String>,
}

/// Scores predicted answer sets against ground truth. Plain accuracy
/// compares the first predicted answer with the first true answer.
pub fn report(
    predictions: &[Vec<String>],
    truths: &[Vec<String>],
    taxonomy: Option<&Taxonomy>,
    thresholds: &[f64],
    vqa: bool,
) -> Result<Report> {
    if predictions.len() != truths.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} examples",
            predictions.len(),
            truths.len()
        )));
    }
    if let Some(i) = truths.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!("example {i} has no ground-truth answer")));
    }
    let first = |v: &[Vec<String>]| v.iter().map(|x| x.first().cloned().unwrap_or_default()).collect::<Vec<_>>();
    let (p1, t1) = (first(predictions), first(truths));
    let records: Vec<EvalRecord> = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| EvalRecord {
            predicted: p.clone(),
            truth: t.clone(),
        })
        .collect();
    let (wups_scores, unresolved) = match taxonomy {
        Some(tax) => {
            let unresolved: BTreeSet<String> = predictions
                .iter()
                .chain(truths)
                .flatten()
                .map(|s| normalize_answer(s))
                .filter(|s| !tax.resolves(s))
                .collect();
            let scores = thresholds.iter().map(|&th| wups(&records, tax, th)).collect();
            (scores, unresolved.into_iter().collect())
        }
        None => (Vec::new(), Vec::new()),
    };
    Ok(Report {
        count: predictions.len(),
        accuracy: plain_accuracy(&p1, &t1),
        wups: wups_scores,
        vqa_accuracy: vqa.then(|| vqa_accuracy(&p1, truths)),
        unresolved_terms: unresolved,
    })
}
