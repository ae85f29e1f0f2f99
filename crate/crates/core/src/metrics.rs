//! Answer scoring: exact-set accuracy, WUPS built on thresholded Wu-Palmer
//! similarity, the average and min consensus metrics over several human
//! references, and inter-annotator agreement classes.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below-threshold similarities are multiplied by this factor.
pub const DEFAULT_DOWN_WEIGHT: f64 = 0.1;

/// Rooted is-a hierarchy plus a word -> node lexicon. The root has depth 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Taxonomy {
    ids: Vec<String>,
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
    root: usize,
    lexicon: HashMap<String, Vec<usize>>,
}

impl Taxonomy {
    /// Validates single root, one parent per node, no cycles, and that every
    /// lexicon target exists.
    pub fn new(
        root: &str,
        edges: &[(String, String)],
        lexicon: &[(String, String)],
    ) -> Result<Self> {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut ids = Vec::new();
        let mut intern = |id: &str, ids: &mut Vec<String>| -> usize {
            *index.entry(id.to_string()).or_insert_with(|| {
                ids.push(id.to_string());
                ids.len() - 1
            })
        };
        let root_ix = intern(root, &mut ids);
        let mut parent_pairs = Vec::with_capacity(edges.len());
        for (child, parent) in edges {
            let c = intern(child, &mut ids);
            let p = intern(parent, &mut ids);
            parent_pairs.push((c, p));
        }
        let mut parent = vec![None; ids.len()];
        for (c, p) in parent_pairs {
            if c == root_ix {
                return Err(Error::Input(format!("root {root:?} cannot have a parent")));
            }
            if let Some(existing) = parent[c] {
                if existing != p {
                    return Err(Error::Input(format!(
                        "node {:?} has more than one parent",
                        ids[c]
                    )));
                }
            }
            parent[c] = Some(p);
        }
        for (i, p) in parent.iter().enumerate() {
            if i != root_ix && p.is_none() {
                return Err(Error::Input(format!(
                    "node {:?} has no parent; only {root:?} may be a root",
                    ids[i]
                )));
            }
        }

        // Depth by walking to the root; a walk longer than the node count is a cycle.
        let mut depth = vec![0usize; ids.len()];
        depth[root_ix] = 1;
        for start in 0..ids.len() {
            let mut path = Vec::new();
            let mut node = start;
            while depth[node] == 0 {
                path.push(node);
                if path.len() > ids.len() {
                    return Err(Error::Input(format!("cycle through node {:?}", ids[start])));
                }
                node = parent[node].expect("non-root nodes have parents");
            }
            let mut d = depth[node];
            for &n in path.iter().rev() {
                d += 1;
                depth[n] = d;
            }
        }

        let mut lex: HashMap<String, Vec<usize>> = HashMap::new();
        for (word, node) in lexicon {
            let &n = index.get(node).ok_or_else(|| {
                Error::Input(format!("lexicon entry {word:?} -> unknown node {node:?}"))
            })?;
            let entry = lex.entry(word.to_lowercase()).or_default();
            if !entry.contains(&n) {
                entry.push(n);
            }
        }
        Ok(Self {
            ids,
            parent,
            depth,
            root: root_ix,
            lexicon: lex,
        })
    }

    /// Parses the taxonomy text (root id on the first non-comment line, then
    /// `child parent` per line) and the lexicon text (`word node` per line).
    pub fn parse(taxonomy: &str, lexicon: &str) -> Result<Self> {
        let mut root = None;
        let mut edges = Vec::new();
        for (n, line) in content_lines(taxonomy) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match (root.is_none(), fields.as_slice()) {
                (true, [r]) => root = Some(r.to_string()),
                (true, _) => {
                    return Err(Error::parse(
                        "taxonomy",
                        n,
                        "first line must hold only the root id",
                    ))
                }
                (false, [c, p]) => edges.push((c.to_string(), p.to_string())),
                (false, _) => {
                    return Err(Error::parse("taxonomy", n, "expected `child_id parent_id`"))
                }
            }
        }
        let root = root.ok_or_else(|| Error::parse("taxonomy", 1, "missing root declaration"))?;
        let mut entries = Vec::new();
        for (n, line) in content_lines(lexicon) {
            match line.split_whitespace().collect::<Vec<_>>().as_slice() {
                [w, node] => entries.push((w.to_string(), node.to_string())),
                _ => return Err(Error::parse("lexicon", n, "expected `word node_id`")),
            }
        }
        Self::new(&root, &edges, &entries)
    }

    pub fn load(taxonomy: &Path, lexicon: &Path) -> Result<Self> {
        Self::parse(
            &std::fs::read_to_string(taxonomy)?,
            &std::fs::read_to_string(lexicon)?,
        )
    }

    /// Serializes back into the two text formats accepted by [`Taxonomy::parse`].
    pub fn to_text(&self) -> (String, String) {
        let mut tax = format!("{}\n", self.ids[self.root]);
        for (i, p) in self.parent.iter().enumerate() {
            if let Some(p) = p {
                tax.push_str(&format!("{} {}\n", self.ids[i], self.ids[*p]));
            }
        }
        let mut words: Vec<&String> = self.lexicon.keys().collect();
        words.sort();
        let mut lex = String::new();
        for w in words {
            for &n in &self.lexicon[w] {
                lex.push_str(&format!("{w} {}\n", self.ids[n]));
            }
        }
        (tax, lex)
    }

    pub fn root(&self) -> &str {
        &self.ids[self.root]
    }

    pub fn num_nodes(&self) -> usize {
        self.ids.len()
    }

    pub fn depth_of(&self, node: &str) -> Option<usize> {
        self.ids
            .iter()
            .position(|n| n == node)
            .map(|i| self.depth[i])
    }

    pub fn senses(&self, word: &str) -> &[usize] {
        self.lexicon.get(word).map_or(&[], Vec::as_slice)
    }

    fn lca_depth(&self, mut a: usize, mut b: usize) -> usize {
        while self.depth[a] > self.depth[b] {
            a = self.parent[a].expect("deeper than root");
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b].expect("deeper than root");
        }
        while a != b {
            a = self.parent[a].expect("below root");
            b = self.parent[b].expect("below root");
        }
        self.depth[a]
    }

    /// Wu-Palmer similarity maximised over the senses of both words. Words
    /// without lexicon entries fall back to string equality.
    pub fn wup_similarity(&self, a: &str, b: &str) -> f64 {
        let (sa, sb) = (self.senses(a), self.senses(b));
        if sa.is_empty() || sb.is_empty() {
            return if a == b { 1.0 } else { 0.0 };
        }
        let mut best = 0.0f64;
        for &x in sa {
            for &y in sb {
                let s = 2.0 * self.lca_depth(x, y) as f64 / (self.depth[x] + self.depth[y]) as f64;
                best = best.max(s);
            }
        }
        best
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn wup_similarity(a: &str, b: &str, taxonomy: &Taxonomy) -> f64 {
    taxonomy.wup_similarity(a, b)
}

/// Thresholded word similarity: `s` if `s >= threshold`, else `down_weight * s`.
/// Without a taxonomy `s` is string equality.
#[derive(Clone, Copy, Debug)]
pub struct Membership<'a> {
    pub taxonomy: Option<&'a Taxonomy>,
    pub threshold: f64,
    pub down_weight: f64,
}

impl<'a> Membership<'a> {
    pub fn new(taxonomy: Option<&'a Taxonomy>, threshold: f64) -> Self {
        Self {
            taxonomy,
            threshold,
            down_weight: DEFAULT_DOWN_WEIGHT,
        }
    }

    /// String-equality membership, which turns WUPS into accuracy.
    pub fn exact() -> Self {
        Self::new(None, 1.0)
    }

    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        let s = match self.taxonomy {
            Some(t) => t.wup_similarity(a, b),
            None => f64::from(u8::from(a == b)),
        };
        if s >= self.threshold {
            s
        } else {
            self.down_weight * s
        }
    }
}

pub fn thresholded_mu(a: &str, b: &str, taxonomy: &Taxonomy, threshold: f64) -> f64 {
    Membership::new(Some(taxonomy), threshold).similarity(a, b)
}

/// Order-free, deduplicated set of normalized (lowercased, trimmed) words.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AnswerSet(BTreeSet<String>);

impl AnswerSet {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self(
            words
                .into_iter()
                .map(|w| w.as_ref().trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect(),
        )
    }

    /// Comma-separated answer words, e.g. `"blue, white"`.
    pub fn parse(text: &str) -> Self {
        Self::new(text.split(','))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }
}

impl fmt::Display for AnswerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<&str> = self.iter().collect();
        f.write_str(&words.join(", "))
    }
}

/// Product over `from` of the best match in `to`.
fn directed_product<F: Fn(&str, &str) -> f64>(from: &AnswerSet, to: &AnswerSet, mu: &F) -> f64 {
    from.iter()
        .map(|a| to.iter().map(|t| mu(a, t)).fold(0.0, f64::max))
        .product()
}

/// `min(prod_a max_t mu(a,t), prod_t max_a mu(a,t))`.
pub fn pair_score<F: Fn(&str, &str) -> f64>(answer: &AnswerSet, truth: &AnswerSet, mu: F) -> f64 {
    let forward = directed_product(answer, truth, &|a, t| mu(a, t));
    let backward = directed_product(truth, answer, &|t, a| mu(a, t));
    forward.min(backward)
}

fn check_lengths(predictions: usize, references: usize) -> Result<()> {
    if predictions != references {
        return Err(Error::Input(format!(
            "{predictions} predictions but {references} references"
        )));
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

pub fn wups(
    predictions: &[AnswerSet],
    references: &[AnswerSet],
    taxonomy: Option<&Taxonomy>,
    threshold: f64,
) -> Result<f64> {
    wups_with(
        predictions,
        references,
        Membership::new(taxonomy, threshold),
    )
}

pub fn wups_with(
    predictions: &[AnswerSet],
    references: &[AnswerSet],
    mu: Membership<'_>,
) -> Result<f64> {
    check_lengths(predictions.len(), references.len())?;
    if predictions.is_empty() {
        return Err(Error::Input("WUPS over zero questions".into()));
    }
    let scores = predictions
        .iter()
        .zip(references)
        .map(|(a, t)| pair_score(a, t, |x, y| mu.similarity(x, y)));
    Ok(mean(scores, predictions.len()))
}

pub fn accuracy(predictions: &[AnswerSet], references: &[AnswerSet]) -> Result<f64> {
    check_lengths(predictions.len(), references.len())?;
    if predictions.is_empty() {
        return Err(Error::Input("accuracy over zero questions".into()));
    }
    let hits = predictions
        .iter()
        .zip(references)
        .filter(|(a, t)| a == t)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// `K_i >= 1` human answer sets for each question.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsensusReferences(Vec<Vec<AnswerSet>>);

impl ConsensusReferences {
    pub fn new(per_question: Vec<Vec<AnswerSet>>) -> Result<Self> {
        if let Some(i) = per_question.iter().position(Vec::is_empty) {
            return Err(Error::Input(format!(
                "question {i} has no consensus references"
            )));
        }
        Ok(Self(per_question))
    }

    pub fn single(references: &[AnswerSet]) -> Self {
        Self(references.iter().map(|r| vec![r.clone()]).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn question(&self, i: usize) -> &[AnswerSet] {
        &self.0[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[AnswerSet]> {
        self.0.iter().map(Vec::as_slice)
    }

    /// The first (canonical) reference of every question.
    pub fn canonical(&self) -> Vec<AnswerSet> {
        self.0.iter().map(|refs| refs[0].clone()).collect()
    }

    /// Drops the canonical reference wherever at least one other remains.
    /// Used when the canonical answers are themselves being scored.
    pub fn excluding_canonical(&self) -> Self {
        Self(
            self.0
                .iter()
                .map(|refs| {
                    if refs.len() > 1 {
                        refs[1..].to_vec()
                    } else {
                        refs.clone()
                    }
                })
                .collect(),
        )
    }
}

fn consensus_scores<'r>(
    predictions: &'r [AnswerSet],
    consensus: &'r ConsensusReferences,
    mu: Membership<'r>,
) -> Result<impl Iterator<Item = (&'r AnswerSet, Vec<f64>)> + 'r> {
    check_lengths(predictions.len(), consensus.len())?;
    if predictions.is_empty() {
        return Err(Error::Input("consensus metric over zero questions".into()));
    }
    Ok(predictions
        .iter()
        .zip(consensus.iter())
        .map(move |(a, refs)| {
            let scores = refs
                .iter()
                .map(|t| pair_score(a, t, |x, y| mu.similarity(x, y)))
                .collect();
            (a, scores)
        }))
}

/// Average consensus: each question averages over its own `K_i` references.
pub fn acm(
    predictions: &[AnswerSet],
    consensus: &ConsensusReferences,
    taxonomy: Option<&Taxonomy>,
    threshold: f64,
) -> Result<f64> {
    acm_with(predictions, consensus, Membership::new(taxonomy, threshold))
}

pub fn acm_with(
    predictions: &[AnswerSet],
    consensus: &ConsensusReferences,
    mu: Membership<'_>,
) -> Result<f64> {
    // Clamped so rounding never lifts the mean above the largest score.
    let per_q = consensus_scores(predictions, consensus, mu)?.map(|(_, s)| {
        let hi = s.iter().copied().fold(0.0, f64::max);
        (s.iter().sum::<f64>() / s.len() as f64).min(hi)
    });
    Ok(mean(per_q, predictions.len()))
}

/// Max consensus: each question takes its best-matching reference.
pub fn mcm(
    predictions: &[AnswerSet],
    consensus: &ConsensusReferences,
    taxonomy: Option<&Taxonomy>,
    threshold: f64,
) -> Result<f64> {
    mcm_with(predictions, consensus, Membership::new(taxonomy, threshold))
}

pub fn mcm_with(
    predictions: &[AnswerSet],
    consensus: &ConsensusReferences,
    mu: Membership<'_>,
) -> Result<f64> {
    let per_q = consensus_scores(predictions, consensus, mu)?
        .map(|(_, s)| s.into_iter().fold(0.0, f64::max));
    Ok(mean(per_q, predictions.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agreement {
    /// Modal answer given by fewer than half of the annotators.
    None,
    AtLeastHalf,
    Full,
}

impl Agreement {
    pub const ALL: [Agreement; 3] = [Agreement::None, Agreement::AtLeastHalf, Agreement::Full];

    pub fn label(self) -> &'static str {
        match self {
            Agreement::None => "none",
            Agreement::AtLeastHalf => "at_least_half",
            Agreement::Full => "full",
        }
    }
}

/// Classifies one question by the share of annotators giving the modal
/// answer set.
pub fn agreement_class(answers: &[AnswerSet]) -> Result<Agreement> {
    if answers.is_empty() {
        return Err(Error::Input("agreement of zero answers".into()));
    }
    let mut counts: HashMap<&AnswerSet, usize> = HashMap::new();
    for a in answers {
        *counts.entry(a).or_default() += 1;
    }
    let modal = counts.values().copied().max().unwrap_or(0);
    let k = answers.len();
    Ok(if modal == k {
        Agreement::Full
    } else if 2 * modal >= k {
        Agreement::AtLeastHalf
    } else {
        Agreement::None
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub threshold: f64,
    pub value: f64,
}

/// Consensus metrics; `accuracy` entries use string-equality membership.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusScores {
    pub acm_accuracy: f64,
    pub mcm_accuracy: f64,
    pub acm: Vec<ThresholdScore>,
    pub mcm: Vec<ThresholdScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub exact: bool,
    /// One entry per threshold, in report order.
    pub wups: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n: usize,
    pub accuracy: f64,
    pub wups: Vec<ThresholdScore>,
    pub consensus: Option<ConsensusScores>,
    pub per_question: Vec<QuestionScore>,
}

impl ScoreReport {
    /// Scores predictions against the canonical reference of each question
    /// and, when `with_consensus` is set, against all references.
    pub fn evaluate(
        predictions: &[AnswerSet],
        references: &ConsensusReferences,
        taxonomy: Option<&Taxonomy>,
        thresholds: &[f64],
        with_consensus: bool,
    ) -> Result<Self> {
        let canonical = references.canonical();
        let accuracy = accuracy(predictions, &canonical)?;
        let mut wups_scores = Vec::with_capacity(thresholds.len());
        for &t in thresholds {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Input(format!("threshold {t} outside [0, 1]")));
            }
            wups_scores.push(ThresholdScore {
                threshold: t,
                value: wups(predictions, &canonical, taxonomy, t)?,
            });
        }
        let per_question = predictions
            .iter()
            .zip(&canonical)
            .map(|(a, r)| QuestionScore {
                exact: a == r,
                wups: thresholds
                    .iter()
                    .map(|&t| {
                        let mu = Membership::new(taxonomy, t);
                        pair_score(a, r, |x, y| mu.similarity(x, y))
                    })
                    .collect(),
            })
            .collect();
        let consensus = if with_consensus {
            let at = |f: fn(&[AnswerSet], &ConsensusReferences, Membership<'_>) -> Result<f64>| {
                thresholds
                    .iter()
                    .map(|&t| {
                        Ok(ThresholdScore {
                            threshold: t,
                            value: f(predictions, references, Membership::new(taxonomy, t))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            };
            Some(ConsensusScores {
                acm_accuracy: acm_with(predictions, references, Membership::exact())?,
                mcm_accuracy: mcm_with(predictions, references, Membership::exact())?,
                acm: at(acm_with)?,
                mcm: at(mcm_with)?,
            })
        } else {
            None
        };
        Ok(Self {
            n: predictions.len(),
            accuracy,
            wups: wups_scores,
            consensus,
            per_question,
        })
    }

    pub fn wups_at(&self, threshold: f64) -> Option<f64> {
        self.wups
            .iter()
            .find(|s| s.threshold == threshold)
            .map(|s| s.value)
    }
}
