//! Corpus and feature-table I/O, agreement-based splits, and a seeded
//! synthetic scene/question generator used for desk-scale training.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{agreement_class, Agreement, AnswerSet, ConsensusReferences, Taxonomy};
use crate::qa_model::{AnswerMode, QaModel, TrainingSequence};
use crate::text::{tokenize, Vocabulary, QUESTION_MARK_TOKEN};

/// One question about one image. `answers[0]` is the canonical reference;
/// any further entries are additional human answers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub image_id: String,
    pub question: String,
    pub answers: Vec<Vec<String>>,
}

impl QaRecord {
    pub fn question_tokens(&self) -> Vec<String> {
        tokenize(&self.question)
    }

    pub fn canonical_answer(&self) -> &[String] {
        &self.answers[0]
    }

    pub fn answer_sets(&self) -> Vec<AnswerSet> {
        self.answers.iter().map(AnswerSet::new).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub records: Vec<QaRecord>,
    /// Questions that lacked a trailing `?` and had one appended.
    pub appended_question_marks: usize,
}

/// Parses line-delimited JSON records; blank lines are skipped.
pub fn parse_qa_records(text: &str, source: &str) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut record: QaRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(source, n, e.to_string()))?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::parse(
                source,
                n,
                format!("duplicate record id {:?}", record.id),
            ));
        }
        if record.answers.is_empty() {
            return Err(Error::parse(
                source,
                n,
                format!("record {:?} has no answers", record.id),
            ));
        }
        for answer in &mut record.answers {
            *answer = answer
                .iter()
                .flat_map(|w| tokenize(w))
                .filter(|w| w != QUESTION_MARK_TOKEN)
                .collect();
            if answer.is_empty() {
                return Err(Error::parse(
                    source,
                    n,
                    format!("record {:?} has an empty answer", record.id),
                ));
            }
        }
        if record.question_tokens().last().map(String::as_str) != Some(QUESTION_MARK_TOKEN) {
            record.question = format!("{} ?", record.question.trim_end());
            corpus.appended_question_marks += 1;
        }
        corpus.records.push(record);
    }
    Ok(corpus)
}

pub fn load_qa_records(path: &Path) -> Result<Corpus> {
    parse_qa_records(&std::fs::read_to_string(path)?, &path.display().to_string())
}

pub fn write_qa_records(records: &[QaRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Input(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Precomputed image feature vectors, all of length `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, image_id: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let image_id = image_id.into();
        if vector.len() != self.dim {
            return Err(Error::shape(
                "feature vector",
                format!("dim {}", self.dim),
                format!("{image_id} has {}", vector.len()),
            ));
        }
        if let Some(bad) = vector.iter().find(|x| !x.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite feature {bad} for {image_id}"
            )));
        }
        self.vectors.insert(image_id, vector);
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Result<&[f64]> {
        self.vectors
            .get(image_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingKey(format!("no features for image {image_id:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// `dim F` header, then `image_id v_1 .. v_F` per line. `#` starts a comment.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut store: Option<FeatureStore> = None;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let head = fields.next().expect("non-empty line");
            let Some(store) = store.as_mut() else {
                let dim = match (head, fields.next(), fields.next()) {
                    ("dim", Some(d), None) => d
                        .parse::<usize>()
                        .map_err(|_| Error::parse(source, n, format!("bad dimension {d:?}")))?,
                    _ => return Err(Error::parse(source, n, "expected header `dim <F>`")),
                };
                store = Some(FeatureStore::new(dim));
                continue;
            };
            let image_id = head;
            let mut vector = Vec::with_capacity(store.dim);
            for tok in fields {
                let x: f64 = tok.parse().map_err(|_| {
                    Error::parse(source, n, format!("{image_id}: cannot parse {tok:?}"))
                })?;
                if !x.is_finite() {
                    return Err(Error::parse(
                        source,
                        n,
                        format!("{image_id}: non-finite value {tok}"),
                    ));
                }
                vector.push(x);
            }
            if vector.len() != store.dim {
                return Err(Error::parse(
                    source,
                    n,
                    format!(
                        "{image_id}: {} values, header declares {}",
                        vector.len(),
                        store.dim
                    ),
                ));
            }
            if store.vectors.insert(image_id.to_string(), vector).is_some() {
                return Err(Error::parse(
                    source,
                    n,
                    format!("duplicate image id {image_id:?}"),
                ));
            }
        }
        store.ok_or_else(|| Error::parse(source, 1, "missing `dim <F>` header"))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dim {}\n", self.dim);
        for (id, v) in &self.vectors {
            out.push_str(id);
            for x in v {
                write!(out, " {x}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }
}

pub fn load_features(path: &Path) -> Result<FeatureStore> {
    FeatureStore::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
}

/// Records whose id is in `ids`, in corpus order.
pub fn filter_by_ids(records: &[QaRecord], ids: &[String]) -> Vec<QaRecord> {
    let keep: HashSet<&str> = ids.iter().map(String::as_str).collect();
    records
        .iter()
        .filter(|r| keep.contains(r.id.as_str()))
        .cloned()
        .collect()
}

pub fn consensus_references(records: &[QaRecord]) -> Result<ConsensusReferences> {
    ConsensusReferences::new(records.iter().map(QaRecord::answer_sets).collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AgreementSplit {
    pub none: Vec<QaRecord>,
    pub at_least_half: Vec<QaRecord>,
    pub full: Vec<QaRecord>,
}

impl AgreementSplit {
    pub fn part(&self, class: Agreement) -> &[QaRecord] {
        match class {
            Agreement::None => &self.none,
            Agreement::AtLeastHalf => &self.at_least_half,
            Agreement::Full => &self.full,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.none.len(), self.at_least_half.len(), self.full.len())
    }
}

/// Partitions records by the agreement among their answers.
pub fn split_by_agreement(records: &[QaRecord]) -> Result<AgreementSplit> {
    let mut split = AgreementSplit::default();
    for r in records {
        let part = match agreement_class(&r.answer_sets())? {
            Agreement::None => &mut split.none,
            Agreement::AtLeastHalf => &mut split.at_least_half,
            Agreement::Full => &mut split.full,
        };
        part.push(r.clone());
    }
    Ok(split)
}

/// Question tokens plus canonical answer words of every record.
pub fn corpus_tokens(records: &[QaRecord]) -> Vec<Vec<String>> {
    records
        .iter()
        .map(|r| {
            let mut t = r.question_tokens();
            t.extend(r.canonical_answer().iter().cloned());
            t
        })
        .collect()
}

/// Teacher-forced sequences for training. With `features = None` the model
/// is language-only and no image vectors are attached.
pub fn training_sequences(
    records: &[QaRecord],
    features: Option<&FeatureStore>,
    vocab: &Vocabulary,
    mode: AnswerMode,
) -> Result<Vec<TrainingSequence>> {
    records
        .iter()
        .map(|r| {
            let x = match features {
                Some(f) => f.get(&r.image_id)?.to_vec(),
                None => Vec::new(),
            };
            Ok(
                TrainingSequence::build(
                    &r.question_tokens(),
                    r.canonical_answer(),
                    x,
                    vocab,
                    mode,
                )?
                .with_id(r.id.clone()),
            )
        })
        .collect()
}

/// Answers every record. Features are looked up only when the model was
/// trained with images; a language-only model never reads them.
pub fn predict_records(
    model: &QaModel,
    records: &[QaRecord],
    features: Option<&FeatureStore>,
) -> Result<Vec<Vec<String>>> {
    let use_image = model.config().use_image;
    records
        .iter()
        .map(|r| {
            let x = match (use_image, features) {
                (true, Some(f)) => f.get(&r.image_id)?.to_vec(),
                (true, None) => {
                    return Err(Error::Input(
                        "model uses image features but none were given".into(),
                    ))
                }
                (false, _) => Vec::new(),
            };
            model.predict(&r.question_tokens(), &x)
        })
        .collect()
}

/// Object names ordered from largest to smallest.
pub const OBJECT_NAMES: [&str; 8] = [
    "bed", "sofa", "table", "chair", "lamp", "box", "book", "cup",
];
pub const COLOR_NAMES: [&str; 6] = ["red", "blue", "green", "white", "black", "yellow"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Color,
    Count,
    Largest,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::Color, Template::Count, Template::Largest];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_records: usize,
    /// How many of [`OBJECT_NAMES`] are used.
    pub num_object_types: usize,
    /// How many of [`COLOR_NAMES`] are used.
    pub num_colors: usize,
    /// Instances per present object type are drawn from `1..=max_count`.
    pub max_count: usize,
    /// Probability that an object type appears in a scene.
    pub presence_prob: f64,
    /// Probability that a multi-instance object type mixes two colours.
    pub multi_color_prob: f64,
    /// Relative frequency of colour, count and largest-object questions.
    pub template_weights: [f64; 3],
    /// A feature slot holds `feature_scale * count / max_count`.
    pub feature_scale: f64,
    /// Standard deviation of Gaussian noise added to the features.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_records: 500,
            num_object_types: 4,
            num_colors: 3,
            max_count: 2,
            presence_prob: 0.5,
            multi_color_prob: 0.0,
            template_weights: [0.4, 0.4, 0.2],
            feature_scale: 0.3,
            noise: 0.0,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Input(m.to_string()));
        if self.num_records == 0 {
            return bad("num_records must be at least 1");
        }
        if !(1..=OBJECT_NAMES.len()).contains(&self.num_object_types) {
            return bad("num_object_types must be between 1 and 8");
        }
        if !(1..=COLOR_NAMES.len()).contains(&self.num_colors) {
            return bad("num_colors must be between 1 and 6");
        }
        if !(1..=9).contains(&self.max_count) {
            return bad("max_count must be between 1 and 9");
        }
        if !(0.0..=1.0).contains(&self.presence_prob)
            || !(0.0..=1.0).contains(&self.multi_color_prob)
        {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.template_weights.iter().any(|w| w.is_nan() || *w < 0.0)
            || self.template_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("template weights must be non-negative with a positive sum");
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return bad("feature_scale must be finite and positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        Ok(())
    }

    /// One slot per (type, colour) pair plus one total per type.
    pub fn feature_dim(&self) -> usize {
        self.num_object_types * (self.num_colors + 1)
    }
}

/// Instance counts per (object type, colour).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Scene {
    pub image_id: String,
    pub counts: Vec<Vec<usize>>,
}

impl Scene {
    pub fn count_of(&self, object: usize) -> usize {
        self.counts[object].iter().sum()
    }

    pub fn colors_of(&self, object: usize) -> Vec<usize> {
        (0..self.counts[object].len())
            .filter(|&c| self.counts[object][c] > 0)
            .collect()
    }

    pub fn present(&self) -> Vec<usize> {
        (0..self.counts.len())
            .filter(|&k| self.count_of(k) > 0)
            .collect()
    }

    /// Lowest index is the largest type.
    pub fn largest(&self) -> Option<usize> {
        self.present().first().copied()
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub records: Vec<QaRecord>,
    pub features: FeatureStore,
    pub taxonomy: Taxonomy,
    pub scenes: Vec<Scene>,
    pub templates: Vec<Template>,
}

fn sample_scene(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng, image_id: String) -> Scene {
    let mut counts = vec![vec![0usize; cfg.num_colors]; cfg.num_object_types];
    loop {
        for row in counts.iter_mut() {
            row.iter_mut().for_each(|x| *x = 0);
            if !rng.gen_bool(cfg.presence_prob) {
                continue;
            }
            let n = rng.gen_range(1..=cfg.max_count);
            let primary = rng.gen_range(0..cfg.num_colors);
            if n >= 2 && cfg.num_colors >= 2 && rng.gen_bool(cfg.multi_color_prob) {
                let mut second = rng.gen_range(0..cfg.num_colors - 1);
                if second >= primary {
                    second += 1;
                }
                let split = rng.gen_range(1..n);
                row[primary] = split;
                row[second] = n - split;
            } else {
                row[primary] = n;
            }
        }
        if counts.iter().flatten().any(|&x| x > 0) {
            return Scene { image_id, counts };
        }
    }
}

/// Scaled counts per (type, colour), then per type, plus Gaussian noise.
fn scene_features(cfg: &SyntheticConfig, scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("validated noise"));
    let totals: Vec<usize> = (0..cfg.num_object_types)
        .map(|k| scene.count_of(k))
        .collect();
    scene
        .counts
        .iter()
        .flatten()
        .chain(totals.iter())
        .map(|&c| {
            let x = cfg.feature_scale * c as f64 / cfg.max_count as f64;
            match &noise {
                Some(n) => x + n.sample(rng),
                None => x,
            }
        })
        .collect()
}

/// Companion taxonomy: objects grouped into furniture/container/item,
/// colours under `color`. Count words are left out and so match exactly.
pub fn synthetic_taxonomy() -> Taxonomy {
    let mut edges: Vec<(String, String)> = [
        ("object", "entity"),
        ("attribute", "entity"),
        ("furniture", "object"),
        ("container", "object"),
        ("item", "object"),
        ("color", "attribute"),
        ("bed", "furniture"),
        ("sofa", "furniture"),
        ("table", "furniture"),
        ("chair", "furniture"),
        ("box", "container"),
        ("cup", "container"),
        ("lamp", "item"),
        ("book", "item"),
    ]
    .iter()
    .map(|(c, p)| (c.to_string(), p.to_string()))
    .collect();
    edges.extend(
        COLOR_NAMES
            .iter()
            .map(|c| (c.to_string(), "color".to_string())),
    );
    let lexicon: Vec<(String, String)> = OBJECT_NAMES
        .iter()
        .chain(COLOR_NAMES.iter())
        .chain(["furniture", "container", "object", "color"].iter())
        .map(|w| (w.to_string(), w.to_string()))
        .collect();
    Taxonomy::new("entity", &edges, &lexicon).expect("static taxonomy is well formed")
}

/// Generates scenes, one templated question per scene, the feature table
/// and the companion taxonomy. Fully determined by `cfg.seed`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let template_dist =
        WeightedIndex::new(cfg.template_weights).map_err(|e| Error::Input(e.to_string()))?;
    let mut records = Vec::with_capacity(cfg.num_records);
    let mut scenes = Vec::with_capacity(cfg.num_records);
    let mut templates = Vec::with_capacity(cfg.num_records);
    let mut features = FeatureStore::new(cfg.feature_dim());

    for i in 0..cfg.num_records {
        let image_id = format!("img{i:05}");
        let scene = sample_scene(cfg, &mut rng, image_id.clone());
        let template = Template::ALL[template_dist.sample(&mut rng)];
        let present = scene.present();
        let object = present[rng.gen_range(0..present.len())];
        let name = OBJECT_NAMES[object];
        let (question, answer) = match template {
            Template::Color => (
                format!("what color is the {name} ?"),
                scene
                    .colors_of(object)
                    .iter()
                    .map(|&c| COLOR_NAMES[c].to_string())
                    .collect(),
            ),
            Template::Count => (
                format!("how many {name} are there ?"),
                vec![scene.count_of(object).to_string()],
            ),
            Template::Largest => (
                "what is the largest object ?".to_string(),
                vec![OBJECT_NAMES[scene.largest().expect("scene is non-empty")].to_string()],
            ),
        };
        features.insert(image_id.clone(), scene_features(cfg, &scene, &mut rng))?;
        records.push(QaRecord {
            id: format!("q{i:05}"),
            image_id,
            question,
            answers: vec![answer],
        });
        scenes.push(scene);
        templates.push(template);
    }
    Ok(SyntheticData {
        records,
        features,
        taxonomy: synthetic_taxonomy(),
        scenes,
        templates,
    })
}
