//! The question-answering network: word embedding, image-feature
//! concatenation, LSTM, softmax output layer. Training uses teacher forcing
//! on `[question, answer]` with the loss restricted to answer positions;
//! prediction decodes greedily from the question mark onward.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::{lstm_backward, lstm_step, LstmParams, LstmState, StepCache};
use crate::numerics::{
    finite_difference_check, log_sum_exp, softmax, GradCheckReport, Matrix, ParamId, ParamTable,
    ParameterStore,
};
use crate::text::{Vocabulary, END_OF_ANSWER, QUESTION_MARK, QUESTION_MARK_TOKEN, UNKNOWN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    /// Decode a word sequence terminated by the end token.
    MultipleWords,
    /// Supervise and predict only the first answer word.
    SingleWord,
}

impl AnswerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AnswerMode::MultipleWords => "multiple_words",
            AnswerMode::SingleWord => "single_word",
        }
    }
}

impl fmt::Display for AnswerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnswerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiple_words" | "multi" => Ok(AnswerMode::MultipleWords),
            "single_word" | "single" => Ok(AnswerMode::SingleWord),
            other => Err(Error::Input(format!("unknown answer mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    /// Length of the image feature vector; ignored when `use_image` is off.
    pub feature_dim: usize,
    pub mode: AnswerMode,
    pub use_image: bool,
    pub max_decode_len: usize,
    pub forbid_repeats: bool,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm clipping threshold.
    pub grad_clip: f64,
    /// Half-width of the uniform weight initialisation.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            hidden_dim: 256,
            feature_dim: 0,
            mode: AnswerMode::MultipleWords,
            use_image: false,
            max_decode_len: 10,
            forbid_repeats: false,
            learning_rate: 0.01,
            momentum: 0.9,
            grad_clip: 5.0,
            init_scale: 0.08,
            seed: 1234,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Input(msg));
        if self.embedding_dim == 0 || self.hidden_dim == 0 {
            return bad("embedding and hidden dimensions must be at least 1".into());
        }
        if self.max_decode_len == 0 {
            return bad("max_decode_len must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad(format!(
                "grad_clip must be positive, got {}",
                self.grad_clip
            ));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad(format!(
                "init_scale must be positive, got {}",
                self.init_scale
            ));
        }
        if self.use_image && self.feature_dim == 0 {
            return bad("use_image requires feature_dim >= 1".into());
        }
        Ok(())
    }

    /// Width of the LSTM input: features plus embedding, or embedding alone.
    pub fn input_dim(&self) -> usize {
        if self.use_image {
            self.feature_dim + self.embedding_dim
        } else {
            self.embedding_dim
        }
    }
}

/// Teacher-forced training example over `[q_1 .. q_{n-1}, ?, a_1 .. a_m]`.
///
/// The `?` input predicts `a_1`, input `a_j` predicts `a_{j+1}` and input
/// `a_m` predicts the end token. Positions before `?` carry no loss.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSequence {
    pub id: String,
    pub inputs: Vec<usize>,
    pub features: Vec<f64>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TrainingSequence {
    pub fn build<Q: AsRef<str>, A: AsRef<str>>(
        question: &[Q],
        answer: &[A],
        features: Vec<f64>,
        vocab: &Vocabulary,
        mode: AnswerMode,
    ) -> Result<Self> {
        if question.last().map(AsRef::as_ref) != Some(QUESTION_MARK_TOKEN) {
            return Err(Error::Input("question must end with \"?\"".into()));
        }
        if answer.is_empty() {
            return Err(Error::Input("answer must contain at least one word".into()));
        }
        let answer = match mode {
            AnswerMode::MultipleWords => answer,
            AnswerMode::SingleWord => &answer[..1],
        };
        let q = vocab.encode(question).indices;
        let a = vocab.encode(answer).indices;
        let n = q.len();

        let mut inputs = q;
        inputs.extend_from_slice(&a);
        let mut targets = vec![UNKNOWN; inputs.len()];
        let mut mask = vec![false; inputs.len()];
        for (j, &word) in a.iter().enumerate() {
            targets[n - 1 + j] = word;
            mask[n - 1 + j] = true;
        }
        match mode {
            AnswerMode::MultipleWords => {
                let last = inputs.len() - 1;
                targets[last] = END_OF_ANSWER;
                mask[last] = true;
            }
            // The single answer word is only ever a target, never an input.
            AnswerMode::SingleWord => {
                inputs.pop();
                targets.pop();
                mask.pop();
            }
        }
        Ok(Self {
            id: String::new(),
            inputs,
            features,
            targets,
            mask,
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn supervised_positions(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Answer words in decode order, end token stripped.
    pub words: Vec<String>,
    /// Stopped at `max_decode_len` without producing the end token.
    pub truncated: bool,
    /// Softmax probability of each chosen token, including a final end token.
    pub probabilities: Vec<f64>,
}

/// Handles of every trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layout {
    embedding: ParamId,
    lstm: LstmParams,
    output_w: ParamId,
    output_b: ParamId,
}

const EMBEDDING: &str = "embedding";
const LSTM_PREFIX: &str = "lstm";
const OUTPUT_W: &str = "output.w";
const OUTPUT_B: &str = "output.b";

/// Intermediate values kept from a forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    steps: Vec<StepCache>,
    hidden: Vec<Vec<f64>>,
    /// Softmax output at supervised positions only.
    probabilities: Vec<Option<Vec<f64>>>,
    supervised: usize,
}

#[derive(Clone, Debug)]
pub struct QaModel {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParameterStore,
    layout: Layout,
}

impl QaModel {
    /// Fresh model with seeded uniform weights and zero biases.
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (e, h, v, s) = (
            config.embedding_dim,
            config.hidden_dim,
            vocab.len(),
            config.init_scale,
        );
        let uniform = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Matrix::new(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.gen_range(-s..=s)).collect(),
            )
        };
        let mut params = ParameterStore::new();
        let embedding = params.register(EMBEDDING, uniform(e, v, &mut rng)?)?;
        let lstm =
            LstmParams::register(&mut params, LSTM_PREFIX, config.input_dim(), h, s, &mut rng)?;
        let output_w = params.register(OUTPUT_W, uniform(v, h, &mut rng)?)?;
        let output_b = params.register(OUTPUT_B, Matrix::zeros(v, 1))?;
        Ok(Self {
            config,
            vocab,
            params,
            layout: Layout {
                embedding,
                lstm,
                output_w,
                output_b,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn output_bias_id(&self) -> ParamId {
        self.layout.output_b
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if self.config.use_image && features.len() != self.config.feature_dim {
            return Err(Error::shape(
                "image features",
                format!("expected {}", self.config.feature_dim),
                format!("got {}", features.len()),
            ));
        }
        Ok(())
    }

    fn lstm_input(&self, values: &ParamTable, word: usize, features: &[f64]) -> Result<Vec<f64>> {
        let emb = &values[self.layout.embedding];
        if word >= emb.cols() {
            return Err(Error::Domain(format!(
                "word index {word} outside vocabulary"
            )));
        }
        let mut v = Vec::with_capacity(self.config.input_dim());
        if self.config.use_image {
            v.extend_from_slice(features);
        }
        v.extend((0..emb.rows()).map(|r| emb.get(r, word)));
        Ok(v)
    }

    fn logits(&self, values: &ParamTable, h: &[f64]) -> Result<Vec<f64>> {
        let mut z = values[self.layout.output_b].data().to_vec();
        values[self.layout.output_w].add_matvec_into(h, &mut z)?;
        Ok(z)
    }

    /// Masked mean cross-entropy under the given parameter values.
    pub fn forward_loss_with(
        &self,
        values: &ParamTable,
        seq: &TrainingSequence,
    ) -> Result<(f64, ForwardCache)> {
        self.check_features(&seq.features)?;
        if seq.inputs.len() != seq.targets.len() || seq.inputs.len() != seq.mask.len() {
            return Err(Error::shape(
                "training sequence",
                format!("{} inputs", seq.inputs.len()),
                format!("{} targets / {} mask", seq.targets.len(), seq.mask.len()),
            ));
        }
        let supervised = seq.supervised_positions();
        if supervised == 0 {
            return Err(Error::Domain(format!(
                "sequence {:?} has no supervised positions",
                seq.id
            )));
        }
        let mut state = LstmState::zeros(self.config.hidden_dim);
        let mut steps = Vec::with_capacity(seq.inputs.len());
        let mut hidden = Vec::with_capacity(seq.inputs.len());
        let mut probabilities = Vec::with_capacity(seq.inputs.len());
        let mut total = 0.0;
        for (t, &word) in seq.inputs.iter().enumerate() {
            let v = self.lstm_input(values, word, &seq.features)?;
            let (next, cache) = lstm_step(&v, &state, &self.layout.lstm, values)?;
            if seq.mask[t] {
                let z = self.logits(values, &next.h)?;
                let target = seq.targets[t];
                if target >= z.len() {
                    return Err(Error::Domain(format!(
                        "target index {target} outside vocabulary"
                    )));
                }
                total += log_sum_exp(&z) - z[target];
                probabilities.push(Some(softmax(&z)?));
            } else {
                probabilities.push(None);
            }
            hidden.push(next.h.clone());
            steps.push(cache);
            state = next;
        }
        let cache = ForwardCache {
            steps,
            hidden,
            probabilities,
            supervised,
        };
        Ok((total / supervised as f64, cache))
    }

    pub fn forward_loss(&self, seq: &TrainingSequence) -> Result<(f64, ForwardCache)> {
        self.forward_loss_with(self.params.values(), seq)
    }

    /// Adds d(loss)/d(params) into `grads`.
    pub fn backward_with(
        &self,
        values: &ParamTable,
        seq: &TrainingSequence,
        cache: &ForwardCache,
        grads: &mut ParamTable,
    ) -> Result<()> {
        let hd = self.config.hidden_dim;
        let scale = 1.0 / cache.supervised as f64;
        let mut grad_h = vec![vec![0.0; hd]; seq.inputs.len()];
        for (t, probs) in cache.probabilities.iter().enumerate() {
            let Some(p) = probs else { continue };
            let mut dz: Vec<f64> = p.iter().map(|x| x * scale).collect();
            dz[seq.targets[t]] -= scale;
            grads[self.layout.output_w].add_outer(&dz, &cache.hidden[t])?;
            for (b, d) in grads[self.layout.output_b].data_mut().iter_mut().zip(&dz) {
                *b += d;
            }
            values[self.layout.output_w].add_transpose_matvec_into(&dz, &mut grad_h[t])?;
        }
        let d = lstm_backward(&grad_h, &cache.steps, &self.layout.lstm, values, grads)?;
        let offset = if self.config.use_image {
            self.config.feature_dim
        } else {
            0
        };
        let emb = &mut grads[self.layout.embedding];
        for (dv, &word) in d.inputs.iter().zip(&seq.inputs) {
            for (r, g) in dv[offset..].iter().enumerate() {
                let cur = emb.get(r, word);
                emb.set(r, word, cur + g);
            }
        }
        Ok(())
    }

    /// Zeroes the stored gradients, then fills them for one example.
    pub fn compute_gradients(&mut self, seq: &TrainingSequence) -> Result<f64> {
        self.params.zero_grads();
        let (loss, cache) = self.forward_loss(seq)?;
        let mut grads = std::mem::take(self.params.grads_mut());
        let result = self.backward_with(self.params.values(), seq, &cache, &mut grads);
        *self.params.grads_mut() = grads;
        result.map(|()| loss)
    }

    /// Checks the analytic gradient of `seq`'s loss against central
    /// differences over every parameter entry.
    pub fn gradient_check(
        &self,
        seq: &TrainingSequence,
        epsilon: f64,
        tolerance: f64,
    ) -> Result<GradCheckReport> {
        let mut probe = self.clone();
        probe.compute_gradients(seq)?;
        let mut store = probe.params;
        finite_difference_check(
            |s| self.forward_loss_with(s.values(), seq).map(|(l, _)| l),
            &mut store,
            epsilon,
            tolerance,
        )
    }

    /// Runs the question through the LSTM and returns the state after `?`.
    fn encode_question<S: AsRef<str>>(
        &self,
        question: &[S],
        features: &[f64],
    ) -> Result<LstmState> {
        if question.last().map(AsRef::as_ref) != Some(QUESTION_MARK_TOKEN) {
            return Err(Error::Input("question must end with \"?\"".into()));
        }
        self.check_features(features)?;
        let values = self.params.values();
        let mut state = LstmState::zeros(self.config.hidden_dim);
        for word in self.vocab.encode(question).indices {
            let v = self.lstm_input(values, word, features)?;
            state = lstm_step(&v, &state, &self.layout.lstm, values)?.0;
        }
        Ok(state)
    }

    /// Greedy decoding: argmax over the vocabulary at each step, feeding the
    /// chosen word back in, until the end token or `max_decode_len` words.
    /// The unknown and question-mark tokens are never emitted; with
    /// `forbid_repeats` neither are words already in the answer.
    pub fn predict_answer<S: AsRef<str>>(
        &self,
        question: &[S],
        features: &[f64],
    ) -> Result<DecodeResult> {
        let values = self.params.values();
        let mut state = self.encode_question(question, features)?;
        let mut chosen: Vec<usize> = Vec::new();
        let mut probabilities = Vec::new();
        loop {
            let z = self.logits(values, &state.h)?;
            let best = argmax_excluding(&z, |i| {
                i == UNKNOWN
                    || i == QUESTION_MARK
                    || (self.config.forbid_repeats && chosen.contains(&i))
            })
            .ok_or_else(|| Error::Domain("no admissible answer token".into()))?;
            probabilities.push(softmax(&z)?[best]);
            if best == END_OF_ANSWER {
                return Ok(DecodeResult {
                    words: self.vocab.decode(&chosen)?,
                    truncated: false,
                    probabilities,
                });
            }
            chosen.push(best);
            if chosen.len() >= self.config.max_decode_len {
                return Ok(DecodeResult {
                    words: self.vocab.decode(&chosen)?,
                    truncated: true,
                    probabilities,
                });
            }
            let v = self.lstm_input(values, best, features)?;
            state = lstm_step(&v, &state, &self.layout.lstm, values)?.0;
        }
    }

    /// One decode step at `?`, excluding the end, unknown and question-mark tokens.
    pub fn predict_single_word<S: AsRef<str>>(
        &self,
        question: &[S],
        features: &[f64],
    ) -> Result<String> {
        let state = self.encode_question(question, features)?;
        let z = self.logits(self.params.values(), &state.h)?;
        let best = argmax_excluding(&z, |i| {
            i == UNKNOWN || i == QUESTION_MARK || i == END_OF_ANSWER
        })
        .ok_or_else(|| Error::Domain("vocabulary has no answer words".into()))?;
        Ok(self.vocab.word(best)?.to_string())
    }

    /// Answer words according to the configured mode.
    pub fn predict<S: AsRef<str>>(&self, question: &[S], features: &[f64]) -> Result<Vec<String>> {
        match self.config.mode {
            AnswerMode::MultipleWords => Ok(self.predict_answer(question, features)?.words),
            AnswerMode::SingleWord => Ok(vec![self.predict_single_word(question, features)?]),
        }
    }
}

/// First index of the maximum among admissible entries (lowest index wins ties).
fn argmax_excluding(z: &[f64], excluded: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in z.iter().enumerate() {
        if excluded(i) {
            continue;
        }
        if best.is_none_or(|b| x > z[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub examples: usize,
    /// Updates whose gradient norm exceeded the clipping threshold.
    pub clipped: usize,
}

/// SGD with momentum and global norm clipping, one example per update.
/// Owns the velocity buffers and the shuffling generator so that runs are
/// reproducible from the model seed.
#[derive(Clone, Debug)]
pub struct Trainer {
    velocity: ParamTable,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: &QaModel) -> Self {
        Self {
            velocity: model.params.values().zeros_like(),
            rng: ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x005e_ed0f_0ade),
            epoch: 0,
        }
    }

    pub fn train_epoch(
        &mut self,
        model: &mut QaModel,
        data: &[TrainingSequence],
    ) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::Input("cannot train on an empty dataset".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (lr, momentum, clip) = (
            model.config.learning_rate,
            model.config.momentum,
            model.config.grad_clip,
        );
        let mut total = 0.0;
        let mut clipped = 0;
        for &k in &order {
            let seq = &data[k];
            let loss = model.compute_gradients(seq)?;
            let norm = model.params.grads().squared_norm().sqrt();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::Training {
                    example: if seq.id.is_empty() {
                        k.to_string()
                    } else {
                        seq.id.clone()
                    },
                    message: format!("loss {loss}, gradient norm {norm}"),
                });
            }
            total += loss;
            let factor = if norm > clip {
                clipped += 1;
                clip / norm
            } else {
                1.0
            };
            let (values, grads) = model.params.values_and_grads_mut();
            update(values, grads, &mut self.velocity, lr * factor, momentum);
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            mean_loss: total / data.len() as f64,
            examples: data.len(),
            clipped,
        })
    }
}

/// `v = momentum * v - step * g; w += v`
fn update(
    values: &mut ParamTable,
    grads: &ParamTable,
    velocity: &mut ParamTable,
    step: f64,
    momentum: f64,
) {
    for ((w, g), v) in values.iter_mut().zip(grads.iter()).zip(velocity.iter_mut()) {
        for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi - step * gi;
            *wi += *vi;
        }
    }
}

/// Convenience wrapper for [`Trainer::train_epoch`] on a fresh trainer.
pub fn train_epoch(model: &mut QaModel, data: &[TrainingSequence]) -> Result<EpochStats> {
    Trainer::new(model).train_epoch(model, data)
}

/// Random tiny model plus a random training sequence, for gradient checks.
/// Biases are randomised so every parameter carries signal.
#[allow(clippy::too_many_arguments)]
pub fn random_gradcheck_case(
    seed: u64,
    vocab_size: usize,
    embedding_dim: usize,
    hidden_dim: usize,
    feature_dim: usize,
    question_len: usize,
    answer_len: usize,
    mode: AnswerMode,
) -> Result<(QaModel, TrainingSequence)> {
    if vocab_size < 4 || question_len == 0 || answer_len == 0 {
        return Err(Error::Input(
            "gradcheck case needs |V| >= 4 and non-empty question/answer".into(),
        ));
    }
    let vocab = Vocabulary::from_words((3..vocab_size).map(|i| format!("w{i}")))?;
    let config = ModelConfig {
        embedding_dim,
        hidden_dim,
        feature_dim,
        use_image: feature_dim > 0,
        mode,
        init_scale: 0.5,
        seed,
        ..ModelConfig::default()
    };
    let mut model = QaModel::new(config, vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    for id in model.params.ids().collect::<Vec<_>>() {
        if model.params.value(id).cols() == 1 {
            for b in model.params.value_mut(id).data_mut() {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let words = model.vocab.words().to_vec();
    let pick = |rng: &mut ChaCha8Rng| words[rng.gen_range(3..vocab_size)].clone();
    let mut question: Vec<String> = (0..question_len - 1).map(|_| pick(&mut rng)).collect();
    question.push(QUESTION_MARK_TOKEN.to_string());
    let answer: Vec<String> = (0..answer_len).map(|_| pick(&mut rng)).collect();
    let features = (0..feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let seq = TrainingSequence::build(&question, &answer, features, &model.vocab, mode)?
        .with_id(format!("gradcheck-{seed}"));
    Ok((model, seq))
}

/// Sizes for one random gradient-check configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub seed: u64,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub question_len: usize,
    pub answer_len: usize,
    pub mode: AnswerMode,
}

impl GradCheckCase {
    /// Sequences of at most 8 inputs, `H <= 16`, `|V| <= 30`.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            seed,
            vocab_size: rng.gen_range(5..=30),
            embedding_dim: rng.gen_range(1..=6),
            hidden_dim: rng.gen_range(1..=16),
            feature_dim: rng.gen_range(0..=4),
            question_len: rng.gen_range(1..=5),
            answer_len: rng.gen_range(1..=3),
            mode: if rng.gen_bool(0.5) {
                AnswerMode::MultipleWords
            } else {
                AnswerMode::SingleWord
            },
        }
    }

    pub fn build(&self) -> Result<(QaModel, TrainingSequence)> {
        random_gradcheck_case(
            self.seed,
            self.vocab_size,
            self.embedding_dim,
            self.hidden_dim,
            self.feature_dim,
            self.question_len,
            self.answer_len,
            self.mode,
        )
    }

    pub fn run(&self, epsilon: f64, tolerance: f64) -> Result<GradCheckReport> {
        let (model, seq) = self.build()?;
        model.gradient_check(&seq, epsilon, tolerance)
    }
}

const CHECKPOINT_MAGIC: &str = "nqa-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl QaModel {
    /// Writes the text checkpoint (see the format notes in the README).
    /// Floats use the shortest representation that parses back to the same bits.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let c = &self.config;
        writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        writeln!(out, "embedding_dim {}", c.embedding_dim)?;
        writeln!(out, "hidden_dim {}", c.hidden_dim)?;
        writeln!(out, "feature_dim {}", c.feature_dim)?;
        writeln!(out, "mode {}", c.mode)?;
        writeln!(out, "use_image {}", c.use_image)?;
        writeln!(out, "max_decode_len {}", c.max_decode_len)?;
        writeln!(out, "forbid_repeats {}", c.forbid_repeats)?;
        writeln!(out, "learning_rate {:e}", c.learning_rate)?;
        writeln!(out, "momentum {:e}", c.momentum)?;
        writeln!(out, "grad_clip {:e}", c.grad_clip)?;
        writeln!(out, "init_scale {:e}", c.init_scale)?;
        writeln!(out, "seed {}", c.seed)?;
        writeln!(out, "vocabulary {}", self.vocab.len())?;
        self.vocab.write_to(&mut out)?;
        writeln!(out, "parameters {}", self.params.len())?;
        for id in self.params.ids() {
            let m = self.params.value(id);
            writeln!(
                out,
                "param {} {} {}",
                self.params.name(id),
                m.rows(),
                m.cols()
            )?;
            for r in 0..m.rows() {
                let row: Vec<String> = m.row(r).iter().map(|x| format!("{x:e}")).collect();
                writeln!(out, "{}", row.join(" "))?;
            }
        }
        writeln!(out, "end")?;
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = CheckpointLines {
            inner: input.lines(),
            line: 0,
        };
        let header = lines.next_line()?;
        let version = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .map(str::trim)
            .ok_or_else(|| Error::Format("not a checkpoint file".into()))?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version:?} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let config = ModelConfig {
            embedding_dim: lines.field("embedding_dim")?,
            hidden_dim: lines.field("hidden_dim")?,
            feature_dim: lines.field("feature_dim")?,
            mode: lines.field("mode")?,
            use_image: lines.field("use_image")?,
            max_decode_len: lines.field("max_decode_len")?,
            forbid_repeats: lines.field("forbid_repeats")?,
            learning_rate: lines.field("learning_rate")?,
            momentum: lines.field("momentum")?,
            grad_clip: lines.field("grad_clip")?,
            init_scale: lines.field("init_scale")?,
            seed: lines.field("seed")?,
        };
        let n_words: usize = lines.field("vocabulary")?;
        let words = (0..n_words)
            .map(|_| lines.next_line())
            .collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_lines(words, "checkpoint vocabulary")
            .map_err(|e| Error::Format(e.to_string()))?;

        let mut model = QaModel::new(config, vocab).map_err(|e| Error::Format(e.to_string()))?;
        let n_params: usize = lines.field("parameters")?;
        if n_params != model.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {n_params}",
                model.params.len()
            )));
        }
        for _ in 0..n_params {
            let header = lines.next_line()?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            let [_, name, rows, cols] = parts.as_slice() else {
                return Err(lines.error("expected `param <name> <rows> <cols>`"));
            };
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter {name:?}")))?;
            let shape = (
                lines.parse_token::<usize>(rows)?,
                lines.parse_token::<usize>(cols)?,
            );
            if shape != model.params.value(id).shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {shape:?}, config implies {:?}",
                    model.params.value(id).shape()
                )));
            }
            let mut data = Vec::with_capacity(shape.0 * shape.1);
            for _ in 0..shape.0 {
                let row = lines.next_line()?;
                let before = data.len();
                for tok in row.split_whitespace() {
                    data.push(lines.parse_token::<f64>(tok)?);
                }
                if data.len() - before != shape.1 {
                    return Err(lines.error(&format!("expected {} values in row", shape.1)));
                }
            }
            *model.params.value_mut(id) = Matrix::new(shape.0, shape.1, data)?;
        }
        if lines.next_line()? != "end" {
            return Err(lines.error("expected `end`"));
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(BufReader::new(file))
    }
}

struct CheckpointLines<I> {
    inner: I,
    line: usize,
}

impl<I: Iterator<Item = std::io::Result<String>>> CheckpointLines<I> {
    fn error(&self, msg: &str) -> Error {
        Error::Format(format!("line {}: {msg}", self.line))
    }

    fn next_line(&mut self) -> Result<String> {
        self.line += 1;
        match self.inner.next() {
            Some(line) => Ok(line?),
            None => Err(self.error("unexpected end of file")),
        }
    }

    fn parse_token<T: FromStr>(&self, tok: &str) -> Result<T> {
        tok.parse()
            .map_err(|_| self.error(&format!("cannot parse {tok:?}")))
    }

    fn field<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.next_line()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => self.parse_token(v),
            _ => Err(self.error(&format!("expected `{key} <value>`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::END_OF_ANSWER_TOKEN;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(toks("what is this table blue white color")).unwrap()
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            embedding_dim: 6,
            hidden_dim: 8,
            feature_dim: 3,
            use_image: true,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn training_sequence_multiple_words() {
        let v = vocab();
        let s = TrainingSequence::build(
            &toks("what is this ?"),
            &toks("table"),
            vec![],
            &v,
            AnswerMode::MultipleWords,
        )
        .unwrap();
        assert_eq!(v.decode(&s.inputs).unwrap(), toks("what is this ? table"));
        assert_eq!(
            &s.targets[3..],
            &[v.index_of("table").unwrap(), END_OF_ANSWER]
        );
        assert_eq!(s.mask, vec![false, false, false, true, true]);

        let s = TrainingSequence::build(
            &toks("what is this ?"),
            &toks("blue white"),
            vec![],
            &v,
            AnswerMode::MultipleWords,
        )
        .unwrap();
        assert_eq!(v.decode(&s.targets[3..]).unwrap(), toks("blue white $"));
        assert_eq!(s.supervised_positions(), 3);
    }

    #[test]
    fn training_sequence_single_word() {
        let v = vocab();
        let s = TrainingSequence::build(
            &toks("what is this ?"),
            &toks("blue white"),
            vec![],
            &v,
            AnswerMode::SingleWord,
        )
        .unwrap();
        assert_eq!(s.mask, vec![false, false, false, true]);
        assert_eq!(s.targets[3], v.index_of("blue").unwrap());
        assert_eq!(s.inputs.len(), 4);
    }

    #[test]
    fn training_sequence_errors() {
        let v = vocab();
        assert!(TrainingSequence::build(
            &toks("what is this"),
            &toks("table"),
            vec![],
            &v,
            AnswerMode::MultipleWords
        )
        .is_err());
        let empty: Vec<String> = vec![];
        assert!(TrainingSequence::build(
            &toks("what ?"),
            &empty,
            vec![],
            &v,
            AnswerMode::MultipleWords
        )
        .is_err());
    }

    #[test]
    fn zero_parameters_give_log_vocab_loss() {
        let v = vocab();
        let mut m = QaModel::new(tiny_config(), v.clone()).unwrap();
        m.params_mut().values_mut().zero();
        let s = TrainingSequence::build(
            &toks("what is this ?"),
            &toks("blue white"),
            vec![0.2, -1.0, 3.0],
            &v,
            AnswerMode::MultipleWords,
        )
        .unwrap();
        let (loss, _) = m.forward_loss(&s).unwrap();
        assert!((loss - (v.len() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn feature_length_is_checked_only_with_images() {
        let v = vocab();
        let m = QaModel::new(tiny_config(), v.clone()).unwrap();
        let s = TrainingSequence::build(
            &toks("what ?"),
            &toks("table"),
            vec![1.0],
            &v,
            AnswerMode::MultipleWords,
        )
        .unwrap();
        assert!(matches!(m.forward_loss(&s), Err(Error::Shape { .. })));
        let blind = QaModel::new(
            ModelConfig {
                use_image: false,
                ..tiny_config()
            },
            v,
        )
        .unwrap();
        assert!(blind.forward_loss(&s).is_ok());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..4 {
            let mode = if seed % 2 == 0 {
                AnswerMode::MultipleWords
            } else {
                AnswerMode::SingleWord
            };
            let (m, s) = random_gradcheck_case(seed, 12, 6, 8, 3, 3, 2, mode).unwrap();
            let report = m.gradient_check(&s, 1e-5, 1e-5).unwrap();
            assert!(report.passed(), "seed {seed}: {:?}", report.worst());
        }
    }

    #[test]
    fn masked_targets_do_not_matter() {
        let (mut m, s) =
            random_gradcheck_case(7, 15, 5, 6, 2, 5, 2, AnswerMode::MultipleWords).unwrap();
        let loss = m.compute_gradients(&s).unwrap();
        let grads = m.params().grads().clone();
        let mut other = s.clone();
        for (t, m) in other.targets.iter_mut().zip(&s.mask) {
            if !m {
                *t = 9;
            }
        }
        assert_eq!(
            m.compute_gradients(&other).unwrap().to_bits(),
            loss.to_bits()
        );
        assert_eq!(m.params().grads(), &grads);
    }

    #[test]
    fn learning_rate_zero_leaves_parameters() {
        let (m, s) =
            random_gradcheck_case(3, 10, 4, 5, 0, 3, 1, AnswerMode::MultipleWords).unwrap();
        let mut m = QaModel::new(
            ModelConfig {
                learning_rate: 0.0,
                ..m.config.clone()
            },
            m.vocab.clone(),
        )
        .unwrap();
        let before = m.params().values().clone();
        let mut trainer = Trainer::new(&m);
        trainer.train_epoch(&mut m, &[s.clone(), s]).unwrap();
        assert_eq!(m.params().values(), &before);
        assert!(Trainer::new(&m).train_epoch(&mut m, &[]).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (mut m, s) =
                random_gradcheck_case(4, 10, 4, 5, 2, 3, 2, AnswerMode::MultipleWords).unwrap();
            let (_, s2) =
                random_gradcheck_case(5, 10, 4, 5, 2, 4, 1, AnswerMode::MultipleWords).unwrap();
            let mut t = Trainer::new(&m);
            for _ in 0..3 {
                t.train_epoch(&mut m, &[s.clone(), s2.clone()]).unwrap();
            }
            m.params().values().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_loss_reports_example() {
        let (mut m, s) =
            random_gradcheck_case(4, 10, 4, 5, 0, 3, 2, AnswerMode::MultipleWords).unwrap();
        let id = m.output_bias_id();
        m.params_mut().value_mut(id).data_mut()[3] = f64::NAN;
        let err = Trainer::new(&m).train_epoch(&mut m, &[s]).unwrap_err();
        assert!(
            matches!(err, Error::Training { ref example, .. } if example == "gradcheck-4"),
            "{err}"
        );
    }

    fn with_bias(m: &mut QaModel, f: impl Fn(usize) -> f64) {
        let id = m.output_bias_id();
        let w = m.layout.output_w;
        m.params_mut().value_mut(w).fill(0.0);
        for (i, b) in m
            .params_mut()
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .enumerate()
        {
            *b = f(i);
        }
    }

    #[test]
    fn end_token_first_gives_empty_answer() {
        let mut m = QaModel::new(tiny_config(), vocab()).unwrap();
        with_bias(&mut m, |i| if i == END_OF_ANSWER { 5.0 } else { 0.0 });
        let r = m
            .predict_answer(&toks("what is this ?"), &[0.0; 3])
            .unwrap();
        assert!(r.words.is_empty() && !r.truncated);
        assert_eq!(r.probabilities.len(), 1);
    }

    #[test]
    fn decode_cap_truncates() {
        let v = vocab();
        let table = v.index_of("table").unwrap();
        let mut m = QaModel::new(
            ModelConfig {
                max_decode_len: 1,
                ..tiny_config()
            },
            v,
        )
        .unwrap();
        with_bias(&mut m, |i| if i == table { 5.0 } else { 0.0 });
        let r = m.predict_answer(&toks("what ?"), &[0.0; 3]).unwrap();
        assert_eq!(r.words, toks("table"));
        assert!(r.truncated);

        m.config.max_decode_len = 4;
        let r = m.predict_answer(&toks("what ?"), &[0.0; 3]).unwrap();
        assert_eq!(r.words, toks("table table table table"));
        m.config.forbid_repeats = true;
        let r = m.predict_answer(&toks("what ?"), &[0.0; 3]).unwrap();
        let mut dedup = r.words.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), r.words.len());
        assert!(!r.words.iter().any(|w| w == END_OF_ANSWER_TOKEN));
    }

    #[test]
    fn ties_pick_the_lowest_index() {
        let v = vocab();
        let mut m = QaModel::new(tiny_config(), v.clone()).unwrap();
        with_bias(&mut m, |i| if i >= 5 { 1.0 } else { 0.0 });
        assert_eq!(
            m.predict_single_word(&toks("what ?"), &[0.0; 3]).unwrap(),
            v.word(5).unwrap()
        );
    }

    #[test]
    fn single_word_excludes_reserved_tokens() {
        let mut m = QaModel::new(tiny_config(), vocab()).unwrap();
        with_bias(&mut m, |i| {
            [10.0, 9.0, 8.0, 1.0].get(i).copied().unwrap_or(0.0)
        });
        assert_eq!(
            m.predict_single_word(&toks("what ?"), &[0.0; 3]).unwrap(),
            "what"
        );
        assert!(m.predict_single_word(&toks("what"), &[0.0; 3]).is_err());
        assert!(m.predict_answer(&toks("what"), &[0.0; 3]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (m, _) = random_gradcheck_case(9, 14, 5, 6, 4, 3, 2, AnswerMode::SingleWord).unwrap();
        let mut first = Vec::new();
        m.write_checkpoint(&mut first).unwrap();
        let loaded = QaModel::read_checkpoint(&first[..]).unwrap();
        assert_eq!(loaded.params().values(), m.params().values());
        assert_eq!(loaded.config(), m.config());
        assert_eq!(loaded.vocabulary(), m.vocabulary());
        let mut second = Vec::new();
        loaded.write_checkpoint(&mut second).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn checkpoint_rejects_truncation_and_version() {
        let (m, _) =
            random_gradcheck_case(9, 10, 3, 4, 0, 3, 2, AnswerMode::MultipleWords).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        for cut in [0, 10, buf.len() / 2, buf.len() - 4] {
            assert!(
                matches!(QaModel::read_checkpoint(&buf[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
        let text =
            String::from_utf8(buf)
                .unwrap()
                .replacen("nqa-checkpoint 1", "nqa-checkpoint 2", 1);
        assert!(matches!(
            QaModel::read_checkpoint(text.as_bytes()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig {
            hidden_dim: 0,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            max_decode_len: 0,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            use_image: true,
            feature_dim: 0,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig::default().validate().is_ok());
        assert_eq!(
            "single".parse::<AnswerMode>().unwrap(),
            AnswerMode::SingleWord
        );
    }
}
