use nqa_core::dataset::{parse_qa_records, split_by_agreement, FeatureStore, QaRecord};
use nqa_core::lstm::{init_params, lstm_forward, LstmState};
use nqa_core::metrics::{accuracy, pair_score, thresholded_mu, wups, AnswerSet, Taxonomy};
use nqa_core::qa_model::{AnswerMode, ModelConfig, QaModel, TrainingSequence};
use nqa_core::text::{Vocabulary, QUESTION_MARK_TOKEN};
use nqa_core::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn word() -> impl Strategy<Value = String> {
    "[a-e]{1,2}"
}

/// Random tree over `n0..nk` with words `w0..w5` given one or two senses.
fn random_taxonomy(rng: &mut ChaCha8Rng) -> Taxonomy {
    let nodes = rng.gen_range(2..10);
    let edges: Vec<(String, String)> = (1..nodes)
        .map(|k| (format!("n{k}"), format!("n{}", rng.gen_range(0..k))))
        .collect();
    let mut lexicon = Vec::new();
    for w in 0..6 {
        let mut senses: Vec<usize> = (0..rng.gen_range(1..=2))
            .map(|_| rng.gen_range(0..nodes))
            .collect();
        senses.dedup();
        lexicon.extend(
            senses
                .into_iter()
                .map(|n| (format!("w{w}"), format!("n{n}"))),
        );
    }
    Taxonomy::new("n0", &edges, &lexicon).unwrap()
}

fn random_set(rng: &mut ChaCha8Rng) -> AnswerSet {
    let pool = ["w0", "w1", "w2", "w3", "w4", "w5", "zz"];
    AnswerSet::new((0..rng.gen_range(0..4)).map(|_| *pool.choose(rng).unwrap()))
}

fn tiny_model(seed: u64, use_image: bool) -> QaModel {
    let vocab = Vocabulary::from_words((0..8).map(|i| format!("w{i}"))).unwrap();
    let config = ModelConfig {
        embedding_dim: 3,
        hidden_dim: 4,
        feature_dim: if use_image { 3 } else { 0 },
        use_image,
        init_scale: 0.7,
        seed,
        ..ModelConfig::default()
    };
    QaModel::new(config, vocab).unwrap()
}

fn question(rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut q: Vec<String> = (0..rng.gen_range(0..4))
        .map(|_| format!("w{}", rng.gen_range(0..10)))
        .collect();
    q.push(QUESTION_MARK_TOKEN.into());
    q
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vocabulary_is_deterministic(corpus in prop::collection::vec(prop::collection::vec(word(), 0..6), 0..8)) {
        let a = Vocabulary::build(&corpus, 1).unwrap();
        let b = Vocabulary::build(&corpus, 1).unwrap();
        prop_assert_eq!(a.words(), b.words());
    }

    #[test]
    fn encode_decode_are_inverse(corpus in prop::collection::vec(prop::collection::vec(word(), 1..6), 1..8), picks in prop::collection::vec(any::<prop::sample::Index>(), 0..10)) {
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let indices: Vec<usize> = picks.iter().map(|i| i.index(vocab.len())).collect();
        let words = vocab.decode(&indices).unwrap();
        prop_assert_eq!(&vocab.encode(&words).indices, &indices);
        let tokens: Vec<String> = corpus.concat();
        let round = vocab.decode(&vocab.encode(&tokens).indices).unwrap();
        prop_assert_eq!(round, tokens);
    }

    #[test]
    fn lstm_forward_is_deterministic_and_gates_stay_inside(seed in any::<u64>(), d in 1usize..4, h in 1usize..5, t in 1usize..6, scale in 0.1f64..4.0) {
        let (store, p) = init_params(d, h, scale, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let inputs: Vec<Vec<f64>> = (0..t).map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let (h1, s1, caches) = lstm_forward(&inputs, &p, store.values(), &LstmState::zeros(h)).unwrap();
        let (h2, s2, _) = lstm_forward(&inputs, &p, store.values(), &LstmState::zeros(h)).unwrap();
        prop_assert_eq!(h1.iter().map(|v| bits(v)).collect::<Vec<_>>(), h2.iter().map(|v| bits(v)).collect::<Vec<_>>());
        prop_assert_eq!(bits(&s1.c), bits(&s2.c));
        for c in &caches {
            for x in c.i.iter().chain(&c.f).chain(&c.o) {
                prop_assert!(*x > 0.0 && *x < 1.0);
            }
            prop_assert!(c.g.iter().all(|x| *x > -1.0 && *x < 1.0));
        }
    }

    #[test]
    fn language_only_ignores_features(seed in any::<u64>(), f1 in prop::collection::vec(-5.0f64..5.0, 0..6), f2 in prop::collection::vec(-5.0f64..5.0, 0..6)) {
        let mut model = tiny_model(seed, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = question(&mut rng);
        let answer = ["w1", "w2"];
        let seq1 = TrainingSequence::build(&q, &answer, f1.clone(), model.vocabulary(), AnswerMode::MultipleWords).unwrap();
        let seq2 = TrainingSequence { features: f2.clone(), ..seq1.clone() };
        let l1 = model.compute_gradients(&seq1).unwrap();
        let g1 = model.params().grads().clone();
        let l2 = model.compute_gradients(&seq2).unwrap();
        prop_assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.iter().zip(model.params().grads().iter()) {
            prop_assert_eq!(bits(a.data()), bits(b.data()));
        }
        prop_assert_eq!(model.predict(&q, &f1).unwrap(), model.predict(&q, &f2).unwrap());
    }

    #[test]
    fn decoding_ignores_constant_bias_shift(seed in any::<u64>(), shift in -8i32..8, image in any::<bool>()) {
        let model = tiny_model(seed, image);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = question(&mut rng);
        let x: Vec<f64> = if image { (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect() } else { Vec::new() };
        let mut shifted = model.clone();
        let id = shifted.output_bias_id();
        for b in shifted.params_mut().value_mut(id).data_mut() {
            *b += f64::from(shift);
        }
        prop_assert_eq!(model.predict_answer(&q, &x).unwrap().words, shifted.predict_answer(&q, &x).unwrap().words);
        prop_assert_eq!(model.predict_single_word(&q, &x).unwrap(), shifted.predict_single_word(&q, &x).unwrap());
    }

    #[test]
    fn wups_is_monotone_in_threshold(seed in any::<u64>(), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tax = random_taxonomy(&mut rng);
        let n = rng.gen_range(1..6);
        let preds: Vec<AnswerSet> = (0..n).map(|_| random_set(&mut rng)).collect();
        let refs: Vec<AnswerSet> = (0..n).map(|_| random_set(&mut rng)).collect();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let w_lo = wups(&preds, &refs, Some(&tax), lo).unwrap();
        let w_hi = wups(&preds, &refs, Some(&tax), hi).unwrap();
        let acc = accuracy(&preds, &refs).unwrap();
        prop_assert!(w_lo >= w_hi);
        prop_assert!(acc <= w_hi);
        for x in [w_lo, w_hi, acc] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn pair_score_is_symmetric(seed in any::<u64>(), t in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tax = random_taxonomy(&mut rng);
        let (a, b) = (random_set(&mut rng), random_set(&mut rng));
        let mu = |x: &str, y: &str| thresholded_mu(x, y, &tax, t);
        prop_assert_eq!(pair_score(&a, &b, mu).to_bits(), pair_score(&b, &a, mu).to_bits());
    }

    #[test]
    fn agreement_split_sizes_sum(answers in prop::collection::vec(prop::collection::vec(prop::collection::vec(word(), 1..3), 1..5), 0..12)) {
        let records: Vec<QaRecord> = answers
            .into_iter()
            .enumerate()
            .map(|(i, answers)| QaRecord { id: format!("r{i}"), image_id: "img".into(), question: "what ?".into(), answers })
            .collect();
        let (n, h, f) = split_by_agreement(&records).unwrap().sizes();
        prop_assert_eq!(n + h + f, records.len());
    }
}

fn check_positioned(result: Result<impl Sized, Error>, text: &str) -> Result<(), TestCaseError> {
    if let Err(Error::Parse { line, .. }) = &result {
        prop_assert!(
            *line >= 1 && *line <= text.lines().count().max(1),
            "line {} of {}",
            line,
            text.lines().count()
        );
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Arbitrary input either parses or fails with an error; parse errors point inside the file.
    #[test]
    fn loaders_are_total(text in "(\\PC|\n){0,200}") {
        check_positioned(parse_qa_records(&text, "fuzz"), &text)?;
        check_positioned(FeatureStore::parse(&text, "fuzz"), &text)?;
        let _ = Taxonomy::parse(&text, &text);
        let _ = QaModel::read_checkpoint(text.as_bytes());
    }

    #[test]
    fn feature_tables_parse_fully_or_not_at_all(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 2..=2), 0..6), bad_row in any::<prop::sample::Index>(), corrupt in any::<bool>()) {
        let mut text = String::from("dim 2\n");
        for (k, r) in rows.iter().enumerate() {
            text.push_str(&format!("img{k} {} {}\n", r[0], r[1]));
        }
        if corrupt && !rows.is_empty() {
            let k = bad_row.index(rows.len());
            text = text.replace(&format!("img{k} "), &format!("img{k} nan "));
        }
        match FeatureStore::parse(&text, "t") {
            Ok(store) => {
                prop_assert!(!(corrupt && !rows.is_empty()));
                prop_assert_eq!(store.len(), rows.len());
            }
            Err(Error::Parse { line, .. }) => prop_assert!(corrupt && line >= 2),
            Err(e) => prop_assert!(false, "unexpected error {}", e),
        }
    }
}
