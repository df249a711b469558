//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Criterion 4 needs the public ATIS CTF files and
//! GloVe-100d vectors on disk; see the README for the expected paths.

mod common;

use std::io::Cursor;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use jointnlu::autodiff::{grad_check, Tape, Tensor, TensorId};
use jointnlu::corpus::{
    build_vocabularies, parse_corpus, split_validation, write_native, Corpus, CorpusFormat,
};
use jointnlu::embeddings::{load_contextual, load_embedding_text, write_contextual};
use jointnlu::error::Result;
use jointnlu::eval::{entity_f1, evaluate};
use jointnlu::model::{encode_batch, joint_loss, Model, ModelConfig, Variant, WordSource};
use jointnlu::train::{
    bench_epochs, epoch_timer, evaluate_loss, fit, make_batches, EarlyStopper, TrainConfig,
};

fn pass(criterion: usize, name: &str, detail: &str) {
    println!("ACCEPTANCE {criterion} ({name}): PASS {detail}");
}

// --- criterion 1: gradient correctness -----------------------------------

/// Builds a scalar loss from a layer output by dotting it against fixed
/// pseudo-random coefficients, so every output coordinate gets a distinct
/// gradient.
fn dot_loss(tape: &mut Tape<f64>, out: TensorId, seed: u64) -> Result<TensorId> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let coeffs: Vec<f64> = (0..tape.value(out).len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let c = tape.leaf(Tensor::new(shape, coeffs)?);
    let prod = tape.mul(out, c)?;
    tape.sum_all(prod)
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha20Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Gradient-checks one layer: `build` maps the parameter leaves to a layer
/// output, which is reduced to a scalar by `dot_loss`.
fn check_layer<F>(name: &str, shapes: &[Vec<usize>], build: F)
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let mut rng = ChaCha20Rng::seed_from_u64(0xC0FFEE ^ name.len() as u64);
    let mut params: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| random_tensor(s.clone(), &mut rng))
        .collect();
    let err = grad_check(
        &mut params,
        |p, want| {
            let mut tape = Tape::new();
            let ids: Vec<TensorId> = p.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
            let out = build(&mut tape, &ids)?;
            let loss = if tape.value(out).len() == 1 {
                out
            } else {
                dot_loss(&mut tape, out, 7)?
            };
            let value = tape.value(loss).data()[0];
            if want {
                let grads = tape.backward(loss)?;
                let mut out_grads = Vec::with_capacity(ids.len());
                let mut grads = grads;
                for (&id, t) in ids.iter().zip(p) {
                    out_grads.push(grads.take(id, t.len()));
                }
                Ok((value, Some(out_grads)))
            } else {
                Ok((value, None))
            }
        },
        1e-5,
        11,
    )
    .unwrap();
    assert!(err < 1e-5, "layer {name}: max relative error {err}");
}

fn full_model_grad_error(variant: Variant) -> f64 {
    // batch of 2 short utterances from the fixture
    let corpus = common::fixture_corpus();
    let vocabs = build_vocabularies(&corpus);
    let table = common::fixture_embeddings(7, 21);
    let source = WordSource::Static(&table);

    let mut config = ModelConfig::new(variant, 7);
    config.char_emb_dim = 4;
    config.char_filters = 5;
    config.max_char_len = 6;
    config.hidden = 8;
    config.dropout_rate = 0.2;
    config.init_seed = 3;
    let mut model: Model<f64> = Model::build(config.clone(), vocabs.clone()).unwrap();

    let utts = [&corpus.utterances[15], &corpus.utterances[16]];
    let batch = encode_batch::<f64>(&utts, &vocabs, &source, &config).unwrap();

    let mut params: Vec<Tensor<f64>> = model.param_tensors().to_vec();
    grad_check(
        &mut params,
        |p, want| {
            model
                .param_tensors_mut()
                .iter_mut()
                .zip(p)
                .for_each(|(slot, t)| *slot = t.clone());
            // fixed dropout seed: the loss stays deterministic under
            // parameter perturbation while still exercising dropout
            let mut rng = ChaCha20Rng::seed_from_u64(17);
            let mut pass = model.forward(&batch, true, &mut rng)?;
            let loss = joint_loss(
                &mut pass.tape,
                pass.slot_logits,
                pass.intent_logits,
                &batch.slot_targets,
                &batch.intent_targets,
                &batch.mask,
                1.0,
                1.0,
            )?;
            let value = pass.tape.value(loss).data()[0];
            if want {
                let mut grads = pass.tape.backward(loss)?;
                let gvecs: Vec<Vec<f64>> = pass
                    .param_ids
                    .iter()
                    .zip(p)
                    .map(|(&id, t)| grads.take(id, t.len()))
                    .collect();
                Ok((value, Some(gvecs)))
            } else {
                Ok((value, None))
            }
        },
        1e-5,
        5,
    )
    .unwrap()
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let b = 2usize;

    check_layer("matmul", &[vec![b, 3], vec![3, 4]], |tape, ids| {
        tape.matmul(ids[0], ids[1])
    });
    check_layer("add_bias", &[vec![b, 4], vec![4]], |tape, ids| {
        tape.add_bias(ids[0], ids[1])
    });
    check_layer(
        "concat_last_axis",
        &[vec![b, 3], vec![b, 2]],
        |tape, ids| tape.concat_last(ids[0], ids[1]),
    );
    check_layer("narrow_last_axis", &[vec![b, 6]], |tape, ids| {
        tape.narrow_last(ids[0], 2, 3)
    });
    check_layer("tanh", &[vec![b, 5]], |tape, ids| tape.tanh(ids[0]));
    check_layer("sigmoid", &[vec![b, 5]], |tape, ids| tape.sigmoid(ids[0]));
    check_layer("relu", &[vec![b, 5]], |tape, ids| tape.relu(ids[0]));
    check_layer("softmax_last_axis", &[vec![b, 5]], |tape, ids| {
        tape.softmax_last(ids[0])
    });
    check_layer("embedding_gather", &[vec![6, 3]], |tape, ids| {
        tape.gather(ids[0], &[0, 2, 5, 2], &[2, 2])
    });
    check_layer(
        "conv1d_over_time",
        &[vec![b, 5, 3], vec![3, 3, 4], vec![4]],
        |tape, ids| tape.conv1d_over_time(ids[0], ids[1], ids[2]),
    );
    check_layer("max_pool_over_time", &[vec![b, 5, 3]], |tape, ids| {
        let conv = tape.max_pool_over_time(ids[0])?;
        Ok(conv)
    });
    check_layer("dropout", &[vec![b, 8]], |tape, ids| {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        tape.dropout(ids[0], 0.25, true, &mut rng)
    });
    check_layer("scale_rows", &[vec![b, 4]], |tape, ids| {
        tape.scale_rows(ids[0], vec![1.0, 0.5])
    });
    check_layer("select_stack_time", &[vec![b, 3, 4]], |tape, ids| {
        let t0 = tape.select_time(ids[0], 0)?;
        let t2 = tape.select_time(ids[0], 2)?;
        tape.stack_time(&[t0, t2, t0])
    });
    check_layer("masked_mean_over_time", &[vec![b, 3, 4]], |tape, ids| {
        tape.masked_mean_over_time(ids[0], &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0])
    });
    check_layer("masked_cross_entropy", &[vec![b, 3, 4]], |tape, ids| {
        tape.masked_cross_entropy(ids[0], &[1, 3, 0, 2, 0, 0], &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0])
    });
    check_layer(
        "lstm_cell",
        &[vec![b, 3], vec![5, 8], vec![8]],
        |tape, ids| {
            let h0 = tape.leaf(Tensor::zeros(vec![b, 2]));
            let c0 = tape.leaf(Tensor::zeros(vec![b, 2]));
            let params = jointnlu::autodiff::LstmParamIds {
                weights: ids[1],
                bias: ids[2],
            };
            let (h, c) = jointnlu::autodiff::lstm_cell(tape, ids[0], h0, c0, params)?;
            let hc = tape.concat_last(h, c)?;
            Ok(hc)
        },
    );
    check_layer(
        "bilstm",
        &[vec![b, 3, 4], vec![6, 8], vec![8], vec![6, 8], vec![8]],
        |tape, ids| {
            let mask = vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0];
            let out = jointnlu::autodiff::bilstm(
                tape,
                ids[0],
                &mask,
                jointnlu::autodiff::LstmParamIds {
                    weights: ids[1],
                    bias: ids[2],
                },
                jointnlu::autodiff::LstmParamIds {
                    weights: ids[3],
                    bias: ids[4],
                },
            )?;
            let seq_loss = dot_loss(tape, out.sequence, 31)?;
            let finals = tape.concat_last(out.final_forward, out.final_backward)?;
            let finals_loss = dot_loss(tape, finals, 37)?;
            tape.add(seq_loss, finals_loss)
        },
    );

    let rec_err = full_model_grad_error(Variant::Recurrent);
    assert!(
        rec_err < 1e-5,
        "recurrent joint loss: max relative error {rec_err}"
    );
    let td_err = full_model_grad_error(Variant::TimeDistributed);
    assert!(
        td_err < 1e-5,
        "time_distributed joint loss: max relative error {td_err}"
    );

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 60,
        "gradient checks took {elapsed:.2?}, budget is 1 minute"
    );
    pass(
        1,
        "gradient correctness",
        &format!("recurrent {rec_err:.2e}, time_distributed {td_err:.2e}, {elapsed:.2?}"),
    );
}

// --- criterion 2: F1 oracle equivalence ----------------------------------

/// Independent brute-force span matcher: enumerates every candidate
/// (start, end, type), tests it directly against the tag sequence with
/// conlleval start/continuation rules, and counts exact matches.
mod brute {
    #[derive(PartialEq, Debug)]
    pub struct Chunk {
        pub ty: String,
        pub start: usize,
        pub end: usize,
    }

    fn kind(tag: &str) -> Option<(char, &str)> {
        if tag == "O" {
            return None;
        }
        tag.split_once('-')
            .map(|(p, t)| (p.chars().next().unwrap(), t))
    }

    pub fn chunks(tags: &[String]) -> Vec<Chunk> {
        let n = tags.len();
        let mut out = Vec::new();
        for start in 0..n {
            for end in start..n {
                let Some((p0, ty)) = kind(&tags[start]) else {
                    continue;
                };
                // chunk start: B-, or I- not continuing an identical type
                let is_start = match p0 {
                    'B' => true,
                    'I' => match start.checked_sub(1).map(|i| kind(&tags[i])) {
                        Some(Some((_, prev_ty))) => prev_ty != ty,
                        _ => true,
                    },
                    _ => false,
                };
                if !is_start {
                    continue;
                }
                // every inside position must be I-<ty>
                let body_ok =
                    (start + 1..=end).all(|i| matches!(kind(&tags[i]), Some(('I', t)) if t == ty));
                if !body_ok {
                    continue;
                }
                // must not continue past `end`
                let closed = match tags.get(end + 1).map(|t| kind(t)) {
                    Some(Some(('I', t))) => t != ty,
                    _ => true,
                };
                if closed {
                    out.push(Chunk {
                        ty: ty.to_string(),
                        start,
                        end,
                    });
                }
            }
        }
        out
    }

    /// (precision, recall, f1, matched, pred, gold), micro-averaged.
    pub fn score(
        pred: &[Vec<String>],
        gold: &[Vec<String>],
    ) -> (f64, f64, f64, usize, usize, usize) {
        let mut matched = 0;
        let mut n_pred = 0;
        let mut n_gold = 0;
        for (p, g) in pred.iter().zip(gold) {
            let pc = chunks(p);
            let gc = chunks(g);
            n_pred += pc.len();
            n_gold += gc.len();
            matched += pc.iter().filter(|c| gc.contains(c)).count();
        }
        let precision = if n_pred == 0 {
            0.0
        } else {
            matched as f64 / n_pred as f64
        };
        let recall = if n_gold == 0 {
            0.0
        } else {
            matched as f64 / n_gold as f64
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        (precision, recall, f1, matched, n_pred, n_gold)
    }
}

#[test]
fn criterion_2_f1_oracle_equivalence() {
    let start = Instant::now();
    let types = ["city", "date", "airline", "period"];
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    fn random_tags(rng: &mut ChaCha20Rng, types: &[&str], len: usize) -> Vec<String> {
        (0..len)
            .map(|_| match rng.random_range(0..4) {
                0 | 1 => "O".to_string(),
                2 => format!("B-{}", types[rng.random_range(0..types.len())]),
                _ => format!("I-{}", types[rng.random_range(0..types.len())]),
            })
            .collect()
    }
    let mut pred = Vec::with_capacity(1000);
    let mut gold = Vec::with_capacity(1000);
    for _ in 0..1000 {
        let len = rng.random_range(1..=15);
        pred.push(random_tags(&mut rng, &types, len));
        gold.push(random_tags(&mut rng, &types, len));
    }
    let (metrics, counts) = entity_f1(&pred, &gold).unwrap();
    let (bp, br, bf, bm, bpred, bgold) = brute::score(&pred, &gold);
    assert_eq!(counts.matched, bm);
    assert_eq!(counts.pred_spans, bpred);
    assert_eq!(counts.gold_spans, bgold);
    assert_eq!(metrics.precision, bp);
    assert_eq!(metrics.recall, br);
    assert_eq!(metrics.f1, bf);

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 10,
        "oracle comparison took {elapsed:.2?}, budget is 10 seconds"
    );
    pass(
        2,
        "F1 oracle equivalence",
        &format!(
            "1000 sequence pairs, {} gold / {} pred spans, {elapsed:.2?}",
            bgold, bpred
        ),
    );
}

// --- criterion 3: memorization -------------------------------------------

#[test]
fn criterion_3_memorization() {
    let start = Instant::now();
    let corpus = common::fixture_corpus();
    assert_eq!(corpus.len(), 20);
    let table = common::fixture_embeddings(50, 7);
    let source = WordSource::Static(&table);

    for variant in [Variant::Recurrent, Variant::TimeDistributed] {
        let vocabs = build_vocabularies(&corpus);
        let config = common::memorize_model_config(variant, 50);
        let mut model: Model<f32> = Model::build(config, vocabs).unwrap();
        let train_config = common::memorize_train_config(200);
        let history = fit(&mut model, &corpus, &corpus, &source, &train_config).unwrap();
        assert!(history.records.len() <= 200);
        let report = evaluate(&model, &corpus, &source).unwrap();
        assert_eq!(
            report.intent_accuracy, 1.0,
            "{variant}: intent accuracy {}",
            report.intent_accuracy
        );
        assert_eq!(report.slot.f1, 1.0, "{variant}: slot F1 {}", report.slot.f1);

        // the worked example decodes to its four slots once memorized
        let first = &corpus.utterances[0];
        let prediction = model.predict(&first.tokens, first.id, &source).unwrap();
        assert_eq!(prediction.intent, "flight_info");
        let got: Vec<(String, String)> = prediction
            .entities
            .iter()
            .map(|e| (e.label.clone(), e.text.clone()))
            .collect();
        assert_eq!(
            got,
            vec![
                ("from_city".into(), "pittsburgh".into()),
                ("to_city".into(), "baltimore".into()),
                ("depart_date".into(), "thursday".into()),
                ("depart_time".into(), "morning".into()),
            ]
        );
    }

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 120,
        "memorization took {elapsed:.2?}, budget is 2 minutes"
    );
    pass(
        3,
        "memorization",
        &format!("both variants 1.0/1.0, {elapsed:.2?}"),
    );
}

// --- criterion 4: ATIS reproduction --------------------------------------

fn data_path(env: &str, default_name: &str) -> std::path::PathBuf {
    if let Ok(p) = std::env::var(env) {
        return p.into();
    }
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(default_name)
}

#[test]
fn criterion_4_atis_reproduction() {
    let train_path = data_path("ATIS_TRAIN_CTF", "atis.train.ctf");
    let test_path = data_path("ATIS_TEST_CTF", "atis.test.ctf");
    let glove_path = data_path("GLOVE_100D", "glove.6B.100d.txt");
    for path in [&train_path, &test_path, &glove_path] {
        assert!(
            path.exists(),
            "ACCEPTANCE 4 (ATIS reproduction): FAIL — required data file {} is missing.\n\
             Supply the public ATIS split and GloVe vectors:\n\
             - atis.train.ctf / atis.test.ctf from the CNTK repository\n\
               (Examples/LanguageUnderstanding/ATIS/BrainScript)\n\
             - glove.6B.100d.txt from the GloVe 6B release\n\
             and place them under data/ at the workspace root, or point the\n\
             ATIS_TRAIN_CTF / ATIS_TEST_CTF / GLOVE_100D env vars at them.",
            path.display()
        );
    }
    let start = Instant::now();

    let train_file = std::fs::File::open(&train_path).unwrap();
    let full_train = parse_corpus(
        std::io::BufReader::new(train_file),
        CorpusFormat::Ctf,
        "atis-train",
    )
    .unwrap();
    assert_eq!(full_train.len(), 4978, "ATIS training utterance count");
    let test_file = std::fs::File::open(&test_path).unwrap();
    let test = parse_corpus(
        std::io::BufReader::new(test_file),
        CorpusFormat::Ctf,
        "atis-test",
    )
    .unwrap();
    assert_eq!(test.len(), 893, "ATIS test utterance count");

    let vocabs = build_vocabularies(&full_train);
    assert_eq!(vocabs.intents.len(), 26, "ATIS intent count");
    let glove_file = std::fs::File::open(&glove_path).unwrap();
    let table = load_embedding_text(
        std::io::BufReader::new(glove_file),
        Some(100),
        "glove.6B.100d",
    )
    .unwrap();
    let source = WordSource::Static(&table);

    let (train, val) = split_validation(&full_train, 0.1, 13).unwrap();
    let mut config = ModelConfig::new(Variant::Recurrent, 100);
    config.init_seed = 13;
    let mut model: Model<f32> = Model::build(config, vocabs).unwrap();
    let train_config = TrainConfig {
        shuffle_seed: 13,
        ..TrainConfig::default()
    };
    let history = fit(&mut model, &train, &val, &source, &train_config).unwrap();
    let report = evaluate(&model, &test, &source).unwrap();

    let elapsed = start.elapsed();
    println!(
        "ATIS: {} epochs (best {}), intent accuracy {:.4}, slot F1 {:.4}, token F1 {:.4}, {elapsed:.2?}",
        history.records.len(),
        history.best_epoch,
        report.intent_accuracy,
        report.slot.f1,
        report.slot.token_f1
    );
    assert!(
        report.intent_accuracy >= 0.92,
        "intent accuracy {} below the 0.92 floor",
        report.intent_accuracy
    );
    assert!(
        report.slot.f1 >= 0.93,
        "slot F1 {} below the 0.93 floor",
        report.slot.f1
    );
    assert!(
        elapsed.as_secs() <= 20 * 60,
        "run took {elapsed:.2?}, budget is 20 minutes"
    );
    pass(
        4,
        "ATIS reproduction",
        &format!(
            "intent {:.4} >= 0.92, slot F1 {:.4} >= 0.93, {elapsed:.2?}",
            report.intent_accuracy, report.slot.f1
        ),
    );
}

// --- criterion 5: early stopping rule -------------------------------------

#[test]
fn criterion_5_early_stopping_rule() {
    let losses = [1.0, 0.9, 0.95, 0.93, 0.96];
    let mut stopper = EarlyStopper::new(2);
    let mut stopped_after = None;
    for (epoch, &loss) in losses.iter().enumerate() {
        let (_, stop) = stopper.observe(epoch, loss);
        if stop {
            stopped_after = Some(epoch);
            break;
        }
    }
    assert_eq!(stopped_after, Some(4), "stop after epoch 4");
    assert_eq!(stopper.best_epoch(), 1, "best epoch 1");

    // monotone decreasing sequences run to max_epochs
    let max_epochs = 50;
    let mut stopper = EarlyStopper::new(2);
    for epoch in 0..max_epochs {
        let (_, stop) = stopper.observe(epoch, 1.0 - epoch as f64 * 1e-3);
        assert!(!stop, "must not stop at epoch {epoch}");
    }
    pass(5, "early stopping rule", "sequence and monotone cases");
}

// --- criterion 6: architecture ordering ------------------------------------

#[test]
fn criterion_6_architecture_ordering() {
    let corpus = common::fixture_corpus();
    // enough work per epoch for stable timing
    let mut big = Corpus {
        name: "bench".into(),
        utterances: Vec::new(),
    };
    for rep in 0..10 {
        for utt in &corpus.utterances {
            let mut u = utt.clone();
            u.id = (rep * corpus.len()) as u32 + utt.id;
            big.utterances.push(u);
        }
    }
    let table = common::fixture_embeddings(50, 7);
    let source = WordSource::Static(&table);
    let vocabs = build_vocabularies(&big);

    let mut config1 = ModelConfig::new(Variant::Recurrent, 50);
    config1.init_seed = 2;
    let mut config2 = ModelConfig::new(Variant::TimeDistributed, 50);
    config2.init_seed = 2;
    let mut model1: Model<f32> = Model::build(config1, vocabs.clone()).unwrap();
    let mut model2: Model<f32> = Model::build(config2, vocabs).unwrap();

    let count1 = model1.count_parameters();
    let count2 = model2.count_parameters();
    assert!(
        count2 < count1,
        "parameter ordering violated: {count2} >= {count1}"
    );

    let train_config = TrainConfig::default();
    let times1 = bench_epochs(&mut model1, &big, &source, &train_config, 3).unwrap();
    let times2 = bench_epochs(&mut model2, &big, &source, &train_config, 3).unwrap();
    let mean1: f64 = times1.iter().sum::<f64>() / times1.len() as f64;
    let mean2: f64 = times2.iter().sum::<f64>() / times2.len() as f64;
    assert!(
        mean2 < mean1,
        "epoch-time ordering violated: {mean2:.4}s >= {mean1:.4}s"
    );
    pass(
        6,
        "architecture ordering",
        &format!("params {count2} < {count1}, mean epoch {mean2:.4}s < {mean1:.4}s"),
    );
}

// --- criterion 7: determinism ----------------------------------------------

#[test]
fn criterion_7_determinism() {
    let corpus = common::fixture_corpus();
    let table = common::fixture_embeddings(50, 7);
    let checksum_before = table.checksum();
    let source = WordSource::Static(&table);
    let (train, val) = split_validation(&corpus, 0.2, 3).unwrap();

    let run = || -> Vec<(u64, u64)> {
        let vocabs = build_vocabularies(&train);
        let mut config = common::memorize_model_config(Variant::Recurrent, 50);
        config.dropout_rate = 0.3;
        let mut model: Model<f32> = Model::build(config, vocabs).unwrap();
        let mut train_config = common::memorize_train_config(8);
        train_config.batch_size = 8;
        let history = fit(&mut model, &train, &val, &source, &train_config).unwrap();
        history
            .records
            .iter()
            .map(|r| (r.train_loss.to_bits(), r.val_loss.to_bits()))
            .collect()
    };
    let first = run();
    let second = run();
    assert_eq!(first, second, "loss histories differ bitwise");
    assert_eq!(
        table.checksum(),
        checksum_before,
        "frozen embeddings changed during training"
    );
    pass(
        7,
        "determinism",
        &format!(
            "{} epochs bitwise identical, embeddings frozen",
            first.len()
        ),
    );
}

// --- criterion 8: format round-trips ---------------------------------------

#[test]
fn criterion_8_format_round_trips() {
    // corpus: parse -> serialize -> parse
    let corpus = common::fixture_corpus();
    let mut native = Vec::new();
    write_native(&corpus, &mut native).unwrap();
    let reparsed = parse_corpus(Cursor::new(&native), CorpusFormat::Native, "fixture").unwrap();
    assert_eq!(corpus, reparsed);

    // checkpoint: save -> load -> bitwise-identical forward outputs
    let vocabs = build_vocabularies(&corpus);
    let table = common::fixture_embeddings(50, 7);
    let source = WordSource::Static(&table);
    for variant in [Variant::Recurrent, Variant::TimeDistributed] {
        let config = common::memorize_model_config(variant, 50);
        let model: Model<f32> = Model::build(config.clone(), vocabs.clone()).unwrap();
        let mut buf = Vec::new();
        jointnlu::checkpoint::save_checkpoint(&model, &mut buf).unwrap();
        let loaded: Model<f32> = jointnlu::checkpoint::load_checkpoint(&buf[..]).unwrap();

        let utts: Vec<_> = corpus.utterances.iter().take(4).collect();
        let batch = encode_batch::<f32>(&utts, &vocabs, &source, &config).unwrap();
        let mut rng_a = ChaCha20Rng::seed_from_u64(0);
        let mut rng_b = ChaCha20Rng::seed_from_u64(0);
        let pass_a = model.forward(&batch, false, &mut rng_a).unwrap();
        let pass_b = loaded.forward(&batch, false, &mut rng_b).unwrap();
        for (ids_a, ids_b) in [
            (pass_a.slot_logits, pass_b.slot_logits),
            (pass_a.intent_logits, pass_b.intent_logits),
        ] {
            let a = pass_a.tape.value(ids_a).data();
            let b = pass_b.tape.value(ids_b).data();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(
                    x.to_bits(),
                    y.to_bits(),
                    "{variant}: forward outputs differ"
                );
            }
        }
    }

    // contextual store: load -> serialize -> load
    let store = common::fixture_contextual(&corpus, 16, 9);
    let mut bytes = Vec::new();
    write_contextual(&store, &mut bytes).unwrap();
    let loaded = load_contextual(Cursor::new(&bytes)).unwrap();
    assert_eq!(store, loaded);
    let mut again = Vec::new();
    write_contextual(&loaded, &mut again).unwrap();
    assert_eq!(bytes, again);

    pass(
        8,
        "format round-trips",
        "corpus, checkpoint, contextual store",
    );
}

// --- criterion 9: contextual-embedding path ---------------------------------

#[test]
fn criterion_9_contextual_path() {
    let corpus = common::fixture_corpus();
    let vocabs = build_vocabularies(&corpus);
    let store = common::fixture_contextual(&corpus, 32, 4);
    let source = WordSource::Contextual(&store);

    let config = common::memorize_model_config(Variant::TimeDistributed, 32);
    let mut model: Model<f32> = Model::build(config, vocabs.clone()).unwrap();
    let train_config = common::memorize_train_config(40);
    let history = fit(&mut model, &corpus, &corpus, &source, &train_config).unwrap();
    let first = history.records.first().unwrap().train_loss;
    let last = history.records.last().unwrap().train_loss;
    assert!(
        last < first * 0.5,
        "training on contextual vectors did not reduce the loss ({first} -> {last})"
    );
    let final_loss = evaluate_loss(&model, &corpus, &source, 32, (1.0, 1.0)).unwrap();
    assert!(final_loss.is_finite());

    // an incomplete store is detected at batch construction
    let mut broken = store.clone();
    broken.remove(5, 2);
    let broken_source = WordSource::Contextual(&broken);
    let err =
        make_batches::<f32>(&corpus, &vocabs, &broken_source, model.config(), 32, 0).unwrap_err();
    assert!(
        err.to_string().contains("missing contextual vector"),
        "unexpected error: {err}"
    );
    pass(
        9,
        "contextual-embedding path",
        &format!("loss {first:.3} -> {last:.3}, missing key detected"),
    );
}

// --- supporting invariants used by several criteria -------------------------

#[test]
fn fit_restores_best_epoch_parameters() {
    let corpus = common::fixture_corpus();
    let table = common::fixture_embeddings(50, 7);
    let source = WordSource::Static(&table);
    let (train, val) = split_validation(&corpus, 0.2, 3).unwrap();
    let vocabs = build_vocabularies(&train);
    let mut config = common::memorize_model_config(Variant::TimeDistributed, 50);
    config.dropout_rate = 0.4;
    let mut model: Model<f32> = Model::build(config, vocabs).unwrap();
    let mut train_config = common::memorize_train_config(12);
    train_config.batch_size = 4;
    train_config.patience = 2;
    let history = fit(&mut model, &train, &val, &source, &train_config).unwrap();

    // contiguous epochs from zero
    for (i, r) in history.records.iter().enumerate() {
        assert_eq!(r.epoch, i);
    }
    // best epoch has the minimal recorded validation loss
    let best = history.records[history.best_epoch].val_loss;
    assert!(history.records.iter().all(|r| r.val_loss >= best));
    // the returned model reproduces the best epoch's validation loss
    let weights = (1.0, 1.0);
    let loss_now = evaluate_loss(&model, &val, &source, train_config.batch_size, weights).unwrap();
    assert_eq!(loss_now.to_bits(), best.to_bits());
    // stopping rule: epochs past best are bounded by patience + 1
    assert!(history.records.len() - 1 - history.best_epoch <= train_config.patience + 1);
    // the timer is an arithmetic mean
    let mean = epoch_timer(&history).unwrap();
    assert!(mean > 0.0);
}
