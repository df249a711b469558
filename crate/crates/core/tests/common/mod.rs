//! Shared fixtures: a 20-utterance synthetic corpus (3 intents, 4 entity
//! types) in which every token carries one consistent tag, so both
//! architectures can memorize it perfectly, plus random frozen embeddings.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use jointnlu::autodiff::AdamConfig;
use jointnlu::corpus::{Corpus, Utterance};
use jointnlu::embeddings::{ContextualStore, EmbeddingTable};
use jointnlu::model::{ModelConfig, Variant};
use jointnlu::train::TrainConfig;

#[allow(dead_code)]
pub const FIXTURE_INTENTS: usize = 3;
#[allow(dead_code)]
pub const FIXTURE_ENTITY_TYPES: usize = 4;

/// (tokens, tags, intent) rows; tags use F=from_city, T=to_city,
/// D=depart_date, M=depart_time shorthand expanded below.
const ROWS: &[(&str, &str, &str)] = &[
    (
        "what flights are available from pittsburgh to baltimore on thursday morning",
        "O O O O O B-from_city O B-to_city O B-depart_date B-depart_time",
        "flight_info",
    ),
    (
        "show me flights from denver to atlanta on monday",
        "O O O O B-from_city O B-to_city O B-depart_date",
        "flight_info",
    ),
    (
        "show me the flights from boston to dallas",
        "O O O O O B-from_city O B-to_city",
        "flight_info",
    ),
    (
        "what flights are available from oakland to seattle on friday evening",
        "O O O O O B-from_city O B-to_city O B-depart_date B-depart_time",
        "flight_info",
    ),
    (
        "i want flights from pittsburgh to atlanta on tuesday noon",
        "O O O O B-from_city O B-to_city O B-depart_date B-depart_time",
        "flight_info",
    ),
    (
        "show me flights to new york on friday",
        "O O O O B-to_city I-to_city O B-depart_date",
        "flight_info",
    ),
    (
        "what flights are available from denver to baltimore on monday afternoon",
        "O O O O O B-from_city O B-to_city O B-depart_date B-depart_time",
        "flight_info",
    ),
    (
        "flights from boston to seattle leaving thursday morning",
        "O O B-from_city O B-to_city O B-depart_date B-depart_time",
        "flight_info",
    ),
    (
        "how much does the ticket cost from denver to baltimore",
        "O O O O O O O B-from_city O B-to_city",
        "airfare",
    ),
    (
        "what is the fare from pittsburgh to dallas on monday",
        "O O O O O B-from_city O B-to_city O B-depart_date",
        "airfare",
    ),
    (
        "show me the cost of a ticket from oakland to atlanta",
        "O O O O O O O O B-from_city O B-to_city",
        "airfare",
    ),
    (
        "how much is a ticket from boston to baltimore on tuesday morning",
        "O O O O O O B-from_city O B-to_city O B-depart_date B-depart_time",
        "airfare",
    ),
    (
        "what is the fare to seattle on thursday",
        "O O O O O B-to_city O B-depart_date",
        "airfare",
    ),
    (
        "the fare from denver to new york on friday evening",
        "O O O B-from_city O B-to_city I-to_city O B-depart_date B-depart_time",
        "airfare",
    ),
    (
        "what ground transportation is available at the airport",
        "O O O O O O O O",
        "ground_service",
    ),
    (
        "i need ground transportation in the city",
        "O O O O O O O",
        "ground_service",
    ),
    (
        "show me the ground transportation options",
        "O O O O O O",
        "ground_service",
    ),
    (
        "is there ground transportation at the airport",
        "O O O O O O O",
        "ground_service",
    ),
    (
        "i want ground transportation for the trip",
        "O O O O O O O",
        "ground_service",
    ),
    (
        "how does ground transportation work there",
        "O O O O O O",
        "ground_service",
    ),
];

pub fn fixture_corpus() -> Corpus {
    let utterances = ROWS
        .iter()
        .enumerate()
        .map(|(i, (tokens, tags, intent))| {
            let tokens: Vec<String> = tokens.split_whitespace().map(String::from).collect();
            let tags: Vec<String> = tags.split_whitespace().map(String::from).collect();
            assert_eq!(tokens.len(), tags.len(), "fixture row {i} misaligned");
            Utterance {
                id: i as u32,
                tokens,
                tags,
                intent: intent.to_string(),
            }
        })
        .collect();
    Corpus {
        name: "fixture".into(),
        utterances,
    }
}

/// Random frozen vectors covering every fixture token.
pub fn fixture_embeddings(dim: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut entries: HashMap<String, Vec<f32>> = HashMap::new();
    for utt in &fixture_corpus().utterances {
        for token in &utt.tokens {
            entries
                .entry(token.clone())
                .or_insert_with(|| (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect());
        }
    }
    EmbeddingTable::from_entries("fixture-random", dim, entries).unwrap()
}

/// Random contextual vectors covering every (utterance, position) pair of
/// the corpus.
#[allow(dead_code)]
pub fn fixture_contextual(corpus: &Corpus, dim: usize, seed: u64) -> ContextualStore {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut store = ContextualStore::new(dim);
    for utt in &corpus.utterances {
        for pos in 0..utt.len() {
            let vector: Vec<f32> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
            store.insert(utt.id, pos as u16, vector).unwrap();
        }
    }
    store
}

/// A configuration small and regular enough to memorize the fixture fast;
/// dropout off because the goal is an exact fit.
pub fn memorize_model_config(variant: Variant, word_dim: usize) -> ModelConfig {
    let mut config = ModelConfig::new(variant, word_dim);
    config.hidden = 32;
    config.char_emb_dim = 12;
    config.char_filters = 16;
    config.max_char_len = 16;
    config.dropout_rate = 0.0;
    config.init_seed = 1;
    config
}

pub fn memorize_train_config(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs,
        // validating on the training fixture itself: the loss keeps falling,
        // so early stopping must not trigger before the fit is exact
        patience: max_epochs,
        shuffle_seed: 5,
        optimizer: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}
