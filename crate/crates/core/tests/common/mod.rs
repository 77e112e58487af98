//! Shared fixtures for integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfguide::encoder::{EncoderConfig, EncoderParams};
use selfguide::text::{SimilarityRecord, Vocab};

const SUBJECTS: [&str; 40] = [
    "farmer", "pilot", "doctor", "teacher", "baker", "sailor", "painter", "singer", "driver", "lawyer", "nurse", "miner",
    "tailor", "hunter", "monk", "judge", "clerk", "chef", "poet", "guard", "scout", "smith", "dancer", "writer", "priest",
    "knight", "cowboy", "banker", "plumber", "barber", "butcher", "captain", "drummer", "fisher", "gardener", "jockey",
    "mason", "porter", "sheriff", "weaver",
];
const VERBS: [&str; 40] = [
    "painted", "carried", "cleaned", "repaired", "sold", "bought", "washed", "opened", "closed", "moved", "lifted",
    "dropped", "found", "lost", "built", "broke", "checked", "counted", "filled", "emptied", "folded", "packed",
    "pushed", "pulled", "wrapped", "stole", "hid", "burned", "watered", "polished", "measured", "signed", "printed",
    "shook", "tied", "rolled", "sorted", "loaded", "locked", "shared",
];
const OBJECTS: [&str; 40] = [
    "fence", "boat", "lamp", "table", "wagon", "basket", "ladder", "mirror", "barrel", "blanket", "bucket", "candle",
    "carpet", "chair", "clock", "drum", "engine", "flag", "guitar", "hammer", "helmet", "kettle", "letter", "map",
    "needle", "piano", "pillow", "rope", "saddle", "shovel", "statue", "sword", "tent", "ticket", "trumpet", "umbrella",
    "violin", "wheel", "window", "bottle",
];
const ADJECTIVES: [&str; 6] = ["old", "young", "tired", "cheerful", "quiet", "busy"];
const TIMES: [&str; 4] = ["yesterday", "today", "at noon", "last night"];

/// Surface forms used for training variants.
const TRAIN_TEMPLATES: [&str; 5] = [
    "the {adj} {s} {v} the {o}",
    "a {s} {v} a {o} {time}",
    "the {o} was {v} by the {s}",
    "{time} the {s} {v} an {adj} {o}",
    "it was the {s} who {v} the {o}",
];
/// Surface forms only ever seen at evaluation time.
const HELDOUT_TEMPLATES: [&str; 3] = [
    "we saw that the {s} {v} the {o} {time}",
    "someone said a {adj} {s} {v} this {o}",
    "the {o} , {v} by one {s}",
];

fn fill(template: &str, cluster: usize, rng: &mut ChaCha8Rng) -> String {
    template
        .replace("{s}", SUBJECTS[cluster])
        .replace("{v}", VERBS[(cluster * 7) % 40])
        .replace("{o}", OBJECTS[(cluster * 13) % 40])
        .replace("{adj}", ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())])
        .replace("{time}", TIMES[rng.gen_range(0..TIMES.len())])
}

pub struct ParaphraseCorpus {
    /// 40 clusters x 5 variants.
    pub train: Vec<String>,
    /// 50 same-cluster pairs (gold 5) and 50 cross-cluster pairs (gold 0).
    pub heldout: Vec<SimilarityRecord>,
    pub vocab: Vocab,
}

/// Template paraphrase clusters: each cluster is one (subject, verb, object)
/// event; variants differ in surface form. Held-out pairs use unseen forms.
pub fn paraphrase_corpus(seed: u64) -> ParaphraseCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    for cluster in 0..40 {
        for t in TRAIN_TEMPLATES {
            train.push(fill(t, cluster, &mut rng));
        }
    }
    let heldout_sentence = |cluster: usize, rng: &mut ChaCha8Rng| {
        let t = HELDOUT_TEMPLATES[rng.gen_range(0..HELDOUT_TEMPLATES.len())];
        fill(t, cluster, rng)
    };
    let mut heldout = Vec::new();
    for i in 0..100 {
        let a = rng.gen_range(0..40);
        let (b, gold) = if i % 2 == 0 {
            (a, 5.0)
        } else {
            let mut b = rng.gen_range(0..39);
            if b >= a {
                b += 1;
            }
            (b, 0.0)
        };
        heldout.push(SimilarityRecord {
            sentence_a: heldout_sentence(a, &mut rng),
            sentence_b: heldout_sentence(b, &mut rng),
            gold,
        });
    }
    heldout.shuffle(&mut rng);
    let mut all: Vec<&str> = train.iter().map(String::as_str).collect();
    for r in &heldout {
        all.push(&r.sentence_a);
        all.push(&r.sentence_b);
    }
    let vocab = Vocab::build(&all, 1).unwrap();
    ParaphraseCorpus { train, heldout, vocab }
}

pub mod oracles;

pub fn toy_encoder(vocab_size: usize, num_layers: usize, hidden: usize, seed: u64) -> EncoderParams {
    let cfg = EncoderConfig {
        num_layers,
        hidden_size: hidden,
        num_heads: 2,
        ffn_size: 2 * hidden,
        vocab_size,
        max_seq_len: 16,
        dropout: 0.1,
        seed,
    };
    EncoderParams::init(&cfg).unwrap()
}

/// Path of the `sg` binary built for this test run.
pub const SG: &str = env!("CARGO_BIN_EXE_sg");

pub fn sg(args: &[&str]) -> std::process::Output {
    std::process::Command::new(SG).args(args).output().expect("run sg")
}

/// Writes `train.txt` (one sentence per line) and `valid.tsv`
/// (`gold<TAB>a<TAB>b`) under `dir`.
pub fn write_corpus(dir: &std::path::Path, corpus: &ParaphraseCorpus) -> (String, String) {
    let train = dir.join("train.txt");
    let valid = dir.join("valid.tsv");
    std::fs::write(&train, corpus.train.join("\n") + "\n").unwrap();
    let rows: Vec<String> = corpus
        .heldout
        .iter()
        .map(|r| format!("{}\t{}\t{}", r.gold, r.sentence_a, r.sentence_b))
        .collect();
    std::fs::write(&valid, rows.join("\n") + "\n").unwrap();
    (train.display().to_string(), valid.display().to_string())
}

/// Flags for a small model that trains in well under a second.
pub const TOY_FLAGS: [&str; 16] = [
    "--layers", "2", "--hidden", "16", "--heads", "2", "--ffn", "32", "--max_seq_len", "16", "--batch_size", "8",
    "--eval_step", "5", "--endurance", "3",
];
