//! Run configuration: `key = value` lines under `[section]` headers, with
//! every key also accepted as a command-line flag of the same name.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub struct Key {
    pub section: &'static str,
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(section: &'static str, name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        section,
        name,
        default,
        help,
    }
}

pub const KEYS: &[Key] = &[
    key("data", "corpus", "", "training sentences, one per line, or a similarity TSV"),
    key("data", "valid", "", "validation similarity TSV used for early stopping"),
    key("data", "test", "", "similarity TSV scored by ablate (defaults to valid)"),
    key("data", "out_dir", "runs", "directory for every file a command writes"),
    key("encoder", "layers", "4", "transformer layers"),
    key("encoder", "hidden", "64", "hidden size"),
    key("encoder", "heads", "4", "attention heads"),
    key("encoder", "ffn", "128", "feed-forward inner size"),
    key("encoder", "max_seq_len", "64", "maximum tokens per sentence, [CLS] and [SEP] included"),
    key("encoder", "dropout", "0.1", "dropout rate of the tuned encoder"),
    key("encoder", "init_seed", "1", "seed of the initial encoder weights"),
    key("encoder", "min_count", "1", "minimum token frequency for the vocabulary"),
    key("train", "batch_size", "16", "sentences per batch"),
    key("train", "lr", "5e-5", "learning rate"),
    key("train", "beta1", "0.9", "AdamW first-moment decay"),
    key("train", "beta2", "0.9", "AdamW second-moment decay"),
    key("train", "adam_eps", "1e-8", "AdamW epsilon"),
    key("train", "weight_decay", "0.01", "decoupled weight decay on weight matrices"),
    key("train", "epochs", "1", "passes over the corpus"),
    key("train", "eval_step", "50", "steps between validation runs"),
    key("train", "endurance", "10", "non-improving validations tolerated before stopping"),
    key("train", "seed", "1", "seed for shuffling, dropout, layer sampling, and head init"),
    key("loss", "variant", "opt3", "base, opt1, opt2, or opt3"),
    key("loss", "tau", "0.01", "temperature"),
    key("loss", "lambda", "0.1", "regularizer weight"),
    key("loss", "pooling", "max", "view pooling: max, mean, or cls"),
    key("loss", "sampler_layers", "all", "comma-separated layers the sampler may draw, or all"),
    key("loss", "projection_head", "true", "use the MLP head; false makes it the identity"),
];

pub fn find_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Parses the text of a configuration file into `key -> value`.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut section: Option<String> = None;
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !KEYS.iter().any(|k| k.section == name) {
                return Err(Error::Config(format!("line {}: unknown section [{name}]", lineno + 1)));
            }
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        let spec = find_key(k).ok_or_else(|| Error::Config(format!("line {}: unknown key {k:?}", lineno + 1)))?;
        if let Some(s) = &section {
            if s != spec.section {
                return Err(Error::Config(format!(
                    "line {}: key {k:?} belongs in [{}], not [{s}]",
                    lineno + 1,
                    spec.section
                )));
            }
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub init_seed: u64,
    pub min_count: usize,
    pub projection_head: bool,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("--{key}: invalid value {value:?}")))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Builds the configuration from defaults, then the file values, then the
    /// flag values, later sources winning.
    pub fn resolve(file: &BTreeMap<String, String>, flags: &BTreeMap<String, String>) -> Result<Self> {
        let mut values: BTreeMap<&str, String> = KEYS.iter().map(|k| (k.name, k.default.to_string())).collect();
        for (k, v) in file.iter().chain(flags) {
            let spec = find_key(k).ok_or_else(|| Error::Config(format!("unknown key {k:?}")))?;
            values.insert(spec.name, v.clone());
        }
        let get = |k: &str| values[k].as_str();
        let layers = match get("sampler_layers") {
            "all" => None,
            list => Some(
                list.split(',')
                    .map(|x| parse::<usize>("sampler_layers", x.trim()))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let train = TrainConfig {
            batch_size: parse("batch_size", get("batch_size"))?,
            learning_rate: parse("lr", get("lr"))?,
            adam_betas: (parse("beta1", get("beta1"))?, parse("beta2", get("beta2"))?),
            adam_eps: parse("adam_eps", get("adam_eps"))?,
            weight_decay: parse("weight_decay", get("weight_decay"))?,
            epochs: parse("epochs", get("epochs"))?,
            eval_step: parse("eval_step", get("eval_step"))?,
            endurance: parse("endurance", get("endurance"))?,
            temperature: parse("tau", get("tau"))?,
            reg_weight: parse("lambda", get("lambda"))?,
            seed: parse("seed", get("seed"))?,
            variant: get("variant").parse()?,
            pooling: get("pooling").parse()?,
            layers,
        };
        let cfg = Self {
            train_path: path(get("corpus")),
            valid_path: path(get("valid")),
            test_path: path(get("test")),
            out_dir: PathBuf::from(get("out_dir")),
            num_layers: parse("layers", get("layers"))?,
            hidden_size: parse("hidden", get("hidden"))?,
            num_heads: parse("heads", get("heads"))?,
            ffn_size: parse("ffn", get("ffn"))?,
            max_seq_len: parse("max_seq_len", get("max_seq_len"))?,
            dropout: parse("dropout", get("dropout"))?,
            init_seed: parse("init_seed", get("init_seed"))?,
            min_count: parse("min_count", get("min_count"))?,
            projection_head: parse("projection_head", get("projection_head"))?,
            train,
        };
        cfg.train.validate()?;
        cfg.train.loss_config(cfg.num_layers)?;
        cfg.encoder_config(4)?;
        Ok(cfg)
    }

    pub fn encoder_config(&self, vocab_size: usize) -> Result<EncoderConfig> {
        let cfg = EncoderConfig {
            num_layers: self.num_layers,
            hidden_size: self.hidden_size,
            num_heads: self.num_heads,
            ffn_size: self.ffn_size,
            vocab_size,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
            seed: self.init_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
