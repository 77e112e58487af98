//! The `sg` command line: train, eval, ablate, gradcheck, embed.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Reports go to stdout as TSV with a copy under the output directory; logs
//! go to stderr.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use rayon::prelude::*;

use crate::encoder::EncoderParams;
use crate::error::Error;
use crate::evalsuite::{self, EmbeddingStrategy, EvalResult};
use crate::losses::LossVariant;
use crate::numerics::GradCheckOptions;
use crate::selfguide::{DualEncoder, HeadConfig};
use crate::text::{self, SimilarityRecord, Vocab};
use crate::trainer::{self, Checkpoint, GradCheckSetup, TrainConfig};
use config::{read_config_file, RunConfig, KEYS};

pub const DEFAULT_SEEDS: &str = "1,2,3,4,1234,2345,3456,7890";
pub const CHECKPOINT_FILE: &str = "checkpoint.sge";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

fn usage(error: Error) -> Failure {
    Failure { code: 2, error }
}

fn runtime(error: Error) -> Failure {
    Failure { code: 1, error }
}

type CmdResult = std::result::Result<(), Failure>;

fn with_config_keys(mut cmd: Command) -> Command {
    cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("configuration file of `key = value` lines under [section] headers; flags take precedence"),
    );
    for k in KEYS {
        let default = if k.default.is_empty() { "none" } else { k.default };
        cmd = cmd.arg(
            Arg::new(k.name)
                .long(k.name)
                .value_name("VALUE")
                .help(format!("{} [{}] [default: {default}]", k.help, k.section)),
        );
    }
    cmd
}

fn out_dir_arg() -> Arg {
    Arg::new("out_dir")
        .long("out_dir")
        .value_name("DIR")
        .default_value("runs")
        .help("directory for report copies")
}

pub fn command() -> Command {
    Command::new("sg")
        .about("Self-guided contrastive fine-tuning of a small transformer sentence encoder")
        .subcommand_required(true)
        .args_override_self(true)
        .arg_required_else_help(true)
        .subcommand(with_config_keys(
            Command::new("train").about("Fine-tune an encoder and save the best tuned checkpoint"),
        ))
        .subcommand(
            Command::new("eval")
                .about("Score a similarity TSV with a saved checkpoint")
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("FILE").required(true).help("checkpoint to load"))
                .arg(Arg::new("tsv").long("tsv").value_name("FILE").required(true).help("similarity TSV to score"))
                .arg(
                    Arg::new("strategy")
                        .long("strategy")
                        .value_name("NAME")
                        .default_value("tuned_cls")
                        .help("tuned_cls or layer<k>_<max|mean|cls>"),
                )
                .arg(
                    Arg::new("sweep")
                        .long("sweep")
                        .action(ArgAction::SetTrue)
                        .help("score every layer and pooling combination plus tuned_cls"),
                )
                .arg(out_dir_arg()),
        )
        .subcommand(
            with_config_keys(Command::new("ablate").about("Train and score a grid of loss variants and settings over seeds"))
                .arg(
                    Arg::new("variants")
                        .long("variants")
                        .value_name("LIST")
                        .default_value("base,opt1,opt2,opt3")
                        .help("comma-separated loss variants, one row each"),
                )
                .arg(Arg::new("seeds").long("seeds").value_name("LIST").default_value(DEFAULT_SEEDS).help("comma-separated training seeds"))
                .arg(
                    Arg::new("tau_values")
                        .long("tau_values")
                        .value_name("LIST")
                        .help("extra rows with the configured variant at these temperatures [default: none]"),
                )
                .arg(
                    Arg::new("lambda_values")
                        .long("lambda_values")
                        .value_name("LIST")
                        .help("extra rows with the configured variant at these regularizer weights [default: none]"),
                )
                .arg(
                    Arg::new("no_projection_head")
                        .long("no_projection_head")
                        .action(ArgAction::SetTrue)
                        .help("extra row with the configured variant and the identity head"),
                ),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Check analytic gradients of every loss variant against central differences")
                .arg(out_dir_arg())
                .arg(Arg::new("corrupt_gradient").long("corrupt_gradient").action(ArgAction::SetTrue).hide(true)),
        )
        .subcommand(
            Command::new("embed")
                .about("Write tuned [CLS] embeddings for a file of sentences")
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("FILE").required(true).help("checkpoint to load"))
                .arg(Arg::new("sentences").long("sentences").value_name("FILE").required(true).help("one sentence per line"))
                .arg(Arg::new("out").long("out").value_name("FILE").required(true).help("embedding file to write")),
        )
}

/// Parses `args` (program name first), runs the command, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .try_init();
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match matches.subcommand() {
        Some(("train", m)) => cmd_train(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("ablate", m)) => cmd_ablate(m),
        Some(("gradcheck", m)) => cmd_gradcheck(m),
        Some(("embed", m)) => cmd_embed(m),
        _ => unreachable!("subcommand is required"),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}

fn resolve_config(m: &ArgMatches) -> Result<RunConfig, Failure> {
    let file = match m.get_one::<String>("config") {
        Some(p) => read_config_file(Path::new(p)).map_err(usage)?,
        None => BTreeMap::new(),
    };
    let flags: BTreeMap<String, String> = KEYS
        .iter()
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    RunConfig::resolve(&file, &flags).map_err(usage)
}

fn required(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    path.clone()
        .ok_or_else(|| usage(Error::Config(format!("missing --{flag} (or `{flag}` in the config file)"))))
}

/// Plain sentences, or the sentences of a similarity TSV when lines contain tabs.
pub fn load_corpus(path: &Path) -> crate::Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.lines().any(|l| l.contains('\t')) {
        let data = text::load_similarity_tsv(path)?;
        if data.skipped > 0 {
            log::warn!("{}: skipped {} malformed rows", path.display(), data.skipped);
        }
        Ok(text::sentences_from_records(&data.records))
    } else {
        text::load_raw_sentences(path)
    }
}

fn load_records(path: &Path) -> Result<Vec<SimilarityRecord>, Failure> {
    let data = text::load_similarity_tsv(path).map_err(usage)?;
    if data.skipped > 0 {
        log::warn!("{}: skipped {} malformed rows", path.display(), data.skipped);
    }
    Ok(data.records)
}

/// Vocabulary over the training sentences and every evaluation sentence.
fn build_vocab(sentences: &[String], records: &[&[SimilarityRecord]], min_count: usize) -> crate::Result<Vocab> {
    let mut all: Vec<&str> = sentences.iter().map(String::as_str).collect();
    for r in records.iter().flat_map(|rs| rs.iter()) {
        all.push(&r.sentence_a);
        all.push(&r.sentence_b);
    }
    Vocab::build(&all, min_count)
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(Error::io(dir, e)))?;
    }
    fs::write(path, contents).map_err(|e| runtime(Error::io(path, e)))
}

/// Prints a report and keeps a copy under `out_dir`.
fn emit(out_dir: &Path, name: &str, report: &str) -> CmdResult {
    print!("{report}");
    write_file(&out_dir.join(name), report)
}

fn eval_table(results: &[EvalResult]) -> String {
    let mut s = format!("{}\n", EvalResult::TSV_HEADER);
    for r in results {
        s.push_str(&r.tsv_row());
        s.push('\n');
    }
    s
}

fn head_config(cfg: &RunConfig, enabled: bool, seed: u64) -> HeadConfig {
    HeadConfig {
        enabled,
        ..HeadConfig::for_hidden_size(cfg.hidden_size, seed)
    }
}

fn cmd_train(m: &ArgMatches) -> CmdResult {
    let cfg = resolve_config(m)?;
    let corpus_path = required(&cfg.train_path, "corpus")?;
    let valid_path = required(&cfg.valid_path, "valid")?;
    let sentences = load_corpus(&corpus_path).map_err(usage)?;
    let valid = load_records(&valid_path)?;
    let vocab = build_vocab(&sentences, &[&valid], cfg.min_count).map_err(usage)?;
    let enc = cfg.encoder_config(vocab.len()).map_err(usage)?;
    log::info!(
        "{} training sentences, {} validation pairs, vocabulary {}",
        sentences.len(),
        valid.len(),
        vocab.len()
    );

    let params = EncoderParams::init(&enc).map_err(runtime)?;
    let head = head_config(&cfg, cfg.projection_head, cfg.train.seed);
    let mut dual = DualEncoder::clone_from(&params, &head).map_err(runtime)?;
    let outcome = trainer::train(&sentences, &valid, &vocab, &mut dual, &cfg.train).map_err(runtime)?;
    log::info!(
        "{} steps, best validation spearman x100 {:.2} at step {}",
        outcome.steps,
        outcome.best_metric,
        outcome.best_step
    );

    fs::create_dir_all(&cfg.out_dir).map_err(|e| runtime(Error::io(&cfg.out_dir, e)))?;
    let checkpoint = Checkpoint::new(&outcome.best, &vocab, Some(cfg.train.clone()), Some(outcome.best_metric));
    trainer::save_checkpoint(cfg.out_dir.join(CHECKPOINT_FILE), &checkpoint).map_err(runtime)?;
    write_file(&cfg.out_dir.join(TRAIN_LOG_FILE), &outcome.log.to_string())?;
    let result = evalsuite::evaluate_sts(&outcome.best, &vocab, &valid, EmbeddingStrategy::TunedCls).map_err(runtime)?;
    emit(&cfg.out_dir, "train_eval.tsv", &eval_table(&[result]))
}

fn load_checkpoint_arg(m: &ArgMatches) -> Result<Checkpoint, Failure> {
    let path = m.get_one::<String>("checkpoint").expect("required");
    trainer::load_checkpoint(path).map_err(usage)
}

fn cmd_eval(m: &ArgMatches) -> CmdResult {
    let checkpoint = load_checkpoint_arg(m)?;
    let records = load_records(Path::new(m.get_one::<String>("tsv").expect("required")))?;
    let out_dir = PathBuf::from(m.get_one::<String>("out_dir").expect("defaulted"));
    let params = checkpoint.params();
    if m.get_flag("sweep") {
        let results = evalsuite::sweep_sts(&params, &checkpoint.vocab, &records).map_err(runtime)?;
        emit(&out_dir, "eval_sweep.tsv", &eval_table(&results))
    } else {
        let strategy: EmbeddingStrategy = m.get_one::<String>("strategy").expect("defaulted").parse().map_err(usage)?;
        strategy.validate(params.config.num_layers).map_err(usage)?;
        let result = evalsuite::evaluate_sts(&params, &checkpoint.vocab, &records, strategy).map_err(runtime)?;
        emit(&out_dir, "eval.tsv", &eval_table(&[result]))
    }
}

fn cmd_embed(m: &ArgMatches) -> CmdResult {
    let checkpoint = load_checkpoint_arg(m)?;
    let sentences = text::load_raw_sentences(m.get_one::<String>("sentences").expect("required")).map_err(usage)?;
    let out = PathBuf::from(m.get_one::<String>("out").expect("required"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(Error::io(dir, e)))?;
    }
    evalsuite::export_embeddings(&checkpoint.params(), &checkpoint.vocab, &sentences, EmbeddingStrategy::TunedCls, &out)
        .map_err(runtime)?;
    log::info!("wrote {} embeddings to {}", sentences.len(), out.display());
    Ok(())
}

fn cmd_gradcheck(m: &ArgMatches) -> CmdResult {
    let out_dir = PathBuf::from(m.get_one::<String>("out_dir").expect("defaulted"));
    let setup = GradCheckSetup {
        gradient_scale: if m.get_flag("corrupt_gradient") { 1.5 } else { 1.0 },
        ..GradCheckSetup::default()
    };
    let opts = GradCheckOptions::default();
    let mut report = String::from("variant\tmax_rel_error\ttensors\tpassed\n");
    let mut all_passed = true;
    for variant in LossVariant::ALL {
        let r = trainer::check_variant_gradients(variant, &setup, opts).map_err(runtime)?;
        all_passed &= r.passed();
        report.push_str(&format!("{variant}\t{:.3e}\t{}\t{}\n", r.max_rel_error(), r.groups.len(), r.passed()));
    }
    emit(&out_dir, "gradcheck.tsv", &report)?;
    if all_passed {
        Ok(())
    } else {
        Err(runtime(Error::Config(format!(
            "relative gradient error above {} for at least one variant",
            opts.tolerance
        ))))
    }
}

fn parse_list<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> Result<Vec<T>, Failure> {
    let Some(raw) = m.get_one::<String>(name) else {
        return Ok(Vec::new());
    };
    raw.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| usage(Error::Config(format!("--{name}: invalid entry {x:?}"))))
        })
        .collect()
}

/// One row of the ablation table.
#[derive(Debug, Clone)]
struct AblationRow {
    variant: LossVariant,
    setting: String,
    temperature: f64,
    reg_weight: f64,
    head: bool,
}

/// Aggregated metric of one ablation row.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub variant: LossVariant,
    pub setting: String,
    pub per_seed: Vec<f64>,
}

impl AblationResult {
    pub const TSV_HEADER: &'static str = "variant\tsetting\tmean\tstd\tn\tper_seed";

    pub fn mean(&self) -> f64 {
        self.per_seed.iter().sum::<f64>() / self.per_seed.len() as f64
    }

    /// Sample standard deviation; 0 for a single seed.
    pub fn std(&self) -> f64 {
        let n = self.per_seed.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.mean();
        (self.per_seed.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    pub fn tsv_row(&self) -> String {
        let seeds: Vec<String> = self.per_seed.iter().map(|x| format!("{x:?}")).collect();
        format!(
            "{}\t{}\t{:?}\t{:?}\t{}\t{}",
            self.variant,
            self.setting,
            self.mean(),
            self.std(),
            self.per_seed.len(),
            seeds.join(",")
        )
    }
}

fn worker_count() -> Option<usize> {
    std::env::var("SG_NUM_WORKERS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0)
}

fn cmd_ablate(m: &ArgMatches) -> CmdResult {
    let cfg = resolve_config(m)?;
    let variants: Vec<LossVariant> = parse_list(m, "variants")?;
    let seeds: Vec<u64> = parse_list(m, "seeds")?;
    if seeds.is_empty() {
        return Err(usage(Error::Config("--seeds is empty".into())));
    }
    let mut rows: Vec<AblationRow> = variants
        .iter()
        .map(|&variant| AblationRow {
            variant,
            setting: "default".into(),
            temperature: cfg.train.temperature,
            reg_weight: cfg.train.reg_weight,
            head: cfg.projection_head,
        })
        .collect();
    let base = |setting: String| AblationRow {
        variant: cfg.train.variant,
        setting,
        temperature: cfg.train.temperature,
        reg_weight: cfg.train.reg_weight,
        head: cfg.projection_head,
    };
    for tau in parse_list::<f64>(m, "tau_values")? {
        rows.push(AblationRow {
            temperature: tau,
            ..base(format!("tau={tau}"))
        });
    }
    for lambda in parse_list::<f64>(m, "lambda_values")? {
        rows.push(AblationRow {
            reg_weight: lambda,
            ..base(format!("lambda={lambda}"))
        });
    }
    if m.get_flag("no_projection_head") {
        rows.push(AblationRow {
            head: false,
            ..base("- Projection head".into())
        });
    }
    if rows.is_empty() {
        return Err(usage(Error::Config("nothing to run: --variants is empty".into())));
    }
    for row in &rows {
        TrainConfig {
            temperature: row.temperature,
            reg_weight: row.reg_weight,
            ..cfg.train.clone()
        }
        .loss_config(cfg.num_layers)
        .map_err(usage)?;
    }

    let corpus_path = required(&cfg.train_path, "corpus")?;
    let valid_path = required(&cfg.valid_path, "valid")?;
    let sentences = load_corpus(&corpus_path).map_err(usage)?;
    let valid = load_records(&valid_path)?;
    let test = match &cfg.test_path {
        Some(p) => load_records(p)?,
        None => valid.clone(),
    };
    let vocab = build_vocab(&sentences, &[&valid, &test], cfg.min_count).map_err(usage)?;
    let enc = cfg.encoder_config(vocab.len()).map_err(usage)?;
    let params = EncoderParams::init(&enc).map_err(runtime)?;

    let cells: Vec<(usize, u64)> = (0..rows.len()).flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    let run_cell = |&(r, seed): &(usize, u64)| -> crate::Result<f64> {
        let row = &rows[r];
        let train_cfg = TrainConfig {
            variant: row.variant,
            temperature: row.temperature,
            reg_weight: row.reg_weight,
            seed,
            ..cfg.train.clone()
        };
        let mut dual = DualEncoder::clone_from(&params, &head_config(&cfg, row.head, seed))?;
        let outcome = trainer::train(&sentences, &valid, &vocab, &mut dual, &train_cfg)?;
        let metric = evalsuite::evaluate_sts(&outcome.best, &vocab, &test, EmbeddingStrategy::TunedCls)?.spearman_x100;
        log::info!("{} {} seed {seed}: {metric:.2}", row.variant, row.setting);
        Ok(metric)
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = worker_count() {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| runtime(Error::Config(format!("thread pool: {e}"))))?;
    let metrics: Vec<f64> = pool
        .install(|| cells.par_iter().map(run_cell).collect::<crate::Result<Vec<_>>>())
        .map_err(runtime)?;

    let mut report = format!("{}\n", AblationResult::TSV_HEADER);
    for (r, row) in rows.iter().enumerate() {
        let result = AblationResult {
            variant: row.variant,
            setting: row.setting.clone(),
            per_seed: metrics[r * seeds.len()..(r + 1) * seeds.len()].to_vec(),
        };
        report.push_str(&result.tsv_row());
        report.push('\n');
    }
    emit(&cfg.out_dir, "ablation.tsv", &report)
}
