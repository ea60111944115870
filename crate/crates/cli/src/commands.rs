//! The subcommands. Each validates its inputs, writes its artifacts under
//! the configured output directory and returns what it wrote.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use omreid::dataset::{self, SampleRecord};
use omreid::encoder::{count_expert_flops, count_expert_params};
use omreid::eval::{self, EvalOptions, FusionMode, SingletonMode, TopK};
use omreid::model::Model;
use omreid::optim::Adam;
use omreid::protocol::{self, EntropyStats, MetricsReport};
use omreid::synthgen::{self, FIRST_WORD};
use omreid::train::{self, StepRecord};
use omreid::{Error, Modality, Result};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.rid5";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TABLE: &str = "report.txt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
const DATASET_META: &str = "dataset.json";

pub fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join(CHECKPOINT_FILE)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

/// What `synth` wrote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config_digest: String,
    pub seed: u64,
    pub train_identities: usize,
    pub test_identities: usize,
    pub train_samples: usize,
    pub test_samples: usize,
}

/// Generates the synthetic dataset and writes `train` and `test` splits.
pub fn cmd_synth(cfg: &RunConfig) -> Result<DatasetMeta> {
    let ds = synthgen::generate(&cfg.synth_config())?;
    let (train, test) = ds.split(cfg.train_fraction)?;
    let root = data_dir(cfg);
    dataset::write_split(&root, "train", &train)?;
    dataset::write_split(&root, "test", &test)?;
    let ids = |s: &[SampleRecord]| s.iter().map(|r| r.identity).collect::<std::collections::BTreeSet<_>>().len();
    let meta = DatasetMeta {
        config_digest: cfg.digest(),
        seed: cfg.seed,
        train_identities: ids(&train),
        test_identities: ids(&test),
        train_samples: train.len(),
        test_samples: test.len(),
    };
    write(&root.join(DATASET_META), to_json(&meta))?;
    Ok(meta)
}

/// Loads both splits, generating them first unless the output directory
/// already holds the ones this configuration and seed produce.
pub fn ensure_dataset(cfg: &RunConfig) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    let root = data_dir(cfg);
    let current = std::fs::read_to_string(root.join(DATASET_META))
        .ok()
        .and_then(|t| serde_json::from_str::<DatasetMeta>(&t).ok())
        .is_some_and(|m| m.config_digest == cfg.digest() && m.seed == cfg.seed);
    if !current {
        cmd_synth(cfg)?;
    }
    let train = dataset::load_manifest(&dataset::manifest_path(&root, "train"))?;
    let test = dataset::load_manifest(&dataset::manifest_path(&root, "test"))?;
    Ok((train, test))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<StepRecord>,
    pub report: MetricsReport,
    pub checkpoint: PathBuf,
}

/// Trains from scratch, checkpointing every `checkpoint_every` epochs and at
/// the end, then evaluates the saved weights on the test split.
pub fn cmd_train(cfg: &RunConfig, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    let (train_set, test_set) = ensure_dataset(cfg)?;
    let model = Model::new(cfg.model_config())?;
    let mut store = model.init_params(cfg.seed);
    let mut adam = Adam::default();
    let ck_path = checkpoint_path(cfg);
    let save = |store: &omreid::params::ParamStore, adam: &Adam| {
        Checkpoint {
            digest: cfg.digest(),
            seed: cfg.seed,
            params: store.clone(),
            optimizer: Some(adam.clone()),
        }
        .save(&ck_path)
    };
    let tc = cfg.train_config();
    let history = train::train(&model, &mut store, &mut adam, &train_set, &tc, &mut on_step, |epoch, store, adam| {
        if epoch % cfg.checkpoint_every.max(1) == 0 || epoch == tc.epochs {
            save(store, adam)?;
        }
        Ok(())
    })?;
    let log: String = history
        .iter()
        .map(|r| serde_json::to_string(r).expect("plain data serializes") + "\n")
        .collect();
    write(&cfg.out_dir.join(TRAIN_LOG), log)?;

    // Evaluate what the checkpoint holds, so `eval` on it reproduces the report.
    let saved = Checkpoint::load(&ck_path)?;
    let opts = EvalOptions {
        fusion: FusionMode::Mixture,
        singleton: SingletonMode::Mixture,
        seed: cfg.seed,
        config_digest: cfg.digest(),
    };
    let report = eval::evaluate(&model, &saved.params, &test_set, &opts)?;
    write(&cfg.out_dir.join(REPORT_JSON), report.to_json())?;
    write(&cfg.out_dir.join(REPORT_TABLE), report.to_table())?;
    Ok(TrainOutcome {
        history,
        report,
        checkpoint: ck_path,
    })
}

/// Loads a checkpoint written under `cfg`, refusing one from another
/// configuration.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<(Model, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    if ck.digest != cfg.digest() {
        return Err(Error::Config(format!(
            "checkpoint {} was written with config {}, not {}",
            path.display(),
            ck.digest,
            cfg.digest()
        )));
    }
    Ok((Model::new(cfg.model_config())?, ck))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub seed: u64,
    pub fusion: FusionMode,
    pub singleton: SingletonMode,
}

impl EvalArgs {
    /// The final checkpoint and test split of a `train` run.
    pub fn defaults(cfg: &RunConfig) -> Self {
        Self {
            checkpoint: checkpoint_path(cfg),
            manifest: dataset::manifest_path(&data_dir(cfg), "test"),
            seed: cfg.seed,
            fusion: FusionMode::Mixture,
            singleton: SingletonMode::Mixture,
        }
    }

    pub fn report_stem(&self) -> String {
        format!("eval_{}_{}_{}", self.fusion, self.singleton, self.seed)
    }
}

/// Evaluates a checkpoint on a manifest and writes `{stem}.json` and
/// `{stem}.txt`.
pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<MetricsReport> {
    let (model, ck) = load_checkpoint(cfg, &args.checkpoint)?;
    let records = dataset::load_manifest(&args.manifest)?;
    let opts = EvalOptions {
        fusion: args.fusion,
        singleton: args.singleton,
        seed: args.seed,
        config_digest: cfg.digest(),
    };
    let report = eval::evaluate(&model, &ck.params, &records, &opts)?;
    let stem = args.report_stem();
    write(&cfg.out_dir.join(format!("{stem}.json")), report.to_json())?;
    write(&cfg.out_dir.join(format!("{stem}.txt")), report.to_table())?;
    Ok(report)
}

/// Query members in the order given, primary first: `T+I`, `T,I` or `TI`.
pub fn parse_query(spec: &str) -> Result<Vec<Modality>> {
    let codes: Vec<char> = spec.chars().filter(|c| !matches!(c, '+' | ',' | ' ')).collect();
    let members = codes
        .iter()
        .map(|&c| {
            Modality::from_code(c.to_ascii_uppercase())
                .filter(|&m| m != Modality::Rgb)
                .ok_or_else(|| Error::Config(format!("query {spec:?}: {c:?} is not one of I, C, S, T")))
        })
        .collect::<Result<Vec<_>>>()?;
    if members.is_empty() {
        return Err(Error::Config(format!("query {spec:?} names no modality")));
    }
    if let Some((i, m)) = members.iter().enumerate().find(|(i, m)| members[..*i].contains(m)) {
        return Err(Error::Config(format!("query {spec:?} repeats {m} at position {}", i + 1)));
    }
    Ok(members)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankDump {
    pub config_digest: String,
    pub seed: u64,
    pub query: String,
    pub fusion: String,
    pub singleton: String,
    pub k: usize,
    pub lists: Vec<TopK>,
}

/// Top-`k` gallery identities and affinities for every query of one query
/// set, written as `rank_{query}.json`.
pub fn cmd_rank(cfg: &RunConfig, args: &EvalArgs, query: &str, k: usize) -> Result<RankDump> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let members = parse_query(query)?;
    let (model, ck) = load_checkpoint(cfg, &args.checkpoint)?;
    let records = dataset::load_manifest(&args.manifest)?;
    let opts = EvalOptions {
        fusion: args.fusion,
        singleton: args.singleton,
        seed: args.seed,
        config_digest: cfg.digest(),
    };
    let lists = eval::rank_query(&model, &ck.params, &records, &members, k, &opts)?;
    let name: String = members.iter().map(|m| m.code()).collect();
    let dump = RankDump {
        config_digest: cfg.digest(),
        seed: args.seed,
        query: members.iter().map(|m| m.code().to_string()).collect::<Vec<_>>().join("+"),
        fusion: args.fusion.to_string(),
        singleton: args.singleton.to_string(),
        k,
        lists,
    };
    write(&cfg.out_dir.join(format!("rank_{name}.json")), to_json(&dump))?;
    Ok(dump)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamRow {
    pub rank: usize,
    pub params: u64,
    pub flops: u64,
}

pub const TABLE_RANKS: [usize; 4] = [4, 8, 16, 32];

/// Extra parameters and per-image FLOPs of the visual experts at each rank
/// in [`TABLE_RANKS`] plus the configured one.
pub fn param_rows(cfg: &RunConfig) -> Result<Vec<ParamRow>> {
    let visual = cfg.model_config().visual;
    let tokens = omreid::assembler::visual_token_count(cfg.image_height, cfg.image_width, cfg.patch_size)?;
    let mut ranks = TABLE_RANKS.to_vec();
    if !ranks.contains(&cfg.rank) {
        ranks.push(cfg.rank);
        ranks.sort_unstable();
    }
    Ok(ranks
        .into_iter()
        .map(|rank| {
            let enc = omreid::encoder::EncoderConfig { rank, ..visual.clone() };
            ParamRow {
                rank,
                params: count_expert_params(&enc, enc.expert_modalities.len()),
                flops: count_expert_flops(&enc, tokens),
            }
        })
        .collect())
}

/// `r=4 | 2.36 M | 0.23 G` rows, written to `params.txt`.
pub fn cmd_params(cfg: &RunConfig) -> Result<String> {
    let rows = param_rows(cfg)?;
    let tokens = omreid::assembler::visual_token_count(cfg.image_height, cfg.image_width, cfg.patch_size)?;
    let mut out = format!(
        "# config {}  experts {}  layers {}  width {}  tokens/image {tokens}\n",
        cfg.digest(),
        Modality::VISUAL.len(),
        cfg.layers,
        cfg.width
    );
    out.push_str("rank | params | FLOPs/image\n");
    for r in &rows {
        let mark = if r.rank == cfg.rank { "  *" } else { "" };
        out.push_str(&format!(
            "r={} | {:.2} M | {:.2} G{mark}\n",
            r.rank,
            r.params as f64 / 1e6,
            r.flops as f64 / 1e9
        ));
    }
    write(&cfg.out_dir.join("params.txt"), &out)?;
    Ok(out)
}

/// Histogram bin of per-text entropies, `[lo, hi)` in bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Output of `stats`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub manifest_sha256: String,
    pub texts: usize,
    pub mean_entropy_bits: f64,
    pub bin_width_bits: f64,
    pub histogram: Vec<EntropyBin>,
}

pub const ENTROPY_BIN_BITS: f64 = 0.5;

/// Word entropy of every text in `stats`, flags excluded, binned at
/// [`ENTROPY_BIN_BITS`].
pub fn entropy_report(texts: &[Vec<usize>], manifest_sha256: String) -> Result<StatsReport> {
    let words: Vec<Vec<usize>> = texts.iter().map(|t| t.iter().copied().filter(|&w| w >= FIRST_WORD).collect()).collect();
    let EntropyStats {
        texts: n,
        mean_entropy_bits,
        per_text,
    } = protocol::text_entropy(&words)?;
    let top = per_text.iter().fold(0.0f64, |a, &b| a.max(b));
    let bins = (top / ENTROPY_BIN_BITS).floor() as usize + 1;
    let mut histogram: Vec<EntropyBin> = (0..bins)
        .map(|i| EntropyBin {
            lo: i as f64 * ENTROPY_BIN_BITS,
            hi: (i + 1) as f64 * ENTROPY_BIN_BITS,
            count: 0,
        })
        .collect();
    for &h in &per_text {
        histogram[((h / ENTROPY_BIN_BITS).floor() as usize).min(bins - 1)].count += 1;
    }
    Ok(StatsReport {
        manifest_sha256,
        texts: n,
        mean_entropy_bits,
        bin_width_bits: ENTROPY_BIN_BITS,
        histogram,
    })
}

impl StatsReport {
    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("texts {}  mean entropy {:.4} bits\n", self.texts, self.mean_entropy_bits);
        let widest = self.histogram.iter().map(|b| b.count).max().unwrap_or(0).max(1);
        for b in &self.histogram {
            let bar = "#".repeat((b.count * 40).div_ceil(widest));
            out.push_str(&format!("[{:4.1}, {:4.1})  {:5}  {bar}\n", b.lo, b.hi, b.count));
        }
        out
    }
}

/// Text entropy statistics of a manifest, written next to the outputs as
/// `stats.json`.
pub fn cmd_stats(manifest: &Path, out_dir: &Path) -> Result<StatsReport> {
    let bytes = std::fs::read(manifest).map_err(|e| Error::io(manifest, e))?;
    let records = dataset::load_manifest(manifest)?;
    let texts: Vec<Vec<usize>> = records.iter().filter_map(|r| r.text().map(<[usize]>::to_vec)).collect();
    if texts.is_empty() {
        return Err(Error::Data(format!("{} lists no texts", manifest.display())));
    }
    let report = entropy_report(&texts, dataset::sha256_hex(&bytes))?;
    write(&out_dir.join("stats.json"), report.to_json())?;
    Ok(report)
}

/// Process exit code for an error: 2 configuration, 3 data, 4 numeric.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 4,
        Error::Data(_) | Error::Io { .. } | Error::Invalid(_) | Error::MissingParam(_) | Error::Tensor(_) => 3,
    }
}

