//! Subcommands end to end on a small configuration.

use std::path::Path;
use std::sync::OnceLock;

use omreid::eval::{FusionMode, SingletonMode};
use omreid::{Error, Modality};
use omreid_cli::checkpoint::Checkpoint;
use omreid_cli::commands::{self, EvalArgs};
use omreid_cli::config::RunConfig;

/// Six identities, one epoch: enough to exercise every artifact quickly.
fn small(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.n_identities = 6;
    cfg.views = 2;
    cfg.epochs = 2;
    cfg.batch_ids = 2;
    cfg.checkpoint_every = 1;
    cfg.seed = 7;
    cfg.out_dir = out.to_path_buf();
    cfg.validate().unwrap();
    cfg
}

/// One shared training run; tests only read from it.
fn trained() -> &'static (tempfile::TempDir, RunConfig) {
    static RUN: OnceLock<(tempfile::TempDir, RunConfig)> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        commands::cmd_train(&cfg, |_| {}).unwrap();
        (dir, cfg)
    })
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn train_reports_every_query_set() {
    let (_, cfg) = trained();
    let text = String::from_utf8(read(&cfg.out_dir.join(commands::REPORT_JSON))).unwrap();
    let report: omreid::protocol::MetricsReport = serde_json::from_str(&text).unwrap();
    assert_eq!(report.query_sets.len(), 32);
    assert_eq!(report.modes.len(), 4);
    assert_eq!(report.config_digest, cfg.digest());
    assert_eq!(report.seed, cfg.seed);
    let steps = omreid::train::steps_per_epoch(cfg.n_train_identities(), cfg.batch_ids, cfg.views) * cfg.epochs;
    let log = String::from_utf8(read(&cfg.out_dir.join(commands::TRAIN_LOG))).unwrap();
    assert_eq!(log.lines().count(), steps);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (_, cfg) = trained();
    let path = commands::checkpoint_path(cfg);
    let bytes = read(&path);
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.digest, cfg.digest());
    assert_eq!(ck.seed, cfg.seed);
    assert!(ck.optimizer.is_some());
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("again.rid5");
    ck.save(&again).unwrap();
    assert_eq!(read(&again), bytes);
    // Every value survives at 32-bit precision.
    assert_eq!(omreid_cli::checkpoint::round_store(&ck.params), ck.params);
}

#[test]
fn eval_is_deterministic_and_matches_train() {
    let (_, cfg) = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = RunConfig {
        out_dir: dir.path().to_path_buf(),
        ..cfg.clone()
    };
    let args = EvalArgs::defaults(cfg);
    let stem = args.report_stem();
    commands::cmd_eval(&out, &args).unwrap();
    let first = read(&dir.path().join(format!("{stem}.json")));
    commands::cmd_eval(&out, &args).unwrap();
    assert_eq!(read(&dir.path().join(format!("{stem}.json"))), first);
    assert_eq!(first, read(&cfg.out_dir.join(commands::REPORT_JSON)));
}

#[test]
fn superposition_and_cls_readings_run() {
    let (_, cfg) = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = RunConfig {
        out_dir: dir.path().to_path_buf(),
        ..cfg.clone()
    };
    let args = EvalArgs {
        fusion: FusionMode::Superposition,
        singleton: SingletonMode::Pooled,
        ..EvalArgs::defaults(cfg)
    };
    let report = commands::cmd_eval(&out, &args).unwrap();
    assert_eq!(report.query_sets.len(), 32);
    assert_eq!(report.fusion, "superposition");
    assert!(dir.path().join(format!("{}.txt", args.report_stem())).exists());
}

#[test]
fn eval_refuses_a_checkpoint_from_another_config() {
    let (_, cfg) = trained();
    let other = RunConfig {
        rank: cfg.rank + 1,
        ..cfg.clone()
    };
    let err = commands::cmd_eval(&other, &EvalArgs::defaults(cfg)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert_eq!(commands::exit_code(&err), 2);
}

#[test]
fn rank_dumps_top_k() {
    let (_, cfg) = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = RunConfig {
        out_dir: dir.path().to_path_buf(),
        ..cfg.clone()
    };
    let dump = commands::cmd_rank(&out, &EvalArgs::defaults(cfg), "T+I", 3).unwrap();
    assert_eq!(dump.query, "T+I");
    assert!(!dump.lists.is_empty());
    for list in &dump.lists {
        assert_eq!(list.gallery_ids.len(), 3);
        assert!(list.affinities.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(list.query.len(), 2);
        for (hit, id) in list.hits.iter().zip(&list.gallery_ids) {
            assert_eq!(*hit, *id == list.identity);
        }
    }
    assert!(dir.path().join("rank_TI.json").exists());
    assert!(commands::cmd_rank(&out, &EvalArgs::defaults(cfg), "T+I", 0).is_err());
}

#[test]
fn query_specs() {
    assert_eq!(commands::parse_query("T+I").unwrap(), vec![Modality::Text, Modality::Infrared]);
    assert_eq!(commands::parse_query("c,s").unwrap(), vec![Modality::ColorPencil, Modality::Sketch]);
    for bad in ["", "R", "T+T", "X"] {
        assert!(commands::parse_query(bad).is_err(), "{bad}");
    }
}

#[test]
fn params_table_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::full();
    cfg.out_dir = dir.path().to_path_buf();
    let table = commands::cmd_params(&cfg).unwrap();
    for row in ["r=4 | 2.36 M", "r=8 | 4.72 M", "r=16 | 9.44 M", "r=32 | 18.87 M"] {
        assert!(table.lines().any(|l| l.starts_with(row)), "{row} missing from\n{table}");
    }
    assert_eq!(std::fs::read_to_string(dir.path().join("params.txt")).unwrap(), table);
    // Parameters grow linearly with rank.
    let rows = commands::param_rows(&cfg).unwrap();
    for r in &rows {
        assert_eq!(r.params * 4, rows[0].params * r.rank as u64);
    }
}

#[test]
fn stats_histogram_accounts_for_every_text() {
    let (_, cfg) = trained();
    let manifest = omreid::dataset::manifest_path(&commands::data_dir(cfg), "test");
    let dir = tempfile::tempdir().unwrap();
    let report = commands::cmd_stats(&manifest, dir.path()).unwrap();
    assert_eq!(report.histogram.iter().map(|b| b.count).sum::<usize>(), report.texts);
    assert_eq!(report.manifest_sha256, omreid::dataset::sha256_hex(&read(&manifest)));
    assert!(report.mean_entropy_bits > 0.0);
    let back: commands::StatsReport = serde_json::from_slice(&read(&dir.path().join("stats.json"))).unwrap();
    assert_eq!(back, report);
}

#[test]
fn entropy_report_hand_case() {
    // Flags are stripped: [a, b] is 1 bit, [a, a, b, c] is 1.5 bits.
    let w = omreid::synthgen::FIRST_WORD;
    let texts = vec![
        vec![omreid::synthgen::BOS, w, w + 1, omreid::synthgen::EOS],
        vec![omreid::synthgen::BOS, w, w, w + 1, w + 2, omreid::synthgen::EOS],
    ];
    let r = commands::entropy_report(&texts, "x".into()).unwrap();
    assert!((r.mean_entropy_bits - 1.25).abs() <= 1e-12);
    let counts: Vec<usize> = r.histogram.iter().map(|b| b.count).collect();
    assert_eq!(counts, vec![0, 0, 1, 1]);
}
