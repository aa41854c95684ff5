use std::fs;
use std::path::PathBuf;

use emstdp::checkpoint;
use emstdp::data::Dataset;
use emstdp::error::Error;
use emstdp::harness::{self, MetricsWriter, RunConfig, METRICS_HEADER, METRICS_VERSION};
use emstdp::mapper::SweepRow;
use emstdp::net::{FeedbackMode, Shape};
use emstdp::oracle::FpNetwork;

const SIDE: usize = 6;

/// Bars on a 6x6 grid: horizontal, vertical, diagonal, anti-diagonal, at a
/// seeded offset with sparse background noise.
fn bars(n: usize, classes: usize, seed: u64) -> Dataset {
    let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let mut next = move || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        s
    };
    let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let off = (next() % SIDE as u64) as usize;
        let mut img = [0u8; SIDE * SIDE];
        for k in 0..SIDE {
            let (x, y) = match c {
                0 => (k, off),
                1 => (off, k),
                2 => (k, (k + off) % SIDE),
                _ => (k, (SIDE - 1 - k + off) % SIDE),
            };
            img[y * SIDE + x] = 200;
        }
        for p in img.iter_mut() {
            if next() % 8 == 0 {
                *p = p.saturating_add(50);
            }
        }
        pixels.extend_from_slice(&img);
        labels.push(c as u8);
    }
    Dataset::new(Shape::new(SIDE, SIDE, 1), pixels, labels).unwrap()
}

fn config(classes: usize) -> RunConfig {
    let mut cfg = RunConfig {
        structure: format!("6x6x1-48d-{classes}d"),
        epochs: 2,
        ..RunConfig::default()
    };
    cfg.options.init_gain = 1.2;
    cfg
}

fn engine_bytes(net: &emstdp::net::BuiltNetwork) -> Vec<u8> {
    let mut b = Vec::new();
    checkpoint::write_engine(net, &mut b).unwrap();
    b
}

#[test]
fn training_is_deterministic() {
    let (train, test) = (bars(300, 3, 1), bars(60, 3, 2));
    let cfg = config(3);
    let a = harness::train(&cfg, &train, Some(&test), |_| Ok(())).unwrap();
    let b = harness::train(&cfg, &train, Some(&test), |_| Ok(())).unwrap();
    assert_eq!(engine_bytes(&a.net), engine_bytes(&b.net));
    assert_eq!(a.records, b.records);
    assert_eq!(a.records.len(), 2);
}

#[test]
fn different_seeds_give_different_weights() {
    let (train, test) = (bars(100, 3, 1), bars(30, 3, 2));
    let mut cfg = config(3);
    cfg.epochs = 1;
    let a = harness::train(&cfg, &train, Some(&test), |_| Ok(())).unwrap();
    cfg.seed = 2;
    let b = harness::train(&cfg, &train, Some(&test), |_| Ok(())).unwrap();
    assert_ne!(engine_bytes(&a.net), engine_bytes(&b.net));
}

#[test]
fn training_beats_chance() {
    let (train, test) = (bars(600, 3, 1), bars(90, 3, 2));
    let out = harness::train(&config(3), &train, Some(&test), |_| Ok(())).unwrap();
    let acc = out.records.last().unwrap().accuracy;
    assert!(acc > 0.6, "accuracy {acc}");
    assert_eq!(out.net.samples_seen, 1200);
}

#[test]
fn zero_epochs_reports_the_initial_network() {
    let (train, test) = (bars(30, 3, 1), bars(30, 3, 2));
    let mut cfg = config(3);
    cfg.epochs = 0;
    let out = harness::train(&cfg, &train, Some(&test), |_| Ok(())).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].epoch, Some(0));
    assert_eq!(out.records[0].samples_seen, 0);
    assert_eq!(
        engine_bytes(&out.net),
        engine_bytes(&cfg.build_network().unwrap())
    );
}

#[test]
fn evaluation_does_not_change_the_network() {
    let test = bars(60, 3, 2);
    let net = config(3).build_network().unwrap();
    let before = engine_bytes(&net);
    let a = harness::evaluate(&net, &test, None, None).unwrap();
    let b = harness::evaluate(&net, &test, None, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(engine_bytes(&net), before);
}

#[test]
fn empty_evaluation_set_is_an_error() {
    let test = bars(6, 3, 2);
    let net = config(3).build_network().unwrap();
    assert!(matches!(
        harness::evaluate(&net, &test, Some(&[]), None),
        Err(Error::Config(_))
    ));
}

#[test]
fn allowed_classes_restrict_predictions() {
    let test = bars(60, 3, 2);
    let net = config(3).build_network().unwrap();
    let r = harness::evaluate(&net, &test, None, Some(&[1])).unwrap();
    assert!(r.predictions.iter().all(|&p| p == 1));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (train, test) = (bars(200, 3, 1), bars(60, 3, 2));
    let out = harness::train(&config(3), &train, None, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    checkpoint::save_engine(&out.net, &p).unwrap();
    let back = checkpoint::load_engine(&p).unwrap();
    assert_eq!(
        harness::evaluate(&out.net, &test, None, None).unwrap(),
        harness::evaluate(&back, &test, None, None).unwrap()
    );
}

#[test]
fn dequantized_engine_tracks_engine_accuracy() {
    let (train, test) = (bars(600, 3, 1), bars(90, 3, 2));
    let out = harness::train(&config(3), &train, None, |_| Ok(())).unwrap();
    let engine = harness::evaluate(&out.net, &test, None, None).unwrap().accuracy;
    let fp = harness::evaluate_oracle(&FpNetwork::from_built(&out.net), &test, None)
        .unwrap()
        .accuracy;
    assert!((engine - fp).abs() <= 0.1, "engine {engine} oracle {fp}");
}

#[test]
fn oracle_training_learns_bars() {
    let (train, test) = (bars(600, 3, 1), bars(90, 3, 2));
    let (_, records) = harness::train_oracle(&config(3), &train, Some(&test), |_| Ok(())).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records[1].accuracy > 0.6, "{records:?}");
}

fn incremental_config() -> RunConfig {
    let mut cfg = config(4);
    cfg.set("incr_initial", "0,1").unwrap();
    cfg.set("incr_increments", "2;3").unwrap();
    cfg.incremental.chunks = 2;
    cfg.incremental.chunk_size = 0;
    cfg.incremental.pretrain_epochs = 2;
    cfg
}

#[test]
fn incremental_rounds_rehearse_equal_counts() {
    let (train, test) = (bars(400, 4, 1), bars(80, 4, 2));
    let cfg = incremental_config();
    let r = harness::incremental(&cfg, &train, &test, None, |_| Ok(())).unwrap();
    assert_eq!(r.initial, vec![0, 1]);
    assert_eq!(r.increments, vec![vec![2], vec![3]]);
    assert_eq!(r.before.len(), 2);
    // Two increments, two rounds, two steps.
    assert_eq!(r.rounds.len(), 8);
    for x in &r.rounds {
        assert_eq!(x.fresh, 50, "{x:?}");
        assert_eq!(x.rehearsal, if x.step == 1 { 0 } else { x.fresh });
    }
    assert!(r.baseline_accuracy.is_some());
}

#[test]
fn incremental_records_only_observed_classes() {
    let (train, test) = (bars(400, 4, 1), bars(80, 4, 2));
    let r = harness::incremental(&incremental_config(), &train, &test, None, |_| Ok(())).unwrap();
    for rec in r.records.iter().filter(|x| x.run == "incremental") {
        let observed = match rec.epoch {
            None | Some(0) => 2,
            Some(k) => 2 + k,
        };
        for (c, a) in rec.per_class.iter().enumerate() {
            assert_eq!(a.is_some(), c < observed, "{rec:?}");
        }
    }
}

#[test]
fn no_increments_matches_plain_evaluation() {
    let (train, test) = (bars(200, 4, 1), bars(80, 4, 2));
    let mut cfg = incremental_config();
    cfg.set("incr_increments", "").unwrap();
    cfg.set("incr_initial", "0,1,2,3").unwrap();
    let pretrained = harness::train(&config(4), &train, None, |_| Ok(())).unwrap().net;
    let direct = harness::evaluate(&pretrained, &test, None, Some(&[0, 1, 2, 3])).unwrap();
    let r = harness::incremental(&cfg, &train, &test, Some(pretrained), |_| Ok(())).unwrap();
    assert!(r.rounds.is_empty());
    assert_eq!(r.baseline_accuracy, None);
    assert_eq!(r.final_accuracy, direct.accuracy);
}

#[test]
fn incremental_rejects_unknown_class() {
    let (train, test) = (bars(40, 4, 1), bars(8, 4, 2));
    let mut cfg = incremental_config();
    cfg.set("incr_increments", "2;7").unwrap();
    let e = harness::incremental(&cfg, &train, &test, None, |_| Ok(())).unwrap_err();
    assert!(matches!(e, Error::Config(_)), "{e}");
}

#[test]
fn sweep_covers_both_modes() {
    let mut cfg = config(3);
    cfg.set("sweep_l_m", "1,4,16").unwrap();
    let rows = harness::sweep(&cfg).unwrap();
    assert_eq!(rows.len(), 6);
    let cores = |mode: FeedbackMode| -> Vec<usize> {
        rows.iter()
            .filter_map(SweepRow::cost)
            .filter(|c| c.mode == mode)
            .map(|c| c.cores_used)
            .collect()
    };
    let (fa, dfa) = (cores(FeedbackMode::Fa), cores(FeedbackMode::Dfa));
    assert_eq!(fa.len(), 3);
    assert!(fa.iter().zip(&dfa).all(|(f, d)| d <= f), "fa {fa:?} dfa {dfa:?}");
    assert!(fa.windows(2).all(|w| w[1] <= w[0]));
    let csv = harness::sweep_csv(&rows);
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn sweep_marks_rows_that_break_a_limit() {
    let mut cfg = config(3);
    cfg.set("sweep_l_m", "1,16").unwrap();
    cfg.constraints.max_synapses_per_core = 200;
    let rows = harness::sweep(&cfg).unwrap();
    assert!(matches!(rows[0], SweepRow::Feasible(_)), "{rows:?}");
    assert!(matches!(rows[1], SweepRow::Infeasible { .. }), "{rows:?}");
    assert!(harness::sweep_csv(&rows).contains("16,infeasible"));
}

#[test]
fn csv_input_is_used_without_idx_files() {
    let data = bars(12, 3, 5);
    let dir = tempfile::tempdir().unwrap();
    let path: PathBuf = dir.path().join("train.csv");
    let mut text = String::from("label,pixels\n");
    for i in 0..data.len() {
        let row: Vec<String> = data.image(i).iter().map(u8::to_string).collect();
        text.push_str(&format!("{},{}\n", data.label(i), row.join(",")));
    }
    fs::write(&path, text).unwrap();
    let mut cfg = config(3);
    cfg.set("train_csv", path.to_str().unwrap()).unwrap();
    let loaded = cfg.load_train().unwrap();
    assert_eq!(loaded, data);
    assert!(cfg.load_test().is_err());
}

#[test]
fn metrics_file_has_version_and_header() {
    let (train, test) = (bars(30, 3, 1), bars(30, 3, 2));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    let mut w = MetricsWriter::create(&path).unwrap();
    let out = harness::train(&config(3), &train, Some(&test), |r| w.write(r)).unwrap();
    drop(w);
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_VERSION);
    assert_eq!(lines[1], METRICS_HEADER);
    assert_eq!(lines.len(), 2 + out.records.len());
    let cols = METRICS_HEADER.split(',').count();
    for (line, r) in lines[2..].iter().zip(&out.records) {
        assert_eq!(*line, r.csv_row());
        assert_eq!(line.split(',').count(), cols);
    }
}

fn mnist() -> Option<PathBuf> {
    let dir = std::env::var_os("EMSTDP_MNIST")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

// 100 samples sit within seed noise of chance (early updates mostly lift
// every output toward the floor rate), so the smoke run uses 500.
#[test]
fn mnist_short_run_beats_chance() {
    let Some(dir) = mnist() else {
        eprintln!("skipped: no MNIST files");
        return;
    };
    let cfg = RunConfig {
        data_dir: Some(dir),
        epochs: 1,
        train_limit: Some(500),
        test_limit: Some(500),
        ..RunConfig::default()
    };
    let (train, test) = (cfg.load_train().unwrap(), cfg.load_test().unwrap());
    let out = harness::train(&cfg, &train, Some(&test), |_| Ok(())).unwrap();
    let acc = out.records[0].accuracy;
    assert!(acc > 0.15, "accuracy {acc}");
    let fp = harness::evaluate_oracle(&FpNetwork::from_built(&out.net), &test, None)
        .unwrap()
        .accuracy;
    let engine = harness::evaluate(&out.net, &test, None, None).unwrap().accuracy;
    assert!((engine - fp).abs() <= 0.05, "engine {engine} oracle {fp}");
}
