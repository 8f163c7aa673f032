mod common;

use std::fs;
use std::path::Path;

use proptest::prelude::*;

use lengen::harness::{
    cell_dir, plot_files, run, summarize, sweep, ExperimentConfig, PlotKind, RunOptions, HEIGHT, WIDTH,
};
use lengen::posenc::PeVariant;

use common::harness::{csv_rows, num, read_back_series, tiny_config};

const ARTIFACTS: [&str; 9] = [
    "config.txt",
    "env.txt",
    "metrics.csv",
    "ckpt/step_000100.ckpt",
    "eval/em.csv",
    "eval/errors.csv",
    "eval/carry.csv",
    "eval/em_by_step.csv",
    "eval/selection.csv",
];

#[test]
fn smoke_run_writes_every_artifact_and_reruns_identically() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(100);
    let a = run(&cfg, &root.path().join("a"), &RunOptions::default()).unwrap();
    for f in ARTIFACTS {
        assert!(a.dir.join(f).exists(), "missing {f}");
    }
    let em = csv_rows(&a.dir.join("eval/em.csv"));
    assert_eq!(em.len(), 3);
    let curve = csv_rows(&a.dir.join("eval/em_by_step.csv"));
    assert_eq!(curve.len(), 4 * 3);
    for row in csv_rows(&a.dir.join("eval/selection.csv")) {
        let f: f64 = row["final_em"].parse().unwrap();
        let m: f64 = row["max_over_steps_em"].parse().unwrap();
        assert!(m >= f);
    }
    let text = fs::read_to_string(a.dir.join("config.txt")).unwrap();
    assert_eq!(ExperimentConfig::parse(&text).unwrap(), a.config);

    let b = run(&cfg, &root.path().join("b"), &RunOptions::default()).unwrap();
    for f in ["metrics.csv", "eval/em.csv", "eval/em_by_step.csv", "ckpt/step_000100.ckpt"] {
        assert_eq!(fs::read(a.dir.join(f)).unwrap(), fs::read(b.dir.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(40);
    let full = run(&cfg, &root.path().join("full"), &RunOptions::default()).unwrap();
    let dir = root.path().join("part");
    run(
        &cfg,
        &dir,
        &RunOptions {
            stop_after: Some(20),
            ..RunOptions::default()
        },
    )
    .unwrap();
    let resumed = run(
        &cfg,
        &dir,
        &RunOptions {
            resume: true,
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.params, full.params);
    for f in ["metrics.csv", "eval/em.csv", "eval/em_by_step.csv", "eval/selection.csv"] {
        assert_eq!(fs::read(dir.join(f)).unwrap(), fs::read(full.dir.join(f)).unwrap(), "{f}");
    }
    let mut other = cfg.clone();
    other.train.lr_peak = 1e-3;
    assert!(run(&other, &dir, &RunOptions { resume: true, ..RunOptions::default() }).is_err());
}

#[test]
fn invalid_settings_are_named() {
    let mut cfg = ExperimentConfig::desk();
    let err = cfg.set("pe.variant", "sinusoid").unwrap_err();
    assert!(err.starts_with("pe.variant"), "{err}");
    let err = ExperimentConfig::parse("pe.variant = sinusoid\nmodel.n_heads = 3\n").unwrap_err().to_string();
    assert!(err.contains("pe.variant") && err.contains("model.n_heads"), "{err}");
    let dir = tempfile::tempdir().unwrap();
    let mut bad = tiny_config(10);
    bad.model.n_heads = 5;
    assert!(run(&bad, dir.path(), &RunOptions::default()).is_err());
}

#[test]
fn two_by_two_sweep_summarizes_its_cells() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(40);
    cfg.sweep.weight_seeds = vec![0, 1];
    cfg.sweep.data_seeds = vec![0, 1];
    let s = sweep(&cfg, root.path()).unwrap();
    assert!(s.failures.is_empty());
    for (w, d) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        assert!(cell_dir(root.path(), w, d).join("eval/selection.csv").exists());
    }
    let runs = csv_rows(&root.path().join("runs.csv"));
    let summary = csv_rows(&root.path().join("summary.csv"));
    assert_eq!(summary.len(), 3);
    for row in &summary {
        let em: Vec<f64> = runs
            .iter()
            .filter(|r| r["length"] == row["length"])
            .map(|r| r["final_em"].parse().unwrap())
            .collect();
        assert_eq!(em.len(), 4);
        let f = |k: &str| -> f64 { row[k].parse().unwrap() };
        assert!(f("best") >= f("median") && f("median") >= f("min"));
        assert_eq!(f("best"), em.iter().cloned().fold(f64::MIN, f64::max));
        assert_eq!(f("min"), em.iter().cloned().fold(f64::MAX, f64::min));
    }
    assert_eq!(summarize(root.path()).unwrap(), s);

    let first = cell_dir(root.path(), 0, 0).join("metrics.csv");
    let stamp = fs::metadata(&first).unwrap().modified().unwrap();
    cfg.sweep.weight_seeds = vec![0, 1, 2];
    let grown = sweep(&cfg, root.path()).unwrap();
    assert_eq!(fs::metadata(&first).unwrap().modified().unwrap(), stamp);
    assert_eq!(grown.runs.len(), 6 * 3);
}

#[test]
fn plots_read_back_to_their_data() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(20);
    let a = run(&cfg, &root.path().join("fire"), &RunOptions::default()).unwrap();
    cfg.model.pe.variant = PeVariant::Alibi;
    let b = run(&cfg, &root.path().join("alibi"), &RunOptions::default()).unwrap();
    let inputs = [a.dir.join("eval/em.csv"), b.dir.join("eval/em.csv")];
    let paths: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    let labels = vec!["FIRE".to_string(), "Alibi".to_string()];
    let svg = plot_files(PlotKind::EmVsLength, &paths, &labels, &[]).unwrap();
    assert!(svg.contains(&format!("width=\"{WIDTH}\"")) && svg.contains(&format!("height=\"{HEIGHT}\"")));
    assert_eq!(svg.matches("class=\"legend\"").count(), 2);
    let series = read_back_series(&svg);
    for ((label, points), (want_label, path)) in series.iter().zip(labels.iter().zip(&inputs)) {
        assert_eq!(label, want_label);
        let rows = csv_rows(path);
        assert_eq!(points.len(), rows.len());
        for ((x, y), row) in points.iter().zip(&rows) {
            let len: f64 = row["length"].parse().unwrap();
            let em: f64 = row["em"].parse::<f64>().unwrap() * 100.0;
            // Pixels carry three decimals.
            assert!((x - len).abs() < 0.01 && (y - em).abs() < 0.1, "{label}: ({x},{y}) vs ({len},{em})");
        }
    }
    for kind in [PlotKind::LossVsStep, PlotKind::EmVsStep] {
        let file = if kind == PlotKind::LossVsStep { "metrics.csv" } else { "eval/em_by_step.csv" };
        let svg = plot_files(kind, &[a.dir.join(file).as_path()], &[], &[]).unwrap();
        assert!(!read_back_series(&svg).is_empty());
    }
}

#[test]
fn seed_boxes_show_the_spread() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(20);
    cfg.sweep.weight_seeds = vec![0, 1, 2];
    sweep(&cfg, root.path()).unwrap();
    let svg = plot_files(PlotKind::SeedBoxes, &[root.path().join("runs.csv").as_path()], &[], &[]).unwrap();
    let boxes: Vec<&str> = svg.split("<g class=\"box\"").skip(1).collect();
    assert_eq!(boxes.len(), 3);
    for b in boxes {
        let v: Vec<f64> = ["data-min", "data-q1", "data-median", "data-q3", "data-max"]
            .iter()
            .map(|k| num(b, k))
            .collect();
        assert!(v.windows(2).all(|w| w[0] <= w[1]), "{v:?}");
    }
}

fn any_config() -> impl Strategy<Value = ExperimentConfig> {
    let variants = prop::sample::select(PeVariant::ALL.to_vec());
    (
        variants,
        1usize..4,
        prop::sample::select(vec![(32usize, 2usize), (64, 4), (48, 3)]),
        any::<bool>(),
        (1u64..10_000, 0.0f64..0.5, 1e-5f64..1e-2),
        (any::<u64>(), any::<u64>(), any::<bool>(), any::<bool>()),
        prop::collection::vec(1usize..30, 1..6),
        (prop::collection::vec(0u64..100, 1..4), 0.0f64..1.0),
    )
        .prop_map(|(variant, layers, (d, h), tie, (steps, dropout, lr), (ws, ds, hints, rand), lengths, (seeds, p))| {
            let mut c = ExperimentConfig::desk();
            c.model.pe.variant = variant;
            c.model.n_layers = layers;
            c.model.d_model = d;
            c.model.n_heads = h;
            c.model.tie_embeddings = tie;
            c.model.pe.randomized = rand;
            c.train.steps = steps;
            c.train.warmup_steps = steps / 3;
            c.train.eval_every = steps.div_ceil(2);
            c.train.dropout = dropout;
            c.train.lr_peak = lr;
            c.train.weight_seed = ws;
            c.train.data_seed = ds;
            c.data.format.index_hints = hints;
            c.data.format.space_prob = p;
            c.eval.lengths = lengths;
            c.sweep.weight_seeds = seeds;
            c
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn config_text_round_trips(cfg in any_config()) {
        let text = cfg.to_text();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), text);
    }
}
