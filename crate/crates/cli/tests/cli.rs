use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use cubelet_cli::config::{validate_config, Overrides};
use cubelet_cli::pipeline::{read_predictions_csv, subgraph_metrics, Command, Pipeline};
use cubeletworld::discretize::DatasetManifest;
use cubeletworld::eval::{aggregate_subgraphs, Report};
use cubeletworld::formats::{open_reader, read_dataset, read_frames_csv, read_predictions};
use cubeletworld::graph::{read_graph_file, GraphRecord};
use cubeletworld::world::Resolution;

const SMALL: &str = r#"
seed = 11
resolutions = [[103, 93, 21], [51, 53, 57]]
[sim]
num_steps = 120
"#;

fn setup(text: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.toml");
    fs::write(&p, text).unwrap();
    (dir, p)
}

fn pipeline(config: &Path, o: &Overrides) -> Pipeline {
    Pipeline::new(validate_config(config, o).unwrap())
}

fn bin() -> Proc {
    Proc::new(env!("CARGO_BIN_EXE_cubelet"))
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn all_with_two_resolutions_gives_two_rows() {
    let (_dir, cfg) = setup(SMALL);
    let p = pipeline(&cfg, &Overrides::default());
    let table = p.run(Command::All).unwrap().unwrap();
    assert_eq!(table.lines().count(), 3);
    let report: Report = serde_json::from_reader(open_reader(&p.layout().report_json()).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].cubelet_size, [103.0, 93.0, 21.0]);
    assert_eq!(report.rows[1].cubelet_size, [51.0, 53.0, 57.0]);
    assert!(report.rows.iter().all(|r| r.model == "persistence"));
    assert!(!p.layout().lock().exists());
}

#[test]
fn reruns_are_byte_identical() {
    let (dir, cfg) = setup(SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = Overrides {
            out: Some(out.clone()),
            ..Default::default()
        };
        pipeline(&cfg, &o).run(Command::All).unwrap();
    }
    let fa = files(&a);
    assert_eq!(fa, files(&b));
    assert!(fa.iter().any(|f| f.ends_with("dataset.cwds")));
    assert!(fa.iter().any(|f| f.ends_with("report.json")));
    for f in fa.iter().filter(|f| !f.ends_with("config.toml")) {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{}", f.display());
    }
    // Re-running a finished stage leaves its outputs unchanged.
    let before = fs::read(a.join("report.json")).unwrap();
    let o = Overrides {
        out: Some(a.clone()),
        ..Default::default()
    };
    pipeline(&cfg, &o).run(Command::Evaluate).unwrap();
    assert_eq!(fs::read(a.join("report.json")).unwrap(), before);
}

#[test]
fn stages_one_by_one_match_all() {
    let (dir, cfg) = setup(SMALL);
    let staged = dir.path().join("staged");
    let whole = dir.path().join("whole");
    let o = |p: &PathBuf| Overrides {
        out: Some(p.clone()),
        ..Default::default()
    };
    let p = pipeline(&cfg, &o(&staged));
    for c in [Command::Simulate, Command::Discretize, Command::Graph, Command::Predict, Command::Evaluate] {
        p.run(c).unwrap();
    }
    pipeline(&cfg, &o(&whole)).run(Command::All).unwrap();
    assert_eq!(
        fs::read(staged.join("report.json")).unwrap(),
        fs::read(whole.join("report.json")).unwrap()
    );
}

#[test]
fn evaluate_before_predict_names_the_missing_stage() {
    let (dir, cfg) = setup(SMALL);
    let p = pipeline(&cfg, &Overrides::default());
    p.run(Command::Simulate).unwrap();
    p.run(Command::Discretize).unwrap();
    let out = bin()
        .args(["evaluate", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing predictions; run predict"), "{err}");

    let fresh = dir.path().join("fresh");
    let o = Overrides {
        out: Some(fresh),
        ..Default::default()
    };
    let err = pipeline(&cfg, &o).run(Command::Discretize).unwrap_err().to_string();
    assert!(err.contains("run simulate"), "{err}");
}

#[test]
fn binary_runs_with_flag_overrides() {
    let (dir, cfg) = setup(SMALL);
    let out_dir = dir.path().join("flags");
    let out = bin()
        .args(["all", "--config"])
        .arg(&cfg)
        .args(["--seed", "5", "--resolution", "20,20,20", "--resolution", "15,15,15"])
        .args(["--model", "frequency", "--folds", "4", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("Model"));
    assert!(table.contains("frequency"));
    let echo = fs::read_to_string(out_dir.join("config.toml")).unwrap();
    assert!(echo.contains("seed = 5"));
    assert!(echo.contains("folds = 4"));
    assert!(echo.contains("model = \"frequency\""));
    let manifest: DatasetManifest =
        serde_json::from_reader(open_reader(&out_dir.join("frames/15x15x15/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.num_folds, 4);
    assert_eq!(manifest.seed, 5);
}

#[test]
fn malformed_and_invalid_configs_fail_with_diagnostics() {
    let (_dir, cfg) = setup("resolutions = [[5, 5, 5]]\nt1 = \n");
    let out = bin().args(["simulate", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let (_dir, cfg) = setup("resolutions = [[5, 5, 5]]\nt1 = 0\n");
    let out = bin().args(["simulate", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("t1 must be ≥ 1"));
}

#[test]
fn held_lock_blocks_a_second_run() {
    let (_dir, cfg) = setup(SMALL);
    let p = pipeline(&cfg, &Overrides::default());
    fs::create_dir_all(p.layout().root()).unwrap();
    fs::write(p.layout().lock(), "1").unwrap();
    let err = p.run(Command::Simulate).unwrap_err().to_string();
    assert!(err.contains("in use"), "{err}");
}

#[test]
fn exported_files_agree_with_sparse_artifacts() {
    let (_dir, cfg) = setup(SMALL);
    let p = pipeline(&cfg, &Overrides::default());
    p.run(Command::All).unwrap();
    let res = Resolution::new(51.0, 53.0, 57.0).unwrap();
    let l = p.layout();
    let manifest: DatasetManifest = serde_json::from_reader(open_reader(&l.manifest(&res)).unwrap()).unwrap();
    assert_eq!(manifest.num_samples, 120 - 20 + 1);
    assert_eq!(manifest.grid.shape.as_array(), [17, 15, 4]);
    let shape = manifest.grid.shape;
    let frames = read_frames_csv(open_reader(&l.frames(&res)).unwrap(), shape, 120).unwrap();

    let ds = read_dataset(open_reader(&l.dataset(&res)).unwrap()).unwrap();
    assert_eq!(ds.header.num_samples as usize, manifest.num_samples);
    for s in [0, 37, manifest.num_samples - 1] {
        for (a, b) in ds.history(s).iter().chain(ds.future(s)).zip(&frames[s..s + 20]) {
            assert_eq!(a.occupied(), b.occupied());
        }
    }

    let model = cubelet_cli::config::ModelKind::Persistence;
    let dense = read_predictions(open_reader(&l.predictions_cwpr(model, &res)).unwrap()).unwrap();
    let sparse = read_predictions_csv(open_reader(&l.predictions_csv(model, &res)).unwrap(), shape, 101, 10).unwrap();
    for (a, b) in dense.samples.iter().flatten().zip(sparse.iter().flatten()) {
        assert_eq!(a.occupied(), b.occupied());
    }
    // Persistence repeats the last history frame.
    assert_eq!(sparse[4][7].occupied(), frames[4 + 9].occupied());

    let (header, graphs) = read_graph_file(open_reader(&l.graph(&res)).unwrap()).unwrap();
    let GraphRecord::Header { node_count, edge_count, .. } = header else {
        panic!("no header")
    };
    assert_eq!(graphs.len(), 1);
    assert_eq!(graphs[0].nodes.len(), node_count);
    assert_eq!(graphs[0].edges.len(), edge_count);
}

#[test]
fn multi_subgraph_mode_reports_subgraph_means() {
    let (_dir, cfg) = setup(&format!("{SMALL}\n[graph]\nmode = \"multi_subgraph\"\nk = 2\n"));
    let p = pipeline(&cfg, &Overrides::default());
    p.run(Command::All).unwrap();
    let l = p.layout();
    let res = Resolution::new(103.0, 93.0, 21.0).unwrap();
    let report: Report = serde_json::from_reader(open_reader(&l.report_json()).unwrap()).unwrap();
    assert_eq!(report.rows[0].model, "persistence-msg");

    // Recompute fold 0 independently from the artifacts.
    let manifest: DatasetManifest = serde_json::from_reader(open_reader(&l.manifest(&res)).unwrap()).unwrap();
    let shape = manifest.grid.shape;
    let frames = read_frames_csv(open_reader(&l.frames(&res)).unwrap(), shape, 120).unwrap();
    let (_, graphs) = read_graph_file(open_reader(&l.graph(&res)).unwrap()).unwrap();
    assert!(graphs.len() > 1);
    let members: Vec<_> = graphs.into_iter().map(|g| g.nodes).collect();
    let folds = manifest.fold_assignment().unwrap();
    let model = cubelet_cli::config::ModelKind::Persistence;
    let preds = read_predictions_csv(open_reader(&l.predictions_csv(model, &res)).unwrap(), shape, 101, 10).unwrap();
    let range = folds.test_range(0);
    let pred: Vec<_> = preds[range.clone()].iter().flatten().cloned().collect();
    let truth: Vec<_> = range.flat_map(|s| frames[s + 10..s + 20].to_vec()).collect();
    let per = subgraph_metrics(&members, &pred, &truth).unwrap();
    let mean_f1 = per.iter().map(|r| r.metrics.f1).sum::<f64>() / per.len() as f64;
    assert!((aggregate_subgraphs(&per).unwrap().metrics.f1 - mean_f1).abs() < 1e-12);

    let metrics: serde_json::Value =
        serde_json::from_reader(open_reader(&l.metrics(model, &res)).unwrap()).unwrap();
    let fold0 = metrics["folds"][0]["f1"].as_f64().unwrap();
    assert!((fold0 - mean_f1).abs() < 1e-12);
}

#[test]
fn neighborhood_model_trains_per_fold() {
    let (_dir, cfg) = setup(&format!("model = \"neighborhood\"\n{SMALL}\n[train]\nepochs = 40\n"));
    let p = pipeline(&cfg, &Overrides::default());
    let table = p.run(Command::All).unwrap().unwrap();
    assert!(table.contains("neighborhood"));
    let res = Resolution::new(103.0, 93.0, 21.0).unwrap();
    let dir = p.layout().preds_dir(cubelet_cli::config::ModelKind::Neighborhood, &res);
    for f in 0..5 {
        assert!(dir.join(format!("model_fold{f}.json")).is_file());
    }
}
