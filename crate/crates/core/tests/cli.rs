use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use soupmix::bench::{TaskSpec, TrainGrid};
use soupmix::tensor_store::{self, Metadata, ParameterSet};

fn soupmix(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_soupmix"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = soupmix(args);
    assert_eq!(code, 0, "soupmix {args:?} failed:\n{err}");
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn small_task_config(dir: &Path, classes: usize) -> PathBuf {
    let mut spec = TaskSpec::default_v1();
    spec.n_train = 400;
    spec.n_val = 100;
    spec.n_test = 200;
    spec.classes = classes;
    let p = dir.join(format!("task{classes}.json"));
    write_json(&p, &spec);
    p
}

fn small_grid(dir: &Path, n: usize) -> PathBuf {
    let mut grid = TrainGrid::reference_v1();
    grid.configs.truncate(n);
    for c in &mut grid.configs {
        c.epochs = 4;
    }
    let p = dir.join(format!("grid{n}.json"));
    write_json(&p, &grid);
    p
}

/// Task bundle plus trained pool in a fresh temp dir.
struct Fixture {
    dir: tempfile::TempDir,
    task: PathBuf,
    pool: PathBuf,
}

fn fixture(n_models: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_task_config(dir.path(), 4);
    let task = dir.path().join("task");
    ok(&["make-task", "--config", s(&cfg), "--out", s(&task)]);
    let grid = small_grid(dir.path(), n_models);
    let pool = dir.path().join("pool");
    ok(&["train-pool", "--task", s(&task), "--grid", s(&grid), "--seed", "3", "--out", s(&pool)]);
    Fixture { dir, task, pool }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn make_task_default_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let printed = ok(&["make-task", "--seed", "5", "--out", s(&a)]);
    assert!(printed.trim().ends_with("task.json"));
    ok(&["make-task", "--seed", "5", "--out", s(&b)]);
    let files = dir_bytes(&a);
    let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("shift-")).count(), 5);
    assert!(names.contains(&"test.ckpt") && names.contains(&"task.json"));
    assert_eq!(files, dir_bytes(&b));
}

#[test]
fn make_task_unwritable_output() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let (code, _, err) = soupmix(&["make-task", "--out", s(&blocker.join("sub"))]);
    assert_ne!(code, 0);
    assert!(!err.is_empty());
}

#[test]
fn make_task_invalid_spec() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = TaskSpec::default_v1();
    spec.classes = 0;
    let p = dir.path().join("bad.json");
    write_json(&p, &spec);
    let (code, _, _) = soupmix(&["make-task", "--config", s(&p), "--out", s(&dir.path().join("t"))]);
    assert_eq!(code, 2);
}

#[test]
fn train_pool_sizes() {
    let f = fixture(1);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(f.pool.join("pool.json")).unwrap()).unwrap();
    assert_eq!(manifest["members"].as_array().unwrap().len(), 1);

    let mut grid = TrainGrid::reference_v1();
    grid.configs.clear();
    let empty = f.dir.path().join("empty.json");
    write_json(&empty, &grid);
    let (code, _, _) = soupmix(&["train-pool", "--task", s(&f.task), "--grid", s(&empty), "--out", s(&f.dir.path().join("p0"))]);
    assert_eq!(code, 1);
}

#[test]
fn soup_uniform_matches_external_average() {
    let f = fixture(2);
    let out = f.dir.path().join("uniform");
    ok(&["soup", "--pool", s(&f.pool), "--method", "uniform", "--out", s(&out)]);
    let (fused, _) = tensor_store::load(out.join("fused.ckpt")).unwrap();

    let manifest: Value = serde_json::from_str(&fs::read_to_string(f.pool.join("pool.json")).unwrap()).unwrap();
    let models: Vec<ParameterSet> = manifest["members"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| tensor_store::load(f.pool.join(m["checkpoint"].as_str().unwrap())).unwrap().0)
        .collect();
    for (i, t) in fused.tensors().iter().enumerate() {
        for (j, v) in t.data().iter().enumerate() {
            let expect = (models[0].tensors()[i].data()[j] as f64 + models[1].tensors()[i].data()[j] as f64) / 2.0;
            assert!((*v as f64 - expect).abs() <= 1e-6 * expect.abs().max(1e-30), "{} [{j}]", t.name());
        }
    }
}

#[test]
fn soup_manifold_echoes_settings_and_is_idempotent() {
    let f = fixture(3);
    let a = f.dir.path().join("m1");
    let b = f.dir.path().join("m2");
    let args = |o: &Path| {
        vec![
            "soup".to_string(), "--pool".into(), s(&f.pool).into(), "--task".into(), s(&f.task).into(),
            "--method".into(), "manifold".into(), "--auto".into(), "8:contiguous-blocks".into(),
            "--tau".into(), "0.998".into(), "--budget".into(), "250".into(), "--out".into(), s(o).into(),
        ]
    };
    let a_args = args(&a);
    ok(&a_args.iter().map(String::as_str).collect::<Vec<_>>());
    let b_args = args(&b);
    ok(&b_args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let report: Value = serde_json::from_str(&fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "manifold");
    assert_eq!(report["tau"], 0.998);
    assert_eq!(report["budget"], 250);
    assert_eq!(report["components"], 8);
    assert_eq!(report["candidates"].as_array().unwrap().len(), 2);
    assert_eq!(report["final"]["checkpoint_path"], "fused.ckpt");

    // fused checkpoint re-evaluated through `eval` matches the recorded accuracy
    let eval: Value = serde_json::from_str(&ok(&["eval", "--checkpoint", s(&a.join("fused.ckpt")), "--task", s(&f.task)])).unwrap();
    let recorded = report["final"]["val_acc"].as_f64().unwrap();
    assert!((eval["val"].as_f64().unwrap() - recorded).abs() < 1e-9);
}

#[test]
fn soup_manifold_needs_partition() {
    let f = fixture(1);
    let (code, _, err) = soupmix(&[
        "soup", "--pool", s(&f.pool), "--task", s(&f.task), "--method", "manifold", "--out", s(&f.dir.path().join("o")),
    ]);
    assert_eq!(code, 1, "{err}");
    let (code, _, _) = soupmix(&[
        "soup", "--pool", s(&f.pool), "--task", s(&f.task), "--method", "manifold", "--auto", "9:contiguous-blocks",
        "--out", s(&f.dir.path().join("o")),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn soup_single_model_pool() {
    let f = fixture(1);
    let out = f.dir.path().join("one");
    ok(&[
        "soup", "--pool", s(&f.pool), "--task", s(&f.task), "--method", "manifold", "--auto", "3:by-name-prefix",
        "--out", s(&out),
    ]);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["candidates"].as_array().unwrap().len(), 0);
    assert_eq!(report["final"]["k"], 1);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(f.pool.join("pool.json")).unwrap()).unwrap();
    let only = manifest["members"][0]["checkpoint"].as_str().unwrap();
    let (fused, _) = tensor_store::load(out.join("fused.ckpt")).unwrap();
    assert_eq!(fused, tensor_store::load(f.pool.join(only)).unwrap().0);
}

#[test]
fn soup_uniform_warns_about_ignored_flags() {
    let f = fixture(1);
    let (code, _, err) = soupmix(&[
        "soup", "--pool", s(&f.pool), "--method", "uniform", "--tau", "0.9", "--out", s(&f.dir.path().join("u")),
    ]);
    assert_eq!(code, 0);
    assert!(err.contains("warning"));
}

#[test]
fn eval_constant_predictor_and_row_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_task_config(dir.path(), 2);
    let task = dir.path().join("task");
    ok(&["make-task", "--config", s(&cfg), "--out", s(&task)]);
    let arch = soupmix::bench::Architecture::new(8, vec![4, 4], 2);
    let ps = ParameterSet::from_entries(arch.schema().into_iter().map(|(n, shape)| {
        let len = shape.iter().product();
        let data = if n == "head.bias" { vec![1.0, 0.0] } else { vec![0.0; len] };
        (n, shape, data)
    }))
    .unwrap();
    let ckpt = dir.path().join("const.ckpt");
    tensor_store::save(&ps, &Metadata::new(), &ckpt).unwrap();
    let r: Value = serde_json::from_str(&ok(&["eval", "--checkpoint", s(&ckpt), "--task", s(&task)])).unwrap();
    assert_eq!(r["clean"], 0.5);

    let md = ok(&["eval", "--checkpoint", s(&ckpt), "--task", s(&task), "--format", "md"]);
    let ids: Vec<&str> = md.lines().skip(2).map(|l| l.split('|').nth(1).unwrap().trim()).collect();
    assert_eq!(ids, ["val", "clean", "rotation", "noise", "dropout", "scale", "mixup-blur", "Avg OOD"]);

    // schema mismatch between checkpoint and task
    let wrong = soupmix::bench::Architecture::new(3, vec![2, 2], 2);
    let ps = ParameterSet::from_entries(wrong.schema().into_iter().map(|(n, shape)| {
        let len = shape.iter().product();
        (n, shape, vec![0.0; len])
    }))
    .unwrap();
    let bad = dir.path().join("bad.ckpt");
    tensor_store::save(&ps, &Metadata::new(), &bad).unwrap();
    assert_eq!(soupmix(&["eval", "--checkpoint", s(&bad), "--task", s(&task)]).0, 2);
}

fn md_rows(md: &str) -> Vec<Vec<String>> {
    md.lines()
        .skip(2)
        .map(|l| {
            l.trim_matches('|')
                .split('|')
                .map(|c| c.trim().trim_matches('*').to_string())
                .collect()
        })
        .collect()
}

#[test]
fn report_table_parity_and_means() {
    let f = fixture(3);
    let mut inputs = Vec::new();
    for method in ["uniform", "greedy", "manifold"] {
        let out = f.dir.path().join(method);
        let mut args = vec!["soup", "--pool", s(&f.pool), "--task", s(&f.task), "--method", method, "--out", s(&out)];
        if method == "manifold" {
            args.extend(["--auto", "8:contiguous-blocks"]);
        }
        ok(&args);
        let eval_path = f.dir.path().join(format!("{method}.eval.json"));
        ok(&["eval", "--checkpoint", s(&out.join("fused.ckpt")), "--task", s(&f.task), "--out", s(&eval_path)]);
        inputs.push(format!("{method}={}", eval_path.display()));
    }
    let mut base = vec!["report", "--pool", s(&f.pool), "--task", s(&f.task)];
    for i in &inputs {
        base.extend(["--input", i.as_str()]);
    }
    let md = ok(&base);
    let mut json_args = base.clone();
    json_args.extend(["--format", "json"]);
    let json: Value = serde_json::from_str(&ok(&json_args)).unwrap();

    let rows = md_rows(&md);
    assert_eq!(rows.len(), 5);
    assert!(rows[0][0].starts_with("best model"));
    assert!(rows[1][0].starts_with("second-best model"));
    let jrows = json["rows"].as_array().unwrap();
    for (row, jrow) in rows.iter().zip(jrows) {
        let values: Vec<f64> = jrow["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        // markdown cells equal the JSON numbers at display precision
        for (cell, v) in row[1..=values.len()].iter().zip(&values) {
            assert_eq!(cell, &format!("{:.2}", v * 100.0));
        }
        let avg = jrow["avg_ood"].as_f64().unwrap();
        let mean = values[1..].iter().sum::<f64>() / (values.len() - 1) as f64;
        assert!((avg - mean).abs() < 1e-12);
        assert_eq!(row[values.len() + 1], format!("{:.2}", avg * 100.0));
    }
    assert_eq!(rows[0].last().unwrap(), "+0.00");

    let (code, _, err) = soupmix(&["report", "--input", "x=/no/such/a.json", "--input", "y=/no/such/b.json"]);
    assert_eq!(code, 2);
    assert!(err.contains("a.json") && err.contains("b.json"));
}
