use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pcnet::regpinv::read_svd_cache;

fn pcnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pcnet"))
}

fn run(args: &[&str]) -> Output {
    pcnet().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "pcnet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn data_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

/// 12 records of 4 correlated variables.
fn tiny_csv(dir: &Path) -> PathBuf {
    let mut text = String::from("x1,x2,x3,x4\n");
    for r in 0..12 {
        let t = r as f64;
        let x1 = (t * 0.7).sin();
        let x2 = x1 + 0.3 * (t * 1.3).cos();
        let x3 = (t * 0.4).cos() - 0.5 * x2;
        let x4 = 0.2 * t - x3;
        text.push_str(&format!("{x1},{x2},{x3},{x4}\n"));
    }
    let p = dir.join("tiny.csv");
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Data rows of a CSV written by the tool: comment and header removed.
fn data_rows(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

#[test]
fn geometric_edge_list_for_four_variables() {
    let dir = tempfile::tempdir().unwrap();
    let input = tiny_csv(dir.path());
    let out = dir.path().join("edges.csv");
    run_ok(&[
        "network", "--input", s(&input), "--ridge", "1.0", "--form", "geometric", "--output", s(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# pcnet "));
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 6);
    let names = ["x1", "x2", "x3", "x4"];
    for r in &rows {
        let f: Vec<&str> = r.split(',').collect();
        let i = names.iter().position(|n| *n == f[0]).unwrap();
        let j = names.iter().position(|n| *n == f[1]).unwrap();
        assert!(i < j);
        f[2].parse::<f64>().unwrap();
    }
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("edges.csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["n"], 4);
    assert_eq!(meta["reg"]["kind"], "ridge");
    assert_eq!(meta["sign_convention"], "as-written");
    for key in ["version", "config_hash"] {
        assert!(meta[key].is_string());
    }
    for key in ["diag_r", "d"] {
        let min = meta[key]["min"].as_f64().unwrap();
        let max = meta[key]["max"].as_f64().unwrap();
        assert!(min <= max);
    }
}

#[test]
fn threshold_filters_edges() {
    let dir = tempfile::tempdir().unwrap();
    let input = tiny_csv(dir.path());
    let all = dir.path().join("all.csv");
    let some = dir.path().join("some.csv");
    let base = ["network", "--input", s(&input), "--ridge", "0.5"];
    run_ok(&[&base[..], &["--output", s(&all)]].concat());
    run_ok(&[&base[..], &["--threshold", "0.2", "--output", s(&some)]].concat());
    let all_text = fs::read_to_string(&all).unwrap();
    let some_text = fs::read_to_string(&some).unwrap();
    let all_rows = data_rows(&all_text);
    let kept = data_rows(&some_text);
    assert_eq!(all_rows.len(), 12);
    let expected: Vec<&str> = all_rows
        .iter()
        .copied()
        .filter(|r| r.rsplit(',').next().unwrap().parse::<f64>().unwrap().abs() >= 0.2)
        .collect();
    assert_eq!(kept, expected);
    assert!(kept.len() < all_rows.len());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let input = tiny_csv(dir.path());
    for format in ["edges-csv", "dense-csv", "json", "factored-bin"] {
        let a = dir.path().join(format!("a.{format}"));
        let b = dir.path().join(format!("b.{format}"));
        for out in [&a, &b] {
            run_ok(&[
                "network", "--input", s(&input), "--svd-rank", "2", "--format", format, "--output", s(out),
            ]);
        }
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "{format}");
        let meta_a = fs::read_to_string(format!("{}.meta.json", a.display())).unwrap();
        let meta_b = fs::read_to_string(format!("{}.meta.json", b.display())).unwrap();
        // sidecars differ only in the output path they record
        assert_eq!(
            meta_a.replace(s(&a), "OUT"),
            meta_b.replace(s(&b), "OUT"),
        );
    }
}

#[test]
fn dense_and_json_formats_agree() {
    let dir = tempfile::tempdir().unwrap();
    let input = tiny_csv(dir.path());
    let dense = dir.path().join("p.csv");
    let json = dir.path().join("p.json");
    let base = ["network", "--input", s(&input), "--ridge", "0.3", "--form", "geometric"];
    run_ok(&[&base[..], &["--format", "dense-csv", "--output", s(&dense)]].concat());
    run_ok(&[&base[..], &["--format", "json", "--output", s(&json)]].concat());
    let text = fs::read_to_string(&dense).unwrap();
    let rows: Vec<Vec<f64>> = data_rows(&text)
        .iter()
        .map(|r| r.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["nodes"].as_array().unwrap().len(), 4);
    for i in 0..4 {
        assert_eq!(rows[i][i], 0.0);
        for j in 0..4 {
            // serde_json's default float parser may be off by one ulp
            let from_json = v["weights"][i][j].as_f64().unwrap();
            assert!((rows[i][j] - from_json).abs() <= 2.0 * f64::EPSILON * rows[i][j].abs());
            assert_eq!(rows[i][j], rows[j][i]);
        }
    }
}

#[test]
fn factored_output_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let input = tiny_csv(dir.path());
    let out = dir.path().join("r.bin");
    run_ok(&[
        "network", "--input", s(&input), "--svd-rank", "3", "--format", "factored-bin", "--output", s(&out),
    ]);
    let (svd, filters) = read_svd_cache(&mut fs::File::open(&out).unwrap()).unwrap();
    assert_eq!((svd.m(), svd.n(), svd.q()), (12, 4, 4));
    assert_eq!(filters.unwrap(), vec![1.0, 1.0, 1.0, 0.0]);

    let cache = dir.path().join("svd.bin");
    run_ok(&["svd-cache", "--input", s(&input), "--output", s(&cache)]);
    let (svd2, none) = read_svd_cache(&mut fs::File::open(&cache).unwrap()).unwrap();
    assert_eq!(svd, svd2);
    assert!(none.is_none());
}

#[test]
fn spectral_embedding_shape_and_self_check() {
    let dir = tempfile::tempdir().unwrap();
    let input = tiny_csv(dir.path());
    let out = dir.path().join("emb.csv");
    let res = run_ok(&[
        "embed", "--input", s(&input), "--svd-rank", "2", "--self-check", "--output", s(&out),
    ]);
    assert!(String::from_utf8_lossy(&res.stderr).contains("self-check"));
    let text = fs::read_to_string(&out).unwrap();
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.split(',').count() == 3));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(format!("{}.meta.json", out.display())).unwrap()).unwrap();
    assert!(meta["self_check_max_error"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn distance_matrices_are_symmetric_with_zero_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let input = tiny_csv(dir.path());
    for (metric, reg) in [
        ("resolution", ["--svd-rank", "2"]),
        ("pcn-exact", ["--ridge", "1.0"]),
        ("pcn-approx", ["--ridge", "1.0"]),
        ("standard-euclidean", ["--ridge", "1.0"]),
    ] {
        let out = dir.path().join(format!("{metric}.csv"));
        run_ok(&[
            &["embed", "--input", s(&input), "--metric", metric][..],
            &reg[..],
            &["--output", s(&out)][..],
        ]
        .concat());
        let text = fs::read_to_string(&out).unwrap();
        let m: Vec<Vec<f64>> = data_rows(&text)
            .iter()
            .map(|r| r.split(',').map(|x| x.parse().unwrap()).collect())
            .collect();
        assert_eq!(m.len(), 4);
        for i in 0..4 {
            assert_eq!(m[i][i], 0.0, "{metric}");
            for j in 0..4 {
                assert_eq!(m[i][j], m[j][i], "{metric}");
                assert!(m[i][j] >= 0.0);
            }
        }
    }
}

#[test]
fn knn_iris_row_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let iris = data_file("iris.csv");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(&[
            "knn", "--input", s(&iris), "--label-column", "class", "--dataset-name", "Iris", "--folds", "5",
            "--seed", "17", "--output", s(out),
        ]);
    }
    let row_text = fs::read_to_string(a.with_extension("csv")).unwrap();
    let rows = data_rows(&row_text);
    assert_eq!(rows.len(), 1);
    let f: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(&f[..3], &["Iris", "150", "4"]);
    let acc_knn: f64 = f[3].parse().unwrap();
    assert!((acc_knn - 95.3).abs() <= 3.0, "{acc_knn}");
    assert_eq!(
        fs::read(a.with_extension("json")).unwrap(),
        fs::read(b.with_extension("json")).unwrap()
    );
    assert_eq!(fs::read(a.with_extension("csv")).unwrap(), fs::read(b.with_extension("csv")).unwrap());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.with_extension("json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 17);
    assert_eq!(report["k_folds"], 5);
    assert!(report["cells"].as_array().unwrap().len() > 7);
}

#[test]
fn knn_wine_row_shape() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("wine");
    let res = run_ok(&[
        "knn", "--input", s(&data_file("wine.csv")), "--label-column", "class", "--dataset-name", "Wine",
        "--k-grid", "1,5", "--reg-grid", "ridge:1,rank:4", "--output", s(&out),
    ]);
    assert!(String::from_utf8_lossy(&res.stdout).starts_with("Wine,178,13,"));
}

#[test]
fn failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let input = tiny_csv(dir.path());
    let out = dir.path().join("x");
    // no labels
    let r = run(&["knn", "--input", s(&input), "--output", s(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("label"));
    // no regularization
    assert!(!run(&["network", "--input", s(&input), "--output", s(&out)]).status.success());
    // missing input
    assert!(!run(&["network", "--input", "/nonexistent.csv", "--ridge", "1", "--output", s(&out)])
        .status
        .success());
    // mutually exclusive regularizations
    assert!(!run(&["network", "--input", s(&input), "--ridge", "1", "--svd-rank", "2", "--output", s(&out)])
        .status
        .success());
    // a truncation that resolves every node perfectly
    let r = run(&["network", "--input", s(&input), "--svd-rank", "4", "--output", s(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("perfectly resolved"));
    // ridge spectral embedding is not defined
    assert!(!run(&["embed", "--input", s(&input), "--ridge", "1", "--output", s(&out)]).status.success());
}
