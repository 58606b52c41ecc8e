use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coalesce::pencil::{sgplus_generate, ParametricPencil, RealizationDescriptor};
use serde_json::Value;

fn coalesce(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coalesce"))
        .arg("--out-dir")
        .arg(out)
        .arg("--log-level")
        .arg("warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap_or_else(|_| panic!("{path:?}"))).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn published_counts() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/published_counts.csv")
}

#[test]
fn generate_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = coalesce(
        dir.path(),
        &[
            "--seed", "42", "generate", "--n", "8", "--b", "3", "--delta", "0.45",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let desc: RealizationDescriptor =
        serde_json::from_str(&fs::read_to_string(dir.path().join("realization.json")).unwrap())
            .unwrap();
    let from_file = desc.generate().unwrap();
    let direct = sgplus_generate(8, 3, 0.45, 42).unwrap();
    for (x, y) in [(0.0, 0.0), (1.3, 4.2), (3.0, 0.7)] {
        assert_eq!(from_file.eval(x, y), direct.eval(x, y));
    }
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn generate_rejects_bad_dispersion_and_bandwidth() {
    let dir = tempfile::tempdir().unwrap();
    let o = coalesce(
        dir.path(),
        &["generate", "--n", "10", "--b", "3", "--delta", "0.9"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sqrt((n+1)/(n+5))"), "{}", stderr(&o));

    let o = coalesce(
        dir.path(),
        &["generate", "--n", "10", "--b", "0", "--delta", "0.45"],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        coalesce(dir.path(), &["generate", "--n", "ten"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(coalesce(dir.path(), &["bogus"]).status.code(), Some(1));
    let o = coalesce(
        dir.path(),
        &["trace", "--pencil", "{\"kind\":\"nope\"}", "--loop", "{}"],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn trace_signatures() {
    let dir = tempfile::tempdir().unwrap();
    let pencil = r#"{"kind":"analytic_ci"}"#;
    let o = coalesce(
        dir.path(),
        &[
            "trace",
            "--pencil",
            pencil,
            "--loop",
            r#"{"kind":"circle","center":[0,0],"radius":1}"#,
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let sig = json(dir.path().join("signature.json"));
    assert_eq!(sig["d"], serde_json::json!([-1, -1]));
    assert_eq!(sig["pair_flags"], serde_json::json!([true]));
    let csv = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(csv.starts_with("t,h,lambda_1,lambda_2,rho_lambda,rho_v,veer\n"));

    let o = coalesce(
        dir.path(),
        &[
            "trace",
            "--pencil",
            pencil,
            "--loop",
            r#"{"kind":"circle","center":[2,0],"radius":0.5}"#,
        ],
    );
    assert!(o.status.success());
    assert_eq!(
        json(dir.path().join("signature.json"))["d"],
        serde_json::json!([1, 1])
    );
}

#[test]
fn trace_through_intersection_fails_numerically() {
    let dir = tempfile::tempdir().unwrap();
    let o = coalesce(
        dir.path(),
        &[
            "trace",
            "--pencil",
            r#"{"kind":"analytic_ci"}"#,
            "--loop",
            r#"{"kind":"box","x0":-0.5,"y0":0,"side_x":1,"side_y":1}"#,
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("step underflow"), "{}", stderr(&o));
    assert_eq!(
        json(dir.path().join("signature.json"))["status"],
        "unresolvable"
    );
}

#[test]
fn trace_reads_spec_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("pencil.toml");
    fs::write(&p, "kind = \"embedded\"\nn = 4\nj = 2\nouter = [10.0, -10.0]\n[domain]\nx_lo = -1.0\nx_hi = 1.0\ny_lo = -1.0\ny_hi = 1.0\n").unwrap();
    let l = dir.path().join("loop.json");
    fs::write(&l, r#"{"kind":"ellipse","center":[0,0],"rx":0.5,"ry":0.2}"#).unwrap();
    let o = coalesce(
        dir.path(),
        &[
            "trace",
            "--pencil",
            p.to_str().unwrap(),
            "--loop",
            l.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let sig = json(dir.path().join("signature.json"));
    assert_eq!(sig["d"], serde_json::json!([1, -1, -1, 1]));
    assert_eq!(sig["pair_flags"], serde_json::json!([false, true, false]));
}

#[test]
fn sweep_analytic_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = coalesce(
        dir.path(),
        &[
            "sweep",
            "--pencil",
            r#"{"kind":"analytic_ci"}"#,
            "--domain",
            "-1,1,-1,1",
            "--rows",
            "8",
            "--cols",
            "8",
            "--refine",
            "6",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let s = json(dir.path().join("sweep.json"));
    assert_eq!(s["total"], 1);
    assert_eq!(s["failures"], serde_json::json!([]));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let est = json(dir.path().join("refine.json"));
    assert_eq!(est.as_array().unwrap().len(), 1);
    assert!(est[0]["x"].as_f64().unwrap().abs() < 0.01);
}

#[test]
fn single_box_sweep_matches_trace() {
    let dir = tempfile::tempdir().unwrap();
    let pencil = r#"{"kind":"embedded","n":4,"j":2,"outer":[10,-10],"domain":{"x_lo":-1,"x_hi":1,"y_lo":-1,"y_hi":1}}"#;
    let o = coalesce(
        dir.path(),
        &[
            "sweep",
            "--pencil",
            pencil,
            "--domain",
            "-0.3,0.7,-0.6,0.4",
            "--rows",
            "1",
            "--cols",
            "1",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        json(dir.path().join("sweep.json"))["pair_totals"],
        serde_json::json!([0, 1, 0])
    );
    let o = coalesce(
        dir.path(),
        &[
            "trace",
            "--pencil",
            pencil,
            "--loop",
            r#"{"kind":"box","x0":-0.3,"y0":-0.6,"side_x":1,"side_y":1}"#,
        ],
    );
    assert!(o.status.success());
    assert_eq!(
        json(dir.path().join("signature.json"))["pair_flags"],
        serde_json::json!([false, true, false])
    );
}

#[test]
fn sgplus_sweep_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "--seed",
        "3",
        "sweep",
        "--pencil",
        r#"{"kind":"sgplus","n":10,"b":9,"delta":0.45,"seed":0}"#,
        "--domain",
        "0,3.141592653589793,0,6.283185307179586",
        "--rows",
        "16",
        "--cols",
        "32",
    ];
    assert!(coalesce(a.path(), &args).status.success());
    assert!(coalesce(b.path(), &args).status.success());
    for f in ["sweep.csv", "sweep.json"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let s = json(a.path().join("sweep.json"));
    assert!(s["total"].as_u64().unwrap() > 0);
}

#[test]
fn fit_reproduces_published_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = coalesce(
        dir.path(),
        &["fit", "--data", published_counts().to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("fit.csv")).unwrap();
    let expected = [
        ("3", 2.59, 0.13),
        ("4", 2.55, 0.12),
        ("5", 2.45, 0.17),
        ("full", 2.02, 0.71),
    ];
    let rows: Vec<Vec<String>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    for (row, (b, p, c)) in rows.iter().zip(expected) {
        assert_eq!(row[0], b);
        assert!((row[2].parse::<f64>().unwrap() - p).abs() <= 0.01);
        assert!((row[3].parse::<f64>().unwrap() - c).abs() / c <= 0.1);
    }
}

#[test]
fn fit_rejects_empty_data() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let o = coalesce(dir.path(), &["fit", "--data", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn census_resume_is_byte_identical() {
    let spec_text = r#"
n_list = [6, 8, 10]
b_list = ["full", 2]
delta_list = [0.45]
realizations = 2
grid = [8, 16]
seed = 5
"#;
    let whole = tempfile::tempdir().unwrap();
    let spec = whole.path().join("spec.toml");
    fs::write(&spec, spec_text).unwrap();
    let o = coalesce(
        &whole.path().join("out"),
        &["census", "--spec", spec.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let parts = tempfile::tempdir().unwrap();
    let out = parts.path().join("out");
    let o = coalesce(
        &out,
        &[
            "census",
            "--spec",
            spec.to_str().unwrap(),
            "--stop-after",
            "5",
        ],
    );
    assert!(o.status.success());
    assert!(!out.join("aggregated.csv").exists());
    let o = coalesce(&out, &["census", "--spec", spec.to_str().unwrap()]);
    assert!(o.status.success());

    for f in ["aggregated.csv", "fits.csv", "loglog.dat", "exponents.csv"] {
        assert_eq!(
            fs::read(whole.path().join("out").join(f)).unwrap(),
            fs::read(out.join(f)).unwrap(),
            "{f}"
        );
    }
    let m = json(out.join("manifest.json"));
    assert_eq!(m["tool"], "coalesce-cli");
    assert_eq!(m["resolved"]["seed"], 5);
}
