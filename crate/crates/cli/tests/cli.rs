//! End-to-end tests of the `mdts-calib` binary: every subcommand, the exit
//! code contract, determinism, and cross-command consistency.

use std::path::Path;
use std::process::{Command, Output};

use mdts_core::dataset::{DomainDataset, MultiDomainDataset, Split};
use mdts_core::prob;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdts-calib"))
        .args(args)
        .output()
        .expect("binary runs")
}

#[track_caller]
fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Generate a small benchmark and return its directory path.
fn small_synth(dir: &Path, extra: &[&str]) -> String {
    let data = dir.join("data");
    let mut args = vec![
        "synth",
        "--out",
        path_str(&data),
        "--domains",
        "3",
        "--ood-domains",
        "1",
        "--per-domain",
        "80",
        "--classes",
        "4",
        "--seed",
        "5",
    ];
    args.extend_from_slice(extra);
    assert_code(&run(&args), 0);
    data.to_str().unwrap().to_string()
}

#[test]
fn synth_writes_complete_deterministic_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let run_out = run(&[
            "synth",
            "--out",
            path_str(out),
            "--domains",
            "3",
            "--ood-domains",
            "1",
            "--per-domain",
            "50",
            "--classes",
            "4",
            "--seed",
            "9",
        ]);
        assert_code(&run_out, 0);
        let stdout = String::from_utf8_lossy(&run_out.stdout);
        assert!(stdout.contains("d0\tind"), "summary lists domains: {stdout}");
        assert!(stdout.contains("ood0\tood"), "summary lists held-out: {stdout}");
    }
    for file in ["manifest.json", "d0.csv", "d1.csv", "d2.csv", "ood0.csv", "ground_truth.json"] {
        let lhs = std::fs::read(a.join(file)).expect(file);
        let rhs = std::fs::read(b.join(file)).expect(file);
        assert_eq!(lhs, rhs, "{file} differs between identical runs");
    }
    let truth: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("ground_truth.json")).unwrap())
            .unwrap();
    assert!(truth["scales"]["d0"].is_f64());
    assert!(truth["config"]["seed"].is_u64());
}

#[test]
fn synth_supports_mixed_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_synth(tmp.path(), &["--embedding", "mixed", "--extra-dims", "2"]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(Path::new(&data).join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["embedding_dim"], serde_json::json!(6));
}

#[test]
fn fit_writes_each_model_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_synth(tmp.path(), &[]);
    for (method, extra) in [
        ("mdts", vec!["--regressor", "ols"]),
        ("ts", vec![]),
        ("histbin", vec![]),
        ("isotonic", vec![]),
    ] {
        let model = tmp.path().join(format!("{method}.json"));
        let mut args = vec!["fit", "--data", &data, "--model", path_str(&model), "--method", method];
        args.extend_from_slice(&extra);
        let out = run(&args);
        assert_code(&out, 0);
        let body = std::fs::read_to_string(&model).unwrap();
        assert!(
            body.contains(&format!("\"type\": \"{method}\"")),
            "{method} model is tagged: {body}"
        );
        if method == "mdts" {
            let stdout = String::from_utf8_lossy(&out.stdout);
            for id in ["d0", "d1", "d2"] {
                assert!(stdout.contains(&format!("{id}\tT=")), "prints {id}: {stdout}");
            }
        }
    }
}

#[test]
fn eval_writes_reports_and_reliability_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_synth(tmp.path(), &[]);
    let model = tmp.path().join("m.json");
    assert_code(
        &run(&["fit", "--data", &data, "--model", path_str(&model), "--method", "mdts"]),
        0,
    );
    let rep = tmp.path().join("rep");
    let out = run(&[
        "eval",
        "--data",
        &data,
        "--model",
        path_str(&model),
        "--out",
        path_str(&rep),
        "--reliability",
        "d1",
    ]);
    assert_code(&out, 0);
    let ind: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(rep.join("report_ind.json")).unwrap())
            .unwrap();
    assert!(ind["mdece"].is_f64());
    assert_eq!(ind["per_domain"].as_array().unwrap().len(), 3);
    let ood: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(rep.join("report_ood.json")).unwrap())
            .unwrap();
    assert_eq!(ood["per_domain"].as_array().unwrap().len(), 1);
    for csv in ["reliability_ind_pooled.csv", "reliability_ood_pooled.csv", "reliability_d1.csv"] {
        let body = std::fs::read_to_string(rep.join(csv)).expect(csv);
        assert!(body.starts_with("bin,lo,hi,count,accuracy,confidence\n"), "{csv}: {body}");
    }
    // Unknown reliability domain is a validation error.
    let bad = run(&[
        "eval", "--data", &data, "--model", path_str(&model), "--out", path_str(&rep),
        "--reliability", "nope",
    ]);
    assert_code(&bad, 1);
}

#[test]
fn eval_rejects_model_dataset_dimension_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_synth(tmp.path(), &[]);
    let other = tmp.path().join("other");
    assert_code(
        &run(&[
            "synth", "--out", path_str(&other), "--domains", "3", "--per-domain", "60",
            "--classes", "5", "--seed", "5",
        ]),
        0,
    );
    let model = tmp.path().join("m.json");
    assert_code(
        &run(&["fit", "--data", &data, "--model", path_str(&model), "--method", "mdts"]),
        0,
    );
    let out = run(&[
        "eval",
        "--data",
        path_str(&other),
        "--model",
        path_str(&model),
        "--out",
        path_str(&tmp.path().join("rep")),
    ]);
    assert_code(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("classes"), "explains the mismatch: {stderr}");
}

#[test]
fn ablate_covers_every_regressor_and_matches_fit_plus_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_synth(tmp.path(), &[]);
    let abl = tmp.path().join("abl");
    assert_code(&run(&["ablate", "--data", &data, "--out", path_str(&abl)]), 0);
    let csv = std::fs::read_to_string(abl.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "regressor,ind_mdece,ood_mdece");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["ols", "ridge", "huber", "krr", "knn"]);

    // The OLS row equals a standalone grid-searched fit + eval, bit for bit.
    let model = tmp.path().join("ols.json");
    assert_code(
        &run(&[
            "fit", "--data", &data, "--model", path_str(&model), "--method", "mdts",
            "--regressor", "ols", "--grid-search",
        ]),
        0,
    );
    let rep = tmp.path().join("rep");
    assert_code(
        &run(&["eval", "--data", &data, "--model", path_str(&model), "--out", path_str(&rep)]),
        0,
    );
    let ind: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(rep.join("report_ind.json")).unwrap())
            .unwrap();
    let ood: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(rep.join("report_ood.json")).unwrap())
            .unwrap();
    let cells: Vec<&str> = lines[1].split(',').collect();
    let table_ind: f64 = cells[1].parse().unwrap();
    let table_ood: f64 = cells[2].parse().unwrap();
    assert_eq!(table_ind.to_bits(), ind["mdece"].as_f64().unwrap().to_bits());
    assert_eq!(table_ood.to_bits(), ood["mdece"].as_f64().unwrap().to_bits());
}

#[test]
fn predict_acc_tabulates_all_three_methods() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_synth(tmp.path(), &[]);
    let model = tmp.path().join("m.json");
    assert_code(
        &run(&["fit", "--data", &data, "--model", path_str(&model), "--method", "mdts"]),
        0,
    );
    let acc = tmp.path().join("acc");
    let out = run(&[
        "predict-acc", "--data", &data, "--model", path_str(&model), "--out", path_str(&acc),
    ]);
    assert_code(&out, 0);
    let csv = std::fs::read_to_string(acc.join("accuracy_prediction.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "split,domain,n,accuracy,msp_conf,ts_conf,mdts_conf");
    assert_eq!(lines.len(), 1 + 3 + 1, "one row per evaluation domain");
    assert!(lines[1].starts_with("ind,d0,40,"), "eval half of n=80: {}", lines[1]);
    assert!(lines[4].starts_with("ood,ood0,80,"), "full held-out domain: {}", lines[4]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for line in ["ind\tmsp\tmae=", "ind\tts\tmae=", "ind\tmdts\tmae=", "ood\tmdts\tmae="] {
        assert!(stdout.contains(line), "missing {line:?} in {stdout}");
    }

    // A single-temperature model has no per-sample map to compare.
    let ts_model = tmp.path().join("ts.json");
    assert_code(
        &run(&["fit", "--data", &data, "--model", path_str(&ts_model), "--method", "ts"]),
        0,
    );
    let bad = run(&[
        "predict-acc", "--data", &data, "--model", path_str(&ts_model), "--out", path_str(&acc),
    ]);
    assert_code(&bad, 1);
}

#[test]
fn bound_check_holds_on_matched_domains() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_synth(tmp.path(), &[]);
    let model = tmp.path().join("m.json");
    assert_code(
        &run(&["fit", "--data", &data, "--model", path_str(&model), "--method", "mdts"]),
        0,
    );
    let bnd = tmp.path().join("bnd");
    let out = run(&[
        "bound-check", "--data", &data, "--model", path_str(&model), "--out", path_str(&bnd),
    ]);
    assert_code(&out, 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(bnd.join("bound_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["holds"], serde_json::json!(true));
    assert_eq!(report["alpha"].as_array().unwrap().len(), 3);
    assert!(report["lhs"].as_f64().unwrap() <= report["rhs"].as_f64().unwrap());

    // Negative slack is a validation error, not a failed bound.
    let neg = run(&[
        "bound-check", "--data", &data, "--model", path_str(&model), "--out", path_str(&bnd),
        "--slack=-0.1",
    ]);
    assert_code(&neg, 1);
}

#[test]
fn bound_check_rejects_too_many_source_domains() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_code(
        &run(&[
            "synth", "--out", path_str(&data), "--domains", "5", "--ood-domains", "1",
            "--per-domain", "40", "--classes", "3", "--seed", "2",
        ]),
        0,
    );
    let model = tmp.path().join("m.json");
    assert_code(
        &run(&["fit", "--data", path_str(&data), "--model", path_str(&model), "--method", "mdts"]),
        0,
    );
    let out = run(&[
        "bound-check", "--data", path_str(&data), "--model", path_str(&model), "--out",
        path_str(&tmp.path().join("bnd")),
    ]);
    assert_code(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("5"), "names the domain count: {stderr}");
}

/// Deterministic spread-out logits for hand-built domains.
fn wavy_logits(i: usize, offset: f64) -> [f64; 3] {
    let x = i as f64 + offset;
    [2.0 * (1.3 * x + 0.2).sin(), 2.0 * (2.1 * x + 1.1).sin(), 2.0 * (3.7 * x + 2.3).sin()]
}

/// A domain whose presented logits equal the base logits (true temperature
/// 1) with every embedding fixed to `emb`, plus exact oracle confidences.
fn unit_domain(id: &str, split: Split, emb: f64, offset: f64, n: usize) -> DomainDataset {
    let mut labels = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(3 * n);
    let mut embeddings = Vec::with_capacity(n);
    let mut oracle = Vec::with_capacity(n);
    for i in 0..n {
        let z = wavy_logits(i, offset);
        // Low-discrepancy label draw from the softmax over z.
        let u = (i as f64 * 0.618_033_988_749_895).fract();
        let probs = prob::softmax_t(&z, 1.0).unwrap();
        let mut cdf = 0.0;
        let mut label = probs.len() - 1;
        for (j, p) in probs.iter().enumerate() {
            cdf += p;
            if u < cdf {
                label = j;
                break;
            }
        }
        labels.push(label);
        logits.extend_from_slice(&z);
        embeddings.push(emb);
        oracle.push(prob::confidence(&z, 1.0).unwrap());
    }
    DomainDataset::new(id, split, 3, 1, labels, logits, embeddings, Some(oracle)).unwrap()
}

#[test]
fn bound_check_exits_two_when_bound_fails() {
    // Sources and target share one logit distribution (so the divergence
    // and lambda terms stay small) but the target's embeddings are far
    // outside the training range, so the fitted per-sample map extrapolates
    // to a huge temperature and its held-out risk blows past the bound.
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let domains = MultiDomainDataset::new(vec![
        unit_domain("d0", Split::Ind, 1.0, 0.0, 300),
        unit_domain("d1", Split::Ind, 1.0, 0.5, 300),
        unit_domain("far", Split::Ood, 40.0, 0.0, 300),
    ])
    .unwrap();
    domains.save(&data).unwrap();
    let model = tmp.path().join("m.json");
    assert_code(
        &run(&["fit", "--data", path_str(&data), "--model", path_str(&model), "--method", "mdts"]),
        0,
    );
    let bnd = tmp.path().join("bnd");
    let out = run(&[
        "bound-check", "--data", path_str(&data), "--model", path_str(&model), "--out",
        path_str(&bnd), "--slack", "0",
    ]);
    assert_code(&out, 2);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(bnd.join("bound_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["holds"], serde_json::json!(false));
    assert!(report["lhs"].as_f64().unwrap() > report["rhs"].as_f64().unwrap());
}

#[test]
fn commands_do_not_mutate_the_dataset_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_synth(tmp.path(), &[]);
    let snapshot = |dir: &str| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files
            .into_iter()
            .map(|p| (p.display().to_string(), std::fs::read(&p).unwrap()))
            .collect()
    };
    let before = snapshot(&data);
    let model = tmp.path().join("m.json");
    assert_code(
        &run(&["fit", "--data", &data, "--model", path_str(&model), "--method", "mdts"]),
        0,
    );
    assert_code(
        &run(&[
            "eval", "--data", &data, "--model", path_str(&model), "--out",
            path_str(&tmp.path().join("rep")),
        ]),
        0,
    );
    assert_code(
        &run(&["ablate", "--data", &data, "--out", path_str(&tmp.path().join("abl"))]),
        0,
    );
    assert_eq!(before, snapshot(&data));
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    // Usage errors.
    assert_code(&run(&["fit", "--data", "d", "--model", "m", "--method", "mdts", "--regressor", "cubist"]), 1);
    assert_code(&run(&["no-such-command"]), 1);
    assert_code(&run(&[]), 1);
    // Validation errors.
    assert_code(&run(&["synth", "--out", path_str(&tmp.path().join("x")), "--domains", "0"]), 1);
    // I/O failures.
    let missing = tmp.path().join("missing");
    assert_code(
        &run(&[
            "eval", "--data", path_str(&missing), "--model", "m.json", "--out",
            path_str(&tmp.path().join("rep")),
        ]),
        3,
    );
    // Help and version are successes.
    assert_code(&run(&["--help"]), 0);
    assert_code(&run(&["--version"]), 0);
    assert_code(&run(&["synth", "--help"]), 0);
}
