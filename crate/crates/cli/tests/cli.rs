use std::fs;
use std::path::Path;

use evidx_cli::run;

fn evidx(args: &[&str]) -> i32 {
    let mut argv = vec!["evidx"];
    argv.extend_from_slice(args);
    run(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(evidx(&["train", "--strategy", "nope", "--out", "x"]), 2);
    assert_eq!(evidx(&["label", "--bogus"]), 2);
    assert_eq!(evidx(&["frobnicate"]), 2);
    assert_eq!(evidx(&["--help"]), 0);
}

#[test]
fn domain_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(
        evidx(&[
            "label",
            "--data",
            s(&missing),
            "--out",
            s(&dir.path().join("l.json"))
        ]),
        1
    );
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"seeds": [], "train": {"lambda_mc": -1}}"#).unwrap();
    assert_eq!(
        evidx(&[
            "train",
            "--config",
            s(&bad),
            "--out",
            s(&dir.path().join("r"))
        ]),
        1
    );
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    let data = d("data");
    assert_eq!(
        evidx(&[
            "phantom",
            "--out",
            s(&data),
            "--n-nc",
            "30",
            "--n-mci",
            "12",
            "--n-ad",
            "24",
            "--seed",
            "3"
        ]),
        0
    );
    assert!(data.join("manifest.jsonl").exists() && data.join("phantom_spec.json").exists());

    let labels = d("labels.json");
    assert_eq!(
        evidx(&[
            "label",
            "--data",
            s(&data),
            "--atlas",
            s(&data.join("atlas.json")),
            "--out",
            s(&labels)
        ]),
        0
    );
    assert!(labels.exists());
    let thresholds = fs::read_to_string(d("labels.thresholds.csv")).unwrap();
    assert!(thresholds.starts_with("group,region,direction,t_no,t_sev,source"));

    let run_dir = d("run");
    let code = evidx(&[
        "train",
        "--strategy",
        "eat",
        "--lambda",
        "1.0",
        "--data",
        s(&data),
        "--labels",
        s(&labels),
        "--epochs",
        "1",
        "--lr",
        "1e-3",
        "--seed",
        "2",
        "--out",
        s(&run_dir),
    ]);
    assert_eq!(code, 0);
    for f in ["manifest.json", "metrics.json", "model.ckpt"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let before = fs::read(run_dir.join("metrics.json")).unwrap();
    assert_eq!(evidx(&["reproduce", s(&run_dir)]), 0);
    assert_eq!(fs::read(run_dir.join("metrics.json")).unwrap(), before);

    let eval_out = d("eval.json");
    assert_eq!(
        evidx(&[
            "eval",
            "--run",
            s(&run_dir),
            "--split",
            "val",
            "--out",
            s(&eval_out)
        ]),
        0
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&eval_out).unwrap()).unwrap();
    assert!(report["accuracy"].as_f64().is_some());

    let cf = d("cf");
    assert_eq!(
        evidx(&["counterfactual", "--run", s(&run_dir), "--out", s(&cf)]),
        0
    );
    assert_eq!(
        evidx(&[
            "plot",
            "histogram",
            "--input",
            s(&cf.join("histogram.csv")),
            "--out",
            s(&d("h.svg"))
        ]),
        0
    );
    assert!(fs::read_to_string(d("h.svg")).unwrap().starts_with("<svg"));

    let sweep = d("sweep");
    let code = evidx(&[
        "sweep",
        "--data",
        s(&data),
        "--strategies",
        "random,eat",
        "--fractions",
        "0.5,1",
        "--seeds",
        "0",
        "--epochs",
        "1",
        "--lr",
        "1e-3",
        "--out",
        s(&sweep),
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("strategy,fraction,seed,accuracy,auroc\n"));
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(
        evidx(&[
            "plot",
            "sweep",
            "--input",
            s(&sweep.join("sweep.csv")),
            "--out",
            s(&d("s.svg"))
        ]),
        0
    );
    assert!(fs::read_to_string(d("s.svg")).unwrap().contains("polyline"));
}

#[test]
fn tampered_metrics_fail_reproduction() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    assert_eq!(
        evidx(&[
            "phantom",
            "--out",
            s(&data),
            "--n-nc",
            "20",
            "--n-mci",
            "0",
            "--n-ad",
            "16"
        ]),
        0
    );
    assert_eq!(
        evidx(&[
            "train",
            "--strategy",
            "random",
            "--data",
            s(&data),
            "--epochs",
            "1",
            "--out",
            s(&run_dir)
        ]),
        0
    );
    let path = run_dir.join("metrics.json");
    let text =
        fs::read_to_string(&path)
            .unwrap()
            .replacen("\"accuracy\": ", "\"accuracy\": 0.0001 + ", 1);
    fs::write(&path, text).unwrap();
    assert_eq!(evidx(&["reproduce", s(&run_dir)]), 1);
}

#[test]
fn summarize_published_style_table() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("r.csv");
    fs::write(
        &input,
        "method,baseline,variant,accuracy,auroc\n\
         Random,true,a,87.4,0.924\nRandom,true,b,87.5,0.931\nRandom,true,c,86.5,0.945\n\
         EaI,false,a,88.0,0.940\nEaI,false,b,89.9,0.943\nEaI,false,c,89.2,0.949\n",
    )
    .unwrap();
    let out = dir.path().join("summary.csv");
    assert_eq!(
        evidx(&["summarize", "--results", s(&input), "--out", s(&out)]),
        0
    );
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains("Random,true,87.1,0.933,true,true,false,false"));
    assert!(text.contains("EaI,false,89.0,0.944,false,false,true,true"));
}
