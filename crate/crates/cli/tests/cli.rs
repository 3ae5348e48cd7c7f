use std::process::{Command, Output};

fn gcvk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcvk"))
        .args(args)
        .env("GCVK_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn line_value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("no {key:?} line in:\n{text}"))
        .trim()
}

#[test]
fn summary_tiny_reports_about_28m_params() {
    let o = gcvk(&["summary", "--variant", "tiny", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let params = doc["report"]["total_params"].as_f64().unwrap();
    assert!((params / 28.0e6 - 1.0).abs() <= 0.10, "{params}");
    let stage3 = &doc["report"]["stages"][2];
    assert_eq!(stage3["local_blocks"], 10);
    assert_eq!(stage3["global_blocks"], 9);
}

#[test]
fn summary_xxt_lists_twelve_blocks() {
    let o = gcvk(&["summary", "--variant", "xxt"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(line_value(&text, "blocks"), "12");
    let depths: Vec<usize> = text
        .lines()
        .filter(|l| l.split_whitespace().next().is_some_and(|s| s.parse::<usize>().is_ok()))
        .map(|l| l.split_whitespace().nth(4).unwrap().parse().unwrap())
        .collect();
    assert_eq!(depths, vec![2, 2, 6, 2]);
}

#[test]
fn summary_is_byte_identical_across_runs() {
    let a = gcvk(&["summary", "--variant", "small", "--json"]);
    let b = gcvk(&["summary", "--variant", "small", "--json"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn config_errors_and_usage_errors_have_distinct_codes() {
    let dir = std::env::temp_dir().join(format!("gcvk-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let bad = dir.join("zero_depth.json");
    std::fs::write(&bad, r#"{"variant": "toy", "depths": [0, 2, 2, 2]}"#).unwrap();
    let o = gcvk(&["summary", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("depths[0]"));

    let unknown = dir.join("unknown_key.json");
    std::fs::write(&unknown, r#"{"variant": "toy", "dropout": 0.1}"#).unwrap();
    assert_eq!(
        gcvk(&["summary", "--config", unknown.to_str().unwrap()]).status.code(),
        Some(2)
    );

    let o = gcvk(&["summary", "--variant", "huge"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("xxt, xt, tiny, small, base"));
    assert_eq!(gcvk(&["summary", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(
        gcvk(&["bench", "--variant", "xxt", "--size", "100"]).status.code(),
        Some(2)
    );
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn gradcheck_single_block_and_fault_injection() {
    let o = gcvk(&["gradcheck", "--block", "global_attention"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("global_attention") && text.contains("PASS"));

    let o = gcvk(&["gradcheck", "--block", "mlp", "--inject-fault", "mlp"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("mlp"));
    assert_eq!(gcvk(&["gradcheck", "--block", "nope"]).status.code(), Some(1));
}

#[test]
fn bench_reports_six_numbers_deterministically() {
    let run = |batch: &str| {
        let o = gcvk(&["bench", "--variant", "xxt", "--size", "64", "--batch", batch, "--json"]);
        assert!(o.status.success(), "{}", stderr(&o));
        serde_json::from_str::<serde_json::Value>(&stdout(&o)).unwrap()
    };
    let a = run("1");
    for key in [
        "median_s",
        "p95_s",
        "measured_flops",
        "analytic_flops",
        "flops_per_s",
        "checksum",
    ] {
        assert!(!a[key].is_null(), "{key}");
    }
    assert_eq!(a["measured_flops"], a["analytic_flops"]);
    let b = run("1");
    assert_eq!(a["checksum"], b["checksum"]);
    let two = run("2");
    assert_eq!(
        two["analytic_flops"].as_u64().unwrap(),
        2 * a["analytic_flops"].as_u64().unwrap()
    );
}

#[test]
fn train_toy_decreases_loss() {
    for variant in ["toy", "toy-hybrid"] {
        let o = gcvk(&["train-toy", "--variant", variant, "--steps", "20"]);
        assert!(o.status.success(), "{variant}: {}", stderr(&o));
        let text = stdout(&o);
        let loss = |key| {
            line_value(&text, key)
                .split_whitespace()
                .nth(1)
                .unwrap()
                .parse::<f64>()
                .unwrap()
        };
        assert!(loss("final") < loss("initial"), "{variant}");
    }
}

#[test]
fn train_toy_with_zero_lr_fails_the_decrease_check() {
    let o = gcvk(&["train-toy", "--steps", "2", "--lr", "0"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn export_import_round_trip() {
    let dir = std::env::temp_dir().join(format!("gcvk-io-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("toy.gcvk");
    let p = path.to_str().unwrap();
    let e = gcvk(&["export", "--variant", "toy", "--seed", "3", "--out", p]);
    assert!(e.status.success(), "{}", stderr(&e));
    let i = gcvk(&["import", "--variant", "toy", "--seed", "3", p]);
    assert!(i.status.success(), "{}", stderr(&i));
    assert_eq!(line_value(&stdout(&e), "checksum"), line_value(&stdout(&i), "checksum"));

    let o = gcvk(&["import", "--variant", "toy-hybrid", p]);
    assert_eq!(o.status.code(), Some(2));
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let o = gcvk(&["import", "--variant", "toy", p]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("truncated"));
    std::fs::remove_dir_all(dir).unwrap();
}
