//! End-to-end checks of the oslab binary: artifact layout, error surfaces,
//! and the numbers inside the emitted files.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use openset_core::eval::{
    parse_detections_json, parse_gt_json, parse_registry_json, ClassRegistry, EvalOptions,
};
use openset_oracle::metrics;
use sha2::{Digest, Sha256};

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn oslab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_oslab"))
}

fn fixture(rel: &str) -> String {
    format!("{}/tests/fixtures/{rel}", env!("CARGO_MANIFEST_DIR"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(!out.status.success(), "command unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Reads a metric,value CSV into a map, skipping the header.
fn read_metrics(path: &Path) -> BTreeMap<String, f64> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("metric,value"));
    lines
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect()
}

const FAST_CONFIG: &str = "total_iterations=300\nwarmup_iterations=50\nlearning_rate=0.05\n\
    batch_size=8\neval_known_per_class=10\neval_unknown_per_cluster=10\nseed=7\n\
    world.num_known=3\nworld.num_unknown_clusters=2\nworld.feature_dim=6\n\
    model.hidden_dim=8\nmodel.embedding_dim=4\nbank.capacity=16\nbank.sample=4\n\
    upl.beta=1.0\nic.gamma0=0.1\nmining.k=2\n";

#[test]
fn train_writes_a_complete_checksummed_artifact_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fast.conf");
    std::fs::write(&cfg, FAST_CONFIG).unwrap();
    let out_dir = dir.path().join("run");
    let out = run_ok(oslab().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out_dir));
    assert!(String::from_utf8_lossy(&out.stdout).contains("wilderness impact"));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["resolved_config"], "resolved.conf");
    let artifacts = manifest["artifacts"].as_object().unwrap();
    for name in [
        "resolved.conf",
        "telemetry.csv",
        "report.csv",
        "report.txt",
        "latent.csv",
        "bank.snapshot",
        "checkpoint.bin",
    ] {
        let recorded = artifacts[name].as_str().unwrap();
        let bytes = std::fs::read(out_dir.join(name)).unwrap();
        assert_eq!(recorded, sha256_hex(&bytes), "checksum mismatch for {name}");
    }

    // The telemetry covers every iteration, and gamma decays linearly.
    let telemetry = std::fs::read_to_string(out_dir.join("telemetry.csv")).unwrap();
    assert_eq!(telemetry.lines().count(), 301);
    assert_eq!(
        telemetry.lines().next(),
        Some("iteration,loss_ce,loss_up,loss_ic,gamma_t")
    );
}

#[test]
fn train_resolves_a_reparseable_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fast.conf");
    std::fs::write(&cfg, FAST_CONFIG).unwrap();
    let out_dir = dir.path().join("run");
    run_ok(
        oslab()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--seed", "21"])
            .arg("--out")
            .arg(&out_dir),
    );
    let resolved = std::fs::read_to_string(out_dir.join("resolved.conf")).unwrap();
    let parsed = openset_core::config::parse(&resolved).unwrap();
    assert_eq!(parsed.trainer.seed, 21);
    assert_eq!(parsed.world.seed, 21);
    assert_eq!(parsed.trainer.model.trunk_dim, 6);
}

#[test]
fn train_names_the_offending_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, format!("{FAST_CONFIG}world.bogus=1\n")).unwrap();
    let stderr = run_err(oslab().args(["train", "--config"]).arg(&cfg));
    assert!(stderr.contains("world.bogus"), "stderr: {stderr}");
}

#[test]
fn eval_report_matches_the_reference_evaluator() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("eval");
    run_ok(
        oslab()
            .arg("eval")
            .arg(fixture("eval/gt.json"))
            .arg(fixture("eval/dets.json"))
            .arg(fixture("eval/registry.json"))
            .arg("--out")
            .arg(&out_dir),
    );
    let metrics_csv = read_metrics(&out_dir.join("report.csv"));

    let gt = parse_gt_json(&std::fs::read_to_string(fixture("eval/gt.json")).unwrap()).unwrap();
    let dets =
        parse_detections_json(&std::fs::read_to_string(fixture("eval/dets.json")).unwrap())
            .unwrap();
    let registry =
        parse_registry_json(&std::fs::read_to_string(fixture("eval/registry.json")).unwrap())
            .unwrap();
    let slow = metrics::report(
        &dets.detections().unwrap(),
        &gt.ground_truths().unwrap(),
        &registry,
        &EvalOptions::default(),
    );

    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    assert!(close(metrics_csv["wilderness_impact"], slow.wi));
    assert_eq!(metrics_csv["wi_recall_met"], f64::from(u8::from(slow.wi_recall_met)));
    assert_eq!(metrics_csv["tp_known"], slow.tp_k as f64);
    assert_eq!(metrics_csv["fp_unknown"], slow.fp_u as f64);
    assert_eq!(metrics_csv["fp_known"], slow.fp_k as f64);
    assert_eq!(metrics_csv["aose"], slow.aose as f64);
    assert!(close(metrics_csv["map_known"], 100.0 * slow.map_k));
    assert!(close(metrics_csv["ap_unknown"], 100.0 * slow.ap_unknown));
    for (cat, ap) in &slow.per_class_ap {
        assert!(close(metrics_csv[&format!("ap_class_{cat}")], 100.0 * ap));
    }
    // The fixture was laid out by hand: one unknown box claimed as a known
    // class, and a known class with AP 5/6.
    assert_eq!(metrics_csv["aose"], 1.0);
    assert!(close(metrics_csv["ap_class_1"], 100.0 * 5.0 / 6.0));
}

#[test]
fn eval_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        fixture("eval/gt.json"),
        fixture("eval/dets.json"),
        fixture("eval/registry.json"),
    ];
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        run_ok(oslab().arg("eval").args(&args).arg("--out").arg(out));
    }
    for name in ["report.csv", "report.txt"] {
        assert_eq!(
            std::fs::read(out_a.join(name)).unwrap(),
            std::fs::read(out_b.join(name)).unwrap()
        );
    }
}

#[test]
fn eval_of_an_empty_detection_file_reports_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let dets = dir.path().join("none.json");
    std::fs::write(&dets, "{ \"detections\": [] }\n").unwrap();
    let out_dir = dir.path().join("eval");
    run_ok(
        oslab()
            .arg("eval")
            .arg(fixture("eval/gt.json"))
            .arg(&dets)
            .arg(fixture("eval/registry.json"))
            .arg("--out")
            .arg(&out_dir),
    );
    let metrics_csv = read_metrics(&out_dir.join("report.csv"));
    assert_eq!(metrics_csv["aose"], 0.0);
    assert_eq!(metrics_csv["map_known"], 0.0);
    assert_eq!(metrics_csv["ap_unknown"], 0.0);
    assert_eq!(metrics_csv["wilderness_impact"], 0.0);
}

#[test]
fn eval_of_perfect_detections_reports_full_marks() {
    let gt = parse_gt_json(&std::fs::read_to_string(fixture("eval/gt.json")).unwrap()).unwrap();
    let detections: Vec<String> = gt
        .annotations
        .iter()
        .map(|a| {
            format!(
                "{{ \"image_id\": {}, \"category_id\": {}, \"score\": 0.95, \"bbox\": [{}, {}, {}, {}] }}",
                a.image_id, a.category_id, a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]
            )
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let dets = dir.path().join("perfect.json");
    std::fs::write(
        &dets,
        format!("{{ \"detections\": [{}] }}\n", detections.join(", ")),
    )
    .unwrap();
    let out_dir = dir.path().join("eval");
    run_ok(
        oslab()
            .arg("eval")
            .arg(fixture("eval/gt.json"))
            .arg(&dets)
            .arg(fixture("eval/registry.json"))
            .arg("--out")
            .arg(&out_dir),
    );
    let metrics_csv = read_metrics(&out_dir.join("report.csv"));
    assert_eq!(metrics_csv["map_known"], 100.0);
    assert_eq!(metrics_csv["ap_unknown"], 100.0);
    assert_eq!(metrics_csv["aose"], 0.0);
}

#[test]
fn eval_rejects_detections_of_unregistered_categories() {
    let dir = tempfile::tempdir().unwrap();
    let dets = dir.path().join("alien.json");
    std::fs::write(
        &dets,
        "{ \"detections\": [ { \"image_id\": 0, \"category_id\": 42, \"score\": 0.5, \"bbox\": [0, 0, 1, 1] } ] }\n",
    )
    .unwrap();
    let stderr = run_err(
        oslab()
            .arg("eval")
            .arg(fixture("eval/gt.json"))
            .arg(&dets)
            .arg(fixture("eval/registry.json")),
    );
    assert!(stderr.contains("42"), "stderr: {stderr}");
}

#[test]
fn gradcheck_writes_its_table_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("gc");
    let out = run_ok(
        oslab()
            .args(["gradcheck", "--trials", "40", "--out"])
            .arg(&out_dir),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("verdict"));
    assert!(stdout.contains("ok"));
    assert!(!stdout.contains("FAIL"));
    let csv = std::fs::read_to_string(out_dir.join("gradcheck.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r.ends_with(",1")));
}

#[test]
fn gradcheck_with_zero_trials_prints_only_the_header() {
    let out = run_ok(oslab().args(["gradcheck", "--trials", "0"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.contains("check"));
}

#[test]
fn plot_weighting_curves_shapes_match_the_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("plots");
    run_ok(
        oslab()
            .args(["plot", "--kind", "weighting_curves", "--out"])
            .arg(&out_dir),
    );
    let csv = std::fs::read_to_string(out_dir.join("weighting_curves.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some(
            "p,identity,entropy_of_gt,normalized_entropy,polynomial_a0.5,polynomial_a1,polynomial_a2,polynomial_a3"
        )
    );
    // At p = 0.5 the alpha=1 polynomial sits at its peak value 1/4.
    let half = lines.find(|l| l.starts_with("0.5,")).unwrap();
    let cells: Vec<f64> = half.split(',').map(|c| c.parse().unwrap()).collect();
    assert_eq!(cells[1], 1.0);
    assert_eq!(cells[5], 0.25);
    assert!((cells[3] - 1.0).abs() < 1e-12);
    let svg = std::fs::read_to_string(out_dir.join("weighting_curves.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains("polyline"));
}

#[test]
fn plot_latent_scatter_separates_known_and_unknown_markers() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("latent.csv");
    std::fs::write(
        &input,
        "label,known,e0,e1,e2\n0,1,1.0,0.0,0.0\n0,1,0.9,0.1,0.0\n3,0,0.0,0.0,1.0\n",
    )
    .unwrap();
    let out_dir = dir.path().join("plots");
    run_ok(
        oslab()
            .args(["plot", "--kind", "latent_scatter"])
            .arg(&input)
            .arg("--out")
            .arg(&out_dir),
    );
    let csv = std::fs::read_to_string(out_dir.join("latent_scatter.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(csv.lines().next(), Some("label,known,x,y"));
    let svg = std::fs::read_to_string(out_dir.join("latent_scatter.svg")).unwrap();
    assert_eq!(svg.matches("class=\"pt\"").count(), 3);
    assert_eq!(svg.matches("fill=\"none\"").count(), 1);
}

#[test]
fn plot_pr_curve_integrates_to_the_expected_ap() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("plots");
    run_ok(
        oslab()
            .args(["plot", "--kind", "pr_curve"])
            .arg(fixture("plot/pr_input.csv"))
            .args(["--gt-count", "2", "--out"])
            .arg(&out_dir),
    );
    let csv = std::fs::read_to_string(out_dir.join("pr_curve.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    // All-point interpolation over the emitted (recall, precision) pairs.
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for row in &rows {
        let recall = row[2];
        if recall > prev_recall {
            let envelope = rows
                .iter()
                .filter(|r| r[2] >= recall)
                .map(|r| r[3])
                .fold(0.0, f64::max);
            ap += (recall - prev_recall) * envelope;
            prev_recall = recall;
        }
    }
    assert!((ap - 5.0 / 6.0).abs() < 1e-12, "ap was {ap}");
}

#[test]
fn plot_demands_exactly_one_input() {
    let stderr = run_err(oslab().args(["plot", "--kind", "pr_curve", "--gt-count", "2"]));
    assert!(stderr.contains("needs an input file"), "stderr: {stderr}");
    let stderr = run_err(
        oslab()
            .args(["plot", "--kind", "latent_scatter"])
            .arg(fixture("plot/pr_input.csv"))
            .arg(fixture("plot/pr_input.csv")),
    );
    assert!(stderr.contains("one input file"), "stderr: {stderr}");
}

#[test]
fn plot_reports_missing_input_files_by_path() {
    let stderr = run_err(
        oslab()
            .args(["plot", "--kind", "latent_scatter", "no_such_file.csv"]),
    );
    assert!(stderr.contains("no_such_file.csv"), "stderr: {stderr}");
}

#[test]
fn split_builds_the_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("split");
    let out = run_ok(
        oslab()
            .arg("split")
            .arg(fixture("split/t2_ratio_spec.json"))
            .arg(fixture("split/source_a.json"))
            .arg(fixture("split/source_b.json"))
            .arg("--out")
            .arg(&out_dir),
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("realized wilderness ratio"));

    let manifest =
        parse_gt_json(&std::fs::read_to_string(out_dir.join("split.json")).unwrap()).unwrap();
    let registry =
        parse_registry_json(&std::fs::read_to_string(out_dir.join("registry.json")).unwrap())
            .unwrap();
    assert_eq!(registry.known(), [1, 2]);
    assert_eq!(registry.unknown_id(), 9);
    check_disjoint_manifest(&manifest, &registry);

    let summary = read_metrics(&out_dir.join("split_summary.csv"));
    assert_eq!(summary["open_images_selected"], 3.0);
    assert_eq!(summary["known_images_selected"], 3.0);
    assert_eq!(summary["realized_wilderness_ratio"], 1.0);
}

/// In a disjoint split no open image may carry a close-set annotation.
fn check_disjoint_manifest(manifest: &openset_core::eval::GtFile, registry: &ClassRegistry) {
    for img in &manifest.images {
        let cats: Vec<i64> = manifest
            .annotations
            .iter()
            .filter(|a| a.image_id == img.id)
            .map(|a| a.category_id)
            .collect();
        let has_unknown = cats.iter().any(|&c| c == registry.unknown_id());
        let has_known = cats.iter().any(|&c| registry.is_known(c));
        assert!(!(has_unknown && has_known), "image {} mixes pools", img.id);
    }
}

#[test]
fn split_reports_an_eligible_image_shortfall() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("greedy.json");
    std::fs::write(
        &spec,
        "{ \"mode\": \"disjoint\", \"close_set\": [\"cat\", \"dog\"],\n\
         \"open_set_groups\": [[\"eagle\", \"shark\"]],\n\
         \"known_images\": 0, \"open_images\": 5, \"seed\": 1 }\n",
    )
    .unwrap();
    let stderr = run_err(
        oslab()
            .arg("split")
            .arg(&spec)
            .arg(fixture("split/source_a.json"))
            .arg(fixture("split/source_b.json")),
    );
    assert!(
        stderr.contains("requested 5 open images, only 3 eligible"),
        "stderr: {stderr}"
    );
}
