use std::path::Path;
use std::process::{Command, Output};

use csi_pls::harness::read_table;
use csi_pls::io::{read_decomposition, read_scene};
use csi_pls::report::Stage;

fn csi_pls(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csi-pls"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_scene(dir: &Path) {
    std::fs::write(
        dir.join("scene-config.json"),
        r#"{"grid": {"x_range": [100, 150], "y_range": [0, 50]}, "channel": {"subcarriers": 8}}"#,
    )
    .unwrap();
    ok(csi_pls(
        &[
            "scene",
            "--config",
            "scene-config.json",
            "--snr",
            "30",
            "--scs",
            "30000",
            "--seed",
            "4",
            "--out",
            "scene.json",
        ],
        dir,
    ));
}

#[test]
fn scene_decompose_corr_dhsic_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_scene(dir);
    let scene = read_scene(&dir.join("scene.json")).unwrap();
    assert_eq!(scene.grid.len(), 36);
    assert_eq!(scene.csi.true_csi.ncols(), 8);
    assert_eq!(scene.channel.scs_hz, 30000.0);

    ok(csi_pls(
        &[
            "decompose",
            "--scene",
            "scene.json",
            "--d-hat",
            "3",
            "--out",
            "dec.json",
            "--variance-csv",
            "var.csv",
        ],
        dir,
    ));
    let dec = read_decomposition(&dir.join("dec.json")).unwrap();
    assert_eq!(dec.d_hat, 3);
    assert_eq!(dec.residual.len(), 36);
    let var = std::fs::read_to_string(dir.join("var.csv")).unwrap();
    assert_eq!(
        var.lines().next().unwrap(),
        "component,eigenvalue,ratio,cumulative"
    );
    assert_eq!(var.lines().count(), 9);

    let summary = ok(csi_pls(
        &[
            "corr",
            "--scene",
            "scene.json",
            "--d-hat",
            "2",
            "--neighbors",
            "4",
            "--pairs-csv",
            "pairs.csv",
        ],
        dir,
    ));
    let mut lines = summary.lines();
    assert_eq!(
        lines.next().unwrap(),
        "snr_db,scs_hz,d_hat,mean_abs_rho,undefined_pairs"
    );
    assert!(lines.next().unwrap().starts_with("30,30000,2,"));
    let pairs = std::fs::read_to_string(dir.join("pairs.csv")).unwrap();
    assert_eq!(
        pairs.lines().next().unwrap(),
        "snr_db,scs_hz,d_hat,n1,n2,rho"
    );
    assert_eq!(pairs.lines().count(), 1 + 36 * 4);

    let observed = ok(csi_pls(
        &["corr", "--scene", "scene.json", "--neighbors", "4"],
        dir,
    ));
    assert!(observed
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("30,30000,observed,"));

    let rows = ok(csi_pls(
        &[
            "dhsic",
            "--scene",
            "scene.json",
            "--d-hat",
            "3",
            "--neighbors",
            "4",
            "--perms",
            "20",
            "--seed",
            "1",
        ],
        dir,
    ));
    assert_eq!(
        rows.lines().next().unwrap(),
        "snr_db,scs_hz,d_hat,test_kind,location_index,statistic,critical_value,alpha,B,reject"
    );
    assert_eq!(rows.lines().count(), 37);
    assert!(rows
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("30,30000,3,neighborhood,0,"));

    ok(csi_pls(
        &[
            "dhsic",
            "--scene",
            "scene.json",
            "--kind",
            "subcarrier",
            "--perms",
            "20",
            "--out",
            "sub.csv",
        ],
        dir,
    ));
    let sub = std::fs::read_to_string(dir.join("sub.csv")).unwrap();
    assert_eq!(sub.lines().count(), 2);
    assert!(sub.lines().nth(1).unwrap().contains(",subcarrier,-1,"));
}

#[test]
fn noiseless_scene_serializes_null_snr() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("c.json"),
        r#"{"grid": {"x_range": [100, 120], "y_range": [0, 0]}}"#,
    )
    .unwrap();
    ok(csi_pls(
        &[
            "scene", "--config", "c.json", "--snr", "inf", "--out", "s.json",
        ],
        tmp.path(),
    ));
    let text = std::fs::read_to_string(tmp.path().join("s.json")).unwrap();
    assert!(text.contains("\"snr_db\": null"));
    let scene = read_scene(&tmp.path().join("s.json")).unwrap();
    assert_eq!(scene.csi.observed_b, scene.csi.true_csi);
}

#[test]
fn errors_are_json_on_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let out = csi_pls(&["corr", "--scene", "missing.json"], tmp.path());
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");
    assert!(err["error"]["message"]
        .as_str()
        .unwrap()
        .contains("missing.json"));

    small_scene(tmp.path());
    let out = csi_pls(
        &[
            "decompose",
            "--scene",
            "scene.json",
            "--d-hat",
            "9",
            "--out",
            "d.json",
        ],
        tmp.path(),
    );
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "argument");

    std::fs::write(tmp.path().join("bad.json"), r#"{"alpha": 2}"#).unwrap();
    let out = csi_pls(&["sweep", "--config", "bad.json", "--out", "o"], tmp.path());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");
}

#[test]
fn sweep_writes_reports_and_seed_matters() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("sweep.json"),
        r#"{"grid": {"x_range": [100, 150], "y_range": [0, 50]}, "channel": {"subcarriers": 8},
            "snr_list": [50], "scs_list": [30000], "d_hat_list": [1, 3], "k_neighbors": 4, "permutations": 20}"#,
    )
    .unwrap();
    for (name, seed) in [("a", "1"), ("b", "2")] {
        ok(csi_pls(
            &[
                "sweep",
                "--config",
                "sweep.json",
                "--out",
                name,
                "--seed",
                seed,
            ],
            dir,
        ));
    }
    let t1 = read_table(&dir.join("a/table1.csv")).unwrap();
    assert_eq!(t1.len(), 3);
    assert_eq!(t1[0].stage, Stage::Observed);
    let fig2 = std::fs::read_to_string(dir.join("a/fig2.csv")).unwrap();
    assert!(fig2.starts_with(
        "snr_db,scs_hz,d_hat,statistic,critical_value,ln_statistic,ln_critical_value"
    ));
    let prov: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("a/provenance.json")).unwrap())
            .unwrap();
    assert_eq!(prov["master_seed"], 1);
    assert_eq!(prov["config_hash"].as_str().unwrap().len(), 64);
    assert_ne!(
        std::fs::read(dir.join("a/table1.csv")).unwrap(),
        std::fs::read(dir.join("b/table1.csv")).unwrap()
    );
}
