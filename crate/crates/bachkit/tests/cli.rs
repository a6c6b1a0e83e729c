use std::fs;
use std::path::{Path, PathBuf};

use bachkit::cli::{self, Cli};
use clap::Parser;

const SMALL: &str = "planted = true\nseed = 3\n\n[model]\nsteps = 12\n\n[steps]\ntau_mask = 2\ntau_match = 2\ntau_inject = 4\n";

fn bachkit(args: &[&str]) -> anyhow::Result<String> {
    let cli = Cli::try_parse_from(std::iter::once("bachkit").chain(args.iter().copied()))?;
    let mut out = Vec::new();
    cli::run(cli, &mut out)?;
    Ok(String::from_utf8(out)?)
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn split_run_matches_group_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (id, frame, group) = (
        tmp.path().join("id"),
        tmp.path().join("frame"),
        tmp.path().join("group"),
    );

    let msg = bachkit(&["--config", s(&cfg), "gen-identity", "--out", s(&id)]).unwrap();
    assert!(msg.starts_with("identity:"), "{msg}");
    let msg = bachkit(&["gen-frame", "--identity", s(&id), "--out", s(&frame)]).unwrap();
    assert!(msg.starts_with("frame 0:"), "{msg}");
    bachkit(&[
        "--config",
        s(&cfg),
        "run-group",
        "--frames",
        "1",
        "--out",
        s(&group),
    ])
    .unwrap();

    for name in [
        "frame0.bvtr",
        "frame0_match.csv",
        "frame0_injections.csv",
        "frame0_mask.csv",
    ] {
        assert_eq!(
            fs::read(frame.join(name)).unwrap(),
            fs::read(group.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn report_rebuilds_saved_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("group");
    let printed = bachkit(&[
        "--config",
        s(&cfg),
        "--ablate",
        "run-group",
        "--frames",
        "2",
        "--out",
        s(&out),
    ])
    .unwrap();
    let saved = fs::read_to_string(out.join("report.txt")).unwrap();
    assert_eq!(printed, saved);
    assert_eq!(bachkit(&["report", s(&out)]).unwrap(), saved);
    assert!(out.join("frame1_vanilla.bvtr").exists());

    let dump = bachkit(&["dump-trace", s(&out.join("frame1.bvtr"))]).unwrap();
    assert!(dump.starts_with("step  layer  field"));
    assert!(dump.contains("latent"), "{dump}");
}

#[test]
fn select_commands_on_reference_grids() {
    let mask = bachkit(&[
        "--profile",
        "paper42",
        "select",
        "mask-layers",
        &fixture("paper42_mask_iou.csv"),
    ])
    .unwrap();
    assert_eq!(
        mask,
        "[layers]\nmask = [5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19]\n"
    );
    let matching = bachkit(&[
        "--profile",
        "paper42",
        "select",
        "match-layers",
        &fixture("paper42_match_mse.csv"),
    ])
    .unwrap();
    assert_eq!(
        matching,
        "[layers]\nmatch = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15]\n"
    );

    let tau = bachkit(&[
        "--profile",
        "paper42",
        "select",
        "tau",
        &fixture("paper42_mask_iou.csv"),
        "--layers",
        "5,6,7,8,9,10,11,12,13,14,15,16,17,18,19",
    ])
    .unwrap();
    assert_eq!(tau, "[steps]\ntau_mask = 10\n");
    let tau = bachkit(&[
        "--profile",
        "paper42",
        "select",
        "tau",
        &fixture("paper42_match_mse.csv"),
    ])
    .unwrap();
    assert!(tau.starts_with("[steps]\ntau_match = "), "{tau}");

    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("kv.toml");
    let kv = bachkit(&[
        "--profile",
        "paper42",
        "select",
        "vital",
        &fixture("paper42_layer_report.csv"),
        "--out",
        s(&out),
    ])
    .unwrap();
    assert_eq!(
        kv,
        "[layers]\nkv = [0, 1, 11, 12, 13, 14, 15, 17, 19, 20, 21, 23, 29, 34, 41]\n"
    );
    assert_eq!(fs::read_to_string(out).unwrap(), kv);

    let err = bachkit(&[
        "select",
        "tau",
        &fixture("paper42_mask_iou.csv"),
        "--layers",
        "99",
    ])
    .unwrap_err();
    assert!(err.to_string().contains("outside"), "{err}");
}

#[test]
fn vital_analysis_finds_planted_layers() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("vital.toml");
    fs::write(&cfg, "[model]\nsteps = 8\n\n[steps]\ntau_mask = 2\ntau_match = 2\ntau_inject = 3\n\n[run]\nscorer = \"planted\"\n").unwrap();
    let report = tmp.path().join("layers.csv");
    let err = bachkit(&["--config", s(&cfg), "analyze", "vital", "--out", s(&report)]).unwrap_err();
    assert!(err.to_string().contains("--planted-layers"), "{err}");

    bachkit(&[
        "--config",
        s(&cfg),
        "analyze",
        "vital",
        "--planted-layers",
        "2,5",
        "--out",
        s(&report),
    ])
    .unwrap();
    let kv = bachkit(&[
        "--config",
        s(&cfg),
        "select",
        "vital",
        s(&report),
        "--k",
        "2",
    ])
    .unwrap();
    assert_eq!(kv, "[layers]\nkv = [2, 5]\n");
}

#[test]
fn config_errors_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[run]\nno_such_key = 1\n").unwrap();
    let out = tmp.path().join("out");
    assert!(bachkit(&["--config", s(&bad), "gen-identity", "--out", s(&out)]).is_err());

    let cfg = small_config(tmp.path());
    let err = bachkit(&[
        "--config",
        s(&cfg),
        "--kv-budget-bytes",
        "1024",
        "gen-identity",
        "--out",
        s(&out),
    ])
    .unwrap_err();
    assert!(format!("{err:#}").contains("budget"), "{err:#}");
    assert!(!out.join("identity.bvtr").exists());

    assert!(bachkit(&[
        "gen-frame",
        "--identity",
        s(&tmp.path().join("missing")),
        "--out",
        s(&out)
    ])
    .is_err());
    assert!(Cli::try_parse_from(["bachkit", "--profile", "huge", "report", "x"]).is_err());
}
