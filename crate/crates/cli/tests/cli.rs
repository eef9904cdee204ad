use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

const CONFIG: &str = r#"
task.kind = "majority"
task.classes = 2
task.seq_len = 8
task.examples = 160
task.vocab_size = 24
task.seed = 13

backbone.num_layers = 1
backbone.model_dim = 16
backbone.num_heads = 2
backbone.ffn_dim = 32
backbone.seed = 1

train.epochs = 2
train.batch_size = 16
train.lr = 3e-3
train.seed = 5

adaptation.variant = "adapter"
adaptation.M = __M__
adaptation.r = 4

inference.mode = "merge"
"#;

fn moa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, name: &str, modules: usize) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, CONFIG.replace("__M__", &modules.to_string())).unwrap();
    path
}

/// Trains the small config with `modules` modules into `dir/run`.
fn train(dir: &TempDir, modules: usize) -> PathBuf {
    let cfg = write_config(dir.path(), &format!("m{modules}.toml"), modules);
    let out = dir.path().join(format!("run-m{modules}"));
    ok(&moa(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tensors of a checkpoint file, decoded from the header, the manifest's
/// tensor table and the little-endian payload without the library's
/// reader.
fn raw_tensors(path: &Path) -> BTreeMap<String, Vec<f64>> {
    let bytes = std::fs::read(path).unwrap();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let header = std::str::from_utf8(&bytes[..nl]).unwrap();
    let manifest_len: usize = header.split(' ').nth(2).unwrap().parse().unwrap();
    let manifest_text = std::str::from_utf8(&bytes[nl + 1..nl + 1 + manifest_len]).unwrap();
    let payload = &bytes[nl + 1 + manifest_len..];
    let manifest: toml::Table = manifest_text.parse().unwrap();
    let mut out = BTreeMap::new();
    for t in manifest["tensors"].as_array().unwrap() {
        let name = t["name"].as_str().unwrap().to_string();
        let offset = t["offset"].as_integer().unwrap() as usize;
        let len = t["len"].as_integer().unwrap() as usize;
        let raw = &payload[offset..offset + 8 * len];
        assert_eq!(hex(&Sha256::digest(raw)), t["sha256"].as_str().unwrap(), "{name}");
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(name, values);
    }
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn eval(ckpt: &Path, extra: &[&str]) -> serde_json::Value {
    let mut args = vec!["eval", "--ckpt", s(ckpt)];
    args.extend_from_slice(extra);
    serde_json::from_str(&ok(&moa(&args))).unwrap()
}

#[test]
fn train_writes_checkpoint_metrics_and_chart() {
    let dir = TempDir::new().unwrap();
    let run = train(&dir, 2);
    for f in ["checkpoint.ckpt", "metrics.csv", "loss.svg"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn identical_runs_write_identical_files() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", 2);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&moa(&["train", "--config", s(&cfg), "--out", s(&a)]));
    ok(&moa(&["train", "--config", s(&cfg), "--out", s(&b)]));
    for f in ["metrics.csv", "checkpoint.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_module_count_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, CONFIG.replace("adaptation.M = __M__\n", "")).unwrap();
    let out = moa(&["train", "--config", s(&path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`M`"));
}

#[test]
fn unknown_flags_exit_with_usage_error() {
    let out = moa(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(moa(&["--help"]).status.success());
}

#[test]
fn merging_a_single_module_checkpoint_keeps_its_weights() {
    let dir = TempDir::new().unwrap();
    let run = train(&dir, 1);
    let merged = dir.path().join("merged.ckpt");
    ok(&moa(&["merge", "--in", s(&run.join("checkpoint.ckpt")), "--out", s(&merged)]));
    let before = raw_tensors(&run.join("checkpoint.ckpt"));
    let after = raw_tensors(&merged);
    for (name, values) in &after {
        assert_eq!(before.get(name), Some(values), "{name}");
    }
    assert!(after.keys().all(|k| !k.starts_with("optim.")));
}

#[test]
fn merged_weights_are_the_mean_of_stored_modules() {
    let dir = TempDir::new().unwrap();
    let run = train(&dir, 4);
    let merged = dir.path().join("merged.ckpt");
    ok(&moa(&["merge", "--in", s(&run.join("checkpoint.ckpt")), "--out", s(&merged)]));
    let src = raw_tensors(&run.join("checkpoint.ckpt"));
    let dst = raw_tensors(&merged);
    let mut checked = 0;
    for (name, values) in dst.iter().filter(|(n, _)| n.starts_with("site.")) {
        // <site>.<down|up>.0.<tensor> is the mean over <site>.<down|up>.<k>.<tensor>
        let parts: Vec<&str> = name.rsplitn(4, '.').collect();
        let (tensor, proj, site) = (parts[0], parts[2], parts[3]);
        let members: Vec<&Vec<f64>> = (0..)
            .map(|k| src.get(&format!("{site}.{proj}.{k}.{tensor}")))
            .take_while(Option::is_some)
            .flatten()
            .collect();
        assert_eq!(members.len(), 4, "{name}");
        for (c, v) in values.iter().enumerate() {
            let mean = members.iter().map(|m| m[c]).sum::<f64>() / members.len() as f64;
            assert!((v - mean).abs() <= 1e-12, "{name}[{c}]");
        }
        checked += 1;
    }
    assert!(checked >= 4);
    let report = eval(&merged, &["--mode", "merge"]);
    assert_eq!(report["modules_per_site"], 1);
    assert_eq!(report["merged_from"], 4);
}

#[test]
fn eval_modes_behave() {
    let dir = TempDir::new().unwrap();
    let run = train(&dir, 4);
    let ckpt = run.join("checkpoint.ckpt");

    let a = eval(&ckpt, &["--mode", "fixed_route"]);
    let b = eval(&ckpt, &["--mode", "fixed_route", "--seed", "9"]);
    assert_eq!(a["accuracy"], b["accuracy"]);

    let rr = eval(&ckpt, &["--mode", "random_route", "--seed", "3"]);
    let ens1 = eval(&ckpt, &["--mode", "ensemble", "--T", "1", "--seed", "3"]);
    assert_eq!(rr["accuracy"], ens1["accuracy"]);
    let ens4 = eval(&ckpt, &["--mode", "ensemble(4)"]);
    assert_eq!(ens4["T"], 4);

    let out = moa(&["eval", "--ckpt", s(&ckpt), "--mode", "merge"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("merge"));

    let report = dir.path().join("report.json");
    ok(&moa(&["eval", "--ckpt", s(&ckpt), "--mode", "fixed_route", "--report", s(&report)]));
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(saved, a);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = TempDir::new().unwrap();
    let run = train(&dir, 2);
    let ckpt = run.join("checkpoint.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let last = bytes.len() - 3;
    bytes[last] ^= 0x40;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    for args in [
        vec!["eval", "--ckpt", s(&bad), "--mode", "fixed_route"],
        vec!["inspect", "--ckpt", s(&bad)],
    ] {
        let out = moa(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
    let missing = moa(&["inspect", "--ckpt", s(&dir.path().join("nope.ckpt"))]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn inspect_reports_sites_and_counts() {
    let dir = TempDir::new().unwrap();
    let run = train(&dir, 4);
    let text = ok(&moa(&["inspect", "--ckpt", s(&run.join("checkpoint.ckpt"))]));
    assert!(text.contains("layer0.ffn"), "{text}");
    assert!(text.contains("unmerged"));
    assert!(text.contains("trainable parameters"));
    assert!(text.contains("after merging"));
}

#[test]
fn ablate_writes_one_row_per_cell_and_plot_renders_it() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), "base.toml", 2);
    let grid = dir.path().join("grid.toml");
    std::fs::write(
        &grid,
        r#"
base = "base.toml"
seeds = [1, 2, 3]
output = "out/ablation.csv"
threads = 1

[axes]
consistency = [true, false]
sharing = [true, false]
"#,
    )
    .unwrap();
    ok(&moa(&["ablate", "--grid", s(&grid)]));
    let csv_path = dir.path().join("out/ablation.csv");
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4, "{csv}");
    assert!(rows.iter().all(|r| r.ends_with(",ok") && r.contains(",3,")), "{csv}");

    let svg = dir.path().join("chart.svg");
    ok(&moa(&["plot", "--csv", s(&csv_path), "--out", s(&svg)]));
    assert!(std::fs::read_to_string(svg).unwrap().starts_with("<svg"));
}
