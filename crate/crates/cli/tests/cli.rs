use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn limm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_limm")).args(args).env("RUST_LOG", "warn").output().expect("spawn limm")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn repo_file(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel).display().to_string()
}

#[test]
fn trf_of_shipped_specs() {
    assert_eq!(stdout(&limm(&["trf", "--spec", &repo_file("layer_specs/convnext_t.spec")])).trim(), "1688");
    assert_eq!(stdout(&limm(&["trf", "--spec", &repo_file("layer_specs/csrnet.spec")])).trim(), "284");
    assert_eq!(stdout(&limm(&["trf", "--spec", &repo_file("layer_specs/convnext_t_gsa.spec")])).trim(), "global");
    assert_eq!(stdout(&limm(&["trf", "--backbone", "tiny-limm", "--no-shift"])).trim(), "64");
}

#[test]
fn unknown_subcommand_prints_usage_and_fails() {
    let o = limm(&["frobnicate"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn errors_are_one_line_with_nonzero_exit() {
    for args in [
        vec!["trf", "--spec", "/nonexistent.spec"],
        vec!["train", "--set", "optim.lr=-1"],
        vec!["train", "--set", "data.augment.crop=100"],
        vec!["train"],
        vec!["eval", "--checkpoint", "/nonexistent"],
    ] {
        let o = limm(&args);
        assert!(!o.status.success(), "{args:?} succeeded");
        let err = String::from_utf8_lossy(&o.stderr);
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
        assert!(err.starts_with("error: "), "{args:?}: {err}");
    }
}

fn dir_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: [&str; 8] = ["--set", "data.synthetic.n_train=6", "--set", "data.synthetic.n_val=3", "--set", "data.synthetic.n_test=3", "--set", "data.synthetic.height=96"];

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let mut args = vec!["gen-data", "--seed", "7", "--out", d.path().to_str().unwrap()];
        args.extend(SMALL);
        stdout(&limm(&args));
    }
    let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    // 12 images plus one annotation file per split.
    assert_eq!(fa.len(), 15);
    assert!(fa == fb);
    let c = tempfile::tempdir().unwrap();
    let mut args = vec!["gen-data", "--seed", "8", "--out", c.path().to_str().unwrap()];
    args.extend(SMALL);
    stdout(&limm(&args));
    assert!(dir_bytes(c.path()) != fa);
}

#[test]
fn pipeline_from_data_to_analysis() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let mut gen = vec!["gen-data", "--out", data.to_str().unwrap()];
    gen.extend(["--set", "data.synthetic.height=64", "--set", "data.synthetic.width=64"]);
    gen.extend(["--set", "data.synthetic.n_train=8", "--set", "data.synthetic.n_val=4", "--set", "data.synthetic.n_test=4"]);
    stdout(&limm(&gen));

    let cfg = root.join("run.toml");
    fs::write(
        &cfg,
        format!(
            r#"out_dir = "{out}"
[model]
backbone = "tiny"
ws = 32
gsa_heads = 4
proj_dim = 8
[contrastive]
levels = 3
queue_len = 16
samples = 2
warmup = 2
thresholds = "{th}"
threshold_samples = 60
[optim]
lr = 1e-3
batch_size = 4
epochs = 2
[data]
train = "{d}/train"
val = "{d}/val"
test = "{d}/test"
[data.augment]
crop = 64
"#,
            out = root.join("run").display(),
            th = root.join("th.json").display(),
            d = data.display()
        ),
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    assert!(stdout(&limm(&["thresholds", "--config", c])).contains("thresholds"));
    assert!(stdout(&limm(&["train", "--config", c])).contains("best val MAE"));
    let metrics = fs::read_to_string(root.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let report: serde_json::Value = serde_json::from_str(&stdout(&limm(&["eval", "--config", c, "--json"]))).unwrap();
    assert_eq!(report["n"], 4);
    assert!(report["rmse"].as_f64().unwrap() >= report["mae"].as_f64().unwrap());

    let heat = root.join("erf.png");
    let erf = stdout(&limm(&["erf", "--config", c, "--scenes", "2", "--samples", "1", "--heatmap", heat.to_str().unwrap()]));
    assert!(erf.contains("mean ERF") && heat.exists());

    let sweep = stdout(&limm(&["mask-sweep", "--config", c, "--margins", "0,32,64"]));
    assert_eq!(sweep.lines().filter(|l| !l.starts_with('#')).count(), 4);

    let emb = root.join("emb.csv");
    stdout(&limm(&["export-embeddings", "--config", c, "--samples", "2", "--out", emb.to_str().unwrap()]));
    let rows = fs::read_to_string(&emb).unwrap();
    assert!(rows.starts_with("level,v0,"));
    assert_eq!(rows.lines().count(), 1 + 4 * 2);
}
