use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gpdmm");

fn gpdmm(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn write_config(dir: &Path, manifest: &Path, out: &Path) -> PathBuf {
    let text = format!(
        "manifest = {:?}\noutput_dir = {:?}\nseed = 3\nreduction_dims = 3\nrounds = 3\nsteps_per_phase = 10\npolish_steps = 10\ninfer_steps = 30\npatience = 2\nn_validation = 1\nn_test = 2\niterations = 2\nbudget = 2\nplots = true\n\n[search]\nreduction_dims = [2, 3]\n",
        s(manifest),
        s(out)
    );
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

/// Runs the whole command surface into `out`, returning the stdout of
/// `classify` and `generate`.
fn run_all(config: &Path, out: &Path, probe: &Path) -> (Vec<u8>, Vec<u8>) {
    let c = s(config);
    for args in [vec!["train", "--config", c], vec!["eval", "--config", c], vec!["mccv", "--config", c], vec!["search", "--config", c]] {
        let o = gpdmm(&args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let model = out.join("model.gpdmm");
    let cls = gpdmm(&["classify", "--model", s(&model), "--input", s(probe)]);
    assert_eq!(code(&cls), 0, "{}", String::from_utf8_lossy(&cls.stderr));
    let generated = out.join("generated.csv");
    let g = gpdmm(&["generate", "--model", s(&model), "--input", s(probe), "--horizon", "7", "--output", s(&generated)]);
    assert_eq!(code(&g), 0, "{}", String::from_utf8_lossy(&g.stderr));
    let g2 = gpdmm(&["generate", "--model", s(&model), "--input", s(probe), "--horizon", "4", "--class", "motion1"]);
    assert_eq!(code(&g2), 0);
    assert_eq!(String::from_utf8(g2.stdout.clone()).unwrap().lines().count(), 4);
    (cls.stdout, g2.stdout)
}

#[test]
fn every_command_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let data2 = root.join("data2");
    for d in [&data, &data2] {
        let o = gpdmm(&["synth", "--features", "4", "--length", "30", "--trials", "4", "--seed", "2", "--out", s(d)]);
        assert_eq!(code(&o), 0);
    }
    let (a, b) = (snapshot(&data), snapshot(&data2));
    assert_eq!(a.len(), 1 + 16);
    assert_eq!(a, b);

    let probe = data.join("data/motion2_00.csv");
    let out = root.join("out");
    let config = write_config(root, &data.join("manifest.toml"), &out);
    let first = run_all(&config, &out, &probe);
    let files = snapshot(&out);
    for name in ["model.gpdmm", "train_log.csv", "split.json", "report.json", "report.txt", "mccv.json", "leaderboard.json", "best_config.toml", "train.log", "plots/latent.svg"] {
        assert!(files.contains_key(Path::new(name)), "missing {name}");
    }
    fs::remove_dir_all(&out).unwrap();
    let second = run_all(&config, &out, &probe);
    assert_eq!(first, second);
    let again = snapshot(&out);
    assert_eq!(files.keys().collect::<Vec<_>>(), again.keys().collect::<Vec<_>>());
    for (k, v) in &files {
        assert!(v == &again[k], "{} differs between runs", k.display());
    }

    let classified: serde_json::Value = serde_json::from_slice(&first.0).unwrap();
    let post: f64 = classified["posterior"].as_array().unwrap().iter().map(|pair| pair[1].as_f64().unwrap()).sum();
    assert!((post - 1.0).abs() < 1e-9);

    let log = String::from_utf8(files[Path::new("train.log")].clone()).unwrap();
    assert!(log.contains("seed = 3"), "log carries the resolved config");
    let csv = String::from_utf8(files[Path::new("train_log.csv")].clone()).unwrap();
    let values: Vec<f64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    for w in values.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "objective decreased: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    assert_eq!(code(&gpdmm(&[])), 1);
    assert_eq!(code(&gpdmm(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&gpdmm(&["--help"])), 0);

    let out = root.join("out");
    let no_manifest = gpdmm(&["train", "--output-dir", s(&out)]);
    assert_eq!(code(&no_manifest), 1);
    assert!(String::from_utf8_lossy(&no_manifest.stderr).contains("manifest"));

    let missing = gpdmm(&["train", "--manifest", s(&root.join("nope.toml")), "--output-dir", s(&out)]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.toml"));

    let data = root.join("data");
    assert_eq!(code(&gpdmm(&["synth", "--features", "3", "--length", "20", "--trials", "4", "--out", s(&data)])), 0);
    fs::write(data.join("data/motion1_02.csv"), "1,2,3\n4,inf,6\n").unwrap();
    let bad = gpdmm(&["train", "--manifest", s(&data.join("manifest.toml")), "--output-dir", s(&out)]);
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("row 2, column 2"));

    let cfg = root.join("bad.toml");
    fs::write(&cfg, "prefix_fraction = 1.5\n").unwrap();
    assert_eq!(code(&gpdmm(&["mccv", "--config", s(&cfg)])), 1);
    fs::write(&cfg, "unknown_key = 1\n").unwrap();
    assert_eq!(code(&gpdmm(&["mccv", "--config", s(&cfg)])), 1);

    let model = root.join("model.gpdmm");
    fs::write(&model, "GPDMM9\n{}\n").unwrap();
    let probe = data.join("data/motion0_00.csv");
    let wrong = gpdmm(&["classify", "--model", s(&model), "--input", s(&probe)]);
    assert_eq!(code(&wrong), 2);
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("GPDMM1"));
}
