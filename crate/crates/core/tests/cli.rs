use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use distreg::harness::ExperimentConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_distreg"));
    c.env_remove("DISTREG_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

const SMALL_ONESHOT: &str = r#"
experiment = "oneshot_sweep"
replicates = 3
seed = 5

[problem]
n = 400
p = [4, 10]

[grid]
k = "feasible"

[oneshot]
test_points = 5
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn shipped_configs_parse_and_validate() {
    let mut count = 0;
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            count += 1;
        }
    }
    assert!(count >= 5);
}

#[test]
fn identical_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL_ONESHOT);
    let cfg = cfg.to_str().unwrap();
    let mut outputs = Vec::new();
    for (name, format) in [("a.csv", "csv"), ("b.csv", "csv"), ("a.json", "json"), ("b.json", "json")] {
        let out = dir.path().join(name);
        let o = run(&["oneshot", "--config", cfg, "--format", format, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(fs::read(out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[2], outputs[3]);
    assert!(!outputs[0].is_empty());

    let other = dir.path().join("c.csv");
    let o = run(&["oneshot", "--config", cfg, "--seed", "6", "--out", other.to_str().unwrap()]);
    assert!(o.status.success());
    assert_ne!(fs::read(other).unwrap(), outputs[0]);
}

#[test]
fn seed_flag_overrides_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL_ONESHOT);
    let cfg = cfg.to_str().unwrap();
    let flag = bin().args(["oneshot", "--config", cfg, "--seed", "9"]).output().unwrap();
    let env = bin().env("DISTREG_SEED", "9").args(["oneshot", "--config", cfg]).output().unwrap();
    let both = bin()
        .env("DISTREG_SEED", "1")
        .args(["oneshot", "--config", cfg, "--seed", "9"])
        .output()
        .unwrap();
    assert!(flag.status.success() && env.status.success() && both.status.success());
    assert_eq!(flag.stdout, env.stdout);
    assert_eq!(flag.stdout, both.stdout);
}

#[test]
fn every_row_carries_its_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL_ONESHOT);
    let o = run(&["oneshot", "--config", cfg.to_str().unwrap()]);
    let mut rdr = csv::Reader::from_reader(o.stdout.as_slice());
    let headers = rdr.headers().unwrap().clone();
    let seed_col = headers.iter().position(|h| h == "seed").unwrap();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        rec[seed_col].parse::<u64>().unwrap();
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn exit_codes() {
    let ok = run(&["asymptotic", "--gamma", "0.01", "--kmax", "5"]);
    assert_eq!(ok.status.code(), Some(0));

    let unknown = run(&["oneshot", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));

    let no_command = run(&[]);
    assert_eq!(no_command.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad_key = write(dir.path(), "bad.toml", "experiment = \"oneshot_sweep\"\nrepl = 3\n");
    assert_eq!(run(&["oneshot", "--config", bad_key.to_str().unwrap()]).status.code(), Some(2));

    let wrong_kind = configs_dir().join("asymptotic_mp.toml");
    assert_eq!(run(&["oneshot", "--config", wrong_kind.to_str().unwrap()]).status.code(), Some(2));

    let infeasible = write(
        dir.path(),
        "k.toml",
        "experiment = \"oneshot_sweep\"\n[problem]\nn = 100\np = 10\n[grid]\nk = [20]\n",
    );
    assert_eq!(run(&["oneshot", "--config", infeasible.to_str().unwrap()]).status.code(), Some(2));

    let bad_env = bin().env("DISTREG_SEED", "abc").args(["asymptotic"]).output().unwrap();
    assert_eq!(bad_env.status.code(), Some(2));

    // An all-zero feature survives pruning and makes every Gram singular.
    let mut text = String::from("y,x1,x2\n");
    for i in 0..40 {
        text.push_str(&format!("{},{},0\n", i % 7, (i * 13) % 11));
    }
    let data = write(dir.path(), "zero.csv", &text);
    let singular = run(&["empirical", "--input", data.to_str().unwrap()]);
    assert_eq!(singular.status.code(), Some(3), "{}", String::from_utf8_lossy(&singular.stderr));
}

#[test]
fn selftest_passes() {
    let o = run(&["selftest", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().count() >= 5);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn gen_writes_table_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.csv");
    let o = run(&[
        "gen",
        "--config",
        configs_dir().join("gen_mp.toml").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let meta = out.with_extension("json");
    let ds = distreg::datamodel::Dataset::read_csv(&out, &meta).unwrap();
    assert_eq!((ds.n(), ds.p()), (6000, 17));
}
