use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
seed = 3
states = 2

[dataset]
source = "synthetic"
num_classes = 4
train_per_class = 20
test_per_class = 5
dim = 8
spread = 0.5

[model]
hidden = [8]

[train]
epochs = 3
incremental_epochs = 2

[evaluation]
grid = ["FT", "inFT", "inFT_siw^mc"]
"#;

fn siw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siw"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn run_tiny(dir: &Path) -> PathBuf {
    let config = tiny_config(dir);
    let out = dir.join("run");
    let o = siw(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn gil_reproduces_the_reference_column() {
    let table = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/data/ft_grid.csv");
    let o = siw(&["gil", "--table", table]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("FT,-54.91\n"), "{text}");
    assert!(text.contains("inFT_siw^mc,-19.38\n"));
    assert!(text.contains("LwF,-34.72\n") || text.contains("LwF,-34.73\n"));
}

#[test]
fn gil_without_full_row_fails() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t.csv");
    fs::write(&table, "method,a\nFT,20\n").unwrap();
    let o = siw(&["gil", "--table", table.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_evaluate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_tiny(dir.path());
    assert!(out.join("manifest.json").exists());
    assert!(out.join("ft/bank.bin").exists());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);

    let eval_dir = dir.path().join("eval");
    let o = siw(&[
        "evaluate",
        "--run",
        out.to_str().unwrap(),
        "--grid",
        "inFT_L2^mc",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(eval_dir.join("inFT_L2_mc.json").exists());
    // Re-scoring reproduces the stored reports byte for byte.
    assert_eq!(
        fs::read(eval_dir.join("inFT_siw_mc.json")).unwrap(),
        fs::read(out.join("reports/inFT_siw_mc.json")).unwrap()
    );

    let o = siw(&["report", "--run", out.to_str().unwrap(), "--format", "json"]);
    assert!(o.status.success());
    let reports: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 3);
}

#[test]
fn seed_override_changes_nothing_else() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = siw(&[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "9",
        ]);
        assert!(o.status.success());
    }
    assert_eq!(
        fs::read(a.join("summary.csv")).unwrap(),
        fs::read(b.join("summary.csv")).unwrap()
    );
    assert!(fs::read_to_string(a.join("config.toml")).unwrap().contains("seed = 9"));
}

#[test]
fn multi_seed_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("seeds");
    let o = siw(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seeds",
        "1,2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("seed_1/manifest.json").exists());
    assert!(out.join("seed_2/manifest.json").exists());
    let csv = fs::read_to_string(out.join("seeds.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("FT,2,"));
    assert!(stdout(&o).contains(" ± "));
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, TINY.replace("[train]", "[train]\nepoch = 4")).unwrap();
    let o = siw(&[
        "run",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
}

#[test]
fn unknown_method_is_a_usage_error() {
    let o = siw(&["run", "--grid", "inFT_zscore", "--out", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupted_bank_exits_with_integrity_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_tiny(dir.path());
    let bank = out.join("ft/bank.bin");
    let mut bytes = fs::read(&bank).unwrap();
    let last = bytes.len() - 40;
    bytes[last] ^= 1;
    fs::write(&bank, bytes).unwrap();
    let o = siw(&["evaluate", "--run", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let o = siw(&["report", "--run", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn generate_writes_csv_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = siw(&[
        "generate",
        "--out",
        out.to_str().unwrap(),
        "--classes",
        "3",
        "--train-per-class",
        "4",
        "--test-per-class",
        "2",
        "--dim",
        "2",
    ]);
    assert!(o.status.success());
    let train = fs::read_to_string(out.join("train.csv")).unwrap();
    assert_eq!(train.lines().next(), Some("f0,f1,label"));
    assert_eq!(train.lines().count(), 13);
    assert_eq!(fs::read_to_string(out.join("test.csv")).unwrap().lines().count(), 7);
}

#[test]
fn run_on_generated_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = siw(&[
        "generate",
        "--out",
        data.to_str().unwrap(),
        "--classes",
        "4",
        "--dim",
        "8",
        "--format",
        "packed",
    ]);
    assert!(o.status.success());
    let config = TINY.replace(
        "source = \"synthetic\"\nnum_classes = 4\ntrain_per_class = 20\ntest_per_class = 5\ndim = 8\nspread = 0.5",
        &format!(
            "source = \"files\"\ntrain = {:?}\ntest = {:?}",
            data.join("train.bin"),
            data.join("test.bin")
        ),
    );
    assert!(config.contains("files"));
    let path = dir.path().join("files.toml");
    fs::write(&path, config).unwrap();
    let o = siw(&[
        "run",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn analyze_writes_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_tiny(dir.path());
    let plots = dir.path().join("plots");
    let o = siw(&[
        "analyze",
        "--run",
        out.to_str().unwrap(),
        "--out",
        plots.to_str().unwrap(),
        "--memory",
        "0.05",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "magnitude_raw.csv",
        "magnitude_standardized.csv",
        "similarity.csv",
        "distribution_raw.csv",
        "distribution_standardized.csv",
        "analysis.json",
    ] {
        assert!(plots.join(f).exists(), "{f}");
    }
    let sim = fs::read_to_string(plots.join("similarity.csv")).unwrap();
    assert!(sim.starts_with("state,distance,fine_tuning,independent,memory_0.05\n"));
    assert!(sim
        .lines()
        .nth(2)
        .unwrap()
        .starts_with("1,0,1.000000,1.000000,1.000000"));
}
