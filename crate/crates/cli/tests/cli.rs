use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn owl(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owl"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn read_table(path: PathBuf) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(&path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(table: &(Vec<String>, Vec<Vec<String>>), name: &str) -> Vec<String> {
    let j = table.0.iter().position(|c| c == name).unwrap();
    table.1.iter().map(|r| r[j].clone()).collect()
}

fn gen_data(dir: &Path) -> PathBuf {
    let cfg = write(
        dir,
        "gen.json",
        r#"{"seed": 3, "datasets": [
            {"kind": "sphere-mixture", "name": "id", "centers": [[1,0,0],[0,1,0]], "sigma": 0.2, "counts": [60, 60]},
            {"kind": "sphere-mixture", "name": "ood", "centers": [[0,0,1]], "sigma": 0.2, "counts": [60]}]}"#,
    );
    let data = dir.join("data");
    let o = owl(&["gen", "--config", &cfg], &data);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fs::write(dir.join("head.csv"), "#head\n1,0,0.2\n0,1,0.1\n0.3,0.3,0\n0,0,0\n").unwrap();
    data
}

#[test]
fn missing_seed_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "g.json", r#"{"datasets": []}"#);
    let o = owl(&["gen", "--config", &cfg], &tmp.path().join("o"));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "g.json", r#"{"seed": 1, "datasets": [], "bogus": 1}"#);
    let o = owl(&["gen", "--config", &cfg], &tmp.path().join("o"));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
}

#[test]
fn random_dice_without_seed_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let data = gen_data(tmp.path());
    let cfg = write(
        tmp.path(),
        "s.json",
        &format!(
            r#"{{"id": "{0}/id.emb", "ood": "{0}/ood.emb", "head": "head.csv", "methods": ["dice+energy"], "dice_strategy": "random"}}"#,
            data.display()
        ),
    );
    let o = owl(&["score", "--config", &cfg], &tmp.path().join("o"));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}

#[test]
fn malformed_graph_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let truncated = write(tmp.path(), "a.json", r#"{"graph": {"nodes": [[1, 0]"#);
    let o = owl(&["spectral", "--config", &truncated], &tmp.path().join("a"));
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let incomplete = write(tmp.path(), "b.json", r#"{"graph": {"nodes": 3}}"#);
    let o = owl(&["spectral", "--config", &incomplete], &tmp.path().join("b"));
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn nscl_theorem_rows_pass() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("n");
    let o = owl(&["spectral", "--case", "nscl", "--tau-s", "0.25", "--tau-c", "0.2"], &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = read_table(out.join("spectral_nscl.csv"));
    assert!(!t.1.is_empty());
    assert!(column(&t, "pass").iter().all(|p| p == "true"));
}

#[test]
fn failing_regime_exits_one() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("n");
    let o = owl(&["spectral", "--case", "nscl", "--tau-s", "0.4", "--tau-c", "0.2"], &out);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(out.join("spectral_nscl.csv").exists());
}

#[test]
fn sorl_sweep_starts_at_zero() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("s");
    let o = owl(&["spectral", "--case", "sorl", "--delta-grid", "0:0.5:11"], &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = read_table(out.join("spectral_kms_sweep.csv"));
    assert_eq!(t.1.len(), 11);
    assert_eq!(t.1[0][0].parse::<f64>().unwrap(), 0.0);
    assert_eq!(t.1[0][1].parse::<f64>().unwrap(), 0.0);
}

fn score_column(dir: &Path, method: &str) -> Vec<f64> {
    column(&read_table(dir.join(format!("scores_{method}.csv"))), "score").iter().map(|s| s.parse().unwrap()).collect()
}

#[test]
fn degenerate_react_and_dice_reduce_to_energy() {
    let tmp = TempDir::new().unwrap();
    let data = gen_data(tmp.path());
    let cfg = write(
        tmp.path(),
        "s.json",
        &format!(
            r#"{{"id": "{0}/id.emb", "ood": "{0}/ood.emb", "head": "head.csv", "methods": ["energy", "react+energy", "dice+energy"], "react_percentile": 100, "dice_sparsity": 0}}"#,
            data.display()
        ),
    );
    let out = tmp.path().join("o");
    let o = owl(&["score", "--config", &cfg], &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let energy = score_column(&out, "energy");
    for m in ["react_energy", "dice_energy"] {
        let other = score_column(&out, m);
        assert_eq!(energy.len(), other.len());
        for (a, b) in energy.iter().zip(&other) {
            assert!((a - b).abs() <= 1e-12, "{m}: {a} vs {b}");
        }
    }
}

#[test]
fn theory_tables_round_trip_through_csv() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "t.json", r#"{"seed": 5, "samples": 100000, "dice": {"units": 10, "samples": 100000, "sd_min": 0.1, "sd_max": 2.0, "rho": 0.5, "max_rel_err": 0.05}}"#);
    let out = tmp.path().join("t");
    let o = owl(&["theory", "--config", &cfg], &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["theory_rectification", "theory_monotonicity", "theory_dice_variance"] {
        let t = read_table(out.join(format!("{name}.csv")));
        assert!(!t.1.is_empty(), "{name}");
        for row in &t.1 {
            assert_eq!(row.len(), t.0.len());
            for cell in row {
                if let Ok(v) = cell.parse::<f64>() {
                    if cell.contains('.') || cell.contains('e') {
                        assert_eq!(format!("{v:?}"), *cell, "{name}");
                    }
                }
            }
        }
        let text = fs::read_to_string(out.join(format!("{name}.csv"))).unwrap();
        assert!(text.contains("# config_sha256="));
        assert!(text.contains("# seed=5"));
    }
}

fn final_novel_acc(out: &Path) -> f64 {
    column(&read_table(out.join("opencon_history.csv")), "novel_acc").last().unwrap().parse().unwrap()
}

#[test]
fn opencon_ablation_is_worse() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "o.json", r#"{"seed": 1}"#);
    let full = tmp.path().join("full");
    let o = owl(&["opencon", "--config", &cfg], &full);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ablated = tmp.path().join("ablated");
    let o = owl(&["opencon", "--config", &cfg, "--lambda-n", "0"], &ablated);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (a, b) = (final_novel_acc(&full), final_novel_acc(&ablated));
    assert!(a >= 0.9 && b < a, "full {a}, ablated {b}");
}

#[test]
fn identical_configs_give_identical_bytes() {
    let tmp = TempDir::new().unwrap();
    let data = gen_data(tmp.path());
    let cfg = write(
        tmp.path(),
        "s.json",
        &format!(
            r#"{{"id": "{0}/id.emb", "ood": "{0}/ood.emb", "head": "head.csv", "dice_strategy": "random", "seed": 9}}"#,
            data.display()
        ),
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&owl(&["score", "--config", &cfg], &a)), 0);
    assert_eq!(code(&owl(&["score", "--config", &cfg], &b)), 0);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}
