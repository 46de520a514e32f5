use std::process::{Command, Output};

fn xigen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xigen"))
        .args(args)
        .output()
        .expect("run xigen")
}

fn body(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}

fn error_json(out: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    serde_json::from_str(err.trim()).unwrap()
}

const SIM: [&str; 10] = [
    "--measure", "beta:1.5", "--n", "40", "--gamma", "1.0", "--seed", "99", "--stop", "tau",
];

#[test]
fn export_import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    let path_s = path.to_str().unwrap();

    let mut args = vec!["simulate", "--export", path_s];
    args.extend(SIM);
    let sim = xigen(&args);
    assert!(sim.status.success());
    let exported = std::fs::read_to_string(&path).unwrap();
    assert!(exported.starts_with("# xigen "));

    let mut direct = vec!["families"];
    direct.extend(SIM);
    let direct = xigen(&direct);
    let imported = xigen(&["families", "--import", path_s]);
    assert!(direct.status.success() && imported.status.success());
    assert_eq!(body(&direct), body(&imported));
    assert!(body(&direct).starts_with("r,sites_count,alleles_count\n"));
}

#[test]
fn headers_record_the_config() {
    let out = xigen(&["psi", "--measure", "bs", "--q", "1,2"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# xigen "));
    let config = lines.next().unwrap().strip_prefix("# config: ").unwrap();
    let v: serde_json::Value = serde_json::from_str(config).unwrap();
    assert_eq!(v["command"], "psi");
}

#[test]
fn misspelled_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(
        &path,
        "measure = \"kingman\"\nn_grid = [10]\ngama = 1.0\nreplicates = 4\nmaster_seed = 1\nstatistics = [\"mutations\"]\n",
    )
    .unwrap();
    let out = xigen(&["experiment", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["error"], "ConfigError");
    assert!(e["message"].as_str().unwrap().contains("gama"), "{e}");
}

#[test]
fn numeric_failure_exit_code() {
    let out = xigen(&["speed", "--measure", "kingman", "--n", "10", "--t", "100"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"], "HorizonExceeded");
}

#[test]
fn unsupported_measure_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("xi.toml");
    std::fs::write(
        &path,
        "family = \"xi_atoms\"\nkingman_mass = 0.5\nxi_atoms = [{ point = [0.5, 0.3], weight = 0.5 }]\n",
    )
    .unwrap();
    let out = xigen(&[
        "psi", "--measure-file", path.to_str().unwrap(), "--q", "2", "--variant", "bar",
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_json(&out)["error"], "BarUnsupported");
}

#[test]
fn experiment_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(
        &path,
        "measure = \"bs\"\nn_grid = [20, 40]\ngamma = 1.0\nreplicates = 16\nmaster_seed = 5\nstatistics = [\"mutations\", \"tau\"]\n",
    )
    .unwrap();
    let p = path.to_str().unwrap();
    let a = xigen(&["experiment", "--config", p]);
    let b = xigen(&["experiment", "--config", p]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
}
