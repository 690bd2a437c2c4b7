use std::path::Path;
use std::process::{Command, Output};

fn rclab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rclab"))
        .args(args)
        .env_remove("RC_LAB_SEED")
        .output()
        .expect("spawn rclab")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn validate_theorem_prints_one_row_per_basis_size() {
    let o = rclab(&["--seed", "3", "validate-theorem", "--n", "16", "--nobs", "20", "--m", "1,2,8,16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "M,numerical_normalized,theoretical_normalized");
    assert_eq!(lines.len(), 5);
    let last: Vec<f64> = lines[4].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert!(last.iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = rclab(&["run-ber", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_is_a_runtime_error() {
    let o = rclab(&["--config", "/nonexistent/exp.toml", "run-ber"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn inspect_channel_fractions_sum_to_one() {
    let o = rclab(&["--seed", "5", "inspect-channel", "--draws", "200"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("class,count,fraction"));
    let (mut count, mut frac) = (0usize, 0.0);
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        count += f[1].parse::<usize>().unwrap();
        frac += f[2].parse::<f64>().unwrap();
    }
    assert_eq!(count, 200);
    assert!((frac - 1.0).abs() < 1e-9);
}

#[test]
fn run_ber_with_no_slots_writes_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/siso_mp_cdl_d.toml")).unwrap();
    let text: Vec<&str> = src.lines().map(|l| if l.starts_with("n_slots") { "n_slots = 0" } else { l }).collect();
    std::fs::write(&cfg, text.join("\n")).unwrap();
    let o = rclab(&["--config", cfg.to_str().unwrap(), "run-ber"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim_end(), "detector,snr_db,n_bits,n_errors,ber,seed");
}

#[test]
fn configure_writes_spec_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("td");
    let o = rclab(&[
        "--seed", "1", "--out", out.to_str().unwrap(), "configure", "--domain", "td", "--m", "2", "--order", "3",
        "--window", "2", "--n", "32", "--nobs", "40",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("spec.csv").is_file());
    assert!(out.join("diagnostics.csv").is_file());

    let d = rclab(&["--from", "x", "dump-spec"]);
    assert_eq!(d.status.code(), Some(2));
    let d = rclab(&["dump-spec", "--from", out.join("spec.csv").to_str().unwrap()]);
    assert!(d.status.success(), "{}", String::from_utf8_lossy(&d.stderr));
    assert!(!stdout(&d).is_empty());
}
