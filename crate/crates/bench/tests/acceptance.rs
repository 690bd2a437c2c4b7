//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints its own PASS/FAIL line; exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rclab::channel::{apply_siso, sample_tdl, MimoChannelRealization, PowerDelayProfile};
use rclab::ofdm::{build_grid, ofdm_modulate, GridLayout, OfdmNumerology, Qam, RsMode, SYMBOLS_PER_SLOT};
use rclab::rng::stream;
use rclab::theory::{lemma1_error, p2_objective_numerical, projection_residual, reproduce_fig5, theorem1_error};
use rclab::weight_config::{
    collect_equalizer_irs, configure_frequency_domain, configure_time_domain, pca_basis, ChannelStatsDataset, Domain,
    FrequencyDomainParams, PhasePolicy, TimeDomainParams,
};
use rclab::C64;
use rclab_bench::detect::{frequency_correlation, lmmse_detect, LmmseSetup};
use rclab_bench::experiment::{load_pdp, run_ber_experiment, DetectorKind, ExperimentConfig};
use statrs::function::erf::erfc;

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Outcome);

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median BER per `(detector, snr)` over seeds `1..=n_seeds`.
fn median_ber(cfg: &ExperimentConfig, n_seeds: u64) -> BTreeMap<(String, i64), f64> {
    let mut acc: BTreeMap<(String, i64), Vec<f64>> = BTreeMap::new();
    for seed in 1..=n_seeds {
        let mut c = cfg.clone();
        c.experiment.seed = seed;
        for r in run_ber_experiment(&c).expect("experiment") {
            acc.entry((r.detector, r.snr_db.round() as i64)).or_default().push(r.ber);
        }
    }
    acc.into_iter().map(|(k, mut v)| (k, median(&mut v))).collect()
}

fn shipped(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&root().join("configs").join(name)).expect("shipped config")
}

fn trace_identity() -> Outcome {
    let start = Instant::now();
    let pdp = load_pdp("cdl-d", Path::new(".")).unwrap();
    let data = collect_equalizer_irs(&pdp, 64, 200, PhasePolicy::RejectNonMp, 11).unwrap();
    let k = data.covariance();
    let mut worst: f64 = 0.0;
    for m in [1, 4, 16, 64] {
        let f = pca_basis(&data, m).unwrap().f;
        let closed = theorem1_error(&k, &f).unwrap();
        let numeric = p2_objective_numerical(&f, &data).unwrap();
        let scale = numeric.abs().max(closed.abs()).max(f64::MIN_POSITIVE);
        let rel = if m == 64 { (closed - numeric).abs() } else { (closed - numeric).abs() / scale };
        worst = worst.max(rel);
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-8 && t < Duration::from_secs(60),
        format!("worst relative gap {worst:.2e} (absolute at M = N), {:.1} s", t.as_secs_f64()),
    )
}

fn error_curves_full_scale() -> Outcome {
    let start = Instant::now();
    let pdp = load_pdp("cdl-d", Path::new(".")).unwrap();
    let ms = [1, 2, 5, 10, 20, 50, 100, 200, 500, 1000];
    let r = reproduce_fig5(&pdp, 1000, 1000, &ms, 5).unwrap();
    let gap = r.max_gap();
    let mono = r.is_nonincreasing(1e-12);
    let last = r.numerical_normalized[ms.len() - 1].abs().max(r.theoretical_normalized[ms.len() - 1].abs());
    let t = start.elapsed();
    outcome(
        gap <= 1e-8 && mono && last <= 1e-8 && t < Duration::from_secs(15 * 60),
        format!("max gap {gap:.2e}, nonincreasing {mono}, value at M = N {last:.2e}, {:.0} s", t.as_secs_f64()),
    )
}

fn eigenvalue_tail_identity() -> Outcome {
    let mut rng = stream(21, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..=64);
        let n_obs = rng.random_range(5..=120);
        let m = rng.random_range(1..=n);
        let vectors = (0..n_obs)
            .map(|_| (0..n).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect())
            .collect();
        let data = ChannelStatsDataset::new(vectors, Domain::Time).unwrap();
        let pca = pca_basis(&data, m).unwrap();
        let residual = projection_residual(&pca.f, &data);
        let tail = lemma1_error(&pca.eigenvalues, m).unwrap();
        let energy: f64 = pca.eigenvalues.iter().sum();
        worst = worst.max((residual - tail).abs() / energy.max(1.0));
    }
    outcome(worst <= 1e-10, format!("worst gap {worst:.2e} relative to total energy over 50 datasets"))
}

fn random_pdp<R: Rng>(rng: &mut R) -> PowerDelayProfile {
    let n_taps = rng.random_range(1..=6);
    let mut delays = vec![0.0];
    while delays.len() < n_taps {
        let d = rng.random_range(1..=8) as f64;
        if !delays.contains(&d) {
            delays.push(d);
        }
    }
    let powers: Vec<f64> = delays.iter().map(|_| rng.random_range(-20.0..0.0)).collect();
    let k = rng.random_bool(0.5).then(|| rng.random_range(0.0..15.0));
    PowerDelayProfile::from_clusters(&delays, &powers, k).unwrap()
}

fn configuration_invariants() -> Outcome {
    let mut rng = stream(31, &[]);
    let (mut poles, mut unstable, mut bad_basis, mut failures) = (0usize, 0usize, 0usize, 0usize);
    for run in 0..1000u64 {
        let pdp = random_pdp(&mut rng);
        let td = TimeDomainParams { n: 32, n_obs: 40, m: 3, l_f: 4, window: 2, policy: PhasePolicy::MpFactor };
        let fd = FrequencyDomainParams {
            n: 32,
            n_obs: 40,
            m: 3,
            l_rp: 3,
            window: 2,
            grid_size: 64,
            policy: PhasePolicy::MpFactor,
        };
        let (Ok(t), Ok(f)) = (configure_time_domain(&pdp, &td, run), configure_frequency_domain(&pdp, &fd, run)) else {
            failures += 1;
            continue;
        };
        for p in t.poles.poles.iter().chain(&f.poles.poles) {
            poles += 1;
            if p.norm() >= 1.0 {
                unstable += 1;
            }
        }
        if t.basis.as_ref().is_none_or(|b| b.check_invariants(1e-8).is_err()) {
            bad_basis += 1;
        }
    }
    outcome(
        failures == 0 && unstable == 0 && bad_basis == 0,
        format!("1000 runs, {poles} poles, {unstable} outside the unit circle, {bad_basis} basis violations, {failures} failed runs"),
    )
}

fn noiseless_equalization() -> Outcome {
    let text = r#"
        [experiment]
        detectors = ["RC-TD"]
        snr_db = [inf]
        n_slots = 10
        seed = 3

        [ofdm]
        n_sc = 256
        n_cp = 32
        qam = 16

        [channel]
        pdp = "cdl-d"
        phase = "mp"

        [rc]
        m = 5
        l_f = 7
        window = 5
        activation = "linear"
    "#;
    let cfg = ExperimentConfig::from_toml(text, Path::new(".")).unwrap();
    let r = &run_ber_experiment(&cfg).unwrap()[0];
    outcome(r.n_errors == 0, format!("{} errors in {} bits", r.n_errors, r.n_bits))
}

fn configured_beat_random() -> Outcome {
    let start = Instant::now();
    let mut cfg = shipped("siso_mp_cdl_d.toml");
    cfg.experiment.detectors = vec![DetectorKind::RcTd, DetectorKind::RcFd, DetectorKind::RcRandom];
    cfg.experiment.snr_db = vec![25.0];
    let m = median_ber(&cfg, 20);
    let get = |d: &str| m[&(d.to_string(), 25)];
    let (td, fd, rnd) = (get("RC-TD"), get("RC-FD"), get("RC-Random"));
    let close = td.max(fd) <= 2.0 * td.min(fd);
    let t = start.elapsed();
    outcome(
        td <= rnd && fd <= rnd && close && t < Duration::from_secs(30 * 60),
        format!("median BER TD {td:.3e}, FD {fd:.3e}, random {rnd:.3e}, {:.0} s", t.as_secs_f64()),
    )
}

fn window_beats_vanilla() -> Outcome {
    let mut cfg = shipped("siso_mixed_cdl_d.toml");
    cfg.experiment.detectors = vec![DetectorKind::RcRandom, DetectorKind::VanillaEsn];
    cfg.experiment.snr_db = vec![20.0];
    let m = median_ber(&cfg, 20);
    let (wesn, vanilla) = (m[&("RC-Random".to_string(), 20)], m[&("Vanilla-ESN".to_string(), 20)]);
    outcome(wesn < vanilla, format!("median BER windowed {wesn:.3e}, vanilla {vanilla:.3e}"))
}

fn mimo_error_floor() -> Outcome {
    let mut cfg = shipped("mimo_cdl_d.toml");
    cfg.experiment.detectors = vec![DetectorKind::RcTd, DetectorKind::RcFd, DetectorKind::RcRandom];
    cfg.experiment.snr_db = vec![15.0, 30.0];
    let m = median_ber(&cfg, 20);
    let ber = |d: &str, s: i64| m[&(d.to_string(), s)];
    let random_ratio = ber("RC-Random", 30) / ber("RC-Random", 15);
    let mut pass = true;
    let mut detail = format!("random 30/15 dB ratio {random_ratio:.3}");
    for d in ["RC-TD", "RC-FD"] {
        let ratio = ber(d, 30) / ber(d, 15);
        pass &= ratio < random_ratio && ber(d, 30) <= ber("RC-Random", 30);
        detail += &format!("; {d} ratio {ratio:.3}, BER@30 {:.3e} vs random {:.3e}", ber(d, 30), ber("RC-Random", 30));
    }
    outcome(pass, detail)
}

/// Exact Gray 16-QAM bit error rate at symbol SNR `es_n0` (linear).
fn qam16_ber(es_n0: f64) -> f64 {
    let q = |x: f64| 0.5 * erfc(x / std::f64::consts::SQRT_2);
    let x = (es_n0 / 5.0).sqrt();
    (3.0 * q(x) + 2.0 * q(3.0 * x) - q(5.0 * x)) / 4.0
}

fn lmmse_matches_awgn() -> Outcome {
    let num = OfdmNumerology::new(256, 16).unwrap();
    let layout = GridLayout::new(256, SYMBOLS_PER_SLOT, 1, 4, RsMode::Conventional).unwrap();
    let qam = Qam::new(16).unwrap();
    let pdp = PowerDelayProfile::new(vec![0], vec![1.0], None).unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for snr_db in [10.0, 15.0] {
        let (mut bits, mut errors) = (0usize, 0usize);
        let mut es_n0 = Vec::new();
        let mut slot = 0u64;
        while bits < 200_000 {
            let h = sample_tdl(&pdp, &mut stream(41, &[slot])).unwrap();
            let mut rng = stream(42, &[slot]);
            let payload: Vec<u8> = (0..layout.payload_bits(&qam)).map(|_| rng.random_range(0..2u8)).collect();
            let grid = build_grid(layout, &qam, &payload, &mut rng).unwrap();
            let tx = ofdm_modulate(&grid, &num).unwrap().remove(0);
            let (rx, noise_var) = apply_siso(&h, &tx, snr_db, &mut stream(43, &[slot])).unwrap();
            let ch = MimoChannelRealization::from_siso(&h);
            let setup = LmmseSetup {
                correlation: frequency_correlation(&[1.0], 256, 1.0),
                backoff_db: 0.0,
                perfect_csi: Some(&ch),
            };
            let out = lmmse_detect(&[rx], &grid, &num, &qam, noise_var, &setup).unwrap();
            errors += out.iter().zip(&payload).filter(|(a, b)| a != b).count();
            bits += payload.len();
            es_n0.push(h.taps[0].norm_sqr() / noise_var);
            slot += 1;
        }
        let ber = errors as f64 / bits as f64;
        let avg = |offset_db: f64| {
            es_n0.iter().map(|g| qam16_ber(g * 10f64.powf(offset_db / 10.0))).sum::<f64>() / es_n0.len() as f64
        };
        pass &= avg(0.5) <= ber && ber <= avg(-0.5);
        detail.push(format!("{snr_db} dB: BER {ber:.3e} vs analytic {:.3e} over {bits} bits", avg(0.0)));
    }
    outcome(pass, detail.join("; "))
}

fn rclab(args: &[&str], workers: usize) -> Vec<u8> {
    let o = Command::new(env!("CARGO_BIN_EXE_rclab"))
        .args(["--workers", &workers.to_string()])
        .args(args)
        .env_remove("RC_LAB_SEED")
        .output()
        .expect("spawn rclab");
    assert!(o.status.success(), "rclab {args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o.stdout
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    let src = std::fs::read_to_string(root().join("configs/siso_mp_cdl_d.toml")).unwrap();
    let small: Vec<&str> = src
        .lines()
        .map(|l| match l.split(" =").next() {
            Some("n_sc") => "n_sc = 128",
            Some("n_cp") => "n_cp = 16",
            Some("n_slots") => "n_slots = 3",
            Some("snr_db") => "snr_db = [10.0, 20.0]",
            _ => l,
        })
        .collect();
    let small = small.join("\n");
    std::fs::write(&cfg, small).unwrap();
    let cfg = cfg.to_str().unwrap().to_string();

    let mut commands: Vec<(&str, Vec<String>)> = vec![
        ("run-ber", vec!["--config".into(), cfg.clone(), "run-ber".into()]),
        ("validate-theorem", vec!["validate-theorem".into(), "--n".into(), "32".into(), "--nobs".into(), "50".into(), "--m".into(), "1,4,32".into()]),
        ("inspect-channel", vec!["inspect-channel".into(), "--draws".into(), "300".into()]),
        ("configure", vec!["configure".into(), "--domain".into(), "fd".into(), "--n".into(), "64".into(), "--nobs".into(), "100".into()]),
        ("dump-spec", vec!["--config".into(), cfg.clone(), "dump-spec".into(), "--detector".into(), "rc-random".into()]),
    ];
    let mut mismatched = Vec::new();
    for (name, args) in commands.iter_mut() {
        args.splice(0..0, ["--seed".to_string(), "17".to_string()]);
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let runs = [rclab(&args, 1), rclab(&args, 1), rclab(&args, 8)];
        if runs.iter().any(|r| r != &runs[0]) || runs[0].is_empty() {
            mismatched.push(*name);
        }
    }
    let out_dirs: Vec<PathBuf> = (0..3).map(|i| dir.path().join(format!("td{i}"))).collect();
    for (i, d) in out_dirs.iter().enumerate() {
        let args = ["--seed", "17", "--out", d.to_str().unwrap(), "configure", "--n", "64", "--nobs", "100"];
        rclab(&args, if i == 2 { 8 } else { 1 });
    }
    for file in ["spec.csv", "diagnostics.csv"] {
        let bytes: Vec<Vec<u8>> = out_dirs.iter().map(|d| std::fs::read(d.join(file)).unwrap()).collect();
        if bytes.iter().any(|b| b != &bytes[0]) {
            mismatched.push(file);
        }
    }
    let detail = if mismatched.is_empty() {
        "5 commands and 2 output files identical across 2 runs and 1 vs 8 workers".to_string()
    } else {
        format!("differing output: {}", mismatched.join(", "))
    };
    outcome(mismatched.is_empty(), detail)
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("trace identity", trace_identity),
        ("approximation error curves at full scale", error_curves_full_scale),
        ("projection residual equals eigenvalue tail", eigenvalue_tail_identity),
        ("configuration stability and dominance", configuration_invariants),
        ("noiseless exact equalization", noiseless_equalization),
        ("configured reservoirs beat random at 25 dB", configured_beat_random),
        ("windowed ESN beats vanilla on mixed-phase channels", window_beats_vanilla),
        ("MIMO error floor", mimo_error_floor),
        ("LMMSE perfect CSI matches AWGN theory", lmmse_matches_awgn),
        ("CLI determinism", cli_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {}: {name}: {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
