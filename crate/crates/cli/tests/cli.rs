use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array2;
use rcscme::harness::sdr;
use rcscme::wav::{read_wav, write_wav, Audio, WavEncoding};
use tempfile::TempDir;

const SMALL_SCENE: &str = "\
[scene]
sample_rate = 8000
duration_s = 2.0

[em]
iterations = 15
";

fn rcscme(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcscme")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, body).unwrap();
    path
}

fn simulate(dir: &Path, config: &Path, seed: u64) -> PathBuf {
    let out = dir.join(format!("scene{seed}"));
    ok(&rcscme(&["simulate", "--config", s(config), "--seed", &seed.to_string(), "-o", s(&out)]));
    out
}

fn write_audio(path: &Path, samples: Array2<f64>, sample_rate: u32) {
    write_wav(path, &Audio { samples, sample_rate }, WavEncoding::Float32).unwrap();
}

#[test]
fn mono_input_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("mono.wav");
    write_audio(&input, Array2::from_shape_fn((1, 4000), |(_, t)| (t as f64 * 0.05).sin()), 8000);
    let out = rcscme(&["extract", s(&input), "-o", s(&dir.path().join("out.wav"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn silent_input_is_a_numerical_failure() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("zero.wav");
    write_audio(&input, Array2::zeros((2, 16_000)), 8000);
    let out = rcscme(&["extract", s(&input), "-o", s(&dir.path().join("out.wav"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_configuration_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "[em]\nalpah = 1.0\n");
    assert_eq!(rcscme(&["simulate", "--config", s(&cfg), "-o", s(dir.path())]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "[em]\nvariant = \"other\"\n");
    let input = dir.path().join("in.wav");
    write_audio(&input, Array2::from_shape_fn((2, 8000), |(c, t)| ((t + c) as f64 * 0.1).sin()), 8000);
    let out = rcscme(&["extract", s(&input), "--config", s(&cfg), "-o", s(&dir.path().join("o.wav"))]);
    assert_eq!(out.status.code(), Some(2));
    let missing = rcscme(&["extract", s(&dir.path().join("nope.wav")), "-o", s(&dir.path().join("o.wav"))]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(rcscme(&["extract"]).status.code(), Some(2));
}

#[test]
fn simulate_writes_three_matching_wavs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL_SCENE);
    let scene = simulate(dir.path(), &cfg, 3);
    let files: Vec<Audio> = ["mixture.wav", "target_ref.wav", "noise_ref.wav"]
        .iter()
        .map(|n| read_wav(scene.join(n)).unwrap())
        .collect();
    for a in &files {
        assert_eq!(a.samples.dim(), (3, 16_000));
        assert_eq!(a.sample_rate, 8000);
    }
    let power = |a: &Audio| a.samples.iter().map(|v| v * v).sum::<f64>();
    // 0 dB scene; f32 storage limits the precision of the ratio.
    assert!((power(&files[1]) / power(&files[2]) - 1.0).abs() < 1e-4);

    let again = simulate(dir.path(), &cfg, 3);
    assert_eq!(fs::read(scene.join("mixture.wav")).unwrap(), fs::read(again.join("mixture.wav")).unwrap());
    let other = simulate(dir.path(), &cfg, 4);
    assert_ne!(fs::read(scene.join("mixture.wav")).unwrap(), fs::read(other.join("mixture.wav")).unwrap());
}

#[test]
fn extract_is_deterministic_and_reports() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL_SCENE);
    let scene = simulate(dir.path(), &cfg, 1);
    let mix = scene.join("mixture.wav");
    let (a, b) = (dir.path().join("a.wav"), dir.path().join("b.wav"));
    let diag = dir.path().join("diag.csv");
    ok(&rcscme(&["extract", s(&mix), "--config", s(&cfg), "-o", s(&a), "--diagnostics", s(&diag)]));
    ok(&rcscme(&["extract", s(&mix), "--config", s(&cfg), "-o", s(&b)]));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let out = read_wav(&a).unwrap();
    assert_eq!(out.samples.dim(), (1, 16_000));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.with_extension("json")).unwrap()).unwrap();
    assert_eq!(report["iterations"], 15);
    assert_eq!(report["variant"], "proposed");
    assert!(report["target_index"].as_u64().unwrap() < 3);
    assert!(report["diagnostics"]["min_noise_eigenvalue"].as_f64().unwrap() > 0.0);
    let lines: Vec<String> = fs::read_to_string(&diag).unwrap().lines().map(String::from).collect();
    assert_eq!(lines[0], "iteration,q_value,map_objective,min_eigenvalue");
    assert_eq!(lines.len(), 1 + 16);

    let full = dir.path().join("full.wav");
    ok(&rcscme(&["extract", s(&mix), "--config", s(&cfg), "--variant", "conventional", "--full-image", "-o", s(&full)]));
    assert_eq!(read_wav(&full).unwrap().samples.nrows(), 3);
}

#[test]
fn noiseless_two_channel_input_is_recovered() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "[scene]\nsample_rate = 8000\nduration_s = 2.0\nn_mics = 2\nsnr_db = 120.0\n\n[em]\niterations = 15\n",
    );
    let scene = simulate(dir.path(), &cfg, 0);
    let out = dir.path().join("out.wav");
    ok(&rcscme(&["extract", s(&scene.join("mixture.wav")), "--config", s(&cfg), "-o", s(&out)]));
    let est = read_wav(&out).unwrap();
    let input = read_wav(scene.join("mixture.wav")).unwrap();
    let score = sdr(&est.samples.row(0).to_vec(), &input.samples.row(0).to_vec()).unwrap();
    assert!(score >= 30.0, "SDR {score:.2} dB");
}

#[test]
fn evaluate_single_and_batch() {
    let dir = TempDir::new().unwrap();
    let make = |name: &str, seed: u64| {
        let p = dir.path().join(name);
        write_audio(&p, Array2::from_shape_fn((1, 4000), |(_, t)| ((t as f64 + seed as f64) * 0.013).sin() + 0.1 * seed as f64), 8000);
        p
    };
    let r = make("ref.wav", 1);
    let out = rcscme(&["evaluate", s(&r), s(&r)]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1], "100.0000");

    let (est_dir, ref_dir) = (dir.path().join("est"), dir.path().join("ref"));
    fs::create_dir_all(&est_dir).unwrap();
    fs::create_dir_all(&ref_dir).unwrap();
    for k in 0..3u64 {
        let name = format!("item{k}.wav");
        let sig = |noise: f64| Array2::from_shape_fn((1, 4000), |(_, t)| (t as f64 * 0.02 * (k + 1) as f64).sin() + noise * ((t * 7919 % 97) as f64 / 97.0 - 0.5));
        write_audio(&ref_dir.join(&name), sig(0.0), 8000);
        write_audio(&est_dir.join(&name), sig(0.3), 8000);
    }
    let csv = dir.path().join("scores.csv");
    ok(&rcscme(&["evaluate", s(&est_dir), s(&ref_dir), "-o", s(&csv)]));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[4].starts_with("mean,"));
    let vals: Vec<f64> = lines[1..4].iter().map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let mean: f64 = lines[4].split(',').nth(1).unwrap().parse().unwrap();
    assert!((mean - vals.iter().sum::<f64>() / 3.0).abs() < 1e-3);

    let short = dir.path().join("short.wav");
    write_audio(&short, Array2::zeros((1, 100)), 8000);
    assert_eq!(rcscme(&["evaluate", s(&short), s(&r)]).status.code(), Some(2));
}

#[test]
fn bench_prints_peak_final_table() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "[scene]\nsample_rate = 8000\nduration_s = 1.5\n\n[grid]\ndirections_deg = [40.0]\n\n[em]\niterations = 10\n",
    );
    let curves = dir.path().join("curves.csv");
    let out = rcscme(&["bench", "--config", s(&cfg), "--seeds", "2", "-o", s(&curves)]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2 + 3, "{text}");
    assert!(lines[0].contains("peak / final"));
    assert!(lines[2].starts_with("ILRMA") && lines[2].trim_end().ends_with("/ -"));
    assert!(lines[3].starts_with("Conventional"));
    assert!(lines[4].starts_with("Proposed"));
    for l in &lines[3..] {
        let cells: Vec<&str> = l.split('|').nth(1).unwrap().split('/').collect();
        assert_eq!(cells.len(), 2);
        assert!(cells.iter().all(|c| c.trim().parse::<f64>().is_ok()));
    }
    let rows = fs::read_to_string(&curves).unwrap();
    // 2 seeds x 2 variants x 11 points
    assert_eq!(rows.lines().count(), 1 + 2 * 2 * 11);
}

#[test]
fn thread_count_must_be_a_positive_integer() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rcscme"))
        .args(["simulate", "-o", s(dir.path())])
        .env("RCSCME_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
