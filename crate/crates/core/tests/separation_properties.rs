use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use rcscme::harness::{noise_source, speech_like, MetricReport, NoiseKind};
use rcscme::linalg::{CMat, C64};
use rcscme::rank1::{back_project, run_ilrma, select_target_channel, DemixingSet, Rank1Model};
use rcscme::scm::noise_scm;
use rcscme::stft::{analyze, FrameConfig, Spectrogram};

const FS: u32 = 4000;

fn energy(spec: &Spectrogram, channel: usize) -> f64 {
    spec.data.index_axis(Axis(2), channel).iter().map(|v| v.norm_sqr()).sum()
}

fn laplacian(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let exp = Exp::new(1.0).unwrap();
    (0..len)
        .map(|_| {
            let v: f64 = exp.sample(rng);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn gaussian(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn stack(channels: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((channels.len(), channels[0].len()), |(c, t)| channels[c][t])
}

#[test]
fn single_active_source_concentrates_in_one_output() {
    let len = 12_000;
    let speech = speech_like(len, FS, 11);
    let signal = stack(&[speech, vec![0.0; len]]);
    let x = analyze(signal.view(), FrameConfig::for_sample_rate(FS)).unwrap();
    let out = run_ilrma(&x, &Rank1Model { n_iterations: 20, ..Default::default() }).unwrap();
    let e: Vec<f64> = (0..2).map(|m| energy(&out.estimates, m)).collect();
    let share = e.iter().cloned().fold(0.0, f64::max) / e.iter().sum::<f64>();
    assert!(share >= 0.99, "largest share {share}");
}

#[test]
fn separated_input_keeps_demixing_near_identity() {
    let len = 16_000;
    let signal = stack(&[speech_like(len, FS, 3), noise_source(NoiseKind::Laplacian, len, 4)]);
    let x = analyze(signal.view(), FrameConfig::for_sample_rate(FS)).unwrap();
    let out = run_ilrma(&x, &Rank1Model { n_iterations: 30, ..Default::default() }).unwrap();
    // Each output draws almost all of its energy from one input channel.
    for r in 0..2 {
        let mut from = [0.0; 2];
        for (i, w) in out.demix.demix.iter().enumerate() {
            for (k, f) in from.iter_mut().enumerate() {
                let p: f64 = x.data.index_axis(Axis(0), i).column(k).iter().map(|v| v.norm_sqr()).sum();
                *f += w[(r, k)].norm_sqr() * p;
            }
        }
        let dominance = from[0].max(from[1]) / (from[0] + from[1]);
        assert!(dominance > 0.9, "output {r}: dominance {dominance}");
    }
    for w in out.cost_history.windows(2) {
        assert!(w[1] <= w[0] + 1e-8 * w[0].abs());
    }
}

#[test]
fn kurtosis_picks_the_heavy_tailed_channel() {
    let cfg = FrameConfig::for_sample_rate(FS);
    let mut hits = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heavy = (seed % 3) as usize;
        let channels: Vec<Vec<f64>> = (0..3)
            .map(|m| if m == heavy { laplacian(8000, &mut rng) } else { gaussian(8000, &mut rng) })
            .collect();
        let spec = analyze(stack(&channels).view(), cfg).unwrap();
        if select_target_channel(&spec).unwrap() == heavy {
            hits += 1;
        }
    }
    assert!(hits >= 95, "{hits}/100");
}

#[test]
fn zero_estimates_back_project_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let demix: Vec<CMat> = (0..3)
        .map(|_| CMat::from_fn(2, |r, c| C64::new(StandardNormal.sample(&mut rng), 0.0) + if r == c { C64::new(3.0, 0.0) } else { C64::new(0.0, 0.0) }))
        .collect();
    let set = DemixingSet::from_demix(demix).unwrap();
    let spec = Spectrogram {
        data: Array3::zeros((3, 4, 2)),
        config: FrameConfig::default(),
        n_samples: 0,
    };
    let out = back_project(&spec, &set, &[0, 1]).unwrap();
    assert!(out.data.iter().all(|v| *v == C64::new(0.0, 0.0)));
}

fn random_scm_case(seed: u64) -> (Spectrogram, DemixingSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = || C64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
    let x = Spectrogram {
        data: Array3::from_shape_fn((3, 20, 3), |_| c()),
        config: FrameConfig::default(),
        n_samples: 0,
    };
    let demix = (0..3).map(|_| CMat::from_fn(3, |_, _| c())).collect();
    (x, DemixingSet::from_demix(demix).unwrap())
}

#[test]
fn noise_scm_ignores_frame_phases() {
    let (x, demix) = random_scm_case(6);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut rotated = x.data.clone();
    for mut frame in rotated.lanes_mut(Axis(2)) {
        let phase = C64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU));
        frame.mapv_inplace(|v| v * phase);
    }
    let a = noise_scm(&x, &demix, 1).unwrap();
    let b = noise_scm(&x.with_data(rotated), &demix, 1).unwrap();
    for (p, q) in a.r_prime.iter().zip(&b.r_prime) {
        assert!(p.max_abs_diff(q) <= 1e-12 * p.frobenius());
    }
}

#[test]
fn noise_scm_is_psd_with_the_target_removed() {
    for seed in 0..10 {
        let (x, demix) = random_scm_case(seed);
        let target = (seed % 3) as usize;
        let bundle = noise_scm(&x, &demix, target).unwrap();
        for i in 0..3 {
            assert_eq!(bundle.steering[i], demix.mixing[i].column(target));
            let r = &bundle.r_prime[i];
            assert!(r.trace().re >= 0.0);
            let u = &bundle.null_vector[i];
            let ru = r.mul_vec(u);
            let residual = ru.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            assert!(residual <= 1e-9 * r.frobenius(), "residual {residual}");
            assert!(bundle.sigma_min_pos[i] > 0.0);
            // The null direction is orthogonal to every kept steering vector.
            for m in (0..3).filter(|&m| m != target) {
                let a = demix.mixing[i].column(m);
                let proj: C64 = u.iter().zip(&a).map(|(u, a)| u.conj() * a).sum();
                assert!(proj.norm() <= 1e-9 * a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt());
            }
        }
    }
}

#[test]
fn iteration_zero_only_series_has_peak_at_zero() {
    let report = MetricReport::from_series(1.0, &[(0, 4.0)]).unwrap();
    assert_eq!(report.peak_iteration(), 0);
    assert_eq!(report.peak_improvement_db(), report.final_improvement_db());
    let rising = MetricReport::from_series(0.0, &[(0, 1.0), (1, 2.0), (2, 3.0)]).unwrap();
    assert_eq!(rising.peak_iteration(), 2);
    assert_eq!(rising.peak_improvement_db(), rising.final_improvement_db());
}
