use pwc_moe::channel::{self, ChannelParams};
use pwc_moe::RngStream;

const DRAWS: usize = 1_000_000;

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[test]
fn shadowing_db_moments() {
    let mut rng = RngStream::new(11, "shadowing");
    let db: Vec<f64> = (0..DRAWS)
        .map(|_| channel::linear_to_db(channel::sample_shadowing(&mut rng, 7.8)))
        .collect();
    let (mean, std) = mean_std(&db);
    assert!(mean.abs() < 0.05, "mean {mean}");
    assert!((std - 7.8).abs() < 0.05, "std {std}");
}

#[test]
fn fading_mean_and_median() {
    let mut rng = RngStream::new(11, "fading");
    let mut chi: Vec<f64> = (0..DRAWS).map(|_| channel::sample_fading(&mut rng)).collect();
    assert!(chi.iter().all(|&c| c >= 0.0));
    let (mean, _) = mean_std(&chi);
    chi.sort_by(f64::total_cmp);
    let median = chi[DRAWS / 2];
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    assert!((median - std::f64::consts::LN_2).abs() < 0.01, "median {median}");
}

#[test]
fn median_budget_non_increasing_in_distance() {
    let base = ChannelParams::default();
    let mut last = u64::MAX;
    for d in [50.0, 100.0, 200.0, 400.0] {
        let mut rng = RngStream::new(3, "channel");
        let m = channel::median_budget(&base.with_distance(d), &mut rng, 100_000).unwrap();
        assert!(m <= last, "median m_ul rose from {last} to {m} at {d} m");
        last = m;
    }
}

#[test]
fn monotone_in_frequency_distance_payload_and_snr() {
    let mut prev = f64::NEG_INFINITY;
    for f in [0.5, 1.0, 2.4, 5.0, 28.0] {
        let pl = channel::path_loss(f, 100.0).unwrap();
        assert!(pl > prev);
        prev = pl;
    }
    let mut prev = f64::NEG_INFINITY;
    for d in [1.0, 10.0, 100.0, 1000.0] {
        let pl = channel::path_loss(2.4, d).unwrap();
        assert!(pl > prev);
        prev = pl;
    }
    let mut prev = u64::MAX;
    for b in [256.0, 512.0, 1024.0, 2048.0] {
        let m = channel::token_budget(5e7, 0.1, b);
        assert!(m <= prev);
        prev = m;
    }
    let mut prev = -1.0;
    for s in [0.0, 0.5, 1.0, 10.0, 1000.0] {
        let r = channel::rate(s, 1e7);
        assert!(r > prev);
        prev = r;
    }
}
