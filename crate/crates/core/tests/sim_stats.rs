//! Statistical checks of the Monte Carlo against closed-form expectations.

use qkdnet::analyzer::AnalyzerMap;
use qkdnet::keyrate::table_from_tags;
use qkdnet::rng::SeedSpec;
use qkdnet::sim::{
    analytic_rates, apply_dead_time, events_to_stream, simulate_events, simulate_run, ArmParams, LinkPhysics,
    SourceParams,
};
use qkdnet::state::{PolarizationOutcome, TwoQubitState};
use qkdnet::timetag::{histogram2d, offset_histogram, Party, TagRecord, TagStream};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn link(mu: f64, state: TwoQubitState, alice: ArmParams, bob: ArmParams) -> LinkPhysics {
    LinkPhysics {
        source: SourceParams::new(mu, state),
        alice,
        bob,
        analyzer: AnalyzerMap::default(),
    }
}

fn lossless(jitter_s: f64) -> ArmParams {
    ArmParams {
        jitter_sigma_s: jitter_s,
        ..ArmParams::default()
    }
}

fn z(observed: u64, expected: f64) -> f64 {
    (observed as f64 - expected) / expected.sqrt()
}

#[test]
fn singles_and_pairs_match_analytic_rates_with_darks() {
    let mut alice = ArmParams::with_loss(10.0);
    alice.dark_rate_hz = 2e4;
    let mut bob = ArmParams::with_loss(13.0);
    bob.dark_rate_hz = 5e4;
    let phys = link(0.02, TwoQubitState::colored_noise(0.95).unwrap(), alice, bob);
    let t = 2.0;
    let s = simulate_run(&phys, t, SeedSpec::new(11)).unwrap();
    let r = analytic_rates(&phys);
    assert!(z(s.count(Party::A) as u64, r.singles_a_hz * t).abs() < 3.0);
    assert!(z(s.count(Party::B) as u64, r.singles_b_hz * t).abs() < 3.0);
    let pairs = histogram2d(&s, &s).unwrap().total;
    assert!(r.pair_events_hz() * t > 1e4);
    assert!(z(pairs, r.pair_events_hz() * t).abs() < 3.0, "z = {}", z(pairs, r.pair_events_hz() * t));
}

#[test]
fn outcome_frequencies_converge_to_joint_distribution() {
    // Lossless and noiseless: any pulse with two or more pairs gives both
    // parties several events and is dropped, so every counted coincidence
    // is a single pair measured by the analyzers.
    let state = TwoQubitState::colored_noise(0.8).unwrap();
    let phys = link(0.01, state.clone(), lossless(0.0), lossless(0.0));
    let s = simulate_run(&phys, 0.15, SeedSpec::new(5)).unwrap();
    let (table, discarded) = table_from_tags(&s, &s, &phys.analyzer).unwrap();
    assert_eq!(discarded, [0, 0]);
    let n = table.total() as f64;
    assert!(n >= 1e5, "{n} coincidences");
    let mut chi2 = 0.0;
    for a in PolarizationOutcome::ALL {
        for b in PolarizationOutcome::ALL {
            let e = n * state.joint_probability(a, b);
            let o = table.get(a, b) as f64;
            chi2 += (o - e).powi(2) / e;
        }
    }
    let critical = ChiSquared::new(15.0).unwrap().inverse_cdf(0.999);
    assert!(chi2 < critical, "χ² = {chi2:.1}, critical {critical:.1}");
}

#[test]
fn psi_plus_without_noise_has_no_errors() {
    let phys = link(0.01, TwoQubitState::psi_plus(), lossless(0.0), lossless(0.0));
    let s = simulate_run(&phys, 0.02, SeedSpec::new(1)).unwrap();
    let (t, _) = table_from_tags(&s, &s, &phys.analyzer).unwrap();
    use PolarizationOutcome::*;
    assert!(t.total() > 1000);
    assert_eq!(t.get(H, H) + t.get(V, V) + t.get(D, A) + t.get(A, D), 0);
}

#[test]
fn dead_time_never_adds_events() {
    let mut arm = ArmParams::with_loss(3.0);
    arm.dark_rate_hz = 1e5;
    let phys = link(0.1, TwoQubitState::psi_plus(), arm, arm);
    let events = simulate_events(&phys, 0..2_000_000, SeedSpec::new(9)).unwrap();
    let period = phys.header().sync_period_ps();
    let mut last = events.len();
    for dead_ns in [1.0, 10.0, 50.0, 200.0, 1000.0] {
        let mut e = events.clone();
        apply_dead_time(&mut e, period, [dead_ns * 1e3; 2]);
        assert!(e.len() <= last);
        last = e.len();
    }
    assert!(last < events.len());

    let mut slow = phys.clone();
    slow.alice.dead_time_s = 100e-9;
    slow.bob.dead_time_s = 100e-9;
    let fewer = simulate_events(&slow, 0..2_000_000, SeedSpec::new(9)).unwrap();
    assert!(fewer.len() < events.len());
}

#[test]
fn runs_are_reproducible_and_independent_of_range_and_threads() {
    let mut arm = ArmParams::with_loss(5.0);
    arm.dark_rate_hz = 1e4;
    let phys = link(0.05, TwoQubitState::werner(0.9).unwrap(), arm, arm);
    let seed = SeedSpec::for_link(42, 3);
    let n = 3 * (1 << 24) + 12345;
    let full = simulate_events(&phys, 0..n, seed).unwrap();
    assert_eq!(full, simulate_events(&phys, 0..n, seed).unwrap());

    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    assert_eq!(full, pool.install(|| simulate_events(&phys, 0..n, seed)).unwrap());

    // Jitter can move a click into a neighbouring pulse, so compare away
    // from the cut.
    let (lo, hi) = (20_000_000, 40_000_000);
    let part = simulate_events(&phys, lo..hi, seed).unwrap();
    let inner = |e: &&qkdnet::sim::DetectionEvent| e.sync_index > lo + 1 && e.sync_index + 1 < hi;
    let a: Vec<_> = full.iter().filter(inner).collect();
    let b: Vec<_> = part.iter().filter(inner).collect();
    assert!(!a.is_empty());
    assert_eq!(a, b);

    let other = simulate_events(&phys, 0..n, SeedSpec::for_link(42, 4)).unwrap();
    assert_ne!(full, other);
}

/// Probability a click jittered around `center_ps` lands in a 64-ps bin whose
/// center lies inside the 1-ns slot.
fn capture_oracle(center_ps: f64, sigma_ps: f64) -> f64 {
    let cdf = |x: f64| 0.5 * (1.0 + libm::erf((x - center_ps) / (sigma_ps * std::f64::consts::SQRT_2)));
    (0..200)
        .map(|k| k as f64 * 64.0)
        .filter(|lo| (center_ps - 500.0..center_ps + 500.0).contains(&(lo + 32.0)))
        .map(|lo| cdf(lo + 64.0) - cdf(lo))
        .sum()
}

#[test]
fn discarded_fraction_follows_gaussian_tails() {
    let analyzer = AnalyzerMap::default();
    let mut last = -1.0;
    for sigma_ps in [50.0, 150.0, 250.0, 400.0] {
        let arm = lossless(sigma_ps * 1e-12);
        let phys = link(0.005, TwoQubitState::psi_plus(), arm, arm);
        let s = simulate_run(&phys, 0.05, SeedSpec::new(2)).unwrap();
        let (_, discarded) = table_from_tags(&s, &s, &phys.analyzer).unwrap();
        let n = s.count(Party::A) as f64;
        let frac = discarded[0] as f64 / n;
        // Every outcome is equally likely for one party of Ψ⁺.
        let tail = 1.0
            - PolarizationOutcome::ALL
                .iter()
                .map(|&o| capture_oracle(analyzer.center_ps(o), sigma_ps))
                .sum::<f64>()
                / 4.0;
        let sd = (tail * (1.0 - tail) / n).sqrt();
        assert!(frac >= last, "σ = {sigma_ps} ps: {frac} < {last}");
        assert!((frac - tail).abs() <= 4.0 * sd + 1e-9, "σ = {sigma_ps} ps: {frac} vs {tail} ± {sd}");
        last = frac;
    }
    assert!(last > 0.1);
}

/// Keep only pulses in which neither party has more than one event.
fn single_event_pulses(s: &TagStream) -> TagStream {
    let rec = s.records();
    let mut keep = Vec::new();
    let mut i = 0;
    while i < rec.len() {
        let mut j = i;
        while j < rec.len() && rec[j].sync_index() == rec[i].sync_index() {
            j += 1;
        }
        let group = &rec[i..j];
        let na = group.iter().filter(|r| r.party() == Party::A).count();
        let nb = group.len() - na;
        if na <= 1 && nb <= 1 {
            keep.extend_from_slice(group);
        }
        i = j;
    }
    TagStream::new(*s.header(), keep).unwrap()
}

#[test]
fn histogram_marginals_and_boxes_match_tables() {
    let arm = ArmParams::with_loss(3.0);
    let phys = link(0.02, TwoQubitState::colored_noise(0.9).unwrap(), arm, arm);
    let s = single_event_pulses(&simulate_run(&phys, 0.02, SeedSpec::new(8)).unwrap());
    let hist = histogram2d(&s, &s).unwrap();

    let sync_of = |p: Party| -> Vec<u64> { s.party(p).map(|r: TagRecord| r.sync_index()).collect() };
    let (sa, sb) = (sync_of(Party::A), sync_of(Party::B));
    let both: Vec<u64> = sa.iter().copied().filter(|x| sb.binary_search(x).is_ok()).collect();
    assert!(both.len() > 1000);
    assert_eq!(hist.marginal_a(), offset_histogram(&s, Party::A, Some(&both)));
    assert_eq!(hist.marginal_b(), offset_histogram(&s, Party::B, Some(&both)));

    let (table, _) = table_from_tags(&s, &s, &phys.analyzer).unwrap();
    let mut boxes = 0;
    for a in PolarizationOutcome::ALL {
        for b in PolarizationOutcome::ALL {
            let n = hist.box_sum(&phys.analyzer, a, b);
            assert_eq!(n, table.get(a, b));
            boxes += n;
        }
    }
    assert_eq!(boxes, table.total());
}

#[test]
fn stream_quantization_keeps_order() {
    let arm = ArmParams::with_loss(1.0);
    let phys = link(0.05, TwoQubitState::psi_plus(), arm, arm);
    let events = simulate_events(&phys, 0..100_000, SeedSpec::new(3)).unwrap();
    let s = events_to_stream(phys.header(), &events).unwrap();
    assert_eq!(s.len(), events.len());
}
