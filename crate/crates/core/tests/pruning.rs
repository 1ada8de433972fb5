use kdselect_core::prune::{equi_depth_bins, plan_infobatch, plan_pa, LossLedger, LshIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ledger_and_codes(n: usize, seed: u64) -> (Vec<f64>, LshIndex) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..3.0f64).powi(2)).collect();
    // few distinct codes so that many high-loss buckets hold several samples
    let codes: Vec<u64> = (0..n).map(|_| rng.random_range(0..6)).collect();
    let lsh = LshIndex {
        bits: 3,
        hyperplanes: Vec::new(),
        codes,
    };
    (losses, lsh)
}

#[test]
fn rescaled_total_is_unbiased() {
    let (losses, lsh) = ledger_and_codes(300, 1);
    let ledger = LossLedger::from_losses(&losses);
    let full: f64 = losses.iter().sum();
    for r in [0.5, 0.8] {
        let draws = 10_000;
        let (mut ib, mut pa) = (0.0, 0.0);
        for d in 0..draws {
            ib += plan_infobatch(&ledger, r, 1, d).unwrap().rescaled_total(&losses);
            pa += plan_pa(&ledger, &lsh, r, 8, 1, d).unwrap().rescaled_total(&losses);
        }
        let (ib, pa) = (ib / draws as f64, pa / draws as f64);
        assert!((ib - full).abs() / full < 0.01, "infobatch r={r}: {ib} vs {full}");
        assert!((pa - full).abs() / full < 0.01, "pa r={r}: {pa} vs {full}");
    }
}

#[test]
fn low_loss_keep_count_is_binomial() {
    // 10k low-loss samples and one huge one pulling the mean up
    let mut losses = vec![0.1; 10_000];
    losses.push(1e6);
    let ledger = LossLedger::from_losses(&losses);
    let plan = plan_infobatch(&ledger, 0.8, 1, 5).unwrap();
    let kept_low = plan.kept.len() - 1;
    let sigma = (10_000.0f64 * 0.2 * 0.8).sqrt();
    assert!((kept_low as f64 - 2000.0).abs() < 3.0 * sigma, "{kept_low}");
    assert!(plan.kept.iter().filter(|&&i| i < 10_000).all(|&i| (plan.factors[i].unwrap() - 5.0).abs() < 1e-12));
}

#[test]
fn duplicate_bucket_keeps_a_fifth() {
    // k identical high-loss samples beside low-loss ones
    let k = 5_000;
    let mut losses = vec![2.0; k];
    losses.extend(vec![0.1; 1000]);
    let ledger = LossLedger::from_losses(&losses);
    let lsh = LshIndex {
        bits: 14,
        hyperplanes: Vec::new(),
        codes: vec![7; losses.len()],
    };
    let plan = plan_pa(&ledger, &lsh, 0.8, 8, 1, 3).unwrap();
    let kept_dup = plan.kept.iter().filter(|&&i| i < k).count();
    let sigma = (k as f64 * 0.2 * 0.8).sqrt();
    assert!((kept_dup as f64 - 0.2 * k as f64).abs() < 3.0 * sigma, "{kept_dup}");
    assert!(plan.kept.iter().filter(|&&i| i < k).all(|&i| (plan.factors[i].unwrap() - 5.0).abs() < 1e-12));
    // all ties share one bin, hence one bucket
    assert_eq!(plan.stats.n_buckets_multi, 1);
}

#[test]
fn pa_keeps_fewer_in_expectation() {
    let (losses, lsh) = ledger_and_codes(400, 2);
    let ledger = LossLedger::from_losses(&losses);
    let draws = 2000;
    let (mut ib, mut pa) = (0usize, 0usize);
    for d in 0..draws {
        let a = plan_infobatch(&ledger, 0.5, 1, d).unwrap();
        let b = plan_pa(&ledger, &lsh, 0.5, 8, 1, d).unwrap();
        assert!(b.kept.iter().all(|i| a.kept.binary_search(i).is_ok()));
        ib += a.kept.len();
        pa += b.kept.len();
    }
    assert!(pa < ib, "{pa} !< {ib}");
}

#[test]
fn bins_balanced_for_distinct_values() {
    for n in 0..60 {
        for p in 1..10 {
            let values: Vec<f64> = (0..n).map(f64::from).collect();
            let bins = equi_depth_bins(&values, p);
            let mut sizes = vec![0usize; p];
            bins.iter().for_each(|&b| sizes[b] += 1);
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            assert!(hi - lo <= 1, "n={n} p={p} {sizes:?}");
            assert!(bins.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
