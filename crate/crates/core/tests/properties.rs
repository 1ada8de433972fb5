use kdselect_core::losses::{ce_loss, infonce_loss, pisl_loss, soft_label, SoftLabel};
use kdselect_core::metrics::{argmax, auc_pr, PerformanceVector};
use kdselect_core::model::{clip_global_norm, softmax, EncoderKind, ModelConfig, SelectorModel};
use kdselect_core::prune::{equi_depth_bins, plan_pa, LossLedger, LshIndex};
use proptest::prelude::*;

fn perf_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u32..=100).prop_map(|v| v as f64 / 100.0), 2..8)
}

proptest! {
    #[test]
    fn soft_label_is_a_distribution_with_same_argmax(perf in perf_strategy(), t in 0.05f64..2.0) {
        let s = soft_label(&PerformanceVector::new(perf.clone()), t);
        prop_assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(s.probs.iter().all(|&p| p >= 0.0));
        prop_assert_eq!(argmax(&s.probs), argmax(&perf));
    }

    #[test]
    fn pisl_with_onehot_is_ce(logits in prop::collection::vec(-5.0f64..5.0, 2..8), pick in 0usize..8) {
        let y = pick % logits.len();
        let probs = softmax(&logits);
        let mut onehot = vec![0.0; logits.len()];
        onehot[y] = 1.0;
        prop_assert_eq!(pisl_loss(&probs, &SoftLabel { probs: onehot }), ce_loss(&probs, y));
    }

    #[test]
    fn pisl_is_at_least_target_entropy(logits in prop::collection::vec(-5.0f64..5.0, 3), raw in prop::collection::vec(-5.0f64..5.0, 3)) {
        let soft = SoftLabel { probs: softmax(&raw) };
        let at_target = pisl_loss(&soft.probs, &soft).loss;
        prop_assert!(pisl_loss(&softmax(&logits), &soft).loss >= at_target - 1e-12);
    }

    #[test]
    fn infonce_bounds(n in 2usize..7, v in prop::collection::vec(-3.0f64..3.0, 4)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let same = vec![v.clone(); n];
        let loss = infonce_loss(&same, &same, 0.1, None).unwrap().loss;
        prop_assert!(loss >= 0.0);
        prop_assert!(loss <= (n as f64).ln() + 1e-9);
        prop_assert!((loss - (n as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn infonce_nonnegative(u in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..6), seed in 0u64..1000) {
        let v: Vec<Vec<f64>> = u.iter().enumerate().map(|(i, x)| x.iter().map(|a| a * ((i as u64 + seed) % 3) as f64 - 1.0).collect()).collect();
        let out = infonce_loss(&u, &v, 0.1, None).unwrap();
        prop_assert!(out.loss >= 0.0);
    }

    #[test]
    fn clipped_norm_respects_bound(scale in 0.0f64..1e4, bound in 0.01f64..10.0, seed in 0u64..50) {
        let model = SelectorModel::new(ModelConfig { encoder: EncoderKind::Mlp, window: 6, n_classes: 3, text_dim: 2, proj_dim: 2, proj_hidden: 3, mlp_hidden: vec![4], conv_channels: vec![2], conv_kernel: 3 }, seed).unwrap();
        let mut g = model.params.clone();
        g.scale(scale);
        clip_global_norm(&mut g, bound);
        prop_assert!(g.global_norm() <= bound + 1e-9);
    }

    #[test]
    fn auc_pr_invariant_under_monotone_maps(scores in prop::collection::vec(-10.0f64..10.0, 1..60), seed in any::<u64>()) {
        let labels: Vec<u8> = (0..scores.len()).map(|i| u8::from((seed >> (i % 64)) & 1 == 1 || i == 0)).collect();
        let a = auc_pr(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (s * 0.5).exp() + 3.0).collect();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        prop_assert!((a - auc_pr(&mapped, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn lsh_code_is_scale_invariant(x in prop::collection::vec(-5.0f64..5.0, 8), c in 0.01f64..100.0) {
        let idx = LshIndex::build(std::slice::from_ref(&x), 14, 3).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
        prop_assert_eq!(idx.code(&x), idx.code(&scaled));
    }

    #[test]
    fn pa_factors_and_singletons(losses in prop::collection::vec(0.0f64..5.0, 1..80), codes in prop::collection::vec(0u64..4, 80), r in 0.0f64..0.95, p in 1usize..9, seed in any::<u64>()) {
        let n = losses.len();
        let ledger = LossLedger::from_losses(&losses);
        let lsh = LshIndex { bits: 2, hyperplanes: Vec::new(), codes: codes[..n].to_vec() };
        let plan = plan_pa(&ledger, &lsh, r, p, 1, seed).unwrap();
        let global = ledger.global_mean();
        let boosted = 1.0 / (1.0 - r);
        for i in 0..n {
            match plan.buckets[i] {
                Some(key) => {
                    let size = plan.buckets.iter().filter(|b| **b == Some(key)).count();
                    if size == 1 {
                        prop_assert_eq!(plan.factors[i], Some(1.0));
                    } else if let Some(f) = plan.factors[i] {
                        prop_assert_eq!(f, boosted);
                    }
                }
                None => {
                    prop_assert!(ledger.mean(i) < global);
                    if let Some(f) = plan.factors[i] {
                        prop_assert_eq!(f, boosted);
                    }
                }
            }
        }
        prop_assert_eq!(plan.stats.n_kept + plan.stats.n_pruned_low + plan.stats.n_pruned_bucket, n);
    }

    #[test]
    fn bins_never_split_ties(values in prop::collection::vec((0u32..6).prop_map(f64::from), 0..50), p in 1usize..9) {
        let mut v = values;
        v.sort_by(f64::total_cmp);
        let bins = equi_depth_bins(&v, p);
        for k in 1..v.len() {
            if v[k] == v[k - 1] {
                prop_assert_eq!(bins[k], bins[k - 1]);
            }
        }
    }
}
