use ldpp::analysis::{clustering_quality, project_2d};
use ldpp::models::{mix_latent, Codebook, LatentPolicy, PolicyDistribution};
use ldpp::selfplay::{compute_metrics, EpisodeLog, EpisodeStatus};
use ldpp::tensor::Tensor;
use proptest::prelude::*;

fn dist(k: usize) -> impl Strategy<Value = PolicyDistribution> {
    prop::collection::vec(0.0f64..10.0, k).prop_filter_map("all zero", |w| {
        let total: f64 = w.iter().sum();
        (total > 1e-9).then(|| PolicyDistribution::new(w.iter().map(|x| x / total).collect()).unwrap())
    })
}

fn log(final_reward: f64, num_turns: usize) -> EpisodeLog {
    EpisodeLog {
        case_id: String::new(),
        turns: vec![],
        turn_rewards: vec![final_reward],
        success: final_reward > 0.6,
        num_turns,
        final_reward,
        seed: 0,
        policy_trace: vec![],
        status: EpisodeStatus::Completed,
        error: None,
    }
}

proptest! {
    #[test]
    fn mixture_stays_in_the_codebook_box(rows in prop::collection::vec(-3.0f64..3.0, 5 * 3), p in dist(5)) {
        let cb = Codebook::new(Tensor::from_vec(5, 3, rows).unwrap()).unwrap();
        let z = mix_latent(&cb, &p).unwrap();
        let total: f64 = p.probs().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for j in 0..3 {
            let col: Vec<f64> = (0..5).map(|k| cb.row(k)[j]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(z.vector[j] >= lo - 1e-9 && z.vector[j] <= hi + 1e-9);
        }
    }

    #[test]
    fn nmi_ignores_label_names(pred in prop::collection::vec(0usize..6, 2..200), shift in 1usize..6) {
        let truth: Vec<usize> = pred.iter().enumerate().map(|(i, p)| (p + i) % 4).collect();
        let renamed: Vec<usize> = pred.iter().map(|p| (p + shift) % 6 + 10).collect();
        let a = clustering_quality(&pred, &truth).unwrap();
        let b = clustering_quality(&renamed, &truth).unwrap();
        prop_assert!((a.nmi - b.nmi).abs() < 1e-12);
        prop_assert!((a.purity - b.purity).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&a.nmi));
    }

    #[test]
    fn success_rate_falls_as_threshold_rises(
        rewards in prop::collection::vec(-1.0f64..1.0, 1..40),
        lo in -1.0f64..1.0,
        gap in 0.0f64..1.0,
    ) {
        let logs: Vec<EpisodeLog> = rewards.iter().map(|&r| log(r, 3)).collect();
        let a = compute_metrics(&logs, lo).unwrap();
        let b = compute_metrics(&logs, lo + gap).unwrap();
        prop_assert!(b.sr <= a.sr);
        prop_assert_eq!(a.ssr, b.ssr);
    }

    #[test]
    fn projection_follows_input_order(
        data in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 3..30),
        rot in 0usize..30,
    ) {
        let points: Vec<LatentPolicy> = data.iter().map(|v| LatentPolicy { vector: v.clone() }).collect();
        let mut rotated = points.clone();
        let r = rot % points.len();
        rotated.rotate_left(r);
        let a = project_2d(&points).unwrap();
        let b = project_2d(&rotated).unwrap();
        for i in 0..points.len() {
            let j = (i + points.len() - r) % points.len();
            // Near-degenerate spectra may legitimately pick a different basis.
            let spread: f64 = a.iter().map(|p| p[0] * p[0]).sum::<f64>();
            if spread > 1e-6 {
                prop_assert!((a[i][0].abs() - b[j][0].abs()).abs() < 1e-6 * (1.0 + spread.sqrt()));
            }
        }
    }
}
