use ldpp::analysis::{clustering_quality, project_2d};
use ldpp::corpus::critic::{CriticLabel, FixedCritic};
use ldpp::corpus::SyntheticSpec;
use ldpp::models::{LatentPolicy, ModelBundle, ModelConfig, Tokenizer};
use ldpp::selfplay::{compute_metrics, run_cases, synthetic_cases, EpisodeParams, ScriptedUser};
use ldpp::training::losses::expectile_loss;
use nalgebra::DMatrix;
use rand::Rng;

fn small_bundle(spec: &SyntheticSpec) -> ModelBundle<f32> {
    let cfg = ModelConfig {
        num_codes: 4,
        policy_tokens: 2,
        pformer_layers: 1,
        latent_dim: 8,
        width: 16,
        heads: 2,
        encoder_layers: 1,
        generator_layers: 1,
        head_hidden: 16,
        max_seq_len: 24,
    };
    let words: Vec<String> = spec.vocabulary().into_iter().collect();
    ModelBundle::new(cfg, Tokenizer::build(words.iter().map(String::as_str)), 3).unwrap()
}

fn fast_params() -> EpisodeParams {
    let mut p = EpisodeParams::default();
    p.decode.max_new_tokens = 6;
    p
}

#[test]
fn pca_matches_svd_of_centred_data() {
    let mut rng = ldpp::rng::rng_for(1, "pca");
    // Anisotropic cloud so the top two directions are well separated.
    let scales = [5.0, 2.0, 0.5, 0.1];
    let points: Vec<LatentPolicy> = (0..200)
        .map(|_| LatentPolicy { vector: scales.iter().map(|s| s * rng.gen_range(-1.0..1.0)).collect() })
        .collect();
    let ours = project_2d(&points).unwrap();

    let n = points.len();
    let mut m = DMatrix::from_fn(n, 4, |i, j| points[i].vector[j]);
    let mean = m.row_mean();
    for mut row in m.row_iter_mut() {
        row -= &mean;
    }
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    for (axis, &comp) in order.iter().take(2).enumerate() {
        let dir: Vec<f64> = vt.row(comp).iter().copied().collect();
        let proj: Vec<f64> = (0..n).map(|i| (0..4).map(|j| m[(i, j)] * dir[j]).sum()).collect();
        // Components are defined up to sign.
        let same = (0..n).all(|i| (proj[i] - ours[i][axis]).abs() < 1e-8);
        let flipped = (0..n).all(|i| (proj[i] + ours[i][axis]).abs() < 1e-8);
        assert!(same || flipped, "axis {axis} disagrees with the SVD projection");
    }
}

#[test]
fn nmi_of_independent_labels_is_near_zero() {
    let mut rng = ldpp::rng::rng_for(2, "nmi");
    let n = 20_000;
    let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..24)).collect();
    let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
    let q = clustering_quality(&pred, &truth).unwrap();
    assert!(q.nmi < 0.01, "nmi {}", q.nmi);
    // Purity of random labels stays near the largest class share.
    assert!(q.purity < 0.25, "purity {}", q.purity);
}

#[test]
fn expectile_weights_residual_sides() {
    assert!((expectile_loss(0.0, 1.0, 0.9) - 0.1).abs() < 1e-12);
    assert!((expectile_loss(1.0, 0.0, 0.9) - 0.9).abs() < 1e-12);
}

#[test]
fn immediate_success_ends_after_one_turn() {
    let spec = SyntheticSpec::default();
    let b = small_bundle(&spec);
    let cases = synthetic_cases(&spec, 5, 1);
    let logs = run_cases(&b, &ScriptedUser::new(spec), &FixedCritic(CriticLabel::Solved), &cases, &fast_params(), 1).unwrap();
    for l in &logs {
        assert_eq!(l.num_turns, 1);
        assert!(l.success);
        assert_eq!(l.final_reward, 1.0);
    }
    let m = compute_metrics(&logs, 0.6).unwrap();
    assert_eq!((m.sr, m.avg_t), (1.0, 1.0));
}

#[test]
fn never_solving_runs_the_full_budget() {
    let spec = SyntheticSpec::default();
    let b = small_bundle(&spec);
    let cases = synthetic_cases(&spec, 5, 2);
    let logs = run_cases(&b, &ScriptedUser::new(spec), &FixedCritic(CriticLabel::Same), &cases, &fast_params(), 2).unwrap();
    for l in &logs {
        assert_eq!(l.num_turns, 10);
        assert!(!l.success);
        assert_eq!(l.final_reward, -0.5);
        assert_eq!(l.turn_rewards.len(), 10);
    }
    let m = compute_metrics(&logs, 0.6).unwrap();
    assert_eq!((m.sr, m.avg_t), (0.0, 10.0));
    assert!((m.ssr + 0.5).abs() < 1e-12);
}

#[test]
fn correct_strategy_advances_at_the_configured_rate() {
    let spec = SyntheticSpec::default();
    let mut rng = ldpp::rng::rng_for(3, "transition");
    let n = 20_000;
    let state = 0u8;
    let correct = Some(spec.correct_strategy[0]);
    let ups = (0..n).filter(|_| spec.transition(state, correct, &mut rng) == state + 1).count();
    let p = spec.p_up_correct;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    assert!(((ups as f64 / n as f64) - p).abs() < 4.0 * se);

    let wrong = Some((spec.correct_strategy[1] + 1) % spec.num_strategies());
    let downs = (0..n).filter(|_| spec.transition(1, wrong, &mut rng) == 0).count();
    let q = spec.p_down_incorrect;
    let se = (q * (1.0 - q) / n as f64).sqrt();
    assert!(((downs as f64 / n as f64) - q).abs() < 4.0 * se);
}
