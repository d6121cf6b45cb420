use std::sync::Arc;

use dlpo_core::checkpoint::{decode, encode};
use dlpo_core::diffusion::{gaussian_log_density, noised, posterior_mean};
use dlpo_core::mdp::{recompute_log_probs, rollout, score_terminal, REWARD_MAX, REWARD_MIN};
use dlpo_core::model::{predict_eps, FdSettings};
use dlpo_core::objectives::ShapedReward;
use dlpo_core::oracle::OracleReward;
use dlpo_core::reward::{edit_distance, CorpusConfig};
use dlpo_core::verify::{alpha_bar_oracle, simpson};
use dlpo_core::*;
use proptest::prelude::*;

fn tiny_shape() -> ModelShape {
    ModelShape {
        data_len: 8,
        hidden: vec![6],
        time_dim: 4,
        cond_dim: 3,
        vocab_size: 4,
    }
}

fn small_corpus() -> Arc<ConditionCorpus> {
    let cfg = CorpusConfig {
        n_train: 24,
        n_val: 4,
        n_test: 4,
        ..CorpusConfig::default()
    };
    Arc::new(ConditionCorpus::build(&cfg).unwrap())
}

proptest! {
    #[test]
    fn alpha_bar_is_a_decreasing_product(n in 1usize..400, lo in 1e-5f64..0.01, span in 0.0f64..0.05) {
        let s = make_linear_schedule(n, lo, lo + span).unwrap();
        let oracle = alpha_bar_oracle(s.beta());
        prop_assert_eq!(oracle.len(), n);
        for (t, (&ab, &o)) in s.alpha_bar().iter().zip(&oracle).enumerate() {
            prop_assert!(ab > 0.0 && ab < 1.0);
            prop_assert!((ab - o).abs() <= 1e-12);
            prop_assert!((ab + s.one_minus_alpha_bar()[t] - 1.0).abs() <= 1e-12);
            if t > 0 {
                prop_assert!(ab < s.alpha_bar()[t - 1]);
            }
        }
    }

    #[test]
    fn respacing_keeps_alpha_bar_at_kept_steps(n_coarse in 1usize..40) {
        let fine = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let coarse = NoiseSchedule::respaced(&fine, n_coarse).unwrap();
        prop_assert_eq!(coarse.n_steps(), n_coarse);
        prop_assert_eq!(*coarse.model_timesteps().last().unwrap(), 999);
        for (k, &i) in coarse.model_timesteps().iter().enumerate() {
            prop_assert!((coarse.alpha_bar()[k] - fine.alpha_bar()[i]).abs() <= 1e-12);
            prop_assert!(coarse.reverse_variance(k) > 0.0);
        }
    }

    #[test]
    fn posterior_mean_is_exact_at_first_step_and_linear(
        x0 in prop::collection::vec(-2.0f64..2.0, 5),
        xt in prop::collection::vec(-3.0f64..3.0, 5),
        t in 1usize..50,
    ) {
        let s = make_linear_schedule(50, 1e-4, 0.05).unwrap();
        let a = Waveform::new(x0).unwrap();
        let b = Waveform::new(xt).unwrap();
        prop_assert_eq!(posterior_mean(&a, &b, 0, &s).unwrap(), a.clone());
        let (c0, ct) = s.posterior_coefficients(t);
        let m = posterior_mean(&a, &b, t, &s).unwrap();
        for ((m, x), y) in m.samples().iter().zip(a.samples()).zip(b.samples()) {
            prop_assert!((m - (c0 * x + ct * y)).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_dimensional_gaussian_density_normalizes(mean in -3.0f64..3.0, sd in 1e-3f64..2.0) {
        let f = |v: f64| gaussian_log_density(&[v], &[mean], sd * sd).exp();
        let total = simpson(f, mean - 12.0 * sd, mean + 12.0 * sd, 2000);
        prop_assert!((total - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn noising_with_zero_noise_scales_by_sqrt_alpha_bar(x in prop::collection::vec(-1.0f64..1.0, 6), t in 0usize..100) {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = Waveform::new(x).unwrap();
        let z = Waveform::zeros(6);
        let xt = noised(&x0, t, &s, &z).unwrap();
        for (a, b) in xt.samples().iter().zip(x0.samples()) {
            prop_assert!((a - s.alpha_bar()[t].sqrt() * b).abs() <= 1e-15);
        }
    }

    #[test]
    fn zero_penalty_weight_leaves_the_reward_untouched(
        raw in 1.0f64..5.0, kl in 0.0f64..50.0, dl in 0.0f64..50.0, alpha in 0.0f64..3.0,
    ) {
        for algo in [Algo::Ddpo, Algo::Dpok, Algo::Klinr, Algo::Dlpo] {
            let s = ShapedReward::new(algo, raw, kl, dl, alpha, 0.0);
            prop_assert_eq!(s.shaped.to_bits(), (alpha * raw).to_bits());
        }
    }

    #[test]
    fn penalized_reward_never_exceeds_the_scaled_reward(
        raw in 1.0f64..5.0, kl in 0.0f64..50.0, dl in 0.0f64..50.0, beta in 0.0f64..2.0,
    ) {
        for algo in [Algo::Klinr, Algo::Dlpo] {
            let s = ShapedReward::new(algo, raw, kl, dl, 1.0, beta);
            prop_assert!(s.shaped <= raw);
        }
    }

    #[test]
    fn edit_distance_is_a_metric(
        a in prop::collection::vec(0usize..5, 0..6),
        b in prop::collection::vec(0usize..5, 0..6),
        c in prop::collection::vec(0usize..5, 0..6),
    ) {
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        prop_assert!(edit_distance(&a, &b) <= a.len().max(b.len()));
    }

    #[test]
    fn analytic_oracle_gradient_matches_its_value(theta in -3.0f64..3.0, sigma in 0.1f64..3.0) {
        let h = 1e-6;
        let j = |t: f64| analytic_value(&OneStepInstance::new(t, sigma).unwrap());
        let fd = (j(theta + h) - j(theta - h)) / (2.0 * h);
        prop_assert!((fd - analytic_grad(&OneStepInstance::new(theta, sigma).unwrap())).abs() <= 1e-6);
        let c = OneStepInstance::with_reward(theta, sigma, OracleReward::Constant(2.0)).unwrap();
        prop_assert_eq!(analytic_grad(&c), 0.0);
    }

    #[test]
    fn config_keys_roundtrip_through_set(episodes in 1usize..500, beta in 0.0f64..2.0, lr in 1e-6f64..1e-1) {
        let mut c = RunConfig::default();
        c.set("episodes", &episodes.to_string()).unwrap();
        c.set("beta", &format!("{beta:?}")).unwrap();
        c.set("learning_rate", &format!("{lr:?}")).unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_toml_string(), c.to_toml_string());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scores_stay_in_range(samples in prop::collection::vec(-3.0f64..3.0, 256), token in 0usize..8) {
        let scorer = Scorer::new(small_corpus(), Default::default());
        let x = Waveform::new(samples).unwrap();
        let c = Condition::new(0, vec![token], 8).unwrap();
        for s in [scorer.proxy_mos(&x, &c).unwrap(), scorer.eval_mos(&x, &c).unwrap()] {
            prop_assert!((REWARD_MIN..=REWARD_MAX).contains(&s.value()));
        }
        let ter = scorer.token_error_rate(&x, &c).unwrap();
        prop_assert!(ter >= 0.0);
    }

    #[test]
    fn clean_templates_score_best(id in 0usize..24) {
        let corpus = small_corpus();
        let scorer = Scorer::new(corpus.clone(), Default::default());
        let c = corpus.conditions_in(SplitName::Train)[id].clone();
        let x = corpus.template(&c).unwrap();
        prop_assert_eq!(scorer.proxy_mos(&x, &c).unwrap().value(), REWARD_MAX);
        prop_assert_eq!(scorer.token_error_rate(&x, &c).unwrap(), 0.0);
    }

    #[test]
    fn eps_prediction_ignores_token_order(seed in 0u64..1000, t in 0usize..10) {
        let p = init_params(seed, tiny_shape()).unwrap();
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let x = Waveform::new((0..8).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = Condition::new(0, vec![1, 3, 2], 4).unwrap();
        let b = Condition::new(0, vec![2, 1, 3], 4).unwrap();
        prop_assert_eq!(predict_eps(&p, &x, &a, t, &s).unwrap(), predict_eps(&p, &x, &b, t, &s).unwrap());
    }

    #[test]
    fn stored_log_probs_match_recomputation(seed in 0u64..1000) {
        let p = init_params(seed, tiny_shape()).unwrap();
        let fine = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let coarse = NoiseSchedule::respaced(&fine, 5).unwrap();
        let c = Condition::new(0, vec![1], 4).unwrap();
        let traj = rollout(&p, &c, &coarse, seed).unwrap();
        let again = recompute_log_probs(&p, &traj, &coarse).unwrap();
        for (a, b) in traj.log_probs.iter().zip(&again) {
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
        prop_assert_eq!(rollout(&p, &c, &coarse, seed).unwrap().states, traj.states.clone());
    }

    #[test]
    fn checkpoints_roundtrip_bitwise(seed in 0u64..1000) {
        let p = init_params(seed, tiny_shape()).unwrap();
        let cfg = RunConfig::default();
        let meta = CheckpointMeta { shape: tiny_shape(), ..cfg.checkpoint_meta(3, 0) };
        let bytes = encode(&p, &meta).unwrap();
        let (q, m) = decode(&bytes, "mem").unwrap();
        prop_assert_eq!(m, meta.clone());
        prop_assert!(p.flat().zip(q.flat()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(encode(&q, &meta).unwrap(), bytes);
    }

    #[test]
    fn zero_beta_gradients_match_ddpo_bitwise(seed in 0u64..1000, rewards in prop::collection::vec(1.0f64..5.0, 2..5)) {
        let policy = init_params(seed, tiny_shape()).unwrap();
        let reference = init_params(seed + 1, tiny_shape()).unwrap();
        let fine = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let coarse = NoiseSchedule::respaced(&fine, 4).unwrap();
        let ctx = objectives::ObjectiveContext { coarse: &coarse, fine: &fine, reference: Some(&reference) };
        let batch: Vec<_> = rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let c = Condition::new(i, vec![i % 4], 4).unwrap();
                score_terminal(rollout(&policy, &c, &coarse, seed * 31 + i as u64).unwrap(), |_, _| r).unwrap()
            })
            .collect();
        let base = ObjectiveConfig { algo: Algo::Ddpo, loss_guidance_steps: 2, ..Default::default() };
        let g0 = compute_gradient(&policy, &batch, &base, &ctx).unwrap();
        for algo in [Algo::Dpok, Algo::Klinr, Algo::Dlpo] {
            for detach_penalty in [false, true] {
                let cfg = ObjectiveConfig { algo, beta: 0.0, detach_penalty, ..base.clone() };
                let g = compute_gradient(&policy, &batch, &cfg, &ctx).unwrap();
                prop_assert!(g.grads.flat().zip(g0.grads.flat()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    #[test]
    fn surrogate_gradients_pass_finite_differences(seed in 0u64..1000, algo_ix in 0usize..6, detach in any::<bool>()) {
        let algo = Algo::ALL[algo_ix];
        let policy = init_params(seed, tiny_shape()).unwrap();
        let reference = init_params(seed + 7, tiny_shape()).unwrap();
        let fine = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let coarse = NoiseSchedule::respaced(&fine, 3).unwrap();
        let ctx = objectives::ObjectiveContext { coarse: &coarse, fine: &fine, reference: Some(&reference) };
        let batch: Vec<_> = [2.0, 4.5]
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let c = Condition::new(i, vec![i, 2], 4).unwrap();
                score_terminal(rollout(&policy, &c, &coarse, seed + i as u64).unwrap(), |_, _| r).unwrap()
            })
            .collect();
        let cfg = ObjectiveConfig { algo, beta: 0.3, detach_penalty: detach, loss_guidance_steps: 2, ..Default::default() };
        let prepared = objectives::prepare(&policy, &batch, &cfg, &ctx).unwrap();
        let loss = |p: &DenoiserParams, tape: &mut autodiff::Tape<'_>| objectives::batch_surrogate_on_tape(p, tape, &batch, &prepared, &cfg, &ctx);
        let settings = FdSettings { n_coords: 24, seed, ..FdSettings::default() };
        let report = model::finite_diff_check(&policy, &loss, 1e-4, settings).unwrap();
        prop_assert!(report.passed, "{algo} detach={detach}: {report:?}");
    }
}
