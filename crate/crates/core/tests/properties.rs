use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ep_core::bptt::{finite_diff_check, GradCheckConfig};
use ep_core::checkpoint;
use ep_core::dynamics::{ep_update, run_free_phase, PhaseConfig};
use ep_core::gdu::run_gdu;
use ep_core::model::LayeredDenseParams;
use ep_core::{ActivationKind, ModelParams, Tensor};

fn dense(sizes: &[usize], seed: u64) -> (ModelParams, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = ModelParams::LayeredDense(LayeredDenseParams::init(sizes, &mut rng).unwrap());
    let x = Tensor::vector((0..sizes[0]).map(|_| rng.gen_range(0.0..1.0)).collect());
    let y = Tensor::vector((0..sizes[sizes.len() - 1]).map(|_| rng.gen_range(0.0..1.0)).collect());
    (p, x, y)
}

fn shifted(t_max: usize, k: usize, beta: f64, tol: f64) -> PhaseConfig {
    PhaseConfig {
        t_max,
        k_steps: k,
        beta,
        tol,
        activation: ActivationKind::ShiftedSigmoid,
        ..PhaseConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoints_round_trip_bitwise(sizes in prop::collection::vec(1usize..7, 2..5), seed in any::<u64>()) {
        let (p, _, _) = dense(&sizes, seed);
        let back = checkpoint::from_bytes(&checkpoint::to_bytes(&p)).unwrap();
        prop_assert_eq!(back, p);
    }

    // Central differences carry an O(h²) error that grows with curvature, so
    // a strongly curved coordinate can exceed the bound at a fixed h. Where it
    // does, cutting h by 3 must cut the error by about 9.
    #[test]
    fn bptt_matches_finite_differences(seed in 0u64..100_000) {
        let (p, x, y) = dense(&[4, 6, 2], seed);
        let check = |h| {
            let cfg = GradCheckConfig { phase: shifted(50, 10, 0.5, 1e-4), k: 10, h, coords_per_tensor: 8, seed };
            finite_diff_check(&p, &x, &y, &cfg).unwrap().max_rel_err
        };
        let coarse = check(1e-5);
        if coarse > 1e-5 {
            let fine = check(1e-5 / 3.0);
            prop_assert!(fine <= coarse / 6.0, "max rel err {coarse} at h, {fine} at h/3");
        }
    }

    #[test]
    fn identical_phases_give_no_update(seed in any::<u64>(), beta in 0.01f64..1.0) {
        let (p, x, _) = dense(&[5, 7, 3], seed);
        let free = run_free_phase(&p, &x, &shifted(30, 5, beta, 1e-6)).unwrap();
        let s = free.final_state();
        let d = ep_update(&p, s, s, &x, beta).unwrap();
        prop_assert_eq!(d.max_abs_diff(&d.scale(0.0)).unwrap(), 0.0);
    }

    // At a converged fixed point the weight processes approach the negative
    // BPTT gradients with an error that is first order in β, so the pooled
    // rel_mse falls by about 100 per decade of β. The per-step cosine is not
    // asserted here: on fast-contracting instances the last steps carry
    // gradients near 1e-10, below the resolution of the EP difference quotient.
    #[test]
    fn weight_processes_follow_bptt(seed in 0u64..100_000) {
        let (p, x, y) = dense(&[10, 20, 5], seed);
        let coarse = shifted(1000, 15, 1e-3, 1e-10);
        prop_assume!(run_free_phase(&p, &x, &coarse).unwrap().converged);
        let r3 = run_gdu(&p, &x, &y, &coarse).unwrap().report;
        let r4 = run_gdu(&p, &x, &y, &shifted(1000, 15, 1e-4, 1e-10)).unwrap().report;
        prop_assert!(r3.theta_rel_mse <= 1e-3, "rel_mse {}", r3.theta_rel_mse);
        prop_assert!(r4.theta_rel_mse <= 0.02 * r3.theta_rel_mse, "rel_mse {} then {}", r3.theta_rel_mse, r4.theta_rel_mse);
    }
}
