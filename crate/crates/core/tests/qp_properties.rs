mod common;

use common::{enumerate_active_sets, random_qp};
use pcc_lmpc::qp::{kkt_residual, solve_qp, QpStatus};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn strictly_convex_solutions_satisfy_kkt(seed in any::<u64>(), n in 1usize..25, m_eq in 0usize..4, m_in in 0usize..30, boxed in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m_eq = m_eq.min(n - 1);
        let qp = random_qp(&mut rng, n, n, m_eq, m_in, boxed);
        let sol = solve_qp(&qp, 1e-8).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Optimal, "kkt {:?}", sol.kkt);
        let kkt = kkt_residual(&qp, &sol.x, &sol.y_eq, &sol.y_in, &sol.y_lower, &sol.y_upper);
        prop_assert!(kkt.max() <= 1e-8, "{:?}", kkt);
    }

    #[test]
    fn semidefinite_solutions_satisfy_kkt(seed in any::<u64>(), n in 2usize..15, m_in in 0usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rank = 1 + (seed as usize) % (n - 1);
        let qp = random_qp(&mut rng, n, rank, 1, m_in, true);
        let sol = solve_qp(&qp, 1e-8).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Optimal, "kkt {:?}", sol.kkt);
        prop_assert!(sol.kkt.max() <= 1e-8);
    }

    #[test]
    fn objective_matches_enumeration(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qp = random_qp(&mut rng, 20, 20, 2, 8, false);
        let sol = solve_qp(&qp, 1e-8).unwrap();
        let oracle = enumerate_active_sets(&qp).expect("feasible by construction");
        prop_assert!((sol.objective - oracle).abs() <= 1e-6 * (1.0 + oracle.abs()), "{} vs {}", sol.objective, oracle);
    }

    #[test]
    fn semidefinite_objective_matches_enumeration(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qp = random_qp(&mut rng, 5, 2, 1, 3, true);
        let sol = solve_qp(&qp, 1e-8).unwrap();
        let oracle = enumerate_active_sets(&qp).expect("feasible by construction");
        prop_assert!((sol.objective - oracle).abs() <= 1e-6 * (1.0 + oracle.abs()), "{} vs {}", sol.objective, oracle);
    }
}
