use hardy_hinf::domain::{hardy_constant, indicator, Annulus, RadialGrid};
use hardy_hinf::hardy::{h_norm, hardy_quotient, inverse_square_form, rayleigh_hardy_min, stiffness_form};
use hardy_hinf::io::{matrix_csv, parse_matrix_csv, MatrixHeader};
use hardy_hinf::kernel::kernel_from_p;
use hardy_hinf::operators::DiscreteSystem;
use hardy_hinf::riccati::solve_gare_hamiltonian;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn grid_vector(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn indicator_is_a_projection(lo in 0.0f64..0.5, width in 0.05f64..0.45, n in 8usize..80) {
        let grid = RadialGrid::new(3, 1.0, n).unwrap();
        let ind = indicator(&grid, &Annulus::new(lo, lo + width).unwrap()).unwrap();
        for (m, r) in ind.mask.iter().zip(grid.nodes()) {
            prop_assert!(*m == 0.0 || *m == 1.0);
            prop_assert_eq!(*m == 1.0, *r >= lo && *r < lo + width);
        }
        let squared = ind.mask.component_mul(&ind.mask);
        prop_assert_eq!(squared, ind.mask.clone());
    }

    #[test]
    fn deficit_norm_matches_form_difference(v in grid_vector(40), dim in 3usize..6) {
        let grid = RadialGrid::new(dim, 1.0, 40).unwrap();
        let y = DVector::from_vec(v);
        let hn = h_norm(&grid, &y).unwrap();
        let form = stiffness_form(&grid, &y) - hardy_constant(dim).unwrap() * inverse_square_form(&grid, &y);
        prop_assert!((hn * hn - form.max(0.0)).abs() <= 1e-10 * stiffness_form(&grid, &y).max(1e-300));
    }

    #[test]
    fn hardy_quotient_bounded_below_by_discrete_minimum(v in grid_vector(30)) {
        let grid = RadialGrid::new(3, 1.0, 30).unwrap();
        let y = DVector::from_vec(v);
        prop_assume!(y.norm() > 1e-6);
        let min = rayleigh_hardy_min(&grid).unwrap().mu_min;
        prop_assert!(hardy_quotient(&grid, &y) >= min * (1.0 - 1e-10));
        prop_assert!(min >= 0.25);
    }

    #[test]
    fn kernel_round_trip_is_exact(v in grid_vector(20 * 20)) {
        let grid = RadialGrid::new(3, 1.0, 20).unwrap();
        let m = DMatrix::from_vec(20, 20, v);
        let p = &m + m.transpose();
        let k = kernel_from_p(&grid, &p).unwrap();
        prop_assert!((k.to_symmetric_matrix() - &p).amax() <= 1e-13 * p.amax().max(1e-300));
        prop_assert!(k.symmetry_defect() <= 1e-14);
    }

    #[test]
    fn scalar_riccati_matches_quadratic_formula(
        a in -3.0f64..3.0,
        b1 in 0.1f64..2.0,
        b2 in 0.5f64..2.0,
        c in 0.1f64..2.0,
        slack in 1.2f64..10.0,
    ) {
        // feasible iff s = b₂² - b₁²/γ² > 0; take γ well above b₁/b₂
        let gamma = slack * b1 / b2;
        let one = |x: f64| DMatrix::from_element(1, 1, x);
        let sys = DiscreteSystem::from_matrices(one(a), one(b1), DVector::from_element(1, b2), one(c), DVector::zeros(1)).unwrap();
        let s = b2 * b2 - b1 * b1 / (gamma * gamma);
        let p = (a + (a * a + s * c * c).sqrt()) / s;
        let sol = solve_gare_hamiltonian(&sys, gamma).unwrap();
        prop_assert!((sol.p[(0, 0)] - p).abs() <= 1e-9 * p.max(1.0));
    }

    #[test]
    fn matrix_csv_round_trip(v in grid_vector(12), lambda in 0.0f64..0.25) {
        let m = DMatrix::from_vec(3, 4, v);
        let header = MatrixHeader { n: 3, dim: 3, radius: 1.0, lambda };
        let (h, back) = parse_matrix_csv(&matrix_csv(&m, header)).unwrap();
        prop_assert_eq!(h.lambda, lambda);
        prop_assert!((back - m).amax() <= 1e-11);
    }
}
