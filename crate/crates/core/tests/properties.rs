use bohmlab::bohm::sample_quantum_equilibrium;
use bohmlab::fields::{gaussian_packet, make_uniform_grid, product_state};
use bohmlab::model::{pulse_adiabatic, regularized_delta, CouplingSpec, Hamiltonian, Masses, TrapSpec};
use bohmlab::propagator::{energy_curve, propagate, EigenMethod, PropagateOptions, Schedule};
use bohmlab::{Axis, Grid1D};
use proptest::prelude::*;

fn small_hamiltonian(area: f64, duration: f64) -> Hamiltonian {
    let gx = make_uniform_grid(-0.5, 0.5, 96).unwrap();
    let gp = make_uniform_grid(-1.5, 1.5, 64).unwrap();
    let spec = CouplingSpec::protective(
        regularized_delta(&gx, 0.07).unwrap(),
        pulse_adiabatic(duration, area).unwrap(),
        Masses::new(1.0, 100.0).unwrap(),
    )
    .unwrap();
    Hamiltonian::new(spec, TrapSpec::infinite_box(1.0, 0.0).unwrap(), TrapSpec::free(Axis::Pointer), gx, gp).unwrap()
}

fn packet_state(g: (&Grid1D, &Grid1D), x0: f64, k: f64, p0: f64, q: f64) -> bohmlab::WaveFunction2D {
    let a = gaussian_packet(g.0, x0, 0.05, k).unwrap();
    let b = gaussian_packet(g.1, p0, 0.15, q).unwrap();
    product_state(&a, &b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn propagation_is_unitary(
        x0 in -0.1f64..0.1,
        k in -20.0f64..20.0,
        p0 in -0.3f64..0.3,
        q in -5.0f64..5.0,
        area in 0.0f64..2.0,
    ) {
        let ham = small_hamiltonian(area, 0.2);
        let psi = packet_state((&ham.grid_x, &ham.grid_pointer), x0, k, p0, q);
        let schedule = Schedule::new(0.0, 0.2, 0.002, 1000).unwrap();
        let tl = propagate(&psi, &ham, &schedule, PropagateOptions::default(), &mut []).unwrap();
        prop_assert!(tl.norm_drift < 1e-10, "drift {}", tl.norm_drift);
        prop_assert!(tl.final_state.is_finite());
    }

    #[test]
    fn product_states_are_pure(x0 in -0.1f64..0.1, k in -20.0f64..20.0, p0 in -0.3f64..0.3, q in -5.0f64..5.0) {
        let ham = small_hamiltonian(0.0, 1.0);
        let psi = packet_state((&ham.grid_x, &ham.grid_pointer), x0, k, p0, q);
        let m = psi.factorization_metric();
        prop_assert!((m.purity - 1.0).abs() < 1e-10);
        prop_assert!(m.linear_entropy.abs() < 1e-10);
    }

    #[test]
    fn coupling_entangles_only_when_switched_on(area in 0.5f64..3.0) {
        let ham = small_hamiltonian(area, 0.1);
        let psi = packet_state((&ham.grid_x, &ham.grid_pointer), 0.0, 0.0, 0.3, 0.0);
        let schedule = Schedule::new(0.0, 0.1, 0.001, 1000).unwrap();
        let on = propagate(&psi, &ham, &schedule, PropagateOptions::default(), &mut []).unwrap();
        let off = propagate(&psi, &small_hamiltonian(0.0, 0.1), &schedule, PropagateOptions::default(), &mut []).unwrap();
        prop_assert!((off.final_state.factorization_metric().purity - 1.0).abs() < 1e-9);
        prop_assert!(on.final_state.factorization_metric().purity < 1.0 - 1e-9);
    }

    #[test]
    fn sampling_is_reproducible(seed in any::<u64>()) {
        let ham = small_hamiltonian(0.0, 1.0);
        let psi = packet_state((&ham.grid_x, &ham.grid_pointer), 0.0, 3.0, 0.1, 0.0);
        let a = sample_quantum_equilibrium(&psi, 64, seed).unwrap();
        let b = sample_quantum_equilibrium(&psi, 64, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn energy_slope_matches_finite_differences(f in 0.01f64..2.0) {
        let g = make_uniform_grid(-0.5, 0.5, 128).unwrap();
        let profile = regularized_delta(&g, 0.03).unwrap();
        let xs: Vec<f64> = (0..9).map(|i| -0.4 + 0.1 * i as f64).collect();
        let trap = TrapSpec::infinite_box(1.0, 0.0).unwrap();
        let c = energy_curve(&xs, f, &trap, &profile, 1.0, EigenMethod::Direct).unwrap();
        for (x, slope) in c.central_differences() {
            let d = c.de_dx_at(x);
            // Central differences carry an O(h²) error from the curvature of E(X).
            prop_assert!((slope - d).abs() <= 1e-3 * d.abs() + 1e-12, "x {x}: {slope} vs {d}");
        }
    }
}
