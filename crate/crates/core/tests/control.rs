use std::sync::Arc;

use cascade_smp::*;

fn unit_instance(extra: &str, solver: &str) -> ProblemSpec {
    load_spec(&format!(
        "n = 1\nhorizon = 1\nx0 = [1]\n{extra}\n[mc]\nnum_paths = 200\ndt = 0.01\nseed = 5\n[solver]\n{solver}\n\
         [regime.\"\"]\nmu = [0]\nb = [0]\nsigma = [0]\nnu = [0]\nv = [0]\ngamma = [1]\n"
    ))
    .unwrap()
}

#[test]
fn riccati_feedback_substitutes_p_and_phi() {
    // Printed last-regime normalization: P ≡ 1 and φ ≡ 0, so a = P x − φ = x.
    let spec = unit_instance("", "paper_generators = true\nmax_picard = 1");
    let sol = solve_riccati(&LqModel::new(&spec), true).unwrap();
    let policy = Policy::Riccati(Arc::new(sol));
    let a = feedback(&policy, &spec, &Regime::root(1), 0.3, &[0.7]).unwrap();
    assert!((a[0] - 0.7).abs() < 1e-12, "{a:?}");
}

#[test]
fn projection_onto_box() {
    let spec = unit_instance("control_bounds = [[-0.5, 0.5]]", "");
    let a = feedback(&Policy::Constant(vec![0.7]), &spec, &Regime::root(1), 0.0, &[1.0]).unwrap();
    assert_eq!(a, vec![0.5]);
    let a = feedback(&Policy::Affine { gain: vec![-1.0], offset: vec![0.0] }, &spec, &Regime::root(1), 0.0, &[2.0]).unwrap();
    assert_eq!(a, vec![-0.5]);
}

#[test]
fn defaulted_nodes_get_zero() {
    let spec = load_spec(
        "n = 2\nhorizon = 1\nx0 = [1, 1]\n[mc]\nnum_paths = 500\ndt = 0.02\nseed = 9\n\
         [regime.\"\"]\nmu = [-0.2, -0.2]\nb = [0, 0]\nsigma = [0, 0]\nnu = [0.3, 0.3]\nv = [0, 0]\ngamma = [1, 1]\n",
    )
    .unwrap();
    let model = LqModel::new(&spec);
    let child = Regime::from_defaulted(2, &[0]).unwrap();
    let ric = Policy::Riccati(Arc::new(solve_riccati(&model, true).unwrap()));
    let adj = Policy::Adjoint(Arc::new(solve_adjoint_picard(&model, true).unwrap()));
    for policy in [Policy::Constant(vec![3.0, 3.0]), ric, adj] {
        let a = feedback(&policy, &spec, &child, 0.5, &[0.0, 0.8]).unwrap();
        assert_eq!(a[0], 0.0, "{}", policy.kind());
    }
}

#[test]
fn uncovered_regime_is_an_error() {
    let spec = unit_instance("", "");
    let terminal = Regime::from_defaulted(1, &[0]).unwrap();
    assert!(feedback(&Policy::Zero, &spec, &terminal, 0.0, &[0.0]).is_err());
}

#[test]
fn glued_matches_recursive_with_one_node() {
    let spec = load_spec(
        "n = 1\nhorizon = 1\nx0 = [1]\n[mc]\nnum_paths = 4000\ndt = 0.01\nseed = 11\n\
         [regime.\"\"]\nmu = [-0.2]\nb = [0]\nsigma = [0]\nnu = [0.3]\nv = [0]\ngamma = [1]\n",
    )
    .unwrap();
    let model = LqModel::new(&spec);
    let recursive = Policy::Riccati(Arc::new(solve_riccati(&model, true).unwrap()));
    let glued = build_glued(Policy::Riccati(Arc::new(solve_riccati(&model, false).unwrap()))).unwrap();
    let cmp = compare(&model, &recursive, &glued, 4000).unwrap();
    assert!(cmp.mean_diff.abs() <= 2.0 * cmp.std_error + 1e-12, "{cmp:?}");
}

#[test]
fn glued_rejects_stitched_or_baseline_input() {
    let spec = unit_instance("", "max_picard = 1");
    let sol = solve_riccati(&LqModel::new(&spec), true).unwrap();
    assert!(build_glued(Policy::Riccati(Arc::new(sol))).is_err());
    assert!(build_glued(Policy::Zero).is_err());
}

#[test]
fn realized_controls_follow_the_active_regime() {
    let spec = load_spec(
        "n = 2\nhorizon = 1\nx0 = [1, 1]\n[mc]\nnum_paths = 300\ndt = 0.02\nseed = 13\n[solver]\nmax_picard = 2\n\
         [regime.\"\"]\nmu = [-0.5, -0.5]\nb = [0, 0]\nsigma = [0, 0]\nnu = [0.5, 0.5]\nv = [0, 0]\ngamma = [1, 1]\n",
    )
    .unwrap();
    let model = LqModel::new(&spec);
    let policy = Policy::Riccati(Arc::new(solve_riccati(&model, true).unwrap()));
    let mut out = vec![0.0; 2];
    for id in 0..50 {
        let path = simulate_path(&spec, &policy, id).unwrap();
        for m in path.start_step..path.end_step().min(spec.steps()) {
            let regime = path.regime_at(m);
            if regime.is_terminal() {
                break;
            }
            policy.control_into(&spec, &regime, m, path.state(m), &mut out).unwrap();
            assert_eq!(out.as_slice(), path.control(m));
        }
    }
}
