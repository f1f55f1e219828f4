use proptest::prelude::*;
use prss_core::detection::DetectionConfig;
use prss_core::guidance::*;

fn vecs(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-5.0f64..5.0, n),
        prop::collection::vec(-5.0f64..5.0, n),
        prop::collection::vec(-5.0f64..5.0, n),
    )
}

/// Entrywise agreement to a few ulps of the operands' scale.
fn close(x: &[f64], y: &[f64], scale: f64) -> bool {
    x.len() == y.len() && x.iter().zip(y).all(|(a, b)| (a - b).abs() <= 8.0 * f64::EPSILON * scale)
}

fn config(policy: Policy, s: f64) -> GuidanceConfig {
    let mut c = GuidanceConfig::new(policy, DetectionConfig::new(0.2, 0.6, Default::default(), None).unwrap());
    c.s = s;
    c
}

proptest! {
    #[test]
    fn unit_scale_cfg_is_conditional((a, b, _) in vecs(6)) {
        prop_assert!(close(&cfg_combine(&a, &b, 1.0).unwrap(), &b, 20.0));
    }

    #[test]
    fn equal_inputs_are_fixed_points((a, _, _) in vecs(6), s in 1.0f64..20.0, sp in 0.0f64..1.0) {
        prop_assert_eq!(cfg_combine(&a, &a, s).unwrap(), a.clone());
        prop_assert_eq!(pr_combine(&a, &a, s).unwrap(), a.clone());
        let s_prime = 1.0 + sp * (s - 1.0);
        prop_assert_eq!(balanced_combine(&a, &a, &a, s, s_prime).unwrap(), a);
    }

    #[test]
    fn pr_is_cfg_with_the_anchor_swapped((a, b, _) in vecs(6), s in 1.0f64..20.0) {
        prop_assert_eq!(pr_combine(&a, &b, s).unwrap(), cfg_combine(&a, &b, s).unwrap());
        prop_assert!(close(&pr_combine(&a, &b, 1.0).unwrap(), &b, 20.0));
    }

    #[test]
    fn balanced_endpoints((phi, p, ss) in vecs(6), s in 1.0f64..20.0) {
        let top = balanced_combine(&phi, &p, &ss, s, s).unwrap();
        let pr = pr_combine(&p, &ss, s).unwrap();
        prop_assert!(close(&top, &pr, 20.0 * (1.0 + s)));
        let bottom = balanced_combine(&phi, &p, &ss, s, 1.0).unwrap();
        for i in 0..6 {
            let expect = p[i] + (ss[i] - p[i]) + (s - 1.0) * (ss[i] - phi[i]);
            prop_assert!((bottom[i] - expect).abs() <= 8.0 * f64::EPSILON * 20.0 * (1.0 + s));
        }
    }

    #[test]
    fn schedule_is_monotone_and_lipschitz(
        lambda in 0.01f64..2.0,
        gap in 0.01f64..2.0,
        s in 1.0f64..15.0,
        m1 in 0.0f64..5.0,
        m2 in 0.0f64..5.0,
    ) {
        let lmax = lambda + gap;
        let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
        let a = scale_schedule(lo, lambda, lmax, s).unwrap();
        let b = scale_schedule(hi, lambda, lmax, s).unwrap();
        prop_assert!(a <= b);
        prop_assert!((1.0..=s).contains(&a) && (1.0..=s).contains(&b));
        let slope = (s - 1.0) / gap;
        prop_assert!(b - a <= slope * (hi - lo) + 1e-9);
    }

    #[test]
    fn unflagged_is_cfg_for_every_policy((phi, p, t) in vecs(5), s in 1.0f64..15.0, m in 0.0f64..2.0) {
        let expect = cfg_combine(&phi, &p, s).unwrap();
        for policy in Policy::ALL {
            let inputs = GuidedStepInputs { eps_phi: &phi, eps_p: &p, eps_target: Some(&t), m_t: m };
            prop_assert_eq!(guided_step(&config(policy, s), &inputs, false).unwrap(), expect.clone());
            let none = GuidedStepInputs { eps_target: None, ..inputs };
            prop_assert_eq!(guided_step(&config(policy, s), &none, false).unwrap(), expect.clone());
        }
    }

    #[test]
    fn flagged_branches((phi, p, t) in vecs(5), s in 1.0f64..15.0, m in 0.0f64..2.0) {
        let inputs = GuidedStepInputs { eps_phi: &phi, eps_p: &p, eps_target: Some(&t), m_t: m };
        let run = |policy| guided_step(&config(policy, s), &inputs, true).unwrap();
        prop_assert_eq!(run(Policy::Cfg), cfg_combine(&phi, &p, s).unwrap());
        prop_assert_eq!(run(Policy::Pe), cfg_combine(&phi, &t, s).unwrap());
        prop_assert_eq!(run(Policy::Ss), cfg_combine(&phi, &t, s).unwrap());
        prop_assert_eq!(run(Policy::Pr), pr_combine(&p, &t, s).unwrap());
        prop_assert_eq!(run(Policy::Prss), pr_combine(&p, &t, s).unwrap());
        let sp = scale_schedule(m, 0.2, 0.6, s).unwrap();
        prop_assert_eq!(run(Policy::PrssBalanced), balanced_combine(&phi, &p, &t, s, sp).unwrap());
    }

    #[test]
    fn prss_with_user_prompt_as_alternative_is_degenerate((phi, p, _) in vecs(5), s in 1.0f64..15.0) {
        let inputs = GuidedStepInputs { eps_phi: &phi, eps_p: &p, eps_target: Some(&p), m_t: 1.0 };
        prop_assert_eq!(guided_step(&config(Policy::Prss, s), &inputs, true).unwrap(), p);
    }
}

#[test]
fn hand_examples() {
    assert_eq!(cfg_combine(&[0.0, 0.0], &[1.0, 0.0], 7.5).unwrap(), vec![7.5, 0.0]);
    assert_eq!(
        balanced_combine(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 4.0, 2.0).unwrap(),
        vec![-1.0, 4.0]
    );
    assert_eq!(scale_schedule(0.1, 0.2, 0.4, 7.5).unwrap(), 1.0);
    assert_eq!(scale_schedule(0.4, 0.2, 0.4, 7.5).unwrap(), 7.5);
    assert!((scale_schedule(0.3, 0.2, 0.4, 5.0).unwrap() - 3.0).abs() <= 1e-12);
    assert!(cfg_combine(&[0.0], &[0.0, 1.0], 2.0).is_err());
}

#[test]
fn balanced_floor_at_interior_step() {
    let (phi, p, t) = ([0.0, 1.0], [1.0, 0.0], [0.5, 0.5]);
    let inputs = GuidedStepInputs { eps_phi: &phi, eps_p: &p, eps_target: Some(&t), m_t: 0.1 };
    let out = guided_step(&config(Policy::PrssBalanced, 7.5), &inputs, true).unwrap();
    assert_eq!(out, balanced_combine(&phi, &p, &t, 7.5, 1.0).unwrap());
}

#[test]
fn config_defaults_and_validation() {
    let c: GuidanceConfig = serde_json::from_str(
        r#"{"policy":"prss_balanced","detection":{"lambda":0.1,"lambda_max":0.2,"signal":"m_masked","mask":[1,0]}}"#,
    )
    .unwrap();
    assert_eq!((c.s, c.n_s), (7.5, 25));
    assert!(c.validate().is_ok());
    let mut bad = c.clone();
    bad.s = 0.5;
    assert!(bad.validate().is_err());
    bad = c;
    bad.n_s = 0;
    assert!(bad.validate().is_err());
}
