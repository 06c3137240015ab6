use proptest::prelude::*;

use akl::adaptive::{akl_r_report, akl_report, compute_gaps};
use akl::oracle::{check_gradient, finite_diff_grad, FdConfig, FdLoss};
use akl::{
    fkl, fkl_grad, rkl, rkl_grad, softmax, solve_head_mask, AdaptiveParams, Distribution,
    Divergence, GapFn, LogitVector,
};

fn logits(
    len: impl Into<prop::collection::SizeRange>,
    span: f64,
) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-span..span, len)
}

/// Teacher and student logits of the same length.
fn pair(max_v: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2..=max_v).prop_flat_map(|v| (logits(v, 6.0), logits(v, 6.0)))
}

fn lv(z: &[f64]) -> LogitVector {
    LogitVector::new(z.to_vec()).unwrap()
}

fn all_divergences() -> [Divergence; 5] {
    [
        Divergence::Fkl,
        Divergence::Rkl,
        Divergence::FixedMix(0.3),
        Divergence::Akl,
        Divergence::AklR,
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gradients_are_shift_invariant((zp, zq) in pair(30), c in -50.0..50.0f64) {
        let p = softmax(&lv(&zp));
        let shifted: Vec<f64> = zq.iter().map(|x| x + c).collect();
        for d in all_divergences() {
            let a = d.evaluate(&p, &lv(&zq), &AdaptiveParams::default()).unwrap().eval;
            let b = d.evaluate(&p, &lv(&shifted), &AdaptiveParams::default()).unwrap().eval;
            prop_assert!((a.value - b.value).abs() <= 1e-12 * a.value.abs().max(1.0));
            for (x, y) in a.grad_student_logits.iter().zip(&b.grad_student_logits) {
                prop_assert!((x - y).abs() <= 1e-12, "{d}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn gradients_sum_to_zero((zp, zq) in pair(60)) {
        let p = softmax(&lv(&zp));
        for d in all_divergences() {
            let g = d.evaluate(&p, &lv(&zq), &AdaptiveParams::default()).unwrap().eval;
            let s: f64 = g.grad_student_logits.iter().sum();
            prop_assert!(s.abs() < 1e-9, "{d}: sum {s}");
        }
    }

    #[test]
    fn gradients_vanish_at_teacher(z in (2usize..60).prop_flat_map(|v| logits(v, 8.0))) {
        let z = lv(&z);
        let p = softmax(&z);
        for d in all_divergences() {
            let g = d.evaluate(&p, &z, &AdaptiveParams::default()).unwrap().eval;
            for x in g.grad_student_logits {
                prop_assert!(x.abs() < 1e-10, "{d}: {x}");
            }
        }
    }

    #[test]
    fn analytic_matches_finite_differences((zp, zq) in pair(20), mu in 0.05..=1.0f64) {
        let p = softmax(&lv(&zp));
        let z = lv(&zq);
        let params = AdaptiveParams { mu, gap: GapFn::AbsDiff };
        let cfg = FdConfig::default();
        for d in all_divergences() {
            let analytic = d.evaluate(&p, &z, &params).unwrap().eval.grad_student_logits;
            let numeric = finite_diff_grad(&FdLoss::new(d, &p).with_params(params), &z, &cfg).unwrap();
            let check = check_gradient(&analytic, &numeric, &cfg).unwrap();
            prop_assert!(check.passed, "{d}: {check:?}");
        }
    }

    #[test]
    fn weights_are_a_convex_pair((zp, zq) in pair(40), mu in 0.01..=1.0f64) {
        let p = softmax(&lv(&zp));
        let z = lv(&zq);
        let (_, a) = akl_report(&p, &z, mu, GapFn::AbsDiff).unwrap();
        let (_, r) = akl_r_report(&p, &z, mu, GapFn::AbsDiff).unwrap();
        prop_assert!((0.0..=1.0).contains(&a.w_fkl) && (0.0..=1.0).contains(&a.w_rkl));
        prop_assert_eq!(a.w_fkl + a.w_rkl, 1.0);
        // the reversed variant sees the same gaps
        prop_assert_eq!((a.w_fkl, a.w_rkl), (r.w_fkl, r.w_rkl));
    }

    #[test]
    fn akl_lies_between_fkl_and_rkl((zp, zq) in pair(40), mu in 0.01..=1.0f64) {
        let p = softmax(&lv(&zp));
        let z = lv(&zq);
        let f = fkl_grad(&p, &z).unwrap().value;
        let r = rkl_grad(&p, &z).unwrap().value;
        for v in [
            akl_report(&p, &z, mu, GapFn::AbsDiff).unwrap().0.value,
            akl_r_report(&p, &z, mu, GapFn::AbsDiff).unwrap().0.value,
        ] {
            prop_assert!(f.min(r) <= v && v <= f.max(r), "{v} not in [{f}, {r}]");
        }
    }

    #[test]
    fn mask_depends_on_teacher_only(
        (zp, zq) in pair(30),
        other in logits(30, 6.0),
        mu in 0.01..=1.0f64,
    ) {
        let p = softmax(&lv(&zp));
        let z2: Vec<f64> = other[..zq.len()].to_vec();
        let expected = solve_head_mask(&p, mu).unwrap();
        for z in [lv(&zq), lv(&z2)] {
            let (_, g) = akl_report(&p, &z, mu, GapFn::AbsDiff).unwrap();
            prop_assert_eq!(&g.mask, &expected);
        }
    }

    /// Head {0, 1}, tail {2, 3}: `a` moves head mass and `b` tail mass, so
    /// g_head = 2a and g_tail = 2|b| independently.
    #[test]
    fn w_fkl_grows_with_head_gap(
        a1 in 0.0..0.29f64,
        a2 in 0.0..0.29f64,
        b in -0.19..0.09f64,
    ) {
        let p = Distribution::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let mask = solve_head_mask(&p, 0.5).unwrap();
        prop_assert_eq!(mask.indices(), vec![0, 1]);
        let w = |a: f64| {
            let q = Distribution::new(vec![0.4 + a, 0.3 - a, 0.2 + b, 0.1 - b]).unwrap();
            compute_gaps(&p, &q, &mask, GapFn::AbsDiff).unwrap().w_fkl
        };
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        prop_assert!(w(lo) <= w(hi), "w({lo}) = {} > w({hi}) = {}", w(lo), w(hi));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_identity((zp, zq) in pair(50)) {
        let p = softmax(&lv(&zp));
        let q = softmax(&lv(&zq));
        prop_assert!(fkl(&p, &q).unwrap() >= 0.0);
        prop_assert!(rkl(&p, &q).unwrap() >= 0.0);
        prop_assert_eq!(fkl(&p, &p).unwrap(), 0.0);
        prop_assert_eq!(rkl(&q, &q).unwrap(), 0.0);
        if p.max_abs_diff(&q) > 1e-3 {
            prop_assert!(fkl(&p, &q).unwrap() > 0.0 && rkl(&p, &q).unwrap() > 0.0);
        }
    }
}
