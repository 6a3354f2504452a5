use gdvae::counterfactual::{global_cf, local_cf, Metric};
use gdvae::gaussian::{
    argmax, gaussian_log_pdf, gda_posterior, kl_diag, sigmoid, two_class_discriminant, Covariance,
    DiagGaussian, GdaParams,
};
use gdvae::metrics::{binned_accuracy, bin_index, frechet_distance, pearson};
use proptest::prelude::*;

fn gda_strategy(max_m: usize, max_k: usize) -> impl Strategy<Value = GdaParams> {
    (1..=max_m, 2..=max_k).prop_flat_map(|(m, k)| {
        (
            prop::collection::vec(prop::collection::vec(-3.0..3.0f64, m), k),
            prop::collection::vec(-1.5..1.5f64, m),
            prop::collection::vec(0.05..1.0f64, k),
        )
            .prop_map(|(means, lv, w)| {
                let total: f64 = w.iter().sum();
                let lp = w.iter().map(|v| (v / total).ln()).collect();
                GdaParams::new(means, Covariance::Shared(lv), lp).unwrap()
            })
    })
}

fn point(m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0..4.0f64, m)
}

fn gda_and_z(max_m: usize, max_k: usize) -> impl Strategy<Value = (GdaParams, Vec<f64>)> {
    gda_strategy(max_m, max_k).prop_flat_map(|g| {
        let m = g.dim();
        (Just(g), point(m))
    })
}

fn brute_force(gda: &GdaParams, z: &[f64]) -> Vec<f64> {
    let joint: Vec<f64> = (0..gda.num_classes())
        .map(|c| gaussian_log_pdf(z, &gda.class_gaussian(c)).unwrap().exp() * gda.class_log_prior()[c].exp())
        .collect();
    let total: f64 = joint.iter().sum();
    joint.iter().map(|v| v / total).collect()
}

proptest! {
    #[test]
    fn posterior_is_normalized((gda, z) in gda_and_z(4, 5)) {
        let p = gda_posterior(&gda, &z).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn posterior_matches_brute_force((gda, z) in gda_and_z(4, 5)) {
        let p = gda_posterior(&gda, &z).unwrap();
        for (a, b) in p.iter().zip(brute_force(&gda, &z)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn pairwise_logit_matches_posterior((gda, z) in gda_and_z(4, 5), c in 0usize..5, k in 0usize..5) {
        let kk = gda.num_classes();
        let (c, k) = (c % kk, k % kk);
        prop_assume!(c != k);
        let f = two_class_discriminant(&gda, c, k).unwrap();
        let p = gda_posterior(&gda, &z).unwrap();
        let renorm = p[c] / (p[c] + p[k]);
        prop_assume!(p[c] + p[k] > 1e-200);
        prop_assert!((sigmoid(f.eval(&z)) - renorm).abs() < 1e-9);
    }

    #[test]
    fn kl_nonnegative_and_zero_on_equal(
        mq in prop::collection::vec(-3.0..3.0f64, 3),
        lq in prop::collection::vec(-2.0..2.0f64, 3),
        mp in prop::collection::vec(-3.0..3.0f64, 3),
        lp in prop::collection::vec(-2.0..2.0f64, 3),
    ) {
        let q = DiagGaussian::new(mq, lq).unwrap();
        let p = DiagGaussian::new(mp, lp).unwrap();
        prop_assert!(kl_diag(&q, &p).unwrap() >= 0.0);
        prop_assert!(kl_diag(&q, &q).unwrap().abs() < 1e-12);
    }

    #[test]
    fn argmax_ignores_constant_prior_shift((gda, z) in gda_and_z(3, 4), shift in -5.0..5.0f64) {
        let shifted: Vec<f64> = gda.class_log_prior().iter().map(|v| v + shift).collect();
        let norm = gdvae::gaussian::normalize_log(&shifted);
        let g2 = GdaParams::new(gda.class_means().to_vec(), gda.covariance().clone(), norm).unwrap();
        prop_assert_eq!(
            argmax(&gda_posterior(&gda, &z).unwrap()),
            argmax(&gda_posterior(&g2, &z).unwrap())
        );
    }

    #[test]
    fn local_steps_are_parallel_to_their_directions((gda, z) in gda_and_z(4, 3), delta in -6.0..6.0f64) {
        let f = two_class_discriminant(&gda, 0, 1).unwrap();
        let wn: f64 = f.w.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(wn > 1e-6);
        let var: Vec<f64> = gda.shared_log_var().unwrap().iter().map(|v| v.exp()).collect();
        let sw: Vec<f64> = var.iter().zip(&f.w).map(|(s, w)| s * w).collect();
        for (metric, dir) in [(Metric::L2, f.w.clone()), (Metric::Mahalanobis, sw)] {
            let cf = local_cf(&gda, 0, 1, &z, delta, metric).unwrap();
            let step: Vec<f64> = cf.z_delta.iter().zip(&z).map(|(a, b)| a - b).collect();
            let sn: f64 = step.iter().map(|v| v * v).sum::<f64>().sqrt();
            if sn < 1e-9 {
                continue;
            }
            let dn: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos: f64 = step.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>() / (sn * dn);
            prop_assert!((cos.abs() - 1.0).abs() < 1e-9, "cos {}", cos);
        }
    }

    #[test]
    fn zero_target_lands_on_boundary((gda, z) in gda_and_z(4, 2)) {
        for cf in [
            local_cf(&gda, 0, 1, &z, 0.0, Metric::L2),
            local_cf(&gda, 0, 1, &z, 0.0, Metric::Mahalanobis),
            global_cf(&gda, 0, 1, &z, 0.0),
        ] {
            let Ok(cf) = cf else { continue };
            let p = gda_posterior(&gda, &cf.z_delta).unwrap();
            prop_assert!((p[0] - 0.5).abs() < 1e-9 && (p[1] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn pearson_affine_invariant(
        xs in prop::collection::vec(-10.0..10.0f64, 3..30),
        a in 0.1..10.0f64,
        b in -10.0..10.0f64,
        seed in any::<u64>(),
    ) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * 0.5 + ((seed >> (i % 60)) & 7) as f64).collect();
        let Ok(r) = pearson(&xs, &ys) else { return Ok(()) };
        let xs2: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        let ys2: Vec<f64> = ys.iter().map(|y| a * y - b).collect();
        prop_assert!((pearson(&xs2, &ys).unwrap() - r).abs() < 1e-12);
        prop_assert!((pearson(&xs, &ys2).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn binned_accuracy_ignores_in_bin_jitter(
        bins in prop::collection::vec(0usize..12, 1..40),
        offsets in prop::collection::vec(0.0..1.0f64, 40),
        jitter in prop::collection::vec(-1.0..1.0f64, 40),
    ) {
        // Values sit in the middle half of their bins; jitter stays below 1/24.
        let width = 1.0 / 12.0;
        let base: Vec<f64> = bins.iter().zip(&offsets)
            .map(|(&b, o)| (b as f64 + 0.25 + 0.5 * o) * width)
            .collect();
        let moved: Vec<f64> = base.iter().zip(&jitter).map(|(v, j)| v + j * width / 4.0).collect();
        for (v, m) in base.iter().zip(&moved) {
            prop_assert_eq!(bin_index(*v, 12).unwrap(), bin_index(*m, 12).unwrap());
        }
        let other: Vec<f64> = base.iter().rev().copied().collect();
        prop_assert_eq!(
            binned_accuracy(&base, &other, 12).unwrap(),
            binned_accuracy(&moved, &other, 12).unwrap()
        );
    }

    #[test]
    fn frechet_is_a_symmetric_nonnegative_distance(
        a in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 3), 6..20),
        b in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 3), 6..20),
    ) {
        let (Ok(ab), Ok(ba)) = (frechet_distance(&a, &b), frechet_distance(&b, &a)) else {
            return Ok(());
        };
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    }
}
