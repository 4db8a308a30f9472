use flowcritic::critic::CriticConfig;
use flowcritic::eval::{
    bootstrap_std, histogram, jacobian, jacobian_fd, jacobian_rank, kl_gap, latent_stats, nll_histogram, shift_flow,
    train_independent_critic, w_hat, IndependentCriticConfig, KlDiscConfig, DEFAULT_TOL_RATIO,
};
use flowcritic::rng::RngStream;
use flowcritic::{Error, FlowModel, Tensor};

fn perturbed(dim: usize, seed: u64) -> FlowModel<f64> {
    let mut m = FlowModel::<f64>::build_nvp(1, dim, 8, seed).unwrap();
    let mut rng = RngStream::new(seed, 13);
    for p in m.params.values_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += 0.2 * rng.normal());
    }
    m
}

#[test]
fn reverse_mode_jacobian_matches_differences() {
    let m = perturbed(5, 1);
    let z = [0.3, -0.2, 1.1, 0.0, -0.7];
    let a = jacobian(&m, &z).unwrap();
    let b = jacobian_fd(&m, &z, 1e-6).unwrap();
    assert!((a - b).amax() < 1e-6);
}

#[test]
fn collapsed_coordinate_drops_the_rank() {
    // Scaling one output coordinate by exp(−4·6) leaves it far below 1e-3 of
    // the largest singular value.
    let mut m = FlowModel::<f64>::build_nvp(1, 3, 4, 0).unwrap();
    let mut hit = 0;
    for i in 0..m.num_layers() {
        if m.layers[i].update_mask()[0] && hit < 6 {
            let key = format!("flow.{i:02}.s.b");
            m.params.get_mut(&key).unwrap().data_mut()[0] = -20.0;
            hit += 1;
        }
    }
    let probes = RngStream::new(1, 5).normal_tensor::<f64>(3, 3);
    for r in jacobian_rank(&m, &probes, DEFAULT_TOL_RATIO).unwrap() {
        assert_eq!(r.rank, 2, "{:?}", r.singular_values);
    }
    let identity = FlowModel::<f64>::build_nvp(1, 3, 4, 0).unwrap();
    for r in jacobian_rank(&identity, &probes, DEFAULT_TOL_RATIO).unwrap() {
        assert_eq!(r.singular_values, vec![1.0; 3]);
    }
}

#[test]
fn rank_rejects_bad_tolerances() {
    let m = FlowModel::<f64>::build_nvp(1, 2, 4, 0).unwrap();
    let p = Tensor::row(vec![0.0, 0.0]);
    assert!(jacobian_rank(&m, &p, 0.0).is_err());
    assert!(jacobian_rank(&m, &p, 1.0).is_err());
}

#[test]
fn shifted_flow_kl_matches_closed_form() {
    // KL(N(μ, I) ‖ N(0, I)) = |μ|²/2.
    let shift = [1.0, -0.5, 0.25];
    let m = shift_flow(&shift, 4).unwrap();
    let expect = shift.iter().map(|v| v * v).sum::<f64>() / 2.0;
    let cfg = KlDiscConfig {
        updates: 1500,
        ..KlDiscConfig::default()
    };
    let g = kl_gap(&m, 20_000, &cfg, 1).unwrap();
    assert!((g.kl_unbiased - expect).abs() < 0.02 * expect, "{} vs {expect}", g.kl_unbiased);
}

#[test]
fn bootstrap_of_constant_values_is_zero() {
    let mut rng = RngStream::new(0, 5);
    assert_eq!(bootstrap_std(&[2.0; 10], 50, &mut rng), 0.0);
    let spread = bootstrap_std(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 500, &mut rng);
    // Standard error of the mean: population std / √n.
    let se = (17.5f64 / 6.0).sqrt() / 6f64.sqrt();
    assert!((spread - se).abs() < 0.15 * se, "{spread} vs {se}");
}

#[test]
fn self_comparison_is_statistically_null() {
    let mut rng = RngStream::new(3, 1);
    let a = rng.normal_tensor::<f64>(2000, 2);
    let b = rng.normal_tensor::<f64>(2000, 2).map(|v| 1.5 * v);
    let mut cfg = IndependentCriticConfig::new(CriticConfig {
        hidden: 16,
        ..CriticConfig::plain(2)
    });
    cfg.budget = 200;
    let ic = train_independent_critic(&a, &b, &cfg, 1).unwrap();
    let e = w_hat(&ic, &a, &a, 200, 64, 2).unwrap();
    assert!(e.value.abs() < 3.0 * e.std.max(1e-12), "{e:?}");
    assert!(matches!(w_hat(&ic, &a, &a.select_rows(&[0, 1]), 10, 64, 2), Err(Error::InsufficientSamples(_))));
}

#[test]
fn latent_stats_of_the_identity_flow() {
    let m = FlowModel::<f64>::build_nvp(1, 2, 4, 0).unwrap();
    let x = RngStream::new(2, 1).normal_tensor::<f64>(5000, 2);
    let st = latent_stats(&m, &x, (0, 1), 10, (-4.0, 4.0)).unwrap();
    for d in 0..2 {
        assert!(st.mean[d].abs() < 0.05);
        assert!((st.std[d] - 1.0).abs() < 0.05);
    }
    let inside: u64 = st.grid.counts.iter().sum();
    assert!(inside <= 5000 && inside > 4990);
    assert!(latent_stats(&m, &x, (0, 2), 10, (-4.0, 4.0)).is_err());
}

#[test]
fn nll_histogram_covers_every_example() {
    let m = perturbed(2, 4);
    let x = RngStream::new(4, 1).normal_tensor::<f64>(300, 2);
    let h = nll_histogram(&m, &x, 20).unwrap();
    assert_eq!(h.total(), 300);
    assert_eq!(h.edges.len(), 21);
    assert!(histogram(&[f64::NAN], 3).is_err());
}
