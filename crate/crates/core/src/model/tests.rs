use super::*;
use crate::augment::{Augmentation, CoordinatedDropout};
use crate::autodiff::gradcheck::{finite_difference_grad, max_relative_error};
use crate::priors::{AutoregressiveMultivariateNormal, MultivariateNormal};
use crate::recon::Poisson;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(co_dim: usize) -> LfadsConfig {
    LfadsConfig {
        ic_enc_dim: 4,
        ci_enc_dim: 3,
        ic_dim: 4,
        con_dim: 4,
        co_dim,
        gen_dim: 8,
        fac_dim: 3,
        dropout_rate: 0.0,
        kl_increase: 0,
        l2_increase: 0,
        l2_gen_scale: 0.1,
        l2_con_scale: 0.1,
        ..LfadsConfig::default()
    }
}

fn dims(t_enc: usize, t_recon: usize, n_enc: usize, n_recon: usize) -> DataDims {
    DataDims {
        t_enc,
        t_recon,
        n_enc,
        n_recon,
    }
}

fn build(config: LfadsConfig, d: DataDims, seed: u64) -> Lfads {
    let co = (config.co_dim > 0)
        .then(|| Box::new(AutoregressiveMultivariateNormal::new(config.co_dim, 10.0, 0.1, true)) as Box<dyn Prior>);
    let ic = Box::new(MultivariateNormal::new(config.ic_dim, 0.0, 1.0, false, true));
    Lfads::new(
        config,
        d,
        Box::new(Poisson),
        ic,
        co,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
}

fn counts(b: usize, d: DataDims, seed: u64) -> TrialBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recon = Tensor::new(
        vec![b, d.t_recon, d.n_recon],
        (0..b * d.t_recon * d.n_recon)
            .map(|_| rng.random_range(0..4) as f64)
            .collect(),
    )
    .unwrap();
    TrialBatch {
        encod_data: recon.block3(0..d.t_enc, 0..d.n_enc).unwrap(),
        sample_mask: Tensor::ones(recon.shape()),
        recon_data: recon,
        trial_indices: (0..b).collect(),
    }
}

fn det_loss(model: &Lfads, batch: &TrialBatch, step: u64) -> (Tape, Var, Bound, LossComponents) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = model
        .forward(&mut tape, &bound, batch, &mut Sampling::Deterministic, Phase::Train)
        .unwrap();
    let (loss, comps) = model
        .loss(&mut tape, &bound, batch, &out, &AugmentationStack::default(), step)
        .unwrap();
    (tape, loss, bound, comps)
}

fn gradient_error(model: &Lfads, batch: &TrialBatch) -> f64 {
    let (mut tape, loss, bound, _) = det_loss(model, batch, 10);
    tape.backward(loss).unwrap();
    let analytic = model.flat_grad(&tape, &bound);
    let theta = model.flat_trainable();
    let mut probe = model.clone();
    let fd = finite_difference_grad(
        |th| {
            probe.set_flat_trainable(th).unwrap();
            let (tape, loss, _, _) = det_loss(&probe, batch, 10);
            tape.value(loss).item()
        },
        &theta,
        1e-5,
    );
    max_relative_error(&analytic, &fd, 1e-3)
}

#[test]
fn ramp_endpoints() {
    assert_eq!(ramp(100, 100, 50), 0.0);
    assert_eq!(ramp(150, 100, 50), 1.0);
    assert_eq!(ramp(125, 100, 50), 0.5);
    assert_eq!(ramp(5, 10, 0), 0.0);
    assert_eq!(ramp(10, 10, 0), 1.0);
}

#[test]
fn zero_network_gives_zero_outputs() {
    let d = dims(5, 5, 3, 3);
    let mut m = build(small_config(0), d, 1);
    for name in [
        "gen.b",
        "gen.w_hh_rz",
        "gen.w_hh_n",
        "ic_to_g0.w",
        "ic_to_g0.b",
        "out.w",
        "out.b",
    ] {
        m.weight_mut(name).unwrap().value.data_mut().fill(0.0);
    }
    let batch = counts(2, d, 0);
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape);
    let out = m
        .forward(&mut tape, &bound, &batch, &mut Sampling::Deterministic, Phase::Infer)
        .unwrap();
    assert!(tape.value(out.raw).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(out.factors).data().iter().all(|&v| v == 0.0));
}

#[test]
fn deterministic_forward_is_bitwise_repeatable() {
    let d = dims(6, 8, 3, 4);
    let m = build(small_config(2), d, 2);
    let batch = counts(3, d, 1);
    let a = m.predict(&batch, &mut Sampling::Deterministic, Phase::Infer).unwrap();
    let b = m.predict(&batch, &mut Sampling::Deterministic, Phase::Infer).unwrap();
    assert_eq!(a, b);
}

#[test]
fn forward_prediction_steps_use_prior_mean_input() {
    let d = dims(1, 3, 2, 2);
    let m = build(small_config(2), d, 3);
    let batch = counts(2, d, 2);
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape);
    let out = m
        .forward(&mut tape, &bound, &batch, &mut Sampling::Deterministic, Phase::Infer)
        .unwrap();
    assert_eq!(tape.shape(out.factors), &[2, 3, 3]);
    assert_eq!(tape.shape(out.co_sample.unwrap()), &[2, 1, 2]);

    let gs = tape.value(out.gen_states).clone();
    let w = |n: &str| m.weight(n).unwrap().value.clone();
    let (b, w_rz, w_n) = (w("gen.b"), w("gen.w_hh_rz"), w("gen.w_hh_n"));
    let (w_ih, fac) = (w("gen.w_ih"), w("fac.w"));
    let u = m.co_prior.as_ref().unwrap().mean();
    let h = 8;
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    for trial in 0..2 {
        let mut g: Vec<f64> = (0..h).map(|j| gs.at(&[trial, 0, j])).collect();
        for t in 1..3 {
            // hand-unrolled GRU step with the prior mean as input
            let xi: Vec<f64> = (0..3 * h)
                .map(|k| b.data()[k] + (0..2).map(|i| u[i] * w_ih.at(&[i, k])).sum::<f64>())
                .collect();
            let rz: Vec<f64> = (0..2 * h)
                .map(|k| sig(xi[k] + (0..h).map(|i| g[i] * w_rz.at(&[i, k])).sum::<f64>()))
                .collect();
            let rh: Vec<f64> = (0..h).map(|i| rz[i] * g[i]).collect();
            let n: Vec<f64> = (0..h)
                .map(|k| (xi[2 * h + k] + (0..h).map(|i| rh[i] * w_n.at(&[i, k])).sum::<f64>()).tanh())
                .collect();
            g = (0..h).map(|k| (1.0 - rz[h + k]) * n[k] + rz[h + k] * g[k]).collect();
            for (k, gk) in g.iter().enumerate() {
                assert!((gs.at(&[trial, t, k]) - gk).abs() < 1e-12);
            }
            for f in 0..3 {
                let want: f64 = (0..h).map(|k| g[k] * fac.at(&[f, k])).sum();
                assert!((tape.value(out.factors).at(&[trial, t, f]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let d = dims(5, 5, 4, 4);
    let m = build(small_config(2), d, 4);
    let err = gradient_error(&m, &counts(2, d, 3));
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn gradient_with_held_out_and_forward_steps() {
    let d = dims(4, 6, 3, 5);
    let m = build(small_config(2), d, 5);
    let err = gradient_error(&m, &counts(2, d, 4));
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn no_controller_means_no_co_terms() {
    let d = dims(5, 5, 3, 3);
    let m = build(small_config(0), d, 6);
    assert!(m
        .params()
        .iter()
        .all(|(n, _)| !n.starts_with("con.") && !n.starts_with("ci_enc")));
    let (_, _, _, comps) = det_loss(&m, &counts(2, d, 5), 10);
    assert_eq!(comps.kl_co, 0.0);
}

#[test]
fn components_sum_to_total() {
    let d = dims(5, 6, 3, 4);
    let m = build(small_config(2), d, 7);
    let (_, _, _, c) = det_loss(&m, &counts(3, d, 6), 10);
    assert!((c.recon + c.kl_ic + c.kl_co + c.l2 - c.total).abs() < 1e-9 * c.total.abs());
}

#[test]
fn zero_ramps_leave_only_reconstruction() {
    let d = dims(5, 5, 3, 3);
    let mut cfg = small_config(2);
    cfg.kl_start = 100;
    cfg.l2_start = 100;
    let m = build(cfg, d, 8);
    let batch = counts(2, d, 7);
    let (mut tape, loss, bound, comps) = det_loss(&m, &batch, 0);
    assert_eq!(comps.total, comps.recon);
    let out = m
        .forward(&mut tape, &bound, &batch, &mut Sampling::Deterministic, Phase::Train)
        .unwrap();
    let nll = m.recon.nll(&mut tape, &[], out.raw, &batch.recon_data).unwrap();
    let s = tape.sum_all(nll).unwrap();
    assert_eq!(tape.value(loss).item(), tape.value(s).item() / 2.0);
}

#[test]
fn factor_rows_have_unit_norm() {
    let d = dims(4, 4, 2, 2);
    let mut m = build(small_config(0), d, 9);
    m.weight_mut("fac.w")
        .unwrap()
        .value
        .data_mut()
        .iter_mut()
        .for_each(|v| *v *= 3.7);
    m.normalize_factor_rows();
    let f = &m.weight("fac.w").unwrap().value;
    for row in f.data().chunks(f.shape()[1]) {
        assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn dropout_only_in_stochastic_training() {
    let d = dims(5, 5, 3, 3);
    let mut cfg = small_config(2);
    cfg.dropout_rate = 0.5;
    let m = build(cfg, d, 10);
    let batch = counts(2, d, 8);
    let det = m.predict(&batch, &mut Sampling::Deterministic, Phase::Train).unwrap();
    let inf = m.predict(&batch, &mut Sampling::Deterministic, Phase::Infer).unwrap();
    assert_eq!(det, inf);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tr = m
        .predict(&batch, &mut Sampling::Stochastic(&mut rng), Phase::Train)
        .unwrap();
    assert_ne!(tr, inf);
}

#[test]
fn tiny_posterior_variance_average_matches_deterministic() {
    let d = dims(5, 5, 3, 3);
    let mut m = build(small_config(2), d, 11);
    for (name, dim) in [("ic_post", 4), ("co_post", 2)] {
        let w = &mut m.weight_mut(&format!("{name}.w")).unwrap().value;
        let cols = w.shape()[1];
        for row in w.data_mut().chunks_mut(cols) {
            row[dim..].fill(0.0);
        }
        m.weight_mut(&format!("{name}.b")).unwrap().value.data_mut()[dim..].fill(-40.0);
    }
    let batch = counts(2, d, 9);
    let (det, _) = m.predict(&batch, &mut Sampling::Deterministic, Phase::Infer).unwrap();
    let avg = m
        .posterior_average(&batch, 1, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    assert!(max_relative_error(avg.rates.data(), det.data(), 1.0) < 1e-3);
}

#[test]
fn posterior_average_is_seeded_and_shrinks_variance() {
    let d = dims(5, 5, 3, 3);
    let m = build(small_config(2), d, 12);
    let batch = counts(1, d, 10);
    let a = m
        .posterior_average(&batch, 3, &mut ChaCha8Rng::seed_from_u64(5))
        .unwrap();
    let b = m
        .posterior_average(&batch, 3, &mut ChaCha8Rng::seed_from_u64(5))
        .unwrap();
    assert_eq!(a, b);
    assert!(m
        .posterior_average(&batch, 0, &mut ChaCha8Rng::seed_from_u64(5))
        .is_err());

    let spread = |n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(77 + n as u64);
        let est: Vec<f64> = (0..200)
            .map(|_| m.posterior_average(&batch, n, &mut rng).unwrap().rates.data()[0])
            .collect();
        let mean = est.iter().sum::<f64>() / est.len() as f64;
        est.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (est.len() - 1) as f64
    };
    let ratio = spread(1) / spread(4);
    assert!((2.0..8.0).contains(&ratio), "variance ratio {ratio}");
}

#[test]
fn batch_shape_is_checked() {
    let d = dims(5, 5, 3, 3);
    let m = build(small_config(0), d, 13);
    let bad = counts(2, dims(4, 5, 3, 3), 0);
    assert!(matches!(
        m.predict(&bad, &mut Sampling::Deterministic, Phase::Infer),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn prior_dimension_mismatch_is_rejected() {
    let d = dims(5, 5, 3, 3);
    let r = Lfads::new(
        small_config(2),
        d,
        Box::new(Poisson),
        Box::new(MultivariateNormal::standard(3)),
        Some(Box::new(MultivariateNormal::standard(2))),
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    assert!(r.is_err());
    let r = Lfads::new(
        small_config(2),
        d,
        Box::new(Poisson),
        Box::new(MultivariateNormal::standard(4)),
        None,
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    assert!(r.is_err());
}

#[test]
fn training_step_with_dropout_augmentation_runs() {
    let d = dims(5, 5, 3, 3);
    let mut m = build(small_config(2), d, 14);
    m.train_aug = AugmentationStack::new(vec![Augmentation::CoordinatedDropout(
        CoordinatedDropout::new(0.3).unwrap(),
    )]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut aug = m.train_aug.clone();
    let batch = aug.apply_batch(counts(2, d, 11), &mut rng).unwrap();
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape);
    let out = m
        .forward(
            &mut tape,
            &bound,
            &batch,
            &mut Sampling::Stochastic(&mut rng),
            Phase::Train,
        )
        .unwrap();
    let (loss, c) = m.loss(&mut tape, &bound, &batch, &out, &aug, 3).unwrap();
    tape.backward(loss).unwrap();
    assert!(c.total.is_finite());
    assert!(m.flat_grad(&tape, &bound).iter().all(|g| g.is_finite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn output_shapes_follow_config(
        co in 0usize..3,
        gen in 1usize..6,
        fac in 1usize..4,
        t_enc in 1usize..5,
        fp in 0usize..3,
        n_enc in 1usize..4,
        held in 0usize..3,
        b in 1usize..4,
    ) {
        let mut cfg = small_config(co);
        cfg.gen_dim = gen;
        cfg.fac_dim = fac;
        let d = dims(t_enc, t_enc + fp, n_enc, n_enc + held);
        let m = build(cfg, d, 15);
        let batch = counts(b, d, 12);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let out = m.forward(&mut tape, &bound, &batch, &mut Sampling::Deterministic, Phase::Infer).unwrap();
        prop_assert_eq!(tape.shape(out.factors), &[b, t_enc + fp, fac][..]);
        prop_assert_eq!(tape.shape(out.gen_states), &[b, t_enc + fp, gen][..]);
        prop_assert_eq!(tape.shape(out.raw), &[b, t_enc + fp, n_enc + held][..]);
        prop_assert_eq!(tape.shape(out.ic_sample), &[b, 4][..]);
        match out.co_sample {
            Some(z) => prop_assert_eq!(tape.shape(z), &[b, t_enc, co][..]),
            None => prop_assert_eq!(co, 0),
        }
    }
}
