use super::*;
use crate::rng::SeededRng;
use proptest::prelude::*;

fn randn(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    Tensor::random_normal(rng, shape.to_vec(), 0.0, 1.0).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {k}: {x} vs {y}");
    }
}

fn em_instance(rng: &mut SeededRng, i: usize, j: usize) -> (EmCapsules, EmLayerParams) {
    let a = Tensor::random_uniform(rng, vec![i], 0.0, 1.0);
    let caps = EmCapsules::new(a, randn(rng, &[i, POSE_DIM])).unwrap();
    let mut params = EmLayerParams::with_weights(randn(rng, &[i, j, POSE_DIM])).unwrap();
    params.beta_a = randn(rng, &[j]);
    params.beta_u = randn(rng, &[j]);
    (caps, params)
}

#[test]
fn squash_zero_unit_and_three_four() {
    let z = squash(&Tensor::zeros(vec![3]), 1e-9).unwrap();
    assert!(z.data().iter().all(|v| *v == 0.0));

    let eps = 1e-9;
    let e1 = squash(&Tensor::vector(vec![1.0, 0.0]).unwrap(), eps).unwrap();
    close(e1.data(), &[0.5 / (1.0 + eps), 0.0], 1e-15);

    // 25/26 · (0.6, 0.8)
    let v = squash(&Tensor::vector(vec![3.0, 4.0]).unwrap(), 1e-12).unwrap();
    close(v.data(), &[0.5769230769230769, 0.7692307692307693], 1e-12);
}

#[test]
fn squash_acts_on_last_axis() {
    let s = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
    let v = squash(&s, 1e-12).unwrap();
    close(
        v.data(),
        &[0.5769230769230769, 0.7692307692307693, 0.0, 0.0],
        1e-12,
    );
}

#[test]
fn predictions_scaled_identity() {
    let mut w = Tensor::zeros(vec![1, 1, 2, 2]);
    w.data_mut()[0] = 2.0;
    w.data_mut()[3] = 2.0;
    let u = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let p = rba_predictions(&u, &w).unwrap();
    assert_eq!(p.shape(), &[1, 1, 2]);
    assert_eq!(p.data(), &[2.0, 4.0]);
}

#[test]
fn predictions_of_zero_and_negated_input() {
    let mut rng = SeededRng::new(1);
    let w = randn(&mut rng, &[3, 2, 4, 5]);
    let zero = rba_predictions(&Tensor::zeros(vec![3, 5]), &w).unwrap();
    assert!(zero.data().iter().all(|v| *v == 0.0));
    let u = randn(&mut rng, &[3, 5]);
    let pos = rba_predictions(&u, &w).unwrap();
    let neg = rba_predictions(&u.neg(), &w).unwrap();
    assert_eq!(neg, pos.neg());
}

#[test]
fn rba_two_inputs_one_parent() {
    // a sole parent takes c = 1, so s = (1, 1) and v = (2/3)·(1, 1)/√2
    let u = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let params = RbaLayerParams::zero_bias(Tensor::zeros(vec![2, 1, 2, 2])).unwrap();
    let cfg = RoutingConfig::new(1, false);
    let mut rec = TraceRecorder::default();
    let (v, _) = rba_route_observed(&u, &cfg, &params, Some(&mut rec)).unwrap();
    close(rec.rba[0].preactivation.data(), &[1.0, 1.0], 0.0);
    close(v.data(), &[0.4714045204576983, 0.4714045204576983], 1e-12);
}

#[test]
fn rba_two_inputs_two_identical_parents() {
    // c = 1/2 everywhere: s = (0.5, 0.5), factor 1/3, unit (1, 1)/√2
    let u = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let params = RbaLayerParams::zero_bias(Tensor::zeros(vec![2, 2, 2, 2])).unwrap();
    let mut rec = TraceRecorder::default();
    let (v, _) =
        rba_route_observed(&u, &RoutingConfig::new(1, false), &params, Some(&mut rec)).unwrap();
    close(rec.rba[0].preactivation.data(), &[0.5; 4], 0.0);
    close(v.data(), &[0.23570226006218248; 4], 1e-12);
}

#[test]
fn rba_single_iteration_couples_uniformly() {
    let mut rng = SeededRng::new(3);
    let u = randn(&mut rng, &[4, 3, 2]);
    let params = RbaLayerParams::zero_bias(Tensor::zeros(vec![4, 3, 2, 2])).unwrap();
    let mut rec = TraceRecorder::default();
    rba_route_observed(&u, &RoutingConfig::new(1, false), &params, Some(&mut rec)).unwrap();
    assert!(rec.rba[0]
        .coupling
        .data()
        .iter()
        .all(|c| (*c - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn rba_matches_independent_oracle() {
    let (i, j, h) = (3, 2, 2);
    let mut data = Vec::new();
    for ii in 0..i {
        for jj in 0..j {
            for hh in 0..h {
                data.push(((ii + 2 * jj + 3 * hh + 1) as f64).sin());
            }
        }
    }
    let u = Tensor::new(vec![i, j, h], data).unwrap();
    let params = RbaLayerParams::zero_bias(Tensor::zeros(vec![i, j, h, h])).unwrap();
    let v = rba_route(&u, &RoutingConfig::new(3, false), &params).unwrap();
    close(
        v.data(),
        &[
            0.5608255659197371,
            -0.5584907927151648,
            -0.4562274796448575,
            0.4429365369254284,
        ],
        1e-12,
    );
}

#[test]
fn rba_rejects_zero_iterations() {
    let params = RbaLayerParams::zero_bias(Tensor::zeros(vec![1, 1, 2, 2])).unwrap();
    let u = Tensor::zeros(vec![1, 1, 2]);
    let cfg = RoutingConfig::new(0, false);
    assert!(matches!(
        rba_route(&u, &cfg, &params),
        Err(Error::Contract(_))
    ));
}

#[test]
fn rba_bias_breaks_negation() {
    let mut rng = SeededRng::new(5);
    let u = randn(&mut rng, &[4, 3, 5]);
    let mut params = RbaLayerParams::zero_bias(Tensor::zeros(vec![4, 3, 5, 5])).unwrap();
    params.bias = Tensor::full(vec![3, 5], 0.1);
    let cfg = RoutingConfig::new(3, true);
    let pos = rba_route(&u, &cfg, &params).unwrap();
    let neg = rba_route(&u.neg(), &cfg, &params).unwrap();
    assert!(pos.add(&neg).unwrap().max_abs() > 1e-3);
    // disabling the bias ignores the tensor entirely
    let off = RoutingConfig::new(3, false);
    let pos = rba_route(&u, &off, &params).unwrap();
    let neg = rba_route(&u.neg(), &off, &params).unwrap();
    assert!(pos.add(&neg).unwrap().max_abs() <= 1e-12);
}

#[test]
fn loop_equals_manual_unrolling() {
    let mut rng = SeededRng::new(8);
    let u = randn(&mut rng, &[3, 2, 4]);
    let params = RbaLayerParams::zero_bias(Tensor::zeros(vec![3, 2, 4, 4])).unwrap();
    let looped = rba_route(&u, &RoutingConfig::new(2, false), &params).unwrap();

    let mut g = Graph::new();
    let p = g.constant(with_batch(&u).unwrap());
    let b0 = g.constant(Tensor::zeros(vec![1, 3, 2]));
    let c0 = g.softmax(b0).unwrap();
    let s0 = g.weighted_sum(c0, p).unwrap();
    let v0 = g.squash(s0, 1e-9).unwrap();
    let a0 = g.agreement(v0, p).unwrap();
    let b1 = g.add(b0, a0).unwrap();
    let c1 = g.softmax(b1).unwrap();
    let s1 = g.weighted_sum(c1, p).unwrap();
    let v1 = g.squash(s1, 1e-9).unwrap();
    assert_eq!(g.value(v1).data(), looped.data());
}

#[test]
fn votes_zero_negation_and_bias_algebra() {
    let mut rng = SeededRng::new(11);
    let (caps, mut params) = em_instance(&mut rng, 3, 2);
    let zero = EmCapsules::new(caps.activations.clone(), Tensor::zeros(vec![3, 16])).unwrap();
    assert!(em_votes(&zero, &params, false)
        .unwrap()
        .data()
        .iter()
        .all(|v| *v == 0.0));

    let pos = em_votes(&caps, &params, false).unwrap();
    let neg = em_votes(&caps.negated(), &params, false).unwrap();
    assert_eq!(neg, pos.neg());

    params.vote_bias = randn(&mut rng, &[2, 16]);
    let pos_b = em_votes(&caps, &params, true).unwrap();
    let neg_b = em_votes(&caps.negated(), &params, true).unwrap();
    // −(MW + b) + 2b = −MW + b
    let mut expected = pos_b.neg();
    for (k, e) in expected.data_mut().iter_mut().enumerate() {
        *e += 2.0 * params.vote_bias.data()[k % 32];
    }
    close(neg_b.data(), expected.data(), 1e-12);
    assert!(neg_b.add(&pos_b).unwrap().max_abs() > 1e-3);
}

#[test]
fn votes_four_by_four_product() {
    // M = I, W = any: V = W
    let mut m = vec![0.0; 16];
    for d in 0..4 {
        m[d * 5] = 1.0;
    }
    let caps = EmCapsules::new(
        Tensor::vector(vec![1.0]).unwrap(),
        Tensor::new(vec![1, 16], m).unwrap(),
    )
    .unwrap();
    let w = Tensor::new(vec![1, 1, 16], (0..16).map(f64::from).collect()).unwrap();
    let params = EmLayerParams::with_weights(w.clone()).unwrap();
    assert_eq!(em_votes(&caps, &params, false).unwrap().data(), w.data());
}

#[test]
fn m_step_single_point() {
    let v = Tensor::new(
        vec![1, 1, 16],
        (0..16).map(|k| k as f64 * 0.5 - 3.0).collect(),
    )
    .unwrap();
    let out = em_m_step(
        &Tensor::vector(vec![1.0]).unwrap(),
        &Tensor::full(vec![1, 1], 1.0),
        &v,
        &Tensor::zeros(vec![1]),
        &Tensor::zeros(vec![1]),
        0.01,
        1e-8,
    )
    .unwrap();
    assert_eq!(out.mean.data(), v.data());
    assert!(out.variance.data().iter().all(|s| *s == 1e-8));
    assert_eq!(out.guards.variance_floor, 16);
}

#[test]
fn m_step_two_equal_votes() {
    let v = Tensor::full(vec![2, 1, 16], 0.7);
    let out = em_m_step(
        &Tensor::vector(vec![0.3, 0.9]).unwrap(),
        &Tensor::full(vec![2, 1], 1.0),
        &v,
        &Tensor::zeros(vec![1]),
        &Tensor::zeros(vec![1]),
        0.01,
        1e-8,
    )
    .unwrap();
    assert!(out.variance.data().iter().all(|s| *s == 1e-8));
}

#[test]
fn m_step_weighted_mean_and_variance() {
    let mut v = vec![0.0; 32];
    v[16..].iter_mut().for_each(|x| *x = 2.0);
    let out = em_m_step(
        &Tensor::vector(vec![1.0, 1.0]).unwrap(),
        &Tensor::full(vec![2, 1], 0.5),
        &Tensor::new(vec![2, 1, 16], v).unwrap(),
        &Tensor::zeros(vec![1]),
        &Tensor::zeros(vec![1]),
        0.01,
        1e-8,
    )
    .unwrap();
    close(out.mean.data(), &[1.0; 16], 1e-15);
    close(out.variance.data(), &[1.0; 16], 1e-15);
    // cost = (β_u + log 1)·1 = 0, so a = logistic(0)
    close(out.activations.data(), &[0.5], 1e-15);
    assert_eq!(out.guards.total(), 0);
}

#[test]
fn m_step_empty_column_is_guarded() {
    let out = em_m_step(
        &Tensor::vector(vec![0.0, 0.0]).unwrap(),
        &Tensor::full(vec![2, 1], 0.5),
        &Tensor::full(vec![2, 1, 16], 1.0),
        &Tensor::zeros(vec![1]),
        &Tensor::zeros(vec![1]),
        0.01,
        1e-8,
    )
    .unwrap();
    assert!(out.mean.is_finite() && out.activations.is_finite());
    assert_eq!(out.guards.empty_column, 1);
    assert_eq!(out.guards.variance_floor, 16);
}

#[test]
fn m_step_rejects_negative_responsibility() {
    let r = em_m_step(
        &Tensor::vector(vec![1.0]).unwrap(),
        &Tensor::full(vec![1, 1], -0.1),
        &Tensor::zeros(vec![1, 1, 16]),
        &Tensor::zeros(vec![1]),
        &Tensor::zeros(vec![1]),
        0.01,
        1e-8,
    );
    assert!(r.is_err());
}

#[test]
fn e_step_sole_parent_and_symmetric_parents() {
    let mut rng = SeededRng::new(13);
    let v = randn(&mut rng, &[3, 1, 16]);
    let (r, _) = em_e_step(
        &Tensor::zeros(vec![1, 16]),
        &Tensor::full(vec![1, 16], 0.5),
        &Tensor::vector(vec![0.4]).unwrap(),
        &v,
    )
    .unwrap();
    assert!(r.data().iter().all(|x| *x == 1.0));

    let v = randn(&mut rng, &[3, 4, 16]);
    // identical parents see identical votes
    let mut same = v.clone();
    for i in 0..3 {
        for j in 1..4 {
            for h in 0..16 {
                same.data_mut()[(i * 4 + j) * 16 + h] = v.data()[i * 64 + h];
            }
        }
    }
    let (r, _) = em_e_step(
        &Tensor::full(vec![4, 16], 0.2),
        &Tensor::full(vec![4, 16], 1.5),
        &Tensor::full(vec![4], 0.7),
        &same,
    )
    .unwrap();
    close(r.data(), &[0.25; 12], 1e-15);
}

#[test]
fn e_step_vote_at_first_mean() {
    let mut mu = vec![0.0; 32];
    mu[16..].iter_mut().for_each(|x| *x = 10.0);
    // log p1 − log p2 = 16 · 100 / 2 = 800
    let (r, guards) = em_e_step(
        &Tensor::new(vec![2, 16], mu).unwrap(),
        &Tensor::full(vec![2, 16], 1.0),
        &Tensor::full(vec![2], 0.5),
        &Tensor::zeros(vec![1, 2, 16]),
    )
    .unwrap();
    assert_eq!(r.data(), &[1.0, 0.0]);
    assert_eq!(guards.total(), 0);
}

#[test]
fn e_step_underflow_falls_back_to_uniform() {
    let (r, guards) = em_e_step(
        &Tensor::zeros(vec![2, 16]),
        &Tensor::full(vec![2, 16], 1.0),
        &Tensor::zeros(vec![2]),
        &Tensor::zeros(vec![1, 2, 16]),
    )
    .unwrap();
    assert_eq!(r.data(), &[0.5, 0.5]);
    assert_eq!(guards.underflow_fallback, 1);
}

#[test]
fn em_matches_independent_oracle() {
    let (i, j) = (2, 2);
    let a = Tensor::vector(vec![0.9, 0.4]).unwrap();
    let mut m = Vec::new();
    for k in 0..16 {
        m.push((k as f64 - 7.5) / 8.0);
    }
    for k in 0..16 {
        m.push(((k * 7) % 16) as f64 / 10.0 - 0.75);
    }
    let mut w = Vec::new();
    for ii in 0..i {
        for jj in 0..j {
            for k in 0..16 {
                w.push(((1 + ii + 2 * jj + 3 * k) as f64).sin() * 0.5);
            }
        }
    }
    let caps = EmCapsules::new(a, Tensor::new(vec![2, 16], m).unwrap()).unwrap();
    let mut params = EmLayerParams::with_weights(Tensor::new(vec![i, j, 16], w).unwrap()).unwrap();
    params.beta_a = Tensor::vector(vec![0.1, -0.2]).unwrap();
    params.beta_u = Tensor::vector(vec![0.05, 0.0]).unwrap();
    let (out, guards) =
        em_route_observed(&caps, &RoutingConfig::new(3, false), &params, None).unwrap();
    assert_eq!(guards.total(), 0);
    close(
        out.activations.data(),
        &[0.8744228153928695, 0.49826596979927085],
        1e-10,
    );
    let mu = [
        -0.2821259613976961,
        0.1747952311311004,
        -0.06396597312496412,
        -0.04814356426818005,
        -0.1563090669839252,
        0.10256134917404348,
        -0.046760865263117464,
        -0.009975537683982039,
        0.062474844679956155,
        -0.009326904726675599,
        -0.04400771328812391,
        0.09646151662224837,
        -0.0355353198172101,
        0.1544821116948861,
        -0.2703369430566481,
        0.3807809786650811,
        -0.555980386955363,
        0.6301092363525193,
        -0.6916264450998981,
        0.7393007458461591,
        -0.27119310833233645,
        0.3102527106874898,
        -0.34310260292879086,
        0.36908529423968023,
        0.3124279768439346,
        -0.3391752935461094,
        0.3591340144418691,
        -0.37190466559678326,
        0.7835051004658887,
        -0.8207515973573482,
        0.8415707454473208,
        -0.8455458493452338,
    ];
    close(out.poses.data(), &mu, 1e-10);
}

#[test]
fn em_negation_invariance_single_instance() {
    let mut rng = SeededRng::new(17);
    let (caps, params) = em_instance(&mut rng, 5, 3);
    let cfg = RoutingConfig::new(3, false);
    let pos = em_route(&caps, &cfg, &params).unwrap();
    let neg = em_route(&caps.negated(), &cfg, &params).unwrap();
    assert!(pos.activations.max_abs_diff(&neg.activations).unwrap() <= 1e-9);
    assert!(pos.poses.add(&neg.poses).unwrap().max_abs() <= 1e-9);
}

#[test]
fn em_rejects_bad_schedule() {
    let mut rng = SeededRng::new(19);
    let (caps, params) = em_instance(&mut rng, 2, 2);
    let mut cfg = RoutingConfig::new(3, false);
    cfg.lambda_schedule.pop();
    assert!(matches!(
        em_route(&caps, &cfg, &params),
        Err(Error::Config(_))
    ));
    let cfg = RoutingConfig::new(0, false);
    assert!(matches!(
        em_route(&caps, &cfg, &params),
        Err(Error::Contract(_))
    ));
}

#[test]
fn schedule_doubles() {
    let cfg = RoutingConfig::new(4, false);
    assert_eq!(cfg.lambda_schedule, vec![0.01, 0.02, 0.04, 0.08]);
    assert_eq!(
        cfg.clone().with_iterations(2).lambda_schedule,
        vec![0.01, 0.02]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rba_output_is_odd(seed in any::<u64>(), i in 1usize..=8, j in 1usize..=8, h in 1usize..=8, r in 1usize..=3) {
        let mut rng = SeededRng::new(seed);
        let u = randn(&mut rng, &[i, j, h]);
        let params = RbaLayerParams::zero_bias(Tensor::zeros(vec![i, j, h, 1])).unwrap();
        let cfg = RoutingConfig::new(r, false);
        let mut rp = TraceRecorder::default();
        let mut rn = TraceRecorder::default();
        let (vp, _) = rba_route_observed(&u, &cfg, &params, Some(&mut rp)).unwrap();
        let (vn, _) = rba_route_observed(&u.neg(), &cfg, &params, Some(&mut rn)).unwrap();
        prop_assert!(vp.add(&vn).unwrap().max_abs() <= 1e-9);
        for (a, b) in rp.rba.iter().zip(&rn.rba) {
            prop_assert!(a.coupling.max_abs_diff(&b.coupling).unwrap() <= 1e-12);
            for row in a.coupling.data().chunks(j) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
        for (p, n) in vp.data().chunks(h).zip(vn.data().chunks(h)) {
            let np = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((np - nn).abs() <= 1e-12);
        }
    }

    #[test]
    fn em_layer_is_negation_invariant(seed in any::<u64>(), i in 1usize..=8, j in 1usize..=8, r in 1usize..=3) {
        let mut rng = SeededRng::new(seed);
        let (caps, params) = em_instance(&mut rng, i, j);
        let cfg = RoutingConfig::new(r, false);
        let mut rp = TraceRecorder::default();
        let mut rn = TraceRecorder::default();
        let (p, _) = em_route_observed(&caps, &cfg, &params, Some(&mut rp)).unwrap();
        let (n, _) = em_route_observed(&caps.negated(), &cfg, &params, Some(&mut rn)).unwrap();
        prop_assert!(p.activations.max_abs_diff(&n.activations).unwrap() <= 1e-9);
        prop_assert!(p.poses.add(&n.poses).unwrap().max_abs() <= 1e-9);
        for (a, b) in rp.em.iter().zip(&rn.em) {
            prop_assert!(a.updated_assignments.max_abs_diff(&b.updated_assignments).unwrap() <= 1e-9);
            for row in a.updated_assignments.data().chunks(j) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn squash_stays_inside_unit_ball(v in proptest::collection::vec(-1e6f64..1e6, 1..10)) {
        let n = v.len();
        let s = squash(&Tensor::new(vec![n], v).unwrap(), 1e-9).unwrap();
        prop_assert!(s.l2_norm() < 1.0);
    }
}
