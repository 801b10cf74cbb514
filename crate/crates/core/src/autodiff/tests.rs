use super::*;
use crate::rng::SeededRng;

fn randn(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    Tensor::random_normal(rng, shape.to_vec(), 0.0, 1.0).unwrap()
}

/// Contracts a node against fixed random weights so every output coordinate
/// gets a distinct, O(1) upstream gradient.
fn project(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let shape = g.shape(x).to_vec();
    let w = randn(&mut SeededRng::new(seed), &shape);
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum_all(p)
}

fn check_points<F>(shapes: &[&[usize]], tol: f64, f: F)
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + Copy,
{
    check_points_eps(shapes, tol, 1e-5, f)
}

fn check_points_eps<F>(shapes: &[&[usize]], tol: f64, eps: f64, f: F)
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + Copy,
{
    let mut rng = SeededRng::new(2024);
    for _ in 0..20 {
        let names: Vec<String> = (0..shapes.len()).map(|k| format!("p{k}")).collect();
        let params: Vec<(&str, Tensor)> = shapes
            .iter()
            .zip(&names)
            .map(|(s, n)| (n.as_str(), randn(&mut rng, s)))
            .collect();
        let err = grad_check(f, &params, eps).unwrap();
        assert!(err <= tol, "relative error {err} > {tol}");
    }
}

#[test]
fn sum_gives_ones() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::full(vec![2, 3], 0.7));
    let s = g.sum_all(x);
    let grads = g.backward(s).unwrap();
    assert!(grads["x"].data().iter().all(|&v| v == 1.0));
}

#[test]
fn squared_norm_gradient() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::vector(vec![3.0, 4.0]).unwrap());
    let sq = g.square(x);
    let l = g.sum_all(sq);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads["x"].data(), &[6.0, 8.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::zeros(vec![3]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn shared_subgraph_accumulates() {
    // l = sum(x*x + x) → dl/dx = 2x + 1
    let mut g = Graph::new();
    let x = g.param("x", Tensor::vector(vec![1.5, -2.0]).unwrap());
    let xx = g.mul(x, x).unwrap();
    let y = g.add(xx, x).unwrap();
    let l = g.sum_all(y);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads["x"].data(), &[4.0, -3.0]);
}

#[test]
fn constants_and_detached_nodes_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::vector(vec![2.0]).unwrap());
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let l = g.sum_all(y);
    let grads = g.backward(l).unwrap();
    // d is treated as the constant 2
    assert_eq!(grads["x"].data(), &[2.0]);
}

#[test]
fn linear_function_is_exact() {
    // central differences are exact for linear maps; a wide step keeps
    // cancellation error out of the comparison
    check_points_eps(&[&[3, 4]], 1e-10, 0.25, |g, p| Ok(project(g, p[0], 1)));
}

#[test]
fn elementwise_ops_pass_grad_check() {
    check_points(&[&[2, 5]], 1e-6, |g, p| {
        let e = g.exp(p[0]);
        let s = g.square(p[0]);
        let l = g.logistic(p[0]);
        let ls = g.log_sigmoid(p[0]);
        let a = g.add(e, s).unwrap();
        let b = g.mul(a, l).unwrap();
        let c = g.sub(b, ls).unwrap();
        let d = g.scale(c, 0.3);
        let n = g.neg(d);
        let o = g.add_scalar(n, 2.0);
        Ok(project(g, o, 2))
    });
}

#[test]
fn positive_domain_ops_pass_grad_check() {
    check_points(&[&[6]], 1e-6, |g, p| {
        let sq = g.square(p[0]);
        let pos = g.add_scalar(sq, 0.5);
        let l = g.ln(pos);
        let r = g.sqrt(pos);
        let d = g.div(l, r).unwrap();
        Ok(project(g, d, 3))
    });
}

#[test]
fn broadcast_ops_pass_grad_check() {
    for removed in [vec![0], vec![1], vec![2], vec![0, 2], vec![1, 2]] {
        let full = [3usize, 2, 4];
        let small: Vec<usize> = full
            .iter()
            .enumerate()
            .filter(|(k, _)| !removed.contains(k))
            .map(|(_, &n)| n)
            .collect();
        for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul] {
            let rem = removed.clone();
            let small_s: &[usize] = &small;
            let f = move |g: &mut Graph, p: &[NodeId]| {
                let y = g.broadcast(op, p[0], p[1], &rem)?;
                Ok(project(g, y, 4))
            };
            let mut rng = SeededRng::new(9);
            let params = [
                ("x", randn(&mut rng, &full)),
                ("y", randn(&mut rng, small_s)),
            ];
            let err = grad_check(f, &params, 1e-5).unwrap();
            assert!(err < 1e-6, "{op:?} {removed:?}: {err}");
        }
    }
}

#[test]
fn broadcast_div_pass_grad_check() {
    check_points(&[&[2, 3, 4], &[2, 4]], 1e-5, |g, p| {
        let sq = g.square(p[1]);
        let den = g.add_scalar(sq, 1.0);
        let y = g.broadcast(BinaryOp::Div, p[0], den, &[1])?;
        Ok(project(g, y, 5))
    });
}

#[test]
fn broadcast_matches_manual_expansion() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
    let y = g.constant(Tensor::vector(vec![10.0, 20.0]).unwrap());
    let z = g.broadcast(BinaryOp::Add, x, y, &[1]).unwrap();
    assert_eq!(g.value(z).data(), &[10.0, 11.0, 12.0, 23.0, 24.0, 25.0]);
    assert!(g.broadcast(BinaryOp::Add, x, y, &[0]).is_err());
}

#[test]
fn reductions_and_reshape_pass_grad_check() {
    check_points(&[&[2, 3, 4]], 1e-8, |g, p| {
        let a = g.sum_axis(p[0], 1)?;
        let b = g.reshape(a, &[8])?;
        let c = g.square(b);
        Ok(project(g, c, 6))
    });
}

#[test]
fn matmul_passes_grad_check() {
    check_points(&[&[3, 4], &[4, 2]], 1e-8, |g, p| {
        let m = g.matmul(p[0], p[1])?;
        let r = g.relu(m);
        Ok(project(g, r, 7))
    });
}

#[test]
fn capsule_kernels_pass_grad_check() {
    check_points(&[&[2, 3, 4], &[3, 2, 5, 4]], 1e-6, |g, p| {
        let u = g.caps_predict(p[0], p[1])?;
        Ok(project(g, u, 8))
    });
    check_points(&[&[2, 3, 16], &[3, 2, 16]], 1e-6, |g, p| {
        let v = g.pose_votes(p[0], p[1])?;
        Ok(project(g, v, 9))
    });
    check_points(&[&[2, 3, 4], &[2, 3, 4, 5]], 1e-6, |g, p| {
        let s = g.weighted_sum(p[0], p[1])?;
        Ok(project(g, s, 10))
    });
    check_points(&[&[2, 4, 5], &[2, 3, 4, 5]], 1e-6, |g, p| {
        let a = g.agreement(p[0], p[1])?;
        Ok(project(g, a, 11))
    });
}

#[test]
fn em_moment_kernels_pass_grad_check() {
    check_points(&[&[2, 3, 4], &[2, 3, 4, 5], &[2, 4, 5]], 1e-5, |g, p| {
        let s = g.weighted_spread(p[0], p[1], p[2])?;
        Ok(project(g, s, 15))
    });
    check_points(&[&[2, 3, 4, 5], &[2, 4, 5], &[2, 4, 5]], 1e-4, |g, p| {
        // keep the variance positive
        let var = g.square(p[2]);
        let var = g.add_scalar(var, 0.5);
        let e = g.gaussian_energy(p[0], p[1], var)?;
        Ok(project(g, e, 16))
    });
}

#[test]
fn em_moment_kernels_match_composed_ops() {
    let mut rng = SeededRng::new(5);
    let mut g = Graph::new();
    let w = g.constant(randn(&mut rng, &[2, 3, 4]));
    let v = g.constant(randn(&mut rng, &[2, 3, 4, 5]));
    let mu = g.constant(randn(&mut rng, &[2, 4, 5]));
    let fused = g.weighted_spread(w, v, mu).unwrap();
    let dev = g.broadcast(BinaryOp::Sub, v, mu, &[1]).unwrap();
    let sq = g.square(dev);
    let composed = g.weighted_sum(w, sq).unwrap();
    assert!(g.value(fused).max_abs_diff(g.value(composed)).unwrap() < 1e-12);

    let var = g.constant(Tensor::full(vec![2, 4, 5], 0.3));
    let energy = g.gaussian_energy(v, mu, var).unwrap();
    let two_var = g.scale(var, 2.0);
    let scaled = g.broadcast(BinaryOp::Div, sq, two_var, &[1]).unwrap();
    let composed = g.sum_axis(scaled, 3).unwrap();
    assert!(g.value(energy).max_abs_diff(g.value(composed)).unwrap() < 1e-12);
}

#[test]
fn softmax_squash_norm_pass_grad_check() {
    check_points(&[&[3, 5]], 1e-6, |g, p| {
        let s = g.softmax(p[0])?;
        Ok(project(g, s, 12))
    });
    check_points(&[&[4, 6]], 1e-4, |g, p| {
        let s = g.squash(p[0], 1e-9)?;
        Ok(project(g, s, 13))
    });
    check_points(&[&[4, 3]], 1e-6, |g, p| {
        let n = g.norm_last(p[0])?;
        Ok(project(g, n, 14))
    });
}

#[test]
fn clamp_counts_guard_hits_and_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::vector(vec![0.5, 1e-12, 2.0]).unwrap());
    let c = g.clamp_min(x, 1e-8, Guard::VarianceFloor);
    assert_eq!(g.guards().variance_floor, 1);
    assert_eq!(g.value(c).data()[1], 1e-8);
    let l = g.sum_all(c);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads["x"].data(), &[1.0, 0.0, 1.0]);
}

#[test]
fn softmax_all_neg_inf_row_falls_back_to_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_parts(
        vec![2, 2],
        vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY],
    ));
    let s = g.softmax(x).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5, 1.0, 0.0]);
    assert_eq!(g.guards().underflow_fallback, 1);
}

#[test]
fn gradient_accumulation_is_deterministic() {
    let build = || {
        let mut g = Graph::new();
        let mut rng = SeededRng::new(77);
        let u = g.param("u", randn(&mut rng, &[3, 4, 5]));
        let w = g.param("w", randn(&mut rng, &[4, 3, 6, 5]));
        let p = g.caps_predict(u, w).unwrap();
        let c = g.constant(Tensor::full(vec![3, 4, 3], 1.0 / 3.0));
        let s = g.weighted_sum(c, p).unwrap();
        let v = g.squash(s, 1e-9).unwrap();
        let a = g.agreement(v, p).unwrap();
        let l = g.sum_all(a);
        g.backward(l).unwrap()
    };
    let a = build();
    let b = build();
    for (k, v) in &a {
        let w = &b[k];
        assert!(v
            .data()
            .iter()
            .zip(w.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
