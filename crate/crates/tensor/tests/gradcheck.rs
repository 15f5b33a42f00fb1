//! Every differentiable op against central finite differences, five random
//! instances each.

use haug_tensor::gradcheck::{check_gradients, GradCheckOptions};
use haug_tensor::{Float, Graph, Result, RunningStats, Tensor, Var, BN_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 5;

fn tolerance() -> f64 {
    if cfg!(feature = "f64") {
        1e-4
    } else {
        1e-2
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks sit outside the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: Float = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn check<F>(name: &str, build: F, inputs: &[Tensor])
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = check_gradients(build, inputs, GradCheckOptions::default()).unwrap();
    assert!(report.max_rel_error() <= tolerance(), "{name}: worst element {:?}", report.worst);
}

fn each_instance(mut f: impl FnMut(&mut ChaCha8Rng)) {
    for seed in 0..INSTANCES {
        f(&mut ChaCha8Rng::seed_from_u64(1000 + seed));
    }
}

#[test]
fn conv2d() {
    each_instance(|rng| {
        let stride = rng.random_range(1..=2);
        let x = random(rng, &[2, 3, 5, 5]);
        let w = random(rng, &[2, 3, 3, 3]);
        check("conv2d", |g, v| g.conv2d(v[0], v[1], stride, 1), &[x, w]);
    });
}

#[test]
fn batch_norm_training() {
    each_instance(|rng| {
        let x = random(rng, &[4, 3, 2, 2]);
        let gamma = random(rng, &[3]);
        let beta = random(rng, &[3]);
        check("batch_norm(train, 4d)", |g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], BN_EPS)?.0), &[x, gamma, beta]);
        let x = random(rng, &[6, 4]);
        let gamma = random(rng, &[4]);
        let beta = random(rng, &[4]);
        check("batch_norm(train, 2d)", |g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], BN_EPS)?.0), &[x, gamma, beta]);
    });
}

#[test]
fn batch_norm_eval() {
    each_instance(|rng| {
        let x = random(rng, &[3, 4]);
        let gamma = random(rng, &[4]);
        let beta = random(rng, &[4]);
        let stats = RunningStats {
            mean: (0..4).map(|_| rng.random_range(-0.5..0.5)).collect(),
            var: (0..4).map(|_| rng.random_range(0.5..2.0)).collect(),
        };
        check("batch_norm(eval)", |g, v| g.batch_norm_eval(v[0], v[1], v[2], &stats, BN_EPS), &[x, gamma, beta]);
    });
}

#[test]
fn l2_normalize() {
    each_instance(|rng| {
        let axis = rng.random_range(0..2);
        let x = random(rng, &[3, 4]);
        check("l2_normalize", |g, v| g.l2_normalize(v[0], axis), &[x]);
    });
}

#[test]
fn linear_with_and_without_bias() {
    each_instance(|rng| {
        let x = random(rng, &[3, 5]);
        let w = random(rng, &[4, 5]);
        let b = random(rng, &[4]);
        check("linear", |g, v| g.linear(v[0], v[1], Some(v[2])), &[x.clone(), w.clone(), b]);
        check("linear(no bias)", |g, v| g.linear(v[0], v[1], None), &[x, w]);
    });
}

#[test]
fn relu() {
    each_instance(|rng| {
        let x = away_from_zero(rng, &[4, 5]);
        check("relu", |g, v| g.relu(v[0]), &[x]);
    });
}

#[test]
fn global_avg_pool() {
    each_instance(|rng| {
        let x = random(rng, &[2, 3, 3, 2]);
        check("global_avg_pool", |g, v| g.global_avg_pool(v[0]), &[x]);
    });
}

#[test]
fn concat_and_slice() {
    each_instance(|rng| {
        let a = random(rng, &[2, 3]);
        let b = random(rng, &[2, 2]);
        check("concat", |g, v| g.concat(&[v[0], v[1]], 1), &[a, b]);
        let x = random(rng, &[4, 3]);
        check("slice", |g, v| g.slice(v[0], 0, 1, 2), &[x]);
    });
}

#[test]
fn matmul_and_transpose() {
    each_instance(|rng| {
        let a = random(rng, &[3, 4]);
        let b = random(rng, &[4, 2]);
        check("matmul", |g, v| g.matmul(v[0], v[1]), &[a.clone(), b]);
        check("transpose", |g, v| g.transpose(v[0]), &[a]);
    });
}

#[test]
fn elementwise() {
    each_instance(|rng| {
        let a = random(rng, &[3, 3]);
        let b = random(rng, &[3, 3]);
        let ins = [a, b];
        check("add", |g, v| g.add(v[0], v[1]), &ins);
        check("sub", |g, v| g.sub(v[0], v[1]), &ins);
        check("mul", |g, v| g.mul(v[0], v[1]), &ins);
        check("mul(self)", |g, v| g.mul(v[0], v[0]), &ins[..1]);
        check("scale", |g, v| g.scale(v[0], -0.7), &ins[..1]);
        check("reshape", |g, v| g.reshape(v[0], &[9]), &ins[..1]);
    });
}

#[test]
fn reductions() {
    each_instance(|rng| {
        let x = random(rng, &[2, 5]);
        check("sum", |g, v| g.sum(v[0]), std::slice::from_ref(&x));
        check("mean", |g, v| g.mean(v[0]), &[x]);
    });
}

#[test]
fn cross_entropy() {
    each_instance(|rng| {
        let x = random(rng, &[4, 3]);
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        check("cross_entropy", |g, v| g.cross_entropy(v[0], &targets), &[x]);
    });
}

/// conv → bn → relu → pool → linear → cosine against a fixed target.
fn composite(g: &mut Graph, v: &[Var]) -> Result<Var> {
    let h = g.conv2d(v[0], v[1], 1, 1)?;
    let (h, _) = g.batch_norm_train(h, v[2], v[3], BN_EPS)?;
    let h = g.relu(h)?;
    let h = g.global_avg_pool(h)?;
    let h = g.linear(h, v[4], Some(v[5]))?;
    let h = g.l2_normalize(h, 1)?;
    let t = g.l2_normalize(v[6], 1)?;
    let c = g.mul(h, t)?;
    g.sum(c)
}

#[test]
fn composite_graph() {
    each_instance(|rng| {
        // Resample until no pre-activation lies within the stencil of a kink.
        let inputs = loop {
            let ins = vec![
                random(rng, &[3, 2, 4, 4]),
                random(rng, &[3, 2, 3, 3]),
                Tensor::from_fn(&[3], |_| rng.random_range(0.5..1.5)),
                random(rng, &[3]),
                random(rng, &[4, 3]),
                random(rng, &[4]),
                random(rng, &[3, 4]),
            ];
            let mut g = Graph::new();
            let v: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let h = g.conv2d(v[0], v[1], 1, 1).unwrap();
            let (h, _) = g.batch_norm_train(h, v[2], v[3], BN_EPS).unwrap();
            if g.value(h).data().iter().all(|x| x.abs() > 0.02) {
                break ins;
            }
        };
        check("composite", composite, &inputs);
    });
}
