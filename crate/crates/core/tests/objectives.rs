use haug::objectives::*;
use haug_tensor::{Float, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(seed: u64, b: usize, d: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, d], |_| rng.random_range(-1.0..1.0))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn simsiam_oracle(p: &Tensor, pp: &Tensor, z: &Tensor, zp: &Tensor) -> f64 {
    let (p, pp, z, zp) = (rows(p), rows(pp), rows(z), rows(zp));
    let b = p.len() as f64;
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for r in 0..p.len() {
        d1 -= cos(&p[r], &zp[r]);
        d2 -= cos(&pp[r], &z[r]);
    }
    0.5 * d1 / b + 0.5 * d2 / b
}

#[allow(clippy::needless_range_loop)]
fn barlow_oracle(z: &Tensor, zp: &Tensor, lambda: f64) -> f64 {
    let standardize = |t: &Tensor| {
        let r = rows(t);
        let (b, d) = (r.len(), r[0].len());
        let mut out = vec![vec![0.0; d]; b];
        for j in 0..d {
            let mean = r.iter().map(|x| x[j]).sum::<f64>() / b as f64;
            let var = r.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / b as f64;
            for i in 0..b {
                out[i][j] = (r[i][j] - mean) / (var + BARLOW_EPS as f64).sqrt();
            }
        }
        out
    };
    let (a, c) = (standardize(z), standardize(zp));
    let (b, d) = (a.len(), a[0].len());
    let mut loss = 0.0;
    for i in 0..d {
        for j in 0..d {
            let cij = (0..b).map(|k| a[k][i] * c[k][j]).sum::<f64>() / b as f64;
            loss += if i == j { (1.0 - cij).powi(2) } else { lambda * cij * cij };
        }
    }
    loss
}

fn simsiam_value(p: &Tensor, pp: &Tensor, z: &Tensor, zp: &Tensor) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = [p, pp, z, zp].iter().map(|t| g.constant((*t).clone())).collect();
    let l = simsiam_loss(&mut g, vars[0], vars[1], vars[2], vars[3]).unwrap();
    g.value(l).item().unwrap() as f64
}

fn barlow_value(z: &Tensor, zp: &Tensor, lambda: Float) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(z.clone());
    let b = g.constant(zp.clone());
    let l = barlow_twins_loss(&mut g, a, b, lambda).unwrap();
    g.value(l).item().unwrap() as f64
}

#[test]
fn simsiam_identical_is_minus_one() {
    let z = random(1, 8, 16);
    assert!((simsiam_value(&z, &z, &z, &z) + 1.0).abs() <= 1e-5);
}

#[test]
fn simsiam_orthogonal_is_zero() {
    let z = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
    let zp = Tensor::new(vec![2, 2], vec![0.0, 3.0, -1.0, 0.0]).unwrap();
    assert!(simsiam_value(&z, &zp, &z, &zp).abs() <= 1e-6);
}

#[test]
fn simsiam_matches_row_loop() {
    for seed in 0..5 {
        let (p, pp, z, zp) =
            (random(seed, 8, 6), random(seed + 10, 8, 6), random(seed + 20, 8, 6), random(seed + 30, 8, 6));
        let got = simsiam_value(&p, &pp, &z, &zp);
        assert!((got - simsiam_oracle(&p, &pp, &z, &zp)).abs() <= 1e-5, "seed {seed}");
        assert!((-1.0..=1.0).contains(&got));
    }
}

#[test]
fn stop_gradient_inputs_get_exact_zeros() {
    let mut g = Graph::new();
    let p = g.param(random(1, 6, 5));
    let pp = g.param(random(2, 6, 5));
    let z = g.param(random(3, 6, 5));
    let zp = g.param(random(4, 6, 5));
    let l = simsiam_loss(&mut g, p, pp, z, zp).unwrap();
    g.backward(l).unwrap();
    for v in [z, zp] {
        if let Some(grad) = g.grad(v) {
            assert!(grad.data().iter().all(|x| x.to_bits() == (0.0 as Float).to_bits()));
        }
    }
    assert!(g.grad(p).unwrap().data().iter().any(|&x| x != 0.0));
}

#[test]
fn predictor_path_alone_carries_gradient() {
    // p = z·W: the target slot sees z through stop-gradient only, so the
    // gradient of z equals the one obtained with a detached copy as target.
    let zt = random(5, 6, 4);
    let zpt = random(6, 6, 4);
    let wt = random(7, 4, 4);
    let grad_with = |detached_targets: bool| {
        let mut g = Graph::new();
        let z = g.param(zt.clone());
        let zp = g.param(zpt.clone());
        let w = g.constant(wt.clone());
        let p = g.matmul(z, w).unwrap();
        let pp = g.matmul(zp, w).unwrap();
        let (tz, tzp) = if detached_targets { (g.constant(zt.clone()), g.constant(zpt.clone())) } else { (z, zp) };
        let l = simsiam_loss(&mut g, p, pp, tz, tzp).unwrap();
        g.backward(l).unwrap();
        (g.grad(z).unwrap().clone(), g.grad(zp).unwrap().clone())
    };
    assert_eq!(grad_with(false), grad_with(true));
}

#[test]
fn simsiam_rejects_tiny_batches() {
    let z = random(1, 1, 4);
    let mut g = Graph::new();
    let v = g.constant(z);
    assert!(simsiam_loss(&mut g, v, v, v, v).is_err());
    assert!(barlow_twins_loss(&mut g, v, v, BARLOW_LAMBDA).is_err());
}

#[test]
fn barlow_decorrelated_equal_inputs_is_zero() {
    let z = Tensor::new(vec![4, 2], vec![1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0]).unwrap();
    assert!(barlow_value(&z, &z, BARLOW_LAMBDA).abs() <= 1e-4);
}

#[test]
fn barlow_lambda_zero_ignores_off_diagonal() {
    let z = random(8, 16, 4);
    assert!(barlow_value(&z, &z, 0.0).abs() <= 1e-4);
    assert!(barlow_value(&z, &z, 1.0) > 1e-3);
}

#[test]
fn barlow_matches_entry_loop() {
    for seed in 0..5 {
        let (z, zp) = (random(seed, 8, 4), random(seed + 100, 8, 4));
        let got = barlow_value(&z, &zp, BARLOW_LAMBDA);
        let want = barlow_oracle(&z, &zp, BARLOW_LAMBDA as f64);
        assert!((got - want).abs() <= 1e-5, "seed {seed}: {got} vs {want}");
        assert!(got >= 0.0);
    }
}

#[test]
fn overall_sums_exactly() {
    let mut g = Graph::new();
    let ls: Vec<Var> = [-1.0, -1.0, -1.0, -1.0].iter().map(|&v| g.constant(Tensor::scalar(v))).collect();
    let o = overall_loss(&mut g, ls.clone().try_into().unwrap(), None).unwrap();
    assert_eq!(g.value(o).item().unwrap(), -4.0);
    let x: Float = 0.372_5;
    let ls: Vec<Var> = [0.0, 0.0, 0.0, x].iter().map(|&v| g.constant(Tensor::scalar(v))).collect();
    let stages: [Var; 4] = ls.try_into().unwrap();
    let o = overall_loss(&mut g, stages, None).unwrap();
    assert_eq!(g.value(o).item().unwrap(), x);
    let r = report(&g, Objective::SimSiam, stages, o).unwrap();
    assert_eq!(r, LossReport::from_stages(Objective::SimSiam, [0.0, 0.0, 0.0, x]));
}

#[test]
fn weights_scale_terms() {
    let mut g = Graph::new();
    let ls: Vec<Var> = [1.0, 2.0, 3.0, 4.0].iter().map(|&v| g.constant(Tensor::scalar(v))).collect();
    let o = overall_loss(&mut g, ls.try_into().unwrap(), Some([0.0, 0.0, 0.0, 1.0])).unwrap();
    assert_eq!(g.value(o).item().unwrap(), 4.0);
}

#[test]
fn objective_names_parse() {
    assert_eq!("simsiam".parse::<Objective>().unwrap(), Objective::SimSiam);
    assert_eq!("barlow_twins".parse::<Objective>().unwrap(), Objective::BarlowTwins { lambda: BARLOW_LAMBDA });
    assert!("infonce".parse::<Objective>().is_err());
    assert!(Objective::SimSiam.uses_predictor());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn simsiam_ignores_row_scale(seed in any::<u64>(), alpha in 0.1f64..10.0) {
        let z = random(seed, 6, 5);
        let zp = random(seed ^ 1, 6, 5);
        let scaled = Tensor::from_fn(&[6, 5], |i| z.data()[i] * alpha as Float);
        let a = simsiam_value(&z, &zp, &z, &zp);
        let b = simsiam_value(&scaled, &zp, &scaled, &zp);
        prop_assert!((a - b).abs() <= 1e-5);
    }

    #[test]
    fn simsiam_is_symmetric(seed in any::<u64>()) {
        let z = random(seed, 6, 5);
        let zp = random(seed ^ 2, 6, 5);
        let a = simsiam_value(&z, &zp, &z, &zp);
        let b = simsiam_value(&zp, &z, &zp, &z);
        prop_assert!((a - b).abs() <= 1e-6);
    }

    #[test]
    fn barlow_absorbs_column_affine(seed in any::<u64>(), s in prop::array::uniform4(0.2f64..5.0), t in prop::array::uniform4(-3.0f64..3.0)) {
        let z = random(seed, 10, 4);
        let zp = random(seed ^ 3, 10, 4);
        let moved = Tensor::from_fn(&[10, 4], |i| z.data()[i] * s[i % 4] as Float + t[i % 4] as Float);
        let a = barlow_value(&z, &zp, BARLOW_LAMBDA);
        let b = barlow_value(&moved, &zp, BARLOW_LAMBDA);
        prop_assert!((a - b).abs() <= 1e-4, "{} vs {}", a, b);
    }

    #[test]
    fn barlow_is_symmetric(seed in any::<u64>()) {
        let z = random(seed, 8, 3);
        let zp = random(seed ^ 4, 8, 3);
        let a = barlow_value(&z, &zp, BARLOW_LAMBDA);
        let b = barlow_value(&zp, &z, BARLOW_LAMBDA);
        prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
    }
}
