use std::fs;

use haug::io::config::Config;
use haug::io::synthetic::generate_synthetic;
use haug::model::{Model, ParamRole};
use haug::objectives::Objective;
use haug::trainer::*;
use haug_tensor::{Float, Tensor};

fn tiny() -> Config {
    let mut cfg = Config::default();
    cfg.model.channels = [4, 8, 8, 16];
    cfg.model.embed_dim = 8;
    cfg.model.proj_dim = 8;
    cfg.model.pred_hidden = 4;
    cfg.augment.settings.out_size = 16;
    cfg.train.batch_size = 16;
    cfg.train.epochs = 1;
    cfg
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

#[test]
fn lr_closed_forms() {
    assert!(close(lr_at(0, 100, 0.05, 256), 0.05));
    assert!(close(lr_at(100, 100, 0.05, 256), 0.0));
    assert!(close(lr_at(50, 100, 0.05, 64), 0.00625));
}

#[test]
fn sgd_zero_gradient_is_a_no_op() {
    let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let before = p.clone();
    let mut v = Tensor::zeros(&[3]);
    sgd_step(&mut p, &Tensor::zeros(&[3]), &mut v, 0.1, 0.9, 0.0);
    assert_eq!(p, before);
}

#[test]
fn sgd_plain_step() {
    let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let g = Tensor::new(vec![2], vec![0.5, -0.25]).unwrap();
    let mut v = Tensor::zeros(&[2]);
    sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0);
    assert_eq!(p.data(), &[1.0 - 0.1 * 0.5, 2.0 + 0.1 * 0.25]);
}

#[test]
fn sgd_quadratic_recurrence() {
    // f(p) = ½·a·p², so g = a·p.
    let (a, lr, m, wd): (Float, Float, Float, Float) = (3.0, 0.05, 0.9, 1e-2);
    let mut p = Tensor::new(vec![1], vec![2.0]).unwrap();
    let mut v = Tensor::zeros(&[1]);
    let (mut po, mut vo): (Float, Float) = (2.0, 0.0);
    for _ in 0..2 {
        let g = Tensor::new(vec![1], vec![a * p.data()[0]]).unwrap();
        sgd_step(&mut p, &g, &mut v, lr, m, wd);
        vo = m * vo + a * po + wd * po;
        po -= lr * vo;
    }
    assert!((p.data()[0] as f64 - po as f64).abs() <= 1e-7);
    assert!((v.data()[0] as f64 - vo as f64).abs() <= 1e-7);
}

#[test]
fn weight_decay_skips_biases_and_norms() {
    let cfg = tiny();
    let model = Model::new(cfg.model_config().unwrap(), 0).unwrap();
    let mut store = model.params.clone();
    let grads = vec![None; store.len()];
    let mut vel = zero_velocity(&store);
    sgd_update(&mut store, &grads, &mut vel, 0.1, 0.9, 0.5);
    for (id, (name, t, role)) in store.iter().enumerate() {
        let before = model.params.tensor(id);
        match role {
            ParamRole::Weight => assert_ne!(t, before, "{name}"),
            ParamRole::Bias | ParamRole::Buffer => assert_eq!(t, before, "{name}"),
        }
    }
}

#[test]
fn schedule_drops_partial_batch() {
    assert_eq!(schedule(100, 32), (3, 32));
    assert_eq!(schedule(10, 64), (1, 10));
}

#[test]
fn smoke_run_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(64, 10, 3, 32).unwrap();
    let mut cfg = tiny();
    cfg.train.epochs = 2;
    cfg.train.ckpt_every = 1;
    let mut seen = Vec::new();
    let run = pretrain(&cfg, &data, Some(dir.path()), &mut |e| seen.push(e.epoch)).unwrap();
    assert_eq!(seen, vec![0, 1]);
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), METRICS_HEADER);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 8);
    for row in rows {
        let cols: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols.len(), 8);
        assert!(cols.iter().all(|c| c.is_finite()));
        assert!((cols[7] - (cols[3] + cols[4] + cols[5] + cols[6])).abs() < 1e-5);
    }
    assert!(dir.path().join("ckpt_epoch1.haug").exists());
    assert!(dir.path().join("final.haug").exists());
    assert!(run.final_report.overall.is_finite());
}

#[test]
fn seeded_runs_replay_bit_exactly() {
    let data = generate_synthetic(64, 10, 4, 32).unwrap();
    let cfg = tiny();
    let a = pretrain(&cfg, &data, None, &mut |_| {}).unwrap();
    let b = pretrain(&cfg, &data, None, &mut |_| {}).unwrap();
    assert_eq!(a.final_report.overall.to_bits(), b.final_report.overall.to_bits());
    assert_eq!(a.state.model.params, b.state.model.params);
    assert_eq!(a.state.velocity, b.state.velocity);
}

#[test]
fn barlow_objective_trains() {
    let data = generate_synthetic(32, 10, 5, 32).unwrap();
    let mut cfg = tiny();
    cfg.train.objective = Objective::BarlowTwins { lambda: 0.005 };
    let run = pretrain(&cfg, &data, None, &mut |_| {}).unwrap();
    assert!(run.final_report.per_stage.iter().all(|l| l.is_finite() && *l >= 0.0));
}

fn stage_grads(cfg: &Config, weights: Option<[Float; 4]>, only: Option<usize>) -> Vec<(String, Option<Tensor>)> {
    let data = generate_synthetic(8, 4, 6, 32).unwrap();
    let pipelines = cfg.pipelines().unwrap();
    let model = Model::new(cfg.model_config().unwrap(), 1).unwrap();
    let idx: Vec<usize> = (0..8).collect();
    let pairs = batch_pairs(&pipelines, &data, &idx, 0, 0);
    let mut s = model.session(true);
    let vars = build_losses(&model, &mut s, &pairs, cfg.train.objective, weights).unwrap();
    let target = match only {
        Some(k) => vars.stages[k - 1],
        None => vars.overall,
    };
    s.graph.backward(target).unwrap();
    let grads = s.gradients();
    model.params.iter().map(|(n, _, _)| n.to_string()).zip(grads).collect()
}

#[test]
fn stage_two_parameters_see_only_their_loss() {
    let cfg = tiny();
    let full = stage_grads(&cfg, None, None);
    let alone = stage_grads(&cfg, None, Some(2));
    let mut checked = 0;
    for ((name, g), (_, h)) in full.iter().zip(&alone) {
        if name.starts_with("adapter.2.") || name.starts_with("head.2.") || name.starts_with("predictor.2.") {
            if let (Some(g), Some(h)) = (g, h) {
                assert_eq!(g, h, "{name}");
                checked += 1;
            } else {
                assert_eq!(g.is_some(), h.is_some(), "{name}");
            }
        }
    }
    assert!(checked > 10);
}

#[test]
fn last_stage_weighting_silences_shallow_losses() {
    let mut cfg = tiny();
    cfg.augment.mode = haug::augment::PipelineMode::Uniform;
    let grads = stage_grads(&cfg, Some([0.0, 0.0, 0.0, 1.0]), None);
    for (name, g) in &grads {
        let shallow = ["adapter.1.", "adapter.2.", "adapter.3.", "head.1.", "head.2.", "head.3."]
            .iter()
            .any(|p| name.starts_with(p));
        if shallow {
            if let Some(g) = g {
                assert!(g.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }
    let solo = stage_grads(&cfg, None, Some(4));
    for ((name, g), (_, h)) in grads.iter().zip(&solo) {
        if name.starts_with("backbone.") {
            assert_eq!(g, h, "{name}");
        }
    }
}
