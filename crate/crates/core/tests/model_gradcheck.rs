//! End-to-end finite-difference checks: full model + training loss,
//! one model per decoder kind, gradients over every parameter.
//!
//! Noise draws are frozen per seed so the loss is a deterministic
//! function of the flat parameter vector.

use csnet_core::gradcheck::{finite_diff, max_rel_error};
use csnet_core::losses::{kbest_loss, mcml_loss, regression_loss, va_loss};
use csnet_core::models::{DecoderKind, ForecastModel, ModelConfig};
use csnet_core::nn::{self, Parameterized};
use csnet_core::rng::Rng;
use csnet_core::synthdata::Task;
use csnet_core::tensor::{Graph, Tensor};

const TOL: f64 = 1e-3;
const STEP: f64 = 1e-5;

pub struct Scenario {
    pub cfg: ModelConfig,
    pub scheme: &'static str,
    pub x: Tensor,
    pub y: Tensor,
    pub coords: Vec<(u32, u32)>,
    pub eps: Vec<Tensor>,
}

fn tiny_cfg(task: Task, decoder: DecoderKind) -> ModelConfig {
    ModelConfig {
        task,
        decoder,
        latent_dim: 2,
        stochastic: true,
        with_recognition: task == Task::Video,
        nf: 2,
        horizon: 3,
        frame_h: 8,
        frame_w: 8,
        joints: if task == Task::Joints { 2 } else { 0 },
        enc_base_channels: 3,
        feature_dim: 6,
        fc_hidden: 8,
        y_feature_dim: 4,
    }
}

pub fn scenario(task: Task, decoder: DecoderKind, scheme: &'static str, seed: u64) -> Scenario {
    let cfg = tiny_cfg(task, decoder);
    let mut rng = Rng::substream(0xE2E, seed);
    let x = Tensor::from_vec(&cfg.x_shape(), rng.normal_vec(cfg.x_shape().iter().product()))
        .unwrap();
    let y = match task {
        Task::Video => {
            // target within warp reach of the last frame
            let data: Vec<f64> = (0..64).map(|_| rng.uniform(0.0, 1.0)).collect();
            Tensor::from_vec(&[1, 8, 8], data).unwrap()
        }
        _ => Tensor::from_vec(&cfg.y_shape(), rng.normal_vec(cfg.y_shape().iter().product()))
            .unwrap(),
    };
    let coords = if task == Task::Joints {
        vec![
            (1 + rng.below(6) as u32, 1 + rng.below(6) as u32),
            (1 + rng.below(6) as u32, 1 + rng.below(6) as u32),
        ]
    } else {
        Vec::new()
    };
    let k = if scheme == "va" || scheme == "regression" { 1 } else { 3 };
    let eps = (0..k)
        .map(|_| Tensor::from_vec(&[2], rng.normal_vec(2)).unwrap())
        .collect();
    Scenario {
        cfg,
        scheme,
        x,
        y,
        coords,
        eps,
    }
}

fn flatten_params(model: &ForecastModel) -> Vec<f64> {
    let mut flat = Vec::new();
    model.visit_params("model", &mut |_, t| flat.extend_from_slice(t.data()));
    flat
}

fn load_params(model: &mut ForecastModel, flat: &[f64]) {
    let mut off = 0usize;
    model.visit_params_mut("model", &mut |_, t| {
        let n = t.len();
        let dst = t.data_mut();
        dst.copy_from_slice(&flat[off..off + n]);
        off += n;
    });
    assert_eq!(off, flat.len());
}

/// Builds the scenario's loss on a fresh graph; returns (graph, loss value).
fn build_loss(model: &ForecastModel, sc: &Scenario) -> (Graph, csnet_core::tensor::Var) {
    let g = Graph::new();
    let enc = model.encode(&g, &sc.x).unwrap();
    let prior = model.prior_from(&g, &enc).unwrap();
    let coords = if sc.coords.is_empty() {
        None
    } else {
        Some(sc.coords.as_slice())
    };
    let y = g.input(sc.y.clone());
    let loss = match sc.scheme {
        "regression" => {
            let pred = model.decode(&g, &enc, &prior.mu, coords).unwrap();
            regression_loss(&pred.output, &y).unwrap()
        }
        "va" => {
            let q = model.recognition_from(&g, &enc, &sc.y).unwrap();
            let z = nn::sample(&g, &q, &sc.eps[0]).unwrap().z;
            let pred = model.decode(&g, &enc, &z, coords).unwrap();
            va_loss(&pred.output, &y, &q, &prior, 0.5, 1.0)
                .unwrap()
                .total
        }
        name => {
            let preds: Vec<_> = sc
                .eps
                .iter()
                .map(|e| {
                    let z = nn::sample(&g, &prior, e).unwrap().z;
                    model.decode(&g, &enc, &z, coords).unwrap().output
                })
                .collect();
            match name {
                "kbest" => kbest_loss(&preds, &y).unwrap(),
                "mcml" => mcml_loss(&preds, &y, 0.5).unwrap(),
                other => panic!("unknown scheme {other}"),
            }
        }
    };
    (g, loss)
}

pub fn model_grad_check(task: Task, decoder: DecoderKind, scheme: &'static str, seed: u64) -> f64 {
    let sc = scenario(task, decoder, scheme, seed);
    let mut model = ForecastModel::new(sc.cfg.clone(), seed).unwrap();
    let x0 = flatten_params(&model);

    // analytic gradient
    let (g, loss) = build_loss(&model, &sc);
    loss.backward().unwrap();
    let mut analytic = Vec::with_capacity(x0.len());
    model.visit_params("model", &mut |_, t| match g.grad_for(t) {
        Some(grad) => analytic.extend_from_slice(grad.data()),
        None => analytic.extend(std::iter::repeat(0.0).take(t.len())),
    });

    let numeric = finite_diff(
        |flat| {
            load_params(&mut model, flat);
            let (_, l) = build_loss(&model, &sc);
            l.item()
        },
        &x0,
        STEP,
    );
    max_rel_error(&analytic, &numeric, 1e-6)
}

#[test]
fn fc_model_gradients_match_finite_differences() {
    for seed in 0..3 {
        let err = model_grad_check(Task::Trajectory, DecoderKind::Fc, "mcml", seed);
        assert!(err < TOL, "seed {seed}: rel err {err}");
    }
}

#[test]
fn conv_indexed_model_gradients_match_finite_differences() {
    for seed in 0..3 {
        let err = model_grad_check(Task::Joints, DecoderKind::ConvIndexed, "kbest", seed);
        assert!(err < TOL, "seed {seed}: rel err {err}");
    }
}

#[test]
fn flow_model_gradients_match_finite_differences() {
    for seed in 0..3 {
        let err = model_grad_check(Task::Video, DecoderKind::Flow, "va", seed);
        assert!(err < TOL, "seed {seed}: rel err {err}");
    }
}

#[test]
fn regression_model_gradients_match_finite_differences() {
    let err = model_grad_check(Task::Trajectory, DecoderKind::Fc, "regression", 5);
    assert!(err < TOL, "rel err {err}");
}
