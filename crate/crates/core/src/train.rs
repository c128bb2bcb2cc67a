//! Deterministic single-threaded training.
//!
//! One graph per mini-batch: every example's loss is built on the same
//! tape, averaged, and backpropagated once. Noise draws come from one
//! substream consumed sequentially, batch order comes from a per-epoch
//! shuffle substream, so a (seed, config, dataset) triple reproduces the
//! run bit for bit.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions};
use crate::losses::{self, LossConfig, LossScheme};
use crate::models::ForecastModel;
use crate::nn;
use crate::rng::Rng;
use crate::synthdata::Dataset;
use crate::tensor::{Graph, Tensor, Var};

const NOISE_STREAM: u64 = 0x40_153;
const SHUFFLE_STREAM: u64 = 0x51 << 32;

#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; first and second moments per parameter.
pub struct Adam {
    pub params: AdamParams,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: AdamParams) -> Self {
        Adam {
            params,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from the gradients accumulated on `graph`.
    /// Parameters that took no gradient this step are left untouched.
    pub fn apply(&mut self, model: &mut ForecastModel, graph: &Graph) -> Result<()> {
        use crate::nn::Parameterized;

        let mut grads: Vec<Option<Tensor>> = Vec::new();
        model.visit_params("model", &mut |_, t| grads.push(graph.grad_for(t)));
        if self.m.is_empty() {
            let mut sizes = Vec::new();
            model.visit_params("model", &mut |_, t| sizes.push(t.len()));
            self.m = sizes.iter().map(|&n| vec![0.0; n]).collect();
            self.v = sizes.iter().map(|&n| vec![0.0; n]).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.params.beta1.powi(t);
        let bc2 = 1.0 - self.params.beta2.powi(t);
        let (b1, b2, lr, eps) = (
            self.params.beta1,
            self.params.beta2,
            self.params.lr,
            self.params.eps,
        );

        let mut idx = 0usize;
        let mut bad: Option<String> = None;
        let m_all = &mut self.m;
        let v_all = &mut self.v;
        model.visit_params_mut("model", &mut |name, tensor| {
            let slot = idx;
            idx += 1;
            let Some(grad) = &grads[slot] else { return };
            let m = &mut m_all[slot];
            let v = &mut v_all[slot];
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
            if bad.is_none() && data.iter().any(|x| !x.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        match bad {
            Some(name) => Err(Error::domain(format!(
                "parameter '{name}' became non-finite after an optimizer step"
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub loss: LossConfig,
    pub adam: AdamParams,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// scales the training-time latent noise; 0 forces sigma to zero,
    /// turning any scheme into its deterministic counterpart
    pub noise_scale: f64,
    /// run a held-out evaluation every this many epochs (0 = never)
    pub eval_every: usize,
    pub eval_opts: EvalOptions,
}

impl TrainSettings {
    pub fn new(loss: LossConfig, epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainSettings {
            loss,
            adam: AdamParams::default(),
            epochs,
            batch_size,
            seed,
            noise_scale: 1.0,
            eval_every: 0,
            eval_opts: EvalOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub reconstruction: Option<f64>,
    pub kl: Option<f64>,
    pub top1: Option<f64>,
    pub top4: Option<f64>,
    pub wall_ms: u128,
}

/// Append-only training log, one row per epoch, echoing the run
/// configuration in its header.
#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub config_echo: Vec<String>,
    pub epochs: Vec<EpochLog>,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for line in &self.config_echo {
            out.push_str(&format!("# {line}\n"));
        }
        out.push_str("epoch,loss,recon,kl,top1,top4,wall_ms\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.12e},{},{},{},{},{}\n",
                e.epoch,
                e.loss,
                opt(e.reconstruction),
                opt(e.kl),
                opt(e.top1),
                opt(e.top4),
                e.wall_ms
            ));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

fn scheme_matches_model(scheme: LossScheme, model: &ForecastModel) -> Result<()> {
    match scheme {
        LossScheme::Regression => {
            if model.cfg.stochastic {
                return Err(Error::usage(
                    "the regression scheme wants a non-stochastic model (stochastic = false)",
                ));
            }
        }
        LossScheme::Va => {
            if !model.cfg.stochastic || model.recognition.is_none() {
                return Err(Error::usage(
                    "the VA scheme wants a stochastic model with a recognition network",
                ));
            }
        }
        LossScheme::Mcml | LossScheme::KBest => {
            if !model.cfg.stochastic {
                return Err(Error::usage(
                    "MCML and K-best want a stochastic model (stochastic = true)",
                ));
            }
        }
    }
    Ok(())
}

struct BatchStats {
    loss: f64,
    recon: f64,
    kl: f64,
}

/// Builds one example's loss on the tape.
fn example_loss(
    model: &ForecastModel,
    g: &Graph,
    sample: &crate::synthdata::Sample,
    loss_cfg: &LossConfig,
    noise_scale: f64,
    noise: &mut Rng,
) -> Result<(Var, Option<(Var, Var)>)> {
    let enc = model.encode(g, &sample.x)?;
    let prior = model.prior_from(g, &enc)?;
    let coords = if sample.coords.is_empty() {
        None
    } else {
        Some(sample.coords.as_slice())
    };
    let y = g.input(sample.y.clone());
    let d = model.cfg.latent_dim;
    let draw = |noise: &mut Rng| -> Tensor {
        let data: Vec<f64> = (0..d).map(|_| noise.normal() * noise_scale).collect();
        Tensor::from_vec(&[d], data).expect("epsilon shape")
    };

    match loss_cfg.scheme {
        LossScheme::Regression => {
            let pred = model.decode(g, &enc, &prior.mu, coords)?;
            Ok((losses::regression_loss(&pred.output, &y)?, None))
        }
        LossScheme::KBest | LossScheme::Mcml => {
            let mut preds = Vec::with_capacity(loss_cfg.k);
            for _ in 0..loss_cfg.k {
                let eps = draw(noise);
                let z = nn::sample(g, &prior, &eps)?.z;
                preds.push(model.decode(g, &enc, &z, coords)?.output);
            }
            let loss = match loss_cfg.scheme {
                LossScheme::KBest => losses::kbest_loss(&preds, &y)?,
                _ => losses::mcml_loss(&preds, &y, loss_cfg.nu)?,
            };
            Ok((loss, None))
        }
        LossScheme::Va => {
            let q = model.recognition_from(g, &enc, &sample.y)?;
            let eps = draw(noise);
            let z = nn::sample(g, &q, &eps)?.z;
            let pred = model.decode(g, &enc, &z, coords)?;
            let parts = losses::va_loss(&pred.output, &y, &q, &prior, loss_cfg.nu, loss_cfg.kl_weight)?;
            Ok((parts.total, Some((parts.reconstruction, parts.kl))))
        }
    }
}

fn run_batch(
    model: &mut ForecastModel,
    batch: &[usize],
    dataset: &Dataset,
    settings: &TrainSettings,
    noise: &mut Rng,
    adam: &mut Adam,
    epoch: usize,
    batch_no: usize,
) -> Result<BatchStats> {
    let g = Graph::new();
    let mut total: Option<Var> = None;
    let mut recon_sum = 0.0;
    let mut kl_sum = 0.0;
    for &idx in batch {
        let (loss, parts) =
            example_loss(model, &g, &dataset.samples[idx], &settings.loss, settings.noise_scale, noise)?;
        if let Some((r, k)) = parts {
            recon_sum += r.item();
            kl_sum += k.item();
        }
        total = Some(match total {
            Some(t) => t.add(&loss)?,
            None => loss,
        });
    }
    let mean = total
        .expect("non-empty batch")
        .mul_scalar(1.0 / batch.len() as f64);
    let loss_value = mean.item();
    if !loss_value.is_finite() {
        return Err(Error::domain(format!(
            "non-finite loss {loss_value} at epoch {epoch}, batch {batch_no}"
        )));
    }
    mean.backward()?;
    adam.apply(model, &g)?;
    Ok(BatchStats {
        loss: loss_value,
        recon: recon_sum / batch.len() as f64,
        kl: kl_sum / batch.len() as f64,
    })
}

/// Trains in place over the given dataset rows and returns the log.
/// `eval_indices`, when non-empty, feeds the periodic held-out
/// evaluation selected by `settings.eval_every`.
pub fn train(
    model: &mut ForecastModel,
    dataset: &Dataset,
    train_indices: &[usize],
    eval_indices: &[usize],
    settings: &TrainSettings,
) -> Result<RunLog> {
    scheme_matches_model(settings.loss.scheme, model)?;
    crate::checkpoint::check_compatible(&model.cfg, &dataset.spec)?;
    if train_indices.is_empty() {
        return Err(Error::usage("no training examples selected"));
    }
    if settings.batch_size == 0 {
        return Err(Error::usage("batch_size must be >= 1"));
    }
    if settings.epochs == 0 {
        return Err(Error::usage("epochs must be >= 1"));
    }

    let mut log = RunLog {
        config_echo: vec![
            format!("scheme = {}", settings.loss.scheme.name()),
            format!("k = {}", settings.loss.k),
            format!("nu = {}", settings.loss.nu),
            format!("kl_weight = {}", settings.loss.kl_weight),
            format!("learning_rate = {}", settings.adam.lr),
            format!("epochs = {}", settings.epochs),
            format!("batch_size = {}", settings.batch_size),
            format!("seed = {}", settings.seed),
            format!("train_examples = {}", train_indices.len()),
        ],
        epochs: Vec::with_capacity(settings.epochs),
    };

    let mut adam = Adam::new(settings.adam);
    let mut noise = Rng::substream(settings.seed, NOISE_STREAM);
    let mut order: Vec<usize> = train_indices.to_vec();

    for epoch in 0..settings.epochs {
        let started = Instant::now();
        let mut shuffle = Rng::substream(settings.seed, SHUFFLE_STREAM | epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle.below(i + 1));
        }

        let mut loss_sum = 0.0;
        let mut recon_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut batches = 0usize;
        for (batch_no, batch) in order.chunks(settings.batch_size).enumerate() {
            let stats = run_batch(
                model, batch, dataset, settings, &mut noise, &mut adam, epoch, batch_no,
            )?;
            loss_sum += stats.loss;
            recon_sum += stats.recon;
            kl_sum += stats.kl;
            batches += 1;
        }

        let is_va = settings.loss.scheme == LossScheme::Va;
        let mut entry = EpochLog {
            epoch,
            loss: loss_sum / batches as f64,
            reconstruction: is_va.then(|| recon_sum / batches as f64),
            kl: is_va.then(|| kl_sum / batches as f64),
            top1: None,
            top4: None,
            wall_ms: 0,
        };
        if settings.eval_every > 0
            && !eval_indices.is_empty()
            && (epoch + 1) % settings.eval_every == 0
        {
            let report = eval::evaluate(model, dataset, eval_indices, &settings.eval_opts)?;
            entry.top1 = report.mean_at(1);
            entry.top4 = report.mean_at(4.min(settings.eval_opts.k_max));
        }
        entry.wall_ms = started.elapsed().as_millis();
        log.epochs.push(entry);
    }
    Ok(log)
}
