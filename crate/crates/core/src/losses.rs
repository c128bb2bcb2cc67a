//! Training objectives over K decoded samples.
//!
//! All four losses are scalar tape nodes, differentiable end to end:
//!
//! * `mcml_loss`  — negative log of a K-sample Monte-Carlo likelihood,
//!   `-logsumexp_j(-||y_j - y||^2 / (2 nu))`, max-shifted;
//! * `kbest_loss` — squared error of the closest sample only, so the
//!   gradient flows through the argmin sample alone;
//! * `va_loss`    — reconstruction from one posterior sample plus a
//!   weighted closed-form KL toward the conditional prior;
//! * `regression_loss` — plain sum of squares, the deterministic
//!   baseline.

use crate::error::{Error, Result};
use crate::nn::{self, GaussianVars};
use crate::tensor::Var;

/// Training scheme selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossScheme {
    Mcml,
    Va,
    KBest,
    Regression,
}

impl LossScheme {
    pub fn name(&self) -> &'static str {
        match self {
            LossScheme::Mcml => "mcml",
            LossScheme::Va => "va",
            LossScheme::KBest => "kbest",
            LossScheme::Regression => "regression",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcml" => Ok(LossScheme::Mcml),
            "va" => Ok(LossScheme::Va),
            "kbest" | "mcbest" => Ok(LossScheme::KBest),
            "regression" => Ok(LossScheme::Regression),
            other => Err(Error::usage(format!(
                "unknown loss scheme '{other}' (expected mcml, va, kbest or regression)"
            ))),
        }
    }

    /// Number of prior draws per example per step the paper's schemes
    /// use by default: 15 for MCML and K-best, one posterior draw for
    /// VA, none for regression.
    pub fn default_k(&self) -> usize {
        match self {
            LossScheme::Mcml | LossScheme::KBest => 15,
            LossScheme::Va | LossScheme::Regression => 1,
        }
    }
}

/// Scheme plus its scalar knobs.
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub scheme: LossScheme,
    pub k: usize,
    /// output variance nu of y ~ N(D(z), nu I)
    pub nu: f64,
    pub kl_weight: f64,
}

impl LossConfig {
    pub fn new(scheme: LossScheme, k: usize, nu: f64, kl_weight: f64) -> Result<Self> {
        if k < 1 {
            return Err(Error::usage("K must be >= 1"));
        }
        if scheme == LossScheme::Regression && k != 1 {
            return Err(Error::usage("K must be 1 for the regression scheme"));
        }
        if !(nu > 0.0) {
            return Err(Error::domain(format!("nu must be positive, got {nu}")));
        }
        if !(kl_weight > 0.0) {
            return Err(Error::domain(format!(
                "kl_weight must be positive, got {kl_weight}"
            )));
        }
        Ok(LossConfig {
            scheme,
            k,
            nu,
            kl_weight,
        })
    }
}

fn squared_distance(pred: &Var, y: &Var) -> Result<Var> {
    if pred.shape() != y.shape() {
        return Err(Error::shape(format!(
            "prediction shape {:?} does not match target {:?}",
            pred.shape(),
            y.shape()
        )));
    }
    pred.sub(y)?.sum_squares()
}

/// `-logsumexp_j(-||pred_j - y||^2 / (2 nu))`, minimized.
pub fn mcml_loss(preds: &[Var], y: &Var, nu: f64) -> Result<Var> {
    if preds.is_empty() {
        return Err(Error::usage("mcml_loss needs at least one sample"));
    }
    if !(nu > 0.0) {
        return Err(Error::domain(format!("nu must be positive, got {nu}")));
    }
    let dists: Vec<Var> = preds
        .iter()
        .map(|p| squared_distance(p, y))
        .collect::<Result<_>>()?;
    let stacked = Var::concat(&dists, 0)?;
    let lse = stacked.mul_scalar(-1.0 / (2.0 * nu)).logsumexp(None)?;
    Ok(lse.neg())
}

/// Squared error of the closest sample; only the argmin sample receives
/// gradient.
pub fn kbest_loss(preds: &[Var], y: &Var) -> Result<Var> {
    if preds.is_empty() {
        return Err(Error::usage("kbest_loss needs at least one sample"));
    }
    let dists: Vec<Var> = preds
        .iter()
        .map(|p| squared_distance(p, y))
        .collect::<Result<_>>()?;
    Var::concat(&dists, 0)?.min(None)
}

/// The pieces of the variational objective, kept separate for logging.
pub struct VaLoss {
    pub total: Var,
    pub reconstruction: Var,
    pub kl: Var,
}

/// `||pred - y||^2 / (2 nu) + kl_weight * KL(q || p)` with `pred`
/// decoded from one reparameterized posterior sample.
pub fn va_loss(
    pred: &Var,
    y: &Var,
    q: &GaussianVars,
    p: &GaussianVars,
    nu: f64,
    kl_weight: f64,
) -> Result<VaLoss> {
    if !(nu > 0.0) {
        return Err(Error::domain(format!("nu must be positive, got {nu}")));
    }
    let reconstruction = squared_distance(pred, y)?.mul_scalar(1.0 / (2.0 * nu));
    let kl = nn::kl_diag(q, p)?;
    let total = reconstruction.add(&kl.mul_scalar(kl_weight))?;
    Ok(VaLoss {
        total,
        reconstruction,
        kl,
    })
}

/// Sum of squared errors.
pub fn regression_loss(pred: &Var, y: &Var) -> Result<Var> {
    squared_distance(pred, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    /// Builds predictions at the given squared distances from y = 0.
    fn preds_at_sq_dists(g: &Graph, dists: &[f64]) -> (Vec<Var>, Var) {
        let preds = dists
            .iter()
            .map(|&d| g.input(vec_t(&[d.sqrt()])))
            .collect();
        let y = g.input(vec_t(&[0.0]));
        (preds, y)
    }

    #[test]
    fn mcml_single_sample() {
        // K=1, ||pred - y||^2 = 3, nu = 0.5 -> 3.0
        let g = Graph::new();
        let (preds, y) = preds_at_sq_dists(&g, &[3.0]);
        let loss = mcml_loss(&preds, &y, 0.5).unwrap();
        assert!((loss.item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn mcml_two_samples_frozen_value() {
        // squared distances {1, 4}, nu = 0.5 -> -ln(e^-1 + e^-4)
        let g = Graph::new();
        let (preds, y) = preds_at_sq_dists(&g, &[1.0, 4.0]);
        let loss = mcml_loss(&preds, &y, 0.5).unwrap();
        assert!((loss.item() - 0.951412648426258).abs() < 1e-12);
    }

    #[test]
    fn mcml_exact_sample_bounds_loss() {
        let g = Graph::new();
        let (preds, y) = preds_at_sq_dists(&g, &[0.0, 7.3]);
        let loss = mcml_loss(&preds, &y, 0.5).unwrap();
        assert!(loss.item() <= 0.0);
    }

    #[test]
    fn mcml_rejects_bad_nu() {
        let g = Graph::new();
        let (preds, y) = preds_at_sq_dists(&g, &[1.0]);
        assert!(matches!(
            mcml_loss(&preds, &y, 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn kbest_picks_min() {
        let g = Graph::new();
        let (preds, y) = preds_at_sq_dists(&g, &[2.25, 0.64, 9.0]);
        let loss = kbest_loss(&preds, &y).unwrap();
        assert!((loss.item() - 0.64).abs() < 1e-12);
    }

    #[test]
    fn kbest_exact_sample_is_zero() {
        let g = Graph::new();
        let (preds, y) = preds_at_sq_dists(&g, &[4.0, 0.0]);
        assert_eq!(kbest_loss(&preds, &y).unwrap().item(), 0.0);
    }

    #[test]
    fn kbest_k1_matches_regression_value_and_gradient() {
        let g = Graph::new();
        let pred_t = vec_t(&[0.3, -1.1, 0.9]);
        let pred = g.param(&pred_t);
        let y = g.input(vec_t(&[1.0, 0.0, 0.5]));
        let kb = kbest_loss(std::slice::from_ref(&pred), &y).unwrap();
        kb.backward().unwrap();
        let kb_grad = pred.grad().unwrap();

        let g2 = Graph::new();
        let pred2 = g2.param(&pred_t);
        let y2 = g2.input(vec_t(&[1.0, 0.0, 0.5]));
        let re = regression_loss(&pred2, &y2).unwrap();
        re.backward().unwrap();

        assert!((kb.item() - re.item()).abs() < 1e-12);
        assert_eq!(kb_grad.data(), pred2.grad().unwrap().data());
    }

    #[test]
    fn kbest_gradient_only_through_argmin() {
        let g = Graph::new();
        let far = g.param(&vec_t(&[3.0]));
        let near = g.param(&vec_t(&[0.5]));
        let y = g.input(vec_t(&[0.0]));
        let loss = kbest_loss(&[far.clone(), near.clone()], &y).unwrap();
        loss.backward().unwrap();
        assert!(far.grad().is_none() || far.grad().unwrap().data() == [0.0]);
        assert_eq!(near.grad().unwrap().data(), &[1.0]); // d(x^2)/dx = 2x = 1
    }

    #[test]
    fn va_vanishes_when_perfect() {
        let g = Graph::new();
        let pred = g.input(vec_t(&[1.0, 2.0]));
        let y = g.input(vec_t(&[1.0, 2.0]));
        let q = GaussianVars {
            mu: g.input(vec_t(&[0.0])),
            sigma: g.input(vec_t(&[1.0])),
        };
        let p = q.clone();
        let out = va_loss(&pred, &y, &q, &p, 0.5, 1.0).unwrap();
        assert!(out.total.item().abs() < 1e-12);
    }

    #[test]
    fn va_reconstruction_scale() {
        // q == p, ||pred - y||^2 = 1, nu = 0.5, kl_weight = 1 -> 1.0
        let g = Graph::new();
        let pred = g.input(vec_t(&[1.0]));
        let y = g.input(vec_t(&[0.0]));
        let q = GaussianVars {
            mu: g.input(vec_t(&[0.3])),
            sigma: g.input(vec_t(&[0.8])),
        };
        let out = va_loss(&pred, &y, &q, &q.clone(), 0.5, 1.0).unwrap();
        assert!((out.total.item() - 1.0).abs() < 1e-12);
        assert!(out.kl.item().abs() < 1e-12);
    }

    #[test]
    fn va_kl_term_scales_with_weight() {
        // q = N(1,1), p = N(0,1), pred == y -> 0.5 * kl_weight
        let g = Graph::new();
        let pred = g.input(vec_t(&[2.0]));
        let y = g.input(vec_t(&[2.0]));
        let q = GaussianVars {
            mu: g.input(vec_t(&[1.0])),
            sigma: g.input(vec_t(&[1.0])),
        };
        let p = GaussianVars {
            mu: g.input(vec_t(&[0.0])),
            sigma: g.input(vec_t(&[1.0])),
        };
        for kl_weight in [1.0, 3.0] {
            let out = va_loss(&pred, &y, &q, &p, 0.5, kl_weight).unwrap();
            assert!((out.total.item() - 0.5 * kl_weight).abs() < 1e-12);
        }
    }

    #[test]
    fn regression_examples() {
        let g = Graph::new();
        let pred = g.input(vec_t(&[1.0, 2.0, 2.0]));
        let y = g.input(vec_t(&[0.0, 0.0, 0.0]));
        assert!((regression_loss(&pred, &y).unwrap().item() - 9.0).abs() < 1e-12);
        assert_eq!(
            regression_loss(&y, &y).unwrap().item(),
            0.0
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let g = Graph::new();
        let pred = g.input(vec_t(&[1.0, 2.0]));
        let y = g.input(vec_t(&[1.0]));
        assert!(matches!(
            regression_loss(&pred, &y),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn config_validates() {
        assert!(LossConfig::new(LossScheme::Regression, 1, 0.5, 1.0).is_ok());
        assert!(LossConfig::new(LossScheme::Regression, 2, 0.5, 1.0).is_err());
        assert!(LossConfig::new(LossScheme::KBest, 0, 0.5, 1.0).is_err());
        assert!(LossConfig::new(LossScheme::Mcml, 15, -1.0, 1.0).is_err());
    }
}
