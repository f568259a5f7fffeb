//! Variational dense layers with a diagonal Gaussian posterior over weights.
//!
//! Weights are sampled by reparameterization, `w = μ + softplus(ρ)·ε` with
//! `ε ~ N(0, I)`, so gradients reach `μ` and `ρ` while `ε` stays constant.
//! The prior is a two-component zero-mean scale mixture with mixing weight
//! `π` and standard deviations `σ1 ≥ σ2`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::glorot_uniform;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `½·log(2π)`.
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// How the scale-mixture prior enters the log density.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    /// `Σ log[π N(w; 0, σ1²) + (1 − π) N(w; 0, σ2²)]`.
    #[default]
    Mixture,
    /// `Σ [π log N(w; 0, σ1²) + (1 − π) log N(w; 0, σ2²)]`.
    MixedLogs,
}

impl std::str::FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixture" => Ok(PriorMode::Mixture),
            "mixed-logs" => Ok(PriorMode::MixedLogs),
            other => Err(Error::InvalidArgument(format!("unknown prior mode {other:?}"))),
        }
    }
}

/// Standard-normal draws for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNoise {
    pub eps_w: Tensor,
    pub eps_b: Tensor,
}

impl LayerNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, fan_out: usize, fan_in: usize) -> Self {
        let w = (0..fan_out * fan_in).map(|_| rng.sample(StandardNormal)).collect();
        let b = (0..fan_out).map(|_| rng.sample(StandardNormal)).collect();
        LayerNoise {
            eps_w: Tensor::matrix(fan_out, fan_in, w).expect("noise shape"),
            eps_b: Tensor::vector(b),
        }
    }

    pub fn zeros(fan_out: usize, fan_in: usize) -> Self {
        LayerNoise {
            eps_w: Tensor::zeros(vec![fan_out, fan_in]),
            eps_b: Tensor::zeros(vec![fan_out]),
        }
    }
}

/// Posterior parameters `(μ_w, ρ_w, μ_b, ρ_b)` of one dense layer.
#[derive(Clone, Debug)]
pub struct VariationalDense {
    pub mu_w: ParamId,
    pub rho_w: ParamId,
    pub mu_b: ParamId,
    pub rho_b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// One reparameterized draw of a layer's weights.
#[derive(Clone, Debug)]
pub struct SampledLayer {
    pub w: Var,
    pub b: Var,
    pub mu_w: Var,
    pub mu_b: Var,
    pub sigma_w: Var,
    pub sigma_b: Var,
    pub noise: LayerNoise,
}

/// Weight draws for a stack of variational layers.
#[derive(Clone, Debug, Default)]
pub struct WeightSample {
    pub layers: Vec<SampledLayer>,
}

impl WeightSample {
    pub fn noise(&self) -> Vec<LayerNoise> {
        self.layers.iter().map(|l| l.noise.clone()).collect()
    }

    /// Every sampled tensor, weights and biases.
    pub fn weight_vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

impl VariationalDense {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rho_init: f64,
        rng: &mut R,
    ) -> Self {
        let mu_w = store.add(format!("{name}.mu_w"), glorot_uniform(rng, fan_out, fan_in));
        let rho_w = store.add(format!("{name}.rho_w"), Tensor::filled(vec![fan_out, fan_in], rho_init));
        let mu_b = store.add(format!("{name}.mu_b"), Tensor::zeros(vec![fan_out]));
        let rho_b = store.add(format!("{name}.rho_b"), Tensor::filled(vec![fan_out], rho_init));
        VariationalDense {
            mu_w,
            rho_w,
            mu_b,
            rho_b,
            fan_in,
            fan_out,
        }
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> LayerNoise {
        LayerNoise::draw(rng, self.fan_out, self.fan_in)
    }

    /// `w = μ + softplus(ρ)·ε` for the given noise.
    pub fn sample(&self, tape: &mut Tape, bound: &Bound, noise: LayerNoise) -> Result<SampledLayer> {
        if noise.eps_w.shape() != [self.fan_out, self.fan_in] || noise.eps_b.shape() != [self.fan_out] {
            return Err(Error::shape("layer noise", noise.eps_w.shape(), &[self.fan_out, self.fan_in]));
        }
        let (mu_w, mu_b) = (bound.var(self.mu_w), bound.var(self.mu_b));
        let sigma_w = tape.softplus(bound.var(self.rho_w));
        let sigma_b = tape.softplus(bound.var(self.rho_b));
        let ew = tape.constant(noise.eps_w.clone());
        let eb = tape.constant(noise.eps_b.clone());
        let sw = tape.mul(sigma_w, ew)?;
        let sb = tape.mul(sigma_b, eb)?;
        let w = tape.add(mu_w, sw)?;
        let b = tape.add(mu_b, sb)?;
        Ok(SampledLayer {
            w,
            b,
            mu_w,
            mu_b,
            sigma_w,
            sigma_b,
            noise,
        })
    }
}

/// Draws a weight sample for each layer in order from `rng`.
pub fn sample_weights<R: Rng + ?Sized>(
    layers: &[&VariationalDense],
    tape: &mut Tape,
    bound: &Bound,
    rng: &mut R,
) -> Result<WeightSample> {
    let noise: Vec<_> = layers.iter().map(|l| l.draw_noise(rng)).collect();
    sample_with_noise(layers, tape, bound, noise)
}

pub fn sample_with_noise(
    layers: &[&VariationalDense],
    tape: &mut Tape,
    bound: &Bound,
    noise: Vec<LayerNoise>,
) -> Result<WeightSample> {
    if noise.len() != layers.len() {
        return Err(Error::shape("weight sample", &[noise.len()], &[layers.len()]));
    }
    let layers = layers
        .iter()
        .zip(noise)
        .map(|(l, n)| l.sample(tape, bound, n))
        .collect::<Result<_>>()?;
    Ok(WeightSample { layers })
}

/// Elementwise `log N(x; μ, σ)` for tensors of equal shape.
pub fn log_normal_elementwise(tape: &mut Tape, x: Var, mu: Var, sigma: Var) -> Result<Var> {
    let diff = tape.sub(x, mu)?;
    let z = tape.div(diff, sigma)?;
    let z2 = tape.square(z);
    let quad = tape.scale(z2, -0.5);
    let log_sigma = tape.log(sigma);
    let t = tape.sub(quad, log_sigma)?;
    Ok(tape.add_const(t, -HALF_LOG_2PI))
}

/// Elementwise `log N(x; 0, σ²)` with a shared rank-0 `log σ`.
pub fn log_normal_zero_mean(tape: &mut Tape, x: Var, log_sigma: Var) -> Result<Var> {
    let x2 = tape.square(x);
    let m2 = tape.scale(log_sigma, -2.0);
    let inv_var = tape.exp(m2);
    let half_inv_var = tape.scale(inv_var, -0.5);
    let quad = tape.mul_scalar(x2, half_inv_var)?;
    let shifted = tape.add_const(log_sigma, HALF_LOG_2PI);
    let offset = tape.neg(shifted);
    tape.add_scalar(quad, offset)
}

/// Sum of `log N(x; μ, σ)`; every `σ` must be positive.
pub fn log_gaussian(x: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if x.len() != mu.len() || x.len() != sigma.len() {
        return Err(Error::shape("log_gaussian", &[x.len()], &[mu.len(), sigma.len()]));
    }
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument("log_gaussian needs sigma > 0".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::vector(x.to_vec()));
    let mv = tape.constant(Tensor::vector(mu.to_vec()));
    let sv = tape.constant(Tensor::vector(sigma.to_vec()));
    let l = log_normal_elementwise(&mut tape, xv, mv, sv)?;
    let s = tape.sum(l);
    Ok(tape.value(s).item())
}

/// Tape handles of a scale-mixture prior.
#[derive(Clone, Copy, Debug)]
pub struct PriorVars {
    pub pi: f64,
    pub log_sigma1: Var,
    pub log_sigma2: Var,
}

/// Scale-mixture prior log density of all `weights` (a scalar).
pub fn log_prior(tape: &mut Tape, weights: &[Var], prior: PriorVars, mode: PriorMode) -> Result<Var> {
    if !(0.0..=1.0).contains(&prior.pi) {
        return Err(Error::InvalidArgument(format!("mixing weight {} outside [0, 1]", prior.pi)));
    }
    let mut total: Option<Var> = None;
    for &w in weights {
        let l1 = log_normal_zero_mean(tape, w, prior.log_sigma1)?;
        let l2 = log_normal_zero_mean(tape, w, prior.log_sigma2)?;
        let per = if prior.pi == 1.0 {
            l1
        } else if prior.pi == 0.0 {
            l2
        } else {
            match mode {
                PriorMode::Mixture => {
                    let a = tape.add_const(l1, prior.pi.ln());
                    let b = tape.add_const(l2, (1.0 - prior.pi).ln());
                    tape.log_add_exp(a, b)?
                }
                PriorMode::MixedLogs => {
                    let a = tape.scale(l1, prior.pi);
                    let b = tape.scale(l2, 1.0 - prior.pi);
                    tape.add(a, b)?
                }
            }
        };
        let s = tape.sum(per);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// Diagonal Gaussian posterior log density of a weight sample (a scalar).
pub fn log_posterior(tape: &mut Tape, ws: &WeightSample) -> Result<Var> {
    let mut total: Option<Var> = None;
    for l in &ws.layers {
        for (w, mu, sigma) in [(l.w, l.mu_w, l.sigma_w), (l.b, l.mu_b, l.sigma_b)] {
            let e = log_normal_elementwise(tape, w, mu, sigma)?;
            let s = tape.sum(e);
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// Single-sample Monte-Carlo estimate `log q(w) − log p(w)` of the KL divergence.
pub fn kl_estimate(tape: &mut Tape, ws: &WeightSample, prior: PriorVars, mode: PriorMode) -> Result<Var> {
    let post = log_posterior(tape, ws)?;
    let pri = log_prior(tape, &ws.weight_vars(), prior, mode)?;
    tape.sub(post, pri)
}

/// Learnable prior scales stored as `log σ1` and a gap `c` with
/// `log σ2 = log σ1 − c²`, so that `σ2 ≤ σ1` for every parameter value.
#[derive(Clone, Debug)]
pub struct PriorParams {
    pub pi: f64,
    pub log_sigma1: ParamId,
    pub gap: ParamId,
}

impl PriorParams {
    pub fn init(store: &mut ParamStore, pi: f64, sigma1: f64, sigma2: f64) -> Result<Self> {
        let gap = gap_for(sigma1, sigma2)?;
        let log_sigma1 = store.add("prior.log_sigma1", Tensor::scalar(sigma1.ln()));
        let gap = store.add("prior.gap", Tensor::scalar(gap));
        Ok(PriorParams { pi, log_sigma1, gap })
    }

    pub fn bind(&self, tape: &mut Tape, bound: &Bound) -> PriorVars {
        let ls1 = bound.var(self.log_sigma1);
        let g2 = tape.square(bound.var(self.gap));
        let ls2 = tape.sub(ls1, g2).expect("rank-0 operands");
        PriorVars {
            pi: self.pi,
            log_sigma1: ls1,
            log_sigma2: ls2,
        }
    }

    /// Current `(σ1, σ2)`.
    pub fn sigmas(&self, store: &ParamStore) -> (f64, f64) {
        let ls1 = store.get(self.log_sigma1).item();
        let g = store.get(self.gap).item();
        (ls1.exp(), (ls1 - g * g).exp())
    }
}

fn gap_for(sigma1: f64, sigma2: f64) -> Result<f64> {
    if !(sigma1 > 0.0 && sigma2 > 0.0) || sigma2 > sigma1 {
        return Err(Error::InvalidArgument(format!(
            "prior needs sigma1 >= sigma2 > 0, got {sigma1}, {sigma2}"
        )));
    }
    Ok((sigma1.ln() - sigma2.ln()).sqrt())
}

/// Fixed-value scale-mixture prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleMixturePrior {
    pub pi: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl ScaleMixturePrior {
    pub fn new(pi: f64, sigma1: f64, sigma2: f64) -> Result<Self> {
        gap_for(sigma1, sigma2)?;
        if !(0.0..=1.0).contains(&pi) {
            return Err(Error::InvalidArgument(format!("mixing weight {pi} outside [0, 1]")));
        }
        Ok(ScaleMixturePrior { pi, sigma1, sigma2 })
    }

    pub fn bind(&self, tape: &mut Tape) -> PriorVars {
        PriorVars {
            pi: self.pi,
            log_sigma1: tape.constant(Tensor::scalar(self.sigma1.ln())),
            log_sigma2: tape.constant(Tensor::scalar(self.sigma2.ln())),
        }
    }

    /// Log density of the given weight values.
    pub fn log_prob(&self, values: &[f64], mode: PriorMode) -> Result<f64> {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::vector(values.to_vec()));
        let vars = self.bind(&mut tape);
        let l = log_prior(&mut tape, &[w], vars, mode)?;
        Ok(tape.value(l).item())
    }
}

/// Closed-form `KL(N(μq, σq²) ‖ N(0, σp²))` summed over elements.
pub fn gaussian_kl_closed_form(mu_q: &[f64], sigma_q: &[f64], sigma_p: f64) -> f64 {
    mu_q.iter()
        .zip(sigma_q)
        .map(|(&m, &s)| (sigma_p / s).ln() + (s * s + m * m) / (2.0 * sigma_p * sigma_p) - 0.5)
        .sum()
}

/// `N(x; 0, σ²)` density, used when reporting mixture values.
pub fn normal_pdf(x: f64, sigma: f64) -> f64 {
    (-(x * x) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::softplus;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_layer(mu: f64, rho: f64) -> (ParamStore, VariationalDense) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = VariationalDense::init(&mut store, "v", 1, 1, rho, &mut rng);
        store.assign("v.mu_w", Tensor::filled(vec![1, 1], mu)).unwrap();
        store.assign("v.mu_b", Tensor::filled(vec![1], mu)).unwrap();
        (store, l)
    }

    fn sampled_value(store: &ParamStore, l: &VariationalDense, eps: f64) -> f64 {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let noise = LayerNoise {
            eps_w: Tensor::filled(vec![1, 1], eps),
            eps_b: Tensor::filled(vec![1], eps),
        };
        let s = l.sample(&mut tape, &bound, noise).unwrap();
        tape.value(s.w).item()
    }

    #[test]
    fn collapsed_sigma_returns_mean() {
        let (store, l) = one_layer(0.37, -40.0);
        let w = sampled_value(&store, &l, 2.5);
        assert!((w - 0.37).abs() < 1e-12);
    }

    #[test]
    fn unit_noise_at_zero_rho() {
        let (store, l) = one_layer(0.0, 0.0);
        let w = sampled_value(&store, &l, 1.0);
        assert!((w - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn log_gaussian_reference_points() {
        let v = log_gaussian(&[1.5], &[1.5], &[1.0]).unwrap();
        assert!((v + 0.918939).abs() < 1e-6);
        let s = 0.7;
        let v = log_gaussian(&[1.5 + s], &[1.5], &[s]).unwrap();
        assert!((v - (-0.5 - HALF_LOG_2PI - s.ln())).abs() < 1e-14);
        assert!(log_gaussian(&[0.0], &[0.0], &[0.0]).is_err());
        assert!(log_gaussian(&[0.0], &[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn equal_sigmas_degenerate_mixture() {
        let p = ScaleMixturePrior::new(0.3, 0.5, 0.5).unwrap();
        let w = [0.1, -0.4, 0.9];
        let single = log_gaussian(&w, &[0.0; 3], &[0.5; 3]).unwrap();
        for mode in [PriorMode::Mixture, PriorMode::MixedLogs] {
            assert!((p.log_prob(&w, mode).unwrap() - single).abs() < 1e-12);
        }
    }

    #[test]
    fn pi_one_is_wide_component() {
        let p = ScaleMixturePrior::new(1.0, 0.8, 0.1).unwrap();
        let w = [0.3, -1.2];
        let single = log_gaussian(&w, &[0.0; 2], &[0.8; 2]).unwrap();
        assert_eq!(p.log_prob(&w, PriorMode::Mixture).unwrap(), single);
    }

    #[test]
    fn prior_at_zero_with_default_scales() {
        let e = std::f64::consts::E;
        let p = ScaleMixturePrior::new(0.5, 1.0 / e, 1.0 / (e * e)).unwrap();
        let got = p.log_prob(&[0.0], PriorMode::Mixture).unwrap();
        let want = (0.5 * normal_pdf(0.0, 1.0 / e) + 0.5 * normal_pdf(0.0, 1.0 / (e * e))).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn sigma2_never_exceeds_sigma1() {
        assert!(ScaleMixturePrior::new(0.5, 0.1, 0.2).is_err());
        let mut store = ParamStore::new();
        let p = PriorParams::init(&mut store, 0.5, 0.4, 0.1).unwrap();
        let (s1, s2) = p.sigmas(&store);
        assert!((s1 - 0.4).abs() < 1e-15 && (s2 - 0.1).abs() < 1e-14);
        store.assign("prior.gap", Tensor::scalar(-3.0)).unwrap();
        let (s1, s2) = p.sigmas(&store);
        assert!(s2 <= s1);
    }

    #[test]
    fn posterior_at_zero_noise() {
        let (store, l) = one_layer(0.2, 0.5);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let ws = sample_with_noise(&[&l], &mut tape, &bound, vec![LayerNoise::zeros(1, 1)]).unwrap();
        let lp = log_posterior(&mut tape, &ws).unwrap();
        let per = -HALF_LOG_2PI - softplus(0.5).ln();
        assert!((tape.value(lp).item() - 2.0 * per).abs() < 1e-14);
    }
}
