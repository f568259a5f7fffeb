//! Finite-difference verification of tape gradients.
//!
//! Each case builds a scalar function of some input tensors on a fresh tape.
//! Analytic gradients from `backward` are compared with central differences
//! using the norm-wise relative error
//! `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖, floor)` per input tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::graph::assemble_features;
use crate::mesh::{Mesh, Simulation};
use crate::model::{ModelConfig, ModelState, NoiseModel};
use crate::presets;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::nll_loss;
use crate::variational::{
    kl_estimate, log_normal_elementwise, log_prior, LayerNoise, PriorMode, ScaleMixturePrior,
    VariationalDense,
};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
/// Gradient norms below this are compared in absolute terms.
pub const NORM_FLOOR: f64 = 1e-8;

/// A scalar-valued function of its inputs, recorded on a tape.
pub type CaseFn<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a>;

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub input: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub checks: Vec<TensorCheck>,
}

impl CaseReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub cases: Vec<CaseReport>,
    pub tolerance: f64,
}

impl GradReport {
    /// Zero when there is nothing to check.
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(CaseReport::max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

fn evaluate(f: &CaseFn, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares tape and finite-difference gradients of `f` at `inputs`.
pub fn check_case(name: &str, f: &CaseFn, inputs: &[Tensor], h: f64) -> Result<CaseReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut checks = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("gradient of a parameter").clone();
        let mut numeric = vec![0.0; work[k].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x0 = work[k].data()[j];
            work[k].data_mut()[j] = x0 + h;
            let fp = evaluate(f, &work)?;
            work[k].data_mut()[j] = x0 - h;
            let fm = evaluate(f, &work)?;
            work[k].data_mut()[j] = x0;
            *slot = (fp - fm) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.norm();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        checks.push(TensorCheck {
            input: k,
            rel_error: diff / na.max(nn).max(NORM_FLOOR),
        });
    }
    Ok(CaseReport {
        name: name.to_string(),
        checks,
    })
}

fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Weighted sum `Σ c_k x_k` so every output entry gets a distinct adjoint.
fn weighted_sum(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.value(x).len();
    let shape = tape.shape(x).to_vec();
    let c = tape.constant(Tensor::new(shape, (0..n).map(|k| 0.3 + 0.1 * (k % 7) as f64).collect())?);
    let p = tape.mul(x, c)?;
    Ok(tape.sum(p))
}

/// Small model used for the whole-network check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 4,
        message_passes: 2,
        decoder_width: 5,
        mlp_layers: 2,
        ..presets::plate_model()
    }
}

/// Every layer type plus an end-to-end model gradient.
pub fn layer_suite(seed: u64, h: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(String, CaseFn, Vec<Tensor>)> = Vec::new();

    let x = random_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[5, 3], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[5], -0.5, 0.5);
    cases.push((
        "dense".into(),
        Box::new(|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(t, y)
        }),
        vec![x.clone(), w, b],
    ));
    cases.push((
        "matmul".into(),
        Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y)
        }),
        vec![x.clone(), random_tensor(&mut rng, &[3, 2], -1.0, 1.0)],
    ));
    for (name, op) in [
        ("swish", 0usize),
        ("softplus", 1),
        ("sigmoid", 2),
        ("exp", 3),
        ("square", 4),
        ("neg", 5),
    ] {
        cases.push((
            name.into(),
            Box::new(move |t, v| {
                let y = match op {
                    0 => t.swish(v[0]),
                    1 => t.softplus(v[0]),
                    2 => t.sigmoid(v[0]),
                    3 => t.exp(v[0]),
                    4 => t.square(v[0]),
                    _ => t.neg(v[0]),
                };
                weighted_sum(t, y)
            }),
            vec![random_tensor(&mut rng, &[3, 4], -2.0, 2.0)],
        ));
    }
    for (name, op) in [("log", 0usize), ("sqrt", 1)] {
        cases.push((
            name.into(),
            Box::new(move |t, v| {
                let y = if op == 0 { t.log(v[0]) } else { t.sqrt(v[0]) };
                weighted_sum(t, y)
            }),
            vec![random_tensor(&mut rng, &[6], 0.5, 2.0)],
        ));
    }
    for (name, op) in [("add", 0usize), ("sub", 1), ("mul", 2), ("div", 3), ("log_add_exp", 4)] {
        let lo = if op == 3 { 0.5 } else { -2.0 };
        cases.push((
            name.into(),
            Box::new(move |t, v| {
                let y = match op {
                    0 => t.add(v[0], v[1])?,
                    1 => t.sub(v[0], v[1])?,
                    2 => t.mul(v[0], v[1])?,
                    3 => t.div(v[0], v[1])?,
                    _ => t.log_add_exp(v[0], v[1])?,
                };
                weighted_sum(t, y)
            }),
            vec![
                random_tensor(&mut rng, &[2, 3], -2.0, 2.0),
                random_tensor(&mut rng, &[2, 3], lo, 2.0),
            ],
        ));
    }
    cases.push((
        "scalar broadcast".into(),
        Box::new(|t, v| {
            let a = t.add_scalar(v[0], v[1])?;
            let m = t.mul_scalar(a, v[1])?;
            weighted_sum(t, m)
        }),
        vec![random_tensor(&mut rng, &[3, 2], -1.0, 1.0), Tensor::scalar(0.7)],
    ));
    let idx: std::sync::Arc<[usize]> = vec![0, 2, 2, 1, 3, 0, 1].into();
    let idx2 = idx.clone();
    cases.push((
        "gather".into(),
        Box::new(move |t, v| {
            let y = t.gather_rows(v[0], idx.clone())?;
            weighted_sum(t, y)
        }),
        vec![random_tensor(&mut rng, &[4, 3], -1.0, 1.0)],
    ));
    cases.push((
        "scatter-add".into(),
        Box::new(move |t, v| {
            let y = t.scatter_add_rows(v[0], idx2.clone(), 4)?;
            let s = t.square(y);
            weighted_sum(t, s)
        }),
        vec![random_tensor(&mut rng, &[7, 2], -1.0, 1.0)],
    ));
    cases.push((
        "concat/slice".into(),
        Box::new(|t, v| {
            let c = t.concat_cols(&[v[0], v[1]])?;
            let s = t.slice_cols(c, 1, 3)?;
            let q = t.square(s);
            weighted_sum(t, q)
        }),
        vec![
            random_tensor(&mut rng, &[3, 2], -1.0, 1.0),
            random_tensor(&mut rng, &[3, 3], -1.0, 1.0),
        ],
    ));

    // variational sampling path with pinned ε
    let mut store = crate::params::ParamStore::new();
    let layer = VariationalDense::init(&mut store, "v", 3, 2, -1.0, &mut rng);
    let noise = LayerNoise::draw(&mut rng, 2, 3);
    let xin = random_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let prior = ScaleMixturePrior::new(0.5, (-1.0f64).exp(), (-2.0f64).exp())?;
    let layer_inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    for mode in [PriorMode::Mixture, PriorMode::MixedLogs] {
        let (layer, noise, xin) = (layer.clone(), noise.clone(), xin.clone());
        cases.push((
            format!("variational layer + KL ({mode:?})"),
            Box::new(move |t, v| {
                let bound = crate::params::Bound::from_vars(v[..4].to_vec());
                let s = layer.sample(t, &bound, noise.clone())?;
                let xv = t.constant(xin.clone());
                let y = t.linear(xv, s.w, Some(s.b))?;
                let fit = weighted_sum(t, y)?;
                let ws = crate::variational::WeightSample { layers: vec![s] };
                let pv = crate::variational::PriorVars {
                    pi: 0.5,
                    log_sigma1: v[4],
                    log_sigma2: v[5],
                };
                let kl = kl_estimate(t, &ws, pv, mode)?;
                t.add(fit, kl)
            }),
            {
                let mut ins = layer_inputs.clone();
                ins.push(Tensor::scalar(prior.sigma1.ln()));
                ins.push(Tensor::scalar(prior.sigma2.ln()));
                ins
            },
        ));
    }
    cases.push((
        "log posterior".into(),
        Box::new(|t, v| {
            let s = t.softplus(v[2]);
            let l = log_normal_elementwise(t, v[0], v[1], s)?;
            Ok(t.sum(l))
        }),
        vec![
            random_tensor(&mut rng, &[5], -1.0, 1.0),
            random_tensor(&mut rng, &[5], -1.0, 1.0),
            random_tensor(&mut rng, &[5], -2.0, 1.0),
        ],
    ));
    for mode in [PriorMode::Mixture, PriorMode::MixedLogs] {
        cases.push((
            format!("log prior ({mode:?})"),
            Box::new(move |t, v| {
                let pv = crate::variational::PriorVars {
                    pi: 0.5,
                    log_sigma1: v[1],
                    log_sigma2: v[2],
                };
                log_prior(t, &[v[0]], pv, mode)
            }),
            vec![
                random_tensor(&mut rng, &[8], -1.0, 1.0),
                Tensor::scalar(-1.0),
                Tensor::scalar(-2.0),
            ],
        ));
    }
    for nm in [NoiseModel::Quadrature, NoiseModel::HeadOnly, NoiseModel::GlobalOnly] {
        cases.push((
            format!("nll ({nm:?})"),
            Box::new(move |t, v| {
                let sp = t.softplus(v[2]);
                let sn = t.softplus(v[3]);
                nll_loss(t, v[0], v[1], sp, sn, nm)
            }),
            vec![
                random_tensor(&mut rng, &[4, 2], -1.0, 1.0),
                random_tensor(&mut rng, &[4, 2], -1.0, 1.0),
                random_tensor(&mut rng, &[4, 2], -1.0, 1.0),
                Tensor::scalar(-0.5),
            ],
        ));
    }

    let model = ModelState::init(tiny_model_config(), seed ^ 0x5eed)?;
    let mesh = Mesh::structured_grid(3, 3, 1.0, 1.0)?.with_boundaries(vec![0, 3, 6], vec![2, 5, 8])?;
    let u = random_tensor(&mut rng, &[9, 2], -0.5, 0.5);
    let y = random_tensor(&mut rng, &[9, 1], 1.0, 3.0);
    let graph = assemble_features(&mesh, &Simulation::new(u, y.clone()))?;
    let noise = model.draw_decoder_noise(&mut rng);
    let params: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    cases.push((
        "model elbo".into(),
        Box::new(move |t, v| {
            let bound = crate::params::Bound::from_vars(v.to_vec());
            let out = model.forward_with_noise(t, &bound, &graph, noise.clone())?;
            let yv = t.constant(y.clone());
            let sn = model.noise_sigma(t, &bound);
            let nll = nll_loss(t, yv, out.mu, out.sigma, sn, model.config.noise_model)?;
            let pv = model.prior_vars(t, &bound);
            let kl = kl_estimate(t, &out.sample, pv, model.config.prior_mode)?;
            let kl = t.scale(kl, 0.25);
            t.add(nll, kl)
        }),
        params,
    ));

    let reports = cases
        .iter()
        .map(|(name, f, inputs)| check_case(name, f, inputs, h))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradReport {
        cases: reports,
        tolerance: DEFAULT_TOLERANCE,
    })
}
