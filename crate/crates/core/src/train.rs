//! ELBO assembly and the minibatch training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, Graph};
use crate::mesh::Dataset;
use crate::model::{ModelState, NoiseModel};
use crate::optim::{clip_global_norm, learning_rate, Adam};
use crate::params::Bound;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::variational::{kl_estimate, HALF_LOG_2PI};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Simulations per minibatch.
    pub n_batch: usize,
    pub lr: f64,
    pub decay: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    /// Global gradient-norm limit; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_batch == 0 {
            return Err(Error::InvalidArgument("n_batch must be >= 1".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidArgument("decay must lie in (0, 1]".into()));
        }
        if self.decay_every == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("decay_every and lr must be positive".into()));
        }
        Ok(())
    }
}

/// KL weight of batch `i` (1-based) out of `m`: `2^(m−i) / (2^m − 1)`.
pub fn beta_schedule(i: usize, m: usize) -> Result<f64> {
    if m < 1 || i < 1 || i > m {
        return Err(Error::InvalidArgument(format!("beta schedule needs 1 <= i <= M, got i={i}, M={m}")));
    }
    let m = m as i32;
    Ok(2f64.powi(m - i as i32) / (2f64.powi(m) - 1.0))
}

/// `−Σ log N(y; μ, σ_tot)` recorded on the tape.
pub fn nll_loss(
    tape: &mut Tape,
    y: Var,
    mu: Var,
    sigma_pred: Var,
    sigma_noise: Var,
    noise_model: NoiseModel,
) -> Result<Var> {
    let var = match noise_model {
        NoiseModel::Quadrature => {
            let sp2 = tape.square(sigma_pred);
            let sn2 = tape.square(sigma_noise);
            tape.add_scalar(sp2, sn2)?
        }
        NoiseModel::HeadOnly => tape.square(sigma_pred),
        NoiseModel::GlobalOnly => {
            let zeros = tape.constant(Tensor::zeros(tape.shape(mu).to_vec()));
            let sn2 = tape.square(sigma_noise);
            tape.add_scalar(zeros, sn2)?
        }
    };
    let r = tape.sub(y, mu)?;
    let r2 = tape.square(r);
    let quad = tape.div(r2, var)?;
    let logv = tape.log(var);
    let both = tape.add(quad, logv)?;
    let half = tape.scale(both, 0.5);
    let elem = tape.add_const(half, HALF_LOG_2PI);
    Ok(tape.sum(elem))
}

/// Value-level NLL with the quadrature noise model.
pub fn nll_value(y: &Tensor, mu: &Tensor, sigma_pred: &Tensor, sigma_noise: f64) -> Result<f64> {
    if y.shape() != mu.shape() || y.shape() != sigma_pred.shape() {
        return Err(Error::shape("nll", y.shape(), mu.shape()));
    }
    if !(y.all_finite() && mu.all_finite() && sigma_pred.all_finite() && sigma_noise.is_finite()) {
        return Err(Error::InvalidArgument("non-finite input to nll".into()));
    }
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    let mv = tape.constant(mu.clone());
    let sv = tape.constant(sigma_pred.clone());
    let nv = tape.constant(Tensor::scalar(sigma_noise));
    let l = nll_loss(&mut tape, yv, mv, sv, nv, NoiseModel::Quadrature)?;
    Ok(tape.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
    pub beta: f64,
}

/// Loss variable and its parts for one minibatch and one weight sample.
pub fn elbo_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    bound: &Bound,
    state: &ModelState,
    graph: &Graph,
    y: &Tensor,
    beta: f64,
    rng: &mut R,
) -> Result<(Var, LossParts)> {
    let out = state.forward(tape, bound, graph, rng)?;
    if tape.shape(out.mu) != y.shape() {
        return Err(Error::shape("targets", y.shape(), tape.shape(out.mu)));
    }
    let yv = tape.constant(y.clone());
    let noise = state.noise_sigma(tape, bound);
    let nll = nll_loss(tape, yv, out.mu, out.sigma, noise, state.config.noise_model)?;
    let prior = state.prior_vars(tape, bound);
    let kl = kl_estimate(tape, &out.sample, prior, state.config.prior_mode)?;
    let weighted = tape.scale(kl, beta);
    let total = tape.add(nll, weighted)?;
    let parts = LossParts {
        total: tape.value(total).item(),
        nll: tape.value(nll).item(),
        kl: tape.value(kl).item(),
        beta,
    };
    Ok((total, parts))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub parts: LossParts,
}

/// Batch-averaged losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ModelState,
    pub adam: Adam,
    pub epoch: usize,
    pub step: usize,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

/// One graph per simulation, sharing the mesh topology.
pub fn simulation_graphs(dataset: &Dataset) -> Result<Vec<Graph>> {
    let base = build_graph(&dataset.mesh);
    dataset
        .simulations
        .iter()
        .map(|s| {
            let mut g = base.clone();
            g.set_displacement(&s.u)?;
            Ok(g)
        })
        .collect()
}

fn stack_targets(dataset: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let t = dataset.simulations[idx[0]].target_width();
    let mut data = Vec::new();
    for &i in idx {
        data.extend_from_slice(dataset.simulations[i].y.data());
    }
    Tensor::matrix(data.len() / t, t, data)
}

pub fn train(dataset: &Dataset, model: ModelState, cfg: &TrainConfig) -> Result<TrainState> {
    train_with(dataset, model, cfg, |_| {})
}

/// Runs `cfg.epochs` epochs, calling `progress` after each one.
pub fn train_with(
    dataset: &Dataset,
    model: ModelState,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainState> {
    cfg.validate()?;
    if dataset.len() < cfg.n_batch {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} simulations, fewer than n_batch = {}",
            dataset.len(),
            cfg.n_batch
        )));
    }
    if dataset.target_width() != Some(model.config.out_dim) {
        return Err(Error::shape(
            "target width",
            &[dataset.target_width().unwrap_or(0)],
            &[model.config.out_dim],
        ));
    }
    let graphs = simulation_graphs(dataset)?;
    let n = dataset.len();
    let m = n.div_ceil(cfg.n_batch);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut state = TrainState {
        adam: Adam::new(&model.params),
        model,
        epoch: 0,
        step: 0,
        history: Vec::with_capacity(cfg.epochs),
        steps: Vec::with_capacity(cfg.epochs * m),
    };

    for epoch in 1..=cfg.epochs {
        let lr = learning_rate(cfg.lr, cfg.decay, cfg.decay_every, epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        for (b, idx) in order.chunks(cfg.n_batch).enumerate() {
            let beta = beta_schedule(b + 1, m)?;
            let refs: Vec<&Graph> = idx.iter().map(|&i| &graphs[i]).collect();
            let graph = Graph::batch(&refs)?;
            let y = stack_targets(dataset, idx)?;

            let mut tape = Tape::new();
            let bound = state.model.params.bind(&mut tape, true);
            let (loss, parts) = elbo_loss(&mut tape, &bound, &state.model, &graph, &y, beta, &mut rng)?;
            for (name, v) in [("nll", parts.nll), ("kl", parts.kl)] {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        part: name.into(),
                    });
                }
            }
            let mut grads = tape.backward(loss)?;
            let mut flat: Vec<Tensor> = bound
                .vars()
                .iter()
                .map(|&v| grads.take(v).expect("trainable gradient"))
                .collect();
            for (id, g) in state.model.params.ids().zip(&flat) {
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        part: format!("gradient of {}", state.model.params.name(id)),
                    });
                }
            }
            clip_global_norm(&mut flat, cfg.clip_norm);
            state.adam.step(&mut state.model.params, &flat, lr)?;

            state.step += 1;
            state.steps.push(StepRecord {
                epoch,
                batch: b + 1,
                parts,
            });
            sums[0] += parts.total;
            sums[1] += parts.nll;
            sums[2] += parts.kl;
        }
        state.epoch = epoch;
        let rec = EpochRecord {
            epoch,
            total: sums[0] / m as f64,
            nll: sums[1] / m as f64,
            kl: sums[2] / m as f64,
            lr,
        };
        state.history.push(rec);
        progress(&rec);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_single_batch_is_one() {
        assert_eq!(beta_schedule(1, 1).unwrap(), 1.0);
    }

    #[test]
    fn beta_rejects_empty_epoch() {
        assert!(beta_schedule(1, 0).is_err());
        assert!(beta_schedule(5, 4).is_err());
    }

    #[test]
    fn unit_sigma_zero_residual() {
        let y = Tensor::vector(vec![0.3, -1.0]);
        let s = Tensor::vector(vec![1.0, 1.0]);
        let v = nll_value(&y, &y, &s, 0.0).unwrap();
        assert!((v - 2.0 * HALF_LOG_2PI).abs() < 1e-14);
    }

    #[test]
    fn doubling_sigma_adds_log_two() {
        let y = Tensor::vector(vec![0.5; 3]);
        let a = nll_value(&y, &y, &Tensor::vector(vec![0.7; 3]), 0.0).unwrap();
        let b = nll_value(&y, &y, &Tensor::vector(vec![1.4; 3]), 0.0).unwrap();
        assert!((b - a - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_nan() {
        let y = Tensor::vector(vec![f64::NAN]);
        let s = Tensor::vector(vec![1.0]);
        assert!(nll_value(&y, &s, &s, 0.1).is_err());
    }
}
