//! Posterior-predictive sampling and error/calibration metrics.
//!
//! For `S` decoder weight samples the per-node mean is the average of the
//! sampled means, the epistemic variance their unbiased sample variance,
//! and the aleatoric variance the average predicted variance plus the
//! global noise variance. Bounds are `mean ± z·s_t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, Graph};
use crate::mesh::Dataset;
use crate::model::{ModelState, NoiseModel};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLES: usize = 200;
pub const DEFAULT_Z: f64 = 2.0;

/// Per-node predictive summary, every tensor `n × t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveField {
    pub mean: Tensor,
    pub s_aleatoric: Tensor,
    pub s_epistemic: Tensor,
    pub s_total: Tensor,
    pub lower: Tensor,
    pub upper: Tensor,
    pub z: f64,
}

impl PredictiveField {
    /// Assembles a field from the three standard deviations' ingredients.
    pub fn from_moments(mean: Tensor, var_aleatoric: Tensor, var_epistemic: Tensor, z: f64) -> Result<Self> {
        if mean.shape() != var_aleatoric.shape() || mean.shape() != var_epistemic.shape() {
            return Err(Error::shape("predictive moments", mean.shape(), var_aleatoric.shape()));
        }
        let s_t = Tensor::new(
            mean.shape().to_vec(),
            var_aleatoric
                .data()
                .iter()
                .zip(var_epistemic.data())
                .map(|(a, e)| (a + e).sqrt())
                .collect(),
        )?;
        let mut field = PredictiveField {
            s_aleatoric: var_aleatoric.map(f64::sqrt),
            s_epistemic: var_epistemic.map(f64::sqrt),
            lower: mean.clone(),
            upper: mean.clone(),
            mean,
            s_total: s_t,
            z,
        };
        field.set_z(z);
        Ok(field)
    }

    /// Recomputes the bounds for another `z`.
    pub fn set_z(&mut self, z: f64) {
        self.z = z;
        let lo = self.lower.data_mut();
        let hi = self.upper.data_mut();
        for (k, (&m, &s)) in self.mean.data().iter().zip(self.s_total.data()).enumerate() {
            lo[k] = m - z * s;
            hi[k] = m + z * s;
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.mean.rows()
    }

    pub fn width(&self) -> usize {
        self.mean.cols()
    }
}

/// Draws `samples` decoder weight sets for one graph.
pub fn predict<R: Rng + ?Sized>(
    state: &ModelState,
    graph: &Graph,
    samples: usize,
    z: f64,
    rng: &mut R,
) -> Result<PredictiveField> {
    if samples < 2 {
        return Err(Error::InvalidArgument(format!("predictive sampling needs S >= 2, got {samples}")));
    }
    let latent = {
        let mut tape = Tape::new();
        let bound = state.params.bind(&mut tape, false);
        let v = state.latent(&mut tape, &bound, graph)?;
        tape.value(v).clone()
    };
    let shape = vec![graph.n_nodes(), state.config.out_dim];
    let len = shape[0] * shape[1];
    let mut mus: Vec<Vec<f64>> = Vec::with_capacity(samples);
    let mut var_head = vec![0.0; len];
    for _ in 0..samples {
        let noise = state.draw_decoder_noise(rng);
        let mut tape = Tape::new();
        let bound = state.params.bind(&mut tape, false);
        let lv = tape.constant(latent.clone());
        let ws = state.sample_decoder(&mut tape, &bound, noise)?;
        let (mu, sigma) = state.decode(&mut tape, lv, &ws)?;
        for (acc, s) in var_head.iter_mut().zip(tape.value(sigma).data()) {
            *acc += s * s;
        }
        mus.push(tape.value(mu).data().to_vec());
    }
    let s = samples as f64;
    let mut mean = vec![0.0; len];
    for m in &mus {
        for (a, v) in mean.iter_mut().zip(m) {
            *a += v;
        }
    }
    for a in &mut mean {
        *a /= s;
    }
    let mut var_e = vec![0.0; len];
    for m in &mus {
        for ((a, v), c) in var_e.iter_mut().zip(m).zip(&mean) {
            *a += (v - c) * (v - c);
        }
    }
    for a in &mut var_e {
        *a /= s - 1.0;
    }
    let noise2 = state.noise_sigma_value().powi(2);
    let var_a: Vec<f64> = var_head
        .iter()
        .map(|h| match state.config.noise_model {
            NoiseModel::Quadrature => h / s + noise2,
            NoiseModel::HeadOnly => h / s,
            NoiseModel::GlobalOnly => noise2,
        })
        .collect();
    PredictiveField::from_moments(
        Tensor::new(shape.clone(), mean)?,
        Tensor::new(shape.clone(), var_a)?,
        Tensor::new(shape, var_e)?,
        z,
    )
}

/// `‖pred − truth‖ / ‖truth‖` over all entries.
pub fn rrmse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("rrmse", pred.shape(), truth.shape()));
    }
    let tn = truth.norm();
    if !(tn > 0.0) {
        return Err(Error::InvalidArgument("rrmse undefined for a zero truth".into()));
    }
    let diff: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(diff.sqrt() / tn)
}

/// Fraction of entries with the truth inside `mean ± z·s_t`.
pub fn coverage(fields: &[PredictiveField], truths: &[Tensor], z: f64) -> Result<f64> {
    if fields.len() != truths.len() {
        return Err(Error::shape("coverage", &[fields.len()], &[truths.len()]));
    }
    let (mut inside, mut total) = (0usize, 0usize);
    for (f, t) in fields.iter().zip(truths) {
        if f.mean.shape() != t.shape() {
            return Err(Error::shape("coverage field", f.mean.shape(), t.shape()));
        }
        for ((&m, &s), &y) in f.mean.data().iter().zip(f.s_total.data()).zip(t.data()) {
            total += 1;
            if y >= m - z * s && y <= m + z * s {
                inside += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { inside as f64 / total as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rrmse: Vec<f64>,
    pub mean_rrmse: f64,
    pub median_rrmse: f64,
    pub coverage: f64,
    pub z: f64,
    pub samples: usize,
}

impl MetricReport {
    pub fn new(rrmse: Vec<f64>, coverage: f64, z: f64, samples: usize) -> Self {
        let mean = rrmse.iter().sum::<f64>() / rrmse.len().max(1) as f64;
        let mut sorted = rrmse.clone();
        sorted.sort_by(f64::total_cmp);
        let median = match sorted.len() {
            0 => 0.0,
            k if k % 2 == 1 => sorted[k / 2],
            k => 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]),
        };
        MetricReport {
            rrmse,
            mean_rrmse: mean,
            median_rrmse: median,
            coverage,
            z,
            samples,
        }
    }
}

/// Predicts every simulation of `dataset`; simulation `i` samples with seed `seed ^ i`.
pub fn evaluate(
    state: &ModelState,
    dataset: &Dataset,
    samples: usize,
    z: f64,
    seed: u64,
) -> Result<(Vec<PredictiveField>, MetricReport)> {
    let base = build_graph(&dataset.mesh);
    let mut fields = Vec::with_capacity(dataset.len());
    let mut errors = Vec::with_capacity(dataset.len());
    for (i, sim) in dataset.simulations.iter().enumerate() {
        let mut g = base.clone();
        g.set_displacement(&sim.u)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
        let f = predict(state, &g, samples, z, &mut rng)?;
        if f.mean.shape() != sim.y.shape() {
            return Err(Error::shape("prediction vs target", f.mean.shape(), sim.y.shape()));
        }
        errors.push(rrmse(&f.mean, &sim.y)?);
        fields.push(f);
    }
    let truths: Vec<Tensor> = dataset.simulations.iter().map(|s| s.y.clone()).collect();
    let cov = coverage(&fields, &truths, z)?;
    Ok((fields, MetricReport::new(errors, cov, z, samples)))
}
