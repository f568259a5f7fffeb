//! Encoder, message-passing processor and variational decoder.
//!
//! The encoder and processor are deterministic; only the decoder carries a
//! weight posterior. For `k = 1..m` the processor applies
//!
//! ```text
//! e_ij ← e_ij + φ_e(v_i, v_j, e_ij)
//! m_i   = Σ_{j ∈ N(i)} e_ij
//! v_i  ← v_i + φ_v(v_i, m_i)
//! ```
//!
//! with one set of `φ_e`, `φ_v` weights shared by all passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{edge_feature_width, node_feature_width, Graph};
use crate::nn::{Activation, DenseParams, MlpBlock};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{softplus, Tape, Var};
use crate::tensor::Tensor;
use crate::variational::{
    sample_with_noise, LayerNoise, PriorMode, PriorParams, PriorVars, VariationalDense, WeightSample,
};

/// Lower bound added to every predicted standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Which standard deviations enter the likelihood.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseModel {
    /// `σ² = σ_head² + σ_noise²`.
    #[default]
    Quadrature,
    /// Per-node head only.
    HeadOnly,
    /// Global learnable noise only.
    GlobalOnly,
}

impl std::str::FromStr for NoiseModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadrature" => Ok(NoiseModel::Quadrature),
            "head-only" => Ok(NoiseModel::HeadOnly),
            "global-only" => Ok(NoiseModel::GlobalOnly),
            other => Err(Error::InvalidArgument(format!("unknown noise model {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Spatial dimension `d` of the mesh.
    pub dim: usize,
    pub latent_dim: usize,
    pub message_passes: usize,
    /// Target width `t`.
    pub out_dim: usize,
    /// Dense layers per encoder/processor MLP.
    pub mlp_layers: usize,
    /// Variational trunk layers before the two heads.
    pub decoder_depth: usize,
    pub decoder_width: usize,
    pub prior_mode: PriorMode,
    pub noise_model: NoiseModel,
    pub prior_pi: f64,
    pub prior_sigma1: f64,
    pub prior_sigma2: f64,
    pub rho_init: f64,
    /// Initial global noise standard deviation, in target units.
    pub noise_init: f64,
    /// Fixed factor applied to the decoder's mean and standard deviation.
    pub output_scale: f64,
}

impl ModelConfig {
    pub fn node_in(&self) -> usize {
        node_feature_width(self.dim)
    }

    pub fn edge_in(&self) -> usize {
        edge_feature_width(self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.dim != 2 && self.dim != 3 {
            return bad("dim must be 2 or 3");
        }
        if self.latent_dim == 0 || self.message_passes == 0 || self.out_dim == 0 {
            return bad("latent_dim, message_passes and out_dim must be >= 1");
        }
        if self.mlp_layers == 0 || self.decoder_width == 0 {
            return bad("mlp_layers and decoder_width must be >= 1");
        }
        if !(self.output_scale > 0.0) || !(self.noise_init > 0.0) {
            return bad("output_scale and noise_init must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Architecture {
    enc_node: MlpBlock,
    enc_edge: MlpBlock,
    phi_e: MlpBlock,
    phi_v: MlpBlock,
    trunk: Vec<VariationalDense>,
    head_mu: VariationalDense,
    head_sigma: VariationalDense,
    noise_raw: ParamId,
    prior: PriorParams,
}

/// Configuration, parameters and layer layout of a model.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore,
    arch: Architecture,
}

/// Result of one stochastic forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    pub mu: Var,
    pub sigma: Var,
    /// Processed node embeddings fed to the decoder.
    pub latent: Var,
    pub sample: WeightSample,
}

fn inverse_softplus(y: f64) -> f64 {
    // log(e^y − 1), stable for large y
    y + (-(-y).exp()).ln_1p()
}

impl ModelState {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.latent_dim;
        let mlp = |input: usize| {
            let mut w = vec![input];
            w.extend(std::iter::repeat_n(h, config.mlp_layers));
            w
        };
        let enc_node = MlpBlock::init(&mut store, "enc_node", &mlp(config.node_in()), Activation::Swish, &mut rng);
        let enc_edge = MlpBlock::init(&mut store, "enc_edge", &mlp(config.edge_in()), Activation::Swish, &mut rng);
        let phi_e = MlpBlock::init(&mut store, "phi_e", &mlp(3 * h), Activation::Identity, &mut rng);
        let phi_v = MlpBlock::init(&mut store, "phi_v", &mlp(2 * h), Activation::Identity, &mut rng);

        let mut trunk = Vec::with_capacity(config.decoder_depth);
        let mut width = h;
        for l in 0..config.decoder_depth {
            trunk.push(VariationalDense::init(
                &mut store,
                &format!("dec.{l}"),
                width,
                config.decoder_width,
                config.rho_init,
                &mut rng,
            ));
            width = config.decoder_width;
        }
        let head_mu = VariationalDense::init(&mut store, "dec.mu", width, config.out_dim, config.rho_init, &mut rng);
        let head_sigma =
            VariationalDense::init(&mut store, "dec.sigma", width, config.out_dim, config.rho_init, &mut rng);
        let noise_raw = store.add(
            "noise_raw",
            Tensor::scalar(inverse_softplus(config.noise_init / config.output_scale)),
        );
        let prior = PriorParams::init(&mut store, config.prior_pi, config.prior_sigma1, config.prior_sigma2)?;
        Ok(ModelState {
            config,
            params: store,
            arch: Architecture {
                enc_node,
                enc_edge,
                phi_e,
                phi_v,
                trunk,
                head_mu,
                head_sigma,
                noise_raw,
                prior,
            },
        })
    }

    pub fn n_parameters(&self) -> usize {
        self.params.n_scalars()
    }

    pub fn decoder_layers(&self) -> Vec<&VariationalDense> {
        let a = &self.arch;
        a.trunk.iter().chain([&a.head_mu, &a.head_sigma]).collect()
    }

    pub fn prior(&self) -> &PriorParams {
        &self.arch.prior
    }

    pub fn mlp_blocks(&self) -> [&MlpBlock; 4] {
        let a = &self.arch;
        [&a.enc_node, &a.enc_edge, &a.phi_e, &a.phi_v]
    }

    pub fn draw_decoder_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<LayerNoise> {
        self.decoder_layers().iter().map(|l| l.draw_noise(rng)).collect()
    }

    /// Noise that reproduces the posterior means.
    pub fn zero_decoder_noise(&self) -> Vec<LayerNoise> {
        self.decoder_layers()
            .iter()
            .map(|l| LayerNoise::zeros(l.fan_out, l.fan_in))
            .collect()
    }

    /// Current global noise standard deviation.
    pub fn noise_sigma_value(&self) -> f64 {
        self.config.output_scale * softplus(self.params.get(self.arch.noise_raw).item())
    }

    pub fn noise_sigma(&self, tape: &mut Tape, bound: &Bound) -> Var {
        let sp = tape.softplus(bound.var(self.arch.noise_raw));
        tape.scale(sp, self.config.output_scale)
    }

    pub fn prior_vars(&self, tape: &mut Tape, bound: &Bound) -> PriorVars {
        self.arch.prior.bind(tape, bound)
    }

    pub fn check_graph(&self, graph: &Graph) -> Result<()> {
        let (nw, ew) = (graph.node_features.cols(), graph.edge_features.cols());
        if nw != self.config.node_in() || ew != self.config.edge_in() {
            return Err(Error::shape(
                "graph feature widths (node, edge)",
                &[nw, ew],
                &[self.config.node_in(), self.config.edge_in()],
            ));
        }
        Ok(())
    }

    /// Node and edge embeddings from independent MLPs.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, graph: &Graph) -> Result<(Var, Var)> {
        self.check_graph(graph)?;
        let x = tape.constant(graph.node_features.clone());
        let a = tape.constant(graph.edge_features.clone());
        self.encode_features(tape, bound, x, a)
    }

    /// Encodes feature matrices already recorded on the tape.
    pub fn encode_features(&self, tape: &mut Tape, bound: &Bound, x: Var, a: Var) -> Result<(Var, Var)> {
        let v = self.arch.enc_node.forward(tape, bound, x)?;
        let e = self.arch.enc_edge.forward(tape, bound, a)?;
        Ok((v, e))
    }

    /// `φ_e(v_dst, v_src, e)` with the first layer split by input block so
    /// node projections are computed once per node instead of once per edge.
    fn edge_update(&self, tape: &mut Tape, bound: &Bound, graph: &Graph, v: Var, e: Var) -> Result<Var> {
        let h = self.config.latent_dim;
        let block = &self.arch.phi_e;
        let first: &DenseParams = &block.layers[0];
        let w = bound.var(first.w);
        let w_dst = tape.slice_cols(w, 0, h)?;
        let w_src = tape.slice_cols(w, h, h)?;
        let w_edge = tape.slice_cols(w, 2 * h, h)?;
        let p_dst = tape.linear(v, w_dst, None)?;
        let p_src = tape.linear(v, w_src, None)?;
        let g_dst = tape.gather_rows(p_dst, graph.dst().clone())?;
        let g_src = tape.gather_rows(p_src, graph.src().clone())?;
        let p_edge = tape.linear(e, w_edge, Some(bound.var(first.b)))?;
        let s = tape.add(g_dst, g_src)?;
        let mut out = tape.add(s, p_edge)?;
        if block.activations[0] == Activation::Swish {
            out = tape.swish(out);
        }
        for (layer, act) in block.layers.iter().zip(&block.activations).skip(1) {
            out = layer.forward(tape, bound, out)?;
            if *act == Activation::Swish {
                out = tape.swish(out);
            }
        }
        Ok(out)
    }

    /// `m` residual message-passing steps.
    pub fn process(&self, tape: &mut Tape, bound: &Bound, graph: &Graph, v: Var, e: Var) -> Result<(Var, Var)> {
        let (mut v, mut e) = (v, e);
        for _ in 0..self.config.message_passes {
            let de = self.edge_update(tape, bound, graph, v, e)?;
            e = tape.add(e, de)?;
            let m = tape.scatter_add_rows(e, graph.dst().clone(), graph.n_nodes())?;
            let vm = tape.concat_cols(&[v, m])?;
            let dv = self.arch.phi_v.forward(tape, bound, vm)?;
            v = tape.add(v, dv)?;
        }
        Ok((v, e))
    }

    pub fn sample_decoder(&self, tape: &mut Tape, bound: &Bound, noise: Vec<LayerNoise>) -> Result<WeightSample> {
        sample_with_noise(&self.decoder_layers(), tape, bound, noise)
    }

    /// Mean and standard deviation heads for a given weight sample.
    pub fn decode(&self, tape: &mut Tape, latent: Var, ws: &WeightSample) -> Result<(Var, Var)> {
        let n_trunk = self.arch.trunk.len();
        if ws.layers.len() != n_trunk + 2 {
            return Err(Error::shape("decoder sample", &[ws.layers.len()], &[n_trunk + 2]));
        }
        let mut h = latent;
        for l in &ws.layers[..n_trunk] {
            h = tape.linear(h, l.w, Some(l.b))?;
            h = tape.swish(h);
        }
        let (lm, ls) = (&ws.layers[n_trunk], &ws.layers[n_trunk + 1]);
        let scale = self.config.output_scale;
        let mu_raw = tape.linear(h, lm.w, Some(lm.b))?;
        let mu = tape.scale(mu_raw, scale);
        let s_raw = tape.linear(h, ls.w, Some(ls.b))?;
        let sp = tape.softplus(s_raw);
        let s = tape.scale(sp, scale);
        let sigma = tape.add_const(s, SIGMA_FLOOR);
        Ok((mu, sigma))
    }

    /// Latent node embeddings after encoding and processing.
    pub fn latent(&self, tape: &mut Tape, bound: &Bound, graph: &Graph) -> Result<Var> {
        let (v, e) = self.encode(tape, bound, graph)?;
        Ok(self.process(tape, bound, graph, v, e)?.0)
    }

    pub fn forward_with_noise(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        graph: &Graph,
        noise: Vec<LayerNoise>,
    ) -> Result<ForwardOutput> {
        let latent = self.latent(tape, bound, graph)?;
        let sample = self.sample_decoder(tape, bound, noise)?;
        let (mu, sigma) = self.decode(tape, latent, &sample)?;
        Ok(ForwardOutput {
            mu,
            sigma,
            latent,
            sample,
        })
    }

    /// Encoder, processor and decoder with one fresh weight sample.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        graph: &Graph,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let noise = self.draw_decoder_noise(rng);
        self.forward_with_noise(tape, bound, graph, noise)
    }

    /// Values of `(μ, σ)` for pinned decoder noise.
    pub fn predict_with_noise(&self, graph: &Graph, noise: Vec<LayerNoise>) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let out = self.forward_with_noise(&mut tape, &bound, graph, noise)?;
        Ok((tape.value(out.mu).clone(), tape.value(out.sigma).clone()))
    }

    /// Prediction with every decoder weight at its posterior mean.
    pub fn predict_mean_weights(&self, graph: &Graph) -> Result<(Tensor, Tensor)> {
        self.predict_with_noise(graph, self.zero_decoder_noise())
    }
}
