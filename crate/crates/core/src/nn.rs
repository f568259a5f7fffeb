//! Deterministic dense layers and MLP blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Swish,
    Identity,
}

/// Glorot-uniform `out × in` matrix.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_out: usize, fan_in: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_out * fan_in)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::matrix(fan_out, fan_in, data).expect("glorot shape")
}

/// `W (out × in)` and `b (out)` living in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct DenseParams {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl DenseParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot_uniform(rng, fan_out, fan_in));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        DenseParams {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, bound.var(self.w), Some(bound.var(self.b)))
    }
}

/// Chain of dense layers, each followed by its activation.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub layers: Vec<DenseParams>,
    pub activations: Vec<Activation>,
}

impl MlpBlock {
    /// `widths = [in, h1, ..., out]`; hidden layers use Swish, the last layer `last`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        last: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| DenseParams::init(store, &format!("{name}.{l}"), widths[l], widths[l + 1], rng))
            .collect();
        let mut activations = vec![Activation::Swish; n];
        activations[n - 1] = last;
        MlpBlock {
            layers,
            activations,
        }
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let width = tape.shape(x).get(1).copied().unwrap_or(0);
        if width != self.in_width() {
            return Err(Error::shape("mlp input", tape.shape(x), &[self.in_width()]));
        }
        let mut h = x;
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            h = layer.forward(tape, bound, h)?;
            if *act == Activation::Swish {
                h = tape.swish(h);
            }
        }
        Ok(h)
    }
}

/// Evaluates `block` on `x` without recording gradients.
pub fn mlp_forward(block: &MlpBlock, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = block.forward(&mut tape, &bound, xv)?;
    Ok(tape.value(y).clone())
}
