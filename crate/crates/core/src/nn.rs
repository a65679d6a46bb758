//! Parameter storage, forward-pass context and the basic layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.values {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Forward<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
    track_params: bool,
    rng: Option<ChaCha8Rng>,
}

impl<'p> Forward<'p> {
    /// Training pass: parameters receive gradients and dropout draws from a
    /// generator seeded with `dropout_seed`.
    pub fn train(params: &'p ParamStore, dropout_seed: u64) -> Self {
        Forward {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            train: true,
            track_params: true,
            rng: Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
        }
    }

    /// Inference pass: no dropout, no gradient tracking.
    pub fn eval(params: &'p ParamStore) -> Self {
        Forward {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            train: false,
            track_params: false,
            rng: None,
        }
    }

    /// Deterministic pass with gradients but without dropout.
    pub fn deterministic(params: &'p ParamStore) -> Self {
        Forward {
            track_params: true,
            ..Self::eval(params)
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .tape
            .leaf(self.params.get(id).clone(), self.track_params);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        match (&mut self.rng, self.train) {
            (Some(rng), true) => self.tape.dropout(x, p, true, rng),
            _ => x,
        }
    }

    /// Runs backward from `loss` and returns gradients in store order;
    /// parameters the loss does not touch get `None`.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Option<Vec<f64>>>, TensorError> {
        self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v).map(<[f64]>::to_vec)))
            .collect())
    }
}

/// Uniform fan-in initialisation: `U(±gain·sqrt(3/fan_in))`, so the output
/// variance of a linear map is `gain²` times the input variance.
pub fn uniform_init<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
pub const LINEAR_GAIN: f64 = 1.0;

/// Affine map `x·W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(rng, vec![in_dim, out_dim], in_dim, gain),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var, TensorError> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        let y = f.tape.matmul(x, w)?;
        f.tape.add_bias(y, b)
    }
}

/// 1-D convolution layer, weights `[C_out, C_in, k]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(rng, vec![out_channels, in_channels, kernel], fan_in, LINEAR_GAIN),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels]));
        Conv1d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var, TensorError> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.tape.conv1d(x, w, b, self.stride, self.padding)
    }
}

/// Transposed 1-D convolution layer, weights `[C_in, C_out, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        // each output position sees about C_in * k / stride inputs
        let fan_in = (in_channels * kernel / stride).max(1);
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(rng, vec![in_channels, out_channels, kernel], fan_in, LINEAR_GAIN),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels]));
        ConvTranspose1d {
            weight,
            bias,
            stride,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var, TensorError> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.tape.conv_transpose1d(x, w, b, self.stride)
    }
}

/// Checks gradients of every parameter in `store` against central
/// differences of the deterministic forward pass `f`.
pub fn check_param_grads<F>(
    store: &ParamStore,
    step: f64,
    f: F,
) -> Result<crate::tensor::gradcheck::GradReport, TensorError>
where
    F: Fn(&mut Forward) -> Result<Var, TensorError>,
{
    let mut fwd = Forward::deterministic(store);
    let loss = f(&mut fwd)?;
    let analytic = fwd.backward(loss)?;
    let eval = |s: &ParamStore| -> Result<f64, TensorError> {
        let mut fwd = Forward::eval(s);
        let out = f(&mut fwd)?;
        Ok(fwd.tape.value(out).item())
    };
    let mut work = store.clone();
    let mut report = crate::tensor::gradcheck::GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for p in 0..store.len() {
        for j in 0..store.values[p].numel() {
            let orig = store.values[p].data()[j];
            work.values[p].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work.values[p].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work.values[p].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[p].as_ref().map_or(0.0, |g| g[j]);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst = (p, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
