//! Hierarchical 1-D UNet fusion of view latents.
//!
//! The `M` latents of a sample are stacked as an `M`-channel signal of length
//! `d_ψ`, scaled by a learnable per-view weight, projected to `C_0` channels
//! and passed through a `U`-stage encoder (residual conv block + max pool,
//! keeping skips), a bottleneck block and a `U`-stage decoder (transposed
//! conv, concatenation with the matching skip, residual conv block). The
//! decoder output is added to the initial projection, mapped back to `M`
//! channels and flattened to `M·d_ψ`.
//!
//! Channel plan for stage `u`: encoder blocks map `2^u·C_0 → 2^(u+1)·C_0`;
//! decoder step `u` up-samples to `2^(U-u-1)·C_0` channels, concatenates the
//! `2^(U-u)·C_0`-channel skip and maps back to `2^(U-u-1)·C_0`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv1d, ConvTranspose1d, Forward, Linear, ParamId, ParamStore, LINEAR_GAIN, RELU_GAIN};
use crate::tensor::{Tensor, TensorError, Var};

/// Output nonlinearity of the channel-attention MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    #[default]
    Sigmoid,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub views: usize,
    pub latent_dim: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub reduction: usize,
    pub gate: GateKind,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.base_channels == 0 || self.depth == 0 {
            return Err(Error::Config(
                "fusion needs at least one view, one base channel and depth >= 1".into(),
            ));
        }
        let factor = 1usize << self.depth;
        if self.latent_dim == 0 || self.latent_dim % factor != 0 {
            return Err(Error::Config(format!(
                "latent width {} must be a positive multiple of 2^depth = {factor}",
                self.latent_dim
            )));
        }
        if self.reduction == 0 {
            return Err(Error::Config("channel attention reduction must be >= 1".into()));
        }
        Ok(())
    }

    /// Encoder channels `C_u = 2^u·C_0`.
    pub fn enc_channels(&self, u: usize) -> usize {
        self.base_channels << u
    }

    /// Encoder lengths `L_u = d_ψ / 2^u`.
    pub fn enc_len(&self, u: usize) -> usize {
        self.latent_dim >> u
    }

    /// Decoder channels `C'_u = 2^(U-u)·C_0`.
    pub fn dec_channels(&self, u: usize) -> usize {
        self.base_channels << (self.depth - u)
    }

    /// Decoder lengths `L'_u = d_ψ / 2^(U-u)`.
    pub fn dec_len(&self, u: usize) -> usize {
        self.latent_dim >> (self.depth - u)
    }

    /// Concatenated decoder input channels `C''_u = 2^(U-u)·C_0 + 2^(U-u+1)·C_0`.
    pub fn concat_channels(&self, u: usize) -> usize {
        (self.base_channels << (self.depth - u)) + (self.base_channels << (self.depth - u + 1))
    }
}

/// Squeeze-style gate: channel means → MLP → per-channel scale.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub channels: usize,
    pub hidden: Linear,
    pub out: Linear,
    pub gate: GateKind,
}

pub const MIN_ATTENTION_HIDDEN: usize = 4;

impl ChannelAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        reduction: usize,
        gate: GateKind,
    ) -> Self {
        let hidden_width = (channels / reduction).max(MIN_ATTENTION_HIDDEN);
        ChannelAttention {
            channels,
            hidden: Linear::new(store, rng, &format!("{name}.fc1"), channels, hidden_width, RELU_GAIN),
            out: Linear::new(store, rng, &format!("{name}.fc2"), hidden_width, channels, LINEAR_GAIN),
            gate,
        }
    }

    /// Per-channel scaling vector for `q` (`[B,C]`, or `[1,C]` for a single `[C,L]` input).
    pub fn scaling(&self, f: &mut Forward, q: Var) -> Result<Var, TensorError> {
        let rank = f.tape.shape(q).len();
        let pooled = f.tape.mean_axis(q, rank - 1)?;
        let pooled = if rank == 2 {
            f.tape.reshape(pooled, &[1, self.channels])?
        } else {
            pooled
        };
        let h = self.hidden.forward(f, pooled)?;
        let h = f.tape.relu(h);
        let s = self.out.forward(f, h)?;
        Ok(match self.gate {
            GateKind::Sigmoid => f.tape.sigmoid(s),
            GateKind::Linear => s,
        })
    }

    /// `q ⊙ mlp(mean_L(q))`, broadcast over the length axis.
    pub fn forward(&self, f: &mut Forward, q: Var) -> Result<Var, TensorError> {
        let s = self.scaling(f, q)?;
        f.tape.channel_scale(q, s)
    }
}

/// `CAN(conv(conv(o))) + conv₁ₓ₁(o)`; length preserving.
#[derive(Debug, Clone)]
pub struct RcBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub conv_a: Conv1d,
    pub conv_b: Conv1d,
    pub attention: ChannelAttention,
    pub shortcut: Conv1d,
}

impl RcBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        reduction: usize,
        gate: GateKind,
    ) -> Self {
        RcBlock {
            in_channels,
            out_channels,
            conv_a: Conv1d::new(store, rng, &format!("{name}.conv_a"), in_channels, out_channels, 3, 1, 1),
            conv_b: Conv1d::new(store, rng, &format!("{name}.conv_b"), out_channels, out_channels, 3, 1, 1),
            attention: ChannelAttention::new(store, rng, &format!("{name}.can"), out_channels, reduction, gate),
            shortcut: Conv1d::new(store, rng, &format!("{name}.shortcut"), in_channels, out_channels, 1, 1, 0),
        }
    }

    pub fn forward(&self, f: &mut Forward, o: Var) -> Result<Var, TensorError> {
        let shape = f.tape.shape(o);
        let channels = shape[shape.len() - 2];
        if channels != self.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "rcblock",
                left: shape.to_vec(),
                right: vec![self.in_channels, shape[shape.len() - 1]],
            });
        }
        let a = self.conv_a.forward(f, o)?;
        let b = self.conv_b.forward(f, a)?;
        let main = self.attention.forward(f, b)?;
        let skip = self.shortcut.forward(f, o)?;
        f.tape.add(main, skip)
    }
}

/// One recorded stage of a forward pass: per-sample `channels × len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageShape {
    pub stage: String,
    pub channels: usize,
    pub len: usize,
}

/// Per-stage shapes of a forward pass, printable as a text dump.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShapeTrace {
    pub stages: Vec<StageShape>,
}

impl ShapeTrace {
    fn record(&mut self, stage: impl Into<String>, shape: &[usize]) {
        let (channels, len) = match *shape {
            [_, c, l] => (c, l),
            [_, w] => (1, w),
            _ => (0, 0),
        };
        self.stages.push(StageShape {
            stage: stage.into(),
            channels,
            len,
        });
    }

    pub fn get(&self, stage: &str) -> Option<&StageShape> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

impl fmt::Display for ShapeTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.stages {
            writeln!(f, "{} {}x{}", s.stage, s.channels, s.len)?;
        }
        Ok(())
    }
}

/// Optional intervention used by tests to ablate one skip connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipOverride {
    /// 1-based encoder stage whose stored skip is replaced by zeros.
    pub zero_stage: usize,
}

/// The fusion UNet.
#[derive(Debug, Clone)]
pub struct FusionNet {
    pub config: FusionConfig,
    pub view_weights: ParamId,
    pub initial: Conv1d,
    pub encoders: Vec<RcBlock>,
    pub bottleneck: RcBlock,
    pub up_convs: Vec<ConvTranspose1d>,
    pub decoders: Vec<RcBlock>,
    pub final_proj: Conv1d,
}

impl FusionNet {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let (r, g) = (config.reduction, config.gate);
        let depth = config.depth;
        let view_weights = store.add("fusion.view_weights", Tensor::ones(vec![config.views]));
        let initial = Conv1d::new(store, rng, "fusion.initial", config.views, config.base_channels, 1, 1, 0);
        let encoders = (0..depth)
            .map(|u| {
                RcBlock::new(
                    store,
                    rng,
                    &format!("fusion.enc{u}"),
                    config.enc_channels(u),
                    config.enc_channels(u + 1),
                    r,
                    g,
                )
            })
            .collect();
        let cb = config.enc_channels(depth);
        let bottleneck = RcBlock::new(store, rng, "fusion.bottleneck", cb, cb, r, g);
        let mut up_convs = Vec::with_capacity(depth);
        let mut decoders = Vec::with_capacity(depth);
        for u in 0..depth {
            let (c_in, c_out) = (config.dec_channels(u), config.dec_channels(u + 1));
            up_convs.push(ConvTranspose1d::new(
                store,
                rng,
                &format!("fusion.up{u}"),
                c_in,
                c_out,
                2,
                2,
            ));
            decoders.push(RcBlock::new(
                store,
                rng,
                &format!("fusion.dec{u}"),
                config.concat_channels(u + 1),
                c_out,
                r,
                g,
            ));
        }
        let final_proj = Conv1d::new(store, rng, "fusion.final", config.base_channels, config.views, 1, 1, 0);
        Ok(FusionNet {
            config,
            view_weights,
            initial,
            encoders,
            bottleneck,
            up_convs,
            decoders,
            final_proj,
        })
    }

    /// Stacks `M` latents `[b×d_ψ]` into `[b×M×d_ψ]`.
    pub fn stack(&self, f: &mut Forward, views: &[Var]) -> Result<Var, TensorError> {
        let d = self.config.latent_dim;
        if views.len() != self.config.views {
            return Err(TensorError::InvalidShape {
                op: "fusion",
                shape: vec![views.len()],
                reason: format!("expected {} views", self.config.views),
            });
        }
        let mut rows = Vec::with_capacity(views.len());
        for &v in views {
            let shape = f.tape.shape(v).to_vec();
            if shape.len() != 2 || shape[1] != d {
                return Err(TensorError::ShapeMismatch {
                    op: "fusion",
                    left: shape,
                    right: vec![0, d],
                });
            }
            rows.push(f.tape.reshape(v, &[shape[0], 1, d])?);
        }
        f.tape.concat(&rows, 1)
    }

    /// Scales view channel `m` by the learnable weight `w_m`.
    pub fn view_attention(&self, f: &mut Forward, stacked: Var) -> Result<Var, TensorError> {
        let w = f.param(self.view_weights);
        f.tape.channel_scale(stacked, w)
    }

    /// Fuses `M` latents `[b×d_ψ]` into `[b×M·d_ψ]`.
    pub fn forward(&self, f: &mut Forward, views: &[Var]) -> Result<Var, TensorError> {
        Ok(self.forward_traced(f, views, None)?.0)
    }

    pub fn forward_traced(
        &self,
        f: &mut Forward,
        views: &[Var],
        skip_override: Option<SkipOverride>,
    ) -> Result<(Var, ShapeTrace), TensorError> {
        let mut trace = ShapeTrace::default();
        let z = self.stack(f, views)?;
        let batch = f.tape.shape(z)[0];
        trace.record("stack", f.tape.shape(z));
        let za = self.view_attention(f, z)?;
        trace.record("view_attention", f.tape.shape(za));
        let z0 = self.initial.forward(f, za)?;
        trace.record("initial", f.tape.shape(z0));

        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = z0;
        for (u, block) in self.encoders.iter().enumerate() {
            let mut p = block.forward(f, h)?;
            trace.record(format!("enc{}.block", u + 1), f.tape.shape(p));
            h = f.tape.maxpool1d(p, 2)?;
            trace.record(format!("enc{}.pool", u + 1), f.tape.shape(h));
            if skip_override.is_some_and(|s| s.zero_stage == u + 1) {
                let zeros = Tensor::zeros(f.tape.shape(p).to_vec());
                p = f.input(zeros);
            }
            skips.push(p);
        }
        let mut t = self.bottleneck.forward(f, h)?;
        trace.record("bottleneck", f.tape.shape(t));

        for (u, (up, block)) in self.up_convs.iter().zip(&self.decoders).enumerate() {
            let e = up.forward(f, t)?;
            trace.record(format!("dec{}.up", u + 1), f.tape.shape(e));
            let skip = skips[self.config.depth - 1 - u];
            let xi = f.tape.concat(&[e, skip], 1)?;
            trace.record(format!("dec{}.concat", u + 1), f.tape.shape(xi));
            t = block.forward(f, xi)?;
            trace.record(format!("dec{}.block", u + 1), f.tape.shape(t));
        }
        let residual = f.tape.add(z0, t)?;
        let out = self.final_proj.forward(f, residual)?;
        trace.record("final", f.tape.shape(out));
        let flat = f
            .tape
            .reshape(out, &[batch, self.config.views * self.config.latent_dim])?;
        trace.record("flatten", f.tape.shape(flat));
        Ok((flat, trace))
    }
}

/// Plain column-wise concatenation of the view latents, `[b×M·d_ψ]`.
pub fn concat_fallback(f: &mut Forward, views: &[Var]) -> Result<Var, TensorError> {
    f.tape.concat(views, 1)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::check_param_grads;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    fn cfg(views: usize, latent_dim: usize, depth: usize, base_channels: usize) -> FusionConfig {
        FusionConfig {
            views,
            latent_dim,
            depth,
            base_channels,
            reduction: 4,
            gate: GateKind::Sigmoid,
        }
    }

    #[test]
    fn attention_of_zeros_is_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let can = ChannelAttention::new(&mut store, &mut rng, "can", 6, 4, GateKind::Sigmoid);
        let mut f = Forward::eval(&store);
        let q = f.input(Tensor::zeros(vec![6, 5]));
        let y = can.forward(&mut f, q).unwrap();
        assert_eq!(f.tape.shape(y), &[6, 5]);
        assert!(f.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_attention_passes_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let can = ChannelAttention::new(&mut store, &mut rng, "can", 4, 4, GateKind::Sigmoid);
        *store.get_mut(can.out.bias) = Tensor::full(vec![4], 60.0);
        let q = random(&[4, 7], 1);
        let mut f = Forward::eval(&store);
        let qv = f.input(q.clone());
        let y = can.forward(&mut f, qv).unwrap();
        for (a, b) in f.tape.value(y).data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_scaling_matches_scalar_loop() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let can = ChannelAttention::new(&mut store, &mut rng, "can", 8, 4, GateKind::Sigmoid);
        for t in store.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        }
        let q = random(&[8, 6], 3);
        let mut f = Forward::eval(&store);
        let qv = f.input(q.clone());
        let y = can.forward(&mut f, qv).unwrap();
        let got = f.tape.value(y).clone();

        let (w1, b1) = (store.get(can.hidden.weight), store.get(can.hidden.bias));
        let (w2, b2) = (store.get(can.out.weight), store.get(can.out.bias));
        let hidden = can.hidden.out_dim;
        let mean: Vec<f64> = (0..8).map(|c| q.data()[c * 6..(c + 1) * 6].iter().sum::<f64>() / 6.0).collect();
        let h: Vec<f64> = (0..hidden)
            .map(|j| {
                let v = b1.data()[j] + (0..8).map(|c| mean[c] * w1.data()[c * hidden + j]).sum::<f64>();
                v.max(0.0)
            })
            .collect();
        for c in 0..8 {
            let logit = b2.data()[c] + (0..hidden).map(|j| h[j] * w2.data()[j * 8 + c]).sum::<f64>();
            let s = 1.0 / (1.0 + (-logit).exp());
            for l in 0..6 {
                let want = q.data()[c * 6 + l] * s;
                assert!((got.data()[c * 6 + l] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rcblock_with_zero_main_branch_is_shortcut() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = RcBlock::new(&mut store, &mut rng, "b", 2, 4, 4, GateKind::Sigmoid);
        *store.get_mut(block.conv_b.weight) = Tensor::zeros(vec![4, 4, 3]);
        let x = random(&[2, 8], 5);
        let mut f = Forward::eval(&store);
        let xv = f.input(x);
        let y = block.forward(&mut f, xv).unwrap();
        let s = block.shortcut.forward(&mut f, xv).unwrap();
        assert_eq!(f.tape.value(y), f.tape.value(s));
    }

    #[test]
    fn rcblock_preserves_length() {
        for len in [8, 32, 512] {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let block = RcBlock::new(&mut store, &mut rng, "b", 3, 5, 4, GateKind::Sigmoid);
            let mut f = Forward::eval(&store);
            let xv = f.input(random(&[2, 3, len], 7));
            let y = block.forward(&mut f, xv).unwrap();
            assert_eq!(f.tape.shape(y), &[2, 5, len]);
        }
    }

    #[test]
    fn rcblock_gradient() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let block = RcBlock::new(&mut store, &mut rng, "b", 2, 4, 4, GateKind::Sigmoid);
        for t in store.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        }
        let x = random(&[2, 8], 9);
        let w = random(&[4, 8], 10);
        let r = check_param_grads(&store, 1e-4, |f| {
            let xv = f.input(x.clone());
            let y = block.forward(f, xv)?;
            let y = f.tape.mul_const(y, &w)?;
            Ok(f.tape.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn view_attention_examples() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = FusionNet::new(&mut store, &mut rng, cfg(2, 4, 1, 2)).unwrap();
        let z = [random(&[3, 4], 12), random(&[3, 4], 13)];
        let run = |store: &ParamStore| {
            let mut f = Forward::eval(store);
            let vars: Vec<Var> = z.iter().map(|t| f.input(t.clone())).collect();
            let s = net.stack(&mut f, &vars).unwrap();
            let a = net.view_attention(&mut f, s).unwrap();
            (f.tape.value(s).clone(), f.tape.value(a).clone())
        };
        let (stacked, scaled) = run(&store);
        assert_eq!(stacked, scaled);
        *store.get_mut(net.view_weights) = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let (stacked, scaled) = run(&store);
        for b in 0..3 {
            assert_eq!(scaled.data()[b * 8..b * 8 + 4], stacked.data()[b * 8..b * 8 + 4]);
            assert!(scaled.data()[b * 8 + 4..b * 8 + 8].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn view_weight_gradient_is_row_sum() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let net = FusionNet::new(&mut store, &mut rng, cfg(2, 4, 1, 2)).unwrap();
        let z = [random(&[1, 4], 15), random(&[1, 4], 16)];
        let mut f = Forward::deterministic(&store);
        let vars: Vec<Var> = z.iter().map(|t| f.input(t.clone())).collect();
        let s = net.stack(&mut f, &vars).unwrap();
        let a = net.view_attention(&mut f, s).unwrap();
        let loss = f.tape.sum(a);
        let grads = f.backward(loss).unwrap();
        let g = grads[net.view_weights.index()].as_ref().unwrap();
        for m in 0..2 {
            let want: f64 = z[m].data().iter().sum();
            assert!((g[m] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn default_bottleneck_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let net = FusionNet::new(&mut store, &mut rng, cfg(3, 512, 4, 32)).unwrap();
        let mut f = Forward::eval(&store);
        let vars: Vec<Var> = (0..3).map(|m| f.input(random(&[1, 512], 18 + m))).collect();
        let (out, trace) = net.forward_traced(&mut f, &vars, None).unwrap();
        let b = trace.get("bottleneck").unwrap();
        assert_eq!((b.channels, b.len), (512, 32));
        assert_eq!(f.tape.shape(out), &[1, 3 * 512]);
        assert!(trace.to_string().contains("bottleneck 512x32"));
    }

    #[test]
    fn small_decoder_concat_channels() {
        let c = cfg(2, 4, 1, 2);
        assert_eq!(c.concat_channels(1), 6);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let net = FusionNet::new(&mut store, &mut rng, c).unwrap();
        let mut f = Forward::eval(&store);
        let vars: Vec<Var> = (0..2).map(|m| f.input(random(&[2, 4], 20 + m))).collect();
        let (out, trace) = net.forward_traced(&mut f, &vars, None).unwrap();
        let cat = trace.get("dec1.concat").unwrap();
        assert_eq!((cat.channels, cat.len), (6, 4));
        assert_eq!(f.tape.shape(out), &[2, 8]);
    }

    #[test]
    fn rejects_indivisible_latent_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = FusionNet::new(&mut store, &mut rng, cfg(2, 12, 3, 2)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn concat_fallback_examples() {
        let store = ParamStore::new();
        let mut f = Forward::eval(&store);
        let a = f.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = f.input(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let c = concat_fallback(&mut f, &[a, b]).unwrap();
        assert_eq!(f.tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    fn fused(net: &FusionNet, store: &ParamStore, z: &[Tensor], skip: Option<SkipOverride>) -> Tensor {
        let mut f = Forward::eval(store);
        let vars: Vec<Var> = z.iter().map(|t| f.input(t.clone())).collect();
        let (out, _) = net.forward_traced(&mut f, &vars, skip).unwrap();
        f.tape.value(out).clone()
    }

    #[test]
    fn full_network_gradient() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = FusionNet::new(&mut store, &mut rng, cfg(2, 16, 2, 2)).unwrap();
        for t in store.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        }
        let z = [random(&[2, 16], 22), random(&[2, 16], 23)];
        let w = random(&[2, 32], 24);
        let r = check_param_grads(&store, 1e-4, |f| {
            let vars: Vec<Var> = z.iter().map(|t| f.input(t.clone())).collect();
            let y = net.forward(f, &vars)?;
            let y = f.tape.mul_const(y, &w)?;
            Ok(f.tape.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        assert_eq!(r.checked, store.num_scalars());
    }

    #[test]
    fn deepest_skip_changes_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let c = cfg(3, 16, 2, 4);
        let net = FusionNet::new(&mut store, &mut rng, c.clone()).unwrap();
        let z: Vec<Tensor> = (0..3).map(|m| random(&[2, 16], 26 + m)).collect();
        let plain = fused(&net, &store, &z, None);
        let ablated = fused(&net, &store, &z, Some(SkipOverride { zero_stage: c.depth }));
        assert_ne!(plain, ablated);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let build = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(30);
            let net = FusionNet::new(&mut store, &mut rng, cfg(2, 32, 3, 2)).unwrap();
            (net, store)
        };
        let z = [random(&[4, 32], 31), random(&[4, 32], 32)];
        let (n1, s1) = build();
        let (n2, s2) = build();
        let a = fused(&n1, &s1, &z, None);
        let b = fused(&n2, &s2, &z, None);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn linear_gate_is_unbounded() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let can = ChannelAttention::new(&mut store, &mut rng, "can", 4, 4, GateKind::Linear);
        *store.get_mut(can.out.bias) = Tensor::full(vec![4], 3.0);
        let mut f = Forward::eval(&store);
        let q = f.input(Tensor::zeros(vec![1, 4, 2]));
        let s = can.scaling(&mut f, q).unwrap();
        assert!(f.tape.value(s).data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn shape_plan_sweep() {
        for depth in 1..=4 {
            for base in [2, 4, 8] {
                for views in [2, 3, 4] {
                    for mult in [1, 4] {
                        let d = mult << depth;
                        let c = cfg(views, d, depth, base);
                        let mut store = ParamStore::new();
                        let mut rng = ChaCha8Rng::seed_from_u64(depth as u64);
                        let net = FusionNet::new(&mut store, &mut rng, c.clone()).unwrap();
                        let mut f = Forward::eval(&store);
                        let vars: Vec<Var> = (0..views).map(|_| f.input(Tensor::ones(vec![2, d]))).collect();
                        let (out, trace) = net.forward_traced(&mut f, &vars, None).unwrap();
                        assert_eq!(f.tape.shape(out), &[2, views * d]);
                        for u in 1..=depth {
                            let e = trace.get(&format!("enc{u}.block")).unwrap();
                            assert_eq!((e.channels, e.len), (base << u, d >> (u - 1)));
                            let cat = trace.get(&format!("dec{u}.concat")).unwrap();
                            let want = (base << (depth - u)) + (base << (depth - u + 1));
                            assert_eq!((cat.channels, cat.len), (want, d >> (depth - u)));
                            let blk = trace.get(&format!("dec{u}.block")).unwrap();
                            assert_eq!((blk.channels, blk.len), (base << (depth - u), d >> (depth - u)));
                        }
                        let b = trace.get("bottleneck").unwrap();
                        assert_eq!((b.channels, b.len), (base << depth, d >> depth));
                    }
                }
            }
        }
    }
}
