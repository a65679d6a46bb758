//! Per-view encoder/decoder pairs and the summed squared reconstruction loss.

use rand::Rng;

use crate::nn::{Forward, Linear, ParamStore, LINEAR_GAIN, RELU_GAIN};
use crate::tensor::{TensorError, Var};

/// MLP autoencoder for one view: `D_m → hidden… → d_ψ → …hidden → D_m`.
///
/// Hidden layers use ReLU followed by dropout; the latent and reconstruction
/// layers are affine.
#[derive(Debug, Clone)]
pub struct ViewAutoencoder {
    pub view: usize,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub dropout: f64,
    encoder: Vec<Linear>,
    decoder: Vec<Linear>,
}

impl ViewAutoencoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        view: usize,
        input_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        dropout: f64,
    ) -> Self {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(latent_dim);
        let layers = widths.len() - 1;
        let gain = |i: usize| if i + 1 < layers { RELU_GAIN } else { LINEAR_GAIN };
        let encoder = (0..layers)
            .map(|i| {
                let name = format!("view{view}.encoder.{i}");
                Linear::new(store, rng, &name, widths[i], widths[i + 1], gain(i))
            })
            .collect();
        widths.reverse();
        let decoder = (0..layers)
            .map(|i| {
                let name = format!("view{view}.decoder.{i}");
                Linear::new(store, rng, &name, widths[i], widths[i + 1], gain(i))
            })
            .collect();
        ViewAutoencoder {
            view,
            input_dim,
            latent_dim,
            dropout,
            encoder,
            decoder,
        }
    }

    pub fn encoder_layers(&self) -> &[Linear] {
        &self.encoder
    }

    pub fn decoder_layers(&self) -> &[Linear] {
        &self.decoder
    }

    fn run(&self, f: &mut Forward, layers: &[Linear], x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for (i, layer) in layers.iter().enumerate() {
            h = layer.forward(f, h)?;
            if i + 1 < layers.len() {
                h = f.tape.relu(h);
                h = f.dropout(h, self.dropout);
            }
        }
        Ok(h)
    }

    /// `[b×D_m] → [b×d_ψ]`.
    pub fn encode(&self, f: &mut Forward, x: Var) -> Result<Var, TensorError> {
        let shape = f.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                left: shape.to_vec(),
                right: vec![shape.first().copied().unwrap_or(0), self.input_dim],
            });
        }
        self.run(f, &self.encoder, x)
    }

    /// `[b×d_ψ] → [b×D_m]`.
    pub fn decode(&self, f: &mut Forward, z: Var) -> Result<Var, TensorError> {
        let shape = f.tape.shape(z);
        if shape.len() != 2 || shape[1] != self.latent_dim {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                left: shape.to_vec(),
                right: vec![shape.first().copied().unwrap_or(0), self.latent_dim],
            });
        }
        self.run(f, &self.decoder, z)
    }
}

/// Output of [`reconstruction_loss`].
pub struct Reconstruction {
    /// `Σ_m Σ_i ‖x_i^m − x̂_i^m‖²` over the batch.
    pub loss: Var,
    /// Per-view latents, reused by the fusion stage.
    pub latents: Vec<Var>,
}

/// Encodes and decodes every view of a batch and sums the squared errors.
pub fn reconstruction_loss(
    f: &mut Forward,
    inputs: &[Var],
    autoencoders: &[ViewAutoencoder],
) -> Result<Reconstruction, TensorError> {
    assert_eq!(inputs.len(), autoencoders.len(), "one input per view");
    let mut latents = Vec::with_capacity(inputs.len());
    let mut total: Option<Var> = None;
    for (&x, ae) in inputs.iter().zip(autoencoders) {
        let z = ae.encode(f, x)?;
        let x_hat = ae.decode(f, z)?;
        let diff = f.tape.sub(x, x_hat)?;
        let sq = f.tape.mul(diff, diff)?;
        let s = f.tape.sum(sq);
        total = Some(match total {
            Some(t) => f.tape.add(t, s)?,
            None => s,
        });
        latents.push(z);
    }
    Ok(Reconstruction {
        loss: total.expect("at least one view"),
        latents,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::check_param_grads;
    use crate::tensor::Tensor;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn encode_decode_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ae = ViewAutoencoder::new(&mut store, &mut rng, 0, 3, &[8, 8, 16], 32, 0.1);
        let mut f = Forward::eval(&store);
        let x = f.input(random(&[5, 3], 1));
        let z = ae.encode(&mut f, x).unwrap();
        assert_eq!(f.tape.shape(z), &[5, 32]);
        let xh = ae.decode(&mut f, z).unwrap();
        assert_eq!(f.tape.shape(xh), &[5, 3]);
        let bad = f.input(random(&[5, 4], 1));
        assert!(ae.encode(&mut f, bad).is_err());
    }

    #[test]
    fn zero_weights_give_zero_latents() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ae = ViewAutoencoder::new(&mut store, &mut rng, 0, 3, &[4], 6, 0.0);
        for t in store.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut f = Forward::eval(&store);
        let x = f.input(random(&[2, 3], 1));
        let z = ae.encode(&mut f, x).unwrap();
        assert!(f.tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_pair_reproduces_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ae = ViewAutoencoder::new(&mut store, &mut rng, 0, 4, &[], 4, 0.1);
        for layer in ae.encoder_layers().iter().chain(ae.decoder_layers()) {
            *store.get_mut(layer.weight) = Tensor::eye(4);
        }
        let x = random(&[3, 4], 2);
        let mut f = Forward::eval(&store);
        let xv = f.input(x.clone());
        let rec = reconstruction_loss(&mut f, &[xv], std::slice::from_ref(&ae)).unwrap();
        assert_eq!(f.tape.value(rec.loss).item(), 0.0);
    }

    #[test]
    fn offset_reconstruction_hand_value() {
        // x̂ = x + 1 on one 4-dim sample gives 4.0
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ae = ViewAutoencoder::new(&mut store, &mut rng, 0, 4, &[], 4, 0.0);
        for layer in ae.encoder_layers().iter().chain(ae.decoder_layers()) {
            *store.get_mut(layer.weight) = Tensor::eye(4);
        }
        *store.get_mut(ae.decoder_layers()[0].bias) = Tensor::ones(vec![4]);
        let mut f = Forward::eval(&store);
        let xv = f.input(random(&[1, 4], 3));
        let rec = reconstruction_loss(&mut f, &[xv], std::slice::from_ref(&ae)).unwrap();
        assert!((f.tape.value(rec.loss).item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_scalar_loop() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let aes: Vec<_> = [3usize, 5]
            .iter()
            .enumerate()
            .map(|(m, &d)| ViewAutoencoder::new(&mut store, &mut rng, m, d, &[6], 4, 0.0))
            .collect();
        let xs = [random(&[7, 3], 5), random(&[7, 5], 6)];
        let mut f = Forward::eval(&store);
        let vars: Vec<Var> = xs.iter().map(|x| f.input(x.clone())).collect();
        let rec = reconstruction_loss(&mut f, &vars, &aes).unwrap();
        let got = f.tape.value(rec.loss).item();

        // independent evaluation with explicit loops over the stored weights
        let dense = |x: &[f64], l: &Linear, relu: bool| -> Vec<f64> {
            let (w, b) = (store.get(l.weight), store.get(l.bias));
            (0..l.out_dim)
                .map(|o| {
                    let mut acc = b.data()[o];
                    for (i, xi) in x.iter().enumerate() {
                        acc += xi * w.data()[i * l.out_dim + o];
                    }
                    if relu {
                        acc.max(0.0)
                    } else {
                        acc
                    }
                })
                .collect()
        };
        let mut want = 0.0;
        for (ae, x) in aes.iter().zip(&xs) {
            for i in 0..7 {
                let mut h = x.row(i).to_vec();
                let layers: Vec<&Linear> =
                    ae.encoder_layers().iter().chain(ae.decoder_layers()).collect();
                for (j, l) in layers.iter().enumerate() {
                    let relu = j != 1 && j != 3;
                    h = dense(&h, l, relu);
                }
                want += h.iter().zip(x.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
        assert!((got - want).abs() < 1e-10 * want.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn reconstruction_gradient() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let aes: Vec<_> = [3usize, 2]
            .iter()
            .enumerate()
            .map(|(m, &d)| ViewAutoencoder::new(&mut store, &mut rng, m, d, &[5, 6], 4, 0.1))
            .collect();
        // zero biases put ReLU inputs exactly on the kink when a layer is dead
        for t in store.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        let xs = [random(&[4, 3], 9), random(&[4, 2], 10)];
        let r = check_param_grads(&store, 1e-4, |f| {
            let vars: Vec<Var> = xs.iter().map(|x| f.input(x.clone())).collect();
            Ok(reconstruction_loss(f, &vars, &aes)?.loss)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn views_share_no_parameters() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let aes: Vec<_> = (0..2)
            .map(|m| ViewAutoencoder::new(&mut store, &mut rng, m, 3, &[4], 5, 0.0))
            .collect();
        let x = random(&[2, 3], 11);
        let latent = |store: &ParamStore| {
            let mut f = Forward::eval(store);
            let xv = f.input(x.clone());
            let z = aes[1].encode(&mut f, xv).unwrap();
            f.tape.value(z).clone()
        };
        let before = latent(&store);
        let w = aes[0].encoder_layers()[0].weight;
        store.get_mut(w).data_mut()[0] += 1.0;
        assert_eq!(latent(&store), before);
    }
}
