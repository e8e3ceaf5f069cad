//! Strided convolutional front end: `[B, 2, T]` frames to `[B, l_seq, d_h]` tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const EMBEDDER_GROUP: &str = "embedder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kernel_size: usize,
    pub layer_count: usize,
    pub stride: usize,
    /// Width of every intermediate layer; the last layer emits `d_h`.
    pub hidden_channels: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            kernel_size: 5,
            layer_count: 2,
            stride: 2,
            hidden_channels: 64,
        }
    }
}

impl EmbedderConfig {
    pub const IN_CHANNELS: usize = 2;

    pub fn padding(&self) -> usize {
        self.kernel_size / 2
    }

    /// Output sequence length for an input of `frame_length` samples.
    pub fn seq_len(&self, frame_length: usize) -> usize {
        let (k, s, p) = (self.kernel_size, self.stride, self.padding());
        (0..self.layer_count).fold(frame_length, |t, _| {
            if t + 2 * p < k {
                0
            } else {
                (t + 2 * p - k) / s + 1
            }
        })
    }

    /// `(c_in, c_out)` for each layer.
    pub fn channel_plan(&self, d_h: usize) -> Vec<(usize, usize)> {
        (0..self.layer_count)
            .map(|i| {
                let cin = if i == 0 { Self::IN_CHANNELS } else { self.hidden_channels };
                let cout = if i + 1 == self.layer_count { d_h } else { self.hidden_channels };
                (cin, cout)
            })
            .collect()
    }

    /// Number of input samples one output token can see.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for _ in 0..self.layer_count {
            rf += (self.kernel_size - 1) * jump;
            jump *= self.stride;
        }
        rf
    }

    pub fn parameter_count(&self, d_h: usize) -> usize {
        self.channel_plan(d_h)
            .iter()
            .map(|&(cin, cout)| cout * cin * self.kernel_size + cout)
            .sum()
    }

    pub fn validate(&self, frame_length: usize, d_h: usize) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("embedder kernel size must be odd, got {}", self.kernel_size)));
        }
        if self.layer_count == 0 || self.stride == 0 || d_h == 0 {
            return Err(Error::Config("embedder needs at least one layer, stride ≥ 1 and d_h ≥ 1".into()));
        }
        if self.layer_count > 1 && self.hidden_channels == 0 {
            return Err(Error::Config("embedder hidden_channels must be positive".into()));
        }
        if self.seq_len(frame_length) == 0 {
            return Err(Error::Config(format!("embedder reduces a {frame_length}-sample frame to nothing")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Embedder {
    pub config: EmbedderConfig,
    layers: Vec<(ParamId, ParamId)>,
}

impl Embedder {
    /// Registers fan-in-scaled Gaussian weights and zero biases.
    pub fn init<T: Scalar>(
        config: &EmbedderConfig,
        d_h: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k = config.kernel_size;
        let mut layers = Vec::new();
        for (i, (cin, cout)) in config.channel_plan(d_h).into_iter().enumerate() {
            let std = (1.0 / (cin * k) as f64).sqrt();
            let w = store.add(&format!("embedder.conv{i}.weight"), EMBEDDER_GROUP, Tensor::randn(&[cout, cin, k], std, rng))?;
            let b = store.add(&format!("embedder.conv{i}.bias"), EMBEDDER_GROUP, Tensor::zeros(&[cout]))?;
            layers.push((w, b));
        }
        Ok(Embedder {
            config: config.clone(),
            layers,
        })
    }

    /// Re-binds to parameters already present in `store`.
    pub fn bind<T: Scalar>(config: &EmbedderConfig, store: &ParamStore<T>) -> Result<Self> {
        let layers = (0..config.layer_count)
            .map(|i| {
                Ok((
                    lookup(store, &format!("embedder.conv{i}.weight"))?,
                    lookup(store, &format!("embedder.conv{i}.bias"))?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Embedder {
            config: config.clone(),
            layers,
        })
    }

    /// `x: [B, 2, T]` to tokens `[B, l_seq, d_h]`, GELU between layers.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 3 || s[1] != EmbedderConfig::IN_CHANNELS {
            return Err(Error::Shape(format!("embedder expects [B, 2, T] input, got {s:?}")));
        }
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.gelu(h);
            }
            let (wv, bv) = (tape.param(store, w), tape.param(store, b));
            h = tape.conv1d(h, wv, Some(bv), self.config.stride, self.config.padding())?;
        }
        tape.transpose_last2(h)
    }
}

pub(crate) fn lookup<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Config(format!("parameter `{name}` missing from store")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(d_h: usize) -> (ParamStore<f64>, Embedder) {
        let mut store = ParamStore::new();
        store.add_group(EMBEDDER_GROUP, true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Embedder::init(&EmbedderConfig::default(), d_h, &mut store, &mut rng).unwrap();
        (store, e)
    }

    fn run(store: &ParamStore<f64>, e: &Embedder, x: Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = e.forward(&mut tape, store, xv).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn geometry_of_default_config() {
        let c = EmbedderConfig::default();
        assert_eq!(c.seq_len(256), 64);
        assert_eq!(c.receptive_field(), 13);
        assert_eq!(c.channel_plan(32), vec![(2, 64), (64, 32)]);
        assert_eq!(c.parameter_count(32), 64 * 2 * 5 + 64 + 32 * 64 * 5 + 32);
        assert!(EmbedderConfig { kernel_size: 4, ..c.clone() }.validate(256, 32).is_err());
    }

    #[test]
    fn output_shape_and_zero_input() {
        let (mut store, e) = build(16);
        let out = run(&store, &e, Tensor::randn(&[3, 2, 256], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        assert_eq!(out.shape(), &[3, 64, 16]);
        // biases are zero at init, so zero in gives zero out
        let zero = run(&store, &e, Tensor::zeros(&[1, 2, 256]));
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let b = store.id("embedder.conv1.bias").unwrap();
        store.get_mut(b).value.data_mut()[0] = 0.5;
        let shifted = run(&store, &e, Tensor::zeros(&[1, 2, 256]));
        assert!(shifted.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn perturbation_stays_inside_receptive_field() {
        let (store, e) = build(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[1, 2, 256], 1.0, &mut rng);
        let base = run(&store, &e, x.clone());
        let rf = EmbedderConfig::default().receptive_field() as isize;
        for &t in &[0usize, 1, 57, 128, 255] {
            let mut y = x.clone();
            y.data_mut()[256 + t] += 1.0;
            let out = run(&store, &e, y);
            for tok in 0..64 {
                // token `tok` covers input samples [4·tok − 6, 4·tok + 6]
                let lo = 4 * tok as isize - rf / 2;
                let hi = 4 * tok as isize + rf / 2;
                let changed = (0..8).any(|c| out.data()[tok * 8 + c] != base.data()[tok * 8 + c]);
                if changed {
                    assert!((lo..=hi).contains(&(t as isize)), "token {tok} moved for sample {t}");
                }
            }
        }
    }
}
