//! Learnable two-row shapelets, sliding Euclidean matching and softmax pooling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::INIT_STD;
use crate::diffnum::{window_distances, ParamId, ParamStore, Tape, Tensor, Var};
use crate::embedder::lookup;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::IqFrame;

pub use crate::diffnum::soft_activation;

pub const SHAPELET_GROUP: &str = "shapelets";
pub const LOCAL_PROJECTION_GROUP: &str = "local_projection";
pub const ROWS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeletConfig {
    /// `(count, length)` per group.
    pub groups: Vec<(usize, usize)>,
    /// Divide distances by `√(2·L)`.
    pub length_normalize: bool,
    /// Standard deviation of the Gaussian jitter added at initialization.
    pub init_jitter: f64,
}

impl Default for ShapeletConfig {
    fn default() -> Self {
        ShapeletConfig {
            groups: vec![(5, 8), (5, 16), (3, 32)],
            length_normalize: false,
            init_jitter: 0.01,
        }
    }
}

impl ShapeletConfig {
    pub fn total(&self) -> usize {
        self.groups.iter().map(|g| g.0).sum()
    }

    /// `(group, length)` of each shapelet in bank order.
    pub fn layout(&self) -> Vec<(usize, usize)> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(gi, &(m, l))| std::iter::repeat_n((gi, l), m))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.groups.iter().map(|&(m, l)| m * ROWS * l).sum()
    }

    pub fn validate(&self, frame_length: usize) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Config("shapelet bank is empty".into()));
        }
        if let Some(&(_, l)) = self.groups.iter().find(|&&(_, l)| l < 2 || l > frame_length) {
            return Err(Error::Config(format!(
                "shapelet length {l} outside [2, {frame_length}]"
            )));
        }
        if !(self.init_jitter.is_finite() && self.init_jitter >= 0.0) {
            return Err(Error::Config("init_jitter must be finite and nonnegative".into()));
        }
        Ok(())
    }

    fn scale<T: Scalar>(&self, l: usize) -> Option<T> {
        self.length_normalize
            .then(|| T::one() / T::lit((ROWS * l) as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shapelet<T> {
    /// `[2, L]` values, I row then Q row.
    pub values: Tensor<T>,
    pub group: usize,
}

impl<T: Scalar> Shapelet<T> {
    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeletBank<T> {
    pub config: ShapeletConfig,
    pub shapelets: Vec<Shapelet<T>>,
}

/// Frame samples as a row-major `[2, T]` buffer of `T`.
pub fn frame_rows<T: Scalar>(frame: &IqFrame) -> Vec<T> {
    frame.as_rows().iter().map(|&v| T::from_sample(v)).collect()
}

/// Distances between `shapelet` and every window of the `[2, len]` sample `x`.
pub fn sliding_distances<T: Scalar>(x: &[T], shapelet: &Shapelet<T>) -> Result<Vec<T>> {
    let l = shapelet.len();
    if !x.len().is_multiple_of(ROWS) {
        return Err(Error::Shape(format!("sample of {} values is not two rows", x.len())));
    }
    let len = x.len() / ROWS;
    if l == 0 || l > len {
        return Err(Error::Shape(format!("shapelet length {l} does not fit frame length {len}")));
    }
    let mut out = vec![T::zero(); len - l + 1];
    window_distances(x, ROWS, len, shapelet.values.data(), l, &mut out);
    Ok(out)
}

/// Lowest-index window start minimizing the distance, and that distance.
pub fn best_match<T: Scalar>(x: &[T], shapelet: &Shapelet<T>) -> Result<(usize, T)> {
    let d = sliding_distances(x, shapelet)?;
    let mut best = (0, d[0]);
    for (j, &v) in d.iter().enumerate().skip(1) {
        if v < best.1 {
            best = (j, v);
        }
    }
    Ok(best)
}

/// Affine map `a·W + b` with `W: [K, d_l]`.
pub fn local_project<T: Scalar>(a: &[T], weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Vec<T>> {
    let s = weight.shape();
    if s.len() != 2 || s[0] != a.len() || bias.shape() != [s[1]] {
        return Err(Error::Shape(format!(
            "local projection: {} activations, weight {s:?}, bias {:?}",
            a.len(),
            bias.shape()
        )));
    }
    let n = s[1];
    let w = weight.data();
    Ok((0..n)
        .map(|o| {
            a.iter()
                .enumerate()
                .fold(bias.data()[o], |acc, (i, &x)| acc + x * w[i * n + o])
        })
        .collect())
}

impl<T: Scalar> ShapeletBank<T> {
    pub fn len(&self) -> usize {
        self.shapelets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapelets.is_empty()
    }

    /// Possibly length-normalized distances of shapelet `k`.
    pub fn distances(&self, x: &[T], k: usize) -> Result<Vec<T>> {
        let s = &self.shapelets[k];
        let mut d = sliding_distances(x, s)?;
        if let Some(c) = self.config.scale::<T>(s.len()) {
            d.iter_mut().for_each(|v| *v *= c);
        }
        Ok(d)
    }

    /// The activation vector `(a¹, …, a^K)` in bank order.
    pub fn activations(&self, x: &[T]) -> Result<Vec<T>> {
        if self.is_empty() {
            return Err(Error::Config("shapelet bank is empty".into()));
        }
        (0..self.len())
            .map(|k| self.distances(x, k).map(|d| soft_activation(&d)))
            .collect()
    }

    /// Each shapelet is a uniformly chosen window of a uniformly chosen
    /// frame plus `N(0, jitter²)` noise.
    pub fn init(config: &ShapeletConfig, frames: &[IqFrame], seed: u64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Insufficient("shapelet initialization needs at least one training frame".into()));
        }
        let t = frames[0].len();
        config.validate(t)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapelets = config
            .layout()
            .into_iter()
            .map(|(group, l)| {
                let f = &frames[rng.gen_range(0..frames.len())];
                if f.len() != t {
                    return Err(Error::Shape("training frames differ in length".into()));
                }
                let start = rng.gen_range(0..=t - l);
                let noise = Tensor::<T>::randn(&[ROWS, l], config.init_jitter, &mut rng);
                let values = Tensor::from_fn(&[ROWS, l], |i| {
                    let (r, c) = (i / l, i % l);
                    T::from_sample(f.row(r)[start + c]) + noise.data()[i]
                });
                Ok(Shapelet { values, group })
            })
            .collect::<Result<_>>()?;
        Ok(ShapeletBank {
            config: config.clone(),
            shapelets,
        })
    }
}

/// The shapelet bank bound into a parameter store, plus the local projection.
#[derive(Debug, Clone)]
pub struct ShapeletLayer {
    pub config: ShapeletConfig,
    shapelets: Vec<ParamId>,
    proj: (ParamId, ParamId),
}

impl ShapeletLayer {
    /// Registers `bank` and a `K → d_l` projection (Gaussian weights of std
    /// [`INIT_STD`], zero bias).
    pub fn init<T: Scalar>(
        bank: &ShapeletBank<T>,
        d_l: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        for (k, s) in bank.shapelets.iter().enumerate() {
            store.add(&format!("shapelet.{k}"), SHAPELET_GROUP, s.values.clone())?;
        }
        let k = bank.len();
        store.add(
            "local_projection.weight",
            LOCAL_PROJECTION_GROUP,
            Tensor::randn(&[k, d_l], INIT_STD, rng),
        )?;
        store.add("local_projection.bias", LOCAL_PROJECTION_GROUP, Tensor::zeros(&[d_l]))?;
        Self::bind(&bank.config, store)
    }

    pub fn bind<T: Scalar>(config: &ShapeletConfig, store: &ParamStore<T>) -> Result<Self> {
        let shapelets = (0..config.total())
            .map(|k| lookup(store, &format!("shapelet.{k}")))
            .collect::<Result<Vec<_>>>()?;
        for (&id, (_, l)) in shapelets.iter().zip(config.layout()) {
            if store.value(id).shape() != [ROWS, l] {
                return Err(Error::Mismatch(format!(
                    "shapelet `{}` has shape {:?}, config says [2, {l}]",
                    store.get(id).name,
                    store.value(id).shape()
                )));
            }
        }
        Ok(ShapeletLayer {
            config: config.clone(),
            shapelets,
            proj: (
                lookup(store, "local_projection.weight")?,
                lookup(store, "local_projection.bias")?,
            ),
        })
    }

    /// Current shapelet values as a detached bank.
    pub fn bank<T: Scalar>(&self, store: &ParamStore<T>) -> ShapeletBank<T> {
        ShapeletBank {
            config: self.config.clone(),
            shapelets: self
                .shapelets
                .iter()
                .zip(self.config.layout())
                .map(|(&id, (group, _))| Shapelet {
                    values: store.value(id).clone(),
                    group,
                })
                .collect(),
        }
    }

    pub fn projection<'a, T: Scalar>(&self, store: &'a ParamStore<T>) -> (&'a Tensor<T>, &'a Tensor<T>) {
        (store.value(self.proj.0), store.value(self.proj.1))
    }

    /// Activation matrix `A: [B, K]` for `x: [B, 2, T]`.
    pub fn activations<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut cols = Vec::with_capacity(self.shapelets.len());
        for (&id, (_, l)) in self.shapelets.iter().zip(self.config.layout()) {
            let s = tape.param(store, id);
            let mut d = tape.sliding_distance(x, s)?;
            if let Some(c) = self.config.scale::<T>(l) {
                d = tape.scale(d, c);
            }
            cols.push(tape.softmin_pool(d)?);
        }
        tape.concat(&cols, 1)
    }

    /// `z_l = A·W + b`.
    pub fn project<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, a: Var) -> Result<Var> {
        let w = tape.param(store, self.proj.0);
        let b = tape.param(store, self.proj.1);
        tape.linear(a, w, Some(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapelet(values: Vec<f64>) -> Shapelet<f64> {
        let l = values.len() / 2;
        Shapelet {
            values: Tensor::new(&[2, l], values).unwrap(),
            group: 0,
        }
    }

    fn random_rows(t: usize, seed: u64) -> Vec<f64> {
        Tensor::<f64>::randn(&[2, t], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).into_data()
    }

    fn window(x: &[f64], t: usize, start: usize, l: usize) -> Vec<f64> {
        let mut w = x[start..start + l].to_vec();
        w.extend_from_slice(&x[t + start..t + start + l]);
        w
    }

    #[test]
    fn default_config_has_thirteen_shapelets() {
        let c = ShapeletConfig::default();
        assert_eq!(c.total(), 13);
        assert_eq!(c.parameter_count(), 2 * (5 * 8 + 5 * 16 + 3 * 32));
        assert!(ShapeletConfig { groups: vec![(1, 1)], ..c.clone() }.validate(256).is_err());
        assert!(ShapeletConfig { groups: vec![(1, 257)], ..c }.validate(256).is_err());
    }

    #[test]
    fn window_count_and_self_distance() {
        let x = random_rows(256, 1);
        let s = shapelet(window(&x, 256, 10, 8));
        let d = sliding_distances(&x, &s).unwrap();
        assert_eq!(d.len(), 249);
        assert_eq!(d[10], 0.0);
        assert!(sliding_distances(&x, &shapelet(vec![0.0; 2 * 257])).is_err());
    }

    #[test]
    fn best_match_finds_planted_window() {
        let x = random_rows(256, 2);
        assert_eq!(best_match(&x, &shapelet(window(&x, 256, 42, 16))).unwrap(), (42, 0.0));
        let flat = vec![0.3; 512];
        assert_eq!(best_match(&flat, &shapelet(vec![0.3; 16])).unwrap(), (0, 0.0));
    }

    #[test]
    fn soft_activation_examples() {
        assert_eq!(soft_activation(&[2.5f64; 7]), -2.5);
        assert!(soft_activation(&[0.0f64, 1000.0]).abs() < 1e-300);
        let d = [0.3f64, 1.7, 4.0, 0.9];
        let shifted: Vec<f64> = d.iter().map(|v| v + 3.0).collect();
        assert!((soft_activation(&shifted) - (soft_activation(&d) - 3.0)).abs() < 1e-12);
    }

    #[test]
    fn duplicated_shapelet_duplicates_activation() {
        let x = random_rows(64, 3);
        let s = shapelet(random_rows(8, 4));
        let bank = ShapeletBank {
            config: ShapeletConfig::default(),
            shapelets: vec![s.clone(), shapelet(random_rows(4, 5)), s],
        };
        let a = bank.activations(&x).unwrap();
        assert_eq!(a[0], a[2]);
        assert!(a.iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn local_projection_examples() {
        let a = [-1.0, -2.0, -0.5];
        let z = local_project(&a, &Tensor::zeros(&[3, 4]), &Tensor::zeros(&[4])).unwrap();
        assert_eq!(z, vec![0.0; 4]);
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(local_project(&a, &eye, &Tensor::zeros(&[3])).unwrap(), a.to_vec());
        assert!(local_project(&a, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn init_samples_windows_deterministically() {
        let frames: Vec<IqFrame> = (0..4)
            .map(|s| {
                let r = random_rows(256, s);
                let (i, q): (Vec<f32>, Vec<f32>) = (0..256).map(|t| (r[t] as f32, r[256 + t] as f32)).unzip();
                IqFrame::new(&i, &q, 0, 0).unwrap()
            })
            .collect();
        let cfg = ShapeletConfig::default();
        let a = ShapeletBank::<f64>::init(&cfg, &frames, 9).unwrap();
        assert_eq!(a, ShapeletBank::<f64>::init(&cfg, &frames, 9).unwrap());
        assert_eq!(a.len(), 13);
        assert_eq!(a.shapelets[12].len(), 32);
        assert_eq!(a.shapelets[12].group, 2);
        // with zero jitter every shapelet is an exact window of some frame
        let exact = ShapeletBank::<f64>::init(&ShapeletConfig { init_jitter: 0.0, ..cfg.clone() }, &frames, 9).unwrap();
        for s in &exact.shapelets {
            assert!(frames.iter().any(|f| best_match(&frame_rows::<f64>(f), s).unwrap().1 == 0.0));
        }
        assert!(ShapeletBank::<f64>::init(&cfg, &[], 0).is_err());
    }

    #[test]
    fn tape_path_matches_value_path() {
        let frames_data = random_rows(64, 11);
        let cfg = ShapeletConfig {
            groups: vec![(2, 5), (1, 12)],
            length_normalize: true,
            init_jitter: 0.1,
        };
        let bank = ShapeletBank {
            config: cfg.clone(),
            shapelets: vec![
                shapelet(random_rows(5, 1)),
                shapelet(random_rows(5, 2)),
                Shapelet {
                    group: 1,
                    ..shapelet(random_rows(12, 3))
                },
            ],
        };
        let mut store = ParamStore::new();
        store.add_group(SHAPELET_GROUP, true);
        store.add_group(LOCAL_PROJECTION_GROUP, true);
        let layer = ShapeletLayer::init(&bank, 4, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(layer.bank(&store), bank);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2, 64], frames_data.clone()).unwrap());
        let a = layer.activations(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(a).data(), bank.activations(&frames_data).unwrap().as_slice());
    }
}
