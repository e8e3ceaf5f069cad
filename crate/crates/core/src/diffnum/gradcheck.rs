//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Check at most this many seeded-random coordinates per tensor
    /// (`None` checks every coordinate).
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// Skip tensors in frozen groups.
    pub trainable_only: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-4,
            max_coords_per_tensor: None,
            seed: 0,
            trainable_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
}

/// `|a − f| / max(|a|, |f|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<T: Scalar, F>(f: &mut F, store: &ParamStore<T>) -> Result<f64>
where
    F: FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out).item().as_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("scalar function returned {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `f` against central differences for
/// the parameters in `store`, frozen ones included unless
/// `opts.trainable_only` is set.
///
/// `f` records a scalar on the given tape. The store's gradient slots are
/// overwritten.
pub fn finite_diff_check<T: Scalar, F>(
    mut f: F,
    store: &mut ParamStore<T>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::tracking_all();
    let out = f(&mut tape, store)?;
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("scalar function returned {v}")));
    }
    let grads = tape.backward(out)?;
    store.zero_grads();
    tape.write_param_grads(&grads, store)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<ParamId> = store
        .iter()
        .map(|(id, _)| id)
        .filter(|&id| !opts.trainable_only || store.is_trainable(id))
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        tensors: Vec::new(),
    };
    for id in ids {
        let n = store.get(id).value.numel();
        let analytic: Vec<f64> = match &store.get(id).grad {
            Some(g) => g.data().iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; n],
        };
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let orig = store.get(id).value.data()[c];
            let plus = orig + T::lit(opts.h);
            let minus = orig - T::lit(opts.h);
            store.get_mut(id).value.data_mut()[c] = plus;
            let fp = eval(&mut f, store);
            store.get_mut(id).value.data_mut()[c] = minus;
            let fm = eval(&mut f, store);
            store.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (fp? - fm?) / (plus.as_f64() - minus.as_f64());
            worst = worst.max(relative_error(analytic[c], numeric));
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.tensors.push(TensorCheck {
            name: store.get(id).name.clone(),
            coords_checked: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

/// Result of checking one primitive op over many random inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
}

type OpBuilder = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    build: OpBuilder,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero (kinks of abs/relu/l1 and division poles).
fn away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", inputs: |r| vec![uniform(r, &[3, 4]), uniform(r, &[3, 4])], build: |t, v| t.add(v[0], v[1]) },
        OpCase { name: "sub", inputs: |r| vec![uniform(r, &[3, 4]), uniform(r, &[3, 4])], build: |t, v| t.sub(v[0], v[1]) },
        OpCase { name: "mul", inputs: |r| vec![uniform(r, &[3, 4]), uniform(r, &[3, 4])], build: |t, v| t.mul(v[0], v[1]) },
        OpCase { name: "div", inputs: |r| vec![uniform(r, &[3, 4]), away(r, &[3, 4])], build: |t, v| t.div(v[0], v[1]) },
        OpCase { name: "add_broadcast", inputs: |r| vec![uniform(r, &[2, 3, 4]), uniform(r, &[3, 4])], build: |t, v| t.add_broadcast(v[0], v[1]) },
        OpCase { name: "scale", inputs: |r| vec![uniform(r, &[5])], build: |t, v| Ok(t.scale(v[0], -1.7)) },
        OpCase { name: "abs", inputs: |r| vec![away(r, &[6])], build: |t, v| Ok(t.abs(v[0])) },
        OpCase { name: "relu", inputs: |r| vec![away(r, &[6])], build: |t, v| Ok(t.relu(v[0])) },
        OpCase { name: "gelu", inputs: |r| vec![uniform(r, &[6])], build: |t, v| Ok(t.gelu(v[0])) },
        OpCase { name: "matmul", inputs: |r| vec![uniform(r, &[3, 4]), uniform(r, &[4, 2])], build: |t, v| t.matmul(v[0], v[1]) },
        OpCase {
            name: "linear",
            inputs: |r| vec![uniform(r, &[2, 3, 4]), uniform(r, &[4, 5]), uniform(r, &[5])],
            build: |t, v| t.linear(v[0], v[1], Some(v[2])),
        },
        OpCase {
            name: "conv1d",
            inputs: |r| vec![uniform(r, &[2, 2, 9]), uniform(r, &[3, 2, 5]), uniform(r, &[3])],
            build: |t, v| t.conv1d(v[0], v[1], Some(v[2]), 2, 2),
        },
        OpCase {
            name: "conv1d_stride1",
            inputs: |r| vec![uniform(r, &[1, 3, 7]), uniform(r, &[2, 3, 3]), uniform(r, &[2])],
            build: |t, v| t.conv1d(v[0], v[1], Some(v[2]), 1, 1),
        },
        OpCase {
            name: "layer_norm",
            inputs: |r| vec![uniform(r, &[3, 5]), uniform(r, &[5]), uniform(r, &[5])],
            build: |t, v| t.layer_norm(v[0], v[1], v[2]),
        },
        OpCase { name: "softmax", inputs: |r| vec![uniform(r, &[3, 4])], build: |t, v| t.softmax(v[0], 1) },
        OpCase { name: "softmax_axis0", inputs: |r| vec![uniform(r, &[3, 4, 2])], build: |t, v| t.softmax(v[0], 0) },
        OpCase { name: "mean", inputs: |r| vec![uniform(r, &[2, 3, 4])], build: |t, v| t.mean(v[0], 1) },
        OpCase { name: "sum", inputs: |r| vec![uniform(r, &[2, 3, 4])], build: |t, v| t.sum(v[0], 2) },
        OpCase { name: "concat", inputs: |r| vec![uniform(r, &[2, 3]), uniform(r, &[2, 2])], build: |t, v| t.concat(&[v[0], v[1]], 1) },
        OpCase { name: "narrow", inputs: |r| vec![uniform(r, &[5, 2])], build: |t, v| t.narrow(v[0], 1, 3) },
        OpCase { name: "transpose", inputs: |r| vec![uniform(r, &[2, 3, 4])], build: |t, v| t.transpose_last2(v[0]) },
        OpCase {
            name: "scaled_dot_product_attention",
            inputs: |r| vec![uniform(r, &[2, 5, 4]), uniform(r, &[2, 5, 4]), uniform(r, &[2, 5, 4])],
            build: |t, v| t.scaled_dot_product_attention(v[0], v[1], v[2], 2),
        },
        OpCase {
            name: "cross_entropy_with_logits",
            inputs: |r| vec![uniform(r, &[4, 3])],
            build: |t, v| t.cross_entropy_with_logits(v[0], &[0, 2, 1, 2]),
        },
        OpCase { name: "l1_norm", inputs: |r| vec![away(r, &[3, 4])], build: |t, v| t.l1_norm(v[0], 1) },
        OpCase { name: "l2_normalize", inputs: |r| vec![uniform(r, &[4, 3])], build: |t, v| t.l2_normalize(v[0], 0) },
        OpCase {
            name: "sliding_distance",
            inputs: |r| vec![uniform(r, &[2, 2, 9]), uniform(r, &[2, 4])],
            build: |t, v| t.sliding_distance(v[0], v[1]),
        },
        OpCase {
            name: "softmin_pool",
            inputs: |r| vec![Tensor::from_fn(&[3, 6], |_| r.gen_range(0.0..3.0))],
            build: |t, v| t.softmin_pool(v[0]),
        },
    ]
}

/// Gradient-checks every primitive op on `trials` seeded random inputs.
///
/// Each trial contracts the op output with a fixed random tensor so the
/// checked function is a scalar that depends on every output entry.
pub fn check_all_ops(trials: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for (ci, case) in op_cases().into_iter().enumerate() {
        let mut worst = 0.0f64;
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::mix_seed(seed, &[ci as u64, trial as u64]));
            let inputs = (case.inputs)(&mut rng);
            let mut store = ParamStore::new();
            store.add_group("inputs", true);
            let ids: Vec<ParamId> = inputs
                .into_iter()
                .enumerate()
                .map(|(i, t)| store.add(&format!("{}.{i}", case.name), "inputs", t))
                .collect::<Result<_>>()?;
            // probe the output shape once to draw contraction weights
            let mut probe = Tape::new();
            let vars: Vec<Var> = ids.iter().map(|&id| probe.param(&store, id)).collect();
            let y = (case.build)(&mut probe, &vars)?;
            let weights = uniform(&mut rng, probe.shape(y));
            let build = case.build;
            let report = finite_diff_check(
                |tape, st| {
                    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(st, id)).collect();
                    let y = build(tape, &vars)?;
                    let w = tape.constant(weights.clone());
                    let prod = tape.mul(y, w)?;
                    Ok(tape.sum_all(prod))
                },
                &mut store,
                &GradCheckOptions::default(),
            )?;
            worst = worst.max(report.max_rel_error);
        }
        out.push(OpCheck {
            op: case.name,
            trials,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
