//! Standard classification, prototype construction and few-shot episodes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::seed::mix_seed;
use crate::signal::{Dataset, DomainRole, IqFrame};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn predict<T: Scalar>(model: &Model<T>, frame: &IqFrame) -> Result<usize> {
    Ok(predict_batch(model, &[frame])?[0])
}

pub fn predict_batch<T: Scalar>(model: &Model<T>, frames: &[&IqFrame]) -> Result<Vec<usize>> {
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    let out = model.forward_joint(frames)?;
    let c = model.config.classes;
    Ok(out.logits.data().chunks(c).map(argmax).collect())
}

/// Fraction of `frames` whose prediction equals the device label.
pub fn accuracy<T: Scalar>(model: &Model<T>, frames: &[&IqFrame]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Insufficient("accuracy over an empty frame set".into()));
    }
    let pred = predict_batch(model, frames)?;
    let hits = pred.iter().zip(frames).filter(|(p, f)| **p == f.device).count();
    Ok(hits as f64 / frames.len() as f64)
}

/// Per-class mean joint representations.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet<T> {
    /// Class label of each prototype, ascending.
    pub classes: Vec<usize>,
    pub prototypes: Vec<Vec<T>>,
    /// Support examples averaged into each prototype.
    pub counts: Vec<usize>,
}

impl<T: Scalar> PrototypeSet<T> {
    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    /// Averages `embeddings` per label.
    pub fn from_embeddings(embeddings: &[&[T]], labels: &[usize]) -> Result<Self> {
        if embeddings.is_empty() || embeddings.len() != labels.len() {
            return Err(Error::Insufficient(format!(
                "{} support embeddings for {} labels",
                embeddings.len(),
                labels.len()
            )));
        }
        let dim = embeddings[0].len();
        if embeddings.iter().any(|e| e.len() != dim) {
            return Err(Error::Shape("support embeddings differ in dimension".into()));
        }
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let mut sums = vec![vec![T::zero(); dim]; classes.len()];
        let mut counts = vec![0usize; classes.len()];
        for (e, &y) in embeddings.iter().zip(labels) {
            let k = classes.binary_search(&y).expect("label collected above");
            counts[k] += 1;
            sums[k].iter_mut().zip(e.iter()).for_each(|(s, &v)| *s += v);
        }
        for (s, &n) in sums.iter_mut().zip(&counts) {
            let inv = T::one() / T::lit(n as f64);
            s.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(PrototypeSet {
            classes,
            prototypes: sums,
            counts,
        })
    }

    /// Class of the prototype maximizing `−‖z − c_k‖₂`; ties to the lowest index.
    pub fn nearest(&self, z: &[T]) -> Result<usize> {
        if self.prototypes.is_empty() {
            return Err(Error::Insufficient("no prototypes".into()));
        }
        if z.len() != self.dim() {
            return Err(Error::Shape(format!(
                "query has dimension {}, prototypes {}",
                z.len(),
                self.dim()
            )));
        }
        let scores: Vec<T> = self
            .prototypes
            .iter()
            .map(|c| -c.iter().zip(z).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt())
            .collect();
        Ok(self.classes[argmax(&scores)])
    }
}

/// Prototypes from the joint representations of labelled support frames.
pub fn build_prototypes<T: Scalar>(model: &Model<T>, support: &[&IqFrame]) -> Result<PrototypeSet<T>> {
    if support.is_empty() {
        return Err(Error::Insufficient("empty support set".into()));
    }
    let z = model.forward_joint(support)?.z;
    let rows: Vec<&[T]> = z.data().chunks(model.config.joint_dim()).collect();
    let labels: Vec<usize> = support.iter().map(|f| f.device).collect();
    PrototypeSet::from_embeddings(&rows, &labels)
}

/// Nearest-prototype class for `frame`; the output head is not used.
pub fn fewshot_predict<T: Scalar>(model: &Model<T>, prototypes: &PrototypeSet<T>, frame: &IqFrame) -> Result<usize> {
    let z = model.forward_joint(&[frame])?.z;
    prototypes.nearest(z.data())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotProtocol {
    pub n_shot: usize,
    pub n_query: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for FewShotProtocol {
    fn default() -> Self {
        FewShotProtocol {
            n_shot: 5,
            n_query: 30,
            repeats: 30,
            seed: 0,
        }
    }
}

/// Pool indices drawn for one episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotReport {
    pub protocol: FewShotProtocol,
    pub accuracies: Vec<f64>,
    pub episodes: Vec<Episode>,
}

impl FewShotReport {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len().max(1) as f64
    }

    /// Population standard deviation over repeats.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let n = self.accuracies.len().max(1) as f64;
        (self.accuracies.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n).sqrt()
    }
}

/// Samples disjoint support and query index sets per class of `labels`.
pub fn sample_episodes(labels: &[usize], protocol: &FewShotProtocol) -> Result<Vec<Episode>> {
    if protocol.n_shot == 0 || protocol.n_query == 0 || protocol.repeats == 0 {
        return Err(Error::InvalidArgument("n_shot, n_query and repeats must be positive".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let per_class: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    let need = protocol.n_shot + protocol.n_query;
    for (c, idx) in classes.iter().zip(&per_class) {
        if idx.len() < need {
            return Err(Error::Insufficient(format!(
                "class {c} has {} frames, an episode needs {need}",
                idx.len()
            )));
        }
    }
    Ok((0..protocol.repeats)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(protocol.seed, &[r as u64]));
            let mut ep = Episode {
                support: Vec::new(),
                query: Vec::new(),
            };
            for idx in &per_class {
                let picked: Vec<usize> = idx.choose_multiple(&mut rng, need).copied().collect();
                ep.support.extend_from_slice(&picked[..protocol.n_shot]);
                ep.query.extend_from_slice(&picked[protocol.n_shot..]);
            }
            ep
        })
        .collect())
}

/// Runs the episodic protocol over precomputed embeddings.
pub fn fewshot_on_embeddings<T: Scalar>(
    embeddings: &[&[T]],
    labels: &[usize],
    protocol: &FewShotProtocol,
) -> Result<FewShotReport> {
    let episodes = sample_episodes(labels, protocol)?;
    let mut accuracies = Vec::with_capacity(episodes.len());
    for ep in &episodes {
        let sup: Vec<&[T]> = ep.support.iter().map(|&i| embeddings[i]).collect();
        let sup_labels: Vec<usize> = ep.support.iter().map(|&i| labels[i]).collect();
        let protos = PrototypeSet::from_embeddings(&sup, &sup_labels)?;
        let mut hits = 0;
        for &q in &ep.query {
            if protos.nearest(embeddings[q])? == labels[q] {
                hits += 1;
            }
        }
        accuracies.push(hits as f64 / ep.query.len() as f64);
    }
    Ok(FewShotReport {
        protocol: *protocol,
        accuracies,
        episodes,
    })
}

/// Few-shot evaluation with support and query drawn from `pool`.
pub fn fewshot_evaluate<T: Scalar>(model: &Model<T>, pool: &[&IqFrame], protocol: &FewShotProtocol) -> Result<FewShotReport> {
    let labels: Vec<usize> = pool.iter().map(|f| f.device).collect();
    sample_episodes(&labels, protocol)?;
    let z = model.forward_joint(pool)?.z;
    let rows: Vec<&[T]> = z.data().chunks(model.config.joint_dim()).collect();
    fewshot_on_embeddings(&rows, &labels, protocol)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    Standard,
    FewShot(FewShotProtocol),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainAccuracy {
    pub domain: usize,
    pub name: String,
    pub role: DomainRole,
    pub frames: usize,
    pub accuracy: f64,
    /// Standard deviation over few-shot repeats.
    pub std: Option<f64>,
}

/// Accuracy per domain present in `dataset`.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset, mode: EvalMode) -> Result<Vec<DomainAccuracy>> {
    let mut out = Vec::new();
    for (d, info) in dataset.domains().iter().enumerate() {
        let frames: Vec<&IqFrame> = dataset.frames().iter().filter(|f| f.domain == d).collect();
        if frames.is_empty() {
            continue;
        }
        let (accuracy, std) = match mode {
            EvalMode::Standard => (self::accuracy(model, &frames)?, None),
            EvalMode::FewShot(p) => {
                let r = fewshot_evaluate(model, &frames, &p)?;
                (r.mean(), Some(r.std()))
            }
        };
        out.push(DomainAccuracy {
            domain: d,
            name: info.name.clone(),
            role: info.role,
            frames: frames.len(),
            accuracy,
            std,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0f64, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0f64, 1.0, 0.0, 1.0]), 1);
        assert_eq!(argmax(&[0.0f64, 0.0, 0.0, 9.0]), 3);
    }

    #[test]
    fn prototypes_and_nearest() {
        let a = [1.0f64, 2.0];
        let b = [3.0f64, 4.0];
        let c = [10.0f64, 0.0];
        let p = PrototypeSet::from_embeddings(&[&a, &b, &c, &c], &[4, 4, 1, 1]).unwrap();
        assert_eq!(p.classes, vec![1, 4]);
        assert_eq!(p.prototypes, vec![vec![10.0, 0.0], vec![2.0, 3.0]]);
        assert_eq!(p.counts, vec![2, 2]);
        assert_eq!(p.nearest(&[2.0, 3.0]).unwrap(), 4);
        let line = PrototypeSet::from_embeddings(&[&[0.0f64][..], &[4.0][..]], &[0, 1]).unwrap();
        assert_eq!(line.nearest(&[1.0]).unwrap(), 0);
        assert_eq!(line.nearest(&[2.0]).unwrap(), 0);
        assert_eq!(line.nearest(&[3.0]).unwrap(), 1);
        assert!(line.nearest(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn episodes_are_disjoint_and_seeded() {
        let labels: Vec<usize> = (0..120).map(|i| i % 3).collect();
        let p = FewShotProtocol {
            n_shot: 5,
            n_query: 30,
            repeats: 7,
            seed: 4,
        };
        let eps = sample_episodes(&labels, &p).unwrap();
        assert_eq!(eps, sample_episodes(&labels, &p).unwrap());
        assert_eq!(eps.len(), 7);
        for e in &eps {
            assert_eq!(e.support.len(), 15);
            assert_eq!(e.query.len(), 90);
            assert!(e.support.iter().all(|s| !e.query.contains(s)));
        }
        assert_ne!(eps[0], eps[1]);
        let short = FewShotProtocol { n_query: 36, ..p };
        assert!(matches!(sample_episodes(&labels, &short), Err(Error::Insufficient(_))));
    }
}
