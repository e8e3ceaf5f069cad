use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::frame::IqFrame;
use crate::error::{Error, Result};
use crate::seed::mix_seed;

/// Whether a domain was seen during training or held out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainInfo {
    pub name: String,
    pub role: DomainRole,
}

impl DomainInfo {
    pub fn new(name: impl Into<String>, role: DomainRole) -> Self {
        DomainInfo {
            name: name.into(),
            role,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCount {
    pub class: usize,
    pub domain: usize,
    pub count: usize,
}

/// A labelled collection of equal-length frames.
///
/// Frames are kept grouped by `(class, domain)` in class-major order; the
/// relative order of frames inside a cell is preserved from construction.
/// This grouping is what the payload layout relies on.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    frame_length: usize,
    class_count: usize,
    domains: Vec<DomainInfo>,
    frames: Vec<IqFrame>,
}

impl Dataset {
    pub fn new(
        frame_length: usize,
        class_count: usize,
        domains: Vec<DomainInfo>,
        mut frames: Vec<IqFrame>,
    ) -> Result<Self> {
        for (idx, f) in frames.iter().enumerate() {
            if f.len() != frame_length {
                return Err(Error::Shape(format!(
                    "frame {idx} has length {}, dataset frame length is {frame_length}",
                    f.len()
                )));
            }
            if f.device >= class_count {
                return Err(Error::InvalidArgument(format!(
                    "frame {idx} has class {} but class count is {class_count}",
                    f.device
                )));
            }
            if f.domain >= domains.len() {
                return Err(Error::InvalidArgument(format!(
                    "frame {idx} has domain {} but only {} domains exist",
                    f.domain,
                    domains.len()
                )));
            }
        }
        frames.sort_by_key(|f| (f.device, f.domain));
        Ok(Dataset {
            frame_length,
            class_count,
            domains,
            frames,
        })
    }

    pub fn frame_length(&self) -> usize {
        self.frame_length
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn domains(&self) -> &[DomainInfo] {
        &self.domains
    }

    pub fn frames(&self) -> &[IqFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn into_frames(self) -> Vec<IqFrame> {
        self.frames
    }

    /// Frame counts for every `(class, domain)` pair, class-major.
    pub fn cell_counts(&self) -> Vec<CellCount> {
        let mut counts = Vec::with_capacity(self.class_count * self.domains.len());
        for class in 0..self.class_count {
            for domain in 0..self.domains.len() {
                counts.push(CellCount {
                    class,
                    domain,
                    count: 0,
                });
            }
        }
        let nd = self.domains.len();
        for f in &self.frames {
            counts[f.device * nd + f.domain].count += 1;
        }
        counts
    }

    /// Keeps the frames matching `keep`, with the same label spaces.
    pub fn filter(&self, mut keep: impl FnMut(&IqFrame) -> bool) -> Dataset {
        Dataset {
            frame_length: self.frame_length,
            class_count: self.class_count,
            domains: self.domains.clone(),
            frames: self.frames.iter().filter(|f| keep(f)).cloned().collect(),
        }
    }

    pub fn domain_subset(&self, domain: usize) -> Dataset {
        self.filter(|f| f.domain == domain)
    }

    pub fn role_subset(&self, role: DomainRole) -> Dataset {
        let domains = self.domains.clone();
        self.filter(|f| domains[f.domain].role == role)
    }

    pub fn domain_indices(&self, role: DomainRole) -> Vec<usize> {
        self.domains
            .iter()
            .enumerate()
            .filter(|(_, d)| d.role == role)
            .map(|(i, _)| i)
            .collect()
    }

    /// Replaces every frame through `f`, keeping labels.
    pub fn map_frames(&self, f: impl FnMut(&IqFrame) -> Result<IqFrame>) -> Result<Dataset> {
        let frames = self.frames.iter().map(f).collect::<Result<Vec<_>>>()?;
        let frame_length = frames.first().map_or(self.frame_length, |f| f.len());
        Dataset::new(frame_length, self.class_count, self.domains.clone(), frames)
    }
}

/// Train/validation/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = SplitRatios { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "split ratios must be finite and nonnegative: {parts:?}"
            )));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios must sum to 1: {parts:?}"
            )));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Largest-remainder allocation of `n` items; every positive part gets ≥ 1.
fn allocate(n: usize, ratios: [f64; 3]) -> Option<[usize; 3]> {
    let positive = ratios.iter().filter(|&&r| r > 0.0).count();
    if n < positive {
        return None;
    }
    let mut counts = [0usize; 3];
    let mut rema = [0f64; 3];
    for k in 0..3 {
        let exact = n as f64 * ratios[k];
        counts[k] = (exact + 1e-9).floor() as usize;
        rema[k] = exact - counts[k] as f64;
    }
    let mut left = n - counts.iter().sum::<usize>().min(n);
    while left > 0 {
        let k = (0..3)
            .filter(|&k| ratios[k] > 0.0)
            .max_by(|&a, &b| rema[a].total_cmp(&rema[b]).then(b.cmp(&a)))
            .expect("at least one positive ratio");
        counts[k] += 1;
        rema[k] = f64::NEG_INFINITY;
        left -= 1;
    }
    for k in 0..3 {
        if ratios[k] > 0.0 && counts[k] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).expect("three parts");
            counts[donor] -= 1;
            counts[k] += 1;
        }
    }
    Some(counts)
}

/// Stratified split per `(class, domain)` cell, deterministic in `seed`.
pub fn split_dataset(
    dataset: &Dataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    ratios.validate()?;
    let r = ratios.as_array();
    let mut parts: [Vec<IqFrame>; 3] = Default::default();
    let mut start = 0;
    for cell in dataset.cell_counts() {
        let n = cell.count;
        if n == 0 {
            continue;
        }
        let counts = allocate(n, r).ok_or_else(|| {
            Error::Insufficient(format!(
                "cell (class {}, domain {}) has {n} frames, fewer than the partitions requested",
                cell.class, cell.domain
            ))
        })?;
        let mut order: Vec<usize> = (start..start + n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[cell.class as u64, cell.domain as u64]));
        order.shuffle(&mut rng);
        let mut offset = 0;
        for (k, &c) in counts.iter().enumerate() {
            let mut idx = order[offset..offset + c].to_vec();
            idx.sort_unstable();
            parts[k].extend(idx.into_iter().map(|i| dataset.frames[i].clone()));
            offset += c;
        }
        start += n;
    }
    let [train, val, test] = parts;
    let build = |frames| {
        Dataset::new(
            dataset.frame_length,
            dataset.class_count,
            dataset.domains.clone(),
            frames,
        )
    };
    Ok((build(train)?, build(val)?, build(test)?))
}
