//! Top-shapelet explanations, masking, and the faithfulness comparison.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::argmax;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::seed::mix_seed;
use crate::shapelet::{frame_rows, ROWS};
use crate::signal::IqFrame;

/// One matched shapelet.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationEntry<T> {
    pub shapelet: usize,
    pub length: usize,
    pub activation: T,
    /// Start of the closest window.
    pub t_star: usize,
    pub distance: T,
    /// `[2, L]` frame window at `t_star`, row-major.
    pub matched: Vec<T>,
    /// `[2, L]` shapelet values, row-major.
    pub values: Vec<T>,
}

/// Entries sorted by activation, largest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation<T> {
    pub predicted: usize,
    pub entries: Vec<ExplanationEntry<T>>,
}

fn window<T: Scalar>(x: &[T], len: usize, start: usize, l: usize) -> Vec<T> {
    (0..ROWS).flat_map(|r| x[r * len + start..r * len + start + l].iter().copied()).collect()
}

/// Index of the lowest-distance window; ties to the lowest start.
fn argmin<T: Scalar>(d: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in d.iter().enumerate().skip(1) {
        if v < d[best] {
            best = j;
        }
    }
    best
}

/// The `top_k` highest-activation shapelets of `frame` with their match windows.
pub fn explain<T: Scalar>(model: &Model<T>, frame: &IqFrame, top_k: usize) -> Result<Explanation<T>> {
    let bank = model.bank();
    if top_k > bank.len() {
        return Err(Error::InvalidArgument(format!(
            "top_k {top_k} exceeds the bank size {}",
            bank.len()
        )));
    }
    let out = model.forward_joint(&[frame])?;
    let acts = out.activations.data();
    let mut order: Vec<usize> = (0..bank.len()).collect();
    order.sort_by(|&a, &b| acts[b].partial_cmp(&acts[a]).unwrap_or(std::cmp::Ordering::Equal));
    let x = frame_rows::<T>(frame);
    let len = frame.len();
    let entries = order[..top_k]
        .iter()
        .map(|&k| {
            let d = bank.distances(&x, k)?;
            let t_star = argmin(&d);
            let s = &bank.shapelets[k];
            Ok(ExplanationEntry {
                shapelet: k,
                length: s.len(),
                activation: acts[k],
                t_star,
                distance: d[t_star],
                matched: window(&x, len, t_star, s.len()),
                values: s.values.data().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Explanation {
        predicted: argmax(out.logits.data()),
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskMode {
    #[default]
    Zeros,
    /// Gaussian noise with the frame's RMS as standard deviation.
    Noise { seed: u64 },
}

/// Copy of `frame` with columns `[start, start + length)` of both rows replaced.
pub fn mask_subsequence(frame: &IqFrame, start: usize, length: usize, mode: MaskMode) -> Result<IqFrame> {
    let t = frame.len();
    if start.checked_add(length).is_none_or(|e| e > t) {
        return Err(Error::InvalidArgument(format!(
            "mask window [{start}, {start}+{length}) exceeds frame length {t}"
        )));
    }
    let mut out = frame.clone();
    let rms = frame.rms();
    let rows = out.rows_mut();
    match mode {
        MaskMode::Zeros => {
            for r in 0..ROWS {
                rows[r * t + start..r * t + start + length].fill(0.0);
            }
        }
        MaskMode::Noise { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, rms).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for r in 0..ROWS {
                for v in &mut rows[r * t + start..r * t + start + length] {
                    *v = noise.sample(&mut rng) as f32;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaithfulnessConfig {
    pub lengths: Vec<usize>,
    pub seed: u64,
    pub mask: MaskMode,
}

impl Default for FaithfulnessConfig {
    fn default() -> Self {
        FaithfulnessConfig {
            lengths: vec![8, 16, 32],
            seed: 0,
            mask: MaskMode::Zeros,
        }
    }
}

/// Mask positions applied to one frame at one length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Placement {
    pub frame: usize,
    pub shapelet: usize,
    pub guided_start: usize,
    pub random_start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthResult {
    pub length: usize,
    pub guided_accuracy: f64,
    pub random_accuracy: f64,
    pub guided_drop: f64,
    pub random_drop: f64,
    pub placements: Vec<Placement>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaithfulnessReport {
    pub frames: usize,
    pub baseline_accuracy: f64,
    pub lengths: Vec<LengthResult>,
}

fn hits<T: Scalar>(model: &Model<T>, frames: &[IqFrame]) -> Result<f64> {
    let refs: Vec<&IqFrame> = frames.iter().collect();
    let logits = model.forward_joint(&refs)?.logits;
    let c = model.config.classes;
    let n = logits.data().chunks(c).zip(frames).filter(|(l, f)| argmax(l) == f.device).count();
    Ok(n as f64 / frames.len() as f64)
}

/// Accuracy drop from masking each frame's best-matching window of the
/// top-activation shapelet of length `L`, against a seeded random window of
/// the same length on the same frames.
pub fn faithfulness_eval<T: Scalar>(model: &Model<T>, frames: &[IqFrame], cfg: &FaithfulnessConfig) -> Result<FaithfulnessReport> {
    if frames.is_empty() {
        return Err(Error::Insufficient("faithfulness needs at least one frame".into()));
    }
    let bank = model.bank();
    let t = frames[0].len();
    for &l in &cfg.lengths {
        if !bank.shapelets.iter().any(|s| s.len() == l) {
            return Err(Error::InvalidArgument(format!("no shapelet of length {l} in the bank")));
        }
        if l > t {
            return Err(Error::InvalidArgument(format!("length {l} exceeds frame length {t}")));
        }
    }
    let refs: Vec<&IqFrame> = frames.iter().collect();
    let base = model.forward_joint(&refs)?;
    let c = model.config.classes;
    let k_total = bank.len();
    let baseline = base.logits.data().chunks(c).zip(frames).filter(|(l, f)| argmax(l) == f.device).count() as f64
        / frames.len() as f64;
    let mut lengths = Vec::with_capacity(cfg.lengths.len());
    for &l in &cfg.lengths {
        let members: Vec<usize> = (0..k_total).filter(|&k| bank.shapelets[k].len() == l).collect();
        let mut placements = Vec::with_capacity(frames.len());
        let mut guided = Vec::with_capacity(frames.len());
        let mut random = Vec::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            let a = &base.activations.data()[i * k_total..(i + 1) * k_total];
            let k = members.iter().copied().fold(members[0], |b, k| if a[k] > a[b] { k } else { b });
            let g = argmin(&bank.distances(&frame_rows::<T>(f), k)?);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[l as u64, i as u64]));
            let r = rng.gen_range(0..=t - l);
            let mode = |arm: u64| match cfg.mask {
                MaskMode::Zeros => MaskMode::Zeros,
                MaskMode::Noise { seed } => MaskMode::Noise {
                    seed: mix_seed(seed, &[l as u64, i as u64, arm]),
                },
            };
            guided.push(mask_subsequence(f, g, l, mode(0))?);
            random.push(mask_subsequence(f, r, l, mode(1))?);
            placements.push(Placement {
                frame: i,
                shapelet: k,
                guided_start: g,
                random_start: r,
            });
        }
        let ga = hits(model, &guided)?;
        let ra = hits(model, &random)?;
        lengths.push(LengthResult {
            length: l,
            guided_accuracy: ga,
            random_accuracy: ra,
            guided_drop: baseline - ga,
            random_drop: baseline - ra,
            placements,
        });
    }
    Ok(FaithfulnessReport {
        frames: frames.len(),
        baseline_accuracy: baseline,
        lengths,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Svg,
}

#[derive(Serialize)]
struct CsvRow {
    frame_id: usize,
    shapelet_id: usize,
    length: usize,
    t_star: usize,
    activation: f64,
    channel: &'static str,
    offset: usize,
    signal_value: f64,
    shapelet_value: f64,
}

const CHANNELS: [&str; ROWS] = ["I", "Q"];

/// CSV rendering: one row per (shapelet, channel, offset).
pub fn explanation_csv<T: Scalar>(expl: &Explanation<T>, frame_id: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in &expl.entries {
        for (r, channel) in CHANNELS.iter().enumerate() {
            for o in 0..e.length {
                w.serialize(CsvRow {
                    frame_id,
                    shapelet_id: e.shapelet,
                    length: e.length,
                    t_star: e.t_star,
                    activation: e.activation.as_f64(),
                    channel,
                    offset: o,
                    signal_value: e.matched[r * e.length + o].as_f64(),
                    shapelet_value: e.values[r * e.length + o].as_f64(),
                })
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

const PALETTE: [&str; 6] = ["#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b"];

/// SVG rendering: I and Q panels with the trace and dashed shapelet overlays.
pub fn explanation_svg<T: Scalar>(expl: &Explanation<T>, frame: &IqFrame, frame_id: usize) -> String {
    let (w, ph, m) = (900.0, 220.0, 40.0);
    let t = frame.len();
    let rows = frame.as_rows();
    let mut peak = rows.iter().fold(1e-6f64, |a, &v| a.max((v as f64).abs()));
    for e in &expl.entries {
        peak = e.values.iter().fold(peak, |a, &v| a.max(v.as_f64().abs()));
    }
    let sx = |i: f64| m + i * (w - 2.0 * m) / (t.max(2) - 1) as f64;
    let mut s = String::new();
    let height = 2.0 * ph + 2.0 * m;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{height}" viewBox="0 0 {w} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{m}" y="20">frame {frame_id}, predicted device {}</text>"#,
        expl.predicted
    );
    for (r, name) in CHANNELS.iter().enumerate() {
        let top = m + r as f64 * ph;
        let mid = top + ph / 2.0;
        let sy = |v: f64| mid - v / peak * (ph / 2.0 - 10.0);
        let _ = writeln!(
            s,
            r##"<rect x="{m}" y="{top}" width="{}" height="{}" fill="none" stroke="#999"/><text x="8" y="{mid}">{name}</text>"##,
            w - 2.0 * m,
            ph - 8.0
        );
        let pts: Vec<String> = (0..t)
            .map(|i| format!("{:.2},{:.2}", sx(i as f64), sy(rows[r * t + i] as f64)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline fill="none" stroke="#1f77b4" stroke-width="1" points="{}"/>"##,
            pts.join(" ")
        );
        for (n, e) in expl.entries.iter().enumerate() {
            let color = PALETTE[n % PALETTE.len()];
            let pts: Vec<String> = (0..e.length)
                .map(|o| {
                    format!(
                        "{:.2},{:.2}",
                        sx((e.t_star + o) as f64),
                        sy(e.values[r * e.length + o].as_f64())
                    )
                })
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" stroke-dasharray="5,3" points="{}"/>"#,
                pts.join(" ")
            );
            if r == 0 {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.2}" y="{:.2}" fill="{color}">S#{} t={}</text>"#,
                    sx(e.t_star as f64),
                    top + 14.0 + 14.0 * (n % 4) as f64,
                    e.shapelet,
                    e.t_star
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn export_explanation<T: Scalar>(
    expl: &Explanation<T>,
    frame: &IqFrame,
    frame_id: usize,
    path: &Path,
    format: ExportFormat,
) -> Result<()> {
    let text = match format {
        ExportFormat::Csv => explanation_csv(expl, frame_id)?,
        ExportFormat::Svg => explanation_svg(expl, frame, frame_id),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
