//! Synthetic multi-device, multi-domain I/Q generator.
//!
//! Device identity lives in transmitter impairments ([`ImpairmentProfile`]);
//! domain shift is a change of propagation channel ([`ChannelProfile`]).
//! Every frame is a pure function of its profiles and a per-frame seed.

use std::f64::consts::PI;
use std::path::PathBuf;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::mix_seed;
use crate::signal::{Dataset, DatasetManifest, DomainInfo, DomainRole, IqFrame};

/// Amplitude up to which the PA polynomial must stay monotone.
pub const PA_MONOTONE_RADIUS: f64 = 2.0;

/// Transmitter hardware imperfections of one device.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImpairmentProfile {
    pub cfo_ppm: f64,
    pub iq_gain_db: f64,
    pub iq_phase_deg: f64,
    /// Complex additive bias `[re, im]`.
    pub dc_offset: [f64; 2],
    pub pa_a3: f64,
    pub pa_a5: f64,
    /// Random-walk phase noise increment, radians per sample.
    pub phase_noise_std: f64,
}

impl ImpairmentProfile {
    fn as_vector(&self) -> [f64; 8] {
        [
            self.cfo_ppm,
            self.iq_gain_db,
            self.iq_phase_deg,
            self.dc_offset[0],
            self.dc_offset[1],
            self.pa_a3,
            self.pa_a5,
            self.phase_noise_std,
        ]
    }

    /// Euclidean distance between raw parameter vectors.
    pub fn distance(&self, other: &Self) -> f64 {
        self.as_vector()
            .iter()
            .zip(other.as_vector())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Whether `r ↦ r + a3·r³ + a5·r⁵` is increasing on `[0, PA_MONOTONE_RADIUS]`.
    pub fn pa_is_monotone(&self) -> bool {
        // derivative 1 + 3·a3·u + 5·a5·u², u = r² ∈ [0, R²]
        let umax = PA_MONOTONE_RADIUS * PA_MONOTONE_RADIUS;
        let deriv = |u: f64| 1.0 + 3.0 * self.pa_a3 * u + 5.0 * self.pa_a5 * u * u;
        let mut candidates = vec![0.0, umax];
        if self.pa_a5 != 0.0 {
            let vertex = -3.0 * self.pa_a3 / (10.0 * self.pa_a5);
            if vertex > 0.0 && vertex < umax {
                candidates.push(vertex);
            }
        }
        candidates.into_iter().all(|u| deriv(u) > 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_vector().iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("impairment profile has non-finite entries".into()));
        }
        if self.phase_noise_std < 0.0 {
            return Err(Error::Config("phase noise std must be nonnegative".into()));
        }
        if !self.pa_is_monotone() {
            return Err(Error::Config(format!(
                "PA coefficients a3={}, a5={} are not monotone up to amplitude {PA_MONOTONE_RADIUS}",
                self.pa_a3, self.pa_a5
            )));
        }
        Ok(())
    }
}

/// Propagation conditions of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub name: String,
    pub role: DomainRole,
    /// Additive-noise level; `inf` disables noise.
    pub snr_db: f64,
    /// Complex impulse response `[[re, im], ...]`, normalized to unit energy.
    pub taps: Vec<[f64; 2]>,
}

impl ChannelProfile {
    pub fn new(name: impl Into<String>, role: DomainRole, snr_db: f64, taps: Vec<[f64; 2]>) -> Result<Self> {
        let mut c = ChannelProfile {
            name: name.into(),
            role,
            snr_db,
            taps,
        };
        c.normalize()?;
        Ok(c)
    }

    /// Rescales taps to unit energy after validating them.
    pub fn normalize(&mut self) -> Result<()> {
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::Config(format!("channel `{}` has invalid SNR {}", self.name, self.snr_db)));
        }
        let energy: f64 = self.taps.iter().map(|t| t[0] * t[0] + t[1] * t[1]).sum();
        if self.taps.is_empty() || !energy.is_finite() || energy == 0.0 {
            return Err(Error::Config(format!("channel `{}` needs nonzero finite taps", self.name)));
        }
        let s = energy.sqrt();
        for t in &mut self.taps {
            t[0] /= s;
            t[1] /= s;
        }
        Ok(())
    }

    /// An ideal channel: one unit tap, no noise.
    pub fn ideal(name: impl Into<String>, role: DomainRole) -> Self {
        ChannelProfile {
            name: name.into(),
            role,
            snr_db: f64::INFINITY,
            taps: vec![[1.0, 0.0]],
        }
    }

    fn complex_taps(&self) -> Vec<Complex64> {
        self.taps.iter().map(|t| Complex64::new(t[0], t[1])).collect()
    }
}

/// Waveform and radio constants shared by all frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub frame_length: usize,
    pub samples_per_symbol: usize,
    pub rrc_rolloff: f64,
    /// Filter span in symbols.
    pub rrc_span: usize,
    pub carrier_hz: f64,
    pub sample_rate_hz: f64,
    /// Extra leading samples simulated then discarded (channel settling).
    pub guard: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            frame_length: 256,
            samples_per_symbol: 4,
            rrc_rolloff: 0.35,
            rrc_span: 8,
            carrier_hz: 2.4e9,
            sample_rate_hz: 20e6,
            guard: 32,
        }
    }
}

impl SimParams {
    /// Normalized frequency offset in cycles per sample.
    pub fn cfo_cycles_per_sample(&self, cfo_ppm: f64) -> f64 {
        cfo_ppm * 1e-6 * self.carrier_hz / self.sample_rate_hz
    }

    fn validate(&self) -> Result<()> {
        if self.frame_length == 0 || self.samples_per_symbol == 0 || self.rrc_span == 0 {
            return Err(Error::Config("frame length, samples per symbol and RRC span must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rrc_rolloff) || self.rrc_rolloff == 0.0 {
            return Err(Error::Config(format!("RRC roll-off {} outside (0, 1]", self.rrc_rolloff)));
        }
        if !(self.carrier_hz > 0.0 && self.sample_rate_hz > 0.0) {
            return Err(Error::Config("carrier and sample rate must be positive".into()));
        }
        Ok(())
    }
}

/// Unit-energy root-raised-cosine taps.
pub fn rrc_taps(rolloff: f64, span: usize, sps: usize) -> Vec<f64> {
    let n = span * sps + 1;
    let mid = (n / 2) as f64;
    let b = rolloff;
    let mut h: Vec<f64> = (0..n)
        .map(|i| {
            let t = (i as f64 - mid) / sps as f64;
            if t == 0.0 {
                1.0 - b + 4.0 * b / PI
            } else if (4.0 * b * t).abs() == 1.0 {
                (b / 2f64.sqrt())
                    * ((1.0 + 2.0 / PI) * (PI / (4.0 * b)).sin() + (1.0 - 2.0 / PI) * (PI / (4.0 * b)).cos())
            } else {
                ((PI * t * (1.0 - b)).sin() + 4.0 * b * t * (PI * t * (1.0 + b)).cos())
                    / (PI * t * (1.0 - (4.0 * b * t).powi(2)))
            }
        })
        .collect();
    let e = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    h.iter_mut().for_each(|v| *v /= e);
    h
}

/// Pulse-shaped random QPSK, `frame_length + guard` samples at unit power.
fn payload_waveform(rng: &mut ChaCha8Rng, p: &SimParams) -> Vec<Complex64> {
    let taps = rrc_taps(p.rrc_rolloff, p.rrc_span, p.samples_per_symbol);
    let n = p.frame_length + p.guard;
    let total = n + taps.len() - 1;
    let n_sym = total.div_ceil(p.samples_per_symbol);
    let a = std::f64::consts::FRAC_1_SQRT_2;
    let symbols: Vec<Complex64> = (0..n_sym)
        .map(|_| {
            let bits: u8 = rng.gen_range(0..4);
            Complex64::new(
                if bits & 1 == 0 { a } else { -a },
                if bits & 2 == 0 { a } else { -a },
            )
        })
        .collect();
    // steady-state samples only: output index taps.len()-1 onward
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let idx = k + taps.len() - 1;
        let mut acc = Complex64::new(0.0, 0.0);
        for (ti, &h) in taps.iter().enumerate() {
            let up = idx - ti;
            if up.is_multiple_of(p.samples_per_symbol) {
                acc += symbols[up / p.samples_per_symbol] * h;
            }
        }
        out.push(acc);
    }
    let power = out.iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
    let s = power.sqrt();
    out.iter_mut().for_each(|c| *c /= s);
    out
}

/// Crops the guard, normalizes to unit power and stores as a 2×T frame.
fn emit(signal: &[Complex64], p: &SimParams, device: usize, domain: usize) -> Result<IqFrame> {
    let body = &signal[p.guard..p.guard + p.frame_length];
    let power = body.iter().map(|c| c.norm_sqr()).sum::<f64>() / (2 * p.frame_length) as f64;
    let rms = power.sqrt();
    if rms == 0.0 || !rms.is_finite() {
        return Err(Error::NonFinite("synthesized frame has zero or non-finite energy".into()));
    }
    let i: Vec<f32> = body.iter().map(|c| (c.re / rms) as f32).collect();
    let q: Vec<f32> = body.iter().map(|c| (c.im / rms) as f32).collect();
    IqFrame::new(&i, &q, device, domain)
}

/// The unimpaired pulse-shaped payload for `payload_seed`, emitted exactly
/// as [`synth_frame`] emits frames.
pub fn clean_frame(payload_seed: u64, params: &SimParams) -> Result<IqFrame> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(payload_seed);
    let x = payload_waveform(&mut rng, params);
    emit(&x, params, 0, 0)
}

/// Runs one payload through the impairment chain and the channel.
///
/// Order: PA nonlinearity, I/Q imbalance, DC offset, CFO rotation, phase
/// noise, multipath + AWGN, unit-power normalization.
pub fn synth_frame(
    profile: &ImpairmentProfile,
    channel: &ChannelProfile,
    payload_seed: u64,
    params: &SimParams,
) -> Result<IqFrame> {
    params.validate()?;
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(payload_seed);
    let mut x = payload_waveform(&mut rng, params);

    for c in &mut x {
        let m2 = c.norm_sqr();
        *c = *c + *c * (profile.pa_a3 * m2) + *c * (profile.pa_a5 * m2 * m2);
    }

    let g = 10f64.powf(profile.iq_gain_db / 20.0);
    let phi = profile.iq_phase_deg.to_radians();
    let (sin_phi, cos_phi) = phi.sin_cos();
    for c in &mut x {
        let (i, q) = (c.re, c.im);
        *c = Complex64::new(g * i, q * cos_phi + i * sin_phi);
    }

    let dc = Complex64::new(profile.dc_offset[0], profile.dc_offset[1]);
    for c in &mut x {
        *c += dc;
    }

    let f_off = params.cfo_cycles_per_sample(profile.cfo_ppm);
    for (n, c) in x.iter_mut().enumerate() {
        *c *= Complex64::from_polar(1.0, 2.0 * PI * f_off * n as f64);
    }

    let mut phase = 0.0;
    for c in &mut x {
        let step: f64 = rng.sample(StandardNormal);
        phase += profile.phase_noise_std * step;
        *c *= Complex64::from_polar(1.0, phase);
    }

    let taps = channel.complex_taps();
    let mut y: Vec<Complex64> = (0..x.len())
        .map(|n| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, &h) in taps.iter().enumerate().take(n + 1) {
                acc += h * x[n - k];
            }
            acc
        })
        .collect();

    if channel.snr_db.is_finite() {
        let power = y.iter().map(|c| c.norm_sqr()).sum::<f64>() / y.len() as f64;
        let sigma = (power / 10f64.powf(channel.snr_db / 10.0) / 2.0).sqrt();
        for c in &mut y {
            let ni: f64 = rng.sample(StandardNormal);
            let nq: f64 = rng.sample(StandardNormal);
            *c += Complex64::new(sigma * ni, sigma * nq);
        }
    }

    emit(&y, params, 0, 0)
}

/// Half-widths (or bounds) of the per-device impairment distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpairmentRanges {
    /// CFO drawn from `±cfo_ppm`.
    pub cfo_ppm: f64,
    pub iq_gain_db: f64,
    pub iq_phase_deg: f64,
    /// Each DC component drawn from `±dc_offset`.
    pub dc_offset: f64,
    /// `a3` drawn from `[-pa_a3, 0]`.
    pub pa_a3: f64,
    pub pa_a5: f64,
    pub phase_noise_std: [f64; 2],
}

impl Default for ImpairmentRanges {
    fn default() -> Self {
        ImpairmentRanges {
            cfo_ppm: 20.0,
            iq_gain_db: 2.0,
            iq_phase_deg: 10.0,
            dc_offset: 0.15,
            pa_a3: 0.04,
            pa_a5: 0.003,
            phase_noise_std: [0.001, 0.01],
        }
    }
}

/// Draws `classes` distinct device profiles from the default ranges scaled by `spread`.
pub fn make_device_fleet(classes: usize, spread: f64, seed: u64) -> Result<Vec<ImpairmentProfile>> {
    make_device_fleet_with(&ImpairmentRanges::default(), classes, spread, seed)
}

/// Draws `classes` distinct device profiles; `spread` scales every range.
pub fn make_device_fleet_with(
    ranges: &ImpairmentRanges,
    classes: usize,
    spread: f64,
    seed: u64,
) -> Result<Vec<ImpairmentProfile>> {
    if classes < 2 {
        return Err(Error::Config(format!("a fleet needs at least 2 devices, got {classes}")));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::Config(format!("fleet spread must be finite and nonnegative, got {spread}")));
    }
    let [pn_lo, pn_hi] = ranges.phase_noise_std;
    if !(0.0 <= pn_lo && pn_lo <= pn_hi) {
        return Err(Error::Config(format!("phase noise range [{pn_lo}, {pn_hi}] is invalid")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sym = |r: &mut ChaCha8Rng, half: f64| spread * r.gen_range(-half..=half);
    let fleet: Vec<ImpairmentProfile> = (0..classes)
        .map(|_| {
            let cfo_ppm = sym(&mut rng, ranges.cfo_ppm);
            let iq_gain_db = sym(&mut rng, ranges.iq_gain_db);
            let iq_phase_deg = sym(&mut rng, ranges.iq_phase_deg);
            let dc_offset = [sym(&mut rng, ranges.dc_offset), sym(&mut rng, ranges.dc_offset)];
            let pa_a3 = -spread * rng.gen_range(0.0..=ranges.pa_a3);
            let pa_a5 = sym(&mut rng, ranges.pa_a5);
            let phase_noise_std = spread * rng.gen_range(pn_lo..=pn_hi);
            ImpairmentProfile {
                cfo_ppm,
                iq_gain_db,
                iq_phase_deg,
                dc_offset,
                pa_a3,
                pa_a5,
                phase_noise_std,
            }
        })
        .collect();
    for (k, p) in fleet.iter().enumerate() {
        p.validate().map_err(|e| Error::Config(format!("device {k}: {e}")))?;
    }
    check_distinct(&fleet)?;
    Ok(fleet)
}

fn check_distinct(fleet: &[ImpairmentProfile]) -> Result<()> {
    for a in 0..fleet.len() {
        for b in a + 1..fleet.len() {
            if fleet[a].distance(&fleet[b]) == 0.0 {
                return Err(Error::Config(format!("devices {a} and {b} have identical impairment profiles")));
            }
        }
    }
    Ok(())
}

/// Generates `fleet.len() × channels.len() × frames_per_cell` labelled frames.
///
/// Frame `k` of cell `(class, domain)` uses payload seed
/// `mix_seed(seed, [class, domain, k])`, so generation order does not matter.
pub fn synth_dataset(
    fleet: &[ImpairmentProfile],
    channels: &[ChannelProfile],
    frames_per_cell: usize,
    seed: u64,
    params: &SimParams,
) -> Result<(Dataset, DatasetManifest)> {
    if fleet.is_empty() || channels.is_empty() {
        return Err(Error::Config("synthesis needs a nonempty fleet and channel list".into()));
    }
    check_distinct(fleet)?;
    let mut frames = Vec::with_capacity(fleet.len() * channels.len() * frames_per_cell);
    for (class, profile) in fleet.iter().enumerate() {
        for (domain, channel) in channels.iter().enumerate() {
            for k in 0..frames_per_cell {
                let payload_seed = mix_seed(seed, &[class as u64, domain as u64, k as u64]);
                let mut f = synth_frame(profile, channel, payload_seed, params)?;
                f.device = class;
                f.domain = domain;
                frames.push(f);
            }
        }
    }
    let domains = channels
        .iter()
        .map(|c| DomainInfo::new(c.name.clone(), c.role))
        .collect();
    let ds = Dataset::new(params.frame_length, fleet.len(), domains, frames)?;
    let manifest = DatasetManifest::for_dataset(&ds, PathBuf::from("payload.iq"));
    Ok((ds, manifest))
}

/// Structured-text description of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub spread: f64,
    pub ranges: ImpairmentRanges,
    pub fleet_seed: u64,
    pub frames_per_cell: usize,
    pub seed: u64,
    pub params: SimParams,
    pub channels: Vec<ChannelProfile>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 8,
            spread: 1.0,
            ranges: ImpairmentRanges::default(),
            fleet_seed: 1,
            frames_per_cell: 500,
            seed: 7,
            params: SimParams::default(),
            channels: default_channels(),
        }
    }
}

/// Two source channels plus one shifted target channel.
pub fn default_channels() -> Vec<ChannelProfile> {
    vec![
        ChannelProfile::new("source-los", DomainRole::Source, 25.0, vec![[1.0, 0.0], [0.15, 0.05]]),
        ChannelProfile::new("source-reflect", DomainRole::Source, 20.0, vec![[1.0, 0.0], [0.3, -0.15], [0.1, 0.05]]),
        ChannelProfile::new("target-nlos", DomainRole::Target, 20.0, vec![[0.85, 0.31], [0.45, 0.25], [0.2, -0.1]]),
    ]
    .into_iter()
    .map(|c| c.expect("default channels are valid"))
    .collect()
}

impl SynthConfig {
    /// Builds the fleet and channels, then synthesizes the corpus.
    pub fn generate(&self) -> Result<(Dataset, Vec<ImpairmentProfile>)> {
        let fleet = make_device_fleet_with(&self.ranges, self.classes, self.spread, self.fleet_seed)?;
        let mut channels = self.channels.clone();
        for c in &mut channels {
            c.normalize()?;
        }
        let (ds, _) = synth_dataset(&fleet, &channels, self.frames_per_cell, self.seed, &self.params)?;
        Ok((ds, fleet))
    }
}
