//! Pre-norm transformer encoder with group-level freezing.
//!
//! Parameters fall into four groups: `positional_embeddings`,
//! `layer_norms`, `attention_weights` and `ffn_weights`. A [`FreezePolicy`]
//! names the groups that train; by default only positions and layer norms do.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::embedder::{lookup, EMBEDDER_GROUP};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shapelet::{LOCAL_PROJECTION_GROUP, SHAPELET_GROUP};

pub const POSITIONAL_GROUP: &str = "positional_embeddings";
pub const LAYER_NORM_GROUP: &str = "layer_norms";
pub const ATTENTION_GROUP: &str = "attention_weights";
pub const FFN_GROUP: &str = "ffn_weights";
pub const BACKBONE_GROUPS: [&str; 4] = [POSITIONAL_GROUP, LAYER_NORM_GROUP, ATTENTION_GROUP, FFN_GROUP];
pub const OUTPUT_HEAD_GROUP: &str = "output_head";

/// Every parameter group of an assembled model, in registration order.
pub const MODEL_GROUPS: [&str; 8] = [
    EMBEDDER_GROUP,
    POSITIONAL_GROUP,
    LAYER_NORM_GROUP,
    ATTENTION_GROUP,
    FFN_GROUP,
    SHAPELET_GROUP,
    LOCAL_PROJECTION_GROUP,
    OUTPUT_HEAD_GROUP,
];

/// Standard deviation of the seeded stand-in for pre-trained weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layer_count: usize,
    pub d_h: usize,
    pub head_count: usize,
    pub ff_width: usize,
    pub max_seq: usize,
    pub pooling: Pooling,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layer_count: 2,
            d_h: 64,
            head_count: 4,
            ff_width: 256,
            max_seq: 64,
            pooling: Pooling::Mean,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    /// BERT-base dimensions.
    pub fn bert_base() -> Self {
        BackboneConfig {
            layer_count: 12,
            d_h: 768,
            head_count: 12,
            ff_width: 3072,
            max_seq: 512,
            pooling: Pooling::Mean,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.head_count == 0 || !self.d_h.is_multiple_of(self.head_count) {
            return Err(Error::Config(format!(
                "d_h = {} is not divisible by head_count = {}",
                self.d_h, self.head_count
            )));
        }
        if self.ff_width == 0 || self.max_seq == 0 {
            return Err(Error::Config("ff_width and max_seq must be positive".into()));
        }
        Ok(())
    }

    /// Element count per group, in [`BACKBONE_GROUPS`] order.
    pub fn group_sizes(&self) -> [usize; 4] {
        let d = self.d_h;
        let f = self.ff_width;
        let n = self.layer_count;
        [
            self.max_seq * d,
            (2 * n + 1) * 2 * d,
            n * 4 * (d * d + d),
            n * (d * f + f + f * d + d),
        ]
    }
}

/// Names of the parameter groups that receive updates.
///
/// The default trains everything except attention and feed-forward weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezePolicy {
    pub trainable: BTreeSet<String>,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        FreezePolicy::from_names(
            MODEL_GROUPS
                .iter()
                .filter(|g| **g != ATTENTION_GROUP && **g != FFN_GROUP),
        )
    }
}

impl FreezePolicy {
    pub fn from_names<S: AsRef<str>>(names: impl IntoIterator<Item = S>) -> Self {
        FreezePolicy {
            trainable: names.into_iter().map(|s| s.as_ref().to_string()).collect(),
        }
    }

    pub fn all_frozen() -> Self {
        FreezePolicy {
            trainable: BTreeSet::new(),
        }
    }

    pub fn all_trainable() -> Self {
        FreezePolicy::from_names(MODEL_GROUPS)
    }

    pub fn is_trainable(&self, group: &str) -> bool {
        self.trainable.contains(group)
    }

    pub fn validate(&self) -> Result<()> {
        match self.trainable.iter().find(|g| !MODEL_GROUPS.contains(&g.as_str())) {
            Some(g) => Err(Error::Config(format!("freeze policy names unknown group `{g}`"))),
            None => Ok(()),
        }
    }

    /// Sets the trainable flag of every group of `store`.
    pub fn apply<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.validate()?;
        let names: Vec<String> = store.groups().iter().map(|g| g.name.clone()).collect();
        for g in names {
            store.set_trainable(&g, self.is_trainable(&g))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    positions: ParamId,
    blocks: Vec<Block>,
    final_ln: (ParamId, ParamId),
}

#[derive(Clone, Copy)]
enum Init {
    Ones,
    Zeros,
    Gaussian,
}

/// Name, group, shape and initializer of every tensor in block `i`.
fn block_specs(i: usize, d: usize, f: usize) -> Vec<(String, &'static str, Vec<usize>, Init)> {
    let p = |s: &str| format!("backbone.layer{i}.{s}");
    let mut v = vec![
        (p("ln1.gamma"), LAYER_NORM_GROUP, vec![d], Init::Ones),
        (p("ln1.beta"), LAYER_NORM_GROUP, vec![d], Init::Zeros),
    ];
    for m in ["q", "k", "v", "o"] {
        v.push((p(&format!("attn.{m}.weight")), ATTENTION_GROUP, vec![d, d], Init::Gaussian));
        v.push((p(&format!("attn.{m}.bias")), ATTENTION_GROUP, vec![d], Init::Zeros));
    }
    v.extend([
        (p("ln2.gamma"), LAYER_NORM_GROUP, vec![d], Init::Ones),
        (p("ln2.beta"), LAYER_NORM_GROUP, vec![d], Init::Zeros),
        (p("ffn.in.weight"), FFN_GROUP, vec![d, f], Init::Gaussian),
        (p("ffn.in.bias"), FFN_GROUP, vec![f], Init::Zeros),
        (p("ffn.out.weight"), FFN_GROUP, vec![f, d], Init::Gaussian),
        (p("ffn.out.bias"), FFN_GROUP, vec![d], Init::Zeros),
    ]);
    v
}

impl Backbone {
    /// Registers the four groups and seeded weights, then applies `policy`.
    /// Layer norms start at γ = 1, β = 0; everything else is `N(0, 0.02²)`
    /// with zero biases, drawn from a generator seeded by `config.seed`.
    pub fn init<T: Scalar>(config: &BackboneConfig, policy: &FreezePolicy, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        policy.validate()?;
        for g in BACKBONE_GROUPS {
            store.add_group(g, policy.is_trainable(g));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_h;
        store.add(
            "backbone.positions",
            POSITIONAL_GROUP,
            Tensor::randn(&[config.max_seq, d], INIT_STD, &mut rng),
        )?;
        for i in 0..config.layer_count {
            for (name, group, shape, init) in block_specs(i, d, config.ff_width) {
                let value = match init {
                    Init::Ones => Tensor::full(&shape, T::one()),
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Gaussian => Tensor::randn(&shape, INIT_STD, &mut rng),
                };
                store.add(&name, group, value)?;
            }
        }
        store.add("backbone.final_ln.gamma", LAYER_NORM_GROUP, Tensor::full(&[d], T::one()))?;
        store.add("backbone.final_ln.beta", LAYER_NORM_GROUP, Tensor::zeros(&[d]))?;
        Self::bind(config, store)
    }

    /// Re-binds to parameters already present in `store`.
    pub fn bind<T: Scalar>(config: &BackboneConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.layer_count);
        for i in 0..config.layer_count {
            let ids: Vec<ParamId> = block_specs(i, 0, 0)
                .iter()
                .map(|(n, ..)| lookup(store, n))
                .collect::<Result<_>>()?;
            blocks.push(Block {
                ln1: (ids[0], ids[1]),
                q: (ids[2], ids[3]),
                k: (ids[4], ids[5]),
                v: (ids[6], ids[7]),
                o: (ids[8], ids[9]),
                ln2: (ids[10], ids[11]),
                ff1: (ids[12], ids[13]),
                ff2: (ids[14], ids[15]),
            });
        }
        Ok(Backbone {
            config: config.clone(),
            positions: lookup(store, "backbone.positions")?,
            blocks,
            final_ln: (
                lookup(store, "backbone.final_ln.gamma")?,
                lookup(store, "backbone.final_ln.beta")?,
            ),
        })
    }

    /// Token sequence `[B, L, d_h]` to output tokens `[B, L, d_h]`
    /// (after the final layer norm).
    pub fn encode_tokens<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: Var) -> Result<Var> {
        let s = tape.shape(tokens).to_vec();
        if s.len() != 3 || s[2] != self.config.d_h {
            return Err(Error::Shape(format!(
                "backbone expects [B, L, {}] tokens, got {s:?}",
                self.config.d_h
            )));
        }
        if s[1] > self.config.max_seq {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max_seq {}",
                s[1], self.config.max_seq
            )));
        }
        let bind = |tape: &mut Tape<T>, (a, b): (ParamId, ParamId)| (tape.param(store, a), tape.param(store, b));
        let pos = tape.param(store, self.positions);
        let pos = tape.narrow(pos, 0, s[1])?;
        let mut h = tape.add_broadcast(tokens, pos)?;
        for blk in &self.blocks {
            let (g, b) = bind(tape, blk.ln1);
            let n = tape.layer_norm(h, g, b)?;
            let (wq, bq) = bind(tape, blk.q);
            let (wk, bk) = bind(tape, blk.k);
            let (wv, bv) = bind(tape, blk.v);
            let q = tape.linear(n, wq, Some(bq))?;
            let k = tape.linear(n, wk, Some(bk))?;
            let v = tape.linear(n, wv, Some(bv))?;
            let att = tape.scaled_dot_product_attention(q, k, v, self.config.head_count)?;
            let (wo, bo) = bind(tape, blk.o);
            let att = tape.linear(att, wo, Some(bo))?;
            h = tape.add(h, att)?;

            let (g, b) = bind(tape, blk.ln2);
            let n = tape.layer_norm(h, g, b)?;
            let (w1, b1) = bind(tape, blk.ff1);
            let (w2, b2) = bind(tape, blk.ff2);
            let u = tape.linear(n, w1, Some(b1))?;
            let u = tape.gelu(u);
            let u = tape.linear(u, w2, Some(b2))?;
            h = tape.add(h, u)?;
        }
        let (g, b) = bind(tape, self.final_ln);
        tape.layer_norm(h, g, b)
    }

    /// Global feature `z_g: [B, d_h]`, pooled over tokens.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: Var) -> Result<Var> {
        let h = self.encode_tokens(tape, store, tokens)?;
        match self.config.pooling {
            Pooling::Mean => tape.mean(h, 1),
        }
    }
}

pub const WEIGHTS_MAGIC: &[u8; 8] = b"RFSWGT64";
pub const WEIGHTS_VERSION: u32 = 1;

/// Writes named tensors as `(name, shape, little-endian f64 values)` records.
pub fn write_weights<T: Scalar>(path: &Path, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

/// Reads a file produced by [`write_weights`].
pub fn read_weights<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, path);
    if r.take(8)? != WEIGHTS_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "not a weight file (bad magic)".into(),
        });
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Version {
            found: version,
            expected: WEIGHTS_VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| r.corrupt("tensor name is not UTF-8"))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.corrupt("shape overflows"))?;
        let data = (0..numel).map(|_| r.f64().map(T::lit)).collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(&shape, data)?));
    }
    if !r.is_done() {
        return Err(r.corrupt("trailing bytes after last tensor"));
    }
    Ok(out)
}

/// Overwrites store entries with tensors from a weight file, checking
/// names and shapes, then re-applies `policy`.
pub fn import_weights<T: Scalar>(path: &Path, store: &mut ParamStore<T>, policy: &FreezePolicy) -> Result<usize> {
    let tensors = read_weights::<T>(path)?;
    for (name, t) in &tensors {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Mismatch(format!("weight file names unknown tensor `{name}`")))?;
        if store.value(id).shape() != t.shape() {
            return Err(Error::Mismatch(format!(
                "tensor `{name}`: file shape {:?}, model shape {:?}",
                t.shape(),
                store.value(id).shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("tensor `{name}` in weight file")));
        }
    }
    for (name, t) in tensors.iter() {
        let id = store.id(name).expect("checked above");
        store.get_mut(id).value = t.clone();
    }
    policy.apply(store)?;
    Ok(tensors.len())
}

/// Cursor over a little-endian byte buffer with corruption diagnostics.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        ByteReader { bytes, pos: 0, path }
    }

    pub(crate) fn corrupt(&self, msg: &str) -> Error {
        Error::Corrupt(format!("{}: {msg} (at byte {})", self.path.display(), self.pos))
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(&format!("truncated: wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny(layers: usize, d: usize, heads: usize) -> BackboneConfig {
        BackboneConfig {
            layer_count: layers,
            d_h: d,
            head_count: heads,
            ff_width: 2 * d,
            max_seq: 16,
            pooling: Pooling::Mean,
            seed: 5,
        }
    }

    fn build(cfg: &BackboneConfig, policy: &FreezePolicy) -> (ParamStore<f64>, Backbone) {
        let mut store = ParamStore::new();
        let bb = Backbone::init(cfg, policy, &mut store).unwrap();
        (store, bb)
    }

    fn encode(store: &ParamStore<f64>, bb: &Backbone, x: &Tensor<f64>) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let z = bb.encode(&mut tape, store, xv).unwrap();
        tape.value(z).data().to_vec()
    }

    #[test]
    fn group_sizes_match_the_store() {
        let cfg = tiny(2, 8, 2);
        let (store, _) = build(&cfg, &FreezePolicy::default());
        let sizes = cfg.group_sizes();
        for (g, n) in BACKBONE_GROUPS.iter().zip(sizes) {
            let group = store.group(g).unwrap();
            let count: usize = group.members.iter().map(|&id| store.value(id).numel()).sum();
            assert_eq!(count, n, "{g}");
        }
        // hand count: 16·8 positions, 5 norms × 16, 2 × 4 × 72 attention, 2 × (128+16+128+8) ffn
        assert_eq!(sizes, [128, 80, 576, 560]);
    }

    #[test]
    fn policies_set_flags() {
        let cfg = tiny(1, 4, 1);
        let (store, _) = build(&cfg, &FreezePolicy::default());
        for (_, p) in store.iter() {
            let expect = p.group == POSITIONAL_GROUP || p.group == LAYER_NORM_GROUP;
            assert_eq!(store.group(&p.group).unwrap().trainable, expect, "{}", p.name);
        }
        let (frozen, _) = build(&cfg, &FreezePolicy::all_frozen());
        assert_eq!(frozen.trainable_elements(), 0);
        let (all, _) = build(&cfg, &FreezePolicy::all_trainable());
        assert_eq!(FreezePolicy::default().trainable.len(), 6);
        assert_eq!(all.trainable_elements(), all.total_elements());
        let bad = FreezePolicy {
            trainable: ["bogus".to_string()].into_iter().collect(),
        };
        let mut s = ParamStore::<f64>::new();
        assert!(Backbone::init(&cfg, &bad, &mut s).is_err());
    }

    #[test]
    fn invalid_heads_rejected() {
        let mut s = ParamStore::<f64>::new();
        assert!(Backbone::init(&tiny(1, 6, 4), &FreezePolicy::default(), &mut s).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = tiny(2, 8, 2);
        let (a, _) = build(&cfg, &FreezePolicy::default());
        let (b, _) = build(&cfg, &FreezePolicy::default());
        for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn positions_break_permutation_symmetry() {
        let cfg = tiny(2, 8, 2);
        let (store, bb) = build(&cfg, &FreezePolicy::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[1, 6, 8], 1.0, &mut rng);
        let mut perm = x.clone();
        // swap tokens 0 and 4
        for c in 0..8 {
            perm.data_mut().swap(c, 4 * 8 + c);
        }
        let a = encode(&store, &bb, &x);
        let b = encode(&store, &bb, &perm);
        assert_eq!(a.len(), 8);
        assert!(a.iter().zip(&b).any(|(p, q)| (p - q).abs() > 1e-9));
    }

    #[test]
    fn overlong_sequence_rejected() {
        let (store, bb) = build(&tiny(1, 4, 1), &FreezePolicy::default());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 17, 4]));
        assert!(bb.encode(&mut tape, &store, x).is_err());
    }

    fn ln(v: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = v.len() as f64;
        let mu = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
        v.iter()
            .enumerate()
            .map(|(i, x)| (x - mu) / (var + 1e-5).sqrt() * g[i] + b[i])
            .collect()
    }

    fn affine(v: &[f64], w: &[f64], b: &[f64], n_out: usize) -> Vec<f64> {
        (0..n_out)
            .map(|o| b[o] + v.iter().enumerate().map(|(i, x)| x * w[i * n_out + o]).sum::<f64>())
            .collect()
    }

    #[test]
    fn single_head_layer_matches_hand_rolled_attention() {
        let cfg = tiny(1, 6, 1);
        let (mut store, bb) = build(&cfg, &FreezePolicy::default());
        // randomize every tensor so biases and norms matter
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::randn(&shape, 0.5, &mut rng);
        }
        let (len, d, f) = (5, 6, 12);
        let x = Tensor::<f64>::randn(&[1, len, d], 1.0, &mut rng);
        let got = encode(&store, &bb, &x);

        let p = |n: &str| store.value(store.id(n).unwrap()).data().to_vec();
        let pos = p("backbone.positions");
        let mut h: Vec<Vec<f64>> = (0..len)
            .map(|t| (0..d).map(|c| x.data()[t * d + c] + pos[t * d + c]).collect())
            .collect();
        let l = |s: &str| format!("backbone.layer0.{s}");
        let n1: Vec<Vec<f64>> = h.iter().map(|r| ln(r, &p(&l("ln1.gamma")), &p(&l("ln1.beta")))).collect();
        let proj = |m: &str| -> Vec<Vec<f64>> {
            n1.iter()
                .map(|r| affine(r, &p(&l(&format!("attn.{m}.weight"))), &p(&l(&format!("attn.{m}.bias"))), d))
                .collect()
        };
        let (q, k, v) = (proj("q"), proj("k"), proj("v"));
        for i in 0..len {
            let scores: Vec<f64> = (0..len)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let ctx: Vec<f64> = (0..d).map(|c| (0..len).map(|j| e[j] / z * v[j][c]).sum()).collect();
            let o = affine(&ctx, &p(&l("attn.o.weight")), &p(&l("attn.o.bias")), d);
            // q, k, v were taken from the pre-residual norms, so updating in place is safe
            h[i] = h[i].iter().zip(&o).map(|(a, b)| a + b).collect();
        }
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        for r in h.iter_mut() {
            let n2 = ln(r, &p(&l("ln2.gamma")), &p(&l("ln2.beta")));
            let u: Vec<f64> = affine(&n2, &p(&l("ffn.in.weight")), &p(&l("ffn.in.bias")), f)
                .into_iter()
                .map(gelu)
                .collect();
            let u = affine(&u, &p(&l("ffn.out.weight")), &p(&l("ffn.out.bias")), d);
            *r = r.iter().zip(&u).map(|(a, b)| a + b).collect();
        }
        let fin: Vec<Vec<f64>> = h
            .iter()
            .map(|r| ln(r, &p("backbone.final_ln.gamma"), &p("backbone.final_ln.beta")))
            .collect();
        for c in 0..d {
            let want = fin.iter().map(|r| r[c]).sum::<f64>() / len as f64;
            assert!((got[c] - want).abs() < 1e-10, "channel {c}: {} vs {want}", got[c]);
        }
    }

    #[test]
    fn weight_file_round_trip_and_errors() {
        let cfg = tiny(1, 4, 2);
        let (mut store, _) = build(&cfg, &FreezePolicy::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let tensors: Vec<(String, Tensor<f64>)> = store
            .iter()
            .map(|(_, p)| (p.name.clone(), Tensor::full(p.value.shape(), 0.25)))
            .collect();
        write_weights(&path, &tensors).unwrap();
        assert_eq!(import_weights(&path, &mut store, &FreezePolicy::all_frozen()).unwrap(), tensors.len());
        assert!(store.iter().all(|(_, p)| p.value.data().iter().all(|&v| v == 0.25)));
        assert_eq!(store.trainable_elements(), 0);

        write_weights(&path, &[("backbone.positions".to_string(), Tensor::<f64>::zeros(&[3, 3]))]).unwrap();
        assert!(matches!(import_weights(&path, &mut store, &FreezePolicy::default()), Err(Error::Mismatch(_))));

        let mut bytes = std::fs::read(dir.path().join("w.bin")).unwrap();
        bytes[8] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_weights::<f64>(&path), Err(Error::Version { found: 9, .. })));
        bytes[8] = 1;
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_weights::<f64>(&path), Err(Error::Corrupt(_))));
    }
}
