//! Encoder–decoder segmentation network with cross-phase attention fusion.
//!
//! A small 3D U-shaped network: each encoder level applies two 3x3x3
//! convolutions with instance normalization and ReLU, halving resolution
//! between levels. At the configured readout levels the encoder also emits
//! key and value grids (1x1x1 projections) used to query the per-patient
//! memory banks; the decoder concatenates the bidirectional readout with the
//! skip features before fusing. When no readout is available (memory
//! disabled, or an empty bank side) a learned per-level null feature stands
//! in, so the same weights serve both the attention-fused and the plain
//! single-volume path.
//!
//! Forward math always runs through the autodiff tape — evaluation wraps the
//! parameters as constants on a throwaway tape — so training and inference
//! compute bitwise-identical values.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::derived_rng;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon inside instance normalization's variance square root.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Channels at the finest level; level l uses `base_channels << (l-1)`.
    pub base_channels: usize,
    pub n_levels: usize,
    /// Width of the attention key projections.
    pub key_channels: usize,
    /// Width of the attention value projections (per direction).
    pub value_channels: usize,
    /// 1-indexed encoder levels that emit keys/values and fuse readouts,
    /// coarsest levels by convention. Empty disables attention entirely.
    pub readout_levels: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 8,
            n_levels: 3,
            key_channels: 8,
            value_channels: 16,
            readout_levels: vec![2, 3],
        }
    }
}

impl NetworkConfig {
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    pub fn has_readout(&self, level: usize) -> bool {
        self.readout_levels.contains(&level)
    }

    /// Spatial downscale factor of the coarsest level relative to the input.
    pub fn downscale(&self) -> usize {
        1 << (self.n_levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.key_channels == 0 || self.value_channels == 0 {
            return Err(Error::config("network channel widths must be positive"));
        }
        if !(2..=6).contains(&self.n_levels) {
            return Err(Error::config(format!(
                "n_levels {} outside supported range 2..=6",
                self.n_levels
            )));
        }
        for pair in self.readout_levels.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::config("readout_levels must be strictly ascending"));
            }
        }
        for &l in &self.readout_levels {
            if !(2..=self.n_levels).contains(&l) {
                return Err(Error::config(format!(
                    "readout level {l} outside 2..={}",
                    self.n_levels
                )));
            }
        }
        Ok(())
    }
}

/// Named tensors in a fixed insertion order. The order is part of the
/// contract: optimizer state, EMA updates, and checkpoints all walk it.
#[derive(Clone, Debug, Default)]
pub struct Parameters {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn n_tensors(&self) -> usize {
        self.entries.len()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// True when both sides hold the same names, in the same order, with the
    /// same shapes — the precondition for EMA blending and optimizer steps.
    pub fn same_layout(&self, other: &Parameters) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape())
    }
}

fn conv_block_names(cfg: &NetworkConfig) -> Vec<(String, usize, usize)> {
    // (block name, in channels, out channels) for every conv+norm block,
    // in forward order: encoder, then decoder coarse-to-fine.
    let mut blocks = Vec::new();
    let n = cfg.n_levels;
    for l in 1..=n {
        let c_in = if l == 1 { 1 } else { cfg.channels(l - 1) };
        let c = cfg.channels(l);
        blocks.push((format!("enc{l}a"), c_in, c));
        blocks.push((format!("enc{l}b"), c, c));
    }
    if cfg.has_readout(n) {
        blocks.push((format!("dec{n}"), cfg.channels(n) + 2 * cfg.value_channels, cfg.channels(n)));
    }
    for l in (1..n).rev() {
        let mut c_in = cfg.channels(l + 1) + cfg.channels(l);
        if cfg.has_readout(l) {
            c_in += 2 * cfg.value_channels;
        }
        blocks.push((format!("dec{l}"), c_in, cfg.channels(l)));
    }
    blocks
}

/// Deterministic initialization: He-normal conv weights, zero biases, unit
/// norm gains, zero null features. The same (config, seed) pair always
/// produces bit-identical parameters.
pub fn init_parameters(cfg: &NetworkConfig, seed: u64) -> Result<Parameters> {
    cfg.validate()?;
    let mut rng = derived_rng(seed, 0x6E65_7477_6F72_6B);
    let mut p = Parameters::new();
    for (name, c_in, c_out) in conv_block_names(cfg) {
        let fan_in = c_in * 27;
        p.insert(
            &format!("{name}.w"),
            Tensor::he_normal(&[c_out, c_in, 3, 3, 3], fan_in, &mut rng),
        );
        p.insert(&format!("{name}.b"), Tensor::zeros(&[c_out]));
        p.insert(&format!("{name}.gamma"), Tensor::full(&[c_out], 1.0));
        p.insert(&format!("{name}.beta"), Tensor::zeros(&[c_out]));
    }
    for &l in &cfg.readout_levels {
        let c = cfg.channels(l);
        p.insert(
            &format!("key{l}.w"),
            Tensor::he_normal(&[cfg.key_channels, c, 1, 1, 1], c, &mut rng),
        );
        p.insert(&format!("key{l}.b"), Tensor::zeros(&[cfg.key_channels]));
        p.insert(
            &format!("val{l}.w"),
            Tensor::he_normal(&[cfg.value_channels, c, 1, 1, 1], c, &mut rng),
        );
        p.insert(&format!("val{l}.b"), Tensor::zeros(&[cfg.value_channels]));
        p.insert(&format!("null_f{l}"), Tensor::zeros(&[cfg.value_channels]));
        p.insert(&format!("null_b{l}"), Tensor::zeros(&[cfg.value_channels]));
    }
    p.insert(
        "head.w",
        Tensor::he_normal(&[1, cfg.base_channels, 1, 1, 1], cfg.base_channels, &mut rng),
    );
    p.insert("head.b", Tensor::zeros(&[1]));
    Ok(p)
}

/// Parameters bound onto a tape, trainable (leaves) or frozen (constants).
pub struct BoundParams {
    vars: HashMap<String, Var>,
    names: Vec<String>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Names in the parameter set's insertion order.
    pub fn names(&self) -> &[String] {
        &self.names
    }
}

pub fn bind(tape: &mut Tape, params: &Parameters, trainable: bool) -> BoundParams {
    let mut vars = HashMap::new();
    let mut names = Vec::new();
    for (name, t) in params.iter() {
        let v = if trainable {
            tape.leaf(t.clone(), true)
        } else {
            tape.constant(t.clone())
        };
        vars.insert(name.to_string(), v);
        names.push(name.to_string());
    }
    BoundParams { vars, names }
}

fn conv_in_relu(tape: &mut Tape, x: Var, b: &BoundParams, block: &str) -> Var {
    let y = tape.conv3d(
        x,
        b.var(&format!("{block}.w")),
        Some(b.var(&format!("{block}.b"))),
    );
    let y = tape.instance_norm(
        y,
        b.var(&format!("{block}.gamma")),
        b.var(&format!("{block}.beta")),
        NORM_EPS,
    );
    tape.relu(y)
}

/// Encoder output on the tape: per-level feature grids plus key/value grids
/// at the readout levels (parallel to `cfg.readout_levels`).
pub struct EncodedVars {
    pub features: Vec<Var>,
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

pub fn encode_on_tape(
    tape: &mut Tape,
    b: &BoundParams,
    cfg: &NetworkConfig,
    x: Var,
) -> EncodedVars {
    let mut features = Vec::with_capacity(cfg.n_levels);
    let mut cur = x;
    for l in 1..=cfg.n_levels {
        if l > 1 {
            cur = tape.avg_pool2(cur);
        }
        cur = conv_in_relu(tape, cur, b, &format!("enc{l}a"));
        cur = conv_in_relu(tape, cur, b, &format!("enc{l}b"));
        features.push(cur);
    }
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for &l in &cfg.readout_levels {
        let f = features[l - 1];
        keys.push(tape.conv3d(
            f,
            b.var(&format!("key{l}.w")),
            Some(b.var(&format!("key{l}.b"))),
        ));
        values.push(tape.conv3d(
            f,
            b.var(&format!("val{l}.w")),
            Some(b.var(&format!("val{l}.b"))),
        ));
    }
    EncodedVars {
        features,
        keys,
        values,
    }
}

/// Decoder on the tape. `readouts` is parallel to `cfg.readout_levels`;
/// `None` slots fall back to the learned null features. Returns the
/// probability volume [D, H, W].
pub fn decode_on_tape(
    tape: &mut Tape,
    b: &BoundParams,
    cfg: &NetworkConfig,
    features: &[Var],
    readouts: &[Option<Var>],
) -> Var {
    assert_eq!(readouts.len(), cfg.readout_levels.len());
    let readout_at = |tape: &mut Tape, level: usize| -> Var {
        let slot = cfg
            .readout_levels
            .iter()
            .position(|&l| l == level)
            .expect("readout level");
        match readouts[slot] {
            Some(r) => r,
            None => {
                let shape = tape.value(features[level - 1]).shape().to_vec();
                let dims = [shape[1], shape[2], shape[3]];
                let nf = tape.broadcast_vec_spatial(b.var(&format!("null_f{level}")), dims);
                let nb = tape.broadcast_vec_spatial(b.var(&format!("null_b{level}")), dims);
                tape.concat_channels(&[nf, nb])
            }
        }
    };
    let n = cfg.n_levels;
    let mut g = features[n - 1];
    if cfg.has_readout(n) {
        let r = readout_at(tape, n);
        let cat = tape.concat_channels(&[g, r]);
        g = conv_in_relu(tape, cat, b, &format!("dec{n}"));
    }
    for l in (1..n).rev() {
        let up = tape.upsample2(g);
        let mut parts = vec![up, features[l - 1]];
        if cfg.has_readout(l) {
            parts.push(readout_at(tape, l));
        }
        let cat = tape.concat_channels(&parts);
        g = conv_in_relu(tape, cat, b, &format!("dec{l}"));
    }
    let logits = tape.conv3d(g, b.var("head.w"), Some(b.var("head.b")));
    let p = tape.logistic(logits);
    let out_shape = tape.value(p).shape()[1..].to_vec();
    tape.reshape(p, out_shape)
}

fn check_volume_shape(cfg: &NetworkConfig, volume: &Tensor) -> Result<()> {
    let s = volume.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::shape(format!(
            "expected intensity volume [1, D, H, W], got {s:?}"
        )));
    }
    let ds = cfg.downscale();
    for &dim in &s[1..] {
        if dim % ds != 0 || dim == 0 {
            return Err(Error::shape(format!(
                "spatial dims {:?} must be positive multiples of {ds}",
                &s[1..]
            )));
        }
    }
    Ok(())
}

/// Encoder features of one volume, detached from any tape.
pub struct FeatureSet {
    /// Per level l: [C_l, D/2^(l-1), H/2^(l-1), W/2^(l-1)].
    pub features: Vec<Tensor>,
    /// Per readout level: keys flattened to [Ck, N_level].
    pub keys: Vec<Tensor>,
    /// Per readout level: values flattened to [Cv, N_level].
    pub values: Vec<Tensor>,
}

fn flatten_grid(t: &Tensor) -> Tensor {
    let c = t.shape()[0];
    let n: usize = t.shape()[1..].iter().product();
    Tensor::new(vec![c, n], t.data().to_vec())
}

/// Run the encoder only (for memory-bank writes and query extraction).
pub fn encode(params: &Parameters, cfg: &NetworkConfig, volume: &Tensor) -> Result<FeatureSet> {
    check_volume_shape(cfg, volume)?;
    let mut tape = Tape::new();
    let b = bind(&mut tape, params, false);
    let x = tape.constant(volume.clone());
    let enc = encode_on_tape(&mut tape, &b, cfg, x);
    Ok(FeatureSet {
        features: enc
            .features
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect(),
        keys: enc.keys.iter().map(|&v| flatten_grid(tape.value(v))).collect(),
        values: enc
            .values
            .iter()
            .map(|&v| flatten_grid(tape.value(v)))
            .collect(),
    })
}

fn build_readout_slots(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    features: &[Var],
    readouts: Option<&[Tensor]>,
) -> Result<Vec<Option<Var>>> {
    let Some(rs) = readouts else {
        return Ok(vec![None; cfg.readout_levels.len()]);
    };
    if rs.len() != cfg.readout_levels.len() {
        return Err(Error::shape(format!(
            "{} readouts for {} readout levels",
            rs.len(),
            cfg.readout_levels.len()
        )));
    }
    let mut slots = Vec::new();
    for (slot, r) in rs.iter().enumerate() {
        let level = cfg.readout_levels[slot];
        let fshape = tape.value(features[level - 1]).shape().to_vec();
        let dims = [fshape[1], fshape[2], fshape[3]];
        let want = 2 * cfg.value_channels;
        if r.shape()[0] != want || r.numel() != want * dims[0] * dims[1] * dims[2] {
            return Err(Error::shape(format!(
                "readout for level {level}: got {:?}, want [{want}, {}, {}, {}]",
                r.shape(),
                dims[0],
                dims[1],
                dims[2]
            )));
        }
        let spatial = Tensor::new(vec![want, dims[0], dims[1], dims[2]], r.data().to_vec());
        slots.push(Some(tape.constant(spatial)));
    }
    Ok(slots)
}

/// Full forward pass producing a probability volume [D, H, W].
///
/// `readouts`, when given, must hold one [2*Cv, N_level] (or spatial
/// [2*Cv, d, h, w]) tensor per readout level; `None` uses the learned null
/// features everywhere, which is the attention-disabled path.
pub fn forward_segment(
    params: &Parameters,
    cfg: &NetworkConfig,
    volume: &Tensor,
    readouts: Option<&[Tensor]>,
) -> Result<Tensor> {
    check_volume_shape(cfg, volume)?;
    let mut tape = Tape::new();
    let b = bind(&mut tape, params, false);
    let x = tape.constant(volume.clone());
    let enc = encode_on_tape(&mut tape, &b, cfg, x);
    let slots = build_readout_slots(&mut tape, cfg, &enc.features, readouts)?;
    let out = decode_on_tape(&mut tape, &b, cfg, &enc.features, &slots);
    Ok(tape.value(out).clone())
}

/// Decoder-only pass over previously computed encoder features (see
/// [`encode`]), for callers that cache features across repeated decodes.
/// Produces the same values `forward_segment` would.
pub fn decode_segment(
    params: &Parameters,
    cfg: &NetworkConfig,
    features: &[Tensor],
    readouts: Option<&[Tensor]>,
) -> Result<Tensor> {
    if features.len() != cfg.n_levels {
        return Err(Error::shape(format!(
            "{} feature levels for {}-level network",
            features.len(),
            cfg.n_levels
        )));
    }
    let mut tape = Tape::new();
    let b = bind(&mut tape, params, false);
    let fvars: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
    let slots = build_readout_slots(&mut tape, cfg, &fvars, readouts)?;
    let out = decode_on_tape(&mut tape, &b, cfg, &fvars, &slots);
    Ok(tape.value(out).clone())
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"CSEGNET\x01";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: NetworkConfig,
    step: u64,
    tensors: Vec<TensorMeta>,
}

/// Write parameters (as little-endian f32), the network config, and the
/// training step counter to one file.
pub fn save_checkpoint(
    path: &Path,
    params: &Parameters,
    cfg: &NetworkConfig,
    step: u64,
) -> Result<()> {
    let manifest = CheckpointManifest {
        config: cfg.clone(),
        step,
        tensors: params
            .iter()
            .map(|(n, t)| TensorMeta {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for (_, t) in params.iter() {
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back. Structural problems (bad magic, short payload,
/// non-finite values, trailing bytes) are checkpoint errors.
pub fn load_checkpoint(path: &Path) -> Result<(Parameters, NetworkConfig, u64)> {
    let fail = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| fail("file too short for header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)
        .map_err(|_| fail("missing manifest length".into()))?;
    let mlen = u32::from_le_bytes(len4) as usize;
    let mut mbytes = vec![0u8; mlen];
    r.read_exact(&mut mbytes)
        .map_err(|_| fail("truncated manifest".into()))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&mbytes)
        .map_err(|e| fail(format!("manifest parse: {e}")))?;
    manifest.config.validate()?;
    let mut params = Parameters::new();
    for tm in &manifest.tensors {
        let n: usize = tm.shape.iter().product();
        let mut bytes = vec![0u8; 4 * n];
        r.read_exact(&mut bytes)
            .map_err(|_| fail(format!("truncated payload for {}", tm.name)))?;
        let mut data = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(fail(format!("non-finite value in {}", tm.name)));
            }
            data.push(v as f64);
        }
        params.insert(&tm.name, Tensor::new(tm.shape.clone(), data));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(fail("trailing bytes after payload".into()));
    }
    Ok((params, manifest.config, manifest.step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_volume(edge: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let n = edge * edge * edge;
        Tensor::new(
            vec![1, edge, edge, edge],
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
    }

    #[test]
    fn init_is_deterministic_and_layout_stable() {
        let cfg = NetworkConfig::default();
        let a = init_parameters(&cfg, 7).unwrap();
        let b = init_parameters(&cfg, 7).unwrap();
        assert!(a.same_layout(&b));
        for ((_, ta), (_, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(ta.data(), tb.data());
        }
        let c = init_parameters(&cfg, 8).unwrap();
        let differs = a
            .iter()
            .zip(c.iter())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(differs);
        // null features start at zero so an empty bank contributes nothing
        assert!(a.get("null_f2").data().iter().all(|&v| v == 0.0));
        assert!(a.get("null_b3").data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shapes_and_probability_range() {
        let cfg = NetworkConfig::default();
        let params = init_parameters(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_volume(8, &mut rng);
        let p = forward_segment(&params, &cfg, &x, None).unwrap();
        assert_eq!(p.shape(), &[8, 8, 8]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));

        let fs = encode(&params, &cfg, &x).unwrap();
        assert_eq!(fs.features.len(), 3);
        assert_eq!(fs.features[0].shape(), &[8, 8, 8, 8]);
        assert_eq!(fs.features[2].shape(), &[32, 2, 2, 2]);
        assert_eq!(fs.keys[0].shape(), &[8, 64]);
        assert_eq!(fs.values[0].shape(), &[16, 64]);
        assert_eq!(fs.keys[1].shape(), &[8, 8]);
        assert_eq!(fs.values[1].shape(), &[16, 8]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = NetworkConfig::default();
        let params = init_parameters(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_volume(8, &mut rng);
        let a = forward_segment(&params, &cfg, &x, None).unwrap();
        let b = forward_segment(&params, &cfg, &x, None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn decode_over_cached_features_matches_full_forward() {
        let cfg = NetworkConfig::default();
        let params = init_parameters(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_volume(8, &mut rng);
        let full = forward_segment(&params, &cfg, &x, None).unwrap();
        let fs = encode(&params, &cfg, &x).unwrap();
        let cached = decode_segment(&params, &cfg, &fs.features, None).unwrap();
        assert_eq!(full.data(), cached.data());
    }

    #[test]
    fn bad_shapes_are_rejected() {
        let cfg = NetworkConfig::default();
        let params = init_parameters(&cfg, 1).unwrap();
        let x = Tensor::zeros(&[1, 6, 6, 6]); // not divisible by 4
        assert!(matches!(
            forward_segment(&params, &cfg, &x, None),
            Err(Error::Shape(_))
        ));
        let x = Tensor::zeros(&[8, 8, 8]);
        assert!(matches!(encode(&params, &cfg, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = NetworkConfig::default();
        cfg.readout_levels = vec![3, 2];
        assert!(cfg.validate().is_err());
        cfg.readout_levels = vec![1];
        assert!(cfg.validate().is_err());
        cfg.readout_levels = vec![];
        assert!(cfg.validate().is_ok());
        cfg.n_levels = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn null_path_matches_explicit_null_readouts() {
        let cfg = NetworkConfig::default();
        let params = init_parameters(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_volume(8, &mut rng);
        let with_none = forward_segment(&params, &cfg, &x, None).unwrap();
        // hand-build the same readouts the null path produces
        let mut readouts = Vec::new();
        for &l in &cfg.readout_levels {
            let edge = 8 >> (l - 1);
            let n = edge * edge * edge;
            let mut data = Vec::new();
            for half in ["null_f", "null_b"] {
                for &v in params.get(&format!("{half}{l}")).data() {
                    data.extend(std::iter::repeat(v).take(n));
                }
            }
            readouts.push(Tensor::new(vec![2 * cfg.value_channels, n], data));
        }
        let with_nulls = forward_segment(&params, &cfg, &x, Some(&readouts)).unwrap();
        assert_eq!(with_none.data(), with_nulls.data());
    }

    #[test]
    fn plain_unet_config_runs_without_readout_params() {
        let cfg = NetworkConfig {
            readout_levels: vec![],
            ..NetworkConfig::default()
        };
        let params = init_parameters(&cfg, 1).unwrap();
        assert!(!params.iter().any(|(n, _)| n.starts_with("key")));
        let x = rand_volume(8, &mut ChaCha8Rng::seed_from_u64(1));
        let p = forward_segment(&params, &cfg, &x, None).unwrap();
        assert_eq!(p.shape(), &[8, 8, 8]);
    }

    /// The graph for the FD check: encoder, one real attention readout and
    /// one null half per readout level (so both the fused op and the null
    /// features receive gradients), decoder, head, squared error.
    fn fd_loss_graph(
        tape: &mut Tape,
        b: &BoundParams,
        cfg: &NetworkConfig,
        x: &Tensor,
        banks: &FeatureSet,
        target: &[f64],
    ) -> Var {
        let xv = tape.constant(x.clone());
        let enc = encode_on_tape(tape, b, cfg, xv);
        let mut slots = Vec::new();
        for (slot, &level) in cfg.readout_levels.iter().enumerate() {
            let fshape = tape.value(enc.features[level - 1]).shape().to_vec();
            let dims = [fshape[1], fshape[2], fshape[3]];
            let real =
                tape.memory_readout(enc.keys[slot], &banks.keys[slot], &banks.values[slot], 4);
            let null_name = if slot == 0 {
                format!("null_b{level}")
            } else {
                format!("null_f{level}")
            };
            let null = tape.broadcast_vec_spatial(b.var(&null_name), dims);
            let cat = if slot == 0 {
                tape.concat_channels(&[real, null])
            } else {
                tape.concat_channels(&[null, real])
            };
            slots.push(Some(cat));
        }
        let prob = decode_on_tape(tape, b, cfg, &enc.features, &slots);
        let t = tape.constant(Tensor::new(x.shape()[1..].to_vec(), target.to_vec()));
        let d = tape.sub(prob, t);
        let sq = tape.mul(d, d);
        tape.mean(sq)
    }

    /// End-to-end gradient check through encoder, attention readout, null
    /// features, decoder, and head: analytic vs central finite differences.
    #[test]
    fn finite_difference_gradients_full_chain() {
        let cfg = NetworkConfig::default();
        let params = init_parameters(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_volume(8, &mut rng);
        let other = rand_volume(8, &mut rng);
        let banks = encode(&params, &cfg, &other).unwrap();
        let target: Vec<f64> = (0..512).map(|_| rng.gen_range(0.0..1.0)).collect();

        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params, true);
        let loss = fd_loss_graph(&mut tape, &bound, &cfg, &x, &banks, &target);
        let grads = tape.backward(loss);
        let names = bound.names().to_vec();

        let eval = |p: &Parameters| -> f64 {
            let mut tape = Tape::new();
            let b = bind(&mut tape, p, false);
            let loss = fd_loss_graph(&mut tape, &b, &cfg, &x, &banks, &target);
            tape.value(loss).item()
        };

        // leaves were bound first, in parameter order, so grads[i] belongs
        // to the i-th parameter
        let mut checked = 0usize;
        let mut ok = 0usize;
        let h = 1e-3;
        for (pi, name) in names.iter().enumerate() {
            let g = grads[pi].as_ref();
            let numel = params.get(name).numel();
            let coords: Vec<usize> = if numel <= 2 {
                (0..numel).collect()
            } else {
                (0..4).map(|_| rng.gen_range(0..numel)).collect()
            };
            for ci in coords {
                let analytic = g.map(|t| t.data()[ci]).unwrap_or(0.0);
                let mut plus = params.clone();
                plus.get_mut(name).data_mut()[ci] += h;
                let mut minus = params.clone();
                minus.get_mut(name).data_mut()[ci] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let denom = analytic.abs().max(fd.abs()).max(1e-4);
                checked += 1;
                if ((analytic - fd) / denom).abs() < 1e-2 {
                    ok += 1;
                }
            }
        }
        assert!(checked > 100, "too few coordinates sampled: {checked}");
        let frac = ok as f64 / checked as f64;
        assert!(
            frac >= 0.99,
            "only {ok}/{checked} coordinates within tolerance"
        );
    }

    #[test]
    fn checkpoint_round_trip_and_stability() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let cfg = NetworkConfig::default();
        let params = init_parameters(&cfg, 21).unwrap();
        save_checkpoint(&path, &params, &cfg, 1234).unwrap();
        let (loaded, cfg2, step) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(step, 1234);
        assert!(loaded.same_layout(&params));
        for ((_, a), (_, b)) in loaded.iter().zip(params.iter()) {
            for (&va, &vb) in a.data().iter().zip(b.data()) {
                assert_eq!(va, vb as f32 as f64, "storage quantizes to f32");
            }
        }
        // a second save of the loaded state is byte-identical
        let path2 = dir.path().join("net2.ckpt");
        save_checkpoint(&path2, &loaded, &cfg2, step).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let bytes2 = std::fs::read(&path2).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let cfg = NetworkConfig::default();
        let params = init_parameters(&cfg, 22).unwrap();
        save_checkpoint(&path, &params, &cfg, 1).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let bad_magic = dir.path().join("bad_magic.ckpt");
        let mut b = bytes.clone();
        b[0] ^= 0xFF;
        std::fs::write(&bad_magic, &b).unwrap();
        assert!(matches!(
            load_checkpoint(&bad_magic),
            Err(Error::Checkpoint(_))
        ));

        let truncated = dir.path().join("short.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(&truncated),
            Err(Error::Checkpoint(_))
        ));

        let padded = dir.path().join("padded.ckpt");
        let mut b = bytes.clone();
        b.extend_from_slice(&[0, 0, 0]);
        std::fs::write(&padded, &b).unwrap();
        assert!(matches!(
            load_checkpoint(&padded),
            Err(Error::Checkpoint(_))
        ));
    }
}
