//! Multi-layer perceptrons: seeded initialization, forward passes (with and
//! without gradient tracking), and a binary checkpoint format.
//!
//! Weights for layer `l` are stored `[out, in]`, so the forward pass is
//! `x @ Wᵀ + b` per layer with the configured activation between layers and
//! raw logits at the output. The value-only [`Mlp::forward`] and the taped
//! [`BoundMlp::forward`] share the same kernels and evaluation order, so
//! both produce bit-identical logits for identical inputs.
//!
//! # Checkpoint format (version 1)
//!
//! All integers and floats little-endian:
//!
//! ```text
//! magic    4 bytes  "RKPT"
//! version  u32      1
//! layers   u32      number of weight matrices L
//! shapes   L × (u32 rows, u32 cols)
//! weights  Σ rows·cols × f64, layer order, row-major
//! biases   Σ rows × f64, layer order
//! seed     u64      init_seed
//! crc      u32      CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Loading distinguishes: bad magic, unsupported version, truncated or
//! oversized payload, an inconsistent shape table, and a CRC mismatch.
//! The format only describes relu networks (it predates the optional smooth
//! activation), so saving a tanh model is refused rather than silently
//! mislabeled.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::{matmul_bt_acc, Tape, Tensor, Var};

// ── Configuration ───────────────────────────────────────────────────────────

/// Hidden-layer nonlinearity. `Relu` is the default everywhere; `Tanh`
/// exists for diagnostics that need a twice-differentiable network (a relu
/// network is piecewise linear in its input, which makes second-order
/// input-space checks degenerate).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Architecture + init seed. `layer_widths` runs input → hidden… → output,
/// e.g. `[2, 64, 64, 2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub layer_widths: Vec<usize>,
    pub init_seed: u64,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpConfig {
    pub fn new(layer_widths: Vec<usize>, init_seed: u64) -> Self {
        MlpConfig {
            layer_widths,
            init_seed,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::config(format!(
                "layer_widths needs at least input and output, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::config(format!(
                "layer_widths must be positive, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

// ── Model ───────────────────────────────────────────────────────────────────

/// A fully-connected network. Parameters are plain [`Tensor`]s with
/// `requires_grad` set; training reads gradients off a tape and mutates
/// `weights`/`biases` in place.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub config: MlpConfig,
    /// One `[out, in]` matrix per layer.
    pub weights: Vec<Tensor>,
    /// One `[out]` vector per layer.
    pub biases: Vec<Tensor>,
}

impl Mlp {
    /// He-style uniform init: weights `U[−√(6/fan_in), √(6/fan_in))` drawn
    /// layer by layer in row-major order from a ChaCha stream seeded with
    /// `init_seed`; biases zero. Identical configs produce bit-identical
    /// parameters.
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(config.init_seed);
        let mut weights = Vec::with_capacity(config.n_layers());
        let mut biases = Vec::with_capacity(config.n_layers());
        for l in 0..config.n_layers() {
            let fan_in = config.layer_widths[l];
            let fan_out = config.layer_widths[l + 1];
            let bound = (6.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            weights.push(Tensor::new(vec![fan_out, fan_in], data)?.with_grad());
            biases.push(Tensor::zeros(vec![fan_out]).with_grad());
        }
        Ok(Mlp {
            config,
            weights,
            biases,
        })
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.numel()).sum::<usize>()
            + self.biases.iter().map(|b| b.numel()).sum::<usize>()
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        match x.shape.as_slice() {
            [b, d] if *d == self.config.input_dim() => Ok(*b),
            other => Err(Error::ShapeMismatch {
                op: "mlp_forward",
                left: other.to_vec(),
                right: vec![0, self.config.input_dim()],
            }),
        }
    }

    /// Value-only forward pass: `[B, d] → [B, C]` logits. No tape, no
    /// gradients; bit-identical to the taped forward on the same input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.check_input(x)?;
        let mut cur = x.data.clone();
        let mut cur_cols = self.config.input_dim();
        for (l, (w, bias)) in self.weights.iter().zip(&self.biases).enumerate() {
            let out_cols = w.shape[0];
            let mut next = vec![0.0; b * out_cols];
            matmul_bt_acc(&cur, &w.data, b, cur_cols, out_cols, &mut next);
            for i in 0..b {
                for j in 0..out_cols {
                    next[i * out_cols + j] += bias.data[j];
                }
            }
            // Same error policy as the taped path: stop on the first
            // non-finite intermediate instead of letting it wash out.
            for (index, &value) in next.iter().enumerate() {
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        op: "mlp_forward",
                        index,
                        value,
                    });
                }
            }
            if l + 1 < self.weights.len() {
                match self.config.activation {
                    Activation::Relu => {
                        for v in next.iter_mut() {
                            if !(*v > 0.0) {
                                *v = 0.0;
                            }
                        }
                    }
                    Activation::Tanh => {
                        for v in next.iter_mut() {
                            *v = v.tanh();
                        }
                    }
                }
            }
            cur = next;
            cur_cols = out_cols;
        }
        Tensor::new(vec![b, cur_cols], cur)
    }

    /// Records the parameters on `tape` ready for a differentiable forward.
    /// With `trainable = false` the parameters are constants, which skips
    /// all parameter-gradient work (the right mode for attacks that only
    /// need input gradients).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundMlp> {
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut biases = Vec::with_capacity(self.biases.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            weights.push(tape.leaf(&w.data, &w.shape, trainable)?);
            biases.push(tape.leaf(&b.data, &b.shape, trainable)?);
        }
        Ok(BoundMlp {
            weights,
            biases,
            activation: self.config.activation,
        })
    }
}

/// Tape-resident copy of an [`Mlp`]'s parameters.
pub struct BoundMlp {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    activation: Activation,
}

impl BoundMlp {
    /// Differentiable forward pass: `x: [B, d] → [B, C]` logits.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut cur = x;
        let last = self.weights.len() - 1;
        for (l, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let h = tape.matmul_bt(cur, w)?;
            let hb = tape.add_bias(h, b)?;
            cur = if l < last {
                match self.activation {
                    Activation::Relu => tape.relu(hb)?,
                    Activation::Tanh => tape.tanh(hb)?,
                }
            } else {
                hb
            };
        }
        Ok(cur)
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"RKPT";
const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(format!(
                "truncated checkpoint: needed {} bytes for {} at offset {}, file has {}",
                n,
                what,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Mlp {
    /// Serializes the model in checkpoint format v1 (see module docs).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.config.activation != Activation::Relu {
            return Err(Error::format(
                "checkpoint format v1 describes relu networks; refusing to save a tanh model"
                    .to_string(),
            ));
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        put_u32(&mut buf, self.weights.len() as u32);
        for w in &self.weights {
            put_u32(&mut buf, w.shape[0] as u32);
            put_u32(&mut buf, w.shape[1] as u32);
        }
        for w in &self.weights {
            for &v in &w.data {
                put_f64(&mut buf, v);
            }
        }
        for b in &self.biases {
            for &v in &b.data {
                put_f64(&mut buf, v);
            }
        }
        put_u64(&mut buf, self.config.init_seed);
        let crc = crc32fast::hash(&buf);
        put_u32(&mut buf, crc);
        Ok(buf)
    }

    /// Parses a checkpoint produced by [`Mlp::to_bytes`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(format!(
                "bad magic {:?}: not a checkpoint (expected \"RKPT\")",
                magic
            )));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {} (this build reads version {})",
                version, VERSION
            )));
        }
        let n_layers = r.u32("layer count")? as usize;
        if n_layers == 0 {
            return Err(Error::format("shape table inconsistent: zero layers".to_string()));
        }
        let mut shapes = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let rows = r.u32("shape rows")? as usize;
            let cols = r.u32("shape cols")? as usize;
            if rows == 0 || cols == 0 {
                return Err(Error::format(format!(
                    "shape table inconsistent: layer {} has degenerate shape {}×{}",
                    l, rows, cols
                )));
            }
            shapes.push((rows, cols));
        }
        for l in 1..n_layers {
            if shapes[l].1 != shapes[l - 1].0 {
                return Err(Error::format(format!(
                    "shape table inconsistent: layer {} expects {} inputs but layer {} emits {}",
                    l,
                    shapes[l].1,
                    l - 1,
                    shapes[l - 1].0
                )));
            }
        }
        let n_weights: usize = shapes.iter().map(|&(r, c)| r * c).sum();
        let n_biases: usize = shapes.iter().map(|&(r, _)| r).sum();
        let expected = 4 + 4 + 4 + 8 * n_layers + 8 * (n_weights + n_biases) + 8 + 4;
        if bytes.len() != expected {
            return Err(Error::format(format!(
                "payload length inconsistent with shape table: expected {} bytes, found {}",
                expected,
                bytes.len()
            )));
        }
        let mut weights = Vec::with_capacity(n_layers);
        for &(rows, cols) in &shapes {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(r.f64("weight")?);
            }
            weights.push(Tensor::new(vec![rows, cols], data)?.with_grad());
        }
        let mut biases = Vec::with_capacity(n_layers);
        for &(rows, _) in &shapes {
            let mut data = Vec::with_capacity(rows);
            for _ in 0..rows {
                data.push(r.f64("bias")?);
            }
            biases.push(Tensor::new(vec![rows], data)?.with_grad());
        }
        let init_seed = r.u64("init seed")?;
        let stored_crc = r.u32("crc")?;
        let actual_crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
        if stored_crc != actual_crc {
            return Err(Error::format(format!(
                "crc mismatch: stored {:#010x}, computed {:#010x}",
                stored_crc, actual_crc
            )));
        }
        let mut layer_widths = vec![shapes[0].1];
        layer_widths.extend(shapes.iter().map(|&(r, _)| r));
        Ok(Mlp {
            config: MlpConfig::new(layer_widths, init_seed),
            weights,
            biases,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MlpConfig {
        MlpConfig::new(vec![2, 4, 2], 7)
    }

    #[test]
    fn init_shapes_follow_widths() {
        let m = Mlp::new(small()).unwrap();
        assert_eq!(m.weights[0].shape, vec![4, 2]);
        assert_eq!(m.weights[1].shape, vec![2, 4]);
        assert_eq!(m.biases[0].shape, vec![4]);
        assert_eq!(m.biases[1].shape, vec![2]);
        assert!(m.biases.iter().all(|b| b.data.iter().all(|&v| v == 0.0)));
        assert_eq!(m.num_params(), 4 * 2 + 2 * 4 + 4 + 2);
    }

    #[test]
    fn init_is_bit_deterministic() {
        let a = Mlp::new(small()).unwrap();
        let b = Mlp::new(small()).unwrap();
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            let ba: Vec<u64> = wa.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = wb.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb);
        }
        let c = Mlp::new(MlpConfig::new(vec![2, 4, 2], 8)).unwrap();
        assert_ne!(a.weights[0].data, c.weights[0].data);
    }

    #[test]
    fn init_respects_he_uniform_bounds_and_mean() {
        // 10,000 independent inits of [2,4,2]: first-layer weights stay in
        // [−√3, √3] and their grand mean is within 3 standard errors of 0.
        let bound = (6.0f64 / 2.0).sqrt();
        let mut sum = 0.0;
        let mut count = 0usize;
        for seed in 0..10_000u64 {
            let m = Mlp::new(MlpConfig::new(vec![2, 4, 2], seed)).unwrap();
            for &v in &m.weights[0].data {
                assert!(v >= -bound && v < bound, "weight {v} outside ±{bound}");
                sum += v;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        // Var of U[−b,b] is b²/3; standard error of the mean over N draws.
        let three_se = 3.0 * bound / (3.0f64).sqrt() / (count as f64).sqrt();
        assert!(
            mean.abs() < three_se,
            "init mean {mean} exceeds 3 standard errors ({three_se})"
        );
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut m = Mlp::new(small()).unwrap();
        for w in &mut m.weights {
            w.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.1, -0.4, 0.9]).unwrap();
        let z = m.forward(&x).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_identity_weights_pass_input_through() {
        let mut m = Mlp::new(MlpConfig::new(vec![2, 2], 0)).unwrap();
        m.weights[0].data = vec![1.0, 0.0, 0.0, 1.0];
        let x = Tensor::new(vec![2, 2], vec![3.0, -1.5, 0.25, 8.0]).unwrap();
        let z = m.forward(&x).unwrap();
        assert_eq!(z.data, x.data);
    }

    #[test]
    fn batched_forward_equals_stacked_single_rows() {
        let m = Mlp::new(MlpConfig::new(vec![3, 8, 4], 21)).unwrap();
        let rows = vec![
            vec![0.1, -0.2, 0.3],
            vec![1.0, 0.5, -0.7],
            vec![-2.0, 0.0, 0.9],
        ];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let batch = m.forward(&Tensor::new(vec![3, 3], flat).unwrap()).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let single = m
                .forward(&Tensor::new(vec![1, 3], row.clone()).unwrap())
                .unwrap();
            let batch_bits: Vec<u64> = batch.row(i).iter().map(|v| v.to_bits()).collect();
            let single_bits: Vec<u64> = single.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(batch_bits, single_bits, "row {i} differs from batch");
        }
    }

    #[test]
    fn taped_forward_matches_value_forward_bitwise() {
        let m = Mlp::new(MlpConfig::new(vec![2, 16, 16, 3], 5)).unwrap();
        let x = Tensor::new(vec![4, 2], vec![0.4, -0.9, 1.2, 0.0, -0.3, 0.8, 2.0, -2.0]).unwrap();
        let pure = m.forward(&x).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true).unwrap();
        let xv = tape.constant(&x.data, &x.shape).unwrap();
        let z = bound.forward(&mut tape, xv).unwrap();
        let taped = tape.value(z).unwrap();
        let a: Vec<u64> = pure.data.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = taped.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_does_not_mutate_parameters() {
        let m = Mlp::new(small()).unwrap();
        let before: Vec<Vec<u64>> = m
            .weights
            .iter()
            .map(|w| w.data.iter().map(|v| v.to_bits()).collect())
            .collect();
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let _ = m.forward(&x).unwrap();
        let after: Vec<Vec<u64>> = m
            .weights
            .iter()
            .map(|w| w.data.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn logits_stay_moderate_at_init() {
        // Unit-box inputs through a freshly initialized [2,64,64,2] net must
        // not explode: |logit| < 50 is a loose sanity rail for He init.
        let m = Mlp::new(MlpConfig::new(vec![2, 64, 64, 2], 123)).unwrap();
        let mut rng = crate::rng::rng_from_seed(9);
        let data: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = m.forward(&Tensor::new(vec![100, 2], data).unwrap()).unwrap();
        assert!(z.data.iter().all(|&v| v.abs() < 50.0));
    }

    #[test]
    fn wrong_input_width_is_a_shape_error() {
        let m = Mlp::new(small()).unwrap();
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            m.forward(&x),
            Err(Error::ShapeMismatch { op: "mlp_forward", .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = Mlp::new(MlpConfig::new(vec![2, 8, 8, 2], 99)).unwrap();
        let bytes = m.to_bytes().unwrap();
        let m2 = Mlp::from_bytes(&bytes).unwrap();
        assert_eq!(m.config, m2.config);
        for (a, b) in m.weights.iter().zip(&m2.weights) {
            assert_eq!(a.shape, b.shape);
            let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        for (a, b) in m.biases.iter().zip(&m2.biases) {
            let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        // Serialization itself is deterministic.
        assert_eq!(bytes, m2.to_bytes().unwrap());
    }

    #[test]
    fn checkpoint_errors_are_distinguished() {
        let m = Mlp::new(small()).unwrap();
        let good = m.to_bytes().unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let err = Mlp::from_bytes(&bad_magic).unwrap_err().to_string();
        assert!(err.contains("magic"), "got: {err}");

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        // CRC would also mismatch, but version must be reported first.
        let err = Mlp::from_bytes(&bad_version).unwrap_err().to_string();
        assert!(err.contains("version 9"), "got: {err}");

        let truncated = &good[..good.len() - 7];
        let err = Mlp::from_bytes(truncated).unwrap_err().to_string();
        assert!(
            err.contains("inconsistent") || err.contains("truncated"),
            "got: {err}"
        );

        let err = Mlp::from_bytes(&good[..9]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "got: {err}");

        // Shape table that disagrees with itself: layer 1 input ≠ layer 0 output.
        let mut bad_shape = good.clone();
        // Layout: magic(4) version(4) layers(4) [rows cols] [rows cols] ...
        // First layer is 4×2; set second layer cols (offset 4+4+4+8+4) to 3.
        bad_shape[4 + 4 + 4 + 8 + 4] = 3;
        let err = Mlp::from_bytes(&bad_shape).unwrap_err().to_string();
        assert!(err.contains("shape table"), "got: {err}");

        let mut bad_crc = good.clone();
        let n = bad_crc.len();
        bad_crc[n - 1] ^= 0xFF;
        let err = Mlp::from_bytes(&bad_crc).unwrap_err().to_string();
        assert!(err.contains("crc"), "got: {err}");

        // Flipping a payload byte is caught by the CRC.
        let mut bad_payload = good.clone();
        bad_payload[40] ^= 0x01;
        let err = Mlp::from_bytes(&bad_payload).unwrap_err().to_string();
        assert!(err.contains("crc"), "got: {err}");
    }

    #[test]
    fn tanh_models_refuse_to_serialize() {
        let mut cfg = small();
        cfg.activation = Activation::Tanh;
        let m = Mlp::new(cfg).unwrap();
        assert!(matches!(m.to_bytes(), Err(Error::Format(_))));
    }
}
