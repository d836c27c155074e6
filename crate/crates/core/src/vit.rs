//! Minimal pre-norm Vision-Transformer encoder.
//!
//! Each block computes
//!
//! ```text
//! A = X + Wo · MHA(LN1(X))
//! M = A + MLP(LN2(A))
//! ```
//!
//! and the full forward pass records `K`, `V`, `A` and `M` of every block so
//! that a caller can reuse them for later frames. All `T` tokens are patch
//! tokens; there is no class token.
//!
//! FLOPs count matmul and attention multiply-adds at 2 FLOPs each.
//! Elementwise work (norms, softmax, GELU, bias and residual adds) is not
//! counted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StcError};
use crate::exec::Execution;
use crate::numerics::{dot, layer_norm, matmul_with, softmax_in_place, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub token_count: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub ln_eps: f32,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 6,
            token_count: 64,
            model_dim: 64,
            num_heads: 4,
            mlp_ratio: 4.0,
            ln_eps: 1e-5,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("token_count", self.token_count),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(StcError::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(StcError::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !self.mlp_ratio.is_finite() || self.mlp_ratio <= 0.0 {
            return Err(StcError::Config(format!(
                "mlp_ratio must be > 0, got {}",
                self.mlp_ratio
            )));
        }
        if self.mlp_hidden() == 0 {
            return Err(StcError::Config("mlp_ratio * model_dim rounds to 0".into()));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(StcError::Config(format!(
                "ln_eps must be > 0, got {}",
                self.ln_eps
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.model_dim as f64).round() as usize
    }
}

/// Runtime multiply-add counter, fed from the operand shapes each kernel
/// actually sees.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounter(u64);

impl FlopCounter {
    pub fn new() -> Self {
        FlopCounter(0)
    }

    #[inline]
    pub fn record_multiply_adds(&mut self, count: usize) {
        self.0 += 2 * count as u64;
    }

    pub fn total(&self) -> u64 {
        self.0
    }
}

/// Affine map `x · W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl Linear {
    fn uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let weight = Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..=bound));
        let bias = (0..fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Linear { weight, bias }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn forward(&self, x: &Matrix, exec: Execution, flops: &mut FlopCounter) -> Result<Matrix> {
        let mut out = matmul_with(x, &self.weight, exec)?;
        flops.record_multiply_adds(x.rows() * x.cols() * self.weight.cols());
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl Norm {
    fn identity(dim: usize) -> Self {
        Norm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }
}

/// Per-layer activations recorded by a full forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Key projection of `LN1(X)`.
    pub k: Matrix,
    /// Value projection of `LN1(X)`.
    pub v: Matrix,
    /// Post-attention hidden state, residual included.
    pub a: Matrix,
    /// Block output, residual included.
    pub m: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub output: Matrix,
    pub traces: Vec<LayerTrace>,
    pub flops: u64,
}

/// One pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub norm1: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    num_heads: usize,
    ln_eps: f32,
    exec: Execution,
}

impl EncoderBlock {
    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn pre_attention_norm(&self, x: &Matrix) -> Result<Matrix> {
        layer_norm(x, &self.norm1.gamma, &self.norm1.beta, self.ln_eps)
    }

    /// Multi-head attention of `queries` against all `keys`/`values`,
    /// heads concatenated. Each output row depends only on its query row.
    pub fn attend(
        &self,
        queries: &Matrix,
        keys: &Matrix,
        values: &Matrix,
        flops: &mut FlopCounter,
    ) -> Result<Matrix> {
        let dim = keys.cols();
        if queries.cols() != dim || values.shape() != keys.shape() {
            return Err(StcError::shape(
                "attend",
                format!(
                    "q {:?}, k {:?}, v {:?}",
                    queries.shape(),
                    keys.shape(),
                    values.shape()
                ),
            ));
        }
        let heads = self.num_heads;
        let head_dim = dim / heads;
        let tokens = keys.rows();
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut out = Matrix::zeros(queries.rows(), dim);
        let exec = self.exec.for_work(queries.rows() * tokens * dim);
        exec.for_each_row(out.data_mut(), dim, |i, out_row| {
            let q = queries.row(i);
            let mut probs = vec![0.0f64; tokens];
            let mut acc = vec![0.0f64; head_dim];
            for h in 0..heads {
                let span = h * head_dim..(h + 1) * head_dim;
                for (j, p) in probs.iter_mut().enumerate() {
                    *p = dot(&q[span.clone()], &keys.row(j)[span.clone()]) * scale;
                }
                softmax_in_place(&mut probs);
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (j, &p) in probs.iter().enumerate() {
                    for (a, &v) in acc.iter_mut().zip(&values.row(j)[span.clone()]) {
                        *a += p * f64::from(v);
                    }
                }
                for (o, a) in out_row[span].iter_mut().zip(&acc) {
                    *o = *a as f32;
                }
            }
        });
        // scores plus weighted sum, each rows * tokens * head_dim per head
        flops.record_multiply_adds(2 * queries.rows() * tokens * dim);
        Ok(out)
    }

    /// `A + MLP(LN2(A))` for every row of `a`.
    pub fn mlp_residual(&self, a: &Matrix, flops: &mut FlopCounter) -> Result<Matrix> {
        let h = layer_norm(a, &self.norm2.gamma, &self.norm2.beta, self.ln_eps)?;
        let mut hidden = self.fc1.forward(&h, self.exec, flops)?;
        hidden.map_in_place(gelu);
        let out = self.fc2.forward(&hidden, self.exec, flops)?;
        a.add(&out)
    }

    /// Full computation of one block on all tokens.
    pub fn forward(&self, x: &Matrix, flops: &mut FlopCounter) -> Result<LayerTrace> {
        let h = self.pre_attention_norm(x)?;
        let q = self.query.forward(&h, self.exec, flops)?;
        let k = self.key.forward(&h, self.exec, flops)?;
        let v = self.value.forward(&h, self.exec, flops)?;
        let attn = self.attend(&q, &k, &v, flops)?;
        let a = x.add(&self.output.forward(&attn, self.exec, flops)?)?;
        let m = self.mlp_residual(&a, flops)?;
        Ok(LayerTrace { k, v, a, m })
    }
}

/// tanh approximation of GELU, evaluated in f64.
pub fn gelu(x: f32) -> f32 {
    let x = f64::from(x);
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    blocks: Vec<EncoderBlock>,
    exec: Execution,
}

impl Encoder {
    /// Seeded uniform(±1/√fan_in) initialization; norms start at identity.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.model_dim;
        let hidden = config.mlp_hidden();
        let exec = Execution::default();
        let blocks = (0..config.num_layers)
            .map(|_| EncoderBlock {
                norm1: Norm::identity(d),
                query: Linear::uniform(&mut rng, d, d),
                key: Linear::uniform(&mut rng, d, d),
                value: Linear::uniform(&mut rng, d, d),
                output: Linear::uniform(&mut rng, d, d),
                norm2: Norm::identity(d),
                fc1: Linear::uniform(&mut rng, d, hidden),
                fc2: Linear::uniform(&mut rng, hidden, d),
                num_heads: config.num_heads,
                ln_eps: config.ln_eps,
                exec,
            })
            .collect();
        Ok(Encoder {
            config,
            blocks,
            exec,
        })
    }

    /// Encoder whose projection weights and biases are all zero, so every
    /// block reduces to its residual path. Test hook.
    pub fn zeroed(config: EncoderConfig) -> Result<Self> {
        let mut enc = Encoder::new(config)?;
        let d = enc.config.model_dim;
        let hidden = enc.config.mlp_hidden();
        for b in &mut enc.blocks {
            b.query = Linear::zeros(d, d);
            b.key = Linear::zeros(d, d);
            b.value = Linear::zeros(d, d);
            b.output = Linear::zeros(d, d);
            b.fc1 = Linear::zeros(d, hidden);
            b.fc2 = Linear::zeros(hidden, d);
        }
        Ok(enc)
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self.blocks.iter_mut().for_each(|b| b.exec = exec);
        self
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }

    pub fn check_frame(&self, frame: &Matrix) -> Result<()> {
        let want = (self.config.token_count, self.config.model_dim);
        if frame.shape() != want {
            return Err(StcError::shape(
                "encoder input",
                format!("frame is {:?}, encoder expects {:?}", frame.shape(), want),
            ));
        }
        Ok(())
    }

    pub fn full_forward(&self, frame: &Matrix) -> Result<ForwardResult> {
        self.check_frame(frame)?;
        let mut flops = FlopCounter::new();
        let mut traces: Vec<LayerTrace> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let input = traces.last().map_or(frame, |t| &t.m);
            let trace = block.forward(input, &mut flops)?;
            traces.push(trace);
        }
        let output = traces
            .last()
            .map(|t| t.m.clone())
            .unwrap_or_else(|| frame.clone());
        Ok(ForwardResult {
            output,
            traces,
            flops: flops.total(),
        })
    }

    /// FNV-1a over the bit patterns of one block's weights.
    pub fn layer_checksum(&self, layer: usize) -> u64 {
        let b = &self.blocks[layer];
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let linears = [&b.query, &b.key, &b.value, &b.output, &b.fc1, &b.fc2];
        for lin in linears {
            for v in lin.weight.data().iter().chain(&lin.bias) {
                for byte in v.to_bits().to_le_bytes() {
                    hash ^= u64::from(byte);
                    hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        hash
    }
}

/// Closed-form FLOPs of one full forward pass.
pub fn flop_count_full(config: &EncoderConfig) -> u64 {
    let t = config.token_count as u64;
    let d = config.model_dim as u64;
    let h = config.mlp_hidden() as u64;
    // QKVO projections, attention scores + weighted sum, two MLP matmuls
    let per_layer_macs = 4 * t * d * d + 2 * t * t * d + 2 * t * d * h;
    2 * per_layer_macs * config.num_layers as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_frame(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            token_count: 5,
            model_dim: 4,
            num_heads: 1,
            mlp_ratio: 2.0,
            ln_eps: 1e-5,
            seed: 11,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = EncoderConfig::default();
        let a = Encoder::new(cfg.clone()).unwrap();
        let b = Encoder::new(cfg.clone()).unwrap();
        assert_eq!(a.layer_checksum(0), b.layer_checksum(0));
        let c = Encoder::new(EncoderConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.layer_checksum(0), c.layer_checksum(0));
    }

    #[test]
    fn head_dim_arithmetic() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.head_dim(), 16);
        assert_eq!(cfg.mlp_hidden(), 256);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            EncoderConfig {
                num_heads: 3,
                ..EncoderConfig::default()
            },
            EncoderConfig {
                num_layers: 0,
                ..EncoderConfig::default()
            },
            EncoderConfig {
                mlp_ratio: 0.0,
                ..EncoderConfig::default()
            },
            EncoderConfig {
                ln_eps: 0.0,
                ..EncoderConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(Encoder::new(cfg), Err(StcError::Config(_))));
        }
    }

    #[test]
    fn zero_weights_leave_input_unchanged() {
        let cfg = EncoderConfig {
            num_layers: 3,
            token_count: 8,
            model_dim: 8,
            num_heads: 2,
            ..Default::default()
        };
        let enc = Encoder::zeroed(cfg).unwrap();
        let x = random_frame(3, 8, 8);
        assert_eq!(enc.full_forward(&x).unwrap().output, x);
    }

    #[test]
    fn output_is_last_trace_and_chained() {
        let cfg = EncoderConfig {
            num_layers: 3,
            token_count: 8,
            model_dim: 8,
            num_heads: 2,
            ..Default::default()
        };
        let enc = Encoder::new(cfg).unwrap();
        let x = random_frame(4, 8, 8);
        let res = enc.full_forward(&x).unwrap();
        assert_eq!(res.traces.len(), 3);
        assert_eq!(res.output, res.traces[2].m);
        // feeding trace l's M into block l+1 reproduces trace l+1
        for l in 0..2 {
            let mut f = FlopCounter::new();
            let next = enc.blocks()[l + 1]
                .forward(&res.traces[l].m, &mut f)
                .unwrap();
            assert_eq!(next, res.traces[l + 1]);
        }
        let again = enc.full_forward(&x).unwrap();
        assert_eq!(again.output, res.output);
    }

    #[test]
    fn rejects_wrong_frame_shape() {
        let enc = Encoder::new(tiny()).unwrap();
        assert!(matches!(
            enc.full_forward(&Matrix::zeros(4, 4)),
            Err(StcError::Shape { .. })
        ));
    }

    /// Scalar re-derivation of one block with explicit loops.
    fn dense_oracle(enc: &Encoder, x: &Matrix) -> Vec<Vec<f64>> {
        let b = &enc.blocks()[0];
        let (t, d) = x.shape();
        let eps = f64::from(enc.config().ln_eps);
        let ln = |rows: &Vec<Vec<f64>>, n: &Norm| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    let mean = r.iter().sum::<f64>() / d as f64;
                    let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                    r.iter()
                        .enumerate()
                        .map(|(j, v)| {
                            (v - mean) / (var + eps).sqrt() * f64::from(n.gamma[j])
                                + f64::from(n.beta[j])
                        })
                        .collect()
                })
                .collect()
        };
        let lin = |rows: &Vec<Vec<f64>>, l: &Linear| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    (0..l.weight.cols())
                        .map(|o| {
                            f64::from(l.bias[o])
                                + r.iter()
                                    .enumerate()
                                    .map(|(i, v)| v * f64::from(l.weight.get(i, o)))
                                    .sum::<f64>()
                        })
                        .collect()
                })
                .collect()
        };
        let xs: Vec<Vec<f64>> = (0..t)
            .map(|i| x.row(i).iter().map(|&v| f64::from(v)).collect())
            .collect();
        let h = ln(&xs, &b.norm1);
        let (q, k, v) = (lin(&h, &b.query), lin(&h, &b.key), lin(&h, &b.value));
        let mut attn = vec![vec![0.0; d]; t];
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..t {
                let p = logits[j].exp() / z;
                for c in 0..d {
                    attn[i][c] += p * v[j][c];
                }
            }
        }
        let o = lin(&attn, &b.output);
        let a: Vec<Vec<f64>> = xs
            .iter()
            .zip(&o)
            .map(|(x, o)| x.iter().zip(o).map(|(p, q)| p + q).collect())
            .collect();
        let h2 = ln(&a, &b.norm2);
        let mut hidden = lin(&h2, &b.fc1);
        for r in &mut hidden {
            for v in r.iter_mut() {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                *v = 0.5 * *v * (1.0 + (c * (*v + 0.044715 * v.powi(3))).tanh());
            }
        }
        let m = lin(&hidden, &b.fc2);
        a.iter()
            .zip(&m)
            .map(|(a, m)| a.iter().zip(m).map(|(p, q)| p + q).collect())
            .collect()
    }

    #[test]
    fn tiny_encoder_matches_dense_oracle() {
        let enc = Encoder::new(tiny()).unwrap();
        let x = random_frame(9, 5, 4);
        let got = enc.full_forward(&x).unwrap().output;
        let want = dense_oracle(&enc, &x);
        for (i, row) in want.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                assert!((f64::from(got.get(i, j)) - w).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn flop_model_matches_instrumented_counter() {
        let desk = EncoderConfig::default();
        let enc = Encoder::new(desk.clone()).unwrap();
        let res = enc.full_forward(&random_frame(1, 64, 64)).unwrap();
        assert_eq!(res.flops, flop_count_full(&desk));

        for (l, t, d, h, r) in [(1, 5, 4, 1, 2.0), (2, 7, 12, 3, 1.5), (3, 16, 8, 2, 4.0)] {
            let cfg = EncoderConfig {
                num_layers: l,
                token_count: t,
                model_dim: d,
                num_heads: h,
                mlp_ratio: r,
                ..desk.clone()
            };
            let enc = Encoder::new(cfg.clone()).unwrap();
            let res = enc.full_forward(&random_frame(2, t, d)).unwrap();
            assert_eq!(res.flops, flop_count_full(&cfg));
        }
    }

    #[test]
    fn flop_model_scaling() {
        let base = EncoderConfig::default();
        let doubled = EncoderConfig {
            num_layers: 12,
            ..base.clone()
        };
        assert_eq!(flop_count_full(&doubled), 2 * flop_count_full(&base));

        // T -> 2T: attention term x4, linear terms x2
        let t = base.token_count as u64;
        let d = base.model_dim as u64;
        let h = base.mlp_hidden() as u64;
        let l = base.num_layers as u64;
        let attn = 2 * 2 * t * t * d * l;
        let linear = flop_count_full(&base) - attn;
        let wide = EncoderConfig {
            token_count: 128,
            ..base.clone()
        };
        assert_eq!(flop_count_full(&wide), 4 * attn + 2 * linear);
        assert_eq!(linear, 2 * l * (4 * t * d * d + 2 * t * d * h));
    }

    #[test]
    fn execution_policies_bitwise_equal() {
        let enc = Encoder::new(EncoderConfig::default()).unwrap();
        let x = random_frame(5, 64, 64);
        let seq = enc
            .clone()
            .with_execution(Execution::Sequential)
            .full_forward(&x)
            .unwrap();
        let par = enc
            .with_execution(Execution::Parallel)
            .full_forward(&x)
            .unwrap();
        assert_eq!(seq.output, par.output);
    }
}
