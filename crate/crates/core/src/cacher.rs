//! Cache-aware selective encoder computation.
//!
//! Reference frames get a full forward pass and every block's `K`, `V`, `A`
//! and `M` is cached. On the frames in between, each block
//!
//! 1. normalizes its input and projects keys for all tokens,
//! 2. picks the `k = ⌊T·(1 − reuse_ratio)⌋` tokens least similar to the
//!    reference (the dynamic set),
//! 3. computes queries and values only for those tokens and scatters the
//!    values into the cached value matrix,
//! 4. attends with the fresh queries over the fresh keys and the scattered
//!    values, scattering the post-residual result into the cached `A`,
//! 5. runs the MLP on the dynamic rows and scatters into the cached `M`.
//!
//! The scattered `M` feeds the next block. The cache bank is only written on
//! reference frames.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, StcError};
use crate::numerics::{
    retained_count, rowwise_similarity, top_k_indices, Direction, IndexSet, Matrix,
    SimilarityMetric,
};
use crate::vit::{Encoder, EncoderBlock, EncoderConfig, FlopCounter, LayerTrace};

/// Frames between reference refreshes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheInterval {
    Every(usize),
    /// Only the first frame is a reference.
    Infinite,
}

impl CacheInterval {
    /// Whether 1-based frame `t` refreshes the cache. Frames 1, N+1, 2N+1, …
    pub fn is_reference(self, t: usize) -> bool {
        match self {
            CacheInterval::Every(n) => n > 0 && t.saturating_sub(1).is_multiple_of(n),
            CacheInterval::Infinite => t == 1,
        }
    }
}

impl fmt::Display for CacheInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CacheInterval::Every(n) => write!(f, "{n}"),
            CacheInterval::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for CacheInterval {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CacheInterval::Every(n) => s.serialize_u64(*n as u64),
            CacheInterval::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for CacheInterval {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Frames(u64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Frames(n) => Ok(CacheInterval::Every(n as usize)),
            Repr::Text(s) if matches!(s.as_str(), "inf" | "infinite" | "never") => {
                Ok(CacheInterval::Infinite)
            }
            Repr::Text(s) => Err(serde::de::Error::custom(format!(
                "cache_interval must be a positive integer or \"inf\", got {s:?}"
            ))),
        }
    }
}

/// Which tensor the dynamic-token similarity is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityBasis {
    #[default]
    Key,
    Value,
    /// `LN1(X)`, before any projection.
    Feature,
}

/// Which sub-blocks reuse cached rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReuseScope {
    AttnOnly,
    MlpOnly,
    #[default]
    Both,
}

impl ReuseScope {
    fn reuses_attention(self) -> bool {
        matches!(self, ReuseScope::AttnOnly | ReuseScope::Both)
    }

    fn reuses_mlp(self) -> bool {
        matches!(self, ReuseScope::MlpOnly | ReuseScope::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacherConfig {
    pub cache_interval: CacheInterval,
    /// Fraction of tokens reused from the cache on non-reference frames.
    pub reuse_ratio: f64,
    pub basis: SimilarityBasis,
    pub metric: SimilarityMetric,
    pub reuse_scope: ReuseScope,
}

impl Default for CacherConfig {
    fn default() -> Self {
        CacherConfig {
            cache_interval: CacheInterval::Every(4),
            reuse_ratio: 0.75,
            basis: SimilarityBasis::Key,
            metric: SimilarityMetric::Cosine,
            reuse_scope: ReuseScope::Both,
        }
    }
}

impl CacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cache_interval == CacheInterval::Every(0) {
            return Err(StcError::Config("cache_interval must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.reuse_ratio) {
            return Err(StcError::Config(format!(
                "reuse_ratio must lie in [0, 1), got {}",
                self.reuse_ratio
            )));
        }
        Ok(())
    }

    /// Dynamic tokens per non-reference frame and layer.
    pub fn dynamic_count(&self, token_count: usize) -> usize {
        retained_count(token_count, self.reuse_ratio)
    }
}

/// Reference activations for every encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCacheBank {
    pub traces: Vec<LayerTrace>,
    /// `LN1` of each block's reference input; kept only for the feature basis.
    pub feature_refs: Option<Vec<Matrix>>,
    /// 1-based index of the frame the bank was built from.
    pub reference_frame_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameStats {
    pub frame_index: usize,
    pub is_reference: bool,
    /// Tokens recomputed per layer (`T` on reference frames).
    pub dynamic_count: usize,
    pub flops: u64,
    pub per_layer_dynamic_sets: Vec<IndexSet>,
}

/// Per-block quantities needed before the dynamic set is known.
#[derive(Debug, Clone)]
pub struct LayerPrep {
    pub normed: Matrix,
    pub keys: Matrix,
    /// Full value projection, computed only for the value basis.
    pub values: Option<Matrix>,
}

impl LayerPrep {
    pub fn compute(
        block: &EncoderBlock,
        x: &Matrix,
        basis: SimilarityBasis,
        flops: &mut FlopCounter,
    ) -> Result<Self> {
        let exec = block.execution();
        let normed = block.pre_attention_norm(x)?;
        let keys = block.key.forward(&normed, exec, flops)?;
        let values = match basis {
            SimilarityBasis::Value => Some(block.value.forward(&normed, exec, flops)?),
            _ => None,
        };
        Ok(LayerPrep {
            normed,
            keys,
            values,
        })
    }
}

/// The `k` tokens whose `curr_basis` rows are least similar to
/// `ref_basis`, in ascending index order; ties go to the lower index.
pub fn identify_dynamic_tokens(
    curr_basis: &Matrix,
    ref_basis: &Matrix,
    config: &CacherConfig,
) -> Result<IndexSet> {
    let scores = rowwise_similarity(curr_basis, ref_basis, config.metric)?;
    let k = config.dynamic_count(curr_basis.rows());
    top_k_indices(&scores, k, Direction::Smallest)
}

fn check_cache(cache: &LayerTrace, x: &Matrix) -> Result<()> {
    let shape = x.shape();
    if [&cache.k, &cache.v, &cache.a, &cache.m]
        .iter()
        .any(|m| m.shape() != shape)
    {
        return Err(StcError::State(format!(
            "cached activations do not match a {}x{} layer input",
            shape.0, shape.1
        )));
    }
    Ok(())
}

/// One block on a non-reference frame given a known dynamic set.
///
/// Returns the scattered block output and the FLOPs spent, including the
/// full key projection.
pub fn selective_layer_forward(
    block: &EncoderBlock,
    x: &Matrix,
    cache: &LayerTrace,
    dynamic: &IndexSet,
    config: &CacherConfig,
) -> Result<(Matrix, u64)> {
    let mut flops = FlopCounter::new();
    let prep = LayerPrep::compute(block, x, config.basis, &mut flops)?;
    let out = selective_from_prep(
        block,
        x,
        &prep,
        cache,
        dynamic,
        config.reuse_scope,
        &mut flops,
    )?;
    Ok((out, flops.total()))
}

/// Body of [`selective_layer_forward`] once `LN1(x)` and the keys exist.
pub fn selective_from_prep(
    block: &EncoderBlock,
    x: &Matrix,
    prep: &LayerPrep,
    cache: &LayerTrace,
    dynamic: &IndexSet,
    scope: ReuseScope,
    flops: &mut FlopCounter,
) -> Result<Matrix> {
    check_cache(cache, x)?;
    if dynamic.as_slice().last().is_some_and(|&i| i >= x.rows()) {
        return Err(StcError::Argument("dynamic index out of range".into()));
    }
    let exec = block.execution();
    let all = IndexSet::all(x.rows());
    let fresh_values = |rows: &IndexSet, flops: &mut FlopCounter| -> Result<Matrix> {
        match &prep.values {
            Some(v) => Ok(v.gather_rows(rows)),
            None => block
                .value
                .forward(&prep.normed.gather_rows(rows), exec, flops),
        }
    };

    let attn_rows = if scope.reuses_attention() {
        dynamic
    } else {
        &all
    };
    let queries = block
        .query
        .forward(&prep.normed.gather_rows(attn_rows), exec, flops)?;
    let values = if scope.reuses_attention() {
        let mut scattered = cache.v.clone();
        scattered.scatter_rows(dynamic, &fresh_values(dynamic, flops)?)?;
        scattered
    } else {
        fresh_values(&all, flops)?
    };
    let attended = block.attend(&queries, &prep.keys, &values, flops)?;
    let projected = block.output.forward(&attended, exec, flops)?;
    let fresh_a = x.gather_rows(attn_rows).add(&projected)?;
    let a_bar = if scope.reuses_attention() {
        let mut a = cache.a.clone();
        a.scatter_rows(dynamic, &fresh_a)?;
        a
    } else {
        fresh_a
    };

    if scope.reuses_mlp() {
        let fresh_m = block.mlp_residual(&a_bar.gather_rows(dynamic), flops)?;
        let mut m = cache.m.clone();
        m.scatter_rows(dynamic, &fresh_m)?;
        Ok(m)
    } else {
        block.mlp_residual(&a_bar, flops)
    }
}

/// Per-stream cacher. Frames must arrive in order.
#[derive(Debug, Clone)]
pub struct CacherState<'a> {
    encoder: &'a Encoder,
    config: CacherConfig,
    bank: Option<LayerCacheBank>,
    frames_seen: usize,
}

impl<'a> CacherState<'a> {
    pub fn new(encoder: &'a Encoder, config: CacherConfig) -> Result<Self> {
        config.validate()?;
        Ok(CacherState {
            encoder,
            config,
            bank: None,
            frames_seen: 0,
        })
    }

    pub fn config(&self) -> &CacherConfig {
        &self.config
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn bank(&self) -> Option<&LayerCacheBank> {
        self.bank.as_ref()
    }

    pub fn process_frame(&mut self, frame: &Matrix) -> Result<(Matrix, FrameStats)> {
        self.encoder.check_frame(frame)?;
        let t = self.frames_seen + 1;
        let token_count = frame.rows();
        let layers = self.encoder.blocks().len();

        let bank = match &self.bank {
            Some(bank) if !self.config.cache_interval.is_reference(t) => bank,
            _ => {
                let res = self.encoder.full_forward(frame)?;
                let feature_refs = match self.config.basis {
                    SimilarityBasis::Feature => Some(self.reference_features(frame, &res.traces)?),
                    _ => None,
                };
                self.bank = Some(LayerCacheBank {
                    traces: res.traces,
                    feature_refs,
                    reference_frame_index: t,
                });
                self.frames_seen = t;
                let stats = FrameStats {
                    frame_index: t,
                    is_reference: true,
                    dynamic_count: token_count,
                    flops: res.flops,
                    per_layer_dynamic_sets: vec![IndexSet::all(token_count); layers],
                };
                return Ok((res.output, stats));
            }
        };

        if bank.traces.len() != layers {
            return Err(StcError::State(format!(
                "cache holds {} layers, encoder has {layers}",
                bank.traces.len()
            )));
        }
        let mut flops = FlopCounter::new();
        let mut sets = Vec::with_capacity(layers);
        let mut x = frame.clone();
        for (l, block) in self.encoder.blocks().iter().enumerate() {
            let cache = &bank.traces[l];
            let prep = LayerPrep::compute(block, &x, self.config.basis, &mut flops)?;
            let (current, reference) = match self.config.basis {
                SimilarityBasis::Key => (&prep.keys, &cache.k),
                SimilarityBasis::Value => {
                    (prep.values.as_ref().expect("value basis prep"), &cache.v)
                }
                SimilarityBasis::Feature => {
                    let refs = bank.feature_refs.as_ref().ok_or_else(|| {
                        StcError::State("feature basis without cached reference features".into())
                    })?;
                    (&prep.normed, &refs[l])
                }
            };
            let dynamic = identify_dynamic_tokens(current, reference, &self.config)?;
            x = selective_from_prep(
                block,
                &x,
                &prep,
                cache,
                &dynamic,
                self.config.reuse_scope,
                &mut flops,
            )?;
            sets.push(dynamic);
        }
        self.frames_seen = t;
        let stats = FrameStats {
            frame_index: t,
            is_reference: false,
            dynamic_count: self.config.dynamic_count(token_count),
            flops: flops.total(),
            per_layer_dynamic_sets: sets,
        };
        Ok((x, stats))
    }

    fn reference_features(&self, frame: &Matrix, traces: &[LayerTrace]) -> Result<Vec<Matrix>> {
        self.encoder
            .blocks()
            .iter()
            .enumerate()
            .map(|(l, block)| {
                let input = if l == 0 { frame } else { &traces[l - 1].m };
                block.pre_attention_norm(input)
            })
            .collect()
    }
}

/// Closed-form FLOPs of one non-reference frame.
pub fn flop_count_selective(encoder: &EncoderConfig, cacher: &CacherConfig) -> u64 {
    let t = encoder.token_count as u64;
    let d = encoder.model_dim as u64;
    let h = encoder.mlp_hidden() as u64;
    let k = cacher.dynamic_count(encoder.token_count) as u64;
    let attn_rows = if cacher.reuse_scope.reuses_attention() {
        k
    } else {
        t
    };
    let mlp_rows = if cacher.reuse_scope.reuses_mlp() {
        k
    } else {
        t
    };
    let value_rows = if cacher.basis == SimilarityBasis::Value {
        t
    } else {
        attn_rows
    };
    let per_layer_macs = t * d * d            // keys, every token
        + value_rows * d * d
        + attn_rows * d * d                   // queries
        + 2 * attn_rows * t * d               // scores + weighted sum
        + attn_rows * d * d                   // output projection
        + 2 * mlp_rows * d * h;
    2 * per_layer_macs * encoder.num_layers as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::relative_error;
    use crate::vit::flop_count_full;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn small_encoder() -> Encoder {
        Encoder::new(EncoderConfig {
            num_layers: 3,
            token_count: 16,
            model_dim: 16,
            num_heads: 2,
            seed: 7,
            ..Default::default()
        })
        .unwrap()
    }

    fn frame(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Matrix {
        Matrix::from_fn(t, d, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn reference_schedule() {
        let every4: Vec<usize> = (1..=8)
            .filter(|&t| CacheInterval::Every(4).is_reference(t))
            .collect();
        assert_eq!(every4, vec![1, 5]);
        assert!((1..=8).all(|t| CacheInterval::Every(1).is_reference(t)));
        let inf: Vec<usize> = (1..=8)
            .filter(|&t| CacheInterval::Infinite.is_reference(t))
            .collect();
        assert_eq!(inf, vec![1]);
    }

    #[test]
    fn fresh_state_is_empty() {
        let enc = small_encoder();
        let state = CacherState::new(&enc, CacherConfig::default()).unwrap();
        assert_eq!(state.frames_seen(), 0);
        assert!(state.bank().is_none());
    }

    #[test]
    fn config_validation() {
        let bad_ratio = CacherConfig {
            reuse_ratio: 1.0,
            ..Default::default()
        };
        assert!(bad_ratio.validate().is_err());
        let bad_interval = CacherConfig {
            cache_interval: CacheInterval::Every(0),
            ..Default::default()
        };
        assert!(bad_interval.validate().is_err());
        let inf = CacherConfig {
            cache_interval: CacheInterval::Infinite,
            ..Default::default()
        };
        assert!(inf.validate().is_ok());
    }

    #[test]
    fn interval_serde() {
        let v: CacheInterval = serde_json::from_str("4").unwrap();
        assert_eq!(v, CacheInterval::Every(4));
        let v: CacheInterval = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(v, CacheInterval::Infinite);
        assert!(serde_json::from_str::<CacheInterval>("\"sometimes\"").is_err());
        assert_eq!(
            serde_json::to_string(&CacheInterval::Infinite).unwrap(),
            "\"inf\""
        );
    }

    #[test]
    fn dynamic_count_examples() {
        let cfg = CacherConfig::default();
        assert_eq!(cfg.dynamic_count(196), 49);
        assert_eq!(cfg.dynamic_count(64), 16);
    }

    #[test]
    fn identify_dynamic_tie_and_outlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = CacherConfig::default();
        let m = frame(&mut rng, 8, 4);
        // every row the same vector: all scores tie exactly, lowest indices win
        let flat = Matrix::from_fn(8, 4, |_, c| m.get(0, c));
        assert_eq!(
            identify_dynamic_tokens(&flat, &flat, &cfg)
                .unwrap()
                .as_slice(),
            &[0, 1]
        );

        let mut negated = m.clone();
        for v in negated.row_mut(5) {
            *v = -*v;
        }
        let one = CacherConfig {
            reuse_ratio: 0.875,
            ..Default::default()
        };
        assert_eq!(
            identify_dynamic_tokens(&negated, &m, &one)
                .unwrap()
                .as_slice(),
            &[5]
        );
    }

    #[test]
    fn all_dynamic_equals_full_layer() {
        let enc = small_encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let reference = enc.full_forward(&frame(&mut rng, 16, 16)).unwrap();
        let x = frame(&mut rng, 16, 16);
        for scope in [ReuseScope::Both, ReuseScope::AttnOnly, ReuseScope::MlpOnly] {
            for basis in [
                SimilarityBasis::Key,
                SimilarityBasis::Value,
                SimilarityBasis::Feature,
            ] {
                let cfg = CacherConfig {
                    reuse_scope: scope,
                    basis,
                    ..Default::default()
                };
                let (out, _) = selective_layer_forward(
                    &enc.blocks()[0],
                    &x,
                    &reference.traces[0],
                    &IndexSet::all(16),
                    &cfg,
                )
                .unwrap();
                let mut f = FlopCounter::new();
                let full = enc.blocks()[0].forward(&x, &mut f).unwrap();
                assert!(relative_error(&out, &full.m) < 1e-5);
            }
        }
    }

    #[test]
    fn empty_dynamic_set_is_pure_reuse() {
        let enc = small_encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reference = enc.full_forward(&frame(&mut rng, 16, 16)).unwrap();
        let x = frame(&mut rng, 16, 16);
        let cfg = CacherConfig::default();
        let (out, flops) = selective_layer_forward(
            &enc.blocks()[0],
            &x,
            &reference.traces[0],
            &IndexSet::empty(),
            &cfg,
        )
        .unwrap();
        assert_eq!(out, reference.traces[0].m);
        // only the key projection remains
        assert_eq!(flops, 2 * 16 * 16 * 16);
    }

    #[test]
    fn selective_rows_match_dense_scatter_oracle() {
        let enc = small_encoder();
        let block = &enc.blocks()[1];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reference = enc.full_forward(&frame(&mut rng, 16, 16)).unwrap();
        let cache = &reference.traces[1];
        let x = frame(&mut rng, 16, 16);
        for _ in 0..10 {
            let picks: Vec<usize> = (0..16).filter(|_| rng.random_bool(0.3)).collect();
            let dynamic = IndexSet::new(picks, 16).unwrap();
            let (out, _) =
                selective_layer_forward(block, &x, cache, &dynamic, &CacherConfig::default())
                    .unwrap();

            // dense oracle: full Q/K/V, scatter V into the cached values,
            // attend for every row, keep the dynamic rows
            let mut f = FlopCounter::new();
            let h = block.pre_attention_norm(&x).unwrap();
            let q = block.query.forward(&h, block.execution(), &mut f).unwrap();
            let k = block.key.forward(&h, block.execution(), &mut f).unwrap();
            let v = block.value.forward(&h, block.execution(), &mut f).unwrap();
            let mut v_bar = cache.v.clone();
            v_bar
                .scatter_rows(&dynamic, &v.gather_rows(&dynamic))
                .unwrap();
            let att = block.attend(&q, &k, &v_bar, &mut f).unwrap();
            let a = x
                .add(
                    &block
                        .output
                        .forward(&att, block.execution(), &mut f)
                        .unwrap(),
                )
                .unwrap();
            let m = block.mlp_residual(&a, &mut f).unwrap();

            for i in 0..16 {
                if dynamic.contains(i) {
                    for j in 0..16 {
                        assert!(
                            (out.get(i, j) - m.get(i, j)).abs()
                                <= 1e-5 * m.get(i, j).abs().max(1.0)
                        );
                    }
                } else {
                    assert_eq!(out.row(i), cache.m.row(i));
                }
            }
        }
    }

    #[test]
    fn selective_flops_match_closed_form() {
        let enc = small_encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<Matrix> = (0..3).map(|_| frame(&mut rng, 16, 16)).collect();
        for scope in [ReuseScope::Both, ReuseScope::AttnOnly, ReuseScope::MlpOnly] {
            for basis in [
                SimilarityBasis::Key,
                SimilarityBasis::Value,
                SimilarityBasis::Feature,
            ] {
                for ratio in [0.0, 0.5, 0.75, 0.9] {
                    let cfg = CacherConfig {
                        reuse_scope: scope,
                        basis,
                        reuse_ratio: ratio,
                        ..Default::default()
                    };
                    let mut state = CacherState::new(&enc, cfg.clone()).unwrap();
                    let (_, first) = state.process_frame(&frames[0]).unwrap();
                    assert_eq!(first.flops, flop_count_full(enc.config()));
                    for f in &frames[1..] {
                        let (_, stats) = state.process_frame(f).unwrap();
                        assert_eq!(stats.flops, flop_count_selective(enc.config(), &cfg));
                    }
                }
            }
        }
    }

    #[test]
    fn selective_flops_bounds() {
        let enc_cfg = EncoderConfig::default();
        let full = flop_count_full(&enc_cfg);
        for scope in [ReuseScope::Both, ReuseScope::AttnOnly, ReuseScope::MlpOnly] {
            for basis in [
                SimilarityBasis::Key,
                SimilarityBasis::Value,
                SimilarityBasis::Feature,
            ] {
                let zero = CacherConfig {
                    reuse_ratio: 0.0,
                    reuse_scope: scope,
                    basis,
                    ..Default::default()
                };
                assert_eq!(flop_count_selective(&enc_cfg, &zero), full);
                let mut last = full;
                for ratio in [0.25, 0.5, 0.75, 0.95] {
                    let cfg = CacherConfig {
                        reuse_ratio: ratio,
                        ..zero.clone()
                    };
                    let s = flop_count_selective(&enc_cfg, &cfg);
                    assert!(s < last);
                    last = s;
                }
            }
        }
        // everything reused: just the key projection
        let cfg = CacherConfig {
            reuse_ratio: 0.999,
            ..Default::default()
        };
        let t = 64u64;
        assert_eq!(flop_count_selective(&enc_cfg, &cfg), 2 * 6 * t * 64 * 64);
    }

    #[test]
    fn non_reference_frames_leave_bank_untouched() {
        let enc = small_encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut state = CacherState::new(&enc, CacherConfig::default()).unwrap();
        state.process_frame(&frame(&mut rng, 16, 16)).unwrap();
        let snapshot = state.bank().unwrap().clone();
        for _ in 0..3 {
            let (_, stats) = state.process_frame(&frame(&mut rng, 16, 16)).unwrap();
            assert!(!stats.is_reference);
            assert_eq!(state.bank().unwrap(), &snapshot);
        }
        let (_, stats) = state.process_frame(&frame(&mut rng, 16, 16)).unwrap();
        assert!(stats.is_reference);
        assert_eq!(state.bank().unwrap().reference_frame_index, 5);
    }

    #[test]
    fn rejects_wrong_frame_shape() {
        let enc = small_encoder();
        let mut state = CacherState::new(&enc, CacherConfig::default()).unwrap();
        assert!(state.process_frame(&Matrix::zeros(3, 16)).is_err());
        assert_eq!(state.frames_seen(), 0);
    }

    #[test]
    fn mismatched_cache_is_state_error() {
        let enc = small_encoder();
        let bogus = LayerTrace {
            k: Matrix::zeros(2, 16),
            v: Matrix::zeros(2, 16),
            a: Matrix::zeros(2, 16),
            m: Matrix::zeros(2, 16),
        };
        let err = selective_layer_forward(
            &enc.blocks()[0],
            &Matrix::zeros(16, 16),
            &bogus,
            &IndexSet::empty(),
            &CacherConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, StcError::State(_)));
    }
}
