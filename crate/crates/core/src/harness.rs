//! Pipeline wiring, measurement and reports.
//!
//! A run encodes every frame (selectively when the cacher is enabled),
//! optionally checks the result against a full forward pass, prunes the
//! encoded tokens, and aggregates FLOP, latency and prefill-cost ratios.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cacher::{
    CacheInterval, CacherConfig, CacherState, FrameStats, ReuseScope, SimilarityBasis,
};
use crate::error::{Result, StcError};
use crate::exec::Execution;
use crate::numerics::{cosine_similarity, matrix_cosine, Matrix, SimilarityMetric};
use crate::pruner::{prefill_cost_model, PruneResult, PrunerConfig, PrunerState};
use crate::stream::{chunk_stream, generate_stream, load_tensor_file, StreamConfig};
use crate::vit::{flop_count_full, Encoder, EncoderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

impl std::str::FromStr for OutputFormat {
    type Err = StcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(OutputFormat::Json),
            "csv" => Ok(OutputFormat::Csv),
            other => Err(StcError::Config(format!("unknown output format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamSource {
    Synthetic(StreamConfig),
    File(PathBuf),
}

/// Flat key-value form of [`RunConfig`], as read from and echoed to JSON.
/// Every key is optional; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlatConfig {
    pub num_layers: usize,
    pub token_count: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub ln_eps: f32,
    pub encoder_seed: u64,

    pub cacher_enabled: bool,
    pub cache_interval: CacheInterval,
    pub reuse_ratio: f64,
    pub basis: SimilarityBasis,
    pub metric: SimilarityMetric,
    pub reuse_scope: ReuseScope,

    pub pruner_enabled: bool,
    pub prune_ratio: f64,
    pub alpha: f64,
    pub window: usize,

    pub stream_file: Option<PathBuf>,
    pub num_frames: usize,
    pub redundancy: f64,
    pub drift: f64,
    pub event_period: usize,
    pub event_tokens: usize,
    pub background: f64,
    pub stream_seed: u64,

    pub chunk_length: usize,
    pub format: OutputFormat,
    pub output: Option<PathBuf>,
    pub fidelity: bool,
    pub timing_repeats: usize,
}

impl Default for FlatConfig {
    fn default() -> Self {
        RunConfig::default().to_flat()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub cacher: Option<CacherConfig>,
    pub pruner: Option<PrunerConfig>,
    pub source: StreamSource,
    pub chunk_length: usize,
    pub format: OutputFormat,
    pub output: Option<PathBuf>,
    /// Run the full forward pass per frame as a fidelity oracle.
    pub fidelity: bool,
    /// Warm repetitions per latency measurement; 0 skips timing.
    pub timing_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        RunConfig {
            source: StreamSource::Synthetic(StreamConfig {
                token_count: encoder.token_count,
                dim: encoder.model_dim,
                ..StreamConfig::default()
            }),
            encoder,
            cacher: Some(CacherConfig::default()),
            pruner: Some(PrunerConfig::default()),
            chunk_length: 4,
            format: OutputFormat::Json,
            output: None,
            fidelity: true,
            timing_repeats: 5,
        }
    }
}

impl RunConfig {
    pub fn from_flat(flat: FlatConfig) -> Result<Self> {
        let encoder = EncoderConfig {
            num_layers: flat.num_layers,
            token_count: flat.token_count,
            model_dim: flat.model_dim,
            num_heads: flat.num_heads,
            mlp_ratio: flat.mlp_ratio,
            ln_eps: flat.ln_eps,
            seed: flat.encoder_seed,
        };
        let cacher = flat.cacher_enabled.then_some(CacherConfig {
            cache_interval: flat.cache_interval,
            reuse_ratio: flat.reuse_ratio,
            basis: flat.basis,
            metric: flat.metric,
            reuse_scope: flat.reuse_scope,
        });
        let pruner = flat.pruner_enabled.then_some(PrunerConfig {
            prune_ratio: flat.prune_ratio,
            alpha: flat.alpha,
            window: flat.window,
        });
        let source = match flat.stream_file {
            Some(path) => StreamSource::File(path),
            None => StreamSource::Synthetic(StreamConfig {
                num_frames: flat.num_frames,
                token_count: flat.token_count,
                dim: flat.model_dim,
                redundancy: flat.redundancy,
                drift: flat.drift,
                event_period: flat.event_period,
                event_tokens: flat.event_tokens,
                background: flat.background,
                seed: flat.stream_seed,
            }),
        };
        let config = RunConfig {
            encoder,
            cacher,
            pruner,
            source,
            chunk_length: flat.chunk_length,
            format: flat.format,
            output: flat.output,
            fidelity: flat.fidelity,
            timing_repeats: flat.timing_repeats,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn to_flat(&self) -> FlatConfig {
        let cacher = self.cacher.clone().unwrap_or_default();
        let pruner = self.pruner.clone().unwrap_or_default();
        let (stream_file, stream) = match &self.source {
            StreamSource::File(p) => (Some(p.clone()), StreamConfig::default()),
            StreamSource::Synthetic(s) => (None, s.clone()),
        };
        FlatConfig {
            num_layers: self.encoder.num_layers,
            token_count: self.encoder.token_count,
            model_dim: self.encoder.model_dim,
            num_heads: self.encoder.num_heads,
            mlp_ratio: self.encoder.mlp_ratio,
            ln_eps: self.encoder.ln_eps,
            encoder_seed: self.encoder.seed,
            cacher_enabled: self.cacher.is_some(),
            cache_interval: cacher.cache_interval,
            reuse_ratio: cacher.reuse_ratio,
            basis: cacher.basis,
            metric: cacher.metric,
            reuse_scope: cacher.reuse_scope,
            pruner_enabled: self.pruner.is_some(),
            prune_ratio: pruner.prune_ratio,
            alpha: pruner.alpha,
            window: pruner.window,
            stream_file,
            num_frames: stream.num_frames,
            redundancy: stream.redundancy,
            drift: stream.drift,
            event_period: stream.event_period,
            event_tokens: stream.event_tokens,
            background: stream.background,
            stream_seed: stream.seed,
            chunk_length: self.chunk_length,
            format: self.format,
            output: self.output.clone(),
            fidelity: self.fidelity,
            timing_repeats: self.timing_repeats,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let flat: FlatConfig =
            serde_json::from_str(text).map_err(|e| StcError::Config(format!("config: {e}")))?;
        RunConfig::from_flat(flat)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        RunConfig::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if let Some(c) = &self.cacher {
            c.validate()?;
        }
        if let Some(p) = &self.pruner {
            p.validate()?;
        }
        if let StreamSource::Synthetic(s) = &self.source {
            s.validate()?;
        }
        if self.chunk_length == 0 {
            return Err(StcError::Config("chunk_length must be >= 1".into()));
        }
        Ok(())
    }

    /// `run` needs something to compress.
    pub fn validate_for_run(&self) -> Result<()> {
        self.validate()?;
        if self.cacher.is_none() && self.pruner.is_none() {
            return Err(StcError::Config(
                "at least one of cacher_enabled / pruner_enabled must be true".into(),
            ));
        }
        Ok(())
    }

    /// Generates or loads the frames and checks them against the encoder.
    pub fn load_frames(&self) -> Result<Vec<Matrix>> {
        let frames = match &self.source {
            StreamSource::Synthetic(s) => generate_stream(s)?.frames,
            StreamSource::File(path) => load_tensor_file(path)?,
        };
        let want = (self.encoder.token_count, self.encoder.model_dim);
        if let Some(f) = frames.iter().find(|f| f.shape() != want) {
            return Err(StcError::Config(format!(
                "stream frames are {:?} but the encoder expects {:?}",
                f.shape(),
                want
            )));
        }
        Ok(frames)
    }
}

/// Everything produced for one frame.
#[derive(Debug, Clone)]
pub struct FrameOutcome {
    pub encoded: Matrix,
    pub cacher_stats: Option<FrameStats>,
    pub pruned: Option<PruneResult>,
    pub vit_flops: u64,
}

/// Causal per-stream pipeline: optional cacher, then optional pruner.
#[derive(Debug, Clone)]
pub struct Pipeline<'a> {
    encoder: &'a Encoder,
    cacher: Option<CacherState<'a>>,
    pruner: Option<PrunerState>,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        encoder: &'a Encoder,
        cacher: Option<&CacherConfig>,
        pruner: Option<&PrunerConfig>,
    ) -> Result<Self> {
        Ok(Pipeline {
            encoder,
            cacher: cacher
                .map(|c| CacherState::new(encoder, c.clone()))
                .transpose()?,
            pruner: pruner.map(|p| PrunerState::new(p.clone())).transpose()?,
        })
    }

    pub fn push_frame(&mut self, frame: &Matrix) -> Result<FrameOutcome> {
        let (encoded, cacher_stats, vit_flops) = match &mut self.cacher {
            Some(state) => {
                let (out, stats) = state.process_frame(frame)?;
                let flops = stats.flops;
                (out, Some(stats), flops)
            }
            None => {
                let res = self.encoder.full_forward(frame)?;
                (res.output, None, res.flops)
            }
        };
        let pruned = match &mut self.pruner {
            Some(state) => Some(state.process_frame(&encoded)?),
            None => None,
        };
        Ok(FrameOutcome {
            encoded,
            cacher_stats,
            pruned,
            vit_flops,
        })
    }
}

/// Runs the pipeline over `frames` in order.
pub fn process_stream(
    encoder: &Encoder,
    frames: &[Matrix],
    cacher: Option<&CacherConfig>,
    pruner: Option<&PrunerConfig>,
) -> Result<Vec<FrameOutcome>> {
    let mut pipeline = Pipeline::new(encoder, cacher, pruner)?;
    frames.iter().map(|f| pipeline.push_frame(f)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame_index: usize,
    pub chunk_index: usize,
    pub is_reference: bool,
    pub dynamic_k: usize,
    pub retained_k: usize,
    pub flops_vit: u64,
    pub fidelity_cosine: Option<f64>,
    pub fidelity_max_abs_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub vit_flop_ratio: f64,
    pub vit_wall_time_full_ms: Option<f64>,
    pub vit_wall_time_selective_ms: Option<f64>,
    pub prefill_cost_ratio: f64,
    pub mean_fidelity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: FlatConfig,
    pub frames: Vec<FrameMetrics>,
    pub aggregate: AggregateMetrics,
}

/// Field names whose values depend on the clock.
pub const WALL_TIME_FIELDS: [&str; 2] = ["vit_wall_time_full_ms", "vit_wall_time_selective_ms"];

pub fn run_pipeline(config: &RunConfig) -> Result<MetricsReport> {
    config.validate_for_run()?;
    let encoder = Encoder::new(config.encoder.clone())?;
    let frames = config.load_frames()?;
    run_on_frames(config, &encoder, &frames)
}

/// [`run_pipeline`] with a prebuilt encoder and stream.
pub fn run_on_frames(
    config: &RunConfig,
    encoder: &Encoder,
    frames: &[Matrix],
) -> Result<MetricsReport> {
    let token_count = config.encoder.token_count;
    let exec = encoder.execution();
    let mut pipeline = Pipeline::new(encoder, config.cacher.as_ref(), config.pruner.as_ref())?;
    let mut rows = Vec::with_capacity(frames.len());
    let mut fidelities = Vec::new();

    for (chunk_index, chunk) in chunk_stream(frames, config.chunk_length)?
        .into_iter()
        .enumerate()
    {
        for frame in chunk {
            let (outcome, oracle) = if config.fidelity {
                let (o, full) = exec.join(
                    || pipeline.push_frame(frame),
                    || encoder.full_forward(frame),
                );
                (o?, Some(full?.output))
            } else {
                (pipeline.push_frame(frame)?, None)
            };
            let (fidelity_cosine, fidelity_max_abs_err) = match &oracle {
                Some(full) => (
                    Some(matrix_cosine(&outcome.encoded, full)),
                    Some(outcome.encoded.max_abs_diff(full)),
                ),
                None => (None, None),
            };
            if let Some(c) = fidelity_cosine {
                fidelities.push(c);
            }
            let stats = outcome.cacher_stats.as_ref();
            rows.push(FrameMetrics {
                frame_index: rows.len() + 1,
                chunk_index,
                is_reference: stats.is_none_or(|s| s.is_reference),
                dynamic_k: stats.map_or(token_count, |s| s.dynamic_count),
                retained_k: outcome
                    .pruned
                    .as_ref()
                    .map_or(token_count, |p| p.retained_indices.len()),
                flops_vit: outcome.vit_flops,
                fidelity_cosine,
                fidelity_max_abs_err,
            });
        }
    }

    let full_flops = flop_count_full(&config.encoder) as f64 * rows.len() as f64;
    let vit_flops: f64 = rows.iter().map(|r| r.flops_vit as f64).sum();
    let prefill_full: f64 = rows.iter().map(|_| prefill_cost_model(token_count)).sum();
    let prefill_kept: f64 = rows.iter().map(|r| prefill_cost_model(r.retained_k)).sum();
    let (full_ms, selective_ms) = if config.timing_repeats > 0 {
        let t = time_vit_paths(
            encoder,
            frames,
            config.cacher.as_ref(),
            config.timing_repeats,
        )?;
        (Some(t.full_ms), Some(t.compressed_ms))
    } else {
        (None, None)
    };
    let aggregate = AggregateMetrics {
        vit_flop_ratio: if full_flops > 0.0 {
            vit_flops / full_flops
        } else {
            1.0
        },
        vit_wall_time_full_ms: full_ms,
        vit_wall_time_selective_ms: selective_ms,
        prefill_cost_ratio: if prefill_full > 0.0 {
            prefill_kept / prefill_full
        } else {
            1.0
        },
        mean_fidelity: (!fidelities.is_empty())
            .then(|| fidelities.iter().sum::<f64>() / fidelities.len() as f64),
    };
    Ok(MetricsReport {
        config: config.to_flat(),
        frames: rows,
        aggregate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VitTimings {
    /// Median wall time of encoding the stream with full forward passes.
    pub full_ms: f64,
    /// Median wall time of the configured encoder path (cacher if enabled).
    pub compressed_ms: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    }
}

fn time_ms<T>(f: impl FnOnce() -> Result<T>) -> Result<f64> {
    let start = Instant::now();
    std::hint::black_box(f()?);
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// Median of `repeats` timings of each encoder path, after one warm-up.
pub fn time_vit_paths(
    encoder: &Encoder,
    frames: &[Matrix],
    cacher: Option<&CacherConfig>,
    repeats: usize,
) -> Result<VitTimings> {
    let full_pass = || -> Result<()> {
        for f in frames {
            std::hint::black_box(encoder.full_forward(f)?);
        }
        Ok(())
    };
    let compressed_pass = || -> Result<()> {
        match cacher {
            Some(cfg) => {
                let mut state = CacherState::new(encoder, cfg.clone())?;
                for f in frames {
                    std::hint::black_box(state.process_frame(f)?);
                }
                Ok(())
            }
            None => full_pass(),
        }
    };
    full_pass()?;
    compressed_pass()?;
    let mut full = Vec::with_capacity(repeats);
    let mut compressed = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        full.push(time_ms(full_pass)?);
        compressed.push(time_ms(compressed_pass)?);
    }
    Ok(VitTimings {
        full_ms: median(&mut full),
        compressed_ms: median(&mut compressed),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRedundancy {
    pub layer_index: usize,
    pub mean_adjacent_cosine: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyProfile {
    pub stride: usize,
    pub layers: Vec<LayerRedundancy>,
}

pub fn analyze_redundancy(
    frames: &[Matrix],
    encoder: &Encoder,
    stride: usize,
) -> Result<RedundancyProfile> {
    analyze_redundancy_with(frames, encoder, stride, encoder.execution())
}

/// Per-layer mean over frame pairs `(t, t + stride)` of the mean token-wise
/// cosine similarity between block outputs. Frames are encoded independently
/// under `exec`.
pub fn analyze_redundancy_with(
    frames: &[Matrix],
    encoder: &Encoder,
    stride: usize,
    exec: Execution,
) -> Result<RedundancyProfile> {
    if stride == 0 {
        return Err(StcError::Argument("stride must be >= 1".into()));
    }
    if frames.len() < stride + 1 {
        return Err(StcError::Argument(format!(
            "need at least {} frames for stride {stride}, got {}",
            stride + 1,
            frames.len()
        )));
    }
    // one frame per task; the kernels inside stay sequential
    let inner = encoder.clone().with_execution(Execution::Sequential);
    let encoded = exec.map(frames, |f| {
        inner
            .full_forward(f)
            .map(|r| r.traces.into_iter().map(|t| t.m).collect::<Vec<_>>())
    });
    let encoded: Vec<Vec<Matrix>> = encoded.into_iter().collect::<Result<_>>()?;

    let layers = (0..encoder.blocks().len())
        .map(|l| {
            let sims: Vec<f64> = (0..frames.len() - stride)
                .map(|t| {
                    let (a, b) = (&encoded[t][l], &encoded[t + stride][l]);
                    a.row_iter()
                        .zip(b.row_iter())
                        .map(|(x, y)| cosine_similarity(x, y))
                        .sum::<f64>()
                        / a.rows() as f64
                })
                .collect();
            let n = sims.len() as f64;
            let mean = sims.iter().sum::<f64>() / n;
            let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
            LayerRedundancy {
                layer_index: l,
                mean_adjacent_cosine: mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok(RedundancyProfile { stride, layers })
}

const CSV_HEADER: &str =
    "frame_index,chunk_index,is_reference,dynamic_k,retained_k,flops_vit,fidelity_cosine,fidelity_max_abs_err";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Report text in the requested format.
pub fn render_report(report: &MetricsReport, format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)
                .map_err(|e| StcError::State(format!("serializing report: {e}")))?;
            s.push('\n');
            Ok(s)
        }
        OutputFormat::Csv => {
            let mut s = String::from(CSV_HEADER);
            s.push('\n');
            for r in &report.frames {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    r.frame_index,
                    r.chunk_index,
                    r.is_reference,
                    r.dynamic_k,
                    r.retained_k,
                    r.flops_vit,
                    opt(r.fidelity_cosine),
                    opt(r.fidelity_max_abs_err)
                ));
            }
            let a = &report.aggregate;
            let aggregates = [
                ("vit_flop_ratio", Some(a.vit_flop_ratio)),
                ("vit_wall_time_full_ms", a.vit_wall_time_full_ms),
                ("vit_wall_time_selective_ms", a.vit_wall_time_selective_ms),
                ("prefill_cost_ratio", Some(a.prefill_cost_ratio)),
                ("mean_fidelity", a.mean_fidelity),
            ];
            for (name, v) in aggregates {
                s.push_str(&format!("#agg,{name},{}\n", opt(v)));
            }
            Ok(s)
        }
    }
}

pub fn emit_report(
    report: &MetricsReport,
    format: OutputFormat,
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, render_report(report, format)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    pub repeats: usize,
    pub parallel: bool,
    pub vit_full_ms_median: f64,
    pub vit_compressed_ms_median: f64,
    pub vit_speedup: f64,
    pub vit_flop_ratio: f64,
    pub pruner_ms_median: Option<f64>,
    pub prefill_cost_ratio: f64,
}

/// Latency-focused run: no fidelity oracle, median timings only.
pub fn bench(config: &RunConfig, repeats: usize) -> Result<BenchReport> {
    config.validate()?;
    if repeats == 0 {
        return Err(StcError::Argument("repeats must be >= 1".into()));
    }
    let encoder = Encoder::new(config.encoder.clone())?;
    let frames = config.load_frames()?;
    let timings = time_vit_paths(&encoder, &frames, config.cacher.as_ref(), repeats)?;
    let outcomes = process_stream(&encoder, &frames, config.cacher.as_ref(), None)?;
    let vit_flops: f64 = outcomes.iter().map(|o| o.vit_flops as f64).sum();
    let full = flop_count_full(&config.encoder) as f64 * frames.len() as f64;

    let t = config.encoder.token_count;
    let (pruner_ms_median, prefill_cost_ratio) = match &config.pruner {
        Some(p) => {
            let encoded: Vec<Matrix> = outcomes.into_iter().map(|o| o.encoded).collect();
            let mut samples = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                samples.push(time_ms(|| {
                    let mut state = PrunerState::new(p.clone())?;
                    encoded
                        .iter()
                        .map(|f| state.process_frame(f))
                        .collect::<Result<Vec<_>>>()
                })?);
            }
            let kept = p.retained_count(t);
            (
                Some(median(&mut samples)),
                prefill_cost_model(kept) / prefill_cost_model(t),
            )
        }
        None => (None, 1.0),
    };
    Ok(BenchReport {
        frames: frames.len(),
        repeats,
        parallel: encoder.execution().is_parallel(),
        vit_full_ms_median: timings.full_ms,
        vit_compressed_ms_median: timings.compressed_ms,
        vit_speedup: timings.full_ms / timings.compressed_ms,
        vit_flop_ratio: vit_flops / full,
        pruner_ms_median,
        prefill_cost_ratio,
    })
}
