//! Synthetic token streams, chunking, and the `STC1` tensor file format.
//!
//! Frames are generated directly in token space. Each base token is
//! `√β·b + √(1−β)·g`, where `b` is a unit "scene" direction shared by the
//! whole stream, `g ~ N(0, I/D)` and `β` is [`StreamConfig::background`];
//! rows therefore have unit expected norm. Each later frame keeps
//! `⌊ρ·T⌋` randomly chosen rows from its predecessor (plus `σ·N(0, I/D)`
//! drift) and redraws the rest. Event rows are unit vectors orthogonal to
//! the scene direction, so they differ in direction but not in norm.
//!
//! File layout (little-endian): `b"STC1"`, then `u32` num_frames, `u32` T,
//! `u32` D, then `num_frames·T·D` `f32` values, frame-major then row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StcError};
use crate::numerics::{dot, norm, IndexSet, Matrix};

pub const MAGIC: &[u8; 4] = b"STC1";
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub num_frames: usize,
    pub token_count: usize,
    pub dim: usize,
    /// Fraction of rows carried over from the previous frame.
    pub redundancy: f64,
    /// Noise scale on carried rows, relative to unit-norm tokens.
    pub drift: f64,
    /// Every `event_period`-th frame (1-based) receives an event block;
    /// 0 disables events.
    pub event_period: usize,
    /// Rows per event block.
    pub event_tokens: usize,
    /// Share of each base token's energy along the stream's scene direction.
    pub background: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            num_frames: 16,
            token_count: 64,
            dim: 64,
            redundancy: 0.9,
            drift: 0.01,
            event_period: 4,
            event_tokens: 8,
            background: 0.0,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_frames", self.num_frames),
            ("token_count", self.token_count),
            ("dim", self.dim),
        ] {
            if v == 0 {
                return Err(StcError::Config(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.redundancy) {
            return Err(StcError::Config(format!(
                "redundancy must lie in [0, 1], got {}",
                self.redundancy
            )));
        }
        if !self.drift.is_finite() || self.drift < 0.0 {
            return Err(StcError::Config(format!(
                "drift must be >= 0, got {}",
                self.drift
            )));
        }
        if !(0.0..1.0).contains(&self.background) {
            return Err(StcError::Config(format!(
                "background must lie in [0, 1), got {}",
                self.background
            )));
        }
        if self.event_period > 0 && !(1..=self.token_count).contains(&self.event_tokens) {
            return Err(StcError::Config(format!(
                "event_tokens must lie in [1, {}], got {}",
                self.token_count, self.event_tokens
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStream {
    pub frames: Vec<Matrix>,
    /// Rows overwritten by an event on each frame (empty when none).
    pub planted_event_indices: Vec<IndexSet>,
}

struct Generator {
    rng: ChaCha8Rng,
    dim: usize,
    scene: Vec<f32>,
    background: f64,
}

impl Generator {
    fn gaussian_row(&mut self) -> Vec<f64> {
        let scale = 1.0 / (self.dim as f64).sqrt();
        (0..self.dim)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut self.rng);
                g * scale
            })
            .collect()
    }

    fn base_row(&mut self) -> Vec<f32> {
        let fg = (1.0 - self.background).sqrt();
        let bg = self.background.sqrt();
        self.gaussian_row()
            .into_iter()
            .zip(&self.scene)
            .map(|(g, s)| (fg * g + bg * f64::from(*s)) as f32)
            .collect()
    }

    fn event_row(&mut self) -> Vec<f32> {
        loop {
            let g: Vec<f32> = self.gaussian_row().into_iter().map(|v| v as f32).collect();
            let along = dot(&g, &self.scene);
            let off: Vec<f32> = g
                .iter()
                .zip(&self.scene)
                .map(|(v, s)| (f64::from(*v) - along * f64::from(*s)) as f32)
                .collect();
            let n = norm(&off);
            if n > 1e-6 || self.dim == 1 {
                let n = if n > 0.0 { n } else { 1.0 };
                return off.iter().map(|v| (f64::from(*v) / n) as f32).collect();
            }
        }
    }
}

pub fn generate_stream(config: &StreamConfig) -> Result<SyntheticStream> {
    config.validate()?;
    let (t, d) = (config.token_count, config.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scene = {
        let raw: Vec<f32> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm(&raw).max(f64::MIN_POSITIVE);
        raw.iter().map(|v| (f64::from(*v) / n) as f32).collect()
    };
    let mut gen = Generator {
        rng,
        dim: d,
        scene,
        background: config.background,
    };
    let carried = (config.redundancy * t as f64 + 1e-9).floor() as usize;
    let carried = carried.min(t);
    let drift_scale = config.drift / (d as f64).sqrt();

    let mut frames: Vec<Matrix> = Vec::with_capacity(config.num_frames);
    let mut planted = Vec::with_capacity(config.num_frames);
    for frame_no in 1..=config.num_frames {
        let mut rows: Vec<Vec<f32>> = match frames.last() {
            None => (0..t).map(|_| gen.base_row()).collect(),
            Some(prev) => {
                let mut keep = vec![false; t];
                for i in sample(&mut gen.rng, t, carried) {
                    keep[i] = true;
                }
                (0..t)
                    .map(|i| {
                        if keep[i] {
                            prev.row(i)
                                .iter()
                                .map(|&v| {
                                    let n: f64 = StandardNormal.sample(&mut gen.rng);
                                    (f64::from(v) + drift_scale * n) as f32
                                })
                                .collect()
                        } else {
                            gen.base_row()
                        }
                    })
                    .collect()
            }
        };
        let events = if config.event_period > 0 && frame_no % config.event_period == 0 {
            let start = gen.rng.random_range(0..=t - config.event_tokens);
            for row in &mut rows[start..start + config.event_tokens] {
                *row = gen.event_row();
            }
            IndexSet::new((start..start + config.event_tokens).collect(), t)?
        } else {
            IndexSet::empty()
        };
        frames.push(Matrix::from_rows(&rows)?);
        planted.push(events);
    }
    Ok(SyntheticStream {
        frames,
        planted_event_indices: planted,
    })
}

/// Consecutive, non-overlapping chunks of up to `chunk_len` frames.
pub fn chunk_stream(frames: &[Matrix], chunk_len: usize) -> Result<Vec<&[Matrix]>> {
    if chunk_len == 0 {
        return Err(StcError::Argument("chunk length must be >= 1".into()));
    }
    Ok(frames.chunks(chunk_len).collect())
}

/// Serializes equally shaped frames into `STC1` bytes.
pub fn encode_tensor(frames: &[Matrix]) -> Result<Vec<u8>> {
    let first = frames
        .first()
        .ok_or_else(|| StcError::Argument("cannot write an empty stream".into()))?;
    let (t, d) = first.shape();
    if t == 0 || d == 0 {
        return Err(StcError::Argument(
            "frames must have nonzero dimensions".into(),
        ));
    }
    if frames.iter().any(|f| f.shape() != (t, d)) {
        return Err(StcError::shape("encode_tensor", "frames differ in shape"));
    }
    let header = |v: usize| {
        u32::try_from(v)
            .map_err(|_| StcError::Argument(format!("{v} does not fit a u32 header field")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + frames.len() * t * d * 4);
    out.extend_from_slice(MAGIC);
    for v in [frames.len(), t, d] {
        out.extend_from_slice(&header(v)?.to_le_bytes());
    }
    for f in frames {
        for v in f.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses `STC1` bytes; no partial result on error.
pub fn decode_tensor(bytes: &[u8]) -> Result<Vec<Matrix>> {
    let fail = |offset: usize, detail: String| StcError::Format {
        offset: offset as u64,
        detail,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(
            bytes.len(),
            format!("header needs {HEADER_LEN} bytes"),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let field =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (n, t, d) = (field(0), field(1), field(2));
    for (i, v) in [n, t, d].into_iter().enumerate() {
        if v == 0 {
            return Err(fail(4 + 4 * i, "header dimension is zero".into()));
        }
    }
    let payload = n
        .checked_mul(t)
        .and_then(|v| v.checked_mul(d))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| fail(4, "header dimensions overflow".into()))?;
    let expected = HEADER_LEN + payload;
    if bytes.len() < expected {
        return Err(fail(
            bytes.len(),
            format!("truncated: expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(fail(
            expected,
            format!("{} trailing bytes", bytes.len() - expected),
        ));
    }
    let per_frame = t * d;
    let mut frames = Vec::with_capacity(n);
    for f in 0..n {
        let start = HEADER_LEN + f * per_frame * 4;
        let mut data = Vec::with_capacity(per_frame);
        for (i, chunk) in bytes[start..start + per_frame * 4]
            .chunks_exact(4)
            .enumerate()
        {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(fail(start + 4 * i, "non-finite value".into()));
            }
            data.push(v);
        }
        frames.push(Matrix::new(t, d, data)?);
    }
    Ok(frames)
}

pub fn load_tensor_file(path: impl AsRef<Path>) -> Result<Vec<Matrix>> {
    decode_tensor(&fs::read(path)?)
}

pub fn write_tensor_file(path: impl AsRef<Path>, frames: &[Matrix]) -> Result<()> {
    let bytes = encode_tensor(frames)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Mean over frame pairs `(t, t+1)` of the mean row-wise cosine similarity.
pub fn mean_adjacent_cosine(frames: &[Matrix]) -> f64 {
    if frames.len() < 2 {
        return 1.0;
    }
    let pairs = frames.windows(2).map(|w| {
        let rows = w[0].rows().max(1) as f64;
        w[0].row_iter()
            .zip(w[1].row_iter())
            .map(|(a, b)| crate::numerics::cosine_similarity(a, b))
            .sum::<f64>()
            / rows
    });
    pairs.sum::<f64>() / (frames.len() - 1) as f64
}
