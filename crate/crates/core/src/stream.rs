//! Synthetic correlated frame streams and inter-frame similarity analysis.
//!
//! Each pixel follows an AR(1) process with unit marginal variance; `rho`
//! sets how similar consecutive frames are. Labeled streams add a fixed
//! per-class stripe pattern on top of the noise.
//!
//! `RFS1` layout (little-endian): magic `RFS1`; `n_frames`, `height`,
//! `width`, `channels`, `n_classes` as `u64`; `rho` as `f64`; one `u32` label
//! per frame when `n_classes > 0`; then every frame's `f32` values in HWC
//! order, frame after frame.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, DenseMatrix, FeatureMap, Matrix};

pub const STREAM_MAGIC: &[u8; 4] = b"RFS1";

/// Peak amplitude of the class stripe patterns.
pub const CLASS_AMPLITUDE: f64 = 1.0;

const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameStream {
    n_frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    n_classes: usize,
    rho: f64,
    labels: Option<Vec<usize>>,
    data: Vec<f32>,
}

impl FrameStream {
    pub fn new(
        (height, width, channels): (usize, usize, usize),
        n_classes: usize,
        rho: f64,
        labels: Option<Vec<usize>>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let frame_len = height * width * channels;
        if frame_len == 0 {
            return Err(Error::shape("frames must have at least one pixel"));
        }
        if data.len() % frame_len != 0 {
            return Err(Error::shape(format!(
                "{} values do not split into {height}x{width}x{channels} frames",
                data.len()
            )));
        }
        let n_frames = data.len() / frame_len;
        match &labels {
            Some(l) if l.len() != n_frames => {
                return Err(Error::shape(format!(
                    "{} labels for {n_frames} frames",
                    l.len()
                )))
            }
            Some(l) if l.iter().any(|&c| c >= n_classes) => {
                return Err(Error::arg(format!(
                    "label out of range for {n_classes} classes"
                )))
            }
            None if n_classes > 0 => {
                return Err(Error::arg("labeled stream is missing labels"));
            }
            _ => {}
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stream contains non-finite values".into()));
        }
        Ok(FrameStream {
            n_frames,
            height,
            width,
            channels,
            n_classes,
            rho,
            labels,
            data,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_map(&self, t: usize) -> FeatureMap {
        FeatureMap::new(
            self.height,
            self.width,
            self.channels,
            self.frame(t).to_vec(),
        )
        .expect("frame length matches shape")
    }

    /// One flattened frame per row.
    pub fn to_matrix(&self) -> DenseMatrix {
        Matrix::new(self.n_frames, self.frame_len(), self.data.clone()).expect("consistent stream")
    }

    /// Frames `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_frames {
            return Err(Error::arg(format!(
                "frame range {start}..{end} outside 0..{}",
                self.n_frames
            )));
        }
        let n = self.frame_len();
        FrameStream::new(
            self.shape(),
            self.n_classes,
            self.rho,
            self.labels.as_ref().map(|l| l[start..end].to_vec()),
            self.data[start * n..end * n].to_vec(),
        )
    }

    /// Repeats every frame `k` times in place.
    pub fn duplicated(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::arg("duplication factor must be >= 1"));
        }
        let mut data = Vec::with_capacity(self.data.len() * k);
        for t in 0..self.n_frames {
            for _ in 0..k {
                data.extend_from_slice(self.frame(t));
            }
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| l.iter().flat_map(|&c| std::iter::repeat_n(c, k)).collect());
        FrameStream::new(self.shape(), self.n_classes, self.rho, labels, data)
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(STREAM_MAGIC)?;
        for v in [
            self.n_frames,
            self.height,
            self.width,
            self.channels,
            self.n_classes,
        ] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        out.write_all(&self.rho.to_le_bytes())?;
        if let Some(labels) = &self.labels {
            for &l in labels {
                out.write_all(&(l as u32).to_le_bytes())?;
            }
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(input, &mut magic)?;
        if &magic != STREAM_MAGIC {
            return Err(format_err(format!("bad magic {magic:?}")));
        }
        let mut header = [0u64; 5];
        for h in &mut header {
            let mut b = [0u8; 8];
            read_exact(input, &mut b)?;
            *h = u64::from_le_bytes(b);
        }
        let [n_frames, height, width, channels, n_classes] = header;
        let mut b = [0u8; 8];
        read_exact(input, &mut b)?;
        let rho = f64::from_le_bytes(b);
        let n = [height, width, channels]
            .iter()
            .try_fold(n_frames, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| format_err("implausible dimensions".into()))?;
        if n_frames > MAX_ELEMENTS || n_classes > u32::MAX as u64 {
            return Err(format_err("implausible header".into()));
        }
        let labels = if n_classes > 0 {
            let mut bytes = vec![0u8; n_frames as usize * 4];
            read_exact(input, &mut bytes)?;
            Some(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
                    .collect(),
            )
        } else {
            None
        };
        let mut bytes = vec![0u8; n as usize * 4];
        read_exact(input, &mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        FrameStream::new(
            (height as usize, width as usize, channels as usize),
            n_classes as usize,
            rho,
            labels,
            data,
        )
        .map_err(|e| format_err(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

fn format_err(reason: String) -> Error {
    Error::Format {
        kind: "RFS1",
        reason,
    }
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            format_err("truncated file".into())
        } else {
            Error::Io(e)
        }
    })
}

/// Stripe pattern of class `c`: a sinusoid whose orientation is `c·π/n`,
/// with a per-channel phase. Depends only on the shape, so streams drawn
/// with different seeds share their class signal.
pub fn class_pattern(c: usize, n_classes: usize, (h, w, ch): (usize, usize, usize)) -> Vec<f32> {
    let theta = PI * c as f64 / n_classes.max(1) as f64;
    let period = (h.max(w) as f64 / 2.0).max(2.0);
    let (cos, sin) = (theta.cos(), theta.sin());
    let mut out = Vec::with_capacity(h * w * ch);
    for i in 0..h {
        for j in 0..w {
            let phase = 2.0 * PI * (i as f64 * cos + j as f64 * sin) / period;
            for k in 0..ch {
                let v = CLASS_AMPLITUDE * (phase + k as f64 * PI / 3.0).sin();
                out.push(v as f32);
            }
        }
    }
    out
}

/// Labels from `2·n_classes` contiguous segments, segment `s` carrying class
/// `s mod n_classes`. The last segment absorbs the remainder.
pub fn segment_labels(n_frames: usize, n_classes: usize) -> Vec<usize> {
    let segments = 2 * n_classes;
    let len = (n_frames / segments).max(1);
    (0..n_frames)
        .map(|t| (t / len).min(segments - 1) % n_classes)
        .collect()
}

/// Draws an AR(1) stream: `frame_0 ~ N(0, 1)` per pixel and
/// `frame_t = rho·frame_(t-1) + sqrt(1 − rho²)·N(0, 1)`. With `n_classes > 0`
/// the class pattern of each frame's label is added to its noise.
pub fn gen_stream(
    n_frames: usize,
    shape: (usize, usize, usize),
    rho: f64,
    n_classes: usize,
    seed: u64,
) -> Result<FrameStream> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::arg(format!("rho = {rho} outside [0, 1]")));
    }
    if n_frames == 0 {
        return Err(Error::arg("stream needs at least one frame"));
    }
    let n = shape.0 * shape.1 * shape.2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let innovation = (1.0 - rho * rho).sqrt();
    let mut state: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let labels = (n_classes > 0).then(|| segment_labels(n_frames, n_classes));
    let patterns: Vec<Vec<f32>> = (0..n_classes)
        .map(|c| class_pattern(c, n_classes, shape))
        .collect();
    let mut data = Vec::with_capacity(n_frames * n);
    for t in 0..n_frames {
        if t > 0 {
            for s in &mut state {
                let e: f64 = StandardNormal.sample(&mut rng);
                *s = rho * *s + innovation * e;
            }
        }
        match &labels {
            Some(l) => data.extend(
                state
                    .iter()
                    .zip(&patterns[l[t]])
                    .map(|(&s, &p)| s as f32 + p),
            ),
            None => data.extend(state.iter().map(|&s| s as f32)),
        }
    }
    FrameStream::new(shape, n_classes, rho, labels, data)
}

/// Symmetric matrix of pairwise cosine similarities with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Matrix<f64>);

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn matrix(&self) -> &Matrix<f64> {
        &self.0
    }

    /// Mean similarity over all pairs `(i, i + lag)`.
    pub fn mean_at_lag(&self, lag: usize) -> Option<f64> {
        let n = self.n();
        if lag == 0 || lag >= n {
            return None;
        }
        let total: f64 = (0..n - lag).map(|i| self.get(i, i + lag)).sum();
        Some(total / (n - lag) as f64)
    }

    /// Mean over all off-diagonal entries.
    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.n();
        let total: f64 = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .sum();
        total / (n * (n - 1) / 2) as f64
    }

    /// Comma-separated rows, full precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in self.0.row_iter() {
            let line: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

/// Pairwise cosine similarity between the rows of `frames`.
pub fn analyze_similarity(frames: &DenseMatrix) -> Result<SimilarityMatrix> {
    let n = frames.rows();
    if n < 2 {
        return Err(Error::arg(format!("need at least 2 frames, got {n}")));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| match i.cmp(&j) {
                    std::cmp::Ordering::Equal => {
                        cosine_similarity(frames.row(i), frames.row(i)).map(|_| 1.0)
                    }
                    std::cmp::Ordering::Less => cosine_similarity(frames.row(i), frames.row(j)),
                    std::cmp::Ordering::Greater => cosine_similarity(frames.row(j), frames.row(i)),
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(SimilarityMatrix(Matrix::from_rows(&rows)?))
}
