//! Synthetic moving-shape sequences, the `MSEQ` dataset file, and
//! deterministic batching.
//!
//! `MSEQ` layout (little-endian): magic `MSEQ`, then u32 version (1), N, F,
//! channels, H, W, context_len, horizon_len, then N·F·c·H·W f32 values in
//! sequence-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MSEQ_MAGIC: [u8; 4] = *b"MSEQ";
pub const MSEQ_VERSION: u32 = 1;
pub const MSEQ_HEADER_LEN: usize = 36;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Cross,
    Disk,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Cross, ShapeKind::Disk];

    /// Binary `size × size` sprite, row-major.
    pub fn sprite(self, size: usize) -> Vec<bool> {
        let mut out = vec![false; size * size];
        let c = (size as f64 - 1.0) / 2.0;
        let arm = (size / 3).max(1);
        let lo = (size - arm) / 2;
        for y in 0..size {
            for x in 0..size {
                out[y * size + x] = match self {
                    ShapeKind::Square => true,
                    ShapeKind::Cross => (lo..lo + arm).contains(&x) || (lo..lo + arm).contains(&y),
                    ShapeKind::Disk => {
                        let (dx, dy) = (x as f64 - c, y as f64 - c);
                        dx * dx + dy * dy <= (size as f64 / 2.0).powi(2)
                    }
                };
            }
        }
        out
    }
}

/// Position of a bouncing point on `[0, limit]` after one step of `velocity`.
/// A component that leaves the interval is mirrored back in and its velocity
/// negated.
pub fn bounce_step(pos: f64, velocity: f64, limit: f64) -> (f64, f64) {
    let mut p = pos + velocity;
    let mut v = velocity;
    if limit <= 0.0 {
        return (0.0, v);
    }
    // Large steps may cross the interval more than once.
    loop {
        if p < 0.0 {
            p = -p;
            v = -v;
        } else if p > limit {
            p = 2.0 * limit - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

/// One sprite moving with constant speed and elastic wall bounces.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeTrack {
    pub kind: ShapeKind,
    pub sprite_size: usize,
    /// Exact (sub-pixel) top-left position `(x, y)`.
    pub pos: (f64, f64),
    pub vel: (f64, f64),
}

impl ShapeTrack {
    /// Integer pixel position the sprite is drawn at.
    pub fn pixel_pos(&self) -> (usize, usize) {
        (self.pos.0.round() as usize, self.pos.1.round() as usize)
    }

    pub fn advance(&mut self, frame_size: usize) {
        let limit = (frame_size - self.sprite_size) as f64;
        let (x, vx) = bounce_step(self.pos.0, self.vel.0, limit);
        let (y, vy) = bounce_step(self.pos.1, self.vel.1, limit);
        self.pos = (x, y);
        self.vel = (vx, vy);
    }
}

/// Draws every track into a `size × size` frame; overlaps take the max.
pub fn render_frame(tracks: &[ShapeTrack], size: usize) -> Vec<f64> {
    let mut frame = vec![0.0; size * size];
    for t in tracks {
        let sprite = t.kind.sprite(t.sprite_size);
        let (px, py) = t.pixel_pos();
        for y in 0..t.sprite_size {
            for x in 0..t.sprite_size {
                if sprite[y * t.sprite_size + x] {
                    frame[(py + y) * size + px + x] = 1.0;
                }
            }
        }
    }
    frame
}

/// Renders `frames` frames of the tracks, advancing after each one.
pub fn render_sequence(tracks: &mut [ShapeTrack], size: usize, frames: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames * size * size);
    for _ in 0..frames {
        out.extend(render_frame(tracks, size));
        for t in tracks.iter_mut() {
            t.advance(size);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_sequences: usize,
    pub frames_per_sequence: usize,
    pub frame_size: usize,
    pub num_shapes: usize,
    pub sprite_size: usize,
    pub min_speed: f64,
    pub max_speed: f64,
    pub context_len: usize,
    pub horizon_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_sequences: 8,
            frames_per_sequence: 20,
            frame_size: 16,
            num_shapes: 2,
            sprite_size: 5,
            min_speed: 0.5,
            max_speed: 1.5,
            context_len: 10,
            horizon_len: 10,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_sequences == 0 {
            return bad("num_sequences must be positive".into());
        }
        if self.frame_size < 8 {
            return bad(format!("frame size {} is below the minimum of 8", self.frame_size));
        }
        if self.context_len == 0 || self.horizon_len == 0 {
            return bad("context and horizon must be positive".into());
        }
        if self.frames_per_sequence < self.context_len + self.horizon_len {
            return bad(format!(
                "{} frames cannot hold {} context + {} horizon",
                self.frames_per_sequence, self.context_len, self.horizon_len
            ));
        }
        if self.sprite_size == 0 || self.sprite_size > self.frame_size {
            return bad(format!("sprite size {} does not fit a {}px frame", self.sprite_size, self.frame_size));
        }
        if !(self.min_speed >= 0.0 && self.min_speed <= self.max_speed && self.max_speed.is_finite()) {
            return bad(format!("bad speed range {}..{}", self.min_speed, self.max_speed));
        }
        Ok(())
    }
}

/// `N × F × c × H × W` frames in `[0, 1]` with a context/horizon split.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    frames: Tensor,
    context_len: usize,
    horizon_len: usize,
}

impl SequenceDataset {
    pub fn new(frames: Tensor, context_len: usize, horizon_len: usize) -> Result<Self> {
        let shape = frames.shape();
        if shape.len() != 5 {
            return Err(Error::InvalidArgument(format!(
                "dataset needs an N×F×c×H×W block, got {shape:?}"
            )));
        }
        if context_len == 0 || horizon_len == 0 || context_len + horizon_len > shape[1] {
            return Err(Error::InvalidArgument(format!(
                "context {context_len} + horizon {horizon_len} must fit in {} frames",
                shape[1]
            )));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(SequenceDataset {
            frames,
            context_len,
            horizon_len,
        })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frames_per_sequence(&self) -> usize {
        self.frames.shape()[1]
    }

    /// `(channels, height, width)`.
    pub fn frame_shape(&self) -> [usize; 3] {
        let s = self.frames.shape();
        [s[2], s[3], s[4]]
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn horizon_len(&self) -> usize {
        self.horizon_len
    }

    /// The first `context + horizon` frames of the listed sequences, as a
    /// `B × (T+H) × c × H × W` block.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.frames.shape();
        let seq = self.context_len + self.horizon_len;
        let frame: usize = s[2..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * seq * frame);
        for &i in indices {
            if i >= s[0] {
                return Err(Error::InvalidArgument(format!("sequence {i} out of range for {} sequences", s[0])));
            }
            out.extend_from_slice(&self.frames.data()[i * s[1] * frame..][..seq * frame]);
        }
        Tensor::new(&[indices.len(), seq, s[2], s[3], s[4]], out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let s = self.frames.shape();
        w.write_all(&MSEQ_MAGIC)?;
        for v in [
            MSEQ_VERSION,
            s[0] as u32,
            s[1] as u32,
            s[2] as u32,
            s[3] as u32,
            s[4] as u32,
            self.context_len as u32,
            self.horizon_len as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in self.frames.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "MSEQ header")?;
        if magic != MSEQ_MAGIC {
            return Err(Error::BadMagic {
                expected: MSEQ_MAGIC,
                found: magic,
            });
        }
        let mut u32s = [0u32; 8];
        for v in &mut u32s {
            let mut b = [0u8; 4];
            read_exact(r, &mut b, "MSEQ header")?;
            *v = u32::from_le_bytes(b);
        }
        let [version, n, f, c, h, w, ctx, hor] = u32s;
        if version != MSEQ_VERSION {
            return Err(Error::VersionMismatch {
                expected: MSEQ_VERSION,
                found: version,
            });
        }
        let dims = [n, f, c, h, w].map(|d| d as usize);
        if dims.contains(&0) {
            return Err(Error::Malformed(format!("zero extent in MSEQ header {dims:?}")));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Malformed(format!("MSEQ extents {dims:?} overflow")))?;
        let mut bytes = vec![0u8; count.checked_mul(4).ok_or_else(|| Error::Malformed("payload too large".into()))?];
        read_exact(r, &mut bytes, "MSEQ payload")?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        let frames = Tensor::new(&dims, data)?;
        SequenceDataset::new(frames, ctx as usize, hor as usize).map_err(|e| Error::Malformed(e.to_string()))
    }
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(format!("{what} ends early"))
        } else {
            Error::Io(e)
        }
    })
}

/// Random tracks for one sequence.
fn random_tracks(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<ShapeTrack> {
    let limit = (cfg.frame_size - cfg.sprite_size) as f64;
    (0..cfg.num_shapes)
        .map(|_| {
            let kind = ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())];
            let pos = (rng.gen_range(0.0..=limit), rng.gen_range(0.0..=limit));
            let speed = if cfg.max_speed > cfg.min_speed {
                rng.gen_range(cfg.min_speed..=cfg.max_speed)
            } else {
                cfg.min_speed
            };
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            ShapeTrack {
                kind,
                sprite_size: cfg.sprite_size,
                pos,
                vel: (speed * angle.cos(), speed * angle.sin()),
            }
        })
        .collect()
}

pub fn generate_moving_shapes(cfg: &SynthConfig) -> Result<SequenceDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = Vec::with_capacity(cfg.num_sequences * cfg.frames_per_sequence * cfg.frame_size * cfg.frame_size);
    for _ in 0..cfg.num_sequences {
        let mut tracks = random_tracks(cfg, &mut rng);
        data.extend(render_sequence(&mut tracks, cfg.frame_size, cfg.frames_per_sequence));
    }
    let frames = Tensor::new(
        &[cfg.num_sequences, cfg.frames_per_sequence, 1, cfg.frame_size, cfg.frame_size],
        data,
    )?;
    SequenceDataset::new(frames, cfg.context_len, cfg.horizon_len)
}

/// Sequence order for `epoch` under `seed`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub frames: Tensor,
    pub epoch: u64,
    pub indices: Vec<usize>,
}

/// Epoch-shuffled full batches; the partial batch at the end of an epoch is
/// dropped. Position is a pure function of the global batch counter, so an
/// iterator can be started anywhere.
#[derive(Clone, Debug)]
pub struct BatchIterator<'a> {
    ds: &'a SequenceDataset,
    batch_size: usize,
    seed: u64,
    next: u64,
    order: Option<(u64, Vec<usize>)>,
}

impl<'a> BatchIterator<'a> {
    pub fn new(ds: &'a SequenceDataset, batch_size: usize, seed: u64) -> Result<Self> {
        Self::starting_at(ds, batch_size, seed, 0)
    }

    /// Positioned so the first batch yielded is global batch `index`.
    pub fn starting_at(ds: &'a SequenceDataset, batch_size: usize, seed: u64, index: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > ds.len() {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch_size} must be in 1..={} (dataset size)",
                ds.len()
            )));
        }
        Ok(BatchIterator {
            ds,
            batch_size,
            seed,
            next: index,
            order: None,
        })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        (self.ds.len() / self.batch_size) as u64
    }

    pub fn batch_at(&mut self, index: u64) -> Result<Batch> {
        let per = self.batches_per_epoch();
        let epoch = index / per;
        let k = (index % per) as usize;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.order = Some((epoch, epoch_permutation(self.ds.len(), self.seed, epoch)));
        }
        let order = &self.order.as_ref().expect("set above").1;
        let indices = order[k * self.batch_size..(k + 1) * self.batch_size].to_vec();
        Ok(Batch {
            frames: self.ds.gather(&indices)?,
            epoch,
            indices,
        })
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.batch_at(self.next);
        self.next += 1;
        Some(b)
    }
}
