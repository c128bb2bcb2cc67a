//! Seeded synthetic multimodal worlds.
//!
//! Three desk-scale generators stand in for full-scale forecasting
//! corpora, each with known mode structure:
//!
//! * `gen_intersection`   — an object at a crossroad departs along one
//!   of M compass directions; history frames trace its approach, so
//!   uncertainty shrinks as the history grows;
//! * `gen_branching_joints` — a stick figure performs one of M scripted
//!   motions after the history; joint pixel coordinates ride along;
//! * `gen_moving_square`  — a bright square translates by one of M
//!   integer displacements; the true next frame is reachable by a
//!   constant-flow backward warp, so zero loss is attainable.
//!
//! Every sample draws from its own `(seed, index)` substream:
//! generation is order-independent and bit-reproducible.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Object speed of the intersection world, in velocity units per step.
pub const OBJECT_SPEED: f64 = 1.0;

const MAGIC: &[u8; 4] = b"CSND";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Trajectory,
    Joints,
    Video,
}

impl Task {
    pub fn code(&self) -> u8 {
        match self {
            Task::Trajectory => 0,
            Task::Joints => 1,
            Task::Video => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Task::Trajectory),
            1 => Ok(Task::Joints),
            2 => Ok(Task::Video),
            other => Err(Error::format(format!("unknown task code {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Trajectory => "trajectory",
            Task::Joints => "joints",
            Task::Video => "video",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "trajectory" => Ok(Task::Trajectory),
            "joints" => Ok(Task::Joints),
            "video" => Ok(Task::Video),
            other => Err(Error::usage(format!(
                "unknown task '{other}' (expected trajectory, joints or video)"
            ))),
        }
    }
}

/// Generator parameters; `(spec, seed)` fully determines the dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSpec {
    pub task: Task,
    pub n_samples: usize,
    pub modes: usize,
    /// Nf history frames stacked on channels
    pub history_frames: usize,
    /// prediction horizon h
    pub horizon: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    /// joint count J; zero unless the task is Joints
    pub joints: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 {
            return Err(Error::usage("modes must be >= 1"));
        }
        if self.history_frames == 0 {
            return Err(Error::usage("history_frames must be >= 1"));
        }
        if self.horizon == 0 {
            return Err(Error::usage("horizon must be >= 1"));
        }
        if self.frame_h < 8 || self.frame_w < 8 {
            return Err(Error::usage("frame size must be at least 8x8"));
        }
        match self.task {
            Task::Trajectory | Task::Video => {
                if self.joints != 0 {
                    return Err(Error::usage("joints only applies to the joints task"));
                }
            }
            Task::Joints => {
                if self.joints < 2 {
                    return Err(Error::usage("joints task wants at least 2 joints"));
                }
                if self.joints > 1 + JOINT_OFFSETS.len() {
                    return Err(Error::usage(format!(
                        "at most {} joints supported",
                        1 + JOINT_OFFSETS.len()
                    )));
                }
                if self.modes > 4 * (self.joints - 1) {
                    return Err(Error::usage(format!(
                        "at most {} modes for {} joints",
                        4 * (self.joints - 1),
                        self.joints
                    )));
                }
                if self.frame_h.min(self.frame_w) < 20 {
                    return Err(Error::usage("joints task wants frames of at least 20x20"));
                }
            }
        }
        if self.task == Task::Video && self.modes > 8 {
            return Err(Error::usage("at most 8 modes for the video task"));
        }
        Ok(())
    }

    /// Element count of one glimpse stack (C = 1 grayscale).
    pub fn x_len(&self) -> usize {
        self.history_frames * self.frame_h * self.frame_w
    }

    pub fn x_shape(&self) -> Vec<usize> {
        vec![self.history_frames, self.frame_h, self.frame_w]
    }

    pub fn y_shape(&self) -> Vec<usize> {
        match self.task {
            Task::Trajectory => vec![self.horizon, 2],
            Task::Joints => vec![self.joints, self.horizon, 2],
            Task::Video => vec![1, self.frame_h, self.frame_w],
        }
    }
}

/// One (glimpse history, ground-truth future) pair.
///
/// `mode_id` is metadata only and is never fed to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Tensor,
    pub y: Tensor,
    pub mode_id: u32,
    /// joint (row, col) pixel coordinates in the last history frame
    pub coords: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
        match spec.task {
            Task::Trajectory => gen_intersection(spec),
            Task::Joints => gen_branching_joints(spec),
            Task::Video => gen_moving_square(spec),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Even-index half: the training split.
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| i % 2 == 0).collect()
    }

    /// Odd-index half: the held-out split.
    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| i % 2 == 1).collect()
    }
}

/// Compass direction `m` of `M`, exact on the quarter points.
fn unit_dir(m: usize, modes: usize) -> (f64, f64) {
    debug_assert!(m < modes);
    if (4 * m) % modes == 0 {
        // lands exactly on a compass quarter
        match (4 * m) / modes {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let angle = 2.0 * std::f64::consts::PI * m as f64 / modes as f64;
        (angle.cos(), angle.sin())
    }
}

struct FrameBuf {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl FrameBuf {
    fn new(h: usize, w: usize) -> Self {
        FrameBuf {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    fn paint(&mut self, r: isize, c: isize, value: f64) {
        if r >= 0 && (r as usize) < self.h && c >= 0 && (c as usize) < self.w {
            let idx = r as usize * self.w + c as usize;
            self.data[idx] = self.data[idx].max(value);
        }
    }

    /// Square blob of the given radius centered at (r, c).
    fn blob(&mut self, r: isize, c: isize, radius: isize, value: f64) {
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                self.paint(r + dr, c + dc, value);
            }
        }
    }

    fn band_rows(&mut self, center: usize, half: usize, value: f64) {
        for r in center.saturating_sub(half)..=(center + half).min(self.h - 1) {
            for c in 0..self.w {
                self.paint(r as isize, c as isize, value);
            }
        }
    }

    fn band_cols(&mut self, center: usize, half: usize, value: f64) {
        for c in center.saturating_sub(half)..=(center + half).min(self.w - 1) {
            for r in 0..self.h {
                self.paint(r as isize, c as isize, value);
            }
        }
    }

    /// Axis-aligned segment between two points; ignored if diagonal.
    fn segment(&mut self, a: (isize, isize), b: (isize, isize), value: f64) {
        if a.0 == b.0 {
            for c in a.1.min(b.1)..=a.1.max(b.1) {
                self.paint(a.0, c, value);
            }
        } else if a.1 == b.1 {
            for r in a.0.min(b.0)..=a.0.max(b.0) {
                self.paint(r, a.1, value);
            }
        }
    }
}

/// Object trajectory world: a crossroad glimpse; the object crosses the
/// intersection at constant speed along one of M compass directions.
/// The rendered approach streak grows with the history length, which is
/// the uncertainty dial.
pub fn gen_intersection(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.task != Task::Trajectory {
        return Err(Error::usage("gen_intersection wants task = trajectory"));
    }
    spec.validate()?;
    let (h, w, nf) = (spec.frame_h, spec.frame_w, spec.history_frames);
    let reach_budget = (h.min(w) as isize) / 2 - 3;
    let px_step: isize = if nf > 1 {
        (reach_budget / (nf as isize - 1)).min(2)
    } else {
        2
    };
    if px_step < 1 {
        return Err(Error::usage(format!(
            "history of {nf} frames does not fit a {h}x{w} frame"
        )));
    }

    let samples = parallel::map_indexed(spec.n_samples, |i| {
        let mut rng = Rng::substream(spec.seed, i as u64);
        let mode = rng.below(spec.modes);
        let (dx, dy) = unit_dir(mode, spec.modes);
        let (cr, cc) = (h as isize / 2, w as isize / 2);
        let mut x = Vec::with_capacity(spec.x_len());
        for f in 0..nf {
            let mut frame = FrameBuf::new(h, w);
            frame.band_rows(h / 2, 1, 0.25);
            frame.band_cols(w / 2, 1, 0.25);
            let back = (nf - 1 - f) as f64 * px_step as f64;
            let r = cr - (dy * back).round() as isize;
            let c = cc - (dx * back).round() as isize;
            frame.blob(r, c, 1, 1.0);
            x.extend_from_slice(&frame.data);
        }
        let mut y = Vec::with_capacity(spec.horizon * 2);
        for _ in 0..spec.horizon {
            y.push(dx * OBJECT_SPEED);
            y.push(dy * OBJECT_SPEED);
        }
        Sample {
            x: Tensor::from_vec(&spec.x_shape(), x).expect("x shape"),
            y: Tensor::from_vec(&spec.y_shape(), y).expect("y shape"),
            mode_id: mode as u32,
            coords: Vec::new(),
        }
    });
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

/// Joint offsets relative to the root, in limb-length units (row, col).
const JOINT_OFFSETS: [(isize, isize); 7] = [
    (-1, 0), // head
    (0, -1), // left tip
    (0, 1),  // right tip
    (1, 0),  // lower tip
    (-1, -1),
    (-1, 1),
    (1, 1),
];

/// Velocity directions of the scripted motions, as (dx, dy).
const SCRIPT_DIRS: [(f64, f64); 4] = [(0.0, -1.0), (0.0, 1.0), (-1.0, 0.0), (1.0, 0.0)];

const SCRIPT_AMPLITUDE: f64 = 0.4;
const LIMB_CHOICES: [isize; 3] = [4, 5, 6];
const LIMB_BASE: f64 = 5.0;

/// Body-joint world: a stick figure with a discrete limb-length level
/// and a small visible position jitter performs one of M scripted
/// motions after the history. Velocities scale with the visible limb
/// length, so (glimpse, mode) determines y exactly while modes stay
/// separated well above the intra-mode spread.
pub fn gen_branching_joints(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.task != Task::Joints {
        return Err(Error::usage("gen_branching_joints wants task = joints"));
    }
    spec.validate()?;
    let (h, w, nf, j) = (spec.frame_h, spec.frame_w, spec.history_frames, spec.joints);

    let samples = parallel::map_indexed(spec.n_samples, |i| {
        let mut rng = Rng::substream(spec.seed, i as u64);
        let mode = rng.below(spec.modes);
        let limb = LIMB_CHOICES[rng.below(LIMB_CHOICES.len())];
        let jr = rng.below(5) as isize - 2;
        let jc = rng.below(5) as isize - 2;
        let root = (h as isize / 2 + jr, w as isize / 2 + jc);

        let mut joints: Vec<(isize, isize)> = Vec::with_capacity(j);
        joints.push(root);
        for off in JOINT_OFFSETS.iter().take(j - 1) {
            joints.push((root.0 + off.0 * limb, root.1 + off.1 * limb));
        }

        let mut frame = FrameBuf::new(h, w);
        for &p in joints.iter().skip(1) {
            frame.segment(root, p, 0.5);
        }
        for &(r, c) in &joints {
            frame.blob(r, c, 1, 1.0);
        }
        let mut x = Vec::with_capacity(spec.x_len());
        for _ in 0..nf {
            x.extend_from_slice(&frame.data); // figure holds still before moving
        }

        let moving = 1 + mode % (j - 1);
        let (dirx, diry) = SCRIPT_DIRS[(mode / (j - 1)) % SCRIPT_DIRS.len()];
        let speed = SCRIPT_AMPLITUDE * limb as f64 / LIMB_BASE;
        let mut y = vec![0.0; j * spec.horizon * 2];
        for t in 0..spec.horizon {
            y[(moving * spec.horizon + t) * 2] = dirx * speed;
            y[(moving * spec.horizon + t) * 2 + 1] = diry * speed;
        }

        Sample {
            x: Tensor::from_vec(&spec.x_shape(), x).expect("x shape"),
            y: Tensor::from_vec(&spec.y_shape(), y).expect("y shape"),
            mode_id: mode as u32,
            coords: joints.iter().map(|&(r, c)| (r as u32, c as u32)).collect(),
        }
    });
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

/// Integer displacement of video mode `m`: four compass steps, then the
/// four diagonals, as (drow, dcol).
fn square_displacement(m: usize) -> (isize, isize) {
    const DIRS: [(isize, isize); 8] = [
        (0, 1),
        (0, -1),
        (1, 0),
        (-1, 0),
        (1, 1),
        (-1, -1),
        (1, -1),
        (-1, 1),
    ];
    DIRS[m]
}

const SQUARE_SIDE: usize = 5;

/// Video world: a bright square on a dark background translates by one
/// of M integer displacement vectors per step. The next frame equals a
/// backward warp of the last frame with the constant flow `-disp`.
pub fn gen_moving_square(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.task != Task::Video {
        return Err(Error::usage("gen_moving_square wants task = video"));
    }
    spec.validate()?;
    let (h, w, nf) = (spec.frame_h, spec.frame_w, spec.history_frames);
    let side = SQUARE_SIDE.min(h.min(w) / 3).max(3);
    // keep the square inside the frame across the whole history and the
    // predicted step
    let margin = nf; // |disp| <= 1 per axis per step
    if h <= side + 2 * margin || w <= side + 2 * margin {
        return Err(Error::usage(format!(
            "frame {h}x{w} too small for a {side}px square with {nf} history frames"
        )));
    }

    let samples = parallel::map_indexed(spec.n_samples, |i| {
        let mut rng = Rng::substream(spec.seed, i as u64);
        let mode = rng.below(spec.modes);
        let (dr, dc) = square_displacement(mode);
        let r_last = margin + rng.below(h - side - 2 * margin);
        let c_last = margin + rng.below(w - side - 2 * margin);

        let draw = |r0: isize, c0: isize| -> Vec<f64> {
            let mut frame = FrameBuf::new(h, w);
            for r in 0..side {
                for c in 0..side {
                    frame.paint(r0 + r as isize, c0 + c as isize, 1.0);
                }
            }
            frame.data
        };

        let mut x = Vec::with_capacity(spec.x_len());
        for f in 0..nf {
            let back = (nf - 1 - f) as isize;
            x.extend(draw(r_last as isize - dr * back, c_last as isize - dc * back));
        }
        let y = draw(r_last as isize + dr, c_last as isize + dc);

        Sample {
            x: Tensor::from_vec(&spec.x_shape(), x).expect("x shape"),
            y: Tensor::from_vec(&spec.y_shape(), y).expect("y shape"),
            mode_id: mode as u32,
            coords: Vec::new(),
        }
    });
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

// ---------------------------------------------------------------------------
// CSND container
// ---------------------------------------------------------------------------

pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let spec = &ds.spec;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(spec.task.code());
    out.extend_from_slice(&(ds.samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(spec.history_frames as u32).to_le_bytes());
    out.extend_from_slice(&(spec.horizon as u32).to_le_bytes());
    out.extend_from_slice(&(spec.modes as u32).to_le_bytes());
    out.extend_from_slice(&(spec.joints as u32).to_le_bytes());
    out.extend_from_slice(&(spec.frame_h as u32).to_le_bytes());
    out.extend_from_slice(&(spec.frame_w as u32).to_le_bytes());
    out.extend_from_slice(&spec.seed.to_le_bytes());
    for s in &ds.samples {
        out.extend_from_slice(&s.mode_id.to_le_bytes());
        for j in 0..spec.joints {
            let (r, c) = s.coords.get(j).copied().unwrap_or((0, 0));
            out.extend_from_slice(&r.to_le_bytes());
            out.extend_from_slice(&c.to_le_bytes());
        }
        for &v in s.x.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in s.y.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(format!(
                "truncated dataset: wanted {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(8 * n, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn dataset_from_bytes(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(format!(
            "bad dataset magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported dataset version {version}, expected {VERSION}"
        )));
    }
    let task = Task::from_code(r.u8("task")?)?;
    let n = r.u32("n_samples")? as usize;
    let spec = DatasetSpec {
        task,
        n_samples: n,
        history_frames: r.u32("history_frames")? as usize,
        horizon: r.u32("horizon")? as usize,
        modes: r.u32("modes")? as usize,
        joints: r.u32("joints")? as usize,
        frame_h: r.u32("frame_h")? as usize,
        frame_w: r.u32("frame_w")? as usize,
        seed: r.u64("seed")?,
    };
    let x_shape = spec.x_shape();
    let y_shape = spec.y_shape();
    let x_len: usize = x_shape.iter().product();
    let y_len: usize = y_shape.iter().product();
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mode_id = r.u32(&format!("sample {i} mode"))?;
        let mut coords = Vec::with_capacity(spec.joints);
        for _ in 0..spec.joints {
            let row = r.u32("coord row")?;
            let col = r.u32("coord col")?;
            coords.push((row, col));
        }
        let x = Tensor::from_vec(&x_shape, r.f64s(x_len, "x payload")?)?;
        let y = Tensor::from_vec(&y_shape, r.f64s(y_len, "y payload")?)?;
        samples.push(Sample {
            x,
            y,
            mode_id,
            coords,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::format(format!(
            "trailing {} bytes after the last sample",
            buf.len() - r.pos
        )));
    }
    Ok(Dataset { spec, samples })
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = dataset_to_bytes(ds);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut buf)?;
    dataset_from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj_spec(modes: usize, nf: usize, n: usize) -> DatasetSpec {
        DatasetSpec {
            task: Task::Trajectory,
            n_samples: n,
            modes,
            history_frames: nf,
            horizon: 20,
            frame_h: 16,
            frame_w: 16,
            joints: 0,
            seed: 7,
        }
    }

    #[test]
    fn single_mode_is_deterministic() {
        let ds = gen_intersection(&traj_spec(1, 1, 10)).unwrap();
        let y0 = ds.samples[0].y.clone();
        let x0 = ds.samples[0].x.clone();
        for s in &ds.samples {
            assert_eq!(s.y, y0);
            assert_eq!(s.x, x0);
            assert_eq!(s.mode_id, 0);
        }
    }

    #[test]
    fn two_modes_are_left_right_with_binomial_balance() {
        let ds = gen_intersection(&traj_spec(2, 1, 2000)).unwrap();
        let mut counts = [0usize; 2];
        for s in &ds.samples {
            counts[s.mode_id as usize] += 1;
            let row = &s.y.data()[..2];
            match s.mode_id {
                0 => assert_eq!(row, &[1.0, 0.0]),
                _ => assert_eq!(row, &[-1.0, 0.0]),
            }
        }
        // 3-sigma binomial bound at n = 2000, p = 1/2
        let sigma = (2000.0f64 * 0.25).sqrt();
        assert!(
            (counts[0] as f64 - 1000.0).abs() < 3.0 * sigma,
            "counts {counts:?}"
        );
    }

    #[test]
    fn velocities_telescope_to_displacement() {
        let ds = gen_intersection(&traj_spec(5, 1, 20)).unwrap();
        for s in &ds.samples {
            let mut total = [0.0f64; 2];
            for t in 0..20 {
                total[0] += s.y.data()[2 * t];
                total[1] += s.y.data()[2 * t + 1];
            }
            let (dx, dy) = unit_dir(s.mode_id as usize, 5);
            assert!((total[0] - 20.0 * dx).abs() < 1e-9);
            assert!((total[1] - 20.0 * dy).abs() < 1e-9);
        }
    }

    #[test]
    fn history_reveals_direction_only_beyond_one_frame() {
        let one = gen_intersection(&traj_spec(4, 1, 8)).unwrap();
        // same glimpse regardless of mode when Nf = 1
        for s in &one.samples {
            assert_eq!(s.x, one.samples[0].x);
        }
        let four = gen_intersection(&traj_spec(4, 4, 64)).unwrap();
        let mut seen = std::collections::HashMap::new();
        for s in &four.samples {
            let key: Vec<u64> = s.x.data().iter().map(|v| v.to_bits()).collect();
            if let Some(prev) = seen.insert(key, s.mode_id) {
                assert_eq!(prev, s.mode_id, "same history must imply same mode");
            }
        }
    }

    fn joints_spec(n: usize) -> DatasetSpec {
        DatasetSpec {
            task: Task::Joints,
            n_samples: n,
            modes: 2,
            history_frames: 2,
            horizon: 15,
            frame_h: 32,
            frame_w: 32,
            joints: 4,
            seed: 3,
        }
    }

    #[test]
    fn joint_coords_in_bounds_and_static_rows_zero() {
        let ds = gen_branching_joints(&joints_spec(200)).unwrap();
        for s in &ds.samples {
            assert_eq!(s.coords.len(), 4);
            for &(r, c) in &s.coords {
                assert!(r < 32 && c < 32);
            }
            let moving = 1 + (s.mode_id as usize) % 3;
            for j in 0..4 {
                let row_sum: f64 = (0..15)
                    .map(|t| s.y.data()[(j * 15 + t) * 2].abs() + s.y.data()[(j * 15 + t) * 2 + 1].abs())
                    .sum();
                if j == moving {
                    assert!(row_sum > 0.0);
                } else {
                    assert_eq!(row_sum, 0.0, "static joint {j} must not move");
                }
            }
        }
    }

    #[test]
    fn mode_separation_dominates_intra_mode_spread() {
        let ds = gen_branching_joints(&joints_spec(600)).unwrap();
        let y_len = ds.spec.y_shape().iter().product::<usize>();
        let mut by_mode: Vec<Vec<&Sample>> = vec![Vec::new(); 2];
        for s in &ds.samples {
            by_mode[s.mode_id as usize].push(s);
        }
        let mean = |group: &[&Sample]| -> Vec<f64> {
            let mut m = vec![0.0; y_len];
            for s in group {
                for (mi, &v) in m.iter_mut().zip(s.y.data()) {
                    *mi += v;
                }
            }
            for mi in &mut m {
                *mi /= group.len() as f64;
            }
            m
        };
        let m0 = mean(&by_mode[0]);
        let m1 = mean(&by_mode[1]);
        let separation: f64 = m0
            .iter()
            .zip(&m1)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let spread = |group: &[&Sample], m: &[f64]| -> f64 {
            let v: f64 = group
                .iter()
                .map(|s| {
                    s.y.data()
                        .iter()
                        .zip(m)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / group.len() as f64;
            v.sqrt()
        };
        let noise = spread(&by_mode[0], &m0).max(spread(&by_mode[1], &m1));
        assert!(
            separation >= 5.0 * noise,
            "separation {separation} vs noise {noise}"
        );
    }

    fn video_spec(modes: usize, nf: usize, n: usize) -> DatasetSpec {
        DatasetSpec {
            task: Task::Video,
            n_samples: n,
            modes,
            history_frames: nf,
            horizon: 1,
            frame_h: 16,
            frame_w: 16,
            joints: 0,
            seed: 11,
        }
    }

    #[test]
    fn square_frames_stay_in_unit_range() {
        let ds = gen_moving_square(&video_spec(2, 2, 50)).unwrap();
        for s in &ds.samples {
            for &v in s.x.data().iter().chain(s.y.data()) {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn single_mode_two_frames_determines_next() {
        let ds = gen_moving_square(&video_spec(1, 2, 30)).unwrap();
        for s in &ds.samples {
            // frame difference fixes the direction; y must follow it
            assert_eq!(s.mode_id, 0);
            assert!(s.y.data().iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn true_flow_warp_reproduces_next_frame_exactly() {
        use crate::tensor::Graph;
        let ds = gen_moving_square(&video_spec(4, 1, 40)).unwrap();
        for s in &ds.samples {
            let (dr, dc) = square_displacement(s.mode_id as usize);
            let g = Graph::new();
            let last = g.input(s.x.reshaped(&[1, 16, 16]).unwrap());
            let mut flow = vec![0.0; 2 * 16 * 16];
            for v in flow.iter_mut().take(16 * 16) {
                *v = -(dr as f64);
            }
            for v in flow.iter_mut().skip(16 * 16) {
                *v = -(dc as f64);
            }
            let flow = g.input(Tensor::from_vec(&[2, 16, 16], flow).unwrap());
            let warped = last.bilinear_warp(&flow).unwrap();
            assert_eq!(warped.value().data(), s.y.data());
        }
    }

    #[test]
    fn determinism_and_round_trip() {
        let spec = traj_spec(3, 2, 64);
        let a = Dataset::generate(&spec).unwrap();
        let b = Dataset::generate(&spec).unwrap();
        let bytes_a = dataset_to_bytes(&a);
        let bytes_b = dataset_to_bytes(&b);
        assert_eq!(bytes_a, bytes_b, "same spec must give identical bytes");

        let back = dataset_from_bytes(&bytes_a).unwrap();
        assert_eq!(back, a);
        assert_eq!(dataset_to_bytes(&back), bytes_a);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = gen_intersection(&traj_spec(2, 1, 0)).unwrap();
        let bytes = dataset_to_bytes(&ds);
        let back = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let ds = gen_intersection(&traj_spec(2, 1, 4)).unwrap();
        let mut bytes = dataset_to_bytes(&ds);
        bytes[0] = b'X';
        assert!(matches!(
            dataset_from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncation_is_format_error() {
        let ds = gen_intersection(&traj_spec(2, 1, 4)).unwrap();
        let bytes = dataset_to_bytes(&ds);
        assert!(matches!(
            dataset_from_bytes(&bytes[..bytes.len() - 5]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn parity_split_is_disjoint_and_complete() {
        let ds = gen_intersection(&traj_spec(2, 1, 11)).unwrap();
        let train = ds.train_indices();
        let test = ds.test_indices();
        assert_eq!(train.len() + test.len(), 11);
        for i in &train {
            assert!(!test.contains(i));
        }
    }

    #[test]
    fn invalid_specs_are_usage_errors() {
        let mut s = traj_spec(0, 1, 4);
        assert!(matches!(
            gen_intersection(&s),
            Err(Error::Usage(_))
        ));
        s.modes = 2;
        s.task = Task::Video;
        assert!(gen_intersection(&s).is_err());
    }
}
