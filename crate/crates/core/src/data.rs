//! Synthetic sequences, keypoint files, splitting and chunking.
//!
//! Frames are stored row-wise: observations as `F x 2P` (`[x.., y..]`) and
//! shapes as `F x 3P` (`[x.., y.., z..]`), the same layout the model consumes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{random_rotation, slerp, Rotation3};
use crate::{Error, Result};

pub const OBSERVATIONS_FILE: &str = "keypoints_2d.csv";
pub const GROUND_TRUTH_FILE: &str = "keypoints_3d.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// Slerp through random waypoints.
    Smooth,
    /// `s` fixed random rotations, each held over one contiguous block.
    Components,
    /// Independent rotation per frame.
    Random,
}

impl std::str::FromStr for RotationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth" => Ok(Self::Smooth),
            "components" => Ok(Self::Components),
            "random" => Ok(Self::Random),
            _ => Err(Error::InvalidArgument(format!(
                "unknown rotation mode {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub frames: usize,
    pub points: usize,
    pub rank: usize,
    pub rotation_mode: RotationMode,
    pub components: usize,
    /// Noise std as a fraction of the RMS shape coordinate.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(frames: usize, points: usize, rank: usize) -> Self {
        Self {
            frames,
            points,
            rank,
            rotation_mode: RotationMode::Smooth,
            components: 1,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.points == 0 {
            return Err(Error::InvalidArgument(
                "frames and points must be positive".into(),
            ));
        }
        if self.rank == 0 || self.rank > self.frames.min(3 * self.points) {
            return Err(Error::InvalidArgument(format!(
                "rank {} outside 1..={}",
                self.rank,
                self.frames.min(3 * self.points)
            )));
        }
        if self.components == 0 {
            return Err(Error::InvalidArgument(
                "components must be at least 1".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise {} must be finite and >= 0",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Full,
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `F x 2P`, each frame centered.
    pub observations: Array2<f64>,
    /// Canonical shapes `F x 3P`, when known.
    pub shapes: Option<Array2<f64>>,
    /// Per-frame rotations paired with `shapes`.
    pub rotations: Option<Vec<Rotation3>>,
    pub split: Split,
}

impl Dataset {
    pub fn new(observations: Array2<f64>) -> Result<Self> {
        if observations.ncols() % 2 != 0 {
            return Err(Error::SizeConflict(format!(
                "observation rows have {} columns, expected 2P",
                observations.ncols()
            )));
        }
        Ok(Self {
            observations: center_rows(observations, 2),
            shapes: None,
            rotations: None,
            split: Split::Full,
        })
    }

    pub fn with_ground_truth(
        mut self,
        shapes: Array2<f64>,
        rotations: Vec<Rotation3>,
    ) -> Result<Self> {
        if shapes.dim() != (self.frames(), 3 * self.points()) || rotations.len() != self.frames() {
            return Err(Error::SizeConflict(format!(
                "ground truth {:?} with {} rotations for {} frames of {} points",
                shapes.dim(),
                rotations.len(),
                self.frames(),
                self.points()
            )));
        }
        self.shapes = Some(center_rows(shapes, 3));
        self.rotations = Some(rotations);
        Ok(self)
    }

    pub fn frames(&self) -> usize {
        self.observations.nrows()
    }

    pub fn points(&self) -> usize {
        self.observations.ncols() / 2
    }

    pub fn has_ground_truth(&self) -> bool {
        self.shapes.is_some()
    }

    /// Ground truth in the camera frame, `R_i S_i`, as `F x 3P`.
    pub fn camera_shapes(&self) -> Option<Array2<f64>> {
        let (s, r) = (self.shapes.as_ref()?, self.rotations.as_ref()?);
        let p = self.points();
        let mut out = Array2::zeros(s.dim());
        for (i, rot) in r.iter().enumerate() {
            let m = rot.matrix();
            for b in 0..3 {
                for j in 0..p {
                    out[[i, b * p + j]] = (0..3).map(|a| m[(b, a)] * s[[i, a * p + j]]).sum();
                }
            }
        }
        Some(out)
    }

    /// Frame `i` of the observations as a `2 x P` matrix.
    pub fn observation_frame(&self, i: usize) -> DMatrix<f64> {
        let p = self.points();
        DMatrix::from_fn(2, p, |r, j| self.observations[[i, r * p + j]])
    }

    /// Rows `range`, keeping ground truth aligned.
    pub fn slice(&self, start: usize, end: usize, split: Split) -> Self {
        Self {
            observations: self.observations.slice(s![start..end, ..]).to_owned(),
            shapes: self
                .shapes
                .as_ref()
                .map(|s| s.slice(s![start..end, ..]).to_owned()),
            rotations: self.rotations.as_ref().map(|r| r[start..end].to_vec()),
            split,
        }
    }
}

/// Subtracts the per-frame mean of each of the `dims` coordinate blocks.
pub fn center_rows(mut m: Array2<f64>, dims: usize) -> Array2<f64> {
    let p = m.ncols() / dims.max(1);
    if p == 0 {
        return m;
    }
    for mut row in m.axis_iter_mut(Axis(0)) {
        for d in 0..dims {
            let mut block = row.slice_mut(s![d * p..(d + 1) * p]);
            let mean = block.sum() / p as f64;
            block -= mean;
        }
    }
    m
}

fn smooth_coefficients(rng: &mut ChaCha8Rng, frames: usize, rank: usize) -> Array2<f64> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut c = Array2::zeros((frames, rank));
    for k in 0..rank {
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let amp = rng.random_range(0.5..1.0);
                let cycles = rng.random_range(0.5..4.0);
                let phase = rng.random_range(0.0..two_pi);
                (amp, cycles, phase)
            })
            .collect();
        // The first coefficient carries a mean shape so the sequence never collapses to zero.
        let offset = if k == 0 { 3.0 } else { 0.0 };
        let scale = if k == 0 { 0.3 } else { 1.0 };
        for t in 0..frames {
            let u = t as f64 / frames as f64;
            let v: f64 = waves
                .iter()
                .map(|&(a, f, ph)| a * (two_pi * f * u + ph).sin())
                .sum();
            c[[t, k]] = offset + scale * v;
        }
    }
    c
}

fn smooth_rotations(rng: &mut ChaCha8Rng, frames: usize) -> Vec<Rotation3> {
    const SEGMENT: usize = 64;
    let segments = frames.div_ceil(SEGMENT).max(1);
    let waypoints: Vec<Rotation3> = (0..=segments).map(|_| random_rotation(rng)).collect();
    (0..frames)
        .map(|t| {
            let seg = t / SEGMENT;
            let u = (t % SEGMENT) as f64 / SEGMENT as f64;
            slerp(&waypoints[seg], &waypoints[seg + 1], u)
        })
        .collect()
}

/// Rotations whose vectorizations have full column rank (for up to nine of them).
pub fn independent_rotations(rng: &mut impl Rng, count: usize) -> Vec<Rotation3> {
    loop {
        let rots: Vec<Rotation3> = (0..count).map(|_| random_rotation(rng)).collect();
        if count > 9 {
            return rots;
        }
        let m = DMatrix::from_fn(9, count, |e, k| rots[k].row_vec()[e]);
        let sv = m.singular_values();
        if sv.iter().all(|&x| x > 1e-3 * sv[0]) {
            return rots;
        }
    }
}

/// Component index of frame `t` when `frames` frames are split into `s` contiguous blocks.
pub fn block_component(t: usize, frames: usize, s: usize) -> usize {
    t * s / frames
}

/// Generates a low-rank sequence with known shapes and rotations.
pub fn synth_sequence(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (f, p, k) = (spec.frames, spec.points, spec.rank);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let basis = center_rows(
        Array2::from_shape_fn((k, 3 * p), |_| rng.sample::<f64, _>(StandardNormal)),
        3,
    );
    let coeffs = smooth_coefficients(&mut rng, f, k);
    let mut shapes = coeffs.dot(&basis);
    let rms = (shapes.iter().map(|x| x * x).sum::<f64>() / shapes.len() as f64).sqrt();
    if rms > 0.0 {
        shapes /= rms;
    }

    let motion = match spec.rotation_mode {
        RotationMode::Smooth => smooth_rotations(&mut rng, f),
        RotationMode::Components => {
            let comps = independent_rotations(&mut rng, spec.components);
            (0..f)
                .map(|t| comps[block_component(t, f, spec.components)])
                .collect()
        }
        RotationMode::Random => (0..f).map(|_| random_rotation(&mut rng)).collect(),
    };
    let camera = random_rotation(&mut rng);
    let rotations: Vec<Rotation3> = motion.iter().map(|r| camera.compose(r)).collect();

    let mut d = Dataset {
        observations: Array2::zeros((f, 2 * p)),
        shapes: Some(shapes),
        rotations: Some(rotations),
        split: Split::Full,
    };
    let cam = d.camera_shapes().expect("ground truth present");
    let mut w = cam.slice(s![.., ..2 * p]).to_owned();
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        w.mapv_inplace(|x| x + rng.sample(noise));
        w = center_rows(w, 2);
    }
    d.observations = w;
    Ok(d)
}

fn format_value(out: &mut String, x: f64) {
    let _ = write!(out, "{x:.16e}");
}

/// Writes rows `frame,joint,x,y[,z]`. `m` is `F x dims*P`.
pub fn save_keypoints(path: &Path, m: &Array2<f64>, dims: usize) -> Result<()> {
    if dims != 2 && dims != 3 || m.ncols() % dims != 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot write {}-D keypoints from {:?}",
            dims,
            m.dim()
        )));
    }
    let p = m.ncols() / dims;
    let mut out = String::from(if dims == 2 {
        "frame,joint,x,y\n"
    } else {
        "frame,joint,x,y,z\n"
    });
    for i in 0..m.nrows() {
        for j in 0..p {
            let _ = write!(out, "{i},{j}");
            for d in 0..dims {
                out.push(',');
                format_value(&mut out, m[[i, d * p + j]]);
            }
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses a keypoint CSV into an uncentered `F x dims*P` matrix.
pub fn read_keypoints(path: &Path, dims: usize) -> Result<Array2<f64>> {
    let name = path.display().to_string();
    let perr = |line: usize, msg: String| Error::Parse {
        path: name.clone(),
        line,
        msg,
    };
    if dims != 2 && dims != 3 {
        return Err(Error::InvalidArgument(format!(
            "dims must be 2 or 3, got {dims}"
        )));
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let expected = if dims == 2 {
        "frame,joint,x,y"
    } else {
        "frame,joint,x,y,z"
    };
    match lines.next() {
        Some((_, h)) if h.trim().replace(' ', "") == expected => {}
        Some((_, h)) => return Err(perr(1, format!("header {h:?}, expected {expected:?}"))),
        None => return Err(perr(1, "empty file".into())),
    }

    let mut frames: Vec<Vec<[f64; 3]>> = Vec::new();
    let mut points: Option<usize> = None;
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() != 2 + dims {
            return Err(perr(
                line_no,
                format!("expected {} fields, found {}", 2 + dims, fields.len()),
            ));
        }
        let frame: usize = fields[0]
            .parse()
            .map_err(|_| perr(line_no, format!("bad frame id {:?}", fields[0])))?;
        let joint: usize = fields[1]
            .parse()
            .map_err(|_| perr(line_no, format!("bad joint id {:?}", fields[1])))?;
        let mut xyz = [0.0; 3];
        for d in 0..dims {
            let v: f64 = fields[2 + d]
                .parse()
                .map_err(|_| perr(line_no, format!("bad value {:?}", fields[2 + d])))?;
            if !v.is_finite() {
                return Err(perr(
                    line_no,
                    format!("non-finite value {:?}", fields[2 + d]),
                ));
            }
            xyz[d] = v;
        }

        if frame == frames.len() {
            if let Some(prev) = frames.last() {
                match points {
                    None => points = Some(prev.len()),
                    Some(p) if p != prev.len() => {
                        return Err(perr(
                            line_no,
                            format!(
                                "frame {} has {} joints, expected {p}",
                                frame - 1,
                                prev.len()
                            ),
                        ))
                    }
                    _ => {}
                }
            }
            frames.push(Vec::new());
        } else if frame + 1 != frames.len() {
            return Err(perr(
                line_no,
                format!(
                    "frame id {frame} out of order (expected {} or {})",
                    frames.len().saturating_sub(1),
                    frames.len()
                ),
            ));
        }
        let current = frames.last_mut().expect("frame pushed above");
        if joint != current.len() {
            return Err(perr(
                line_no,
                format!(
                    "joint id {joint} in frame {frame}, expected {}",
                    current.len()
                ),
            ));
        }
        current.push(xyz);
    }
    let Some(last) = frames.last() else {
        return Err(perr(2, "no data rows".into()));
    };
    let p = points.unwrap_or(last.len());
    if last.len() != p {
        return Err(perr(
            text.lines().count(),
            format!(
                "frame {} has {} joints, expected {p}",
                frames.len() - 1,
                last.len()
            ),
        ));
    }
    if p == 0 {
        return Err(perr(2, "no joints".into()));
    }
    Ok(Array2::from_shape_fn((frames.len(), dims * p), |(i, c)| {
        frames[i][c % p][c / p]
    }))
}

/// Loads a keypoint CSV. 3-D files carry their own ground truth (camera frame, `R = I`).
pub fn load_keypoints(path: &Path, dims: usize) -> Result<Dataset> {
    let m = read_keypoints(path, dims)?;
    if dims == 2 {
        return Dataset::new(m);
    }
    let p = m.ncols() / 3;
    let obs = m.slice(s![.., ..2 * p]).to_owned();
    let f = m.nrows();
    Dataset::new(obs)?.with_ground_truth(m, vec![Rotation3::identity(); f])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frames: usize,
    pub points: usize,
    pub dims: usize,
    pub has_gt: bool,
    pub source_path: String,
    pub seed: Option<u64>,
}

/// Writes the 2-D observations, the camera-frame ground truth if present, and a manifest.
pub fn save_dataset(dir: &Path, d: &Dataset, seed: Option<u64>) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    save_keypoints(&dir.join(OBSERVATIONS_FILE), &d.observations, 2)?;
    let cam = d.camera_shapes();
    if let Some(cam) = &cam {
        save_keypoints(&dir.join(GROUND_TRUTH_FILE), cam, 3)?;
    }
    let manifest = Manifest {
        frames: d.frames(),
        points: d.points(),
        dims: if cam.is_some() { 3 } else { 2 },
        has_gt: cam.is_some(),
        source_path: dir.join(OBSERVATIONS_FILE).display().to_string(),
        seed,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Reads a directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut d = load_keypoints(&dir.join(OBSERVATIONS_FILE), 2)?;
    if manifest.has_gt {
        let gt = load_keypoints(&dir.join(GROUND_TRUTH_FILE), 3)?;
        if gt.frames() != d.frames() || gt.points() != d.points() {
            return Err(Error::SizeConflict(format!(
                "ground truth is {}x{}, observations {}x{}",
                gt.frames(),
                gt.points(),
                d.frames(),
                d.points()
            )));
        }
        d.shapes = gt.shapes;
        d.rotations = gt.rotations;
    }
    if d.frames() != manifest.frames || d.points() != manifest.points {
        return Err(Error::SizeConflict(format!(
            "manifest says {}x{}, files hold {}x{}",
            manifest.frames,
            manifest.points,
            d.frames(),
            d.points()
        )));
    }
    Ok((d, manifest))
}

/// Contiguous split: the leading `fraction` of frames trains, the tail tests.
pub fn split_dataset(d: &Dataset, fraction: f64, _seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {fraction} outside (0, 1)"
        )));
    }
    let f = d.frames();
    if f < 2 {
        return Err(Error::InvalidArgument(format!("cannot split {f} frame(s)")));
    }
    let n = ((f as f64) * fraction).round().clamp(1.0, (f - 1) as f64) as usize;
    Ok((d.slice(0, n, Split::Train), d.slice(n, f, Split::Test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkMode {
    Train,
    Eval,
}

/// Frame indices into the source dataset, in presentation order.
pub type Chunk = Vec<usize>;

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkPlan {
    pub len: usize,
    pub chunks: Vec<Chunk>,
}

pub fn make_chunks(
    frames: usize,
    len: usize,
    mode: ChunkMode,
    rng: &mut impl Rng,
) -> Result<ChunkPlan> {
    if len == 0 {
        return Err(Error::InvalidArgument(
            "chunk length must be at least 1".into(),
        ));
    }
    let full = frames / len;
    let mut chunks: Vec<Chunk> = (0..full)
        .map(|c| (c * len..(c + 1) * len).collect())
        .collect();
    match mode {
        ChunkMode::Train => chunks.shuffle(rng),
        ChunkMode::Eval => {
            if full * len < frames {
                chunks.push((full * len..frames).collect());
            }
        }
    }
    Ok(ChunkPlan { len, chunks })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    Shuffle,
    Reverse,
}

pub fn perturb_order(chunk: &[usize], mode: Perturbation, rng: &mut impl Rng) -> Chunk {
    let mut out = chunk.to_vec();
    match mode {
        Perturbation::Shuffle => out.shuffle(rng),
        Perturbation::Reverse => out.reverse(),
    }
    out
}

/// Gathers the observation rows of `chunk`.
pub fn chunk_observations(d: &Dataset, chunk: &[usize]) -> Array2<f64> {
    d.observations.select(Axis(0), chunk)
}

/// A `3 x P` frame from one `[x.., y.., z..]` row.
pub fn frame_from_row(row: &[f64], points: usize) -> DMatrix<f64> {
    DMatrix::from_fn(3, points, |a, j| row[a * points + j])
}
