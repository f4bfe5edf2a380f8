//! Synthetic scanline-depth sequences and 16-bit depth-image datasets.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::SparseDepthFrame;
use crate::geometry::CameraIntrinsics;

/// Depth images store `meters * 256` as u16.
pub const DEPTH_UNITS_PER_METER: f64 = 256.0;

/// Ordered frames of one drive window.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    id: String,
    intrinsics: CameraIntrinsics,
    frames: Vec<SparseDepthFrame>,
}

impl Sequence {
    pub fn new(
        id: impl Into<String>,
        intrinsics: CameraIntrinsics,
        frames: Vec<SparseDepthFrame>,
    ) -> Result<Self> {
        let id = id.into();
        if frames.len() < 2 {
            return Err(Error::Frame(format!(
                "sequence {id} has {} frames, need at least 2",
                frames.len()
            )));
        }
        let (h, w) = (frames[0].height(), frames[0].width());
        if frames.iter().any(|f| f.height() != h || f.width() != w) {
            return Err(Error::Frame(format!("sequence {id} mixes frame sizes")));
        }
        intrinsics.validate()?;
        Ok(Sequence {
            id,
            intrinsics,
            frames,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn frames(&self) -> &[SparseDepthFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    /// Mean fraction of valid pixels over frames `range`.
    pub fn mean_density(&self, range: std::ops::Range<usize>) -> f64 {
        let n = range.len().max(1) as f64;
        self.frames[range].iter().map(|f| f.density()).sum::<f64>() / n
    }
}

/// Scene and sensor parameters of the synthetic generator.
///
/// Scenes are fronto-parallel rectangles and discs over a tilted background
/// plane that approaches the camera at a per-sequence forward speed. All
/// depths and velocities are multiples of 1/256 m so that 16-bit export is
/// lossless.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub n_objects: usize,
    pub z_min: f64,
    pub z_max: f64,
    /// Largest object speed in the image plane, pixels per frame per axis.
    pub max_pixel_velocity: f64,
    /// Largest object speed along Z, meters per frame.
    pub max_z_velocity: f64,
    /// Largest forward camera speed, meters per frame.
    pub max_ego_velocity: f64,
    /// Number of horizontal scan rows.
    pub scanlines: usize,
    /// Largest per-frame, per-row offset of a scan row, in rows.
    pub scanline_jitter: f64,
    /// Probability that a scanned pixel returns nothing.
    pub dropout: f64,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 48,
            width: 160,
            n_objects: 3,
            z_min: 4.0,
            z_max: 40.0,
            max_pixel_velocity: 1.0,
            max_z_velocity: 0.3,
            max_ego_velocity: 0.5,
            scanlines: 16,
            scanline_jitter: 0.0,
            dropout: 0.05,
            seq_len: 30,
            seed: 0,
        }
    }
}

const BG_NEAR: f64 = 0.75;
const BG_TILT: f64 = 0.125;

fn quantize(v: f64) -> f64 {
    (v * DEPTH_UNITS_PER_METER).round() / DEPTH_UNITS_PER_METER
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.height == 0 || self.width == 0 {
            return bad("resolution must be positive".into());
        }
        if self.scanlines == 0 || self.scanlines > self.height {
            return bad(format!(
                "scanlines must be in 1..={}, got {}",
                self.height, self.scanlines
            ));
        }
        if !(self.z_min > 0.0 && self.z_max > self.z_min) {
            return bad(format!("need 0 < z_min < z_max, got {} and {}", self.z_min, self.z_max));
        }
        if self.z_max * DEPTH_UNITS_PER_METER >= u16::MAX as f64 {
            return bad(format!("z_max {} exceeds the 16-bit depth range", self.z_max));
        }
        if self.seq_len < 2 {
            return bad("seq_len must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        for (name, v) in [
            ("max_pixel_velocity", self.max_pixel_velocity),
            ("max_z_velocity", self.max_z_velocity),
            ("max_ego_velocity", self.max_ego_velocity),
            ("scanline_jitter", self.scanline_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        let span = (self.seq_len - 1) as f64;
        if self.max_z_velocity * span >= self.z_max - self.z_min {
            return bad("objects at max_z_velocity leave [z_min, z_max] within a sequence".into());
        }
        let nearest_bg = BG_NEAR * (1.0 - BG_TILT) * self.z_max - self.max_ego_velocity * span;
        if nearest_bg <= self.z_min {
            return bad("background reaches z_min within a sequence; lower max_ego_velocity".into());
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::synthetic(self.height, self.width)
    }

    /// Expected fraction of valid pixels.
    pub fn expected_density(&self) -> f64 {
        self.scanlines as f64 / self.height as f64 * (1.0 - self.dropout)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Silhouette {
    Rect { half_w: f64, half_h: f64 },
    Disc { radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct SceneObject {
    shape: Silhouette,
    u0: f64,
    v0: f64,
    z0: f64,
    du: f64,
    dv: f64,
    dz: f64,
}

impl SceneObject {
    fn covers(&self, t: usize, u: f64, v: f64) -> bool {
        let cu = self.u0 + self.du * t as f64;
        let cv = self.v0 + self.dv * t as f64;
        match self.shape {
            Silhouette::Rect { half_w, half_h } => {
                (u - cu).abs() <= half_w && (v - cv).abs() <= half_h
            }
            Silhouette::Disc { radius } => (u - cu).powi(2) + (v - cv).powi(2) <= radius * radius,
        }
    }

    fn depth(&self, t: usize) -> f64 {
        self.z0 + self.dz * t as f64
    }
}

/// Sparse frames plus the dense scene they were sampled from.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub sequence: Sequence,
    pub dense: Vec<SparseDepthFrame>,
}

fn sym(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    if max > 0.0 {
        rng.gen_range(-max..=max)
    } else {
        0.0
    }
}

/// Renders one scene; the stream of `seed` is selected by `index`.
pub fn synth_sequence(cfg: &SynthConfig, index: u64) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let (h, w) = (cfg.height, cfg.width);
    let span = (cfg.seq_len - 1) as f64;

    let bg_base = quantize(rng.gen_range(BG_NEAR * cfg.z_max..=cfg.z_max));
    let bg_tilt = sym(&mut rng, BG_TILT) * bg_base;
    let ego = quantize(rng.gen_range(0.0..=cfg.max_ego_velocity));
    let bg_rows: Vec<f64> = (0..h)
        .map(|v| quantize(bg_base - bg_tilt * (v as f64 / h as f64 - 0.5) * 2.0))
        .collect();

    let objects: Vec<SceneObject> = (0..cfg.n_objects)
        .map(|_| {
            let dz = quantize(sym(&mut rng, cfg.max_z_velocity));
            let lo = cfg.z_min + (-dz * span).max(0.0);
            let hi = cfg.z_max - (dz * span).max(0.0);
            let shape = if rng.gen_bool(0.5) {
                Silhouette::Rect {
                    half_w: rng.gen_range(0.04..0.12) * w as f64,
                    half_h: rng.gen_range(0.1..0.3) * h as f64,
                }
            } else {
                Silhouette::Disc {
                    radius: rng.gen_range(0.1..0.3) * h as f64,
                }
            };
            SceneObject {
                shape,
                u0: rng.gen_range(0.0..w as f64),
                v0: rng.gen_range(0.0..h as f64),
                z0: quantize(rng.gen_range(lo..=hi)),
                du: sym(&mut rng, cfg.max_pixel_velocity),
                dv: sym(&mut rng, cfg.max_pixel_velocity),
                dz,
            }
        })
        .collect();

    let line_rows: Vec<f64> = (0..cfg.scanlines)
        .map(|i| (i as f64 + 0.5) * h as f64 / cfg.scanlines as f64 - 0.5)
        .collect();

    let mut frames = Vec::with_capacity(cfg.seq_len);
    let mut dense = Vec::with_capacity(cfg.seq_len);
    for t in 0..cfg.seq_len {
        let mut depth = vec![0.0; h * w];
        for v in 0..h {
            let bg = bg_rows[v] - ego * t as f64;
            for u in 0..w {
                let (pu, pv) = (u as f64 + 0.5, v as f64 + 0.5);
                depth[v * w + u] = objects
                    .iter()
                    .filter(|o| o.covers(t, pu, pv))
                    .map(|o| o.depth(t))
                    .fold(bg, f64::min);
            }
        }
        let mut scanned = vec![false; h * w];
        for &row in &line_rows {
            let r = (row + sym(&mut rng, cfg.scanline_jitter)).round();
            let r = r.clamp(0.0, (h - 1) as f64) as usize;
            scanned[r * w..(r + 1) * w].fill(true);
        }
        let sparse: Vec<f64> = depth
            .iter()
            .zip(&scanned)
            .map(|(&d, &s)| {
                // Draw for every pixel so the stream does not depend on the scene.
                let drop = rng.gen::<f64>() < cfg.dropout;
                if s && !drop {
                    d
                } else {
                    0.0
                }
            })
            .collect();
        frames.push(SparseDepthFrame::from_depth(h, w, sparse)?);
        dense.push(SparseDepthFrame::from_depth(h, w, depth)?);
    }
    Ok(SyntheticSequence {
        sequence: Sequence::new(format!("synth_{index:04}"), cfg.intrinsics(), frames)?,
        dense,
    })
}

/// Train and validation splits generated from one config.
pub fn synth_dataset(
    cfg: &SynthConfig,
    n_train: usize,
    n_val: usize,
) -> Result<(Vec<SyntheticSequence>, Vec<SyntheticSequence>)> {
    let train = (0..n_train as u64)
        .map(|i| synth_sequence(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let val = (n_train as u64..(n_train + n_val) as u64)
        .map(|i| synth_sequence(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, val))
}

/// Reads a 16-bit single-channel depth image (value / 256 = meters, 0 = invalid).
pub fn load_depth_png(path: &Path) -> Result<SparseDepthFrame> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!(
                    "expected 16-bit single-channel image, found {:?}",
                    other.color()
                ),
            })
        }
    };
    let (w, h) = img.dimensions();
    let depth = img
        .into_raw()
        .into_iter()
        .map(|v| v as f64 / DEPTH_UNITS_PER_METER)
        .collect();
    SparseDepthFrame::from_depth(h as usize, w as usize, depth)
}

/// Writes a frame as a 16-bit depth image. Valid depths round to the nearest
/// 1/256 m but never to 0.
pub fn save_depth_png(frame: &SparseDepthFrame, path: &Path) -> Result<()> {
    let raw: Vec<u16> = frame
        .depth()
        .iter()
        .map(|&d| {
            if d > 0.0 {
                (d * DEPTH_UNITS_PER_METER).round().clamp(1.0, u16::MAX as f64) as u16
            } else {
                0
            }
        })
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(frame.width() as u32, frame.height() as u32, raw)
            .expect("buffer matches frame size");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// File name of frame `t` inside a drive directory.
pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:06}.png")
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let keep = if want_dirs {
            path.is_dir()
        } else {
            path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
        };
        if keep {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Sliding windows of `seq_len` frames every `stride` frames over each
/// `<root>/<drive>/` directory. Intrinsics default to the synthetic camera.
pub fn load_sequences(
    root: &Path,
    seq_len: usize,
    stride: usize,
    intrinsics: Option<CameraIntrinsics>,
) -> Result<Vec<Sequence>> {
    if seq_len < 2 || stride == 0 {
        return Err(Error::Config(format!(
            "need seq_len >= 2 and stride >= 1, got {seq_len} and {stride}"
        )));
    }
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let mut out = Vec::new();
    for drive in sorted_entries(root, true)? {
        let files = sorted_entries(&drive, false)?;
        let name = drive
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if files.len() < seq_len {
            log::warn!(
                "skipping drive {name}: {} frames, need {seq_len}",
                files.len()
            );
            continue;
        }
        let frames = files
            .iter()
            .map(|f| load_depth_png(f))
            .collect::<Result<Vec<_>>>()?;
        let intr = intrinsics
            .unwrap_or_else(|| CameraIntrinsics::synthetic(frames[0].height(), frames[0].width()));
        let mut start = 0;
        while start + seq_len <= frames.len() {
            let window = frames[start..start + seq_len].to_vec();
            out.push(Sequence::new(format!("{name}@{start}"), intr, window)?);
            start += stride;
        }
    }
    Ok(out)
}

/// Nearest-neighbor downsampling of depth and validity together.
pub fn resize_nearest(frame: &SparseDepthFrame, height: usize, width: usize) -> Result<SparseDepthFrame> {
    let (h, w) = (frame.height(), frame.width());
    if height == 0 || width == 0 || height > h || width > w {
        return Err(Error::invalid(
            "resize_nearest",
            format!("cannot resize {h}x{w} to {height}x{width} (downsampling only)"),
        ));
    }
    let depth = (0..height * width)
        .map(|i| {
            let (y, x) = (i / width, i % width);
            frame.at(y * h / height, x * w / width)
        })
        .collect();
    SparseDepthFrame::from_depth(height, width, depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small() -> SynthConfig {
        SynthConfig {
            height: 24,
            width: 40,
            seq_len: 8,
            scanlines: 6,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let a = synth_sequence(&small(), 3).unwrap();
        let b = synth_sequence(&small(), 3).unwrap();
        assert_eq!(a, b);
        let c = synth_sequence(&small(), 4).unwrap();
        assert_ne!(a.sequence.frames(), c.sequence.frames());
    }

    #[test]
    fn sparse_frames_agree_with_dense_scene() {
        let s = synth_sequence(&small(), 0).unwrap();
        for (sp, de) in s.sequence.frames().iter().zip(&s.dense) {
            assert_eq!(de.valid_count(), de.depth().len());
            for (a, b) in sp.depth().iter().zip(de.depth()) {
                assert!(*a == 0.0 || a == b);
            }
        }
    }

    #[test]
    fn density_matches_scanline_count() {
        let cfg = SynthConfig {
            seq_len: 10,
            dropout: 0.1,
            ..SynthConfig::default()
        };
        let (seqs, _) = synth_dataset(&cfg, 5, 0).unwrap();
        let mut valid = 0usize;
        let mut total = 0usize;
        for s in &seqs {
            for f in s.sequence.frames() {
                valid += f.valid_count();
                total += f.depth().len();
            }
        }
        let density = valid as f64 / total as f64;
        let expect = cfg.expected_density();
        assert!((density - expect).abs() / expect < 0.1, "{density} vs {expect}");
    }

    #[test]
    fn object_depth_advances_by_its_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let o = SceneObject {
                shape: Silhouette::Disc { radius: 2.0 },
                u0: 0.0,
                v0: 0.0,
                z0: quantize(rng.gen_range(5.0..20.0)),
                du: 0.0,
                dv: 0.0,
                dz: quantize(rng.gen_range(-0.3..0.3)),
            };
            for t in 0..29 {
                assert_eq!(o.depth(t + 1), o.depth(t) + o.dz);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.scanlines = c.height + 1;
        assert!(c.validate().is_err());
        let mut c = small();
        c.z_min = 0.0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        assert!(synth_sequence(&c, 0).is_err());
        let mut c = small();
        c.max_ego_velocity = 100.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn png_round_trip_and_units() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let f = SparseDepthFrame::from_depth(2, 3, vec![0.0, 100.0, 1.0 / 256.0, 12.5, 0.0, 255.0]).unwrap();
        save_depth_png(&f, &p).unwrap();
        let g = load_depth_png(&p).unwrap();
        assert_eq!(f, g);
        assert_eq!(g.at(0, 1), 25600.0 / 256.0);
        assert!(!g.mask()[0]);
    }

    #[test]
    fn rejects_eight_bit_images() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        image::GrayImage::new(4, 4).save(&p).unwrap();
        assert!(matches!(load_depth_png(&p), Err(Error::Format { .. })));
    }

    fn write_drive(root: &Path, name: &str, n: usize) {
        let d = root.join(name);
        fs::create_dir_all(&d).unwrap();
        let f = SparseDepthFrame::from_depth(2, 2, vec![1.0, 0.0, 2.0, 3.0]).unwrap();
        for t in 0..n {
            save_depth_png(&f, &d.join(frame_file_name(t))).unwrap();
        }
    }

    #[test]
    fn window_counts() {
        let dir = tempfile::tempdir().unwrap();
        write_drive(dir.path(), "a", 30);
        write_drive(dir.path(), "b", 29);
        write_drive(dir.path(), "c", 60);
        let seqs = load_sequences(dir.path(), 30, 30, None).unwrap();
        assert_eq!(seqs.iter().filter(|s| s.id().starts_with("a@")).count(), 1);
        assert_eq!(seqs.iter().filter(|s| s.id().starts_with("b@")).count(), 0);
        let seqs = load_sequences(dir.path(), 30, 15, None).unwrap();
        let c = seqs.iter().filter(|s| s.id().starts_with("c@")).count();
        assert_eq!(c, (60 - 30) / 15 + 1);
        assert!(load_sequences(&dir.path().join("missing"), 30, 1, None).is_err());
    }

    #[test]
    fn resize_examples() {
        let f = synth_sequence(&small(), 0).unwrap().sequence.frames()[0].clone();
        assert_eq!(resize_nearest(&f, f.height(), f.width()).unwrap(), f);
        assert!(resize_nearest(&f, f.height() + 1, f.width()).is_err());

        let checker: Vec<f64> = (0..16).map(|i| if (i / 4 + i % 4) % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let c = SparseDepthFrame::from_depth(4, 4, checker).unwrap();
        let r = resize_nearest(&c, 2, 2).unwrap();
        assert_eq!(r.mask(), &[true, true, true, true]);
    }

    proptest! {
        #[test]
        fn resize_keeps_frame_invariant(
            h in 1usize..12, w in 1usize..12, seed in any::<u64>(),
            dh in 0usize..12, dw in 0usize..12,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let depth = (0..h * w).map(|_| if rng.gen_bool(0.4) { rng.gen_range(0.1..50.0) } else { 0.0 }).collect();
            let f = SparseDepthFrame::from_depth(h, w, depth).unwrap();
            let (nh, nw) = (1 + dh % h, 1 + dw % w);
            let r = resize_nearest(&f, nh, nw).unwrap();
            for (d, m) in r.depth().iter().zip(r.mask()) {
                prop_assert_eq!(*d > 0.0, *m);
            }
        }
    }
}
