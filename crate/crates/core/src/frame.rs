//! Sparse depth frames and the dense/mask composition.

use crate::autodiff::{Shape, Tensor};
use crate::error::{Error, Result};

/// Depth in meters with a validity mask. Invalid pixels carry depth exactly 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepthFrame {
    height: usize,
    width: usize,
    depth: Vec<f64>,
    mask: Vec<bool>,
}

impl SparseDepthFrame {
    /// Builds a frame from depths, deriving validity from `depth > 0`.
    pub fn from_depth(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != height * width {
            return Err(Error::Frame(format!(
                "{} depth values for {height}x{width}",
                depth.len()
            )));
        }
        if let Some(bad) = depth.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(Error::Frame(format!("depth {bad} is negative or non-finite")));
        }
        let mask = depth.iter().map(|&d| d > 0.0).collect();
        Ok(SparseDepthFrame {
            height,
            width,
            depth,
            mask,
        })
    }

    /// Builds a frame from explicit depth and mask, checking `depth > 0 <=> mask`.
    pub fn new(height: usize, width: usize, depth: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::Frame(format!(
                "{} mask values for {height}x{width}",
                mask.len()
            )));
        }
        let frame = SparseDepthFrame::from_depth(height, width, depth)?;
        if frame.mask != mask {
            return Err(Error::Frame(
                "mask disagrees with depth > 0 on at least one pixel".into(),
            ));
        }
        Ok(frame)
    }

    pub fn empty(height: usize, width: usize) -> Self {
        SparseDepthFrame {
            height,
            width,
            depth: vec![0.0; height * width],
            mask: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn density(&self) -> f64 {
        self.valid_count() as f64 / self.mask.len().max(1) as f64
    }

    /// Rejects depths at or beyond `max_range`.
    pub fn check_range(&self, max_range: f64) -> Result<()> {
        match self.depth.iter().find(|&&d| d >= max_range) {
            Some(d) => Err(Error::Frame(format!("depth {d} m beyond max range {max_range} m"))),
            None => Ok(()),
        }
    }

    pub fn mask_tensor(&self) -> Tensor {
        let data = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), data).expect("sized")
    }

    pub fn depth_tensor(&self) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), self.depth.clone())
            .expect("sized")
    }
}

/// Binarizes `mask_prob >= threshold` and keeps `dense` only on set pixels.
///
/// Both maps are `height * width` in row-major order.
pub fn compose(
    dense: &[f64],
    mask_prob: &[f64],
    height: usize,
    width: usize,
    threshold: f64,
) -> Result<SparseDepthFrame> {
    if dense.len() != height * width || mask_prob.len() != height * width {
        return Err(Error::shape(
            "compose",
            format!(
                "dense {} / mask {} for {height}x{width}",
                dense.len(),
                mask_prob.len()
            ),
        ));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("compose", format!("threshold {threshold} outside (0, 1)")));
    }
    let mut depth = Vec::with_capacity(dense.len());
    let mut mask = Vec::with_capacity(dense.len());
    for (&d, &p) in dense.iter().zip(mask_prob) {
        // A non-positive dense value cannot be marked valid.
        let keep = p >= threshold && d > 0.0 && d.is_finite();
        depth.push(if keep { d } else { 0.0 });
        mask.push(keep);
    }
    Ok(SparseDepthFrame {
        height,
        width,
        depth,
        mask,
    })
}

/// A batch of same-sized frames laid out as (n, 1, h, w) tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBatch {
    pub depth: Tensor,
    pub validity: Tensor,
}

impl FrameBatch {
    pub fn from_frames<'a, I>(frames: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a SparseDepthFrame>,
    {
        let mut depth = Vec::new();
        let mut validity = Vec::new();
        let mut dims = None;
        let mut n = 0;
        for f in frames {
            let d = (f.height, f.width);
            if *dims.get_or_insert(d) != d {
                return Err(Error::shape(
                    "FrameBatch",
                    format!("{}x{} vs {}x{}", d.0, d.1, dims.unwrap().0, dims.unwrap().1),
                ));
            }
            depth.extend_from_slice(&f.depth);
            validity.extend(f.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
            n += 1;
        }
        let (h, w) = dims.ok_or_else(|| Error::invalid("FrameBatch", "no frames"))?;
        let shape = Shape::new(n, 1, h, w);
        Ok(FrameBatch {
            depth: Tensor::from_vec(shape, depth)?,
            validity: Tensor::from_vec(shape, validity)?,
        })
    }

    pub fn len(&self) -> usize {
        self.depth.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, n: usize) -> SparseDepthFrame {
        let s = self.depth.shape();
        SparseDepthFrame {
            height: s.h,
            width: s.w,
            depth: self.depth.batch_item(n).to_vec(),
            mask: self.validity.batch_item(n).iter().map(|&v| v > 0.0).collect(),
        }
    }

    pub fn frames(&self) -> Vec<SparseDepthFrame> {
        (0..self.len()).map(|n| self.frame(n)).collect()
    }
}
