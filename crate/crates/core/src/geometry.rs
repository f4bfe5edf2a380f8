//! Pinhole projection between camera-frame point clouds and depth maps, and
//! the Chamfer distance between clouds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::SparseDepthFrame;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let intr = CameraIntrinsics { fx, fy, cx, cy };
        intr.validate()?;
        Ok(intr)
    }

    /// fx = fy = W with the principal point at the image center.
    pub fn synthetic(height: usize, width: usize) -> Self {
        CameraIntrinsics {
            fx: width as f64,
            fy: width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx.is_finite()
            && self.cy.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "intrinsics",
                format!("need finite fx, fy > 0, got {self:?}"),
            ))
        }
    }

    /// Largest distance between a surviving point and its reprojection at depth `d`.
    pub fn round_trip_bound(&self, d: f64) -> f64 {
        d * (0.5 / self.fx).max(0.5 / self.fy) * std::f64::consts::SQRT_2
    }
}

/// Points in meters in the camera frame (Z forward).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point_cloud", "non-finite coordinate"));
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn translated(&self, t: [f64; 3]) -> PointCloud {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub frame: SparseDepthFrame,
    /// Points behind the camera, outside the image, or hidden by a nearer point.
    pub dropped: usize,
}

/// Projects with nearest-pixel rounding, keeping the smallest Z per pixel.
pub fn project(
    cloud: &PointCloud,
    intr: &CameraIntrinsics,
    height: usize,
    width: usize,
) -> Result<Projection> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("project", "image size must be positive"));
    }
    intr.validate()?;
    let mut depth = vec![0.0; height * width];
    let mut dropped = 0;
    for &[x, y, z] in cloud.points() {
        if z <= 0.0 {
            dropped += 1;
            continue;
        }
        let u = (intr.fx * x / z + intr.cx).round();
        let v = (intr.fy * y / z + intr.cy).round();
        if !(u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64) {
            dropped += 1;
            continue;
        }
        let slot = &mut depth[v as usize * width + u as usize];
        if *slot == 0.0 {
            *slot = z;
        } else {
            dropped += 1;
            *slot = slot.min(z);
        }
    }
    Ok(Projection {
        frame: SparseDepthFrame::from_depth(height, width, depth)?,
        dropped,
    })
}

/// One point per valid pixel, in row-major pixel order.
pub fn backproject(frame: &SparseDepthFrame, intr: &CameraIntrinsics) -> PointCloud {
    let w = frame.width();
    let points = frame
        .depth()
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > 0.0)
        .map(|(i, &d)| {
            let (v, u) = ((i / w) as f64, (i % w) as f64);
            [(u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d]
        })
        .collect();
    PointCloud { points }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Static 3-d tree over a point set for exact nearest-neighbor distances.
pub struct KdTree {
    points: Vec<[f64; 3]>,
    axes: Vec<u8>,
}

impl KdTree {
    /// Points are reordered in place into an implicit balanced tree.
    pub fn new(points: &[[f64; 3]]) -> Self {
        let mut points = points.to_vec();
        let mut axes = vec![0u8; points.len()];
        Self::build(&mut points, &mut axes);
        KdTree { points, axes }
    }

    fn build(points: &mut [[f64; 3]], axes: &mut [u8]) {
        if points.len() <= 1 {
            return;
        }
        let axis = (0..3)
            .max_by(|&a, &b| {
                let spread = |k: usize| {
                    let (lo, hi) = points.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| {
                        (lo.min(p[k]), hi.max(p[k]))
                    });
                    hi - lo
                };
                spread(a).total_cmp(&spread(b))
            })
            .expect("three axes");
        let mid = points.len() / 2;
        points.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
        axes[mid] = axis as u8;
        let (lp, rp) = points.split_at_mut(mid);
        let (la, ra) = axes.split_at_mut(mid);
        Self::build(lp, la);
        Self::build(&mut rp[1..], &mut ra[1..]);
    }

    /// Squared distance from `q` to its nearest stored point.
    pub fn nearest_dist2(&self, q: &[f64; 3]) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = f64::INFINITY;
        self.search(0, self.points.len(), q, &mut best);
        Some(best)
    }

    fn search(&self, lo: usize, hi: usize, q: &[f64; 3], best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[mid];
        *best = best.min(dist2(p, q));
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, q, best);
        if delta * delta <= *best {
            self.search(far.0, far.1, q, best);
        }
    }
}

fn one_way(from: &PointCloud, to: &KdTree) -> f64 {
    let total: f64 = from
        .points()
        .iter()
        .map(|p| to.nearest_dist2(p).expect("non-empty"))
        .sum();
    total / from.len() as f64
}

/// Mean squared nearest-neighbor distance in both directions, in m².
pub fn chamfer(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let tp = KdTree::new(p.points());
    let tq = KdTree::new(q.points());
    Ok(one_way(p, &tq) + one_way(q, &tp))
}

/// Quadratic-time Chamfer distance.
pub fn chamfer_brute_force(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let way = |a: &PointCloud, b: &PointCloud| {
        let total: f64 = a
            .points()
            .iter()
            .map(|x| {
                b.points()
                    .iter()
                    .map(|y| dist2(x, y))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / a.len() as f64
    };
    Ok(way(p, q) + way(q, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 32.0, 16.0).unwrap()
    }

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    #[test]
    fn projects_principal_ray_to_principal_point() {
        let p = project(&cloud(&[[0.0, 0.0, 5.0]]), &intr(), 32, 64).unwrap();
        assert_eq!(p.frame.at(16, 32), 5.0);
        assert_eq!(p.frame.valid_count(), 1);
        assert_eq!(p.dropped, 0);
    }

    #[test]
    fn drops_points_behind_camera_and_out_of_frame() {
        let c = cloud(&[[0.0, 0.0, -1.0], [0.0, 0.0, 0.0], [100.0, 0.0, 1.0]]);
        let p = project(&c, &intr(), 32, 64).unwrap();
        assert_eq!(p.frame.valid_count(), 0);
        assert_eq!(p.dropped, 3);
    }

    #[test]
    fn z_buffer_keeps_nearest() {
        for order in [[4.0, 7.0], [7.0, 4.0]] {
            let c = cloud(&[[0.0, 0.0, order[0]], [0.0, 0.0, order[1]]]);
            let p = project(&c, &intr(), 32, 64).unwrap();
            assert_eq!(p.frame.at(16, 32), 4.0);
            assert_eq!(p.dropped, 1);
        }
    }

    #[test]
    fn backprojects_by_hand() {
        let mut depth = vec![0.0; 32 * 64];
        depth[16 * 64 + 32] = 5.0;
        depth[0] = 2.0;
        let f = SparseDepthFrame::from_depth(32, 64, depth).unwrap();
        let c = backproject(&f, &intr());
        assert_eq!(c.points(), &[[-0.64, -0.32, 2.0], [0.0, 0.0, 5.0]]);
        assert!(backproject(&SparseDepthFrame::empty(4, 4), &intr()).is_empty());
    }

    #[test]
    fn chamfer_examples() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        let c = cloud(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0], [4.0, 4.0, 4.0]]);
        assert_eq!(chamfer(&c, &c).unwrap(), 0.0);
        assert!(matches!(chamfer(&a, &PointCloud::default()), Err(Error::EmptyCloud)));
        assert!(matches!(chamfer_brute_force(&PointCloud::default(), &a), Err(Error::EmptyCloud)));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 1.0]]).is_err());
        assert!(project(&cloud(&[]), &intr(), 0, 4).is_err());
    }

    fn arb_cloud(max: usize) -> impl Strategy<Value = PointCloud> {
        prop::collection::vec(prop::array::uniform3(-20.0f64..20.0), 1..max)
            .prop_map(|p| PointCloud::new(p).unwrap())
    }

    proptest! {
        #[test]
        fn kd_tree_matches_brute_force(p in arb_cloud(60), q in arb_cloud(60)) {
            prop_assert_eq!(chamfer(&p, &q).unwrap(), chamfer_brute_force(&p, &q).unwrap());
        }

        #[test]
        fn chamfer_is_symmetric(p in arb_cloud(40), q in arb_cloud(40)) {
            prop_assert_eq!(chamfer(&p, &q).unwrap(), chamfer(&q, &p).unwrap());
        }

        #[test]
        fn chamfer_is_translation_invariant(
            p in arb_cloud(40),
            q in arb_cloud(40),
            t in prop::array::uniform3(-50.0f64..50.0),
        ) {
            let a = chamfer(&p, &q).unwrap();
            let b = chamfer(&p.translated(t), &q.translated(t)).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-300) + 1e-9);
        }

        #[test]
        fn round_trip_within_half_pixel(
            pts in prop::collection::vec(
                (-0.4f64..0.4, -0.4f64..0.4, 0.5f64..80.0), 1..50),
        ) {
            let intr = CameraIntrinsics::synthetic(48, 160);
            let c = PointCloud::new(pts.iter().map(|&(a, b, z)| [a * z, b * z / 4.0, z]).collect()).unwrap();
            let proj = project(&c, &intr, 48, 160).unwrap();
            let back = backproject(&proj.frame, &intr);
            prop_assert_eq!(back.len() + proj.dropped, c.len());
            for q in back.points() {
                let d = c
                    .points()
                    .iter()
                    .filter(|p| p[2] == q[2])
                    .map(|p| dist2(p, q).sqrt())
                    .fold(f64::INFINITY, f64::min);
                prop_assert!(d <= intr.round_trip_bound(q[2]) * (1.0 + 1e-12));
            }
        }
    }
}
