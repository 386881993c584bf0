//! BEV grids, per-cell height logits, and the implicit foreground volume
//! `V[c,z,x,y] = sigmoid(H[z,x,y]) * F[c,x,y]`.
//!
//! Cells are addressed by their centers: cell `i` on an axis spanning
//! `[lo, hi]` with `n` cells has center `lo + (i + 0.5) * (hi - lo) / n`.

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::EgoPoint;

/// Horizontal layout shared by a BEV grid, its height logits and the lifted volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub cell_size: f64,
}

impl Default for PlaneSpec {
    /// 128 x 128 cells over `[-50, 50]^2` m.
    fn default() -> Self {
        Self {
            x_range: [-50.0, 50.0],
            y_range: [-50.0, 50.0],
            cell_size: 100.0 / 128.0,
        }
    }
}

fn cell_count(range: [f64; 2], cell: f64, axis: &str) -> Result<usize> {
    let span = range[1] - range[0];
    if !(span > 0.0) || !range.iter().all(|r| r.is_finite()) {
        return Err(Error::Dimension(format!("{axis} range {range:?} is empty")));
    }
    let n = span / cell;
    let rounded = n.round();
    if rounded < 1.0 || (n - rounded).abs() > 1e-9 * rounded.max(1.0) {
        return Err(Error::Dimension(format!(
            "{axis} span {span} is not a whole number of {cell} m cells"
        )));
    }
    Ok(rounded as usize)
}

impl PlaneSpec {
    pub fn new(x_range: [f64; 2], y_range: [f64; 2], cell_size: f64) -> Result<Self> {
        let s = Self {
            x_range,
            y_range,
            cell_size,
        };
        s.validate()?;
        Ok(s)
    }

    /// Square plane of `cells` x `cells` centered on `(cx, cy)` with side `side` meters.
    pub fn centered(cx: f64, cy: f64, side: f64, cells: usize) -> Result<Self> {
        let h = side / 2.0;
        Self::new([cx - h, cx + h], [cy - h, cy + h], side / cells as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) || !self.cell_size.is_finite() {
            return Err(Error::param(
                "cell_size",
                format!("must be positive, got {}", self.cell_size),
            ));
        }
        cell_count(self.x_range, self.cell_size, "x")?;
        cell_count(self.y_range, self.cell_size, "y")?;
        Ok(())
    }

    pub fn nx(&self) -> usize {
        ((self.x_range[1] - self.x_range[0]) / self.cell_size).round() as usize
    }

    pub fn ny(&self) -> usize {
        ((self.y_range[1] - self.y_range[0]) / self.cell_size).round() as usize
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.x_range[0] + (ix as f64 + 0.5) * self.cell_size,
            self.y_range[0] + (iy as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_range[0] && x <= self.x_range[1] && y >= self.y_range[0] && y <= self.y_range[1]
    }
}

/// Vertical layout of height logits and the volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeightSpec {
    pub z_range: [f64; 2],
    pub nz: usize,
}

impl Default for HeightSpec {
    fn default() -> Self {
        Self {
            z_range: [-1.0, 3.0],
            nz: 4,
        }
    }
}

impl HeightSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nz == 0 || !(self.z_range[1] > self.z_range[0]) {
            return Err(Error::Dimension(format!(
                "height axis needs nz >= 1 and a non-empty range, got {} over {:?}",
                self.nz, self.z_range
            )));
        }
        Ok(())
    }

    pub fn cell_height(&self) -> f64 {
        (self.z_range[1] - self.z_range[0]) / self.nz as f64
    }

    pub fn cell_center(&self, iz: usize) -> f64 {
        self.z_range[0] + (iz as f64 + 0.5) * self.cell_height()
    }
}

/// Height-free BEV features, `C x X x Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub plane: PlaneSpec,
    pub features: Array3<f64>,
}

impl BevGrid {
    pub fn new(plane: PlaneSpec, features: Array3<f64>) -> Result<Self> {
        plane.validate()?;
        let (_, x, y) = features.dim();
        if (x, y) != (plane.nx(), plane.ny()) {
            return Err(Error::Dimension(format!(
                "BEV features are {x}x{y} but the plane has {}x{} cells",
                plane.nx(),
                plane.ny()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("BEV features must be finite".into()));
        }
        Ok(Self { plane, features })
    }

    pub fn zeros(plane: PlaneSpec, channels: usize) -> Result<Self> {
        plane.validate()?;
        Ok(Self {
            features: Array3::zeros((channels, plane.nx(), plane.ny())),
            plane,
        })
    }

    pub fn channels(&self) -> usize {
        self.features.len_of(Axis(0))
    }
}

/// Per-cell height logits, `Z x X x Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightLogits {
    pub height: HeightSpec,
    pub logits: Array3<f64>,
}

impl HeightLogits {
    pub fn new(height: HeightSpec, logits: Array3<f64>) -> Result<Self> {
        height.validate()?;
        if logits.len_of(Axis(0)) != height.nz {
            return Err(Error::Dimension(format!(
                "{} logit planes for nz = {}",
                logits.len_of(Axis(0)),
                height.nz
            )));
        }
        Ok(Self { height, logits })
    }

    pub fn constant(height: HeightSpec, plane: &PlaneSpec, value: f64) -> Result<Self> {
        Self::new(height, Array3::from_elem((height.nz, plane.nx(), plane.ny()), value))
    }
}

/// Lifted volume, `C x Z x X x Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct IfVolume {
    pub plane: PlaneSpec,
    pub height: HeightSpec,
    pub values: Array4<f64>,
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on `(0, 1)`.
pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

pub fn lift_to_ifv(bev: &BevGrid, h: &HeightLogits) -> Result<IfVolume> {
    let (c, nx, ny) = bev.features.dim();
    let (nz, hx, hy) = h.logits.dim();
    if (hx, hy) != (nx, ny) {
        return Err(Error::Dimension(format!(
            "height logits are {hx}x{hy} but BEV features are {nx}x{ny}"
        )));
    }
    h.height.validate()?;
    let gates = h.logits.mapv(sigmoid);
    let mut values = Array4::zeros((c, nz, nx, ny));
    for ((ci, zi, xi, yi), v) in values.indexed_iter_mut() {
        *v = gates[(zi, xi, yi)] * bev.features[(ci, xi, yi)];
    }
    Ok(IfVolume {
        plane: bev.plane,
        height: h.height,
        values,
    })
}

/// Continuous voxel-center coordinate and its unclamped floor index.
#[inline]
fn axis_coord(v: f64, lo: f64, step: f64) -> (isize, f64) {
    let f = (v - lo) / step - 0.5;
    let i = f.floor();
    (i as isize, f - i)
}

impl IfVolume {
    pub fn zeros(plane: PlaneSpec, height: HeightSpec, channels: usize) -> Self {
        Self {
            values: Array4::zeros((channels, height.nz, plane.nx(), plane.ny())),
            plane,
            height,
        }
    }

    pub fn channels(&self) -> usize {
        self.values.len_of(Axis(0))
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.values.dim()
    }

    pub fn voxel_center(&self, ix: usize, iz: usize, iy: usize) -> Result<EgoPoint> {
        let (_, nz, nx, ny) = self.values.dim();
        if ix >= nx || iz >= nz || iy >= ny {
            return Err(Error::IndexOutOfRange(format!(
                "voxel ({ix}, {iz}, {iy}) outside {nx} x {nz} x {ny}"
            )));
        }
        let (x, y) = self.plane.cell_center(ix, iy);
        Ok(EgoPoint::new(x, y, self.height.cell_center(iz)))
    }

    /// `(ix, iz, iy)` of the voxel containing `p`, if inside the volume.
    pub fn nearest_voxel(&self, p: &EgoPoint) -> Option<(usize, usize, usize)> {
        if !self.contains(p) {
            return None;
        }
        let (_, nz, nx, ny) = self.values.dim();
        let idx = |v: f64, lo: f64, step: f64, n: usize| (((v - lo) / step).floor() as usize).min(n - 1);
        Some((
            idx(p.x, self.plane.x_range[0], self.plane.cell_size, nx),
            idx(p.z, self.height.z_range[0], self.height.cell_height(), nz),
            idx(p.y, self.plane.y_range[0], self.plane.cell_size, ny),
        ))
    }

    pub fn contains(&self, p: &EgoPoint) -> bool {
        self.plane.contains(p.x, p.y) && p.z >= self.height.z_range[0] && p.z <= self.height.z_range[1]
    }

    /// Trilinear interpolation between voxel centers, adding every channel
    /// into `out`. Neighbors beyond the grid count as zero and points outside
    /// the volume bounds contribute nothing.
    pub fn accumulate_trilinear(&self, p: &EgoPoint, out: &mut [f64]) {
        if !self.contains(p) {
            return;
        }
        let (c, nz, nx, ny) = self.values.dim();
        debug_assert_eq!(out.len(), c);
        let (ix, fx) = axis_coord(p.x, self.plane.x_range[0], self.plane.cell_size);
        let (iy, fy) = axis_coord(p.y, self.plane.y_range[0], self.plane.cell_size);
        let (iz, fz) = axis_coord(p.z, self.height.z_range[0], self.height.cell_height());
        let vals = self.values.view();
        for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
            let z = iz + dz;
            if z < 0 || z as usize >= nz || wz == 0.0 {
                continue;
            }
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let x = ix + dx;
                if x < 0 || x as usize >= nx || wx == 0.0 {
                    continue;
                }
                for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                    let y = iy + dy;
                    if y < 0 || y as usize >= ny || wy == 0.0 {
                        continue;
                    }
                    let w = wz * wx * wy;
                    let (z, x, y) = (z as usize, x as usize, y as usize);
                    for (ci, o) in out.iter_mut().enumerate().take(c) {
                        *o += w * vals[(ci, z, x, y)];
                    }
                }
            }
        }
    }

    pub fn sample_trilinear(&self, p: &EgoPoint) -> Vec<f64> {
        let mut out = vec![0.0; self.channels()];
        self.accumulate_trilinear(p, &mut out);
        out
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            values: self.values.mapv(|v| a * v),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn small_plane() -> PlaneSpec {
        PlaneSpec::new([-2.0, 2.0], [-1.0, 1.0], 0.5).unwrap()
    }

    #[test]
    fn zero_logits_halve_features() {
        let plane = small_plane();
        let feats = Array3::from_shape_fn((2, 8, 4), |(c, x, y)| (c + 2 * x) as f64 - y as f64 * 0.3);
        let bev = BevGrid::new(plane, feats.clone()).unwrap();
        let h = HeightLogits::constant(HeightSpec::default(), &plane, 0.0).unwrap();
        let v = lift_to_ifv(&bev, &h).unwrap();
        assert_eq!(v.dims(), (2, 4, 8, 4));
        for ((c, _, x, y), val) in v.values.indexed_iter() {
            assert_eq!(*val, 0.5 * feats[(c, x, y)]);
        }
        let zero = BevGrid::zeros(plane, 3).unwrap();
        assert!(lift_to_ifv(&zero, &h).unwrap().values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn saturated_column() {
        let plane = PlaneSpec::new([0.0, 1.0], [0.0, 1.0], 1.0).unwrap();
        let bev = BevGrid::new(plane, Array3::from_elem((1, 1, 1), 2.0)).unwrap();
        let logits = Array3::from_shape_vec((4, 1, 1), vec![-20.0, 20.0, 0.0, 0.0]).unwrap();
        let h = HeightLogits::new(HeightSpec::default(), logits).unwrap();
        let v = lift_to_ifv(&bev, &h).unwrap();
        let col: Vec<f64> = (0..4).map(|z| v.values[(0, z, 0, 0)]).collect();
        let s = |t: f64| 1.0 / (1.0 + (-t).exp());
        assert_abs_diff_eq!(col[0], 2.0 * s(-20.0), epsilon = 1e-20);
        assert_abs_diff_eq!(col[0], 4.122307e-9, epsilon = 1e-14);
        assert_abs_diff_eq!(col[1], 2.0 * s(20.0), epsilon = 1e-15);
        assert_eq!(col[2], 1.0);
        assert_eq!(col[3], 1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let plane = small_plane();
        let bev = BevGrid::zeros(plane, 1).unwrap();
        let h = HeightLogits::new(HeightSpec::default(), Array3::zeros((4, 8, 5))).unwrap();
        assert!(matches!(lift_to_ifv(&bev, &h), Err(Error::Dimension(_))));
        assert!(BevGrid::new(plane, Array3::zeros((1, 7, 4))).is_err());
        assert!(PlaneSpec::new([-1.0, 1.0], [0.0, 1.0], 0.3).is_err());
        assert!(HeightLogits::new(HeightSpec::default(), Array3::zeros((3, 8, 4))).is_err());
    }

    #[test]
    fn voxel_centers_on_default_grid() {
        let v = IfVolume::zeros(PlaneSpec::default(), HeightSpec::default(), 1);
        let first = v.voxel_center(0, 0, 0).unwrap();
        assert_eq!(first.x, -50.0 + 0.5 * (100.0 / 128.0));
        assert_eq!(first.y, first.x);
        assert_eq!(first.z, -0.5);
        let last = v.voxel_center(127, 3, 127).unwrap();
        assert_eq!(last.x, -first.x);
        assert_eq!(last.y, -first.y);
        assert_eq!(last.z, 2.5);
        assert!(matches!(v.voxel_center(128, 0, 0), Err(Error::IndexOutOfRange(_))));
        assert!(v.voxel_center(0, 4, 0).is_err());
    }

    #[test]
    fn lookup_inverts_centers() {
        let v = IfVolume::zeros(PlaneSpec::default(), HeightSpec::default(), 1);
        for ix in (0..128).step_by(7) {
            for iz in 0..4 {
                for iy in (0..128).step_by(11) {
                    let c = v.voxel_center(ix, iz, iy).unwrap();
                    assert_eq!(v.nearest_voxel(&c), Some((ix, iz, iy)));
                }
            }
        }
        assert_eq!(v.nearest_voxel(&EgoPoint::new(50.0, 50.0, 3.0)), Some((127, 3, 127)));
        assert_eq!(v.nearest_voxel(&EgoPoint::new(50.1, 0.0, 0.0)), None);
    }

    #[test]
    fn trilinear_hits_centers_and_interpolates() {
        let plane = small_plane();
        let mut v = IfVolume::zeros(plane, HeightSpec::default(), 2);
        v.values[(0, 1, 3, 2)] = 4.0;
        v.values[(1, 1, 4, 2)] = 2.0;
        let a = v.voxel_center(3, 1, 2).unwrap();
        let b = v.voxel_center(4, 1, 2).unwrap();
        assert_eq!(v.sample_trilinear(&a), vec![4.0, 0.0]);
        let mid = EgoPoint::new(0.5 * (a.x + b.x), a.y, a.z);
        assert_eq!(v.sample_trilinear(&mid), vec![2.0, 1.0]);
        // beyond the bounds nothing leaks in
        assert_eq!(v.sample_trilinear(&EgoPoint::new(a.x, a.y, 3.01)), vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn monotone_and_bounded(
            feat in 0.0..5.0f64,
            base in prop::collection::vec(-30.0..30.0f64, 4),
            bump in 0.0..10.0f64,
            which in 0usize..4,
        ) {
            let plane = PlaneSpec::new([0.0, 1.0], [0.0, 1.0], 1.0).unwrap();
            let bev = BevGrid::new(plane, Array3::from_elem((1, 1, 1), feat)).unwrap();
            let mk = |l: Vec<f64>| HeightLogits::new(HeightSpec::default(), Array3::from_shape_vec((4, 1, 1), l).unwrap()).unwrap();
            let lo = lift_to_ifv(&bev, &mk(base.clone())).unwrap();
            let mut raised = base.clone();
            raised[which] += bump;
            let hi = lift_to_ifv(&bev, &mk(raised)).unwrap();
            prop_assert!(hi.values[(0, which, 0, 0)] >= lo.values[(0, which, 0, 0)]);
            for z in 0..4 {
                prop_assert!(lo.values[(0, z, 0, 0)].abs() <= feat.abs());
            }
            prop_assert_eq!(lo.plane, plane);
        }

        #[test]
        fn lifted_values_recompute(
            feats in prop::collection::vec(-3.0..3.0f64, 2 * 8 * 4),
            logits in prop::collection::vec(-15.0..15.0f64, 4 * 8 * 4),
        ) {
            let plane = small_plane();
            let f = Array3::from_shape_vec((2, 8, 4), feats).unwrap();
            let l = Array3::from_shape_vec((4, 8, 4), logits).unwrap();
            let v = lift_to_ifv(&BevGrid::new(plane, f.clone()).unwrap(), &HeightLogits::new(HeightSpec::default(), l.clone()).unwrap()).unwrap();
            for ((c, z, x, y), val) in v.values.indexed_iter() {
                let expect = f[(c, x, y)] / (1.0 + (-l[(z, x, y)]).exp());
                prop_assert!((val - expect).abs() <= 1e-15 * expect.abs().max(1.0));
                prop_assert!(val.abs() <= f[(c, x, y)].abs());
            }
        }

        #[test]
        fn logit_inverts_sigmoid(t in -15.0..15.0f64) {
            prop_assert!((logit(sigmoid(t)) - t).abs() < 1e-6);
        }
    }
}
