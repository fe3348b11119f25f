//! Volume container, slice geometry and coordinate conventions.
//!
//! Axis order is always `(z, y, x)`. Coordinate triples handed to the
//! coordinate network follow the same order, each component normalized to
//! `[-1, 1]` with voxel-center alignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Map a voxel index on an axis of extent `n` to its normalized center
/// coordinate `2 (i + 0.5) / n - 1`.
pub fn normalize_index(i: usize, n: usize) -> Result<f64> {
    if n == 0 || i >= n {
        return Err(Error::Bounds {
            index: i,
            extent: n,
        });
    }
    Ok(2.0 * (i as f64 + 0.5) / n as f64 - 1.0)
}

/// Plane family of an axis-aligned slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    /// Fixed `y`; rows run along `z`, columns along `x`.
    ZX,
    /// Fixed `x`; rows run along `z`, columns along `y`.
    ZY,
    /// Fixed `z`; rows run along `y`, columns along `x`.
    XY,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::ZX, Orientation::ZY, Orientation::XY];

    /// Index into `(z, y, x)` of the fixed axis.
    pub fn fixed_axis(self) -> usize {
        match self {
            Orientation::ZX => 1,
            Orientation::ZY => 2,
            Orientation::XY => 0,
        }
    }

    /// Indices into `(z, y, x)` of the row and column axes.
    pub fn plane_axes(self) -> (usize, usize) {
        match self {
            Orientation::ZX => (0, 2),
            Orientation::ZY => (0, 1),
            Orientation::XY => (1, 2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Orientation::ZX => "ZX",
            Orientation::ZY => "ZY",
            Orientation::XY => "XY",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "ZX" | "zx" => Ok(Orientation::ZX),
            "ZY" | "zy" => Ok(Orientation::ZY),
            "XY" | "xy" => Ok(Orientation::XY),
            other => Err(Error::Param(format!("unknown orientation tag {other:?}"))),
        }
    }

    /// Extent of the plane `(rows, cols)` in a grid of the given dims.
    pub fn plane_shape(self, dims: [usize; 3]) -> (usize, usize) {
        let (r, c) = self.plane_axes();
        (dims[r], dims[c])
    }
}

/// An axis-aligned plane to be sampled, expressed in a target grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlicePlan {
    pub orientation: Orientation,
    pub index: usize,
    /// `(rows, cols)` of the sampled image.
    pub shape: (usize, usize),
    /// Offset of the sampled window inside the plane, for sub-volume work.
    pub origin: (usize, usize),
    /// Target grid `(N_z, N_y, N_x)` the plan is expressed in.
    pub coord_dims: [usize; 3],
}

impl SlicePlan {
    /// Full-plane plan.
    pub fn full(orientation: Orientation, index: usize, coord_dims: [usize; 3]) -> Result<Self> {
        let plan = SlicePlan {
            orientation,
            index,
            shape: orientation.plane_shape(coord_dims),
            origin: (0, 0),
            coord_dims,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let fixed = self.orientation.fixed_axis();
        if self.coord_dims.contains(&0) {
            return Err(Error::Param(format!(
                "coordinate dims must be positive, got {:?}",
                self.coord_dims
            )));
        }
        if self.index >= self.coord_dims[fixed] {
            return Err(Error::Bounds {
                index: self.index,
                extent: self.coord_dims[fixed],
            });
        }
        let (ra, ca) = self.orientation.plane_axes();
        let (rows, cols) = self.shape;
        if rows == 0
            || cols == 0
            || self.origin.0 + rows > self.coord_dims[ra]
            || self.origin.1 + cols > self.coord_dims[ca]
        {
            return Err(Error::Shape(format!(
                "window {:?} at {:?} does not fit {} plane of {:?}",
                self.shape,
                self.origin,
                self.orientation.name(),
                self.coord_dims
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid index `(z, y, x)` of pixel `(r, c)` of the window.
    pub fn voxel(&self, r: usize, c: usize) -> [usize; 3] {
        let (ra, ca) = self.orientation.plane_axes();
        let mut v = [0usize; 3];
        v[self.orientation.fixed_axis()] = self.index;
        v[ra] = self.origin.0 + r;
        v[ca] = self.origin.1 + c;
        v
    }
}

/// Expand a plan into row-major normalized `(z, y, x)` coordinate triples.
pub fn expand_slice(plan: &SlicePlan) -> Result<Vec<[f64; 3]>> {
    plan.validate()?;
    let d = plan.coord_dims;
    let axis_coords: Vec<Vec<f64>> = (0..3)
        .map(|a| {
            (0..d[a])
                .map(|i| normalize_index(i, d[a]))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(plan.len());
    for r in 0..plan.shape.0 {
        for c in 0..plan.shape.1 {
            let v = plan.voxel(r, c);
            out.push([
                axis_coords[0][v[0]],
                axis_coords[1][v[1]],
                axis_coords[2][v[2]],
            ]);
        }
    }
    Ok(out)
}

/// A multi-channel 2D image, layout `(channel, row, col)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Image<T> {
    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Image {
            channels,
            rows,
            cols,
            data: vec![T::default(); channels * rows * cols],
        }
    }

    pub fn from_vec(channels: usize, rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * rows * cols {
            return Err(Error::Shape(format!(
                "image data of length {} does not match {channels}x{rows}x{cols}",
                data.len()
            )));
        }
        Ok(Image {
            channels,
            rows,
            cols,
            data,
        })
    }

    #[inline]
    pub fn at(&self, ch: usize, r: usize, c: usize) -> T {
        self.data[(ch * self.rows + r) * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, ch: usize, r: usize, c: usize) -> &mut T {
        &mut self.data[(ch * self.rows + r) * self.cols + c]
    }

    pub fn channel(&self, ch: usize) -> &[T] {
        let n = self.rows * self.cols;
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn same_shape<U>(&self, other: &Image<U>) -> bool {
        self.channels == other.channels && self.rows == other.rows && self.cols == other.cols
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Image<U> {
        Image {
            channels: self.channels,
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// A `C`-channel 3D scalar field with intensities normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    dims: [usize; 3],
    channels: usize,
    data: Vec<f32>,
    spacing: [f64; 3],
    /// Per-channel affine `stored = raw * scale + offset` applied at ingestion.
    scale: Vec<f64>,
    offset: Vec<f64>,
}

impl VolumeGrid {
    /// Build a grid from data already in `[0, 1]`.
    pub fn new(
        dims: [usize; 3],
        channels: usize,
        data: Vec<f32>,
        spacing: [f64; 3],
    ) -> Result<Self> {
        let grid = VolumeGrid {
            dims,
            channels,
            data,
            spacing,
            scale: vec![1.0; channels],
            offset: vec![0.0; channels],
        };
        grid.check_shape()?;
        if let Some(v) = grid.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Param(format!("intensity {v} outside [0, 1]")));
        }
        Ok(grid)
    }

    /// Build a grid from arbitrary finite raw values, min-max normalizing each
    /// channel into `[0, 1]` if any value lies outside that range.
    pub fn from_raw(
        dims: [usize; 3],
        channels: usize,
        data: Vec<f32>,
        spacing: [f64; 3],
    ) -> Result<Self> {
        let mut grid = Self::new_unchecked_range(dims, channels, data, spacing)?;
        grid.normalize_ingested()?;
        Ok(grid)
    }

    pub(crate) fn new_unchecked_range(
        dims: [usize; 3],
        channels: usize,
        data: Vec<f32>,
        spacing: [f64; 3],
    ) -> Result<Self> {
        let grid = VolumeGrid {
            dims,
            channels,
            data,
            spacing,
            scale: vec![1.0; channels],
            offset: vec![0.0; channels],
        };
        grid.check_shape()?;
        Ok(grid)
    }

    /// Constant-valued grid.
    pub fn filled(
        dims: [usize; 3],
        channels: usize,
        value: f32,
        spacing: [f64; 3],
    ) -> Result<Self> {
        let n = channels * dims.iter().product::<usize>();
        Self::new(dims, channels, vec![value; n], spacing)
    }

    fn check_shape(&self) -> Result<()> {
        if self.channels == 0 || self.dims.contains(&0) {
            return Err(Error::Shape(format!(
                "volume needs positive dims and channels, got {:?} x {}",
                self.dims, self.channels
            )));
        }
        let n = self.channels * self.dims.iter().product::<usize>();
        if self.data.len() != n {
            return Err(Error::Shape(format!(
                "data length {} != {} channels x {:?}",
                self.data.len(),
                self.channels,
                self.dims
            )));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Param(format!(
                "spacing must be strictly positive, got {:?}",
                self.spacing
            )));
        }
        if self.scale.len() != self.channels || self.offset.len() != self.channels {
            return Err(Error::Shape(
                "scale/offset must have one entry per channel".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn normalize_ingested(&mut self) -> Result<()> {
        if let Some(v) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Param(format!("non-finite intensity {v}")));
        }
        if self.data.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Ok(());
        }
        let n = self.voxels();
        for c in 0..self.channels {
            let chan = &mut self.data[c * n..(c + 1) * n];
            let (lo, hi) = chan
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v as f64), hi.max(v as f64))
                });
            let (s, o) = if hi > lo {
                (1.0 / (hi - lo), -lo / (hi - lo))
            } else {
                (0.0, 0.0)
            };
            for v in chan.iter_mut() {
                *v = ((*v as f64) * s + o).clamp(0.0, 1.0) as f32;
            }
            self.offset[c] = self.offset[c] * s + o;
            self.scale[c] *= s;
        }
        Ok(())
    }

    pub(crate) fn with_transform(mut self, scale: Vec<f64>, offset: Vec<f64>) -> Result<Self> {
        self.scale = scale;
        self.offset = offset;
        self.check_shape()?;
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        self.spacing = spacing;
        self.check_shape()?;
        Ok(self)
    }

    #[inline]
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.dims[0] + z) * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, z, y, x)]
    }

    /// Channel-major view of channel `c`.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Copy out a full axis-aligned plane.
    pub fn slice(&self, orientation: Orientation, index: usize) -> Result<Image<f32>> {
        let plan = SlicePlan::full(orientation, index, self.dims)?;
        Ok(self.window(&plan))
    }

    /// Copy out the window described by a plan expressed in this grid.
    pub fn window(&self, plan: &SlicePlan) -> Image<f32> {
        let (rows, cols) = plan.shape;
        let mut img = Image::zeros(self.channels, rows, cols);
        for c in 0..self.channels {
            for r in 0..rows {
                for q in 0..cols {
                    let [z, y, x] = plan.voxel(r, q);
                    *img.at_mut(c, r, q) = self.get(c, z, y, x);
                }
            }
        }
        img
    }

    /// Sub-volume `[z0..z0+dz, y0..y0+dy, x0..x0+dx]` over all channels.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<VolumeGrid> {
        for a in 0..3 {
            if size[a] == 0 || origin[a] + size[a] > self.dims[a] {
                return Err(Error::Shape(format!(
                    "crop {origin:?}+{size:?} exceeds dims {:?}",
                    self.dims
                )));
            }
        }
        let mut data = Vec::with_capacity(self.channels * size.iter().product::<usize>());
        for c in 0..self.channels {
            for z in 0..size[0] {
                for y in 0..size[1] {
                    let start = self.index(c, origin[0] + z, origin[1] + y, origin[2]);
                    data.extend_from_slice(&self.data[start..start + size[2]]);
                }
            }
        }
        Ok(VolumeGrid {
            dims: size,
            channels: self.channels,
            data,
            spacing: self.spacing,
            scale: self.scale.clone(),
            offset: self.offset.clone(),
        })
    }

    /// Stack single-channel grids as channels of one grid.
    pub fn stack_channels(grids: &[VolumeGrid]) -> Result<VolumeGrid> {
        let first = grids
            .first()
            .ok_or_else(|| Error::Param("no grids to stack".into()))?;
        let mut data = Vec::new();
        let mut scale = Vec::new();
        let mut offset = Vec::new();
        for g in grids {
            if g.dims != first.dims {
                return Err(Error::Shape("stacked grids must share dims".into()));
            }
            data.extend_from_slice(&g.data);
            scale.extend_from_slice(&g.scale);
            offset.extend_from_slice(&g.offset);
        }
        let channels = scale.len();
        VolumeGrid::new(first.dims, channels, data, first.spacing)?.with_transform(scale, offset)
    }

    /// Extract channel `c` as its own single-channel grid.
    pub fn split_channel(&self, c: usize) -> Result<VolumeGrid> {
        if c >= self.channels {
            return Err(Error::Bounds {
                index: c,
                extent: self.channels,
            });
        }
        VolumeGrid::new(self.dims, 1, self.channel(c).to_vec(), self.spacing)?
            .with_transform(vec![self.scale[c]], vec![self.offset[c]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_index_examples() {
        assert_eq!(normalize_index(0, 2).unwrap(), -0.5);
        assert_eq!(normalize_index(1, 2).unwrap(), 0.5);
        assert_eq!(normalize_index(3, 7).unwrap(), 0.0);
        assert_eq!(normalize_index(0, 1).unwrap(), 0.0);
        assert!(matches!(normalize_index(2, 2), Err(Error::Bounds { .. })));
        assert!(normalize_index(0, 0).is_err());
    }

    #[test]
    fn normalize_index_grid_is_even_and_symmetric() {
        for n in 1..40 {
            let c: Vec<f64> = (0..n).map(|i| normalize_index(i, n).unwrap()).collect();
            for i in 0..n {
                assert!((c[i] + c[n - 1 - i]).abs() < 1e-12);
                assert!(c[i] > -1.0 && c[i] < 1.0);
                if i > 0 {
                    assert!((c[i] - c[i - 1] - 2.0 / n as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn expand_zx_plan() {
        let plan = SlicePlan {
            orientation: Orientation::ZX,
            index: 0,
            shape: (2, 2),
            origin: (0, 0),
            coord_dims: [2, 4, 2],
        };
        let coords = expand_slice(&plan).unwrap();
        assert_eq!(coords.len(), 4);
        assert!(coords.iter().all(|c| c[1] == -0.75));
        assert_eq!(coords[0], [-0.5, -0.75, -0.5]);
        assert_eq!(coords[1], [-0.5, -0.75, 0.5]);
        assert_eq!(coords[2], [0.5, -0.75, -0.5]);
    }

    #[test]
    fn xy_plan_at_center_has_zero_z() {
        let plan = SlicePlan::full(Orientation::XY, 2, [5, 3, 4]).unwrap();
        let coords = expand_slice(&plan).unwrap();
        assert_eq!(coords.len(), 12);
        assert!(coords.iter().all(|c| c[0] == 0.0));
    }

    #[test]
    fn orthogonal_plans_share_their_intersection_line() {
        let dims = [6, 5, 7];
        let (j, i) = (3, 4);
        let zx = expand_slice(&SlicePlan::full(Orientation::ZX, j, dims).unwrap()).unwrap();
        let zy = expand_slice(&SlicePlan::full(Orientation::ZY, i, dims).unwrap()).unwrap();
        let shared: Vec<_> = zx.iter().filter(|c| zy.contains(c)).collect();
        assert_eq!(shared.len(), dims[0]);
        for z in 0..dims[0] {
            assert_eq!(zx[z * dims[2] + i], zy[z * dims[1] + j]);
        }
    }

    #[test]
    fn invalid_plans_rejected() {
        assert!(SlicePlan::full(Orientation::ZX, 4, [2, 4, 2]).is_err());
        let bad = SlicePlan {
            orientation: Orientation::XY,
            index: 0,
            shape: (3, 3),
            origin: (1, 0),
            coord_dims: [1, 3, 3],
        };
        assert!(expand_slice(&bad).is_err());
        assert!(Orientation::parse("QQ").is_err());
    }

    #[test]
    fn volume_invariants() {
        assert!(VolumeGrid::new([2, 2, 2], 1, vec![0.5; 7], [1.0; 3]).is_err());
        assert!(VolumeGrid::new([2, 2, 2], 1, vec![1.5; 8], [1.0; 3]).is_err());
        assert!(VolumeGrid::new([2, 2, 2], 1, vec![0.5; 8], [1.0, 0.0, 1.0]).is_err());
        let g =
            VolumeGrid::from_raw([1, 1, 4], 1, vec![0.0, 51.0, 127.5, 255.0], [1.0; 3]).unwrap();
        assert_eq!(g.data(), &[0.0, 0.2, 0.5, 1.0]);
        assert!((g.scale()[0] - 1.0 / 255.0).abs() < 1e-15);
        assert_eq!(g.offset()[0], 0.0);
    }

    #[test]
    fn slices_and_crops() {
        let data: Vec<f32> = (0..24).map(|v| v as f32 / 24.0).collect();
        let g = VolumeGrid::new([2, 3, 4], 1, data, [1.0; 3]).unwrap();
        let zx = g.slice(Orientation::ZX, 1).unwrap();
        assert_eq!((zx.rows, zx.cols), (2, 4));
        assert_eq!(zx.at(0, 1, 2), g.get(0, 1, 1, 2));
        let zy = g.slice(Orientation::ZY, 3).unwrap();
        assert_eq!((zy.rows, zy.cols), (2, 3));
        assert_eq!(zy.at(0, 1, 2), g.get(0, 1, 2, 3));
        let c = g.crop([1, 1, 1], [1, 2, 2]).unwrap();
        assert_eq!(
            c.data(),
            &[
                g.get(0, 1, 1, 1),
                g.get(0, 1, 1, 2),
                g.get(0, 1, 2, 1),
                g.get(0, 1, 2, 2)
            ]
        );
        assert!(g.crop([1, 0, 0], [2, 1, 1]).is_err());
    }
}
