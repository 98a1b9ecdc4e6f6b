//! Dense voxel lattices and the operations shared by every grid type.
//!
//! Voxel `(x, y, z)` lives at linear index `x + nx * (y + ny * z)` and its
//! center sits at `origin + h * (x, y, z)` in world space.

mod format;

use glam::DVec3;

use crate::error::{Error, Result};
use crate::exec;

pub use format::{read_grid, read_grid_from, write_grid, write_grid_to, GRID_MAGIC};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridHeader {
    pub dims: [usize; 3],
    /// World position of the center of voxel (0, 0, 0).
    pub origin: [f32; 3],
    /// Edge length of one voxel.
    pub voxel_size: f32,
}

impl GridHeader {
    pub fn new(dims: [usize; 3], origin: [f32; 3], voxel_size: f32) -> Result<Self> {
        let header = GridHeader {
            dims,
            origin,
            voxel_size,
        };
        header.validate()?;
        Ok(header)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidInput(format!(
                "grid dims must be >= 2 on every axis, got {:?}",
                self.dims
            )));
        }
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            return Err(Error::InvalidInput(format!(
                "voxel size must be positive and finite, got {}",
                self.voxel_size
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidInput("grid origin is not finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn h(&self) -> f64 {
        self.voxel_size as f64
    }

    pub fn origin(&self) -> DVec3 {
        DVec3::new(
            self.origin[0] as f64,
            self.origin[1] as f64,
            self.origin[2] as f64,
        )
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let yz = i / self.dims[0];
        [x, yz % self.dims[1], yz / self.dims[1]]
    }

    /// Continuous grid coordinate of a world point. Out-of-range results are legal.
    #[inline]
    pub fn world_to_grid(&self, p: DVec3) -> DVec3 {
        (p - self.origin()) / self.h()
    }

    #[inline]
    pub fn grid_to_world(&self, g: DVec3) -> DVec3 {
        self.origin() + g * self.h()
    }

    pub fn voxel_center(&self, i: usize) -> DVec3 {
        let [x, y, z] = self.coords(i);
        self.grid_to_world(DVec3::new(x as f64, y as f64, z as f64))
    }

    /// World-space box spanned by the voxel centers.
    pub fn bounds(&self) -> (DVec3, DVec3) {
        let max = DVec3::new(
            (self.dims[0] - 1) as f64,
            (self.dims[1] - 1) as f64,
            (self.dims[2] - 1) as f64,
        );
        (self.origin(), self.grid_to_world(max))
    }

    /// Nearest voxel to a continuous grid coordinate, or `None` outside the lattice.
    pub fn nearest_voxel(&self, g: DVec3) -> Option<usize> {
        let r = g.round();
        let inside = (0..3).all(|a| r[a] >= 0.0 && r[a] <= (self.dims[a] - 1) as f64);
        inside.then(|| self.index(r.x as usize, r.y as usize, r.z as usize))
    }

    /// The 8 corner voxels and blend weights for trilinear interpolation at
    /// `g`, after clamping `g` into the lattice.
    pub fn trilinear(&self, g: DVec3) -> Trilinear {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let max = (self.dims[a] - 1) as f64;
            let c = if g[a].is_nan() {
                0.0
            } else {
                g[a].clamp(0.0, max)
            };
            let i0 = (c as usize).min(self.dims[a] - 2);
            base[a] = i0;
            frac[a] = c - i0 as f64;
        }
        let i = self.index(base[0], base[1], base[2]);
        let (sy, sz) = (self.dims[0], self.dims[0] * self.dims[1]);
        let [fx, fy, fz] = frac;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        let indices = [
            i,
            i + 1,
            i + sy,
            i + sy + 1,
            i + sz,
            i + sz + 1,
            i + sy + sz,
            i + sy + sz + 1,
        ];
        let weights = [
            gx * gy * gz,
            fx * gy * gz,
            gx * fy * gz,
            fx * fy * gz,
            gx * gy * fz,
            fx * gy * fz,
            gx * fy * fz,
            fx * fy * fz,
        ];
        Trilinear { indices, weights }
    }

    /// Finite-difference stencil of gradient component `axis` at voxel `c`:
    /// `g[axis] = (v[plus] - v[minus]) * coef`. Interior voxels use central
    /// differences, boundary voxels one-sided ones.
    #[inline]
    pub fn axis_stencil(&self, c: [usize; 3], axis: usize) -> (usize, usize, f64) {
        let h = self.h();
        let i = self.index(c[0], c[1], c[2]);
        let stride = match axis {
            0 => 1,
            1 => self.dims[0],
            _ => self.dims[0] * self.dims[1],
        };
        let n = self.dims[axis];
        if c[axis] == 0 {
            (i + stride, i, 1.0 / h)
        } else if c[axis] == n - 1 {
            (i, i - stride, 1.0 / h)
        } else {
            (i + stride, i - stride, 0.5 / h)
        }
    }

    /// True when the voxel has both neighbors along every axis.
    #[inline]
    pub fn is_interior(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| c[a] > 0 && c[a] + 1 < self.dims[a])
    }

    /// Up to 6 face neighbors of voxel `i`.
    pub fn neighbors6(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let c = self.coords(i);
        let strides = [1, self.dims[0], self.dims[0] * self.dims[1]];
        (0..6).filter_map(move |k| {
            let a = k / 2;
            if k % 2 == 0 {
                (c[a] + 1 < self.dims[a]).then(|| i + strides[a])
            } else {
                (c[a] > 0).then(|| i - strides[a])
            }
        })
    }

    /// Same lattice (dims, origin, voxel size), compared bitwise.
    pub fn same_lattice(&self, other: &GridHeader) -> bool {
        self.dims == other.dims
            && self.voxel_size.to_bits() == other.voxel_size.to_bits()
            && self
                .origin
                .iter()
                .zip(other.origin.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn check_same_lattice(&self, other: &GridHeader) -> Result<()> {
        if self.same_lattice(other) {
            Ok(())
        } else {
            Err(Error::mismatch(
                format!("{:?} @ {:?} h={}", self.dims, self.origin, self.voxel_size),
                format!(
                    "{:?} @ {:?} h={}",
                    other.dims, other.origin, other.voxel_size
                ),
            ))
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Trilinear {
    pub indices: [usize; 8],
    pub weights: [f64; 8],
}

impl Trilinear {
    #[inline]
    pub fn blend<T: Scalar>(&self, values: &[T]) -> f64 {
        self.indices
            .iter()
            .zip(self.weights.iter())
            .map(|(&i, &w)| w * values[i].to_f64())
            .sum()
    }
}

/// Scalar storage types the numeric kernels can read. Grids store `f32`;
/// finite-difference checks drive the same kernels with `f64` buffers.
pub trait Scalar: Copy + Send + Sync + 'static {
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Finite-difference gradient of `values` at voxel `c` (see [`GridHeader::axis_stencil`]).
#[inline]
pub fn gradient_at<T: Scalar>(header: &GridHeader, values: &[T], c: [usize; 3]) -> DVec3 {
    let mut g = DVec3::ZERO;
    for a in 0..3 {
        let (p, m, coef) = header.axis_stencil(c, a);
        g[a] = (values[p].to_f64() - values[m].to_f64()) * coef;
    }
    g
}

/// Channel layout of one voxel in memory and on disk.
pub trait Voxel: Copy + Default + PartialEq + Send + Sync + 'static {
    const CHANNELS: usize;
    fn write_channels(&self, out: &mut [f32]);
    fn read_channels(src: &[f32]) -> Self;
}

impl Voxel for f32 {
    const CHANNELS: usize = 1;
    fn write_channels(&self, out: &mut [f32]) {
        out[0] = *self;
    }
    fn read_channels(src: &[f32]) -> Self {
        src[0]
    }
}

/// A (possibly unnormalized) normal vector with its accumulated weight.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NormalVoxel {
    pub n: [f32; 3],
    pub w: f32,
}

impl Voxel for NormalVoxel {
    const CHANNELS: usize = 4;
    fn write_channels(&self, out: &mut [f32]) {
        out[..3].copy_from_slice(&self.n);
        out[3] = self.w;
    }
    fn read_channels(src: &[f32]) -> Self {
        NormalVoxel {
            n: [src[0], src[1], src[2]],
            w: src[3],
        }
    }
}

/// RGB in `[0, 1]` plus a confidence weight.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ColorVoxel {
    pub rgb: [f32; 3],
    pub w: f32,
}

impl Voxel for ColorVoxel {
    const CHANNELS: usize = 4;
    fn write_channels(&self, out: &mut [f32]) {
        out[..3].copy_from_slice(&self.rgb);
        out[3] = self.w;
    }
    fn read_channels(src: &[f32]) -> Self {
        ColorVoxel {
            rgb: [src[0], src[1], src[2]],
            w: src[3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<V> {
    header: GridHeader,
    data: Vec<V>,
}

/// Signed distance field, negative inside.
pub type ScalarGrid3 = Grid3<f32>;
/// Fused target normals with per-voxel ray-count weights.
pub type VectorGrid3 = Grid3<NormalVoxel>;
/// Volumetric color field with per-voxel confidence.
pub type ColorGrid3 = Grid3<ColorVoxel>;

impl<V: Voxel> Grid3<V> {
    pub fn filled(header: GridHeader, value: V) -> Self {
        Grid3 {
            data: vec![value; header.len()],
            header,
        }
    }

    pub fn from_vec(header: GridHeader, data: Vec<V>) -> Result<Self> {
        header.validate()?;
        if data.len() != header.len() {
            return Err(Error::mismatch(header.len(), data.len()));
        }
        Ok(Grid3 { header, data })
    }

    /// Builds a grid by evaluating `f` at every voxel center (world space).
    pub fn from_world_fn<F>(header: GridHeader, f: F) -> Self
    where
        F: Fn(DVec3) -> V + Sync + Send,
    {
        let mut data = vec![V::default(); header.len()];
        exec::fill_indexed(&mut data, |i| f(header.voxel_center(i)));
        Grid3 { header, data }
    }

    pub fn header(&self) -> &GridHeader {
        &self.header
    }

    pub fn data(&self) -> &[V] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [V] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<V> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> V {
        self.data[self.header.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: V) {
        let i = self.header.index(x, y, z);
        self.data[i] = v;
    }

    /// Replace the stored values, keeping the header.
    pub fn with_data(&self, data: Vec<V>) -> Result<Self> {
        Self::from_vec(self.header, data)
    }
}

impl ScalarGrid3 {
    /// Trilinear sample at continuous grid coordinate `g` (clamped to the lattice).
    pub fn sample_trilinear(&self, g: DVec3) -> f64 {
        self.header.trilinear(g).blend(&self.data)
    }

    pub fn sample_world(&self, p: DVec3) -> f64 {
        self.sample_trilinear(self.header.world_to_grid(p))
    }

    /// Finite-difference gradient at voxel `(x, y, z)`.
    pub fn gradient_central(&self, x: usize, y: usize, z: usize) -> DVec3 {
        gradient_at(&self.header, &self.data, [x, y, z])
    }

    pub fn gradient_at_index(&self, i: usize) -> DVec3 {
        gradient_at(&self.header, &self.data, self.header.coords(i))
    }

    /// Trilinear blend of the voxel gradients around a world point.
    pub fn gradient_world(&self, p: DVec3) -> DVec3 {
        let tri = self.header.trilinear(self.header.world_to_grid(p));
        tri.indices
            .iter()
            .zip(tri.weights.iter())
            .filter(|(_, &w)| w != 0.0)
            .map(|(&i, &w)| w * self.gradient_at_index(i))
            .fold(DVec3::ZERO, |a, b| a + b)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl ColorGrid3 {
    /// Confidence-weighted trilinear color and the trilinear confidence at `p`.
    pub fn sample_world(&self, p: DVec3) -> ([f32; 3], f32) {
        let tri = self.header.trilinear(self.header.world_to_grid(p));
        let mut rgb = [0.0f64; 3];
        let mut wsum = 0.0f64;
        for (&i, &t) in tri.indices.iter().zip(tri.weights.iter()) {
            let v = self.data[i];
            let tw = t * v.w as f64;
            for c in 0..3 {
                rgb[c] += tw * v.rgb[c] as f64;
            }
            wsum += tw;
        }
        if wsum > 0.0 {
            (
                [
                    (rgb[0] / wsum) as f32,
                    (rgb[1] / wsum) as f32,
                    (rgb[2] / wsum) as f32,
                ],
                wsum as f32,
            )
        } else {
            ([0.0; 3], 0.0)
        }
    }
}
