//! Voxel lattice data model.
//!
//! A [`SparseTensor`] is a strictly increasing list of lattice coordinates
//! with one feature row per coordinate. Every stage of the codec consumes and
//! produces sparse tensors, so the set algebra here (union-concatenation,
//! union-addition, floor-halving) is merge based and fully deterministic.

mod knn;
pub mod ply;

use std::cmp::Ordering;
use std::fmt::Debug;
use std::ops::AddAssign;

pub use knn::{knn, knn_brute_force, Neighbor, SpatialGrid};

use crate::error::{Error, Result};

/// Largest per-axis magnitude a coordinate may take (21-bit precision).
pub const MAX_PRECISION_BITS: u32 = 21;

/// Floating point element type of feature matrices.
pub trait Real:
    num_traits::Float + num_traits::FromPrimitive + AddAssign + Default + Debug + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Integer lattice coordinate. Ordering is lexicographic on `(x, y, z)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VoxelCoord {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl VoxelCoord {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    /// Floor division by two on every axis.
    pub fn halve(self) -> Self {
        Self::new(self.x >> 1, self.y >> 1, self.z >> 1)
    }

    pub fn double(self) -> Self {
        Self::new(self.x * 2, self.y * 2, self.z * 2)
    }

    pub fn offset(self, d: [i32; 3]) -> Self {
        Self::new(self.x + d[0], self.y + d[1], self.z + d[2])
    }

    pub fn to_array(self) -> [i32; 3] {
        [self.x, self.y, self.z]
    }

    pub fn to_f64(self) -> [f64; 3] {
        [self.x as f64, self.y as f64, self.z as f64]
    }

    pub fn fits_precision(self, bits: u32) -> bool {
        let lim = 1i64 << bits;
        [self.x, self.y, self.z]
            .iter()
            .all(|&c| (c as i64) < lim && (c as i64) >= -lim)
    }
}

impl From<[i32; 3]> for VoxelCoord {
    fn from(c: [i32; 3]) -> Self {
        Self::new(c[0], c[1], c[2])
    }
}

/// Coordinates plus a row-major `N x C` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensor<T = f32> {
    scale: u32,
    channels: usize,
    coords: Vec<VoxelCoord>,
    feats: Vec<T>,
}

impl<T: Real> SparseTensor<T> {
    /// Builds a tensor from already sorted, duplicate-free coordinates.
    pub fn new(scale: u32, coords: Vec<VoxelCoord>, channels: usize, feats: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::contract("sparse tensor needs at least one channel"));
        }
        if feats.len() != coords.len() * channels {
            return Err(Error::contract(format!(
                "feature matrix has {} values, expected {} x {}",
                feats.len(),
                coords.len(),
                channels
            )));
        }
        if let Some(w) = coords.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::contract(format!(
                "coordinates not strictly increasing at {:?} -> {:?}",
                w[0], w[1]
            )));
        }
        if let Some(c) = coords.iter().find(|c| !c.fits_precision(MAX_PRECISION_BITS)) {
            return Err(Error::contract(format!("coordinate {c:?} exceeds 21 bits")));
        }
        Ok(Self {
            scale,
            channels,
            coords,
            feats,
        })
    }

    pub fn zeros(scale: u32, coords: Vec<VoxelCoord>, channels: usize) -> Result<Self> {
        let n = coords.len() * channels;
        Self::new(scale, coords, channels, vec![T::zero(); n])
    }

    pub fn filled(scale: u32, coords: Vec<VoxelCoord>, channels: usize, value: T) -> Result<Self> {
        let n = coords.len() * channels;
        Self::new(scale, coords, channels, vec![value; n])
    }

    /// Internal constructor for callers that already uphold the invariants.
    pub(crate) fn from_parts(scale: u32, coords: Vec<VoxelCoord>, channels: usize, feats: Vec<T>) -> Self {
        debug_assert_eq!(feats.len(), coords.len() * channels);
        debug_assert!(coords.windows(2).all(|w| w[0] < w[1]));
        Self {
            scale,
            channels,
            coords,
            feats,
        }
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn feats(&self) -> &[T] {
        &self.feats
    }

    pub fn feats_mut(&mut self) -> &mut [T] {
        &mut self.feats
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.feats[i * self.channels..(i + 1) * self.channels]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.channels;
        &mut self.feats[i * c..(i + 1) * c]
    }

    pub fn find(&self, c: VoxelCoord) -> Option<usize> {
        self.coords.binary_search(&c).ok()
    }

    pub fn into_parts(self) -> (u32, Vec<VoxelCoord>, usize, Vec<T>) {
        (self.scale, self.coords, self.channels, self.feats)
    }

    pub fn with_scale(mut self, scale: u32) -> Self {
        self.scale = scale;
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(
            self.scale,
            self.coords.clone(),
            self.channels,
            self.feats.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Converts the feature type, e.g. to run the 64-bit reference path.
    pub fn cast<U: Real>(&self) -> SparseTensor<U> {
        SparseTensor::from_parts(
            self.scale,
            self.coords.clone(),
            self.channels,
            self.feats
                .iter()
                .map(|v| U::from(*v).expect("finite feature"))
                .collect(),
        )
    }

    /// Keeps the rows whose index is listed (`keep` must be increasing).
    pub fn select_rows(&self, keep: &[usize]) -> Self {
        let mut coords = Vec::with_capacity(keep.len());
        let mut feats = Vec::with_capacity(keep.len() * self.channels);
        for &i in keep {
            coords.push(self.coords[i]);
            feats.extend_from_slice(self.row(i));
        }
        Self::from_parts(self.scale, coords, self.channels, feats)
    }

    /// Channel-wise slice `[start, start + width)`.
    pub fn channel_slice(&self, start: usize, width: usize) -> Result<Self> {
        if width == 0 || start + width > self.channels {
            return Err(Error::contract(format!(
                "channel slice {start}+{width} out of {}",
                self.channels
            )));
        }
        let mut feats = Vec::with_capacity(self.len() * width);
        for i in 0..self.len() {
            feats.extend_from_slice(&self.row(i)[start..start + width]);
        }
        Ok(Self::from_parts(self.scale, self.coords.clone(), width, feats))
    }

    /// Re-expresses the tensor on `target` coordinates. Rows missing from
    /// `self` are zero; rows of `self` outside `target` are dropped.
    pub fn restrict_to(&self, target: &[VoxelCoord]) -> Self {
        let c = self.channels;
        let mut feats = vec![T::zero(); target.len() * c];
        let mut i = 0;
        for (j, t) in target.iter().enumerate() {
            while i < self.coords.len() && self.coords[i] < *t {
                i += 1;
            }
            if i < self.coords.len() && self.coords[i] == *t {
                feats[j * c..(j + 1) * c].copy_from_slice(self.row(i));
            }
        }
        Self::from_parts(self.scale, target.to_vec(), c, feats)
    }

    /// Elementwise difference on identical coordinate sets.
    pub fn sub_aligned(&self, other: &Self) -> Result<Self> {
        self.zip_aligned(other, |a, b| a - b)
    }

    /// Elementwise sum on identical coordinate sets.
    pub fn add_aligned(&self, other: &Self) -> Result<Self> {
        self.zip_aligned(other, |a, b| a + b)
    }

    fn zip_aligned(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.coords != other.coords || self.channels != other.channels || self.scale != other.scale {
            return Err(Error::contract("aligned operation on differing tensors"));
        }
        Ok(Self::from_parts(
            self.scale,
            self.coords.clone(),
            self.channels,
            self.feats
                .iter()
                .zip(&other.feats)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }
}

/// A voxelized frame: scale-0 occupancy with all-one single-channel features.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudFrame {
    pub precision_bits: u32,
    pub points: SparseTensor<f32>,
}

impl PointCloudFrame {
    /// Builds a frame from arbitrary integer points; duplicates merge.
    pub fn from_points(precision_bits: u32, mut pts: Vec<VoxelCoord>) -> Result<Self> {
        if pts.is_empty() {
            return Err(Error::EmptyFrame);
        }
        if precision_bits == 0 || precision_bits > MAX_PRECISION_BITS {
            return Err(Error::contract(format!("precision {precision_bits} out of 1..=21")));
        }
        let lim = 1i32 << precision_bits;
        if let Some(c) = pts
            .iter()
            .find(|c| [c.x, c.y, c.z].iter().any(|&v| v < 0 || v >= lim))
        {
            return Err(Error::OutOfCube {
                coord: c.to_array(),
                depth: precision_bits,
            });
        }
        pts.sort_unstable();
        pts.dedup();
        let n = pts.len();
        Ok(Self {
            precision_bits,
            points: SparseTensor::from_parts(0, pts, 1, vec![1.0; n]),
        })
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        self.points.coords()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Sorted union of two sorted coordinate lists, each element tagged with its
/// row in `a` and in `b`.
fn merge_union(a: &[VoxelCoord], b: &[VoxelCoord]) -> Vec<(VoxelCoord, Option<usize>, Option<usize>)> {
    let mut out = Vec::with_capacity(a.len().max(b.len()));
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let ord = match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) => x.cmp(y),
            (Some(_), None) => Ordering::Less,
            (None, _) => Ordering::Greater,
        };
        match ord {
            Ordering::Less => {
                out.push((a[i], Some(i), None));
                i += 1;
            }
            Ordering::Greater => {
                out.push((b[j], None, Some(j)));
                j += 1;
            }
            Ordering::Equal => {
                out.push((a[i], Some(i), Some(j)));
                i += 1;
                j += 1;
            }
        }
    }
    out
}

pub fn union_coords(a: &[VoxelCoord], b: &[VoxelCoord]) -> Vec<VoxelCoord> {
    merge_union(a, b).into_iter().map(|(c, _, _)| c).collect()
}

/// Point-cloud concatenation: union coordinates, features joined `a` then
/// `b`, with zeros standing in for the side that lacks a coordinate.
pub fn concatenate<T: Real>(a: &SparseTensor<T>, b: &SparseTensor<T>) -> Result<SparseTensor<T>> {
    if a.scale != b.scale {
        return Err(Error::contract(format!(
            "concatenate across scales {} and {}",
            a.scale, b.scale
        )));
    }
    let (ca, cb) = (a.channels, b.channels);
    let width = ca + cb;
    let merged = merge_union(&a.coords, &b.coords);
    let mut feats = vec![T::zero(); merged.len() * width];
    let mut coords = Vec::with_capacity(merged.len());
    for (k, (c, ia, ib)) in merged.into_iter().enumerate() {
        coords.push(c);
        let row = &mut feats[k * width..(k + 1) * width];
        if let Some(i) = ia {
            row[..ca].copy_from_slice(a.row(i));
        }
        if let Some(j) = ib {
            row[ca..].copy_from_slice(b.row(j));
        }
    }
    Ok(SparseTensor::from_parts(a.scale, coords, width, feats))
}

/// Sum on the coordinate union; exclusive rows pass through unchanged.
pub fn add_on_union<T: Real>(a: &SparseTensor<T>, b: &SparseTensor<T>) -> Result<SparseTensor<T>> {
    if a.scale != b.scale {
        return Err(Error::contract(format!(
            "add across scales {} and {}",
            a.scale, b.scale
        )));
    }
    if a.channels != b.channels {
        return Err(Error::contract(format!(
            "add with {} vs {} channels",
            a.channels, b.channels
        )));
    }
    let c = a.channels;
    let merged = merge_union(&a.coords, &b.coords);
    let mut feats = vec![T::zero(); merged.len() * c];
    let mut coords = Vec::with_capacity(merged.len());
    for (k, (coord, ia, ib)) in merged.into_iter().enumerate() {
        coords.push(coord);
        let row = &mut feats[k * c..(k + 1) * c];
        if let Some(i) = ia {
            row.copy_from_slice(a.row(i));
        }
        if let Some(j) = ib {
            for (r, &v) in row.iter_mut().zip(b.row(j)) {
                *r += v;
            }
        }
    }
    Ok(SparseTensor::from_parts(a.scale, coords, c, feats))
}

/// Unique floor-halving of a coordinate set, sorted.
pub fn stride_down_coords(coords: &[VoxelCoord]) -> Vec<VoxelCoord> {
    let mut out: Vec<VoxelCoord> = coords.iter().map(|c| c.halve()).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// The eight children `2c + {0,1}^3` of every coordinate, sorted.
pub fn child_candidates(coords: &[VoxelCoord]) -> Vec<VoxelCoord> {
    let mut out = Vec::with_capacity(coords.len() * 8);
    for c in coords {
        let d = c.double();
        for b in 0..8 {
            out.push(d.offset([(b >> 2) & 1, (b >> 1) & 1, b & 1]));
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(scale: u32, rows: &[([i32; 3], &[f32])]) -> SparseTensor<f32> {
        let c = rows.first().map_or(1, |r| r.1.len());
        SparseTensor::new(
            scale,
            rows.iter().map(|r| VoxelCoord::from(r.0)).collect(),
            c,
            rows.iter().flat_map(|r| r.1.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn concatenate_shared_coordinate() {
        let a = t(0, &[([0, 0, 0], &[1.0])]);
        let b = t(0, &[([0, 0, 0], &[2.0])]);
        let c = concatenate(&a, &b).unwrap();
        assert_eq!(c.coords(), &[VoxelCoord::new(0, 0, 0)]);
        assert_eq!(c.feats(), &[1.0, 2.0]);
    }

    #[test]
    fn concatenate_zero_pads_missing_side() {
        let a = t(0, &[([1, 0, 0], &[5.0])]);
        let b = SparseTensor::<f32>::zeros(0, vec![], 1).unwrap();
        let c = concatenate(&a, &b).unwrap();
        assert_eq!(c.feats(), &[5.0, 0.0]);
    }

    #[test]
    fn concatenate_four_by_four_with_two_shared() {
        let a = t(
            1,
            &[
                ([0, 0, 0], &[1.0]),
                ([0, 0, 1], &[2.0]),
                ([1, 0, 0], &[3.0]),
                ([2, 2, 2], &[4.0]),
            ],
        );
        let b = t(
            1,
            &[
                ([0, 0, 1], &[10.0]),
                ([0, 1, 0], &[20.0]),
                ([2, 2, 2], &[30.0]),
                ([3, 0, 0], &[40.0]),
            ],
        );
        let c = concatenate(&a, &b).unwrap();
        // enumerated by hand: a-only rows get [a,0], b-only [0,b], shared [a,b]
        let expect: Vec<([i32; 3], [f32; 2])> = vec![
            ([0, 0, 0], [1.0, 0.0]),
            ([0, 0, 1], [2.0, 10.0]),
            ([0, 1, 0], [0.0, 20.0]),
            ([1, 0, 0], [3.0, 0.0]),
            ([2, 2, 2], [4.0, 30.0]),
            ([3, 0, 0], [0.0, 40.0]),
        ];
        assert_eq!(c.len(), 6);
        for (i, (coord, row)) in expect.iter().enumerate() {
            assert_eq!(c.coords()[i], VoxelCoord::from(*coord));
            assert_eq!(c.row(i), row);
        }
    }

    #[test]
    fn concatenate_rejects_scale_mismatch() {
        let a = t(0, &[([0, 0, 0], &[1.0])]);
        let b = t(1, &[([0, 0, 0], &[1.0])]);
        assert!(matches!(concatenate(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn add_on_union_cases() {
        let a = t(0, &[([0, 0, 0], &[1.0, 2.0])]);
        let b = t(0, &[([1, 0, 0], &[3.0, 4.0])]);
        let s = add_on_union(&a, &b).unwrap();
        assert_eq!(s.feats(), &[1.0, 2.0, 3.0, 4.0]);
        let s = add_on_union(&a, &a).unwrap();
        assert_eq!(s.feats(), &[2.0, 4.0]);
        let c = t(0, &[([1, 0, 0], &[3.0])]);
        assert!(matches!(add_on_union(&a, &c), Err(Error::Contract(_))));
    }

    #[test]
    fn add_on_union_matches_dense_grid() {
        let a = t(0, &[([0, 0, 0], &[1.0]), ([0, 1, 0], &[2.0]), ([3, 3, 3], &[-1.0])]);
        let b = t(0, &[([0, 1, 0], &[5.0]), ([1, 1, 1], &[7.0]), ([3, 3, 3], &[1.0])]);
        let mut grid = [[[0f32; 4]; 4]; 4];
        let mut occ = [[[false; 4]; 4]; 4];
        for x in [&a, &b] {
            for (i, c) in x.coords().iter().enumerate() {
                grid[c.x as usize][c.y as usize][c.z as usize] += x.row(i)[0];
                occ[c.x as usize][c.y as usize][c.z as usize] = true;
            }
        }
        let s = add_on_union(&a, &b).unwrap();
        let mut n = 0;
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    if occ[x][y][z] {
                        let i = s.find(VoxelCoord::new(x as i32, y as i32, z as i32)).unwrap();
                        assert_eq!(s.row(i)[0], grid[x][y][z]);
                        n += 1;
                    }
                }
            }
        }
        assert_eq!(n, s.len());
    }

    #[test]
    fn stride_down_examples() {
        let c = |v: &[[i32; 3]]| v.iter().map(|&a| VoxelCoord::from(a)).collect::<Vec<_>>();
        assert_eq!(stride_down_coords(&c(&[[0, 0, 0], [1, 1, 1]])), c(&[[0, 0, 0]]));
        assert_eq!(
            stride_down_coords(&c(&[[2, 0, 0], [3, 1, 0], [4, 0, 0]])),
            c(&[[1, 0, 0], [2, 0, 0]])
        );
        assert!(stride_down_coords(&[]).is_empty());
        assert_eq!(stride_down_coords(&c(&[[-1, -2, -3]])), c(&[[-1, -1, -2]]));
    }

    #[test]
    fn new_rejects_unsorted_and_duplicates() {
        let c = vec![VoxelCoord::new(1, 0, 0), VoxelCoord::new(0, 0, 0)];
        assert!(SparseTensor::<f32>::zeros(0, c, 1).is_err());
        let c = vec![VoxelCoord::new(1, 0, 0), VoxelCoord::new(1, 0, 0)];
        assert!(SparseTensor::<f32>::zeros(0, c, 1).is_err());
        assert!(SparseTensor::<f32>::zeros(0, vec![], 0).is_err());
    }

    #[test]
    fn frame_merges_duplicates() {
        let f = PointCloudFrame::from_points(
            4,
            vec![VoxelCoord::new(1, 2, 3), VoxelCoord::new(0, 0, 0), VoxelCoord::new(1, 2, 3)],
        )
        .unwrap();
        assert_eq!(f.len(), 2);
        assert!(f.points.feats().iter().all(|&v| v == 1.0));
        assert!(matches!(PointCloudFrame::from_points(4, vec![]), Err(Error::EmptyFrame)));
    }

    #[test]
    fn children_of_single_voxel() {
        let ch = child_candidates(&[VoxelCoord::new(1, 0, 0)]);
        assert_eq!(ch.len(), 8);
        assert_eq!(ch[0], VoxelCoord::new(2, 0, 0));
        assert_eq!(ch[7], VoxelCoord::new(3, 1, 1));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn tensor(max: usize, ch: usize) -> impl Strategy<Value = SparseTensor<f32>> {
        proptest::collection::btree_map((0i32..6, 0i32..6, 0i32..6), -5i32..5, 0..max).prop_map(
            move |m| {
                let coords: Vec<VoxelCoord> = m.keys().map(|&(x, y, z)| VoxelCoord::new(x, y, z)).collect();
                let feats = m
                    .values()
                    .flat_map(|&v| (0..ch).map(move |k| (v + k as i32) as f32))
                    .collect();
                SparseTensor::new(0, coords, ch, feats).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn concatenate_restriction_properties(a in tensor(40, 2), b in tensor(40, 3)) {
            let c = concatenate(&a, &b).unwrap();
            prop_assert_eq!(c.len(), union_coords(a.coords(), b.coords()).len());
            for (i, coord) in c.coords().iter().enumerate() {
                match a.find(*coord) {
                    Some(k) => prop_assert_eq!(&c.row(i)[..2], a.row(k)),
                    None => prop_assert!(c.row(i)[..2].iter().all(|&v| v == 0.0)),
                }
            }
        }

        #[test]
        fn double_halving_matches_quarter(a in tensor(60, 1)) {
            let twice = stride_down_coords(&stride_down_coords(a.coords()));
            let mut direct: Vec<VoxelCoord> = a.coords().iter()
                .map(|c| VoxelCoord::new(c.x >> 2, c.y >> 2, c.z >> 2)).collect();
            direct.sort_unstable();
            direct.dedup();
            prop_assert_eq!(twice, direct);
        }
    }
}
