use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::voxel::{stride_down_coords, Real, SparseTensor, VoxelCoord};

/// Shape of one sparse convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: u32,
    pub stride: u32,
    pub transposed: bool,
}

impl ConvSpec {
    pub const fn new(in_channels: usize, out_channels: usize, kernel_size: u32) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            transposed: false,
        }
    }

    /// Stride-2 kernel-2 downsampling.
    pub const fn down(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size: 2,
            stride: 2,
            transposed: false,
        }
    }

    /// Stride-2 kernel-2 transposed (upsampling) convolution.
    pub const fn up(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size: 2,
            stride: 2,
            transposed: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::contract("convolution with zero channels"));
        }
        if !(1..=3).contains(&self.kernel_size) {
            return Err(Error::contract(format!("kernel size {} not in 1..=3", self.kernel_size)));
        }
        match (self.stride, self.transposed) {
            (1, false) => Ok(()),
            (2, false) if self.kernel_size >= 2 => Ok(()),
            (2, true) if self.kernel_size == 2 => Ok(()),
            _ => Err(Error::contract(format!(
                "unsupported stride {} / kernel {} / transposed {}",
                self.stride, self.kernel_size, self.transposed
            ))),
        }
    }

    /// Kernel offsets in weight order (lexicographic on `(dx, dy, dz)`).
    /// Stride-2 kernel-2 layers use the `{0,1}^3` corner; everything else is
    /// centered.
    pub fn offsets(&self) -> Vec<[i32; 3]> {
        let k = self.kernel_size as i32;
        let lo = if self.stride == 2 && k == 2 { 0 } else { -(k - 1) / 2 };
        let mut out = Vec::with_capacity((k * k * k) as usize);
        for dx in lo..lo + k {
            for dy in lo..lo + k {
                for dz in lo..lo + k {
                    out.push([dx, dy, dz]);
                }
            }
        }
        out
    }

    pub fn volume(&self) -> usize {
        (self.kernel_size as usize).pow(3)
    }

    pub fn weight_dims(&self) -> [usize; 3] {
        [self.volume(), self.in_channels, self.out_channels]
    }

    pub fn output_scale(&self, in_scale: u32) -> u32 {
        match (self.stride, self.transposed) {
            (2, false) => in_scale + 1,
            (2, true) => in_scale.saturating_sub(1),
            _ => in_scale,
        }
    }
}

/// Per-offset `(input_row, output_row)` pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelMap {
    pub offsets: Vec<[i32; 3]>,
    pub pairs: Vec<Vec<(u32, u32)>>,
    pub n_in: usize,
    pub n_out: usize,
}

impl KernelMap {
    pub fn pair_count(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    /// Regroups the pairs by output row: `rows[j]` lists `(offset, input)`
    /// ascending by offset then input row.
    fn by_output(&self) -> (Vec<usize>, Vec<(u32, u32)>) {
        let mut counts = vec![0usize; self.n_out + 1];
        for p in &self.pairs {
            for &(_, j) in p {
                counts[j as usize + 1] += 1;
            }
        }
        for j in 0..self.n_out {
            counts[j + 1] += counts[j];
        }
        let mut fill = counts.clone();
        let mut entries = vec![(0u32, 0u32); counts[self.n_out]];
        for (o, p) in self.pairs.iter().enumerate() {
            for &(i, j) in p {
                entries[fill[j as usize]] = (o as u32, i);
                fill[j as usize] += 1;
            }
        }
        for j in 0..self.n_out {
            entries[counts[j]..counts[j + 1]].sort_unstable();
        }
        (counts, entries)
    }
}

fn lookup(coords: &[VoxelCoord], c: VoxelCoord) -> Option<u32> {
    coords.binary_search(&c).ok().map(|i| i as u32)
}

pub fn build_kernel_map(in_coords: &[VoxelCoord], out_coords: &[VoxelCoord], spec: &ConvSpec) -> Result<KernelMap> {
    spec.validate()?;
    let offsets = spec.offsets();
    let pairs: Vec<Vec<(u32, u32)>> = match (spec.stride, spec.transposed) {
        (1, _) => offsets
            .par_iter()
            .map(|&o| {
                out_coords
                    .iter()
                    .enumerate()
                    .filter_map(|(j, c)| lookup(in_coords, c.offset(o)).map(|i| (i, j as u32)))
                    .collect()
            })
            .collect(),
        (_, false) => {
            if stride_down_coords(in_coords) != out_coords {
                return Err(Error::contract(
                    "stride-2 output coordinates must be the floor-halved input set",
                ));
            }
            offsets
                .par_iter()
                .map(|&o| {
                    out_coords
                        .iter()
                        .enumerate()
                        .filter_map(|(j, c)| lookup(in_coords, c.double().offset(o)).map(|i| (i, j as u32)))
                        .collect()
                })
                .collect()
        }
        (_, true) => offsets
            .par_iter()
            .map(|&o| {
                in_coords
                    .iter()
                    .enumerate()
                    .filter_map(|(i, c)| lookup(out_coords, c.double().offset(o)).map(|j| (i as u32, j)))
                    .collect()
            })
            .collect(),
    };
    Ok(KernelMap {
        offsets,
        pairs,
        n_in: in_coords.len(),
        n_out: out_coords.len(),
    })
}

/// Output coordinates implied by a layer when no explicit target is given.
pub fn default_out_coords(in_coords: &[VoxelCoord], spec: &ConvSpec) -> Result<Vec<VoxelCoord>> {
    match (spec.stride, spec.transposed) {
        (1, _) => Ok(in_coords.to_vec()),
        (_, false) => Ok(stride_down_coords(in_coords)),
        (_, true) => Err(Error::contract("transposed convolution needs explicit target coordinates")),
    }
}

fn check_dims<T>(spec: &ConvSpec, in_channels: usize, weight: &[T], bias: &[T]) -> Result<()> {
    if in_channels != spec.in_channels {
        return Err(Error::contract(format!(
            "input has {in_channels} channels, layer expects {}",
            spec.in_channels
        )));
    }
    let [k, i, o] = spec.weight_dims();
    if weight.len() != k * i * o || bias.len() != o {
        return Err(Error::contract(format!(
            "weight/bias sizes {}/{} do not match {k}x{i}x{o}",
            weight.len(),
            bias.len()
        )));
    }
    Ok(())
}

/// Gather/scatter convolution over a prebuilt kernel map.
pub fn sparse_conv_mapped<T: Real>(
    x: &SparseTensor<T>,
    spec: &ConvSpec,
    weight: &[T],
    bias: &[T],
    map: &KernelMap,
    out_coords: &[VoxelCoord],
) -> Result<SparseTensor<T>> {
    check_dims(spec, x.channels(), weight, bias)?;
    if map.n_in != x.len() || map.n_out != out_coords.len() {
        return Err(Error::contract("kernel map does not match the tensors"));
    }
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let (ptr, entries) = map.by_output();
    let xf = x.feats();
    let mut feats = vec![T::zero(); out_coords.len() * cout];
    feats
        .par_chunks_mut(cout.max(1))
        .enumerate()
        .for_each(|(j, out)| {
            out.copy_from_slice(bias);
            for &(o, i) in &entries[ptr[j]..ptr[j + 1]] {
                let xi = &xf[i as usize * cin..(i as usize + 1) * cin];
                let w = &weight[o as usize * cin * cout..(o as usize + 1) * cin * cout];
                for (ci, &xv) in xi.iter().enumerate() {
                    if xv == T::zero() {
                        continue;
                    }
                    let wr = &w[ci * cout..(ci + 1) * cout];
                    for (acc, &wv) in out.iter_mut().zip(wr) {
                        *acc += xv * wv;
                    }
                }
            }
        });
    Ok(SparseTensor::from_parts(
        spec.output_scale(x.scale()),
        out_coords.to_vec(),
        cout,
        feats,
    ))
}

/// Generalized sparse convolution evaluated at `out_coords` (or the layer's
/// implied coordinates when `None`).
pub fn sparse_conv<T: Real>(
    x: &SparseTensor<T>,
    spec: &ConvSpec,
    weight: &[T],
    bias: &[T],
    out_coords: Option<&[VoxelCoord]>,
) -> Result<SparseTensor<T>> {
    let owned;
    let out = match out_coords {
        Some(c) => c,
        None => {
            owned = default_out_coords(x.coords(), spec)?;
            &owned
        }
    };
    let map = build_kernel_map(x.coords(), out, spec)?;
    sparse_conv_mapped(x, spec, weight, bias, &map, out)
}

pub fn relu<T: Real>(x: &SparseTensor<T>) -> SparseTensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn relu_in_place<T: Real>(x: &mut SparseTensor<T>) {
    for v in x.feats_mut() {
        *v = v.max(T::zero());
    }
}

/// Gradients of `<grad_out, conv(x)>` with respect to input features,
/// weights and bias.
pub struct ConvGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn sparse_conv_backward<T: Real>(
    x: &SparseTensor<T>,
    spec: &ConvSpec,
    weight: &[T],
    map: &KernelMap,
    grad_out: &[T],
) -> Result<ConvGrads<T>> {
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    if grad_out.len() != map.n_out * cout || x.len() != map.n_in || x.channels() != cin {
        return Err(Error::contract("gradient shape does not match the layer"));
    }
    let mut gin = vec![T::zero(); x.len() * cin];
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); cout];
    for j in 0..map.n_out {
        for (b, &g) in gb.iter_mut().zip(&grad_out[j * cout..(j + 1) * cout]) {
            *b += g;
        }
    }
    let xf = x.feats();
    for (o, pairs) in map.pairs.iter().enumerate() {
        let w = &weight[o * cin * cout..(o + 1) * cin * cout];
        for &(i, j) in pairs {
            let (i, j) = (i as usize, j as usize);
            let g = &grad_out[j * cout..(j + 1) * cout];
            for ci in 0..cin {
                let wr = &w[ci * cout..(ci + 1) * cout];
                let mut acc = T::zero();
                for (&wv, &gv) in wr.iter().zip(g) {
                    acc += wv * gv;
                }
                gin[i * cin + ci] += acc;
                let xv = xf[i * cin + ci];
                let gwr = &mut gw[(o * cin + ci) * cout..(o * cin + ci + 1) * cout];
                for (d, &gv) in gwr.iter_mut().zip(g) {
                    *d += xv * gv;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}

/// Swaps the channel axes of a `[K, in, out]` weight tensor, giving the
/// weights of the adjoint layer.
pub fn transpose_weights<T: Copy>(spec: &ConvSpec, weight: &[T]) -> Vec<T> {
    let (k, cin, cout) = (spec.volume(), spec.in_channels, spec.out_channels);
    let mut out = Vec::with_capacity(weight.len());
    for o in 0..k {
        for co in 0..cout {
            for ci in 0..cin {
                out.push(weight[(o * cin + ci) * cout + co]);
            }
        }
    }
    out
}
