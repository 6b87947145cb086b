//! Dense zero-padded reference convolution for checking the sparse engine.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{default_out_coords, sparse_conv, ConvSpec};
use crate::error::{Error, Result};
use crate::voxel::{child_candidates, SparseTensor, VoxelCoord};

/// Input features scattered into a dense box; reads outside are zero.
struct DenseGrid {
    lo: [i64; 3],
    dims: [i64; 3],
    channels: usize,
    values: Vec<f64>,
}

impl DenseGrid {
    fn from_sparse(x: &SparseTensor<f64>) -> Self {
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for c in x.coords() {
            for (a, v) in c.to_array().into_iter().enumerate() {
                lo[a] = lo[a].min(v as i64);
                hi[a] = hi[a].max(v as i64);
            }
        }
        if x.is_empty() {
            lo = [0; 3];
            hi = [-1; 3];
        }
        let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
        let ch = x.channels();
        let mut g = Self {
            lo,
            dims,
            channels: ch,
            values: vec![0.0; (dims[0] * dims[1] * dims[2]) as usize * ch],
        };
        for (i, c) in x.coords().iter().enumerate() {
            let at = g.index(c.to_array().map(|v| v as i64)).expect("inside the box");
            g.values[at..at + ch].copy_from_slice(x.row(i));
        }
        g
    }

    fn index(&self, p: [i64; 3]) -> Option<usize> {
        let mut flat = 0i64;
        for a in 0..3 {
            let r = p[a] - self.lo[a];
            if r < 0 || r >= self.dims[a] {
                return None;
            }
            flat = flat * self.dims[a] + r;
        }
        Some(flat as usize * self.channels)
    }

    fn read(&self, p: [i64; 3]) -> Option<&[f64]> {
        self.index(p).map(|i| &self.values[i..i + self.channels])
    }
}

/// Output features at `out_coords`, row-major, computed straight from the
/// convolution definition without kernel maps.
pub fn dense_conv_reference(
    x: &SparseTensor<f64>,
    spec: &ConvSpec,
    weight: &[f64],
    bias: &[f64],
    out_coords: &[VoxelCoord],
) -> Result<Vec<f64>> {
    spec.validate()?;
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    if x.channels() != cin || weight.len() != spec.volume() * cin * cout || bias.len() != cout {
        return Err(Error::contract("reference convolution shapes do not match"));
    }
    let grid = DenseGrid::from_sparse(x);
    let mut out = Vec::with_capacity(out_coords.len() * cout);
    for c in out_coords {
        let q = c.to_array().map(|v| v as i64);
        let mut acc = bias.to_vec();
        for (k, o) in spec.offsets().iter().enumerate() {
            let o = o.map(|v| v as i64);
            let src = match (spec.stride, spec.transposed) {
                (1, _) => Some([q[0] + o[0], q[1] + o[1], q[2] + o[2]]),
                (_, false) => Some([2 * q[0] + o[0], 2 * q[1] + o[1], 2 * q[2] + o[2]]),
                // q = 2p + o
                (_, true) => {
                    let d = [q[0] - o[0], q[1] - o[1], q[2] - o[2]];
                    d.iter().all(|v| v.rem_euclid(2) == 0).then(|| d.map(|v| v.div_euclid(2)))
                }
            };
            let Some(xv) = src.and_then(|p| grid.read(p)) else {
                continue;
            };
            for (ci, &v) in xv.iter().enumerate() {
                let w = &weight[(k * cin + ci) * cout..(k * cin + ci + 1) * cout];
                for (a, &wv) in acc.iter_mut().zip(w) {
                    *a += v * wv;
                }
            }
        }
        out.extend(acc);
    }
    Ok(out)
}

/// A seeded layer, input and target set for oracle comparisons.
#[derive(Clone, Debug)]
pub struct OracleCase {
    pub spec: ConvSpec,
    pub x: SparseTensor<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub out_coords: Vec<VoxelCoord>,
}

impl OracleCase {
    /// Coordinates in a `side^3` box; kernels 1/2/3 at stride 1, 2/3 at
    /// stride 2, and kernel-2 transposed layers onto a random child subset.
    pub fn seeded(seed: u64, side: i32) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cin, cout) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let spec = match rng.gen_range(0..6) {
            k @ 0..=2 => ConvSpec::new(cin, cout, k + 1),
            3 => ConvSpec::down(cin, cout),
            4 => ConvSpec {
                stride: 2,
                ..ConvSpec::new(cin, cout, 3)
            },
            _ => ConvSpec::up(cin, cout),
        };
        let n = rng.gen_range(1..=64);
        let mut set = BTreeSet::new();
        while set.len() < n {
            set.insert(VoxelCoord::new(
                rng.gen_range(0..side),
                rng.gen_range(0..side),
                rng.gen_range(0..side),
            ));
        }
        let coords: Vec<VoxelCoord> = set.into_iter().collect();
        let mut uniform = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let x = SparseTensor::new(0, coords, cin, uniform(n * cin))?;
        let weight = uniform(spec.volume() * cin * cout);
        let bias = uniform(cout);
        let out_coords = if spec.transposed {
            let kids = child_candidates(x.coords());
            kids.into_iter().filter(|_| rng.gen_bool(0.5)).collect()
        } else {
            default_out_coords(x.coords(), &spec)?
        };
        Ok(Self {
            spec,
            x,
            weight,
            bias,
            out_coords,
        })
    }

    /// Largest absolute difference between the sparse engine and the oracle.
    pub fn max_abs_error(&self) -> Result<f64> {
        let sparse = sparse_conv(&self.x, &self.spec, &self.weight, &self.bias, Some(&self.out_coords))?;
        let dense = dense_conv_reference(&self.x, &self.spec, &self.weight, &self.bias, &self.out_coords)?;
        Ok(sparse
            .feats()
            .iter()
            .zip(&dense)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_voxel_kernel_three_spreads_weights() {
        let x = SparseTensor::new(0, vec![VoxelCoord::new(5, 5, 5)], 1, vec![2.0]).unwrap();
        let spec = ConvSpec::new(1, 1, 3);
        let w: Vec<f64> = (0..27).map(|v| v as f64).collect();
        let out = [VoxelCoord::new(4, 5, 5), VoxelCoord::new(5, 5, 5), VoxelCoord::new(6, 6, 6)];
        // output at q reads x(q + o): the offset that lands on (5,5,5)
        let y = dense_conv_reference(&x, &spec, &w, &[0.5], &out).unwrap();
        assert_eq!(y, vec![0.5 + 2.0 * 22.0, 0.5 + 2.0 * 13.0, 0.5 + 2.0 * 0.0]);
    }

    #[test]
    fn seeded_cases_agree() {
        for s in 0..40 {
            let c = OracleCase::seeded(s, 16).unwrap();
            assert!(c.max_abs_error().unwrap() <= 1e-12, "seed {s}");
        }
    }
}
