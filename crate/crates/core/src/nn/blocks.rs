use super::conv::{build_kernel_map, relu_in_place, sparse_conv, sparse_conv_mapped, ConvSpec, KernelMap};
use super::weights::{ParamKind, ParamSource};
use crate::error::{Error, Result};
use crate::voxel::{Real, SparseTensor, VoxelCoord};

/// One convolution layer with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T = f32> {
    pub spec: ConvSpec,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl Conv<f32> {
    pub fn load(src: &mut dyn ParamSource, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let dims = spec.weight_dims();
        let weight = src.param(
            &format!("{name}.weight"),
            &dims,
            ParamKind::Weight {
                fan_in: dims[0] * dims[1],
            },
        )?;
        let bias = src.param(&format!("{name}.bias"), &[spec.out_channels], ParamKind::Bias)?;
        Ok(Self { spec, weight, bias })
    }
}

impl<T: Real> Conv<T> {
    pub fn zeros(spec: ConvSpec) -> Self {
        let [k, i, o] = spec.weight_dims();
        Self {
            spec,
            weight: vec![T::zero(); k * i * o],
            bias: vec![T::zero(); o],
        }
    }

    pub fn cast<U: Real>(&self) -> Conv<U> {
        let c = |v: &[T]| v.iter().map(|&x| U::from(x).unwrap()).collect();
        Conv {
            spec: self.spec,
            weight: c(&self.weight),
            bias: c(&self.bias),
        }
    }

    pub fn forward(&self, x: &SparseTensor<T>, out_coords: Option<&[VoxelCoord]>) -> Result<SparseTensor<T>> {
        sparse_conv(x, &self.spec, &self.weight, &self.bias, out_coords)
    }

    /// Stride-1 forward reusing precomputed maps for `x.coords()`.
    pub fn forward_same(&self, x: &SparseTensor<T>, maps: &SameCoordMaps) -> Result<SparseTensor<T>> {
        let map = maps.get(self.spec.kernel_size)?;
        sparse_conv_mapped(x, &self.spec, &self.weight, &self.bias, map, x.coords())
    }
}

/// Stride-1 kernel maps of one coordinate set, shared by every layer that
/// keeps coordinates fixed.
pub struct SameCoordMaps {
    maps: Vec<(u32, KernelMap)>,
}

impl SameCoordMaps {
    pub fn new(coords: &[VoxelCoord]) -> Result<Self> {
        let maps = [1, 3]
            .into_iter()
            .map(|k| build_kernel_map(coords, coords, &ConvSpec::new(1, 1, k)).map(|m| (k, m)))
            .collect::<Result<_>>()?;
        Ok(Self { maps })
    }

    fn get(&self, kernel: u32) -> Result<&KernelMap> {
        self.maps
            .iter()
            .find(|(k, _)| *k == kernel)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::contract(format!("no cached map for kernel {kernel}")))
    }
}

/// Joins tensors on identical coordinates along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&SparseTensor<T>]) -> Result<SparseTensor<T>> {
    let first = parts.first().ok_or_else(|| Error::contract("nothing to concatenate"))?;
    if parts.iter().any(|p| p.coords() != first.coords()) {
        return Err(Error::contract("channel concat needs identical coordinates"));
    }
    let width: usize = parts.iter().map(|p| p.channels()).sum();
    let mut feats = Vec::with_capacity(first.len() * width);
    for i in 0..first.len() {
        for p in parts {
            feats.extend_from_slice(p.row(i));
        }
    }
    Ok(SparseTensor::from_parts(first.scale(), first.coords().to_vec(), width, feats))
}

/// Inception-residual block: `x + [b1 | b2 | b3](x)` with
/// b1 = 1x1 -> 3x3 (O/4), b2 = 3x3 -> 3x3 (O/4), b3 = 1x1 (O/2).
#[derive(Clone, Debug, PartialEq)]
pub struct IrnBlock<T = f32> {
    pub b1a: Conv<T>,
    pub b1b: Conv<T>,
    pub b2a: Conv<T>,
    pub b2b: Conv<T>,
    pub b3: Conv<T>,
}

fn irn_specs(ch: usize) -> [ConvSpec; 5] {
    let q = ch / 4;
    [
        ConvSpec::new(ch, q, 1),
        ConvSpec::new(q, q, 3),
        ConvSpec::new(ch, q, 3),
        ConvSpec::new(q, q, 3),
        ConvSpec::new(ch, ch / 2, 1),
    ]
}

impl IrnBlock<f32> {
    pub fn load(src: &mut dyn ParamSource, name: &str, channels: usize) -> Result<Self> {
        if channels < 4 || channels % 4 != 0 {
            return Err(Error::contract(format!("IRN width {channels} must be a multiple of 4")));
        }
        let [s1a, s1b, s2a, s2b, s3] = irn_specs(channels);
        Ok(Self {
            b1a: Conv::load(src, &format!("{name}.b1a"), s1a)?,
            b1b: Conv::load(src, &format!("{name}.b1b"), s1b)?,
            b2a: Conv::load(src, &format!("{name}.b2a"), s2a)?,
            b2b: Conv::load(src, &format!("{name}.b2b"), s2b)?,
            b3: Conv::load(src, &format!("{name}.b3"), s3)?,
        })
    }
}

impl<T: Real> IrnBlock<T> {
    pub fn zeros(channels: usize) -> Self {
        let [s1a, s1b, s2a, s2b, s3] = irn_specs(channels);
        Self {
            b1a: Conv::zeros(s1a),
            b1b: Conv::zeros(s1b),
            b2a: Conv::zeros(s2a),
            b2b: Conv::zeros(s2b),
            b3: Conv::zeros(s3),
        }
    }

    pub fn channels(&self) -> usize {
        self.b1a.spec.in_channels
    }

    pub fn forward(&self, x: &SparseTensor<T>, maps: &SameCoordMaps) -> Result<SparseTensor<T>> {
        if x.channels() != self.channels() {
            return Err(Error::contract(format!(
                "IRN block expects {} channels, got {}",
                self.channels(),
                x.channels()
            )));
        }
        let mut h1 = self.b1a.forward_same(x, maps)?;
        relu_in_place(&mut h1);
        let b1 = self.b1b.forward_same(&h1, maps)?;
        let mut h2 = self.b2a.forward_same(x, maps)?;
        relu_in_place(&mut h2);
        let b2 = self.b2b.forward_same(&h2, maps)?;
        let b3 = self.b3.forward_same(x, maps)?;
        let inc = concat_channels(&[&b1, &b2, &b3])?;
        x.add_aligned(&inc)
    }
}

/// Residual block: `x + conv3(relu(conv3(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct RnBlock<T = f32> {
    pub c1: Conv<T>,
    pub c2: Conv<T>,
}

impl RnBlock<f32> {
    pub fn load(src: &mut dyn ParamSource, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            c1: Conv::load(src, &format!("{name}.c1"), ConvSpec::new(channels, channels, 3))?,
            c2: Conv::load(src, &format!("{name}.c2"), ConvSpec::new(channels, channels, 3))?,
        })
    }
}

impl<T: Real> RnBlock<T> {
    pub fn zeros(channels: usize) -> Self {
        Self {
            c1: Conv::zeros(ConvSpec::new(channels, channels, 3)),
            c2: Conv::zeros(ConvSpec::new(channels, channels, 3)),
        }
    }

    pub fn forward(&self, x: &SparseTensor<T>, maps: &SameCoordMaps) -> Result<SparseTensor<T>> {
        if x.channels() != self.c1.spec.in_channels {
            return Err(Error::contract("RN block channel mismatch"));
        }
        let mut h = self.c1.forward_same(x, maps)?;
        relu_in_place(&mut h);
        let h = self.c2.forward_same(&h, maps)?;
        x.add_aligned(&h)
    }
}

pub fn run_irn_stack<T: Real>(blocks: &[IrnBlock<T>], x: SparseTensor<T>) -> Result<SparseTensor<T>> {
    if blocks.is_empty() {
        return Ok(x);
    }
    let maps = SameCoordMaps::new(x.coords())?;
    blocks.iter().try_fold(x, |h, b| b.forward(&h, &maps))
}

pub fn run_rn_stack<T: Real>(blocks: &[RnBlock<T>], x: SparseTensor<T>) -> Result<SparseTensor<T>> {
    if blocks.is_empty() {
        return Ok(x);
    }
    let maps = SameCoordMaps::new(x.coords())?;
    blocks.iter().try_fold(x, |h, b| b.forward(&h, &maps))
}

/// Stride-2 convolution, ReLU, then a stack of IRN blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct DownBlock {
    pub conv: Conv,
    pub irn: Vec<IrnBlock>,
}

impl DownBlock {
    pub fn load(src: &mut dyn ParamSource, name: &str, cin: usize, cout: usize, irn: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv::load(src, &format!("{name}.down"), ConvSpec::down(cin, cout))?,
            irn: (0..irn)
                .map(|k| IrnBlock::load(src, &format!("{name}.irn{k}"), cout))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, x: &SparseTensor) -> Result<SparseTensor> {
        let mut h = self.conv.forward(x, None)?;
        relu_in_place(&mut h);
        run_irn_stack(&self.irn, h)
    }
}

/// Transposed convolution onto prescribed coordinates, ReLU, then IRN blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct UpBlock {
    pub conv: Conv,
    pub irn: Vec<IrnBlock>,
}

impl UpBlock {
    pub fn load(src: &mut dyn ParamSource, name: &str, cin: usize, cout: usize, irn: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv::load(src, &format!("{name}.up"), ConvSpec::up(cin, cout))?,
            irn: (0..irn)
                .map(|k| IrnBlock::load(src, &format!("{name}.irn{k}"), cout))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, x: &SparseTensor, target: &[VoxelCoord]) -> Result<SparseTensor> {
        let mut h = self.conv.forward(x, Some(target))?;
        relu_in_place(&mut h);
        run_irn_stack(&self.irn, h)
    }
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Occupancy head: 1x1 convolution to one logit per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T = f32> {
    pub conv: Conv<T>,
}

impl Classifier<f32> {
    pub fn load(src: &mut dyn ParamSource, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv::load(src, name, ConvSpec::new(channels, 1, 1))?,
        })
    }
}

impl<T: Real> Classifier<T> {
    pub fn logits(&self, x: &SparseTensor<T>) -> Result<Vec<T>> {
        Ok(self.conv.forward(x, None)?.feats().to_vec())
    }

    pub fn probabilities(&self, x: &SparseTensor<T>) -> Result<Vec<T>> {
        Ok(self.logits(x)?.into_iter().map(sigmoid).collect())
    }
}

/// Indices of the `min(keep, N)` highest scores, ties to the lower index
/// (the lexicographically smaller coordinate), returned ascending.
pub fn top_k_indices<T: Real>(scores: &[T], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let (sa, sb) = (scores[a].to_f64().unwrap(), scores[b].to_f64().unwrap());
        sb.total_cmp(&sa).then(a.cmp(&b))
    });
    idx.truncate(keep.min(scores.len()));
    idx.sort_unstable();
    idx
}

/// Keeps the `min(keep, N)` most probable voxels.
pub fn adaptive_prune<T: Real>(x: &SparseTensor<T>, scores: &[T], keep: usize) -> Result<SparseTensor<T>> {
    if scores.len() != x.len() {
        return Err(Error::contract("one score per voxel required"));
    }
    Ok(x.select_rows(&top_k_indices(scores, keep)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coords(v: &[[i32; 3]]) -> Vec<VoxelCoord> {
        let mut c: Vec<VoxelCoord> = v.iter().map(|&a| a.into()).collect();
        c.sort_unstable();
        c
    }

    #[test]
    fn zero_irn_is_identity() {
        let x = SparseTensor::new(0, coords(&[[0, 0, 0], [1, 0, 0]]), 8, (0..16).map(|v| v as f32 - 3.0).collect()).unwrap();
        let y = run_irn_stack(&[IrnBlock::zeros(8), IrnBlock::zeros(8)], x.clone()).unwrap();
        assert_eq!(y, x);
        let y = run_rn_stack(&[RnBlock::zeros(8)], x.clone()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn irn_rejects_wrong_width() {
        let x = SparseTensor::<f32>::zeros(0, coords(&[[0, 0, 0]]), 4).unwrap();
        let maps = SameCoordMaps::new(x.coords()).unwrap();
        assert!(IrnBlock::<f32>::zeros(8).forward(&x, &maps).is_err());
    }

    #[test]
    fn classifier_cases() {
        let x = SparseTensor::new(0, coords(&[[0, 0, 0], [0, 0, 1]]), 2, vec![1.0f32, 2.0, -1.0, 0.5]).unwrap();
        let zero = Classifier { conv: Conv::<f32>::zeros(ConvSpec::new(2, 1, 1)) };
        assert_eq!(zero.probabilities(&x).unwrap(), vec![0.5, 0.5]);
        let mut big = zero.clone();
        big.conv.bias[0] = 40.0;
        assert!(big.probabilities(&x).unwrap().iter().all(|&p| p > 1.0 - 1e-6));
        let mut c = zero;
        c.conv.weight = vec![0.5, -1.0];
        c.conv.bias[0] = 0.25;
        let p = c.probabilities(&x).unwrap();
        // logits 0.5 - 2 + 0.25 = -1.25 and -0.5 - 0.5 + 0.25 = -0.75
        assert!((p[0] - 1.0 / (1.0 + 1.25f32.exp())).abs() < 1e-7);
        assert!((p[1] - 1.0 / (1.0 + 0.75f32.exp())).abs() < 1e-7);
    }

    #[test]
    fn prune_examples() {
        let x = SparseTensor::new(0, coords(&[[0, 0, 0], [0, 0, 1], [0, 0, 2]]), 1, vec![1.0f32, 2.0, 3.0]).unwrap();
        let p = adaptive_prune(&x, &[0.9, 0.8, 0.1], 2).unwrap();
        assert_eq!(p.feats(), &[1.0, 2.0]);
        assert_eq!(adaptive_prune(&x, &[0.9, 0.8, 0.1], 5).unwrap(), x);
        // ties keep the lexicographically smaller coordinates
        let p = adaptive_prune(&x, &[0.3, 0.7, 0.3], 2).unwrap();
        assert_eq!(p.feats(), &[1.0, 2.0]);
        let p = adaptive_prune(&x, &[0.5, 0.5, 0.5], 1).unwrap();
        assert_eq!(p.coords(), &[VoxelCoord::new(0, 0, 0)]);
        assert!(adaptive_prune(&x, &[0.5], 1).is_err());
    }
}
