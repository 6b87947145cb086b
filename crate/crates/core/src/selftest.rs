//! Built-in fixture checks, with optional fault injection to prove that each
//! check can fail.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{bce_grad, bce_with_logits};
use crate::entropy::EntropyModel;
use crate::error::{Error, Result};
use crate::gradcheck::{central_differences, relative_error, run_all, TOLERANCE};
use crate::motion::{awi_3d, DEFAULT_ALPHA};
use crate::nn::oracle::{dense_conv_reference, OracleCase};
use crate::nn::sparse_conv;
use crate::octree::{octree_decode, octree_encode};
use crate::voxel::{SparseTensor, VoxelCoord};

/// Occupancy bytes of the single point (0,0,0) in a depth-9 octree.
pub const SINGLE_POINT_DEPTH9: [u8; 9] = [0x80; 9];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    Entropy,
    Octree,
    Conv,
    Awi,
    Gradcheck,
}

impl Fault {
    pub const ALL: [Fault; 5] = [Fault::Entropy, Fault::Octree, Fault::Conv, Fault::Awi, Fault::Gradcheck];

    pub fn name(self) -> &'static str {
        match self {
            Self::Entropy => "entropy",
            Self::Octree => "octree",
            Self::Conv => "conv",
            Self::Awi => "awi",
            Self::Gradcheck => "gradcheck",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown fault `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

fn entropy_check(fault: bool) -> Result<CheckOutcome> {
    let model = EntropyModel::laplacian(&[0.7, 2.0, 5.0], 32, 1e-3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut symbols: Vec<i32> = (0..3000).map(|_| rng.gen_range(-6..=6)).collect();
    symbols.extend([1000, -40_000]);
    let mut bytes = model.encode(&symbols)?;
    if fault {
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
    }
    let ok = model.decode(&bytes, symbols.len()).map(|d| d == symbols).unwrap_or(false);
    let empty_ok = model.decode(&model.encode(&[])?, 0)?.is_empty();
    Ok(CheckOutcome::new(
        "entropy round trip",
        ok && empty_ok,
        format!("{} symbols in {} bytes", symbols.len(), bytes.len()),
    ))
}

fn octree_check(fault: bool) -> Result<CheckOutcome> {
    let mut expected = SINGLE_POINT_DEPTH9.to_vec();
    if fault {
        expected[8] = 0x40;
    }
    let single = octree_encode(&[VoxelCoord::new(0, 0, 0)], 9, false)?;
    let mut ok = single.payload == expected;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for depth in 4..=10u32 {
        let side = 1 << depth;
        let mut pts: Vec<VoxelCoord> = (0..500)
            .map(|_| VoxelCoord::new(rng.gen_range(0..side), rng.gen_range(0..side), rng.gen_range(0..side)))
            .collect();
        pts.sort_unstable();
        pts.dedup();
        for range_coded in [false, true] {
            ok &= octree_decode(&octree_encode(&pts, depth, range_coded)?)? == pts;
        }
    }
    Ok(CheckOutcome::new("octree round trip", ok, "depth-9 fixture and depths 4-10"))
}

fn conv_check(fault: bool) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let mut case = OracleCase::seeded(seed, 16)?;
        let err = if fault && seed == 0 {
            let sparse = sparse_conv(&case.x, &case.spec, &case.weight, &case.bias, Some(&case.out_coords))?;
            // the oracle sees a corrupted bias
            case.bias[0] += 1e-3;
            let dense = dense_conv_reference(&case.x, &case.spec, &case.weight, &case.bias, &case.out_coords)?;
            sparse.feats().iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        } else {
            case.max_abs_error()?
        };
        worst = worst.max(err);
    }
    Ok(CheckOutcome::new("dense-oracle conv", worst <= 1e-5, format!("max abs error {worst:.2e}")))
}

fn scalar_reference(pts: &[[i32; 3]], vals: &[f64]) -> Result<SparseTensor<f64>> {
    let mut rows: Vec<(VoxelCoord, f64)> = pts.iter().map(|&p| p.into()).zip(vals.iter().copied()).collect();
    rows.sort_by_key(|r| r.0);
    SparseTensor::new(2, rows.iter().map(|r| r.0).collect(), 1, rows.iter().map(|r| r.1).collect())
}

fn awi_at(y: &SparseTensor<f64>, d: [f64; 3]) -> Result<f64> {
    let m = SparseTensor::new(2, vec![VoxelCoord::new(0, 0, 0)], 3, d.to_vec())?;
    Ok(awi_3d(&m, y, DEFAULT_ALPHA)?.feats()[0])
}

/// The adaptively weighted interpolation worked examples with alpha = 3.
pub fn awi_hand_cases(fault: bool) -> Result<Vec<CheckOutcome>> {
    let bump = if fault { 0.5 } else { 0.0 };
    let mut out = Vec::new();
    // sum of inverse squared distances is exactly alpha: plain mean
    let y = scalar_reference(&[[1, 0, 0], [0, 1, 0], [0, 0, 1]], &[1.0, 2.0, 3.0])?;
    let v = awi_at(&y, [0.0; 3])?;
    out.push(CheckOutcome::new("awi sum = alpha gives the mean", (v - 2.0 - bump).abs() < 1e-12, format!("{v}")));
    // sum 1.5 < 3: the mean 2 shrinks by 1.5 / 3
    let y = scalar_reference(&[[1, 1, 0], [0, 1, 1], [1, 0, 1]], &[1.0, 2.0, 3.0])?;
    let v = awi_at(&y, [0.0; 3])?;
    out.push(CheckOutcome::new("awi sum < alpha shrinks", (v - 1.0).abs() < 1e-12, format!("{v}")));
    let y = scalar_reference(&[[0, 0, 0], [1, 0, 0], [0, 1, 0]], &[7.0, 100.0, -50.0])?;
    let v = awi_at(&y, [0.0; 3])?;
    out.push(CheckOutcome::new("awi coincident point", (v - 7.0).abs() < 1e-5, format!("{v}")));
    let y = scalar_reference(&[[0, 0, 0], [1, 0, 0], [0, 1, 0]], &[1.0, 1.0, 1.0])?;
    let v = awi_at(&y, [1e3, 0.0, 0.0])?;
    out.push(CheckOutcome::new("awi far neighbours", v.abs() < 1e-3, format!("{v:.3e}")));
    let limit = [1e6, 1e7, 1e8]
        .iter()
        .map(|&d| awi_at(&y, [d, d, 0.0]))
        .collect::<Result<Vec<_>>>()?;
    let decreasing = limit.windows(2).all(|w| w[1].abs() < w[0].abs()) && limit[0].abs() < 1e-11;
    out.push(CheckOutcome::new("awi vanishes at 1e6+", decreasing, format!("{limit:?}")));
    Ok(out)
}

fn gradcheck_check(fault: bool) -> Result<CheckOutcome> {
    let reports = run_all(5, 1000)?;
    let mut ok = reports.iter().all(|r| r.pass());
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    if fault {
        // a gradient off by 0.1% must be caught
        let z = [0.3, -1.2, 2.0];
        let o = [true, false, false];
        let wrong: Vec<f64> = bce_grad(&z, &o).iter().map(|g| g * 1.001).collect();
        let fd = central_differences(&z, |v| bce_with_logits(v, &o));
        ok &= wrong.iter().zip(&fd).all(|(&a, &f)| relative_error(a, f) <= TOLERANCE);
    }
    Ok(CheckOutcome::new("gradcheck smoke", ok, format!("5 instances per op, worst {worst:.2e}")))
}

/// Runs every check; `fault` corrupts one fixture.
pub fn run_selftest(fault: Option<Fault>) -> Result<Vec<CheckOutcome>> {
    let f = |x: Fault| fault == Some(x);
    let mut out = vec![entropy_check(f(Fault::Entropy))?, octree_check(f(Fault::Octree))?, conv_check(f(Fault::Conv))?];
    out.extend(awi_hand_cases(f(Fault::Awi))?);
    out.push(gradcheck_check(f(Fault::Gradcheck))?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes() {
        let r = run_selftest(None).unwrap();
        assert!(r.iter().all(|c| c.passed), "{r:?}");
    }

    #[test]
    fn every_fault_is_detected() {
        for f in Fault::ALL {
            let r = run_selftest(Some(f)).unwrap();
            assert!(r.iter().any(|c| !c.passed), "{}", f.name());
            assert_eq!(Fault::parse(f.name()).unwrap(), f);
        }
        assert!(Fault::parse("disk").is_err());
    }
}
