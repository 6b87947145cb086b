//! Geometry distortion (D1 point-to-point, D2 point-to-plane), bits per
//! point and Bjontegaard delta rate.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::voxel::{PointCloudFrame, SpatialGrid, VoxelCoord};

pub const DEFAULT_PEAK: f64 = 1023.0;
pub const NORMAL_NEIGHBORS: usize = 16;
// components below this count as zero for the normal sign rule
const SIGN_EPS: f64 = 1e-9;

/// A PSNR value together with the MSE it came from. A zero MSE gives an
/// infinite PSNR.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr {
    pub mse: f64,
    pub db: f64,
}

impl Psnr {
    pub fn from_mse(mse: f64, peak: f64) -> Self {
        let db = if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (3.0 * peak * peak / mse).log10()
        };
        Self { mse, db }
    }

    pub fn is_infinite(&self) -> bool {
        self.db.is_infinite()
    }
}

/// One rate point of an RD curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub d1_db: f64,
    pub d2_db: Option<f64>,
}

fn check_nonempty(a: &[VoxelCoord], b: &[VoxelCoord]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Metric("distortion of an empty cloud".into()));
    }
    Ok(())
}

fn diff(q: VoxelCoord, r: VoxelCoord) -> [f64; 3] {
    [
        q.x as f64 - r.x as f64,
        q.y as f64 - r.y as f64,
        q.z as f64 - r.z as f64,
    ]
}

/// Nearest reference point of every query.
fn nearest(queries: &[VoxelCoord], reference: &[VoxelCoord]) -> Result<Vec<usize>> {
    let grid = SpatialGrid::new(reference)?;
    Ok(queries
        .par_iter()
        .map(|q| grid.query(q.to_f64(), 1)[0].index)
        .collect())
}

/// Mean squared distance from each point of `a` to its nearest point in `b`.
pub fn point_to_point_mse(a: &[VoxelCoord], b: &[VoxelCoord]) -> Result<f64> {
    check_nonempty(a, b)?;
    let nn = nearest(a, b)?;
    let sum: f64 = a
        .iter()
        .zip(&nn)
        .map(|(&q, &j)| diff(q, b[j]).iter().map(|d| d * d).sum::<f64>())
        .sum();
    Ok(sum / a.len() as f64)
}

/// Unit normals by PCA over the `k` nearest neighbours (the point itself
/// included). `None` when fewer than three points are available.
///
/// Sign rule: positive x component; on a zero x, positive y; then z.
pub fn estimate_normals(coords: &[VoxelCoord], k: usize) -> Result<Vec<Option<[f64; 3]>>> {
    let grid = SpatialGrid::new(coords)?;
    Ok(coords
        .par_iter()
        .map(|c| {
            let nb = grid.query(c.to_f64(), k);
            if nb.len() < 3 {
                return None;
            }
            let n = nb.len() as f64;
            let mut mean = [0.0; 3];
            for v in &nb {
                let p = coords[v.index].to_f64();
                for a in 0..3 {
                    mean[a] += p[a] / n;
                }
            }
            let mut cov = Matrix3::<f64>::zeros();
            for v in &nb {
                let p = coords[v.index].to_f64();
                let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
                for r in 0..3 {
                    for s in 0..3 {
                        cov[(r, s)] += d[r] * d[s];
                    }
                }
            }
            let eig = SymmetricEigen::new(cov);
            let mut best = 0;
            for i in 1..3 {
                if eig.eigenvalues[i] < eig.eigenvalues[best] {
                    best = i;
                }
            }
            let col = eig.eigenvectors.column(best);
            let mut nrm = [col[0], col[1], col[2]];
            let len = (nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]).sqrt();
            if len == 0.0 || !len.is_finite() {
                return None;
            }
            for v in nrm.iter_mut() {
                *v /= len;
            }
            let flip = nrm.iter().find(|v| v.abs() > SIGN_EPS).is_some_and(|v| *v < 0.0);
            if flip {
                for v in nrm.iter_mut() {
                    *v = -*v;
                }
            }
            Some(nrm)
        })
        .collect())
}

/// Mean squared projection of the error vectors from `a` onto the normals of
/// their nearest points in `b`.
pub fn point_to_plane_mse(a: &[VoxelCoord], b: &[VoxelCoord]) -> Result<f64> {
    check_nonempty(a, b)?;
    let normals = estimate_normals(b, NORMAL_NEIGHBORS)?;
    let nn = nearest(a, b)?;
    let sum: f64 = a
        .iter()
        .zip(&nn)
        .map(|(&q, &j)| {
            let e = diff(q, b[j]);
            match normals[j] {
                Some(n) => {
                    let p = e[0] * n[0] + e[1] * n[1] + e[2] * n[2];
                    p * p
                }
                None => e.iter().map(|d| d * d).sum(),
            }
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Symmetric D1 PSNR.
pub fn d1_psnr(a: &PointCloudFrame, b: &PointCloudFrame, peak: f64) -> Result<Psnr> {
    let (a, b) = (a.coords(), b.coords());
    let mse = point_to_point_mse(a, b)?.max(point_to_point_mse(b, a)?);
    Ok(Psnr::from_mse(mse, peak))
}

/// Symmetric D2 PSNR.
pub fn d2_psnr(a: &PointCloudFrame, b: &PointCloudFrame, peak: f64) -> Result<Psnr> {
    let (a, b) = (a.coords(), b.coords());
    let mse = point_to_plane_mse(a, b)?.max(point_to_plane_mse(b, a)?);
    Ok(Psnr::from_mse(mse, peak))
}

pub fn bpp(bits: u64, points: usize) -> Result<f64> {
    if points == 0 {
        return Err(Error::Metric("bits per point of an empty frame".into()));
    }
    Ok(bits as f64 / points as f64)
}

fn polyfit3(x: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    let a = DMatrix::from_fn(x.len(), 4, |r, c| x[r].powi(c as i32));
    let b = DVector::from_column_slice(y);
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Metric(format!("cubic fit failed: {e}")))?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

fn integral(p: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| p[0] * x + p[1] * x * x / 2.0 + p[2] * x.powi(3) / 3.0 + p[3] * x.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

fn check_curve(curve: &[(f64, f64)]) -> Result<()> {
    if curve.len() < 4 {
        return Err(Error::Metric(format!("RD curve has {} points, need at least 4", curve.len())));
    }
    if curve.iter().any(|&(r, q)| !(r > 0.0 && r.is_finite() && q.is_finite())) {
        return Err(Error::Metric("RD curve needs positive finite rates and finite quality".into()));
    }
    let mut q: Vec<f64> = curve.iter().map(|p| p.1).collect();
    q.sort_by(f64::total_cmp);
    if q.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Metric("RD curve repeats a quality value".into()));
    }
    Ok(())
}

/// Bjontegaard delta rate in percent of `test` against `anchor`; each curve
/// is a list of `(rate, psnr)` pairs. Negative means `test` needs fewer bits.
pub fn bd_rate(anchor: &[(f64, f64)], test: &[(f64, f64)]) -> Result<f64> {
    check_curve(anchor)?;
    check_curve(test)?;
    let fit = |c: &[(f64, f64)]| {
        let q: Vec<f64> = c.iter().map(|p| p.1).collect();
        let r: Vec<f64> = c.iter().map(|p| p.0.log10()).collect();
        polyfit3(&q, &r)
    };
    let (pa, pt) = (fit(anchor)?, fit(test)?);
    let range = |c: &[(f64, f64)]| {
        c.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)))
    };
    let (alo, ahi) = range(anchor);
    let (tlo, thi) = range(test);
    let (lo, hi) = (alo.max(tlo), ahi.min(thi));
    if hi <= lo {
        return Err(Error::Metric(format!("no quality overlap ({alo}..{ahi} vs {tlo}..{thi})")));
    }
    let avg = (integral(&pt, lo, hi) - integral(&pa, lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

/// BD-rate over the D1 column of two RD curves.
pub fn bd_rate_d1(anchor: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    let pick = |c: &[RdPoint]| c.iter().map(|p| (p.bpp, p.d1_db)).collect::<Vec<_>>();
    bd_rate(&pick(anchor), &pick(test))
}

/// BD-rate over the D2 column; every point must carry a D2 value.
pub fn bd_rate_d2(anchor: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    let pick = |c: &[RdPoint]| {
        c.iter()
            .map(|p| {
                p.d2_db
                    .map(|d| (p.bpp, d))
                    .ok_or_else(|| Error::Metric("RD point without a D2 value".into()))
            })
            .collect::<Result<Vec<_>>>()
    };
    bd_rate(&pick(anchor)?, &pick(test)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(pts: &[[i32; 3]]) -> PointCloudFrame {
        PointCloudFrame::from_points(10, pts.iter().map(|&p| p.into()).collect()).unwrap()
    }

    #[test]
    fn identical_clouds_are_infinite() {
        let f = frame(&[[0, 0, 0], [1, 2, 3], [4, 4, 4], [5, 0, 1]]);
        assert!(d1_psnr(&f, &f, DEFAULT_PEAK).unwrap().is_infinite());
        assert!(d2_psnr(&f, &f, DEFAULT_PEAK).unwrap().is_infinite());
    }

    #[test]
    fn single_point_offset() {
        let a = frame(&[[0, 0, 0]]);
        let b = frame(&[[1, 0, 0]]);
        let p = d1_psnr(&a, &b, DEFAULT_PEAK).unwrap();
        assert_eq!(p.mse, 1.0);
        assert!((p.db - 64.968_725).abs() < 1e-5, "{}", p.db);
        assert_eq!(p, d1_psnr(&b, &a, DEFAULT_PEAK).unwrap());
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(point_to_point_mse(&[], &[VoxelCoord::new(0, 0, 0)]).is_err());
        assert!(bpp(10, 0).is_err());
        assert_eq!(bpp(1000, 500).unwrap(), 2.0);
    }

    #[test]
    fn plane_distance_is_projection() {
        // reference: the z = 0 plane
        let mut r = Vec::new();
        for x in 0..8 {
            for y in 0..8 {
                r.push(VoxelCoord::new(x, y, 0));
            }
        }
        let q = [VoxelCoord::new(3, 4, 2)];
        assert_eq!(point_to_plane_mse(&q, &r).unwrap(), 4.0);
        let n = estimate_normals(&r, NORMAL_NEIGHBORS).unwrap();
        assert!(n.iter().all(|v| v.map(|v| (v[2] - 1.0).abs() < 1e-12) == Some(true)));
        // a query sitting off-plane but also shifted in-plane
        let q = [VoxelCoord::new(12, 4, 3)];
        assert_eq!(point_to_point_mse(&q, &r).unwrap(), 25.0 + 9.0);
        assert!((point_to_plane_mse(&q, &r).unwrap() - 9.0).abs() < 1e-9);
    }

    #[test]
    fn normal_fallback_for_tiny_reference() {
        let r = [VoxelCoord::new(0, 0, 0), VoxelCoord::new(2, 0, 0)];
        assert_eq!(estimate_normals(&r, 16).unwrap(), vec![None, None]);
        let q = [VoxelCoord::new(0, 1, 1)];
        assert_eq!(point_to_plane_mse(&q, &r).unwrap(), 2.0);
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let a: Vec<VoxelCoord> = (0..300)
                .map(|_| VoxelCoord::new(rng.gen_range(0..40), rng.gen_range(0..40), rng.gen_range(0..40)))
                .collect();
            let b: Vec<VoxelCoord> = (0..200)
                .map(|_| VoxelCoord::new(rng.gen_range(0..40), rng.gen_range(0..40), rng.gen_range(0..40)))
                .collect();
            let brute = a
                .iter()
                .map(|&q| {
                    b.iter()
                        .map(|&r| diff(q, r).iter().map(|d| d * d).sum::<f64>())
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / a.len() as f64;
            assert_eq!(point_to_point_mse(&a, &b).unwrap(), brute);
        }
    }

    #[test]
    fn d2_never_exceeds_d1() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<[i32; 3]> = (0..400).map(|_| [rng.gen_range(0..30), rng.gen_range(0..30), rng.gen_range(0..30)]).collect();
        let b: Vec<[i32; 3]> = (0..400).map(|_| [rng.gen_range(0..30), rng.gen_range(0..30), rng.gen_range(0..30)]).collect();
        let (fa, fb) = (frame(&a), frame(&b));
        assert!(d2_psnr(&fa, &fb, DEFAULT_PEAK).unwrap().mse <= d1_psnr(&fa, &fb, DEFAULT_PEAK).unwrap().mse + 1e-12);
    }

    fn curve() -> Vec<(f64, f64)> {
        vec![(0.1, 60.0), (0.2, 63.0), (0.35, 65.5), (0.6, 68.0), (1.0, 70.0)]
    }

    #[test]
    fn bd_rate_cases() {
        let a = curve();
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-9);
        let half: Vec<_> = a.iter().map(|&(r, q)| (r / 2.0, q)).collect();
        assert!((bd_rate(&a, &half).unwrap() + 50.0).abs() < 1e-6);
        let disjoint: Vec<_> = a.iter().map(|&(r, q)| (r, q + 100.0)).collect();
        assert!(bd_rate(&a, &disjoint).is_err());
        assert!(bd_rate(&a[..3], &a).is_err());
    }

    #[test]
    fn bd_rate_antisymmetry() {
        let a = curve();
        let b: Vec<_> = a.iter().map(|&(r, q)| (r * 1.01, q + 0.05)).collect();
        let ab = bd_rate(&a, &b).unwrap();
        let ba = bd_rate(&b, &a).unwrap();
        assert!((ab + ba / (1.0 + ba / 100.0)).abs() < 1e-6, "{ab} {ba}");
    }

    proptest! {
        #[test]
        fn psnr_decreases_with_mse(m in 1e-6f64..1e6, f in 1.0001f64..10.0) {
            prop_assert!(Psnr::from_mse(m * f, DEFAULT_PEAK).db < Psnr::from_mse(m, DEFAULT_PEAK).db);
        }
    }
}
