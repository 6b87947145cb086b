//! Hermetic test sequences: a voxelized spherical shell moving rigidly.
//!
//! Spec string: `rigid:N,frames,translation`, where `translation` is a
//! per-frame integer shift along x, or `dx/dy/dz`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::voxel::{PointCloudFrame, VoxelCoord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RigidSpec {
    pub points: usize,
    pub frames: usize,
    pub translation: [i32; 3],
}

impl RigidSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::contract(format!("synthetic spec `{s}` is not rigid:N,frames,translation"));
        let body = s.strip_prefix("rigid:").ok_or_else(bad)?;
        let parts: Vec<&str> = body.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let points: usize = parts[0].parse().map_err(|_| bad())?;
        let frames: usize = parts[1].parse().map_err(|_| bad())?;
        let t: Vec<i32> = parts[2]
            .split('/')
            .map(|v| v.trim().parse::<i32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let translation = match t.as_slice() {
            [x] => [*x, 0, 0],
            [x, y, z] => [*x, *y, *z],
            _ => return Err(bad()),
        };
        if points == 0 || frames == 0 {
            return Err(bad());
        }
        Ok(Self {
            points,
            frames,
            translation,
        })
    }
}

/// Exactly `spec.points` voxels per frame. Frame `t` is frame 0 shifted by
/// `t * translation`. The seed only breaks ties between equidistant voxels.
pub fn rigid_sequence(spec: &RigidSpec, precision_bits: u32, seed: u64) -> Result<Vec<PointCloudFrame>> {
    let side = 1i64 << precision_bits;
    let radius = (spec.points as f64 / (4.0 * std::f64::consts::PI)).sqrt().max(1.0);
    let travel: Vec<i64> = spec
        .translation
        .iter()
        .map(|&d| d as i64 * (spec.frames as i64 - 1))
        .collect();
    let reach = radius.ceil() as i64 + 3;
    // centre chosen so the whole trajectory stays inside the cube
    let mut center = [0i64; 3];
    for a in 0..3 {
        let lo = reach - travel[a].min(0);
        let hi = side - 1 - reach - travel[a].max(0);
        if lo > hi {
            return Err(Error::contract(format!(
                "{} points moving {:?} per frame do not fit a {}-bit cube",
                spec.points, spec.translation, precision_bits
            )));
        }
        center[a] = ((lo + hi) / 2).clamp(lo, hi);
    }
    let c = center.map(|v| v as f64 + 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cand: Vec<(f64, u64, VoxelCoord)> = Vec::new();
    for x in center[0] - reach..=center[0] + reach {
        for y in center[1] - reach..=center[1] + reach {
            for z in center[2] - reach..=center[2] + reach {
                let d = ((x as f64 + 0.5 - c[0]).powi(2) + (y as f64 + 0.5 - c[1]).powi(2) + (z as f64 + 0.5 - c[2]).powi(2)).sqrt();
                let off = (d - radius).abs();
                if off <= 2.0 {
                    cand.push((off, rng.gen(), VoxelCoord::new(x as i32, y as i32, z as i32)));
                }
            }
        }
    }
    if cand.len() < spec.points {
        return Err(Error::contract(format!("shell holds only {} voxels", cand.len())));
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let base: Vec<VoxelCoord> = cand[..spec.points].iter().map(|v| v.2).collect();
    (0..spec.frames)
        .map(|t| {
            let shift = spec.translation.map(|d| d * t as i32);
            PointCloudFrame::from_points(precision_bits, base.iter().map(|p| p.offset(shift)).collect())
        })
        .collect()
}
