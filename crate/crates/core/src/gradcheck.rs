//! Hand-derived gradients of the differentiable operators and a central
//! finite-difference harness that checks them in f64.
//!
//! kNN membership is frozen while differencing, so instances sitting on a
//! neighbour tie or on the AWI denominator switch are re-sampled.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{bce_grad, bce_with_logits};
use crate::entropy::EntropyModel;
use crate::error::{Error, Result};
use crate::motion::{awi_with_neighbors, translated_positions, AWI_NEIGHBORS, DEFAULT_ALPHA, DIST_EPS};
use crate::nn::{build_kernel_map, default_out_coords, sparse_conv_backward, sparse_conv_mapped, ConvSpec, KernelMap};
use crate::voxel::{child_candidates, knn_brute_force, Neighbor, SparseTensor, VoxelCoord};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 100;

// re-sampling margins
const MIN_DIST2: f64 = 0.05;
const TIE_GAP: f64 = 1e-3;
const BRANCH_MARGIN: f64 = 0.05;
const KINK_MARGIN: f64 = 1e-3;
const MAX_RESAMPLES: usize = 10_000;

pub fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-6)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub max_rel_err: f64,
    pub blocks: Vec<(String, f64)>,
    pub tolerance: f64,
    pub instances: usize,
    pub failing_seeds: Vec<u64>,
}

impl GradReport {
    fn single(op: &str, seed: u64, blocks: Vec<(String, f64)>) -> Self {
        let max_rel_err = blocks.iter().map(|b| b.1).fold(0.0, f64::max);
        let failing_seeds = if max_rel_err > TOLERANCE { vec![seed] } else { Vec::new() };
        Self {
            op: op.to_string(),
            max_rel_err,
            blocks,
            tolerance: TOLERANCE,
            instances: 1,
            failing_seeds,
        }
    }

    pub fn pass(&self) -> bool {
        self.failing_seeds.is_empty() && self.max_rel_err <= self.tolerance
    }

    /// Folds per-instance reports into one, keeping the worst block errors.
    pub fn merge(op: &str, reports: Vec<GradReport>) -> Self {
        let mut out = Self {
            op: op.to_string(),
            max_rel_err: 0.0,
            blocks: Vec::new(),
            tolerance: TOLERANCE,
            instances: 0,
            failing_seeds: Vec::new(),
        };
        for r in reports {
            out.max_rel_err = out.max_rel_err.max(r.max_rel_err);
            out.instances += r.instances;
            out.failing_seeds.extend(r.failing_seeds);
            for (name, e) in r.blocks {
                match out.blocks.iter_mut().find(|b| b.0 == name) {
                    Some(b) => b.1 = b.1.max(e),
                    None => out.blocks.push((name, e)),
                }
            }
        }
        out.failing_seeds.sort_unstable();
        out
    }
}

/// Central differences of `loss` with respect to every entry of `params`.
pub fn central_differences(params: &[f64], loss: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let v = p[i];
            p[i] = v + STEP;
            let up = loss(&p);
            p[i] = v - STEP;
            let down = loss(&p);
            p[i] = v;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn max_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &f)| relative_error(a, f))
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-r..r)).collect()
}

fn distinct_coords(rng: &mut ChaCha8Rng, n: usize, side: i32) -> Vec<VoxelCoord> {
    let mut set = BTreeSet::new();
    while set.len() < n {
        set.insert(VoxelCoord::new(
            rng.gen_range(0..side),
            rng.gen_range(0..side),
            rng.gen_range(0..side),
        ));
    }
    set.into_iter().collect()
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------- conv

/// A convolution layer with fixed coordinates and a random linear probe
/// `grad_out` defining the scalar loss `<grad_out, conv(x)>`.
#[derive(Clone, Debug)]
pub struct ConvInstance {
    pub spec: ConvSpec,
    pub x: SparseTensor<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub out_coords: Vec<VoxelCoord>,
    pub map: KernelMap,
    pub grad_out: Vec<f64>,
}

impl ConvInstance {
    pub fn new(spec: ConvSpec, x: SparseTensor<f64>, weight: Vec<f64>, bias: Vec<f64>, grad_out_seed: u64) -> Result<Self> {
        let out_coords = if spec.transposed {
            child_candidates(x.coords())
        } else {
            default_out_coords(x.coords(), &spec)?
        };
        let map = build_kernel_map(x.coords(), &out_coords, &spec)?;
        let mut rng = rng_for(grad_out_seed, 1);
        let grad_out = uniform_vec(&mut rng, out_coords.len() * spec.out_channels, 1.0);
        Ok(Self {
            spec,
            x,
            weight,
            bias,
            out_coords,
            map,
            grad_out,
        })
    }

    /// Seeded instance inside an 8^3 box with a random layer shape.
    pub fn seeded(seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, 0);
        let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let spec = match rng.gen_range(0..5) {
            0 => ConvSpec::new(cin, cout, 1),
            1 => ConvSpec::new(cin, cout, 3),
            2 => ConvSpec::down(cin, cout),
            3 => ConvSpec {
                kernel_size: 3,
                stride: 2,
                ..ConvSpec::new(cin, cout, 3)
            },
            _ => ConvSpec::up(cin, cout),
        };
        let n = rng.gen_range(4..=24);
        let coords = distinct_coords(&mut rng, n, 8);
        let feats = uniform_vec(&mut rng, n * cin, 1.0);
        let x = SparseTensor::new(0, coords, cin, feats)?;
        let weight = uniform_vec(&mut rng, spec.volume() * cin * cout, 1.0);
        let bias = uniform_vec(&mut rng, cout, 1.0);
        Self::new(spec, x, weight, bias, seed)
    }

    pub fn loss_with(&self, feats: &[f64], weight: &[f64], bias: &[f64]) -> f64 {
        let x = SparseTensor::new(self.x.scale(), self.x.coords().to_vec(), self.spec.in_channels, feats.to_vec())
            .expect("instance tensor is valid");
        let y = sparse_conv_mapped(&x, &self.spec, weight, bias, &self.map, &self.out_coords).expect("instance layer is valid");
        dot(y.feats(), &self.grad_out)
    }
}

pub fn grad_sparse_conv(inst: &ConvInstance, seed: u64) -> Result<GradReport> {
    let g = sparse_conv_backward(&inst.x, &inst.spec, &inst.weight, &inst.map, &inst.grad_out)?;
    let fx = central_differences(inst.x.feats(), |f| inst.loss_with(f, &inst.weight, &inst.bias));
    let fw = central_differences(&inst.weight, |w| inst.loss_with(inst.x.feats(), w, &inst.bias));
    let fb = central_differences(&inst.bias, |b| inst.loss_with(inst.x.feats(), &inst.weight, b));
    Ok(GradReport::single(
        "sparse_conv",
        seed,
        vec![
            ("input".into(), max_error(&g.input, &fx)),
            ("weight".into(), max_error(&g.weight, &fw)),
            ("bias".into(), max_error(&g.bias, &fb)),
        ],
    ))
}

// ---------------------------------------------------------------- AWI

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AwiBranch {
    /// `sum 1/d^2 > alpha`: plain inverse-distance weighting.
    Idwa,
    /// `sum 1/d^2 <= alpha`: weights shrink towards zero.
    Shrink,
}

impl AwiBranch {
    pub fn name(self) -> &'static str {
        match self {
            Self::Idwa => "awi_idwa",
            Self::Shrink => "awi_shrink",
        }
    }
}

/// Gradients of `<grad_out, awi(m, y_prev)>` for fixed neighbour sets:
/// `(d/dm, d/dy_prev features)`. Clamped distances contribute no motion
/// gradient.
pub fn awi_backward(
    m: &SparseTensor<f64>,
    y_prev: &SparseTensor<f64>,
    neighbors: &[Vec<Neighbor>],
    alpha: f64,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ch = y_prev.channels();
    if neighbors.len() != m.len() || grad_out.len() != m.len() * ch || m.channels() != 3 {
        return Err(Error::contract("gradient shape does not match the AWI instance"));
    }
    let pos = translated_positions(m);
    let mut gm = vec![0.0; m.len() * 3];
    let mut gf = vec![0.0; y_prev.len() * ch];
    for (i, (q, nb)) in pos.iter().zip(neighbors).enumerate() {
        let g = &grad_out[i * ch..(i + 1) * ch];
        let diff: Vec<[f64; 3]> = nb
            .iter()
            .map(|v| {
                let p = y_prev.coords()[v.index].to_f64();
                [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
            })
            .collect();
        let d2: Vec<f64> = diff.iter().map(|d| dot(d, d)).collect();
        let inv: Vec<f64> = d2.iter().map(|d| 1.0 / d.max(DIST_EPS)).collect();
        let sum: f64 = inv.iter().sum();
        let idwa = sum > alpha;
        let den = sum.max(alpha);
        let gv: Vec<f64> = nb.iter().map(|v| dot(g, y_prev.row(v.index))).collect();
        let out_dot = inv.iter().zip(&gv).map(|(a, b)| a * b).sum::<f64>() / den;
        for (k, v) in nb.iter().enumerate() {
            let w = inv[k] / den;
            for c in 0..ch {
                gf[v.index * ch + c] += w * g[c];
            }
            if d2[k] < DIST_EPS {
                continue;
            }
            // d inv / d q = -2 inv^2 (q - p)
            let coef = if idwa { (gv[k] - out_dot) / den } else { gv[k] / alpha };
            for a in 0..3 {
                gm[i * 3 + a] += coef * -2.0 * inv[k] * inv[k] * diff[k][a];
            }
        }
    }
    Ok((gm, gf))
}

#[derive(Clone, Debug)]
pub struct AwiInstance {
    pub m: SparseTensor<f64>,
    pub y_prev: SparseTensor<f64>,
    pub neighbors: Vec<Vec<Neighbor>>,
    pub alpha: f64,
    pub grad_out: Vec<f64>,
}

/// Branch of a translated position, or `None` when it sits on a neighbour
/// tie, the distance clamp or the branch boundary.
fn classify(q: [f64; 3], y_coords: &[VoxelCoord], alpha: f64) -> Option<AwiBranch> {
    let all = knn_brute_force(&[q], y_coords, AWI_NEIGHBORS + 1).ok()?.remove(0);
    if all.len() > AWI_NEIGHBORS && all[AWI_NEIGHBORS].dist2 - all[AWI_NEIGHBORS - 1].dist2 < TIE_GAP {
        return None;
    }
    let nb = &all[..AWI_NEIGHBORS.min(all.len())];
    if nb.iter().any(|v| v.dist2 < MIN_DIST2) {
        return None;
    }
    let sum: f64 = nb.iter().map(|v| 1.0 / v.dist2).sum();
    if (sum - alpha).abs() < BRANCH_MARGIN * alpha {
        None
    } else if sum > alpha {
        Some(AwiBranch::Idwa)
    } else {
        Some(AwiBranch::Shrink)
    }
}

impl AwiInstance {
    /// Builds an instance whose every query lies in `branch`, re-sampling
    /// query positions that sit on a tie, the clamp or the branch boundary.
    pub fn from_parts(
        y_prev: SparseTensor<f64>,
        queries: &[VoxelCoord],
        rng: &mut ChaCha8Rng,
        branch: AwiBranch,
        alpha: f64,
    ) -> Result<Self> {
        let y_coords = y_prev.coords().to_vec();
        let mut motion = Vec::with_capacity(queries.len() * 3);
        for u in queries {
            let uf = u.to_f64();
            let mut found = None;
            for _ in 0..MAX_RESAMPLES {
                let q = match branch {
                    AwiBranch::Idwa => {
                        let p = y_coords[rng.gen_range(0..y_coords.len())].to_f64();
                        let dir = uniform_vec(rng, 3, 1.0);
                        let norm = dot(&dir, &dir).sqrt().max(1e-3);
                        let r = rng.gen_range(0.25..0.5);
                        [p[0] + r * dir[0] / norm, p[1] + r * dir[1] / norm, p[2] + r * dir[2] / norm]
                    }
                    AwiBranch::Shrink => {
                        let d = uniform_vec(rng, 3, 2.0);
                        [uf[0] + d[0], uf[1] + d[1], uf[2] + d[2]]
                    }
                };
                if classify(q, &y_coords, alpha) == Some(branch) {
                    found = Some(q);
                    break;
                }
            }
            let q = found.ok_or_else(|| Error::contract("could not sample an AWI query away from ties"))?;
            motion.extend_from_slice(&[q[0] - uf[0], q[1] - uf[1], q[2] - uf[2]]);
        }
        let m = SparseTensor::new(y_prev.scale(), queries.to_vec(), 3, motion)?;
        let neighbors = knn_brute_force(&translated_positions(&m), &y_coords, AWI_NEIGHBORS)?;
        let grad_out = uniform_vec(rng, queries.len() * y_prev.channels(), 1.0);
        Ok(Self {
            m,
            y_prev,
            neighbors,
            alpha,
            grad_out,
        })
    }

    pub fn seeded(seed: u64, branch: AwiBranch) -> Result<Self> {
        let mut rng = rng_for(seed, 2);
        let ch = rng.gen_range(1..=3);
        let n = rng.gen_range(6..=14);
        let coords = distinct_coords(&mut rng, n, 6);
        let feats = uniform_vec(&mut rng, n * ch, 1.0);
        let y_prev = SparseTensor::new(0, coords, ch, feats)?;
        let nq = rng.gen_range(1..=4);
        let queries = distinct_coords(&mut rng, nq, 6);
        Self::from_parts(y_prev, &queries, &mut rng, branch, DEFAULT_ALPHA)
    }

    pub fn loss_with(&self, motion: &[f64], feats: &[f64]) -> f64 {
        let m = SparseTensor::new(self.m.scale(), self.m.coords().to_vec(), 3, motion.to_vec()).expect("valid motion");
        let y = SparseTensor::new(self.y_prev.scale(), self.y_prev.coords().to_vec(), self.y_prev.channels(), feats.to_vec())
            .expect("valid features");
        let out = awi_with_neighbors(&m, &y, &self.neighbors, self.alpha).expect("valid instance");
        dot(out.feats(), &self.grad_out)
    }

    pub fn gradients(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        awi_backward(&self.m, &self.y_prev, &self.neighbors, self.alpha, &self.grad_out)
    }
}

pub fn grad_awi(inst: &AwiInstance, op: &str, seed: u64) -> Result<GradReport> {
    let (gm, gf) = inst.gradients()?;
    let fm = central_differences(inst.m.feats(), |m| inst.loss_with(m, inst.y_prev.feats()));
    let ff = central_differences(inst.y_prev.feats(), |f| inst.loss_with(inst.m.feats(), f));
    Ok(GradReport::single(
        op,
        seed,
        vec![("motion".into(), max_error(&gm, &fm)), ("features".into(), max_error(&gf, &ff))],
    ))
}

// ---------------------------------------------------------------- BCE and rate

pub fn grad_bce(seed: u64) -> GradReport {
    let mut rng = rng_for(seed, 3);
    let n = rng.gen_range(1..=64);
    let logits = uniform_vec(&mut rng, n, 6.0);
    let occupied: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
    let g = bce_grad(&logits, &occupied);
    let f = central_differences(&logits, |z| bce_with_logits(z, &occupied));
    GradReport::single("bce", seed, vec![("logits".into(), max_error(&g, &f))])
}

/// Total relaxed bits of continuous symbols under `model` and their gradient.
pub fn rate_and_grad(model: &EntropyModel, values: &[f64]) -> (f64, Vec<f64>) {
    let ch = model.channels();
    let mut bits = 0.0;
    let grad = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (b, g) = model.continuous_bits(i % ch, v);
            bits += b;
            g
        })
        .collect();
    (bits, grad)
}

pub fn grad_rate(seed: u64) -> Result<GradReport> {
    let mut rng = rng_for(seed, 4);
    let ch = rng.gen_range(1..=3);
    let scales: Vec<f64> = (0..ch).map(|_| rng.gen_range(0.3..4.0)).collect();
    let model = EntropyModel::laplacian(&scales, 8, 1e-4)?;
    let n = rng.gen_range(ch..=48);
    // integers are kinks of the interpolated likelihood
    let values: Vec<f64> = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-6.0..6.0);
            let frac = v - v.floor();
            if frac > KINK_MARGIN && frac < 1.0 - KINK_MARGIN {
                break v;
            }
        })
        .collect();
    let (_, g) = rate_and_grad(&model, &values);
    let f = central_differences(&values, |v| rate_and_grad(&model, v).0);
    Ok(GradReport::single("rate", seed, vec![("symbols".into(), max_error(&g, &f))]))
}

// ---------------------------------------------------------------- chain

/// `awi(m, conv(x))` on five voxels, differenced through both operators.
pub fn grad_chain(seed: u64) -> Result<GradReport> {
    let mut rng = rng_for(seed, 5);
    let spec = ConvSpec::new(2, 2, 3);
    let coords = distinct_coords(&mut rng, 5, 3);
    let x = SparseTensor::new(0, coords.clone(), 2, uniform_vec(&mut rng, 10, 1.0))?;
    let weight = uniform_vec(&mut rng, spec.volume() * 4, 1.0);
    let bias = uniform_vec(&mut rng, 2, 1.0);
    let map = build_kernel_map(&coords, &coords, &spec)?;
    let conv = |f: &[f64], w: &[f64]| -> SparseTensor<f64> {
        let xt = SparseTensor::new(0, coords.clone(), 2, f.to_vec()).expect("valid input");
        sparse_conv_mapped(&xt, &spec, w, &bias, &map, &coords).expect("valid layer")
    };
    let y = conv(x.feats(), &weight);
    let branch = if rng.gen() { AwiBranch::Idwa } else { AwiBranch::Shrink };
    let queries = distinct_coords(&mut rng, 2, 3);
    let awi = AwiInstance::from_parts(y, &queries, &mut rng, branch, DEFAULT_ALPHA)?;
    let (_, gy) = awi.gradients()?;
    let g = sparse_conv_backward(&x, &spec, &weight, &map, &gy)?;
    let loss = |f: &[f64], w: &[f64]| awi.loss_with(awi.m.feats(), conv(f, w).feats());
    let fx = central_differences(x.feats(), |f| loss(f, &weight));
    let fw = central_differences(&weight, |w| loss(x.feats(), w));
    Ok(GradReport::single(
        "awi_conv_chain",
        seed,
        vec![("input".into(), max_error(&g.input, &fx)), ("weight".into(), max_error(&g.weight, &fw))],
    ))
}

// ---------------------------------------------------------------- harness

fn run_seeds(op: &str, seeds: &[u64], f: impl Fn(u64) -> Result<GradReport> + Sync) -> Result<GradReport> {
    let reports = seeds.par_iter().map(|&s| f(s)).collect::<Result<Vec<_>>>()?;
    Ok(GradReport::merge(op, reports))
}

/// Every operator over `instances` seeds starting at `base_seed`.
pub fn run_all(instances: usize, base_seed: u64) -> Result<Vec<GradReport>> {
    let seeds: Vec<u64> = (0..instances as u64).map(|i| base_seed + i).collect();
    Ok(vec![
        run_seeds("sparse_conv", &seeds, |s| grad_sparse_conv(&ConvInstance::seeded(s)?, s))?,
        run_seeds(AwiBranch::Idwa.name(), &seeds, |s| {
            grad_awi(&AwiInstance::seeded(s, AwiBranch::Idwa)?, AwiBranch::Idwa.name(), s)
        })?,
        run_seeds(AwiBranch::Shrink.name(), &seeds, |s| {
            grad_awi(&AwiInstance::seeded(s, AwiBranch::Shrink)?, AwiBranch::Shrink.name(), s)
        })?,
        run_seeds("bce", &seeds, |s| Ok(grad_bce(s)))?,
        run_seeds("rate", &seeds, grad_rate)?,
        run_seeds("awi_conv_chain", &seeds, grad_chain)?,
    ])
}

/// Plain-text table of reports.
pub fn format_table(reports: &[GradReport]) -> String {
    let mut s = format!("{:<16} {:>9} {:>12}  {:<6} blocks\n", "op", "instances", "max_rel_err", "status");
    for r in reports {
        let blocks: Vec<String> = r.blocks.iter().map(|(n, e)| format!("{n}={e:.2e}")).collect();
        s.push_str(&format!(
            "{:<16} {:>9} {:>12.3e}  {:<6} {}\n",
            r.op,
            r.instances,
            r.max_rel_err,
            if r.pass() { "ok" } else { "FAIL" },
            blocks.join(" ")
        ));
        if !r.failing_seeds.is_empty() {
            s.push_str(&format!("  failing seeds: {:?}\n", r.failing_seeds));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn kernel_one_identity_passes_gradient_through() {
        let x = SparseTensor::new(0, vec![VoxelCoord::new(0, 0, 0), VoxelCoord::new(1, 2, 3)], 2, vec![0.5, -1.0, 2.0, 0.25])
            .unwrap();
        let inst = ConvInstance::new(ConvSpec::new(2, 2, 1), x, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2], 9).unwrap();
        let g = sparse_conv_backward(&inst.x, &inst.spec, &inst.weight, &inst.map, &inst.grad_out).unwrap();
        assert_eq!(g.input, inst.grad_out);
        assert!(grad_sparse_conv(&inst, 9).unwrap().pass());
    }

    #[test]
    fn zero_input_has_zero_weight_gradient() {
        let x = SparseTensor::<f64>::zeros(0, vec![VoxelCoord::new(1, 1, 1), VoxelCoord::new(2, 1, 1)], 2).unwrap();
        let spec = ConvSpec::new(2, 3, 3);
        let inst = ConvInstance::new(spec, x, vec![0.3; spec.volume() * 6], vec![0.0; 3], 4).unwrap();
        let g = sparse_conv_backward(&inst.x, &inst.spec, &inst.weight, &inst.map, &inst.grad_out).unwrap();
        assert!(g.weight.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_conv_instances_pass() {
        for s in 0..10 {
            let r = grad_sparse_conv(&ConvInstance::seeded(s).unwrap(), s).unwrap();
            assert!(r.pass(), "{r:?}");
        }
    }

    fn three_point_instance(q: [f64; 3], feats: Vec<f64>) -> AwiInstance {
        let y = SparseTensor::new(
            0,
            vec![VoxelCoord::new(0, 0, 0), VoxelCoord::new(0, 0, 2), VoxelCoord::new(0, 2, 0)],
            1,
            feats,
        )
        .unwrap();
        let m = SparseTensor::new(0, vec![VoxelCoord::new(0, 0, 0)], 3, q.to_vec()).unwrap();
        let neighbors = knn_brute_force(&translated_positions(&m), y.coords(), 3).unwrap();
        AwiInstance {
            m,
            y_prev: y,
            neighbors,
            alpha: DEFAULT_ALPHA,
            grad_out: vec![1.0],
        }
    }

    #[test]
    fn idwa_feature_gradient_is_normalized_weights() {
        // d^2 = 0.25, 2.25, 4.25
        let inst = three_point_instance([0.0, 0.0, 0.5], vec![1.0, 2.0, 3.0]);
        let (_, gf) = inst.gradients().unwrap();
        let inv = [4.0, 1.0 / 2.25, 1.0 / 4.25];
        let s: f64 = inv.iter().sum();
        let order: Vec<usize> = inst.neighbors[0].iter().map(|v| v.index).collect();
        for (k, &i) in order.iter().enumerate() {
            assert!((gf[i] - inv[k] / s).abs() < 1e-12);
        }
        assert!((gf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(grad_awi(&inst, "awi_idwa", 0).unwrap().pass());
    }

    #[test]
    fn constant_features_give_zero_motion_gradient_in_idwa() {
        let inst = three_point_instance([0.1, 0.2, 0.4], vec![1.5; 3]);
        let (gm, _) = inst.gradients().unwrap();
        assert!(gm.iter().all(|v| v.abs() < 1e-12), "{gm:?}");
    }

    #[test]
    fn shrink_feature_gradient_scales_by_inverse_alpha() {
        // d^2 = 1, 1, 5: sum 2.2 < 3
        let inst = three_point_instance([0.0, 0.0, 1.0], vec![0.5, -1.0, 2.0]);
        let (_, gf) = inst.gradients().unwrap();
        let mut got = gf.clone();
        got.sort_by(f64::total_cmp);
        let want = [0.2 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(grad_awi(&inst, "awi_shrink", 0).unwrap().pass());
    }

    #[test]
    fn seeded_awi_instances_pass_in_both_branches() {
        for s in 0..10 {
            for b in [AwiBranch::Idwa, AwiBranch::Shrink] {
                let inst = AwiInstance::seeded(s, b).unwrap();
                for q in translated_positions(&inst.m) {
                    assert_eq!(classify(q, inst.y_prev.coords(), inst.alpha), Some(b));
                }
                let r = grad_awi(&inst, b.name(), s).unwrap();
                assert!(r.pass(), "{r:?}");
            }
        }
    }

    #[test]
    fn bce_gradient_vanishes_at_matching_probabilities() {
        // saturated logits put p on the label
        let g = bce_grad(&[40.0, -40.0], &[true, false]);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        assert!(grad_bce(3).pass());
    }

    #[test]
    fn uniform_pmf_has_flat_rate() {
        let model = EntropyModel::laplacian(&[1e9], 4, 0.0).unwrap();
        let (_, g) = rate_and_grad(&model, &[-2.3, 0.4, 1.7]);
        assert!(g.iter().all(|v| v.abs() < 1e-9), "{g:?}");
        assert!(grad_rate(5).unwrap().pass());
    }

    #[test]
    fn chain_passes() {
        for s in 0..5 {
            let r = grad_chain(s).unwrap();
            assert!(r.pass(), "{r:?}");
        }
    }

    #[test]
    fn merge_keeps_worst_and_failing_seeds() {
        let a = GradReport::single("x", 1, vec![("w".into(), 1e-6)]);
        let b = GradReport::single("x", 2, vec![("w".into(), 1e-2)]);
        let m = GradReport::merge("x", vec![a, b]);
        assert_eq!(m.instances, 2);
        assert_eq!(m.failing_seeds, vec![2]);
        assert!(!m.pass());
        assert!(format_table(&[m]).contains("failing seeds: [2]"));
    }
}
