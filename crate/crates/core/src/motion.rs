//! Inter prediction: flow embedding, multi-scale motion fusion, motion
//! latent coding, multi-scale motion reconstruction and adaptively weighted
//! interpolation (AWI) of the previous latent.
//!
//! Coordinates of the fused embedding (scale 3) and the motion latent
//! (scale 4) are halvings of `C(prev) ∪ C²`, which both sides know, so the
//! motion substream carries symbols only.

use rayon::prelude::*;

use crate::entropy::{quantize, EntropyModel};
use crate::error::{Error, Result};
use crate::nn::{relu_in_place, run_rn_stack, ChannelPlan, Conv, ConvSpec, ParamSource, RnBlock};
use crate::voxel::{concatenate, stride_down_coords, union_coords, Neighbor, Real, SparseTensor, SpatialGrid, VoxelCoord};

pub const DEFAULT_ALPHA: f64 = 3.0;
/// Lower clamp on squared distances.
pub const DIST_EPS: f64 = 1e-8;
pub const AWI_NEIGHBORS: usize = 3;
pub const MOTION_STREAM: &str = "motion";

/// Interpolation weights of one query from its neighbours' squared
/// distances: `d^-1 / max(sum d^-1, alpha)`.
pub fn awi_weights(dist2: &[f64], alpha: f64) -> Vec<f64> {
    let inv: Vec<f64> = dist2.iter().map(|d| 1.0 / d.max(DIST_EPS)).collect();
    let den = inv.iter().sum::<f64>().max(alpha);
    inv.iter().map(|v| v / den).collect()
}

fn check_awi_inputs<T: Real>(m: &SparseTensor<T>, y_prev: &SparseTensor<T>, alpha: f64) -> Result<()> {
    if y_prev.is_empty() {
        return Err(Error::EmptyReference);
    }
    if m.channels() != 3 {
        return Err(Error::contract(format!("motion field has {} channels, expected 3", m.channels())));
    }
    if !(alpha > 0.0) {
        return Err(Error::contract(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// Translated positions `u + m(u)`.
pub fn translated_positions<T: Real>(m: &SparseTensor<T>) -> Vec<[f64; 3]> {
    m.coords()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let r = m.row(i);
            let p = c.to_f64();
            [
                p[0] + r[0].to_f64().unwrap(),
                p[1] + r[1].to_f64().unwrap(),
                p[2] + r[2].to_f64().unwrap(),
            ]
        })
        .collect()
}

/// The three nearest previous-latent voxels of every translated position.
pub fn awi_neighbors<T: Real>(m: &SparseTensor<T>, y_prev_coords: &[VoxelCoord]) -> Result<Vec<Vec<Neighbor>>> {
    let grid = SpatialGrid::new(y_prev_coords)?;
    Ok(translated_positions(m)
        .par_iter()
        .map(|q| grid.query(*q, AWI_NEIGHBORS))
        .collect())
}

/// AWI with neighbour sets fixed in advance; distances are recomputed from
/// the current motion field.
pub fn awi_with_neighbors<T: Real>(
    m: &SparseTensor<T>,
    y_prev: &SparseTensor<T>,
    neighbors: &[Vec<Neighbor>],
    alpha: f64,
) -> Result<SparseTensor<T>> {
    check_awi_inputs(m, y_prev, alpha)?;
    if neighbors.len() != m.len() {
        return Err(Error::contract("one neighbour list per motion vector required"));
    }
    let ch = y_prev.channels();
    let pos = translated_positions(m);
    let mut feats = vec![T::zero(); m.len() * ch];
    feats
        .par_chunks_mut(ch)
        .zip(pos.par_iter().zip(neighbors.par_iter()))
        .for_each(|(out, (q, nb))| {
            let d2: Vec<f64> = nb
                .iter()
                .map(|v| {
                    let p = y_prev.coords()[v.index].to_f64();
                    (0..3).map(|a| (q[a] - p[a]).powi(2)).sum()
                })
                .collect();
            let w = awi_weights(&d2, alpha);
            let mut acc = vec![0.0f64; ch];
            for (v, wv) in nb.iter().zip(&w) {
                for (a, f) in acc.iter_mut().zip(y_prev.row(v.index)) {
                    *a += wv * f.to_f64().unwrap();
                }
            }
            for (o, a) in out.iter_mut().zip(acc) {
                *o = T::from_f64(a).unwrap();
            }
        });
    Ok(SparseTensor::from_parts(y_prev.scale(), m.coords().to_vec(), ch, feats))
}

/// Predicted latent on the motion field's coordinates.
pub fn awi_3d<T: Real>(m: &SparseTensor<T>, y_prev: &SparseTensor<T>, alpha: f64) -> Result<SparseTensor<T>> {
    check_awi_inputs(m, y_prev, alpha)?;
    let nb = awi_neighbors(m, y_prev.coords())?;
    awi_with_neighbors(m, y_prev, &nb, alpha)
}

/// Scale-3 and scale-4 coordinates of the motion path.
pub fn motion_coords(c2: &[VoxelCoord], prev: &[VoxelCoord]) -> (Vec<VoxelCoord>, Vec<VoxelCoord>) {
    let c3 = stride_down_coords(&union_coords(c2, prev));
    let c4 = stride_down_coords(&c3);
    (c3, c4)
}

/// Encoder-side result of inter prediction.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub predicted: SparseTensor,
    pub motion: SparseTensor,
    pub motion_bytes: Vec<u8>,
    pub motion_symbols: Vec<i32>,
    pub estimated_bits: f64,
}

/// All learned layers of the inter-prediction path.
#[derive(Clone, Debug)]
pub struct MotionNet {
    pub latent: usize,
    pub embed1: Conv,
    pub embed2: Conv,
    pub mmf_coarse: Conv,
    pub mmf_rn: Vec<RnBlock>,
    pub mmf_up: Conv,
    pub mmf_fine: Conv,
    pub enc: Conv,
    pub dec: Conv,
    pub mmr_rn: Vec<RnBlock>,
    pub mmr_coarse_head: Conv,
    pub mmr_up: Conv,
    pub mmr_fine_head: Conv,
    pub mmr_flow_up: Conv,
}

impl MotionNet {
    pub fn load(src: &mut dyn ParamSource, plan: &ChannelPlan) -> Result<Self> {
        let l = plan.latent;
        let rn = |src: &mut dyn ParamSource, name: &str| {
            (0..plan.rn_blocks)
                .map(|k| RnBlock::load(src, &format!("{name}.rn{k}"), l))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            latent: l,
            embed1: Conv::load(src, "motion.embed1", ConvSpec::new(2 * l, l, 3))?,
            embed2: Conv::load(src, "motion.embed2", ConvSpec::new(l, l, 3))?,
            mmf_coarse: Conv::load(src, "motion.mmf.coarse", ConvSpec::down(l, l))?,
            mmf_rn: rn(src, "motion.mmf")?,
            mmf_up: Conv::load(src, "motion.mmf.up", ConvSpec::up(l, l))?,
            mmf_fine: Conv::load(src, "motion.mmf.fine", ConvSpec::down(l, l))?,
            enc: Conv::load(src, "motion.enc", ConvSpec::down(l, l))?,
            dec: Conv::load(src, "motion.dec", ConvSpec::up(l, l))?,
            mmr_rn: rn(src, "motion.mmr")?,
            mmr_coarse_head: Conv::load(src, "motion.mmr.coarse_head", ConvSpec::new(l, 3, 1))?,
            mmr_up: Conv::load(src, "motion.mmr.up", ConvSpec::up(l, l))?,
            mmr_fine_head: Conv::load(src, "motion.mmr.fine_head", ConvSpec::new(l, 3, 1))?,
            mmr_flow_up: Conv::load(src, "motion.mmr.flow_up", ConvSpec::up(3, 3))?,
        })
    }

    fn check_latent(&self, y: &SparseTensor, what: &str) -> Result<()> {
        if y.scale() != 2 || y.channels() != self.latent {
            return Err(Error::contract(format!(
                "{what} must be a scale-2 tensor with {} channels, got scale {} with {}",
                self.latent,
                y.scale(),
                y.channels()
            )));
        }
        Ok(())
    }

    /// Original flow embedding on `C(y_t) ∪ C(y_prev)`.
    pub fn flow_embed(&self, y_t: &SparseTensor, y_prev: &SparseTensor) -> Result<SparseTensor> {
        self.check_latent(y_t, "current latent")?;
        if !y_prev.is_empty() {
            self.check_latent(y_prev, "previous latent")?;
        }
        let prev = if y_prev.is_empty() {
            SparseTensor::zeros(2, Vec::new(), self.latent)?
        } else {
            y_prev.clone()
        };
        let joined = concatenate(y_t, &prev)?;
        let mut h = self.embed1.forward(&joined, None)?;
        relu_in_place(&mut h);
        self.embed2.forward(&h, None)
    }

    /// Fused embedding at scale 3: coarse branch plus the downsampled
    /// residual of its upsampled reconstruction.
    pub fn mmf(&self, e_o: &SparseTensor) -> Result<SparseTensor> {
        let coarse = run_rn_stack(&self.mmf_rn, self.mmf_coarse.forward(e_o, None)?)?;
        let back = self.mmf_up.forward(&coarse, Some(e_o.coords()))?;
        let delta = e_o.sub_aligned(&back)?;
        let fine = self.mmf_fine.forward(&delta, None)?;
        coarse.add_aligned(&fine)
    }

    /// Quantized motion latent of `e_t` and the decoder's view of `e_t`.
    pub fn compress_motion(&self, e_t: &SparseTensor, model: &EntropyModel) -> Result<(Vec<u8>, Vec<i32>, SparseTensor)> {
        self.check_model(model)?;
        let latent = self.enc.forward(e_t, None)?;
        let symbols = quantize(latent.feats());
        let bytes = model.encode(&symbols)?;
        let e_hat = self.expand_motion(latent.coords().to_vec(), &symbols, e_t.coords())?;
        Ok((bytes, symbols, e_hat))
    }

    /// Decoder side of [`Self::compress_motion`].
    pub fn decompress_motion(&self, bytes: &[u8], model: &EntropyModel, c3: &[VoxelCoord]) -> Result<SparseTensor> {
        self.check_model(model)?;
        let c4 = stride_down_coords(c3);
        let symbols = model.decode(bytes, c4.len() * self.latent)?;
        self.expand_motion(c4, &symbols, c3)
    }

    fn check_model(&self, model: &EntropyModel) -> Result<()> {
        if model.channels() != self.latent {
            return Err(Error::Entropy(format!(
                "motion model has {} channels, latent has {}",
                model.channels(),
                self.latent
            )));
        }
        Ok(())
    }

    fn expand_motion(&self, c4: Vec<VoxelCoord>, symbols: &[i32], c3: &[VoxelCoord]) -> Result<SparseTensor> {
        let q = SparseTensor::new(4, c4, self.latent, symbols.iter().map(|&s| s as f32).collect())?;
        self.dec.forward(&q, Some(c3))
    }

    /// Motion field on `c2` from the decoded embedding.
    pub fn mmr(&self, e_hat: &SparseTensor, c2: &[VoxelCoord]) -> Result<SparseTensor> {
        let h = run_rn_stack(&self.mmr_rn, e_hat.clone())?;
        let m_coarse = self.mmr_coarse_head.forward(&h, None)?;
        let m_fine = self.mmr_fine_head.forward(&self.mmr_up.forward(e_hat, Some(c2))?, None)?;
        self.mmr_flow_up.forward(&m_coarse, Some(c2))?.add_aligned(&m_fine)
    }

    /// Full encoder-side inter prediction of `y_t` from `y_prev`.
    pub fn predict(&self, y_t: &SparseTensor, y_prev: &SparseTensor, model: &EntropyModel, alpha: f64) -> Result<Prediction> {
        if y_prev.is_empty() {
            return Err(Error::EmptyReference);
        }
        let e_o = self.flow_embed(y_t, y_prev)?;
        let e_t = self.mmf(&e_o)?;
        let (motion_bytes, motion_symbols, e_hat) = self.compress_motion(&e_t, model)?;
        let motion = self.mmr(&e_hat, y_t.coords())?;
        let predicted = awi_3d(&motion, y_prev, alpha)?;
        Ok(Prediction {
            estimated_bits: model.estimate_bits(&motion_symbols),
            predicted,
            motion,
            motion_bytes,
            motion_symbols,
        })
    }

    /// Decoder-side prediction from the motion substream.
    pub fn predict_from_stream(
        &self,
        bytes: &[u8],
        c2: &[VoxelCoord],
        y_prev: &SparseTensor,
        model: &EntropyModel,
        alpha: f64,
    ) -> Result<SparseTensor> {
        if y_prev.is_empty() {
            return Err(Error::EmptyReference);
        }
        let (c3, _) = motion_coords(c2, y_prev.coords());
        let e_hat = self.decompress_motion(bytes, model, &c3)?;
        let motion = self.mmr(&e_hat, c2)?;
        awi_3d(&motion, y_prev, alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{SeededInit, ZeroInit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_ref(pts: &[[i32; 3]], vals: &[f64]) -> SparseTensor<f64> {
        let mut rows: Vec<(VoxelCoord, f64)> = pts.iter().map(|&p| p.into()).zip(vals.iter().copied()).collect();
        rows.sort_by_key(|r| r.0);
        SparseTensor::new(2, rows.iter().map(|r| r.0).collect(), 1, rows.iter().map(|r| r.1).collect()).unwrap()
    }

    fn motion_at(u: [i32; 3], d: [f64; 3]) -> SparseTensor<f64> {
        SparseTensor::new(2, vec![u.into()], 3, d.to_vec()).unwrap()
    }

    #[test]
    fn weight_sum_at_alpha_is_idwa() {
        // three neighbours at squared distance 1 around the origin
        let y = scalar_ref(&[[1, 0, 0], [0, 1, 0], [0, 0, 1]], &[1.0, 2.0, 3.0]);
        let out = awi_3d(&motion_at([0, 0, 0], [0.0; 3]), &y, 3.0).unwrap();
        assert!((out.feats()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn shrinkage_below_alpha() {
        let y = scalar_ref(&[[1, 1, 0], [0, 1, 1], [1, 0, 1]], &[1.0, 2.0, 3.0]);
        let out = awi_3d(&motion_at([0, 0, 0], [0.0; 3]), &y, 3.0).unwrap();
        assert!((out.feats()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn coincident_point_takes_its_feature() {
        let y = scalar_ref(&[[0, 0, 0], [1, 0, 0], [0, 1, 0]], &[7.0, 100.0, -50.0]);
        let out = awi_3d(&motion_at([0, 0, 0], [0.0; 3]), &y, 3.0).unwrap();
        assert!((out.feats()[0] - 7.0).abs() < 1e-5, "{}", out.feats()[0]);
        // the displacement moves the query onto another voxel
        let out = awi_3d(&motion_at([0, 0, 0], [1.0, 0.0, 0.0]), &y, 3.0).unwrap();
        assert!((out.feats()[0] - 100.0).abs() < 1e-5);
    }

    #[test]
    fn far_neighbours_vanish() {
        let y = scalar_ref(&[[0, 0, 0], [1, 0, 0], [0, 1, 0]], &[1.0, 1.0, 1.0]);
        let out = awi_3d(&motion_at([0, 0, 0], [1e6, 0.0, 0.0]), &y, 3.0).unwrap();
        assert!(out.feats()[0].abs() < 1e-11);
    }

    #[test]
    fn awi_errors() {
        let empty = SparseTensor::<f64>::zeros(2, vec![], 1).unwrap();
        assert!(matches!(awi_3d(&motion_at([0, 0, 0], [0.0; 3]), &empty, 3.0), Err(Error::EmptyReference)));
        let y = scalar_ref(&[[0, 0, 0]], &[1.0]);
        assert!(awi_3d(&motion_at([0, 0, 0], [0.0; 3]), &y, 0.0).is_err());
    }

    #[test]
    fn output_norm_is_bounded_by_neighbours() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<[i32; 3]> = (0..60).map(|_| [rng.gen_range(0..8), rng.gen_range(0..8), rng.gen_range(0..8)]).collect();
        let mut uniq = pts.clone();
        uniq.sort_unstable();
        uniq.dedup();
        let vals: Vec<f64> = (0..uniq.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y = scalar_ref(&uniq, &vals);
        for _ in 0..200 {
            let d = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let m = motion_at([rng.gen_range(0..8), rng.gen_range(0..8), rng.gen_range(0..8)], d);
            let nb = awi_neighbors(&m, y.coords()).unwrap();
            let bound = nb[0].iter().map(|v| y.row(v.index)[0].abs()).fold(0.0, f64::max);
            let out = awi_with_neighbors(&m, &y, &nb, 3.0).unwrap();
            assert!(out.feats()[0].abs() <= bound + 1e-12);
            let s: f64 = awi_weights(&nb[0].iter().map(|v| v.dist2).collect::<Vec<_>>(), 3.0).iter().sum();
            assert!(s <= 1.0 + 1e-12);
        }
    }

    fn latent(coords: &[[i32; 3]], ch: usize, seed: u64) -> SparseTensor {
        let mut c: Vec<VoxelCoord> = coords.iter().map(|&p| p.into()).collect();
        c.sort_unstable();
        c.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = (0..c.len() * ch).map(|_| rng.gen_range(-4.0f32..4.0)).collect();
        SparseTensor::new(2, c, ch, f).unwrap()
    }

    #[test]
    fn zero_network_cases() {
        let plan = ChannelPlan::TINY;
        let net = MotionNet::load(&mut ZeroInit, &plan).unwrap();
        let y = latent(&[[0, 0, 0], [3, 1, 2], [5, 5, 5]], plan.latent, 1);
        let e_o = net.flow_embed(&y, &SparseTensor::zeros(2, vec![], plan.latent).unwrap()).unwrap();
        assert_eq!(e_o.coords(), y.coords());
        let e_t = net.mmf(&e_o).unwrap();
        assert!(e_t.feats().iter().all(|&v| v == 0.0));
        assert_eq!(e_t.coords(), stride_down_coords(y.coords()).as_slice());
        let m = net.mmr(&e_t, y.coords()).unwrap();
        assert_eq!(m.coords(), y.coords());
        assert!(m.feats().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_frames_with_zero_network() {
        let plan = ChannelPlan::TINY;
        let net = MotionNet::load(&mut ZeroInit, &plan).unwrap();
        let model = EntropyModel::laplacian(&vec![0.5; plan.latent], 8, 1e-3).unwrap();
        let y = latent(&[[0, 0, 0], [1, 0, 0], [4, 4, 4], [4, 5, 4]], plan.latent, 2);
        let p = net.predict(&y, &y, &model, 3.0).unwrap();
        assert!(p.motion_symbols.iter().all(|&s| s == 0));
        assert_eq!(p.predicted.coords(), y.coords());
        // zero motion: each voxel sits on itself, so the prediction is the
        // reference up to the clamp
        for (a, b) in p.predicted.feats().iter().zip(y.feats()) {
            assert!((a - b).abs() < 1e-5);
        }
        let dec = net.predict_from_stream(&p.motion_bytes, y.coords(), &y, &model, 3.0).unwrap();
        assert_eq!(dec, p.predicted);
    }

    #[test]
    fn seeded_round_trip_and_rate() {
        let plan = ChannelPlan::TINY;
        // sparse inputs see few taps, so a larger gain keeps the latent away from zero
        let net = MotionNet::load(&mut SeededInit::new(7, 4.0), &plan).unwrap();
        let model = EntropyModel::laplacian(&vec![1.0; plan.latent], 16, 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<[i32; 3]> = (0..120).map(|_| [rng.gen_range(0..16), rng.gen_range(0..16), rng.gen_range(0..16)]).collect();
        let y_t = latent(&pts, plan.latent, 3);
        let prev_pts: Vec<[i32; 3]> = pts.iter().map(|p| [p[0] + 1, p[1], p[2]]).collect();
        let y_prev = latent(&prev_pts, plan.latent, 4);
        let p = net.predict(&y_t, &y_prev, &model, 3.0).unwrap();
        assert_eq!(p.predicted.coords(), y_t.coords());
        assert!(p.motion_symbols.iter().any(|&s| s != 0));
        let (c3, c4) = motion_coords(y_t.coords(), y_prev.coords());
        assert_eq!(p.motion_symbols.len(), c4.len() * plan.latent);
        let e_hat = net.decompress_motion(&p.motion_bytes, &model, &c3).unwrap();
        assert_eq!(model.decode(&p.motion_bytes, p.motion_symbols.len()).unwrap(), p.motion_symbols);
        assert_eq!(net.mmr(&e_hat, y_t.coords()).unwrap(), p.motion);
        let dec = net.predict_from_stream(&p.motion_bytes, y_t.coords(), &y_prev, &model, 3.0).unwrap();
        assert_eq!(dec, p.predicted);
        let actual = p.motion_bytes.len() as f64;
        let est = p.estimated_bits / 8.0;
        assert!((actual - est).abs() <= 0.01 * est + 2.0, "{actual} vs {est}");
    }
}
