//! End-to-end frame pipeline: feature extraction, residual coding,
//! reconstruction with adaptive pruning, intra/inter coding and the closed
//! decoding loop.

mod container;
mod loss;

pub use container::{FrameBitstream, FrameType, Lambda, StreamId, FLAG_LATENT_CARRY, LAMBDAS, MAGIC, VERSION};
pub use loss::{bce_grad, bce_with_logits, bce_with_probs, softplus, LossReport};

use crate::entropy::{add_noise, quantize, EntropyModel, RateReport};
use crate::error::{Error, Result};
use crate::motion::{MotionNet, DEFAULT_ALPHA, MOTION_STREAM};
use crate::nn::{
    adaptive_prune, ChannelPlan, Classifier, Conv, ConvSpec, DownBlock, ParamSource, SeededInit,
    UpBlock, WeightStore,
};
use crate::octree::{octree_decode, octree_encode, OctreeStream};
use crate::voxel::{child_candidates, stride_down_coords, PointCloudFrame, SparseTensor, VoxelCoord};

pub const RESIDUAL_STREAM: &str = "residual";
/// Scale of the transmitted latent.
pub const LATENT_SCALE: u32 = 2;
pub const MIN_PRECISION_BITS: u32 = 4;

/// Two stride-2 downsampling blocks: occupancy at scale 0 to the latent at
/// scale 2.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub down1: DownBlock,
    pub down2: DownBlock,
}

impl FeatureExtractor {
    pub fn load(src: &mut dyn ParamSource, plan: &ChannelPlan) -> Result<Self> {
        Ok(Self {
            down1: DownBlock::load(src, "fe.down1", 1, plan.hidden, plan.irn_blocks)?,
            down2: DownBlock::load(src, "fe.down2", plan.hidden, plan.latent, plan.irn_blocks)?,
        })
    }

    pub fn forward(&self, frame: &PointCloudFrame) -> Result<SparseTensor> {
        if frame.is_empty() {
            return Err(Error::EmptyFrame);
        }
        self.down2.forward(&self.down1.forward(&frame.points)?)
    }
}

/// Residual (or intra latent) coder between scale 2 and scale 3.
#[derive(Clone, Debug)]
pub struct ResidualCoder {
    pub enc: DownBlock,
    pub enc_out: Conv,
    pub dec: UpBlock,
}

impl ResidualCoder {
    pub fn load(src: &mut dyn ParamSource, plan: &ChannelPlan) -> Result<Self> {
        Ok(Self {
            enc: DownBlock::load(src, "residual.enc", plan.latent, plan.latent, plan.irn_blocks)?,
            enc_out: Conv::load(src, "residual.enc_out", ConvSpec::new(plan.latent, plan.residual_latent, 3))?,
            dec: UpBlock::load(src, "residual.dec", plan.residual_latent, plan.latent, plan.irn_blocks)?,
        })
    }

    /// Continuous latent at scale 3 on `stride_down(C(r))`.
    pub fn analysis(&self, r: &SparseTensor) -> Result<SparseTensor> {
        self.enc_out.forward(&self.enc.forward(r)?, None)
    }

    /// Decoded residual on `c2` from integer symbols on `c3`.
    pub fn synthesis(&self, symbols: &[i32], c3: Vec<VoxelCoord>, c2: &[VoxelCoord]) -> Result<SparseTensor> {
        let ch = self.enc_out.spec.out_channels;
        let q = SparseTensor::new(3, c3, ch, symbols.iter().map(|&s| s as f32).collect())?;
        self.dec.forward(&q, c2)
    }
}

/// One upsampling stage of the reconstruction.
#[derive(Clone, Debug)]
pub struct ReconStage {
    pub up: UpBlock,
    pub classifier: Classifier,
}

/// Scores of one reconstruction stage before pruning.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub candidates: SparseTensor,
    pub logits: Vec<f32>,
    pub kept: SparseTensor,
}

/// Two upsample/classify/prune stages from scale 2 to scale 0.
#[derive(Clone, Debug)]
pub struct Reconstructor {
    pub stages: [ReconStage; 2],
}

impl Reconstructor {
    pub fn load(src: &mut dyn ParamSource, plan: &ChannelPlan) -> Result<Self> {
        let mut stage = |k: usize, cin: usize, cout: usize| -> Result<ReconStage> {
            Ok(ReconStage {
                up: UpBlock::load(src, &format!("recon.up{}", k + 1), cin, cout, plan.irn_blocks)?,
                classifier: Classifier::load(src, &format!("recon.cls{}", k + 1), cout)?,
            })
        };
        let s0 = stage(0, plan.latent, plan.recon[0])?;
        let s1 = stage(1, plan.recon[0], plan.recon[1])?;
        Ok(Self { stages: [s0, s1] })
    }

    /// Runs both stages keeping `n1` then `n0` voxels. Voxels are ranked by
    /// logit, which orders them exactly as the probabilities do.
    pub fn forward_detailed(&self, latent: &SparseTensor, n1: usize, n0: usize) -> Result<[StageOutput; 2]> {
        let mut x = latent.clone();
        let mut outs = Vec::with_capacity(2);
        for (stage, keep) in self.stages.iter().zip([n1, n0]) {
            let target = child_candidates(x.coords());
            let candidates = stage.up.forward(&x, &target)?;
            let logits = stage.classifier.logits(&candidates)?;
            let kept = adaptive_prune(&candidates, &logits, keep)?;
            x = kept.clone();
            outs.push(StageOutput {
                candidates,
                logits,
                kept,
            });
        }
        let [a, b]: [StageOutput; 2] = outs.try_into().unwrap();
        Ok([a, b])
    }

    pub fn forward(&self, latent: &SparseTensor, n1: usize, n0: usize, precision_bits: u32) -> Result<Vec<VoxelCoord>> {
        let [_, last] = self.forward_detailed(latent, n1, n0)?;
        let coords = last.kept.coords().to_vec();
        let lim = 1i32 << precision_bits;
        // children of in-cube voxels stay in the cube
        debug_assert!(coords.iter().all(|c| c.to_array().iter().all(|&v| (0..lim).contains(&v))));
        Ok(coords)
    }
}

/// Coding options that both sides must agree on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodecOptions {
    pub alpha: f64,
    pub lambda: Lambda,
    /// Sends the scale-3 coordinates instead of deriving them.
    pub transmit_c3: bool,
    /// Uses the decoded latent as the next reference instead of
    /// re-extracting features from the decoded frame.
    pub latent_carry: bool,
    pub range_coded_coords: bool,
}

impl Default for CodecOptions {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            lambda: Lambda::default(),
            transmit_c3: false,
            latent_carry: false,
            range_coded_coords: true,
        }
    }
}

/// Everything a frame leaves behind after coding.
#[derive(Clone, Debug)]
pub struct CodedFrame {
    pub bitstream: FrameBitstream,
    /// Decoded points (scale 0), possibly empty.
    pub decoded: Vec<VoxelCoord>,
    /// Decoded latent `y'` on the scale-2 coordinates.
    pub latent: SparseTensor,
    /// Reference latent for the next frame.
    pub reference: SparseTensor,
    pub rate: RateReport,
    pub residual_symbols: Vec<i32>,
    pub motion_symbols: Vec<i32>,
}

/// The full set of networks and entropy tables.
#[derive(Clone, Debug)]
pub struct Codec {
    pub plan: ChannelPlan,
    pub fe: FeatureExtractor,
    pub residual: ResidualCoder,
    pub recon: Reconstructor,
    pub motion: MotionNet,
    pub residual_model: EntropyModel,
    pub motion_model: EntropyModel,
}

/// Decay lengths of the default Laplacian tables.
pub const RESIDUAL_TABLE_SCALE: f64 = 0.25;
pub const MOTION_TABLE_SCALE: f64 = 0.25;
pub const TABLE_RADIUS: i32 = 64;
pub const TABLE_ESCAPE: f64 = 1e-4;

/// Seeded weights plus Laplacian tables peaked at zero, recorded together
/// with the seed and the channel plan.
pub fn seeded_weights(seed: u64, plan: &ChannelPlan) -> Result<WeightStore> {
    plan.validate()?;
    let mut init = SeededInit::new(seed, 1.0);
    Codec::build(&mut init, plan)?;
    let mut store = init.into_store();
    plan.record(&mut store);
    EntropyModel::laplacian(&vec![RESIDUAL_TABLE_SCALE; plan.residual_latent], TABLE_RADIUS, TABLE_ESCAPE)?
        .store_into(&mut store, RESIDUAL_STREAM)?;
    EntropyModel::laplacian(&vec![MOTION_TABLE_SCALE; plan.latent], TABLE_RADIUS, TABLE_ESCAPE)?
        .store_into(&mut store, MOTION_STREAM)?;
    Ok(store)
}

struct Nets {
    fe: FeatureExtractor,
    residual: ResidualCoder,
    recon: Reconstructor,
    motion: MotionNet,
}

impl Codec {
    fn build(src: &mut dyn ParamSource, plan: &ChannelPlan) -> Result<Nets> {
        Ok(Nets {
            fe: FeatureExtractor::load(src, plan)?,
            residual: ResidualCoder::load(src, plan)?,
            recon: Reconstructor::load(src, plan)?,
            motion: MotionNet::load(src, plan)?,
        })
    }

    pub fn from_store(store: &WeightStore) -> Result<Self> {
        let plan = ChannelPlan::from_store(store)?;
        let mut src = store;
        let nets = Self::build(&mut src, &plan)?;
        let residual_model = EntropyModel::load_from(store, RESIDUAL_STREAM)?;
        let motion_model = EntropyModel::load_from(store, MOTION_STREAM)?;
        if residual_model.channels() != plan.residual_latent || motion_model.channels() != plan.latent {
            return Err(Error::Weights("entropy tables do not match the channel plan".into()));
        }
        Ok(Self {
            plan,
            fe: nets.fe,
            residual: nets.residual,
            recon: nets.recon,
            motion: nets.motion,
            residual_model,
            motion_model,
        })
    }

    fn check_frame(frame: &PointCloudFrame) -> Result<()> {
        if frame.is_empty() {
            return Err(Error::EmptyFrame);
        }
        if frame.precision_bits < MIN_PRECISION_BITS {
            return Err(Error::contract(format!(
                "precision {} below the minimum of {MIN_PRECISION_BITS} bits",
                frame.precision_bits
            )));
        }
        Ok(())
    }

    fn coord_streams(
        &self,
        c2: &[VoxelCoord],
        precision: u32,
        opts: &CodecOptions,
        rate: &mut RateReport,
    ) -> Result<Vec<(StreamId, Vec<u8>)>> {
        let mut out = Vec::new();
        let s = octree_encode(c2, precision - LATENT_SCALE, opts.range_coded_coords)?.to_bytes();
        rate.push(StreamId::Coords.name(), 8.0 * s.len() as f64, s.len());
        out.push((StreamId::Coords, s));
        if opts.transmit_c3 {
            let c3 = stride_down_coords(c2);
            let s = octree_encode(&c3, precision - LATENT_SCALE - 1, opts.range_coded_coords)?.to_bytes();
            rate.push(StreamId::CoarseCoords.name(), 8.0 * s.len() as f64, s.len());
            out.push((StreamId::CoarseCoords, s));
        }
        Ok(out)
    }

    /// Reference latent that follows a coded frame.
    fn next_reference(&self, latent: &SparseTensor, decoded: &[VoxelCoord], precision: u32, carry: bool) -> Result<SparseTensor> {
        if carry {
            return Ok(latent.clone());
        }
        if decoded.is_empty() {
            return SparseTensor::zeros(LATENT_SCALE, Vec::new(), self.plan.latent);
        }
        self.fe.forward(&PointCloudFrame::from_points(precision, decoded.to_vec())?)
    }

    fn finish(
        &self,
        frame: &PointCloudFrame,
        frame_type: FrameType,
        opts: &CodecOptions,
        substreams: Vec<(StreamId, Vec<u8>)>,
        latent: SparseTensor,
        rate: RateReport,
        residual_symbols: Vec<i32>,
        motion_symbols: Vec<i32>,
    ) -> Result<CodedFrame> {
        let n0 = frame.len();
        let n1 = stride_down_coords(frame.coords()).len();
        let decoded = self.recon.forward(&latent, n1, n0, frame.precision_bits)?;
        let reference = self.next_reference(&latent, &decoded, frame.precision_bits, opts.latent_carry)?;
        Ok(CodedFrame {
            bitstream: FrameBitstream {
                frame_type,
                precision_bits: frame.precision_bits,
                lambda: opts.lambda,
                flags: if opts.latent_carry { FLAG_LATENT_CARRY } else { 0 },
                n0: n0 as u32,
                n1: n1 as u32,
                substreams,
            },
            decoded,
            latent,
            reference,
            rate,
            residual_symbols,
            motion_symbols,
        })
    }

    /// Codes `r` (a residual or, for I frames, the latent itself).
    fn code_residual(&self, r: &SparseTensor, rate: &mut RateReport) -> Result<(Vec<u8>, Vec<i32>, SparseTensor)> {
        let l = self.residual.analysis(r)?;
        let symbols = quantize(l.feats());
        let bytes = self.residual_model.encode(&symbols)?;
        rate.push(StreamId::Residual.name(), self.residual_model.estimate_bits(&symbols), bytes.len());
        let r_hat = self.residual.synthesis(&symbols, l.coords().to_vec(), r.coords())?;
        Ok((bytes, symbols, r_hat))
    }

    pub fn encode_intra(&self, frame: &PointCloudFrame, opts: &CodecOptions) -> Result<CodedFrame> {
        Self::check_frame(frame)?;
        let y = self.fe.forward(frame)?;
        let mut rate = RateReport::default();
        let mut streams = self.coord_streams(y.coords(), frame.precision_bits, opts, &mut rate)?;
        let (bytes, symbols, r_hat) = self.code_residual(&y, &mut rate)?;
        streams.push((StreamId::Residual, bytes));
        self.finish(frame, FrameType::Intra, opts, streams, r_hat, rate, symbols, Vec::new())
    }

    pub fn encode_inter(&self, frame: &PointCloudFrame, reference: &SparseTensor, opts: &CodecOptions) -> Result<CodedFrame> {
        Self::check_frame(frame)?;
        if reference.is_empty() {
            return Err(Error::EmptyReference);
        }
        let y = self.fe.forward(frame)?;
        let mut rate = RateReport::default();
        let mut streams = self.coord_streams(y.coords(), frame.precision_bits, opts, &mut rate)?;
        let pred = self.motion.predict(&y, reference, &self.motion_model, opts.alpha)?;
        rate.push(StreamId::Motion.name(), pred.estimated_bits, pred.motion_bytes.len());
        streams.push((StreamId::Motion, pred.motion_bytes));
        let r = y.sub_aligned(&pred.predicted)?;
        let (bytes, symbols, r_hat) = self.code_residual(&r, &mut rate)?;
        streams.push((StreamId::Residual, bytes));
        let latent = pred.predicted.add_aligned(&r_hat)?;
        self.finish(frame, FrameType::Inter, opts, streams, latent, rate, symbols, pred.motion_symbols)
    }

    /// Decodes one frame. P frames need the reference left by the previous
    /// frame; the returned reference serves the next one.
    pub fn decode(&self, b: &FrameBitstream, reference: Option<&SparseTensor>, alpha: f64) -> Result<DecodedFrame> {
        if b.precision_bits < MIN_PRECISION_BITS || b.precision_bits > crate::voxel::MAX_PRECISION_BITS {
            return Err(Error::Corrupt(format!("precision {} out of range", b.precision_bits)));
        }
        let missing = |id: StreamId| Error::Corrupt(format!("missing {} substream", id.name()));
        let coords = OctreeStream::from_bytes(b.substream(StreamId::Coords).ok_or_else(|| missing(StreamId::Coords))?)?;
        if coords.depth != b.precision_bits - LATENT_SCALE {
            return Err(Error::Corrupt("coordinate octree depth disagrees with the header".into()));
        }
        let c2 = octree_decode(&coords)?;
        let c3 = stride_down_coords(&c2);
        if let Some(s) = b.substream(StreamId::CoarseCoords) {
            if octree_decode(&OctreeStream::from_bytes(s)?)? != c3 {
                return Err(Error::Corrupt("scale-3 coordinates disagree with scale 2".into()));
            }
        }
        let residual = b.substream(StreamId::Residual).ok_or_else(|| missing(StreamId::Residual))?;
        let symbols = self.residual_model.decode(residual, c3.len() * self.plan.residual_latent)?;
        let r_hat = self.residual.synthesis(&symbols, c3, &c2)?;
        let latent = match b.frame_type {
            FrameType::Intra => r_hat,
            FrameType::Inter => {
                let reference = reference.ok_or(Error::MissingReference)?;
                if reference.is_empty() {
                    return Err(Error::EmptyReference);
                }
                let motion = b.substream(StreamId::Motion).ok_or_else(|| missing(StreamId::Motion))?;
                let pred = self
                    .motion
                    .predict_from_stream(motion, &c2, reference, &self.motion_model, alpha)?;
                pred.add_aligned(&r_hat)?
            }
        };
        let decoded = self.recon.forward(&latent, b.n1 as usize, b.n0 as usize, b.precision_bits)?;
        let next = self.next_reference(&latent, &decoded, b.precision_bits, b.latent_carry())?;
        Ok(DecodedFrame {
            points: decoded,
            latent,
            reference: next,
        })
    }

    /// Rate-distortion loss of coding `frame` (intra without a reference).
    /// `noise_seed` switches the rate to the noise-relaxed estimate of the
    /// continuous latents.
    pub fn eval_loss(
        &self,
        frame: &PointCloudFrame,
        reference: Option<&SparseTensor>,
        opts: &CodecOptions,
        noise_seed: Option<u64>,
    ) -> Result<LossReport> {
        Self::check_frame(frame)?;
        let y = self.fe.forward(frame)?;
        let mut rate = RateReport::default();
        self.coord_streams(y.coords(), frame.precision_bits, opts, &mut rate)?;
        let mut bits = rate.total_bits;
        let (r, pred) = match reference {
            Some(reference) => {
                let p = self.motion.predict(&y, reference, &self.motion_model, opts.alpha)?;
                let motion_bits = match noise_seed {
                    Some(seed) => {
                        let (e_o, c) = (self.motion.flow_embed(&y, reference)?, self.plan.latent);
                        let latent = self.motion.enc.forward(&self.motion.mmf(&e_o)?, None)?;
                        relaxed_bits(&self.motion_model, latent.feats(), c, seed)
                    }
                    None => p.estimated_bits,
                };
                bits += motion_bits;
                (y.sub_aligned(&p.predicted)?, Some(p.predicted))
            }
            None => (y.clone(), None),
        };
        let l = self.residual.analysis(&r)?;
        let symbols = quantize(l.feats());
        bits += match noise_seed {
            Some(seed) => relaxed_bits(&self.residual_model, l.feats(), self.plan.residual_latent, seed ^ 0x5eed),
            None => self.residual_model.estimate_bits(&symbols),
        };
        let r_hat = self.residual.synthesis(&symbols, l.coords().to_vec(), r.coords())?;
        let latent = match pred {
            Some(p) => p.add_aligned(&r_hat)?,
            None => r_hat,
        };
        let truth1 = stride_down_coords(frame.coords());
        let stages = self.recon.forward_detailed(&latent, truth1.len(), frame.len())?;
        let truths: [&[VoxelCoord]; 2] = [&truth1, frame.coords()];
        let bce: Vec<f64> = stages
            .iter()
            .zip(truths)
            .map(|(s, truth)| {
                let occ: Vec<bool> = s.candidates.coords().iter().map(|c| truth.binary_search(c).is_ok()).collect();
                let z: Vec<f64> = s.logits.iter().map(|&v| v as f64).collect();
                bce_with_logits(&z, &occ)
            })
            .collect();
        LossReport::new(bits, frame.len(), &bce, opts.lambda.value())
    }
}

/// Noise-relaxed bits of a continuous latent: `-log2` of the interpolated
/// table likelihood at `v + U(-0.5, 0.5)`.
pub fn relaxed_bits(model: &EntropyModel, values: &[f32], channels: usize, seed: u64) -> f64 {
    let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    add_noise(&v, seed)
        .iter()
        .enumerate()
        .map(|(i, &x)| model.continuous_bits(i % channels, x).0)
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedFrame {
    pub points: Vec<VoxelCoord>,
    pub latent: SparseTensor,
    pub reference: SparseTensor,
}

/// Encoder for a sequence: frame 0 of every GOP intra, the rest inter.
pub struct SequenceEncoder<'a> {
    codec: &'a Codec,
    opts: CodecOptions,
    gop: Option<usize>,
    index: usize,
    reference: Option<SparseTensor>,
}

impl<'a> SequenceEncoder<'a> {
    /// `gop = None` codes the whole sequence as one group.
    pub fn new(codec: &'a Codec, opts: CodecOptions, gop: Option<usize>) -> Result<Self> {
        if gop == Some(0) {
            return Err(Error::contract("GOP size must be at least 1"));
        }
        Ok(Self {
            codec,
            opts,
            gop,
            index: 0,
            reference: None,
        })
    }

    pub fn encode_next(&mut self, frame: &PointCloudFrame) -> Result<CodedFrame> {
        let intra = self.gop.map_or(self.index == 0, |g| self.index % g == 0);
        let coded = match (&self.reference, intra) {
            (Some(r), false) if !r.is_empty() => self.codec.encode_inter(frame, r, &self.opts)?,
            _ => self.codec.encode_intra(frame, &self.opts)?,
        };
        self.reference = Some(coded.reference.clone());
        self.index += 1;
        Ok(coded)
    }

    pub fn reference(&self) -> Option<&SparseTensor> {
        self.reference.as_ref()
    }
}

/// Decoder counterpart of [`SequenceEncoder`].
pub struct SequenceDecoder<'a> {
    codec: &'a Codec,
    alpha: f64,
    reference: Option<SparseTensor>,
}

impl<'a> SequenceDecoder<'a> {
    pub fn new(codec: &'a Codec, alpha: f64) -> Self {
        Self {
            codec,
            alpha,
            reference: None,
        }
    }

    pub fn decode_next(&mut self, b: &FrameBitstream) -> Result<DecodedFrame> {
        let d = self.codec.decode(b, self.reference.as_ref(), self.alpha)?;
        self.reference = Some(d.reference.clone());
        Ok(d)
    }

    pub fn reference(&self) -> Option<&SparseTensor> {
        self.reference.as_ref()
    }
}
