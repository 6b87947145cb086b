use std::path::{Path, PathBuf};

use clap::Args;
use ddpc_core::codec::{seeded_weights, Codec, CodecOptions, FrameBitstream, FrameType, Lambda, SequenceDecoder, SequenceEncoder};
use ddpc_core::gradcheck::{format_table, run_all, INSTANCES};
use ddpc_core::metrics::{bd_rate_d1, bd_rate_d2, d1_psnr, d2_psnr, RdPoint};
use ddpc_core::motion::DEFAULT_ALPHA;
use ddpc_core::nn::{ChannelPlan, WeightStore};
use ddpc_core::selftest::{run_selftest, Fault};
use ddpc_core::synthetic::{rigid_sequence, RigidSpec};
use ddpc_core::voxel::ply::{load_ply, load_ply_rescaled, write_ply};
use ddpc_core::voxel::PointCloudFrame;

use crate::config::FileConfig;
use crate::failure::{read_input, write_output, CliResult, Failure, EXIT_COUNT, EXIT_FAILURE, EXIT_TOO_FEW_POINTS, EXIT_WEIGHTS};
use crate::manifest::{self, FrameEntry, Manifest};
use crate::rdcsv::{append_rows, rd_points, read_rows, CsvRow};
use crate::svg::rd_plot;
use crate::CodecArgs;

pub const DEFAULT_PRECISION: u32 = 10;

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub codec: CodecArgs,
    /// Input PLY frames in display order.
    #[arg(required_unless_present = "synthetic")]
    pub inputs: Vec<PathBuf>,
    /// Generated sequence instead of files: rigid:N,frames,translation.
    #[arg(long, conflicts_with = "inputs")]
    pub synthetic: Option<String>,
    /// Output directory for frame files and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Voxel grid precision in bits (default 10).
    #[arg(long)]
    pub precision: Option<u32>,
    /// Precision the input PLYs were captured at; they are requantized.
    #[arg(long)]
    pub source_bits: Option<u32>,
    /// Intra period; default codes the whole sequence as one group.
    #[arg(long)]
    pub gop: Option<usize>,
    /// Seed of the synthetic generator.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Send the scale-3 coordinates instead of deriving them from the reference.
    #[arg(long)]
    pub transmit_c3: bool,
    /// Use the decoded latent as the next reference instead of re-extracting it.
    #[arg(long)]
    pub latent_carry: bool,
    /// Sequence name recorded in the manifest.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub codec: CodecArgs,
    /// A manifest.json, or .ddpc frame files in decoding order.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Manifest written by `encode`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Decoded PLY frames in order, or one directory holding them.
    #[arg(required = true)]
    pub decoded: Vec<PathBuf>,
    /// CSV to append to.
    #[arg(long)]
    pub csv: PathBuf,
    /// PSNR peak; default 2^precision - 1.
    #[arg(long)]
    pub peak: Option<f64>,
}

#[derive(Args, Debug)]
pub struct RdcsvArgs {
    #[arg(long)]
    pub anchor: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Write a D1 RD plot here.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    /// Corrupt one fixture: entropy, octree, conv, awi or gradcheck.
    #[arg(long)]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = INSTANCES)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GenWeightsArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Channel plan: default or tiny.
    #[arg(long)]
    pub plan: Option<String>,
}

fn load_codec(weights: &Option<PathBuf>) -> CliResult<Codec> {
    let path = weights
        .as_ref()
        .ok_or_else(|| Failure::new(EXIT_WEIGHTS, "no weights given: pass --weights or set DDPC_WEIGHTS"))?;
    let store = WeightStore::load(path)
        .map_err(|e| Failure::new(EXIT_WEIGHTS, format!("cannot load weights {}: {e}", path.display())))?;
    Codec::from_store(&store).map_err(|e| Failure::new(EXIT_WEIGHTS, format!("weights {}: {e}", path.display())))
}

fn lambda_of(args: &CodecArgs, cfg: &FileConfig) -> CliResult<Lambda> {
    match args.lambda.or(cfg.lambda) {
        Some(v) => Lambda::new(v).map_err(|e| Failure::input(e.to_string())),
        None => Ok(Lambda::default()),
    }
}

fn alpha_of(args: &CodecArgs, cfg: &FileConfig, fallback: f64) -> CliResult<f64> {
    let a = args.alpha.or(cfg.alpha).unwrap_or(fallback);
    if !(a > 0.0 && a.is_finite()) {
        return Err(Failure::input(format!("alpha must be positive, got {a}")));
    }
    Ok(a)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::new(EXIT_FAILURE, format!("cannot create {}: {e}", dir.display())))
}

/// Canonical path text for a user-supplied input.
fn path_text(p: &Path) -> String {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string()
}

fn load_original(path: &Path, precision: u32, source_bits: Option<u32>) -> CliResult<PointCloudFrame> {
    Ok(match source_bits {
        Some(b) => load_ply_rescaled(path, b, precision)?,
        None => load_ply(path, precision)?,
    })
}

pub fn encode(a: &EncodeArgs, cfg: &FileConfig) -> CliResult<()> {
    let codec = load_codec(&a.codec.weights)?;
    let precision = a.precision.or(cfg.precision).unwrap_or(DEFAULT_PRECISION);
    let opts = CodecOptions {
        alpha: alpha_of(&a.codec, cfg, DEFAULT_ALPHA)?,
        lambda: lambda_of(&a.codec, cfg)?,
        transmit_c3: a.transmit_c3 || cfg.transmit_c3.unwrap_or(false),
        latent_carry: a.latent_carry || cfg.latent_carry.unwrap_or(false),
        ..CodecOptions::default()
    };
    let gop = a.gop.or(cfg.gop);
    create_dir(&a.out)?;
    let (frames, originals, sequence) = match &a.synthetic {
        Some(spec) => {
            let spec = RigidSpec::parse(spec).map_err(|e| Failure::input(e.to_string()))?;
            let frames = rigid_sequence(&spec, precision, a.seed.or(cfg.seed).unwrap_or(0))
                .map_err(|e| Failure::input(e.to_string()))?;
            let mut names = Vec::new();
            for (i, f) in frames.iter().enumerate() {
                let name = format!("source_{i:04}.ply");
                write_ply(&a.out.join(&name), f.coords())?;
                names.push(name);
            }
            (frames, names, a.name.clone().unwrap_or_else(|| "synthetic".into()))
        }
        None => {
            let frames = a
                .inputs
                .iter()
                .map(|p| load_original(p, precision, a.source_bits))
                .collect::<CliResult<Vec<_>>>()?;
            let stem = a.inputs[0].file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (frames, a.inputs.iter().map(|p| path_text(p)).collect(), a.name.clone().unwrap_or(stem))
        }
    };
    let mut enc = SequenceEncoder::new(&codec, opts, gop).map_err(|e| Failure::input(e.to_string()))?;
    let mut entries = Vec::with_capacity(frames.len());
    for (i, frame) in frames.iter().enumerate() {
        let coded = enc.encode_next(frame)?;
        let bytes = coded.bitstream.to_bytes()?;
        let file = format!("frame_{i:04}.ddpc");
        write_output(&a.out.join(&file), &bytes)?;
        let payload = coded.bitstream.payload_bytes();
        let entry = FrameEntry {
            index: i,
            file,
            frame_type: match coded.bitstream.frame_type {
                FrameType::Intra => "I".into(),
                FrameType::Inter => "P".into(),
            },
            original: originals[i].clone(),
            points: frame.len(),
            payload_bytes: payload,
            file_bytes: bytes.len(),
            bpp: 8.0 * payload as f64 / frame.len() as f64,
        };
        println!(
            "frame {:04} {} points={} bytes={} bpp={:.6}",
            i, entry.frame_type, entry.points, entry.payload_bytes, entry.bpp
        );
        entries.push(entry);
    }
    let total_payload_bytes: usize = entries.iter().map(|e| e.payload_bytes).sum();
    let total_points: usize = entries.iter().map(|e| e.points).sum();
    let m = Manifest {
        format: manifest::FORMAT.into(),
        version: 1,
        sequence,
        precision_bits: precision,
        source_bits: if a.synthetic.is_some() { None } else { a.source_bits },
        lambda: opts.lambda.tag(),
        alpha: opts.alpha,
        gop,
        transmit_c3: opts.transmit_c3,
        latent_carry: opts.latent_carry,
        frames: entries,
        total_payload_bytes,
        total_points,
        bpp: 8.0 * total_payload_bytes as f64 / total_points as f64,
    };
    println!("total frames={} bytes={} bpp={:.6}", m.frames.len(), total_payload_bytes, m.bpp);
    m.save(&a.out.join(manifest::FILE_NAME))
}

pub fn decode(a: &DecodeArgs, cfg: &FileConfig) -> CliResult<()> {
    let codec = load_codec(&a.codec.weights)?;
    let is_manifest = a.inputs.len() == 1 && a.inputs[0].extension().is_some_and(|e| e == "json");
    let (files, alpha) = if is_manifest {
        let m = Manifest::load(&a.inputs[0])?;
        let base = a.inputs[0].parent().unwrap_or(Path::new("."));
        let files: Vec<PathBuf> = m.frames.iter().map(|f| manifest::resolve(base, &f.file)).collect();
        (files, alpha_of(&a.codec, cfg, m.alpha)?)
    } else {
        (a.inputs.clone(), alpha_of(&a.codec, cfg, DEFAULT_ALPHA)?)
    };
    create_dir(&a.out)?;
    let mut dec = SequenceDecoder::new(&codec, alpha);
    for f in &files {
        let b = FrameBitstream::from_bytes(&read_input(f)?)
            .map_err(|e| Failure::input(format!("{}: {e}", f.display())))?;
        let d = dec.decode_next(&b).map_err(|e| {
            let mut fail = Failure::from(e);
            fail.message = format!("{}: {}", f.display(), fail.message);
            fail
        })?;
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let out = a.out.join(format!("{stem}.ply"));
        write_ply(&out, &d.points)?;
        println!("{} -> {} points={}", f.display(), out.display(), d.points.len());
    }
    Ok(())
}

fn decoded_list(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    if inputs.len() == 1 && inputs[0].is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&inputs[0])
            .map_err(|e| Failure::input(format!("cannot list {}: {e}", inputs[0].display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ply"))
            .collect();
        v.sort();
        return Ok(v);
    }
    Ok(inputs.to_vec())
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let m = Manifest::load(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let decoded = decoded_list(&a.decoded)?;
    if decoded.len() != m.frames.len() {
        return Err(Failure::new(
            EXIT_COUNT,
            format!("{} decoded frames for {} original frames", decoded.len(), m.frames.len()),
        ));
    }
    let peak = a.peak.unwrap_or(((1u64 << m.precision_bits) - 1) as f64);
    let mut rows = Vec::with_capacity(decoded.len());
    for (entry, dec_path) in m.frames.iter().zip(&decoded) {
        let original = load_original(&manifest::resolve(base, &entry.original), m.precision_bits, m.source_bits)?;
        let recon = load_ply(dec_path, m.precision_bits)?;
        let bits = FrameBitstream::from_bytes(&read_input(&manifest::resolve(base, &entry.file))?)?;
        let bpp = ddpc_core::metrics::bpp(8 * bits.payload_bytes() as u64, original.len())?;
        let d1 = d1_psnr(&original, &recon, peak)?;
        let d2 = d2_psnr(&original, &recon, peak)?;
        println!(
            "{} frame {:04}: bpp={:.6} d1={:.4} dB d2={:.4} dB",
            m.sequence, entry.index, bpp, d1.db, d2.db
        );
        rows.push(CsvRow {
            sequence: m.sequence.clone(),
            frame: entry.index,
            lambda: m.lambda,
            bpp,
            d1_db: d1.db,
            d2_db: d2.db,
        });
    }
    append_rows(&a.csv, &rows)
}

fn finite_curve(path: &Path) -> CliResult<Vec<(u8, RdPoint)>> {
    let pts: Vec<(u8, RdPoint)> = rd_points(&read_rows(path)?)
        .into_iter()
        .filter(|(_, p)| p.bpp > 0.0 && p.d1_db.is_finite() && p.d2_db.is_some_and(f64::is_finite))
        .collect();
    if pts.len() < 4 {
        return Err(Failure::new(
            EXIT_TOO_FEW_POINTS,
            format!("{} has {} usable RD points, need at least 4", path.display(), pts.len()),
        ));
    }
    Ok(pts)
}

pub fn rdcsv(a: &RdcsvArgs) -> CliResult<()> {
    let anchor = finite_curve(&a.anchor)?;
    let test = finite_curve(&a.test)?;
    let strip = |c: &[(u8, RdPoint)]| c.iter().map(|p| p.1).collect::<Vec<_>>();
    let (ra, rt) = (strip(&anchor), strip(&test));
    let metric = |r: ddpc_core::Result<f64>| r.map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()));
    let d1 = metric(bd_rate_d1(&ra, &rt))?;
    let d2 = metric(bd_rate_d2(&ra, &rt))?;
    println!("{:<8} {:>10} {:>10} {:>10}", "lambda", "bpp", "d1_db", "d2_db");
    for (label, c) in [("anchor", &anchor), ("test", &test)] {
        println!("{label}");
        for (l, p) in c.iter() {
            println!("{:<8} {:>10.6} {:>10.4} {:>10.4}", l, p.bpp, p.d1_db, p.d2_db.unwrap_or(f64::NAN));
        }
    }
    println!("BD-rate D1: {d1:.4}%");
    println!("BD-rate D2: {d2:.4}%");
    if let Some(svg) = &a.svg {
        let curve = |c: &[RdPoint]| c.iter().map(|p| (p.bpp, p.d1_db)).collect::<Vec<_>>();
        let label = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let doc = rd_plot(
            "Rate-distortion (D1)",
            "D1 PSNR (dB)",
            &[(label(&a.anchor), curve(&ra)), (label(&a.test), curve(&rt))],
        );
        write_output(svg, doc.as_bytes())?;
    }
    Ok(())
}

pub fn selftest(a: &SelftestArgs) -> CliResult<()> {
    let fault = a
        .inject_fault
        .as_deref()
        .map(Fault::parse)
        .transpose()
        .map_err(|e| Failure::input(e.to_string()))?;
    let outcomes = run_selftest(fault)?;
    for o in &outcomes {
        println!("{:<5} {:<32} {}", if o.passed { "ok" } else { "FAIL" }, o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(Failure::new(EXIT_FAILURE, format!("{failed} self-test check(s) failed")));
    }
    println!("all {} checks passed", outcomes.len());
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    if a.instances == 0 {
        return Err(Failure::input("--instances must be at least 1"));
    }
    let reports = run_all(a.instances, a.seed)?;
    print!("{}", format_table(&reports));
    if reports.iter().any(|r| !r.pass()) {
        return Err(Failure::new(EXIT_FAILURE, "gradient check failed"));
    }
    Ok(())
}

pub fn gen_weights(a: &GenWeightsArgs, cfg: &FileConfig) -> CliResult<()> {
    let name = a.plan.clone().or(cfg.plan.clone()).unwrap_or_else(|| "default".into());
    let plan = ChannelPlan::by_name(&name).ok_or_else(|| Failure::input(format!("unknown channel plan `{name}`")))?;
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let store = seeded_weights(seed, &plan)?;
    let bytes = store.to_bytes()?;
    write_output(&a.out, &bytes)?;
    println!("wrote {} ({} tensors, plan {name}, seed {seed})", a.out.display(), store.len());
    Ok(())
}
