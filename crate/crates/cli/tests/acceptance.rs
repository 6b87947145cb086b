//! One status line per acceptance criterion. Runs without the libtest
//! harness so the lines reach the console.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ddpc_core::codec::{seeded_weights, Codec, CodecOptions, SequenceDecoder, StreamId};
use ddpc_core::entropy::{ChannelPmf, EntropyModel};
use ddpc_core::gradcheck::{run_all, INSTANCES};
use ddpc_core::metrics::{bd_rate, d1_psnr, point_to_point_mse, DEFAULT_PEAK};
use ddpc_core::nn::oracle::OracleCase;
use ddpc_core::nn::ChannelPlan;
use ddpc_core::octree::{octree_decode, octree_encode, OctreeStream};
use ddpc_core::selftest::{awi_hand_cases, SINGLE_POINT_DEPTH9};
use ddpc_core::synthetic::{rigid_sequence, RigidSpec};
use ddpc_core::voxel::ply::{load_ply, load_ply_rescaled};
use ddpc_core::voxel::{stride_down_coords, PointCloudFrame, VoxelCoord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that cannot hold in this build; they still run and report FAIL.
/// The inter-gain check needs trained weights: see the README.
const EXPECTED_FAILURES: [u32; 1] = [7];

enum Status {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn timed<F: FnOnce() -> Status>(f: F) -> (Status, Duration) {
    let t = Instant::now();
    let s = f();
    (s, t.elapsed())
}

fn check(ok: bool, detail: String) -> Status {
    if ok {
        Status::Pass(detail)
    } else {
        Status::Fail(detail)
    }
}

fn conv_oracle() -> Status {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..200 {
        match OracleCase::seeded(seed, 16).and_then(|c| c.max_abs_error()) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return Status::Fail(format!("seed {seed}: {e}")),
        }
    }
    let el = t.elapsed();
    check(
        worst <= 1e-5 && el < Duration::from_secs(30),
        format!("200 instances, max abs error {worst:.2e}, {:.2}s", el.as_secs_f64()),
    )
}

fn awi_cases() -> Status {
    match awi_hand_cases(false) {
        Ok(cases) => {
            let failed: Vec<&str> = cases.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            check(failed.is_empty(), format!("{} hand cases, failed: {failed:?}", cases.len()))
        }
        Err(e) => Status::Fail(e.to_string()),
    }
}

fn gradients() -> Status {
    let t = Instant::now();
    match run_all(INSTANCES, 0) {
        Ok(reports) => {
            let el = t.elapsed();
            let summary: Vec<String> = reports.iter().map(|r| format!("{}={:.1e}", r.op, r.max_rel_err)).collect();
            let failing: Vec<String> = reports
                .iter()
                .filter(|r| !r.pass())
                .map(|r| format!("{} seeds {:?}", r.op, r.failing_seeds))
                .collect();
            check(
                failing.is_empty() && el < Duration::from_secs(120),
                format!("{INSTANCES} instances per op, {} {failing:?} {:.2}s", summary.join(" "), el.as_secs_f64()),
            )
        }
        Err(e) => Status::Fail(e.to_string()),
    }
}

fn random_model(rng: &mut ChaCha8Rng) -> EntropyModel {
    let channels = rng.gen_range(1..=4);
    let pmfs: Vec<ChannelPmf> = (0..channels)
        .map(|_| {
            let n = rng.gen_range(1..=64);
            let mut probs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(3)).collect();
            probs[rng.gen_range(0..n)] += 0.5;
            ChannelPmf {
                offset: rng.gen_range(-40..=0),
                probs,
                escape: if rng.gen_bool(0.5) { 1e-3 } else { 0.0 },
            }
        })
        .collect();
    EntropyModel::from_pmfs(&pmfs).expect("valid pmf")
}

fn entropy_coder() -> Status {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut long, mut worst_slack, mut worst_gap) = (0, f64::NEG_INFINITY, 0.0f64);
    for pair in 0..1000 {
        let model = random_model(&mut rng);
        let len = if pair % 2 == 0 { rng.gen_range(1000..=4000) } else { rng.gen_range(0..1000) };
        let symbols: Vec<i32> = (0..len)
            .map(|i| {
                let t = model.table(i % model.channels());
                // in-range symbols drawn roughly by the table's own mass
                let u = rng.gen_range(0..ddpc_core::entropy::PROB_TOTAL);
                let k = (0..t.symbols()).find(|&k| t.cdf[k + 1] > u).unwrap_or(0);
                t.offset + k as i32
            })
            .collect();
        let bytes = match model.encode(&symbols) {
            Ok(b) => b,
            Err(e) => return Status::Fail(format!("pair {pair}: {e}")),
        };
        if model.decode(&bytes, symbols.len()).ok().as_ref() != Some(&symbols) {
            return Status::Fail(format!("pair {pair} did not round-trip"));
        }
        if len >= 1000 {
            long += 1;
            let est = model.estimate_bits(&symbols);
            let gap = (bytes.len() as f64 * 8.0 - est).abs();
            worst_gap = worst_gap.max(gap);
            let slack = gap - (0.01 * est + 128.0);
            worst_slack = worst_slack.max(slack);
        }
    }
    check(
        worst_slack <= 0.0,
        format!("1000 pairs round-trip, {long} long sequences, largest |actual - estimate| {worst_gap:.1} bits"),
    )
}

fn octree() -> Status {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for set in 0..1000 {
        let depth = rng.gen_range(4..=10u32);
        let side = 1 << depth;
        let n = rng.gen_range(1..=600);
        let pts: BTreeSet<VoxelCoord> = (0..n)
            .map(|_| VoxelCoord::new(rng.gen_range(0..side), rng.gen_range(0..side), rng.gen_range(0..side)))
            .collect();
        let pts: Vec<VoxelCoord> = pts.into_iter().collect();
        let ok = octree_encode(&pts, depth, set % 2 == 0)
            .and_then(|s| OctreeStream::from_bytes(&s.to_bytes()))
            .and_then(|s| octree_decode(&s))
            .map(|d| d == pts)
            .unwrap_or(false);
        if !ok {
            return Status::Fail(format!("set {set} (depth {depth}) did not round-trip"));
        }
    }
    let fixture = octree_encode(&[VoxelCoord::new(0, 0, 0)], 9, false).map(|s| s.payload);
    check(
        fixture.as_deref().ok() == Some(&SINGLE_POINT_DEPTH9[..]),
        "1000 sets depths 4-10 round-trip; depth-9 single point matches the 9-byte fixture".into(),
    )
}

fn synthetic_pair(frames: usize) -> Vec<PointCloudFrame> {
    let spec = RigidSpec {
        points: 10_000,
        frames,
        translation: [1, 0, 0],
    };
    rigid_sequence(&spec, 7, 0).expect("synthetic sequence")
}

fn default_codec() -> Codec {
    Codec::from_store(&seeded_weights(0, &ChannelPlan::DEFAULT).expect("weights")).expect("codec")
}

fn closed_loop() -> Status {
    let t = Instant::now();
    let codec = default_codec();
    let frames = synthetic_pair(2);
    let opts = CodecOptions::default();
    let run = || -> ddpc_core::Result<(Vec<usize>, bool)> {
        let mut enc = ddpc_core::codec::SequenceEncoder::new(&codec, opts, None)?;
        let mut dec = SequenceDecoder::new(&codec, opts.alpha);
        let (mut counts, mut same) = (Vec::new(), true);
        for f in &frames {
            let coded = enc.encode_next(f)?;
            let parsed = ddpc_core::codec::FrameBitstream::from_bytes(&coded.bitstream.to_bytes()?)?;
            let d = dec.decode_next(&parsed)?;
            counts.push(d.points.len());
            same &= d.latent == coded.latent && d.reference == coded.reference && d.points == coded.decoded;
        }
        Ok((counts, same))
    };
    match run() {
        Ok((counts, same)) => {
            let el = t.elapsed();
            check(
                counts.iter().all(|&c| c == 10_000) && same && el < Duration::from_secs(60),
                format!("points per frame {counts:?}, latents bit-exact: {same}, {:.2}s", el.as_secs_f64()),
            )
        }
        Err(e) => Status::Fail(e.to_string()),
    }
}

/// Total coded bits of frame 2 as P and as I, for one reference mode.
fn inter_vs_intra(codec: &Codec, frame: &PointCloudFrame, latent_carry: bool) -> ddpc_core::Result<(usize, usize)> {
    let opts = CodecOptions {
        latent_carry,
        ..CodecOptions::default()
    };
    let first = codec.encode_intra(frame, &opts)?;
    let p = codec.encode_inter(frame, &first.reference, &opts)?;
    let i = codec.encode_intra(frame, &opts)?;
    Ok((p.bitstream.payload_bytes() * 8, i.bitstream.payload_bytes() * 8))
}

fn inter_gain() -> Status {
    let codec = default_codec();
    let frame = &synthetic_pair(1)[0];
    match (inter_vs_intra(&codec, frame, false), inter_vs_intra(&codec, frame, true)) {
        (Ok((p, i)), Ok((pc, ic))) => check(
            p < i,
            format!("identical frame as P {p} bits vs I {i} bits (latent carry: P {pc} vs I {ic})"),
        ),
        (Err(e), _) | (_, Err(e)) => Status::Fail(e.to_string()),
    }
}

fn brute_mse(a: &[VoxelCoord], b: &[VoxelCoord]) -> f64 {
    let d2 = |p: VoxelCoord, q: VoxelCoord| {
        let d = [(p.x - q.x) as f64, (p.y - q.y) as f64, (p.z - q.z) as f64];
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
    };
    a.iter().map(|&p| b.iter().map(|&q| d2(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / a.len() as f64
}

fn metrics() -> Status {
    let a = PointCloudFrame::from_points(10, vec![VoxelCoord::new(5, 5, 5)]).unwrap();
    let b = PointCloudFrame::from_points(10, vec![VoxelCoord::new(6, 5, 5)]).unwrap();
    let d1 = d1_psnr(&a, &b, DEFAULT_PEAK).map(|p| p.db).unwrap_or(f64::NAN);
    let want = 10.0 * (3.0 * 1023.0f64 * 1023.0).log10();
    let anchor = [(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 39.0), (1.6, 42.0)];
    let half: Vec<(f64, f64)> = anchor.iter().map(|&(r, q)| (r / 2.0, q)).collect();
    let bd = bd_rate(&anchor, &half).unwrap_or(f64::NAN);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let cloud = |rng: &mut ChaCha8Rng, n: usize| -> Vec<VoxelCoord> {
            let s: BTreeSet<VoxelCoord> = (0..n)
                .map(|_| VoxelCoord::new(rng.gen_range(0..128), rng.gen_range(0..128), rng.gen_range(0..128)))
                .collect();
            s.into_iter().collect()
        };
        let (na, nb) = (rng.gen_range(1..=10_000), rng.gen_range(1..=10_000));
        let (p, q) = (cloud(&mut rng, na), cloud(&mut rng, nb));
        let fast = point_to_point_mse(&p, &q).unwrap_or(f64::NAN);
        worst = worst.max((fast - brute_mse(&p, &q)).abs());
    }
    check(
        (d1 - want).abs() <= 0.01 && (bd + 50.0).abs() <= 0.1 && worst <= 1e-9,
        format!("single-offset D1 {d1:.4} dB (want {want:.4}), half-rate BD {bd:.4}%, NN oracle max diff {worst:.1e} over 50 pairs"),
    )
}

fn run_cli(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_ddpc"))
        .current_dir(dir)
        .env_remove("DDPC_WEIGHTS")
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn determinism() -> Status {
    let dir = tempfile::TempDir::new().expect("temp dir");
    let d = dir.path();
    if !run_cli(d, &["gen-weights", "--out", "w.dpcw", "--seed", "2"]) {
        return Status::Fail("gen-weights failed".into());
    }
    for run in ["a", "b"] {
        let ok = run_cli(
            d,
            &["encode", "--weights", "w.dpcw", "--synthetic", "rigid:4000,3,1/1/0", "--precision", "7", "--out", &format!("{run}/enc")],
        ) && run_cli(d, &["decode", "--weights", "w.dpcw", &format!("{run}/enc/manifest.json"), "--out", &format!("{run}/dec")])
            && run_cli(d, &["eval", "--manifest", &format!("{run}/enc/manifest.json"), &format!("{run}/dec"), "--csv", &format!("{run}/rd.csv")]);
        if !ok {
            return Status::Fail(format!("pipeline run {run} failed"));
        }
    }
    let mut files = vec!["rd.csv".to_string()];
    for i in 0..3 {
        files.push(format!("enc/frame_{i:04}.ddpc"));
        files.push(format!("dec/frame_{i:04}.ply"));
    }
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| std::fs::read(d.join("a").join(f)).ok() != std::fs::read(d.join("b").join(f)).ok())
        .collect();
    check(
        differing.is_empty(),
        format!(
            "{} bitstreams/PLYs/CSVs byte-identical across two runs on {}-{}; a second host platform was not available, cross-platform identity NOT verified; differing {differing:?}",
            files.len(),
            std::env::consts::OS,
            std::env::consts::ARCH
        ),
    )
}

fn real_frame() -> Status {
    let Ok(path) = std::env::var("DDPC_REAL_FRAME") else {
        return Status::Skip("set DDPC_REAL_FRAME to a voxelized PLY (and DDPC_REAL_FRAME_BITS if not 10-bit)".into());
    };
    let bits: u32 = std::env::var("DDPC_REAL_FRAME_BITS").ok().and_then(|v| v.parse().ok()).unwrap_or(10);
    let frame = if bits == 10 {
        load_ply(Path::new(&path), 10)
    } else {
        load_ply_rescaled(Path::new(&path), bits, 10)
    };
    let frame = match frame {
        Ok(f) => f,
        Err(e) => return Status::Fail(format!("{path}: {e}")),
    };
    let c2 = stride_down_coords(&stride_down_coords(frame.coords()));
    match octree_encode(&c2, frame.precision_bits - 2, true) {
        Ok(s) => {
            let bpp = 8.0 * s.to_bytes().len() as f64 / frame.len() as f64;
            check(bpp < 0.05, format!("{} points, {} scale-2 voxels, {} substream {bpp:.4} bpp", frame.len(), c2.len(), StreamId::Coords.name()))
        }
        Err(e) => Status::Fail(e.to_string()),
    }
}

fn main() {
    // `cargo test -- --list` and filters: only run on a plain invocation
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let criteria: [(u32, &str, fn() -> Status); 10] = [
        (1, "sparse-conv dense oracle", conv_oracle),
        (2, "interpolation hand cases", awi_cases),
        (3, "gradient verification", gradients),
        (4, "entropy coder", entropy_coder),
        (5, "octree codec", octree),
        (6, "closed-loop codec", closed_loop),
        (7, "inter gain sanity", inter_gain),
        (8, "metrics", metrics),
        (9, "determinism", determinism),
        (10, "real-frame coordinate rate", real_frame),
    ];
    let mut unexpected = Vec::new();
    let (mut passed, mut failed, mut skipped) = (0, 0, 0);
    for (id, name, f) in criteria {
        let (status, el) = timed(f);
        let (word, detail) = match status {
            Status::Pass(d) => {
                passed += 1;
                ("PASS", d)
            }
            Status::Fail(d) => {
                failed += 1;
                if !EXPECTED_FAILURES.contains(&id) {
                    unexpected.push(id);
                }
                ("FAIL", d)
            }
            Status::Skip(d) => {
                skipped += 1;
                ("SKIP", d)
            }
        };
        println!("criterion {id:>2} {word} {name}: {detail} [{:.1}s]", el.as_secs_f64());
    }
    println!("acceptance: {passed} passed, {failed} failed, {skipped} skipped; expected failures {EXPECTED_FAILURES:?}");
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
