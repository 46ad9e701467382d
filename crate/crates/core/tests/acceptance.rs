//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails. `ACCEPTANCE_ONLY=C3,C8` restricts the
//! run to the listed criteria.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use common::{fd_grad_5pt, random_tensor, rel_err, small_inr_config, toy_inr_config};
use inrcodec::codec::Codec;
use inrcodec::coder::*;
use inrcodec::compressor::*;
use inrcodec::data::*;
use inrcodec::inr::{gating_sparsity, InrConfig, InrParams};
use inrcodec::meta::*;
use inrcodec::metrics::*;
use inrcodec::nn::{seeded_rng, Parameters};
use inrcodec::optim::AdamConfig;
use inrcodec::{Error, Tape, Tensor};
use rand::Rng;

type Outcome = Result<String, String>;

fn main() {
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_uppercase()).collect());
    let mut shared = Shared::default();
    let criteria: [(&str, &str, fn(&mut Shared) -> Outcome); 10] = [
        ("C1", "gradient correctness", c1_gradients),
        ("C2", "codec losslessness", c2_lossless),
        ("C3", "rate tightness", c3_rate_tightness),
        ("C4", "entropy model validity", c4_entropy_validity),
        ("C5", "toy meta-learning trend", c5_meta_trend),
        ("C6", "learned vs uniform quantisation", c6_learned_vs_uniform),
        ("C7", "gating properties", c7_gating),
        ("C8", "layer norm stabilisation", c8_layer_norm),
        ("C9", "metric units", c9_metrics),
        ("C10", "determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(|| run(&mut shared))) {
            Ok(o) => o,
            Err(p) => Err(format!(
                "panicked: {}",
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            )),
        };
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id} {name}: PASS ({detail}; {secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("{id} {name}: FAIL ({detail}; {secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn out_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Shared toy fixture

const TOY_TRAIN: usize = 2000;
const TOY_TEST: usize = 200;
const TOY_SIZE: usize = 16;
const TOY_META_STEPS: usize = 400;
const TOY_META_LR: f64 = 1e-3;
const INNER_STEPS: usize = 3;
const LAMBDAS: [f64; 3] = [100.0, 1000.0, 10000.0];
const RD_SEEDS: [u64; 3] = [0, 1, 2];

struct Fixture {
    model: MetaModel,
    train: PatchSet,
    test: PatchSet,
    train_latents: Vec<Tensor>,
    test_latents: Vec<Tensor>,
    stats: LatentStats,
    meta_secs: f64,
}

struct RdRun {
    lambda: f64,
    seed: u64,
    compressor: Compressor,
    bits_per_item: f64,
    psnr: f64,
    distortion: f64,
}

#[derive(Default)]
struct Shared {
    fixture: Option<Result<Fixture, String>>,
    rd: Option<Result<Vec<RdRun>, String>>,
}

impl Shared {
    fn fixture(&mut self) -> Result<&Fixture, String> {
        self.fixture
            .get_or_insert_with(build_fixture)
            .as_ref()
            .map_err(|e| format!("fixture: {e}"))
    }

    fn rd_runs(&mut self) -> Result<&[RdRun], String> {
        if self.rd.is_none() {
            let runs = match self.fixture() {
                Ok(f) => train_rd_runs(f),
                Err(e) => Err(e),
            };
            self.rd = Some(runs);
        }
        self.rd.as_ref().unwrap().as_ref().map(|v| v.as_slice()).map_err(|e| e.clone())
    }

    /// Fixture and trained compressors together.
    fn fixture_and_runs(&mut self) -> Result<(&Fixture, &[RdRun]), String> {
        self.rd_runs()?;
        let f = self.fixture.as_ref().unwrap().as_ref().map_err(|e| e.clone())?;
        let runs = self.rd.as_ref().unwrap().as_ref().map_err(|e| e.clone())?;
        Ok((f, runs))
    }
}

fn toy_sets() -> (PatchSet, PatchSet) {
    let spec = ModalitySpec::default();
    let norm = FeatureNorm::identity(3);
    let (train, _) = prepare(&synthetic_images(TOY_TRAIN, TOY_SIZE, 1), &spec, &norm).unwrap();
    let (test, _) = prepare(&synthetic_images(TOY_TEST, TOY_SIZE, 2), &spec, &norm).unwrap();
    (train, test)
}

fn build_fixture() -> Result<Fixture, String> {
    eprintln!("meta-training the toy fixture ({TOY_META_STEPS} outer steps)");
    let (train, test) = toy_sets();
    let config = MetaTrainConfig {
        inner_steps: INNER_STEPS,
        outer: AdamConfig::with_lr(TOY_META_LR),
        steps: TOY_META_STEPS,
        ..Default::default()
    };
    let t = Instant::now();
    let out = meta_train(&train, &toy_inr_config(), &config).map_err(err)?;
    let meta_secs = t.elapsed().as_secs_f64();
    let test_latents = encode_all(&out.model, &test, INNER_STEPS, 1).map_err(err)?;
    Ok(Fixture {
        model: out.model,
        train,
        test,
        train_latents: out.latents,
        stats: out.stats,
        test_latents,
        meta_secs,
    })
}

fn mean_psnr(model: &MetaModel, set: &PatchSet, phis: &[Vec<f64>]) -> Result<(f64, f64), String> {
    let n = model.latent_dim();
    let (mut p, mut d) = (0.0, 0.0);
    for (phi, target) in phis.iter().zip(&set.features) {
        let out = model.inr.render(&set.coords, &Tensor::new([1, n], phi.clone())).map_err(err)?;
        let e = mse(out.data(), target.data());
        p += psnr(e);
        d += e;
    }
    let k = phis.len() as f64;
    Ok((p / k, d / k))
}

fn train_rd_runs(f: &Fixture) -> Result<Vec<RdRun>, String> {
    let mut runs = Vec::new();
    let latents: Vec<Vec<f64>> = f.test_latents.iter().map(|t| t.data().to_vec()).collect();
    for &seed in &RD_SEEDS {
        for &lambda in &LAMBDAS {
            eprintln!("training compressor lambda {lambda} seed {seed}");
            let config = RdConfig {
                lambda,
                optimizer: AdamConfig::with_lr(3e-3),
                batch_size: 16,
                steps: 500,
                seed,
                width: 128,
                blocks: 1,
                code_dim: 64,
                ..Default::default()
            };
            let out = train_compressor(&f.model, &f.train, &f.train_latents, &f.stats, &config).map_err(err)?;
            let c = out.compressor;
            let tables = c.tables().map_err(err)?;
            let codes: Vec<i32> = latents.iter().flat_map(|p| c.encode_code(p)).collect();
            let payload = rc_encode(&codes, &tables).map_err(err)?;
            let recon: Vec<Vec<f64>> = latents.iter().map(|p| c.decode_code(&c.encode_code(p))).collect();
            let (p, d) = mean_psnr(&f.model, &f.test, &recon)?;
            runs.push(RdRun {
                lambda,
                seed,
                bits_per_item: payload.len() as f64 * 8.0 / latents.len() as f64,
                psnr: p,
                distortion: d,
                compressor: c,
            });
        }
    }
    Ok(runs)
}

// ---------------------------------------------------------------------------
// C1

fn fd_check(ad: &[Tensor], fd: &[Tensor], tol: f64, what: &str) -> Result<f64, String> {
    let e = rel_err(ad, fd);
    ensure(e < tol, || format!("{what}: rel err {e:.3e} >= {tol:e}"))?;
    Ok(e)
}

fn with_inr(params: &InrParams, ps: &[Tensor]) -> InrParams {
    let mut p = params.clone();
    for (t, v) in p.tensors_mut().into_iter().zip(ps) {
        *t = v.clone();
    }
    p
}

fn meta_tensors(m: &MetaModel) -> Vec<Tensor> {
    let mut v: Vec<Tensor> = m.inr.tensors().into_iter().cloned().collect();
    v.push(m.phi0.clone());
    v.push(m.alpha.clone());
    v
}

fn with_meta(m: &MetaModel, ps: &[Tensor]) -> MetaModel {
    let mut out = m.clone();
    let k = ps.len();
    out.inr = with_inr(&m.inr, &ps[..k - 2]);
    out.phi0 = ps[k - 2].clone();
    out.alpha = ps[k - 1].clone();
    out
}

fn with_comp(c: &Compressor, ps: &[Tensor]) -> Compressor {
    let mut out = c.clone();
    for (t, v) in out.tensors_mut().into_iter().zip(ps) {
        *t = v.clone();
    }
    out
}

fn c1_gradients(_: &mut Shared) -> Outcome {
    const H: f64 = 1e-4;
    let (mut worst_first, mut worst_meta) = (0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let cfg = small_inr_config(seed);
        let k = 1 + (seed as usize % 3);
        let train = MetaTrainConfig {
            inner_steps: k,
            phi0_init_std: 0.5,
            alpha_init: 0.05,
            seed,
            ..Default::default()
        };
        let mut model = MetaModel::init(&cfg, &train).map_err(err)?;
        let mut rng = seeded_rng(seed ^ 0xc1);
        let jitter: Vec<f64> = model.alpha.data().iter().map(|a| a * rng.random_range(0.5..1.5)).collect();
        model.alpha = Tensor::new(model.alpha.shape().to_vec(), jitter);
        let m = 5;
        let coords = random_tensor(&[m, cfg.coord_dim], 1.0, &mut rng);
        let target = random_tensor(&[m, cfg.feature_dim], 1.0, &mut rng);
        let w = random_tensor(&[m, cfg.feature_dim], 1.0, &mut rng);

        // Gated SIREN, first order in theta and phi.
        let weighted = |inr: &InrParams, phi: &Tensor| -> f64 {
            let tape = Tape::new();
            let net = inr.bind(&tape, false);
            let out = net.forward(tape.constant(coords.clone()), tape.constant(phi.clone())).unwrap();
            (out * tape.constant(w.clone())).sum().item()
        };
        let mut ps: Vec<Tensor> = model.inr.tensors().into_iter().cloned().collect();
        ps.push(model.phi0.clone());
        let ad = {
            let tape = Tape::new();
            let net = model.inr.bind(&tape, true);
            let phi = tape.var(model.phi0.clone());
            let out = net.forward(tape.constant(coords.clone()), phi).map_err(err)?;
            let loss = (out * tape.constant(w.clone())).sum();
            let mut wrt = net.vars();
            wrt.push(phi);
            tape.gradients(loss, &wrt).map_err(err)?
        };
        let fd = fd_grad_5pt(&ps, H, |p| weighted(&with_inr(&model.inr, &p[..p.len() - 1]), &p[p.len() - 1]));
        worst_first = worst_first.max(fd_check(&ad, &fd, 1e-5, &format!("seed {seed} gated SIREN"))?);

        // Rate-distortion loss, first order in the compressor parameters.
        let latents: Vec<Tensor> = (0..6).map(|_| random_tensor(&[cfg.latent_dim], 1.5, &mut rng)).collect();
        let rd_config = RdConfig {
            width: 6,
            code_dim: 3,
            seed,
            ..Default::default()
        };
        let mut comp = Compressor::init(cfg.latent_dim, LatentStats::from_latents(&latents), model.hash(), &rd_config)
            .map_err(err)?;
        for t in comp.tensors_mut() {
            if t.data().iter().all(|&x| x == 0.0) {
                *t = random_tensor(t.shape(), 0.3, &mut rng);
            }
        }
        let noise = uniform_noise(3, &mut rng);
        let lambda = 2.0;
        let (_, ad) = rd_item_gradient(&comp, &model, &coords, &target, &latents[0], &noise, lambda).map_err(err)?;
        let cps: Vec<Tensor> = comp.tensors().into_iter().cloned().collect();
        let fd = fd_grad_5pt(&cps, H, |p| {
            rd_item_loss(&with_comp(&comp, p), &model, &coords, &target, &latents[0], &noise, lambda)
                .unwrap()
                .loss
        });
        worst_first = worst_first.max(fd_check(&ad, &fd, 1e-5, &format!("seed {seed} rate-distortion"))?);

        // Through k second-order inner steps, in theta, phi0 and alpha.
        let (_, ad) = outer_gradient(&model, &coords, &target, &train).map_err(err)?;
        let fd = fd_grad_5pt(&meta_tensors(&model), H, |p| {
            let (_, losses) = adaptation_trace(&with_meta(&model, p), &coords, &target, k).unwrap();
            losses[k]
        });
        worst_meta = worst_meta.max(fd_check(&ad, &fd, 1e-4, &format!("seed {seed} meta ({k} inner steps)"))?);
    }
    Ok(format!(
        "20 configs; worst first-order rel err {worst_first:.2e}, through inner steps {worst_meta:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// C2

fn c2_lossless(_: &mut Shared) -> Outcome {
    let t = Instant::now();
    let dims = 64;
    let entropy = EntropyModel::logistic(dims, 8.0);
    let tables: Vec<PmfTable> = (0..dims)
        .map(|d| PmfTable::from_pmf(-40, 40, |v| entropy.pmf(d, v as f64)))
        .collect::<inrcodec::Result<_>>()
        .map_err(err)?;
    let mut rng = seeded_rng(0xc2);
    let extremes = [i32::MIN, i32::MAX, -1_000_000, 1_000_000, -41, 41];
    let vectors: Vec<Vec<i32>> = (0..1000)
        .map(|i| {
            let mut v: Vec<i32> = (0..dims).map(|_| rng.random_range(-100..=100)).collect();
            // At least one value beyond every table's support.
            let k = rng.random_range(0..dims);
            v[k] = extremes[i % extremes.len()];
            v
        })
        .collect();
    let outliers = vectors.iter().flatten().filter(|&&x| !(-40..=40).contains(&x)).count();
    let stream = Bitstream {
        header: BitstreamHeader {
            inr_hash: 0x0123_4567_89ab_cdef,
            quantizer_hash: 0xfedc_ba98_7654_3210,
            lambda_tag: BitstreamHeader::lambda_tag_for(0.5),
        },
        items: vectors
            .iter()
            .map(|v| {
                Ok(ItemRecord {
                    dims: vec![dims as u32],
                    payload: rc_encode(v, &tables)?,
                })
            })
            .collect::<inrcodec::Result<_>>()
            .map_err(err)?,
    };
    let bytes = stream.pack().map_err(err)?;
    let back = Bitstream::unpack_checked(&bytes, stream.header.inr_hash, stream.header.quantizer_hash).map_err(err)?;
    ensure(back == stream, || "container round trip differs".into())?;
    for (i, (rec, v)) in back.items.iter().zip(&vectors).enumerate() {
        let decoded = rc_decode(&rec.payload, &tables, dims).map_err(err)?;
        ensure(&decoded == v, || format!("vector {i} differs after decoding"))?;
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.2}s"))?;
    Ok(format!(
        "1000 vectors, {outliers} out-of-support values, {} bytes, exact",
        bytes.len()
    ))
}

// ---------------------------------------------------------------------------
// C3 and C4 use the highest-rate trained compressor of the first seed.

fn trained_compressor(shared: &mut Shared) -> Result<Compressor, String> {
    let runs = shared.rd_runs()?;
    runs.iter()
        .filter(|r| r.seed == RD_SEEDS[0])
        .max_by(|a, b| a.lambda.total_cmp(&b.lambda))
        .map(|r| r.compressor.clone())
        .ok_or_else(|| "no trained compressor".into())
}

fn sample_symbol(t: &PmfTable, rng: &mut impl Rng) -> i32 {
    let u = rng.random_range(0..TOTAL_FREQ);
    let (lo, hi) = t.support();
    let mut acc = 0;
    for (k, &f) in t.frequencies().iter().enumerate() {
        acc += f;
        if u < acc {
            let in_support = (hi - lo + 1) as usize;
            return if k < in_support {
                lo + k as i32
            } else {
                hi + 1 + rng.random_range(0..1000)
            };
        }
    }
    unreachable!("frequencies sum to the total")
}

fn c3_rate_tightness(shared: &mut Shared) -> Outcome {
    let comp = trained_compressor(shared)?;
    let tables = comp.tables().map_err(err)?;
    let mut rng = seeded_rng(0xc3);
    let n = 100_000;
    let symbols: Vec<i32> = (0..n).map(|i| sample_symbol(&tables[i % tables.len()], &mut rng)).collect();
    let payload = rc_encode(&symbols, &tables).map_err(err)?;
    ensure(rc_decode(&payload, &tables, n).map_err(err)? == symbols, || "round trip differs".into())?;
    let actual = payload.len() as f64 * 8.0;
    let estimate = estimated_bits(&symbols, &tables);
    let gap = actual - estimate;
    ensure(actual <= estimate + 64.0, || {
        format!("payload {actual} bits exceeds estimate {estimate:.1} + 64")
    })?;
    ensure(gap.abs() <= 0.01 * estimate, || {
        format!("payload {actual} bits more than 1% from estimate {estimate:.1}")
    })?;
    Ok(format!(
        "{n} symbols: payload {actual} bits, estimate {estimate:.1} bits, gap {gap:+.1}"
    ))
}

fn c4_entropy_validity(shared: &mut Shared) -> Outcome {
    let comp = trained_compressor(shared)?;
    let e = &comp.entropy;
    let (lo, hi) = (-200.0, 200.0);
    let points = 10_000;
    let mut min_mass: f64 = 1.0;
    let mut max_mass: f64 = 0.0;
    let mut min_table_mass: f64 = 1.0;
    for d in 0..e.dims {
        let mut prev = e.cdf(d, lo);
        for i in 1..points {
            let x = lo + (hi - lo) * i as f64 / (points - 1) as f64;
            let c = e.cdf(d, x);
            ensure(c >= prev, || format!("dim {d}: cdf decreases at {x}: {prev} -> {c}"))?;
            prev = c;
        }
        ensure(e.cdf(d, -1e4) < 1e-6 && e.cdf(d, 1e4) > 1.0 - 1e-6, || {
            format!("dim {d}: cdf does not reach its limits")
        })?;
        let mass: f64 = (-1000..=1000).map(|v| e.pmf(d, v as f64)).sum();
        min_mass = min_mass.min(mass);
        max_mass = max_mass.max(mass);
        let (a, b) = comp.supports[d];
        min_table_mass = min_table_mass.min((a..=b).map(|v| e.pmf(d, v as f64)).sum());
    }
    ensure(min_mass >= 1.0 - 2e-3, || format!("mass over [-1000, 1000] down to {min_mass}"))?;
    // Summation round-off only.
    ensure(max_mass <= 1.0 + 1e-12, || format!("mass {max_mass} above one"))?;
    Ok(format!(
        "{} dims monotone on {points} points; mass over [-1000, 1000] in [{min_mass:.6}, {max_mass:.6}]; table support mass >= {min_table_mass:.6}",
        e.dims
    ))
}

// ---------------------------------------------------------------------------
// C5

fn c5_meta_trend(shared: &mut Shared) -> Outcome {
    let f = shared.fixture()?;
    let mut acc = [0.0; INNER_STEPS + 1];
    let mut monotone = 0;
    for feats in &f.test.features {
        let (_, losses) = adaptation_trace(&f.model, &f.test.coords, feats, INNER_STEPS).map_err(err)?;
        for (a, l) in acc.iter_mut().zip(&losses) {
            *a += psnr(*l);
        }
        if losses.windows(2).all(|w| w[1] < w[0]) {
            monotone += 1;
        }
    }
    let n = f.test.len() as f64;
    let p: Vec<f64> = acc.iter().map(|a| a / n).collect();
    let frac = monotone as f64 / n;
    let detail = format!(
        "held-out PSNR k=0..3: {:.2} {:.2} {:.2} {:.2} dB; strictly monotone {monotone}/{}; meta-training {:.0}s",
        p[0],
        p[1],
        p[2],
        p[3],
        f.test.len(),
        f.meta_secs
    );
    ensure(p[3] - p[1] >= 1.0, || format!("3 vs 1 step gain below 1 dB: {detail}"))?;
    ensure(p[3] - p[0] >= 3.0, || format!("3 vs 0 step gain below 3 dB: {detail}"))?;
    ensure(frac >= 0.95, || format!("monotone fraction below 95%: {detail}"))?;
    ensure(f.meta_secs <= 1800.0, || format!("meta-training over 30 min: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// C6

/// Uniform-baseline PSNR at `bits` per item, linear between integer widths.
fn interpolate(curve: &[(f64, f64)], bits: f64) -> f64 {
    if bits <= curve[0].0 {
        return curve[0].1;
    }
    for w in curve.windows(2) {
        let ((r0, p0), (r1, p1)) = (w[0], w[1]);
        if bits <= r1 {
            return p0 + (p1 - p0) * (bits - r0) / (r1 - r0);
        }
    }
    curve.last().unwrap().1
}

fn c6_learned_vs_uniform(shared: &mut Shared) -> Outcome {
    let (f, runs) = shared.fixture_and_runs()?;
    let latents: Vec<Vec<f64>> = f.test_latents.iter().map(|t| t.data().to_vec()).collect();
    let mut curve = Vec::new();
    for b in 0..=8 {
        let q = UniformQuantizer::fit(&f.train_latents, b);
        let recon: Vec<Vec<f64>> = latents.iter().map(|p| q.round_trip(p)).collect();
        curve.push((q.bits_per_latent() as f64, mean_psnr(&f.model, &f.test, &recon)?.0));
    }
    let mut lines = Vec::new();
    let mut worst = f64::INFINITY;
    let mut points = Vec::new();
    for &lambda in &LAMBDAS {
        let mut signs = Vec::new();
        for r in runs.iter().filter(|r| r.lambda == lambda) {
            let gap = r.psnr - interpolate(&curve, r.bits_per_item);
            worst = worst.min(gap);
            signs.push(gap >= 0.0);
            lines.push(format!("l={lambda} s={} {:.1}b {:.2}dB gap {gap:+.2}", r.seed, r.bits_per_item, r.psnr));
            points.push(RdPoint {
                dataset: format!("toy-seed{}", r.seed),
                lambda: Some(lambda),
                rate: bpp(r.bits_per_item, TOY_SIZE * TOY_SIZE),
                unit: RateUnit::Bpp,
                psnr_db: r.psnr,
                items: f.test.len(),
            });
        }
        ensure(signs.iter().all(|&s| s == signs[0]), || {
            format!("gap direction differs across seeds at lambda {lambda}: {}", lines.join("; "))
        })?;
    }
    for (b, (bits, p)) in curve.iter().enumerate() {
        points.push(RdPoint {
            dataset: format!("toy-uniform-{b}bit"),
            lambda: None,
            rate: bpp(*bits, TOY_SIZE * TOY_SIZE),
            unit: RateUnit::Bpp,
            psnr_db: *p,
            items: f.test.len(),
        });
    }
    write_rd_csv(&out_dir().join("toy_rd.csv"), &points).map_err(|e| e.to_string())?;
    ensure(worst >= -0.2, || format!("learned below uniform by {:.2} dB: {}", -worst, lines.join("; ")))?;
    // Pareto order per seed: larger weight, no less rate, no more distortion.
    for &seed in &RD_SEEDS {
        let rs: Vec<&RdRun> = runs.iter().filter(|r| r.seed == seed).collect();
        for w in rs.windows(2) {
            ensure(w[1].bits_per_item >= w[0].bits_per_item * 0.95, || {
                format!("seed {seed}: rate falls from lambda {} to {}", w[0].lambda, w[1].lambda)
            })?;
            ensure(w[1].distortion <= w[0].distortion * 1.05, || {
                format!("seed {seed}: distortion rises from lambda {} to {}", w[0].lambda, w[1].lambda)
            })?;
        }
    }
    Ok(format!("smallest gap {worst:+.2} dB, Pareto ordered; {}", lines.join("; ")))
}

// ---------------------------------------------------------------------------
// C7

/// Plain SIREN written out with scalar loops.
fn plain_siren(config: &InrConfig, params: &InrParams, coords: &Tensor) -> Vec<f64> {
    let mut out = Vec::new();
    for p in 0..coords.rows() {
        let mut h = coords.row(p).to_vec();
        for (l, layer) in params.layers.iter().enumerate() {
            let (fan_in, fan_out) = config.layer_dims(l);
            let w = layer.weight.data();
            let b = layer.bias.data();
            let next: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let pre = (0..fan_in).map(|i| w[o * fan_in + i] * h[i]).sum::<f64>() + b[o];
                    if l + 1 < config.depth {
                        (config.omega0 * pre).sin()
                    } else {
                        pre
                    }
                })
                .collect();
            h = next;
        }
        out.extend(h);
    }
    out
}

fn c7_gating(shared: &mut Shared) -> Outcome {
    let f = shared.fixture()?;
    let config = &f.model.inr.config;
    let (mut lo, mut hi) = (1.0f64, 0.0f64);
    for phi in f.test_latents.iter().chain(std::iter::once(&f.model.phi0)) {
        let n = phi.len();
        let gates = f.model.inr.gates(&phi.clone().reshaped([1, n])).map_err(err)?;
        for m in gates.masks().into_iter().flatten() {
            for &g in m.data() {
                lo = lo.min(g);
                hi = hi.max(g);
            }
        }
    }
    ensure(lo > 0.0 && hi < 1.0, || format!("gate entries reach [{lo}, {hi}]"))?;

    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut cfg = small_inr_config(seed);
        cfg.omega0 = 30.0;
        let params = InrParams::init(&cfg, seed).map_err(err)?;
        let coords = random_tensor(&[17, cfg.coord_dim], 1.0, &mut seeded_rng(seed));
        let tape = Tape::new();
        let net = params.bind(&tape, false);
        let masks: Vec<_> = (0..cfg.depth)
            .map(|l| {
                cfg.is_gated(l).then(|| {
                    let (i, o) = cfg.layer_dims(l);
                    tape.constant(Tensor::ones([o, i]))
                })
            })
            .collect();
        let gated = net.siren_forward(tape.constant(coords.clone()), &masks).map_err(err)?;
        let oracle = plain_siren(&cfg, &params, &coords);
        for (a, b) in gated.value().data().iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("unit gates differ from the plain network by {worst:e}"))?;

    let mut csv = String::from("item,layer,gated,fraction\n");
    let mut overall = 0.0;
    for (i, phi) in f.test_latents.iter().enumerate() {
        let n = phi.len();
        let gates = f.model.inr.gates(&phi.clone().reshaped([1, n])).map_err(err)?;
        let report = gating_sparsity(&f.model.inr, &gates, 1e-3).map_err(err)?;
        for l in &report.layers {
            csv.push_str(&format!("{i},{},{},{}\n", l.layer, l.gated, l.fraction));
        }
        overall += report.overall;
    }
    let path = out_dir().join("gate_sparsity.csv");
    std::fs::write(&path, csv).map_err(|e| e.to_string())?;
    Ok(format!(
        "gates in [{lo:.4}, {hi:.4}] over {} layers; unit gates match plain network to {worst:.1e}; mean sparsity at 1e-3 {:.4} written to {}",
        config.gated_layers().count(),
        overall / f.test_latents.len() as f64,
        path.display()
    ))
}

// ---------------------------------------------------------------------------
// C8

const C8_LATENT: usize = 4096;
const C8_STEPS: usize = 60;

fn c8_layer_norm(_: &mut Shared) -> Outcome {
    let spec = ModalitySpec::default();
    let (set, _) = prepare(&synthetic_images(256, 8, 8), &spec, &FeatureNorm::identity(3)).map_err(err)?;
    let mut aborts = [0usize; 2];
    let mut notes = Vec::new();
    for (v, layer_norm) in [true, false].into_iter().enumerate() {
        for seed in 0..5u64 {
            let cfg = InrConfig {
                latent_dim: C8_LATENT,
                layer_norm,
                ..toy_inr_config()
            };
            let train = MetaTrainConfig {
                outer: AdamConfig::with_lr(TOY_META_LR),
                steps: C8_STEPS,
                batch_size: 8,
                seed,
                ..Default::default()
            };
            match meta_train(&set, &cfg, &train) {
                Ok(out) => notes.push(format!(
                    "ln={layer_norm} seed {seed}: final loss {:.3e}",
                    out.losses.last().copied().unwrap_or(f64::NAN)
                )),
                Err(e @ (Error::Diverged { .. } | Error::NumericFault { .. })) => {
                    aborts[v] += 1;
                    notes.push(format!("ln={layer_norm} seed {seed}: {e}"));
                }
                Err(e) => return Err(format!("ln={layer_norm} seed {seed}: {e}")),
            }
        }
    }
    let detail = format!(
        "dim(phi) {C8_LATENT}, 5 seeds: aborts with layer norm {}, without {}",
        aborts[0], aborts[1]
    );
    for n in &notes {
        eprintln!("{n}");
    }
    ensure(aborts[0] == 0, || format!("layer-norm runs aborted: {detail}"))?;
    ensure(aborts[1] >= aborts[0], || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// C9

fn c9_metrics(_: &mut Shared) -> Outcome {
    ensure(psnr(1.0) == 0.0, || "psnr(1) != 0".into())?;
    ensure((psnr(1e-3) - 30.0).abs() < 1e-12, || "psnr(1e-3) != 30".into())?;
    ensure(psnr(0.0) == f64::INFINITY && psnr_for_csv(0.0) == PSNR_CAP_DB, || "zero-error cap".into())?;
    ensure(bpp(256.0 * 16.0, 32 * 32) == 4.0, || "bpp example".into())?;
    ensure(kbps(48000.0, 3.0) == 16.0, || "kbps example".into())?;
    let t = [1.0, 0.0, 0.0, 1.0];
    ensure(voxel_accuracy(&t, &t, 0.5) == 1.0, || "voxel accuracy identity".into())?;
    let mut rng = seeded_rng(9);
    let pred: Vec<f64> = (0..1_000_000).map(|_| rng.random()).collect();
    let target: Vec<f64> = (0..1_000_000).map(|_| rng.random_range(0..2) as f64).collect();
    let acc = voxel_accuracy(&pred, &target, 0.5);
    ensure((acc - 0.5).abs() <= 0.002, || format!("random voxel accuracy {acc}"))?;

    // Container bits over pixels counted by hand: 2 items of 4x4.
    let stream = Bitstream {
        header: BitstreamHeader {
            inr_hash: 1,
            quantizer_hash: 2,
            lambda_tag: 0,
        },
        items: vec![
            ItemRecord {
                dims: vec![4, 4],
                payload: vec![0; 10],
            },
            ItemRecord {
                dims: vec![4, 4],
                payload: vec![0; 6],
            },
        ],
    };
    let payload_bits: usize = stream.items.iter().map(|i| i.payload.len() * 8).sum();
    ensure(bpp(payload_bits as f64, 32) == 4.0, || "payload bpp".into())?;

    // Reference overlay, verbatim.
    let oracle: [(&str, &str, &[&str], &[&str]); 5] = [
        (
            "cifar10",
            "bpp",
            &["0.29", "0.31", "1.18", "1.18", "2.95", "3.33", "4.88", "6.70", "8.69", "10.56", "12.52"],
            &["22.76", "22.86", "28.86", "28.86", "34.96", "35.95", "40.25", "43.45", "45.70", "47.56", "48.32"],
        ),
        (
            "kodak",
            "bpp",
            &["0.08", "0.14", "0.48", "1.09", "1.54", "2.17", "3.09", "3.74", "5.56"],
            &["26.86", "28.33", "32.07", "34.78", "36.59", "38.57", "41.26", "42.12", "42.24"],
        ),
        (
            "era5",
            "bpp",
            &["0.004", "0.004", "0.005", "0.00758", "0.011", "0.02119", "0.05", "0.07616"],
            &["39.172", "40.766", "45.219", "47.965", "49.612", "51.25", "52.89", "54.25"],
        ),
        (
            "librispeech",
            "kbps",
            &["7.38", "8.04", "9.06", "14.61", "18.42", "20.06", "34.99", "43.69", "79.54", "120.77"],
            &["44.10", "45.05", "45.93", "49.10", "50.68", "51.28", "55.61", "57.03", "59.33", "59.40"],
        ),
        (
            "ucf101",
            "bpp",
            &["0.09", "0.10", "0.26", "0.27", "0.42", "0.99", "1.59", "2.17", "4.00", "4.42"],
            &["29.90", "30.37", "34.51", "34.75", "36.83", "41.07", "44.58", "47.86", "55.81", "56.22"],
        ),
    ];
    let mut expected = String::from(RD_CSV_HEADER);
    expected.push('\n');
    for (name, unit, rates, psnrs) in oracle {
        for (r, p) in rates.iter().zip(psnrs) {
            expected.push_str(&format!("reference:{name},,{r},{unit},{p},\n"));
        }
    }
    let path = out_dir().join("metrics_rd.csv");
    let overlay = write_rd_csv(&path, &[]).map_err(|e| e.to_string())?;
    let written = std::fs::read_to_string(&overlay).map_err(|e| e.to_string())?;
    ensure(written == expected, || "reference overlay differs from the published lists".into())?;
    let pts = reference_points();
    ensure(pts.len() == 48, || format!("{} reference points", pts.len()))?;
    Ok(format!("unit examples hold; {} reference points verbatim in {}", pts.len(), overlay.display()))
}

// ---------------------------------------------------------------------------
// C10

fn tiny_pipeline() -> Result<(Vec<u8>, Vec<u8>, Vec<u8>), String> {
    let spec = ModalitySpec::default();
    let norm = FeatureNorm::identity(3);
    let (train, _) = prepare(&synthetic_images(48, 8, 31), &spec, &norm).map_err(err)?;
    let held = synthetic_images(4, 8, 32);
    let cfg = InrConfig {
        width: 16,
        latent_dim: 16,
        predictor_width: 16,
        ..toy_inr_config()
    };
    let meta = MetaTrainConfig {
        outer: AdamConfig::with_lr(TOY_META_LR),
        steps: 8,
        batch_size: 8,
        seed: 77,
        threads: 2,
        ..Default::default()
    };
    let out = meta_train(&train, &cfg, &meta).map_err(err)?;
    let rd = RdConfig {
        lambda: 1000.0,
        optimizer: AdamConfig::with_lr(3e-3),
        steps: 8,
        batch_size: 8,
        seed: 77,
        width: 16,
        code_dim: 16,
        threads: 2,
        ..Default::default()
    };
    let comp = train_compressor(&out.model, &train, &out.latents, &out.stats, &rd).map_err(err)?.compressor;
    let codec = Codec::new(&out.model, &comp, spec, norm, INNER_STEPS).map_err(err)?;
    let bits = codec.compress(&held, 2).map_err(err)?.pack().map_err(err)?;
    let decoded = codec.decompress(&bits, 2).map_err(err)?;
    ensure(decoded.len() == held.len() && decoded[0].shape() == held[0].shape(), || {
        "decoded items have the wrong shape".into()
    })?;
    Ok((out.model.to_bytes(), comp.to_bytes(), bits))
}

fn c10_determinism(_: &mut Shared) -> Outcome {
    let a = tiny_pipeline()?;
    let b = tiny_pipeline()?;
    ensure(a.0 == b.0, || "meta checkpoints differ".into())?;
    ensure(a.1 == b.1, || "quantizer checkpoints differ".into())?;
    ensure(a.2 == b.2, || "bitstreams differ".into())?;
    Ok(format!("two runs, identical checkpoints and {}-byte bitstreams", a.2.len()))
}
