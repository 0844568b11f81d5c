//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Criteria 6, 8 and the reported part of 9 need the desk-scale model. It
//! is trained once (about an hour on one core) and cached under the cargo
//! target directory; later runs reuse it. Set `CRDR_ACCEPTANCE_ONLY=1,3` to
//! run a subset.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crdr::checkpoint::Checkpoint;
use crdr::codec::{decompress_bytes, Bitstream, Codec, Header, HEADER_LEN};
use crdr::corpus::{load_images, write_corpus};
use crdr::disc::{DesignKind, DiscConfig, Discriminator};
use crdr::entropy::{default_bounds, range_decode, range_encode, rate_estimate, CdfTable, EntropyParams, QuantizedLatent};
use crdr::eval::{
    self, q_grid, reality_histogram, sample_crops, spearman, LevelCrop, ModelReconstructor, RealityKind, Reconstructor,
};
use crdr::graph::{Eval, Graph, Tape};
use crdr::image::ImageTensor;
use crdr::losses::{adv_d_loss, adv_d_loss_graph, adv_g_loss, adv_g_loss_graph, hrrgan_pair, AdvKind};
use crdr::model::{quantize_graph, Model, ModelConfig, QualityControl, QuantMode};
use crdr::params::Group;
use crdr::tensor::Tensor;
use crdr::train::{self, TrainConfig, Trainer};
use crdr::Error;

// Tolerances and budgets.
const ORACLE_REL_TOL: f64 = 1e-9;
const RAGAN_TOL: f64 = 1e-12;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor for relative error, so exact zeros compare by
/// absolute difference.
const FD_FLOOR: f64 = 1e-6;
const FD_PROBES: usize = 100;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
const CODER_ROUND_TRIPS: usize = 100_000;
const CODER_LONG_STREAM: usize = 4096;
const CODER_REL_SLACK: f64 = 0.01;
const CODER_ABS_SLACK_BYTES: f64 = 32.0;
const CODER_BUDGET: Duration = Duration::from_secs(300);
const FIDELITY_IMAGES: usize = 50;
const FIDELITY_MAX_SIDE: usize = 513;
const FUZZ_MUTATIONS: usize = 1000;
const BPP_MARGIN: f64 = 1.10;
const PSNR_MARGIN_DB: f64 = 0.5;
const SPEARMAN_MIN: f64 = 0.9;
const SWEEP_STEP: f64 = 0.25;

// Desk-scale setup.
const DESK_CORPUS_IMAGES: usize = 2000;
const DESK_CORPUS_SIDE: u32 = 96;
const DESK_CORPUS_SEED: u64 = 1;
const HELD_OUT_IMAGES: usize = 50;
const HELD_OUT_SIDE: u32 = 128;
const HELD_OUT_SEED: u64 = 2;
const DHIST_CROPS: usize = 400;
const DHIST_CROP: usize = 64;
const DHIST_BINS: usize = 16;
const DESK_CONFIG: &str = r#"
stage1_steps = 5000
stage2_steps = 5000
batch_size = 8
crop_size = 64
base_lr = 5e-4
final_lr = 5e-5
levels = 3
rate_weights = [3.4, 0.4, 0.05]
channels = 32
latent_channels = 96
disc_widths = [16, 32, 64, 64]
design = "independent"
adversarial = "hrrgan"
seed = 7
checkpoint_interval = 250
"#;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = std::result::Result<Outcome, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller.
    let u: f64 = rng.gen_range(1e-12..1.0);
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], sd: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| sd * normal(rng)).collect()).unwrap()
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(h, w, (0..3 * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn small_model(levels: usize, seed: u64) -> Model {
    Model::new(ModelConfig { levels, channels: 4, latent_channels: 4, beta_hidden: 8, ..ModelConfig::default() }, seed).unwrap()
}

// ---------------------------------------------------------------- oracles

mod oracle {
    /// `log(1 + e^z)`, written independently of the library.
    pub fn softplus(z: f64) -> f64 {
        z.max(0.0) + (-z.abs()).exp().ln_1p()
    }

    pub fn mean(v: &[f64]) -> f64 {
        let mut s = 0.0;
        for x in v {
            s += x;
        }
        s / v.len() as f64
    }

    fn mean_of(v: &[f64], f: impl Fn(f64) -> f64) -> f64 {
        mean(&v.iter().map(|&x| f(x)).collect::<Vec<_>>())
    }

    pub fn g_sgan(fake: &[f64]) -> f64 {
        mean_of(fake, |f| softplus(-f))
    }

    pub fn g_rgan(fake: &[f64], real: &[f64]) -> f64 {
        let gaps: Vec<f64> = fake.iter().zip(real).map(|(f, r)| f - r).collect();
        mean_of(&gaps, |d| softplus(-d))
    }

    pub fn g_ragan(fake: &[f64], real: &[f64]) -> f64 {
        let (mf, mr) = (mean(fake), mean(real));
        mean_of(fake, |f| softplus(-(f - mr))) + mean_of(real, |r| softplus(r - mf))
    }

    pub fn d_sgan(real: &[f64], fake: &[f64]) -> f64 {
        mean_of(real, |r| softplus(-r)) + mean_of(fake, softplus)
    }

    pub fn d_rgan(real: &[f64], fake: &[f64]) -> f64 {
        g_rgan(real, fake)
    }

    pub fn d_ragan(real: &[f64], fake: &[f64]) -> f64 {
        g_ragan(real, fake)
    }
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut evaluations = 0;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
    for _ in 0..1000 {
        let (b, h, w) = (rng.gen_range(1..3), rng.gen_range(1..9), rng.gen_range(1..9));
        let n = b * h * w;
        let sd = rng.gen_range(0.1..6.0);
        let fake: Vec<f64> = (0..n).map(|_| sd * normal(&mut rng)).collect();
        let real: Vec<f64> = (0..n).map(|_| sd * normal(&mut rng)).collect();
        let pairs = [
            (adv_g_loss(AdvKind::Sgan, &fake, &real), oracle::g_sgan(&fake)),
            (adv_g_loss(AdvKind::Rgan, &fake, &real), oracle::g_rgan(&fake, &real)),
            (adv_g_loss(AdvKind::Hrrgan, &fake, &real), oracle::g_rgan(&fake, &real)),
            (adv_g_loss(AdvKind::Ragan, &fake, &real), oracle::g_ragan(&fake, &real)),
            (adv_d_loss(AdvKind::Sgan, &real, &fake), oracle::d_sgan(&real, &fake)),
            (adv_d_loss(AdvKind::Rgan, &real, &fake), oracle::d_rgan(&real, &fake)),
            (adv_d_loss(AdvKind::Hrrgan, &real, &fake), oracle::d_rgan(&real, &fake)),
            (adv_d_loss(AdvKind::Ragan, &real, &fake), oracle::d_ragan(&real, &fake)),
        ];
        for (got, want) in pairs {
            worst = worst.max(rel(got.map_err(err)?, want));
            evaluations += 1;
        }
    }
    // Equal scores: the gap is zero everywhere.
    let mut ln2_exact = true;
    for _ in 0..1000 {
        let n = rng.gen_range(1..200);
        let s: Vec<f64> = (0..n).map(|_| 3.0 * normal(&mut rng)).collect();
        ln2_exact &= adv_g_loss(AdvKind::Hrrgan, &s, &s).map_err(err)? == std::f64::consts::LN_2;
    }
    let mut ragan_gap: f64 = 0.0;
    for _ in 0..1000 {
        let (f, r) = (4.0 * normal(&mut rng), 4.0 * normal(&mut rng));
        let ra = adv_g_loss(AdvKind::Ragan, &[f], &[r]).map_err(err)?;
        let rg = adv_g_loss(AdvKind::Rgan, &[f], &[r]).map_err(err)?;
        ragan_gap = ragan_gap.max((ra - 2.0 * rg).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst <= ORACLE_REL_TOL && ln2_exact && ragan_gap <= RAGAN_TOL && elapsed < ORACLE_BUDGET;
    Ok(outcome(
        pass,
        format!(
            "{evaluations} loss evaluations on 1000 score maps, max rel err {worst:.2e}; equal-score HRRGAN == ln 2: {ln2_exact}; |RaGAN - 2 RGAN| max {ragan_gap:.2e}; {:.2}s",
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------- gradient checks

#[derive(Default)]
struct ProbeStats {
    probes: usize,
    worst: f64,
}

impl ProbeStats {
    fn add(&mut self, analytic: f64, numeric: f64) {
        let r = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
        self.worst = self.worst.max(r);
        self.probes += 1;
    }
}

fn weighted_sum<G: Graph>(g: &mut G, v: &G::Var, w: &Tensor) -> G::Var {
    let c = g.constant(w.clone());
    let p = g.mul(v, &c).unwrap();
    g.sum(&p).unwrap()
}

struct ModelProbe {
    x: Tensor,
    y: Tensor,
    w_enc: Tensor,
    w_gen: Tensor,
    qc: QualityControl,
    beta: f64,
}

impl ModelProbe {
    fn loss<G: Graph>(&self, g: &mut G, model: &Model, beta: &G::Var) -> G::Var {
        let x = g.constant(self.x.clone());
        let y = g.constant(self.y.clone());
        let e = model.encode_graph(g, &x, self.qc).unwrap();
        let a = weighted_sum(g, &e, &self.w_enc);
        let o = model.generate_graph(g, &y, self.qc, beta).unwrap();
        let b = weighted_sum(g, &o, &self.w_gen);
        g.add(&a, &b).unwrap()
    }

    fn eval(&self, model: &Model, beta: f64) -> f64 {
        let mut g = Eval;
        let b = Tensor::scalar(beta);
        self.loss(&mut g, model, &b).item()
    }
}

/// Probes parameters whose names start with one of `prefixes`, plus the
/// realism input itself when `probe_beta` is set.
fn model_probes(model: &Model, probe: &ModelProbe, prefixes: &[&str], probe_beta: bool, rng: &mut impl Rng) -> ProbeStats {
    let mut tape = Tape::new(&Group::MODEL);
    let b = tape.input(Tensor::scalar(probe.beta));
    let loss = probe.loss(&mut tape, model, &b);
    let grads = tape.backward(loss).unwrap();
    let ids: Vec<_> = model
        .params()
        .iter()
        .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
        .map(|(id, p)| (id, p.value.numel()))
        .collect();
    let mut stats = ProbeStats::default();
    for i in 0..FD_PROBES {
        if probe_beta && i % 4 == 0 {
            let analytic = grads.var(b).map(|t| t.item()).unwrap_or(0.0);
            let numeric = (probe.eval(model, probe.beta + FD_STEP) - probe.eval(model, probe.beta - FD_STEP)) / (2.0 * FD_STEP);
            stats.add(analytic, numeric);
            continue;
        }
        let (id, n) = ids[rng.gen_range(0..ids.len())];
        let k = rng.gen_range(0..n);
        let analytic = grads.param(id).map(|t| t.data()[k]).unwrap_or(0.0);
        let shifted = |delta: f64| {
            let mut m = model.clone();
            m.params_mut().get_mut(id).data_mut()[k] += delta;
            probe.eval(&m, probe.beta)
        };
        stats.add(analytic, (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP));
    }
    stats
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut model = small_model(3, 5);
    // Move the banks off their symmetric init so every level differs.
    for id in model.params().ids() {
        let name = model.params().iter().find(|(i, _)| *i == id).map(|(_, p)| p.name.clone()).unwrap();
        if name.contains("scaling") {
            for v in model.params_mut().get_mut(id).data_mut() {
                *v += 0.3 * normal(&mut rng);
            }
        }
    }
    let probe = ModelProbe {
        x: Tensor::new(vec![1, 3, 64, 64], (0..3 * 64 * 64).map(|_| rng.gen::<f64>()).collect()).unwrap(),
        y: random_tensor(&mut rng, &[1, 4, 4, 4], 2.0),
        w_enc: random_tensor(&mut rng, &[1, 4, 4, 4], 1.0),
        w_gen: random_tensor(&mut rng, &[1, 3, 64, 64], 1.0),
        qc: QualityControl::new(1, 0.37, 3).unwrap(),
        beta: 2.3,
    };
    let ica = model_probes(&model, &probe, &["encoder.scaling", "generator.scaling"], false, &mut rng);
    let beta_prefixes = ["beta.", "generator.res0.gamma", "generator.res0.shift", "generator.res1.gamma", "generator.res1.shift", "generator.res2.gamma", "generator.res2.shift"];
    let beta = model_probes(&model, &probe, &beta_prefixes, true, &mut rng);

    // Straight-through rounding: the gradient at y equals dL/dz at z = round(y).
    let mut ste = ProbeStats::default();
    let y = random_tensor(&mut rng, &[1, 4, 5, 5], 3.0);
    let w = random_tensor(&mut rng, &[1, 4, 5, 5], 1.0);
    let mut tape = Tape::new(&[]);
    let yv = tape.input(y.clone());
    let q = quantize_graph(&mut tape, &yv, QuantMode::Train).map_err(err)?;
    let sq = tape.mul(&q, &q).map_err(err)?;
    let loss = weighted_sum(&mut tape, &sq, &w);
    let grads = tape.backward(loss).map_err(err)?;
    let gy = grads.var(yv).ok_or("no gradient through rounding")?.clone();
    let z = y.map(f64::round);
    let lz = |t: &Tensor| {
        let mut g = Eval;
        let s = g.mul(t, t).unwrap();
        weighted_sum(&mut g, &s, &w).item()
    };
    for _ in 0..FD_PROBES {
        let k = rng.gen_range(0..z.numel());
        let mut up = z.clone();
        up.data_mut()[k] += FD_STEP;
        let mut down = z.clone();
        down.data_mut()[k] -= FD_STEP;
        ste.add(gy.data()[k], (lz(&up) - lz(&down)) / (2.0 * FD_STEP));
    }

    // Adversarial losses, both sides, with respect to every score input.
    let mut adv_report = Vec::new();
    let mut adv_ok = true;
    let mut hrrgan_ref_cut = true;
    for kind in AdvKind::ALL {
        let mut stats = ProbeStats::default();
        let fake = random_tensor(&mut rng, &[2, 1, 3, 4], 2.0);
        let real = random_tensor(&mut rng, &[2, 1, 3, 4], 2.0);
        for side in 0..2 {
            let mut tape = Tape::new(&[]);
            let (fv, rv) = (tape.input(fake.clone()), tape.input(real.clone()));
            let loss = if side == 0 {
                adv_g_loss_graph(&mut tape, kind, &fv, &rv)
            } else {
                adv_d_loss_graph(&mut tape, kind, &rv, &fv)
            }
            .map_err(err)?;
            let grads = tape.backward(loss).map_err(err)?;
            let value = |f: &Tensor, r: &Tensor| {
                if side == 0 { adv_g_loss(kind, f.data(), r.data()) } else { adv_d_loss(kind, r.data(), f.data()) }.unwrap()
            };
            for _ in 0..FD_PROBES / 4 {
                let k = rng.gen_range(0..fake.numel());
                let probe_real = rng.gen_bool(0.5);
                let analytic = grads.var(if probe_real { rv } else { fv }).map(|t| t.data()[k]).unwrap_or(0.0);
                if kind == AdvKind::Hrrgan && side == 0 && probe_real {
                    // The reference is cut from the graph by design.
                    hrrgan_ref_cut &= analytic == 0.0;
                    continue;
                }
                let shift = |d: f64| {
                    let (mut f, mut r) = (fake.clone(), real.clone());
                    if probe_real { r.data_mut()[k] += d } else { f.data_mut()[k] += d }
                    value(&f, &r)
                };
                stats.add(analytic, (shift(FD_STEP) - shift(-FD_STEP)) / (2.0 * FD_STEP));
            }
        }
        adv_ok &= stats.worst < FD_REL_TOL;
        adv_report.push(format!("{} {:.1e} ({} probes)", kind.name(), stats.worst, stats.probes));
    }
    let elapsed = start.elapsed();
    let pass = ica.worst < FD_REL_TOL
        && beta.worst < FD_REL_TOL
        && ste.worst < FD_REL_TOL
        && adv_ok
        && hrrgan_ref_cut
        && elapsed < GRAD_BUDGET;
    Ok(outcome(
        pass,
        format!(
            "max rel err: scaling banks {:.1e} ({}), realism path {:.1e} ({}), rounding pass-through {:.1e} ({}), {}; HRRGAN reference gradient cut: {hrrgan_ref_cut}; {:.1}s",
            ica.worst,
            ica.probes,
            beta.worst,
            beta.probes,
            ste.worst,
            ste.probes,
            adv_report.join(", "),
            elapsed.as_secs_f64()
        ),
    ))
}

// ------------------------------------------------------------ entropy coder

fn sample_logistic(rng: &mut impl Rng, loc: f64, scale: f64) -> f64 {
    let u: f64 = rng.gen_range(1e-12..1.0 - 1e-12);
    loc + scale * (u / (1.0 - u)).ln()
}

fn random_params(rng: &mut impl Rng, channels: usize) -> EntropyParams {
    let loc = (0..channels).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let scale = (0..channels).map(|_| rng.gen_range(-2.0f64..3.0).exp()).collect();
    EntropyParams::new(loc, scale).unwrap()
}

fn random_latent(rng: &mut impl Rng, params: &EntropyParams, bounds: &[(i32, i32)], plane: usize) -> QuantizedLatent {
    let c = bounds.len();
    let mut symbols = Vec::with_capacity(c * plane);
    for ch in 0..c {
        for _ in 0..plane {
            let s = sample_logistic(rng, params.loc()[ch], params.scale()[ch]).round() as i32;
            symbols.push(s.clamp(bounds[ch].0, bounds[ch].1));
        }
    }
    QuantizedLatent::new(c, 1, plane, symbols).unwrap()
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut lossless, mut symbols_total) = (0usize, 0usize);
    let mut i = 0;
    while i < CODER_ROUND_TRIPS {
        let channels = rng.gen_range(1..9);
        let params = random_params(&mut rng, channels);
        let bounds = default_bounds(&params);
        let table = CdfTable::build(&params, &bounds).map_err(err)?;
        for _ in 0..10 {
            let plane = rng.gen_range(0..80);
            let latent = random_latent(&mut rng, &params, &bounds, plane);
            let bytes = range_encode(&latent.symbols, &table, plane).map_err(err)?;
            let back = range_decode(&bytes, &table, latent.symbols.len(), plane).map_err(err)?;
            lossless += usize::from(back == latent.symbols);
            symbols_total += latent.symbols.len();
            i += 1;
        }
    }
    // Long streams against the model's own rate estimate.
    let (mut long, mut within, mut worst_excess) = (0, 0, f64::NEG_INFINITY);
    for _ in 0..300 {
        let channels = rng.gen_range(1..17);
        let params = random_params(&mut rng, channels);
        let bounds = default_bounds(&params);
        let table = CdfTable::build(&params, &bounds).map_err(err)?;
        let plane = CODER_LONG_STREAM.div_ceil(channels) + rng.gen_range(0..2000);
        let latent = random_latent(&mut rng, &params, &bounds, plane);
        let bytes = range_encode(&latent.symbols, &table, plane).map_err(err)?;
        // Against the quantized tables the coder uses and the continuous model.
        let coded = table.estimate_bits(&latent.symbols, plane).map_err(err)? / 8.0;
        let continuous = rate_estimate(&latent, &params, 1, plane).map_err(err)?.bits / 8.0;
        let excess = [coded, continuous]
            .iter()
            .map(|e| (bytes.len() as f64 - e).abs() - CODER_REL_SLACK * e)
            .fold(f64::NEG_INFINITY, f64::max);
        worst_excess = worst_excess.max(excess);
        long += 1;
        within += usize::from(excess <= CODER_ABS_SLACK_BYTES);
        let back = range_decode(&bytes, &table, latent.symbols.len(), plane).map_err(err)?;
        lossless += usize::from(back == latent.symbols);
    }
    let elapsed = start.elapsed();
    let trips = CODER_ROUND_TRIPS + long;
    let pass = lossless == trips && within == long && elapsed < CODER_BUDGET;
    Ok(outcome(
        pass,
        format!(
            "{lossless}/{trips} round trips lossless ({symbols_total} short-stream symbols); {within}/{long} streams of >= {CODER_LONG_STREAM} symbols within 1% + 32 B of both the table and the model estimate (worst |size - estimate| - 1% = {worst_excess:.1} B); {:.1}s",
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------- bitstream

fn criterion_4() -> Check {
    let start = Instant::now();
    // Header round trip over the boundary values of every field.
    let sides = [1u16, 2, 63, 64, 65, 255, 256, 32767, 65534, 65535];
    let bytes8 = [0u8, 1, 127, 128, 254, 255];
    let chans = [1u16, 2, 255, 256, 65534, 65535];
    let lens = [0u32, 1, 255, 256, 65535, 65536, u32::MAX - 1, u32::MAX];
    let mut headers = 0;
    let mut header_ok = true;
    for &height in &sides {
        for &width in &sides {
            for &level in &bytes8 {
                for &fraction in &bytes8 {
                    for &channels in &chans {
                        for &payload_len in &lens {
                            let h = Header { height, width, level, fraction, channels, payload_len };
                            header_ok &= Header::parse(&h.to_bytes()).map(|p| p == h).unwrap_or(false);
                            headers += 1;
                        }
                    }
                }
            }
        }
    }
    let zero = Header { height: 0, width: 5, level: 0, fraction: 0, channels: 1, payload_len: 0 };
    header_ok &= matches!(Header::parse(&zero.to_bytes()), Err(Error::Format(_)));

    let model = Model::new(ModelConfig { levels: 3, ..ModelConfig::default() }, 11).map_err(err)?;
    let codec = Codec::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut fidelity = 0;
    let mut deterministic = true;
    for i in 0..FIDELITY_IMAGES {
        let (h, w) = (rng.gen_range(1..=FIDELITY_MAX_SIDE), rng.gen_range(1..=FIDELITY_MAX_SIDE));
        let img = random_image(&mut rng, h, w);
        let qc = model.quality(rng.gen_range(0.0..=2.0)).map_err(err)?;
        let stream = codec.compress(&img, qc).map_err(err)?;
        if i < 5 {
            deterministic &= codec.compress(&img, qc).map_err(err)? == stream;
        }
        let beta = model.realism(rng.gen_range(0.0..=model.config().beta_max)).map_err(err)?;
        let out = decompress_bytes(&stream.to_bytes(), beta, &model).map_err(err)?;
        fidelity += usize::from((out.height(), out.width()) == (h, w));
    }

    // Typed errors for the three named failure modes.
    let img = random_image(&mut rng, 70, 45);
    let good = codec.compress(&img, model.quality(1.0).map_err(err)?).map_err(err)?.to_bytes();
    let beta0 = model.realism(0.0).map_err(err)?;
    let mut bad_magic = good.clone();
    bad_magic[0] ^= 0xff;
    let named = matches!(decompress_bytes(&bad_magic, beta0, &model), Err(Error::Format(_)))
        && matches!(decompress_bytes(&good[..good.len() - 1], beta0, &model), Err(Error::Decode(_)))
        && {
            let other = Model::new(ModelConfig { levels: 3, latent_channels: 16, ..ModelConfig::default() }, 1).map_err(err)?;
            matches!(decompress_bytes(&good, beta0, &other), Err(Error::Compatibility(_)))
        };

    // Fuzzing.
    let bases: Vec<Vec<u8>> = [(37usize, 50usize, 0.0), (64, 64, 1.5), (100, 70, 2.0)]
        .iter()
        .map(|&(h, w, q)| codec.compress(&random_image(&mut rng, h, w), model.quality(q).unwrap()).map(|s| s.to_bytes()))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let (mut panics, mut errors, mut decoded, mut wrong_dims) = (0, 0, 0, 0);
    for m in 0..FUZZ_MUTATIONS {
        let mut bytes = bases[m % bases.len()].clone();
        match rng.gen_range(0..6) {
            0 => {
                let k = rng.gen_range(0..bytes.len());
                bytes[k] ^= 1 << rng.gen_range(0..8);
            }
            1 => {
                let k = rng.gen_range(0..bytes.len());
                bytes[k] = rng.gen();
            }
            2 => bytes.truncate(rng.gen_range(0..bytes.len())),
            3 => bytes.extend((0..rng.gen_range(1..64)).map(|_| rng.gen::<u8>())),
            4 => {
                let k = rng.gen_range(0..HEADER_LEN);
                bytes[k] = rng.gen();
            }
            _ => {
                for _ in 0..rng.gen_range(2..10) {
                    let k = rng.gen_range(HEADER_LEN.min(bytes.len() - 1)..bytes.len());
                    bytes[k] = rng.gen();
                }
            }
        }
        let result = catch_unwind(AssertUnwindSafe(|| {
            let stream = Bitstream::from_bytes(&bytes)?;
            let out = codec.decompress(&stream, beta0)?;
            Ok::<_, Error>((out, stream.header))
        }));
        match result {
            Err(_) => panics += 1,
            Ok(Err(_)) => errors += 1,
            Ok(Ok((out, h))) => {
                decoded += 1;
                wrong_dims += usize::from((out.height(), out.width()) != (h.height as usize, h.width as usize));
            }
        }
    }
    let pass = header_ok && fidelity == FIDELITY_IMAGES && deterministic && named && panics == 0 && wrong_dims == 0;
    Ok(outcome(
        pass,
        format!(
            "{headers} boundary headers round-trip: {header_ok}; dims preserved on {fidelity}/{FIDELITY_IMAGES} random images up to {FIDELITY_MAX_SIDE} px; deterministic: {deterministic}; format/decode/compatibility errors typed: {named}; {FUZZ_MUTATIONS} mutations: {panics} panics, {errors} typed errors, {decoded} decoded with header dims; {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    ))
}

// ------------------------------------------------------ adversarial semantics

fn criterion_5() -> Check {
    let levels = 3;
    let model = small_model(levels, 21);
    let disc = Discriminator::new(DiscConfig { kind: DesignKind::Independent, levels, widths: [4, 4, 8, 8] }, 22).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let x = Tensor::new(vec![2, 3, 64, 64], (0..2 * 3 * 64 * 64).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let beta = 1.7;
    let mut notes = Vec::new();
    let mut pass = true;
    for q in 0..levels {
        model.reset_forward_passes();
        let mut tape = Tape::new(&Group::MODEL);
        let xv = tape.constant(x.clone());
        let b = tape.constant(Tensor::scalar(beta));
        let pair = hrrgan_pair(&mut tape, &xv, q, &b, &model, &disc).map_err(err)?;
        let passes = model.forward_passes();
        let grads = tape.backward(pair.generator_loss).map_err(err)?;
        if q + 1 == levels {
            let mut e = Eval;
            let direct = disc.discriminate_graph(&mut e, &x, q).map_err(err)?;
            let is_real = tape.value(&pair.reference) == &direct && pair.upper.is_none();
            pass &= is_real && passes == 1;
            notes.push(format!("q={q}: reference == D(x): {is_real}, forwards {passes}"));
        } else {
            let upper = pair.upper.ok_or("missing upper reconstruction")?;
            let upper_silent = grads.var(upper).is_none_or(|t| t.data().iter().all(|&v| v == 0.0));
            // Same loss with the reference frozen as a constant: identical gradients.
            let mut frozen = Tape::new(&Group::MODEL);
            let xv = frozen.constant(x.clone());
            let b = frozen.constant(Tensor::scalar(beta));
            let out = model.nic_forward(&mut frozen, &xv, QualityControl::new(q, 0.0, levels).unwrap(), &b).map_err(err)?;
            let fake = disc.discriminate_graph(&mut frozen, &out.reconstruction, q).map_err(err)?;
            let reference = frozen.constant(tape.value(&pair.reference).clone());
            let loss = adv_g_loss_graph(&mut frozen, AdvKind::Hrrgan, &fake, &reference).map_err(err)?;
            let frozen_grads = frozen.backward(loss).map_err(err)?;
            let identical = model.params().ids().into_iter().all(|id| grads.param(id) == frozen_grads.param(id));
            let no_disc = !grads.touches(Group::Discriminator);
            pass &= passes == 2 && upper_silent && identical && no_disc;
            notes.push(format!(
                "q={q}: forwards {passes}, q+1 branch gradient zero: {upper_silent}, gradients equal frozen-reference run: {identical}"
            ));
        }
    }
    // The training step performs the same number of passes.
    let cfg = TrainConfig::from_toml(
        "levels = 3\nrate_weights = [3.4, 0.4, 0.05]\ncrop_size = 64\nbatch_size = 2\nchannels = 4\nlatent_channels = 4\ndisc_widths = [4, 4, 8, 8]\nstage1_steps = 1\nstage2_steps = 1\n",
        &[],
    )
    .map_err(err)?;
    let mut trainer = Trainer::new(cfg).map_err(err)?;
    trainer.ensure_discriminator().map_err(err)?;
    for q in 0..levels {
        trainer.model().reset_forward_passes();
        trainer.stage2_generator_phase(&x, q, beta).map_err(err)?;
        let n = trainer.model().forward_passes();
        let want = if q + 1 == levels { 1 } else { 2 };
        pass &= n == want;
        notes.push(format!("training step q={q}: {n} forwards"));
    }
    Ok(outcome(pass, notes.join("; ")))
}

// ------------------------------------------------------- discriminator zoo

fn criterion_7() -> Check {
    let levels = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let widths = [4, 6, 8, 8];
    let mut shapes_ok = true;
    for kind in DesignKind::ALL {
        let d = Discriminator::new(DiscConfig { kind, levels, widths }, 1).map_err(err)?;
        for (h, w) in [(64, 64), (128, 64), (64, 192), (16, 48)] {
            let img = random_image(&mut rng, h, w);
            for q in 0..levels {
                let s = d.discriminate(&img, q).map_err(err)?;
                shapes_ok &= (s.height, s.width) == (h / 16, w / 16) && s.logits.len() == (h / 16) * (w / 16);
            }
        }
    }
    // Level-q loss reaches level-q parameters only. The plain loss is used
    // because relativistic losses leave the projection bias without gradient.
    let ind = Discriminator::new(DiscConfig { kind: DesignKind::Independent, levels, widths }, 2).map_err(err)?;
    let x = random_tensor(&mut rng, &[2, 3, 64, 64], 0.5);
    let f = random_tensor(&mut rng, &[2, 3, 64, 64], 0.5);
    let mut isolated = true;
    for q in 0..levels {
        let mut tape = Tape::new(&[Group::Discriminator]);
        let (xv, fv) = (tape.constant(x.clone()), tape.constant(f.clone()));
        let real = ind.discriminate_graph(&mut tape, &xv, q).map_err(err)?;
        let fake = ind.discriminate_graph(&mut tape, &fv, q).map_err(err)?;
        let loss = adv_d_loss_graph(&mut tape, AdvKind::Sgan, &real, &fake).map_err(err)?;
        let grads = tape.backward(loss).map_err(err)?;
        for (id, p) in ind.params().iter() {
            let own = p.name.starts_with(&format!("disc.level{q}."));
            let live = grads.param(id).is_some_and(|t| t.data().iter().any(|&v| v != 0.0));
            isolated &= own == live;
        }
    }
    // The unconditioned design cannot see q.
    let plain = Discriminator::new(DiscConfig { kind: DesignKind::SharedNoCond, levels, widths }, 3).map_err(err)?;
    let mut invariant = true;
    for _ in 0..5 {
        let img = random_image(&mut rng, 64, 128);
        let base = plain.discriminate(&img, 0).map_err(err)?;
        for q in 1..levels {
            invariant &= plain.discriminate(&img, q).map_err(err)? == base;
        }
    }
    Ok(outcome(
        shapes_ok && isolated && invariant,
        format!("all five designs give H/16 x W/16 maps: {shapes_ok}; independent levels gradient-isolated: {isolated}; shared_no_cond q-invariant: {invariant}"),
    ))
}

// ----------------------------------------------------------- desk training

struct Desk {
    checkpoint: Checkpoint,
    held_out: Vec<ImageTensor>,
    note: String,
}

fn cache_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn ensure_corpus(dir: &Path, count: usize, side: u32, seed: u64) -> Result<(), String> {
    let have = std::fs::read_dir(dir).map(|r| r.count()).unwrap_or(0);
    if have != count {
        let _ = std::fs::remove_dir_all(dir);
        write_corpus(dir, count, side, seed).map_err(err)?;
    }
    Ok(())
}

fn desk_config() -> Result<TrainConfig, String> {
    let root = cache_root();
    TrainConfig::from_toml(
        DESK_CONFIG,
        &[format!("corpus={:?}", root.join("corpus").display().to_string())],
    )
    .map_err(err)
    .map(|mut c| {
        c.output_dir = root.join(format!("run-{}", &c.digest()[..12]));
        c
    })
}

fn desk() -> Result<Desk, String> {
    let root = cache_root();
    ensure_corpus(&root.join("corpus"), DESK_CORPUS_IMAGES, DESK_CORPUS_SIDE, DESK_CORPUS_SEED)?;
    ensure_corpus(&root.join("held_out"), HELD_OUT_IMAGES, HELD_OUT_SIDE, HELD_OUT_SEED)?;
    let cfg = desk_config()?;
    let final_path = cfg.output_dir.join("final.ckpt");
    let start = Instant::now();
    let mut note = format!("cached model {}", final_path.display());
    if !final_path.exists() {
        eprintln!("training the desk-scale model into {} (resumable)", cfg.output_dir.display());
        let total = cfg.total_steps();
        train::run(cfg.clone(), true, |r| {
            if (r.step + 1) % 250 == 0 {
                eprintln!(
                    "  step {}/{total} stage {} q={} bpp={:.3} d={:.1} lp={:.3} {:.0}s",
                    r.step + 1,
                    r.stage,
                    r.q,
                    r.rate_bpp,
                    r.distortion,
                    r.perceptual,
                    start.elapsed().as_secs_f64()
                );
            }
        })
        .map_err(err)?;
        note = format!("trained in {:.0}s", start.elapsed().as_secs_f64());
    }
    let checkpoint = Checkpoint::load(&final_path).map_err(err)?;
    let held_out = load_images(root.join("held_out")).map_err(err)?.into_iter().map(|(_, i)| i).collect();
    Ok(Desk { checkpoint, held_out, note })
}

fn criterion_6(d: &Desk) -> Check {
    let m = &d.checkpoint.model;
    let metric = crdr::losses::FeatureMetric::default();
    let beta0 = m.realism(0.0).map_err(err)?;
    let beta_max = m.realism(m.config().beta_max).map_err(err)?;
    let mut rows = Vec::new();
    for q in 0..m.levels() {
        rows.push(eval::evaluate_point(m, &d.held_out, m.quality(q as f64).map_err(err)?, beta0, &metric).map_err(err)?);
    }
    let q0_max = eval::evaluate_point(m, &d.held_out, m.quality(0.0).map_err(err)?, beta_max, &metric).map_err(err)?;
    let bpp_ok = rows.windows(2).all(|w| w[1].bpp >= BPP_MARGIN * w[0].bpp);
    let psnr_ok = rows.windows(2).all(|w| w[1].psnr >= w[0].psnr + PSNR_MARGIN_DB);
    let psnr_beta = rows[0].psnr >= q0_max.psnr;
    let lp_beta = q0_max.perceptual <= rows[0].perceptual;
    let table: Vec<String> = rows.iter().map(|r| format!("q={} {:.4} bpp {:.2} dB lp {:.4}", r.q_frac, r.bpp, r.psnr, r.perceptual)).collect();
    Ok(outcome(
        bpp_ok && psnr_ok && psnr_beta && lp_beta,
        format!(
            "{} held-out images at beta=0: [{}]; bpp +10%/level: {bpp_ok}; PSNR +0.5 dB/level: {psnr_ok}; q=0 beta_max: {:.2} dB lp {:.4}; PSNR(0) >= PSNR(max): {psnr_beta}; lp(max) <= lp(0): {lp_beta}; {}",
            d.held_out.len(),
            table.join(", "),
            q0_max.psnr,
            q0_max.perceptual,
            d.note
        ),
    ))
}

fn criterion_8(d: &Desk) -> Check {
    let m = &d.checkpoint.model;
    let metric = crdr::losses::FeatureMetric::default();
    let rows = eval::sweep(m, &d.held_out, m.realism(0.0).map_err(err)?, SWEEP_STEP, &metric).map_err(err)?;
    let dir = cache_root().join("reports");
    std::fs::create_dir_all(&dir).map_err(err)?;
    let csv = dir.join("sweep.csv");
    eval::write_sweep_csv(&rows, &csv).map_err(err)?;
    eval::plot_sweep_png(&rows, dir.join("sweep.png")).map_err(err)?;
    let written = eval::read_sweep_csv(&csv).map_err(err)?.len();
    let expected = ((m.levels() - 1) as f64 / SWEEP_STEP).round() as usize + 1;
    let q: Vec<f64> = rows.iter().map(|r| r.q_frac).collect();
    let rate: Vec<f64> = rows.iter().map(|r| r.bpp).collect();
    let rho = spearman(&q, &rate).map_err(err)?;
    // Row-count formula at five levels, on a tiny untrained model.
    let five = small_model(5, 3);
    let tiny = vec![ImageTensor::filled(16, 16, 0.5).map_err(err)?];
    let rows5 = eval::sweep(&five, &tiny, five.realism(0.0).map_err(err)?, SWEEP_STEP, &metric).map_err(err)?;
    let csv5 = dir.join("sweep_q5.csv");
    eval::write_sweep_csv(&rows5, &csv5).map_err(err)?;
    let written5 = eval::read_sweep_csv(&csv5).map_err(err)?.len();
    let grid_ok = q_grid(3, SWEEP_STEP).map_err(err)?.len() == 9;
    let pass = rho >= SPEARMAN_MIN && written == expected && expected == 9 && written5 == 17 && grid_ok;
    Ok(outcome(
        pass,
        format!(
            "spearman(q_frac, bpp) = {rho:.3} over {} points; CSV rows {written} (expected {expected}); five-level CSV rows {written5} (expected 17); bpp {:?}",
            rows.len(),
            rate.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    ))
}

struct Identity(usize);

impl Reconstructor for Identity {
    fn levels(&self) -> usize {
        self.0
    }

    fn reconstruct(&self, x: &ImageTensor, _q: usize) -> crdr::Result<ImageTensor> {
        Ok(x.clone())
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (oracle::mean(a), oracle::mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn criterion_9(d: Option<&Desk>) -> Check {
    let levels = 3;
    let disc = Discriminator::new(DiscConfig { kind: DesignKind::Independent, levels, widths: [4, 6, 8, 8] }, 9).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let images: Vec<ImageTensor> = (0..6).map(|_| random_image(&mut rng, 80, 96)).collect();
    let crops = sample_crops(&images, 60, 32, levels, &mut rng).map_err(err)?;
    let top = crops.iter().filter(|c| c.q + 1 == levels).count();
    let rgan = reality_histogram(&Identity(levels), &disc, &crops, RealityKind::Rgan, 8).map_err(err)?;
    let hrr = reality_histogram(&Identity(levels), &disc, &crops, RealityKind::Hrrgan, 8).map_err(err)?;
    let conserved = rgan.total() == crops.len() && rgan.excluded == 0 && hrr.total() + hrr.excluded == crops.len() && hrr.excluded == top;
    let zero_point = rgan.samples.iter().all(|s| s.score == 0.0 && s.mse == 0.0);
    let dir = cache_root().join("reports");
    std::fs::create_dir_all(&dir).map_err(err)?;
    eval::write_histogram_csv(&rgan, dir.join("dhist_identity.csv")).map_err(err)?;
    let csv_rows = std::fs::read_to_string(dir.join("dhist_identity.csv")).map_err(err)?.lines().count() - 1;
    let valid = conserved && zero_point && csv_rows == 64;
    let mut report = String::from("trained-model pattern not computed");
    if let Some(d) = d {
        if let Some(trained) = d.checkpoint.discriminator.as_ref() {
            let m = &d.checkpoint.model;
            let recon = ModelReconstructor { model: m, beta: m.realism(m.config().beta_max).map_err(err)? };
            let mut rng = ChaCha8Rng::seed_from_u64(910);
            let crops: Vec<LevelCrop> = sample_crops(&d.held_out, DHIST_CROPS, DHIST_CROP, m.levels(), &mut rng).map_err(err)?;
            let mut parts = Vec::new();
            for kind in [RealityKind::Rgan, RealityKind::Hrrgan] {
                let h = reality_histogram(&recon, trained, &crops, kind, DHIST_BINS).map_err(err)?;
                let name = if kind == RealityKind::Rgan { "rgan" } else { "hrrgan" };
                eval::write_histogram_csv(&h, dir.join(format!("dhist_{name}.csv"))).map_err(err)?;
                eval::plot_histogram_png(&h, dir.join(format!("dhist_{name}.png"))).map_err(err)?;
                let mse: Vec<f64> = h.samples.iter().map(|s| s.mse).collect();
                let score: Vec<f64> = h.samples.iter().map(|s| s.score).collect();
                parts.push(format!(
                    "{name}: {} crops ({} excluded), corr(mse, score) {:.3}, mean score {:.3}",
                    h.total(),
                    h.excluded,
                    pearson(&mse, &score),
                    oracle::mean(&score)
                ));
            }
            report = format!("reported only: {}", parts.join("; "));
        }
    }
    Ok(outcome(
        valid,
        format!("identity reconstructor: counts conserved {conserved} ({top} top-level crops excluded under HRRGAN), RGAN zero point exact {zero_point}, CSV bins {csv_rows}; {report}"),
    ))
}

fn main() {
    let only: Option<BTreeSet<u32>> =
        std::env::var("CRDR_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|s| s.contains(&n));
    let names = [
        "loss-formula oracle suite",
        "gradient checks",
        "entropy coder",
        "bitstream",
        "HRRGAN step semantics",
        "desk-scale training trend",
        "discriminator-zoo contract",
        "rate sweep",
        "reality-score histogram",
    ];
    let mut desk_cache: Option<Result<Desk, String>> = None;
    let needs_desk = [6u32, 8, 9].iter().any(|&n| wanted(n));
    let mut failed = 0;
    for n in 1..=9u32 {
        if !wanted(n) {
            continue;
        }
        if needs_desk && n >= 6 && desk_cache.is_none() && n != 7 {
            desk_cache = Some(desk());
        }
        let desk_ref = desk_cache.as_ref().and_then(|d| d.as_ref().ok());
        let desk_err = desk_cache.as_ref().and_then(|d| d.as_ref().err()).cloned();
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => desk_ref.map(criterion_6).unwrap_or_else(|| Err(desk_err.clone().unwrap_or_default())),
            7 => criterion_7(),
            8 => desk_ref.map(criterion_8).unwrap_or_else(|| Err(desk_err.clone().unwrap_or_default())),
            _ => criterion_9(desk_ref),
        }));
        let o = match result {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => outcome(false, format!("error: {e}")),
            Err(_) => outcome(false, "panicked".into()),
        };
        failed += usize::from(!o.pass);
        println!(
            "criterion {n} [{}] {}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            names[n as usize - 1],
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
