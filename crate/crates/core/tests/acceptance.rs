//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use pix2next::config::RunConfig;
use pix2next::data::{
    iter_batches, load_manifest, make_synthetic_dataset, Batch, Image, Layout, PairLoader, Split,
};
use pix2next::discriminator::{multiscale_pyramid, DiscriminatorSpec, MultiScaleDiscriminator};
use pix2next::extractor::{Extractor, FeatureBatch, IdentityStub, STUB_GRID};
use pix2next::generator::{
    AttentionPlacement, CrossAttention, Generator, GeneratorSpec, LayerPlan, Section,
};
use pix2next::losses::{
    feature_matching_loss, gan_loss, scalar, ssim_loss, total_generator_loss, GanMode,
    LossWeights, Role, SsimParams,
};
use pix2next::metrics::{
    evaluate_dirs, frechet_distance, lpips, psnr, rmse, Backends, FeatureBackend, PSNR_IDENTICAL,
};
use pix2next::params::{seeded_rng, ParamStore};
use pix2next::schedule::CosineWarmup;
use pix2next::trainer::{fit, read_log, FitOptions, Trainer, Translator};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    values(a)
        .iter()
        .zip(values(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn randn(shape: &[usize], std: f64, seed: u64, dtype: DType) -> Tensor {
    let mut rng = seeded_rng(seed, 99);
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

fn uniform(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    let mut rng = seeded_rng(seed, 98);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

/// A small run configuration shared by the training criteria.
fn small_config(iterations: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.resize = [64, 64];
    c.generator.widths = [8, 16, 16];
    c.generator.norm_groups = 4;
    c.generator.attn_hidden = 8;
    c.generator.attn_heads = 2;
    c.extractor.token_dim = 8;
    c.discriminator.layers = 3;
    c.discriminator.base_width = 4;
    c.discriminator.max_width = 16;
    c.loss.ssim_window = 7;
    c.train.batch_size = 2;
    c.train.iterations = iterations;
    c
}

fn first_batch(root: &Path, n: usize, batch: usize) -> Batch {
    let m = make_synthetic_dataset(root, n, 0, (64, 64)).unwrap();
    let mut loader = PairLoader::new((64, 64), true);
    let spec = pix2next::data::BatchSpec {
        batch_size: batch,
        seed: 0,
        resize: (64, 64),
    };
    iter_batches(&m, spec, Split::Train, 0, &mut loader).unwrap().next().unwrap().unwrap()
}

fn architecture() -> Outcome {
    let start = Instant::now();
    let spec = GeneratorSpec::paper_default();
    let plan = spec.plan();
    let sites = |section: Section, kind: fn(&LayerPlan) -> bool| -> Vec<usize> {
        plan.iter()
            .filter(|s| s.section == section && s.layers.iter().any(kind))
            .map(|s| s.index)
            .collect()
    };
    let is_down = |l: &LayerPlan| matches!(l, LayerPlan::Down(_));
    let is_up = |l: &LayerPlan| matches!(l, LayerPlan::Up(_));
    let is_attn = |l: &LayerPlan| matches!(l, LayerPlan::Attn { .. });
    ensure!(sites(Section::Encoder, is_down) == [2, 4, 6], "encoder downsampling sites");
    ensure!(sites(Section::Decoder, is_up) == [2, 4, 6], "decoder upsampling sites");
    for section in [Section::Encoder, Section::Bottleneck, Section::Decoder] {
        ensure!(sites(section, is_down).len() + sites(section, is_up).len() <= 3, "extra resampling");
    }
    ensure!(sites(Section::Bottleneck, is_down).is_empty(), "bottleneck resamples");
    ensure!(sites(Section::Encoder, is_up).is_empty(), "encoder upsamples");
    ensure!(sites(Section::Decoder, is_down).is_empty(), "decoder downsamples");
    ensure!(sites(Section::Encoder, is_attn) == [7], "encoder attention site");
    ensure!(sites(Section::Bottleneck, is_attn) == [2], "bottleneck attention site");
    ensure!(sites(Section::Decoder, is_attn) == [1], "decoder attention site");
    let attn: Vec<LayerPlan> = plan
        .iter()
        .flat_map(|s| s.layers.iter().copied().filter(is_attn))
        .collect();
    ensure!(attn.len() == 3, "EBD has {} attention sites", attn.len());
    ensure!(
        attn.iter().all(|l| *l == LayerPlan::Attn { hidden: 128, heads: 4 }),
        "attention dims {attn:?}"
    );

    let mut b_only = spec.clone();
    b_only.attention = AttentionPlacement::BottleneckOnly;
    let b_plan = b_only.plan();
    let b_sites: Vec<String> = b_plan
        .iter()
        .filter(|s| s.layers.iter().any(is_attn))
        .map(|s| s.name())
        .collect();
    ensure!(b_sites == ["bottleneck.b2"], "B-only sites {b_sites:?}");

    // Spatial bookkeeping from the plan alone: 256 -> 32 at the bottleneck and back.
    let mut side = 256usize;
    let mut min_side = side;
    for s in &plan {
        for l in &s.layers {
            match l {
                LayerPlan::Down(_) => side /= 2,
                LayerPlan::Up(_) => side *= 2,
                _ => {}
            }
        }
        min_side = min_side.min(side);
    }
    ensure!(side == 256 && min_side == 32, "resolution trace ends at {side}, bottoms at {min_side}");

    // Instantiated networks expose the same sites.
    let mut small = spec.clone();
    small.widths = [8, 16, 16];
    small.norm_groups = 4;
    small.attn_hidden = 8;
    small.attn_heads = 2;
    let g = ok(Generator::new(&small, Some(8), 0, DType::F32))?;
    let names: Vec<String> = g.attention_sites().into_iter().map(|(n, _)| n).collect();
    ensure!(
        names == ["encoder.b7", "bottleneck.b2", "decoder.b1"],
        "instantiated sites {names:?}"
    );
    small.attention = AttentionPlacement::BottleneckOnly;
    let g = ok(Generator::new(&small, Some(8), 0, DType::F32))?;
    ensure!(g.attention_sites().len() == 1, "B-only instantiated sites");
    let elapsed = start.elapsed().as_secs_f64();
    ensure!(elapsed < 10.0, "took {elapsed:.1}s");
    Ok(format!("down/up at B2/B4/B6, EBD 3 sites, B-only 1 site ({elapsed:.2}s)"))
}

fn attention_oracle() -> Outcome {
    let (c, d, hidden, heads) = (6usize, 5usize, 8usize, 2usize);
    let mut store = ParamStore::new(DType::F64);
    let mut rng = seeded_rng(3, 0);
    let attn = {
        let mut pb = store.builder(&mut rng);
        ok(CrossAttention::new(&mut pb, c, d, hidden, heads))?
    };
    // Scale the parameters up so the softmax is far from uniform.
    for (i, (_, var)) in store.vars().enumerate() {
        ok(var.set(&randn(var.dims(), 0.7, 100 + i as u64, DType::F64)))?;
    }
    let x = randn(&[1, c, 4, 4], 1.0, 1, DType::F64);
    let tokens = randn(&[1, 9, d], 1.0, 2, DType::F64);
    let got = values(&ok(attn.forward(&x, &tokens))?);

    let [q, k, v, o] = attn.projections();
    let mat = |t: &Tensor| -> Vec<Vec<f64>> { t.to_vec2().unwrap() };
    let (wq, wk, wv, wo) = (mat(q.weight()), mat(k.weight()), mat(v.weight()), mat(o.weight()));
    let (bq, bk, bv, bo): (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) = (
        q.bias().to_vec1().unwrap(),
        k.bias().to_vec1().unwrap(),
        v.bias().to_vec1().unwrap(),
        o.bias().to_vec1().unwrap(),
    );
    let affine = |w: &[Vec<f64>], b: &[f64], input: &[f64]| -> Vec<f64> {
        w.iter()
            .zip(b)
            .map(|(row, bias)| row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + bias)
            .collect()
    };
    let xv = values(&x);
    let tv = values(&tokens);
    let keys: Vec<Vec<f64>> = (0..9).map(|j| affine(&wk, &bk, &tv[j * d..(j + 1) * d])).collect();
    let vals: Vec<Vec<f64>> = (0..9).map(|j| affine(&wv, &bv, &tv[j * d..(j + 1) * d])).collect();
    let dh = hidden / heads;
    let mut worst = 0.0f64;
    for p in 0..16 {
        let xp: Vec<f64> = (0..c).map(|ch| xv[ch * 16 + p]).collect();
        let qp = affine(&wq, &bq, &xp);
        let mut mixed = vec![0.0; hidden];
        for h in 0..heads {
            let r = h * dh..(h + 1) * dh;
            let logits: Vec<f64> = keys
                .iter()
                .map(|kj| {
                    qp[r.clone()].iter().zip(&kj[r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in vals.iter().enumerate() {
                for i in r.clone() {
                    mixed[i] += e[j] / z * vj[i];
                }
            }
        }
        let out = affine(&wo, &bo, &mixed);
        for ch in 0..c {
            worst = worst.max((xp[ch] + out[ch] - got[ch * 16 + p]).abs());
        }
    }
    ensure!(worst <= 1e-5, "max abs error {worst:e}");

    let single = randn(&[1, 1, d], 1.0, 4, DType::F64);
    let w = values(&ok(attn.weights(&x, &single))?);
    ensure!(w.iter().all(|&v| v == 1.0), "single-key weights {w:?}");
    Ok(format!("max abs error {worst:.2e}; single-key weight 1.0"))
}

fn loss_identities() -> Outcome {
    let p = SsimParams::default();
    let a = uniform(&[2, 1, 32, 32], 0, DType::F64);
    let self_loss = ok(scalar(&ok(ssim_loss(&a, &a, &p))?))?;
    ensure!(self_loss.abs() <= 1e-6, "L_SSIM(a,a) = {self_loss:e}");
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..100u64 {
        let x = uniform(&[1, 1, 16, 16], 10 + 2 * i, DType::F64);
        // Mix in anti-correlated pairs to exercise the upper half of the range.
        let y = if i % 2 == 0 {
            uniform(&[1, 1, 16, 16], 11 + 2 * i, DType::F64)
        } else {
            x.affine(-1.0, 1.0).unwrap()
        };
        let l = ok(scalar(&ok(ssim_loss(&x, &y, &p))?))?;
        lo = lo.min(l);
        hi = hi.max(l);
    }
    ensure!(lo >= 0.0 && hi <= 2.0, "L_SSIM range [{lo}, {hi}]");

    let feats: Vec<Vec<Tensor>> = (0..3)
        .map(|k| (0..5).map(|l| randn(&[2, 3, 4, 4], 1.0, 50 + k * 5 + l, DType::F64)).collect())
        .collect();
    let fm = ok(scalar(&ok(feature_matching_loss(&feats, &feats))?))?;
    ensure!(fm == 0.0, "L_FM on identical features = {fm}");

    let s = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
    let (_, b) = ok(total_generator_loss(&[s(1.0)], &s(0.2), &s(0.1), &LossWeights::default()))?;
    ensure!(b.total == 4.0, "total loss {}", b.total);

    let zeros = Tensor::zeros((4, 1, 3, 3), DType::F64, &Device::Cpu).unwrap();
    let ln2 = std::f64::consts::LN_2;
    let d = ok(scalar(&ok(gan_loss(Some(&zeros), &zeros, Role::Discriminator, GanMode::Bce))?))?;
    let g = ok(scalar(&ok(gan_loss(None, &zeros, Role::Generator, GanMode::Bce))?))?;
    ensure!((d - ln2).abs() <= 1e-6 && (g - ln2).abs() <= 1e-6, "BCE at 0: D {d}, G {g}");
    Ok(format!("L_SSIM(a,a)={self_loss:.1e}, range [{lo:.3}, {hi:.3}], total 4.0, BCE ln2"))
}

fn block_kind(name: &str) -> &'static str {
    if name.starts_with("stem") {
        "stem"
    } else if name.starts_with("head") {
        "head"
    } else if name.contains(".attn.") {
        "attention"
    } else if name.contains(".down.") {
        "down"
    } else if name.contains(".up.") {
        "up"
    } else if name.contains("norm") {
        "res-norm"
    } else if name.contains("shortcut") {
        "res-shortcut"
    } else {
        "res-conv"
    }
}

/// Central differences for the largest-gradient entry and one random entry of every tensor
/// selected by `keep`. Returns the worst relative error and the block kinds audited.
fn finite_difference_audit(
    store: &ParamStore,
    loss: &dyn Fn() -> f64,
    grads: &candle_core::backprop::GradStore,
    keep: &dyn Fn(&str) -> Option<&'static str>,
    seed: u64,
) -> Result<(f64, Vec<&'static str>, usize), String> {
    let eps = 1e-5;
    let mut rng = seeded_rng(seed, 7);
    let mut worst = 0.0f64;
    let mut kinds = Vec::new();
    let mut checked = 0;
    for (name, var) in store.vars() {
        let Some(kind) = keep(name) else { continue };
        let Some(g) = grads.get(var) else {
            return Err(format!("{name} has no gradient"));
        };
        let gv = values(g);
        let orig = values(var.as_tensor());
        let argmax = (0..gv.len())
            .max_by(|&a, &b| gv[a].abs().total_cmp(&gv[b].abs()))
            .unwrap();
        for idx in [argmax, rng.random_range(0..gv.len())] {
            let probe = |delta: f64| -> f64 {
                let mut v = orig.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
                loss()
            };
            let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
            probe(0.0);
            let analytic = gv[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
            if rel > 1e-2 {
                return Err(format!(
                    "{name}[{idx}]: analytic {analytic:e}, numeric {numeric:e}"
                ));
            }
            checked += 1;
        }
        if !kinds.contains(&kind) {
            kinds.push(kind);
        }
    }
    Ok((worst, kinds, checked))
}

fn gradient_audit() -> Outcome {
    let cfg = small_config(2);
    let spec = cfg.generator_spec();
    let g = ok(Generator::new(&spec, Some(8), 1, DType::F64))?;
    let stub = ok(IdentityStub::new(8, 0))?;
    let extractor = Extractor::with_backbone(Box::new(stub));
    let rgb = uniform(&[1, 3, 64, 64], 20, DType::F64);
    let target = uniform(&[1, 1, 64, 64], 21, DType::F64);
    let probe = randn(&[1, 1, 64, 64], 1.0, 22, DType::F64);
    let features = ok(extractor.extract(&rgb))?.unwrap();
    let params = SsimParams::default();
    let objective = || -> Tensor {
        let out = g.forward(&rgb, Some(&features)).unwrap();
        let s = ssim_loss(&target, &out, &params).unwrap();
        (s + (out * &probe).unwrap().mean_all().unwrap()).unwrap()
    };
    let grads = ok(objective().backward())?;
    let audited = [
        "stem",
        "encoder.b1.",
        "encoder.b2.",
        "encoder.b7.",
        "bottleneck.b2.",
        "decoder.b1.",
        "decoder.b2.",
        "head",
    ];
    let keep = |n: &str| audited.iter().any(|p| n.starts_with(p)).then(|| block_kind(n));
    let loss = || scalar(&objective()).unwrap();
    let (g_worst, mut kinds, mut checked) =
        finite_difference_audit(g.params(), &loss, &grads, &keep, 0)?;
    for k in ["stem", "res-conv", "res-norm", "res-shortcut", "attention", "down", "up", "head"] {
        ensure!(kinds.contains(&k), "block kind {k} not audited");
    }

    let d = ok(MultiScaleDiscriminator::new(&cfg.discriminator, (64, 64), 1, DType::F64))?;
    let img = uniform(&[1, 1, 64, 64], 23, DType::F64);
    let pyramid = ok(multiscale_pyramid(&img))?;
    let d_objective = || -> Tensor {
        let mut total = Tensor::new(0.0f64, &Device::Cpu).unwrap();
        for (k, level) in pyramid.iter().enumerate() {
            let s = d.score(k, level, None).unwrap();
            total = (total + gan_loss(None, &s.scores, Role::Generator, GanMode::Bce).unwrap()).unwrap();
            for f in &s.features {
                total = (total + f.sqr().unwrap().mean_all().unwrap()).unwrap();
            }
        }
        total
    };
    let d_grads = ok(d_objective().backward())?;
    let d_loss = || scalar(&d_objective()).unwrap();
    let mut d_worst = 0.0f64;
    for (k, net) in d.nets().iter().enumerate() {
        let (w, _, n) =
            finite_difference_audit(net.params(), &d_loss, &d_grads, &|_| Some("patch-d"), k as u64 + 1)?;
        d_worst = d_worst.max(w);
        checked += n;
    }
    kinds.push("patch-d");

    // Coverage: one training step, then the gradient of the next generator objective.
    let tmp = tempfile::tempdir().unwrap();
    let batch = first_batch(tmp.path(), 4, 2);
    let mut t = ok(Trainer::new(&cfg, 2))?;
    ok(t.train_step(&batch))?;
    let features = ok(t.extractor().extract(&batch.rgb))?;
    let fake = ok(t.generator().forward(&batch.rgb, features.as_ref()))?;
    let (total, _) = ok(t.generator_objective(&batch, &fake))?;
    let grads = ok(total.backward())?;
    let (mut nonzero, mut count) = (0usize, 0usize);
    for (_, var) in t.generator().params().vars() {
        count += var.elem_count();
        if let Some(g) = grads.get(var) {
            nonzero += values(g).iter().filter(|v| **v != 0.0).count();
        }
    }
    let frac = nonzero as f64 / count as f64;
    ensure!(frac > 0.99, "only {:.2}% of generator parameters have gradient", 100.0 * frac);
    Ok(format!(
        "{checked} entries over {} block kinds, worst rel error G {g_worst:.1e} D {d_worst:.1e}; {:.2}% nonzero",
        kinds.len(),
        100.0 * frac
    ))
}

/// Frozen toy configuration: reduced widths so 200 steps fit the CPU budget.
fn toy_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.resize = [64, 64];
    c.generator.widths = [16, 32, 32];
    c.generator.norm_groups = 8;
    c.discriminator.base_width = 8;
    c.train.batch_size = 4;
    c.train.iterations = 200;
    c
}

fn toy_overfit() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(make_synthetic_dataset(&data, 8, 0, (64, 64)))?;
    let mut cfg = toy_config();
    cfg.data.root = data.clone();
    let manifest = ok(load_manifest(&data, Layout::PairedSubdirs))?;
    let run = tmp.path().join("run");
    let summary = ok(fit(&cfg, &manifest, &run, &FitOptions::default()))?;
    ensure!(summary.steps == 200, "ran {} steps", summary.steps);
    let log = ok(read_log(&summary.log))?;
    let first = log.first().unwrap().ssim;
    let last = log.last().unwrap().ssim;

    let translator = ok(Translator::load(&run))?;
    let mut loader = PairLoader::new((64, 64), true);
    let mut err = 0.0;
    let mut n = 0usize;
    for batch in ok(iter_batches(&manifest, cfg.batch_spec(), Split::Train, 0, &mut loader))? {
        let batch = ok(batch)?;
        let y = ok(translator.translate_tensor(&batch.rgb))?;
        let diff = values(&(y - &batch.target).unwrap().abs().unwrap());
        err += diff.iter().sum::<f64>();
        n += diff.len();
    }
    let mae = err / n as f64;
    let elapsed = start.elapsed().as_secs_f64();
    ensure!(last < 0.15, "final L_SSIM {last:.4} (from {first:.4})");
    ensure!(mae < 0.1, "train-set MAE {mae:.4}");
    ensure!(elapsed <= 600.0, "took {elapsed:.0}s");
    Ok(format!("L_SSIM {first:.3} -> {last:.4}, MAE {mae:.4}, {elapsed:.0}s"))
}

fn scheduler() -> Outcome {
    let s = ok(CosineWarmup::with_defaults(1e-4, 1000))?;
    let at = |step| s.lr_at(step).unwrap();
    ensure!(at(0) == 0.0, "lr_at(0) = {}", at(0));
    ensure!(at(50) == 1e-4, "lr_at(warmup) = {}", at(50));
    ensure!((at(1000) - 1e-6).abs() <= 1e-18, "lr_at(total) = {}", at(1000));
    ensure!((at(525) - 5.05e-5).abs() <= 1e-9, "midpoint {}", at(525));
    Ok(format!("0, 1e-4, {:.3e}, {:.4e}", at(1000), at(525)))
}

fn metric_suite() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(make_synthetic_dataset(&data, 4, 5, (64, 64)))?;
    let nir = data.join("nir");
    let same = ok(evaluate_dirs(&nir, &nir, &Backends::Stub))?;
    for (id, r) in &same.rows {
        ensure!(r.psnr == PSNR_IDENTICAL, "{id}: PSNR {}", r.psnr);
        ensure!((r.ssim - 1.0).abs() <= 1e-6, "{id}: SSIM {}", r.ssim);
        ensure!(r.rmse == 0.0 && r.std == 0.0, "{id}: RMSE {} STD {}", r.rmse, r.std);
    }
    let fid = same.fid.ok_or("FID missing")?;
    ensure!(fid.abs() <= 1e-6, "identity FID {fid:e}");

    use nalgebra::{DMatrix, DVector};
    let one = |m: f64, v: f64| (DVector::from_element(1, m), DMatrix::from_element(1, 1, v));
    let (m1, s1) = one(0.0, 1.0);
    let (m2, s2) = one(1.0, 4.0);
    let f1d = ok(frechet_distance(&m1, &s1, &m2, &s2))?;
    ensure!((f1d - 2.0).abs() <= 1e-9, "1-D FID {f1d}");

    // Noisy copies: PSNR and RMSE must agree, LPIPS must grow with the noise.
    let backend = ok(FeatureBackend::stub(0))?;
    let gts: Vec<Image> = ok(pix2next::trainer::list_images(&nir))?
        .iter()
        .map(|p| pix2next::data::load_target(p).unwrap())
        .collect();
    let mut pairs = 0;
    let mut ladder = Vec::new();
    for (si, sigma) in [0.05f32, 0.1, 0.2].into_iter().enumerate() {
        let dist = Normal::new(0.0f32, sigma).unwrap();
        let mut total = 0.0;
        for (i, gt) in gts.iter().enumerate() {
            let mut rng = seeded_rng(i as u64, 40 + si as u64);
            let data = gt.data.iter().map(|v| (v + dist.sample(&mut rng)).clamp(0.0, 1.0)).collect();
            let noisy = Image::new(gt.channels, gt.height, gt.width, data);
            let p = ok(psnr(&noisy, gt))?;
            let r = ok(rmse(&noisy, gt))?;
            let implied = 20.0 * (255.0 / r).log10();
            ensure!((p - implied).abs() <= 1e-6, "PSNR {p} vs RMSE-implied {implied}");
            pairs += 1;
            total += ok(lpips(&noisy, gt, &backend))?;
        }
        ladder.push(total / gts.len() as f64);
    }
    ensure!(ladder.windows(2).all(|w| w[0] < w[1]), "LPIPS ladder {ladder:?}");
    Ok(format!(
        "identity PSNR inf, FID {fid:.1e}; 1-D FID {f1d}; {pairs} PSNR/RMSE pairs; LPIPS {:.4} < {:.4} < {:.4}",
        ladder[0], ladder[1], ladder[2]
    ))
}

fn discriminator_pyramid() -> Outcome {
    let spec = DiscriminatorSpec::default();
    let x = Tensor::zeros((1, 1, 256, 256), DType::F32, &Device::Cpu).unwrap();
    let sides: Vec<usize> = ok(multiscale_pyramid(&x))?.iter().map(|t| t.dims()[2]).collect();
    ensure!(sides == [256, 128, 64], "pyramid {sides:?}");
    let d = ok(MultiScaleDiscriminator::new(&spec, (256, 256), 0, DType::F32))?;
    let mut shapes = Vec::new();
    for s in [64usize, 128, 256] {
        // Four k=4, s=2, p=1 convs halve the side; the 3x3 head keeps it.
        let expected = s / 16;
        let input = uniform(&[2, 1, s, s], s as u64, DType::F32);
        for net in d.nets() {
            let out = ok(net.forward(&input))?;
            ensure!(
                out.scores.dims() == [2, 1, expected, expected],
                "{s}: scores {:?}",
                out.scores.dims()
            );
            ensure!(out.features.len() == 5, "{} taps", out.features.len());
        }
        shapes.push(format!("{s}->{expected}"));
    }
    Ok(format!("pyramid [256,128,64]; patch maps {}; 5 taps", shapes.join(", ")))
}

fn determinism_and_resume() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(make_synthetic_dataset(&data, 8, 0, (64, 64)))?;
    let manifest = ok(load_manifest(&data, Layout::PairedSubdirs))?;
    let mut cfg = small_config(20);
    cfg.data.root = data.clone();
    cfg.train.checkpoint_every = 5;
    let run = |name: &str, opts: FitOptions| fit(&cfg, &manifest, &tmp.path().join(name), &opts);
    let a = ok(run("a", FitOptions::default()))?;
    let b = ok(run("b", FitOptions::default()))?;
    let la = ok(read_log(&a.log))?;
    let lb = ok(read_log(&b.log))?;
    ensure!(la.len() == 20, "{} log lines", la.len());
    ensure!(la == lb, "identical runs diverge");

    let halted = ok(run("c", FitOptions { resume: false, halt_after: Some(12) }))?;
    ensure!(halted.halted && halted.steps == 12, "halt at {}", halted.steps);
    let resumed = ok(run("c", FitOptions { resume: true, halt_after: None }))?;
    let lc = ok(read_log(&resumed.log))?;
    ensure!(lc.len() == 20, "resumed log has {} lines", lc.len());
    let mut worst = 0.0f64;
    for (x, y) in la.iter().zip(&lc) {
        ensure!(x.step == y.step, "step mismatch");
        for (u, v) in [(x.gan, y.gan), (x.feature_matching, y.feature_matching), (x.ssim, y.ssim), (x.total, y.total)] {
            worst = worst.max((u - v).abs());
        }
    }
    ensure!(worst <= 1e-5, "resume differs by {worst:e}");
    Ok(format!("20-step logs bitwise equal; resume from step 10 after halt at 12, max diff {worst:.1e}"))
}

fn ablation_plumbing() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let batch = first_batch(tmp.path(), 4, 2);
    let mut cfg = small_config(2);
    cfg.extractor.enabled = false;
    let mut t = ok(Trainer::new(&cfg, 2))?;
    ensure!(t.generator().attention_sites().is_empty(), "disabled extractor left attention weights");
    let r = ok(t.train_step(&batch))?;
    ensure!(r.total.is_finite(), "non-finite loss without extractor");
    let none = ok(t.generator().forward(&batch.rgb, None))?;
    let tokens = randn(&[2, STUB_GRID * STUB_GRID, 8], 3.0, 9, DType::F32);
    let fake = FeatureBatch {
        tokens,
        grid: (STUB_GRID, STUB_GRID),
        backbone: "fake".into(),
    };
    let with = ok(t.generator().forward(&batch.rgb, Some(&fake)))?;
    ensure!(max_abs_diff(&none, &with) == 0.0, "output depends on features");

    let outputs: Vec<Tensor> = [AttentionPlacement::BottleneckOnly, AttentionPlacement::EncoderBottleneckDecoder]
        .into_iter()
        .map(|a| {
            let mut c = small_config(2);
            c.train.attention = a;
            let mut t = Trainer::new(&c, 2).unwrap();
            t.train_step(&batch).unwrap();
            t.predict(&batch.rgb).unwrap()
        })
        .collect();
    let diff = max_abs_diff(&outputs[0], &outputs[1]);
    ensure!(diff > 0.0, "B-only and EBD agree");
    Ok(format!("no-extractor output feature-independent; B-only vs EBD differ by {diff:.2e}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("architecture conformance", architecture),
        ("cross-attention oracle", attention_oracle),
        ("loss identities", loss_identities),
        ("gradient audit", gradient_audit),
        ("toy overfit", toy_overfit),
        ("scheduler curve", scheduler),
        ("metric suite", metric_suite),
        ("multi-scale discriminator", discriminator_pyramid),
        ("determinism and resume", determinism_and_resume),
        ("ablation plumbing", ablation_plumbing),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:2} FAIL  {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
