//! Alternating updates: the three discriminators on detached generator output, then the
//! generator on the combined objective. Also checkpointed fitting and inference.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    discriminator_blob, discriminator_optim_blob, latest_checkpoint, read_checkpoint_blob,
    read_manifest, resolve_checkpoint, save_checkpoint, step_dir_name, CheckpointManifest,
    OptimizerCounters, FORMAT_VERSION, GENERATOR_BLOB, GENERATOR_OPTIM_BLOB,
};
use crate::config::RunConfig;
use crate::data::{iter_batches_with, load_rgb, Batch, DatasetManifest, Image, PairLoader, Split};
use crate::discriminator::{multiscale_pyramid, Conditioning, MultiScaleDiscriminator, NUM_SCALES};
use crate::error::{Error, Result};
use crate::extractor::Extractor;
use crate::generator::Generator;
use crate::losses::{
    feature_matching_loss, gan_loss, scalar, ssim_loss, total_generator_loss, LossBreakdown, Role,
};
use crate::optim::Adam;
use crate::schedule::CosineWarmup;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(rename = "L_GAN")]
    pub gan: f64,
    #[serde(rename = "L_FM")]
    pub feature_matching: f64,
    #[serde(rename = "L_SSIM")]
    pub ssim: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
    #[serde(rename = "lr_G")]
    pub lr_g: f64,
    #[serde(rename = "lr_D")]
    pub lr_d: f64,
}

pub struct Trainer {
    config: RunConfig,
    extractor: Extractor,
    generator: Generator,
    discriminators: MultiScaleDiscriminator,
    opt_g: Adam,
    opt_d: Vec<Adam>,
    sched_g: CosineWarmup,
    sched_d: CosineWarmup,
    total_steps: u64,
    step: u64,
    last: Option<LossBreakdown>,
}

impl Trainer {
    pub fn new(config: &RunConfig, total_steps: u64) -> Result<Self> {
        config.validate()?;
        let extractor = Extractor::from_spec(&config.extractor)?;
        Self::with_extractor(config, total_steps, extractor)
    }

    pub fn with_extractor(config: &RunConfig, total_steps: u64, extractor: Extractor) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let generator = Generator::new(&config.generator_spec(), extractor.token_dim(), seed, DType::F32)?;
        let discriminators =
            MultiScaleDiscriminator::new(&config.discriminator, config.resize(), seed, DType::F32)?;
        let opt_g = Adam::new(generator.params(), config.train.adam)?;
        let opt_d = discriminators
            .nets()
            .iter()
            .map(|d| Adam::new(d.params(), config.train.adam))
            .collect::<Result<Vec<_>>>()?;
        let (sched_g, sched_d) = config.train.schedules(total_steps)?;
        Ok(Self {
            config: config.clone(),
            extractor,
            generator,
            discriminators,
            opt_g,
            opt_d,
            sched_g,
            sched_d,
            total_steps,
            step: 0,
            last: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminators(&self) -> &MultiScaleDiscriminator {
        &self.discriminators
    }

    pub fn generator_optimizer(&self) -> &Adam {
        &self.opt_g
    }

    pub fn discriminator_optimizers(&self) -> &[Adam] {
        &self.opt_d
    }

    pub fn schedules(&self) -> (&CosineWarmup, &CosineWarmup) {
        (&self.sched_g, &self.sched_d)
    }

    pub fn last_losses(&self) -> Option<LossBreakdown> {
        self.last
    }

    /// Inference: extract features and run the generator.
    pub fn predict(&self, rgb: &Tensor) -> Result<Tensor> {
        let features = self.extractor.extract(rgb)?;
        Ok(self.generator.forward(rgb, features.as_ref())?.detach())
    }

    fn conditions(&self, rgb: &Tensor) -> Result<Option<Vec<Tensor>>> {
        match self.discriminators.spec().conditioning {
            Conditioning::Unconditional => Ok(None),
            Conditioning::RgbConcat => Ok(Some(multiscale_pyramid(rgb)?)),
        }
    }

    /// Per-scale discriminator losses on real targets and the given generator output.
    pub fn discriminator_losses(&self, batch: &Batch, fake: &Tensor) -> Result<Vec<Tensor>> {
        let mode = self.config.loss.gan_mode;
        let real = multiscale_pyramid(&batch.target)?;
        let fake = multiscale_pyramid(&fake.detach())?;
        let cond = self.conditions(&batch.rgb)?;
        (0..NUM_SCALES)
            .map(|k| {
                let c = cond.as_ref().map(|c| &c[k]);
                let r = self.discriminators.score(k, &real[k], c)?;
                let f = self.discriminators.score(k, &fake[k], c)?;
                gan_loss(Some(&r.scores), &f.scores, Role::Discriminator, mode)
            })
            .collect()
    }

    /// The generator objective for output `fake` of `batch`, with the current discriminators.
    pub fn generator_objective(&self, batch: &Batch, fake: &Tensor) -> Result<(Tensor, LossBreakdown)> {
        let mode = self.config.loss.gan_mode;
        let real = multiscale_pyramid(&batch.target)?;
        let fakes = multiscale_pyramid(fake)?;
        let cond = self.conditions(&batch.rgb)?;
        let mut gan_terms = Vec::with_capacity(NUM_SCALES);
        let mut real_feats = Vec::with_capacity(NUM_SCALES);
        let mut fake_feats = Vec::with_capacity(NUM_SCALES);
        for k in 0..NUM_SCALES {
            let c = cond.as_ref().map(|c| &c[k]);
            let r = self.discriminators.score(k, &real[k], c)?;
            let f = self.discriminators.score(k, &fakes[k], c)?;
            gan_terms.push(gan_loss(None, &f.scores, Role::Generator, mode)?);
            real_feats.push(r.features);
            fake_feats.push(f.features);
        }
        let fm = feature_matching_loss(&real_feats, &fake_feats)?;
        let ssim = ssim_loss(&batch.target, fake, &self.config.loss.ssim_params())?;
        total_generator_loss(&gan_terms, &fm, &ssim, &self.config.loss.weights())
    }

    /// One iteration: features once, discriminator updates, then the generator update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let step = self.step + 1;
        if step > self.total_steps {
            return Err(Error::Config(format!(
                "step {step} exceeds the configured {} steps",
                self.total_steps
            )));
        }
        let lr_g = self.sched_g.lr_at(step)?;
        let lr_d = self.sched_d.lr_at(step)?;

        let features = self.extractor.extract(&batch.rgb)?;
        let fake = self.generator.forward(&batch.rgb, features.as_ref())?;

        let d_losses = self.discriminator_losses(batch, &fake)?;
        for (k, loss) in d_losses.iter().enumerate() {
            if !scalar(loss)?.is_finite() {
                return Err(Error::NonFinite(format!("L_D{}", k + 1)));
            }
            let grads = loss.backward()?;
            self.opt_d[k].step(&grads, lr_d)?;
        }

        let (total, losses) = self.generator_objective(batch, &fake)?;
        let grads = total.backward()?;
        self.opt_g.step(&grads, lr_g)?;

        self.step = step;
        self.last = Some(losses);
        Ok(StepRecord {
            step,
            gan: losses.gan,
            feature_matching: losses.feature_matching,
            ssim: losses.ssim,
            total: losses.total,
            lr_g,
            lr_d,
        })
    }

    pub fn manifest(&self) -> CheckpointManifest {
        let counters = |o: &Adam| OptimizerCounters {
            steps: o.step_count(),
            lr: o.learning_rate(),
        };
        let mut blobs = vec![GENERATOR_BLOB.to_string(), GENERATOR_OPTIM_BLOB.to_string()];
        for k in 0..NUM_SCALES {
            blobs.push(discriminator_blob(k));
            blobs.push(discriminator_optim_blob(k));
        }
        let (h, w) = self.config.resize();
        CheckpointManifest {
            format: FORMAT_VERSION,
            step: self.step,
            total_steps: self.total_steps,
            seed: self.config.train.seed,
            attention: self.config.train.attention.label().to_string(),
            extractor: self.extractor.id().to_string(),
            token_dim: self.extractor.token_dim(),
            image_size: [h, w],
            config: self.config.clone(),
            generator_optimizer: counters(&self.opt_g),
            discriminator_optimizers: self.opt_d.iter().map(counters).collect(),
            metrics: self.last,
            blobs,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut blobs = vec![
            (GENERATOR_BLOB.to_string(), self.generator.params().to_blob()?),
            (GENERATOR_OPTIM_BLOB.to_string(), self.opt_g.state_blob()?),
        ];
        for (k, (net, opt)) in self.discriminators.nets().iter().zip(&self.opt_d).enumerate() {
            blobs.push((discriminator_blob(k), net.params().to_blob()?));
            blobs.push((discriminator_optim_blob(k), opt.state_blob()?));
        }
        save_checkpoint(dir, &self.manifest(), &blobs)
    }

    /// Rebuilds a trainer exactly as saved, ready to continue.
    pub fn from_checkpoint(dir: &Path) -> Result<Self> {
        let m = read_manifest(dir)?;
        let mut t = Self::new(&m.config, m.total_steps)?;
        t.restore(dir, &m)?;
        Ok(t)
    }

    fn restore(&mut self, dir: &Path, m: &CheckpointManifest) -> Result<()> {
        if m.discriminator_optimizers.len() != NUM_SCALES {
            return Err(Error::Checkpoint("expected three discriminator optimizers".into()));
        }
        self.generator.params().load_blob(&read_checkpoint_blob(dir, GENERATOR_BLOB)?)?;
        let g = m.generator_optimizer;
        self.opt_g
            .load_state(&read_checkpoint_blob(dir, GENERATOR_OPTIM_BLOB)?, g.steps, g.lr)?;
        for k in 0..NUM_SCALES {
            self.discriminators.nets()[k]
                .params()
                .load_blob(&read_checkpoint_blob(dir, &discriminator_blob(k))?)?;
            let c = m.discriminator_optimizers[k];
            self.opt_d[k].load_state(
                &read_checkpoint_blob(dir, &discriminator_optim_blob(k))?,
                c.steps,
                c.lr,
            )?;
        }
        self.step = m.step;
        self.last = m.metrics;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FitOptions {
    /// Continue from the newest checkpoint in the output directory.
    pub resume: bool,
    /// Stop, without saving, once this step completes (simulates an interrupted run).
    pub halt_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    /// Completed steps.
    pub steps: u64,
    pub total_steps: u64,
    pub log: PathBuf,
    /// Newest checkpoint written or resumed from.
    pub checkpoint: Option<PathBuf>,
    pub last: Option<StepRecord>,
    pub halted: bool,
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?,
        );
    }
    Ok(out)
}

fn write_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains on the train split of `manifest`, logging every step to `<out>/train_log.jsonl` and
/// checkpointing under `<out>/checkpoints/`.
pub fn fit(
    config: &RunConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
    options: &FitOptions,
) -> Result<FitSummary> {
    config.validate()?;
    let n = manifest.count(Split::Train);
    if n == 0 {
        return Err(Error::Dataset(format!(
            "no training pairs under {}",
            manifest.root.display()
        )));
    }
    let per_epoch = n.div_ceil(config.train.batch_size);
    let total = config.train.total_steps(per_epoch);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_root = out_dir.join(CHECKPOINT_DIR);
    let log_path = out_dir.join(LOG_FILE);

    let existing = latest_checkpoint(&ckpt_root)?;
    let (mut trainer, mut last_ckpt) = match (&existing, options.resume) {
        (Some(dir), true) => {
            let m = read_manifest(dir)?;
            if m.config != *config || m.total_steps != total {
                return Err(Error::Checkpoint(format!(
                    "{} was written with a different configuration",
                    dir.display()
                )));
            }
            let mut t = Trainer::new(config, total)?;
            t.restore(dir, &m)?;
            log::info!("resuming from {} at step {}", dir.display(), t.step());
            (t, Some(dir.clone()))
        }
        (Some(dir), false) => {
            return Err(Error::Checkpoint(format!(
                "{} already holds checkpoints (newest {}); resume or choose another directory",
                out_dir.display(),
                dir.display()
            )))
        }
        (None, _) => (Trainer::new(config, total)?, None),
    };

    let mut kept = if trainer.step() > 0 && log_path.exists() {
        read_log(&log_path)?
    } else {
        Vec::new()
    };
    kept.retain(|r| r.step <= trainer.step());
    write_log(&log_path, &kept)?;
    let mut last = kept.last().copied();
    let file = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log_out = BufWriter::new(file);

    let mut loader = PairLoader::new(config.resize(), config.data.cache);
    let every = config.train.checkpoint_every;
    while trainer.step() < total {
        let epoch = trainer.step() / per_epoch as u64;
        let skip = (trainer.step() % per_epoch as u64) as usize;
        let batches = iter_batches_with(
            manifest,
            config.batch_spec(),
            Split::Train,
            epoch,
            &mut loader,
            config.data.augment,
            DType::F32,
        )?;
        for batch in batches.skip(skip) {
            let batch = batch?;
            let record = match trainer.train_step(&batch) {
                Ok(r) => r,
                Err(Error::NonFinite(term)) => {
                    return Err(Error::Diverged {
                        step: trainer.step() + 1,
                        term,
                        last_checkpoint: last_ckpt,
                    })
                }
                Err(e) => return Err(e),
            };
            let line = serde_json::to_string(&record).expect("records serialize");
            writeln!(log_out, "{line}").map_err(|e| Error::io(&log_path, e))?;
            log_out.flush().map_err(|e| Error::io(&log_path, e))?;
            last = Some(record);
            let step = record.step;
            if step == total || (every > 0 && step % every == 0) {
                let dir = ckpt_root.join(step_dir_name(step));
                trainer.save(&dir)?;
                last_ckpt = Some(dir);
            }
            if options.halt_after == Some(step) {
                return Ok(FitSummary {
                    steps: step,
                    total_steps: total,
                    log: log_path,
                    checkpoint: last_ckpt,
                    last,
                    halted: true,
                });
            }
            if step == total {
                break;
            }
        }
    }
    Ok(FitSummary {
        steps: trainer.step(),
        total_steps: total,
        log: log_path,
        checkpoint: last_ckpt,
        last,
        halted: false,
    })
}

/// Loads a generator (and its extractor) from a checkpoint for inference.
pub struct Translator {
    generator: Generator,
    extractor: Extractor,
    resize: (usize, usize),
    checkpoint: PathBuf,
}

impl Translator {
    /// `path` may be a checkpoint directory or a run directory (newest checkpoint is used).
    pub fn load(path: &Path) -> Result<Self> {
        let dir = resolve_checkpoint(path)?;
        let m = read_manifest(&dir)?;
        let extractor = Extractor::from_spec(&m.config.extractor)?;
        if extractor.token_dim() != m.token_dim {
            return Err(Error::Checkpoint(format!(
                "extractor token width {:?} does not match the checkpoint's {:?}",
                extractor.token_dim(),
                m.token_dim
            )));
        }
        let generator = Generator::new(&m.config.generator_spec(), m.token_dim, m.seed, DType::F32)?;
        generator.params().load_blob(&read_checkpoint_blob(&dir, GENERATOR_BLOB)?)?;
        Ok(Self {
            generator,
            extractor,
            resize: m.config.resize(),
            checkpoint: dir,
        })
    }

    pub fn checkpoint(&self) -> &Path {
        &self.checkpoint
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resize
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn translate_tensor(&self, rgb: &Tensor) -> Result<Tensor> {
        let features = self.extractor.extract(rgb)?;
        Ok(self.generator.forward(rgb, features.as_ref())?)
    }

    /// Translates one image file, resized to the model resolution.
    pub fn translate_image(&self, path: &Path) -> Result<Image> {
        let rgb = load_rgb(path, self.resize)?;
        let out = self.translate_tensor(&rgb.to_tensor(DType::F32)?)?;
        Image::from_tensor(&out, 0)
    }

    /// Writes `<out_dir>/<input stem>.png` as an 8-bit single-channel image.
    pub fn translate_file(&self, input: &Path, out_dir: &Path) -> Result<PathBuf> {
        let stem = input
            .file_stem()
            .ok_or_else(|| Error::Dataset(format!("bad input path {}", input.display())))?;
        let out = out_dir.join(stem).with_extension("png");
        self.translate_image(input)?.save_png(&out)?;
        Ok(out)
    }

    /// Translates every input, collecting per-file outcomes. Inputs sharing a stem are rejected.
    pub fn translate_files(&self, inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<(PathBuf, Result<PathBuf>)>> {
        let mut stems = std::collections::BTreeSet::new();
        for p in inputs {
            let stem = p.file_stem().map(|s| s.to_owned()).unwrap_or_default();
            if !stems.insert(stem) {
                return Err(Error::Dataset(format!(
                    "two inputs would both be written as {}.png",
                    p.file_stem().unwrap_or_default().to_string_lossy()
                )));
            }
        }
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        Ok(inputs
            .iter()
            .map(|p| (p.clone(), self.translate_file(p, out_dir)))
            .collect())
    }
}

/// Image files (png, jpg, jpeg) directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_file() && matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
