//! Adam and the alternating adversarial training loop.
//!
//! Each iteration samples an input batch and, independently, a target batch.
//! The discriminator takes one (or more) Adam steps on detached generator
//! output versus the target batch, then the generator takes one Adam step on
//! the weighted objective with the discriminator evaluated on its live
//! output. Every random stream is derived from the master seed and the
//! iteration number, so a resumed run continues exactly where an
//! uninterrupted one would be.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fibresr_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Patch;
use crate::error::{Error, Result};
use crate::forward_model::DEFAULT_N_F;
use crate::geometry::FibreLayout;
use crate::losses::{discriminator_objective, total_loss, LossBreakdown, LossWeights};
use crate::models::{
    Checkpoint, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Mode, NamedArray,
};
use crate::seed;

pub const LOG_HEADER: &str = "iteration,l_vec,l_adv,l_reg,total,d_loss";
pub const VALIDATION_HEADER: &str = "iteration,l_vec";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// First and second moments per parameter plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> AdamState {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        AdamState { m, v, t: 0 }
    }

    pub fn for_tensors(params: &[(String, Tensor)]) -> AdamState {
        AdamState::new(params.iter().map(|(_, t)| t.numel()))
    }
}

/// One bias-corrected Adam update of every parameter array in place.
pub fn adam_step(
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::LengthMismatch {
            context: "adam parameter arrays",
            expected: state.m.len(),
            found: params.len().max(grads.len()),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::LengthMismatch {
                context: "adam parameter length",
                expected: state.m[i].len(),
                found: if p.len() != state.m[i].len() {
                    p.len()
                } else {
                    g.len()
                },
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for k in 0..p.len() {
            let gk = g[k] as f64;
            let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
            let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let step = config.lr * (mk / c1) / ((vk / c2).sqrt() + config.epsilon);
            p[k] = (p[k] as f64 - step) as f32;
        }
    }
    Ok(())
}

/// Applies [`adam_step`] to graph parameters using their accumulated
/// gradients (a parameter without a gradient counts as zero gradient), then
/// clears the gradients.
pub fn adam_step_tensors(
    params: &[(String, Tensor)],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    let grads: Vec<Vec<f32>> = params
        .iter()
        .map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let mut datas: Vec<_> = params.iter().map(|(_, t)| t.data_mut()).collect();
    let mut slices: Vec<&mut [f32]> = datas.iter_mut().map(|d| d.as_mut_slice()).collect();
    let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
    adam_step(&mut slices, &grad_refs, state, config)?;
    drop(slices);
    drop(datas);
    for (_, t) in params {
        t.zero_grad();
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub d_steps_per_g_step: usize,
    /// Periodic checkpoint interval; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Validation interval; 0 validates only at the start and the end.
    pub validate_every: usize,
    pub seed: u64,
    pub n_f: usize,
    pub weights: LossWeights,
    /// Skip discriminator updates (it is still evaluated).
    pub freeze_discriminator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 54,
            max_iterations: 2000,
            d_steps_per_g_step: 1,
            checkpoint_every: 500,
            validate_every: 100,
            seed: 0,
            n_f: DEFAULT_N_F,
            weights: LossWeights::default(),
            freeze_discriminator: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.d_steps_per_g_step == 0 {
            return Err(Error::Config(
                "d_steps_per_g_step must be at least 1".into(),
            ));
        }
        if self.n_f == 0 {
            return Err(Error::Config("n_f must be positive".into()));
        }
        let w = self.weights;
        if [w.w_vec, w.w_adv, w.w_reg]
            .iter()
            .any(|x| !(x.is_finite() && *x >= 0.0))
        {
            return Err(Error::Config(format!(
                "loss weights must be non-negative: {w:?}"
            )));
        }
        Ok(())
    }
}

/// A stacked mini-batch with the provenance of each row.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub layouts: Vec<Arc<FibreLayout>>,
    pub provenance: Vec<String>,
}

impl Batch {
    pub fn from_patches(patches: &[&Patch]) -> Result<Batch> {
        let first = patches
            .first()
            .ok_or_else(|| Error::Data("cannot build an empty batch".into()))?;
        let (w, h) = first.image.dims();
        let mut data = Vec::with_capacity(patches.len() * w * h);
        let mut layouts = Vec::new();
        for p in patches {
            if p.image.dims() != (w, h) {
                return Err(Error::DimensionMismatch {
                    context: "batch patch",
                    expected: (w, h),
                    found: p.image.dims(),
                });
            }
            data.extend_from_slice(p.image.data());
            if let Some(l) = &p.layout {
                layouts.push(l.clone());
            }
        }
        if !layouts.is_empty() && layouts.len() != patches.len() {
            return Err(Error::Data(
                "either every patch of a batch has a layout or none".into(),
            ));
        }
        Ok(Batch {
            images: Tensor::new(data, &[patches.len(), 1, h, w])?,
            layouts,
            provenance: patches.iter().map(|p| p.provenance()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    fn layout_refs(&self) -> Result<Vec<&FibreLayout>> {
        if self.layouts.len() != self.len() {
            return Err(Error::Data("input batch patches need fibre layouts".into()));
        }
        Ok(self.layouts.iter().map(|l| l.as_ref()).collect())
    }
}

/// What one iteration's generator update could see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub iteration: usize,
    pub input_provenance: Vec<String>,
    pub target_provenance: Vec<String>,
    /// Whether target pixels are reachable from the generator objective.
    pub target_in_generator_graph: bool,
}

impl AuditRecord {
    /// Target patches read by the generator update that are pixel-aligned
    /// partners of its input batch.
    pub fn paired_reads(&self) -> Vec<&str> {
        if !self.target_in_generator_graph {
            return Vec::new();
        }
        let input: BTreeSet<&str> = self.input_provenance.iter().map(String::as_str).collect();
        self.target_provenance
            .iter()
            .map(String::as_str)
            .filter(|p| input.contains(p))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub losses: LossBreakdown,
    pub d_loss: f64,
}

impl IterationLog {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{}",
            self.iteration, l.l_vec, l.l_adv, l.l_reg, l.total, self.d_loss
        )
    }
}

fn finite(v: f64, iteration: usize, term: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericalAbort {
            iteration,
            term: term.to_string(),
        })
    }
}

/// Uniform draws with replacement.
fn sample_indices(rng: &mut ChaCha8Rng, pool: usize, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..pool)).collect()
}

/// Uniform draws with replacement, skipping patches whose provenance is in
/// `exclude`.
fn sample_unpaired(
    rng: &mut ChaCha8Rng,
    pool: &[Patch],
    n: usize,
    exclude: &BTreeSet<&str>,
) -> Result<Vec<usize>> {
    let allowed: Vec<usize> = (0..pool.len())
        .filter(|&i| !exclude.contains(pool[i].provenance().as_str()))
        .collect();
    if allowed.is_empty() {
        return Err(Error::Data(
            "every target patch is paired with the current input batch".into(),
        ));
    }
    Ok(sample_indices(rng, allowed.len(), n)
        .into_iter()
        .map(|i| allowed[i])
        .collect())
}

/// Input and target patch pools for [`Trainer::run`].
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    /// Input LR patches (with layouts).
    pub train: &'a [Patch],
    /// Validation LR patches (with layouts).
    pub validation: &'a [Patch],
    /// Target-domain HR patches.
    pub target: &'a [Patch],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub initial_validation: Option<f64>,
    pub final_validation: Option<f64>,
    pub best_validation: Option<f64>,
    pub best_iteration: Option<usize>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    /// Iterations whose generator update read a target patch paired with
    /// its input batch. Zero for a correct run.
    pub paired_reads: usize,
    /// Iterations where any target pixel reached the generator objective.
    pub target_reads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerMeta {
    iteration: usize,
    train: TrainConfig,
    generator: GeneratorConfig,
    discriminator: DiscriminatorConfig,
    adam_t_generator: u64,
    adam_t_discriminator: u64,
    initial_validation: Option<f64>,
    best_validation: Option<f64>,
    best_iteration: Option<usize>,
    /// True when these weights are usable for inference only.
    #[serde(default)]
    inference_only: bool,
}

/// Owns both networks, their optimiser state and the run bookkeeping.
pub struct Trainer {
    pub generator: Generator,
    pub discriminator: Discriminator,
    config: TrainConfig,
    g_adam: AdamState,
    d_adam: AdamState,
    iteration: usize,
    initial_validation: Option<f64>,
    best_validation: Option<f64>,
    best_iteration: Option<usize>,
    audit: Vec<AuditRecord>,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        generator: GeneratorConfig,
        discriminator: DiscriminatorConfig,
    ) -> Result<Trainer> {
        config.validate()?;
        let g = Generator::new(generator, &mut seed::rng(config.seed, "init-generator", 0))?;
        let d = Discriminator::new(
            discriminator,
            &mut seed::rng(config.seed, "init-discriminator", 0),
        )?;
        Ok(Trainer {
            g_adam: AdamState::for_tensors(&g.parameters()),
            d_adam: AdamState::for_tensors(&d.parameters()),
            generator: g,
            discriminator: d,
            config,
            iteration: 0,
            initial_validation: None,
            best_validation: None,
            best_iteration: None,
            audit: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Replaces the run-length settings (for continuing a resumed run).
    pub fn set_max_iterations(&mut self, n: usize) {
        self.config.max_iterations = n;
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn audit(&self) -> &[AuditRecord] {
        &self.audit
    }

    fn noise_rng(&self) -> Option<ChaCha8Rng> {
        Some(seed::rng(
            self.config.seed,
            "discriminator-noise",
            self.iteration as u64,
        ))
    }

    /// Draws the input and target batches of the current iteration. Target
    /// patches sharing provenance with an input patch are never drawn.
    pub fn sample_batches(&self, train: &[Patch], target: &[Patch]) -> Result<(Batch, Batch)> {
        if train.is_empty() || target.is_empty() {
            return Err(Error::Data(
                "training needs non-empty input and target pools".into(),
            ));
        }
        let it = self.iteration as u64;
        let b = self.config.batch_size;
        let lr_idx = sample_indices(
            &mut seed::rng(self.config.seed, "input-batch", it),
            train.len(),
            b,
        );
        let lr_refs: Vec<&Patch> = lr_idx.iter().map(|&i| &train[i]).collect();
        let lr = Batch::from_patches(&lr_refs)?;
        let exclude: BTreeSet<&str> = lr.provenance.iter().map(String::as_str).collect();
        let hr_idx = sample_unpaired(
            &mut seed::rng(self.config.seed, "target-batch", it),
            target,
            b * self.config.d_steps_per_g_step,
            &exclude,
        )?;
        let hr_refs: Vec<&Patch> = hr_idx.iter().map(|&i| &target[i]).collect();
        Ok((lr, Batch::from_patches(&hr_refs)?))
    }

    /// One discriminator phase and one generator step. `batch_hr` holds
    /// `d_steps_per_g_step` consecutive real batches of equal size.
    pub fn train_iteration(&mut self, batch_lr: &Batch, batch_hr: &Batch) -> Result<IterationLog> {
        let it = self.iteration;
        let layouts = batch_lr.layout_refs()?;
        let mut noise = self.noise_rng();

        // (1) generator forward
        let sr = self.generator.forward(&batch_lr.images, Mode::Train)?;

        // (2) discriminator on detached fakes and real patches
        let fake = sr.stop_gradient();
        let steps = self.config.d_steps_per_g_step;
        let real_n = batch_hr.len() / steps;
        if real_n == 0 || !batch_hr.len().is_multiple_of(steps) {
            return Err(Error::Data(format!(
                "target batch of {} cannot be split into {steps} discriminator steps",
                batch_hr.len()
            )));
        }
        let shape = batch_hr.images.shape().to_vec();
        let mut d_loss = 0.0;
        for s in 0..steps {
            let real = if steps == 1 {
                batch_hr.images.clone()
            } else {
                batch_hr.images.slice(0, s * real_n, (s + 1) * real_n)?
            };
            debug_assert_eq!(real.shape()[1..], shape[1..]);
            let ds_fake = self.discriminator.forward(&fake, noise.as_mut())?;
            let ds_real = self.discriminator.forward(&real, noise.as_mut())?;
            let obj = discriminator_objective(&ds_real, &ds_fake)?;
            d_loss = finite(obj.item() as f64, it, "d_loss")?;
            if !self.config.freeze_discriminator {
                obj.backward()?;
                adam_step_tensors(
                    &self.discriminator.parameters(),
                    &mut self.d_adam,
                    &self.config.adam(),
                )?;
            }
        }

        // (3) generator step against the live discriminator
        let adv_input = if self.config.weights.w_adv == 0.0 {
            // contributes no gradient either way; skip back-propagating through D
            sr.stop_gradient()
        } else {
            sr.clone()
        };
        let ds_sr = self.discriminator.forward(&adv_input, noise.as_mut())?;
        let terms = total_loss(
            &batch_lr.images,
            &sr,
            &layouts,
            self.config.n_f,
            &ds_sr,
            self.config.weights,
        )?;
        let losses = terms.breakdown();
        finite(losses.l_vec, it, "l_vec")?;
        finite(losses.l_adv, it, "l_adv")?;
        finite(losses.l_reg, it, "l_reg")?;
        finite(losses.total, it, "total")?;

        let reachable = terms.total.reachable_ids();
        self.audit.push(AuditRecord {
            iteration: it,
            input_provenance: batch_lr.provenance.clone(),
            target_provenance: batch_hr.provenance.clone(),
            target_in_generator_graph: reachable.contains(&batch_hr.images.id()),
        });

        terms.total.backward()?;
        adam_step_tensors(
            &self.generator.parameters(),
            &mut self.g_adam,
            &self.config.adam(),
        )?;
        // the generator objective also deposited gradients on D
        for (_, t) in self.discriminator.parameters() {
            t.zero_grad();
        }
        self.iteration += 1;
        Ok(IterationLog {
            iteration: it,
            losses,
            d_loss,
        })
    }

    /// Mean `l_vec` over `patches` with the generator in evaluation mode.
    pub fn validation_l_vec(&mut self, patches: &[Patch]) -> Result<f64> {
        if patches.is_empty() {
            return Err(Error::Data("empty validation set".into()));
        }
        let mut sum = 0.0;
        for chunk in patches.chunks(self.config.batch_size) {
            let refs: Vec<&Patch> = chunk.iter().collect();
            let batch = Batch::from_patches(&refs)?;
            let layouts = batch.layout_refs()?;
            let sr = self
                .generator
                .forward(&batch.images, Mode::Eval)?
                .stop_gradient();
            let ones = Tensor::full(&[chunk.len()], 1.0);
            let terms = total_loss(
                &batch.images,
                &sr,
                &layouts,
                self.config.n_f,
                &ones,
                self.config.weights,
            )?;
            sum += terms.l_vec.item() as f64 * chunk.len() as f64;
        }
        finite(
            sum / patches.len() as f64,
            self.iteration,
            "validation l_vec",
        )
    }

    /// Full training state: both networks, both optimisers and the loop
    /// bookkeeping.
    pub fn checkpoint(&mut self) -> Result<Checkpoint> {
        let meta = TrainerMeta {
            iteration: self.iteration,
            train: self.config.clone(),
            generator: self.generator.config().clone(),
            discriminator: self.discriminator.config().clone(),
            adam_t_generator: self.g_adam.t,
            adam_t_discriminator: self.d_adam.t,
            initial_validation: self.initial_validation,
            best_validation: self.best_validation,
            best_iteration: self.best_iteration,
            inference_only: false,
        };
        let mut ck = Checkpoint {
            arrays: Vec::new(),
            meta: serde_json::to_value(meta)?,
        };
        let g_params = self.generator.parameters();
        let d_params = self.discriminator.parameters();
        ck.push_section("generator", self.generator.state());
        ck.push_section("discriminator", self.discriminator.state());
        ck.push_section("adam_g.m", moments(&g_params, &self.g_adam.m));
        ck.push_section("adam_g.v", moments(&g_params, &self.g_adam.v));
        ck.push_section("adam_d.m", moments(&d_params, &self.d_adam.m));
        ck.push_section("adam_d.v", moments(&d_params, &self.d_adam.v));
        Ok(ck)
    }

    /// Rebuilds a trainer from [`Trainer::checkpoint`] output.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Trainer> {
        let meta: TrainerMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
        if meta.inference_only {
            return Err(Error::Data(
                "checkpoint holds inference weights only".into(),
            ));
        }
        let mut t = Trainer::new(meta.train, meta.generator, meta.discriminator)?;
        t.generator.load_state(&ck.section("generator"))?;
        t.discriminator.load_state(&ck.section("discriminator"))?;
        let g_params = t.generator.parameters();
        let d_params = t.discriminator.parameters();
        t.g_adam = AdamState {
            m: restore_moments(&g_params, &ck.section("adam_g.m"))?,
            v: restore_moments(&g_params, &ck.section("adam_g.v"))?,
            t: meta.adam_t_generator,
        };
        t.d_adam = AdamState {
            m: restore_moments(&d_params, &ck.section("adam_d.m"))?,
            v: restore_moments(&d_params, &ck.section("adam_d.v"))?,
            t: meta.adam_t_discriminator,
        };
        t.iteration = meta.iteration;
        t.initial_validation = meta.initial_validation;
        t.best_validation = meta.best_validation;
        t.best_iteration = meta.best_iteration;
        Ok(t)
    }

    fn save_checkpoint(&mut self, dir: &Path, name: &str) -> Result<PathBuf> {
        let stem = dir.join(name);
        self.checkpoint()?.save(&stem)?;
        Ok(stem)
    }

    fn validate_and_track(
        &mut self,
        data: &TrainData<'_>,
        dir: &Path,
        log: &mut impl Write,
    ) -> Result<f64> {
        let v = self.validation_l_vec(data.validation)?;
        writeln!(log, "{},{}", self.iteration, v).map_err(|e| Error::io(dir, e))?;
        log.flush().map_err(|e| Error::io(dir, e))?;
        if self.initial_validation.is_none() {
            self.initial_validation = Some(v);
        }
        if self.best_validation.is_none_or(|b| v < b) {
            self.best_validation = Some(v);
            self.best_iteration = Some(self.iteration);
            self.save_checkpoint(dir, "best")?;
        }
        Ok(v)
    }

    /// Trains until `max_iterations`, writing into `dir`:
    /// `log.csv` (one row per iteration, appended on resume),
    /// `validation.csv`, `final.{json,bin}`, `best.{json,bin}` and
    /// `iter_NNNNNN.{json,bin}` every `checkpoint_every` iterations.
    /// `on_iteration` sees every logged row.
    pub fn run(
        &mut self,
        data: TrainData<'_>,
        dir: impl AsRef<Path>,
        mut on_iteration: impl FnMut(&IterationLog),
    ) -> Result<TrainSummary> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some(p) = data.validation.first() {
            if p.image.dims()
                != (
                    self.discriminator.config().patch_size,
                    self.discriminator.config().patch_size,
                )
            {
                return Err(Error::Config(format!(
                    "patch size {:?} does not match the discriminator's {}",
                    p.image.dims(),
                    self.discriminator.config().patch_size
                )));
            }
        }
        let fresh = self.iteration == 0;
        let mut log = open_log(&dir.join("log.csv"), LOG_HEADER, fresh)?;
        let mut vlog = open_log(&dir.join("validation.csv"), VALIDATION_HEADER, fresh)?;

        let mut last_validation = None;
        if fresh && self.config.max_iterations > 0 && !data.validation.is_empty() {
            last_validation = Some(self.validate_and_track(&data, dir, &mut vlog)?);
        }
        while self.iteration < self.config.max_iterations {
            let (lr, hr) = self.sample_batches(data.train, data.target)?;
            let row = self.train_iteration(&lr, &hr)?;
            writeln!(log, "{}", row.csv_row()).map_err(|e| Error::io(dir, e))?;
            on_iteration(&row);
            let done = self.iteration == self.config.max_iterations;
            let every = self.config.validate_every;
            if !data.validation.is_empty()
                && (done || (every > 0 && self.iteration.is_multiple_of(every)))
            {
                log.flush().map_err(|e| Error::io(dir, e))?;
                last_validation = Some(self.validate_and_track(&data, dir, &mut vlog)?);
            }
            let ck = self.config.checkpoint_every;
            if ck > 0 && self.iteration.is_multiple_of(ck) {
                self.save_checkpoint(dir, &format!("iter_{:06}", self.iteration))?;
            }
        }
        log.flush().map_err(|e| Error::io(dir, e))?;
        let final_checkpoint = self.save_checkpoint(dir, "final")?;
        let best_checkpoint = dir.join("best");
        let paired_reads = self
            .audit
            .iter()
            .filter(|a| !a.paired_reads().is_empty())
            .count();
        let target_reads = self
            .audit
            .iter()
            .filter(|a| a.target_in_generator_graph)
            .count();
        Ok(TrainSummary {
            iterations: self.iteration,
            initial_validation: self.initial_validation,
            final_validation: last_validation,
            best_validation: self.best_validation,
            best_iteration: self.best_iteration,
            final_checkpoint,
            best_checkpoint: self.best_validation.map(|_| best_checkpoint),
            paired_reads,
            target_reads,
        })
    }
}

fn open_log(path: &Path, header: &str, fresh: bool) -> Result<BufWriter<File>> {
    let file = if fresh {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
        f
    } else {
        OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?
    };
    Ok(BufWriter::new(file))
}

fn moments(params: &[(String, Tensor)], m: &[Vec<f32>]) -> Vec<NamedArray> {
    params
        .iter()
        .zip(m)
        .map(|((name, t), data)| NamedArray {
            name: name.clone(),
            shape: t.shape().to_vec(),
            data: data.clone(),
        })
        .collect()
}

fn restore_moments(params: &[(String, Tensor)], arrays: &[NamedArray]) -> Result<Vec<Vec<f32>>> {
    params
        .iter()
        .map(|(name, t)| {
            let a = arrays.iter().find(|a| &a.name == name).ok_or_else(|| {
                Error::Data(format!("checkpoint lacks optimiser state for {name}"))
            })?;
            if a.shape != t.shape() {
                return Err(Error::Data(format!(
                    "optimiser state {name}: shape {:?}, expected {:?}",
                    a.shape,
                    t.shape()
                )));
            }
            Ok(a.data.clone())
        })
        .collect()
}

/// Loads the generator from any checkpoint written by the trainer.
pub fn load_generator(stem: impl AsRef<Path>) -> Result<Generator> {
    let ck = Checkpoint::load(stem)?;
    let config: GeneratorConfig = ck
        .meta
        .get("generator")
        .cloned()
        .ok_or_else(|| Error::Data("checkpoint has no generator configuration".into()))
        .and_then(|v| {
            serde_json::from_value(v)
                .map_err(|e| Error::Data(format!("generator configuration: {e}")))
        })?;
    let mut g = Generator::new(config, &mut seed::rng(0, "init-generator", 0))?;
    g.load_state(&ck.section("generator"))?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut p = [0.0f32];
        let mut st = AdamState::new([1]);
        let cfg = AdamConfig::default();
        adam_step(&mut [&mut p[..]], &[&[0.1]], &mut st, &cfg).unwrap();
        let step = -(p[0] as f64);
        assert!((step - 1e-4 * 0.1 / (0.1 + 1e-8)).abs() < 1e-11);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![0.3f32, -1.0];
        let mut st = AdamState::new([2]);
        for _ in 0..3 {
            adam_step(
                &mut [&mut p[..]],
                &[&[0.0, 0.0]],
                &mut st,
                &AdamConfig::default(),
            )
            .unwrap();
        }
        assert_eq!(p, vec![0.3, -1.0]);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = [0.0f32; 2];
        let mut st = AdamState::new([2]);
        assert!(adam_step(
            &mut [&mut p[..]],
            &[&[0.0]],
            &mut st,
            &AdamConfig::default()
        )
        .is_err());
        assert!(TrainConfig {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            beta2: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn audit_flags_only_graph_reads() {
        let mut a = AuditRecord {
            iteration: 0,
            input_provenance: vec!["f@0,0".into()],
            target_provenance: vec!["f@0,0".into(), "g@0,0".into()],
            target_in_generator_graph: false,
        };
        assert!(a.paired_reads().is_empty());
        a.target_in_generator_graph = true;
        assert_eq!(a.paired_reads(), vec!["f@0,0"]);
    }
}
