//! Training engine: adaptive-moment descent on the combined objective,
//! deterministic batch scheduling, checkpoint/resume with bit-exact
//! continuation, and the staged ablation grid.
//!
//! Determinism contract: the batch order is a pure function of
//! (master seed, epoch), so a resumed run needs no RNG stream position
//! — restoring weights, moments and the step counter reproduces the
//! uninterrupted run exactly.

use std::path::Path;

use autograd::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::Scope;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_network, MetricsReport};
use crate::image_data::downsample_mask_max;
use crate::network::{
    image_to_batch, mask_to_batch, config_diff, Checkpoint, MomentState, NetworkConfig, RngState,
    SlbrNetwork,
};
use crate::objectives::{
    total_loss_t, LossBreakdown, LossInputs, LossWeights, PerceptualExtractor,
};
use crate::synth::{stream_rng, Sample};

/// Denominator stabilizer of the adaptive-moment update.
pub const ADAM_EPS: f64 = 1e-8;

/// Stream-index offset separating epoch-shuffle RNG streams from the
/// dataset-synthesis streams that share the master seed.
const SCHEDULE_STREAM_BASE: u64 = 1 << 32;

/// Full training-run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub image_size: usize,
    /// Mandatory: the run length. There is no default step count.
    pub max_steps: u64,
    pub seed: u64,
    /// Save an intermediate checkpoint every this many steps when a
    /// checkpoint directory is given; 0 saves only the final state.
    pub checkpoint_every: u64,
    /// Multiply the learning rate by `lr_decay_factor` every this many
    /// steps; 0 keeps it constant.
    pub lr_decay_every: u64,
    pub lr_decay_factor: f64,
    /// Scale each step's gradients so their global L2 norm does not
    /// exceed this; 0 disables clipping.
    pub clip_grad_norm: f64,
    pub weights: LossWeights,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 8,
            beta1: 0.5,
            beta2: 0.999,
            image_size: 256,
            max_steps: 0,
            seed: 0,
            checkpoint_every: 0,
            lr_decay_every: 0,
            lr_decay_factor: 0.5,
            clip_grad_norm: 0.0,
            weights: LossWeights::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: 64x64 images, toy network, small batches.
    pub fn toy() -> Self {
        TrainConfig {
            image_size: 64,
            batch_size: 4,
            network: NetworkConfig::toy(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // lr = 0 is deliberately legal: it is the degenerate-optimizer
        // check (weights must stay put), not a usable training rate.
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("lr must be finite and nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.image_size < 32 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a multiple of 16 and at least 32, got {}",
                self.image_size
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be set (no default)".into()));
        }
        if !(0.0 < self.lr_decay_factor && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.clip_grad_norm < 0.0 || !self.clip_grad_norm.is_finite() {
            return Err(Error::Config(
                "clip_grad_norm must be finite and nonnegative".into(),
            ));
        }
        self.weights.validate()?;
        self.network.validate()
    }

    /// Learning rate in force at a given step under the decay schedule.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.lr_decay_every == 0 {
            self.lr
        } else {
            self.lr * self.lr_decay_factor.powi((step / self.lr_decay_every) as i32)
        }
    }
}

/// One loss-history entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub losses: LossBreakdown,
}

/// Final state and per-step losses of a completed run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRow>,
}

/// Sample visit order for one epoch: a seeded Fisher-Yates shuffle,
/// reseeded per epoch from the master seed.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, SCHEDULE_STREAM_BASE.wrapping_add(epoch));
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Writes the loss history as CSV with a fixed column set. Floats use
/// the shortest round-trip representation, so identical histories give
/// byte-identical files.
pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| {
        Error::Config(format!("cannot write history {}: {e}", path.display()))
    })?;
    w.write_record(["step", "total", "l1_coarse", "l1_refined", "vgg", "mask", "mask_refined"])
        .map_err(|e| Error::Config(format!("history write: {e}")))?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.losses.total.to_string(),
            r.losses.l1_coarse.to_string(),
            r.losses.l1_refined.to_string(),
            r.losses.vgg.to_string(),
            r.losses.mask.to_string(),
            r.losses.mask_refined.to_string(),
        ])
        .map_err(|e| Error::Config(format!("history write: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn check_dataset(config: &TrainConfig, samples: &[Sample]) -> Result<()> {
    if samples.len() < config.batch_size {
        return Err(Error::InvalidInput(format!(
            "dataset has {} samples, batch size is {}",
            samples.len(),
            config.batch_size
        )));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.background.h() != config.image_size || s.background.w() != config.image_size {
            return Err(Error::InvalidInput(format!(
                "sample {i} is {}x{}, config expects {}",
                s.background.h(),
                s.background.w(),
                config.image_size
            )));
        }
    }
    Ok(())
}

/// Gradient scale factor enforcing a global L2-norm bound; 1.0 when
/// the bound is 0 (clipping off) or already satisfied.
fn clip_scale(grads: &[Option<Tensor>], bound: f64) -> f64 {
    if bound <= 0.0 {
        return 1.0;
    }
    let sq: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > bound {
        bound / norm
    } else {
        1.0
    }
}

/// Rejects non-finite forward outputs before the loss is assembled.
/// A diverged run poisons the predictions first (the mask losses
/// cannot even be evaluated on NaN), so this is the primary abort
/// site; the per-term check after the loss covers overflow of finite
/// outputs inside the objective itself.
fn audit_outputs(tape: &Tape, inputs: &LossInputs, step_index: u64) -> Result<()> {
    let mut bad = Vec::new();
    let mut check = |name: String, var: autograd::Var| {
        let v = tape.value(var);
        let n = v.iter().filter(|x| !x.is_finite()).count();
        if n > 0 {
            bad.push(format!("{name} {n}/{}", v.len()));
        }
    };
    check("i_coarse".into(), inputs.i_coarse);
    check("i_refined".into(), inputs.i_refined);
    for (s, pair) in inputs.mask_pairs.iter().enumerate() {
        check(format!("m_hat[{s}]"), pair.m_hat);
        check(format!("m_hat_prime[{s}]"), pair.m_hat_prime);
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::NumericAbort {
            step: step_index as usize,
            reason: format!("non-finite forward outputs ({})", bad.join(", ")),
        })
    }
}

struct Trainer {
    net: SlbrNetwork,
    store: ParamStore,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Completed adaptive-moment updates (bias-correction exponent).
    t_adam: u64,
}

impl Trainer {
    fn fresh(config: &TrainConfig) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = SlbrNetwork::new(
            &mut Scope {
                store: &mut store,
                rng: &mut rng,
            },
            &config.network,
        );
        let m = store.iter().map(|(_, _, v)| Tensor::zeros(v.raw_dim())).collect();
        let v = store.iter().map(|(_, _, val)| Tensor::zeros(val.raw_dim())).collect();
        Trainer {
            net,
            store,
            m,
            v,
            t_adam: 0,
        }
    }

    fn from_checkpoint(config: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut trainer = Trainer::fresh(config);
        ckpt.apply_to(&mut trainer.store)?;
        let moments = ckpt.moments.as_ref().ok_or_else(|| {
            Error::Incompatible("checkpoint has no optimizer state to resume from".into())
        })?;
        if moments.m.len() != trainer.store.len() {
            return Err(Error::Incompatible(format!(
                "optimizer state covers {} parameters, model has {}",
                moments.m.len(),
                trainer.store.len()
            )));
        }
        trainer.m = moments.m.clone();
        trainer.v = moments.v.clone();
        trainer.t_adam = moments.t;
        Ok(trainer)
    }

    fn snapshot(&self, config: &TrainConfig, step: u64) -> Checkpoint {
        let mut ckpt = Checkpoint::capture(&config.network, &self.store, step);
        ckpt.moments = Some(MomentState {
            m: self.m.clone(),
            v: self.v.clone(),
            t: self.t_adam,
        });
        ckpt.rng = Some(RngState {
            seed: config.seed,
            word_pos_hi: 0,
            word_pos_lo: 0,
        });
        ckpt.train_config = Some(serde_json::to_value(config).expect("config serializes"));
        ckpt
    }

    /// One optimization step on the given batch; returns the loss terms
    /// measured before the update.
    fn step(
        &mut self,
        config: &TrainConfig,
        samples: &[Sample],
        batch: &[usize],
        extractor: &PerceptualExtractor,
        step_index: u64,
    ) -> Result<LossBreakdown> {
        let tape = Tape::new();
        let ctx = crate::blocks::Ctx {
            tape: &tape,
            store: &self.store,
        };
        let images: Vec<&crate::image_data::Image> =
            batch.iter().map(|&i| &samples[i].watermarked).collect();
        let targets: Vec<&crate::image_data::Image> =
            batch.iter().map(|&i| &samples[i].background).collect();
        let j = tape.input(image_to_batch(&images));
        let out = self.net.forward_t(ctx, j);

        let mask_targets = [4usize, 2, 1]
            .into_iter()
            .map(|factor| {
                let pooled: Vec<crate::image_data::Mask> = batch
                    .iter()
                    .map(|&i| downsample_mask_max(&samples[i].mask, factor))
                    .collect();
                let refs: Vec<&crate::image_data::Mask> = pooled.iter().collect();
                tape.input(mask_to_batch(&refs))
            })
            .collect();
        let inputs = LossInputs {
            i_coarse: out.coarse.image,
            i_refined: out.refined,
            target: tape.input(image_to_batch(&targets)),
            mask_pairs: out.coarse.mask_pairs.clone(),
            mask_targets,
        };
        audit_outputs(&tape, &inputs, step_index)?;
        let loss = total_loss_t(&tape, &inputs, extractor, &config.weights);
        let breakdown = loss.breakdown(&tape);
        if !breakdown.is_finite() {
            return Err(Error::NumericAbort {
                step: step_index as usize,
                reason: format!(
                    "non-finite loss: total {} (l1_coarse {}, l1_refined {}, vgg {}, mask {}, mask_refined {})",
                    breakdown.total,
                    breakdown.l1_coarse,
                    breakdown.l1_refined,
                    breakdown.vgg,
                    breakdown.mask,
                    breakdown.mask_refined
                ),
            });
        }

        tape.backward(loss.total);
        let grads = tape.param_grads(&self.store);
        self.adam_update(config, &grads, step_index);
        Ok(breakdown)
    }

    fn adam_update(&mut self, config: &TrainConfig, grads: &[Option<Tensor>], step_index: u64) {
        let scale = clip_scale(grads, config.clip_grad_norm);
        self.t_adam += 1;
        let bc1 = 1.0 - config.beta1.powi(self.t_adam as i32);
        let bc2 = 1.0 - config.beta2.powi(self.t_adam as i32);
        let lr = config.lr_at(step_index);
        let ids: Vec<_> = self.store.ids().collect();
        for (idx, id) in ids.into_iter().enumerate() {
            let zero;
            let g = match &grads[idx] {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(self.store.value(id).raw_dim());
                    &zero
                }
            };
            let (b1, b2) = (config.beta1, config.beta2);
            ndarray::Zip::from(&mut self.m[idx])
                .and(g)
                .for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * (scale * g));
            ndarray::Zip::from(&mut self.v[idx])
                .and(g)
                .for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * (scale * g) * (scale * g));
            ndarray::Zip::from(self.store.value_mut(id))
                .and(&self.m[idx])
                .and(&self.v[idx])
                .for_each(|w, &m, &v| {
                    *w -= lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
                });
        }
    }
}

fn run_steps(
    mut trainer: Trainer,
    config: &TrainConfig,
    samples: &[Sample],
    extractor: &PerceptualExtractor,
    start_step: u64,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let batches_per_epoch = (samples.len() / config.batch_size) as u64;
    let mut history = Vec::with_capacity((config.max_steps - start_step) as usize);
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();
    for step in start_step..config.max_steps {
        let epoch = step / batches_per_epoch;
        if epoch != order_epoch {
            order = epoch_order(config.seed, epoch, samples.len());
            order_epoch = epoch;
        }
        let slot = (step % batches_per_epoch) as usize;
        let batch = &order[slot * config.batch_size..(slot + 1) * config.batch_size];
        let losses = trainer.step(config, samples, batch, extractor, step)?;
        history.push(HistoryRow { step, losses });
        let done = step + 1;
        if let Some(dir) = ckpt_dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
                let path = dir.join(format!("ckpt_{done:06}.ckpt"));
                trainer.snapshot(config, done).save(&path)?;
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: trainer.snapshot(config, config.max_steps),
        history,
    })
}

/// Trains from scratch. When `ckpt_dir` is given, intermediate
/// checkpoints are written at the configured cadence; the final state
/// is returned (not auto-written).
pub fn train(
    config: &TrainConfig,
    samples: &[Sample],
    extractor: &PerceptualExtractor,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(config, samples)?;
    run_steps(Trainer::fresh(config), config, samples, extractor, 0, ckpt_dir)
}

/// Continues a checkpointed run up to `config.max_steps`. The runtime
/// config must match the checkpointed one exactly; mismatches are
/// refused with a field-level diff.
pub fn resume(
    ckpt: &Checkpoint,
    config: &TrainConfig,
    samples: &[Sample],
    extractor: &PerceptualExtractor,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(config, samples)?;
    let mut saved = ckpt
        .train_config
        .clone()
        .ok_or_else(|| Error::Incompatible("checkpoint carries no training config to resume".into()))?;
    let mut current = serde_json::to_value(config).expect("config serializes");
    // The run-length target and snapshot cadence are operational knobs a
    // continuation legitimately changes; everything else must match.
    for v in [&mut saved, &mut current] {
        if let Some(obj) = v.as_object_mut() {
            obj.remove("max_steps");
            obj.remove("checkpoint_every");
        }
    }
    let diff = config_diff(&saved, &current, "");
    if !diff.is_empty() {
        return Err(Error::Incompatible(format!(
            "training config differs from checkpoint: {}",
            diff.join("; ")
        )));
    }
    if ckpt.step >= config.max_steps {
        return Err(Error::Config(format!(
            "checkpoint is already at step {}, max_steps is {}",
            ckpt.step, config.max_steps
        )));
    }
    let trainer = Trainer::from_checkpoint(config, ckpt)?;
    run_steps(trainer, config, samples, extractor, ckpt.step, ckpt_dir)
}

/// One module-toggle combination of the staged ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    pub n_smr: usize,
    pub n_mbe: usize,
    pub n_cff: usize,
    pub n_skip_stage: usize,
    pub use_refinement: bool,
    pub refine_unet: bool,
}

impl AblationToggles {
    /// Two-stage variant with the given module counts.
    pub fn new(n_smr: usize, n_mbe: usize, n_cff: usize, n_skip_stage: usize) -> Self {
        AblationToggles {
            n_smr,
            n_mbe,
            n_cff,
            n_skip_stage,
            use_refinement: true,
            refine_unet: false,
        }
    }

    /// Coarse-stage-only variant.
    pub fn coarse_only(n_smr: usize, n_mbe: usize) -> Self {
        AblationToggles {
            n_smr,
            n_mbe,
            n_cff: 0,
            n_skip_stage: 0,
            use_refinement: false,
            refine_unet: false,
        }
    }

    /// Full coarse stage with a plain U-Net decoder as the refinement.
    pub fn unet_refinement() -> Self {
        AblationToggles {
            n_smr: 3,
            n_mbe: 3,
            n_cff: 0,
            n_skip_stage: 3,
            use_refinement: true,
            refine_unet: true,
        }
    }

    /// The canonical 13-step build-up from plain two-branch U-Net to
    /// the full model (and the U-Net-refinement variant last). Rows are
    /// 1-indexed by position + 1 in this list.
    pub fn staged_rows() -> Vec<AblationToggles> {
        vec![
            AblationToggles::coarse_only(0, 0),
            AblationToggles::coarse_only(1, 0),
            AblationToggles::coarse_only(3, 0),
            AblationToggles::coarse_only(3, 1),
            AblationToggles::coarse_only(3, 3),
            AblationToggles::new(3, 3, 0, 0),
            AblationToggles::new(3, 3, 1, 0),
            AblationToggles::new(3, 3, 2, 0),
            AblationToggles::new(3, 3, 3, 0),
            AblationToggles::new(3, 3, 3, 1),
            AblationToggles::new(3, 3, 3, 2),
            AblationToggles::new(3, 3, 3, 3),
            AblationToggles::unet_refinement(),
        ]
    }

    pub fn apply(&self, base: &NetworkConfig) -> NetworkConfig {
        let mut cfg = base
            .clone()
            .with_toggles(self.n_smr, self.n_mbe, self.n_cff, self.n_skip_stage);
        cfg.use_refinement = self.use_refinement;
        cfg.refine_unet = self.refine_unet;
        cfg
    }
}

/// Result of one grid entry: configuration echo, capacity, metrics.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub toggles: AblationToggles,
    pub param_count: usize,
    pub report: MetricsReport,
}

/// Trains every toggle combination with the shared seed and data, then
/// evaluates each on the same corpus.
pub fn run_ablation_grid(
    base: &TrainConfig,
    rows: &[AblationToggles],
    samples: &[Sample],
    extractor: &PerceptualExtractor,
) -> Result<Vec<AblationRow>> {
    let mut out = Vec::with_capacity(rows.len());
    for toggles in rows {
        let config = TrainConfig {
            network: toggles.apply(&base.network),
            ..base.clone()
        };
        let outcome = train(&config, samples, extractor, None)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = SlbrNetwork::new(
            &mut Scope {
                store: &mut store,
                rng: &mut rng,
            },
            &config.network,
        );
        outcome.checkpoint.apply_to(&mut store)?;
        let report = evaluate_network(&net, &store, samples)?;
        out.push(AblationRow {
            toggles: *toggles,
            param_count: store.element_count(),
            report,
        });
    }
    Ok(out)
}
