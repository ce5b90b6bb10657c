//! Three-stage training regimen plus the standalone gate fit.
//!
//! Stage order matters: `lens` and `frame` train independently (the frame
//! uses prompt features, not lens outputs), and `joint` requires both
//! checkpoints. Every stage is deterministic given its seed: batch order
//! comes from a per-epoch stream and gradient accumulation is sequential.

pub mod adam;
pub mod losses;
pub mod stages;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{FrameFlags, FrameParams};
use crate::lens::{LensFlags, LensParams};
use crate::prep::PreparedDataset;
use crate::rng;
use crate::scoring::{GateParams, ScoreConfig};
use adam::Adam;
use stages::GateItem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Lens,
    Frame,
    Joint,
    Gate,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Lens => "lens",
            Stage::Frame => "frame",
            Stage::Joint => "joint",
            Stage::Gate => "gate",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lens" => Ok(Stage::Lens),
            "frame" => Ok(Stage::Frame),
            "joint" => Ok(Stage::Joint),
            "gate" => Ok(Stage::Gate),
            other => Err(Error::InvalidConfig(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativesMode {
    #[serde(rename = "triplet")]
    Triplet,
    #[serde(rename = "in-batch")]
    InBatch,
}

pub const BASE_LEARNING_RATE: f64 = 1e-4;
/// The joint stage fine-tunes at a tenth of the base rate.
pub const JOINT_LR_FACTOR: f64 = 0.1;

fn default_batch_size() -> usize {
    32
}

fn default_delta_start() -> f64 {
    0.5
}

fn default_delta_end() -> f64 {
    1.0
}

fn default_negatives_mode() -> NegativesMode {
    NegativesMode::Triplet
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Per-stage default when absent (lens 30, frame 12, joint 12, gate 15).
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Defaults to 1e-4, scaled by 0.1 for the joint stage.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_delta_start")]
    pub delta_start: f64,
    #[serde(default = "default_delta_end")]
    pub delta_end: f64,
    #[serde(default = "default_negatives_mode")]
    pub negatives_mode: NegativesMode,
    pub seed: u64,
    #[serde(default)]
    pub lens_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub frame_checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(stage: Stage, seed: u64) -> Self {
        TrainConfig {
            stage,
            epochs: None,
            batch_size: default_batch_size(),
            learning_rate: None,
            delta_start: default_delta_start(),
            delta_end: default_delta_end(),
            negatives_mode: default_negatives_mode(),
            seed,
            lens_checkpoint: None,
            frame_checkpoint: None,
        }
    }

    pub fn resolved_epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.stage {
            Stage::Lens => 30,
            Stage::Frame => 12,
            Stage::Joint => 12,
            Stage::Gate => 15,
        })
    }

    pub fn resolved_lr(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.stage {
            Stage::Joint => BASE_LEARNING_RATE * JOINT_LR_FACTOR,
            _ => BASE_LEARNING_RATE,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolved_epochs() < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.resolved_lr() > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.negatives_mode == NegativesMode::InBatch && self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "in-batch negatives need batch_size >= 2".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    pub lr: f64,
}

/// Prerequisite parameters for a stage; the joint stage needs both.
#[derive(Default)]
pub struct StageInputs {
    pub lens: Option<LensParams>,
    pub frame: Option<FrameParams>,
}

pub struct StageOutcome {
    pub stage: Stage,
    pub final_loss: f64,
    pub log: Vec<EpochRecord>,
    pub lens: Option<LensParams>,
    pub frame: Option<FrameParams>,
    pub gate: Option<GateParams>,
    /// Gate stage only: accuracy on the held-out tenth of the captions.
    pub heldout_accuracy: Option<f64>,
    pub optimizer_steps: u64,
}

fn epoch_order(n: usize, seed: u64, stage: Stage, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(
        seed,
        "epoch-shuffle",
        &[stage.as_str().as_bytes(), &epoch.to_le_bytes()],
    );
    order.shuffle(&mut r);
    order
}

/// Deterministic batch boundaries. In in-batch mode a trailing single
/// sample is folded into the previous batch so every batch can form
/// negatives.
fn batch_ranges(n: usize, batch_size: usize, fold_tail_singleton: bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        out.push((start, end));
        start = end;
    }
    if fold_tail_singleton && out.len() >= 2 {
        let (s, e) = *out.last().unwrap();
        if e - s < 2 {
            out.pop();
            out.last_mut().unwrap().1 = e;
        }
    }
    out
}

/// Runs one training stage over the prepared dataset.
pub fn run_stage(
    cfg: &TrainConfig,
    data: &PreparedDataset,
    inputs: StageInputs,
    score_cfg: &ScoreConfig,
) -> Result<StageOutcome> {
    cfg.validate()?;
    score_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    match cfg.stage {
        Stage::Lens => run_lens_stage(cfg, data, inputs),
        Stage::Frame => run_frame_stage(cfg, data, inputs, score_cfg),
        Stage::Joint => run_joint_stage(cfg, data, inputs, score_cfg),
        Stage::Gate => run_gate_stage(cfg, data),
    }
}

fn run_lens_stage(
    cfg: &TrainConfig,
    data: &PreparedDataset,
    inputs: StageInputs,
) -> Result<StageOutcome> {
    let epochs = cfg.resolved_epochs();
    let lr = cfg.resolved_lr();
    let mut params = inputs.lens.unwrap_or_else(|| {
        LensParams::init(data.dim, &mut rng::stream(cfg.seed, "lens-init", &[]))
    });
    let mut opt = Adam::new(params.flat_len(), lr);
    let mut log = Vec::with_capacity(epochs);
    let n = data.len();
    for epoch in 0..epochs {
        let delta = losses::delta_schedule(epoch, epochs, cfg.delta_start, cfg.delta_end);
        let order = epoch_order(n, cfg.seed, Stage::Lens, epoch);
        let mut epoch_loss = 0.0;
        for (s, e) in batch_ranges(n, cfg.batch_size, false) {
            let items: Vec<stages::Stage1Item<'_>> = order[s..e]
                .iter()
                .map(|&i| stages::Stage1Item::from_sample(&data.samples[i]))
                .collect();
            let (loss, grads) =
                stages::stage1_loss_and_grads(&items, &params, LensFlags::default(), delta)?;
            let mut flat = params.to_flat();
            opt.step(&mut flat, &grads.to_flat());
            params.set_from_flat(&flat);
            epoch_loss += loss * (e - s) as f64;
        }
        log.push(EpochRecord {
            epoch,
            loss: epoch_loss / n as f64,
            delta: Some(delta),
            lr,
        });
    }
    Ok(StageOutcome {
        stage: Stage::Lens,
        final_loss: log.last().unwrap().loss,
        log,
        lens: Some(params),
        frame: inputs.frame,
        gate: None,
        heldout_accuracy: None,
        optimizer_steps: opt.steps_taken(),
    })
}

fn run_frame_stage(
    cfg: &TrainConfig,
    data: &PreparedDataset,
    inputs: StageInputs,
    score_cfg: &ScoreConfig,
) -> Result<StageOutcome> {
    let epochs = cfg.resolved_epochs();
    let lr = cfg.resolved_lr();
    let mut params = inputs.frame.unwrap_or_else(|| {
        FrameParams::init(data.dim, &mut rng::stream(cfg.seed, "frame-init", &[]))
    });
    let mut opt = Adam::new(params.flat_len(), lr);
    let mut log = Vec::with_capacity(epochs);
    let n = data.len();
    let fold = cfg.negatives_mode == NegativesMode::InBatch;
    for epoch in 0..epochs {
        let order = epoch_order(n, cfg.seed, Stage::Frame, epoch);
        let mut epoch_loss = 0.0;
        for (s, e) in batch_ranges(n, cfg.batch_size, fold) {
            let batch: Vec<&crate::prep::PreparedSample> =
                order[s..e].iter().map(|&i| &data.samples[i]).collect();
            let (loss, grads) = stages::stage2_loss_and_grads(
                &batch,
                &params,
                FrameFlags::default(),
                score_cfg,
                cfg.negatives_mode,
            )?;
            let mut flat = params.to_flat();
            opt.step(&mut flat, &grads.to_flat());
            params.set_from_flat(&flat);
            epoch_loss += loss * (e - s) as f64;
        }
        log.push(EpochRecord {
            epoch,
            loss: epoch_loss / n as f64,
            delta: None,
            lr,
        });
    }
    Ok(StageOutcome {
        stage: Stage::Frame,
        final_loss: log.last().unwrap().loss,
        log,
        lens: inputs.lens,
        frame: Some(params),
        gate: None,
        heldout_accuracy: None,
        optimizer_steps: opt.steps_taken(),
    })
}

fn run_joint_stage(
    cfg: &TrainConfig,
    data: &PreparedDataset,
    inputs: StageInputs,
    score_cfg: &ScoreConfig,
) -> Result<StageOutcome> {
    let mut lens_params = inputs
        .lens
        .ok_or_else(|| Error::MissingCheckpoint("joint stage needs a lens checkpoint".into()))?;
    let mut frame_params = inputs
        .frame
        .ok_or_else(|| Error::MissingCheckpoint("joint stage needs a frame checkpoint".into()))?;
    let epochs = cfg.resolved_epochs();
    let lr = cfg.resolved_lr();
    let mut lens_opt = Adam::new(lens_params.flat_len(), lr);
    let mut frame_opt = Adam::new(frame_params.flat_len(), lr);
    let mut log = Vec::with_capacity(epochs);
    let n = data.len();
    let fold = cfg.negatives_mode == NegativesMode::InBatch;
    for epoch in 0..epochs {
        let order = epoch_order(n, cfg.seed, Stage::Joint, epoch);
        let mut epoch_loss = 0.0;
        for (s, e) in batch_ranges(n, cfg.batch_size, fold) {
            let batch: Vec<&crate::prep::PreparedSample> =
                order[s..e].iter().map(|&i| &data.samples[i]).collect();
            let (loss, lens_grads, frame_grads) = stages::stage3_loss_and_grads(
                &batch,
                &lens_params,
                &frame_params,
                LensFlags::default(),
                FrameFlags::default(),
                score_cfg,
                cfg.negatives_mode,
                None,
            )?;
            let mut flat = lens_params.to_flat();
            lens_opt.step(&mut flat, &lens_grads.to_flat());
            lens_params.set_from_flat(&flat);
            let mut flat = frame_params.to_flat();
            frame_opt.step(&mut flat, &frame_grads.to_flat());
            frame_params.set_from_flat(&flat);
            epoch_loss += loss * (e - s) as f64;
        }
        log.push(EpochRecord {
            epoch,
            loss: epoch_loss / n as f64,
            delta: None,
            lr,
        });
    }
    Ok(StageOutcome {
        stage: Stage::Joint,
        final_loss: log.last().unwrap().loss,
        log,
        lens: Some(lens_params),
        frame: Some(frame_params),
        gate: None,
        heldout_accuracy: None,
        optimizer_steps: lens_opt.steps_taken(),
    })
}

fn gate_items(data: &PreparedDataset) -> Vec<GateItem> {
    let mut items = Vec::with_capacity(2 * data.len());
    for s in &data.samples {
        items.push(GateItem {
            text_repr: s.pos_bundle.eot_state(),
            negated: false,
        });
        items.push(GateItem {
            text_repr: s.neg_bundle.eot_state(),
            negated: true,
        });
    }
    items
}

fn run_gate_stage(cfg: &TrainConfig, data: &PreparedDataset) -> Result<StageOutcome> {
    let mut items = gate_items(data);
    let mut r = rng::stream(cfg.seed, "gate-split", &[]);
    use rand::seq::SliceRandom as _;
    items.shuffle(&mut r);
    let heldout_n = (items.len() / 10).max(1);
    let heldout: Vec<GateItem> = items.split_off(items.len() - heldout_n);

    let gate_init = GateParams::init(data.dim, &mut rng::stream(cfg.seed, "gate-init", &[]));
    let (gate, log, steps) = train_gate(
        &items,
        gate_init,
        cfg.resolved_epochs(),
        cfg.batch_size,
        cfg.resolved_lr(),
        cfg.seed,
    )?;
    let heldout_accuracy = stages::gate_accuracy(&heldout, &gate)?;
    Ok(StageOutcome {
        stage: Stage::Gate,
        final_loss: log.last().map(|r| r.loss).unwrap_or(f64::NAN),
        log,
        lens: None,
        frame: None,
        gate: Some(gate),
        heldout_accuracy: Some(heldout_accuracy),
        optimizer_steps: steps,
    })
}

/// Binary cross-entropy fit of the negation gate. Zero epochs return the
/// initial parameters unchanged. A dataset with only one caption class is
/// rejected.
pub fn train_gate(
    items: &[GateItem],
    init: GateParams,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<(GateParams, Vec<EpochRecord>, u64)> {
    if items.is_empty() {
        return Err(Error::Empty("gate training set"));
    }
    let has_pos = items.iter().any(|i| i.negated);
    let has_neg = items.iter().any(|i| !i.negated);
    if !has_pos || !has_neg {
        return Err(Error::SingleClass);
    }
    let mut gate = init;
    let mut opt = Adam::new(gate.to_flat().len(), lr);
    let mut log = Vec::with_capacity(epochs);
    let n = items.len();
    for epoch in 0..epochs {
        let order = epoch_order(n, seed, Stage::Gate, epoch);
        let mut epoch_loss = 0.0;
        for (s, e) in batch_ranges(n, batch_size, false) {
            let batch: Vec<&GateItem> = order[s..e].iter().map(|&i| &items[i]).collect();
            let (loss, grads) = stages::gate_loss_and_grads(&batch, &gate)?;
            let mut flat = gate.to_flat();
            opt.step(&mut flat, &grads.to_flat());
            gate.set_from_flat(&flat);
            epoch_loss += loss * (e - s) as f64;
        }
        log.push(EpochRecord {
            epoch,
            loss: epoch_loss / n as f64,
            delta: None,
            lr,
        });
    }
    Ok((gate, log, opt.steps_taken()))
}
