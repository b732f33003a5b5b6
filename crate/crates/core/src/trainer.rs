//! Siamese training loop, checkpoints and inference.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{MutualTarget, TrainConfig};
use crate::encoder::{self, EncoderConfig, GlobalFeature, ScoreMatrix};
use crate::error::{bail, Result};
use crate::geometry::{KeypointSet, PointCloud};
use crate::losses::{self, LossBreakdown, LossInputs};
use crate::mutual::{self, Direction};
use crate::nn::{clip_global_norm, global_norm, Adam, ParamStore};
use crate::pairs::PairStream;
use crate::skeleton::{self, DecodedVars, SkeletonReconstruction};
use crate::tape::{Tape, Var};

/// Current checkpoint layout version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Network configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub decoder: skeleton::DecoderConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let encoder = config.encoder_config();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        encoder.register(&mut params, &mut rng);
        mutual::register(&mut params, &mut rng);
        config
            .decoder
            .register(&mut params, encoder.skeleton_count(), encoder.offset_code_width, &mut rng);
        Ok(Self { encoder, decoder: config.decoder.clone(), params })
    }

    /// Rebuilds a model from stored parameters, checking their layout
    /// against `config`.
    pub fn from_params(config: &TrainConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::init(config)?;
        fresh.params.check_layout(&params)?;
        Ok(Self { params, ..fresh })
    }

    pub fn keypoints(&self) -> usize {
        self.encoder.keypoints
    }

    pub fn encode(&self, cloud: &PointCloud) -> Result<(ScoreMatrix, GlobalFeature)> {
        encoder::encode(cloud, &self.params, &self.encoder)
    }

    /// Encoder plus keypoint prediction; no reshaping, no gradients.
    pub fn detect(&self, cloud: &PointCloud) -> Result<KeypointSet> {
        let (scores, _) = self.encode(cloud)?;
        encoder::predict_keypoints(&scores, cloud)
    }

    /// Scores, keypoints and self reconstruction of one cloud.
    pub fn reconstruct(&self, cloud: &PointCloud) -> Result<(ScoreMatrix, KeypointSet, SkeletonReconstruction)> {
        let (scores, gf) = self.encode(cloud)?;
        let kp = encoder::predict_keypoints(&scores, cloud)?;
        let rec = skeleton::decode(&kp, &gf, &self.params, &self.decoder)?;
        Ok((scores, kp, rec))
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub params: ParamStore,
    pub optimizer: Adam,
    /// Completed optimization steps.
    pub step: u64,
}

impl Checkpoint {
    pub fn epoch(&self, pairs_per_epoch: usize) -> u64 {
        self.step / pairs_per_epoch.max(1) as u64
    }

    pub fn model(&self) -> Result<Model> {
        if self.version != CHECKPOINT_VERSION {
            bail!(Incompatible, "checkpoint version {} is not supported (expected {})", self.version, CHECKPOINT_VERSION);
        }
        Model::from_params(&self.config, self.params.clone())
    }
}

/// Inference entry point.
pub fn detect(checkpoint: &Checkpoint, cloud: &PointCloud) -> Result<KeypointSet> {
    checkpoint.model()?.detect(cloud)
}

/// Outcome of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based step index.
    pub step: u64,
    pub pair: (usize, usize),
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Gradient norm of the weighted mutual term alone, when logged.
    pub mutual_grad_norm: Option<f64>,
}

impl StepRecord {
    /// `step, fidelity, coverage, self, mutual, reg1, reg2, total`.
    pub fn log_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{}, {}, {}, {}, {}, {}, {}, {}",
            self.step,
            l.fidelity,
            l.coverage,
            l.self_loss,
            l.mutual_loss,
            l.reg_skeleton_offsets,
            l.reg_keypoint_offsets,
            l.total
        )
    }
}

pub const STEP_LOG_HEADER: &str = "step, fidelity, coverage, self, mutual, reg1, reg2, total";

pub struct Trainer<'a> {
    config: TrainConfig,
    model: Model,
    optimizer: Adam,
    step: u64,
    pairs: PairStream,
    pairs_per_epoch: usize,
    dataset: &'a [PointCloud],
}

fn check_dataset(config: &TrainConfig, dataset: &[PointCloud]) -> Result<()> {
    if dataset.is_empty() {
        bail!(Argument, "empty dataset");
    }
    if dataset.len() < 2 {
        bail!(Argument, "training needs at least 2 clouds, got {}", dataset.len());
    }
    for c in dataset {
        if c.category != dataset[0].category {
            bail!(Argument, "dataset mixes categories `{}` and `{}`", dataset[0].category, c.category);
        }
        if c.len() != config.points_per_cloud {
            bail!(
                Argument,
                "cloud `{}` has {} points, expected points_per_cloud = {}",
                c.id,
                c.len(),
                config.points_per_cloud
            );
        }
        if c.len() < config.keypoints {
            bail!(Argument, "cloud `{}` has fewer points than keypoints", c.id);
        }
    }
    Ok(())
}

/// Decoded reconstruction together with the cloud it is scored against.
struct Branch {
    dec: DecodedVars,
    target: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a [PointCloud]) -> Result<Self> {
        let model = Model::init(&config)?;
        let optimizer = Adam::new(&model.params);
        Self::assemble(config, model, optimizer, 0, dataset)
    }

    fn assemble(config: TrainConfig, model: Model, optimizer: Adam, step: u64, dataset: &'a [PointCloud]) -> Result<Self> {
        config.validate()?;
        check_dataset(&config, dataset)?;
        let pairs_per_epoch = config.pairs_per_epoch.unwrap_or(dataset.len() / 2).max(1);
        let mut pairs = PairStream::new(dataset.len(), config.seed, pairs_per_epoch)?;
        pairs.advance(step);
        Ok(Self { config, model, optimizer, step, pairs, pairs_per_epoch, dataset })
    }

    /// Continues from `checkpoint` under its own configuration.
    pub fn resume(checkpoint: &Checkpoint, dataset: &'a [PointCloud]) -> Result<Self> {
        Self::resume_with(checkpoint, checkpoint.config.clone(), dataset)
    }

    /// Continues from `checkpoint` under `config`, which may change run
    /// length or loss weights but none of the structural keys.
    pub fn resume_with(checkpoint: &Checkpoint, config: TrainConfig, dataset: &'a [PointCloud]) -> Result<Self> {
        if checkpoint.version != CHECKPOINT_VERSION {
            bail!(
                Incompatible,
                "checkpoint version {} is not supported (expected {})",
                checkpoint.version,
                CHECKPOINT_VERSION
            );
        }
        checkpoint.config.check_structural(&config)?;
        let model = Model::from_params(&config, checkpoint.params.clone())?;
        model.params.check_layout(&checkpoint.optimizer.first)?;
        model.params.check_layout(&checkpoint.optimizer.second)?;
        Self::assemble(config, model, checkpoint.optimizer.clone(), checkpoint.step, dataset)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn pairs_per_epoch(&self) -> usize {
        self.pairs_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        (self.config.epochs * self.pairs_per_epoch) as u64
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
        }
    }

    /// One optimization step on the next pair of the stream.
    pub fn step(&mut self) -> Result<StepRecord> {
        let pair = self.pairs.next_pair();
        let clouds = [&self.dataset[pair.0], &self.dataset[pair.1]];
        let cfg = &self.config;
        let w = cfg.weights;

        let mut tape = Tape::new();
        let b = self.model.params.bind(&mut tape, true);
        let e = [
            encoder::forward_cloud(&mut tape, &b, &self.model.encoder, clouds[0])?,
            encoder::forward_cloud(&mut tape, &b, &self.model.encoder, clouds[1])?,
        ];
        let kp = [tape.matmul(e[0].scores, e[0].points), tape.matmul(e[1].scores, e[1].points)];
        let (_, ok) = mutual::offset_forward(&mut tape, &b, kp[0], kp[1]);
        let (kp1p, kp2p) = mutual::reshape_forward(&mut tape, kp[0], kp[1], ok, cfg.direction);
        // Each reshaped set borrows the global feature of the input it reconstructs.
        let (t1, t2) = match cfg.direction {
            Direction::Verbatim => (0, 1),
            Direction::Mirrored => (1, 0),
        };
        let dec = &self.model.decoder;
        let decode = |tape: &mut Tape, kp: Var, target: usize| Branch {
            dec: skeleton::decode_forward(tape, &b, dec, kp, e[target].activations, e[target].offset_code),
            target,
        };
        let self_branches = [decode(&mut tape, kp[0], 0), decode(&mut tape, kp[1], 1)];
        let mutual_branches = [decode(&mut tape, kp1p, t1), decode(&mut tape, kp2p, t2)];

        let mut fidelity = Vec::new();
        let mut coverage = Vec::new();
        let mut self_terms = Vec::new();
        for br in &self_branches {
            let (f, c) = losses::ccd_forward(
                &mut tape,
                br.dec.points,
                br.dec.activations,
                &br.dec.layout.ranges(),
                clouds[br.target].points(),
            )?;
            fidelity.push(f);
            coverage.push(c);
            self_terms.extend([(f, 1.0), (c, 1.0)]);
        }
        let mut mutual_terms = Vec::new();
        for br in &mutual_branches {
            let target = match cfg.mutual_target {
                MutualTarget::Input => clouds[br.target].points().to_vec(),
                MutualTarget::SelfRec => tape.value(self_branches[br.target].dec.points).to_points(),
            };
            let (f, c) = losses::ccd_forward(&mut tape, br.dec.points, br.dec.activations, &br.dec.layout.ranges(), &target)?;
            fidelity.push(f);
            coverage.push(c);
            mutual_terms.extend([(f, 1.0), (c, 1.0)]);
        }
        let self_loss = tape.combine(self_terms);
        let mutual_loss = tape.combine(mutual_terms);
        let reg_terms = self_branches
            .iter()
            .chain(&mutual_branches)
            .map(|br| (tape.sum_squares(br.dec.offsets), 1.0))
            .collect::<Vec<_>>();
        let reg_skeleton = tape.combine(reg_terms);
        let reg_keypoint = tape.sum_squares(ok);
        let total = tape.combine(vec![
            (self_loss, w.lambda_self),
            (mutual_loss, w.lambda_mutual),
            (reg_skeleton, w.mu_skeleton),
            (reg_keypoint, w.mu_keypoint),
        ]);

        let sum = |tape: &Tape, vars: &[Var]| vars.iter().map(|v| tape.value(*v).item()).sum::<f64>();
        let inputs = LossInputs {
            fidelity: sum(&tape, &fidelity),
            coverage: sum(&tape, &coverage),
            self_loss: tape.value(self_loss).item(),
            mutual_loss: tape.value(mutual_loss).item(),
            skeleton_offsets_sq: tape.value(reg_skeleton).item(),
            keypoint_offsets_sq: tape.value(reg_keypoint).item(),
        };
        let loss = losses::total_loss(&inputs, &w)?;
        let step = self.step + 1;
        if let Some(component) = loss.first_non_finite() {
            bail!(Numeric, "non-finite {component} loss at step {step} (clouds `{}`, `{}`)", clouds[0].id, clouds[1].id);
        }

        let mutual_grad_norm = if cfg.log_branch_grad_norm {
            let weighted = tape.combine(vec![(mutual_loss, w.lambda_mutual)]);
            let g = tape.backward(weighted);
            Some(global_norm(&b.gradients(&tape, &g)))
        } else {
            None
        };
        let g = tape.backward(total);
        let mut grads = b.gradients(&tape, &g);
        drop(tape);
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !grad_norm.is_finite() {
            bail!(Numeric, "non-finite gradient at step {step}");
        }
        self.optimizer.update(&mut self.model.params, &grads, cfg.learning_rate)?;
        if !self.model.params.is_finite() {
            bail!(Numeric, "parameters became non-finite at step {step}");
        }
        self.step = step;
        Ok(StepRecord { step, pair, loss, grad_norm, mutual_grad_norm })
    }

    /// Steps until `target` steps are complete (capped at the run length).
    pub fn run_until(&mut self, target: u64, mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        let target = target.min(self.total_steps());
        while self.step < target {
            let rec = self.step()?;
            on_step(&rec);
        }
        Ok(())
    }

    pub fn run(&mut self, on_step: impl FnMut(&StepRecord)) -> Result<()> {
        self.run_until(self.total_steps(), on_step)
    }
}

/// Trains from scratch for the configured number of epochs.
pub fn train(config: TrainConfig, dataset: &[PointCloud], on_step: impl FnMut(&StepRecord)) -> Result<Checkpoint> {
    let mut t = Trainer::new(config, dataset)?;
    t.run(on_step)?;
    Ok(t.checkpoint())
}

/// Continues a checkpoint to the end of its configured run.
pub fn resume(checkpoint: &Checkpoint, dataset: &[PointCloud], on_step: impl FnMut(&StepRecord)) -> Result<Checkpoint> {
    let mut t = Trainer::resume(checkpoint, dataset)?;
    t.run(on_step)?;
    Ok(t.checkpoint())
}
