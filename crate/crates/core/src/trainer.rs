//! Training, evaluation and ablation runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use maae_tensor::{Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ang::{ang_loss, ang_sample, standard_normal, NoiseParams};
use crate::backbone::{FeatureStack, ToyBackbone};
use crate::config::{Ablation, Paradigm, ReconTarget, RunConfig};
use crate::dataset::{record_features, record_mask, DatasetIndex, Label, Record, Split};
use crate::error::{MaaeError, Result};
use crate::ffm::{bilinear_fuse, Ffm};
use crate::format::{load_checkpoint, save_checkpoint, write_bytes};
use crate::model::{recon_loss, Maae};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamStore};
use crate::scoring::{anomaly_map, anomaly_score, auroc, pixel_auroc, AnomalyMap, ClassResult, EvalReport};
use crate::synthetic::mix;

const W_PARAM: &str = "ang.w";

/// Backbone features of every record, computed once per run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub records: Vec<Record>,
    pub stacks: Vec<FeatureStack>,
    pub class_names: Vec<String>,
    pub image_size: usize,
}

impl PreparedData {
    pub fn prepare(config: &RunConfig, index: &DatasetIndex) -> Result<Self> {
        index.validate()?;
        let backbone = ToyBackbone::new(config.seed_backbone);
        let stacks = index
            .records
            .iter()
            .map(|r| record_features(r, &backbone, config.image_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedData {
            records: index.records.clone(),
            stacks,
            class_names: index.class_names.clone(),
            image_size: config.image_size,
        })
    }

    fn indices(&self, split: Split, class: Option<usize>) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split && class.is_none_or(|c| self.records[i].class_id == c))
            .collect()
    }
}

/// Trainable parameters of FFM and autoencoder plus the architecture that
/// interprets them.
#[derive(Debug, Clone)]
pub struct MaaeSystem {
    pub params: ParamStore<f32>,
    pub ffm: Option<Ffm>,
    pub model: Maae,
}

impl MaaeSystem {
    pub fn init(config: &RunConfig, channel_plan: &[usize], grid: (usize, usize)) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed_init);
        let mut params = ParamStore::new();
        let ffm = config
            .ablation
            .use_ffm
            .then(|| Ffm::init(&mut params, channel_plan, config.dilation, &mut rng));
        let channels = channel_plan.iter().sum();
        let model = Maae::init(
            &mut params,
            grid,
            channels,
            config.num_blocks,
            config.residual_period,
            config.dilation,
            config.ablation.use_mixed_attention,
            &mut rng,
        );
        MaaeSystem { params, ffm, model }
    }

    /// Fused tokens `X` for one stack, recorded on `tape`.
    fn fuse(&self, tape: &mut Tape<f32>, bound: &Bound, stack: &FeatureStack) -> Result<Var> {
        match &self.ffm {
            Some(ffm) => {
                let stages: Vec<Var> = stack.stages.iter().map(|s| tape.constant(s.clone())).collect();
                Ok(ffm.fuse(tape, bound, &stages)?.tokens)
            }
            None => Ok(tape.constant(bilinear_fuse(stack)?.tokens)),
        }
    }

    /// Noise-free reconstruction: returns `(X, Y)`.
    pub fn reconstruct(&self, stack: &FeatureStack) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = self.fuse(&mut tape, &bound, stack)?;
        let y = self.model.forward(&mut tape, &bound, x)?;
        Ok((tape.value(x).clone(), tape.value(y).clone()))
    }

    pub fn anomaly_map(&self, stack: &FeatureStack, image_size: usize) -> Result<AnomalyMap> {
        let (x, y) = self.reconstruct(stack)?;
        anomaly_map(&y, &x, self.model.grid, (image_size, image_size), stack.image_id.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub l_e: f64,
    pub l_ang: f64,
    pub norm_w: f64,
}

pub fn loss_log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,L_e,L_ANG,norm_W\n");
    for r in rows {
        writeln!(s, "{},{:e},{:e},{:e}", r.step, r.l_e, r.l_ang, r.norm_w).unwrap();
    }
    s
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub system: MaaeSystem,
    pub noise: NoiseParams,
    pub model_opt: Adam<f32>,
    pub noise_opt: Adam<f32>,
    pub step: u64,
    pub log: Vec<LogRow>,
}

impl TrainState {
    pub fn new(config: &RunConfig, channel_plan: &[usize], grid: (usize, usize)) -> Self {
        let system = MaaeSystem::init(config, channel_plan, grid);
        let noise = NoiseParams::new(
            grid.0 * grid.1,
            channel_plan.iter().sum(),
            config.w_init,
            config.effective_intensity(),
            config.seed_ang,
        );
        let adam = AdamConfig::with_lr(config.lr);
        TrainState {
            model_opt: Adam::new(adam, system.params.iter().map(|(_, t)| t)),
            noise_opt: Adam::new(adam, [&noise.w]),
            system,
            noise,
            step: 0,
            log: Vec::new(),
        }
    }

    /// Model and FFM parameters followed by `W`, as stored in checkpoints.
    pub fn checkpoint_params(&self) -> ParamStore<f32> {
        let mut p = self.system.params.clone();
        p.add(W_PARAM, self.noise.w.clone());
        p
    }

    /// Mean reconstruction loss over `batch` with noise for the current step.
    /// `trainable_model` selects which parameter group the tape differentiates.
    fn batch_loss(
        &self,
        config: &RunConfig,
        tape: &mut Tape<f32>,
        batch: &[(usize, &FeatureStack)],
        trainable_model: bool,
    ) -> Result<(Var, Var, Bound)> {
        let bound = self.system.params.bind(tape, trainable_model);
        let w = if trainable_model {
            tape.constant(self.noise.w.clone())
        } else {
            tape.param(self.noise.w.clone())
        };
        let a = self.noise.intensity as f32;
        let mut total: Option<Var> = None;
        for &(item, stack) in batch {
            let x = self.system.fuse(tape, &bound, stack)?;
            let eps = standard_normal(self.noise.seed, self.step, item as u64, tape.value(x).shape());
            let (x_star, _) = ang_sample(tape, x, w, a, &eps)?;
            let target = match config.recon_target {
                ReconTarget::Clean => x,
                ReconTarget::Noised => x_star,
            };
            let y = self.system.model.forward(tape, &bound, x_star)?;
            let l = recon_loss(tape, y, target)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let total = total.ok_or(MaaeError::EmptyDataset)?;
        Ok((tape.scale(total, 1.0 / batch.len() as f32)?, w, bound))
    }

    /// Updates model and FFM parameters on `L_e` with `W` held constant.
    /// Returns the batch loss before the update.
    pub fn model_step(&mut self, config: &RunConfig, batch: &[(usize, &FeatureStack)]) -> Result<f64> {
        let mut tape = Tape::new();
        let (l_e, _, bound) = self.batch_loss(config, &mut tape, batch, true)?;
        let value = tape.value(l_e).item()? as f64;
        let grads = tape.backward(l_e)?;
        let params = &self.system.params;
        let grads: Vec<Tensor<f32>> = params
            .ids()
            .map(|id| grads.get_or_zeros(bound.var(id), params.get(id).shape()))
            .collect();
        if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(MaaeError::NonFiniteLoss { step: self.step });
        }
        self.model_opt.step(self.system.params.tensors_mut(), &grads)?;
        Ok(value)
    }

    /// Updates `W` on `L_ANG` with model and FFM held constant. Returns
    /// `L_ANG` before the update.
    pub fn noise_step(&mut self, config: &RunConfig, batch: &[(usize, &FeatureStack)]) -> Result<f64> {
        let mut tape = Tape::new();
        let (l_e, w, _) = self.batch_loss(config, &mut tape, batch, false)?;
        let l_ang = ang_loss(&mut tape, l_e, w, config.lambda_ang as f32, config.lambda_re as f32)?;
        let value = tape.value(l_ang).item()? as f64;
        let g = tape.backward(l_ang)?.get_or_zeros(w, self.noise.w.shape());
        if !value.is_finite() || !g.is_finite() {
            return Err(MaaeError::NonFiniteLoss { step: self.step });
        }
        self.noise_opt.step([&mut self.noise.w], &[g])?;
        Ok(value)
    }

    /// One alternating update: [`model_step`](Self::model_step), then
    /// [`noise_step`](Self::noise_step) against the updated model. Without
    /// noise the `W` update is skipped and `L_ANG` is only reported.
    pub fn train_step(&mut self, config: &RunConfig, batch: &[(usize, &FeatureStack)]) -> Result<LogRow> {
        self.step += 1;
        let step = self.step;
        let non_finite = |e: MaaeError| match e {
            MaaeError::Tensor(TensorError::NonFinite { .. }) => MaaeError::NonFiniteLoss { step },
            e => e,
        };
        let l_e = self.model_step(config, batch).map_err(non_finite)?;
        let l_ang = if self.noise.intensity > 0.0 {
            self.noise_step(config, batch).map_err(non_finite)?
        } else {
            -config.lambda_ang * l_e + config.lambda_re * self.noise.w.norm_l2() as f64
        };
        let row = LogRow {
            step: self.step,
            l_e,
            l_ang,
            norm_w: self.noise.w.norm_l2() as f64,
        };
        self.log.push(row);
        Ok(row)
    }
}

/// A trained model and the classes whose data it saw.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub tag: String,
    pub classes: Vec<usize>,
    pub state: TrainState,
}

/// Trains one model per paradigm group. When `checkpoint_dir` is set, the
/// state after every epoch (and the initial state) is written there.
pub fn fit(config: &RunConfig, data: &PreparedData, checkpoint_dir: Option<&Path>) -> Result<Vec<TrainedModel>> {
    let groups: Vec<(String, Option<usize>)> = match config.paradigm {
        Paradigm::Unified => vec![("unified".to_string(), None)],
        Paradigm::Separate => data
            .class_names
            .iter()
            .enumerate()
            .map(|(c, name)| (name.clone(), Some(c)))
            .collect(),
    };
    groups
        .into_iter()
        .map(|(tag, class)| {
            let train = data.indices(Split::Train, class);
            let state = fit_group(config, data, &train, checkpoint_dir.map(|d| d.join(&tag)).as_deref())?;
            let classes = class.map_or_else(|| (0..data.class_names.len()).collect(), |c| vec![c]);
            Ok(TrainedModel { tag, classes, state })
        })
        .collect()
}

fn fit_group(config: &RunConfig, data: &PreparedData, train: &[usize], checkpoint_dir: Option<&Path>) -> Result<TrainState> {
    let first = *train.first().ok_or(MaaeError::EmptyDataset)?;
    let probe = &data.stacks[first];
    let channel_plan = probe.channel_plan();
    let grid = probe.final_grid();
    if config.batch_size == 0 {
        return Err(MaaeError::ConfigMismatch("batch_size must be positive".into()));
    }
    for &i in train {
        if data.stacks[i].channel_plan() != channel_plan || data.stacks[i].final_grid() != grid {
            return Err(MaaeError::ConfigMismatch(format!(
                "feature stack {} does not match the first training stack",
                data.stacks[i].image_id
            )));
        }
    }
    let mut state = TrainState::new(config, &channel_plan, grid);
    let save = |state: &TrainState, epoch: usize| -> Result<()> {
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(&dir.join(format!("epoch_{epoch:03}.maac")), &state.checkpoint_params())?;
            write_bytes(&dir.join("loss.csv"), loss_log_csv(&state.log).as_bytes())?;
        }
        Ok(())
    };
    save(&state, 0)?;
    let mut order = train.to_vec();
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed_shuffle, 0x5a, epoch as u64, 0));
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(usize, &FeatureStack)> = chunk.iter().map(|&i| (i, &data.stacks[i])).collect();
            state.train_step(config, &batch)?;
        }
        if let Some(last) = state.log.last() {
            log::info!("epoch {epoch}: L_e {:.5} norm_W {:.5}", last.l_e, last.norm_w);
        }
        save(&state, epoch)?;
    }
    Ok(state)
}

/// Scores every test record of `classes` with `system`.
fn evaluate_classes(system: &MaaeSystem, data: &PreparedData, classes: &[usize], out: &mut Vec<ClassResult>) -> Result<()> {
    for &class in classes {
        let test = data.indices(Split::Test, Some(class));
        let mut scores = Vec::with_capacity(test.len());
        let mut labels = Vec::with_capacity(test.len());
        let mut maps = Vec::with_capacity(test.len());
        let mut masks = Vec::with_capacity(test.len());
        let mut masks_complete = true;
        for &i in &test {
            let record = &data.records[i];
            let map = system.anomaly_map(&data.stacks[i], data.image_size)?;
            scores.push(anomaly_score(&map)? as f64);
            labels.push(record.label == Label::Anomalous);
            if record.label == Label::Anomalous && record.mask.is_none() {
                masks_complete = false;
            } else {
                masks.push(record_mask(record, data.image_size)?);
                maps.push(map);
            }
        }
        let pixel = if masks_complete {
            match pixel_auroc(&maps, &masks) {
                Ok(v) => Some(v),
                Err(MaaeError::DegenerateLabels) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        out.push(ClassResult {
            class_name: data.class_names[class].clone(),
            image_auroc: auroc(&scores, &labels)?,
            pixel_auroc: pixel,
            num_normal: labels.iter().filter(|&&l| !l).count(),
            num_anomalous: labels.iter().filter(|&&l| l).count(),
        });
    }
    Ok(())
}

/// Noise-free evaluation of trained models; each class is scored by the
/// model that was trained on it.
pub fn evaluate_models(config: &RunConfig, models: &[TrainedModel], data: &PreparedData) -> Result<EvalReport> {
    let mut classes = Vec::new();
    for m in models {
        evaluate_classes(&m.state.system, data, &m.classes, &mut classes)?;
    }
    classes.sort_by(|a, b| a.class_name.cmp(&b.class_name));
    Ok(EvalReport {
        classes,
        config_digest: config.digest(),
    })
}

/// Rebuilds a system from a checkpoint written by [`fit`].
pub fn load_system(config: &RunConfig, checkpoint: &Path, channel_plan: &[usize], grid: (usize, usize)) -> Result<MaaeSystem> {
    let stored = load_checkpoint(checkpoint)?;
    let mut model_params = ParamStore::new();
    for (name, t) in stored.iter().filter(|(name, _)| *name != W_PARAM) {
        model_params.add(name, t.clone());
    }
    let mut system = MaaeSystem::init(config, channel_plan, grid);
    system.params.load_from(&model_params)?;
    Ok(system)
}

/// Final checkpoint of every paradigm group under `dir`.
pub fn latest_checkpoints(config: &RunConfig, data: &PreparedData, dir: &Path) -> Vec<(String, Vec<usize>, PathBuf)> {
    let file = format!("epoch_{:03}.maac", config.epochs);
    match config.paradigm {
        Paradigm::Unified => vec![(
            "unified".into(),
            (0..data.class_names.len()).collect(),
            dir.join("unified").join(file),
        )],
        Paradigm::Separate => data
            .class_names
            .iter()
            .enumerate()
            .map(|(c, name)| (name.clone(), vec![c], dir.join(name).join(&file)))
            .collect(),
    }
}

/// Evaluates the checkpoints written by a previous `train` run.
pub fn evaluate(config: &RunConfig, index: &DatasetIndex, checkpoint_dir: &Path) -> Result<EvalReport> {
    let data = PreparedData::prepare(config, index)?;
    let probe = data.stacks.first().ok_or(MaaeError::EmptyDataset)?;
    let (plan, grid) = (probe.channel_plan(), probe.final_grid());
    let mut classes = Vec::new();
    for (_, class_ids, path) in latest_checkpoints(config, &data, checkpoint_dir) {
        let system = load_system(config, &path, &plan, grid)?;
        evaluate_classes(&system, &data, &class_ids, &mut classes)?;
    }
    classes.sort_by(|a, b| a.class_name.cmp(&b.class_name));
    Ok(EvalReport {
        classes,
        config_digest: config.digest(),
    })
}

/// Trains and evaluates one configuration per row of the ablation grid.
pub fn ablate(config: &RunConfig, data: &PreparedData) -> Result<Vec<(Ablation, EvalReport)>> {
    Ablation::GRID
        .iter()
        .map(|&ablation| {
            let mut c = config.clone();
            c.ablation = ablation;
            let models = fit(&c, data, None)?;
            Ok((ablation, evaluate_models(&c, &models, data)?))
        })
        .collect()
}
