use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{attention_mass, prompt_tokens};
use super::model::{Gradients, Sample, ToyModel, ToyModelConfig};
use super::task::{sample_clip, static_control, Clip, ClipConfig, SampleBuilder, Task};
use crate::compose::{AugConfig, DynImgLayout, LayoutConfig};
use crate::error::{Error, Result};
use crate::media::FrameGroup;
use crate::rng::{self, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub steps: usize,
    pub lr: f64,
    /// Samples per step; at least `train_size` means full-batch descent.
    pub batch: usize,
    pub train_size: usize,
    pub eval_size: usize,
    /// Held-out evaluation cadence in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Held-out clips used for the moving-vs-static attention probe.
    pub probe_pairs: usize,
    pub clip: ClipConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Direction4way,
            steps: 2000,
            lr: 1e-2,
            batch: 8,
            train_size: 512,
            eval_size: 256,
            eval_every: 0,
            probe_pairs: 32,
            clip: ClipConfig::default(),
        }
    }
}

/// Model, data and schedule for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiment {
    pub layout: LayoutConfig,
    pub aug: AugConfig,
    pub model: ToyModelConfig,
    pub num_dynimg: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for Experiment {
    fn default() -> Self {
        Self::toy()
    }
}

impl Experiment {
    /// Desk-sized setting: 56px keyframes, 7px patches, four prompts, one
    /// composed image per clip.
    pub fn toy() -> Self {
        Self {
            layout: LayoutConfig::new(56, 7, 2),
            aug: AugConfig { min_crop: 7, ..Default::default() },
            model: ToyModelConfig { dim: 32, heads: 4, layers: 2, decoder_layers: 1, pool_shape: [1, 6, 4], ..Default::default() },
            num_dynimg: 1,
            seed: 0,
            train: TrainConfig {
                lr: 0.05,
                clip: ClipConfig { object_size: [14, 18], speed: [1.5, 2.2], ..Default::default() },
                ..Default::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_dynimg == 0 {
            return Err(Error::InvalidConfig("num_dynimg must be at least 1".into()));
        }
        if self.train.batch == 0 || self.train.train_size == 0 || self.train.eval_size == 0 {
            return Err(Error::InvalidConfig("batch, train_size and eval_size must be positive".into()));
        }
        if !(self.train.lr >= 0.0 && self.train.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be finite and >= 0", self.train.lr)));
        }
        if self.train.clip.size != self.layout.keyframe_size {
            log::info!("clips of {}px are resized to {}px keyframes", self.train.clip.size, self.layout.keyframe_size);
        }
        self.train.clip.validate()?;
        self.aug.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ToyModelConfig {
        ToyModelConfig { classes: self.train.task.classes(), seed: self.seed, ..self.model.clone() }
    }
}

/// One optimisation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// `[‖θh‖, ‖θw‖, ‖θt‖]` after the update.
    pub theta_norms: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
    /// Keyframe-object-to-prompt attention mass on held-out clips.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attn_mass: Option<f64>,
}

pub type TrainTrace = Vec<StepRecord>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProbe {
    pub moving: f64,
    pub static_control: f64,
    /// `moving / static_control`.
    pub ratio: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub task: Task,
    pub steps: usize,
    pub init_accuracy: f64,
    pub init_loss: f64,
    /// Held-out accuracy after training.
    pub accuracy: f64,
    pub loss: f64,
    pub theta_norms: [f64; 3],
    pub attention: Option<AttentionProbe>,
    pub num_params: usize,
}

pub struct TrainRun {
    pub trace: TrainTrace,
    pub summary: TrainSummary,
    pub model: ToyModel,
}

/// Clips and model inputs for one split.
pub struct Split {
    pub clips: Vec<Clip>,
    pub samples: Vec<Sample>,
    pub groups: Vec<Vec<FrameGroup>>,
    /// Builder index of item 0.
    pub offset: u64,
}

/// Builder index of the first held-out clip.
pub const HELD_OUT: u64 = 1 << 32;

pub fn make_split(exp: &Experiment, builder: &SampleBuilder, offset: u64, len: usize) -> Result<Split> {
    let mut split = Split { clips: Vec::with_capacity(len), samples: Vec::with_capacity(len), groups: Vec::with_capacity(len), offset };
    for i in 0..len as u64 {
        let clip = sample_clip(exp.train.task, &exp.train.clip, exp.seed, offset + i)?;
        let (sample, groups) = builder.build(&clip, exp.train.task, offset + i)?;
        split.clips.push(clip);
        split.samples.push(sample);
        split.groups.push(groups);
    }
    Ok(split)
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Held-out accuracy and mean loss.
pub fn evaluate(model: &ToyModel, samples: &[Sample]) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut loss = 0.0;
    for s in samples {
        let out = model.forward(s, false)?;
        correct += usize::from(argmax(&out.logits) == s.label);
        loss += out.loss;
    }
    let n = samples.len().max(1) as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Keyframe patches the object touches at the keyframe's time.
pub fn object_patches(clip: &Clip, layout: &DynImgLayout, keyframe: usize) -> Vec<usize> {
    let (kr, kc) = layout.keyframe_grid();
    let cols = layout.patch_grid.1;
    let p = layout.patch();
    let k = layout.config.keyframe_size as f64;
    let (sx, sy) = (clip.spec.width as f64 / k, clip.spec.height as f64 / k);
    let mut out = Vec::new();
    for r in 0..kr {
        for c in 0..kc {
            let hit = (0..p * p).any(|i| {
                let (x, y) = ((c * p + i % p) as f64 + 0.5, (r * p + i / p) as f64 + 0.5);
                clip.spec.covers(keyframe, (x * sx) as usize, (y * sy) as usize)
            });
            if hit {
                out.push(r * cols + c);
            }
        }
    }
    out
}

/// Per layer and head (layer-major): encoder attention from the object's
/// keyframe patches into the prompt regions, averaged over a sample's images.
pub fn object_prompt_masses(model: &ToyModel, clip: &Clip, sample: &Sample, groups: &[FrameGroup]) -> Result<Vec<f64>> {
    let out = model.forward(sample, true)?;
    if out.enc_attn.is_empty() {
        return Err(Error::ShapeMismatch("attention probe needs before-encoder fusion".into()));
    }
    let keys = prompt_tokens(&model.layout);
    let mut total = vec![0.0; out.enc_attn[0].len()];
    for (maps, group) in out.enc_attn.iter().zip(groups) {
        let queries = object_patches(clip, &model.layout, group.keyframe_index);
        let masses = attention_mass(maps, &queries, &keys)?;
        total.iter_mut().zip(masses).for_each(|(t, m)| *t += m);
    }
    let n = out.enc_attn.len() as f64;
    Ok(total.into_iter().map(|t| t / n).collect())
}

/// [`object_prompt_masses`] averaged over layers and heads.
pub fn sample_attention_mass(model: &ToyModel, clip: &Clip, sample: &Sample, groups: &[FrameGroup]) -> Result<f64> {
    let m = object_prompt_masses(model, clip, sample, groups)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// Moving clips against static controls that share their keyframes.
pub fn attention_probe(model: &ToyModel, exp: &Experiment, builder: &SampleBuilder, held_out: &Split) -> Result<Option<AttentionProbe>> {
    if model.config.fusion != super::model::Fusion::BeforeEncoder || model.layout.n_prompts() == 0 {
        return Ok(None);
    }
    let pairs = exp.train.probe_pairs.min(held_out.samples.len());
    if pairs == 0 {
        return Ok(None);
    }
    let (mut moving, mut still) = (0.0, 0.0);
    for i in 0..pairs {
        let clip = &held_out.clips[i];
        let groups = &held_out.groups[i];
        // one control per clip, parked at the first keyframe's position
        let control = static_control(clip, groups[0].keyframe_index);
        let (control_sample, control_groups) = builder.build(&control, exp.train.task, held_out.offset + i as u64)?;
        moving += sample_attention_mass(model, clip, &held_out.samples[i], groups)?;
        still += sample_attention_mass(model, &control, &control_sample, &control_groups)?;
    }
    let (moving, still) = (moving / pairs as f64, still / pairs as f64);
    Ok(Some(AttentionProbe { moving, static_control: still, ratio: moving / still, pairs }))
}

/// Train the toy model by plain minibatch gradient descent.
///
/// `on_step` sees every record as it is produced.
pub fn toy_train(exp: &Experiment, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainRun> {
    exp.validate()?;
    let t = &exp.train;
    let builder = SampleBuilder::new(&exp.layout, exp.model.fusion, &exp.aug, exp.num_dynimg, exp.seed)?;
    let mut model = ToyModel::new(exp.model_config(), &builder.layout)?;
    let train = make_split(exp, &builder, 0, t.train_size)?;
    let held_out = make_split(exp, &builder, HELD_OUT, t.eval_size)?;
    let (init_accuracy, init_loss) = evaluate(&model, &held_out.samples)?;
    log::info!("init: held-out accuracy {init_accuracy:.3}, loss {init_loss:.4}");

    let mut trace = Vec::with_capacity(t.steps);
    for step in 0..t.steps {
        let batch: Vec<usize> = if t.batch >= t.train_size {
            (0..t.train_size).collect()
        } else {
            let mut rng = rng::stream(exp.seed, streams::BATCH, step as u64);
            (0..t.batch).map(|_| rng.random_range(0..t.train_size)).collect()
        };
        let mut grads = Gradients::zeros_like(&model);
        let (mut loss, mut correct) = (0.0, 0usize);
        for &i in &batch {
            let (out, g) = model.loss_and_grad(&train.samples[i])?;
            loss += out.loss;
            correct += usize::from(argmax(&out.logits) == train.samples[i].label);
            grads.add(&g);
        }
        let loss = loss / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence(step));
        }
        grads.scale(1.0 / batch.len() as f64);
        model.descend(&grads, t.lr)?;

        let (mut eval_accuracy, mut attn_mass) = (None, None);
        if t.eval_every > 0 && (step + 1) % t.eval_every == 0 {
            eval_accuracy = Some(evaluate(&model, &held_out.samples)?.0);
            attn_mass = attention_probe(&model, exp, &builder, &held_out)?.map(|p| p.moving);
        }
        let record = StepRecord {
            step,
            loss,
            accuracy: correct as f64 / batch.len() as f64,
            theta_norms: model.schedule.norms(),
            eval_accuracy,
            attn_mass,
        };
        log::debug!("step {step}: loss {loss:.4}");
        on_step(&record);
        trace.push(record);
    }

    let (accuracy, loss) = evaluate(&model, &held_out.samples)?;
    let attention = attention_probe(&model, exp, &builder, &held_out)?;
    let summary = TrainSummary {
        task: t.task,
        steps: t.steps,
        init_accuracy,
        init_loss,
        accuracy,
        loss,
        theta_norms: model.schedule.norms(),
        attention,
        num_params: model.num_params(),
    };
    Ok(TrainRun { trace, summary, model })
}
