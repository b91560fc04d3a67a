//! Training loop: parameter freezing, Adam, EMA shadow weights, optional
//! activation recomputation and half-precision storage of frozen weights.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataeval::MovingShapes;
use crate::diffusion::{training_loss, Batch, NoiseSchedule};
use crate::error::{io_err, Error, Result};
use crate::model::{ParamMap, VideoModel};
use crate::tensor::optim::{Adam, AdamMoments, DEFAULT_LR};
use crate::tensor::{DType, Tensor};

pub const DEFAULT_EMA_DECAY: f64 = 0.999;
pub const DEFAULT_CHECKPOINT_EVERY: u64 = 100;
/// Base-model training runs far from convergence, so it uses a larger step.
pub const DEFAULT_PRETRAIN_LR: f32 = 1e-3;

/// Which parameters receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    /// Temporal blocks only.
    #[default]
    Temporal,
    /// Everything except static positional tables.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch: usize,
    pub steps: u64,
    pub ema_decay: f64,
    pub grad_checkpoint: bool,
    pub mixed_precision: bool,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub scope: TrainScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: DEFAULT_LR,
            batch: 1,
            steps: 500,
            ema_decay: DEFAULT_EMA_DECAY,
            grad_checkpoint: true,
            mixed_precision: false,
            checkpoint_every: DEFAULT_CHECKPOINT_EVERY,
            seed: 0,
            scope: TrainScope::Temporal,
        }
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig { lr: DEFAULT_PRETRAIN_LR, scope: TrainScope::Full, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 {
            bad.push("batch must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            bad.push(format!("ema decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if self.checkpoint_every == 0 {
            bad.push("checkpoint interval must be >= 1".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(bad.join("; ")))
        }
    }

    pub fn adam(&self) -> Adam {
        Adam::with_lr(self.lr)
    }
}

/// Exponential moving average `ema <- d * ema + (1 - d) * w`, kept in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub shadow: BTreeMap<String, Vec<f64>>,
}

impl Ema {
    /// Shadows every parameter in `names`, starting from its current value.
    pub fn new<'a>(params: &ParamMap, names: impl IntoIterator<Item = &'a String>, decay: f64) -> Result<Ema> {
        let shadow = names
            .into_iter()
            .map(|n| {
                let t = params.get(n).ok_or_else(|| Error::MissingTensor(n.clone()))?;
                Ok((n.clone(), t.data().iter().map(|&v| v as f64).collect()))
            })
            .collect::<Result<_>>()?;
        Ok(Ema { decay, shadow })
    }

    pub fn update(&mut self, params: &ParamMap) -> Result<()> {
        let d = self.decay;
        for (name, s) in &mut self.shadow {
            let w = params.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?.data();
            for (e, &w) in s.iter_mut().zip(w.iter()) {
                *e = d * *e + (1.0 - d) * w as f64;
            }
        }
        Ok(())
    }

    /// `params` with shadowed entries replaced by their (f32) averages.
    pub fn apply_to(&self, params: &ParamMap) -> Result<ParamMap> {
        let mut out = params.clone();
        for (name, s) in &self.shadow {
            let p = &params[name];
            let v = s.iter().map(|&x| x as f32).collect();
            out.insert(name.clone(), Tensor::new(v, p.shape())?.to_dtype(p.dtype()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub moments: BTreeMap<String, AdamMoments>,
    pub ema: Ema,
    /// Every parameter name → whether it is updated.
    pub mask: BTreeMap<String, bool>,
    pub seed: u64,
    pub loss_history: Vec<(u64, f32)>,
}

impl TrainState {
    /// Fresh state for `model`; applies the scope's mask to the model and, with
    /// `mixed_precision`, stores the frozen parameters as f16.
    pub fn new(model: &mut VideoModel, config: &TrainConfig) -> Result<TrainState> {
        let mask = match config.scope {
            TrainScope::Temporal => freeze_non_temporal(model)?,
            TrainScope::Full => {
                let mask = model.pretrain_mask();
                model.set_trainable(&mask)?;
                mask
            }
        };
        if config.mixed_precision {
            apply_mixed_precision(model, &mask)?;
        }
        Ok(Self::for_params(model.params(), mask, config))
    }

    /// Fresh state over an arbitrary parameter map.
    pub fn for_params(params: &ParamMap, mask: BTreeMap<String, bool>, config: &TrainConfig) -> TrainState {
        let trainable: Vec<&String> = mask.iter().filter(|(_, &on)| on).map(|(k, _)| k).collect();
        let moments = trainable.iter().map(|&n| (n.clone(), AdamMoments::zeros(params[n].numel()))).collect();
        let ema = Ema::new(params, trainable, config.ema_decay).expect("mask names come from params");
        TrainState { step: 0, moments, ema, mask, seed: config.seed, loss_history: Vec::new() }
    }

    /// Adam then EMA update of every trainable entry of `params`. Trainable
    /// entries without a gradient get a zero gradient.
    pub fn apply_gradients(
        &mut self,
        params: &mut ParamMap,
        grads: &BTreeMap<String, Vec<f32>>,
        adam: &Adam,
    ) -> Result<()> {
        for (name, moments) in &mut self.moments {
            let p = params.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            let zero;
            let g = match grads.get(name) {
                Some(g) => g.as_slice(),
                None => {
                    zero = vec![0.0; p.numel()];
                    &zero
                }
            };
            let updated = adam.step(name, p, g, moments)?;
            params.insert(name.clone(), updated);
        }
        self.ema.update(params)?;
        self.step += 1;
        Ok(())
    }

    /// Seed of the rng that draws timestep and noise for `step`.
    pub fn batch_seed(&self, step: u64) -> u64 {
        self.seed ^ step.rotate_left(32)
    }
}

/// Marks temporal parameters trainable and all others frozen; returns the mask.
pub fn freeze_non_temporal(model: &mut VideoModel) -> Result<BTreeMap<String, bool>> {
    let mask = model.freeze_mask()?;
    model.set_trainable(&mask)?;
    Ok(mask)
}

/// Stores frozen parameters as f16. Arithmetic still runs in f32.
pub fn apply_mixed_precision(model: &mut VideoModel, mask: &BTreeMap<String, bool>) -> Result<()> {
    for (name, &trainable) in mask {
        if !trainable {
            let t = model.param(name)?.to_dtype(DType::F16);
            model.set_param(name, t)?;
        }
    }
    Ok(())
}

/// Forward with per-level recomputation during backward.
pub fn checkpointed_forward(model: &VideoModel, noisy: &Tensor, first: &Tensor, t: &Tensor) -> Result<Tensor> {
    let mut m = model.clone();
    m.set_grad_checkpointing(true);
    m.forward(noisy, first, t)
}

/// One optimization step on `batch`. Returns the loss.
pub fn train_step(
    model: &mut VideoModel,
    state: &mut TrainState,
    batch: &Batch,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<f32> {
    let step = state.step;
    let batch_seed = state.batch_seed(step);
    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
    model.set_grad_checkpointing(config.grad_checkpoint);
    let loss = training_loss(model, schedule, batch, &mut rng)?;
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step, batch_seed });
    }
    loss.backward()?;
    let grads: BTreeMap<String, Vec<f32>> = state
        .moments
        .keys()
        .filter_map(|n| model.params()[n].grad_vec().map(|g| (n.clone(), g)))
        .collect();
    state.apply_gradients(model.params_mut(), &grads, &config.adam())?;
    state.loss_history.push((step, value));
    Ok(value)
}

/// Files of a training run directory.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn config(&self) -> PathBuf {
        self.0.join("config.json")
    }

    pub fn loss_csv(&self) -> PathBuf {
        self.0.join("loss.csv")
    }

    pub fn raw(&self, step: u64) -> PathBuf {
        self.0.join(format!("ckpt_{step}.exvc"))
    }

    pub fn ema(&self, step: u64) -> PathBuf {
        self.0.join(format!("ckpt_{step}_ema.exvc"))
    }
}

/// Name prefix of optimizer and EMA state inside raw training checkpoints.
pub const TRAIN_PREFIX: &str = "train.";

/// Model tensors plus everything needed to resume, under `train.*`.
fn raw_checkpoint(model: &VideoModel, state: &TrainState) -> Result<ParamMap> {
    let mut out = model.state_dict();
    let scalar = |v: Vec<f32>| Tensor::new(v.clone(), &[v.len()]);
    out.insert("train.step".into(), scalar(split_u64(state.step))?);
    out.insert("train.seed".into(), scalar(split_u64(state.seed))?);
    let (steps, losses): (Vec<u64>, Vec<f32>) = state.loss_history.iter().copied().unzip();
    out.insert("train.loss".into(), scalar(losses)?);
    out.insert("train.loss_step_base".into(), scalar(split_u64(steps.first().copied().unwrap_or(0)))?);
    for (name, m) in &state.moments {
        let shape = model.param(name)?.shape().to_vec();
        out.insert(format!("train.adam.{name}.m"), Tensor::new(m.m.clone(), &shape)?);
        out.insert(format!("train.adam.{name}.v"), Tensor::new(m.v.clone(), &shape)?);
        out.insert(format!("train.adam.{name}.t"), scalar(split_u64(m.step))?);
    }
    for (name, s) in &state.ema.shadow {
        // exact f64 bit patterns, so a resumed run continues bit for bit
        let limbs: Vec<f32> = s.iter().flat_map(|x| split_u64(x.to_bits())).collect();
        out.insert(format!("train.ema.{name}"), Tensor::new(limbs, &[s.len(), 4])?);
    }
    out.insert("train.ema_decay".into(), scalar(vec![state.ema.decay as f32])?);
    Ok(out)
}

/// A u64 as four 16-bit limbs, each exact in f32, most significant first.
fn split_u64(v: u64) -> Vec<f32> {
    (0..4).rev().map(|i| ((v >> (16 * i)) & 0xFFFF) as f32).collect()
}

fn join_u64(t: &Tensor) -> Result<u64> {
    let v = t.data();
    if v.len() != 4 || v.iter().any(|&x| !(0.0..65536.0).contains(&x) || x.fract() != 0.0) {
        return Err(Error::InvalidInput("malformed counter tensor".into()));
    }
    Ok(v.iter().fold(0u64, |acc, &x| (acc << 16) | x as u64))
}

/// Splits a raw training checkpoint back into model and state.
pub fn resume_from(path: impl AsRef<Path>, config: &TrainConfig) -> Result<(VideoModel, TrainState)> {
    let mut tensors = checkpoint::load(path)?;
    let mut train: ParamMap = ParamMap::new();
    let keys: Vec<String> = tensors.keys().filter(|k| k.starts_with(TRAIN_PREFIX)).cloned().collect();
    for k in keys {
        let t = tensors.remove(&k).expect("listed");
        train.insert(k[TRAIN_PREFIX.len()..].to_string(), t);
    }
    let get = |n: &str| train.get(n).ok_or_else(|| Error::MissingTensor(format!("{TRAIN_PREFIX}{n}")));
    let step = join_u64(get("step")?)?;
    let seed = join_u64(get("seed")?)?;
    let base = join_u64(get("loss_step_base")?)?;
    let loss_history = get("loss")?.data().iter().enumerate().map(|(i, &l)| (base + i as u64, l)).collect();

    // Restore dtypes chosen by the mixed-precision policy from the saved tensors.
    let mut model = VideoModel::from_state_dict(tensors)?;
    let mut moments = BTreeMap::new();
    let mut shadow = BTreeMap::new();
    for name in model.params().keys() {
        if let (Ok(m), Ok(v), Ok(t)) = (get(&format!("adam.{name}.m")), get(&format!("adam.{name}.v")), get(&format!("adam.{name}.t"))) {
            moments.insert(name.clone(), AdamMoments { step: join_u64(t)?, m: m.to_vec(), v: v.to_vec() });
            let limbs = get(&format!("ema.{name}"))?.data();
            let values = limbs
                .chunks(4)
                .map(|c| join_u64(&Tensor::new(c.to_vec(), &[4])?).map(f64::from_bits))
                .collect::<Result<Vec<f64>>>()?;
            shadow.insert(name.clone(), values);
        }
    }
    let mask: BTreeMap<String, bool> = model.params().keys().map(|n| (n.clone(), moments.contains_key(n))).collect();
    model.set_trainable(&mask)?;
    let ema = Ema { decay: config.ema_decay, shadow };
    Ok((model, TrainState { step, moments, ema, mask, seed, loss_history }))
}

fn write_losses(path: &Path, history: &[(u64, f32)]) -> Result<()> {
    let csv_err = |source| Error::Csv { context: format!("writing {}", path.display()), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "loss"]).map_err(csv_err)?;
    for (step, loss) in history {
        w.write_record([step.to_string(), format!("{loss:e}")]).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(format!("writing {}", path.display())))
}

/// Runs `config.steps` total steps (continuing from `state.step`), saving raw
/// and EMA checkpoints every `checkpoint_every` steps and at the end.
pub fn train_loop(
    model: &mut VideoModel,
    state: &mut TrainState,
    data: &MovingShapes,
    config: &TrainConfig,
    run_dir: Option<&Path>,
    mut on_step: impl FnMut(u64, f32),
) -> Result<()> {
    config.validate()?;
    let schedule = NoiseSchedule::default();
    let dir = run_dir.map(|d| RunDir(d.to_path_buf()));
    if let Some(dir) = &dir {
        fs::create_dir_all(&dir.0).map_err(io_err(format!("creating {}", dir.0.display())))?;
        let json = serde_json::to_string_pretty(config)
            .map_err(|source| Error::Json { context: "encoding train config".into(), source })?;
        fs::write(dir.config(), json + "\n").map_err(io_err(format!("writing {}", dir.config().display())))?;
    }
    while state.step < config.steps {
        let batch = data.batch(state.step, config.batch)?;
        let loss = train_step(model, state, &batch, config, &schedule)?;
        on_step(state.step - 1, loss);
        let done = state.step == config.steps;
        if let Some(dir) = &dir {
            if state.step % config.checkpoint_every == 0 || done {
                checkpoint::save(&raw_checkpoint(model, state)?, dir.raw(state.step))?;
                let mut ema_tensors = state.ema.apply_to(model.params())?;
                ema_tensors.extend(model.buffers().iter().map(|(k, v)| (k.clone(), v.clone())));
                checkpoint::save(&ema_tensors, dir.ema(state.step))?;
                write_losses(&dir.loss_csv(), &state.loss_history)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe() -> ParamMap {
        let mut p = ParamMap::new();
        p.insert("a".into(), Tensor::new(vec![0.5], &[1]).unwrap());
        p.insert("b".into(), Tensor::new(vec![-1.5], &[1]).unwrap());
        p
    }

    #[test]
    fn zero_decay_tracks_weights() {
        let mut p = probe();
        let mut ema = Ema::new(&p, ["a".to_string()].iter(), 0.0).unwrap();
        p.insert("a".into(), Tensor::new(vec![2.0], &[1]).unwrap());
        ema.update(&p).unwrap();
        assert_eq!(ema.shadow["a"], vec![2.0]);
    }

    #[test]
    fn counters_survive_split() {
        for v in [0u64, 1, 65535, 65536, 1 << 40, u64::MAX] {
            assert_eq!(join_u64(&Tensor::new(split_u64(v), &[4]).unwrap()).unwrap(), v);
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn paper_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.batch), (1e-5, 1));
    }
}
