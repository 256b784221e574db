use featlens_tensor::{sgd_step, Graph, ParamSet, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{apply_transform, batch_tensor, CanvasPolicy, Dataset, Image};
use crate::error::{Error, Result};
use crate::host::{FrozenHost, Host, HostConfig};
use crate::lens::{argmax, Lens, RotationClassifier};
use crate::loss::{feature_loss, LossConfig};
use crate::transform::{bin_angle, LensBin, TransformSpec};

/// Mixing pre-weights are kept inside this range so both weights stay
/// strictly inside (0, 1) in single precision.
const ALPHA_LIMIT: f32 = 12.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub decay: f64,
    /// Epochs between learning-rate decays; fractional periods are allowed.
    pub decay_period: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Stops early once this many steps have run.
    pub max_steps: Option<usize>,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 64,
            initial_lr: 0.01,
            decay: 0.5,
            decay_period: 1.0,
            momentum: 0.9,
            seed: 0,
            max_steps: None,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.initial_lr > 0.0) || !(self.decay > 0.0 && self.decay <= 1.0) || !(self.decay_period > 0.0) {
            return Err(Error::config("learning-rate schedule must stay positive and non-increasing"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// `initial_lr * decay^floor(epoch / decay_period)`; `epoch` may be
/// fractional progress through training.
pub fn lr_at(config: &TrainConfig, epoch: f64) -> f64 {
    let periods = (epoch.max(0.0) / config.decay_period).floor();
    config.initial_lr * config.decay.powf(periods)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: f64,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: Option<f64>,
    /// Scaling-lens mixing weights after the step.
    pub mix: Option<(f32, f32)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,lr,loss,accuracy,w1,w2\n");
        for r in &self.records {
            let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
            let (w1, w2) = r
                .mix
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{acc},{w1},{w2}\n", r.step, r.epoch, r.lr, r.loss));
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean loss of the first and last `window` steps.
    pub fn smoothed_ends(&self, window: usize) -> Option<(f64, f64)> {
        let l = self.losses();
        if l.is_empty() || window == 0 {
            return None;
        }
        let w = window.min(l.len());
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&l[..w]), mean(&l[l.len() - w..])))
    }
}

/// Probability table over the transforms a training batch may receive.
#[derive(Clone, Debug, PartialEq)]
pub struct AugPolicy {
    entries: Vec<(TransformSpec, f64)>,
}

impl AugPolicy {
    pub fn new(entries: Vec<(TransformSpec, f64)>) -> Result<AugPolicy> {
        if entries.is_empty() || entries.iter().any(|(_, p)| !(*p >= 0.0)) {
            return Err(Error::config("augmentation probabilities must be non-negative"));
        }
        let total: f64 = entries.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("augmentation probabilities sum to {total}")));
        }
        Ok(AugPolicy { entries })
    }

    pub fn none() -> AugPolicy {
        AugPolicy {
            entries: vec![(TransformSpec::Identity, 1.0)],
        }
    }

    /// No transform 0.4, each quarter-turn rotation 0.2.
    pub fn small_dataset() -> AugPolicy {
        AugPolicy {
            entries: vec![
                (TransformSpec::Identity, 0.4),
                (TransformSpec::rotation(90.0), 0.2),
                (TransformSpec::rotation(180.0), 0.2),
                (TransformSpec::rotation(270.0), 0.2),
            ],
        }
    }

    /// No transform 0.5, each of three rotations and two downscalings 0.1.
    pub fn large_dataset() -> AugPolicy {
        AugPolicy {
            entries: vec![
                (TransformSpec::Identity, 0.5),
                (TransformSpec::rotation(90.0), 0.1),
                (TransformSpec::rotation(180.0), 0.1),
                (TransformSpec::rotation(270.0), 0.1),
                (TransformSpec::Scaling { scale: 0.5 }, 0.1),
                (TransformSpec::Scaling { scale: 1.0 / 3.0 }, 0.1),
            ],
        }
    }

    pub fn entries(&self) -> &[(TransformSpec, f64)] {
        &self.entries
    }

    pub fn sample(&self, rng: &mut impl Rng) -> TransformSpec {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (spec, p) in &self.entries {
            acc += p;
            if u < acc {
                return *spec;
            }
        }
        self.entries.last().expect("non-empty").0
    }
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Diverged {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            detail: format!("loss is {loss}"),
        })
    }
}

/// Shuffled mini-batches over `n` items for each epoch, capped by
/// `max_steps`. Yields `(step, fractional epoch, indices)`.
fn schedule(n: usize, cfg: &TrainConfig) -> Vec<(usize, f64, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = n.div_ceil(cfg.batch_size);
    let mut out = Vec::new();
    'outer: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.max_steps.is_some_and(|m| out.len() >= m) {
                break 'outer;
            }
            let progress = epoch as f64 + b as f64 / per_epoch as f64;
            out.push((out.len(), progress, chunk.to_vec()));
        }
    }
    out
}

fn upright_images(data: &Dataset, idx: &[usize], hw: (usize, usize)) -> Result<Vec<Image>> {
    idx.iter().map(|&i| data.input_image(i, hw)).collect()
}

fn transformed(images: &[Image], spec: &TransformSpec, policy: CanvasPolicy) -> Result<Vec<Image>> {
    images.iter().map(|im| apply_transform(im, spec, policy)).collect()
}

fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let classes = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Supervised training of a fresh host on upright images.
pub fn train_host(config: HostConfig, data: &Dataset, cfg: &TrainConfig) -> Result<(Host, TrainLog)> {
    train_dataaug(config, data, &AugPolicy::none(), cfg)
}

/// Supervised training of a fresh host where every batch receives one
/// transform drawn from `policy`.
pub fn train_dataaug(
    config: HostConfig,
    data: &Dataset,
    policy: &AugPolicy,
    cfg: &TrainConfig,
) -> Result<(Host, TrainLog)> {
    cfg.validate()?;
    let mut host = Host::build(config)?;
    let hw = host.config().input_hw;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a06d);
    let mut log = TrainLog::default();
    for (step, epoch, idx) in schedule(data.len(), cfg) {
        let spec = policy.sample(&mut aug_rng);
        let images = transformed(&upright_images(data, &idx, hw)?, &spec, CanvasPolicy::PadToCanvas)?;
        let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
        let lr = lr_at(cfg, epoch);
        let (loss, acc) = supervised_step(&mut host, &batch_tensor(&images)?, &labels, lr, cfg.momentum)
            .map_err(|e| diverged(step, e))?;
        check_loss(step, loss)?;
        log.records.push(LogRecord {
            step,
            epoch,
            lr,
            loss,
            accuracy: Some(acc),
            mix: None,
        });
    }
    Ok((host, log))
}

fn supervised_step(host: &mut Host, batch: &Tensor, labels: &[usize], lr: f64, momentum: f64) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let (logits, _) = host.forward(&mut g, x)?;
    let loss = g.cross_entropy(logits, labels)?;
    g.backward(loss)?;
    let acc = batch_accuracy(g.value(logits), labels);
    let value = g.value(loss).item()? as f64;
    host.params_mut().absorb_grads(&g);
    sgd_step(host.params_mut(), lr as f32, momentum as f32)?;
    Ok((value, acc))
}

fn guard_host<T>(host: &FrozenHost, run: impl FnOnce() -> Result<T>) -> Result<T> {
    let before = host.checksum();
    let out = run()?;
    if host.checksum() != before {
        return Err(Error::HostDrift);
    }
    Ok(out)
}

/// Self-supervised lens training: the lens maps taps of transformed images
/// onto the block output of the originals. Labels are never read.
///
/// The identity bin takes no lens and only records the (zero) loss of the
/// pass-through.
pub fn train_lens(
    host: &FrozenHost,
    bin: LensBin,
    mut lens: Option<&mut Lens>,
    data: &Dataset,
    cfg: &TrainConfig,
    policy: CanvasPolicy,
) -> Result<TrainLog> {
    cfg.validate()?;
    match (&lens, bin) {
        (None, LensBin::Identity) => {}
        (Some(l), b) if l.bin() == b && b != LensBin::Identity => {}
        _ => return Err(Error::config(format!("lens does not match bin {bin}"))),
    }
    let hw = host.config().input_hw;
    let spec = bin.spec();
    guard_host(host, || {
        let mut log = TrainLog::default();
        for (step, epoch, idx) in schedule(data.len(), cfg) {
            let originals = upright_images(data, &idx, hw)?;
            let (_, target) = host.forward_with_taps(&batch_tensor(&originals)?)?;
            let (_, taps) = host.forward_with_taps(&batch_tensor(&transformed(&originals, &spec, policy)?)?)?;
            let lr = lr_at(cfg, epoch);
            let mut record = LogRecord {
                step,
                epoch,
                lr,
                loss: 0.0,
                accuracy: None,
                mix: None,
            };
            let mut g = Graph::new();
            match lens.as_deref_mut() {
                None => {
                    let y = g.constant(taps.out);
                    let loss = feature_loss(&mut g, &target.out, y, &cfg.loss)?;
                    record.loss = g.value(loss).item()? as f64;
                }
                Some(lens) => {
                    let t = lens.prepare_taps(&taps)?;
                    let x2 = g.constant(t.x2);
                    let x0 = g.constant(t.x0);
                    let x3 = g.constant(t.x3);
                    let y = lens.forward(&mut g, x2, x0, x3).map_err(|e| diverged(step, e))?;
                    let loss = feature_loss(&mut g, &target.out, y, &cfg.loss)?;
                    record.loss = g.value(loss).item()? as f64;
                    check_loss(step, record.loss)?;
                    g.backward(loss).map_err(|e| diverged(step, e.into()))?;
                    lens.params_mut().absorb_grads(&g);
                    sgd_step(lens.params_mut(), lr as f32, cfg.momentum as f32)?;
                    if let Lens::Scaling(s) = lens {
                        clamp_alpha(s.params_mut())?;
                        record.mix = Some(s.weights()?);
                    }
                }
            }
            check_loss(step, record.loss)?;
            log.records.push(record);
        }
        Ok(log)
    })
}

fn clamp_alpha(params: &mut ParamSet) -> Result<()> {
    let a = params.get("mix.alpha")?.item()?;
    if a.abs() > ALPHA_LIMIT {
        params.set("mix.alpha", Tensor::scalar(a.clamp(-ALPHA_LIMIT, ALPHA_LIMIT)))?;
    }
    Ok(())
}

/// One optimizer step of the rotation classifier on given lens inputs.
/// Returns the batch loss and accuracy.
pub fn rot_classifier_step(
    clf: &mut RotationClassifier,
    x2: &Tensor,
    x0: &Tensor,
    labels: &[usize],
    lr: f64,
    momentum: f64,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let a = g.constant(x2.clone());
    let b = g.constant(x0.clone());
    let logits = clf.logits(&mut g, a, b)?;
    let loss = g.cross_entropy(logits, labels)?;
    g.backward(loss)?;
    let acc = batch_accuracy(g.value(logits), labels);
    let value = g.value(loss).item()? as f64;
    clf.params_mut().absorb_grads(&g);
    sgd_step(clf.params_mut(), lr as f32, momentum as f32)?;
    Ok((value, acc))
}

/// Trains the rotation-type classifier on images rotated by angles drawn
/// uniformly from `[0, 360)`, labelled by their bin.
pub fn train_rot_classifier(
    host: &FrozenHost,
    clf: &mut RotationClassifier,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let hw = host.config().input_hw;
    let mut angle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0a46_1e5);
    guard_host(host, || {
        let mut log = TrainLog::default();
        for (step, epoch, idx) in schedule(data.len(), cfg) {
            let mut images = Vec::with_capacity(idx.len());
            let mut labels = Vec::with_capacity(idx.len());
            for im in upright_images(data, &idx, hw)? {
                let angle: f64 = angle_rng.random_range(0.0..360.0);
                let bin = bin_angle(angle);
                labels.push(LensBin::ROTATIONS.iter().position(|&b| b == bin).expect("rotation bin"));
                images.push(apply_transform(&im, &TransformSpec::rotation(angle), CanvasPolicy::PadToCanvas)?);
            }
            let (_, taps) = host.forward_with_taps(&batch_tensor(&images)?)?;
            let lr = lr_at(cfg, epoch);
            let (loss, acc) = rot_classifier_step(clf, &taps.x2, &taps.x0, &labels, lr, cfg.momentum)
                .map_err(|e| diverged(step, e))?;
            check_loss(step, loss)?;
            log.records.push(LogRecord {
                step,
                epoch,
                lr,
                loss,
                accuracy: Some(acc),
                mix: None,
            });
        }
        Ok(log)
    })
}

/// Extra residual bottleneck block stacked on the frozen host's block
/// output; its closing convolution starts at zero so the block starts as
/// the identity.
#[derive(Clone, Debug)]
pub struct Xlayer {
    params: ParamSet,
}

impl Xlayer {
    pub fn new(config: &HostConfig, seed: u64) -> Result<Xlayer> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, wide) = (config.bottleneck_width, config.block_width());
        let mut params = ParamSet::new();
        let mut he = |shape: Vec<usize>, fan_in: usize| {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(shape, |_| d.sample(&mut rng) as f32)
        };
        params.insert("conv1.weight", he(vec![n, wide, 1, 1], wide))?;
        params.insert("conv1.bias", Tensor::zeros(vec![n]))?;
        params.insert("conv2.weight", he(vec![n, n, 3, 3], n * 9))?;
        params.insert("conv2.bias", Tensor::zeros(vec![n]))?;
        params.insert("conv3.weight", Tensor::zeros(vec![wide, n, 1, 1]))?;
        params.insert("conv3.bias", Tensor::zeros(vec![wide]))?;
        Ok(Xlayer { params })
    }

    pub fn from_params(params: ParamSet) -> Xlayer {
        Xlayer { params }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph, x: featlens_tensor::Var) -> Result<featlens_tensor::Var> {
        let mut h = x;
        for (name, pad) in [("conv1", 0), ("conv2", 1), ("conv3", 0)] {
            let w = self.params.bind(g, &format!("{name}.weight"))?;
            let b = self.params.bind(g, &format!("{name}.bias"))?;
            h = g.conv2d(h, w, Some(b), 1, pad)?;
            if name != "conv3" {
                h = g.relu(h)?;
            }
        }
        let sum = g.add(h, x)?;
        Ok(g.relu(sum)?)
    }

    /// Host logits with this block inserted before the classifier head.
    pub fn logits(&self, host: &FrozenHost, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let taps = host.features(&mut g, x)?;
        let y = self.forward(&mut g, taps.out)?;
        let l = host.head(&mut g, y)?;
        Ok(g.value(l).clone())
    }
}

/// Class-supervised training of the extra block on the dataset's recorded
/// transforms; host and classifier head stay frozen.
pub fn train_xlayer(host: &FrozenHost, xlayer: &mut Xlayer, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let hw = host.config().input_hw;
    guard_host(host, || {
        let mut log = TrainLog::default();
        for (step, epoch, idx) in schedule(data.len(), cfg) {
            let images: Vec<Image> = idx
                .iter()
                .map(|&i| data.rendered(i, hw, CanvasPolicy::PadToCanvas))
                .collect::<Result<_>>()?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
            let (_, taps) = host.forward_with_taps(&batch_tensor(&images)?)?;
            let lr = lr_at(cfg, epoch);
            let mut g = Graph::new();
            let x = g.constant(taps.out);
            let y = xlayer.forward(&mut g, x).map_err(|e| diverged(step, e))?;
            let logits = host.head(&mut g, y)?;
            let loss = g.cross_entropy(logits, &labels)?;
            g.backward(loss).map_err(|e| diverged(step, e.into()))?;
            let value = g.value(loss).item()? as f64;
            check_loss(step, value)?;
            let acc = batch_accuracy(g.value(logits), &labels);
            xlayer.params_mut().absorb_grads(&g);
            sgd_step(xlayer.params_mut(), lr as f32, cfg.momentum as f32)?;
            log.records.push(LogRecord {
                step,
                epoch,
                lr,
                loss: value,
                accuracy: Some(acc),
                mix: None,
            });
        }
        Ok(log)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_halves_each_period() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(&c, 0.0), 0.01);
        assert_eq!(lr_at(&c, 1.0), 0.005);
        assert_eq!(lr_at(&c, 2.0), 0.0025);
        assert_eq!(lr_at(&c, 1.99), 0.005);
    }

    #[test]
    fn policy_must_sum_to_one() {
        assert!(AugPolicy::new(vec![(TransformSpec::Identity, 0.5)]).is_err());
        assert!(AugPolicy::new(vec![(TransformSpec::Identity, 1.0)]).is_ok());
        let p = AugPolicy::large_dataset();
        assert!(AugPolicy::new(p.entries().to_vec()).is_ok());
    }

    #[test]
    fn schedule_respects_step_cap() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            max_steps: Some(5),
            ..TrainConfig::default()
        };
        let s = schedule(10, &cfg);
        assert_eq!(s.len(), 5);
        assert_eq!(s[3].1, 1.0);
    }
}
