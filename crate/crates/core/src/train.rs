//! Softmax pretraining and sigmoid-head fine-tuning.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BceCoefficients, Tape};
use crate::config::{self, KvConfig};
use crate::data::{flip_horizontal, SynthSample};
use crate::error::{Error, Result};
use crate::model::{DualBranchModel, Part};
use crate::ops;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    SoftmaxPretrain,
    SigmoidFinetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::SoftmaxPretrain => "softmax_pretrain",
            Phase::SigmoidFinetune => "sigmoid_finetune",
        }
    }
}

/// Ratio `ρ` of the positive to the negative BCE coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PosWeightMode {
    /// `ρ = C − 1`
    Balanced,
    /// `ρ = (C − 1) / 2`
    Half,
    /// `ρ = 1`
    None,
}

impl PosWeightMode {
    pub const ALL: [PosWeightMode; 3] = [PosWeightMode::None, PosWeightMode::Half, PosWeightMode::Balanced];

    pub fn name(self) -> &'static str {
        match self {
            PosWeightMode::Balanced => "balanced",
            PosWeightMode::Half => "half",
            PosWeightMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "balanced" => Ok(PosWeightMode::Balanced),
            "half" => Ok(PosWeightMode::Half),
            "none" => Ok(PosWeightMode::None),
            _ => Err(format!("unknown pos_weight_mode `{s}` (balanced|half|none)")),
        }
    }

    pub fn ratio(self, num_classes: usize) -> f64 {
        let c = num_classes as f64;
        match self {
            PosWeightMode::Balanced => c - 1.0,
            PosWeightMode::Half => (c - 1.0) / 2.0,
            PosWeightMode::None => 1.0,
        }
    }

    /// Negative coefficient fixed at `1/C`, positive at `ρ/C`.
    pub fn coefficients(self, num_classes: usize) -> BceCoefficients {
        let c = num_classes as f64;
        BceCoefficients {
            positive: self.ratio(num_classes) / c,
            negative: 1.0 / c,
        }
    }
}

impl fmt::Display for PosWeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Training hyperparameters. `epochs` and `learning_rate` fall back to
/// phase-specific defaults when unset. Equality compares resolved values.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub seed: u64,
    pub pos_weight_mode: PosWeightMode,
    pub flip: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::SoftmaxPretrain,
            epochs: None,
            batch_size: 32,
            learning_rate: None,
            weight_decay: 1e-4,
            seed: 17,
            pos_weight_mode: PosWeightMode::Balanced,
            flip: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl PartialEq for TrainConfig {
    fn eq(&self, o: &Self) -> bool {
        self.phase == o.phase
            && self.epochs() == o.epochs()
            && self.batch_size == o.batch_size
            && self.learning_rate().to_bits() == o.learning_rate().to_bits()
            && self.weight_decay.to_bits() == o.weight_decay.to_bits()
            && self.seed == o.seed
            && self.pos_weight_mode == o.pos_weight_mode
            && self.flip == o.flip
            && self.beta1.to_bits() == o.beta1.to_bits()
            && self.beta2.to_bits() == o.beta2.to_bits()
            && self.eps.to_bits() == o.eps.to_bits()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self::default()
    }

    pub fn finetune(mode: PosWeightMode) -> Self {
        Self {
            phase: Phase::SigmoidFinetune,
            pos_weight_mode: mode,
            ..Self::default()
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.phase {
            Phase::SoftmaxPretrain => 20,
            Phase::SigmoidFinetune => 10,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.phase {
            Phase::SoftmaxPretrain => 1e-3,
            Phase::SigmoidFinetune => 3e-3,
        })
    }

    fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "phase" => {
                self.phase = match value {
                    "softmax_pretrain" => Phase::SoftmaxPretrain,
                    "sigmoid_finetune" => Phase::SigmoidFinetune,
                    _ => return Err(format!("unknown phase `{value}`")),
                }
            }
            "epochs" => self.epochs = Some(config::parse_usize(value)?),
            "batch_size" => self.batch_size = config::parse_usize(value)?,
            "learning_rate" => self.learning_rate = Some(config::parse_f64(value)?),
            "weight_decay" => self.weight_decay = config::parse_f64(value)?,
            "seed" => self.seed = config::parse_u64(value)?,
            "pos_weight_mode" => self.pos_weight_mode = PosWeightMode::parse(value)?,
            "flip" => self.flip = config::parse_bool(value)?,
            "beta1" => self.beta1 = config::parse_f64(value)?,
            "beta2" => self.beta2 = config::parse_f64(value)?,
            "eps" => self.eps = config::parse_f64(value)?,
            _ => return Err(config::unknown_key(key)),
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        format!(
            "phase = {}\nepochs = {}\nbatch_size = {}\nlearning_rate = {:e}\nweight_decay = {:e}\n\
             seed = {}\npos_weight_mode = {}\nflip = {}\nbeta1 = {}\nbeta2 = {}\neps = {:e}\n",
            self.phase.name(),
            self.epochs(),
            self.batch_size,
            self.learning_rate(),
            self.weight_decay,
            self.seed,
            self.pos_weight_mode,
            self.flip,
            self.beta1,
            self.beta2,
            self.eps
        )
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if self.learning_rate() < 0.0 {
            return Err("learning_rate must be non-negative".into());
        }
        if self.weight_decay < 0.0 {
            return Err("weight_decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err("Adam needs 0 <= beta < 1 and eps > 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment buffers for an ordered parameter list.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Real = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl<T: Real> OptimizerState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, hyper: AdamHyper) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            hyper,
        }
    }
}

/// One Adam step with bias correction. Weight decay is decoupled: each
/// parameter is first scaled by `1 − lr·wd`.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let AdamHyper { beta1, beta2, eps } = state.hyper;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    let shrink = 1.0 - lr * weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j].f64();
            let mj = beta1 * m[j].f64() + (1.0 - beta1) * gj;
            let vj = beta2 * v[j].f64() + (1.0 - beta2) * gj * gj;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
            *w = T::of(w.f64() * shrink - update);
        }
    }
    Ok(())
}

/// Class-weighted BCE on probabilities `[B, C]` with one positive class per
/// row. Evaluated through logits for stability.
pub fn balanced_bce_loss<T: Real>(
    scores: &Tensor<T>,
    labels: &[usize],
    coefficients: BceCoefficients,
) -> Result<f64> {
    if scores.rank() != 2 {
        return Err(Error::shape("balanced_bce_loss", format!("{:?}", scores.shape())));
    }
    if let Some(bad) = scores
        .data()
        .iter()
        .map(|s| s.f64())
        .find(|s| !(*s > 0.0 && *s < 1.0))
    {
        return Err(Error::Domain(format!("score {bad} outside (0, 1)")));
    }
    let logits = scores.map(|s| T::of((s.f64() / (1.0 - s.f64())).ln()));
    let mut tape = Tape::<T>::new();
    let z = tape.constant(logits);
    let loss = tape.binary_cross_entropy(z, labels, coefficients)?;
    Ok(tape.value(loss).data()[0].f64())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// Accuracy on the training split after the last epoch, when measured.
    pub train_accuracy: Option<f64>,
}

fn epoch_order(seed: u64, epoch: usize, n: usize, flip: bool) -> Vec<(usize, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|i| (i, flip && rng.gen::<bool>()))
        .collect()
}

fn check_phase(config: &TrainConfig, phase: Phase) -> Result<()> {
    config.validate().map_err(Error::Invalid)?;
    if config.phase != phase {
        return Err(Error::Precondition(format!(
            "config phase is {}, expected {}",
            config.phase.name(),
            phase.name()
        )));
    }
    Ok(())
}

/// Cross-entropy training of the backbone and softmax head.
pub fn softmax_pretrain(
    model: &mut DualBranchModel,
    samples: &[SynthSample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    check_phase(config, Phase::SoftmaxPretrain)?;
    if samples.is_empty() {
        return Err(Error::Precondition("empty training split".into()));
    }
    if model.is_frozen(Part::Backbone) || model.is_frozen(Part::SoftmaxHead) {
        return Err(Error::Precondition(
            "backbone and softmax head must be trainable".into(),
        ));
    }
    let flipped: Vec<Tensor<f32>> = if config.flip {
        samples.iter().map(|s| flip_horizontal(&s.image)).collect()
    } else {
        Vec::new()
    };
    let lr = config.learning_rate();
    let mut state = {
        let params: Vec<&Tensor<f32>> = model
            .backbone
            .blocks
            .iter()
            .flat_map(|b| [&b.kernel, &b.bias])
            .chain([&model.softmax_head.weight, &model.softmax_head.bias])
            .collect();
        OptimizerState::new(params, config.adam())
    };
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs() {
        let order = epoch_order(config.seed, epoch, samples.len(), config.flip);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let images: Vec<&Tensor<f32>> = batch
                .iter()
                .map(|&(i, f)| if f { &flipped[i] } else { &samples[i].image })
                .collect();
            let labels: Vec<usize> = batch.iter().map(|&(i, _)| samples[i].label).collect();

            let mut tape = Tape::new();
            let bvars = model.backbone.bind(&mut tape, true);
            let hvars = model.softmax_head.bind(&mut tape, true);
            let input = tape.constant(Tensor::stack(&images)?);
            let f = model.backbone.forward(&mut tape, &bvars, input)?;
            let logits = model.softmax_head.forward(&mut tape, hvars, f)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step: report.steps });
            }
            tape.backward(loss)?;

            let vars: Vec<_> = bvars.params().chain([hvars.weight, hvars.bias]).collect();
            let grads: Vec<&Tensor<f32>> = vars
                .iter()
                .map(|&v| tape.grad(v).expect("parameter gradient"))
                .collect();
            let mut params: Vec<&mut Tensor<f32>> = model
                .backbone
                .tensors_mut()
                .chain(model.softmax_head.tensors_mut())
                .collect();
            adam_step(&mut params, &grads, &mut state, lr, config.weight_decay)?;
            total += value * batch.len() as f64;
            report.steps += 1;
        }
        report.epoch_losses.push(total / samples.len() as f64);
    }
    report.train_accuracy = Some(softmax_accuracy(model, samples)?);
    Ok(report)
}

const EVAL_BATCH: usize = 50;

/// Softmax probabilities for every sample, in order.
pub fn softmax_predictions(model: &DualBranchModel, samples: &[SynthSample]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let f = model.features(&Tensor::stack(&images)?)?;
        let probs = ops::softmax_rows(&model.softmax_head.logits(&f)?)?;
        let c = model.num_classes();
        out.extend(probs.data().chunks_exact(c).map(|r| r.to_vec()));
    }
    Ok(out)
}

pub fn softmax_accuracy(model: &DualBranchModel, samples: &[SynthSample]) -> Result<f64> {
    let probs = softmax_predictions(model, samples)?;
    let correct = probs
        .iter()
        .zip(samples)
        .filter(|(p, s)| ops::argmax(p) == s.label)
        .count();
    Ok(correct as f64 / samples.len().max(1) as f64)
}

fn pooled_features(model: &DualBranchModel, images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut rows: Vec<f32> = Vec::new();
    for chunk in images.chunks(EVAL_BATCH) {
        let f = model.features(&Tensor::stack(chunk)?)?;
        rows.extend_from_slice(ops::global_avg_pool(&f)?.data());
    }
    let n = model.arch.feature_channels();
    Tensor::new([images.len(), n], rows)
}

/// Train the sigmoid head with the weighted BCE while the backbone and
/// softmax head stay frozen. Because the backbone is frozen, pooled features
/// are computed once up front.
pub fn sigmoid_finetune(
    model: &mut DualBranchModel,
    samples: &[SynthSample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    check_phase(config, Phase::SigmoidFinetune)?;
    if samples.is_empty() {
        return Err(Error::Precondition("empty training split".into()));
    }
    if model.sigmoid_head.is_none() {
        return Err(Error::Precondition("sigmoid head has not been replicated".into()));
    }
    if !model.is_frozen(Part::Backbone) || !model.is_frozen(Part::SoftmaxHead) {
        return Err(Error::Precondition(
            "backbone and softmax head must be frozen".into(),
        ));
    }
    if model.is_frozen(Part::SigmoidHead) {
        return Err(Error::Precondition("sigmoid head is frozen".into()));
    }
    model.verify_frozen()?;

    let originals: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let pooled = pooled_features(model, &originals)?;
    let pooled_flipped = if config.flip {
        let flipped: Vec<Tensor<f32>> = samples.iter().map(|s| flip_horizontal(&s.image)).collect();
        Some(pooled_features(model, &flipped.iter().collect::<Vec<_>>())?)
    } else {
        None
    };
    let coefficients = config.pos_weight_mode.coefficients(model.num_classes());
    let lr = config.learning_rate();
    let n = model.arch.feature_channels();
    let head = model.sigmoid_head.as_mut().expect("checked above");
    let mut state = OptimizerState::new([&head.weight, &head.bias], config.adam());
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs() {
        let order = epoch_order(config.seed, epoch, samples.len(), config.flip);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut rows = Vec::with_capacity(batch.len() * n);
            for &(i, f) in batch {
                let src = match (&pooled_flipped, f) {
                    (Some(pf), true) => pf,
                    _ => &pooled,
                };
                rows.extend_from_slice(src.outer(i));
            }
            let labels: Vec<usize> = batch.iter().map(|&(i, _)| samples[i].label).collect();

            let mut tape = Tape::new();
            let hvars = head.bind(&mut tape, true);
            let x = tape.constant(Tensor::new([batch.len(), n], rows)?);
            let logits = tape.fully_connected(x, hvars.weight, hvars.bias)?;
            let loss = tape.binary_cross_entropy(logits, &labels, coefficients)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step: report.steps });
            }
            tape.backward(loss)?;
            let grads = [
                tape.grad(hvars.weight).expect("weight gradient"),
                tape.grad(hvars.bias).expect("bias gradient"),
            ];
            let mut params: Vec<&mut Tensor<f32>> = head.tensors_mut().into_iter().collect();
            adam_step(&mut params, &grads, &mut state, lr, config.weight_decay)?;
            total += value * batch.len() as f64;
            report.steps += 1;
        }
        report.epoch_losses.push(total / samples.len() as f64);
    }
    model.verify_frozen()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec, Split};
    use crate::model::Arch;

    fn tiny() -> (DualBranchModel, Vec<SynthSample>) {
        let spec = DatasetSpec {
            train_samples: 24,
            ..DatasetSpec::default()
        };
        let samples = generate(&spec, Split::Train).unwrap();
        (DualBranchModel::new(Arch::default(), 4, 3).unwrap(), samples)
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = Tensor::<f64>::scalar(0.0);
        let g = Tensor::<f64>::scalar(1.0);
        let mut st = OptimizerState::new([&p], AdamHyper::default());
        adam_step(&mut [&mut p], &[&g], &mut st, 0.1, 0.0).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-8);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f32>::from_fn([5], |i| i as f32);
        let before = p.clone();
        let g = Tensor::zeros([5]);
        let mut st = OptimizerState::new([&p], AdamHyper::default());
        adam_step(&mut [&mut p], &[&g], &mut st, 0.1, 0.0).unwrap();
        assert!(p.bits_eq(&before));
    }

    #[test]
    fn bce_closed_form_and_domain() {
        let s = Tensor::<f64>::full([3, 10], 0.5);
        let l = balanced_bce_loss(&s, &[0, 4, 9], PosWeightMode::Balanced.coefficients(10)).unwrap();
        assert!((l - 1.8 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(
            balanced_bce_loss(
                &Tensor::<f64>::full([1, 2], 1.0),
                &[0],
                PosWeightMode::None.coefficients(2)
            ),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn bce_perfect_prediction_limit() {
        let eps = 1e-9;
        let s = Tensor::<f64>::new([1, 2], vec![1.0 - eps, eps]).unwrap();
        let l = balanced_bce_loss(&s, &[0], PosWeightMode::Balanced.coefficients(2)).unwrap();
        assert!((0.0..1e-8).contains(&l));
    }

    #[test]
    fn pos_weight_ratios() {
        assert_eq!(PosWeightMode::Balanced.ratio(4), 3.0);
        assert_eq!(PosWeightMode::Half.ratio(4), 1.5);
        assert_eq!(PosWeightMode::None.ratio(4), 1.0);
        let c = PosWeightMode::Balanced.coefficients(10);
        assert!((c.positive - 0.9).abs() < 1e-15 && (c.negative - 0.1).abs() < 1e-15);
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = TrainConfig {
            epochs: Some(3),
            learning_rate: Some(0.01),
            flip: false,
            ..TrainConfig::finetune(PosWeightMode::Half)
        };
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(TrainConfig::from_text("batch_size = 0").is_err());
        assert!(TrainConfig::from_text("momentum = 0.9").is_err());
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (mut m, samples) = tiny();
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: Some(1),
            learning_rate: Some(0.0),
            weight_decay: 0.0,
            ..TrainConfig::pretrain()
        };
        softmax_pretrain(&mut m, &samples, &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn pretrain_is_deterministic() {
        let (m0, samples) = tiny();
        let cfg = TrainConfig {
            epochs: Some(1),
            batch_size: 8,
            ..TrainConfig::pretrain()
        };
        let (mut a, mut b) = (m0.clone(), m0);
        let ra = softmax_pretrain(&mut a, &samples, &cfg).unwrap();
        let rb = softmax_pretrain(&mut b, &samples, &cfg).unwrap();
        assert_eq!(ra.epoch_losses[0].to_bits(), rb.epoch_losses[0].to_bits());
        assert_eq!(a, b);
    }

    #[test]
    fn finetune_touches_only_sigmoid_head() {
        let (mut m, samples) = tiny();
        m.replicate_head(5, false).unwrap();
        let cfg = TrainConfig {
            epochs: Some(1),
            batch_size: 8,
            ..TrainConfig::finetune(PosWeightMode::Balanced)
        };
        assert!(matches!(
            sigmoid_finetune(&mut m, &samples, &cfg),
            Err(Error::Precondition(_))
        ));
        m.freeze(Part::Backbone).unwrap();
        m.freeze(Part::SoftmaxHead).unwrap();
        let before = m.clone();
        let h_before = m.part_hash(Part::SigmoidHead);
        sigmoid_finetune(&mut m, &samples, &cfg).unwrap();
        assert_eq!(m.backbone, before.backbone);
        assert_eq!(m.softmax_head, before.softmax_head);
        assert_ne!(m.part_hash(Part::SigmoidHead), h_before);
    }

    #[test]
    fn finetune_zero_lr_keeps_head() {
        let (mut m, samples) = tiny();
        m.replicate_head(5, false).unwrap();
        m.freeze(Part::Backbone).unwrap();
        m.freeze(Part::SoftmaxHead).unwrap();
        let before = m.sigmoid_head.clone();
        let cfg = TrainConfig {
            epochs: Some(1),
            learning_rate: Some(0.0),
            ..TrainConfig::finetune(PosWeightMode::None)
        };
        sigmoid_finetune(&mut m, &samples, &cfg).unwrap();
        assert_eq!(m.sigmoid_head, before);
    }

    #[test]
    fn phase_mismatch_is_rejected() {
        let (mut m, samples) = tiny();
        let cfg = TrainConfig::finetune(PosWeightMode::None);
        assert!(matches!(
            softmax_pretrain(&mut m, &samples, &cfg),
            Err(Error::Precondition(_))
        ));
    }
}
