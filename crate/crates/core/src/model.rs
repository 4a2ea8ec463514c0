//! CNN backbone with a softmax head and a replicated sigmoid head.
//!
//! Both heads are GAP + FC over the same final-conv feature tensor
//! `F ∈ R^{N×P×Q}`: `ℓ_k = Σ_i w_{i,k} F̄_i + b_k`.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Real, Tensor};

/// Backbone layout: `conv3x3(pad 1) → bias → ReLU → maxpool 2×2` per entry of `channels`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arch {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub image_size: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: vec![16, 32, 64],
            image_size: 32,
        }
    }
}

impl Arch {
    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("at least one conv block")
    }

    pub fn feature_size(&self) -> usize {
        self.image_size >> self.channels.len()
    }
}

const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Part {
    Backbone,
    SoftmaxHead,
    SigmoidHead,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Backbone, Part::SoftmaxHead, Part::SigmoidHead];

    pub fn name(self) -> &'static str {
        match self {
            Part::Backbone => "backbone",
            Part::SoftmaxHead => "softmax_head",
            Part::SigmoidHead => "sigmoid_head",
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which head a computation runs against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Softmax,
    Sigmoid,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Softmax => "softmax",
            Branch::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "softmax" => Ok(Branch::Softmax),
            "sigmoid" => Ok(Branch::Sigmoid),
            _ => Err(format!("unknown branch `{s}` (softmax|sigmoid)")),
        }
    }

    pub fn part(self) -> Part {
        match self {
            Branch::Softmax => Part::SoftmaxHead,
            Branch::Sigmoid => Part::SigmoidHead,
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar differentiated when capturing feature gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackwardTarget {
    /// Pre-activation class logit.
    #[default]
    Logit,
    /// Post-activation class score (softmax probability or sigmoid output).
    Score,
}

impl BackwardTarget {
    pub fn name(self) -> &'static str {
        match self {
            BackwardTarget::Logit => "logit",
            BackwardTarget::Score => "score",
        }
    }

    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "logit" => Ok(BackwardTarget::Logit),
            "score" => Ok(BackwardTarget::Score),
            _ => Err(format!("unknown backward target `{s}` (logit|score)")),
        }
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    /// `[C_out, C_in, 3, 3]`
    pub kernel: Tensor<f32>,
    /// `[C_out]`
    pub bias: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub blocks: Vec<ConvBlock>,
}

#[derive(Clone, Debug)]
pub struct BackboneVars(Vec<(Var, Var)>);

impl BackboneVars {
    pub fn params(&self) -> impl Iterator<Item = Var> + '_ {
        self.0.iter().flat_map(|&(k, b)| [k, b])
    }
}

impl Backbone {
    fn init(arch: &Arch, rng: &mut ChaCha8Rng) -> Self {
        let mut cin = arch.in_channels;
        let blocks = arch
            .channels
            .iter()
            .map(|&cout| {
                let bound = (6.0 / (cin * KERNEL * KERNEL) as f32).sqrt();
                let block = ConvBlock {
                    kernel: uniform_tensor(rng, &[cout, cin, KERNEL, KERNEL], bound),
                    bias: Tensor::zeros([cout]),
                };
                cin = cout;
                block
            })
            .collect();
        Self { blocks }
    }

    pub fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> BackboneVars {
        BackboneVars(
            self.blocks
                .iter()
                .map(|b| {
                    (
                        tape.leaf(b.kernel.clone(), trainable),
                        tape.leaf(b.bias.clone(), trainable),
                    )
                })
                .collect(),
        )
    }

    /// Records the backbone on `tape`; returns the final feature tensor `[B, N, P, Q]`.
    pub fn forward(&self, tape: &mut Tape<f32>, vars: &BackboneVars, input: Var) -> Result<Var> {
        let mut x = input;
        for &(kernel, bias) in &vars.0 {
            x = tape.conv2d(x, kernel, 1, KERNEL / 2)?;
            x = tape.channel_bias(x, bias)?;
            x = tape.relu(x);
            x = tape.max_pool2d(x, 2)?;
        }
        Ok(x)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.blocks.iter_mut().flat_map(|b| [&mut b.kernel, &mut b.bias])
    }

    fn named(&self) -> Vec<(String, &Tensor<f32>)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                [
                    (format!("backbone.{i}.kernel"), &b.kernel),
                    (format!("backbone.{i}.bias"), &b.bias),
                ]
            })
            .collect()
    }
}

/// GAP + FC head: weight `[N, C]`, bias `[C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Real> Head<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::shape(
                "head",
                format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(channels: usize, classes: usize) -> Self {
        Self {
            weight: Tensor::zeros([channels, classes]),
            bias: Tensor::zeros([classes]),
        }
    }

    pub fn num_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `w_{·,k}`: the weights from every channel into class `k`.
    pub fn class_weights(&self, class: usize) -> Vec<T> {
        let c = self.num_classes();
        self.weight
            .data()
            .iter()
            .skip(class)
            .step_by(c)
            .copied()
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Head<U> {
        Head {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn same_shape(&self, other: &Head<T>) -> bool {
        self.weight.shape() == other.weight.shape() && self.bias.shape() == other.bias.shape()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> HeadVars {
        HeadVars {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }

    /// Records `GAP → FC` on `tape`; returns logits `[B, C]`.
    pub fn forward(&self, tape: &mut Tape<T>, vars: HeadVars, features: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(features)?;
        tape.fully_connected(pooled, vars.weight, vars.bias)
    }

    /// Logits from pooled features `[B, N]`.
    pub fn logits_from_pooled(&self, pooled: &Tensor<T>) -> Result<Tensor<T>> {
        ops::fully_connected(pooled, &self.weight, &self.bias)
    }

    /// Logits from feature maps `[B, N, P, Q]`.
    pub fn logits(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.logits_from_pooled(&ops::global_avg_pool(features)?)
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Final-conv activations of one image and, when captured, the gradient of
/// a scalar target with respect to them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    /// `[N, P, Q]`
    pub activations: Tensor<f32>,
    pub gradient: Option<Tensor<f32>>,
}

impl FeatureStack {
    pub fn channels(&self) -> usize {
        self.activations.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.activations.shape()[1], self.activations.shape()[2])
    }
}

/// One head's output on one image.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    pub logits: Vec<f32>,
    /// Softmax probabilities or sigmoid scores, depending on the branch.
    pub scores: Vec<f32>,
    pub features: FeatureStack,
}

#[derive(Clone, Debug)]
pub struct InferenceResult {
    /// `argmax_k y_k` of the softmax branch, lowest index on ties.
    pub predicted: usize,
    pub probs: Vec<f32>,
    pub sigmoid_scores: Option<Vec<f32>>,
    pub features: FeatureStack,
}

/// Backbone plus softmax head `h` and optional sigmoid head `h̃`.
#[derive(Clone, Debug)]
pub struct DualBranchModel {
    pub arch: Arch,
    pub backbone: Backbone,
    pub softmax_head: Head,
    pub sigmoid_head: Option<Head>,
    num_classes: usize,
    frozen: BTreeMap<Part, String>,
}

impl PartialEq for DualBranchModel {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.backbone == other.backbone
            && self.softmax_head == other.softmax_head
            && self.sigmoid_head == other.sigmoid_head
    }
}

fn fresh_head(channels: usize, classes: usize, rng: &mut ChaCha8Rng) -> Head {
    let bound = (6.0 / channels as f32).sqrt();
    Head {
        weight: uniform_tensor(rng, &[channels, classes], bound),
        bias: Tensor::zeros([classes]),
    }
}

impl DualBranchModel {
    /// Randomly initialized backbone and softmax head; no sigmoid head yet.
    pub fn new(arch: Arch, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Invalid("a classifier needs at least two classes".into()));
        }
        if arch.channels.is_empty() || arch.feature_size() == 0 {
            return Err(Error::Invalid(format!(
                "{} pooling stages do not fit a {}px input",
                arch.channels.len(),
                arch.image_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::init(&arch, &mut rng);
        let softmax_head = fresh_head(arch.feature_channels(), num_classes, &mut rng);
        Ok(Self {
            arch,
            backbone,
            softmax_head,
            sigmoid_head: None,
            num_classes,
            frozen: BTreeMap::new(),
        })
    }

    /// Reassemble from parts (used by checkpoint loading).
    pub fn from_parts(
        arch: Arch,
        backbone: Backbone,
        softmax_head: Head,
        sigmoid_head: Option<Head>,
    ) -> Result<Self> {
        let num_classes = softmax_head.num_classes();
        if softmax_head.num_channels() != arch.feature_channels() {
            return Err(Error::shape(
                "model",
                "softmax head does not match backbone channel count",
            ));
        }
        if let Some(h) = &sigmoid_head {
            if !h.same_shape(&softmax_head) {
                return Err(Error::shape(
                    "model",
                    "sigmoid head shape differs from softmax head",
                ));
            }
        }
        Ok(Self {
            arch,
            backbone,
            softmax_head,
            sigmoid_head,
            num_classes,
            frozen: BTreeMap::new(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn head(&self, branch: Branch) -> Result<&Head> {
        match branch {
            Branch::Softmax => Ok(&self.softmax_head),
            Branch::Sigmoid => self
                .sigmoid_head
                .as_ref()
                .ok_or_else(|| Error::Precondition("model has no sigmoid head".into())),
        }
    }

    fn check_image(&self, image: &Tensor<f32>) -> Result<()> {
        let n = self.arch.image_size;
        if image.shape() != [self.arch.in_channels, n, n] {
            return Err(Error::shape(
                "model input",
                format!(
                    "expected [{}, {n}, {n}], got {:?}",
                    self.arch.in_channels,
                    image.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Final-conv features of a batch `[B, C, H, W] → [B, N, P, Q]`.
    pub fn features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let vars = self.backbone.bind(&mut tape, false);
        let input = tape.constant(images.clone());
        let f = self.backbone.forward(&mut tape, &vars, input)?;
        Ok(tape.value(f).clone())
    }

    fn single_features(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_image(image)?;
        let batch = image.clone().reshape(prepend_one(image.shape()))?;
        self.features(&batch)
    }

    fn branch_output(&self, branch: Branch, image: &Tensor<f32>) -> Result<BranchOutput> {
        let head = self.head(branch)?;
        let f = self.single_features(image)?;
        let logits = head.logits(&f)?;
        let scores = match branch {
            Branch::Softmax => ops::softmax_rows(&logits)?,
            Branch::Sigmoid => ops::sigmoid(&logits),
        };
        Ok(BranchOutput {
            logits: logits.into_data(),
            scores: scores.into_data(),
            features: FeatureStack {
                activations: f.outer_tensor(0),
                gradient: None,
            },
        })
    }

    pub fn forward_softmax(&self, image: &Tensor<f32>) -> Result<BranchOutput> {
        self.branch_output(Branch::Softmax, image)
    }

    pub fn forward_sigmoid(&self, image: &Tensor<f32>) -> Result<BranchOutput> {
        self.branch_output(Branch::Sigmoid, image)
    }

    pub fn forward_branch(&self, branch: Branch, image: &Tensor<f32>) -> Result<BranchOutput> {
        self.branch_output(branch, image)
    }

    /// Softmax prediction plus (when present) sigmoid scores from one backbone pass.
    pub fn infer(&self, image: &Tensor<f32>) -> Result<InferenceResult> {
        let f = self.single_features(image)?;
        let probs = ops::softmax_rows(&self.softmax_head.logits(&f)?)?.into_data();
        let sigmoid_scores = match &self.sigmoid_head {
            Some(h) => Some(ops::sigmoid(&h.logits(&f)?).into_data()),
            None => None,
        };
        Ok(InferenceResult {
            predicted: ops::argmax(&probs),
            probs,
            sigmoid_scores,
            features: FeatureStack {
                activations: f.outer_tensor(0),
                gradient: None,
            },
        })
    }

    /// Run the full graph with the final-conv output retained, differentiate
    /// `target` of `class` on `branch`, and return the features with their
    /// gradient alongside the branch logits.
    pub fn capture_gradient(
        &self,
        image: &Tensor<f32>,
        branch: Branch,
        class: usize,
        target: BackwardTarget,
    ) -> Result<(FeatureStack, Vec<f32>)> {
        self.check_image(image)?;
        if class >= self.num_classes {
            return Err(Error::Domain(format!("class {class} out of range")));
        }
        let head = self.head(branch)?;
        let mut tape = Tape::new();
        let bvars = self.backbone.bind(&mut tape, false);
        let hvars = head.bind(&mut tape, false);
        let input = tape.constant(image.clone().reshape(prepend_one(image.shape()))?);
        let f = self.backbone.forward(&mut tape, &bvars, input)?;
        tape.retain_grad(f);
        let logits = head.forward(&mut tape, hvars, f)?;
        let scalar_source = match (target, branch) {
            (BackwardTarget::Logit, _) => logits,
            (BackwardTarget::Score, Branch::Softmax) => tape.softmax(logits)?,
            (BackwardTarget::Score, Branch::Sigmoid) => tape.sigmoid(logits),
        };
        let root = tape.select(scalar_source, class)?;
        tape.backward(root)?;
        let grad = tape
            .grad(f)
            .ok_or_else(|| Error::Contract("feature gradient was not captured".into()))?;
        let stack = FeatureStack {
            activations: tape.value(f).outer_tensor(0),
            gradient: Some(grad.outer_tensor(0)),
        };
        Ok((stack, tape.value(logits).data().to_vec()))
    }

    /// Allocate `h̃` with the shapes of `h` and fresh parameters: uniform
    /// fan-in-scaled weights, zero bias. `h` is not touched.
    pub fn replicate_head(&mut self, seed: u64, force: bool) -> Result<()> {
        if self.sigmoid_head.is_some() && !force {
            return Err(Error::Precondition(
                "sigmoid head already exists; pass force to reinitialize".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let h = fresh_head(
            self.softmax_head.num_channels(),
            self.softmax_head.num_classes(),
            &mut rng,
        );
        self.sigmoid_head = Some(h);
        self.frozen.remove(&Part::SigmoidHead);
        Ok(())
    }

    /// Mark `part` frozen and snapshot its parameter hash. Idempotent.
    pub fn freeze(&mut self, part: Part) -> Result<()> {
        let hash = self
            .part_hash(part)
            .ok_or_else(|| Error::Precondition(format!("cannot freeze missing {part}")))?;
        self.frozen.entry(part).or_insert(hash);
        Ok(())
    }

    pub fn set_trainable(&mut self, part: Part) {
        self.frozen.remove(&part);
    }

    pub fn is_frozen(&self, part: Part) -> bool {
        self.frozen.contains_key(&part)
    }

    /// Fail if any frozen part's parameters differ from their snapshot.
    pub fn verify_frozen(&self) -> Result<()> {
        for (part, snapshot) in &self.frozen {
            if self.part_hash(*part).as_deref() != Some(snapshot.as_str()) {
                return Err(Error::FrozenDrift(part.name().into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the part's tensor names and little-endian payloads.
    pub fn part_hash(&self, part: Part) -> Option<String> {
        let tensors = self.part_tensors(part)?;
        let mut h = Sha256::new();
        for (name, t) in tensors {
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        }
        Some(hex::encode(h.finalize()))
    }

    pub fn part_tensors(&self, part: Part) -> Option<Vec<(String, &Tensor<f32>)>> {
        fn head<'a>(prefix: &str, h: &'a Head) -> Vec<(String, &'a Tensor<f32>)> {
            vec![
                (format!("{prefix}.weight"), &h.weight),
                (format!("{prefix}.bias"), &h.bias),
            ]
        }
        match part {
            Part::Backbone => Some(self.backbone.named()),
            Part::SoftmaxHead => Some(head("softmax_head", &self.softmax_head)),
            Part::SigmoidHead => self.sigmoid_head.as_ref().map(|h| head("sigmoid_head", h)),
        }
    }

    /// Every parameter tensor with its stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        Part::ALL
            .iter()
            .filter_map(|&p| self.part_tensors(p))
            .flatten()
            .collect()
    }
}

fn prepend_one(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> DualBranchModel {
        DualBranchModel::new(Arch::default(), 4, 7).unwrap()
    }

    fn image(seed: usize) -> Tensor<f32> {
        Tensor::from_fn([3, 32, 32], |i| {
            ((i * 7919 + seed * 104729) % 1000) as f32 / 1000.0
        })
    }

    #[test]
    fn feature_shape_matches_arch() {
        let m = model();
        let f = m.forward_softmax(&image(0)).unwrap().features;
        assert_eq!(f.activations.shape(), &[64, 4, 4]);
        assert!(f.activations.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_head_is_uniform_and_half() {
        let mut m = model();
        m.softmax_head = Head::zeros(64, 4);
        m.sigmoid_head = Some(Head::zeros(64, 4));
        let y = m.forward_softmax(&image(1)).unwrap();
        assert!(y.scores.iter().all(|&p| (p - 0.25).abs() < 1e-7));
        let s = m.forward_sigmoid(&image(1)).unwrap();
        assert!(s.scores.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn logits_match_manual_gap_fc() {
        let m = model();
        let out = m.forward_softmax(&image(2)).unwrap();
        let f = &out.features.activations;
        let (n, cells) = (64, 16);
        for k in 0..4 {
            let mut acc = m.softmax_head.bias.data()[k] as f64;
            for i in 0..n {
                let mean: f64 = f.data()[i * cells..(i + 1) * cells]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
                    / cells as f64;
                acc += m.softmax_head.weight.data()[i * 4 + k] as f64 * mean;
            }
            assert!((acc - out.logits[k] as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_images_identical_probs() {
        let m = model();
        let a = m.forward_softmax(&image(3)).unwrap().scores;
        let b = m.forward_softmax(&image(3)).unwrap().scores;
        assert_eq!(a, b);
    }

    #[test]
    fn copied_head_gives_identical_logits() {
        let mut m = model();
        m.sigmoid_head = Some(m.softmax_head.clone());
        let a = m.forward_softmax(&image(4)).unwrap().logits;
        let b = m.forward_sigmoid(&image(4)).unwrap().logits;
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn replicate_head_shapes_and_determinism() {
        let mut m = model();
        let before = m.softmax_head.clone();
        m.replicate_head(11, false).unwrap();
        let h = m.sigmoid_head.clone().unwrap();
        assert!(h.same_shape(&m.softmax_head));
        assert!(!h.weight.bits_eq(&m.softmax_head.weight));
        assert_eq!(m.softmax_head, before);
        assert!(matches!(m.replicate_head(11, false), Err(Error::Precondition(_))));
        let mut other = model();
        other.replicate_head(11, false).unwrap();
        assert!(other.sigmoid_head.unwrap().weight.bits_eq(&h.weight));
        m.replicate_head(12, true).unwrap();
        assert!(!m.sigmoid_head.unwrap().weight.bits_eq(&h.weight));
    }

    #[test]
    fn freeze_is_idempotent_and_detects_drift() {
        let mut m = model();
        m.freeze(Part::Backbone).unwrap();
        m.freeze(Part::Backbone).unwrap();
        assert!(m.is_frozen(Part::Backbone));
        m.verify_frozen().unwrap();
        m.backbone.blocks[0].bias.data_mut()[0] += 1.0;
        assert!(matches!(m.verify_frozen(), Err(Error::FrozenDrift(_))));
        assert!(m.freeze(Part::SigmoidHead).is_err());
    }

    #[test]
    fn captured_gradient_of_logit_is_weight_over_cells() {
        let m = model();
        let (stack, _) = m
            .capture_gradient(&image(5), Branch::Softmax, 2, BackwardTarget::Logit)
            .unwrap();
        let g = stack.gradient.unwrap();
        let w = m.softmax_head.class_weights(2);
        for (i, &wi) in w.iter().enumerate() {
            for cell in 0..16 {
                assert_eq!(g.data()[i * 16 + cell], wi / 16.0);
            }
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = model();
        assert!(m.forward_softmax(&Tensor::zeros([3, 16, 16])).is_err());
    }
}
