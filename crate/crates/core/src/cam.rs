//! Class activation maps against either head.
//!
//! Composition order: optional negative-weight clamping (nwc) of the channel
//! weights, linear combination `M = Σ_i w_i F_i`, elementwise ReLU, bilinear
//! upsampling, min-max normalization.
//!
//! Upsampling is bilinear with corner-aligned sampling: output pixel `(y, x)`
//! of an `H×W` target reads source coordinate
//! `(y·(P−1)/(H−1), x·(Q−1)/(W−1))` and interpolates its four neighbours.
//! A unit extent maps every target coordinate to 0.
//!
//! Min-max normalization is `(M − min)/(max − min)`; a constant map becomes
//! all zeros.

use std::fmt;

use crate::config::{self, KvConfig};
use crate::error::{Error, Result};
use crate::model::{BackwardTarget, Branch, DualBranchModel, FeatureStack, Head, InferenceResult};
use crate::ops;
use crate::tensor::{Real, Tensor};

/// Denominator guard for the gradient-weighted variants.
pub const CAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CamMethod {
    Cam,
    GradCam,
    GradCamPlusPlus,
    XGradCam,
    LayerCam,
    ScoreCam,
}

impl CamMethod {
    pub const ALL: [CamMethod; 6] = [
        CamMethod::Cam,
        CamMethod::GradCam,
        CamMethod::GradCamPlusPlus,
        CamMethod::XGradCam,
        CamMethod::LayerCam,
        CamMethod::ScoreCam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CamMethod::Cam => "cam",
            CamMethod::GradCam => "gradcam",
            CamMethod::GradCamPlusPlus => "gradcampp",
            CamMethod::XGradCam => "xgradcam",
            CamMethod::LayerCam => "layercam",
            CamMethod::ScoreCam => "scorecam",
        }
    }

    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown CAM method `{s}`"))
    }

    fn needs_gradient(self) -> bool {
        matches!(
            self,
            CamMethod::GradCam | CamMethod::GradCamPlusPlus | CamMethod::XGradCam | CamMethod::LayerCam
        )
    }
}

impl fmt::Display for CamMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormState {
    Raw,
    Relu,
    MinMax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamConfig {
    pub method: CamMethod,
    pub branch: Branch,
    pub nwc: bool,
    pub backward_target: BackwardTarget,
    /// Branch whose `k*` score rates explanation images for fidelity metrics.
    pub fidelity_score: Branch,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self {
            method: CamMethod::GradCam,
            branch: Branch::Softmax,
            nwc: false,
            backward_target: BackwardTarget::Logit,
            fidelity_score: Branch::Softmax,
        }
    }
}

impl CamConfig {
    pub fn new(method: CamMethod, branch: Branch, nwc: bool) -> Self {
        Self {
            method,
            branch,
            nwc,
            ..Self::default()
        }
    }

    /// Layer-CAM ignores the nwc flag.
    pub fn effective_nwc(&self) -> bool {
        self.nwc && self.method != CamMethod::LayerCam
    }
}

impl KvConfig for CamConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "method" => self.method = CamMethod::parse(value)?,
            "branch" => self.branch = Branch::parse(value)?,
            "nwc" => self.nwc = config::parse_bool(value)?,
            "backward_target" => self.backward_target = BackwardTarget::parse(value)?,
            "fidelity_score" => self.fidelity_score = Branch::parse(value)?,
            "upsample" if value == "bilinear" => {}
            "upsample" => return Err(format!("unsupported upsample mode `{value}` (bilinear)")),
            _ => return Err(config::unknown_key(key)),
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        format!(
            "method = {}\nbranch = {}\nnwc = {}\nbackward_target = {}\nfidelity_score = {}\nupsample = bilinear\n",
            self.method,
            self.branch,
            self.nwc,
            self.backward_target.name(),
            self.fidelity_score
        )
    }
}

/// Per-channel importance for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelWeights {
    pub values: Vec<f64>,
    pub branch: Branch,
    pub method: CamMethod,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// Feature-resolution map `[P, Q]` before ReLU.
    pub linear: Tensor<f32>,
    /// Image-resolution map `[H, W]`.
    pub map: Tensor<f32>,
    pub state: NormState,
}

fn dims3<T: Real>(features: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match features.shape() {
        [n, p, q] => Ok((*n, *p, *q)),
        s => Err(Error::shape(
            "cam",
            format!("expected features [N,P,Q], got {s:?}"),
        )),
    }
}

/// `M(p,q) = Σ_i w_i F_i(p,q)`, accumulated in `f64`.
pub fn linear_map<T: Real>(weights: &[T], features: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, p, q) = dims3(features)?;
    if weights.len() != n {
        return Err(Error::shape(
            "linear_map",
            format!("{} weights for {n} channels", weights.len()),
        ));
    }
    let cells = p * q;
    let mut acc = vec![0.0f64; cells];
    for (i, w) in weights.iter().enumerate() {
        let w = w.f64();
        for (a, f) in acc.iter_mut().zip(&features.data()[i * cells..(i + 1) * cells]) {
            *a += w * f.f64();
        }
    }
    Tensor::new([p, q], acc.into_iter().map(T::of).collect())
}

/// Vanilla CAM: the head's class column combined with the features.
pub fn vanilla_cam<T: Real>(head: &Head<T>, class: usize, features: &Tensor<T>) -> Result<Tensor<T>> {
    if class >= head.num_classes() {
        return Err(Error::Domain(format!("class {class} out of range")));
    }
    linear_map(&head.class_weights(class), features)
}

fn gradient(stack: &FeatureStack) -> Result<&Tensor<f32>> {
    stack
        .gradient
        .as_ref()
        .ok_or_else(|| Error::Precondition("feature gradient was not captured".into()))
}

fn per_channel(stack: &FeatureStack, mut f: impl FnMut(&[f32], &[f32]) -> f64) -> Result<Vec<f64>> {
    let g = gradient(stack)?;
    let (n, p, q) = dims3(&stack.activations)?;
    let cells = p * q;
    Ok((0..n)
        .map(|i| {
            let r = i * cells..(i + 1) * cells;
            f(&stack.activations.data()[r.clone()], &g.data()[r])
        })
        .collect())
}

/// Grad-CAM: spatial mean of the gradient.
pub fn gradcam_weights(stack: &FeatureStack) -> Result<Vec<f64>> {
    per_channel(stack, |_, g| {
        g.iter().map(|&v| v as f64).sum::<f64>() / g.len() as f64
    })
}

/// Grad-CAM++ under the exponential-score reduction:
/// `a = g² / (2g² + (Σ F)·g³ + ε)` (zero where `g = 0`), `w = Σ a·relu(g)`.
pub fn gradcampp_weights(stack: &FeatureStack) -> Result<Vec<f64>> {
    per_channel(stack, |f, g| {
        let sum_f: f64 = f.iter().map(|&v| v as f64).sum();
        g.iter()
            .map(|&g| {
                let g = g as f64;
                if g == 0.0 {
                    return 0.0;
                }
                let a = g * g / (2.0 * g * g + sum_f * g * g * g + CAM_EPS);
                a * g.max(0.0)
            })
            .sum()
    })
}

/// XGrad-CAM: `w = Σ F·g / (Σ F + ε)`.
pub fn xgradcam_weights(stack: &FeatureStack) -> Result<Vec<f64>> {
    per_channel(stack, |f, g| {
        let sum_f: f64 = f.iter().map(|&v| v as f64).sum();
        let dot: f64 = f.iter().zip(g).map(|(&a, &b)| a as f64 * b as f64).sum();
        dot / (sum_f + CAM_EPS)
    })
}

/// Single-layer Layer-CAM: `M(p,q) = Σ_i relu(g_i(p,q))·F_i(p,q)`.
pub fn layercam_map(stack: &FeatureStack) -> Result<Tensor<f32>> {
    let g = gradient(stack)?;
    let (n, p, q) = dims3(&stack.activations)?;
    let cells = p * q;
    let mut acc = vec![0.0f64; cells];
    for i in 0..n {
        let r = i * cells..(i + 1) * cells;
        for ((a, &f), &gv) in acc
            .iter_mut()
            .zip(&stack.activations.data()[r.clone()])
            .zip(&g.data()[r])
        {
            *a += (gv as f64).max(0.0) * f as f64;
        }
    }
    Tensor::new([p, q], acc.into_iter().map(|v| v as f32).collect())
}

/// Corner-aligned bilinear resize of a `[P, Q]` map.
pub fn upsample_bilinear<T: Real>(map: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let (p, q) = match map.shape() {
        [p, q] if *p > 0 && *q > 0 => (*p, *q),
        s => return Err(Error::shape("upsample", format!("expected [P,Q], got {s:?}"))),
    };
    let coord = |i: usize, out: usize, src: usize| -> (usize, usize, f64) {
        if out <= 1 || src <= 1 {
            return (0, 0, 0.0);
        }
        let c = i as f64 * (src - 1) as f64 / (out - 1) as f64;
        let lo = (c.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, c - lo as f64)
    };
    let d = map.data();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, p);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, width, q);
            let v = |yy: usize, xx: usize| d[yy * q + xx].f64();
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            out.push(T::of(top * (1.0 - fy) + bottom * fy));
        }
    }
    Tensor::new([height, width], out)
}

/// `(M − min)/(max − min)`, or zeros for a constant map.
pub fn minmax_normalize<T: Real>(map: &Tensor<T>) -> Tensor<T> {
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.f64()), hi.max(v.f64()))
        });
    if map.is_empty() || hi <= lo {
        return Tensor::zeros(map.shape());
    }
    map.map(|v| T::of((v.f64() - lo) / (hi - lo)))
}

/// ReLU, upsample to `height × width`, min-max normalize.
pub fn finish_map(linear: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let relu = linear.map(|v| v.max(0.0));
    Ok(minmax_normalize(&upsample_bilinear(&relu, height, width)?))
}

/// Clamp (if `nwc`), combine, ReLU, upsample, normalize.
pub fn compose_heatmap(
    weights: &[f64],
    features: &Tensor<f32>,
    nwc: bool,
    height: usize,
    width: usize,
) -> Result<Heatmap> {
    let w: Vec<f64> = if nwc {
        weights.iter().map(|&v| v.max(0.0)).collect()
    } else {
        weights.to_vec()
    };
    let linear = linear_map(&w, &features.cast::<f64>())?.cast::<f32>();
    let map = finish_map(&linear, height, width)?;
    Ok(Heatmap {
        linear,
        map,
        state: NormState::MinMax,
    })
}

fn branch_logit(
    model: &DualBranchModel,
    branch: Branch,
    images: &[Tensor<f32>],
    class: usize,
) -> Result<Vec<f64>> {
    let head = model.head(branch)?;
    let refs: Vec<&Tensor<f32>> = images.iter().collect();
    let f = model.features(&Tensor::stack(&refs)?)?;
    let logits = head.logits(&f)?;
    let c = head.num_classes();
    Ok(logits.data().chunks_exact(c).map(|r| r[class] as f64).collect())
}

/// The masks Score-CAM applies: each channel upsampled to the image size
/// and min-max normalized.
pub fn scorecam_masks(features: &Tensor<f32>, height: usize, width: usize) -> Result<Vec<Tensor<f32>>> {
    let (n, _, _) = dims3(features)?;
    (0..n)
        .map(|i| {
            Ok(minmax_normalize(&upsample_bilinear(
                &features.outer_tensor(i),
                height,
                width,
            )?))
        })
        .collect()
}

/// `image ⊙ mask`, broadcasting the `[H, W]` mask over channels.
pub fn mask_image(image: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    let hw = mask.len();
    if image.rank() != 3 || image.shape()[1..] != *mask.shape() {
        return Err(Error::shape(
            "mask_image",
            format!("image {:?}, mask {:?}", image.shape(), mask.shape()),
        ));
    }
    let m = mask.data();
    Tensor::new(
        image.shape(),
        image
            .data()
            .iter()
            .enumerate()
            .map(|(j, &v)| v * m[j % hw])
            .collect(),
    )
}

/// Score-CAM: `α_i = ℓ_k(x ⊙ mask_i) − ℓ_k(x)` on the branch logit,
/// normalized by a softmax over channels.
pub fn scorecam_weights(
    model: &DualBranchModel,
    image: &Tensor<f32>,
    features: &Tensor<f32>,
    class: usize,
    branch: Branch,
) -> Result<Vec<f64>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let base = branch_logit(model, branch, std::slice::from_ref(image), class)?[0];
    let masks = scorecam_masks(features, h, w)?;
    let mut alphas = Vec::with_capacity(masks.len());
    for chunk in masks.chunks(32) {
        let masked: Vec<Tensor<f32>> = chunk
            .iter()
            .map(|m| mask_image(image, m))
            .collect::<Result<_>>()?;
        alphas.extend(
            branch_logit(model, branch, &masked, class)?
                .into_iter()
                .map(|l| l - base),
        );
    }
    let weights = ops::softmax_rows(&Tensor::new([1, alphas.len()], alphas)?)?;
    Ok(weights.into_data())
}

/// Channel weights for `class` on `config.branch`, or `None` for Layer-CAM
/// which has no per-channel weights.
pub fn channel_weights(
    model: &DualBranchModel,
    image: &Tensor<f32>,
    class: usize,
    config: &CamConfig,
) -> Result<(Option<ChannelWeights>, FeatureStack)> {
    let (stack, values) = if config.method.needs_gradient() {
        let (stack, _) = model.capture_gradient(image, config.branch, class, config.backward_target)?;
        let values = match config.method {
            CamMethod::GradCam => Some(gradcam_weights(&stack)?),
            CamMethod::GradCamPlusPlus => Some(gradcampp_weights(&stack)?),
            CamMethod::XGradCam => Some(xgradcam_weights(&stack)?),
            _ => None,
        };
        (stack, values)
    } else {
        let stack = model.forward_branch(config.branch, image)?.features;
        let values = match config.method {
            CamMethod::Cam => {
                let head = model.head(config.branch)?;
                if class >= head.num_classes() {
                    return Err(Error::Domain(format!("class {class} out of range")));
                }
                head.class_weights(class).into_iter().map(f64::from).collect()
            }
            _ => scorecam_weights(model, image, &stack.activations, class, config.branch)?,
        };
        (stack, Some(values))
    };
    Ok((
        values.map(|values| ChannelWeights {
            values,
            branch: config.branch,
            method: config.method,
        }),
        stack,
    ))
}

/// Heatmap for an explicit class.
pub fn explain_class(
    model: &DualBranchModel,
    image: &Tensor<f32>,
    class: usize,
    config: &CamConfig,
) -> Result<Heatmap> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (weights, stack) = channel_weights(model, image, class, config)?;
    match weights {
        Some(cw) => compose_heatmap(&cw.values, &stack.activations, config.effective_nwc(), h, w),
        None => {
            let linear = layercam_map(&stack)?;
            let map = finish_map(&linear, h, w)?;
            Ok(Heatmap {
                linear,
                map,
                state: NormState::MinMax,
            })
        }
    }
}

#[derive(Clone, Debug)]
pub struct Explanation {
    pub inference: InferenceResult,
    pub heatmap: Heatmap,
}

/// Predict `k*` on the softmax branch and explain it on the configured branch.
pub fn explain(model: &DualBranchModel, image: &Tensor<f32>, config: &CamConfig) -> Result<Explanation> {
    let inference = model.infer(image)?;
    let heatmap = explain_class(model, image, inference.predicted, config)?;
    Ok(Explanation { inference, heatmap })
}
