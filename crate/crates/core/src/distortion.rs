//! Softmax-head perturbations that leave predictions unchanged while moving
//! the CAM: a class-uniform additive shift on one channel and a global sign
//! collapse.
//!
//! Features are computed once with the `f32` backbone and then promoted to
//! `f64`; the head, softmax and linear maps are evaluated in `f64` so that
//! invariance checks are limited by the algebra, not by rounding.

use std::fmt::{self, Write as _};
use std::path::Path;

use crate::cam::{self, CamConfig, CamMethod};
use crate::config::{self, KvConfig};
use crate::data::SynthSample;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::{self, BBox};
use crate::model::{Branch, DualBranchModel, Head};
use crate::ops;
use crate::tensor::Tensor;

/// Heatmaps for the true label and for the predicted class, one per sample.
type MapPair = (Vec<Tensor<f32>>, Vec<Tensor<f32>>);

/// Tolerance on per-image softmax probability deviation.
pub const PROB_TOLERANCE: f64 = 1e-6;
/// Tolerance on `‖(M′ − M) − δ·F_i‖∞` for the additive shift.
pub const RESIDUAL_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DistortionKind {
    AdditiveShift { channel: usize },
    SignCollapse,
}

impl DistortionKind {
    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::AdditiveShift { .. } => "additive_shift",
            DistortionKind::SignCollapse => "sign_collapse",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub delta: f64,
}

impl fmt::Display for DistortionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DistortionKind::AdditiveShift { channel } => {
                write!(f, "additive_shift(channel={channel}, delta={:.6e})", self.delta)
            }
            DistortionKind::SignCollapse => write!(f, "sign_collapse(delta={:.6e})", self.delta),
        }
    }
}

/// `w′_{i,k} = w_{i,k} + δ` for every class `k`; everything else untouched.
pub fn apply_additive_shift(head: &Head<f64>, channel: usize, delta: f64) -> Result<Head<f64>> {
    if channel >= head.num_channels() {
        return Err(Error::Domain(format!(
            "channel {channel} out of range for {} channels",
            head.num_channels()
        )));
    }
    if !delta.is_finite() {
        return Err(Error::Domain("shift magnitude must be finite".into()));
    }
    let mut out = head.clone();
    let c = head.num_classes();
    for w in &mut out.weight.data_mut()[channel * c..(channel + 1) * c] {
        *w += delta;
    }
    Ok(out)
}

/// `w′_{i,k} = w_{i,k} − δ` for every weight.
pub fn apply_sign_collapse(head: &Head<f64>, delta: f64) -> Result<Head<f64>> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::Domain(format!(
            "collapse magnitude must be finite and >= 0, got {delta}"
        )));
    }
    let mut out = head.clone();
    for w in out.weight.data_mut() {
        *w -= delta;
    }
    Ok(out)
}

fn weight_std(head: &Head<f64>) -> f64 {
    let w = head.weight.data();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt()
}

fn weight_max_abs(head: &Head<f64>) -> f64 {
    head.weight.data().iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Perturbation magnitudes relative to the head: shifts scale `std(w)`,
/// collapses scale `max|w|`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistortionGrid {
    /// `None` picks the channel with the largest mean activation.
    pub channel: Option<usize>,
    pub shift_scales: Vec<f64>,
    pub collapse_scales: Vec<f64>,
}

impl Default for DistortionGrid {
    fn default() -> Self {
        Self {
            channel: None,
            shift_scales: vec![0.1, 0.5, 1.0, 5.0],
            collapse_scales: vec![1.0, 2.0, 5.0],
        }
    }
}

impl KvConfig for DistortionGrid {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let list = |v: &str| -> std::result::Result<Vec<f64>, String> {
            if v.is_empty() {
                Ok(Vec::new())
            } else {
                config::parse_f64_list(v)
            }
        };
        match key {
            "channel" if value == "auto" => self.channel = None,
            "channel" => self.channel = Some(config::parse_usize(value)?),
            "shift_scales" => self.shift_scales = list(value)?,
            "collapse_scales" => self.collapse_scales = list(value)?,
            _ => return Err(config::unknown_key(key)),
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        format!(
            "channel = {}\nshift_scales = {}\ncollapse_scales = {}\n",
            self.channel.map_or("auto".to_string(), |c| c.to_string()),
            join(&self.shift_scales),
            join(&self.collapse_scales)
        )
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.collapse_scales.iter().any(|&s| s < 0.0) {
            return Err("collapse scales must be non-negative".into());
        }
        Ok(())
    }
}

/// Outcome of one perturbation over a split, reduced in image order.
#[derive(Clone, Debug, PartialEq)]
pub struct DistortionReport {
    pub spec: DistortionSpec,
    pub images: usize,
    pub max_prob_deviation: f64,
    pub argmax_agreement: f64,
    /// Additive shift only.
    pub max_linear_residual: Option<f64>,
    /// Max over images of `‖norm(M′) − norm(M)‖∞` at image resolution.
    pub normalized_linf: f64,
    /// Mean over images of the per-pixel mean `|norm(M′) − norm(M)|`.
    pub normalized_l1: f64,
    pub flipped_sign_fraction: f64,
    pub negative_weight_fraction: f64,
    /// Per image: fraction of positive pixels of the upsampled linear map.
    pub positive_fraction_before: Vec<f64>,
    pub positive_fraction_after: Vec<f64>,
    pub softmax_gt_loc_before: f64,
    pub softmax_gt_loc_after: f64,
    /// Sigmoid-branch vanilla CAM under the same settings as the softmax
    /// side (no clamping).
    pub sigmoid_gt_loc_before: Option<f64>,
    pub sigmoid_gt_loc_after: Option<f64>,
    /// Sigmoid-branch vanilla CAM with negative-weight clamping.
    pub sigmoid_nwc_gt_loc_before: Option<f64>,
    pub sigmoid_nwc_gt_loc_after: Option<f64>,
    /// Every sigmoid-branch map, for the label and for `k*`, in both
    /// settings, is bit-identical before and after.
    pub sigmoid_maps_identical: Option<bool>,
    /// First image that broke an invariance, with the reason.
    pub invalid: Option<(usize, String)>,
}

impl DistortionReport {
    pub fn is_valid(&self) -> bool {
        self.invalid.is_none()
    }

    /// Share of images whose positive-pixel fraction after the perturbation
    /// is below `limit`.
    pub fn share_below(&self, limit: f64) -> f64 {
        let n = self.positive_fraction_after.len().max(1);
        self.positive_fraction_after
            .iter()
            .filter(|&&f| f < limit)
            .count() as f64
            / n as f64
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Precomputed split state shared by every perturbation.
pub struct DistortionLab<'a> {
    model: &'a DualBranchModel,
    samples: &'a [SynthSample],
    head: Head<f64>,
    features: Vec<Tensor<f64>>,
    sigmoid: Vec<SigmoidBaseline>,
}

struct SigmoidBaseline {
    config: CamConfig,
    label_maps: Vec<Tensor<f32>>,
    predicted_maps: Vec<Tensor<f32>>,
    gt_loc: f64,
}

fn boxes(samples: &[SynthSample]) -> Vec<BBox> {
    samples.iter().map(|s| s.gt_box).collect()
}

impl<'a> DistortionLab<'a> {
    pub fn new(model: &'a DualBranchModel, samples: &'a [SynthSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Precondition(
                "distortion experiment needs at least one image".into(),
            ));
        }
        let mut features = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(50) {
            let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
            let f = model.features(&Tensor::stack(&images)?)?;
            features.extend((0..chunk.len()).map(|i| f.outer_tensor(i).cast::<f64>()));
        }
        let mut sigmoid = Vec::new();
        if model.sigmoid_head.is_some() {
            for nwc in [false, true] {
                let config = CamConfig::new(CamMethod::Cam, Branch::Sigmoid, nwc);
                let (label_maps, predicted_maps) = Self::sigmoid_maps(model, samples, &config)?;
                let gt_loc = metrics::gt_known_loc(&boxes(samples), &label_maps)?;
                sigmoid.push(SigmoidBaseline {
                    config,
                    label_maps,
                    predicted_maps,
                    gt_loc,
                });
            }
        }
        Ok(Self {
            model,
            samples,
            head: model.softmax_head.cast(),
            features,
            sigmoid,
        })
    }

    fn sigmoid_maps(model: &DualBranchModel, samples: &[SynthSample], config: &CamConfig) -> Result<MapPair> {
        let mut label_maps = Vec::with_capacity(samples.len());
        let mut predicted_maps = Vec::with_capacity(samples.len());
        for s in samples {
            label_maps.push(cam::explain_class(model, &s.image, s.label, config)?.map);
            predicted_maps.push(cam::explain(model, &s.image, config)?.heatmap.map);
        }
        Ok((label_maps, predicted_maps))
    }

    pub fn head(&self) -> &Head<f64> {
        &self.head
    }

    /// Channel with the largest mean activation over the split.
    pub fn strongest_channel(&self) -> usize {
        let n = self.head.num_channels();
        let mut means = vec![0.0; n];
        for f in &self.features {
            let cells = f.len() / n;
            for (i, m) in means.iter_mut().enumerate() {
                *m += f.outer(i).iter().sum::<f64>() / cells as f64;
            }
        }
        ops::argmax(&means)
    }

    /// Concrete perturbations for `grid` against this head.
    pub fn specs(&self, grid: &DistortionGrid) -> Result<Vec<DistortionSpec>> {
        let channel = match grid.channel {
            Some(c) if c >= self.head.num_channels() => {
                return Err(Error::Domain(format!("channel {c} out of range")));
            }
            Some(c) => c,
            None => self.strongest_channel(),
        };
        let (std, max) = (weight_std(&self.head), weight_max_abs(&self.head));
        let shifts = grid.shift_scales.iter().map(|s| DistortionSpec {
            kind: DistortionKind::AdditiveShift { channel },
            delta: s * std,
        });
        let collapses = grid.collapse_scales.iter().map(|s| DistortionSpec {
            kind: DistortionKind::SignCollapse,
            delta: s * max,
        });
        Ok(shifts.chain(collapses).collect())
    }

    pub fn default_specs(&self) -> Vec<DistortionSpec> {
        self.specs(&DistortionGrid::default())
            .expect("automatic channel is in range")
    }

    pub fn weight_std(&self) -> f64 {
        weight_std(&self.head)
    }

    pub fn weight_max_abs(&self) -> f64 {
        weight_max_abs(&self.head)
    }

    pub fn run(&self, spec: DistortionSpec) -> Result<DistortionReport> {
        let perturbed = match spec.kind {
            DistortionKind::AdditiveShift { channel } => {
                apply_additive_shift(&self.head, channel, spec.delta)?
            }
            DistortionKind::SignCollapse => apply_sign_collapse(&self.head, spec.delta)?,
        };
        let before_w = self.head.weight.data();
        let after_w = perturbed.weight.data();
        let flipped = before_w
            .iter()
            .zip(after_w)
            .filter(|(a, b)| a.signum() != b.signum() || (**a == 0.0) != (**b == 0.0))
            .count();
        let negative = after_w.iter().filter(|&&w| w < 0.0).count();

        let n = self.samples.len();
        let mut report = DistortionReport {
            spec,
            images: n,
            max_prob_deviation: 0.0,
            argmax_agreement: 0.0,
            max_linear_residual: matches!(spec.kind, DistortionKind::AdditiveShift { .. }).then_some(0.0),
            normalized_linf: 0.0,
            normalized_l1: 0.0,
            flipped_sign_fraction: flipped as f64 / before_w.len() as f64,
            negative_weight_fraction: negative as f64 / after_w.len() as f64,
            positive_fraction_before: Vec::with_capacity(n),
            positive_fraction_after: Vec::with_capacity(n),
            softmax_gt_loc_before: 0.0,
            softmax_gt_loc_after: 0.0,
            sigmoid_gt_loc_before: None,
            sigmoid_gt_loc_after: None,
            sigmoid_nwc_gt_loc_before: None,
            sigmoid_nwc_gt_loc_after: None,
            sigmoid_maps_identical: None,
            invalid: None,
        };
        let mut agree = 0usize;
        let mut l1_total = 0.0;
        let mut label_before = Vec::with_capacity(n);
        let mut label_after = Vec::with_capacity(n);
        for (s, f) in self.samples.iter().zip(&self.features) {
            let (h, w) = (s.height(), s.width());
            let batch = f.clone().reshape(prepend_one(f.shape()))?;
            let p0 = ops::softmax_rows(&self.head.logits(&batch)?)?.into_data();
            let p1 = ops::softmax_rows(&perturbed.logits(&batch)?)?.into_data();
            let dev = p0.iter().zip(&p1).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            report.max_prob_deviation = report.max_prob_deviation.max(dev);
            let (k0, k1) = (ops::argmax(&p0), ops::argmax(&p1));
            if k0 == k1 {
                agree += 1;
            }
            if report.invalid.is_none() {
                if dev > PROB_TOLERANCE {
                    report.invalid = Some((s.index, format!("probability deviation {dev:.3e}")));
                } else if k0 != k1 {
                    report.invalid = Some((s.index, format!("argmax moved from {k0} to {k1}")));
                }
            }

            let m0 = cam::vanilla_cam(&self.head, k0, f)?;
            let m1 = cam::vanilla_cam(&perturbed, k0, f)?;
            if let DistortionKind::AdditiveShift { channel } = spec.kind {
                let fi = f.outer(channel);
                let r = m0
                    .data()
                    .iter()
                    .zip(m1.data())
                    .zip(fi)
                    .fold(0.0f64, |m, ((a, b), x)| m.max(((b - a) - spec.delta * x).abs()));
                let slot = report.max_linear_residual.get_or_insert(0.0);
                *slot = slot.max(r);
                if r > RESIDUAL_TOLERANCE && report.invalid.is_none() {
                    report.invalid = Some((s.index, format!("linear residual {r:.3e}")));
                }
            }
            let up0 = cam::upsample_bilinear(&m0, h, w)?;
            let up1 = cam::upsample_bilinear(&m1, h, w)?;
            let pos = |m: &Tensor<f64>| m.data().iter().filter(|&&v| v > 0.0).count() as f64 / m.len() as f64;
            report.positive_fraction_before.push(pos(&up0));
            report.positive_fraction_after.push(pos(&up1));
            let norm0 = cam::minmax_normalize(&up0.map(|v| v.max(0.0)));
            let norm1 = cam::minmax_normalize(&up1.map(|v| v.max(0.0)));
            let mut linf = 0.0f64;
            let mut l1 = 0.0;
            for (a, b) in norm0.data().iter().zip(norm1.data()) {
                linf = linf.max((a - b).abs());
                l1 += (a - b).abs();
            }
            report.normalized_linf = report.normalized_linf.max(linf);
            l1_total += l1 / norm0.len() as f64;

            let lab = |head: &Head<f64>| -> Result<Tensor<f32>> {
                let m = cam::vanilla_cam(head, s.label, f)?;
                Ok(cam::minmax_normalize(&cam::upsample_bilinear(&m.map(|v| v.max(0.0)), h, w)?).cast())
            };
            label_before.push(lab(&self.head)?);
            label_after.push(lab(&perturbed)?);
        }
        report.argmax_agreement = agree as f64 / n as f64;
        report.normalized_l1 = l1_total / n as f64;
        let gt = boxes(self.samples);
        report.softmax_gt_loc_before = metrics::gt_known_loc(&gt, &label_before)?;
        report.softmax_gt_loc_after = metrics::gt_known_loc(&gt, &label_after)?;

        if !self.sigmoid.is_empty() {
            let mut distorted = self.model.clone();
            distorted.softmax_head = perturbed.cast();
            let mut identical = true;
            for base in &self.sigmoid {
                let (label_maps, predicted_maps) =
                    Self::sigmoid_maps(&distorted, self.samples, &base.config)?;
                identical &= label_maps.iter().zip(&base.label_maps).all(|(a, b)| a.bits_eq(b))
                    && predicted_maps
                        .iter()
                        .zip(&base.predicted_maps)
                        .all(|(a, b)| a.bits_eq(b));
                let after = Some(metrics::gt_known_loc(&gt, &label_maps)?);
                if base.config.nwc {
                    report.sigmoid_nwc_gt_loc_before = Some(base.gt_loc);
                    report.sigmoid_nwc_gt_loc_after = after;
                } else {
                    report.sigmoid_gt_loc_before = Some(base.gt_loc);
                    report.sigmoid_gt_loc_after = after;
                }
            }
            report.sigmoid_maps_identical = Some(identical);
        }
        Ok(report)
    }
}

fn prepend_one(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}

/// Convenience wrapper for a single perturbation.
pub fn run_distortion_experiment(
    model: &DualBranchModel,
    samples: &[SynthSample],
    spec: DistortionSpec,
) -> Result<DistortionReport> {
    DistortionLab::new(model, samples)?.run(spec)
}

const CSV_HEADER: [&str; 20] = [
    "kind",
    "channel",
    "delta",
    "images",
    "max_prob_deviation",
    "argmax_agreement",
    "max_linear_residual",
    "normalized_linf",
    "normalized_l1",
    "flipped_sign_fraction",
    "negative_weight_fraction",
    "mean_positive_fraction_after",
    "softmax_gt_loc_before",
    "softmax_gt_loc_after",
    "sigmoid_gt_loc_before",
    "sigmoid_gt_loc_after",
    "sigmoid_nwc_gt_loc_before",
    "sigmoid_nwc_gt_loc_after",
    "sigmoid_maps_identical",
    "valid",
];

fn opt(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map(f).unwrap_or_default()
}

/// One row per perturbation.
pub fn reports_to_csv(reports: &[DistortionReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Contract(format!("csv encoding failed: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in reports {
        let channel = match r.spec.kind {
            DistortionKind::AdditiveShift { channel } => channel.to_string(),
            DistortionKind::SignCollapse => String::new(),
        };
        w.write_record([
            r.spec.kind.name().to_string(),
            channel,
            format!("{:.9e}", r.spec.delta),
            r.images.to_string(),
            format!("{:.3e}", r.max_prob_deviation),
            format!("{:.6}", r.argmax_agreement),
            opt(r.max_linear_residual, |v| format!("{v:.3e}")),
            format!("{:.6}", r.normalized_linf),
            format!("{:.6}", r.normalized_l1),
            format!("{:.6}", r.flipped_sign_fraction),
            format!("{:.6}", r.negative_weight_fraction),
            format!("{:.6}", DistortionReport::mean(&r.positive_fraction_after)),
            format!("{:.4}", r.softmax_gt_loc_before),
            format!("{:.4}", r.softmax_gt_loc_after),
            opt(r.sigmoid_gt_loc_before, |v| format!("{v:.4}")),
            opt(r.sigmoid_gt_loc_after, |v| format!("{v:.4}")),
            opt(r.sigmoid_nwc_gt_loc_before, |v| format!("{v:.4}")),
            opt(r.sigmoid_nwc_gt_loc_after, |v| format!("{v:.4}")),
            r.sigmoid_maps_identical
                .map(|b| b.to_string())
                .unwrap_or_default(),
            r.is_valid().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::Contract(format!("csv encoding failed: {e}")))
}

pub fn write_reports_csv(reports: &[DistortionReport], path: &Path) -> Result<()> {
    write_atomic(path, &reports_to_csv(reports)?)
}

pub fn summary(reports: &[DistortionReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(out, "{}", r.spec);
        let _ = writeln!(
            out,
            "  probs: max deviation {:.3e}, argmax agreement {:.2}%",
            r.max_prob_deviation,
            100.0 * r.argmax_agreement
        );
        if let Some(res) = r.max_linear_residual {
            let _ = writeln!(out, "  linear residual vs delta*F_i: {res:.3e}");
        }
        let _ = writeln!(
            out,
            "  normalized map change: Linf {:.4}, mean L1 {:.4}; weights flipped {:.1}%, negative {:.1}%",
            r.normalized_linf,
            r.normalized_l1,
            100.0 * r.flipped_sign_fraction,
            100.0 * r.negative_weight_fraction
        );
        let _ = writeln!(
            out,
            "  GT-known loc softmax {:.2} -> {:.2}{}",
            r.softmax_gt_loc_before,
            r.softmax_gt_loc_after,
            match (
                r.sigmoid_gt_loc_before,
                r.sigmoid_gt_loc_after,
                r.sigmoid_nwc_gt_loc_before,
                r.sigmoid_nwc_gt_loc_after,
            ) {
                (Some(a), Some(b), Some(c), Some(d)) => {
                    format!(", sigmoid {a:.2} -> {b:.2}, sigmoid with nwc {c:.2} -> {d:.2}")
                }
                _ => String::new(),
            }
        );
        match &r.invalid {
            None => out.push_str("  valid\n"),
            Some((i, why)) => {
                let _ = writeln!(out, "  INVALID at image {i}: {why}");
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head() -> Head<f64> {
        Head::new(
            Tensor::new([3, 2], vec![0.5, -1.0, 0.0, 0.0, 2.0, 1.5]).unwrap(),
            Tensor::new([2], vec![0.1, -0.2]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn grid_text_round_trip() {
        let g = DistortionGrid {
            channel: Some(3),
            shift_scales: vec![0.25],
            collapse_scales: vec![],
        };
        assert_eq!(DistortionGrid::from_text(&g.to_text()).unwrap(), g);
        assert_eq!(DistortionGrid::from_text("").unwrap(), DistortionGrid::default());
        assert!(DistortionGrid::from_text("collapse_scales = -1").is_err());
    }

    #[test]
    fn zero_delta_is_identity() {
        assert_eq!(apply_additive_shift(&head(), 1, 0.0).unwrap(), head());
        assert_eq!(apply_sign_collapse(&head(), 0.0).unwrap(), head());
    }

    #[test]
    fn shift_touches_one_row() {
        let h = apply_additive_shift(&head(), 1, 0.5).unwrap();
        assert_eq!(h.weight.data(), &[0.5, -1.0, 0.5, 0.5, 2.0, 1.5]);
        assert_eq!(h.bias, head().bias);
        assert!(apply_additive_shift(&head(), 3, 1.0).is_err());
    }

    #[test]
    fn collapse_makes_all_negative() {
        let h = apply_sign_collapse(&head(), 2.5).unwrap();
        assert!(h.weight.data().iter().all(|&w| w < 0.0));
        assert!(apply_sign_collapse(&head(), -1.0).is_err());
    }

    #[test]
    fn logits_move_uniformly() {
        let f = Tensor::<f64>::from_fn([1, 3, 2, 2], |i| (i as f64 * 0.37).sin().abs());
        let base = head().logits(&f).unwrap();
        let shifted = apply_additive_shift(&head(), 2, 0.7).unwrap().logits(&f).unwrap();
        let mean2 = f.data()[8..12].iter().sum::<f64>() / 4.0;
        for k in 0..2 {
            assert!((shifted.data()[k] - base.data()[k] - 0.7 * mean2).abs() < 1e-12);
        }
    }
}
