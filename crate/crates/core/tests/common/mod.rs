//! Shared oracles for the integration tests: a finite-difference gradient
//! checker and brute-force reimplementations of the localization and fidelity
//! metrics.

#![allow(dead_code)]

use camlab::autograd::{BceCoefficients, Tape, Var};
use camlab::metrics::{BBox, FidelityRecord};
use camlab::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero so ReLU kinks stay out of reach of the probe.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

// ---------------------------------------------------------------------------
// Finite differences

pub type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

fn forward(case: &GradCase, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars).expect("case builds");
    tape.value(out).item().expect("scalar output")
}

/// Largest `|analytic - central difference| / max(|analytic|, |numeric|, FD_FLOOR)`
/// over every element of every input.
pub fn max_relative_error(case: &GradCase) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars).expect("case builds");
    tape.backward(out).expect("backward");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut worst = 0.0f64;
    let mut inputs = case.inputs.clone();
    for j in 0..inputs.len() {
        for e in 0..inputs[j].len() {
            let x = inputs[j].data()[e];
            inputs[j].data_mut()[e] = x + FD_STEP;
            let up = forward(case, &inputs);
            inputs[j].data_mut()[e] = x - FD_STEP;
            let down = forward(case, &inputs);
            inputs[j].data_mut()[e] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[j].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

/// `Σ r ⊙ x` for a fixed random `r`, turning any tensor into a scalar with a
/// non-trivial upstream gradient.
fn project(tape: &mut Tape<f64>, x: Var, r: &Tensor<f64>) -> Result<Var> {
    let c = tape.constant(r.clone());
    let p = tape.mul(x, c)?;
    Ok(tape.sum(p))
}

/// One randomized case per differentiable op plus a small full network.
pub fn grad_cases(seed: u64) -> Vec<GradCase> {
    let mut g = rng(seed);
    let mut cases = Vec::new();

    // conv2d with random geometry
    let (b, cin, cout) = (g.gen_range(1..3), g.gen_range(1..4), g.gen_range(1..4));
    let k = g.gen_range(1..4);
    let (stride, padding) = (g.gen_range(1..3), g.gen_range(0..2));
    let (h, w) = (g.gen_range(k..k + 4), g.gen_range(k..k + 4));
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let r = uniform(&mut g, &[b, cout, oh, ow], -1.0, 1.0);
    cases.push(GradCase {
        name: "conv2d",
        inputs: vec![
            uniform(&mut g, &[b, cin, h, w], -1.0, 1.0),
            uniform(&mut g, &[cout, cin, k, k], -1.0, 1.0),
        ],
        build: Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], stride, padding)?;
            project(t, y, &r)
        }),
    });

    let (b, c, h, w) = (
        g.gen_range(1..3),
        g.gen_range(1..4),
        2 * g.gen_range(1..4),
        2 * g.gen_range(1..4),
    );
    let r = uniform(&mut g, &[b, c, h, w], -1.0, 1.0);
    cases.push(GradCase {
        name: "channel_bias",
        inputs: vec![
            uniform(&mut g, &[b, c, h, w], -1.0, 1.0),
            uniform(&mut g, &[c], -1.0, 1.0),
        ],
        build: Box::new(move |t, v| {
            let y = t.channel_bias(v[0], v[1])?;
            project(t, y, &r)
        }),
    });

    let r2 = uniform(&mut g, &[b, c, h, w], -1.0, 1.0);
    cases.push(GradCase {
        name: "relu",
        inputs: vec![away_from_zero(&mut g, &[b, c, h, w])],
        build: Box::new(move |t, v| {
            let y = t.relu(v[0]);
            project(t, y, &r2)
        }),
    });

    let rp = uniform(&mut g, &[b, c, h / 2, w / 2], -1.0, 1.0);
    cases.push(GradCase {
        name: "max_pool2d",
        inputs: vec![uniform(&mut g, &[b, c, h, w], -1.0, 1.0)],
        build: Box::new(move |t, v| {
            let y = t.max_pool2d(v[0], 2)?;
            project(t, y, &rp)
        }),
    });

    let rg = uniform(&mut g, &[b, c], -1.0, 1.0);
    cases.push(GradCase {
        name: "global_avg_pool",
        inputs: vec![uniform(&mut g, &[b, c, h, w], -1.0, 1.0)],
        build: Box::new(move |t, v| {
            let y = t.global_avg_pool(v[0])?;
            project(t, y, &rg)
        }),
    });

    let (n, classes) = (g.gen_range(1..6), g.gen_range(2..6));
    let rf = uniform(&mut g, &[b, classes], -1.0, 1.0);
    cases.push(GradCase {
        name: "fully_connected",
        inputs: vec![
            uniform(&mut g, &[b, n], -1.0, 1.0),
            uniform(&mut g, &[n, classes], -1.0, 1.0),
            uniform(&mut g, &[classes], -1.0, 1.0),
        ],
        build: Box::new(move |t, v| {
            let y = t.fully_connected(v[0], v[1], v[2])?;
            project(t, y, &rf)
        }),
    });

    let rs = uniform(&mut g, &[b, classes], -1.0, 1.0);
    cases.push(GradCase {
        name: "softmax",
        inputs: vec![uniform(&mut g, &[b, classes], -3.0, 3.0)],
        build: Box::new(move |t, v| {
            let y = t.softmax(v[0])?;
            project(t, y, &rs)
        }),
    });

    let rs2 = uniform(&mut g, &[b, classes], -1.0, 1.0);
    cases.push(GradCase {
        name: "sigmoid",
        inputs: vec![uniform(&mut g, &[b, classes], -4.0, 4.0)],
        build: Box::new(move |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, &rs2)
        }),
    });

    cases.push(GradCase {
        name: "mul",
        inputs: vec![
            uniform(&mut g, &[b, classes], -1.0, 1.0),
            uniform(&mut g, &[b, classes], -1.0, 1.0),
        ],
        build: Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            Ok(t.sum(y))
        }),
    });

    cases.push(GradCase {
        name: "mean",
        inputs: vec![
            uniform(&mut g, &[b, c, h], -1.0, 1.0),
            uniform(&mut g, &[b, c, h], -1.0, 1.0),
        ],
        build: Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            Ok(t.mean(y))
        }),
    });

    let index = g.gen_range(0..b * classes);
    cases.push(GradCase {
        name: "select",
        inputs: vec![uniform(&mut g, &[b, classes], -1.0, 1.0)],
        build: Box::new(move |t, v| {
            let s = t.sigmoid(v[0]);
            t.select(s, index)
        }),
    });

    let labels: Vec<usize> = (0..b).map(|_| g.gen_range(0..classes)).collect();
    let ce_labels = labels.clone();
    cases.push(GradCase {
        name: "cross_entropy",
        inputs: vec![uniform(&mut g, &[b, classes], -4.0, 4.0)],
        build: Box::new(move |t, v| t.cross_entropy(v[0], &ce_labels)),
    });

    let coefficients = BceCoefficients {
        positive: g.gen_range(0.1..3.0),
        negative: g.gen_range(0.1..1.0),
    };
    cases.push(GradCase {
        name: "binary_cross_entropy",
        inputs: vec![uniform(&mut g, &[b, classes], -6.0, 6.0)],
        build: Box::new(move |t, v| t.binary_cross_entropy(v[0], &labels, coefficients)),
    });

    // conv -> bias -> relu -> pool -> gap -> fc -> cross-entropy
    let (cin, mid, classes) = (g.gen_range(1..3), g.gen_range(1..4), g.gen_range(2..4));
    let labels: Vec<usize> = (0..2).map(|_| g.gen_range(0..classes)).collect();
    cases.push(GradCase {
        name: "network",
        inputs: vec![
            uniform(&mut g, &[2, cin, 4, 4], -1.0, 1.0),
            uniform(&mut g, &[mid, cin, 3, 3], -1.0, 1.0),
            uniform(&mut g, &[mid], -0.5, 0.5),
            uniform(&mut g, &[mid, classes], -1.0, 1.0),
            uniform(&mut g, &[classes], -0.5, 0.5),
        ],
        build: Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], 1, 1)?;
            let y = t.channel_bias(y, v[2])?;
            let y = t.relu(y);
            let y = t.max_pool2d(y, 2)?;
            let y = t.global_avg_pool(y)?;
            let y = t.fully_connected(y, v[3], v[4])?;
            t.cross_entropy(y, &labels)
        }),
    });

    cases
}

// ---------------------------------------------------------------------------
// Metric oracles

pub const SIDE: usize = 8;

/// Heatmap with values on a coarse grid so ties, zeros and exact threshold
/// hits all occur.
pub fn random_heatmap(g: &mut ChaCha8Rng) -> Tensor<f32> {
    let zero_rate = g.gen_range(0.0..0.7);
    Tensor::from_fn([SIDE, SIDE], |_| {
        if g.gen_bool(zero_rate) {
            0.0
        } else {
            g.gen_range(0..=20) as f32 / 20.0
        }
    })
}

pub fn random_box(g: &mut ChaCha8Rng) -> BBox {
    let (x0, y0) = (g.gen_range(0..SIDE), g.gen_range(0..SIDE));
    let (x1, y1) = (g.gen_range(x0 + 1..=SIDE), g.gen_range(y0 + 1..=SIDE));
    BBox { x0, y0, x1, y1 }
}

fn inside(b: &BBox, x: usize, y: usize) -> bool {
    x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1
}

/// IoU by counting covered pixels on a grid large enough for both boxes.
pub fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let side = a.x1.max(a.y1).max(b.x1).max(b.y1);
    let (mut both, mut either) = (0usize, 0usize);
    for y in 0..side {
        for x in 0..side {
            let (p, q) = (inside(a, x, y), inside(b, x, y));
            both += (p && q) as usize;
            either += (p || q) as usize;
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    parent[i] = r;
    r
}

/// Component boxes by union-find over 4-neighbour pairs, sorted for comparison.
pub fn boxes_oracle(map: &Tensor<f32>, tau: f64) -> Vec<BBox> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let fg: Vec<bool> = map.data().iter().map(|&v| v > 0.0 && v as f64 >= tau).collect();
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if !fg[p] {
                continue;
            }
            for q in [(x + 1 < w).then(|| p + 1), (y + 1 < h).then(|| p + w)]
                .into_iter()
                .flatten()
            {
                if fg[q] {
                    let (a, b) = (find(&mut parent, p), find(&mut parent, q));
                    parent[a] = b;
                }
            }
        }
    }
    let mut boxes: std::collections::BTreeMap<usize, BBox> = Default::default();
    for p in (0..h * w).filter(|&p| fg[p]) {
        let (y, x) = (p / w, p % w);
        let root = find(&mut parent, p);
        let b = boxes.entry(root).or_insert(BBox {
            x0: x,
            y0: y,
            x1: x + 1,
            y1: y + 1,
        });
        b.x0 = b.x0.min(x);
        b.y0 = b.y0.min(y);
        b.x1 = b.x1.max(x + 1);
        b.y1 = b.y1.max(y + 1);
    }
    let mut v: Vec<BBox> = boxes.into_values().collect();
    v.sort_by_key(|b| (b.x0, b.y0, b.x1, b.y1));
    v
}

pub fn best_iou_oracle(map: &Tensor<f32>, tau: f64, gt: &BBox) -> f64 {
    boxes_oracle(map, tau)
        .iter()
        .map(|b| iou_oracle(b, gt))
        .fold(0.0, f64::max)
}

pub fn gt_known_oracle(boxes: &[BBox], maps: &[Tensor<f32>]) -> f64 {
    let hits = boxes
        .iter()
        .zip(maps)
        .filter(|(gt, m)| best_iou_oracle(m, 0.2, gt) >= 0.5)
        .count();
    100.0 * hits as f64 / boxes.len() as f64
}

pub fn top1_loc_oracle(boxes: &[BBox], labels: &[usize], predictions: &[usize], maps: &[Tensor<f32>]) -> f64 {
    let hits = (0..boxes.len())
        .filter(|&i| labels[i] == predictions[i] && best_iou_oracle(&maps[i], 0.2, &boxes[i]) >= 0.5)
        .count();
    100.0 * hits as f64 / boxes.len() as f64
}

/// Every threshold of the sweep evaluated from scratch.
pub fn max_box_acc_v2_oracle(boxes: &[BBox], maps: &[Tensor<f32>]) -> f64 {
    let mut total = 0.0;
    for delta in [0.3, 0.5, 0.7] {
        let mut best = 0usize;
        for i in 0..=1000 {
            let tau = i as f64 / 1000.0;
            let hits = boxes
                .iter()
                .zip(maps)
                .filter(|(gt, m)| best_iou_oracle(m, tau, gt) >= delta)
                .count();
            best = best.max(hits);
        }
        total += best as f64 / boxes.len() as f64;
    }
    100.0 * total / 3.0
}

/// Average precision from the precision/recall pair at every distinct
/// score, counting pixels with a quadratic scan.
pub fn pxap_oracle(masks: &[Vec<bool>], maps: &[Tensor<f32>]) -> f64 {
    let pixels: Vec<(f32, bool)> = masks
        .iter()
        .zip(maps)
        .flat_map(|(m, h)| h.data().iter().copied().zip(m.iter().copied()))
        .collect();
    let positives = pixels.iter().filter(|p| p.1).count() as f64;
    let mut thresholds: Vec<f32> = pixels.iter().map(|p| p.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let tp = pixels.iter().filter(|p| p.0 >= t && p.1).count() as f64;
        let sel = pixels.iter().filter(|p| p.0 >= t).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * (tp / sel);
        prev_recall = recall;
    }
    100.0 * ap
}

pub fn average_drop_oracle(records: &[FidelityRecord]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for r in records {
        if r.full_score > 1e-12 {
            let y = r.full_score;
            let o = r.explanation_score;
            sum += if y > o { (y - o) / y } else { 0.0 };
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        100.0 * sum / n as f64
    }
}

pub fn increase_oracle(records: &[FidelityRecord]) -> f64 {
    let mut hits = 0;
    for r in records {
        if r.explanation_score > r.full_score {
            hits += 1;
        }
    }
    100.0 * hits as f64 / records.len() as f64
}

/// Scores on a coarse grid so ties and zero full scores appear.
pub fn random_records(g: &mut ChaCha8Rng, n: usize) -> Vec<FidelityRecord> {
    (0..n)
        .map(|_| FidelityRecord {
            full_score: if g.gen_bool(0.1) {
                0.0
            } else {
                g.gen_range(0..=10) as f64 / 10.0
            },
            explanation_score: g.gen_range(0..=10) as f64 / 10.0,
        })
        .collect()
}

/// One random 8x8 localization instance of `n` images.
pub struct LocInstance {
    pub boxes: Vec<BBox>,
    pub maps: Vec<Tensor<f32>>,
    pub masks: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
}

pub fn random_instance(seed: u64, n: usize) -> LocInstance {
    let mut g = rng(seed);
    let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut g)).collect();
    let maps = (0..n).map(|_| random_heatmap(&mut g)).collect();
    // at least one positive pixel per instance, so PxAP is defined
    let masks = boxes
        .iter()
        .map(|b| {
            (0..SIDE * SIDE)
                .map(|p| inside(b, p % SIDE, p / SIDE) && g.gen_bool(0.8))
                .collect::<Vec<bool>>()
        })
        .map(|mut m: Vec<bool>| {
            if !m.iter().any(|&x| x) {
                m[0] = true;
            }
            m
        })
        .collect();
    let labels = (0..n).map(|_| g.gen_range(0..3)).collect();
    let predictions = (0..n).map(|_| g.gen_range(0..3)).collect();
    LocInstance {
        boxes,
        maps,
        masks,
        labels,
        predictions,
    }
}
