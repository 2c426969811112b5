//! Independent reference implementations used as test oracles. Nothing here
//! calls into the code under test except for plain data accessors.

#![allow(dead_code)]

use std::collections::BTreeMap;

use evidx_core::domain::{AtlasConfig, Case, Diagnosis, Direction, Severity};
use evidx_core::model::{activation_pattern, batch_loss, ModelParameters, Objective, Sample};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Labels by direct scans over the case list: for every case, its peers are
/// re-collected and the class means recomputed from scratch.
pub fn brute_force_labels(
    cases: &[Case],
    atlas: &AtlasConfig,
    bin_width: f64,
    min_group_size: usize,
) -> Option<BTreeMap<String, BTreeMap<i32, Severity>>> {
    fn means(cases: &[&Case], code: i32) -> ([f64; 3], [usize; 3]) {
        let mut sum = [0.0; 3];
        let mut n = [0usize; 3];
        for c in cases {
            let j = match c.diagnosis {
                Diagnosis::NC => 0,
                Diagnosis::MCI => 1,
                Diagnosis::AD => 2,
            };
            sum[j] += c.measures.volume_mm3[&code];
            n[j] += 1;
        }
        (
            [
                sum[0] / n[0] as f64,
                sum[1] / n[1] as f64,
                sum[2] / n[2] as f64,
            ],
            n,
        )
    }
    fn ordered(dir: Direction, t_no: f64, t_sev: f64) -> bool {
        match dir {
            Direction::Atrophy => t_sev < t_no,
            Direction::Enlargement => t_no < t_sev,
        }
    }

    let all: Vec<&Case> = cases.iter().collect();
    let mut global = Vec::new();
    for r in atlas.relevant() {
        let (m, n) = means(&all, r.code);
        if n.contains(&0) {
            return None;
        }
        let (t_no, t_sev) = ((m[0] + m[1]) / 2.0, (m[2] + m[1]) / 2.0);
        if !ordered(r.direction, t_no, t_sev) {
            return None;
        }
        global.push((t_no, t_sev));
    }

    let mut out = BTreeMap::new();
    for c in cases {
        let bin = (c.clinical.age / bin_width).floor();
        let peers: Vec<&Case> = cases
            .iter()
            .filter(|p| {
                (p.clinical.age / bin_width).floor() == bin && p.clinical.sex == c.clinical.sex
            })
            .collect();
        let mut labels = BTreeMap::new();
        for (r, g) in atlas.relevant().iter().zip(&global) {
            let (m, n) = means(&peers, r.code);
            let own = (m[0] + m[1]) / 2.0;
            let sev = (m[2] + m[1]) / 2.0;
            let use_own = n.iter().all(|&k| k >= min_group_size) && ordered(r.direction, own, sev);
            let (t_no, t_sev) = if use_own { (own, sev) } else { *g };
            let v = c.measures.volume_mm3[&r.code];
            let s = match r.direction {
                Direction::Atrophy if v > t_no => Severity::No,
                Direction::Atrophy if v < t_sev => Severity::Severe,
                Direction::Enlargement if v < t_no => Severity::No,
                Direction::Enlargement if v > t_sev => Severity::Severe,
                _ => Severity::Mild,
            };
            labels.insert(r.code, s);
        }
        out.insert(c.id.clone(), labels);
    }
    Some(out)
}

/// AUROC by enumerating every (positive, negative) pair.
pub fn pair_count_auroc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Direct 3D convolution with zero padding `k / 2`, weights laid out
/// `[out][in][kd][kh][kw]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv3d(
    input: &[f64],
    cin: usize,
    dims: [usize; 3],
    weights: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
    k: usize,
    stride: usize,
) -> (Vec<f64>, [usize; 3]) {
    let pad = (k / 2) as isize;
    let od = dims.map(|d| (d + 2 * (k / 2) - k) / stride + 1);
    let mut out = vec![0.0; cout * od[0] * od[1] * od[2]];
    for co in 0..cout {
        for z in 0..od[0] {
            for y in 0..od[1] {
                for x in 0..od[2] {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..cin {
                        for a in 0..k {
                            for b in 0..k {
                                for c in 0..k {
                                    let iz = (z * stride + a) as isize - pad;
                                    let iy = (y * stride + b) as isize - pad;
                                    let ix = (x * stride + c) as isize - pad;
                                    if iz < 0
                                        || iy < 0
                                        || ix < 0
                                        || iz >= dims[0] as isize
                                        || iy >= dims[1] as isize
                                        || ix >= dims[2] as isize
                                    {
                                        continue;
                                    }
                                    let w = weights[(((co * cin + ci) * k + a) * k + b) * k + c];
                                    let v = input[((ci * dims[0] + iz as usize) * dims[1]
                                        + iy as usize)
                                        * dims[2]
                                        + ix as usize];
                                    acc += w * v;
                                }
                            }
                        }
                    }
                    out[((co * od[0] + z) * od[1] + y) * od[2] + x] = acc;
                }
            }
        }
    }
    (out, od)
}

/// Encoder forward pass built from [`naive_conv3d`]: conv, ReLU per stage,
/// then the per-channel mean.
pub fn naive_encode(model: &ModelParameters, input: &[f32]) -> Vec<f64> {
    let cfg = model.config();
    let mut x: Vec<f64> = input.iter().map(|&v| v as f64).collect();
    let mut dims = cfg.grid;
    let mut cin = cfg.encoder.in_channels;
    let params = model.encoder();
    let mut off = 0;
    for st in &cfg.encoder.stages {
        let wlen = st.channels * cin * st.kernel.pow(3);
        let w = &params[off..off + wlen];
        off += wlen;
        let b = if cfg.encoder.bias {
            let b = &params[off..off + st.channels];
            off += st.channels;
            Some(b)
        } else {
            None
        };
        let (mut y, od) = naive_conv3d(&x, cin, dims, w, b, st.channels, st.kernel, st.stride);
        y.iter_mut().for_each(|v| *v = v.max(0.0));
        x = y;
        dims = od;
        cin = st.channels;
    }
    let n = dims.iter().product::<usize>();
    x.chunks(n)
        .map(|c| c.iter().sum::<f64>() / n as f64)
        .collect()
}

/// Sum over cases and heads of `-ln max(p, 1e-7)`, by plain loops.
pub fn naive_mc_loss(dists: &[Vec<[f64; 3]>], labels: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    for i in 0..dists.len() {
        for k in 0..dists[i].len() {
            total += -dists[i][k][labels[i][k]].max(1e-7).ln();
        }
    }
    total
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// Central finite differences on `n` parameters sampled evenly from each
/// layout segment. Parameters whose ±step perturbation flips any ReLU
/// (where the loss is not differentiable) are skipped and counted.
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check(
    model: &ModelParameters,
    batch: &[Sample<'_>],
    objective: Objective,
    analytic: &[f64],
    n: usize,
    step: f64,
    floor: f64,
    seed: u64,
) -> GradCheck {
    let layout = model.layout().clone();
    let mut segments = vec![layout.encoder.clone(), layout.det_head.clone()];
    segments.extend(layout.aux_encoder.clone());
    if !layout.mc_heads.is_empty() {
        segments.push(layout.mc_heads.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = segments
        .iter()
        .map(|r| {
            let mut v: Vec<usize> = r.clone().collect();
            v.shuffle(&mut rng);
            v
        })
        .collect();
    let patterns = |m: &ModelParameters| -> Vec<Vec<bool>> {
        batch
            .iter()
            .map(|s| activation_pattern(m, s.input))
            .collect()
    };
    let base = patterns(model);
    let mut report = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut probe = model.clone();
    let mut seg = 0;
    while report.checked < n && pools.iter().any(|p| !p.is_empty()) {
        let pool = &mut pools[seg % segments.len()];
        seg += 1;
        let Some(i) = pool.pop() else { continue };
        let orig = probe.values[i];
        probe.values[i] = orig + step;
        let plus_ok = patterns(&probe) == base;
        let lp = batch_loss(&probe, batch, objective).unwrap().total;
        probe.values[i] = orig - step;
        let minus_ok = patterns(&probe) == base;
        let lm = batch_loss(&probe, batch, objective).unwrap().total;
        probe.values[i] = orig;
        if !(plus_ok && minus_ok) {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.max_rel_err = report.max_rel_err.max(err);
        report.checked += 1;
    }
    report
}
