//! Counterfactual test: corrupt the regions labeled `Severe` and measure how
//! far the predicted AD probability moves.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{AtlasConfig, Case, MCLabelSet, VolumeGrid};
use crate::error::{Error, Result};
use crate::model::{predict_batch, ModelParameters};
use crate::seed::{derive_seed, rng_for};
use crate::transfer::{prepare_input, InputMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualConfig {
    /// Noise standard deviation in units of the volume's intensity std.
    pub noise_sigma: f64,
    pub bin_width: f64,
    pub seed: u64,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 1.0,
            bin_width: 0.02,
            seed: 0,
        }
    }
}

/// Adds Gaussian noise to the voxels of every `Severe` region, clamped to
/// `[0, 1]`. Other voxels are copied unchanged.
pub fn corrupt_case(
    case: &Case,
    labels: &MCLabelSet,
    noise_sigma: f64,
    seed: u64,
) -> Result<VolumeGrid> {
    let severe = labels.severe_codes();
    if severe.is_empty() {
        return Err(Error::NotEligible(format!(
            "{} has no Severe region",
            case.id
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(vec![format!(
            "noise_sigma: {noise_sigma} must be >= 0"
        )]));
    }
    if noise_sigma == 0.0 {
        return Ok(case.volume.clone());
    }
    let sigma = noise_sigma * case.volume.intensity_std();
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let mut rng = rng_for(seed, &format!("corrupt/{}", case.id));
    let data = case
        .volume
        .data()
        .iter()
        .zip(case.parcellation.labels())
        .map(|(&v, code)| {
            if severe.contains(code) {
                (v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32
            } else {
                v
            }
        })
        .collect();
    VolumeGrid::new(case.volume.shape(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPair {
    pub case_id: String,
    pub p_orig: f64,
    pub p_corrupt: f64,
    pub dif: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub pairs: Vec<CounterfactualPair>,
    pub histogram: Vec<HistogramBin>,
    pub noise_seed: u64,
    pub noise_sigma: f64,
    pub bin_width: f64,
    /// Cases skipped for lacking a `Severe` region.
    pub n_excluded: usize,
}

impl CounterfactualResult {
    pub fn first_bin_count(&self) -> usize {
        self.histogram.first().map_or(0, |b| b.count)
    }

    pub fn write_histogram_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_low", "bin_high", "count"])?;
        for b in &self.histogram {
            w.write_record([b.low.to_string(), b.high.to_string(), b.count.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_pairs_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.pairs {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Bins of width `bin_width` covering `[0, 1]`; a value is placed in bin
/// `floor(v / bin_width)`, with 1.0 folded into the last bin.
pub fn histogram(values: &[f64], bin_width: f64) -> Result<Vec<HistogramBin>> {
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        return Err(Error::Config(vec![format!(
            "bin_width: {bin_width} outside (0, 1]"
        )]));
    }
    let n_bins = (1.0 / bin_width - 1e-9).ceil() as usize;
    let mut bins: Vec<HistogramBin> = (0..n_bins)
        .map(|i| HistogramBin {
            low: i as f64 * bin_width,
            high: (i + 1) as f64 * bin_width,
            count: 0,
        })
        .collect();
    for &v in values {
        let i = ((v / bin_width).floor() as usize).min(n_bins - 1);
        bins[i].count += 1;
    }
    Ok(bins)
}

/// Pairs every eligible case with its corrupted copy and histograms
/// `|P(corrupt) - P(orig)|`, where `P` is the predicted AD probability.
pub fn counterfactual_test(
    model: &ModelParameters,
    cases: &[&Case],
    labels: &std::collections::BTreeMap<String, MCLabelSet>,
    atlas: &AtlasConfig,
    input_mode: InputMode,
    config: &CounterfactualConfig,
) -> Result<CounterfactualResult> {
    let mut ids = Vec::new();
    let mut originals = Vec::new();
    let mut corrupted = Vec::new();
    let mut n_excluded = 0;
    let noise_seed = derive_seed(config.seed, "counterfactual");
    for &case in cases {
        let set = labels
            .get(&case.id)
            .ok_or_else(|| Error::Label(format!("no severity labels for {}", case.id)))?;
        let volume = match corrupt_case(case, set, config.noise_sigma, noise_seed) {
            Ok(v) => v,
            Err(Error::NotEligible(_)) => {
                n_excluded += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut altered = case.clone();
        altered.volume = volume;
        ids.push(case.id.clone());
        originals.push(prepare_input(case, atlas, input_mode)?);
        corrupted.push(prepare_input(&altered, atlas, input_mode)?);
    }
    if ids.is_empty() {
        return Err(Error::EmptyEval("no case has a Severe region".into()));
    }
    let p_orig = predict_batch(
        model,
        &originals.iter().map(Vec::as_slice).collect::<Vec<_>>(),
    )?;
    let p_corr = predict_batch(
        model,
        &corrupted.iter().map(Vec::as_slice).collect::<Vec<_>>(),
    )?;
    let pairs: Vec<CounterfactualPair> = ids
        .into_iter()
        .zip(p_orig.iter().zip(&p_corr))
        .map(|(case_id, (o, c))| CounterfactualPair {
            case_id,
            p_orig: o.prob_ad(),
            p_corrupt: c.prob_ad(),
            dif: (c.prob_ad() - o.prob_ad()).abs(),
        })
        .collect();
    let difs: Vec<f64> = pairs.iter().map(|p| p.dif).collect();
    Ok(CounterfactualResult {
        histogram: histogram(&difs, config.bin_width)?,
        pairs,
        noise_seed,
        noise_sigma: config.noise_sigma,
        bin_width: config.bin_width,
        n_excluded,
    })
}
