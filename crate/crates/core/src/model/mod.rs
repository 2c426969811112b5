//! Detection model: a shared 3D convolutional encoder, a fully connected
//! detection head (NC vs AD) and K severity heads (No / Mild / Severe), with
//! hand-written backpropagation.
//!
//! All parameters live in one flat `f64` vector split into segments by
//! [`ParamLayout`]. Forward and backward passes run one sample at a time; a
//! batch gradient is the in-order sum of per-sample gradients, so results do
//! not depend on how samples are scheduled across threads.

pub mod checkpoint;
mod conv;
pub mod optim;

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use conv::{gemm, ConvGeom};

use crate::domain::{AtlasConfig, Diagnosis, MCLabelSet, VolumeGrid};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Probability floor inside the logarithm of every cross-entropy term.
pub const PROB_EPS: f64 = 1e-7;

pub const N_SEVERITY: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: String,
    pub in_channels: usize,
    pub stages: Vec<ConvStage>,
    pub bias: bool,
}

impl Default for EncoderConfig {
    /// Three stride-2 stages of 8, 16 and 32 channels, then global average pooling.
    fn default() -> Self {
        Self::desk(&[8, 16, 32])
    }
}

impl EncoderConfig {
    pub fn desk(channels: &[usize]) -> Self {
        Self {
            variant: format!("cnn{}", channels.len()),
            in_channels: 1,
            stages: channels
                .iter()
                .map(|&c| ConvStage {
                    channels: c,
                    kernel: 3,
                    stride: 2,
                })
                .collect(),
            bias: true,
        }
    }

    /// Named variants; the `-wide` and `-deep` ones stand in for larger backbones.
    pub fn named(variant: &str) -> Option<Self> {
        let mut cfg = match variant {
            "cnn3" => Self::desk(&[8, 16, 32]),
            "cnn3-wide" => Self::desk(&[12, 24, 48]),
            "cnn4-deep" => {
                let mut c = Self::desk(&[8, 16, 32, 32]);
                c.stages[3].stride = 1;
                c
            }
            _ => return None,
        };
        cfg.variant = variant.to_string();
        Some(cfg)
    }

    /// Width `D` of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    pub fn geometry(&self, grid: [usize; 3]) -> Result<Vec<ConvGeom>> {
        let mut dims = grid;
        let mut cin = self.in_channels;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            let g =
                ConvGeom::new(cin, st.channels, st.kernel, st.stride, dims).ok_or_else(|| {
                    Error::Model(format!("stage {i} is undefined for input dims {dims:?}"))
                })?;
            dims = g.out_dims;
            cin = st.channels;
            out.push(g);
        }
        Ok(out)
    }

    fn param_len(&self, geoms: &[ConvGeom]) -> usize {
        geoms
            .iter()
            .map(|g| g.weight_len() + if self.bias { g.out_channels } else { 0 })
            .sum()
    }
}

/// How the auxiliary (evidence) encoder takes part in an evidence-as-input model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxMode {
    /// Fine-tuned jointly with the primary encoder.
    Trainable,
    /// Used as a fixed feature extractor.
    Frozen,
    /// Its features are replaced by zeros (ablation).
    Zeroed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: [usize; 3],
    pub encoder: EncoderConfig,
    /// Second encoder whose features are concatenated to the primary ones.
    pub aux: Option<AuxMode>,
    pub head_hidden: usize,
    /// Number of severity heads (K); zero for a detection-only model.
    pub mc_heads: usize,
}

impl ModelConfig {
    /// Detection-only model with a `D -> D/2 -> 2` head.
    pub fn detection(grid: [usize; 3], encoder: EncoderConfig) -> Self {
        let hidden = (encoder.feature_dim() / 2).max(1);
        Self {
            grid,
            encoder,
            aux: None,
            head_hidden: hidden,
            mc_heads: 0,
        }
    }

    pub fn with_mc_heads(mut self, k: usize) -> Self {
        self.mc_heads = k;
        self
    }

    pub fn with_aux(mut self, mode: AuxMode) -> Self {
        self.aux = Some(mode);
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim()
    }

    /// Width of the detection head input: `D`, or `2D` with an auxiliary encoder.
    pub fn head_input(&self) -> usize {
        self.feature_dim() * if self.aux.is_some() { 2 } else { 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim() < 8 {
            return Err(Error::Model(format!(
                "feature dimension {} is below 8",
                self.feature_dim()
            )));
        }
        if self.head_hidden == 0 {
            return Err(Error::Model("detection head needs a hidden layer".into()));
        }
        self.encoder.geometry(self.grid).map(|_| ())
    }
}

/// Parameter segments inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub encoder: Range<usize>,
    pub aux_encoder: Option<Range<usize>>,
    pub det_head: Range<usize>,
    pub mc_heads: Range<usize>,
    pub total: usize,
}

/// Immutable network structure: configuration, layout and precomputed conv taps.
#[derive(Debug)]
pub struct Network {
    config: ModelConfig,
    layout: ParamLayout,
    geoms: Vec<ConvGeom>,
    taps: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Arc<Self>> {
        config.validate()?;
        let geoms = config.encoder.geometry(config.grid)?;
        let taps = geoms.iter().map(ConvGeom::taps).collect();
        let enc_len = config.encoder.param_len(&geoms);
        let d_in = config.head_input();
        let h = config.head_hidden;
        let det_len = h * d_in + h + 2 * h + 2;
        let mc_len = config.mc_heads * (N_SEVERITY * config.feature_dim() + N_SEVERITY);
        let encoder = 0..enc_len;
        let aux_encoder = config.aux.map(|_| enc_len..2 * enc_len);
        let det_start = aux_encoder.as_ref().map_or(enc_len, |r| r.end);
        let det_head = det_start..det_start + det_len;
        let mc_heads = det_head.end..det_head.end + mc_len;
        let total = mc_heads.end;
        Ok(Arc::new(Self {
            config,
            layout: ParamLayout {
                encoder,
                aux_encoder,
                det_head,
                mc_heads,
                total,
            },
            geoms,
            taps,
        }))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn input_len(&self) -> usize {
        self.config.encoder.in_channels * self.config.grid.iter().product::<usize>()
    }
}

/// The trainable state θ together with the network it parameterizes.
#[derive(Debug, Clone)]
pub struct ModelParameters {
    network: Arc<Network>,
    pub values: Vec<f64>,
}

impl PartialEq for ModelParameters {
    fn eq(&self, other: &Self) -> bool {
        self.network.config == other.network.config && self.values == other.values
    }
}

fn fill_normal<R: Rng>(rng: &mut R, out: &mut [f64], std: f64) {
    let n = Normal::new(0.0, std).expect("positive std");
    out.iter_mut().for_each(|v| *v = n.sample(rng));
}

impl ModelParameters {
    /// Seeded initialization: He-normal conv and hidden weights, scaled-normal
    /// output weights, zero biases. Each segment draws from its own stream, so
    /// e.g. the encoder of a detection model and of a multi-task model built
    /// with the same seed are identical.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let network = Network::new(config)?;
        let mut values = vec![0.0; network.layout.total];
        let layout = network.layout.clone();
        init_encoder(
            &network,
            &mut values[layout.encoder.clone()],
            seed,
            "init/encoder",
        );
        if let Some(r) = layout.aux_encoder.clone() {
            init_encoder(&network, &mut values[r], seed, "init/aux_encoder");
        }
        {
            let cfg = &network.config;
            let (d_in, h) = (cfg.head_input(), cfg.head_hidden);
            let det = &mut values[layout.det_head.clone()];
            let mut rng = rng_for(seed, &format!("init/det_head/{d_in}"));
            fill_normal(&mut rng, &mut det[..h * d_in], (2.0 / d_in as f64).sqrt());
            let w2 = h * d_in + h;
            fill_normal(&mut rng, &mut det[w2..w2 + 2 * h], (1.0 / h as f64).sqrt());
        }
        {
            let d = network.config.feature_dim();
            let per = N_SEVERITY * d + N_SEVERITY;
            let mc = &mut values[layout.mc_heads.clone()];
            let mut rng = rng_for(seed, "init/mc_heads");
            for head in mc.chunks_mut(per) {
                fill_normal(
                    &mut rng,
                    &mut head[..N_SEVERITY * d],
                    (1.0 / d as f64).sqrt(),
                );
            }
        }
        Ok(Self { network, values })
    }

    pub fn from_values(config: ModelConfig, values: Vec<f64>) -> Result<Self> {
        let network = Network::new(config)?;
        if values.len() != network.layout.total {
            return Err(Error::Model(format!(
                "{} parameter values for a model of {}",
                values.len(),
                network.layout.total
            )));
        }
        Ok(Self { network, values })
    }

    pub fn network(&self) -> &Arc<Network> {
        &self.network
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.network.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn encoder(&self) -> &[f64] {
        &self.values[self.layout().encoder.clone()]
    }

    pub fn aux_encoder(&self) -> Option<&[f64]> {
        self.layout().aux_encoder.clone().map(|r| &self.values[r])
    }

    /// Copies the primary encoder of `source` into this model's primary encoder.
    pub fn load_encoder_from(&mut self, source: &ModelParameters) -> Result<()> {
        self.copy_encoder(source, false)
    }

    /// Copies the primary encoder of `source` into this model's auxiliary encoder.
    pub fn load_aux_encoder_from(&mut self, source: &ModelParameters) -> Result<()> {
        self.copy_encoder(source, true)
    }

    fn copy_encoder(&mut self, source: &ModelParameters, into_aux: bool) -> Result<()> {
        if source.config().encoder != self.config().encoder
            || source.config().grid != self.config().grid
        {
            return Err(Error::Model(
                "encoder configurations differ; weights are not transferable".into(),
            ));
        }
        let dst = if into_aux {
            self.layout()
                .aux_encoder
                .clone()
                .ok_or_else(|| Error::Model("model has no auxiliary encoder".into()))?
        } else {
            self.layout().encoder.clone()
        };
        let src = source.encoder().to_vec();
        self.values[dst].copy_from_slice(&src);
        Ok(())
    }

    /// Pooled features of the primary encoder.
    pub fn encode(&self, volume: &VolumeGrid) -> Result<Vec<f64>> {
        self.check_volume(volume)?;
        let trace = encoder_forward(&self.network, self.encoder(), volume.data());
        Ok(trace.features)
    }

    pub fn predict(&self, volume: &VolumeGrid) -> Result<Prediction> {
        self.check_volume(volume)?;
        self.predict_input(volume.data())
    }

    /// Prediction for a prepared input (`in_channels` concatenated grids).
    pub fn predict_input(&self, input: &[f32]) -> Result<Prediction> {
        self.check_input(input)?;
        Ok(forward(self, input).prediction)
    }

    fn check_volume(&self, volume: &VolumeGrid) -> Result<()> {
        let cfg = self.config();
        if volume.shape() != cfg.grid || cfg.encoder.in_channels != 1 {
            return Err(Error::Shape {
                expected: [cfg.encoder.in_channels]
                    .into_iter()
                    .chain(cfg.grid)
                    .collect(),
                actual: [1].into_iter().chain(volume.shape()).collect(),
            });
        }
        Ok(())
    }

    fn check_input(&self, input: &[f32]) -> Result<()> {
        if input.len() != self.network.input_len() {
            return Err(Error::Shape {
                expected: vec![self.network.input_len()],
                actual: vec![input.len()],
            });
        }
        Ok(())
    }
}

fn init_encoder(net: &Network, out: &mut [f64], seed: u64, tag: &str) {
    let mut rng = rng_for(seed, tag);
    let mut off = 0;
    for g in &net.geoms {
        let fan_in = g.col_rows() as f64;
        fill_normal(
            &mut rng,
            &mut out[off..off + g.weight_len()],
            (2.0 / fan_in).sqrt(),
        );
        off += g.weight_len();
        if net.config.encoder.bias {
            off += g.out_channels;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Probabilities of (NC, AD).
    pub p_ad: [f64; 2],
    /// One (No, Mild, Severe) distribution per severity head.
    pub mc: Vec<[f64; 3]>,
    /// Pooled primary-encoder features.
    pub h: Vec<f64>,
}

impl Prediction {
    /// Probability of the AD class.
    pub fn prob_ad(&self) -> f64 {
        self.p_ad[1]
    }
}

pub fn softmax<const N: usize>(logits: [f64; N]) -> [f64; N] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.map(|z| (z - max).exp());
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

fn clamped_nll(p: f64) -> f64 {
    -p.max(PROB_EPS).ln()
}

/// `d(-ln max(p_y, eps)) / d logits`; zero once the clamp is active.
fn ce_logit_grad<const N: usize>(p: &[f64; N], y: usize, scale: f64) -> [f64; N] {
    if p[y] <= PROB_EPS {
        return [0.0; N];
    }
    let mut g = p.map(|v| v * scale);
    g[y] -= scale;
    g
}

/// Detection cross-entropy `-ln p(y)` for one case.
pub fn loss_ad(pred: &Prediction, y: Diagnosis) -> Result<f64> {
    let class = y
        .detection_class()
        .ok_or_else(|| Error::Label("MCI has no detection class".into()))?;
    Ok(clamped_nll(pred.p_ad[class]))
}

/// Mean detection loss over a batch.
pub fn batch_loss_ad(preds: &[Prediction], ys: &[Diagnosis]) -> Result<f64> {
    if preds.is_empty() || preds.len() != ys.len() {
        return Err(Error::Label("batch sizes differ or are empty".into()));
    }
    let total: f64 = preds
        .iter()
        .zip(ys)
        .map(|(p, y)| loss_ad(p, *y))
        .sum::<Result<f64>>()?;
    Ok(total / preds.len() as f64)
}

/// Sum over severity heads of the 3-class cross-entropy for one case.
pub fn loss_mc(pred: &Prediction, labels: &[usize]) -> Result<f64> {
    if labels.len() != pred.mc.len() {
        return Err(Error::Label(format!(
            "{} labels for {} severity heads",
            labels.len(),
            pred.mc.len()
        )));
    }
    labels
        .iter()
        .zip(&pred.mc)
        .map(|(&y, p)| {
            if y >= N_SEVERITY {
                Err(Error::Label(format!("severity class {y} out of range")))
            } else {
                Ok(clamped_nll(p[y]))
            }
        })
        .sum()
}

/// [`loss_mc`] with labels looked up in atlas order.
pub fn loss_mc_labels(pred: &Prediction, labels: &MCLabelSet, atlas: &AtlasConfig) -> Result<f64> {
    loss_mc(pred, &labels.class_indices(atlas)?)
}

/// Training objective for one gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// Mean detection cross-entropy over the batch.
    Ad,
    /// Severity cross-entropy summed over heads and cases.
    Mc,
    /// `Ad + lambda * Mc`.
    Joint { lambda: f64 },
    /// `Ad` through both encoders of an evidence-as-input model.
    EaiJoint,
}

impl Objective {
    fn weights(self) -> (f64, f64) {
        match self {
            Objective::Ad | Objective::EaiJoint => (1.0, 0.0),
            Objective::Mc => (0.0, 1.0),
            Objective::Joint { lambda } => (1.0, lambda),
        }
    }

    fn uses_ad(self) -> bool {
        !matches!(self, Objective::Mc)
    }

    fn uses_mc(self) -> bool {
        matches!(self, Objective::Mc | Objective::Joint { .. })
    }

    fn check(self, cfg: &ModelConfig) -> Result<()> {
        if self.uses_mc() && cfg.mc_heads == 0 {
            return Err(Error::Model(format!("{self:?} needs severity heads")));
        }
        if matches!(self, Objective::EaiJoint) && cfg.aux.is_none() {
            return Err(Error::Model("EaiJoint needs an auxiliary encoder".into()));
        }
        if let Objective::Joint { lambda } = self {
            if lambda.is_nan() || lambda < 0.0 {
                return Err(Error::Model(format!("lambda {lambda} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// One training example: prepared input plus whichever targets exist.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub input: &'a [f32],
    pub class: Option<usize>,
    pub mc: Option<&'a [usize]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    /// Objective value actually minimized.
    pub total: f64,
    /// Batch-mean detection loss (0 when unused).
    pub ad: f64,
    /// Batch-summed severity loss (0 when unused).
    pub mc: f64,
}

struct EncoderTrace {
    cols: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
    features: Vec<f64>,
}

fn encoder_forward(net: &Network, w: &[f64], input: &[f32]) -> EncoderTrace {
    let bias = net.config.encoder.bias;
    let mut cols = Vec::with_capacity(net.geoms.len());
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(net.geoms.len());
    let mut off = 0;
    for (i, (g, taps)) in net.geoms.iter().zip(&net.taps).enumerate() {
        let mut col = Vec::new();
        match acts.last() {
            None => g.im2col(taps, input, &mut col),
            Some(prev) => g.im2col(taps, prev.as_slice(), &mut col),
        }
        let p = g.out_len();
        let weights = &w[off..off + g.weight_len()];
        off += g.weight_len();
        let mut out = vec![0.0; g.out_channels * p];
        gemm(
            g.out_channels,
            g.col_rows(),
            p,
            weights,
            false,
            &col,
            false,
            0.0,
            &mut out,
        );
        if bias {
            let b = &w[off..off + g.out_channels];
            off += g.out_channels;
            for (c, row) in out.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += b[c]);
            }
        }
        out.iter_mut().for_each(|v| *v = v.max(0.0));
        cols.push(col);
        acts.push(out);
        debug_assert_eq!(i + 1, acts.len());
    }
    let last = net.geoms.last().expect("encoder has stages");
    let p = last.out_len() as f64;
    let features = acts
        .last()
        .expect("encoder has stages")
        .chunks(last.out_len())
        .map(|row| row.iter().sum::<f64>() / p)
        .collect();
    EncoderTrace {
        cols,
        acts,
        features,
    }
}

fn encoder_backward(net: &Network, w: &[f64], trace: &EncoderTrace, dh: &[f64], grad: &mut [f64]) {
    let bias = net.config.encoder.bias;
    // segment offsets of each stage's weights and bias
    let mut offsets = Vec::with_capacity(net.geoms.len());
    let mut off = 0;
    for g in &net.geoms {
        offsets.push(off);
        off += g.weight_len() + if bias { g.out_channels } else { 0 };
    }
    let last = net.geoms.last().expect("encoder has stages");
    let p_last = last.out_len();
    let mut dact: Vec<f64> = dh
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / p_last as f64, p_last))
        .collect();
    for i in (0..net.geoms.len()).rev() {
        let g = &net.geoms[i];
        let p = g.out_len();
        for (d, a) in dact.iter_mut().zip(&trace.acts[i]) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }
        let woff = offsets[i];
        let gw = &mut grad[woff..woff + g.weight_len()];
        gemm(
            g.out_channels,
            p,
            g.col_rows(),
            &dact,
            false,
            &trace.cols[i],
            true,
            1.0,
            gw,
        );
        if bias {
            let gb = &mut grad[woff + g.weight_len()..woff + g.weight_len() + g.out_channels];
            for (c, row) in dact.chunks(p).enumerate() {
                gb[c] += row.iter().sum::<f64>();
            }
        }
        if i > 0 {
            let weights = &w[woff..woff + g.weight_len()];
            let mut dcol = vec![0.0; g.col_rows() * p];
            gemm(
                g.col_rows(),
                g.out_channels,
                p,
                weights,
                true,
                &dact,
                false,
                0.0,
                &mut dcol,
            );
            let mut dprev = vec![0.0; g.in_channels * g.in_len()];
            g.col2im(&net.taps[i], &dcol, &mut dprev);
            dact = dprev;
        }
    }
}

struct Trace {
    prediction: Prediction,
    primary: EncoderTrace,
    aux: Option<EncoderTrace>,
    head_in: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
}

fn forward(model: &ModelParameters, input: &[f32]) -> Trace {
    let net = &model.network;
    let cfg = &net.config;
    let d = cfg.feature_dim();
    let primary = encoder_forward(net, model.encoder(), input);
    let aux = match cfg.aux {
        Some(AuxMode::Trainable) | Some(AuxMode::Frozen) => Some(encoder_forward(
            net,
            model.aux_encoder().expect("aux layout"),
            input,
        )),
        _ => None,
    };
    let mut head_in = primary.features.clone();
    match (&aux, cfg.aux) {
        (Some(t), _) => head_in.extend_from_slice(&t.features),
        (None, Some(AuxMode::Zeroed)) => head_in.extend(std::iter::repeat_n(0.0, d)),
        _ => {}
    }

    let (d_in, h) = (cfg.head_input(), cfg.head_hidden);
    let det = &model.values[net.layout.det_head.clone()];
    let (w1, rest) = det.split_at(h * d_in);
    let (b1, rest) = rest.split_at(h);
    let (w2, b2) = rest.split_at(2 * h);
    let hidden_pre: Vec<f64> = (0..h)
        .map(|j| {
            b1[j]
                + w1[j * d_in..(j + 1) * d_in]
                    .iter()
                    .zip(&head_in)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect();
    let hidden: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
    let logits: [f64; 2] = std::array::from_fn(|c| {
        b2[c]
            + w2[c * h..(c + 1) * h]
                .iter()
                .zip(&hidden)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    });

    let mc_params = &model.values[net.layout.mc_heads.clone()];
    let per = N_SEVERITY * d + N_SEVERITY;
    let mc = mc_params
        .chunks(per)
        .map(|head| {
            let (w, b) = head.split_at(N_SEVERITY * d);
            softmax(std::array::from_fn(|c| {
                b[c] + w[c * d..(c + 1) * d]
                    .iter()
                    .zip(&primary.features)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            }))
        })
        .collect();

    Trace {
        prediction: Prediction {
            p_ad: softmax(logits),
            mc,
            h: primary.features.clone(),
        },
        primary,
        aux,
        head_in,
        hidden_pre,
        hidden,
    }
}

/// Accumulates into `grad` the gradient given logit gradients of the
/// detection head and of each severity head.
fn backward(
    model: &ModelParameters,
    trace: &Trace,
    d_ad: Option<[f64; 2]>,
    d_mc: Option<&[[f64; 3]]>,
    grad: &mut [f64],
) {
    let net = &model.network;
    let cfg = &net.config;
    let layout = &net.layout;
    let d = cfg.feature_dim();
    let mut dh = vec![0.0; d];
    let mut dh_aux = vec![0.0; d];

    if let Some(dl) = d_ad {
        let (d_in, h) = (cfg.head_input(), cfg.head_hidden);
        let det = &model.values[layout.det_head.clone()];
        let w1 = &det[..h * d_in];
        let w2 = &det[h * d_in + h..h * d_in + h + 2 * h];
        let g = &mut grad[layout.det_head.clone()];
        let mut dz1 = vec![0.0; h];
        for c in 0..2 {
            for j in 0..h {
                g[h * d_in + h + c * h + j] += dl[c] * trace.hidden[j];
                dz1[j] += w2[c * h + j] * dl[c];
            }
            g[h * d_in + h + 2 * h + c] += dl[c];
        }
        for (d, &pre) in dz1.iter_mut().zip(&trace.hidden_pre) {
            if pre <= 0.0 {
                *d = 0.0;
            }
        }
        let mut dx = vec![0.0; d_in];
        for j in 0..h {
            let row = &w1[j * d_in..(j + 1) * d_in];
            let grow = &mut g[j * d_in..(j + 1) * d_in];
            for i in 0..d_in {
                grow[i] += dz1[j] * trace.head_in[i];
                dx[i] += row[i] * dz1[j];
            }
            g[h * d_in + j] += dz1[j];
        }
        dh.copy_from_slice(&dx[..d]);
        if d_in > d {
            dh_aux.copy_from_slice(&dx[d..]);
        }
    }

    if let Some(dls) = d_mc {
        let per = N_SEVERITY * d + N_SEVERITY;
        let mc = &model.values[layout.mc_heads.clone()];
        let g = &mut grad[layout.mc_heads.clone()];
        for (k, dl) in dls.iter().enumerate() {
            let w = &mc[k * per..k * per + N_SEVERITY * d];
            let gk = &mut g[k * per..(k + 1) * per];
            for c in 0..N_SEVERITY {
                for i in 0..d {
                    gk[c * d + i] += dl[c] * trace.primary.features[i];
                    dh[i] += w[c * d + i] * dl[c];
                }
                gk[N_SEVERITY * d + c] += dl[c];
            }
        }
    }

    let enc = layout.encoder.clone();
    encoder_backward(
        net,
        &model.values[enc.clone()],
        &trace.primary,
        &dh,
        &mut grad[enc],
    );
    if let (Some(aux_trace), Some(r)) = (&trace.aux, layout.aux_encoder.clone()) {
        if d_ad.is_some() {
            encoder_backward(
                net,
                &model.values[r.clone()],
                aux_trace,
                &dh_aux,
                &mut grad[r],
            );
        }
    }
}

struct SampleResult {
    ad: f64,
    mc: f64,
    grad: Vec<f64>,
}

fn check_batch(model: &ModelParameters, batch: &[Sample<'_>], objective: Objective) -> Result<()> {
    objective.check(model.config())?;
    if batch.is_empty() {
        return Err(Error::Model("empty batch".into()));
    }
    for s in batch {
        model.check_input(s.input)?;
        if objective.uses_ad() {
            match s.class {
                Some(c) if c < 2 => {}
                _ => return Err(Error::Label("sample lacks a detection class".into())),
            }
        }
        if objective.uses_mc() {
            match s.mc {
                Some(m) if m.len() == model.config().mc_heads => {}
                _ => return Err(Error::Label("sample lacks severity labels".into())),
            }
        }
    }
    Ok(())
}

fn sample_pass(
    model: &ModelParameters,
    sample: &Sample<'_>,
    objective: Objective,
    batch_len: usize,
    with_grad: bool,
) -> SampleResult {
    let trace = forward(model, sample.input);
    let pred = &trace.prediction;
    let (w_ad, w_mc) = objective.weights();
    let mut ad = 0.0;
    let mut mc = 0.0;
    let mut d_ad = None;
    let mut d_mc = None;
    if objective.uses_ad() {
        let y = sample.class.expect("checked");
        ad = clamped_nll(pred.p_ad[y]);
        d_ad = Some(ce_logit_grad(&pred.p_ad, y, w_ad / batch_len as f64));
    }
    if objective.uses_mc() {
        let labels = sample.mc.expect("checked");
        let mut dls = Vec::with_capacity(labels.len());
        for (&y, p) in labels.iter().zip(&pred.mc) {
            mc += clamped_nll(p[y]);
            dls.push(ce_logit_grad(p, y, w_mc));
        }
        d_mc = Some(dls);
    }
    let mut grad = Vec::new();
    if with_grad {
        grad = vec![0.0; model.len()];
        backward(model, &trace, d_ad, d_mc.as_deref(), &mut grad);
    }
    SampleResult { ad, mc, grad }
}

fn combine(objective: Objective, ad_sum: f64, mc_sum: f64, n: usize) -> LossValue {
    let (_, w_mc) = objective.weights();
    let ad = if objective.uses_ad() {
        ad_sum / n as f64
    } else {
        0.0
    };
    let mc = if objective.uses_mc() { mc_sum } else { 0.0 };
    let total = match objective {
        Objective::Ad | Objective::EaiJoint => ad,
        Objective::Mc => mc,
        Objective::Joint { .. } => ad + w_mc * mc,
    };
    LossValue { total, ad, mc }
}

/// Objective value of a batch.
pub fn batch_loss(
    model: &ModelParameters,
    batch: &[Sample<'_>],
    objective: Objective,
) -> Result<LossValue> {
    check_batch(model, batch, objective)?;
    let parts: Vec<SampleResult> = batch
        .par_iter()
        .map(|s| sample_pass(model, s, objective, batch.len(), false))
        .collect();
    let ad: f64 = parts.iter().map(|r| r.ad).sum();
    let mc: f64 = parts.iter().map(|r| r.mc).sum();
    Ok(combine(objective, ad, mc, batch.len()))
}

/// Objective value and its gradient with respect to every parameter.
pub fn loss_and_grad(
    model: &ModelParameters,
    batch: &[Sample<'_>],
    objective: Objective,
) -> Result<(LossValue, Vec<f64>)> {
    check_batch(model, batch, objective)?;
    let parts: Vec<SampleResult> = batch
        .par_iter()
        .map(|s| sample_pass(model, s, objective, batch.len(), true))
        .collect();
    let mut grad = vec![0.0; model.len()];
    let mut ad = 0.0;
    let mut mc = 0.0;
    for r in &parts {
        ad += r.ad;
        mc += r.mc;
        grad.iter_mut().zip(&r.grad).for_each(|(g, v)| *g += v);
    }
    Ok((combine(objective, ad, mc, batch.len()), grad))
}

/// Signs of every ReLU pre-activation for one input, for detecting kinks in
/// finite-difference checks.
pub fn activation_pattern(model: &ModelParameters, input: &[f32]) -> Vec<bool> {
    let trace = forward(model, input);
    let mut out = Vec::new();
    for t in std::iter::once(&trace.primary).chain(trace.aux.as_ref()) {
        for a in &t.acts {
            out.extend(a.iter().map(|&v| v > 0.0));
        }
    }
    out.extend(trace.hidden_pre.iter().map(|&v| v > 0.0));
    out
}

/// Predictions for several prepared inputs.
pub fn predict_batch(model: &ModelParameters, inputs: &[&[f32]]) -> Result<Vec<Prediction>> {
    for i in inputs {
        model.check_input(i)?;
    }
    Ok(inputs
        .par_iter()
        .map(|i| forward(model, i).prediction)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig::detection([8, 8, 8], EncoderConfig::desk(&[4, 8])).with_mc_heads(3)
    }

    fn input(seed: u64, n: usize) -> Vec<f32> {
        let mut rng = rng_for(seed, "test/input");
        (0..n).map(|_| rng.gen::<f32>()).collect()
    }

    #[test]
    fn softmax_symmetry_and_sum() {
        assert_eq!(softmax([0.0, 0.0]), [0.5, 0.5]);
        let p = softmax([1000.0, -3.0, 2.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ad_loss_values() {
        let mut pred = Prediction {
            p_ad: [0.5, 0.5],
            mc: vec![],
            h: vec![],
        };
        assert!((loss_ad(&pred, Diagnosis::AD).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        pred.p_ad = [0.0, 1.0];
        assert!(loss_ad(&pred, Diagnosis::AD).unwrap().abs() < 1e-12);
        assert!((loss_ad(&pred, Diagnosis::NC).unwrap() - (-PROB_EPS.ln())).abs() < 1e-9);
        assert!(loss_ad(&pred, Diagnosis::MCI).is_err());
    }

    #[test]
    fn ad_batch_mean_by_hand() {
        let ps = [0.9, 0.2, 0.6, 0.35];
        let ys = [Diagnosis::AD, Diagnosis::NC, Diagnosis::NC, Diagnosis::AD];
        let preds: Vec<Prediction> = ps
            .iter()
            .map(|&p| Prediction {
                p_ad: [1.0 - p, p],
                mc: vec![],
                h: vec![],
            })
            .collect();
        let hand = (-(0.9f64).ln() - (0.8f64).ln() - (0.4f64).ln() - (0.35f64).ln()) / 4.0;
        assert!((batch_loss_ad(&preds, &ys).unwrap() - hand).abs() < 1e-9);
    }

    #[test]
    fn mc_loss_values() {
        let uniform = Prediction {
            p_ad: [0.5, 0.5],
            mc: vec![[1.0 / 3.0; 3]; 14],
            h: vec![],
        };
        let l = loss_mc(&uniform, &[0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1]).unwrap();
        assert!((l - 14.0 * 3f64.ln()).abs() < 1e-9);
        assert!((l - 15.38).abs() < 0.01);
        let onehot = Prediction {
            p_ad: [0.5, 0.5],
            mc: vec![[0.0, 1.0, 0.0]; 2],
            h: vec![],
        };
        assert!(loss_mc(&onehot, &[1, 1]).unwrap().abs() < 1e-12);
        assert!(loss_mc(&onehot, &[1]).is_err());
    }

    #[test]
    fn layout_partitions_parameters() {
        let cfg = small_config().with_aux(AuxMode::Trainable);
        let net = Network::new(cfg.clone()).unwrap();
        let l = net.layout();
        assert_eq!(l.encoder.start, 0);
        assert_eq!(l.aux_encoder.clone().unwrap().start, l.encoder.end);
        assert_eq!(l.det_head.start, l.aux_encoder.clone().unwrap().end);
        assert_eq!(l.mc_heads.end, l.total);
        assert_eq!(cfg.head_input(), 16);
    }

    #[test]
    fn prediction_shapes_and_determinism() {
        let cfg = ModelConfig::detection([16, 16, 16], EncoderConfig::default()).with_mc_heads(14);
        let m = ModelParameters::init(cfg, 3).unwrap();
        let x = input(1, 4096);
        let a = m.predict_input(&x).unwrap();
        let b = m.predict_input(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mc.len(), 14);
        assert_eq!(a.h.len(), 32);
        assert!((a.p_ad.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for d in &a.mc {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(matches!(
            m.predict_input(&x[..100]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_volume_bias_free_gives_zero_features() {
        let enc = EncoderConfig {
            bias: false,
            ..EncoderConfig::default()
        };
        let m = ModelParameters::init(ModelConfig::detection([16, 16, 16], enc), 0).unwrap();
        let h = m.encode(&VolumeGrid::zeros([16, 16, 16]).unwrap()).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        // zero biases are the default initialization as well
        let m = ModelParameters::init(
            ModelConfig::detection([16, 16, 16], EncoderConfig::default()),
            0,
        )
        .unwrap();
        let h = m.encode(&VolumeGrid::zeros([16, 16, 16]).unwrap()).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        assert!(m.encode(&VolumeGrid::zeros([8, 8, 8]).unwrap()).is_err());
    }

    #[test]
    fn segments_have_independent_init_streams() {
        let grid = [8, 8, 8];
        let enc = EncoderConfig::desk(&[4, 8]);
        let det = ModelParameters::init(ModelConfig::detection(grid, enc.clone()), 11).unwrap();
        let mt =
            ModelParameters::init(ModelConfig::detection(grid, enc).with_mc_heads(5), 11).unwrap();
        assert_eq!(det.encoder(), mt.encoder());
        assert_eq!(
            &det.values[det.layout().det_head.clone()],
            &mt.values[mt.layout().det_head.clone()]
        );
    }

    #[test]
    fn lambda_linearity_of_objective() {
        let m = ModelParameters::init(small_config(), 5).unwrap();
        let xs = [input(1, 512), input(2, 512)];
        let labels = [vec![0, 1, 2], vec![2, 2, 0]];
        let batch: Vec<Sample> = xs
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(i, (x, l))| Sample {
                input: x,
                class: Some(i % 2),
                mc: Some(l),
            })
            .collect();
        let ad = batch_loss(&m, &batch, Objective::Ad).unwrap().total;
        let mc = batch_loss(&m, &batch, Objective::Mc).unwrap().total;
        for lambda in [0.0, 0.5, 1.0, 2.0] {
            let j = batch_loss(&m, &batch, Objective::Joint { lambda }).unwrap();
            assert_eq!(j.total, ad + lambda * mc);
            assert_eq!((j.ad, j.mc), (ad, mc));
        }
        let mut rev = batch.clone();
        rev.reverse();
        let a = batch_loss(&m, &batch, Objective::Joint { lambda: 1.0 })
            .unwrap()
            .total;
        let b = batch_loss(&m, &rev, Objective::Joint { lambda: 1.0 })
            .unwrap()
            .total;
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn objective_requirements() {
        let m = ModelParameters::init(
            ModelConfig::detection([8, 8, 8], EncoderConfig::desk(&[4, 8])),
            0,
        )
        .unwrap();
        let x = input(0, 512);
        let batch = [Sample {
            input: &x,
            class: Some(0),
            mc: None,
        }];
        assert!(batch_loss(&m, &batch, Objective::Mc).is_err());
        assert!(batch_loss(&m, &batch, Objective::EaiJoint).is_err());
        assert!(batch_loss(&m, &[], Objective::Ad).is_err());
        let unlabeled = [Sample {
            input: &x,
            class: None,
            mc: None,
        }];
        assert!(matches!(
            batch_loss(&m, &unlabeled, Objective::Ad),
            Err(Error::Label(_))
        ));
    }
}
