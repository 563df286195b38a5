//! Voxel-wise uncertainty from repeated stochastic inference.
//!
//! Three sampling regimes produce a stack of B label maps aligned to the
//! case grid: test-time dropout (TTD, epistemic), test-time augmentation
//! (TTA, aleatoric; predictions are inverse-transformed back to the
//! original grid) and their combination. From a stack:
//!
//! * the submitted prediction is the per-voxel majority vote;
//! * per-region variance maps binarize each sample by region membership
//!   and report (1/B) sum (y_b - y_mean)^2, normalized to 0-100 by the
//!   Bernoulli maximum 0.25;
//! * the global entropy map reports -sum p_m ln p_m over the frequencies
//!   of the observed labels, normalized by ln 4.

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_tta_transform, AugmentConfig};
use crate::error::{Error, Result};
use crate::inference::{predict_volume_dropout, sliding_window_softmax, TileConfig};
use crate::nets::Network;
use crate::volume::{Case, LabelMap, Region, UncertaintyMap};

/// Where a sample stack came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackSource {
    Ttd,
    Tta,
    Hybrid,
}

/// B aligned label-map predictions from repeated stochastic inference.
#[derive(Debug, Clone)]
pub struct SampleStack {
    samples: Vec<LabelMap>,
    source: StackSource,
}

impl SampleStack {
    pub fn new(samples: Vec<LabelMap>, source: StackSource) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Config(format!(
                "a sample stack needs B >= 2 predictions, got {}",
                samples.len()
            )));
        }
        let shape = samples[0].shape();
        if samples.iter().any(|s| s.shape() != shape) {
            return Err(Error::Shape("stack sample shapes differ".into()));
        }
        Ok(SampleStack { samples, source })
    }

    pub fn samples(&self) -> &[LabelMap] {
        &self.samples
    }

    pub fn source(&self) -> StackSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.samples[0].shape()
    }
}

/// Anything that can predict a label map for a (possibly transformed)
/// modality volume, deterministically or with dropout active.
pub trait StochasticPredictor {
    fn predict(&self, modalities: &Array4<f32>) -> Result<LabelMap>;

    fn predict_with_dropout(
        &self,
        modalities: &Array4<f32>,
        dropout_p: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<LabelMap>;
}

/// The production predictor: sliding-window inference over a network.
pub struct NetworkPredictor<'a> {
    pub net: &'a Network,
    pub tile: TileConfig,
}

impl StochasticPredictor for NetworkPredictor<'_> {
    fn predict(&self, modalities: &Array4<f32>) -> Result<LabelMap> {
        let softmax =
            sliding_window_softmax(modalities, &self.tile, |x| self.net.predict_softmax(x))?;
        Ok(crate::inference::labels_from_softmax(&softmax))
    }

    fn predict_with_dropout(
        &self,
        modalities: &Array4<f32>,
        dropout_p: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<LabelMap> {
        let softmax = predict_volume_dropout(self.net, modalities, &self.tile, dropout_p, rng)?;
        Ok(crate::inference::labels_from_softmax(&softmax))
    }
}

fn check_b(b: usize) -> Result<()> {
    if b < 2 {
        return Err(Error::Config(format!("B must be >= 2, got {b}")));
    }
    Ok(())
}

/// B dropout-active predictions (epistemic uncertainty). Deterministic
/// for a fixed master seed.
pub fn collect_ttd(
    predictor: &impl StochasticPredictor,
    case: &Case,
    b: usize,
    dropout_p: f32,
    master_seed: u64,
) -> Result<SampleStack> {
    check_b(b)?;
    if dropout_p <= 0.0 {
        return Err(Error::Config(
            "TTD needs dropout_p > 0, the stack would be degenerate".into(),
        ));
    }
    let mut master = ChaCha8Rng::seed_from_u64(master_seed);
    let mut samples = Vec::with_capacity(b);
    for _ in 0..b {
        let mut rng = ChaCha8Rng::seed_from_u64(master.random::<u64>());
        samples.push(predictor.predict_with_dropout(&case.modalities, dropout_p, &mut rng)?);
    }
    SampleStack::new(samples, StackSource::Ttd)
}

/// B augmented predictions realigned to the case grid (aleatoric
/// uncertainty).
pub fn collect_tta(
    predictor: &impl StochasticPredictor,
    case: &Case,
    b: usize,
    aug: &AugmentConfig,
    master_seed: u64,
) -> Result<SampleStack> {
    check_b(b)?;
    let mut master = ChaCha8Rng::seed_from_u64(master_seed);
    let mut samples = Vec::with_capacity(b);
    for _ in 0..b {
        let tta = sample_tta_transform(aug, &mut master);
        let transformed = tta.forward.apply_to_modalities(&case.modalities)?;
        let predicted = predictor.predict(&transformed)?;
        let aligned = tta.inverse.apply_to_labels(predicted.voxels())?;
        samples.push(LabelMap::new(aligned)?);
    }
    SampleStack::new(samples, StackSource::Tta)
}

/// B samples with both a TTA transform and dropout-active inference.
pub fn collect_hybrid(
    predictor: &impl StochasticPredictor,
    case: &Case,
    b: usize,
    aug: &AugmentConfig,
    dropout_p: f32,
    master_seed: u64,
) -> Result<SampleStack> {
    check_b(b)?;
    if dropout_p <= 0.0 {
        return Err(Error::Config(
            "hybrid sampling needs dropout_p > 0, use TTA otherwise".into(),
        ));
    }
    let mut master = ChaCha8Rng::seed_from_u64(master_seed);
    let mut samples = Vec::with_capacity(b);
    for _ in 0..b {
        let tta = sample_tta_transform(aug, &mut master);
        let mut rng = ChaCha8Rng::seed_from_u64(master.random::<u64>());
        let transformed = tta.forward.apply_to_modalities(&case.modalities)?;
        let predicted = predictor.predict_with_dropout(&transformed, dropout_p, &mut rng)?;
        let aligned = tta.inverse.apply_to_labels(predicted.voxels())?;
        samples.push(LabelMap::new(aligned)?);
    }
    SampleStack::new(samples, StackSource::Hybrid)
}

/// Per-voxel majority vote; ties go to the lower label value.
pub fn mean_prediction(stack: &SampleStack) -> LabelMap {
    let (d, h, w) = stack.shape();
    let mut out = Array3::<u8>::zeros((d, h, w));
    for di in 0..d {
        for hi in 0..h {
            for wi in 0..w {
                let mut counts = [0usize; 4]; // labels 0, 1, 2, 4
                for s in stack.samples() {
                    counts[crate::nets::label_to_channel(s.voxels()[[di, hi, wi]])] += 1;
                }
                let mut best = 0usize;
                for c in 1..4 {
                    if counts[c] > counts[best] {
                        best = c;
                    }
                }
                out[[di, hi, wi]] = crate::nets::channel_to_label(best);
            }
        }
    }
    LabelMap::new(out).expect("votes stay in the label set")
}

/// Region-membership variance map, normalized so a 50/50 split maps
/// to 100.
pub fn variance_map(stack: &SampleStack, region: Region) -> Result<UncertaintyMap> {
    if region == Region::Global {
        return Err(Error::Config(
            "variance maps are per evaluation region (wt, tc, et)".into(),
        ));
    }
    let (d, h, w) = stack.shape();
    let b = stack.len() as f64;
    let mut out = Array3::<u8>::zeros((d, h, w));
    for di in 0..d {
        for hi in 0..h {
            for wi in 0..w {
                let mut inside = 0usize;
                for s in stack.samples() {
                    inside += region.contains_label(s.voxels()[[di, hi, wi]]) as usize;
                }
                let mean = inside as f64 / b;
                // (1/B) sum (y_b - mean)^2 over binary y_b.
                let var = (inside as f64 * (1.0 - mean) * (1.0 - mean)
                    + (b - inside as f64) * mean * mean)
                    / b;
                let scaled = (var / 0.25 * 100.0).round();
                out[[di, hi, wi]] = scaled.clamp(0.0, 100.0) as u8;
            }
        }
    }
    UncertaintyMap::new(out, region)
}

/// Global entropy map over the label frequencies of each voxel,
/// normalized by ln 4.
pub fn entropy_map(stack: &SampleStack) -> Result<UncertaintyMap> {
    let (d, h, w) = stack.shape();
    let b = stack.len() as f64;
    let norm = 4.0f64.ln();
    let mut out = Array3::<u8>::zeros((d, h, w));
    for di in 0..d {
        for hi in 0..h {
            for wi in 0..w {
                let mut counts = [0usize; 4];
                for s in stack.samples() {
                    counts[crate::nets::label_to_channel(s.voxels()[[di, hi, wi]])] += 1;
                }
                let mut entropy = 0.0f64;
                for &c in &counts {
                    if c > 0 {
                        let p = c as f64 / b;
                        entropy -= p * p.ln();
                    }
                }
                let scaled = (entropy / norm * 100.0).round();
                out[[di, hi, wi]] = scaled.clamp(0.0, 100.0) as u8;
            }
        }
    }
    UncertaintyMap::new(out, Region::Global)
}
