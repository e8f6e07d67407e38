//! Feature-distribution summaries and the layer transfer score.
//!
//! Each pooled value stream (inputs, one-hot labels, per-layer activations)
//! is summarized as a univariate Gaussian. The Wasserstein-2 distance
//! between two such summaries has the closed form
//! `sqrt((mu_a - mu_b)^2 + (sigma_a - sigma_b)^2)`, and a layer's transfer
//! score contrasts how the layer shifts the activation distribution against
//! the dataset's input-to-label shift.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datakit::Dataset;
use crate::nn::{ForwardTrace, Scalar};

/// Floor on fitted standard deviations; keeps constant streams (dead ReLU
/// blocks and the like) from producing degenerate summaries.
pub const SIGMA_MIN: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FeatError {
    #[error("cannot fit a distribution to an empty stream")]
    EmptyStream,
    #[error("stream contains {0} non-finite values")]
    NonFinite(usize),
    #[error("eligible layer list is empty")]
    NoEligibleLayers,
    #[error("eligible layer `{0}` not found in the forward trace")]
    UnknownEligibleLayer(String),
    #[error("eligible layers out of trace order at `{0}`")]
    EligibleOrder(String),
    #[error("trace shape changed between batches at layer `{0}`")]
    InconsistentTrace(String),
}

/// Mean/std pair of a fitted value distribution. `std` is clamped to
/// [`SIGMA_MIN`] and both fields are finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: f64,
    pub std: f64,
}

impl GaussianSummary {
    pub fn new(mean: f64, std: f64) -> Self {
        assert!(
            mean.is_finite() && std.is_finite() && std >= 0.0,
            "summary fields must be finite and std non-negative"
        );
        GaussianSummary {
            mean,
            std: std.max(SIGMA_MIN),
        }
    }
}

/// Streaming mean/variance accumulator (Welford), f64 throughout.
#[derive(Debug, Clone, Default)]
struct Moments {
    count: u64,
    mean: f64,
    m2: f64,
    non_finite: usize,
}

impl Moments {
    fn push(&mut self, v: f64) {
        if !v.is_finite() {
            self.non_finite += 1;
            return;
        }
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
    }

    fn finish(&self) -> Result<GaussianSummary, FeatError> {
        if self.non_finite > 0 {
            return Err(FeatError::NonFinite(self.non_finite));
        }
        if self.count == 0 {
            return Err(FeatError::EmptyStream);
        }
        // population convention
        let var = (self.m2 / self.count as f64).max(0.0);
        Ok(GaussianSummary::new(self.mean, var.sqrt()))
    }
}

/// Fits mean and population std over a value stream, clamping the std to
/// [`SIGMA_MIN`].
pub fn fit_gaussian(values: impl IntoIterator<Item = f64>) -> Result<GaussianSummary, FeatError> {
    let mut m = Moments::default();
    for v in values {
        m.push(v);
    }
    m.finish()
}

/// Summary of all input tensor entries, flattened and pooled over samples.
pub fn fit_input_summary(ds: &Dataset) -> GaussianSummary {
    fit_gaussian(ds.inputs.data().iter().map(|v| *v as f64))
        .expect("dataset invariants guarantee a nonempty finite stream")
}

/// Summary of the one-hot encoding of the labels: every sample contributes
/// `num_classes` entries, exactly one of them 1.
pub fn fit_label_summary(labels: &[u32], num_classes: usize) -> GaussianSummary {
    let mut m = Moments::default();
    for &l in labels {
        for c in 0..num_classes {
            m.push(if c as u32 == l { 1.0 } else { 0.0 });
        }
    }
    m.finish().expect("one-hot stream is nonempty")
}

/// Closed-form Wasserstein-2 distance between univariate Gaussians.
pub fn w2_gaussian(a: GaussianSummary, b: GaussianSummary) -> f64 {
    let dm = a.mean - b.mean;
    let ds = a.std - b.std;
    (dm * dm + ds * ds).sqrt()
}

/// Feature-distribution-transfer score of a layer: the l1 difference of
/// (distance-to-labels minus distance-to-inputs) between the layer's
/// activation summary and its predecessor's.
pub fn transfer_score(
    z_prev: GaussianSummary,
    z_cur: GaussianSummary,
    z_x: GaussianSummary,
    z_y: GaussianSummary,
) -> f64 {
    let part_a = w2_gaussian(z_cur, z_y) - w2_gaussian(z_cur, z_x);
    let part_b = w2_gaussian(z_prev, z_y) - w2_gaussian(z_prev, z_x);
    (part_a - part_b).abs()
}

/// Transfer score of one eligible layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: String,
    pub score: f64,
}

/// Streams per-batch forward traces and accumulates one activation summary
/// per eligible layer, single pass.
///
/// Auxiliary layers (batch norm, ReLU, pooling, flatten) carry no vote of
/// their own: their outputs are attributed to the producing conv/dense
/// layer, so the summary for an eligible layer is fit on the last trace
/// entry before the next eligible layer.
#[derive(Debug)]
pub struct StreamingScorer {
    eligible: Vec<String>,
    /// Trace position whose activations feed each eligible layer's summary.
    source_pos: Option<Vec<usize>>,
    moments: Vec<Moments>,
}

impl StreamingScorer {
    pub fn new(eligible: &[String]) -> Result<Self, FeatError> {
        if eligible.is_empty() {
            return Err(FeatError::NoEligibleLayers);
        }
        Ok(StreamingScorer {
            eligible: eligible.to_vec(),
            source_pos: None,
            moments: vec![Moments::default(); eligible.len()],
        })
    }

    fn resolve_sources<S: Scalar>(&self, trace: &ForwardTrace<S>) -> Result<Vec<usize>, FeatError> {
        let names: Vec<&str> = trace.entries().iter().map(|(n, _)| n.as_str()).collect();
        let mut positions = Vec::with_capacity(self.eligible.len());
        let mut last = 0usize;
        for e in &self.eligible {
            let pos = names
                .iter()
                .position(|n| n == e)
                .ok_or_else(|| FeatError::UnknownEligibleLayer(e.clone()))?;
            if !positions.is_empty() && pos <= last {
                return Err(FeatError::EligibleOrder(e.clone()));
            }
            positions.push(pos);
            last = pos;
        }
        let mut sources = Vec::with_capacity(positions.len());
        for (i, _) in positions.iter().enumerate() {
            let src = if i + 1 < positions.len() {
                positions[i + 1] - 1
            } else {
                names.len() - 1
            };
            sources.push(src);
        }
        Ok(sources)
    }

    /// Folds one batch's trace into the running summaries.
    pub fn absorb<S: Scalar>(&mut self, trace: &ForwardTrace<S>) -> Result<(), FeatError> {
        if self.source_pos.is_none() {
            self.source_pos = Some(self.resolve_sources(trace)?);
        }
        let sources = self.source_pos.as_ref().unwrap();
        if trace.len() <= *sources.last().unwrap() {
            return Err(FeatError::InconsistentTrace(
                self.eligible.last().unwrap().clone(),
            ));
        }
        for (m, &src) in self.moments.iter_mut().zip(sources) {
            for v in trace.entries()[src].1.data() {
                m.push(v.to_f64());
            }
        }
        Ok(())
    }

    /// Finishes the pass: one score per eligible layer, in spec order. The
    /// first eligible layer contrasts against the raw-input summary.
    pub fn finish(
        self,
        z_x: GaussianSummary,
        z_y: GaussianSummary,
    ) -> Result<Vec<LayerScore>, FeatError> {
        let mut summaries = Vec::with_capacity(self.moments.len());
        for m in &self.moments {
            summaries.push(m.finish()?);
        }
        let mut scores = Vec::with_capacity(summaries.len());
        let mut prev = z_x;
        for (layer, cur) in self.eligible.into_iter().zip(summaries) {
            scores.push(LayerScore {
                layer,
                score: transfer_score(prev, cur, z_x, z_y),
            });
            prev = cur;
        }
        Ok(scores)
    }
}

/// One-shot scoring over a stream of traces; see [`StreamingScorer`].
pub fn score_all_layers<'a, S: Scalar + 'a>(
    traces: impl IntoIterator<Item = &'a ForwardTrace<S>>,
    z_x: GaussianSummary,
    z_y: GaussianSummary,
    eligible: &[String],
) -> Result<Vec<LayerScore>, FeatError> {
    let mut scorer = StreamingScorer::new(eligible)?;
    let mut saw_any = false;
    for t in traces {
        scorer.absorb(t)?;
        saw_any = true;
    }
    if !saw_any {
        return Err(FeatError::EmptyStream);
    }
    scorer.finish(z_x, z_y)
}
