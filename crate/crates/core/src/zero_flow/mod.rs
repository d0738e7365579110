//! Replicated-noise diagnostic: feed identical frames and inspect activations.
//!
//! With identical frames every estimator should return zero flow; how far a
//! network strays from that, with and without a patch, is the measurement.

pub mod scores;

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::flow::FlowField;
use crate::imaging;
use crate::networks::{FeatureTrace, FlowMethod, Stage};
use crate::patch::{sample_transform, PasteMap, Patch, TransformRanges};
use crate::tensor::{Shape, Tensor};

pub use scores::{checkerboard_score, spatial_invariance_score};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroFlowConfig {
    pub height: usize,
    pub width: usize,
    pub ranges: TransformRanges,
    pub seed: u64,
}

impl Default for ZeroFlowConfig {
    fn default() -> Self {
        ZeroFlowConfig {
            height: 64,
            width: 128,
            ranges: TransformRanges::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub layer: String,
    pub stage: Stage,
    pub mean_norm_with: Option<f64>,
    pub mean_norm_without: f64,
    pub spatial_std_ratio_with: Option<f64>,
    pub spatial_std_ratio_without: f64,
    /// Of the patched run when there is one.
    pub checkerboard: Option<f64>,
    pub thumbnail_with: Option<Tensor>,
    pub thumbnail_without: Tensor,
}

impl LayerStats {
    /// `mean_norm_with / mean_norm_without`, when both exist and the latter is positive.
    pub fn norm_ratio(&self) -> Option<f64> {
        let with = self.mean_norm_with?;
        (self.mean_norm_without > 0.0).then(|| with / self.mean_norm_without)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroFlowReport {
    pub method: String,
    pub seed: u64,
    pub patched: bool,
    /// Empty for methods without feature tracing.
    pub layers: Vec<LayerStats>,
    pub flow_mean_mag_with: Option<f64>,
    pub flow_mean_mag_without: f64,
    pub flow_max_mag_with: Option<f64>,
    pub flow_max_mag_without: f64,
}

/// Largest with/without norm ratio among decoder and among encoder layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Amplification {
    pub max_decoder_ratio: f64,
    pub max_encoder_ratio: f64,
}

impl Amplification {
    /// Whether some decoder layer is amplified more than every encoder layer.
    pub fn decoder_dominates(&self) -> bool {
        self.max_decoder_ratio > self.max_encoder_ratio
    }
}

fn magnitudes(f: &FlowField) -> (f64, f64) {
    let m = f.magnitudes();
    let mean = m.iter().map(|&v| f64::from(v)).sum::<f64>() / m.len() as f64;
    let max = m.iter().fold(0.0f64, |a, &v| a.max(f64::from(v)));
    (mean, max)
}

/// Uniform noise image in `[0, 1]` per channel and pixel.
pub fn noise_image(height: usize, width: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(Shape::new(1, 3, height, width), |_, _, _, _| rng.random())
}

fn run(method: &dyn FlowMethod, img: &Tensor) -> Result<(FlowField, Option<FeatureTrace>)> {
    match method.network() {
        Some(net) => {
            let (out, trace) = net.predict(img, img, true)?;
            Ok((out.final_flow, trace))
        }
        None => Ok((method.estimate(img, img)?, None)),
    }
}

/// Runs `method` on a replicated noise image, with and (if given) without a
/// patch pasted at the same place in both frames.
pub fn zero_flow_test(method: &dyn FlowMethod, patch: Option<&Patch>, cfg: &ZeroFlowConfig) -> Result<ZeroFlowReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let img = noise_image(cfg.height, cfg.width, &mut rng);
    let patched = match patch {
        Some(p) => {
            let t = sample_transform(&mut rng, (cfg.height, cfg.width), (p.height(), p.width()), &cfg.ranges)?;
            Some(PasteMap::new(p, (cfg.height, cfg.width), &t)?.apply(&img, p)?)
        }
        None => None,
    };

    let (flow_without, trace_without) = run(method, &img)?;
    let (flow_with, trace_with) = match &patched {
        Some(img) => {
            let (f, t) = run(method, img)?;
            (Some(f), t)
        }
        None => (None, None),
    };

    let mut layers = Vec::new();
    if let Some(without) = trace_without {
        let with_entries = trace_with.map(|t| t.entries);
        if let Some(w) = &with_entries {
            if w.len() != without.entries.len() {
                return Err(config_err!("traces with and without the patch differ in length"));
            }
        }
        for (i, e) in without.entries.into_iter().enumerate() {
            let w = with_entries.as_ref().map(|w| &w[i]);
            layers.push(LayerStats {
                layer: e.layer,
                stage: e.stage,
                mean_norm_with: w.map(|w| w.mean_norm),
                mean_norm_without: e.mean_norm,
                spatial_std_ratio_with: w.map(|w| w.spatial_std_ratio),
                spatial_std_ratio_without: e.spatial_std_ratio,
                checkerboard: match w {
                    Some(w) => w.checkerboard,
                    None => e.checkerboard,
                },
                thumbnail_with: w.map(|w| w.thumbnail.clone()),
                thumbnail_without: e.thumbnail,
            });
        }
    }

    let (mean_without, max_without) = magnitudes(&flow_without);
    let with = flow_with.as_ref().map(magnitudes);
    Ok(ZeroFlowReport {
        method: method.name().to_string(),
        seed: cfg.seed,
        patched: patch.is_some(),
        layers,
        flow_mean_mag_with: with.map(|w| w.0),
        flow_mean_mag_without: mean_without,
        flow_max_mag_with: with.map(|w| w.1),
        flow_max_mag_without: max_without,
    })
}

impl ZeroFlowReport {
    /// `None` unless both stages have at least one defined ratio.
    pub fn amplification(&self) -> Option<Amplification> {
        let max_for = |stage: Stage| {
            self.layers
                .iter()
                .filter(|l| l.stage == stage)
                .filter_map(LayerStats::norm_ratio)
                .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))))
        };
        Some(Amplification {
            max_decoder_ratio: max_for(Stage::Decoder)?,
            max_encoder_ratio: max_for(Stage::Encoder)?,
        })
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut out = String::from(
            "method,seed,index,layer,stage,mean_norm_with,mean_norm_without,norm_ratio,spatial_std_ratio_with,spatial_std_ratio_without,checkerboard\n",
        );
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{i},{},{},{},{:.6},{},{},{:.6},{}",
                self.method,
                self.seed,
                l.layer,
                l.stage.as_str(),
                opt(l.mean_norm_with),
                l.mean_norm_without,
                opt(l.norm_ratio()),
                opt(l.spatial_std_ratio_with),
                l.spatial_std_ratio_without,
                opt(l.checkerboard),
            );
        }
        let _ = writeln!(
            out,
            "{},{},{},final_flow,output,{},{:.6},,,,",
            self.method,
            self.seed,
            self.layers.len(),
            opt(self.flow_mean_mag_with),
            self.flow_mean_mag_without,
        );
        out
    }

    /// Writes `<method>_zeroflow.csv` and numbered per-layer thumbnails in
    /// evaluation order under `dir/<method>_thumbs/`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let csv = dir.join(format!("{}_zeroflow.csv", self.method));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        if self.layers.is_empty() {
            return Ok(());
        }
        let thumbs = dir.join(format!("{}_thumbs", self.method));
        std::fs::create_dir_all(&thumbs).map_err(|e| Error::io(&thumbs, e))?;
        for (i, l) in self.layers.iter().enumerate() {
            let maps = [("without", Some(&l.thumbnail_without)), ("with", l.thumbnail_with.as_ref())];
            for (tag, t) in maps {
                let Some(t) = t else { continue };
                let s = t.shape();
                let img = imaging::to_gray_normalized(t.data(), s.h, s.w);
                imaging::save_png(&img, thumbs.join(format!("{i:02}_{}_{tag}.png", l.layer)))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
