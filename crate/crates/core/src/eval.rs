//! EPE metrics and attack reports.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::flow::FlowField;
use crate::networks::FlowMethod;
use crate::patch::{
    estimate_patch_homography, moving_maps, sample_patch_disparity, sample_transform, PasteMap, Patch, TransformRanges,
    TransformSample,
};
use crate::synth::{sample_seed, SamplePair};
use crate::tensor::Tensor;

/// Placement attempts per sample before a moving placement is declared infeasible.
const MAX_PLACEMENT_TRIES: usize = 100;

/// Mean end-point error over the pixels selected by `mask` (all when `None`).
pub fn epe(flow: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<f64> {
    let (sum, n) = epe_sum(flow, gt, mask)?;
    if n == 0 {
        return Err(config_err!("epe: mask selects no pixels"));
    }
    Ok(sum / n as f64)
}

fn epe_sum(flow: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<(f64, usize)> {
    let len = flow.u().len();
    if (flow.height(), flow.width()) != (gt.height(), gt.width()) {
        return Err(config_err!(
            "epe: {}x{} vs {}x{}",
            flow.height(),
            flow.width(),
            gt.height(),
            gt.width()
        ));
    }
    if mask.is_some_and(|m| m.len() != len) {
        return Err(config_err!("epe: mask has {} entries for {len} pixels", mask.map_or(0, <[bool]>::len)));
    }
    let (mut sum, mut n) = (0.0, 0);
    for p in 0..len {
        if mask.is_none_or(|m| m[p]) {
            let du = f64::from(flow.u()[p]) - f64::from(gt.u()[p]);
            let dv = f64::from(flow.v()[p]) - f64::from(gt.v()[p]);
            sum += du.hypot(dv);
            n += 1;
        }
    }
    Ok((sum, n))
}

/// `100 * (attacked - clean) / clean`.
///
/// Two zero errors count as no degradation; any other zero clean error has
/// no defined ratio.
pub fn relative_degradation(epe_clean: f64, epe_attacked: f64) -> Option<f64> {
    if epe_clean > 0.0 {
        Some(100.0 * (epe_attacked - epe_clean) / epe_clean)
    } else if epe_clean == 0.0 && epe_attacked == 0.0 {
        Some(0.0)
    } else {
        None
    }
}

/// Integer percent, halves rounded away from zero.
pub fn round_percent(pct: f64) -> i64 {
    pct.round() as i64
}

/// Signed integer percent as printed in reports, or `n/a`.
pub fn format_percent(pct: Option<f64>) -> String {
    match pct {
        Some(p) => format!("{:+}%", round_percent(p)),
        None => "n/a".into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementPolicy {
    /// No patch; attacked frames are the clean frames.
    None,
    /// Same placement in both frames.
    RandomStatic,
    /// Patch attached to the scene, moved by the camera-induced homography.
    RealisticMotion,
}

impl PlacementPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            PlacementPolicy::None => "none",
            PlacementPolicy::RandomStatic => "random-static",
            PlacementPolicy::RealisticMotion => "realistic-motion",
        }
    }
}

/// What gets pasted.
#[derive(Clone, Debug)]
pub enum Adversary {
    Patch(Patch),
    /// Pastes each image's own pixels over the footprint of a patch of this shape.
    Transparent(Patch),
}

impl Adversary {
    fn shape(&self) -> &Patch {
        match self {
            Adversary::Patch(p) | Adversary::Transparent(p) => p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub policy: PlacementPolicy,
    pub ranges: TransformRanges,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            policy: PlacementPolicy::RandomStatic,
            ranges: TransformRanges::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: String,
    pub epe_clean: f64,
    pub epe_attacked: f64,
    pub rel_degradation_pct: Option<f64>,
    /// Attacked EPE outside the frame-1 patch footprint.
    pub epe_attacked_excl_patch: f64,
    /// Attacked EPE inside the frame-1 patch footprint (`None` without a patch).
    pub epe_attacked_patch_region: Option<f64>,
    /// Valid pixels inside and outside the footprint.
    pub pixels_in_patch: usize,
    pub pixels_outside: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub policy: PlacementPolicy,
    pub patch_size: Option<(usize, usize)>,
    pub patch_area_pct: Option<f64>,
    pub samples: usize,
    pub seed: u64,
    pub methods: Vec<MethodReport>,
}

/// One sample's placement, shared by every method.
struct Placement {
    maps: Option<(PasteMap, PasteMap)>,
    footprint: Vec<bool>,
}

fn place(pair: &SamplePair, patch: &Patch, cfg: &EvalConfig, index: usize) -> Result<Placement> {
    let dims = (pair.height(), pair.width());
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, index));
    let pdims = (patch.height(), patch.width());
    let maps = match cfg.policy {
        PlacementPolicy::None => None,
        PlacementPolicy::RandomStatic => {
            let t = sample_transform(&mut rng, dims, pdims, &cfg.ranges)?;
            let m = PasteMap::new(patch, dims, &t)?;
            Some((m.clone(), m))
        }
        PlacementPolicy::RealisticMotion => Some(moving_placement(&mut rng, pair, patch, cfg)?),
    };
    let footprint = match &maps {
        Some((m1, _)) => m1.footprint(),
        None => vec![false; dims.0 * dims.1],
    };
    Ok(Placement { maps, footprint })
}

fn moving_placement(rng: &mut ChaCha8Rng, pair: &SamplePair, patch: &Patch, cfg: &EvalConfig) -> Result<(PasteMap, PasteMap)> {
    let dims = (pair.height(), pair.width());
    let pdims = (patch.height(), patch.width());
    for _ in 0..MAX_PLACEMENT_TRIES {
        let t: TransformSample = sample_transform(rng, dims, pdims, &cfg.ranges)?;
        let first = PasteMap::new(patch, dims, &t)?;
        let d = sample_patch_disparity(rng, &pair.disparity, &first.footprint())?;
        let motion = estimate_patch_homography(&t, pdims, d, &pair.pose, &pair.intrinsics)?;
        match moving_maps(patch, dims, &t, &motion) {
            Ok(maps) => return Ok(maps),
            Err(Error::Placement(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Placement(format!(
        "no placement of a {}x{} patch stays inside both frames after {MAX_PLACEMENT_TRIES} tries",
        pdims.0, pdims.1
    )))
}

fn attacked_frames(pair: &SamplePair, adv: &Adversary, place: &Placement) -> Result<(Tensor, Tensor)> {
    match (&place.maps, adv) {
        (None, _) => Ok((pair.i1.clone(), pair.i2.clone())),
        (Some((m1, m2)), Adversary::Patch(p)) => Ok((m1.apply(&pair.i1, p)?, m2.apply(&pair.i2, p)?)),
        (Some((m1, m2)), Adversary::Transparent(_)) => Ok((m1.apply_transparent(&pair.i1)?, m2.apply_transparent(&pair.i2)?)),
    }
}

#[derive(Default, Clone, Copy)]
struct Sums {
    clean: f64,
    attacked: f64,
    inside: f64,
    outside: f64,
    n_all: usize,
    n_in: usize,
    n_out: usize,
}

/// Clean and attacked EPE for each method over `data`, with identical
/// placements for every method.
pub fn evaluate_attack(methods: &[&dyn FlowMethod], adv: &Adversary, data: &[SamplePair], cfg: &EvalConfig) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(config_err!("evaluation dataset is empty"));
    }
    let patch = adv.shape();
    let placements = data
        .par_iter()
        .enumerate()
        .map(|(i, pair)| place(pair, patch, cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let frames = data
        .par_iter()
        .zip(&placements)
        .map(|(pair, pl)| attacked_frames(pair, adv, pl))
        .collect::<Result<Vec<_>>>()?;

    let mut reports = Vec::with_capacity(methods.len());
    for method in methods {
        let per_sample = data
            .par_iter()
            .zip(&placements)
            .zip(&frames)
            .map(|((pair, pl), (a1, a2))| {
                let valid = pair.valid_mask();
                let clean = method.estimate(&pair.i1, &pair.i2)?;
                let attacked = method.estimate(a1, a2)?;
                let inside: Vec<bool> = valid.iter().zip(&pl.footprint).map(|(&v, &f)| v && f).collect();
                let outside: Vec<bool> = valid.iter().zip(&pl.footprint).map(|(&v, &f)| v && !f).collect();
                let (c, n_all) = epe_sum(&clean, &pair.gt_flow, Some(&valid))?;
                let (a, _) = epe_sum(&attacked, &pair.gt_flow, Some(&valid))?;
                let (ai, n_in) = epe_sum(&attacked, &pair.gt_flow, Some(&inside))?;
                let (ao, n_out) = epe_sum(&attacked, &pair.gt_flow, Some(&outside))?;
                Ok(Sums {
                    clean: c,
                    attacked: a,
                    inside: ai,
                    outside: ao,
                    n_all,
                    n_in,
                    n_out,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let t = per_sample.iter().fold(Sums::default(), |a, s| Sums {
            clean: a.clean + s.clean,
            attacked: a.attacked + s.attacked,
            inside: a.inside + s.inside,
            outside: a.outside + s.outside,
            n_all: a.n_all + s.n_all,
            n_in: a.n_in + s.n_in,
            n_out: a.n_out + s.n_out,
        });
        if t.n_all == 0 {
            return Err(config_err!("evaluation dataset has no valid pixels"));
        }
        let epe_clean = t.clean / t.n_all as f64;
        let epe_attacked = t.attacked / t.n_all as f64;
        reports.push(MethodReport {
            method: method.name().to_string(),
            epe_clean,
            epe_attacked,
            rel_degradation_pct: relative_degradation(epe_clean, epe_attacked),
            epe_attacked_excl_patch: if t.n_out > 0 { t.outside / t.n_out as f64 } else { f64::NAN },
            epe_attacked_patch_region: (t.n_in > 0).then(|| t.inside / t.n_in as f64),
            pixels_in_patch: t.n_in,
            pixels_outside: t.n_out,
        });
    }

    let (h, w) = (data[0].height(), data[0].width());
    let with_patch = cfg.policy != PlacementPolicy::None;
    Ok(EvalReport {
        policy: cfg.policy,
        patch_size: with_patch.then(|| (patch.height(), patch.width())),
        patch_area_pct: with_patch.then(|| patch_area_pct((patch.height(), patch.width()), (h, w))),
        samples: data.len(),
        seed: cfg.seed,
        methods: reports,
    })
}

/// `100 * h * w / (H * W)`.
pub fn patch_area_pct(patch: (usize, usize), image: (usize, usize)) -> f64 {
    100.0 * (patch.0 * patch.1) as f64 / (image.0 * image.1) as f64
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,policy,patch_h,patch_w,patch_area_pct,samples,seed,epe_clean,epe_attacked,rel_degradation_pct,rel_degradation_rounded,epe_attacked_excl_patch,epe_attacked_patch_region\n",
        );
        let (ph, pw) = self.patch_size.map_or((String::new(), String::new()), |(h, w)| (h.to_string(), w.to_string()));
        let area = self.patch_area_pct.map_or(String::new(), |a| format!("{a:.4}"));
        for m in &self.methods {
            let _ = writeln!(
                out,
                "{},{},{ph},{pw},{area},{},{},{:.6},{:.6},{},{},{:.6},{}",
                m.method,
                self.policy.as_str(),
                self.samples,
                self.seed,
                m.epe_clean,
                m.epe_attacked,
                m.rel_degradation_pct.map_or(String::new(), |p| format!("{p:.4}")),
                m.rel_degradation_pct.map_or(String::new(), |p| round_percent(p).to_string()),
                m.epe_attacked_excl_patch,
                m.epe_attacked_patch_region.map_or(String::new(), |e| format!("{e:.6}")),
            );
        }
        out
    }

    /// Text table: method, clean EPE, then attacked EPE and relative change.
    pub fn to_table(&self) -> String {
        let head = match self.patch_size {
            Some((h, w)) => format!("{h}x{w} ({:.1}%)", self.patch_area_pct.unwrap_or(0.0)),
            None => "no patch".into(),
        };
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} | {:>9} | {:^26}", "", "Unattacked", head);
        let _ = writeln!(out, "{:<12} | {:>9} | {:>9} | {:>6} | {:>8}", "Method", "EPE", "EPE", "Rel", "EPE excl");
        let _ = writeln!(out, "{}", "-".repeat(58));
        for m in &self.methods {
            let _ = writeln!(
                out,
                "{:<12} | {:>9.3} | {:>9.3} | {:>6} | {:>8.3}",
                m.method,
                m.epe_clean,
                m.epe_attacked,
                format_percent(m.rel_degradation_pct),
                m.epe_attacked_excl_patch
            );
        }
        let _ = writeln!(out, "policy {}, {} samples, seed {}", self.policy.as_str(), self.samples, self.seed);
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        for (ext, text) in [("csv", self.to_csv()), ("txt", self.to_table())] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}
