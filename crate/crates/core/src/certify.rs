//! Occlusion-based patch detection and certification.
//!
//! Every occluded prediction zeroes the window's pixels and recomputes the
//! SIN mask with all superficial positions whose receptive field touches the
//! window removed from candidacy. That exclusion depends only on geometry,
//! which gives two exact properties the certificate relies on:
//!
//! * a window disjoint from `R(x)` leaves the pruned prediction unchanged;
//! * two images that agree outside a window predict identically once that
//!   window is occluded.
//!
//! The merge plan is built once over the full stride-1 window grid and only
//! then filtered by `R(x)`, so certification and detection always evaluate
//! the very same occluders for a given image.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{apply_spatial_mask, Model};
use crate::sin::{
    channel_sum, compute_sin_mask, pruned_forward, ExclusionSet, InputRegion, ReceptiveMap, SinConfig, SinMask,
};
use crate::tensor::Tensor;
use crate::windows::{generate_windows, global_plan, Window, WindowPlan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub winner_rate: f32,
    /// Patch side `p` the certificate is issued against.
    pub patch: usize,
    /// Redundancy step `r`; occluders have side `p + r − 1`.
    pub step: usize,
    /// Overlap threshold τ for merging occluders.
    pub tau: f64,
    /// Smallest connected group of same-label disagreeing windows that
    /// triggers the strong alert.
    pub alert_cluster_min: usize,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            winner_rate: 0.2,
            patch: 3,
            step: 3,
            tau: 0.6,
            alert_cluster_min: 1,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alert_cluster_min == 0 {
            return Err(Error::config("alert_cluster_min must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.patch == 0 || self.step == 0 {
            return Err(Error::config("patch side and step must be >= 1"));
        }
        Ok(())
    }
}

/// Labels of every evaluated occluder plus the unoccluded pruned label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionPredMap {
    pub base_label: usize,
    pub entries: Vec<(Window, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlertReason {
    /// A connected group of occluders agrees on a label other than `y*`.
    PatchCluster { label: usize },
    /// Fallback: the majority occluded label differs from `y*`.
    MajorityVote { label: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectionOutcome {
    Benign {
        label: usize,
    },
    Alert {
        reason: AlertReason,
        suspects: Vec<Window>,
        recovered_label: Option<usize>,
    },
}

impl DetectionOutcome {
    pub fn is_alert(&self) -> bool {
        matches!(self, DetectionOutcome::Alert { .. })
    }

    pub fn label(&self) -> Option<usize> {
        match self {
            DetectionOutcome::Benign { label } => Some(*label),
            DetectionOutcome::Alert { .. } => None,
        }
    }

    /// Short tag used in reports: `benign:<label>` or `alert`.
    pub fn tag(&self) -> String {
        match self {
            DetectionOutcome::Benign { label } => format!("benign:{label}"),
            DetectionOutcome::Alert { .. } => "alert".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertifyResult {
    pub certified: bool,
    pub failing_window: Option<Window>,
    pub evaluated_count: usize,
    pub pruned_label: usize,
}

/// Zeroes the pixels of `window` in every channel.
pub fn occlude(x: &Tensor, window: &Window) -> Tensor {
    let mut out = x.clone();
    let (c, _, _) = x.dims3().expect("rank-3 image");
    for ch in 0..c {
        for y in window.y..window.y + window.height {
            for xx in window.x..window.x + window.width {
                out.set3(ch, y, xx, 0.0);
            }
        }
    }
    out
}

/// Occlusion certifier bound to one model and configuration.
#[derive(Debug, Clone)]
pub struct Certifier<'m> {
    model: &'m Model,
    cfg: DefenseConfig,
    sin: SinConfig,
    fields: ReceptiveMap,
    plan: WindowPlan,
    exclusions: Vec<ExclusionSet>,
    chunk: usize,
}

/// Clean superficial activations of one image, reused across occluders.
struct Sweep<'c, 'm> {
    cert: &'c Certifier<'m>,
    raw: Tensor,
    sums: Tensor,
}

impl Sweep<'_, '_> {
    fn predict_masked(&self, mask: &SinMask) -> usize {
        let mut act = self.raw.clone();
        apply_spatial_mask(&mut act, &mask.gate());
        let model = self.cert.model;
        model
            .forward_from(model.superficial_layer() + 1, act)
            .expect("shapes validated")
            .argmax()
    }

    fn base(&self) -> (usize, SinMask) {
        let mask = compute_sin_mask(&self.sums, self.cert.sin.winner_rate, None);
        (self.predict_masked(&mask), mask)
    }

    /// Outside the excluded positions the occluded image's superficial
    /// activations are bit-identical to the clean ones, so only the mask
    /// and the layers after it need recomputing.
    fn occluded(&self, merged_index: usize) -> usize {
        let ex = &self.cert.exclusions[merged_index];
        let mask = compute_sin_mask(&self.sums, self.cert.sin.winner_rate, Some(ex));
        self.predict_masked(&mask)
    }
}

impl<'m> Certifier<'m> {
    pub fn new(model: &'m Model, cfg: DefenseConfig) -> Result<Self> {
        cfg.validate()?;
        let sin = SinConfig::for_model(model, cfg.winner_rate)?;
        let dims = model.input_dims();
        let plan = global_plan(dims.height, dims.width, cfg.patch, cfg.step, cfg.tau)?;
        let fields = ReceptiveMap::for_model(model);
        let exclusions = plan.merged.iter().map(|w| fields.exclusion(&w.rect())).collect();
        Ok(Self {
            model,
            cfg,
            sin,
            fields,
            plan,
            exclusions,
            chunk: rayon::current_num_threads().max(1) * 4,
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn config(&self) -> &DefenseConfig {
        &self.cfg
    }

    pub fn sin_config(&self) -> &SinConfig {
        &self.sin
    }

    pub fn plan(&self) -> &WindowPlan {
        &self.plan
    }

    pub fn receptive_map(&self) -> &ReceptiveMap {
        &self.fields
    }

    fn check_window(&self, window: &Window) -> Result<()> {
        let dims = self.model.input_dims();
        if !window.fits(dims.height, dims.width) {
            return Err(Error::precondition(format!(
                "window {window:?} is empty or outside the {}x{} image",
                dims.height, dims.width
            )));
        }
        Ok(())
    }

    fn sweep(&self, x: &Tensor) -> Result<Sweep<'_, 'm>> {
        let raw = self.model.forward_to(x, self.model.superficial_layer())?;
        let sums = channel_sum(&raw)?;
        Ok(Sweep { cert: self, raw, sums })
    }

    /// Pruned prediction, its mask and the back-mapped region `R(x)`.
    pub fn pruned_predict(&self, x: &Tensor) -> Result<(usize, SinMask, InputRegion)> {
        let (trace, mask) = pruned_forward(self.model, x, &self.sin, None, false)?;
        let region = self.fields.backmap(&mask);
        Ok((trace.label, mask, region))
    }

    /// Label of `x` with `window` zeroed and its superficial footprint
    /// excluded from the SIN mask.
    pub fn occluded_predict(&self, x: &Tensor, window: &Window) -> Result<usize> {
        self.check_window(window)?;
        let ex = self.fields.exclusion(&window.rect());
        let (trace, _) = pruned_forward(self.model, &occlude(x, window), &self.sin, Some(&ex), false)?;
        Ok(trace.label)
    }

    /// Indices into `plan().merged` of the occluders evaluated for `x`.
    fn candidate_indices(&self, region: &InputRegion) -> Vec<usize> {
        self.plan
            .merged
            .iter()
            .enumerate()
            .filter(|(_, w)| region.intersects(&w.rect()))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn occlusion_map(&self, x: &Tensor) -> Result<OcclusionPredMap> {
        let sweep = self.sweep(x)?;
        let (base_label, mask) = sweep.base();
        let region = self.fields.backmap(&mask);
        let idx = self.candidate_indices(&region);
        let labels: Vec<usize> = idx.par_iter().map(|&i| sweep.occluded(i)).collect();
        Ok(OcclusionPredMap {
            base_label,
            entries: idx.iter().map(|&i| self.plan.merged[i]).zip(labels).collect(),
        })
    }

    pub fn detect(&self, x: &Tensor) -> Result<DetectionOutcome> {
        let map = self.occlusion_map(x)?;
        let Some((reason, suspects)) = self.judge(&map) else {
            return Ok(DetectionOutcome::Benign { label: map.base_label });
        };
        let recovered_label = Some(self.recover_windows(x, &suspects)?);
        Ok(DetectionOutcome::Alert {
            reason,
            suspects,
            recovered_label,
        })
    }

    fn judge(&self, map: &OcclusionPredMap) -> Option<(AlertReason, Vec<Window>)> {
        let disagree: Vec<(Window, usize)> = map
            .entries
            .iter()
            .copied()
            .filter(|&(_, l)| l != map.base_label)
            .collect();
        if disagree.is_empty() {
            return None;
        }
        if let Some((label, group)) = largest_cluster(&disagree, self.cfg.alert_cluster_min) {
            return Some((AlertReason::PatchCluster { label }, group));
        }
        let majority = majority_label(map.entries.iter().map(|&(_, l)| l), self.model.class_count());
        if majority != map.base_label {
            let suspects = disagree.iter().map(|&(w, _)| w).collect();
            return Some((AlertReason::MajorityVote { label: majority }, suspects));
        }
        None
    }

    /// Certificate that `x` is detected-or-correct for label `y` under any
    /// single patch of the configured size.
    pub fn certify(&self, x: &Tensor, y: usize) -> Result<CertifyResult> {
        let sweep = self.sweep(x)?;
        let (base, mask) = sweep.base();
        if base != y {
            return Ok(CertifyResult {
                certified: false,
                failing_window: None,
                evaluated_count: 0,
                pruned_label: base,
            });
        }
        let region = self.fields.backmap(&mask);
        let idx = self.candidate_indices(&region);
        for (c, chunk) in idx.chunks(self.chunk).enumerate() {
            let labels: Vec<usize> = chunk.par_iter().map(|&i| sweep.occluded(i)).collect();
            if let Some(pos) = labels.iter().position(|&l| l != y) {
                return Ok(CertifyResult {
                    certified: false,
                    failing_window: Some(self.plan.merged[chunk[pos]]),
                    evaluated_count: c * self.chunk + pos + 1,
                    pruned_label: base,
                });
            }
        }
        Ok(CertifyResult {
            certified: true,
            failing_window: None,
            evaluated_count: idx.len(),
            pruned_label: base,
        })
    }

    /// Exhaustive variant: every generated stride-1 window, no region
    /// filter, no merging, each occluded prediction run from pixels.
    pub fn certify_oracle(&self, x: &Tensor, y: usize) -> Result<CertifyResult> {
        let (base, _, _) = self.pruned_predict(x)?;
        if base != y {
            return Ok(CertifyResult {
                certified: false,
                failing_window: None,
                evaluated_count: 0,
                pruned_label: base,
            });
        }
        let dims = self.model.input_dims();
        let windows = generate_windows(dims.height, dims.width, self.cfg.patch, self.cfg.step)?;
        for (c, chunk) in windows.chunks(self.chunk).enumerate() {
            let labels = chunk
                .par_iter()
                .map(|w| self.occluded_predict(x, w))
                .collect::<Result<Vec<_>>>()?;
            if let Some(pos) = labels.iter().position(|&l| l != y) {
                return Ok(CertifyResult {
                    certified: false,
                    failing_window: Some(chunk[pos]),
                    evaluated_count: c * self.chunk + pos + 1,
                    pruned_label: base,
                });
            }
        }
        Ok(CertifyResult {
            certified: true,
            failing_window: None,
            evaluated_count: windows.len(),
            pruned_label: base,
        })
    }

    /// Empirical recovery: occlude every suspect window and re-predict.
    pub fn recover(&self, x: &Tensor, outcome: &DetectionOutcome) -> Result<usize> {
        match outcome {
            DetectionOutcome::Benign { .. } => {
                Err(Error::precondition("recovery needs an alert outcome"))
            }
            DetectionOutcome::Alert { suspects, .. } => self.recover_windows(x, suspects),
        }
    }

    fn recover_windows(&self, x: &Tensor, suspects: &[Window]) -> Result<usize> {
        if suspects.is_empty() {
            return Err(Error::precondition("alert carries no suspect windows"));
        }
        let (h, w) = self.fields.extent();
        let mut ex = ExclusionSet::empty(h, w);
        let mut occluded = x.clone();
        for win in suspects {
            self.check_window(win)?;
            ex.union_with(&self.fields.exclusion(&win.rect()));
            occluded = occlude(&occluded, win);
        }
        let (trace, _) = pruned_forward(self.model, &occluded, &self.sin, Some(&ex), false)?;
        Ok(trace.label)
    }
}

/// Largest 8-connected group of disagreeing windows sharing one label, if
/// it has at least `min_size` members. Ties keep the group found first.
fn largest_cluster(disagree: &[(Window, usize)], min_size: usize) -> Option<(usize, Vec<Window>)> {
    let n = disagree.len();
    let mut seen = vec![false; n];
    let mut best: Option<(usize, Vec<Window>)> = None;
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let label = disagree[start].1;
        let mut stack = vec![start];
        let mut group = Vec::new();
        seen[start] = true;
        while let Some(i) = stack.pop() {
            group.push(i);
            for j in 0..n {
                if !seen[j] && disagree[j].1 == label && disagree[i].0.adjacent(&disagree[j].0) {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        group.sort_unstable();
        if group.len() >= min_size && best.as_ref().map_or(true, |(_, b)| group.len() > b.len()) {
            best = Some((label, group.iter().map(|&i| disagree[i].0).collect()));
        }
    }
    best
}

/// Most frequent label; ties go to the lowest label.
fn majority_label(labels: impl Iterator<Item = usize>, classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for l in labels {
        counts[l] += 1;
    }
    crate::tensor::argmax(&counts.iter().map(|&c| c as f32).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Conv, Dense, InputDims, Layer, LayerGeom};

    /// conv1x1 (1 channel, weight 1) → relu → GAP → dense; logits are
    /// `[bias0, gain·mean]`.
    fn brightness_model(h: usize, w: usize, gain: f32, bias0: f32) -> Model {
        let conv = Conv {
            geom: LayerGeom::identity(),
            weight: Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
            bias: Tensor::zeros(&[1]),
        };
        let dense = Dense {
            weight: Tensor::new(vec![2, 1], vec![0.0, gain]).unwrap(),
            bias: Tensor::new(vec![2], vec![bias0, 0.0]).unwrap(),
        };
        Model::new(
            vec![Layer::Conv(conv), Layer::Relu, Layer::GlobalAvgPool, Layer::Dense(dense)],
            InputDims::new(1, h, w),
            2,
            0,
        )
        .unwrap()
    }

    fn cfg(rate: f32) -> DefenseConfig {
        DefenseConfig {
            winner_rate: rate,
            patch: 2,
            step: 2,
            tau: 1.0,
            alert_cluster_min: 1,
        }
    }

    #[test]
    fn degenerate_window_is_rejected() {
        let model = brightness_model(6, 6, 1.0, 0.0);
        let cert = Certifier::new(&model, cfg(0.5)).unwrap();
        let x = Tensor::filled(&[1, 6, 6], 0.5);
        let empty = Window { x: 1, y: 1, width: 0, height: 0 };
        assert!(matches!(cert.occluded_predict(&x, &empty), Err(Error::Precondition(_))));
        assert!(cert.occluded_predict(&x, &Window::square(4, 4, 3)).is_err());
    }

    #[test]
    fn constant_model_certifies_with_filtered_count() {
        // dense gain 0 and bias0 > 0: always class 0
        let model = brightness_model(6, 6, 0.0, 1.0);
        let cert = Certifier::new(&model, cfg(0.25)).unwrap();
        let mut x = Tensor::zeros(&[1, 6, 6]);
        x.set3(0, 0, 0, 1.0);
        let res = cert.certify(&x, 0).unwrap();
        assert!(res.certified);
        let (_, _, region) = cert.pruned_predict(&x).unwrap();
        assert_eq!(res.evaluated_count, cert.plan().candidates(&region).len());
        assert!(res.evaluated_count < cert.plan().merged.len());
    }

    #[test]
    fn bright_centre_flips_when_occluded() {
        // class 1 iff mean kept brightness > 0.1; the only bright pixels sit
        // in the centre, so occluding them flips the label
        let model = brightness_model(6, 6, 4.0, 0.1);
        let cert = Certifier::new(&model, cfg(0.2)).unwrap();
        let mut x = Tensor::zeros(&[1, 6, 6]);
        for (y, xx) in [(2, 2), (2, 3), (3, 2), (3, 3)] {
            x.set3(0, y, xx, 1.0);
        }
        assert_eq!(cert.pruned_predict(&x).unwrap().0, 1);
        let res = cert.certify(&x, 1).unwrap();
        assert!(!res.certified);
        let failing = res.failing_window.unwrap();
        assert!(failing.rect().intersects(&Window::square(2, 2, 2).rect()));
        assert!(cert.detect(&x).unwrap().is_alert());
    }

    #[test]
    fn recover_requires_alert() {
        let model = brightness_model(6, 6, 0.0, 1.0);
        let cert = Certifier::new(&model, cfg(0.5)).unwrap();
        let x = Tensor::zeros(&[1, 6, 6]);
        let err = cert.recover(&x, &DetectionOutcome::Benign { label: 0 }).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn full_image_suspect_recovers_zero_superficial_prediction() {
        let model = Model::plain_cnn(InputDims::new(3, 8, 8), 3, (4, 4), 5).unwrap();
        let cert = Certifier::new(&model, DefenseConfig { patch: 2, step: 2, ..Default::default() }).unwrap();
        let x = Tensor::filled(&[3, 8, 8], 0.7);
        let outcome = DetectionOutcome::Alert {
            reason: AlertReason::MajorityVote { label: 0 },
            suspects: vec![Window::square(0, 0, 8)],
            recovered_label: None,
        };
        let zero = model.forward_from(1, Tensor::zeros(model.output_shape(0))).unwrap();
        assert_eq!(cert.recover(&x, &outcome).unwrap(), zero.argmax());
    }

    #[test]
    fn clusters_split_by_label_and_adjacency() {
        let d = vec![
            (Window::square(0, 0, 2), 1),
            (Window::square(1, 0, 2), 1),
            (Window::square(6, 6, 2), 1),
            (Window::square(2, 0, 2), 2),
        ];
        let (label, group) = largest_cluster(&d, 1).unwrap();
        assert_eq!(label, 1);
        assert_eq!(group, vec![Window::square(0, 0, 2), Window::square(1, 0, 2)]);
        assert!(largest_cluster(&d, 3).is_none());
    }

    #[test]
    fn majority_ties_go_low() {
        assert_eq!(majority_label([2, 1, 2, 1].into_iter(), 3), 1);
        assert_eq!(majority_label([2, 2, 0].into_iter(), 3), 2);
    }
}
