//! Universal adversarial patches and the activation-penalised adaptive attack.
//!
//! The optimised objective is `log Pr(target | x') − α·E(x')` averaged over
//! the image batch, where `x'` has the patch pasted in and `E` sums the
//! first-layer pre-activation (channel-summed) over every first-layer
//! position whose receptive field touches the patch. `α = 0` is the plain
//! targeted patch attack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{Certifier, DetectionOutcome};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{log_prob, softmax_cross_entropy, Layer, Model};
use crate::sin::{pruned_forward, Coord, ReceptiveMap, SinConfig};
use crate::tensor::Tensor;
use crate::windows::Window;

/// `C × p × p` patch with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensor {
    values: Tensor,
}

impl PatchTensor {
    pub fn filled(channels: usize, side: usize, value: f32) -> Result<Self> {
        Self::from_tensor(Tensor::filled(&[channels, side, side], value))
    }

    pub fn random(channels: usize, side: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * side * side).map(|_| rng.gen::<f32>()).collect();
        Self::from_tensor(Tensor::new(vec![channels, side, side], data)?)
    }

    pub fn from_tensor(values: Tensor) -> Result<Self> {
        match values.dims3() {
            Some((_, h, w)) if h == w && h > 0 => {}
            _ => return Err(Error::config(format!("patch must be C x p x p, got {:?}", values.shape()))),
        }
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("patch values must lie in [0, 1]"));
        }
        Ok(Self { values })
    }

    pub fn side(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}

/// Top-left corner of a pasted patch; `x` is the column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Location {
    pub x: usize,
    pub y: usize,
}

impl Location {
    pub fn window(&self, side: usize) -> Window {
        Window::square(self.x, self.y, side)
    }
}

/// Pastes `patch` with its top-left corner at `loc`.
pub fn apply_patch(x: &Tensor, patch: &PatchTensor, loc: Location) -> Result<Tensor> {
    let (c, h, w) = x.dims3().ok_or_else(|| Error::config("image must be rank 3"))?;
    let p = patch.side();
    if patch.channels() != c {
        return Err(Error::config(format!("patch has {} channels, image {c}", patch.channels())));
    }
    if loc.y + p > h || loc.x + p > w {
        return Err(Error::precondition(format!(
            "{p}x{p} patch at ({}, {}) leaves the {h}x{w} image",
            loc.x, loc.y
        )));
    }
    let mut out = x.clone();
    for ch in 0..c {
        for dy in 0..p {
            for dx in 0..p {
                out.set3(ch, loc.y + dy, loc.x + dx, patch.values.at3(ch, dy, dx));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LocationPolicy {
    Fixed(Location),
    /// Independent uniform location per image index, drawn from `seed`.
    PerImageRandom { seed: u64 },
}

impl LocationPolicy {
    /// Locations for images `0..n` of size `h × w`.
    pub fn locations(&self, n: usize, side: usize, h: usize, w: usize) -> Result<Vec<Location>> {
        if side > h || side > w {
            return Err(Error::config(format!("patch side {side} exceeds image {h}x{w}")));
        }
        match *self {
            LocationPolicy::Fixed(loc) => {
                if loc.y + side > h || loc.x + side > w {
                    return Err(Error::config(format!("fixed location ({}, {}) leaves the image", loc.x, loc.y)));
                }
                Ok(vec![loc; n])
            }
            LocationPolicy::PerImageRandom { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok((0..n)
                    .map(|_| Location {
                        x: rng.gen_range(0..=w - side),
                        y: rng.gen_range(0..=h - side),
                    })
                    .collect())
            }
        }
    }
}

/// Model the patch is optimised against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Victim {
    Vanilla,
    /// Pruned inference at this winner rate; the gate is held constant in
    /// the backward pass.
    Pruned { winner_rate: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub target: usize,
    pub steps: usize,
    pub step_size: f32,
    pub patch_side: usize,
    /// Penalty weight on first-layer activation energy.
    pub alpha: f32,
    pub location: LocationPolicy,
    pub victim: Victim,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            target: 0,
            steps: 200,
            step_size: 0.05,
            patch_side: 3,
            alpha: 0.0,
            location: LocationPolicy::PerImageRandom { seed: 0 },
            victim: Victim::Vanilla,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.target >= model.class_count() {
            return Err(Error::config(format!("target {} >= {} classes", self.target, model.class_count())));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("step size must be positive"));
        }
        if self.patch_side == 0 {
            return Err(Error::config("patch side must be >= 1"));
        }
        if !matches!(model.layers().first(), Some(Layer::Conv(_))) {
            return Err(Error::config("activation penalty needs a convolutional first layer"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchOutcome {
    pub patch: PatchTensor,
    /// Objective (mean `log Pr(target) − α·E`) after each step; entry 0 is
    /// the initial patch. Never decreases.
    pub objective: Vec<f32>,
}

/// First-layer positions whose receptive field intersects `window`.
pub fn footprint(model: &Model, window: &Window) -> Result<Vec<Coord>> {
    let Some(Layer::Conv(c)) = model.layers().first() else {
        return Err(Error::config("model must start with a convolution"));
    };
    let dims = model.input_dims();
    let map = ReceptiveMap::from_geoms(&[c.geom], (dims.height, dims.width))?;
    Ok(map.exclusion(&window.rect()).coords())
}

/// Channel-summed first-layer pre-activation, summed over `coords`.
fn energy_of(first: &Tensor, coords: &[Coord]) -> f32 {
    let (c, _, _) = first.dims3().expect("conv output");
    coords
        .iter()
        .map(|k| (0..c).map(|ch| first.at3(ch, k.row, k.col)).sum::<f32>())
        .sum()
}

/// Mean channel-summed first-layer pre-activation per footprint position.
pub fn patch_energy(model: &Model, x: &Tensor, window: &Window) -> Result<f32> {
    let coords = footprint(model, window)?;
    let first = model.forward_to(x, 0)?;
    Ok(energy_of(&first, &coords) / coords.len().max(1) as f32)
}

struct Job<'a> {
    image: &'a Tensor,
    loc: Location,
    coords: Vec<Coord>,
}

impl Job<'_> {
    /// Objective and, when requested, its gradient with respect to the patch.
    fn eval(&self, model: &Model, patch: &PatchTensor, cfg: &AttackConfig, sin: Option<&SinConfig>, grad: bool) -> Result<(f32, Option<Tensor>)> {
        let x = apply_patch(self.image, patch, self.loc)?;
        let trace = match sin {
            Some(s) => pruned_forward(model, &x, s, None, grad)?.0,
            None => model.forward(&x, grad)?,
        };
        // A gate on layer 0 makes the traced output post-gate; the penalty
        // always reads the raw convolution.
        let gated_first = sin.is_some() && model.superficial_layer() == 0;
        let first = if grad && !gated_first { trace.outputs[0].clone() } else { model.forward_to(&x, 0)? };
        let objective = log_prob(trace.logits.data(), cfg.target) - cfg.alpha * energy_of(&first, &self.coords);
        if !grad {
            return Ok((objective, None));
        }
        // Descend on the loss −objective.
        let (_, dlogits) = softmax_cross_entropy(trace.logits.data(), cfg.target);
        let mut inject = Tensor::zeros(first.shape());
        let channels = first.shape()[0];
        for k in &self.coords {
            for ch in 0..channels {
                inject.set3(ch, k.row, k.col, cfg.alpha);
            }
        }
        let g = model.backward_with(&trace, &dlogits, &[(0, &inject)])?;
        let p = patch.side();
        let mut out = Tensor::zeros(&[patch.channels(), p, p]);
        for ch in 0..patch.channels() {
            for dy in 0..p {
                for dx in 0..p {
                    out.set3(ch, dy, dx, g.input.at3(ch, self.loc.y + dy, self.loc.x + dx));
                }
            }
        }
        Ok((objective, Some(out)))
    }
}

fn jobs<'a>(model: &Model, images: &'a [Tensor], cfg: &AttackConfig) -> Result<Vec<Job<'a>>> {
    let dims = model.input_dims();
    let locs = cfg.location.locations(images.len(), cfg.patch_side, dims.height, dims.width)?;
    images
        .iter()
        .zip(locs)
        .map(|(image, loc)| {
            Ok(Job {
                image,
                loc,
                coords: footprint(model, &loc.window(cfg.patch_side))?,
            })
        })
        .collect()
}

fn batch_objective(model: &Model, jobs: &[Job], patch: &PatchTensor, cfg: &AttackConfig, sin: Option<&SinConfig>) -> Result<f32> {
    let parts = jobs
        .par_iter()
        .map(|j| j.eval(model, patch, cfg, sin, false).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.iter().sum::<f32>() / jobs.len() as f32)
}

/// Sign-gradient ascent on the shared patch, starting from uniform gray.
/// A step that lowers the batch objective is rejected and the step size
/// halved, so the recorded objective never decreases.
pub fn optimize_patch(model: &Model, images: &[Tensor], cfg: &AttackConfig) -> Result<PatchOutcome> {
    cfg.validate(model)?;
    if images.is_empty() {
        return Err(Error::precondition("patch optimisation needs at least one image"));
    }
    let sin = match cfg.victim {
        Victim::Vanilla => None,
        Victim::Pruned { winner_rate } => Some(SinConfig::for_model(model, winner_rate)?),
    };
    let jobs = jobs(model, images, cfg)?;
    let channels = model.input_dims().channels;
    let mut patch = PatchTensor::filled(channels, cfg.patch_side, 0.5)?;
    let mut current = batch_objective(model, &jobs, &patch, cfg, sin.as_ref())?;
    let check = |v: f32, step: usize| {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFiniteLoss { context: format!("patch optimisation step {step}") })
        }
    };
    check(current, 0)?;
    let mut objective = vec![current];
    let mut step_size = cfg.step_size;
    for step in 1..=cfg.steps {
        let grads = jobs
            .par_iter()
            .map(|j| j.eval(model, &patch, cfg, sin.as_ref(), true).map(|r| r.1.expect("gradient requested")))
            .collect::<Result<Vec<_>>>()?;
        let mut total = vec![0.0f32; patch.values.len()];
        for g in &grads {
            for (a, b) in total.iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        let mut candidate = patch.clone();
        for (v, g) in candidate.values.data_mut().iter_mut().zip(&total) {
            // `total` is the loss gradient; ascend the objective.
            let dir = if *g > 0.0 { -1.0 } else if *g < 0.0 { 1.0 } else { 0.0 };
            *v = (*v + step_size * dir).clamp(0.0, 1.0);
        }
        let value = batch_objective(model, &jobs, &candidate, cfg, sin.as_ref())?;
        check(value, step)?;
        if value >= current {
            patch = candidate;
            current = value;
        } else {
            step_size *= 0.5;
        }
        objective.push(current);
    }
    Ok(PatchOutcome { patch, objective })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    /// Fraction of patched images the vanilla model labels as the target.
    pub success_rate: f32,
    /// Fraction of patched images the defense returns as benign with the target label.
    pub defended_success_rate: f32,
    /// (patched images alerted with a suspect touching the patch + benign
    /// images not alerted) / (2 · images).
    pub detection_rate: f32,
    /// Mean of [`patch_energy`] over the patched images.
    pub mean_energy: f32,
}

fn alerted_on(outcome: &DetectionOutcome, patch: &Window) -> bool {
    match outcome {
        DetectionOutcome::Alert { suspects, .. } => suspects.iter().any(|s| s.intersection_area(patch) > 0),
        DetectionOutcome::Benign { .. } => false,
    }
}

/// Success of `patch` against `vanilla` and detection by `defense` over `data`.
/// Pass `None` for `defense` to skip detection (its fields are then zero).
pub fn evaluate_attack(
    vanilla: &Model,
    defense: Option<&Certifier>,
    data: &Dataset,
    patch: &PatchTensor,
    location: &LocationPolicy,
    target: usize,
) -> Result<AttackReport> {
    if data.is_empty() {
        return Err(Error::data("attack evaluation set is empty"));
    }
    let side = patch.side();
    let locs = location.locations(data.len(), side, data.dims.height, data.dims.width)?;
    let rows = data
        .images
        .par_iter()
        .zip(locs.par_iter())
        .map(|(x, &loc)| {
            let xp = apply_patch(x, patch, loc)?;
            let window = loc.window(side);
            let hit = vanilla.forward(&xp, false)?.label == target;
            let energy = patch_energy(vanilla, &xp, &window)?;
            let (fooled, caught, quiet) = match defense {
                Some(d) => {
                    let attacked = d.detect(&xp)?;
                    let benign = d.detect(x)?;
                    (attacked.label() == Some(target), alerted_on(&attacked, &window), !benign.is_alert())
                }
                None => (false, false, false),
            };
            Ok((hit, fooled, caught, quiet, energy))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = data.len() as f32;
    let frac = |f: &dyn Fn(&(bool, bool, bool, bool, f32)) -> bool| rows.iter().filter(|r| f(r)).count() as f32 / n;
    Ok(AttackReport {
        success_rate: frac(&|r| r.0),
        defended_success_rate: frac(&|r| r.1),
        detection_rate: (frac(&|r| r.2) + frac(&|r| r.3)) / 2.0,
        mean_energy: rows.iter().map(|r| r.4).sum::<f32>() / n,
    })
}
