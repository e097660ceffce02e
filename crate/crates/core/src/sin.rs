//! Superficial important neurons (SINs): top-k selection over the
//! channel-summed activation map of the superficial layer, and the geometry
//! that ties those positions back to input pixels.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, LayerGeom, Model};
use crate::tensor::Tensor;

/// Position in a layer's spatial grid. Orders lexicographically (row first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coord {
    pub row: usize,
    pub col: usize,
}

impl Coord {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Inclusive pixel rectangle `[top, bottom] × [left, right]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Rect {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.top <= other.bottom
            && other.top <= self.bottom
            && self.left <= other.right
            && other.left <= self.right
    }

    pub fn contains(&self, other: &Rect) -> bool {
        self.top <= other.top
            && self.left <= other.left
            && other.bottom <= self.bottom
            && other.right <= self.right
    }

    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        (self.top..=self.bottom).contains(&row) && (self.left..=self.right).contains(&col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinConfig {
    /// Fraction of superficial positions kept, in `(0, 1]`.
    pub winner_rate: f32,
    /// Index of the superficial layer; must match the model's.
    pub layer: usize,
}

impl SinConfig {
    pub fn new(winner_rate: f32, layer: usize) -> Result<Self> {
        let cfg = Self { winner_rate, layer };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Config targeting the model's own superficial layer.
    pub fn for_model(model: &Model, winner_rate: f32) -> Result<Self> {
        Self::new(winner_rate, model.superficial_layer())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.winner_rate > 0.0 && self.winner_rate <= 1.0) {
            return Err(Error::config(format!(
                "winner rate {} outside (0, 1]",
                self.winner_rate
            )));
        }
        Ok(())
    }

    fn check(&self, model: &Model) -> Result<()> {
        self.validate()?;
        if self.layer != model.superficial_layer() {
            return Err(Error::config(format!(
                "SIN layer {} differs from the model's superficial layer {}",
                self.layer,
                model.superficial_layer()
            )));
        }
        Ok(())
    }
}

/// Number of winners kept out of `positions`: `ceil(rate · positions)`.
///
/// The product is nudged down by 1e-6 before rounding up so that rates that
/// are exact in decimal (0.3 · 10) are not pushed over by binary rounding.
pub fn winner_count(rate: f32, positions: usize) -> usize {
    let raw = f64::from(rate) * positions as f64;
    ((raw - 1e-6).ceil().max(1.0) as usize).min(positions)
}

/// Binary grid of winners at the superficial layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SinMask {
    height: usize,
    width: usize,
    grid: Vec<bool>,
    winners: Vec<Coord>,
}

impl SinMask {
    pub fn from_winners(height: usize, width: usize, mut winners: Vec<Coord>) -> Self {
        winners.sort_unstable();
        winners.dedup();
        let mut grid = vec![false; height * width];
        for c in &winners {
            grid[c.row * width + c.col] = true;
        }
        Self {
            height,
            width,
            grid,
            winners,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        let winners = (0..height)
            .flat_map(|r| (0..width).map(move |c| Coord::new(r, c)))
            .collect();
        Self::from_winners(height, width, winners)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Winner coordinates in lexicographic order.
    pub fn winners(&self) -> &[Coord] {
        &self.winners
    }

    pub fn grid(&self) -> &[bool] {
        &self.grid
    }

    pub fn is_winner(&self, c: Coord) -> bool {
        self.grid[c.row * self.width + c.col]
    }

    pub fn popcount(&self) -> usize {
        self.winners.len()
    }

    /// The mask as a 0/1 multiplier plane.
    pub fn gate(&self) -> Vec<f32> {
        self.grid.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Superficial positions whose receptive field touches a given input window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExclusionSet {
    height: usize,
    width: usize,
    excluded: Vec<bool>,
}

impl ExclusionSet {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            excluded: vec![false; height * width],
        }
    }

    pub fn from_coords(height: usize, width: usize, coords: &[Coord]) -> Self {
        let mut set = Self::empty(height, width);
        for c in coords {
            set.excluded[c.row * width + c.col] = true;
        }
        set
    }

    pub fn contains(&self, c: Coord) -> bool {
        self.excluded[c.row * self.width + c.col]
    }

    pub fn len(&self) -> usize {
        self.excluded.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self) -> Vec<Coord> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| Coord::new(r, c)))
            .filter(|&c| self.contains(c))
            .collect()
    }

    pub fn union_with(&mut self, other: &ExclusionSet) {
        for (a, b) in self.excluded.iter_mut().zip(&other.excluded) {
            *a |= b;
        }
    }

    pub(crate) fn flags(&self) -> &[bool] {
        &self.excluded
    }
}

/// Binary grid over input pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputRegion {
    height: usize,
    width: usize,
    grid: Vec<bool>,
}

impl InputRegion {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            grid: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            grid: vec![true; height * width],
        }
    }

    pub fn from_grid(height: usize, width: usize, grid: Vec<bool>) -> Self {
        assert_eq!(grid.len(), height * width);
        Self { height, width, grid }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.grid[row * self.width + col]
    }

    pub fn grid(&self) -> &[bool] {
        &self.grid
    }

    pub fn popcount(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    pub fn fill(&mut self, r: &Rect) {
        for row in r.top..=r.bottom {
            self.grid[row * self.width + r.left..=row * self.width + r.right].fill(true);
        }
    }

    /// Whether any pixel of `r` (clipped to the region) is set.
    pub fn intersects(&self, r: &Rect) -> bool {
        let bottom = r.bottom.min(self.height.saturating_sub(1));
        let right = r.right.min(self.width.saturating_sub(1));
        (r.top..=bottom).any(|row| {
            r.left <= right && self.grid[row * self.width + r.left..=row * self.width + right].contains(&true)
        })
    }
}

/// `N^s = Σ_i N_i^s`: sum of a rank-3 activation over its channel axis.
pub fn channel_sum(activation: &Tensor) -> Result<Tensor> {
    let (c, h, w) = activation
        .dims3()
        .ok_or_else(|| Error::config(format!("channel sum needs a rank-3 map, got {:?}", activation.shape())))?;
    let mut out = vec![0.0f32; h * w];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&activation.data()[ch * h * w..(ch + 1) * h * w]) {
            *o += v;
        }
    }
    Ok(Tensor::from_parts(vec![h, w], out))
}

/// Channel sum of layer `layer`'s output in a traced forward pass.
pub fn channel_sum_at(trace: &ForwardTrace, layer: usize) -> Result<Tensor> {
    let out = trace
        .outputs
        .get(layer)
        .ok_or_else(|| Error::State(format!("trace has no output for layer {layer}")))?;
    channel_sum(out)
}

/// Top-`ceil(rate·H·W)` positions of `map` outside `exclusion`.
///
/// Ranking is by value descending, then coordinate ascending, so the winner
/// set is unique. When fewer candidates remain than the target count, all of
/// them win.
pub fn compute_sin_mask(map: &Tensor, winner_rate: f32, exclusion: Option<&ExclusionSet>) -> SinMask {
    let [h, w] = map.shape() else {
        panic!("SIN map must be rank 2, got {:?}", map.shape());
    };
    let (h, w) = (*h, *w);
    let winners = top_positions(map, winner_count(winner_rate, h * w), exclusion);
    SinMask::from_winners(h, w, winners)
}

/// The `count` highest positions of a rank-2 `map` outside `exclusion`, in
/// row-major order. Same ranking as [`compute_sin_mask`].
pub fn top_positions(map: &Tensor, count: usize, exclusion: Option<&ExclusionSet>) -> Vec<Coord> {
    let [h, w] = map.shape() else {
        panic!("SIN map must be rank 2, got {:?}", map.shape());
    };
    let (h, w) = (*h, *w);
    let values = map.data();
    let mut candidates: Vec<usize> = match exclusion {
        Some(ex) => (0..h * w).filter(|&i| !ex.flags()[i]).collect(),
        None => (0..h * w).collect(),
    };
    let rank = |a: &usize, b: &usize| -> Ordering { values[*b].total_cmp(&values[*a]).then(a.cmp(b)) };
    if count == 0 {
        candidates.clear();
    } else if candidates.len() > count {
        candidates.select_nth_unstable_by(count - 1, rank);
        candidates.truncate(count);
    }
    candidates.sort_unstable();
    candidates.into_iter().map(|i| Coord::new(i / w, i % w)).collect()
}

/// Spatial extents of each layer input, computed forward from the image size.
fn chain_extents(geoms: &[LayerGeom], input: (usize, usize)) -> Result<Vec<(usize, usize)>> {
    let mut ext = input;
    let mut out = Vec::with_capacity(geoms.len());
    for g in geoms {
        g.validate()?;
        out.push(ext);
        ext = (
            g.output_extent(ext.0).ok_or_else(|| Error::config("kernel exceeds layer extent"))?,
            g.output_extent(ext.1).ok_or_else(|| Error::config("kernel exceeds layer extent"))?,
        );
    }
    Ok(out)
}

fn map_back(coord: Coord, chain: &[(LayerGeom, (usize, usize))]) -> Rect {
    let (mut top, mut left, mut bottom, mut right) =
        (coord.row as i64, coord.col as i64, coord.row as i64, coord.col as i64);
    for (g, (h, w)) in chain.iter().rev() {
        let (k, s, p) = (g.kernel as i64, g.stride as i64, g.padding as i64);
        top = (top * s - p).max(0);
        left = (left * s - p).max(0);
        bottom = (bottom * s - p + k - 1).min(*h as i64 - 1);
        right = (right * s - p + k - 1).min(*w as i64 - 1);
    }
    Rect {
        top: top as usize,
        left: left as usize,
        bottom: bottom as usize,
        right: right as usize,
    }
}

/// Input rectangle that can influence `coord` at the last layer of `geoms`.
///
/// Each layer maps `(c·s − p, c·s − p + k − 1)` back onto its input and the
/// result is clipped to that input's extent before moving one layer further
/// back, so taps that only ever read padding are not counted.
pub fn receptive_field(coord: Coord, geoms: &[LayerGeom], input: (usize, usize)) -> Result<Rect> {
    let extents = chain_extents(geoms, input)?;
    let chain: Vec<_> = geoms.iter().copied().zip(extents).collect();
    Ok(map_back(coord, &chain))
}

/// Receptive field of every superficial position of a model, precomputed.
#[derive(Debug, Clone)]
pub struct ReceptiveMap {
    height: usize,
    width: usize,
    image: (usize, usize),
    fields: Vec<Rect>,
}

impl ReceptiveMap {
    pub fn for_model(model: &Model) -> Self {
        let chain = model.spatial_chain(model.superficial_layer());
        let (height, width) = model.superficial_extent();
        let dims = model.input_dims();
        Self::from_chain(&chain, (height, width), (dims.height, dims.width))
    }

    pub fn from_geoms(geoms: &[LayerGeom], input: (usize, usize)) -> Result<Self> {
        let extents = chain_extents(geoms, input)?;
        let out = match (geoms.last(), extents.last()) {
            (Some(g), Some(&(h, w))) => (g.output_extent(h).unwrap(), g.output_extent(w).unwrap()),
            _ => input,
        };
        let chain: Vec<_> = geoms.iter().copied().zip(extents).collect();
        Ok(Self::from_chain(&chain, out, input))
    }

    fn from_chain(chain: &[(LayerGeom, (usize, usize))], extent: (usize, usize), image: (usize, usize)) -> Self {
        let fields = (0..extent.0)
            .flat_map(|r| (0..extent.1).map(move |c| Coord::new(r, c)))
            .map(|c| map_back(c, chain))
            .collect();
        Self {
            height: extent.0,
            width: extent.1,
            image,
            fields,
        }
    }

    /// Superficial grid extent `(height, width)`.
    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn image_extent(&self) -> (usize, usize) {
        self.image
    }

    pub fn field(&self, c: Coord) -> Rect {
        self.fields[c.row * self.width + c.col]
    }

    /// `{ c : field(c) ∩ window ≠ ∅ }`; depends on geometry only.
    pub fn exclusion(&self, window: &Rect) -> ExclusionSet {
        ExclusionSet {
            height: self.height,
            width: self.width,
            excluded: self.fields.iter().map(|f| f.intersects(window)).collect(),
        }
    }

    /// Union of the receptive fields of all winners.
    pub fn backmap(&self, mask: &SinMask) -> InputRegion {
        let mut region = InputRegion::empty(self.image.0, self.image.1);
        for &c in mask.winners() {
            region.fill(&self.field(c));
        }
        region
    }
}

/// Input region `R` covered by the receptive fields of a mask's winners.
pub fn backmap_region(mask: &SinMask, geoms: &[LayerGeom], input: (usize, usize)) -> Result<InputRegion> {
    Ok(ReceptiveMap::from_geoms(geoms, input)?.backmap(mask))
}

/// Forward pass keeping only the top-k superficial positions (computed on
/// this input, skipping `exclusion`), returning the mask that was applied.
pub fn pruned_forward(
    model: &Model,
    x: &Tensor,
    cfg: &SinConfig,
    exclusion: Option<&ExclusionSet>,
    trace: bool,
) -> Result<(ForwardTrace, SinMask)> {
    cfg.check(model)?;
    let mut used = None;
    let out = model.forward_gated(x, trace, |act| {
        let map = channel_sum(act).expect("superficial layer is spatial");
        let mask = compute_sin_mask(&map, cfg.winner_rate, exclusion);
        let gate = mask.gate();
        used = Some(mask);
        gate
    })?;
    Ok((out, used.expect("gate invoked")))
}

/// Forward pass with a fixed, externally supplied superficial mask.
pub fn forward_with_mask(model: &Model, x: &Tensor, mask: &SinMask, trace: bool) -> Result<ForwardTrace> {
    let (h, w) = model.superficial_extent();
    if mask.height() != h || mask.width() != w {
        return Err(Error::config(format!(
            "mask is {}x{}, superficial layer is {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    model.forward_gated(x, trace, |_| mask.gate())
}
