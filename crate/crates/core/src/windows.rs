//! Sliding occluders: generation, filtering against the SIN region, and
//! greedy merging of heavily overlapping windows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sin::{InputRegion, Rect};

/// Axis-aligned occluder. `x` is the column and `y` the row of the top-left
/// pixel. Generated windows are square; merged windows may not be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Window {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn square(x: usize, y: usize, side: usize) -> Self {
        Self {
            y,
            x,
            height: side,
            width: side,
        }
    }

    pub fn rect(&self) -> Rect {
        Rect {
            top: self.y,
            left: self.x,
            bottom: self.y + self.height - 1,
            right: self.x + self.width - 1,
        }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, other: &Window) -> bool {
        self.rect().contains(&other.rect())
    }

    pub fn intersection_area(&self, other: &Window) -> usize {
        let top = self.y.max(other.y);
        let left = self.x.max(other.x);
        let bottom = (self.y + self.height).min(other.y + other.height);
        let right = (self.x + self.width).min(other.x + other.width);
        bottom.saturating_sub(top) * right.saturating_sub(left)
    }

    pub fn bounding_box(&self, other: &Window) -> Window {
        let y = self.y.min(other.y);
        let x = self.x.min(other.x);
        let bottom = (self.y + self.height).max(other.y + other.height);
        let right = (self.x + self.width).max(other.x + other.width);
        Window {
            y,
            x,
            height: bottom - y,
            width: right - x,
        }
    }

    /// Whether the pixel sets touch or overlap under 8-connectivity.
    pub fn adjacent(&self, other: &Window) -> bool {
        self.y <= other.y + other.height
            && other.y <= self.y + self.height
            && self.x <= other.x + other.width
            && other.x <= self.x + self.width
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.width > 0 && self.height > 0 && self.y + self.height <= height && self.x + self.width <= width
    }
}

/// Occluder side `p + r − 1` for patch side `p` and redundancy step `r`.
pub fn window_side(patch: usize, step: usize) -> Result<usize> {
    if patch == 0 || step == 0 {
        return Err(Error::config(format!("patch side {patch} and step {step} must be >= 1")));
    }
    Ok(patch + step - 1)
}

/// Every `k_w × k_w` window at stride 1 lying inside the image, row-major.
pub fn generate_windows(height: usize, width: usize, patch: usize, step: usize) -> Result<Vec<Window>> {
    let side = window_side(patch, step)?;
    if side > height.min(width) {
        return Err(Error::config(format!(
            "window side {side} (p={patch}, r={step}) exceeds image {height}x{width}"
        )));
    }
    Ok((0..=height - side)
        .flat_map(|y| (0..=width - side).map(move |x| Window::square(x, y, side)))
        .collect())
}

/// Windows intersecting `region`, in their original order.
pub fn filter_windows(windows: &[Window], region: &InputRegion) -> Vec<Window> {
    windows
        .iter()
        .filter(|w| region.intersects(&w.rect()))
        .copied()
        .collect()
}

/// How the overlap between two windows is normalised before comparing to τ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OverlapRatio {
    /// Intersection over union.
    #[default]
    Iou,
    /// Intersection over the smaller area. Absorbs any window mostly inside a
    /// growing box, so stride-1 grids collapse into very few boxes.
    MinArea,
}

impl OverlapRatio {
    pub fn ratio(self, a: &Window, b: &Window) -> f64 {
        let inter = a.intersection_area(b) as f64;
        let denom = match self {
            OverlapRatio::Iou => (a.area() + b.area()) as f64 - inter,
            OverlapRatio::MinArea => a.area().min(b.area()) as f64,
        };
        inter / denom
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub kept: Vec<Window>,
    pub merged: Vec<Window>,
    /// `cover_map[i]` indexes the merged window containing `kept[i]`.
    pub cover_map: Vec<usize>,
}

impl WindowPlan {
    /// Merged windows intersecting `region`.
    pub fn candidates(&self, region: &InputRegion) -> Vec<Window> {
        filter_windows(&self.merged, region)
    }
}

/// Greedy merge: repeatedly replace the first pair (in list order) whose
/// overlap ratio is at least `tau` by its bounding box, until no pair
/// qualifies. The box takes the earlier element's slot.
pub fn merge_windows(windows: &[Window], tau: f64) -> Result<WindowPlan> {
    merge_windows_with(windows, tau, OverlapRatio::default())
}

pub fn merge_windows_with(windows: &[Window], tau: f64, measure: OverlapRatio) -> Result<WindowPlan> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::config(format!("overlap threshold {tau} outside [0, 1]")));
    }
    let mut boxes: Vec<Window> = windows.to_vec();
    let mut members: Vec<Vec<usize>> = (0..windows.len()).map(|i| vec![i]).collect();
    let qualifies = |a: &Window, b: &Window| measure.ratio(a, b) >= tau;

    // Invariant between merges: no pair (a, b) with a < start qualifies,
    // except possibly pairs involving the box that was just rebuilt.
    let mut start = 0;
    let mut fresh: Option<usize> = None;
    loop {
        let mut found = None;
        if let Some(i) = fresh.take() {
            found = (0..i).find(|&a| qualifies(&boxes[a], &boxes[i])).map(|a| (a, i));
        }
        if found.is_none() {
            'scan: for a in start..boxes.len() {
                for b in a + 1..boxes.len() {
                    if qualifies(&boxes[a], &boxes[b]) {
                        found = Some((a, b));
                        break 'scan;
                    }
                }
            }
        }
        let Some((a, b)) = found else { break };
        boxes[a] = boxes[a].bounding_box(&boxes[b]);
        boxes.remove(b);
        let moved = members.remove(b);
        members[a].extend(moved);
        start = a;
        fresh = Some(a);
    }

    let mut cover_map = vec![0; windows.len()];
    for (m, group) in members.iter().enumerate() {
        for &i in group {
            cover_map[i] = m;
        }
    }
    Ok(WindowPlan {
        kept: windows.to_vec(),
        merged: boxes,
        cover_map,
    })
}

/// Merge plan over the full stride-1 window set of an image. Built from
/// geometry alone, so it is identical for every image of that size.
pub fn global_plan(height: usize, width: usize, patch: usize, step: usize, tau: f64) -> Result<WindowPlan> {
    merge_windows(&generate_windows(height, width, patch, step)?, tau)
}
