//! Localisation statistics of superficial winners: mean-shift clusters,
//! cluster spread, and the accuracy effect of hiding the dominant cluster.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{apply_patch, LocationPolicy, PatchTensor};
use crate::certify::occlude;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::sin::{channel_sum, top_positions, Coord, ReceptiveMap, Rect};
use crate::tensor::Tensor;
use crate::windows::Window;

const SHIFT_TOLERANCE: f64 = 1e-3;
const MAX_SHIFT_ITERATIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn dist2(&self, o: &Point) -> f64 {
        (self.x - o.x).powi(2) + (self.y - o.y).powi(2)
    }
}

impl From<Coord> for Point {
    fn from(c: Coord) -> Self {
        Point::new(c.col as f64, c.row as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Mean of the member coordinates.
    pub center: Point,
    /// Root mean squared distance of members to `center`.
    pub deviation: f64,
    /// Indices into the clustered point list.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub clusters: Vec<Cluster>,
}

impl ClusterStats {
    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    /// Cluster with the most members; the earliest wins ties.
    pub fn largest(&self) -> &Cluster {
        let mut best = &self.clusters[0];
        for c in &self.clusters[1..] {
            if c.members.len() > best.members.len() {
                best = c;
            }
        }
        best
    }

    pub fn max_deviation(&self) -> f64 {
        self.clusters.iter().map(|c| c.deviation).fold(0.0, f64::max)
    }

    pub fn mean_deviation(&self) -> f64 {
        self.clusters.iter().map(|c| c.deviation).sum::<f64>() / self.clusters.len() as f64
    }
}

/// Centre and root-mean-square spread of `points`.
pub fn center_and_deviation(points: &[Point]) -> (Point, f64) {
    let n = points.len() as f64;
    let center = Point::new(
        points.iter().map(|p| p.x).sum::<f64>() / n,
        points.iter().map(|p| p.y).sum::<f64>() / n,
    );
    let msd = points.iter().map(|p| p.dist2(&center)).sum::<f64>() / n;
    (center, msd.sqrt())
}

/// Flat-kernel mean shift. Each point climbs to the mean of all points
/// within `bandwidth` until it moves less than 1e-3; modes closer than
/// `bandwidth / 2` to an earlier cluster's mode join that cluster.
pub fn mean_shift(points: &[Point], bandwidth: f64) -> Result<ClusterStats> {
    if points.is_empty() {
        return Err(Error::precondition("mean shift needs at least one point"));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::config(format!("bandwidth {bandwidth} must be positive")));
    }
    let bw2 = bandwidth * bandwidth;
    let modes: Vec<Point> = points
        .iter()
        .map(|&start| {
            let mut m = start;
            for _ in 0..MAX_SHIFT_ITERATIONS {
                let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
                for p in points.iter().filter(|p| p.dist2(&m) <= bw2) {
                    sx += p.x;
                    sy += p.y;
                    n += 1;
                }
                let next = Point::new(sx / n as f64, sy / n as f64);
                let shift = next.dist2(&m).sqrt();
                m = next;
                if shift < SHIFT_TOLERANCE {
                    break;
                }
            }
            m
        })
        .collect();

    let merge2 = (bandwidth / 2.0).powi(2);
    let mut anchors: Vec<Point> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, m) in modes.iter().enumerate() {
        match anchors.iter().position(|a| a.dist2(m) <= merge2) {
            Some(g) => groups[g].push(i),
            None => {
                anchors.push(*m);
                groups.push(vec![i]);
            }
        }
    }
    let clusters = groups
        .into_iter()
        .map(|members| {
            let pts: Vec<Point> = members.iter().map(|&i| points[i]).collect();
            let (center, deviation) = center_and_deviation(&pts);
            Cluster {
                center,
                deviation,
                members,
            }
        })
        .collect();
    Ok(ClusterStats { clusters })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub top_n: usize,
    pub bandwidth: f64,
}

impl AnalysisConfig {
    /// Bandwidth `0.1·min(H, W)` and `round(200·H·W / 112²)` winners for the
    /// model's superficial grid.
    pub fn for_model(model: &Model) -> Self {
        let (h, w) = model.superficial_extent();
        let top_n = ((200.0 * (h * w) as f64 / (112.0 * 112.0)).round() as usize).max(1);
        Self {
            top_n,
            bandwidth: 0.1 * h.min(w) as f64,
        }
    }
}

/// Top-`n` superficial positions of `x` and their clusters.
pub fn sin_stats(model: &Model, x: &Tensor, cfg: &AnalysisConfig) -> Result<(Vec<Coord>, ClusterStats)> {
    let (h, w) = model.superficial_extent();
    if cfg.top_n == 0 || cfg.top_n > h * w {
        return Err(Error::config(format!("top_n {} outside 1..={}", cfg.top_n, h * w)));
    }
    let act = model.forward_to(x, model.superficial_layer())?;
    let winners = top_positions(&channel_sum(&act)?, cfg.top_n, None);
    let points: Vec<Point> = winners.iter().copied().map(Point::from).collect();
    let stats = mean_shift(&points, cfg.bandwidth)?;
    Ok((winners, stats))
}

/// Input-space bounding box of the receptive fields of the largest cluster.
pub fn largest_cluster_box(fields: &ReceptiveMap, winners: &[Coord], stats: &ClusterStats) -> Option<Window> {
    let members = &stats.largest().members;
    let rects: Vec<Rect> = members.iter().map(|&i| fields.field(winners[i])).collect();
    let first = rects.first()?;
    let mut b = *first;
    for r in &rects[1..] {
        b.top = b.top.min(r.top);
        b.left = b.left.min(r.left);
        b.bottom = b.bottom.max(r.bottom);
        b.right = b.right.max(r.right);
    }
    Some(Window {
        y: b.top,
        x: b.left,
        height: b.height(),
        width: b.width(),
    })
}

/// One analysed image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub id: usize,
    pub is_patched: bool,
    pub cluster_count: usize,
    pub max_deviation: f64,
    pub mean_deviation: f64,
    pub pre_label: usize,
    pub post_label: usize,
    pub true_label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub benign_before: f32,
    pub benign_after: f32,
    pub patched_before: f32,
    pub patched_after: f32,
    /// Images left out because no cluster could be formed.
    pub skipped: usize,
    pub rows: Vec<StabilityRow>,
}

impl StabilityReport {
    /// Accuracy points lost on benign images, in percent.
    pub fn benign_drop(&self) -> f32 {
        100.0 * (self.benign_before - self.benign_after)
    }

    /// Accuracy points regained on patched images, in percent.
    pub fn patched_recovery(&self) -> f32 {
        100.0 * (self.patched_after - self.patched_before)
    }
}

fn analyse(model: &Model, fields: &ReceptiveMap, x: &Tensor, cfg: &AnalysisConfig) -> Result<Option<(ClusterStats, usize, usize)>> {
    let pre = model.forward(x, false)?.label;
    let (winners, stats) = sin_stats(model, x, cfg)?;
    let Some(window) = largest_cluster_box(fields, &winners, &stats) else {
        return Ok(None);
    };
    let post = model.forward(&occlude(x, &window), false)?.label;
    Ok(Some((stats, pre, post)))
}

/// Hides the bounding box of the largest superficial cluster on every
/// correctly classified image, with and without `patch`, and compares the
/// vanilla accuracy before and after.
pub fn stability_experiment(
    model: &Model,
    data: &Dataset,
    patch: &PatchTensor,
    location: &LocationPolicy,
    cfg: &AnalysisConfig,
) -> Result<StabilityReport> {
    let fields = ReceptiveMap::for_model(model);
    let locs = location.locations(data.len(), patch.side(), data.dims.height, data.dims.width)?;
    let per_image = data
        .images
        .par_iter()
        .zip(data.labels.par_iter())
        .zip(locs.par_iter())
        .enumerate()
        .map(|(id, ((x, &y), &loc))| {
            if model.forward(x, false)?.label != y {
                return Ok(Vec::new());
            }
            let patched = apply_patch(x, patch, loc)?;
            let mut rows = Vec::new();
            for (is_patched, img) in [(false, x), (true, &patched)] {
                if let Some((stats, pre, post)) = analyse(model, &fields, img, cfg)? {
                    rows.push(Some(StabilityRow {
                        id,
                        is_patched,
                        cluster_count: stats.cluster_count(),
                        max_deviation: stats.max_deviation(),
                        mean_deviation: stats.mean_deviation(),
                        pre_label: pre,
                        post_label: post,
                        true_label: y,
                    }));
                } else {
                    rows.push(None);
                }
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut skipped = 0;
    let mut rows = Vec::new();
    for r in per_image.into_iter().flatten() {
        match r {
            Some(row) => rows.push(row),
            None => skipped += 1,
        }
    }
    let acc = |patched: bool, post: bool| {
        let sel: Vec<_> = rows.iter().filter(|r| r.is_patched == patched).collect();
        if sel.is_empty() {
            return 0.0;
        }
        let hit = sel
            .iter()
            .filter(|r| (if post { r.post_label } else { r.pre_label }) == r.true_label)
            .count();
        hit as f32 / sel.len() as f32
    };
    Ok(StabilityReport {
        benign_before: acc(false, false),
        benign_after: acc(false, true),
        patched_before: acc(true, false),
        patched_after: acc(true, true),
        skipped,
        rows,
    })
}

/// CSV with one row per analysed image.
pub fn write_stability_csv<W: std::io::Write>(rows: &[StabilityRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "is_patched", "cluster_count", "max_s_c", "mean_s_c", "pre_label", "post_label"])
        .map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.id.to_string(),
            r.is_patched.to_string(),
            r.cluster_count.to_string(),
            format!("{:.6}", r.max_deviation),
            format!("{:.6}", r.mean_deviation),
            r.pre_label.to_string(),
            r.post_label.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("{other:?}")),
    }
}
