//! Shared fixtures and independent reference implementations for the
//! integration tests. The reference forward pass is written with plain
//! nested loops in f64 and shares no code with the library.

#![allow(dead_code)]

use patchcert::model::{Conv, Dense, InputDims, Layer, LayerGeom, Model};
use patchcert::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rank-3 activation in f64, `[c][y][x]`.
pub type Map = Vec<Vec<Vec<f64>>>;

pub fn to_map(t: &Tensor) -> Map {
    let (c, h, w) = t.dims3().expect("rank 3");
    (0..c)
        .map(|ch| (0..h).map(|y| (0..w).map(|x| f64::from(t.at3(ch, y, x))).collect()).collect())
        .collect()
}

fn out_extent(n: usize, g: &LayerGeom) -> usize {
    (n + 2 * g.padding - g.kernel) / g.stride + 1
}

pub fn ref_conv(input: &Map, weight: &[f64], bias: &[f64], cout: usize, g: &LayerGeom) -> Map {
    let cin = input.len();
    let (h, w) = (input[0].len(), input[0][0].len());
    let (oh, ow) = (out_extent(h, g), out_extent(w, g));
    let k = g.kernel;
    let mut out = vec![vec![vec![0.0; ow]; oh]; cout];
    for o in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for i in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += weight[((o * cin + i) * k + ky) * k + kx] * input[i][iy as usize][ix as usize];
                        }
                    }
                }
                out[o][oy][ox] = acc;
            }
        }
    }
    out
}

pub fn ref_maxpool(input: &Map, g: &LayerGeom) -> Map {
    let (h, w) = (input[0].len(), input[0][0].len());
    let (oh, ow) = (out_extent(h, g), out_extent(w, g));
    input
        .iter()
        .map(|plane| {
            (0..oh)
                .map(|oy| {
                    (0..ow)
                        .map(|ox| {
                            let mut best = f64::NEG_INFINITY;
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                        best = best.max(plane[iy as usize][ix as usize]);
                                    }
                                }
                            }
                            best
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Parameters of a model in f64, one entry per layer (empty for
/// parameter-free layers): `(weight, bias)`.
pub type Params = Vec<(Vec<f64>, Vec<f64>)>;

pub fn params_of(model: &Model) -> Params {
    model
        .layers()
        .iter()
        .map(|l| match l.params() {
            Some((w, b)) => (
                w.data().iter().map(|&v| f64::from(v)).collect(),
                b.data().iter().map(|&v| f64::from(v)).collect(),
            ),
            None => (Vec::new(), Vec::new()),
        })
        .collect()
}

pub enum Act {
    Map(Map),
    Flat(Vec<f64>),
}

/// Logits of `model`'s architecture evaluated with `params` in f64. An
/// optional spatial gate multiplies the output of layer `gate.0`.
pub fn ref_forward(model: &Model, params: &Params, x: &Tensor, gate: Option<(usize, &[bool])>) -> Vec<f64> {
    let mut act = Act::Map(to_map(x));
    for (i, layer) in model.layers().iter().enumerate() {
        act = match (layer, act) {
            (Layer::Conv(c), Act::Map(m)) => Act::Map(ref_conv(&m, &params[i].0, &params[i].1, c.out_channels(), &c.geom)),
            (Layer::Relu, Act::Map(m)) => Act::Map(
                m.into_iter()
                    .map(|p| p.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect())
                    .collect(),
            ),
            (Layer::Relu, Act::Flat(v)) => Act::Flat(v.into_iter().map(|v| v.max(0.0)).collect()),
            (Layer::MaxPool(g), Act::Map(m)) => Act::Map(ref_maxpool(&m, g)),
            (Layer::GlobalAvgPool, Act::Map(m)) => Act::Flat(
                m.iter()
                    .map(|p| p.iter().flatten().sum::<f64>() / (p.len() * p[0].len()) as f64)
                    .collect(),
            ),
            (Layer::Dense(_), a) => {
                let flat: Vec<f64> = match a {
                    Act::Flat(v) => v,
                    Act::Map(m) => m.into_iter().flatten().flatten().collect(),
                };
                let (w, b) = &params[i];
                let out = b.len();
                let fan_in = flat.len();
                Act::Flat((0..out).map(|o| b[o] + (0..fan_in).map(|j| w[o * fan_in + j] * flat[j]).sum::<f64>()).collect())
            }
            _ => panic!("unsupported layer order in reference"),
        };
        if let Some((s, mask)) = gate {
            if s == i {
                if let Act::Map(m) = &mut act {
                    let w = m[0][0].len();
                    for plane in m.iter_mut() {
                        for (y, row) in plane.iter_mut().enumerate() {
                            for (xx, v) in row.iter_mut().enumerate() {
                                if !mask[y * w + xx] {
                                    *v = 0.0;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    match act {
        Act::Flat(v) => v,
        Act::Map(_) => panic!("model does not end in a flat layer"),
    }
}

pub fn ref_cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn random_conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, geom: LayerGeom) -> Layer {
    let k = geom.kernel;
    let scale = (3.0 / (cin * k * k) as f32).sqrt();
    Layer::Conv(Conv {
        geom,
        weight: random_tensor(rng, vec![cout, cin, k, k], scale),
        bias: random_tensor(rng, vec![cout], 0.1),
    })
}

pub fn random_dense(rng: &mut ChaCha8Rng, fan_in: usize, out: usize) -> Layer {
    let scale = (3.0 / fan_in as f32).sqrt();
    Layer::Dense(Dense {
        weight: random_tensor(rng, vec![out, fan_in], scale),
        bias: random_tensor(rng, vec![out], 0.1),
    })
}

/// Random plain CNN on `c × h × w` inputs with random first-conv geometry,
/// superficial layer at the first ReLU (index 1) or conv (index 0).
pub fn tiny_model(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, classes: usize) -> Model {
    let k = rng.gen_range(1..=3);
    let g0 = LayerGeom::new(k, 1, rng.gen_range(0..k)).unwrap();
    let c1 = rng.gen_range(1..=3);
    let c2 = rng.gen_range(1..=3);
    let layers = vec![
        random_conv(rng, c, c1, g0),
        Layer::Relu,
        Layer::MaxPool(LayerGeom::new(2, 2, 0).unwrap()),
        random_conv(rng, c1, c2, LayerGeom::new(3, 1, 1).unwrap()),
        Layer::Relu,
        Layer::GlobalAvgPool,
        random_dense(rng, c2, classes),
    ];
    let s = rng.gen_range(0..=1);
    Model::new(layers, InputDims::new(c, h, w), classes, s).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random single-channel two-layer spatial stack (conv or max-pool per
/// layer) with stride never exceeding kernel and padding below kernel, so
/// every layer reads a contiguous input span. Returns a model whose
/// superficial layer is the second of the two.
pub fn two_layer_geometry(rng: &mut ChaCha8Rng) -> Model {
    loop {
        let h = rng.gen_range(5..=11);
        let w = rng.gen_range(5..=11);
        let mut layers = Vec::new();
        for _ in 0..2 {
            let k = rng.gen_range(1..=3);
            let s = rng.gen_range(1..=k);
            let p = rng.gen_range(0..k);
            let g = LayerGeom::new(k, s, p).unwrap();
            if rng.gen_bool(0.7) {
                let weight = (0..k * k).map(|_| rng.gen_range(0.1f32..1.0)).collect();
                layers.push(Layer::Conv(Conv {
                    geom: g,
                    weight: Tensor::new(vec![1, 1, k, k], weight).unwrap(),
                    bias: Tensor::new(vec![1], vec![0.0]).unwrap(),
                }));
            } else {
                layers.push(Layer::MaxPool(g));
            }
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(random_dense(rng, 1, 2));
        if let Ok(m) = Model::new(layers, InputDims::new(1, h, w), 2, 1) {
            return m;
        }
    }
}

/// `oracle[pos][pixel]`: whether raising `pixel` by a large amount changes
/// the superficial output at `pos`. Weights are positive, so any tap that
/// reads the pixel registers.
pub fn influence_oracle(model: &Model) -> Vec<Vec<bool>> {
    let dims = model.input_dims();
    let (h, w) = (dims.height, dims.width);
    let s = model.superficial_layer();
    let base_x = Tensor::filled(&[1, h, w], 0.5);
    let base = model.forward_to(&base_x, s).unwrap();
    let n = base.len();
    let mut oracle = vec![vec![false; h * w]; n];
    for pix in 0..h * w {
        let mut x = base_x.clone();
        x.data_mut()[pix] += 100.0;
        let out = model.forward_to(&x, s).unwrap();
        for (pos, (a, b)) in out.data().iter().zip(base.data()).enumerate() {
            if a != b {
                oracle[pos][pix] = true;
            }
        }
    }
    oracle
}

use patchcert::certify::occlude;
use patchcert::sin::{pruned_forward, ReceptiveMap};
use patchcert::windows::{generate_windows, merge_windows};
use patchcert::{Certifier, DefenseConfig, SinConfig, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trial {
    Pass,
    /// The drawn instance had nothing to check (e.g. `R` covers the image).
    Vacuous,
}

pub type TrialResult = std::result::Result<Trial, String>;

/// A window disjoint from the SIN region leaves the pruned logits
/// bit-identical once it is occluded and its footprint excluded.
pub fn outside_region_trial(seed: u64) -> TrialResult {
    let mut r = rng(seed);
    let c = r.gen_range(1..=2);
    let (h, w) = (r.gen_range(8..=14), r.gen_range(8..=14));
    let model = tiny_model(&mut r, c, h, w, 3);
    let x = random_image(&mut r, c, h, w);
    let cfg = SinConfig::for_model(&model, r.gen_range(0.02f32..0.3)).unwrap();
    let (clean, mask) = pruned_forward(&model, &x, &cfg, None, false).unwrap();
    let fields = ReceptiveMap::for_model(&model);
    let region = fields.backmap(&mask);
    let side = r.gen_range(1..=4);
    let outside: Vec<Window> = generate_windows(h, w, side, 1)
        .unwrap()
        .into_iter()
        .filter(|win| !region.intersects(&win.rect()))
        .collect();
    if outside.is_empty() {
        return Ok(Trial::Vacuous);
    }
    let win = outside[r.gen_range(0..outside.len())];
    let ex = fields.exclusion(&win.rect());
    let (occl, occl_mask) = pruned_forward(&model, &occlude(&x, &win), &cfg, Some(&ex), false).unwrap();
    if occl_mask != mask {
        return Err(format!("seed {seed}: mask changed for {win:?}"));
    }
    if occl.logits.data() != clean.logits.data() {
        return Err(format!("seed {seed}: logits changed for {win:?}"));
    }
    Ok(Trial::Pass)
}

/// Two images that differ only inside a patch get the same occluded label
/// from every merged occluder containing the patch, on both the honest
/// and the cached evaluation path.
pub fn locality_trial(seed: u64) -> TrialResult {
    let mut r = rng(seed);
    let c = r.gen_range(1..=2);
    let (h, w) = (r.gen_range(8..=12), r.gen_range(8..=12));
    let model = tiny_model(&mut r, c, h, w, 3);
    let cfg = DefenseConfig {
        winner_rate: r.gen_range(0.05f32..0.5),
        patch: r.gen_range(1..=3),
        step: r.gen_range(1..=3),
        tau: r.gen_range(0.3..=1.0),
        alert_cluster_min: 1,
    };
    let cert = Certifier::new(&model, cfg).unwrap();
    let x = random_image(&mut r, c, h, w);
    let p = cfg.patch;
    let (px, py) = (r.gen_range(0..=w - p), r.gen_range(0..=h - p));
    let mut xp = x.clone();
    for ch in 0..c {
        for y in py..py + p {
            for xx in px..px + p {
                xp.set3(ch, y, xx, r.gen());
            }
        }
    }
    let patch = Window::square(px, py, p);
    let containing: Vec<Window> = cert.plan().merged.iter().copied().filter(|m| m.contains(&patch)).collect();
    if containing.is_empty() {
        return Err(format!("seed {seed}: no merged occluder contains {patch:?}"));
    }
    let (map_a, map_b) = (cert.occlusion_map(&x).unwrap(), cert.occlusion_map(&xp).unwrap());
    for m in &containing {
        let (a, b) = (cert.occluded_predict(&x, m).unwrap(), cert.occluded_predict(&xp, m).unwrap());
        if a != b {
            return Err(format!("seed {seed}: {m:?} predicts {a} vs {b}"));
        }
        for map in [&map_a, &map_b] {
            if let Some(&(_, l)) = map.entries.iter().find(|(win, _)| win == m) {
                if l != a {
                    return Err(format!("seed {seed}: cached label {l} differs from honest {a} on {m:?}"));
                }
            }
        }
    }
    Ok(Trial::Pass)
}

/// An interior p×p patch is fully covered by exactly r×r stride-1
/// occluders, and merging never loses coverage.
pub fn coverage_trial(seed: u64) -> TrialResult {
    let mut r = rng(seed);
    let (h, w) = (r.gen_range(6..=20), r.gen_range(6..=20));
    let p = r.gen_range(1..=4);
    let step = r.gen_range(1..=4);
    let side = p + step - 1;
    if side + 2 * (step - 1) > h.min(w) {
        return Ok(Trial::Vacuous);
    }
    let windows = generate_windows(h, w, p, step).unwrap();
    let px = r.gen_range(step - 1..=w - p - step + 1);
    let py = r.gen_range(step - 1..=h - p - step + 1);
    let patch = Window::square(px, py, p);
    let covering = windows.iter().filter(|win| win.contains(&patch)).count();
    if covering != step * step {
        return Err(format!("seed {seed}: {covering} occluders cover {patch:?}, expected {}", step * step));
    }
    let plan = merge_windows(&windows, r.gen_range(0.0..=1.0)).unwrap();
    for (i, k) in plan.kept.iter().enumerate() {
        if !plan.merged[plan.cover_map[i]].contains(k) {
            return Err(format!("seed {seed}: merged box does not contain {k:?}"));
        }
    }
    if !plan.merged.iter().any(|m| m.contains(&patch)) {
        return Err(format!("seed {seed}: merged plan lost {patch:?}"));
    }
    Ok(Trial::Pass)
}
