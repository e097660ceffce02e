//! Plain CNN substrate: layer definitions, traced forward inference and
//! hand-written reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kernel/stride/padding of a spatial layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerGeom {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let geom = Self {
            kernel,
            stride,
            padding,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn identity() -> Self {
        Self {
            kernel: 1,
            stride: 1,
            padding: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.padding >= self.kernel {
            return Err(Error::config(format!(
                "invalid layer geometry k={} s={} p={} (need k>=1, s>=1, p<k)",
                self.kernel, self.stride, self.padding
            )));
        }
        Ok(())
    }

    /// `floor((n + 2p - k) / s) + 1`, or `None` when the kernel does not fit.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Relu,
    MaxPool,
    GlobalAvgPool,
    Dense,
}

impl LayerKind {
    pub fn code(self) -> u8 {
        match self {
            LayerKind::Conv => 0,
            LayerKind::Relu => 1,
            LayerKind::MaxPool => 2,
            LayerKind::GlobalAvgPool => 3,
            LayerKind::Dense => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => LayerKind::Conv,
            1 => LayerKind::Relu,
            2 => LayerKind::MaxPool,
            3 => LayerKind::GlobalAvgPool,
            4 => LayerKind::Dense,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::GlobalAvgPool => "globalavgpool",
            LayerKind::Dense => "dense",
        }
    }
}

/// Square convolution; weight is `[out, in, k, k]`, bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub geom: LayerGeom,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Fully connected layer over the flattened input; weight is `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv),
    Relu,
    MaxPool(LayerGeom),
    GlobalAvgPool,
    Dense(Dense),
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool(_) => LayerKind::MaxPool,
            Layer::GlobalAvgPool => LayerKind::GlobalAvgPool,
            Layer::Dense(_) => LayerKind::Dense,
        }
    }

    /// Window geometry for layers that mix neighbouring positions.
    pub fn geom(&self) -> Option<LayerGeom> {
        match self {
            Layer::Conv(c) => Some(c.geom),
            Layer::MaxPool(g) => Some(*g),
            _ => None,
        }
    }

    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Conv(c) => Some((&c.weight, &c.bias)),
            Layer::Dense(d) => Some((&d.weight, &d.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Conv(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::Dense(d) => Some((&mut d.weight, &mut d.bias)),
            _ => None,
        }
    }
}

/// Input shape of a model, `channels × height × width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InputDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputDims {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// A validated sequential network plus the index of its superficial layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    input: InputDims,
    classes: usize,
    superficial: usize,
    shapes: Vec<Vec<usize>>,
}

/// Outputs of a forward pass.
///
/// `outputs[i]` is the output of layer `i` as consumed by layer `i + 1`,
/// i.e. after the superficial gate when one was applied. It is empty unless
/// tracing was requested.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Tensor,
    pub outputs: Vec<Tensor>,
    pub logits: Tensor,
    pub label: usize,
    /// Spatial multiplier applied to the superficial layer's output.
    pub gate: Option<Vec<f32>>,
}

impl ForwardTrace {
    pub fn is_traced(&self) -> bool {
        !self.outputs.is_empty()
    }
}

/// Parameter gradient for one conv/dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// One entry per layer, `None` for parameter-free layers.
    pub params: Vec<Option<LayerGrad>>,
    pub input: Tensor,
}

impl Model {
    pub fn new(
        layers: Vec<Layer>,
        input: InputDims,
        classes: usize,
        superficial: usize,
    ) -> Result<Self> {
        if input.channels == 0 || input.height == 0 || input.width == 0 {
            return Err(Error::config("input dims must be positive"));
        }
        if layers.is_empty() {
            return Err(Error::config("model has no layers"));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input.shape().to_vec();
        for (i, layer) in layers.iter().enumerate() {
            cur = layer_output_shape(i, layer, &cur)?;
            shapes.push(cur.clone());
        }
        if cur != [classes] {
            return Err(Error::config(format!(
                "last layer produces {cur:?}, expected [{classes}]"
            )));
        }
        let Some(layer) = layers.get(superficial) else {
            return Err(Error::config(format!(
                "superficial layer index {superficial} out of range"
            )));
        };
        let spatial = matches!(layer.kind(), LayerKind::Conv | LayerKind::Relu | LayerKind::MaxPool);
        if !spatial || shapes[superficial].len() != 3 {
            return Err(Error::config(format!(
                "superficial layer {superficial} ({}) is not spatial",
                layer.kind().name()
            )));
        }
        Ok(Self {
            layers,
            input,
            classes,
            superficial,
            shapes,
        })
    }

    /// conv3×3 → relu → maxpool2 → conv3×3 → relu → global-avg-pool → dense,
    /// He-uniform initialised from `seed`. The superficial layer is the first conv.
    pub fn plain_cnn(
        input: InputDims,
        classes: usize,
        widths: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g3 = LayerGeom::new(3, 1, 1)?;
        let layers = vec![
            Layer::Conv(init_conv(&mut rng, input.channels, widths.0, g3)),
            Layer::Relu,
            Layer::MaxPool(LayerGeom::new(2, 2, 0)?),
            Layer::Conv(init_conv(&mut rng, widths.0, widths.1, g3)),
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Dense(init_dense(&mut rng, widths.1, classes)),
        ];
        Self::new(layers, input, classes, 0)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dims(&self) -> InputDims {
        self.input
    }

    pub fn class_count(&self) -> usize {
        self.classes
    }

    pub fn superficial_layer(&self) -> usize {
        self.superficial
    }

    pub fn with_superficial_layer(mut self, index: usize) -> Result<Self> {
        let layers = std::mem::take(&mut self.layers);
        Self::new(layers, self.input, self.classes, index)
    }

    /// Output shape of layer `index`.
    pub fn output_shape(&self, index: usize) -> &[usize] {
        &self.shapes[index]
    }

    /// Spatial extent `(height, width)` of the superficial layer's output.
    pub fn superficial_extent(&self) -> (usize, usize) {
        let s = &self.shapes[self.superficial];
        (s[1], s[2])
    }

    /// Geometry of every layer up to and including `upto`, each paired with
    /// the spatial extent `(height, width)` of that layer's input. Element-wise
    /// layers report the identity geometry.
    pub fn spatial_chain(&self, upto: usize) -> Vec<(LayerGeom, (usize, usize))> {
        let mut extent = (self.input.height, self.input.width);
        let mut chain = Vec::with_capacity(upto + 1);
        for (i, layer) in self.layers.iter().enumerate().take(upto + 1) {
            chain.push((layer.geom().unwrap_or_else(LayerGeom::identity), extent));
            let s = &self.shapes[i];
            if s.len() == 3 {
                extent = (s[1], s[2]);
            }
        }
        chain
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input.shape() {
            return Err(Error::config(format!(
                "input shape {:?} does not match model input {:?}",
                x.shape(),
                self.input.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, trace: bool) -> Result<ForwardTrace> {
        self.run(x, trace, None::<fn(&Tensor) -> Vec<f32>>)
    }

    /// Forward pass that multiplies the superficial layer's output, position
    /// by position across all channels, by the spatial mask `gate` returns.
    pub fn forward_gated<G>(&self, x: &Tensor, trace: bool, gate: G) -> Result<ForwardTrace>
    where
        G: FnOnce(&Tensor) -> Vec<f32>,
    {
        self.run(x, trace, Some(gate))
    }

    fn run<G>(&self, x: &Tensor, trace: bool, gate: Option<G>) -> Result<ForwardTrace>
    where
        G: FnOnce(&Tensor) -> Vec<f32>,
    {
        self.check_input(x)?;
        let mut outputs = Vec::with_capacity(if trace { self.layers.len() } else { 0 });
        let mut gate = gate;
        let mut applied = None;
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = apply_layer(layer, &cur);
            if i == self.superficial {
                if let Some(g) = gate.take() {
                    let mask = g(&cur);
                    apply_spatial_mask(&mut cur, &mask);
                    applied = Some(mask);
                }
            }
            if trace {
                outputs.push(cur.clone());
            }
        }
        let label = cur.argmax();
        Ok(ForwardTrace {
            input: x.clone(),
            outputs,
            logits: cur,
            label,
            gate: applied,
        })
    }

    /// Output of layer `last`, running layers `0..=last` without any gate.
    pub fn forward_to(&self, x: &Tensor, last: usize) -> Result<Tensor> {
        self.check_input(x)?;
        if last >= self.layers.len() {
            return Err(Error::config(format!("layer {last} out of range")));
        }
        let mut cur = x.clone();
        for layer in &self.layers[..=last] {
            cur = apply_layer(layer, &cur);
        }
        Ok(cur)
    }

    /// Runs layers `start..` on `activation` (the input of layer `start`)
    /// and returns the logits.
    pub fn forward_from(&self, start: usize, activation: Tensor) -> Result<Tensor> {
        let expected: &[usize] = if start == 0 {
            &self.input.shape()
        } else {
            self.shapes
                .get(start - 1)
                .ok_or_else(|| Error::config(format!("layer {start} out of range")))?
        };
        if activation.shape() != expected {
            return Err(Error::config(format!(
                "activation shape {:?} does not match layer {start} input {expected:?}",
                activation.shape()
            )));
        }
        let mut cur = activation;
        for layer in &self.layers[start..] {
            cur = apply_layer(layer, &cur);
        }
        Ok(cur)
    }

    /// Reverse-mode gradients of a loss whose derivative with respect to the
    /// logits is `loss_grad`.
    pub fn backward(&self, trace: &ForwardTrace, loss_grad: &[f32]) -> Result<Gradients> {
        self.backward_with(trace, loss_grad, &[])
    }

    /// Like [`Model::backward`], additionally adding `injections[(i, g)]` to
    /// the gradient of layer `i`'s raw (pre-gate) output.
    pub fn backward_with(
        &self,
        trace: &ForwardTrace,
        loss_grad: &[f32],
        injections: &[(usize, &Tensor)],
    ) -> Result<Gradients> {
        if !trace.is_traced() || trace.outputs.len() != self.layers.len() {
            return Err(Error::State("backward requires a traced forward pass".into()));
        }
        if loss_grad.len() != self.classes {
            return Err(Error::config(format!(
                "loss gradient has {} entries, expected {}",
                loss_grad.len(),
                self.classes
            )));
        }
        for (i, g) in injections {
            if *i >= self.layers.len() || g.shape() != self.shapes[*i].as_slice() {
                return Err(Error::config(format!("gradient injection at layer {i} has wrong shape")));
            }
        }
        let mut params = vec![None; self.layers.len()];
        let mut grad = Tensor::from_parts(vec![self.classes], loss_grad.to_vec());
        for i in (0..self.layers.len()).rev() {
            if i == self.superficial {
                if let Some(mask) = &trace.gate {
                    apply_spatial_mask(&mut grad, mask);
                }
            }
            for (_, g) in injections.iter().filter(|(j, _)| *j == i) {
                for (a, b) in grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            let input = if i == 0 { &trace.input } else { &trace.outputs[i - 1] };
            let (gin, gparams) = backward_layer(&self.layers[i], input, &grad);
            params[i] = gparams;
            grad = gin;
        }
        Ok(Gradients {
            params,
            input: grad,
        })
    }
}

pub(crate) fn layer_output_shape(index: usize, layer: &Layer, input: &[usize]) -> Result<Vec<usize>> {
    let bad = |detail: String| Error::config(format!("layer {index} ({}): {detail}", layer.kind().name()));
    let spatial = |g: &LayerGeom| -> Result<(usize, usize, usize)> {
        g.validate().map_err(|e| bad(e.to_string()))?;
        match *input {
            [c, h, w] => {
                let oh = g.output_extent(h).ok_or_else(|| bad(format!("kernel exceeds height {h}")))?;
                let ow = g.output_extent(w).ok_or_else(|| bad(format!("kernel exceeds width {w}")))?;
                Ok((c, oh, ow))
            }
            _ => Err(bad(format!("expects a rank-3 input, got {input:?}"))),
        }
    };
    match layer {
        Layer::Conv(conv) => {
            let ws = conv.weight.shape();
            if ws.len() != 4 || ws[2] != conv.geom.kernel || ws[3] != conv.geom.kernel {
                return Err(bad(format!("weight shape {ws:?} inconsistent with kernel {}", conv.geom.kernel)));
            }
            if conv.bias.shape() != [ws[0]] {
                return Err(bad(format!("bias shape {:?}, expected [{}]", conv.bias.shape(), ws[0])));
            }
            let (c, oh, ow) = spatial(&conv.geom)?;
            if c != ws[1] {
                return Err(bad(format!("expects {} input channels, got {c}", ws[1])));
            }
            Ok(vec![ws[0], oh, ow])
        }
        Layer::MaxPool(g) => {
            let (c, oh, ow) = spatial(g)?;
            Ok(vec![c, oh, ow])
        }
        Layer::Relu => Ok(input.to_vec()),
        Layer::GlobalAvgPool => match *input {
            [c, _, _] => Ok(vec![c]),
            _ => Err(bad(format!("expects a rank-3 input, got {input:?}"))),
        },
        Layer::Dense(d) => {
            let ws = d.weight.shape();
            let fan_in: usize = input.iter().product();
            if ws.len() != 2 || ws[1] != fan_in {
                return Err(bad(format!("weight shape {ws:?} does not accept {fan_in} inputs")));
            }
            if d.bias.shape() != [ws[0]] {
                return Err(bad(format!("bias shape {:?}, expected [{}]", d.bias.shape(), ws[0])));
            }
            Ok(vec![ws[0]])
        }
    }
}

pub(crate) fn init_conv(rng: &mut impl Rng, cin: usize, cout: usize, geom: LayerGeom) -> Conv {
    let k = geom.kernel;
    let fan_in = (cin * k * k) as f32;
    let bound = (6.0 / fan_in).sqrt();
    let weight = (0..cout * cin * k * k)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Conv {
        geom,
        weight: Tensor::from_parts(vec![cout, cin, k, k], weight),
        bias: Tensor::zeros(&[cout]),
    }
}

pub(crate) fn init_dense(rng: &mut impl Rng, fan_in: usize, out: usize) -> Dense {
    let bound = (6.0 / fan_in as f32).sqrt();
    let weight = (0..out * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
    Dense {
        weight: Tensor::from_parts(vec![out, fan_in], weight),
        bias: Tensor::zeros(&[out]),
    }
}

/// Multiplies every channel of a rank-3 tensor by the `h × w` mask.
pub(crate) fn apply_spatial_mask(t: &mut Tensor, mask: &[f32]) {
    let plane = mask.len();
    debug_assert_eq!(t.len() % plane, 0);
    for chunk in t.data_mut().chunks_mut(plane) {
        for (v, &m) in chunk.iter_mut().zip(mask) {
            // exact +0.0 for pruned positions, whatever the sign of v
            *v = if m == 0.0 { 0.0 } else { *v * m };
        }
    }
}

/// Output range `[lo, hi)` of positions whose tap at offset `k` lands inside
/// `[0, n)`.
#[inline]
fn tap_range(k: usize, g: &LayerGeom, n: usize, out: usize) -> (usize, usize) {
    // position o reads input o*s + k - p
    let lo = if g.padding > k {
        (g.padding - k).div_ceil(g.stride)
    } else {
        0
    };
    let hi = if n + g.padding > k {
        ((n + g.padding - k - 1) / g.stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn apply_layer(layer: &Layer, input: &Tensor) -> Tensor {
    match layer {
        Layer::Conv(conv) => conv_forward(conv, input),
        Layer::Relu => Tensor::from_parts(
            input.shape().to_vec(),
            input.data().iter().map(|&v| v.max(0.0)).collect(),
        ),
        Layer::MaxPool(g) => maxpool_forward(g, input),
        Layer::GlobalAvgPool => {
            let (c, h, w) = input.dims3().expect("rank-3 input");
            let n = (h * w) as f32;
            let data = input
                .data()
                .chunks(h * w)
                .map(|p| p.iter().sum::<f32>() / n)
                .collect();
            Tensor::from_parts(vec![c], data)
        }
        Layer::Dense(d) => {
            let out = d.weight.shape()[0];
            let fan_in = d.weight.shape()[1];
            let x = input.data();
            let data = (0..out)
                .map(|o| {
                    let row = &d.weight.data()[o * fan_in..(o + 1) * fan_in];
                    d.bias.data()[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>()
                })
                .collect();
            Tensor::from_parts(vec![out], data)
        }
    }
}

fn conv_forward(conv: &Conv, input: &Tensor) -> Tensor {
    let (cin, h, w) = input.dims3().expect("rank-3 input");
    let g = conv.geom;
    let k = g.kernel;
    let cout = conv.out_channels();
    let oh = g.output_extent(h).expect("validated");
    let ow = g.output_extent(w).expect("validated");
    let mut out = vec![0.0f32; cout * oh * ow];
    let x = input.data();
    let wt = conv.weight.data();
    for o in 0..cout {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(conv.bias.data()[o]);
        for i in 0..cin {
            let src = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = tap_range(ky, &g, h, oh);
                for kx in 0..k {
                    let (x0, x1) = tap_range(kx, &g, w, ow);
                    let wv = wt[((o * cin + i) * k + ky) * k + kx];
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let row = &src[iy * w..];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            let off = kx as isize - g.padding as isize;
                            for ox in x0..x1 {
                                dst[ox] += wv * row[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in x0..x1 {
                                dst[ox] += wv * row[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![cout, oh, ow], out)
}

/// Index (into the input plane) of the max tap for output `(oy, ox)`; first
/// maximum in scan order wins. Padding taps never win.
#[inline]
fn pool_argmax(g: &LayerGeom, src: &[f32], h: usize, w: usize, oy: usize, ox: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f32::NEG_INFINITY;
    for ky in 0..g.kernel {
        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
        if iy < 0 || iy as usize >= h {
            continue;
        }
        for kx in 0..g.kernel {
            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
            if ix < 0 || ix as usize >= w {
                continue;
            }
            let idx = iy as usize * w + ix as usize;
            if best == usize::MAX || src[idx] > best_v {
                best = idx;
                best_v = src[idx];
            }
        }
    }
    best
}

fn maxpool_forward(g: &LayerGeom, input: &Tensor) -> Tensor {
    let (c, h, w) = input.dims3().expect("rank-3 input");
    let oh = g.output_extent(h).expect("validated");
    let ow = g.output_extent(w).expect("validated");
    let mut out = Vec::with_capacity(c * oh * ow);
    for src in input.data().chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(src[pool_argmax(g, src, h, w, oy, ox)]);
            }
        }
    }
    Tensor::from_parts(vec![c, oh, ow], out)
}

/// Gradient with respect to the layer input, plus parameter gradients.
fn backward_layer(layer: &Layer, input: &Tensor, grad: &Tensor) -> (Tensor, Option<LayerGrad>) {
    match layer {
        Layer::Conv(conv) => {
            let (gin, gw, gb) = conv_backward(conv, input, grad);
            (gin, Some(LayerGrad { weight: gw, bias: gb }))
        }
        Layer::Relu => {
            let data = input
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect();
            (Tensor::from_parts(input.shape().to_vec(), data), None)
        }
        Layer::MaxPool(g) => {
            let (c, h, w) = input.dims3().expect("rank-3 input");
            let oh = g.output_extent(h).expect("validated");
            let ow = g.output_extent(w).expect("validated");
            let mut gin = vec![0.0f32; c * h * w];
            for ch in 0..c {
                let src = &input.data()[ch * h * w..(ch + 1) * h * w];
                let gout = &grad.data()[ch * oh * ow..(ch + 1) * oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let idx = pool_argmax(g, src, h, w, oy, ox);
                        gin[ch * h * w + idx] += gout[oy * ow + ox];
                    }
                }
            }
            (Tensor::from_parts(vec![c, h, w], gin), None)
        }
        Layer::GlobalAvgPool => {
            let (c, h, w) = input.dims3().expect("rank-3 input");
            let n = (h * w) as f32;
            let mut gin = Vec::with_capacity(c * h * w);
            for &g in grad.data() {
                gin.extend(std::iter::repeat(g / n).take(h * w));
            }
            (Tensor::from_parts(vec![c, h, w], gin), None)
        }
        Layer::Dense(d) => {
            let out = d.weight.shape()[0];
            let fan_in = d.weight.shape()[1];
            let x = input.data();
            let g = grad.data();
            let mut gw = vec![0.0f32; out * fan_in];
            let mut gin = vec![0.0f32; fan_in];
            for o in 0..out {
                let row = &d.weight.data()[o * fan_in..(o + 1) * fan_in];
                let grow = &mut gw[o * fan_in..(o + 1) * fan_in];
                for j in 0..fan_in {
                    grow[j] = g[o] * x[j];
                    gin[j] += row[j] * g[o];
                }
            }
            (
                Tensor::from_parts(input.shape().to_vec(), gin),
                Some(LayerGrad {
                    weight: Tensor::from_parts(vec![out, fan_in], gw),
                    bias: Tensor::from_parts(vec![out], g.to_vec()),
                }),
            )
        }
    }
}

fn conv_backward(conv: &Conv, input: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (cin, h, w) = input.dims3().expect("rank-3 input");
    let g = conv.geom;
    let k = g.kernel;
    let cout = conv.out_channels();
    let (_, oh, ow) = grad.dims3().expect("rank-3 grad");
    let x = input.data();
    let gout = grad.data();
    let wt = conv.weight.data();
    let mut gw = vec![0.0f32; wt.len()];
    let mut gin = vec![0.0f32; x.len()];
    let gb: Vec<f32> = gout.chunks(oh * ow).map(|p| p.iter().sum()).collect();
    for o in 0..cout {
        let gplane = &gout[o * oh * ow..(o + 1) * oh * ow];
        for i in 0..cin {
            let src = &x[i * h * w..(i + 1) * h * w];
            let dst = &mut gin[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = tap_range(ky, &g, h, oh);
                for kx in 0..k {
                    let (x0, x1) = tap_range(kx, &g, w, ow);
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let mut acc = 0.0f32;
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.padding;
                        for ox in x0..x1 {
                            let ix = ox * g.stride + kx - g.padding;
                            let gv = gplane[oy * ow + ox];
                            acc += gv * src[iy * w + ix];
                            dst[iy * w + ix] += wv * gv;
                        }
                    }
                    gw[widx] = acc;
                }
            }
        }
    }
    (
        Tensor::from_parts(vec![cin, h, w], gin),
        Tensor::from_parts(conv.weight.shape().to_vec(), gw),
        Tensor::from_parts(vec![cout], gb),
    )
}

/// Mean-free softmax cross-entropy: returns the loss and its gradient with
/// respect to the logits.
pub fn softmax_cross_entropy(logits: &[f32], label: usize) -> (f32, Vec<f32>) {
    let probs = softmax(logits);
    let loss = -(probs[label].max(f32::MIN_POSITIVE)).ln();
    let mut grad = probs;
    grad[label] -= 1.0;
    (loss, grad)
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log softmax(logits)[label]`, computed stably.
pub fn log_prob(logits: &[f32], label: usize) -> f32 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<f32>().ln() + max;
    logits[label] - lse
}
