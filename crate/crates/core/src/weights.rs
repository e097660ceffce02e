//! Little-endian `PCRT` container for model weights and standalone tensors.
//!
//! Layout: magic `PCRT`, `u16` version, `u16` layer count, `u16` input
//! channels/height/width, `u16` classes, `u16` superficial layer index; then
//! per layer a kind byte, `u16` kernel/stride/padding, a tensor count byte and
//! each tensor's rank byte plus `u32` extents; then every tensor's `f32`
//! payload in the same order; finally a CRC32 of all preceding bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{layer_output_shape, Conv, Dense, InputDims, Layer, LayerGeom, LayerKind, Model};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PCRT";
const VERSION: u16 = 1;
/// Kind byte marking a bare tensor (e.g. an adversarial patch).
const RAW_TENSOR: u8 = 0xFF;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u16(&mut self, v: usize) -> Result<()> {
        let v = u16::try_from(v).map_err(|_| Error::format(format!("value {v} does not fit in u16")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::format(format!("extent {v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn header(&mut self, layers: usize, input: [usize; 3], classes: usize, superficial: usize) -> Result<()> {
        self.0.extend_from_slice(MAGIC);
        self.u16(VERSION as usize)?;
        self.u16(layers)?;
        for d in input {
            self.u16(d)?;
        }
        self.u16(classes)?;
        self.u16(superficial)
    }

    fn shape(&mut self, t: &Tensor) -> Result<()> {
        self.u8(t.rank() as u8);
        t.shape().iter().try_for_each(|&d| self.u32(d))
    }

    fn payload(&mut self, t: &Tensor) {
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.0);
        self.0.extend_from_slice(&crc.to_le_bytes());
        self.0
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<usize> {
        let b = self.take(2)?;
        Ok(usize::from(u16::from_le_bytes([b[0], b[1]])))
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()?;
        (0..rank).map(|_| self.u32()).collect()
    }

    fn payload(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(format!("tensor shape {shape:?} overflows")))?;
        let data = self
            .take(n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::format(e.to_string()))
    }
}

/// Checks magic, version and checksum; returns the body without the CRC.
fn open(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < MAGIC.len() + 4 + 4 {
        return Err(Error::format(format!("file of {} bytes is truncated", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("missing PCRT magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32fast::hash(body) != stored {
        return Err(Error::format("checksum mismatch (truncated or corrupt file)"));
    }
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != VERSION {
        return Err(Error::format(format!("unsupported version {version}")));
    }
    Ok(body)
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    let input = model.input_dims();
    w.header(model.layers().len(), input.shape(), model.class_count(), model.superficial_layer())?;
    for layer in model.layers() {
        w.u8(layer.kind().code());
        let g = layer.geom().unwrap_or(LayerGeom { kernel: 0, stride: 0, padding: 0 });
        for v in [g.kernel, g.stride, g.padding] {
            w.u16(v)?;
        }
        match layer.params() {
            Some((wt, b)) => {
                w.u8(2);
                w.shape(wt)?;
                w.shape(b)?;
            }
            None => w.u8(0),
        }
    }
    for (wt, b) in model.layers().iter().filter_map(Layer::params) {
        w.payload(wt);
        w.payload(b);
    }
    Ok(w.finish())
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let body = open(bytes)?;
    let mut r = Reader { bytes: body, pos: 6 };
    let count = r.u16()?;
    let input = InputDims::new(r.u16()?, r.u16()?, r.u16()?);
    let classes = r.u16()?;
    let superficial = r.u16()?;

    struct Entry {
        kind: LayerKind,
        geom: LayerGeom,
        shapes: Vec<Vec<usize>>,
    }
    let mut table = Vec::with_capacity(count);
    for i in 0..count {
        let code = r.u8()?;
        let kind = LayerKind::from_code(code).ok_or_else(|| Error::format(format!("layer {i}: unknown kind {code:#04x}")))?;
        let geom = LayerGeom {
            kernel: r.u16()?,
            stride: r.u16()?,
            padding: r.u16()?,
        };
        let n = r.u8()?;
        let shapes = (0..n).map(|_| r.shape()).collect::<Result<Vec<_>>>()?;
        let expected = if matches!(kind, LayerKind::Conv | LayerKind::Dense) { 2 } else { 0 };
        if shapes.len() != expected {
            return Err(Error::LayerShape {
                layer: i,
                kind: kind.name(),
                detail: format!("{} tensors stored, expected {expected}", shapes.len()),
            });
        }
        table.push(Entry { kind, geom, shapes });
    }

    let mut layers = Vec::with_capacity(count);
    let mut current = input.shape().to_vec();
    for (i, e) in table.into_iter().enumerate() {
        let mut tensors = Vec::new();
        for shape in e.shapes {
            tensors.push(r.payload(shape)?);
        }
        let mut t = tensors.into_iter();
        let layer = match e.kind {
            LayerKind::Conv => Layer::Conv(Conv {
                geom: e.geom,
                weight: t.next().expect("two tensors"),
                bias: t.next().expect("two tensors"),
            }),
            LayerKind::Dense => Layer::Dense(Dense {
                weight: t.next().expect("two tensors"),
                bias: t.next().expect("two tensors"),
            }),
            LayerKind::Relu => Layer::Relu,
            LayerKind::MaxPool => Layer::MaxPool(e.geom),
            LayerKind::GlobalAvgPool => Layer::GlobalAvgPool,
        };
        current = layer_output_shape(i, &layer, &current).map_err(|err| Error::LayerShape {
            layer: i,
            kind: e.kind.name(),
            detail: err.to_string(),
        })?;
        layers.push(layer);
    }
    if r.pos != body.len() {
        return Err(Error::format(format!("{} trailing bytes after payload", body.len() - r.pos)));
    }
    Model::new(layers, input, classes, superficial).map_err(|e| Error::format(e.to_string()))
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    decode_model(&fs::read(path)?)
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.header(1, [0, 0, 0], 0, 0)?;
    w.u8(RAW_TENSOR);
    for _ in 0..3 {
        w.u16(0)?;
    }
    w.u8(1);
    w.shape(t)?;
    w.payload(t);
    Ok(w.finish())
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let body = open(bytes)?;
    let mut r = Reader { bytes: body, pos: 6 };
    if r.u16()? != 1 {
        return Err(Error::format("tensor container must hold exactly one entry"));
    }
    r.take(10)?;
    if r.u8()? != RAW_TENSOR {
        return Err(Error::format("entry is a layer, not a raw tensor"));
    }
    r.take(6)?;
    if r.u8()? != 1 {
        return Err(Error::format("raw entry must hold one tensor"));
    }
    let shape = r.shape()?;
    let t = r.payload(shape)?;
    if r.pos != body.len() {
        return Err(Error::format("trailing bytes after tensor payload"));
    }
    Ok(t)
}

pub fn save_tensor(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}
