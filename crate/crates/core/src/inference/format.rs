//! The SYQ1 model container.
//!
//! Little-endian throughout:
//!
//! ```text
//! "SYQ1"  version:u16  layer_count:u16
//! per layer:
//!   kind:u8         0 = convolution, 1 = fully-connected, 2 = batch norm
//!   quantized:u8    0 or 1
//!   granularity:u8  0 = pixel, 1 = row, 2 = layer
//!   mode:u8         0 = binary, 1 = ternary
//!   K I N F L H:u32 unused dimensions are 0; batch norm stores its channel count in I
//!   act_k:u8 act_f:u8   quantizer on this record's output, 0/0 = none
//!   stride:u8 pad:u8    convolution geometry, 0/0 otherwise
//!   scale_count:u32  scales:f32[scale_count]
//!   code_bytes:u32   codes:u8[code_bytes]
//! ```
//!
//! Quantized layers store one coefficient per subgroup and 2-bit codes
//! (`00` → 0, `01` → +1, `11` → −1, `10` reserved), four per byte starting at
//! the least significant bits, zero-padded. Full-precision layers store
//! their weights in the scale slot and no codes. Batch norm records store
//! `gamma, beta, running mean, running variance` in the scale slot.

use std::path::Path;

use super::engine::{BatchNormLayer, LayerWeights, ModelLayer, QuantizedLayer, QuantizedModel};
use crate::act_quant::ActQuantConfig;
use crate::codec::{Reader, Writer};
use crate::error::{Result, SyqError};
use crate::subgroups::{Granularity, LayerKind, ScaleVector};
use crate::tensor::LayerShape;
use crate::weight_quant::QuantMode;

pub const MODEL_MAGIC: &[u8; 4] = b"SYQ1";
pub const MODEL_VERSION: u16 = 1;

const KIND_CONV: u8 = 0;
const KIND_FC: u8 = 1;
const KIND_BN: u8 = 2;

/// Packs ternary codes at 2 bits each.
pub fn pack_codes(codes: &[i8]) -> Result<Vec<u8>> {
    let mut out = vec![0u8; codes.len().div_ceil(4)];
    for (j, &c) in codes.iter().enumerate() {
        let bits = match c {
            0 => 0b00,
            1 => 0b01,
            -1 => 0b11,
            other => {
                return Err(SyqError::Contract(format!(
                    "code {other} at index {j} has no 2-bit encoding"
                )));
            }
        };
        out[j / 4] |= bits << (2 * (j % 4));
    }
    Ok(out)
}

/// Inverse of [`pack_codes`]; rejects the reserved pattern and non-zero padding.
pub fn unpack_codes(bytes: &[u8], count: usize) -> Result<Vec<i8>> {
    if bytes.len() != count.div_ceil(4) {
        return Err(SyqError::format(
            0,
            format!("{count} codes need {} bytes, found {}", count.div_ceil(4), bytes.len()),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for j in 0..bytes.len() * 4 {
        let bits = (bytes[j / 4] >> (2 * (j % 4))) & 0b11;
        if j >= count {
            if bits != 0 {
                return Err(SyqError::format((j / 4) as u64, "non-zero padding after the last code"));
            }
            continue;
        }
        out.push(match bits {
            0b00 => 0,
            0b01 => 1,
            0b11 => -1,
            _ => {
                return Err(SyqError::format(
                    (j / 4) as u64,
                    format!("reserved code 10 at index {j}"),
                ))
            }
        });
    }
    Ok(out)
}

fn granularity_byte(g: Granularity) -> u8 {
    match g {
        Granularity::Pixel => 0,
        Granularity::Row => 1,
        Granularity::Layer => 2,
    }
}

fn mode_byte(m: QuantMode) -> u8 {
    match m {
        QuantMode::Binary => 0,
        QuantMode::Ternary => 1,
    }
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| SyqError::InvalidArgument(format!("{what} = {v} does not fit in 32 bits")))
}

fn write_act(w: &mut Writer, act: Option<ActQuantConfig>) {
    match act {
        Some(a) => {
            w.u8(a.bits);
            w.u8(a.frac_bits);
        }
        None => {
            w.u8(0);
            w.u8(0);
        }
    }
}

fn write_f32s(w: &mut Writer, values: &[f64]) -> Result<()> {
    w.u32(dim_u32(values.len(), "scale count")?);
    for &v in values {
        w.f32(v as f32);
    }
    Ok(())
}

impl QuantizedModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(MODEL_MAGIC);
        w.u16(MODEL_VERSION);
        let count = u16::try_from(self.layers().len())
            .map_err(|_| SyqError::InvalidArgument("more than 65535 layers".into()))?;
        w.u16(count);
        for layer in self.layers() {
            match layer {
                ModelLayer::Weights(l) => {
                    w.u8(match l.kind {
                        LayerKind::Conv => KIND_CONV,
                        LayerKind::Fc => KIND_FC,
                    });
                    let (quantized, gran, mode) = match &l.weights {
                        LayerWeights::Quantized { mode, granularity, .. } => {
                            (1, granularity_byte(*granularity), mode_byte(*mode))
                        }
                        LayerWeights::Full(_) => (0, 0, 0),
                    };
                    w.u8(quantized);
                    w.u8(gran);
                    w.u8(mode);
                    let s = l.shape;
                    for (v, name) in [(s.k, "K"), (s.i, "I"), (s.n, "N"), (s.f, "F"), (s.l, "L"), (s.h, "H")] {
                        w.u32(dim_u32(v, name)?);
                    }
                    write_act(&mut w, l.activation);
                    let geometry = match l.kind {
                        LayerKind::Conv => [l.stride, l.pad],
                        LayerKind::Fc => [0, 0],
                    };
                    for v in geometry {
                        w.u8(u8::try_from(v).map_err(|_| {
                            SyqError::InvalidArgument(format!("stride/pad {v} does not fit in a byte"))
                        })?);
                    }
                    match &l.weights {
                        LayerWeights::Quantized { codes, alpha, .. } => {
                            write_f32s(&mut w, alpha.as_slice())?;
                            let packed = pack_codes(codes)?;
                            w.u32(dim_u32(packed.len(), "code bytes")?);
                            w.bytes(&packed);
                        }
                        LayerWeights::Full(weights) => {
                            write_f32s(&mut w, weights)?;
                            w.u32(0);
                        }
                    }
                }
                ModelLayer::BatchNorm(b) => {
                    w.u8(KIND_BN);
                    w.u8(0);
                    w.u8(0);
                    w.u8(0);
                    for v in [0, b.channels(), 0, 0, 0, 0] {
                        w.u32(dim_u32(v, "channels")?);
                    }
                    write_act(&mut w, b.activation);
                    w.u8(0);
                    w.u8(0);
                    let params: Vec<f64> = [&b.gamma, &b.beta, &b.mean, &b.var]
                        .into_iter()
                        .flatten()
                        .copied()
                        .collect();
                    write_f32s(&mut w, &params)?;
                    w.u32(0);
                }
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != MODEL_MAGIC {
            return Err(SyqError::format(0, "not a SYQ1 model (bad magic)"));
        }
        let version = r.u16("version")?;
        if version != MODEL_VERSION {
            return Err(SyqError::format(4, format!("unsupported model version {version}")));
        }
        let count = r.u16("layer count")? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let start = r.offset();
            layers.push(read_layer(&mut r).map_err(|e| match e {
                SyqError::Format { .. } => e,
                other => SyqError::format(start, format!("invalid layer record: {other}")),
            })?);
        }
        r.expect_end()?;
        QuantizedModel::new(layers)
            .map_err(|e| SyqError::format(bytes.len() as u64, format!("inconsistent model: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| SyqError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SyqError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_layer(r: &mut Reader<'_>) -> Result<ModelLayer> {
    let at = r.offset();
    let kind = r.u8("layer kind")?;
    let quantized = r.u8("quantized flag")?;
    let gran = r.u8("granularity")?;
    let mode = r.u8("mode")?;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32("dimensions")? as usize;
    }
    let act_at = r.offset();
    let (k, f) = (r.u8("activation bits")?, r.u8("activation fraction bits")?);
    let activation = match (k, f) {
        (0, 0) => None,
        _ => Some(ActQuantConfig::new(k, f).map_err(|e| SyqError::format(act_at, e.to_string()))?),
    };
    let stride = r.u8("stride")? as usize;
    let pad = r.u8("pad")? as usize;
    let scale_at = r.offset();
    let scale_count = r.u32("scale count")? as usize;
    if scale_count > r.remaining() / 4 {
        return Err(SyqError::format(
            scale_at,
            format!("scale count {scale_count} exceeds the remaining data"),
        ));
    }
    let scales: Vec<f64> = (0..scale_count)
        .map(|_| r.f32("scales").map(f64::from))
        .collect::<Result<_>>()?;
    let code_at = r.offset();
    let code_len = r.u32("code length")? as usize;
    let codes_raw = r.take(code_len, "codes")?;
    let [dk, di, dn, df, dl, dh] = dims;

    if kind == KIND_BN {
        if quantized != 0 || code_len != 0 || scale_count != 4 * di || di == 0 {
            return Err(SyqError::format(at, "malformed batch norm record"));
        }
        let mut chunks = scales.chunks(di).map(<[f64]>::to_vec);
        return Ok(ModelLayer::BatchNorm(BatchNormLayer {
            gamma: chunks.next().expect("4 chunks"),
            beta: chunks.next().expect("4 chunks"),
            mean: chunks.next().expect("4 chunks"),
            var: chunks.next().expect("4 chunks"),
            activation,
        }));
    }
    let layer_kind = match kind {
        KIND_CONV => LayerKind::Conv,
        KIND_FC => LayerKind::Fc,
        other => return Err(SyqError::format(at, format!("unknown layer kind {other}"))),
    };
    let shape = LayerShape {
        k: dk,
        i: di,
        n: dn,
        f: df,
        l: dl,
        h: dh,
    };
    let (stride, pad) = match layer_kind {
        LayerKind::Conv => (stride, pad),
        LayerKind::Fc if (stride, pad) == (0, 0) => (1, 0),
        LayerKind::Fc => {
            return Err(SyqError::format(
                act_at + 2,
                "fully-connected record with nonzero stride/pad",
            ))
        }
    };
    let mut layer = QuantizedLayer {
        kind: layer_kind,
        shape,
        stride,
        pad,
        weights: LayerWeights::Full(Vec::new()),
        activation,
    };
    let z = match layer_kind {
        LayerKind::Conv => {
            shape
                .validate_conv()
                .map_err(|e| SyqError::format(at + 4, e.to_string()))?;
            dk * dk * di * dn
        }
        LayerKind::Fc => {
            shape
                .validate_fc()
                .map_err(|e| SyqError::format(at + 4, e.to_string()))?;
            dl * dh
        }
    };
    layer.weights = match quantized {
        0 => {
            if code_len != 0 {
                return Err(SyqError::format(code_at, "full-precision layer carries codes"));
            }
            LayerWeights::Full(scales)
        }
        1 => {
            let granularity = match gran {
                0 => Granularity::Pixel,
                1 => Granularity::Row,
                2 => Granularity::Layer,
                other => return Err(SyqError::format(at + 2, format!("unknown granularity {other}"))),
            };
            let mode = match mode {
                0 => QuantMode::Binary,
                1 => QuantMode::Ternary,
                other => return Err(SyqError::format(at + 3, format!("unknown quantization mode {other}"))),
            };
            let codes = unpack_codes(codes_raw, z).map_err(|e| match e {
                SyqError::Format { offset, message } => SyqError::format(code_at + 4 + offset, message),
                other => other,
            })?;
            let alpha = ScaleVector::new(scales).map_err(|e| SyqError::format(scale_at, e.to_string()))?;
            LayerWeights::Quantized {
                mode,
                granularity,
                codes,
                alpha,
            }
        }
        other => {
            return Err(SyqError::format(
                at + 1,
                format!("quantized flag must be 0 or 1, found {other}"),
            ))
        }
    };
    Ok(ModelLayer::Weights(layer))
}
