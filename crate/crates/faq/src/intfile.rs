//! Binary container for lowered integer models. The byte layout is
//! described in `docs/integer-model-format.md`.

use std::fs;
use std::path::Path;

use faq_core::int_infer::{CodeTensor, IntLayer, IntOp, IntegerModel};
use faq_core::QuantSpec;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FAQI";
pub const VERSION: u16 = 1;

const OP_CONV: u8 = 1;
const OP_LINEAR: u8 = 2;
const OP_NORM: u8 = 3;
const OP_RELU: u8 = 4;
const OP_MAXPOOL: u8 = 5;
const OP_AVGPOOL: u8 = 6;
const OP_ADD: u8 = 7;
const OP_FLATTEN: u8 = 8;

/// Bytes per code for widths above 4 bits.
fn code_width(bits: u32) -> usize {
    match bits {
        0..=4 => 0,
        5..=8 => 1,
        9..=16 => 2,
        _ => 4,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn dims(&mut self, d: &[usize]) {
        self.u8(d.len() as u8);
        for &x in d {
            self.u32(x as u32);
        }
    }
    fn spec(&mut self, s: QuantSpec) {
        self.u8(s.bits as u8);
        self.u8(u8::from(s.signed));
        self.i32(s.radix);
    }

    fn tensor(&mut self, t: &CodeTensor) {
        self.spec(t.spec);
        self.dims(&t.shape);
        match code_width(t.spec.bits) {
            0 => {
                for pair in t.codes.chunks(2) {
                    let hi = (pair[0] as u8) & 0x0f;
                    let lo = pair.get(1).map_or(0, |&c| (c as u8) & 0x0f);
                    self.u8(hi << 4 | lo);
                }
            }
            1 => self.0.extend(t.codes.iter().map(|&c| c as u8)),
            2 => {
                for &c in &t.codes {
                    self.0.extend_from_slice(&(c as u16).to_le_bytes());
                }
            }
            _ => {
                for &c in &t.codes {
                    self.i32(c);
                }
            }
        }
    }

    fn opt_tensor(&mut self, t: &Option<CodeTensor>) {
        match t {
            Some(t) => {
                self.u8(1);
                self.tensor(t);
            }
            None => self.u8(0),
        }
    }
}

pub fn encode(model: &IntegerModel) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MAGIC);
    w.u16(VERSION);
    w.u16(0);
    w.dims(&model.input_shape);
    w.spec(model.input_spec);
    w.u32(model.layers.len() as u32);
    for l in &model.layers {
        w.u16(l.name.len() as u16);
        w.0.extend_from_slice(l.name.as_bytes());
        w.u8(l.inputs.len() as u8);
        for &i in &l.inputs {
            w.u32(i as u32);
        }
        w.i32(l.out_radix);
        match &l.op {
            IntOp::Conv {
                stride,
                padding,
                weight,
                bias,
            } => {
                w.u8(OP_CONV);
                w.u32(*stride as u32);
                w.u32(*padding as u32);
                w.tensor(weight);
                w.opt_tensor(bias);
            }
            IntOp::Linear { weight, bias } => {
                w.u8(OP_LINEAR);
                w.tensor(weight);
                w.opt_tensor(bias);
            }
            IntOp::Norm { scale, shift } => {
                w.u8(OP_NORM);
                w.tensor(scale);
                w.tensor(shift);
            }
            IntOp::Relu { radix, max_code } => {
                w.u8(OP_RELU);
                w.i32(*radix);
                w.i32(*max_code);
            }
            IntOp::MaxPool { kernel, stride } => {
                w.u8(OP_MAXPOOL);
                w.u32(*kernel as u32);
                w.u32(*stride as u32);
            }
            IntOp::AvgPool {
                kernel,
                stride,
                requant,
            } => {
                w.u8(OP_AVGPOOL);
                w.u32(*kernel as u32);
                w.u32(*stride as u32);
                match requant {
                    Some((r, m)) => {
                        w.u8(1);
                        w.i32(*r);
                        w.i32(*m);
                    }
                    None => w.u8(0),
                }
            }
            IntOp::Add => w.u8(OP_ADD),
            IntOp::Flatten => w.u8(OP_FLATTEN),
        }
    }
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format(format!("integer model: offset {}: {}", self.pos, msg.into()))
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| self.err(format!("truncated, needed {n} more bytes")))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn dims(&mut self) -> Result<Vec<usize>> {
        let n = self.u8()?;
        (0..n).map(|_| self.usize()).collect()
    }
    fn spec(&mut self) -> Result<QuantSpec> {
        let bits = self.u8()? as u32;
        if !(1..=32).contains(&bits) {
            return Err(self.err(format!("bit width {bits}")));
        }
        let signed = match self.u8()? {
            0 => false,
            1 => true,
            v => return Err(self.err(format!("signedness flag {v}"))),
        };
        Ok(QuantSpec {
            bits,
            radix: self.i32()?,
            signed,
        })
    }

    fn tensor(&mut self) -> Result<CodeTensor> {
        let spec = self.spec()?;
        let shape = self.dims()?;
        let n: usize = shape.iter().product();
        let codes: Vec<i32> = match code_width(spec.bits) {
            0 => {
                let raw = self.take(n.div_ceil(2))?;
                (0..n)
                    .map(|i| {
                        let nib = if i % 2 == 0 { raw[i / 2] >> 4 } else { raw[i / 2] & 0x0f };
                        if spec.signed {
                            ((nib << 4) as i8 >> 4) as i32
                        } else {
                            nib as i32
                        }
                    })
                    .collect()
            }
            1 => {
                let raw = self.take(n)?;
                raw.iter().map(|&b| if spec.signed { b as i8 as i32 } else { b as i32 }).collect()
            }
            2 => {
                let raw = self.take(2 * n)?;
                raw.chunks_exact(2)
                    .map(|b| {
                        let v = u16::from_le_bytes([b[0], b[1]]);
                        if spec.signed {
                            v as i16 as i32
                        } else {
                            v as i32
                        }
                    })
                    .collect()
            }
            _ => {
                let raw = self.take(4 * n)?;
                raw.chunks_exact(4).map(|b| i32::from_le_bytes(b.try_into().unwrap())).collect()
            }
        };
        if let Some(i) = codes
            .iter()
            .position(|&c| (c as i64) < spec.min_code() || (c as i64) > spec.max_code())
        {
            return Err(self.err(format!("code {} at {i} exceeds {} bits", codes[i], spec.bits)));
        }
        Ok(CodeTensor { spec, shape, codes })
    }

    fn opt_tensor(&mut self) -> Result<Option<CodeTensor>> {
        match self.u8()? {
            0 => Ok(None),
            1 => self.tensor().map(Some),
            v => Err(self.err(format!("presence flag {v}"))),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<IntegerModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("integer model: offset 0: bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    r.u16()?;
    let input_shape = r.dims()?;
    let input_spec = r.spec()?;
    let count = r.usize()?;
    let mut layers = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err("layer name is not UTF-8"))?;
        let k = r.u8()?;
        let inputs = (0..k).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let out_radix = r.i32()?;
        let op = match r.u8()? {
            OP_CONV => IntOp::Conv {
                stride: r.usize()?,
                padding: r.usize()?,
                weight: r.tensor()?,
                bias: r.opt_tensor()?,
            },
            OP_LINEAR => IntOp::Linear {
                weight: r.tensor()?,
                bias: r.opt_tensor()?,
            },
            OP_NORM => IntOp::Norm {
                scale: r.tensor()?,
                shift: r.tensor()?,
            },
            OP_RELU => IntOp::Relu {
                radix: r.i32()?,
                max_code: r.i32()?,
            },
            OP_MAXPOOL => IntOp::MaxPool {
                kernel: r.usize()?,
                stride: r.usize()?,
            },
            OP_AVGPOOL => IntOp::AvgPool {
                kernel: r.usize()?,
                stride: r.usize()?,
                requant: match r.u8()? {
                    0 => None,
                    _ => Some((r.i32()?, r.i32()?)),
                },
            },
            OP_ADD => IntOp::Add,
            OP_FLATTEN => IntOp::Flatten,
            t => return Err(r.err(format!("unknown op tag {t}"))),
        };
        layers.push(IntLayer {
            name,
            inputs,
            op,
            out_radix,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(IntegerModel {
        input_shape,
        input_spec,
        layers,
    })
}

pub fn save(model: &IntegerModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<IntegerModel> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use faq_core::int_infer::lower;
    use faq_core::models::random_small;
    use faq_core::{PrecisionPolicy, QuantNet};
    use proptest::prelude::*;

    fn lowered(seed: u64, bits: u32) -> IntegerModel {
        let net = random_small::<f64>(seed).unwrap();
        let mut q = QuantNet::new(net, PrecisionPolicy::fixed(bits)).unwrap();
        q.apply_uncalibrated_defaults(QuantSpec::signed(8, -5));
        lower(&q).unwrap()
    }

    #[test]
    fn nibble_packing_high_first() {
        let t = CodeTensor {
            spec: QuantSpec::signed(4, -2),
            shape: vec![3],
            codes: vec![7, -1, -7],
        };
        let mut w = Writer(Vec::new());
        w.tensor(&t);
        // bits, signed, radix, rank, dim, then two packed bytes
        assert_eq!(&w.0[..6], &[4, 1, 0xfe, 0xff, 0xff, 0xff]);
        assert_eq!(&w.0[6..11], &[1, 3, 0, 0, 0]);
        assert_eq!(&w.0[11..], &[0x7f, 0x90]);
        let mut r = Reader { bytes: &w.0, pos: 0 };
        assert_eq!(r.tensor().unwrap(), t);
    }

    #[test]
    fn lowered_models_round_trip() {
        for seed in 0..8 {
            for bits in [4, 8] {
                let m = lowered(seed, bits);
                let bytes = encode(&m);
                assert_eq!(&bytes[..4], b"FAQI");
                assert_eq!(decode(&bytes).unwrap(), m);
            }
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode(&lowered(1, 4));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
        let mut ver = bytes;
        ver[4] = 9;
        assert!(decode(&ver).is_err());
    }

    proptest! {
        #[test]
        fn packed_codes_round_trip(bits in 2u32..=32, signed: bool, raw in prop::collection::vec(any::<i64>(), 0..40)) {
            let bits = if signed { bits } else { bits.min(31) };
            let spec = QuantSpec { bits, radix: -3, signed };
            let span = spec.max_code() - spec.min_code() + 1;
            let codes: Vec<i32> = raw.iter().map(|r| (spec.min_code() + r.rem_euclid(span)) as i32).collect();
            let t = CodeTensor { spec, shape: vec![codes.len()], codes };
            let mut w = Writer(Vec::new());
            w.tensor(&t);
            let mut r = Reader { bytes: &w.0, pos: 0 };
            prop_assert_eq!(r.tensor().unwrap(), t);
            prop_assert_eq!(r.pos, w.0.len());
        }
    }
}
