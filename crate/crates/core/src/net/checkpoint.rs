//! Model checkpoint format.
//!
//! ```text
//! "ZSELMDL1"
//! u32 layer count
//! per layer: u32 outputs, u32 inputs, u8 activation,
//!            f32[outputs*inputs] weight_mean,
//!            f32[outputs*inputs] weight_log_std,
//!            f32[outputs] bias
//! u8 noise mode (1 = flipout, 0 = independent)
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use super::layer::{Activation, StochasticLayer};
use super::model::{NoiseMode, StochasticModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 8] = b"ZSELMDL1";

pub fn to_bytes(model: &StochasticModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        out.extend_from_slice(&(layer.outputs() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.inputs() as u32).to_le_bytes());
        out.push(layer.activation().tag());
        for t in [layer.weight_mean(), layer.weight_log_std(), layer.bias()] {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out.push(model.noise_mode().flag());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<StochasticModel> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(8)? != MODEL_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let count = cur.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let outputs = cur.u32()? as usize;
        let inputs = cur.u32()? as usize;
        let activation = Activation::from_tag(cur.u8()?)?;
        let w = outputs
            .checked_mul(inputs)
            .ok_or_else(|| Error::Format("layer size overflow".into()))?;
        let mean = Tensor::new(vec![outputs, inputs], cur.f32s(w)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let log_std = Tensor::new(vec![outputs, inputs], cur.f32s(w)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let bias = Tensor::new(vec![outputs], cur.f32s(outputs)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        layers.push(StochasticLayer::new(mean, log_std, bias, activation)?);
    }
    let mode = NoiseMode::from_flag(cur.u8()?)?;
    if cur.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    StochasticModel::new(layers, mode)
}

pub fn write_checkpoint(model: &StochasticModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<StochasticModel> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_model() {
        for mode in [NoiseMode::Flipout, NoiseMode::Independent] {
            let m = StochasticModel::mlp(5, &[4, 3], 3, mode, 9).unwrap();
            let bytes = to_bytes(&m);
            assert_eq!(&bytes[..8], b"ZSELMDL1");
            assert_eq!(*bytes.last().unwrap(), mode.flag());
            assert_eq!(from_bytes(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn layout_is_bit_exact() {
        let layer = StochasticLayer::new(
            Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap(),
            Tensor::new(vec![2, 1], vec![-5.0, -4.0]).unwrap(),
            Tensor::new(vec![2], vec![0.5, 0.25]).unwrap(),
            Activation::Identity,
        )
        .unwrap();
        let m = StochasticModel::new(vec![layer], NoiseMode::Flipout).unwrap();
        let mut expected = b"ZSELMDL1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(0);
        for v in [1.0f32, -2.0, -5.0, -4.0, 0.5, 0.25] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.push(1);
        assert_eq!(to_bytes(&m), expected);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = StochasticModel::mlp(2, &[2], 2, NoiseMode::Flipout, 0).unwrap();
        let bytes = to_bytes(&m);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
