use crate::downcast::{pack_codes, unpack_codes};
use crate::error::{shape_err, Error, Result};
use crate::numcore::Matrix;
use crate::quantsim::{dequantize_code, IntMatrix, QuantParams, QuantSpec};

/// Inference form of a trained layer: integer codes `W_Z`, scale `s` and
/// zero offset `z₀`. Codes are double-packed for `b ≤ 4`, one signed byte
/// each otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedLayer {
    rows: usize,
    cols: usize,
    payload: Vec<u8>,
    scale: Matrix,
    zero: Vec<i32>,
    spec: QuantSpec,
}

impl FusedLayer {
    pub fn new(codes: IntMatrix, scale: Matrix, zero: Vec<i32>, spec: QuantSpec) -> Result<Self> {
        QuantParams {
            scale: scale.clone(),
            zero: zero.clone(),
        }
        .check(&spec, codes.rows, codes.cols)?;
        if let Some(&c) = codes
            .data
            .iter()
            .find(|&&c| c < spec.qmin() || c > spec.qmax())
        {
            return Err(Error::Range(format!("code {c} outside {}-bit range", spec.bits)));
        }
        let payload = if spec.bits <= 4 {
            pack_codes(&codes.data, spec.bits)?
        } else {
            codes.data.iter().map(|&c| c as i8 as u8).collect()
        };
        Ok(Self {
            rows: codes.rows,
            cols: codes.cols,
            payload,
            scale,
            zero,
            spec,
        })
    }

    pub fn from_payload(
        rows: usize,
        cols: usize,
        payload: Vec<u8>,
        scale: Matrix,
        zero: Vec<i32>,
        spec: QuantSpec,
    ) -> Result<Self> {
        let n = rows * cols;
        let expected = if spec.bits <= 4 { n.div_ceil(2) } else { n };
        if payload.len() != expected {
            return shape_err(format!(
                "fused payload of {} bytes, expected {expected}",
                payload.len()
            ));
        }
        let layer = Self {
            rows,
            cols,
            payload,
            scale,
            zero,
            spec,
        };
        // Re-validate ranges and parameter shapes.
        FusedLayer::new(layer.codes(), layer.scale.clone(), layer.zero.clone(), spec)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    pub fn scale(&self) -> &Matrix {
        &self.scale
    }

    pub fn zero(&self) -> &[i32] {
        &self.zero
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn is_packed(&self) -> bool {
        self.spec.bits <= 4
    }

    pub fn codes(&self) -> IntMatrix {
        let n = self.rows * self.cols;
        let data = if self.is_packed() {
            unpack_codes(&self.payload, n)
        } else {
            self.payload.iter().map(|&b| b as i8 as i32).collect()
        };
        IntMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// `s · (W_Z − z₀)`.
    pub fn dequantize(&self) -> Matrix {
        let codes = self.codes();
        let map = self.spec.blocks(self.rows, self.cols);
        let s = self.scale.data();
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            let b = map.index(i, j);
            dequantize_code(s[b], codes.get(i, j), self.zero[b])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantsim::Granularity;

    #[test]
    fn packed_payload_size_and_roundtrip() {
        let spec = QuantSpec::new(3, true, Granularity::PerTensor).unwrap();
        let codes = IntMatrix {
            rows: 1,
            cols: 3,
            data: vec![-4, 3, 1],
        };
        let f = FusedLayer::new(codes.clone(), Matrix::filled(1, 1, 0.5), vec![0], spec).unwrap();
        assert_eq!(f.payload().len(), 2);
        assert_eq!(f.codes(), codes);
        assert_eq!(f.dequantize().data(), &[-2.0, 1.5, 0.5]);
        let again = FusedLayer::from_payload(1, 3, f.payload().to_vec(), f.scale().clone(), vec![0], spec).unwrap();
        assert_eq!(again, f);
    }

    #[test]
    fn wide_codes_use_bytes() {
        let spec = QuantSpec::new(8, false, Granularity::PerTensor).unwrap();
        let codes = IntMatrix {
            rows: 1,
            cols: 2,
            data: vec![-128, 127],
        };
        let f = FusedLayer::new(codes, Matrix::filled(1, 1, 1.0), vec![3], spec).unwrap();
        assert_eq!(f.payload(), &[0x80, 0x7F]);
        assert_eq!(f.dequantize().data(), &[-131.0, 124.0]);
    }

    #[test]
    fn out_of_range_codes_rejected() {
        let spec = QuantSpec::new(2, true, Granularity::PerTensor).unwrap();
        let codes = IntMatrix {
            rows: 1,
            cols: 1,
            data: vec![2],
        };
        assert!(FusedLayer::new(codes, Matrix::filled(1, 1, 1.0), vec![0], spec).is_err());
    }
}
