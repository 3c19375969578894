//! CWKT: a minimal binary container for one dense array.
//!
//! Layout: `b"CWKT"`, version `0x01`, dtype (`0x00` u8, `0x01` f32
//! little-endian), `ndim`, then `ndim` u32 little-endian dims, then the
//! row-major payload. Nothing may follow the payload.

use std::fs;
use std::path::Path;

use clockwork_core::tensor::ConvKernels;
use clockwork_core::{LabelMap, Tensor};

use crate::error::{CwkError, Result};

pub const MAGIC: &[u8; 4] = b"CWKT";
pub const VERSION: u8 = 0x01;
const HEADER_LEN: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub enum CwktData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl CwktData {
    fn len(&self) -> usize {
        match self {
            CwktData::U8(v) => v.len(),
            CwktData::F32(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            CwktData::U8(_) => 0x00,
            CwktData::F32(_) => 0x01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CwktArray {
    pub dims: Vec<u32>,
    pub data: CwktData,
}

impl CwktArray {
    pub fn new(dims: Vec<u32>, data: CwktData) -> Result<Self> {
        let n = element_count(&dims).ok_or_else(|| CwkError::usage("array dims overflow"))?;
        if dims.len() > u8::MAX as usize {
            return Err(CwkError::usage(format!(
                "{} dims exceed the format limit",
                dims.len()
            )));
        }
        if n != data.len() {
            return Err(CwkError::usage(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let width = match self.data {
            CwktData::U8(_) => 1,
            CwktData::F32(_) => 4,
        };
        let mut out =
            Vec::with_capacity(HEADER_LEN + 4 * self.dims.len() + width * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[VERSION, self.data.dtype(), self.dims.len() as u8]);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            CwktData::U8(v) => out.extend_from_slice(v),
            CwktData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Parses one array; `origin` only labels errors.
    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| CwkError::format(origin, reason);
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("missing CWKT magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(bad(format!("unsupported version {}", bytes[4])));
        }
        let (dtype, ndim) = (bytes[5], bytes[6] as usize);
        let dims_end = HEADER_LEN + 4 * ndim;
        if bytes.len() < dims_end {
            return Err(bad("truncated dims".into()));
        }
        let dims: Vec<u32> = bytes[HEADER_LEN..dims_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        let n = element_count(&dims).ok_or_else(|| bad(format!("dims {dims:?} overflow")))?;
        let payload = &bytes[dims_end..];
        let data = match dtype {
            0x00 => {
                if payload.len() != n {
                    return Err(bad(format!(
                        "payload has {} bytes, dims {dims:?} need {n}",
                        payload.len()
                    )));
                }
                CwktData::U8(payload.to_vec())
            }
            0x01 => {
                if Some(payload.len()) != n.checked_mul(4) {
                    return Err(bad(format!(
                        "payload has {} bytes, dims {dims:?} need {}",
                        payload.len(),
                        4 * n
                    )));
                }
                CwktData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                        .collect(),
                )
            }
            other => return Err(bad(format!("unknown dtype {other:#04x}"))),
        };
        Ok(Self { dims, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CwkError::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| CwkError::io(path, e))
    }

    pub fn f32_data(&self, origin: &Path) -> Result<&[f32]> {
        match &self.data {
            CwktData::F32(v) => Ok(v),
            CwktData::U8(_) => Err(CwkError::format(origin, "expected float-32 data")),
        }
    }

    fn expect_dims(&self, ndim: usize, origin: &Path) -> Result<Vec<usize>> {
        if self.dims.len() != ndim {
            return Err(CwkError::format(
                origin,
                format!("expected {ndim} dims, got {:?}", self.dims),
            ));
        }
        Ok(self.dims.iter().map(|&d| d as usize).collect())
    }
}

fn element_count(dims: &[u32]) -> Option<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
}

fn dim(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| CwkError::usage(format!("dimension {v} exceeds u32")))
}

pub fn tensor_to_array(t: &Tensor) -> Result<CwktArray> {
    let (c, h, w) = t.dims();
    CwktArray::new(
        vec![dim(c)?, dim(h)?, dim(w)?],
        CwktData::F32(t.data().to_vec()),
    )
}

pub fn array_to_tensor(a: &CwktArray, origin: &Path) -> Result<Tensor> {
    let d = a.expect_dims(3, origin)?;
    let data = a.f32_data(origin)?.to_vec();
    Tensor::new(d[0], d[1], d[2], data).map_err(|e| CwkError::format(origin, e.to_string()))
}

pub fn labels_to_array(l: &LabelMap) -> Result<CwktArray> {
    CwktArray::new(
        vec![dim(l.height())?, dim(l.width())?],
        CwktData::U8(l.labels().to_vec()),
    )
}

pub fn array_to_labels(a: &CwktArray, origin: &Path) -> Result<LabelMap> {
    let d = a.expect_dims(2, origin)?;
    match &a.data {
        CwktData::U8(v) => LabelMap::new(d[0], d[1], v.clone())
            .map_err(|e| CwkError::format(origin, e.to_string())),
        CwktData::F32(_) => Err(CwkError::format(origin, "expected unsigned-8 labels")),
    }
}

pub fn kernels_to_array(k: &ConvKernels) -> Result<CwktArray> {
    let [o, i, kh, kw] = k.dims();
    CwktArray::new(
        vec![dim(o)?, dim(i)?, dim(kh)?, dim(kw)?],
        CwktData::F32(k.weights().to_vec()),
    )
}

pub fn array_to_kernels(a: &CwktArray, origin: &Path) -> Result<ConvKernels> {
    let d = a.expect_dims(4, origin)?;
    ConvKernels::new(d[0], d[1], d[2], d[3], a.f32_data(origin)?.to_vec())
        .map_err(|e| CwkError::format(origin, e.to_string()))
}

pub fn vector_to_array(v: &[f32]) -> Result<CwktArray> {
    CwktArray::new(vec![dim(v.len())?], CwktData::F32(v.to_vec()))
}

pub fn array_to_vector(a: &CwktArray, origin: &Path) -> Result<Vec<f32>> {
    a.expect_dims(1, origin)?;
    Ok(a.f32_data(origin)?.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn here() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn header_bytes() {
        let a = CwktArray::new(vec![2], CwktData::U8(vec![7, 9])).unwrap();
        assert_eq!(
            a.encode(),
            vec![b'C', b'W', b'K', b'T', 1, 0, 1, 2, 0, 0, 0, 7, 9]
        );
        let f = CwktArray::new(vec![1], CwktData::F32(vec![1.0])).unwrap();
        assert_eq!(
            &f.encode()[5..],
            &[1, 1, 1, 0, 0, 0, 0x00, 0x00, 0x80, 0x3f]
        );
    }

    #[test]
    fn rejects_malformed() {
        let good = CwktArray::new(vec![2, 2], CwktData::F32(vec![1.0, 2.0, 3.0, 4.0]))
            .unwrap()
            .encode();
        assert!(CwktArray::decode(&good[..good.len() - 1], here()).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(CwktArray::decode(&extra, here()).is_err());
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(CwktArray::decode(&magic, here()).is_err());
        let mut version = good.clone();
        version[4] = 2;
        assert!(CwktArray::decode(&version, here()).is_err());
        let mut dtype = good.clone();
        dtype[5] = 7;
        assert!(CwktArray::decode(&dtype, here()).is_err());
        assert!(CwktArray::decode(b"CWK", here()).is_err());
        assert!(CwktArray::new(vec![3], CwktData::U8(vec![1])).is_err());
    }

    #[test]
    fn scalar_has_no_dims() {
        let a = CwktArray::new(vec![], CwktData::F32(vec![2.5])).unwrap();
        assert_eq!(CwktArray::decode(&a.encode(), here()).unwrap(), a);
    }

    proptest! {
        #[test]
        fn f32_round_trip_is_bit_exact(bits in proptest::collection::vec(any::<u32>(), 0..64)) {
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let a = CwktArray::new(vec![data.len() as u32], CwktData::F32(data)).unwrap();
            let back = CwktArray::decode(&a.encode(), here()).unwrap();
            let CwktData::F32(v) = back.data else { unreachable!() };
            prop_assert_eq!(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), bits);
        }

        #[test]
        fn tensor_round_trip(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let t = Tensor::from_fn(c, h, w, |a, b, d| ((seed as usize ^ (a * 31 + b * 7 + d)) % 97) as f32 - 48.5).unwrap();
            let back = array_to_tensor(&CwktArray::decode(&tensor_to_array(&t).unwrap().encode(), here()).unwrap(), here()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
