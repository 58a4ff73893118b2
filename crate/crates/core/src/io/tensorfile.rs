//! `CVPF` tensor files.
//!
//! Layout of one record: the 4 magic bytes `CVPF`, a little-endian `u32`
//! format version, a little-endian `u32` header length, a UTF-8 JSON header
//! `{"dtype": "f32"|"f64", "shape": [..], "order": "row-major"}`, then the
//! raw little-endian payload. A stream is zero or more records back to back.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"CVPF";
pub const VERSION: u32 = 1;
const MAX_HEADER: u32 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: DType,
    shape: Vec<usize>,
    order: String,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n = element_count(&shape).ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows")))?;
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn from_matrix(m: &Matrix<f64>) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: TensorData::F64(m.data().to_vec()),
        }
    }

    /// Rank-2 tensor as an f64 matrix.
    pub fn to_matrix(&self) -> Result<Matrix<f64>> {
        match self.shape[..] {
            [r, c] => Matrix::from_vec(r, c, self.data.to_f64()),
            _ => Err(Error::Shape(format!("expected a rank-2 tensor, got shape {:?}", self.shape))),
        }
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        dtype: t.data.dtype(),
        shape: t.shape.clone(),
        order: "row-major".into(),
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    match &t.data {
        TensorData::F32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        TensorData::F64(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn to_bytes(tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for t in tensors {
        write_tensor(&mut out, t)?;
    }
    Ok(out)
}

/// Sequential reader over a record stream that tracks the byte offset for
/// error reporting.
pub struct TensorReader<R> {
    inner: R,
    offset: u64,
    failed: bool,
}

impl<R: Read> TensorReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            offset: 0,
            failed: false,
        }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::TensorFile {
            offset: self.offset,
            message: message.into(),
        }
    }

    /// Fills `buf`; returns the number of bytes read before EOF.
    fn fill(&mut self, buf: &mut [u8]) -> Result<usize> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => break,
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(self.err(e.to_string())),
            }
        }
        Ok(got)
    }

    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let got = self.fill(buf)?;
        if got < buf.len() {
            self.offset += got as u64;
            return Err(self.err(format!("truncated {what}: expected {} bytes, found {got}", buf.len())));
        }
        self.offset += got as u64;
        Ok(())
    }

    /// Next record, or `None` at a clean end of stream.
    pub fn next_tensor(&mut self) -> Result<Option<Tensor>> {
        let mut magic = [0u8; 4];
        let got = self.fill(&mut magic)?;
        if got == 0 {
            return Ok(None);
        }
        if got < 4 || &magic != MAGIC {
            return Err(self.err("bad magic, expected CVPF"));
        }
        self.offset += 4;
        let mut word = [0u8; 4];
        self.exact(&mut word, "version")?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::TensorFile {
                offset: self.offset - 4,
                message: format!("unsupported version {version}"),
            });
        }
        self.exact(&mut word, "header length")?;
        let header_len = u32::from_le_bytes(word);
        if header_len > MAX_HEADER {
            return Err(Error::TensorFile {
                offset: self.offset - 4,
                message: format!("header length {header_len} exceeds limit"),
            });
        }
        let mut header = vec![0u8; header_len as usize];
        let header_start = self.offset;
        self.exact(&mut header, "header")?;
        let header: Header = serde_json::from_slice(&header).map_err(|e| Error::TensorFile {
            offset: header_start,
            message: format!("invalid header: {e}"),
        })?;
        if header.order != "row-major" {
            return Err(Error::TensorFile {
                offset: header_start,
                message: format!("unsupported order {:?}", header.order),
            });
        }
        let n = element_count(&header.shape)
            .and_then(|n| n.checked_mul(header.dtype.size()).map(|b| (n, b)))
            .ok_or_else(|| self.err("shape overflows"))?;
        let (count, bytes) = n;
        let mut payload = Vec::new();
        let taken = (&mut self.inner).take(bytes as u64).read_to_end(&mut payload);
        if let Err(e) = taken {
            return Err(self.err(e.to_string()));
        }
        if payload.len() < bytes {
            self.offset += payload.len() as u64;
            return Err(self.err(format!("truncated payload: expected {bytes} bytes, found {}", payload.len())));
        }
        self.offset += bytes as u64;
        let data = match header.dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
            ),
        };
        debug_assert_eq!(data.len(), count);
        Ok(Some(Tensor {
            shape: header.shape,
            data,
        }))
    }
}

impl<R: Read> Iterator for TensorReader<R> {
    type Item = Result<Tensor>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let r = self.next_tensor().transpose();
        if matches!(r, Some(Err(_))) {
            self.failed = true;
        }
        r
    }
}

pub fn read_file(path: &Path) -> Result<Vec<Tensor>> {
    let f = std::fs::File::open(path).map_err(|e| Error::TensorFile {
        offset: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    TensorReader::new(std::io::BufReader::new(f)).collect()
}

pub fn write_file(path: &Path, tensors: &[Tensor]) -> Result<()> {
    super::atomic_write(path, &to_bytes(tensors)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn read_bytes(b: &[u8]) -> Result<Vec<Tensor>> {
        TensorReader::new(b).collect()
    }

    #[test]
    fn round_trip_special_values() {
        let f64s = vec![-0.0, f64::MIN_POSITIVE / 4.0, 1.5, -2.25e300, f64::INFINITY, 5e-324];
        let f32s = vec![-0.0f32, f32::MIN_POSITIVE / 8.0, 3.0, f32::NAN];
        let ts = vec![
            Tensor::new(vec![2, 3], TensorData::F64(f64s.clone())).unwrap(),
            Tensor::new(vec![4], TensorData::F32(f32s.clone())).unwrap(),
            Tensor::new(vec![0, 5], TensorData::F64(vec![])).unwrap(),
        ];
        let back = read_bytes(&to_bytes(&ts).unwrap()).unwrap();
        assert_eq!(back.len(), 3);
        let TensorData::F64(v) = &back[0].data else { panic!() };
        assert!(v.iter().zip(&f64s).all(|(a, b)| a.to_bits() == b.to_bits()));
        let TensorData::F32(v) = &back[1].data else { panic!() };
        assert!(v.iter().zip(&f32s).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back[2].shape, vec![0, 5]);
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1], TensorData::F32(vec![1.0])).unwrap();
        let b = to_bytes(&[t]).unwrap();
        assert_eq!(&b[..4], b"CVPF");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        let hl = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let h: serde_json::Value = serde_json::from_slice(&b[12..12 + hl]).unwrap();
        assert_eq!(h["dtype"], "f32");
        assert_eq!(h["order"], "row-major");
        assert_eq!(b.len(), 12 + hl + 4);
    }

    #[test]
    fn errors_carry_offsets() {
        let t = Tensor::new(vec![2], TensorData::F64(vec![1.0, 2.0])).unwrap();
        let one = to_bytes(&[t.clone()]).unwrap();
        let mut two = to_bytes(&[t.clone(), t]).unwrap();

        let truncated = &one[..one.len() - 3];
        match read_bytes(truncated) {
            Err(Error::TensorFile { offset, .. }) => assert_eq!(offset as usize, one.len() - 3),
            other => panic!("{other:?}"),
        }

        two[one.len()] = b'X';
        match read_bytes(&two) {
            Err(Error::TensorFile { offset, .. }) => assert_eq!(offset as usize, one.len()),
            other => panic!("{other:?}"),
        }

        let mut bad_version = one.clone();
        bad_version[4] = 9;
        assert!(matches!(read_bytes(&bad_version), Err(Error::TensorFile { offset: 4, .. })));
        assert!(read_bytes(b"").unwrap().is_empty());
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 2], TensorData::F64(vec![1.0])).is_err());
        let t = Tensor::new(vec![2, 2, 1], TensorData::F64(vec![0.0; 4])).unwrap();
        assert!(t.to_matrix().is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(bits in proptest::collection::vec(any::<u64>(), 0..40)) {
            let v: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
            let t = Tensor::new(vec![v.len()], TensorData::F64(v.clone())).unwrap();
            let back = read_bytes(&to_bytes(&[t]).unwrap()).unwrap();
            let TensorData::F64(w) = &back[0].data else { panic!() };
            prop_assert!(w.iter().zip(&v).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
