//! Binary tensor files.
//!
//! Layout of one record, all integers little-endian:
//!
//! ```text
//! "FNT1" | u8 dtype | u8 rank | rank x u32 dims | raw element data
//! ```
//!
//! Complex elements are stored as interleaved `(re, im)` pairs. A file may
//! hold several records back to back; checkpoints use this to keep every
//! parameter in one file.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::num::tensor::{ComplexTensor, Tensor};

pub const MAGIC: &[u8; 4] = b"FNT1";

/// Element encoding code stored after the magic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    Real32 = 0,
    Complex64 = 1,
    Real64 = 2,
    Complex128 = 3,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::Real32),
            1 => Ok(DType::Complex64),
            2 => Ok(DType::Real64),
            3 => Ok(DType::Complex128),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    fn is_complex(self) -> bool {
        matches!(self, DType::Complex64 | DType::Complex128)
    }
}

/// A decoded record.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    Real(Tensor),
    Complex(ComplexTensor),
}

impl StoredTensor {
    pub fn into_real(self) -> Result<Tensor> {
        match self {
            StoredTensor::Real(t) => Ok(t),
            StoredTensor::Complex(_) => Err(Error::Format("expected a real tensor".into())),
        }
    }

    pub fn into_complex(self) -> Result<ComplexTensor> {
        match self {
            StoredTensor::Complex(t) => Ok(t),
            StoredTensor::Real(_) => Err(Error::Format("expected a complex tensor".into())),
        }
    }
}

fn write_header<W: Write>(w: &mut W, dtype: DType, shape: &[usize]) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", shape.len())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[dtype as u8, shape.len() as u8])?;
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn write_values<W: Write>(w: &mut W, values: impl Iterator<Item = f64>, wide: bool) -> Result<()> {
    for v in values {
        if wide {
            w.write_all(&v.to_le_bytes())?;
        } else {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Write a real tensor; `dtype` must be `Real32` or `Real64`.
pub fn write_real<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    if dtype.is_complex() {
        return Err(Error::Format("real tensor needs a real dtype".into()));
    }
    write_header(w, dtype, t.shape())?;
    write_values(w, t.data().iter().copied(), dtype == DType::Real64)
}

/// Write a complex tensor; `dtype` must be `Complex64` or `Complex128`.
pub fn write_complex<W: Write>(w: &mut W, t: &ComplexTensor, dtype: DType) -> Result<()> {
    if !dtype.is_complex() {
        return Err(Error::Format("complex tensor needs a complex dtype".into()));
    }
    write_header(w, dtype, t.shape())?;
    write_values(
        w,
        t.data().iter().flat_map(|c| [c.re, c.im]),
        dtype == DType::Complex128,
    )
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    match r.read_exact(buf) {
        Ok(()) => Ok(true),
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => Ok(false),
        Err(e) => Err(e.into()),
    }
}

/// Read one record; `Ok(None)` at a clean end of stream.
pub fn read_record<R: Read>(r: &mut R) -> Result<Option<StoredTensor>> {
    let mut magic = [0u8; 4];
    if !read_exact_or_eof(r, &mut magic)? {
        return Ok(None);
    }
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", magic)));
    }
    let mut hdr = [0u8; 2];
    r.read_exact(&mut hdr)?;
    let dtype = DType::from_code(hdr[0])?;
    let rank = hdr[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let count: usize = shape.iter().product();
    let scalars = if dtype.is_complex() { 2 * count } else { count };
    let wide = matches!(dtype, DType::Real64 | DType::Complex128);
    let mut values = Vec::with_capacity(scalars);
    if wide {
        let mut b = [0u8; 8];
        for _ in 0..scalars {
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
    } else {
        let mut b = [0u8; 4];
        for _ in 0..scalars {
            r.read_exact(&mut b)?;
            values.push(f32::from_le_bytes(b) as f64);
        }
    }
    if dtype.is_complex() {
        let data = values
            .chunks(2)
            .map(|p| Complex64::new(p[0], p[1]))
            .collect();
        Ok(Some(StoredTensor::Complex(ComplexTensor::new(
            shape, data,
        )?)))
    } else {
        Ok(Some(StoredTensor::Real(Tensor::new(shape, values)?)))
    }
}

/// Read every record of a file.
pub fn load_all(path: &Path) -> Result<Vec<StoredTensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    while let Some(t) = read_record(&mut r)? {
        out.push(t);
    }
    Ok(out)
}

/// Read the single record of a file.
pub fn load(path: &Path) -> Result<StoredTensor> {
    let mut all = load_all(path)?;
    if all.len() != 1 {
        return Err(Error::Format(format!(
            "{} holds {} records, expected 1",
            path.display(),
            all.len()
        )));
    }
    Ok(all.remove(0))
}

pub fn save_real(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_real(&mut w, t, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn save_complex(path: &Path, t: &ComplexTensor, dtype: DType) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_complex(&mut w, t, dtype)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut buf = Vec::new();
        write_real(&mut buf, &t, DType::Real32).unwrap();
        assert_eq!(&buf[..4], b"FNT1");
        assert_eq!(buf[4], 0);
        assert_eq!(buf[5], 2);
        assert_eq!(&buf[6..10], &2u32.to_le_bytes());
        assert_eq!(&buf[10..14], &3u32.to_le_bytes());
        assert_eq!(&buf[14..18], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 14 + 6 * 4);
    }

    #[test]
    fn complex_is_interleaved() {
        let t = ComplexTensor::new(vec![1], vec![Complex64::new(1.5, -2.0)]).unwrap();
        let mut buf = Vec::new();
        write_complex(&mut buf, &t, DType::Complex64).unwrap();
        assert_eq!(buf[4], 1);
        assert_eq!(&buf[10..14], &1.5f32.to_le_bytes());
        assert_eq!(&buf[14..18], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_dtype() {
        let mut bad = b"FNT2\x00\x00".to_vec();
        assert!(read_record(&mut bad.as_slice()).is_err());
        bad = b"FNT1\x09\x00".to_vec();
        assert!(read_record(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn multiple_records_in_one_stream() {
        let a = Tensor::full(&[2], 3.0);
        let b = ComplexTensor::zeros(&[1, 2]);
        let mut buf = Vec::new();
        write_real(&mut buf, &a, DType::Real64).unwrap();
        write_complex(&mut buf, &b, DType::Complex128).unwrap();
        let mut r = buf.as_slice();
        assert_eq!(read_record(&mut r).unwrap(), Some(StoredTensor::Real(a)));
        assert_eq!(read_record(&mut r).unwrap(), Some(StoredTensor::Complex(b)));
        assert_eq!(read_record(&mut r).unwrap(), None);
    }

    proptest! {
        #[test]
        fn wide_round_trip_is_lossless(vals in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let n = vals.len();
            let t = Tensor::new(vec![n], vals).unwrap();
            let mut buf = Vec::new();
            write_real(&mut buf, &t, DType::Real64).unwrap();
            let back = read_record(&mut buf.as_slice()).unwrap().unwrap().into_real().unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn complex_narrow_round_trip(re in proptest::collection::vec(-1e3f64..1e3, 1..20)) {
            let data: Vec<Complex64> = re.iter().map(|&r| Complex64::new(r, -r * 0.5)).collect();
            let t = ComplexTensor::new(vec![data.len()], data).unwrap();
            let mut buf = Vec::new();
            write_complex(&mut buf, &t, DType::Complex64).unwrap();
            let back = read_record(&mut buf.as_slice()).unwrap().unwrap().into_complex().unwrap();
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert!((a - b).norm() <= 1e-6 * b.norm().max(1.0));
            }
        }
    }
}
