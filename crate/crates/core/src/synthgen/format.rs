//! Little-endian dataset container.
//!
//! ```text
//! "C2VD" | version u32 | count u64
//! per record: N u32 | E 9×f64 | R 9×f64 | t 3×f64 | coords N×4×f64 | labels N×u8
//! ```
//! Matrices are row-major.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::{SampleRecord, SynthError};
use crate::geometry::{CorrespondenceSet, EssentialMatrix, Pose};

pub const DATASET_MAGIC: [u8; 4] = *b"C2VD";
pub const DATASET_VERSION: u32 = 1;

fn put_mat3(w: &mut impl Write, m: &Matrix3<f64>) -> std::io::Result<()> {
    for i in 0..3 {
        for j in 0..3 {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[SampleRecord]) -> Result<(), SynthError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for rec in records {
        w.write_all(&(rec.corr.len() as u32).to_le_bytes())?;
        put_mat3(&mut w, rec.e.matrix())?;
        put_mat3(&mut w, &rec.pose.r)?;
        for v in rec.pose.t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for row in rec.corr.rows() {
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        let labels: Vec<u8> = rec.labels.iter().map(|&l| l as u8).collect();
        w.write_all(&labels)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SynthError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(SynthError::TruncatedFile(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SynthError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, SynthError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, SynthError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn mat3(&mut self) -> Result<Matrix3<f64>, SynthError> {
        let mut v = [0.0; 9];
        for x in v.iter_mut() {
            *x = self.f64()?;
        }
        Ok(Matrix3::from_row_slice(&v))
    }
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>, SynthError> {
    let buf = fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
    if magic != DATASET_MAGIC {
        return Err(SynthError::BadMagic(magic));
    }
    let version = cur.u32()?;
    if version != DATASET_VERSION {
        return Err(SynthError::VersionMismatch(version));
    }
    let count = cur.u64()?;
    let mut records = Vec::new();
    for index in 0..count as usize {
        let n = cur.u32()? as usize;
        let e = EssentialMatrix::from_matrix_unchecked(cur.mat3()?);
        let r = cur.mat3()?;
        let t = Vector3::new(cur.f64()?, cur.f64()?, cur.f64()?);
        let mut rows = Vec::with_capacity(n.min((buf.len() - cur.pos) / 32));
        for _ in 0..n {
            rows.push([cur.f64()?, cur.f64()?, cur.f64()?, cur.f64()?]);
        }
        let labels = cur.take(n)?.iter().map(|&b| b != 0).collect();
        let corr = CorrespondenceSet::new(rows).map_err(|source| SynthError::CorruptRecord { index, source })?;
        records.push(SampleRecord { corr, labels, e, pose: Pose { r, t } });
    }
    Ok(records)
}
