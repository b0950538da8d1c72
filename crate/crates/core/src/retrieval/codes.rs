//! Bit-packed binary codes, Hamming ranking and the `ZSCB` code file.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::data::features::CountingReader;
use crate::data::Modality;
use crate::error::{Error, Result};

pub const CODE_MAGIC: &[u8; 4] = b"ZSCB";
pub const CODE_VERSION: u16 = 1;

/// `N × M` binary codes packed into `u64` words, bit `j` of a code in word
/// `j / 64` at position `j % 64`. Unused high bits are always zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeMatrix {
    bits: usize,
    words: usize,
    data: Vec<u64>,
    pub labels: Vec<u32>,
    pub modality: Modality,
}

impl CodeMatrix {
    pub fn new(bits: usize, modality: Modality) -> Self {
        Self {
            bits,
            words: bits.div_ceil(64),
            data: Vec::new(),
            labels: Vec::new(),
            modality,
        }
    }

    /// Builds from rows of `0`/`1` values.
    pub fn from_bits(rows: &[Vec<u8>], labels: Vec<u32>, bits: usize, modality: Modality) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::dim(
                "CodeMatrix",
                format!("{} codes but {} labels", rows.len(), labels.len()),
            ));
        }
        let mut out = Self::new(bits, modality);
        for (row, label) in rows.iter().zip(labels) {
            if row.len() != bits {
                return Err(Error::dim("CodeMatrix", format!("code of {} bits, expected {bits}", row.len())));
            }
            let mut packed = vec![0u64; out.words];
            for (j, &b) in row.iter().enumerate() {
                match b {
                    0 => {}
                    1 => packed[j / 64] |= 1 << (j % 64),
                    other => return Err(Error::domain("CodeMatrix", format!("bit value {other}"))),
                }
            }
            out.data.extend_from_slice(&packed);
            out.labels.push(label);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Code length `M`.
    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn code(&self, i: usize) -> &[u64] {
        &self.data[i * self.words..(i + 1) * self.words]
    }

    pub fn bit(&self, i: usize, j: usize) -> u8 {
        ((self.code(i)[j / 64] >> (j % 64)) & 1) as u8
    }

    pub fn row_bits(&self, i: usize) -> Vec<u8> {
        (0..self.bits).map(|j| self.bit(i, j)).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(CODE_MAGIC)?;
        w.write_all(&CODE_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.bits as u32).to_le_bytes())?;
        w.write_all(&[self.modality.to_byte()])?;
        let nbytes = self.bits.div_ceil(8);
        let mut buf = vec![0u8; nbytes];
        for i in 0..self.len() {
            w.write_all(&self.labels[i].to_le_bytes())?;
            let code = self.code(i);
            for (k, byte) in buf.iter_mut().enumerate() {
                *byte = (code[k / 8] >> ((k % 8) * 8)) as u8;
            }
            w.write_all(&buf)?;
        }
        for label in &self.labels {
            w.write_all(&label.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = CountingReader::new(r);
        let mut magic = [0u8; 4];
        r.fill(&mut magic, None, "magic")?;
        if &magic != CODE_MAGIC {
            return Err(Error::Format {
                offset: 0,
                record: None,
                detail: format!("bad magic {magic:?}, expected ZSCB"),
            });
        }
        let version = r.u16(None, "version")?;
        if version != CODE_VERSION {
            return Err(Error::Format {
                offset: 4,
                record: None,
                detail: format!("unsupported version {version}"),
            });
        }
        let n = r.u64(None, "N")? as usize;
        let bits = r.u32(None, "M")? as usize;
        let at = r.offset;
        let modality = Modality::from_byte(r.u8(None, "modality")?).ok_or(Error::Format {
            offset: at,
            record: None,
            detail: "invalid modality tag".into(),
        })?;
        let mut out = Self::new(bits, modality);
        let nbytes = bits.div_ceil(8);
        let mut buf = vec![0u8; nbytes];
        for index in 0..n {
            out.labels.push(r.u32(Some(index), "label")?);
            let at = r.offset;
            r.fill(&mut buf, Some(index), "code bytes")?;
            let mut packed = vec![0u64; out.words];
            for (k, &byte) in buf.iter().enumerate() {
                packed[k / 8] |= (byte as u64) << ((k % 8) * 8);
            }
            if !bits.is_multiple_of(64) && packed[out.words - 1] >> (bits % 64) != 0 {
                return Err(Error::Format {
                    offset: at,
                    record: Some(index),
                    detail: "padding bits are set".into(),
                });
            }
            out.data.extend_from_slice(&packed);
        }
        for index in 0..n {
            let at = r.offset;
            let label = r.u32(Some(index), "label trailer")?;
            if label != out.labels[index] {
                return Err(Error::Format {
                    offset: at,
                    record: Some(index),
                    detail: format!("trailer label {label} disagrees with record label {}", out.labels[index]),
                });
            }
        }
        r.expect_eof()?;
        Ok(out)
    }
}

pub fn load_codes(path: impl AsRef<Path>) -> Result<CodeMatrix> {
    CodeMatrix::read_from(BufReader::new(File::open(path)?))
}

pub fn write_codes(path: impl AsRef<Path>, codes: &CodeMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    codes.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Bit `1` iff the soft code is at least `0.5`.
pub fn binarize(soft: &Tensor, labels: Vec<u32>, modality: Modality) -> Result<CodeMatrix> {
    if soft.nrows() != labels.len() {
        return Err(Error::dim(
            "binarize",
            format!("{} rows but {} labels", soft.nrows(), labels.len()),
        ));
    }
    if let Some(bad) = soft.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::domain("binarize", format!("soft code {bad} outside [0,1]")));
    }
    let bits = soft.ncols();
    let mut out = CodeMatrix::new(bits, modality);
    for row in soft.rows() {
        let mut packed = vec![0u64; out.words];
        for (j, &v) in row.iter().enumerate() {
            if v >= 0.5 {
                packed[j / 64] |= 1 << (j % 64);
            }
        }
        out.data.extend_from_slice(&packed);
    }
    out.labels = labels;
    Ok(out)
}

#[inline]
pub fn hamming_distance(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Gallery indices ordered by Hamming distance to `query`, ties by index.
pub fn hamming_rank(query: &[u64], gallery: &CodeMatrix) -> Result<Vec<usize>> {
    if query.len() != gallery.words {
        return Err(Error::dim(
            "hamming_rank",
            format!("query has {} words, gallery codes have {}", query.len(), gallery.words),
        ));
    }
    // Counting sort: distances live in 0..=M and each bucket keeps index order.
    let dists: Vec<u32> = (0..gallery.len())
        .map(|i| hamming_distance(query, gallery.code(i)))
        .collect();
    let mut counts = vec![0usize; gallery.bits + 2];
    for &d in &dists {
        counts[d as usize + 1] += 1;
    }
    for k in 1..counts.len() {
        counts[k] += counts[k - 1];
    }
    let mut order = vec![0usize; dists.len()];
    for (i, &d) in dists.iter().enumerate() {
        order[counts[d as usize]] = i;
        counts[d as usize] += 1;
    }
    Ok(order)
}
