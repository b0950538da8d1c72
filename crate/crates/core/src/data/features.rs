//! Binary feature-map files (`ZSFT`) and the class-name sidecar.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"ZSFT";
pub const FEATURE_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Sketch,
    Image,
}

impl Modality {
    pub fn to_byte(self) -> u8 {
        match self {
            Modality::Sketch => 0,
            Modality::Image => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Modality::Sketch),
            1 => Some(Modality::Image),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Sketch => "sketch",
            Modality::Image => "image",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sketch" => Ok(Modality::Sketch),
            "image" => Ok(Modality::Image),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// One feature map, `locations × channels` values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureItem {
    pub id: u64,
    pub class: u32,
    pub data: Vec<f32>,
}

/// All items of one modality; every map shares `(locations, channels)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub modality: Modality,
    pub locations: usize,
    pub channels: usize,
    pub items: Vec<FeatureItem>,
}

impl FeatureSet {
    pub fn new(modality: Modality, locations: usize, channels: usize) -> Self {
        Self {
            modality,
            locations,
            channels,
            items: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.items.iter().map(|it| it.class).collect()
    }

    pub fn push(&mut self, item: FeatureItem) -> Result<()> {
        if item.data.len() != self.locations * self.channels {
            return Err(Error::Dataset(format!(
                "item {} has {} values, expected {}x{}",
                item.id,
                item.data.len(),
                self.locations,
                self.channels
            )));
        }
        self.items.push(item);
        Ok(())
    }

    /// Keeps only items whose class satisfies `keep`.
    pub fn filter_classes(&self, mut keep: impl FnMut(u32) -> bool) -> FeatureSet {
        FeatureSet {
            modality: self.modality,
            locations: self.locations,
            channels: self.channels,
            items: self.items.iter().filter(|it| keep(it.class)).cloned().collect(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&FEATURE_VERSION.to_le_bytes())?;
        w.write_all(&[self.modality.to_byte()])?;
        w.write_all(&(self.locations as u32).to_le_bytes())?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        w.write_all(&(self.items.len() as u64).to_le_bytes())?;
        for item in &self.items {
            w.write_all(&item.id.to_le_bytes())?;
            w.write_all(&item.class.to_le_bytes())?;
            for v in &item.data {
                w.write_all(&v.to_le_bytes())?;
            }
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
        if &magic != FEATURE_MAGIC {
            return Err(Error::Format {
                offset: 0,
                record: None,
                detail: format!("bad magic {magic:?}, expected ZSFT"),
            });
        }
        let version = r.u16(None, "version")?;
        if version != FEATURE_VERSION {
            return Err(Error::Format {
                offset: 4,
                record: None,
                detail: format!("unsupported version {version}"),
            });
        }
        let at = r.offset;
        let modality = Modality::from_byte(r.u8(None, "modality")?).ok_or(Error::Format {
            offset: at,
            record: None,
            detail: "invalid modality tag".into(),
        })?;
        let locations = r.u32(None, "L")? as usize;
        let channels = r.u32(None, "C")? as usize;
        let count = r.u64(None, "N")?;
        let per_item = locations * channels;
        if count > 0 && per_item == 0 {
            return Err(Error::Format {
                offset: r.offset,
                record: Some(0),
                detail: format!("items present but map shape is {locations}x{channels}"),
            });
        }
        let mut set = FeatureSet::new(modality, locations, channels);
        let mut buf = vec![0u8; per_item * 4];
        for index in 0..count as usize {
            let id = r.u64(Some(index), "item id")?;
            let class = r.u32(Some(index), "class")?;
            r.fill(&mut buf, Some(index), "feature values")?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            set.items.push(FeatureItem { id, class, data });
        }
        r.expect_eof()?;
        Ok(set)
    }
}

/// Reads a `ZSFT` file.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let file = File::open(path)?;
    FeatureSet::read_from(BufReader::new(file))
}

pub fn write_features(path: impl AsRef<Path>, set: &FeatureSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    set.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Tracks the byte offset so format errors can point at the damage.
pub(crate) struct CountingReader<R> {
    inner: R,
    pub offset: u64,
}

impl<R: Read> CountingReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn fill(&mut self, buf: &mut [u8], record: Option<usize>, what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(Error::Format {
                offset: self.offset,
                record,
                detail: format!("truncated while reading {what}"),
            }),
            Err(e) => Err(e.into()),
        }
    }

    pub fn u8(&mut self, record: Option<usize>, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b, record, what)?;
        Ok(b[0])
    }

    pub fn u16(&mut self, record: Option<usize>, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.fill(&mut b, record, what)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn u32(&mut self, record: Option<usize>, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, record, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self, record: Option<usize>, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, record, what)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn u128(&mut self, record: Option<usize>, what: &str) -> Result<u128> {
        let mut b = [0u8; 16];
        self.fill(&mut b, record, what)?;
        Ok(u128::from_le_bytes(b))
    }

    pub fn f64(&mut self, record: Option<usize>, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(record, what)?))
    }

    pub fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::Format {
                offset: self.offset,
                record: None,
                detail: "trailing bytes after last record".into(),
            }),
        }
    }
}

/// Parses `id<TAB>name` lines.
pub fn parse_class_names(text: &str) -> Result<BTreeMap<u32, String>> {
    let mut names = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, name) = line.split_once('\t').ok_or_else(|| {
            Error::Dataset(format!("class names line {}: expected id<TAB>name", lineno + 1))
        })?;
        let id: u32 = id.trim().parse().map_err(|_| {
            Error::Dataset(format!("class names line {}: bad id {id:?}", lineno + 1))
        })?;
        names.insert(id, name.trim().to_string());
    }
    Ok(names)
}

pub fn class_names_to_text(names: &BTreeMap<u32, String>) -> String {
    names.iter().map(|(id, n)| format!("{id}\t{n}\n")).collect()
}

/// Sketch and image features plus the class-name table.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub sketches: FeatureSet,
    pub images: FeatureSet,
    pub class_names: BTreeMap<u32, String>,
}

impl FeatureStore {
    pub fn new(
        sketches: FeatureSet,
        images: FeatureSet,
        class_names: BTreeMap<u32, String>,
    ) -> Result<Self> {
        if sketches.modality != Modality::Sketch || images.modality != Modality::Image {
            return Err(Error::Dataset("feature files have swapped modalities".into()));
        }
        for item in sketches.items.iter().chain(&images.items) {
            if !class_names.contains_key(&item.class) {
                return Err(Error::Dataset(format!(
                    "item {} has class {} with no name",
                    item.id, item.class
                )));
            }
        }
        Ok(Self {
            sketches,
            images,
            class_names,
        })
    }

    pub fn load(
        sketch_path: impl AsRef<Path>,
        image_path: impl AsRef<Path>,
        names_path: impl AsRef<Path>,
    ) -> Result<Self> {
        let names = parse_class_names(&std::fs::read_to_string(names_path)?)?;
        Self::new(load_features(sketch_path)?, load_features(image_path)?, names)
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.class_names.keys().copied().collect()
    }
}
