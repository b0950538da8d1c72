//! Binary checkpoint (`ZSIH`): config, weights, Adam state, iteration and
//! RNG position, so a resumed run continues the exact same trajectory.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ZsihConfig;
use super::model::ModelParams;
use crate::data::features::CountingReader;
use crate::error::{Error, Result};
use crate::objective::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ZSIH";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ZsihConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed optimizer steps.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

fn write_tensors(w: &mut impl Write, params: &ModelParams) -> io::Result<()> {
    let named = params.named();
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, t) in named {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.nrows() as u32).to_le_bytes())?;
        w.write_all(&(t.ncols() as u32).to_le_bytes())?;
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn format_err(offset: u64, record: Option<usize>, detail: String) -> Error {
    Error::Format {
        offset,
        record,
        detail,
    }
}

/// Fills `into` (already shaped by the config) from a tensor block.
fn read_tensors<R: Read>(r: &mut CountingReader<R>, into: &mut ModelParams, block: &str) -> Result<()> {
    let at = r.offset;
    let count = r.u32(None, "tensor count")? as usize;
    let mut slots = into.named_mut();
    if count != slots.len() {
        return Err(format_err(
            at,
            None,
            format!("{block}: {count} tensors, config implies {}", slots.len()),
        ));
    }
    for (index, (name, t)) in slots.iter_mut().enumerate() {
        let at = r.offset;
        let len = r.u32(Some(index), "name length")? as usize;
        if len > 4096 {
            return Err(format_err(at, Some(index), format!("{block}: name length {len}")));
        }
        let mut buf = vec![0u8; len];
        r.fill(&mut buf, Some(index), "name")?;
        if buf != name.as_bytes() {
            return Err(format_err(
                at,
                Some(index),
                format!("{block}: expected tensor {name}, found {:?}", String::from_utf8_lossy(&buf)),
            ));
        }
        let at = r.offset;
        let rows = r.u32(Some(index), "rows")? as usize;
        let cols = r.u32(Some(index), "cols")? as usize;
        if (rows, cols) != t.dim() {
            return Err(format_err(
                at,
                Some(index),
                format!("{block}: {name} is {rows}x{cols}, config implies {:?}", t.dim()),
            ));
        }
        for v in t.iter_mut() {
            *v = r.f64(Some(index), "tensor value")?;
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = self.config.to_text();
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg.as_bytes())?;
        write_tensors(w, &self.params)?;

        w.write_all(&self.adam.step.to_le_bytes())?;
        for v in [self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps] {
            w.write_all(&v.to_le_bytes())?;
        }
        write_tensors(w, &self.adam.m)?;
        write_tensors(w, &self.adam.v)?;

        w.write_all(&self.iteration.to_le_bytes())?;
        w.write_all(&self.rng.get_seed())?;
        w.write_all(&self.rng.get_stream().to_le_bytes())?;
        w.write_all(&self.rng.get_word_pos().to_le_bytes())?;
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
        if &magic != CHECKPOINT_MAGIC {
            return Err(format_err(0, None, format!("bad magic {magic:?}, expected ZSIH")));
        }
        let version = r.u16(None, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err(4, None, format!("unsupported version {version}")));
        }
        let at = r.offset;
        let len = r.u32(None, "config length")? as usize;
        if len > 1 << 20 {
            return Err(format_err(at, None, format!("config block of {len} bytes")));
        }
        let mut buf = vec![0u8; len];
        r.fill(&mut buf, None, "config")?;
        let text = String::from_utf8(buf)
            .map_err(|_| format_err(at + 4, None, "config block is not UTF-8".into()))?;
        let config = ZsihConfig::parse_text(&text)?;

        let mut params = ModelParams::zeros(&config)?;
        read_tensors(&mut r, &mut params, "params")?;

        let step = r.u64(None, "adam step")?;
        let lr = r.f64(None, "adam lr")?;
        let beta1 = r.f64(None, "adam beta1")?;
        let beta2 = r.f64(None, "adam beta2")?;
        let eps = r.f64(None, "adam eps")?;
        let mut adam = AdamState::new(&params, lr, beta1, beta2, eps);
        adam.step = step;
        read_tensors(&mut r, &mut adam.m, "adam m")?;
        read_tensors(&mut r, &mut adam.v, "adam v")?;

        let iteration = r.u64(None, "iteration")?;
        let mut seed = [0u8; 32];
        r.fill(&mut seed, None, "rng seed")?;
        let stream = r.u64(None, "rng stream")?;
        let word_pos = r.u128(None, "rng position")?;
        r.expect_eof()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(Self {
            config,
            params,
            adam,
            iteration,
            rng,
        })
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::read_from(BufReader::new(File::open(path)?))
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    ckpt.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}
