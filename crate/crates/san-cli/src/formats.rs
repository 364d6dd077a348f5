//! Binary file formats. Everything is little-endian; floats are stored as
//! f32 (in-memory values sit on the f32 grid, so round-trips are exact).
//!
//! Checkpoint:       "SANCK1" | u32 count | entries
//! Optimizer state:  "SANOS1" | u64 step | u32 count | entries
//! Dataset:          "SANDS1" | u32 count | utterances
//! entry:            u16 name_len | name | u32 rank | u32 dims[rank] | f32 data
//! utterance:        u32 T | u32 d | u32 L | f32 feats[T*d] | u32 ids[L]
//!                   | u16 id_len | utf8 id

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use san_core::optim::AdamState;
use san_core::synth::{Dataset, FeatureSequence, FIRST_TOKEN_ID};
use san_core::{Params, Tensor};

use crate::errors::{CmdError, CmdResult};

pub const CKPT_MAGIC: &[u8; 6] = b"SANCK1";

fn open(path: &Path) -> CmdResult<File> {
    File::open(path).map_err(|e| {
        let msg = format!("{}: {e}", path.display());
        if e.kind() == std::io::ErrorKind::NotFound {
            CmdError::usage(msg)
        } else {
            CmdError::io(msg)
        }
    })
}
pub const OPT_MAGIC: &[u8; 6] = b"SANOS1";
pub const DATA_MAGIC: &[u8; 6] = b"SANDS1";

/// Reader that tracks its byte offset so corruption errors can name it.
struct Cursor<R: Read> {
    inner: R,
    offset: u64,
    path: String,
}

impl<R: Read> Cursor<R> {
    fn new(inner: R, path: &Path) -> Self {
        Cursor {
            inner,
            offset: 0,
            path: path.display().to_string(),
        }
    }

    fn fail(&self, what: &str) -> CmdError {
        CmdError::io(format!(
            "{}: {} at byte offset {}",
            self.path, what, self.offset
        ))
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> CmdResult<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| self.fail(&format!("truncated while reading {what}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u16(&mut self, what: &str) -> CmdResult<u16> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> CmdResult<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> CmdResult<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f32s(&mut self, n: usize, what: &str) -> CmdResult<Vec<f64>> {
        let mut bytes = vec![0u8; n * 4];
        self.read_exact(&mut bytes, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn string(&mut self, len: usize, what: &str) -> CmdResult<String> {
        let mut bytes = vec![0u8; len];
        self.read_exact(&mut bytes, what)?;
        String::from_utf8(bytes).map_err(|_| self.fail(&format!("{what} is not UTF-8")))
    }

    fn expect_eof(&mut self, what: &str) -> CmdResult<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            _ => Err(self.fail(&format!("trailing bytes after {what}"))),
        }
    }
}

fn write_entry<W: Write>(w: &mut W, name: &str, t: &Tensor) -> CmdResult<()> {
    let name_bytes = name.as_bytes();
    if name_bytes.len() > u16::MAX as usize {
        return Err(CmdError::usage(format!("parameter name too long: {name}")));
    }
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_entry<R: Read>(c: &mut Cursor<R>, idx: usize) -> CmdResult<(String, Tensor)> {
    let what = format!("entry {idx}");
    let name_len = c.u16(&what)? as usize;
    let name = c.string(name_len, &format!("{what} name"))?;
    let rank = c.u32(&format!("{what} rank"))? as usize;
    if rank > 8 {
        return Err(c.fail(&format!("{what}: implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let d = c.u32(&format!("{what} dims"))? as usize;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| c.fail(&format!("{what}: dimension overflow")))?;
        dims.push(d);
    }
    if numel > 100_000_000 {
        return Err(c.fail(&format!("{what}: implausible element count {numel}")));
    }
    let data = c.f32s(numel, &format!("{what} values"))?;
    let t = Tensor::new(dims, data).map_err(|e| c.fail(&format!("{what}: {e}")))?;
    Ok((name, t))
}

pub fn write_checkpoint(path: &Path, params: &Params) -> CmdResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        write_entry(&mut w, name, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> CmdResult<Params> {
    let mut c = Cursor::new(BufReader::new(open(path)?), path);
    let mut magic = [0u8; 6];
    c.read_exact(&mut magic, "magic")?;
    if &magic != CKPT_MAGIC {
        return Err(c.fail("bad magic (expected SANCK1)"));
    }
    let count = c.u32("parameter count")? as usize;
    let mut params = Params::new();
    for i in 0..count {
        let (name, t) = read_entry(&mut c, i)?;
        params.insert(&name, t);
    }
    if params.len() != count {
        return Err(c.fail("duplicate parameter names"));
    }
    c.expect_eof("checkpoint")?;
    Ok(params)
}

pub fn write_opt_state(path: &Path, state: &AdamState) -> CmdResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(OPT_MAGIC)?;
    w.write_all(&state.step.to_le_bytes())?;
    w.write_all(&((state.m.len() + state.v.len()) as u32).to_le_bytes())?;
    for (name, t) in &state.m {
        write_entry(&mut w, &format!("m:{name}"), t)?;
    }
    for (name, t) in &state.v {
        write_entry(&mut w, &format!("v:{name}"), t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_opt_state(path: &Path) -> CmdResult<AdamState> {
    let mut c = Cursor::new(BufReader::new(open(path)?), path);
    let mut magic = [0u8; 6];
    c.read_exact(&mut magic, "magic")?;
    if &magic != OPT_MAGIC {
        return Err(c.fail("bad magic (expected SANOS1)"));
    }
    let step = c.u64("step counter")?;
    let count = c.u32("entry count")? as usize;
    let mut m = std::collections::BTreeMap::new();
    let mut v = std::collections::BTreeMap::new();
    for i in 0..count {
        let (name, t) = read_entry(&mut c, i)?;
        if let Some(rest) = name.strip_prefix("m:") {
            m.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("v:") {
            v.insert(rest.to_string(), t);
        } else {
            return Err(c.fail(&format!("entry {i}: name {name} lacks m:/v: prefix")));
        }
    }
    if m.len() != v.len() {
        return Err(c.fail("mismatched moment entries"));
    }
    c.expect_eof("optimizer state")?;
    Ok(AdamState { step, m, v })
}

pub fn write_dataset(path: &Path, set: &Dataset) -> CmdResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATA_MAGIC)?;
    w.write_all(&(set.items.len() as u32).to_le_bytes())?;
    for item in &set.items {
        let (t, d) = item.features.rows_cols();
        w.write_all(&(t as u32).to_le_bytes())?;
        w.write_all(&(d as u32).to_le_bytes())?;
        w.write_all(&(item.tokens.len() as u32).to_le_bytes())?;
        for &v in item.features.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        for &id in &item.tokens {
            w.write_all(&(id as u32).to_le_bytes())?;
        }
        let id_bytes = item.utterance_id.as_bytes();
        w.write_all(&(id_bytes.len() as u16).to_le_bytes())?;
        w.write_all(id_bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> CmdResult<Dataset> {
    let mut c = Cursor::new(BufReader::new(open(path)?), path);
    let mut magic = [0u8; 6];
    c.read_exact(&mut magic, "magic")?;
    if &magic != DATA_MAGIC {
        return Err(c.fail("bad magic (expected SANDS1)"));
    }
    let count = c.u32("utterance count")? as usize;
    let mut items = Vec::with_capacity(count.min(1 << 20));
    let mut dim: Option<usize> = None;
    for i in 0..count {
        let what = format!("utterance record {i}");
        let t = c.u32(&format!("{what} frame count"))? as usize;
        let d = c.u32(&format!("{what} feature dim"))? as usize;
        let l = c.u32(&format!("{what} target length"))? as usize;
        if t == 0 || d == 0 {
            return Err(c.fail(&format!("{what}: empty shape {t}x{d}")));
        }
        if let Some(expect) = dim {
            if d != expect {
                return Err(c.fail(&format!(
                    "{what}: feature dim {d} differs from {expect}"
                )));
            }
        } else {
            dim = Some(d);
        }
        if t.saturating_mul(d) > 100_000_000 {
            return Err(c.fail(&format!("{what}: implausible size {t}x{d}")));
        }
        let data = c.f32s(t * d, &format!("{what} features"))?;
        let mut tokens = Vec::with_capacity(l);
        for _ in 0..l {
            let id = c.u32(&format!("{what} token ids"))? as usize;
            if id < FIRST_TOKEN_ID {
                return Err(c.fail(&format!("{what}: reserved token id {id} in target")));
            }
            tokens.push(id);
        }
        let id_len = c.u16(&format!("{what} utterance-id length"))? as usize;
        let utterance_id = c.string(id_len, &format!("{what} utterance id"))?;
        items.push(FeatureSequence {
            features: Tensor::new(vec![t, d], data)
                .map_err(|e| c.fail(&format!("{what}: {e}")))?,
            tokens,
            utterance_id,
        });
    }
    c.expect_eof("dataset")?;
    Ok(Dataset { items })
}

/// UTF-8 text, one token string per line; line index is the token id.
/// Lines 0 and 1 must be the literals `<blk>` and `<s>`.
pub fn write_vocab(path: &Path, n_tokens: usize) -> CmdResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "<blk>")?;
    writeln!(w, "<s>")?;
    for i in 0..n_tokens {
        writeln!(w, "{}", token_name(i, n_tokens))?;
    }
    w.flush()?;
    Ok(())
}

/// Letters while they last, `t<N>` beyond.
pub fn token_name(index: usize, n_tokens: usize) -> String {
    if n_tokens <= 26 {
        char::from(b'a' + index as u8).to_string()
    } else {
        format!("t{index}")
    }
}

pub fn read_vocab(path: &Path) -> CmdResult<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CmdError::io(format!("{}: {e}", path.display())))?;
    let lines: Vec<String> = text.lines().map(str::to_string).collect();
    if lines.len() < 3 {
        return Err(CmdError::io(format!(
            "{}: vocabulary needs blank, sentinel, and at least one token",
            path.display()
        )));
    }
    if lines[0] != "<blk>" || lines[1] != "<s>" {
        return Err(CmdError::io(format!(
            "{}: lines 0 and 1 must be <blk> and <s>",
            path.display()
        )));
    }
    Ok(lines)
}

/// Dataset-vs-model consistency check used by train and eval.
pub fn validate_dataset(set: &Dataset, feature_dim: usize, vocab_size: usize) -> CmdResult<()> {
    for item in &set.items {
        let (_, d) = item.features.rows_cols();
        if d != feature_dim {
            return Err(CmdError::usage(format!(
                "utterance {}: feature dim {d} does not match configured {feature_dim}",
                item.utterance_id
            )));
        }
        if let Some(&bad) = item.tokens.iter().find(|&&id| id >= vocab_size) {
            return Err(CmdError::usage(format!(
                "utterance {}: token id {bad} >= vocabulary size {vocab_size}",
                item.utterance_id
            )));
        }
    }
    Ok(())
}
