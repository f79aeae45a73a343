//! Parameter checkpoints: a text manifest followed by raw little-endian f64.
//!
//! ```text
//! tubelet-params 1
//! encoder.embed.w 384x32 0
//! encoder.embed.b 32 98304
//! END
//! <bytes>
//! ```
//!
//! Offsets are byte positions relative to the first byte after the `END` line.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::params::{Gradients, ModelParams};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "tubelet-params 1";

pub fn write_params<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    let mut offset = 0usize;
    for (name, t) in params.names.iter().zip(&params.values) {
        let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        writeln!(w, "{name} {} {offset}", shape.join("x"))?;
        offset += t.len() * 8;
    }
    writeln!(w, "END")?;
    for t in &params.values {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_params<R: Read>(r: R) -> Result<ModelParams> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Format(format!("not a parameter checkpoint (header {:?})", line.trim_end())));
    }
    let mut entries = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("checkpoint manifest has no END line".into()));
        }
        let l = line.trim_end();
        if l == "END" {
            break;
        }
        let parts: Vec<&str> = l.split(' ').collect();
        let [name, shape, offset] = parts[..] else {
            return Err(Error::Format(format!("bad manifest line {l:?}")));
        };
        let shape = shape
            .split('x')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("bad shape in {l:?}: {e}")))?;
        let offset: usize = offset
            .parse()
            .map_err(|e| Error::Format(format!("bad offset in {l:?}: {e}")))?;
        entries.push((name.to_string(), shape, offset));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut names = Vec::with_capacity(entries.len());
    let mut values = Vec::with_capacity(entries.len());
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        let end = offset + n * 8;
        let raw = bytes
            .get(offset..end)
            .ok_or_else(|| Error::Format(format!("tensor {name} runs past the end of the data")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        values.push(Tensor::from_vec(&shape, data)?);
        names.push(name);
    }
    Ok(ModelParams {
        names,
        grads: Gradients::zeros_like(&values),
        values,
    })
}

pub fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_params(params, std::io::BufWriter::new(f))
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    let f = std::fs::File::open(path)?;
    read_params(f)
}

/// Checks that a loaded store has exactly the tensors `expected` declares.
pub fn check_compatible(loaded: &ModelParams, expected: &ModelParams) -> Result<()> {
    if loaded.names != expected.names {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {} with different names",
            loaded.names.len(),
            expected.names.len()
        )));
    }
    for ((name, a), b) in loaded.names.iter().zip(&loaded.values).zip(&expected.values) {
        if a.shape != b.shape {
            return Err(Error::Format(format!(
                "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                a.shape, b.shape
            )));
        }
    }
    Ok(())
}
