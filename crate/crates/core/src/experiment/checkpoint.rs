//! Server checkpoints: a text header followed by raw little-endian doubles.
//!
//! ```text
//! fedflat-checkpoint v1
//! round 300
//! n_models 4
//! params 6
//! block dense1.weight 2x2 0
//! block dense1.bias 2 4
//! vectors theta momentum swa_theta
//! data
//! <3 × 6 f64 values>
//! ```

use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::autodiff::{Layout, ParamVector};
use crate::error::{Error, Result};
use crate::federation::ServerState;

const MAGIC: &str = "fedflat-checkpoint v1";
const VECTORS: [&str; 3] = ["theta", "momentum", "swa_theta"];

pub fn encode_checkpoint(state: &ServerState) -> Vec<u8> {
    let layout = state.theta.layout();
    let mut head = format!(
        "{MAGIC}\nround {}\nn_models {}\nparams {}\n",
        state.round,
        state.n_models,
        layout.len()
    );
    for e in layout.entries() {
        let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        head.push_str(&format!("block {} {} {}\n", e.name, dims.join("x"), e.offset));
    }
    head.push_str(&format!("vectors {}\ndata\n", VECTORS.join(" ")));
    let mut out = head.into_bytes();
    for v in [&state.theta, &state.momentum, &state.swa_theta] {
        for x in v.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ServerState> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err(start, "unterminated header line"))?;
        *pos = start + end + 1;
        let line =
            std::str::from_utf8(&bytes[start..start + end]).map_err(|_| format_err(start, "header is not UTF-8"))?;
        Ok((start, line.to_string()))
    };
    let field = |line: &str, at: usize, key: &str| -> Result<usize> {
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| format_err(at, format!("expected `{key} <n>`, found `{line}`")))
    };
    let (at, magic) = next_line(&mut pos)?;
    if magic != MAGIC {
        return Err(format_err(at, "not a checkpoint file"));
    }
    let (at, l) = next_line(&mut pos)?;
    let round = field(&l, at, "round")?;
    let (at, l) = next_line(&mut pos)?;
    let n_models = field(&l, at, "n_models")?;
    let (at, l) = next_line(&mut pos)?;
    let len = field(&l, at, "params")?;
    let mut blocks = Vec::new();
    loop {
        let (at, l) = next_line(&mut pos)?;
        if let Some(rest) = l.strip_prefix("block ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            let shape: Option<Vec<usize>> = parts
                .get(1)
                .and_then(|s| s.split('x').map(|d| d.parse().ok()).collect::<Option<Vec<usize>>>());
            match (parts.len(), shape) {
                (3, Some(shape)) => blocks.push((parts[0].to_string(), shape)),
                _ => return Err(format_err(at, format!("malformed block line `{l}`"))),
            }
        } else if l == format!("vectors {}", VECTORS.join(" ")) {
            break;
        } else {
            return Err(format_err(at, format!("unexpected header line `{l}`")));
        }
    }
    let (at, l) = next_line(&mut pos)?;
    if l != "data" {
        return Err(format_err(at, "expected `data`"));
    }
    let layout = Arc::new(Layout::new(blocks));
    if layout.len() != len {
        return Err(format_err(
            0,
            format!("blocks cover {} values, header says {len}", layout.len()),
        ));
    }
    let need = 3 * len * 8;
    let body = &bytes[pos..];
    if body.len() != need {
        return Err(format_err(
            pos + body.len().min(need),
            format!("expected {need} data bytes, found {}", body.len()),
        ));
    }
    let mut vecs = body.chunks_exact(len * 8).map(|c| {
        let data = c
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        ParamVector::from_vec(Arc::clone(&layout), data)
    });
    let mut take = || vecs.next().expect("three vectors");
    Ok(ServerState {
        theta: take()?,
        momentum: take()?,
        swa_theta: take()?,
        n_models,
        round,
    })
}

pub fn write_checkpoint(path: &Path, state: &ServerState) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(state))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ServerState> {
    decode_checkpoint(&fs::read(path)?)
}
