//! Binary checkpoint format.
//!
//! ```text
//! magic    4 bytes  "QTE1"
//! version  u32 LE
//! speclen  u32 LE
//! spec     speclen bytes of UTF-8 JSON (GraphSpec)
//! params   f32 LE, each parameter tensor in declaration order
//! ```
//!
//! Declaration order is trunk blocks first, then exit heads in spec order,
//! weight before bias. The parameter shapes are implied by the `GraphSpec`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{build_graph, GraphSpec, NetworkGraph};
use crate::tensor::Rng;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"QTE1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(graph: &NetworkGraph, out: &mut impl Write) -> Result<()> {
    let spec = serde_json::to_vec(graph.spec())?;
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(spec.len() as u32).to_le_bytes())?;
    out.write_all(&spec)?;
    let mut buf = Vec::with_capacity(graph.params().numel() * 4);
    for (_, p) in graph.params().iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<NetworkGraph> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(4, "checkpoint header")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint".into(),
            expected: u32::from_be_bytes(CHECKPOINT_MAGIC),
            found: u32::from_be_bytes(magic.try_into().expect("4 bytes")),
        });
    }
    let version = cur.u32("checkpoint header")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let len = cur.u32("checkpoint header")? as usize;
    let spec: GraphSpec = serde_json::from_slice(cur.take(len, "checkpoint spec")?)
        .map_err(|e| Error::Format(format!("checkpoint spec is not a valid graph spec: {e}")))?;
    let mut graph = build_graph(spec, &mut Rng::new(0, 0))?;
    let expected = graph.params().numel() * 4;
    let payload = cur.rest();
    if payload.len() != expected {
        let what = if payload.len() < expected {
            "checkpoint params"
        } else {
            "checkpoint params (trailing bytes)"
        };
        return Err(Error::Truncated {
            what: what.into(),
            expected,
            actual: payload.len(),
        });
    }
    let mut chunks = payload.chunks_exact(4);
    for (_, p) in graph.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v = f32::from_le_bytes(chunks.next().expect("length checked").try_into().expect("4 bytes"));
        }
    }
    Ok(graph)
}

pub fn save_checkpoint(graph: &NetworkGraph, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(graph, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NetworkGraph> {
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    read_checkpoint(&mut f)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let avail = self.bytes.len() - self.pos;
        if avail < n {
            return Err(Error::Truncated {
                what: what.into(),
                expected: n,
                actual: avail,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}
