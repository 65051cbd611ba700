//! Named-tensor container with a JSON trailer.
//!
//! ```text
//! "ANCH" | u32 version | u32 count
//! count × ( u16 name_len | name | u8 rank | u32 dims[rank] | f32 payload )
//! u32 meta_len | meta (UTF-8 JSON)
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anchorpipe_tensor::{numel, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ANCH";
pub const VERSION: u32 = 1;
const HEADER_BYTES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Seq2au,
    Gan,
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Data(format!("invalid rng state: {what}"));
        if self.seed.len() != 64 {
            return Err(bad("seed length"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed digits"))?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything besides tensors needed to rebuild or resume a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub config: PipelineConfig,
    pub global_step: u64,
    #[serde(default)]
    pub rngs: BTreeMap<String, RngState>,
    #[serde(default)]
    pub adam_steps: BTreeMap<String, u64>,
    /// Fine-tuned vocabulary, in embedding-row order.
    #[serde(default)]
    pub vocab: Option<Vec<String>>,
    /// Corpus average landmarks `[x0, y0, …]`.
    #[serde(default)]
    pub avg_flm: Option<Vec<f64>>,
    /// Source of the training AU+PS of a GAN run.
    #[serde(default)]
    pub aups_source: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            tensors: Vec::new(),
            meta,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose name starts with `prefix`, in file order, with the
    /// prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor<f32>)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::with_capacity(self.encoded_len_hint());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Contract("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::Contract(format!("duplicate tensor name {name:?}")));
            }
            let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Contract(format!("rank of {name} exceeds 255")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Contract(format!("dimension of {name} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let meta = serde_json::to_string(&self.meta).expect("checkpoint meta serializes");
        let meta_len = u32::try_from(meta.len()).map_err(|_| Error::Contract("metadata too large".into()))?;
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    fn encoded_len_hint(&self) -> usize {
        HEADER_BYTES
            + self
                .tensors
                .iter()
                .map(|(n, t)| record_len(n, t.shape()))
                .sum::<usize>()
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, source };
        if r.take(4)? != MAGIC {
            return Err(r.fail("bad magic bytes"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        // Smallest possible record: empty name, rank 0, one payload float.
        if count > r.remaining() / 7 {
            return Err(r.fail(format!("tensor count {count} exceeds file size")));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.fail("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = match n {
                Some(n) if n.checked_mul(4).is_some_and(|b| b <= r.remaining()) => n,
                _ => return Err(r.fail(format!("payload of {name} exceeds file size"))),
            };
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.iter().any(|(m, _): &(String, _)| *m == name) {
                return Err(r.fail(format!("duplicate tensor name {name:?}")));
            }
            tensors.push((name, Tensor::new(&shape, data)));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?).map_err(|_| r.fail("metadata is not UTF-8"))?;
        let meta: CheckpointMeta =
            serde_json::from_str(meta_text).map_err(|e| r.fail(format!("metadata: {e}")))?;
        if r.remaining() != 0 {
            return Err(r.fail(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn expect_kind(&self, kind: CheckpointKind, source: &str) -> Result<()> {
        if self.meta.kind == kind {
            Ok(())
        } else {
            Err(Error::format(
                source,
                0,
                format!("expected a {kind:?} checkpoint, found {:?}", self.meta.kind),
            ))
        }
    }
}

/// Bytes one tensor record occupies.
pub fn record_len(name: &str, shape: &[usize]) -> usize {
    2 + name.len() + 1 + 4 * shape.len() + 4 * numel(shape)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        // Byte offsets stand in for line numbers in binary files.
        Error::format(self.source, self.pos, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.fail(format!("truncated: needed {n} bytes, {} left", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
