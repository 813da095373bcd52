//! Binary checkpoint container.
//!
//! ```text
//! magic "HREDCKPT" | u32 version
//! u8 variant | u8 summary | u8 maxout | u64 |V| | u64 d_e | u64 d_h | u64 d_c
//! [32] vocabulary hash (zeros when no vocabulary is attached)
//! u32 n_meta    { str key | str value }
//! u32 n_tokens  { str token }
//! u32 n_tensors { str name | u32 ndim | u64 dims... | f64 values... }
//! [32] sha256 of everything above
//! ```
//!
//! Integers and floats are little-endian; `str` is a u32 byte length followed
//! by UTF-8. Tensors are the model parameters in creation order followed by
//! any extra tensors (e.g. optimizer moments).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DialogueModel, ModelConfig, ModelError, Result, Summary, Variant};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HREDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DialogueModel,
    /// Tokens in id order; the header carries their hash.
    pub vocab: Option<Vec<String>>,
    pub meta: BTreeMap<String, String>,
    /// Named tensors that are not model parameters.
    pub extra: Vec<(String, Tensor)>,
}

fn vocab_hash(tokens: &[String]) -> [u8; 32] {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.as_bytes());
        h.update(b"\n");
    }
    h.finalize().into()
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(bad("truncated file"));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("dimension overflows usize"))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8"))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str()?;
        let ndim = self.u32()? as usize;
        if ndim == 0 || ndim > 4 {
            return Err(bad(format!("tensor {name}: bad rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len()))
            .ok_or_else(|| bad(format!("tensor {name}: bad shape {shape:?}")))?;
        let bytes = self.take(n * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

fn variant_tag(v: Variant) -> u8 {
    match v {
        Variant::RnnLm => 0,
        Variant::Hred => 1,
        Variant::HredBi => 2,
    }
}

impl Checkpoint {
    pub fn new(model: DialogueModel) -> Self {
        Checkpoint {
            model,
            vocab: None,
            meta: BTreeMap::new(),
            extra: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.model.config;
        if let Some(v) = &self.vocab {
            if v.len() != c.vocab_size {
                return Err(bad(format!(
                    "vocabulary has {} tokens but the model expects {}",
                    v.len(),
                    c.vocab_size
                )));
            }
        }
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u8(variant_tag(c.variant));
        w.u8(match c.summary {
            Summary::Concat => 0,
            Summary::L2Pool => 1,
        });
        w.u8(c.maxout as u8);
        for d in [c.vocab_size, c.d_e, c.d_h, c.d_c] {
            w.u64(d as u64);
        }
        let hash = self.vocab.as_deref().map(vocab_hash).unwrap_or([0; 32]);
        w.buf.extend_from_slice(&hash);
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        let tokens = self.vocab.as_deref().unwrap_or(&[]);
        w.u32(tokens.len() as u32);
        for t in tokens {
            w.str(t);
        }
        w.u32((self.model.params.len() + self.extra.len()) as u32);
        for (_, name, t) in self.model.params.iter() {
            w.tensor(name, t);
        }
        for (name, t) in &self.extra {
            w.tensor(name, t);
        }
        let digest: [u8; 32] = Sha256::digest(&w.buf).into();
        w.buf.extend_from_slice(&digest);
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: &body[8..] };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let variant = match r.u8()? {
            0 => Variant::RnnLm,
            1 => Variant::Hred,
            2 => Variant::HredBi,
            t => return Err(bad(format!("unknown variant tag {t}"))),
        };
        let summary = match r.u8()? {
            0 => Summary::Concat,
            1 => Summary::L2Pool,
            t => return Err(bad(format!("unknown summary tag {t}"))),
        };
        let maxout = match r.u8()? {
            0 => false,
            1 => true,
            t => return Err(bad(format!("bad maxout flag {t}"))),
        };
        let (vocab_size, d_e, d_h, d_c) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let n_meta = r.u32()?;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let k = r.str()?;
            meta.insert(k, r.str()?);
        }
        let n_tokens = r.u32()? as usize;
        let vocab = if n_tokens == 0 {
            None
        } else {
            let toks = (0..n_tokens).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
            if vocab_hash(&toks) != hash {
                return Err(bad("vocabulary hash mismatch"));
            }
            Some(toks)
        };
        let config = ModelConfig {
            variant,
            vocab_size,
            d_e,
            d_h,
            d_c,
            summary,
            maxout,
        };
        let mut model = DialogueModel::new(config, 0)?;
        let n_tensors = r.u32()? as usize;
        if n_tensors < model.params.len() {
            return Err(bad("missing model tensors"));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let (name, t) = r.tensor()?;
            if name != model.params.name(id) || t.shape() != model.params.get(id).shape() {
                return Err(bad(format!(
                    "expected {} {:?}, found {name} {:?}",
                    model.params.name(id),
                    model.params.get(id).shape(),
                    t.shape()
                )));
            }
            *model.params.get_mut(id) = t;
        }
        let extra = (model.params.len()..n_tensors)
            .map(|_| r.tensor())
            .collect::<Result<Vec<_>>>()?;
        if !r.buf.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            model,
            vocab,
            meta,
            extra,
        })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Writes via a temporary file and rename so readers never see a partial
    /// checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Header vocabulary hash as hex (all zeros without a vocabulary).
    pub fn vocab_hash_hex(&self) -> String {
        let h = self.vocab.as_deref().map(vocab_hash).unwrap_or([0; 32]);
        h.iter().map(|b| format!("{b:02x}")).collect()
    }
}
