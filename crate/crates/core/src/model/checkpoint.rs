//! Binary checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "ULRN1"
//! header_len, header bytes      -- UTF-8 "key=value\n" lines, keys sorted
//! tensor_count
//! per tensor: name_len, name bytes, rank, dims[rank], f32 values (row-major)
//! ```
//!
//! Adapter tensors use the `lora.` name prefix and optimizer moments use
//! `opt.`; everything else is a model weight in canonical order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{LoraAdapter, LoraAdapters, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 5] = b"ULRN1";
pub const LORA_PREFIX: &str = "lora.";
pub const OPT_PREFIX: &str = "opt.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(format!("non-UTF-8 text: {e}")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let header: String = self.header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_u32(&mut out, header.len());
        out.extend_from_slice(header.as_bytes());
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a ULRN1 checkpoint".into()));
        }
        let mut header = BTreeMap::new();
        for line in r.string()?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("header line without '=': {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let bytes = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        Checkpoint::from_bytes(&buf)
    }

    pub fn from_model<T: Scalar>(params: &ModelParams<T>) -> Self {
        let mut header = BTreeMap::new();
        for (k, v) in params.config.to_header() {
            header.insert(k, v);
        }
        let tensors = params.named().map(|(n, t)| (n.to_string(), t.cast())).collect();
        Checkpoint { header, tensors }
    }

    pub fn with_header(mut self, key: &str, value: impl ToString) -> Self {
        self.header.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.get(key).map(String::as_str)
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing header key {key}")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value for {key}: {raw:?}")))
    }

    pub fn add_adapters<T: Scalar>(&mut self, adapters: &LoraAdapters<T>) {
        self.header.insert("lora.rank".into(), adapters.rank.to_string());
        self.header.insert("lora.alpha".into(), format!("{:?}", adapters.alpha));
        for ad in &adapters.adapters {
            self.tensors.push((format!("{LORA_PREFIX}{}.A", ad.target), ad.a.cast()));
            self.tensors.push((format!("{LORA_PREFIX}{}.B", ad.target), ad.b.cast()));
        }
    }

    pub fn add_tensor<T: Scalar>(&mut self, name: String, t: &Tensor<T>) {
        self.tensors.push((name, t.cast()));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            vocab_size: self.parse("model.vocab_size")?,
            d_model: self.parse("model.d_model")?,
            n_layers: self.parse("model.n_layers")?,
            n_heads: self.parse("model.n_heads")?,
            context_len: self.parse("model.context_len")?,
            seed: self.parse("model.seed")?,
        })
    }

    pub fn model<T: Scalar>(&self) -> Result<ModelParams<T>> {
        let config = self.model_config()?;
        let named = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(LORA_PREFIX) && !n.starts_with(OPT_PREFIX))
            .map(|(n, t)| (n.clone(), t.cast()))
            .collect();
        ModelParams::from_named(config, named)
    }

    pub fn adapters<T: Scalar>(&self) -> Result<Option<LoraAdapters<T>>> {
        let lora: Vec<_> = self.tensors.iter().filter(|(n, _)| n.starts_with(LORA_PREFIX)).collect();
        if lora.is_empty() {
            return Ok(None);
        }
        let rank = self.parse("lora.rank")?;
        let alpha = self.parse("lora.alpha")?;
        if lora.len() % 2 != 0 {
            return Err(Error::Checkpoint("unpaired adapter tensors".into()));
        }
        let mut adapters = Vec::new();
        for pair in lora.chunks(2) {
            let (na, a) = pair[0];
            let (nb, b) = pair[1];
            let target = na
                .strip_prefix(LORA_PREFIX)
                .and_then(|s| s.strip_suffix(".A"))
                .ok_or_else(|| Error::Checkpoint(format!("unexpected adapter tensor {na}")))?;
            if nb != &format!("{LORA_PREFIX}{target}.B") {
                return Err(Error::Checkpoint(format!("expected B for {target}, found {nb}")));
            }
            adapters.push(LoraAdapter {
                target: target.to_string(),
                a: a.cast(),
                b: b.cast(),
            });
        }
        Ok(Some(LoraAdapters { rank, alpha, adapters }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{init, tests::tiny, LoraConfig};
    use super::*;

    #[test]
    fn round_trip_is_byte_exact() {
        let params = init::<f32>(&tiny()).unwrap();
        let mut lora = LoraAdapters::init(&params, &LoraConfig::default()).unwrap();
        lora.adapters[1].b.data_mut()[3] = 0.125;
        let mut ck = Checkpoint::from_model(&params).with_header("tag", "base");
        ck.add_adapters(&lora);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..5], b"ULRN1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model::<f32>().unwrap(), params);
        assert_eq!(back.adapters::<f32>().unwrap().unwrap(), lora);
        assert_eq!(back.get("tag"), Some("base"));
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let params = init::<f32>(&tiny()).unwrap();
        let bytes = Checkpoint::from_model(&params).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE!").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
