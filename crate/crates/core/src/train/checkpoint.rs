//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic "LCBV" | version u32 = 1
//! kind    str                  ("vae" | "crnn")
//! config  str                  (JSON echo of the model config)
//! epoch u32 | tail count u32 | tail f64 × count | rng key u64 | rng counter u64
//! tensor count u32
//!   name str | trainable u8 | rank u32 | dims u32 × rank | data f32 × numel
//! crc32 u32                    (over every preceding byte)
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8. Tensors appear in
//! lexicographic name order, so equal models give equal bytes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::crnn::{Crnn, CrnnConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Rng, Tensor};
use crate::vae::{Vae, VaeConfig};

pub const MAGIC: &[u8; 4] = b"LCBV";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vae,
    Crnn,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Vae => "vae",
            ModelKind::Crnn => "crnn",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(ModelKind::Vae),
            "crnn" => Ok(ModelKind::Crnn),
            _ => Err(Error::InvalidArgument(format!("unknown model kind {s:?}"))),
        }
    }
}

/// Where training stood when the checkpoint was written.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingMeta {
    pub epoch: u32,
    /// Most recent epoch losses, oldest first.
    pub loss_tail: Vec<f64>,
    pub rng: Rng,
}

impl Default for TrainingMeta {
    fn default() -> Self {
        TrainingMeta {
            epoch: 0,
            loss_tail: Vec::new(),
            rng: Rng::new(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config_json: String,
    pub meta: TrainingMeta,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_vae(vae: &Vae<f32>, meta: TrainingMeta) -> Result<Self> {
        Ok(Checkpoint {
            kind: ModelKind::Vae,
            config_json: serde_json::to_string(&vae.config)?,
            meta,
            params: vae.params.clone(),
        })
    }

    pub fn from_crnn(crnn: &Crnn<f32>, meta: TrainingMeta) -> Result<Self> {
        Ok(Checkpoint {
            kind: ModelKind::Crnn,
            config_json: serde_json::to_string(&crnn.config)?,
            meta,
            params: crnn.params.clone(),
        })
    }

    fn expect(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::KindMismatch {
                expected: kind.to_string(),
                found: self.kind.to_string(),
            });
        }
        Ok(())
    }

    /// Rebuilds the model, checking every stored tensor against a fresh
    /// initialization of the echoed config.
    fn restore(&self, fresh: ParamStore<f32>) -> Result<ParamStore<f32>> {
        let names: Vec<&str> = fresh.names().collect();
        let stored: Vec<&str> = self.params.names().collect();
        if names != stored {
            return Err(Error::InvalidArgument(format!(
                "checkpoint tensors do not match the {} config ({} stored, {} expected)",
                self.kind,
                stored.len(),
                names.len()
            )));
        }
        for (name, p) in fresh.iter() {
            let s = self.params.param(name).expect("same names");
            if s.value.shape() != p.value.shape() || s.trainable != p.trainable {
                return Err(Error::shape("checkpoint tensor", s.value.shape(), p.value.shape()));
            }
        }
        Ok(self.params.clone())
    }

    pub fn into_vae(&self) -> Result<Vae<f32>> {
        self.expect(ModelKind::Vae)?;
        let config: VaeConfig = serde_json::from_str(&self.config_json)?;
        let params = self.restore(config.init_params(0)?)?;
        Ok(Vae { config, params })
    }

    pub fn into_crnn(&self) -> Result<Crnn<f32>> {
        self.expect(ModelKind::Crnn)?;
        let config: CrnnConfig = serde_json::from_str(&self.config_json)?;
        let params = self.restore(config.init_params(0)?)?;
        Ok(Crnn { config, params })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, FORMAT_VERSION);
        put_str(&mut w, &self.kind.to_string());
        put_str(&mut w, &self.config_json);
        put_u32(&mut w, self.meta.epoch);
        put_u32(&mut w, self.meta.loss_tail.len() as u32);
        for v in &self.meta.loss_tail {
            w.extend_from_slice(&v.to_le_bytes());
        }
        let (key, counter) = self.meta.rng.state();
        w.extend_from_slice(&key.to_le_bytes());
        w.extend_from_slice(&counter.to_le_bytes());
        put_u32(&mut w, self.params.len() as u32);
        // ParamStore iterates in name order.
        for (name, p) in self.params.iter() {
            put_str(&mut w, name);
            w.push(p.trainable as u8);
            put_u32(&mut w, p.value.rank() as u32);
            for &d in p.value.shape() {
                put_u32(&mut w, d as u32);
            }
            for v in p.value.data() {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&w);
        put_u32(&mut w, crc);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.fail(0, "bad magic (not an LCBV checkpoint)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.fail(4, &format!("unsupported version {version}, expected {FORMAT_VERSION}")));
        }
        if bytes.len() < 12 {
            return Err(r.fail(bytes.len(), "truncated"));
        }
        let body = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..body]) != stored {
            // Report where parsing breaks down when that is the cause.
            let mut probe = Reader { buf: &bytes[..body], pos: 8 };
            probe.body()?;
            return Err(r.fail(body, "checksum mismatch"));
        }
        let mut r = Reader { buf: &bytes[..body], pos: 8 };
        let ck = r.body()?;
        if r.pos != body {
            return Err(r.fail(r.pos, "trailing bytes after the last tensor"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, reason: &str) -> Error {
        Error::Checkpoint {
            offset,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(
                self.pos,
                &format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail(at, "string is not UTF-8"))
    }

    fn body(&mut self) -> Result<Checkpoint> {
        let at = self.pos;
        let kind = self.str()?.parse().map_err(|_| self.fail(at, "unknown model kind"))?;
        let config_json = self.str()?;
        let epoch = self.u32()?;
        let tail_len = self.u32()? as usize;
        let mut loss_tail = Vec::with_capacity(tail_len.min(1 << 16));
        for _ in 0..tail_len {
            loss_tail.push(f64::from_bits(self.u64()?));
        }
        let key = self.u64()?;
        let counter = self.u64()?;
        let count = self.u32()?;
        let mut params = ParamStore::new();
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let at = self.pos;
            let name = self.str()?;
            if prev.as_deref().is_some_and(|p| p >= name.as_str()) {
                return Err(self.fail(at, &format!("tensor `{name}` out of order or duplicated")));
            }
            let trainable = match self.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(self.fail(self.pos - 1, &format!("bad trainable flag {b}"))),
            };
            let rank = self.u32()? as usize;
            if rank > 8 {
                return Err(self.fail(self.pos - 4, &format!("implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| self.fail(at, "tensor size overflows"))?;
            let raw = self.take(bytes)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let value = Tensor::new(shape, data)?;
            params.insert(name.clone(), value, trainable)?;
            prev = Some(name);
        }
        Ok(Checkpoint {
            kind,
            config_json,
            meta: TrainingMeta {
                epoch,
                loss_tail,
                rng: Rng::from_state(key, counter),
            },
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

    fn sample() -> Checkpoint {
        let crnn = Crnn::<f32>::new(CrnnConfig::toy(), 3).unwrap();
        let mut rng = Rng::new(9);
        rng.next_u64();
        Checkpoint::from_crnn(
            &crnn,
            TrainingMeta {
                epoch: 4,
                loss_tail: vec![3.5, 2.25, f64::MIN_POSITIVE],
                rng,
            },
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        for (name, p) in ck.params.iter() {
            let q = back.params.param(name).unwrap();
            let a: Vec<u32> = p.value.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = q.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        let crnn = back.into_crnn().unwrap();
        assert_eq!(crnn.config, CrnnConfig::toy());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        Checkpoint::load(&path).unwrap().save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        assert_eq!(&first[..4], b"LCBV");
    }

    #[test]
    fn names_are_sorted_in_the_file() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes);
        let mut last = 0;
        for name in sample().params.names() {
            let at = text.find(&format!("{name}\u{1}")).or_else(|| text.find(&format!("{name}\u{0}")));
            let at = at.unwrap_or_else(|| panic!("{name}"));
            assert!(at >= last);
            last = at;
        }
    }

    #[test]
    fn truncation_is_rejected_everywhere() {
        let bytes = sample().to_bytes();
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint { offset: 4, .. })));
        let mut bad = bytes.clone();
        let mid = bad.len() - 100;
        bad[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint { .. })));
        let mut bad = bytes;
        bad.push(0);
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let ck = sample();
        assert!(matches!(ck.into_vae(), Err(Error::KindMismatch { .. })));
        let vae = Vae::<f32>::new(VaeConfig::toy(), 1).unwrap();
        let vck = Checkpoint::from_vae(&vae, TrainingMeta::default()).unwrap();
        assert!(matches!(vck.into_crnn(), Err(Error::KindMismatch { .. })));
        let back = Checkpoint::from_bytes(&vck.to_bytes()).unwrap().into_vae().unwrap();
        assert_eq!(back, vae);
    }

    #[test]
    fn config_and_tensors_must_agree() {
        let mut ck = sample();
        ck.config_json = serde_json::to_string(&CrnnConfig::paper()).unwrap();
        // Same names, but the first recurrent kernel is sized for 64-row input.
        assert!(ck.into_crnn().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn arbitrary_stores_round_trip(
            values in proptest::collection::vec(proptest::num::f32::ANY, 1..40),
            epoch in 0u32..1000,
            tail in proptest::collection::vec(proptest::num::f64::ANY, 0..5),
        ) {
            let mut params = ParamStore::new();
            params.insert("b", Tensor::new([values.len()], values.clone()).unwrap(), true).unwrap();
            params.insert("a.state", Tensor::new([1, values.len()], values).unwrap(), false).unwrap();
            let ck = Checkpoint {
                kind: ModelKind::Vae,
                config_json: "{}".into(),
                meta: TrainingMeta { epoch, loss_tail: tail, rng: Rng::new(epoch as u64) },
                params,
            };
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
