//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "CRDNDCKP" | version u32
//! spec: architecture u8 | num_classes u32 | channels u32 | height u32 | width u32 | base width u32
//! params: count u32, then per tensor: name (u32 len + utf8) | kind u8 | ndim u32 | dims u32* | f32*
//! momentum: count u32, then per tensor: ndim u32 | dims u32* | f32*
//! epoch u64 | step u64
//! rng: master seed u64 | chacha seed [u8; 32] | stream u64 | word position u128
//! m1, m2: k u32 | f64 * k*k (row-major)
//! carried natural / adversarial accuracies: len u32 | f64*
//! best: present u8 | robust accuracy f64 | epoch u64
//! sha256 of everything above
//! ```

use std::fs;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Architecture, ModelSpec, ParamKind, ParameterSet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CRDNDCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Serializable state of a ChaCha random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub master_seed: u64,
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Everything needed to resume a run or reload a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParameterSet<f32>,
    pub momentum: Vec<Tensor<f32>>,
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub carried_nat: Vec<f64>,
    pub carried_adv: Vec<f64>,
    pub best: Option<(f64, u64)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        out.push(self.spec.architecture.code());
        put_u32(&mut out, self.spec.num_classes as u32);
        let (c, h, w) = self.spec.input_shape;
        for v in [c, h, w, self.spec.width] {
            put_u32(&mut out, v as u32);
        }
        put_u32(&mut out, self.params.len() as u32);
        for p in self.params.iter() {
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            out.push(match p.kind {
                ParamKind::Weight => 0,
                ParamKind::Buffer => 1,
            });
            put_tensor(&mut out, &p.value);
        }
        put_u32(&mut out, self.momentum.len() as u32);
        for t in &self.momentum {
            put_tensor(&mut out, t);
        }
        out.write_u64::<LittleEndian>(self.epoch).unwrap();
        out.write_u64::<LittleEndian>(self.step).unwrap();
        out.write_u64::<LittleEndian>(self.rng.master_seed).unwrap();
        out.extend_from_slice(&self.rng.seed);
        out.write_u64::<LittleEndian>(self.rng.stream).unwrap();
        out.write_u128::<LittleEndian>(self.rng.word_pos).unwrap();
        for m in [&self.m1, &self.m2] {
            let k = (m.len() as f64).sqrt().round() as u32;
            put_u32(&mut out, k);
            put_f64s(&mut out, m);
        }
        for a in [&self.carried_nat, &self.carried_adv] {
            put_u32(&mut out, a.len() as u32);
            put_f64s(&mut out, a);
        }
        match self.best {
            Some((acc, epoch)) => {
                out.push(1);
                out.write_f64::<LittleEndian>(acc).unwrap();
                out.write_u64::<LittleEndian>(epoch).unwrap();
            }
            None => {
                out.push(0);
                out.write_f64::<LittleEndian>(0.0).unwrap();
                out.write_u64::<LittleEndian>(0).unwrap();
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(r.error_at(0, "not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.error_at(8, format!("unsupported format version {version}")));
        }
        let arch_at = r.pos;
        let architecture = Architecture::from_code(r.u8()?)
            .ok_or_else(|| r.error_at(arch_at, "unknown architecture code"))?;
        let num_classes = r.u32()? as usize;
        let c = r.u32()? as usize;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let width = r.u32()? as usize;
        let spec = ModelSpec {
            architecture,
            num_classes,
            input_shape: (c, h, w),
            width,
        };
        let mut params = ParameterSet::new();
        for _ in 0..r.u32()? {
            let name_len = r.u32()? as usize;
            let name_at = r.pos;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| r.error_at(name_at, "parameter name is not utf-8"))?;
            let kind_at = r.pos;
            let kind = match r.u8()? {
                0 => ParamKind::Weight,
                1 => ParamKind::Buffer,
                _ => return Err(r.error_at(kind_at, "unknown parameter kind")),
            };
            let value = r.tensor()?;
            params.push(name, kind, value);
        }
        let mut momentum = Vec::new();
        for _ in 0..r.u32()? {
            momentum.push(r.tensor()?);
        }
        let epoch = r.u64()?;
        let step = r.u64()?;
        let master_seed = r.u64()?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let mut mats = Vec::new();
        for _ in 0..2 {
            let k = r.u32()? as usize;
            mats.push(r.f64s(k * k)?);
        }
        let mut accs = Vec::new();
        for _ in 0..2 {
            let n = r.u32()? as usize;
            accs.push(r.f64s(n)?);
        }
        let has_best = r.u8()?;
        let best_acc = r.f64()?;
        let best_epoch = r.u64()?;
        let payload_end = r.pos;
        let stored = r.take(32)?;
        if stored != Sha256::digest(&bytes[..payload_end]).as_slice() {
            return Err(r.error_at(payload_end, "checksum mismatch"));
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, "trailing bytes after checksum"));
        }
        let m2 = mats.pop().unwrap();
        let m1 = mats.pop().unwrap();
        let carried_adv = accs.pop().unwrap();
        let carried_nat = accs.pop().unwrap();
        Ok(Checkpoint {
            spec,
            params,
            momentum,
            epoch,
            step,
            rng: RngState {
                master_seed,
                seed,
                stream,
                word_pos,
            },
            m1,
            m2,
            carried_nat,
            carried_adv,
            best: (has_best != 0).then_some((best_acc, best_epoch)),
        })
    }
}

/// Writes `checkpoint` to `path` through a temporary file in the same directory.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, checkpoint.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads a checkpoint and rejects it unless it was written for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelSpec) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.spec.num_classes != expected.num_classes {
        return Err(Error::InvalidInput(format!(
            "checkpoint {} has {} classes but the run expects {}",
            path.display(),
            ckpt.spec.num_classes,
            expected.num_classes
        )));
    }
    if ckpt.spec != *expected {
        return Err(Error::InvalidInput(format!(
            "checkpoint {} holds {:?}, expected {:?}",
            path.display(),
            ckpt.spec,
            expected
        )));
    }
    Ok(ckpt)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.write_u32::<LittleEndian>(v).unwrap();
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for &v in vs {
        out.write_f64::<LittleEndian>(v).unwrap();
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for &v in t.data() {
        out.write_f32::<LittleEndian>(v).unwrap();
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn error_at(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::CheckpointFormat {
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error_at(
                self.pos,
                format!(
                    "truncated: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(self.take(4)?.read_u32::<LittleEndian>().unwrap())
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(self.take(8)?.read_u64::<LittleEndian>().unwrap())
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(self.take(16)?.read_u128::<LittleEndian>().unwrap())
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(self.take(8)?.read_f64::<LittleEndian>().unwrap())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut raw = self.take(n.saturating_mul(8))?;
        Ok((0..n)
            .map(|_| raw.read_f64::<LittleEndian>().unwrap())
            .collect())
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let at = self.pos;
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(self.error_at(at, format!("implausible tensor rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.error_at(at, "tensor size overflows"))?;
        let mut raw = self.take(len.saturating_mul(4))?;
        let data = (0..len)
            .map(|_| raw.read_f32::<LittleEndian>().unwrap())
            .collect();
        Ok(Tensor::from_vec(&shape, data).expect("length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let spec = ModelSpec::new(Architecture::TinyCnn, 3, (3, 8, 8)).with_width(2);
        let model = Model::<f32>::new(spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let momentum = model
            .params()
            .iter()
            .map(|p| p.value.map(|v| v * 0.5))
            .collect();
        Checkpoint {
            spec,
            params: model.params().clone(),
            momentum,
            epoch: 4,
            step: 40,
            rng: RngState {
                master_seed: 7,
                seed: [9; 32],
                stream: 2,
                word_pos: 123_456,
            },
            m1: vec![0.8, 0.1, 0.1, 0.1, 0.8, 0.1, 0.1, 0.1, 0.8],
            m2: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            carried_nat: vec![0.8, 0.8, 0.8],
            carried_adv: vec![1.0, 1.0, 1.0],
            best: Some((42.5, 3)),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.params.digest(), c.params.digest());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..100];
        match Checkpoint::from_bytes(cut) {
            Err(Error::CheckpointFormat { offset, .. }) => assert!(offset <= 100),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointFormat { .. })
        ));
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointFormat { offset: 0, .. })
        ));
    }

    #[test]
    fn mismatched_class_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = sample();
        save_checkpoint(&c, &path).unwrap();
        let mut other = c.spec;
        other.num_classes = 10;
        let err = load_checkpoint_for(&path, &other).unwrap_err().to_string();
        assert!(err.contains("3 classes"), "{err}");
        assert!(load_checkpoint_for(&path, &c.spec).is_ok());
    }
}
