//! Binary checkpoints.
//!
//! ```text
//! "BKDC"  u32 version  u32 count
//! count × { u16 name_len, name, u8 ndim, u32 dims[ndim], f64 payload[Π dims] }
//! u64 checksum
//! ```
//!
//! Integers and floats are little-endian. The checksum is the wrapping sum
//! of every payload byte. Metadata travels as ordinary tensors under the
//! `meta.` prefix: the architecture itself, its fingerprint, the seed and
//! the epoch. 64-bit integers are split into two 32-bit halves so they
//! survive the `f64` payload exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{CompositeNet, NetArch, NetSpec};
use crate::rng::seeded;

pub const MAGIC: &[u8; 4] = b"BKDC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: u64,
}

/// One named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

fn split_u64(v: u64) -> Vec<f64> {
    vec![(v >> 32) as f64, (v & 0xFFFF_FFFF) as f64]
}

fn join_u64(v: &[f64]) -> Option<u64> {
    match v {
        [hi, lo] if hi.fract() == 0.0 && lo.fract() == 0.0 && *hi >= 0.0 && *lo >= 0.0 => {
            Some(((*hi as u64) << 32) | (*lo as u64))
        }
        _ => None,
    }
}

fn usizes(v: &[usize]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn meta_entries(arch: &NetArch, meta: CheckpointMeta) -> Vec<Entry> {
    let e = |name: &str, values: Vec<f64>| Entry { name: name.into(), shape: vec![values.len()], values };
    vec![
        e("meta.spec_hash", split_u64(arch.fingerprint())),
        e("meta.seed", split_u64(meta.seed)),
        e("meta.epoch", split_u64(meta.epoch)),
        e("meta.arch.input", usizes(&arch.input)),
        e("meta.arch.classes", vec![arch.classes as f64]),
        e("meta.arch.widths", usizes(&arch.net.widths)),
        e("meta.arch.strides", usizes(&arch.net.strides)),
        e("meta.arch.depth", vec![arch.net.depth as f64]),
        e("meta.arch.kernel", vec![arch.net.kernel as f64]),
    ]
}

/// Every tensor the checkpoint of `net` holds, in file order.
pub fn entries(net: &CompositeNet, meta: CheckpointMeta) -> Vec<Entry> {
    let mut out = meta_entries(&net.arch, meta);
    out.extend(net.named_values().into_iter().map(|(name, shape, values)| Entry { name, shape, values }));
    out
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut checksum = 0u64;
    for e in entries {
        let name = e.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Usage(format!("tensor name too long: {}", e.name)))?;
        let ndim = u8::try_from(e.shape.len()).map_err(|_| Error::Usage(format!("too many dims in {}", e.name)))?;
        if e.shape.iter().product::<usize>() != e.values.len() {
            return Err(Error::Usage(format!("{}: shape {:?} does not hold {} values", e.name, e.shape, e.values.len())));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(ndim);
        for &d in &e.shape {
            let d = u32::try_from(d).map_err(|_| Error::Usage(format!("dimension too large in {}", e.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &e.values {
            let bytes = v.to_le_bytes();
            checksum = bytes.iter().fold(checksum, |acc, &b| acc.wrapping_add(b as u64));
            out.extend_from_slice(&bytes);
        }
    }
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("file truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, detail: "not a BKDC checkpoint".into() });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Compatibility(format!("checkpoint version {version}, this build reads {VERSION}")));
    }
    let count = c.u32("tensor count")?;
    let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
    let mut checksum = 0u64;
    for _ in 0..count {
        let at = c.pos as u64;
        let name_len = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::Format { offset: at + 2, detail: "tensor name is not UTF-8".into() })?
            .to_string();
        let ndim = c.u8("ndim")? as usize;
        let shape = (0..ndim).map(|_| c.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format { offset: at, detail: format!("{name}: shape {shape:?} overflows") })?;
        let payload = c.take(numel, "payload")?;
        checksum = payload.iter().fold(checksum, |acc, &b| acc.wrapping_add(b as u64));
        let values = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        entries.push(Entry { name, shape, values });
    }
    let stored = u64::from_le_bytes(c.take(8, "checksum")?.try_into().expect("8 bytes"));
    if c.pos != bytes.len() {
        return Err(Error::Format { offset: c.pos as u64, detail: "trailing bytes after checksum".into() });
    }
    if stored != checksum {
        return Err(Error::Integrity(format!("payload checksum {checksum:#x} does not match stored {stored:#x}")));
    }
    Ok(entries)
}

fn find<'a>(entries: &'a [Entry], name: &str) -> Result<&'a [f64]> {
    entries
        .iter()
        .find(|e| e.name == name)
        .map(|e| e.values.as_slice())
        .ok_or_else(|| Error::Compatibility(format!("checkpoint lacks '{name}'")))
}

fn to_usizes(v: &[f64], name: &str) -> Result<Vec<usize>> {
    v.iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(Error::Compatibility(format!("'{name}' holds non-integer {x}")))
            }
        })
        .collect()
}

fn arch_from(entries: &[Entry]) -> Result<NetArch> {
    let field = |name: &str| to_usizes(find(entries, name)?, name);
    let input = field("meta.arch.input")?;
    let scalar = |name: &str| -> Result<usize> {
        field(name)?.first().copied().ok_or_else(|| Error::Compatibility(format!("'{name}' is empty")))
    };
    let arch = NetArch {
        input: input.try_into().map_err(|_| Error::Compatibility("meta.arch.input must have 3 entries".into()))?,
        classes: scalar("meta.arch.classes")?,
        net: NetSpec {
            widths: field("meta.arch.widths")?,
            strides: field("meta.arch.strides")?,
            depth: scalar("meta.arch.depth")?,
            kernel: scalar("meta.arch.kernel")?,
        },
    };
    let stored = join_u64(find(entries, "meta.spec_hash")?)
        .ok_or_else(|| Error::Compatibility("malformed meta.spec_hash".into()))?;
    if stored != arch.fingerprint() {
        return Err(Error::Compatibility(format!(
            "stored architecture hash {stored:016x} does not match its architecture ({:016x})",
            arch.fingerprint()
        )));
    }
    Ok(arch)
}

pub fn save_checkpoint(net: &CompositeNet, path: &Path, meta: CheckpointMeta) -> Result<()> {
    std::fs::write(path, encode(&entries(net, meta))?)?;
    Ok(())
}

/// Rebuild a trainable network from a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(CompositeNet, CheckpointMeta)> {
    from_bytes(&std::fs::read(path)?)
}

/// Like [`load_checkpoint`], but the stored architecture must equal
/// `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &NetArch) -> Result<(CompositeNet, CheckpointMeta)> {
    let (net, meta) = load_checkpoint(path)?;
    if net.arch.fingerprint() != expected.fingerprint() || net.arch != *expected {
        return Err(Error::Compatibility(format!(
            "checkpoint {} holds architecture {:016x}, expected {:016x}",
            path.display(),
            net.arch.fingerprint(),
            expected.fingerprint()
        )));
    }
    Ok((net, meta))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(CompositeNet, CheckpointMeta)> {
    let entries = decode(bytes)?;
    let arch = arch_from(&entries)?;
    let meta = CheckpointMeta {
        seed: join_u64(find(&entries, "meta.seed")?).ok_or_else(|| Error::Compatibility("malformed meta.seed".into()))?,
        epoch: join_u64(find(&entries, "meta.epoch")?)
            .ok_or_else(|| Error::Compatibility("malformed meta.epoch".into()))?,
    };
    // Initial values are overwritten below; every expected name must appear.
    let net = CompositeNet::new(&arch, &mut seeded(0))?;
    let expected = net.named_values();
    let stored: Vec<&Entry> = entries.iter().filter(|e| !e.name.starts_with("meta.")).collect();
    if stored.len() != expected.len() {
        return Err(Error::Compatibility(format!(
            "checkpoint has {} tensors, architecture needs {}",
            stored.len(),
            expected.len()
        )));
    }
    for (name, shape, _) in &expected {
        let e = stored
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| Error::Compatibility(format!("checkpoint lacks '{name}'")))?;
        if &e.shape != shape {
            return Err(Error::Compatibility(format!("'{name}' has shape {:?}, expected {shape:?}", e.shape)));
        }
        net.set_value(name, &e.values)?;
    }
    Ok((net, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_net, ArchSpec, Mode};
    use crate::rng::uniform_sym;
    use crate::tensor::Tensor;

    fn trained_looking(arch: &NetArch, seed: u64) -> CompositeNet {
        let net = init_net(arch, seed).unwrap();
        // make running stats non-trivial
        let mut rng = seeded(seed + 1);
        let [c, h, w] = arch.input;
        let x = Tensor::new(&[4, c, h, w], (0..4 * c * h * w).map(|_| uniform_sym(&mut rng, 2.0)).collect()).unwrap();
        net.forward(&x, Mode::Train).unwrap();
        net
    }

    #[test]
    fn round_trip_is_bit_exact_for_every_preset() {
        for name in ArchSpec::PRESETS {
            let spec = ArchSpec::preset(name).unwrap();
            for arch in [spec.teacher_arch(), spec.student_arch()] {
                let net = trained_looking(&arch, 3);
                let meta = CheckpointMeta { seed: u64::MAX - 5, epoch: 42 };
                let bytes = encode(&entries(&net, meta)).unwrap();
                let (back, meta_back) = from_bytes(&bytes).unwrap();
                assert_eq!(meta_back, meta);
                assert_eq!(back.arch, arch);
                for ((n1, s1, v1), (n2, s2, v2)) in net.named_values().iter().zip(back.named_values()) {
                    assert_eq!((n1, s1), (&n2, &s2));
                    assert!(v1.iter().zip(&v2).all(|(a, b)| a.to_bits() == b.to_bits()), "{name}: {n1}");
                }
                let [c, h, w] = arch.input;
                let x = Tensor::new(&[2, c, h, w], (0..2 * c * h * w).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
                let a = net.forward(&x, Mode::Eval).unwrap().to_vec();
                let b = back.forward(&x, Mode::Eval).unwrap().to_vec();
                assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
    }

    #[test]
    fn file_size_matches_layout_arithmetic() {
        let arch = ArchSpec::preset("toy").unwrap().student_arch();
        let net = init_net(&arch, 0).unwrap();
        let es = entries(&net, CheckpointMeta { seed: 1, epoch: 2 });
        let expected: usize = 12
            + es.iter().map(|e| 2 + e.name.len() + 1 + 4 * e.shape.len() + 8 * e.values.len()).sum::<usize>()
            + 8;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bkdc");
        save_checkpoint(&net, &path, CheckpointMeta { seed: 1, epoch: 2 }).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, expected);
    }

    #[test]
    fn corrupt_payload_byte_fails_integrity() {
        let arch = ArchSpec::preset("toy").unwrap().student_arch();
        let net = init_net(&arch, 0).unwrap();
        let mut bytes = encode(&entries(&net, CheckpointMeta { seed: 1, epoch: 0 })).unwrap();
        // last payload byte sits just before the checksum
        let at = bytes.len() - 9;
        bytes[at] ^= 0x5A;
        assert!(matches!(from_bytes(&bytes), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_and_magic_checks() {
        let arch = ArchSpec::preset("toy").unwrap().student_arch();
        let net = init_net(&arch, 0).unwrap();
        let good = encode(&entries(&net, CheckpointMeta { seed: 1, epoch: 0 })).unwrap();
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(from_bytes(&v2), Err(Error::Compatibility(_))));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(from_bytes(&good[..good.len() - 3]), Err(Error::Format { .. })));
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let spec = ArchSpec::preset("toy").unwrap();
        let net = init_net(&spec.student_arch(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bkdc");
        save_checkpoint(&net, &path, CheckpointMeta { seed: 0, epoch: 0 }).unwrap();
        assert!(load_checkpoint_for(&path, &spec.student_arch()).is_ok());
        assert!(matches!(load_checkpoint_for(&path, &spec.teacher_arch()), Err(Error::Compatibility(_))));

        // tampering with the stored architecture breaks the hash
        let mut es = entries(&net, CheckpointMeta { seed: 0, epoch: 0 });
        es.iter_mut().find(|e| e.name == "meta.arch.classes").unwrap().values[0] = 5.0;
        assert!(matches!(from_bytes(&encode(&es).unwrap()), Err(Error::Compatibility(_))));
    }

    #[test]
    fn save_is_deterministic() {
        let arch = ArchSpec::preset("tiny-uniform").unwrap().teacher_arch();
        let a = encode(&entries(&init_net(&arch, 9).unwrap(), CheckpointMeta { seed: 9, epoch: 1 })).unwrap();
        let b = encode(&entries(&init_net(&arch, 9).unwrap(), CheckpointMeta { seed: 9, epoch: 1 })).unwrap();
        assert_eq!(a, b);
    }
}
