//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "LIMCKPT1" (8 bytes) | version u32
//! backbone_present u8 | lim_present u8
//! [backbone section]  config: 9 × u32 | frozen u8 | tensor_count u32 | tensors
//! [lim section]       layers, heads, ffn_mult u32 | projected u8
//!                     dim, slots, max_text_len u32 | tensor_count u32 | tensors
//! digest: SHA-256 over every preceding byte (32 bytes)
//! ```
//!
//! Each tensor record is `name_len u32 | name utf-8 | rows u32 | cols u32 |
//! rows·cols f32 values`. Payload values are always 32-bit; a checkpoint of
//! `f32` parameters round-trips bit-exactly.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, BackboneParams};
use crate::error::{Error, Result};
use crate::lim::{LimConfig, LimParams};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"LIMCKPT1";
const VERSION: u32 = 1;

/// Everything a checkpoint can hold.
#[derive(Debug)]
pub struct CheckpointContents<S> {
    pub backbone: Option<BackboneParams<S>>,
    pub lim: Option<LimParams<S>>,
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_usize(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v32 = u32::try_from(v)
        .map_err(|_| Error::Checkpoint(format!("{what} {v} exceeds the format's u32 range")))?;
    push_u32(out, v32);
    Ok(())
}

fn push_tensors<S: Scalar>(
    out: &mut Vec<u8>,
    tensors: &[(String, &crate::numerics::Matrix<S>)],
) -> Result<()> {
    push_usize(out, tensors.len(), "tensor count")?;
    for (name, tensor) in tensors {
        push_usize(out, name.len(), "name length")?;
        out.extend_from_slice(name.as_bytes());
        let (rows, cols) = tensor.shape();
        push_usize(out, rows, "rows")?;
        push_usize(out, cols, "cols")?;
        for v in tensor.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    Ok(())
}

fn push_backbone_config(out: &mut Vec<u8>, c: &BackboneConfig) -> Result<()> {
    for (v, what) in [
        (c.vocab_text, "vocab_text"),
        (c.vocab_image, "vocab_image"),
        (c.dim, "dim"),
        (c.visual_slots, "visual_slots"),
        (c.max_text_len, "max_text_len"),
        (c.layers, "layers"),
        (c.heads, "heads"),
        (c.ffn_mult, "ffn_mult"),
        (c.choices, "choices"),
    ] {
        push_usize(out, v, what)?;
    }
    Ok(())
}

/// Serialize backbone and/or imagination-module parameters.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    backbone: Option<&BackboneParams<S>>,
    lim: Option<&LimParams<S>>,
) -> Result<()> {
    if backbone.is_none() && lim.is_none() {
        return Err(Error::Checkpoint("refusing to write an empty checkpoint".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    out.push(backbone.is_some() as u8);
    out.push(lim.is_some() as u8);
    if let Some(b) = backbone {
        push_backbone_config(&mut out, b.config())?;
        out.push(b.is_frozen() as u8);
        push_tensors(&mut out, &b.named_tensors())?;
    }
    if let Some(l) = lim {
        let c = l.config();
        push_usize(&mut out, c.layers, "lim layers")?;
        push_usize(&mut out, c.heads, "lim heads")?;
        push_usize(&mut out, c.ffn_mult, "lim ffn_mult")?;
        out.push(c.projected as u8);
        push_usize(&mut out, l.dim(), "lim dim")?;
        push_usize(&mut out, l.slots(), "lim slots")?;
        push_usize(&mut out, l.max_text_len(), "lim max_text_len")?;
        push_tensors(&mut out, &l.named_tensors())?;
    }
    let digest: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&digest);
    fs::write(path, &out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Checkpoint(format!("{what} flag must be 0/1, got {other}"))),
        }
    }
}

/// Read tensor records into an existing parameter structure; names and
/// shapes must match the structure's canonical listing exactly.
fn fill_tensors<S: Scalar>(
    cur: &mut Cursor,
    tensors: &mut [(String, &mut crate::numerics::Matrix<S>)],
) -> Result<()> {
    let count = cur.usize("tensor count")?;
    if count != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, file has {count}",
            tensors.len()
        )));
    }
    for (name, tensor) in tensors.iter_mut() {
        let name_len = cur.usize("name length")?;
        let raw = cur.take(name_len, "tensor name")?;
        let file_name = std::str::from_utf8(raw)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if file_name != name {
            return Err(Error::Checkpoint(format!(
                "tensor order mismatch: expected '{name}', file has '{file_name}'"
            )));
        }
        let rows = cur.usize("rows")?;
        let cols = cur.usize("cols")?;
        if (rows, cols) != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}': expected {:?}, file has ({rows}, {cols})",
                tensor.shape()
            )));
        }
        let raw = cur.take(rows * cols * 4, "tensor values")?;
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' entry {i} is not finite"
                )));
            }
            tensor.data_mut()[i] = S::from_f32_exact(v);
        }
    }
    Ok(())
}

/// Load a checkpoint, verifying magic, version, and content digest.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<CheckpointContents<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 4 + 2 + 32 {
        return Err(Error::Checkpoint(format!(
            "file too short ({} bytes) to be a checkpoint",
            bytes.len()
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let computed: [u8; 32] = Sha256::digest(body).into();
    if digest != computed {
        return Err(Error::Checkpoint(
            "content digest mismatch: file is corrupt or was edited".into(),
        ));
    }
    let mut cur = Cursor { bytes: body, pos: 0 };
    if cur.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let has_backbone = cur.flag("backbone section")?;
    let has_lim = cur.flag("lim section")?;

    let backbone = if has_backbone {
        let config = BackboneConfig {
            vocab_text: cur.usize("vocab_text")?,
            vocab_image: cur.usize("vocab_image")?,
            dim: cur.usize("dim")?,
            visual_slots: cur.usize("visual_slots")?,
            max_text_len: cur.usize("max_text_len")?,
            layers: cur.usize("layers")?,
            heads: cur.usize("heads")?,
            ffn_mult: cur.usize("ffn_mult")?,
            choices: cur.usize("choices")?,
        };
        let frozen = cur.flag("frozen")?;
        let mut params = BackboneParams::<S>::zeroed(config)?;
        fill_tensors(&mut cur, &mut params.named_tensors_mut()?)?;
        if frozen {
            params.freeze();
        }
        Some(params)
    } else {
        None
    };

    let lim = if has_lim {
        let config = LimConfig {
            layers: cur.usize("lim layers")?,
            heads: cur.usize("lim heads")?,
            ffn_mult: cur.usize("lim ffn_mult")?,
            projected: cur.flag("lim projected")?,
        };
        let dim = cur.usize("lim dim")?;
        let slots = cur.usize("lim slots")?;
        let max_text_len = cur.usize("lim max_text_len")?;
        let mut params = LimParams::<S>::zeroed(dim, slots, max_text_len, config)?;
        fill_tensors(&mut cur, &mut params.named_tensors_mut())?;
        Some(params)
    } else {
        None
    };

    if cur.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last section",
            body.len() - cur.pos
        )));
    }
    if backbone.is_none() && lim.is_none() {
        return Err(Error::Checkpoint("checkpoint has no sections".into()));
    }
    Ok(CheckpointContents { backbone, lim })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_pair() -> (BackboneParams<f32>, LimParams<f32>) {
        let bc = BackboneConfig {
            vocab_text: 16,
            vocab_image: 12,
            dim: 8,
            visual_slots: 3,
            max_text_len: 6,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            choices: 4,
        };
        let mut b = BackboneParams::init(bc.clone(), 1).unwrap();
        b.freeze();
        let l = LimParams::init(&bc, LimConfig::default(), 2).unwrap();
        (b, l)
    }

    #[test]
    fn round_trip_is_bit_exact_and_preserves_frozen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pair.ckpt");
        let (b, l) = small_pair();
        save_checkpoint(&path, Some(&b), Some(&l)).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        let lb = loaded.backbone.unwrap();
        let ll = loaded.lim.unwrap();
        assert_eq!(lb.content_digest(), b.content_digest());
        assert_eq!(ll.content_digest(), l.content_digest());
        assert_eq!(lb.config(), b.config());
        assert_eq!(ll.config(), l.config());
        assert!(lb.is_frozen());
        lb.assert_frozen().unwrap();
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (b, l) = small_pair();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, Some(&b), Some(&l)).unwrap();
        let loaded = load_checkpoint::<f32>(&p1).unwrap();
        save_checkpoint(&p2, loaded.backbone.as_ref(), loaded.lim.as_ref()).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn single_section_checkpoints_work() {
        let dir = tempfile::tempdir().unwrap();
        let (b, l) = small_pair();
        let pb = dir.path().join("backbone.ckpt");
        save_checkpoint::<f32>(&pb, Some(&b), None).unwrap();
        let only_b = load_checkpoint::<f32>(&pb).unwrap();
        assert!(only_b.backbone.is_some() && only_b.lim.is_none());

        let pl = dir.path().join("lim.ckpt");
        save_checkpoint::<f32>(&pl, None, Some(&l)).unwrap();
        let only_l = load_checkpoint::<f32>(&pl).unwrap();
        assert!(only_l.backbone.is_none() && only_l.lim.is_some());
    }

    #[test]
    fn corrupted_payload_fails_digest_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let (b, _) = small_pair();
        save_checkpoint::<f32>(&path, Some(&b), None).unwrap();
        let mut raw = fs::read(&path).unwrap();
        let mid = raw.len() / 2;
        raw[mid] ^= 0x40;
        fs::write(&path, &raw).unwrap();
        match load_checkpoint::<f32>(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("digest")),
            other => panic!("expected checkpoint error, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn wrong_magic_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOTCKPT!aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa").unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::Checkpoint(_))
        ));

        let (b, _) = small_pair();
        let good = dir.path().join("good.ckpt");
        save_checkpoint::<f32>(&good, Some(&b), None).unwrap();
        let raw = fs::read(&good).unwrap();
        fs::write(&path, &raw[..20]).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn empty_checkpoint_is_refused_at_save() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("none.ckpt");
        assert!(matches!(
            save_checkpoint::<f32>(&path, None, None),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_checkpoint::<f32>(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert_eq!(err.exit_code(), 2);
    }
}
