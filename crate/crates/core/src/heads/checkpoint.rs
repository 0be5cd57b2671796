//! Head checkpoint files.
//!
//! ```text
//! "SNRH" | version u32 | kind u8 | activation u8 | layer-width count u32
//!        | widths u32... | seed u64 | step u64 | f32 parameters (w0 b0 w1 b1 ...)
//!        | SHA-256 of everything before it (32 bytes)
//! ```
//!
//! Integers and floats are little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::mlp::{Activation, Mlp};
use super::{HeadError, HeadKind, MatchHead, ViewHead};

const MAGIC: &[u8; 4] = b"SNRH";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: HeadKind,
    pub seed: u64,
    pub step: u64,
    pub mlp: Mlp,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let dims = ckpt.mlp.dims();
    let mut buf = Vec::with_capacity(64 + 4 * ckpt.mlp.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(ckpt.kind.code());
    buf.push(ckpt.mlp.activation().code());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in &dims {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&ckpt.seed.to_le_bytes());
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    for p in ckpt.mlp.params().into_iter().flatten() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

fn corrupt(msg: impl Into<String>) -> HeadError {
    HeadError::Checkpoint(msg.into())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, HeadError> {
    if bytes.len() < 4 + 32 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a head checkpoint"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut pos = 4;
    let mut take = |n: usize| -> Result<&[u8], HeadError> {
        let s = body.get(pos..pos + n).ok_or_else(|| corrupt("truncated header"))?;
        pos += n;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));

    let version = u32_at(take(4)?);
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let kind = HeadKind::from_code(take(1)?[0]).ok_or_else(|| corrupt("unknown head kind"))?;
    let activation =
        Activation::from_code(take(1)?[0]).ok_or_else(|| corrupt("unknown activation"))?;
    let n = u32_at(take(4)?) as usize;
    if !(2..=64).contains(&n) {
        return Err(corrupt(format!("{n} layer widths")));
    }
    let mut dims = Vec::with_capacity(n);
    for _ in 0..n {
        dims.push(u32_at(take(4)?) as usize);
    }
    let seed = u64_at(take(8)?);
    let step = u64_at(take(8)?);

    let mut mlp = Mlp::zeros(&dims, activation).map_err(|e| corrupt(e.to_string()))?;
    let expected = 4 * mlp.param_count();
    let blob = &body[pos..];
    if blob.len() != expected {
        return Err(corrupt(format!(
            "parameter blob is {} bytes, widths {dims:?} need {expected}",
            blob.len()
        )));
    }
    let mut values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    for group in mlp.params_mut() {
        for p in group.iter_mut() {
            *p = values.next().expect("length checked");
        }
    }
    if !mlp.is_finite() {
        return Err(corrupt("non-finite parameter"));
    }
    Ok(Checkpoint {
        kind,
        seed,
        step,
        mlp,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), HeadError> {
    fs::write(path, encode_checkpoint(ckpt))
        .map_err(|e| HeadError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, HeadError> {
    let bytes =
        fs::read(path).map_err(|e| HeadError::Checkpoint(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

/// Loads a match head and checks it against the store's embedding width.
pub fn load_match_head(path: &Path, embed_dim: usize) -> Result<(MatchHead, Checkpoint), HeadError> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.kind != HeadKind::Match {
        return Err(corrupt(format!("{} holds a {:?} head", path.display(), ckpt.kind)));
    }
    let head = MatchHead::from_mlp(ckpt.mlp.clone())?;
    if head.embed_dim() != embed_dim {
        return Err(HeadError::Dimension {
            expected: embed_dim,
            actual: head.embed_dim(),
        });
    }
    Ok((head, ckpt))
}

pub fn load_view_head(path: &Path, embed_dim: usize) -> Result<(ViewHead, Checkpoint), HeadError> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.kind != HeadKind::View {
        return Err(corrupt(format!("{} holds a {:?} head", path.display(), ckpt.kind)));
    }
    let head = ViewHead::from_mlp(ckpt.mlp.clone())?;
    if head.embed_dim() != embed_dim {
        return Err(HeadError::Dimension {
            expected: embed_dim,
            actual: head.embed_dim(),
        });
    }
    Ok((head, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        Checkpoint {
            kind: HeadKind::Match,
            seed: 11,
            step: 42,
            mlp: Mlp::he_uniform(&[8, 4, 2, 1], Activation::Relu, &mut rng).unwrap(),
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = decode_checkpoint(&encode_checkpoint(&c)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn any_flipped_byte_is_rejected() {
        let bytes = encode_checkpoint(&sample());
        for i in [5, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[i] ^= 0x40;
            assert!(decode_checkpoint(&b).is_err(), "byte {i}");
        }
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn width_mismatch_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        assert!(load_match_head(&path, 4).is_ok());
        assert!(matches!(
            load_match_head(&path, 512),
            Err(HeadError::Dimension { .. })
        ));
        assert!(load_view_head(&path, 4).is_err());
    }
}
