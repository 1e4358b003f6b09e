//! Binary field checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `DSDSFLD\0`                         |
//! | 8      | 4    | format version (`1`)                      |
//! | 12     | 4    | lattice vertices per axis                 |
//! | 16     | 4    | feature dimension                         |
//! | 20     | 4    | MLP hidden width                          |
//! | 24     | 4    | direction encoding bands                  |
//! | 28     | 4    | parameter count `n`                       |
//! | 32     | 4n   | parameters as `f32`, in field layout order |
//!
//! Parameter order is the field's flat layout: lattice features
//! (`z`, `y`, `x`, feature), then `W1`, `b1`, `w_sigma`, `b_sigma`, `W2h`,
//! `W2d`, `b2`, `Wc`, `bc`, matrices row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{FieldConfig, Layout, RadianceField};

pub const MAGIC: &[u8; 8] = b"DSDSFLD\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

pub fn encode(field: &RadianceField) -> Vec<u8> {
    let c = field.config();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * field.param_count());
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        c.grid_resolution as u32,
        c.feature_dim as u32,
        c.hidden_width as u32,
        c.direction_bands as u32,
        field.param_count() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in &field.params {
        out.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<RadianceField> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing magic bytes".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    if word(0) != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", word(0))));
    }
    let config = FieldConfig {
        grid_resolution: word(1) as usize,
        feature_dim: word(2) as usize,
        hidden_width: word(3) as usize,
        direction_bands: word(4) as usize,
    };
    config.validate()?;
    let count = word(5) as usize;
    let expected = Layout::new(config).total;
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match declared shape ({expected})"
        )));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * count {
        return Err(Error::Checkpoint(format!(
            "expected {} payload bytes, found {}",
            4 * count,
            body.len()
        )));
    }
    let params = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    RadianceField::from_params(config, params)
}

/// Writes via a temporary file and rename so a crash never leaves a torn
/// checkpoint behind.
pub fn save(field: &RadianceField, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&encode(field)).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<RadianceField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> RadianceField {
        let config = FieldConfig {
            grid_resolution: 3,
            feature_dim: 2,
            hidden_width: 4,
            direction_bands: 1,
        };
        RadianceField::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn header_layout() {
        let f = tiny(1);
        let bytes = encode(&f);
        assert_eq!(&bytes[..8], b"DSDSFLD\0");
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 32 + 4 * f.param_count());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let f = tiny(2);
        let mut bytes = encode(&f);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
        let mut bytes = encode(&f);
        bytes[28] ^= 1;
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.bin");
        let f = tiny(3);
        save(&f, &path).unwrap();
        let g = load(&path).unwrap();
        assert_eq!(g.config(), f.config());
        for (a, b) in f.params.iter().zip(&g.params) {
            assert_eq!(*a as f32 as f64, *b);
        }
    }

    proptest! {
        // f32-representable parameters survive a round trip bitwise
        #[test]
        fn f32_params_round_trip(seed in 0u64..1000) {
            let mut f = tiny(seed);
            f.params.iter_mut().for_each(|p| *p = *p as f32 as f64);
            let g = decode(&encode(&f)).unwrap();
            prop_assert_eq!(encode(&g), encode(&f));
            prop_assert_eq!(g.params, f.params);
        }
    }
}
