//! On-disk formats.
//!
//! Feature files (`FMAT`), little-endian:
//!
//! ```text
//! magic  "FMAT"      4 bytes
//! version u32        = 1
//! rows    u64
//! cols    u64
//! payload rows*cols  f32, row-major
//! ```
//!
//! Checkpoints (`SFWT`) share the magic/version prefix, then:
//!
//! ```text
//! count   u64
//! count x { name_len u32, name utf-8, rows u64, cols u64, rows*cols f64 }
//! ```
//!
//! Tensors appear in the model's traversal order. Payloads are `f64` so a
//! checkpoint reproduces the weights bit for bit.
//!
//! Configuration files are `key = value` lines with `#` comments.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::ScaleMode;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights, Variant};
use crate::tensor::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"FMAT";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFWT";
pub const FORMAT_VERSION: u32 = 1;

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    read_exact(r, &mut m, "header")?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(r, "header")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    Ok(())
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after payload".into())),
    }
}

fn shape_len(rows: u64, cols: u64, elem: u64) -> Result<usize> {
    rows.checked_mul(cols)
        .and_then(|n| n.checked_mul(elem))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::Format(format!("shape {rows}x{cols} overflows")))
}

/// Writes features as `f32`; values are rounded to single precision.
pub fn write_features<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.len() * 4);
    for v in m.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Standard-normal features drawn from a seeded ChaCha8 stream, row-major.
/// Values are `f32`-representable, so they survive a feature file unchanged.
pub fn synth_features(rows: usize, cols: usize, seed: u64) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "synthetic features need rows, cols >= 1, got {rows}x{cols}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f32, _>(StandardNormal) as f64)
        .collect();
    Matrix::new(rows, cols, data)
}

/// Reads a feature file, widening to `f64`.
pub fn read_features<R: Read>(r: &mut R) -> Result<Matrix> {
    read_header(r, FEATURE_MAGIC)?;
    let rows = read_u64(r, "header")?;
    let cols = read_u64(r, "header")?;
    let mut payload = vec![0u8; shape_len(rows, cols, 4)?];
    read_exact(r, &mut payload, "payload")?;
    expect_eof(r)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Matrix::new(rows as usize, cols as usize, data)
}

pub fn write_checkpoint<W: Write>(w: &mut W, weights: &ModelWeights) -> Result<()> {
    let named = weights.named();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(named.len() as u64).to_le_bytes())?;
    for (name, m) in named {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(m.len() * 8);
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads the raw `(name, tensor)` list of a checkpoint.
pub fn read_checkpoint_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Matrix)>> {
    read_header(r, CHECKPOINT_MAGIC)?;
    let count = read_u64(r, "tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(r, "tensor name")? as usize;
        let mut name = vec![0u8; len];
        read_exact(r, &mut name, "tensor name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rows = read_u64(r, "tensor shape")?;
        let cols = read_u64(r, "tensor shape")?;
        let mut payload = vec![0u8; shape_len(rows, cols, 8)?];
        read_exact(r, &mut payload, "tensor payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Matrix::new(rows as usize, cols as usize, data)?));
    }
    expect_eof(r)?;
    Ok(out)
}

pub fn read_checkpoint<R: Read>(r: &mut R, config: &ModelConfig) -> Result<ModelWeights> {
    ModelWeights::from_named(config, read_checkpoint_tensors(r)?)
}

/// Parsed configuration file: model description plus initialization seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigFile {
    pub model: ModelConfig,
    pub seed: u64,
}

const CONFIG_KEYS: [&str; 10] = [
    "variant",
    "d_model",
    "num_heads",
    "hop1_ms",
    "blocks",
    "expand",
    "num_classes",
    "ffn_ratio",
    "scale_mode",
    "seed",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

impl ConfigFile {
    /// Missing keys default to the small hierarchical variant at width 512
    /// (or the 12-block baseline when `variant = baseline`).
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !CONFIG_KEYS.contains(&k) {
                return Err(Error::config(format!(
                    "line {}: unknown key {k:?}",
                    lineno + 1
                )));
            }
            if kv.insert(k, v).is_some() {
                return Err(Error::config(format!(
                    "line {}: duplicate key {k:?}",
                    lineno + 1
                )));
            }
        }

        let mut model = match kv.get("variant").copied().unwrap_or("speechformer") {
            "baseline" => ModelConfig::baseline(512),
            "speechformer" | "speechformer-s" => ModelConfig::speechformer_s(512),
            "speechformer-b" => ModelConfig::speechformer_b(512),
            other => return Err(Error::config(format!("unknown variant {other:?}"))),
        };
        if let Some(v) = kv.get("d_model") {
            model.d_model = parse_num("d_model", v)?;
        }
        if let Some(v) = kv.get("num_heads") {
            model.num_heads = parse_num("num_heads", v)?;
        }
        if let Some(v) = kv.get("hop1_ms") {
            model.hop1_ms = parse_num("hop1_ms", v)?;
        }
        if let Some(v) = kv.get("blocks") {
            model.blocks = parse_list("blocks", v)?;
        }
        if let Some(v) = kv.get("expand") {
            model.expand = parse_list("expand", v)?
                .try_into()
                .map_err(|_| Error::config("expand needs exactly three factors"))?;
        }
        if let Some(v) = kv.get("num_classes") {
            model.num_classes = parse_num("num_classes", v)?;
        }
        if let Some(v) = kv.get("ffn_ratio") {
            model.ffn_ratio = parse_num("ffn_ratio", v)?;
        }
        if let Some(v) = kv.get("scale_mode") {
            model.scale_mode = v.parse::<ScaleMode>()?;
        }
        let seed = kv
            .get("seed")
            .map(|v| parse_num("seed", v))
            .transpose()?
            .unwrap_or(0);
        model.validate_dims()?;
        Ok(Self { model, seed })
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "variant = {}\nd_model = {}\nnum_heads = {}\nhop1_ms = {}\nblocks = {}\nexpand = {}\n\
             num_classes = {}\nffn_ratio = {}\nscale_mode = {}\nseed = {}\n",
            match m.variant {
                Variant::Baseline => "baseline",
                Variant::SpeechFormer => "speechformer",
            },
            m.d_model,
            m.num_heads,
            m.hop1_ms,
            list(&m.blocks),
            list(&m.expand),
            m.num_classes,
            m.ffn_ratio,
            m.scale_mode.as_str(),
            self.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_features_round_trip_bit_exact() {
        let m = synth_features(13, 7, 7).unwrap();
        assert_eq!(m, synth_features(13, 7, 7).unwrap());
        assert_ne!(m, synth_features(13, 7, 8).unwrap());
        let mut buf = Vec::new();
        write_features(&mut buf, &m).unwrap();
        assert_eq!(buf.len(), 24 + 13 * 7 * 4);
        assert_eq!(read_features(&mut buf.as_slice()).unwrap(), m);
        assert!(synth_features(0, 3, 1).is_err());
        let mean = m.data().iter().sum::<f64>() / m.len() as f64;
        assert!(mean.abs() < 0.5);
    }
    use crate::model::init_model;
    use proptest::prelude::*;

    #[test]
    fn feature_header_layout() {
        let m = Matrix::new(2, 3, vec![1.0, -2.0, 0.5, 0.25, 8.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_features(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], b"FMAT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[16..24].try_into().unwrap()), 3);
        assert_eq!(buf.len(), 24 + 6 * 4);
        assert_eq!(f32::from_le_bytes(buf[28..32].try_into().unwrap()), -2.0);
        assert_eq!(read_features(&mut buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn malformed_features_rejected() {
        let m = Matrix::zeros(2, 2);
        let mut buf = Vec::new();
        write_features(&mut buf, &m).unwrap();
        assert!(matches!(
            read_features(&mut &buf[..buf.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(
            read_features(&mut extra.as_slice()),
            Err(Error::Format(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_features(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        let mut nan = buf.clone();
        nan[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            read_features(&mut nan.as_slice()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = ModelConfig {
            num_heads: 2,
            ..ModelConfig::speechformer_b(8)
        };
        let w = init_model(&cfg, 11).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &w).unwrap();
        assert_eq!(&buf[..4], b"SFWT");
        let back = read_checkpoint(&mut buf.as_slice(), &cfg).unwrap();
        assert_eq!(back.checksum(), w.checksum());
        assert_eq!(back, w);

        let other = ModelConfig {
            num_heads: 2,
            ..ModelConfig::speechformer_s(8)
        };
        assert!(read_checkpoint(&mut buf.as_slice(), &other).is_err());
        assert!(read_checkpoint(&mut &buf[..buf.len() - 3], &cfg).is_err());
    }

    #[test]
    fn config_defaults_and_overrides() {
        let c = ConfigFile::parse("").unwrap();
        assert_eq!(c.model, ModelConfig::speechformer_s(512));
        assert_eq!(c.seed, 0);

        let c =
            ConfigFile::parse("# baseline\nvariant = baseline\nd_model = 128 # logmel\n").unwrap();
        assert_eq!(c.model, ModelConfig::baseline(128));

        let c = ConfigFile::parse(
            "expand = 1, 1, 2\nvariant = speechformer\nscale_mode = dh\nseed = 9\nblocks=1,1,1,1",
        )
        .unwrap();
        assert_eq!(c.model.expand, [1, 1, 2]);
        assert_eq!(c.model.blocks, vec![1, 1, 1, 1]);
        assert_eq!(c.model.scale_mode, ScaleMode::Dh);
        assert_eq!(c.seed, 9);

        assert_eq!(ConfigFile::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn config_errors() {
        for bad in [
            "colour = red",
            "d_model = 64\nd_model = 32",
            "d_model",
            "variant = conformer",
            "expand = 1,2",
            "scale_mode = cube",
            "num_heads = many",
            "variant = baseline\nblocks = 2,2,4,4",
        ] {
            assert!(
                matches!(ConfigFile::parse(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }

    proptest! {
        #[test]
        fn features_round_trip_for_single_precision_values(rows in 0usize..20, cols in 0usize..20, seed in any::<u32>()) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / 1e6) as f64)
                .collect();
            let m = Matrix::new(rows, cols, data).unwrap();
            let mut buf = Vec::new();
            write_features(&mut buf, &m).unwrap();
            prop_assert_eq!(read_features(&mut buf.as_slice()).unwrap(), m);
        }
    }
}
