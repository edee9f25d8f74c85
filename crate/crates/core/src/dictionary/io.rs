//! Directory layout: `manifest.txt` plus one `dic_s<scale>_<component>.bin`
//! per dictionary. Tensor files hold a 16-byte header (magic `DFDD`, u32
//! version, u32 rank, u32 reserved), four u64 dims and f32 values, all
//! little-endian.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ComponentDictionary, DictionaryManifest, DictionarySet};
use crate::config::parse_key_values;
use crate::error::{Error, Result};
use crate::features::{Component, EncoderConfig, NUM_SCALES};
use crate::nn::blob::write_atomic;

pub const DICT_MAGIC: &[u8; 4] = b"DFDD";
pub const DICT_VERSION: u32 = 1;
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";

const HEADER_LEN: usize = 16 + 4 * 8;

fn file_name(scale: usize, component: Component) -> String {
    format!("dic_s{scale}_{component}.bin")
}

fn encode(d: &ComponentDictionary) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * d.data.len());
    out.extend_from_slice(DICT_MAGIC);
    out.extend_from_slice(&DICT_VERSION.to_le_bytes());
    out.extend_from_slice(&4u32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &n in &d.dims {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for v in &d.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().expect("4 bytes"))
}

fn decode(buf: &[u8], path: &Path) -> Result<([usize; 4], Vec<f32>)> {
    if buf.len() < HEADER_LEN {
        return Err(Error::corrupt(path, format!("{} bytes is shorter than the header", buf.len())));
    }
    if &buf[..4] != DICT_MAGIC {
        return Err(Error::corrupt(path, "bad magic"));
    }
    let version = u32_at(buf, 4);
    if version != DICT_VERSION {
        return Err(Error::corrupt(path, format!("unsupported version {version}")));
    }
    let rank = u32_at(buf, 8);
    if rank != 4 {
        return Err(Error::corrupt(path, format!("rank {rank}, expected 4")));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 16 + 8 * i;
        *d = u64::from_le_bytes(buf[at..at + 8].try_into().expect("8 bytes")) as usize;
    }
    let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let expected = count.and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(HEADER_LEN));
    if expected != Some(buf.len()) {
        return Err(Error::corrupt(
            path,
            format!("dims {dims:?} need {expected:?} bytes, file has {}", buf.len()),
        ));
    }
    let data = buf[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((dims, data))
}

fn manifest_key(what: &str, scale: usize, component: Component) -> String {
    format!("{what}_{scale}_{component}")
}

/// Writes every tensor file atomically, then the manifest (also atomically),
/// so a reader never sees a manifest describing files not yet written.
pub fn save_dictionary(set: &DictionarySet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let m = set.manifest();
    let mut text = String::new();
    writeln!(text, "format_version={}", m.format_version).unwrap();
    writeln!(text, "K={}", m.k).unwrap();
    writeln!(text, "encoder_hash={}", m.encoder_hash).unwrap();
    writeln!(text, "seed={}", m.seed).unwrap();
    writeln!(text, "samples={}", m.sample_count).unwrap();
    writeln!(text, "resolution={}", m.resolution).unwrap();
    text.push_str(&m.encoder_config.to_text());
    for d in set.iter() {
        let bytes = encode(d);
        write_atomic(&dir.join(file_name(d.scale, d.component)), &bytes)?;
        let dims = d.dims.map(|n| n.to_string()).join(",");
        writeln!(text, "{}={dims}", manifest_key("shape", d.scale, d.component)).unwrap();
        writeln!(
            text,
            "{}={}",
            manifest_key("sha256", d.scale, d.component),
            hex::encode(Sha256::digest(&bytes))
        )
        .unwrap();
    }
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
}

/// Loads and cross-checks a dictionary directory. Any inconsistency
/// between manifest, headers and checksums fails the whole load.
pub fn load_dictionary(dir: impl AsRef<Path>) -> Result<DictionarySet> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let kv = parse_key_values(&std::fs::read_to_string(&manifest_path)?)?;
    let get = |k: &str| {
        kv.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Validation(format!("{} lacks {k}", manifest_path.display())))
    };
    let num = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Validation(format!("manifest {k} is not a non-negative integer")))
    };
    let format_version = num("format_version")? as u32;
    if format_version != FORMAT_VERSION {
        return Err(Error::Validation(format!("unsupported dictionary format_version {format_version}")));
    }
    let k = num("K")? as usize;
    let manifest = DictionaryManifest {
        format_version,
        k,
        encoder_hash: get("encoder_hash")?.to_string(),
        encoder_config: EncoderConfig::from_text(&std::fs::read_to_string(&manifest_path)?)?,
        seed: num("seed")?,
        sample_count: num("samples")? as usize,
        resolution: num("resolution")? as usize,
    };
    let mut dicts = Vec::with_capacity(16);
    for s in 1..=NUM_SCALES {
        for c in Component::ALL {
            let key = manifest_key("shape", s, c);
            let shape: Vec<usize> = get(&key)?
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Validation(format!("manifest {key} is malformed")))?;
            let shape: [usize; 4] = shape
                .try_into()
                .map_err(|_| Error::Validation(format!("manifest {key} needs four dims")))?;
            if shape[0] != k {
                return Err(Error::Validation(format!(
                    "dictionary (s={s}, {c}): manifest K={k} but {key} lists {} clusters",
                    shape[0]
                )));
            }
            let path = dir.join(file_name(s, c));
            let bytes = std::fs::read(&path)?;
            if let Some(want) = kv.get(&manifest_key("sha256", s, c)) {
                let got = hex::encode(Sha256::digest(&bytes));
                if &got != want {
                    return Err(Error::corrupt(&path, format!("checksum {got} does not match manifest {want}")));
                }
            }
            let (dims, data) = decode(&bytes, &path)?;
            if dims != shape {
                return Err(Error::corrupt(
                    &path,
                    format!("header dims {dims:?} disagree with manifest {key}={shape:?}"),
                ));
            }
            dicts.push(ComponentDictionary::new(s, c, dims, data)?);
        }
    }
    DictionarySet::new(manifest, dicts)
}
