//! On-disk dataset layout: binary PPM/PGM images, token-id text files and a
//! JSON Lines manifest per split.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::modality::Modality;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Image(Image),
    Text(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub identity: usize,
    pub modality: Modality,
    pub view: usize,
    pub camera: usize,
    pub payload: Payload,
}

impl SampleRecord {
    pub fn image(&self) -> Option<&Image> {
        match &self.payload {
            Payload::Image(i) => Some(i),
            Payload::Text(_) => None,
        }
    }

    pub fn text(&self) -> Option<&[usize]> {
        match &self.payload {
            Payload::Text(t) => Some(t),
            Payload::Image(_) => None,
        }
    }

    /// File name relative to the dataset root.
    pub fn relative_path(&self) -> String {
        let ext = match (&self.payload, self.modality.channels()) {
            (Payload::Text(_), _) => "txt",
            (Payload::Image(_), 3) => "ppm",
            _ => "pgm",
        };
        format!("{}/{:05}_{}_{:02}.{ext}", self.modality.code(), self.identity, self.modality.code(), self.view)
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub modality: Modality,
    pub path: String,
    pub camera: usize,
    pub view: usize,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (3 channels) or PGM (1 channel) with maxval 255.
pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| to_byte(v)));
    out
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let bad = |msg: &str| Error::Data(format!("malformed image: {msg}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let channels = match fields[0] {
        "P6" => 3,
        "P5" => 1,
        other => return Err(bad(&format!("unsupported magic {other}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let need = w * h * channels;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != need {
        return Err(bad(&format!("expected {need} raster bytes, found {}", raster.len())));
    }
    Image::new(h, w, channels, raster.iter().map(|&b| f64::from(b) / 255.0).collect())
}

pub fn encode_text(ids: &[usize]) -> Vec<u8> {
    let words: Vec<String> = ids.iter().map(|t| t.to_string()).collect();
    format!("{}\n", words.join(" ")).into_bytes()
}

pub fn decode_text(bytes: &[u8]) -> Result<Vec<usize>> {
    let s = std::str::from_utf8(bytes).map_err(|_| Error::Data("text payload is not UTF-8".into()))?;
    s.split_whitespace()
        .map(|w| w.parse().map_err(|_| Error::Data(format!("bad token id {w:?}"))))
        .collect()
}

fn encode_payload(p: &Payload) -> Vec<u8> {
    match p {
        Payload::Image(img) => encode_pnm(img),
        Payload::Text(ids) => encode_text(ids),
    }
}

pub fn manifest_path(root: &Path, split: &str) -> PathBuf {
    root.join(format!("{split}.jsonl"))
}

/// Writes payload files under `root` and the `{split}.jsonl` manifest.
pub fn write_split(root: &Path, split: &str, samples: &[SampleRecord]) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = s.relative_path();
        let path = root.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let bytes = encode_payload(&s.payload);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            id: s.identity,
            modality: s.modality,
            path: rel,
            camera: s.camera,
            view: s.view,
            sha256: sha256_hex(&bytes),
        });
    }
    let mpath = manifest_path(root, split);
    let mut out = Vec::new();
    for e in &entries {
        serde_json::to_writer(&mut out, e).map_err(|e| Error::Data(e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io(&mpath, e))?;
    }
    fs::write(&mpath, out).map_err(|e| Error::io(&mpath, e))?;
    Ok(entries)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Loads every sample listed in a manifest, verifying checksums. Relative
/// paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let root = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for e in read_manifest(path)? {
        let file = root.join(&e.path);
        let bytes = fs::read(&file).map_err(|err| Error::io(&file, err))?;
        let digest = sha256_hex(&bytes);
        if digest != e.sha256 {
            return Err(Error::Data(format!("checksum mismatch for {}", file.display())));
        }
        let payload = if e.modality == Modality::Text {
            Payload::Text(decode_text(&bytes)?)
        } else {
            let img = decode_pnm(&bytes)?;
            if img.channels() != e.modality.channels() {
                return Err(Error::Data(format!(
                    "{} has {} channels, {} expects {}",
                    file.display(),
                    img.channels(),
                    e.modality,
                    e.modality.channels()
                )));
            }
            Payload::Image(img)
        };
        out.push(SampleRecord {
            identity: e.id,
            modality: e.modality,
            view: e.view,
            camera: e.camera,
            payload,
        });
    }
    Ok(out)
}

/// Number of samples per modality.
pub fn modality_counts(samples: &[SampleRecord]) -> std::collections::BTreeMap<Modality, usize> {
    let mut out = std::collections::BTreeMap::new();
    for s in samples {
        *out.entry(s.modality).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip_is_exact_on_byte_grid() {
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| f64::from((i * 14) as u8) / 255.0).collect();
        let img = Image::new(2, 3, 3, data).unwrap();
        assert_eq!(decode_pnm(&encode_pnm(&img)).unwrap(), img);
        let gray = Image::new(2, 2, 1, vec![0.0, 1.0, 128.0 / 255.0, 7.0 / 255.0]).unwrap();
        let bytes = encode_pnm(&gray);
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(decode_pnm(&bytes).unwrap(), gray);
    }

    #[test]
    fn malformed_images_are_rejected() {
        assert!(decode_pnm(b"P6\n2 2\n255\n\x00").is_err());
        assert!(decode_pnm(b"P3\n1 1\n255\n\x00\x00\x00").is_err());
        assert!(decode_pnm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn text_round_trip() {
        let ids = vec![0, 17, 4, 1];
        assert_eq!(decode_text(&encode_text(&ids)).unwrap(), ids);
        assert!(decode_text(b"0 x 1").is_err());
    }
}
