//! On-disk dataset layout.
//!
//! `images.f32` starts with the magic `TPOD`, then little-endian `u32`
//! fields `version, N, H, W, C`. Version 1 holds one block of `N*H*W*C`
//! little-endian `f32` pixels. Version 2 adds a `u32` block count after `C`
//! (1 = single, 2 = paired) followed by that many pixel blocks.
//! `meta.jsonl` holds one JSON record per image.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{render, sample_spec, Caption, Image, SceneSpec, IMAGE_C, IMAGE_H, IMAGE_LEN, IMAGE_W};
use crate::error::{Error, Result};
use crate::rng;

pub const IMAGES_FILE: &str = "images.f32";
pub const META_FILE: &str = "meta.jsonl";
const MAGIC: &[u8; 4] = b"TPOD";
const VERSION_SINGLE: u32 = 1;
const VERSION_BLOCKS: u32 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub index: usize,
    pub spec: SceneSpec,
    pub caption_tokens: Vec<String>,
    pub caption_text: String,
    /// Paired datasets only: the scene rendered as the losing image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loser_spec: Option<SceneSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loser_caption_tokens: Option<Vec<String>>,
}

impl MetaRecord {
    pub fn new(index: usize, spec: SceneSpec) -> Result<Self> {
        let caption = Caption::from_spec(&spec)?;
        Ok(Self {
            index,
            spec,
            caption_tokens: caption.tokens().iter().map(|s| s.to_string()).collect(),
            caption_text: caption.text(),
            loser_spec: None,
            loser_caption_tokens: None,
        })
    }

    pub fn caption(&self) -> Result<Caption> {
        Caption::from_tokens(&self.caption_tokens)
    }
}

pub fn write_images(path: &Path, blocks: &[&[Image]]) -> Result<()> {
    let n = blocks.first().map_or(0, |b| b.len());
    if blocks.iter().any(|b| b.len() != n) {
        return Err(Error::InvalidArgument("image blocks differ in length".into()));
    }
    let mut buf = Vec::with_capacity(32 + blocks.len() * n * IMAGE_LEN * 4);
    buf.extend_from_slice(MAGIC);
    let version = if blocks.len() == 1 {
        VERSION_SINGLE
    } else {
        VERSION_BLOCKS
    };
    for v in [version, n as u32, IMAGE_H as u32, IMAGE_W as u32, IMAGE_C as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if version == VERSION_BLOCKS {
        buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    }
    for block in blocks {
        for img in block.iter() {
            for v in img.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

/// Read all pixel blocks of an image file.
pub fn read_images(path: &Path) -> Result<Vec<Vec<Image>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| format_err(path, bytes.len(), "truncated header"))
    };
    if bytes.get(0..4) != Some(MAGIC.as_slice()) {
        return Err(format_err(path, 0, "bad magic, expected TPOD"));
    }
    let version = u32_at(4)?;
    if version != VERSION_SINGLE && version != VERSION_BLOCKS {
        return Err(format_err(path, 4, format!("unsupported version {version}")));
    }
    let n = u32_at(8)? as usize;
    let dims = [u32_at(12)? as usize, u32_at(16)? as usize, u32_at(20)? as usize];
    if dims != [IMAGE_H, IMAGE_W, IMAGE_C] {
        return Err(format_err(path, 12, format!("unsupported image shape {dims:?}")));
    }
    let (nblocks, data_start) = if version == VERSION_BLOCKS {
        let b = u32_at(24)? as usize;
        if b == 0 {
            return Err(format_err(path, 24, "block count must be positive"));
        }
        (b, 28)
    } else {
        (1, 24)
    };
    let expected = data_start + nblocks * n * IMAGE_LEN * 4;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            bytes.len().min(expected),
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let floats: Vec<f32> = bytes[data_start..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(floats
        .chunks(n * IMAGE_LEN)
        .take(nblocks)
        .map(|block| {
            block
                .chunks(IMAGE_LEN)
                .map(|c| Image::from_data(c.to_vec()).expect("chunk length"))
                .collect()
        })
        .collect())
}

pub fn write_meta(path: &Path, records: &[MetaRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_meta(path: &Path) -> Result<Vec<MetaRecord>> {
    read_jsonl(path)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::data(path, e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(path, format!("line {}: {e}", i + 1))))
        .collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Images with their ground-truth records.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub records: Vec<MetaRecord>,
}

impl Dataset {
    /// `n` scenes; scene `i` is drawn from `mix(seed, i)`.
    pub fn generate(n: usize, seed: u64) -> Result<Self> {
        let items: Vec<(Image, MetaRecord)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let spec = sample_spec(rng::mix(seed, i as u64));
                Ok((render(&spec)?, MetaRecord::new(i, spec)?))
            })
            .collect::<Result<_>>()?;
        let (images, records) = items.into_iter().unzip();
        Ok(Self { images, records })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn captions(&self) -> Result<Vec<Caption>> {
        self.records.iter().map(MetaRecord::caption).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        write_images(&dir.join(IMAGES_FILE), &[&self.images])?;
        write_meta(&dir.join(META_FILE), &self.records)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let images_path = dir.join(IMAGES_FILE);
        let mut blocks = read_images(&images_path)?;
        if blocks.len() != 1 {
            return Err(Error::data(
                &images_path,
                format!("expected a single-image dataset, found {} blocks", blocks.len()),
            ));
        }
        let images = blocks.remove(0);
        let meta_path = dir.join(META_FILE);
        let records = read_meta(&meta_path)?;
        check_records(&meta_path, &records, images.len())?;
        Ok(Self { images, records })
    }
}

fn check_records(path: &Path, records: &[MetaRecord], n: usize) -> Result<()> {
    if records.len() != n {
        return Err(Error::data(path, format!("{} records for {n} images", records.len())));
    }
    for (i, r) in records.iter().enumerate() {
        if r.index != i {
            return Err(Error::data(path, format!("record {i} has index {}", r.index)));
        }
        r.spec
            .validate()
            .map_err(|e| Error::data(path, format!("record {i}: {e}")))?;
    }
    Ok(())
}

/// Winner/loser image pairs sharing the winner's caption.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub winners: Vec<Image>,
    pub losers: Vec<Image>,
    pub records: Vec<MetaRecord>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.winners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.winners.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        write_images(&dir.join(IMAGES_FILE), &[&self.winners, &self.losers])?;
        write_meta(&dir.join(META_FILE), &self.records)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let images_path = dir.join(IMAGES_FILE);
        let mut blocks = read_images(&images_path)?;
        if blocks.len() != 2 {
            return Err(Error::data(
                &images_path,
                format!("expected a paired dataset, found {} block(s)", blocks.len()),
            ));
        }
        let losers = blocks.pop().expect("two blocks");
        let winners = blocks.pop().expect("two blocks");
        let meta_path = dir.join(META_FILE);
        let records = read_meta(&meta_path)?;
        check_records(&meta_path, &records, winners.len())?;
        Ok(Self {
            winners,
            losers,
            records,
        })
    }
}

/// Whether `dir` holds a paired dataset, judged from the image header.
pub fn is_paired_dir(dir: &Path) -> Result<bool> {
    let path: PathBuf = dir.join(IMAGES_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() < 28 || &bytes[0..4] != MAGIC {
        return Ok(false);
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    let blocks = u32::from_le_bytes([bytes[24], bytes[25], bytes[26], bytes[27]]);
    Ok(version == VERSION_BLOCKS && blocks == 2)
}
