//! On-disk corpus layout, one directory:
//!
//! * `corpus.txt`: one JSON record per line,
//!   `{id, identity, patch_file_offset, attributes, noisy_slot, sentence}`;
//!   `patch_file_offset` is the byte offset of the sample's grid in `patches.bin`.
//! * `patches.bin`: `"AGAPATCH"`, version `u32`, `M u32`, `raw_dim u32`,
//!   `count u64`, then `count × M × raw_dim` little-endian `f64`.
//! * `vocab.txt`: `word<TAB>class` per line, class ∈ {special, meaningful, vacuous}.
//! * `attributes.json`: the attribute world the sentences were drawn from.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::attributes::AttributeSpec;
use super::generate::{Corpus, SampleRecord};
use super::vocab::{Vocabulary, WordClass};
use crate::error::{Error, Result};

pub const PATCH_MAGIC: &[u8; 8] = b"AGAPATCH";
pub const PATCH_VERSION: u32 = 1;
pub const PATCH_HEADER_LEN: usize = 8 + 4 + 4 + 4 + 8;

pub const CORPUS_FILE: &str = "corpus.txt";
pub const PATCH_FILE: &str = "patches.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SPEC_FILE: &str = "attributes.json";

#[derive(Serialize, Deserialize)]
struct Line {
    id: usize,
    identity: usize,
    patch_file_offset: u64,
    attributes: Vec<usize>,
    noisy_slot: Option<usize>,
    sentence: String,
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let grid_bytes = (corpus.num_patches * corpus.patch_dim * 8) as u64;

    let mut out = BufWriter::new(fs::File::create(dir.join(CORPUS_FILE))?);
    for (i, r) in corpus.records.iter().enumerate() {
        let line = Line {
            id: r.id,
            identity: r.identity,
            patch_file_offset: PATCH_HEADER_LEN as u64 + i as u64 * grid_bytes,
            attributes: r.attributes.clone(),
            noisy_slot: r.noisy_slot,
            sentence: r.sentence.clone(),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::format("corpus", e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    let mut out = BufWriter::new(fs::File::create(dir.join(PATCH_FILE))?);
    out.write_all(PATCH_MAGIC)?;
    out.write_all(&PATCH_VERSION.to_le_bytes())?;
    out.write_all(&(corpus.num_patches as u32).to_le_bytes())?;
    out.write_all(&(corpus.patch_dim as u32).to_le_bytes())?;
    out.write_all(&(corpus.len() as u64).to_le_bytes())?;
    for v in &corpus.patches {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;

    let mut out = BufWriter::new(fs::File::create(dir.join(VOCAB_FILE))?);
    for (w, class) in corpus.vocab.entries() {
        writeln!(out, "{w}\t{}", class.as_str())?;
    }
    out.flush()?;

    let spec = serde_json::to_string_pretty(&corpus.spec).map_err(|e| Error::format("attributes", e.to_string()))?;
    fs::write(dir.join(SPEC_FILE), spec)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = String::from_utf8(read_file(path)?).map_err(|e| Error::format("vocabulary", e.to_string()))?;
    let entries = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            let (w, c) = l
                .split_once('\t')
                .ok_or_else(|| Error::format("vocabulary", format!("line {}: expected word<TAB>class", n + 1)))?;
            let class = WordClass::parse(c)
                .ok_or_else(|| Error::format("vocabulary", format!("line {}: unknown class {c:?}", n + 1)))?;
            Ok((w.to_string(), class))
        })
        .collect::<Result<Vec<_>>>()?;
    Vocabulary::from_entries(entries)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let spec: AttributeSpec = serde_json::from_slice(&read_file(&dir.join(SPEC_FILE))?)
        .map_err(|e| Error::format("attributes", e.to_string()))?;
    let vocab = read_vocab(&dir.join(VOCAB_FILE))?;

    let bytes = read_file(&dir.join(PATCH_FILE))?;
    if bytes.len() < PATCH_HEADER_LEN || &bytes[..8] != PATCH_MAGIC {
        return Err(Error::format("patches", "bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(8);
    if version != PATCH_VERSION {
        return Err(Error::format("patches", format!("unsupported version {version}")));
    }
    let m = u32_at(12) as usize;
    let raw_dim = u32_at(16) as usize;
    let count = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
    let body = &bytes[PATCH_HEADER_LEN..];
    if body.len() != count * m * raw_dim * 8 {
        return Err(Error::format(
            "patches",
            format!("expected {count}×{m}×{raw_dim} floats, found {} bytes", body.len()),
        ));
    }
    let patches: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let text = String::from_utf8(read_file(&dir.join(CORPUS_FILE))?).map_err(|e| Error::format("corpus", e.to_string()))?;
    let grid_bytes = (m * raw_dim * 8) as u64;
    let mut records = Vec::with_capacity(count);
    for (n, l) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let line: Line =
            serde_json::from_str(l).map_err(|e| Error::format("corpus", format!("line {}: {e}", n + 1)))?;
        let index = records.len() as u64;
        if line.patch_file_offset != PATCH_HEADER_LEN as u64 + index * grid_bytes {
            return Err(Error::format("corpus", format!("line {}: patch offset out of order", n + 1)));
        }
        records.push(SampleRecord {
            id: line.id,
            identity: line.identity,
            attributes: line.attributes,
            noisy_slot: line.noisy_slot,
            sentence: line.sentence,
        });
    }
    if records.len() != count {
        return Err(Error::format(
            "corpus",
            format!("{} records but {count} patch grids", records.len()),
        ));
    }
    Ok(Corpus {
        spec,
        vocab,
        records,
        patches,
        num_patches: m,
        patch_dim: raw_dim,
        codes: None,
    })
}

/// `N_vacuous / N_masked` over the word ids of masked tokens; `None` when
/// nothing was masked.
pub fn ratio_vacuous(masked: impl IntoIterator<Item = usize>, vocab: &Vocabulary) -> Option<f64> {
    let (mut vac, mut total) = (0usize, 0usize);
    for id in masked {
        total += 1;
        if vocab.class(id) == WordClass::Vacuous {
            vac += 1;
        }
    }
    (total > 0).then(|| vac as f64 / total as f64)
}
