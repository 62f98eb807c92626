//! Two-file dataset format: a JSONL manifest and a binary feature blob.
//!
//! Manifest lines, in order: one `header` record, one `sample` record per
//! sample, then a `footer` with the sample count and SHA-256 digests of the
//! blob and of every manifest byte before the footer line.
//!
//! Blob layout (little-endian): magic `MMRF`, `u16` version, then per sample
//! in manifest order: `u32` id length, id bytes, `u32` k, `u32` dim,
//! `k * 4` box coordinates, `k` scores and `k * dim` features, all `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, DatasetHeader, MultimodalSample, Split, DISTRIBUTION_TOL};
use crate::error::{Error, Result};
use crate::losses::EmotionDistribution;

pub const BLOB_MAGIC: &[u8; 4] = b"MMRF";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
    caption_token_ids: Vec<u32>,
    label: usize,
    distribution: Vec<f32>,
    split: Split,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    flags: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Footer {
    num_samples: usize,
    blob_sha256: String,
    manifest_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Line {
    Header(DatasetHeader),
    Sample(SampleRecord),
    Footer(Footer),
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_blob(dataset: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let f32s = |out: &mut Vec<u8>, vals: &mut dyn Iterator<Item = f64>| {
        for v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    for s in &dataset.samples {
        out.extend_from_slice(&(s.sample_id.len() as u32).to_le_bytes());
        out.extend_from_slice(s.sample_id.as_bytes());
        out.extend_from_slice(&(s.num_regions() as u32).to_le_bytes());
        out.extend_from_slice(&(s.region_dim as u32).to_le_bytes());
        f32s(&mut out, &mut s.region_boxes.iter().flat_map(|b| b.iter().copied()));
        f32s(&mut out, &mut s.region_scores.iter().copied());
        f32s(&mut out, &mut s.region_features.iter().copied());
    }
    out
}

/// Writes `dataset` to `manifest_path` and `blob_path`. The header's `blob`
/// field is set to the blob's file name.
pub fn write_dataset(dataset: &Dataset, manifest_path: &Path, blob_path: &Path) -> Result<()> {
    dataset.validate()?;
    let blob = encode_blob(dataset);
    let mut header = dataset.header.clone();
    header.blob = blob_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::config(format!("blob path {} has no file name", blob_path.display())))?;
    let mut manifest = String::new();
    manifest.push_str(&serde_json::to_string(&Line::Header(header))?);
    manifest.push('\n');
    for s in &dataset.samples {
        let rec = SampleRecord {
            sample_id: s.sample_id.clone(),
            caption: s.caption.clone(),
            caption_token_ids: s.caption_token_ids.clone(),
            label: s.label,
            distribution: s.distribution.as_slice().iter().map(|&v| v as f32).collect(),
            split: s.split,
            flags: s.flags.clone(),
        };
        manifest.push_str(&serde_json::to_string(&Line::Sample(rec))?);
        manifest.push('\n');
    }
    let footer = Footer {
        num_samples: dataset.samples.len(),
        blob_sha256: sha256_hex(&blob),
        manifest_sha256: sha256_hex(manifest.as_bytes()),
    };
    manifest.push_str(&serde_json::to_string(&Line::Footer(footer))?);
    manifest.push('\n');
    fs::write(blob_path, blob)?;
    fs::write(manifest_path, manifest)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::DatasetFormat(format!("blob truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::DatasetFormat("size overflow".into()))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

/// Loads and validates a dataset. Any sample that breaks an invariant
/// rejects the whole file.
pub fn load_dataset(manifest_path: &Path, blob_path: &Path) -> Result<Dataset> {
    let manifest = fs::read_to_string(manifest_path)?;
    let blob = fs::read(blob_path)?;

    let mut header = None;
    let mut records = Vec::new();
    let mut footer = None;
    let mut hashed_len = 0;
    let mut offset = 0;
    for (lineno, line) in manifest.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len();
        if line.trim().is_empty() {
            continue;
        }
        if footer.is_some() {
            return Err(Error::DatasetFormat(format!(
                "line {}: content after footer",
                lineno + 1
            )));
        }
        let parsed: Line = serde_json::from_str(line)
            .map_err(|e| Error::DatasetFormat(format!("manifest line {}: {e}", lineno + 1)))?;
        match (parsed, lineno) {
            (Line::Header(h), 0) => header = Some(h),
            (Line::Header(_), _) => return Err(Error::DatasetFormat("header must be the first line".into())),
            (_, _) if header.is_none() => return Err(Error::DatasetFormat("manifest lacks a header".into())),
            (Line::Sample(r), _) => records.push(r),
            (Line::Footer(f), _) => {
                hashed_len = start;
                footer = Some(f);
            }
        }
    }
    let header = header.ok_or_else(|| Error::DatasetFormat("empty manifest".into()))?;
    let footer = footer.ok_or_else(|| Error::DatasetFormat("manifest lacks a footer".into()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::DatasetFormat(format!(
            "manifest format version {} unsupported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if footer.num_samples != records.len() {
        return Err(Error::DatasetFormat(format!(
            "footer declares {} samples, manifest has {}",
            footer.num_samples,
            records.len()
        )));
    }
    if sha256_hex(&manifest.as_bytes()[..hashed_len]) != footer.manifest_sha256 {
        return Err(Error::DatasetFormat("manifest checksum mismatch".into()));
    }
    if sha256_hex(&blob) != footer.blob_sha256 {
        return Err(Error::DatasetFormat("feature blob checksum mismatch".into()));
    }

    let mut r = Reader { bytes: &blob, pos: 0 };
    if r.take(4, "magic")? != BLOB_MAGIC {
        return Err(Error::DatasetFormat("feature blob has wrong magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::DatasetFormat(format!(
            "blob format version {version} unsupported"
        )));
    }

    let mut samples = Vec::with_capacity(records.len());
    for rec in records {
        let fail = |reason: String| Error::InvalidSample {
            sample_id: rec.sample_id.clone(),
            reason,
        };
        let id_len = r.u32("sample id length").map_err(|e| fail(e.to_string()))? as usize;
        let id = r.take(id_len, "sample id").map_err(|e| fail(e.to_string()))?;
        if id != rec.sample_id.as_bytes() {
            return Err(fail(format!(
                "blob holds `{}` at this position",
                String::from_utf8_lossy(id)
            )));
        }
        let k = r.u32("k").map_err(|e| fail(e.to_string()))? as usize;
        let dim = r.u32("dim").map_err(|e| fail(e.to_string()))? as usize;
        if k != header.k || dim != header.region_feature_dim {
            return Err(fail(format!(
                "blob region block is [{k}, {dim}], header expects [{}, {}]",
                header.k, header.region_feature_dim
            )));
        }
        let boxes = r.f32s(k * 4, "boxes").map_err(|e| fail(e.to_string()))?;
        let scores = r.f32s(k, "scores").map_err(|e| fail(e.to_string()))?;
        let features = r.f32s(k * dim, "features").map_err(|e| fail(e.to_string()))?;
        let distribution =
            EmotionDistribution::new(rec.distribution.iter().map(|&v| v as f64).collect(), DISTRIBUTION_TOL)
                .map_err(|e| fail(e.to_string()))?;
        samples.push(MultimodalSample {
            sample_id: rec.sample_id,
            caption: rec.caption,
            caption_token_ids: rec.caption_token_ids,
            region_features: features,
            region_dim: dim,
            region_boxes: boxes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
            region_scores: scores,
            label: rec.label,
            distribution,
            split: rec.split,
            flags: rec.flags,
        });
    }
    if r.pos != blob.len() {
        return Err(Error::DatasetFormat(format!(
            "{} trailing bytes in feature blob",
            blob.len() - r.pos
        )));
    }
    let dataset = Dataset { header, samples };
    dataset.validate()?;
    let sizes = dataset.split_sizes();
    log::info!(
        "loaded {} samples (train {}, val {}, test {})",
        dataset.samples.len(),
        sizes.train,
        sizes.val,
        sizes.test
    );
    Ok(dataset)
}

/// Loads a dataset, locating the blob through the manifest header.
pub fn load_dataset_auto(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path)?;
    let first = text
        .lines()
        .next()
        .ok_or_else(|| Error::DatasetFormat("empty manifest".into()))?;
    let blob = match serde_json::from_str::<Line>(first) {
        Ok(Line::Header(h)) => h.blob,
        _ => return Err(Error::DatasetFormat("manifest does not start with a header".into())),
    };
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    load_dataset(manifest_path, &dir.join(blob))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn tiny() -> Dataset {
        generate_synthetic(
            3,
            &SyntheticConfig {
                num_samples: 12,
                ..SyntheticConfig::default()
            },
        )
        .unwrap()
    }

    fn paths(dir: &tempfile::TempDir) -> (std::path::PathBuf, std::path::PathBuf) {
        (dir.path().join("d.manifest.jsonl"), dir.path().join("d.features.bin"))
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = paths(&dir);
        let ds = tiny();
        write_dataset(&ds, &m, &b).unwrap();
        let back = load_dataset(&m, &b).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert_eq!(back.header.vocab, ds.header.vocab);
        assert_eq!(load_dataset_auto(&m).unwrap().samples, ds.samples);
    }

    #[test]
    fn empty_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = paths(&dir);
        let mut ds = tiny();
        ds.samples.clear();
        write_dataset(&ds, &m, &b).unwrap();
        let back = load_dataset(&m, &b).unwrap();
        assert!(back.samples.is_empty());
        assert_eq!(fs::read(&b).unwrap().len(), 6);
    }

    #[test]
    fn checksum_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = paths(&dir);
        write_dataset(&tiny(), &m, &b).unwrap();
        let mut blob = fs::read(&b).unwrap();
        let last = blob.len() - 1;
        blob[last] ^= 0x40;
        fs::write(&b, &blob).unwrap();
        let err = load_dataset(&m, &b).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn unknown_class_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = paths(&dir);
        write_dataset(&tiny(), &m, &b).unwrap();
        let text = fs::read_to_string(&m).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut rec: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
        let id = rec["sample_id"].as_str().unwrap().to_string();
        rec["label"] = 42.into();
        lines[2] = rec.to_string();
        // rebuild the footer so that only the label is wrong
        let body: String = lines[..lines.len() - 1].iter().map(|l| format!("{l}\n")).collect();
        let mut footer: serde_json::Value = serde_json::from_str(lines.last().unwrap()).unwrap();
        footer["manifest_sha256"] = sha256_hex(body.as_bytes()).into();
        fs::write(&m, format!("{body}{footer}\n")).unwrap();
        let err = load_dataset(&m, &b).unwrap_err();
        assert!(err.to_string().contains(&id), "{err}");
        assert!(err.to_string().contains("unknown class"), "{err}");
    }

    #[test]
    fn wrong_magic_and_missing_footer() {
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = paths(&dir);
        write_dataset(&tiny(), &m, &b).unwrap();
        let text = fs::read_to_string(&m).unwrap();
        let without_footer: String = text
            .lines()
            .take(text.lines().count() - 1)
            .map(|l| format!("{l}\n"))
            .collect();
        fs::write(&m, without_footer).unwrap();
        assert!(load_dataset(&m, &b).unwrap_err().to_string().contains("footer"));
    }
}
