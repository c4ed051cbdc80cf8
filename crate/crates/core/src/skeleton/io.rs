//! On-disk sample and manifest formats.
//!
//! Sample file (little-endian): `b"SKEL"`, `u32` version (1), `u32` C, T, V,
//! M, then `C*T*V*M` `f32` values in `[C, T, V, M]` row-major order, then an
//! optional trailing `u32` label. A trailing `u32::MAX` also means unlabeled.
//!
//! Manifest: UTF-8 text, one record per line, tab-separated
//! `path<TAB>label<TAB>subject<TAB>view`. Relative paths resolve against the
//! manifest's directory; a label of `-1` means unlabeled.

use super::sequence::SkeletonSequence;
use crate::error::{Result, ScdError};
use ndarray::Array4;
use std::fs;
use std::path::{Path, PathBuf};

pub const SAMPLE_MAGIC: &[u8; 4] = b"SKEL";
pub const SAMPLE_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;
const NO_LABEL: u32 = u32::MAX;

pub fn encode_sample(seq: &SkeletonSequence) -> Vec<u8> {
    let (c, t, v, m) = seq.values().dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * seq.values().len() + 4);
    buf.extend_from_slice(SAMPLE_MAGIC);
    for x in [SAMPLE_VERSION, c as u32, t as u32, v as u32, m as u32] {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for x in seq.values().iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(label) = seq.label() {
        buf.extend_from_slice(&label.to_le_bytes());
    }
    buf
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_sample(bytes: &[u8], path: &Path) -> Result<SkeletonSequence> {
    let bad = |reason: String| ScdError::format(path, reason);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..4] != SAMPLE_MAGIC {
        return Err(bad("missing SKEL magic".into()));
    }
    let version = read_u32(bytes, 4);
    if version != SAMPLE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dims: Vec<usize> = (0..4).map(|k| read_u32(bytes, 8 + 4 * k) as usize).collect();
    let (c, t, v, m) = (dims[0], dims[1], dims[2], dims[3]);
    if c != 2 && c != 3 {
        return Err(bad(format!("coordinate dim {c} not in {{2, 3}}")));
    }
    if t == 0 || v == 0 || m == 0 {
        return Err(bad(format!("empty dims ({c}, {t}, {v}, {m})")));
    }
    let count = c
        .checked_mul(t)
        .and_then(|x| x.checked_mul(v))
        .and_then(|x| x.checked_mul(m))
        .ok_or_else(|| bad("dims overflow".into()))?;
    let payload_end = HEADER_LEN + 4 * count;
    if bytes.len() < payload_end {
        return Err(bad(format!(
            "truncated payload: need {} bytes, have {}",
            payload_end,
            bytes.len()
        )));
    }
    let label = match bytes.len() - payload_end {
        0 => None,
        4 => match read_u32(bytes, payload_end) {
            NO_LABEL => None,
            l => Some(l),
        },
        extra => return Err(bad(format!("{extra} unexpected trailing bytes"))),
    };
    let values: Vec<f32> = bytes[HEADER_LEN..payload_end]
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()))
        .collect();
    let arr = Array4::from_shape_vec((c, t, v, m), values).unwrap();
    SkeletonSequence::new(arr, label).map_err(|e| bad(e.to_string()))
}

pub fn save_sample(path: &Path, seq: &SkeletonSequence) -> Result<()> {
    fs::write(path, encode_sample(seq)).map_err(|e| ScdError::io(path, e))
}

/// Reads a sample bit-exactly; no normalization is applied.
pub fn load_sample(path: &Path) -> Result<SkeletonSequence> {
    let bytes = fs::read(path).map_err(|e| ScdError::io(path, e))?;
    decode_sample(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Option<u32>,
    pub subject: u32,
    pub view: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub joint_count: usize,
    pub coordinate_dim: usize,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let label = e.label.map_or("-1".to_string(), |l| l.to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.path.display(),
                label,
                e.subject,
                e.view
            ));
        }
        out
    }

    /// Parses records only; `joint_count`/`coordinate_dim` are filled in when
    /// samples are loaded.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |what: &str| ScdError::format(path, format!("line {}: {what}", lineno + 1));
            if fields.len() != 4 {
                return Err(bad(&format!("expected 4 tab-separated fields, got {}", fields.len())));
            }
            let label: i64 = fields[1].parse().map_err(|_| bad("label is not an integer"))?;
            let label = match label {
                -1 => None,
                l if (0..u32::MAX as i64).contains(&l) => Some(l as u32),
                _ => return Err(bad("label out of range")),
            };
            entries.push(ManifestEntry {
                path: PathBuf::from(fields[0]),
                label,
                subject: fields[2].parse().map_err(|_| bad("subject is not an integer"))?,
                view: fields[3].parse().map_err(|_| bad("view is not an integer"))?,
            });
        }
        Ok(DatasetManifest {
            entries,
            joint_count: 0,
            coordinate_dim: 0,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| ScdError::io(path, e))
    }
}

/// An in-memory labelled corpus.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<SkeletonSequence>,
    pub subjects: Vec<u32>,
    pub views: Vec<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<Option<u32>> {
        self.samples.iter().map(|s| s.label()).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.samples
            .iter()
            .filter_map(|s| s.label())
            .max()
            .map_or(0, |m| m as usize + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            subjects: idx.iter().map(|&i| self.subjects[i]).collect(),
            views: idx.iter().map(|&i| self.views[i]).collect(),
        }
    }

    /// Loads every sample named by a manifest file, checks that all share
    /// `(C, V)`, and normalizes coordinates relative to `root`.
    pub fn load_manifest(path: &Path, root: usize) -> Result<(DatasetManifest, Dataset)> {
        let text = fs::read_to_string(path).map_err(|e| ScdError::io(path, e))?;
        let mut manifest = DatasetManifest::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut ds = Dataset::default();
        for e in &manifest.entries {
            let sp = if e.path.is_absolute() { e.path.clone() } else { base.join(&e.path) };
            let seq = load_sample(&sp)?;
            if ds.is_empty() {
                manifest.joint_count = seq.joints();
                manifest.coordinate_dim = seq.channels();
            } else if seq.joints() != manifest.joint_count || seq.channels() != manifest.coordinate_dim {
                return Err(ScdError::format(
                    &sp,
                    format!(
                        "dims (C={}, V={}) differ from manifest (C={}, V={})",
                        seq.channels(),
                        seq.joints(),
                        manifest.coordinate_dim,
                        manifest.joint_count
                    ),
                ));
            }
            if root >= seq.joints() {
                return Err(ScdError::format(&sp, format!("root joint {root} out of range")));
            }
            let label = if e.label.is_some() { e.label } else { seq.label() };
            ds.samples.push(seq.normalized(root).with_label(label));
            ds.subjects.push(e.subject);
            ds.views.push(e.view);
        }
        Ok((manifest, ds))
    }

    /// Writes `sample_XXXXX.skel` files plus `manifest.tsv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<DatasetManifest> {
        fs::create_dir_all(dir).map_err(|e| ScdError::io(dir, e))?;
        let mut manifest = DatasetManifest::default();
        for (i, seq) in self.samples.iter().enumerate() {
            let name = format!("sample_{i:05}.skel");
            save_sample(&dir.join(&name), seq)?;
            manifest.entries.push(ManifestEntry {
                path: PathBuf::from(name),
                label: seq.label(),
                subject: self.subjects.get(i).copied().unwrap_or(0),
                view: self.views.get(i).copied().unwrap_or(0),
            });
            manifest.joint_count = seq.joints();
            manifest.coordinate_dim = seq.channels();
        }
        manifest.write(&dir.join("manifest.tsv"))?;
        Ok(manifest)
    }
}
