//! On-disk dataset directories and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::csi_sim::{CsiLayout, CsiSequence, DomainDataset, DomainMetadata};
use crate::error::{Error, Result};

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Bytes of one entry in `data.bin`.
pub fn entry_bytes(n: usize, l_h: usize) -> usize {
    4 + 8 * n + 8 * n * l_h + 2
}

const NO_LABEL: u16 = u16::MAX;

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub domain_id: usize,
    pub n_classes: usize,
    pub l_h: usize,
    pub layout: CsiLayout,
    pub duration: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub seed: u64,
    pub user_id: u64,
    pub scene_hash: String,
    pub entry_count: usize,
    pub endianness: String,
}

impl DatasetMeta {
    pub fn for_domain(d: &DomainDataset) -> Self {
        Self {
            domain_id: d.domain_id,
            n_classes: d.n_classes,
            l_h: d.layout.len(),
            layout: d.layout,
            duration: d.duration,
            n_min: 0,
            n_max: 0,
            seed: d.metadata.seed,
            user_id: d.metadata.user_id,
            scene_hash: d.metadata.scene_hash.clone(),
            entry_count: 0,
            endianness: "little".into(),
        }
    }
}

/// Writes `manifest.json` and `data.bin`. Counts and the N-range in `meta`
/// are recomputed from `seqs`.
pub fn write_sequences(dir: &Path, meta: &DatasetMeta, seqs: &[&CsiSequence]) -> Result<()> {
    let mut meta = meta.clone();
    meta.entry_count = seqs.len();
    meta.n_min = seqs.iter().map(|s| s.len()).min().unwrap_or(0);
    meta.n_max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    meta.endianness = "little".into();
    let mut buf = Vec::with_capacity(seqs.iter().map(|s| entry_bytes(s.len(), s.l_h)).sum());
    for s in seqs {
        if s.l_h != meta.l_h {
            return Err(Error::Shape(format!("entry L_H {} != {}", s.l_h, meta.l_h)));
        }
        buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        for t in &s.timestamps {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        for h in &s.samples {
            buf.extend_from_slice(&(h.re as f32).to_le_bytes());
            buf.extend_from_slice(&(h.im as f32).to_le_bytes());
        }
        let label = match s.label {
            Some(c) if c < NO_LABEL as usize => c as u16,
            Some(c) => return Err(Error::InvalidArgument(format!("label {c} does not fit the format"))),
            None => NO_LABEL,
        };
        buf.extend_from_slice(&label.to_le_bytes());
    }
    write_atomic(&dir.join("data.bin"), &buf)?;
    let mut json = serde_json::to_vec_pretty(&meta)?;
    json.push(b'\n');
    write_atomic(&dir.join("manifest.json"), &json)
}

pub fn read_sequences(dir: &Path) -> Result<(DatasetMeta, Vec<CsiSequence>)> {
    let mpath = dir.join("manifest.json");
    let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let meta: DatasetMeta = serde_json::from_slice(&bytes)?;
    let path = dir.join("data.bin");
    let data = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |msg: String| Error::Format { path: path.clone(), msg };
    if meta.endianness != "little" {
        return Err(bad(format!("unsupported endianness `{}`", meta.endianness)));
    }
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = data
            .get(pos..pos + n)
            .ok_or_else(|| bad(format!("truncated at byte {pos}")))?;
        pos += n;
        Ok(s)
    };
    let mut seqs = Vec::with_capacity(meta.entry_count);
    for _ in 0..meta.entry_count {
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let timestamps = take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let samples = take(8 * n * meta.l_h)?
            .chunks_exact(8)
            .map(|c| {
                Complex64::new(
                    f32::from_le_bytes(c[..4].try_into().unwrap()) as f64,
                    f32::from_le_bytes(c[4..].try_into().unwrap()) as f64,
                )
            })
            .collect();
        let label = u16::from_le_bytes(take(2)?.try_into().unwrap());
        seqs.push(CsiSequence {
            timestamps,
            samples,
            l_h: meta.l_h,
            label: (label != NO_LABEL).then_some(label as usize),
        });
    }
    if pos != data.len() {
        return Err(bad(format!("{} trailing bytes", data.len() - pos)));
    }
    Ok((meta, seqs))
}

pub fn write_domain(dir: &Path, d: &DomainDataset) -> Result<()> {
    let seqs: Vec<&CsiSequence> = d.entries.iter().collect();
    write_sequences(dir, &DatasetMeta::for_domain(d), &seqs)
}

pub fn read_domain(dir: &Path) -> Result<DomainDataset> {
    let (meta, entries) = read_sequences(dir)?;
    let d = DomainDataset {
        domain_id: meta.domain_id,
        n_classes: meta.n_classes,
        layout: meta.layout,
        duration: meta.duration,
        entries,
        metadata: DomainMetadata {
            seed: meta.seed,
            user_id: meta.user_id,
            scene_hash: meta.scene_hash,
        },
    };
    d.validate()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csi_sim::{generate_domain, PerturbationConfig, SceneSpec, UserProfile};

    #[test]
    fn domain_round_trip() {
        let scene = SceneSpec::desk().build().unwrap();
        let user = UserProfile::new(3, 3, PerturbationConfig::default()).unwrap();
        let d = generate_domain(2, &scene, &user, 2, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_domain(dir.path(), &d).unwrap();
        let back = read_domain(dir.path()).unwrap();
        assert_eq!(back.len(), d.len());
        assert_eq!(back.metadata, d.metadata);
        for (a, b) in back.entries.iter().zip(&d.entries) {
            assert_eq!(a.timestamps, b.timestamps);
            assert_eq!(a.label, b.label);
            for (x, y) in a.samples.iter().zip(&b.samples) {
                assert_eq!(x.re, y.re as f32 as f64);
            }
        }
        let size = fs::metadata(dir.path().join("data.bin")).unwrap().len() as usize;
        let expect: usize = d.entries.iter().map(|e| entry_bytes(e.len(), e.l_h)).sum();
        assert_eq!(size, expect);
    }

    #[test]
    fn truncated_file_rejected() {
        let scene = SceneSpec::desk().build().unwrap();
        let user = UserProfile::new(3, 2, PerturbationConfig::default()).unwrap();
        let d = generate_domain(0, &scene, &user, 1, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_domain(dir.path(), &d).unwrap();
        let p = dir.path().join("data.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_domain(dir.path()), Err(Error::Format { .. })));
    }
}
