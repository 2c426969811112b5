//! On-disk dataset layout.
//!
//! A dataset directory holds `manifest.jsonl` (one JSON record per case),
//! `atlas.json`, and one array file per volume and parcellation. Array files
//! are a little-endian `u32` header length, a JSON header `{shape, dtype}`,
//! then the raw little-endian elements.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    AtlasConfig, Case, ClinicalInfo, Diagnosis, ParcellationMap, Sex, SummaryMeasures, VolumeGrid,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const ATLAS_FILE: &str = "atlas.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub diagnosis: Diagnosis,
    pub age: f64,
    pub sex: Sex,
    pub volume_path: String,
    pub parcellation_path: String,
    pub measures: BTreeMap<i32, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
}

fn write_array(path: &Path, shape: [usize; 3], dtype: &str, body: &[u8]) -> Result<()> {
    let header = serde_json::to_vec(&ArrayHeader {
        shape: shape.to_vec(),
        dtype: dtype.to_string(),
    })?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let len = u32::try_from(header.len()).expect("header fits in u32");
    w.write_all(&len.to_le_bytes())
        .and_then(|_| w.write_all(&header))
        .and_then(|_| w.write_all(body))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn read_array(path: &Path, dtype: &str) -> Result<([usize; 3], Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::InvalidVolume(format!("{}: {reason}", path.display()));
    if bytes.len() < 4 {
        return Err(bad("truncated header"));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() < 4 + hlen {
        return Err(bad("truncated header"));
    }
    let header: ArrayHeader = serde_json::from_slice(&bytes[4..4 + hlen])?;
    if header.dtype != dtype {
        return Err(bad(&format!(
            "dtype {} where {dtype} expected",
            header.dtype
        )));
    }
    let shape: [usize; 3] = header
        .shape
        .as_slice()
        .try_into()
        .map_err(|_| bad("shape must have three dimensions"))?;
    let body = bytes.split_off(4 + hlen);
    if body.len() != shape.iter().product::<usize>() * 4 {
        return Err(bad("body length does not match shape"));
    }
    Ok((shape, body))
}

pub fn write_f32_array(path: &Path, shape: [usize; 3], data: &[f32]) -> Result<()> {
    let body: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_array(path, shape, "float32", &body)
}

pub fn write_i32_array(path: &Path, shape: [usize; 3], data: &[i32]) -> Result<()> {
    let body: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_array(path, shape, "int32", &body)
}

pub fn read_f32_array(path: &Path) -> Result<([usize; 3], Vec<f32>)> {
    let (shape, body) = read_array(path, "float32")?;
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, data))
}

pub fn read_i32_array(path: &Path) -> Result<([usize; 3], Vec<i32>)> {
    let (shape, body) = read_array(path, "int32")?;
    let data = body
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, data))
}

pub fn save_atlas(path: &Path, atlas: &AtlasConfig) -> Result<()> {
    let json = serde_json::to_string_pretty(atlas)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_atlas(path: &Path) -> Result<AtlasConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes cases and atlas under `dir`, creating it if needed.
pub fn save_dataset(dir: &Path, cases: &[Case], atlas: &AtlasConfig) -> Result<()> {
    for sub in ["volumes", "parcellations"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    save_atlas(&dir.join(ATLAS_FILE), atlas)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut w = BufWriter::new(file);
    for case in cases {
        let volume_path = format!("volumes/{}.bin", case.id);
        let parcellation_path = format!("parcellations/{}.bin", case.id);
        write_f32_array(
            &dir.join(&volume_path),
            case.volume.shape(),
            case.volume.data(),
        )?;
        write_i32_array(
            &dir.join(&parcellation_path),
            case.parcellation.shape(),
            case.parcellation.labels(),
        )?;
        let record = ManifestRecord {
            id: case.id.clone(),
            diagnosis: case.diagnosis,
            age: case.clinical.age,
            sex: case.clinical.sex,
            volume_path,
            parcellation_path,
            measures: case.measures.volume_mm3.clone(),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(&manifest_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Loads every case listed in `dir/manifest.jsonl`. Volumes are min-max
/// normalized on ingestion (a no-op for already normalized data).
pub fn load_dataset(dir: &Path) -> Result<Vec<Case>> {
    read_manifest(dir)?
        .into_iter()
        .map(|r| load_record(dir, r))
        .collect()
}

fn load_record(dir: &Path, r: ManifestRecord) -> Result<Case> {
    let resolve = |p: &str| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            dir.join(p)
        }
    };
    let (vshape, vdata) = read_f32_array(&resolve(&r.volume_path))?;
    let (pshape, pdata) = read_i32_array(&resolve(&r.parcellation_path))?;
    let clinical = ClinicalInfo::new(r.age, r.sex).map_err(|_| Error::InvalidCase {
        id: r.id.clone(),
        reason: format!("age {} outside [18, 120]", r.age),
    })?;
    Case::new(
        r.id,
        VolumeGrid::from_raw(vshape, vdata)?,
        ParcellationMap::new(pshape, pdata)?,
        clinical,
        r.diagnosis,
        SummaryMeasures {
            volume_mm3: r.measures,
        },
    )
}
