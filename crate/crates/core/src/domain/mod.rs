//! Shared data types: volumes, parcellations, atlases, cases and labels.

mod io;
mod mask;
mod split;

pub use io::{
    load_atlas, load_dataset, read_f32_array, read_i32_array, read_manifest, save_atlas,
    save_dataset, write_f32_array, write_i32_array, ArrayHeader, ManifestRecord, ATLAS_FILE,
    MANIFEST_FILE,
};
pub use mask::{mask_to_k_regions, mask_with_codes, region_channels};
pub use split::{split_dataset, stratified_subset, DatasetSplit};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_GRID_DIM: usize = 8;

/// Normalized 3D intensity volume, row-major over `(D, H, W)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeGrid {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl VolumeGrid {
    /// Wraps already-normalized intensities, checking every invariant.
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        check_shape(shape, data.len())?;
        if let Some(bad) = data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidVolume(format!(
                "intensity {bad} outside [0, 1] or non-finite"
            )));
        }
        Ok(Self { shape, data })
    }

    /// Min-max normalizes raw intensities into `[0, 1]`. A constant volume maps to zeros.
    pub fn from_raw(shape: [usize; 3], mut data: Vec<f32>) -> Result<Self> {
        check_shape(shape, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("non-finite intensity".into()));
        }
        let (lo, hi) = data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        for v in data.iter_mut() {
            *v = if range > 0.0 {
                ((*v - lo) / range).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Population standard deviation of the intensities.
    pub fn intensity_std(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        var.sqrt()
    }
}

fn check_shape(shape: [usize; 3], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d < MIN_GRID_DIM) {
        return Err(Error::InvalidVolume(format!(
            "shape {shape:?} has a dimension below {MIN_GRID_DIM}"
        )));
    }
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::Shape {
            expected: vec![expected],
            actual: vec![len],
        });
    }
    Ok(())
}

/// Integer region codes per voxel; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParcellationMap {
    shape: [usize; 3],
    labels: Vec<i32>,
}

impl ParcellationMap {
    pub fn new(shape: [usize; 3], labels: Vec<i32>) -> Result<Self> {
        check_shape(shape, labels.len())?;
        Ok(Self { shape, labels })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn codes_present(&self) -> BTreeSet<i32> {
        self.labels.iter().copied().filter(|&c| c != 0).collect()
    }

    pub fn voxel_count(&self, code: i32) -> usize {
        self.labels.iter().filter(|&&c| c == code).count()
    }

    /// Checks every nonzero code against the atlas.
    pub fn validate(&self, atlas: &AtlasConfig) -> Result<()> {
        for code in self.codes_present() {
            if atlas.region(code).is_none() {
                return Err(Error::UnknownRegion(code));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Atrophy,
    Enlargement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub code: i32,
    pub name: String,
    pub direction: Direction,
}

/// Ordered region list; the first `k` regions are the disease-relevant ones.
///
/// On disk an atlas is a JSON list of `{code, name, direction}` records. An
/// optional boolean `relevant` marks the K prefix; without it every region
/// counts as relevant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtlasConfig {
    regions: Vec<Region>,
    k: usize,
}

impl AtlasConfig {
    pub fn new(regions: Vec<Region>, k: usize) -> Result<Self> {
        if k > regions.len() {
            return Err(Error::InvalidAtlas(format!(
                "K = {k} exceeds region count {}",
                regions.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for r in &regions {
            if r.code <= 0 {
                return Err(Error::InvalidAtlas(format!(
                    "region code {} must be positive",
                    r.code
                )));
            }
            if !seen.insert(r.code) {
                return Err(Error::InvalidAtlas(format!(
                    "duplicate region code {}",
                    r.code
                )));
            }
        }
        Ok(Self { regions, k })
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// The K disease-relevant regions, in atlas order.
    pub fn relevant(&self) -> &[Region] {
        &self.regions[..self.k]
    }

    pub fn relevant_codes(&self) -> Vec<i32> {
        self.relevant().iter().map(|r| r.code).collect()
    }

    pub fn region(&self, code: i32) -> Option<&Region> {
        self.regions.iter().find(|r| r.code == code)
    }

    pub fn with_k(&self, k: usize) -> Result<Self> {
        Self::new(self.regions.clone(), k)
    }
}

#[derive(Serialize, Deserialize)]
struct AtlasRecord {
    code: i32,
    name: String,
    direction: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relevant: Option<bool>,
}

impl Serialize for AtlasConfig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let records: Vec<AtlasRecord> = self
            .regions
            .iter()
            .enumerate()
            .map(|(i, r)| AtlasRecord {
                code: r.code,
                name: r.name.clone(),
                direction: r.direction,
                relevant: Some(i < self.k),
            })
            .collect();
        records.serialize(s)
    }
}

impl<'de> Deserialize<'de> for AtlasConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let records = Vec::<AtlasRecord>::deserialize(d)?;
        let k = if records.iter().all(|r| r.relevant.is_none()) {
            records.len()
        } else {
            let k = records
                .iter()
                .take_while(|r| r.relevant == Some(true))
                .count();
            if records[k..].iter().any(|r| r.relevant == Some(true)) {
                return Err(D::Error::custom(
                    "relevant regions must form a prefix of the atlas",
                ));
            }
            k
        };
        let regions = records
            .into_iter()
            .map(|r| Region {
                code: r.code,
                name: r.name,
                direction: r.direction,
            })
            .collect();
        AtlasConfig::new(regions, k).map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClinicalInfo {
    pub age: f64,
    pub sex: Sex,
}

impl ClinicalInfo {
    pub fn new(age: f64, sex: Sex) -> Result<Self> {
        if !(18.0..=120.0).contains(&age) {
            return Err(Error::InvalidCase {
                id: String::new(),
                reason: format!("age {age} outside [18, 120]"),
            });
        }
        Ok(Self { age, sex })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Diagnosis {
    NC,
    MCI,
    AD,
}

impl Diagnosis {
    /// Detection class index: NC = 0, AD = 1. MCI has none.
    pub fn detection_class(self) -> Option<usize> {
        match self {
            Diagnosis::NC => Some(0),
            Diagnosis::AD => Some(1),
            Diagnosis::MCI => None,
        }
    }

    pub fn is_detection(self) -> bool {
        self.detection_class().is_some()
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Diagnosis::NC => "NC",
            Diagnosis::MCI => "MCI",
            Diagnosis::AD => "AD",
        };
        f.write_str(s)
    }
}

/// Per-region volumes in mm³, keyed by region code.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SummaryMeasures {
    pub volume_mm3: BTreeMap<i32, f64>,
}

impl SummaryMeasures {
    pub fn volume(&self, code: i32) -> Option<f64> {
        self.volume_mm3.get(&code).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    pub volume: VolumeGrid,
    pub parcellation: ParcellationMap,
    pub clinical: ClinicalInfo,
    pub diagnosis: Diagnosis,
    pub measures: SummaryMeasures,
}

impl Case {
    pub fn new(
        id: impl Into<String>,
        volume: VolumeGrid,
        parcellation: ParcellationMap,
        clinical: ClinicalInfo,
        diagnosis: Diagnosis,
        measures: SummaryMeasures,
    ) -> Result<Self> {
        let id = id.into();
        if volume.shape() != parcellation.shape() {
            return Err(Error::InvalidCase {
                id,
                reason: format!(
                    "volume shape {:?} differs from parcellation shape {:?}",
                    volume.shape(),
                    parcellation.shape()
                ),
            });
        }
        if let Some((code, v)) = measures
            .volume_mm3
            .iter()
            .find(|(_, v)| v.is_nan() || **v <= 0.0)
        {
            return Err(Error::InvalidCase {
                id,
                reason: format!("non-positive volume {v} for region {code}"),
            });
        }
        if !(18.0..=120.0).contains(&clinical.age) {
            return Err(Error::InvalidCase {
                id,
                reason: format!("age {} outside [18, 120]", clinical.age),
            });
        }
        Ok(Self {
            id,
            volume,
            parcellation,
            clinical,
            diagnosis,
            measures,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Severity {
    No,
    Mild,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::No, Severity::Mild, Severity::Severe];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Severity labels for exactly the K relevant regions of one case.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MCLabelSet {
    pub labels: BTreeMap<i32, Severity>,
}

impl MCLabelSet {
    /// Class indices in atlas order, one per relevant region.
    pub fn class_indices(&self, atlas: &AtlasConfig) -> Result<Vec<usize>> {
        atlas
            .relevant()
            .iter()
            .map(|r| {
                self.labels
                    .get(&r.code)
                    .map(|s| s.index())
                    .ok_or_else(|| Error::Label(format!("missing label for region {}", r.code)))
            })
            .collect()
    }

    pub fn severe_codes(&self) -> Vec<i32> {
        self.labels
            .iter()
            .filter(|(_, s)| **s == Severity::Severe)
            .map(|(c, _)| *c)
            .collect()
    }

    pub fn validate(&self, atlas: &AtlasConfig) -> Result<()> {
        let expected: BTreeSet<i32> = atlas.relevant_codes().into_iter().collect();
        let actual: BTreeSet<i32> = self.labels.keys().copied().collect();
        if expected != actual {
            return Err(Error::Label(format!(
                "label regions {actual:?} differ from atlas K-region set {expected:?}"
            )));
        }
        Ok(())
    }
}

/// Builds the `id -> case` index, rejecting duplicate ids.
pub fn index_cases(cases: &[Case]) -> Result<BTreeMap<&str, &Case>> {
    let mut index = BTreeMap::new();
    for c in cases {
        if index.insert(c.id.as_str(), c).is_some() {
            return Err(Error::InvalidCase {
                id: c.id.clone(),
                reason: "duplicate id".into(),
            });
        }
    }
    Ok(index)
}
