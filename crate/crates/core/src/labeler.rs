//! Morphological-change labeling.
//!
//! Cases are grouped by clinical covariates (age bin x sex). Within each
//! group, the per-class mean volume of every relevant region defines two
//! cut points: the midpoint of the NC and MCI means (`t_no`) and the
//! midpoint of the AD and MCI means (`t_sev`). For an atrophy region a
//! volume above `t_no` is `No`, below `t_sev` is `Severe`, anything in
//! between (including either boundary) is `Mild`; enlargement regions mirror
//! the comparison. Groups that are too small, or whose means are ordered the
//! wrong way for the region's direction, fall back to thresholds pooled over
//! all groups.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{AtlasConfig, Case, Diagnosis, Direction, MCLabelSet, Severity, Sex};
use crate::error::{Error, Result};

pub const DEFAULT_BIN_WIDTH: f64 = 10.0;
pub const DEFAULT_MIN_GROUP_SIZE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelerConfig {
    /// Age bin width in years; 10 gives decade bins.
    pub bin_width: f64,
    /// Minimum cases per diagnosis class before a group uses its own thresholds.
    pub min_group_size: usize,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            bin_width: DEFAULT_BIN_WIDTH,
            min_group_size: DEFAULT_MIN_GROUP_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub age_bin: u32,
    pub sex: Sex,
}

impl GroupKey {
    pub fn of(age: f64, sex: Sex, bin_width: f64) -> Self {
        Self {
            age_bin: (age / bin_width).floor() as u32,
            sex,
        }
    }

    pub fn label(&self, bin_width: f64) -> String {
        let lo = self.age_bin as f64 * bin_width;
        format!("{}-{}/{:?}", lo, lo + bin_width - 1.0, self.sex)
    }
}

/// Sums and counts per diagnosis class for one (group, region) cell.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegionStats {
    pub n_nc: usize,
    pub n_mci: usize,
    pub n_ad: usize,
    pub sum_nc: f64,
    pub sum_mci: f64,
    pub sum_ad: f64,
}

impl RegionStats {
    fn add(&mut self, diagnosis: Diagnosis, volume: f64) {
        match diagnosis {
            Diagnosis::NC => {
                self.n_nc += 1;
                self.sum_nc += volume;
            }
            Diagnosis::MCI => {
                self.n_mci += 1;
                self.sum_mci += volume;
            }
            Diagnosis::AD => {
                self.n_ad += 1;
                self.sum_ad += volume;
            }
        }
    }

    fn merge(&mut self, other: &RegionStats) {
        self.n_nc += other.n_nc;
        self.n_mci += other.n_mci;
        self.n_ad += other.n_ad;
        self.sum_nc += other.sum_nc;
        self.sum_mci += other.sum_mci;
        self.sum_ad += other.sum_ad;
    }

    fn mean(sum: f64, n: usize) -> Option<f64> {
        (n > 0).then(|| sum / n as f64)
    }

    pub fn avg_nc(&self) -> Option<f64> {
        Self::mean(self.sum_nc, self.n_nc)
    }

    pub fn avg_mci(&self) -> Option<f64> {
        Self::mean(self.sum_mci, self.n_mci)
    }

    pub fn avg_ad(&self) -> Option<f64> {
        Self::mean(self.sum_ad, self.n_ad)
    }

    pub fn min_count(&self) -> usize {
        self.n_nc.min(self.n_mci).min(self.n_ad)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupStats {
    pub entries: BTreeMap<(GroupKey, i32), RegionStats>,
}

impl GroupStats {
    pub fn get(&self, key: GroupKey, region: i32) -> Option<&RegionStats> {
        self.entries.get(&(key, region))
    }

    /// Pools every group into one cell per region.
    pub fn pooled(&self) -> BTreeMap<i32, RegionStats> {
        let mut out: BTreeMap<i32, RegionStats> = BTreeMap::new();
        for ((_, region), stats) in &self.entries {
            out.entry(*region).or_default().merge(stats);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdSource {
    Group,
    GlobalFallback,
}

impl fmt::Display for ThresholdSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdSource::Group => "group",
            ThresholdSource::GlobalFallback => "global_fallback",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    pub t_no: f64,
    pub t_sev: f64,
    pub direction: Direction,
    pub source: ThresholdSource,
}

impl ThresholdPair {
    /// Midpoint thresholds from the three class means.
    pub fn from_means(
        avg_nc: f64,
        avg_mci: f64,
        avg_ad: f64,
        direction: Direction,
        source: ThresholdSource,
    ) -> Self {
        Self {
            t_no: (avg_nc + avg_mci) / 2.0,
            t_sev: (avg_ad + avg_mci) / 2.0,
            direction,
            source,
        }
    }

    pub fn is_ordered(&self) -> bool {
        match self.direction {
            Direction::Atrophy => self.t_sev < self.t_no,
            Direction::Enlargement => self.t_no < self.t_sev,
        }
    }
}

/// Thresholds for every (group, region) seen in the pool, plus the pooled
/// global thresholds used as fallback and for groups absent from the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub config: LabelerConfig,
    pub per_group: BTreeMap<(GroupKey, i32), ThresholdPair>,
    pub global: BTreeMap<i32, ThresholdPair>,
}

pub fn group_cases(cases: &[Case], bin_width: f64) -> BTreeMap<GroupKey, Vec<String>> {
    let mut groups: BTreeMap<GroupKey, Vec<String>> = BTreeMap::new();
    for c in cases {
        groups
            .entry(GroupKey::of(c.clinical.age, c.clinical.sex, bin_width))
            .or_default()
            .push(c.id.clone());
    }
    groups
}

pub fn compute_group_statistics(
    cases: &[Case],
    groups: &BTreeMap<GroupKey, Vec<String>>,
    atlas: &AtlasConfig,
) -> Result<GroupStats> {
    let index = crate::domain::index_cases(cases)?;
    let codes = atlas.relevant_codes();
    let mut stats = GroupStats::default();
    for (key, ids) in groups {
        for code in &codes {
            stats.entries.entry((*key, *code)).or_default();
        }
        for id in ids {
            let case = index.get(id.as_str()).ok_or_else(|| Error::InvalidCase {
                id: id.clone(),
                reason: "grouped id not among the cases".into(),
            })?;
            for code in &codes {
                let v = case_volume(case, *code)?;
                stats
                    .entries
                    .get_mut(&(*key, *code))
                    .expect("cell inserted above")
                    .add(case.diagnosis, v);
            }
        }
    }
    Ok(stats)
}

fn case_volume(case: &Case, code: i32) -> Result<f64> {
    case.measures.volume(code).ok_or(Error::MissingRegion(code))
}

pub fn derive_thresholds(
    stats: &GroupStats,
    atlas: &AtlasConfig,
    config: LabelerConfig,
) -> Result<ThresholdTable> {
    if config.min_group_size == 0 {
        return Err(Error::Config(vec!["min_group_size must be >= 1".into()]));
    }
    let pooled = stats.pooled();
    let mut global = BTreeMap::new();
    for region in atlas.relevant() {
        let cell = pooled.get(&region.code).copied().unwrap_or_default();
        let degenerate = |reason: String| Error::DegenerateStatistics {
            region: region.code,
            reason,
        };
        let (Some(nc), Some(mci), Some(ad)) = (cell.avg_nc(), cell.avg_mci(), cell.avg_ad()) else {
            return Err(degenerate(format!(
                "pooled class counts NC={} MCI={} AD={}",
                cell.n_nc, cell.n_mci, cell.n_ad
            )));
        };
        let pair = ThresholdPair::from_means(
            nc,
            mci,
            ad,
            region.direction,
            ThresholdSource::GlobalFallback,
        );
        if !pair.is_ordered() {
            return Err(degenerate(format!(
                "pooled thresholds t_no={} t_sev={} are inverted for {:?}",
                pair.t_no, pair.t_sev, region.direction
            )));
        }
        global.insert(region.code, pair);
    }

    let mut per_group = BTreeMap::new();
    for ((key, code), cell) in &stats.entries {
        let Some(region) = atlas.region(*code) else {
            continue;
        };
        let fallback = global[code];
        let own = match (cell.avg_nc(), cell.avg_mci(), cell.avg_ad()) {
            (Some(nc), Some(mci), Some(ad)) if cell.min_count() >= config.min_group_size => Some(
                ThresholdPair::from_means(nc, mci, ad, region.direction, ThresholdSource::Group),
            )
            .filter(ThresholdPair::is_ordered),
            _ => None,
        };
        per_group.insert((*key, *code), own.unwrap_or(fallback));
    }
    Ok(ThresholdTable {
        config,
        per_group,
        global,
    })
}

/// Severity of one region volume under a threshold pair. Values equal to a
/// threshold are `Mild`.
pub fn assign_label(volume_mm3: f64, t: &ThresholdPair) -> Severity {
    match t.direction {
        Direction::Atrophy => {
            if volume_mm3 > t.t_no {
                Severity::No
            } else if volume_mm3 < t.t_sev {
                Severity::Severe
            } else {
                Severity::Mild
            }
        }
        Direction::Enlargement => {
            if volume_mm3 < t.t_no {
                Severity::No
            } else if volume_mm3 > t.t_sev {
                Severity::Severe
            } else {
                Severity::Mild
            }
        }
    }
}

impl ThresholdTable {
    /// Fits thresholds on a pool of cases (typically train split plus MCI cases).
    pub fn fit(pool: &[Case], atlas: &AtlasConfig, config: LabelerConfig) -> Result<Self> {
        let groups = group_cases(pool, config.bin_width);
        let stats = compute_group_statistics(pool, &groups, atlas)?;
        derive_thresholds(&stats, atlas, config)
    }

    pub fn thresholds_for(&self, key: GroupKey, code: i32) -> Option<&ThresholdPair> {
        self.per_group
            .get(&(key, code))
            .or_else(|| self.global.get(&code))
    }

    pub fn label_case(&self, case: &Case, atlas: &AtlasConfig) -> Result<MCLabelSet> {
        let key = GroupKey::of(case.clinical.age, case.clinical.sex, self.config.bin_width);
        let mut labels = BTreeMap::new();
        for code in atlas.relevant_codes() {
            let v = case_volume(case, code)?;
            let t = self
                .thresholds_for(key, code)
                .ok_or(Error::MissingRegion(code))?;
            labels.insert(code, assign_label(v, t));
        }
        Ok(MCLabelSet { labels })
    }

    pub fn label_cases(
        &self,
        cases: &[Case],
        atlas: &AtlasConfig,
    ) -> Result<BTreeMap<String, MCLabelSet>> {
        cases
            .iter()
            .map(|c| Ok((c.id.clone(), self.label_case(c, atlas)?)))
            .collect()
    }

    /// CSV audit trail: `group,region,direction,t_no,t_sev,source`, one row per
    /// (group, region) followed by the pooled `global` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["group", "region", "direction", "t_no", "t_sev", "source"])?;
        let dir = |d: Direction| match d {
            Direction::Atrophy => "atrophy",
            Direction::Enlargement => "enlargement",
        };
        for ((key, code), t) in &self.per_group {
            w.write_record([
                key.label(self.config.bin_width),
                code.to_string(),
                dir(t.direction).to_string(),
                t.t_no.to_string(),
                t.t_sev.to_string(),
                t.source.to_string(),
            ])?;
        }
        for (code, t) in &self.global {
            w.write_record([
                "global".to_string(),
                code.to_string(),
                dir(t.direction).to_string(),
                t.t_no.to_string(),
                t.t_sev.to_string(),
                "global".to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Fits thresholds on `cases` and labels every one of them, MCI included.
pub fn label_dataset(
    cases: &[Case],
    atlas: &AtlasConfig,
    config: LabelerConfig,
) -> Result<BTreeMap<String, MCLabelSet>> {
    ThresholdTable::fit(cases, atlas, config)?.label_cases(cases, atlas)
}

pub fn save_labels(path: &Path, labels: &BTreeMap<String, MCLabelSet>) -> Result<()> {
    let json = serde_json::to_string_pretty(labels)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: &Path) -> Result<BTreeMap<String, MCLabelSet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ClinicalInfo, ParcellationMap, Region, SummaryMeasures, VolumeGrid};
    use proptest::prelude::*;

    fn pair(nc: f64, mci: f64, ad: f64, d: Direction) -> ThresholdPair {
        ThresholdPair::from_means(nc, mci, ad, d, ThresholdSource::Group)
    }

    #[test]
    fn atrophy_worked_example() {
        let t = pair(10.0, 8.0, 6.0, Direction::Atrophy);
        assert_eq!((t.t_no, t.t_sev), (9.0, 7.0));
        assert_eq!(assign_label(9.5, &t), Severity::No);
        assert_eq!(assign_label(9.0, &t), Severity::Mild);
        assert_eq!(assign_label(7.0, &t), Severity::Mild);
        assert_eq!(assign_label(6.5, &t), Severity::Severe);
    }

    #[test]
    fn enlargement_worked_example() {
        let t = pair(20.0, 24.0, 30.0, Direction::Enlargement);
        assert_eq!((t.t_no, t.t_sev), (22.0, 27.0));
        assert_eq!(assign_label(28.0, &t), Severity::Severe);
        assert_eq!(assign_label(21.0, &t), Severity::No);
        assert_eq!(assign_label(27.0, &t), Severity::Mild);
    }

    #[test]
    fn decade_groups() {
        assert_eq!(
            GroupKey::of(64.0, Sex::F, 10.0),
            GroupKey {
                age_bin: 6,
                sex: Sex::F
            }
        );
        assert_eq!(
            GroupKey::of(60.0, Sex::M, 10.0),
            GroupKey::of(69.0, Sex::M, 10.0)
        );
        assert_ne!(
            GroupKey::of(69.9, Sex::M, 10.0),
            GroupKey::of(70.0, Sex::M, 10.0)
        );
        assert!(group_cases(&[], 10.0).is_empty());
        assert_eq!(GroupKey::of(64.0, Sex::F, 10.0).label(10.0), "60-69/F");
    }

    fn atlas2() -> AtlasConfig {
        AtlasConfig::new(
            vec![
                Region {
                    code: 1,
                    name: "cortex".into(),
                    direction: Direction::Atrophy,
                },
                Region {
                    code: 2,
                    name: "ventricle".into(),
                    direction: Direction::Enlargement,
                },
            ],
            2,
        )
        .unwrap()
    }

    fn case(id: &str, age: f64, sex: Sex, dx: Diagnosis, v1: f64, v2: f64) -> Case {
        let shape = [8, 8, 8];
        Case::new(
            id,
            VolumeGrid::zeros(shape).unwrap(),
            ParcellationMap::new(shape, vec![0; 512]).unwrap(),
            ClinicalInfo::new(age, sex).unwrap(),
            dx,
            SummaryMeasures {
                volume_mm3: [(1, v1), (2, v2)].into_iter().collect(),
            },
        )
        .unwrap()
    }

    #[test]
    fn statistics_are_class_means() {
        let cases = vec![
            case("a", 65.0, Sex::F, Diagnosis::NC, 10.0, 20.0),
            case("b", 66.0, Sex::F, Diagnosis::NC, 12.0, 20.0),
            case("c", 67.0, Sex::F, Diagnosis::MCI, 8.0, 24.0),
        ];
        let groups = group_cases(&cases, 10.0);
        let stats = compute_group_statistics(&cases, &groups, &atlas2()).unwrap();
        let cell = stats.get(GroupKey::of(65.0, Sex::F, 10.0), 1).unwrap();
        assert_eq!(cell.avg_nc(), Some(11.0));
        assert_eq!(cell.avg_mci(), Some(8.0));
        assert_eq!(cell.n_ad, 0);
        assert_eq!(cell.avg_ad(), None);
    }

    #[test]
    fn one_group_matches_hand_computation() {
        let cases = vec![
            case("nc", 70.0, Sex::M, Diagnosis::NC, 10.0, 20.0),
            case("mci", 71.0, Sex::M, Diagnosis::MCI, 8.0, 24.0),
            case("ad", 72.0, Sex::M, Diagnosis::AD, 6.0, 30.0),
            case("probe", 73.0, Sex::M, Diagnosis::AD, 7.0, 28.0),
        ];
        // AD mean is now 6.5 and 29: t_sev(atrophy)=7.25, t_sev(enl)=26.5
        let cfg = LabelerConfig {
            min_group_size: 1,
            ..Default::default()
        };
        let labels = label_dataset(&cases, &atlas2(), cfg).unwrap();
        assert_eq!(labels["nc"].labels[&1], Severity::No);
        assert_eq!(labels["mci"].labels[&1], Severity::Mild);
        assert_eq!(labels["ad"].labels[&1], Severity::Severe);
        assert_eq!(labels["probe"].labels[&1], Severity::Severe);
        assert_eq!(labels["nc"].labels[&2], Severity::No);
        assert_eq!(labels["mci"].labels[&2], Severity::Mild);
        assert_eq!(labels["probe"].labels[&2], Severity::Severe);
        assert!(labels.values().all(|l| l.labels.len() == 2));
    }

    #[test]
    fn inverted_small_group_falls_back() {
        let mut cases = Vec::new();
        // healthy ordering in the 70s, women
        for i in 0..3 {
            cases.push(case(
                &format!("n{i}"),
                72.0,
                Sex::F,
                Diagnosis::NC,
                10.0,
                20.0,
            ));
            cases.push(case(
                &format!("m{i}"),
                72.0,
                Sex::F,
                Diagnosis::MCI,
                8.0,
                24.0,
            ));
            cases.push(case(
                &format!("a{i}"),
                72.0,
                Sex::F,
                Diagnosis::AD,
                6.0,
                30.0,
            ));
        }
        // 50s men: AD larger than NC in the atrophy region
        cases.push(case("xn", 55.0, Sex::M, Diagnosis::NC, 9.0, 20.0));
        cases.push(case("xm", 55.0, Sex::M, Diagnosis::MCI, 9.5, 24.0));
        cases.push(case("xa", 55.0, Sex::M, Diagnosis::AD, 11.0, 30.0));
        let cfg = LabelerConfig {
            min_group_size: 1,
            ..Default::default()
        };
        let table = ThresholdTable::fit(&cases, &atlas2(), cfg).unwrap();
        let odd = GroupKey::of(55.0, Sex::M, 10.0);
        let ok = GroupKey::of(72.0, Sex::F, 10.0);
        assert_eq!(
            table.per_group[&(odd, 1)].source,
            ThresholdSource::GlobalFallback
        );
        assert_eq!(table.per_group[&(odd, 2)].source, ThresholdSource::Group);
        assert_eq!(table.per_group[&(ok, 1)].source, ThresholdSource::Group);
        assert_eq!(table.per_group[&(odd, 1)], table.global[&1]);

        // a min group size of 4 pushes everything to the global thresholds
        let strict = ThresholdTable::fit(
            &cases,
            &atlas2(),
            LabelerConfig {
                min_group_size: 4,
                ..cfg
            },
        )
        .unwrap();
        assert!(strict
            .per_group
            .values()
            .all(|t| t.source == ThresholdSource::GlobalFallback));
    }

    #[test]
    fn globally_inverted_is_degenerate() {
        let cases = vec![
            case("n", 70.0, Sex::F, Diagnosis::NC, 6.0, 20.0),
            case("m", 70.0, Sex::F, Diagnosis::MCI, 8.0, 24.0),
            case("a", 70.0, Sex::F, Diagnosis::AD, 10.0, 30.0),
        ];
        let err = label_dataset(&cases, &atlas2(), LabelerConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateStatistics { region: 1, .. }));
        let no_mci = vec![cases[0].clone(), cases[2].clone()];
        assert!(matches!(
            label_dataset(&no_mci, &atlas2(), LabelerConfig::default()),
            Err(Error::DegenerateStatistics { .. })
        ));
    }

    #[test]
    fn threshold_csv_has_audit_columns() {
        let cases = vec![
            case("n", 70.0, Sex::F, Diagnosis::NC, 10.0, 20.0),
            case("m", 70.0, Sex::F, Diagnosis::MCI, 8.0, 24.0),
            case("a", 70.0, Sex::F, Diagnosis::AD, 6.0, 30.0),
        ];
        let table = ThresholdTable::fit(&cases, &atlas2(), LabelerConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        table.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "group,region,direction,t_no,t_sev,source"
        );
        assert!(text.contains("70-79/F,1,atrophy,9,7,global_fallback"));
        assert!(text.contains("global,2,enlargement,22,27,global"));
    }

    fn severity_rank(s: Severity) -> u8 {
        s as u8
    }

    proptest! {
        #[test]
        fn monotone_in_volume(a in 0.0f64..100.0, b in 0.0f64..100.0,
                              nc in 50.0f64..60.0, mci in 40.0f64..50.0, ad in 20.0f64..40.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let atro = pair(nc, mci, ad, Direction::Atrophy);
            prop_assert!(severity_rank(assign_label(lo, &atro)) >= severity_rank(assign_label(hi, &atro)));
            let enl = pair(ad, mci, nc, Direction::Enlargement);
            prop_assert!(severity_rank(assign_label(lo, &enl)) <= severity_rank(assign_label(hi, &enl)));
        }
    }
}
