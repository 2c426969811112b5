//! Synthetic cases with known morphology.
//!
//! Every region owns a fixed box-shaped territory. A case's region is the
//! first `V` voxels of that territory ordered by (anisotropic) distance from
//! the territory centre, so region volumes are exact voxel counts and
//! morphology changes never move a region. The target count `V` is
//!
//! ```text
//! base * class_factor^stage * (1 + drift)^((age - ref_age) / 10) * sex_scale * exp(jitter * z)
//! ```
//!
//! where `stage` draws the disease stage of MCI/AD cases from `stage_range`.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{
    AtlasConfig, Case, ClinicalInfo, Diagnosis, Direction, ParcellationMap, Region, Sex,
    SummaryMeasures, VolumeGrid,
};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassFactors {
    pub mci: f64,
    pub ad: f64,
}

impl ClassFactors {
    pub const NONE: ClassFactors = ClassFactors { mci: 1.0, ad: 1.0 };

    fn of(&self, diagnosis: Diagnosis) -> f64 {
        match diagnosis {
            Diagnosis::NC => 1.0,
            Diagnosis::MCI => self.mci,
            Diagnosis::AD => self.ad,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomRegion {
    pub code: i32,
    pub name: String,
    pub direction: Direction,
    /// Territory origin (inclusive corner) in voxels.
    pub origin: [usize; 3],
    /// Territory extent in voxels.
    pub extent: [usize; 3],
    /// Ellipsoid axis weights used to order territory voxels.
    pub radii: [f64; 3],
    pub base_voxels: f64,
    pub intensity: f64,
    pub class_factors: ClassFactors,
    /// Relative volume change per decade of age above `reference_age`.
    pub age_drift_per_decade: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid_shape: [usize; 3],
    pub voxel_volume_mm3: f64,
    /// The first `k` regions are the disease-relevant ones.
    pub k: usize,
    pub regions: Vec<PhantomRegion>,
    pub jitter_sigma: f64,
    /// Log-normal spread of a per-case scale shared by every region.
    pub head_size_sigma: f64,
    pub male_scale: f64,
    pub p_male: f64,
    pub age_range: [f64; 2],
    pub reference_age: f64,
    pub stage_range: [f64; 2],
    pub noise_sigma: f64,
    /// Log-normal spread of each region's mean intensity from case to case.
    pub contrast_sigma: f64,
    pub background_intensity: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    /// 32³ grid cut into 8³ cells; 14 relevant regions (11 atrophy, 3
    /// enlargement) and 4 unaffected extra regions.
    fn default() -> Self {
        let cell = 8;
        let cells_per_axis = 4;
        // spread the 18 territories over the 64 cells
        let cell_order: Vec<[usize; 3]> = (0..64)
            .map(|i| [i / 16, (i / 4) % 4, i % 4])
            .filter(|c| (c[0] + c[1] + c[2]) % 2 == 0 || c[0] == cells_per_axis - 1)
            .collect();
        let mut regions = Vec::new();
        let mut code = 1;
        let mut next_cell = cell_order.into_iter();
        let mut push = |name: String,
                        direction: Direction,
                        base: f64,
                        intensity: f64,
                        factors: ClassFactors,
                        drift: f64,
                        radii: [f64; 3]| {
            let c = next_cell.next().expect("enough cells");
            regions.push(PhantomRegion {
                code,
                name,
                direction,
                origin: [c[0] * cell, c[1] * cell, c[2] * cell],
                extent: [cell; 3],
                radii,
                base_voxels: base,
                intensity,
                class_factors: factors,
                age_drift_per_decade: drift,
            });
            code += 1;
        };
        for i in 0..11 {
            let stretch = 1.0 + 0.15 * (i % 3) as f64;
            push(
                format!("cortical_{i:02}"),
                Direction::Atrophy,
                150.0 + 8.0 * i as f64,
                0.50 + 0.04 * i as f64,
                ClassFactors {
                    mci: 0.95,
                    ad: 0.90,
                },
                -0.03,
                [stretch, 1.0, 1.0 / stretch],
            );
        }
        for i in 0..3 {
            push(
                format!("ventricle_{i}"),
                Direction::Enlargement,
                90.0 + 10.0 * i as f64,
                0.18 + 0.04 * i as f64,
                ClassFactors {
                    mci: 1.07,
                    ad: 1.15,
                },
                0.06,
                [1.3, 0.8, 1.0],
            );
        }
        for i in 0..4 {
            push(
                format!("other_{i}"),
                Direction::Atrophy,
                170.0,
                0.35 + 0.03 * i as f64,
                ClassFactors::NONE,
                -0.02,
                [1.0, 1.0, 1.0],
            );
        }
        Self {
            grid_shape: [32, 32, 32],
            voxel_volume_mm3: 1.0,
            k: 14,
            regions,
            jitter_sigma: 0.12,
            head_size_sigma: 0.0,
            male_scale: 1.08,
            p_male: 0.5,
            age_range: [55.0, 90.0],
            reference_age: 55.0,
            stage_range: [0.5, 1.5],
            noise_sigma: 0.04,
            contrast_sigma: 0.0,
            background_intensity: 0.05,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn atlas(&self) -> Result<AtlasConfig> {
        AtlasConfig::new(
            self.regions
                .iter()
                .map(|r| Region {
                    code: r.code,
                    name: r.name.clone(),
                    direction: r.direction,
                })
                .collect(),
            self.k,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self
            .grid_shape
            .iter()
            .any(|&d| d < crate::domain::MIN_GRID_DIM)
        {
            return bad(format!(
                "grid {:?} below minimum dimension",
                self.grid_shape
            ));
        }
        if self.voxel_volume_mm3.is_nan() || self.voxel_volume_mm3 <= 0.0 {
            return bad("voxel volume must be positive".into());
        }
        if self.k == 0 || self.k > self.regions.len() {
            return bad(format!(
                "k = {} with {} regions",
                self.k,
                self.regions.len()
            ));
        }
        if !(self.jitter_sigma >= 0.0
            && self.noise_sigma >= 0.0
            && self.contrast_sigma >= 0.0
            && self.head_size_sigma >= 0.0
            && self.male_scale > 0.0)
        {
            return bad("jitter, noise and male scale must be non-negative / positive".into());
        }
        if !(0.0..=1.0).contains(&self.p_male) {
            return bad("p_male outside [0, 1]".into());
        }
        let [lo, hi] = self.age_range;
        if !(18.0 <= lo && lo <= hi && hi <= 120.0) {
            return bad(format!("age range {:?} outside [18, 120]", self.age_range));
        }
        if !(self.stage_range[0] >= 0.0 && self.stage_range[0] <= self.stage_range[1]) {
            return bad(format!("stage range {:?}", self.stage_range));
        }
        self.atlas()?;
        let mut owner = vec![0i32; self.grid_shape.iter().product()];
        for r in &self.regions {
            let f = r.class_factors;
            if !(f.mci > 0.0 && f.ad > 0.0 && r.base_voxels > 0.0 && r.age_drift_per_decade > -1.0)
            {
                return bad(format!("region {} has a non-positive factor", r.code));
            }
            if r.radii.iter().any(|&x| x.is_nan() || x <= 0.0) {
                return bad(format!("region {} has a non-positive radius", r.code));
            }
            for ax in 0..3 {
                if r.extent[ax] == 0 || r.origin[ax] + r.extent[ax] > self.grid_shape[ax] {
                    return bad(format!("region {} territory leaves the grid", r.code));
                }
            }
            for idx in territory(self.grid_shape, r) {
                if owner[idx] != 0 {
                    return bad(format!(
                        "territories of regions {} and {} overlap",
                        owner[idx], r.code
                    ));
                }
                owner[idx] = r.code;
            }
        }
        Ok(())
    }
}

fn territory(grid: [usize; 3], r: &PhantomRegion) -> impl Iterator<Item = usize> + '_ {
    let [_, h, w] = grid;
    let [oz, oy, ox] = r.origin;
    let [ez, ey, ex] = r.extent;
    (oz..oz + ez).flat_map(move |z| {
        (oy..oy + ey).flat_map(move |y| (ox..ox + ex).map(move |x| (z * h + y) * w + x))
    })
}

/// Territory voxels ordered by ellipsoid distance from the territory centre.
fn growth_order(grid: [usize; 3], r: &PhantomRegion) -> Vec<usize> {
    let [_, h, w] = grid;
    let centre: Vec<f64> = (0..3)
        .map(|a| r.origin[a] as f64 + (r.extent[a] as f64 - 1.0) / 2.0)
        .collect();
    let mut voxels: Vec<(f64, usize)> = territory(grid, r)
        .map(|idx| {
            let coords = [idx / (h * w), (idx / w) % h, idx % w];
            let d2 = (0..3)
                .map(|a| ((coords[a] as f64 - centre[a]) / r.radii[a]).powi(2))
                .sum::<f64>();
            (d2, idx)
        })
        .collect();
    voxels.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    voxels.into_iter().map(|(_, idx)| idx).collect()
}

/// NC, MCI and AD counts of the desk-scale data set; the 900 NC/AD cases
/// split 600/150/150.
pub const DESK_COUNTS: (usize, usize, usize) = (554, 150, 346);

/// Precomputed region growth orders for a validated spec.
pub struct PhantomGenerator {
    spec: PhantomSpec,
    orders: Vec<Vec<usize>>,
}

impl PhantomGenerator {
    pub fn new(spec: PhantomSpec) -> Result<Self> {
        spec.validate()?;
        let orders = spec
            .regions
            .iter()
            .map(|r| growth_order(spec.grid_shape, r))
            .collect();
        Ok(Self { spec, orders })
    }

    pub fn spec(&self) -> &PhantomSpec {
        &self.spec
    }

    /// Target voxel count of every region for one case.
    fn region_voxels<R: Rng>(
        &self,
        diagnosis: Diagnosis,
        clinical: &ClinicalInfo,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let s = &self.spec;
        let stage = match diagnosis {
            Diagnosis::NC => 0.0,
            _ => rng.gen_range(s.stage_range[0]..=s.stage_range[1]),
        };
        let decades = (clinical.age - s.reference_age) / 10.0;
        let sex = if clinical.sex == Sex::M {
            s.male_scale
        } else {
            1.0
        };
        let head_z: f64 = StandardNormal.sample(rng);
        let head = (s.head_size_sigma * head_z).exp();
        s.regions
            .iter()
            .zip(&self.orders)
            .map(|(r, order)| {
                let z: f64 = StandardNormal.sample(rng);
                let class = if diagnosis == Diagnosis::NC {
                    1.0
                } else {
                    r.class_factors.of(diagnosis).powf(stage)
                };
                let target = r.base_voxels
                    * class
                    * (1.0 + r.age_drift_per_decade).powf(decades)
                    * sex
                    * head
                    * (s.jitter_sigma * z).exp();
                let n = (target.round() as usize).max(1);
                if n > order.len() {
                    return Err(Error::Spec(format!(
                        "region {} needs {n} voxels but its territory holds {}",
                        r.code,
                        order.len()
                    )));
                }
                Ok(n)
            })
            .collect()
    }

    pub fn generate_case(
        &self,
        id: impl Into<String>,
        diagnosis: Diagnosis,
        clinical: ClinicalInfo,
        case_seed: u64,
    ) -> Result<Case> {
        let s = &self.spec;
        let mut rng = rng_for(case_seed, "phantom/case");
        let counts = self.region_voxels(diagnosis, &clinical, &mut rng)?;
        let n_vox: usize = s.grid_shape.iter().product();
        let mut labels = vec![0i32; n_vox];
        let mut means = vec![s.background_intensity; n_vox];
        let mut measures = SummaryMeasures::default();
        let mut contrast_rng = rng_for(case_seed, "phantom/contrast");
        for ((r, order), &n) in s.regions.iter().zip(&self.orders).zip(&counts) {
            let z: f64 = StandardNormal.sample(&mut contrast_rng);
            let intensity = (r.intensity * (s.contrast_sigma * z).exp()).min(1.0);
            for &idx in &order[..n] {
                labels[idx] = r.code;
                means[idx] = intensity;
            }
            measures
                .volume_mm3
                .insert(r.code, n as f64 * s.voxel_volume_mm3);
        }
        let noise = Normal::new(0.0, s.noise_sigma).map_err(|e| Error::Spec(e.to_string()))?;
        let raw: Vec<f32> = means
            .iter()
            .map(|&m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
            .collect();
        Case::new(
            id,
            VolumeGrid::from_raw(s.grid_shape, raw)?,
            ParcellationMap::new(s.grid_shape, labels)?,
            clinical,
            diagnosis,
            measures,
        )
    }

    /// Clinical covariates and seed of the case at `index`.
    fn case_draw(&self, index: usize) -> (ClinicalInfo, u64) {
        let case_seed = derive_seed(self.spec.seed, &format!("case/{index}"));
        let mut rng = rng_for(case_seed, "phantom/clinical");
        let [lo, hi] = self.spec.age_range;
        let age = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let sex = if rng.gen_bool(self.spec.p_male) {
            Sex::M
        } else {
            Sex::F
        };
        (ClinicalInfo { age, sex }, case_seed)
    }

    /// `n_nc` NC cases, then `n_mci` MCI, then `n_ad` AD, ids `case-00000`...
    pub fn generate_dataset(&self, n_nc: usize, n_mci: usize, n_ad: usize) -> Result<Vec<Case>> {
        let total = n_nc + n_mci + n_ad;
        (0..total)
            .into_par_iter()
            .map(|i| {
                let diagnosis = if i < n_nc {
                    Diagnosis::NC
                } else if i < n_nc + n_mci {
                    Diagnosis::MCI
                } else {
                    Diagnosis::AD
                };
                let (clinical, case_seed) = self.case_draw(i);
                self.generate_case(format!("case-{i:05}"), diagnosis, clinical, case_seed)
            })
            .collect()
    }
}

pub fn generate_case(
    spec: &PhantomSpec,
    diagnosis: Diagnosis,
    clinical: ClinicalInfo,
    case_seed: u64,
) -> Result<Case> {
    PhantomGenerator::new(spec.clone())?.generate_case(
        format!("phantom-{case_seed}"),
        diagnosis,
        clinical,
        case_seed,
    )
}

pub fn generate_dataset(
    spec: &PhantomSpec,
    n_nc: usize,
    n_mci: usize,
    n_ad: usize,
) -> Result<Vec<Case>> {
    PhantomGenerator::new(spec.clone())?.generate_dataset(n_nc, n_mci, n_ad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_spec() -> PhantomSpec {
        PhantomSpec {
            jitter_sigma: 0.0,
            stage_range: [1.0, 1.0],
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn default_spec_is_valid() {
        let s = PhantomSpec::default();
        s.validate().unwrap();
        let atlas = s.atlas().unwrap();
        assert_eq!(atlas.k(), 14);
        let enl = atlas
            .relevant()
            .iter()
            .filter(|r| r.direction == Direction::Enlargement)
            .count();
        assert_eq!(enl, 3);
    }

    #[test]
    fn identity_effects_give_identical_volumes() {
        let mut s = flat_spec();
        for r in &mut s.regions {
            r.class_factors = ClassFactors::NONE;
        }
        let g = PhantomGenerator::new(s).unwrap();
        let clinical = ClinicalInfo::new(70.0, Sex::F).unwrap();
        let a = g.generate_case("a", Diagnosis::NC, clinical, 1).unwrap();
        let b = g.generate_case("b", Diagnosis::AD, clinical, 2).unwrap();
        let c = g.generate_case("c", Diagnosis::MCI, clinical, 3).unwrap();
        assert_eq!(a.measures, b.measures);
        assert_eq!(a.measures, c.measures);
    }

    #[test]
    fn ad_factor_halves_volume() {
        let mut s = flat_spec();
        s.regions[0].class_factors.ad = 0.5;
        let g = PhantomGenerator::new(s).unwrap();
        let clinical = ClinicalInfo::new(60.0, Sex::M).unwrap();
        let nc = g.generate_case("nc", Diagnosis::NC, clinical, 4).unwrap();
        let ad = g.generate_case("ad", Diagnosis::AD, clinical, 5).unwrap();
        let (vn, va) = (
            nc.measures.volume(1).unwrap(),
            ad.measures.volume(1).unwrap(),
        );
        assert!((va - 0.5 * vn).abs() <= 1.0, "{va} vs {vn}");
    }

    #[test]
    fn overflow_is_a_spec_error() {
        let mut s = flat_spec();
        s.regions[0].base_voxels = 600.0;
        let g = PhantomGenerator::new(s).unwrap();
        let clinical = ClinicalInfo::new(60.0, Sex::F).unwrap();
        assert!(matches!(
            g.generate_case("x", Diagnosis::NC, clinical, 0),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn overlapping_territories_rejected() {
        let mut s = PhantomSpec::default();
        s.regions[1].origin = s.regions[0].origin;
        assert!(matches!(s.validate(), Err(Error::Spec(_))));
        let mut s = PhantomSpec::default();
        s.regions[0].class_factors.ad = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn empty_and_deterministic() {
        let s = PhantomSpec::default();
        assert!(generate_dataset(&s, 0, 0, 0).unwrap().is_empty());
        let a = generate_dataset(&s, 4, 2, 4).unwrap();
        let b = generate_dataset(&s, 4, 2, 4).unwrap();
        assert_eq!(a, b);
        let ids: std::collections::BTreeSet<_> = a.iter().map(|c| &c.id).collect();
        assert_eq!(ids.len(), 10);
    }
}
