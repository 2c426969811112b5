//! Shared test data: labeler fuzz cases, small phantom sets, published table.

#![allow(dead_code)]

use std::collections::BTreeMap;

use evidx_core::domain::{
    AtlasConfig, Case, ClinicalInfo, Diagnosis, Direction, ParcellationMap, Region, Sex,
    SummaryMeasures, VolumeGrid,
};
use evidx_core::eval::summary::{MethodResults, VariantScore};
use evidx_core::phantom::{PhantomGenerator, PhantomSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A random labeling problem: up to 500 cases over up to 14 regions, ages
/// spread over a few decades so groups vary in size and some fall back.
/// Volumes are half-integers, so every class mean is computed exactly
/// regardless of summation order.
pub fn fuzz_labeling(rng: &mut ChaCha8Rng) -> (Vec<Case>, AtlasConfig) {
    let k = rng.gen_range(1..=14);
    let n = rng.gen_range(3..=500);
    let regions: Vec<Region> = (0..k)
        .map(|i| Region {
            code: i as i32 + 1,
            name: format!("r{i}"),
            direction: if rng.gen_bool(0.7) {
                Direction::Atrophy
            } else {
                Direction::Enlargement
            },
        })
        .collect();
    // per (decade, region) effect; sometimes inverted to force fallback
    let decades = rng.gen_range(1..=4);
    let base_age = rng.gen_range(5..=8) as f64 * 10.0;
    let effect: Vec<Vec<f64>> = (0..decades)
        .map(|_| {
            (0..k)
                .map(|_| {
                    let e = rng.gen_range(8..=40) as f64;
                    if rng.gen_bool(0.04) {
                        -e
                    } else {
                        e
                    }
                })
                .collect()
        })
        .collect();
    let p_mci = rng.gen_range(0.05..0.4);
    let p_ad = rng.gen_range(0.05..0.5);
    let shape = [8, 8, 8];
    let cases = (0..n)
        .map(|i| {
            let d = rng.gen_range(0..decades);
            let age = base_age + d as f64 * 10.0 + rng.gen_range(0..10) as f64;
            let sex = if rng.gen_bool(0.5) { Sex::F } else { Sex::M };
            let u: f64 = rng.gen();
            let (dx, stage) = if u < p_mci {
                (Diagnosis::MCI, 1.0)
            } else if u < p_mci + p_ad {
                (Diagnosis::AD, 2.0)
            } else {
                (Diagnosis::NC, 0.0)
            };
            let volume_mm3: BTreeMap<i32, f64> = regions
                .iter()
                .enumerate()
                .map(|(j, r)| {
                    let sign = match r.direction {
                        Direction::Atrophy => -1.0,
                        Direction::Enlargement => 1.0,
                    };
                    let noise = rng.gen_range(-60..=60) as f64 * 0.5;
                    (r.code, 400.0 + sign * stage * effect[d][j] + noise)
                })
                .collect();
            Case::new(
                format!("f{i:04}"),
                VolumeGrid::zeros(shape).unwrap(),
                ParcellationMap::new(shape, vec![0; 512]).unwrap(),
                ClinicalInfo::new(age, sex).unwrap(),
                dx,
                SummaryMeasures { volume_mm3 },
            )
            .unwrap()
        })
        .collect();
    (cases, AtlasConfig::new(regions, k).unwrap())
}

/// A small data set from the default phantom.
pub fn phantom_cases(
    n_nc: usize,
    n_mci: usize,
    n_ad: usize,
    seed: u64,
) -> (Vec<Case>, AtlasConfig) {
    let spec = PhantomSpec {
        seed,
        ..PhantomSpec::default()
    };
    let atlas = spec.atlas().unwrap();
    let cases = PhantomGenerator::new(spec)
        .unwrap()
        .generate_dataset(n_nc, n_mci, n_ad)
        .unwrap();
    (cases, atlas)
}

/// Per-backbone (ResNet-34, -50, -152) accuracy (%) and AUROC with the
/// published Average column, by method.
pub struct PublishedRow {
    pub method: &'static str,
    pub baseline: bool,
    pub scores: [(f64, f64); 3],
    pub average: (f64, f64),
}

pub const PUBLISHED: [PublishedRow; 7] = [
    PublishedRow {
        method: "Pre-training / Orig. MRI",
        baseline: true,
        scores: [(82.6, 0.910), (85.3, 0.916), (84.7, 0.917)],
        average: (84.2, 0.914),
    },
    PublishedRow {
        method: "Random init / Orig. MRI",
        baseline: true,
        scores: [(82.7, 0.886), (84.7, 0.903), (78.4, 0.858)],
        average: (81.9, 0.882),
    },
    PublishedRow {
        method: "Pre-training / K=14",
        baseline: true,
        scores: [(85.1, 0.927), (85.8, 0.931), (87.6, 0.940)],
        average: (86.2, 0.933),
    },
    PublishedRow {
        method: "Random init / K=14",
        baseline: true,
        scores: [(87.4, 0.924), (87.5, 0.931), (86.5, 0.945)],
        average: (87.1, 0.933),
    },
    PublishedRow {
        method: "EaP",
        baseline: false,
        scores: [(87.5, 0.934), (89.3, 0.941), (89.4, 0.949)],
        average: (88.7, 0.942),
    },
    PublishedRow {
        method: "EaT",
        baseline: false,
        scores: [(89.2, 0.944), (88.9, 0.940), (87.8, 0.934)],
        average: (88.6, 0.939),
    },
    PublishedRow {
        method: "EaI",
        baseline: false,
        scores: [(88.0, 0.940), (89.9, 0.943), (89.2, 0.949)],
        average: (89.0, 0.944),
    },
];

pub fn published_methods() -> Vec<MethodResults> {
    PUBLISHED
        .iter()
        .map(|r| MethodResults {
            method: r.method.into(),
            is_baseline: r.baseline,
            per_variant: ["resnet34", "resnet50", "resnet152"]
                .iter()
                .zip(r.scores)
                .map(|(v, (a, u))| VariantScore {
                    variant: v.to_string(),
                    accuracy_pct: a,
                    auroc: u,
                })
                .collect(),
        })
        .collect()
}
