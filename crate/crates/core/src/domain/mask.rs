use std::collections::BTreeSet;

use super::{AtlasConfig, Case, ParcellationMap, VolumeGrid};
use crate::error::{Error, Result};

/// Zeroes every voxel outside the atlas's K relevant regions.
pub fn mask_to_k_regions(case: &Case, atlas: &AtlasConfig) -> Result<VolumeGrid> {
    check_regions(&case.parcellation, atlas)?;
    mask_with_codes(&case.volume, &case.parcellation, &atlas.relevant_codes())
}

/// Keeps voxels whose parcellation code is in `codes`; the rest become zero.
pub fn mask_with_codes(
    volume: &VolumeGrid,
    parcellation: &ParcellationMap,
    codes: &[i32],
) -> Result<VolumeGrid> {
    if volume.shape() != parcellation.shape() {
        return Err(Error::Shape {
            expected: volume.shape().to_vec(),
            actual: parcellation.shape().to_vec(),
        });
    }
    let keep: BTreeSet<i32> = codes.iter().copied().collect();
    let data = volume
        .data()
        .iter()
        .zip(parcellation.labels())
        .map(|(&v, code)| if keep.contains(code) { v } else { 0.0 })
        .collect();
    VolumeGrid::new(volume.shape(), data)
}

/// One channel per relevant region, each holding only that region's voxels.
pub fn region_channels(case: &Case, atlas: &AtlasConfig) -> Result<Vec<Vec<f32>>> {
    check_regions(&case.parcellation, atlas)?;
    let codes = atlas.relevant_codes();
    let n = case.volume.len();
    let mut channels = vec![vec![0.0f32; n]; codes.len()];
    for (i, (&v, code)) in case
        .volume
        .data()
        .iter()
        .zip(case.parcellation.labels())
        .enumerate()
    {
        if let Some(ch) = codes.iter().position(|c| c == code) {
            channels[ch][i] = v;
        }
    }
    Ok(channels)
}

fn check_regions(parcellation: &ParcellationMap, atlas: &AtlasConfig) -> Result<()> {
    parcellation.validate(atlas)?;
    let present = parcellation.codes_present();
    for code in atlas.relevant_codes() {
        if !present.contains(&code) {
            return Err(Error::MissingRegion(code));
        }
    }
    Ok(())
}
