//! Agatston and pseudo-Agatston scoring with risk categorization.
//!
//! A slice's Agatston contribution is the sum over its 8-connected lesions
//! of lesion area times a density weight from the lesion's peak HU, corrected
//! by increment/thickness when slices overlap. The pseudo score replaces
//! physical area with warped pixel count times the in-plane alignment scale,
//! which is what the slice scorer regresses; [`pseudo_to_agatston`] restores
//! the physical factors exactly.
//!
//! All scores are kept as unrounded reals. [`volume_agatston`] is the
//! brute-force reference implementation the learned scorer is judged
//! against.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::lesion::{self, SliceLesion, CALCIUM_THRESHOLD_HU};
use crate::volgrid::Volume;

/// Density weight from a lesion's maximum HU: 1 for [130, 200), 2 for
/// [200, 300), 3 for [300, 400), 4 for 400 and above.
pub fn density_weight(max_hu: i16) -> Result<u32> {
    if max_hu < CALCIUM_THRESHOLD_HU {
        return Err(CoreError::invalid("density weight needs max HU >= 130"));
    }
    Ok(match max_hu {
        130..=199 => 1,
        200..=299 => 2,
        300..=399 => 3,
        _ => 4,
    })
}

/// Agatston contribution of one slice: sum over lesions of area times
/// density weight, scaled by increment/thickness to correct for overlapping
/// reconstructions.
pub fn slice_agatston(lesions: &[SliceLesion], increment_mm: f64, thickness_mm: f64) -> Result<f64> {
    if !(increment_mm > 0.0) || !(thickness_mm > 0.0) {
        return Err(CoreError::invalid("increment and thickness must be positive"));
    }
    let mut total = 0.0f64;
    for l in lesions {
        total += l.area_mm2 * density_weight(l.max_hu)? as f64;
    }
    Ok(total * increment_mm / thickness_mm)
}

/// Pseudo score of one slice from (pixel count, density weight) pairs:
/// sum of count times the in-plane alignment scale times weight.
pub fn pseudo_agatston(counts_and_weights: &[(usize, u32)], s_xy: f64) -> Result<f64> {
    if !(s_xy > 0.0) {
        return Err(CoreError::invalid("in-plane scale must be positive"));
    }
    Ok(counts_and_weights
        .iter()
        .map(|&(n, w)| n as f64 * s_xy * w as f64)
        .sum())
}

/// Converts a pseudo score back to an Agatston score by reinstating the
/// physical pixel area and the overlap correction:
/// `pseudo * (sx * sy / s_xy) * (increment / thickness)`.
///
/// Exact inverse of scoring with pseudo weights: for lesions measured on a
/// grid with pixel spacing (sx, sy), pseudo_to_agatston(pseudo_agatston(L))
/// equals slice_agatston(L) when the same s_xy is used on both sides.
pub fn pseudo_to_agatston(
    pseudo: f64,
    pixel_spacing_mm: (f64, f64),
    thickness_mm: f64,
    increment_mm: f64,
    s_xy: f64,
) -> Result<f64> {
    if !(pixel_spacing_mm.0 > 0.0 && pixel_spacing_mm.1 > 0.0)
        || !(thickness_mm > 0.0)
        || !(increment_mm > 0.0)
        || !(s_xy > 0.0)
    {
        return Err(CoreError::invalid("conversion metadata must be positive"));
    }
    Ok(pseudo * (pixel_spacing_mm.0 * pixel_spacing_mm.1 / s_xy) * (increment_mm / thickness_mm))
}

/// Converts a slice Agatston score into the pseudo target the scorer
/// regresses, given the in-plane scale of the alignment. Inverse of
/// [`pseudo_to_agatston`].
pub fn agatston_to_pseudo(
    agatston: f64,
    pixel_spacing_mm: (f64, f64),
    thickness_mm: f64,
    increment_mm: f64,
    s_xy: f64,
) -> Result<f64> {
    if !(pixel_spacing_mm.0 > 0.0 && pixel_spacing_mm.1 > 0.0)
        || !(thickness_mm > 0.0)
        || !(increment_mm > 0.0)
        || !(s_xy > 0.0)
    {
        return Err(CoreError::invalid("conversion metadata must be positive"));
    }
    Ok(agatston * (s_xy / (pixel_spacing_mm.0 * pixel_spacing_mm.1)) * (thickness_mm / increment_mm))
}

/// Cardiovascular risk categorization scheme. Category ids are 1-based in
/// the order of the scheme's bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RiskScheme {
    /// Five categories: <1, [1,10), [10,100), [100,400), >=400.
    A5,
    /// Four categories with inclusive upper bounds: <=10, (10,100],
    /// (100,1000], >1000.
    B4,
    /// Five categories: [0,10), [10,100), [100,400), [400,1000), >=1000.
    C5,
    /// Four categories: [0,1), [1,100), [100,300), >=300.
    Orca4,
}

impl RiskScheme {
    /// Number of categories in the scheme.
    pub fn n_categories(self) -> usize {
        match self {
            RiskScheme::A5 | RiskScheme::C5 => 5,
            RiskScheme::B4 | RiskScheme::Orca4 => 4,
        }
    }

    /// Category id (1-based) for an unrounded total score.
    pub fn category(self, total: f64) -> Result<u8> {
        if !(total >= 0.0) {
            return Err(CoreError::invalid("risk category needs a non-negative score"));
        }
        Ok(match self {
            RiskScheme::A5 => {
                if total < 1.0 {
                    1
                } else if total < 10.0 {
                    2
                } else if total < 100.0 {
                    3
                } else if total < 400.0 {
                    4
                } else {
                    5
                }
            }
            RiskScheme::B4 => {
                if total <= 10.0 {
                    1
                } else if total <= 100.0 {
                    2
                } else if total <= 1000.0 {
                    3
                } else {
                    4
                }
            }
            RiskScheme::C5 => {
                if total < 10.0 {
                    1
                } else if total < 100.0 {
                    2
                } else if total < 400.0 {
                    3
                } else if total < 1000.0 {
                    4
                } else {
                    5
                }
            }
            RiskScheme::Orca4 => {
                if total < 1.0 {
                    1
                } else if total < 100.0 {
                    2
                } else if total < 300.0 {
                    3
                } else {
                    4
                }
            }
        })
    }

    /// Short name used in reports.
    pub fn name(self) -> &'static str {
        match self {
            RiskScheme::A5 => "A5",
            RiskScheme::B4 => "B4",
            RiskScheme::C5 => "C5",
            RiskScheme::Orca4 => "ORCA4",
        }
    }

    /// Parses a scheme name as written by [`RiskScheme::name`].
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "A5" => Ok(RiskScheme::A5),
            "B4" => Ok(RiskScheme::B4),
            "C5" => Ok(RiskScheme::C5),
            "ORCA4" => Ok(RiskScheme::Orca4),
            _ => Err(CoreError::invalid("unknown risk scheme")),
        }
    }
}

/// Complete scoring result for one volume.
#[derive(Clone, Debug)]
pub struct ScoreRecord {
    /// Per-slice pseudo scores (alignment scale 1 for a stored volume).
    pub per_slice_pseudo: Vec<f64>,
    /// Per-slice Agatston scores.
    pub per_slice_agatston: Vec<f64>,
    /// Sum of the per-slice Agatston scores.
    pub total_agatston: f64,
    /// Risk category id (1-based) of the total under `scheme`.
    pub category: u8,
    /// Scheme that produced `category`.
    pub scheme: RiskScheme,
    /// Per-artery totals, present when scoring ran with an artery label map.
    pub per_artery: Option<BTreeMap<u8, f64>>,
}

/// Reference Agatston scoring of a stored volume: per-slice 8-connected
/// lesions of the 130 HU threshold mask, scored and summed.
pub fn volume_agatston(vol: &Volume, scheme: RiskScheme) -> Result<ScoreRecord> {
    let (nx, ny, nz) = vol.dims();
    let area = vol.pixel_spacing_mm.0 * vol.pixel_spacing_mm.1;
    let mut per_slice_pseudo = Vec::with_capacity(nz);
    let mut per_slice_agatston = Vec::with_capacity(nz);
    let mut total = 0.0f64;
    for z in 0..nz {
        let lesions =
            lesion::find_slice_lesions(vol.plane(z), (nx, ny), area, CALCIUM_THRESHOLD_HU);
        let a = slice_agatston(&lesions, vol.slice_increment_mm, vol.slice_thickness_mm)?;
        let cw: Vec<(usize, u32)> = lesions
            .iter()
            .map(|l| Ok((l.pixels.len(), density_weight(l.max_hu)?)))
            .collect::<Result<_>>()?;
        let p = pseudo_agatston(&cw, 1.0)?;
        per_slice_pseudo.push(p);
        per_slice_agatston.push(a);
        total += a;
    }
    let category = scheme.category(total)?;
    Ok(ScoreRecord {
        per_slice_pseudo,
        per_slice_agatston,
        total_agatston: total,
        category,
        scheme,
        per_artery: None,
    })
}

/// Per-slice Agatston restricted to voxels carrying one label: the threshold
/// mask is intersected with the label before components form.
pub fn per_label_slice_agatston(vol: &Volume, labels: &[u8], label: u8) -> Result<Vec<f64>> {
    let (nx, ny, nz) = vol.dims();
    if labels.len() != nx * ny * nz {
        return Err(CoreError::invalid("label map length does not match volume"));
    }
    let area = vol.pixel_spacing_mm.0 * vol.pixel_spacing_mm.1;
    let plane_len = nx * ny;
    let mut out = Vec::with_capacity(nz);
    for z in 0..nz {
        let plane = vol.plane(z);
        let lplane = &labels[z * plane_len..(z + 1) * plane_len];
        let mask: Vec<bool> = plane
            .iter()
            .zip(lplane.iter())
            .map(|(&v, &l)| v >= CALCIUM_THRESHOLD_HU && l == label)
            .collect();
        let comps = lesion::components_2d(&mask, (nx, ny));
        let lesions: Vec<SliceLesion> = comps
            .into_iter()
            .map(|c| {
                let max_hu = c.iter().map(|&i| plane[i]).max().unwrap_or(0);
                SliceLesion {
                    area_mm2: c.len() as f64 * area,
                    pixels: c,
                    max_hu,
                }
            })
            .collect();
        out.push(slice_agatston(
            &lesions,
            vol.slice_increment_mm,
            vol.slice_thickness_mm,
        )?);
    }
    Ok(out)
}

/// Reference scoring with an artery label map: the whole-volume record plus
/// per-artery totals for the given labels.
pub fn volume_agatston_labeled(
    vol: &Volume,
    labels: &[u8],
    artery_labels: &[u8],
    scheme: RiskScheme,
) -> Result<ScoreRecord> {
    let mut record = volume_agatston(vol, scheme)?;
    let mut map = BTreeMap::new();
    for &a in artery_labels {
        let per_slice = per_label_slice_agatston(vol, labels, a)?;
        map.insert(a, per_slice.iter().sum::<f64>());
    }
    record.per_artery = Some(map);
    Ok(record)
}
