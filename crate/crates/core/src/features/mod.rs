//! Handcrafted lesion features: asymmetry, border compactness, HSV
//! statistics, dominant hue, superpixel colour variance, relative colours
//! and the blue-whitish veil pixel count.

pub mod kmeans;
pub mod slic;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{LesionRecord, Sex};
use crate::error::{Error, Result};
use crate::imaging::{mask_geometry, rgb_to_hsv, Mask, MaskGeometry, MaskedImage};

pub use slic::{Segment, Segmentation, SlicParams};

/// Canonical feature names, in column order.
pub const FEATURE_NAMES: [&str; 18] = [
    "mean_asymmetry",
    "compactness_x",
    "hue_mean",
    "hue_var",
    "sat_mean",
    "sat_var",
    "val_mean",
    "val_var",
    "avg_hue",
    "dom_hue",
    "colour_variance",
    "avg_red_channel",
    "avg_green_channel",
    "avg_blue_channel",
    "F1",
    "F2",
    "F11",
    "blue_veil_pixels",
];

/// The ten features the reference run of the experiment ended up selecting.
pub const REFERENCE_SELECTION: [&str; 10] = [
    "mean_asymmetry",
    "compactness_x",
    "sat_var",
    "avg_hue",
    "dom_hue",
    "avg_green_channel",
    "F1",
    "F2",
    "F11",
    "blue_veil_pixels",
];

pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|&n| n == name)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    values: [f64; FEATURE_NAMES.len()],
}

impl FeatureVector {
    pub fn from_values(values: [f64; FEATURE_NAMES.len()]) -> Self {
        Self { values }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        feature_index(name).map(|i| self.values[i])
    }

    pub fn values(&self) -> &[f64; FEATURE_NAMES.len()] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        FEATURE_NAMES.iter().copied().zip(self.values.iter().copied())
    }

    pub fn to_map(&self) -> BTreeMap<String, f64> {
        self.iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldAxis {
    Vertical,
    Horizontal,
    Both,
}

impl std::str::FromStr for FoldAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vertical" => Ok(Self::Vertical),
            "horizontal" => Ok(Self::Horizontal),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!("unknown fold axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub asymmetry_rotations: usize,
    pub asymmetry_step_degrees: f64,
    pub fold_axis: FoldAxis,
    pub kmeans_k: usize,
    pub kmeans_max_iter: usize,
    pub slic: SlicParams,
    /// Adds `B > R` to the blue-veil rule.
    pub blue_veil_require_blue: bool,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            asymmetry_rotations: 8,
            asymmetry_step_degrees: 22.5,
            fold_axis: FoldAxis::Vertical,
            kmeans_k: 5,
            kmeans_max_iter: 100,
            slic: SlicParams::default(),
            blue_veil_require_blue: false,
            seed: 0,
        }
    }
}

/// Sampling offsets `j + delta` around a centroid coordinate, with `delta`
/// in `{0, 0.5}` so that the grid is closed under reflection.
fn offset_phase(c: f64) -> f64 {
    let frac = c - c.floor();
    if (frac - 0.5).abs() < 0.25 {
        0.5
    } else {
        0.0
    }
}

/// Rotated copy of the mask resampled (nearest neighbour) on a grid of
/// offsets around the centroid. Returns the set membership as a dense grid
/// indexed by offset.
fn rotated_grid(mask: &Mask, centroid: (f64, f64), radius: i64, degrees: f64) -> Vec<bool> {
    let (cx, cy) = centroid;
    let (px, py) = (offset_phase(cx), offset_phase(cy));
    let (sin, cos) = degrees.to_radians().sin_cos();
    let side = (2 * radius + 1) as usize;
    let mut grid = vec![false; side * side];
    for j in -radius..=radius {
        for i in -radius..=radius {
            let (ox, oy) = (i as f64 + px, j as f64 + py);
            let sx = cx + cos * ox + sin * oy;
            let sy = cy - sin * ox + cos * oy;
            let (ix, iy) = ((sx + 0.5).floor() as i64, (sy + 0.5).floor() as i64);
            grid[(j + radius) as usize * side + (i + radius) as usize] = mask.get_signed(ix, iy);
        }
    }
    grid
}

/// 1 - |A ∩ fold(A)| / |A ∪ fold(A)| on an offset grid.
fn fold_score(grid: &[bool], radius: i64, px: f64, py: f64, horizontal_axis: bool) -> f64 {
    let side = (2 * radius + 1) as usize;
    // index of the mirrored offset: (i + p) -> -(i + p) = (-i - 2p) + p
    let mirror = |i: i64, p: f64| -i - (2.0 * p) as i64;
    let (mut inter, mut union) = (0usize, 0usize);
    for j in -radius..=radius {
        for i in -radius..=radius {
            let a = grid[(j + radius) as usize * side + (i + radius) as usize];
            let (mi, mj) = if horizontal_axis { (i, mirror(j, py)) } else { (mirror(i, px), j) };
            let b = if mi.abs() <= radius && mj.abs() <= radius {
                grid[(mj + radius) as usize * side + (mi + radius) as usize]
            } else {
                false
            };
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
    }
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// Mean fold asymmetry over `rotations` rotations spaced `step_degrees`
/// apart, in `[0, 1]` with 0 for a mirror-symmetric lesion.
pub fn asymmetry(mask: &Mask, rotations: usize, step_degrees: f64, axis: FoldAxis) -> Result<f64> {
    let geom = mask_geometry(mask)?;
    let (cx, cy) = geom.centroid;
    let mut reach = 0.0f64;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                reach = reach.max(((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt());
            }
        }
    }
    let radius = reach.ceil() as i64 + 2;
    let (px, py) = (offset_phase(cx), offset_phase(cy));
    let rotations = rotations.max(1);
    let mut total = 0.0;
    for k in 0..rotations {
        let grid = rotated_grid(mask, geom.centroid, radius, k as f64 * step_degrees);
        total += match axis {
            FoldAxis::Vertical => fold_score(&grid, radius, px, py, false),
            FoldAxis::Horizontal => fold_score(&grid, radius, px, py, true),
            FoldAxis::Both => {
                0.5 * (fold_score(&grid, radius, px, py, false) + fold_score(&grid, radius, px, py, true))
            }
        };
    }
    Ok(total / rotations as f64)
}

/// Border compactness `p² / (4πA)` of a rasterised mask.
pub fn compactness(geometry: &MaskGeometry) -> f64 {
    compactness_of(geometry.perimeter as f64, geometry.area as f64)
}

/// `p² / (4πA)` for a perimeter and area given directly.
pub fn compactness_of(perimeter: f64, area: f64) -> f64 {
    perimeter * perimeter / (4.0 * PI * area)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsvStats {
    pub hue_mean: f64,
    pub hue_var: f64,
    pub sat_mean: f64,
    pub sat_var: f64,
    pub val_mean: f64,
    pub val_var: f64,
}

/// Circular mean of angles in degrees, in `[0, 360)`.
pub fn circular_mean_degrees(angles: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for (a, w) in angles {
        let r = a.to_radians();
        s += w * r.sin();
        c += w * r.cos();
    }
    let m = s.atan2(c).to_degrees().rem_euclid(360.0);
    if m >= 360.0 {
        0.0
    } else {
        m
    }
}

/// Signed angular difference wrapped into `[-180, 180)`.
pub fn hue_difference(a: f64, b: f64) -> f64 {
    (a - b + 180.0).rem_euclid(360.0) - 180.0
}

/// Population mean and variance of H, S, V over lesion pixels. Hue uses the
/// circular mean and the variance of wrapped deviations from it.
pub fn hsv_stats(image: &MaskedImage) -> Result<HsvStats> {
    let hsv: Vec<_> = image.lesion_pixels().map(|(_, p)| rgb_to_hsv(p)).collect();
    if hsv.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = hsv.len() as f64;
    let hue_mean = circular_mean_degrees(hsv.iter().map(|p| (p.h, 1.0)));
    let hue_var = hsv.iter().map(|p| hue_difference(p.h, hue_mean).powi(2)).sum::<f64>() / n;
    let mean_var = |f: &dyn Fn(&crate::imaging::Hsv) -> f64| {
        let m = hsv.iter().map(f).sum::<f64>() / n;
        let v = hsv.iter().map(|p| (f(p) - m).powi(2)).sum::<f64>() / n;
        (m, v)
    };
    let (sat_mean, sat_var) = mean_var(&|p| p.s);
    let (val_mean, val_var) = mean_var(&|p| p.v);
    Ok(HsvStats {
        hue_mean,
        hue_var,
        sat_mean,
        sat_var,
        val_mean,
        val_var,
    })
}

/// `(avg_hue, dom_hue)`: circular mean hue and the hue of the heaviest
/// k-means cluster over lesion pixels' (H/360, S, V).
pub fn dominant_hue(image: &MaskedImage, k: usize, seed: u64, max_iter: usize) -> Result<(f64, f64)> {
    let mut counts: BTreeMap<[u8; 3], usize> = BTreeMap::new();
    for (_, p) in image.lesion_pixels() {
        *counts.entry(p).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut points = Vec::with_capacity(counts.len());
    let mut weights = Vec::with_capacity(counts.len());
    let mut hues = Vec::with_capacity(counts.len());
    for (rgb, n) in &counts {
        let hsv = rgb_to_hsv(*rgb);
        points.push([hsv.h / 360.0, hsv.s, hsv.v]);
        weights.push(*n as f64);
        hues.push((hsv.h, *n as f64));
    }
    let avg_hue = circular_mean_degrees(hues.into_iter());
    let clusters = kmeans::kmeans(&points, &weights, k.max(1), seed, max_iter);
    let mut best = 0;
    for (i, w) in clusters.weights.iter().enumerate() {
        if *w > clusters.weights[best] {
            best = i;
        }
    }
    Ok((avg_hue, clusters.centroids[best][0] * 360.0))
}

/// Size-weighted total variance (sum over channels) of segment mean colours.
pub fn colour_variance_of(segments: &[Segment]) -> f64 {
    let total: f64 = segments.iter().map(|s| s.pixels as f64).sum();
    if segments.len() < 2 || total == 0.0 {
        return 0.0;
    }
    (0..3)
        .map(|c| {
            let mean = segments.iter().map(|s| s.pixels as f64 * s.mean[c]).sum::<f64>() / total;
            segments
                .iter()
                .map(|s| s.pixels as f64 * (s.mean[c] - mean).powi(2))
                .sum::<f64>()
                / total
        })
        .sum()
}

pub fn colour_variance(image: &MaskedImage, params: &SlicParams) -> Result<f64> {
    if image.mask().is_empty() {
        return Err(Error::EmptyMask);
    }
    let seg = slic::slic(image, params);
    Ok(colour_variance_of(&slic::lesion_segments(image, &seg)))
}

/// Normalised rgb chromaticity; black maps to equal thirds.
pub fn chromaticity(rgb: [f64; 3]) -> [f64; 3] {
    let sum = rgb[0] + rgb[1] + rgb[2];
    if sum <= 0.0 {
        [1.0 / 3.0; 3]
    } else {
        [rgb[0] / sum, rgb[1] / sum, rgb[2] / sum]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeColours {
    pub f1: f64,
    pub f2: f64,
    pub f11: f64,
}

/// F1/F2: mean red/green chromaticity of the lesion's superpixel means;
/// F11: mean red chromaticity of skin pixels minus that of lesion pixels.
pub fn relative_colours_of(image: &MaskedImage, segments: &[Segment]) -> Result<RelativeColours> {
    if segments.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = segments.len() as f64;
    let chroma: Vec<[f64; 3]> = segments.iter().map(|s| chromaticity(s.mean)).collect();
    let f1 = chroma.iter().map(|c| c[0]).sum::<f64>() / n;
    let f2 = chroma.iter().map(|c| c[1]).sum::<f64>() / n;

    let red = |p: [u8; 3]| chromaticity([f64::from(p[0]), f64::from(p[1]), f64::from(p[2])])[0];
    let (mut skin, mut skin_n) = (0.0, 0usize);
    for p in image.skin_pixels() {
        skin += red(p);
        skin_n += 1;
    }
    if skin_n == 0 {
        return Err(Error::NoSkin);
    }
    let (mut lesion, mut lesion_n) = (0.0, 0usize);
    for (_, p) in image.lesion_pixels() {
        lesion += red(p);
        lesion_n += 1;
    }
    Ok(RelativeColours {
        f1,
        f2,
        f11: skin / skin_n as f64 - lesion / lesion_n as f64,
    })
}

pub fn relative_colours(image: &MaskedImage, params: &SlicParams) -> Result<RelativeColours> {
    if image.mask().is_empty() {
        return Err(Error::EmptyMask);
    }
    let seg = slic::slic(image, params);
    relative_colours_of(image, &slic::lesion_segments(image, &seg))
}

#[inline]
pub fn is_blue_veil([r, g, b]: [u8; 3], require_blue: bool) -> bool {
    let (r, g, b) = (i32::from(r), i32::from(g), i32::from(b));
    r > 60 && r - 46 < g && g < r + 15 && (!require_blue || b > r)
}

pub fn blue_veil(image: &MaskedImage, require_blue: bool) -> usize {
    image
        .lesion_pixels()
        .filter(|(_, p)| is_blue_veil(*p, require_blue))
        .count()
}

/// Computes every canonical feature for one lesion.
pub fn extract_all(lesion_id: &str, image: &MaskedImage, config: &FeatureConfig) -> Result<FeatureVector> {
    extract_inner(image, config).map_err(|e| Error::Feature {
        lesion: lesion_id.to_string(),
        source: Box::new(e),
    })
}

fn extract_inner(image: &MaskedImage, config: &FeatureConfig) -> Result<FeatureVector> {
    let geometry = mask_geometry(image.mask())?;
    let asym = asymmetry(
        image.mask(),
        config.asymmetry_rotations,
        config.asymmetry_step_degrees,
        config.fold_axis,
    )?;
    let hsv = hsv_stats(image)?;
    let (avg_hue, dom_hue) = dominant_hue(image, config.kmeans_k, config.seed, config.kmeans_max_iter)?;
    let seg = slic::slic(image, &config.slic);
    let segments = slic::lesion_segments(image, &seg);
    let colour_var = colour_variance_of(&segments);
    let rel = relative_colours_of(image, &segments)?;

    let mut sums = [0.0f64; 3];
    for (_, p) in image.lesion_pixels() {
        for c in 0..3 {
            sums[c] += f64::from(p[c]);
        }
    }
    let n = geometry.area as f64;

    let values = [
        asym,
        compactness(&geometry),
        hsv.hue_mean,
        hsv.hue_var,
        hsv.sat_mean,
        hsv.sat_var,
        hsv.val_mean,
        hsv.val_var,
        avg_hue,
        dom_hue,
        colour_var,
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        rel.f1,
        rel.f2,
        rel.f11,
        blue_veil(image, config.blue_veil_require_blue) as f64,
    ];
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite {}", FEATURE_NAMES[i])));
    }
    Ok(FeatureVector { values })
}

/// One row of the feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub record: LesionRecord,
    pub features: FeatureVector,
}

const META_COLUMNS: [&str; 7] = [
    "image_id",
    "lesion_id",
    "patient_id",
    "sex",
    "diagnosis",
    "label",
    "is_augmented",
];

pub fn write_feature_table(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    let header: Vec<&str> = META_COLUMNS.iter().chain(FEATURE_NAMES.iter()).copied().collect();
    out.write_record(&header)?;
    for row in rows {
        let r = &row.record;
        let mut fields = vec![
            r.image_id.clone(),
            r.lesion_id.clone(),
            r.patient_id.clone(),
            r.sex.as_str().to_string(),
            r.diagnosis.as_str().to_string(),
            r.label.as_str().to_string(),
            r.is_augmented.to_string(),
        ];
        fields.extend(row.features.values.iter().map(|v| v.to_string()));
        out.write_record(&fields)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a table written by [`write_feature_table`]. Augmented rows carry
/// no parent link in this format; it is recovered from the id suffix.
pub fn read_feature_table(path: &Path) -> Result<Vec<FeatureRow>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let expected: Vec<&str> = META_COLUMNS.iter().chain(FEATURE_NAMES.iter()).copied().collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Invalid(format!("unexpected feature table header in {}", path.display())));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let is_augmented: bool = rec[6]
            .parse()
            .map_err(|_| Error::Invalid(format!("bad is_augmented `{}`", &rec[6])))?;
        let image_id = rec[0].to_string();
        let augment_parent = if is_augmented {
            crate::splits::augmented_parent(&image_id).map(str::to_string)
        } else {
            None
        };
        let record = LesionRecord {
            image_id,
            lesion_id: rec[1].to_string(),
            patient_id: rec[2].to_string(),
            sex: rec[3].parse::<Sex>()?,
            diagnosis: rec[4].parse()?,
            label: rec[5].parse()?,
            is_augmented,
            augment_parent,
        };
        let mut values = [0.0; FEATURE_NAMES.len()];
        for (i, v) in values.iter_mut().enumerate() {
            *v = rec[META_COLUMNS.len() + i]
                .parse()
                .map_err(|_| Error::Invalid(format!("bad value for {}", FEATURE_NAMES[i])))?;
        }
        rows.push(FeatureRow {
            record,
            features: FeatureVector { values },
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
