//! Raster primitives: decoding, mask geometry, HSV conversion and the
//! augmentation transforms used to upsample non-cancerous lesions.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major boolean lesion mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "mask buffer has {} pixels, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Lookup that treats everything outside the raster as background.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return false;
        }
        self.data[y as usize * self.width + x as usize]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y)
        })
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| {
            self.get(x, self.height - 1 - y)
        })
    }
}

/// Decoded RGB raster plus an aligned lesion mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedImage {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
    mask: Mask,
}

impl MaskedImage {
    pub fn new(width: usize, height: usize, rgb: Vec<u8>, mask: Mask) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "rgb buffer has {} bytes, expected {}x{}x3",
                rgb.len(),
                width,
                height
            )));
        }
        if mask.width != width || mask.height != height {
            return Err(Error::Dimension(format!(
                "mask is {}x{}, image is {}x{}",
                mask.width, mask.height, width, height
            )));
        }
        Ok(Self {
            width,
            height,
            rgb,
            mask,
        })
    }

    /// Builds an image from per-pixel colour and mask closures.
    pub fn from_fn(
        width: usize,
        height: usize,
        colour: impl Fn(usize, usize) -> [u8; 3],
        lesion: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let mut rgb = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                rgb.extend_from_slice(&colour(x, y));
            }
        }
        Self {
            width,
            height,
            rgb,
            mask: Mask::from_fn(width, height, lesion),
        }
    }

    /// Decodes an image and its mask. Any nonzero mask intensity is lesion.
    pub fn load(image_path: &Path, mask_path: &Path) -> Result<Self> {
        let rgb = open_image(image_path)?.to_rgb8();
        let mask = open_image(mask_path)?.to_luma8();
        if rgb.dimensions() != mask.dimensions() {
            return Err(Error::DimensionMismatch {
                image_id: image_path.display().to_string(),
                image: rgb.dimensions(),
                mask: mask.dimensions(),
            });
        }
        let (w, h) = rgb.dimensions();
        let mask = Mask::new(
            w as usize,
            h as usize,
            mask.as_raw().iter().map(|&v| v != 0).collect(),
        )?;
        Self::new(w as usize, h as usize, rgb.into_raw(), mask)
    }

    pub fn save(&self, image_path: &Path, mask_path: &Path) -> Result<()> {
        let rgb = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.rgb.clone())
            .expect("buffer size checked at construction");
        rgb.save(image_path).map_err(|e| Error::Decode {
            path: image_path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mask = image::GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.mask.data.iter().map(|&v| if v { 255 } else { 0 }).collect(),
        )
        .expect("buffer size checked at construction");
        mask.save(mask_path).map_err(|e| Error::Decode {
            path: mask_path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Iterates `(index, [r, g, b])` over lesion pixels in raster order.
    pub fn lesion_pixels(&self) -> impl Iterator<Item = (usize, [u8; 3])> + '_ {
        self.mask
            .data
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(i, _)| (i, [self.rgb[3 * i], self.rgb[3 * i + 1], self.rgb[3 * i + 2]]))
    }

    /// Iterates colours of pixels outside the mask.
    pub fn skin_pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.mask
            .data
            .iter()
            .enumerate()
            .filter(|(_, &m)| !m)
            .map(move |(i, _)| [self.rgb[3 * i], self.rgb[3 * i + 1], self.rgb[3 * i + 2]])
    }

    /// Pads the raster with `border` pixels of `fill` on every side.
    pub fn pad(&self, border: usize, fill: [u8; 3]) -> Self {
        let w = self.width + 2 * border;
        let h = self.height + 2 * border;
        let inside = |x: usize, y: usize| {
            x >= border && y >= border && x < border + self.width && y < border + self.height
        };
        Self::from_fn(
            w,
            h,
            |x, y| {
                if inside(x, y) {
                    self.pixel(x - border, y - border)
                } else {
                    fill
                }
            },
            |x, y| inside(x, y) && self.mask.get(x - border, y - border),
        )
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads only the header of an image file.
pub fn image_dimensions(path: &Path) -> Result<(u32, u32)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::image_dimensions(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// HSV triple with hue in degrees `[0, 360)` and saturation/value in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hsv {
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

pub fn rgb_to_hsv([r, g, b]: [u8; 3]) -> Hsv {
    let r = f64::from(r) / 255.0;
    let g = f64::from(g) / 255.0;
    let b = f64::from(b) / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    // zero saturation: hue pinned to 0
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    Hsv {
        h: if h >= 360.0 { h - 360.0 } else { h },
        s,
        v,
    }
}

pub fn hsv_to_rgb(hsv: Hsv) -> [u8; 3] {
    let c = hsv.v * hsv.s;
    let hp = hsv.h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = hsv.v - c;
    let q = |u: f64| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// Per-pixel HSV conversion of the whole raster.
pub fn to_hsv(image: &MaskedImage) -> Vec<Hsv> {
    image.rgb.chunks_exact(3).map(|p| rgb_to_hsv([p[0], p[1], p[2]])).collect()
}

/// Area, 4-connected exposed-edge perimeter and centroid of a mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskGeometry {
    pub area: usize,
    pub perimeter: usize,
    pub centroid: (f64, f64),
}

pub fn mask_geometry(mask: &Mask) -> Result<MaskGeometry> {
    let mut area = 0usize;
    let mut perimeter = 0usize;
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.get(x, y) {
                continue;
            }
            area += 1;
            sx += x as f64;
            sy += y as f64;
            let (xi, yi) = (x as i64, y as i64);
            perimeter += [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .filter(|(dx, dy)| !mask.get_signed(xi + dx, yi + dy))
                .count();
        }
    }
    if area == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(MaskGeometry {
        area,
        perimeter,
        centroid: (sx / area as f64, sy / area as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    HorizontalFlip,
    VerticalFlip,
    Sharpen,
    GaussianBlur,
}

/// Parameter ranges for the stochastic transforms, sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub blur_sigma: (f64, f64),
    pub sharpen_amount: (f64, f64),
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            blur_sigma: (0.5, 2.0),
            sharpen_amount: (0.5, 1.5),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Applies one transform. Flips move the mask with the pixels; sharpen and
/// blur only touch colour.
pub fn augment(image: &MaskedImage, transform: Transform, seed: u64, params: &AugmentParams) -> MaskedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match transform {
        Transform::HorizontalFlip => MaskedImage {
            width: image.width,
            height: image.height,
            rgb: remap(image, |x, y| (image.width - 1 - x, y)),
            mask: image.mask.flip_horizontal(),
        },
        Transform::VerticalFlip => MaskedImage {
            width: image.width,
            height: image.height,
            rgb: remap(image, |x, y| (x, image.height - 1 - y)),
            mask: image.mask.flip_vertical(),
        },
        Transform::GaussianBlur => {
            let sigma = uniform(&mut rng, params.blur_sigma);
            gaussian_blur(image, sigma)
        }
        Transform::Sharpen => {
            let amount = uniform(&mut rng, params.sharpen_amount);
            sharpen(image, amount)
        }
    }
}

fn remap(image: &MaskedImage, src: impl Fn(usize, usize) -> (usize, usize)) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.rgb.len());
    for y in 0..image.height {
        for x in 0..image.width {
            let (sx, sy) = src(x, y);
            out.extend_from_slice(&image.pixel(sx, sy));
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian filter with clamped borders, in floating point.
fn blur_channels(image: &MaskedImage, sigma: f64) -> Vec<f64> {
    let (w, h) = (image.width, image.height);
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let src: Vec<f64> = image.rgb.iter().map(|&v| f64::from(v)).collect();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let sx = (x as i64 + j as i64 - r).clamp(0, w as i64 - 1) as usize;
                    acc += kv * src[(y * w + sx) * 3 + c];
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let sy = (y as i64 + j as i64 - r).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[(sy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    out
}

fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn gaussian_blur(image: &MaskedImage, sigma: f64) -> MaskedImage {
    let blurred = blur_channels(image, sigma);
    MaskedImage {
        width: image.width,
        height: image.height,
        rgb: blurred.into_iter().map(quantize).collect(),
        mask: image.mask.clone(),
    }
}

/// Unsharp masking against a unit-sigma blur.
pub fn sharpen(image: &MaskedImage, amount: f64) -> MaskedImage {
    let blurred = blur_channels(image, 1.0);
    MaskedImage {
        width: image.width,
        height: image.height,
        rgb: image
            .rgb
            .iter()
            .zip(&blurred)
            .map(|(&v, &b)| quantize(f64::from(v) + amount * (f64::from(v) - b)))
            .collect(),
        mask: image.mask.clone(),
    }
}

/// Sequence of transforms (each with its own seed) for one augmented copy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentRecipe {
    pub steps: Vec<(Transform, u64)>,
}

impl AugmentRecipe {
    /// One flip (horizontal or vertical, equally likely), then sharpening
    /// and blurring each with probability one half.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut steps = Vec::with_capacity(3);
        let flip = if rng.gen_bool(0.5) {
            Transform::HorizontalFlip
        } else {
            Transform::VerticalFlip
        };
        steps.push((flip, rng.gen()));
        if rng.gen_bool(0.5) {
            steps.push((Transform::Sharpen, rng.gen()));
        }
        if rng.gen_bool(0.5) {
            steps.push((Transform::GaussianBlur, rng.gen()));
        }
        Self { steps }
    }

    pub fn apply(&self, image: &MaskedImage, params: &AugmentParams) -> MaskedImage {
        self.steps
            .iter()
            .fold(image.clone(), |img, &(t, seed)| augment(&img, t, seed, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(r: f64) -> Mask {
        let size = (2.0 * r) as usize + 11;
        let c = (size / 2) as f64;
        Mask::from_fn(size, size, |x, y| {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            dx * dx + dy * dy <= r * r
        })
    }

    fn noisy(w: usize, h: usize, seed: u64) -> MaskedImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<[u8; 3]> = (0..w * h).map(|_| rng.gen()).collect();
        let m: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.4)).collect();
        MaskedImage::from_fn(w, h, |x, y| px[y * w + x], |x, y| m[y * w + x])
    }

    #[test]
    fn hsv_reference_colours() {
        let red = rgb_to_hsv([255, 0, 0]);
        assert_eq!((red.h, red.s, red.v), (0.0, 1.0, 1.0));
        let grey = rgb_to_hsv([128, 128, 128]);
        assert_eq!((grey.h, grey.s), (0.0, 0.0));
        assert_eq!(grey.v, 128.0 / 255.0);
        let blue = rgb_to_hsv([0, 0, 255]);
        assert_eq!((blue.h, blue.s, blue.v), (240.0, 1.0, 1.0));
    }

    #[test]
    fn hsv_round_trip_exhaustive_subsample() {
        for r in (0..=255).step_by(5) {
            for g in (0..=255).step_by(7) {
                for b in (0..=255).step_by(3) {
                    let back = hsv_to_rgb(rgb_to_hsv([r, g, b]));
                    for (o, i) in back.iter().zip([r, g, b]) {
                        assert!((i16::from(*o) - i16::from(i)).abs() <= 1, "{r} {g} {b} -> {back:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn geometry_of_simple_masks() {
        let one = Mask::from_fn(3, 3, |x, y| x == 1 && y == 1);
        let g = mask_geometry(&one).unwrap();
        assert_eq!((g.area, g.perimeter), (1, 4));
        assert_eq!(g.centroid, (1.0, 1.0));

        let square = Mask::from_fn(14, 14, |x, y| (2..12).contains(&x) && (2..12).contains(&y));
        let g = mask_geometry(&square).unwrap();
        assert_eq!((g.area, g.perimeter), (100, 40));

        // touching the raster border counts as exposed
        let full = Mask::from_fn(4, 4, |_, _| true);
        assert_eq!(mask_geometry(&full).unwrap().perimeter, 16);
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(matches!(
            mask_geometry(&Mask::from_fn(4, 4, |_, _| false)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn rasterized_disk_geometry() {
        // Oracle: count the disk directly from its definition.
        let r = 50.0_f64;
        let m = disk(r);
        let c = (m.width() / 2) as f64;
        let mut oracle_area = 0;
        let mut oracle_edges = 0;
        let inside = |x: i64, y: i64| {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            dx * dx + dy * dy <= r * r
        };
        for y in -5..m.height() as i64 + 5 {
            for x in -5..m.width() as i64 + 5 {
                if inside(x, y) {
                    oracle_area += 1;
                    for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                        if !inside(x + dx, y + dy) {
                            oracle_edges += 1;
                        }
                    }
                }
            }
        }
        let g = mask_geometry(&m).unwrap();
        assert_eq!(g.area, oracle_area);
        assert_eq!(g.perimeter, oracle_edges);
        let analytic_area = std::f64::consts::PI * r * r;
        assert!((g.area as f64 - analytic_area).abs() / analytic_area < 0.02);
        assert_eq!(g.perimeter, 404);
    }

    #[test]
    fn flips_are_involutions_and_preserve_geometry() {
        let img = noisy(17, 11, 3);
        for t in [Transform::HorizontalFlip, Transform::VerticalFlip] {
            let once = augment(&img, t, 0, &AugmentParams::default());
            assert_eq!(once.width(), img.width());
            assert_eq!(once.mask().area(), img.mask().area());
            let g0 = mask_geometry(img.mask()).unwrap();
            let g1 = mask_geometry(once.mask()).unwrap();
            assert_eq!((g0.area, g0.perimeter), (g1.area, g1.perimeter));
            assert_eq!(augment(&once, t, 9, &AugmentParams::default()), img);
        }
    }

    #[test]
    fn blur_with_vanishing_sigma_is_identity() {
        let img = noisy(12, 9, 5);
        let params = AugmentParams {
            blur_sigma: (1e-4, 1e-4),
            ..Default::default()
        };
        let out = augment(&img, Transform::GaussianBlur, 1, &params);
        for (a, b) in out.rgb().iter().zip(img.rgb()) {
            assert!((i16::from(*a) - i16::from(*b)).abs() <= 1);
        }
        assert_eq!(out.mask(), img.mask());
    }

    #[test]
    fn sharpen_leaves_flat_image_alone() {
        let img = MaskedImage::from_fn(10, 8, |_, _| [120, 80, 60], |x, _| x > 3);
        for seed in 0..5 {
            assert_eq!(augment(&img, Transform::Sharpen, seed, &AugmentParams::default()), img);
        }
    }

    #[test]
    fn colour_transforms_keep_mask_and_size() {
        let img = noisy(15, 13, 8);
        for t in [Transform::Sharpen, Transform::GaussianBlur] {
            let out = augment(&img, t, 4, &AugmentParams::default());
            assert_eq!(out.mask(), img.mask());
            assert_eq!((out.width(), out.height()), (img.width(), img.height()));
        }
    }

    #[test]
    fn recipes_are_seed_deterministic() {
        let img = noisy(9, 9, 1);
        for seed in 0..20 {
            let a = AugmentRecipe::from_seed(seed);
            assert_eq!(a, AugmentRecipe::from_seed(seed));
            assert!(matches!(
                a.steps[0].0,
                Transform::HorizontalFlip | Transform::VerticalFlip
            ));
            let p = AugmentParams::default();
            assert_eq!(a.apply(&img, &p), a.apply(&img, &p));
            assert_eq!(a.apply(&img, &p).mask().area(), img.mask().area());
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = noisy(7, 5, 2);
        let (ip, mp) = (dir.path().join("a.png"), dir.path().join("a_mask.png"));
        img.save(&ip, &mp).unwrap();
        assert_eq!(MaskedImage::load(&ip, &mp).unwrap(), img);
        assert_eq!(image_dimensions(&ip).unwrap(), (7, 5));
    }
}
