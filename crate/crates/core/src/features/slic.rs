//! SLIC superpixels on raw RGB values.

use std::collections::VecDeque;

use crate::imaging::MaskedImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicParams {
    pub n_segments: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            n_segments: 100,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

/// Superpixel label per pixel, labels dense in `0..count`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub labels: Vec<u32>,
    pub count: usize,
    /// Seed grid spacing in pixels.
    pub spacing: f64,
}

#[derive(Debug, Clone, Copy)]
struct Centre {
    colour: [f64; 3],
    x: f64,
    y: f64,
}

fn gradient(image: &MaskedImage, x: usize, y: usize) -> f64 {
    let (w, h) = (image.width(), image.height());
    let xl = x.saturating_sub(1);
    let xr = (x + 1).min(w - 1);
    let yu = y.saturating_sub(1);
    let yd = (y + 1).min(h - 1);
    let (a, b, c, d) = (image.pixel(xr, y), image.pixel(xl, y), image.pixel(x, yd), image.pixel(x, yu));
    (0..3)
        .map(|i| {
            let gx = f64::from(a[i]) - f64::from(b[i]);
            let gy = f64::from(c[i]) - f64::from(d[i]);
            gx * gx + gy * gy
        })
        .sum()
}

pub fn slic(image: &MaskedImage, params: &SlicParams) -> Segmentation {
    let (w, h) = (image.width(), image.height());
    let n = w * h;
    let step = (n as f64 / params.n_segments.max(1) as f64).sqrt().max(1.0);

    let mut centres = Vec::new();
    let mut gy = step / 2.0;
    while gy < h as f64 {
        let mut gx = step / 2.0;
        while gx < w as f64 {
            let (cx, cy) = (gx as usize, gy as usize);
            // move the seed to the lowest gradient in its 3x3 neighbourhood
            let mut best = (cx, cy, f64::INFINITY);
            for yy in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                for xx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                    let g = gradient(image, xx, yy);
                    if g < best.2 {
                        best = (xx, yy, g);
                    }
                }
            }
            let p = image.pixel(best.0, best.1);
            centres.push(Centre {
                colour: [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])],
                x: best.0 as f64,
                y: best.1 as f64,
            });
            gx += step;
        }
        gy += step;
    }

    let spatial = (params.compactness / step).powi(2);
    let mut labels = vec![0u32; n];
    let mut dist = vec![f64::INFINITY; n];
    let window = step.ceil() as i64;
    for _ in 0..params.iterations {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (ci, c) in centres.iter().enumerate() {
            let x0 = (c.x.round() as i64 - window).max(0) as usize;
            let x1 = (c.x.round() as i64 + window).min(w as i64 - 1) as usize;
            let y0 = (c.y.round() as i64 - window).max(0) as usize;
            let y1 = (c.y.round() as i64 + window).min(h as i64 - 1) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = image.pixel(x, y);
                    let dc: f64 = (0..3).map(|i| (f64::from(p[i]) - c.colour[i]).powi(2)).sum();
                    let ds = (x as f64 - c.x).powi(2) + (y as f64 - c.y).powi(2);
                    let d = dc + ds * spatial;
                    let idx = y * w + x;
                    if d < dist[idx] {
                        dist[idx] = d;
                        labels[idx] = ci as u32;
                    }
                }
            }
        }
        let mut sums = vec![[0.0f64; 5]; centres.len()];
        let mut counts = vec![0usize; centres.len()];
        for y in 0..h {
            for x in 0..w {
                let l = labels[y * w + x] as usize;
                let p = image.pixel(x, y);
                let s = &mut sums[l];
                s[0] += f64::from(p[0]);
                s[1] += f64::from(p[1]);
                s[2] += f64::from(p[2]);
                s[3] += x as f64;
                s[4] += y as f64;
                counts[l] += 1;
            }
        }
        for ((c, s), &k) in centres.iter_mut().zip(&sums).zip(&counts) {
            if k > 0 {
                let k = k as f64;
                *c = Centre {
                    colour: [s[0] / k, s[1] / k, s[2] / k],
                    x: s[3] / k,
                    y: s[4] / k,
                };
            }
        }
    }

    let min_size = ((step * step) / 4.0).max(1.0) as usize;
    let (labels, count) = enforce_connectivity(&labels, w, h, min_size);
    Segmentation {
        labels,
        count,
        spacing: step,
    }
}

/// Relabels 4-connected components; components smaller than `min_size`
/// are absorbed by the previously visited adjacent component.
fn enforce_connectivity(labels: &[u32], w: usize, h: usize, min_size: usize) -> (Vec<u32>, usize) {
    const UNSET: u32 = u32::MAX;
    let mut out = vec![UNSET; labels.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for start in 0..labels.len() {
        if out[start] != UNSET {
            continue;
        }
        let (sx, sy) = (start % w, start / w);
        let mut adjacent = None;
        for (nx, ny) in neighbours(sx, sy, w, h) {
            let o = out[ny * w + nx];
            if o != UNSET {
                adjacent = Some(o);
                break;
            }
        }
        component.clear();
        out[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            component.push(i);
            for (nx, ny) in neighbours(i % w, i / w, w, h) {
                let j = ny * w + nx;
                if out[j] == UNSET && labels[j] == labels[start] {
                    out[j] = next;
                    queue.push_back(j);
                }
            }
        }
        match adjacent {
            Some(a) if component.len() < min_size => {
                for &i in &component {
                    out[i] = a;
                }
            }
            _ => next += 1,
        }
    }
    (out, next as usize)
}

fn neighbours(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let mut v = [(usize::MAX, usize::MAX); 4];
    if x > 0 {
        v[0] = (x - 1, y);
    }
    if y > 0 {
        v[1] = (x, y - 1);
    }
    if x + 1 < w {
        v[2] = (x + 1, y);
    }
    if y + 1 < h {
        v[3] = (x, y + 1);
    }
    v.into_iter().filter(|p| p.0 != usize::MAX)
}

/// Size and mean colour of one superpixel restricted to lesion pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub pixels: usize,
    pub mean: [f64; 3],
}

/// Clips a segmentation to the lesion mask, dropping segments that do not
/// touch it. A lesion smaller than one seed cell is a single segment.
pub fn lesion_segments(image: &MaskedImage, seg: &Segmentation) -> Vec<Segment> {
    let area = image.mask().area();
    if (area as f64) < seg.spacing * seg.spacing {
        return whole_lesion(image).into_iter().collect();
    }
    let mut sums = vec![[0.0f64; 3]; seg.count];
    let mut counts = vec![0usize; seg.count];
    for (i, p) in image.lesion_pixels() {
        let l = seg.labels[i] as usize;
        for c in 0..3 {
            sums[l][c] += f64::from(p[c]);
        }
        counts[l] += 1;
    }
    sums.iter()
        .zip(&counts)
        .filter(|(_, &k)| k > 0)
        .map(|(s, &k)| Segment {
            pixels: k,
            mean: [s[0] / k as f64, s[1] / k as f64, s[2] / k as f64],
        })
        .collect()
}

fn whole_lesion(image: &MaskedImage) -> Option<Segment> {
    let mut sum = [0.0f64; 3];
    let mut k = 0usize;
    for (_, p) in image.lesion_pixels() {
        for c in 0..3 {
            sum[c] += f64::from(p[c]);
        }
        k += 1;
    }
    (k > 0).then(|| Segment {
        pixels: k,
        mean: [sum[0] / k as f64, sum[1] / k as f64, sum[2] / k as f64],
    })
}
