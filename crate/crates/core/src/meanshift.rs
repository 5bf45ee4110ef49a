//! Unsupervised vegetation baseline: joint spatial-range mean-shift
//! filtering in L*u*v*, region fusion with small-region pruning, and a
//! green-patch test on region mean colors.
//!
//! The kernel is flat: a data pixel contributes to the mean iff it lies
//! within `spatial_bandwidth` (Euclidean, pixels) of the current mode
//! position AND within `range_bandwidth` (Euclidean, L*u*v* units) of the
//! current mode color.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{rgb_to_luv, BinaryMask, LuvImage, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeanShiftParams {
    /// h_s, pixels.
    pub spatial_bandwidth: f32,
    /// h_r, L*u*v* units.
    pub range_bandwidth: f32,
    /// Regions smaller than this many pixels are merged into a neighbour.
    pub min_region: usize,
    pub max_iters: u32,
    /// Stop once the joint (x, y, L, u, v) shift is below this.
    pub eps: f32,
}

impl Default for MeanShiftParams {
    fn default() -> Self {
        Self {
            spatial_bandwidth: 7.0,
            range_bandwidth: 6.5,
            min_region: 20,
            max_iters: 20,
            eps: 0.1,
        }
    }
}

impl MeanShiftParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f32| v > 0.0 && v.is_finite();
        if !positive(self.spatial_bandwidth) || !positive(self.range_bandwidth) || !positive(self.eps) {
            return Err(Error::validation(
                "mean shift bandwidths and eps must be positive and finite",
            ));
        }
        if self.min_region < 1 || self.max_iters < 1 {
            return Err(Error::validation("min_region and max_iters must be >= 1"));
        }
        Ok(())
    }
}

/// Converged point in the joint domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub x: f32,
    pub y: f32,
    pub luv: [f32; 3],
    pub iterations: u32,
}

/// Output of [`meanshift_filter`].
#[derive(Debug, Clone)]
pub struct Filtered {
    /// The range component of each pixel's mode.
    pub filtered: LuvImage,
    pub modes: Vec<Mode>,
    /// L*u*v* of the unfiltered input.
    pub source: LuvImage,
}

pub fn meanshift_filter(img: &RgbImage, p: &MeanShiftParams) -> Result<Filtered> {
    meanshift_filter_luv(&rgb_to_luv(img), p)
}

/// Runs the filter on an image already in L*u*v*.
pub fn meanshift_filter_luv(src: &LuvImage, p: &MeanShiftParams) -> Result<Filtered> {
    p.validate()?;
    let (w, h) = (src.width() as usize, src.height() as usize);
    let data = src.as_slice();
    let modes: Vec<Mode> = (0..w * h)
        .into_par_iter()
        .with_min_len(w.max(64))
        .map(|i| seek_mode(data, w, h, i % w, i / w, p))
        .collect();
    let filtered = LuvImage::from_vec(
        src.width(),
        src.height(),
        modes.iter().map(|m| m.luv).collect(),
    )?;
    Ok(Filtered {
        filtered,
        modes,
        source: src.clone(),
    })
}

fn seek_mode(data: &[[f32; 3]], w: usize, h: usize, px: usize, py: usize, p: &MeanShiftParams) -> Mode {
    let hs = p.spatial_bandwidth;
    let hs2 = hs * hs;
    let hr2 = p.range_bandwidth * p.range_bandwidth;
    let eps2 = f64::from(p.eps) * f64::from(p.eps);

    let (mut cx, mut cy) = (px as f32, py as f32);
    let mut c = data[py * w + px];
    let mut iterations = 0;
    while iterations < p.max_iters {
        iterations += 1;
        let x0 = (cx - hs).ceil().max(0.0) as usize;
        let x1 = ((cx + hs).floor() as isize).min(w as isize - 1);
        let y0 = (cy - hs).ceil().max(0.0) as usize;
        let y1 = ((cy + hs).floor() as isize).min(h as isize - 1);
        if x1 < x0 as isize || y1 < y0 as isize {
            break;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);

        // Sums of offsets from the current mode, so that a window of
        // identical colors produces an exactly zero range shift.
        let mut n = 0u32;
        let mut s = [0f64; 5];
        for qy in y0..=y1 {
            let dy = qy as f32 - cy;
            let dy2 = dy * dy;
            let row = &data[qy * w..qy * w + w];
            for (qx, &q) in (x0..).zip(&row[x0..=x1]) {
                let dx = qx as f32 - cx;
                if dx * dx + dy2 > hs2 {
                    continue;
                }
                let dl = q[0] - c[0];
                let du = q[1] - c[1];
                let dv = q[2] - c[2];
                if dl * dl + du * du + dv * dv > hr2 {
                    continue;
                }
                n += 1;
                s[0] += f64::from(dx);
                s[1] += f64::from(dy);
                s[2] += f64::from(dl);
                s[3] += f64::from(du);
                s[4] += f64::from(dv);
            }
        }
        if n == 0 {
            break;
        }
        let inv = 1.0 / f64::from(n);
        let shift = s.map(|v| v * inv);
        cx += shift[0] as f32;
        cy += shift[1] as f32;
        c = [
            c[0] + shift[2] as f32,
            c[1] + shift[3] as f32,
            c[2] + shift[4] as f32,
        ];
        if shift.iter().map(|v| v * v).sum::<f64>() < eps2 {
            break;
        }
    }
    Mode {
        x: cx,
        y: cy,
        luv: c,
        iterations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionStats {
    pub pixel_count: usize,
    pub mean_rgb: [f64; 3],
    pub mean_luv: [f64; 3],
}

/// Dense per-pixel region labels `0..R` plus per-region statistics computed
/// from the unfiltered pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
    pub regions: Vec<RegionStats>,
}

impl Segmentation {
    pub fn region_count(&self) -> usize {
        self.regions.len()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Acc {
    count: usize,
    rgb: [u64; 3],
    luv: [f64; 3],
}

impl Acc {
    fn add(&mut self, other: &Acc) {
        self.count += other.count;
        for k in 0..3 {
            self.rgb[k] += other.rgb[k];
            self.luv[k] += other.luv[k];
        }
    }

    fn mean_luv(&self) -> [f64; 3] {
        self.luv.map(|v| v / self.count as f64)
    }

    fn stats(&self) -> RegionStats {
        RegionStats {
            pixel_count: self.count,
            mean_rgb: self.rgb.map(|v| v as f64 / self.count as f64),
            mean_luv: self.mean_luv(),
        }
    }
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    /// Joins the sets; the smaller root index becomes the representative.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }
}

fn range_dist2(a: [f32; 3], b: [f32; 3]) -> f32 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

/// Groups 4-connected pixels whose modes are closer than the range
/// bandwidth, then merges regions below `min_region` pixels into the
/// adjacent region with the nearest mean L*u*v*, smallest first.
pub fn fuse_regions(img: &RgbImage, filtered: &Filtered, p: &MeanShiftParams) -> Result<Segmentation> {
    p.validate()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if filtered.modes.len() != w * h {
        return Err(Error::validation("mode count does not match image size"));
    }
    let hr2 = p.range_bandwidth * p.range_bandwidth;
    let modes = &filtered.modes;

    let mut ds = DisjointSet::new(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w && range_dist2(modes[i].luv, modes[i + 1].luv) < hr2 {
                ds.union(i, i + 1);
            }
            if y + 1 < h && range_dist2(modes[i].luv, modes[i + w].luv) < hr2 {
                ds.union(i, i + w);
            }
        }
    }

    // Initial components, numbered in row-major order of first pixel.
    let mut comp_of_root = vec![usize::MAX; w * h];
    let mut labels = vec![0usize; w * h];
    let mut accs: Vec<Acc> = Vec::new();
    let source = filtered.source.as_slice();
    for i in 0..w * h {
        let r = ds.find(i);
        if comp_of_root[r] == usize::MAX {
            comp_of_root[r] = accs.len();
            accs.push(Acc::default());
        }
        let c = comp_of_root[r];
        labels[i] = c;
        let acc = &mut accs[c];
        acc.count += 1;
        let rgb = img.pixel(i);
        for k in 0..3 {
            acc.rgb[k] += u64::from(rgb[k]);
            acc.luv[k] += f64::from(source[i][k]);
        }
    }

    let n = accs.len();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for y in 0..h {
        for x in 0..w {
            let a = labels[y * w + x];
            for b in [
                (x + 1 < w).then(|| labels[y * w + x + 1]),
                (y + 1 < h).then(|| labels[(y + 1) * w + x]),
            ]
            .into_iter()
            .flatten()
            {
                if a != b {
                    adj[a].insert(b);
                    adj[b].insert(a);
                }
            }
        }
    }

    let mut parent: Vec<usize> = (0..n).collect();
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> = accs
        .iter()
        .enumerate()
        .filter(|(_, a)| a.count < p.min_region)
        .map(|(i, a)| Reverse((a.count, i)))
        .collect();
    while let Some(Reverse((count, r))) = heap.pop() {
        if parent[r] != r || accs[r].count != count || count >= p.min_region || adj[r].is_empty() {
            continue;
        }
        let mean = accs[r].mean_luv();
        let target = *adj[r]
            .iter()
            .min_by(|&&a, &&b| {
                let da = dist2(mean, accs[a].mean_luv());
                let db = dist2(mean, accs[b].mean_luv());
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .expect("non-empty adjacency");
        parent[r] = target;
        let absorbed = accs[r];
        accs[target].add(&absorbed);
        for nb in std::mem::take(&mut adj[r]) {
            adj[nb].remove(&r);
            if nb != target {
                adj[nb].insert(target);
                adj[target].insert(nb);
            }
        }
        if accs[target].count < p.min_region {
            heap.push(Reverse((accs[target].count, target)));
        }
    }

    let root = |mut r: usize| {
        while parent[r] != r {
            r = parent[r];
        }
        r
    };
    let mut dense = vec![u32::MAX; n];
    let mut regions = Vec::new();
    let mut out = Vec::with_capacity(w * h);
    for &c in &labels {
        let r = root(c);
        if dense[r] == u32::MAX {
            dense[r] = regions.len() as u32;
            regions.push(accs[r].stats());
        }
        out.push(dense[r]);
    }
    Ok(Segmentation {
        width: img.width(),
        height: img.height(),
        labels: out,
        regions,
    })
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

/// Thresholds, in 8-bit channel units, for calling a region green.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreenParams {
    /// Mean green must exceed mean red and mean blue by more than this.
    pub t_dom: f64,
    /// `2g - r - b` must exceed this.
    pub t_excess: f64,
}

impl Default for GreenParams {
    fn default() -> Self {
        Self {
            t_dom: 10.0,
            t_excess: 20.0,
        }
    }
}

impl GreenParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_dom >= 0.0 && self.t_excess >= 0.0) {
            return Err(Error::validation("green thresholds must be >= 0"));
        }
        Ok(())
    }

    pub fn is_green(&self, mean_rgb: [f64; 3]) -> bool {
        let [r, g, b] = mean_rgb;
        g > r + self.t_dom && g > b + self.t_dom && (2.0 * g - r - b) > self.t_excess
    }
}

pub fn classify_green(seg: &Segmentation, g: &GreenParams) -> Result<BinaryMask> {
    let green: Vec<bool> = seg.regions.iter().map(|r| g.is_green(r.mean_rgb)).collect();
    BinaryMask::from_vec(
        seg.width,
        seg.height,
        seg.labels.iter().map(|&l| green[l as usize]).collect(),
    )
}

/// Fraction of vegetation pixels.
pub fn gvi_of_mask(mask: &BinaryMask) -> f64 {
    mask.count() as f64 / mask.len() as f64
}

/// The whole baseline: filter, fuse, classify.
pub fn segment_vegetation(
    img: &RgbImage,
    ms: &MeanShiftParams,
    green: &GreenParams,
) -> Result<(Segmentation, BinaryMask)> {
    green.validate()?;
    let filtered = meanshift_filter(img, ms)?;
    let seg = fuse_regions(img, &filtered, ms)?;
    let mask = classify_green(&seg, green)?;
    Ok((seg, mask))
}
