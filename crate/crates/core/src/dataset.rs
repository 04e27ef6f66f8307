//! Images, tissue masks, patch extraction, CPC grids, augmentation and the synthetic
//! weakly labeled corpus.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{argument, config, Error, Result};
use crate::profile::stride_for;
use crate::tensor::Nhwc;

/// An RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub id: String,
    pub pixels: Nhwc,
    pub label: Option<bool>,
}

impl RawImage {
    pub fn new(id: impl Into<String>, pixels: Nhwc, label: Option<bool>) -> Result<Self> {
        if pixels.n != 1 || pixels.c != 3 {
            return Err(argument("image must be a single 3-channel map"));
        }
        if pixels.data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(argument("pixel values must be finite and in [0, 1]"));
        }
        Ok(Self {
            id: id.into(),
            pixels,
            label,
        })
    }

    pub fn uniform(id: &str, height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut px = Nhwc::zeros(1, height, width, 3);
        for p in px.data.chunks_mut(3) {
            p.copy_from_slice(&rgb);
        }
        Self {
            id: id.into(),
            pixels: px,
            label: None,
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.h
    }

    pub fn width(&self) -> usize {
        self.pixels.w
    }

    pub fn load_png(path: &Path, id: &str, label: Option<bool>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|v| *v as f64 / 255.0).collect();
        Self::new(id, Nhwc::from_vec(1, h as usize, w as usize, 3, data), label)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .pixels
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width() as u32, self.height() as u32, bytes)
            .ok_or_else(|| argument("pixel buffer does not match dimensions"))?;
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Foreground mask with the outer contour of every foreground component.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    /// Closed polygons through boundary pixel centers, `(row, col)`.
    pub contours: Vec<Vec<(usize, usize)>>,
}

impl ForegroundMask {
    pub fn full(height: usize, width: usize) -> Self {
        let mask = vec![true; height * width];
        let contours = trace_contours(&mask, height, width);
        Self {
            height,
            width,
            mask,
            contours,
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|m| *m)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row < self.height && col < self.width && self.mask[row * self.width + col]
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn iou(&self, other: &[bool]) -> f64 {
        let inter = self.mask.iter().zip(other).filter(|(a, b)| **a && **b).count();
        let union = self.mask.iter().zip(other).filter(|(a, b)| **a || **b).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Whether a point lies inside or on any contour polygon.
    pub fn in_any_contour(&self, row: usize, col: usize) -> bool {
        self.contours
            .iter()
            .any(|c| point_in_polygon(c, row as f64, col as f64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub saturation_threshold: f64,
    pub median_radius: usize,
    pub min_area: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            saturation_threshold: 0.08,
            median_radius: 2,
            min_area: 16,
        }
    }
}

/// Saturation thresholding, majority smoothing, small-component removal and hole
/// filling. An all-background image yields an empty mask with no contours.
pub fn segment_tissue(image: &RawImage, cfg: &SegmentConfig) -> ForegroundMask {
    let (h, w) = (image.height(), image.width());
    let raw: Vec<bool> = image
        .pixels
        .data
        .chunks(3)
        .map(|p| {
            let mx = p[0].max(p[1]).max(p[2]);
            let mn = p[0].min(p[1]).min(p[2]);
            let sat = if mx > 0.0 { (mx - mn) / mx } else { 0.0 };
            sat > cfg.saturation_threshold
        })
        .collect();
    let smooth = majority_filter(&raw, h, w, cfg.median_radius);
    let mut mask = drop_small_components(&smooth, h, w, cfg.min_area);
    fill_holes(&mut mask, h, w);
    let contours = trace_contours(&mask, h, w);
    if contours.is_empty() {
        warn!("image {}: no foreground found", image.id);
    }
    ForegroundMask {
        height: h,
        width: w,
        mask,
        contours,
    }
}

fn majority_filter(mask: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    if r == 0 {
        return mask.to_vec();
    }
    let mut integral = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += mask[y * w + x] as u32;
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = integral[y1 * (w + 1) + x1] + integral[y0 * (w + 1) + x0]
                - integral[y0 * (w + 1) + x1]
                - integral[y1 * (w + 1) + x0];
            let total = ((y1 - y0) * (x1 - x0)) as u32;
            out[y * w + x] = 2 * s > total;
        }
    }
    out
}

const N8: [(isize, isize); 8] = [
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
];
const N4: [(isize, isize); 4] = [(0, -1), (-1, 0), (0, 1), (1, 0)];

/// Label connected components of `value` pixels; returns labels (0 = other) and sizes.
fn components(
    mask: &[bool],
    h: usize,
    w: usize,
    value: bool,
    nbrs: &[(isize, isize)],
) -> (Vec<usize>, Vec<usize>) {
    let mut labels = vec![0usize; h * w];
    let mut sizes = vec![0usize];
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if mask[start] != value || labels[start] != 0 {
            continue;
        }
        let id = sizes.len();
        sizes.push(0);
        labels[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            sizes[id] += 1;
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for (dy, dx) in nbrs {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if mask[q] == value && labels[q] == 0 {
                    labels[q] = id;
                    queue.push_back(q);
                }
            }
        }
    }
    (labels, sizes)
}

fn drop_small_components(mask: &[bool], h: usize, w: usize, min_area: usize) -> Vec<bool> {
    let (labels, sizes) = components(mask, h, w, true, &N8);
    labels
        .iter()
        .map(|&l| l != 0 && sizes[l] >= min_area)
        .collect()
}

fn fill_holes(mask: &mut [bool], h: usize, w: usize) {
    let (labels, sizes) = components(mask, h, w, false, &N4);
    let mut touches = vec![false; sizes.len()];
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                touches[labels[y * w + x]] = true;
            }
        }
    }
    for (m, l) in mask.iter_mut().zip(&labels) {
        if *l != 0 && !touches[*l] {
            *m = true;
        }
    }
}

/// Moore-neighbour tracing of the outer boundary of every 8-connected component.
fn trace_contours(mask: &[bool], h: usize, w: usize) -> Vec<Vec<(usize, usize)>> {
    let (labels, sizes) = components(mask, h, w, true, &N8);
    let mut seen = vec![false; sizes.len()];
    let mut contours = Vec::new();
    let inside = |y: isize, x: isize, id: usize| {
        y >= 0 && x >= 0 && y < h as isize && x < w as isize && labels[y as usize * w + x as usize] == id
    };
    for p in 0..h * w {
        let id = labels[p];
        if id == 0 || seen[id] {
            continue;
        }
        seen[id] = true;
        let start = ((p / w) as isize, (p % w) as isize);
        let mut contour = vec![(start.0 as usize, start.1 as usize)];
        // The west neighbour of the first raster pixel is never in the component.
        let mut back_dir = 0usize;
        let mut cur = start;
        let mut first_step: Option<(isize, isize)> = None;
        let limit = 4 * sizes[id] + 8;
        for _ in 0..limit {
            let mut next = None;
            for i in 1..=8 {
                let d = (back_dir + i) % 8;
                let cand = (cur.0 + N8[d].0, cur.1 + N8[d].1);
                if inside(cand.0, cand.1, id) {
                    let prev = (back_dir + i - 1) % 8;
                    let b = (cur.0 + N8[prev].0, cur.1 + N8[prev].1);
                    let rel = (b.0 - cand.0, b.1 - cand.1);
                    let nb = N8.iter().position(|o| *o == rel).unwrap_or(0);
                    next = Some((cand, nb));
                    break;
                }
            }
            let Some((cand, nb)) = next else {
                break;
            };
            if cur == start {
                match first_step {
                    None => first_step = Some(cand),
                    Some(f) if f == cand => break,
                    _ => {}
                }
            }
            cur = cand;
            back_dir = nb;
            if cur == start && first_step.is_none() {
                break;
            }
            contour.push((cur.0 as usize, cur.1 as usize));
        }
        if contour.len() > 1 && contour.last() == contour.first() {
            contour.pop();
        }
        contours.push(contour);
    }
    contours
}

/// Inside-or-on test for a closed polygon of `(row, col)` vertices.
pub fn point_in_polygon(poly: &[(usize, usize)], row: f64, col: f64) -> bool {
    if poly.is_empty() {
        return false;
    }
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let (ay, ax) = (poly[i].0 as f64, poly[i].1 as f64);
        let (by, bx) = (poly[(i + 1) % n].0 as f64, poly[(i + 1) % n].1 as f64);
        let cross = (by - ay) * (col - ax) - (bx - ax) * (row - ay);
        if cross.abs() < 1e-12
            && row >= ay.min(by) - 1e-12
            && row <= ay.max(by) + 1e-12
            && col >= ax.min(bx) - 1e-12
            && col <= ax.max(bx) + 1e-12
        {
            return true;
        }
        if (ay > row) != (by > row) {
            let xi = ax + (row - ay) * (bx - ax) / (by - ay);
            if col < xi {
                inside = !inside;
            }
        }
    }
    inside
}

/// A square image tile cut from a source image.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: Nhwc,
    pub origin: (usize, usize),
    pub source_id: String,
}

impl Patch {
    pub fn size(&self) -> usize {
        self.pixels.h
    }

    pub fn cut(image: &RawImage, origin: (usize, usize), size: usize) -> Result<Self> {
        if origin.0 + size > image.height() || origin.1 + size > image.width() {
            return Err(argument("patch extends beyond the image"));
        }
        Ok(Self {
            pixels: crop(&image.pixels, origin.0 as isize, origin.1 as isize, size),
            origin,
            source_id: image.id.clone(),
        })
    }
}

/// Square crop of item 0 with border clamping for out-of-range coordinates.
fn crop(src: &Nhwc, top: isize, left: isize, size: usize) -> Nhwc {
    let mut out = Nhwc::zeros(1, size, size, src.c);
    for y in 0..size {
        let sy = (top + y as isize).clamp(0, src.h as isize - 1) as usize;
        for x in 0..size {
            let sx = (left + x as isize).clamp(0, src.w as isize - 1) as usize;
            out.pixel_mut(0, y, x).copy_from_slice(src.pixel(0, sy, sx));
        }
    }
    out
}

/// Lattice origins `(row, col)` in raster order; edge remainders are discarded.
pub fn lattice_origins(height: usize, width: usize, size: usize, stride: usize) -> Vec<(usize, usize)> {
    if size > height || size > width || stride == 0 {
        return Vec::new();
    }
    let rows = (height - size) / stride + 1;
    let cols = (width - size) / stride + 1;
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r * stride, c * stride)))
        .collect()
}

/// Patch origins whose center pixel lies in the foreground.
pub fn eligible_origins(
    mask: &ForegroundMask,
    size: usize,
    overlap: f64,
) -> Result<Vec<(usize, usize)>> {
    let stride = stride_for(size, overlap)?;
    Ok(lattice_origins(mask.height, mask.width, size, stride)
        .into_iter()
        .filter(|&(r, c)| mask.contains(r + size / 2, c + size / 2))
        .collect())
}

/// Cut every lattice patch whose center is foreground, in raster order.
pub fn extract_patches(
    image: &RawImage,
    mask: &ForegroundMask,
    size: usize,
    overlap: f64,
) -> Result<Vec<Patch>> {
    if mask.height != image.height() || mask.width != image.width() {
        return Err(argument("mask and image dimensions differ"));
    }
    let origins = eligible_origins(mask, size, overlap)?;
    if origins.is_empty() {
        warn!("image {}: no eligible {size}px patch", image.id);
    }
    origins
        .into_iter()
        .map(|o| Patch::cut(image, o, size))
        .collect()
}

/// The `rows × cols` sub-patches of one tile, stored as a batch in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub sub_size: usize,
    pub stride: usize,
    pub items: Nhwc,
}

impl PatchGrid {
    pub fn get(&self, r: usize, c: usize) -> Nhwc {
        let i = r * self.cols + c;
        Nhwc::from_vec(1, self.sub_size, self.sub_size, self.items.c, self.items.item(i).to_vec())
    }
}

fn grid_geometry(size: usize, sub_size: usize, overlap: f64) -> Result<(usize, usize)> {
    if sub_size == 0 || sub_size > size {
        return Err(config(format!("sub-patch {sub_size} does not fit in {size}")));
    }
    let stride = stride_for(sub_size, overlap)?;
    if (size - sub_size) % stride != 0 {
        return Err(config(format!(
            "({size} - {sub_size}) not divisible by stride {stride}"
        )));
    }
    Ok(((size - sub_size) / stride + 1, stride))
}

/// Map pixel values from `[0, 1]` to `[-1, 1]`; applied to every batch the networks train on.
pub fn center_unit_range(x: &mut Nhwc) {
    for v in &mut x.data {
        *v = 2.0 * *v - 1.0;
    }
}

pub fn make_cpc_grid(patch: &Patch, sub_size: usize, overlap: f64) -> Result<PatchGrid> {
    let (n, stride) = grid_geometry(patch.size(), sub_size, overlap)?;
    let mut items = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            items.push(crop(&patch.pixels, (r * stride) as isize, (c * stride) as isize, sub_size));
        }
    }
    Ok(PatchGrid {
        rows: n,
        cols: n,
        sub_size,
        stride,
        items: Nhwc::stack(&items),
    })
}

/// Like [`make_cpc_grid`] but each sub-patch window is displaced by up to `jitter`
/// pixels in each direction, clamped to the tile.
pub fn make_cpc_grid_jittered<R: Rng>(
    patch: &Patch,
    sub_size: usize,
    overlap: f64,
    jitter: usize,
    rng: &mut R,
) -> Result<PatchGrid> {
    let (n, stride) = grid_geometry(patch.size(), sub_size, overlap)?;
    let size = patch.size() as isize;
    let j = jitter as isize;
    let mut items = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let (dy, dx) = if j > 0 {
                (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
            } else {
                (0, 0)
            };
            let top = ((r * stride) as isize + dy).clamp(0, size - sub_size as isize);
            let left = ((c * stride) as isize + dx).clamp(0, size - sub_size as isize);
            items.push(crop(&patch.pixels, top, left, sub_size));
        }
    }
    Ok(PatchGrid {
        rows: n,
        cols: n,
        sub_size,
        stride,
        items: Nhwc::stack(&items),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub channel_drop_prob: f64,
    pub spatial_jitter: usize,
    /// Half-width of the per-channel multiplicative/additive color perturbation.
    pub color_jitter: f64,
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_horizontal: false,
            flip_vertical: false,
            channel_drop_prob: 0.0,
            spatial_jitter: 0,
            color_jitter: 0.0,
        }
    }

    /// Sub-patch level CPC augmentation: flips, channel dropping, spatial jitter.
    pub fn cpc_default() -> Self {
        Self {
            flip_horizontal: true,
            flip_vertical: true,
            channel_drop_prob: 0.25,
            spatial_jitter: 0,
            color_jitter: 0.0,
        }
    }

    /// Instance level MIL augmentation: flips, color and spatial jitter.
    pub fn mil_default() -> Self {
        Self {
            flip_horizontal: true,
            flip_vertical: true,
            channel_drop_prob: 0.0,
            spatial_jitter: 2,
            color_jitter: 0.05,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::none()
    }
}

pub fn flip_horizontal(m: &Nhwc) -> Nhwc {
    let mut out = m.clone();
    for n in 0..m.n {
        for y in 0..m.h {
            for x in 0..m.w {
                out.pixel_mut(n, y, x).copy_from_slice(m.pixel(n, y, m.w - 1 - x));
            }
        }
    }
    out
}

pub fn flip_vertical(m: &Nhwc) -> Nhwc {
    let mut out = m.clone();
    for n in 0..m.n {
        for y in 0..m.h {
            for x in 0..m.w {
                out.pixel_mut(n, y, x).copy_from_slice(m.pixel(n, m.h - 1 - y, x));
            }
        }
    }
    out
}

/// Zero-fill one color channel.
pub fn drop_channel(m: &Nhwc, channel: usize) -> Nhwc {
    let mut out = m.clone();
    for px in out.data.chunks_mut(m.c) {
        px[channel] = 0.0;
    }
    out
}

fn shift_clamped(m: &Nhwc, dy: isize, dx: isize) -> Nhwc {
    let mut out = m.clone();
    for n in 0..m.n {
        for y in 0..m.h {
            let sy = (y as isize + dy).clamp(0, m.h as isize - 1) as usize;
            for x in 0..m.w {
                let sx = (x as isize + dx).clamp(0, m.w as isize - 1) as usize;
                out.pixel_mut(n, y, x).copy_from_slice(m.pixel(n, sy, sx));
            }
        }
    }
    out
}

/// Apply the enabled transforms in a fixed order: flips, color jitter, channel drop,
/// spatial jitter. The result depends only on the inputs and the rng state.
pub fn augment<R: Rng>(patch: &Patch, cfg: &AugmentConfig, rng: &mut R) -> Patch {
    Patch {
        pixels: augment_map(&patch.pixels, cfg, rng),
        origin: patch.origin,
        source_id: patch.source_id.clone(),
    }
}

/// [`augment`] on a bare pixel map.
pub fn augment_map<R: Rng>(pixels: &Nhwc, cfg: &AugmentConfig, rng: &mut R) -> Nhwc {
    let mut px = pixels.clone();
    if cfg.flip_horizontal && rng.gen_bool(0.5) {
        px = flip_horizontal(&px);
    }
    if cfg.flip_vertical && rng.gen_bool(0.5) {
        px = flip_vertical(&px);
    }
    if cfg.color_jitter > 0.0 {
        let a = cfg.color_jitter;
        let gains: Vec<f64> = (0..px.c).map(|_| 1.0 + rng.gen_range(-a..a)).collect();
        let shifts: Vec<f64> = (0..px.c).map(|_| rng.gen_range(-a..a)).collect();
        for p in px.data.chunks_mut(px.c) {
            for ch in 0..p.len() {
                p[ch] = (p[ch] * gains[ch] + shifts[ch]).clamp(0.0, 1.0);
            }
        }
    }
    if cfg.channel_drop_prob > 0.0 && rng.gen_bool(cfg.channel_drop_prob.min(1.0)) {
        let ch = rng.gen_range(0..px.c);
        px = drop_channel(&px, ch);
    }
    if cfg.spatial_jitter > 0 {
        let mut j = cfg.spatial_jitter;
        if j >= px.h {
            warn!("spatial jitter {j} exceeds patch margin; clamped to {}", px.h - 1);
            j = px.h - 1;
        }
        let j = j as isize;
        let (dy, dx) = (rng.gen_range(-j..=j), rng.gen_range(-j..=j));
        px = shift_clamped(&px, dy, dx);
    }
    px
}

/// A labeled bag of instance patches.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub id: String,
    pub label: bool,
    pub instances: Vec<Patch>,
    pub instance_truth: Option<Vec<bool>>,
}

impl Bag {
    pub fn new(
        id: impl Into<String>,
        label: bool,
        instances: Vec<Patch>,
        instance_truth: Option<Vec<bool>>,
    ) -> Result<Self> {
        if instances.is_empty() {
            return Err(argument("a bag needs at least one instance"));
        }
        if let Some(t) = &instance_truth {
            if t.len() != instances.len() {
                return Err(argument("instance truth length differs from instance count"));
            }
            if t.iter().any(|v| *v) != label {
                return Err(argument(
                    "bag label must be positive exactly when some instance is positive",
                ));
            }
        }
        Ok(Self {
            id: id.into(),
            label,
            instances,
            instance_truth,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub image_size: usize,
    /// MIL patch side used to plant motifs and record instance truth.
    pub patch_size: usize,
    pub class_balance: f64,
    /// Expected planted motifs (positive instances) per positive image; at least one.
    pub motif_density: f64,
    pub noise_sigma: f64,
    pub stain_jitter: f64,
    /// Scattered nuclei per 1000 tissue pixels, both classes.
    pub background_nuclei: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_images: 40,
            image_size: 512,
            patch_size: 64,
            class_balance: 0.5,
            motif_density: 2.0,
            noise_sigma: 0.03,
            stain_jitter: 0.06,
            background_nuclei: 2.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 || self.image_size == 0 || self.patch_size == 0 {
            return Err(config("synthetic counts and sizes must be positive"));
        }
        if self.patch_size > self.image_size {
            return Err(config("patch larger than image"));
        }
        if !(0.0..=1.0).contains(&self.class_balance) {
            return Err(config("class balance must be a fraction"));
        }
        if self.motif_density < 1.0 {
            return Err(config("motif density must be at least 1"));
        }
        if self.noise_sigma < 0.0 || self.stain_jitter < 0.0 || self.background_nuclei < 0.0 {
            return Err(config("noise parameters must be non-negative"));
        }
        Ok(())
    }

    pub fn n_positive(&self) -> usize {
        (self.n_images as f64 * self.class_balance).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub image: RawImage,
    pub truth_foreground: Vec<bool>,
    /// Origins of lattice cells holding a planted motif.
    pub motif_cells: BTreeSet<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub images: Vec<SyntheticImage>,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random<R: Rng>(rng: &mut R, cy: f64, cx: f64, r: f64, aspect: f64) -> Self {
        let ang = rng.gen_range(0.0..std::f64::consts::PI);
        let a = rng.gen_range(1.0..aspect);
        Self {
            cy,
            cx,
            ry: r * a.sqrt(),
            rx: r / a.sqrt(),
            cos: ang.cos(),
            sin: ang.sin(),
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dy * self.cos + dx * self.sin;
        let v = -dy * self.sin + dx * self.cos;
        (u / self.ry).powi(2) + (v / self.rx).powi(2) <= 1.0
    }

    fn paint<F: FnMut(usize, usize)>(&self, h: usize, w: usize, mut f: F) {
        let r = self.ry.max(self.rx).ceil() as isize + 1;
        let (cy, cx) = (self.cy.round() as isize, self.cx.round() as isize);
        for y in (cy - r).max(0)..(cy + r + 1).min(h as isize) {
            for x in (cx - r).max(0)..(cx + r + 1).min(w as isize) {
                if self.contains(y as f64, x as f64) {
                    f(y as usize, x as usize);
                }
            }
        }
    }
}

fn jitter_rgb<R: Rng>(rng: &mut R, base: [f64; 3], amount: f64) -> [f64; 3] {
    let mut c = base;
    if amount > 0.0 {
        for v in c.iter_mut() {
            *v = (*v + rng.gen_range(-amount..amount)).clamp(0.0, 1.0);
        }
    }
    c
}

const TISSUE_RGB: [f64; 3] = [0.90, 0.58, 0.74];
const NUCLEUS_RGB: [f64; 3] = [0.42, 0.26, 0.55];
const MOTIF_RGB: [f64; 3] = [0.24, 0.10, 0.40];
const BACKGROUND_LEVEL: f64 = 0.94;

/// Generate one image: background, tissue ellipses with texture, scattered nuclei,
/// and (for positives) dense dark nucleus clusters centred on chosen lattice cells.
fn synth_image(spec: &SyntheticSpec, index: usize, positive: bool) -> SyntheticImage {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + index as u64);
    let s = spec.image_size;
    let p = spec.patch_size as f64;
    let sf = s as f64;

    let lobes: Vec<Ellipse> = (0..3)
        .map(|_| {
            let cy = rng.gen_range(0.25 * sf..0.75 * sf);
            let cx = rng.gen_range(0.25 * sf..0.75 * sf);
            let r = rng.gen_range(0.28 * sf..0.45 * sf);
            Ellipse::random(&mut rng, cy, cx, r, 1.8)
        })
        .collect();
    let mut truth = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            truth[y * s + x] = lobes.iter().any(|e| e.contains(y as f64, x as f64));
        }
    }

    let tissue = jitter_rgb(&mut rng, TISSUE_RGB, spec.stain_jitter);
    let nucleus = jitter_rgb(&mut rng, NUCLEUS_RGB, spec.stain_jitter);
    let motif = jitter_rgb(&mut rng, MOTIF_RGB, spec.stain_jitter * 0.5);
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).expect("valid sigma");

    let mut px = Nhwc::zeros(1, s, s, 3);
    for y in 0..s {
        for x in 0..s {
            let dst = px.pixel_mut(0, y, x);
            if truth[y * s + x] {
                let (fy, fx) = (y as f64 / sf, x as f64 / sf);
                let tex: f64 = waves
                    .iter()
                    .map(|(a, b, pa, pb)| {
                        0.04 * (std::f64::consts::TAU * a * fy + pa).sin()
                            * (std::f64::consts::TAU * b * fx + pb).cos()
                    })
                    .sum();
                for ch in 0..3 {
                    dst[ch] = tissue[ch] * (1.0 + tex) + noise.sample(&mut rng);
                }
            } else {
                let g = BACKGROUND_LEVEL + 0.5 * noise.sample(&mut rng);
                for v in dst.iter_mut() {
                    *v = g + 0.2 * noise.sample(&mut rng);
                }
            }
        }
    }

    // Scattered nuclei shared by both classes.
    let tissue_px: Vec<usize> = (0..s * s).filter(|&i| truth[i]).collect();
    if !tissue_px.is_empty() && spec.background_nuclei > 0.0 {
        let lambda = tissue_px.len() as f64 * spec.background_nuclei / 1000.0;
        let count = Poisson::new(lambda).map(|d| d.sample(&mut rng) as usize).unwrap_or(0);
        for _ in 0..count {
            let at = tissue_px[rng.gen_range(0..tissue_px.len())];
            let r = rng.gen_range(0.025 * p..0.05 * p).max(0.8);
            let e = Ellipse::random(&mut rng, (at / s) as f64, (at % s) as f64, r, 1.6);
            let shade = rng.gen_range(0.9..1.1);
            e.paint(s, s, |yy, xx| {
                let dst = px.pixel_mut(0, yy, xx);
                for ch in 0..3 {
                    dst[ch] = nucleus[ch] * shade + 0.5 * noise.sample(&mut rng);
                }
            });
        }
    }
    for v in px.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    let mut motif_cells = BTreeSet::new();
    if positive {
        let draft = RawImage {
            id: String::new(),
            pixels: px.clone(),
            label: None,
        };
        let seg = segment_tissue(&draft, &SegmentConfig::default());
        let psz = spec.patch_size;
        let q = psz / 4;
        let candidates: Vec<(usize, usize)> = lattice_origins(s, s, psz, psz)
            .into_iter()
            .filter(|&(r, c)| {
                seg.contains(r + psz / 2, c + psz / 2)
                    && [(q, q), (q, 3 * q), (3 * q, q), (3 * q, 3 * q), (2 * q, 2 * q)]
                        .iter()
                        .all(|&(dy, dx)| truth[(r + dy) * s + c + dx])
            })
            .collect();
        let fallback: Vec<(usize, usize)> = lattice_origins(s, s, psz, psz)
            .into_iter()
            .filter(|&(r, c)| seg.contains(r + psz / 2, c + psz / 2))
            .collect();
        let pool = if candidates.is_empty() { fallback } else { candidates };
        let extra = Poisson::new(spec.motif_density - 1.0)
            .map(|d| d.sample(&mut rng) as usize)
            .unwrap_or(0);
        let k = (1 + extra).min(pool.len());
        let chosen: Vec<(usize, usize)> = pool.choose_multiple(&mut rng, k).cloned().collect();
        let rm = 0.26 * p;
        for &(r, c) in &chosen {
            let (cy, cx) = (r as f64 + p / 2.0, c as f64 + p / 2.0);
            let rn_lo = (0.065 * p).max(1.2);
            let n_nuclei = ((rm / rn_lo).powi(2) * 1.1).round().max(6.0) as usize;
            for _ in 0..n_nuclei {
                let rad = rm * rng.gen::<f64>().sqrt();
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                let rn = rng.gen_range(rn_lo..rn_lo * 1.3);
                let e = Ellipse::random(&mut rng, cy + rad * ang.sin(), cx + rad * ang.cos(), rn, 1.3);
                e.paint(s, s, |yy, xx| {
                    let dst = px.pixel_mut(0, yy, xx);
                    for ch in 0..3 {
                        dst[ch] = (motif[ch] + 0.5 * noise.sample(&mut rng)).clamp(0.0, 1.0);
                    }
                });
            }
            motif_cells.insert((r, c));
        }
    }

    SyntheticImage {
        image: RawImage {
            id: format!("img{index:04}"),
            pixels: px,
            label: Some(positive),
        },
        truth_foreground: truth,
        motif_cells,
    }
}

/// Deterministic synthetic corpus; exactly `round(n · class_balance)` positives.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let n_pos = spec.n_positive();
    let mut labels: Vec<bool> = (0..spec.n_images).map(|i| i < n_pos).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    labels.shuffle(&mut rng);
    let images: Vec<SyntheticImage> = labels
        .iter()
        .enumerate()
        .map(|(i, &pos)| synth_image(spec, i, pos))
        .collect();
    for im in &images {
        if im.image.label == Some(true) && im.motif_cells.is_empty() {
            return Err(config(format!(
                "image {} has no room for a motif; increase image size",
                im.image.id
            )));
        }
    }
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        images,
    })
}

impl SyntheticCorpus {
    /// Segment every image and cut non-overlapping MIL bags with instance truth.
    pub fn bags(&self, seg: &SegmentConfig) -> Result<Vec<Bag>> {
        let size = self.spec.patch_size;
        self.images
            .iter()
            .map(|im| {
                let mask = segment_tissue(&im.image, seg);
                let patches = extract_patches(&im.image, &mask, size, 0.0)?;
                let truth = patches
                    .iter()
                    .map(|p| im.motif_cells.contains(&p.origin))
                    .collect();
                Bag::new(
                    im.image.id.clone(),
                    im.image.label.unwrap_or(false),
                    patches,
                    Some(truth),
                )
            })
            .collect()
    }

    pub fn raw_images(&self) -> Vec<RawImage> {
        self.images.iter().map(|i| i.image.clone()).collect()
    }
}

/// One line of a label manifest: `id,path,label`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRecord {
    pub id: String,
    pub path: PathBuf,
    pub label: bool,
}

pub fn read_label_manifest(path: &Path) -> Result<Vec<LabelRecord>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("id,")) {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(argument(format!("manifest line {}: expected id,path,label", i + 1)));
        }
        let label = match parts[2] {
            "1" | "true" | "positive" => true,
            "0" | "false" | "negative" => false,
            other => return Err(argument(format!("manifest line {}: bad label '{other}'", i + 1))),
        };
        let p = PathBuf::from(parts[1]);
        out.push(LabelRecord {
            id: parts[0].to_string(),
            path: if p.is_absolute() { p } else { base.join(p) },
            label,
        });
    }
    Ok(out)
}

pub fn write_label_manifest(path: &Path, records: &[LabelRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "id,path,label")?;
    for r in records {
        writeln!(f, "{},{},{}", r.id, r.path.display(), r.label as u8)?;
    }
    Ok(())
}

/// One line of a bag manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagRecord {
    pub bag_id: String,
    pub label: bool,
    pub patch_size: usize,
    pub patches: Vec<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub instance_truth: Option<Vec<bool>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub source: Option<String>,
}

impl BagRecord {
    pub fn from_bag(bag: &Bag, source: Option<String>) -> Self {
        Self {
            bag_id: bag.id.clone(),
            label: bag.label,
            patch_size: bag.instances[0].size(),
            patches: bag.instances.iter().map(|p| [p.origin.0, p.origin.1]).collect(),
            instance_truth: bag.instance_truth.clone(),
            source,
        }
    }

    /// Re-cut the listed patches from their source image.
    pub fn materialize(&self, image: &RawImage) -> Result<Bag> {
        let patches = self
            .patches
            .iter()
            .map(|o| Patch::cut(image, (o[0], o[1]), self.patch_size))
            .collect::<Result<Vec<_>>>()?;
        Bag::new(self.bag_id.clone(), self.label, patches, self.instance_truth.clone())
    }
}

pub fn write_bag_manifest(path: &Path, records: &[BagRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_bag_manifest(path: &Path) -> Result<Vec<BagRecord>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(Error::from)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_count(h: usize, w: usize, size: usize, stride: usize) -> usize {
        let mut n = 0;
        let mut y = 0;
        while y + size <= h {
            let mut x = 0;
            while x + size <= w {
                n += 1;
                x += stride;
            }
            y += stride;
        }
        n
    }

    #[test]
    fn white_image_has_empty_mask() {
        let img = RawImage::uniform("w", 40, 30, [1.0, 1.0, 1.0]);
        let m = segment_tissue(&img, &SegmentConfig::default());
        assert!(m.is_empty());
        assert!(m.contours.is_empty());
        assert!(extract_patches(&img, &m, 8, 0.0).unwrap().is_empty());
    }

    #[test]
    fn pink_image_is_all_foreground_with_one_contour() {
        let img = RawImage::uniform("p", 20, 24, [0.9, 0.55, 0.75]);
        let m = segment_tissue(&img, &SegmentConfig::default());
        assert_eq!(m.area(), 20 * 24);
        assert_eq!(m.contours.len(), 1);
        for y in 0..20 {
            for x in 0..24 {
                assert!(m.in_any_contour(y, x));
            }
        }
    }

    #[test]
    fn contour_of_square_blob_bounds_it() {
        let mut mask = vec![false; 10 * 10];
        for y in 3..7 {
            for x in 2..8 {
                mask[y * 10 + x] = true;
            }
        }
        let cs = trace_contours(&mask, 10, 10);
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].len(), 2 * (4 + 6) - 4);
        assert!(point_in_polygon(&cs[0], 4.0, 4.0));
        assert!(!point_in_polygon(&cs[0], 1.0, 1.0));
    }

    #[test]
    fn single_pixel_and_line_contours_terminate() {
        let mut mask = vec![false; 25];
        mask[12] = true;
        assert_eq!(trace_contours(&mask, 5, 5), vec![vec![(2, 2)]]);
        let mut line = vec![false; 25];
        for x in 0..5 {
            line[10 + x] = true;
        }
        let c = trace_contours(&line, 5, 5);
        assert_eq!(c.len(), 1);
        for x in 0..5 {
            assert!(point_in_polygon(&c[0], 2.0, x as f64));
        }
    }

    #[test]
    fn paper_tiling_counts() {
        let mask = ForegroundMask {
            height: 1536,
            width: 2048,
            mask: vec![true; 1536 * 2048],
            contours: vec![vec![(0, 0), (0, 2047), (1535, 2047), (1535, 0)]],
        };
        assert_eq!(eligible_origins(&mask, 256, 0.0).unwrap().len(), 48);
        assert_eq!(eligible_origins(&mask, 256, 0.5).unwrap().len(), 165);
        assert_eq!(brute_count(1536, 2048, 256, 128), 165);
    }

    #[test]
    fn single_tile_image_gives_one_patch() {
        for ov in [0.0, 0.5, 0.75] {
            let img = RawImage::uniform("t", 16, 16, [0.9, 0.5, 0.7]);
            let m = ForegroundMask::full(16, 16);
            let ps = extract_patches(&img, &m, 16, ov).unwrap();
            assert_eq!(ps.len(), 1);
            assert_eq!(ps[0].origin, (0, 0));
        }
    }

    #[test]
    fn lattice_matches_brute_force_on_random_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let h = rng.gen_range(1..60);
            let w = rng.gen_range(1..60);
            let size = rng.gen_range(1..20);
            let stride = rng.gen_range(1..=size);
            assert_eq!(
                lattice_origins(h, w, size, stride).len(),
                brute_count(h, w, size, stride)
            );
        }
    }

    #[test]
    fn cpc_grid_shapes() {
        let img = RawImage::uniform("g", 256, 256, [0.5, 0.5, 0.5]);
        let p = Patch::cut(&img, (0, 0), 256).unwrap();
        let g = make_cpc_grid(&p, 64, 0.5).unwrap();
        assert_eq!((g.rows, g.cols), (7, 7));
        let g1 = make_cpc_grid(&p, 256, 0.5).unwrap();
        assert_eq!((g1.rows, g1.cols), (1, 1));
        assert_eq!(g1.get(0, 0), p.pixels);
        let img128 = RawImage::uniform("h", 128, 128, [0.5, 0.5, 0.5]);
        let p128 = Patch::cut(&img128, (0, 0), 128).unwrap();
        let g3 = make_cpc_grid(&p128, 64, 0.5).unwrap();
        assert_eq!((g3.rows, g3.cols), (3, 3));
        let p100 = Patch::cut(&img128, (0, 0), 100).unwrap();
        assert!(matches!(make_cpc_grid(&p100, 64, 0.5), Err(Error::Config(_))));
    }

    fn random_patch(seed: u64, size: usize) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..size * size * 3).map(|_| rng.gen::<f64>()).collect();
        Patch {
            pixels: Nhwc::from_vec(1, size, size, 3, data),
            origin: (0, 0),
            source_id: "r".into(),
        }
    }

    #[test]
    fn augmentation_identity_and_involutions() {
        let p = random_patch(1, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(augment(&p, &AugmentConfig::none(), &mut rng), p);
        assert_eq!(flip_horizontal(&flip_horizontal(&p.pixels)), p.pixels);
        assert_eq!(flip_vertical(&flip_vertical(&p.pixels)), p.pixels);
        let d = drop_channel(&p.pixels, 0);
        for (a, b) in d.data.chunks(3).zip(p.pixels.data.chunks(3)) {
            assert_eq!(a[0], 0.0);
            assert_eq!(&a[1..], &b[1..]);
        }
    }

    #[test]
    fn augmentation_is_seeded() {
        let p = random_patch(2, 8);
        let cfg = AugmentConfig {
            flip_horizontal: true,
            flip_vertical: true,
            channel_drop_prob: 0.5,
            spatial_jitter: 20,
            color_jitter: 0.1,
        };
        let a = augment(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let b = augment(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!(a.pixels.h, 8);
    }

    fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_images: 8,
            image_size: 128,
            patch_size: 32,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_balanced() {
        let a = generate_synthetic_corpus(&small_spec(4)).unwrap();
        let b = generate_synthetic_corpus(&small_spec(4)).unwrap();
        assert_eq!(a, b);
        let pos = a.images.iter().filter(|i| i.image.label == Some(true)).count();
        assert_eq!(pos, 4);
        let c = generate_synthetic_corpus(&small_spec(5)).unwrap();
        assert_ne!(a.images[0].image.pixels, c.images[0].image.pixels);
    }

    #[test]
    fn synthetic_bags_obey_mil_rule_and_segmentation_matches_truth() {
        let corpus = generate_synthetic_corpus(&small_spec(11)).unwrap();
        let bags = corpus.bags(&SegmentConfig::default()).unwrap();
        for (bag, im) in bags.iter().zip(&corpus.images) {
            let truth = bag.instance_truth.as_ref().unwrap();
            assert_eq!(bag.label, truth.iter().any(|t| *t));
            if !bag.label {
                assert!(truth.iter().all(|t| !t));
            }
            let mask = segment_tissue(&im.image, &SegmentConfig::default());
            assert!(mask.iou(&im.truth_foreground) >= 0.9, "iou {}", mask.iou(&im.truth_foreground));
            for p in &bag.instances {
                let c = (p.origin.0 + 16, p.origin.1 + 16);
                assert!(mask.in_any_contour(c.0, c.1));
            }
        }
    }

    #[test]
    fn bag_rejects_inconsistent_truth() {
        let p = random_patch(0, 4);
        assert!(Bag::new("b", false, vec![p.clone()], Some(vec![true])).is_err());
        assert!(Bag::new("b", true, vec![p], Some(vec![false])).is_err());
        assert!(Bag::new("b", true, vec![], None).is_err());
    }

    #[test]
    fn bag_manifest_round_trips() {
        let corpus = generate_synthetic_corpus(&small_spec(2)).unwrap();
        let bags = corpus.bags(&SegmentConfig::default()).unwrap();
        let recs: Vec<BagRecord> = bags.iter().map(|b| BagRecord::from_bag(b, None)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bags.jsonl");
        write_bag_manifest(&path, &recs).unwrap();
        assert_eq!(read_bag_manifest(&path).unwrap(), recs);
        let again = recs[0].materialize(&corpus.images[0].image).unwrap();
        assert_eq!(again, bags[0]);
    }
}
