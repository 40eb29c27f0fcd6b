//! Synthetic forgery generation: splice, copy-move, and removal
//! manipulations over user-supplied base imagery, with pixel-accurate
//! ground-truth masks and a reproducible dataset manifest.

use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;

pub const MIN_REGION_PX: usize = 16;
pub const MAX_REGION_PX: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeryKind {
    Splice,
    CopyMove,
    Removal,
}

impl ForgeryKind {
    pub const ALL: [ForgeryKind; 3] = [ForgeryKind::Splice, ForgeryKind::CopyMove, ForgeryKind::Removal];

    pub fn as_str(&self) -> &'static str {
        match self {
            ForgeryKind::Splice => "splice",
            ForgeryKind::CopyMove => "copy_move",
            ForgeryKind::Removal => "removal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionShape {
    Ellipse,
    Polygon,
    DonorSilhouette,
    /// Full bounding box; not drawn randomly, but available for recipes
    /// that need an exactly known mask area.
    Rect,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blend {
    None,
    Feathered { radius: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgeryRecipe {
    pub kind: ForgeryKind,
    pub region_shape: RegionShape,
    pub size_px: usize,
    /// Destination placement; `None` draws it from the seed.
    pub location: Option<(usize, usize)>,
    /// Source placement (donor patch or copy-move source); `None` draws
    /// it from the seed.
    #[serde(default)]
    pub source_location: Option<(usize, usize)>,
    pub blend: Blend,
    pub seed: u64,
}

impl ForgeryRecipe {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_REGION_PX..=MAX_REGION_PX).contains(&self.size_px) {
            return Err(Error::Parameter(format!(
                "size_px must lie in [{MIN_REGION_PX}, {MAX_REGION_PX}], got {}",
                self.size_px
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub mask_path: String,
    pub recipe: ForgeryRecipe,
    pub base_id: String,
    pub split: Split,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub size: (usize, usize),
    pub seed: u64,
    pub split_fractions: (f64, f64, f64),
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn entries_for(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub size: (usize, usize),
    pub seed: u64,
    pub split_fractions: (f64, f64, f64),
    pub region_sizes: Vec<usize>,
    pub feather_radius: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 30,
            size: (1000, 1000),
            seed: 0,
            split_fractions: (0.7, 0.15, 0.15),
            region_sizes: vec![16, 32, 64, 128, 256],
            feather_radius: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("count must be positive".into()));
        }
        if self.size.0 < 2 * MIN_REGION_PX || self.size.1 < 2 * MIN_REGION_PX {
            return Err(Error::Config(format!(
                "output size {}x{} leaves no room for regions",
                self.size.0, self.size.1
            )));
        }
        let (tr, va, te) = self.split_fractions;
        if tr < 0.0 || va < 0.0 || te < 0.0 || (tr + va + te - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be non-negative and sum to 1, got ({tr}, {va}, {te})"
            )));
        }
        if self.usable_sizes().is_empty() {
            return Err(Error::Config(format!(
                "no region size in {:?} fits a {}x{} output",
                self.region_sizes, self.size.0, self.size.1
            )));
        }
        Ok(())
    }

    /// Region sizes that fit the output with enough slack that random
    /// disjoint copy-move placement succeeds reliably (size at most 40%
    /// of the short image side).
    fn usable_sizes(&self) -> Vec<usize> {
        self.region_sizes
            .iter()
            .copied()
            .filter(|&s| {
                (MIN_REGION_PX..=MAX_REGION_PX).contains(&s)
                    && 5 * s <= 2 * self.size.0.min(self.size.1)
            })
            .collect()
    }
}

/// Binary region raster inside a size x size bounding box.
fn rasterize(
    shape: RegionShape,
    size: usize,
    source_patch: Option<&RgbImage>,
    rng: &mut ChaCha8Rng,
) -> Vec<bool> {
    match shape {
        RegionShape::Rect => vec![true; size * size],
        RegionShape::Ellipse => {
            let rx = rng.random_range(0.6..1.0) * size as f64 / 2.0;
            let ry = rng.random_range(0.6..1.0) * size as f64 / 2.0;
            let c = size as f64 / 2.0;
            let mut mask = vec![false; size * size];
            for y in 0..size {
                for x in 0..size {
                    let dx = (x as f64 + 0.5 - c) / rx;
                    let dy = (y as f64 + 0.5 - c) / ry;
                    mask[y * size + x] = dx * dx + dy * dy <= 1.0;
                }
            }
            mask
        }
        RegionShape::Polygon => {
            for _ in 0..10 {
                let lo = 0.1 * size as f64;
                let hi = 0.9 * size as f64;
                let pts: Vec<(f64, f64)> = (0..8)
                    .map(|_| (rng.random_range(lo..hi), rng.random_range(lo..hi)))
                    .collect();
                let hull = convex_hull(&pts);
                if hull.len() < 3 {
                    continue;
                }
                let mask = rasterize_convex(&hull, size);
                if mask.iter().any(|&m| m) {
                    return mask;
                }
            }
            vec![true; size * size]
        }
        RegionShape::DonorSilhouette => {
            let patch = source_patch.expect("silhouette needs a source patch");
            let mut luma: Vec<f64> = patch
                .pixels()
                .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
                .collect();
            let mut sorted = luma.clone();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let median = sorted[sorted.len() / 2];
            let mask: Vec<bool> = luma.drain(..).map(|v| v >= median).collect();
            mask
        }
    }
}

/// Andrew's monotone chain; returns hull vertices in counterclockwise order.
fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().chain(pts.iter().rev().skip(1)) {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn rasterize_convex(hull: &[(f64, f64)], size: usize) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = (0..hull.len()).all(|i| {
                let a = hull[i];
                let b = hull[(i + 1) % hull.len()];
                (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0
            });
            mask[y * size + x] = inside;
        }
    }
    mask
}

/// Blend weights over the whole image: the hard region placed at
/// `(x, y)`, optionally feathered by a box filter of the given radius.
/// Weights are exact rationals k/(2r+1)^2 computed in integers.
fn alpha_map(
    region: &[bool],
    size: usize,
    x: usize,
    y: usize,
    width: usize,
    height: usize,
    blend: Blend,
) -> Vec<f64> {
    let mut hard = vec![0u64; width * height];
    for ry in 0..size {
        for rx in 0..size {
            if region[ry * size + rx] {
                hard[(y + ry) * width + (x + rx)] = 1;
            }
        }
    }
    match blend {
        Blend::None => hard.iter().map(|&v| v as f64).collect(),
        Blend::Feathered { radius } => {
            let r = radius as i64;
            let norm = ((2 * r + 1) * (2 * r + 1)) as f64;
            // integral image with a zero top row and left column
            let mut integral = vec![0u64; (width + 1) * (height + 1)];
            for yy in 0..height {
                let mut row = 0u64;
                for xx in 0..width {
                    row += hard[yy * width + xx];
                    integral[(yy + 1) * (width + 1) + (xx + 1)] =
                        integral[yy * (width + 1) + (xx + 1)] + row;
                }
            }
            let sum_at = |x0: i64, y0: i64, x1: i64, y1: i64| {
                let cx0 = x0.clamp(0, width as i64) as usize;
                let cy0 = y0.clamp(0, height as i64) as usize;
                let cx1 = x1.clamp(0, width as i64) as usize;
                let cy1 = y1.clamp(0, height as i64) as usize;
                integral[cy1 * (width + 1) + cx1] + integral[cy0 * (width + 1) + cx0]
                    - integral[cy0 * (width + 1) + cx1]
                    - integral[cy1 * (width + 1) + cx0]
            };
            let mut alpha = vec![0.0; width * height];
            for yy in 0..height as i64 {
                for xx in 0..width as i64 {
                    let count = sum_at(xx - r, yy - r, xx + r + 1, yy + r + 1);
                    alpha[yy as usize * width + xx as usize] = count as f64 / norm;
                }
            }
            alpha
        }
    }
}

fn compose(base: &RgbImage, forged: &RgbImage, alpha: &[f64]) -> (RgbImage, GrayImage) {
    let (w, h) = base.dimensions();
    let mut out = base.clone();
    let mut mask = GrayImage::new(w, h);
    for yy in 0..h {
        for xx in 0..w {
            let a = alpha[(yy * w + xx) as usize];
            if a > 0.0 {
                let b = base.get_pixel(xx, yy);
                let f = forged.get_pixel(xx, yy);
                let mut px = [0u8; 3];
                for c in 0..3 {
                    px[c] = ((1.0 - a) * b[c] as f64 + a * f[c] as f64).round() as u8;
                }
                out.put_pixel(xx, yy, Rgb(px));
                mask.put_pixel(xx, yy, image::Luma([255]));
            }
        }
    }
    (out, mask)
}

fn check_placement(
    name: &str,
    loc: Option<(usize, usize)>,
    size: usize,
    width: usize,
    height: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize)> {
    if size > width || size > height {
        return Err(Error::Placement(format!(
            "{name} region of {size}px cannot fit a {width}x{height} image"
        )));
    }
    match loc {
        Some((x, y)) => {
            if x + size > width || y + size > height {
                return Err(Error::Placement(format!(
                    "{name} region at ({x}, {y}) with size {size} exceeds {width}x{height}"
                )));
            }
            Ok((x, y))
        }
        None => Ok((
            rng.random_range(0..=width - size),
            rng.random_range(0..=height - size),
        )),
    }
}

fn crop_patch(img: &RgbImage, x: usize, y: usize, size: usize) -> RgbImage {
    let mut patch = RgbImage::new(size as u32, size as u32);
    for yy in 0..size {
        for xx in 0..size {
            patch.put_pixel(
                xx as u32,
                yy as u32,
                *img.get_pixel((x + xx) as u32, (y + yy) as u32),
            );
        }
    }
    patch
}

/// Paste a donor-image region into the base.
pub fn splice(base: &RgbImage, donor: &RgbImage, recipe: &ForgeryRecipe) -> Result<(RgbImage, GrayImage)> {
    if recipe.kind != ForgeryKind::Splice {
        return Err(Error::Parameter(format!(
            "splice called with a {} recipe",
            recipe.kind.as_str()
        )));
    }
    recipe.validate()?;
    let (w, h) = (base.width() as usize, base.height() as usize);
    let (dw, dh) = (donor.width() as usize, donor.height() as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let (x, y) = check_placement("destination", recipe.location, recipe.size_px, w, h, &mut rng)?;
    let (sx, sy) = check_placement("donor source", recipe.source_location, recipe.size_px, dw, dh, &mut rng)?;
    let patch = crop_patch(donor, sx, sy, recipe.size_px);
    let region = rasterize(recipe.region_shape, recipe.size_px, Some(&patch), &mut rng);

    let mut forged = base.clone();
    for ry in 0..recipe.size_px {
        for rx in 0..recipe.size_px {
            if region[ry * recipe.size_px + rx] {
                forged.put_pixel((x + rx) as u32, (y + ry) as u32, *patch.get_pixel(rx as u32, ry as u32));
            }
        }
    }
    let alpha = alpha_map(&region, recipe.size_px, x, y, w, h, recipe.blend);
    Ok(compose(base, &forged, &alpha))
}

/// Copy a region of the base onto a disjoint destination in the same image.
pub fn copy_move(base: &RgbImage, recipe: &ForgeryRecipe) -> Result<(RgbImage, GrayImage)> {
    if recipe.kind != ForgeryKind::CopyMove {
        return Err(Error::Parameter(format!(
            "copy_move called with a {} recipe",
            recipe.kind.as_str()
        )));
    }
    recipe.validate()?;
    let (w, h) = (base.width() as usize, base.height() as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let s = recipe.size_px;
    let disjoint = |(x, y): (usize, usize), (sx, sy): (usize, usize)| {
        sx + s <= x || x + s <= sx || sy + s <= y || y + s <= sy
    };
    // Retry whichever placements are unfixed until source and
    // destination are disjoint; fully explicit placements must already
    // be disjoint.
    let mut placed = None;
    for attempt in 0..100 {
        let dst = check_placement("destination", recipe.location, s, w, h, &mut rng)?;
        let src = check_placement("source", recipe.source_location, s, w, h, &mut rng)?;
        if disjoint(dst, src) {
            placed = Some((dst, src));
            break;
        }
        if recipe.location.is_some() && recipe.source_location.is_some() {
            return Err(Error::Placement(
                "copy-move source overlaps the destination".into(),
            ));
        }
        let _ = attempt;
    }
    let ((x, y), (sx, sy)) = placed.ok_or_else(|| {
        Error::Placement(format!(
            "no disjoint copy-move placement for size {s} in {w}x{h} after 100 tries"
        ))
    })?;
    let patch = crop_patch(base, sx, sy, s);
    let region = rasterize(recipe.region_shape, s, Some(&patch), &mut rng);
    let mut forged = base.clone();
    for ry in 0..s {
        for rx in 0..s {
            if region[ry * s + rx] {
                forged.put_pixel((x + rx) as u32, (y + ry) as u32, *patch.get_pixel(rx as u32, ry as u32));
            }
        }
    }
    let alpha = alpha_map(&region, s, x, y, w, h, recipe.blend);
    Ok(compose(base, &forged, &alpha))
}

/// Erase a region by diffusing its boundary colors inward.
pub fn removal(base: &RgbImage, recipe: &ForgeryRecipe) -> Result<(RgbImage, GrayImage)> {
    if recipe.kind != ForgeryKind::Removal {
        return Err(Error::Parameter(format!(
            "removal called with a {} recipe",
            recipe.kind.as_str()
        )));
    }
    recipe.validate()?;
    let (w, h) = (base.width() as usize, base.height() as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let s = recipe.size_px;
    let (x, y) = check_placement("region", recipe.location, s, w, h, &mut rng)?;
    let patch = crop_patch(base, x, y, s);
    let region = rasterize(recipe.region_shape, s, Some(&patch), &mut rng);
    let filled = diffusion_fill(base, &region, s, x, y)?;
    let alpha = alpha_map(&region, s, x, y, w, h, recipe.blend);
    Ok(compose(base, &filled, &alpha))
}

const FILL_ITERATIONS: usize = 200;

/// Jacobi relaxation of the region towards the average of its fixed
/// surroundings. Every iterate is a convex combination of boundary
/// values, so the filled interior can never leave the boundary's
/// [min, max] range per channel.
fn diffusion_fill(base: &RgbImage, region: &[bool], s: usize, x: usize, y: usize) -> Result<RgbImage> {
    let (w, h) = (base.width() as usize, base.height() as usize);
    let inside = |xx: i64, yy: i64| {
        xx >= x as i64
            && yy >= y as i64
            && xx < (x + s) as i64
            && yy < (y + s) as i64
            && region[(yy as usize - y) * s + (xx as usize - x)]
    };
    // boundary ring: fixed pixels 4-adjacent to the region
    let mut boundary_sum = [0.0f64; 3];
    let mut boundary_n = 0usize;
    for ry in 0..s {
        for rx in 0..s {
            if !region[ry * s + rx] {
                continue;
            }
            let (px, py) = ((x + rx) as i64, (y + ry) as i64);
            for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nx, ny) = (px + dx, py + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 || inside(nx, ny) {
                    continue;
                }
                let p = base.get_pixel(nx as u32, ny as u32);
                for c in 0..3 {
                    boundary_sum[c] += p[c] as f64;
                }
                boundary_n += 1;
            }
        }
    }
    if boundary_n == 0 {
        return Err(Error::Placement("removal region has no fixed boundary".into()));
    }
    let init = [
        boundary_sum[0] / boundary_n as f64,
        boundary_sum[1] / boundary_n as f64,
        boundary_sum[2] / boundary_n as f64,
    ];
    // field over the bounding box, three channels
    let mut cur = vec![[0.0f64; 3]; s * s];
    for ry in 0..s {
        for rx in 0..s {
            cur[ry * s + rx] = if region[ry * s + rx] {
                init
            } else {
                let p = base.get_pixel((x + rx) as u32, (y + ry) as u32);
                [p[0] as f64, p[1] as f64, p[2] as f64]
            };
        }
    }
    let mut next = cur.clone();
    for _ in 0..FILL_ITERATIONS {
        for ry in 0..s {
            for rx in 0..s {
                if !region[ry * s + rx] {
                    continue;
                }
                let (px, py) = ((x + rx) as i64, (y + ry) as i64);
                let mut acc = [0.0f64; 3];
                let mut n = 0usize;
                for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (nx, ny) = (px + dx, py + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let v = if nx >= x as i64
                        && ny >= y as i64
                        && nx < (x + s) as i64
                        && ny < (y + s) as i64
                    {
                        cur[(ny as usize - y) * s + (nx as usize - x)]
                    } else {
                        let p = base.get_pixel(nx as u32, ny as u32);
                        [p[0] as f64, p[1] as f64, p[2] as f64]
                    };
                    for c in 0..3 {
                        acc[c] += v[c];
                    }
                    n += 1;
                }
                if n > 0 {
                    next[ry * s + rx] = [acc[0] / n as f64, acc[1] / n as f64, acc[2] / n as f64];
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    let mut out = base.clone();
    for ry in 0..s {
        for rx in 0..s {
            if region[ry * s + rx] {
                let v = cur[ry * s + rx];
                out.put_pixel(
                    (x + rx) as u32,
                    (y + ry) as u32,
                    Rgb([v[0].round() as u8, v[1].round() as u8, v[2].round() as u8]),
                );
            }
        }
    }
    Ok(out)
}

/// Deterministic pseudo-terrain for demos and tests: smooth value noise
/// with a green-brown palette and fine per-pixel grain.
pub fn synthetic_base(width: usize, height: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = 32usize;
    let gw = width.div_ceil(cell) + 1;
    let gh = height.div_ceil(cell) + 1;
    let field_a: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(0.0..1.0)).collect();
    let field_b: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(0.0..1.0)).collect();
    let sample = |field: &[f64], x: usize, y: usize| {
        let fx = x as f64 / cell as f64;
        let fy = y as f64 / cell as f64;
        let (x0, y0) = (fx as usize, fy as usize);
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let at = |gx: usize, gy: usize| field[gy.min(gh - 1) * gw + gx.min(gw - 1)];
        let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
        let bot = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bot * ty
    };
    let mut img = RgbImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let a = sample(&field_a, x, y);
            let b = sample(&field_b, x, y);
            let grain: f64 = rng.random_range(-6.0..6.0);
            let r = 70.0 + 90.0 * a + 25.0 * b + grain;
            let g = 85.0 + 70.0 * a + 55.0 * b + grain;
            let bl = 55.0 + 40.0 * a + 30.0 * b + grain;
            img.put_pixel(
                x as u32,
                y as u32,
                Rgb([
                    r.clamp(0.0, 255.0) as u8,
                    g.clamp(0.0, 255.0) as u8,
                    bl.clamp(0.0, 255.0) as u8,
                ]),
            );
        }
    }
    img
}

/// Load, sort, and center-crop the base images for generation.
fn load_bases(dir: &Path, size: (usize, usize)) -> Result<Vec<(String, RgbImage)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no base images found in {}", dir.display())));
    }
    let mut bases = Vec::new();
    for p in paths {
        let img = image::open(&p)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w < size.1 || h < size.0 {
            return Err(Error::Data(format!(
                "base image {} is {w}x{h}, smaller than the configured {}x{}",
                p.display(),
                size.1,
                size.0
            )));
        }
        let cropped = crop_center(&img, size.1, size.0);
        let id = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("base")
            .to_string();
        bases.push((id, cropped));
    }
    Ok(bases)
}

fn crop_center(img: &RgbImage, w: usize, h: usize) -> RgbImage {
    let x0 = (img.width() as usize - w) / 2;
    let y0 = (img.height() as usize - h) / 2;
    crop_patch_rect(img, x0, y0, w, h)
}

fn crop_patch_rect(img: &RgbImage, x: usize, y: usize, w: usize, h: usize) -> RgbImage {
    let mut out = RgbImage::new(w as u32, h as u32);
    for yy in 0..h {
        for xx in 0..w {
            out.put_pixel(xx as u32, yy as u32, *img.get_pixel((x + xx) as u32, (y + yy) as u32));
        }
    }
    out
}

/// Assign each base id to a split by the configured fractions.
fn assign_splits(ids: &[String], fractions: (f64, f64, f64), rng: &mut ChaCha8Rng) -> Vec<(String, Split)> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    // Fisher-Yates on the id list
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n = ids.len();
    let n_val = (fractions.1 * n as f64).floor() as usize;
    let n_test = (fractions.2 * n as f64).floor() as usize;
    let mut out = Vec::with_capacity(n);
    for (rank, &idx) in order.iter().enumerate() {
        let split = if rank < n_val {
            Split::Val
        } else if rank < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
        out.push((ids[idx].clone(), split));
    }
    out
}

/// Generate a balanced forgery dataset under `out_dir` and return its
/// manifest (also written to `out_dir/manifest.json`).
pub fn generate_dataset(bases_dir: &Path, out_dir: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let bases = load_bases(bases_dir, cfg.size)?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;

    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<String> = bases.iter().map(|(id, _)| id.clone()).collect();
    let split_of: Vec<(String, Split)> = assign_splits(&ids, cfg.split_fractions, &mut split_rng);
    let sizes = cfg.usable_sizes();
    let shapes = [RegionShape::Ellipse, RegionShape::Polygon, RegionShape::DonorSilhouette];

    let results: Vec<Result<ManifestEntry>> = parallel::map_indices(cfg.count, |i| {
        // per-entry stream so parallel and serial runs agree
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        let kind = ForgeryKind::ALL[i % ForgeryKind::ALL.len()];
        let base_idx = rng.random_range(0..bases.len());
        let donor_idx = rng.random_range(0..bases.len());
        let recipe = ForgeryRecipe {
            kind,
            region_shape: shapes[rng.random_range(0..shapes.len())],
            size_px: sizes[rng.random_range(0..sizes.len())],
            location: None,
            source_location: None,
            blend: if rng.random_range(0..2) == 0 {
                Blend::None
            } else {
                Blend::Feathered { radius: cfg.feather_radius }
            },
            seed: rng.random(),
        };
        let (base_id, base) = &bases[base_idx];
        let (image, mask) = match kind {
            ForgeryKind::Splice => splice(base, &bases[donor_idx].1, &recipe)?,
            ForgeryKind::CopyMove => copy_move(base, &recipe)?,
            ForgeryKind::Removal => removal(base, &recipe)?,
        };
        let id = format!("{:05}_{}", i, kind.as_str());
        let image_path = format!("images/{id}.png");
        let mask_path = format!("masks/{id}.png");
        image.save(out_dir.join(&image_path))?;
        mask.save(out_dir.join(&mask_path))?;
        let split = split_of
            .iter()
            .find(|(sid, _)| sid == base_id)
            .map(|(_, s)| *s)
            .unwrap_or(Split::Train);
        Ok(ManifestEntry {
            image_path,
            mask_path,
            recipe,
            base_id: base_id.clone(),
            split,
        })
    });
    let entries: Vec<ManifestEntry> = results.into_iter().collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        size: cfg.size,
        seed: cfg.seed,
        split_fractions: cfg.split_fractions,
        entries,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recipe(kind: ForgeryKind, shape: RegionShape, size: usize, seed: u64) -> ForgeryRecipe {
        ForgeryRecipe {
            kind,
            region_shape: shape,
            size_px: size,
            location: None,
            source_location: None,
            blend: Blend::None,
            seed,
        }
    }

    fn diff_pixels(a: &RgbImage, b: &RgbImage) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for y in 0..a.height() {
            for x in 0..a.width() {
                if a.get_pixel(x, y) != b.get_pixel(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    #[test]
    fn splice_changes_only_masked_pixels() {
        let base = synthetic_base(96, 96, 1);
        let donor = synthetic_base(96, 96, 2);
        let r = recipe(ForgeryKind::Splice, RegionShape::Ellipse, 32, 7);
        let (img, mask) = splice(&base, &donor, &r).unwrap();
        let changed = diff_pixels(&base, &img);
        assert!(!changed.is_empty());
        for (x, y) in &changed {
            assert_eq!(mask.get_pixel(*x, *y)[0], 255);
        }
        // every masked pixel carries exactly the donor's value
        let masked: usize = mask.pixels().filter(|p| p[0] == 255).count();
        assert!(masked >= changed.len());
        let (img2, mask2) = splice(&base, &donor, &r).unwrap();
        assert_eq!(img.as_raw(), img2.as_raw());
        assert_eq!(mask.as_raw(), mask2.as_raw());
    }

    #[test]
    fn splice_identity_donor_leaves_image_unchanged() {
        let base = synthetic_base(96, 96, 3);
        let mut r = recipe(ForgeryKind::Splice, RegionShape::Ellipse, 32, 9);
        r.location = Some((20, 24));
        r.source_location = Some((20, 24));
        let (img, mask) = splice(&base, &base, &r).unwrap();
        assert_eq!(img.as_raw(), base.as_raw());
        assert!(mask.pixels().any(|p| p[0] == 255));
    }

    #[test]
    fn copy_move_rect_has_exact_mask_area() {
        let base = synthetic_base(128, 128, 4);
        let r = recipe(ForgeryKind::CopyMove, RegionShape::Rect, 32, 11);
        let (img, mask) = copy_move(&base, &r).unwrap();
        let area: usize = mask.pixels().filter(|p| p[0] == 255).count();
        assert_eq!(area, 32 * 32);
        for (x, y) in diff_pixels(&base, &img) {
            assert_eq!(mask.get_pixel(x, y)[0], 255);
        }
    }

    #[test]
    fn copy_move_destination_matches_source_block() {
        let base = synthetic_base(128, 128, 5);
        let mut r = recipe(ForgeryKind::CopyMove, RegionShape::Rect, 32, 13);
        r.location = Some((80, 80));
        r.source_location = Some((8, 8));
        let (img, _mask) = copy_move(&base, &r).unwrap();
        for yy in 0..32 {
            for xx in 0..32 {
                assert_eq!(img.get_pixel(80 + xx, 80 + yy), base.get_pixel(8 + xx, 8 + yy));
            }
        }
    }

    #[test]
    fn copy_move_rejects_impossible_and_overlapping_placements() {
        let base = synthetic_base(64, 64, 6);
        // a 40px box cannot be disjoint from another inside 64px
        let r = recipe(ForgeryKind::CopyMove, RegionShape::Rect, 40, 1);
        assert!(matches!(copy_move(&base, &r), Err(Error::Placement(_))));
        let mut r = recipe(ForgeryKind::CopyMove, RegionShape::Rect, 16, 1);
        r.location = Some((10, 10));
        r.source_location = Some((20, 12));
        assert!(matches!(copy_move(&base, &r), Err(Error::Placement(_))));
    }

    #[test]
    fn removal_fill_respects_boundary_extrema() {
        let base = synthetic_base(96, 96, 8);
        let mut r = recipe(ForgeryKind::Removal, RegionShape::Ellipse, 24, 17);
        r.location = Some((30, 40));
        let (img, mask) = removal(&base, &r).unwrap();
        // gather the boundary ring of the mask per channel
        let mut lo = [255u8; 3];
        let mut hi = [0u8; 3];
        for y in 0..96u32 {
            for x in 0..96u32 {
                if mask.get_pixel(x, y)[0] != 0 {
                    continue;
                }
                let adjacent = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)]
                    .iter()
                    .any(|&(nx, ny)| {
                        nx < 96 && ny < 96 && mask.get_pixel(nx, ny)[0] != 0
                    });
                if adjacent {
                    let p = base.get_pixel(x, y);
                    for c in 0..3 {
                        lo[c] = lo[c].min(p[c]);
                        hi[c] = hi[c].max(p[c]);
                    }
                }
            }
        }
        for y in 0..96u32 {
            for x in 0..96u32 {
                if mask.get_pixel(x, y)[0] != 0 {
                    let p = img.get_pixel(x, y);
                    for c in 0..3 {
                        assert!(p[c] >= lo[c] && p[c] <= hi[c], "pixel ({x},{y}) channel {c}");
                    }
                } else {
                    assert_eq!(img.get_pixel(x, y), base.get_pixel(x, y));
                }
            }
        }
    }

    #[test]
    fn feathered_mask_covers_all_nonzero_weights() {
        let base = synthetic_base(96, 96, 10);
        let donor = synthetic_base(96, 96, 11);
        let mut r = recipe(ForgeryKind::Splice, RegionShape::Ellipse, 32, 19);
        r.blend = Blend::Feathered { radius: 3 };
        let (img, mask) = splice(&base, &donor, &r).unwrap();
        for (x, y) in diff_pixels(&base, &img) {
            assert_eq!(mask.get_pixel(x, y)[0], 255);
        }
        // the feathered mask is a strict dilation of the hard one
        let mut hard = r.clone();
        hard.blend = Blend::None;
        let (_, hard_mask) = splice(&base, &donor, &hard).unwrap();
        let soft: usize = mask.pixels().filter(|p| p[0] == 255).count();
        let hard_n: usize = hard_mask.pixels().filter(|p| p[0] == 255).count();
        assert!(soft > hard_n);
        for y in 0..96 {
            for x in 0..96 {
                if hard_mask.get_pixel(x, y)[0] == 255 {
                    assert_eq!(mask.get_pixel(x, y)[0], 255);
                }
            }
        }
    }

    #[test]
    fn recipe_size_bounds_are_enforced() {
        let base = synthetic_base(64, 64, 12);
        let r = recipe(ForgeryKind::Removal, RegionShape::Ellipse, 8, 1);
        assert!(matches!(removal(&base, &r), Err(Error::Parameter(_))));
        let r = recipe(ForgeryKind::Splice, RegionShape::Ellipse, 600, 1);
        assert!(matches!(splice(&base, &base, &r), Err(Error::Parameter(_))));
        let r = recipe(ForgeryKind::Splice, RegionShape::Ellipse, 16, 1);
        assert!(matches!(copy_move(&base, &r), Err(Error::Parameter(_))));
    }

    #[test]
    fn out_of_bounds_location_is_a_placement_error() {
        let base = synthetic_base(64, 64, 13);
        let mut r = recipe(ForgeryKind::Removal, RegionShape::Ellipse, 32, 1);
        r.location = Some((40, 10));
        assert!(matches!(removal(&base, &r), Err(Error::Placement(_))));
    }

    #[test]
    fn generator_balances_kinds_and_respects_splits() {
        let dir = tempfile::tempdir().unwrap();
        let bases = dir.path().join("bases");
        std::fs::create_dir_all(&bases).unwrap();
        for i in 0..3 {
            synthetic_base(80, 80, 100 + i).save(bases.join(format!("base{i}.png"))).unwrap();
        }
        let out = dir.path().join("out");
        let cfg = SynthConfig {
            count: 9,
            size: (64, 64),
            seed: 5,
            split_fractions: (0.34, 0.33, 0.33),
            region_sizes: vec![16, 24, 32],
            feather_radius: 2,
        };
        let manifest = generate_dataset(&bases, &out, &cfg).unwrap();
        assert_eq!(manifest.entries.len(), 9);
        for kind in ForgeryKind::ALL {
            let n = manifest.entries.iter().filter(|e| e.recipe.kind == kind).count();
            assert_eq!(n, 3, "{}", kind.as_str());
        }
        // split disjointness by base id
        use std::collections::HashMap;
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for e in &manifest.entries {
            if let Some(prev) = seen.insert(e.base_id.as_str(), e.split) {
                assert_eq!(prev, e.split, "base {} crosses splits", e.base_id);
            }
        }
        // all masks binary and nonempty, dims match
        for e in &manifest.entries {
            let mask = image::open(out.join(&e.mask_path)).unwrap().to_luma8();
            let img = image::open(out.join(&e.image_path)).unwrap().to_rgb8();
            assert_eq!(img.dimensions(), (64, 64));
            assert_eq!(mask.dimensions(), (64, 64));
            assert!(mask.pixels().all(|p| p[0] == 0 || p[0] == 255));
            assert!(mask.pixels().any(|p| p[0] == 255));
        }
        let loaded = DatasetManifest::load(&out.join("manifest.json")).unwrap();
        assert_eq!(loaded.entries.len(), 9);
    }

    #[test]
    fn generation_is_reproducible_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let bases = dir.path().join("bases");
        std::fs::create_dir_all(&bases).unwrap();
        synthetic_base(72, 72, 42).save(bases.join("b.png")).unwrap();
        let cfg = SynthConfig {
            count: 3,
            size: (64, 64),
            seed: 77,
            split_fractions: (1.0, 0.0, 0.0),
            region_sizes: vec![16, 32],
            feather_radius: 2,
        };
        let out1 = dir.path().join("run1");
        let out2 = dir.path().join("run2");
        let m1 = generate_dataset(&bases, &out1, &cfg).unwrap();
        let m2 = generate_dataset(&bases, &out2, &cfg).unwrap();
        for (a, b) in m1.entries.iter().zip(&m2.entries) {
            assert_eq!(a.recipe, b.recipe);
            let f1 = std::fs::read(out1.join(&a.image_path)).unwrap();
            let f2 = std::fs::read(out2.join(&b.image_path)).unwrap();
            assert_eq!(f1, f2);
            let g1 = std::fs::read(out1.join(&a.mask_path)).unwrap();
            let g2 = std::fs::read(out2.join(&b.mask_path)).unwrap();
            assert_eq!(g1, g2);
        }
    }

    #[test]
    fn empty_or_undersized_bases_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bases = dir.path().join("bases");
        std::fs::create_dir_all(&bases).unwrap();
        let cfg = SynthConfig {
            count: 1,
            size: (64, 64),
            ..SynthConfig::default()
        };
        assert!(matches!(
            generate_dataset(&bases, &dir.path().join("o1"), &cfg),
            Err(Error::Data(_))
        ));
        synthetic_base(32, 32, 1).save(bases.join("small.png")).unwrap();
        assert!(matches!(
            generate_dataset(&bases, &dir.path().join("o2"), &cfg),
            Err(Error::Data(_))
        ));
    }
}
