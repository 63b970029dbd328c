//! Point-prompt mask extraction: box → center point → grown region.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BBox, Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

impl Connectivity {
    /// Neighbor offsets in row-major order.
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(0, -1), (-1, 0), (1, 0), (0, 1)],
            Connectivity::Eight => &[(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)],
        }
    }
}

/// What a candidate pixel's color is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Admission {
    /// Running mean of the region accepted so far. Follows textured regions
    /// well, but the mean drifts, so a larger tolerance can occasionally
    /// produce a smaller region.
    #[default]
    RunningMean,
    /// Fixed smoothed color at the seed. The result is the connected
    /// component of `{p : |c(p) - c(seed)| <= tol}` holding the seed, hence
    /// monotone in the tolerance.
    SeedReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowParams {
    /// Max RGB distance from a candidate pixel to the reference color.
    pub color_tolerance: f64,
    #[serde(default)]
    pub admission: Admission,
    pub connectivity: Connectivity,
    pub max_region_fraction: f64,
    /// Box-blur radius applied before growing.
    pub smoothing_radius: usize,
}

impl Default for GrowParams {
    fn default() -> Self {
        Self {
            color_tolerance: 0.12,
            admission: Admission::RunningMean,
            connectivity: Connectivity::Eight,
            max_region_fraction: 0.5,
            smoothing_radius: 1,
        }
    }
}

impl GrowParams {
    pub fn validate(&self) -> Result<()> {
        if self.color_tolerance.is_nan() || self.color_tolerance <= 0.0 {
            return Err(Error::Config("color_tolerance must be positive".into()));
        }
        if !(self.max_region_fraction > 0.0 && self.max_region_fraction <= 1.0) {
            return Err(Error::Config("max_region_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Pixel containing the box center, clamped into the image.
pub fn bbox_center(b: &BBox, width: usize, height: usize) -> PixelPoint {
    let px = |v: f64, n: usize| ((v * n as f64).floor().max(0.0) as usize).min(n.saturating_sub(1));
    PixelPoint {
        x: px(b.cx, width),
        y: px(b.cy, height),
    }
}

/// Breadth-first region growing from `seed`.
///
/// A pixel joins when its (smoothed) color lies within `color_tolerance` of
/// the reference color chosen by `params.admission`. Neighbors are enqueued in
/// row-major offset order, so the result is fully deterministic.
pub fn grow_region(image: &Image, seed: PixelPoint, params: &GrowParams) -> Result<Mask> {
    params.validate()?;
    let (w, h) = (image.width(), image.height());
    if seed.x >= w || seed.y >= h {
        return Err(Error::Shape(format!("seed ({}, {}) outside {w}x{h}", seed.x, seed.y)));
    }
    let smooth = image.box_blur(params.smoothing_radius);
    let limit = (params.max_region_fraction * (w * h) as f64).floor() as usize;
    let tol2 = params.color_tolerance * params.color_tolerance;

    let mut mask = Mask::new(w, h);
    let mut visited = vec![false; w * h];
    let mut queue = VecDeque::new();
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    let seed_color = smooth.pixel(seed.x, seed.y).map(f64::from);

    let accept = |mask: &mut Mask, sum: &mut [f64; 3], count: &mut usize, x: usize, y: usize| {
        mask.set(x, y, true);
        let p = smooth.pixel(x, y);
        for c in 0..3 {
            sum[c] += p[c] as f64;
        }
        *count += 1;
    };

    visited[seed.y * w + seed.x] = true;
    accept(&mut mask, &mut sum, &mut count, seed.x, seed.y);
    queue.push_back(seed);
    while let Some(p) = queue.pop_front() {
        for &(dx, dy) in params.connectivity.offsets() {
            let (nx, ny) = (p.x as isize + dx, p.y as isize + dy);
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            if visited[ny * w + nx] {
                continue;
            }
            let q = smooth.pixel(nx, ny);
            let reference = match params.admission {
                Admission::RunningMean => [0, 1, 2].map(|c| sum[c] / count as f64),
                Admission::SeedReference => seed_color,
            };
            let d2: f64 = (0..3).map(|c| (q[c] as f64 - reference[c]).powi(2)).sum();
            if d2 <= tol2 {
                visited[ny * w + nx] = true;
                accept(&mut mask, &mut sum, &mut count, nx, ny);
                if count > limit {
                    return Err(Error::RegionOverflow {
                        limit,
                        grown: count,
                        partial: mask,
                    });
                }
                queue.push_back(PixelPoint { x: nx, y: ny });
            }
        }
    }
    Ok(mask)
}

/// Connected components (8-connected) of `mask`, as pixel index lists in
/// discovery order.
pub fn components(mask: &Mask, connectivity: Connectivity) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        if seen[start] || !mask.data()[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut head = 0;
        while head < comp.len() {
            let i = comp[head];
            head += 1;
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for &(dx, dy) in connectivity.offsets() {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !seen[j] && mask.data()[j] {
                    seen[j] = true;
                    comp.push(j);
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Keep the largest 8-connected component and fill its enclosed holes.
///
/// Ties between equally large components go to the one found first in
/// row-major order.
pub fn refine_mask(mask: &Mask) -> Result<Mask> {
    if mask.is_empty() {
        return Err(Error::EmptyInput("refine_mask on an empty mask".into()));
    }
    let (w, h) = (mask.width(), mask.height());
    let comps = components(mask, Connectivity::Eight);
    let largest = comps
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
        .map(|(_, c)| c)
        .expect("non-empty mask has a component");
    let mut kept = Mask::new(w, h);
    for &i in largest {
        kept.set(i % w, i / w, true);
    }
    // holes: background pixels not 4-connected to the border
    let background = Mask::from_fn(w, h, |x, y| !kept.get(x, y));
    let mut out = kept.clone();
    for comp in components(&background, Connectivity::Four) {
        let touches_border = comp.iter().any(|&i| {
            let (x, y) = (i % w, i / w);
            x == 0 || y == 0 || x == w - 1 || y == h - 1
        });
        if !touches_border {
            for &i in &comp {
                out.set(i % w, i / w, true);
            }
        }
    }
    Ok(out)
}

/// Intersection over union; 1.0 when both masks are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Grow and refine one mask per box. An overflowing region keeps its partial
/// mask (then refined), so one bad prompt does not abort a whole image.
pub fn segment_boxes(image: &Image, boxes: &[BBox], params: &GrowParams) -> Result<Vec<(PixelPoint, Mask)>> {
    boxes
        .iter()
        .map(|b| {
            let seed = bbox_center(b, image.width(), image.height());
            let grown = match grow_region(image, seed, params) {
                Ok(m) => m,
                Err(Error::RegionOverflow { partial, .. }) => {
                    log::warn!("region from ({}, {}) overflowed; keeping partial mask", seed.x, seed.y);
                    partial
                }
                Err(e) => return Err(e),
            };
            Ok((seed, refine_mask(&grown)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn center_of_centered_box() {
        let b = BBox {
            class_id: 0,
            cx: 0.5,
            cy: 0.5,
            w: 0.2,
            h: 0.2,
        };
        assert_eq!(bbox_center(&b, 640, 640), PixelPoint { x: 320, y: 320 });
    }

    #[test]
    fn center_is_clamped_at_far_edge() {
        let b = BBox {
            class_id: 0,
            cx: 1.0,
            cy: 1.0,
            w: 0.1,
            h: 0.1,
        };
        assert_eq!(bbox_center(&b, 64, 64), PixelPoint { x: 63, y: 63 });
    }

    #[test]
    fn uniform_image_grows_to_full_frame() {
        let img = Image::filled(12, 9, [0.4, 0.4, 0.4]);
        let params = GrowParams {
            max_region_fraction: 1.0,
            ..Default::default()
        };
        let m = grow_region(&img, PixelPoint { x: 3, y: 3 }, &params).unwrap();
        assert_eq!(m.count(), 12 * 9);
    }

    #[test]
    fn two_tone_image_grows_exactly_left_half() {
        let mut img = Image::filled(16, 8, [0.2, 0.2, 0.2]);
        for y in 0..8 {
            for x in 8..16 {
                img.set_pixel(x, y, [0.8, 0.8, 0.8]);
            }
        }
        let params = GrowParams {
            color_tolerance: 0.1,
            smoothing_radius: 0,
            ..Default::default()
        };
        let m = grow_region(&img, PixelPoint { x: 2, y: 4 }, &params).unwrap();
        assert_eq!(m, Mask::from_fn(16, 8, |x, _| x < 8));
    }

    #[test]
    fn overflow_carries_partial_mask() {
        let img = Image::filled(10, 10, [0.5, 0.5, 0.5]);
        let params = GrowParams {
            max_region_fraction: 0.2,
            ..Default::default()
        };
        match grow_region(&img, PixelPoint { x: 5, y: 5 }, &params) {
            Err(Error::RegionOverflow { limit, partial, .. }) => {
                assert_eq!(limit, 20);
                assert!(partial.get(5, 5));
                assert_eq!(partial.count(), 21);
            }
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn refine_keeps_solid_blob() {
        let m = Mask::from_fn(10, 10, |x, y| (2..7).contains(&x) && (3..8).contains(&y));
        assert_eq!(refine_mask(&m).unwrap(), m);
    }

    #[test]
    fn refine_fills_single_pixel_hole() {
        let solid = Mask::from_fn(9, 9, |x, y| (2..7).contains(&x) && (2..7).contains(&y));
        let mut holed = solid.clone();
        holed.set(4, 4, false);
        assert_eq!(refine_mask(&holed).unwrap(), solid);
    }

    #[test]
    fn refine_drops_small_component() {
        let m = Mask::from_fn(20, 20, |x, y| (x < 10 && y < 10) || (x >= 15 && y == 18));
        let r = refine_mask(&m).unwrap();
        assert_eq!(r.count(), 100);
        assert_eq!(r, Mask::from_fn(20, 20, |x, y| x < 10 && y < 10));
    }

    #[test]
    fn refine_rejects_empty() {
        assert!(matches!(refine_mask(&Mask::new(4, 4)), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn iou_cases() {
        let a = Mask::from_fn(30, 30, |x, y| (5..15).contains(&x) && (5..15).contains(&y));
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let far = Mask::from_fn(30, 30, |x, y| x > 20 && y > 20);
        assert_eq!(mask_iou(&a, &far).unwrap(), 0.0);
        let shifted = Mask::from_fn(30, 30, |x, y| (10..20).contains(&x) && (5..15).contains(&y));
        assert!((mask_iou(&a, &shifted).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mask_iou(&Mask::new(3, 3), &Mask::new(3, 3)).unwrap(), 1.0);
        assert!(mask_iou(&a, &Mask::new(3, 3)).is_err());
    }

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(seed);
        let mut img = Image::new(w, h);
        // blocky image so regions are non-trivial
        let blocks: Vec<[f32; 3]> = (0..16).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(x, y, blocks[(y * 4 / h) * 4 + x * 4 / w]);
            }
        }
        img
    }

    proptest! {
        #[test]
        fn center_lies_in_box(cx in 0.0f64..=1.0, cy in 0.0f64..=1.0, bw in 0.01f64..0.5, bh in 0.01f64..0.5, size in 8usize..200) {
            let b = BBox { class_id: 0, cx, cy, w: bw, h: bh };
            let p = bbox_center(&b, size, size);
            let (x0, y0, x1, y1) = b.to_pixels(size, size);
            // pixel cell [p, p+1) overlaps the box, clipped to the frame
            prop_assert!((p.x as f64) < x1.min(size as f64) + 1e-9 || p.x == size - 1);
            prop_assert!((p.x as f64) + 1.0 > x0.max(0.0) - 1e-9);
            prop_assert!((p.y as f64) < y1.min(size as f64) + 1e-9 || p.y == size - 1);
            prop_assert!((p.y as f64) + 1.0 > y0.max(0.0) - 1e-9);
            prop_assert!(p.x < size && p.y < size);
        }

        #[test]
        fn grown_region_contains_seed(seed in 0u64..500, sx in 0usize..24, sy in 0usize..24, t in 0.02f64..0.5, radius in 0usize..3) {
            let img = random_image(24, 24, seed);
            let params = GrowParams { color_tolerance: t, max_region_fraction: 1.0, smoothing_radius: radius, ..Default::default() };
            let seed_point = PixelPoint { x: sx, y: sy };
            let grown = grow_region(&img, seed_point, &params).unwrap();
            prop_assert!(grown.get(sx, sy));
        }

        #[test]
        fn seed_reference_growth_is_monotone_in_tolerance(seed in 0u64..500, sx in 0usize..24, sy in 0usize..24, t in 0.02f64..0.5, k in 1.0f64..3.0) {
            let img = random_image(24, 24, seed);
            let p = PixelPoint { x: sx, y: sy };
            let lo = GrowParams { color_tolerance: t, admission: Admission::SeedReference, max_region_fraction: 1.0, ..Default::default() };
            let hi = GrowParams { color_tolerance: t * k, ..lo };
            let a = grow_region(&img, p, &lo).unwrap();
            let b = grow_region(&img, p, &hi).unwrap();
            prop_assert!(a.data().iter().zip(b.data()).all(|(&x, &y)| !x || y));
        }

        #[test]
        fn refine_is_idempotent_and_connected(bits in proptest::collection::vec(any::<bool>(), 144)) {
            let m = Mask::from_vec(12, 12, bits).unwrap();
            prop_assume!(!m.is_empty());
            let r = refine_mask(&m).unwrap();
            prop_assert_eq!(refine_mask(&r).unwrap(), r.clone());
            prop_assert_eq!(components(&r, Connectivity::Eight).len(), 1);
        }
    }
}
