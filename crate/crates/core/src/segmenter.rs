//! Promptable flood-fill segmenter for flat-colored scenes.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};

pub const DEFAULT_COLOR_TOL: f64 = 0.05;

fn linf(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).abs().max((a[1] - b[1]).abs()).max((a[2] - b[2]).abs())
}

/// 4-connected component of pixels within `color_tol` (L-infinity) of the prompt pixel's color.
pub fn segment_point(image: &Image, point: (usize, usize), color_tol: f64) -> Result<Mask> {
    let (h, w) = (image.height(), image.width());
    let (py, px) = point;
    if py >= h || px >= w {
        return Err(Error::Argument(format!("prompt ({py}, {px}) outside {h}x{w} image")));
    }
    let reference = image.pixel(py, px);
    let mut mask = Mask::empty(h, w);
    let mut queue = VecDeque::from([(py, px)]);
    mask.set(py, px, true);
    while let Some((y, x)) = queue.pop_front() {
        let mut visit = |yy: usize, xx: usize| {
            if !mask.get(yy, xx) && linf(image.pixel(yy, xx), reference) <= color_tol {
                mask.set(yy, xx, true);
                queue.push_back((yy, xx));
            }
        };
        if y > 0 {
            visit(y - 1, x);
        }
        if y + 1 < h {
            visit(y + 1, x);
        }
        if x > 0 {
            visit(y, x - 1);
        }
        if x + 1 < w {
            visit(y, x + 1);
        }
    }
    Ok(mask)
}

/// In-region pixel nearest the region centroid; ties go to the earliest pixel in row-major order.
pub fn region_seed(region: &Mask) -> Option<(usize, usize)> {
    let (cy, cx) = region.centroid()?;
    let mut best: Option<((usize, usize), f64)> = None;
    for (y, x) in region.pixels() {
        let d = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some(((y, x), d));
        }
    }
    best.map(|(p, _)| p)
}

/// Flood fill seeded at the region's centroid-nearest pixel.
pub fn segment_region(image: &Image, region: &Mask, color_tol: f64) -> Result<Mask> {
    if region.height() != image.height() || region.width() != image.width() {
        return Err(Error::Dimension {
            op: "segment_region",
            left: vec![image.height(), image.width()],
            right: vec![region.height(), region.width()],
        });
    }
    let seed = region_seed(region).ok_or_else(|| Error::Argument("region prompt is empty".into()))?;
    segment_point(image, seed, color_tol)
}

/// True when the set pixels form exactly one 4-connected component.
pub fn is_single_component(mask: &Mask) -> bool {
    let Some(start) = mask.pixels().next() else {
        return false;
    };
    let (h, w) = (mask.height(), mask.width());
    let mut seen = Mask::empty(h, w);
    let mut stack = vec![start];
    seen.set(start.0, start.1, true);
    let mut count = 0;
    while let Some((y, x)) = stack.pop() {
        count += 1;
        let nbrs = [
            (y.wrapping_sub(1), x),
            (y + 1, x),
            (y, x.wrapping_sub(1)),
            (y, x + 1),
        ];
        for (yy, xx) in nbrs {
            if yy < h && xx < w && mask.get(yy, xx) && !seen.get(yy, xx) {
                seen.set(yy, xx, true);
                stack.push((yy, xx));
            }
        }
    }
    count == mask.area()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{rasterize_mask, Category, Color, Position};

    fn disk_scene(disks: &[(f64, f64, f64)]) -> (Image, Vec<Mask>) {
        let mut img = Image::filled(64, 64, [0.0; 3]);
        let masks: Vec<Mask> = disks
            .iter()
            .map(|&(y, x, r)| rasterize_mask(Category::Circle, Position { y, x }, r, 64).unwrap())
            .collect();
        for m in &masks {
            img.paint(m, Color::Red.rgb());
        }
        (img, masks)
    }

    #[test]
    fn centre_prompt_returns_exact_disk() {
        let (img, masks) = disk_scene(&[(22.0, 22.0, 10.0)]);
        assert_eq!(segment_point(&img, (32, 32), DEFAULT_COLOR_TOL).unwrap(), masks[0]);
    }

    #[test]
    fn background_prompt_returns_complement() {
        let (img, masks) = disk_scene(&[(22.0, 22.0, 10.0)]);
        let bg = segment_point(&img, (0, 0), DEFAULT_COLOR_TOL).unwrap();
        assert_eq!(bg.area() + masks[0].area(), 64 * 64);
        assert_eq!(bg.intersection_area(&masks[0]), 0);
    }

    #[test]
    fn same_color_disks_are_separate_components() {
        let (img, masks) = disk_scene(&[(20.0, 2.0, 8.0), (20.0, 40.0, 8.0)]);
        let m = segment_point(&img, (28, 10), DEFAULT_COLOR_TOL).unwrap();
        assert_eq!(m, masks[0]);
        assert!(is_single_component(&m));
    }

    #[test]
    fn region_inside_object_reduces_to_point() {
        let (img, masks) = disk_scene(&[(22.0, 22.0, 10.0)]);
        let mut region = Mask::empty(64, 64);
        for y in 30..34 {
            for x in 28..36 {
                region.set(y, x, true);
            }
        }
        let seed = region_seed(&region).unwrap();
        assert_eq!(
            segment_region(&img, &region, DEFAULT_COLOR_TOL).unwrap(),
            segment_point(&img, seed, DEFAULT_COLOR_TOL).unwrap()
        );
        assert_eq!(segment_region(&img, &Mask::full(64, 64), DEFAULT_COLOR_TOL).unwrap(), masks[0]);
        assert!(segment_region(&img, &Mask::empty(64, 64), DEFAULT_COLOR_TOL).is_err());
    }

    #[test]
    fn component_checker_detects_split_masks() {
        let mut m = Mask::empty(4, 4);
        m.set(0, 0, true);
        m.set(1, 1, true);
        assert!(!is_single_component(&m));
        m.set(0, 1, true);
        assert!(is_single_component(&m));
    }
}
