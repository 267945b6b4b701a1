use crate::error::{Error, Result};
use crate::imaging::Mask;

use super::vocab::Category;

/// Smallest mask the generator will emit.
pub const MIN_AREA: usize = 16;

/// Top-left corner of the shape's bounding box, in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Position {
    pub y: f64,
    pub x: f64,
}

/// Bounding-box extent of a shape: circles span `2 * scale`, the others `scale`.
pub fn extent(category: Category, scale: f64) -> f64 {
    match category {
        Category::Circle => 2.0 * scale,
        Category::Square | Category::Triangle => scale,
    }
}

/// Rasterizes the analytic shape under centre-of-pixel sampling.
///
/// * circle: radius `scale`, centre at `position + scale`; boundary inclusive.
/// * square: side `scale`; pixel centres in `[y, y + scale) x [x, x + scale)`.
/// * triangle: upward isosceles with base and height `scale`; edges inclusive.
pub fn rasterize_mask(category: Category, position: Position, scale: f64, image_size: usize) -> Result<Mask> {
    let ext = extent(category, scale);
    let size = image_size as f64;
    if !(scale > 0.0) || position.y < 0.0 || position.x < 0.0 || position.y + ext > size || position.x + ext > size {
        return Err(Error::Placement(format!(
            "{category:?} at ({}, {}) with scale {scale} does not fit a {image_size}px image",
            position.y, position.x
        )));
    }
    let mut mask = Mask::empty(image_size, image_size);
    match category {
        Category::Circle => {
            let (cy, cx) = (position.y + scale, position.x + scale);
            let r2 = scale * scale;
            for y in 0..image_size {
                let dy = y as f64 + 0.5 - cy;
                for x in 0..image_size {
                    let dx = x as f64 + 0.5 - cx;
                    if dy * dy + dx * dx <= r2 {
                        mask.set(y, x, true);
                    }
                }
            }
        }
        Category::Square => {
            for y in 0..image_size {
                let py = y as f64 + 0.5;
                if py < position.y || py >= position.y + scale {
                    continue;
                }
                for x in 0..image_size {
                    let px = x as f64 + 0.5;
                    if px >= position.x && px < position.x + scale {
                        mask.set(y, x, true);
                    }
                }
            }
        }
        Category::Triangle => {
            // scanline: at height yc the shape spans apex_x +- half-width
            let apex_x = position.x + scale / 2.0;
            for y in 0..image_size {
                let py = y as f64 + 0.5;
                if py < position.y || py > position.y + scale {
                    continue;
                }
                let half = (py - position.y) / 2.0;
                for x in 0..image_size {
                    let px = x as f64 + 0.5;
                    if px >= apex_x - half && px <= apex_x + half {
                        mask.set(y, x, true);
                    }
                }
            }
        }
    }
    if mask.area() < MIN_AREA {
        return Err(Error::Placement(format!(
            "{category:?} with scale {scale} covers {} pixels (< {MIN_AREA})",
            mask.area()
        )));
    }
    Ok(mask)
}

/// Vertices `(y, x)` of the triangle: apex, bottom-left, bottom-right.
pub fn triangle_vertices(position: Position, scale: f64) -> [(f64, f64); 3] {
    [
        (position.y, position.x + scale / 2.0),
        (position.y + scale, position.x),
        (position.y + scale, position.x + scale),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_square() {
        let m = rasterize_mask(Category::Square, Position { y: 10.0, x: 10.0 }, 4.0, 64).unwrap();
        assert_eq!(m.area(), 16);
        for (y, x) in m.pixels() {
            assert!((10..=13).contains(&y) && (10..=13).contains(&x));
        }
    }

    #[test]
    fn degenerate_circle_is_rejected() {
        let r = rasterize_mask(Category::Circle, Position { y: 20.0, x: 20.0 }, 0.4, 64);
        assert!(matches!(r, Err(Error::Placement(_))));
    }

    #[test]
    fn out_of_bounds_is_rejected() {
        let r = rasterize_mask(Category::Square, Position { y: 60.0, x: 0.0 }, 8.0, 64);
        assert!(matches!(r, Err(Error::Placement(_))));
    }

    /// Independent point-in-triangle test via the sign of three edge functions.
    fn half_plane_scan(position: Position, scale: f64, size: usize) -> Mask {
        let v = triangle_vertices(position, scale);
        let edge = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| (b.1 - a.1) * (p.0 - a.0) - (b.0 - a.0) * (p.1 - a.1);
        let mut m = Mask::empty(size, size);
        for y in 0..size {
            for x in 0..size {
                let p = (y as f64 + 0.5, x as f64 + 0.5);
                let e = [edge(v[0], v[1], p), edge(v[1], v[2], p), edge(v[2], v[0], p)];
                if e.iter().all(|&s| s >= 0.0) || e.iter().all(|&s| s <= 0.0) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }

    #[test]
    fn triangle_matches_half_plane_oracle() {
        for (y, x, s) in [(3.0, 5.0, 10.0), (20.0, 30.0, 17.0), (0.0, 0.0, 20.0), (40.0, 12.5, 13.0)] {
            let p = Position { y, x };
            let m = rasterize_mask(Category::Triangle, p, s, 64).unwrap();
            assert_eq!(m, half_plane_scan(p, s, 64), "triangle at ({y},{x}) side {s}");
        }
    }
}
