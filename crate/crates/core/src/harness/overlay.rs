//! Mask contours, prompt markers and phrase labels drawn over a scene.

use crate::imaging::{Image, Mask};

const PALETTE: [[f64; 3]; 6] = [
    [1.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.55, 0.0],
    [0.6, 0.6, 1.0],
    [0.5, 1.0, 0.5],
];

#[derive(Clone, Debug)]
pub struct OverlayItem {
    pub text: String,
    pub point: (usize, usize),
    pub mask: Option<Mask>,
    pub score: f64,
}

/// Mask pixels with at least one 8-neighbor outside the mask (the image border counts as outside).
pub fn mask_contour(mask: &Mask) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Mask::empty(h, w);
    for (y, x) in mask.pixels() {
        let mut edge = false;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 || !mask.get(ny as usize, nx as usize) {
                    edge = true;
                }
            }
        }
        if edge {
            out.set(y, x, true);
        }
    }
    out
}

/// Indices of up to `max` masks by descending score (input order on ties) that overlap no earlier pick.
pub fn select_non_overlapping(items: &[OverlayItem], max: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).filter(|&i| items[i].mask.as_ref().is_some_and(|m| !m.is_empty())).collect();
    order.sort_by(|&a, &b| items[b].score.total_cmp(&items[a].score).then(a.cmp(&b)));
    let mut picked: Vec<usize> = Vec::new();
    for i in order {
        if picked.len() == max {
            break;
        }
        let m = items[i].mask.as_ref().expect("filtered");
        if picked
            .iter()
            .all(|&j| items[j].mask.as_ref().expect("filtered").intersection_area(m) == 0)
        {
            picked.push(i);
        }
    }
    picked
}

fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_lowercase() {
        'a' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'b' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'c' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'd' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'e' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'f' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'g' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'h' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'i' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'j' => [0b001, 0b001, 0b001, 0b101, 0b010],
        'k' => [0b101, 0b101, 0b110, 0b101, 0b101],
        'l' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'm' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'n' => [0b110, 0b101, 0b101, 0b101, 0b101],
        'o' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'p' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'q' => [0b010, 0b101, 0b101, 0b110, 0b011],
        'r' => [0b110, 0b101, 0b110, 0b101, 0b101],
        's' => [0b011, 0b100, 0b010, 0b001, 0b110],
        't' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'u' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'v' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'w' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'x' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        _ => [0; 5],
    }
}

fn fill(img: &mut Image, y0: usize, x0: usize, h: usize, w: usize, rgb: [f64; 3]) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.set_pixel(y, x, rgb);
        }
    }
}

fn draw_text(img: &mut Image, y0: usize, x0: usize, text: &str, px: usize, rgb: [f64; 3]) {
    for (i, c) in text.chars().enumerate() {
        let g = glyph(c);
        let cx = x0 + i * 4 * px;
        for (r, bits) in g.iter().enumerate() {
            for b in 0..3 {
                if bits >> (2 - b) & 1 == 1 {
                    fill(img, y0 + r * px, cx + b * px, px, px, rgb);
                }
            }
        }
    }
}

const LINE: usize = 14;

/// Upscales by `scale`, draws the picked contours and markers, and appends a legend strip.
pub fn render_overlay(image: &Image, items: &[OverlayItem], max_masks: usize, scale: usize) -> Image {
    let scale = scale.max(1);
    let picked = select_non_overlapping(items, max_masks);
    let (h, w) = (image.height(), image.width());
    let legend = if picked.is_empty() { 0 } else { picked.len() * LINE + 4 };
    let mut out = Image::filled(h * scale + legend, w * scale, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            fill(&mut out, y * scale, x * scale, scale, scale, image.pixel(y, x));
        }
    }
    for (slot, &i) in picked.iter().enumerate() {
        let color = PALETTE[slot % PALETTE.len()];
        let item = &items[i];
        let contour = mask_contour(item.mask.as_ref().expect("picked masks exist"));
        for (y, x) in contour.pixels() {
            fill(&mut out, y * scale, x * scale, scale, scale, color);
        }
        let (py, px) = item.point;
        let (cy, cx) = (py * scale + scale / 2, px * scale + scale / 2);
        let arm = 2 * scale;
        for d in 0..=2 * arm {
            let o = d as i64 - arm as i64;
            for (yy, xx) in [(cy as i64 + o, cx as i64 + o), (cy as i64 + o, cx as i64 - o)] {
                if yy >= 0 && xx >= 0 && (yy as usize) < h * scale && (xx as usize) < w * scale {
                    out.set_pixel(yy as usize, xx as usize, color);
                }
            }
        }
        let ly = h * scale + 4 + slot * LINE;
        fill(&mut out, ly, 4, 10, 10, color);
        draw_text(&mut out, ly, 20, &item.text, 2, color);
    }
    out
}
