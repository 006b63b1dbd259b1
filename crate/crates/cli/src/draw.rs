use image::{Rgb, RgbImage};
use rgbt_core::geometry::BoxXyxy;

const PALETTE: [[u8; 3]; 6] = [
    [255, 56, 56],
    [56, 255, 56],
    [56, 128, 255],
    [255, 200, 40],
    [255, 56, 255],
    [40, 230, 230],
];

pub fn class_color(class_id: usize) -> Rgb<u8> {
    Rgb(PALETTE[class_id % PALETTE.len()])
}

/// Draws a rectangle outline `thickness` pixels wide, clipped to the image.
pub fn draw_box(img: &mut RgbImage, b: &BoxXyxy, color: Rgb<u8>, thickness: u32) {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return;
    }
    let clamp = |v: f64, hi: u32| (v.round().max(0.0) as u32).min(hi - 1);
    let (x1, y1, x2, y2) = (clamp(b.x1, w), clamp(b.y1, h), clamp(b.x2, w), clamp(b.y2, h));
    for t in 0..thickness {
        for x in x1..=x2 {
            for y in [y1.saturating_add(t).min(y2), y2.saturating_sub(t).max(y1)] {
                img.put_pixel(x, y, color);
            }
        }
        for y in y1..=y2 {
            for x in [x1.saturating_add(t).min(x2), x2.saturating_sub(t).max(x1)] {
                img.put_pixel(x, y, color);
            }
        }
    }
}
