//! Numbered candidate image for the advisor, as binary PPM.

use collab_core::camera::CameraView;
use collab_core::candidates::LabeledImage;

/// 3×5 digit glyphs, one row per byte, MSB of the low three bits on the left.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

const SCALE: i64 = 2;

pub struct Canvas {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            rgb: vec![0; (width * height * 3) as usize],
        }
    }

    pub fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = ((y as u32 * self.width + x as u32) * 3) as usize;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn fill(&mut self, x0: i64, y0: i64, w: i64, h: i64, c: [u8; 3]) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.set(x, y, c);
            }
        }
    }

    /// Draws `text` (digits only) with its top-left corner at (x, y).
    fn digits(&mut self, x: i64, y: i64, text: &str, c: [u8; 3]) {
        for (k, ch) in text.chars().enumerate() {
            let Some(d) = ch.to_digit(10) else { continue };
            let glyph = DIGITS[d as usize];
            let gx = x + k as i64 * 4 * SCALE;
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        self.fill(gx + col * SCALE, y + row as i64 * SCALE, SCALE, SCALE, c);
                    }
                }
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

/// Shaded depth image with the target highlighted and every candidate
/// label drawn in a white box next to a red marker at its pixel.
pub fn label_image(view: &CameraView, image: &LabeledImage, target_id: u32) -> Canvas {
    let (w, h) = (view.intrinsics.width, view.intrinsics.height);
    let mut canvas = Canvas::new(w, h);
    let valid = view.depth.iter().copied().filter(|d| *d > 0.0);
    let (near, far) = valid.fold((f64::INFINITY, 0.0f64), |(lo, hi), d| {
        (lo.min(d), hi.max(d))
    });
    let span = (far - near).max(1e-9);
    for v in 0..h {
        for u in 0..w {
            let c = match view.depth_at(u, v) {
                Some(d) => {
                    let shade = (230.0 - 150.0 * (d - near) / span).clamp(0.0, 255.0) as u8;
                    if view.label_at(u, v) == target_id {
                        [shade / 3, shade / 2 + 40, shade]
                    } else {
                        [shade, shade, shade]
                    }
                }
                None => [30, 30, 30],
            };
            canvas.set(u as i64, v as i64, c);
        }
    }
    for &(label, u, v) in &image.labels {
        let (x, y) = (u.round() as i64, v.round() as i64);
        let text = label.to_string();
        let tw = text.len() as i64 * 4 * SCALE - SCALE;
        let th = 5 * SCALE;
        let (bx, by) = (x + 3, y - th - 5);
        canvas.fill(bx, by, tw + 4, th + 4, [255, 255, 255]);
        canvas.digits(bx + 2, by + 2, &text, [0, 0, 0]);
        canvas.fill(x - 2, y - 2, 5, 5, [220, 20, 20]);
    }
    canvas
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_size() {
        let c = Canvas::new(4, 3);
        let ppm = c.to_ppm();
        assert!(ppm.starts_with(b"P6\n4 3\n255\n"));
        assert_eq!(ppm.len(), b"P6\n4 3\n255\n".len() + 36);
    }

    #[test]
    fn digit_one_has_vertical_stroke() {
        let mut c = Canvas::new(10, 12);
        c.digits(0, 0, "1", [9, 9, 9]);
        // centre column of the glyph, every row
        for row in 0..5 {
            assert_eq!(c.get(2, row * 2), [9, 9, 9]);
        }
        assert_eq!(c.get(0, 0), [0, 0, 0]);
    }
}
