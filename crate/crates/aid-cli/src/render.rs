//! Detection rendering: boxes and scores burned into upscaled PNGs, with
//! side-by-side panels for comparing checkpoints on the same image.

use aid_core::tensor::Tensor;
use aid_core::types::Detection;
use image::Rgb;

use crate::plot::{Canvas, BLACK, PALETTE};

const SCALE: usize = 4;
const LABEL_BAND: usize = 14;

fn blit_image(canvas: &mut Canvas, pixels: &Tensor, x_off: i64, y_off: i64) {
    for y in 0..pixels.h {
        for x in 0..pixels.w {
            let color = Rgb([
                (pixels.get(0, y, x).clamp(0.0, 1.0) * 255.0) as u8,
                (pixels.get(1, y, x).clamp(0.0, 1.0) * 255.0) as u8,
                (pixels.get(2, y, x).clamp(0.0, 1.0) * 255.0) as u8,
            ]);
            for dy in 0..SCALE {
                for dx in 0..SCALE {
                    canvas.put(
                        x_off + (x * SCALE + dx) as i64,
                        y_off + (y * SCALE + dy) as i64,
                        color,
                    );
                }
            }
        }
    }
}

fn draw_detections(canvas: &mut Canvas, dets: &[Detection], x_off: i64, y_off: i64) {
    for det in dets {
        let color = PALETTE[det.class_id as usize % PALETTE.len()];
        let x0 = x_off + (det.bbox.x1() * SCALE as f64) as i64;
        let y0 = y_off + (det.bbox.y1() * SCALE as f64) as i64;
        let x1 = x_off + (det.bbox.x2() * SCALE as f64) as i64;
        let y1 = y_off + (det.bbox.y2() * SCALE as f64) as i64;
        canvas.rect(x0, y0, x1, y1, color);
        canvas.text(x0 + 1, (y0 - 8).max(y_off), &format!("{:.2}", det.score), color);
    }
}

/// One panel per (label, detections) entry, drawn over the same image.
pub fn side_by_side(
    pixels: &Tensor,
    panels: &[(String, Vec<Detection>)],
    path: &std::path::Path,
) -> Result<(), image::ImageError> {
    let pw = pixels.w * SCALE;
    let ph = pixels.h * SCALE;
    let gap = 6usize;
    let width = (panels.len() * (pw + gap)).saturating_sub(gap).max(pw);
    let mut canvas = Canvas::new(width as u32, (ph + LABEL_BAND) as u32);
    for (i, (label, dets)) in panels.iter().enumerate() {
        let x_off = (i * (pw + gap)) as i64;
        canvas.text(x_off + 2, 2, label, BLACK);
        blit_image(&mut canvas, pixels, x_off, LABEL_BAND as i64);
        draw_detections(&mut canvas, dets, x_off, LABEL_BAND as i64);
    }
    canvas.save(path)
}
