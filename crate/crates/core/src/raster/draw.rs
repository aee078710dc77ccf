use super::{Raster, Rgb};

/// Bresenham segment; pixels outside the canvas are skipped.
pub fn draw_line(canvas: &mut Raster<Rgb>, from: (f64, f64), to: (f64, f64), color: Rgb) {
    let (mut x0, mut y0) = (from.0.round() as i64, from.1.round() as i64);
    let (x1, y1) = (to.0.round() as i64, to.1.round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as usize) < canvas.width() && (y0 as usize) < canvas.height() {
            canvas.set(x0 as usize, y0 as usize, color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

pub fn draw_polyline(canvas: &mut Raster<Rgb>, points: &[(f64, f64)], color: Rgb) {
    if let [p] = points {
        draw_line(canvas, *p, *p, color);
    }
    for w in points.windows(2) {
        draw_line(canvas, w[0], w[1], color);
    }
}
