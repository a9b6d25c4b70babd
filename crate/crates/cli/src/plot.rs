use image::{Rgb, RgbImage};

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
pub const PALETTE: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14]];

/// Plain line chart of several series sharing one y range. No text: the
/// series meaning lives in the file name and the embedded config.
pub fn line_chart(series: &[(&[f64], [u8; 3])], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, BG);
    let (left, right, top, bottom) = (40i64, width as i64 - 12, 12i64, height as i64 - 30);
    let finite = series.iter().flat_map(|(s, _)| s.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo.min(0.0), if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };

    for i in 0..=4 {
        let y = bottom - (bottom - top) * i / 4;
        line(&mut img, (left, y), (right, y), GRID);
    }
    line(&mut img, (left, top), (left, bottom), AXIS);
    line(&mut img, (left, bottom), (right, bottom), AXIS);

    for (values, colour) in series {
        let n = values.len();
        if n == 0 {
            continue;
        }
        let point = |i: usize, v: f64| {
            let x = left + if n > 1 { (right - left) * i as i64 / (n as i64 - 1) } else { 0 };
            let y = bottom - ((v - lo) / (hi - lo) * (bottom - top) as f64).round() as i64;
            (x, y.clamp(top, bottom))
        };
        let mut prev = point(0, values[0]);
        for (i, &v) in values.iter().enumerate().skip(1) {
            let p = point(i, v);
            line(&mut img, prev, p, Rgb(*colour));
            prev = p;
        }
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}
