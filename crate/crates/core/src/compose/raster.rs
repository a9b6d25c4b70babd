use crate::compose::layout::Rect;
use crate::media::Frame;

/// Float RGB image, row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    // exact when a == b
    a + (b - a) * t
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut r = Self::new(width, height);
        r.data.chunks_exact_mut(3).for_each(|px| px.copy_from_slice(&rgb));
        r
    }

    pub fn from_frame(frame: &Frame) -> Self {
        Self {
            width: frame.width() as usize,
            height: frame.height() as usize,
            data: frame.as_raw().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Round and clamp to 8 bits.
    pub fn to_frame(&self) -> Frame {
        let bytes = self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
        Frame::from_raw(self.width as u32, self.height as u32, bytes).expect("sizes agree")
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, px: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize(&self, width: usize, height: usize) -> Raster {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let taps = |o: usize, scale: f64, len: usize| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(len - 1), (s - i0 as f64) as f32)
        };
        let xs: Vec<_> = (0..width).map(|x| taps(x, sx, self.width)).collect();
        let mut out = Raster::new(width, height);
        for y in 0..height {
            let (y0, y1, fy) = taps(y, sy, self.height);
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                for c in 0..3 {
                    let top = lerp(self.get(x0, y0, c), self.get(x1, y0, c), fx);
                    let bottom = lerp(self.get(x0, y1, c), self.get(x1, y1, c), fx);
                    out.data[(y * width + x) * 3 + c] = lerp(top, bottom, fy);
                }
            }
        }
        out
    }

    pub fn crop(&self, rect: Rect) -> Raster {
        let mut out = Raster::new(rect.width, rect.height);
        for y in 0..rect.height {
            let src = ((rect.y + y) * self.width + rect.x) * 3;
            out.data[y * rect.width * 3..(y + 1) * rect.width * 3].copy_from_slice(&self.data[src..src + rect.width * 3]);
        }
        out
    }

    pub fn hflip(&self) -> Raster {
        let mut out = Raster::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    /// Copy `src` into this raster with its top-left at `(x, y)`.
    pub fn blit(&mut self, src: &Raster, x: usize, y: usize) {
        for row in 0..src.height {
            let dst = ((y + row) * self.width + x) * 3;
            self.data[dst..dst + src.width * 3].copy_from_slice(&src.data[row * src.width * 3..(row + 1) * src.width * 3]);
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_resizes_to_constant() {
        let r = Raster::filled(37, 23, [0.3, -1.0, 200.0]);
        let out = r.resize(11, 50);
        assert!(out.data.chunks_exact(3).all(|p| p == [0.3, -1.0, 200.0]));
    }

    #[test]
    fn identity_resize_and_double_flip() {
        let mut r = Raster::new(5, 4);
        r.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32);
        assert_eq!(r.resize(5, 4), r);
        assert_eq!(r.hflip().hflip(), r);
        assert_eq!(r.hflip().pixel(0, 2), r.pixel(4, 2));
    }

    #[test]
    fn downscale_by_two_averages_pairs() {
        let mut r = Raster::new(4, 1);
        for (x, v) in [0.0, 2.0, 4.0, 6.0].into_iter().enumerate() {
            r.set_pixel(x, 0, [v; 3]);
        }
        let out = r.resize(2, 1);
        assert_eq!(out.pixel(0, 0), [1.0; 3]);
        assert_eq!(out.pixel(1, 0), [5.0; 3]);
    }
}
