//! RGB images and the pixel-level transforms used by the view pipelines.
//!
//! Pixels are stored channel-planar (all R, then all G, then all B), each
//! plane row-major, values in `[0, 1]`.

/// Luma weights for grayscale conversion.
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    /// Panics if `data.len() != 3 * height * width`.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * height * width, "image buffer does not match extents");
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let n = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    fn map_pixels(&mut self, mut f: impl FnMut([f32; 3]) -> [f32; 3]) {
        let n = self.height * self.width;
        for i in 0..n {
            let out = f([self.data[i], self.data[n + i], self.data[2 * n + i]]);
            self.data[i] = out[0];
            self.data[n + i] = out[1];
            self.data[2 * n + i] = out[2];
        }
        self.clamp();
    }

    pub fn gray_values(&self) -> Vec<f32> {
        let n = self.height * self.width;
        (0..n).map(|i| luma([self.data[i], self.data[n + i], self.data[2 * n + i]])).collect()
    }

    /// Bilinear resample of the box `(top, left, height, width)` (in source
    /// pixels, fractional allowed) to `out × out`.
    pub fn crop_resize(&self, top: f32, left: f32, box_h: f32, box_w: f32, out: usize) -> Image {
        let mut data = Vec::with_capacity(3 * out * out);
        let sy = box_h / out as f32;
        let sx = box_w / out as f32;
        let max_y = (self.height - 1) as f32;
        let max_x = (self.width - 1) as f32;
        for c in 0..3 {
            let plane = self.plane(c);
            for oy in 0..out {
                let y = (top + (oy as f32 + 0.5) * sy - 0.5).clamp(0.0, max_y);
                let y0 = y.floor() as usize;
                let y1 = (y0 + 1).min(self.height - 1);
                let fy = y - y0 as f32;
                for ox in 0..out {
                    let x = (left + (ox as f32 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                    let x0 = x.floor() as usize;
                    let x1 = (x0 + 1).min(self.width - 1);
                    let fx = x - x0 as f32;
                    let top_row = lerp(plane[y0 * self.width + x0], plane[y0 * self.width + x1], fx);
                    let bot_row = lerp(plane[y1 * self.width + x0], plane[y1 * self.width + x1], fx);
                    data.push(lerp(top_row, bot_row, fy));
                }
            }
        }
        let mut img = Image::new(out, out, data);
        img.clamp();
        img
    }

    pub fn hflip(&self) -> Image {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                let row = &mut out.data[(c * self.height + y) * self.width..][..self.width];
                row.reverse();
            }
        }
        out
    }

    /// Counter-clockwise rotation by `turns` quarter turns.
    pub fn rotate_quarter(&self, turns: u8) -> Image {
        let turns = turns % 4;
        if turns == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let (oh, ow) = if turns % 2 == 1 { (w, h) } else { (h, w) };
        let mut data = vec![0.0; self.data.len()];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let (ny, nx) = match turns {
                        1 => (w - 1 - x, y),
                        2 => (h - 1 - y, w - 1 - x),
                        _ => (x, h - 1 - y),
                    };
                    data[(c * oh + ny) * ow + nx] = self.data[(c * h + y) * w + x];
                }
            }
        }
        Image::new(oh, ow, data)
    }

    pub fn grayscale(&self) -> Image {
        let mut out = self.clone();
        out.map_pixels(|p| {
            let g = luma(p);
            [g, g, g]
        });
        out
    }

    pub fn adjust_brightness(&mut self, factor: f32) {
        self.map_pixels(|p| p.map(|v| v * factor));
    }

    pub fn adjust_contrast(&mut self, factor: f32) {
        let gray = self.gray_values();
        let mean = gray.iter().sum::<f32>() / gray.len() as f32;
        self.map_pixels(|p| p.map(|v| mean + (v - mean) * factor));
    }

    pub fn adjust_saturation(&mut self, factor: f32) {
        self.map_pixels(|p| {
            let g = luma(p);
            p.map(|v| g + (v - g) * factor)
        });
    }

    /// Rotates hue by `shift` turns (`shift` in `[-0.5, 0.5]`).
    pub fn adjust_hue(&mut self, shift: f32) {
        self.map_pixels(|p| {
            let (h, s, v) = rgb_to_hsv(p);
            hsv_to_rgb((h + shift).rem_euclid(1.0), s, v)
        });
    }

    /// 3×3 Gaussian blur, separable, replicated borders.
    pub fn gaussian_blur3(&self, sigma: f32) -> Image {
        let side = (-1.0 / (2.0 * sigma * sigma)).exp();
        let norm = 1.0 + 2.0 * side;
        let k = [side / norm, 1.0 / norm, side / norm];
        let (h, w) = (self.height, self.width);
        let mut tmp = vec![0.0; self.data.len()];
        let mut out = vec![0.0; self.data.len()];
        for c in 0..3 {
            let src = self.plane(c);
            let t = &mut tmp[c * h * w..][..h * w];
            for y in 0..h {
                for x in 0..w {
                    let l = src[y * w + x.saturating_sub(1)];
                    let r = src[y * w + (x + 1).min(w - 1)];
                    t[y * w + x] = k[0] * l + k[1] * src[y * w + x] + k[2] * r;
                }
            }
            let o = &mut out[c * h * w..][..h * w];
            for y in 0..h {
                for x in 0..w {
                    let u = t[y.saturating_sub(1) * w + x];
                    let d = t[(y + 1).min(h - 1) * w + x];
                    o[y * w + x] = k[0] * u + k[1] * t[y * w + x] + k[2] * d;
                }
            }
        }
        let mut img = Image::new(h, w, out);
        img.clamp();
        img
    }
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

pub fn luma(p: [f32; 3]) -> f32 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
