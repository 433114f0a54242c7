//! In-memory float image, HWC layout, values nominally in [0, 1].

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "image data length {} for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(ImageBuf { width, height, channels, data })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(width, height, channels, vec![0.0; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, ch: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, ch: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + ch] = v;
    }

    /// Bilinear sample with zero outside the image; neighbors off the edge
    /// contribute nothing rather than clamping.
    pub fn sample_bilinear(&self, x: f64, y: f64, ch: usize) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let mut acc = 0.0f64;
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            let yy = y0 as i64 + dy;
            if yy < 0 || yy >= self.height as i64 {
                continue;
            }
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                let xx = x0 as i64 + dx;
                if xx < 0 || xx >= self.width as i64 {
                    continue;
                }
                acc += wy * wx * f64::from(self.get(xx as usize, yy as usize, ch));
            }
        }
        acc
    }

    /// Crop the rectangle (x, y, w, h) in source coordinates and resize it
    /// to (out_w, out_h) with bilinear sampling.
    pub fn crop_resize(
        &self,
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        out_w: usize,
        out_h: usize,
    ) -> Result<ImageBuf> {
        if !(w > 0.0 && h > 0.0) || out_w == 0 || out_h == 0 {
            return Err(Error::invalid(format!(
                "crop_resize: degenerate region {w}x{h} -> {out_w}x{out_h}"
            )));
        }
        let mut out = ImageBuf::zeros(out_w, out_h, self.channels)?;
        for oy in 0..out_h {
            let sy = y + (oy as f64 + 0.5) * h / out_h as f64 - 0.5;
            for ox in 0..out_w {
                let sx = x + (ox as f64 + 0.5) * w / out_w as f64 - 0.5;
                for ch in 0..self.channels {
                    out.set(ox, oy, ch, self.sample_bilinear(sx, sy, ch) as f32);
                }
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> ImageBuf {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for ch in 0..self.channels {
                    out.set(x, y, ch, self.get(self.width - 1 - x, y, ch));
                }
            }
        }
        out
    }

    /// Rec. 601 luma. A single-channel image is returned unchanged.
    pub fn luma(&self) -> ImageBuf {
        if self.channels == 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.width * self.height);
        for px in self.data.chunks_exact(3) {
            data.push(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
        }
        ImageBuf {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Luma replicated back onto the original channel count, so shapes stay
    /// stable through a grayscale augmentation.
    pub fn desaturated(&self) -> ImageBuf {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = self.clone();
        for px in out.data.chunks_exact_mut(3) {
            let l = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            px.fill(l);
        }
        out
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    /// Channels-first copy for feeding the network.
    pub fn to_chw(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.data.len()];
        let plane = self.width * self.height;
        for y in 0..self.height {
            for x in 0..self.width {
                for ch in 0..self.channels {
                    out[ch * plane + y * self.width + x] = self.get(x, y, ch);
                }
            }
        }
        out
    }
}
