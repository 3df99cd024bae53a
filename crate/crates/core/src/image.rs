//! In-memory images, single-channel maps, and the resampling and filtering
//! routines used by the metrics and the anomaly scorer.

use crate::error::{IntraError, Result};

/// Channel-last `H x W x C` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(IntraError::invalid(format!(
                "image {height}x{width}x{channels} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Image::new(height, width, channels, vec![value; height * width * channels]).expect("non-empty image")
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image::new(height, width, channels, data).expect("non-empty image")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
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
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn channel(&self, c: usize) -> Plane {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Plane::new(self.height, self.width, data).expect("channel plane")
    }

    pub fn from_planes(planes: &[Plane]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| IntraError::invalid("no planes"))?;
        if planes
            .iter()
            .any(|p| p.height != first.height || p.width != first.width)
        {
            return Err(IntraError::invalid("planes differ in size"));
        }
        let c = planes.len();
        let mut data = vec![0.0; first.data.len() * c];
        for (ci, p) in planes.iter().enumerate() {
            for (i, &v) in p.data.iter().enumerate() {
                data[i * c + ci] = v;
            }
        }
        Image::new(first.height, first.width, c, data)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let planes: Vec<Plane> = (0..self.channels)
            .map(|c| self.channel(c).resize_bilinear(height, width))
            .collect();
        Image::from_planes(&planes).expect("resized planes")
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(IntraError::invalid("mean_abs_diff: image shapes differ"));
        }
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum();
        Ok(total / self.data.len() as f64)
    }

    /// Broadcasts a single-channel image to `channels` identical channels.
    pub fn broadcast_channels(&self, channels: usize) -> Result<Image> {
        match self.channels {
            c if c == channels => Ok(self.clone()),
            1 => Ok(Image::from_fn(self.height, self.width, channels, |y, x, _| self.get(y, x, 0))),
            c => Err(IntraError::invalid(format!("cannot broadcast {c} channels to {channels}"))),
        }
    }
}

/// Single-channel real-valued map (`H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(IntraError::invalid(format!(
                "plane {height}x{width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Plane { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Plane::new(height, width, vec![value; height * width]).expect("non-empty plane")
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Plane { height, width, data }
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

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn same_shape(&self, other: &Plane) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Plane {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let ys = bilinear_taps(self.height, height);
        let xs = bilinear_taps(self.width, width);
        let mut data = Vec::with_capacity(height * width);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = self.get(y0, x0) as f64 * (1.0 - fx) + self.get(y0, x1) as f64 * fx;
                let bottom = self.get(y1, x0) as f64 * (1.0 - fx) + self.get(y1, x1) as f64 * fx;
                data.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
        Plane { height, width, data }
    }

    /// Correlates with separable `ky x kx` kernels under mirror padding.
    pub fn filter_separable(&self, ky: &[f64], kx: &[f64]) -> Plane {
        let (h, w) = (self.height, self.width);
        let (ry, rx) = ((ky.len() / 2) as isize, (kx.len() / 2) as isize);
        let mut rows = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &k) in kx.iter().enumerate() {
                    let xi = reflect_index(x as isize + i as isize - rx, w);
                    acc += k * self.data[y * w + xi] as f64;
                }
                rows[y * w + x] = acc;
            }
        }
        let mut data = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &k) in ky.iter().enumerate() {
                    let yi = reflect_index(y as isize + i as isize - ry, h);
                    acc += k * rows[yi * w + x];
                }
                data[y * w + x] = acc as f32;
            }
        }
        Plane { height: h, width: w, data }
    }
}

/// `(lower, upper, weight of upper)` source taps for each output coordinate.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Mirror padding without edge repetition (`d c b | a b c d | c b a`),
/// periodic for offsets larger than the extent.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub fn box_kernel(size: usize) -> Vec<f64> {
    vec![1.0 / size as f64; size]
}

/// Normalized 1-D Gaussian taps of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// One of the eight symmetries of the square: `rotation` counter-clockwise
/// quarter turns followed by an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub rotation: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        rotation: 0,
        flip: false,
    };

    pub fn all() -> [Dihedral; 8] {
        std::array::from_fn(Dihedral::from_index)
    }

    pub fn from_index(i: usize) -> Dihedral {
        Dihedral {
            rotation: (i % 4) as u8,
            flip: i >= 4,
        }
    }

    pub fn index(self) -> usize {
        self.rotation as usize + if self.flip { 4 } else { 0 }
    }

    pub fn inverse(self) -> Dihedral {
        if self.flip {
            self
        } else {
            Dihedral {
                rotation: (4 - self.rotation) % 4,
                flip: false,
            }
        }
    }

    /// Where source coordinate `(y, x)` of an `n x n` square lands.
    #[inline]
    pub fn map(self, y: usize, x: usize, n: usize) -> (usize, usize) {
        let (mut y, mut x) = (y, x);
        for _ in 0..self.rotation {
            (y, x) = (n - 1 - x, y);
        }
        if self.flip {
            x = n - 1 - x;
        }
        (y, x)
    }

    pub fn apply(self, image: &Image) -> Result<Image> {
        if image.height != image.width {
            return Err(IntraError::invalid("dihedral transforms need a square image"));
        }
        let n = image.height;
        let c = image.channels;
        let mut out = vec![0.0; image.data.len()];
        for y in 0..n {
            for x in 0..n {
                let (ty, tx) = self.map(y, x, n);
                let src = (y * n + x) * c;
                let dst = (ty * n + tx) * c;
                out[dst..dst + c].copy_from_slice(&image.data[src..src + c]);
            }
        }
        Image::new(n, n, c, out)
    }
}
