//! Single-channel image grids and the small set of numerics the pipeline
//! needs on them: min-max normalization, percentile clipping, separable
//! Gaussian blur with reflect padding, thresholding and 8-connected
//! component labelling.
//!
//! Images are row-major `f32` buffers. Arithmetic that accumulates (blur
//! taps, statistics) is carried out in `f64`.

use crate::error::{Error, Result};

/// A finite-valued 2D grid of intensities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image2D {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                width * height
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("pixel {i} of {width}x{height} image")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        assert!(value.is_finite());
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    ///
    /// Panics if `f` produces a non-finite value.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                assert!(v.is_finite(), "non-finite pixel at ({x}, {y})");
                data.push(v);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(width, height)`
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        assert!(value.is_finite());
        self.data[y * self.width + x] = value;
    }

    /// Elementwise map. Panics if `f` produces a non-finite value.
    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Image2D {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        assert!(data.iter().all(|v| v.is_finite()), "map produced a non-finite value");
        Image2D {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Elementwise combination of two equally sized images.
    pub fn zip_map(&self, other: &Image2D, mut f: impl FnMut(f32, f32) -> f32) -> Result<Image2D> {
        self.ensure_same_dims(other.dims())?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Image2D::new(self.width, self.height, data)
    }

    pub(crate) fn ensure_same_dims(&self, other: (usize, usize)) -> Result<()> {
        if self.dims() != other {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                got: other,
            });
        }
        Ok(())
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.data
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub(crate) fn from_f64(width: usize, height: usize, data: &[f64]) -> Result<Image2D> {
        Image2D::new(width, height, data.iter().map(|&v| v as f32).collect())
    }
}

/// A {0,1} mask over an image grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::invalid(format!(
                "mask buffer of {} values does not fit {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Disk centred on the image with the given diameter as a fraction of
    /// the shorter side.
    pub fn centered_disk(width: usize, height: usize, diameter_fraction: f64) -> Self {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let r = diameter_fraction * width.min(height) as f64 / 2.0;
        Self::from_fn(width, height, |x, y| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            dx * dx + dy * dy <= r * r
        })
    }

    /// Interprets an image holding 0.0/1.0 values as a mask.
    pub fn from_image(img: &Image2D) -> Result<Self> {
        let mut data = Vec::with_capacity(img.len());
        for &v in img.data() {
            if v == 0.0 {
                data.push(false);
            } else if v == 1.0 {
                data.push(true);
            } else {
                return Err(Error::invalid(format!("mask value {v} is neither 0 nor 1")));
            }
        }
        BinaryMask::new(img.width(), img.height(), data)
    }

    pub fn to_image(&self) -> Image2D {
        Image2D {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.ensure_same_dims(other.dims())?;
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        })
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.ensure_same_dims(other.dims())?;
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect(),
        })
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub(crate) fn ensure_same_dims(&self, other: (usize, usize)) -> Result<()> {
        if self.dims() != other {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                got: other,
            });
        }
        Ok(())
    }
}

/// Normalized 1D Gaussian taps for a separable blur.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    taps: Vec<f64>,
}

impl BlurKernel {
    /// Kernel of odd `size` with standard deviation `size / 6`, so that the
    /// window spans roughly three deviations either side.
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size must be odd and positive, got {size}")));
        }
        Ok(Self::gaussian(size / 2, size as f64 / 6.0))
    }

    /// Kernel with an explicit standard deviation, truncated at four deviations.
    pub fn with_sigma(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
        }
        let radius = ((4.0 * sigma).ceil() as usize).max(1);
        Ok(Self::gaussian(radius, sigma))
    }

    fn gaussian(radius: usize, sigma: f64) -> Self {
        let r = radius as isize;
        let raw: Vec<f64> = (-r..=r)
            .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        Self {
            taps: raw.into_iter().map(|w| w / total).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.taps.len()
    }

    pub fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`), valid
/// for any offset.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    if m < n {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian blur with reflect padding.
///
/// The kernel must not be wider than the image.
pub fn gaussian_blur(img: &Image2D, kernel: &BlurKernel) -> Result<Image2D> {
    let (w, h) = img.dims();
    if kernel.size() > w.min(h) {
        return Err(Error::invalid(format!(
            "kernel size {} exceeds image extent {w}x{h}",
            kernel.size()
        )));
    }
    Ok(blur_reflect(img, kernel))
}

/// Blur without the kernel-width restriction; reflection wraps as often as needed.
pub(crate) fn blur_reflect(img: &Image2D, kernel: &BlurKernel) -> Image2D {
    let (w, h) = img.dims();
    let out = blur_f64(img.data(), w, h, kernel);
    Image2D::from_f64(w, h, &out).expect("blur of finite image is finite")
}

pub(crate) fn blur_f64(src: &[f32], w: usize, h: usize, kernel: &BlurKernel) -> Vec<f64> {
    let taps = kernel.taps();
    let r = kernel.radius() as isize;
    let xs: Vec<Vec<usize>> = (0..w as isize)
        .map(|x| (-r..=r).map(|k| reflect_index(x + k, w)).collect())
        .collect();
    let ys: Vec<Vec<usize>> = (0..h as isize)
        .map(|y| (-r..=r).map(|k| reflect_index(y + k, h)).collect())
        .collect();

    let mut horiz = vec![0.0f64; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            horiz[y * w + x] = xs[x]
                .iter()
                .zip(taps)
                .map(|(&sx, &t)| t * row[sx] as f64)
                .sum();
        }
    }
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = ys[y]
                .iter()
                .zip(taps)
                .map(|(&sy, &t)| t * horiz[sy * w + x])
                .sum();
        }
    }
    out
}

/// Min-max rescale to [0, 1]; a constant image maps to all zeros.
pub fn normalize_unit(img: &Image2D) -> Image2D {
    let lo = img.min() as f64;
    let hi = img.max() as f64;
    if hi <= lo {
        return Image2D::zeros(img.width(), img.height());
    }
    let span = hi - lo;
    img.map(|v| ((v as f64 - lo) / span) as f32)
}

/// Nearest-rank percentile: the value at rank `ceil(p/100 * N)` of the sorted data.
pub fn percentile_value(values: &[f32], p: f64) -> Result<f32> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::invalid(format!("percentile must lie in (0, 100], got {p}")));
    }
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Clamps every value above the `p`-th percentile down to it.
pub fn percentile_clip(img: &Image2D, p: f64) -> Result<Image2D> {
    let cap = percentile_value(img.data(), p)?;
    Ok(img.map(|v| v.min(cap)))
}

/// `1` where the value is strictly greater than `th`.
pub fn binarize(img: &Image2D, th: f32) -> BinaryMask {
    BinaryMask {
        width: img.width(),
        height: img.height(),
        data: img.data().iter().map(|&v| v > th).collect(),
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// 8-connected components of the set pixels.
///
/// Each component lists its pixel indices (`y * width + x`) in ascending
/// order; components are ordered by their first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<Vec<usize>> {
    let (w, h) = mask.dims();
    let data = mask.data();
    let mut parent: Vec<usize> = (0..w * h).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !data[i] {
                continue;
            }
            // previously visited neighbours: W, NW, N, NE
            let mut neighbours = [None; 4];
            if x > 0 {
                neighbours[0] = Some(i - 1);
            }
            if y > 0 {
                if x > 0 {
                    neighbours[1] = Some(i - w - 1);
                }
                neighbours[2] = Some(i - w);
                if x + 1 < w {
                    neighbours[3] = Some(i - w + 1);
                }
            }
            for j in neighbours.into_iter().flatten() {
                if data[j] {
                    let a = find(&mut parent, i);
                    let b = find(&mut parent, j);
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut slot = vec![usize::MAX; w * h];
    let mut components: Vec<Vec<usize>> = Vec::new();
    for i in 0..w * h {
        if !data[i] {
            continue;
        }
        let root = find(&mut parent, i);
        if slot[root] == usize::MAX {
            slot[root] = components.len();
            components.push(Vec::new());
        }
        components[slot[root]].push(i);
    }
    components
}
