//! 2D simplex gradient noise with a permutation table drawn from the caller's
//! stream, and its fractal (multi-octave) sum.

use crate::imgrid::Image2D;
use crate::rng::RngState;

const GRAD: [(f64, f64); 12] = [
    (1.0, 1.0),
    (-1.0, 1.0),
    (1.0, -1.0),
    (-1.0, -1.0),
    (1.0, 0.0),
    (-1.0, 0.0),
    (1.0, 0.0),
    (-1.0, 0.0),
    (0.0, 1.0),
    (0.0, -1.0),
    (0.0, 1.0),
    (0.0, -1.0),
];

/// One realisation of the gradient-noise lattice: a shuffled permutation
/// table plus a random coordinate offset.
#[derive(Clone, Debug)]
pub struct GradientNoise {
    perm: [u8; 512],
    offset: (f64, f64),
}

impl GradientNoise {
    pub fn from_rng(rng: &mut RngState) -> Self {
        let mut base: Vec<u8> = (0..=255u8).collect();
        rng.shuffle(&mut base);
        let mut perm = [0u8; 512];
        for i in 0..512 {
            perm[i] = base[i & 255];
        }
        let offset = (rng.range(0.0, 256.0), rng.range(0.0, 256.0));
        Self { perm, offset }
    }

    fn hash(&self, i: i64, j: i64) -> usize {
        let ii = (i & 255) as usize;
        let jj = (j & 255) as usize;
        self.perm[ii + self.perm[jj] as usize] as usize % 12
    }

    /// Noise value at a continuous coordinate, roughly in [-1, 1].
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let f2 = 0.5 * (3f64.sqrt() - 1.0);
        let g2 = (3.0 - 3f64.sqrt()) / 6.0;
        let x = x + self.offset.0;
        let y = y + self.offset.1;

        let s = (x + y) * f2;
        let i = (x + s).floor();
        let j = (y + s).floor();
        let t = (i + j) * g2;
        let x0 = x - (i - t);
        let y0 = y - (j - t);
        let (i1, j1) = if x0 > y0 { (1.0, 0.0) } else { (0.0, 1.0) };
        let x1 = x0 - i1 + g2;
        let y1 = y0 - j1 + g2;
        let x2 = x0 - 1.0 + 2.0 * g2;
        let y2 = y0 - 1.0 + 2.0 * g2;

        let (ii, jj) = (i as i64, j as i64);
        let corners = [
            (x0, y0, self.hash(ii, jj)),
            (x1, y1, self.hash(ii + i1 as i64, jj + j1 as i64)),
            (x2, y2, self.hash(ii + 1, jj + 1)),
        ];
        let total: f64 = corners
            .iter()
            .map(|&(dx, dy, g)| {
                let t = 0.5 - dx * dx - dy * dy;
                if t < 0.0 {
                    0.0
                } else {
                    let (gx, gy) = GRAD[g];
                    t.powi(4) * (gx * dx + gy * dy)
                }
            })
            .sum();
        70.0 * total
    }

    /// Raw layer sampled at pixel coordinates multiplied by `scale`.
    pub(crate) fn layer(&self, width: usize, height: usize, scale: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                out.push(self.sample(x as f64 * scale, y as f64 * scale));
            }
        }
        out
    }
}

/// Rescales to zero mean and unit variance; a constant field becomes zeros.
pub(crate) fn standardize(width: usize, height: usize, values: &[f64]) -> Image2D {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return Image2D::zeros(width, height);
    }
    let sd = var.sqrt();
    Image2D::from_fn(width, height, |x, y| ((values[y * width + x] - mean) / sd) as f32)
}
