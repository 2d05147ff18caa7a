//! Exact Euclidean distance transform of lung masks.
//!
//! Each foreground pixel gets its distance to the nearest background pixel.
//! The mask is treated as if surrounded by a one-pixel background ring, so
//! every foreground pixel has a finite distance. Squared distances come from
//! the separable lower-envelope algorithm (a column pass followed by a row
//! pass), which is exact on the integer grid.

use crate::error::{Error, Result};
use crate::image::{Grid, Mask};

/// Per-pixel distance map, zero outside the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub normalized: bool,
}

impl DistanceMap {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }
}

// Any value larger than the biggest possible squared distance on a padded grid.
const FAR: f64 = 1e20;

/// 1-D squared distance transform of the sampled function `f` (lower envelope
/// of parabolas rooted at each sample).
fn transform_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        loop {
            let p = v[k];
            let pf = p as f64;
            let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf);
            if s <= z[k] {
                // k == 0 always has z[0] = -inf, so this never underflows.
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *slot = d * d + f[v[k]];
    }
}

fn check_binary(mask: &Mask) -> Result<()> {
    if mask.data.len() != mask.height * mask.width {
        return Err(Error::Domain("mask size does not match its dimensions".into()));
    }
    if mask.data.iter().any(|&v| v > 1) {
        return Err(Error::Domain("distance transform needs a binary mask".into()));
    }
    Ok(())
}

/// Exact squared distances from each foreground pixel to the nearest
/// background pixel (outside-of-image counts as background).
pub fn squared_edt(mask: &Mask) -> Result<Grid<u32>> {
    check_binary(mask)?;
    let (h, w) = (mask.height, mask.width);
    let (ph, pw) = (h + 2, w + 2);
    let mut grid = vec![0.0f64; ph * pw];
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) == 1 {
                grid[(r + 1) * pw + c + 1] = FAR;
            }
        }
    }

    let longest = ph.max(pw);
    let mut f = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest + 1];

    for c in 0..pw {
        for r in 0..ph {
            f[r] = grid[r * pw + c];
        }
        transform_1d(&f[..ph], &mut out[..ph], &mut v, &mut z);
        for r in 0..ph {
            grid[r * pw + c] = out[r];
        }
    }
    for r in 0..ph {
        let row = &mut grid[r * pw..(r + 1) * pw];
        f[..pw].copy_from_slice(row);
        transform_1d(&f[..pw], &mut out[..pw], &mut v, &mut z);
        row.copy_from_slice(&out[..pw]);
    }

    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            data.push(grid[(r + 1) * pw + c + 1] as u32);
        }
    }
    Ok(Grid {
        height: h,
        width: w,
        data,
    })
}

/// Unnormalized intrapulmonary distance map.
pub fn intrapulmonary_edt(mask: &Mask) -> Result<DistanceMap> {
    let sq = squared_edt(mask)?;
    Ok(DistanceMap {
        height: sq.height,
        width: sq.width,
        values: sq.data.iter().map(|&d| (d as f64).sqrt() as f32).collect(),
        normalized: false,
    })
}

/// Scales a map so its maximum is 1; the zero map stays zero.
pub fn normalize_map(map: &DistanceMap) -> DistanceMap {
    let max = map.max();
    let values = if max > 0.0 {
        map.values.iter().map(|&v| v / max).collect()
    } else {
        vec![0.0; map.values.len()]
    };
    DistanceMap {
        height: map.height,
        width: map.width,
        values,
        normalized: true,
    }
}
