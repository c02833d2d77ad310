//! Classical comparison methods: an MT-like morphological fill and the
//! identity.

use crate::error::{Error, Result};
use crate::geometry::DistanceMatrix;

/// One Jacobi sweep: every invalid cell with at least one valid neighbour
/// in the `window × window` box takes the median of those neighbours.
/// Returns the number of cells filled.
fn fill_step(values: &mut [f64], valid: &mut [bool], w: usize, h: usize, r: usize) -> usize {
    let prev_v = values.to_vec();
    let prev_m = valid.to_vec();
    let mut filled = 0;
    let mut nb = Vec::with_capacity((2 * r + 1) * (2 * r + 1));
    for i in 0..w {
        for j in 0..h {
            let k = i * h + j;
            if prev_m[k] {
                continue;
            }
            nb.clear();
            for ii in i.saturating_sub(r)..(i + r + 1).min(w) {
                for jj in j.saturating_sub(r)..(j + r + 1).min(h) {
                    let kk = ii * h + jj;
                    if prev_m[kk] {
                        nb.push(prev_v[kk]);
                    }
                }
            }
            if nb.is_empty() {
                continue;
            }
            nb.sort_by(|a, b| a.total_cmp(b));
            let n = nb.len();
            values[k] = if n % 2 == 1 {
                nb[n / 2]
            } else {
                0.5 * (nb[n / 2 - 1] + nb[n / 2])
            };
            valid[k] = true;
            filled += 1;
        }
    }
    filled
}

/// MT-like densification: grow the validity mask by morphological
/// dilation, filling each newly valid cell with the median of its valid
/// neighbours. Originally valid values are never changed and no denoising
/// is done. Stops at a fixpoint or after `iterations` sweeps.
pub fn mt_enhance(dm: &DistanceMatrix, iterations: usize, window: usize) -> Result<DistanceMatrix> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidInput(format!(
            "window must be odd and at least 3, got {window}"
        )));
    }
    let (w, h) = dm.shape();
    let (values, valid) = dm.clone().into_parts();
    let mut v = values.into_vec();
    let mut m = valid.into_vec();
    for _ in 0..iterations {
        if fill_step(&mut v, &mut m, w, h, window / 2) == 0 {
            break;
        }
    }
    DistanceMatrix::new(
        crate::grid::Grid::from_vec(w, h, v)?,
        crate::grid::Grid::from_vec(w, h, m)?,
    )
}

/// [`mt_enhance`] with window 3 and the iteration cap `W + H`.
pub fn mt_default(dm: &DistanceMatrix) -> Result<DistanceMatrix> {
    mt_enhance(dm, dm.w() + dm.h(), 3)
}

pub fn passthrough(dm: &DistanceMatrix) -> DistanceMatrix {
    dm.clone()
}
