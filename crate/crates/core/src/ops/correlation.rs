//! In-plane correlation cost volume between two feature maps.
//!
//! Output channel `(dh + D) * (2D + 1) + (dw + D)` holds, at voxel
//! `(z, y, x)`, the channel-averaged product `f1[., z, y, x] * f2[., z, y + dh, x + dw]`.
//! Reads outside the volume contribute zero.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorrSpec {
    pub max_disp: usize,
}

impl Default for CorrSpec {
    fn default() -> Self {
        CorrSpec { max_disp: 3 }
    }
}

impl CorrSpec {
    pub fn new(max_disp: usize) -> Self {
        CorrSpec { max_disp }
    }

    pub fn window(&self) -> usize {
        2 * self.max_disp + 1
    }

    pub fn out_channels(&self) -> usize {
        self.window() * self.window()
    }

    /// Output channel holding displacement `(dh, dw)`.
    pub fn channel_of(&self, dh: isize, dw: isize) -> Option<usize> {
        let d = self.max_disp as isize;
        if dh.abs() > d || dw.abs() > d {
            return None;
        }
        Some(((dh + d) * self.window() as isize + (dw + d)) as usize)
    }

    /// Displacements in output-channel order.
    pub fn displacements(&self) -> impl Iterator<Item = (isize, isize)> + '_ {
        let d = self.max_disp as isize;
        (-d..=d).flat_map(move |dh| (-d..=d).map(move |dw| (dh, dw)))
    }
}

pub(crate) struct CorrGeom {
    pub channels: usize,
    pub extents: [usize; 3],
    pub spec: CorrSpec,
}

impl CorrGeom {
    pub fn new(shape: &[usize], other: &[usize], spec: CorrSpec) -> Result<Self> {
        if shape != other {
            return Err(Error::shape(format!("correlate {shape:?} with {other:?}")));
        }
        match *shape {
            [1, c, d, h, w] => Ok(CorrGeom {
                channels: c,
                extents: [d, h, w],
                spec,
            }),
            _ => Err(Error::shape(format!(
                "correlation expects (1,C,d,h,w), got {shape:?}"
            ))),
        }
    }

    pub fn out_len(&self) -> usize {
        self.spec.out_channels() * self.extents.iter().product::<usize>()
    }

    /// Visit every displacement row: (out channel, plane, y, shifted y, x range, dx).
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, isize)) {
        let [d, h, w] = self.extents;
        for (ch, (dh, dw)) in self.spec.displacements().enumerate() {
            let x_lo = (-dw).max(0) as usize;
            let x_hi = (w as isize - dw.max(0)).max(0) as usize;
            if x_lo >= x_hi {
                continue;
            }
            for z in 0..d {
                for y in 0..h {
                    let ys = y as isize + dh;
                    if ys < 0 || ys >= h as isize {
                        continue;
                    }
                    f(ch, z, y, ys as usize, x_lo, x_hi, dw);
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, f1: &[T], f2: &[T]) -> Vec<T> {
        let [d, h, w] = self.extents;
        let vol = d * h * w;
        let scale = T::one() / T::from_usize(self.channels).unwrap();
        let mut out = vec![T::zero(); self.out_len()];
        self.for_each_row(|ch, z, y, ys, x_lo, x_hi, dw| {
            let o = ch * vol + (z * h + y) * w;
            for c in 0..self.channels {
                let a = c * vol + (z * h + y) * w;
                let b = c * vol + (z * h + ys) * w;
                for x in x_lo..x_hi {
                    let xs = (x as isize + dw) as usize;
                    out[o + x] += f1[a + x] * f2[b + xs];
                }
            }
            for x in x_lo..x_hi {
                out[o + x] *= scale;
            }
        });
        out
    }

    pub fn backward<T: Real>(
        &self,
        f1: &[T],
        f2: &[T],
        grad_out: &[T],
        mut g1: Option<&mut [T]>,
        mut g2: Option<&mut [T]>,
    ) {
        let [d, h, w] = self.extents;
        let vol = d * h * w;
        let scale = T::one() / T::from_usize(self.channels).unwrap();
        self.for_each_row(|ch, z, y, ys, x_lo, x_hi, dw| {
            let o = ch * vol + (z * h + y) * w;
            for c in 0..self.channels {
                let a = c * vol + (z * h + y) * w;
                let b = c * vol + (z * h + ys) * w;
                for x in x_lo..x_hi {
                    let xs = (x as isize + dw) as usize;
                    let go = grad_out[o + x] * scale;
                    if let Some(g1) = g1.as_deref_mut() {
                        g1[a + x] += go * f2[b + xs];
                    }
                    if let Some(g2) = g2.as_deref_mut() {
                        g2[b + xs] += go * f1[a + x];
                    }
                }
            }
        });
    }
}
