//! Direct 3-D convolution and transposed convolution kernels.
//!
//! Both operations share one geometry walker: a convolution maps a "wide"
//! tensor (its input) onto a "narrow" tensor (its output), and the transposed
//! convolution is the adjoint of that map, so it walks the same index pairs
//! with the roles of input and output exchanged. Weights use the layout
//! `(narrow_channels, wide_channels / groups, kd, kh, kw)`, which is the
//! conventional layout for both operations.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Geometry of a 3-D convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups: 1,
        }
    }

    /// Default conv block geometry: kernel (1,3,3), stride 1, padding (0,1,1).
    pub fn block(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, [1, 3, 3], [1, 1, 1], [0, 1, 1])
    }

    /// Default trans_conv block geometry: kernel (1,2,2), stride (1,2,2), no padding.
    pub fn trans_block(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, [1, 2, 2], [1, 2, 2], [0, 0, 0])
    }

    /// Pointwise (1x1x1) convolution.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, [1, 1, 1], [1, 1, 1], [0, 0, 0])
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(Error::shape(format!("degenerate conv spec {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::shape(format!(
                "groups {} must divide channels {} -> {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::shape(format!(
                "zero kernel or stride in {self:?}"
            )));
        }
        Ok(())
    }

    /// Weight shape of the forward convolution: `(out, in/groups, k...)`.
    pub fn weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [self.out_channels, self.in_channels / self.groups, kd, kh, kw]
    }

    /// Weight shape of the transposed convolution: `(in, out/groups, k...)`.
    pub fn transposed_weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [self.in_channels, self.out_channels / self.groups, kd, kh, kw]
    }

    /// Spatial output extents of the convolution; each must be integral.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.padding[a];
            if span < self.kernel[a] {
                return Err(Error::shape(format!(
                    "axis {a}: kernel {} exceeds padded extent {span}",
                    self.kernel[a]
                )));
            }
            let rem = span - self.kernel[a];
            if rem % self.stride[a] != 0 {
                return Err(Error::shape(format!(
                    "axis {a}: ({} - {} + 2*{}) / {} is not integral",
                    input[a], self.kernel[a], self.padding[a], self.stride[a]
                )));
            }
            out[a] = rem / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Spatial output extents of the transposed convolution, `(in-1)s + k - 2p`.
    pub fn transposed_output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a];
            if full <= 2 * self.padding[a] {
                return Err(Error::shape(format!(
                    "axis {a}: padding {} consumes the whole output",
                    self.padding[a]
                )));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }
}

/// Index geometry shared by the convolution and its adjoint.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Walk {
    pub wide_channels: usize,
    pub narrow_channels: usize,
    pub groups: usize,
    pub wide: [usize; 3],
    pub narrow: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Walk {
    pub fn conv(spec: &ConvSpec, input: [usize; 3]) -> Result<Self> {
        spec.validate()?;
        Ok(Walk {
            wide_channels: spec.in_channels,
            narrow_channels: spec.out_channels,
            groups: spec.groups,
            wide: input,
            narrow: spec.output_extents(input)?,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
        })
    }

    pub fn transposed(spec: &ConvSpec, input: [usize; 3]) -> Result<Self> {
        spec.validate()?;
        let output = spec.transposed_output_extents(input)?;
        Ok(Walk {
            wide_channels: spec.out_channels,
            narrow_channels: spec.in_channels,
            groups: spec.groups,
            wide: output,
            narrow: input,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
        })
    }

    pub fn wide_len(&self) -> usize {
        self.wide_channels * self.wide.iter().product::<usize>()
    }

    pub fn narrow_len(&self) -> usize {
        self.narrow_channels * self.narrow.iter().product::<usize>()
    }

    pub fn weight_len(&self) -> usize {
        self.narrow_channels * (self.wide_channels / self.groups) * self.kernel.iter().product::<usize>()
    }

    /// Visit every contiguous run of (narrow, wide) index pairs coupled by a
    /// single weight. The callback receives the weight index, the narrow
    /// offset, the wide offset, the run length and the wide-side step.
    #[inline]
    pub fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let [wd, wh, ww] = self.wide;
        let [nd, nh, nw] = self.narrow;
        let [kd, kh, kw] = self.kernel;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.padding;
        let narrow_per_group = self.narrow_channels / self.groups;
        let wide_per_group = self.wide_channels / self.groups;
        let wide_vol = wd * wh * ww;
        let narrow_vol = nd * nh * nw;

        for g in 0..self.groups {
            for oc in g * narrow_per_group..(g + 1) * narrow_per_group {
                for icg in 0..wide_per_group {
                    let ic = g * wide_per_group + icg;
                    for zd in 0..kd {
                        for zh in 0..kh {
                            for zw in 0..kw {
                                let widx = (((oc * wide_per_group + icg) * kd + zd) * kh + zh) * kw + zw;
                                let (lo, hi) = valid_range(nw, ww, zw, sw, pw);
                                if lo >= hi {
                                    continue;
                                }
                                let count = hi - lo;
                                let iw0 = lo * sw + zw - pw;
                                for od in 0..nd {
                                    let id = od * sd + zd;
                                    if id < pd || id - pd >= wd {
                                        continue;
                                    }
                                    let id = id - pd;
                                    for oh in 0..nh {
                                        let ih = oh * sh + zh;
                                        if ih < ph || ih - ph >= wh {
                                            continue;
                                        }
                                        let ih = ih - ph;
                                        let n_off = oc * narrow_vol + (od * nh + oh) * nw + lo;
                                        let w_off = ic * wide_vol + (id * wh + ih) * ww + iw0;
                                        f(widx, n_off, w_off, count, sw);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Narrow indices `o` in `[lo, hi)` whose wide index `o*s + k - p` lies in `[0, wide)`.
#[inline]
fn valid_range(narrow: usize, wide: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let top = wide + p;
    let hi = if top <= k {
        0
    } else {
        ((top - k - 1) / s + 1).min(narrow)
    };
    (lo, hi.max(lo))
}

/// narrow[...] += weight * wide[...] (convolution forward, transposed backward-data).
pub(crate) fn gather<T: Real>(walk: &Walk, wide: &[T], weight: &[T], narrow: &mut [T]) {
    walk.for_each_run(|wi, n_off, w_off, count, step| {
        let wv = weight[wi];
        let dst = &mut narrow[n_off..n_off + count];
        if step == 1 {
            for (d, &s) in dst.iter_mut().zip(&wide[w_off..w_off + count]) {
                *d += wv * s;
            }
        } else {
            for (d, &s) in dst.iter_mut().zip(wide[w_off..].iter().step_by(step)) {
                *d += wv * s;
            }
        }
    });
}

/// wide[...] += weight * narrow[...] (convolution backward-data, transposed forward).
pub(crate) fn scatter<T: Real>(walk: &Walk, narrow: &[T], weight: &[T], wide: &mut [T]) {
    walk.for_each_run(|wi, n_off, w_off, count, step| {
        let wv = weight[wi];
        let src = &narrow[n_off..n_off + count];
        if step == 1 {
            for (d, &s) in wide[w_off..w_off + count].iter_mut().zip(src) {
                *d += wv * s;
            }
        } else {
            for (d, &s) in wide[w_off..].iter_mut().step_by(step).zip(src) {
                *d += wv * s;
            }
        }
    });
}

/// grad_weight[...] += sum narrow[...] * wide[...] (weight gradient for both directions).
pub(crate) fn correlate<T: Real>(walk: &Walk, narrow: &[T], wide: &[T], grad_weight: &mut [T]) {
    walk.for_each_run(|wi, n_off, w_off, count, step| {
        let src = &narrow[n_off..n_off + count];
        let mut acc = T::zero();
        if step == 1 {
            for (&a, &b) in src.iter().zip(&wide[w_off..w_off + count]) {
                acc += a * b;
            }
        } else {
            for (&a, &b) in src.iter().zip(wide[w_off..].iter().step_by(step)) {
                acc += a * b;
            }
        }
        grad_weight[wi] += acc;
    });
}

/// Fill each channel of a batch-1 map with its bias value.
pub(crate) fn broadcast_bias<T: Real>(bias: &[T], channel_len: usize, out: &mut [T]) {
    for (chunk, &b) in out.chunks_mut(channel_len).zip(bias) {
        chunk.fill(b);
    }
}

/// Per-channel sums of a batch-1 map.
pub(crate) fn channel_sums<T: Real>(data: &[T], channel_len: usize) -> Vec<T> {
    data.chunks(channel_len).map(|c| c.iter().copied().sum()).collect()
}
