//! Brute-force reference implementations shared by the integration tests.
//! They index tensors directly with nested loops and share no code with the
//! library kernels they check.

#![allow(dead_code)]

use icaunet::ops::ConvSpec;
use icaunet::Tensor;

fn at5(shape: &[usize], i: [usize; 5]) -> usize {
    (((i[0] * shape[1] + i[1]) * shape[2] + i[2]) * shape[3] + i[3]) * shape[4] + i[4]
}

/// Seven nested loops over output channel, output voxel and kernel tap.
pub fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let g = spec.groups;
    let cin_g = spec.in_channels / g;
    let cout_g = spec.out_channels / g;
    let out_ext: Vec<usize> = (0..3)
        .map(|a| (xs[2 + a] + 2 * spec.padding[a] - spec.kernel[a]) / spec.stride[a] + 1)
        .collect();
    let os = [1, spec.out_channels, out_ext[0], out_ext[1], out_ext[2]];
    let mut out = vec![0.0; os.iter().product()];
    for oc in 0..spec.out_channels {
        let grp = oc / cout_g;
        for od in 0..os[2] {
            for oh in 0..os[3] {
                for ow in 0..os[4] {
                    let mut acc = b.map(|b| b.data()[oc]).unwrap_or(0.0);
                    for icg in 0..cin_g {
                        for kd in 0..spec.kernel[0] {
                            for kh in 0..spec.kernel[1] {
                                for kw in 0..spec.kernel[2] {
                                    let id = (od * spec.stride[0] + kd) as isize - spec.padding[0] as isize;
                                    let ih = (oh * spec.stride[1] + kh) as isize - spec.padding[1] as isize;
                                    let iw = (ow * spec.stride[2] + kw) as isize - spec.padding[2] as isize;
                                    if id < 0 || ih < 0 || iw < 0 {
                                        continue;
                                    }
                                    let (id, ih, iw) = (id as usize, ih as usize, iw as usize);
                                    if id >= xs[2] || ih >= xs[3] || iw >= xs[4] {
                                        continue;
                                    }
                                    let ic = grp * cin_g + icg;
                                    acc += w.data()[at5(ws, [oc, icg, kd, kh, kw])]
                                        * x.data()[at5(xs, [0, ic, id, ih, iw])];
                                }
                            }
                        }
                    }
                    out[at5(&os, [0, oc, od, oh, ow])] = acc;
                }
            }
        }
    }
    Tensor::new(os.to_vec(), out).unwrap()
}

/// Scatter form: every input voxel stamps its weighted kernel into the output.
pub fn naive_transposed_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let g = spec.groups;
    let cin_g = spec.in_channels / g;
    let cout_g = spec.out_channels / g;
    let full: Vec<usize> = (0..3)
        .map(|a| (xs[2 + a] - 1) * spec.stride[a] + spec.kernel[a])
        .collect();
    let os = [
        1,
        spec.out_channels,
        full[0] - 2 * spec.padding[0],
        full[1] - 2 * spec.padding[1],
        full[2] - 2 * spec.padding[2],
    ];
    let mut out = vec![0.0; os.iter().product()];
    for ic in 0..spec.in_channels {
        let grp = ic / cin_g;
        for id in 0..xs[2] {
            for ih in 0..xs[3] {
                for iw in 0..xs[4] {
                    let xv = x.data()[at5(xs, [0, ic, id, ih, iw])];
                    for ocg in 0..cout_g {
                        for kd in 0..spec.kernel[0] {
                            for kh in 0..spec.kernel[1] {
                                for kw in 0..spec.kernel[2] {
                                    let od = (id * spec.stride[0] + kd) as isize - spec.padding[0] as isize;
                                    let oh = (ih * spec.stride[1] + kh) as isize - spec.padding[1] as isize;
                                    let ow = (iw * spec.stride[2] + kw) as isize - spec.padding[2] as isize;
                                    if od < 0 || oh < 0 || ow < 0 {
                                        continue;
                                    }
                                    let (od, oh, ow) = (od as usize, oh as usize, ow as usize);
                                    if od >= os[2] || oh >= os[3] || ow >= os[4] {
                                        continue;
                                    }
                                    let oc = grp * cout_g + ocg;
                                    out[at5(&os, [0, oc, od, oh, ow])] +=
                                        xv * w.data()[at5(ws, [ic, ocg, kd, kh, kw])];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(os.to_vec(), out).unwrap()
}

/// Direct evaluation of the correlation formula voxel by voxel.
pub fn naive_correlation(f1: &Tensor<f64>, f2: &Tensor<f64>, max_disp: usize) -> Tensor<f64> {
    let s = f1.shape();
    let (c, d, h, w) = (s[1], s[2], s[3], s[4]);
    let win = 2 * max_disp + 1;
    let os = [1, win * win, d, h, w];
    let mut out = vec![0.0; os.iter().product()];
    let dd = max_disp as isize;
    for dh in -dd..=dd {
        for dw in -dd..=dd {
            let ch = ((dh + dd) as usize) * win + (dw + dd) as usize;
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let (ys, xs) = (y as isize + dh, x as isize + dw);
                        if ys < 0 || xs < 0 || ys >= h as isize || xs >= w as isize {
                            continue;
                        }
                        let mut acc = 0.0;
                        for k in 0..c {
                            acc += f1.data()[at5(s, [0, k, z, y, x])]
                                * f2.data()[at5(s, [0, k, z, ys as usize, xs as usize])];
                        }
                        out[at5(&os, [0, ch, z, y, x])] = acc / c as f64;
                    }
                }
            }
        }
    }
    Tensor::new(os.to_vec(), out).unwrap()
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// O(|P||G|) symmetric Hausdorff distance.
pub fn brute_hausdorff(p: &[[usize; 3]], q: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    let dist = |a: &[usize; 3], b: &[usize; 3]| -> f64 {
        (0..3)
            .map(|k| ((a[k] as f64 - b[k] as f64) * spacing[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter()
            .map(|a| to.iter().map(|b| dist(a, b)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(p, q).max(directed(q, p))
}

/// Pearson correlation of two equal-length samples.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Greedy max-|correlation| matching between the columns of two sample-major
/// matrices. Returns `(column of a, column of b, |corr|)` per matched pair.
pub fn match_columns(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> Vec<(usize, usize, f64)> {
    let cols = |m: &nalgebra::DMatrix<f64>, j: usize| m.column(j).iter().copied().collect::<Vec<_>>();
    let mut pairs = Vec::new();
    for i in 0..a.ncols() {
        for j in 0..b.ncols() {
            pairs.push((i, j, pearson(&cols(a, i), &cols(b, j)).abs()));
        }
    }
    pairs.sort_by(|x, y| y.2.total_cmp(&x.2));
    let mut used_a = vec![false; a.ncols()];
    let mut used_b = vec![false; b.ncols()];
    let mut out = Vec::new();
    for (i, j, c) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j, c));
        }
    }
    out
}

/// Mean over voxels of `logsumexp(z) - z[label]`, one voxel at a time.
pub fn naive_cross_entropy(logits: &Tensor<f64>, labels: &[u8]) -> f64 {
    let c = logits.shape()[1];
    let vol = labels.len();
    let mut total = 0.0;
    for (v, &l) in labels.iter().enumerate() {
        let z: Vec<f64> = (0..c).map(|k| logits.data()[k * vol + v]).collect();
        let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + z.iter().map(|zi| (zi - mx).exp()).sum::<f64>().ln();
        total += lse - z[l as usize];
    }
    total / vol as f64
}

/// `[||X||_1, avg(-alpha log cosh(X/alpha)), ||mean_u(A (x) X) - F||^2]`,
/// mixing with the scatter-form transposed convolution.
pub fn naive_ica_terms(a: &Tensor<f64>, x: &Tensor<f64>, f: &Tensor<f64>, spec: &ConvSpec, alpha: f64) -> [f64; 3] {
    let l1 = x.data().iter().map(|v| v.abs()).sum();
    let neg = x
        .data()
        .iter()
        .map(|v| -alpha * (v / alpha).cosh().ln())
        .sum::<f64>()
        / x.numel() as f64;
    let (m, u) = (spec.in_channels, spec.out_channels);
    let k = spec.kernel;
    let kernel = Tensor::new(vec![m, u, k[0], k[1], k[2]], x.data().to_vec()).unwrap();
    let mixed = naive_transposed_conv3d(a, &kernel, spec);
    let vol = f.numel();
    assert_eq!(mixed.numel(), u * vol);
    let mut rec = 0.0;
    for v in 0..vol {
        let mean = (0..u).map(|o| mixed.data()[o * vol + v]).sum::<f64>() / u as f64;
        rec += (mean - f.data()[v]).powi(2);
    }
    [l1, neg, rec]
}
