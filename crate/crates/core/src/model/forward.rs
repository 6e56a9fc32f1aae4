use super::{Architecture, MixingGeometry, Session};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Everything a forward pass exposes. Per-level vectors are indexed by
/// `k - 1` for levels `1..=n`, except `levels`, which is indexed by `k`.
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    pub logits: Vec<Var>,
    pub a_n: Var,
    pub x: Var,
    pub backbone: BackboneOutputs,
}

#[derive(Clone, Debug)]
pub struct BackboneOutputs {
    /// Mixing tensors of the center frame, `A_0 ..= A_n`.
    pub levels: Vec<Var>,
    /// Correlation of the center frame with the previous and next frame.
    pub correlations: Vec<(Var, Var)>,
    /// Fused features of each expanding level.
    pub fused: Vec<Var>,
    /// Fused features reduced to `m` channels, ready for mixing.
    pub reduced: Vec<Var>,
}

/// `frame` as a `(1, 1, d, h, w)` tensor, accepting `(d, h, w)` too.
pub fn as_volume<T: Real>(arch: &Architecture, frame: &Tensor<T>) -> Result<Tensor<T>> {
    let [d, h, w] = arch.config.extents;
    match *frame.shape() {
        [fd, fh, fw] | [1, 1, fd, fh, fw] if [fd, fh, fw] == [d, h, w] => {
            frame.clone().reshape(vec![1, 1, d, h, w])
        }
        ref s => Err(Error::shape(format!("frame {s:?} does not match model extents {:?}", arch.config.extents))),
    }
}

fn stem<T: Real>(sess: &mut Session<'_, T>, arch: &Architecture, frame: Var) -> Result<Var> {
    let s = sess.apply(&arch.stem[0], frame)?;
    sess.apply(&arch.stem[1], s)
}

/// Mixing tensor `A_n` and basis tensor `X` of one frame.
pub fn encode<T: Real>(sess: &mut Session<'_, T>, arch: &Architecture, frame: Var) -> Result<(Var, Var)> {
    let s = stem(sess, arch, frame)?;
    let a = sess.apply(&arch.a_head, s)?;
    let mut x = s;
    for layer in &arch.x_head {
        x = sess.apply(layer, x)?;
    }
    Ok((a, x))
}

/// Mixing tensor `A_n` only, for neighbor frames whose basis is not mixed.
pub fn encode_coefficients<T: Real>(sess: &mut Session<'_, T>, arch: &Architecture, frame: Var) -> Result<Var> {
    let s = stem(sess, arch, frame)?;
    sess.apply(&arch.a_head, s)
}

/// Contracting path from `A_n` down to level `lowest`. Entry `i` of the
/// result is `A_{lowest + i}`.
pub fn contract<T: Real>(sess: &mut Session<'_, T>, arch: &Architecture, a_n: Var, lowest: usize) -> Result<Vec<Var>> {
    let n = arch.config.n;
    let mut out = vec![a_n];
    let mut a = a_n;
    for k in (lowest + 1..=n).rev() {
        let (down, conv) = &arch.contracting[k - 1];
        a = sess.apply(down, a)?;
        a = sess.apply(conv, a)?;
        out.push(a);
    }
    out.reverse();
    Ok(out)
}

/// Correlations with both neighbors, computed per coefficient group, and
/// the group-major concatenation `[up_i, corr_prev_i, corr_next_i]`.
fn correlate_and_concat<T: Real>(
    g: &mut Graph<T>,
    arch: &Architecture,
    up: Var,
    center: Var,
    prev: Var,
    next: Var,
) -> Result<(Var, Var, Var)> {
    let groups = arch.config.groups;
    let spec = arch.config.corr;
    if groups == 1 {
        let cp = g.correlation3d(center, prev, spec)?;
        let cn = g.correlation3d(center, next, spec)?;
        let cat = g.concat_channels(&[up, cp, cn])?;
        return Ok((cat, cp, cn));
    }
    let c = g.shape(center)[1] / groups;
    let cu = g.shape(up)[1] / groups;
    let mut parts = Vec::with_capacity(3 * groups);
    let mut cps = Vec::with_capacity(groups);
    let mut cns = Vec::with_capacity(groups);
    for i in 0..groups {
        let ct = g.slice_channels(center, i * c, c)?;
        let pv = g.slice_channels(prev, i * c, c)?;
        let nx = g.slice_channels(next, i * c, c)?;
        let cp = g.correlation3d(ct, pv, spec)?;
        let cn = g.correlation3d(ct, nx, spec)?;
        parts.push(g.slice_channels(up, i * cu, cu)?);
        parts.push(cp);
        parts.push(cn);
        cps.push(cp);
        cns.push(cn);
    }
    let cat = g.concat_channels(&parts)?;
    let cp = g.concat_channels(&cps)?;
    let cn = g.concat_channels(&cns)?;
    Ok((cat, cp, cn))
}

/// Contracting and expanding paths for one triple of level-`n` mixing
/// tensors, ending in the `m`-channel maps that each decoder mixes.
pub fn backbone_forward<T: Real>(
    sess: &mut Session<'_, T>,
    arch: &Architecture,
    prev: Var,
    center: Var,
    next: Var,
) -> Result<BackboneOutputs> {
    let n = arch.config.n;
    let levels = contract(sess, arch, center, 0)?;
    // neighbors only need levels 1..=n; index k - 1
    let prev_levels = contract(sess, arch, prev, 1)?;
    let next_levels = contract(sess, arch, next, 1)?;

    let mut correlations = Vec::with_capacity(n);
    let mut fused = Vec::with_capacity(n);
    let mut reduced = Vec::with_capacity(n);
    let mut up = sess.apply(&arch.bottleneck_up, levels[0])?;
    for k in 1..=n {
        let (cat, cp, cn) = correlate_and_concat(
            &mut sess.graph,
            arch,
            up,
            levels[k],
            prev_levels[k - 1],
            next_levels[k - 1],
        )?;
        let f = sess.apply(&arch.fuse[k - 1], cat)?;
        reduced.push(sess.apply(&arch.reduce[k - 1], f)?);
        correlations.push((cp, cn));
        fused.push(f);
        if k < n {
            up = sess.apply(&arch.up[k - 1], f)?;
        }
    }
    Ok(BackboneOutputs {
        levels,
        correlations,
        fused,
        reduced,
    })
}

/// Transposed convolution of `m`-channel coefficient maps with the basis
/// tensor reshaped to an `(m, u, kd, kh, kw)` kernel bank.
pub fn mix<T: Real>(g: &mut Graph<T>, coeffs: Var, basis: Var, geom: &MixingGeometry, m: usize, u: usize) -> Result<Var> {
    let [kd, kh, kw] = geom.kernel;
    let kernel = g.reshape(basis, &[m, u, kd, kh, kw])?;
    let mixed = g.transposed_conv3d(coeffs, kernel, None, &geom.spec(m, u))?;
    if geom.border == [0; 3] {
        return Ok(mixed);
    }
    let b = geom.border;
    g.pad(mixed, [(b[0], b[0]), (b[1], b[1]), (b[2], b[2])])
}

/// Decoder at `level`: mixing followed by the class-logit convolution.
pub fn decode<T: Real>(sess: &mut Session<'_, T>, arch: &Architecture, coeffs: Var, x: Var, level: usize) -> Result<Var> {
    let c = &arch.config;
    let mixed = mix(&mut sess.graph, coeffs, x, &arch.mixing, c.m, c.u)?;
    let [d, h, w] = c.output_extents(level);
    if sess.graph.shape(mixed) != [1, c.u, d, h, w] {
        return Err(Error::shape(format!(
            "level {level} mixing produced {:?}, expected {:?}",
            sess.graph.shape(mixed),
            [1, c.u, d, h, w]
        )));
    }
    sess.apply(&arch.head[level - 1], mixed)
}

/// Full forward pass over frames `(t-1, t, t+1)`.
pub fn model_forward<T: Real>(
    sess: &mut Session<'_, T>,
    arch: &Architecture,
    frames: [&Tensor<T>; 3],
) -> Result<ModelOutputs> {
    let [p, c, nx] = frames;
    let (p, c, nx) = (as_volume(arch, p)?, as_volume(arch, c)?, as_volume(arch, nx)?);
    let (p, c, nx) = (sess.input(p), sess.input(c), sess.input(nx));
    let a_prev = encode_coefficients(sess, arch, p)?;
    let (a_n, x) = encode(sess, arch, c)?;
    let a_next = encode_coefficients(sess, arch, nx)?;
    let backbone = backbone_forward(sess, arch, a_prev, a_n, a_next)?;
    let mut logits = Vec::with_capacity(arch.config.n);
    for k in 1..=arch.config.n {
        logits.push(decode(sess, arch, backbone.reduced[k - 1], x, k)?);
    }
    Ok(ModelOutputs {
        logits,
        a_n,
        x,
        backbone,
    })
}
