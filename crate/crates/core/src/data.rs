//! Synthetic cine phantoms, the ICAV volume format and frame iteration.
//!
//! ICAV layout: `"ICAV" | u32 version = 1 | u8 dtype (0 = f32, 1 = u8) |
//! u8 rank | u32 extents[rank] | payload`, little-endian, row-major.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::binio::{put_u32, to_u32, ByteReader};
use crate::error::{Error, Result};
use crate::ops::Labels;
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 4] = b"ICAV";
pub const VOLUME_VERSION: u32 = 1;

pub const BACKGROUND: u8 = 0;
pub const RV: u8 = 1;
pub const MYO: u8 = 2;
pub const LV: u8 = 3;

/// Mean intensity per class, indexed by class id.
pub const CLASS_INTENSITY: [f32; 4] = [0.1, 0.7, 0.35, 0.95];
/// Noise standard deviation as a fraction of the intensity range.
pub const NOISE_FRACTION: f64 = 0.05;
/// Peak amplitude of the multiplicative bias field.
pub const BIAS_AMPLITUDE: f64 = 0.1;
/// Fractional shrink of the LV radii at mid-cycle.
pub const CONTRACTION: f64 = 0.3;
/// LV in-plane radii at end-diastole as fractions of `(h, w)`.
pub const LV_RADII: [f64; 2] = [0.2, 0.18];
/// Myocardium thickness as a fraction of `min(h, w)`.
pub const MYO_THICKNESS: f64 = 0.1;
/// RV ellipse radii as fractions of `(h, w)` and its horizontal offset
/// from the LV centre as a fraction of `w`.
pub const RV_RADII: [f64; 2] = [0.3, 0.2];
pub const RV_OFFSET: f64 = 0.24;
/// Cross-section scale at the apex relative to the base.
pub const APEX_SCALE: f64 = 0.75;
pub const MIN_IN_PLANE: usize = 32;

/// A cine clip: `T` frames of `(d, h, w)` intensities with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSequence {
    pub frames: Vec<Tensor<f32>>,
    pub labels: Vec<Labels>,
    pub spacing: [f64; 3],
    pub seed: u64,
}

impl VolumeSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn extents(&self) -> [usize; 3] {
        self.labels.first().map(Labels::extents).unwrap_or([0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.labels.len() || self.frames.is_empty() {
            return Err(Error::data(format!(
                "{} frames and {} label volumes",
                self.frames.len(),
                self.labels.len()
            )));
        }
        let e = self.extents();
        for (t, (f, l)) in self.frames.iter().zip(&self.labels).enumerate() {
            if f.shape() != e || l.extents() != e {
                return Err(Error::data(format!("frame {t} extents differ from {e:?}")));
            }
            if l.data().iter().any(|&c| c > LV) {
                return Err(Error::data(format!("frame {t} has labels outside 0..=3")));
            }
        }
        Ok(())
    }
}

/// Label of voxel `(y, x)` in a slice with the given cross-section scale
/// and LV contraction factor.
fn classify(y: f64, x: f64, h: f64, w: f64, scale: f64, beat: f64) -> u8 {
    let (cy, cx) = (h / 2.0, w / 2.0 + 0.05 * w);
    let ry = LV_RADII[0] * h * scale * beat;
    let rx = LV_RADII[1] * w * scale * beat;
    let sq = |v: f64| v * v;
    let e = |ry: f64, rx: f64, oy: f64, ox: f64| sq((y - oy) / ry) + sq((x - ox) / rx);
    if e(ry, rx, cy, cx) <= 1.0 {
        return LV;
    }
    // the wall thickens as the cavity contracts
    let t = MYO_THICKNESS * h.min(w) * scale * (1.0 + 0.5 * (1.0 - beat));
    if e(ry + t, rx + t, cy, cx) <= 1.0 {
        return MYO;
    }
    let rv = e(RV_RADII[0] * h * scale, RV_RADII[1] * w * scale, cy, cx - RV_OFFSET * w * scale);
    if rv <= 1.0 {
        return RV;
    }
    BACKGROUND
}

/// Box-Muller standard normal sample. Uses the pure-Rust libm so results do
/// not depend on the platform's math library.
fn gaussian(rng: &mut Xoshiro256PlusPlus) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * libm::log(u1)).sqrt() * libm::cos(2.0 * std::f64::consts::PI * u2)
}

/// Deterministic beating-heart phantom.
///
/// The LV is an ellipse per slice whose radii follow a cosine cycle over
/// `T`; the myocardium is a shell around it and the RV a crescent against
/// the shell's left side. Slices shrink linearly from base to apex.
/// Intensities are class means times a smooth bias field plus Gaussian
/// noise drawn from a xoshiro256++ stream seeded with `seed`.
pub fn generate_phantom(seed: u64, t: usize, extents: [usize; 3], spacing: [f64; 3]) -> Result<VolumeSequence> {
    let [d, h, w] = extents;
    if t < 3 {
        return Err(Error::data(format!("a phantom needs at least 3 frames, got {t}")));
    }
    if d == 0 || h < MIN_IN_PLANE || w < MIN_IN_PLANE {
        return Err(Error::data(format!(
            "extents {extents:?} too small; in-plane extents must be at least {MIN_IN_PLANE}"
        )));
    }
    let range = (CLASS_INTENSITY[3] - CLASS_INTENSITY[0]) as f64;
    let sigma = NOISE_FRACTION * range;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let (hf, wf) = (h as f64, w as f64);

    let mut frames = Vec::with_capacity(t);
    let mut labels = Vec::with_capacity(t);
    for step in 0..t {
        let phase = 2.0 * std::f64::consts::PI * step as f64 / t as f64;
        let beat = 1.0 - CONTRACTION * (1.0 - libm::cos(phase)) / 2.0;
        let mut lab = Vec::with_capacity(d * h * w);
        let mut img = Vec::with_capacity(d * h * w);
        for z in 0..d {
            let depth = if d > 1 { z as f64 / (d - 1) as f64 } else { 0.0 };
            let scale = 1.0 - (1.0 - APEX_SCALE) * depth;
            for y in 0..h {
                for x in 0..w {
                    let c = classify(y as f64 + 0.5, x as f64 + 0.5, hf, wf, scale, beat);
                    let bias = 1.0
                        + BIAS_AMPLITUDE
                            * libm::sin(std::f64::consts::PI * y as f64 / hf)
                            * libm::cos(std::f64::consts::PI * x as f64 / wf);
                    let v = CLASS_INTENSITY[c as usize] as f64 * bias + sigma * gaussian(&mut rng);
                    lab.push(c);
                    img.push(v as f32);
                }
            }
        }
        frames.push(Tensor::new(vec![d, h, w], img)?);
        labels.push(Labels::new(extents, lab)?);
    }
    Ok(VolumeSequence {
        frames,
        labels,
        spacing,
        seed,
    })
}

/// Zero mean, unit variance; a constant frame maps to zeros.
pub fn normalize(frame: &Tensor<f32>) -> Tensor<f32> {
    let n = frame.numel() as f64;
    let mean = frame.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = frame.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if var <= f64::EPSILON * mean.abs().max(1.0) {
        return Tensor::zeros(frame.shape().to_vec());
    }
    let inv = 1.0 / var.sqrt();
    frame.map(|v| ((v as f64 - mean) * inv) as f32)
}

/// Center frame `t` with its neighbors; boundary frames replicate the
/// missing neighbor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triple {
    pub prev: usize,
    pub center: usize,
    pub next: usize,
}

impl Triple {
    pub fn around(t: usize, len: usize) -> Self {
        Triple {
            prev: t.saturating_sub(1),
            center: t,
            next: (t + 1).min(len - 1),
        }
    }

    pub fn frames<'a>(&self, seq: &'a VolumeSequence) -> [&'a Tensor<f32>; 3] {
        [&seq.frames[self.prev], &seq.frames[self.center], &seq.frames[self.next]]
    }

    pub fn labels<'a>(&self, seq: &'a VolumeSequence) -> &'a Labels {
        &seq.labels[self.center]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    Sequential,
    Shuffled(u64),
}

/// One triple per frame, in time order or a seeded permutation.
pub fn iterate_triples(len: usize, order: Order) -> Vec<Triple> {
    let mut idx: Vec<usize> = (0..len).collect();
    if let Order::Shuffled(seed) = order {
        idx.shuffle(&mut Xoshiro256PlusPlus::seed_from_u64(seed));
    }
    idx.into_iter().map(|t| Triple::around(t, len)).collect()
}

/// Contents of an ICAV file.
#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    F32(Tensor<f32>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Volume {
    pub fn shape(&self) -> &[usize] {
        match self {
            Volume::F32(t) => t.shape(),
            Volume::U8 { shape, .. } => shape,
        }
    }

    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            Volume::F32(t) => Ok(t),
            Volume::U8 { .. } => Err(Error::data("expected an f32 volume, found u8")),
        }
    }

    pub fn into_labels(self) -> Result<Labels> {
        match self {
            Volume::U8 { shape, data } if shape.len() == 3 => Labels::new([shape[0], shape[1], shape[2]], data),
            Volume::U8 { shape, .. } => Err(Error::data(format!("label volume must be 3-D, got {shape:?}"))),
            Volume::F32(_) => Err(Error::data("expected a u8 label volume, found f32")),
        }
    }
}

impl From<&Labels> for Volume {
    fn from(l: &Labels) -> Self {
        Volume::U8 {
            shape: l.extents().to_vec(),
            data: l.data().to_vec(),
        }
    }
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let shape = v.shape();
    if shape.is_empty() || shape.len() > 255 {
        return Err(Error::shape(format!("cannot store rank {}", shape.len())));
    }
    let mut out = Vec::new();
    out.extend_from_slice(VOLUME_MAGIC);
    put_u32(&mut out, VOLUME_VERSION);
    out.push(match v {
        Volume::F32(_) => 0,
        Volume::U8 { .. } => 1,
    });
    out.push(shape.len() as u8);
    for &e in shape {
        put_u32(&mut out, to_u32(e, "extent")?);
    }
    match v {
        Volume::F32(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Volume::U8 { data, .. } => {
            if data.len() != shape.iter().product::<usize>() {
                return Err(Error::shape("u8 payload does not match its extents"));
            }
            out.extend_from_slice(data)
        }
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(VOLUME_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VOLUME_VERSION {
        return Err(Error::format(at, format!("unsupported volume version {version}")));
    }
    let at = r.offset();
    let dtype = r.u8("dtype")?;
    if dtype > 1 {
        return Err(Error::format(at, format!("unknown dtype code {dtype}")));
    }
    let at = r.offset();
    let rank = r.u8("rank")? as usize;
    if rank == 0 {
        return Err(Error::format(at, "rank 0 volume"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("extent")? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::format(at, format!("invalid extents {shape:?}")))?;
    let v = if dtype == 0 {
        Volume::F32(Tensor::new(shape, r.f32s(numel, "payload")?).expect("size checked"))
    } else {
        Volume::U8 {
            data: r.take(numel, "payload")?.to_vec(),
            shape,
        }
    };
    r.finish()?;
    Ok(v)
}

pub fn save_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v)?)?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

pub fn frame_file_name(t: usize) -> String {
    format!("t{t:04}.icav")
}

/// Write `frames/t####.icav`, `labels/t####.icav` and `meta.txt` under `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, seq: &VolumeSequence) -> Result<()> {
    seq.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("frames"))?;
    fs::create_dir_all(dir.join("labels"))?;
    for (t, (f, l)) in seq.frames.iter().zip(&seq.labels).enumerate() {
        save_volume(dir.join("frames").join(frame_file_name(t)), &Volume::F32(f.clone()))?;
        save_volume(dir.join("labels").join(frame_file_name(t)), &Volume::from(l))?;
    }
    let [d, h, w] = seq.extents();
    let [sd, sh, sw] = seq.spacing;
    let meta = format!(
        "T={}\nd={d}\nh={h}\nw={w}\nspacing={sd},{sh},{sw}\nseed={}\n",
        seq.len(),
        seq.seed
    );
    fs::write(dir.join("meta.txt"), meta)?;
    Ok(())
}

fn meta_value<'a>(meta: &'a str, key: &str) -> Result<&'a str> {
    meta.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
        .ok_or_else(|| Error::data(format!("meta.txt lacks {key}")))
}

fn meta_usize(meta: &str, key: &str) -> Result<usize> {
    meta_value(meta, key)?
        .parse()
        .map_err(|_| Error::data(format!("meta.txt has a bad {key}")))
}

/// Inverse of [`save_dataset`]. A directory without labels loads with
/// all-background labels.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<VolumeSequence> {
    let dir = dir.as_ref();
    let meta = fs::read_to_string(dir.join("meta.txt"))
        .map_err(|e| Error::data(format!("cannot read {}: {e}", dir.join("meta.txt").display())))?;
    let t = meta_usize(&meta, "T")?;
    let extents = [meta_usize(&meta, "d")?, meta_usize(&meta, "h")?, meta_usize(&meta, "w")?];
    let spacing: Vec<f64> = meta_value(&meta, "spacing")?
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::data("meta.txt has a bad spacing"))?;
    let spacing: [f64; 3] = spacing
        .try_into()
        .map_err(|_| Error::data("spacing needs three values"))?;
    let seed = meta_value(&meta, "seed").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut frames = Vec::with_capacity(t);
    let mut labels = Vec::with_capacity(t);
    for i in 0..t {
        frames.push(load_volume(dir.join("frames").join(frame_file_name(i)))?.into_f32()?);
        let lp = dir.join("labels").join(frame_file_name(i));
        labels.push(if lp.exists() {
            load_volume(lp)?.into_labels()?
        } else {
            Labels::filled(extents, BACKGROUND)
        });
    }
    let seq = VolumeSequence {
        frames,
        labels,
        spacing,
        seed,
    };
    seq.validate()?;
    if seq.extents() != extents {
        return Err(Error::data(format!("volumes are {:?}, meta.txt says {extents:?}", seq.extents())));
    }
    Ok(seq)
}
