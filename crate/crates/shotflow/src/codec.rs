//! Deterministic linear patch codec: the toy stand-in for a causal video VAE.
//!
//! Storyboard shots are packed into a causal frame sequence — the first shot
//! contributes a single frame, every later shot is repeated `T` times — and
//! each frame group is averaged and mapped to a `d×h×w` latent slice by a
//! fixed orthonormal patch projection. Because the projection is linear with
//! orthonormal columns, decoding is its transpose and the round trip is exact
//! (up to float rounding) whenever `d ≥ p²·C`. The generative model under
//! study lives entirely in the transformer; keeping the codec exactly
//! invertible makes every latent-space test checkable in pixel space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// What a latent slice represents within a packed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentLabel {
    /// k-th reference image.
    Ref(usize),
    /// s-th storyboard shot.
    Shot(usize),
}

/// Causally packed frames: frame 0 is shot 0 alone; shot `i ≥ 1` occupies
/// frames `1 + T(i−1) .. 1 + T·i` as `T` identical copies.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub frames: Vec<Image>,
    pub shot_of_frame: Vec<usize>,
}

/// Pack `S` shot images into `1 + T(S−1)` frames.
pub fn pack_shots(shots: &[Image], t_factor: usize) -> Result<FrameSequence> {
    if shots.is_empty() {
        return Err(Error::Contract("pack_shots needs at least one shot".into()));
    }
    if t_factor == 0 {
        return Err(Error::Config("temporal factor T must be ≥ 1".into()));
    }
    let (h, w) = (shots[0].height(), shots[0].width());
    for s in shots {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "pack_shots",
                lhs: vec![CHANNELS, h, w],
                rhs: vec![CHANNELS, s.height(), s.width()],
            });
        }
    }
    let mut frames = Vec::with_capacity(1 + t_factor * (shots.len() - 1));
    let mut shot_of_frame = Vec::with_capacity(frames.capacity());
    frames.push(shots[0].clone());
    shot_of_frame.push(0);
    for (i, shot) in shots.iter().enumerate().skip(1) {
        for _ in 0..t_factor {
            frames.push(shot.clone());
            shot_of_frame.push(i);
        }
    }
    Ok(FrameSequence {
        frames,
        shot_of_frame,
    })
}

/// Fixed projection from `p×p` patches to `d` latent channels.
///
/// Built from a seeded Gaussian matrix whose columns are orthonormalized, so
/// `Wᵀ` is simultaneously the decoder and the pseudo-inverse.
#[derive(Debug, Clone)]
pub struct CodecWeights {
    /// `[d, p²·C]` with orthonormal columns.
    proj: Tensor<f32>,
    pub d: usize,
    pub p: usize,
}

impl CodecWeights {
    /// Construct from a seed. Requires `d ≥ p²·C` so the columns can be
    /// orthonormal and the round trip exact.
    pub fn seeded(seed: u64, d: usize, p: usize) -> Result<Self> {
        let pc = p * p * CHANNELS;
        if d < pc {
            return Err(Error::Config(format!(
                "latent dim {d} < patch dim {pc}: exact decode needs d ≥ p²·C"
            )));
        }
        // Draw in f64, orthonormalize columns by modified Gram-Schmidt,
        // store f32. Gaussian columns in R^d are almost surely independent.
        let mut rng = Rng::seed_from_u64(seed);
        let mut cols: Vec<Vec<f64>> = (0..pc)
            .map(|_| (0..d).map(|_| rng.next_normal()).collect())
            .collect();
        for j in 0..pc {
            for i in 0..j {
                let dot: f64 = cols[j].iter().zip(&cols[i]).map(|(a, b)| a * b).sum();
                for k in 0..d {
                    cols[j][k] -= dot * cols[i][k];
                }
            }
            let norm: f64 = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                return Err(Error::Contract(
                    "degenerate Gaussian draw during orthonormalization".into(),
                ));
            }
            for v in cols[j].iter_mut() {
                *v /= norm;
            }
        }
        let mut data = vec![0.0f32; d * pc];
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[i * pc + j] = v as f32;
            }
        }
        Ok(CodecWeights {
            proj: Tensor::new(vec![d, pc], data)?,
            d,
            p,
        })
    }

    fn check_dims(&self, img: &Image) -> Result<(usize, usize)> {
        let (h, w) = (img.height(), img.width());
        if h % self.p != 0 || w % self.p != 0 {
            return Err(Error::InvalidShape {
                shape: vec![CHANNELS, h, w],
                reason: format!("image dims must be divisible by patch size {}", self.p),
            });
        }
        Ok((h / self.p, w / self.p))
    }

    /// Project one image to a `[d, h, w]` latent slice. Patch vectors are
    /// laid out channel-major: `(c, py, px)` row-major within the patch.
    fn encode_image_slice(&self, img: &Image) -> Result<Tensor<f32>> {
        let (h, w) = self.check_dims(img)?;
        let p = self.p;
        let pc = p * p * CHANNELS;
        let wdat = self.proj.data();
        let mut out = Tensor::zeros(vec![self.d, h, w]);
        let mut patch = vec![0.0f32; pc];
        for gy in 0..h {
            for gx in 0..w {
                let mut i = 0;
                for c in 0..CHANNELS {
                    for py in 0..p {
                        for px in 0..p {
                            patch[i] = img.get(c, gy * p + py, gx * p + px);
                            i += 1;
                        }
                    }
                }
                for ch in 0..self.d {
                    let row = &wdat[ch * pc..(ch + 1) * pc];
                    let mut acc = 0.0f32;
                    for (a, b) in row.iter().zip(&patch) {
                        acc += a * b;
                    }
                    out.set(&[ch, gy, gx], acc);
                }
            }
        }
        Ok(out)
    }

    /// Encode a packed frame sequence to `[s, d, h, w]`. Latent slice 0 comes
    /// from frame 0 alone; slice `i ≥ 1` from the mean of its `T` frames —
    /// each slice therefore depends only on its own shot's pixels.
    pub fn encode_seq(&self, seq: &FrameSequence) -> Result<Tensor<f32>> {
        if seq.frames.is_empty() {
            return Err(Error::Contract("empty frame sequence".into()));
        }
        let s = *seq.shot_of_frame.last().unwrap() + 1;
        // Validate the 1 + T(S−1) structure.
        if s > 1 {
            let t_factor = (seq.frames.len() - 1) / (s - 1);
            if t_factor == 0 || 1 + t_factor * (s - 1) != seq.frames.len() {
                return Err(Error::Contract(format!(
                    "frame count {} is not of the form 1 + T(S−1) for S={}",
                    seq.frames.len(),
                    s
                )));
            }
        } else if seq.frames.len() != 1 {
            return Err(Error::Contract(
                "single-shot sequence must have exactly one frame".into(),
            ));
        }
        let mut slices = Vec::with_capacity(s);
        for shot in 0..s {
            let group: Vec<&Image> = seq
                .frames
                .iter()
                .zip(&seq.shot_of_frame)
                .filter(|(_, &sf)| sf == shot)
                .map(|(f, _)| f)
                .collect();
            let mean = mean_images(&group)?;
            slices.push(self.encode_image_slice(&mean)?);
        }
        stack_slices(&slices)
    }

    /// Encode shot images directly (pack + encode).
    pub fn encode_shots(&self, shots: &[Image], t_factor: usize) -> Result<Tensor<f32>> {
        self.encode_seq(&pack_shots(shots, t_factor)?)
    }

    /// Encode a single reference image independently → `[1, d, h, w]`.
    pub fn encode_reference(&self, img: &Image) -> Result<Tensor<f32>> {
        let slice = self.encode_image_slice(img)?;
        let mut shape = vec![1];
        shape.extend_from_slice(slice.shape());
        slice.reshaped(shape)
    }

    /// Decode `[s, d, h, w]` latents back to images via the transposed
    /// projection.
    pub fn decode(&self, latents: &Tensor<f32>) -> Result<Vec<Image>> {
        let sh = latents.shape();
        if sh.len() != 4 || sh[1] != self.d {
            return Err(Error::InvalidShape {
                shape: sh.to_vec(),
                reason: format!("expected [s, {}, h, w] latents", self.d),
            });
        }
        let (s, h, w) = (sh[0], sh[2], sh[3]);
        let p = self.p;
        let pc = p * p * CHANNELS;
        let wdat = self.proj.data();
        let mut out = Vec::with_capacity(s);
        for si in 0..s {
            let mut img = Image::new(h * p, w * p);
            let mut patch = vec![0.0f32; pc];
            for gy in 0..h {
                for gx in 0..w {
                    patch.fill(0.0);
                    for ch in 0..self.d {
                        let z = latents.at(&[si, ch, gy, gx]);
                        if z == 0.0 {
                            continue;
                        }
                        let row = &wdat[ch * pc..(ch + 1) * pc];
                        for (pv, &wv) in patch.iter_mut().zip(row) {
                            *pv += z * wv;
                        }
                    }
                    let mut i = 0;
                    for c in 0..CHANNELS {
                        for py in 0..p {
                            for px in 0..p {
                                img.set(c, gy * p + py, gx * p + px, patch[i]);
                                i += 1;
                            }
                        }
                    }
                }
            }
            out.push(img);
        }
        Ok(out)
    }
}

fn mean_images(group: &[&Image]) -> Result<Image> {
    let first = group
        .first()
        .ok_or_else(|| Error::Contract("empty frame group".into()))?;
    // pack_shots always builds groups of identical copies, and for those the
    // arithmetic mean IS the image — take that path exactly (summation would
    // reintroduce ~1 ulp of rounding and break bit-level locality checks).
    if group[1..].iter().all(|img| *img == *first) {
        return Ok((*first).clone());
    }
    let (h, w) = (first.height(), first.width());
    let n = group.len() as f32;
    let mut acc = Image::new(h, w);
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let sum: f32 = group.iter().map(|img| img.get(c, y, x)).sum();
                acc.set(c, y, x, sum / n);
            }
        }
    }
    Ok(acc)
}

fn stack_slices(slices: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let inner = slices[0].shape().to_vec();
    let mut data = Vec::with_capacity(slices.len() * slices[0].numel());
    for s in slices {
        data.extend_from_slice(s.data());
    }
    let mut shape = vec![slices.len()];
    shape.extend(inner);
    Tensor::new(shape, data)
}
