//! Image-to-latent codecs. Images enter in `[0, 1]`; latents are centred.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, ParamStore};
use crate::optim::AdamW;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecKind {
    Identity,
    Patchify { stride: usize },
    TinyAutoencoder { latent_channels: usize, hidden: usize },
}

/// Frozen mapping between images `(B, C, H, W)` and latents `(B, C0, H0, W0)`.
#[derive(Debug, Clone)]
pub enum LatentCodec<T> {
    Identity,
    Patchify { stride: usize },
    TinyAutoencoder(TinyAutoencoder<T>),
}

impl<T: Real> LatentCodec<T> {
    pub fn kind(&self) -> CodecKind {
        match self {
            LatentCodec::Identity => CodecKind::Identity,
            LatentCodec::Patchify { stride } => CodecKind::Patchify { stride: *stride },
            LatentCodec::TinyAutoencoder(ae) => CodecKind::TinyAutoencoder { latent_channels: ae.latent_channels, hidden: ae.hidden },
        }
    }

    /// Latent geometry for images with `channels` bands of size `h x w`.
    pub fn latent_shape(&self, channels: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        match self {
            LatentCodec::Identity => Ok((channels, h, w)),
            LatentCodec::Patchify { stride } => {
                let r = *stride;
                if r == 0 || h % r != 0 || w % r != 0 {
                    return Err(Error::Config(format!("image {h}x{w} not divisible by patch stride {r}")));
                }
                Ok((channels * r * r, h / r, w / r))
            }
            LatentCodec::TinyAutoencoder(ae) => {
                if channels != ae.image_channels || h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Config(format!(
                        "autoencoder expects {} channels and even size, got {channels} x {h}x{w}",
                        ae.image_channels
                    )));
                }
                Ok((ae.latent_channels, h / 2, w / 2))
            }
        }
    }

    pub fn encode(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, h, w) = images.dims4()?;
        self.latent_shape(c, h, w)?;
        let two = T::of(2.0);
        match self {
            LatentCodec::Identity => Ok(images.map(|v| v * two - T::one())),
            LatentCodec::Patchify { stride } => Ok(space_to_depth(&images.map(|v| v * two - T::one()), *stride)),
            LatentCodec::TinyAutoencoder(ae) => ae.encode(images),
        }
    }

    pub fn decode(&self, latents: &Tensor<T>) -> Result<Tensor<T>> {
        let half = T::of(0.5);
        match self {
            LatentCodec::Identity => Ok(latents.map(|v| (v + T::one()) * half)),
            LatentCodec::Patchify { stride } => Ok(depth_to_space(latents, *stride)?.map(|v| (v + T::one()) * half)),
            LatentCodec::TinyAutoencoder(ae) => ae.decode(latents),
        }
    }
}

/// `out[b, c*r*r + dy*r + dx, y, x] = in[b, c, y*r + dy, x*r + dx]`.
pub fn space_to_depth<T: Real>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("rank-4 input");
    let (oh, ow) = (h / r, w / r);
    let mut out = Vec::with_capacity(x.numel());
    let d = x.data();
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    for y in 0..oh {
                        for xx in 0..ow {
                            out.push(d[((b * c + ch) * h + y * r + dy) * w + xx * r + dx]);
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, c * r * r, oh, ow], out).expect("consistent size")
}

pub fn depth_to_space<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, cr, oh, ow) = x.dims4()?;
    if r == 0 || cr % (r * r) != 0 {
        return Err(Error::Shape(format!("{cr} channels not divisible by {r}^2")));
    }
    let c = cr / (r * r);
    let (h, w) = (oh * r, ow * r);
    let mut out = alloc::vec![T::zero(); x.numel()];
    let d = x.data();
    let mut i = 0;
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    for y in 0..oh {
                        for xx in 0..ow {
                            out[((b * c + ch) * h + y * r + dy) * w + xx * r + dx] = d[i];
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

/// Two-conv encoder with one stride-2 downsampling and a mirrored decoder.
#[derive(Debug, Clone)]
pub struct TinyAutoencoder<T> {
    pub store: ParamStore<T>,
    pub image_channels: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    enc1: Conv2d,
    enc2: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
}

impl<T: Real> TinyAutoencoder<T> {
    pub fn new(image_channels: usize, latent_channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = crate::rng(seed);
        let mut store = ParamStore::new();
        let enc1 = Conv2d::same3(&mut store, "codec.enc1", image_channels, hidden, &mut rng);
        let enc2 = Conv2d::new(&mut store, "codec.enc2", hidden, latent_channels, 3, 2, 1, &mut rng);
        let dec1 = Conv2d::same3(&mut store, "codec.dec1", latent_channels, hidden, &mut rng);
        let dec2 = Conv2d::same3(&mut store, "codec.dec2", hidden, image_channels, &mut rng);
        TinyAutoencoder { store, image_channels, latent_channels, hidden, enc1, enc2, dec1, dec2 }
    }

    fn encode_graph(&self, cx: &mut Ctx<'_, T>, x: crate::Var) -> Result<crate::Var> {
        let h = self.enc1.forward(cx, x)?;
        let h = cx.g.silu(h);
        self.enc2.forward(cx, h)
    }

    fn decode_graph(&self, cx: &mut Ctx<'_, T>, z: crate::Var) -> Result<crate::Var> {
        let h = cx.g.upsample_nearest(z, 2)?;
        let h = self.dec1.forward(cx, h)?;
        let h = cx.g.silu(h);
        self.dec2.forward(cx, h)
    }

    pub fn encode(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.store, false);
        let x = cx.constant(images.clone());
        let z = self.encode_graph(&mut cx, x)?;
        Ok(g.value(z).clone())
    }

    pub fn decode(&self, latents: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.store, false);
        let z = cx.constant(latents.clone());
        let x = self.decode_graph(&mut cx, z)?;
        Ok(g.value(x).clone())
    }

    /// Fit by full-batch reconstruction MSE; returns the loss per step. The
    /// codec is frozen afterwards.
    pub fn fit(&mut self, images: &Tensor<T>, steps: usize, lr: f64) -> Result<Vec<f64>> {
        let mut opt = AdamW::new(0.0);
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut g = Graph::new();
            let mut cx = Ctx::new(&mut g, &self.store, true);
            let x = cx.constant(images.clone());
            let z = self.encode_graph(&mut cx, x)?;
            let y = self.decode_graph(&mut cx, z)?;
            let loss = cx.g.mse(y, x)?;
            let grads = cx.g.backward(loss)?;
            let pg = cx.param_grads(&grads);
            let l = cx.g.value(loss).data()[0].f64();
            if !l.is_finite() {
                return Err(Error::NonFinite("autoencoder reconstruction loss".into()));
            }
            losses.push(l);
            opt.step(&mut self.store, &pg, lr);
        }
        self.store.freeze();
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images() -> Tensor<f64> {
        Tensor::from_fn(&[2, 3, 4, 6], |i| ((i * 37) % 11) as f64 / 10.0)
    }

    #[test]
    fn patchify_round_trip() {
        let x = images();
        let codec = LatentCodec::Patchify { stride: 2 };
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 12, 2, 3]);
        let y = codec.decode(&z).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn patchify_layout() {
        let x = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64);
        let z = space_to_depth(&x, 2);
        assert_eq!(z.shape(), &[1, 4, 1, 1]);
        assert_eq!(z.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn identity_and_autoencoder_preserve_shape() {
        let x = images();
        let id = LatentCodec::Identity;
        assert!(id.decode(&id.encode(&x).unwrap()).unwrap().max_abs_diff(&x) < 1e-15);
        let ae = LatentCodec::TinyAutoencoder(TinyAutoencoder::new(3, 4, 8, 1));
        let z = ae.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 4, 2, 3]);
        assert_eq!(ae.decode(&z).unwrap().shape(), x.shape());
    }

    #[test]
    fn indivisible_geometry_rejected() {
        let codec = LatentCodec::<f64>::Patchify { stride: 4 };
        assert!(codec.encode(&images()).is_err());
    }

    #[test]
    fn autoencoder_fit_reduces_loss() {
        let mut ae = TinyAutoencoder::<f32>::new(3, 4, 8, 3);
        let x = Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 13) % 7) as f32 / 6.0);
        let losses = ae.fit(&x, 60, 0.01).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        assert!(ae.store.entries().iter().all(|e| !e.trainable));
    }
}
