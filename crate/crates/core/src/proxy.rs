//! Fixed, seeded convolutional feature nets standing in for pretrained
//! perceptual, identity and image-embedding networks.

use crate::error::Result;
use crate::generator::bind_frozen;
use crate::tensor::{Bound, Graph, ParamStore, Rng, Scalar, Tensor, Var};

/// Seed of the perceptual-distance proxy.
pub const LPIPS_SEED: u64 = 0x4c50_4950;
/// Seed of the identity proxy.
pub const ID_SEED: u64 = 0x4944_4e54;
/// Seed of the image-embedding proxy used for direction losses.
pub const EMBED_SEED: u64 = 0x434c_4950;

pub const PROXY_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const EMBED_DIM: usize = 128;

/// Four stride-2 3×3 convs with leaky ReLU; taps after each stage and a
/// spatially averaged `[B, 128]` embedding. Always frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyNet {
    pub seed: u64,
    pub params: ParamStore,
}

/// Graph outputs of a proxy pass.
#[derive(Clone, Debug)]
pub struct ProxyFeatures {
    /// `[B, C_k, h_k, w_k]` per stage.
    pub taps: Vec<Var>,
    /// `[B, 128]`
    pub embedding: Var,
}

impl ProxyNet {
    pub fn new(seed: u64) -> Self {
        let root = Rng::new(seed);
        let mut p = ParamStore::new();
        let mut c_prev = 3;
        for (s, &c) in PROXY_CHANNELS.iter().enumerate() {
            let mut rng = root.fork(s as u64);
            let std = (2.0 / (9 * c_prev) as f64).sqrt();
            p.insert_raw(format!("conv.{s}.weight"), Tensor::randn([c, c_prev, 3, 3], std, &mut rng));
            p.insert_raw(format!("conv.{s}.bias"), Tensor::randn([c], 0.05, &mut rng));
            c_prev = c;
        }
        p.freeze();
        ProxyNet { seed, params: p }
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Bound> {
        bind_frozen(&self.params.cast(), g)
    }

    /// `image` is `[B, 3, R, R]`.
    pub fn features<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<ProxyFeatures> {
        let mut x = image;
        let mut taps = Vec::with_capacity(PROXY_CHANNELS.len());
        for (s, &c) in PROXY_CHANNELS.iter().enumerate() {
            x = g.conv2d(x, p.var(&format!("conv.{s}.weight"))?, 2)?;
            let b = g.reshape(p.var(&format!("conv.{s}.bias"))?, &[1, c, 1, 1])?;
            x = g.add(x, b)?;
            x = g.leaky_relu(x)?;
            taps.push(x);
        }
        let embedding = g.mean(x, &[2, 3], false)?;
        Ok(ProxyFeatures { taps, embedding })
    }

    /// Eager `[B, 128]` embeddings of `[B, 3, R, R]` images.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g)?;
        let x = g.constant(images)?;
        let f = self.features(&mut g, &p, x)?;
        Ok(g.tensor(f.embedding))
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}

/// The perceptual and identity proxies used by reconstruction losses.
#[derive(Clone, Debug, PartialEq)]
pub struct Proxies {
    pub lpips: ProxyNet,
    pub id: ProxyNet,
}

impl Default for Proxies {
    fn default() -> Self {
        Proxies { lpips: ProxyNet::new(LPIPS_SEED), id: ProxyNet::new(ID_SEED) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_is_reproducible() {
        assert_eq!(ProxyNet::new(LPIPS_SEED), ProxyNet::new(LPIPS_SEED));
        assert_ne!(ProxyNet::new(LPIPS_SEED).checksum(), ProxyNet::new(ID_SEED).checksum());
        assert!(ProxyNet::new(1).params.iter().all(|(_, t)| !t.requires_grad()));
    }

    #[test]
    fn embedding_shape() {
        let net = ProxyNet::new(EMBED_SEED);
        let img = Tensor::randn([2, 3, 16, 16], 0.5, &mut Rng::new(1));
        assert_eq!(net.embed(&img).unwrap().shape(), &[2, EMBED_DIM]);
    }
}
