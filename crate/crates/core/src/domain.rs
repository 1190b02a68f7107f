//! Seeded image domains: generator samples plus parameterized
//! out-of-domain transforms, with JSON manifests.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::generator::GeneratorBundle;
use crate::tensor::{Rng, Tensor};

/// Pixel transforms on `[3, R, R]` images in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Transform {
    Identity,
    /// Rotation about the gray axis.
    HueRotate { degrees: f64 },
    /// Square of constant value at a seeded position per image.
    Patch { size: usize, value: f64, seed: u64 },
    /// Scales pixel values about mid-gray.
    Contrast { factor: f64 },
    Grayscale,
    Invert,
    /// Applied left to right.
    Chain { steps: Vec<Transform> },
}

/// 3×3 rotation by `degrees` about `(1, 1, 1)/√3`.
pub fn hue_matrix(degrees: f64) -> [[f64; 3]; 3] {
    let t = degrees.to_radians();
    let (c, s) = (t.cos(), t.sin());
    let a = 1.0 / 3.0f64.sqrt();
    let k = (1.0 - c) / 3.0;
    let d = c + k;
    let (p, q) = (k - s * a, k + s * a);
    [[d, p, q], [q, d, p], [p, q, d]]
}

impl Transform {
    /// `key` selects per-image randomness (patch position).
    pub fn apply(&self, img: &Tensor, key: u64) -> Result<Tensor> {
        let s = img.shape();
        ensure!(s.len() == 3 && s[0] == 3, "transform", "image must be [3, R, R], got {:?}", s);
        let (h, w) = (s[1], s[2]);
        let plane = h * w;
        let mut out = img.data().to_vec();
        match self {
            Transform::Identity => {}
            Transform::HueRotate { degrees } => {
                let m = hue_matrix(*degrees);
                let src = img.data();
                for i in 0..plane {
                    let px = [src[i] as f64, src[plane + i] as f64, src[2 * plane + i] as f64];
                    for (c, row) in m.iter().enumerate() {
                        out[c * plane + i] = (row[0] * px[0] + row[1] * px[1] + row[2] * px[2]) as f32;
                    }
                }
            }
            Transform::Patch { size, value, seed } => {
                ensure!(*size <= h && *size <= w, "transform", "patch {} larger than image {}×{}", size, h, w);
                let mut rng = Rng::new(*seed).fork(key);
                let (y0, x0) = (rng.below(h - size + 1), rng.below(w - size + 1));
                for c in 0..3 {
                    for y in y0..y0 + size {
                        for x in x0..x0 + size {
                            out[c * plane + y * w + x] = *value as f32;
                        }
                    }
                }
            }
            Transform::Contrast { factor } => out.iter_mut().for_each(|v| *v = (*v as f64 * factor) as f32),
            Transform::Grayscale => {
                for i in 0..plane {
                    let m = (out[i] + out[plane + i] + out[2 * plane + i]) / 3.0;
                    for c in 0..3 {
                        out[c * plane + i] = m;
                    }
                }
            }
            Transform::Invert => out.iter_mut().for_each(|v| *v = -*v),
            Transform::Chain { steps } => {
                let mut cur = img.clone();
                for t in steps {
                    cur = t.apply(&cur, key)?;
                }
                return Ok(cur);
            }
        }
        Tensor::new(s.to_vec(), out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Seed of the latent this sample was rendered from.
    pub z_seed: u64,
    /// Generator code, `[N_w, D]`.
    pub w_plus: Tensor,
    /// Untransformed render, `[3, R, R]`.
    pub source: Tensor,
    /// Transformed image, `[3, R, R]`.
    pub image: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub transform: Transform,
    pub train_seeds: Vec<u64>,
    pub test_seeds: Vec<u64>,
    pub generator_checksum: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub manifest: Manifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Latent seed of split item `i`: train uses even offsets, test odd ones.
pub fn split_seed(seed: u64, test: bool, i: usize) -> u64 {
    seed.wrapping_mul(1 << 32).wrapping_add(2 * i as u64 + test as u64)
}

pub fn render_sample(bundle: &GeneratorBundle, z_seed: u64, transform: &Transform) -> Result<Sample> {
    let z = Tensor::randn([bundle.config.style_dim], 1.0, &mut Rng::new(z_seed));
    let w = bundle.map_latent(z.data())?;
    let w_plus = bundle.broadcast_w(&w)?;
    let source = bundle.synthesize(&w_plus, None)?;
    let image = transform.apply(&source, z_seed)?;
    Ok(Sample { z_seed, w_plus, source, image })
}

pub fn make_domain(bundle: &GeneratorBundle, seed: u64, n_train: usize, n_test: usize, transform: Transform) -> Result<Domain> {
    ensure!(n_train > 0 && n_test > 0, "make_domain", "split sizes must be positive, got {} and {}", n_train, n_test);
    let train_seeds: Vec<u64> = (0..n_train).map(|i| split_seed(seed, false, i)).collect();
    let test_seeds: Vec<u64> = (0..n_test).map(|i| split_seed(seed, true, i)).collect();
    let train = train_seeds.iter().map(|&s| render_sample(bundle, s, &transform)).collect::<Result<_>>()?;
    let test = test_seeds.iter().map(|&s| render_sample(bundle, s, &transform)).collect::<Result<_>>()?;
    let manifest = Manifest { seed, n_train, n_test, transform, train_seeds, test_seeds, generator_checksum: bundle.checksum() };
    Ok(Domain { manifest, train, test })
}

impl Domain {
    /// Re-renders a domain from its manifest.
    pub fn from_manifest(bundle: &GeneratorBundle, m: &Manifest) -> Result<Self> {
        make_domain(bundle, m.seed, m.n_train, m.n_test, m.transform.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;

    fn bundle() -> GeneratorBundle {
        GeneratorBundle::fixture(
            GeneratorConfig { resolutions: vec![4, 8, 16], channels: vec![8, 8, 8], style_dim: 16, mapping_depth: 2, ..GeneratorConfig::default() },
            0,
        )
        .unwrap()
    }

    #[test]
    fn identity_domain_matches_source() {
        let d = make_domain(&bundle(), 3, 4, 2, Transform::Identity).unwrap();
        assert!(d.train.iter().chain(&d.test).all(|s| s.image == s.source));
    }

    #[test]
    fn splits_are_disjoint() {
        let d = make_domain(&bundle(), 3, 20, 20, Transform::Identity).unwrap();
        for s in &d.manifest.train_seeds {
            assert!(!d.manifest.test_seeds.contains(s));
        }
        assert!(make_domain(&bundle(), 3, 0, 2, Transform::Identity).is_err());
    }

    #[test]
    fn hue_rotation_moves_channel_means_linearly() {
        let b = bundle();
        let d = make_domain(&b, 4, 6, 1, Transform::HueRotate { degrees: 120.0 }).unwrap();
        let m = hue_matrix(120.0);
        let means = |t: &Tensor| -> [f64; 3] {
            let p = t.numel() / 3;
            let mut out = [0.0; 3];
            for (c, o) in out.iter_mut().enumerate() {
                *o = t.data()[c * p..(c + 1) * p].iter().map(|&v| v as f64).sum::<f64>() / p as f64;
            }
            out
        };
        for s in &d.train {
            let (src, dst) = (means(&s.source), means(&s.image));
            for c in 0..3 {
                let expect: f64 = (0..3).map(|k| m[c][k] * src[k]).sum();
                assert!((dst[c] - expect).abs() < 1e-5);
            }
        }
        // 120° permutes the channels
        assert!((m[0][2] - 1.0).abs() < 1e-12 && (m[1][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn manifest_round_trips_through_json() {
        let b = bundle();
        let t = Transform::Chain { steps: vec![Transform::Contrast { factor: 1.5 }, Transform::Patch { size: 4, value: 0.8, seed: 2 }] };
        let d = make_domain(&b, 5, 3, 2, t).unwrap();
        let json = serde_json::to_string(&d.manifest).unwrap();
        let m: Manifest = serde_json::from_str(&json).unwrap();
        assert_eq!(Domain::from_manifest(&b, &m).unwrap(), d);
    }

    #[test]
    fn patch_covers_requested_area() {
        let img = Tensor::zeros([3, 8, 8]);
        let out = Transform::Patch { size: 3, value: 1.0, seed: 1 }.apply(&img, 7).unwrap();
        assert_eq!(out.data().iter().filter(|&&v| v == 1.0).count(), 27);
    }
}
