//! Frequency-domain feature transforms for the expert routers.
//!
//! Every transform is a fixed linear map from a length-`d` hidden state to a
//! length-`d` feature vector, so gradients flow through to the hidden state
//! while the transform itself is never trained.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RowMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTransformKind {
    Fft,
    Dct,
    #[serde(alias = "random")]
    RandomProjection,
    None,
}

impl FeatureTransformKind {
    pub const ALL: [FeatureTransformKind; 4] = [
        FeatureTransformKind::Fft,
        FeatureTransformKind::Dct,
        FeatureTransformKind::RandomProjection,
        FeatureTransformKind::None,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FeatureTransformKind::Fft => "fft",
            FeatureTransformKind::Dct => "dct",
            FeatureTransformKind::RandomProjection => "random",
            FeatureTransformKind::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fft" => Some(Self::Fft),
            "dct" => Some(Self::Dct),
            "random" | "random_projection" => Some(Self::RandomProjection),
            "none" => Some(Self::None),
            _ => None,
        }
    }
}

impl fmt::Display for FeatureTransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Iterative Cooley-Tukey transform, unnormalized, forward sign.
pub fn fft_radix2(x: &[Complex64]) -> Result<Vec<Complex64>> {
    let plan = FftPlan::new(x.len())?;
    let mut a = x.to_vec();
    plan.run(&mut a);
    Ok(a)
}

/// Bit-reversal order and twiddles for one power-of-two length, so repeated
/// transforms of the same width skip the trigonometry.
#[derive(Clone, Debug)]
pub struct FftPlan {
    bits: u32,
    /// `e^{-2πik/n}` for `k < n/2`. Stage `len` uses every `(n/len)`-th entry,
    /// whose angle is bitwise the same as `-2πj/len` since the ratio is a power of two.
    twiddles: Vec<Complex64>,
}

impl FftPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::Length { len: n });
        }
        // Twiddles from exact angles; a running product drifts past 1e-12 at n=1024.
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        Ok(Self {
            bits: n.trailing_zeros(),
            twiddles,
        })
    }

    pub fn len(&self) -> usize {
        1 << self.bits
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Transforms `a` in place. Panics if `a.len()` differs from the plan.
    pub fn run(&self, a: &mut [Complex64]) {
        let n = self.len();
        assert_eq!(a.len(), n, "fft plan length");
        if self.bits > 0 {
            for i in 0..n {
                let j = i.reverse_bits() >> (usize::BITS - self.bits);
                if i < j {
                    a.swap(i, j);
                }
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let u = a[start + k];
                    let v = a[start + k + half] * self.twiddles[k * stride];
                    a[start + k] = u + v;
                    a[start + k + half] = u - v;
                }
            }
            len <<= 1;
        }
    }
}

/// Direct O(L²) evaluation of the DFT definition.
pub fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, v)| {
                    let phase = ((k * t) % n) as f64 / n as f64;
                    v * Complex64::from_polar(1.0, -2.0 * PI * phase)
                })
                .sum()
        })
        .collect()
}

/// A concrete, dimension-bound feature transform.
#[derive(Clone)]
pub struct FeatureTransform {
    kind: FeatureTransformKind,
    dim: usize,
    seed: u64,
    /// Row-major `dim×dim` matrix `M` with `f = M·h` (DCT and random kinds).
    matrix: Option<Arc<Vec<f64>>>,
    plan: Option<Arc<FftPlan>>,
}

impl fmt::Debug for FeatureTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureTransform")
            .field("kind", &self.kind)
            .field("dim", &self.dim)
            .field("seed", &self.seed)
            .finish()
    }
}

impl PartialEq for FeatureTransform {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.dim == other.dim && self.seed == other.seed
    }
}

impl FeatureTransform {
    pub fn new(kind: FeatureTransformKind, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        let matrix = match kind {
            FeatureTransformKind::Fft => {
                if !dim.is_power_of_two() {
                    return Err(Error::Config(format!(
                        "fft routing features need a power-of-two width, got {dim}"
                    )));
                }
                None
            }
            FeatureTransformKind::Dct => {
                let mut m = vec![0.0; dim * dim];
                for k in 0..dim {
                    for n in 0..dim {
                        m[k * dim + n] = (PI / dim as f64 * (n as f64 + 0.5) * k as f64).cos();
                    }
                }
                Some(Arc::new(m))
            }
            FeatureTransformKind::RandomProjection => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = (0..dim * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                Some(Arc::new(m))
            }
            FeatureTransformKind::None => None,
        };
        let plan = match kind {
            FeatureTransformKind::Fft => Some(Arc::new(FftPlan::new(dim)?)),
            _ => None,
        };
        Ok(Self {
            kind,
            dim,
            seed,
            matrix,
            plan,
        })
    }

    pub fn kind(&self) -> FeatureTransformKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The frozen projection matrix, for the kinds that have one.
    pub fn matrix(&self) -> Option<&[f64]> {
        self.matrix.as_deref().map(Vec::as_slice)
    }

    fn fft_real(&self, x: &[f64], out: &mut [f64]) {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.plan.as_ref().expect("fft kind carries a plan").run(&mut buf);
        for (o, c) in out.iter_mut().zip(&buf) {
            *o = c.re;
        }
    }
}

impl RowMap for FeatureTransform {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        match self.kind {
            FeatureTransformKind::Fft => self.fft_real(x, out),
            FeatureTransformKind::None => out.fill(0.0),
            _ => {
                let m = self.matrix.as_ref().expect("matrix kinds carry a matrix");
                for (k, o) in out.iter_mut().enumerate() {
                    *o = m[k * self.dim..(k + 1) * self.dim].iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
        }
    }

    fn apply_transpose(&self, g: &[f64], out: &mut [f64]) {
        match self.kind {
            // Re(DFT) is the symmetric cosine matrix, so it is its own transpose.
            FeatureTransformKind::Fft => {
                let mut tmp = vec![0.0; self.dim];
                self.fft_real(g, &mut tmp);
                out.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            }
            FeatureTransformKind::None => {}
            _ => {
                let m = self.matrix.as_ref().expect("matrix kinds carry a matrix");
                for (k, gk) in g.iter().enumerate() {
                    for (o, mk) in out.iter_mut().zip(&m[k * self.dim..(k + 1) * self.dim]) {
                        *o += gk * mk;
                    }
                }
            }
        }
    }
}

/// Applies the transform along the last axis of `h`.
pub fn spectral_features(h: &Tensor, transform: &FeatureTransform) -> Result<Tensor> {
    if h.cols() != transform.dim {
        return Err(Error::Dimension {
            op: "spectral_features",
            lhs: h.shape().to_vec(),
            rhs: vec![transform.dim],
        });
    }
    let mut out = vec![0.0; h.len()];
    for (src, dst) in h.data().chunks(transform.dim).zip(out.chunks_mut(transform.dim)) {
        transform.apply(src, dst);
    }
    Tensor::new(h.shape().to_vec(), out)
}
