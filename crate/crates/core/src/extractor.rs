//! Small differentiable feature extractors mapping raw vectors to features.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng;

/// A parametric map `x = f(m; Θ)` with an exact vector-Jacobian product.
/// Parameters are exposed as one flat vector.
pub trait FeatureExtractor {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn forward(&self, raw: &DVector<f64>) -> DVector<f64>;
    /// Gradient with respect to Θ of a loss whose gradient with respect to
    /// the output is `upstream`.
    fn backward(&self, raw: &DVector<f64>, upstream: &DVector<f64>) -> DVector<f64>;
    fn params(&self) -> DVector<f64>;
    fn set_params(&mut self, params: &DVector<f64>) -> Result<()>;

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Adds `delta` to the parameters.
    fn apply_update(&mut self, delta: &DVector<f64>) -> Result<()> {
        let p = self.params() + delta;
        self.set_params(&p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Identity,
    Linear,
    Mlp,
}

impl fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Linear => "linear",
            Self::Mlp => "mlp",
        })
    }
}

impl FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "linear" => Ok(Self::Linear),
            "mlp" => Ok(Self::Mlp),
            other => Err(Error::Config(format!("unknown extractor `{other}`"))),
        }
    }
}

/// The built-in extractors.
#[derive(Debug, Clone, PartialEq)]
pub enum Extractor {
    Identity { dim: usize },
    /// `x = W m`.
    Linear { weights: DMatrix<f64> },
    /// `x = W₂ relu(W₁ m + b₁) + b₂`.
    Mlp {
        w1: DMatrix<f64>,
        b1: DVector<f64>,
        w2: DMatrix<f64>,
        b2: DVector<f64>,
    },
}

fn xavier(rows: usize, cols: usize, r: &mut rng::Rng) -> DMatrix<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| r.random_range(-bound..=bound))
}

impl Extractor {
    pub fn identity(dim: usize) -> Self {
        Self::Identity { dim }
    }

    /// Linear extractor initialised to the identity map.
    pub fn linear(dim: usize) -> Self {
        Self::Linear {
            weights: DMatrix::identity(dim, dim),
        }
    }

    /// Randomly initialised one-hidden-layer ReLU network.
    pub fn mlp(input: usize, hidden: usize, output: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        Self::Mlp {
            w1: xavier(hidden, input, &mut r),
            b1: DVector::from_element(hidden, 0.1),
            w2: xavier(output, hidden, &mut r),
            b2: DVector::zeros(output),
        }
    }

    pub fn build(kind: ExtractorKind, dim: usize, hidden: usize, seed: u64) -> Self {
        match kind {
            ExtractorKind::Identity => Self::identity(dim),
            ExtractorKind::Linear => Self::linear(dim),
            ExtractorKind::Mlp => Self::mlp(dim, hidden, dim, seed),
        }
    }

    pub fn kind(&self) -> ExtractorKind {
        match self {
            Self::Identity { .. } => ExtractorKind::Identity,
            Self::Linear { .. } => ExtractorKind::Linear,
            Self::Mlp { .. } => ExtractorKind::Mlp,
        }
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        match self {
            Self::Identity { dim } => vec![*dim, *dim],
            Self::Linear { weights } => vec![weights.ncols(), weights.nrows()],
            Self::Mlp { w1, w2, .. } => vec![w1.ncols(), w1.nrows(), w2.nrows()],
        }
    }

    /// Rebuilds an extractor from its kind, layer widths and flat parameters.
    pub fn from_parts(kind: ExtractorKind, dims: &[usize], params: &[f64]) -> Result<Self> {
        let mut e = match (kind, dims) {
            (ExtractorKind::Identity, &[a, b]) if a == b => Self::identity(a),
            (ExtractorKind::Linear, &[i, o]) => Self::Linear {
                weights: DMatrix::zeros(o, i),
            },
            (ExtractorKind::Mlp, &[i, h, o]) => Self::Mlp {
                w1: DMatrix::zeros(h, i),
                b1: DVector::zeros(h),
                w2: DMatrix::zeros(o, h),
                b2: DVector::zeros(o),
            },
            _ => return Err(Error::Format(format!("bad layer widths {dims:?} for {kind}"))),
        };
        e.set_params(&DVector::from_column_slice(params))?;
        Ok(e)
    }
}

fn relu(v: DVector<f64>) -> DVector<f64> {
    v.map(|x| x.max(0.0))
}

impl FeatureExtractor for Extractor {
    fn input_dim(&self) -> usize {
        self.dims()[0]
    }

    fn output_dim(&self) -> usize {
        *self.dims().last().expect("dims are never empty")
    }

    fn forward(&self, raw: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Identity { .. } => raw.clone(),
            Self::Linear { weights } => weights * raw,
            Self::Mlp { w1, b1, w2, b2 } => w2 * relu(w1 * raw + b1) + b2,
        }
    }

    fn backward(&self, raw: &DVector<f64>, upstream: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Identity { .. } => DVector::zeros(0),
            Self::Linear { .. } => {
                let g = upstream * raw.transpose();
                DVector::from_column_slice(g.as_slice())
            }
            Self::Mlp { w1, b1, w2, .. } => {
                let pre = w1 * raw + b1;
                let hidden = relu(pre.clone());
                let g_w2 = upstream * hidden.transpose();
                let mut g_hidden = w2.tr_mul(upstream);
                for (g, p) in g_hidden.iter_mut().zip(pre.iter()) {
                    if *p <= 0.0 {
                        *g = 0.0;
                    }
                }
                let g_w1 = &g_hidden * raw.transpose();
                let mut out = Vec::with_capacity(self.num_params());
                out.extend_from_slice(g_w1.as_slice());
                out.extend_from_slice(g_hidden.as_slice());
                out.extend_from_slice(g_w2.as_slice());
                out.extend_from_slice(upstream.as_slice());
                DVector::from_vec(out)
            }
        }
    }

    /// Column-major concatenation: `W` for linear; `W₁, b₁, W₂, b₂` for the MLP.
    fn params(&self) -> DVector<f64> {
        match self {
            Self::Identity { .. } => DVector::zeros(0),
            Self::Linear { weights } => DVector::from_column_slice(weights.as_slice()),
            Self::Mlp { w1, b1, w2, b2 } => {
                let parts = [w1.as_slice(), b1.as_slice(), w2.as_slice(), b2.as_slice()];
                DVector::from_vec(parts.concat())
            }
        }
    }

    fn num_params(&self) -> usize {
        match self {
            Self::Identity { .. } => 0,
            Self::Linear { weights } => weights.len(),
            Self::Mlp { w1, b1, w2, b2 } => w1.len() + b1.len() + w2.len() + b2.len(),
        }
    }

    fn set_params(&mut self, params: &DVector<f64>) -> Result<()> {
        check_dim(self.num_params(), params.len())?;
        if params.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite extractor parameter".into()));
        }
        match self {
            Self::Identity { .. } => {}
            Self::Linear { weights } => weights.copy_from_slice(params.as_slice()),
            Self::Mlp { w1, b1, w2, b2 } => {
                let p = params.as_slice();
                let mut at = 0;
                for part in [w1.as_mut_slice(), b1.as_mut_slice(), w2.as_mut_slice(), b2.as_mut_slice()] {
                    let n = part.len();
                    part.copy_from_slice(&p[at..at + n]);
                    at += n;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_vec(n: usize, r: &mut rng::Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| StandardNormal.sample(r))
    }

    #[test]
    fn identity_passes_through() {
        let e = Extractor::identity(3);
        let x = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        assert_eq!(e.forward(&x), x);
        assert_eq!(e.num_params(), 0);
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let mut r = rng::seeded(1);
        let e = Extractor::Linear {
            weights: DMatrix::from_fn(2, 3, |_, _| StandardNormal.sample(&mut r)),
        };
        let m = random_vec(3, &mut r);
        let g = random_vec(2, &mut r);
        let expected = &g * m.transpose();
        assert_eq!(e.backward(&m, &g).as_slice(), expected.as_slice());
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut r = rng::seeded(2);
        for trial in 0..10 {
            let e = Extractor::mlp(4, 5, 3, trial);
            let m = random_vec(4, &mut r);
            let g = random_vec(3, &mut r);
            let analytic = e.backward(&m, &g);
            let p0 = e.params();
            let h = 1e-6;
            for k in 0..p0.len() {
                let mut plus = e.clone();
                let mut minus = e.clone();
                let mut dp = DVector::zeros(p0.len());
                dp[k] = h;
                plus.apply_update(&dp).unwrap();
                minus.apply_update(&(-dp)).unwrap();
                let fd = (g.dot(&plus.forward(&m)) - g.dot(&minus.forward(&m))) / (2.0 * h);
                assert!((fd - analytic[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", analytic[k]);
            }
        }
    }

    #[test]
    fn from_parts_round_trip() {
        for e in [Extractor::identity(3), Extractor::linear(3), Extractor::mlp(3, 4, 3, 7)] {
            let back = Extractor::from_parts(e.kind(), &e.dims(), e.params().as_slice()).unwrap();
            assert_eq!(back, e);
        }
        assert!(Extractor::from_parts(ExtractorKind::Mlp, &[2, 2], &[]).is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("mlp".parse::<ExtractorKind>().unwrap(), ExtractorKind::Mlp);
        assert!(matches!("cnn".parse::<ExtractorKind>(), Err(Error::Config(_))));
    }
}
