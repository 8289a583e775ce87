use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

/// Output layer transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Head {
    Identity,
    /// `lo + (hi − lo)(tanh z + 1)/2`, always inside `[lo, hi]`.
    Squash { lo: f64, hi: f64 },
}

/// Dense network with tanh hidden layers. Samples are matrix columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub head: Head,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    /// Layer inputs; `inputs[0]` is the batch itself.
    inputs: Vec<DMatrix<f64>>,
    /// Head pre-activation.
    last_z: DMatrix<f64>,
}

/// Parameter gradient with the same layout as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradient {
    pub fn flatten(&self) -> DVector<f64> {
        flatten(&self.weights, &self.biases)
    }
}

fn flatten(weights: &[DMatrix<f64>], biases: &[DVector<f64>]) -> DVector<f64> {
    let len: usize = weights.iter().map(|w| w.len()).sum::<usize>() + biases.iter().map(|b| b.len()).sum::<usize>();
    let mut out = Vec::with_capacity(len);
    for (w, b) in weights.iter().zip(biases) {
        out.extend_from_slice(w.as_slice());
        out.extend_from_slice(b.as_slice());
    }
    DVector::from_vec(out)
}

/// `tanh` through `exp_m1`; agrees with the libm version to 2.3e-16.
fn fast_tanh(x: f64) -> f64 {
    let e = (2.0 * x).exp_m1();
    if e.is_infinite() {
        1.0
    } else {
        e / (e + 2.0)
    }
}

impl Mlp {
    /// Uniform `±1/√fan_in` initialization.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], head: Head, rng: &mut R) -> Self {
        let mut net = Self::zeros(widths, head);
        for (w, b) in net.weights.iter_mut().zip(net.biases.iter_mut()) {
            let bound = 1.0 / (w.ncols() as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            w.iter_mut().for_each(|v| *v = dist.sample(rng));
            b.iter_mut().for_each(|v| *v = dist.sample(rng));
        }
        net
    }

    pub fn zeros(widths: &[usize], head: Head) -> Self {
        assert!(widths.len() >= 2, "a network needs input and output widths");
        let weights = widths.windows(2).map(|p| DMatrix::zeros(p[1], p[0])).collect();
        let biases = widths[1..].iter().map(|&w| DVector::zeros(w)).collect();
        Self { weights, biases, head }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.weights[0].ncols()];
        w.extend(self.weights.iter().map(|m| m.nrows()));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().nrows()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Parameters in layer order, each weight matrix column-major followed by its bias.
    pub fn params(&self) -> DVector<f64> {
        flatten(&self.weights, &self.biases)
    }

    pub fn set_params(&mut self, p: &DVector<f64>) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "parameter vector has {} entries, network needs {}",
                p.len(),
                self.num_params()
            )));
        }
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&p.as_slice()[k..k + n]);
            k += n;
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&p.as_slice()[k..k + n]);
            k += n;
        }
        Ok(())
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let out = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()))?;
        Ok(out.column(0).into_owned())
    }

    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Cache)> {
        if x.nrows() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "network input has {} rows, expected {}",
                x.nrows(),
                self.input_dim()
            )));
        }
        let layers = self.weights.len();
        let mut inputs = Vec::with_capacity(layers);
        let mut h = x.clone();
        for l in 0..layers {
            let mut z = &self.weights[l] * &h;
            for mut col in z.column_iter_mut() {
                col += &self.biases[l];
            }
            if !z.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: l });
            }
            inputs.push(h);
            if l + 1 == layers {
                let out = match self.head {
                    Head::Identity => z.clone(),
                    Head::Squash { lo, hi } => z.map(|v| lo + (hi - lo) * 0.5 * (v.tanh() + 1.0)),
                };
                return Ok((out, Cache { inputs, last_z: z }));
            }
            z.apply(|v| *v = fast_tanh(*v));
            h = z;
        }
        unreachable!("networks have at least one layer")
    }

    /// Parameter gradient of `Σ dout ⊙ output` and the gradient with
    /// respect to the batch input.
    pub fn backward(&self, cache: &Cache, dout: &DMatrix<f64>) -> Result<(Gradient, DMatrix<f64>)> {
        let layers = self.weights.len();
        let mut delta = match self.head {
            Head::Identity => dout.clone(),
            Head::Squash { lo, hi } => {
                let half = 0.5 * (hi - lo);
                dout.zip_map(&cache.last_z, |d, z| {
                    let t = z.tanh();
                    d * half * (1.0 - t * t)
                })
            }
        };
        let mut gw = vec![DMatrix::zeros(0, 0); layers];
        let mut gb = vec![DVector::zeros(0); layers];
        for l in (0..layers).rev() {
            if !delta.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: l });
            }
            let input = &cache.inputs[l];
            gw[l] = &delta * input.transpose();
            gb[l] = delta.column_sum();
            let mut dx = self.weights[l].transpose() * &delta;
            if l > 0 {
                // Hidden inputs are tanh outputs.
                dx.zip_apply(input, |d, h| *d *= 1.0 - h * h);
            }
            delta = dx;
        }
        Ok((
            Gradient {
                weights: gw,
                biases: gb,
            },
            delta,
        ))
    }

    /// `self ← τ other + (1 − τ) self`.
    pub fn soft_update_from(&mut self, other: &Mlp, tau: f64) -> Result<()> {
        if self.widths() != other.widths() {
            return Err(Error::Dimension("soft update between networks of different shapes".into()));
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.zip_apply(b, |x, y| *x = tau * y + (1.0 - tau) * *x);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.zip_apply(b, |x, y| *x = tau * y + (1.0 - tau) * *x);
        }
        Ok(())
    }

    /// Text dump: a shape header followed by one parameter per line in
    /// shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut out = String::from("mlp v1\n");
        let widths: Vec<String> = self.widths().iter().map(|w| w.to_string()).collect();
        writeln!(out, "widths {}", widths.join(" ")).unwrap();
        match self.head {
            Head::Identity => writeln!(out, "head identity").unwrap(),
            Head::Squash { lo, hi } => writeln!(out, "head squash {lo:?} {hi:?}").unwrap(),
        }
        for v in self.params().iter() {
            writeln!(out, "{v:?}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Validation(format!("malformed network dump: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some("mlp v1") {
            return Err(bad("missing version line"));
        }
        let widths: Vec<usize> = lines
            .next()
            .and_then(|l| l.strip_prefix("widths "))
            .ok_or_else(|| bad("missing widths"))?
            .split_whitespace()
            .map(|w| w.parse().map_err(|_| bad("width is not an integer")))
            .collect::<Result<_>>()?;
        if widths.len() < 2 {
            return Err(bad("fewer than two widths"));
        }
        let head_line = lines.next().ok_or_else(|| bad("missing head"))?;
        let parts: Vec<&str> = head_line.split_whitespace().collect();
        let head = match parts.as_slice() {
            ["head", "identity"] => Head::Identity,
            ["head", "squash", lo, hi] => Head::Squash {
                lo: lo.parse().map_err(|_| bad("head bound"))?,
                hi: hi.parse().map_err(|_| bad("head bound"))?,
            },
            _ => return Err(bad("unknown head")),
        };
        let params: Vec<f64> = lines
            .filter(|l| !l.is_empty())
            .map(|l| l.parse().map_err(|_| bad("parameter is not a number")))
            .collect::<Result<_>>()?;
        let mut net = Self::zeros(&widths, head);
        net.set_params(&DVector::from_vec(params))?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2], Head::Identity);
        let y = net.forward(&DVector::from_vec(vec![1.0, -2.0, 3.0])).unwrap();
        assert_eq!(y, DVector::zeros(2));
    }

    #[test]
    fn single_layer_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[4, 3], Head::Identity, &mut rng);
        let x = DMatrix::from_fn(4, 6, |i, j| (i as f64 - j as f64) * 0.3);
        let y = net.forward_batch(&x).unwrap();
        for j in 0..6 {
            for i in 0..3 {
                let mut v = net.biases[0][i];
                for k in 0..4 {
                    v += net.weights[0][(i, k)] * x[(k, j)];
                }
                assert!((y[(i, j)] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn squash_head_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Mlp::new(&[2, 8, 2], Head::Squash { lo: -2.0, hi: 2.0 }, &mut rng);
        let p = net.params() * 50.0;
        net.set_params(&p).unwrap();
        let x = DMatrix::from_fn(2, 200, |i, j| ((i * 31 + j * 17) % 23) as f64 - 11.0);
        let y = net.forward_batch(&x).unwrap();
        assert!(y.iter().all(|v| (-2.0..=2.0).contains(v)));
    }

    #[test]
    fn params_round_trip_through_text() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[5, 7, 7, 2], Head::Squash { lo: -2.0, hi: 2.0 }, &mut rng);
        let back = Mlp::from_text(&net.to_text()).unwrap();
        assert_eq!(net, back);
        assert!(Mlp::from_text("mlp v2\n").is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let net = Mlp::zeros(&[3, 2], Head::Identity);
        assert!(matches!(net.forward(&DVector::zeros(2)), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_values_name_the_layer() {
        let mut net = Mlp::zeros(&[1, 2, 1], Head::Identity);
        net.weights[1][(0, 0)] = f64::NAN;
        match net.forward(&DVector::from_vec(vec![1.0])) {
            Err(Error::NonFinite { layer }) => assert_eq!(layer, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn soft_update_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Mlp::new(&[2, 3, 1], Head::Identity, &mut rng);
        let b = Mlp::new(&[2, 3, 1], Head::Identity, &mut rng);
        let mut c = b.clone();
        c.soft_update_from(&a, 1.0).unwrap();
        assert_eq!(c, a);
        let mut c = b.clone();
        c.soft_update_from(&a, 0.0).unwrap();
        assert_eq!(c, b);
        let mut s = Mlp::zeros(&[1, 1], Head::Identity);
        let mut t = s.clone();
        t.weights[0][(0, 0)] = 2.0;
        s.soft_update_from(&t, 0.5).unwrap();
        assert_eq!(s.weights[0][(0, 0)], 1.0);
    }
}
