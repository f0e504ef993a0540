//! The three prediction heads that share the backbone embedding.
//!
//! * the meta-confidence head: prototype classifier with the scaled distance
//!   `d(z, p) = ‖z/‖z‖ − p/‖p‖‖² / σ(z)`, where `σ` is a small MLP on `z`;
//! * the dense head: every feature-grid cell is classified against global
//!   class prototypes with plain squared Euclidean distance;
//! * the semantic head: a linear softmax classifier over global classes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{Gradients, Real, Tape, Tensor, Var};

/// Added to every norm before dividing.
pub const NORM_EPS: f64 = 1e-8;
/// Lower bound on the confidence scale.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Parameters of the input-dependent length scale `σ(z)`.
///
/// Two dense layers `K → K/4 → 1` with a relu between them; the output goes
/// through softplus and is offset by [`SCALE_FLOOR`], so `σ(z) > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct ConfidenceVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ConfidenceParams {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let hidden = (dim / 4).max(1);
        ConfidenceParams {
            w1: Tensor::glorot(&[dim, hidden], dim, hidden, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::glorot(&[hidden, 1], hidden, 1, rng),
            b2: Tensor::zeros(&[1]),
        }
    }

    /// All-zero MLP, giving `σ = ln 2 + 1e-3` everywhere.
    pub fn zeros(dim: usize) -> Self {
        let hidden = (dim / 4).max(1);
        ConfidenceParams {
            w1: Tensor::zeros(&[dim, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, 1]),
            b2: Tensor::zeros(&[1]),
        }
    }

    /// An MLP whose output is the constant `sigma`.
    pub fn constant(dim: usize, sigma: f64) -> Result<Self> {
        if sigma <= SCALE_FLOOR {
            return Err(Error::Invalid(format!("constant scale {sigma} must exceed {SCALE_FLOOR}")));
        }
        let mut p = Self::zeros(dim);
        // softplus⁻¹(s) = ln(eˢ − 1)
        let target = sigma - SCALE_FLOOR;
        p.b2 = Tensor::scalar(target.exp_m1().ln() as f32);
        Ok(p)
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> ConfidenceVars {
        ConfidenceVars {
            w1: tape.param(&self.w1),
            b1: tape.param(&self.b1),
            w2: tape.param(&self.w2),
            b2: tape.param(&self.b2),
        }
    }

    pub fn bind_frozen<T: Real>(&self, tape: &mut Tape<T>) -> ConfidenceVars {
        ConfidenceVars {
            w1: tape.constant(&self.w1),
            b1: tape.constant(&self.b1),
            w2: tape.constant(&self.w2),
            b2: tape.constant(&self.b2),
        }
    }

    pub fn write_grads<T: Real>(&mut self, v: &ConfidenceVars, g: &Gradients<T>) -> Result<()> {
        g.write_into(v.w1, &mut self.w1)?;
        g.write_into(v.b1, &mut self.b1)?;
        g.write_into(v.w2, &mut self.w2)?;
        g.write_into(v.b2, &mut self.b2)
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("confidence.w1".into(), &mut self.w1),
            ("confidence.b1".into(), &mut self.b1),
            ("confidence.w2".into(), &mut self.w2),
            ("confidence.b2".into(), &mut self.b2),
        ]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("confidence.w1".into(), &self.w1),
            ("confidence.b1".into(), &self.b1),
            ("confidence.w2".into(), &self.w2),
            ("confidence.b2".into(), &self.b2),
        ]
    }
}

/// Global class prototypes `ω`, one row per source class.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPrototypes {
    pub w: Tensor,
}

impl GlobalPrototypes {
    pub fn new<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Self {
        GlobalPrototypes {
            w: Tensor::glorot(&[classes, dim], dim, classes, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.w.shape()[0]
    }
}

/// Linear softmax classifier `softmax(Wᵀz + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct SemanticVars {
    pub weight: Var,
    pub bias: Var,
}

impl SemanticHead {
    pub fn new<R: Rng + ?Sized>(dim: usize, classes: usize, rng: &mut R) -> Self {
        SemanticHead {
            weight: Tensor::glorot(&[dim, classes], dim, classes, rng),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> SemanticVars {
        SemanticVars {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
        }
    }

    pub fn write_grads<T: Real>(&mut self, v: &SemanticVars, g: &Gradients<T>) -> Result<()> {
        g.write_into(v.weight, &mut self.weight)?;
        g.write_into(v.bias, &mut self.bias)
    }
}

/// `σ(z)` for every row of `z: [n, K]`, shape `[n, 1]`.
pub fn confidence_scale_var<T: Real>(tape: &mut Tape<T>, z: Var, phi: &ConfidenceVars) -> Result<Var> {
    let h = tape.matmul(z, phi.w1)?;
    let h = tape.add(h, phi.b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, phi.w2)?;
    let o = tape.add(o, phi.b2)?;
    let s = tape.softplus(o);
    Ok(tape.add_scalar(s, SCALE_FLOOR))
}

/// `‖z_i/‖z_i‖ − p_c/‖p_c‖‖²` for all pairs, shape `[n, C]`.
pub fn normalized_sq_dist<T: Real>(tape: &mut Tape<T>, z: Var, protos: Var) -> Result<Var> {
    let zn = tape.l2_normalize_rows(z, NORM_EPS)?;
    let pn = tape.l2_normalize_rows(protos, NORM_EPS)?;
    tape.sq_dist(zn, pn)
}

/// Meta-confidence logits `−d(z_i, p_c)` given precomputed scales `[n, 1]`.
pub fn mct_logits_with_scale<T: Real>(tape: &mut Tape<T>, z: Var, protos: Var, scale: Var) -> Result<Var> {
    let d = normalized_sq_dist(tape, z, protos)?;
    let d = tape.div(d, scale)?;
    Ok(tape.neg(d))
}

pub fn mct_logits<T: Real>(tape: &mut Tape<T>, z: Var, protos: Var, phi: &ConfidenceVars) -> Result<Var> {
    let scale = confidence_scale_var(tape, z, phi)?;
    mct_logits_with_scale(tape, z, protos, scale)
}

/// Dense-head logits `−‖f_i − w_c‖²` for every grid cell `[P, K]`.
pub fn dfmn_logits<T: Real>(tape: &mut Tape<T>, cells: Var, omega: Var) -> Result<Var> {
    let d = tape.sq_dist(cells, omega)?;
    Ok(tape.neg(d))
}

pub fn semantic_logits<T: Real>(tape: &mut Tape<T>, z: Var, delta: &SemanticVars) -> Result<Var> {
    let l = tape.matmul(z, delta.weight)?;
    tape.add(l, delta.bias)
}

fn row<T: Real>(tape: &mut Tape<T>, v: &[f32]) -> Result<Var> {
    Ok(tape.constant(&Tensor::new(&[1, v.len()], v.to_vec())?))
}

fn check_finite(z: &[f32]) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "head input" })
    }
}

// The plain functions below evaluate on an `f64` scratch tape and round once.

/// `σ(z)` for a single embedding.
pub fn confidence_scale(z: &[f32], phi: &ConfidenceParams) -> Result<f32> {
    check_finite(z)?;
    let mut tape = Tape::<f64>::new();
    let zv = row(&mut tape, z)?;
    let pv = phi.bind_frozen(&mut tape);
    let s = confidence_scale_var(&mut tape, zv, &pv)?;
    Ok(tape.scalar(s) as f32)
}

/// `d(z, p)` for a single embedding and prototype.
pub fn scaled_distance(z: &[f32], p: &[f32], phi: &ConfidenceParams) -> Result<f32> {
    check_finite(z)?;
    let mut tape = Tape::<f64>::new();
    let zv = row(&mut tape, z)?;
    let pv = row(&mut tape, p)?;
    let phv = phi.bind_frozen(&mut tape);
    let l = mct_logits(&mut tape, zv, pv, &phv)?;
    Ok(-tape.scalar(l) as f32)
}

/// Meta-confidence posterior of one embedding over the rows of `protos`.
pub fn mct_posterior(z: &[f32], protos: &Tensor, phi: &ConfidenceParams) -> Result<Vec<f32>> {
    check_finite(z)?;
    if protos.shape().len() != 2 || protos.shape()[0] < 2 {
        return Err(Error::Invalid(format!(
            "need at least two prototypes, got shape {:?}",
            protos.shape()
        )));
    }
    let mut tape = Tape::<f64>::new();
    let zv = row(&mut tape, z)?;
    let pv = tape.constant(protos);
    let phv = phi.bind_frozen(&mut tape);
    let l = mct_logits(&mut tape, zv, pv, &phv)?;
    let p = tape.softmax(l)?;
    Ok(tape.tensor(p).into_data())
}

/// Dense-head posterior of grid cell `(y, x)` of a `H × W × K` map.
pub fn dfmn_pixel_posterior(dense: &Tensor, y: usize, x: usize, omega: &GlobalPrototypes) -> Result<Vec<f32>> {
    let s = dense.shape();
    if s.len() != 3 || y >= s[0] || x >= s[1] {
        return Err(Error::Invalid(format!("cell ({y}, {x}) outside feature map {s:?}")));
    }
    let k = s[2];
    let start = (y * s[1] + x) * k;
    let mut tape = Tape::<f64>::new();
    let cell = row(&mut tape, &dense.data()[start..start + k])?;
    let w = tape.constant(&omega.w);
    let l = dfmn_logits(&mut tape, cell, w)?;
    let p = tape.softmax(l)?;
    Ok(tape.tensor(p).into_data())
}

/// Semantic-head posterior over global classes.
pub fn semantic_forward(z: &[f32], delta: &SemanticHead) -> Result<Vec<f32>> {
    check_finite(z)?;
    let mut tape = Tape::<f64>::new();
    let zv = row(&mut tape, z)?;
    let w = tape.constant(&delta.weight);
    let b = tape.constant(&delta.bias);
    let l = semantic_logits(&mut tape, zv, &SemanticVars { weight: w, bias: b })?;
    let p = tape.softmax(l)?;
    Ok(tape.tensor(p).into_data())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numeric::grad_check;

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_mlp_scale_is_ln2_plus_floor() {
        let phi = ConfidenceParams::zeros(8);
        let s = confidence_scale(&[0.3; 8], &phi).unwrap();
        assert!((s as f64 - (2f64.ln() + 1e-3)).abs() < 1e-6);
        assert!((s - 0.6941).abs() < 1e-4);
    }

    #[test]
    fn scale_is_positive_for_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let phi = ConfidenceParams::new(16, &mut rng);
        for _ in 0..1000 {
            let z: Vec<f32> = (0..16).map(|_| rng.random_range(-20.0..20.0)).collect();
            assert!(confidence_scale(&z, &phi).unwrap() > 0.0);
        }
    }

    #[test]
    fn scale_gradient_wrt_mlp_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phi = ConfidenceParams::new(8, &mut rng);
        let z = Tensor::new(&[3, 8], rand_vec(&mut rng, 24)).unwrap();
        for which in 0..4 {
            let x = [&phi.w1, &phi.b1, &phi.w2, &phi.b2][which].clone();
            let err = grad_check(
                |tape, x| {
                    let mut v = phi.bind(tape);
                    match which {
                        0 => v.w1 = x,
                        1 => v.b1 = x,
                        2 => v.w2 = x,
                        _ => v.b2 = x,
                    }
                    let zv = tape.constant(&z);
                    let s = confidence_scale_var(tape, zv, &v)?;
                    let s = tape.square(s);
                    Ok(tape.sum(s))
                },
                &x,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "param {which}: {err}");
        }
    }

    #[test]
    fn scaled_distance_examples() {
        let phi = ConfidenceParams::constant(2, 1.0).unwrap();
        assert!(scaled_distance(&[0.4, 0.7], &[0.4, 0.7], &phi).unwrap().abs() < 1e-6);
        let d = scaled_distance(&[1.0, 0.0], &[0.0, 1.0], &phi).unwrap();
        assert!((d - 2.0).abs() < 1e-5, "{d}");
        // Rescaling z leaves the normalized term unchanged; with a constant σ
        // the whole distance is unchanged.
        let a = scaled_distance(&[0.3, -0.8], &[0.5, 0.1], &phi).unwrap();
        let b = scaled_distance(&[1.5, -4.0], &[0.5, 0.1], &phi).unwrap();
        assert!((a - b).abs() < 1e-5);
    }

    #[test]
    fn zero_vectors_are_guarded() {
        let phi = ConfidenceParams::zeros(3);
        let d = scaled_distance(&[0.0; 3], &[1.0, 0.0, 0.0], &phi).unwrap();
        assert!(d.is_finite());
    }

    #[test]
    fn mct_posterior_examples() {
        let phi = ConfidenceParams::constant(2, 1.0).unwrap();
        let protos = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = mct_posterior(&[1.0, 0.0], &protos, &phi).unwrap();
        assert!(close(&p, &[0.8808, 0.1192], 1e-4), "{p:?}");
        let p = mct_posterior(&[1.0, 1.0], &protos, &phi).unwrap();
        assert!(close(&p, &[0.5, 0.5], 1e-6));
        let swapped = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let q = mct_posterior(&[0.2, 0.9], &swapped, &phi).unwrap();
        let r = mct_posterior(&[0.2, 0.9], &protos, &phi).unwrap();
        assert!(close(&q, &[r[1], r[0]], 1e-7));
        assert!(mct_posterior(&[1.0, 0.0], &Tensor::zeros(&[1, 2]), &phi).is_err());
    }

    #[test]
    fn dfmn_examples() {
        let omega = GlobalPrototypes {
            w: Tensor::full(&[4, 3], 0.25),
        };
        let dense = Tensor::new(&[1, 1, 3], vec![0.1, 0.9, -0.3]).unwrap();
        let p = dfmn_pixel_posterior(&dense, 0, 0, &omega).unwrap();
        assert!(close(&p, &[0.25; 4], 1e-6));
        // d₁ = 0, d₂ = 1 → logistic(1).
        let omega = GlobalPrototypes {
            w: Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap(),
        };
        let dense = Tensor::new(&[1, 1, 1], vec![0.0]).unwrap();
        let p = dfmn_pixel_posterior(&dense, 0, 0, &omega).unwrap();
        assert!(close(&p, &[0.7311, 0.2689], 1e-4), "{p:?}");
        // Moving the other prototype away drives p₁ to one.
        let mut last = 0.0;
        for far in [1.0f32, 2.0, 4.0, 8.0] {
            let omega = GlobalPrototypes {
                w: Tensor::new(&[2, 1], vec![0.0, far]).unwrap(),
            };
            let p = dfmn_pixel_posterior(&dense, 0, 0, &omega).unwrap();
            assert!(p[0] > last);
            last = p[0];
        }
        assert!(last > 0.999_999);
        assert!(dfmn_pixel_posterior(&dense, 1, 0, &omega).is_err());
    }

    #[test]
    fn semantic_examples() {
        let zero = SemanticHead {
            weight: Tensor::zeros(&[2, 5]),
            bias: Tensor::zeros(&[5]),
        };
        assert!(close(&semantic_forward(&[0.3, 0.1], &zero).unwrap(), &[0.2; 5], 1e-6));
        let head = SemanticHead {
            weight: Tensor::zeros(&[1, 3]),
            bias: Tensor::new(&[3], vec![1.0, 0.0, 0.0]).unwrap(),
        };
        let p = semantic_forward(&[0.0], &head).unwrap();
        assert!(close(&p, &[0.5761, 0.2119, 0.2119], 1e-4), "{p:?}");
        let shifted = SemanticHead {
            weight: head.weight.clone(),
            bias: Tensor::new(&[3], vec![8.0, 7.0, 7.0]).unwrap(),
        };
        assert!(close(&semantic_forward(&[0.0], &shifted).unwrap(), &p, 1e-6));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn posteriors_are_distributions(seed in any::<u64>(), scale in 0.01f32..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 6;
            let z: Vec<f32> = rand_vec(&mut rng, k).iter().map(|v| v * scale).collect();
            let phi = ConfidenceParams::new(k, &mut rng);
            let protos = Tensor::new(&[4, k], rand_vec(&mut rng, 4 * k)).unwrap();
            let omega = GlobalPrototypes::new(5, k, &mut rng);
            let delta = SemanticHead::new(k, 7, &mut rng);
            let dense = Tensor::new(&[1, 1, k], z.clone()).unwrap();
            for p in [
                mct_posterior(&z, &protos, &phi).unwrap(),
                dfmn_pixel_posterior(&dense, 0, 0, &omega).unwrap(),
                semantic_forward(&z, &delta).unwrap(),
            ] {
                prop_assert!(p.iter().all(|&v| v >= 0.0));
                prop_assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn mct_argmax_ignores_embedding_scale(seed in any::<u64>(), factor in 0.05f32..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 5;
            let z = rand_vec(&mut rng, k);
            let phi = ConfidenceParams::constant(k, 0.7).unwrap();
            let protos = Tensor::new(&[3, k], rand_vec(&mut rng, 3 * k)).unwrap();
            let argmax = |p: Vec<f32>| p.iter().enumerate().fold((0, f32::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
            let scaled: Vec<f32> = z.iter().map(|v| v * factor).collect();
            prop_assert_eq!(
                argmax(mct_posterior(&z, &protos, &phi).unwrap()),
                argmax(mct_posterior(&scaled, &protos, &phi).unwrap())
            );
        }

        #[test]
        fn dfmn_sharpens_when_gaps_double(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 3;
            let f = rand_vec(&mut rng, k);
            let w = rand_vec(&mut rng, 3 * k);
            let doubled: Vec<f32> = w.iter().enumerate().map(|(i, &v)| f[i % k] + 2.0 * (v - f[i % k])).collect();
            let dense = Tensor::new(&[1, 1, k], f).unwrap();
            let p = dfmn_pixel_posterior(&dense, 0, 0, &GlobalPrototypes { w: Tensor::new(&[3, k], w).unwrap() }).unwrap();
            let q = dfmn_pixel_posterior(&dense, 0, 0, &GlobalPrototypes { w: Tensor::new(&[3, k], doubled).unwrap() }).unwrap();
            let pmax = p.iter().cloned().fold(0.0, f32::max);
            let qmax = q.iter().cloned().fold(0.0, f32::max);
            // Ties between the two nearest prototypes make the gain zero.
            prop_assert!(qmax >= pmax - 1e-6);
        }
    }
}
