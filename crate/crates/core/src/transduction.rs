//! Iterative prototype refinement with confidence-weighted query embeddings.
//!
//! Prototypes start as support means. Each round soft-assigns every query
//! with the meta-confidence posterior and recomputes
//! `P_c = (Σ_{S_c} z + Σ_Q q_c·z) / (|S_c| + Σ_Q q_c)`.
//! Final query posteriors are one more soft assignment at the last
//! prototypes. The tape functions serve training; the plain wrappers record
//! constants on a scratch `f64` tape so both paths share one implementation;
//! results are rounded to `f32` once at the end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{confidence_scale_var, mct_logits_with_scale, ConfidenceParams, ConfidenceVars};
use crate::numeric::{Real, Tape, Tensor, Var};

/// Iteration counts for training and testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransductionConfig {
    pub t_train: usize,
    pub t_test: usize,
}

impl Default for TransductionConfig {
    fn default() -> Self {
        TransductionConfig { t_train: 1, t_test: 10 }
    }
}

/// Class prototypes `[C, K]` after `iteration` refinement rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub matrix: Tensor,
    pub iteration: usize,
}

impl Prototypes {
    pub fn classes(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn row(&self, c: usize) -> &[f32] {
        self.matrix.row(c)
    }
}

/// Support statistics reused by every update: class sums `[C, K]` and counts `[C, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct SupportStats {
    pub sums: Var,
    pub counts: Var,
}

fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<(Vec<T>, Vec<T>)> {
    let mut hot = vec![T::zero(); labels.len() * classes];
    let mut counts = vec![T::zero(); classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Invalid(format!("label {y} out of range for {classes} classes")));
        }
        hot[i * classes + y] = T::one();
        counts[y] = counts[y] + T::one();
    }
    if let Some(c) = counts.iter().position(|&n| n == T::zero()) {
        return Err(Error::Invalid(format!("class {c} has no support embeddings")));
    }
    Ok((hot, counts))
}

/// Per-class sums and counts of the support embeddings `[n, K]`.
pub fn support_stats<T: Real>(tape: &mut Tape<T>, support: Var, labels: &[usize], classes: usize) -> Result<SupportStats> {
    let n = tape.shape(support)[0];
    if labels.len() != n {
        return Err(Error::Invalid(format!("{n} support embeddings but {} labels", labels.len())));
    }
    let (hot, counts) = one_hot::<T>(labels, classes)?;
    let hot = tape.leaf_raw(&[n, classes], hot, false)?;
    let counts = tape.leaf_raw(&[classes, 1], counts, false)?;
    let sums = tape.matmul_tn(hot, support)?;
    Ok(SupportStats { sums, counts })
}

/// Support means `[C, K]`.
pub fn init_prototypes_var<T: Real>(tape: &mut Tape<T>, stats: SupportStats) -> Result<Var> {
    tape.div(stats.sums, stats.counts)
}

/// One confidence-weighted update from soft assignments `q: [M, C]`.
pub fn update_prototypes_var<T: Real>(tape: &mut Tape<T>, stats: SupportStats, query: Var, q: Var) -> Result<Var> {
    let classes = tape.shape(q)[1];
    let weighted = tape.matmul_tn(q, query)?;
    let num = tape.add(stats.sums, weighted)?;
    let mass = tape.sum_axis(q, 0)?;
    let mass = tape.reshape(mass, &[classes, 1])?;
    let den = tape.add(stats.counts, mass)?;
    tape.div(num, den)
}

/// Runs `iterations` refinement rounds and returns the final prototypes
/// and query logits against them; softmax of the logits is the posterior.
pub fn transduce_var<T: Real>(
    tape: &mut Tape<T>,
    support: Var,
    labels: &[usize],
    classes: usize,
    query: Var,
    phi: &ConfidenceVars,
    iterations: usize,
) -> Result<(Var, Var)> {
    let stats = support_stats(tape, support, labels, classes)?;
    let mut protos = init_prototypes_var(tape, stats)?;
    let scale = confidence_scale_var(tape, query, phi)?;
    for _ in 0..iterations {
        let logits = mct_logits_with_scale(tape, query, protos, scale)?;
        let q = tape.softmax(logits)?;
        protos = update_prototypes_var(tape, stats, query, q)?;
    }
    let logits = mct_logits_with_scale(tape, query, protos, scale)?;
    Ok((protos, logits))
}

fn check_embeddings(what: &str, t: &Tensor) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::Invalid(format!("{what} embeddings must be [n, K], got {:?}", t.shape())));
    }
    if !t.all_finite() {
        return Err(Error::NonFinite { op: "embedding" });
    }
    Ok(())
}

/// Support means per class; every class in `0..classes` needs a sample.
pub fn init_prototypes(support: &Tensor, labels: &[usize], classes: usize) -> Result<Prototypes> {
    check_embeddings("support", support)?;
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(support);
    let stats = support_stats(&mut tape, s, labels, classes)?;
    let p = init_prototypes_var(&mut tape, stats)?;
    Ok(Prototypes {
        matrix: tape.tensor(p),
        iteration: 0,
    })
}

/// Meta-confidence posteriors `[M, C]` of `query` against `protos`.
pub fn soft_assign(query: &Tensor, protos: &Prototypes, phi: &ConfidenceParams) -> Result<Tensor> {
    check_embeddings("query", query)?;
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(query);
    let p = tape.constant(&protos.matrix);
    let phv = phi.bind_frozen(&mut tape);
    let scale = confidence_scale_var(&mut tape, z, &phv)?;
    let logits = mct_logits_with_scale(&mut tape, z, p, scale)?;
    let q = tape.softmax(logits)?;
    Ok(tape.tensor(q))
}

/// One refinement round given soft assignments `q: [M, C]`.
pub fn update_prototypes(
    protos: &Prototypes,
    support: &Tensor,
    labels: &[usize],
    query: &Tensor,
    q: &Tensor,
) -> Result<Prototypes> {
    check_embeddings("support", support)?;
    check_embeddings("query", query)?;
    let classes = protos.classes();
    if q.shape() != [query.shape()[0], classes] {
        return Err(Error::shape("update_prototypes", q.shape(), &[query.shape()[0], classes]));
    }
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(support);
    let z = tape.constant(query);
    let qv = tape.constant(q);
    let stats = support_stats(&mut tape, s, labels, classes)?;
    let p = update_prototypes_var(&mut tape, stats, z, qv)?;
    Ok(Prototypes {
        matrix: tape.tensor(p),
        iteration: protos.iteration + 1,
    })
}

/// Result of [`transduce`]: final prototypes and query posteriors `[M, C]`
/// (`None` when the query set is empty).
#[derive(Debug, Clone)]
pub struct Transduction {
    pub prototypes: Prototypes,
    pub posteriors: Option<Tensor>,
}

pub fn transduce(
    support: &Tensor,
    labels: &[usize],
    classes: usize,
    query: Option<&Tensor>,
    phi: &ConfidenceParams,
    iterations: usize,
) -> Result<Transduction> {
    let Some(query) = query else {
        return Ok(Transduction {
            prototypes: init_prototypes(support, labels, classes)?,
            posteriors: None,
        });
    };
    check_embeddings("support", support)?;
    check_embeddings("query", query)?;
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(support);
    let z = tape.constant(query);
    let phv = phi.bind_frozen(&mut tape);
    let (p, logits) = transduce_var(&mut tape, s, labels, classes, z, &phv, iterations)?;
    let post = tape.softmax(logits)?;
    tape.check_finite()?;
    Ok(Transduction {
        prototypes: Prototypes {
            matrix: tape.tensor(p),
            iteration: iterations,
        },
        posteriors: Some(tape.tensor(post)),
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::heads::mct_posterior;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn init_examples() {
        let p = init_prototypes(&t(&[2, 2], &[1.0, 0.0, 3.0, 0.0]), &[0, 0], 1).unwrap();
        assert_eq!(p.matrix.data(), &[2.0, 0.0]);
        assert_eq!(p.iteration, 0);
        let single = init_prototypes(&t(&[2, 2], &[0.3, -0.7, 1.1, 0.2]), &[1, 0], 2).unwrap();
        assert_eq!(single.matrix.data(), &[1.1, 0.2, 0.3, -0.7]);
        let dup = init_prototypes(&t(&[4, 1], &[1.0, 5.0, 1.0, 5.0]), &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(dup.matrix.data(), &[1.0, 5.0]);
        assert!(init_prototypes(&t(&[2, 1], &[1.0, 2.0]), &[0, 0], 2).is_err());
    }

    #[test]
    fn soft_assign_examples() {
        let phi = ConfidenceParams::new(2, &mut ChaCha8Rng::seed_from_u64(1));
        let protos = Prototypes {
            matrix: t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            iteration: 0,
        };
        let q = soft_assign(&t(&[1, 2], &[2.0, 2.0]), &protos, &phi).unwrap();
        assert!((q.data()[0] - 0.5).abs() < 1e-7);
        let z = t(&[3, 2], &[0.3, 0.9, -1.0, 0.2, 5.0, 4.0]);
        let q = soft_assign(&z, &protos, &phi).unwrap();
        for i in 0..3 {
            let direct = mct_posterior(z.row(i), &protos.matrix, &phi).unwrap();
            assert_eq!(q.row(i), &direct[..]);
            assert!((direct.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn update_examples() {
        let protos = Prototypes {
            matrix: t(&[1, 1], &[1.0]),
            iteration: 0,
        };
        let p = update_prototypes(&protos, &t(&[1, 1], &[1.0]), &[0], &t(&[1, 1], &[3.0]), &t(&[1, 1], &[0.5])).unwrap();
        assert!((p.matrix.data()[0] - 2.5 / 1.5).abs() < 1e-6);
        assert_eq!(p.iteration, 1);

        let support = t(&[2, 2], &[1.0, 1.0, -1.0, 0.0]);
        let query = t(&[2, 2], &[4.0, 2.0, 0.0, 6.0]);
        let protos = init_prototypes(&support, &[0, 1], 2).unwrap();
        let zero_for_1 = t(&[2, 2], &[1.0, 0.0, 1.0, 0.0]);
        let p = update_prototypes(&protos, &support, &[0, 1], &query, &zero_for_1).unwrap();
        assert_eq!(p.row(1), protos.row(1));
        let mean = [(1.0 + 4.0 + 0.0) / 3.0, (1.0 + 2.0 + 6.0) / 3.0];
        assert!((p.row(0)[0] - mean[0]).abs() < 1e-6 && (p.row(0)[1] - mean[1]).abs() < 1e-6);
    }

    #[test]
    fn t0_matches_support_mean_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi = ConfidenceParams::new(4, &mut rng);
        let support = Tensor::new(&[6, 4], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels = [0, 1, 2, 0, 1, 2];
        let query = Tensor::new(&[5, 4], (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let out = transduce(&support, &labels, 3, Some(&query), &phi, 0).unwrap();
        let means = init_prototypes(&support, &labels, 3).unwrap();
        assert_eq!(out.prototypes.matrix, means.matrix);
        let expected = soft_assign(&query, &means, &phi).unwrap();
        assert_eq!(out.posteriors.unwrap(), expected);
    }

    fn clusters(rng: &mut ChaCha8Rng, per: usize, spread: f32) -> (Tensor, Vec<usize>, Tensor, Vec<usize>) {
        let centers = [[10.0f32, 1.0, 0.0], [0.0, 1.0, 10.0]];
        let mut s = Vec::new();
        let mut q = Vec::new();
        let mut qy = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..2 {
                s.extend(center.iter().map(|v| v + rng.random_range(-spread..spread)));
            }
            for _ in 0..per {
                q.extend(center.iter().map(|v| v + rng.random_range(-spread..spread)));
                qy.push(c);
            }
        }
        (
            Tensor::new(&[4, 3], s).unwrap(),
            vec![0, 0, 1, 1],
            Tensor::new(&[2 * per, 3], q).unwrap(),
            qy,
        )
    }

    #[test]
    fn separated_clusters_are_classified_and_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let phi = ConfidenceParams::constant(3, 0.1).unwrap();
        let (s, sy, q, qy) = clusters(&mut rng, 8, 0.5);
        let out = transduce(&s, &sy, 2, Some(&q), &phi, 10).unwrap();
        let post = out.posteriors.unwrap();
        for (i, &y) in qy.iter().enumerate() {
            let r = post.row(i);
            assert!(r[y] > r[1 - y]);
        }
        let q_last = soft_assign(&q, &out.prototypes, &phi).unwrap();
        let again = update_prototypes(&out.prototypes, &s, &sy, &q, &q_last).unwrap();
        let moved = again
            .matrix
            .data()
            .iter()
            .zip(out.prototypes.matrix.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(moved < 1e-5, "{moved}");
    }

    #[test]
    fn prototypes_stay_in_the_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let phi = ConfidenceParams::new(3, &mut rng);
            let (s, sy, q, _) = clusters(&mut rng, 3, 6.0);
            let out = transduce(&s, &sy, 2, Some(&q), &phi, 5).unwrap();
            for k in 0..3 {
                let col = |m: &Tensor| (0..m.shape()[0]).map(move |i| m.row(i)[k]).collect::<Vec<_>>();
                let all: Vec<f32> = col(&s).into_iter().chain(col(&q)).collect();
                let lo = all.iter().cloned().fold(f32::MAX, f32::min);
                let hi = all.iter().cloned().fold(f32::MIN, f32::max);
                for c in 0..2 {
                    let v = out.prototypes.row(c)[k];
                    assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
                }
            }
        }
    }

    #[test]
    fn empty_query_ignores_iterations() {
        let phi = ConfidenceParams::zeros(2);
        let s = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let a = transduce(&s, &[0, 1], 2, None, &phi, 0).unwrap();
        let b = transduce(&s, &[0, 1], 2, None, &phi, 10).unwrap();
        assert_eq!(a.prototypes.matrix, b.prototypes.matrix);
        assert!(b.posteriors.is_none());
    }

    #[test]
    fn config_defaults() {
        let c: TransductionConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, TransductionConfig { t_train: 1, t_test: 10 });
        assert!(serde_json::from_str::<TransductionConfig>(r#"{"t_tset": 3}"#).is_err());
    }
}
