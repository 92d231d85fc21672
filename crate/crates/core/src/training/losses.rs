use crate::error::{contract_err, dim_err, Error, Result};
use crate::heads::HaltingTrace;
use crate::numerics::{Array, Tape, Var};

/// Floor applied to the folded halting distribution inside the KL.
pub const KL_FLOOR: f64 = 1e-12;

/// Per-iteration action errors and regularizer values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LossProfile {
    /// Mean absolute error of each iteration's chunk.
    pub per_iter_loss: Vec<f64>,
    pub l_action: f64,
    pub l_ent: f64,
    pub l_div: f64,
}

/// Mean absolute error of each chunk against `target`, and their sum.
pub fn action_loss(chunks: &[Array], target: &Array) -> Result<(f64, Vec<f64>)> {
    let mut per = Vec::with_capacity(chunks.len());
    for c in chunks {
        if c.shape() != target.shape() {
            return Err(dim_err!("chunk {:?} vs target {:?}", c.shape(), target.shape()));
        }
        let n = target.len().max(1) as f64;
        per.push(c.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n);
    }
    Ok((per.iter().sum(), per))
}

/// `sum p ln p` with `0 ln 0 = 0`.
pub fn entropy_reg(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// `sum_{i<j} max(0, cos(z_i, z_j))`; zero vectors contribute nothing.
pub fn diversity_reg(z: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for i in 0..z.len() {
        for j in i + 1..z.len() {
            total += cosine(&z[i], &z[j]).max(0.0);
        }
    }
    total
}

pub fn stage1_loss(profile: &LossProfile, lambda_ent: f64, lambda_div: f64) -> f64 {
    profile.l_action + lambda_ent * profile.l_ent + lambda_div * profile.l_div
}

/// `softmax(-loss / tau)`.
pub fn target_distribution(per_iter_loss: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if per_iter_loss.is_empty() {
        return Err(contract_err!("target distribution over zero iterations"));
    }
    let logits: Vec<f64> = per_iter_loss.iter().map(|l| -l / tau).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// `KL(q || p~)` where `p~` folds the residual mass into the last step and
/// is floored at [`KL_FLOOR`].
pub fn stage2_loss(q: &[f64], trace: &HaltingTrace) -> Result<f64> {
    if q.len() != trace.p.len() {
        return Err(dim_err!("{} targets for {} iterations", q.len(), trace.p.len()));
    }
    Ok(kl_divergence(q, &trace.folded()))
}

pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| qi * (qi.ln() - pi.max(KL_FLOOR).ln()))
        .sum()
}

/// Batch-mean action loss on the tape: the sum over iterations of each
/// iteration's mean absolute error.
pub fn action_loss_tape(tape: &Tape, chunks: &[Var], target: Var) -> Result<Var> {
    let mut terms = Vec::with_capacity(chunks.len());
    for &c in chunks {
        terms.push(tape.mean(tape.abs(tape.sub(c, target)?)));
    }
    sum_scalars(tape, &terms)
}

fn sum_scalars(tape: &Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = *terms.first().ok_or_else(|| contract_err!("sum over zero terms"))?;
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Batch mean of `sum_n p(n) ln p(n)` over `batch x 1` halting nodes.
pub fn entropy_tape(tape: &Tape, p: &[Var]) -> Result<Var> {
    let terms: Vec<Var> = p.iter().map(|&v| tape.mean(tape.xlogx(v))).collect();
    sum_scalars(tape, &terms)
}

/// Batch mean of the hinged pairwise cosine over `batch x d` pooled nodes.
pub fn diversity_tape(tape: &Tape, z: &[Var]) -> Result<Var> {
    let mut terms = Vec::new();
    for i in 0..z.len() {
        for j in i + 1..z.len() {
            terms.push(tape.mean(tape.relu(tape.row_cosine(z[i], z[j])?)));
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Array::scalar(0.0)));
    }
    sum_scalars(tape, &terms)
}

/// Batch-mean `KL(q || p~)`. `q[n]` holds the `batch x 1` target column of
/// iteration `n`; `p` and `r` come from the on-tape recurrence.
pub fn stage2_tape(tape: &Tape, q: &[Array], p: &[Var], r: &[Var]) -> Result<Var> {
    let n = p.len();
    if q.len() != n || r.len() != n + 1 || n == 0 {
        return Err(dim_err!("{} targets, {} halting nodes, {} remainders", q.len(), n, r.len()));
    }
    let batch = tape.shape(p[0])[0] as f64;
    let mut entropy_part = 0.0;
    let mut terms = Vec::with_capacity(n);
    for (i, qi) in q.iter().enumerate() {
        entropy_part += qi.data().iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
        let folded = if i + 1 == n { tape.add(p[i], r[n])? } else { p[i] };
        let logp = tape.log_floor(folded, KL_FLOOR);
        terms.push(tape.sum(tape.mul(tape.constant(qi.clone()), logp)?));
    }
    let cross = sum_scalars(tape, &terms)?;
    Ok(tape.affine(cross, -1.0 / batch, entropy_part / batch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::rma;

    #[test]
    fn action_loss_examples() {
        let target = Array::full(&[8, 3], 0.2);
        let (total, per) = action_loss(&[target.clone(), target.clone()], &target).unwrap();
        assert_eq!(total, 0.0);
        assert_eq!(per, vec![0.0, 0.0]);
        let off = target.map(|v| v + 1.0);
        let (total, _) = action_loss(&[off, target.clone()], &target).unwrap();
        assert!((total - 1.0).abs() < 1e-15);
        assert!(action_loss(&[Array::zeros(&[4, 3])], &target).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy_reg(&[1.0, 0.0, 0.0]), 0.0);
        assert!((entropy_reg(&[0.5, 0.5]) + 2f64.ln()).abs() < 1e-15);
        assert_eq!(entropy_reg(&[0.0; 3]), 0.0);
    }

    #[test]
    fn diversity_examples() {
        let z = vec![vec![1.0, 2.0]; 4];
        assert!((diversity_reg(&z) - 6.0).abs() < 1e-12);
        let ortho = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        assert_eq!(diversity_reg(&ortho), 0.0);
        assert_eq!(diversity_reg(&[vec![1.0, -2.0], vec![-1.0, 2.0]]), 0.0);
        assert_eq!(diversity_reg(&[vec![0.0, 0.0], vec![1.0, 2.0]]), 0.0);
    }

    #[test]
    fn stage1_weighting() {
        let profile = LossProfile {
            per_iter_loss: vec![2.0],
            l_action: 2.0,
            l_ent: -0.5,
            l_div: 3.0,
        };
        assert!((stage1_loss(&profile, 0.001, 0.01) - 2.0295).abs() < 1e-15);
        assert_eq!(stage1_loss(&profile, 0.0, 0.0), 2.0);
    }

    #[test]
    fn target_distribution_examples() {
        let q = target_distribution(&[0.3; 4], 0.5).unwrap();
        assert!(q.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let q = target_distribution(&[0.0, 0.5 * 2f64.ln()], 0.5).unwrap();
        assert!((q[0] - 2.0 / 3.0).abs() < 1e-15 && (q[1] - 1.0 / 3.0).abs() < 1e-15);
        let tau = 0.01;
        let q = target_distribution(&[1.0, 1.0 + 10.0 * tau, 1.0 + 12.0 * tau], tau).unwrap();
        assert!(q[0] > 0.99);
        assert!(matches!(target_distribution(&[1.0], 0.0), Err(Error::Config(_))));
        assert!(matches!(target_distribution(&[1.0], -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn kl_examples() {
        let t = rma(&[0.5, 1.0]);
        assert_eq!(stage2_loss(&t.folded(), &t).unwrap(), 0.0);
        let half = rma(&[0.5, 0.0]);
        assert_eq!(half.folded(), vec![0.5, 0.5]);
        assert!((stage2_loss(&[1.0, 0.0], &half).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn tape_losses_match_plain_values() {
        let tape = Tape::inference();
        let s = [[0.2, 0.7], [0.5, 0.1], [0.9, 0.3]];
        let scores: Vec<Var> = s
            .iter()
            .map(|row| tape.constant(Array::from_vec(vec![2, 1], row.to_vec()).unwrap()))
            .collect();
        let (p, r) = crate::heads::rma_tape(&tape, &scores).unwrap();
        let q: Vec<Array> = [[0.1, 0.5], [0.3, 0.2], [0.6, 0.3]]
            .iter()
            .map(|row| Array::from_vec(vec![2, 1], row.to_vec()).unwrap())
            .collect();
        let kl = stage2_tape(&tape, &q, &p, &r).unwrap();
        let ent = entropy_tape(&tape, &p).unwrap();
        let mut kl_ref = 0.0;
        let mut ent_ref = 0.0;
        for b in 0..2 {
            let t = rma(&[s[0][b], s[1][b], s[2][b]]);
            let qb = [q[0].data()[b], q[1].data()[b], q[2].data()[b]];
            kl_ref += stage2_loss(&qb, &t).unwrap() / 2.0;
            ent_ref += entropy_reg(&t.p) / 2.0;
        }
        assert!((tape.value(kl).item() - kl_ref).abs() < 1e-14);
        assert!((tape.value(ent).item() - ent_ref).abs() < 1e-14);
    }
}
