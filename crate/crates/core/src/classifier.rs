//! Relation logits, adaptive-threshold loss and the threshold decision rule.
//!
//! Logit index `R` (the last one) is the learned threshold class TH.

use std::collections::BTreeSet;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{logistic, Matrix};

/// Two-layer head `W_b tanh(W_a r + b_a) + b_b`, matrices stored output-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// `hidden × (2d + d_node)`.
    pub w_a: Matrix,
    pub b_a: Vec<f64>,
    /// `(R + 1) × hidden`.
    pub w_b: Matrix,
    pub b_b: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierVars {
    pub w_a: Var,
    pub b_a: Var,
    pub w_b: Var,
    pub b_b: Var,
}

impl ClassifierParams {
    pub fn leaves(&self, tape: &mut Tape) -> ClassifierVars {
        ClassifierVars {
            w_a: tape.leaf_matrix(self.w_a.rows(), self.w_a.cols(), self.w_a.as_slice().to_vec()),
            b_a: tape.leaf(self.b_a.clone()),
            w_b: tape.leaf_matrix(self.w_b.rows(), self.w_b.cols(), self.w_b.as_slice().to_vec()),
            b_b: tape.leaf(self.b_b.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLogits {
    pub pair: (usize, usize),
    /// `R + 1` entries, the last is TH.
    pub logits: Vec<f64>,
}

impl PairLogits {
    pub fn num_relations(&self) -> usize {
        self.logits.len() - 1
    }

    pub fn threshold(&self) -> f64 {
        self.logits[self.num_relations()]
    }

    /// Per-relation logistic probabilities (reporting only).
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| logistic(l)).collect()
    }
}

pub fn pair_logits_on(tape: &mut Tape, vars: &ClassifierVars, e_head: Var, e_tail: Var, node: Var) -> Var {
    let r = tape.concat(&[e_head, e_tail, node]);
    let h = tape.matvec(vars.w_a, r);
    let h = tape.add(h, vars.b_a);
    let h = tape.tanh(h);
    let o = tape.matvec(vars.w_b, h);
    tape.add(o, vars.b_b)
}

pub fn pair_logits(
    pair: (usize, usize),
    e_head: &[f64],
    e_tail: &[f64],
    node: &[f64],
    params: &ClassifierParams,
) -> Result<PairLogits> {
    let width = e_head.len() + e_tail.len() + node.len();
    if width != params.w_a.cols() {
        return Err(Error::Dimension {
            what: "classifier input".into(),
            expected: params.w_a.cols(),
            found: width,
        });
    }
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape);
    let eh = tape.leaf(e_head.to_vec());
    let et = tape.leaf(e_tail.to_vec());
    let p = tape.leaf(node.to_vec());
    let out = pair_logits_on(&mut tape, &vars, eh, et, p);
    Ok(PairLogits {
        pair,
        logits: tape.value(out).to_vec(),
    })
}

/// Record the adaptive-threshold loss for one pair. `gold` must not contain TH.
pub fn atl_loss_on(tape: &mut Tape, logits: Var, gold: &BTreeSet<u32>) -> Var {
    let r = tape.value(logits).len() - 1;
    let th = r;
    let mut terms = Vec::new();
    if !gold.is_empty() {
        let mut pos: Vec<usize> = gold.iter().map(|&g| g as usize).collect();
        pos.push(th);
        let lse = tape.logsumexp(logits, &pos);
        for &g in gold {
            let l = tape.index(logits, g as usize);
            terms.push(tape.sub(lse, l));
        }
    }
    let mut neg: Vec<usize> = (0..r).filter(|i| !gold.contains(&(*i as u32))).collect();
    neg.push(th);
    let lse = tape.logsumexp(logits, &neg);
    let l_th = tape.index(logits, th);
    terms.push(tape.sub(lse, l_th));
    tape.sum(&terms)
}

fn check_gold(logits: &[f64], gold: &BTreeSet<u32>) -> Result<()> {
    let r = logits.len().checked_sub(1).ok_or_else(|| Error::Empty("logit vector".into()))?;
    if let Some(&bad) = gold.iter().find(|&&g| g as usize >= r) {
        return Err(Error::Config(if bad as usize == r {
            format!("threshold class {r} cannot be a gold relation")
        } else {
            format!("gold relation {bad} outside [0, {r})")
        }));
    }
    Ok(())
}

pub fn atl_loss(pl: &PairLogits, gold: &BTreeSet<u32>) -> Result<f64> {
    atl_loss_with_grad(&pl.logits, gold).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the logits.
pub fn atl_loss_with_grad(logits: &[f64], gold: &BTreeSet<u32>) -> Result<(f64, Vec<f64>)> {
    check_gold(logits, gold)?;
    let mut tape = Tape::new();
    let l = tape.leaf(logits.to_vec());
    let loss = atl_loss_on(&mut tape, l, gold);
    let g = tape.backward(loss).get_or_zero(&tape, l);
    Ok((tape.scalar(loss), g))
}

/// Relations whose logit is strictly above the threshold logit.
pub fn predict(pl: &PairLogits) -> BTreeSet<u32> {
    let th = pl.threshold();
    pl.logits[..pl.num_relations()]
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > th)
        .map(|(i, _)| i as u32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pl(logits: Vec<f64>) -> PairLogits {
        PairLogits { pair: (0, 1), logits }
    }

    fn gold(ids: &[u32]) -> BTreeSet<u32> {
        ids.iter().copied().collect()
    }

    #[test]
    fn zero_params_give_bias() {
        let p = ClassifierParams {
            w_a: Matrix::zeros(4, 14),
            b_a: vec![0.0; 4],
            w_b: Matrix::zeros(4, 4),
            b_b: vec![0.1, -0.2, 0.3, 0.4],
        };
        let out = pair_logits((0, 1), &[1.0; 4], &[2.0; 4], &[3.0; 6], &p).unwrap();
        assert_eq!(out.logits, p.b_b);
    }

    #[test]
    fn bias_shift_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = |r, c| Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random::<f64>() - 0.5).collect());
        let mut p = ClassifierParams {
            w_a: m(4, 14),
            b_a: vec![0.0; 4],
            w_b: m(4, 4),
            b_b: vec![0.25, 0.5, 0.0, 0.0],
        };
        let args = ([0.3; 4], [-0.1; 4], [0.7; 6]);
        let a = pair_logits((0, 1), &args.0, &args.1, &args.2, &p).unwrap();
        p.b_b[1] *= 2.0;
        let b = pair_logits((0, 1), &args.0, &args.1, &args.2, &p).unwrap();
        assert_eq!(b.logits[1] - a.logits[1], 0.5);
        assert_eq!(a.logits[0], b.logits[0]);
    }

    #[test]
    fn logits_match_dense_affine_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, dn, r) = (4, 6, 3);
        let inw = 2 * d + dn;
        let mut v = |n: usize| (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect::<Vec<f64>>();
        let p = ClassifierParams {
            w_a: Matrix::from_vec(d, inw, v(d * inw)),
            b_a: v(d),
            w_b: Matrix::from_vec(r + 1, d, v((r + 1) * d)),
            b_b: v(r + 1),
        };
        let (eh, et, node) = (v(d), v(d), v(dn));
        let got = pair_logits((1, 0), &eh, &et, &node, &p).unwrap();
        let input: Vec<f64> = eh.iter().chain(&et).chain(&node).copied().collect();
        for o in 0..=r {
            let mut s = p.b_b[o];
            for h in 0..d {
                let mut a = p.b_a[h];
                for i in 0..inw {
                    a += p.w_a[(h, i)] * input[i];
                }
                s += p.w_b[(o, h)] * a.tanh();
            }
            assert!((got.logits[o] - s).abs() < 1e-14);
        }
    }

    #[test]
    fn no_positive_equal_logits_is_log_four() {
        // softmax over {r0, r1, r2, TH} with equal logits: -log(1/4)
        let l = atl_loss(&pl(vec![0.7; 4]), &gold(&[])).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 5e-5);
    }

    #[test]
    fn confident_positive_has_tiny_loss() {
        // logits [r0 = +10, r1 = -10, TH = 0], gold {r0}
        let l = atl_loss(&pl(vec![10.0, -10.0, 0.0]), &gold(&[0])).unwrap();
        let e10 = 10f64.exp();
        let oracle = -(e10 / (e10 + 1.0)).ln() - (1.0 / (1.0 + (-10f64).exp())).ln();
        assert!((l - oracle).abs() < 1e-15);
        assert!((l - 9.08e-5).abs() < 1e-6, "{l}");
    }

    #[test]
    fn threshold_in_gold_rejected() {
        assert!(atl_loss(&pl(vec![0.0; 3]), &gold(&[2])).is_err());
        assert!(atl_loss(&pl(vec![0.0; 3]), &gold(&[5])).is_err());
    }

    #[test]
    fn decision_rule() {
        let p = pl(vec![1.0, 0.2, 0.5]);
        assert_eq!(predict(&p), gold(&[0]));
        assert!(predict(&pl(vec![-1.0, 0.2, 0.5])).is_empty());
        assert!(predict(&pl(vec![0.5, 0.5])).is_empty());
    }

    #[test]
    fn gradient_blocks_sum_to_zero_and_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..50 {
            let r = 1 + trial % 5;
            let logits: Vec<f64> = (0..=r).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
            let g: BTreeSet<u32> = (0..r as u32).filter(|_| rng.random::<f64>() < 0.4).collect();
            let (_, grad) = atl_loss_with_grad(&logits, &g).unwrap();
            // the whole gradient is a sum of per-block softmax gradients, each summing to 0
            assert!(grad.iter().sum::<f64>().abs() < 1e-12);
            let h = 1e-5;
            for i in 0..=r {
                let mut p = logits.clone();
                p[i] += h;
                let mut m = logits.clone();
                m[i] -= h;
                let num = (atl_loss_with_grad(&p, &g).unwrap().0 - atl_loss_with_grad(&m, &g).unwrap().0) / (2.0 * h);
                let rel = (num - grad[i]).abs() / num.abs().max(grad[i].abs()).max(1e-4);
                assert!(rel <= 1e-6, "trial {trial} index {i}: {} vs {num}", grad[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn loss_nonnegative_and_shift_invariant(
            logits in prop::collection::vec(-20.0f64..20.0, 2..8),
            mask in prop::collection::vec(any::<bool>(), 8),
            shift in -50.0f64..50.0,
        ) {
            let r = logits.len() - 1;
            let g: BTreeSet<u32> = (0..r as u32).filter(|&i| mask[i as usize]).collect();
            let base = atl_loss(&pl(logits.clone()), &g).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let moved = atl_loss(&pl(shifted.clone()), &g).unwrap();
            prop_assert!(base >= 0.0);
            prop_assert!((base - moved).abs() <= 1e-9);
            prop_assert_eq!(predict(&pl(logits)), predict(&pl(shifted)));
        }
    }
}
