//! Structural and discriminative losses.
//!
//! Each loss has a tape builder (`*_on`) used in training and a value-level
//! wrapper on plain tensors.

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub lambda_pc: f64,
    pub lambda_sib: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// `None` means one negative per positive.
    pub negatives_per_image: Option<usize>,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams { lambda_pc: 0.01, lambda_sib: 0.0001, lr: 0.05, batch_size: 8, negatives_per_image: None, seed: 7 }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda-pc", self.lambda_pc), ("lambda-sib", self.lambda_sib), ("lr", self.lr)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l: f64,
    pub l_struct: f64,
    pub l_disc: f64,
    pub l_pc: f64,
    pub l_sib: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,L,L_disc,L_PC,L_SIB";

    pub fn csv_row(&self, step: usize) -> String {
        format!("{step},{},{},{},{}", self.l, self.l_disc, self.l_pc, self.l_sib)
    }
}

/// Weighted sum of the components; rejects non-finite inputs.
pub fn total_loss(l_pc: f64, l_sib: f64, l_disc: f64, h: &Hyperparams) -> Result<LossBreakdown> {
    for (component, v) in [("L_PC", l_pc), ("L_SIB", l_sib), ("L_disc", l_disc)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { component });
        }
    }
    let l_struct = h.lambda_pc * l_pc + h.lambda_sib * l_sib;
    Ok(LossBreakdown { l: l_struct + l_disc, l_struct, l_disc, l_pc, l_sib })
}

/// Form of the discriminative term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiscLoss {
    /// `-Y * sigmoid(dot)`.
    #[default]
    Literal,
    /// `-log sigmoid(Y * dot)`.
    LogSigmoid,
}

fn check_label(label: i8) -> Result<f64> {
    match label {
        1 => Ok(1.0),
        -1 => Ok(-1.0),
        y => Err(Error::Invalid(format!("label must be -1 or +1, got {y}"))),
    }
}

fn check_same_shape(op: &'static str, tape: &Tape, vars: &[Var]) -> Result<()> {
    let first = tape.value(vars[0]).shape();
    if tape.value(vars[0]).rank() != 2 {
        return Err(Error::shape(op, &[first]));
    }
    if let Some(v) = vars.iter().find(|&&v| tape.value(v).shape() != first) {
        return Err(Error::shape(op, &[first, tape.value(*v).shape()]));
    }
    Ok(())
}

/// `(1/count) * ||parent - max(children)||^2` for one parent-child pair.
pub fn loss_pc_on(tape: &mut Tape, parent: Var, children: &[Var], count: usize) -> Result<Var> {
    if children.is_empty() || count == 0 {
        return Err(Error::Invalid("parent-child loss needs at least one child and a positive count".into()));
    }
    let mut all = vec![parent];
    all.extend_from_slice(children);
    check_same_shape("loss_pc", tape, &all)?;
    let union = tape.max_n(children)?;
    let diff = tape.sub(parent, union)?;
    let sq = tape.squared_norm(diff)?;
    tape.scale(sq, 1.0 / count as f64)
}

/// `-(1/count) * sum_m sum_p W_m log(max_n A / sum_n A)`.
///
/// Pixels where a set's masks sum to zero contribute nothing.
pub fn loss_sib_on(tape: &mut Tape, sets: &[Vec<Var>], count: usize) -> Result<Var> {
    if count == 0 {
        return Err(Error::Invalid("sibling loss needs a positive count".into()));
    }
    let mut terms = Vec::new();
    for set in sets {
        if set.is_empty() {
            return Err(Error::Invalid("empty sibling set".into()));
        }
        check_same_shape("loss_sib", tape, set)?;
        if set.len() == 1 {
            continue;
        }
        let mx = tape.max_n(set)?;
        let sm = tape.add_all(set)?;
        let zero_sum = tape.value(sm).map(|s| if s == 0.0 { 1.0 } else { 0.0 });
        let (mx, sm) = if zero_sum.data().iter().any(|&z| z > 0.0) {
            let z = tape.constant(zero_sum);
            (tape.add(mx, z)?, tape.add(sm, z)?)
        } else {
            (mx, sm)
        };
        let weight = tape.scale(sm, 1.0 / set.len() as f64)?;
        let lm = tape.log(mx)?;
        let ls = tape.log(sm)?;
        let ratio = tape.sub(lm, ls)?;
        let weighted = tape.mul(weight, ratio)?;
        terms.push(tape.sum(weighted)?);
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let total = tape.add_all(&terms)?;
    tape.scale(total, -1.0 / count as f64)
}

/// Discriminative term for one pair, given the embedding dot product.
pub fn loss_disc_on(tape: &mut Tape, dot: Var, label: i8, form: DiscLoss) -> Result<Var> {
    let y = check_label(label)?;
    match form {
        DiscLoss::Literal => {
            let s = tape.sigmoid(dot)?;
            tape.scale(s, -y)
        }
        DiscLoss::LogSigmoid => {
            let m = tape.scale(dot, y)?;
            let s = tape.sigmoid(m)?;
            let l = tape.log(s)?;
            tape.scale(l, -1.0)
        }
    }
}

fn constants(tape: &mut Tape, masks: &[&Tensor]) -> Vec<Var> {
    masks.iter().map(|m| tape.constant((*m).clone())).collect()
}

pub fn loss_pc(parent: &Tensor, children: &[&Tensor], count: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(parent.clone());
    let c = constants(&mut tape, children);
    let l = loss_pc_on(&mut tape, p, &c, count)?;
    Ok(tape.value(l).item())
}

pub fn loss_sib(sets: &[Vec<&Tensor>], count: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Vec<Var>> = sets.iter().map(|s| constants(&mut tape, s)).collect();
    let l = loss_sib_on(&mut tape, &vars, count)?;
    Ok(tape.value(l).item())
}

/// `-Y * score` for an already squashed match score.
pub fn loss_disc(score: f64, label: i8) -> Result<f64> {
    Ok(-check_label(label)? * score)
}

/// Average attention per pixel across the members of one sibling set.
#[derive(Debug, Clone, PartialEq)]
pub struct SiblingWeightMap(pub Tensor);

impl SiblingWeightMap {
    pub fn compute(masks: &[&Tensor]) -> Result<Self> {
        let first = masks.first().ok_or_else(|| Error::Invalid("empty sibling set".into()))?;
        let mut acc = Tensor::zeros(first.shape());
        for m in masks {
            acc.axpy(1.0 / masks.len() as f64, m)?;
        }
        Ok(SiblingWeightMap(acc))
    }
}

/// Match score from a dot product.
pub fn score_of(dot: f64) -> f64 {
    sigmoid(dot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::uniform(&[n, n], lo, hi, rng)
    }

    fn pc_oracle(parent: &Tensor, children: &[&Tensor], count: usize) -> f64 {
        let mut s = 0.0;
        for i in 0..parent.len() {
            let mut m = f64::NEG_INFINITY;
            for c in children {
                m = m.max(c.data()[i]);
            }
            s += (parent.data()[i] - m).powi(2);
        }
        s / count as f64
    }

    fn sib_oracle(sets: &[Vec<&Tensor>], count: usize) -> f64 {
        let mut s = 0.0;
        for set in sets {
            for i in 0..set[0].len() {
                let vals: Vec<f64> = set.iter().map(|m| m.data()[i]).collect();
                let sum: f64 = vals.iter().sum();
                if sum == 0.0 {
                    continue;
                }
                let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                s += sum / vals.len() as f64 * (mx / sum).ln();
            }
        }
        -s / count as f64
    }

    #[test]
    fn pc_exact_union_is_zero() {
        let a = t(&[2, 2], &[0.1, 0.9, 0.3, 0.2]);
        let b = t(&[2, 2], &[0.5, 0.2, 0.3, 0.1]);
        let union = t(&[2, 2], &[0.5, 0.9, 0.3, 0.2]);
        assert_eq!(loss_pc(&union, &[&a, &b], 3).unwrap(), 0.0);
    }

    #[test]
    fn pc_hand_value() {
        let parent = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let child = Tensor::full(&[2, 2], 0.0001);
        let want = (1.0f64 - 0.0001).powi(2) + 3.0 * 0.0001f64.powi(2);
        assert!((loss_pc(&parent, &[&child], 1).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn pc_rejects_bad_inputs() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(matches!(loss_pc(&a, &[&b], 1), Err(Error::ShapeMismatch { .. })));
        assert!(loss_pc(&a, &[], 1).is_err());
    }

    #[test]
    fn pc_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_mask(&mut rng, 4, 0.0, 1.0);
        let cs: Vec<Tensor> = (0..3).map(|_| random_mask(&mut rng, 4, 0.0, 1.0)).collect();
        let refs: Vec<&Tensor> = cs.iter().collect();
        assert!((loss_pc(&p, &refs, 2).unwrap() - pc_oracle(&p, &refs, 2)).abs() < 1e-12);
    }

    #[test]
    fn sib_singleton_is_zero_and_hand_value() {
        let a = t(&[1, 1], &[0.6]);
        let b = t(&[1, 1], &[0.2]);
        assert_eq!(loss_sib(&[vec![&a]], 1).unwrap(), 0.0);
        let l = loss_sib(&[vec![&a, &b]], 1).unwrap();
        assert!((l - (-0.4 * 0.75f64.ln())).abs() < 1e-12);
        assert!((l - 0.11507).abs() < 1e-5);
        assert_eq!(SiblingWeightMap::compute(&[&a, &b]).unwrap().0.data(), &[0.4]);
    }

    #[test]
    fn sib_zero_sum_pixels_contribute_nothing() {
        let a = t(&[1, 2], &[0.0, 0.5]);
        let b = t(&[1, 2], &[0.0, 0.5]);
        let l = loss_sib(&[vec![&a, &b]], 1).unwrap();
        assert!((l - (-0.5 * 0.5f64.ln())).abs() < 1e-12);
        // the gradient stays finite as well
        let mut tape = Tape::new();
        let va = tape.leaf(a.clone());
        let vb = tape.leaf(b.clone());
        let out = loss_sib_on(&mut tape, &[vec![va, vb]], 1).unwrap();
        let g = tape.backward(out).unwrap();
        assert!(g.wrt(&tape, va).all_finite());
    }

    #[test]
    fn disc_values() {
        assert_eq!(loss_disc(score_of(0.0), 1).unwrap(), -0.5);
        assert_eq!(loss_disc(score_of(0.0), -1).unwrap(), 0.5);
        assert!((loss_disc(score_of(2.0), 1).unwrap() + 0.8808).abs() < 1e-4);
        assert!(loss_disc(0.5, 0).is_err());
    }

    #[test]
    fn composite_values() {
        let h = Hyperparams::default();
        let b = total_loss(1.0, 1.0, 1.0, &h).unwrap();
        assert!((b.l - 1.0101).abs() < 1e-12);
        assert!((b.l - b.l_struct - b.l_disc).abs() < 1e-15);
        let disc_only = Hyperparams { lambda_pc: 0.0, lambda_sib: 0.0, ..h.clone() };
        let b = total_loss(3.0, 2.0, -0.4, &disc_only).unwrap();
        assert_eq!(b.l, -0.4);
        assert_eq!((b.l_pc, b.l_sib), (3.0, 2.0));
        let pc_only = Hyperparams { lambda_sib: 0.0, ..h.clone() };
        assert!((total_loss(1.0, 5.0, 0.0, &pc_only).unwrap().l - 0.01).abs() < 1e-15);
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.0, &h), Err(Error::NonFinite { component: "L_PC" })));
    }

    #[test]
    fn csv_row_format() {
        let b = LossBreakdown { l: 1.5, l_struct: 0.5, l_disc: 1.0, l_pc: 40.0, l_sib: 1000.0 };
        assert_eq!(b.csv_row(3), "3,1.5,1,40,1000");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let others: Vec<Tensor> = (0..2).map(|_| random_mask(&mut rng, 4, 0.1, 0.9)).collect();
        let x = random_mask(&mut rng, 4, 0.1, 0.9);
        let err = finite_difference_check(
            |tape, v| {
                let o: Vec<Var> = others.iter().map(|m| tape.constant(m.clone())).collect();
                loss_pc_on(tape, o[0], &[v, o[1]], 2)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "pc {err}");
        let err = finite_difference_check(
            |tape, v| {
                let o: Vec<Var> = others.iter().map(|m| tape.constant(m.clone())).collect();
                loss_sib_on(tape, &[vec![v, o[0], o[1]]], 1)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "sib {err}");
        for form in [DiscLoss::Literal, DiscLoss::LogSigmoid] {
            let d = Tensor::scalar(rng.gen_range(-3.0..3.0));
            let err = finite_difference_check(|tape, v| loss_disc_on(tape, v, -1, form), &d, 1e-5).unwrap();
            assert!(err <= 1e-4, "disc {err}");
        }
    }

    proptest! {
        #[test]
        fn sib_scales_linearly_with_alpha(seed in 0u64..1000, alpha in 0.01f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ms: Vec<Tensor> = (0..3).map(|_| random_mask(&mut rng, 3, 0.01, 1.0)).collect();
            let scaled: Vec<Tensor> = ms.iter().map(|m| m.map(|v| v * alpha)).collect();
            let l = loss_sib(&[ms.iter().collect()], 1).unwrap();
            let ls = loss_sib(&[scaled.iter().collect()], 1).unwrap();
            prop_assert!((ls - alpha * l).abs() <= 1e-12 * l.abs().max(1.0));
        }

        #[test]
        fn losses_non_negative_and_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ms: Vec<Tensor> = (0..3).map(|_| random_mask(&mut rng, 5, 0.0, 1.0)).collect();
            let a = loss_sib(&[vec![&ms[0], &ms[1], &ms[2]]], 2).unwrap();
            let b = loss_sib(&[vec![&ms[2], &ms[0], &ms[1]]], 2).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(loss_pc(&ms[0], &[&ms[1], &ms[2]], 1).unwrap() >= 0.0);
        }

        #[test]
        fn vectorized_matches_scalar_oracle(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ms: Vec<Tensor> = (0..4).map(|_| random_mask(&mut rng, 8, 0.0, 1.0)).collect();
            let refs: Vec<&Tensor> = ms.iter().collect();
            let pc = loss_pc(refs[0], &refs[1..], 3).unwrap();
            prop_assert!((pc - pc_oracle(refs[0], &refs[1..], 3)).abs() <= 1e-10);
            let sets = vec![refs[..2].to_vec(), refs[1..].to_vec()];
            let sib = loss_sib(&sets, 2).unwrap();
            prop_assert!((sib - sib_oracle(&sets, 2)).abs() <= 1e-10);
        }
    }
}
