//! Finite-difference checks of every primitive, every loss and the full
//! training pipeline, run over many random trials.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_difference_check, max_relative_error, Primitive, Tape, Var};
use crate::error::Result;
use crate::losses::{loss_disc_on, loss_pc_on, loss_sib_on, DiscLoss};
use crate::model::{Bound, Model, ModelConfig};
use crate::parse::GroundingOptions;
use crate::scenes::{generate_scene, SceneSpec};
use crate::tensor::Tensor;
use crate::training::{build_loss, make_batch, Ablation, TrainConfig, TrainingSet};

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub trials: usize,
    pub max_error: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_error <= TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Values at least `gap` apart so that max comparisons stay away from ties.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize], count: usize) -> Vec<Tensor> {
    let n: usize = shape.iter().product();
    let mut out = vec![Vec::with_capacity(n); count];
    for _ in 0..n {
        let mut levels: Vec<f64> = (0..count).map(|k| k as f64 * 0.1 + rng.gen_range(0.0..0.05)).collect();
        for i in (1..levels.len()).rev() {
            levels.swap(i, rng.gen_range(0..=i));
        }
        for (o, v) in out.iter_mut().zip(levels) {
            o.push(v + 0.1);
        }
    }
    out.into_iter().map(|d| Tensor::new(shape.to_vec(), d).unwrap()).collect()
}

/// Gradient of `sum(op(inputs) * w)` with respect to each input in turn.
fn check_primitive(op: &Primitive, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> Result<f64> {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let out = op.forward(&refs)?;
    let w = uniform(rng, out.shape(), 0.5, 1.5);
    let mut worst: f64 = 0.0;
    for j in 0..inputs.len() {
        let err = finite_difference_check(
            |tape, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == j { x } else { tape.constant(t.clone()) })
                    .collect();
                let y = tape.apply(op.clone(), &vars)?;
                let wv = tape.constant(w.clone());
                let p = tape.mul(y, wv)?;
                tape.sum(p)
            },
            &inputs[j],
            EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

type Generator = fn(&mut ChaCha8Rng) -> (Primitive, Vec<Tensor>);

fn primitive_cases() -> Vec<(&'static str, Generator)> {
    vec![
        ("add", |r| (Primitive::Add, vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)])),
        ("sub", |r| (Primitive::Sub, vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)])),
        ("mul", |r| (Primitive::Mul, vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)])),
        ("scalar_mul", |r| {
            let c = r.gen_range(-2.0..2.0);
            (Primitive::ScalarMul(c), vec![uniform(r, &[5], -1.0, 1.0)])
        }),
        ("add_scalar", |r| {
            let c = r.gen_range(-2.0..2.0);
            (Primitive::AddScalar(c), vec![uniform(r, &[5], -1.0, 1.0)])
        }),
        ("matmul", |r| (Primitive::MatMul, vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)])),
        ("conv2d", |r| {
            let stride = r.gen_range(1..=2);
            (Primitive::Conv2d { stride, pad: 1 }, vec![uniform(r, &[5, 6, 2], -1.0, 1.0), uniform(r, &[3, 3, 2, 3], -1.0, 1.0)])
        }),
        ("mean_pool", |r| (Primitive::MeanPool, vec![uniform(r, &[3, 4, 5], -1.0, 1.0)])),
        ("max_n", |r| (Primitive::MaxN, spread(r, &[3, 3], 3))),
        ("log", |r| (Primitive::Log, vec![uniform(r, &[6], 0.2, 3.0)])),
        ("sigmoid", |r| (Primitive::Sigmoid, vec![uniform(r, &[6], -4.0, 4.0)])),
        ("tanh", |r| (Primitive::Tanh, vec![uniform(r, &[6], -3.0, 3.0)])),
        ("powf", |r| {
            let p = r.gen_range(-1.5..2.5);
            (Primitive::Powf(p), vec![uniform(r, &[6], 0.3, 2.0)])
        }),
        ("dot", |r| (Primitive::Dot, vec![uniform(r, &[7], -1.0, 1.0), uniform(r, &[7], -1.0, 1.0)])),
        ("sum", |r| (Primitive::Sum, vec![uniform(r, &[2, 5], -1.0, 1.0)])),
        ("squared_norm", |r| (Primitive::SquaredNorm, vec![uniform(r, &[2, 5], -1.0, 1.0)])),
        ("concat", |r| (Primitive::Concat, vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[1, 3], -1.0, 1.0)])),
        ("reshape", |r| (Primitive::Reshape(vec![3, 2]), vec![uniform(r, &[2, 3], -1.0, 1.0)])),
        ("gather_rows", |r| {
            let rows = vec![r.gen_range(0..4), r.gen_range(0..4), r.gen_range(0..4)];
            (Primitive::GatherRows(rows), vec![uniform(r, &[4, 3], -1.0, 1.0)])
        }),
    ]
}

fn run<F>(name: &str, trials: usize, seed: u64, mut trial: F) -> Result<CheckRow>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        worst = worst.max(trial(&mut rng)?);
    }
    Ok(CheckRow { name: name.to_string(), trials, max_error: worst })
}

pub fn primitive_checks(trials: usize, seed: u64) -> Result<Vec<CheckRow>> {
    primitive_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, gen))| {
            run(name, trials, seed ^ i as u64, |r| {
                let (op, inputs) = gen(r);
                check_primitive(&op, &inputs, r)
            })
        })
        .collect()
}

fn masks(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<Tensor> {
    (0..n).map(|_| uniform(rng, &[4, 4], lo, hi)).collect()
}

/// Loss checks on random 4x4 masks, plus the weighted composite.
pub fn loss_checks(trials: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let pc = run("loss_pc", trials, seed, |r| {
        let ms = spread(r, &[4, 4], 4);
        let x = ms[0].clone();
        finite_difference_check(
            |tape, v| {
                let c: Vec<Var> = ms[1..].iter().map(|m| tape.constant(m.clone())).collect();
                // the checked mask plays parent and child in turn
                let a = loss_pc_on(tape, v, &c, 2)?;
                let b = loss_pc_on(tape, c[0], &[v, c[1], c[2]], 2)?;
                tape.add(a, b)
            },
            &x,
            EPS,
        )
    })?;
    let sib = run("loss_sib", trials, seed + 1, |r| {
        let ms = masks(r, 3, 0.1, 0.9);
        finite_difference_check(
            |tape, v| {
                let c: Vec<Var> = ms[1..].iter().map(|m| tape.constant(m.clone())).collect();
                loss_sib_on(tape, &[vec![v, c[0], c[1]], vec![c[0], v]], 2)
            },
            &ms[0],
            EPS,
        )
    })?;
    let disc = run("loss_disc", trials, seed + 2, |r| {
        let (a, b) = (uniform(r, &[6], -1.0, 1.0), uniform(r, &[6], -1.0, 1.0));
        let y = if r.gen_bool(0.5) { 1 } else { -1 };
        let form = if r.gen_bool(0.5) { DiscLoss::Literal } else { DiscLoss::LogSigmoid };
        finite_difference_check(
            |tape, v| {
                let bv = tape.constant(b.clone());
                let d = tape.dot(v, bv)?;
                loss_disc_on(tape, d, y, form)
            },
            &a,
            EPS,
        )
    })?;
    let composite = run("total_loss", trials, seed + 3, |r| {
        let ms = spread(r, &[4, 4], 3);
        let (a, b) = (uniform(r, &[6], -1.0, 1.0), uniform(r, &[6], -1.0, 1.0));
        let (lpc, lsib) = (r.gen_range(0.0..1.0), r.gen_range(0.0..1.0));
        // masks are logistic functions of the checked vector's projections
        let proj = uniform(r, &[6, 16], -0.5, 0.5);
        finite_difference_check(
            |tape, v| {
                let p = tape.constant(proj.clone());
                let l = tape.matmul(v, p)?;
                let l = tape.reshape(l, &[4, 4])?;
                let own = tape.sigmoid(l)?;
                let c: Vec<Var> = ms.iter().map(|m| tape.constant(m.clone())).collect();
                let pc = loss_pc_on(tape, c[0], &[own, c[1]], 1)?;
                let sib = loss_sib_on(tape, &[vec![own, c[2]]], 1)?;
                let bv = tape.constant(b.clone());
                let d = tape.dot(v, bv)?;
                let disc = loss_disc_on(tape, d, 1, DiscLoss::Literal)?;
                let pc = tape.scale(pc, lpc)?;
                let sib = tape.scale(sib, lsib)?;
                tape.add_all(&[pc, sib, disc])
            },
            &a,
            EPS,
        )
    })?;
    Ok(vec![pc, sib, disc, composite])
}

/// Image → loss on a batch of two two-object scenes in training mode, one
/// random parameter coordinate per trial.
pub fn pipeline_check(trials: usize, seed: u64) -> Result<CheckRow> {
    let spec = SceneSpec { image_size: 32, ..Default::default() };
    let scenes = vec![generate_scene(seed, &spec)?, generate_scene(seed + 1, &spec)?];
    let config = TrainConfig {
        model: ModelConfig { image_size: 32, ..Default::default() },
        ablation: Ablation::Full,
        // structural weights large enough to matter in the gradient
        hyper: crate::losses::Hyperparams { lambda_pc: 0.5, lambda_sib: 0.5, ..Default::default() },
        ..Default::default()
    };
    let set = TrainingSet::from_scenes(&scenes, Ablation::Full, &GroundingOptions::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(config.model.clone(), set.vocab.clone(), seed)?;
    let batch = make_batch(&set, &[0, 1], &config.hyper, &mut rng)?;

    let loss_at = |m: &Model| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = m.params().iter().map(|p| tape.leaf(p.value.clone())).collect();
        let b = Bound::from_vars(m, vars.clone());
        let g = build_loss(&mut tape, m, &b, &set, &batch, &config, None)?;
        Ok((tape, vars, g.total))
    };
    let (tape, vars, total) = loss_at(&model)?;
    let grads = tape.backward(total)?;

    let sizes: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
    let count: usize = sizes.iter().sum();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut k = rng.gen_range(0..count);
        let mut p = 0;
        while k >= sizes[p] {
            k -= sizes[p];
            p += 1;
        }
        let analytic = grads.wrt(&tape, vars[p]).data()[k];
        let eval = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            m.params_mut()[p].value.data_mut()[k] += delta;
            let (t, _, total) = loss_at(&m)?;
            Ok(t.value(total).item())
        };
        let numeric = (eval(EPS)? - eval(-EPS)?) / (2.0 * EPS);
        worst = worst.max(max_relative_error(&Tensor::scalar(analytic), &Tensor::scalar(numeric)));
    }
    Ok(CheckRow { name: "pipeline".into(), trials, max_error: worst })
}

/// Every check at `trials` trials each.
pub fn full_suite(trials: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = primitive_checks(trials, seed)?;
    rows.extend(loss_checks(trials, seed)?);
    rows.push(pipeline_check(trials, seed)?);
    Ok(rows)
}

pub fn format_table(rows: &[CheckRow]) -> String {
    let mut s = format!("{:<14} {:>6} {:>12}  status\n", "check", "trials", "max rel err");
    for r in rows {
        let status = if r.passed() { "ok" } else { "FAIL" };
        s.push_str(&format!("{:<14} {:>6} {:>12.3e}  {status}\n", r.name, r.trials, r.max_error));
    }
    s
}
