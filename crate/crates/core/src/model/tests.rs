use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{finite_difference_check, Var};

fn vocab() -> Vocabulary {
    Vocabulary::build(["a", "red", "blue", "circle", "square", "above", "cat"])
}

fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        conv_widths: vec![2, 3, 4],
        word_dim: 3,
        embed_width: 4,
        embed_hidden: 5,
        ..Default::default()
    }
}

fn random_image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[size, size, 3], 0.0, 1.0, &mut rng)
}

/// Input rows (inclusive) that can influence output row `i` of the stack.
fn receptive_range(strides: &[usize], i: usize, size: usize) -> (usize, usize) {
    let (mut lo, mut hi) = (i as i64, i as i64);
    for &s in strides.iter().rev() {
        lo = lo * s as i64 - 1;
        hi = hi * s as i64 + 1;
    }
    (lo.max(0) as usize, hi.min(size as i64 - 1) as usize)
}

#[test]
fn shape_contract_and_rejection() {
    let m = Model::new(ModelConfig::default(), vocab(), 1).unwrap();
    let f = m.encode_image(&random_image(80, 0)).unwrap();
    assert_eq!(f.0.shape(), &[20, 20, 32]);
    assert!(m.encode_image(&random_image(40, 0)).is_err());
}

#[test]
fn zero_image_gives_finite_features() {
    let m = Model::new(ModelConfig::default(), vocab(), 2).unwrap();
    let f = m.encode_image(&Tensor::zeros(&[80, 80, 3])).unwrap();
    assert!(f.0.all_finite());
}

#[test]
fn one_pixel_change_stays_in_receptive_field() {
    let cfg = ModelConfig { image_size: 32, ..Default::default() };
    let m = Model::new(cfg.clone(), vocab(), 3).unwrap();
    let a = random_image(32, 4);
    let (py, px) = (13, 22);
    let mut b = a.clone();
    b.data_mut()[(py * 32 + px) * 3 + 1] += 0.5;
    let fa = m.encode_image(&a).unwrap();
    let fb = m.encode_image(&b).unwrap();
    let strides = cfg.strides();
    let (h, w, d) = (fa.height(), fa.width(), fa.depth());
    let mut changed_inside = 0;
    for r in 0..h {
        for c in 0..w {
            let (r0, r1) = receptive_range(&strides, r, 32);
            let (c0, c1) = receptive_range(&strides, c, 32);
            let inside = (r0..=r1).contains(&py) && (c0..=c1).contains(&px);
            let base = (r * w + c) * d;
            let differs = (0..d).any(|k| fa.0.data()[base + k] != fb.0.data()[base + k]);
            if inside {
                changed_inside += differs as usize;
            } else {
                assert!(!differs, "cell ({r},{c}) outside the receptive field changed");
            }
        }
    }
    assert!(changed_inside > 0);
}

#[test]
fn constant_grid_pools_to_that_vector() {
    let m = Model::new(ModelConfig::default(), vocab(), 5).unwrap();
    let cell: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
    let grid = Tensor::new(vec![4, 4, 32], cell.iter().cycle().take(4 * 4 * 32).copied().collect()).unwrap();
    let single = Tensor::new(vec![1, 1, 32], cell).unwrap();
    let mut tape = Tape::new();
    let pooled = tape.constant(grid);
    let pooled = tape.mean_pool(pooled).unwrap();
    for (p, c) in tape.value(pooled).data().iter().zip(single.data()) {
        assert!((p - c).abs() < 1e-15);
    }
    let a = m.pool_and_embed(&SpatialFeatures(tape.value(pooled).clone().reshape(&[1, 1, 32]).unwrap())).unwrap();
    let b = m.pool_and_embed(&SpatialFeatures(single)).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn linear_embedding_commutes_with_pooling() {
    let cfg = ModelConfig { embed_activation: EmbedActivation::Identity, image_size: 32, ..Default::default() };
    let mut m = Model::new(cfg, vocab(), 6).unwrap();
    m.update_running_stats(&Tensor::full(&[32], 0.3), &Tensor::full(&[32], 2.0));
    let prepared = m.prepare_image(&random_image(32, 7)).unwrap();
    let p = prepared.height * prepared.width;
    for k in 0..32 {
        let mean: f64 = (0..p).map(|i| prepared.cells.data()[i * 32 + k]).sum::<f64>() / p as f64;
        assert!((mean - prepared.visual_code.data()[k]).abs() < 1e-12);
    }
    let f = m.encode_image(&random_image(32, 7)).unwrap();
    assert_eq!(m.pool_and_embed(&f).unwrap(), prepared.visual_code);
}

#[test]
fn widths_agree() {
    let m = Model::new(ModelConfig::default(), vocab(), 8).unwrap();
    let f = m.encode_image(&random_image(80, 9)).unwrap();
    assert_eq!(m.pool_and_embed(&f).unwrap().len(), m.encode_phrase(&["cat"]).unwrap().len());
    assert!(m.attention_mask(&f, &Tensor::zeros(&[31])).is_err());
    assert!(m.pool_and_embed(&SpatialFeatures(Tensor::zeros(&[2, 2, 5]))).is_err());
}

#[test]
fn phrase_codes() {
    let m = Model::new(ModelConfig::default(), vocab(), 10).unwrap();
    let once = m.encode_phrase(&["cat"]).unwrap();
    assert_eq!(once, m.encode_phrase(&["cat"]).unwrap());
    assert_ne!(once, m.encode_phrase(&["cat", "cat"]).unwrap());
    assert_ne!(m.encode_phrase(&["red", "circle"]).unwrap(), m.encode_phrase(&["circle", "red"]).unwrap());
    assert_eq!(m.encode_phrase(&["a", "zebra"]).unwrap(), m.encode_phrase(&["a", UNKNOWN_TOKEN]).unwrap());
    assert!(m.encode_phrase::<&str>(&[]).is_err());
}

#[test]
fn orthogonal_code_gives_half() {
    let m = Model::new(ModelConfig::default(), vocab(), 11).unwrap();
    let f = m.encode_image(&random_image(80, 12)).unwrap();
    let mask = m.attention_mask(&f, &Tensor::zeros(&[32])).unwrap();
    assert!(mask.values().data().iter().all(|&v| v == 0.5));
}

#[test]
fn mask_matches_single_cell_score() {
    let m = Model::new(ModelConfig::default(), vocab(), 13).unwrap();
    let f = m.encode_image(&random_image(80, 14)).unwrap();
    let code = m.encode_phrase(&["red", "circle"]).unwrap();
    let mask = m.attention_mask(&f, &code).unwrap();
    for &(r, c) in &[(0, 0), (7, 13), (19, 19)] {
        let base = (r * 20 + c) * 32;
        let cell = Tensor::new(vec![1, 1, 32], f.0.data()[base..base + 32].to_vec()).unwrap();
        let v = m.pool_and_embed(&SpatialFeatures(cell)).unwrap();
        let s = match_score(&v, &code).unwrap();
        assert!((mask.values().data()[r * 20 + c] - s).abs() < 1e-12);
    }
}

#[test]
fn scaling_code_saturates_monotonically() {
    let m = Model::new(ModelConfig::default(), vocab(), 15).unwrap();
    let f = m.encode_image(&random_image(80, 16)).unwrap();
    let code = m.encode_phrase(&["blue", "square"]).unwrap();
    let mut prev: Option<AttentionMask> = None;
    for s in [0.5, 1.0, 4.0, 16.0, 64.0] {
        let mask = m.attention_mask(&f, &code.map(|v| v * s)).unwrap();
        assert!(mask.values().data().iter().all(|&v| v > 0.0 && v < 1.0 || s >= 16.0));
        if let Some(p) = &prev {
            for (a, b) in p.values().data().iter().zip(mask.values().data()) {
                assert!((b - 0.5).abs() >= (a - 0.5).abs());
            }
        }
        prev = Some(mask);
    }
}

#[test]
fn match_score_closed_form() {
    let a = Tensor::vector(vec![1.0, 1.0, 0.0]);
    let b = Tensor::vector(vec![1.5, 0.5, 9.0]);
    let s = match_score(&a, &b).unwrap();
    assert!((s - 0.8808).abs() < 1e-4);
    assert_eq!(s, match_score(&b, &a).unwrap());
    assert_eq!(match_score(&a, &Tensor::vector(vec![1.0, -1.0, 3.0])).unwrap(), 0.5);
    assert!(match_score(&a, &Tensor::vector(vec![1.0])).is_err());
}

#[test]
fn argmax_prefers_lowest_index() {
    let m = AttentionMask::from_logits(Tensor::new(vec![2, 2], vec![0.0, 3.0, 3.0, 1.0]).unwrap()).unwrap();
    assert_eq!(m.argmax(), (0, 1));
}

#[test]
fn perceptron_weights_are_shared() {
    let m = Model::new(ModelConfig::default(), vocab(), 17).unwrap();
    let f = m.encode_image(&random_image(80, 18)).unwrap();
    let code = m.encode_phrase(&["cat"]).unwrap();
    let mut m2 = m.clone();
    m2.param_mut("embed.fc2.weight").unwrap().data_mut()[5] += 0.1;
    assert_ne!(m.pool_and_embed(&f).unwrap(), m2.pool_and_embed(&f).unwrap());
    assert_ne!(
        m.attention_mask(&f, &code).unwrap().values(),
        m2.attention_mask(&f, &code).unwrap().values()
    );
}

/// Check every parameter tensor of a small model, through the inference path.
fn check_param_gradients(objective: impl Fn(&mut Tape, &Bound, &Model) -> Result<Var>) {
    let mut m = Model::new(small_config(), vocab(), 19).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    m.perturb(0.2, &mut rng);
    m.update_running_stats(&Tensor::full(&[4], 0.1), &Tensor::full(&[4], 0.5));
    for (i, p) in m.params().iter().enumerate() {
        let err = finite_difference_check(
            |tape, x| {
                let vars = m
                    .params()
                    .iter()
                    .enumerate()
                    .map(|(j, q)| if j == i { x } else { tape.constant(q.value.clone()) })
                    .collect();
                let b = Bound::from_vars(&m, vars);
                objective(tape, &b, &m)
            },
            &p.value,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{}: relative error {err}", p.name);
    }
}

#[test]
fn match_score_gradients_pass_finite_differences() {
    let image = random_image(8, 21);
    let ids = vocab().encode(&["red", "circle"]).unwrap();
    check_param_gradients(|tape, b, m| {
        let x = tape.constant(image.clone());
        let f = b.encode_image(tape, x)?;
        let norm = Normalizer::running(m, tape);
        let v = b.pool_and_project(tape, f, None)?;
        let v = norm.apply(tape, b, v)?;
        let l = b.encode_phrase(tape, &ids, None)?;
        let d = tape.dot(v, l)?;
        tape.sigmoid(d)
    });
}

#[test]
fn attention_mask_gradients_pass_finite_differences() {
    let image = random_image(8, 22);
    let ids = vocab().encode(&["blue", "square"]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let weights = Tensor::new(vec![2, 2], (0..4).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
    check_param_gradients(|tape, b, m| {
        let x = tape.constant(image.clone());
        let f = b.encode_image(tape, x)?;
        let norm = Normalizer::running(m, tape);
        let cells = b.project_cells(tape, f, None)?;
        let cells = norm.apply(tape, b, cells)?;
        let l = b.encode_phrase(tape, &ids, None)?;
        let logits = b.mask_logits(tape, cells, l, 2, 2)?;
        let mask = tape.sigmoid(logits)?;
        let w = tape.constant(weights.clone());
        let wm = tape.mul(mask, w)?;
        tape.sum(wm)
    });
}

#[test]
fn save_load_round_trip() {
    let mut m = Model::new(small_config(), vocab(), 24).unwrap();
    m.update_running_stats(&Tensor::full(&[4], 0.7), &Tensor::full(&[4], 3.0));
    let mut buf = Vec::new();
    m.write_to(&mut buf).unwrap();
    assert_eq!(&buf[..4], b"GRND");
    let back = Model::read_from(&mut buf.as_slice()).unwrap();
    assert_eq!(back, m);
    assert!(Model::read_from(&mut &buf[..buf.len() - 3]).is_err());
}

#[test]
fn dropout_only_in_training() {
    let cfg = ModelConfig { dropout: 0.5, ..small_config() };
    let m = Model::new(cfg, vocab(), 25).unwrap();
    let ids = vocab().encode(&["red", "cat"]).unwrap();
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, false);
    let plain = b.encode_phrase(&mut tape, &ids, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dropped = b.encode_phrase(&mut tape, &ids, Some(&mut rng)).unwrap();
    assert_eq!(tape.value(plain), &m.encode_phrase(&["red", "cat"]).unwrap());
    assert_ne!(tape.value(plain), tape.value(dropped));
}
