//! Helpers shared by the integration tests: a finite-difference gradient
//! oracle, op cases at random shapes, and small desk configurations.
#![allow(dead_code)]

use fedbert::tape::IGNORE_INDEX;
use fedbert::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-5;

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Differentiable inputs plus the computation to check.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

pub struct OpSpec {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> Case,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=8))
}

/// Reduces any output to a scalar through fixed pseudo-random weights, so
/// every output element contributes a distinct amount to the gradient.
fn project(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    if shape.iter().product::<usize>() == 1 && shape.len() <= 1 {
        return Ok(out);
    }
    let weights = random(&mut ChaCha8Rng::seed_from_u64(0x9e37), &shape);
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn evaluate(case: &Case, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let loss = project(&mut tape, out).unwrap();
    tape.value(loss).item()
}

/// Largest per-input relative error `‖a − n‖ / (‖a‖ + ‖n‖)` between the
/// tape gradient `a` and the central difference `n`.
pub fn gradcheck(case: &Case) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let loss = project(&mut tape, out).unwrap();
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in case.inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        assert!(
            analytic.iter().all(|g| g.is_finite()),
            "non-finite gradient"
        );
        let mut numeric = Vec::with_capacity(input.numel());
        for j in 0..input.numel() {
            let mut shifted = case.inputs.to_vec();
            shifted[i].data_mut()[j] += FD_STEP;
            let up = evaluate(case, &shifted);
            shifted[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = evaluate(case, &shifted);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Norms below this are rounding noise around a gradient that is zero by
/// construction (e.g. attention key biases, which shift every score in a
/// softmax row equally).
pub const ZERO_GRADIENT_NORM: f64 = 1e-8;

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, or 0 when both are numerically zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(&mut a.iter().copied()), norm(&mut b.iter().copied()));
    if na < ZERO_GRADIENT_NORM && nb < ZERO_GRADIENT_NORM {
        return 0.0;
    }
    norm(&mut a.iter().zip(b).map(|(x, y)| x - y)) / (na + nb)
}

/// Every differentiable tape op, each drawing its own shapes and integer
/// arguments from the generator.
pub fn op_specs() -> Vec<OpSpec> {
    vec![
        OpSpec {
            name: "matmul",
            make: |rng| {
                let (m, k) = dims(rng);
                let n = rng.random_range(1..=8);
                Case {
                    inputs: vec![random(rng, &[m, k]), random(rng, &[k, n])],
                    build: Box::new(|t, v| t.matmul(v[0], v[1])),
                }
            },
        },
        OpSpec {
            name: "add",
            make: |rng| {
                let (m, n) = dims(rng);
                Case {
                    inputs: vec![random(rng, &[m, n]), random(rng, &[m, n])],
                    build: Box::new(|t, v| t.add(v[0], v[1])),
                }
            },
        },
        OpSpec {
            name: "add_row",
            make: |rng| {
                let (m, n) = dims(rng);
                Case {
                    inputs: vec![random(rng, &[m, n]), random(rng, &[n])],
                    build: Box::new(|t, v| t.add_row(v[0], v[1])),
                }
            },
        },
        OpSpec {
            name: "mul",
            make: |rng| {
                let (m, n) = dims(rng);
                Case {
                    inputs: vec![random(rng, &[m, n]), random(rng, &[m, n])],
                    build: Box::new(|t, v| t.mul(v[0], v[1])),
                }
            },
        },
        OpSpec {
            name: "scale",
            make: |rng| {
                let (m, n) = dims(rng);
                let c = rng.random_range(-3.0..3.0);
                Case {
                    inputs: vec![random(rng, &[m, n])],
                    build: Box::new(move |t, v| Ok(t.scale(v[0], c))),
                }
            },
        },
        OpSpec {
            name: "transpose",
            make: |rng| {
                let (m, n) = dims(rng);
                Case {
                    inputs: vec![random(rng, &[m, n])],
                    build: Box::new(|t, v| t.transpose(v[0])),
                }
            },
        },
        OpSpec {
            name: "reshape",
            make: |rng| {
                let (m, n) = dims(rng);
                Case {
                    inputs: vec![random(rng, &[m, n])],
                    build: Box::new(move |t, v| t.reshape(v[0], &[n, m])),
                }
            },
        },
        OpSpec {
            name: "slice_cols",
            make: |rng| {
                let (m, n) = dims(rng);
                let start = rng.random_range(0..n);
                let width = rng.random_range(1..=n - start);
                Case {
                    inputs: vec![random(rng, &[m, n])],
                    build: Box::new(move |t, v| t.slice_cols(v[0], start, width)),
                }
            },
        },
        OpSpec {
            name: "concat_cols",
            make: |rng| {
                let m = rng.random_range(1..=4);
                let widths: Vec<usize> = (0..rng.random_range(1..=3))
                    .map(|_| rng.random_range(1..=4))
                    .collect();
                Case {
                    inputs: widths.iter().map(|&w| random(rng, &[m, w])).collect(),
                    build: Box::new(|t, v| t.concat_cols(v)),
                }
            },
        },
        OpSpec {
            name: "concat_rows",
            make: |rng| {
                let n = rng.random_range(1..=8);
                let heights: Vec<usize> = (0..rng.random_range(1..=3))
                    .map(|_| rng.random_range(1..=3))
                    .collect();
                Case {
                    inputs: heights.iter().map(|&h| random(rng, &[h, n])).collect(),
                    build: Box::new(|t, v| t.concat_rows(v)),
                }
            },
        },
        OpSpec {
            name: "gather_rows",
            make: |rng| {
                let (m, n) = dims(rng);
                let rows: Vec<usize> = (0..rng.random_range(1..=6))
                    .map(|_| rng.random_range(0..m))
                    .collect();
                Case {
                    inputs: vec![random(rng, &[m, n])],
                    build: Box::new(move |t, v| t.gather_rows(v[0], &rows)),
                }
            },
        },
        OpSpec {
            name: "embedding",
            make: |rng| {
                let (v, h) = (rng.random_range(1..=6), rng.random_range(1..=8));
                let ids: Vec<usize> = (0..rng.random_range(1..=6))
                    .map(|_| rng.random_range(0..v))
                    .collect();
                Case {
                    inputs: vec![random(rng, &[v, h])],
                    build: Box::new(move |t, x| t.embedding(x[0], &ids)),
                }
            },
        },
        OpSpec {
            name: "softmax_rows",
            make: |rng| {
                let (m, n) = dims(rng);
                Case {
                    inputs: vec![random(rng, &[m, n])],
                    build: Box::new(|t, v| Ok(t.softmax_rows(v[0]))),
                }
            },
        },
        OpSpec {
            name: "layer_norm",
            make: |rng| {
                let m = rng.random_range(1..=4);
                let n = rng.random_range(2..=8);
                Case {
                    inputs: vec![random(rng, &[m, n]), random(rng, &[n]), random(rng, &[n])],
                    build: Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-12)),
                }
            },
        },
        OpSpec {
            name: "gelu",
            make: |rng| {
                let (m, n) = dims(rng);
                Case {
                    inputs: vec![random(rng, &[m, n])],
                    build: Box::new(|t, v| Ok(t.gelu(v[0]))),
                }
            },
        },
        OpSpec {
            name: "tanh",
            make: |rng| {
                let (m, n) = dims(rng);
                Case {
                    inputs: vec![random(rng, &[m, n])],
                    build: Box::new(|t, v| Ok(t.tanh(v[0]))),
                }
            },
        },
        OpSpec {
            name: "cross_entropy",
            make: |rng| {
                let m = rng.random_range(1..=4);
                let c = rng.random_range(2..=8);
                let mut targets: Vec<i64> = (0..m)
                    .map(|_| {
                        if rng.random_bool(0.25) {
                            IGNORE_INDEX
                        } else {
                            rng.random_range(0..c as i64)
                        }
                    })
                    .collect();
                targets[0] = rng.random_range(0..c as i64);
                Case {
                    inputs: vec![random(rng, &[m, c])],
                    build: Box::new(move |t, v| t.cross_entropy(v[0], &targets)),
                }
            },
        },
        OpSpec {
            name: "dropout",
            make: |rng| {
                let (m, n) = dims(rng);
                let seed = rng.random();
                Case {
                    inputs: vec![random(rng, &[m, n])],
                    build: Box::new(move |t, v| t.dropout(v[0], 0.25, seed)),
                }
            },
        },
        OpSpec {
            name: "sum",
            make: |rng| {
                let (m, n) = dims(rng);
                Case {
                    inputs: vec![random(rng, &[m, n])],
                    build: Box::new(|t, v| Ok(t.sum(v[0]))),
                }
            },
        },
    ]
}

/// Worst relative error of every op over `seeds` random cases each.
pub fn op_suite(seeds: u64) -> Vec<(&'static str, f64)> {
    op_specs()
        .iter()
        .map(|spec| {
            let worst = (0..seeds)
                .map(|s| {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 + s);
                    gradcheck(&(spec.make)(&mut rng))
                })
                .fold(0.0, f64::max);
            (spec.name, worst)
        })
        .collect()
}

/// A matrix that runs in seconds: tiny corpus, short schedules, default
/// model shape.
pub fn small_config(out_dir: &std::path::Path) -> fedbert::runner::RunConfig {
    let mut c = fedbert::runner::RunConfig::default();
    c.out_dir = out_dir.to_path_buf();
    c.corpus.num_patients = 15;
    c.corpus.ner_train_notes = 10;
    c.corpus.ner_test_notes = 5;
    c.cycles_pretrain = 2;
    c.epochs_pretrain = 2;
    c.cycles_finetune = 2;
    c.epochs_finetune = 2;
    c.probe_sentences = 4;
    c
}
