#![allow(dead_code)] // each test target uses its own subset

//! Shared helpers for the integration suites: a central-difference
//! gradient checker and small fixture builders.

use eduqalm::model::{AttentionVariant, ModelConfig};
use eduqalm::pipeline::{InstructionTemplate, QaExample, TemplateStyle};
use eduqalm::tensor::{Tape, Tensor};
use eduqalm::tokenizer::ByteTokenizer;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Check the analytic gradient of `build`'s scalar output with respect to
/// the tensor it receives, against central finite differences in double
/// precision: `|analytic - numeric| / max(1, |analytic|) < 1e-4`.
pub fn gradcheck<F>(name: &str, x0: &[f64], shape: &[usize], build: F)
where
    F: Fn(&Tape<f64>, &Tensor<f64>) -> Tensor<f64>,
{
    let tape = Tape::new();
    let x = tape.leaf(x0.to_vec(), shape, true).unwrap();
    let loss = build(&tape, &x);
    assert_eq!(loss.numel(), 1, "{name}: build must return a scalar");
    tape.backward(&loss).unwrap();
    let analytic = x.grad().unwrap_or_else(|| panic!("{name}: no gradient"));

    let eval = |xs: &[f64]| -> f64 {
        let tape = Tape::new();
        let x = tape.leaf(xs.to_vec(), shape, true).unwrap();
        build(&tape, &x).item()
    };
    for i in 0..x0.len() {
        let mut plus = x0.to_vec();
        plus[i] += FD_STEP;
        let mut minus = x0.to_vec();
        minus[i] -= FD_STEP;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        let err = (analytic[i] - numeric).abs() / f64::max(1.0, analytic[i].abs());
        assert!(
            err < FD_TOL,
            "{name}: coordinate {i}: analytic {} vs central difference {} (rel err {err:.3e})",
            analytic[i],
            numeric
        );
    }
}

/// Deterministic pseudo-random values in [-1, 1] without pulling in an RNG.
pub fn pseudo_values(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

/// Weighted sum against fixed pseudo-random coefficients, to scalarize a
/// matrix-valued op with a non-degenerate upstream gradient.
pub fn weighted_sum(tape: &Tape<f64>, t: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let w = tape
        .constant(pseudo_values(t.numel(), seed), t.shape())
        .unwrap();
    t.mul(&w).unwrap().sum()
}

pub fn swa_config(d_model: usize, n_layers: usize, window: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        n_layers,
        n_heads: 2,
        vocab_size: ByteTokenizer::VOCAB,
        max_seq_len: 64,
        attention: AttentionVariant::SlidingWindow { window },
        embedding_layernorm: false,
        feedforward_mult: 4,
    }
}

pub fn copy_template() -> InstructionTemplate {
    InstructionTemplate {
        name: "copy".into(),
        style: TemplateStyle::Plain,
        body: "{context}{question}={answer}".into(),
    }
}

/// Echo corpus: the answer repeats the question. Questions are distinct
/// strings over a six-letter alphabet, so the task trains fast without
/// fully collapsing to zero loss.
pub fn copy_corpus(n: usize) -> Vec<QaExample> {
    let letters = *b"abcdef";
    let values = pseudo_values(n * 8, 0xc0bb);
    (0..n)
        .map(|i| {
            let len = 4 + i % 5;
            let s: String = (0..len)
                .map(|j| {
                    let v = values[i * 8 + j].abs() * 6.0;
                    letters[(v as usize).min(5)] as char
                })
                .collect();
            QaExample::generated(format!("ex-{i}"), "v", s.clone(), s)
        })
        .collect()
}

/// Every differentiable op under the finite-difference check, as named
/// closures so suites can run them individually or as one gate.
pub fn op_gradchecks() -> Vec<(&'static str, fn())> {
    vec![
        ("matmul", checks::matmul),
        ("add/scale/mul", checks::elementwise),
        ("add_row", checks::add_row),
        ("transpose/slice/concat", checks::shape_ops),
        ("sum/mean", checks::reductions),
        ("softmax_rows", checks::softmax),
        ("layer_norm", checks::layer_norm),
        ("cross_entropy", checks::cross_entropy),
        ("silu/gelu", checks::activations),
        ("rope", checks::rope),
        ("embedding", checks::embedding),
        ("mask_fill", checks::mask_fill),
        ("dropout", checks::dropout),
        ("two-layer mlp", checks::mlp),
    ]
}

pub mod checks {
    use super::{gradcheck, pseudo_values, weighted_sum};
    use eduqalm::tensor::Tensor;
    use rand::SeedableRng;

    pub fn matmul() {
        let x0 = pseudo_values(12, 1);
        gradcheck("matmul lhs", &x0, &[3, 4], |tape, x| {
            let b = tape.constant(pseudo_values(8, 2), &[4, 2]).unwrap();
            weighted_sum(tape, &x.matmul(&b).unwrap(), 3)
        });
        gradcheck("matmul rhs", &x0, &[4, 3], |tape, x| {
            let a = tape.constant(pseudo_values(8, 4), &[2, 4]).unwrap();
            weighted_sum(tape, &a.matmul(x).unwrap(), 5)
        });
    }

    pub fn elementwise() {
        let x0 = pseudo_values(6, 6);
        gradcheck("add", &x0, &[2, 3], |tape, x| {
            let c = tape.constant(pseudo_values(6, 7), &[2, 3]).unwrap();
            weighted_sum(tape, &x.add(&c).unwrap(), 8)
        });
        gradcheck("scale", &x0, &[2, 3], |tape, x| {
            weighted_sum(tape, &x.scale(-1.7), 9)
        });
        gradcheck("mul", &x0, &[2, 3], |tape, x| {
            let c = tape.constant(pseudo_values(6, 10), &[2, 3]).unwrap();
            weighted_sum(tape, &x.mul(&c).unwrap(), 11)
        });
    }

    pub fn add_row() {
        let x0 = pseudo_values(8, 12);
        gradcheck("add_row matrix", &x0, &[2, 4], |tape, x| {
            let bias = tape.constant(pseudo_values(4, 13), &[4]).unwrap();
            weighted_sum(tape, &x.add_row(&bias).unwrap(), 14)
        });
        let b0 = pseudo_values(4, 15);
        gradcheck("add_row bias", &b0, &[4], |tape, bias| {
            let m = tape.constant(pseudo_values(8, 16), &[2, 4]).unwrap();
            weighted_sum(tape, &m.add_row(bias).unwrap(), 17)
        });
    }

    pub fn shape_ops() {
        let x0 = pseudo_values(12, 18);
        gradcheck("transpose", &x0, &[3, 4], |tape, x| {
            weighted_sum(tape, &x.transpose().unwrap(), 19)
        });
        gradcheck("slice_cols", &x0, &[3, 4], |tape, x| {
            weighted_sum(tape, &x.slice_cols(1, 2).unwrap(), 20)
        });
        gradcheck("concat_cols", &x0, &[3, 4], |tape, x| {
            let c = tape.constant(pseudo_values(6, 21), &[3, 2]).unwrap();
            let parts = [x.slice_cols(0, 2).unwrap(), c, x.slice_cols(2, 2).unwrap()];
            weighted_sum(tape, &Tensor::concat_cols(&parts).unwrap(), 22)
        });
    }

    pub fn reductions() {
        let x0 = pseudo_values(10, 23);
        gradcheck("sum", &x0, &[10], |_, x| x.sum());
        gradcheck("mean", &x0, &[10], |_, x| x.mean());
    }

    pub fn softmax() {
        let x0 = pseudo_values(8, 24);
        gradcheck("softmax_rows", &x0, &[2, 4], |tape, x| {
            weighted_sum(tape, &x.softmax_rows().unwrap(), 25)
        });
    }

    pub fn layer_norm() {
        let x0 = pseudo_values(8, 26);
        gradcheck("layer_norm input", &x0, &[2, 4], |tape, x| {
            let g = tape.constant(pseudo_values(4, 27), &[4]).unwrap();
            let b = tape.constant(pseudo_values(4, 28), &[4]).unwrap();
            weighted_sum(tape, &x.layer_norm(&g, &b, 1e-8).unwrap(), 29)
        });
        let g0 = pseudo_values(4, 30);
        gradcheck("layer_norm gain", &g0, &[4], |tape, g| {
            let x = tape.constant(pseudo_values(8, 31), &[2, 4]).unwrap();
            let b = tape.constant(pseudo_values(4, 32), &[4]).unwrap();
            weighted_sum(tape, &x.layer_norm(g, &b, 1e-8).unwrap(), 33)
        });
        let b0 = pseudo_values(4, 34);
        gradcheck("layer_norm bias", &b0, &[4], |tape, b| {
            let x = tape.constant(pseudo_values(8, 35), &[2, 4]).unwrap();
            let g = tape.constant(pseudo_values(4, 36), &[4]).unwrap();
            weighted_sum(tape, &x.layer_norm(&g, b, 1e-8).unwrap(), 37)
        });
    }

    pub fn cross_entropy() {
        let x0 = pseudo_values(15, 38);
        gradcheck("cross_entropy", &x0, &[3, 5], |_, x| {
            x.cross_entropy(&[Some(2), None, Some(4)]).unwrap()
        });
    }

    pub fn activations() {
        let x0: Vec<f64> = pseudo_values(9, 39).iter().map(|v| v * 3.0).collect();
        gradcheck("silu", &x0, &[3, 3], |tape, x| {
            weighted_sum(tape, &x.silu(), 40)
        });
        gradcheck("gelu", &x0, &[3, 3], |tape, x| {
            weighted_sum(tape, &x.gelu(), 41)
        });
    }

    pub fn rope() {
        let x0 = pseudo_values(12, 42);
        gradcheck("rope", &x0, &[3, 4], |tape, x| {
            weighted_sum(tape, &x.rope(&[0, 5, 11]).unwrap(), 43)
        });
    }

    pub fn embedding() {
        let t0 = pseudo_values(20, 44);
        gradcheck("embedding", &t0, &[5, 4], |tape, table| {
            weighted_sum(tape, &table.embedding(&[1, 4, 1, 0]).unwrap(), 45)
        });
    }

    pub fn mask_fill() {
        let x0 = pseudo_values(9, 46);
        let allowed = [true, false, false, true, true, false, true, true, true];
        gradcheck("mask_fill", &x0, &[3, 3], move |tape, x| {
            let masked = x.mask_fill(&allowed).unwrap();
            weighted_sum(tape, &masked.softmax_rows().unwrap(), 47)
        });
    }

    pub fn dropout() {
        let x0 = pseudo_values(16, 48);
        gradcheck("dropout", &x0, &[4, 4], |tape, x| {
            // re-seeded per evaluation, so every probe sees the same mask
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
            weighted_sum(tape, &x.dropout(0.25, &mut rng).unwrap(), 49)
        });
    }

    pub fn mlp() {
        let w1_vals = pseudo_values(20, 50);
        let b1_vals = pseudo_values(5, 51);
        let w2_vals = pseudo_values(30, 52);
        let x_vals = pseudo_values(12, 53);
        let targets = [Some(3), Some(0), None];
        let forward = move |x: &Tensor<f64>, w1: &Tensor<f64>, b1: &Tensor<f64>, w2: &Tensor<f64>| {
            let h = x.matmul(w1).unwrap().add_row(b1).unwrap().silu();
            h.matmul(w2).unwrap().cross_entropy(&targets).unwrap()
        };
        gradcheck("mlp wrt input", &x_vals.clone(), &[3, 4], {
            let (w1_vals, b1_vals, w2_vals) = (w1_vals.clone(), b1_vals.clone(), w2_vals.clone());
            move |tape, x| {
                let w1 = tape.constant(w1_vals.clone(), &[4, 5]).unwrap();
                let b1 = tape.constant(b1_vals.clone(), &[5]).unwrap();
                let w2 = tape.constant(w2_vals.clone(), &[5, 6]).unwrap();
                forward(x, &w1, &b1, &w2)
            }
        });
        gradcheck("mlp wrt first weight", &w1_vals.clone(), &[4, 5], {
            let (x_vals, b1_vals, w2_vals) = (x_vals.clone(), b1_vals.clone(), w2_vals.clone());
            move |tape, w1| {
                let x = tape.constant(x_vals.clone(), &[3, 4]).unwrap();
                let b1 = tape.constant(b1_vals.clone(), &[5]).unwrap();
                let w2 = tape.constant(w2_vals.clone(), &[5, 6]).unwrap();
                forward(&x, w1, &b1, &w2)
            }
        });
        gradcheck("mlp wrt second weight", &w2_vals.clone(), &[5, 6], {
            let (x_vals, w1_vals, b1_vals) = (x_vals.clone(), w1_vals.clone(), b1_vals.clone());
            move |tape, w2| {
                let x = tape.constant(x_vals.clone(), &[3, 4]).unwrap();
                let w1 = tape.constant(w1_vals.clone(), &[4, 5]).unwrap();
                let b1 = tape.constant(b1_vals.clone(), &[5]).unwrap();
                forward(&x, &w1, &b1, w2)
            }
        });
    }
}
