//! Finite-difference verification of every tape primitive, in 64-bit mode.

use std::collections::BTreeMap;

use serde::Serialize;

use super::rng::SeededRng;
use super::tape::{Primitive, Tape, Var};
use super::tensor::Tensor;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub seeds: Vec<u64>,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradcheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Build,
    /// When false the built node is already the scalar loss.
    project: bool,
}

fn random(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, rng.normal_vec(n))
}

fn primitive_case(p: Primitive, rng: &mut SeededRng) -> Case {
    let m34 = |rng: &mut SeededRng| random(rng, &[3, 4]);
    let case = |inputs: Vec<Tensor<f64>>, build: Build| Case {
        inputs,
        build,
        project: true,
    };
    match p {
        Primitive::MatMul => case(
            vec![m34(rng), random(rng, &[4, 2])],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        Primitive::Add => case(vec![m34(rng), m34(rng)], Box::new(|t, v| t.add(v[0], v[1]))),
        Primitive::Sub => case(vec![m34(rng), m34(rng)], Box::new(|t, v| t.sub(v[0], v[1]))),
        Primitive::Mul => case(vec![m34(rng), m34(rng)], Box::new(|t, v| t.mul(v[0], v[1]))),
        Primitive::AddRow => case(
            vec![m34(rng), random(rng, &[1, 4])],
            Box::new(|t, v| t.add_row(v[0], v[1])),
        ),
        Primitive::Scale => case(vec![m34(rng)], Box::new(|t, v| t.scale(v[0], -1.7))),
        Primitive::AddScalar => case(vec![m34(rng)], Box::new(|t, v| t.add_scalar(v[0], 0.3))),
        Primitive::Tanh => case(vec![m34(rng)], Box::new(|t, v| t.tanh(v[0]))),
        Primitive::Gelu => case(vec![m34(rng)], Box::new(|t, v| t.gelu(v[0]))),
        Primitive::Sigmoid => case(vec![m34(rng)], Box::new(|t, v| t.sigmoid(v[0]))),
        Primitive::Softmax => case(vec![m34(rng)], Box::new(|t, v| t.softmax(v[0]))),
        Primitive::LayerNorm => case(vec![m34(rng)], Box::new(|t, v| t.layer_norm(v[0]))),
        Primitive::SliceCols => case(vec![m34(rng)], Box::new(|t, v| t.slice_cols(v[0], 1, 2))),
        Primitive::ConcatCols => case(
            vec![m34(rng), random(rng, &[3, 2])],
            Box::new(|t, v| t.concat_cols(&[v[0], v[1]])),
        ),
        Primitive::GatherRows => case(
            vec![m34(rng)],
            Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2, 1])),
        ),
        Primitive::ConcatRows => case(
            vec![m34(rng), random(rng, &[2, 4])],
            Box::new(|t, v| t.concat_rows(&[v[0], v[1]])),
        ),
        Primitive::RepeatRows => case(vec![m34(rng)], Box::new(|t, v| t.repeat_rows(v[0], 3))),
        Primitive::MeanGroups => case(
            vec![random(rng, &[6, 4])],
            Box::new(|t, v| t.mean_groups(v[0], 3)),
        ),
        Primitive::Attention => case(
            vec![random(rng, &[6, 4]), random(rng, &[6, 4]), random(rng, &[6, 4])],
            Box::new(|t, v| t.attention(v[0], v[1], v[2], 3, 2)),
        ),
        Primitive::MeanSquare => Case {
            inputs: vec![m34(rng), m34(rng)],
            build: Box::new(|t, v| t.mean_square(v[0], v[1])),
            project: false,
        },
    }
}

/// Random graph of at most five operation nodes over `[3,4]` tensors.
fn composite_case(rng: &mut SeededRng) -> Case {
    let n_ops = 2 + rng.below(4);
    let plan: Vec<(usize, usize, usize)> = (0..n_ops)
        .map(|i| (rng.below(11), rng.below(i + 2), rng.below(i + 2)))
        .collect();
    Case {
        inputs: vec![random(rng, &[3, 4]), random(rng, &[3, 4]), random(rng, &[4, 4])],
        build: Box::new(move |t, v| {
            let mut nodes = vec![v[0], v[1]];
            for &(op, a, b) in &plan {
                let (x, y) = (nodes[a], nodes[b]);
                let out = match op {
                    0 => t.add(x, y),
                    1 => t.sub(x, y),
                    2 => t.mul(x, y),
                    3 => t.tanh(x),
                    4 => t.gelu(x),
                    5 => t.sigmoid(x),
                    6 => t.softmax(x),
                    7 => t.layer_norm(x),
                    8 => t.matmul(x, v[2]),
                    9 => t.scale(x, 0.5),
                    _ => {
                        let s = t.slice_cols(x, 0, 2);
                        let r = t.slice_cols(y, 2, 2);
                        t.concat_cols(&[r, s])
                    }
                };
                nodes.push(out);
            }
            *nodes.last().expect("non-empty")
        }),
        project: true,
    }
}

/// Two-layer tanh/gelu network with biases.
fn two_layer_case(rng: &mut SeededRng) -> Case {
    Case {
        inputs: vec![
            random(rng, &[5, 3]),
            random(rng, &[3, 6]),
            random(rng, &[1, 6]),
            random(rng, &[6, 2]),
            random(rng, &[1, 2]),
        ],
        build: Box::new(|t, v| {
            let h = t.matmul(v[0], v[1]);
            let h = t.add_row(h, v[2]);
            let h = t.gelu(h);
            let o = t.matmul(h, v[3]);
            let o = t.add_row(o, v[4]);
            t.tanh(o)
        }),
        project: true,
    }
}

fn evaluate(case: &Case, target: &Tensor<f64>, inputs: &[Tensor<f64>], tape: &mut Tape<f64>) -> (Var, Vec<Var>) {
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let out = (case.build)(tape, &vars);
    let loss = if case.project {
        let tgt = tape.constant(target.clone());
        tape.mean_square(out, tgt)
    } else {
        out
    };
    (loss, vars)
}

fn loss_at(case: &Case, target: &Tensor<f64>, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = evaluate(case, target, inputs, &mut tape);
    tape.scalar(loss)
}

/// Max over inputs of `||analytic - numeric|| / (||analytic|| + ||numeric||)`.
fn check_case(case: &Case, rng: &mut SeededRng, fault: Option<Primitive>) -> f64 {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = case.inputs.iter().map(|x| tape.input(x.clone())).collect();
        let out = (case.build)(&mut tape, &vars);
        tape.value(out).shape().to_vec()
    };
    let target = random(rng, &out_shape);

    let mut tape = Tape::new();
    if let Some(p) = fault {
        tape.inject_fault(p);
    }
    let (loss, vars) = evaluate(case, &target, &case.inputs, &mut tape);
    let grads = tape.backward(loss).expect("finite gradcheck graph");

    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("input gradient");
        let mut inputs = case.inputs.clone();
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + STEP;
            let up = loss_at(case, &target, &inputs);
            inputs[i].data_mut()[j] = orig - STEP;
            let down = loss_at(case, &target, &inputs);
            inputs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.data()[j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt() + n2.sqrt();
        let rel = if denom < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / denom };
        worst = worst.max(rel);
    }
    worst
}

/// Checks every primitive, one random composite graph and one two-layer
/// network per seed. `fault` corrupts one backward rule (negative control).
pub fn run(seeds: &[u64], fault: Option<Primitive>) -> GradcheckReport {
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut record = |name: String, err: f64| {
        if !worst.contains_key(&name) {
            order.push(name.clone());
        }
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max(err);
    };
    for &seed in seeds {
        let mut rng = SeededRng::derive(seed, 0x6772_6164);
        for p in Primitive::ALL {
            let case = primitive_case(p, &mut rng);
            record(p.name().to_string(), check_case(&case, &mut rng, fault));
        }
        let case = composite_case(&mut rng);
        record("composite".to_string(), check_case(&case, &mut rng, fault));
        let case = two_layer_case(&mut rng);
        record("two_layer_net".to_string(), check_case(&case, &mut rng, fault));
    }
    let entries = order
        .into_iter()
        .map(|name| {
            let e = worst[&name];
            GradcheckEntry {
                passed: e < DEFAULT_TOLERANCE,
                max_rel_error: e,
                name,
            }
        })
        .collect();
    GradcheckReport {
        tolerance: DEFAULT_TOLERANCE,
        seeds: seeds.to_vec(),
        entries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_seeds_pass() {
        let report = run(&[0, 1, 2], None);
        for e in &report.entries {
            assert!(e.passed, "{} rel err {}", e.name, e.max_rel_error);
        }
        assert_eq!(report.entries.len(), Primitive::ALL.len() + 2);
    }

    #[test]
    fn corrupted_rule_is_named() {
        let report = run(&[0], Some(Primitive::LayerNorm));
        let failed: Vec<&str> = report.failures().map(|e| e.name.as_str()).collect();
        assert!(failed.contains(&"layer_norm"), "failures: {failed:?}");
        assert!(!failed.contains(&"gelu"));
    }
}
