//! Finite-difference gradient oracle.
//!
//! Each case pairs a graph builder with an independent f64 reference forward
//! written from the operator's definition. Central differences (ε = 1e-3) of
//! the f64 reference give the expected gradient; the graph's analytic
//! backward must match within the relative tolerance. The f32 forward value
//! is also checked against the reference.

use crossmodal_rec::tensor::{Attention, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-3;
pub const GRAD_REL_TOL: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;
type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
    pub reference: Reference,
    /// Keep inputs away from non-differentiable points (relu).
    pub avoid_zero: bool,
    /// Inputs behind a stop-gradient: expected gradient is exactly zero.
    pub blocked: &'static [usize],
}

#[derive(Debug)]
pub struct CaseReport {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_err: f64,
    pub max_forward_err: f64,
}

/// `|a − n| / max(|a|, |n|, 1e-2)`; the floor keeps near-zero gradient
/// entries from being judged on f32 round-off alone.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

pub fn run_case(case: &Case, seed: u64) -> CaseReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let inputs: Vec<Vec<f64>> = case
        .shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n)
                .map(|_| loop {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    if !case.avoid_zero || v.abs() > 0.05 {
                        break v;
                    }
                })
                .collect()
        })
        .collect();

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(&case.shapes)
        .map(|(v, s)| g.variable(Tensor::new(s.clone(), v.iter().map(|&x| x as f32).collect()).unwrap()))
        .collect();
    let out = (case.build)(&mut g, &vars);
    let out_len = g.value(out).numel();
    let proj: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let proj_t = g.constant(Tensor::new(g.shape(out).to_vec(), proj.iter().map(|&x| x as f32).collect()).unwrap());
    let loss = g.dot(out, proj_t).unwrap();
    let grads = g.backward(loss).unwrap();

    let ref_out = (case.reference)(&inputs);
    assert_eq!(ref_out.len(), out_len, "{}: reference output length", case.name);
    let max_forward_err = g
        .value(out)
        .data()
        .iter()
        .zip(&ref_out)
        .map(|(&a, &b)| rel_err(a as f64, b))
        .fold(0.0, f64::max);

    let ref_loss = |xs: &[Vec<f64>]| -> f64 { (case.reference)(xs).iter().zip(&proj).map(|(a, b)| a * b).sum() };
    let mut max_rel_err: f64 = 0.0;
    let mut probe = inputs.clone();
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(*var) {
            Some(t) => t.data().iter().map(|&x| x as f64).collect(),
            None => vec![0.0; inputs[i].len()],
        };
        for j in 0..inputs[i].len() {
            let orig = probe[i][j];
            probe[i][j] = orig + FD_EPS;
            let up = ref_loss(&probe);
            probe[i][j] = orig - FD_EPS;
            let down = ref_loss(&probe);
            probe[i][j] = orig;
            let numeric = if case.blocked.contains(&i) { 0.0 } else { (up - down) / (2.0 * FD_EPS) };
            max_rel_err = max_rel_err.max(rel_err(analytic[j], numeric));
        }
    }
    CaseReport {
        name: case.name,
        seed,
        max_rel_err,
        max_forward_err,
    }
}

// ---------------------------------------------------------------------------
// f64 reference forwards

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

fn softmax_row(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn rows_map(x: &[f64], cols: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    x.chunks(cols).flat_map(f).collect()
}

#[allow(clippy::too_many_arguments)]
fn attention_ref(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch: usize,
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    causal: bool,
    mask: Option<&[bool]>,
) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; batch * tq * d];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..tq {
                let qi = &q[(b * tq + i) * d + h * dh..][..dh];
                let mut scores = Vec::new();
                let mut keep = Vec::new();
                for j in 0..tk {
                    let kj = &k[(b * tk + j) * d + h * dh..][..dh];
                    let ok = !(causal && j > i) && mask.map_or(true, |m| m[b * tk + j]);
                    if ok {
                        scores.push(qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() / (dh as f64).sqrt());
                        keep.push(j);
                    }
                }
                if keep.is_empty() {
                    continue;
                }
                let p = softmax_row(&scores);
                for (pj, &j) in p.iter().zip(&keep) {
                    for c in 0..dh {
                        out[(b * tq + i) * d + h * dh + c] += pj * v[(b * tk + j) * d + h * dh + c];
                    }
                }
            }
        }
    }
    out
}

/// Every operator registered on the graph, with shapes small enough for
/// exhaustive per-element differencing.
pub fn all_cases() -> Vec<Case> {
    let mut cases = vec![
        Case {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 2]],
            build: Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
            reference: Box::new(|x| matmul(&x[0], &x[1], 3, 4, 2)),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "matmul_nt",
            shapes: vec![vec![3, 4], vec![5, 4]],
            build: Box::new(|g, v| g.matmul_nt(v[0], v[1]).unwrap()),
            reference: Box::new(|x| matmul(&x[0], &transpose(&x[1], 5, 4), 3, 4, 5)),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "add",
            shapes: vec![vec![2, 3], vec![2, 3]],
            build: Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
            reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "sub",
            shapes: vec![vec![2, 3], vec![2, 3]],
            build: Box::new(|g, v| g.sub(v[0], v[1]).unwrap()),
            reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a - b).collect()),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "mul",
            shapes: vec![vec![2, 3], vec![2, 3]],
            build: Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
            reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "add_row",
            shapes: vec![vec![3, 4], vec![4]],
            build: Box::new(|g, v| g.add_row(v[0], v[1]).unwrap()),
            reference: Box::new(|x| rows_map(&x[0], 4, |r| r.iter().zip(&x[1]).map(|(a, b)| a + b).collect())),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "scale",
            shapes: vec![vec![2, 3]],
            build: Box::new(|g, v| g.scale(v[0], -1.7)),
            reference: Box::new(|x| x[0].iter().map(|a| a * -1.7f32 as f64).collect()),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "relu",
            shapes: vec![vec![3, 4]],
            build: Box::new(|g, v| g.relu(v[0])),
            reference: Box::new(|x| x[0].iter().map(|a| a.max(0.0)).collect()),
            avoid_zero: true,
            blocked: &[],
        },
        Case {
            name: "layer_norm",
            shapes: vec![vec![3, 5], vec![5], vec![5]],
            build: Box::new(|g, v| g.layer_norm(v[0], v[1], v[2]).unwrap()),
            reference: Box::new(|x| {
                rows_map(&x[0], 5, |r| {
                    let mean = r.iter().sum::<f64>() / 5.0;
                    let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
                    let rs = 1.0 / (var + 1e-5).sqrt();
                    (0..5).map(|c| (r[c] - mean) * rs * x[1][c] + x[2][c]).collect()
                })
            }),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "softmax",
            shapes: vec![vec![3, 4]],
            build: Box::new(|g, v| g.softmax(v[0])),
            reference: Box::new(|x| rows_map(&x[0], 4, softmax_row)),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "log_softmax",
            shapes: vec![vec![3, 4]],
            build: Box::new(|g, v| g.log_softmax(v[0])),
            reference: Box::new(|x| rows_map(&x[0], 4, |r| softmax_row(r).iter().map(|p| p.ln()).collect())),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "gather_rows",
            shapes: vec![vec![4, 3]],
            build: Box::new(|g, v| g.gather_rows(v[0], &[2, 0, 2, 3]).unwrap()),
            reference: Box::new(|x| [2usize, 0, 2, 3].iter().flat_map(|&r| x[0][r * 3..r * 3 + 3].to_vec()).collect()),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "embedding",
            shapes: vec![vec![5, 2]],
            build: Box::new(|g, v| g.embedding(v[0], &[4, 4, 1]).unwrap()),
            reference: Box::new(|x| [4usize, 4, 1].iter().flat_map(|&r| x[0][r * 2..r * 2 + 2].to_vec()).collect()),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "mean_pool",
            shapes: vec![vec![5, 3]],
            build: Box::new(|g, v| g.mean_pool(v[0], vec![vec![0, 1, 2], vec![3], vec![1, 4]]).unwrap()),
            reference: Box::new(|x| {
                let groups: [&[usize]; 3] = [&[0, 1, 2], &[3], &[1, 4]];
                groups
                    .iter()
                    .flat_map(|grp| {
                        (0..3)
                            .map(|c| grp.iter().map(|&r| x[0][r * 3 + c]).sum::<f64>() / grp.len() as f64)
                            .collect::<Vec<_>>()
                    })
                    .collect()
            }),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "sum_squares",
            shapes: vec![vec![2, 3]],
            build: Box::new(|g, v| g.sum_squares(v[0])),
            reference: Box::new(|x| vec![x[0].iter().map(|a| a * a).sum()]),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "dot",
            shapes: vec![vec![2, 3], vec![2, 3]],
            build: Box::new(|g, v| g.dot(v[0], v[1]).unwrap()),
            reference: Box::new(|x| vec![x[0].iter().zip(&x[1]).map(|(a, b)| a * b).sum()]),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "row_dot",
            shapes: vec![vec![3, 4], vec![3, 4]],
            build: Box::new(|g, v| g.row_dot(v[0], v[1]).unwrap()),
            reference: Box::new(|x| {
                (0..3)
                    .map(|r| (0..4).map(|c| x[0][r * 4 + c] * x[1][r * 4 + c]).sum())
                    .collect()
            }),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "stop_grad",
            shapes: vec![vec![2, 2], vec![2, 2]],
            build: Box::new(|g, v| {
                let s = g.stop_grad(v[1]);
                g.mul(v[0], s).unwrap()
            }),
            reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()),
            avoid_zero: false,
            blocked: &[1],
        },
        Case {
            name: "concat_rows",
            shapes: vec![vec![2, 3], vec![1, 3]],
            build: Box::new(|g, v| g.concat(&[v[0], v[1]], 0).unwrap()),
            reference: Box::new(|x| x[0].iter().chain(&x[1]).cloned().collect()),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "concat_cols",
            shapes: vec![vec![2, 3], vec![2, 1]],
            build: Box::new(|g, v| g.concat(&[v[0], v[1]], 1).unwrap()),
            reference: Box::new(|x| {
                (0..2)
                    .flat_map(|r| {
                        let mut row = x[0][r * 3..r * 3 + 3].to_vec();
                        row.push(x[1][r]);
                        row
                    })
                    .collect()
            }),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "sum",
            shapes: vec![vec![2, 3]],
            build: Box::new(|g, v| g.sum(v[0])),
            reference: Box::new(|x| vec![x[0].iter().sum()]),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "mean",
            shapes: vec![vec![2, 3]],
            build: Box::new(|g, v| g.mean(v[0])),
            reference: Box::new(|x| vec![x[0].iter().sum::<f64>() / 6.0]),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "cross_entropy",
            shapes: vec![vec![4, 5]],
            build: Box::new(|g, v| g.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)]).unwrap()),
            reference: Box::new(|x| {
                let t = [Some(1usize), None, Some(4), Some(0)];
                let mut s = 0.0;
                for (r, t) in t.iter().enumerate() {
                    if let Some(t) = t {
                        s -= softmax_row(&x[0][r * 5..r * 5 + 5])[*t].ln();
                    }
                }
                vec![s / 3.0]
            }),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "attention_self_masked",
            shapes: vec![vec![6, 4], vec![6, 4], vec![6, 4]],
            build: Box::new(|g, v| {
                let spec = Attention {
                    batch: 2,
                    q_len: 3,
                    k_len: 3,
                    heads: 2,
                    causal: false,
                    key_mask: Some(vec![true, true, false, true, false, true]),
                };
                g.attention(v[0], v[1], v[2], spec).unwrap()
            }),
            reference: Box::new(|x| {
                let m = [true, true, false, true, false, true];
                attention_ref(&x[0], &x[1], &x[2], 2, 3, 3, 4, 2, false, Some(&m))
            }),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "attention_causal",
            shapes: vec![vec![8, 4], vec![8, 4], vec![8, 4]],
            build: Box::new(|g, v| {
                let spec = Attention { batch: 2, q_len: 4, k_len: 4, heads: 2, causal: true, key_mask: None };
                g.attention(v[0], v[1], v[2], spec).unwrap()
            }),
            reference: Box::new(|x| attention_ref(&x[0], &x[1], &x[2], 2, 4, 4, 4, 2, true, None)),
            avoid_zero: false,
            blocked: &[],
        },
        Case {
            name: "attention_cross",
            shapes: vec![vec![4, 6], vec![6, 6], vec![6, 6]],
            build: Box::new(|g, v| {
                let spec = Attention { batch: 2, q_len: 2, k_len: 3, heads: 3, causal: false, key_mask: None };
                g.attention(v[0], v[1], v[2], spec).unwrap()
            }),
            reference: Box::new(|x| attention_ref(&x[0], &x[1], &x[2], 2, 2, 3, 6, 3, false, None)),
            avoid_zero: false,
            blocked: &[],
        },
    ];
    // A composite chain exercising several operators together.
    cases.push(Case {
        name: "composite_mlp_infonce",
        shapes: vec![vec![4, 3], vec![3, 5], vec![5]],
        build: Box::new(|g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.add_row(h, v[2]).unwrap();
            let h = g.relu(h);
            let s = g.matmul_nt(h, h).unwrap();
            let s = g.scale(s, 1.0 / 0.5);
            g.cross_entropy(s, &[Some(1), Some(0), Some(3), Some(2)]).unwrap()
        }),
        reference: Box::new(|x| {
            let h = matmul(&x[0], &x[1], 4, 3, 5);
            let h: Vec<f64> = rows_map(&h, 5, |r| r.iter().zip(&x[2]).map(|(a, b)| (a + b).max(0.0)).collect());
            let s = matmul(&h, &transpose(&h, 4, 5), 4, 5, 4);
            let t = [1usize, 0, 3, 2];
            let mut l = 0.0;
            for r in 0..4 {
                let row: Vec<f64> = s[r * 4..r * 4 + 4].iter().map(|v| v / 0.5).collect();
                l -= softmax_row(&row)[t[r]].ln();
            }
            vec![l / 4.0]
        }),
        avoid_zero: true,
        blocked: &[],
    });
    cases
}

/// Checks the stop-gradient case separately: the blocked input must get an
/// exactly-zero gradient while the other input matches the reference.
pub fn stop_grad_blocks(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let x = g.variable(Tensor::matrix(2, 2, a).unwrap());
    let y = g.variable(Tensor::matrix(2, 2, b.clone()).unwrap());
    let sy = g.stop_grad(y);
    let d = g.sub(x, sy).unwrap();
    let l = g.sum_squares(d);
    let grads = g.backward(l).unwrap();
    grads.wrt(y).map_or(true, |t| t.data().iter().all(|v| *v == 0.0))
}
