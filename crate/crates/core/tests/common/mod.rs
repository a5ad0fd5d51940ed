//! Straight-line reference implementations, a finite-difference checker and
//! fixtures shared by the integration tests.
#![allow(dead_code)]

use prism25d::attention::{EncoderConfig, KernelConfig, KernelLevel};
use prism25d::compactor::{attach_motion, register_and_compact, EncoderInput, EncoderNode, MatchParams};
use prism25d::graph::ClassKind;
use prism25d::numcore::{Mlp, ParamStore, Tape, Tensor, Var};
use prism25d::qa::{Dataset, ModelConfig, QaModel};
use prism25d::synth::{generate_corpus, Corpus, CorpusSpec, QaTask, WorldSpec, VOCAB_SIZE};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Cols = Vec<Vec<f64>>;

pub fn tensor_cols(t: &Tensor) -> Cols {
    (0..t.cols()).map(|j| t.column_vec(j)).collect()
}

pub fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| (0..w.cols()).map(|j| w.get(i, j) * x[j]).sum())
        .collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn kernel_value(p: &[f64; 3], tp: &[f64], q: &[f64; 3], tq: &[f64], level: &KernelLevel) -> f64 {
    let d2: f64 = (0..3).map(|i| (p[i] - q[i]).powi(2)).sum();
    let mut dt = f64::INFINITY;
    for a in tp {
        for b in tq {
            dt = dt.min((a - b).abs());
        }
    }
    (-d2 / level.sigma_s.powi(2) - dt / level.sigma_t).exp()
}

/// Naive `MLP(x)` per column.
pub fn mlp_cols(store: &ParamStore, mlp: &Mlp, x: &Cols) -> Cols {
    x.iter()
        .map(|col| {
            let mut h = col.clone();
            for layer in &mlp.layers {
                let w = store.get(layer.weight);
                let b = store.get(layer.bias);
                h = matvec(w, &h).iter().zip(b.data()).map(|(a, c)| a + c).collect();
                if layer.activation == prism25d::numcore::Activation::Relu {
                    h.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            h
        })
        .collect()
}

/// Multi-head dot-product attention with queries from `target`.
pub fn naive_attend(heads: &[(Tensor, Tensor, Tensor)], target: &Cols, source: &Cols) -> Cols {
    let mut out = vec![Vec::new(); target.len()];
    for (wq, wk, wv) in heads {
        let rk = wq.rows() as f64;
        let q: Cols = target.iter().map(|c| matvec(wq, c)).collect();
        let k: Cols = source.iter().map(|c| matvec(wk, c)).collect();
        let v: Cols = source.iter().map(|c| matvec(wv, c)).collect();
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / rk.sqrt())
                .collect();
            let a = softmax(&scores);
            for d in 0..wv.rows() {
                out[i].push(a.iter().zip(&v).map(|(w, vj)| w * vj[d]).sum());
            }
        }
    }
    out
}

pub fn mha_weights(store: &ParamStore, mha: &prism25d::attention::MultiHeadAttention) -> Vec<(Tensor, Tensor, Tensor)> {
    mha.heads
        .iter()
        .map(|h| (store.get(h.query).clone(), store.get(h.key).clone(), store.get(h.value).clone()))
        .collect()
}

/// Softmaxed kernel rows applied to each head's values.
pub fn naive_kernel_attention(input: &EncoderInput, f: &Cols, level: &KernelLevel, values: &[Tensor]) -> Cols {
    let n = input.nodes.len();
    let mut out = vec![Vec::new(); n];
    for wv in values {
        let v: Cols = f.iter().map(|c| matvec(wv, c)).collect();
        for i in 0..n {
            let row: Vec<f64> = (0..n)
                .map(|j| {
                    let (a, b) = (&input.nodes[i], &input.nodes[j]);
                    kernel_value(&a.position, &a.timestamps, &b.position, &b.timestamps, level)
                })
                .collect();
            let w = softmax(&row);
            for d in 0..wv.rows() {
                out[i].push(w.iter().zip(&v).map(|(a, vj)| a * vj[d]).sum());
            }
        }
    }
    out
}

pub fn add_cols(a: &Cols, b: &Cols) -> Cols {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn max_diff(a: &Cols, b: &Cols) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn random_input(rng: &mut ChaCha8Rng, n: usize, d_o: usize, d_a: usize, spread: f64) -> EncoderInput {
    let nodes = (0..n)
        .map(|i| {
            let kind = if rng.random_bool(0.5) { ClassKind::Static } else { ClassKind::Dynamic };
            let width = if kind == ClassKind::Static { d_o } else { d_o + d_a };
            let n_obs = if kind == ClassKind::Static { rng.random_range(1..4) } else { 1 };
            let mut timestamps: Vec<f64> = (0..n_obs).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
            timestamps.sort_by(f64::total_cmp);
            timestamps.dedup();
            EncoderNode {
                node_id: i as u32,
                kind,
                feature: (0..width).map(|_| rng.random_range(-1.0..1.0)).collect(),
                position: [
                    rng.random_range(-spread..spread),
                    rng.random_range(-spread..spread),
                    rng.random_range(-spread..spread),
                ],
                timestamps,
            }
        })
        .collect();
    EncoderInput {
        video_id: "v".into(),
        nodes,
    }
}

/// The same nodes in a different column order, renumbered so ids stay ascending.
pub fn permuted(input: &EncoderInput, perm: &[usize]) -> EncoderInput {
    EncoderInput {
        video_id: input.video_id.clone(),
        nodes: perm
            .iter()
            .enumerate()
            .map(|(new, &old)| EncoderNode {
                node_id: new as u32,
                ..input.nodes[old].clone()
            })
            .collect(),
    }
}

pub fn encoder_config(sigmas: &[f64], heads: usize, r: usize, d_o: usize, d_a: usize, combine: bool) -> EncoderConfig {
    EncoderConfig {
        object_dim: d_o,
        motion_dim: d_a,
        kernel: KernelConfig::hierarchy(sigmas, heads, r),
        standard_layers: 1,
        combine,
    }
}

/// Relative error `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub struct GradReport {
    pub worst: f64,
    pub detail: String,
    pub checked: usize,
}

/// Compares reverse-mode gradients with central differences for every scalar
/// of every parameter; `build` records a scalar loss on the tape.
pub fn gradient_check(store: &mut ParamStore, h: f64, build: impl Fn(&mut Tape, &ParamStore) -> Var) -> GradReport {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    tape.backward(loss).unwrap();
    let mut grads = store.clone();
    grads.zero_grad();
    for id in grads.ids().collect::<Vec<_>>() {
        grads.get_mut(id).set_grad(None);
    }
    tape.accumulate_into(&mut grads);
    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let l = build(&mut t, s);
        t.value(l).item().unwrap()
    };
    let mut report = GradReport {
        worst: 0.0,
        detail: String::new(),
        checked: 0,
    };
    for id in store.ids().collect::<Vec<_>>() {
        let analytic = grads.get(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(store);
            store.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(analytic[k], numeric);
            report.checked += 1;
            if e > report.worst {
                report.worst = e;
                report.detail = format!("{}[{k}]: analytic {} numeric {numeric}", store.name(id), analytic[k]);
            }
        }
    }
    report
}

/// NearestStatic corpus: three static and one dynamic object per world, one
/// question per world.
pub fn nearest_static_corpus(seed: u64, n_worlds: usize) -> Corpus {
    generate_corpus(&CorpusSpec {
        world: WorldSpec {
            seed,
            n_static: 3,
            n_dynamic: 1,
            ..WorldSpec::default()
        },
        n_worlds,
        task: QaTask::NearestStatic,
        questions_per_world: 1,
        cameras: vec![],
    })
    .expect("corpus generates")
}

pub fn corpus_inputs(corpus: &Corpus) -> Vec<EncoderInput> {
    corpus
        .worlds
        .iter()
        .map(|w| attach_motion(&register_and_compact(&w.graph().unwrap(), &MatchParams::default()).unwrap()).unwrap())
        .collect()
}

pub fn qa_model_config(sigmas: &[f64], seed: u64) -> ModelConfig {
    ModelConfig {
        encoder: encoder_config(sigmas, 4, 32, 16, 4, true),
        vocab_size: VOCAB_SIZE,
        seed,
    }
}

pub fn dataset(corpus: &Corpus, cfg: &ModelConfig) -> Dataset {
    Dataset::new(corpus_inputs(corpus), corpus.qa.clone(), cfg).unwrap()
}

pub fn fresh_model(cfg: ModelConfig) -> QaModel {
    QaModel::new(cfg).unwrap()
}
