//! Acceptance gate. Each test checks one release criterion and prints a
//! single pass/fail line; run them in order with
//!
//! ```text
//! cargo test --test acceptance -- --test-threads=1 --nocapture
//! ```
//!
//! Criteria 1 to 7 and 10 to 11 are exact properties. Criteria 8 and 9 are
//! directional training results at desk scale with CPU budgets; their
//! training lengths are tuned to land inside those budgets on one core.

use std::collections::BTreeMap;
use std::fs;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swbt::cli::{cmd_finetune, cmd_gen_data, cmd_pretrain, cmd_score};
use swbt::datamodel::{
    DataDims, DemoDataset, Role, SegmentOrigin, Transition, TrajectorySegment,
};
use swbt::envsim::{preset, Env, ScriptedPolicy};
use swbt::finetune::{
    evaluate_model, finetune, loss_weighted_bc, FinetuneConfig, InitMode,
};
use swbt::numcore::gradcheck::{central_diff, max_rel_err};
use swbt::numcore::{Graph, Tensor, TensorId};
use swbt::pretrain::{build_losses, pretrain, sample_mask, LossWeights, PretrainConfig};
use swbt::scoring::{
    filtered_refs, normalize_scores, score_segments, segment_weight, ModalityFeatures,
    QualityRow, QualityTable, SimilarityConfig, SimilarityMetric,
};
use swbt::transformer::{BatchItem, ModelConfig, SegmentBatch, Slot, SwbtModel, TokenMaskSpec};
use swbt::util::cpu_time_secs;

fn verdict(id: usize, name: &str, ok: bool, detail: &str) {
    let v = if ok { "PASS" } else { "FAIL" };
    println!("acceptance {id:02} {name}: {v} ({detail})");
    assert!(ok, "acceptance {id:02} {name}: FAIL ({detail})");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Criteria 8 and 9 check process CPU time against fixed budgets. Run them
// one at a time so neither span is billed for the other's work when the
// harness schedules tests in parallel.
static CPU_BUDGET_GATE: Mutex<()> = Mutex::new(());

// ---------------------------------------------------------------- criterion 1

type OpBuilder = Box<dyn Fn(&mut Graph<f64>, &[TensorId]) -> TensorId>;

struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: OpBuilder,
}

fn op_cases(r: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut cases: Vec<OpCase> = Vec::new();
    let mut case = |name, shapes, build| {
        cases.push(OpCase {
            name,
            shapes,
            build,
        })
    };

    case(
        "add",
        vec![vec![3, 4], vec![3, 4]],
        Box::new(|g, x| g.add(x[0], x[1]).unwrap()),
    );
    case(
        "add_row",
        vec![vec![4, 3], vec![3]],
        Box::new(|g, x| g.add_row(x[0], x[1]).unwrap()),
    );
    case(
        "sub",
        vec![vec![3, 4], vec![3, 4]],
        Box::new(|g, x| g.sub(x[0], x[1]).unwrap()),
    );
    case(
        "mul",
        vec![vec![2, 5], vec![2, 5]],
        Box::new(|g, x| g.mul(x[0], x[1]).unwrap()),
    );
    case(
        "scale",
        vec![vec![3, 3]],
        Box::new(|g, x| g.scale(x[0], -1.7).unwrap()),
    );
    case(
        "matmul",
        vec![vec![3, 4], vec![4, 2]],
        Box::new(|g, x| g.matmul(x[0], x[1]).unwrap()),
    );
    case(
        "transpose",
        vec![vec![3, 5]],
        Box::new(|g, x| g.transpose(x[0]).unwrap()),
    );
    case(
        "relu",
        vec![vec![4, 4]],
        Box::new(|g, x| g.relu(x[0]).unwrap()),
    );
    case(
        "gelu",
        vec![vec![4, 4]],
        Box::new(|g, x| g.gelu(x[0]).unwrap()),
    );
    case(
        "tanh",
        vec![vec![4, 4]],
        Box::new(|g, x| g.tanh(x[0]).unwrap()),
    );
    case(
        "softmax_axis0",
        vec![vec![3, 4]],
        Box::new(|g, x| g.softmax(x[0], 0).unwrap()),
    );
    case(
        "softmax_rows_unmasked",
        vec![vec![3, 5]],
        Box::new(|g, x| g.softmax_rows(x[0], None).unwrap()),
    );
    // Attention-style mask, one row almost fully blocked.
    let mask: Vec<bool> = {
        let mut m = vec![true; 3 * 5];
        m[2] = false;
        m[7] = false;
        for v in m.iter_mut().take(14).skip(10) {
            *v = false;
        }
        m
    };
    let mask = Arc::new(mask);
    case(
        "softmax_rows_masked",
        vec![vec![3, 5]],
        Box::new(move |g, x| g.softmax_rows(x[0], Some(mask.clone())).unwrap()),
    );
    case(
        "layer_norm",
        vec![vec![3, 6], vec![6], vec![6]],
        Box::new(|g, x| g.layer_norm(x[0], x[1], x[2], 1e-5).unwrap()),
    );
    case(
        "mse",
        vec![vec![3, 4], vec![3, 4]],
        Box::new(|g, x| g.mse(x[0], x[1]).unwrap()),
    );
    case(
        "sum",
        vec![vec![4, 3]],
        Box::new(|g, x| g.sum(x[0]).unwrap()),
    );
    // Mixed weights including an exact-zero row (the skip path).
    let row_w = Arc::new(vec![0.7, 0.0, 1.3, 0.2]);
    case(
        "weighted_sse",
        vec![vec![4, 3], vec![4, 3]],
        Box::new(move |g, x| g.weighted_sse(x[0], x[1], row_w.clone()).unwrap()),
    );
    case(
        "concat_rows",
        vec![vec![2, 4], vec![3, 4]],
        Box::new(|g, x| g.concat_rows(&[x[0], x[1]]).unwrap()),
    );
    case(
        "concat_cols",
        vec![vec![3, 2], vec![3, 4]],
        Box::new(|g, x| g.concat_cols(&[x[0], x[1]]).unwrap()),
    );
    case(
        "narrow_rows",
        vec![vec![5, 3]],
        Box::new(|g, x| g.narrow(x[0], 0, 1, 3).unwrap()),
    );
    case(
        "narrow_cols",
        vec![vec![3, 6]],
        Box::new(|g, x| g.narrow(x[0], 1, 2, 3).unwrap()),
    );
    // Repeated row indices exercise gradient accumulation.
    let rows = Arc::new(vec![0usize, 2, 2, 4, 1]);
    case(
        "gather_rows",
        vec![vec![5, 3]],
        Box::new(move |g, x| g.gather_rows(x[0], rows.clone()).unwrap()),
    );
    let keep: Vec<bool> = (0..16).map(|_| r.gen::<f64>() < 0.8).collect();
    let keep = Arc::new(keep);
    case(
        "dropout",
        vec![vec![4, 4]],
        Box::new(move |g, x| g.dropout(x[0], keep.clone(), 0.8).unwrap()),
    );
    cases
}

/// Worst relative FD error for one op case at one random point.
fn check_op_case(case: &OpCase, r: &mut ChaCha8Rng) -> f64 {
    let lens: Vec<usize> = case.shapes.iter().map(|s| s.iter().product()).collect();
    let total: usize = lens.iter().sum();
    // Keep values away from the relu kink so central differences stay clean.
    let x0: Vec<f64> = (0..total)
        .map(|_| {
            let v: f64 = r.gen::<f64>() * 2.0 - 1.0;
            if v.abs() < 0.05 {
                v + 0.3
            } else {
                v
            }
        })
        .collect();

    let leaves = |g: &mut Graph<f64>, xs: &[f64]| -> Vec<TensorId> {
        let mut ids = Vec::new();
        let mut off = 0;
        for (shape, len) in case.shapes.iter().zip(&lens) {
            let t = Tensor::new(shape.clone(), xs[off..off + len].to_vec()).unwrap();
            ids.push(g.leaf(&t, true));
            off += len;
        }
        ids
    };

    // Fixed random projection to a scalar, shared by every evaluation.
    let mut g = Graph::new();
    let ids = leaves(&mut g, &x0);
    let out = (case.build)(&mut g, &ids);
    let out_len: usize = g.shape(out).iter().product();
    let proj: Vec<f64> = (0..out_len).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect();

    let to_scalar = |g: &mut Graph<f64>, out: TensorId| -> TensorId {
        if g.shape(out) == [1] {
            return out;
        }
        let shape = g.shape(out).to_vec();
        let w = g.constant(shape, proj.clone()).unwrap();
        let prod = g.mul(out, w).unwrap();
        g.sum(prod).unwrap()
    };

    // Analytic gradients from one backward pass.
    let loss = to_scalar(&mut g, out);
    g.backward(loss).unwrap();
    let mut analytic = Vec::with_capacity(total);
    for id in &ids {
        analytic.extend_from_slice(g.grad(*id).expect("leaf gradient"));
    }

    let eval = |xs: &[f64]| -> f64 {
        let mut g = Graph::new();
        let ids = leaves(&mut g, xs);
        let out = (case.build)(&mut g, &ids);
        let loss = to_scalar(&mut g, out);
        g.value(loss)[0]
    };
    let numeric = central_diff(eval, &x0, 1e-5);
    max_rel_err(&analytic, &numeric, 1e-6)
}

fn random_transition<S: swbt::Scalar>(r: &mut ChaCha8Rng, dims: &DataDims) -> Transition<S> {
    Transition {
        obs: (0..dims.obs.flat())
            .map(|_| S::from_f64(r.gen::<f64>()))
            .collect(),
        proprio: (0..dims.proprio)
            .map(|_| S::from_f64(r.gen::<f64>() * 2.0 - 1.0))
            .collect(),
        action: (0..dims.action)
            .map(|_| S::from_f64(r.gen::<f64>() * 2.0 - 1.0))
            .collect(),
    }
}

fn random_segment<S: swbt::Scalar>(
    r: &mut ChaCha8Rng,
    dims: &DataDims,
    l: usize,
    padded_prefix: usize,
) -> TrajectorySegment<S> {
    TrajectorySegment {
        transitions: (0..l).map(|_| random_transition(r, dims)).collect(),
        origin: SegmentOrigin {
            trajectory: 0,
            start: 0,
        },
        padded_prefix,
    }
}

/// Combined training loss of a tiny model on fixed random segments: all
/// three pretraining terms plus the weighted cloning loss.
fn tiny_model_loss(
    model: &SwbtModel<f64>,
    segs: &[TrajectorySegment<f64>],
    bid_specs: &[TokenMaskSpec],
    want_grads: bool,
) -> (f64, Vec<Vec<f64>>) {
    let l = model.cfg.l;
    let bid_items: Vec<BatchItem<f64>> = segs
        .iter()
        .zip(bid_specs)
        .map(|(s, sp)| BatchItem::from_segment(s, sp))
        .collect();
    let bid = SegmentBatch::build(&model.cfg.dims, l, &bid_items).unwrap();
    let cau_spec = TokenMaskSpec::causal(l);
    let cau_items: Vec<BatchItem<f64>> = segs
        .iter()
        .map(|s| BatchItem::from_segment(s, &cau_spec))
        .collect();
    let cau = SegmentBatch::build(&model.cfg.dims, l, &cau_items).unwrap();

    let mut g = Graph::new();
    let bnd = model.bind(&mut g);
    let nodes = build_losses(
        model,
        &mut g,
        &bnd,
        Some(&bid),
        Some(&cau),
        &LossWeights::default(),
        None,
    )
    .unwrap();
    let qs = vec![0.9, 0.3];
    let bc = loss_weighted_bc(model, &mut g, &bnd, &cau, Some((&cau, &qs)), 0.5, None).unwrap();
    let total = g.add(nodes.total, bc).unwrap();
    let value = g.value(total)[0];
    if !want_grads {
        return (value, Vec::new());
    }
    g.backward(total).unwrap();
    let mut holder = model.clone();
    holder.apply_graph_grads(&g, &bnd).unwrap();
    let grads = holder
        .params
        .iter()
        .map(|(_, p)| p.tensor.grad.clone().unwrap_or_default())
        .collect();
    (value, grads)
}

#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    const OP_SEEDS: u64 = 24;
    const MODEL_SEEDS: u64 = 21;

    // Every primitive differentiable op, random shapes of values, OP_SEEDS
    // distinct random points each.
    let mut worst_op = 0.0f64;
    let mut worst_name = "";
    for seed in 0..OP_SEEDS {
        let mut r = rng(1000 + seed);
        for case in op_cases(&mut r) {
            let err = check_op_case(&case, &mut r);
            if err > worst_op {
                worst_op = err;
                worst_name = case.name;
            }
        }
    }

    // Whole-model composition: a tiny two-layer model, every parameter
    // tensor probed at sampled coordinates against central differences.
    let dims = ModelConfig::desk().dims;
    let cfg = ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        l: 3,
        dims,
        dropout: 0.0,
    };
    let mut worst_model = 0.0f64;
    let mut worst_param = String::new();
    for seed in 0..MODEL_SEEDS {
        let mut r = rng(2000 + seed);
        let model = SwbtModel::<f64>::new(cfg.clone(), seed).unwrap();
        let segs = vec![
            random_segment(&mut r, &dims, cfg.l, 0),
            random_segment(&mut r, &dims, cfg.l, 1),
        ];
        let bid_specs: Vec<TokenMaskSpec> = segs
            .iter()
            .map(|s| sample_mask(cfg.l, s.padded_prefix, &[0.4, 0.3], &mut r))
            .collect();
        let (_, grads) = tiny_model_loss(&model, &segs, &bid_specs, true);
        for (pi, grad) in grads.iter().enumerate() {
            let (name, p) = model.params.at(pi);
            let n = p.tensor.numel();
            for _ in 0..2 {
                let j = r.gen_range(0..n);
                let h = 1e-5;
                let mut m = model.clone();
                m.params.at_mut(pi).tensor.values[j] += h;
                let (fp, _) = tiny_model_loss(&m, &segs, &bid_specs, false);
                m.params.at_mut(pi).tensor.values[j] -= 2.0 * h;
                let (fm, _) = tiny_model_loss(&m, &segs, &bid_specs, false);
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = grad[j];
                let err = max_rel_err(&[analytic], &[numeric], 1e-6);
                if err > worst_model {
                    worst_model = err;
                    worst_param = format!("{name}[{j}]");
                }
            }
        }
    }

    let secs = start.elapsed().as_secs_f64();
    let ok = worst_op < 1e-4 && worst_model < 1e-4 && secs < 60.0;
    verdict(
        1,
        "gradient-suite",
        ok,
        &format!(
            "worst op err {worst_op:.2e} ({worst_name}), worst model err {worst_model:.2e} ({worst_param}), {OP_SEEDS}+{MODEL_SEEDS} seeds, {secs:.1}s < 60s"
        ),
    );
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_02_mask_partition() {
    let dims = ModelConfig::desk().dims;
    let mut r = rng(42);
    let mut checked = 0usize;
    for _ in 0..1000 {
        let l = r.gen_range(1..=8);
        let padded = r.gen_range(0..l);
        let spec = sample_mask(l, padded, &[0.4, 0.3, 0.2, 0.1], &mut r);
        // Spec-level partition: padded slots are in neither supervised set,
        // every other slot is in exactly one.
        for t in 0..l {
            for slot in 0..3 {
                let masked = spec.masked[3 * t + slot];
                let is_padded = t < padded;
                let in_mtp = masked;
                let in_tr = !masked && !is_padded;
                if is_padded {
                    assert!(
                        !in_mtp && !in_tr,
                        "padded slot (t={t}, slot={slot}) entered a supervised set"
                    );
                } else {
                    assert!(
                        in_mtp ^ in_tr,
                        "slot (t={t}, slot={slot}) must be supervised exactly once"
                    );
                }
            }
        }
        // Batch-level flags agree with the sampled TokenMaskSpec.
        let seg: TrajectorySegment<f32> = random_segment(&mut r, &dims, l, padded);
        let batch = SegmentBatch::build(&dims, l, &[BatchItem::from_segment(&seg, &spec)]).unwrap();
        for t in 0..l {
            assert_eq!(batch.padded[t], t < padded);
            for slot in 0..3 {
                assert_eq!(batch.masked[3 * t + slot], spec.masked[3 * t + slot]);
                assert!(
                    !(batch.masked[3 * t + slot] && batch.padded[t]),
                    "batch flagged a padded slot as masked"
                );
            }
        }
        checked += 1;
    }
    verdict(
        2,
        "mask-partition",
        checked == 1000,
        &format!("{checked} random mask specs, exact partition of non-padded slots"),
    );
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_03_causality() {
    let dims = ModelConfig::desk().dims;
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        l: 6,
        dims,
        dropout: 0.0,
    };
    let model = SwbtModel::<f32>::new(cfg.clone(), 7).unwrap();
    let spec = TokenMaskSpec::causal(cfg.l);
    let mut r = rng(99);
    let mut trials = 0usize;
    for _ in 0..100 {
        let base: TrajectorySegment<f32> = random_segment(&mut r, &dims, cfg.l, 0);
        let t = r.gen_range(0..cfg.l - 1);
        let u = r.gen_range(t + 1..cfg.l);
        let mut poked = base.clone();
        poked.transitions[u] = random_transition(&mut r, &dims);

        let fa = model.encode(&base, &spec).unwrap();
        let fb = model.encode(&poked, &spec).unwrap();
        for s in 0..=t {
            assert_eq!(
                fa.at(s, Slot::Act),
                fb.at(s, Slot::Act),
                "action features at step {s} changed after perturbing step {u}"
            );
        }
        trials += 1;
    }
    verdict(
        3,
        "causality",
        trials == 100,
        &format!("{trials} segment perturbations, features bit-identical at and before t"),
    );
}

// ---------------------------------------------------------------- criterion 4

fn oracle_neg_l2(a: &ModalityFeatures, b: &ModalityFeatures) -> f64 {
    let dist = |x: &[f64], y: &[f64]| -> f64 {
        x.iter()
            .zip(y)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    };
    0.0 - dist(&a.obs, &b.obs) - dist(&a.prop, &b.prop) - dist(&a.act, &b.act)
}

fn oracle_cosine(a: &ModalityFeatures, b: &ModalityFeatures) -> f64 {
    let cos = |x: &[f64], y: &[f64]| -> f64 {
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        dot / (nx * ny)
    };
    cos(&a.obs, &b.obs) + cos(&a.prop, &b.prop) + cos(&a.act, &b.act)
}

#[test]
fn criterion_04_scoring_oracle() {
    let mut r = rng(4242);
    let d = 5;
    let feats = |r: &mut ChaCha8Rng| ModalityFeatures {
        obs: (0..d).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect(),
        prop: (0..d).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect(),
        act: (0..d).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect(),
    };
    let expert: Vec<ModalityFeatures> = (0..20).map(|_| feats(&mut r)).collect();
    let mut imperfect: Vec<ModalityFeatures> = (0..10).map(|_| feats(&mut r)).collect();
    // One exact duplicate of an expert segment forces a zero-distance max.
    imperfect[3] = expert[11].clone();

    let mut compared = 0usize;
    for metric in [SimilarityMetric::NegL2, SimilarityMetric::Cosine] {
        for f in &imperfect {
            // Independent exhaustive double loop with a first-wins argmax.
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0usize;
            for (i, e) in expert.iter().enumerate() {
                let s = match metric {
                    SimilarityMetric::NegL2 => oracle_neg_l2(f, e),
                    SimilarityMetric::Cosine => oracle_cosine(f, e),
                };
                if s > best {
                    best = s;
                    best_idx = i;
                }
            }
            let (w, idx) = segment_weight(f, &expert, metric).unwrap();
            assert_eq!(w, best, "weight mismatch under {metric:?}");
            assert_eq!(idx, best_idx, "argmax mismatch under {metric:?}");
            compared += 1;
        }
    }
    verdict(
        4,
        "scoring-oracle",
        compared == 20,
        "10 x 20 instances, both metrics, weights and argmax bit-exact",
    );
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_05_normalization() {
    let mut r = rng(555);
    let mut checked = 0usize;
    for k in 0..500 {
        let n = r.gen_range(1..=40);
        let mut w: Vec<f64> = (0..n).map(|_| -r.gen::<f64>() * 5.0).collect();
        if k % 7 == 0 && n > 2 {
            w[1] = w[0]; // force a tie
        }
        if k % 11 == 0 {
            for v in w.iter_mut() {
                *v = -2.5; // degenerate: all equal
            }
        }
        let q = normalize_scores(&w);
        assert_eq!(q.len(), w.len());
        let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for &v in &q {
            assert!((0.0..=1.0).contains(&v), "score {v} out of range");
        }
        if lo == hi {
            assert!(q.iter().all(|&v| v == 1.0), "degenerate case must be all 1");
        } else {
            let arg_hi = w.iter().position(|&v| v == hi).unwrap();
            let arg_lo = w.iter().position(|&v| v == lo).unwrap();
            assert_eq!(q[arg_hi], 1.0, "max weight must map to exactly 1");
            assert_eq!(q[arg_lo], 0.0, "min weight must map to exactly 0");
            for i in 0..n {
                for j in 0..n {
                    if w[i] < w[j] {
                        assert!(q[i] < q[j], "order not preserved");
                    } else if w[i] == w[j] {
                        assert_eq!(q[i], q[j], "ties must stay tied");
                    }
                }
            }
        }
        checked += 1;
    }
    verdict(
        5,
        "normalization",
        checked == 500,
        "500 random weight vectors: range, endpoints, order, ties, degenerate",
    );
}

// ---------------------------------------------------------------- criterion 6

fn row(q: f64) -> QualityRow {
    QualityRow {
        origin: SegmentOrigin {
            trajectory: 0,
            start: 0,
        },
        w: q - 1.0,
        q,
        best_match: SegmentOrigin {
            trajectory: 0,
            start: 0,
        },
        kept: false,
    }
}

#[test]
fn criterion_06_filter_monotonicity() {
    let mut r = rng(66);
    let grid: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).chain([0.95, 0.99]).collect();
    for _ in 0..50 {
        let n = r.gen_range(1..=60);
        let mut table = QualityTable {
            beta: 0.0,
            rows: (0..n).map(|_| row(r.gen::<f64>())).collect(),
        };
        let mut prev = usize::MAX;
        for &beta in &grid {
            table.refilter(beta).unwrap();
            let kept = table.kept_count();
            assert!(
                kept <= prev,
                "raising beta to {beta} grew the reserved set ({kept} > {prev})"
            );
            prev = kept;
        }
    }

    // The worked example: scores 0.23 and 0.96 at threshold 0.9.
    let mut table = QualityTable {
        beta: 0.0,
        rows: vec![row(0.23), row(0.96)],
    };
    table.refilter(0.9).unwrap();
    assert!(!table.rows[0].kept, "q=0.23 must be dropped at beta 0.9");
    assert!(table.rows[1].kept, "q=0.96 must be reserved at beta 0.9");
    assert_eq!(table.kept_count(), 1);

    verdict(
        6,
        "filter-monotonicity",
        true,
        "reserved count non-increasing over 12-point beta grid x 50 tables; {0.23, 0.96} at 0.9 keeps only 0.96",
    );
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_07_expert_self_scoring() {
    let env = Env::default();
    let lv = preset("expert").unwrap();
    let mut policy = ScriptedPolicy::new(lv.knobs);
    let expert: DemoDataset<f32> = env
        .collect(&mut policy, 5, 31, "expert", Role::Expert, "self-score".into())
        .unwrap();
    let mut as_imperfect = expert.clone();
    as_imperfect.role = Role::Imperfect;
    as_imperfect.meta.role = Role::Imperfect;

    let model = SwbtModel::<f32>::new(ModelConfig::desk(), 3).unwrap();
    let table = score_segments(&model, &expert, &as_imperfect, &SimilarityConfig::default()).unwrap();
    assert!(!table.rows.is_empty());
    let all_zero_w = table.rows.iter().all(|r| r.w == 0.0);
    let all_one_q = table.rows.iter().all(|r| r.q == 1.0);
    let all_kept = table.rows.iter().all(|r| r.kept);
    verdict(
        7,
        "expert-self-scoring",
        all_zero_w && all_one_q && all_kept,
        &format!(
            "{} segments scored against their own set: w identically 0, q identically 1",
            table.rows.len()
        ),
    );
}

// ------------------------------------------------------------- criteria 8 & 9

fn collect_level(
    env: &Env,
    level: &str,
    episodes: usize,
    seed: u64,
    role: Role,
) -> DemoDataset<f32> {
    let lv = preset(level).expect("known level");
    let mut p = ScriptedPolicy::new(lv.knobs);
    env.collect(&mut p, episodes, seed, level, role, format!("acceptance:{level}"))
        .unwrap()
}

fn union_of(expert: &DemoDataset<f32>, imperfect: &DemoDataset<f32>) -> DemoDataset<f32> {
    let mut pool = expert.clone();
    pool.role = Role::Union;
    pool.meta.role = Role::Union;
    pool.trajectories
        .extend(imperfect.trajectories.iter().cloned());
    pool
}

const TRAIN_PRETRAIN_STEPS: usize = 2500;
const TRAIN_PRETRAIN_BATCH: usize = 16;
// Past ~1500 steps the cloning runs drift off their plateau; 1200 keeps
// every method at its best while fitting the CPU budgets.
const TRAIN_FINETUNE_STEPS: usize = 1200;
const TRAIN_FINETUNE_BATCH: usize = 32;
const HELDOUT_EPISODES: usize = 200;
const HELDOUT_SEED: u64 = 990_001;

fn pretrain_on(pool: &DemoDataset<f32>, seed: u64) -> SwbtModel<f32> {
    let cfg = PretrainConfig {
        batch_size: TRAIN_PRETRAIN_BATCH,
        steps: TRAIN_PRETRAIN_STEPS,
        seed,
        ..PretrainConfig::default()
    };
    let mut model = SwbtModel::new(ModelConfig::desk(), seed).unwrap();
    pretrain(&mut model, pool, &cfg).unwrap();
    model
}

fn finetune_cfg(lambda: f64, beta: f64, init: InitMode, seed: u64) -> FinetuneConfig {
    FinetuneConfig {
        lambda,
        beta,
        batch_size: TRAIN_FINETUNE_BATCH,
        steps: TRAIN_FINETUNE_STEPS,
        init,
        seed,
        eval_every: TRAIN_FINETUNE_STEPS, // only the final checkpoint
        eval_episodes: 20,
        eval_seed: 777_000,
        ..FinetuneConfig::default()
    }
}

/// Fine-tunes and reports held-out success on a fresh episode stream.
fn train_and_measure(
    env: &Env,
    init_model: SwbtModel<f32>,
    expert: &DemoDataset<f32>,
    reserved: &[(swbt::datamodel::SegmentRef, f64)],
    imperfect: &DemoDataset<f32>,
    cfg: &FinetuneConfig,
) -> f64 {
    let mut model = init_model;
    finetune(&mut model, env, expert, reserved, imperfect, cfg).unwrap();
    evaluate_model(&model, env, HELDOUT_EPISODES, HELDOUT_SEED).unwrap()
}

#[test]
fn criterion_08_method_ordering() {
    let _gate = CPU_BUDGET_GATE.lock().unwrap_or_else(|e| e.into_inner());
    let cpu0 = cpu_time_secs();
    let env = Env::default();
    const SEEDS: u64 = 3;

    let mut swbt_mean = 0.0;
    let mut base_mean = 0.0;
    let mut tfbc_mean = 0.0;
    let mut per_seed = Vec::new();
    for s in 0..SEEDS {
        let expert = collect_level(&env, "expert", 50, 100 + s, Role::Expert);
        let imperfect = collect_level(&env, "level090", 150, 200 + s, Role::Imperfect);
        let pool = union_of(&expert, &imperfect);
        let pre_model = pretrain_on(&pool, s);

        let mut table =
            score_segments(&pre_model, &expert, &imperfect, &SimilarityConfig::default())
                .unwrap();
        table.refilter(0.9).unwrap();
        let reserved = filtered_refs(&table, &imperfect, pre_model.cfg.l).unwrap();

        let swbt = train_and_measure(
            &env,
            pre_model.clone(),
            &expert,
            &reserved,
            &imperfect,
            &finetune_cfg(0.1, 0.9, InitMode::Pretrained, s),
        );
        let base = train_and_measure(
            &env,
            pre_model.clone(),
            &expert,
            &[],
            &imperfect,
            &finetune_cfg(0.0, 0.9, InitMode::Pretrained, s),
        );
        let tfbc = train_and_measure(
            &env,
            SwbtModel::new(ModelConfig::desk(), s).unwrap(),
            &expert,
            &[],
            &imperfect,
            &finetune_cfg(0.0, 0.9, InitMode::Random, s),
        );
        per_seed.push((swbt, base, tfbc));
        swbt_mean += swbt / SEEDS as f64;
        base_mean += base / SEEDS as f64;
        tfbc_mean += tfbc / SEEDS as f64;
    }

    let cpu_min = (cpu_time_secs() - cpu0) / 60.0;
    let ok = swbt_mean >= base_mean
        && base_mean >= tfbc_mean
        && swbt_mean - tfbc_mean >= 0.05
        && cpu_min < 45.0;
    verdict(
        8,
        "method-ordering",
        ok,
        &format!(
            "mean over {SEEDS} seeds: weighted {swbt_mean:.3} >= pretrained-only {base_mean:.3} >= scratch {tfbc_mean:.3}, gap {:.3} >= 0.05, {cpu_min:.1} min CPU < 45; per seed {per_seed:?}",
            swbt_mean - tfbc_mean
        ),
    );
}

#[test]
fn criterion_09_beta_sweep_shape() {
    let _gate = CPU_BUDGET_GATE.lock().unwrap_or_else(|e| e.into_inner());
    let cpu0 = cpu_time_secs();
    let env = Env::default();
    const SEEDS: u64 = 3;
    let betas = [0.0, 0.5, 0.9, 0.99];

    let mut means = [0.0f64; 4];
    for s in 0..SEEDS {
        let expert = collect_level(&env, "expert", 50, 300 + s, Role::Expert);
        let mut imperfect = collect_level(&env, "level00", 50, 400 + s, Role::Imperfect);
        for (level, seed) in [("level045", 500 + s), ("level090", 600 + s)] {
            let part = collect_level(&env, level, 50, seed, Role::Imperfect);
            imperfect.trajectories.extend(part.trajectories);
        }
        let pool = union_of(&expert, &imperfect);
        let pre_model = pretrain_on(&pool, s);
        let table =
            score_segments(&pre_model, &expert, &imperfect, &SimilarityConfig::default())
                .unwrap();

        for (i, &beta) in betas.iter().enumerate() {
            let mut t = table.clone();
            t.refilter(beta).unwrap();
            let reserved = filtered_refs(&t, &imperfect, pre_model.cfg.l).unwrap();
            let success = train_and_measure(
                &env,
                pre_model.clone(),
                &expert,
                &reserved,
                &imperfect,
                &finetune_cfg(0.1, beta, InitMode::Pretrained, s),
            );
            means[i] += success / SEEDS as f64;
        }
    }

    let cpu_min = (cpu_time_secs() - cpu0) / 60.0;
    let ok = means[2] > means[0] && means[2] >= means[3] - 0.03 && cpu_min < 90.0;
    verdict(
        9,
        "beta-sweep-shape",
        ok,
        &format!(
            "mean success over {SEEDS} seeds at beta {betas:?} = [{:.3}, {:.3}, {:.3}, {:.3}]; 0.9 beats 0.0 and stays within 0.03 of 0.99; {cpu_min:.1} min CPU < 90",
            means[0], means[1], means[2], means[3]
        ),
    );
}

// --------------------------------------------------------------- criterion 10

#[test]
fn criterion_10_lambda_zero_degeneracy() {
    let env = Env::default();
    let expert = collect_level(&env, "expert", 4, 77, Role::Expert);
    let imperfect = collect_level(&env, "level090", 4, 78, Role::Imperfect);
    let dims = ModelConfig::desk().dims;
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        l: 3,
        dims,
        dropout: 0.0,
    };
    let init = SwbtModel::<f32>::new(cfg, 5).unwrap();

    // A non-empty reserved set that lambda = 0 must ignore entirely.
    let mut table = score_segments(&init, &expert, &imperfect, &SimilarityConfig::default()).unwrap();
    table.refilter(0.0).unwrap();
    let reserved = filtered_refs(&table, &imperfect, init.cfg.l).unwrap();
    assert!(!reserved.is_empty(), "need a live reserved set");

    // Identical parameter trajectories at several horizons.
    let mut checked_steps = Vec::new();
    for steps in [1usize, 3, 10] {
        let fc = FinetuneConfig {
            lambda: 0.0,
            beta: 0.0,
            batch_size: 4,
            steps,
            eval_every: steps,
            eval_episodes: 2,
            eval_seed: 1,
            seed: 9,
            init: InitMode::Pretrained,
            ..FinetuneConfig::default()
        };
        let mut with_reserved = init.clone();
        let out_a = finetune(&mut with_reserved, &env, &expert, &reserved, &imperfect, &fc).unwrap();
        let mut expert_only = init.clone();
        let empty: DemoDataset<f32> = DemoDataset {
            trajectories: Vec::new(),
            role: Role::Imperfect,
            meta: imperfect.meta.clone(),
        };
        let out_b = finetune(&mut expert_only, &env, &expert, &[], &empty, &fc).unwrap();

        assert_eq!(out_a.eval, out_b.eval, "eval logs diverged at {steps} steps");
        for pi in 0..with_reserved.params.len() {
            let (name, pa) = with_reserved.params.at(pi);
            let (_, pb) = expert_only.params.at(pi);
            assert_eq!(
                pa.tensor.values, pb.tensor.values,
                "parameter {name} diverged at {steps} steps"
            );
        }
        checked_steps.push(steps);
    }
    verdict(
        10,
        "lambda-zero-degeneracy",
        true,
        &format!(
            "parameters bitwise identical to expert-only cloning after {checked_steps:?} steps"
        ),
    );
}

// --------------------------------------------------------------- criterion 11

#[test]
fn criterion_11_reproducibility() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path();
    let config = dir.join("exp.cfg");
    fs::write(
        &config,
        "\
[experiment]
seed = 21

[model]
d_model = 32
n_layers = 2
n_heads = 2
l = 6

[pretrain]
steps = 120
batch_size = 8

[scoring]
beta = 0.8

[finetune]
lambda = 0.1
beta = 0.8
batch_size = 8
steps = 60
eval_every = 30
eval_episodes = 8
eval_seed = 3
",
    )
    .unwrap();

    let expert = dir.join("expert.swbtds");
    let imperfect = dir.join("imp.swbtds");
    cmd_gen_data("expert", 6, 100, &expert).unwrap();
    cmd_gen_data("level090", 8, 200, &imperfect).unwrap();
    let imps = vec![imperfect.clone()];

    let run = |tag: &str| -> BTreeMap<String, Vec<u8>> {
        let out = dir.join(tag);
        let (ckpt, _) = cmd_pretrain(&config, &expert, &imps, &out.join("pre"), None).unwrap();
        cmd_score(&config, &ckpt, &expert, &imps, &out.join("scores")).unwrap();
        cmd_finetune(
            &config,
            &expert,
            &imps,
            Some(&out.join("scores").join("quality.csv")),
            Some(&ckpt),
            &out.join("run"),
            None,
            Some("repro".to_string()),
        )
        .unwrap();
        let mut files = BTreeMap::new();
        for rel in [
            "pre/pretrain_log.csv",
            "scores/quality.csv",
            "scores/quality_histogram.csv",
            "run/quality.csv",
            "run/eval_log.csv",
        ] {
            files.insert(rel.to_string(), fs::read(out.join(rel)).unwrap());
        }
        files
    };

    let first = run("a");
    let second = run("b");
    let mut same = true;
    for (name, bytes) in &first {
        if second[name] != *bytes {
            same = false;
            println!("acceptance 11: {name} differs between reruns");
        }
    }
    verdict(
        11,
        "reproducibility",
        same,
        &format!(
            "{} metric CSVs byte-identical across a full pipeline rerun",
            first.len()
        ),
    );
}
