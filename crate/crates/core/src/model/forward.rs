//! Forward pass: three relation branches per layer, gated layer combination,
//! interest-conditioned session readout and multi-interest scoring.
//!
//! Item states are `[N×d]` matrices (one row per merged item node), interest
//! embeddings are `[H×d]`. All three branches of a layer read the states
//! produced by the previous layer.

use crate::error::{ModelError, TensorError};
use crate::graph::MultiInterestGraph;
use crate::gru::gru_cell;
use crate::model::{ModelConfig, ParamVars, COMPACTNESS_EPS, LOG_EPS, NORM_EPS};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Interest embeddings plus their position and spread on the session timeline.
#[derive(Clone, Debug)]
pub struct InterestState {
    /// `[H×d]`
    pub embedding: Var,
    /// Attention-weighted mean relative step, per interest.
    pub centers: Vec<f64>,
    /// Attention-weighted mean absolute deviation from the previous center.
    pub compactness: Vec<f64>,
}

/// Attention weights and interest timeline state recorded at one layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerTrace {
    /// Item-item weights aligned with `graph.edges_vv`.
    pub transition: Vec<f64>,
    /// Item-to-interest assignment weights aligned with `graph.edges_vu`
    /// (interest-major, so row `h` is `[h*N .. (h+1)*N]`).
    pub assignment: Vec<f64>,
    /// Interest-to-item weights aligned with `graph.edges_uv` (item-major).
    pub attaching: Vec<f64>,
    pub centers: Vec<f64>,
    pub compactness: Vec<f64>,
}

pub struct StackOutput {
    /// `[N×d]` initial embeddings of the session's item nodes.
    pub initial_items: Var,
    /// `[N×d]` gated final item states.
    pub items: Var,
    pub interests: Option<InterestState>,
    pub trace: Vec<LayerTrace>,
}

pub struct Readout {
    /// `[H×d]` one session vector per interest.
    pub sessions: Var,
    /// Attention scores `γ`, interest-major (`h*N + i`).
    pub gamma: Vec<f64>,
}

/// Looks up the item embeddings and initializes every interest to their mean,
/// centered at the mean relative step.
pub fn init_nodes(
    tape: &mut Tape,
    graph: &MultiInterestGraph,
    p: &ParamVars,
) -> Result<(Var, InterestState), ModelError> {
    let vocab = tape.value(p.item_embeddings).rows();
    if let Some(&bad) = graph.item_nodes.iter().find(|&&i| i >= vocab) {
        return Err(ModelError::UnknownItem { index: bad, vocab });
    }
    let items = tape.gather_rows(p.item_embeddings, &graph.item_nodes)?;
    let mean = tape.mean_rows(items);
    let embedding = tape.gather_rows(mean, &vec![0; graph.interest_count])?;

    let steps: Vec<f64> = graph.relative_steps.iter().map(|&s| s as f64).collect();
    let n = steps.len() as f64;
    let center = steps.iter().sum::<f64>() / n;
    let spread = steps.iter().map(|s| (s - center).abs()).sum::<f64>() / n;
    Ok((
        items,
        InterestState {
            embedding,
            centers: vec![center; graph.interest_count],
            compactness: vec![spread; graph.interest_count],
        },
    ))
}

/// Splits bucket indices into the distinct values (first-seen order) and,
/// per entry, the position of its value among them. Per-bucket work then
/// runs once per distinct bucket instead of once per edge.
fn distinct(indices: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut values = Vec::new();
    let slot = indices
        .iter()
        .map(|&x| match values.iter().position(|&v| v == x) {
            Some(k) => k,
            None => {
                values.push(x);
                values.len() - 1
            }
        })
        .collect();
    (values, slot)
}

/// Item-item branch: interval-scored attention over incoming transitions,
/// then a GRU step. Nodes without incoming transitions keep their state.
/// Returns the new states and the attention weights per edge.
pub fn item_propagation_layer(
    tape: &mut Tape,
    graph: &MultiInterestGraph,
    items: Var,
    p: &ParamVars,
    layer: usize,
    cfg: &ModelConfig,
) -> Result<(Var, Vec<f64>), TensorError> {
    let edges = &graph.edges_vv;
    if edges.is_empty() {
        return Ok((items, Vec::new()));
    }
    let e = edges.len();
    let logits = if cfg.ablation.disable_vv_time {
        tape.constant(Tensor::zeros(&[e, 1]))
    } else {
        let intervals: Vec<usize> = edges.iter().map(|x| x.interval).collect();
        let (buckets, slot) = distinct(&intervals);
        let mlp = &p.interval_mlp;
        let t = tape.gather_rows(p.temporal_table, &buckets)?;
        let h = tape.matmul(t, mlp.w1)?;
        let h = tape.add_row(h, mlp.b1)?;
        let h = tape.leaky_relu(h, cfg.leaky_slope);
        let s = tape.matmul(h, mlp.w2)?;
        let s = tape.add_row(s, mlp.b2)?;
        tape.gather_rows(s, &slot)?
    };
    // edges are sorted by destination, so groups are consecutive runs
    let mut groups = Vec::with_capacity(e);
    let mut g = 0;
    for (k, edge) in edges.iter().enumerate() {
        if k > 0 && edge.dst != edges[k - 1].dst {
            g += 1;
        }
        groups.push(g);
    }
    let weights = tape.group_softmax(logits, &groups, g + 1)?;

    let src: Vec<usize> = edges.iter().map(|x| x.src).collect();
    let dst: Vec<usize> = edges.iter().map(|x| x.dst).collect();
    let neighbors = tape.gather_rows(items, &src)?;
    let weighted = tape.mul_rows(neighbors, weights)?;
    let messages = tape.segment_sum(weighted, &dst, graph.node_count())?;

    let updated = gru_cell(tape, items, messages, &p.layers[layer].0.vars())?;
    let out = tape.select_rows(&graph.has_vv_neighbors(), updated, items)?;
    Ok((out, tape.value(weights).data().to_vec()))
}

/// Item-to-interest branch: each interest pools transformed item states with
/// softmax assignment weights, and moves its timeline center and compactness
/// accordingly. Returns the branch output (before the layer activation) and
/// the assignment weights.
pub fn interest_extraction_layer(
    tape: &mut Tape,
    graph: &MultiInterestGraph,
    items: Var,
    interests: &InterestState,
    p: &ParamVars,
    layer: usize,
    cfg: &ModelConfig,
) -> Result<(InterestState, Vec<f64>), TensorError> {
    let lp = &p.layers[layer].1;
    let h = graph.interest_count;
    let item_idx: Vec<usize> = graph.edges_vu.iter().map(|&(v, _)| v).collect();
    let interest_idx: Vec<usize> = graph.edges_vu.iter().map(|&(_, u)| u).collect();

    let a = tape.matmul(interests.embedding, lp.assign_interest)?;
    let b = tape.matmul(items, lp.assign_item)?;
    let a = tape.gather_rows(a, &interest_idx)?;
    let b = tape.gather_rows(b, &item_idx)?;
    let logits = tape.add(a, b)?;
    let logits = tape.leaky_relu(logits, cfg.leaky_slope);
    let alpha = tape.group_softmax(logits, &interest_idx, h)?;

    let transformed = tape.matmul(items, lp.extract_trans)?;
    let gathered = tape.gather_rows(transformed, &item_idx)?;
    let weighted = tape.mul_rows(gathered, alpha)?;
    let embedding = tape.segment_sum(weighted, &interest_idx, h)?;

    let weights = tape.value(alpha).data().to_vec();
    let mut centers = vec![0.0; h];
    let mut compactness = vec![0.0; h];
    for (k, (&v, &u)) in item_idx.iter().zip(&interest_idx).enumerate() {
        let step = graph.relative_steps[v] as f64;
        centers[u] += weights[k] * step;
        compactness[u] += weights[k] * (step - interests.centers[u]).abs();
    }
    Ok((
        InterestState {
            embedding,
            centers,
            compactness,
        },
        weights,
    ))
}

/// Bucket index of the timeline distance between an item and an interest,
/// measured in units of the interest's compactness.
pub fn interest_distance_step(center: f64, compactness: f64, step: usize, max_step: usize) -> usize {
    let d = (center - step as f64).abs() / compactness.max(COMPACTNESS_EPS);
    let d = d.floor();
    if d >= max_step as f64 {
        max_step
    } else {
        d as usize
    }
}

/// Interest-to-item branch: each item attends over the interests using a
/// bilinear similarity plus a temporal-continuity term, and receives the
/// weighted transformed interests. Returns the branch output and weights.
pub fn interest_attaching_layer(
    tape: &mut Tape,
    graph: &MultiInterestGraph,
    items: Var,
    interests: &InterestState,
    p: &ParamVars,
    layer: usize,
    cfg: &ModelConfig,
) -> Result<(Var, Vec<f64>), TensorError> {
    let lp = &p.layers[layer].1;
    let n = graph.node_count();
    let interest_idx: Vec<usize> = graph.edges_uv.iter().map(|&(u, _)| u).collect();
    let item_idx: Vec<usize> = graph.edges_uv.iter().map(|&(_, v)| v).collect();

    let pv = tape.matmul(items, lp.attach_item)?;
    let qu = tape.matmul(interests.embedding, lp.attach_interest)?;
    let pv = tape.gather_rows(pv, &item_idx)?;
    let qu = tape.gather_rows(qu, &interest_idx)?;
    let mut logits = tape.row_dot(pv, qu)?;
    if !cfg.ablation.disable_uv_time {
        let steps: Vec<usize> = graph
            .edges_uv
            .iter()
            .map(|&(u, v)| {
                interest_distance_step(
                    interests.centers[u],
                    interests.compactness[u],
                    graph.relative_steps[v],
                    cfg.max_step,
                )
            })
            .collect();
        let (buckets, slot) = distinct(&steps);
        let t = tape.gather_rows(p.temporal_table, &buckets)?;
        let t = tape.matmul(t, lp.attach_time_w)?;
        let t = tape.add_row(t, lp.attach_time_b)?;
        let t = tape.gather_rows(t, &slot)?;
        logits = tape.add(logits, t)?;
    }
    let logits = tape.leaky_relu(logits, cfg.leaky_slope);
    let beta = tape.group_softmax(logits, &item_idx, n)?;

    let transformed = tape.matmul(interests.embedding, lp.attach_trans)?;
    let gathered = tape.gather_rows(transformed, &interest_idx)?;
    let weighted = tape.mul_rows(gathered, beta)?;
    let out = tape.segment_sum(weighted, &item_idx, n)?;
    Ok((out, tape.value(beta).data().to_vec()))
}

/// Runs `cfg.layers` synchronous layers and blends the final item states
/// with the initial embeddings through a sigmoid gate.
pub fn combine_and_stack(
    tape: &mut Tape,
    graph: &MultiInterestGraph,
    p: &ParamVars,
    cfg: &ModelConfig,
) -> Result<StackOutput, ModelError> {
    let (initial_items, initial_interests) = init_nodes(tape, graph, p)?;
    let use_interests = !cfg.ablation.single_interest;
    let mut items = initial_items;
    let mut interests = use_interests.then_some(initial_interests);
    let mut trace = Vec::with_capacity(cfg.layers);

    for layer in 0..cfg.layers {
        let (vv, transition) = item_propagation_layer(tape, graph, items, p, layer, cfg)?;
        let mut record = LayerTrace {
            transition,
            ..LayerTrace::default()
        };
        match interests.take() {
            Some(state) => {
                let (extracted, assignment) = interest_extraction_layer(tape, graph, items, &state, p, layer, cfg)?;
                let (uv, attaching) = interest_attaching_layer(tape, graph, items, &state, p, layer, cfg)?;
                let sum = tape.add(uv, vv)?;
                let act = tape.leaky_relu(sum, cfg.leaky_slope);
                items = tape.scale(act, 0.5);
                let embedding = tape.leaky_relu(extracted.embedding, cfg.leaky_slope);
                record.assignment = assignment;
                record.attaching = attaching;
                record.centers = extracted.centers.clone();
                record.compactness = extracted.compactness.clone();
                interests = Some(InterestState { embedding, ..extracted });
            }
            None => items = tape.leaky_relu(vv, cfg.leaky_slope),
        }
        trace.push(record);
    }

    let both = tape.concat_cols(initial_items, items)?;
    let gate = tape.matmul(both, p.readout.gate)?;
    let gate = tape.sigmoid(gate);
    let diff = tape.sub(initial_items, items)?;
    let shifted = tape.mul_rows(diff, gate)?;
    let items = tape.add(items, shifted)?;
    Ok(StackOutput {
        initial_items,
        items,
        interests,
        trace,
    })
}

/// Interest-conditioned attention pooling of the item states into one
/// session vector per interest. `interests = None` uses the learned query.
pub fn session_readout(
    tape: &mut Tape,
    graph: &MultiInterestGraph,
    items: Var,
    interests: Option<Var>,
    p: &ParamVars,
    cfg: &ModelConfig,
) -> Result<Readout, TensorError> {
    let r = &p.readout;
    let n = graph.node_count();
    let d = cfg.dim;
    let time = if cfg.ablation.disable_last_time {
        tape.constant(Tensor::zeros(&[n, d]))
    } else if cfg.ablation.use_first_time {
        tape.gather_rows(p.temporal_table, &graph.relative_steps)?
    } else {
        tape.gather_rows(p.temporal_table, &graph.last_steps)?
    };
    let keyed = tape.concat_cols(items, time)?;
    let z = tape.matmul(keyed, r.w0)?;
    let z = tape.add_row(z, r.b0)?;
    let z = tape.tanh(z);

    let queries = interests.unwrap_or(r.query);
    let h = tape.value(queries).rows();
    let pair_item: Vec<usize> = (0..h).flat_map(|_| 0..n).collect();
    let pair_interest: Vec<usize> = (0..h).flat_map(|u| std::iter::repeat_n(u, n)).collect();

    let zk = tape.matmul(z, r.w1)?;
    let uq = tape.matmul(queries, r.w2)?;
    let zk = tape.gather_rows(zk, &pair_item)?;
    let uq = tape.gather_rows(uq, &pair_interest)?;
    let pre = tape.add(zk, uq)?;
    let pre = tape.add_row(pre, r.b)?;
    let act = tape.sigmoid(pre);
    let gamma = tape.matmul(act, r.q)?;

    let v = tape.gather_rows(items, &pair_item)?;
    let weighted = tape.mul_rows(v, gamma)?;
    let pooled = tape.segment_sum(weighted, &pair_interest, h)?;
    let joined = tape.concat_cols(pooled, queries)?;
    let sessions = tape.matmul(joined, r.w3)?;
    Ok(Readout {
        sessions,
        gamma: tape.value(gamma).data().to_vec(),
    })
}

/// Per-interest softmax over cosine-normalized item embeddings, maximized
/// across interests. `sessions` is `[H×d]`; the result is `[|V|]`.
pub fn predict(tape: &mut Tape, sessions: Var, p: &ParamVars) -> Result<Var, TensorError> {
    let normalized = tape.l2_normalize_rows(p.item_embeddings, NORM_EPS);
    let logits = tape.matmul_nt(sessions, normalized)?;
    let probs = tape.row_softmax(logits)?;
    Ok(tape.column_max(probs))
}

/// Sum of pairwise cosine similarities between interest embeddings.
pub fn corr_loss(tape: &mut Tape, interests: Var) -> Var {
    tape.pairwise_cosine_sum(interests, NORM_EPS)
}

/// Binary cross-entropy of the scores against the one-hot target, plus
/// `lambda` times the interest correlation when given.
pub fn total_loss(
    tape: &mut Tape,
    scores: Var,
    target: usize,
    corr: Option<Var>,
    lambda: f64,
) -> Result<Var, ModelError> {
    if tape.value(scores).data().iter().any(|x| x.is_nan()) {
        return Err(ModelError::NonFinite("scores"));
    }
    let ce = tape.binary_cross_entropy(scores, target, LOG_EPS)?;
    match corr {
        Some(c) if lambda != 0.0 => {
            let penalty = tape.scale(c, lambda);
            Ok(tape.add(ce, penalty)?)
        }
        _ => Ok(ce),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Session;
    use crate::graph::{build_graph, GraphConfig};
    use crate::model::{Model, ModelParams};

    fn toy(items: &[usize], ts: &[i64], h: usize) -> (MultiInterestGraph, ModelConfig) {
        let s = Session {
            session_id: "t".into(),
            items: items.to_vec(),
            timestamps: ts.to_vec(),
        };
        let mut cfg = ModelConfig::new(6);
        cfg.dim = 4;
        cfg.interests = h;
        cfg.layers = 2;
        let g = build_graph(
            &s,
            &GraphConfig {
                interests: h,
                ..cfg.graph_config()
            },
        )
        .unwrap();
        (g, cfg)
    }

    #[test]
    fn interests_start_at_item_mean() {
        let (g, cfg) = toy(&[1, 2], &[0, 40], 2);
        let params = ModelParams::init(&cfg, 7);
        let mut tape = Tape::new();
        let p = params.register(&mut tape, false);
        let (_, state) = init_nodes(&mut tape, &g, &p).unwrap();
        let e = &params.item_embeddings;
        let u = tape.value(state.embedding);
        for h in 0..2 {
            for c in 0..4 {
                assert!((u.get(h, c) - (e.get(1, c) + e.get(2, c)) / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn timeline_init() {
        let (g, cfg) = toy(&[1, 2, 3], &[0, 60, 120], 2);
        let params = ModelParams::init(&cfg, 7);
        let mut tape = Tape::new();
        let p = params.register(&mut tape, false);
        let (_, state) = init_nodes(&mut tape, &g, &p).unwrap();
        assert!((state.centers[0] - 22.0 / 3.0).abs() < 1e-12);

        let (g, _) = toy(&[1], &[5], 2);
        let (_, state) = init_nodes(&mut tape, &g, &p).unwrap();
        assert_eq!(state.compactness, vec![0.0, 0.0]);
    }

    #[test]
    fn single_neighbor_gets_full_weight() {
        let (g, cfg) = toy(&[1, 2], &[0, 30], 1);
        let params = ModelParams::init(&cfg, 7);
        let mut tape = Tape::new();
        let p = params.register(&mut tape, false);
        let (items, _) = init_nodes(&mut tape, &g, &p).unwrap();
        let (_, w) = item_propagation_layer(&mut tape, &g, items, &p, 0, &cfg).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
    }

    #[test]
    fn equal_intervals_give_uniform_attention() {
        // node 1 has two incoming edges (from 0 and 2) with the same interval
        let (g, cfg) = toy(&[1, 2, 3], &[0, 16, 32], 1);
        let params = ModelParams::init(&cfg, 7);
        let mut tape = Tape::new();
        let p = params.register(&mut tape, false);
        let (items, _) = init_nodes(&mut tape, &g, &p).unwrap();
        let (_, w) = item_propagation_layer(&mut tape, &g, items, &p, 0, &cfg).unwrap();
        for (e, weight) in g.edges_vv.iter().zip(&w) {
            if e.dst == 1 {
                assert!((weight - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn singleton_extraction_and_attaching() {
        let (g, cfg) = toy(&[3], &[0], 1);
        let params = ModelParams::init(&cfg, 7);
        let mut tape = Tape::new();
        let p = params.register(&mut tape, false);
        let (items, mut state) = init_nodes(&mut tape, &g, &p).unwrap();
        state.centers = vec![4.0];
        let (next, alpha) = interest_extraction_layer(&mut tape, &g, items, &state, &p, 0, &cfg).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(next.centers, vec![0.0]);
        assert_eq!(next.compactness, vec![4.0]);
        let (_, beta) = interest_attaching_layer(&mut tape, &g, items, &state, &p, 0, &cfg).unwrap();
        assert_eq!(beta, vec![1.0]);
    }

    #[test]
    fn compactness_guard() {
        assert_eq!(interest_distance_step(5.0, 0.0, 5, 300), 0);
        assert_eq!(interest_distance_step(5.0, 0.0, 6, 300), 300);
        assert_eq!(interest_distance_step(2.0, 2.0, 7, 300), 2);
    }

    #[test]
    fn saturated_gate_returns_initial_embedding() {
        let (g, mut cfg) = toy(&[1, 2, 3], &[0, 10, 20], 2);
        cfg.item_count = 6;
        let mut params = ModelParams::init(&cfg, 7);
        for x in params.item_embeddings.data_mut() {
            *x = x.abs() + 0.1;
        }
        let d = cfg.dim;
        let gate = params.readout.gate.data_mut();
        for (k, w) in gate.iter_mut().enumerate() {
            *w = if k < d { 1e4 } else { 0.0 };
        }
        let mut tape = Tape::new();
        let p = params.register(&mut tape, false);
        let out = combine_and_stack(&mut tape, &g, &p, &cfg).unwrap();
        assert!(tape.value(out.items).max_abs_diff(tape.value(out.initial_items)) < 1e-12);
    }

    #[test]
    fn depth_changes_output() {
        let (g, mut cfg) = toy(&[1, 2, 3, 4], &[0, 10, 500, 520], 2);
        let params2 = ModelParams::init(&cfg, 7);
        cfg.layers = 1;
        let mut params1 = params2.clone();
        params1.layers.truncate(1);
        let run = |params: &ModelParams, cfg: &ModelConfig| {
            let mut tape = Tape::new();
            let p = params.register(&mut tape, false);
            let out = combine_and_stack(&mut tape, &g, &p, cfg).unwrap();
            tape.value(out.items).clone()
        };
        let one = run(&params1, &cfg);
        cfg.layers = 2;
        let two = run(&params2, &cfg);
        assert!(one.max_abs_diff(&two) > 1e-8);
    }

    #[test]
    fn readout_singleton_and_symmetry() {
        let (g, cfg) = toy(&[2], &[0], 2);
        let params = ModelParams::init(&cfg, 7);
        let mut tape = Tape::new();
        let p = params.register(&mut tape, false);
        let items = tape.constant(Tensor::from_rows(&[vec![0.3, -0.2, 0.1, 0.5]]).unwrap());
        let u = tape.constant(Tensor::from_rows(&[vec![0.1; 4], vec![-0.2; 4]]).unwrap());
        let r = session_readout(&mut tape, &g, items, Some(u), &p, &cfg).unwrap();
        assert_eq!(r.gamma.len(), 2);

        // two nodes with equal state and equal last step pool to 2γv
        let (g2, cfg2) = toy(&[2, 3], &[0, 0], 1);
        let mut tape = Tape::new();
        let p = params.register(&mut tape, false);
        let v = vec![0.3, -0.2, 0.1, 0.5];
        let items = tape.constant(Tensor::from_rows(&[v.clone(), v.clone()]).unwrap());
        let u = tape.constant(Tensor::from_rows(&[vec![0.1; 4]]).unwrap());
        let r = session_readout(&mut tape, &g2, items, Some(u), &p, &cfg2).unwrap();
        assert!((r.gamma[0] - r.gamma[1]).abs() < 1e-15);
    }

    #[test]
    fn predict_sums_to_one_for_single_interest_and_dedups() {
        let (_, cfg) = toy(&[1], &[0], 1);
        let params = ModelParams::init(&cfg, 7);
        let mut tape = Tape::new();
        let p = params.register(&mut tape, false);
        let s1 = tape.constant(Tensor::from_rows(&[vec![0.4, -1.0, 0.2, 0.3]]).unwrap());
        let y1 = predict(&mut tape, s1, &p).unwrap();
        let total: f64 = tape.value(y1).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let s2 = tape.constant(Tensor::from_rows(&[vec![0.4, -1.0, 0.2, 0.3], vec![0.4, -1.0, 0.2, 0.3]]).unwrap());
        let y2 = predict(&mut tape, s2, &p).unwrap();
        assert_eq!(tape.value(y1), tape.value(y2));
    }

    #[test]
    fn corr_loss_values() {
        let mut tape = Tape::new();
        let orth = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let same = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap());
        let three = tape.constant(Tensor::from_rows(&[vec![0.5, 1.0], vec![0.5, 1.0], vec![0.5, 1.0]]).unwrap());
        let one = tape.constant(Tensor::from_rows(&[vec![0.5, 1.0]]).unwrap());
        let c = corr_loss(&mut tape, orth);
        assert_eq!(tape.value(c).item(), 0.0);
        let c = corr_loss(&mut tape, same);
        assert!((tape.value(c).item() - 1.0).abs() < 1e-12);
        let c = corr_loss(&mut tape, three);
        assert!((tape.value(c).item() - 3.0).abs() < 1e-12);
        let c = corr_loss(&mut tape, one);
        assert_eq!(tape.value(c).item(), 0.0);
    }

    #[test]
    fn total_loss_hand_example() {
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::vector(vec![0.2, 0.5, 0.3]));
        let corr = tape.constant(Tensor::scalar(0.25));
        let l = total_loss(&mut tape, y, 1, Some(corr), 0.0).unwrap();
        assert!((tape.value(l).item() - 1.2729).abs() < 1e-3);
        let l = total_loss(&mut tape, y, 1, Some(corr), 2.0).unwrap();
        assert!((tape.value(l).item() - 1.2729 - 0.5).abs() < 1e-3);

        let perfect = tape.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let l = total_loss(&mut tape, perfect, 1, Some(corr), 2.0).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-6);

        let nan = tape.constant(Tensor::vector(vec![f64::NAN, 1.0]));
        assert!(matches!(
            total_loss(&mut tape, nan, 1, None, 0.0),
            Err(ModelError::NonFinite(_))
        ));
    }

    #[test]
    fn model_end_to_end_shapes() {
        let mut cfg = ModelConfig::new(6);
        cfg.dim = 4;
        cfg.layers = 2;
        let model = Model::new(cfg, 7).unwrap();
        let s = Session {
            session_id: "x".into(),
            items: vec![1, 2, 1, 4],
            timestamps: vec![0, 5, 10, 3600],
        };
        let y = model.scores(&s).unwrap();
        assert_eq!(y.len(), 6);
        assert!(y.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        let (loss, grads) = model.loss_and_grads(&s, 3, 1.0).unwrap();
        assert!(loss.is_finite());
        assert!(grads.is_finite());
    }
}
