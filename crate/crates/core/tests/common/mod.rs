//! Naive per-edge reference implementation of the model, written with plain
//! nested loops over `Vec<f64>` and no shared code with the library's forward
//! pass beyond parameter storage and graph construction.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmignn::dataio::SessionRecord;
use tmignn::graph::MultiInterestGraph;
use tmignn::model::{ModelConfig, ModelParams};
use tmignn::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// `x · W` for a row vector and a `[in×out]` weight.
pub fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), n_in);
    let mut out = vec![0.0; n_out];
    for j in 0..n_out {
        for i in 0..n_in {
            out[j] += x[i] * w.get(i, j);
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn lrelu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn max_abs(a: &Mat, b: &Tensor) -> f64 {
    let mut m: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            m = m.max((v - b.get(r, c)).abs());
        }
    }
    m
}

pub fn max_abs_vec(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub struct OracleInterests {
    pub emb: Mat,
    pub centers: Vec<f64>,
    pub compactness: Vec<f64>,
}

pub fn init(g: &MultiInterestGraph, p: &ModelParams) -> (Mat, OracleInterests) {
    let items: Mat = g
        .item_nodes
        .iter()
        .map(|&i| p.item_embeddings.row(i).to_vec())
        .collect();
    let n = items.len() as f64;
    let d = items[0].len();
    let mut mean = vec![0.0; d];
    for v in &items {
        for c in 0..d {
            mean[c] += v[c] / n;
        }
    }
    let center = g.relative_steps.iter().map(|&s| s as f64).sum::<f64>() / n;
    let comp = g.relative_steps.iter().map(|&s| (s as f64 - center).abs()).sum::<f64>() / n;
    let h = g.interest_count;
    (
        items,
        OracleInterests {
            emb: vec![mean; h],
            centers: vec![center; h],
            compactness: vec![comp; h],
        },
    )
}

/// Item-item branch, one destination node at a time.
pub fn item_layer(
    g: &MultiInterestGraph,
    items: &Mat,
    p: &ModelParams,
    k: usize,
    cfg: &ModelConfig,
) -> (Mat, Vec<f64>) {
    let gru = &p.layers[k].0;
    let mlp = &p.interval_mlp;
    let mut out = items.clone();
    let mut weights = vec![0.0; g.edges_vv.len()];
    for node in 0..g.node_count() {
        let incoming: Vec<usize> = (0..g.edges_vv.len()).filter(|&e| g.edges_vv[e].dst == node).collect();
        if incoming.is_empty() {
            continue;
        }
        let logits: Vec<f64> = incoming
            .iter()
            .map(|&e| {
                if cfg.ablation.disable_vv_time {
                    return 0.0;
                }
                let t = p.temporal_table.row(g.edges_vv[e].interval);
                let hidden: Vec<f64> = add(&vecmat(t, &mlp.w1), mlp.b1.data())
                    .into_iter()
                    .map(|x| lrelu(x, cfg.leaky_slope))
                    .collect();
                vecmat(&hidden, &mlp.w2)[0] + mlp.b2.data()[0]
            })
            .collect();
        let w = softmax(&logits);
        let d = items[0].len();
        let mut msg = vec![0.0; d];
        for (&e, &a) in incoming.iter().zip(&w) {
            weights[e] = a;
            for c in 0..d {
                msg[c] += a * items[g.edges_vv[e].src][c];
            }
        }
        let h = &items[node];
        let gate = |wx: &Tensor, uh: &Tensor, b: &Tensor, state: &[f64]| -> Vec<f64> {
            add(&add(&vecmat(&msg, wx), &vecmat(state, uh)), b.data())
        };
        let z: Vec<f64> = gate(&gru.w_z, &gru.u_z, &gru.b_z, h).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = gate(&gru.w_r, &gru.u_r, &gru.b_r, h).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let cand: Vec<f64> = gate(&gru.w_n, &gru.u_n, &gru.b_n, &rh)
            .into_iter()
            .map(f64::tanh)
            .collect();
        out[node] = (0..d).map(|c| (1.0 - z[c]) * cand[c] + z[c] * h[c]).collect();
    }
    (out, weights)
}

/// Item-to-interest branch. Returns the pre-activation interest embeddings,
/// new centers and compactness, and α as `[interest][item]`.
pub fn extraction_layer(
    g: &MultiInterestGraph,
    items: &Mat,
    u: &OracleInterests,
    p: &ModelParams,
    k: usize,
    cfg: &ModelConfig,
) -> (OracleInterests, Mat) {
    let lp = &p.layers[k].1;
    let d = items[0].len();
    let mut emb = Vec::new();
    let mut alphas = Vec::new();
    let mut centers = Vec::new();
    let mut comps = Vec::new();
    for h in 0..g.interest_count {
        let su = vecmat(&u.emb[h], &lp.assign_interest)[0];
        let logits: Vec<f64> = items
            .iter()
            .map(|v| lrelu(su + vecmat(v, &lp.assign_item)[0], cfg.leaky_slope))
            .collect();
        let a = softmax(&logits);
        let mut e = vec![0.0; d];
        let (mut cent, mut comp) = (0.0, 0.0);
        for (i, v) in items.iter().enumerate() {
            let tv = vecmat(v, &lp.extract_trans);
            for c in 0..d {
                e[c] += a[i] * tv[c];
            }
            let step = g.relative_steps[i] as f64;
            cent += a[i] * step;
            comp += a[i] * (step - u.centers[h]).abs();
        }
        emb.push(e);
        alphas.push(a);
        centers.push(cent);
        comps.push(comp);
    }
    (
        OracleInterests {
            emb,
            centers,
            compactness: comps,
        },
        alphas,
    )
}

/// Interest-to-item branch. Returns pre-activation item states and β as
/// `[item][interest]`.
pub fn attaching_layer(
    g: &MultiInterestGraph,
    items: &Mat,
    u: &OracleInterests,
    p: &ModelParams,
    k: usize,
    cfg: &ModelConfig,
) -> (Mat, Mat) {
    let lp = &p.layers[k].1;
    let d = items[0].len();
    let mut out = Vec::new();
    let mut betas = Vec::new();
    for (i, v) in items.iter().enumerate() {
        let pv = vecmat(v, &lp.attach_item);
        let logits: Vec<f64> = (0..g.interest_count)
            .map(|h| {
                let mut s = dot(&pv, &vecmat(&u.emb[h], &lp.attach_interest));
                if !cfg.ablation.disable_uv_time {
                    let dist = (u.centers[h] - g.relative_steps[i] as f64).abs() / u.compactness[h].max(1e-3);
                    let idx = (dist.floor() as usize).min(cfg.max_step);
                    s += dot(p.temporal_table.row(idx), lp.attach_time_w.data()) + lp.attach_time_b.data()[0];
                }
                lrelu(s, cfg.leaky_slope)
            })
            .collect();
        let b = softmax(&logits);
        let mut o = vec![0.0; d];
        for h in 0..g.interest_count {
            let tu = vecmat(&u.emb[h], &lp.attach_trans);
            for c in 0..d {
                o[c] += b[h] * tu[c];
            }
        }
        out.push(o);
        betas.push(b);
    }
    (out, betas)
}

pub struct OracleStack {
    pub initial: Mat,
    pub items: Mat,
    pub interests: Option<Mat>,
}

pub fn stack(g: &MultiInterestGraph, p: &ModelParams, cfg: &ModelConfig) -> OracleStack {
    let slope = cfg.leaky_slope;
    let (initial, mut u) = init(g, p);
    let mut items = initial.clone();
    for k in 0..cfg.layers {
        let (vv, _) = item_layer(g, &items, p, k, cfg);
        if cfg.ablation.single_interest {
            items = vv
                .iter()
                .map(|r| r.iter().map(|&x| lrelu(x, slope)).collect())
                .collect();
            continue;
        }
        let (next, _) = extraction_layer(g, &items, &u, p, k, cfg);
        let (uv, _) = attaching_layer(g, &items, &u, p, k, cfg);
        items = vv
            .iter()
            .zip(&uv)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| lrelu(x + y, slope) / 2.0).collect())
            .collect();
        u = OracleInterests {
            emb: next
                .emb
                .iter()
                .map(|r| r.iter().map(|&x| lrelu(x, slope)).collect())
                .collect(),
            ..next
        };
    }
    let gated = initial
        .iter()
        .zip(&items)
        .map(|(v0, vk)| {
            let joined: Vec<f64> = v0.iter().chain(vk).copied().collect();
            let gate = sigmoid(vecmat(&joined, &p.readout.gate)[0]);
            v0.iter().zip(vk).map(|(a, b)| gate * a + (1.0 - gate) * b).collect()
        })
        .collect();
    OracleStack {
        initial,
        items: gated,
        interests: (!cfg.ablation.single_interest).then_some(u.emb),
    }
}

/// Session vectors `[H][d]` and γ as `[interest][item]`.
pub fn readout(
    g: &MultiInterestGraph,
    items: &Mat,
    interests: Option<&Mat>,
    p: &ModelParams,
    cfg: &ModelConfig,
) -> (Mat, Mat) {
    let r = &p.readout;
    let d = items[0].len();
    let queries = match interests {
        Some(u) => u.clone(),
        None => rows(&r.query),
    };
    let mut sessions = Vec::new();
    let mut gammas = Vec::new();
    for u in &queries {
        let mut pooled = vec![0.0; d];
        let mut gs = Vec::new();
        for (i, v) in items.iter().enumerate() {
            let time: Vec<f64> = if cfg.ablation.disable_last_time {
                vec![0.0; d]
            } else if cfg.ablation.use_first_time {
                p.temporal_table.row(g.relative_steps[i]).to_vec()
            } else {
                p.temporal_table.row(g.last_steps[i]).to_vec()
            };
            let key: Vec<f64> = v.iter().chain(&time).copied().collect();
            let z: Vec<f64> = add(&vecmat(&key, &r.w0), r.b0.data())
                .into_iter()
                .map(f64::tanh)
                .collect();
            let inner: Vec<f64> = add(&add(&vecmat(&z, &r.w1), &vecmat(u, &r.w2)), r.b.data())
                .into_iter()
                .map(sigmoid)
                .collect();
            let gamma = vecmat(&inner, &r.q)[0];
            for c in 0..d {
                pooled[c] += gamma * v[c];
            }
            gs.push(gamma);
        }
        let joined: Vec<f64> = pooled.iter().chain(u).copied().collect();
        sessions.push(vecmat(&joined, &r.w3));
        gammas.push(gs);
    }
    (sessions, gammas)
}

pub fn predict(sessions: &Mat, p: &ModelParams) -> Vec<f64> {
    let e = &p.item_embeddings;
    let normalized: Mat = (0..e.rows())
        .map(|i| {
            let row = e.row(i);
            let norm = dot(row, row).sqrt().max(1e-12);
            row.iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut best = vec![f64::NEG_INFINITY; e.rows()];
    for s in sessions {
        let probs = softmax(&normalized.iter().map(|v| dot(s, v)).collect::<Vec<_>>());
        for (b, q) in best.iter_mut().zip(probs) {
            *b = b.max(q);
        }
    }
    best
}

pub fn scores(g: &MultiInterestGraph, p: &ModelParams, cfg: &ModelConfig) -> Vec<f64> {
    let st = stack(g, p, cfg);
    let (s, _) = readout(g, &st.items, st.interests.as_ref(), p, cfg);
    predict(&s, p)
}

/// Random session over `vocab` items with repeats and mixed gaps.
pub fn random_session(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> SessionRecord {
    let len = rng.random_range(1..=max_len);
    let mut t = rng.random_range(0..1000i64);
    let mut items = Vec::with_capacity(len);
    let mut timestamps = Vec::with_capacity(len);
    for _ in 0..len {
        items.push(rng.random_range(0..vocab));
        timestamps.push(t);
        t += if rng.random_bool(0.3) {
            rng.random_range(600..7200)
        } else {
            rng.random_range(0..120)
        };
    }
    SessionRecord {
        session_id: "r".into(),
        items,
        timestamps,
    }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn toy_config(item_count: usize, dim: usize, interests: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        dim,
        interests,
        layers,
        // keep the time table small so oracle runs stay cheap
        max_step: 40,
        ..ModelConfig::new(item_count)
    }
}
