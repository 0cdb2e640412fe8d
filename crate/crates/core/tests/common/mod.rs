//! Helpers and independent oracles shared by the integration tests.
#![allow(dead_code)]

use gatroute::qnet::{loss, backward, QModel, TrainItem};
use gatroute::{encode, NodeId, Observation, ParamSet, Topology};
use rand::seq::SliceRandom;
use rand::Rng;

/// Random connected graph: a random spanning tree plus `extra` random links.
pub fn random_connected<R: Rng>(n: usize, extra: usize, rng: &mut R) -> Topology {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut links = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for k in 1..n {
        let u = order[k];
        let v = order[rng.gen_range(0..k)];
        seen.insert((u.min(v), u.max(v)));
        links.push((u, v, 1.0));
    }
    for _ in 0..extra {
        let u = rng.gen_range(0..n);
        let v = rng.gen_range(0..n);
        if u != v && seen.insert((u.min(v), u.max(v))) {
            links.push((u, v, 1.0));
        }
    }
    Topology::from_undirected(n, &links).expect("valid random graph")
}

/// Random observation of a non-destination router.
pub fn random_observation<R: Rng>(t: &Topology, rng: &mut R) -> Observation {
    let n = t.node_count();
    let cur = rng.gen_range(0..n);
    let dst = loop {
        let d = rng.gen_range(0..n);
        if d != cur {
            break d;
        }
    };
    Observation::at(t, NodeId(cur), NodeId(dst))
}

pub fn random_batch<R: Rng>(t: &Topology, size: usize, rng: &mut R) -> Vec<TrainItem> {
    (0..size)
        .map(|_| {
            let obs = random_observation(t, rng);
            let action = *obs.neighbors.choose(rng).expect("connected graph");
            TrainItem {
                features: encode(&obs, t.node_count()).unwrap(),
                action,
                target: rng.gen_range(-10.0..0.0),
            }
        })
        .collect()
}

/// Floor on the denominator of the relative error, so that parameters
/// whose true derivative is zero (or nearly) are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`
/// over every parameter, with central differences of step `eps`.
pub fn gradient_check<M: QModel>(model: &M, p: &ParamSet, batch: &[TrainItem], eps: f64) -> f64 {
    let (_, grad) = backward(model, p, batch);
    let mut worst: f64 = 0.0;
    let mut probe = p.clone();
    for k in 0..p.len() {
        let orig = p.as_slice()[k];
        probe.as_mut_slice()[k] = orig + eps;
        let up = loss(model, &probe, batch);
        probe.as_mut_slice()[k] = orig - eps;
        let down = loss(model, &probe, batch);
        probe.as_mut_slice()[k] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grad.as_slice()[k];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(rel);
    }
    worst
}

/// Dense matrix power iteration: `x ← W x` for a dense row-major `W`.
pub fn dense_apply(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Closed-neighborhood averaging matrix built directly from adjacency.
pub fn dense_consensus(t: &Topology) -> Vec<Vec<f64>> {
    let n = t.node_count();
    let mut w = vec![vec![0.0; n]; n];
    for i in 0..n {
        let hood: Vec<usize> = std::iter::once(i)
            .chain(t.neighbors(NodeId(i)).map(|j| j.0))
            .collect();
        for &j in &hood {
            w[i][j] = 1.0 / hood.len() as f64;
        }
    }
    w
}

/// BFS hop distances to `dst` computed from scratch.
pub fn bfs_hops(t: &Topology, dst: usize) -> Vec<Option<u32>> {
    let n = t.node_count();
    let mut dist = vec![None; n];
    dist[dst] = Some(0);
    let mut queue = std::collections::VecDeque::from([dst]);
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if dist[v].is_none() && t.is_link(NodeId(v), NodeId(u)) {
                dist[v] = Some(dist[u].unwrap() + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Follows `policy` from `src` until `dst` or `limit` hops; returns the hop
/// count on arrival.
pub fn rollout(
    t: &Topology,
    src: usize,
    dst: usize,
    limit: usize,
    mut policy: impl FnMut(&Observation) -> NodeId,
) -> Option<usize> {
    let mut cur = src;
    for k in 0..limit {
        if cur == dst {
            return Some(k);
        }
        cur = policy(&Observation::at(t, NodeId(cur), NodeId(dst))).0;
    }
    (cur == dst).then_some(limit)
}

/// Spearman rank correlation, ties receiving average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
