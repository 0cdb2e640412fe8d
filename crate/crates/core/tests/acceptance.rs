//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.
//!
//! `cargo test --release --test acceptance` runs all of them; extra
//! arguments select criteria by number, e.g. `-- 4 7`.

mod common;

use std::sync::Arc;
use std::time::Instant;

use gatroute::agents::{qrouting_update, NeuralAgent, QTable};
use gatroute::harness::{
    compare, csv_string, load_sweep, load_topology, summarize, Algorithm, ExperimentConfig, LevelResult,
    LoadLevel, PretrainData, PretrainSettings,
};
use gatroute::paradigms::{Centralized, Cooperated, Paradigm, TrainingConfig};
use gatroute::qnet::{GatQNet, Hyperparams, MlpQNet, QModel};
use gatroute::{encode, NodeId, Simulator, Topology, TrafficConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn level(lambda: f64, settle: u64, measure: u64) -> LoadLevel {
    LoadLevel {
        lambda,
        settle_steps: settle,
        measure_steps: measure,
    }
}

/// Desk-scale settings used by every empirical criterion.
fn desk(topology: &str, algorithm: Algorithm, loads: Vec<LoadLevel>, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(topology, algorithm, loads);
    c.hyperparams = Hyperparams {
        gat_features: 8,
        hidden_units: 64,
        step_size: 3e-3,
        ..Hyperparams::default()
    };
    c.train_period = 1;
    c.repetitions = 1;
    c.seed = seed;
    if algorithm.is_neural() {
        c.pretrain_steps = 16_000;
    }
    c.pretrain = PretrainSettings {
        teacher_max_steps: 30_000,
        teacher_stable_steps: 10_000,
        log_transitions: 50_000,
        step_size: Some(0.01),
        eval_load: 1.0,
        eval_warmup_steps: 500,
        eval_steps: 2_000,
        ..PretrainSettings::default()
    };
    c
}

/// Online step size per paradigm: the value from {1e-2, 3e-3, 1e-3, 3e-4,
/// 1e-4} that most often sustained the whole irregular-grid schedule on
/// held-out seeds 20 to 25, ties going to the lower delay. Federated
/// gradients are computed on stale local copies while the other routers keep
/// updating the global model, so it needs the smallest step.
fn with_paradigm(mut c: ExperimentConfig, p: Paradigm) -> ExperimentConfig {
    c.paradigm = p;
    c.hyperparams.step_size = match p {
        Paradigm::Centralized => 3e-3,
        Paradigm::Cooperated => 1e-3,
        Paradigm::Federated => 1e-4,
    };
    c
}

fn c1_gradient() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for n in [3, 4, 6] {
        for h in [2, 4] {
            for k in 0..4u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 * n as u64 + 10 * h as u64 + k);
                let t = random_connected(n, rng.gen_range(0..n), &mut rng);
                let net = GatQNet::new(&t, h, 6, 0.2);
                let p = net.init_params(&mut rng);
                let batch = random_batch(&t, 4, &mut rng);
                worst = worst.max(gradient_check(&net, &p, &batch, 1e-5));
                count += 1;
            }
        }
    }
    outcome(
        worst < 1e-4,
        format!("{count} instances, max relative error {worst:.2e} (threshold 1e-4, floor {REL_FLOOR:.0e})"),
    )
}

fn c2_attention() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut outside = 0usize;
    for _ in 0..1000 {
        let n = rng.gen_range(2..13);
        let t = random_connected(n, rng.gen_range(0..2 * n), &mut rng);
        let h = rng.gen_range(1..6);
        let net = GatQNet::new(&t, h, 4, rng.gen_range(0.01..0.5));
        let mut p = net.init_params(&mut rng);
        let scale = rng.gen_range(0.1..10.0);
        p.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        let x = encode(&random_observation(&t, &mut rng), n).unwrap();
        let a = net.forward(&p, &x).attention_matrix(&net);
        for i in 0..n {
            worst = worst.max((a[i].iter().sum::<f64>() - 1.0).abs());
            for j in 0..n {
                if i != j && !t.is_link(NodeId(i), NodeId(j)) && a[i][j] != 0.0 {
                    outside += 1;
                }
            }
        }
    }
    outcome(
        worst <= 1e-9 && outside == 0,
        format!("1000 draws, max |Σα − 1| = {worst:.1e}, nonzero outside neighborhood: {outside}"),
    )
}

fn c3_consensus() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut graphs = vec![
        Topology::grid(2, 2, &[]).unwrap(),
        Topology::grid(3, 3, &[]).unwrap(),
        Topology::grid(6, 6, &[]).unwrap(),
        Topology::irregular_6x6(),
    ];
    for _ in 0..50 {
        let n = rng.gen_range(2..20);
        graphs.push(random_connected(n, rng.gen_range(0..n), &mut rng));
    }
    let mut row_err: f64 = 0.0;
    for t in &graphs {
        let w = t.consensus_matrix();
        for i in 0..t.node_count() {
            row_err = row_err.max((w.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }

    // Static parameters on the 3×3 grid: agents never learn, so each round
    // shares w̃_i = w_i and averages.
    let t = Topology::grid(3, 3, &[]).unwrap();
    let model = Arc::new(GatQNet::new(&t, 2, 3, 0.2));
    let initial: Vec<_> = (0..9).map(|_| model.init_params(&mut rng)).collect();
    let hp = Hyperparams {
        gat_features: 2,
        hidden_units: 3,
        ..Hyperparams::default()
    };
    let mut coop = Cooperated::with_initial(model.clone(), &t, initial.clone(), TrainingConfig::new(hp, 3));
    let zero = model.zero_params();
    let dense = dense_consensus(&t);
    let mut oracle: Vec<Vec<f64>> = initial.iter().map(|p| p.as_slice().to_vec()).collect();
    let diameter = |ps: &[Vec<f64>]| {
        let mut d: f64 = 0.0;
        for a in ps {
            for b in ps {
                d = d.max(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt());
            }
        }
        d
    };
    let mut distances = vec![diameter(&oracle)];
    let mut oracle_err: f64 = 0.0;
    for _ in 0..100 {
        for i in t.nodes() {
            coop.local_step(i, &zero);
        }
        coop.consensus();
        // Matrix-power oracle, one coordinate at a time.
        let len = oracle[0].len();
        let mut next = vec![vec![0.0; len]; 9];
        for c in 0..len {
            let col: Vec<f64> = oracle.iter().map(|p| p[c]).collect();
            for (i, v) in dense_apply(&dense, &col).into_iter().enumerate() {
                next[i][c] = v;
            }
        }
        oracle = next;
        let current: Vec<Vec<f64>> = t.nodes().map(|i| coop.params(i).as_slice().to_vec()).collect();
        for (a, b) in current.iter().zip(&oracle) {
            for (x, y) in a.iter().zip(b) {
                oracle_err = oracle_err.max((x - y).abs());
            }
        }
        distances.push(diameter(&current));
    }
    let monotone = distances.windows(2).all(|w| w[1] < w[0]);
    outcome(
        row_err <= 1e-12 && monotone && oracle_err < 1e-9,
        format!(
            "{} graphs, max |row sum − 1| = {row_err:.1e}; 3×3 diameter {:.3e} → {:.3e} over 100 rounds, strictly decreasing: {monotone}; max deviation from W^t oracle {oracle_err:.1e}",
            graphs.len(),
            distances[0],
            distances[100]
        ),
    )
}

fn hop_optimal_pairs<M: QModel>(t: &Topology, agent: &mut NeuralAgent<M>) -> usize {
    let n = t.node_count();
    let mut ok = 0;
    for d in 0..n {
        let hops = bfs_hops(t, d);
        for s in (0..n).filter(|&s| s != d) {
            let taken = rollout(t, s, d, 4 * n, |o| agent.act(o).unwrap());
            if taken == hops[s].map(|h| h as usize) {
                ok += 1;
            }
        }
    }
    ok
}

fn c4_small_graph() -> Outcome {
    let t = Topology::grid(2, 2, &[]).unwrap();
    let hp = Hyperparams {
        gat_features: 4,
        hidden_units: 16,
        step_size: 0.01,
        ..Hyperparams::default()
    };
    let model = Arc::new(GatQNet::from_hyperparams(&t, &hp));
    let init = model.init_params(&mut ChaCha8Rng::seed_from_u64(4));
    let mut cfg = TrainingConfig::new(hp, 4);
    cfg.train_period = 1;
    let mut learner = Centralized::new(model, init, cfg);
    let mut sim = Simulator::new(t.clone(), TrafficConfig { load: 0.5, seed: 4 }).unwrap();
    let pairs = 12;
    let mut steps = 0u64;
    let mut best = 0;
    while steps < 50_000 {
        for _ in 0..1_000 {
            let fbs = sim.step(&mut learner).unwrap();
            gatroute::agents::Learner::learn(&mut learner, &fbs);
        }
        steps += 1_000;
        let mut agent = learner.agent().clone();
        best = hop_optimal_pairs(&t, &mut agent);
        if best == pairs {
            break;
        }
    }
    outcome(
        best == pairs,
        format!("{best}/{pairs} (src,dst) pairs hop-optimal after {steps} steps at λ=0.5 (limit 50000)"),
    )
}

fn c5_qrouting_fixed_point() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut graphs = vec![
        Topology::grid(2, 2, &[]).unwrap(),
        Topology::grid(3, 3, &[]).unwrap(),
        Topology::grid(1, 10, &[]).unwrap(),
        Topology::grid(2, 5, &[]).unwrap(),
    ];
    for _ in 0..8 {
        let n = rng.gen_range(3..11);
        graphs.push(random_connected(n, rng.gen_range(0..n), &mut rng));
    }
    let mut worst: f64 = 0.0;
    for t in &graphs {
        let n = t.node_count();
        let mut table = QTable::new(t, 0.0);
        for _ in 0..200 {
            for x in 0..n {
                for d in (0..n).filter(|&d| d != x) {
                    for y in t.neighbor_vec(NodeId(x)) {
                        let next = (y.0 != d).then(|| table.best_value(y, NodeId(d)).unwrap());
                        qrouting_update(&mut table, NodeId(x), NodeId(d), y, 0.0, 1.0, next, 0.7, 1.0);
                    }
                }
            }
        }
        for d in 0..n {
            // Value iteration: V(d) = 0, V(x) = max_y(−1 + V(y)).
            let mut v = vec![-1e9; n];
            v[d] = 0.0;
            for _ in 0..n {
                for x in (0..n).filter(|&x| x != d) {
                    v[x] = t.neighbors(NodeId(x)).map(|y| v[y.0] - 1.0).fold(f64::MIN, f64::max);
                }
            }
            for x in (0..n).filter(|&x| x != d) {
                worst = worst.max((table.best_value(NodeId(x), NodeId(d)).unwrap() - v[x]).abs());
            }
        }
    }
    outcome(
        worst < 1e-3,
        format!("{} graphs (N ≤ 10), max |max_y Q − V| = {worst:.1e}", graphs.len()),
    )
}

fn sweep_levels(cfg: &ExperimentConfig) -> Vec<LevelResult> {
    load_sweep(cfg).expect("sweep runs").runs.remove(0).levels
}

fn c6_low_load() -> Outcome {
    let loads = vec![level(0.5, 20_000, 10_000)];
    let sp = sweep_levels(&desk("grid:6x6", Algorithm::Shortest, loads.clone(), 6));
    let dg = sweep_levels(&desk("grid:6x6", Algorithm::Dgatr, loads, 6));
    let (s, d) = (sp[0].average_delay.unwrap(), dg[0].average_delay.unwrap_or(f64::INFINITY));
    let gap = (d - s).abs() / s;
    outcome(
        gap <= 0.05,
        format!("6×6 grid λ=0.5: shortest {s:.3}, dgatr {d:.3}, relative gap {:.2}% (limit 5%)", 100.0 * gap),
    )
}

fn c7_high_load() -> Outcome {
    let loads: Vec<LoadLevel> = [1.0, 2.0, 2.5, 2.8, 3.0]
        .into_iter()
        .map(|l| level(l, 3_000, 3_000))
        .collect();
    let sp = sweep_levels(&desk("irregular6x6", Algorithm::Shortest, loads.clone(), 7));
    let dg = sweep_levels(&desk("irregular6x6", Algorithm::Dgatr, loads, 7));
    let mut found = None;
    let mut lines = Vec::new();
    for (s, d) in sp.iter().zip(&dg) {
        let sd = s.average_delay.unwrap_or(f64::INFINITY);
        let dd = d.average_delay.unwrap_or(f64::INFINITY);
        lines.push(format!(
            "λ={}: sp {sd:.1} dgatr {dd:.1} (in-flight growth {:+.1})",
            s.load,
            d.in_flight_growth()
        ));
        if sd > 2.0 * dd && d.in_flight_bounded() && found.is_none() {
            found = Some(s.load);
        }
    }
    outcome(
        found.is_some(),
        format!(
            "irregular 6×6, λ* = {}; {}",
            found.map_or("none".to_string(), |l| l.to_string()),
            lines.join("; ")
        ),
    )
}

fn first_within(curve: &[(u64, f64)], limit: f64) -> Option<u64> {
    curve.iter().find(|(_, d)| *d <= limit).map(|(b, _)| *b)
}

fn c8_pretrain_trend() -> Outcome {
    let budgets = [0u64, 2_000, 4_000, 8_000, 16_000, 24_000];
    let seeds = [81u64, 82, 83];
    let mut dg_mean = vec![0.0; budgets.len()];
    let mut dq_mean = vec![0.0; budgets.len()];
    let mut teacher_mean = 0.0;
    for &seed in &seeds {
        let cfg = desk("grid:6x6", Algorithm::Dgatr, vec![level(1.0, 0, 1)], seed);
        let topology = load_topology(&cfg.topology).unwrap();
        let data = PretrainData::collect(&cfg, &topology, seed).unwrap();
        teacher_mean += data.teacher_report.censored_delay / seeds.len() as f64;
        let gat = Arc::new(GatQNet::from_hyperparams(&topology, &cfg.hyperparams));
        let mlp = Arc::new(MlpQNet::from_hyperparams(&topology, &cfg.hyperparams));
        let dg = gatroute::harness::pretrain_curve(gat, &data, &cfg, &topology, &budgets, seed).unwrap();
        let dq = gatroute::harness::pretrain_curve(mlp, &data, &cfg, &topology, &budgets, seed).unwrap();
        for k in 0..budgets.len() {
            dg_mean[k] += dg[k].1.censored_delay / seeds.len() as f64;
            dq_mean[k] += dq[k].1.censored_delay / seeds.len() as f64;
        }
    }
    let xs: Vec<f64> = budgets.iter().map(|&b| b as f64).collect();
    let rho = spearman(&xs, &dg_mean);
    let limit = 1.1 * teacher_mean;
    let curve = |m: &[f64]| budgets.iter().copied().zip(m.iter().copied()).collect::<Vec<_>>();
    let dg_reach = first_within(&curve(&dg_mean), limit);
    let dq_reach = first_within(&curve(&dq_mean), limit);
    let faster = match (dg_reach, dq_reach) {
        (Some(a), Some(b)) => a < b,
        (Some(_), None) => true,
        _ => false,
    };
    let fmt = |m: &[f64]| m.iter().map(|d| format!("{d:.1}")).collect::<Vec<_>>().join(" ");
    outcome(
        rho <= -0.8 && faster,
        format!(
            "budgets {budgets:?}; dgatr [{}] spearman {rho:.2}; dqn [{}]; teacher {teacher_mean:.2}, 10% band reached by dgatr at {dg_reach:?}, dqn at {dq_reach:?}",
            fmt(&dg_mean),
            fmt(&dq_mean)
        ),
    )
}

fn c9_paradigms() -> Outcome {
    let loads: Vec<LoadLevel> = [1.0, 2.0, 2.5, 2.8, 3.0]
        .into_iter()
        .map(|l| level(l, 3_000, 3_000))
        .collect();
    let cfgs: Vec<ExperimentConfig> = Paradigm::ALL
        .into_iter()
        .map(|p| {
            let mut c = with_paradigm(desk("irregular6x6", Algorithm::Dgatr, loads.clone(), 9), p);
            c.repetitions = 2;
            c
        })
        .collect();
    let cmp = compare(&cfgs).expect("compare runs");
    let summary = summarize(&cmp.rows());
    let shape_ok = Paradigm::ALL.iter().all(|p| {
        let rows: Vec<_> = summary.iter().filter(|s| s.paradigm == p.as_str()).collect();
        rows.len() >= 3 && rows.iter().all(|r| r.mean_delay.is_some() && r.variance.is_finite() && r.runs == 2)
    });
    // Highest schedule index up to which every level is sustained in
    // every replica.
    let max_index: Vec<usize> = cmp
        .reports
        .iter()
        .map(|r| {
            (0..loads.len())
                .take_while(|&k| r.runs.iter().all(|run| run.levels[k].in_flight_bounded()))
                .count()
        })
        .collect();
    let spread = max_index.iter().max().unwrap() - max_index.iter().min().unwrap();
    let table = summary
        .iter()
        .map(|s| format!("{}@{}: {:.2}±{:.3}", s.paradigm, s.load, s.mean_delay.unwrap_or(f64::NAN), s.variance))
        .collect::<Vec<_>>()
        .join(", ");
    let sustained: Vec<String> = max_index
        .iter()
        .map(|&k| if k == 0 { "none".to_string() } else { loads[k - 1].lambda.to_string() })
        .collect();
    outcome(
        shape_ok && spread <= 1,
        format!("max sustained load (centralized, federated, cooperated) = {sustained:?}; {table}"),
    )
}

fn c10_determinism() -> Outcome {
    let mut texts = Vec::new();
    for p in Paradigm::ALL {
        let mut c = with_paradigm(
            desk("grid:3x3", Algorithm::Dgatr, vec![level(1.0, 300, 300), level(2.0, 300, 300)], 10),
            p,
        );
        c.repetitions = 2;
        c.pretrain_steps = 200;
        c.pretrain.teacher_max_steps = 2_000;
        c.pretrain.log_transitions = 2_000;
        let a = csv_string(&load_sweep(&c).unwrap().rows()).unwrap();
        let b = csv_string(&load_sweep(&c).unwrap().rows()).unwrap();
        texts.push(a == b);
    }
    outcome(
        texts.iter().all(|&same| same),
        format!("byte-identical CSV per paradigm: {texts:?}"),
    )
}

fn c11_reference_bound() -> Outcome {
    let loads = vec![level(0.5, 10_000, 5_000), level(1.0, 5_000, 5_000)];
    let global = sweep_levels(&desk("grid:6x6", Algorithm::Global, loads.clone(), 11));
    let mut ok = true;
    let mut lines = Vec::new();
    for alg in [Algorithm::Qrouting, Algorithm::Dqn, Algorithm::Dgatr] {
        let levels = sweep_levels(&desk("grid:6x6", alg, loads.clone(), 11));
        for (g, l) in global.iter().zip(&levels) {
            let gd = g.average_delay.unwrap();
            let ld = l.average_delay.unwrap_or(f64::INFINITY);
            ok &= gd <= 1.05 * ld;
            lines.push(format!("{}@{}: global {gd:.3} vs {ld:.3}", alg.as_str(), g.load));
        }
    }
    outcome(ok, lines.join("; "))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 11] = [
        (1, "gradient correctness", c1_gradient),
        (2, "attention normalization", c2_attention),
        (3, "consensus matrix", c3_consensus),
        (4, "small-graph optimality", c4_small_graph),
        (5, "Q-routing fixed point", c5_qrouting_fixed_point),
        (6, "low-load equivalence", c6_low_load),
        (7, "high-load superiority", c7_high_load),
        (8, "pre-train trend", c8_pretrain_trend),
        (9, "paradigm comparison shape", c9_paradigms),
        (10, "determinism", c10_determinism),
        (11, "reference-bound ordering", c11_reference_bound),
    ];
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        println!(
            "criterion {id:>2} {name}: {} ({:.1}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
