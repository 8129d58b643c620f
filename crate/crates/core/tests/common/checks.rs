//! Randomized property sweeps returning violation counts or worst errors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rehub_core::attention::{bipartite_attention, hub_self_attention, AttentionHead, AttentionParams, Connections};
use rehub_core::hubs::{
    balanced_random_assignment, coprime_strides, hub_distances, initial_assignment, num_hubs, random_assignment,
    reassign, AssignmentMatrix, AttnScores,
};
use rehub_core::metrics::{bhattacharyya, hub_utilization, spoke_load_distribution};
use rehub_core::partition::Clustering;
use rehub_core::tensor::{Tape, Tensor};

use super::{algorithm1, dense_masked_attention, DenseAttention};

fn well_formed(a: &AssignmentMatrix, k_eff: usize) -> bool {
    a.k() == k_eff
        && (0..a.n_spokes()).all(|i| {
            let row = a.hubs_of(i);
            row.len() == k_eff
                && row.iter().all(|&h| h < a.n_hubs())
                && row.iter().enumerate().all(|(j, h)| !row[..j].contains(h))
        })
}

/// Features drawn from a small grid so that distance ties actually occur.
fn grid_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::from_fn(n, d, |_, _| rng.gen_range(0..4) as f64 * 0.5)
}

/// Per-spoke positive scores summing to one, occasionally with ties.
fn random_scores(rng: &mut ChaCha8Rng, a: &AssignmentMatrix) -> AttnScores {
    let k = a.k();
    let mut s = Vec::with_capacity(a.num_connections());
    for _ in 0..a.n_spokes() {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(1..5) as f64).collect();
        let z: f64 = raw.iter().sum();
        s.extend(raw.iter().map(|r| r / z));
    }
    AttnScores::new(s, 1, a).unwrap()
}

/// Assignments from every constructor over `configs` random settings;
/// returns the number of malformed ones.
pub fn assignment_invariant_violations(configs: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for c in 0..configs {
        let ns = rng.gen_range(1..=60);
        let nh = rng.gen_range(1..=ns.min(12));
        let k = rng.gen_range(1..=6);
        let ke = k.min(nh);
        let clusters = Clustering::new((0..ns).map(|i| if i < nh { i } else { rng.gen_range(0..nh) }).collect(), nh).unwrap();
        let feats = grid_features(&mut rng, nh, 3);
        let init = initial_assignment(&clusters, &feats, k).unwrap();
        let bal = balanced_random_assignment(ns, nh, k, c as u64);
        let rnd = random_assignment(ns, nh, k, c as u64);
        let delta = hub_distances(&grid_features(&mut rng, nh, 2));
        let gamma = random_scores(&mut rng, &init);
        let re = reassign(&gamma, &init, &delta, k).unwrap();
        let first_is_cluster = (0..ns).all(|i| init.hubs_of(i)[0] == clusters.cluster_of()[i]);
        for a in [&init, &bal, &rnd, &re] {
            bad += (!well_formed(a, ke)) as usize;
        }
        bad += (!first_is_cluster) as usize;
    }
    bad
}

/// Instances where `reassign` disagrees with the literal two-loop oracle.
pub fn algorithm1_mismatches(instances: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for i in 0..instances {
        let ns = rng.gen_range(1..=50);
        let nh = rng.gen_range(1..=10);
        let k = rng.gen_range(1..=4);
        let a = random_assignment(ns, nh, k, i as u64);
        let gamma = random_scores(&mut rng, &a);
        let hubs = grid_features(&mut rng, nh, 2);
        let delta = hub_distances(&hubs);

        let mut dense_gamma = vec![vec![0.0; nh]; ns];
        for ((s, h), &g) in a.connections().zip(gamma.scores()) {
            dense_gamma[s][h] = g;
        }
        let dense_delta: Vec<Vec<f64>> = (0..nh).map(|h| delta.row(h).to_vec()).collect();
        let expect = algorithm1(&dense_gamma, &dense_delta, k);

        let got = reassign(&gamma, &a, &delta, k).unwrap();
        let got_dense: Vec<Vec<bool>> = (0..ns)
            .map(|s| {
                let mut row = vec![false; nh];
                got.hubs_of(s).iter().for_each(|&h| row[h] = true);
                row
            })
            .collect();
        mismatches += (got_dense != expect) as usize;
    }
    mismatches
}

fn bind(tape: &mut Tape, p: &DenseAttention) -> AttentionParams {
    AttentionParams {
        heads: p
            .heads
            .iter()
            .map(|h| AttentionHead {
                w_src: tape.param(h.w_src.clone()),
                w_dst: tape.param(h.w_dst.clone()),
                att: tape.param(h.att.clone()),
            })
            .collect(),
        w_out: tape.param(p.w_out.clone()),
    }
}

/// Largest absolute difference between the sparse attention ops and the
/// dense masked oracle (outputs and head-averaged weights) over
/// `instances` random problems with at most 20 nodes per side.
pub fn attention_oracle_max_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let heads = rng.gen_range(1..=3);
        let d = heads * rng.gen_range(1..=3);
        let ns = rng.gen_range(1..=20);
        let nh = rng.gen_range(1..=ns.min(8));
        let k = rng.gen_range(1..=3);
        let a = random_assignment(ns, nh, k, i as u64);
        let p = DenseAttention::random(d, heads, &mut rng);
        let spokes = Tensor::uniform(ns, d, -1.0, 1.0, &mut rng);
        let hubs = Tensor::uniform(nh, d, -1.0, 1.0, &mut rng);

        let mut s2h_mask = vec![vec![false; ns]; nh];
        let mut h2s_mask = vec![vec![false; nh]; ns];
        for (s, h) in a.connections() {
            s2h_mask[h][s] = true;
            h2s_mask[s][h] = true;
        }
        let full_mask = vec![vec![true; nh]; nh];

        let mut tape = Tape::new();
        let params = bind(&mut tape, &p);
        let sv = tape.constant(spokes.clone());
        let hv = tape.constant(hubs.clone());

        let (o, _) = bipartite_attention(&mut tape, sv, hv, &Connections::spokes_to_hubs(&a), &params, false).unwrap();
        let (expect, _) = dense_masked_attention(&spokes, &hubs, &s2h_mask, &p);
        worst = worst.max(tape.value(o).max_abs_diff(&expect));

        let (o, gamma) = bipartite_attention(&mut tape, hv, sv, &Connections::hubs_to_spokes(&a), &params, true).unwrap();
        let (expect, alpha) = dense_masked_attention(&hubs, &spokes, &h2s_mask, &p);
        worst = worst.max(tape.value(o).max_abs_diff(&expect));
        for ((s, h), g) in a.connections().zip(gamma.unwrap()) {
            worst = worst.max((g - alpha[s][h]).abs());
        }

        let o = hub_self_attention(&mut tape, hv, &params).unwrap();
        let (expect, _) = dense_masked_attention(&hubs, &hubs, &full_mask, &p);
        worst = worst.max(tape.value(o).max_abs_diff(&expect));
    }
    worst
}

/// Balanced-random assignments whose hub loads spread by more than `k`.
/// Sweeps every `N_h <= 64` and `k <= 5` with random `N_s <= 512`.
pub fn balanced_load_violations(seeds: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut bad = 0;
    for nh in 1..=64 {
        for k in 1..=5 {
            for seed in 0..seeds {
                let ns = rng.gen_range(1..=512);
                let loads = balanced_random_assignment(ns, nh, k, seed).hub_loads();
                let spread = loads.iter().max().unwrap() - loads.iter().min().unwrap();
                bad += (spread > k) as usize;
            }
        }
    }
    bad
}

/// Valid strides `u` for which `i -> i*u mod N_h` is not a permutation.
pub fn stride_permutation_violations(max_hubs: usize) -> usize {
    let mut bad = 0;
    for nh in 1..=max_hubs {
        for u in coprime_strides(nh) {
            let mut hit = vec![false; nh];
            for i in 0..nh {
                hit[(i * u) % nh] = true;
            }
            bad += hit.iter().any(|&h| !h) as usize;
        }
    }
    bad
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|r| r / z).collect()
}

/// Bhattacharyya symmetry/range/self-similarity on random pairs, and
/// utilization and load distribution against brute-force counts. Returns
/// a description of every failure.
pub fn metric_failures(trials: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fails = Vec::new();
    for t in 0..trials {
        let n = rng.gen_range(1..=20);
        let p = random_distribution(&mut rng, n);
        let q = random_distribution(&mut rng, n);
        let pq = bhattacharyya(&p, &q).unwrap();
        let qp = bhattacharyya(&q, &p).unwrap();
        let pp = bhattacharyya(&p, &p).unwrap();
        if pq != qp {
            fails.push(format!("trial {t}: asymmetric {pq} vs {qp}"));
        }
        if !(0.0..=1.0 + 1e-12).contains(&pq) {
            fails.push(format!("trial {t}: out of range {pq}"));
        }
        if (pp - 1.0).abs() > 1e-12 {
            fails.push(format!("trial {t}: self-similarity {pp}"));
        }

        let ns = rng.gen_range(1..=40);
        let nh = rng.gen_range(1..=10);
        let a = random_assignment(ns, nh, rng.gen_range(1..=4), t as u64);
        let mut used = vec![false; nh];
        let mut loads = vec![0usize; nh];
        for s in 0..ns {
            for &h in a.hubs_of(s) {
                used[h] = true;
                loads[h] += 1;
            }
        }
        let u = used.iter().filter(|&&x| x).count();
        if hub_utilization(&a) != (u, u as f64 / nh as f64) {
            fails.push(format!("trial {t}: utilization {:?} vs {u}", hub_utilization(&a)));
        }
        let dist = spoke_load_distribution(&a);
        let total = (ns * a.k()) as f64;
        if dist.iter().zip(&loads).any(|(d, &l)| (d - l as f64 / total).abs() > 1e-15) {
            fails.push(format!("trial {t}: load distribution mismatch"));
        }
    }
    for (n, expect) in [(479, 22), (151, 12)] {
        if num_hubs(n, 1.0) != expect {
            fails.push(format!("num_hubs({n}) = {}, expected {expect}", num_hubs(n, 1.0)));
        }
    }
    fails
}

/// Result of checking every parameter tensor of the full model.
#[derive(Debug)]
pub struct ModelGradCheck {
    /// Largest `finite_diff_check` relative error and the tensor it came from.
    pub worst: (f64, String),
    /// Coordinates whose analytic and central-difference values disagree by
    /// more than `1e-4` relative plus the round-off floor of the difference
    /// quotient.
    pub beyond_floor: Vec<String>,
    /// Coordinates failing the relative test while both values sit under
    /// that floor.
    pub at_floor: usize,
    pub coordinates: usize,
}

/// Round-off floor of a central difference at step `h` on a loss of size
/// `loss`: a few ulps of the loss over `2h`.
pub fn fd_noise_floor(loss: f64, h: f64) -> f64 {
    16.0 * f64::EPSILON * loss.abs().max(1.0) / (2.0 * h)
}

/// Checks the 2-layer model on a 12-spoke, 4-hub, `k = 2` instance with the
/// routing held at the assignments of the unperturbed forward pass.
pub fn full_model_gradient_check(seed: u64) -> ModelGradCheck {
    use rehub_core::graph::{batch, random_regular_with_dims};
    use rehub_core::model::{forward, loss, predict, ModelConfig, ModelState, PreparedBatch};
    use rehub_core::tensor::{finite_diff_check, DEFAULT_FD_STEP, DEFAULT_FD_TOLERANCE};
    use rehub_core::{Tape, Tensor, Var};

    let cfg = ModelConfig {
        input_dim: 3,
        hidden_dim: 4,
        heads: 2,
        layers: 2,
        static_hubs: Some(4),
        k: 2,
        spoke_encoder: true,
        seed,
        ..ModelConfig::default()
    };
    let g = random_regular_with_dims(12, 3, 3, 1, seed).unwrap();
    let input = PreparedBatch::new(batch(&[g]).unwrap(), &cfg, seed).unwrap();
    let state = ModelState::new(&cfg).unwrap();
    let routing = predict(&state, &input).unwrap().1.routing();
    let targets = input.targets().unwrap().clone();
    let values = state.params().values();

    let f = |i: usize, tape: &mut Tape, x: Var| -> rehub_core::Result<Var> {
        let vars: Vec<_> = values
            .iter()
            .enumerate()
            .map(|(j, t)| if j == i { x } else { tape.constant(t.clone()) })
            .collect();
        let out = forward(tape, &state.layout().bind(&vars), &cfg, &input, Some(&routing))?;
        loss(tape, out.predictions, &targets)
    };
    let eval = |i: usize, p: &Tensor| {
        let mut tape = Tape::new();
        let x = tape.constant(p.clone());
        let y = f(i, &mut tape, x).unwrap();
        tape.value(y).item()
    };

    let mut tape = Tape::new();
    let vars = state.params().bind(&mut tape);
    let out = forward(&mut tape, &state.layout().bind(&vars), &cfg, &input, Some(&routing)).unwrap();
    let l = loss(&mut tape, out.predictions, &targets).unwrap();
    let floor = fd_noise_floor(tape.value(l).item(), DEFAULT_FD_STEP);
    let grads = tape.backward(l).unwrap();

    let mut check = ModelGradCheck {
        worst: (0.0, String::new()),
        beyond_floor: Vec::new(),
        at_floor: 0,
        coordinates: 0,
    };
    for (i, name) in state.params().names().iter().enumerate() {
        let report = finite_diff_check(|t, x| f(i, t, x), &values[i], DEFAULT_FD_STEP, DEFAULT_FD_TOLERANCE);
        if report.diagnostic.is_some() {
            check.beyond_floor.push(format!("{name}: {:?}", report.diagnostic));
            continue;
        }
        if report.max_relative_error > check.worst.0 {
            check.worst = (report.max_relative_error, name.clone());
        }
        let analytic = grads.get_or_zeros(vars[i], values[i].rows(), values[i].cols());
        let mut probe = values[i].clone();
        for c in 0..probe.len() {
            check.coordinates += 1;
            let orig = probe.data()[c];
            probe.data_mut()[c] = orig + DEFAULT_FD_STEP;
            let plus = eval(i, &probe);
            probe.data_mut()[c] = orig - DEFAULT_FD_STEP;
            let minus = eval(i, &probe);
            probe.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * DEFAULT_FD_STEP);
            let a = analytic.data()[c];
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            if diff <= DEFAULT_FD_TOLERANCE * scale.max(1e-8) {
                continue;
            }
            if diff <= DEFAULT_FD_TOLERANCE * scale + floor {
                check.at_floor += 1;
            } else {
                check.beyond_floor.push(format!("{name}[{c}]: analytic {a:e}, numeric {numeric:e}"));
            }
        }
    }
    check
}
