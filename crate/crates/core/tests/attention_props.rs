mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rehub_core::attention::{bipartite_attention, hub_self_attention, AttentionParams, Connections};
use rehub_core::hubs::random_assignment;
use rehub_core::tensor::{finite_diff_check, Tape, Tensor, DEFAULT_FD_STEP, DEFAULT_FD_TOLERANCE};

#[test]
fn sparse_attention_matches_dense_oracle() {
    let err = common::checks::attention_oracle_max_error(50, 3);
    assert!(err <= 1e-10, "max abs error {err}");
}

#[test]
fn scores_sum_to_one_per_spoke() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..20 {
        let a = random_assignment(15, 5, 3, i);
        let mut tape = Tape::new();
        let p = AttentionParams::on_tape(&mut tape, 4, 2, &mut rng).unwrap();
        let hubs = tape.constant(Tensor::uniform(5, 4, -1.0, 1.0, &mut rng));
        let spokes = tape.constant(Tensor::uniform(15, 4, -1.0, 1.0, &mut rng));
        let (_, g) = bipartite_attention(&mut tape, hubs, spokes, &Connections::hubs_to_spokes(&a), &p, true).unwrap();
        for row in g.unwrap().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn gradient_flows_through_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_assignment(6, 3, 2, 1);
    let conn = Connections::hubs_to_spokes(&a);
    let spokes = Tensor::uniform(6, 4, -1.0, 1.0, &mut rng);
    let hubs = Tensor::uniform(3, 4, -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(6, 4, -1.0, 1.0, &mut rng);
    let seed: u64 = rng.gen();
    let r = finite_diff_check(
        |t, h| {
            let mut prng = ChaCha8Rng::seed_from_u64(seed);
            let p = AttentionParams::on_tape(t, 4, 2, &mut prng)?;
            let s = t.constant(spokes.clone());
            let (o, _) = bipartite_attention(t, h, s, &conn, &p, false)?;
            let wv = t.constant(w.clone());
            let y = t.mul(o, wv)?;
            Ok(t.sum(y))
        },
        &hubs,
        DEFAULT_FD_STEP,
        DEFAULT_FD_TOLERANCE,
    );
    assert!(r.pass, "{r:?}");
}

#[test]
fn hub_attention_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = Tensor::uniform(5, 6, -1.0, 1.0, &mut rng);
    let perm = [3, 0, 4, 1, 2];
    let mut hp = Tensor::zeros(5, 6);
    for (old, &new) in perm.iter().enumerate() {
        hp.row_mut(new).copy_from_slice(h.row(old));
    }
    let mut tape = Tape::new();
    let p = AttentionParams::on_tape(&mut tape, 6, 3, &mut rng).unwrap();
    let hv = tape.constant(h);
    let hpv = tape.constant(hp);
    let o = hub_self_attention(&mut tape, hv, &p).unwrap();
    let op = hub_self_attention(&mut tape, hpv, &p).unwrap();
    for (old, &new) in perm.iter().enumerate() {
        for (a, b) in tape.value(o).row(old).iter().zip(tape.value(op).row(new)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn bipartite_attention_is_equivariant_in_destinations() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_assignment(8, 3, 2, 2);
    let perm: Vec<usize> = vec![5, 2, 7, 0, 1, 6, 3, 4];
    let ap = a.permuted_spokes(&perm);
    let spokes = Tensor::uniform(8, 4, -1.0, 1.0, &mut rng);
    let mut sp = Tensor::zeros(8, 4);
    for (old, &new) in perm.iter().enumerate() {
        sp.row_mut(new).copy_from_slice(spokes.row(old));
    }
    let mut tape = Tape::new();
    let p = AttentionParams::on_tape(&mut tape, 4, 2, &mut rng).unwrap();
    let h = tape.constant(Tensor::uniform(3, 4, -1.0, 1.0, &mut rng));
    let s = tape.constant(spokes);
    let spv = tape.constant(sp);
    let (o, _) = bipartite_attention(&mut tape, h, s, &Connections::hubs_to_spokes(&a), &p, false).unwrap();
    let (op, _) = bipartite_attention(&mut tape, h, spv, &Connections::hubs_to_spokes(&ap), &p, false).unwrap();
    for (old, &new) in perm.iter().enumerate() {
        for (x, y) in tape.value(o).row(old).iter().zip(tape.value(op).row(new)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    // Relabelling sources (hubs) with the assignment relabelled leaves the
    // output unchanged.
    let hperm = [2, 0, 1];
    let rows: Vec<Vec<usize>> = (0..8).map(|i| a.hubs_of(i).iter().map(|&x| hperm[x]).collect()).collect();
    let ah = rehub_core::AssignmentMatrix::from_rows(3, &rows).unwrap();
    let hv = tape.value(h).clone();
    let mut hp = Tensor::zeros(3, 4);
    for (old, &new) in hperm.iter().enumerate() {
        hp.row_mut(new).copy_from_slice(hv.row(old));
    }
    let hpv = tape.constant(hp);
    let (oh, _) = bipartite_attention(&mut tape, hpv, s, &Connections::hubs_to_spokes(&ah), &p, false).unwrap();
    assert!(tape.value(oh).max_abs_diff(tape.value(o)) < 1e-12);
}

/// Analytic op count of one attention call, per head: both projections
/// (`2 d d_h` flops per row), gathers, the add / leaky / score / softmax /
/// scale / scatter work per connection, then concat, output mix and residual.
fn analytic_ops(n_src: usize, n_dst: usize, conns: usize, d: usize, heads: usize) -> f64 {
    let dh = d / heads;
    let per_head = 2 * d * dh * (n_src + n_dst) + 8 * conns * dh + 4 * conns;
    (heads * per_head + n_dst * d + 2 * n_dst * d * d + n_dst * d) as f64
}

#[test]
fn op_count_is_linear_in_connections() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for &(ns, nh, k) in &[(200, 14, 3), (800, 28, 3), (800, 28, 1), (3200, 57, 5)] {
        let a = random_assignment(ns, nh, k, 1);
        let mut tape = Tape::new();
        let p = AttentionParams::on_tape(&mut tape, 8, 2, &mut rng).unwrap();
        let s = tape.constant(Tensor::uniform(ns, 8, -1.0, 1.0, &mut rng));
        let h = tape.constant(Tensor::uniform(nh, 8, -1.0, 1.0, &mut rng));
        let before = tape.op_count();
        bipartite_attention(&mut tape, s, h, &Connections::spokes_to_hubs(&a), &p, false).unwrap();
        let measured = (tape.op_count() - before) as f64;
        let expect = analytic_ops(ns, nh, ns * k, 8, 2);
        let ratio = measured / expect;
        assert!((0.5..=2.0).contains(&ratio), "ns={ns} k={k}: measured {measured}, analytic {expect}");
    }
}

#[test]
fn connections_from_assignment_align() {
    let a = random_assignment(5, 4, 2, 3);
    let c = Connections::hubs_to_spokes(&a);
    let pairs: Vec<(usize, usize)> = c.destinations().iter().copied().zip(c.sources().iter().copied()).collect();
    assert_eq!(pairs, a.connections().collect::<Vec<_>>());
}
