//! One scalar-valued probe per differentiable primitive, for gradient checks.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rehub_core::tensor::{finite_diff_check, GradCheckReport, SegmentIndex, Tape, Tensor, Var, DEFAULT_FD_STEP, DEFAULT_FD_TOLERANCE};
use rehub_core::Result;

type Probe = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// `sum(y * w)` with a fixed random `w`, so that no output coordinate's
/// gradient is trivially constant.
fn weighted(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// `(name, point, probe)` for every primitive, with constants drawn from
/// `seed`. Points are 4 x 3 unless a primitive needs another shape.
pub fn cases(seed: u64) -> Vec<(&'static str, Tensor, Probe)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |r, c| Tensor::uniform(r, c, -1.0, 1.0, &mut rng);
    let point = u(4, 3);
    let w43 = u(4, 3);
    let w44 = u(4, 4);
    let w33 = u(3, 3);
    let w34 = u(3, 4);
    let w41 = u(4, 1);
    let w53 = u(5, 3);
    let w83 = u(8, 3);
    let w46 = u(4, 6);
    let w23 = u(2, 3);
    let col = u(4, 1);
    let other = u(4, 3);
    let rhs = u(3, 2);
    let w42 = u(4, 2);
    let bias = u(1, 3);
    let target = u(4, 3);

    let mut v: Vec<(&'static str, Tensor, Probe)> = Vec::new();
    {
        let (rhs, w42) = (rhs.clone(), w42.clone());
        v.push(("matmul", point.clone(), Box::new(move |t, x| {
            let b = t.constant(rhs.clone());
            let y = t.matmul(x, b)?;
            weighted(t, y, &w42)
        })));
    }
    {
        let o = other.clone();
        v.push(("matmul_rhs", point.transpose(), Box::new(move |t, x| {
            let a = t.constant(o.clone());
            let y = t.matmul(a, x)?;
            weighted(t, y, &w44)
        })));
    }
    for (name, kind) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let (o, w) = (other.clone(), w43.clone());
        v.push((name, point.clone(), Box::new(move |t, x| {
            let b = t.constant(o.clone());
            let y = match kind {
                0 => t.add(x, b)?,
                1 => t.sub(b, x)?,
                _ => t.mul(x, x)?,
            };
            let y = if kind == 2 { t.mul(y, b)? } else { y };
            weighted(t, y, &w)
        })));
    }
    {
        let (w, p) = (w43.clone(), point.clone());
        v.push(("add_row", bias.clone(), Box::new(move |t, b| {
            let x = t.constant(p.clone());
            let y = t.add_row(x, b)?;
            weighted(t, y, &w)
        })));
    }
    {
        let (w, bias) = (w43.clone(), bias.clone());
        v.push(("linear", w33.clone(), Box::new(move |t, m| {
            let x = t.constant(w.clone());
            let b = t.constant(bias.clone());
            let y = t.linear(x, m, b)?;
            weighted(t, y, &w)
        })));
    }
    {
        let w = w43.clone();
        v.push(("scale", point.clone(), Box::new(move |t, x| {
            let y = t.scale(x, -1.7);
            weighted(t, y, &w)
        })));
    }
    {
        let (w, p) = (w43.clone(), point.clone());
        v.push(("scale_rows", col.clone(), Box::new(move |t, s| {
            let x = t.constant(p.clone());
            let y = t.scale_rows(x, s)?;
            let z = t.scale_rows(y, s)?;
            weighted(t, z, &w)
        })));
    }
    {
        let w = w43.clone();
        v.push(("leaky_relu", point.clone(), Box::new(move |t, x| {
            let y = t.leaky_relu(x);
            weighted(t, y, &w)
        })));
    }
    {
        let w = w43.clone();
        v.push(("relu", point.clone(), Box::new(move |t, x| {
            let y = t.relu(x);
            weighted(t, y, &w)
        })));
    }
    {
        let (w, o) = (w83.clone(), other.clone());
        v.push(("concat_rows", point.clone(), Box::new(move |t, x| {
            let b = t.constant(o.clone());
            let y = t.concat_rows(&[b, x])?;
            weighted(t, y, &w)
        })));
    }
    {
        let (w, o) = (w46.clone(), other.clone());
        v.push(("concat_cols", point.clone(), Box::new(move |t, x| {
            let b = t.constant(o.clone());
            let y = t.concat_cols(&[x, b])?;
            weighted(t, y, &w)
        })));
    }
    {
        let w = w34.clone();
        v.push(("transpose", point.clone(), Box::new(move |t, x| {
            let y = t.transpose(x);
            weighted(t, y, &w)
        })));
    }
    {
        let w = w53.clone();
        v.push(("gather_rows", point.clone(), Box::new(move |t, x| {
            let y = t.gather_rows(x, Arc::from(vec![3, 0, 3, 1, 2]))?;
            weighted(t, y, &w)
        })));
    }
    {
        let w = w23.clone();
        v.push(("scatter_add_rows", point.clone(), Box::new(move |t, x| {
            let y = t.scatter_add_rows(x, Arc::from(vec![1, 0, 1, 1]), 2)?;
            weighted(t, y, &w)
        })));
    }
    {
        let w = w41.clone();
        let seg = Arc::new(SegmentIndex::new(vec![2, 0, 2, 2], 3).unwrap());
        v.push(("segment_softmax", col.clone(), Box::new(move |t, x| {
            let y = t.segment_softmax(x, seg.clone())?;
            let sq = t.mul(y, y)?;
            weighted(t, sq, &w)
        })));
    }
    {
        let w = w33.clone();
        let seg = Arc::new(SegmentIndex::new(vec![0, 2, 0, 0], 3).unwrap());
        v.push(("segment_mean", point.clone(), Box::new(move |t, x| {
            let y = t.segment_mean(x, seg.clone())?;
            weighted(t, y, &w)
        })));
    }
    {
        let w = w43.clone();
        v.push(("row_softmax", point.clone(), Box::new(move |t, x| {
            let y = t.row_softmax(x);
            weighted(t, y, &w)
        })));
    }
    v.push(("sum", point.clone(), Box::new(|t, x| {
        let y = t.mul(x, x)?;
        Ok(t.sum(y))
    })));
    v.push(("mean", point.clone(), Box::new(|t, x| {
        let y = t.mul(x, x)?;
        t.mean(y)
    })));
    {
        let w = w43.clone();
        v.push(("layer_norm", point.clone(), Box::new(move |t, x| {
            let y = t.layer_norm(x);
            weighted(t, y, &w)
        })));
    }
    v.push(("softmax_cross_entropy", point.clone(), Box::new(|t, x| {
        t.softmax_cross_entropy(x, Arc::from(vec![2, 0, 1, 2]))
    })));
    v.push(("squared_error", point.clone(), Box::new(move |t, x| t.squared_error(x, target.clone()))));
    v
}

/// Runs every case at the default step and tolerance.
pub fn check_all(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    cases(seed)
        .into_iter()
        .map(|(name, point, f)| (name, finite_diff_check(f, &point, DEFAULT_FD_STEP, DEFAULT_FD_TOLERANCE)))
        .collect()
}
