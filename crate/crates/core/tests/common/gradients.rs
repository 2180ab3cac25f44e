//! Analytic gradients against central finite differences. Each check
//! returns the worst relative error seen.

use graphsieve_core::edgepred::{EdgePredictorObjective, MlpParams};
use graphsieve_core::gnn::{normalize_adjacency, surrogate_adjacency_gradient, surrogate_adjacency_loss, GcnObjective};
use graphsieve_core::{Edge, EdgeSet};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const INSTANCES: u64 = 5;
pub const COORDS: usize = 10;
pub const TOLERANCE: f64 = 1e-4;

fn step(theta: f64) -> f64 {
    1e-5 * theta.abs().max(1.0)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn normal(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || scale * rng.sample::<f64, _>(StandardNormal))
}

fn random_edges(rng: &mut ChaCha8Rng, n: usize, p: f64) -> EdgeSet {
    let mut edges = EdgeSet::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.insert(Edge::new(i, j));
            }
        }
    }
    edges
}

struct Worst(f64);

impl Worst {
    fn check(&mut self, what: String, analytic: f64, numeric: f64) -> Result<(), String> {
        let err = rel_err(analytic, numeric);
        self.0 = self.0.max(err);
        if err <= TOLERANCE {
            Ok(())
        } else {
            Err(format!(
                "{what}: analytic {analytic:e} numeric {numeric:e} rel {err:.2e}"
            ))
        }
    }
}

pub fn gcn_weights() -> Result<f64, String> {
    let mut worst = Worst(0.0);
    for inst in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + inst);
        let (n, d, h, c) = (30, 8, 6, 3);
        let adj = normalize_adjacency(&random_edges(&mut rng, n, 0.15), n);
        let x = normal(&mut rng, (n, d), 1.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let train: Vec<usize> = (0..n).step_by(2).collect();
        let obj = GcnObjective::new(&adj, &x, &labels, &train, 5e-4);
        let w1 = normal(&mut rng, (d, h), 0.5);
        let w2 = normal(&mut rng, (h, c), 0.5);
        let (_, g1, g2, _) = obj.loss_and_grad(&w1, &w2);
        for _ in 0..COORDS {
            if rng.random_bool(0.5) {
                let idx = (rng.random_range(0..d), rng.random_range(0..h));
                let e = step(w1[idx]);
                let (mut p, mut m) = (w1.clone(), w1.clone());
                p[idx] += e;
                m[idx] -= e;
                let numeric = (obj.loss(&p, &w2) - obj.loss(&m, &w2)) / (2.0 * e);
                worst.check(format!("instance {inst} W1{idx:?}"), g1[idx], numeric)?;
            } else {
                let idx = (rng.random_range(0..h), rng.random_range(0..c));
                let e = step(w2[idx]);
                let (mut p, mut m) = (w2.clone(), w2.clone());
                p[idx] += e;
                m[idx] -= e;
                let numeric = (obj.loss(&w1, &p) - obj.loss(&w1, &m)) / (2.0 * e);
                worst.check(format!("instance {inst} W2{idx:?}"), g2[idx], numeric)?;
            }
        }
    }
    Ok(worst.0)
}

pub fn surrogate_adjacency() -> Result<f64, String> {
    let mut worst = Worst(0.0);
    for inst in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + inst);
        let (n, c) = (20, 3);
        // continuous symmetric relaxation, as seen inside the PGD loop
        let mut a = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in i + 1..n {
                let v = if rng.random_bool(0.3) {
                    rng.random_range(0.05..1.0)
                } else {
                    0.0
                };
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        let projected = normal(&mut rng, (n, c), 1.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let train: Vec<usize> = (0..n).filter(|i| i % 3 != 0).collect();
        let (_, grad) = surrogate_adjacency_gradient(&projected, &a, &labels, &train);
        for _ in 0..COORDS {
            let i = rng.random_range(0..n);
            let j = (i + rng.random_range(1..n)) % n;
            let e = step(a[[i, j]]);
            let (mut p, mut m) = (a.clone(), a.clone());
            for (x, y) in [(i, j), (j, i)] {
                p[[x, y]] += e;
                m[[x, y]] -= e;
            }
            let numeric = (surrogate_adjacency_loss(&projected, &p, &labels, &train)
                - surrogate_adjacency_loss(&projected, &m, &labels, &train))
                / (2.0 * e);
            worst.check(format!("instance {inst} a[{i},{j}]"), grad[[i, j]], numeric)?;
        }
    }
    Ok(worst.0)
}

pub fn edge_predictor() -> Result<f64, String> {
    let mut worst = Worst(0.0);
    for inst in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + inst);
        let (rows, input, hidden) = (40, 12, 9);
        let x = normal(&mut rng, (rows, input), 1.0);
        let y: Vec<f64> = (0..rows).map(|r| (r % 2) as f64).collect();
        let obj = EdgePredictorObjective::new(&x, &y);
        let mut params = MlpParams::zeros(input, hidden);
        params.w1 = normal(&mut rng, (input, hidden), 0.5);
        params.b1 = params.b1.mapv(|_| 0.1 * rng.sample::<f64, _>(StandardNormal));
        params.w2 = params.w2.mapv(|_| 0.5 * rng.sample::<f64, _>(StandardNormal));
        params.b2 = 0.1;
        let flat = params.to_flat();
        let grad = obj.loss_and_grad(&params).1.to_flat();
        for _ in 0..COORDS {
            let k = rng.random_range(0..flat.len());
            let e = step(flat[k]);
            let (mut p, mut m) = (flat.clone(), flat.clone());
            p[k] += e;
            m[k] -= e;
            let lp = obj.loss(&MlpParams::from_flat(input, hidden, &p).unwrap());
            let lm = obj.loss(&MlpParams::from_flat(input, hidden, &m).unwrap());
            worst.check(format!("instance {inst} coord {k}"), grad[k], (lp - lm) / (2.0 * e))?;
        }
    }
    Ok(worst.0)
}
