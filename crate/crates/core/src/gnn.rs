//! Two-layer GCN used as the robustness probe, and the linearized
//! `Â²XW` surrogate used by the structure attacks.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{glorot, Adam};
use crate::tag::{accuracy, EdgeSet, SplitMask};

/// `D̃^{-1/2}(A+I)D̃^{-1/2}` in CSR form.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = self.indptr[i]..self.indptr[i + 1];
        match self.indices[row.clone()].binary_search(&j) {
            Ok(k) => self.values[row.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn matmul(&self, x: &ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, x.ncols()));
        for i in 0..self.n {
            let mut row = out.row_mut(i);
            for k in self.indptr[i]..self.indptr[i + 1] {
                row.scaled_add(self.values[k], &x.row(self.indices[k]));
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for k in self.indptr[i]..self.indptr[i + 1] {
                out[[i, self.indices[k]]] = self.values[k];
            }
        }
        out
    }
}

pub fn normalize_adjacency(edges: &EdgeSet, node_count: usize) -> NormalizedAdjacency {
    let mut rows: Vec<Vec<usize>> = (0..node_count).map(|i| vec![i]).collect();
    for e in edges {
        rows[e.u()].push(e.v());
        rows[e.v()].push(e.u());
    }
    let inv_sqrt: Vec<f64> = rows.iter().map(|r| 1.0 / (r.len() as f64).sqrt()).collect();
    let mut indptr = Vec::with_capacity(node_count + 1);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    indptr.push(0);
    for (i, row) in rows.iter_mut().enumerate() {
        row.sort_unstable();
        for &j in row.iter() {
            indices.push(j);
            values.push(inv_sqrt[i] * inv_sqrt[j]);
        }
        indptr.push(indices.len());
    }
    NormalizedAdjacency {
        n: node_count,
        indptr,
        indices,
        values,
    }
}

/// Symmetric normalization of a dense (possibly fractional) adjacency.
/// Returns `Â` and `d̃^{-1/2}`.
pub fn normalize_dense(adj: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let n = adj.nrows();
    let mut tilde = adj.clone();
    for i in 0..n {
        tilde[[i, i]] += 1.0;
    }
    let inv_sqrt = tilde.sum_axis(Axis(1)).mapv(|d| 1.0 / d.sqrt());
    let mut norm = tilde;
    for ((i, j), v) in norm.indexed_iter_mut() {
        *v *= inv_sqrt[i] * inv_sqrt[j];
    }
    (norm, inv_sqrt)
}

pub fn dense_adjacency(edges: &EdgeSet, node_count: usize) -> Array2<f64> {
    let mut a = Array2::zeros((node_count, node_count));
    for e in edges {
        a[[e.u(), e.v()]] = 1.0;
        a[[e.v(), e.u()]] = 1.0;
    }
    a
}

pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (k, &v)| if v > best.1 { (k, v) } else { best },
                )
                .0
        })
        .collect()
}

/// Mean cross-entropy over `rows` and its gradient with respect to the logits.
pub(crate) fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize], rows: &[usize]) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(logits.raw_dim());
    let scale = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    for &i in rows {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        loss += sum.ln() + max - row[labels[i]];
        let mut g = grad.row_mut(i);
        for (k, e) in exp.iter().enumerate() {
            g[k] = e / sum * scale;
        }
        g[labels[i]] -= scale;
    }
    (loss * scale, grad)
}

pub(crate) fn cross_entropy(logits: &Array2<f64>, labels: &[usize], rows: &[usize]) -> f64 {
    softmax_cross_entropy(logits, labels, rows).0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcnConfig {
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Start the output layer at zero instead of a Glorot sample.
    pub zero_init_output: bool,
}

impl Default for GcnConfig {
    fn default() -> Self {
        GcnConfig {
            hidden: 16,
            lr: 0.01,
            weight_decay: 5e-4,
            epochs: 200,
            seed: 0,
            zero_init_output: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnModel {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub config: GcnConfig,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub loss_history: Vec<f64>,
}

impl GcnModel {
    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.w2.ncols()
    }

    pub fn logits(&self, adj: &NormalizedAdjacency, features: &Array2<f64>) -> Array2<f64> {
        let ax = adj.matmul(&features.view());
        gcn_forward(adj, &ax, &self.w1, &self.w2).logits
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = self.w1.iter().copied().collect::<Vec<_>>();
        params.extend(self.w2.iter().copied());
        Checkpoint {
            kind: "gcn".into(),
            dims: vec![self.w1.nrows(), self.w1.ncols(), self.w2.ncols()],
            seed: self.config.seed,
            config: serde_json::to_value(&self.config).expect("config serializes"),
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let [d, h, c] = ck.expect_dims("gcn", 3)?[..] else {
            unreachable!()
        };
        if ck.params.len() != d * h + h * c {
            return Err(Error::invalid(format!(
                "gcn checkpoint has {} parameters, dims need {}",
                ck.params.len(),
                d * h + h * c
            )));
        }
        let config: GcnConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::invalid(format!("gcn checkpoint config: {e}")))?;
        let (p1, p2) = ck.params.split_at(d * h);
        Ok(GcnModel {
            w1: Array2::from_shape_vec((d, h), p1.to_vec()).expect("checked length"),
            w2: Array2::from_shape_vec((h, c), p2.to_vec()).expect("checked length"),
            config,
            best_epoch: 0,
            best_val_accuracy: f64::NAN,
            loss_history: Vec::new(),
        })
    }
}

/// Model checkpoint: JSON header plus a flat parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: String,
    pub dims: Vec<usize>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub params: Vec<f64>,
}

impl Checkpoint {
    /// Checks the kind, the number of dims, and that parameters are finite.
    pub(crate) fn expect_dims(&self, kind: &str, rank: usize) -> Result<&[usize]> {
        if self.kind != kind {
            return Err(Error::invalid(format!(
                "checkpoint kind `{}`, expected `{kind}`",
                self.kind
            )));
        }
        if self.dims.len() != rank {
            return Err(Error::invalid(format!("{kind} checkpoint needs {rank} dims")));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid(format!("{kind} checkpoint has non-finite parameters")));
        }
        Ok(&self.dims)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        crate::tag::parse_json_file(path)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::tag::write_json_file(path, self)
    }
}

struct Forward {
    hidden_pre: Array2<f64>,
    hidden_agg: Array2<f64>,
    logits: Array2<f64>,
}

fn gcn_forward(adj: &NormalizedAdjacency, ax: &Array2<f64>, w1: &Array2<f64>, w2: &Array2<f64>) -> Forward {
    let hidden_pre = ax.dot(w1);
    let hidden = hidden_pre.mapv(|v| v.max(0.0));
    let hidden_agg = adj.matmul(&hidden.view());
    let logits = hidden_agg.dot(w2);
    Forward {
        hidden_pre,
        hidden_agg,
        logits,
    }
}

/// Training objective of the GCN: mean cross-entropy on the training rows
/// plus `weight_decay/2 · (‖W1‖² + ‖W2‖²)`.
pub struct GcnObjective<'a> {
    adj: &'a NormalizedAdjacency,
    ax: Array2<f64>,
    labels: &'a [usize],
    train: &'a [usize],
    weight_decay: f64,
}

impl<'a> GcnObjective<'a> {
    pub fn new(
        adj: &'a NormalizedAdjacency,
        features: &Array2<f64>,
        labels: &'a [usize],
        train: &'a [usize],
        weight_decay: f64,
    ) -> Self {
        GcnObjective {
            adj,
            ax: adj.matmul(&features.view()),
            labels,
            train,
            weight_decay,
        }
    }

    pub fn loss(&self, w1: &Array2<f64>, w2: &Array2<f64>) -> f64 {
        let fwd = gcn_forward(self.adj, &self.ax, w1, w2);
        cross_entropy(&fwd.logits, self.labels, self.train) + self.decay(w1, w2)
    }

    fn decay(&self, w1: &Array2<f64>, w2: &Array2<f64>) -> f64 {
        0.5 * self.weight_decay * (w1.iter().map(|v| v * v).sum::<f64>() + w2.iter().map(|v| v * v).sum::<f64>())
    }

    /// Loss, `∂L/∂W1`, `∂L/∂W2`, and the logits of the forward pass.
    pub fn loss_and_grad(&self, w1: &Array2<f64>, w2: &Array2<f64>) -> (f64, Array2<f64>, Array2<f64>, Array2<f64>) {
        let fwd = gcn_forward(self.adj, &self.ax, w1, w2);
        let (ce, g_logits) = softmax_cross_entropy(&fwd.logits, self.labels, self.train);
        let mut g_w2 = fwd.hidden_agg.t().dot(&g_logits);
        g_w2.scaled_add(self.weight_decay, w2);
        let g_agg = g_logits.dot(&w2.t());
        let mut g_pre = self.adj.matmul(&g_agg.view());
        g_pre.zip_mut_with(&fwd.hidden_pre, |g, &h| {
            if h <= 0.0 {
                *g = 0.0
            }
        });
        let mut g_w1 = self.ax.t().dot(&g_pre);
        g_w1.scaled_add(self.weight_decay, w1);
        (ce + self.decay(w1, w2), g_w1, g_w2, fwd.logits)
    }
}

fn check_inputs(features: &Array2<f64>, labels: &[usize], split: &SplitMask) -> Result<usize> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} feature rows", labels.len())));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features contain non-finite values"));
    }
    split.validate(n)?;
    Ok(labels.iter().max().map_or(0, |m| m + 1))
}

pub fn train_gcn(
    edges: &EdgeSet,
    features: &Array2<f64>,
    labels: &[usize],
    split: &SplitMask,
    config: &GcnConfig,
) -> Result<GcnModel> {
    let classes = check_inputs(features, labels, split)?;
    let n = features.nrows();
    let d = features.ncols();
    let h = config.hidden;
    let adj = normalize_adjacency(edges, n);
    let objective = GcnObjective::new(&adj, features, labels, &split.train, config.weight_decay);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w1 = Array2::from_shape_vec((d, h), glorot(&mut rng, d, h, d * h)).expect("shape");
    let mut w2 = if config.zero_init_output {
        Array2::zeros((h, classes))
    } else {
        Array2::from_shape_vec((h, classes), glorot(&mut rng, h, classes, h * classes)).expect("shape")
    };
    let mut opt1 = Adam::new(d * h, config.lr);
    let mut opt2 = Adam::new(h * classes, config.lr);

    let mut best = (f64::NEG_INFINITY, f64::INFINITY, 0usize, w1.clone(), w2.clone());
    let mut consider = |epoch: usize, logits: &Array2<f64>, w1: &Array2<f64>, w2: &Array2<f64>| -> Result<()> {
        let acc = accuracy(&argmax_rows(logits), labels, &split.val)?;
        let val_loss = cross_entropy(logits, labels, &split.val);
        if acc > best.0 || (acc == best.0 && val_loss < best.1) {
            best = (acc, val_loss, epoch, w1.clone(), w2.clone());
        }
        Ok(())
    };

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (loss, g1, g2, logits) = objective.loss_and_grad(&w1, &w2);
        if !loss.is_finite() {
            return Err(Error::Numerical("training diverged".into()));
        }
        history.push(loss);
        consider(epoch, &logits, &w1, &w2)?;
        opt1.step_array(&mut w1, &g1);
        opt2.step_array(&mut w2, &g2);
    }
    let final_logits = gcn_forward(&adj, &objective.ax, &w1, &w2).logits;
    if final_logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("training diverged".into()));
    }
    consider(config.epochs, &final_logits, &w1, &w2)?;

    let (best_val_accuracy, _, best_epoch, w1, w2) = best;
    Ok(GcnModel {
        w1,
        w2,
        config: config.clone(),
        best_epoch,
        best_val_accuracy,
        loss_history: history,
    })
}

pub fn predict_gcn(model: &GcnModel, edges: &EdgeSet, features: &Array2<f64>) -> Result<Vec<usize>> {
    if features.ncols() != model.input_dim() {
        return Err(Error::invalid(format!(
            "model expects {} features, got {}",
            model.input_dim(),
            features.ncols()
        )));
    }
    let adj = normalize_adjacency(edges, features.nrows());
    Ok(argmax_rows(&model.logits(&adj, features)))
}

pub fn evaluate_gcn(
    model: &GcnModel,
    edges: &EdgeSet,
    features: &Array2<f64>,
    labels: &[usize],
    mask: &[usize],
) -> Result<f64> {
    accuracy(&predict_gcn(model, edges, features)?, labels, mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            lr: 0.01,
            weight_decay: 5e-4,
            epochs: 200,
            seed: 0,
        }
    }
}

/// Linearized two-layer propagation `Â²XW` with a single weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateModel {
    pub w: Array2<f64>,
}

impl SurrogateModel {
    pub fn class_count(&self) -> usize {
        self.w.ncols()
    }

    /// `XW`, the part of the logits that does not depend on structure.
    pub fn projected(&self, features: &Array2<f64>) -> Array2<f64> {
        features.dot(&self.w)
    }
}

pub fn surrogate_fit(
    edges: &EdgeSet,
    features: &Array2<f64>,
    labels: &[usize],
    split: &SplitMask,
    config: &SurrogateConfig,
) -> Result<SurrogateModel> {
    let classes = check_inputs(features, labels, split)?;
    let d = features.ncols();
    let adj = normalize_adjacency(edges, features.nrows());
    let prop = adj.matmul(&adj.matmul(&features.view()).view());

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w = Array2::from_shape_vec((d, classes), glorot(&mut rng, d, classes, d * classes)).expect("shape");
    let mut opt = Adam::new(d * classes, config.lr);
    for _ in 0..config.epochs {
        let logits = prop.dot(&w);
        let (loss, g_logits) = softmax_cross_entropy(&logits, labels, &split.train);
        if !loss.is_finite() {
            return Err(Error::Numerical("surrogate diverged".into()));
        }
        let mut g = prop.t().dot(&g_logits);
        g.scaled_add(config.weight_decay, &w);
        opt.step_array(&mut w, &g);
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("surrogate diverged".into()));
    }
    Ok(SurrogateModel { w })
}

pub fn surrogate_logits(model: &SurrogateModel, edges: &EdgeSet, features: &Array2<f64>) -> Array2<f64> {
    let adj = normalize_adjacency(edges, features.nrows());
    adj.matmul(&adj.matmul(&model.projected(features).view()).view())
}

/// Surrogate training loss (mean cross-entropy on `train`, fixed weights) as
/// a function of a dense symmetric adjacency, and its gradient.
///
/// Entry `(i, j)` of the gradient is the derivative with respect to the
/// tied pair `a_ij = a_ji`; the diagonal is zero.
pub fn surrogate_adjacency_gradient(
    projected: &Array2<f64>,
    adj: &Array2<f64>,
    labels: &[usize],
    train: &[usize],
) -> (f64, Array2<f64>) {
    let n = adj.nrows();
    let (norm, s) = normalize_dense(adj);
    let m = norm.dot(projected);
    let z = norm.dot(&m);
    let (loss, g_z) = softmax_cross_entropy(&z, labels, train);

    // ∂L/∂Â treating every entry as free.
    let g_norm = g_z.dot(&m.t()) + norm.dot(&g_z).dot(&projected.t());

    // Chain through the degree normalization of Ã = A + I.
    let mut rho = Array1::<f64>::zeros(n);
    for k in 0..n {
        let mut acc = 0.0;
        for l in 0..n {
            let a_kl = adj[[k, l]] + if k == l { 1.0 } else { 0.0 };
            if a_kl != 0.0 {
                acc += (g_norm[[k, l]] + g_norm[[l, k]]) * a_kl * s[l];
            }
        }
        rho[k] = -0.5 * s[k].powi(3) * acc;
    }
    let mut grad = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                grad[[i, j]] = (g_norm[[i, j]] + g_norm[[j, i]]) * s[i] * s[j] + rho[i] + rho[j];
            }
        }
    }
    (loss, grad)
}

/// Same loss as [`surrogate_adjacency_gradient`], without the gradient.
pub fn surrogate_adjacency_loss(projected: &Array2<f64>, adj: &Array2<f64>, labels: &[usize], train: &[usize]) -> f64 {
    let (norm, _) = normalize_dense(adj);
    let z = norm.dot(&norm.dot(projected));
    cross_entropy(&z, labels, train)
}
