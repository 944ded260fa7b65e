//! Embedding networks and convex last-layer heads.
//!
//! Everything here works on row-major batches (`DMatrix` with one example per
//! row) and carries a matching backward pass, so episode gradients are exact
//! rather than finite-difference approximations.

use nalgebra::DMatrix;

use crate::linalg;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EmbeddingKind {
    Identity,
    Linear,
    /// Tanh hidden layers followed by a linear output layer.
    Mlp,
}

impl EmbeddingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Identity => "identity",
            EmbeddingKind::Linear => "linear",
            EmbeddingKind::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(EmbeddingKind::Identity),
            "linear" => Ok(EmbeddingKind::Linear),
            "mlp" => Ok(EmbeddingKind::Mlp),
            other => Err(Error::invalid(format!("unknown embedding kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EmbeddingSpec {
    pub kind: EmbeddingKind,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl EmbeddingSpec {
    pub fn identity(dim: usize) -> Self {
        EmbeddingSpec { kind: EmbeddingKind::Identity, input_dim: dim, hidden_dims: Vec::new(), output_dim: dim }
    }

    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        EmbeddingSpec { kind: EmbeddingKind::Linear, input_dim, hidden_dims: Vec::new(), output_dim }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        EmbeddingSpec { kind: EmbeddingKind::Mlp, input_dim, hidden_dims, output_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::invalid("embedding dims must be positive"));
        }
        match self.kind {
            EmbeddingKind::Identity if self.output_dim != self.input_dim => {
                Err(Error::Dimension { what: "identity embedding output", expected: self.input_dim, got: self.output_dim })
            }
            EmbeddingKind::Mlp if self.hidden_dims.contains(&0) => Err(Error::invalid("mlp hidden sizes must be positive")),
            _ => Ok(()),
        }
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        match self.kind {
            EmbeddingKind::Identity => Vec::new(),
            EmbeddingKind::Linear => vec![(self.input_dim, self.output_dim)],
            EmbeddingKind::Mlp => {
                let mut dims = vec![self.input_dim];
                dims.extend(&self.hidden_dims);
                dims.push(self.output_dim);
                dims.windows(2).map(|w| (w[0], w[1])).collect()
            }
        }
    }

    /// Weight + bias count over all layers.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// The learned algorithm's flat parameter vector plus its layout.
///
/// Layer `l` occupies a weight block (`fan_out x fan_in`, row-major) followed by
/// its bias, layers in input-to-output order.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmParams {
    spec: EmbeddingSpec,
    values: Vec<f64>,
}

impl AlgorithmParams {
    pub fn new(spec: EmbeddingSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.param_count() {
            return Err(Error::Dimension { what: "parameter vector", expected: spec.param_count(), got: values.len() });
        }
        Ok(AlgorithmParams { spec, values })
    }

    pub fn zeros(spec: EmbeddingSpec) -> Result<Self> {
        let n = spec.param_count();
        AlgorithmParams::new(spec, vec![0.0; n])
    }

    pub fn spec(&self) -> &EmbeddingSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        AlgorithmParams::new(self.spec.clone(), values)
    }

    /// `(1 - t) * self + t * other`.
    pub fn lerp(&self, other: &AlgorithmParams, t: f64) -> Result<Self> {
        if self.spec != other.spec {
            return Err(Error::invalid("cannot interpolate parameters of different embeddings"));
        }
        let v = self.values.iter().zip(&other.values).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        self.with_values(v)
    }

    fn layer_views(&self) -> Vec<(DMatrix<f64>, &[f64])> {
        let mut off = 0;
        self.spec
            .layers()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let w = DMatrix::from_row_slice(fan_out, fan_in, &self.values[off..off + fan_in * fan_out]);
                off += fan_in * fan_out;
                let b = &self.values[off..off + fan_out];
                off += fan_out;
                (w, b)
            })
            .collect()
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EmbedCache {
    /// Input of every layer, then the final output.
    acts: Vec<DMatrix<f64>>,
}

/// Embeds every row of `x`.
pub fn embed_batch(params: &AlgorithmParams, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, EmbedCache)> {
    let spec = params.spec();
    if x.ncols() != spec.input_dim {
        return Err(Error::Dimension { what: "embedding input", expected: spec.input_dim, got: x.ncols() });
    }
    let layers = params.layer_views();
    let n_layers = layers.len();
    let mut acts = vec![x.clone()];
    for (l, (w, b)) in layers.iter().enumerate() {
        let mut h = acts.last().expect("non-empty") * w.transpose();
        for mut row in h.row_iter_mut() {
            for (v, bias) in row.iter_mut().zip(b.iter()) {
                *v += bias;
            }
        }
        if spec.kind == EmbeddingKind::Mlp && l + 1 < n_layers {
            h.apply(|v| *v = v.tanh());
        }
        acts.push(h);
    }
    let out = acts.last().expect("non-empty").clone();
    Ok((out, EmbedCache { acts }))
}

/// Embeds a single feature vector.
pub fn embed(params: &AlgorithmParams, x: &[f64]) -> Result<Vec<f64>> {
    let (z, _) = embed_batch(params, &DMatrix::from_row_slice(1, x.len(), x))?;
    Ok(z.iter().copied().collect())
}

/// Backpropagates `d_out` (gradient w.r.t. the embedding output rows) into a
/// flat parameter gradient with the layout of [`AlgorithmParams`].
pub fn embed_backward(params: &AlgorithmParams, cache: &EmbedCache, d_out: &DMatrix<f64>) -> Vec<f64> {
    let spec = params.spec();
    let layers = params.layer_views();
    let n_layers = layers.len();
    let mut grads: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    let mut delta = d_out.clone();
    for l in (0..n_layers).rev() {
        let (w, _) = &layers[l];
        if spec.kind == EmbeddingKind::Mlp && l + 1 < n_layers {
            let out = &cache.acts[l + 1];
            delta.zip_apply(out, |d, h| *d *= 1.0 - h * h);
        }
        let input = &cache.acts[l];
        let dw = delta.transpose() * input;
        let mut g = Vec::with_capacity(dw.len() + w.nrows());
        for r in 0..dw.nrows() {
            g.extend(dw.row(r).iter());
        }
        for c in 0..delta.ncols() {
            g.push(delta.column(c).sum());
        }
        grads[l] = g;
        if l > 0 {
            delta = &delta * w;
        }
    }
    grads.concat()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadKind {
    ProtoNet,
    Ridge { lambda: f64 },
}

impl HeadKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            HeadKind::Ridge { lambda } if !(lambda > 0.0) => Err(Error::invalid("ridge lambda must be > 0")),
            _ => Ok(()),
        }
    }
}

fn check_head_inputs(support: &DMatrix<f64>, labels: &[usize], n_way: usize, query: &DMatrix<f64>) -> Result<Vec<usize>> {
    if labels.len() != support.nrows() {
        return Err(Error::Dimension { what: "support labels", expected: support.nrows(), got: labels.len() });
    }
    if query.ncols() != support.ncols() {
        return Err(Error::Dimension { what: "query feature dim", expected: support.ncols(), got: query.ncols() });
    }
    let mut counts = vec![0usize; n_way];
    for &y in labels {
        if y >= n_way {
            return Err(Error::invalid(format!("support label {y} out of range 0..{n_way}")));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("class {c} has no support examples")));
    }
    Ok(counts)
}

fn prototypes(support: &DMatrix<f64>, labels: &[usize], counts: &[usize]) -> DMatrix<f64> {
    let mut protos = DMatrix::zeros(counts.len(), support.ncols());
    for (i, &y) in labels.iter().enumerate() {
        let mut row = protos.row_mut(y);
        row += support.row(i);
    }
    for (c, &n) in counts.iter().enumerate() {
        protos.row_mut(c).scale_mut(1.0 / n as f64);
    }
    protos
}

/// Prototype head: `logit(q, c) = -||q - mean of class-c support||^2`.
pub fn protonet_logits(support: &DMatrix<f64>, labels: &[usize], n_way: usize, query: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let counts = check_head_inputs(support, labels, n_way, query)?;
    let protos = prototypes(support, labels, &counts);
    Ok(DMatrix::from_fn(query.nrows(), n_way, |q, c| -(query.row(q) - protos.row(c)).norm_squared()))
}

fn augment(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(x.ncols(), 1.0)
}

fn one_hot(labels: &[usize], n_way: usize) -> DMatrix<f64> {
    DMatrix::from_fn(labels.len(), n_way, |i, c| if labels[i] == c { 1.0 } else { 0.0 })
}

/// Ridge last-layer weights: solves `(Phi^T Phi + lambda I) B = Phi^T Y` with
/// `Phi` the support features plus a constant-one column.
pub fn ridge_weights(support: &DMatrix<f64>, labels: &[usize], n_way: usize, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::invalid("ridge lambda must be > 0"));
    }
    let phi = augment(support);
    let y = one_hot(labels, n_way);
    let m = ridge_system(&phi, lambda);
    linalg::spd_solve_mat(&m, &(phi.transpose() * y), "ridge head normal equations")
}

fn ridge_system(phi: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let k = phi.ncols();
    phi.transpose() * phi + DMatrix::identity(k, k) * lambda
}

/// Ridge head logits: augmented query features times [`ridge_weights`].
pub fn ridge_logits(support: &DMatrix<f64>, labels: &[usize], n_way: usize, query: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    check_head_inputs(support, labels, n_way, query)?;
    let b = ridge_weights(support, labels, n_way, lambda)?;
    Ok(augment(query) * b)
}

pub fn head_logits(head: HeadKind, support: &DMatrix<f64>, labels: &[usize], n_way: usize, query: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match head {
        HeadKind::ProtoNet => protonet_logits(support, labels, n_way, query),
        HeadKind::Ridge { lambda } => ridge_logits(support, labels, n_way, query, lambda),
    }
}

/// Pulls `d_logits` back to the support and query features.
pub fn head_backward(
    head: HeadKind,
    support: &DMatrix<f64>,
    labels: &[usize],
    n_way: usize,
    query: &DMatrix<f64>,
    d_logits: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let counts = check_head_inputs(support, labels, n_way, query)?;
    match head {
        HeadKind::ProtoNet => {
            let protos = prototypes(support, labels, &counts);
            let mut d_query = DMatrix::zeros(query.nrows(), query.ncols());
            let mut d_protos = DMatrix::zeros(n_way, query.ncols());
            for q in 0..query.nrows() {
                for c in 0..n_way {
                    let g = d_logits[(q, c)];
                    if g == 0.0 {
                        continue;
                    }
                    let diff = query.row(q) - protos.row(c);
                    let mut dq = d_query.row_mut(q);
                    dq -= &diff * (2.0 * g);
                    let mut dp = d_protos.row_mut(c);
                    dp += &diff * (2.0 * g);
                }
            }
            let mut d_support = DMatrix::zeros(support.nrows(), support.ncols());
            for (i, &y) in labels.iter().enumerate() {
                d_support.set_row(i, &(d_protos.row(y) / counts[y] as f64));
            }
            Ok((d_support, d_query))
        }
        HeadKind::Ridge { lambda } => {
            let phi = augment(support);
            let psi = augment(query);
            let y = one_hot(labels, n_way);
            let m = ridge_system(&phi, lambda);
            let b = linalg::spd_solve_mat(&m, &(phi.transpose() * &y), "ridge head normal equations")?;
            let g_b = psi.transpose() * d_logits;
            let w = linalg::spd_solve_mat(&m, &g_b, "ridge head adjoint")?;
            let d_phi = &y * w.transpose() - &phi * (&w * b.transpose() + &b * w.transpose());
            let d_psi = d_logits * b.transpose();
            let m_dim = support.ncols();
            Ok((d_phi.columns(0, m_dim).into_owned(), d_psi.columns(0, m_dim).into_owned()))
        }
    }
}

/// Mean softmax cross-entropy, its gradient w.r.t. the logits, and the 0/1
/// accuracy of the arg-max prediction (ties go to the lowest class index).
pub fn softmax_cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>, f64) {
    let n = logits.nrows();
    let k = logits.ncols();
    let mut grad = DMatrix::zeros(n, k);
    let mut loss = 0.0;
    let mut correct = 0usize;
    for q in 0..n {
        let row = logits.row(q);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[labels[q]];
        for c in 0..k {
            grad[(q, c)] = ((row[c] - lse).exp() - if c == labels[q] { 1.0 } else { 0.0 }) / n as f64;
        }
        let pred = (0..k).fold(0, |best, c| if row[c] > row[best] { c } else { best });
        if pred == labels[q] {
            correct += 1;
        }
    }
    (loss / n as f64, grad, correct as f64 / n as f64)
}

/// Row-wise softmax probabilities.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = logits.clone();
    for mut row in p.row_iter_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn param_counts() {
        assert_eq!(EmbeddingSpec::identity(3).param_count(), 0);
        assert_eq!(EmbeddingSpec::linear(3, 2).param_count(), 8);
        assert_eq!(EmbeddingSpec::mlp(3, vec![4], 2).param_count(), 16 + 10);
        assert!(EmbeddingSpec { kind: EmbeddingKind::Identity, input_dim: 3, hidden_dims: vec![], output_dim: 2 }.validate().is_err());
    }

    #[test]
    fn identity_and_unit_linear_embed() {
        let x = [1.5, -2.0, 0.25];
        let id = AlgorithmParams::zeros(EmbeddingSpec::identity(3)).unwrap();
        assert_eq!(embed(&id, &x).unwrap(), x.to_vec());
        let mut v = vec![0.0; 12];
        v[0] = 1.0;
        v[4] = 1.0;
        v[8] = 1.0;
        let lin = AlgorithmParams::new(EmbeddingSpec::linear(3, 3), v).unwrap();
        assert_eq!(embed(&lin, &x).unwrap(), x.to_vec());
        assert!(embed(&lin, &[1.0]).is_err());
    }

    #[test]
    fn zero_mlp_outputs_bias() {
        let spec = EmbeddingSpec::mlp(3, vec![5, 4], 2);
        let mut p = AlgorithmParams::zeros(spec.clone()).unwrap();
        let n = p.len();
        p.values_mut()[n - 2] = 0.7;
        p.values_mut()[n - 1] = -0.3;
        assert_eq!(embed(&p, &[1.0, 2.0, 3.0]).unwrap(), vec![0.7, -0.3]);
    }

    #[test]
    fn protonet_distances() {
        let support = mat(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let query = mat(1, 2, &[0.0, 0.0]);
        let l = protonet_logits(&support, &[0, 1], 2, &query).unwrap();
        assert_eq!(l[(0, 0)], 0.0);
        assert_eq!(l[(0, 1)], -1.0);
        assert!(protonet_logits(&support, &[0, 0], 2, &query).is_err());
    }

    #[test]
    fn ridge_normal_equation_residual() {
        let support = mat(4, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, 0.7, -1.0, -1.5]);
        let labels = [0, 1, 2, 0];
        let lambda = 0.3;
        let b = ridge_weights(&support, &labels, 3, lambda).unwrap();
        let phi = augment(&support);
        let y = one_hot(&labels, 3);
        let resid = phi.transpose() * (&phi * &b - y) + &b * lambda;
        assert!(resid.amax() < 1e-8);
    }

    #[test]
    fn huge_lambda_flattens_logits() {
        let support = mat(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let query = mat(1, 2, &[0.3, 0.9]);
        let l = ridge_logits(&support, &[0, 1], 2, &query, 1e9).unwrap();
        assert!(l.amax() < 1e-8);
        let (loss, _, _) = softmax_cross_entropy(&l, &[0]);
        assert!((loss - 2f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn cross_entropy_tie_break() {
        let logits = mat(1, 2, &[-1.0, -1.0]);
        let (loss, _, acc0) = softmax_cross_entropy(&logits, &[0]);
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(acc0, 1.0);
        let (_, _, acc1) = softmax_cross_entropy(&logits, &[1]);
        assert_eq!(acc1, 0.0);
    }
}
