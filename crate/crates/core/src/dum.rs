//! The variance network and the distribution-level contrastive objective.
//!
//! Each embedding `e` is mapped to a diagonal Gaussian whose mean is `e`
//! itself and whose log-variance is predicted by a three-layer ReLU MLP. A
//! group of `2m` embeddings is split in two halves; each half is fused with
//! a product of experts and the two fused means form a positive pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{poe_backward, poe_combine, DiagGaussian};
use crate::numkernel::{dot, Matrix, ParamTensor, UnaryOp};

/// Log-variance range; `exp` of the bounds stays inside the Gaussian clamp.
pub const LOG_VAR_MIN: f64 = -13.8;
pub const LOG_VAR_MAX: f64 = 13.8;

/// Smallest fused-mean norm accepted when means are L2-normalised.
const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
}

impl Linear {
    fn he_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound));
        Self {
            weight: ParamTensor::new(w),
            bias: ParamTensor::new(Matrix::zeros(1, fan_out)),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: ParamTensor::new(Matrix::zeros(fan_in, fan_out)),
            bias: ParamTensor::new(Matrix::zeros(1, fan_out)),
        }
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.weight.value)?.add_row_broadcast(&self.bias.value)
    }
}

/// MLP `d → h → h → d` predicting per-dimension log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceNet {
    pub layers: [Linear; 3],
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    pre1: Matrix,
    act1: Matrix,
    pre2: Matrix,
    act2: Matrix,
    /// Raw network output before clamping.
    pub raw: Matrix,
}

impl ForwardCache {
    /// Clamped log-variance.
    pub fn log_variance(&self) -> Matrix {
        let mut lv = self.raw.clone();
        for v in lv.data_mut() {
            *v = v.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        }
        lv
    }

    pub fn variance(&self) -> Matrix {
        let mut v = self.log_variance();
        for x in v.data_mut() {
            *x = x.exp();
        }
        v
    }
}

/// Gradients for every network parameter, in [`VarianceNet::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Matrix>);

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(Matrix::max_abs).fold(0.0, f64::max)
    }
}

impl VarianceNet {
    /// He-uniform hidden layers, zero biases, zero output layer (so every
    /// input starts at unit variance).
    pub fn new(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::Argument(format!(
                "network dimensions must be positive (d = {input_dim}, h = {hidden})"
            )));
        }
        Ok(Self {
            layers: [
                Linear::he_uniform(input_dim, hidden, rng),
                Linear::he_uniform(hidden, hidden, rng),
                Linear::zeros(hidden, input_dim),
            ],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.value.rows()
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].weight.value.cols()
    }

    /// `[W1, b1, W2, b2, W3, b3]`.
    pub fn params(&self) -> [&ParamTensor; 6] {
        let [l1, l2, l3] = &self.layers;
        [&l1.weight, &l1.bias, &l2.weight, &l2.bias, &l3.weight, &l3.bias]
    }

    pub fn params_mut(&mut self) -> [&mut ParamTensor; 6] {
        let [l1, l2, l3] = &mut self.layers;
        [
            &mut l1.weight,
            &mut l1.bias,
            &mut l2.weight,
            &mut l2.bias,
            &mut l3.weight,
            &mut l3.bias,
        ]
    }

    /// Parameter shapes in declared order for a `d`/`h` network.
    pub fn param_shapes(d: usize, h: usize) -> [(usize, usize); 6] {
        [(d, h), (1, h), (h, h), (1, h), (h, d), (1, d)]
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardCache> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim("VarianceNet::forward", self.input_dim(), x.cols()));
        }
        let pre1 = self.layers[0].forward(x)?;
        let act1 = pre1.unary(UnaryOp::Relu)?;
        let pre2 = self.layers[1].forward(&act1)?;
        let act2 = pre2.unary(UnaryOp::Relu)?;
        let raw = self.layers[2].forward(&act2)?;
        Ok(ForwardCache {
            input: x.clone(),
            pre1,
            act1,
            pre2,
            act2,
            raw,
        })
    }

    /// Clamped log-variance for each row of `x`.
    pub fn log_variance(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.log_variance())
    }

    /// Parameter gradients given `∂L/∂(clamped log-variance)`. Entries whose
    /// raw output lies outside the clamp range receive no gradient.
    pub fn backward(&self, cache: &ForwardCache, grad_log_var: &Matrix) -> Result<Gradients> {
        if grad_log_var.shape() != cache.raw.shape() {
            return Err(Error::dim(
                "VarianceNet::backward",
                format!("{:?}", cache.raw.shape()),
                format!("{:?}", grad_log_var.shape()),
            ));
        }
        let mut d_raw = grad_log_var.clone();
        for (g, &r) in d_raw.data_mut().iter_mut().zip(cache.raw.data()) {
            if !(LOG_VAR_MIN..=LOG_VAR_MAX).contains(&r) {
                *g = 0.0;
            }
        }
        let [_, l2, l3] = &self.layers;

        let g_w3 = cache.act2.t_matmul(&d_raw)?;
        let g_b3 = d_raw.sum_rows();
        let d_act2 = d_raw.matmul_t(&l3.weight.value)?;
        let d_pre2 = Matrix::unary_backward(UnaryOp::Relu, &cache.pre2, &d_act2)?;

        let g_w2 = cache.act1.t_matmul(&d_pre2)?;
        let g_b2 = d_pre2.sum_rows();
        let d_act1 = d_pre2.matmul_t(&l2.weight.value)?;
        let d_pre1 = Matrix::unary_backward(UnaryOp::Relu, &cache.pre1, &d_act1)?;

        let g_w1 = cache.input.t_matmul(&d_pre1)?;
        let g_b1 = d_pre1.sum_rows();
        Ok(Gradients(vec![g_w1, g_b1, g_w2, g_b2, g_w3, g_b3]))
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Copies computed gradients into the parameters' gradient slots.
    pub fn set_grads(&mut self, grads: &Gradients) -> Result<()> {
        for (p, g) in self.params_mut().into_iter().zip(&grads.0) {
            p.zero_grad();
            p.accumulate(g)?;
        }
        Ok(())
    }
}

/// Maps one embedding to its Gaussian. The mean is the embedding itself,
/// bit for bit.
pub fn encode_expert(net: &VarianceNet, embedding: &[f64]) -> Result<DiagGaussian> {
    if embedding.len() != net.input_dim() {
        return Err(Error::dim("encode_expert", net.input_dim(), embedding.len()));
    }
    let x = Matrix::row_vector(embedding);
    let var = net.forward(&x)?.variance();
    DiagGaussian::new(embedding.to_vec(), var.into_data())
}

/// `B` groups of `2m` embeddings stored contiguously, group-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    embeddings: Matrix,
    m: usize,
}

impl GroupBatch {
    pub fn new(embeddings: Matrix, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Argument("group half-size m must be at least 1".into()));
        }
        if embeddings.rows() == 0 || embeddings.rows() % (2 * m) != 0 {
            return Err(Error::Argument(format!(
                "a group batch needs a positive multiple of 2m = {} rows, got {}",
                2 * m,
                embeddings.rows()
            )));
        }
        Ok(Self { embeddings, m })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn groups(&self) -> usize {
        self.embeddings.rows() / (2 * self.m)
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    /// Row range of half `half` (0 or 1) of group `g`.
    fn half_rows(&self, g: usize, half: usize) -> std::ops::Range<usize> {
        let start = g * 2 * self.m + half * self.m;
        start..start + self.m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    /// Negated mean dot product of the two fused means of each group.
    PlainDot,
    /// Symmetric cross-entropy over all group pairs, positives on the diagonal.
    InfoNce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub temperature: f64,
    pub normalize_poe_means: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::InfoNce,
            temperature: 0.07,
            normalize_poe_means: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Argument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Loss value and parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Gradients,
}

/// Fused means for every half of every group.
struct Fused {
    cache: ForwardCache,
    variance: Matrix,
    /// `experts[g][half]`
    experts: Vec<[Vec<DiagGaussian>; 2]>,
    poe: Vec<[crate::gaussian::PoeGaussian; 2]>,
    /// Vectors entering the dot products (normalised if requested).
    z: Vec<[Vec<f64>; 2]>,
    norms: Vec<[f64; 2]>,
}

fn fuse(batch: &GroupBatch, net: &VarianceNet, normalize: bool) -> Result<Fused> {
    let x = batch.embeddings();
    let cache = net.forward(x)?;
    let variance = cache.variance();
    let mut experts = Vec::with_capacity(batch.groups());
    let mut poe = Vec::with_capacity(batch.groups());
    let mut z = Vec::with_capacity(batch.groups());
    let mut norms = Vec::with_capacity(batch.groups());
    for g in 0..batch.groups() {
        let halves: [Vec<DiagGaussian>; 2] = [0, 1].map(|h| {
            batch
                .half_rows(g, h)
                .map(|r| DiagGaussian {
                    mean: x.row(r).to_vec(),
                    variance: variance.row(r).to_vec(),
                })
                .collect()
        });
        let fused = [poe_combine(&halves[0])?, poe_combine(&halves[1])?];
        let mut zs = [fused[0].mean.clone(), fused[1].mean.clone()];
        let mut ns = [1.0, 1.0];
        if normalize {
            for (v, n) in zs.iter_mut().zip(ns.iter_mut()) {
                *n = dot(v, v).sqrt();
                if *n < MIN_NORM {
                    return Err(Error::Domain(format!(
                        "cannot normalise a fused mean of norm {n:e} (group {g})"
                    )));
                }
                v.iter_mut().for_each(|e| *e /= *n);
            }
        }
        experts.push(halves);
        poe.push(fused);
        z.push(zs);
        norms.push(ns);
    }
    Ok(Fused {
        cache,
        variance,
        experts,
        poe,
        z,
        norms,
    })
}

/// Back-propagates `∂L/∂z` for every fused vector into network gradients.
fn backprop(batch: &GroupBatch, net: &VarianceNet, fused: &Fused, grad_z: &[[Vec<f64>; 2]], normalize: bool) -> Result<Gradients> {
    let d = batch.dim();
    let mut grad_log_var = Matrix::zeros(batch.embeddings().rows(), d);
    let zero = vec![0.0; d];
    for g in 0..batch.groups() {
        for h in 0..2 {
            let mut gz = grad_z[g][h].clone();
            if normalize {
                // u = z/|z|  ⇒  ∂L/∂z = (g − u (u·g)) / |z|
                let u = &fused.z[g][h];
                let ug = dot(u, &gz);
                for (gk, uk) in gz.iter_mut().zip(u) {
                    *gk = (*gk - uk * ug) / fused.norms[g][h];
                }
            }
            let expert_grads = poe_backward(&fused.experts[g][h], &fused.poe[g][h], &gz, &zero)?;
            for (r, eg) in batch.half_rows(g, h).zip(expert_grads) {
                let var = fused.variance.row(r);
                for ((out, gv), v) in grad_log_var.row_mut(r).iter_mut().zip(&eg.variance).zip(var) {
                    *out = gv * v;
                }
            }
        }
    }
    net.backward(&fused.cache, &grad_log_var)
}

fn check_dims(batch: &GroupBatch, net: &VarianceNet) -> Result<()> {
    if batch.dim() != net.input_dim() {
        return Err(Error::dim("DUM loss", net.input_dim(), batch.dim()));
    }
    Ok(())
}

fn finite_loss(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("DUM loss evaluated to {loss}")))
    }
}

/// `−(1/B) Σ_g z_A(g)·z_B(g)`: minimising it maximises the fused-mean agreement.
pub fn dum_loss_plain(batch: &GroupBatch, net: &VarianceNet, normalize_poe_means: bool) -> Result<LossOutput> {
    check_dims(batch, net)?;
    let fused = fuse(batch, net, normalize_poe_means)?;
    let b = batch.groups() as f64;
    let mut loss = 0.0;
    let mut grad_z = Vec::with_capacity(batch.groups());
    for [za, zb] in &fused.z {
        loss -= dot(za, zb);
        grad_z.push([
            zb.iter().map(|v| -v / b).collect(),
            za.iter().map(|v| -v / b).collect(),
        ]);
    }
    let loss = finite_loss(loss / b)?;
    let grads = backprop(batch, net, &fused, &grad_z, normalize_poe_means)?;
    Ok(LossOutput { loss, grads })
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE over fused means: logits `z_A(a)·z_B(b)/τ`, positives on
/// the diagonal, cross-entropy averaged over rows and columns.
pub fn dum_loss_infonce(batch: &GroupBatch, net: &VarianceNet, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    check_dims(batch, net)?;
    let nb = batch.groups();
    if nb < 2 {
        return Err(Error::Argument(
            "InfoNCE needs at least two groups per batch; use the plain-dot loss for a single group".into(),
        ));
    }
    let fused = fuse(batch, net, cfg.normalize_poe_means)?;
    let tau = cfg.temperature;
    let logits: Vec<Vec<f64>> = (0..nb)
        .map(|a| (0..nb).map(|b| dot(&fused.z[a][0], &fused.z[b][1]) / tau).collect())
        .collect();
    let row_lse: Vec<f64> = (0..nb).map(|a| log_sum_exp(logits[a].iter().copied())).collect();
    let col_lse: Vec<f64> = (0..nb)
        .map(|b| log_sum_exp((0..nb).map(|a| logits[a][b])))
        .collect();

    let scale = 1.0 / (2.0 * nb as f64);
    let mut loss = 0.0;
    for a in 0..nb {
        loss += (row_lse[a] - logits[a][a]) + (col_lse[a] - logits[a][a]);
    }
    let loss = finite_loss(loss * scale)?;

    let d = batch.dim();
    let mut grad_z: Vec<[Vec<f64>; 2]> = (0..nb).map(|_| [vec![0.0; d], vec![0.0; d]]).collect();
    for a in 0..nb {
        for b in 0..nb {
            let target = if a == b { 1.0 } else { 0.0 };
            let p_row = (logits[a][b] - row_lse[a]).exp();
            let p_col = (logits[a][b] - col_lse[b]).exp();
            let ds = scale * ((p_row - target) + (p_col - target)) / tau;
            if ds == 0.0 {
                continue;
            }
            for k in 0..d {
                grad_z[a][0][k] += ds * fused.z[b][1][k];
                grad_z[b][1][k] += ds * fused.z[a][0][k];
            }
        }
    }
    let grads = backprop(batch, net, &fused, &grad_z, cfg.normalize_poe_means)?;
    Ok(LossOutput { loss, grads })
}

/// Dispatches on `cfg.variant`.
pub fn dum_loss(batch: &GroupBatch, net: &VarianceNet, cfg: &LossConfig) -> Result<LossOutput> {
    match cfg.variant {
        LossVariant::PlainDot => {
            cfg.validate()?;
            dum_loss_plain(batch, net, cfg.normalize_poe_means)
        }
        LossVariant::InfoNce => dum_loss_infonce(batch, net, cfg),
    }
}
