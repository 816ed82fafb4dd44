//! Variational latent space: Gaussian encoder heads, reparameterized
//! sampling, analytic KL to the standard-normal prior and a feature-space
//! reconstruction likelihood.
//!
//! All functions operate row-wise on batches `[B, dim]`; a 1-D input is
//! treated as a batch of one and yields a one-element result.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::numcore::{Graph, NodeId, NumError, ParamId, ParamSet, Tensor};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Affine mean and log-variance heads sharing one input.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentHead {
    pub w_mu: ParamId,
    pub b_mu: ParamId,
    pub w_log_var: ParamId,
    pub b_log_var: ParamId,
    pub in_dim: usize,
    pub latent_dim: usize,
}

impl LatentHead {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        latent_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w_mu = params.add(
            format!("{prefix}.w_mu"),
            Tensor::fan_in_uniform(&[in_dim, latent_dim], in_dim, rng),
        );
        let b_mu = params.add(format!("{prefix}.b_mu"), Tensor::zeros(&[latent_dim]));
        // starts at unit variance; a fan-in draw would put exp(log_var) far from 1
        let w_log_var = params.add(
            format!("{prefix}.w_log_var"),
            Tensor::zeros(&[in_dim, latent_dim]),
        );
        let b_log_var = params.add(format!("{prefix}.b_log_var"), Tensor::zeros(&[latent_dim]));
        Self {
            w_mu,
            b_mu,
            w_log_var,
            b_log_var,
            in_dim,
            latent_dim,
        }
    }

    pub fn from_params(params: &ParamSet, prefix: &str) -> Result<Self, NumError> {
        let id = |n: &str| {
            params
                .id(&format!("{prefix}.{n}"))
                .ok_or_else(|| NumError::InvalidArgument(format!("missing parameter {prefix}.{n}")))
        };
        let w_mu = id("w_mu")?;
        let shape = params.get(w_mu).shape();
        Ok(Self {
            in_dim: shape[0],
            latent_dim: shape[1],
            w_mu,
            b_mu: id("b_mu")?,
            w_log_var: id("w_log_var")?,
            b_log_var: id("b_log_var")?,
        })
    }
}

/// Two-layer affine + relu decoder from `z` back to the encoder-feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub latent_dim: usize,
    pub out_dim: usize,
}

impl ReconHead {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        latent_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w1 = params.add(
            format!("{prefix}.w1"),
            Tensor::fan_in_uniform(&[latent_dim, hidden], latent_dim, rng),
        );
        let b1 = params.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden]));
        let w2 = params.add(
            format!("{prefix}.w2"),
            Tensor::fan_in_uniform(&[hidden, out_dim], hidden, rng),
        );
        let b2 = params.add(format!("{prefix}.b2"), Tensor::zeros(&[out_dim]));
        Self {
            w1,
            b1,
            w2,
            b2,
            latent_dim,
            out_dim,
        }
    }

    pub fn from_params(params: &ParamSet, prefix: &str) -> Result<Self, NumError> {
        let id = |n: &str| {
            params
                .id(&format!("{prefix}.{n}"))
                .ok_or_else(|| NumError::InvalidArgument(format!("missing parameter {prefix}.{n}")))
        };
        let (w1, w2) = (id("w1")?, id("w2")?);
        Ok(Self {
            latent_dim: params.get(w1).shape()[0],
            out_dim: params.get(w2).shape()[1],
            w1,
            b1: id("b1")?,
            w2,
            b2: id("b2")?,
        })
    }

    pub fn forward(&self, g: &mut Graph, nodes: &[NodeId], z: NodeId) -> Result<NodeId, NumError> {
        let z = as_batch(g, z)?;
        let h = g.matmul(z, nodes[self.w1.0])?;
        let h = g.bias_add(h, nodes[self.b1.0])?;
        let h = g.relu(h)?;
        let out = g.matmul(h, nodes[self.w2.0])?;
        g.bias_add(out, nodes[self.b2.0])
    }
}

/// Per-example posterior parameters and the samples drawn from them.
#[derive(Clone, Debug)]
pub struct LatentCode {
    pub mu: NodeId,
    pub log_var: NodeId,
    pub samples: Vec<NodeId>,
    pub epsilons: Vec<Tensor>,
}

fn as_batch(g: &mut Graph, x: NodeId) -> Result<NodeId, NumError> {
    match g.shape(x).len() {
        1 => {
            let n = g.shape(x)[0];
            g.reshape(x, &[1, n])
        }
        2 => Ok(x),
        _ => Err(NumError::ShapeMismatch {
            op: "latent",
            expected: vec![0, 0],
            got: g.shape(x).to_vec(),
        }),
    }
}

/// `mu = x W_mu + b_mu`, `log_var = clamp(x W_lv + b_lv)`; outputs are `[B, I]`.
pub fn encode(
    g: &mut Graph,
    nodes: &[NodeId],
    head: &LatentHead,
    x: NodeId,
) -> Result<(NodeId, NodeId), NumError> {
    let x = as_batch(g, x)?;
    if g.shape(x)[1] != head.in_dim {
        return Err(NumError::ShapeMismatch {
            op: "encode",
            expected: vec![g.shape(x)[0], head.in_dim],
            got: g.shape(x).to_vec(),
        });
    }
    let mu = g.matmul(x, nodes[head.w_mu.0])?;
    let mu = g.bias_add(mu, nodes[head.b_mu.0])?;
    let lv = g.matmul(x, nodes[head.w_log_var.0])?;
    let lv = g.bias_add(lv, nodes[head.b_log_var.0])?;
    let lv = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)?;
    Ok((mu, lv))
}

/// `z = mu + exp(log_var / 2) * eps`. `eps` enters as a constant.
pub fn reparameterize(
    g: &mut Graph,
    mu: NodeId,
    log_var: NodeId,
    eps: &Tensor,
) -> Result<NodeId, NumError> {
    if g.shape(mu) != g.shape(log_var) {
        return Err(NumError::ShapeMismatch {
            op: "reparameterize",
            expected: g.shape(mu).to_vec(),
            got: g.shape(log_var).to_vec(),
        });
    }
    if eps.numel() != g.value(mu).numel() {
        return Err(NumError::ShapeMismatch {
            op: "reparameterize",
            expected: g.shape(mu).to_vec(),
            got: eps.shape().to_vec(),
        });
    }
    let e = g.input(eps.reshape(g.shape(mu))?)?;
    let half = g.scale(log_var, 0.5)?;
    let sigma = g.exp(half)?;
    let noise = g.mul(sigma, e)?;
    g.add(mu, noise)
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Encodes `x` and draws one reparameterized sample per epsilon.
pub fn sample_code(
    g: &mut Graph,
    nodes: &[NodeId],
    head: &LatentHead,
    x: NodeId,
    epsilons: Vec<Tensor>,
) -> Result<LatentCode, NumError> {
    if epsilons.is_empty() {
        return Err(NumError::InvalidArgument(
            "at least one latent sample is required".into(),
        ));
    }
    let (mu, log_var) = encode(g, nodes, head, x)?;
    let samples = epsilons
        .iter()
        .map(|e| reparameterize(g, mu, log_var, e))
        .collect::<Result<_, _>>()?;
    Ok(LatentCode {
        mu,
        log_var,
        samples,
        epsilons,
    })
}

/// `KL(N(mu, diag exp(log_var)) || N(0, I))` per row: `-1/2 sum(1 + lv - mu^2 - exp(lv))`.
pub fn kl_standard_normal(g: &mut Graph, mu: NodeId, log_var: NodeId) -> Result<NodeId, NumError> {
    if g.shape(mu) != g.shape(log_var) {
        return Err(NumError::ShapeMismatch {
            op: "kl_standard_normal",
            expected: g.shape(mu).to_vec(),
            got: g.shape(log_var).to_vec(),
        });
    }
    let mu2 = g.mul(mu, mu)?;
    let var = g.exp(log_var)?;
    let a = g.add_const(log_var, 1.0)?;
    let a = g.sub(a, mu2)?;
    let a = g.sub(a, var)?;
    let s = g.sum_last(a)?;
    g.scale(s, -0.5)
}

/// Unit-variance Gaussian log-likelihood of `x` under `recon(z)`, averaged over samples:
/// `(1/L) sum_l [-1/2 ||x - recon(z_l)||^2] - (dim/2) ln 2pi`, one value per row.
pub fn reconstruction_loglik(
    g: &mut Graph,
    nodes: &[NodeId],
    recon: &ReconHead,
    x: NodeId,
    samples: &[NodeId],
) -> Result<NodeId, NumError> {
    if samples.is_empty() {
        return Err(NumError::InvalidArgument("no latent samples".into()));
    }
    let x = as_batch(g, x)?;
    let dim = g.shape(x)[1];
    if dim != recon.out_dim {
        return Err(NumError::ShapeMismatch {
            op: "reconstruction_loglik",
            expected: vec![g.shape(x)[0], recon.out_dim],
            got: g.shape(x).to_vec(),
        });
    }
    let mut total: Option<NodeId> = None;
    for &z in samples {
        let r = recon.forward(g, nodes, z)?;
        let d = g.sub(x, r)?;
        let d2 = g.mul(d, d)?;
        let s = g.sum_last(d2)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let sq = g.scale(total.expect("non-empty"), -0.5 / samples.len() as f64)?;
    g.add_const(sq, -0.5 * dim as f64 * LN_2PI)
}

/// Negative evidence lower bound per row: `KL - loglik`. Unweighted.
pub fn variational_loss(
    g: &mut Graph,
    nodes: &[NodeId],
    code: &LatentCode,
    recon: &ReconHead,
    x: NodeId,
) -> Result<NodeId, NumError> {
    let kl = kl_standard_normal(g, code.mu, code.log_var)?;
    let ll = reconstruction_loglik(g, nodes, recon, x, &code.samples)?;
    g.sub(kl, ll)
}
