use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};

use crate::latentspace::{self, LatentCode, LatentHead, ReconHead};
use crate::numcore::{softplus, Graph, NodeId, NumError, ParamId, ParamSet, Tensor};

/// Feature extractor shape. `Conv` consumes `[C, side, side]` images;
/// `Mlp` consumes flat vectors and exists for tiny gradient-check fixtures.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Arch {
    Conv {
        in_channels: usize,
        side: usize,
        enc_channels: [usize; 3],
        /// channels and side of the grid the decoder unflattens `z` into
        dec_grid: (usize, usize),
        dec_channels: [usize; 2],
    },
    Mlp {
        in_dim: usize,
        hidden: usize,
    },
}

impl Arch {
    pub fn conv(in_channels: usize, side: usize) -> Self {
        Arch::Conv {
            in_channels,
            side,
            enc_channels: [16, 32, 64],
            dec_grid: (16, 4),
            dec_channels: [32, 64],
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Arch::Conv {
                in_channels, side, ..
            } => vec![*in_channels, *side, *side],
            Arch::Mlp { in_dim, .. } => vec![*in_dim],
        }
    }

    /// Width of the flattened encoder output fed to the latent head.
    pub fn encoder_dim(&self) -> usize {
        match self {
            Arch::Conv {
                side, enc_channels, ..
            } => {
                let s = side / 8;
                enc_channels[2] * s * s
            }
            Arch::Mlp { hidden, .. } => *hidden,
        }
    }

    /// Width of the classification features.
    pub fn feature_dim(&self) -> usize {
        match self {
            Arch::Conv { dec_channels, .. } => dec_channels[1],
            Arch::Mlp { hidden, .. } => *hidden,
        }
    }

    fn validate(&self) -> Result<(), NumError> {
        match self {
            Arch::Conv {
                in_channels,
                side,
                enc_channels,
                dec_grid,
                dec_channels,
            } => {
                if *in_channels == 0
                    || *side < 8
                    || enc_channels.contains(&0)
                    || dec_channels.contains(&0)
                {
                    return Err(NumError::InvalidArgument(format!(
                        "conv architecture needs positive channels and side >= 8, got {self:?}"
                    )));
                }
                if dec_grid.0 == 0 || dec_grid.1 == 0 {
                    return Err(NumError::InvalidArgument(
                        "decoder grid must be positive".into(),
                    ));
                }
            }
            Arch::Mlp { in_dim, hidden } => {
                if *in_dim == 0 || *hidden == 0 {
                    return Err(NumError::InvalidArgument(
                        "mlp widths must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub latent_dim: usize,
    pub recon_hidden: usize,
}

impl ModelConfig {
    pub fn conv(in_channels: usize, side: usize, latent_dim: usize) -> Self {
        Self {
            arch: Arch::conv(in_channels, side),
            latent_dim,
            recon_hidden: 64,
        }
    }

    pub fn mlp(in_dim: usize, hidden: usize, latent_dim: usize) -> Self {
        Self {
            arch: Arch::Mlp { in_dim, hidden },
            latent_dim,
            recon_hidden: hidden,
        }
    }

    pub fn validate(&self) -> Result<(), NumError> {
        self.arch.validate()?;
        if self.latent_dim == 0 || self.recon_hidden == 0 {
            return Err(NumError::InvalidArgument(
                "latent_dim and recon_hidden must be positive".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn to_meta(&self, meta: &mut BTreeMap<String, String>) {
        meta.insert(
            "model".into(),
            serde_json::to_string(self).expect("model config serializes"),
        );
    }

    pub(crate) fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self, NumError> {
        let text = meta
            .get("model")
            .ok_or_else(|| NumError::Checkpoint("missing meta key model".into()))?;
        serde_json::from_str(text)
            .map_err(|e| NumError::Checkpoint(format!("bad model config: {e}")))
    }
}

/// Initial values of the learnable scalars.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScalarInit {
    pub lambda: f64,
    pub varphi: f64,
    pub beta: f64,
}

impl Default for ScalarInit {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            varphi: 1.0,
            beta: 0.1,
        }
    }
}

/// Inverse of softplus, for storing a positive value in raw form.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

/// All meta-learned quantities: encoder (feature stack and latent head),
/// decoder (z to classification features) with its reconstruction head, and
/// the raw, softplus-stored inner learning rate, logit scale and ELBO weight.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaParams {
    pub config: ModelConfig,
    pub params: ParamSet,
    encoder: Vec<Layer>,
    pub head: LatentHead,
    dec_in: Layer,
    decoder: Vec<Layer>,
    pub recon: ReconHead,
    lambda_raw: ParamId,
    varphi_raw: ParamId,
    beta_raw: ParamId,
}

fn layer<R: Rng + ?Sized>(
    params: &mut ParamSet,
    name: &str,
    w_shape: &[usize],
    fan_in: usize,
    bias: usize,
    rng: &mut R,
) -> Layer {
    Layer {
        w: params.add(
            format!("{name}.w"),
            Tensor::fan_in_uniform(w_shape, fan_in, rng),
        ),
        b: params.add(format!("{name}.b"), Tensor::zeros(&[bias])),
    }
}

impl MetaParams {
    pub fn init<R: Rng + ?Sized>(
        config: &ModelConfig,
        scalars: &ScalarInit,
        rng: &mut R,
    ) -> Result<Self, NumError> {
        config.validate()?;
        for (name, v) in [("lambda", scalars.lambda), ("varphi", scalars.varphi)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(NumError::InvalidArgument(format!(
                    "initial {name} must be positive, got {v}"
                )));
            }
        }
        if !(scalars.beta >= 0.0 && scalars.beta.is_finite()) {
            return Err(NumError::InvalidArgument(format!(
                "initial beta must be >= 0, got {}",
                scalars.beta
            )));
        }
        let mut p = ParamSet::new();
        let (encoder, dec_in, decoder) = match &config.arch {
            Arch::Conv {
                in_channels,
                enc_channels,
                dec_grid,
                dec_channels,
                ..
            } => {
                let mut enc = vec![];
                let mut c_in = *in_channels;
                for (i, &c) in enc_channels.iter().enumerate() {
                    enc.push(layer(
                        &mut p,
                        &format!("enc.conv{i}"),
                        &[c, c_in, 3, 3],
                        c_in * 9,
                        c,
                        rng,
                    ));
                    c_in = c;
                }
                let (gc, gs) = *dec_grid;
                let grid = gc * gs * gs;
                let dec_in = layer(
                    &mut p,
                    "dec.in",
                    &[config.latent_dim, grid],
                    config.latent_dim,
                    grid,
                    rng,
                );
                let mut dec = vec![];
                let mut c_in = gc;
                for (i, &c) in dec_channels.iter().enumerate() {
                    dec.push(layer(
                        &mut p,
                        &format!("dec.conv{i}"),
                        &[c, c_in, 3, 3],
                        c_in * 9,
                        c,
                        rng,
                    ));
                    c_in = c;
                }
                (enc, dec_in, dec)
            }
            Arch::Mlp { in_dim, hidden } => {
                let enc = vec![layer(
                    &mut p,
                    "enc.fc0",
                    &[*in_dim, *hidden],
                    *in_dim,
                    *hidden,
                    rng,
                )];
                let dec_in = layer(
                    &mut p,
                    "dec.in",
                    &[config.latent_dim, *hidden],
                    config.latent_dim,
                    *hidden,
                    rng,
                );
                (enc, dec_in, vec![])
            }
        };
        let head = LatentHead::init(
            &mut p,
            "latent",
            config.arch.encoder_dim(),
            config.latent_dim,
            rng,
        );
        let recon = ReconHead::init(
            &mut p,
            "recon",
            config.latent_dim,
            config.recon_hidden,
            config.arch.encoder_dim(),
            rng,
        );
        let lambda_raw = p.add(
            "meta.lambda_raw",
            Tensor::scalar(softplus_inv(scalars.lambda)),
        );
        let varphi_raw = p.add(
            "meta.varphi_raw",
            Tensor::scalar(softplus_inv(scalars.varphi)),
        );
        // softplus_inv(0) is -inf; clamp so beta = 0 stays representable
        let beta_raw = p.add(
            "meta.beta_raw",
            Tensor::scalar(softplus_inv(scalars.beta.max(1e-30))),
        );
        Ok(Self {
            config: config.clone(),
            params: p,
            encoder,
            head,
            dec_in,
            decoder,
            recon,
            lambda_raw,
            varphi_raw,
            beta_raw,
        })
    }

    /// Rebuilds the layout for `config` and fills it from `params`, which
    /// must carry the same names and shapes.
    pub fn from_params(config: &ModelConfig, params: ParamSet) -> Result<Self, NumError> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut mp = Self::init(config, &ScalarInit::default(), &mut rng)?;
        mp.params.assign(&params)?;
        Ok(mp)
    }

    fn scalar(&self, id: ParamId) -> f64 {
        softplus(self.params.get(id).data()[0])
    }

    pub fn lambda(&self) -> f64 {
        self.scalar(self.lambda_raw)
    }

    pub fn varphi(&self) -> f64 {
        self.scalar(self.varphi_raw)
    }

    pub fn beta(&self) -> f64 {
        self.scalar(self.beta_raw)
    }

    pub fn lambda_id(&self) -> ParamId {
        self.lambda_raw
    }

    pub fn varphi_id(&self) -> ParamId {
        self.varphi_raw
    }

    pub fn beta_id(&self) -> ParamId {
        self.beta_raw
    }

    /// Encoder parameter ids (feature stack and latent head).
    pub fn encoder_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.encoder.iter().flat_map(|l| [l.w, l.b]).collect();
        ids.extend([
            self.head.w_mu,
            self.head.b_mu,
            self.head.w_log_var,
            self.head.b_log_var,
        ]);
        ids
    }

    /// Sets the stored raw value so that the positive scalar equals `value`.
    pub fn set_beta(&mut self, value: f64) {
        self.params.get_mut(self.beta_raw).data_mut()[0] = softplus_inv(value.max(1e-30));
    }

    pub fn set_lambda(&mut self, value: f64) {
        self.params.get_mut(self.lambda_raw).data_mut()[0] = softplus_inv(value);
    }

    pub fn set_varphi(&mut self, value: f64) {
        self.params.get_mut(self.varphi_raw).data_mut()[0] = softplus_inv(value);
    }
}

/// Positive scalars placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ScalarNodes {
    pub lambda: NodeId,
    pub varphi: NodeId,
    pub beta: NodeId,
}

pub fn scalar_nodes(
    g: &mut Graph,
    nodes: &[NodeId],
    mp: &MetaParams,
) -> Result<ScalarNodes, NumError> {
    Ok(ScalarNodes {
        lambda: g.softplus(nodes[mp.lambda_raw.0])?,
        varphi: g.softplus(nodes[mp.varphi_raw.0])?,
        beta: g.softplus(nodes[mp.beta_raw.0])?,
    })
}

/// Noise source for the latent samples.
pub enum Noise<'a, R: Rng + ?Sized> {
    /// `eps = 0`: `z = mu`, deterministic evaluation path.
    Zero,
    Sample {
        rng: &'a mut R,
        count: usize,
    },
}

pub struct Embedding {
    /// Classification features `[B, feature_dim]`.
    pub features: NodeId,
    /// Flattened encoder output `[B, encoder_dim]`, the reconstruction target.
    pub encoded: NodeId,
    pub code: LatentCode,
}

/// Encoder stack, latent head, reparameterization, then the decoder from
/// the first latent sample to classification features.
pub fn embed<R: Rng + ?Sized>(
    g: &mut Graph,
    nodes: &[NodeId],
    mp: &MetaParams,
    x: &Tensor,
    noise: Noise<'_, R>,
) -> Result<Embedding, NumError> {
    let expect = mp.config.arch.input_shape();
    if x.ndim() != expect.len() + 1 || x.shape()[1..] != expect[..] {
        return Err(NumError::ShapeMismatch {
            op: "embed",
            expected: [&[x.shape()[0]][..], &expect].concat(),
            got: x.shape().to_vec(),
        });
    }
    let batch = x.shape()[0];
    let xi = g.input(x.clone())?;
    let encoded = match &mp.config.arch {
        Arch::Conv { .. } => {
            let mut h = xi;
            for l in &mp.encoder {
                h = g.conv2d(h, nodes[l.w.0], 1, 1)?;
                h = g.bias_add(h, nodes[l.b.0])?;
                h = g.relu(h)?;
                h = g.max_pool2(h)?;
            }
            g.reshape(h, &[batch, mp.config.arch.encoder_dim()])?
        }
        Arch::Mlp { .. } => {
            let l = &mp.encoder[0];
            let h = g.matmul(xi, nodes[l.w.0])?;
            let h = g.bias_add(h, nodes[l.b.0])?;
            g.relu(h)?
        }
    };
    let shape = [batch, mp.config.latent_dim];
    let eps = match noise {
        Noise::Zero => vec![Tensor::zeros(&shape)],
        Noise::Sample { rng, count } => (0..count.max(1))
            .map(|_| latentspace::standard_normal(&shape, rng))
            .collect(),
    };
    let code = latentspace::sample_code(g, nodes, &mp.head, encoded, eps)?;
    let z = code.samples[0];
    let d = g.matmul(z, nodes[mp.dec_in.w.0])?;
    let d = g.bias_add(d, nodes[mp.dec_in.b.0])?;
    let d = g.relu(d)?;
    let features = match &mp.config.arch {
        Arch::Conv { dec_grid, .. } => {
            let (gc, gs) = *dec_grid;
            let mut h = g.reshape(d, &[batch, gc, gs, gs])?;
            for l in &mp.decoder {
                h = g.conv2d(h, nodes[l.w.0], 1, 1)?;
                h = g.bias_add(h, nodes[l.b.0])?;
                h = g.relu(h)?;
            }
            g.global_avg_pool(h)?
        }
        Arch::Mlp { .. } => d,
    };
    Ok(Embedding {
        features,
        encoded,
        code,
    })
}
