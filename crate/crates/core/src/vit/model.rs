use rand::RngCore;
use rand_distr::{Distribution, Normal};

use super::{patchify, Activation, ModelError, Result, ViTConfig};
use crate::rng::stream;
use crate::tensor::{cst, Element, Graph, ParamId, ParamStore, Tensor, Var};

const INIT_STREAM: u64 = 0x1417;
const INIT_STD: f64 = 0.02;

/// Whether dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_training(self) -> bool {
        self == Mode::Train
    }
}

type Affine = (ParamId, ParamId);

#[derive(Debug, Clone)]
pub struct EncoderLayerIds {
    pub norm1: Affine,
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub out: Affine,
    pub norm2: Affine,
    pub mlp: Vec<Affine>,
}

/// Attention probabilities recorded during a forward pass, one
/// `[B, heads, N, N]` node per encoder layer.
#[derive(Debug, Default)]
pub struct ForwardTrace {
    pub attention: Vec<Var>,
}

/// Parameter scalars per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub patch_projection: usize,
    pub position_embedding: usize,
    pub encoder: usize,
    pub final_norm: usize,
    /// Hidden dense layers of the classification head.
    pub head: usize,
    pub output: usize,
    pub total: usize,
}

/// Canonical parameter names and shapes, in storage order.
pub fn param_shapes(cfg: &ViTConfig) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    let d = cfg.projection_dim;
    let mut out = Vec::new();
    let dense = |out: &mut Vec<(String, Vec<usize>)>, name: String, i: usize, o: usize| {
        out.push((format!("{name}.weight"), vec![i, o]));
        out.push((format!("{name}.bias"), vec![o]));
    };
    dense(&mut out, "patch".into(), cfg.patch_dim(), d);
    out.push(("position".into(), vec![cfg.num_patches(), d]));
    for l in 0..cfg.num_layers {
        let p = format!("layer{l}");
        out.push((format!("{p}.norm1.gain"), vec![d]));
        out.push((format!("{p}.norm1.bias"), vec![d]));
        for part in ["query", "key", "value", "out"] {
            dense(&mut out, format!("{p}.attn.{part}"), d, d);
        }
        out.push((format!("{p}.norm2.gain"), vec![d]));
        out.push((format!("{p}.norm2.bias"), vec![d]));
        let mut width = d;
        for (j, &h) in cfg.encoder_mlp_dims.iter().enumerate() {
            dense(&mut out, format!("{p}.mlp{j}"), width, h);
            width = h;
        }
    }
    out.push(("final_norm.gain".into(), vec![d]));
    out.push(("final_norm.bias".into(), vec![d]));
    let mut width = cfg.num_patches() * d;
    for (j, &h) in cfg.head_dims.iter().enumerate() {
        dense(&mut out, format!("head{j}"), width, h);
        width = h;
    }
    dense(&mut out, "output".into(), width, cfg.num_classes);
    Ok(out)
}

/// Parameter count of `cfg`, read off its parameter layout.
pub fn count_parameters(cfg: &ViTConfig) -> Result<ParamCount> {
    let mut c = ParamCount {
        patch_projection: 0,
        position_embedding: 0,
        encoder: 0,
        final_norm: 0,
        head: 0,
        output: 0,
        total: 0,
    };
    for (name, shape) in param_shapes(cfg)? {
        let n: usize = shape.iter().product();
        let prefix = name.split('.').next().unwrap_or_default();
        let slot = match prefix {
            "patch" => &mut c.patch_projection,
            "position" => &mut c.position_embedding,
            "final_norm" => &mut c.final_norm,
            "output" => &mut c.output,
            p if p.starts_with("layer") => &mut c.encoder,
            _ => &mut c.head,
        };
        *slot += n;
        c.total += n;
    }
    Ok(c)
}

/// Parameter handles for one model configuration. The values themselves
/// live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct VisionTransformer {
    config: ViTConfig,
    patch: Affine,
    position: ParamId,
    layers: Vec<EncoderLayerIds>,
    final_norm: Affine,
    head: Vec<Affine>,
    output: Affine,
}

fn truncated_normal(rng: &mut impl rand::Rng, normal: &Normal<f64>, limit: f64) -> f64 {
    loop {
        let v = normal.sample(rng);
        if v.abs() <= limit {
            return v;
        }
    }
}

impl VisionTransformer {
    /// Fresh parameters: weights and the position table from a normal with
    /// σ = 0.02 truncated at 2σ, biases zero, norm gains one. Each tensor
    /// draws from its own stream, so changing one layer's size leaves the
    /// others' initial values unchanged.
    pub fn init<T: Element>(config: &ViTConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut store = ParamStore::new();
        for (i, (name, shape)) in param_shapes(config)?.into_iter().enumerate() {
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name.ends_with(".gain") {
                Tensor::ones(&shape)
            } else {
                let mut rng = stream(seed, &[INIT_STREAM, i as u64]);
                Tensor::from_fn(&shape, |_| cst(truncated_normal(&mut rng, &normal, 2.0 * INIT_STD)))
            };
            store.insert(name, tensor)?;
        }
        let model = Self::from_store(config, &store)?;
        Ok((model, store))
    }

    /// Resolves handles in an existing store, checking every name and shape.
    pub fn from_store<T: Element>(config: &ViTConfig, store: &ParamStore<T>) -> Result<Self> {
        let shapes = param_shapes(config)?;
        for (name, expected) in &shapes {
            let id = store.find(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            let actual = store.get(id).shape();
            if actual != expected.as_slice() {
                return Err(ModelError::ParamShape { name: name.clone(), expected: expected.clone(), actual: actual.to_vec() });
            }
        }
        let id = |name: &str| store.find(name).expect("checked above");
        let affine = |prefix: &str| (id(&format!("{prefix}.weight")), id(&format!("{prefix}.bias")));
        let norm = |prefix: &str| (id(&format!("{prefix}.gain")), id(&format!("{prefix}.bias")));
        let layers = (0..config.num_layers)
            .map(|l| {
                let p = format!("layer{l}");
                EncoderLayerIds {
                    norm1: norm(&format!("{p}.norm1")),
                    query: affine(&format!("{p}.attn.query")),
                    key: affine(&format!("{p}.attn.key")),
                    value: affine(&format!("{p}.attn.value")),
                    out: affine(&format!("{p}.attn.out")),
                    norm2: norm(&format!("{p}.norm2")),
                    mlp: (0..config.encoder_mlp_dims.len()).map(|j| affine(&format!("{p}.mlp{j}"))).collect(),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            patch: affine("patch"),
            position: id("position"),
            layers,
            final_norm: norm("final_norm"),
            head: (0..config.head_dims.len()).map(|j| affine(&format!("head{j}"))).collect(),
            output: affine("output"),
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn layers(&self) -> &[EncoderLayerIds] {
        &self.layers
    }

    pub fn position_id(&self) -> ParamId {
        self.position
    }

    fn dense<T: Element>(&self, g: &Graph<'_, T>, params: &[Var], x: Var, (w, b): Affine) -> Result<Var> {
        Ok(g.linear(x, params[w.0], Some(params[b.0]))?)
    }

    fn activate<T: Element>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        match self.config.activation {
            Activation::Gelu => g.gelu(x),
            Activation::Relu => g.relu(x),
        }
    }

    fn norm<T: Element>(&self, g: &Graph<'_, T>, params: &[Var], x: Var, (gain, bias): Affine) -> Result<Var> {
        Ok(g.layernorm(x, params[gain.0], params[bias.0], self.config.layernorm_eps)?)
    }

    /// Projects `[B, N, P²C]` patches to `[B, N, D]` and adds the position
    /// table.
    pub fn embed<T: Element>(&self, g: &Graph<'_, T>, params: &[Var], patches: Var) -> Result<Var> {
        let x = self.dense(g, params, patches, self.patch)?;
        Ok(g.add(x, params[self.position.0])?)
    }

    /// Multi-head self-attention over `[B, N, D]`. Returns the projected
    /// output and the `[B, heads, N, N]` attention probabilities.
    pub fn attention<T: Element>(&self, g: &Graph<'_, T>, params: &[Var], layer: usize, x: Var) -> Result<(Var, Var)> {
        let ids = &self.layers[layer];
        let shape = g.shape(x);
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let heads = self.config.num_heads;
        let dh = d / heads;
        let split = |ids: Affine| -> Result<Var> {
            let y = self.dense(g, params, x, ids)?;
            let y = g.reshape(y, &[b, n, heads, dh])?;
            Ok(g.permute(y, &[0, 2, 1, 3])?)
        };
        let (q, k, v) = (split(ids.query)?, split(ids.key)?, split(ids.value)?);
        // scaling q instead of the N×N scores is N/dh times cheaper
        let q = g.scale(q, cst(1.0 / (dh as f64).sqrt()));
        let scores = g.batch_matmul(q, k, true)?;
        let probs = g.softmax(scores, 3)?;
        let ctx = g.batch_matmul(probs, v, false)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, n, d])?;
        Ok((self.dense(g, params, ctx, ids.out)?, probs))
    }

    /// One pre-norm encoder layer:
    /// `y = x + Dropout(MHSA(LN(x)))`, `out = y + MLP(LN(y))`.
    pub fn encoder_layer<T: Element>(
        &self,
        g: &Graph<'_, T>,
        params: &[Var],
        layer: usize,
        x: Var,
        mode: Mode,
        rng: &mut dyn RngCore,
        trace: Option<&mut ForwardTrace>,
    ) -> Result<Var> {
        let ids = &self.layers[layer];
        let training = mode.is_training();
        let rate = self.config.dropout_rate;
        let h = self.norm(g, params, x, ids.norm1)?;
        let (a, probs) = self.attention(g, params, layer, h)?;
        if let Some(t) = trace {
            t.attention.push(probs);
        }
        let a = g.dropout(a, rate, rng, training)?;
        let y = g.add(x, a)?;
        let mut h = self.norm(g, params, y, ids.norm2)?;
        for &dense in &ids.mlp {
            h = self.dense(g, params, h, dense)?;
            h = self.activate(g, h);
            h = g.dropout(h, rate, rng, training)?;
        }
        Ok(g.add(y, h)?)
    }

    /// Runs every encoder layer over `[B, N, D]` tokens.
    pub fn encode<T: Element>(
        &self,
        g: &Graph<'_, T>,
        params: &[Var],
        tokens: Var,
        mode: Mode,
        rng: &mut dyn RngCore,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Var> {
        let mut x = tokens;
        for l in 0..self.layers.len() {
            x = self.encoder_layer(g, params, l, x, mode, rng, trace.as_deref_mut())?;
        }
        Ok(x)
    }

    /// Final norm, flatten, dropout, hidden dense layers and the logit layer.
    pub fn classify<T: Element>(&self, g: &Graph<'_, T>, params: &[Var], encoded: Var, mode: Mode, rng: &mut dyn RngCore) -> Result<Var> {
        let training = mode.is_training();
        let rate = self.config.head_dropout_rate;
        let shape = g.shape(encoded);
        let x = self.norm(g, params, encoded, self.final_norm)?;
        let x = g.reshape(x, &[shape[0], shape[1] * shape[2]])?;
        let mut x = g.dropout(x, rate, rng, training)?;
        for &dense in &self.head {
            x = self.dense(g, params, x, dense)?;
            x = self.activate(g, x);
            x = g.dropout(x, rate, rng, training)?;
        }
        self.dense(g, params, x, self.output)
    }

    /// `[B, H, W, C]` images to `[B, classes]` logits.
    pub fn forward<T: Element>(&self, g: &Graph<'_, T>, params: &[Var], images: &Tensor<T>, mode: Mode, rng: &mut dyn RngCore) -> Result<Var> {
        self.forward_inner(g, params, images, mode, rng, None)
    }

    /// [`forward`](Self::forward), also returning each layer's attention
    /// probabilities.
    pub fn forward_traced<T: Element>(
        &self,
        g: &Graph<'_, T>,
        params: &[Var],
        images: &Tensor<T>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Var, ForwardTrace)> {
        let mut trace = ForwardTrace::default();
        let logits = self.forward_inner(g, params, images, mode, rng, Some(&mut trace))?;
        Ok((logits, trace))
    }

    fn forward_inner<T: Element>(
        &self,
        g: &Graph<'_, T>,
        params: &[Var],
        images: &Tensor<T>,
        mode: Mode,
        rng: &mut dyn RngCore,
        trace: Option<&mut ForwardTrace>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let expected = [cfg.image.height, cfg.image.width, cfg.image.channels];
        if images.rank() != 4 || images.shape()[1..] != expected {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "vit forward",
                lhs: images.shape().to_vec(),
                rhs: expected.to_vec(),
            }
            .into());
        }
        let patches = g.leaf(patchify(images, cfg.patch_size)?);
        let tokens = self.embed(g, params, patches)?;
        let encoded = self.encode(g, params, tokens, mode, rng, trace)?;
        self.classify(g, params, encoded, mode, rng)
    }
}
