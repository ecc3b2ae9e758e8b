use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Matrix, QFormerConfig, SublayerAddress, SublayerGroup};
use crate::adapters::{self, AdapterSet};
use crate::error::{Error, Result};
use crate::params::{Param, ParamKey};
use crate::scalar::Real;
use crate::tensor::{Graph, Tensor, Var};

/// What a parameter tensor is used for; decides initialization and decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    NormGain,
    NormShift,
    Embedding,
}

impl ParamRole {
    pub fn decays(self) -> bool {
        matches!(self, Self::Weight | Self::Embedding)
    }
}

/// Name and shape of one base parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIds {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIds {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub norm: NormIds,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfnIds {
    pub up: LinearIds,
    pub down: LinearIds,
    pub norm: NormIds,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerIds {
    pub self_attn: AttnIds,
    pub cross_attn: Option<AttnIds>,
    pub ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub specs: Vec<ParamSpec>,
    pub queries: usize,
    pub words: usize,
    pub positions: usize,
    pub embed_norm: NormIds,
    pub layers: Vec<LayerIds>,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, role: ParamRole) -> usize {
        self.specs.push(ParamSpec { name, shape, role });
        self.specs.len() - 1
    }

    /// Linear map stored PyTorch-style as `out × in`.
    fn linear(&mut self, prefix: &str, out_dim: usize, in_dim: usize) -> LinearIds {
        LinearIds {
            weight: self.push(format!("{prefix}.weight"), vec![out_dim, in_dim], ParamRole::Weight),
            bias: self.push(format!("{prefix}.bias"), vec![out_dim], ParamRole::Bias),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gamma: self.push(format!("{prefix}.norm.gamma"), vec![d], ParamRole::NormGain),
            beta: self.push(format!("{prefix}.norm.beta"), vec![d], ParamRole::NormShift),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize, kv_dim: usize) -> AttnIds {
        AttnIds {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, kv_dim),
            v: self.linear(&format!("{prefix}.v"), d, kv_dim),
            o: self.linear(&format!("{prefix}.o"), d, d),
            norm: self.norm(prefix, d),
        }
    }
}

pub(crate) fn build_layout(config: &QFormerConfig) -> Layout {
    let d = config.hidden_dim;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let queries = b.push(
        "query_embeddings".into(),
        vec![config.num_queries, d],
        ParamRole::Embedding,
    );
    let words = b.push(
        "text.word_embeddings".into(),
        vec![config.vocab_size, d],
        ParamRole::Embedding,
    );
    let positions = b.push(
        "text.position_embeddings".into(),
        vec![config.max_text_len.max(1), d],
        ParamRole::Embedding,
    );
    let embed_norm = b.norm("embeddings", d);
    let layers = (1..=config.num_layers)
        .map(|l| {
            let p = format!("L{l:02}");
            LayerIds {
                self_attn: b.attention(&format!("{p}.self_attn"), d, d),
                cross_attn: config
                    .has_cross_attention(l)
                    .then(|| b.attention(&format!("{p}.cross_attn"), d, config.image_dim)),
                ffn: FfnIds {
                    up: b.linear(&format!("{p}.ffn.up"), config.ffn_dim, d),
                    down: b.linear(&format!("{p}.ffn.down"), d, config.ffn_dim),
                    norm: b.norm(&format!("{p}.ffn"), d),
                },
            }
        })
        .collect();
    Layout {
        specs: b.specs,
        queries,
        words,
        positions,
        embed_norm,
        layers,
    }
}

/// Names and shapes of every Q-Former base parameter, without allocating.
pub fn parameter_layout(config: &QFormerConfig) -> Vec<ParamSpec> {
    build_layout(config).specs
}

/// `(out, in)` dimensions of the linear map at `addr`.
pub fn linear_dims(config: &QFormerConfig, addr: SublayerAddress) -> (usize, usize) {
    let d = config.hidden_dim;
    match (addr.group(), addr.matrix()) {
        (SublayerGroup::CrossAttn, Matrix::K | Matrix::V) => (d, config.image_dim),
        (SublayerGroup::Ffn, Matrix::Up) => (config.ffn_dim, d),
        (SublayerGroup::Ffn, Matrix::Down) => (d, config.ffn_dim),
        _ => (d, d),
    }
}

/// One example for the model: image features from the (frozen, external)
/// image encoder plus instruction token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInputs<T> {
    image_features: Tensor<T>,
    text_ids: Vec<usize>,
}

impl<T: Real> ModelInputs<T> {
    pub fn new(n_img: usize, image_dim: usize, features: Vec<T>, text_ids: Vec<usize>) -> Result<Self> {
        if n_img == 0 || image_dim == 0 {
            return Err(Error::Input("image features are empty".into()));
        }
        let image_features = Tensor::new(vec![n_img, image_dim], features)
            .map_err(|e| Error::Input(e.to_string()))?;
        Ok(Self {
            image_features,
            text_ids,
        })
    }

    pub fn image_features(&self) -> &Tensor<T> {
        &self.image_features
    }

    pub fn text_ids(&self) -> &[usize] {
        &self.text_ids
    }
}

/// Final hidden states of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `num_queries × hidden_dim`.
    pub queries: Var,
    /// `text_len × hidden_dim`, absent when no text was given.
    pub text: Option<Var>,
}

/// Multi-head scaled dot-product attention.
///
/// `project` applies the q/k/v/o linear maps (possibly adapted). Scores are
/// scaled by `1/sqrt(d / num_heads)` where `d` is the projected width.
pub fn attention<T: Real>(
    g: &mut Graph<T>,
    queries: Var,
    keys_values: Var,
    num_heads: usize,
    mut project: impl FnMut(&mut Graph<T>, Matrix, Var) -> Result<Var>,
) -> Result<Var> {
    let q = project(g, Matrix::Q, queries)?;
    let k = project(g, Matrix::K, keys_values)?;
    let v = project(g, Matrix::V, keys_values)?;
    let d = g.shape(q)[1];
    if g.shape(k)[1] != d || g.shape(v) != g.shape(k) || num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Shape(format!(
            "attention head split: q {:?}, k {:?}, v {:?}, {num_heads} heads",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    let dh = d / num_heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (qh, kh, vh) = if num_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let merged = if num_heads == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    project(g, Matrix::O, merged)
}

/// Miniature Q-Former with a mean-pool classification head.
#[derive(Clone, Debug)]
pub struct QFormer<T> {
    config: QFormerConfig,
    layout: Layout,
    params: Vec<Param<T>>,
    head: Vec<Param<T>>,
}

const HEAD_WEIGHT: usize = 0;
const HEAD_BIAS: usize = 1;

impl<T: Real> QFormer<T> {
    /// Randomly initialized model: Gaussian weights and embeddings, zero
    /// biases, unit layer-norm gains.
    pub fn new(config: QFormerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| Error::Config(format!("init_std: {e}")))?;
        let mut sample = |spec: &ParamSpec| -> Tensor<T> {
            match spec.role {
                ParamRole::Weight | ParamRole::Embedding => {
                    Tensor::from_fn(&spec.shape, |_| T::lit(normal.sample(&mut rng)))
                }
                ParamRole::NormGain => Tensor::full(&spec.shape, T::one()),
                ParamRole::Bias | ParamRole::NormShift => Tensor::zeros(&spec.shape),
            }
        };
        let params = layout
            .specs
            .iter()
            .map(|spec| Param::new(spec.name.clone(), sample(spec), spec.role.decays()))
            .collect();
        let head = vec![
            Param::new(
                "head.weight",
                sample(&ParamSpec {
                    name: String::new(),
                    shape: vec![config.num_classes, config.hidden_dim],
                    role: ParamRole::Weight,
                }),
                true,
            ),
            Param::new("head.bias", Tensor::zeros(&[config.num_classes]), false),
        ];
        Ok(Self {
            config,
            layout,
            params,
            head,
        })
    }

    pub fn config(&self) -> &QFormerConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn head_params(&self) -> &[Param<T>] {
        &self.head
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params
            .iter()
            .chain(&self.head)
            .find(|p| p.name == name)
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params
            .iter_mut()
            .chain(self.head.iter_mut())
            .find(|p| p.name == name)
    }

    /// Every tensor with its graph key: base parameters then the head.
    pub fn keyed_params(&self) -> impl Iterator<Item = (ParamKey, &Param<T>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamKey::Base(i), p))
            .chain(self.head.iter().enumerate().map(|(i, p)| (ParamKey::Head(i), p)))
    }

    pub fn keyed_params_mut(&mut self) -> impl Iterator<Item = (ParamKey, &mut Param<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamKey::Base(i), p))
            .chain(
                self.head
                    .iter_mut()
                    .enumerate()
                    .map(|(i, p)| (ParamKey::Head(i), p)),
            )
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Param<T>> {
        match key {
            ParamKey::Base(i) => self.params.get_mut(i),
            ParamKey::Head(i) => self.head.get_mut(i),
            ParamKey::Adapter(_) => None,
        }
    }

    /// Marks every Q-Former base parameter frozen (`false`) or trainable.
    pub fn set_base_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn set_head_trainable(&mut self, trainable: bool) {
        for p in &mut self.head {
            p.trainable = trainable;
        }
    }

    /// Element count of the Q-Former proper (query embeddings included,
    /// classification head excluded).
    pub fn base_param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    fn linear_ids(&self, addr: SublayerAddress) -> Result<LinearIds> {
        let layer = self
            .layout
            .layers
            .get(addr.layer().wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("no layer for address {addr}")))?;
        let attn = |a: &AttnIds| match addr.matrix() {
            Matrix::Q => Some(a.q),
            Matrix::K => Some(a.k),
            Matrix::V => Some(a.v),
            Matrix::O => Some(a.o),
            _ => None,
        };
        let ids = match addr.group() {
            SublayerGroup::SelfAttn => attn(&layer.self_attn),
            SublayerGroup::CrossAttn => layer.cross_attn.as_ref().and_then(attn),
            SublayerGroup::Ffn => match addr.matrix() {
                Matrix::Up => Some(layer.ffn.up),
                Matrix::Down => Some(layer.ffn.down),
                _ => None,
            },
        };
        ids.ok_or_else(|| Error::Config(format!("address {addr} does not exist in this model")))
    }

    /// Base weight (`out × in`) of the linear map at `addr`.
    pub fn linear_weight(&self, addr: SublayerAddress) -> Result<&Tensor<T>> {
        Ok(&self.params[self.linear_ids(addr)?.weight].tensor)
    }

    pub fn linear_bias(&self, addr: SublayerAddress) -> Result<&Tensor<T>> {
        Ok(&self.params[self.linear_ids(addr)?.bias].tensor)
    }

    /// Replaces the base weight at `addr`; the shape must match.
    pub fn set_linear_weight(&mut self, addr: SublayerAddress, weight: Tensor<T>) -> Result<()> {
        let id = self.linear_ids(addr)?.weight;
        let slot = &mut self.params[id].tensor;
        if slot.shape() != weight.shape() {
            return Err(Error::Shape(format!(
                "replacement for {addr} has shape {:?}, expected {:?}",
                weight.shape(),
                slot.shape()
            )));
        }
        *slot = weight;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut().chain(self.head.iter_mut()) {
            p.tensor.zero_grad();
        }
    }

    fn bind(&self, g: &mut Graph<T>, id: usize) -> Var {
        let p = &self.params[id];
        g.bind(ParamKey::Base(id), &p.tensor, p.trainable)
    }

    fn project(
        &self,
        g: &mut Graph<T>,
        addr: SublayerAddress,
        x: Var,
        adapters: Option<&AdapterSet<T>>,
    ) -> Result<Var> {
        let ids = self.linear_ids(addr)?;
        let w = self.bind(g, ids.weight);
        let b = self.bind(g, ids.bias);
        match adapters.and_then(|set| set.get(addr).map(|a| (set, a))) {
            Some((set, adapter)) => set.adapted_linear(g, adapter, x, w, b),
            None => adapters::base_linear(g, x, w, b),
        }
    }

    fn norm(&self, g: &mut Graph<T>, ids: NormIds, x: Var) -> Result<Var> {
        let gamma = self.bind(g, ids.gamma);
        let beta = self.bind(g, ids.beta);
        g.layer_norm(x, gamma, beta, T::lit(self.config.layer_norm_eps))
    }

    fn check_inputs(&self, inputs: &ModelInputs<T>) -> Result<()> {
        let (n_img, dim) = inputs.image_features.dims2()?;
        if n_img == 0 {
            return Err(Error::Input("image features are empty".into()));
        }
        if dim != self.config.image_dim {
            return Err(Error::Input(format!(
                "image features have width {dim}, model expects {}",
                self.config.image_dim
            )));
        }
        if inputs.text_ids.len() > self.config.max_text_len {
            return Err(Error::Input(format!(
                "text of {} tokens exceeds max_text_len {}",
                inputs.text_ids.len(),
                self.config.max_text_len
            )));
        }
        if let Some(bad) = inputs.text_ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the layer stack. Queries and text tokens share self-attention;
    /// only query positions pass through cross-attention.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        inputs: &ModelInputs<T>,
        adapters: Option<&AdapterSet<T>>,
    ) -> Result<ForwardOutput> {
        self.check_inputs(inputs)?;
        let nq = self.config.num_queries;
        let nt = inputs.text_ids.len();
        let heads = self.config.num_heads;

        let queries = self.bind(g, self.layout.queries);
        let mut x = if nt > 0 {
            let words = self.bind(g, self.layout.words);
            let positions = self.bind(g, self.layout.positions);
            let tok = g.gather_rows(words, &inputs.text_ids)?;
            let pos_ids: Vec<usize> = (0..nt).collect();
            let pos = g.gather_rows(positions, &pos_ids)?;
            let text = g.add(tok, pos)?;
            g.concat_rows(&[queries, text])?
        } else {
            queries
        };
        x = self.norm(g, self.layout.embed_norm, x)?;
        let image = g.constant(&inputs.image_features);

        for (li, ids) in self.layout.layers.iter().enumerate() {
            let layer = li + 1;
            let addr = |group, m| SublayerAddress::unchecked(layer, group, m);

            let sa = attention(g, x, x, heads, |g, m, h| {
                self.project(g, addr(SublayerGroup::SelfAttn, m), h, adapters)
            })?;
            let res = g.add(x, sa)?;
            x = self.norm(g, ids.self_attn.norm, res)?;

            if let Some(cross) = &ids.cross_attn {
                let q_part = if nt > 0 { g.slice_rows(x, 0, nq)? } else { x };
                let ca = attention(g, q_part, image, heads, |g, m, h| {
                    self.project(g, addr(SublayerGroup::CrossAttn, m), h, adapters)
                })?;
                let res = g.add(q_part, ca)?;
                let q_part = self.norm(g, cross.norm, res)?;
                x = if nt > 0 {
                    let text = g.slice_rows(x, nq, nt)?;
                    g.concat_rows(&[q_part, text])?
                } else {
                    q_part
                };
            }

            let h = self.project(g, addr(SublayerGroup::Ffn, Matrix::Up), x, adapters)?;
            let h = g.gelu(h);
            let h = self.project(g, addr(SublayerGroup::Ffn, Matrix::Down), h, adapters)?;
            let res = g.add(x, h)?;
            x = self.norm(g, ids.ffn.norm, res)?;
        }

        if nt > 0 {
            Ok(ForwardOutput {
                queries: g.slice_rows(x, 0, nq)?,
                text: Some(g.slice_rows(x, nq, nt)?),
            })
        } else {
            Ok(ForwardOutput {
                queries: x,
                text: None,
            })
        }
    }

    /// Mean-pools query states and applies the linear classifier (`1 × C`).
    pub fn classification_head(&self, g: &mut Graph<T>, query_outputs: Var) -> Result<Var> {
        let w = &self.head[HEAD_WEIGHT];
        let b = &self.head[HEAD_BIAS];
        let w = g.bind(ParamKey::Head(HEAD_WEIGHT), &w.tensor, w.trainable);
        let b = g.bind(ParamKey::Head(HEAD_BIAS), &b.tensor, b.trainable);
        let pooled = g.mean_rows(query_outputs)?;
        let logits = g.matmul_t(pooled, w)?;
        g.add_bias(logits, b)
    }

    /// Forward pass plus head.
    pub fn logits(
        &self,
        g: &mut Graph<T>,
        inputs: &ModelInputs<T>,
        adapters: Option<&AdapterSet<T>>,
    ) -> Result<Var> {
        let out = self.forward(g, inputs, adapters)?;
        self.classification_head(g, out.queries)
    }

    /// Adds gradients of every bound, trainable base/head tensor.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, grads: &crate::tensor::Gradients<T>) -> Result<()> {
        for &(key, var) in g.bound_params() {
            if let (Some(p), Some(gr)) = (self.param_mut(key), grads.get(var)) {
                if p.trainable {
                    p.tensor.accumulate_grad(gr)?;
                }
            }
        }
        Ok(())
    }

    /// Named tensors for checkpointing (base then head).
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params
            .iter()
            .chain(&self.head)
            .map(|p| (p.name.as_str(), &p.tensor))
    }
}
