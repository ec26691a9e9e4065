use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Activation, BatchNormCache, BN_MOMENTUM, KERNEL};
use super::optim::OptimizerId;
use super::tensor::{Real, Tensor};
use super::NnError;
use crate::seed::mix_seed;

/// Height, width, channels of one sample.
pub type Shape3 = [usize; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    Maxpool2x2,
    Upsample2x,
    Dense,
    Batchnorm,
    Dropout,
    OutputConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub kind: LayerKind,
    /// Filters for convolutions, units for dense layers; ignored otherwise.
    pub filters_or_units: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
    /// Spatial size an upsample is cropped or zero-padded to.
    pub target_hw: Option<(usize, usize)>,
}

impl LayerDescriptor {
    fn plain(kind: LayerKind) -> Self {
        Self {
            kind,
            filters_or_units: 0,
            activation: Activation::Linear,
            dropout_rate: 0.0,
            target_hw: None,
        }
    }

    pub fn conv(filters: usize, activation: Activation) -> Self {
        Self {
            filters_or_units: filters,
            activation,
            ..Self::plain(LayerKind::Conv2d)
        }
    }

    pub fn output_conv(channels: usize) -> Self {
        Self {
            filters_or_units: channels,
            activation: Activation::Sigmoid,
            ..Self::plain(LayerKind::OutputConv)
        }
    }

    pub fn dense(units: usize, activation: Activation) -> Self {
        Self {
            filters_or_units: units,
            activation,
            ..Self::plain(LayerKind::Dense)
        }
    }

    pub fn maxpool() -> Self {
        Self::plain(LayerKind::Maxpool2x2)
    }

    pub fn upsample(target_hw: Option<(usize, usize)>) -> Self {
        Self {
            target_hw,
            ..Self::plain(LayerKind::Upsample2x)
        }
    }

    pub fn batchnorm() -> Self {
        Self::plain(LayerKind::Batchnorm)
    }

    pub fn dropout(rate: f64) -> Self {
        Self {
            dropout_rate: rate,
            ..Self::plain(LayerKind::Dropout)
        }
    }

    /// Output shape for one sample of shape `input`.
    pub fn output_shape(&self, input: Shape3) -> Result<Shape3, NnError> {
        let [h, w, c] = input;
        Ok(match self.kind {
            LayerKind::Conv2d | LayerKind::OutputConv => {
                if self.filters_or_units == 0 {
                    return Err(NnError::Shape("convolution with zero filters".into()));
                }
                [h, w, self.filters_or_units]
            }
            LayerKind::Maxpool2x2 => {
                if h < 2 || w < 2 {
                    return Err(NnError::Shape(format!(
                        "max pooling needs H, W >= 2, got {h}x{w}"
                    )));
                }
                [h / 2, w / 2, c]
            }
            LayerKind::Upsample2x => match self.target_hw {
                Some((th, tw)) => [th, tw, c],
                None => [2 * h, 2 * w, c],
            },
            LayerKind::Dense => {
                if self.filters_or_units == 0 {
                    return Err(NnError::Shape("dense layer with zero units".into()));
                }
                [1, 1, self.filters_or_units]
            }
            LayerKind::Batchnorm | LayerKind::Dropout => input,
        })
    }

    fn param_shapes(&self, input: Shape3) -> Vec<Vec<usize>> {
        let [h, w, c] = input;
        let f = self.filters_or_units;
        match self.kind {
            LayerKind::Conv2d | LayerKind::OutputConv => vec![vec![KERNEL, KERNEL, c, f], vec![f]],
            LayerKind::Dense => vec![vec![h * w * c, f], vec![f]],
            LayerKind::Batchnorm => vec![vec![c], vec![c]],
            _ => Vec::new(),
        }
    }
}

/// Executable autoencoder description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Shape3,
    pub encoder: Vec<LayerDescriptor>,
    pub decoder: Vec<LayerDescriptor>,
    pub bottleneck_shape: Shape3,
    pub optimizer: OptimizerId,
    pub learning_rate: f64,
}

/// Per-layer parameters, non-trainable buffers and optimizer slots.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T = f32> {
    pub params: Vec<Vec<Tensor<T>>>,
    /// Batchnorm running mean and variance.
    pub buffers: Vec<Vec<Tensor<T>>>,
    pub first_moment: Vec<Vec<Tensor<T>>>,
    pub second_moment: Vec<Vec<Tensor<T>>>,
    pub step: u64,
}

impl<T: Real> TrainState<T> {
    /// Every parameter tensor followed by every buffer tensor, layer by layer.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.params
            .iter()
            .zip(&self.buffers)
            .flat_map(|(p, b)| p.iter().chain(b.iter()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().flatten().map(Tensor::len).sum()
    }
}

/// Gradient tensors mirroring [`TrainState::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    pub layers: Vec<Vec<Tensor<T>>>,
}

#[derive(Debug, Clone)]
enum LayerAux<T> {
    None,
    Argmax(Vec<usize>),
    Norm(BatchNormCache<T>),
    Mask(Vec<T>),
}

/// Activations and per-layer values recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T = f32> {
    step: u64,
    training: bool,
    latent_index: usize,
    /// `acts[0]` is the input batch, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Tensor<T>>,
    aux: Vec<LayerAux<T>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn reconstruction(&self) -> &Tensor<T> {
        self.acts.last().expect("input is always cached")
    }

    pub fn latent(&self) -> &Tensor<T> {
        &self.acts[self.latent_index]
    }

    pub fn into_reconstruction(mut self) -> Tensor<T> {
        self.acts.pop().expect("input is always cached")
    }
}

/// A validated [`NetworkSpec`] with every intermediate shape resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<LayerDescriptor>,
    shapes: Vec<Shape3>,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self, NnError> {
        let layers: Vec<LayerDescriptor> =
            spec.encoder.iter().chain(&spec.decoder).cloned().collect();
        let mut shapes = vec![spec.input_shape];
        for l in &layers {
            let next = l.output_shape(*shapes.last().unwrap())?;
            shapes.push(next);
        }
        if shapes[spec.encoder.len()] != spec.bottleneck_shape {
            return Err(NnError::Shape(format!(
                "encoder produces {:?}, spec declares bottleneck {:?}",
                shapes[spec.encoder.len()],
                spec.bottleneck_shape
            )));
        }
        if *shapes.last().unwrap() != spec.input_shape {
            return Err(NnError::Shape(format!(
                "decoder produces {:?} for input {:?}",
                shapes.last().unwrap(),
                spec.input_shape
            )));
        }
        Ok(Self {
            spec,
            layers,
            shapes,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerDescriptor] {
        &self.layers
    }

    /// Per-sample shape after each layer, preceded by the input shape.
    pub fn shapes(&self) -> &[Shape3] {
        &self.shapes
    }

    pub fn latent_shape(&self) -> Shape3 {
        self.spec.bottleneck_shape
    }

    /// Glorot-uniform kernels, zero biases, unit batchnorm scale.
    pub fn init_state<T: Real>(&self, seed: u64) -> TrainState<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(self.layers.len());
        let mut buffers = Vec::with_capacity(self.layers.len());
        for (l, &input) in self.layers.iter().zip(&self.shapes) {
            let shapes = l.param_shapes(input);
            let layer_params = match l.kind {
                LayerKind::Conv2d | LayerKind::OutputConv | LayerKind::Dense => {
                    let ks = &shapes[0];
                    let (fan_in, fan_out) = if l.kind == LayerKind::Dense {
                        (ks[0], ks[1])
                    } else {
                        (9 * ks[2], 9 * ks[3])
                    };
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let n: usize = ks.iter().product();
                    let data = (0..n)
                        .map(|_| T::of(rng.gen_range(-limit..limit)))
                        .collect();
                    vec![
                        Tensor::from_vec(ks, data).expect("matching size"),
                        Tensor::zeros(&shapes[1]),
                    ]
                }
                LayerKind::Batchnorm => {
                    vec![
                        Tensor::full(&shapes[0], T::one()),
                        Tensor::zeros(&shapes[1]),
                    ]
                }
                _ => Vec::new(),
            };
            let layer_buffers = if l.kind == LayerKind::Batchnorm {
                vec![
                    Tensor::zeros(&shapes[0]),
                    Tensor::full(&shapes[0], T::one()),
                ]
            } else {
                Vec::new()
            };
            params.push(layer_params);
            buffers.push(layer_buffers);
        }
        let zeros_like = |p: &Vec<Vec<Tensor<T>>>| {
            p.iter()
                .map(|l| l.iter().map(|t| Tensor::zeros(t.shape())).collect())
                .collect()
        };
        TrainState {
            first_moment: zeros_like(&params),
            second_moment: zeros_like(&params),
            params,
            buffers,
            step: 0,
        }
    }

    /// Checks that `state` has exactly the parameter layout this network needs.
    pub fn check_state<T: Real>(&self, state: &TrainState<T>) -> Result<(), NnError> {
        let fresh: TrainState<T> = self.init_state(0);
        let shapes = |s: &TrainState<T>| -> Vec<Vec<usize>> {
            s.tensors().iter().map(|t| t.shape().to_vec()).collect()
        };
        if shapes(state) != shapes(&fresh) || state.params.len() != fresh.params.len() {
            return Err(NnError::Shape("state does not match network layout".into()));
        }
        Ok(())
    }

    fn check_batch<T: Real>(&self, batch: &Tensor<T>) -> Result<(), NnError> {
        let [h, w, c] = self.spec.input_shape;
        match *batch.shape() {
            [n, bh, bw, bc] if n >= 1 && [bh, bw, bc] == [h, w, c] => Ok(()),
            _ => Err(NnError::Shape(format!(
                "batch {:?} does not match input {:?}",
                batch.shape(),
                self.spec.input_shape
            ))),
        }
    }

    /// Runs the whole autoencoder. In training mode dropout is active,
    /// batchnorm uses batch statistics and its running averages are updated.
    pub fn forward<T: Real>(
        &self,
        state: &mut TrainState<T>,
        batch: &Tensor<T>,
        training: bool,
        dropout_seed: u64,
    ) -> Result<ForwardCache<T>, NnError> {
        let cache = self.run(state, batch, training, dropout_seed)?;
        if training {
            let m = T::of(BN_MOMENTUM);
            for (i, aux) in cache.aux.iter().enumerate() {
                if let LayerAux::Norm(bn) = aux {
                    let [mean, var] = &mut state.buffers[i][..] else {
                        unreachable!("batchnorm layers carry two buffers")
                    };
                    for (r, &b) in mean.data_mut().iter_mut().zip(&bn.batch_mean) {
                        *r = m * *r + (T::one() - m) * b;
                    }
                    for (r, &b) in var.data_mut().iter_mut().zip(&bn.batch_var) {
                        *r = m * *r + (T::one() - m) * b;
                    }
                }
            }
        }
        Ok(cache)
    }

    /// Inference-mode forward pass on a frozen state.
    pub fn infer<T: Real>(
        &self,
        state: &TrainState<T>,
        batch: &Tensor<T>,
    ) -> Result<ForwardCache<T>, NnError> {
        self.run(state, batch, false, 0)
    }

    /// Encoder output only, in inference mode.
    pub fn encode<T: Real>(
        &self,
        state: &TrainState<T>,
        batch: &Tensor<T>,
    ) -> Result<Tensor<T>, NnError> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for (i, l) in self.layers[..self.spec.encoder.len()].iter().enumerate() {
            x = self.layer_forward(i, l, state, &x, false, 0)?.0;
        }
        Ok(x)
    }

    fn run<T: Real>(
        &self,
        state: &TrainState<T>,
        batch: &Tensor<T>,
        training: bool,
        dropout_seed: u64,
    ) -> Result<ForwardCache<T>, NnError> {
        self.check_batch(batch)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        acts.push(batch.clone());
        for (i, l) in self.layers.iter().enumerate() {
            let (out, a) =
                self.layer_forward(i, l, state, acts.last().unwrap(), training, dropout_seed)?;
            out.check_finite(&format!("layer {i} ({:?}) output", l.kind))?;
            acts.push(out);
            aux.push(a);
        }
        Ok(ForwardCache {
            step: state.step,
            training,
            latent_index: self.spec.encoder.len(),
            acts,
            aux,
        })
    }

    fn layer_forward<T: Real>(
        &self,
        index: usize,
        l: &LayerDescriptor,
        state: &TrainState<T>,
        x: &Tensor<T>,
        training: bool,
        dropout_seed: u64,
    ) -> Result<(Tensor<T>, LayerAux<T>), NnError> {
        let p = &state.params[index];
        Ok(match l.kind {
            LayerKind::Conv2d | LayerKind::OutputConv => (
                layers::conv2d_forward(x, &p[0], &p[1], l.activation)?,
                LayerAux::None,
            ),
            LayerKind::Dense => {
                let mut out = layers::dense_linear(x, &p[0], &p[1])?;
                layers::activate(&mut out, l.activation);
                let n = x.shape()[0];
                (out.reshape(&[n, 1, 1, l.filters_or_units])?, LayerAux::None)
            }
            LayerKind::Maxpool2x2 => {
                let (out, arg) = layers::maxpool_forward(x)?;
                (out, LayerAux::Argmax(arg))
            }
            LayerKind::Upsample2x => {
                let up = layers::upsample_forward(x)?;
                let out = match l.target_hw {
                    Some((th, tw)) => layers::resize_forward(&up, th, tw)?,
                    None => up,
                };
                (out, LayerAux::None)
            }
            LayerKind::Batchnorm => {
                if training {
                    let (out, cache) = layers::batchnorm_train(x, &p[0], &p[1])?;
                    (out, LayerAux::Norm(cache))
                } else {
                    let b = &state.buffers[index];
                    (
                        layers::batchnorm_infer(x, &p[0], &p[1], &b[0], &b[1]),
                        LayerAux::None,
                    )
                }
            }
            LayerKind::Dropout => {
                if training && l.dropout_rate > 0.0 {
                    let mask = layers::dropout_mask(
                        x.len(),
                        l.dropout_rate,
                        mix_seed(&[dropout_seed, index as u64]),
                    );
                    (layers::apply_mask(x, &mask), LayerAux::Mask(mask))
                } else {
                    (x.clone(), LayerAux::None)
                }
            }
        })
    }

    /// Backpropagates `grad_output` (gradient of the loss w.r.t. the
    /// reconstruction) through every layer.
    pub fn backward<T: Real>(
        &self,
        state: &TrainState<T>,
        cache: &ForwardCache<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Gradients<T>, NnError> {
        self.backward_inner(state, cache, grad_output.clone(), false)
    }

    /// Like [`Network::backward`], but `grad_logits` is taken w.r.t. the
    /// final layer's pre-activation. Used for sigmoid + cross-entropy, whose
    /// combined gradient is `(p - t) / n`.
    pub fn backward_from_logits<T: Real>(
        &self,
        state: &TrainState<T>,
        cache: &ForwardCache<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<Gradients<T>, NnError> {
        self.backward_inner(state, cache, grad_logits.clone(), true)
    }

    fn backward_inner<T: Real>(
        &self,
        state: &TrainState<T>,
        cache: &ForwardCache<T>,
        mut g: Tensor<T>,
        skip_final_activation: bool,
    ) -> Result<Gradients<T>, NnError> {
        if !cache.training || cache.step != state.step || cache.acts.len() != self.layers.len() + 1
        {
            return Err(NnError::StaleCache);
        }
        if g.shape() != cache.reconstruction().shape() {
            return Err(NnError::Shape(format!(
                "loss gradient {:?} vs reconstruction {:?}",
                g.shape(),
                cache.reconstruction().shape()
            )));
        }
        let last = self.layers.len() - 1;
        let mut grads: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.layers.len()];
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &cache.acts[i];
            let output = &cache.acts[i + 1];
            let p = &state.params[i];
            g = match (l.kind, &cache.aux[i]) {
                (LayerKind::Conv2d | LayerKind::OutputConv, _) => {
                    if !(skip_final_activation && i == last) {
                        layers::activation_backward(&mut g, output, l.activation);
                    }
                    let (gx, gk, gb) = layers::conv2d_backward(input, &p[0], &g)?;
                    grads[i] = vec![gk, gb];
                    gx
                }
                (LayerKind::Dense, _) => {
                    if !(skip_final_activation && i == last) {
                        layers::activation_backward(&mut g, output, l.activation);
                    }
                    let n = input.shape()[0];
                    let g2 = g.reshape(&[n, l.filters_or_units])?;
                    let (gx, gw, gb) = layers::dense_backward(input, &p[0], &g2)?;
                    grads[i] = vec![gw, gb];
                    gx
                }
                (LayerKind::Maxpool2x2, LayerAux::Argmax(arg)) => {
                    layers::maxpool_backward(&g, arg, input.shape())?
                }
                (LayerKind::Upsample2x, _) => {
                    let [n, h, w, c] = layers::batch_dims(input.shape())?;
                    let g_up = match l.target_hw {
                        Some(_) => layers::resize_backward(&g, &[n, 2 * h, 2 * w, c])?,
                        None => g,
                    };
                    layers::upsample_backward(&g_up)?
                }
                (LayerKind::Batchnorm, LayerAux::Norm(bn)) => {
                    let (gx, gg, gb) = layers::batchnorm_backward(bn, &p[0], &g)?;
                    grads[i] = vec![gg, gb];
                    gx
                }
                (LayerKind::Dropout, LayerAux::Mask(mask)) => layers::apply_mask(&g, mask),
                (LayerKind::Dropout, LayerAux::None) => g,
                _ => return Err(NnError::StaleCache),
            };
        }
        for (i, layer) in grads.iter().enumerate() {
            for t in layer {
                t.check_finite(&format!("layer {i} gradient"))?;
            }
        }
        Ok(Gradients { layers: grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_28() -> NetworkSpec {
        NetworkSpec {
            input_shape: [28, 28, 1],
            encoder: vec![
                LayerDescriptor::conv(16, Activation::Relu),
                LayerDescriptor::maxpool(),
                LayerDescriptor::conv(8, Activation::Relu),
                LayerDescriptor::maxpool(),
            ],
            decoder: vec![
                LayerDescriptor::upsample(Some((14, 14))),
                LayerDescriptor::conv(16, Activation::Relu),
                LayerDescriptor::upsample(Some((28, 28))),
                LayerDescriptor::conv(1, Activation::Relu),
                LayerDescriptor::output_conv(1),
            ],
            bottleneck_shape: [7, 7, 8],
            optimizer: OptimizerId::Adam,
            learning_rate: 1e-3,
        }
    }

    #[test]
    fn mnist_shaped_latent() {
        let net = Network::new(spec_28()).unwrap();
        let mut state = net.init_state::<f32>(1);
        let batch = Tensor::full(&[2, 28, 28, 1], 0.5);
        let cache = net.forward(&mut state, &batch, false, 0).unwrap();
        assert_eq!(cache.latent().shape(), &[2, 7, 7, 8]);
        assert_eq!(cache.reconstruction().shape(), &[2, 28, 28, 1]);
    }

    #[test]
    fn bad_bottleneck_and_batch() {
        let mut s = spec_28();
        s.bottleneck_shape = [7, 7, 4];
        assert!(Network::new(s).is_err());

        let net = Network::new(spec_28()).unwrap();
        let mut state = net.init_state::<f32>(1);
        let wrong = Tensor::zeros(&[1, 27, 28, 1]);
        assert!(matches!(
            net.forward(&mut state, &wrong, true, 0),
            Err(NnError::Shape(_))
        ));
    }

    #[test]
    fn modes_agree_without_dropout_or_batchnorm() {
        let net = Network::new(spec_28()).unwrap();
        let mut state = net.init_state::<f32>(3);
        let batch = Tensor::from_vec(
            &[1, 28, 28, 1],
            (0..784).map(|i| (i % 17) as f32 / 17.0).collect(),
        )
        .unwrap();
        let a = net.forward(&mut state, &batch, true, 5).unwrap();
        let b = net.infer(&state, &batch).unwrap();
        assert_eq!(a.reconstruction(), b.reconstruction());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let net = Network::new(spec_28()).unwrap();
        let mut state = net.init_state::<f32>(3);
        let batch = Tensor::full(&[1, 28, 28, 1], 0.2);
        let infer = net.infer(&state, &batch).unwrap();
        let g = Tensor::zeros(&[1, 28, 28, 1]);
        assert!(matches!(
            net.backward(&state, &infer, &g),
            Err(NnError::StaleCache)
        ));
        let cache = net.forward(&mut state, &batch, true, 0).unwrap();
        state.step += 1;
        assert!(matches!(
            net.backward(&state, &cache, &g),
            Err(NnError::StaleCache)
        ));
    }

    #[test]
    fn optimizer_slots_mirror_params() {
        let net = Network::new(spec_28()).unwrap();
        let state = net.init_state::<f32>(0);
        for (p, (m, v)) in state.params.iter().flatten().zip(
            state
                .first_moment
                .iter()
                .flatten()
                .zip(state.second_moment.iter().flatten()),
        ) {
            assert_eq!(p.shape(), m.shape());
            assert_eq!(p.shape(), v.shape());
        }
    }
}
