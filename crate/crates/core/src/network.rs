//! The two-stage segmentation network.
//!
//! Backbone: a residual encoder-decoder with skip connections. Two parallel
//! heads read the final decoder features: a 1x1 segmentation head producing
//! logits, and an attention head producing the six raw Gaussian channels.
//! The rendered attention map multiplies the backbone probabilities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adam::AdamState;
use crate::attention::{GaussianParamMap, RenderMode, PARAM_CHANNELS, SIGMA_MIN};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imaging::{Mask, Plane};
use crate::ops::ConvGeometry;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Probability at or above which a pixel is called vessel.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub input_size: usize,
    /// Weight of the auxiliary cross-entropy on the backbone probabilities.
    pub aux_loss_weight: f64,
    pub seed: u64,
    pub render_mode: RenderMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 16,
            depth: 3,
            input_size: 64,
            aux_loss_weight: 0.5,
            seed: 0,
            render_mode: RenderMode::truncated(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig(
                "base_channels must be at least 1".into(),
            ));
        }
        if self.depth == 0 || self.depth > 16 {
            return Err(Error::InvalidConfig(format!(
                "depth must be in 1..=16, got {}",
                self.depth
            )));
        }
        let stride = 1usize << self.depth;
        if self.input_size == 0 || !self.input_size.is_multiple_of(stride) {
            return Err(Error::InvalidConfig(format!(
                "input_size {} is not divisible by 2^depth = {stride}",
                self.input_size
            )));
        }
        if !(self.aux_loss_weight >= 0.0) || !self.aux_loss_weight.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "aux_loss_weight must be a finite non-negative number, got {}",
                self.aux_loss_weight
            )));
        }
        self.render_mode.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 1e-3,
            batch_size: 2,
            iterations: 300,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// One convolution of the fixed topology.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ConvSpec {
    fn new(name: impl Into<String>, kernel: usize, cin: usize, cout: usize, stride: usize) -> Self {
        ConvSpec {
            name: name.into(),
            kernel,
            cin,
            cout,
            stride,
        }
    }

    fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, self.kernel / 2)
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.kernel, self.kernel, self.cin, self.cout)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, 1, 1, self.cout)
    }
}

/// Every convolution in forward-execution order.
pub fn topology(cfg: &NetworkConfig) -> Vec<ConvSpec> {
    let base = cfg.base_channels;
    let mut convs = vec![ConvSpec::new("stem", 3, 1, base, 1)];
    for level in 0..cfg.depth {
        let c = base << level;
        convs.push(ConvSpec::new(format!("enc{level}.res.a"), 3, c, c, 1));
        convs.push(ConvSpec::new(format!("enc{level}.res.b"), 3, c, c, 1));
        convs.push(ConvSpec::new(format!("enc{level}.down"), 3, c, 2 * c, 2));
    }
    let bottom = base << cfg.depth;
    convs.push(ConvSpec::new("mid.res.a", 3, bottom, bottom, 1));
    convs.push(ConvSpec::new("mid.res.b", 3, bottom, bottom, 1));
    for level in (0..cfg.depth).rev() {
        let c = base << level;
        convs.push(ConvSpec::new(format!("dec{level}.up"), 3, 2 * c, c, 1));
        convs.push(ConvSpec::new(format!("dec{level}.res.a"), 3, 2 * c, c, 1));
        convs.push(ConvSpec::new(format!("dec{level}.res.b"), 3, c, c, 1));
        convs.push(ConvSpec::new(
            format!("dec{level}.res.proj"),
            1,
            2 * c,
            c,
            1,
        ));
    }
    convs.push(ConvSpec::new("seg.head", 1, base, 1, 1));
    convs.push(ConvSpec::new("att.hidden", 3, base, base, 1));
    convs.push(ConvSpec::new("att.out", 1, base, PARAM_CHANNELS, 1));
    convs
}

/// `softplus^-1(y) = ln(e^y - 1)`.
pub fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

/// Everything one forward pass exposes for inspection.
#[derive(Clone, Debug)]
pub struct Prediction<T: Scalar> {
    pub backbone_prob: Tensor<T>,
    pub param_map: GaussianParamMap<T>,
    pub attention: Tensor<T>,
    pub final_prob: Tensor<T>,
}

impl<T: Scalar> Prediction<T> {
    pub fn masks(&self) -> Vec<Mask> {
        threshold_probabilities(&self.final_prob)
    }
}

/// Graph handles of one forward pass.
pub struct ForwardVars {
    pub params: Vec<Var>,
    pub logits: Var,
    pub backbone_prob: Var,
    pub param_map: Var,
    pub attention: Var,
    pub final_prob: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss<T> {
    /// `main + lambda * aux`
    pub total: T,
    /// Cross-entropy of the attended probabilities.
    pub main: T,
    /// Cross-entropy of the backbone probabilities.
    pub aux: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvsNet<T: Scalar> {
    config: NetworkConfig,
    specs: Vec<ConvSpec>,
    /// Interleaved `(weight, bias)` per spec.
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> SvsNet<T> {
    /// He-initialised network from `cfg.seed`.
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let specs = topology(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Vec::with_capacity(specs.len() * 2);
        for spec in &specs {
            let fan_in = (spec.kernel * spec.kernel * spec.cin) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let ws = spec.weight_shape();
            let w: Vec<T> = (0..ws.len())
                .map(|_| T::of(normal.sample(&mut rng)))
                .collect();
            params.push(Tensor::from_vec(ws, w)?);
            let mut b = Tensor::zeros(spec.bias_shape());
            if spec.name == "att.out" {
                // c starts at 0.5; sigma starts at 1.0
                let sigma_bias = T::of(inverse_softplus(1.0 - SIGMA_MIN));
                b.data_mut()[3] = sigma_bias;
                b.data_mut()[4] = sigma_bias;
            }
            params.push(b);
        }
        Ok(SvsNet {
            config: cfg,
            specs,
            params,
        })
    }

    /// Reassembles a network from named tensors, checking them against the topology.
    pub fn from_parts(cfg: NetworkConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        cfg.validate()?;
        let specs = topology(&cfg);
        if named.len() != specs.len() * 2 {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                specs.len() * 2,
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for (i, (name, t)) in named.into_iter().enumerate() {
            let spec = &specs[i / 2];
            let (want_name, want_shape) = if i % 2 == 0 {
                (format!("{}.weight", spec.name), spec.weight_shape())
            } else {
                (format!("{}.bias", spec.name), spec.bias_shape())
            };
            if name != want_name || t.shape() != want_shape {
                return Err(Error::Format(format!(
                    "parameter {i}: expected {want_name} {want_shape:?}, found {name} {:?}",
                    t.shape()
                )));
            }
            params.push(t);
        }
        Ok(SvsNet {
            config: cfg,
            specs,
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ConvSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.specs
            .iter()
            .flat_map(|s| [format!("{}.weight", s.name), format!("{}.bias", s.name)])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> SvsNet<U> {
        SvsNet {
            config: self.config.clone(),
            specs: self.specs.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    fn check_input(&self, image: &Tensor<T>) -> Result<()> {
        let s = image.shape();
        let n = self.config.input_size;
        if s.height != n || s.width != n || s.channels != 1 || s.batch == 0 {
            return Err(Error::ShapeMismatch {
                op: "svs forward input",
                left: s.dims(),
                right: vec![s.batch.max(1), n, n, 1],
            });
        }
        Ok(())
    }

    /// Records the full forward pass on `g`. Parameters enter as trainable
    /// leaves when `trainable` is set, as constants otherwise.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        image: &Tensor<T>,
        trainable: bool,
    ) -> Result<ForwardVars> {
        self.check_input(image)?;
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            vars.push(if trainable {
                g.param(p.clone())?
            } else {
                g.constant(p.clone())?
            });
        }
        let mut layers = Layers {
            g,
            specs: &self.specs,
            vars: &vars,
            next: 0,
        };
        let depth = self.config.depth;

        let x = layers.g.constant(image.clone())?;
        let mut x = layers.conv_relu(x)?;
        let mut skips = Vec::with_capacity(depth);
        for _ in 0..depth {
            let r = layers.residual(x, false)?;
            skips.push(r);
            x = layers.conv_relu(r)?;
        }
        x = layers.residual(x, false)?;
        for skip in skips.into_iter().rev() {
            let up = layers.g.upsample2x(x)?;
            let up = layers.conv_relu(up)?;
            let cat = layers.g.concat_channels(up, skip)?;
            x = layers.residual(cat, true)?;
        }
        let logits = layers.conv(x)?;
        let hidden = layers.conv_relu(x)?;
        let raw = layers.conv(hidden)?;
        debug_assert_eq!(layers.next, self.specs.len());

        let backbone_prob = g.logistic(logits)?;
        let param_map = g.activate_params(raw)?;
        let attention = g.render_attention(param_map, self.config.render_mode)?;
        let final_prob = g.mul(backbone_prob, attention)?;
        Ok(ForwardVars {
            params: vars,
            logits,
            backbone_prob,
            param_map,
            attention,
            final_prob,
        })
    }

    /// Inference on a `(B, N, N, 1)` batch scaled to `[0, 1]`.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let v = self.forward_graph(&mut g, image, false)?;
        let out = Prediction {
            backbone_prob: g.value(v.backbone_prob).clone(),
            param_map: g.param_map(v.param_map)?,
            attention: g.value(v.attention).clone(),
            final_prob: g.value(v.final_prob).clone(),
        };
        Ok(out)
    }

    pub fn predict_mask(&self, image: &Tensor<T>) -> Result<Vec<Mask>> {
        Ok(self.forward(image)?.masks())
    }

    /// Records forward plus loss; returns `(vars, total, main, aux)`.
    pub fn loss_graph(
        &self,
        g: &mut Graph<T>,
        images: &Tensor<T>,
        masks: &Tensor<T>,
    ) -> Result<(ForwardVars, Var, Var, Var)> {
        let v = self.forward_graph(g, images, true)?;
        let main = g.cross_entropy(v.final_prob, masks)?;
        let aux = g.cross_entropy(v.backbone_prob, masks)?;
        let weighted = g.scale(aux, T::of(self.config.aux_loss_weight))?;
        let total = g.add(main, weighted)?;
        Ok((v, total, main, aux))
    }

    /// Loss value and the gradient of every parameter tensor.
    pub fn loss_and_gradients(
        &self,
        images: &Tensor<T>,
        masks: &Tensor<T>,
    ) -> Result<(StepLoss<T>, Vec<Vec<T>>)> {
        let mut g = Graph::new();
        let (v, total, main, aux) = self.loss_graph(&mut g, images, masks)?;
        let loss = StepLoss {
            total: g.value(total).item(),
            main: g.value(main).item(),
            aux: g.value(aux).item(),
        };
        g.backward(total)?;
        let grads = v
            .params
            .iter()
            .zip(&self.params)
            .map(|(&var, p)| {
                g.grad(var)
                    .map_or_else(|| vec![T::zero(); p.len()], <[T]>::to_vec)
            })
            .collect();
        Ok((loss, grads))
    }

    /// Loss without recording gradients.
    pub fn loss(&self, images: &Tensor<T>, masks: &Tensor<T>) -> Result<StepLoss<T>> {
        let mut g = Graph::new();
        let (_, total, main, aux) = self.loss_graph(&mut g, images, masks)?;
        Ok(StepLoss {
            total: g.value(total).item(),
            main: g.value(main).item(),
            aux: g.value(aux).item(),
        })
    }

    /// One forward, one backward, one Adam update. Returns the loss measured
    /// before the update.
    pub fn train_step(
        &mut self,
        images: &Tensor<T>,
        masks: &Tensor<T>,
        opt: &mut AdamState<T>,
        cfg: &TrainingConfig,
    ) -> Result<StepLoss<T>> {
        if images.shape().batch != cfg.batch_size {
            return Err(Error::invalid(format!(
                "train_step: batch of {} but batch_size is {}",
                images.shape().batch,
                cfg.batch_size
            )));
        }
        let (loss, grads) = self.loss_and_gradients(images, masks)?;
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.set_grad(g)?;
        }
        opt.step(&mut self.params)?;
        for p in &mut self.params {
            p.clear_grad();
        }
        if !self.params.iter().all(Tensor::is_finite) {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        Ok(loss)
    }
}

struct Layers<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    specs: &'a [ConvSpec],
    vars: &'a [Var],
    next: usize,
}

impl<T: Scalar> Layers<'_, T> {
    fn conv(&mut self, x: Var) -> Result<Var> {
        let spec = &self.specs[self.next];
        let (w, b) = (self.vars[2 * self.next], self.vars[2 * self.next + 1]);
        self.next += 1;
        self.g.conv2d(x, w, b, spec.geometry())
    }

    fn conv_relu(&mut self, x: Var) -> Result<Var> {
        let y = self.conv(x)?;
        self.g.relu(y)
    }

    /// `relu(conv(relu(conv(x))) + skip(x))`; `skip` is a 1x1 projection when `project`.
    fn residual(&mut self, x: Var, project: bool) -> Result<Var> {
        let a = self.conv_relu(x)?;
        let b = self.conv(a)?;
        let skip = if project { self.conv(x)? } else { x };
        let sum = self.g.add(b, skip)?;
        self.g.relu(sum)
    }
}

/// `prob >= 0.5` per pixel, one mask per batch item.
pub fn threshold_probabilities<T: Scalar>(prob: &Tensor<T>) -> Vec<Mask> {
    let s = prob.shape();
    let t = T::of(MASK_THRESHOLD);
    (0..s.batch)
        .map(|b| Plane::from_fn(s.width, s.height, |x, y| prob.at(b, y, x, 0) >= t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(depth: usize, size: usize) -> NetworkConfig {
        NetworkConfig {
            base_channels: 4,
            depth,
            input_size: size,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn inverse_softplus_targets_unit_sigma() {
        let b = inverse_softplus(0.9);
        assert!((b - 0.378).abs() < 1e-3);
        assert!((SIGMA_MIN + crate::ops::softplus(b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn indivisible_size_rejected() {
        assert!(SvsNet::<f32>::new(small(3, 60)).is_err());
        assert!(SvsNet::<f32>::new(small(2, 60)).is_ok());
    }

    #[test]
    fn same_seed_same_network() {
        let a = SvsNet::<f32>::new(small(3, 16)).unwrap();
        let b = SvsNet::<f32>::new(small(3, 16)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.parameter_count(), b.parameter_count());
        let c = SvsNet::<f32>::new(NetworkConfig {
            seed: 4,
            ..small(3, 16)
        })
        .unwrap();
        assert_ne!(a.params()[0], c.params()[0]);
    }

    #[test]
    fn smallest_network_runs() {
        let net = SvsNet::<f64>::new(small(1, 2)).unwrap();
        let p = net.forward(&Tensor::zeros(Shape::new(1, 2, 2, 1))).unwrap();
        assert_eq!(p.final_prob.shape(), Shape::new(1, 2, 2, 1));
    }

    #[test]
    fn wrong_input_size_rejected() {
        let net = SvsNet::<f32>::new(small(2, 16)).unwrap();
        assert!(net.forward(&Tensor::zeros(Shape::new(1, 8, 8, 1))).is_err());
        assert!(net
            .forward(&Tensor::zeros(Shape::new(1, 16, 16, 2)))
            .is_err());
    }

    #[test]
    fn zero_image_gives_valid_outputs() {
        let net = SvsNet::<f32>::new(small(2, 16)).unwrap();
        let p = net
            .forward(&Tensor::zeros(Shape::new(2, 16, 16, 1)))
            .unwrap();
        p.param_map.validate().unwrap();
        assert!(p.final_prob.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(p.attention.data().iter().all(|&a| (0.0..1.0).contains(&a)));
    }

    #[test]
    fn thresholding_tie_goes_to_vessel() {
        let s = Shape::new(1, 2, 2, 1);
        let lo = threshold_probabilities(&Tensor::<f32>::full(s, 0.4));
        assert_eq!(lo[0].count(), 0);
        let hi = threshold_probabilities(&Tensor::<f32>::full(s, 0.5));
        assert_eq!(hi[0].count(), 4);
    }

    #[test]
    fn first_loss_is_bounded() {
        let net = SvsNet::<f32>::new(small(2, 16)).unwrap();
        let img = Tensor::from_fn(Shape::new(2, 16, 16, 1), |_, y, x, _| {
            ((x + y) % 5) as f32 / 5.0
        });
        let mask = img.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let l = net.loss(&img, &mask).unwrap();
        assert!(l.total.is_finite() && l.total < 10.0);
    }

    #[test]
    fn non_binary_mask_rejected() {
        let mut net = SvsNet::<f32>::new(small(1, 4)).unwrap();
        let img = Tensor::zeros(Shape::new(2, 4, 4, 1));
        let mask = Tensor::full(Shape::new(2, 4, 4, 1), 0.5);
        let cfg = TrainingConfig::default();
        let mut opt = AdamState::new(crate::adam::AdamConfig::default(), net.params()).unwrap();
        assert!(net.train_step(&img, &mask, &mut opt, &cfg).is_err());
    }
}
