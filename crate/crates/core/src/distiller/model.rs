use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::StudentSet;
use crate::error::{Error, Result};

/// Parameter count of the reference teacher network (138M).
pub const DEFAULT_TEACHER_PARAM_BUDGET: u64 = 138_000_000;

pub const DEFAULT_IDENTITY_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

/// Shape of a student: a feedforward trunk ending in the mimic layer, then
/// the identity layer and the softmax head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub trunk: Vec<LayerSpec>,
    pub identity_dim: usize,
    pub class_count: usize,
    pub teacher_param_budget: u64,
}

impl Architecture {
    /// `d_in -> 64 -> 64 -> mimic(D)` with rectified hidden layers and a
    /// linear mimic layer.
    pub fn desk_default(input_dim: usize, mimic_dim: usize, class_count: usize) -> Self {
        Self::with_hidden(input_dim, &[64, 64], mimic_dim, class_count)
    }

    pub fn with_hidden(input_dim: usize, hidden: &[usize], mimic_dim: usize, class_count: usize) -> Self {
        let mut trunk = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for &h in hidden {
            trunk.push(LayerSpec {
                fan_in,
                fan_out: h,
                activation: Activation::Relu,
            });
            fan_in = h;
        }
        trunk.push(LayerSpec {
            fan_in,
            fan_out: mimic_dim,
            activation: Activation::Identity,
        });
        Self {
            trunk,
            identity_dim: DEFAULT_IDENTITY_DIM,
            class_count,
            teacher_param_budget: DEFAULT_TEACHER_PARAM_BUDGET,
        }
    }

    pub fn for_dataset(set: &StudentSet) -> Self {
        Self::desk_default(set.input_dim(), set.feature_dim(), set.class_count())
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.first().map_or(0, |l| l.fan_in)
    }

    pub fn mimic_dim(&self) -> usize {
        self.trunk.last().map_or(0, |l| l.fan_out)
    }

    pub fn param_count(&self) -> u64 {
        let dense = |i: usize, o: usize| (i * o + o) as u64;
        self.trunk.iter().map(|l| dense(l.fan_in, l.fan_out)).sum::<u64>()
            + dense(self.mimic_dim(), self.identity_dim)
            + dense(self.identity_dim, self.class_count)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk.is_empty() {
            return Err(Error::Architecture("the trunk needs at least the mimic layer".into()));
        }
        if self.trunk.iter().any(|l| l.fan_in == 0 || l.fan_out == 0) {
            return Err(Error::Architecture("layer widths must be positive".into()));
        }
        for (k, pair) in self.trunk.windows(2).enumerate() {
            if pair[0].fan_out != pair[1].fan_in {
                return Err(Error::Architecture(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].fan_out,
                    k + 1,
                    pair[1].fan_in
                )));
            }
        }
        if self.identity_dim == 0 || self.class_count == 0 {
            return Err(Error::Architecture("identity_dim and class_count must be positive".into()));
        }
        let params = self.param_count();
        if params >= self.teacher_param_budget {
            return Err(Error::Architecture(format!(
                "{params} parameters is not below the teacher budget of {}",
                self.teacher_param_budget
            )));
        }
        Ok(())
    }
}

/// Fully connected layer, weights row-major `fan_out x fan_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub frozen: bool,
}

impl Dense {
    fn xavier(spec: LayerSpec, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fan_in: spec.fan_in,
            fan_out: spec.fan_out,
            activation: spec.activation,
            weights: xavier_uniform(spec.fan_in, spec.fan_out, rng),
            bias: vec![0.0; spec.fan_out],
            frozen: false,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec {
            fan_in: self.fan_in,
            fan_out: self.fan_out,
            activation: self.activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.fan_in)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients for one sample and returns the
    /// gradient with respect to the layer input.
    fn backward(&self, input: &[f64], pre: &[f64], d_out: &[f64], grad: &mut LayerGrad) -> Vec<f64> {
        let mut d_in = vec![0.0; self.fan_in];
        for (o, ((&g, &z), row)) in d_out
            .iter()
            .zip(pre)
            .zip(self.weights.chunks_exact(self.fan_in))
            .enumerate()
        {
            let dz = g * self.activation.derivative(z);
            if dz == 0.0 {
                continue;
            }
            grad.bias[o] += dz;
            let grow = &mut grad.weights[o * self.fan_in..(o + 1) * self.fan_in];
            for ((gw, &x), (di, &w)) in grow.iter_mut().zip(input).zip(d_in.iter_mut().zip(row)) {
                *gw += dz * x;
                *di += dz * w;
            }
        }
        d_in
    }
}

/// Glorot/Xavier uniform weights: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`,
/// giving variance `2 / (fan_in + fan_out)`.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect()
}

/// The compact student network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentModel {
    pub trunk: Vec<Dense>,
    pub identity: Dense,
    pub head: Dense,
    pub seed: u64,
    pub teacher_param_budget: u64,
}

/// Which hidden representation to read out.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    #[default]
    Mimic,
    Identity,
}

impl std::fmt::Display for Tap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tap::Mimic => "mimic",
            Tap::Identity => "identity",
        })
    }
}

impl std::str::FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mimic" => Ok(Tap::Mimic),
            "identity" => Ok(Tap::Identity),
            other => Err(Error::Invalid(format!("unknown tap `{other}`"))),
        }
    }
}

/// Cached intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    /// Input followed by every layer's output.
    pub outputs: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn mimic(&self, trunk_len: usize) -> &[f64] {
        &self.outputs[trunk_len]
    }

    pub fn logits(&self) -> &[f64] {
        self.outputs.last().unwrap()
    }
}

/// Parameter gradients shaped like one [`Dense`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients for every layer, trunk first, then identity, then head.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(model: &StudentModel) -> Self {
        Self {
            layers: model
                .layers()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// All entries in parameter order (weights then bias, layer by layer).
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }
}

/// Builds a student with Xavier-uniform weights and zero biases.
pub fn init_student(arch: &Architecture, seed: u64) -> Result<StudentModel> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trunk = arch.trunk.iter().map(|&s| Dense::xavier(s, &mut rng)).collect();
    let identity = Dense::xavier(
        LayerSpec {
            fan_in: arch.mimic_dim(),
            fan_out: arch.identity_dim,
            activation: Activation::Relu,
        },
        &mut rng,
    );
    let head = Dense::xavier(
        LayerSpec {
            fan_in: arch.identity_dim,
            fan_out: arch.class_count,
            activation: Activation::Identity,
        },
        &mut rng,
    );
    Ok(StudentModel {
        trunk,
        identity,
        head,
        seed,
        teacher_param_budget: arch.teacher_param_budget,
    })
}

impl StudentModel {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            trunk: self.trunk.iter().map(Dense::spec).collect(),
            identity_dim: self.identity.fan_out,
            class_count: self.head.fan_out,
            teacher_param_budget: self.teacher_param_budget,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk[0].fan_in
    }

    pub fn mimic_dim(&self) -> usize {
        self.trunk.last().unwrap().fan_out
    }

    pub fn identity_dim(&self) -> usize {
        self.identity.fan_out
    }

    pub fn class_count(&self) -> usize {
        self.head.fan_out
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.layers().filter(|l| !l.frozen).map(Dense::param_count).sum()
    }

    /// Trunk layers, then identity, then head.
    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain([&self.identity, &self.head])
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk.iter_mut().chain([&mut self.identity, &mut self.head])
    }

    /// Every parameter in the same order as [`Gradients::flatten`].
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    /// Mutable access to the parameter at flat position `index`.
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for layer in self.layers_mut() {
            if index < layer.weights.len() {
                return &mut layer.weights[index];
            }
            index -= layer.weights.len();
            if index < layer.bias.len() {
                return &mut layer.bias[index];
            }
            index -= layer.bias.len();
        }
        panic!("parameter index out of range")
    }

    /// Whether the flat parameter at `index` belongs to a frozen layer.
    pub fn is_frozen_param(&self, mut index: usize) -> bool {
        for layer in self.layers() {
            let n = layer.param_count();
            if index < n {
                return layer.frozen;
            }
            index -= n;
        }
        panic!("parameter index out of range")
    }

    /// Errors unless the model's input, mimic and class dimensions fit `set`.
    pub fn check_compatible(&self, set: &StudentSet) -> Result<()> {
        if self.input_dim() != set.input_dim() {
            return Err(Error::Architecture(format!(
                "model input dim {} but data has d_in={}",
                self.input_dim(),
                set.input_dim()
            )));
        }
        if self.mimic_dim() != set.feature_dim() {
            return Err(Error::Architecture(format!(
                "mimic dim {} but teacher features have D={}",
                self.mimic_dim(),
                set.feature_dim()
            )));
        }
        if self.class_count() < set.class_count() {
            return Err(Error::Architecture(format!(
                "head has {} classes but data has {}",
                self.class_count(),
                set.class_count()
            )));
        }
        Ok(())
    }

    pub(crate) fn trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::Invalid(format!(
                "input has {} values, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("student input".into()));
        }
        let n = self.trunk.len() + 2;
        let mut outputs = Vec::with_capacity(n + 1);
        let mut pre = Vec::with_capacity(n);
        outputs.push(x.to_vec());
        for (k, layer) in self.layers().enumerate() {
            let z = layer.pre_activation(outputs.last().unwrap());
            let a: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: k });
            }
            pre.push(z);
            outputs.push(a);
        }
        Ok(Trace { outputs, pre })
    }

    /// Mimic features (pre-identity) and class logits.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut t = self.trace(x)?;
        let logits = t.outputs.pop().unwrap();
        let mimic = t.outputs.swap_remove(self.trunk.len());
        Ok((mimic, logits))
    }

    pub fn features(&self, x: &[f64], tap: Tap) -> Result<Vec<f64>> {
        let mut t = self.trace(x)?;
        let k = match tap {
            Tap::Mimic => self.trunk.len(),
            Tap::Identity => self.trunk.len() + 1,
        };
        Ok(t.outputs.swap_remove(k))
    }

    /// Backpropagates output gradients through a cached trace.
    ///
    /// `d_logits` may be `None` when the classification branch is unused;
    /// `d_mimic` is added at the mimic tap.
    pub(crate) fn backward(&self, trace: &Trace, d_logits: Option<&[f64]>, d_mimic: Option<&[f64]>, grads: &mut Gradients) {
        let t = self.trunk.len();
        let mut d = vec![0.0; self.mimic_dim()];
        if let Some(dl) = d_logits {
            let d_identity = self.head.backward(&trace.outputs[t + 1], &trace.pre[t + 1], dl, &mut grads.layers[t + 1]);
            d = self
                .identity
                .backward(&trace.outputs[t], &trace.pre[t], &d_identity, &mut grads.layers[t]);
        }
        if let Some(dm) = d_mimic {
            for (a, b) in d.iter_mut().zip(dm) {
                *a += b;
            }
        }
        for k in (0..t).rev() {
            // Nothing upstream of the first trainable layer needs a gradient.
            if self.trunk[..=k].iter().all(|l| l.frozen) {
                break;
            }
            d = self.trunk[k].backward(&trace.outputs[k], &trace.pre[k], &d, &mut grads.layers[k]);
        }
    }

    /// `p -= step * g` for every trainable parameter.
    pub fn apply_gradients(&mut self, grads: &Gradients, step: f64) {
        for (layer, g) in self.layers_mut().zip(&grads.layers) {
            if layer.frozen {
                continue;
            }
            for (p, d) in layer.weights.iter_mut().zip(&g.weights) {
                *p -= step * d;
            }
            for (p, d) in layer.bias.iter_mut().zip(&g.bias) {
                *p -= step * d;
            }
        }
    }
}

/// Prepares a trained student for a new label set: trunk and mimic layer
/// are frozen, the identity layer and a `new_class_count`-way head are
/// re-initialized from `seed`.
pub fn transfer_student(model: &StudentModel, new_class_count: usize, seed: u64) -> Result<StudentModel> {
    if new_class_count < 2 {
        return Err(Error::Architecture(format!(
            "transfer needs at least 2 classes, got {new_class_count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = model.clone();
    for layer in &mut out.trunk {
        layer.frozen = true;
    }
    out.identity = Dense::xavier(out.identity.spec(), &mut rng);
    out.head = Dense::xavier(
        LayerSpec {
            fan_in: out.identity.fan_out,
            fan_out: new_class_count,
            activation: Activation::Identity,
        },
        &mut rng,
    );
    out.seed = seed;
    out.architecture().validate()?;
    Ok(out)
}
