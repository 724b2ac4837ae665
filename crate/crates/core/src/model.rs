//! Model architecture: feature extractor, bottleneck classifier head, and
//! projection head, plus the student/teacher pair used for self-training.
//!
//! The feature extractor `G` is an MLP with batch normalization and relu
//! after every linear layer. Classification runs the features through a
//! bottleneck (linear + batchnorm) and a linear classifier; the contrastive
//! path runs them through a two-layer projection head and L2-normalizes.
//!
//! Parameter names are stable and documented, in forward order:
//! `g.{i}.w`, `g.{i}.b`, `bn.{i}.scale`, `bn.{i}.shift` for each extractor
//! block, then `bot.w`, `bot.b`, `bn.{n}.scale`, `bn.{n}.shift` for the
//! bottleneck (its batchnorm continues the `bn` numbering), `c.w`, `c.b`
//! for the classifier, and `h.0.*`, `h.1.*` for the projection head.
//! Checkpoints additionally carry `bn.{i}.running_mean` / `bn.{i}.running_var`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkit::{batchnorm_eval, batchnorm_train, NamedTensor, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub bottleneck_dim: usize,
    pub num_classes: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 8,
            hidden_dims: vec![64, 64],
            bottleneck_dim: 32,
            num_classes: 4,
            proj_hidden: 64,
            proj_dim: 32,
        }
    }
}

/// Whether a forward pass uses batch statistics (and updates the running
/// ones) or the frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Train,
    Eval,
}

struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    /// Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`), zero biases.
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng, trainable: bool) -> Result<Linear> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let values: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let mk = if trainable { Tensor::param } else { Tensor::new };
        Ok(Linear {
            w: mk(vec![fan_in, fan_out], values)?,
            b: mk(vec![fan_out], vec![0.0; fan_out])?,
        })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w)?.add(&self.b)
    }
}

struct BatchNorm {
    scale: Tensor,
    shift: Tensor,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

impl BatchNorm {
    fn init(dim: usize, trainable: bool) -> Result<BatchNorm> {
        let mk = if trainable { Tensor::param } else { Tensor::new };
        Ok(BatchNorm {
            scale: mk(vec![dim], vec![1.0; dim])?,
            shift: mk(vec![dim], vec![0.0; dim])?,
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        })
    }

    fn apply_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, mean, var) = batchnorm_train(x, &self.scale, &self.shift, BN_EPS)?;
        for j in 0..self.running_mean.len() {
            self.running_mean[j] = (1.0 - BN_MOMENTUM) * self.running_mean[j] + BN_MOMENTUM * mean[j];
            self.running_var[j] = (1.0 - BN_MOMENTUM) * self.running_var[j] + BN_MOMENTUM * var[j];
        }
        Ok(y)
    }

    fn apply_eval(&self, x: &Tensor) -> Result<Tensor> {
        batchnorm_eval(
            x,
            &self.scale,
            &self.shift,
            &self.running_mean,
            &self.running_var,
            BN_EPS,
        )
    }
}

/// The full network: extractor, bottleneck classifier head, projection head.
pub struct Network {
    pub config: ModelConfig,
    g: Vec<(Linear, BatchNorm)>,
    bot: Linear,
    bot_bn: BatchNorm,
    classifier: Linear,
    h0: Linear,
    h1: Linear,
}

impl Network {
    /// Fresh network with seeded Kaiming-uniform linears, identity batchnorm
    /// state, and, when `trainable`, gradient-tracking parameters.
    pub fn new(config: ModelConfig, seed: u64, trainable: bool) -> Result<Network> {
        if config.hidden_dims.is_empty() {
            return Err(Error::Config("hidden_dims must not be empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Vec::new();
        let mut fan_in = config.input_dim;
        for &dim in &config.hidden_dims {
            let lin = Linear::init(fan_in, dim, &mut rng, trainable)?;
            let bn = BatchNorm::init(dim, trainable)?;
            g.push((lin, bn));
            fan_in = dim;
        }
        let feature_dim = fan_in;
        let bot = Linear::init(feature_dim, config.bottleneck_dim, &mut rng, trainable)?;
        let bot_bn = BatchNorm::init(config.bottleneck_dim, trainable)?;
        let classifier = Linear::init(config.bottleneck_dim, config.num_classes, &mut rng, trainable)?;
        let h0 = Linear::init(feature_dim, config.proj_hidden, &mut rng, trainable)?;
        let h1 = Linear::init(config.proj_hidden, config.proj_dim, &mut rng, trainable)?;
        Ok(Network {
            config,
            g,
            bot,
            bot_bn,
            classifier,
            h0,
            h1,
        })
    }

    pub fn feature_dim(&self) -> usize {
        *self.config.hidden_dims.last().unwrap()
    }

    fn features_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (lin, bn) in self.g.iter_mut() {
            h = bn.apply_train(&lin.apply(&h)?)?.relu()?;
        }
        Ok(h)
    }

    fn features_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (lin, bn) in &self.g {
            h = bn.apply_eval(&lin.apply(&h)?)?.relu()?;
        }
        Ok(h)
    }

    /// Class probabilities (softmax) for a `[n, input_dim]` batch.
    /// Train mode normalizes by batch statistics and updates the running
    /// ones, so it needs `n >= 2`; eval mode works row by row.
    pub fn predict(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Train => {
                let f = self.features_train(x)?;
                let z = self.bot_bn.apply_train(&self.bot.apply(&f)?)?;
                self.classifier.apply(&z)?.softmax()
            }
            Mode::Eval => self.predict_frozen(x),
        }
    }

    /// Eval-mode probabilities without touching any state; safe to call
    /// concurrently on a frozen network.
    pub fn predict_frozen(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.features_eval(x)?;
        let z = self.bot_bn.apply_eval(&self.bot.apply(&f)?)?;
        self.classifier.apply(&z)?.softmax()
    }

    /// L2-normalized projection embeddings for the contrastive objective,
    /// shape `[n, proj_dim]`.
    pub fn project(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let f = match mode {
            Mode::Train => self.features_train(x)?,
            Mode::Eval => self.features_eval(x)?,
        };
        let h = self.h0.apply(&f)?.relu()?;
        self.h1.apply(&h)?.l2_normalize_rows()
    }

    /// Trainable parameters in stable, documented order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (lin, bn)) in self.g.iter().enumerate() {
            out.push((format!("g.{i}.w"), lin.w.clone()));
            out.push((format!("g.{i}.b"), lin.b.clone()));
            out.push((format!("bn.{i}.scale"), bn.scale.clone()));
            out.push((format!("bn.{i}.shift"), bn.shift.clone()));
        }
        let nb = self.g.len();
        out.push(("bot.w".into(), self.bot.w.clone()));
        out.push(("bot.b".into(), self.bot.b.clone()));
        out.push((format!("bn.{nb}.scale"), self.bot_bn.scale.clone()));
        out.push((format!("bn.{nb}.shift"), self.bot_bn.shift.clone()));
        out.push(("c.w".into(), self.classifier.w.clone()));
        out.push(("c.b".into(), self.classifier.b.clone()));
        out.push(("h.0.w".into(), self.h0.w.clone()));
        out.push(("h.0.b".into(), self.h0.b.clone()));
        out.push(("h.1.w".into(), self.h1.w.clone()));
        out.push(("h.1.b".into(), self.h1.b.clone()));
        out
    }

    fn batchnorms(&self) -> Vec<(usize, &BatchNorm)> {
        let mut out: Vec<(usize, &BatchNorm)> = self.g.iter().map(|(_, bn)| bn).enumerate().collect();
        out.push((self.g.len(), &self.bot_bn));
        out
    }

    fn batchnorms_mut(&mut self) -> Vec<(usize, &mut BatchNorm)> {
        let n = self.g.len();
        let mut out: Vec<(usize, &mut BatchNorm)> =
            self.g.iter_mut().map(|(_, bn)| bn).enumerate().collect();
        out.push((n, &mut self.bot_bn));
        out
    }

    /// Everything a checkpoint stores: parameters plus batchnorm running
    /// statistics.
    pub fn state_tensors(&self) -> Vec<NamedTensor> {
        let mut out: Vec<NamedTensor> = self
            .named_parameters()
            .into_iter()
            .map(|(name, t)| (name, t.shape(), t.values()))
            .collect();
        for (i, bn) in self.batchnorms() {
            out.push((
                format!("bn.{i}.running_mean"),
                vec![bn.running_mean.len()],
                bn.running_mean.clone(),
            ));
            out.push((
                format!("bn.{i}.running_var"),
                vec![bn.running_var.len()],
                bn.running_var.clone(),
            ));
        }
        out
    }

    /// Rebuilds a network from checkpoint tensors, inferring the
    /// architecture from parameter shapes.
    pub fn from_state(tensors: &[NamedTensor], trainable: bool) -> Result<Network> {
        let find = |name: &str| -> Result<&NamedTensor> {
            tensors
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))
        };
        let mut hidden_dims = Vec::new();
        let mut input_dim = 0;
        for i in 0.. {
            match tensors.iter().find(|(n, _, _)| n == &format!("g.{i}.w")) {
                Some((_, shape, _)) => {
                    if shape.len() != 2 {
                        return Err(Error::Format(format!("g.{i}.w has rank {}", shape.len())));
                    }
                    if i == 0 {
                        input_dim = shape[0];
                    }
                    hidden_dims.push(shape[1]);
                }
                None => break,
            }
        }
        if hidden_dims.is_empty() {
            return Err(Error::Format("checkpoint has no extractor layers".into()));
        }
        let (_, bot_shape, _) = find("bot.w")?;
        let (_, c_shape, _) = find("c.w")?;
        let (_, h0_shape, _) = find("h.0.w")?;
        let (_, h1_shape, _) = find("h.1.w")?;
        let config = ModelConfig {
            input_dim,
            hidden_dims,
            bottleneck_dim: bot_shape[1],
            num_classes: c_shape[1],
            proj_hidden: h0_shape[1],
            proj_dim: h1_shape[1],
        };
        let _ = h0_shape;
        let mut net = Network::new(config, 0, trainable)?;
        net.load_state(tensors)?;
        Ok(net)
    }

    /// Overwrites parameters and running statistics from checkpoint tensors.
    pub fn load_state(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        for (name, param) in self.named_parameters() {
            let (_, shape, values) = tensors
                .iter()
                .find(|(n, _, _)| n == &name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
            if *shape != param.shape() {
                return Err(Error::ArchitectureMismatch(format!(
                    "{name}: checkpoint shape {shape:?} vs model {:?}",
                    param.shape()
                )));
            }
            param.set_values(values)?;
        }
        for (i, bn) in self.batchnorms_mut() {
            for (suffix, slot) in [("running_mean", 0), ("running_var", 1)] {
                let name = format!("bn.{i}.{suffix}");
                let (_, _, values) = tensors
                    .iter()
                    .find(|(n, _, _)| n == &name)
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
                let dst = if slot == 0 {
                    &mut bn.running_mean
                } else {
                    &mut bn.running_var
                };
                if values.len() != dst.len() {
                    return Err(Error::ArchitectureMismatch(format!(
                        "{name}: checkpoint length {} vs model {}",
                        values.len(),
                        dst.len()
                    )));
                }
                dst.copy_from_slice(values);
            }
        }
        Ok(())
    }

    /// A structurally identical copy with the given trainability; values and
    /// running statistics are copied bit for bit.
    pub fn clone_with(&self, trainable: bool) -> Result<Network> {
        Network::from_state(&self.state_tensors(), trainable)
    }
}

/// Selects which parameters an optimizer step may move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateMask {
    All,
    /// Everything except the projection head, for objectives that never
    /// evaluate it (plain supervised training); stepping a parameter the
    /// loss cannot reach would demand a gradient that does not exist.
    Backbone,
    /// Only batchnorm scale/shift parameters, for feature-drift correction
    /// settings where the rest of the network stays frozen.
    BnOnly,
}

impl UpdateMask {
    pub fn selects(&self, name: &str) -> bool {
        match self {
            UpdateMask::All => true,
            UpdateMask::Backbone => !name.starts_with("h."),
            UpdateMask::BnOnly => {
                name.starts_with("bn.") && (name.ends_with(".scale") || name.ends_with(".shift"))
            }
        }
    }

    /// Flags aligned with a `named_parameters()` list.
    pub fn flags(&self, params: &[(String, Tensor)]) -> Vec<bool> {
        params.iter().map(|(n, _)| self.selects(n)).collect()
    }
}

/// Student/teacher pair. The student trains by gradient descent; the teacher
/// trails it as an exponential moving average and never sees a gradient.
pub struct ModelPair {
    pub student: Network,
    pub teacher: Network,
    pub ema_decay: f64,
}

impl ModelPair {
    /// Builds the pair with the teacher initialized as a frozen copy of the
    /// student.
    pub fn new(student: Network, ema_decay: f64) -> Result<ModelPair> {
        if !(0.0..=1.0).contains(&ema_decay) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1], got {ema_decay}")));
        }
        let teacher = student.clone_with(false)?;
        Ok(ModelPair {
            student,
            teacher,
            ema_decay,
        })
    }

    /// One EMA step: `teacher <- decay * teacher + (1 - decay) * student`,
    /// applied to every parameter and to the batchnorm running statistics.
    pub fn ema_update(&mut self) -> Result<()> {
        let g = self.ema_decay;
        let s_params = self.student.named_parameters();
        let t_params = self.teacher.named_parameters();
        if s_params.len() != t_params.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "student has {} parameters, teacher {}",
                s_params.len(),
                t_params.len()
            )));
        }
        for ((sn, sp), (tn, tp)) in s_params.iter().zip(&t_params) {
            if sn != tn || sp.shape() != tp.shape() {
                return Err(Error::ArchitectureMismatch(format!("{sn} vs {tn}")));
            }
            let sv = sp.values();
            let mut tv = tp.values();
            for k in 0..tv.len() {
                tv[k] = g * tv[k] + (1.0 - g) * sv[k];
            }
            tp.set_values(&tv)?;
        }
        let n = self.student.g.len();
        for i in 0..=n {
            let (s_bn, t_bn) = if i < n {
                (&self.student.g[i].1, &mut self.teacher.g[i].1)
            } else {
                (&self.student.bot_bn, &mut self.teacher.bot_bn)
            };
            for k in 0..s_bn.running_mean.len() {
                t_bn.running_mean[k] = g * t_bn.running_mean[k] + (1.0 - g) * s_bn.running_mean[k];
                t_bn.running_var[k] = g * t_bn.running_var[k] + (1.0 - g) * s_bn.running_var[k];
            }
        }
        Ok(())
    }

    /// Hard reset: the teacher becomes a bit-exact copy of the student.
    pub fn clone_student_to_teacher(&mut self) -> Result<()> {
        self.teacher.load_state(&self.student.state_tensors())
    }
}
