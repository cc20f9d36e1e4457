//! The panorama encoder: a stack of conv → relu → maxpool blocks with
//! panorama-aware padding, a row average that collapses the height, and a
//! per-column linear head giving a `w × d` feature map. Also the training
//! loop and the weight file.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::io::{self, short_hash, Provenance, Reader, Writer};
use crate::loss::{
    batch_builder, continuous_lifted_loss, mine_class_pairs, mine_pairs, original_lifted_loss,
    BatchMode, MiningConfig, SampleLabel,
};
use crate::omni::{
    aligned_distance, rolling_distance, HorizontalPad, Padding, RollingDistance, VerticalPad,
};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const WEIGHTS_VERSION: u32 = 1;
const WEIGHTS_MAGIC: &[u8; 4] = b"OCNN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// Square, odd kernel side.
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
    /// Max-pool window and stride; 1 disables pooling.
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `[H, W, C]`
    pub input: [usize; 3],
    pub layers: Vec<ConvLayer>,
    /// Feature width, the number of rotation bins.
    pub w: usize,
    /// Feature depth.
    pub d: usize,
    pub padding: Padding,
    /// Compare features under every cyclic column shift. Without it the
    /// feature distance is the plain aligned one.
    pub roll_branching: bool,
    /// Scale each feature map to unit norm.
    pub normalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let block = |channels, pool| ConvLayer {
            kernel: 3,
            channels,
            stride: 1,
            pool,
        };
        ModelConfig {
            input: [32, 64, 3],
            layers: vec![block(16, 2), block(32, 2), block(32, 1)],
            w: 16,
            d: 32,
            padding: Padding::OMNI,
            roll_branching: true,
            normalize: false,
        }
    }
}

impl ModelConfig {
    /// Full-size input with 20 rotation bins (18° each).
    pub fn full_scale() -> Self {
        let block = |channels| ConvLayer {
            kernel: 3,
            channels,
            stride: 1,
            pool: 2,
        };
        ModelConfig {
            input: [384, 640, 3],
            layers: vec![block(16), block(32), block(64), block(64), block(128)],
            w: 20,
            d: 128,
            ..Default::default()
        }
    }

    /// Spatial size after every block, checking the stride arithmetic.
    pub fn feature_grid(&self) -> Result<(usize, usize)> {
        let bad = |reason: String| Error::InvalidConfig {
            field: "model.layers".into(),
            reason,
        };
        let [mut h, mut w, c] = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(bad("input size must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(bad("at least one conv layer is required".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel % 2 == 0 || l.channels == 0 || l.stride == 0 || l.pool == 0 {
                return Err(bad(format!(
                    "layer {i}: kernel must be odd; channels, stride and pool ≥ 1"
                )));
            }
            for step in [l.stride, l.pool] {
                if h % step != 0 || w % step != 0 {
                    return Err(bad(format!(
                        "layer {i}: {h}x{w} is not divisible by {step}"
                    )));
                }
                h /= step;
                w /= step;
            }
        }
        Ok((h, w))
    }

    pub fn validate(&self) -> Result<()> {
        let (_, w) = self.feature_grid()?;
        if w != self.w {
            return Err(Error::InvalidConfig {
                field: "model.w".into(),
                reason: format!("layers give feature width {w}, config says {}", self.w),
            });
        }
        if self.d == 0 {
            return Err(Error::InvalidConfig {
                field: "model.d".into(),
                reason: "feature depth must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn horizontal_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride * l.pool).product()
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut cin = self.input[2];
        for l in &self.layers {
            shapes.push(vec![l.kernel, l.kernel, cin, l.channels]);
            shapes.push(vec![l.channels]);
            cin = l.channels;
        }
        shapes.push(vec![cin, self.d]);
        shapes.push(vec![self.d]);
        shapes
    }
}

/// `w × d` descriptor of one panorama.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor<f32>,
    pub model_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Rolled distances, Gaussian-weighted positives, pseudo-negatives.
    Continuous,
    /// Aligned distances, negatives only.
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMining {
    /// Same-room positives with distance-ranked pseudo-negatives.
    Rooms,
    /// Same-place positives, everything else negative.
    Places,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Rotation mask width in bins.
    pub sigma: f64,
    /// Margin.
    pub alpha: f64,
    pub loss: LossKind,
    pub mining: PairMining,
    pub positives_per_sample: usize,
    pub seed: u64,
    /// Log the running loss every this many steps (0 = never).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            momentum: 0.9,
            sigma: 1.0,
            alpha: 1.0,
            loss: LossKind::Continuous,
            mining: PairMining::Rooms,
            positives_per_sample: 1,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::InvalidConfig {
                field: format!("train.{field}"),
                reason: reason.into(),
            })
        };
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha", "must be positive");
        }
        if !(self.sigma >= 0.0) {
            return bad("sigma", "must be non-negative");
        }
        if self.positives_per_sample == 0 {
            return bad("positives_per_sample", "must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Batch loss at every step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the first and last `window` steps.
    pub fn smoothed_ends(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.losses.len();
        if n == 0 || window == 0 {
            return None;
        }
        let k = window.min(n);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..k]), mean(&self.losses[n - k..])))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor<f32>>,
    provenance: Provenance,
    hash: String,
}

impl Model {
    /// He-initialized weights, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng) as f32)
            })
            .collect();
        Ok(Model::from_parts(config, params, Provenance::default()))
    }

    fn from_parts(config: ModelConfig, params: Vec<Tensor<f32>>, provenance: Provenance) -> Model {
        let mut m = Model {
            config,
            params,
            provenance,
            hash: String::new(),
        };
        m.hash = short_hash(&m.body_bytes());
        m
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn set_provenance(&mut self, provenance: Provenance) {
        self.provenance = provenance;
        self.hash = short_hash(&self.body_bytes());
    }

    /// Identifies the exact config, weights and provenance.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Adds every parameter to `tape` as a leaf.
    pub fn param_leaves<T: Real>(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.cast().with_grad(true)))
            .collect()
    }

    /// Encoder graph for one `H × W × C` image, using `params` as weights.
    pub fn forward_on<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        image: Var,
    ) -> Result<Var> {
        let input = tape.value(image).shape();
        if input != self.config.input {
            return Err(Error::ShapeMismatch {
                op: "model input",
                expected: self.config.input.to_vec(),
                got: input.to_vec(),
            });
        }
        let mut x = image;
        for (l, pair) in self.config.layers.iter().zip(params.chunks(2)) {
            x = tape.conv2d(x, pair[0], (l.stride, l.stride), self.config.padding)?;
            x = tape.add_bias(x, pair[1])?;
            x = tape.relu(x);
            if l.pool > 1 {
                x = tape.maxpool2d(x, (l.pool, l.pool), (l.pool, l.pool))?;
            }
        }
        let columns = tape.mean_rows(x)?;
        let n = params.len();
        let mut z = tape.dense(columns, params[n - 2], params[n - 1])?;
        if self.config.normalize {
            z = tape.normalize(z);
        }
        Ok(z)
    }

    pub fn forward(&self, image: &Tensor<f32>) -> Result<FeatureMap> {
        let mut tape = Tape::<f32>::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        let x = tape.constant(image.clone());
        let z = self.forward_on(&mut tape, &params, x)?;
        let values = tape.value(z).clone();
        if !values.is_finite() {
            return Err(Error::invalid("forward produced non-finite features"));
        }
        Ok(FeatureMap {
            values,
            model_hash: self.hash.clone(),
        })
    }

    /// Distance between two features under this model's comparison rule:
    /// rolled when roll branching is on, aligned (rotation 0) otherwise.
    pub fn distance(&self, a: &FeatureMap, b: &FeatureMap) -> Result<RollingDistance> {
        feature_distance(self.config.roll_branching, &a.values, &b.values)
    }

    /// SGD with momentum over batches drawn from `samples`.
    pub fn train(&mut self, samples: &[Sample], config: &TrainConfig) -> Result<TrainReport> {
        config.validate()?;
        let labels: Vec<SampleLabel> = samples.iter().map(Sample::label).collect();
        let mode = match config.mining {
            PairMining::Rooms => BatchMode::Rooms,
            PairMining::Places => BatchMode::Places,
        };
        let mining = MiningConfig {
            positives_per_sample: config.positives_per_sample,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut velocity: Vec<Vec<f32>> =
            self.params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let mut losses = Vec::with_capacity(config.iterations);
        for step in 0..config.iterations {
            let batch = batch_builder(&labels, config.batch_size, mode, &mut rng)?;
            let batch_labels: Vec<SampleLabel> = batch.iter().map(|&i| labels[i]).collect();
            let pairs = match config.mining {
                PairMining::Rooms => mine_pairs(&batch_labels, &mining, &mut rng)?,
                PairMining::Places => mine_class_pairs(&batch_labels, &mining, &mut rng)?,
            };
            let mut tape = Tape::<f32>::new();
            let params = self.param_leaves(&mut tape);
            let mut features = Vec::with_capacity(batch.len());
            for &i in &batch {
                let x = tape.constant(samples[i].image.pixels.clone());
                features.push(self.forward_on(&mut tape, &params, x)?);
            }
            let loss = match config.loss {
                LossKind::Continuous => {
                    let rotations: Vec<usize> = batch_labels.iter().map(|l| l.rotation).collect();
                    continuous_lifted_loss(
                        &mut tape,
                        &pairs,
                        &features,
                        &rotations,
                        config.alpha,
                        config.sigma,
                    )?
                }
                LossKind::Original => {
                    original_lifted_loss(&mut tape, &pairs, &features, config.alpha)?
                }
            };
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            losses.push(value);
            if config.log_every > 0 && (step + 1) % config.log_every == 0 {
                let k = config.log_every.min(losses.len());
                let recent = losses[losses.len() - k..].iter().sum::<f64>() / k as f64;
                log::info!("step {:>5}  loss {recent:.5}", step + 1);
            }
            let grads = tape.backward(loss)?;
            let (lr, mu) = (config.learning_rate as f32, config.momentum as f32);
            for ((p, v), &var) in self.params.iter_mut().zip(&mut velocity).zip(&params) {
                let g = grads.data_or_zeros(var);
                for ((w, vel), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                    *vel = mu * *vel + g;
                    *w -= lr * *vel;
                }
            }
            if self.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged { step, loss: value });
            }
        }
        self.hash = short_hash(&self.body_bytes());
        Ok(TrainReport { losses })
    }

    fn body_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(WEIGHTS_MAGIC, WEIGHTS_VERSION);
        w.block(&serde_json::to_vec(&self.config).expect("config serializes"));
        w.block(&self.provenance.to_bytes());
        for p in &self.params {
            w.f32s(p.data().iter().copied());
        }
        w.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.body_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads weights, refusing a corrupted file or, when `expected` is
    /// given, a file written for a different architecture.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
        let bytes = io::read(path)?;
        let mut r = Reader::open(path, &bytes, WEIGHTS_MAGIC, WEIGHTS_VERSION)?;
        let config: ModelConfig = serde_json::from_slice(r.block()?)
            .map_err(|e| Error::format(path, format!("config block: {e}")))?;
        if let Some(want) = expected {
            if *want != config {
                return Err(Error::ConfigMismatch(format!(
                    "{} was written for a different model configuration",
                    path.display()
                )));
            }
        }
        config.validate()?;
        let provenance = Provenance::from_bytes(path, r.block()?)?;
        let mut params = Vec::new();
        for shape in config.param_shapes() {
            let data = r.f32s(shape.iter().product())?;
            params.push(Tensor::new(shape, data)?);
        }
        r.finish()?;
        Ok(Model::from_parts(config, params, provenance))
    }
}

/// Rolled or aligned distance between two `w × d` maps.
pub fn feature_distance(roll: bool, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<RollingDistance> {
    if roll {
        rolling_distance(a, b)
    } else {
        let d = aligned_distance(a, b)?;
        Ok(RollingDistance {
            distances: vec![d],
            d_min: d,
            r_hat: 0,
        })
    }
}

/// Training and comparison setup for one ablation arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Original lifted loss on place labels, zero padding, aligned distance.
    L,
    /// As `L` with panorama padding.
    LC,
    /// Adds roll branching; place-label pairs.
    LCR,
    /// Adds room-level pairs with distance-ranked pseudo-negatives.
    CLCR,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::L, Variant::LC, Variant::LCR, Variant::CLCR];

    pub fn name(self) -> &'static str {
        match self {
            Variant::L => "L",
            Variant::LC => "LC",
            Variant::LCR => "LCR",
            Variant::CLCR => "CLCR",
        }
    }

    pub fn apply(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let mut m = model.clone();
        let mut t = train.clone();
        match self {
            Variant::L => {
                m.padding = Padding {
                    horizontal: HorizontalPad::Zero,
                    vertical: VerticalPad::Zero,
                };
                m.roll_branching = false;
                t.loss = LossKind::Original;
                t.mining = PairMining::Places;
            }
            Variant::LC => {
                m.padding = Padding::OMNI;
                m.roll_branching = false;
                t.loss = LossKind::Original;
                t.mining = PairMining::Places;
            }
            Variant::LCR => {
                m.padding = Padding::OMNI;
                m.roll_branching = true;
                t.loss = LossKind::Continuous;
                t.mining = PairMining::Places;
            }
            Variant::CLCR => {
                m.padding = Padding::OMNI;
                m.roll_branching = true;
                t.loss = LossKind::Continuous;
                t.mining = PairMining::Rooms;
            }
        }
        (m, t)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown variant {s:?} (expected L, LC, LCR or CLCR)"
                ))
            })
    }
}
