//! 3D U-Net segmentation networks with region (sigmoid) outputs and deep
//! supervision heads.
//!
//! Two variants share the same builder: the baseline (batch normalization,
//! encoder width multiplier 1) and the expanded network (group
//! normalization, encoder width doubled, higher filter cap). Decoder widths
//! never use the multiplier.
//!
//! Layout of one model, for `levels = L`:
//!
//! - `enc{l}`: two 3³ convolutions, each followed by normalization and
//!   LeakyReLU. Level 0 keeps the resolution, deeper levels start with a
//!   stride-2 convolution.
//! - `dec{l}` for `l < L - 1`: a 2³ stride-2 transposed convolution from the
//!   level below, concatenation with the `enc{l}` skip, then the same double
//!   convolution.
//! - `head{h}`: 1³ convolution plus sigmoid on the output of decoder level `h`
//!   (the bottleneck when `h = L - 1`).
//!
//! Convolutions that feed a normalization layer carry no bias, since the
//! normalization would cancel it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{he_normal, Bound, ParamStore};
use crate::nn::{Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running normalization statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
    Group,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetConfig {
    pub levels: usize,
    pub base_filters: usize,
    pub max_filters: usize,
    pub encoder_multiplier: usize,
    pub norm: NormKind,
    pub group_count: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub leaky_slope: f64,
    pub deep_supervision_heads: usize,
    pub patch_shape: [usize; 3],
}

impl Default for SegNetConfig {
    /// Desk-scale baseline.
    fn default() -> Self {
        SegNetConfig {
            levels: 3,
            base_filters: 8,
            max_filters: 64,
            encoder_multiplier: 1,
            norm: NormKind::Batch,
            group_count: 4,
            in_channels: 4,
            out_channels: 3,
            leaky_slope: 0.01,
            deep_supervision_heads: 1,
            patch_shape: [32; 3],
        }
    }
}

impl SegNetConfig {
    /// Full-size baseline: five levels, 128³ patches, widths capped at 320.
    pub fn baseline() -> Self {
        SegNetConfig {
            levels: 5,
            base_filters: 32,
            max_filters: 320,
            group_count: 32,
            deep_supervision_heads: 3,
            patch_shape: [128; 3],
            ..Self::default()
        }
    }

    /// Full-size expanded network: doubled encoder, cap 512, 32 groups.
    pub fn expanded() -> Self {
        Self::baseline().into_expanded(512)
    }

    /// The expanded counterpart of this config with the given filter cap.
    pub fn into_expanded(self, max_filters: usize) -> Self {
        SegNetConfig {
            encoder_multiplier: 2,
            norm: NormKind::Group,
            max_filters,
            ..self
        }
    }

    /// Desk-scale expanded network matching [`SegNetConfig::default`].
    pub fn desk_expanded() -> Self {
        Self::default().into_expanded(128)
    }

    pub fn encoder_channels(&self) -> Vec<usize> {
        widths(self.base_filters * self.encoder_multiplier, self.max_filters, self.levels)
    }

    /// Decoder widths for levels `0..levels - 1`.
    pub fn decoder_channels(&self) -> Vec<usize> {
        widths(self.base_filters, self.max_filters, self.levels - 1)
    }

    /// Groups used to normalize a `channels`-wide layer.
    pub fn groups_for(&self, channels: usize) -> usize {
        self.group_count.min(channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.levels < 2 {
            return bad(format!("levels must be at least 2, got {}", self.levels));
        }
        if self.deep_supervision_heads > self.levels - 1 {
            return bad(format!(
                "{} deep supervision heads for {} levels (at most {})",
                self.deep_supervision_heads,
                self.levels,
                self.levels - 1
            ));
        }
        if self.base_filters == 0 || self.max_filters == 0 {
            return bad("filter counts must be positive".into());
        }
        if !matches!(self.encoder_multiplier, 1 | 2) {
            return bad(format!("encoder_multiplier must be 1 or 2, got {}", self.encoder_multiplier));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad(format!("leaky_slope must be a non-negative number, got {}", self.leaky_slope));
        }
        let step = 1usize << (self.levels - 1);
        if self.patch_shape.iter().any(|&s| s == 0 || s % step != 0) {
            return bad(format!(
                "patch shape {:?} is not divisible by {step} on every axis",
                self.patch_shape
            ));
        }
        if self.norm == NormKind::Group {
            if self.group_count == 0 {
                return bad("group_count must be positive".into());
            }
            let chans = self.encoder_channels().into_iter().chain(self.decoder_channels());
            for c in chans {
                if c % self.groups_for(c) != 0 {
                    return bad(format!(
                        "{c} channels are not divisible into {} groups",
                        self.groups_for(c)
                    ));
                }
            }
        }
        Ok(())
    }
}

fn widths(base: usize, cap: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| (base << i).min(cap)).collect()
}

/// Encoder width per level: `min(base · multiplier · 2^i, max_filters)`.
pub fn channel_plan(config: &SegNetConfig) -> Vec<usize> {
    config.encoder_channels()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// He-normal with the given fan-in.
    He(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec { name, shape, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct Layout {
    params: Vec<ParamSpec>,
    buffers: Vec<ParamSpec>,
}

impl Layout {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        self.params.push(ParamSpec::new(
            format!("{name}.weight"),
            vec![cout, cin, k, k, k],
            Init::He(cin * k * k * k),
        ));
        if bias {
            self.params
                .push(ParamSpec::new(format!("{name}.bias"), vec![cout], Init::Zeros));
        }
    }

    fn norm(&mut self, name: &str, c: usize, kind: NormKind) {
        self.params
            .push(ParamSpec::new(format!("{name}.scale"), vec![c], Init::Ones));
        self.params
            .push(ParamSpec::new(format!("{name}.shift"), vec![c], Init::Zeros));
        if kind == NormKind::Batch {
            self.buffers
                .push(ParamSpec::new(format!("{name}.running_mean"), vec![c], Init::Zeros));
            self.buffers
                .push(ParamSpec::new(format!("{name}.running_var"), vec![c], Init::Ones));
        }
    }

    fn double_conv(&mut self, prefix: &str, cin: usize, cout: usize, kind: NormKind) {
        self.conv(&format!("{prefix}.conv0"), cin, cout, 3, false);
        self.norm(&format!("{prefix}.norm0"), cout, kind);
        self.conv(&format!("{prefix}.conv1"), cout, cout, 3, false);
        self.norm(&format!("{prefix}.norm1"), cout, kind);
    }
}

fn layout(config: &SegNetConfig) -> Layout {
    let enc = config.encoder_channels();
    let dec = config.decoder_channels();
    let top = config.levels - 1;
    let mut l = Layout {
        params: Vec::new(),
        buffers: Vec::new(),
    };
    let mut cin = config.in_channels;
    for (i, &c) in enc.iter().enumerate() {
        l.double_conv(&format!("enc{i}"), cin, c, config.norm);
        cin = c;
    }
    for i in (0..top).rev() {
        let below = if i + 1 == top { enc[top] } else { dec[i + 1] };
        l.params.push(ParamSpec::new(
            format!("dec{i}.up.weight"),
            vec![below, dec[i], 2, 2, 2],
            Init::He(below),
        ));
        l.params
            .push(ParamSpec::new(format!("dec{i}.up.bias"), vec![dec[i]], Init::Zeros));
        l.double_conv(&format!("dec{i}"), dec[i] + enc[i], dec[i], config.norm);
    }
    for h in 0..=config.deep_supervision_heads {
        let c = if h == top { enc[top] } else { dec[h] };
        l.conv(&format!("head{h}"), c, config.out_channels, 1, true);
    }
    l
}

/// Trainable parameters in construction order.
pub fn parameter_specs(config: &SegNetConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    Ok(layout(config).params)
}

/// Number of trainable scalars, from shapes alone.
pub fn parameter_count(config: &SegNetConfig) -> Result<usize> {
    Ok(parameter_specs(config)?.iter().map(ParamSpec::numel).sum())
}

fn materialize(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for spec in specs {
        let t = match spec.init {
            Init::He(fan_in) => he_normal(&spec.shape, fan_in, rng),
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::full(&spec.shape, 1.0),
        };
        store.insert(spec.name.clone(), t);
    }
    store
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch normalization uses batch statistics.
    Train,
    /// Batch normalization uses the running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    config: SegNetConfig,
    params: ParamStore,
    /// Running normalization statistics (batch-norm models only).
    buffers: ParamStore,
}

/// Tape handles produced by [`SegModel::forward`].
pub struct SegGraph {
    /// Sigmoid outputs, full resolution first.
    pub outputs: Vec<Var>,
    pub params: Bound,
    batch_norms: Vec<(String, Var)>,
}

impl SegModel {
    /// Deterministic in `(config, seed)`.
    pub fn build(config: SegNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let l = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = materialize(&l.params, &mut rng);
        let buffers = materialize(&l.buffers, &mut rng);
        Ok(SegModel {
            config,
            params,
            buffers,
        })
    }

    /// Reassemble a model from stored tensors, checking them against `config`.
    pub fn from_parts(config: SegNetConfig, params: ParamStore, buffers: ParamStore) -> Result<Self> {
        let fresh = Self::build(config, 0)?;
        fresh.params.check_layout(&params)?;
        fresh.buffers.check_layout(&buffers)?;
        Ok(SegModel {
            config: fresh.config,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 5 || shape[1] != c.in_channels || shape[2..] != c.patch_shape {
            return Err(Error::ShapeMismatch(format!(
                "input {shape:?} does not match [N, {}, {:?}]",
                c.in_channels, c.patch_shape
            )));
        }
        if shape[0] == 0 {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        Ok(())
    }

    /// Records the network on `tape`. Parameters become differentiable
    /// leaves when `trainable` is set.
    pub fn forward(&self, tape: &mut Tape, input: Var, mode: Mode, trainable: bool) -> Result<SegGraph> {
        self.check_input(tape.value(input).shape())?;
        let params = self.params.bind(tape, trainable);
        let mut net = Builder {
            model: self,
            tape,
            params: &params,
            mode,
            batch_norms: Vec::new(),
        };
        let top = self.config.levels - 1;
        let mut skips = Vec::with_capacity(top + 1);
        let mut h = input;
        for i in 0..=top {
            let stride = if i == 0 { 1 } else { 2 };
            h = net.double_conv(&format!("enc{i}"), h, stride)?;
            skips.push(h);
        }
        let mut level_out = vec![None; top + 1];
        level_out[top] = Some(h);
        for i in (0..top).rev() {
            let p = |s: &str| params.var(&format!("dec{i}.up.{s}"));
            let up = net.tape.conv_transpose(h, p("weight"), p("bias"))?;
            let cat = net.tape.concat(up, skips[i])?;
            h = net.double_conv(&format!("dec{i}"), cat, 1)?;
            level_out[i] = Some(h);
        }
        let mut outputs = Vec::new();
        for head in 0..=self.config.deep_supervision_heads {
            let src = level_out[head].expect("every level has an output");
            let w = params.var(&format!("head{head}.weight"));
            let b = params.var(&format!("head{head}.bias"));
            let logits = net.tape.conv3d(src, w, Some(b), 1, 0)?;
            outputs.push(net.tape.sigmoid(logits));
        }
        let batch_norms = net.batch_norms;
        Ok(SegGraph {
            outputs,
            params,
            batch_norms,
        })
    }

    /// Inference-mode outputs for a `[N, C, D, H, W]` batch.
    pub fn predict(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let graph = self.forward(&mut tape, x, Mode::Eval, false)?;
        Ok(graph.outputs.iter().map(|v| tape.value(*v).clone()).collect())
    }

    /// Fold the batch statistics of a training-mode pass into the running
    /// estimates.
    pub fn update_running_stats(&mut self, tape: &Tape, graph: &SegGraph) {
        for (name, var) in &graph.batch_norms {
            let Some(stats) = tape.batch_stats(*var) else { continue };
            let pairs = [("running_mean", &stats.mean), ("running_var", &stats.var)];
            for (buf, batch) in pairs {
                if let Some(t) = self.buffers.get_mut(&format!("{name}.{buf}")) {
                    for (r, b) in t.data_mut().iter_mut().zip(batch) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                    }
                }
            }
        }
    }
}

struct Builder<'a> {
    model: &'a SegModel,
    tape: &'a mut Tape,
    params: &'a Bound,
    mode: Mode,
    batch_norms: Vec<(String, Var)>,
}

impl Builder<'_> {
    fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let scale = self.params.var(&format!("{name}.scale"));
        let shift = self.params.var(&format!("{name}.shift"));
        let cfg = &self.model.config;
        match (cfg.norm, self.mode) {
            (NormKind::Group, _) => {
                let groups = cfg.groups_for(self.tape.value(x).shape()[1]);
                self.tape.group_norm(x, scale, shift, groups, NORM_EPS)
            }
            (NormKind::Batch, Mode::Train) => {
                let y = self.tape.batch_norm(x, scale, shift, NORM_EPS)?;
                self.batch_norms.push((name.to_string(), y));
                Ok(y)
            }
            (NormKind::Batch, Mode::Eval) => {
                let buf = |s: &str| {
                    self.model
                        .buffers
                        .get(&format!("{name}.{s}"))
                        .expect("batch-norm buffers exist")
                        .data()
                        .to_vec()
                };
                let (mean, var) = (buf("running_mean"), buf("running_var"));
                self.tape.channel_affine(x, scale, shift, &mean, &var, NORM_EPS)
            }
        }
    }

    fn double_conv(&mut self, prefix: &str, x: Var, first_stride: usize) -> Result<Var> {
        let mut h = x;
        for j in 0..2 {
            let stride = if j == 0 { first_stride } else { 1 };
            let w = self.params.var(&format!("{prefix}.conv{j}.weight"));
            h = self.tape.conv3d(h, w, None, stride, 1)?;
            h = self.norm(&format!("{prefix}.norm{j}"), h)?;
            h = self.tape.leaky_relu(h, self.model.config.leaky_slope);
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(norm: NormKind) -> SegNetConfig {
        SegNetConfig {
            levels: 2,
            base_filters: 2,
            max_filters: 8,
            norm,
            group_count: 2,
            deep_supervision_heads: 1,
            patch_shape: [8; 3],
            ..SegNetConfig::default()
        }
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn channel_plans() {
        assert_eq!(channel_plan(&SegNetConfig::baseline()), [32, 64, 128, 256, 320]);
        assert_eq!(channel_plan(&SegNetConfig::expanded()), [64, 128, 256, 512, 512]);
        assert_eq!(channel_plan(&SegNetConfig::default()), [8, 16, 32]);
        assert_eq!(SegNetConfig::expanded().decoder_channels(), [32, 64, 128, 256]);
    }

    /// Hand-counted layer by layer for base 8, three levels, one extra head:
    /// encoder 2624 + 10432 + 41600, decoder 24912 + 6248, heads 27 + 51.
    const DESK_BASELINE_PARAMS: usize = 85_894;

    /// Independent walk: per level, weights of both convs plus scale/shift.
    fn walk_count(c: &SegNetConfig) -> usize {
        let cap = |w: usize| w.min(c.max_filters);
        let enc: Vec<usize> = (0..c.levels)
            .map(|i| cap(c.base_filters * c.encoder_multiplier * 2usize.pow(i as u32)))
            .collect();
        let dec: Vec<usize> = (0..c.levels).map(|i| cap(c.base_filters * 2usize.pow(i as u32))).collect();
        let block = |a: usize, b: usize| 27 * a * b + 2 * b + 27 * b * b + 2 * b;
        let mut total = 0;
        let mut prev = c.in_channels;
        for &e in &enc {
            total += block(prev, e);
            prev = e;
        }
        let mut below = enc[c.levels - 1];
        for i in (0..c.levels - 1).rev() {
            total += 8 * below * dec[i] + dec[i];
            total += block(dec[i] + enc[i], dec[i]);
            below = dec[i];
        }
        for h in 0..=c.deep_supervision_heads {
            let src = if h == c.levels - 1 { enc[h] } else { dec[h] };
            total += src * c.out_channels + c.out_channels;
        }
        total
    }

    #[test]
    fn parameter_counts_match_the_shape_walk() {
        let desk = SegNetConfig::default();
        assert_eq!(walk_count(&desk), DESK_BASELINE_PARAMS);
        assert_eq!(parameter_count(&desk).unwrap(), DESK_BASELINE_PARAMS);
        assert_eq!(SegModel::build(desk, 3).unwrap().parameter_count(), DESK_BASELINE_PARAMS);
        for cfg in [
            SegNetConfig::baseline(),
            SegNetConfig::expanded(),
            SegNetConfig::desk_expanded(),
            tiny(NormKind::Group),
        ] {
            assert_eq!(parameter_count(&cfg).unwrap(), walk_count(&cfg), "{cfg:?}");
        }
        assert!(parameter_count(&SegNetConfig::expanded()).unwrap() > parameter_count(&SegNetConfig::baseline()).unwrap());
        assert!(
            parameter_count(&SegNetConfig::desk_expanded()).unwrap()
                > parameter_count(&SegNetConfig::default()).unwrap()
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = SegNetConfig::default();
        let cases = [
            SegNetConfig { levels: 1, deep_supervision_heads: 0, ..base.clone() },
            SegNetConfig { deep_supervision_heads: 3, ..base.clone() },
            SegNetConfig { patch_shape: [32, 30, 32], ..base.clone() },
            SegNetConfig { encoder_multiplier: 3, ..base.clone() },
            SegNetConfig { norm: NormKind::Group, group_count: 3, ..base.clone() },
        ];
        for cfg in cases {
            assert!(matches!(SegModel::build(cfg.clone(), 0), Err(Error::InvalidConfig(_))), "{cfg:?}");
        }
        // group count above the channel count falls back to per-channel groups
        let cfg = SegNetConfig { norm: NormKind::Group, group_count: 32, ..base };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn builds_are_deterministic_in_the_seed() {
        let a = SegModel::build(tiny(NormKind::Batch), 5).unwrap();
        let b = SegModel::build(tiny(NormKind::Batch), 5).unwrap();
        let c = SegModel::build(tiny(NormKind::Batch), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn outputs_are_probabilities_at_halving_resolutions() {
        let cfg = SegNetConfig {
            levels: 3,
            deep_supervision_heads: 2,
            patch_shape: [8, 8, 16],
            ..tiny(NormKind::Group)
        };
        let model = SegModel::build(cfg, 1).unwrap();
        let out = model.predict(&random_input(&[2, 4, 8, 8, 16], 2)).unwrap();
        let shapes: Vec<_> = out.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, [vec![2, 3, 8, 8, 16], vec![2, 3, 4, 4, 8], vec![2, 3, 2, 2, 4]]);
        for t in &out {
            assert!(t.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let model = SegModel::build(tiny(NormKind::Batch), 1).unwrap();
        assert!(model.predict(&Tensor::zeros(&[1, 4, 8, 8, 16])).is_err());
        assert!(model.predict(&Tensor::zeros(&[1, 3, 8, 8, 8])).is_err());
    }

    #[test]
    fn summed_output_gradients_match_central_differences() {
        for norm in [NormKind::Batch, NormKind::Group] {
            let model = SegModel::build(tiny(norm), 11).unwrap();
            let input = random_input(&[2, 4, 8, 8, 8], 12);
            let total = |m: &SegModel| {
                let mut tape = Tape::new();
                let x = tape.constant(input.clone());
                let g = m.forward(&mut tape, x, Mode::Train, true).unwrap();
                let sums: Vec<(Var, f64)> = g.outputs.iter().map(|&o| (tape.sum(o), 1.0)).collect();
                let root = tape.linear(&sums, 0.0);
                (tape, g, root)
            };
            let (tape, graph, root) = total(&model);
            let grads = tape.backward(root);
            let mut worst: f64 = 0.0;
            let mut checked = 0;
            for (name, var) in graph.params.iter() {
                let analytic = grads.get(var).unwrap();
                let n = analytic.len();
                for i in [0, n / 3, n / 2, n - 1] {
                    let eval = |delta: f64| {
                        let mut m = model.clone();
                        m.params_mut().get_mut(name).unwrap().data_mut()[i] += delta;
                        let (t, _, r) = total(&m);
                        t.value(r).item()
                    };
                    let h = 1e-5;
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = analytic.data()[i];
                    let scale = a.abs().max(fd.abs());
                    if scale > 1e-7 {
                        worst = worst.max((a - fd).abs() / scale);
                        checked += 1;
                    }
                }
            }
            assert!(checked > 50, "{checked}");
            assert!(worst < 1e-4, "{norm:?}: worst relative error {worst}");
        }
    }

    fn first_sample_alone_vs_batched(norm: NormKind) -> f64 {
        let model = SegModel::build(tiny(norm), 3).unwrap();
        let batch = random_input(&[3, 4, 8, 8, 8], 4);
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let g = model.forward(&mut tape, v, Mode::Train, false).unwrap();
            tape.value(g.outputs[0]).sample(0)
        };
        let alone = run(&Tensor::stack(&[batch.sample(0)]).unwrap());
        run(&batch).max_abs_diff(&alone)
    }

    #[test]
    fn group_norm_has_no_cross_sample_coupling() {
        assert!(first_sample_alone_vs_batched(NormKind::Group) < 1e-12);
        assert!(first_sample_alone_vs_batched(NormKind::Batch) > 1e-6);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for norm in [NormKind::Batch, NormKind::Group] {
            let cfg = SegNetConfig {
                levels: 3,
                deep_supervision_heads: 2,
                patch_shape: [8; 3],
                ..tiny(norm)
            };
            let model = SegModel::build(cfg, 9).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(random_input(&[2, 4, 8, 8, 8], 10));
            let g = model.forward(&mut tape, x, Mode::Train, true).unwrap();
            // a non-uniform readout so normalization cannot cancel the gradient
            let terms: Vec<(Var, f64)> = g
                .outputs
                .iter()
                .map(|&o| {
                    let target = random_input(tape.value(o).shape(), 20).reshaped(tape.value(o).shape().to_vec()).unwrap();
                    (tape.mse(o, &target).unwrap(), 1.0)
                })
                .collect();
            let root = tape.linear(&terms, 0.0);
            let grads = tape.backward(root);
            for (name, var) in g.params.iter() {
                let gr = grads.get(var).unwrap();
                assert!(gr.data().iter().any(|v| v.abs() > 1e-12), "{norm:?}: {name} has zero gradient");
            }
        }
    }

    #[test]
    fn running_statistics_follow_the_batch() {
        let mut model = SegModel::build(tiny(NormKind::Batch), 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random_input(&[2, 4, 8, 8, 8], 3));
        let g = model.forward(&mut tape, x, Mode::Train, false).unwrap();
        model.update_running_stats(&tape, &g);
        let rv = model.buffers().get("enc0.norm0.running_var").unwrap();
        assert!(rv.data().iter().all(|&v| v != 1.0));
        let eval = model.predict(&random_input(&[1, 4, 8, 8, 8], 3)).unwrap();
        assert!(eval[0].data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn from_parts_checks_layout() {
        let model = SegModel::build(tiny(NormKind::Batch), 2).unwrap();
        let rebuilt =
            SegModel::from_parts(model.config().clone(), model.params().clone(), model.buffers().clone()).unwrap();
        assert_eq!(rebuilt, model);
        let wider = SegNetConfig { base_filters: 4, ..tiny(NormKind::Batch) };
        assert!(SegModel::from_parts(wider, model.params().clone(), model.buffers().clone()).is_err());
        // the group-normalized variant has no running statistics
        assert!(SegModel::from_parts(tiny(NormKind::Group), model.params().clone(), model.buffers().clone()).is_err());
    }
}
