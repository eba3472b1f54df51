//! Model components: convolutional encoder, global projector/predictor,
//! local projection branch, and the EMA-linked online/target pair.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;
use crate::Real;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    /// Normalize with batch statistics (training default).
    Batch,
    /// Normalize with stored running statistics (evaluation, tiny batches).
    Running,
    /// No normalization.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: (usize, usize),
    /// Output channels per stage; the last entry is the feature dim D.
    pub stage_channels: Vec<usize>,
    /// Spatial downsample factor per stage; the product is the stride p.
    pub stage_downsample: Vec<usize>,
    pub proj_hidden: usize,
    /// Global projection/prediction dimension d_g.
    pub proj_dim: usize,
    pub pred_hidden: usize,
    pub local_hidden: usize,
    /// Local projection dimension d_l.
    pub local_dim: usize,
    pub norm_mode: NormMode,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Desk-scale stand-in for the paper's ResNet-50 / 2048-4096-256 preset.
        ModelConfig {
            image_size: (64, 64),
            stage_channels: vec![16, 32, 64, 128],
            stage_downsample: vec![2, 2, 2, 1],
            proj_hidden: 256,
            proj_dim: 64,
            pred_hidden: 256,
            local_hidden: 128,
            local_dim: 64,
            norm_mode: NormMode::Batch,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn stride(&self) -> usize {
        self.stage_downsample.iter().product()
    }

    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().expect("at least one stage")
    }

    pub fn grid_hw(&self) -> (usize, usize) {
        (
            self.image_size.0 / self.stride(),
            self.image_size.1 / self.stride(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != self.stage_downsample.len() || self.stage_channels.is_empty()
        {
            return Err(Error::Config(
                "stage_channels and stage_downsample must be equal-length and nonempty".into(),
            ));
        }
        let p = self.stride();
        if p == 0 || self.image_size.0 % p != 0 || self.image_size.1 % p != 0 {
            return Err(Error::Config(format!(
                "stride {p} must divide image size {:?}",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Convolution / linear weights; subject to weight decay.
    Weight,
    /// Biases and normalization gains/shifts; never decayed.
    BiasGain,
    /// Non-trainable state (running statistics); never receives gradient.
    Buffer,
}

/// Flat named parameter container; layout order is the checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real> {
    pub names: Vec<String>,
    pub kinds: Vec<ParamKind>,
    pub values: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            kinds: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> usize {
        self.names.push(name.to_string());
        self.kinds.push(kind);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct NormLayer {
    gamma: usize,
    beta: usize,
    run_mean: usize,
    run_var: usize,
}

#[derive(Debug, Clone)]
struct LinearLayer {
    w: usize,
    b: usize,
}

/// Parameter layout of one network; indices point into a [`ParamStore`].
///
/// The predictor is registered last so the target store is exactly the
/// online store truncated before the predictor parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    stages: Vec<(ConvLayer, NormLayer)>,
    proj: (LinearLayer, NormLayer, LinearLayer),
    local: (ConvLayer, NormLayer, ConvLayer),
    pred: (LinearLayer, NormLayer, LinearLayer),
    /// First predictor parameter index; the target store ends here.
    pub predictor_start: usize,
}

fn kaiming_uniform<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let lim = (6.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64(rng.gen_range(-lim..lim)))
        .collect();
    Tensor::from_vec(shape, data)
}

impl Model {
    pub fn build<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        fn add_conv<T: Real>(
            store: &mut ParamStore<T>,
            name: &str,
            cin: usize,
            cout: usize,
            k: usize,
            stride: usize,
            rng: &mut rand_chacha::ChaCha8Rng,
        ) -> ConvLayer {
            let w = store.add(
                &format!("{name}.w"),
                ParamKind::Weight,
                kaiming_uniform(&[cout, cin, k, k], cin * k * k, rng),
            );
            let b = store.add(&format!("{name}.b"), ParamKind::BiasGain, Tensor::zeros(&[cout]));
            ConvLayer {
                w,
                b,
                stride,
                pad: k / 2,
            }
        }
        fn add_norm<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> NormLayer {
            NormLayer {
                gamma: store.add(
                    &format!("{name}.gamma"),
                    ParamKind::BiasGain,
                    Tensor::filled(&[c], T::one()),
                ),
                beta: store.add(&format!("{name}.beta"), ParamKind::BiasGain, Tensor::zeros(&[c])),
                run_mean: store.add(
                    &format!("{name}.run_mean"),
                    ParamKind::Buffer,
                    Tensor::zeros(&[c]),
                ),
                run_var: store.add(
                    &format!("{name}.run_var"),
                    ParamKind::Buffer,
                    Tensor::filled(&[c], T::one()),
                ),
            }
        }
        fn add_linear<T: Real>(
            store: &mut ParamStore<T>,
            name: &str,
            cin: usize,
            cout: usize,
            rng: &mut rand_chacha::ChaCha8Rng,
        ) -> LinearLayer {
            LinearLayer {
                w: store.add(
                    &format!("{name}.w"),
                    ParamKind::Weight,
                    kaiming_uniform(&[cout, cin], cin, rng),
                ),
                b: store.add(&format!("{name}.b"), ParamKind::BiasGain, Tensor::zeros(&[cout])),
            }
        }

        let mut stages = Vec::new();
        let mut cin = 3;
        for (si, (&cout, &ds)) in cfg
            .stage_channels
            .iter()
            .zip(&cfg.stage_downsample)
            .enumerate()
        {
            let conv = add_conv(store, &format!("enc.s{si}.conv"), cin, cout, 3, ds, &mut rng);
            let norm = add_norm(store, &format!("enc.s{si}.norm"), cout);
            stages.push((conv, norm));
            cin = cout;
        }
        let d = cfg.feature_dim();
        let proj = (
            add_linear(store, "proj.fc1", d, cfg.proj_hidden, &mut rng),
            add_norm(store, "proj.norm", cfg.proj_hidden),
            add_linear(store, "proj.fc2", cfg.proj_hidden, cfg.proj_dim, &mut rng),
        );
        let local = (
            add_conv(store, "local.conv1", d, cfg.local_hidden, 1, 1, &mut rng),
            add_norm(store, "local.norm", cfg.local_hidden),
            add_conv(store, "local.conv2", cfg.local_hidden, cfg.local_dim, 1, 1, &mut rng),
        );
        let predictor_start = store.len();
        let pred = (
            add_linear(store, "pred.fc1", cfg.proj_dim, cfg.pred_hidden, &mut rng),
            add_norm(store, "pred.norm", cfg.pred_hidden),
            add_linear(store, "pred.fc2", cfg.pred_hidden, cfg.proj_dim, &mut rng),
        );
        Ok(Model {
            cfg: cfg.clone(),
            stages,
            proj,
            local,
            pred,
            predictor_start,
        })
    }
}

/// Running-stat updates produced by a batch-mode forward pass:
/// `(run_mean index, run_var index, batch mean, batch var)`.
pub struct StatUpdates<T: Real>(pub Vec<(usize, usize, Tensor<T>, Tensor<T>)>);

impl<T: Real> StatUpdates<T> {
    /// Fold batch statistics into the store's running statistics.
    pub fn apply(&self, store: &mut ParamStore<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (mi, vi, mean, var) in &self.0 {
            for (r, &b) in store.values[*mi].data.iter_mut().zip(&mean.data) {
                *r = keep * *r + momentum * b;
            }
            for (r, &b) in store.values[*vi].data.iter_mut().zip(&var.data) {
                *r = keep * *r + momentum * b;
            }
        }
    }
}

/// One network's forward outputs on a batch.
pub struct ForwardOut<T: Real> {
    /// `(B, D, h, w)` encoder feature map.
    pub feature_map: Var,
    /// `(B, D)` spatial mean of the feature map.
    pub pooled: Var,
    /// `(B, d_g)` projection.
    pub projection: Var,
    /// `(B, d_g)` prediction (online network only).
    pub prediction: Option<Var>,
    /// `(B, d_l, h, w)` local-projected map.
    pub local_map: Var,
    pub stats: StatUpdates<T>,
}

/// A network bound to a graph: every parameter has been materialized as a
/// leaf, so gradients can be read back per parameter index after backward.
pub struct BoundNet<'a, T: Real> {
    pub model: &'a Model,
    pub store: &'a ParamStore<T>,
    pub leaves: Vec<Var>,
}

impl<'a, T: Real> BoundNet<'a, T> {
    pub fn bind(model: &'a Model, store: &'a ParamStore<T>, g: &mut Graph<T>) -> Self {
        let leaves = store.values.iter().map(|t| g.leaf(t.clone())).collect();
        BoundNet {
            model,
            store,
            leaves,
        }
    }

    fn norm(
        &self,
        g: &mut Graph<T>,
        x: Var,
        layer: &NormLayer,
        mode: NormMode,
        stats: &mut Vec<(usize, usize, Tensor<T>, Tensor<T>)>,
    ) -> Var {
        let eps = T::from_f64(self.model.cfg.bn_eps);
        match mode {
            NormMode::Off => x,
            NormMode::Batch => {
                let (y, mean, var) =
                    g.batch_norm(x, self.leaves[layer.gamma], self.leaves[layer.beta], eps);
                stats.push((layer.run_mean, layer.run_var, mean, var));
                y
            }
            NormMode::Running => {
                let mean = self.store.values[layer.run_mean].clone();
                let var = self.store.values[layer.run_var].clone();
                g.norm_with_stats(
                    x,
                    self.leaves[layer.gamma],
                    self.leaves[layer.beta],
                    &mean,
                    &var,
                    eps,
                )
            }
        }
    }

    /// Encoder only: `(feature map, pooled, stat updates)`.
    pub fn encoder_forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: NormMode,
    ) -> (Var, Var, StatUpdates<T>) {
        let mut stats = Vec::new();
        let mut h = x;
        for (conv, norm) in &self.model.stages {
            h = g.conv2d(h, self.leaves[conv.w], self.leaves[conv.b], conv.stride, conv.pad);
            h = self.norm(g, h, norm, mode, &mut stats);
            h = g.relu(h);
        }
        let pooled = g.global_avg_pool(h);
        (h, pooled, StatUpdates(stats))
    }

    fn mlp(
        &self,
        g: &mut Graph<T>,
        x: Var,
        head: &(LinearLayer, NormLayer, LinearLayer),
        mode: NormMode,
        stats: &mut Vec<(usize, usize, Tensor<T>, Tensor<T>)>,
    ) -> Var {
        let mut h = g.linear(x, self.leaves[head.0.w], self.leaves[head.0.b]);
        h = self.norm(g, h, &head.1, mode, stats);
        h = g.relu(h);
        g.linear(h, self.leaves[head.2.w], self.leaves[head.2.b])
    }

    fn local_branch(
        &self,
        g: &mut Graph<T>,
        fmap: Var,
        mode: NormMode,
        stats: &mut Vec<(usize, usize, Tensor<T>, Tensor<T>)>,
    ) -> Var {
        let (c1, n, c2) = &self.model.local;
        let mut h = g.conv2d(fmap, self.leaves[c1.w], self.leaves[c1.b], 1, 0);
        h = self.norm(g, h, n, mode, stats);
        h = g.relu(h);
        g.conv2d(h, self.leaves[c2.w], self.leaves[c2.b], 1, 0)
    }

    /// Full forward: encoder, global head(s), local projection branch.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: NormMode,
        with_predictor: bool,
    ) -> ForwardOut<T> {
        let (fmap, pooled, mut stats) = self.encoder_forward(g, x, mode);
        let projection = self.mlp(g, pooled, &self.model.proj, mode, &mut stats.0);
        let prediction = if with_predictor {
            Some(self.mlp(g, projection, &self.model.pred, mode, &mut stats.0))
        } else {
            None
        };
        let local_map = self.local_branch(g, fmap, mode, &mut stats.0);
        ForwardOut {
            feature_map: fmap,
            pooled,
            projection,
            prediction,
            local_map,
            stats,
        }
    }
}

/// Online parameters theta and EMA-tracked target parameters xi.
///
/// The target store is the online layout truncated before the predictor;
/// it never receives gradients, only [`ema_update`] writes.
#[derive(Debug, Clone)]
pub struct ModelPair<T: Real> {
    pub model: Model,
    pub online: ParamStore<T>,
    pub target: ParamStore<T>,
}

impl<T: Real> ModelPair<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut online = ParamStore::new();
        let model = Model::build(cfg, &mut online, seed)?;
        // target initialized as a copy of the online network
        let target = ParamStore {
            names: online.names[..model.predictor_start].to_vec(),
            kinds: online.kinds[..model.predictor_start].to_vec(),
            values: online.values[..model.predictor_start].to_vec(),
        };
        Ok(ModelPair {
            model,
            online,
            target,
        })
    }

    pub fn bind_online<'a>(&'a self, g: &mut Graph<T>) -> BoundNet<'a, T> {
        BoundNet::bind(&self.model, &self.online, g)
    }

    pub fn bind_target<'a>(&'a self, g: &mut Graph<T>) -> BoundNet<'a, T> {
        BoundNet::bind(&self.model, &self.target, g)
    }

    /// `xi <- m*xi + (1-m)*theta` over every shared component (including
    /// normalization statistics).
    pub fn ema_update(&mut self, m: T) -> Result<()> {
        ema_update(&self.online, &mut self.target, m)
    }
}

pub fn ema_update<T: Real>(
    online: &ParamStore<T>,
    target: &mut ParamStore<T>,
    m: T,
) -> Result<()> {
    if m < T::zero() || m > T::one() {
        return Err(Error::Config(format!("ema momentum {m} outside [0,1]")));
    }
    let one_minus = T::one() - m;
    for (i, tv) in target.values.iter_mut().enumerate() {
        debug_assert_eq!(online.names[i], target.names[i]);
        for (t, &o) in tv.data.iter_mut().zip(&online.values[i].data) {
            *t = m * *t + one_minus * o;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_size: (16, 16),
            stage_channels: vec![6, 10],
            stage_downsample: vec![2, 2],
            proj_hidden: 12,
            proj_dim: 8,
            pred_hidden: 12,
            local_hidden: 12,
            local_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn image_batch(b: usize, cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let (h, w) = cfg.image_size;
        let mut rng = rng_from_seed(seed);
        let data = (0..b * 3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[b, 3, h, w], data)
    }

    #[test]
    fn target_has_no_predictor_and_matching_shapes() {
        let pair = ModelPair::<f64>::new(&tiny_cfg(), 5).unwrap();
        assert!(pair.target.names.iter().all(|n| !n.starts_with("pred.")));
        assert!(pair.online.names.iter().any(|n| n.starts_with("pred.")));
        for i in 0..pair.target.len() {
            assert_eq!(pair.online.values[i].shape, pair.target.values[i].shape);
            assert_eq!(pair.online.names[i], pair.target.names[i]);
        }
        assert_eq!(
            pair.online.values[..pair.model.predictor_start],
            pair.target.values[..]
        );
    }

    #[test]
    fn feature_map_shape_and_pooled_mean() {
        let cfg = tiny_cfg();
        let pair = ModelPair::<f64>::new(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let net = pair.bind_online(&mut g);
        let x = g.leaf(image_batch(2, &cfg, 2));
        let (fmap, pooled, _) = net.encoder_forward(&mut g, x, NormMode::Batch);
        assert_eq!(g.value(fmap).shape, vec![2, 10, 4, 4]);
        assert_eq!(g.value(pooled).shape, vec![2, 10]);
        let fm = g.value(fmap).clone();
        let pl = g.value(pooled).clone();
        for b in 0..2 {
            for c in 0..10 {
                let base = (b * 10 + c) * 16;
                let mean: f64 = fm.data[base..base + 16].iter().sum::<f64>() / 16.0;
                assert!((mean - pl.data[b * 10 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_inputs_give_identical_outputs() {
        let cfg = tiny_cfg();
        let pair = ModelPair::<f64>::new(&cfg, 1).unwrap();
        let one = image_batch(1, &cfg, 3);
        let mut two = Tensor::zeros(&[2, 3, 16, 16]);
        two.data[..one.len()].copy_from_slice(&one.data);
        two.data[one.len()..].copy_from_slice(&one.data);
        let mut g = Graph::new();
        let net = pair.bind_online(&mut g);
        let x = g.leaf(two);
        let out = net.forward(&mut g, x, NormMode::Batch, true);
        let q = g.value(out.prediction.unwrap());
        let d = q.shape[1];
        assert_eq!(&q.data[..d], &q.data[d..]);
    }

    #[test]
    fn identity_local_branch_passes_features_through() {
        // identity 1x1 convs with normalization off: local map == feature map
        let mut cfg = tiny_cfg();
        cfg.local_hidden = 10;
        cfg.local_dim = 10;
        cfg.norm_mode = NormMode::Off;
        let mut pair = ModelPair::<f64>::new(&cfg, 1).unwrap();
        for (i, name) in pair.online.names.clone().iter().enumerate() {
            if name == "local.conv1.w" || name == "local.conv2.w" {
                let t = &mut pair.online.values[i];
                let c = t.shape[0];
                t.data.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..c {
                    t.data[(k * t.shape[1] + k) * t.shape[2] * t.shape[3]] = 1.0;
                }
            }
        }
        let mut g = Graph::new();
        let net = pair.bind_online(&mut g);
        let x = g.leaf(image_batch(1, &cfg, 9).map(|v| v + 0.5));
        let out = net.forward(&mut g, x, NormMode::Off, true);
        let fm = g.value(out.feature_map).clone();
        let lm = g.value(out.local_map).clone();
        // encoder output is post-relu, hence non-negative: the relu inside
        // the local branch is transparent here
        for (a, b) in fm.data.iter().zip(&lm.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_final_conv_gives_zero_map_and_pooled() {
        let cfg = tiny_cfg();
        let mut pair = ModelPair::<f64>::new(&cfg, 2).unwrap();
        let i = pair.online.index_of("enc.s1.conv.w").unwrap();
        pair.online.values[i] = Tensor::zeros(&pair.online.values[i].shape);
        let mut g = Graph::new();
        let net = pair.bind_online(&mut g);
        let x = g.leaf(image_batch(1, &cfg, 4));
        let (fmap, pooled, _) = net.encoder_forward(&mut g, x, NormMode::Off);
        assert!(g.value(fmap).data.iter().all(|&v| v == 0.0));
        assert!(g.value(pooled).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ema_endpoints() {
        let cfg = tiny_cfg();
        let mut pair = ModelPair::<f64>::new(&cfg, 1).unwrap();
        for v in &mut pair.online.values {
            for x in &mut v.data {
                *x += 1.0;
            }
        }
        let before = pair.target.clone();
        pair.ema_update(1.0).unwrap();
        assert_eq!(pair.target, before);
        pair.ema_update(0.0).unwrap();
        for i in 0..pair.target.len() {
            assert_eq!(pair.target.values[i], pair.online.values[i]);
        }
        assert!(pair.ema_update(1.5).is_err());
    }

    #[test]
    fn ema_scalar_case() {
        // m=0.996 with xi=1, theta=0 gives 0.996
        let mut online = ParamStore::<f64>::new();
        online.add("p", ParamKind::Weight, Tensor::scalar(0.0));
        let mut target = ParamStore::<f64>::new();
        target.add("p", ParamKind::Weight, Tensor::scalar(1.0));
        ema_update(&online, &mut target, 0.996).unwrap();
        assert_eq!(target.values[0].item(), 0.996);
    }

    #[test]
    fn heads_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let pair = ModelPair::<f64>::new(&cfg, 7).unwrap();
        let x = image_batch(2, &cfg, 8);

        let eval = |store: &ParamStore<f64>| -> f64 {
            let mut g = Graph::new();
            let net = BoundNet::bind(&pair.model, store, &mut g);
            let xv = g.leaf(x.clone());
            let out = net.forward(&mut g, xv, NormMode::Batch, true);
            let q = out.prediction.unwrap();
            let l = g.mean_all(q);
            let lm = g.mean_all(out.local_map);
            let tot = g.affine2(l, lm, 0.6, 0.4);
            g.value(tot).item()
        };

        let mut g = Graph::new();
        let net = pair.bind_online(&mut g);
        let leaves = net.leaves.clone();
        let xv = g.leaf(x.clone());
        let out = net.forward(&mut g, xv, NormMode::Batch, true);
        let q = out.prediction.unwrap();
        let l = g.mean_all(q);
        let lm = g.mean_all(out.local_map);
        let tot = g.affine2(l, lm, 0.6, 0.4);
        let grads = g.backward(tot);

        let mut rng = rng_from_seed(99);
        let eps = 1e-6;
        for _ in 0..30 {
            let pi = rng.gen_range(0..pair.online.len());
            if pair.online.kinds[pi] == ParamKind::Buffer {
                continue;
            }
            let k = rng.gen_range(0..pair.online.values[pi].len());
            let mut plus = pair.online.clone();
            plus.values[pi].data[k] += eps;
            let mut minus = pair.online.clone();
            minus.values[pi].data[k] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let an = grads[leaves[pi]].as_ref().map(|t| t.data[k]).unwrap_or(0.0);
            // central differences carry ~1e-11 absolute noise here, so tiny
            // gradients are compared absolutely
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
            assert!(err < 1e-6, "param {pi} ({}) elem {k}: {an} vs {fd}", pair.online.names[pi]);
        }
    }
}
