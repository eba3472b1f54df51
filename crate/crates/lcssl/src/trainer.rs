//! Training loop: two-view sampling, online/target forward passes,
//! combined loss, SGD with momentum, and EMA target updates.

use crate::augment::{apply_transform, sample_transform, AugConfig, TransformKind, TransformSpec};
use crate::error::Result;
use crate::geometry::{build_correspondences, CorrespondenceSet, FeatureGeometry};
use crate::graph::Graph;
use crate::image::Image;
use crate::losses::{combine, global_loss, local_loss, LossBreakdown, LossConfig};
use crate::model::{ModelConfig, ModelPair, NormMode, ParamKind};
use crate::rng::{mix_seed, rng_from_seed};
use crate::tensor::Tensor;
use crate::Real;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Learning rate at reference batch 256; the effective peak rate is
    /// `base_lr * batch_size / 256`.
    pub base_lr: f64,
    pub momentum: f64,
    /// Applied to convolution/linear weights only.
    pub weight_decay: f64,
    /// Fraction of steps spent in linear warmup before cosine decay.
    pub warmup_frac: f64,
    /// EMA momentum at step 0; annealed to 1.0 on a cosine.
    pub ema_base: f64,
    /// Layer-wise trust-ratio scaling on weight updates.
    pub lars: bool,
    pub seed: u64,
    pub model: ModelConfig,
    pub aug: AugConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 32,
            base_lr: 2.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_frac: 0.05,
            ema_base: 0.996,
            lars: false,
            seed: 0,
            model: ModelConfig::default(),
            aug: AugConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.aug.validate()?;
        self.loss.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(crate::error::Error::Config(
                "steps and batch_size must be positive".into(),
            ));
        }
        if self.aug.out_size != self.model.image_size {
            return Err(crate::error::Error::Config(format!(
                "augmentation output {:?} must match model input {:?}",
                self.aug.out_size, self.model.image_size
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(crate::error::Error::Config(
                "warmup_frac must be in [0,1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_base) {
            return Err(crate::error::Error::Config(
                "ema_base must be in [0,1]".into(),
            ));
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps as f64).round() as usize
    }
}

/// Learning rate at `step`: linear ramp `0 -> peak` over the warmup
/// steps, then cosine decay `peak -> 0` over the remainder.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let peak = cfg.peak_lr();
    let warm = cfg.warmup_steps();
    if step < warm {
        return peak * step as f64 / warm as f64;
    }
    if cfg.steps <= warm {
        return peak;
    }
    let t = (step - warm) as f64 / (cfg.steps - warm) as f64;
    peak * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
}

/// EMA momentum at `step`: `1 - (1 - m0) * (cos(pi * s / T) + 1) / 2`.
///
/// Endpoints are exact: `m0` at step 0 and `1.0` at step `total`.
pub fn ema_momentum_at(base: f64, step: usize, total: usize) -> f64 {
    assert!(total > 0, "ema schedule needs a positive step count");
    if step == 0 {
        return base;
    }
    if step >= total {
        return 1.0;
    }
    let c = ((std::f64::consts::PI * step as f64 / total as f64).cos() + 1.0) / 2.0;
    1.0 - (1.0 - base) * c
}

/// Deterministic per-epoch dataset order.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(mix_seed(seed, epoch, 0, 99));
    idx.shuffle(&mut rng);
    idx
}

/// The two per-image view specifications for a training step.
pub fn step_transforms(
    cfg: &TrainConfig,
    step: usize,
    slot: usize,
) -> Result<(TransformSpec, TransformSpec)> {
    let spec_c = sample_transform(
        mix_seed(cfg.seed, step as u64, slot as u64, 0),
        &cfg.aug,
        TransformKind::ColorOnly,
    )?;
    let spec_sc = sample_transform(
        mix_seed(cfg.seed, step as u64, slot as u64, 1),
        &cfg.aug,
        TransformKind::SpatialColor,
    )?;
    Ok((spec_c, spec_sc))
}

/// Pack images (channel-last, [0,1]) into an NCHW batch tensor.
pub fn images_to_batch<T: Real>(views: &[Image]) -> Tensor<T> {
    let (h, w) = (views[0].height, views[0].width);
    let b = views.len();
    let mut out = Tensor::zeros(&[b, 3, h, w]);
    for (bi, img) in views.iter().enumerate() {
        assert_eq!((img.height, img.width), (h, w));
        for y in 0..h {
            for x in 0..w {
                let px = img.pixel(x, y);
                for c in 0..3 {
                    out.data[((bi * 3 + c) * h + y) * w + x] = T::from_f64(px[c] as f64);
                }
            }
        }
    }
    out
}

#[derive(Debug)]
pub struct Trainer<T: Real> {
    pub cfg: TrainConfig,
    pub pair: ModelPair<T>,
    /// SGD momentum buffers, one per online parameter (zeros for buffers).
    pub velocity: Vec<Tensor<T>>,
    pub step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let pair = ModelPair::new(&cfg.model, cfg.seed)?;
        let velocity = pair
            .online
            .values
            .iter()
            .map(|t| Tensor::zeros(&t.shape))
            .collect();
        Ok(Trainer {
            cfg,
            pair,
            velocity,
            step: 0,
        })
    }

    pub fn geometry(&self) -> FeatureGeometry {
        let (h, w) = self.cfg.model.image_size;
        FeatureGeometry::new(h, w, self.cfg.model.stride()).expect("validated config")
    }

    /// One optimization step over `batch` source images.
    pub fn train_step(&mut self, batch: &[&Image]) -> Result<LossBreakdown> {
        let geom = self.geometry();
        let (gh, gw) = (geom.grid_h(), geom.grid_w());
        let alpha = self.cfg.loss.alpha;

        // sample and apply the two views per image
        let mut views_c = Vec::with_capacity(batch.len());
        let mut views_sc = Vec::with_capacity(batch.len());
        let mut corrs: Vec<CorrespondenceSet> = Vec::with_capacity(batch.len());
        for (slot, img) in batch.iter().enumerate() {
            let (spec_c, spec_sc) = step_transforms(&self.cfg, self.step, slot)?;
            views_c.push(apply_transform(img, &spec_c)?);
            views_sc.push(apply_transform(img, &spec_sc)?);
            corrs.push(build_correspondences(&spec_c, &spec_sc, &geom)?);
        }
        let x_c = images_to_batch::<T>(&views_c);
        let x_sc = images_to_batch::<T>(&views_sc);

        let symmetric = self.cfg.loss.symmetric_global;

        // target forward (stop-gradient): separate graph, values only. The
        // target always sees the color-only view; it sees the spatial view
        // too only when the mirrored global term is requested.
        let (z_c, z_sc, local_c) = {
            let mut tg = Graph::new();
            let net = self.pair.bind_target(&mut tg);
            let xc = tg.leaf(x_c.clone());
            let out_c = net.forward(&mut tg, xc, NormMode::Batch, false);
            let z_sc = symmetric.then(|| {
                let xsc = tg.leaf(x_sc.clone());
                let out_sc = net.forward(&mut tg, xsc, NormMode::Batch, false);
                tg.value(out_sc.projection).clone()
            });
            (
                tg.value(out_c.projection).clone(),
                z_sc,
                tg.value(out_c.local_map).clone(),
            )
        };

        // online forward: the spatial view always, the color-only view only
        // for the mirrored global pairing
        let mut g = Graph::new();
        let net = self.pair.bind_online(&mut g);
        let leaves = net.leaves.clone();
        let xsc = g.leaf(x_sc);
        let out_sc = net.forward(&mut g, xsc, NormMode::Batch, true);

        // global term: the online prediction of the spatial view chases the
        // target projection of the color-only view; when symmetric, average
        // with the swapped view roles
        let g1 = global_loss(&mut g, out_sc.prediction.unwrap(), z_c);
        let (global, out_c) = if symmetric {
            let xc = g.leaf(x_c);
            let out_c = net.forward(&mut g, xc, NormMode::Batch, true);
            let g2 = global_loss(&mut g, out_c.prediction.unwrap(), z_sc.unwrap());
            (g.affine2(g1, g2, T::from_f64(0.5), T::from_f64(0.5)), Some(out_c))
        } else {
            (g1, None)
        };

        // local term: target queries the color-only view, online answers in
        // the spatial view
        let valid_pairs: usize = corrs.iter().map(|c| c.pairs.len()).sum();
        let local = if alpha > 0.0 {
            let d_l = self.cfg.model.local_dim;
            let cells = gh * gw;
            let mut per_image = Vec::new();
            for (bi, corr) in corrs.iter().enumerate() {
                if corr.pairs.is_empty() {
                    continue;
                }
                let sc_map = g.batch_slice(out_sc.local_map, bi);
                let sc_rows = g.chw_to_rows(sc_map);
                // target rows for image bi: (cells, d_l) from (B, d_l, h, w)
                let mut t_rows = Tensor::zeros(&[cells, d_l]);
                for ci in 0..d_l {
                    for ni in 0..cells {
                        t_rows.data[ni * d_l + ci] = local_c.data[(bi * d_l + ci) * cells + ni];
                    }
                }
                if let Some(l) =
                    local_loss(&mut g, &self.cfg.loss, sc_rows, &t_rows, corr, (gh, gw))
                {
                    per_image.push(l);
                }
            }
            if per_image.is_empty() {
                None
            } else {
                Some(g.mean_vars(&per_image))
            }
        } else {
            None
        };

        // with no valid pairs anywhere the step proceeds global-only;
        // valid_pairs = 0 flags the event in the metrics
        let (total, local_value) = match local {
            Some(l) => (combine(&mut g, global, l, alpha), g.value(l).item().as_f64()),
            None => (global, 0.0),
        };
        let breakdown = LossBreakdown {
            total: g.value(total).item().as_f64(),
            global: g.value(global).item().as_f64(),
            local: local_value,
            valid_pairs,
        };

        // backward and parameter update
        let grads = g.backward(total);
        let lr = lr_at(&self.cfg, self.step);
        self.apply_gradients(&leaves, &grads, lr);

        // fold batch statistics into running statistics
        let bn_m = T::from_f64(self.cfg.model.bn_momentum);
        out_sc.stats.apply(&mut self.pair.online, bn_m);
        if let Some(out_c) = out_c {
            out_c.stats.apply(&mut self.pair.online, bn_m);
        }

        // EMA target update
        let m = ema_momentum_at(self.cfg.ema_base, self.step + 1, self.cfg.steps);
        self.pair.ema_update(T::from_f64(m))?;

        self.step += 1;
        Ok(breakdown)
    }

    fn apply_gradients(
        &mut self,
        leaves: &[usize],
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) {
        let momentum = T::from_f64(self.cfg.momentum);
        let wd = T::from_f64(self.cfg.weight_decay);
        for i in 0..self.pair.online.len() {
            let kind = self.pair.online.kinds[i];
            if kind == ParamKind::Buffer {
                continue;
            }
            let param = &mut self.pair.online.values[i];
            let mut grad = match &grads[leaves[i]] {
                Some(t) => t.clone(),
                None => Tensor::zeros(&param.shape),
            };
            if kind == ParamKind::Weight {
                grad.add_scaled(param, wd);
            }
            let mut lr_eff = T::from_f64(lr);
            if self.cfg.lars && kind == ParamKind::Weight {
                let pn = param
                    .data
                    .iter()
                    .fold(T::zero(), |a, &v| a + v * v)
                    .sqrt();
                let gn = grad.data.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
                if pn > T::zero() && gn > T::zero() {
                    lr_eff *= T::from_f64(1e-3) * pn / gn;
                }
            }
            let vel = &mut self.velocity[i];
            for (v, &gv) in vel.data.iter_mut().zip(&grad.data) {
                *v = momentum * *v + gv;
            }
            param.add_scaled(vel, -lr_eff);
        }
    }

    /// Train for `cfg.steps` steps over `images`, invoking `on_step` after
    /// every step with the loss breakdown.
    pub fn run<F: FnMut(usize, &LossBreakdown) -> Result<()>>(
        &mut self,
        images: &[Image],
        mut on_step: F,
    ) -> Result<()> {
        if images.is_empty() {
            return Err(crate::error::Error::Config("empty training set".into()));
        }
        // the dataset position is a pure function of step, so resuming a
        // checkpointed run continues the same epoch stream
        let consumed = self.step * self.cfg.batch_size;
        let mut epoch = (consumed / images.len()) as u64;
        let mut cursor = consumed % images.len();
        let mut order: Vec<usize> = Vec::new();
        while self.step < self.cfg.steps {
            let mut batch: Vec<&Image> = Vec::with_capacity(self.cfg.batch_size);
            while batch.len() < self.cfg.batch_size {
                if order.is_empty() {
                    order = epoch_permutation(self.cfg.seed, epoch, images.len());
                }
                batch.push(&images[order[cursor]]);
                cursor += 1;
                if cursor == images.len() {
                    cursor = 0;
                    epoch += 1;
                    order.clear();
                }
            }
            let step = self.step;
            let breakdown = self.train_step(&batch)?;
            on_step(step, &breakdown)?;
        }
        Ok(())
    }
}

/// CSV header for the per-step metrics log.
pub fn metrics_header() -> &'static str {
    "step,loss,loss_g,loss_lc,valid_pairs,lr,ema_m"
}

/// One CSV row; formatting is deterministic for a given build.
pub fn metrics_row(step: usize, b: &LossBreakdown, lr: f64, ema_m: f64) -> String {
    format!(
        "{},{:.9e},{:.9e},{:.9e},{},{:.9e},{:.9e}",
        step, b.total, b.global, b.local, b.valid_pairs, lr, ema_m
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_train_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.steps = 4;
        cfg.batch_size = 2;
        cfg.model = ModelConfig {
            image_size: (16, 16),
            stage_channels: vec![4, 6],
            stage_downsample: vec![2, 2],
            proj_hidden: 8,
            proj_dim: 4,
            pred_hidden: 8,
            local_hidden: 8,
            local_dim: 4,
            ..ModelConfig::default()
        };
        cfg.aug.src_size = (20, 20);
        cfg.aug.out_size = (16, 16);
        cfg.base_lr = 0.5;
        cfg
    }

    fn noise_images(n: usize, h: usize, w: usize, seed: u64) -> Vec<Image> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| {
                let mut img = Image::new(h, w);
                for v in &mut img.data {
                    *v = rng.gen_range(0.0..1.0);
                }
                img
            })
            .collect()
    }

    #[test]
    fn ema_schedule_endpoints_exact() {
        assert_eq!(ema_momentum_at(0.996, 0, 3000), 0.996);
        assert_eq!(ema_momentum_at(0.996, 3000, 3000), 1.0);
        let mid = ema_momentum_at(0.996, 1500, 3000);
        assert!((mid - (1.0 - 0.004 * 0.5)).abs() < 1e-12);
        // monotone non-decreasing
        let mut prev = 0.0;
        for s in 0..=100 {
            let m = ema_momentum_at(0.996, s, 100);
            assert!(m >= prev);
            prev = m;
        }
    }

    #[test]
    fn lr_schedule_shape() {
        let mut cfg = TrainConfig::default();
        cfg.steps = 100;
        cfg.batch_size = 32;
        cfg.base_lr = 2.0;
        cfg.warmup_frac = 0.1;
        let peak = 2.0 * 32.0 / 256.0;
        assert_eq!(lr_at(&cfg, 0), 0.0);
        assert_eq!(lr_at(&cfg, 10), peak); // warmup end / cosine start
        assert_eq!(lr_at(&cfg, 100), 0.0); // cosine endpoint
        assert!((lr_at(&cfg, 5) - 0.5 * peak).abs() < 1e-15);
        for s in 10..100 {
            assert!(lr_at(&cfg, s + 1) <= lr_at(&cfg, s));
        }
    }

    #[test]
    fn epoch_permutation_is_deterministic_permutation() {
        let a = epoch_permutation(7, 3, 50);
        let b = epoch_permutation(7, 3, 50);
        assert_eq!(a, b);
        assert_ne!(a, epoch_permutation(7, 4, 50));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn train_step_updates_parameters() {
        let cfg = tiny_train_cfg();
        let imgs = noise_images(4, 20, 20, 1);
        let mut tr = Trainer::<f32>::new(cfg).unwrap();
        let before = tr.pair.online.clone();
        let batch: Vec<&Image> = imgs.iter().take(2).collect();
        let b = tr.train_step(&batch).unwrap();
        assert!(b.total.is_finite() && b.global.is_finite() && b.local.is_finite());
        assert!(b.valid_pairs > 0);
        let changed = before
            .values
            .iter()
            .zip(&tr.pair.online.values)
            .any(|(a, b)| a != b);
        assert!(changed);
    }

    #[test]
    fn alpha_zero_skips_local_term() {
        let mut cfg = tiny_train_cfg();
        cfg.loss.alpha = 0.0;
        let imgs = noise_images(4, 20, 20, 2);
        let mut tr = Trainer::<f32>::new(cfg).unwrap();
        let batch: Vec<&Image> = imgs.iter().take(2).collect();
        let b = tr.train_step(&batch).unwrap();
        assert_eq!(b.local, 0.0);
        assert!((b.total - b.global).abs() < 1e-6);
    }

    #[test]
    fn runs_are_bit_deterministic() {
        let cfg = tiny_train_cfg();
        let imgs = noise_images(5, 20, 20, 3);
        let run = || {
            let mut tr = Trainer::<f32>::new(cfg.clone()).unwrap();
            let mut rows = Vec::new();
            tr.run(&imgs, |s, b| {
                rows.push(format!("{s} {b:?}"));
                Ok(())
            })
            .unwrap();
            (rows, tr.pair.online.values.clone())
        };
        let (r1, p1) = run();
        let (r2, p2) = run();
        assert_eq!(r1, r2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn weight_decay_only_hits_weights() {
        let mut cfg = tiny_train_cfg();
        cfg.weight_decay = 0.5;
        cfg.momentum = 0.0;
        let mut tr = Trainer::<f64>::new(cfg).unwrap();
        // zero gradients: decay should shrink Weight params, leave BiasGain
        let leaves: Vec<usize> = (0..tr.pair.online.len()).collect();
        let grads: Vec<Option<Tensor<f64>>> = leaves.iter().map(|_| None).collect();
        let wi = tr.pair.online.index_of("enc.s0.conv.w").unwrap();
        let gi = tr.pair.online.index_of("enc.s0.norm.gamma").unwrap();
        let w_before = tr.pair.online.values[wi].clone();
        tr.apply_gradients(&leaves, &grads, 0.1);
        let w_after = &tr.pair.online.values[wi];
        for (a, b) in w_before.data.iter().zip(&w_after.data) {
            assert!((b - a * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
        }
        assert!(tr.pair.online.values[gi].data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn metrics_row_format() {
        let b = LossBreakdown {
            total: 1.5,
            global: 1.0,
            local: 6.5,
            valid_pairs: 101,
        };
        let row = metrics_row(3, &b, 0.25, 0.996);
        assert!(row.starts_with("3,"));
        assert_eq!(row.split(',').count(), 7);
        assert_eq!(metrics_header().split(',').count(), 7);
    }

    #[test]
    fn config_validation_catches_mismatch() {
        let mut cfg = tiny_train_cfg();
        cfg.aug.out_size = (32, 32);
        assert!(cfg.validate().is_err());
    }
}
