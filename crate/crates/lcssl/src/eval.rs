//! Evaluation suite: argmax match maps, flip+color correspondence
//! accuracy, few-shot linear probing on frozen features, collapse
//! diagnostics, and match-overlay rendering.

use crate::augment::{apply_transform, sample_transform, AugConfig, TransformKind};
use crate::error::{Error, Result};
use crate::geometry::{flip_ground_truth, FeatureGeometry};
use crate::graph::Graph;
use crate::image::Image;
use crate::losses::cosine_map;
use crate::model::{ModelPair, NormMode};
use crate::rng::{mix_seed, rng_from_seed};
use crate::tensor::Tensor;
use crate::trainer::images_to_batch;
use crate::Real;
use rand::seq::SliceRandom;

/// Per grid location of view 1: the best-matching location of view 2
/// (argmax cosine, ties to the lowest row-major index) and its similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMap {
    pub best: Vec<usize>,
    pub similarity: Vec<f64>,
}

/// Argmax-cosine matching between two `(cells, d)` feature-row tensors.
pub fn match_map<T: Real>(f1: &Tensor<T>, f2: &Tensor<T>) -> Result<MatchMap> {
    if f1.shape != f2.shape || f1.shape.len() != 2 {
        return Err(Error::Shape(format!(
            "match_map needs equal (cells, d) shapes, got {:?} vs {:?}",
            f1.shape, f2.shape
        )));
    }
    let sim = cosine_map(f1, f2);
    let n = f1.shape[0];
    let mut best = Vec::with_capacity(n);
    let mut similarity = Vec::with_capacity(n);
    for r in 0..n {
        let row = &sim.data[r * n..(r + 1) * n];
        let mut bi = 0usize;
        let mut bv = row[0];
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > bv {
                bv = v;
                bi = i;
            }
        }
        best.push(bi);
        similarity.push(bv.as_f64());
    }
    Ok(MatchMap { best, similarity })
}

// ---- feature extraction ------------------------------------------------------

/// Local-projection rows `(cells, d_l)` of one image through the chosen
/// network with running statistics.
pub fn local_feature_rows<T: Real>(
    pair: &ModelPair<T>,
    img: &Image,
    use_online: bool,
) -> Tensor<T> {
    let x = images_to_batch::<T>(std::slice::from_ref(img));
    let mut g = Graph::new();
    let net = if use_online {
        pair.bind_online(&mut g)
    } else {
        pair.bind_target(&mut g)
    };
    let xv = g.leaf(x);
    let out = net.forward(&mut g, xv, NormMode::Running, false);
    let s = g.batch_slice(out.local_map, 0);
    let rows = g.chw_to_rows(s);
    g.value(rows).clone()
}

/// Pooled encoder embedding of one image (frozen-feature tap point).
pub fn pooled_embedding<T: Real>(pair: &ModelPair<T>, img: &Image, use_online: bool) -> Vec<f64> {
    let x = images_to_batch::<T>(std::slice::from_ref(img));
    let mut g = Graph::new();
    let net = if use_online {
        pair.bind_online(&mut g)
    } else {
        pair.bind_target(&mut g)
    };
    let xv = g.leaf(x);
    let (_, pooled, _) = net.encoder_forward(&mut g, xv, NormMode::Running);
    g.value(pooled).data.iter().map(|v| v.as_f64()).collect()
}

fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-12;
    for x in v.iter_mut() {
        *x /= n;
    }
}

// ---- flip correspondence ------------------------------------------------------

/// The paper-style flip test: view 1 gets color ops only, view 2 is the
/// horizontally flipped image with independent color ops. Accuracy is the
/// fraction of grid cells whose argmax match is the mirrored cell.
pub fn flip_correspondence_accuracy<T: Real>(
    pair: &ModelPair<T>,
    images: &[Image],
    aug: &AugConfig,
    seed: u64,
    use_online: bool,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Config("flip evaluation needs at least one image".into()));
    }
    let (h, w) = pair.model.cfg.image_size;
    let geom = FeatureGeometry::new(h, w, pair.model.cfg.stride())?;
    let gt = flip_ground_truth(&geom);
    let gt_idx: Vec<usize> = gt.iter().map(|&(i, j)| i * geom.grid_w() + j).collect();

    // view 2 menu: guaranteed flip, full-frame crop
    let mut flip_cfg = aug.clone();
    flip_cfg.scale_range = (1.0, 1.0);
    flip_cfg.aspect_range = (1.0, 1.0);
    flip_cfg.flip_p = 1.0;

    let mut correct = 0usize;
    let mut total = 0usize;
    for (i, img) in images.iter().enumerate() {
        let spec1 = sample_transform(mix_seed(seed, i as u64, 0, 2), aug, TransformKind::ColorOnly)?;
        let spec2 = sample_transform(
            mix_seed(seed, i as u64, 1, 2),
            &flip_cfg,
            TransformKind::SpatialColor,
        )?;
        debug_assert!(spec2.flip);
        let v1 = apply_transform(img, &spec1)?;
        let v2 = apply_transform(img, &spec2)?;
        let f1 = local_feature_rows(pair, &v1, use_online);
        let f2 = local_feature_rows(pair, &v2, use_online);
        let mm = match_map(&f1, &f2)?;
        for (cell, &b) in mm.best.iter().enumerate() {
            if b == gt_idx[cell] {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

// ---- few-shot probe -----------------------------------------------------------

/// Queries per class per episode.
pub const PROBE_QUERIES: usize = 15;

/// Multinomial logistic regression, full-batch gradient descent.
fn fit_logreg(
    x: &[Vec<f64>],
    y: &[usize],
    n_way: usize,
    iters: usize,
    lr: f64,
    l2: f64,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = x[0].len();
    let n = x.len();
    let mut w = vec![vec![0.0; d]; n_way];
    let mut b = vec![0.0; n_way];
    for _ in 0..iters {
        let mut gw = vec![vec![0.0; d]; n_way];
        let mut gb = vec![0.0; n_way];
        for (xi, &yi) in x.iter().zip(y) {
            let mut logits: Vec<f64> = (0..n_way)
                .map(|c| b[c] + w[c].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
            for c in 0..n_way {
                logits[c] = (logits[c] - m).exp() / z;
            }
            for c in 0..n_way {
                let err = logits[c] - if c == yi { 1.0 } else { 0.0 };
                gb[c] += err;
                for (g, &xv) in gw[c].iter_mut().zip(xi) {
                    *g += err * xv;
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        for c in 0..n_way {
            b[c] -= lr * gb[c] * inv_n;
            for (wv, g) in w[c].iter_mut().zip(&gw[c]) {
                *wv -= lr * (*g * inv_n + l2 * *wv);
            }
        }
    }
    (w, b)
}

fn logreg_predict(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> usize {
    let mut bi = 0;
    let mut bv = f64::NEG_INFINITY;
    for (c, (wc, &bc)) in w.iter().zip(b).enumerate() {
        let s = bc + wc.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        if s > bv {
            bv = s;
            bi = c;
        }
    }
    bi
}

/// Episode-averaged few-shot accuracy over precomputed embeddings.
///
/// Embeddings are L2-normalized internally. Returns `(mean, stderr)` over
/// episodes. `shuffle_labels` randomizes support labels per episode — a
/// chance-level control.
pub fn probe_episodes(
    features: &[Vec<f64>],
    labels: &[usize],
    n_way: usize,
    k_shot: usize,
    episodes: usize,
    seed: u64,
    shuffle_labels: bool,
) -> Result<(f64, f64)> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Config("features and labels must be equal-length and nonempty".into()));
    }
    let n_classes = labels.iter().max().unwrap() + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let usable: Vec<usize> = (0..n_classes)
        .filter(|&c| by_class[c].len() >= k_shot + PROBE_QUERIES)
        .collect();
    if usable.len() < n_way {
        return Err(Error::Config(format!(
            "need {n_way} classes with >= {} images, have {}",
            k_shot + PROBE_QUERIES,
            usable.len()
        )));
    }
    let mut normed: Vec<Vec<f64>> = features.to_vec();
    for v in &mut normed {
        l2_normalize(v);
    }

    let mut accs = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut rng = rng_from_seed(mix_seed(seed, ep as u64, 0, 5));
        let mut classes = usable.clone();
        classes.shuffle(&mut rng);
        classes.truncate(n_way);
        let mut sx = Vec::new();
        let mut sy = Vec::new();
        let mut qx = Vec::new();
        let mut qy = Vec::new();
        for (ci, &c) in classes.iter().enumerate() {
            let mut idx = by_class[c].clone();
            idx.shuffle(&mut rng);
            for &i in &idx[..k_shot] {
                sx.push(normed[i].clone());
                sy.push(ci);
            }
            for &i in &idx[k_shot..k_shot + PROBE_QUERIES] {
                qx.push(normed[i].clone());
                qy.push(ci);
            }
        }
        if shuffle_labels {
            sy.shuffle(&mut rng);
        }
        let (w, b) = fit_logreg(&sx, &sy, n_way, 100, 1.0, 1e-3);
        let hits = qx
            .iter()
            .zip(&qy)
            .filter(|(x, y)| logreg_predict(&w, &b, x) == **y)
            .count();
        accs.push(hits as f64 / qx.len() as f64);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let stderr = if accs.len() > 1 {
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
            / (accs.len() - 1) as f64;
        (var / accs.len() as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, stderr))
}

/// Few-shot probe over frozen pooled embeddings of labeled images.
pub fn few_shot_probe<T: Real>(
    pair: &ModelPair<T>,
    images: &[Image],
    labels: &[usize],
    n_way: usize,
    k_shot: usize,
    episodes: usize,
    seed: u64,
    use_online: bool,
) -> Result<(f64, f64)> {
    let features: Vec<Vec<f64>> = images
        .iter()
        .map(|img| pooled_embedding(pair, img, use_online))
        .collect();
    probe_episodes(&features, labels, n_way, k_shot, episodes, seed, false)
}

// ---- collapse diagnostics -------------------------------------------------------

/// `(mean per-dimension std, mean pairwise cosine)` of L2-normalized
/// embedding vectors. Both near zero for healthy spread; std near 0 with
/// cosine near 1 signals representational collapse.
pub fn collapse_metrics(embeddings: &[Vec<f64>]) -> Result<(f64, f64)> {
    if embeddings.len() < 2 {
        return Err(Error::Config("collapse metrics need >= 2 embeddings".into()));
    }
    let n = embeddings.len();
    let d = embeddings[0].len();
    let mut normed = embeddings.to_vec();
    for v in &mut normed {
        l2_normalize(v);
    }
    let mut mean = vec![0.0; d];
    for v in &normed {
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let mut std_sum = 0.0;
    for k in 0..d {
        let var = normed
            .iter()
            .map(|v| (v[k] - mean[k]) * (v[k] - mean[k]))
            .sum::<f64>()
            / n as f64;
        std_sum += var.sqrt();
    }
    // sum_{i != j} z_i . z_j = ||sum z||^2 - sum ||z||^2
    let sum_sq: f64 = mean.iter().map(|m| (m * n as f64) * (m * n as f64)).sum();
    let self_sq: f64 = normed
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let mean_cos = (sum_sq - self_sq) / (n * (n - 1)) as f64;
    Ok((std_sum / d as f64, mean_cos))
}

/// Pooled embeddings of a set of images (for collapse diagnostics).
pub fn embed_all<T: Real>(pair: &ModelPair<T>, images: &[Image], use_online: bool) -> Vec<Vec<f64>> {
    images
        .iter()
        .map(|img| pooled_embedding(pair, img, use_online))
        .collect()
}

// ---- visualization ---------------------------------------------------------------

fn draw_line(img: &mut Image, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [f32; 3]) {
    // Bresenham
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (mut x, mut y) = (x0, y0);
    loop {
        if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
            img.set_pixel(x as usize, y as usize, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Side-by-side overlay of two views with match lines: green where the
/// match agrees with the ground truth, red otherwise. `step` subsamples
/// the grid (draw every `step`-th cell) to keep the overlay readable.
pub fn match_overlay(
    view1: &Image,
    view2: &Image,
    mm: &MatchMap,
    geom: &FeatureGeometry,
    ground_truth: &[usize],
    step: usize,
) -> Result<Image> {
    if view1.height != view2.height {
        return Err(Error::Shape("views must share height".into()));
    }
    let gap = 4usize;
    let (h, w1, w2) = (view1.height, view1.width, view2.width);
    let mut out = Image::new(h, w1 + gap + w2);
    for y in 0..h {
        for x in 0..w1 {
            out.set_pixel(x, y, view1.pixel(x, y));
        }
        for x in 0..gap {
            out.set_pixel(w1 + x, y, [1.0; 3]);
        }
        for x in 0..w2 {
            out.set_pixel(w1 + gap + x, y, view2.pixel(x, y));
        }
    }
    let gw = geom.grid_w();
    let step = step.max(1);
    for (cell, &target) in mm.best.iter().enumerate() {
        let (i, j) = (cell / gw, cell % gw);
        if i % step != 0 || j % step != 0 {
            continue;
        }
        let (x0, y0) = geom.cell_center(i, j);
        let (ti, tj) = (target / gw, target % gw);
        let (x1, y1) = geom.cell_center(ti, tj);
        let color = if ground_truth.get(cell) == Some(&target) {
            [0.0, 1.0, 0.0]
        } else {
            [1.0, 0.0, 0.0]
        };
        draw_line(
            &mut out,
            (x0.round() as i64, y0.round() as i64),
            ((x1 + (w1 + gap) as f64).round() as i64, y1.round() as i64),
            color,
        );
    }
    Ok(out)
}
