//! Scratch: flip accuracy of a fixed hand-crafted cell descriptor, as a
//! data-ceiling probe. Args: FOLDER [none|all]
use lcssl::augment::{apply_transform, sample_transform, AugConfig, TransformKind};
use lcssl::datagen::load_folder;
use lcssl::eval::match_map;
use lcssl::geometry::{flip_ground_truth, FeatureGeometry};
use lcssl::image::Image;
use lcssl::rng::mix_seed;
use lcssl::Tensor;

fn cell_rows(img: &Image) -> Tensor<f32> {
    let luma = |p: [f32; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    const D: usize = 6;
    let mut rows = vec![0f32; 64 * D];
    for ci in 0..8 {
        for cj in 0..8 {
            let mut sub = [0f32; 4];
            let (mut s, mut s2) = (0f32, 0f32);
            let (mut cs, mut cs2) = (0f32, 0f32);
            for y in ci * 8..(ci + 1) * 8 {
                for x in cj * 8..(cj + 1) * 8 {
                    let p = img.pixel(x, y);
                    let v = luma(p);
                    s += v;
                    s2 += v * v;
                    let ch = ((p[0] - v).powi(2) + (p[1] - v).powi(2) + (p[2] - v).powi(2)).sqrt();
                    cs += ch;
                    cs2 += ch * ch;
                    let q = ((y - ci * 8) / 4) * 2 + (x - cj * 8) / 4;
                    sub[q] += v / 16.0;
                }
            }
            let m = s / 64.0;
            let sd = (s2 / 64.0 - m * m).max(0.0).sqrt();
            let cm = cs / 64.0;
            let csd = (cs2 / 64.0 - cm * cm).max(0.0).sqrt();
            let r = (ci * 8 + cj) * D;
            rows[r] = m;
            rows[r + 1] = sd;
            rows[r + 2] = sub[0] + sub[1] - sub[2] - sub[3];
            rows[r + 3] = (sub[0] + sub[2] - sub[1] - sub[3]).abs();
            rows[r + 4] = cm;
            rows[r + 5] = csd;
        }
    }
    for col in 0..D {
        let m: f32 = (0..64).map(|r| rows[r * D + col]).sum::<f32>() / 64.0;
        let v: f32 = (0..64).map(|r| (rows[r * D + col] - m).powi(2)).sum::<f32>() / 64.0;
        let sd = v.sqrt().max(1e-6);
        for r in 0..64 {
            rows[r * D + col] = (rows[r * D + col] - m) / sd;
        }
    }
    Tensor::from_vec(&[64, D], rows)
}

fn main() {
    let dir = std::env::args().nth(1).unwrap();
    let mode = std::env::args().nth(2).unwrap_or_else(|| "all".into());
    let mut aug = AugConfig::default();
    aug.blur_sigma_range = (0.1, 0.6);
    if mode == "none" {
        aug.jitter_p = 0.0;
        aug.grayscale_p = 0.0;
        aug.blur_p = (0.0, 0.0);
        aug.solarize_p = (0.0, 0.0);
    }
    let ds = load_folder(&dir).unwrap();
    let geom = FeatureGeometry::new(64, 64, 8).unwrap();
    let gt: Vec<usize> = flip_ground_truth(&geom)
        .iter()
        .map(|&(i, j)| i * geom.grid_w() + j)
        .collect();
    let mut flip_cfg = aug.clone();
    flip_cfg.scale_range = (1.0, 1.0);
    flip_cfg.aspect_range = (1.0, 1.0);
    flip_cfg.flip_p = 1.0;
    let (mut correct, mut total) = (0usize, 0usize);
    for (i, img) in ds.images.iter().enumerate() {
        let s1 = sample_transform(mix_seed(0, i as u64, 0, 2), &aug, TransformKind::ColorOnly).unwrap();
        let s2 =
            sample_transform(mix_seed(0, i as u64, 1, 2), &flip_cfg, TransformKind::SpatialColor).unwrap();
        let v1 = apply_transform(img, &s1).unwrap();
        let v2 = apply_transform(img, &s2).unwrap();
        let mm = match_map(&cell_rows(&v1), &cell_rows(&v2)).unwrap();
        correct += mm.best.iter().zip(&gt).filter(|(a, b)| a == b).count();
        total += gt.len();
    }
    println!("oracle flip accuracy: {:.2}%", 100.0 * correct as f64 / total as f64);
}
