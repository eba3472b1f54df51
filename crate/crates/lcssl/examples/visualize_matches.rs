//! Render a side-by-side overlay of grid-cell matches between an image and
//! its mirrored view. Lines are green where the match agrees with the
//! analytic flip ground truth, red otherwise.
//!
//! Run with: `cargo run --example visualize_matches`

use lcssl::augment::{apply_transform, sample_transform, TransformKind};
use lcssl::datagen::{render_scene, scene_spec};
use lcssl::eval::{local_feature_rows, match_map, match_overlay};
use lcssl::geometry::flip_ground_truth;
use lcssl::rng::mix_seed;
use lcssl::trainer::{TrainConfig, Trainer};

fn main() -> lcssl::Result<()> {
    std::fs::create_dir_all("examples_out")?;
    let img = render_scene(&scene_spec(4, 0, 6, 64));

    let mut cfg = TrainConfig::default();
    cfg.model.stage_channels = vec![8, 16, 32, 64];
    cfg.validate()?;
    let tr: Trainer<f32> = Trainer::new(cfg)?;
    let geom = tr.geometry();

    // view 1: photometric changes only; view 2: guaranteed mirror
    let mut flip_cfg = tr.cfg.aug.clone();
    flip_cfg.scale_range = (1.0, 1.0);
    flip_cfg.aspect_range = (1.0, 1.0);
    flip_cfg.flip_p = 1.0;
    let s1 = sample_transform(mix_seed(0, 0, 0, 2), &tr.cfg.aug, TransformKind::ColorOnly)?;
    let s2 = sample_transform(mix_seed(0, 0, 1, 2), &flip_cfg, TransformKind::SpatialColor)?;
    let v1 = apply_transform(&img, &s1)?;
    let v2 = apply_transform(&img, &s2)?;

    let f1 = local_feature_rows(&tr.pair, &v1, true);
    let f2 = local_feature_rows(&tr.pair, &v2, true);
    let mm = match_map(&f1, &f2)?;
    let gt: Vec<usize> = flip_ground_truth(&geom)
        .iter()
        .map(|&(i, j)| i * geom.grid_w() + j)
        .collect();
    let correct = mm.best.iter().zip(&gt).filter(|(a, b)| a == b).count();

    let overlay = match_overlay(&v1, &v2, &mm, &geom, &gt, 1)?;
    let out = "examples_out/matches.ppm";
    overlay.save_ppm(out)?;
    println!(
        "random-init encoder: {correct}/{} cells match the mirrored location",
        gt.len()
    );
    println!("overlay written to {out}");
    Ok(())
}
