//! Few-shot linear probe on frozen features, with a shuffled-label control.
//!
//! The control destroys the feature/label association, so it should sit at
//! the 1/ways chance level regardless of feature quality.
//!
//! Run with: `cargo run --example few_shot_probe`

use lcssl::datagen::{generate_corpus, load_folder};
use lcssl::eval::{pooled_embedding, probe_episodes};
use lcssl::trainer::{TrainConfig, Trainer};

fn main() -> lcssl::Result<()> {
    let dir = "examples_out/probe";
    // probe classes start at offset 8: disjoint from any pretraining on 0..8
    generate_corpus(format!("{dir}/probe"), 21, 240, 64, 6, 8)?;
    let probe = load_folder(format!("{dir}/probe"))?;
    let labels = probe.labels.clone().expect("generated corpora are labeled");

    let mut cfg = TrainConfig::default();
    cfg.model.stage_channels = vec![8, 16, 32, 64];
    cfg.validate()?;
    let tr: Trainer<f32> = Trainer::new(cfg)?;

    let feats: Vec<Vec<f64>> = probe
        .images
        .iter()
        .map(|img| pooled_embedding(&tr.pair, img, true))
        .collect();

    let (acc, se) = probe_episodes(&feats, &labels, 5, 5, 50, 3, false)?;
    let (ctl, ctl_se) = probe_episodes(&feats, &labels, 5, 5, 50, 3, true)?;
    println!("random-init encoder, 5-way 5-shot, 50 episodes");
    println!("probe accuracy:    {acc:.3} +/- {se:.3}");
    println!("shuffled control:  {ctl:.3} +/- {ctl_se:.3} (chance = 0.200)");
    println!("(pretrain a checkpoint and load it to see the gap grow)");
    Ok(())
}
