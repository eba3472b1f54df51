//! Measure flip+color correspondence accuracy before and after a short
//! pretraining run. Even a brief run should pull accuracy above the
//! 1/(grid cells) chance floor.
//!
//! Run with: `cargo run --example eval_correspondence`

use lcssl::datagen::{generate_corpus, load_folder};
use lcssl::eval::flip_correspondence_accuracy;
use lcssl::trainer::{TrainConfig, Trainer};

fn main() -> lcssl::Result<()> {
    let dir = "examples_out/eval_corr";
    generate_corpus(format!("{dir}/train"), 7, 300, 64, 8, 0)?;
    generate_corpus(format!("{dir}/heldout"), 8, 40, 64, 8, 0)?;
    let train = load_folder(format!("{dir}/train"))?;
    let heldout = load_folder(format!("{dir}/heldout"))?;

    let mut cfg = TrainConfig::default();
    cfg.steps = 150;
    cfg.batch_size = 8;
    cfg.seed = 9;
    cfg.model.stage_channels = vec![8, 16, 32, 64];
    cfg.model.proj_hidden = 64;
    cfg.model.pred_hidden = 64;
    cfg.model.local_hidden = 64;
    cfg.validate()?;

    let mut tr: Trainer<f32> = Trainer::new(cfg)?;
    let cells = {
        let g = tr.geometry();
        g.grid_h() * g.grid_w()
    };
    let before = flip_correspondence_accuracy(&tr.pair, &heldout.images, &tr.cfg.aug, 0, true)?;
    tr.run(&train.images, |_, _| Ok(()))?;
    let after = flip_correspondence_accuracy(&tr.pair, &heldout.images, &tr.cfg.aug, 0, true)?;

    println!("chance level:      {:.2}% (1 of {cells} grid cells)", 100.0 / cells as f64);
    println!("random init:       {:.2}%", 100.0 * before);
    println!("after {} steps: {:.2}%", tr.step, 100.0 * after);
    Ok(())
}
