//! Pretrain a small encoder for a few steps and watch the loss move.
//!
//! Everything is in-process: corpus generation, training, checkpointing.
//! Run with: `cargo run --example pretrain_tiny`

use lcssl::checkpoint::{read_header, save_trainer};
use lcssl::datagen::{generate_corpus, load_folder};
use lcssl::trainer::{TrainConfig, Trainer};

fn main() -> lcssl::Result<()> {
    let dir = "examples_out/pretrain_tiny";
    generate_corpus(format!("{dir}/data"), 3, 160, 64, 8, 0)?;
    let data = load_folder(format!("{dir}/data"))?;

    let mut cfg = TrainConfig::default();
    cfg.steps = 60;
    cfg.batch_size = 8;
    cfg.seed = 5;
    cfg.model.stage_channels = vec![8, 16, 32, 64];
    cfg.model.proj_hidden = 64;
    cfg.model.pred_hidden = 64;
    cfg.model.local_hidden = 64;
    cfg.validate()?;

    let mut tr: Trainer<f32> = Trainer::new(cfg)?;
    tr.run(&data.images, |step, b| {
        if (step + 1) % 10 == 0 {
            println!(
                "step {:>3}  total {:.4}  global {:.4}  local {:.4}  pairs {}",
                step + 1,
                b.total,
                b.global,
                b.local,
                b.valid_pairs
            );
        }
        Ok(())
    })?;

    let ckpt = format!("{dir}/checkpoint.ckpt");
    save_trainer(&tr, &ckpt)?;
    let header = read_header(&ckpt)?;
    println!("saved checkpoint at step {} to {ckpt}", header.step);
    Ok(())
}
