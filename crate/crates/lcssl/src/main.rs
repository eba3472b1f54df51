//! Command-line surface. Every subcommand is a thin shell over library
//! calls; all stochastic behavior derives from `--seed` / the config seed.

use clap::{Args, Parser, Subcommand};
use lcssl::augment::{apply_transform, sample_transform, TransformKind};
use lcssl::checkpoint::{load_trainer, read_header, save_trainer};
use lcssl::config;
use lcssl::datagen::{generate_corpus, load_folder};
use lcssl::error::Result;
use lcssl::eval::{
    collapse_metrics, embed_all, few_shot_probe, flip_correspondence_accuracy,
    local_feature_rows, match_map, match_overlay,
};
use lcssl::geometry::{flip_ground_truth, FeatureGeometry};
use lcssl::image::Image;
use lcssl::rng::mix_seed;
use lcssl::trainer::{ema_momentum_at, lr_at, metrics_header, metrics_row, Trainer};
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "lcssl", about = "Self-supervised pretraining with a local contrastive loss")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain on an image folder; writes checkpoint + metrics.csv.
    Pretrain(PretrainArgs),
    /// Flip+color correspondence accuracy of a checkpoint.
    EvalCorr(EvalCorrArgs),
    /// Few-shot linear probe on frozen features.
    Probe(ProbeArgs),
    /// Render a match-line overlay for one image.
    Viz(VizArgs),
    /// Generate a synthetic labeled corpus.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Folder of .ppm training images.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, metrics, resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Override the step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Repeated key=value overrides (highest precedence).
    #[arg(long = "set")]
    set: Vec<String>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCorrArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate on the first N images.
    #[arg(long, default_value_t = 100)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate the EMA target branch instead of the online encoder.
    #[arg(long)]
    target: bool,
    /// Emit a single CSV row instead of prose.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Labeled folder (labels.tsv required).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    ways: usize,
    #[arg(long, default_value_t = 5)]
    shots: usize,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate the EMA target branch instead of the online encoder.
    #[arg(long)]
    target: bool,
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Source image (.ppm) to visualize.
    #[arg(long)]
    image: PathBuf,
    /// Output overlay (.ppm).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Shift into the 24-class universe (for probe sets disjoint from
    /// pretraining classes).
    #[arg(long, default_value_t = 0)]
    class_offset: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = config::resolve(a.config.as_deref(), &a.set)?;
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;

    std::fs::create_dir_all(&a.out)?;
    let resolved = config::dump(&cfg);
    std::fs::write(a.out.join("config.resolved"), &resolved)?;
    print!("{resolved}");

    let data = load_folder(&a.data)?;
    let mut tr: Trainer<f32> = match &a.resume {
        Some(path) => {
            let tr = load_trainer::<f32, _>(path)?;
            if tr.cfg != cfg {
                return Err(lcssl::Error::Config(
                    "resume checkpoint config differs from the resolved config".into(),
                ));
            }
            tr
        }
        None => Trainer::new(cfg.clone())?,
    };

    let metrics_path = a.out.join("metrics.csv");
    let mut metrics = std::io::BufWriter::new(if tr.step > 0 && metrics_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = std::fs::File::create(&metrics_path)?;
        writeln!(f, "{}", metrics_header())?;
        f
    });

    let total = tr.cfg.steps;
    let ema_base = tr.cfg.ema_base;
    let lr_cfg = tr.cfg.clone();
    tr.run(&data.images, |step, b| {
        let lr = lr_at(&lr_cfg, step);
        let m = ema_momentum_at(ema_base, step + 1, total);
        writeln!(metrics, "{}", metrics_row(step, b, lr, m))?;
        if (step + 1) % 100 == 0 || step + 1 == total {
            eprintln!(
                "step {}/{} loss {:.4} (g {:.4}, lc {:.4})",
                step + 1,
                total,
                b.total,
                b.global,
                b.local
            );
        }
        Ok(())
    })?;
    metrics.flush()?;
    save_trainer(&tr, a.out.join("checkpoint.ckpt"))?;
    eprintln!("checkpoint written to {}", a.out.join("checkpoint.ckpt").display());
    Ok(())
}

fn cmd_eval_corr(a: EvalCorrArgs) -> Result<()> {
    let tr = load_trainer::<f32, _>(&a.ckpt)?;
    let data = load_folder(&a.data)?;
    let n = a.images.min(data.images.len());
    let acc = flip_correspondence_accuracy(
        &tr.pair,
        &data.images[..n],
        &tr.cfg.aug,
        a.seed,
        !a.target,
    )?;
    // collapse diagnostics on the same images
    let embs = embed_all(&tr.pair, &data.images[..n], !a.target);
    let (dim_std, mean_cos) = collapse_metrics(&embs)?;
    if a.csv {
        println!("flip_accuracy,images,dim_std,mean_cosine");
        println!("{acc:.6},{n},{dim_std:.6},{mean_cos:.6}");
    } else {
        println!("flip correspondence accuracy: {:.2}% over {n} images", 100.0 * acc);
        println!("embedding spread: per-dim std {dim_std:.4}, mean pairwise cosine {mean_cos:.4}");
    }
    Ok(())
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let tr = load_trainer::<f32, _>(&a.ckpt)?;
    let data = load_folder(&a.data)?;
    let labels = data.labels.as_ref().ok_or_else(|| {
        lcssl::Error::Config(format!("{} has no labels.tsv", a.data.display()))
    })?;
    let (mean, stderr) = few_shot_probe(
        &tr.pair,
        &data.images,
        labels,
        a.ways,
        a.shots,
        a.episodes,
        a.seed,
        !a.target,
    )?;
    if a.csv {
        println!("ways,shots,episodes,accuracy,stderr");
        println!("{},{},{},{mean:.6},{stderr:.6}", a.ways, a.shots, a.episodes);
    } else {
        println!(
            "{}-way {}-shot accuracy: {:.3} +/- {:.3} over {} episodes",
            a.ways, a.shots, mean, stderr, a.episodes
        );
    }
    Ok(())
}

fn cmd_viz(a: VizArgs) -> Result<()> {
    let tr = load_trainer::<f32, _>(&a.ckpt)?;
    let img = Image::load_ppm(&a.image)?;
    let cfg = &tr.cfg;
    let (h, w) = cfg.model.image_size;
    let geom = FeatureGeometry::new(h, w, cfg.model.stride())?;

    // same protocol as the flip evaluation, for one image
    let mut flip_cfg = cfg.aug.clone();
    flip_cfg.scale_range = (1.0, 1.0);
    flip_cfg.aspect_range = (1.0, 1.0);
    flip_cfg.flip_p = 1.0;
    let spec1 = sample_transform(mix_seed(a.seed, 0, 0, 2), &cfg.aug, TransformKind::ColorOnly)?;
    let spec2 = sample_transform(mix_seed(a.seed, 0, 1, 2), &flip_cfg, TransformKind::SpatialColor)?;
    let v1 = apply_transform(&img, &spec1)?;
    let v2 = apply_transform(&img, &spec2)?;
    let f1 = local_feature_rows(&tr.pair, &v1, true);
    let f2 = local_feature_rows(&tr.pair, &v2, true);
    let mm = match_map(&f1, &f2)?;
    let gt: Vec<usize> = flip_ground_truth(&geom)
        .iter()
        .map(|&(i, j)| i * geom.grid_w() + j)
        .collect();
    let correct = mm.best.iter().zip(&gt).filter(|(a, b)| a == b).count();
    let overlay = match_overlay(&v1, &v2, &mm, &geom, &gt, 1)?;
    overlay.save_ppm(&a.out)?;
    println!(
        "{}/{} grid cells matched to the mirrored location; overlay written to {}",
        correct,
        gt.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    generate_corpus(&a.out, a.seed, a.count, a.size, a.classes, a.class_offset)?;
    println!(
        "wrote {} images ({} classes, {}x{}) to {}",
        a.count,
        a.classes,
        a.size,
        a.size,
        a.out.display()
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::EvalCorr(a) => cmd_eval_corr(a),
        Cmd::Probe(a) => cmd_probe(a),
        Cmd::Viz(a) => cmd_viz(a),
        Cmd::GenData(a) => cmd_gen_data(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

// keep read_header linked for external tooling checks
#[allow(dead_code)]
fn _header_probe(p: &std::path::Path) -> Result<()> {
    let h = read_header(p)?;
    eprintln!("checkpoint at step {}", h.step);
    Ok(())
}
