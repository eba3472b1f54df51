//! Generate a small labeled synthetic corpus and print its class histogram.
//!
//! Run with: `cargo run --example generate_corpus [-- OUT_DIR]`

use lcssl::datagen::{generate_corpus, load_folder};

fn main() -> lcssl::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "examples_out/corpus".to_string());

    // 120 images, 64x64, 6 classes (shape kind x color family), seed 1
    generate_corpus(&out, 1, 120, 64, 6, 0)?;

    let ds = load_folder(&out)?;
    let labels = ds.labels.as_ref().expect("generated corpora are labeled");
    let mut hist = vec![0usize; ds.n_classes()];
    for &l in labels {
        hist[l] += 1;
    }
    println!("wrote {} images to {out}", ds.len());
    for (c, n) in hist.iter().enumerate() {
        println!("class {c}: {n} images");
    }
    println!("first file: {} (see labels.tsv for the class of each file)", ds.names[0]);
    Ok(())
}
