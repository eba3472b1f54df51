//! Deterministic synthetic image corpus: value-noise backgrounds with a
//! dominant colored shape per image. Class = shape kind x color family.
//!
//! Rendering is pure integer/fixed-point arithmetic (hash-based noise,
//! 2x2 supersampled rasterization), so output bytes are identical across
//! platforms and builds.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{mix_seed, rng_from_seed, splitmix64};
use rand::Rng;
use std::io::Write;
use std::path::Path;

/// Shape kinds in the class universe.
pub const N_KINDS: usize = 3;
/// Color families in the class universe.
pub const N_FAMILIES: usize = 8;
/// Total distinct classes the generator can produce.
pub const N_UNIVERSE: usize = N_KINDS * N_FAMILIES;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
}

#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Center in doubled-grid (half-pixel) coordinates.
    pub cx: i64,
    pub cy: i64,
    /// Half-extent in doubled-grid units.
    pub half: i64,
    pub color: [u8; 3],
}

/// Everything needed to render one image reproducibly.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    /// Universe class id in `0..N_UNIVERSE`; kind = id / 8, family = id % 8.
    pub class_universe: usize,
    pub shapes: Vec<Shape>,
    pub bg_base: [u8; 3],
}

/// Base RGB for each of the 8 color families.
const FAMILY_RGB: [[i32; 3]; N_FAMILIES] = [
    [220, 60, 60],   // red
    [230, 150, 40],  // orange
    [220, 210, 50],  // yellow
    [60, 190, 70],   // green
    [50, 200, 200],  // cyan
    [60, 90, 220],   // blue
    [160, 70, 210],  // purple
    [220, 90, 180],  // pink
];

fn kind_of(universe_id: usize) -> ShapeKind {
    match universe_id / N_FAMILIES {
        0 => ShapeKind::Circle,
        1 => ShapeKind::Rectangle,
        _ => ShapeKind::Triangle,
    }
}

fn clamp_u8(v: i32) -> u8 {
    v.clamp(0, 255) as u8
}

fn family_color<R: Rng>(family: usize, rng: &mut R) -> [u8; 3] {
    let base = FAMILY_RGB[family];
    [
        clamp_u8(base[0] + rng.gen_range(-20..=20)),
        clamp_u8(base[1] + rng.gen_range(-20..=20)),
        clamp_u8(base[2] + rng.gen_range(-20..=20)),
    ]
}

/// Build the deterministic scene for image `index` with the given global
/// class id (`0..N_UNIVERSE`: shape kind x color family).
pub fn scene_spec(seed: u64, index: u64, class: usize, size: usize) -> SceneSpec {
    assert!(class < N_UNIVERSE, "class id {class} outside 0..{N_UNIVERSE}");
    let scene_seed = mix_seed(seed, index, class as u64, 7);
    let mut rng = rng_from_seed(scene_seed);
    let s2 = 2 * size as i64; // doubled-grid extent

    // muted background base color, with headroom for texture and gradient
    let bg_base = [
        rng.gen_range(90..=150) as u8,
        rng.gen_range(90..=150) as u8,
        rng.gen_range(90..=150) as u8,
    ];

    // dominant shape: large, fully inside the canvas
    let mut shapes = Vec::new();
    let half = rng.gen_range(3 * s2 / 16..=s2 / 4);
    let cx = rng.gen_range(half..s2 - half);
    let cy = rng.gen_range(half..s2 - half);
    shapes.push(Shape {
        kind: kind_of(class),
        cx,
        cy,
        half,
        color: family_color(class % N_FAMILIES, &mut rng),
    });

    // small distractors of random kind and family: localizable landmarks
    // scattered over the canvas, like background objects in a photograph
    for _ in 0..rng.gen_range(3..=6) {
        let half = rng.gen_range(s2 / 24..=s2 / 10).max(2);
        let cx = rng.gen_range(half..s2 - half);
        let cy = rng.gen_range(half..s2 - half);
        let kind = match rng.gen_range(0..N_KINDS) {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Rectangle,
            _ => ShapeKind::Triangle,
        };
        let fam = rng.gen_range(0..N_FAMILIES);
        shapes.push(Shape {
            kind,
            cx,
            cy,
            half,
            color: family_color(fam, &mut rng),
        });
    }

    SceneSpec {
        seed: scene_seed,
        size,
        class_universe: class,
        shapes,
        bg_base,
    }
}

/// Lattice hash for value noise: u16 in `0..=65535`.
fn lattice(seed: u64, octave: u64, cx: i64, cy: i64) -> i64 {
    let h = splitmix64(
        seed ^ octave.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ (cx as u64).wrapping_mul(0x8ebc_6af0_9c88_c6e3)
            ^ (cy as u64).wrapping_mul(0x5851_f42d_4c95_7f2d),
    );
    (h >> 48) as i64 // 0..65536
}

/// Fixed-point bilinear value noise at pixel `(x, y)` with the given cell
/// size; returns a value in `0..=65535`.
fn value_noise(seed: u64, octave: u64, x: i64, y: i64, cell: i64) -> i64 {
    let cx = x.div_euclid(cell);
    let cy = y.div_euclid(cell);
    let fx = x.rem_euclid(cell);
    let fy = y.rem_euclid(cell);
    let v00 = lattice(seed, octave, cx, cy);
    let v10 = lattice(seed, octave, cx + 1, cy);
    let v01 = lattice(seed, octave, cx, cy + 1);
    let v11 = lattice(seed, octave, cx + 1, cy + 1);
    let top = v00 * (cell - fx) + v10 * fx;
    let bot = v01 * (cell - fx) + v11 * fx;
    (top * (cell - fy) + bot * fy) / (cell * cell)
}

/// Coverage (0..=4) of a shape over the 2x2 subsamples of pixel `(x, y)`.
fn coverage(shape: &Shape, x: i64, y: i64) -> i32 {
    let mut cov = 0;
    for sy in 0..2 {
        for sx in 0..2 {
            // subsample center in doubled-grid coordinates
            let px = 2 * x + sx;
            let py = 2 * y + sy;
            let dx = px - shape.cx;
            let dy = py - shape.cy;
            let inside = match shape.kind {
                ShapeKind::Circle => dx * dx + dy * dy <= shape.half * shape.half,
                ShapeKind::Rectangle => dx.abs() <= shape.half && dy.abs() <= shape.half,
                ShapeKind::Triangle => {
                    // apex up: (0,-h), (-h,h), (h,h) around the center
                    let (ax, ay) = (0i64, -shape.half);
                    let (bx, by) = (-shape.half, shape.half);
                    let (cx2, cy2) = (shape.half, shape.half);
                    let e0 = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
                    let e1 = (cx2 - bx) * (dy - by) - (cy2 - by) * (dx - bx);
                    let e2 = (ax - cx2) * (dy - cy2) - (ay - cy2) * (dx - cx2);
                    (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0)
                }
            };
            if inside {
                cov += 1;
            }
        }
    }
    cov
}

/// Render a scene to an 8-bit-exact image.
pub fn render_scene(spec: &SceneSpec) -> Image {
    let n = spec.size;
    let mut img = Image::new(n, n);
    // Per-channel linear gradient coefficients in -48..=48. Together with
    // the per-channel noise below this gives every location of the canvas a
    // distinctive color signature, so correspondence between views is
    // decidable from local appearance everywhere, not only on shapes.
    let mut gc = [(0i64, 0i64); 3];
    for (c, g) in gc.iter_mut().enumerate() {
        let hx = splitmix64(spec.seed ^ (0xB0A3 + 2 * c as u64));
        let hy = splitmix64(spec.seed ^ (0xB0A4 + 2 * c as u64));
        *g = ((hx >> 48) as i64 % 129 - 64, (hy >> 48) as i64 % 129 - 64);
    }
    let ni = n as i64;
    for y in 0..ni {
        for x in 0..ni {
            // Two-scale value noise; the dominant scale matches the
            // feature-grid cell so adjacent cells stay distinguishable, and
            // both scales are coarse enough to survive crop resampling and
            // mild blur. The strong component is shared across channels
            // (gray): gray texture is a fixed point of hue and saturation
            // changes, so local appearance stays matchable under the color
            // augmentations. A milder independent per-channel tint adds a
            // color signature on top.
            let l1 = value_noise(spec.seed, 7, x, y, (ni / 8).max(2));
            let l2 = value_noise(spec.seed, 8, x, y, (ni / 16).max(2));
            let luma = ((l1 + l2) / 2 - 32768) / 200;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let n1 = value_noise(spec.seed, 1 + 2 * c as u64, x, y, (ni / 8).max(2));
                let n2 = value_noise(spec.seed, 2 + 2 * c as u64, x, y, (ni / 16).max(2));
                let tint = ((n1 + n2) / 2 - 32768) / 900;
                let grad = (gc[c].0 * (2 * x - ni) + gc[c].1 * (2 * y - ni)) / (2 * ni);
                px[c] = clamp_u8(
                    spec.bg_base[c] as i32 + luma as i32 + tint as i32 + grad as i32,
                );
            }
            for shape in &spec.shapes {
                let cov = coverage(shape, x, y);
                if cov > 0 {
                    for c in 0..3 {
                        let blended =
                            (px[c] as i32 * (4 - cov) + shape.color[c] as i32 * cov + 2) / 4;
                        px[c] = clamp_u8(blended);
                    }
                }
            }
            img.set_pixel(x as usize, y as usize, [
                px[0] as f32 / 255.0,
                px[1] as f32 / 255.0,
                px[2] as f32 / 255.0,
            ]);
        }
    }
    img
}

/// Generate a balanced, reproducible corpus of PPM images plus `labels.tsv`.
///
/// `class_offset` shifts the classes used into the 24-class universe so a
/// probe corpus can be disjoint from a pretraining corpus. Labels in
/// `labels.tsv` are local ids `0..n_classes`.
pub fn generate_corpus<P: AsRef<Path>>(
    dir: P,
    seed: u64,
    count: usize,
    size: usize,
    n_classes: usize,
    class_offset: usize,
) -> Result<()> {
    if n_classes == 0 || count < n_classes {
        return Err(Error::Config(format!(
            "count {count} must be >= n_classes {n_classes} (both positive)"
        )));
    }
    if size < 32 {
        return Err(Error::Config(format!("size {size} must be >= 32")));
    }
    if class_offset + n_classes > N_UNIVERSE {
        return Err(Error::Config(format!(
            "class range {class_offset}..{} exceeds the {N_UNIVERSE}-class universe",
            class_offset + n_classes
        )));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut labels = Vec::new();
    for i in 0..count {
        let local = i % n_classes; // balanced round-robin
        let spec = scene_spec(seed, i as u64, class_offset + local, size);
        let img = render_scene(&spec);
        let name = format!("img_{i:05}.ppm");
        img.save_ppm(dir.join(&name))?;
        labels.push((name, local));
    }
    let mut f = std::fs::File::create(dir.join("labels.tsv"))?;
    for (name, class) in &labels {
        writeln!(f, "{name}\t{class}")?;
    }
    Ok(())
}

/// A loaded image folder with optional labels, in lexicographic name order.
#[derive(Debug)]
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<Image>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.labels
            .as_ref()
            .map(|l| l.iter().max().map(|m| m + 1).unwrap_or(0))
            .unwrap_or(0)
    }
}

/// Load every `.ppm` in a directory; reads `labels.tsv` if present.
pub fn load_folder<P: AsRef<Path>>(path: P) -> Result<Dataset> {
    let dir = path.as_ref();
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    names.sort_unstable();
    if names.is_empty() {
        return Err(Error::Config(format!("no .ppm images in {}", dir.display())));
    }
    let mut images = Vec::with_capacity(names.len());
    for n in &names {
        images.push(Image::load_ppm(dir.join(n))?);
    }
    let tsv = dir.join("labels.tsv");
    let labels = if tsv.exists() {
        let text = std::fs::read_to_string(&tsv)?;
        let mut by_name = std::collections::HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (name, class) = line.split_once('\t').ok_or_else(|| Error::Parse {
                file: tsv.display().to_string(),
                msg: format!("line {}: expected NAME<TAB>CLASS", lineno + 1),
            })?;
            let class: usize = class.trim().parse().map_err(|_| Error::Parse {
                file: tsv.display().to_string(),
                msg: format!("line {}: bad class id {class:?}", lineno + 1),
            })?;
            by_name.insert(name.to_string(), class);
        }
        let mut labels = Vec::with_capacity(names.len());
        for n in &names {
            labels.push(*by_name.get(n).ok_or_else(|| Error::Parse {
                file: tsv.display().to_string(),
                msg: format!("no label for image {n:?}"),
            })?);
        }
        Some(labels)
    } else {
        None
    };
    Ok(Dataset {
        names,
        images,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_byte_identical_across_runs() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_corpus(d1.path(), 1, 10, 32, 5, 0).unwrap();
        generate_corpus(d2.path(), 1, 10, 32, 5, 0).unwrap();
        for i in 0..10 {
            let name = format!("img_{i:05}.ppm");
            assert_eq!(
                std::fs::read(d1.path().join(&name)).unwrap(),
                std::fs::read(d2.path().join(&name)).unwrap(),
                "{name} differs"
            );
        }
        assert_eq!(
            std::fs::read(d1.path().join("labels.tsv")).unwrap(),
            std::fs::read(d2.path().join("labels.tsv")).unwrap()
        );
        // different seed changes content
        let d3 = tempfile::tempdir().unwrap();
        generate_corpus(d3.path(), 2, 10, 32, 5, 0).unwrap();
        assert_ne!(
            std::fs::read(d1.path().join("img_00000.ppm")).unwrap(),
            std::fs::read(d3.path().join("img_00000.ppm")).unwrap()
        );
    }

    #[test]
    fn classes_are_balanced() {
        let d = tempfile::tempdir().unwrap();
        generate_corpus(d.path(), 3, 100, 32, 5, 0).unwrap();
        let ds = load_folder(d.path()).unwrap();
        let labels = ds.labels.unwrap();
        for c in 0..5 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 20);
        }
    }

    #[test]
    fn load_round_trip_preserves_bytes() {
        let d = tempfile::tempdir().unwrap();
        generate_corpus(d.path(), 4, 3, 32, 3, 0).unwrap();
        let ds = load_folder(d.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.names, vec!["img_00000.ppm", "img_00001.ppm", "img_00002.ppm"]);
        // re-save and compare bytes: 8-bit round trip is exact
        let out = d.path().join("resave.ppm");
        ds.images[0].save_ppm(&out).unwrap();
        assert_eq!(
            std::fs::read(&out).unwrap(),
            std::fs::read(d.path().join("img_00000.ppm")).unwrap()
        );
        for img in &ds.images {
            assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn invalid_arguments_rejected() {
        let d = tempfile::tempdir().unwrap();
        assert!(generate_corpus(d.path(), 1, 3, 32, 5, 0).is_err()); // count < classes
        assert!(generate_corpus(d.path(), 1, 10, 16, 5, 0).is_err()); // size < 32
        assert!(generate_corpus(d.path(), 1, 30, 32, 20, 10).is_err()); // exceeds universe
    }

    #[test]
    fn malformed_labels_name_the_file() {
        let d = tempfile::tempdir().unwrap();
        generate_corpus(d.path(), 5, 2, 32, 2, 0).unwrap();
        std::fs::write(d.path().join("labels.tsv"), "img_00000.ppm nine\n").unwrap();
        let err = load_folder(d.path()).unwrap_err().to_string();
        assert!(err.contains("labels.tsv"), "{err}");
    }

    #[test]
    fn distinct_classes_render_distinct_dominant_shapes() {
        let circle = scene_spec(1, 0, 0, 64); // kind 0
        let tri = scene_spec(1, 0, 2 * N_FAMILIES, 64); // kind 2
        assert_eq!(circle.shapes[0].kind, ShapeKind::Circle);
        assert_eq!(tri.shapes[0].kind, ShapeKind::Triangle);
        // dominant shape is the largest
        for spec in [&circle, &tri] {
            for s in &spec.shapes[1..] {
                assert!(s.half < spec.shapes[0].half);
            }
        }
    }
}
