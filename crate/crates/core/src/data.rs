//! Deterministic generator of paired images and multi-sentence
//! captions: flat-color scenes of one to three shapes on a colored
//! background, rasterized without anti-aliasing, captioned from fixed
//! templates whose every content word is in the shipped lexicon.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Color names and their 8-bit RGB values. Names double as caption
/// adjectives, so each must appear in the lexicon.
pub const PALETTE: [(&str, [u8; 3]); 20] = [
    ("red", [220, 50, 47]),
    ("blue", [38, 139, 210]),
    ("green", [0, 160, 80]),
    ("yellow", [240, 200, 40]),
    ("purple", [120, 60, 160]),
    ("orange", [230, 130, 30]),
    ("pink", [240, 130, 170]),
    ("brown", [140, 90, 50]),
    ("black", [25, 25, 25]),
    ("white", [245, 245, 245]),
    ("gray", [128, 128, 128]),
    ("cyan", [60, 190, 200]),
    ("magenta", [200, 60, 160]),
    ("teal", [20, 130, 130]),
    ("olive", [120, 130, 40]),
    ("maroon", [130, 30, 40]),
    ("navy", [30, 40, 110]),
    ("lime", [160, 220, 60]),
    ("coral", [250, 120, 100]),
    ("violet", [160, 110, 220]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    pub fn name(&self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quadrant {
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::UpperLeft,
        Quadrant::UpperRight,
        Quadrant::LowerLeft,
        Quadrant::LowerRight,
    ];

    pub fn phrase(&self) -> &'static str {
        match self {
            Quadrant::UpperLeft => "upper left",
            Quadrant::UpperRight => "upper right",
            Quadrant::LowerLeft => "lower left",
            Quadrant::LowerRight => "lower right",
        }
    }

    /// Quadrant center in pixel coordinates for an `s x s` image.
    fn center(&self, s: usize) -> (f64, f64) {
        let q = s as f64 / 4.0;
        match self {
            Quadrant::UpperLeft => (q, q),
            Quadrant::UpperRight => (3.0 * q, q),
            Quadrant::LowerLeft => (q, 3.0 * q),
            Quadrant::LowerRight => (3.0 * q, 3.0 * q),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: usize,
    pub size: SizeClass,
    pub quadrant: Quadrant,
}

/// One fully specified scene; rendering and captioning are pure
/// functions of this value.
#[derive(Clone, Debug)]
pub struct Scene {
    pub background: usize,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

/// Everything needed to regenerate a dataset bit-identically.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub count: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Lexicon override; None uses the builtin vocabulary file.
    pub lexicon_file: Option<std::path::PathBuf>,
    /// Export target; None keeps the dataset in memory.
    pub out_dir: Option<std::path::PathBuf>,
}

impl DatasetSpec {
    pub fn new(count: usize, image_size: usize, seed: u64) -> DatasetSpec {
        DatasetSpec {
            count,
            image_size,
            seed,
            lexicon_file: None,
            out_dir: None,
        }
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Samples the scene for one (sample seed, dataset seed) pair.
pub fn sample_scene(seed: u64, spec: &DatasetSpec) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, seed));
    let background = rng.gen_range(0..PALETTE.len());
    let n_objects = rng.gen_range(1..=3usize);
    let mut quadrants = Quadrant::ALL.to_vec();
    quadrants.shuffle(&mut rng);
    let objects = (0..n_objects)
        .map(|i| {
            let mut color = rng.gen_range(0..PALETTE.len());
            while color == background {
                color = rng.gen_range(0..PALETTE.len());
            }
            SceneObject {
                shape: ShapeKind::ALL[rng.gen_range(0..3)],
                color,
                size: if rng.gen_bool(0.5) {
                    SizeClass::Small
                } else {
                    SizeClass::Large
                },
                quadrant: quadrants[i],
            }
        })
        .collect();
    Scene {
        background,
        objects,
        seed,
    }
}

fn color_value(idx: usize) -> [f64; 3] {
    let [r, g, b] = PALETTE[idx].1;
    [r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0]
}

/// Rasterizes a scene into an `[s, s, 3]` tensor with values in [0, 1]
/// that are exact multiples of 1/255. No anti-aliasing: a pixel either
/// belongs to a shape or it does not.
pub fn render(scene: &Scene, s: usize) -> Tensor {
    let mut data = vec![0.0f64; s * s * 3];
    let bg = color_value(scene.background);
    for px in 0..s * s {
        data[px * 3..px * 3 + 3].copy_from_slice(&bg);
    }
    for obj in &scene.objects {
        let (cx, cy) = obj.quadrant.center(s);
        let r = match obj.size {
            SizeClass::Small => s as f64 * 0.09,
            SizeClass::Large => s as f64 * 0.16,
        };
        let color = color_value(obj.color);
        for y in 0..s {
            for x in 0..s {
                let fx = x as f64 + 0.5;
                let fy = y as f64 + 0.5;
                let inside = match obj.shape {
                    ShapeKind::Circle => {
                        (fx - cx).powi(2) + (fy - cy).powi(2) <= r * r
                    }
                    ShapeKind::Square => (fx - cx).abs() <= r && (fy - cy).abs() <= r,
                    ShapeKind::Triangle => {
                        // upward triangle: apex above, flat base below
                        let dy = fy - (cy - r);
                        dy >= 0.0 && dy <= 2.0 * r && (fx - cx).abs() <= dy / 2.0
                    }
                };
                if inside {
                    data[(y * s + x) * 3..(y * s + x) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }
    Tensor::new(vec![s, s, 3], data).expect("palette values are finite")
}

/// One sentence per object plus a background sentence.
pub fn caption(scene: &Scene) -> String {
    let mut sentences = Vec::with_capacity(scene.objects.len() + 1);
    for obj in &scene.objects {
        sentences.push(format!(
            "A {} {} {} sits in the {}.",
            obj.size.name(),
            PALETTE[obj.color].0,
            obj.shape.name(),
            obj.quadrant.phrase()
        ));
    }
    sentences.push(format!("The background is {}.", PALETTE[scene.background].0));
    sentences.join(" ")
}

/// Rasterized scene and caption for one sample seed.
pub fn gen_sample(seed: u64, spec: &DatasetSpec) -> (Tensor, String) {
    let scene = sample_scene(seed, spec);
    (render(&scene, spec.image_size), caption(&scene))
}

/// The whole dataset, in sample-seed order 0..count.
pub fn generate(spec: &DatasetSpec) -> Vec<(Tensor, String)> {
    (0..spec.count as u64).map(|i| gen_sample(i, spec)).collect()
}

/// Binary 8-bit PPM bytes for an `[h, w, 3]` tensor in [0, 1].
pub fn ppm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::ShapeMismatch {
            op: "ppm",
            details: format!("[h, w, 3] image required, got {shape:?}"),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for &v in image.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

/// Parses binary 8-bit PPM back into an `[h, w, 3]` tensor.
pub fn read_ppm(mut r: impl Read) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_exact(&mut [0u8; 0])?; // keeps the Read bound exercised on empty input
    std::io::Read::read_to_end(&mut r, &mut bytes)?;
    let bad = |details: &str| Error::Parse {
        what: "ppm",
        line: 0,
        details: details.to_string(),
    };
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    if token(&bytes)? != "255" {
        return Err(bad("only maxval 255 supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    let data: Vec<f64> = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Tensor::new(vec![h, w, 3], data)
}

/// Writes `NNN.ppm` + `NNN.txt` per sample and an index file listing
/// the pairs, one `NNN<TAB>image<TAB>caption` line each.
pub fn export(samples: &[(Tensor, String)], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = String::new();
    for (i, (image, caption)) in samples.iter().enumerate() {
        let stem = format!("{i:03}");
        let img_name = format!("{stem}.ppm");
        let txt_name = format!("{stem}.txt");
        let mut f = std::fs::File::create(dir.join(&img_name))?;
        f.write_all(&ppm_bytes(image)?)?;
        std::fs::write(dir.join(&txt_name), caption)?;
        index.push_str(&format!("{stem}\t{img_name}\t{txt_name}\n"));
    }
    std::fs::write(dir.join("index.tsv"), index)?;
    Ok(())
}

/// Loads a dataset exported by [`export`].
pub fn load_dir(dir: &Path) -> Result<Vec<(Tensor, String)>> {
    let index = std::fs::read_to_string(dir.join("index.tsv"))?;
    let mut samples = Vec::new();
    for (lineno, line) in index.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (_, img, txt) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::Parse {
                    what: "dataset index",
                    line: lineno + 1,
                    details: format!("expected 3 tab-separated fields, got {line:?}"),
                })
            }
        };
        let image = read_ppm(std::fs::File::open(dir.join(img))?)?;
        let caption = std::fs::read_to_string(dir.join(txt))?;
        samples.push((image, caption));
    }
    Ok(samples)
}

/// Deterministic vocabulary-sweep sentences covering every palette
/// color, every shape (singular and plural with a quantifier), both
/// sizes, and all quadrant phrases. Appended to pooled captions by the
/// timing study so each granularity is guaranteed a large unit set.
pub fn vocabulary_sweep() -> String {
    let mut sentences = Vec::new();
    for (i, (color, _)) in PALETTE.iter().enumerate() {
        let shape = ShapeKind::ALL[i % 3];
        let quadrant = Quadrant::ALL[i % 4];
        let size = if i % 2 == 0 { SizeClass::Small } else { SizeClass::Large };
        if i % 3 == 0 {
            let plural = match shape {
                ShapeKind::Circle => "circles",
                ShapeKind::Square => "squares",
                ShapeKind::Triangle => "triangles",
            };
            let quant = if i % 2 == 0 { "Two" } else { "Three" };
            sentences.push(format!(
                "{quant} {} {color} {plural} sit in the {}.",
                size.name(),
                quadrant.phrase()
            ));
        } else {
            sentences.push(format!(
                "A {} {color} {} sits in the {}.",
                size.name(),
                shape.name(),
                quadrant.phrase()
            ));
        }
    }
    sentences.join(" ")
}
