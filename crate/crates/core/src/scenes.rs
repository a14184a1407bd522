//! Synthetic scenes: colored shapes on a noisy gray background, a templated
//! caption with its bracketed parse, and per-object ground truth.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{read_mask, write_mask, BinaryMask};
use crate::serialize::{read_tensors, write_tensors};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "scenes.jsonl";
const BACKGROUND: f64 = 0.25;
const MAX_ATTEMPTS: usize = 1000;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Invalid(format!(concat!("unknown ", stringify!($name), " {:?}"), s))),
                }
            }
        }
    };
}

word_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle" });
word_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow" });
word_enum!(Relation { Above => "above", Below => "below", LeftOf => "left of", RightOf => "right of" });

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

impl Relation {
    fn bracketed(self) -> &'static str {
        match self {
            Relation::Above => "(IN above)",
            Relation::Below => "(IN below)",
            Relation::LeftOf => "(RB left) (IN of)",
            Relation::RightOf => "(RB right) (IN of)",
        }
    }
}

/// Inclusive pixel bounds; `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl From<[usize; 4]> for BoundingBox {
    fn from([x0, y0, x1, y1]: [usize; 4]) -> Self {
        BoundingBox { x0, y0, x1, y1 }
    }
}

impl From<BoundingBox> for [usize; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BoundingBox {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x <= self.x1 as f64 && y >= self.y0 as f64 && y <= self.y1 as f64
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }

    fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0)
    }

    fn of_mask(mask: &BinaryMask) -> Option<Self> {
        let mut b: Option<BoundingBox> = None;
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.get(y, x) {
                    b = Some(match b {
                        None => BoundingBox { x0: x, y0: y, x1: x, y1: y },
                        Some(b) => BoundingBox { x0: b.x0.min(x), y0: b.y0.min(y), x1: b.x1.max(x), y1: b.y1.max(y) },
                    });
                }
            }
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub bbox: BoundingBox,
    pub mask: BinaryMask,
}

impl SceneObject {
    /// The noun phrase that names this object in captions.
    pub fn phrase(&self) -> Vec<String> {
        vec!["a".into(), self.color.to_string(), self.shape.to_string()]
    }

    fn bracketed(&self) -> String {
        format!("(NP (DT a) (JJ {}) (NN {}))", self.color, self.shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub id: String,
    /// `[H, W, 3]` in [0, 1].
    pub image: Tensor,
    pub caption: Vec<String>,
    pub parse: String,
    pub objects: Vec<SceneObject>,
    pub relation: Option<Relation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub objects: usize,
    pub noise: f64,
    /// Object side lengths are drawn from this range, as fractions of the image size.
    pub min_extent: f64,
    pub max_extent: f64,
    /// Ground-truth masks must stay disjoint after max-pooling by this factor.
    pub delta: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec { image_size: 80, objects: 2, noise: 0.1, min_extent: 0.175, max_extent: 0.275, delta: 4 }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Invalid(format!("image size {} below 32", self.image_size)));
        }
        if !(1..=3).contains(&self.objects) {
            return Err(Error::Invalid(format!("object count {} outside 1..=3", self.objects)));
        }
        if !(0.0..=0.2).contains(&self.noise) {
            return Err(Error::Invalid(format!("noise {} outside [0, 0.2]", self.noise)));
        }
        if !(0.0 < self.min_extent && self.min_extent <= self.max_extent && self.max_extent <= 1.0) {
            return Err(Error::Invalid("object extent range".into()));
        }
        if self.delta == 0 || self.image_size % self.delta != 0 {
            return Err(Error::Invalid(format!("delta {} does not divide the image size", self.delta)));
        }
        Ok(())
    }
}

fn render_mask(shape: Shape, size: usize, x0: usize, y0: usize, side: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(size, size);
    let s = side as f64;
    for dy in 0..side {
        for dx in 0..side {
            let (px, py) = (dx as f64 + 0.5, dy as f64 + 0.5);
            let inside = match shape {
                Shape::Square => true,
                Shape::Circle => (px - s / 2.0).powi(2) + (py - s / 2.0).powi(2) <= (s / 2.0).powi(2),
                // apex at the top center, base along the bottom edge
                Shape::Triangle => (px - s / 2.0).abs() <= py / 2.0,
            };
            if inside {
                m.set(y0 + dy, x0 + dx, true);
            }
        }
    }
    m
}

fn relation_between(a: &BoundingBox, b: &BoundingBox) -> Relation {
    let ((ax, ay), (bx, by)) = (a.center(), b.center());
    if (ay - by).abs() >= (ax - bx).abs() {
        if ay < by {
            Relation::Above
        } else {
            Relation::Below
        }
    } else if ax < bx {
        Relation::LeftOf
    } else {
        Relation::RightOf
    }
}

fn place_objects(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Result<Vec<SceneObject>> {
    let n = spec.image_size;
    let lo = ((spec.min_extent * n as f64).round() as usize).max(3);
    let hi = ((spec.max_extent * n as f64).round() as usize).clamp(lo, n);
    let mut kinds: Vec<(Shape, Color)> =
        Shape::ALL.iter().flat_map(|&s| Color::ALL.iter().map(move |&c| (s, c))).collect();
    kinds.shuffle(rng);
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut pooled: Vec<BinaryMask> = Vec::new();
    for &(shape, color) in kinds.iter().take(spec.objects) {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let side = rng.gen_range(lo..=hi);
            let x0 = rng.gen_range(0..=n - side);
            let y0 = rng.gen_range(0..=n - side);
            let mask = render_mask(shape, n, x0, y0, side);
            let p = mask.max_pool(spec.delta)?;
            if pooled.iter().any(|q| q.intersects(&p)) {
                continue;
            }
            let bbox = BoundingBox::of_mask(&mask).expect("non-empty shape");
            objects.push(SceneObject { shape, color, bbox, mask });
            pooled.push(p);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Invalid(format!("could not place {} objects in {MAX_ATTEMPTS} attempts", spec.objects)));
        }
    }
    Ok(objects)
}

fn caption_and_parse(objects: &[SceneObject]) -> (Vec<String>, String, Option<Relation>) {
    let words = |o: &SceneObject| o.phrase();
    match objects {
        [a] => (words(a), a.bracketed(), None),
        [a, b, rest @ ..] => {
            let rel = relation_between(&a.bbox, &b.bbox);
            let mut caption = words(a);
            caption.extend(rel.as_str().split(' ').map(String::from));
            caption.extend(words(b));
            let pp = format!("(PP {} {})", rel.bracketed(), b.bracketed());
            let parse = match rest {
                [] => format!("(S {} {pp})", a.bracketed()),
                [c, ..] => {
                    caption.push("and".into());
                    caption.extend(words(c));
                    format!("(S (NP {} {pp}) (CC and) {})", a.bracketed(), c.bracketed())
                }
            };
            (caption, parse, Some(rel))
        }
        [] => unreachable!("at least one object"),
    }
}

/// Deterministic scene for `(seed, spec)`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<SceneSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = place_objects(&mut rng, spec)?;
    let n = spec.image_size;
    let mut data = vec![BACKGROUND; n * n * 3];
    for o in &objects {
        let rgb = o.color.rgb();
        for y in 0..n {
            for x in 0..n {
                if o.mask.get(y, x) {
                    data[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    if spec.noise > 0.0 {
        for v in &mut data {
            *v = (*v + rng.gen_range(-spec.noise..=spec.noise)).clamp(0.0, 1.0);
        }
    }
    let (caption, parse, relation) = caption_and_parse(&objects);
    Ok(SceneSample {
        id: format!("scene-{seed:06}"),
        image: Tensor::new(vec![n, n, 3], data)?,
        caption,
        parse,
        objects,
        relation,
    })
}

/// Scenes with seeds `seed ^ i` for `i` in `range`.
pub fn generate_scenes(seed: u64, range: std::ops::Range<u64>, spec: &SceneSpec) -> Result<Vec<SceneSample>> {
    range.map(|i| generate_scene(seed ^ i, spec)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectRecord {
    shape: String,
    color: String,
    #[serde(rename = "box")]
    bbox: BoundingBox,
    #[serde(rename = "mask-file")]
    mask_file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    id: String,
    caption: String,
    parse: String,
    objects: Vec<ObjectRecord>,
}

/// Write images, masks and the manifest; returns the manifest path.
pub fn write_dataset(samples: &[SceneSample], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST);
    let file = File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        let image_path = dir.join(format!("{}.grnd", s.id));
        let f = File::create(&image_path).map_err(|e| Error::io(&image_path, e))?;
        let mut w = BufWriter::new(f);
        write_tensors(&mut w, &[("image", &s.image)])
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&image_path, e))?;
        let mut objects = Vec::new();
        for (k, o) in s.objects.iter().enumerate() {
            let mask_file = format!("{}_{k}.pgm", s.id);
            write_mask(&dir.join(&mask_file), &o.mask)?;
            objects.push(ObjectRecord {
                shape: o.shape.to_string(),
                color: o.color.to_string(),
                bbox: o.bbox,
                mask_file,
            });
        }
        let rec = SceneRecord { id: s.id.clone(), caption: s.caption.join(" "), parse: s.parse.clone(), objects };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(&manifest, e))?;
    }
    out.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Load a single-tensor `[H,W,3]` image file.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tensors = read_tensors(&mut BufReader::new(f))?;
    match tensors.pop() {
        Some((_, t)) if tensors.is_empty() && t.rank() == 3 => Ok(t),
        _ => Err(Error::Format(format!("{}: expected one [H,W,C] image tensor", path.display()))),
    }
}

fn relation_in(caption: &[String]) -> Option<Relation> {
    caption.windows(2).find_map(|w| match (w[0].as_str(), w[1].as_str()) {
        ("left", "of") => Some(Relation::LeftOf),
        ("right", "of") => Some(Relation::RightOf),
        ("above", _) => Some(Relation::Above),
        ("below", _) => Some(Relation::Below),
        _ => None,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let manifest = dir.join(MANIFEST);
    let f = File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line)?;
        let image = read_image(&dir.join(format!("{}.grnd", rec.id)))?;
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let mut objects = Vec::new();
        for o in rec.objects {
            if o.bbox.x0 > o.bbox.x1 || o.bbox.y0 > o.bbox.y1 || o.bbox.x1 >= w || o.bbox.y1 >= h {
                return Err(Error::Invalid(format!("{}: box {:?} outside the {w}x{h} image", rec.id, o.bbox)));
            }
            let mask = read_mask(&dir.join(&o.mask_file))?;
            if mask.shape() != [h, w] {
                return Err(Error::shape("scene mask", &[&mask.shape(), &[h, w]]));
            }
            objects.push(SceneObject { shape: o.shape.parse()?, color: o.color.parse()?, bbox: o.bbox, mask });
        }
        let caption: Vec<String> = rec.caption.split_whitespace().map(String::from).collect();
        out.push(SceneSample {
            relation: relation_in(&caption),
            id: rec.id,
            image,
            caption,
            parse: rec.parse,
            objects,
        });
    }
    Ok(out)
}
