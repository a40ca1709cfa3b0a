//! Procedural image-caption corpus: two coloured shapes on a plain
//! background, with a templated caption naming both shapes and their
//! spatial relation. Every record carries the scene description it was
//! rendered from, so per-pixel ground truth is always recoverable.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

use crate::config::CHANNELS;
use crate::error::{Error, Result};
use crate::model::ImageBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Ground-truth label; 0 is background.
    pub fn label(self) -> u8 {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Square => 2,
            ShapeKind::Triangle => 3,
        }
    }

    /// Whether offset `(dx, dy)` from the centre falls inside a shape of
    /// half-extent `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            ShapeKind::Triangle => {
                // Apex up, base at dy = r.
                dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5
            }
        }
    }
}

pub const NUM_LABELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeColor {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl ShapeColor {
    pub const ALL: [ShapeColor; 6] = [
        ShapeColor::Red,
        ShapeColor::Green,
        ShapeColor::Blue,
        ShapeColor::Yellow,
        ShapeColor::Magenta,
        ShapeColor::Cyan,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ShapeColor::Red => "red",
            ShapeColor::Green => "green",
            ShapeColor::Blue => "blue",
            ShapeColor::Yellow => "yellow",
            ShapeColor::Magenta => "magenta",
            ShapeColor::Cyan => "cyan",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            ShapeColor::Red => [0.9, 0.1, 0.1],
            ShapeColor::Green => [0.1, 0.8, 0.2],
            ShapeColor::Blue => [0.15, 0.25, 0.95],
            ShapeColor::Yellow => [0.95, 0.9, 0.1],
            ShapeColor::Magenta => [0.9, 0.2, 0.85],
            ShapeColor::Cyan => [0.1, 0.85, 0.9],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Above,
    Below,
    NextTo,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::Above, Relation::Below, Relation::NextTo];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::NextTo => "next to",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: ShapeColor,
    /// Centre in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Half-extent in pixels.
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Grey level of the background.
    pub background: f64,
    /// The caption's subject first, then its object.
    pub shapes: [ShapeSpec; 2],
    pub relation: Relation,
}

impl SceneSpec {
    pub fn caption(&self) -> String {
        let [a, b] = &self.shapes;
        format!(
            "a {} {} {} a {} {}",
            a.color.word(),
            a.kind.word(),
            self.relation.phrase(),
            b.color.word(),
            b.kind.word()
        )
    }

    /// RGB pixels `(3, size, size)` and a per-pixel label map.
    pub fn render(&self, size: usize) -> (Array3<f64>, Array2<u8>) {
        let mut img = Array3::from_elem((CHANNELS, size, size), self.background);
        let mut labels = Array2::zeros((size, size));
        for s in &self.shapes {
            let rgb = s.color.rgb();
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f64 + 0.5 - s.cx, y as f64 + 0.5 - s.cy);
                    if s.kind.contains(dx, dy, s.radius) {
                        for c in 0..CHANNELS {
                            img[[c, y, x]] = rgb[c];
                        }
                        labels[[y, x]] = s.kind.label();
                    }
                }
            }
        }
        (img, labels)
    }

    fn sample<R: Rng>(rng: &mut R, size: usize) -> Self {
        let scale = size as f64 / 32.0;
        let pick_shape = |rng: &mut R| {
            (
                ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())],
                ShapeColor::ALL[rng.random_range(0..ShapeColor::ALL.len())],
            )
        };
        let (k1, c1) = pick_shape(rng);
        let (k2, c2) = loop {
            let s = pick_shape(rng);
            if s != (k1, c1) {
                break s;
            }
        };
        let relation = Relation::ALL[rng.random_range(0..Relation::ALL.len())];
        let near = |rng: &mut R| rng.random_range(6.0..10.0) * scale;
        let far = |rng: &mut R| rng.random_range(22.0..26.0) * scale;
        let free = |rng: &mut R| rng.random_range(8.0..24.0) * scale;
        let (p1, p2) = match relation {
            Relation::Above => ((free(rng), near(rng)), (free(rng), far(rng))),
            Relation::Below => ((free(rng), far(rng)), (free(rng), near(rng))),
            Relation::NextTo => {
                let y = free(rng);
                let (a, b) = (near(rng), far(rng));
                if rng.random_bool(0.5) {
                    ((a, y), (b, y))
                } else {
                    ((b, y), (a, y))
                }
            }
        };
        let r1 = rng.random_range(4.0..6.0) * scale;
        let r2 = rng.random_range(4.0..6.0) * scale;
        SceneSpec {
            background: rng.random_range(0.0..0.35),
            shapes: [
                ShapeSpec { kind: k1, color: c1, cx: p1.0, cy: p1.1, radius: r1 },
                ShapeSpec { kind: k2, color: c2, cx: p2.0, cy: p2.1, radius: r2 },
            ],
            relation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" | "heldout" | "val" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: usize,
    pub scene: SceneSpec,
    pub caption: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub image_size: usize,
    pub seed: u64,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Renders the given records into one batch.
    pub fn images(&self, records: &[&Record]) -> ImageBatch {
        let s = self.image_size;
        let mut px = Array4::zeros((records.len(), CHANNELS, s, s));
        for (i, r) in records.iter().enumerate() {
            px.index_axis_mut(Axis(0), i).assign(&r.scene.render(s).0);
        }
        ImageBatch { pixels: px }
    }
}

/// Shape pixels needed, as a fraction of the patch, for a patch to count
/// as showing a shape.
pub const FOREGROUND_MIN_FRACTION: f64 = 0.25;

/// Ground-truth label of each patch (row-major grid): the shape with the
/// most pixels inside it when shapes cover at least
/// [`FOREGROUND_MIN_FRACTION`] of the patch, background otherwise.
pub fn patch_labels(labels: &Array2<u8>, patch: usize) -> Vec<u8> {
    let grid = labels.nrows() / patch;
    let area = (patch * patch) as f64;
    let mut out = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let mut counts = [0usize; NUM_LABELS];
            for y in 0..patch {
                for x in 0..patch {
                    counts[labels[[gy * patch + y, gx * patch + x]] as usize] += 1;
                }
            }
            let fg: usize = counts[1..].iter().sum();
            let mut best = 0;
            if fg as f64 >= FOREGROUND_MIN_FRACTION * area {
                best = 1;
                for l in 2..NUM_LABELS {
                    if counts[l] > counts[best] {
                        best = l;
                    }
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// `n` records, the last `heldout` of them in the test split. Record `i` is
/// drawn from its own RNG stream keyed by `(seed, i)`, so any record can be
/// regenerated independently.
pub fn generate_synthetic_corpus(n: usize, heldout: usize, image_size: usize, seed: u64) -> Result<DatasetManifest> {
    if n < 8 {
        return Err(Error::Input(format!("corpus needs at least 8 records, got {n}")));
    }
    if heldout >= n {
        return Err(Error::Input("held-out split would leave no training records".into()));
    }
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(n);
    let mut stream = 0u64;
    while records.len() < n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        stream += 1;
        let scene = SceneSpec::sample(&mut rng, image_size);
        let key = format!("{:?}", scene);
        if !seen.insert(key) {
            continue;
        }
        let id = records.len();
        records.push(Record {
            id,
            caption: scene.caption(),
            scene,
            split: if id >= n - heldout { Split::Test } else { Split::Train },
        });
    }
    Ok(DatasetManifest {
        image_size,
        seed,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab;

    #[test]
    fn corpus_is_unique_and_seeded() {
        let a = generate_synthetic_corpus(256, 0, 32, 5).unwrap();
        assert_eq!(a.records.len(), 256);
        let mut seen = HashSet::new();
        for r in &a.records {
            let (img, _) = r.scene.render(32);
            let bytes: Vec<u64> = img.iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert((bytes, r.caption.clone())));
        }
        let b = generate_synthetic_corpus(256, 0, 32, 5).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_ne!(a, generate_synthetic_corpus(256, 0, 32, 6).unwrap());
    }

    #[test]
    fn manifest_file_round_trip_is_exact() {
        let m = generate_synthetic_corpus(64, 8, 16, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    }

    #[test]
    fn splits_are_disjoint() {
        let m = generate_synthetic_corpus(40, 8, 32, 1).unwrap();
        assert_eq!(m.split(Split::Test).len(), 8);
        assert_eq!(m.split(Split::Train).len(), 32);
        assert!(m.split(Split::Test).iter().all(|r| r.id >= 32));
    }

    #[test]
    fn captions_fit_the_text_budget() {
        let m = generate_synthetic_corpus(64, 0, 32, 2).unwrap();
        for r in &m.records {
            let ids = vocab::tokenize(&r.caption, 16, 128).unwrap();
            assert!(ids.iter().all(|&i| i != vocab::UNK), "{}", r.caption);
        }
    }

    #[test]
    fn tiny_corpus_is_rejected() {
        assert!(generate_synthetic_corpus(4, 0, 32, 0).is_err());
    }

    #[test]
    fn patch_labels_use_dominant_shape_above_coverage() {
        let mut labels = Array2::zeros((4, 4));
        // Top-left: three circle pixels.
        labels[[0, 0]] = 1;
        labels[[0, 1]] = 1;
        labels[[1, 0]] = 1;
        // Top-right: one square pixel, exactly a quarter of the patch.
        labels[[0, 3]] = 2;
        // Bottom-right: two triangle pixels outvote one square pixel.
        labels[[2, 2]] = 3;
        labels[[3, 3]] = 3;
        labels[[3, 2]] = 2;
        assert_eq!(patch_labels(&labels, 2), vec![1, 2, 0, 3]);

        let mut big = Array2::zeros((8, 8));
        // Three shape pixels of sixteen stay background.
        big[[0, 0]] = 1;
        big[[0, 1]] = 1;
        big[[1, 1]] = 2;
        big[[4, 4]] = 3;
        big[[4, 5]] = 3;
        big[[5, 4]] = 3;
        big[[5, 5]] = 1;
        assert_eq!(patch_labels(&big, 4), vec![0, 0, 0, 3]);
    }
}
