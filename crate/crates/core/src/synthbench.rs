//! Synthetic detection benchmark.
//!
//! Scenes are lists of ground-truth boxes on a small canvas. Each class has a
//! unit prototype vector; designated class pairs share most of their
//! direction, so a weak classifier confuses them. A proposal's feature is its
//! overlap-weighted class prototype plus Gaussian noise, followed by the
//! noisy box deltas to the overlapped object.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{dot, norm, Rng};
use crate::pseudo::{iou, BBox};
use crate::regloss::encode_deltas;

/// Seed domains, mixed into the master seed so unrelated draws never share a stream.
pub mod domain {
    pub const PROTOTYPES: u64 = 0x5052_4f54;
    pub const SCENES: u64 = 0x5343_454e;
    pub const SPLIT: u64 = 0x5350_4c54;
    pub const EVAL: u64 = 0x4556_414c;
}

/// SplitMix64 finaliser applied to `master ^ domain`.
pub fn derive_seed(master: u64, domain: u64) -> u64 {
    let mut z = (master ^ domain.rotate_left(32)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Minimum overlap for a proposal to carry object appearance.
pub const APPEARANCE_IOU: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    pub num_fg_classes: usize,
    pub appearance_dim: usize,
    pub confusable_pairs: Vec<(usize, usize)>,
    pub pair_similarity: f64,
    pub noise_sigma: f64,
    pub num_scenes: usize,
    pub num_test_scenes: usize,
    pub canvas_width: f64,
    pub canvas_height: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub max_gt_iou: f64,
    pub jitter_per_object: usize,
    pub random_per_scene: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 2022,
            num_fg_classes: 10,
            appearance_dim: 32,
            confusable_pairs: vec![(0, 1), (2, 3)],
            pair_similarity: 0.9,
            noise_sigma: 0.15,
            num_scenes: 2000,
            num_test_scenes: 300,
            canvas_width: 100.0,
            canvas_height: 100.0,
            min_objects: 1,
            max_objects: 5,
            min_size: 10.0,
            max_size: 40.0,
            max_gt_iou: 0.7,
            jitter_per_object: 8,
            random_per_scene: 8,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!(
                "object count range [{}, {}] is invalid",
                self.min_objects, self.max_objects
            ));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad(format!("size range [{}, {}] is invalid", self.min_size, self.max_size));
        }
        if self.max_size > self.canvas_width.min(self.canvas_height) {
            return bad("max object size exceeds the canvas".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.num_scenes == 0 {
            return bad("num_scenes must be positive".into());
        }
        Ok(())
    }

    /// Foreground classes plus background.
    pub fn num_classes(&self) -> usize {
        self.num_fg_classes + 1
    }

    pub fn background(&self) -> usize {
        self.num_fg_classes
    }

    /// Appearance part plus four geometry entries.
    pub fn feature_dim(&self) -> usize {
        self.appearance_dim + 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototypes {
    pub vectors: Vec<Vec<f64>>,
    pub pairs: Vec<(usize, usize)>,
    pub target_sim: f64,
}

impl ClassPrototypes {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let (u, v) = (&self.vectors[a], &self.vectors[b]);
        dot(u, v) / (norm(u) * norm(v))
    }

    pub fn is_pair(&self, a: usize, b: usize) -> bool {
        self.pairs.iter().any(|&(x, y)| (x, y) == (a, b) || (y, x) == (a, b))
    }

    pub fn partner(&self, c: usize) -> Option<usize> {
        self.pairs.iter().find_map(|&(x, y)| match c {
            _ if c == x => Some(y),
            _ if c == y => Some(x),
            _ => None,
        })
    }
}

/// Unit prototypes: an orthonormal frame from Gram-Schmidt on Gaussian draws,
/// with the second member of each pair rotated towards the first so that the
/// pair's cosine equals `target_sim`.
pub fn gen_prototypes(
    num_fg: usize,
    dim: usize,
    pairs: &[(usize, usize)],
    target_sim: f64,
    seed: u64,
) -> Result<ClassPrototypes> {
    if num_fg < 2 || dim < 8 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes and 8 dimensions, got {num_fg} classes in {dim} dimensions"
        )));
    }
    if num_fg > dim {
        return Err(Error::InvalidArgument(format!(
            "{num_fg} orthogonal class directions do not fit in {dim} dimensions"
        )));
    }
    if !pairs.is_empty() && !(target_sim > -1.0 && target_sim < 1.0) {
        return Err(Error::InvalidArgument(format!("pair similarity must lie in (-1, 1), got {target_sim}")));
    }
    let mut used = vec![false; num_fg];
    for &(a, b) in pairs {
        if a >= num_fg || b >= num_fg || a == b {
            return Err(Error::InvalidArgument(format!("invalid confusable pair ({a}, {b})")));
        }
        if used[a] || used[b] {
            return Err(Error::InvalidArgument(format!(
                "class in pair ({a}, {b}) already belongs to another pair"
            )));
        }
        used[a] = true;
        used[b] = true;
    }

    let mut rng = Rng::new(derive_seed(seed, domain::PROTOTYPES));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(num_fg);
    while basis.len() < num_fg {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for e in &basis {
            let p = dot(&v, e);
            v.iter_mut().zip(e).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }

    let mut vectors = basis.clone();
    let ortho = (1.0 - target_sim * target_sim).sqrt();
    for &(a, b) in pairs {
        vectors[b] = basis[a]
            .iter()
            .zip(&basis[b])
            .map(|(x, y)| target_sim * x + ortho * y)
            .collect();
    }
    Ok(ClassPrototypes {
        vectors,
        pairs: pairs.to_vec(),
        target_sim,
    })
}

pub fn prototypes_for(cfg: &BenchConfig) -> Result<ClassPrototypes> {
    gen_prototypes(
        cfg.num_fg_classes,
        cfg.appearance_dim,
        &cfg.confusable_pairs,
        cfg.pair_similarity,
        cfg.seed,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub width: f64,
    pub height: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub cls: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: u64,
    pub canvas: Canvas,
    pub objects: Vec<GtObject>,
}

impl Scene {
    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

const PLACEMENT_RETRIES: usize = 200;

fn random_box(cfg: &BenchConfig, rng: &mut Rng) -> BBox {
    let w = rng.uniform_range(cfg.min_size, cfg.max_size);
    let h = rng.uniform_range(cfg.min_size, cfg.max_size);
    let x1 = rng.uniform_range(0.0, cfg.canvas_width - w);
    let y1 = rng.uniform_range(0.0, cfg.canvas_height - h);
    BBox::new(x1, y1, x1 + w, y1 + h).expect("sizes are positive")
}

/// One scene with a uniform object count and uniform classes. Objects are
/// rejection-sampled so no two overlap with IoU above `max_gt_iou`; an object
/// that cannot be placed after bounded retries is dropped (never the first).
pub fn gen_scene(protos: &ClassPrototypes, cfg: &BenchConfig, image_id: u64, seed: u64) -> Scene {
    let mut rng = Rng::with_stream(derive_seed(seed, domain::SCENES), image_id);
    let count = cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);
    let mut objects: Vec<GtObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let cls = rng.below(protos.len());
        for _ in 0..PLACEMENT_RETRIES {
            let b = random_box(cfg, &mut rng);
            if objects.iter().all(|o| iou(&o.bbox, &b) <= cfg.max_gt_iou) {
                objects.push(GtObject { bbox: b, cls });
                break;
            }
        }
    }
    Scene {
        image_id,
        canvas: Canvas {
            width: cfg.canvas_width,
            height: cfg.canvas_height,
        },
        objects,
    }
}

/// Region-proposal stand-in: `jitter_per_object` perturbed copies of each
/// object with IoU in `[0.3, 1]`, then `random_per_scene` uniform boxes.
pub fn gen_proposals(scene: &Scene, cfg: &BenchConfig, rng: &mut Rng) -> Vec<BBox> {
    let mut out = Vec::with_capacity(scene.objects.len() * cfg.jitter_per_object + cfg.random_per_scene);
    for obj in &scene.objects {
        let g = obj.bbox;
        for _ in 0..cfg.jitter_per_object {
            let mut chosen = g;
            for _ in 0..PLACEMENT_RETRIES {
                let (w, h) = (g.width(), g.height());
                let cand = BBox::new(
                    g.x1() + 0.35 * w * rng.uniform_range(-1.0, 1.0),
                    g.y1() + 0.35 * h * rng.uniform_range(-1.0, 1.0),
                    g.x2() + 0.35 * w * rng.uniform_range(-1.0, 1.0),
                    g.y2() + 0.35 * h * rng.uniform_range(-1.0, 1.0),
                )
                .ok()
                .and_then(|b| b.clip(scene.canvas.width, scene.canvas.height));
                if let Some(c) = cand {
                    if iou(&c, &g) >= APPEARANCE_IOU {
                        chosen = c;
                        break;
                    }
                }
            }
            out.push(chosen);
        }
    }
    for _ in 0..cfg.random_per_scene {
        out.push(random_box(cfg, rng));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub feature: Vec<f64>,
    pub scene_id: u64,
}

/// Feature of `bbox` in `scene`: with `v` the best overlap and `g` that object,
/// `[v proto(g) + (1 - v) eta, deltas(bbox -> g) + eps]` when `v >= 0.3`,
/// otherwise `[eta, eps]`. Always consumes `dim + 4` normal draws.
pub fn proposal_feature(
    scene: &Scene,
    protos: &ClassPrototypes,
    bbox: &BBox,
    noise_sigma: f64,
    rng: &mut Rng,
) -> Proposal {
    let dim = protos.dim();
    let mut best: Option<(usize, f64)> = None;
    for (j, o) in scene.objects.iter().enumerate() {
        let v = iou(bbox, &o.bbox);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    let mut feature = Vec::with_capacity(dim + 4);
    match best {
        Some((j, v)) if v >= APPEARANCE_IOU => {
            let obj = &scene.objects[j];
            let proto = &protos.vectors[obj.cls];
            for p in proto {
                feature.push(v * p + (1.0 - v) * noise_sigma * rng.normal());
            }
            for d in encode_deltas(bbox, &obj.bbox).to_array() {
                feature.push(d + noise_sigma * rng.normal());
            }
        }
        _ => {
            for _ in 0..dim + 4 {
                feature.push(noise_sigma * rng.normal());
            }
        }
    }
    Proposal {
        bbox: *bbox,
        feature,
        scene_id: scene.image_id,
    }
}

/// Labelled/unlabelled partition of scene ids `0..n`; both lists sorted.
pub fn make_split(n_scenes: usize, label_ratio: f64, seed: u64) -> Result<(Vec<u64>, Vec<u64>)> {
    if n_scenes == 0 {
        return Err(Error::InvalidArgument("cannot split an empty scene set".into()));
    }
    if !(label_ratio > 0.0 && label_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("label ratio must lie in (0, 1), got {label_ratio}")));
    }
    let n_labelled = ((label_ratio * n_scenes as f64).round() as usize).clamp(1, n_scenes);
    let mut ids: Vec<u64> = (0..n_scenes as u64).collect();
    Rng::new(derive_seed(seed, domain::SPLIT)).shuffle(&mut ids);
    let mut labelled = ids[..n_labelled].to_vec();
    let mut unlabelled = ids[n_labelled..].to_vec();
    labelled.sort_unstable();
    unlabelled.sort_unstable();
    Ok((labelled, unlabelled))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    image_id: u64,
    split: SplitTag,
    canvas: Canvas,
    objects: Vec<GtObject>,
}

/// Training scenes (ids `0..num_scenes`) and held-out test scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

/// Generates every scene of the benchmark; scene `i` depends only on the
/// master seed and `i`, so generation is parallel.
pub fn gen_dataset(cfg: &BenchConfig) -> Result<Dataset> {
    cfg.validate()?;
    let protos = prototypes_for(cfg)?;
    let n = cfg.num_scenes as u64;
    let gen = |id: u64| gen_scene(&protos, cfg, id, cfg.seed);
    let train = (0..n).into_par_iter().map(gen).collect();
    let test = (n..n + cfg.num_test_scenes as u64).into_par_iter().map(gen).collect();
    Ok(Dataset { train, test })
}

impl Dataset {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let tagged = self
            .train
            .iter()
            .map(|s| (SplitTag::Train, s))
            .chain(self.test.iter().map(|s| (SplitTag::Test, s)));
        for (split, s) in tagged {
            let rec = SceneRecord {
                image_id: s.image_id,
                split,
                canvas: s.canvas,
                objects: s.objects.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut data = Dataset {
            train: Vec::new(),
            test: Vec::new(),
        };
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SceneRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("line {}: {e}", lineno + 1)))?;
            let scene = Scene {
                image_id: rec.image_id,
                canvas: rec.canvas,
                objects: rec.objects,
            };
            match rec.split {
                SplitTag::Train => data.train.push(scene),
                SplitTag::Test => data.test.push(scene),
            }
        }
        for (i, s) in data.train.iter().enumerate() {
            if s.image_id != i as u64 {
                return Err(Error::Dataset(format!(
                    "training scenes must have ids 0..n in order; position {i} has id {}",
                    s.image_id
                )));
            }
        }
        Ok(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> BenchConfig {
        BenchConfig {
            num_scenes: 50,
            num_test_scenes: 10,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn prototype_cosines() {
        let p = gen_prototypes(10, 32, &[], 0.9, 1).unwrap();
        for a in 0..10 {
            assert!((norm(&p.vectors[a]) - 1.0).abs() < 1e-12);
            for b in a + 1..10 {
                assert!(p.cosine(a, b).abs() < 0.5);
            }
        }
        let p = gen_prototypes(10, 32, &[(4, 7)], 0.9, 1).unwrap();
        let c = p.cosine(4, 7);
        assert!((0.88..=0.92).contains(&c), "{c}");
        assert!((norm(&p.vectors[7]) - 1.0).abs() < 1e-12);
        assert_eq!(p.partner(7), Some(4));
        assert_eq!(gen_prototypes(10, 32, &[(4, 7)], 0.9, 1).unwrap(), p);
        assert_ne!(gen_prototypes(10, 32, &[(4, 7)], 0.9, 2).unwrap(), p);
    }

    #[test]
    fn prototype_rejections() {
        assert!(gen_prototypes(1, 32, &[], 0.9, 0).is_err());
        assert!(gen_prototypes(4, 4, &[], 0.9, 0).is_err());
        assert!(gen_prototypes(20, 10, &[], 0.9, 0).is_err());
        assert!(gen_prototypes(10, 32, &[(0, 1), (1, 2)], 0.9, 0).is_err());
        assert!(gen_prototypes(10, 32, &[(0, 10)], 0.9, 0).is_err());
    }

    #[test]
    fn scene_examples() {
        let cfg = BenchConfig {
            min_objects: 1,
            max_objects: 1,
            ..small_cfg()
        };
        let p = prototypes_for(&cfg).unwrap();
        for id in 0..20 {
            let s = gen_scene(&p, &cfg, id, 9);
            assert_eq!(s.objects.len(), 1);
        }
        let cfg = small_cfg();
        assert_eq!(gen_scene(&p, &cfg, 3, 9), gen_scene(&p, &cfg, 3, 9));
        for id in 0..200 {
            let s = gen_scene(&p, &cfg, id, 9);
            assert!((1..=5).contains(&s.objects.len()));
            for (i, a) in s.objects.iter().enumerate() {
                let b = a.bbox;
                assert!(b.x1() >= 0.0 && b.y1() >= 0.0 && b.x2() <= 100.0 && b.y2() <= 100.0);
                assert!((10.0..=40.0).contains(&b.width()) && (10.0..=40.0).contains(&b.height()));
                for o in &s.objects[i + 1..] {
                    assert!(iou(&a.bbox, &o.bbox) <= 0.7);
                }
            }
        }
    }

    #[test]
    fn class_histogram_is_uniform() {
        let cfg = small_cfg();
        let p = prototypes_for(&cfg).unwrap();
        let mut counts = [0usize; 10];
        for id in 0..1000 {
            for o in gen_scene(&p, &cfg, id, 4).objects {
                counts[o.cls] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let expected = total as f64 / 10.0;
        let sd = (total as f64 * 0.1 * 0.9).sqrt();
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        for &c in &counts {
            assert!((c as f64 - expected).abs() <= 3.0 * sd, "{counts:?}");
        }
        // 99.9th percentile of chi-square with 9 degrees of freedom
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn proposal_feature_noiseless_cases() {
        let cfg = small_cfg();
        let p = prototypes_for(&cfg).unwrap();
        let g = BBox::new(10.0, 10.0, 30.0, 30.0).unwrap();
        let scene = Scene {
            image_id: 0,
            canvas: Canvas { width: 100.0, height: 100.0 },
            objects: vec![GtObject { bbox: g, cls: 2 }],
        };
        let mut rng = Rng::new(0);
        let f = proposal_feature(&scene, &p, &g, 0.0, &mut rng).feature;
        assert_eq!(&f[..32], &p.vectors[2][..]);
        assert_eq!(&f[32..], &[0.0; 4]);

        let far = BBox::new(60.0, 60.0, 80.0, 80.0).unwrap();
        let f = proposal_feature(&scene, &p, &far, 0.0, &mut rng).feature;
        assert!(f.iter().all(|&x| x == 0.0));

        // IoU exactly 0.5
        let half = BBox::new(10.0, 10.0, 30.0, 20.0).unwrap();
        assert_eq!(iou(&half, &g), 0.5);
        let f = proposal_feature(&scene, &p, &half, 0.0, &mut rng).feature;
        for (a, b) in f[..32].iter().zip(&p.vectors[2]) {
            assert_eq!(*a, 0.5 * b);
        }
        let d = encode_deltas(&half, &g).to_array();
        assert_eq!(&f[32..], &d[..]);
    }

    #[test]
    fn proposals_cover_objects() {
        let cfg = small_cfg();
        let p = prototypes_for(&cfg).unwrap();
        let mut rng = Rng::new(5);
        for id in 0..30 {
            let s = gen_scene(&p, &cfg, id, 1);
            let props = gen_proposals(&s, &cfg, &mut rng);
            assert_eq!(props.len(), 8 * s.objects.len() + 8);
            for (k, o) in s.objects.iter().enumerate() {
                for b in &props[8 * k..8 * k + 8] {
                    assert!(iou(b, &o.bbox) >= 0.3);
                }
            }
        }
    }

    #[test]
    fn split_examples() {
        let (l, u) = make_split(2000, 0.01, 3).unwrap();
        assert_eq!(l.len(), 20);
        assert_eq!(u.len(), 1980);
        let mut all: Vec<u64> = l.iter().chain(&u).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());
        assert_eq!(make_split(2000, 0.01, 3).unwrap(), (l.clone(), u));
        assert_ne!(make_split(2000, 0.01, 4).unwrap().0, l);
        assert_eq!(make_split(10, 0.01, 3).unwrap().0.len(), 1);
        assert!(make_split(0, 0.5, 3).is_err());
        assert!(make_split(10, 1.0, 3).is_err());
    }

    #[test]
    fn dataset_jsonl_round_trip() {
        let cfg = small_cfg();
        let data = gen_dataset(&cfg).unwrap();
        assert_eq!(data.train.len(), 50);
        assert_eq!(data.test.len(), 10);
        assert_eq!(data.test[0].image_id, 50);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.jsonl");
        data.write_jsonl(&path).unwrap();
        assert_eq!(Dataset::read_jsonl(&path).unwrap(), data);
        assert_eq!(gen_dataset(&cfg).unwrap(), data);
    }
}
