//! Deterministic synthetic referring-segmentation scenes.
//!
//! Each scene is a small canvas with a textured background and a handful of
//! non-overlapping coloured shapes. The expression names the referent by
//! colour and shape, optionally with a spatial or size relation
//! ("the leftmost red disk"). Distractors always share the referent's colour
//! or shape, and relational scenes contain further objects of the very same
//! colour and shape, so the model has to read the whole expression. Targets
//! include small disks and 3-4 px wide bars, whose masks are dominated by
//! boundary pixels.
//!
//! A scene is a pure function of `(SceneConfig, seed, query)`; datasets are
//! stored as manifests of seeds and queries and regenerated on load.

pub mod manifest;
pub mod shapes;

use candle_core::{DType, Device, Tensor};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::params::splitmix64;
pub use shapes::{Color, Geometry, Relation, ShapeKind, PAD, THE, VOCAB_SIZE};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub size: usize,
    pub min_distractors: usize,
    pub max_distractors: usize,
    /// Share of distractors that match the referent in exactly one attribute;
    /// the rest are any other type.
    pub similar_prob: f64,
    /// Share of relational expressions in a split.
    pub relation_prob: f64,
    /// Extra objects of the referent's exact type in relational scenes.
    pub max_same_type: usize,
    pub texture_amplitude: f64,
    pub noise: f64,
    pub color_jitter: f64,
    pub supersample: usize,
    /// Minimum mask area (pixels) of every object.
    pub min_area: usize,
    /// Required lead of the referent over the runner-up, in pixels of
    /// centroid position.
    pub position_margin: f64,
    /// Required area ratio between the referent and the runner-up.
    pub area_ratio: f64,
    pub max_attempts: usize,
    pub max_len: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_distractors: 2,
            max_distractors: 4,
            similar_prob: 1.0,
            relation_prob: 0.3,
            max_same_type: 2,
            texture_amplitude: 0.08,
            noise: 0.03,
            color_jitter: 0.06,
            supersample: 4,
            min_area: 8,
            position_margin: 4.0,
            area_ratio: 1.3,
            max_attempts: 40,
            max_len: 12,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(32) {
            return Err(Error::Config(format!("canvas size {} must be a positive multiple of 32", self.size)));
        }
        if self.min_distractors > self.max_distractors {
            return Err(Error::Config("min_distractors > max_distractors".into()));
        }
        if !(0.0..=1.0).contains(&self.relation_prob) || !(0.0..=1.0).contains(&self.similar_prob) {
            return Err(Error::Config("relation_prob and similar_prob must be in [0, 1]".into()));
        }
        if self.max_same_type == 0 || self.supersample == 0 || self.max_attempts == 0 {
            return Err(Error::Config("max_same_type, supersample and max_attempts must be >= 1".into()));
        }
        if self.max_len < 4 {
            return Err(Error::Config("max_len must hold at least 4 tokens".into()));
        }
        Ok(())
    }

    /// Space-separated `key=value` pairs, in field order.
    pub fn to_kv(&self) -> String {
        format!(
            "size={} min_distractors={} max_distractors={} similar_prob={} relation_prob={} max_same_type={} \
             texture_amplitude={} noise={} color_jitter={} supersample={} min_area={} \
             position_margin={} area_ratio={} max_attempts={} max_len={}",
            self.size,
            self.min_distractors,
            self.max_distractors,
            self.similar_prob,
            self.relation_prob,
            self.max_same_type,
            self.texture_amplitude,
            self.noise,
            self.color_jitter,
            self.supersample,
            self.min_area,
            self.position_margin,
            self.area_ratio,
            self.max_attempts,
            self.max_len
        )
    }

    pub fn from_kv(s: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for pair in s.split_whitespace() {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed scene config entry {pair:?}")))?;
            let bad = || Error::Config(format!("bad value for {k}: {v:?}"));
            let us = || v.parse::<usize>().map_err(|_| bad());
            let fl = || v.parse::<f64>().map_err(|_| bad());
            match k {
                "size" => cfg.size = us()?,
                "min_distractors" => cfg.min_distractors = us()?,
                "max_distractors" => cfg.max_distractors = us()?,
                "similar_prob" => cfg.similar_prob = fl()?,
                "relation_prob" => cfg.relation_prob = fl()?,
                "max_same_type" => cfg.max_same_type = us()?,
                "texture_amplitude" => cfg.texture_amplitude = fl()?,
                "noise" => cfg.noise = fl()?,
                "color_jitter" => cfg.color_jitter = fl()?,
                "supersample" => cfg.supersample = us()?,
                "min_area" => cfg.min_area = us()?,
                "position_margin" => cfg.position_margin = fl()?,
                "area_ratio" => cfg.area_ratio = fl()?,
                "max_attempts" => cfg.max_attempts = us()?,
                "max_len" => cfg.max_len = us()?,
                other => return Err(Error::Config(format!("unknown scene config key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// What the expression asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Query {
    pub color: Color,
    pub shape: ShapeKind,
    pub relation: Option<Relation>,
}

impl Query {
    pub fn tokens(&self, max_len: usize) -> Vec<u32> {
        let mut t = vec![THE];
        if let Some(r) = self.relation {
            t.push(r.token());
        }
        t.push(self.color.token());
        t.push(self.shape.token());
        t.resize(max_len, PAD);
        t
    }

    pub fn text(&self) -> String {
        match self.relation {
            Some(r) => format!("the {} {} {}", r.name(), self.color.name(), self.shape.name()),
            None => format!("the {} {}", self.color.name(), self.shape.name()),
        }
    }

    /// Parses a token sequence produced by [`Query::tokens`].
    pub fn from_tokens(ids: &[u32]) -> Option<Self> {
        let words: Vec<u32> = ids.iter().copied().filter(|&t| t != PAD).collect();
        match words.as_slice() {
            [THE, c, s] => Some(Self {
                color: Color::from_token(*c)?,
                shape: ShapeKind::from_token(*s)?,
                relation: None,
            }),
            [THE, r, c, s] => Some(Self {
                color: Color::from_token(*c)?,
                shape: ShapeKind::from_token(*s)?,
                relation: Some(Relation::from_token(*r)?),
            }),
            _ => None,
        }
    }

    fn random(rng: &mut ChaCha8Rng, relation_prob: f64) -> Self {
        let color = *Color::ALL.choose(rng).unwrap();
        let shape = *ShapeKind::ALL.choose(rng).unwrap();
        let relation = rng.random_bool(relation_prob).then(|| *Relation::ALL.choose(rng).unwrap());
        Self { color, shape, relation }
    }
}

/// A rasterised scene object.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub color: Color,
    pub shape: ShapeKind,
    pub geometry: Geometry,
    pub rgb: [f64; 3],
    /// Binary mask (`coverage >= 0.5`), row-major.
    pub mask: Vec<u8>,
    pub area: usize,
    /// Mask centroid `(x, y)` in pixel-centre coordinates.
    pub centroid: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub seed: u64,
    pub query: Query,
    pub tokens: Vec<u32>,
    /// `(3, H, W)` channel-major RGB in `[0, 1]`.
    pub image: Vec<f32>,
    /// `(H, W)` binary mask of the referent.
    pub mask: Vec<u8>,
    pub size: usize,
    pub objects: Vec<SceneObject>,
    pub target: usize,
}

impl SampleRecord {
    pub fn target_bbox(&self) -> [usize; 4] {
        mask_bbox(&self.mask, self.size)
    }
}

/// `[x0, y0, x1, y1]` (exclusive max) of the nonzero pixels.
pub fn mask_bbox(mask: &[u8], w: usize) -> [usize; 4] {
    let mut bb = [usize::MAX, usize::MAX, 0, 0];
    for (i, &m) in mask.iter().enumerate() {
        if m == 1 {
            let (y, x) = (i / w, i % w);
            bb = [bb[0].min(x), bb[1].min(y), bb[2].max(x + 1), bb[3].max(y + 1)];
        }
    }
    bb
}

fn relation_key(o: &SceneObject, r: Relation) -> f64 {
    match r {
        Relation::Leftmost => o.centroid.0,
        Relation::Rightmost => -o.centroid.0,
        Relation::Topmost => o.centroid.1,
        Relation::Bottommost => -o.centroid.1,
        Relation::Largest => -(o.area as f64),
        Relation::Smallest => o.area as f64,
    }
}

/// Index of the object the query denotes, or `None` when no object or more
/// than one object fits.
pub fn resolve(objects: &[SceneObject], q: &Query) -> Option<usize> {
    let cands: Vec<usize> = (0..objects.len())
        .filter(|&i| objects[i].color == q.color && objects[i].shape == q.shape)
        .collect();
    match q.relation {
        None => (cands.len() == 1).then(|| cands[0]),
        Some(r) => {
            let best = *cands
                .iter()
                .min_by(|&&a, &&b| relation_key(&objects[a], r).total_cmp(&relation_key(&objects[b], r)))?;
            let k = relation_key(&objects[best], r);
            let ties = cands.iter().filter(|&&i| relation_key(&objects[i], r) == k).count();
            (ties == 1).then_some(best)
        }
    }
}

/// The referent leads every other candidate by the configured margin.
fn has_margin(objects: &[SceneObject], target: usize, r: Relation, cfg: &SceneConfig) -> bool {
    let t = &objects[target];
    objects.iter().enumerate().all(|(i, o)| {
        if i == target || o.color != t.color || o.shape != t.shape {
            return true;
        }
        match r {
            Relation::Largest => t.area as f64 >= cfg.area_ratio * o.area as f64,
            Relation::Smallest => o.area as f64 >= cfg.area_ratio * t.area as f64,
            _ => relation_key(o, r) - relation_key(t, r) >= cfg.position_margin,
        }
    })
}

fn rasterise(geometry: Geometry, color: Color, shape: ShapeKind, rgb: [f64; 3], cfg: &SceneConfig) -> (SceneObject, Vec<f64>) {
    let n = cfg.size;
    let cov = geometry.coverage(n, n, cfg.supersample);
    let mask: Vec<u8> = cov.iter().map(|&c| (c >= 0.5) as u8).collect();
    let area = mask.iter().filter(|&&m| m == 1).count();
    let (mut sx, mut sy) = (0.0, 0.0);
    for (i, &m) in mask.iter().enumerate() {
        if m == 1 {
            sx += (i % n) as f64 + 0.5;
            sy += (i / n) as f64 + 0.5;
        }
    }
    let centroid = if area > 0 { (sx / area as f64, sy / area as f64) } else { (0.0, 0.0) };
    (
        SceneObject {
            color,
            shape,
            geometry,
            rgb,
            mask,
            area,
            centroid,
        },
        cov,
    )
}

/// Object types for one attempt: referent first, then same-type extras,
/// then distractors. A distractor shares exactly one attribute with the
/// referent with probability `similar_prob`, otherwise it is any other type.
fn object_types(q: &Query, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<(Color, ShapeKind)> {
    let mut types = vec![(q.color, q.shape)];
    if q.relation.is_some() {
        for _ in 0..rng.random_range(1..=cfg.max_same_type) {
            types.push((q.color, q.shape));
        }
    }
    for _ in 0..rng.random_range(cfg.min_distractors..=cfg.max_distractors) {
        if !rng.random_bool(cfg.similar_prob) {
            let color = *Color::ALL.choose(rng).unwrap();
            let shapes: Vec<ShapeKind> = ShapeKind::ALL.iter().copied().filter(|&s| (color, s) != (q.color, q.shape)).collect();
            types.push((color, *shapes.choose(rng).unwrap()));
        } else if rng.random_bool(0.5) {
            let others: Vec<ShapeKind> = ShapeKind::ALL.iter().copied().filter(|&s| s != q.shape).collect();
            types.push((q.color, *others.choose(rng).unwrap()));
        } else {
            let others: Vec<Color> = Color::ALL.iter().copied().filter(|&c| c != q.color).collect();
            types.push((*others.choose(rng).unwrap(), q.shape));
        }
    }
    types
}

struct Placed {
    objects: Vec<SceneObject>,
    coverage: Vec<Vec<f64>>,
}

fn place_objects(types: &[(Color, ShapeKind)], cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Option<Placed> {
    let n = cfg.size as f64;
    let mut objects = Vec::new();
    let mut coverage = Vec::new();
    let mut boxes: Vec<shapes::Rect> = Vec::new();
    for &(color, shape) in types {
        let mut placed = false;
        for _ in 0..60 {
            let g = Geometry::sample(shape, rng);
            let bb = g.bbox();
            let (w, h) = (bb[2], bb[3]);
            if w + 2.0 >= n || h + 2.0 >= n {
                continue;
            }
            let dx = rng.random_range(1.0..(n - 1.0 - w));
            let dy = rng.random_range(1.0..(n - 1.0 - h));
            let g = g.translate(dx, dy);
            let bb = g.bbox();
            if boxes.iter().any(|b| shapes::boxes_overlap(b, &bb, 2.0)) {
                continue;
            }
            let jitter = cfg.color_jitter;
            let base = color.rgb();
            let rgb = base.map(|c| (c + rng.random_range(-jitter..=jitter)).clamp(0.0, 1.0));
            let (obj, cov) = rasterise(g, color, shape, rgb, cfg);
            if obj.area < cfg.min_area {
                continue;
            }
            boxes.push(bb);
            objects.push(obj);
            coverage.push(cov);
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    Some(Placed { objects, coverage })
}

fn render(placed: &Placed, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = cfg.size;
    let grey = rng.random_range(0.35..0.6);
    let tint: [f64; 3] = std::array::from_fn(|_| grey + rng.random_range(-0.05..0.05));
    // Two sinusoidal gratings per channel-shared texture.
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(0.15..0.6);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (theta, freq, phase)
        })
        .collect();
    let mut img = vec![0.0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let tex: f64 = waves
                .iter()
                .map(|(th, f, ph)| (f * (x as f64 * th.cos() + y as f64 * th.sin()) + ph).sin())
                .sum::<f64>()
                * cfg.texture_amplitude
                / 2.0;
            for c in 0..3 {
                let mut v = tint[c] + tex + rng.random_range(-cfg.noise..=cfg.noise);
                for (o, cov) in placed.objects.iter().zip(&placed.coverage) {
                    let a = cov[i];
                    if a > 0.0 {
                        v = v * (1.0 - a) + o.rgb[c] * a;
                    }
                }
                img[c * n * n + i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// Scene for an explicit query. Retries placement up to `max_attempts` times
/// on the seed's own random stream.
pub fn generate_for_query(cfg: &SceneConfig, seed: u64, query: Query) -> Result<SampleRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_attempts {
        let types = object_types(&query, cfg, &mut rng);
        let Some(mut placed) = place_objects(&types, cfg, &mut rng) else {
            continue;
        };
        let target = match query.relation {
            None => 0,
            Some(r) => {
                let Some(t) = resolve(&placed.objects, &query) else {
                    continue;
                };
                if !has_margin(&placed.objects, t, r, cfg) {
                    continue;
                }
                t
            }
        };
        if resolve(&placed.objects, &query) != Some(target) {
            continue;
        }
        // Shuffle object order so the referent's index carries no information.
        let mut order: Vec<usize> = (0..placed.objects.len()).collect();
        order.shuffle(&mut rng);
        let target = order.iter().position(|&i| i == target).unwrap();
        placed.objects = order.iter().map(|&i| placed.objects[i].clone()).collect();
        placed.coverage = order.iter().map(|&i| placed.coverage[i].clone()).collect();

        let image = render(&placed, cfg, &mut rng);
        return Ok(SampleRecord {
            seed,
            query,
            tokens: query.tokens(cfg.max_len),
            image,
            mask: placed.objects[target].mask.clone(),
            size: cfg.size,
            objects: placed.objects,
            target,
        });
    }
    Err(Error::Unsatisfiable {
        seed,
        attempts: cfg.max_attempts,
    })
}

/// Scene whose query is itself drawn from the seed.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x51ed_270b));
    let q = Query::random(&mut rng, cfg.relation_prob);
    generate_for_query(cfg, seed, q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    fn tag(self) -> u64 {
        match self {
            SplitKind::Train => 1,
            SplitKind::Val => 2,
            SplitKind::Test => 3,
        }
    }
}

/// Seed of the `k`-th candidate in a split. The split tag occupies the top
/// byte, so different splits can never share a seed.
pub fn split_seed(base_seed: u64, split: SplitKind, k: u64) -> u64 {
    (split.tag() << 56) | (splitmix64(base_seed.wrapping_add(splitmix64(k))) >> 8)
}

/// Balanced queries: every block of 16 covers each colour-shape pair once,
/// relational slots follow a fixed share, and relation types cycle through
/// shuffled decks.
fn balanced_queries(n: usize, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Query> {
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let mut block: Vec<(Color, ShapeKind)> = Color::ALL
            .iter()
            .flat_map(|&c| ShapeKind::ALL.iter().map(move |&s| (c, s)))
            .collect();
        block.shuffle(rng);
        pairs.extend(block);
    }
    pairs.truncate(n);
    let n_rel = (n as f64 * cfg.relation_prob).round() as usize;
    let mut relational: Vec<bool> = (0..n).map(|i| i < n_rel).collect();
    relational.shuffle(rng);
    let mut deck: Vec<Relation> = Vec::new();
    pairs
        .into_iter()
        .zip(relational)
        .map(|((color, shape), rel)| {
            let relation = rel.then(|| {
                if deck.is_empty() {
                    deck = Relation::ALL.to_vec();
                    deck.shuffle(rng);
                }
                deck.pop().unwrap()
            });
            Query { color, shape, relation }
        })
        .collect()
}

/// One manifest row: enough to regenerate the sample exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub query: Query,
    pub objects: usize,
    pub target_shape: ShapeKind,
    pub target_bbox: [usize; 4],
    pub target_area: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub split: SplitKind,
    pub base_seed: u64,
    pub scene: SceneConfig,
    pub entries: Vec<ManifestEntry>,
    /// Candidate seeds rejected as unsatisfiable.
    pub skipped: usize,
}

/// Generates `n` samples for a split. Unsatisfiable seeds are skipped and the
/// next candidate seed is tried with the same query.
pub fn make_split(n: usize, cfg: &SceneConfig, base_seed: u64, split: SplitKind) -> Result<(SplitManifest, Vec<SampleRecord>)> {
    if n == 0 {
        return Err(Error::Config("split size must be >= 1".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(base_seed ^ split.tag()));
    let queries = balanced_queries(n, cfg, &mut rng);
    let mut k = 0u64;
    let mut skipped = 0;
    let mut entries = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for (index, q) in queries.into_iter().enumerate() {
        let rec = loop {
            let seed = split_seed(base_seed, split, k);
            k += 1;
            match generate_for_query(cfg, seed, q) {
                Ok(r) => break r,
                Err(Error::Unsatisfiable { .. }) => {
                    skipped += 1;
                    if skipped > 10 * n + 100 {
                        return Err(Error::Config(format!("scene config unsatisfiable for query {:?}", q.text())));
                    }
                }
                Err(e) => return Err(e),
            }
        };
        entries.push(ManifestEntry {
            index,
            seed: rec.seed,
            query: q,
            objects: rec.objects.len(),
            target_shape: rec.objects[rec.target].shape,
            target_bbox: rec.target_bbox(),
            target_area: rec.objects[rec.target].area,
        });
        records.push(rec);
    }
    if skipped > 0 {
        log::info!("{} split: skipped {skipped} unsatisfiable seeds", split.name());
    }
    Ok((
        SplitManifest {
            split,
            base_seed,
            scene: cfg.clone(),
            entries,
            skipped,
        },
        records,
    ))
}

/// Regenerates every record of a manifest, checking each against its entry.
pub fn regenerate(manifest: &SplitManifest) -> Result<Vec<SampleRecord>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let r = generate_for_query(&manifest.scene, e.seed, e.query)?;
            if r.target_bbox() != e.target_bbox || r.objects[r.target].area != e.target_area {
                return Err(Error::Config(format!(
                    "manifest entry {} does not match regenerated scene (generator version drift?)",
                    e.index
                )));
            }
            Ok(r)
        })
        .collect()
}

/// Model-ready tensors for a batch of records.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, 3, H, W)`.
    pub images: Tensor,
    /// `(B, L)` u32.
    pub tokens: Tensor,
    /// `(B, 1, H, W)` binary.
    pub masks: Tensor,
}

impl Batch {
    pub fn from_records(records: &[&SampleRecord], dtype: DType) -> Result<Self> {
        let b = records.len();
        if b == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        let n = records[0].size;
        let l = records[0].tokens.len();
        let dev = Device::Cpu;
        let mut img = Vec::with_capacity(b * 3 * n * n);
        let mut tok = Vec::with_capacity(b * l);
        let mut msk = Vec::with_capacity(b * n * n);
        for r in records {
            if r.size != n || r.tokens.len() != l {
                return Err(Error::shape("Batch::from_records", format!("size {n}, L {l}"), format!("size {}, L {}", r.size, r.tokens.len())));
            }
            img.extend_from_slice(&r.image);
            tok.extend_from_slice(&r.tokens);
            msk.extend(r.mask.iter().map(|&m| m as f32));
        }
        Ok(Self {
            images: Tensor::from_vec(img, (b, 3, n, n), &dev)?.to_dtype(dtype)?,
            tokens: Tensor::from_vec(tok, (b, l), &dev)?,
            masks: Tensor::from_vec(msk, (b, 1, n, n), &dev)?.to_dtype(dtype)?,
        })
    }

    pub fn len(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
