//! Synthetic long-tailed scene-graph corpora.
//!
//! Stands in for a real image dataset plus CNN features: object and predicate
//! classes are latent prototypes, predicate frequencies follow a Zipf law,
//! and infrequent ("tail") predicates are deliberately confusable with a
//! designated frequent ("head") predicate by mixing prototypes. Feature
//! vectors are never stored; they are regenerated on demand from
//! `(dataset seed, image id, indices)` so corpora stay tiny and reproducible.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    BoundingBox, Dataset, DatasetMeta, ObjectAnnotation, RelationAnnotation, SceneAnnotation,
    NON_RELATIONSHIP,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub num_images: usize,
    /// First image index; lets a second corpus (e.g. a test split) share the
    /// same world while producing disjoint images.
    #[serde(default)]
    pub image_offset: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub num_object_classes: usize,
    pub num_predicates: usize,
    pub zipf_exponent: f64,
    /// Mixing weight pulling each tail prototype toward its head prototype.
    pub confusability: f64,
    pub feature_dim: usize,
    pub union_dim: usize,
    pub noise_scale: f64,
    #[serde(default = "default_relations_per_image")]
    pub relations_per_image: usize,
    #[serde(default = "default_image_size")]
    pub image_size: u32,
    /// Probability that an object class is drawn from the image theme.
    #[serde(default = "default_theme_strength")]
    pub theme_strength: f64,
    /// Fraction of images whose predicate draws tilt toward tail classes.
    /// The complementary images tilt toward heads so the corpus marginal
    /// stays exactly Zipf; the tilt is what makes within-image co-occurrence
    /// informative about tail predicates.
    #[serde(default = "default_taily_fraction")]
    pub taily_fraction: f64,
    /// Tail-mass multiplier inside tail-tilted images (clamped to 0.9).
    #[serde(default = "default_tail_boost")]
    pub tail_boost: f64,
    /// Box perturbation fraction used by the simulated-detection task.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    /// Detector-style class score shaping: logit margin and noise.
    #[serde(default = "default_score_sharpness")]
    pub score_sharpness: f64,
    #[serde(default = "default_score_noise")]
    pub score_noise: f64,
}

fn default_relations_per_image() -> usize {
    10
}
fn default_image_size() -> u32 {
    256
}
fn default_theme_strength() -> f64 {
    0.85
}
fn default_taily_fraction() -> f64 {
    0.3
}
fn default_tail_boost() -> f64 {
    3.0
}
fn default_jitter() -> f64 {
    0.08
}
fn default_score_sharpness() -> f64 {
    4.0
}
fn default_score_noise() -> f64 {
    0.8
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 1,
            num_images: 200,
            image_offset: 0,
            objects_min: 5,
            objects_max: 7,
            num_object_classes: 8,
            num_predicates: 11,
            zipf_exponent: 1.5,
            confusability: 0.6,
            feature_dim: 64,
            union_dim: 64,
            noise_scale: 0.3,
            relations_per_image: default_relations_per_image(),
            image_size: default_image_size(),
            theme_strength: default_theme_strength(),
            taily_fraction: default_taily_fraction(),
            tail_boost: default_tail_boost(),
            jitter: default_jitter(),
            score_sharpness: default_score_sharpness(),
            score_noise: default_score_noise(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.num_images == 0 {
            return err("num_images must be positive".into());
        }
        if self.objects_min < 2 || self.objects_min > self.objects_max {
            return err(format!(
                "objects range [{}, {}] invalid (need at least 2 objects)",
                self.objects_min, self.objects_max
            ));
        }
        if self.num_object_classes == 0 {
            return err("num_object_classes must be positive".into());
        }
        if self.num_predicates < 2 {
            return err("num_predicates must be at least 2 (index 0 is non-relationship)".into());
        }
        if self.zipf_exponent <= 0.0 {
            return err("zipf_exponent must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.confusability) {
            return err("confusability must lie in [0, 1]".into());
        }
        if self.feature_dim == 0 || self.union_dim == 0 {
            return err("feature dimensions must be positive".into());
        }
        if self.noise_scale <= 0.0 {
            return err("noise_scale must be positive".into());
        }
        if self.relations_per_image == 0 {
            return err("relations_per_image must be positive".into());
        }
        if self.image_size == 0 {
            return err("image_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.theme_strength) {
            return err("theme_strength must lie in [0, 1]".into());
        }
        if !(0.0..=0.5).contains(&self.taily_fraction) {
            return err("taily_fraction must lie in [0, 0.5]".into());
        }
        if self.tail_boost < 1.0 {
            return err("tail_boost must be at least 1".into());
        }
        Ok(())
    }
}

/// Zipf probability mass over ranks `1..=n` with exponent `s`.
pub fn zipf_pmf(n: usize, s: f64) -> Vec<f64> {
    let weights: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-s)).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Latent world behind a corpus: prototypes and the pair-conditional
/// predicate table.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    /// Per object class, unit-norm appearance prototype (d_f).
    pub object_prototypes: Vec<Vec<f64>>,
    /// Per predicate (index 0 unused), union-feature prototype (d_u).
    pub predicate_prototypes: Vec<Vec<f64>>,
    /// Zipf marginal over predicates 1..C^r-1, indexed by predicate.
    pub predicate_marginal: Vec<f64>,
    /// Head predicate assigned to each tail; identity for heads.
    pub head_of: Vec<usize>,
    pub num_heads: usize,
    /// Group id (0..num_heads) for each ordered object class pair, row-major.
    pub pair_group: Vec<usize>,
    /// Q[c_s * C^o + c_o] -> distribution over predicates (index 0 always 0).
    pub pair_predicates: Vec<Vec<f64>>,
    /// Tail-tilted and head-tilted variants of each pair distribution; their
    /// taily_fraction-weighted mixture equals `pair_predicates` exactly.
    pub pair_predicates_taily: Vec<Vec<f64>>,
    pub pair_predicates_heady: Vec<Vec<f64>>,
    /// Object classes whose pair rows fall mostly in each group.
    pub theme_classes: Vec<Vec<usize>>,
}

impl WorldModel {
    pub fn pair_distribution(&self, c_s: usize, c_o: usize, num_object_classes: usize) -> &[f64] {
        &self.pair_predicates[c_s * num_object_classes + c_o]
    }

    pub fn is_head(&self, predicate: usize) -> bool {
        predicate >= 1 && predicate <= self.num_heads
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Box-Muller; two uniforms per draw keeps the stream simple and portable.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x51_7C_C1_B7_27_22_0A_95u64;
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01B3);
    }
    h
}

/// Deterministically build prototypes, the head/tail structure, and the
/// pair-conditional predicate table from a config.
pub fn build_world(config: &GeneratorConfig) -> Result<WorldModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0x77_0A1D]));

    let num_real = config.num_predicates - 1;
    let pmf = zipf_pmf(num_real, config.zipf_exponent);
    // predicate_marginal indexed by predicate id; id k has Zipf rank k.
    let mut predicate_marginal = vec![0.0; config.num_predicates];
    predicate_marginal[1..].copy_from_slice(&pmf);

    let num_heads = ((num_real + 2) / 3).max(1);
    let mut head_of = vec![0; config.num_predicates];
    for p in 1..=num_heads.min(num_real) {
        head_of[p] = p;
    }
    for (i, p) in (num_heads + 1..=num_real).enumerate() {
        head_of[p] = 1 + (i % num_heads);
    }

    let object_prototypes: Vec<Vec<f64>> = (0..config.num_object_classes)
        .map(|_| unit_vector(&mut rng, config.feature_dim))
        .collect();

    let base: Vec<Vec<f64>> = (0..config.num_predicates)
        .map(|_| unit_vector(&mut rng, config.union_dim))
        .collect();
    let mut predicate_prototypes = base.clone();
    for p in num_heads + 1..=num_real {
        let h = head_of[p];
        let eps = config.confusability;
        predicate_prototypes[p] = base[p]
            .iter()
            .zip(base[h].iter())
            .map(|(own, head)| (1.0 - eps) * own + eps * head)
            .collect();
    }

    // Group g holds head g+1 and its tails; group mass drives both the pair
    // quota and the within-group predicate distribution, so the marginal over
    // uniformly drawn pairs reproduces the Zipf law up to integer rounding.
    let mut group_mass = vec![0.0; num_heads];
    for p in 1..=num_real {
        group_mass[head_of[p] - 1] += predicate_marginal[p];
    }

    let num_pairs = config.num_object_classes * config.num_object_classes;
    let mut quotas: Vec<usize> = group_mass
        .iter()
        .map(|m| (m * num_pairs as f64).floor() as usize)
        .collect();
    let mut remainders: Vec<(usize, f64)> = group_mass
        .iter()
        .enumerate()
        .map(|(g, m)| (g, m * num_pairs as f64 - quotas[g] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut assigned: usize = quotas.iter().sum();
    let mut i = 0;
    while assigned < num_pairs {
        quotas[remainders[i % num_heads].0] += 1;
        assigned += 1;
        i += 1;
    }

    // Row-major fill clusters whole subject-class rows into one group, which
    // is what lets image themes concentrate co-occurring predicates.
    let mut pair_group = Vec::with_capacity(num_pairs);
    for (g, &q) in quotas.iter().enumerate() {
        pair_group.extend(std::iter::repeat(g).take(q));
    }
    debug_assert_eq!(pair_group.len(), num_pairs);

    let mut pair_predicates = Vec::with_capacity(num_pairs);
    let mut pair_predicates_taily = Vec::with_capacity(num_pairs);
    let mut pair_predicates_heady = Vec::with_capacity(num_pairs);
    let q = config.taily_fraction;
    for &g in &pair_group {
        let mut dist = vec![0.0; config.num_predicates];
        for p in 1..=num_real {
            if head_of[p] - 1 == g {
                dist[p] = predicate_marginal[p] / group_mass[g];
            }
        }
        // split the pair distribution into a tail-boosted and a head-boosted
        // variant whose q-weighted mixture restores `dist` exactly
        let head = g + 1;
        let tail_mass: f64 = (1..config.num_predicates)
            .filter(|&p| p != head)
            .map(|p| dist[p])
            .sum();
        let (taily, heady) = if q > 0.0 && tail_mass > 0.0 && tail_mass < 1.0 {
            let boosted = (config.tail_boost * tail_mass).min(0.9);
            let residual = (tail_mass - q * boosted) / (1.0 - q);
            let retune = |mass: f64| -> Vec<f64> {
                let mut d = dist.clone();
                for p in 1..config.num_predicates {
                    if d[p] == 0.0 {
                        continue;
                    }
                    if p == head {
                        d[p] = (1.0 - mass) * dist[p] / (1.0 - tail_mass);
                    } else {
                        d[p] = mass * dist[p] / tail_mass;
                    }
                }
                d
            };
            (retune(boosted), retune(residual))
        } else {
            (dist.clone(), dist.clone())
        };
        pair_predicates.push(dist);
        pair_predicates_taily.push(taily);
        pair_predicates_heady.push(heady);
    }

    let mut theme_classes: Vec<Vec<usize>> = vec![Vec::new(); num_heads];
    for c in 0..config.num_object_classes {
        let row = &pair_group[c * config.num_object_classes..(c + 1) * config.num_object_classes];
        let mut counts = vec![0usize; num_heads];
        for &g in row {
            counts[g] += 1;
        }
        let majority = (0..num_heads).max_by_key(|&g| counts[g]).unwrap();
        theme_classes[majority].push(c);
    }
    for (g, classes) in theme_classes.iter_mut().enumerate() {
        if classes.is_empty() {
            // tiny groups may own no full row; fall back to classes with any cell
            for c in 0..config.num_object_classes {
                let row =
                    &pair_group[c * config.num_object_classes..(c + 1) * config.num_object_classes];
                if row.contains(&g) {
                    classes.push(c);
                }
            }
            if classes.is_empty() {
                classes.extend(0..config.num_object_classes);
            }
        }
    }

    Ok(WorldModel {
        object_prototypes,
        predicate_prototypes,
        predicate_marginal,
        head_of,
        num_heads,
        pair_group,
        pair_predicates,
        pair_predicates_taily,
        pair_predicates_heady,
        theme_classes,
    })
}

fn sample_categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn place_boxes(rng: &mut ChaCha8Rng, n: usize, size: f64) -> Vec<BoundingBox> {
    let grid = (n as f64).sqrt().ceil() as usize;
    let cell = size / grid as f64;
    let mut cells: Vec<(usize, usize)> = (0..grid)
        .flat_map(|r| (0..grid).map(move |c| (r, c)))
        .collect();
    cells.shuffle(rng);
    cells
        .into_iter()
        .take(n)
        .map(|(r, c)| {
            let w = cell * rng.gen_range(0.65..0.95);
            let h = cell * rng.gen_range(0.65..0.95);
            let x = c as f64 * cell + rng.gen_range(0.0..(cell - w));
            let y = r as f64 * cell + rng.gen_range(0.0..(cell - h));
            BoundingBox {
                x1: x,
                y1: y,
                x2: x + w,
                y2: y + h,
            }
        })
        .collect()
}

fn image_id(config: &GeneratorConfig, index: usize) -> String {
    format!("img_{:05}", config.image_offset + index)
}

/// Deterministic per-corpus assignment of image themes and tail tilts.
/// Exact quotas (largest remainder) keep corpus-level predicate counts tight
/// around their expectations; a seeded shuffle spreads them over images.
fn assign_image_profiles(config: &GeneratorConfig, group_masses: &[f64]) -> Vec<(usize, bool)> {
    let n = config.num_images;
    let mut quotas: Vec<usize> = group_masses
        .iter()
        .map(|m| (m * n as f64).floor() as usize)
        .collect();
    let mut remainders: Vec<(usize, f64)> = group_masses
        .iter()
        .enumerate()
        .map(|(g, m)| (g, m * n as f64 - quotas[g] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut assigned: usize = quotas.iter().sum();
    let groups = quotas.len();
    let mut i = 0;
    while assigned < n {
        quotas[remainders[i % groups].0] += 1;
        assigned += 1;
        i += 1;
    }
    let mut profiles = Vec::with_capacity(n);
    for (g, &count) in quotas.iter().enumerate() {
        let taily = (config.taily_fraction * count as f64).round() as usize;
        for k in 0..count {
            profiles.push((g, k < taily));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
        config.seed,
        0x7_11ED,
        config.image_offset as u64,
    ]));
    profiles.shuffle(&mut rng);
    profiles
}

/// Generate a corpus. Features are not materialized here; use
/// [`FeatureOracle`] to reproduce them from the embedded config.
pub fn generate_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    let world = build_world(config)?;
    let size = config.image_size as f64;
    let group_masses: Vec<f64> = {
        let mut m = vec![0.0; world.num_heads];
        for p in 1..config.num_predicates {
            m[world.head_of[p] - 1] += world.predicate_marginal[p];
        }
        m
    };
    let profiles = assign_image_profiles(config, &group_masses);

    let mut images = Vec::with_capacity(config.num_images);
    for i in 0..config.num_images {
        let global_index = (config.image_offset + i) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0x1_33AF, global_index]));

        let (theme, taily) = profiles[i];
        let n_obj = rng.gen_range(config.objects_min..=config.objects_max);
        let classes: Vec<usize> = (0..n_obj)
            .map(|_| {
                if rng.gen_range(0.0..1.0) < config.theme_strength {
                    let pool = &world.theme_classes[theme];
                    pool[rng.gen_range(0..pool.len())]
                } else {
                    rng.gen_range(0..config.num_object_classes)
                }
            })
            .collect();
        let boxes = place_boxes(&mut rng, n_obj, size);

        // Ordered pairs weighted toward spatial neighbors, so relations tend
        // to connect nearby objects and simulated detection keeps candidates.
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for s in 0..n_obj {
            for o in 0..n_obj {
                if s == o {
                    continue;
                }
                let (bs, bo) = (&boxes[s], &boxes[o]);
                let dx = (bs.x1 + bs.x2 - bo.x1 - bo.x2) / 2.0;
                let dy = (bs.y1 + bs.y2 - bo.y1 - bo.y2) / 2.0;
                let dist = (dx * dx + dy * dy).sqrt();
                pairs.push((s, o));
                weights.push(1.0 / (0.3 + dist / size));
            }
        }
        let m = config.relations_per_image.min(pairs.len());
        let mut relations = Vec::with_capacity(m);
        for _ in 0..m {
            let k = sample_categorical(&mut rng, &weights);
            let (s, o) = pairs[k];
            weights[k] = 0.0;
            let cell = classes[s] * config.num_object_classes + classes[o];
            let dist = if taily {
                &world.pair_predicates_taily[cell]
            } else {
                &world.pair_predicates_heady[cell]
            };
            let predicate = sample_categorical(&mut rng, dist);
            relations.push(RelationAnnotation {
                subj: s,
                obj: o,
                predicate,
            });
        }
        relations.sort_by_key(|r| (r.subj, r.obj));

        images.push(SceneAnnotation {
            id: image_id(config, i),
            width: config.image_size,
            height: config.image_size,
            objects: classes
                .into_iter()
                .zip(boxes)
                .map(|(class, b)| ObjectAnnotation {
                    bbox: [b.x1, b.y1, b.x2, b.y2],
                    class,
                })
                .collect(),
            relations,
        });
    }

    let dataset = Dataset {
        meta: DatasetMeta {
            num_object_classes: config.num_object_classes,
            num_predicates: config.num_predicates,
            generator: Some(config.clone()),
        },
        images,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Regenerates feature vectors for a generated corpus. Every method is a pure
/// function of `(dataset seed, image id, indices)`, so repeated calls agree
/// bit for bit.
#[derive(Debug, Clone)]
pub struct FeatureOracle {
    pub config: GeneratorConfig,
    pub world: WorldModel,
}

const TAG_APPEARANCE: u64 = 1;
const TAG_UNION: u64 = 2;
const TAG_SCORES: u64 = 3;
const TAG_JITTER: u64 = 4;

impl FeatureOracle {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        let world = build_world(&config)?;
        Ok(FeatureOracle { config, world })
    }

    pub fn for_dataset(dataset: &Dataset) -> Result<Self> {
        let config = dataset.meta.generator.clone().ok_or_else(|| {
            Error::Data(
                "dataset has no meta.generator record; features cannot be regenerated".into(),
            )
        })?;
        Self::new(config)
    }

    fn rng(&self, image_id: &str, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, fnv1a(image_id), tag, a, b]))
    }

    /// f^o_i: class prototype plus isotropic noise.
    pub fn object_appearance(&self, image: &SceneAnnotation, idx: usize) -> Vec<f64> {
        let class = image.objects[idx].class;
        let mut rng = self.rng(&image.id, TAG_APPEARANCE, idx as u64, 0);
        self.world.object_prototypes[class]
            .iter()
            .map(|&mu| mu + self.config.noise_scale * gaussian(&mut rng))
            .collect()
    }

    /// Detector-style class confidence scores (softmax, sum 1).
    pub fn class_scores(&self, image: &SceneAnnotation, idx: usize) -> Vec<f64> {
        let class = image.objects[idx].class;
        let mut rng = self.rng(&image.id, TAG_SCORES, idx as u64, 0);
        let logits: Vec<f64> = (0..self.config.num_object_classes)
            .map(|c| {
                let margin = if c == class {
                    self.config.score_sharpness
                } else {
                    0.0
                };
                margin + self.config.score_noise * gaussian(&mut rng)
            })
            .collect();
        crate::tensor::softmax(&logits)
    }

    /// u_ij: predicate prototype plus noise for annotated pairs, pure noise
    /// for non-relationship pairs.
    pub fn union_features(&self, image: &SceneAnnotation, subj: usize, obj: usize) -> Vec<f64> {
        let predicate = image
            .relations
            .iter()
            .find(|r| r.subj == subj && r.obj == obj)
            .map(|r| r.predicate)
            .unwrap_or(NON_RELATIONSHIP);
        let mut rng = self.rng(&image.id, TAG_UNION, subj as u64, obj as u64);
        if predicate == NON_RELATIONSHIP {
            (0..self.config.union_dim)
                .map(|_| self.config.noise_scale * gaussian(&mut rng))
                .collect()
        } else {
            self.world.predicate_prototypes[predicate]
                .iter()
                .map(|&mu| mu + self.config.noise_scale * gaussian(&mut rng))
                .collect()
        }
    }

    /// Seeded box perturbation for the simulated-detection task.
    pub fn jittered_box(&self, image: &SceneAnnotation, idx: usize) -> BoundingBox {
        let b = image.objects[idx].bounding_box();
        let mut rng = self.rng(&image.id, TAG_JITTER, idx as u64, 0);
        let w = b.x2 - b.x1;
        let h = b.y2 - b.y1;
        let j = self.config.jitter;
        let dx = rng.gen_range(-j..j) * w;
        let dy = rng.gen_range(-j..j) * h;
        let sw = 1.0 + rng.gen_range(-j..j);
        let sh = 1.0 + rng.gen_range(-j..j);
        let cx = (b.x1 + b.x2) / 2.0 + dx;
        let cy = (b.y1 + b.y2) / 2.0 + dy;
        let out = BoundingBox {
            x1: cx - w * sw / 2.0,
            y1: cy - h * sh / 2.0,
            x2: cx + w * sw / 2.0,
            y2: cy + h * sh / 2.0,
        };
        out.clamp_to(image.width as f64, image.height as f64)
    }
}
