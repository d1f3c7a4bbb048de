//! Procedural aspect renderers.
//!
//! Every visual aspect value has both a canonical description phrase (used
//! to build the synthetic knowledge base) and a pixel-level effect (used to
//! draw the lesion), so the text that describes a disease and the generator
//! that draws it consume the same aspect assignment. A disease held out of
//! training is therefore a genuinely new combination of visual ingredients
//! the model has seen under other names.

use indexmap::IndexMap;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::{build_targets, report, CorpusError, EntityTriplet, SyntheticSample};
use crate::kb::{DiseaseEntry, KnowledgeBase, HEALTHY_NAME};

/// The default aspect set: seven consensus visual aspects plus `other`.
pub const ASPECT_NAMES: [&str; 8] =
    ["texture", "shape", "opacity", "location", "border", "fluid", "focality", "other"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    Grainy,
    Streaky,
    Smooth,
    Honeycomb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Round,
    Ring,
    Wedge,
    Bar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpacityKind {
    Bright,
    Dark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BorderKind {
    Soft,
    Sharp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FluidKind {
    Layered,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FocalityKind {
    Single,
    Multi,
}

impl TextureKind {
    pub fn word(self) -> &'static str {
        match self {
            TextureKind::Grainy => "grainy",
            TextureKind::Streaky => "streaky",
            TextureKind::Smooth => "smooth",
            TextureKind::Honeycomb => "honeycomb",
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            TextureKind::Grainy => "fine grainy speckled texture with small mottled spots",
            TextureKind::Streaky => "linear streaky texture with fine parallel strands",
            TextureKind::Smooth => "smooth even texture without internal markings",
            TextureKind::Honeycomb => "honeycomb texture of small clustered cells",
        }
    }
}

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Round => "round",
            ShapeKind::Ring => "ring",
            ShapeKind::Wedge => "wedge",
            ShapeKind::Bar => "bar",
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            ShapeKind::Round => "compact round shape with a convex curved outline",
            ShapeKind::Ring => "ring shape with an annular rim and a hollow center",
            ShapeKind::Wedge => "wedge shape tapering to a point",
            ShapeKind::Bar => "elongated bar shape extending sideways",
        }
    }
}

impl OpacityKind {
    pub fn word(self) -> &'static str {
        match self {
            OpacityKind::Bright => "bright",
            OpacityKind::Dark => "dark",
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            OpacityKind::Bright => "strongly radiopaque, glowing brighter than its surroundings",
            OpacityKind::Dark => "radiolucent, appearing darker and more see-through",
        }
    }
}

impl BorderKind {
    pub fn phrase(self) -> &'static str {
        match self {
            BorderKind::Soft => "feathered hazy margin fading gradually outward",
            BorderKind::Sharp => "crisp knife-edge rim, abruptly demarcated",
        }
    }
}

impl FluidKind {
    pub fn phrase(self) -> &'static str {
        match self {
            FluidKind::Layered => "dependent fluid settling, growing denser toward the bottom",
            FluidKind::None => "even consistency from top to bottom",
        }
    }
}

impl FocalityKind {
    pub fn phrase(self) -> &'static str {
        match self {
            FocalityKind::Single => "one solitary focus",
            FocalityKind::Multi => "several scattered small foci peppered over the area",
        }
    }
}

pub fn location_phrase(location: &str) -> String {
    match location {
        "upper left lung" => "seated high in the left lung apex".to_string(),
        "lower left lung" => "settled at the left lung base".to_string(),
        "upper right lung" => "lodged high in the right lung apex".to_string(),
        "lower right lung" => "resting at the right lung base".to_string(),
        "heart" => "overlying the cardiac silhouette".to_string(),
        "spine" => "along the midline spinal column".to_string(),
        other => format!("typically found in the {other}"),
    }
}

/// Procedural parameters for one disease: one value per visual aspect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AspectRenderer {
    pub texture: TextureKind,
    pub shape: ShapeKind,
    pub opacity: OpacityKind,
    pub location: String,
    pub border: BorderKind,
    pub fluid: FluidKind,
    pub focality: FocalityKind,
    /// Free text for the `other` aspect; no visual effect.
    pub other: Option<String>,
}

impl AspectRenderer {
    fn other_phrase(&self) -> String {
        self.other
            .clone()
            .unwrap_or_else(|| "no additional distinguishing features".to_string())
    }
}

/// Named anchor region, as fractions of the image side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocationSpec {
    pub name: String,
    /// `[x0, y0, x1, y1]` fractions of the image.
    pub region: [f64; 4],
}

/// Difficulty knobs for the procedural generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Difficulty {
    pub image_size: usize,
    pub noise_sigma: f64,
    pub background_level: f64,
    /// Intensity lift for bright lesions.
    pub opacity_delta: f64,
    /// Intensity drop for dark lesions.
    pub dark_delta: f64,
    pub blob_radius_min: f64,
    pub blob_radius_max: f64,
    /// Contrast floor the measurement oracle checks per rendered lesion.
    pub min_contrast: f64,
    /// Negative mentions sampled per report, at most.
    pub max_negations: usize,
    /// Probability a lesion is placed away from its typical location (the
    /// report states the actual one), so location prediction and grounding
    /// must read the image rather than memorize the disease identity.
    pub location_jitter: f64,
}

impl Default for Difficulty {
    fn default() -> Self {
        Self {
            image_size: 64,
            noise_sigma: 0.04,
            background_level: 0.35,
            opacity_delta: 0.30,
            dark_delta: 0.18,
            blob_radius_min: 9.0,
            blob_radius_max: 13.0,
            min_contrast: 0.08,
            max_negations: 2,
            location_jitter: 0.5,
        }
    }
}

/// Full generator configuration: renderers, anchors, split sizes, sampling
/// rates, and the holdout list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub train: usize,
    pub valid: usize,
    pub test_seen: usize,
    pub test_unseen: usize,
    /// Marginal probability that a seen disease is positive in a sample.
    pub positive_rate: f64,
    /// Marginal probability for holdout diseases in the unseen test split.
    pub unseen_positive_rate: f64,
    /// Marginal probability for seen diseases in the unseen test split.
    pub distractor_rate: f64,
    pub holdout: Vec<String>,
    pub difficulty: Difficulty,
    pub locations: Vec<LocationSpec>,
    pub diseases: IndexMap<String, AspectRenderer>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        default_generator_config()
    }
}

impl GeneratorConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CorpusError> {
        let cfg: GeneratorConfig =
            toml::from_str(text).map_err(|e| CorpusError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CorpusError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("generator config serializes")
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.diseases.is_empty() {
            return Err(CorpusError::Config("no diseases configured".into()));
        }
        for (name, renderer) in &self.diseases {
            if !self.locations.iter().any(|l| l.name == renderer.location) {
                return Err(CorpusError::Config(format!(
                    "disease {name:?} references unknown location {:?}",
                    renderer.location
                )));
            }
        }
        for held in &self.holdout {
            if !self.diseases.contains_key(held) {
                return Err(CorpusError::Config(format!(
                    "holdout disease {held:?} has no renderer"
                )));
            }
        }
        if self.holdout.len() >= self.diseases.len() {
            return Err(CorpusError::Config(
                "holdout exhausts all diseases; nothing left to train on".into(),
            ));
        }
        let d = &self.difficulty;
        if d.blob_radius_min <= 0.0 || d.blob_radius_max < d.blob_radius_min {
            return Err(CorpusError::Config("bad blob radius range".into()));
        }
        if d.image_size < 16 {
            return Err(CorpusError::Config("image size too small".into()));
        }
        Ok(())
    }

    pub fn seen_disease_names(&self) -> Vec<String> {
        self.diseases
            .keys()
            .filter(|n| !self.holdout.contains(n))
            .cloned()
            .collect()
    }

    fn location_region(&self, name: &str) -> Option<&LocationSpec> {
        self.locations.iter().find(|l| l.name == name)
    }
}

/// Build the knowledge base implied by a generator config: the disease
/// entries describe exactly the aspect values the renderer draws, plus the
/// reserved healthy entry.
pub fn derive_kb(cfg: &GeneratorConfig) -> KnowledgeBase {
    let aspects: Vec<String> = ASPECT_NAMES.iter().map(|s| s.to_string()).collect();
    let mut diseases = Vec::new();
    for (name, r) in &cfg.diseases {
        let description = format!(
            "{name} is a synthetic finding: a {} {} {} lesion usually in the {}",
            r.opacity.word(),
            r.texture.word(),
            r.shape.word(),
            r.location
        );
        let texts = [
            r.texture.phrase().to_string(),
            r.shape.phrase().to_string(),
            r.opacity.phrase().to_string(),
            location_phrase(&r.location),
            r.border.phrase().to_string(),
            r.fluid.phrase().to_string(),
            r.focality.phrase().to_string(),
            r.other_phrase(),
        ];
        diseases.push(DiseaseEntry {
            name: name.clone(),
            description,
            seen: !cfg.holdout.contains(name),
            aspects: aspects.iter().cloned().zip(texts).collect(),
        });
    }
    diseases.push(healthy_entry(&aspects));
    KnowledgeBase {
        version: "synthetic-1".into(),
        aspects,
        locations: cfg.locations.iter().map(|l| l.name.clone()).collect(),
        diseases,
    }
}

fn healthy_entry(aspects: &[String]) -> DiseaseEntry {
    let texts = [
        "clear homogeneous field throughout",
        "normal anatomical outlines only",
        "expected attenuation everywhere",
        "unremarkable study overall",
        "organs demarcated as expected",
        "costophrenic angles preserved",
        "no abnormality to report",
        "routine appearance of a well study",
    ];
    DiseaseEntry {
        name: HEALTHY_NAME.to_string(),
        description: "normal study with clear fields and no lesion".to_string(),
        seen: false,
        aspects: aspects.iter().cloned().zip(texts.iter().map(|s| s.to_string())).collect(),
    }
}

/// Default desk-scale setup: ten seen diseases plus two holdout compositions
/// that recombine seen aspect values, over four anchor locations.
pub fn default_generator_config() -> GeneratorConfig {
    use BorderKind::*;
    use FluidKind as Fl;
    use FocalityKind::*;
    use OpacityKind::*;
    use ShapeKind::*;
    use TextureKind::*;

    let spec = |texture, shape, opacity, location: &str, border, fluid, focality| AspectRenderer {
        texture,
        shape,
        opacity,
        location: location.to_string(),
        border,
        fluid,
        focality,
        other: None,
    };

    let mut diseases = IndexMap::new();
    diseases.insert("d1".into(), spec(Grainy, Round, Bright, "upper left lung", Soft, Fl::None, Single));
    diseases.insert("d2".into(), spec(Streaky, Bar, Bright, "upper right lung", Sharp, Fl::None, Single));
    diseases.insert("d3".into(), spec(Smooth, Ring, Dark, "heart", Sharp, Fl::None, Single));
    diseases.insert("d4".into(), spec(Honeycomb, Wedge, Bright, "spine", Soft, Fl::None, Multi));
    diseases.insert("d5".into(), spec(Grainy, Bar, Dark, "lower right lung", Soft, Fl::Layered, Single));
    diseases.insert("d6".into(), spec(Streaky, Ring, Bright, "lower left lung", Soft, Fl::None, Multi));
    diseases.insert("d7".into(), spec(Smooth, Round, Dark, "upper right lung", Sharp, Fl::Layered, Single));
    diseases.insert("d8".into(), spec(Honeycomb, Round, Bright, "heart", Sharp, Fl::None, Single));
    diseases.insert("d9".into(), spec(Grainy, Wedge, Bright, "spine", Sharp, Fl::None, Single));
    diseases.insert("d10".into(), spec(Streaky, Round, Dark, "lower left lung", Soft, Fl::Layered, Multi));
    // holdout compositions: every aspect value above appears in training,
    // each holdout shares at most three aspect values with any single base
    // disease, and the two holdouts share none with each other
    diseases.insert("d11".into(), spec(Grainy, Bar, Dark, "lower left lung", Sharp, Fl::None, Multi));
    diseases.insert("d12".into(), spec(Smooth, Ring, Bright, "spine", Soft, Fl::Layered, Single));

    GeneratorConfig {
        seed: 7,
        train: 2000,
        valid: 400,
        test_seen: 400,
        test_unseen: 400,
        positive_rate: 0.20,
        unseen_positive_rate: 0.40,
        distractor_rate: 0.10,
        holdout: vec!["d11".into(), "d12".into()],
        difficulty: Difficulty::default(),
        locations: vec![
            LocationSpec { name: "upper left lung".into(), region: [0.08, 0.12, 0.40, 0.42] },
            LocationSpec { name: "lower left lung".into(), region: [0.08, 0.50, 0.40, 0.80] },
            LocationSpec { name: "upper right lung".into(), region: [0.60, 0.12, 0.92, 0.42] },
            LocationSpec { name: "lower right lung".into(), region: [0.60, 0.50, 0.92, 0.80] },
            LocationSpec { name: "heart".into(), region: [0.40, 0.58, 0.60, 0.84] },
            LocationSpec { name: "spine".into(), region: [0.42, 0.10, 0.58, 0.46] },
        ],
        diseases,
    }
}

/// Per-disease sampling rate used when drawing a sample's positive set.
/// Diseases absent from the list are out of play for the split (never
/// positive and never mentioned).
pub type SamplingRates = Vec<(String, f64)>;

/// Generate one sample. Pure function of `(seed, kb, cfg, rates)`.
pub fn generate_sample(
    seed: u64,
    kb: &KnowledgeBase,
    cfg: &GeneratorConfig,
    rates: &SamplingRates,
) -> Result<SyntheticSample, CorpusError> {
    let size = cfg.difficulty.image_size;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    for (name, _) in rates {
        if !cfg.diseases.contains_key(name) {
            return Err(CorpusError::Config(format!("no renderer for disease {name:?}")));
        }
        if kb.disease_index(name).is_none() {
            return Err(CorpusError::UnknownEntity(name.clone()));
        }
    }

    // positive set, drawn in rate-list order
    let mut positives = Vec::new();
    for (name, rate) in rates {
        if rng.gen::<f64>() < *rate {
            positives.push(name.clone());
        }
    }

    // background
    let normal = Normal::new(0.0, cfg.difficulty.noise_sigma).unwrap();
    let mut image = Array2::from_shape_fn((size, size), |_| {
        (cfg.difficulty.background_level + normal.sample(&mut rng)).clamp(0.0, 1.0)
    });

    // lesions; each may land away from its typical anchor
    let mut masks = BTreeMap::new();
    let mut triplets = Vec::new();
    for name in &positives {
        let renderer = &cfg.diseases[name.as_str()];
        let location = sample_location(&mut rng, cfg, &renderer.location);
        let mut mask = Array2::<u8>::zeros((size, size));
        draw_disease(&mut image, &mut mask, renderer, &location, cfg, seed, &mut rng)?;
        masks.insert(name.clone(), mask);
        triplets.push(EntityTriplet::positive(name, Some(&location)));
    }

    // negative mentions of a few absent, in-play diseases
    let mut absent: Vec<&String> =
        rates.iter().map(|(n, _)| n).filter(|n| !positives.contains(n)).collect();
    let wanted = rng.gen_range(0..=cfg.difficulty.max_negations.min(absent.len()));
    for _ in 0..wanted {
        let pick = rng.gen_range(0..absent.len());
        triplets.push(EntityTriplet::negative(absent.remove(pick)));
    }

    let report = report::render_report(&triplets, &mut rng);
    let target = build_targets(&triplets, kb, true)?;

    Ok(SyntheticSample { seed, image, report, masks, target })
}

fn sample_location(rng: &mut ChaCha20Rng, cfg: &GeneratorConfig, canonical: &str) -> String {
    let jitter = cfg.difficulty.location_jitter;
    if jitter > 0.0 && cfg.locations.len() > 1 && rng.gen::<f64>() < jitter {
        let others: Vec<&LocationSpec> =
            cfg.locations.iter().filter(|l| l.name != canonical).collect();
        others[rng.gen_range(0..others.len())].name.clone()
    } else {
        canonical.to_string()
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_disease(
    image: &mut Array2<f64>,
    mask: &mut Array2<u8>,
    renderer: &AspectRenderer,
    location: &str,
    cfg: &GeneratorConfig,
    sample_seed: u64,
    rng: &mut ChaCha20Rng,
) -> Result<(), CorpusError> {
    let size = cfg.difficulty.image_size as f64;
    let spec = cfg
        .location_region(location)
        .ok_or_else(|| CorpusError::UnknownLocation(location.to_string()))?;
    let radius =
        rng.gen_range(cfg.difficulty.blob_radius_min..=cfg.difficulty.blob_radius_max);

    let blob_count = match renderer.focality {
        FocalityKind::Single => 1,
        FocalityKind::Multi => 3,
    };
    let sub_radius = if blob_count == 1 { radius } else { radius * 0.7 };

    for _ in 0..blob_count {
        let cx = sample_in_region(rng, spec.region[0] * size, spec.region[2] * size, sub_radius, size);
        let cy = sample_in_region(rng, spec.region[1] * size, spec.region[3] * size, sub_radius, size);
        draw_blob(image, mask, renderer, cfg, sample_seed, cx, cy, sub_radius);
    }
    Ok(())
}

fn sample_in_region(rng: &mut ChaCha20Rng, lo: f64, hi: f64, radius: f64, size: f64) -> f64 {
    let raw = rng.gen_range(lo..hi);
    raw.clamp(radius + 1.0, size - radius - 2.0)
}

#[allow(clippy::too_many_arguments)]
fn draw_blob(
    image: &mut Array2<f64>,
    mask: &mut Array2<u8>,
    renderer: &AspectRenderer,
    cfg: &GeneratorConfig,
    sample_seed: u64,
    cx: f64,
    cy: f64,
    radius: f64,
) {
    let size = cfg.difficulty.image_size as isize;
    let reach = (radius * 1.5).ceil() as isize + 1;
    let delta = match renderer.opacity {
        OpacityKind::Bright => cfg.difficulty.opacity_delta,
        OpacityKind::Dark => -cfg.difficulty.dark_delta,
    };

    let y_lo = ((cy as isize) - reach).max(0);
    let y_hi = ((cy as isize) + reach).min(size - 1);
    let x_lo = ((cx as isize) - reach).max(0);
    let x_hi = ((cx as isize) + reach).min(size - 1);

    let feather = (0.35 * radius).min(2.0);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let sd = signed_inside(renderer.shape, dx, dy, radius);
            if sd <= 0.0 {
                continue;
            }
            let profile = match renderer.border {
                BorderKind::Sharp => 1.0,
                BorderKind::Soft => smoothstep((sd / feather).clamp(0.0, 1.0)),
            };
            let mut factor = texture_factor(renderer.texture, sample_seed, x, y);
            if renderer.fluid == FluidKind::Layered {
                let t = ((dy + radius) / (2.0 * radius)).clamp(0.0, 1.0);
                factor *= 0.55 + 0.9 * t;
            }
            let (yy, xx) = (y as usize, x as usize);
            image[(yy, xx)] = (image[(yy, xx)] + delta * profile * factor).clamp(0.0, 1.0);
            // the mask marks pixels where the lesion meaningfully alters
            // intensity, not the faint feathered halo
            if profile >= 0.5 {
                mask[(yy, xx)] = 1;
            }
        }
    }
}

/// Positive inside the shape, measured roughly in pixels from the boundary.
fn signed_inside(shape: ShapeKind, dx: f64, dy: f64, r: f64) -> f64 {
    let rho = (dx * dx + dy * dy).sqrt();
    match shape {
        ShapeKind::Round => r - rho,
        ShapeKind::Ring => {
            let inner = 0.45 * r;
            (rho - inner).min(r - rho)
        }
        ShapeKind::Wedge => {
            // isoceles triangle, apex up at -r, base at +0.8r
            if dy < -r || dy > 0.8 * r {
                return -1.0;
            }
            let half_width = 0.9 * r * (dy + r) / (1.8 * r);
            (half_width - dx.abs()).min(dy + r).min(0.8 * r - dy)
        }
        ShapeKind::Bar => (1.3 * r - dx.abs()).min(0.45 * r - dy.abs()),
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn texture_factor(texture: TextureKind, seed: u64, x: isize, y: isize) -> f64 {
    match texture {
        TextureKind::Smooth => 1.0,
        TextureKind::Grainy => 1.0 + 0.55 * pixel_noise(seed, x.div_euclid(2), y.div_euclid(2)),
        TextureKind::Streaky => {
            let (c, s) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
            1.0 + 0.45 * (std::f64::consts::TAU * (x as f64 * c + y as f64 * s) / 4.5).sin()
        }
        TextureKind::Honeycomb => {
            let v = (std::f64::consts::PI * x as f64 / 2.6).sin()
                * (std::f64::consts::PI * y as f64 / 2.6).sin();
            1.0 + 0.45 * v.signum()
        }
    }
}

/// Deterministic per-pixel noise in [-1, 1], independent of draw order.
fn pixel_noise(seed: u64, x: isize, y: isize) -> f64 {
    let mut z = seed
        ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_rates(cfg: &GeneratorConfig, rate: f64) -> SamplingRates {
        cfg.seen_disease_names().into_iter().map(|n| (n, rate)).collect()
    }

    #[test]
    fn default_config_is_valid_and_derives_a_valid_kb() {
        let cfg = default_generator_config();
        cfg.validate().unwrap();
        let kb = derive_kb(&cfg);
        kb.validate().unwrap();
        assert_eq!(kb.diseases.len(), 13); // 12 + healthy
        assert_eq!(kb.aspect_count(), 8);
        assert_eq!(kb.seen_diseases().len(), 10);
        assert!(kb.disease(HEALTHY_NAME).is_some());
    }

    #[test]
    fn holdout_values_all_appear_in_seen_diseases() {
        let cfg = default_generator_config();
        let seen: Vec<&AspectRenderer> = cfg
            .seen_disease_names()
            .iter()
            .map(|n| &cfg.diseases[n.as_str()])
            .collect();
        for held in &cfg.holdout {
            let r = &cfg.diseases[held.as_str()];
            assert!(seen.iter().any(|s| s.texture == r.texture), "{held} texture unseen");
            assert!(seen.iter().any(|s| s.shape == r.shape), "{held} shape unseen");
            assert!(seen.iter().any(|s| s.opacity == r.opacity), "{held} opacity unseen");
            assert!(seen.iter().any(|s| s.location == r.location), "{held} location unseen");
            assert!(seen.iter().any(|s| s.border == r.border), "{held} border unseen");
            assert!(seen.iter().any(|s| s.fluid == r.fluid), "{held} fluid unseen");
            assert!(seen.iter().any(|s| s.focality == r.focality), "{held} focality unseen");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = default_generator_config();
        let kb = derive_kb(&cfg);
        let rates = default_rates(&cfg, 0.5);
        let a = generate_sample(7, &kb, &cfg, &rates).unwrap();
        let b = generate_sample(7, &kb, &cfg, &rates).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.report, b.report);
        assert_eq!(a.target, b.target);
        assert_eq!(a.masks, b.masks);
    }

    #[test]
    fn all_absent_means_empty_masks_and_negative_report() {
        let cfg = default_generator_config();
        let kb = derive_kb(&cfg);
        let rates = default_rates(&cfg, 0.0);
        let s = generate_sample(3, &kb, &cfg, &rates).unwrap();
        assert!(s.masks.is_empty());
        assert!(s.target.positive_indices().is_empty());
        let parsed = report::parse_report(&s.report, &kb);
        assert!(parsed.triplets.iter().all(|t| !t.exist));
    }

    #[test]
    fn mask_and_target_are_consistent() {
        let cfg = default_generator_config();
        let kb = derive_kb(&cfg);
        let rates = default_rates(&cfg, 0.35);
        for seed in 0..40 {
            let s = generate_sample(seed, &kb, &cfg, &rates).unwrap();
            for (j, d) in kb.diseases.iter().enumerate() {
                let has_mask = s
                    .masks
                    .get(&d.name)
                    .map(|m| m.iter().any(|&v| v == 1))
                    .unwrap_or(false);
                assert_eq!(
                    has_mask,
                    s.target.presence[j] == 1,
                    "seed {seed} disease {}",
                    d.name
                );
            }
        }
    }

    /// Measurement oracle: with a single disease rendered, inside-vs-outside
    /// mean intensity differs by at least the configured contrast floor.
    /// (Overlapping lesions from co-located diseases can cancel, so the
    /// per-lesion contract is checked on isolated lesions.)
    #[test]
    fn lesion_contrast_measured_per_sample() {
        let cfg = default_generator_config();
        let kb = derive_kb(&cfg);
        let mut checked = 0;
        for name in cfg.diseases.keys() {
            let rates = vec![(name.clone(), 1.0)];
            for seed in 100..115 {
                let s = generate_sample(seed, &kb, &cfg, &rates).unwrap();
                let mask = &s.masks[name];
                let (mut sum_in, mut n_in, mut sum_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
                for (&v, &m) in s.image.iter().zip(mask.iter()) {
                    if m == 1 {
                        sum_in += v;
                        n_in += 1;
                    } else {
                        sum_out += v;
                        n_out += 1;
                    }
                }
                assert!(n_in > 0, "seed {seed} disease {name}: empty mask");
                let contrast = (sum_in / n_in as f64 - sum_out / n_out as f64).abs();
                assert!(
                    contrast >= cfg.difficulty.min_contrast,
                    "seed {seed} disease {name}: contrast {contrast} below floor"
                );
                checked += 1;
            }
        }
        assert!(checked >= 180, "oracle barely exercised ({checked} lesions)");
    }

    #[test]
    fn reports_round_trip_through_parser() {
        let cfg = default_generator_config();
        let kb = derive_kb(&cfg);
        let rates = default_rates(&cfg, 0.3);
        for seed in 0..60 {
            let s = generate_sample(seed, &kb, &cfg, &rates).unwrap();
            let parsed = report::parse_report(&s.report, &kb);
            let rebuilt = build_targets(&parsed.triplets, &kb, true).unwrap();
            assert_eq!(rebuilt, s.target, "seed {seed} report {:?}", s.report);
        }
    }

    #[test]
    fn unknown_renderer_is_config_error() {
        let cfg = default_generator_config();
        let kb = derive_kb(&cfg);
        let rates = vec![("mystery".to_string(), 0.5)];
        assert!(matches!(
            generate_sample(1, &kb, &cfg, &rates),
            Err(CorpusError::Config(_))
        ));
    }
}
