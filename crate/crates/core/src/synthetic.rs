//! Synthetic compositional QA.
//!
//! A scene holds a few objects, each with a shape, a color and a count. The
//! feature vector concatenates one-hot codes for every object (in shuffled
//! order) and adds Gaussian noise. Questions come from four templates, and
//! the same scene answers each one differently, so the features alone say
//! little about the answer.

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, QAExample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// "what color is the {shape}?"
    ColorOf,
    /// "what shape is {color}?"
    ShapeOf,
    /// "how many {shape}?"
    CountOf,
    /// "is there a {color} {shape}?"
    Exists,
}

impl Template {
    pub const ALL: [Template; 4] = [Template::ColorOf, Template::ShapeOf, Template::CountOf, Template::Exists];

    pub fn as_str(self) -> &'static str {
        match self {
            Template::ColorOf => "color_of",
            Template::ShapeOf => "shape_of",
            Template::CountOf => "count_of",
            Template::Exists => "exists",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub slots: usize,
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub max_count: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub questions_per_scene: usize,
    pub noise: f64,
    /// Relative frequency of each template, in [`Template::ALL`] order.
    pub template_weights: [f64; 4],
}

impl Default for GenConfig {
    fn default() -> Self {
        let words = |ws: &[&str]| ws.iter().map(|s| s.to_string()).collect();
        Self {
            slots: 2,
            shapes: words(&["square", "circle", "triangle", "star"]),
            colors: words(&["red", "green", "blue", "yellow"]),
            max_count: 3,
            train_scenes: 4000,
            val_scenes: 500,
            test_scenes: 500,
            questions_per_scene: 1,
            noise: 0.05,
            template_weights: [1.0; 4],
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.slots == 0 {
            return bad("scenes need at least one slot".into());
        }
        if self.slots > self.shapes.len() || self.slots > self.colors.len() {
            return bad(format!(
                "{} slots need as many distinct shapes and colors (have {} and {})",
                self.slots,
                self.shapes.len(),
                self.colors.len()
            ));
        }
        if self.shapes.len() * self.colors.len() < 2 {
            return bad("need at least two shape/color combinations".into());
        }
        if self.max_count == 0 {
            return bad("max_count must be at least 1".into());
        }
        if self.questions_per_scene == 0 {
            return bad("questions_per_scene must be at least 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be a finite non-negative number, got {}", self.noise));
        }
        if self.template_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.template_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("template weights must be non-negative with a positive sum".into());
        }
        let mut seen = std::collections::HashSet::new();
        for w in self.shapes.iter().chain(&self.colors) {
            if w.trim().is_empty() || w.contains(char::is_whitespace) || !seen.insert(w.to_lowercase()) {
                return bad(format!("shape and color names must be distinct single words, got `{w}`"));
            }
        }
        Ok(())
    }

    /// Width of the generated feature vectors.
    pub fn feature_dim(&self) -> usize {
        self.slots * self.slot_width()
    }

    fn slot_width(&self) -> usize {
        self.shapes.len() + self.colors.len() + self.max_count
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Object {
    pub shape: usize,
    pub color: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub objects: Vec<Object>,
}

impl Scene {
    /// Objects have pairwise distinct shapes and pairwise distinct colors.
    pub fn sample<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> Self {
        let mut shapes: Vec<usize> = (0..cfg.shapes.len()).collect();
        let mut colors: Vec<usize> = (0..cfg.colors.len()).collect();
        shapes.shuffle(rng);
        colors.shuffle(rng);
        let objects = (0..cfg.slots)
            .map(|i| Object {
                shape: shapes[i],
                color: colors[i],
                count: rng.random_range(1..=cfg.max_count),
            })
            .collect();
        Self { objects }
    }

    pub fn features<R: Rng + ?Sized>(&self, cfg: &GenConfig, noise: &Normal<f64>, rng: &mut R) -> Vec<f64> {
        let width = cfg.slot_width();
        let mut out = vec![0.0; cfg.feature_dim()];
        for (slot, obj) in self.objects.iter().enumerate() {
            let base = slot * width;
            out[base + obj.shape] = 1.0;
            out[base + cfg.shapes.len() + obj.color] = 1.0;
            out[base + cfg.shapes.len() + cfg.colors.len() + obj.count - 1] = 1.0;
        }
        if cfg.noise > 0.0 {
            for v in &mut out {
                *v += noise.sample(rng);
            }
        }
        out
    }

    fn has(&self, shape: usize, color: usize) -> bool {
        self.objects.iter().any(|o| o.shape == shape && o.color == color)
    }
}

/// Builds one question about `scene` and its answer.
pub fn ask<R: Rng + ?Sized>(scene: &Scene, template: Template, cfg: &GenConfig, rng: &mut R) -> (String, String) {
    let obj = scene.objects[rng.random_range(0..scene.objects.len())];
    let (shape, color) = (&cfg.shapes[obj.shape], &cfg.colors[obj.color]);
    match template {
        Template::ColorOf => (format!("what color is the {shape}?"), color.clone()),
        Template::ShapeOf => (format!("what shape is {color}?"), shape.clone()),
        Template::CountOf => (format!("how many {shape}?"), obj.count.to_string()),
        Template::Exists => {
            if rng.random_bool(0.5) {
                (format!("is there a {color} {shape}?"), "yes".into())
            } else {
                let absent: Vec<(usize, usize)> = (0..cfg.shapes.len())
                    .flat_map(|s| (0..cfg.colors.len()).map(move |c| (s, c)))
                    .filter(|&(s, c)| !scene.has(s, c))
                    .collect();
                let (s, c) = absent[rng.random_range(0..absent.len())];
                (format!("is there a {} {}?", cfg.colors[c], cfg.shapes[s]), "no".into())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Generates the three splits. Scenes are numbered consecutively across
/// splits and every example id carries its scene number, so no scene is
/// shared between splits.
pub fn generate(cfg: &GenConfig, seed: u64) -> Result<Splits> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let templates = WeightedIndex::new(cfg.template_weights).map_err(|e| Error::Config(e.to_string()))?;
    let mut scene_id = 0usize;
    let mut split = |name: &str, scenes: usize| {
        let mut examples = Vec::with_capacity(scenes * cfg.questions_per_scene);
        for _ in 0..scenes {
            let scene = Scene::sample(cfg, &mut rng);
            let features = scene.features(cfg, &noise, &mut rng);
            for q in 0..cfg.questions_per_scene {
                let template = Template::ALL[templates.sample(&mut rng)];
                let (question, answer) = ask(&scene, template, cfg, &mut rng);
                examples.push(QAExample {
                    id: format!("{name}-{scene_id}-{q}"),
                    features: features.clone(),
                    question,
                    answers: vec![answer],
                });
            }
            scene_id += 1;
        }
        Dataset::new(examples)
    };
    let train = split("train", cfg.train_scenes);
    let val = split("val", cfg.val_scenes);
    let test = split("test", cfg.test_scenes);
    Ok(Splits { train, val, test })
}

/// Scene number encoded in a generated example id.
pub fn scene_of(id: &str) -> Option<usize> {
    id.split('-').nth(1)?.parse().ok()
}

/// Template of a generated question, recovered from its wording.
pub fn template_of(question: &str) -> Option<Template> {
    let q = question.trim_start().to_lowercase();
    [
        ("what color", Template::ColorOf),
        ("what shape", Template::ShapeOf),
        ("how many", Template::CountOf),
        ("is there", Template::Exists),
    ]
    .into_iter()
    .find_map(|(prefix, t)| q.starts_with(prefix).then_some(t))
}
