use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Reporting category of a question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QType {
    YesNo,
    Num,
    Other,
}

impl QType {
    pub const ALL: [QType; 3] = [QType::YesNo, QType::Num, QType::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            QType::YesNo => "yesno",
            QType::Num => "num",
            QType::Other => "other",
        }
    }
}

impl fmt::Display for QType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "yesno" => Ok(QType::YesNo),
            "num" => Ok(QType::Num),
            "other" => Ok(QType::Other),
            _ => Err(format!("unknown question type `{s}`")),
        }
    }
}

/// How test-split answer priors relate to the training priors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftMode {
    /// The training majority answer becomes the rarest answer.
    Inverted,
    /// Every answer of a template is equally likely.
    Uniform,
}

impl FromStr for ShiftMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "inverted" => Ok(ShiftMode::Inverted),
            "uniform" => Ok(ShiftMode::Uniform),
            _ => Err(format!("unknown shift mode `{s}`")),
        }
    }
}

impl fmt::Display for ShiftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftMode::Inverted => "inverted",
            ShiftMode::Uniform => "uniform",
        })
    }
}

pub const ATTR_SLOT: &str = "{attr}";
pub const VALUE_SLOT: &str = "{value}";
pub const PAD_TOKEN: &str = "<pad>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionTemplate {
    pub qtype: QType,
    pub queried_attribute: usize,
    /// Words of the question; `{attr}` and `{value}` are filled per instance.
    pub token_pattern: Vec<String>,
}

impl QuestionTemplate {
    pub fn standard(qtype: QType, queried_attribute: usize) -> Self {
        let words: &[&str] = match qtype {
            QType::Other => &["what", "is", "the", ATTR_SLOT, "?"],
            QType::YesNo => &["is", "the", ATTR_SLOT, VALUE_SLOT, "?"],
            QType::Num => &["how", "many", "objects", "?"],
        };
        QuestionTemplate {
            qtype,
            queried_attribute,
            token_pattern: words.iter().map(|w| w.to_string()).collect(),
        }
    }
}

/// One `other` and one `yesno` template per attribute, plus a counting template.
pub fn standard_templates(n_attributes: usize) -> Vec<QuestionTemplate> {
    let mut out = Vec::new();
    for a in 0..n_attributes {
        out.push(QuestionTemplate::standard(QType::Other, a));
        out.push(QuestionTemplate::standard(QType::YesNo, a));
    }
    out.push(QuestionTemplate::standard(QType::Num, 0));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub n_attributes: usize,
    pub values_per_attribute: Vec<usize>,
    /// Inclusive `[min, max]` count of real objects per image.
    pub n_objects_range: [usize; 2],
    /// Rows of every image matrix; slots past the object count hold background.
    pub object_slots: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub templates: Vec<QuestionTemplate>,
    pub train_size: usize,
    pub test_size: usize,
    pub bias_beta: f64,
    pub shift_mode: ShiftMode,
    pub vote_count: u32,
    pub pad_len: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_attributes: 2,
            values_per_attribute: vec![4, 4],
            n_objects_range: [1, 4],
            object_slots: 6,
            feature_dim: 32,
            noise_sigma: 0.1,
            templates: standard_templates(2),
            train_size: 4000,
            test_size: 2000,
            bias_beta: 0.85,
            shift_mode: ShiftMode::Inverted,
            vote_count: 10,
            pad_len: 8,
            seed: 0,
        }
    }
}

const ATTRIBUTE_NAMES: [&str; 8] = [
    "color", "shape", "size", "material", "texture", "pattern", "position", "weight",
];

pub fn attribute_name(index: usize) -> String {
    ATTRIBUTE_NAMES
        .get(index)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("attr{index}"))
}

pub fn value_name(attribute: usize, value: usize) -> String {
    format!("{}_{}", attribute_name(attribute), value)
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("world spec", d));
        if !(0.0..=1.0).contains(&self.bias_beta) {
            return bad(format!("bias_beta {} outside [0, 1]", self.bias_beta));
        }
        if self.values_per_attribute.len() != self.n_attributes || self.n_attributes == 0 {
            return bad(format!(
                "values_per_attribute has {} entries for {} attributes",
                self.values_per_attribute.len(),
                self.n_attributes
            ));
        }
        if let Some(v) = self.values_per_attribute.iter().find(|&&v| v < 2) {
            return bad(format!("every attribute needs at least 2 values, got {v}"));
        }
        if self.vote_count == 0 {
            return bad("vote_count must be at least 1".into());
        }
        let [lo, hi] = self.n_objects_range;
        if lo > hi || hi > self.object_slots || hi == 0 {
            return bad(format!(
                "n_objects_range [{lo}, {hi}] must satisfy min <= max <= object_slots ({}), max >= 1",
                self.object_slots
            ));
        }
        if self.feature_dim == 0 || self.pad_len == 0 {
            return bad("feature_dim and pad_len must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if self.templates.is_empty() {
            return bad("at least one question template is required".into());
        }
        for (i, t) in self.templates.iter().enumerate() {
            if t.queried_attribute >= self.n_attributes {
                return bad(format!("template {i} queries attribute {}", t.queried_attribute));
            }
            if t.token_pattern.is_empty() || t.token_pattern.len() > self.pad_len {
                return bad(format!(
                    "template {i} has {} tokens, pad length is {}",
                    t.token_pattern.len(),
                    self.pad_len
                ));
            }
            let has_value = t.token_pattern.iter().any(|w| w == VALUE_SLOT);
            if (t.qtype == QType::YesNo) != has_value {
                return bad(format!("template {i}: only yesno templates carry a {VALUE_SLOT} slot"));
            }
            if t.token_pattern.iter().any(|w| w == PAD_TOKEN || w.is_empty()) {
                return bad(format!("template {i} uses a reserved or empty token"));
            }
            if t.qtype == QType::Num && lo == hi {
                return bad(format!(
                    "template {i} has a single possible answer; no bias is possible"
                ));
            }
        }
        Ok(())
    }
}

/// Latent content of an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    /// Value index per attribute.
    pub values: Vec<usize>,
    pub n_objects: usize,
}

/// Everything needed to render questions and images, derived from a spec.
#[derive(Debug, Clone)]
pub struct World {
    spec: WorldSpec,
    question_vocab: Vec<String>,
    answer_vocab: Vec<String>,
    token_ids: HashMap<String, u32>,
    answer_ids: HashMap<String, usize>,
    answer_sets: Vec<Vec<usize>>,
    majority: Vec<usize>,
    /// `feature_dim x code_dim`, row-major.
    projection: Vec<f64>,
    code_dim: usize,
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        spec.validate()?;

        let mut answer_vocab: Vec<String> = vec!["yes".into(), "no".into()];
        let [lo, hi] = spec.n_objects_range;
        answer_vocab.extend((lo..=hi).map(|k| k.to_string()));
        for (a, &n) in spec.values_per_attribute.iter().enumerate() {
            answer_vocab.extend((0..n).map(|v| value_name(a, v)));
        }
        let answer_ids: HashMap<String, usize> = answer_vocab.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();

        let mut question_vocab: Vec<String> = vec![PAD_TOKEN.into()];
        let push = |w: String, vocab: &mut Vec<String>| {
            if !vocab.contains(&w) {
                vocab.push(w);
            }
        };
        for t in &spec.templates {
            for w in &t.token_pattern {
                if w != ATTR_SLOT && w != VALUE_SLOT {
                    push(w.clone(), &mut question_vocab);
                }
            }
        }
        for (a, &n) in spec.values_per_attribute.iter().enumerate() {
            push(attribute_name(a), &mut question_vocab);
            for v in 0..n {
                push(value_name(a, v), &mut question_vocab);
            }
        }
        let token_ids = question_vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();

        let answer_sets: Vec<Vec<usize>> = spec
            .templates
            .iter()
            .map(|t| match t.qtype {
                QType::YesNo => vec![0, 1],
                QType::Num => (lo..=hi).map(|k| answer_ids[&k.to_string()]).collect(),
                QType::Other => (0..spec.values_per_attribute[t.queried_attribute])
                    .map(|v| answer_ids[&value_name(t.queried_attribute, v)])
                    .collect(),
            })
            .collect();

        let majority = answer_sets
            .iter()
            .enumerate()
            .map(|(i, set)| {
                let mut rng = stream_rng(spec.seed, Stream::Majority, i as u64);
                *set.choose(&mut rng).expect("answer sets are non-empty")
            })
            .collect();

        let code_dim = spec.values_per_attribute.iter().sum::<usize>() + 1;
        let scale = 1.0 / ((spec.n_attributes + 1) as f64).sqrt();
        let mut rng = stream_rng(spec.seed, Stream::Projection, 0);
        let projection = (0..spec.feature_dim * code_dim)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect::<Vec<f64>>();

        Ok(World {
            spec,
            question_vocab,
            answer_vocab,
            token_ids,
            answer_ids,
            answer_sets,
            majority,
            projection,
            code_dim,
        })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn question_vocab(&self) -> &[String] {
        &self.question_vocab
    }

    pub fn answer_vocab(&self) -> &[String] {
        &self.answer_vocab
    }

    pub fn answer_id(&self, name: &str) -> Option<usize> {
        self.answer_ids.get(name).copied()
    }

    pub fn token_id(&self, word: &str) -> Option<u32> {
        self.token_ids.get(word).copied()
    }

    /// Answers a template can produce, in answer-id order.
    pub fn answer_set(&self, template: usize) -> &[usize] {
        &self.answer_sets[template]
    }

    /// The designated training majority answer of a template.
    pub fn majority_answer(&self, template: usize) -> usize {
        self.majority[template]
    }

    /// Ground-truth answer of `template` on `scene`; `probe` is the value a
    /// yes/no question asks about.
    pub fn answer(&self, template: usize, scene: &Scene, probe: Option<usize>) -> usize {
        let t = &self.spec.templates[template];
        match t.qtype {
            QType::YesNo => {
                if Some(scene.values[t.queried_attribute]) == probe {
                    0
                } else {
                    1
                }
            }
            QType::Num => self.answer_ids[&scene.n_objects.to_string()],
            QType::Other => self.answer_ids[&value_name(t.queried_attribute, scene.values[t.queried_attribute])],
        }
    }

    /// Padded token ids of a template instance.
    pub fn tokens(&self, template: usize, probe: Option<usize>) -> Vec<u32> {
        let t = &self.spec.templates[template];
        let mut out: Vec<u32> = t
            .token_pattern
            .iter()
            .map(|w| match w.as_str() {
                ATTR_SLOT => self.token_ids[&attribute_name(t.queried_attribute)],
                VALUE_SLOT => {
                    self.token_ids[&value_name(t.queried_attribute, probe.expect("yesno questions carry a probe"))]
                }
                word => self.token_ids[word],
            })
            .collect();
        out.resize(self.spec.pad_len, 0);
        out
    }

    /// Noise-free feature row of a real object in `scene`.
    pub fn object_code(&self, scene: &Scene) -> Vec<f64> {
        let mut hot = Vec::with_capacity(self.spec.n_attributes + 1);
        let mut offset = 0;
        for (a, &n) in self.spec.values_per_attribute.iter().enumerate() {
            hot.push(offset + scene.values[a]);
            offset += n;
        }
        hot.push(self.code_dim - 1);
        (0..self.spec.feature_dim)
            .map(|r| hot.iter().map(|&c| self.projection[r * self.code_dim + c]).sum())
            .collect()
    }
}
