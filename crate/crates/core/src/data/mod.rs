//! Synthetic VQA worlds with a controlled gap between train and test
//! answer priors, plus the line-oriented dataset file format.

mod format;
mod world;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub(crate) use format::fmt_float;
pub use format::{read, read_str, write, write_string, FORMAT_VERSION};
pub use world::{
    attribute_name, standard_templates, value_name, QType, QuestionTemplate, Scene, ShiftMode, World, WorldSpec,
    ATTR_SLOT, PAD_TOKEN, VALUE_SLOT,
};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Object feature matrix, row-major `[rows x cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: u64,
    pub template_id: usize,
    pub qtype: QType,
    pub tokens: Vec<u32>,
    pub image: Image,
    /// `(answer id, count)` sorted by answer id.
    pub votes: Vec<(usize, u32)>,
    /// Generator ground truth; diagnostics only.
    pub true_answer: usize,
}

impl Instance {
    /// Most-voted answer, ties to the lowest id.
    pub fn primary_answer(&self) -> usize {
        let mut best = (0usize, 0u32);
        for &(a, c) in &self.votes {
            if c > best.1 || (c == best.1 && a < best.0) {
                best = (a, c);
            }
        }
        best.0
    }

    pub fn votes_for(&self, answer: usize) -> u32 {
        self.votes.iter().find(|(a, _)| *a == answer).map_or(0, |&(_, c)| c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub answer_vocab: Vec<String>,
    pub question_vocab: Vec<String>,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    pub spec: WorldSpec,
}

impl Dataset {
    pub fn n_answers(&self) -> usize {
        self.answer_vocab.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.question_vocab.len()
    }
}

/// Hidden generator state per instance id, kept out of the dataset file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Latent {
    pub scene: Scene,
    pub probe: Option<usize>,
}

/// Generated dataset plus the world and latents that produced it.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    pub world: World,
    /// Indexed by instance id.
    pub latents: Vec<Latent>,
}

impl Generated {
    /// Would the image of `image_id` produce the annotated answer of `question_id`?
    pub fn answers_alike(&self, question: &Instance, image_id: u64) -> bool {
        let q = &self.latents[question.id as usize];
        let img = &self.latents[image_id as usize];
        self.world.answer(question.template_id, &img.scene, q.probe) == question.true_answer
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Test,
}

pub fn generate(spec: &WorldSpec) -> Result<Dataset> {
    Ok(generate_full(spec)?.dataset)
}

/// Generates both splits. Each instance draws from its own seeded stream,
/// so the result does not depend on generation order.
pub fn generate_full(spec: &WorldSpec) -> Result<Generated> {
    let world = World::new(spec.clone())?;
    let total = spec.train_size + spec.test_size;
    let mut train = Vec::with_capacity(spec.train_size);
    let mut test = Vec::with_capacity(spec.test_size);
    let mut latents = Vec::with_capacity(total);
    for id in 0..total as u64 {
        let split = if (id as usize) < spec.train_size {
            Split::Train
        } else {
            Split::Test
        };
        let (inst, latent) = generate_instance(&world, id, split);
        latents.push(latent);
        match split {
            Split::Train => train.push(inst),
            Split::Test => test.push(inst),
        }
    }
    Ok(Generated {
        dataset: Dataset {
            answer_vocab: world.answer_vocab().to_vec(),
            question_vocab: world.question_vocab().to_vec(),
            train,
            test,
            spec: spec.clone(),
        },
        world,
        latents,
    })
}

/// Probability of each entry of a template's answer set in a split.
fn answer_distribution(world: &World, template: usize, split: Split) -> Vec<f64> {
    let set = world.answer_set(template);
    let n = set.len() as f64;
    let beta = world.spec().bias_beta;
    let major = world.majority_answer(template);
    let (p_major, p_rest) = match (split, world.spec().shift_mode) {
        (Split::Train, _) => (beta, (1.0 - beta) / (n - 1.0)),
        (Split::Test, ShiftMode::Uniform) => (1.0 / n, 1.0 / n),
        (Split::Test, ShiftMode::Inverted) => {
            let p = beta.min((1.0 - beta) / (n - 1.0));
            (p, (1.0 - p) / (n - 1.0))
        }
    };
    set.iter().map(|&a| if a == major { p_major } else { p_rest }).collect()
}

fn sample_categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave `acc` a hair under 1; fall back to the last entry
    // with non-zero mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn generate_instance(world: &World, id: u64, split: Split) -> (Instance, Latent) {
    let spec = world.spec();
    let mut rng = stream_rng(spec.seed, Stream::Instance, id);
    let template_id = rng.random_range(0..spec.templates.len());
    let template = &spec.templates[template_id];

    let probs = answer_distribution(world, template_id, split);
    let answer = world.answer_set(template_id)[sample_categorical(&mut rng, &probs)];

    let [lo, hi] = spec.n_objects_range;
    let mut scene = Scene {
        values: spec
            .values_per_attribute
            .iter()
            .map(|&n| rng.random_range(0..n))
            .collect(),
        n_objects: rng.random_range(lo..=hi),
    };
    let q = template.queried_attribute;
    let n_values = spec.values_per_attribute[q];
    let mut probe = None;
    match template.qtype {
        QType::Other => {
            let name = &world.answer_vocab()[answer];
            scene.values[q] = (0..n_values)
                .find(|&v| &value_name(q, v) == name)
                .expect("other answers are values of the queried attribute");
        }
        QType::Num => {
            scene.n_objects = world.answer_vocab()[answer].parse().expect("num answers are counts");
        }
        QType::YesNo => {
            let p = rng.random_range(0..n_values);
            probe = Some(p);
            scene.values[q] = if answer == 0 {
                p
            } else {
                let v = rng.random_range(0..n_values - 1);
                if v >= p {
                    v + 1
                } else {
                    v
                }
            };
        }
    }
    debug_assert_eq!(world.answer(template_id, &scene, probe), answer);

    let code = world.object_code(&scene);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let mut data = Vec::with_capacity(spec.object_slots * spec.feature_dim);
    for r in 0..spec.object_slots {
        for c in &code {
            let base = if r < scene.n_objects { *c } else { 0.0 };
            data.push(base + noise.sample(&mut rng));
        }
    }

    let inst = Instance {
        id,
        template_id,
        qtype: template.qtype,
        tokens: world.tokens(template_id, probe),
        image: Image {
            rows: spec.object_slots,
            cols: spec.feature_dim,
            data,
        },
        votes: vec![(answer, spec.vote_count)],
        true_answer: answer,
    };
    (inst, Latent { scene, probe })
}

/// Empirical answer distribution per template.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PriorProfile {
    pub templates: BTreeMap<usize, BTreeMap<usize, f64>>,
}

impl PriorProfile {
    pub fn frequency(&self, template: usize, answer: usize) -> f64 {
        self.templates
            .get(&template)
            .and_then(|m| m.get(&answer))
            .copied()
            .unwrap_or(0.0)
    }
}

/// Per-template answer frequencies using the most-voted answer of each instance.
pub fn prior_profile<'a>(instances: impl IntoIterator<Item = &'a Instance>) -> PriorProfile {
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for inst in instances {
        *counts
            .entry(inst.template_id)
            .or_default()
            .entry(inst.primary_answer())
            .or_default() += 1;
    }
    let templates = counts
        .into_iter()
        .map(|(t, m)| {
            let total: usize = m.values().sum();
            let freqs = m.into_iter().map(|(a, c)| (a, c as f64 / total as f64)).collect();
            (t, freqs)
        })
        .collect();
    PriorProfile { templates }
}

/// Checks cross-references between instances and vocabularies.
pub(crate) fn check_instance(
    inst: &Instance,
    spec: &WorldSpec,
    n_answers: usize,
    vocab_size: usize,
) -> std::result::Result<(), String> {
    let template = spec
        .templates
        .get(inst.template_id)
        .ok_or_else(|| format!("template id {} out of range", inst.template_id))?;
    if template.qtype != inst.qtype {
        return Err(format!(
            "qtype {} does not match template {} ({})",
            inst.qtype, inst.template_id, template.qtype
        ));
    }
    if inst.tokens.len() != spec.pad_len {
        return Err(format!("{} tokens, expected {}", inst.tokens.len(), spec.pad_len));
    }
    if let Some(t) = inst.tokens.iter().find(|&&t| t as usize >= vocab_size) {
        return Err(format!("token id {t} out of vocabulary"));
    }
    if inst.tokens.iter().all(|&t| t == 0) {
        return Err("question has no tokens".into());
    }
    if inst.image.rows != spec.object_slots || inst.image.cols != spec.feature_dim {
        return Err("image shape does not match the spec".into());
    }
    if let Some(&(a, _)) = inst.votes.iter().find(|(a, _)| *a >= n_answers) {
        return Err(format!("answer id {a} out of vocabulary"));
    }
    let total: u32 = inst.votes.iter().map(|(_, c)| c).sum();
    if total != spec.vote_count {
        return Err(format!("votes sum to {total}, expected {}", spec.vote_count));
    }
    if inst.true_answer >= n_answers {
        return Err(format!("true answer {} out of vocabulary", inst.true_answer));
    }
    Ok(())
}

impl Dataset {
    /// Validates every instance; used after loading and by the trainer.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let mut seen = std::collections::HashSet::new();
        for inst in self.train.iter().chain(&self.test) {
            if !seen.insert(inst.id) {
                return Err(Error::invalid("dataset", format!("duplicate instance id {}", inst.id)));
            }
            check_instance(inst, &self.spec, self.n_answers(), self.vocab_size())
                .map_err(|e| Error::invalid("dataset", format!("record {}: {e}", inst.id)))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(beta: f64, shift: ShiftMode) -> WorldSpec {
        WorldSpec {
            train_size: 4000,
            test_size: 2000,
            bias_beta: beta,
            shift_mode: shift,
            ..WorldSpec::default()
        }
    }

    /// Frequency-count oracle: majority share per template, counted directly.
    fn majority_share(world: &World, instances: &[Instance], template: usize) -> (f64, usize) {
        let major = world.majority_answer(template);
        let mine: Vec<&Instance> = instances.iter().filter(|i| i.template_id == template).collect();
        let hits = mine.iter().filter(|i| i.true_answer == major).count();
        (hits as f64 / mine.len() as f64, mine.len())
    }

    #[test]
    fn full_bias_makes_every_train_answer_the_majority() {
        let g = generate_full(&small(1.0, ShiftMode::Inverted)).unwrap();
        for inst in &g.dataset.train {
            assert_eq!(inst.true_answer, g.world.majority_answer(inst.template_id));
        }
    }

    #[test]
    fn train_majority_frequency_tracks_beta() {
        let g = generate_full(&small(0.85, ShiftMode::Inverted)).unwrap();
        for t in 0..g.world.spec().templates.len() {
            let (share, m) = majority_share(&g.world, &g.dataset.train, t);
            assert!((share - 0.85).abs() <= 0.03, "template {t}: {share}");
            let band = 3.0 * (0.85f64 * 0.15 / m as f64).sqrt();
            assert!((share - 0.85).abs() <= band, "template {t}: {share} outside ±{band}");
        }
    }

    #[test]
    fn uniform_shift_flattens_other_answers() {
        let spec = WorldSpec {
            n_attributes: 1,
            values_per_attribute: vec![4],
            templates: vec![QuestionTemplate::standard(QType::Other, 0)],
            ..small(0.85, ShiftMode::Uniform)
        };
        let g = generate_full(&spec).unwrap();
        let profile = prior_profile(&g.dataset.test);
        for &a in g.world.answer_set(0) {
            let f = profile.frequency(0, a);
            assert!((f - 0.25).abs() <= 0.04, "answer {a}: {f}");
        }
    }

    #[test]
    fn inverted_shift_makes_majority_rarest() {
        let g = generate_full(&small(0.85, ShiftMode::Inverted)).unwrap();
        let profile = prior_profile(&g.dataset.test);
        for t in 0..g.world.spec().templates.len() {
            let major = g.world.majority_answer(t);
            let fm = profile.frequency(t, major);
            for &a in g.world.answer_set(t) {
                if a != major {
                    assert!(profile.frequency(t, a) > fm, "template {t}");
                }
            }
        }
    }

    #[test]
    fn profile_of_biased_split_matches_beta() {
        let g = generate_full(&small(0.9, ShiftMode::Inverted)).unwrap();
        let profile = prior_profile(&g.dataset.train);
        for (t, freqs) in &profile.templates {
            let sum: f64 = freqs.values().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            let f = profile.frequency(*t, g.world.majority_answer(*t));
            assert!((f - 0.9).abs() < 0.03, "template {t}: {f}");
        }
    }

    #[test]
    fn profile_of_single_instance() {
        let g = generate_full(&WorldSpec {
            train_size: 1,
            test_size: 0,
            ..WorldSpec::default()
        })
        .unwrap();
        let inst = &g.dataset.train[0];
        let p = prior_profile(&g.dataset.train);
        assert_eq!(p.frequency(inst.template_id, inst.true_answer), 1.0);
    }

    #[test]
    fn profiles_of_disjoint_templates_are_independent() {
        let g = generate_full(&small(0.85, ShiftMode::Inverted)).unwrap();
        let (a, b): (Vec<Instance>, Vec<Instance>) = g.dataset.train.iter().cloned().partition(|i| i.template_id == 0);
        let whole = prior_profile(&g.dataset.train);
        let pa = prior_profile(&a);
        let pb = prior_profile(&b);
        assert_eq!(whole.templates[&0], pa.templates[&0]);
        assert_eq!(whole.templates[&1], pb.templates[&1]);
        assert!(!pa.templates.contains_key(&1));
    }

    #[test]
    fn generation_is_deterministic() {
        let s = WorldSpec {
            train_size: 50,
            test_size: 20,
            ..WorldSpec::default()
        };
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let other = generate(&WorldSpec { seed: 1, ..s.clone() }).unwrap();
        assert_ne!(generate(&s).unwrap(), other);
    }

    #[test]
    fn test_answers_are_in_train_vocabulary() {
        let d = generate(&small(0.85, ShiftMode::Inverted)).unwrap();
        let train_answers: std::collections::BTreeSet<usize> = d.train.iter().map(Instance::primary_answer).collect();
        assert!(d.test.iter().all(|i| train_answers.contains(&i.primary_answer())));
        d.validate().unwrap();
    }

    #[test]
    fn primary_answer_ties_break_low() {
        let d = generate(&WorldSpec {
            train_size: 1,
            test_size: 0,
            ..WorldSpec::default()
        })
        .unwrap();
        let mut inst = d.train[0].clone();
        inst.votes = vec![(3, 5), (7, 5)];
        assert_eq!(inst.primary_answer(), 3);
        inst.votes = vec![(3, 4), (7, 6)];
        assert_eq!(inst.primary_answer(), 7);
    }
}
