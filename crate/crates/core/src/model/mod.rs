//! The base VQA network: question encoder, question-guided attention over
//! object features, elementwise fusion and an answer classifier.
//!
//! All functions here are batched. A batch is a list of questions and a
//! list of images of the same length; the irrelevant-pair path simply hands
//! in images that belong to other questions.

mod io;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use io::{load, load_str, save, save_string};

use crate::autodiff::{BatchNormMode, Graph, NodeId, ParamSet, Tensor};
use crate::data::{Dataset, Image, Instance};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionEncoder {
    Gru,
    MeanPool,
}

impl FromStr for QuestionEncoder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gru" => Ok(QuestionEncoder::Gru),
            "meanpool" => Ok(QuestionEncoder::MeanPool),
            _ => Err(format!("unknown question encoder `{s}`")),
        }
    }
}

impl fmt::Display for QuestionEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuestionEncoder::Gru => "gru",
            QuestionEncoder::MeanPool => "meanpool",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub question_encoder: QuestionEncoder,
    pub use_batchnorm: bool,
    pub n_answers: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            embed_dim: 16,
            hidden_dim: 32,
            question_encoder: QuestionEncoder::Gru,
            use_batchnorm: true,
            n_answers: 2,
            vocab_size: 1,
            feature_dim: 32,
            init_scale: 0.08,
            seed: 0,
        }
    }
}

impl ModelSpec {
    /// Copies vocabulary sizes and feature width from a dataset.
    pub fn fit_to(mut self, data: &Dataset) -> Self {
        self.n_answers = data.n_answers();
        self.vocab_size = data.vocab_size();
        self.feature_dim = data.spec.feature_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.embed_dim, self.hidden_dim, self.vocab_size, self.feature_dim];
        if dims.contains(&0) {
            return Err(Error::invalid("model spec", "all dimensions must be at least 1"));
        }
        if self.n_answers < 2 {
            return Err(Error::invalid("model spec", "n_answers must be at least 2"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::invalid("model spec", "init_scale must be finite and >= 0"));
        }
        Ok(())
    }

    /// Name and shape of every trainable tensor, in a fixed order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (e, h, a) = (self.embed_dim, self.hidden_dim, self.n_answers);
        let mut out: Vec<(String, Vec<usize>)> = vec![("embed".into(), vec![self.vocab_size, e])];
        let mut push = |name: &str, shape: Vec<usize>| out.push((name.to_string(), shape));
        match self.question_encoder {
            QuestionEncoder::MeanPool => {
                push("qenc.w", vec![e, h]);
                push("qenc.b", vec![h]);
            }
            QuestionEncoder::Gru => {
                for gate in ["z", "r", "n"] {
                    push(&format!("gru.w{gate}"), vec![e, h]);
                    push(&format!("gru.u{gate}"), vec![h, h]);
                    push(&format!("gru.b{gate}"), vec![h]);
                }
            }
        }
        push("att.obj.w", vec![self.feature_dim, h]);
        push("att.obj.b", vec![h]);
        push("att.q.w", vec![h, h]);
        push("att.q.b", vec![h]);
        push("att.score.w", vec![h, 1]);
        for part in ["q", "v", "hidden"] {
            push(&format!("fuse.{part}.w"), vec![h, h]);
            push(&format!("fuse.{part}.b"), vec![h]);
        }
        if self.use_batchnorm {
            push("bn.scale", vec![h]);
            push("bn.shift", vec![h]);
        }
        push("cls.w", vec![h, a]);
        push("cls.b", vec![a]);
        out
    }
}

pub const RUNNING_MEAN: &str = "bn.running_mean";
pub const RUNNING_VAR: &str = "bn.running_var";
/// Weight kept for the previous running statistics on each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Trainable weights plus non-trainable batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub spec: ModelSpec,
    pub weights: ParamSet,
    pub buffers: ParamSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

impl Params {
    /// Uniform weights in `[-init_scale, init_scale]`, zero biases, unit
    /// batch-norm scale and zero shift.
    pub fn init(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream_rng(spec.seed, Stream::Init, 0);
        let s = spec.init_scale;
        let mut weights = ParamSet::new();
        for (name, shape) in spec.layout() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name == "bn.scale" {
                vec![1.0; n]
            } else if s == 0.0 || name.ends_with(".b") || name.starts_with("gru.b") || name == "bn.shift" {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.random_range(-s..=s)).collect()
            };
            weights.insert(name, Tensor::new(shape, data)?);
        }
        let mut buffers = ParamSet::new();
        if spec.use_batchnorm {
            buffers.insert(RUNNING_MEAN, Tensor::zeros(&[spec.hidden_dim]));
            buffers.insert(RUNNING_VAR, Tensor::filled(&[spec.hidden_dim], 1.0));
        }
        Ok(Params {
            spec: spec.clone(),
            weights,
            buffers,
        })
    }

    pub fn with_weights(&self, weights: ParamSet) -> Params {
        Params {
            spec: self.spec.clone(),
            weights,
            buffers: self.buffers.clone(),
        }
    }

    pub fn bitwise_eq(&self, other: &Params) -> bool {
        self.spec == other.spec && self.weights.bitwise_eq(&other.weights) && self.buffers.bitwise_eq(&other.buffers)
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, batch_mean: &[f64], batch_var: &[f64], batch_size: usize) {
        let unbias = if batch_size > 1 {
            batch_size as f64 / (batch_size - 1) as f64
        } else {
            1.0
        };
        if let Some(m) = self.buffers.get_mut(RUNNING_MEAN) {
            for (r, b) in m.data_mut().iter_mut().zip(batch_mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
        if let Some(v) = self.buffers.get_mut(RUNNING_VAR) {
            for (r, b) in v.data_mut().iter_mut().zip(batch_var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b * unbias;
            }
        }
    }

    /// Errors unless every weight and buffer has the shape the spec implies.
    pub fn check_layout(&self) -> Result<()> {
        let expected = self.spec.layout();
        if expected.len() != self.weights.len() {
            return Err(Error::invalid(
                "params",
                format!("{} tensors, spec implies {}", self.weights.len(), expected.len()),
            ));
        }
        for (name, shape) in expected {
            match self.weights.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::invalid(
                        "params",
                        format!("`{name}` has shape {:?}, expected {shape:?}", t.shape()),
                    ))
                }
                None => return Err(Error::invalid("params", format!("missing `{name}`"))),
            }
        }
        if self.spec.use_batchnorm {
            for name in [RUNNING_MEAN, RUNNING_VAR] {
                if self.buffers.get(name).map(|t| t.shape()) != Some(&[self.spec.hidden_dim][..]) {
                    return Err(Error::invalid("params", format!("missing or misshapen `{name}`")));
                }
            }
        }
        Ok(())
    }
}

/// Parameters registered as leaves of one graph.
pub struct Bound<'p> {
    params: &'p Params,
    ids: HashMap<String, NodeId>,
}

impl<'p> Bound<'p> {
    pub fn new(g: &mut Graph, params: &'p Params) -> Self {
        let ids = params
            .weights
            .iter()
            .map(|(n, t)| (n.to_string(), g.param(n, t.clone())))
            .collect();
        Bound { params, ids }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.params.spec
    }

    fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("params", format!("missing `{name}`")))
    }

    /// `x @ W + b` with optional bias.
    fn affine(&self, g: &mut Graph, x: NodeId, w: &str, b: Option<&str>) -> Result<NodeId> {
        let y = g.matmul(x, self.id(w)?)?;
        match b {
            Some(b) => g.add(y, self.id(b)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[batch, n_answers]`
    pub logits: NodeId,
    /// `[batch, object_slots]`
    pub attention: NodeId,
    /// Train-mode batch-norm node, whose statistics feed the running estimates.
    pub batch_norm: Option<NodeId>,
}

fn check_tokens(spec: &ModelSpec, tokens: &[&[u32]]) -> Result<usize> {
    let len = tokens.first().map_or(0, |t| t.len());
    if tokens.is_empty() || len == 0 {
        return Err(Error::invalid("question batch", "empty batch or zero-length questions"));
    }
    for q in tokens {
        if q.len() != len {
            return Err(Error::invalid("question batch", "questions differ in padded length"));
        }
        if q.iter().all(|&t| t == 0) {
            return Err(Error::invalid("question", "empty question (all padding)"));
        }
        if let Some(&t) = q.iter().find(|&&t| t as usize >= spec.vocab_size) {
            return Err(Error::invalid(
                "question",
                format!("token id {t} outside vocabulary of {}", spec.vocab_size),
            ));
        }
    }
    Ok(len)
}

/// Encodes a batch of padded questions into `[batch, hidden_dim]`.
pub fn encode_questions(g: &mut Graph, bound: &Bound, tokens: &[&[u32]]) -> Result<NodeId> {
    let spec = bound.spec();
    let len = check_tokens(spec, tokens)?;
    let (b, e, h) = (tokens.len(), spec.embed_dim, spec.hidden_dim);
    let embed = bound.id("embed")?;
    match spec.question_encoder {
        QuestionEncoder::MeanPool => {
            let flat: Vec<usize> = tokens.iter().flat_map(|q| q.iter().map(|&t| t as usize)).collect();
            let mut mask = Vec::with_capacity(b * len * e);
            let mut inv_count = Vec::with_capacity(b * e);
            for q in tokens {
                for &t in q.iter() {
                    mask.extend(std::iter::repeat_n(f64::from(u8::from(t != 0)), e));
                }
                let n = q.iter().filter(|&&t| t != 0).count() as f64;
                inv_count.extend(std::iter::repeat_n(1.0 / n, e));
            }
            let rows = g.lookup(embed, flat)?;
            let mask = g.constant(Tensor::new(vec![b * len, e], mask)?);
            let masked = g.mul(rows, mask)?;
            let cube = g.reshape(masked, vec![b, len, e])?;
            let summed = g.sum(cube, 1)?;
            let inv = g.constant(Tensor::new(vec![b, e], inv_count)?);
            let pooled = g.mul(summed, inv)?;
            let proj = bound.affine(g, pooled, "qenc.w", Some("qenc.b"))?;
            g.tanh(proj)
        }
        QuestionEncoder::Gru => {
            let mut state = g.constant(Tensor::zeros(&[b, h]));
            for step in 0..len {
                let col: Vec<usize> = tokens.iter().map(|q| q[step] as usize).collect();
                if col.iter().all(|&t| t == 0) {
                    continue;
                }
                let x = g.lookup(embed, col.clone())?;
                let gate = |g: &mut Graph, name: &str, hidden: NodeId| -> Result<NodeId> {
                    let xw = bound.affine(g, x, &format!("gru.w{name}"), Some(&format!("gru.b{name}")))?;
                    let hu = bound.affine(g, hidden, &format!("gru.u{name}"), None)?;
                    g.add(xw, hu)
                };
                let z_pre = gate(g, "z", state)?;
                let z = g.sigmoid(z_pre)?;
                let r_pre = gate(g, "r", state)?;
                let r = g.sigmoid(r_pre)?;
                let rh = g.mul(r, state)?;
                let n_pre = gate(g, "n", rh)?;
                let cand = g.tanh(n_pre)?;
                // h' = n + z * (h - n)
                let diff = g.sub(state, cand)?;
                let keep = g.mul(z, diff)?;
                let next = g.add(cand, keep)?;
                if col.contains(&0) {
                    let m: Vec<f64> = col
                        .iter()
                        .flat_map(|&t| std::iter::repeat_n(f64::from(u8::from(t != 0)), h))
                        .collect();
                    let m = g.constant(Tensor::new(vec![b, h], m)?);
                    let delta = g.sub(next, state)?;
                    let masked = g.mul(m, delta)?;
                    state = g.add(state, masked)?;
                } else {
                    state = next;
                }
            }
            Ok(state)
        }
    }
}

/// Question-guided softmax attention over object rows.
///
/// Returns the attended visual vector `[batch, hidden_dim]` and the
/// attention weights `[batch, object_slots]`.
pub fn attend(g: &mut Graph, bound: &Bound, q_vec: NodeId, images: &[&Image]) -> Result<(NodeId, NodeId)> {
    let spec = bound.spec();
    let h = spec.hidden_dim;
    let b = images.len();
    let rows = images.first().map_or(0, |i| i.rows);
    if b == 0 || rows == 0 {
        return Err(Error::invalid("image batch", "no images or no object rows"));
    }
    if g.value(q_vec)?.shape() != [b, h] {
        return Err(Error::Shape {
            op: "attend",
            shapes: vec![g.value(q_vec)?.shape().to_vec(), vec![b, h]],
        });
    }
    let mut flat = Vec::with_capacity(b * rows * spec.feature_dim);
    for img in images {
        if img.rows != rows || img.cols != spec.feature_dim {
            return Err(Error::Shape {
                op: "attend",
                shapes: vec![vec![img.rows, img.cols], vec![rows, spec.feature_dim]],
            });
        }
        flat.extend_from_slice(&img.data);
    }
    let objects = g.constant(Tensor::new(vec![b * rows, spec.feature_dim], flat)?);
    let obj_pre = bound.affine(g, objects, "att.obj.w", Some("att.obj.b"))?;
    let obj = g.relu(obj_pre)?;
    let q_pre = bound.affine(g, q_vec, "att.q.w", Some("att.q.b"))?;
    let q_att = g.relu(q_pre)?;
    let repeat: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, rows)).collect();
    let q_rep = g.lookup(q_att, repeat)?;
    let joint = g.mul(obj, q_rep)?;
    let score = bound.affine(g, joint, "att.score.w", None)?;
    let score = g.reshape(score, vec![b, rows])?;
    let weights = g.softmax(score)?;

    let w_col = g.reshape(weights, vec![b * rows, 1])?;
    let w_wide = g.index_select(w_col, vec![0; h])?;
    let weighted = g.mul(w_wide, obj)?;
    let cube = g.reshape(weighted, vec![b, rows, h])?;
    let v = g.sum(cube, 1)?;
    Ok((v, weights))
}

/// Answer logits for question/image pairs.
pub fn forward_batch(
    g: &mut Graph,
    bound: &Bound,
    questions: &[&[u32]],
    images: &[&Image],
    mode: Mode,
) -> Result<ForwardOutput> {
    if questions.len() != images.len() {
        return Err(Error::invalid(
            "batch",
            format!("{} questions but {} images", questions.len(), images.len()),
        ));
    }
    let q = encode_questions(g, bound, questions)?;
    let (v, attention) = attend(g, bound, q, images)?;
    let qf = bound.affine(g, q, "fuse.q.w", Some("fuse.q.b"))?;
    let qf = g.tanh(qf)?;
    let vf = bound.affine(g, v, "fuse.v.w", Some("fuse.v.b"))?;
    let vf = g.tanh(vf)?;
    let joint = g.mul(qf, vf)?;
    let hidden = bound.affine(g, joint, "fuse.hidden.w", Some("fuse.hidden.b"))?;
    let mut hidden = g.relu(hidden)?;
    let mut batch_norm = None;
    if bound.spec().use_batchnorm {
        let bn_mode = match mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Inference => BatchNormMode::Inference {
                running_mean: bound.params.buffers.get(RUNNING_MEAN).expect("checked").data().to_vec(),
                running_var: bound.params.buffers.get(RUNNING_VAR).expect("checked").data().to_vec(),
            },
        };
        hidden = g.batch_norm(hidden, bound.id("bn.scale")?, bound.id("bn.shift")?, bn_mode)?;
        if mode == Mode::Train {
            batch_norm = Some(hidden);
        }
    }
    let logits = bound.affine(g, hidden, "cls.w", Some("cls.b"))?;
    Ok(ForwardOutput {
        logits,
        attention,
        batch_norm,
    })
}

/// Convenience wrapper: logits rows for a set of instances, inference mode.
pub fn predict_logits(params: &Params, instances: &[&Instance]) -> Result<Vec<Vec<f64>>> {
    predict_pairs(params, instances, instances)
}

/// Inference-mode logits where question `i` is shown image `images[i]`.
pub fn predict_pairs(params: &Params, questions: &[&Instance], images: &[&Instance]) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 256;
    if questions.len() != images.len() {
        return Err(Error::invalid(
            "batch",
            format!("{} questions but {} images", questions.len(), images.len()),
        ));
    }
    let mut out = Vec::with_capacity(questions.len());
    for (qs, is) in questions.chunks(CHUNK).zip(images.chunks(CHUNK)) {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, params);
        let tokens: Vec<&[u32]> = qs.iter().map(|i| i.tokens.as_slice()).collect();
        let imgs: Vec<&Image> = is.iter().map(|i| &i.image).collect();
        let fwd = forward_batch(&mut g, &bound, &tokens, &imgs, Mode::Inference)?;
        let a = params.spec.n_answers;
        out.extend(g.value(fwd.logits)?.data().chunks(a).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Single-instance forward in the given mode.
pub fn forward(params: &Params, instance: &Instance, mode: Mode) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params);
    let fwd = forward_batch(&mut g, &bound, &[&instance.tokens], &[&instance.image], mode)?;
    Ok(g.value(fwd.logits)?.data().to_vec())
}
