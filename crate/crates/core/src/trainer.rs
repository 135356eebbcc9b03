//! The per-task training loop: token augmentation, the trainable linear
//! classifier, hypersphere boundaries, and one Adam update per batch on the
//! weighted sum `gamma * L_margin + (1 - gamma) * L_aug`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::aks::{KnowledgeSpace, Promotion};
use crate::error::{OfclError, Result};
use crate::features::{self, Backbone, BackboneSpec};
use crate::geometry::{self, seeded_rng, Embedding};
use crate::ita::{Scope, TokenBank};
use crate::label::Label;
use crate::mob::{self, ClassTerm, Detection, Hypersphere, MarginConfig, Provenance, MIN_RADIUS};
use crate::optim::{Adam, AdamConfig, ParamId};
use crate::scalar::Scalar;

/// Lower bound kept on the learnable margin.
pub const MIN_MARGIN: f64 = 1e-3;

const STREAM_TOKENS: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItaConfig<T> {
    /// Tokens minted per task (`l`).
    pub tokens_per_task: usize,
    /// Rows per token (`L_p`).
    pub token_len: usize,
    /// Tokens appended per sample (`K`).
    pub top_k: usize,
    pub lambda_key: T,
}

impl<T: Scalar> Default for ItaConfig<T> {
    fn default() -> Self {
        Self {
            tokens_per_task: 25,
            token_len: 5,
            top_k: 5,
            lambda_key: T::lit(0.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig<T> {
    pub gamma: T,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig<T>,
    pub seed: u64,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            gamma: T::lit(0.5),
            epochs: 20,
            batch_size: 25,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= T::zero() && self.gamma <= T::one()) {
            return Err(OfclError::usage("gamma must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(OfclError::usage("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Linear softmax classifier over augmented features, one weight column
/// per registered class.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    in_dim: usize,
    classes: Vec<Label>,
    columns: Vec<Vec<T>>,
    bias: Vec<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(in_dim: usize) -> Self {
        Self {
            in_dim,
            classes: Vec::new(),
            columns: Vec::new(),
            bias: Vec::new(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn classes(&self) -> &[Label] {
        &self.classes
    }

    pub fn column(&self, index: usize) -> &[T] {
        &self.columns[index]
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn index_of(&self, label: Label) -> Option<usize> {
        self.classes.iter().position(|&l| l == label)
    }

    /// Appends a zero column for `label`, or returns its existing index.
    pub fn register(&mut self, label: Label) -> usize {
        if let Some(i) = self.index_of(label) {
            return i;
        }
        self.classes.push(label);
        self.columns.push(vec![T::zero(); self.in_dim]);
        self.bias.push(T::zero());
        self.classes.len() - 1
    }

    pub fn set_parameters(&mut self, columns: Vec<Vec<T>>, bias: Vec<T>) -> Result<()> {
        if columns.len() != self.classes.len()
            || bias.len() != self.classes.len()
            || columns.iter().any(|c| c.len() != self.in_dim)
        {
            return Err(OfclError::usage("classifier parameter shapes do not match"));
        }
        self.columns = columns;
        self.bias = bias;
        Ok(())
    }

    pub fn logits(&self, z: &[T]) -> Vec<T> {
        self.columns
            .iter()
            .zip(&self.bias)
            .map(|(w, &b)| geometry::dot(w, z) + b)
            .collect()
    }

    pub fn predict(&self, z: &[T]) -> Option<Label> {
        let logits = self.logits(z);
        let mut best: Option<(T, usize)> = None;
        for (i, &v) in logits.iter().enumerate() {
            if best.is_none_or(|(b, _)| v > b) {
                best = Some((v, i));
            }
        }
        best.map(|(_, i)| self.classes[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationLoss<T> {
    pub loss: T,
    pub grad_columns: Vec<Vec<T>>,
    pub grad_bias: Vec<T>,
    pub grad_inputs: Vec<Vec<T>>,
}

/// Mean softmax cross-entropy over the batch with exact gradients for the
/// weights, biases and the input features.
pub fn classification_loss<T: Scalar>(
    clf: &Classifier<T>,
    features: &[Vec<T>],
    labels: &[Label],
) -> Result<ClassificationLoss<T>> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(OfclError::usage(
            "classification loss needs equally many features and labels",
        ));
    }
    let nc = clf.classes.len();
    let b = T::from_count(features.len());
    let mut loss = T::zero();
    let mut grad_columns = vec![vec![T::zero(); clf.in_dim]; nc];
    let mut grad_bias = vec![T::zero(); nc];
    let mut grad_inputs = Vec::with_capacity(features.len());

    for (z, &label) in features.iter().zip(labels) {
        if z.len() != clf.in_dim {
            return Err(OfclError::usage(format!(
                "feature length {} != classifier input {}",
                z.len(),
                clf.in_dim
            )));
        }
        let target = clf.index_of(label).ok_or_else(|| {
            OfclError::usage(format!(
                "label {label} is not registered with the classifier"
            ))
        })?;
        let logits = clf.logits(z);
        let shift = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = logits.iter().map(|&v| (v - shift).exp()).collect();
        let total: T = exps.iter().copied().sum();
        loss += shift + total.ln() - logits[target];

        let mut gz = vec![T::zero(); clf.in_dim];
        for c in 0..nc {
            let mut delta = exps[c] / total;
            if c == target {
                delta -= T::one();
            }
            let delta = delta / b;
            grad_bias[c] += delta;
            for ((gw, g), (&zi, &wi)) in grad_columns[c]
                .iter_mut()
                .zip(gz.iter_mut())
                .zip(z.iter().zip(&clf.columns[c]))
            {
                *gw += delta * zi;
                *g += delta * wi;
            }
        }
        grad_inputs.push(gz);
    }
    let loss = loss / b;
    if !loss.is_finite() {
        return Err(OfclError::numerical("non-finite classification loss"));
    }
    Ok(ClassificationLoss {
        loss,
        grad_columns,
        grad_bias,
        grad_inputs,
    })
}

/// Learnable hyperspheres of the task being trained.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskState<T> {
    pub task: usize,
    pub classes: Vec<Label>,
    pub centroids: Vec<Embedding<T>>,
    pub radii: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses<T> {
    pub margin: T,
    pub classification: T,
    pub key_pull: T,
    pub aug: T,
    pub total: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss<T> {
    pub task: usize,
    pub epoch: usize,
    pub margin: T,
    pub aug: T,
    pub total: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome<T> {
    pub trace: Vec<EpochLoss<T>>,
    pub promotions: Vec<Promotion>,
}

/// Everything that persists across tasks: frozen backbone, token bank,
/// classifier, knowledge space, the shared margin and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner<T> {
    backbone: Backbone<T>,
    bank: TokenBank<T>,
    classifier: Classifier<T>,
    space: KnowledgeSpace<T>,
    margin_cfg: MarginConfig<T>,
    ita: ItaConfig<T>,
    train: TrainConfig<T>,
    optimizer: Adam<T>,
    current: Option<TaskState<T>>,
}

impl<T: Scalar> Learner<T> {
    pub fn new(
        backbone: BackboneSpec,
        ita: ItaConfig<T>,
        margin: MarginConfig<T>,
        train: TrainConfig<T>,
    ) -> Result<Self> {
        margin.validate()?;
        train.validate()?;
        if ita.top_k == 0 || ita.top_k > ita.tokens_per_task {
            return Err(OfclError::usage("top_k must lie in 1..=tokens_per_task"));
        }
        let backbone = Backbone::new(backbone)?;
        let dim = backbone.output_dim();
        Ok(Self {
            bank: TokenBank::new(dim, ita.token_len)?,
            classifier: Classifier::new(dim * (1 + ita.top_k)),
            space: KnowledgeSpace::new(),
            optimizer: Adam::new(train.adam),
            current: None,
            backbone,
            margin_cfg: margin,
            ita,
            train,
        })
    }

    pub fn backbone(&self) -> &Backbone<T> {
        &self.backbone
    }

    pub fn bank(&self) -> &TokenBank<T> {
        &self.bank
    }

    pub fn classifier(&self) -> &Classifier<T> {
        &self.classifier
    }

    pub fn space(&self) -> &KnowledgeSpace<T> {
        &self.space
    }

    pub fn space_mut(&mut self) -> &mut KnowledgeSpace<T> {
        &mut self.space
    }

    pub fn current(&self) -> Option<&TaskState<T>> {
        self.current.as_ref()
    }

    pub fn current_mut(&mut self) -> Option<&mut TaskState<T>> {
        self.current.as_mut()
    }

    pub fn train_config(&self) -> &TrainConfig<T> {
        &self.train
    }

    pub fn set_gamma(&mut self, gamma: T) -> Result<()> {
        let next = TrainConfig {
            gamma,
            ..self.train
        };
        next.validate()?;
        self.train = next;
        Ok(())
    }

    /// Margin configuration carrying the current learned margin.
    pub fn margin_config(&self) -> MarginConfig<T> {
        self.margin_cfg
    }

    pub fn embed(&self, raw: &[T]) -> Result<Embedding<T>> {
        self.backbone.extract(raw)
    }

    /// Mints the task's tokens, registers its classes, and initialises one
    /// centroid (class mean) and radius (quantile rule) per class.
    pub fn begin_task(&mut self, task: usize, samples: &[(Embedding<T>, Label)]) -> Result<()> {
        if self.current.is_some() {
            return Err(OfclError::usage("previous task is still open"));
        }
        if samples.is_empty() {
            return Err(OfclError::usage(format!(
                "task {task} has no training samples"
            )));
        }
        let mut by_class: BTreeMap<Label, Vec<&[T]>> = BTreeMap::new();
        for (h, label) in samples {
            if label.is_pseudo() {
                return Err(OfclError::usage("training labels must be real classes"));
            }
            by_class.entry(*label).or_default().push(h.as_slice());
        }
        if let Some(l) = by_class.keys().find(|l| self.space.sphere(**l).is_some()) {
            return Err(OfclError::usage(format!("class {l} was already learned")));
        }

        let mut rng = seeded_rng(self.train.seed, &[STREAM_TOKENS, task as u64]);
        self.bank
            .init_task_tokens(task, self.ita.tokens_per_task, &mut rng)?;

        let mut classes = Vec::with_capacity(by_class.len());
        let mut centroids = Vec::with_capacity(by_class.len());
        let mut radii = Vec::with_capacity(by_class.len());
        for (&label, positives) in &by_class {
            let centroid = mob::compute_centroid(positives)?;
            let negatives: Vec<&[T]> = samples
                .iter()
                .filter(|(_, l)| *l != label)
                .map(|(h, _)| h.as_slice())
                .collect();
            let radius = if negatives.is_empty() {
                mob::fallback_radius(&centroid, positives)?
            } else {
                mob::init_radius(&centroid, &negatives, &self.margin_cfg)?
            };
            self.classifier.register(label);
            classes.push(label);
            centroids.push(centroid);
            radii.push(radius);
        }
        self.current = Some(TaskState {
            task,
            classes,
            centroids,
            radii,
        });
        Ok(())
    }

    /// Loss evaluation and one optimizer update on `batch`. On a non-finite
    /// loss or update every parameter and moment is left as before the call.
    pub fn combined_step(&mut self, batch: &[(&[T], Label)]) -> Result<StepLosses<T>> {
        let state = self
            .current
            .as_ref()
            .ok_or_else(|| OfclError::usage("combined_step before begin_task"))?;
        if batch.is_empty() {
            return Err(OfclError::usage("empty batch"));
        }
        let task = state.task;
        let k = self.ita.top_k;
        let dim = self.backbone.output_dim();
        let gamma = self.train.gamma;
        let aug_w = T::one() - gamma;
        let bsz = T::from_count(batch.len());

        // token lookup and augmentation
        let mut selections = Vec::with_capacity(batch.len());
        let mut inputs = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for &(h, label) in batch {
            let sel = self.bank.select_tokens(h, k, Scope::Task(task))?;
            let toks = sel
                .iter()
                .map(|&i| self.bank.token(i))
                .collect::<Result<Vec<_>>>()?;
            inputs.push(features::augmented_feature(h, &toks, k)?);
            labels.push(label);
            selections.push(sel);
        }

        let cls = classification_loss(&self.classifier, &inputs, &labels)?;

        let mut key_pull = T::zero();
        let mut key_grads: BTreeMap<usize, Vec<T>> = BTreeMap::new();
        let mut value_grads: BTreeMap<usize, Vec<T>> = BTreeMap::new();
        let row_scale = aug_w / T::from_count(self.ita.token_len);
        for (b, (&(h, _), sel)) in batch.iter().zip(&selections).enumerate() {
            let kp = self.bank.key_pull_loss(h, sel, self.ita.lambda_key)?;
            key_pull += kp.loss / bsz;
            for (slot, (&idx, g)) in sel.iter().zip(kp.key_grads).enumerate() {
                let acc = key_grads.entry(idx).or_insert_with(|| vec![T::zero(); dim]);
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += aug_w * v / bsz;
                }
                let pooled_grad = &cls.grad_inputs[b][dim * (1 + slot)..dim * (2 + slot)];
                let acc = value_grads
                    .entry(idx)
                    .or_insert_with(|| vec![T::zero(); dim * self.ita.token_len]);
                for row in acc.chunks_exact_mut(dim) {
                    for (a, &g) in row.iter_mut().zip(pooled_grad) {
                        *a += row_scale * g;
                    }
                }
            }
        }

        // margin loss over the classes present in the batch
        let class_index: BTreeMap<Label, usize> = state
            .classes
            .iter()
            .enumerate()
            .map(|(i, &l)| (l, i))
            .collect();
        let mut present: Vec<usize> = Vec::new();
        for (_, label) in batch {
            let i = *class_index.get(label).ok_or_else(|| {
                OfclError::usage(format!("label {label} is not part of task {task}"))
            })?;
            if !present.contains(&i) {
                present.push(i);
            }
        }
        present.sort_unstable();
        let mut cfg = self.margin_cfg;
        let terms: Vec<ClassTerm<'_, T>> = present
            .iter()
            .map(|&i| {
                let label = state.classes[i];
                ClassTerm {
                    label,
                    centroid: state.centroids[i].as_slice(),
                    radius: state.radii[i],
                    positives: batch
                        .iter()
                        .filter(|(_, l)| *l == label)
                        .map(|(h, _)| *h)
                        .collect(),
                    negatives: batch
                        .iter()
                        .filter(|(_, l)| *l != label)
                        .map(|(h, _)| *h)
                        .collect(),
                }
            })
            .collect();
        let margin = mob::margin_loss(&terms, &cfg)?;

        let aug = cls.loss + key_pull;
        let total = gamma * margin.loss + aug_w * aug;
        if !total.is_finite() {
            return Err(OfclError::numerical(format!(
                "non-finite total loss in task {task}"
            )));
        }

        let snapshot = (
            self.bank.clone(),
            self.classifier.clone(),
            self.current.clone(),
            self.margin_cfg,
            self.optimizer.clone(),
        );
        let applied = self.apply_updates(
            &present,
            &margin,
            &cls,
            &key_grads,
            &value_grads,
            &selections,
            &mut cfg,
        );
        match applied {
            Ok(()) => {
                self.margin_cfg = cfg;
                Ok(StepLosses {
                    margin: margin.loss,
                    classification: cls.loss,
                    key_pull,
                    aug,
                    total,
                })
            }
            Err(e) => {
                (
                    self.bank,
                    self.classifier,
                    self.current,
                    self.margin_cfg,
                    self.optimizer,
                ) = snapshot;
                Err(e)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_updates(
        &mut self,
        present: &[usize],
        margin: &mob::MarginLoss<T>,
        cls: &ClassificationLoss<T>,
        key_grads: &BTreeMap<usize, Vec<T>>,
        value_grads: &BTreeMap<usize, Vec<T>>,
        selections: &[Vec<usize>],
        cfg: &mut MarginConfig<T>,
    ) -> Result<()> {
        let gamma = self.train.gamma;
        let aug_w = T::one() - gamma;
        for sel in selections {
            self.bank.record_selection(sel)?;
        }

        let state = self.current.as_mut().expect("checked by caller");
        for (slot, &i) in present.iter().enumerate() {
            let label = state.classes[i];
            let g: Vec<T> = margin.centroid_grads[slot]
                .iter()
                .map(|&v| gamma * v)
                .collect();
            let c = state.centroids[i].as_mut_slice();
            self.optimizer.step(ParamId::Centroid(label), c, &g)?;
            let n = geometry::norm(c);
            if n > T::one() {
                c.iter_mut().for_each(|v| *v /= n);
            }
            let mut r = [state.radii[i]];
            self.optimizer.step(
                ParamId::Radius(label),
                &mut r,
                &[gamma * margin.radius_grads[slot]],
            )?;
            state.radii[i] = r[0].max(T::lit(MIN_RADIUS));
            if !state.centroids[i].is_finite() || !state.radii[i].is_finite() {
                return Err(OfclError::numerical(format!(
                    "non-finite hypersphere for class {label} after update"
                )));
            }
        }
        let mut m = [cfg.m];
        self.optimizer
            .step(ParamId::Margin, &mut m, &[gamma * margin.margin_grad])?;
        cfg.m = m[0].max(T::lit(MIN_MARGIN));
        if !cfg.m.is_finite() {
            return Err(OfclError::numerical("non-finite margin after update"));
        }

        for (&idx, g) in key_grads {
            let tok = self.bank.token_mut(idx)?;
            self.optimizer
                .step(ParamId::TokenKey(idx), tok.key.as_mut_slice(), g)?;
            if !tok.key.is_finite() {
                return Err(OfclError::numerical(format!(
                    "non-finite key for token {idx}"
                )));
            }
        }
        for (&idx, g) in value_grads {
            let tok = self.bank.token_mut(idx)?;
            self.optimizer
                .step(ParamId::TokenValues(idx), &mut tok.values, g)?;
            if tok.values.iter().any(|v| !v.is_finite()) {
                return Err(OfclError::numerical(format!(
                    "non-finite values for token {idx}"
                )));
            }
        }

        let mut columns = self.classifier.columns.clone();
        let mut bias = self.classifier.bias.clone();
        for (c, label) in self.classifier.classes.clone().into_iter().enumerate() {
            let g: Vec<T> = cls.grad_columns[c].iter().map(|&v| aug_w * v).collect();
            self.optimizer
                .step(ParamId::ClassifierColumn(label), &mut columns[c], &g)?;
            self.optimizer.step(
                ParamId::ClassifierBias(label),
                std::slice::from_mut(&mut bias[c]),
                &[aug_w * cls.grad_bias[c]],
            )?;
        }
        if columns
            .iter()
            .flatten()
            .chain(&bias)
            .any(|v| !v.is_finite())
        {
            return Err(OfclError::numerical("non-finite classifier after update"));
        }
        self.classifier.columns = columns;
        self.classifier.bias = bias;
        Ok(())
    }

    /// Freezes the task's tokens and hands its hyperspheres to the knowledge
    /// space, promoting any pseudo spheres they overlap.
    pub fn finish_task(&mut self) -> Result<Vec<Promotion>> {
        let state = self
            .current
            .take()
            .ok_or_else(|| OfclError::usage("finish_task without an open task"))?;
        let spheres: Vec<Hypersphere<T>> = state
            .classes
            .iter()
            .zip(state.centroids)
            .zip(state.radii)
            .map(|((&label, centroid), radius)| Hypersphere {
                label,
                centroid,
                radius,
                task_of_origin: state.task,
                provenance: Provenance::Known,
            })
            .collect();
        self.bank.close_task(state.task);
        self.space.promote(spheres, state.task)
    }

    /// Runs the whole training procedure for one task on raw samples.
    pub fn train_task(&mut self, task: usize, train: &[(Vec<T>, Label)]) -> Result<TaskOutcome<T>> {
        let embedded = train
            .iter()
            .map(|(x, l)| self.embed(x).map(|h| (h, *l)))
            .collect::<Result<Vec<_>>>()?;
        self.begin_task(task, &embedded)?;

        let mut order: Vec<usize> = (0..embedded.len()).collect();
        let mut trace = Vec::with_capacity(self.train.epochs);
        for epoch in 0..self.train.epochs {
            let mut rng = seeded_rng(
                self.train.seed,
                &[STREAM_SHUFFLE, task as u64, epoch as u64],
            );
            order.shuffle(&mut rng);
            let (mut margin, mut aug, mut total) = (T::zero(), T::zero(), T::zero());
            let mut batches = 0usize;
            for chunk in order.chunks(self.train.batch_size) {
                let batch: Vec<(&[T], Label)> = chunk
                    .iter()
                    .map(|&i| (embedded[i].0.as_slice(), embedded[i].1))
                    .collect();
                let step = self.combined_step(&batch).map_err(|e| match e {
                    OfclError::Numerical(m) => {
                        OfclError::Numerical(format!("task {task} epoch {epoch}: {m}"))
                    }
                    other => other,
                })?;
                margin += step.margin;
                aug += step.aug;
                total += step.total;
                batches += 1;
            }
            let nb = T::from_count(batches);
            trace.push(EpochLoss {
                task,
                epoch,
                margin: margin / nb,
                aug: aug / nb,
                total: total / nb,
            });
        }
        let promotions = self.finish_task()?;
        Ok(TaskOutcome { trace, promotions })
    }

    /// Open-world decision over every stored sphere.
    pub fn classify(&self, h: &[T]) -> Result<Detection<T>> {
        self.space.classify(h)
    }

    /// Open-detection distance to the known spheres only.
    pub fn known_detection(&self, h: &[T]) -> Result<Detection<T>> {
        let known: Vec<Hypersphere<T>> = self.space.known().cloned().collect();
        mob::detect(&known, h)
    }

    /// Classifier prediction with tokens looked up across the whole bank;
    /// frequencies are not updated.
    pub fn classifier_predict(&self, h: &[T]) -> Result<Option<Label>> {
        let sel = self.bank.select_tokens(h, self.ita.top_k, Scope::All)?;
        let toks = sel
            .iter()
            .map(|&i| self.bank.token(i))
            .collect::<Result<Vec<_>>>()?;
        let z = features::augmented_feature(h, &toks, self.ita.top_k)?;
        Ok(self.classifier.predict(&z))
    }
}
