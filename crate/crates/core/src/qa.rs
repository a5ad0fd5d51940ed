//! Multiple-choice question answering over encoded scene graphs.
//!
//! Questions are token sequences embedded with a learned table and passed
//! through one self-attention block. Candidate answers are encoded as
//! `MLP(mean(embed(question ‖ answer)))`. Question tokens attend over the
//! graph encoding and are mean-pooled into one vector whose inner products
//! with the candidate encodings are the answer logits. Training uses a
//! cross-entropy over every candidate of the batch.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{EncoderConfig, GraphEncoder, MultiHeadAttention, NodeGeometry};
use crate::compactor::EncoderInput;
use crate::error::{Error, Result};
use crate::numcore::{
    init_uniform, read_checkpoint, write_checkpoint, Activation, Adam, AdamConfig, CheckpointHeader, Mlp, ParamId,
    ParamStore, Tape, Tensor, Var,
};

pub type Token = u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaInstance {
    pub video_id: String,
    pub question: Vec<Token>,
    pub candidates: Vec<Vec<Token>>,
    #[serde(rename = "gt")]
    pub gt_index: usize,
}

impl QaInstance {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.question.is_empty() {
            return Err(Error::validation(format!("{}: empty question", self.video_id)));
        }
        if self.candidates.len() < 2 {
            return Err(Error::validation(format!("{}: fewer than two candidates", self.video_id)));
        }
        if self.gt_index >= self.candidates.len() {
            return Err(Error::validation(format!("{}: gt index out of range", self.video_id)));
        }
        let tokens = self.question.iter().chain(self.candidates.iter().flatten());
        if let Some(bad) = tokens.clone().find(|t| **t as usize >= vocab_size) {
            return Err(Error::validation(format!(
                "{}: token {bad} outside vocabulary of {vocab_size}",
                self.video_id
            )));
        }
        if self.candidates.iter().any(Vec::is_empty) {
            return Err(Error::validation(format!("{}: empty candidate", self.video_id)));
        }
        Ok(())
    }

    pub fn gt_tokens(&self) -> &[Token] {
        &self.candidates[self.gt_index]
    }
}

pub fn load_qa(path: impl AsRef<Path>) -> Result<Vec<QaInstance>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn save_qa(instances: &[QaInstance], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Embedding table, question self-attention and the answer encoder.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    /// `r × vocab`; column `t` embeds token `t`.
    pub embedding: ParamId,
    pub self_attention: MultiHeadAttention,
    pub answer_mlp: Mlp,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, vocab: usize, latent: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let embedding = store.add("text.embedding", init_uniform(rng, latent, vocab, latent));
        let self_attention = MultiHeadAttention::new(store, "text.self_attention", latent, heads, rng);
        let answer_mlp = Mlp::new(store, "text.answer_mlp", &[latent, latent], Activation::Identity, rng)?;
        Ok(TextEncoder {
            embedding,
            self_attention,
            answer_mlp,
        })
    }

    fn embed(&self, tape: &mut Tape, store: &ParamStore, tokens: &[Token]) -> Result<Var> {
        let vocab = store.get(self.embedding).cols();
        if tokens.is_empty() {
            return Err(Error::validation("empty token sequence"));
        }
        if let Some(bad) = tokens.iter().find(|t| **t as usize >= vocab) {
            return Err(Error::validation(format!("unknown token id {bad}")));
        }
        let table = tape.param(store, self.embedding);
        let idx: Vec<usize> = tokens.iter().map(|t| *t as usize).collect();
        tape.select_cols(table, &idx)
    }

    /// `r × len`: embeddings after one self-attention block (no positions).
    pub fn encode_question(&self, tape: &mut Tape, store: &ParamStore, tokens: &[Token]) -> Result<Var> {
        let e = self.embed(tape, store, tokens)?;
        self.self_attention.attend(tape, store, e, e)
    }

    /// `r × ℓ`: one column per candidate, each `MLP(mean(embed(question ‖ answer)))`.
    pub fn encode_candidates(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        question: &[Token],
        candidates: &[Vec<Token>],
    ) -> Result<Var> {
        let mut cols = Vec::with_capacity(candidates.len());
        for cand in candidates {
            let tokens: Vec<Token> = question.iter().chain(cand).copied().collect();
            let e = self.embed(tape, store, &tokens)?;
            cols.push(tape.mean_cols(e)?);
        }
        let pooled = tape.concat_cols(&cols)?;
        self.answer_mlp.forward(tape, store, pooled)
    }
}

/// Cross-attention of question tokens over graph nodes, mean-pooled to `r × 1`.
pub fn condition_on_question(
    tape: &mut Tape,
    store: &ParamStore,
    graph_feats: Var,
    q_feats: Var,
    cross: &MultiHeadAttention,
) -> Result<Var> {
    let (g, q) = (tape.value(graph_feats), tape.value(q_feats));
    if g.rows() != q.rows() {
        return Err(Error::shape(format!(
            "graph width {} vs question width {}",
            g.rows(),
            q.rows()
        )));
    }
    let attended = cross.attend(tape, store, q_feats, graph_feats)?;
    tape.mean_cols(attended)
}

/// `1 × L` logits `fqᵀ · answers`.
pub fn score_answers(tape: &mut Tape, fq: Var, answers: Var) -> Result<Var> {
    let (f, a) = (tape.value(fq), tape.value(answers));
    if f.cols() != 1 || f.rows() != a.rows() {
        return Err(Error::shape(format!(
            "question feature {:?} vs answers {:?}",
            f.shape(),
            a.shape()
        )));
    }
    let ft = tape.transpose(fq);
    tape.matmul(ft, answers)
}

/// Candidates of the whole batch that carry the same tokens as instance
/// `i`'s ground truth (other than the ground truth itself) are masked out.
pub fn in_batch_mask(batch: &[&QaInstance], i: usize) -> (usize, Vec<bool>) {
    let gt = batch[i].gt_tokens();
    let mut target = 0;
    let mut mask = Vec::new();
    for (j, inst) in batch.iter().enumerate() {
        if j == i {
            target = mask.len() + inst.gt_index;
        }
        for (c, cand) in inst.candidates.iter().enumerate() {
            let own_gt = j == i && c == inst.gt_index;
            mask.push(own_gt || cand.as_slice() != gt);
        }
    }
    (target, mask)
}

/// Mean over the batch of the cross-entropy of each instance's question
/// feature against all `b × ℓ` candidate encodings.
pub fn augmented_loss(tape: &mut Tape, batch: &[&QaInstance], fqs: &[Var], answer_sets: &[Var]) -> Result<Var> {
    if batch.is_empty() || batch.len() != fqs.len() || batch.len() != answer_sets.len() {
        return Err(Error::shape("batch, features and answer sets must align and be nonempty"));
    }
    let all = if answer_sets.len() == 1 {
        answer_sets[0]
    } else {
        tape.concat_cols(answer_sets)?
    };
    let mut losses = Vec::with_capacity(batch.len());
    for (i, fq) in fqs.iter().enumerate() {
        let logits = score_answers(tape, *fq, all)?;
        let (target, mask) = in_batch_mask(batch, i);
        losses.push(tape.cross_entropy(logits, target, &mask)?);
    }
    if losses.len() == 1 {
        return Ok(losses[0]);
    }
    let stacked = tape.concat_cols(&losses)?;
    let mean = tape.mean_cols(stacked)?;
    Ok(mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    pub seed: u64,
}

/// Graph encoder, text encoder and cross-attention with their parameters.
#[derive(Clone, Debug)]
pub struct QaModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: GraphEncoder,
    pub text: TextEncoder,
    pub cross: MultiHeadAttention,
    pub step: u64,
}

/// An encoder input with its kernel weights precomputed.
#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub input: EncoderInput,
    pub level_weights: Vec<Tensor>,
}

impl PreparedVideo {
    pub fn new(input: EncoderInput, config: &EncoderConfig) -> Result<Self> {
        let level_weights = NodeGeometry::from_input(&input).level_weights(&config.kernel)?;
        Ok(PreparedVideo { input, level_weights })
    }
}

/// Videos keyed by id plus the questions asked about them.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub videos: HashMap<String, PreparedVideo>,
    pub instances: Vec<QaInstance>,
}

impl Dataset {
    pub fn new(
        inputs: impl IntoIterator<Item = EncoderInput>,
        instances: Vec<QaInstance>,
        config: &ModelConfig,
    ) -> Result<Self> {
        let mut videos = HashMap::new();
        for input in inputs {
            let id = input.video_id.clone();
            videos.insert(id, PreparedVideo::new(input, &config.encoder)?);
        }
        for inst in &instances {
            inst.validate(config.vocab_size)?;
            if !videos.contains_key(&inst.video_id) {
                return Err(Error::validation(format!("question about unknown video {}", inst.video_id)));
            }
        }
        Ok(Dataset { videos, instances })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

impl QaModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.vocab_size == 0 {
            return Err(Error::validation("vocabulary must be nonempty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = GraphEncoder::new(config.encoder.clone(), &mut store, &mut rng)?;
        let kc = &config.encoder.kernel;
        let text = TextEncoder::new(&mut store, config.vocab_size, kc.latent_dim, kc.heads, &mut rng)?;
        let cross = MultiHeadAttention::new(&mut store, "cross_attention", kc.latent_dim, kc.heads, &mut rng);
        Ok(QaModel {
            config,
            store,
            encoder,
            text,
            cross,
            step: 0,
        })
    }

    /// Encodes the video graph once per tape.
    fn graph_features(
        &self,
        tape: &mut Tape,
        video: &PreparedVideo,
        cache: &mut HashMap<String, Var>,
    ) -> Result<Var> {
        if let Some(v) = cache.get(&video.input.video_id) {
            return Ok(*v);
        }
        let v = self
            .encoder
            .encode(tape, &self.store, &video.input, Some(&video.level_weights))?;
        cache.insert(video.input.video_id.clone(), v);
        Ok(v)
    }

    /// Question-conditioned graph feature `r × 1`.
    pub fn question_feature(
        &self,
        tape: &mut Tape,
        video: &PreparedVideo,
        inst: &QaInstance,
        cache: &mut HashMap<String, Var>,
    ) -> Result<Var> {
        let g = self.graph_features(tape, video, cache)?;
        let q = self.text.encode_question(tape, &self.store, &inst.question)?;
        condition_on_question(tape, &self.store, g, q, &self.cross)
    }

    /// Logits over the instance's own candidates.
    pub fn logits(&self, video: &PreparedVideo, inst: &QaInstance) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut cache = HashMap::new();
        let fq = self.question_feature(&mut tape, video, inst, &mut cache)?;
        let answers = self
            .text
            .encode_candidates(&mut tape, &self.store, &inst.question, &inst.candidates)?;
        let logits = score_answers(&mut tape, fq, answers)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Records the augmented loss of a batch on `tape`.
    pub fn batch_loss(&self, tape: &mut Tape, data: &Dataset, batch: &[&QaInstance]) -> Result<Var> {
        let mut cache = HashMap::new();
        let mut fqs = Vec::with_capacity(batch.len());
        let mut answers = Vec::with_capacity(batch.len());
        for inst in batch {
            let video = data
                .videos
                .get(&inst.video_id)
                .ok_or_else(|| Error::validation(format!("unknown video {}", inst.video_id)))?;
            fqs.push(self.question_feature(tape, video, inst, &mut cache)?);
            answers.push(
                self.text
                    .encode_candidates(tape, &self.store, &inst.question, &inst.candidates)?,
            );
        }
        augmented_loss(tape, batch, &fqs, &answers)
    }

    fn header(&self) -> Result<CheckpointHeader> {
        Ok(CheckpointHeader::new(
            serde_json::to_value(&self.config)?,
            self.config.seed,
            self.step,
            &self.store,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(path, &self.header()?, &self.store)
    }

    /// Rebuilds the architecture from the stored config and loads the values.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, stored) = read_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(header.model.clone())?;
        let mut model = QaModel::new(config)?;
        if model.store.len() != stored.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model expects {}",
                stored.len(),
                model.store.len()
            )));
        }
        for ((_, name, want), (_, got_name, got)) in model.store.iter().zip(stored.iter()) {
            if name != got_name || want.shape() != got.shape() {
                return Err(Error::Format(format!("checkpoint tensor {got_name} does not match {name}")));
            }
        }
        model.store.set_flat_values(&stored.flat_values())?;
        model.step = header.step;
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 16,
            epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub mean_rank: f64,
    pub count: usize,
}

/// 1-based rank of the ground truth; ties go to the lower candidate index.
pub fn rank_of(logits: &[f64], gt: usize) -> usize {
    let g = logits[gt];
    1 + logits
        .iter()
        .enumerate()
        .filter(|(j, v)| **v > g || (**v == g && *j < gt))
        .count()
}

/// Accuracy and mean rank from per-instance logits.
pub fn metrics_from_logits<'a>(items: impl IntoIterator<Item = (&'a [f64], usize)>) -> EvalMetrics {
    let (mut n, mut hits, mut ranks) = (0usize, 0usize, 0usize);
    for (logits, gt) in items {
        let r = rank_of(logits, gt);
        n += 1;
        ranks += r;
        hits += usize::from(r == 1);
    }
    if n == 0 {
        return EvalMetrics {
            accuracy: 0.0,
            mean_rank: 0.0,
            count: 0,
        };
    }
    EvalMetrics {
        accuracy: hits as f64 / n as f64,
        mean_rank: ranks as f64 / n as f64,
        count: n,
    }
}

pub fn evaluate(model: &QaModel, data: &Dataset) -> Result<EvalMetrics> {
    let logits = data
        .instances
        .iter()
        .map(|inst| {
            let video = data
                .videos
                .get(&inst.video_id)
                .ok_or_else(|| Error::validation(format!("unknown video {}", inst.video_id)))?;
            model.logits(video, inst)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(metrics_from_logits(
        logits.iter().zip(&data.instances).map(|(l, i)| (l.as_slice(), i.gt_index)),
    ))
}

/// Parallel variant of [`evaluate`]; results do not depend on thread count.
pub fn evaluate_parallel(model: &QaModel, data: &Dataset, jobs: usize) -> Result<EvalMetrics> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    let logits = pool.install(|| {
        data.instances
            .par_iter()
            .map(|inst| {
                let video = data
                    .videos
                    .get(&inst.video_id)
                    .ok_or_else(|| Error::validation(format!("unknown video {}", inst.video_id)))?;
                model.logits(video, inst)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(metrics_from_logits(
        logits.iter().zip(&data.instances).map(|(l, i)| (l.as_slice(), i.gt_index)),
    ))
}

/// Runs `epochs` passes of shuffled mini-batch Adam over `train`.
///
/// With `lr == 0` no update is applied and the step counter stays put.
pub fn train(model: &mut QaModel, train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    if train.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::validation("batch size must be positive"));
    }
    let mut adam = Adam::new(cfg.adam, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&QaInstance> = chunk.iter().map(|&i| &train.instances[i]).collect();
            model.store.zero_grad();
            let mut tape = Tape::new();
            let loss = model.batch_loss(&mut tape, train, &batch)?;
            loss_sum += tape.value(loss).item()?;
            batches += 1;
            if cfg.adam.lr != 0.0 {
                tape.backward(loss)?;
                for id in model.store.ids().collect::<Vec<_>>() {
                    model.store.get_mut(id).set_grad(None);
                }
                tape.accumulate_into(&mut model.store);
                for id in model.store.ids().collect::<Vec<_>>() {
                    let t = model.store.get_mut(id);
                    if t.grad().is_none() {
                        let n = t.len();
                        t.set_grad(Some(vec![0.0; n]));
                    }
                }
                adam.step(&mut model.store)?;
                model.step += 1;
            }
        }
        model.store.zero_grad();
        let train_accuracy = evaluate(model, train)?.accuracy;
        let val_accuracy = val.map(|v| evaluate(model, v)).transpose()?.map(|m| m.accuracy);
        history.push(EpochMetrics {
            epoch,
            loss: loss_sum / batches as f64,
            train_accuracy,
            val_accuracy,
        });
    }
    Ok(history)
}
