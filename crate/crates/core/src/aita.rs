//! Iterative adapt-and-augment training.
//!
//! Training starts from the (answer, question) pairs. Each epoch trains the
//! generator on the current instance set, scores every same-product review
//! for every question by the generator's log-perplexity, drops the `μ`
//! answer-sourced instances the generator fits worst, trains the ranker on
//! the normalized rewards, adds the `μ` best-scoring unused (review,
//! question) pairs and finally refreshes every aspect feature from the ranker.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, ArchiveWriter};
use crate::config::RunConfig;
use crate::corpus::{from_jsonl, to_jsonl, Corpus, EmbeddingTable, QAPair, ReviewSentence, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::generator::{GenExample, GenOptions, GeneratorDims, GeneratorParams, SourceText};
use crate::nn::{softmax, Adam, ParamStore, Tensor};
use crate::ranker::{AspectInfo, RankerDims, RankerExample, RankerInputs, RankerParams, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "QA")]
    Qa,
    #[serde(rename = "QR")]
    Qr,
}

/// What an instance's context text is.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextRef {
    Answer { question_id: String },
    Review { review_id: String, sent_idx: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub source: Source,
    pub product_id: String,
    pub question_id: String,
    pub question: Vec<String>,
    pub context: Vec<String>,
    pub context_ref: ContextRef,
    pub aspect: AspectInfo,
}

/// Identity of an instance: product, question and context.
pub type InstanceKey = (String, String, ContextRef);

impl TrainingInstance {
    pub fn key(&self) -> InstanceKey {
        (self.product_id.clone(), self.question_id.clone(), self.context_ref.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstanceSet {
    items: Vec<TrainingInstance>,
    keys: BTreeSet<InstanceKey>,
}

impl InstanceSet {
    pub fn new(items: Vec<TrainingInstance>) -> Result<Self> {
        let mut set = InstanceSet::default();
        for item in items {
            set.push(item)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, item: TrainingInstance) -> Result<()> {
        if !self.keys.insert(item.key()) {
            return Err(Error::invalid(format!(
                "duplicate instance for question {}/{}",
                item.product_id, item.question_id
            )));
        }
        self.items.push(item);
        Ok(())
    }

    pub fn items(&self) -> &[TrainingInstance] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_qa(&self) -> usize {
        self.items.iter().filter(|i| i.source == Source::Qa).count()
    }

    pub fn n_qr(&self) -> usize {
        self.items.iter().filter(|i| i.source == Source::Qr).count()
    }

    pub fn qr_fraction(&self) -> f64 {
        if self.items.is_empty() {
            0.0
        } else {
            self.n_qr() as f64 / self.len() as f64
        }
    }

    pub fn contains(&self, key: &InstanceKey) -> bool {
        self.keys.contains(key)
    }

    fn retain(&mut self, mut keep: impl FnMut(&TrainingInstance) -> bool) {
        let keys = &mut self.keys;
        self.items.retain(|i| {
            let k = keep(i);
            if !k {
                keys.remove(&i.key());
            }
            k
        });
    }

    pub fn to_jsonl(&self) -> Result<String> {
        to_jsonl(&self.items)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::new(from_jsonl(text)?)
    }
}

/// Turns raw log-perplexities of one group into rewards summing to 1.
///
/// `sign = -1` takes a softmax of the negated values, favoring contexts the
/// generator finds easy; `sign = 1` divides each value by the group sum.
pub fn normalize_rewards(values: &[f64], sign: i32) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    if sign < 0 {
        let neg: Vec<f64> = values.iter().map(|v| -v).collect();
        softmax(&neg)
    } else {
        let total: f64 = values.iter().sum();
        if total > 0.0 {
            values.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / values.len() as f64; values.len()]
        }
    }
}

/// Rewards of every candidate review for one question.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardGroup {
    /// Index of the QA pair in the corpus.
    pub qa: usize,
    /// Indices of the candidate review sentences in the corpus.
    pub candidates: Vec<usize>,
    /// Raw log-perplexity of the question given each candidate.
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewardTable {
    pub groups: Vec<RewardGroup>,
}

impl RewardTable {
    /// `(question_id, context_ref) → reward` over the whole table.
    pub fn entries(&self, corpus: &Corpus) -> BTreeMap<(String, String, ContextRef), f64> {
        let mut out = BTreeMap::new();
        for g in &self.groups {
            let qa = &corpus.qa[g.qa];
            for (&r, &reward) in g.candidates.iter().zip(&g.rewards) {
                let rs = &corpus.reviews[r];
                let ctx = ContextRef::Review {
                    review_id: rs.review_id.clone(),
                    sent_idx: rs.sent_idx,
                };
                out.insert((qa.product_id.clone(), qa.question_id.clone(), ctx), reward);
            }
        }
        out
    }
}

/// Removes `min(mu, n_qa)` answer-sourced instances with the worst removal
/// key: the highest log-perplexity when `sign = -1`, the lowest when
/// `sign = 1`. Ties go to the smaller `(product_id, question_id)`. Review
/// instances are never removed. Returns the number removed.
pub fn adapt_remove(set: &mut InstanceSet, scores: &BTreeMap<(String, String), f64>, mu: usize, sign: i32) -> usize {
    let mut cands: Vec<(&str, &str, f64)> = set
        .items()
        .iter()
        .filter(|i| i.source == Source::Qa)
        .map(|i| {
            let v = scores
                .get(&(i.product_id.clone(), i.question_id.clone()))
                .copied()
                .unwrap_or(f64::NAN);
            (i.product_id.as_str(), i.question_id.as_str(), v)
        })
        .collect();
    cands.sort_by(|a, b| {
        let by_value = if sign < 0 { b.2.total_cmp(&a.2) } else { a.2.total_cmp(&b.2) };
        by_value.then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
    });
    let doomed: BTreeSet<(String, String)> = cands
        .iter()
        .take(mu)
        .map(|(p, q, _)| (p.to_string(), q.to_string()))
        .collect();
    let before = set.len();
    set.retain(|i| i.source != Source::Qa || !doomed.contains(&(i.product_id.clone(), i.question_id.clone())));
    before - set.len()
}

/// One scored (question, review sentence) pair eligible for augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolPair {
    pub qa: usize,
    pub review: usize,
    pub product_id: String,
    pub question_id: String,
    pub review_id: String,
    pub sent_idx: usize,
    pub score: f64,
}

/// Picks up to `mu` pairs by descending score with at most one pair per
/// question; ties go to the smaller `(product_id, question_id, review_id,
/// sent_idx)`. Returns indices into `pool`.
pub fn select_augment(pool: &[PoolPair], mu: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&pool[a], &pool[b]);
        y.score
            .total_cmp(&x.score)
            .then_with(|| (&x.product_id, &x.question_id, &x.review_id, x.sent_idx).cmp(&(&y.product_id, &y.question_id, &y.review_id, y.sent_idx)))
    });
    let mut used: BTreeSet<(&str, &str)> = BTreeSet::new();
    let mut out = Vec::new();
    for i in order {
        if out.len() == mu {
            break;
        }
        if used.insert((&pool[i].product_id, &pool[i].question_id)) {
            out.push(i);
        }
    }
    out
}

/// Adds the selected pool pairs as review-sourced instances. Pairs already
/// in the set are ignored. Returns the number added.
pub fn augment_add(
    set: &mut InstanceSet,
    pool: &[PoolPair],
    mu: usize,
    mut build: impl FnMut(&PoolPair) -> TrainingInstance,
) -> Result<usize> {
    let eligible: Vec<PoolPair> = pool
        .iter()
        .filter(|p| {
            let ctx = ContextRef::Review {
                review_id: p.review_id.clone(),
                sent_idx: p.sent_idx,
            };
            !set.contains(&(p.product_id.clone(), p.question_id.clone(), ctx))
        })
        .cloned()
        .collect();
    if eligible.is_empty() {
        if mu > 0 {
            warn!("augmentation pool is empty; nothing added");
        }
        return Ok(0);
    }
    let chosen = select_augment(&eligible, mu);
    for &i in &chosen {
        set.push(build(&eligible[i]))?;
    }
    Ok(chosen.len())
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub n_qa: usize,
    pub n_qr: usize,
    /// Mean over questions of the reward expected under the ranker's
    /// normalized scores.
    pub mean_reward: f64,
    /// Mean per-instance teacher-forced NLL during generator training.
    pub mean_train_nll: f64,
}

/// Corpus-derived inputs shared by every epoch.
struct Prepared<'c> {
    corpus: &'c Corpus,
    answer_src: Vec<SourceText>,
    review_src: Vec<SourceText>,
    qa_ids: Vec<Vec<TokenId>>,
    answer_ids: Vec<Vec<TokenId>>,
    review_ids: Vec<Vec<TokenId>>,
    /// Product → (QA indices, review indices), in corpus order.
    products: BTreeMap<String, (Vec<usize>, Vec<usize>)>,
    qa_index: HashMap<(String, String), usize>,
    review_index: HashMap<(String, String, usize), usize>,
}

impl<'c> Prepared<'c> {
    fn new(corpus: &'c Corpus, config: &RunConfig) -> Result<Self> {
        let inputs = RankerInputs::new(&corpus.vocab, &corpus.embeddings, config);
        let mut answer_src = Vec::with_capacity(corpus.qa.len());
        let mut qa_ids = Vec::with_capacity(corpus.qa.len());
        let mut answer_ids = Vec::with_capacity(corpus.qa.len());
        let mut products: BTreeMap<String, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        let mut qa_index = HashMap::new();
        for (i, qa) in corpus.qa.iter().enumerate() {
            let n = qa.a_tokens.len().min(config.max_review_len);
            let ner = qa.ner_or_default();
            let pos = if qa.a_pos.len() == qa.a_tokens.len() {
                qa.a_pos.clone()
            } else {
                vec![crate::corpus::PosTag::X; qa.a_tokens.len()]
            };
            answer_src.push(SourceText::new(&qa.a_tokens[..n], &pos[..n], &ner[..n], &corpus.vocab)?);
            qa_ids.push(inputs.qa_ids(qa));
            answer_ids.push(inputs.text_ids(&qa.a_tokens[..n]));
            products.entry(qa.product_id.clone()).or_default().0.push(i);
            qa_index.insert((qa.product_id.clone(), qa.question_id.clone()), i);
        }
        let mut review_src = Vec::with_capacity(corpus.reviews.len());
        let mut review_ids = Vec::with_capacity(corpus.reviews.len());
        let mut review_index = HashMap::new();
        for (i, r) in corpus.reviews.iter().enumerate() {
            let n = r.tokens.len().min(config.max_review_len);
            review_src.push(SourceText::new(&r.tokens[..n], &r.pos_tags[..n], &r.ner_bio[..n], &corpus.vocab)?);
            review_ids.push(inputs.text_ids(&r.tokens[..n]));
            products.entry(r.product_id.clone()).or_default().1.push(i);
            review_index.insert((r.product_id.clone(), r.review_id.clone(), r.sent_idx), i);
        }
        Ok(Prepared {
            corpus,
            answer_src,
            review_src,
            qa_ids,
            answer_ids,
            review_ids,
            products,
            qa_index,
            review_index,
        })
    }

    fn emb(&self) -> &'c EmbeddingTable {
        &self.corpus.embeddings
    }

    fn vocab(&self) -> &'c Vocab {
        &self.corpus.vocab
    }

    fn context(&self, inst: &TrainingInstance) -> Result<Context> {
        match &inst.context_ref {
            ContextRef::Answer { question_id } => self
                .qa_index
                .get(&(inst.product_id.clone(), question_id.clone()))
                .map(|&i| Context::Answer(i)),
            ContextRef::Review { review_id, sent_idx } => self
                .review_index
                .get(&(inst.product_id.clone(), review_id.clone(), *sent_idx))
                .map(|&i| Context::Review(i)),
        }
        .ok_or_else(|| Error::invalid(format!("instance context {:?} not found in corpus", inst.context_ref)))
    }
}

#[derive(Debug, Clone, Copy)]
enum Context {
    Answer(usize),
    Review(usize),
}

/// Training state of one run.
pub struct Trainer<'c> {
    prep: Prepared<'c>,
    config: RunConfig,
    mu: usize,
    epoch: usize,
    set: InstanceSet,
    ranker: RankerParams,
    generator: GeneratorParams,
    ranker_opt: Adam,
    gen_opt: Adam,
    answer_aspects: Vec<AspectInfo>,
    review_aspects: Vec<AspectInfo>,
    log: Vec<EpochLog>,
}

/// Everything a finished run produces.
pub struct RunOutput {
    pub instances: InstanceSet,
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Trained parameters with what is needed to apply them to new text.
pub struct Model {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub embeddings: EmbeddingTable,
    pub ranker: RankerParams,
    pub generator: GeneratorParams,
}

/// One line of a generation output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub product_id: String,
    pub review_id: String,
    pub sent_idx: usize,
    pub review_sentence: String,
    pub generated_question: String,
    /// Mean log-probability of the emitted tokens.
    pub score: f64,
}

impl Model {
    fn inputs(&self) -> RankerInputs<'_> {
        RankerInputs::new(&self.vocab, &self.embeddings, &self.config)
    }

    /// Aspect features of a review sentence as the generator sees them.
    pub fn review_aspect(&self, review: &ReviewSentence) -> Result<AspectInfo> {
        let ids = self.inputs().review_ids(review);
        self.ranker.aspect_info(&self.embeddings, &ids)
    }

    /// One question per review sentence, in input order.
    pub fn generate(&self, reviews: &[ReviewSentence], beam_size: usize) -> Result<Vec<GenerationRecord>> {
        reviews
            .par_iter()
            .map(|r| {
                let n = r.tokens.len().min(self.config.max_review_len);
                let src = SourceText::new(&r.tokens[..n], &r.pos_tags[..n], &r.ner_bio[..n], &self.vocab)?;
                let aspect = self.review_aspect(r)?;
                let out = self.generator.generate(
                    &self.embeddings,
                    &self.vocab,
                    &src,
                    &aspect,
                    beam_size,
                    self.config.max_q_len + 1,
                )?;
                Ok(GenerationRecord {
                    product_id: r.product_id.clone(),
                    review_id: r.review_id.clone(),
                    sent_idx: r.sent_idx,
                    review_sentence: r.text(),
                    generated_question: out.tokens.join(" "),
                    score: out.score,
                })
            })
            .collect()
    }

    /// Review sentences of the question's product by descending ranking
    /// score, as `(index into reviews, score)`.
    pub fn rank(&self, qa: &QAPair, reviews: &[ReviewSentence]) -> Result<Vec<(usize, f64)>> {
        let mut index: Vec<usize> = (0..reviews.len()).filter(|&i| reviews[i].product_id == qa.product_id).collect();
        index.sort_by(|&a, &b| (&reviews[a].review_id, reviews[a].sent_idx).cmp(&(&reviews[b].review_id, reviews[b].sent_idx)));
        let inputs = self.inputs();
        let ids: Vec<Vec<TokenId>> = index.iter().map(|&i| inputs.review_ids(&reviews[i])).collect();
        let ranked = self.ranker.rank_ids(&self.embeddings, &inputs.qa_ids(qa), &ids)?;
        Ok(ranked.into_iter().map(|(i, s)| (index[i], s.value())).collect())
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:03}")
}

impl<'c> Trainer<'c> {
    pub fn new(corpus: &'c Corpus, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        if corpus.qa.is_empty() {
            return Err(Error::invalid("corpus has no QA pairs"));
        }
        if corpus.embeddings.dim() != config.embedding_dim {
            return Err(Error::Shape(format!(
                "corpus embeddings have width {}, config says {}",
                corpus.embeddings.dim(),
                config.embedding_dim
            )));
        }
        let prep = Prepared::new(corpus, config)?;
        let k = config.aspect_dim;
        let answer_aspects: Vec<AspectInfo> = prep.answer_src.iter().map(|s| AspectInfo::uniform(s.len(), k)).collect();
        let review_aspects = prep.review_src.iter().map(|s| AspectInfo::uniform(s.len(), k)).collect();
        let items = corpus
            .qa
            .iter()
            .enumerate()
            .map(|(i, qa)| TrainingInstance {
                source: Source::Qa,
                product_id: qa.product_id.clone(),
                question_id: qa.question_id.clone(),
                question: qa.q_tokens.clone(),
                context: prep.answer_src[i].tokens.clone(),
                context_ref: ContextRef::Answer {
                    question_id: qa.question_id.clone(),
                },
                aspect: answer_aspects[i].clone(),
            })
            .collect();
        let mut ranker = RankerParams::new(RankerDims::from_config(config), config.seed.wrapping_add(1));
        let mut generator = GeneratorParams::new(
            GeneratorDims::from_config(config, corpus.vocab.len()),
            GenOptions::from(config),
            config.seed.wrapping_add(2),
        );
        ranker.store.round_to_f32();
        generator.store.round_to_f32();
        Ok(Trainer {
            mu: config.mu(corpus.qa.len()),
            prep,
            config: config.clone(),
            epoch: 0,
            set: InstanceSet::new(items)?,
            ranker,
            generator,
            ranker_opt: Adam::new(config.ranker_lr),
            gen_opt: Adam::new(config.gen_lr),
            answer_aspects,
            review_aspects,
            log: Vec::new(),
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(corpus: &'c Corpus, config: &RunConfig, checkpoint: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(checkpoint)?;
        if ckpt.config.hash() != config.hash() {
            return Err(Error::HashMismatch {
                expected: config.hash(),
                found: ckpt.config.hash(),
            });
        }
        if ckpt.vocab != corpus.vocab {
            return Err(Error::invalid("checkpoint vocabulary differs from the corpus"));
        }
        let mut t = Trainer::new(corpus, config)?;
        t.epoch = ckpt.epoch;
        t.ranker = ckpt.ranker;
        t.generator = ckpt.generator;
        t.ranker_opt = ckpt.ranker_opt;
        t.gen_opt = ckpt.gen_opt;
        t.log = ckpt.log;
        t.set = ckpt.instances;
        if t.epoch > 0 {
            t.refresh_aspects()?;
        }
        Ok(t)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn mu(&self) -> usize {
        self.mu
    }

    pub fn instances(&self) -> &InstanceSet {
        &self.set
    }

    pub fn ranker(&self) -> &RankerParams {
        &self.ranker
    }

    pub fn generator(&self) -> &GeneratorParams {
        &self.generator
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    /// Mean teacher-forced NLL of the current generator over the current
    /// instance set.
    pub fn mean_nll(&self) -> Result<f64> {
        if self.set.is_empty() {
            return Ok(0.0);
        }
        let losses = self
            .set
            .items()
            .par_iter()
            .map(|i| {
                let ex = self.gen_example(i)?;
                self.generator
                    .log_perplexity(self.prep.emb(), self.prep.vocab(), &ex.question, &ex.source, &ex.aspect)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    fn gen_example(&self, inst: &TrainingInstance) -> Result<GenExample> {
        let (source, aspect) = match self.prep.context(inst)? {
            Context::Answer(i) => (&self.prep.answer_src[i], &self.answer_aspects[i]),
            Context::Review(i) => (&self.prep.review_src[i], &self.review_aspects[i]),
        };
        Ok(GenExample {
            source: source.clone(),
            aspect: aspect.clone(),
            question: inst.question.clone(),
        })
    }

    /// Step 1: passes over the instance set in seeded shuffled order.
    fn train_generator(&mut self, rng: &mut ChaCha8Rng) -> Result<f64> {
        let examples = self
            .set
            .items()
            .iter()
            .map(|i| self.gen_example(i))
            .collect::<Result<Vec<_>>>()?;
        let mut losses = Vec::new();
        for _ in 0..self.config.gen_passes {
            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.shuffle(rng);
            for chunk in order.chunks(self.config.gen_batch_size) {
                let batch: Vec<GenExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
                losses.extend(self.generator.update(&mut self.gen_opt, self.prep.emb(), self.prep.vocab(), &batch)?);
            }
        }
        Ok(if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        })
    }

    /// Step 2: log-perplexity of every question given every review of its
    /// product, normalized per question.
    pub fn compute_rewards(&self) -> Result<RewardTable> {
        let prep = &self.prep;
        let per_product = prep
            .products
            .par_iter()
            .map(|(pid, (qas, reviews))| {
                if qas.is_empty() {
                    return Ok(Vec::new());
                }
                if reviews.is_empty() {
                    warn!("product {pid} has no review sentences; its questions get no rewards");
                    return Ok(Vec::new());
                }
                let questions: Vec<&[String]> = qas.iter().map(|&q| prep.corpus.qa[q].q_tokens.as_slice()).collect();
                // values[r][q]
                let values = reviews
                    .iter()
                    .map(|&r| {
                        self.generator.log_perplexities(
                            prep.emb(),
                            prep.vocab(),
                            &questions,
                            &prep.review_src[r],
                            &self.review_aspects[r],
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(qas
                    .iter()
                    .enumerate()
                    .map(|(qi, &q)| {
                        let v: Vec<f64> = values.iter().map(|row| row[qi]).collect();
                        RewardGroup {
                            qa: q,
                            candidates: reviews.clone(),
                            rewards: normalize_rewards(&v, self.config.reward_sign),
                            values: v,
                        }
                    })
                    .collect())
            })
            .collect::<Result<Vec<Vec<RewardGroup>>>>()?;
        Ok(RewardTable {
            groups: per_product.into_iter().flatten().collect(),
        })
    }

    /// Removal keys: log-perplexity of each answer-sourced instance's
    /// question given its own answer.
    pub fn removal_scores(&self) -> Result<BTreeMap<(String, String), f64>> {
        let qa_items: Vec<&TrainingInstance> = self.set.items().iter().filter(|i| i.source == Source::Qa).collect();
        let scores = qa_items
            .par_iter()
            .map(|inst| {
                let ex = self.gen_example(inst)?;
                let v = self
                    .generator
                    .log_perplexity(self.prep.emb(), self.prep.vocab(), &ex.question, &ex.source, &ex.aspect)?;
                Ok(((inst.product_id.clone(), inst.question_id.clone()), v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(scores.into_iter().collect())
    }

    /// Step 4: passes over the reward groups in seeded shuffled order.
    fn train_ranker(&mut self, rewards: &RewardTable, rng: &mut ChaCha8Rng) {
        let examples: Vec<RankerExample> = rewards
            .groups
            .iter()
            .map(|g| RankerExample {
                qa_ids: self.prep.qa_ids[g.qa].clone(),
                candidates: g.candidates.iter().map(|&r| self.prep.review_ids[r].clone()).collect(),
                rewards: g.rewards.clone(),
            })
            .collect();
        for _ in 0..self.config.ranker_passes {
            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.shuffle(rng);
            for chunk in order.chunks(self.config.ranker_batch_size) {
                let batch: Vec<RankerExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
                self.ranker.update(
                    &mut self.ranker_opt,
                    self.prep.emb(),
                    &batch,
                    self.config.lambda,
                    self.config.objective_sign,
                );
            }
        }
    }

    /// Pooled QA-side vectors of every question.
    fn qa_vectors(&self) -> Result<Vec<Vec<f64>>> {
        self.prep
            .qa_ids
            .par_iter()
            .map(|ids| Ok(self.ranker.pool(self.prep.emb(), ids, Side::Qa)?.h_alpha))
            .collect()
    }

    /// Review-side pooling of every review sentence: vectors and aspects.
    fn review_side(&self, ids: &[Vec<TokenId>]) -> Result<Vec<(Vec<f64>, AspectInfo)>> {
        ids.par_iter()
            .map(|ids| {
                let pooled = self.ranker.pool(self.prep.emb(), ids, Side::Review)?;
                let p_alpha = self.ranker.aspect_distribution(&pooled.h_alpha);
                Ok((
                    pooled.h_alpha,
                    AspectInfo {
                        alphas: pooled.alphas,
                        p_alpha,
                    },
                ))
            })
            .collect()
    }

    /// Step 6: aspect features of every answer and review from the ranker.
    fn refresh_aspects(&mut self) -> Result<()> {
        self.review_aspects = self.review_side(&self.prep.review_ids)?.into_iter().map(|(_, a)| a).collect();
        self.answer_aspects = self.review_side(&self.prep.answer_ids)?.into_iter().map(|(_, a)| a).collect();
        let mut items = self.set.items().to_vec();
        for inst in &mut items {
            inst.aspect = match self.prep.context(inst)? {
                Context::Answer(i) => self.answer_aspects[i].clone(),
                Context::Review(i) => self.review_aspects[i].clone(),
            };
        }
        self.set = InstanceSet::new(items)?;
        Ok(())
    }

    /// Scores every same-product (question, review) pair and the mean
    /// expected reward under the ranker.
    fn score_pool(&self, rewards: &RewardTable) -> Result<(Vec<PoolPair>, f64)> {
        let qa_vecs = self.qa_vectors()?;
        let review_vecs = self.review_side(&self.prep.review_ids)?;
        let mut pool = Vec::new();
        let mut expected = Vec::new();
        let reward_of: BTreeMap<(usize, usize), f64> = rewards
            .groups
            .iter()
            .flat_map(|g| g.candidates.iter().zip(&g.rewards).map(move |(&r, &w)| ((g.qa, r), w)))
            .collect();
        for (qas, reviews) in self.prep.products.values() {
            for &q in qas {
                let qa = &self.prep.corpus.qa[q];
                let mut num = 0.0;
                let mut den = 0.0;
                for &r in reviews {
                    let s = self.ranker.score(&qa_vecs[q], &review_vecs[r].0)?.value();
                    let rs = &self.prep.corpus.reviews[r];
                    if let Some(w) = reward_of.get(&(q, r)) {
                        num += s * w;
                        den += s;
                    }
                    pool.push(PoolPair {
                        qa: q,
                        review: r,
                        product_id: qa.product_id.clone(),
                        question_id: qa.question_id.clone(),
                        review_id: rs.review_id.clone(),
                        sent_idx: rs.sent_idx,
                        score: s,
                    });
                }
                if den > 0.0 {
                    expected.push(num / den);
                }
            }
        }
        let mean = if expected.is_empty() {
            0.0
        } else {
            expected.iter().sum::<f64>() / expected.len() as f64
        };
        Ok((pool, mean))
    }

    /// Runs one full epoch and returns its log row.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.epoch + 1;
        let mut rng = epoch_rng(self.config.seed, epoch);

        let mean_train_nll = self.train_generator(&mut rng)?;
        let rewards = self.compute_rewards()?;
        let removal = self.removal_scores()?;
        let removed = adapt_remove(&mut self.set, &removal, self.mu, self.config.reward_sign);
        self.train_ranker(&rewards, &mut rng);

        // Keep live state at checkpoint precision so resuming is exact.
        self.ranker.store.round_to_f32();
        self.generator.store.round_to_f32();
        self.ranker_opt.round_to_f32();
        self.gen_opt.round_to_f32();

        let (pool, mean_reward) = self.score_pool(&rewards)?;
        let prep = &self.prep;
        let k = self.config.aspect_dim;
        let added = augment_add(&mut self.set, &pool, self.mu, |p| TrainingInstance {
            source: Source::Qr,
            product_id: p.product_id.clone(),
            question_id: p.question_id.clone(),
            question: prep.corpus.qa[p.qa].q_tokens.clone(),
            context: prep.review_src[p.review].tokens.clone(),
            context_ref: ContextRef::Review {
                review_id: p.review_id.clone(),
                sent_idx: p.sent_idx,
            },
            aspect: AspectInfo::uniform(prep.review_src[p.review].len(), k),
        })?;
        self.refresh_aspects()?;

        let row = EpochLog {
            epoch,
            n_qa: self.set.n_qa(),
            n_qr: self.set.n_qr(),
            mean_reward,
            mean_train_nll,
        };
        info!(
            "epoch {epoch}: removed {removed}, added {added}, n_qa {}, n_qr {}, nll {:.4}",
            row.n_qa, row.n_qr, mean_train_nll
        );
        self.epoch = epoch;
        self.log.push(row.clone());
        Ok(row)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let mut w = ArchiveWriter::new(dir, "checkpoint", &self.config.hash());
        w.count("epoch", self.epoch as u64)
            .count("n_qa", self.set.n_qa() as u64)
            .count("n_qr", self.set.n_qr() as u64)
            .count("vocab", self.prep.vocab().len() as u64)
            .count("ranker_steps", self.ranker_opt.steps())
            .count("generator_steps", self.gen_opt.steps());
        write_params(&mut w, "ranker", &self.ranker.store, &self.ranker_opt);
        write_params(&mut w, "generator", &self.generator.store, &self.gen_opt);
        w.tensor_f32("embeddings", self.prep.emb().matrix())
            .file("config.txt", self.config.to_text())
            .file("vocab.txt", self.prep.vocab().to_text())
            .file("instances.jsonl", self.set.to_jsonl()?)
            .file("log.jsonl", to_jsonl(&self.log)?);
        w.finish()
    }

    /// Runs the remaining epochs. With a run directory, writes the effective
    /// config, a checkpoint after every epoch (or the initial state when
    /// there are no epochs), the log and the final instance set.
    pub fn run_to_end(mut self, run_dir: Option<&Path>) -> Result<RunOutput> {
        let ckpt_dir = run_dir.map(|d| d.join("checkpoints"));
        if let Some(d) = run_dir {
            fs::create_dir_all(d.join("checkpoints")).map_err(|e| Error::io(d, e))?;
            write_file(&d.join("config.txt"), &self.config.to_text())?;
        }
        if let Some(c) = &ckpt_dir {
            if self.config.epochs == 0 && self.epoch == 0 {
                self.save_checkpoint(&c.join(checkpoint_name(0)))?;
            }
        }
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
            if let (Some(d), Some(c)) = (run_dir, &ckpt_dir) {
                self.save_checkpoint(&c.join(checkpoint_name(self.epoch)))?;
                write_file(&d.join("log.jsonl"), &to_jsonl(&self.log)?)?;
            }
        }
        if let Some(d) = run_dir {
            write_file(&d.join("log.jsonl"), &to_jsonl(&self.log)?)?;
            write_file(&d.join("instances.jsonl"), &self.set.to_jsonl()?)?;
        }
        let model = Model {
            vocab: self.prep.vocab().clone(),
            embeddings: self.prep.emb().clone(),
            config: self.config,
            ranker: self.ranker,
            generator: self.generator,
        };
        Ok(RunOutput {
            instances: self.set,
            model,
            log: self.log,
        })
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_params(w: &mut ArchiveWriter, prefix: &str, store: &ParamStore, opt: &Adam) {
    for (i, id) in store.ids().enumerate() {
        let name = store.name(id);
        w.tensor(&format!("{prefix}/{name}"), store.get(id));
        if let Some((m, v)) = opt.moments(i) {
            w.tensor(&format!("opt/{prefix}/m/{name}"), m);
            w.tensor(&format!("opt/{prefix}/v/{name}"), v);
        }
    }
}

fn read_optimizer(archive: &Archive, prefix: &str, store: &ParamStore, lr: f64) -> Result<Adam> {
    let mut opt = Adam::new(lr);
    let moments = store
        .ids()
        .map(|id| {
            let name = store.name(id);
            let m = format!("opt/{prefix}/m/{name}");
            if archive.has_tensor(&m) {
                Ok(Some((archive.tensor(&m)?, archive.tensor(&format!("opt/{prefix}/v/{name}"))?)))
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<Option<(Tensor, Tensor)>>>>()?;
    let steps = archive.count(&format!("{prefix}_steps")).unwrap_or(0);
    opt.restore(steps, moments);
    Ok(opt)
}

/// A saved training state.
pub struct Checkpoint {
    pub dir: PathBuf,
    pub epoch: usize,
    pub config: RunConfig,
    pub config_hash: String,
    pub vocab: Vocab,
    pub embeddings: EmbeddingTable,
    pub ranker: RankerParams,
    pub generator: GeneratorParams,
    pub ranker_opt: Adam,
    pub gen_opt: Adam,
    pub instances: InstanceSet,
    pub log: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Self> {
        let archive = Archive::open(dir)?;
        archive.expect_kind("checkpoint")?;
        let config = RunConfig::parse_str(&archive.read_file("config.txt")?)?;
        if config.hash() != archive.config_hash() {
            return Err(Error::HashMismatch {
                expected: archive.config_hash().to_string(),
                found: config.hash(),
            });
        }
        let vocab = Vocab::from_text(&archive.read_file("vocab.txt")?)?;
        let embeddings = EmbeddingTable::from_matrix(archive.tensor_f32("embeddings")?);
        let ranker = RankerParams::from_named(RankerDims::from_config(&config), |n| archive.tensor(&format!("ranker/{n}")))?;
        let generator = GeneratorParams::from_named(
            GeneratorDims::from_config(&config, vocab.len()),
            GenOptions::from(&config),
            |n| archive.tensor(&format!("generator/{n}")),
        )?;
        let ranker_opt = read_optimizer(&archive, "ranker", &ranker.store, config.ranker_lr)?;
        let gen_opt = read_optimizer(&archive, "generator", &generator.store, config.gen_lr)?;
        Ok(Checkpoint {
            dir: dir.to_path_buf(),
            epoch: archive.count("epoch").unwrap_or(0) as usize,
            config_hash: archive.config_hash().to_string(),
            instances: InstanceSet::from_jsonl(&archive.read_file("instances.jsonl")?)?,
            log: from_jsonl(&archive.read_file("log.jsonl")?)?,
            config,
            vocab,
            embeddings,
            ranker,
            generator,
            ranker_opt,
            gen_opt,
        })
    }

    pub fn model(self) -> Model {
        Model {
            config: self.config,
            vocab: self.vocab,
            embeddings: self.embeddings,
            ranker: self.ranker,
            generator: self.generator,
        }
    }

    /// Latest `epoch-NNN` checkpoint under a run directory.
    pub fn latest(run_dir: &Path) -> Result<Option<PathBuf>> {
        let dir = run_dir.join("checkpoints");
        if !dir.exists() {
            return Ok(None);
        }
        let mut names: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.starts_with("epoch-") && !n.ends_with(".partial"))
            .collect();
        names.sort();
        Ok(names.pop().map(|n| dir.join(n)))
    }
}

/// Trains from scratch for `config.epochs` epochs.
pub fn run(corpus: &Corpus, config: &RunConfig, run_dir: Option<&Path>) -> Result<RunOutput> {
    Trainer::new(corpus, config)?.run_to_end(run_dir)
}
