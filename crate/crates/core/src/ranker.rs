//! Review ranker.
//!
//! A QA concatenation and a review sentence are each encoded by a
//! position-free multi-head self-attention layer (separate projections per
//! side) followed by a global attention pooling whose bilinear matrix `M` is
//! shared by both sides. The pooled vectors feed a logistic scorer. The
//! review side additionally drives an aspect autoencoder: the pooled vector
//! is mapped to a distribution over `k` latent aspects and reconstructed as a
//! mixture of aspect embeddings.
//!
//! Training ascends `E_{r~p(r|qa)}[reward] - λ·mean_r L_rec(r)` where
//! `p(r|qa) = s(qa, r) / Z_qa` and `Z_qa` is held constant when differentiating.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::corpus::{EmbeddingTable, QAPair, ReviewSentence, TokenId, Vocab, EOS};
use crate::error::{Error, Result};
use crate::nn::{softmax, Adam, Gradients, ParamId, ParamStore, Tape, Tensor, Var, INIT_SCALE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Qa,
    Review,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankerDims {
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub aspects: usize,
}

impl RankerDims {
    pub fn from_config(c: &RunConfig) -> Self {
        RankerDims {
            embed_dim: c.embedding_dim,
            heads: c.heads,
            head_dim: c.attn_dim / c.heads,
            aspects: c.aspect_dim,
        }
    }

    /// Width of the concatenated head outputs.
    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankerIds {
    pub qa_heads: Vec<HeadIds>,
    pub review_heads: Vec<HeadIds>,
    /// Global attention matrix shared by both sides.
    pub m: ParamId,
    pub ws: ParamId,
    pub bs: ParamId,
    pub wp: ParamId,
    pub bp: ParamId,
    pub a: ParamId,
}

impl RankerIds {
    pub fn heads(&self, side: Side) -> &[HeadIds] {
        match side {
            Side::Qa => &self.qa_heads,
            Side::Review => &self.review_heads,
        }
    }

    /// Parameters that only the aspect autoencoder uses.
    pub fn reconstruction(&self) -> [ParamId; 3] {
        [self.wp, self.bp, self.a]
    }
}

/// Per-token pooling weights and aspect distribution of one text.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AspectInfo {
    pub alphas: Vec<f64>,
    pub p_alpha: Vec<f64>,
}

impl AspectInfo {
    pub fn uniform(tokens: usize, aspects: usize) -> Self {
        AspectInfo {
            alphas: vec![1.0 / tokens as f64; tokens],
            p_alpha: vec![1.0 / aspects as f64; aspects],
        }
    }
}

/// Sigmoid output of the scorer, strictly inside `(0, 1)` for finite inputs.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RankingScore(f64);

impl RankingScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Pooled representation of one text.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub h_alpha: Vec<f64>,
    pub alphas: Vec<f64>,
}

/// One QA group for a ranker update: the QA input, its candidate reviews and
/// the generator reward of each candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct RankerExample {
    pub qa_ids: Vec<TokenId>,
    pub candidates: Vec<Vec<TokenId>>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankerParams {
    pub store: ParamStore,
    pub ids: RankerIds,
    pub dims: RankerDims,
}

fn row(values: &[f64]) -> Tensor {
    Tensor::from_shape_vec((1, values.len()), values.to_vec()).expect("row vector")
}

impl RankerParams {
    /// Uniform `[-0.08, 0.08]` initialization from `seed`.
    pub fn new(dims: RankerDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let (d, hd, h, k) = (dims.embed_dim, dims.head_dim, dims.hidden(), dims.aspects);
        let mut heads = |store: &mut ParamStore, side: &str| {
            (0..dims.heads)
                .map(|j| HeadIds {
                    wq: store.push_uniform(format!("{side}.head{j}.wq"), d, hd, INIT_SCALE, &mut rng),
                    wk: store.push_uniform(format!("{side}.head{j}.wk"), d, hd, INIT_SCALE, &mut rng),
                    wv: store.push_uniform(format!("{side}.head{j}.wv"), d, hd, INIT_SCALE, &mut rng),
                })
                .collect::<Vec<_>>()
        };
        let qa_heads = heads(&mut store, "qa");
        let review_heads = heads(&mut store, "review");
        let m = store.push_uniform("m", h, h, INIT_SCALE, &mut rng);
        let ws = store.push_uniform("ws", 1, 3 * h, INIT_SCALE, &mut rng);
        let bs = store.push_uniform("bs", 1, 1, INIT_SCALE, &mut rng);
        let wp = store.push_uniform("wp", k, h, INIT_SCALE, &mut rng);
        let bp = store.push_uniform("bp", 1, k, INIT_SCALE, &mut rng);
        let a = store.push_uniform("a", k, h, INIT_SCALE, &mut rng);
        RankerParams {
            store,
            ids: RankerIds {
                qa_heads,
                review_heads,
                m,
                ws,
                bs,
                wp,
                bp,
                a,
            },
            dims,
        }
    }

    /// Rebuilds parameters from named tensors (e.g. a checkpoint).
    pub fn from_named(dims: RankerDims, mut get: impl FnMut(&str) -> Result<Tensor>) -> Result<Self> {
        let mut params = Self::new(dims, 0);
        for id in params.store.ids().collect::<Vec<_>>() {
            let name = params.store.name(id).to_string();
            let value = get(&name)?;
            if value.dim() != params.store.get(id).dim() {
                return Err(Error::Shape(format!(
                    "ranker parameter {name} has shape {:?}, expected {:?}",
                    value.dim(),
                    params.store.get(id).dim()
                )));
            }
            *params.store.get_mut(id) = value;
        }
        Ok(params)
    }

    // ---- tape-level building blocks -------------------------------------

    /// Multi-head self-attention over an `n × d` embedding matrix.
    pub fn encode_on(&self, tape: &mut Tape, emb: Var, side: Side) -> Var {
        let scale = 1.0 / (self.dims.embed_dim as f64).sqrt();
        let heads: Vec<Var> = self
            .ids
            .heads(side)
            .iter()
            .map(|h| {
                let wq = tape.param(h.wq);
                let wk = tape.param(h.wk);
                let wv = tape.param(h.wv);
                let q = tape.matmul(emb, wq);
                let k = tape.matmul(emb, wk);
                let v = tape.matmul(emb, wv);
                let logits = tape.matmul_t(q, k);
                let logits = tape.scale(logits, scale);
                let attn = tape.softmax_rows(logits);
                tape.matmul(attn, v)
            })
            .collect();
        if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        }
    }

    /// Global attention pooling; returns `(h_alpha, alphas)` as `1 × h` and `1 × n`.
    pub fn attend_on(&self, tape: &mut Tape, h: Var) -> (Var, Var) {
        let m = tape.param(self.ids.m);
        global_attention_on(tape, h, m)
    }

    pub fn score_on(&self, tape: &mut Tape, h_qa: Var, h_r: Var) -> Var {
        let diff = tape.sub(h_qa, h_r);
        let diff = tape.abs(diff);
        let g = tape.concat_cols(&[h_qa, h_r, diff]);
        let ws = tape.param(self.ids.ws);
        let bs = tape.param(self.ids.bs);
        let logit = tape.matmul_t(g, ws);
        let logit = tape.add(logit, bs);
        tape.sigmoid(logit)
    }

    pub fn aspect_on(&self, tape: &mut Tape, h_alpha: Var) -> Var {
        let wp = tape.param(self.ids.wp);
        let bp = tape.param(self.ids.bp);
        let logits = tape.matmul_t(h_alpha, wp);
        let logits = tape.add(logits, bp);
        tape.softmax_rows(logits)
    }

    pub fn reconstruct_on(&self, tape: &mut Tape, p_alpha: Var) -> Var {
        let a = tape.param(self.ids.a);
        tape.matmul(p_alpha, a)
    }

    /// Embeds, encodes and pools `ids`.
    fn pool_on(&self, tape: &mut Tape, emb: &EmbeddingTable, ids: &[TokenId], side: Side) -> (Var, Var) {
        let e = tape.constant(emb.lookup(ids));
        let h = self.encode_on(tape, e, side);
        self.attend_on(tape, h)
    }

    // ---- value-level operations -----------------------------------------

    /// Context matrix `H` (`n × h`) for a token id sequence.
    pub fn encode(&self, emb: &EmbeddingTable, ids: &[TokenId], side: Side) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::invalid("cannot encode an empty token sequence"));
        }
        let mut tape = Tape::with_params(&self.store);
        let e = tape.constant(emb.lookup(ids));
        let h = self.encode_on(&mut tape, e, side);
        Ok(tape.value(h).clone())
    }

    pub fn pool(&self, emb: &EmbeddingTable, ids: &[TokenId], side: Side) -> Result<Pooled> {
        if ids.is_empty() {
            return Err(Error::invalid("cannot encode an empty token sequence"));
        }
        let mut tape = Tape::with_params(&self.store);
        let (h_alpha, alphas) = self.pool_on(&mut tape, emb, ids, side);
        Ok(Pooled {
            h_alpha: tape.value(h_alpha).iter().copied().collect(),
            alphas: tape.value(alphas).iter().copied().collect(),
        })
    }

    pub fn score(&self, h_qa: &[f64], h_r: &[f64]) -> Result<RankingScore> {
        let h = self.dims.hidden();
        if h_qa.len() != h || h_r.len() != h {
            return Err(Error::Shape(format!(
                "score expects two vectors of length {h}, got {} and {}",
                h_qa.len(),
                h_r.len()
            )));
        }
        let mut tape = Tape::with_params(&self.store);
        let q = tape.row_vector(h_qa);
        let r = tape.row_vector(h_r);
        let s = self.score_on(&mut tape, q, r);
        Ok(RankingScore(tape.scalar(s)))
    }

    pub fn aspect_distribution(&self, h_alpha: &[f64]) -> Vec<f64> {
        let wp = self.store.get(self.ids.wp);
        let bp = self.store.get(self.ids.bp);
        let logits: Vec<f64> = wp
            .rows()
            .into_iter()
            .zip(bp.iter())
            .map(|(w, b)| w.iter().zip(h_alpha).map(|(w, h)| w * h).sum::<f64>() + b)
            .collect();
        softmax(&logits)
    }

    pub fn reconstruct(&self, p_alpha: &[f64]) -> Vec<f64> {
        row(p_alpha).dot(self.store.get(self.ids.a)).iter().copied().collect()
    }

    /// Review-side pooling weights and aspect distribution.
    pub fn aspect_info(&self, emb: &EmbeddingTable, ids: &[TokenId]) -> Result<AspectInfo> {
        let pooled = self.pool(emb, ids, Side::Review)?;
        Ok(AspectInfo {
            p_alpha: self.aspect_distribution(&pooled.h_alpha),
            alphas: pooled.alphas,
        })
    }

    /// Scores every candidate for one QA input, returning candidate indices
    /// sorted by descending score.
    pub fn rank_ids(
        &self,
        emb: &EmbeddingTable,
        qa_ids: &[TokenId],
        candidates: &[Vec<TokenId>],
    ) -> Result<Vec<(usize, RankingScore)>> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let qa = self.pool(emb, qa_ids, Side::Qa)?;
        let mut scored = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let r = self.pool(emb, c, Side::Review)?;
                Ok((i, self.score(&qa.h_alpha, &r.h_alpha)?))
            })
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| b.1 .0.total_cmp(&a.1 .0).then(a.0.cmp(&b.0)));
        Ok(scored)
    }

    /// Ranks the review sentences of `qa`'s product by descending score; ties
    /// fall back to `(review_id, sent_idx)` order.
    pub fn rank_reviews<'r>(
        &self,
        inputs: &RankerInputs,
        qa: &QAPair,
        candidates: &'r [ReviewSentence],
    ) -> Result<Vec<(&'r ReviewSentence, RankingScore)>> {
        if let Some(other) = candidates.iter().find(|c| c.product_id != qa.product_id) {
            return Err(Error::invalid(format!(
                "candidate from product {} cannot be ranked for product {}",
                other.product_id, qa.product_id
            )));
        }
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (&candidates[a], &candidates[b]);
            (&x.review_id, x.sent_idx).cmp(&(&y.review_id, y.sent_idx))
        });
        let ids: Vec<Vec<TokenId>> = order.iter().map(|&i| inputs.review_ids(&candidates[i])).collect();
        let ranked = self.rank_ids(inputs.embeddings, &inputs.qa_ids(qa), &ids)?;
        Ok(ranked.into_iter().map(|(i, s)| (&candidates[order[i]], s)).collect())
    }

    // ---- training --------------------------------------------------------

    /// Objective of one example on the tape. `fixed_z` overrides the score
    /// normalizer; otherwise the current score sum is used. Returns the
    /// objective node and the normalizer used.
    pub fn objective_on(
        &self,
        tape: &mut Tape,
        emb: &EmbeddingTable,
        example: &RankerExample,
        lambda: f64,
        fixed_z: Option<f64>,
    ) -> (Var, f64) {
        let (h_qa, _) = self.pool_on(tape, emb, &example.qa_ids, Side::Qa);
        let mut scores = Vec::with_capacity(example.candidates.len());
        let mut recon = Vec::with_capacity(example.candidates.len());
        for cand in &example.candidates {
            let (h_r, _) = self.pool_on(tape, emb, cand, Side::Review);
            scores.push(self.score_on(tape, h_qa, h_r));
            let p = self.aspect_on(tape, h_r);
            let rebuilt = self.reconstruct_on(tape, p);
            let diff = tape.sub(h_r, rebuilt);
            let sq = tape.mul(diff, diff);
            let sum = tape.sum(sq);
            recon.push(tape.scale(sum, 0.5));
        }
        let z = fixed_z.unwrap_or_else(|| scores.iter().map(|&s| tape.scalar(s)).sum());
        let weighted: Vec<Var> = scores
            .iter()
            .zip(&example.rewards)
            .map(|(&s, &r)| tape.scale(s, r / z))
            .collect();
        let policy = tape.add_all(&weighted);
        let recon = tape.add_all(&recon);
        let recon = tape.scale(recon, lambda / example.candidates.len() as f64);
        (tape.sub(policy, recon), z)
    }

    /// Mean objective over a batch and its gradient (ascent direction), with
    /// each normalizer fixed at its current value.
    pub fn objective_and_gradient(
        &self,
        emb: &EmbeddingTable,
        batch: &[RankerExample],
        lambda: f64,
    ) -> (f64, Gradients) {
        let mut grads = Gradients::zeros_like(&self.store);
        let mut total = 0.0;
        let weight = 1.0 / batch.len() as f64;
        for ex in batch.iter().filter(|e| !e.candidates.is_empty()) {
            let mut tape = Tape::with_params(&self.store);
            let (obj, _) = self.objective_on(&mut tape, emb, ex, lambda, None);
            total += weight * tape.scalar(obj);
            grads.accumulate(&tape.backward(obj), weight);
        }
        (total, grads)
    }

    /// Mean objective with optional externally fixed normalizers, for
    /// gradient checking.
    pub fn objective(
        &self,
        emb: &EmbeddingTable,
        batch: &[RankerExample],
        lambda: f64,
        fixed_z: Option<&[f64]>,
    ) -> (f64, Vec<f64>) {
        let mut total = 0.0;
        let mut zs = Vec::with_capacity(batch.len());
        for (i, ex) in batch.iter().enumerate() {
            if ex.candidates.is_empty() {
                zs.push(0.0);
                continue;
            }
            let mut tape = Tape::with_params(&self.store);
            let (obj, z) = self.objective_on(&mut tape, emb, ex, lambda, fixed_z.map(|z| z[i]));
            total += tape.scalar(obj) / batch.len() as f64;
            zs.push(z);
        }
        (total, zs)
    }

    /// One Adam step on the batch. `objective_sign = 1` ascends the
    /// objective, `-1` descends it. Returns the objective before the step.
    pub fn update(
        &mut self,
        optimizer: &mut Adam,
        emb: &EmbeddingTable,
        batch: &[RankerExample],
        lambda: f64,
        objective_sign: i32,
    ) -> f64 {
        if batch.iter().all(|e| e.candidates.is_empty()) {
            return 0.0;
        }
        let (obj, mut grads) = self.objective_and_gradient(emb, batch, lambda);
        // Adam descends, so flip the ascent direction.
        grads.scale(-f64::from(objective_sign));
        optimizer.step(&mut self.store, &grads);
        obj
    }
}

/// Global attention pooling with an explicit bilinear matrix.
pub fn global_attention_on(tape: &mut Tape, h: Var, m: Var) -> (Var, Var) {
    let mean = tape.mean_rows(h);
    let hm = tape.matmul(h, m);
    let scores = tape.matmul_t(hm, mean);
    let scores = tape.transpose(scores);
    let alphas = tape.softmax_rows(scores);
    let pooled = tape.matmul(alphas, h);
    (pooled, alphas)
}

/// `α_i ∝ exp(h_i · M · mean(h))`, pooled vector `Σ α_i h_i`.
pub fn global_attention(h: &Tensor, m: &Tensor) -> Result<Pooled> {
    if h.nrows() == 0 {
        return Err(Error::invalid("global attention needs at least one row"));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let mv = tape.constant(m.clone());
    let (pooled, alphas) = global_attention_on(&mut tape, hv, mv);
    Ok(Pooled {
        h_alpha: tape.value(pooled).iter().copied().collect(),
        alphas: tape.value(alphas).iter().copied().collect(),
    })
}

/// `||h - h'||² / 2`.
pub fn reconstruction_loss(h: &[f64], rebuilt: &[f64]) -> f64 {
    h.iter().zip(rebuilt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 2.0
}

/// Maps corpus records to ranker token ids.
#[derive(Clone, Copy)]
pub struct RankerInputs<'a> {
    pub vocab: &'a Vocab,
    pub embeddings: &'a EmbeddingTable,
    pub max_qa_len: usize,
    pub max_review_len: usize,
}

impl<'a> RankerInputs<'a> {
    pub fn new(vocab: &'a Vocab, embeddings: &'a EmbeddingTable, config: &RunConfig) -> Self {
        RankerInputs {
            vocab,
            embeddings,
            max_qa_len: config.max_qa_len,
            max_review_len: config.max_review_len,
        }
    }

    /// Question, separator, answer; truncated to the QA length limit.
    pub fn qa_ids(&self, qa: &QAPair) -> Vec<TokenId> {
        let mut ids = self.vocab.encode(&qa.q_tokens);
        ids.push(EOS);
        ids.extend(self.vocab.encode(&qa.a_tokens));
        ids.truncate(self.max_qa_len);
        ids
    }

    pub fn review_ids(&self, review: &ReviewSentence) -> Vec<TokenId> {
        self.text_ids(&review.tokens)
    }

    /// Ids of any text used on the review side (review sentence or answer).
    pub fn text_ids(&self, tokens: &[String]) -> Vec<TokenId> {
        let mut ids = self.vocab.encode(tokens);
        ids.truncate(self.max_review_len);
        ids
    }
}
