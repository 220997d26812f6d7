//! Question generator.
//!
//! Each source token is represented by its word vector, a one-hot POS tag, a
//! one-hot BIO tag and the ranker's attention weight for that token. A
//! bidirectional LSTM encodes the source; an LSTM decoder attends over the
//! encoder states and mixes a vocabulary distribution with a copy
//! distribution over source positions. The copy gate is conditioned on the
//! source's aspect distribution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::corpus::{Bio, EmbeddingTable, PosTag, QAPair, ReviewSentence, TokenId, Vocab, BOS, EOS, UNK};
use crate::error::{Error, Result};
use crate::nn::{Adam, Gradients, LstmCell, ParamId, ParamStore, Tape, Tensor, Var, INIT_SCALE};
use crate::ranker::AspectInfo;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Width of the non-lexical part of an extended embedding.
pub const FEATURE_DIM: usize = PosTag::COUNT + Bio::COUNT + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorDims {
    pub embed_dim: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub vocab: usize,
    pub aspects: usize,
}

impl GeneratorDims {
    pub fn from_config(c: &RunConfig, vocab: usize) -> Self {
        GeneratorDims {
            embed_dim: c.embedding_dim,
            hidden: c.gen_hidden,
            bottleneck: c.gen_bottleneck,
            vocab,
            aspects: c.aspect_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.embed_dim + FEATURE_DIM
    }
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenOptions {
    /// When off, attention weights are zeroed in the extended embedding and
    /// the copy gate sees a uniform aspect distribution.
    pub use_aspect: bool,
    /// When off, the copy gate is forced to 0.
    pub use_copy: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            use_aspect: true,
            use_copy: true,
        }
    }
}

impl From<&RunConfig> for GenOptions {
    fn from(c: &RunConfig) -> Self {
        GenOptions {
            use_aspect: c.use_aspect,
            use_copy: c.use_copy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorIds {
    pub enc_fwd: LstmCell,
    pub enc_bwd: LstmCell,
    pub dec: LstmCell,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub wh: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub wc: ParamId,
    pub bc: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub store: ParamStore,
    pub ids: GeneratorIds,
    pub dims: GeneratorDims,
    pub options: GenOptions,
}

/// A tokenized source text with features and extended ids. Source tokens
/// missing from the vocabulary get ids `V, V+1, ...` in first-seen order so
/// they can be copied.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceText {
    pub tokens: Vec<String>,
    pub pos: Vec<PosTag>,
    pub ner: Vec<Bio>,
    /// Vocabulary id per token (`UNK` when missing).
    pub ids: Vec<TokenId>,
    /// Extended id per token.
    pub ext_ids: Vec<usize>,
    /// Out-of-vocabulary words, indexed by `ext_id - V`.
    pub oov: Vec<String>,
}

impl SourceText {
    pub fn new(tokens: &[String], pos: &[PosTag], ner: &[Bio], vocab: &Vocab) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("source text is empty"));
        }
        if pos.len() != tokens.len() || ner.len() != tokens.len() {
            return Err(Error::invalid(format!(
                "feature lengths {}/{} do not match {} tokens",
                pos.len(),
                ner.len(),
                tokens.len()
            )));
        }
        let mut oov: Vec<String> = Vec::new();
        let mut ids = Vec::with_capacity(tokens.len());
        let mut ext_ids = Vec::with_capacity(tokens.len());
        for t in tokens {
            match vocab.get(t) {
                Some(id) => {
                    ids.push(id);
                    ext_ids.push(id);
                }
                None => {
                    ids.push(UNK);
                    let k = oov.iter().position(|w| w == t).unwrap_or_else(|| {
                        oov.push(t.clone());
                        oov.len() - 1
                    });
                    ext_ids.push(vocab.len() + k);
                }
            }
        }
        Ok(SourceText {
            tokens: tokens.to_vec(),
            pos: pos.to_vec(),
            ner: ner.to_vec(),
            ids,
            ext_ids,
            oov,
        })
    }

    pub fn review(r: &ReviewSentence, vocab: &Vocab) -> Result<Self> {
        Self::new(&r.tokens, &r.pos_tags, &r.ner_bio, vocab)
    }

    /// The answer of a QA pair used as a source.
    pub fn answer(qa: &QAPair, vocab: &Vocab) -> Result<Self> {
        Self::new(&qa.a_tokens, &qa.a_pos, &qa.ner_or_default(), vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Gold ids for a question: vocabulary id when known, extended id when
    /// copyable from this source, `UNK` otherwise; `EOS` appended.
    pub fn target_ids(&self, question: &[String], vocab: &Vocab, copy: bool) -> Vec<usize> {
        let mut out: Vec<usize> = question
            .iter()
            .map(|t| match vocab.get(t) {
                Some(id) => id,
                None if copy => self
                    .oov
                    .iter()
                    .position(|w| w == t)
                    .map_or(UNK, |k| vocab.len() + k),
                None => UNK,
            })
            .collect();
        out.push(EOS);
        out
    }

    /// Renders an extended id as a token string.
    pub fn render(&self, id: usize, vocab: &Vocab) -> String {
        match vocab.token(id) {
            Some(t) => t.to_string(),
            None => self.oov.get(id - vocab.len()).cloned().unwrap_or_else(|| "<unk>".into()),
        }
    }
}

impl QAPair {
    /// BIO tags of the answer, all `O` when none were recorded.
    pub fn ner_or_default(&self) -> Vec<Bio> {
        if self.a_ner.len() == self.a_tokens.len() {
            self.a_ner.clone()
        } else {
            vec![Bio::O; self.a_tokens.len()]
        }
    }
}

/// Decoder recurrent state.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Tensor,
    pub c: Tensor,
}

/// Encoder output for one source, ready for decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    /// `n × 2H` concatenated forward/backward states.
    pub hg: Tensor,
    /// `1 × k` aspect distribution seen by the copy gate.
    pub p_alpha: Tensor,
    pub init: DecoderState,
    pub ext_ids: Vec<usize>,
    /// `V + |oov|`.
    pub ext_vocab: usize,
}

/// One decoder step's outputs on a tape.
struct StepVars {
    h: Var,
    c: Var,
    /// `1 × n` attention over source positions.
    z: Var,
    /// `1 × V` vocabulary distribution.
    p0: Var,
    /// `1 × 1` copy gate, absent when copying is disabled.
    beta: Option<Var>,
}

struct EncodedVars {
    hg: Var,
    p_alpha: Var,
    h0: Var,
    c0: Var,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GenerationResult {
    /// Extended ids, including a trailing `EOS` when one was produced.
    pub ids: Vec<usize>,
    /// Rendered tokens without the trailing `EOS`.
    pub tokens: Vec<String>,
    /// Mixture probability of each emitted id.
    pub step_probs: Vec<f64>,
    /// Mean log-probability of the emitted ids.
    pub score: f64,
}

/// A (source, question) pair for likelihood training.
#[derive(Debug, Clone, PartialEq)]
pub struct GenExample {
    pub source: SourceText,
    pub aspect: AspectInfo,
    pub question: Vec<String>,
}

impl GeneratorParams {
    pub fn new(dims: GeneratorDims, options: GenOptions, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let (h, x, b, v, k) = (dims.hidden, dims.input_dim(), dims.bottleneck, dims.vocab, dims.aspects);
        let s = INIT_SCALE;
        let enc_fwd = LstmCell::init(&mut store, "enc_fwd", x, h, s, &mut rng);
        let enc_bwd = LstmCell::init(&mut store, "enc_bwd", x, h, s, &mut rng);
        let dec = LstmCell::init(&mut store, "dec", dims.embed_dim, h, s, &mut rng);
        let ids = GeneratorIds {
            enc_fwd,
            enc_bwd,
            dec,
            init_w: store.push_uniform("init_w", 2 * h, h, s, &mut rng),
            init_b: store.push_uniform("init_b", 1, h, s, &mut rng),
            wh: store.push_uniform("wh", 2 * h, h, s, &mut rng),
            w1: store.push_uniform("w1", 3 * h, b, s, &mut rng),
            b1: store.push_uniform("b1", 1, b, s, &mut rng),
            w2: store.push_uniform("w2", b, v, s, &mut rng),
            b2: store.push_uniform("b2", 1, v, s, &mut rng),
            wc: store.push_uniform("wc", k, h, s, &mut rng),
            bc: store.push_uniform("bc", 1, 1, s, &mut rng),
        };
        GeneratorParams {
            store,
            ids,
            dims,
            options,
        }
    }

    pub fn from_named(
        dims: GeneratorDims,
        options: GenOptions,
        mut get: impl FnMut(&str) -> Result<Tensor>,
    ) -> Result<Self> {
        let mut params = Self::new(dims, options, 0);
        for id in params.store.ids().collect::<Vec<_>>() {
            let name = params.store.name(id).to_string();
            let value = get(&name)?;
            if value.dim() != params.store.get(id).dim() {
                return Err(Error::Shape(format!(
                    "generator parameter {name} has shape {:?}, expected {:?}",
                    value.dim(),
                    params.store.get(id).dim()
                )));
            }
            *params.store.get_mut(id) = value;
        }
        Ok(params)
    }

    /// `n × (d + 21)` extended embedding matrix.
    pub fn extended_embedding(&self, emb: &EmbeddingTable, src: &SourceText, aspect: &AspectInfo) -> Result<Tensor> {
        if aspect.alphas.len() != src.len() {
            return Err(Error::invalid(format!(
                "{} attention weights for {} tokens",
                aspect.alphas.len(),
                src.len()
            )));
        }
        let d = self.dims.embed_dim;
        if emb.dim() != d {
            return Err(Error::Shape(format!("embedding width {} != {d}", emb.dim())));
        }
        let words = emb.lookup(&src.ids);
        let mut out = Tensor::zeros((src.len(), self.dims.input_dim()));
        for i in 0..src.len() {
            let mut row = out.row_mut(i);
            for j in 0..d {
                row[j] = words[[i, j]];
            }
            row[d + src.pos[i].index()] = 1.0;
            row[d + PosTag::COUNT + src.ner[i].index()] = 1.0;
            if self.options.use_aspect {
                row[d + PosTag::COUNT + Bio::COUNT] = aspect.alphas[i];
            }
        }
        Ok(out)
    }

    fn gate_aspect(&self, aspect: &AspectInfo) -> Result<Tensor> {
        let k = self.dims.aspects;
        if self.options.use_aspect {
            if aspect.p_alpha.len() != k {
                return Err(Error::invalid(format!(
                    "aspect distribution has {} entries, expected {k}",
                    aspect.p_alpha.len()
                )));
            }
            Ok(Tensor::from_shape_vec((1, k), aspect.p_alpha.clone()).expect("row"))
        } else {
            Ok(Tensor::from_elem((1, k), 1.0 / k as f64))
        }
    }

    fn encode_on(&self, tape: &mut Tape, x: Tensor, p_alpha: Tensor) -> EncodedVars {
        let n = x.nrows();
        let x = tape.constant(x);
        let fwd = self.ids.enc_fwd.run(tape, x, 0..n);
        let mut bwd = self.ids.enc_bwd.run(tape, x, (0..n).rev());
        bwd.reverse();
        let rows: Vec<Var> = fwd.iter().zip(&bwd).map(|(&f, &b)| tape.concat_cols(&[f, b])).collect();
        let hg = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows) };
        let last = tape.concat_cols(&[fwd[n - 1], bwd[0]]);
        let w = tape.param(self.ids.init_w);
        let b = tape.param(self.ids.init_b);
        let h0 = tape.matmul(last, w);
        let h0 = tape.add(h0, b);
        let c0 = tape.constant(Tensor::zeros((1, self.dims.hidden)));
        let p_alpha = tape.constant(p_alpha);
        EncodedVars { hg, p_alpha, h0, c0 }
    }

    fn step_on(&self, tape: &mut Tape, emb: &EmbeddingTable, enc: &EncodedVars, prev: usize, h: Var, c: Var) -> StepVars {
        let prev = if prev < self.dims.vocab { prev } else { UNK };
        let x = tape.constant(emb.lookup(&[prev]));
        let (h, c) = self.ids.dec.step(tape, x, h, c);
        let wh = tape.param(self.ids.wh);
        let keys = tape.matmul(enc.hg, wh);
        let scores = tape.matmul_t(h, keys);
        let z = tape.softmax_rows(scores);
        let ctx = tape.matmul(z, enc.hg);
        let sc = tape.concat_cols(&[h, ctx]);
        let w1 = tape.param(self.ids.w1);
        let b1 = tape.param(self.ids.b1);
        let tau = tape.matmul(sc, w1);
        let tau = tape.add(tau, b1);
        let tau = tape.sigmoid(tau);
        let w2 = tape.param(self.ids.w2);
        let b2 = tape.param(self.ids.b2);
        let logits = tape.matmul(tau, w2);
        let logits = tape.add(logits, b2);
        let p0 = tape.softmax_rows(logits);
        let beta = self.options.use_copy.then(|| {
            let wc = tape.param(self.ids.wc);
            let bc = tape.param(self.ids.bc);
            let pw = tape.matmul(enc.p_alpha, wc);
            let g = tape.matmul_t(pw, h);
            let g = tape.add(g, bc);
            tape.sigmoid(g)
        });
        StepVars { h, c, z, p0, beta }
    }

    /// Probability of extended id `gold` under the step's mixture.
    fn gold_prob_on(&self, tape: &mut Tape, step: &StepVars, ext_ids: &[usize], gold: usize) -> Var {
        let vocab_part = (gold < self.dims.vocab).then(|| tape.pick(step.p0, 0, gold));
        let Some(beta) = step.beta else {
            return vocab_part.unwrap_or_else(|| tape.constant(Tensor::zeros((1, 1))));
        };
        let mask: Vec<f64> = ext_ids.iter().map(|&e| if e == gold { 1.0 } else { 0.0 }).collect();
        let mut parts = Vec::new();
        if let Some(p) = vocab_part {
            let keep = tape.one_minus(beta);
            parts.push(tape.mul(keep, p));
        }
        if mask.iter().any(|&m| m > 0.0) {
            let mask = tape.constant(Tensor::from_shape_vec((ext_ids.len(), 1), mask).expect("column"));
            let copy = tape.matmul(step.z, mask);
            parts.push(tape.mul(beta, copy));
        }
        if parts.is_empty() {
            tape.constant(Tensor::zeros((1, 1)))
        } else {
            tape.add_all(&parts)
        }
    }

    /// Mean teacher-forced negative log-likelihood of `targets` on the tape.
    fn nll_on(&self, tape: &mut Tape, emb: &EmbeddingTable, enc: &EncodedVars, ext_ids: &[usize], targets: &[usize]) -> Var {
        let (mut h, mut c) = (enc.h0, enc.c0);
        let mut prev = BOS;
        let mut logs = Vec::with_capacity(targets.len());
        for &gold in targets {
            let step = self.step_on(tape, emb, enc, prev, h, c);
            let p = self.gold_prob_on(tape, &step, ext_ids, gold);
            logs.push(tape.ln(p, PROB_FLOOR));
            h = step.h;
            c = step.c;
            prev = gold;
        }
        let total = tape.add_all(&logs);
        tape.scale(total, -1.0 / targets.len() as f64)
    }

    // ---- value-level API --------------------------------------------------

    /// Encoder states `h^g` (`n × 2H`).
    pub fn encode_review(&self, emb: &EmbeddingTable, src: &SourceText, aspect: &AspectInfo) -> Result<Tensor> {
        Ok(self.encode(emb, src, aspect)?.hg)
    }

    pub fn encode(&self, emb: &EmbeddingTable, src: &SourceText, aspect: &AspectInfo) -> Result<Encoded> {
        let x = self.extended_embedding(emb, src, aspect)?;
        let p_alpha = self.gate_aspect(aspect)?;
        let mut tape = Tape::with_params(&self.store);
        let enc = self.encode_on(&mut tape, x, p_alpha);
        Ok(Encoded {
            hg: tape.value(enc.hg).clone(),
            p_alpha: tape.value(enc.p_alpha).clone(),
            init: DecoderState {
                h: tape.value(enc.h0).clone(),
                c: tape.value(enc.c0).clone(),
            },
            ext_ids: src.ext_ids.clone(),
            ext_vocab: self.dims.vocab + src.oov.len(),
        })
    }

    /// One decoder step: next state and the mixture over extended ids.
    pub fn decode_step(
        &self,
        emb: &EmbeddingTable,
        enc: &Encoded,
        state: &DecoderState,
        prev: usize,
    ) -> (DecoderState, Vec<f64>) {
        let mut tape = Tape::with_params(&self.store);
        let vars = EncodedVars {
            hg: tape.constant_ref(&enc.hg),
            p_alpha: tape.constant_ref(&enc.p_alpha),
            h0: tape.constant_ref(&state.h),
            c0: tape.constant_ref(&state.c),
        };
        let step = self.step_on(&mut tape, emb, &vars, prev, vars.h0, vars.c0);
        let beta = step.beta.map_or(0.0, |b| tape.scalar(b));
        let mut dist = vec![0.0; enc.ext_vocab];
        for (d, p) in dist.iter_mut().zip(tape.value(step.p0).iter()) {
            *d = (1.0 - beta) * p;
        }
        if beta > 0.0 {
            for (&e, z) in enc.ext_ids.iter().zip(tape.value(step.z).iter()) {
                dist[e] += beta * z;
            }
        }
        let next = DecoderState {
            h: tape.value(step.h).clone(),
            c: tape.value(step.c).clone(),
        };
        (next, dist)
    }

    /// Copy gate value for one step, for inspection.
    pub fn copy_gate(&self, emb: &EmbeddingTable, enc: &Encoded, state: &DecoderState, prev: usize) -> f64 {
        let mut tape = Tape::with_params(&self.store);
        let vars = EncodedVars {
            hg: tape.constant_ref(&enc.hg),
            p_alpha: tape.constant_ref(&enc.p_alpha),
            h0: tape.constant_ref(&state.h),
            c0: tape.constant_ref(&state.c),
        };
        let step = self.step_on(&mut tape, emb, &vars, prev, vars.h0, vars.c0);
        step.beta.map_or(0.0, |b| tape.scalar(b))
    }

    /// Mean negative log-probability of `question` (plus `EOS`) given the
    /// source under teacher forcing. Tokens from the first `<pad>` on are
    /// ignored.
    pub fn log_perplexity(
        &self,
        emb: &EmbeddingTable,
        vocab: &Vocab,
        question: &[String],
        src: &SourceText,
        aspect: &AspectInfo,
    ) -> Result<f64> {
        Ok(self.log_perplexities(emb, vocab, &[question], src, aspect)?[0])
    }

    /// Log-perplexities of several questions against one source, encoding
    /// the source once.
    pub fn log_perplexities<Q: AsRef<[String]>>(
        &self,
        emb: &EmbeddingTable,
        vocab: &Vocab,
        questions: &[Q],
        src: &SourceText,
        aspect: &AspectInfo,
    ) -> Result<Vec<f64>> {
        let x = self.extended_embedding(emb, src, aspect)?;
        let p_alpha = self.gate_aspect(aspect)?;
        let mut tape = Tape::with_params(&self.store);
        let enc = self.encode_on(&mut tape, x, p_alpha);
        questions
            .iter()
            .map(|q| {
                let q = strip_padding(q.as_ref());
                if q.is_empty() {
                    return Err(Error::invalid("question is empty"));
                }
                let targets = src.target_ids(q, vocab, self.options.use_copy);
                let nll = self.nll_on(&mut tape, emb, &enc, &src.ext_ids, &targets);
                Ok(tape.scalar(nll))
            })
            .collect()
    }

    /// Teacher-forced loss of one example and its gradient.
    pub fn loss_and_gradient(&self, emb: &EmbeddingTable, vocab: &Vocab, ex: &GenExample) -> Result<(f64, Gradients)> {
        let x = self.extended_embedding(emb, &ex.source, &ex.aspect)?;
        let p_alpha = self.gate_aspect(&ex.aspect)?;
        let q = strip_padding(&ex.question);
        if q.is_empty() {
            return Err(Error::invalid("question is empty"));
        }
        let targets = ex.source.target_ids(q, vocab, self.options.use_copy);
        let mut tape = Tape::with_params(&self.store);
        let enc = self.encode_on(&mut tape, x, p_alpha);
        let nll = self.nll_on(&mut tape, emb, &enc, &ex.source.ext_ids, &targets);
        Ok((tape.scalar(nll), tape.backward(nll)))
    }

    /// Sum of per-example mean negative log-likelihoods.
    pub fn loss(&self, emb: &EmbeddingTable, vocab: &Vocab, batch: &[GenExample]) -> Result<f64> {
        batch
            .iter()
            .map(|ex| self.log_perplexity(emb, vocab, &ex.question, &ex.source, &ex.aspect))
            .sum()
    }

    /// One Adam step descending the summed NLL of the batch. Returns the
    /// per-example losses before the step.
    pub fn update(
        &mut self,
        optimizer: &mut Adam,
        emb: &EmbeddingTable,
        vocab: &Vocab,
        batch: &[GenExample],
    ) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let results = batch
            .par_iter()
            .map(|ex| self.loss_and_gradient(emb, vocab, ex))
            .collect::<Result<Vec<_>>>()?;
        let mut grads = Gradients::zeros_like(&self.store);
        let mut losses = Vec::with_capacity(results.len());
        for (loss, g) in &results {
            grads.accumulate(g, 1.0);
            losses.push(*loss);
        }
        optimizer.step(&mut self.store, &grads);
        Ok(losses)
    }

    /// Decodes a question. `beam_size == 1` is greedy decoding.
    pub fn generate(
        &self,
        emb: &EmbeddingTable,
        vocab: &Vocab,
        src: &SourceText,
        aspect: &AspectInfo,
        beam_size: usize,
        max_len: usize,
    ) -> Result<GenerationResult> {
        if max_len == 0 {
            return Err(Error::invalid("max_len must be at least 1"));
        }
        let enc = self.encode(emb, src, aspect)?;
        let model = DecoderModel {
            params: self,
            emb,
            enc: &enc,
        };
        let path = if beam_size <= 1 {
            greedy_search(&model, enc.init.clone(), BOS, EOS, max_len)
        } else {
            beam_search(&model, enc.init.clone(), BOS, EOS, beam_size, max_len)
        };
        let tokens = path
            .ids
            .iter()
            .filter(|&&id| id != EOS)
            .map(|&id| src.render(id, vocab))
            .collect();
        let score = path.probs.iter().map(|p| p.max(PROB_FLOOR).ln()).sum::<f64>() / path.ids.len() as f64;
        Ok(GenerationResult {
            ids: path.ids,
            tokens,
            step_probs: path.probs,
            score,
        })
    }
}

/// Drops everything from the first `<pad>` token on.
fn strip_padding(q: &[String]) -> &[String] {
    let end = q.iter().position(|t| t == "<pad>").unwrap_or(q.len());
    &q[..end]
}

struct DecoderModel<'a> {
    params: &'a GeneratorParams,
    emb: &'a EmbeddingTable,
    enc: &'a Encoded,
}

impl StepModel for DecoderModel<'_> {
    type State = DecoderState;

    fn step(&self, state: &DecoderState, prev: usize) -> (DecoderState, Vec<f64>) {
        self.params.decode_step(self.emb, self.enc, state, prev)
    }
}

/// Anything that yields a next-token distribution from a state and the
/// previously emitted token.
pub trait StepModel {
    type State: Clone;
    fn step(&self, state: &Self::State, prev: usize) -> (Self::State, Vec<f64>);
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchPath {
    pub ids: Vec<usize>,
    pub probs: Vec<f64>,
}

/// Argmax at each step; ties go to the lowest id.
pub fn greedy_search<M: StepModel>(model: &M, init: M::State, bos: usize, eos: usize, max_len: usize) -> SearchPath {
    let mut state = init;
    let mut prev = bos;
    let mut path = SearchPath {
        ids: Vec::new(),
        probs: Vec::new(),
    };
    while path.ids.len() < max_len {
        let (next, dist) = model.step(&state, prev);
        let (best, p) = argmax(&dist);
        path.ids.push(best);
        path.probs.push(p);
        if best == eos {
            break;
        }
        state = next;
        prev = best;
    }
    path
}

fn argmax(dist: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    (best, dist[best])
}

/// Beam search keeping `beam` hypotheses ranked by summed log-probability.
/// Finished hypotheses leave the beam; the result is the finished (or
/// length-capped) hypothesis with the best mean log-probability.
pub fn beam_search<M: StepModel>(
    model: &M,
    init: M::State,
    bos: usize,
    eos: usize,
    beam: usize,
    max_len: usize,
) -> SearchPath {
    let empty = SearchPath {
        ids: Vec::new(),
        probs: Vec::new(),
    };
    let mut alive = vec![(empty, init, 0.0)];
    let mut finished: Vec<(SearchPath, f64)> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<(usize, usize, f64, f64)> = Vec::new();
        let mut nexts = Vec::with_capacity(alive.len());
        for (h, (path, state, lp)) in alive.iter().enumerate() {
            let prev = path.ids.last().copied().unwrap_or(bos);
            let (next, dist) = model.step(state, prev);
            // Only the per-hypothesis top `beam` can survive.
            let mut order: Vec<usize> = (0..dist.len()).collect();
            order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
            for &tok in order.iter().take(beam) {
                cands.push((h, tok, dist[tok], lp + dist[tok].max(PROB_FLOOR).ln()));
            }
            nexts.push(next);
        }
        cands.sort_by(|a, b| {
            b.3.total_cmp(&a.3)
                .then_with(|| alive[a.0].0.ids.cmp(&alive[b.0].0.ids))
                .then(a.1.cmp(&b.1))
        });
        cands.truncate(beam);
        let mut next_alive = Vec::new();
        for (h, tok, p, lp) in cands {
            let mut path = alive[h].0.clone();
            path.ids.push(tok);
            path.probs.push(p);
            if tok == eos {
                finished.push((path, lp));
            } else {
                next_alive.push((path, nexts[h].clone(), lp));
            }
        }
        alive = next_alive;
        if alive.is_empty() {
            break;
        }
    }
    finished.extend(alive.into_iter().map(|(p, _, lp)| (p, lp)));
    let mut best: Option<(SearchPath, f64)> = None;
    for (path, lp) in finished {
        let norm = lp / path.ids.len() as f64;
        if best.as_ref().map_or(true, |(_, b)| norm > *b) {
            best = Some((path, norm));
        }
    }
    best.map(|(p, _)| p).expect("beam search always yields a path")
}

/// Mean of `-ln p` over step probabilities, with the usual floor.
pub fn mean_negative_log(probs: &[f64]) -> f64 {
    probs.iter().map(|p| -p.max(PROB_FLOOR).ln()).sum::<f64>() / probs.len() as f64
}
