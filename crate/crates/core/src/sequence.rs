//! Token-level distillation between tabular Markov language models.
//!
//! A model of order `n` stores one logit row per context: the last `n`
//! tokens, or, near the sequence start, the `m < n` tokens seen so far
//! padded on the left with a start symbol. Sequence losses are sums of
//! per-position divergences under teacher forcing.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::adaptive::{solve_head_mask, validate_mu, AdaptiveParams, Divergence};
use crate::divergence::{softmax, Distribution, DivergenceEval, LogitVector};
use crate::error::{check_len, Error, Result};
use crate::toy::{check_finite, error_split, EpochRecord, TrainConfig, TrainingTrace};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const MAX_SEQUENCE_LEN: usize = 1 << 16;
const START: &str = "<s>";

#[derive(Debug, Clone, PartialEq)]
pub struct TabularLM {
    vocab: usize,
    order: usize,
    rows: Vec<LogitVector>,
}

/// Number of reachable contexts: `Σ_{m=0..=order} vocab^m`.
fn context_count(vocab: usize, order: usize) -> Result<usize> {
    let mut total: usize = 0;
    let mut block: usize = 1;
    for _ in 0..=order {
        total = total
            .checked_add(block)
            .ok_or_else(|| Error::invalid("context table too large"))?;
        block = block
            .checked_mul(vocab)
            .ok_or_else(|| Error::invalid("context table too large"))?;
    }
    Ok(total)
}

impl TabularLM {
    pub fn new(vocab: usize, order: usize, rows: Vec<LogitVector>) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::invalid(format!("vocabulary size {vocab} < 2")));
        }
        check_len(context_count(vocab, order)?, rows.len())?;
        for r in &rows {
            check_len(vocab, r.len())?;
        }
        Ok(TabularLM { vocab, order, rows })
    }

    /// Rows drawn i.i.d. from `N(0, scale²)`.
    pub fn random(vocab: usize, order: usize, scale: f64, seed: u64) -> Result<Self> {
        let normal =
            Normal::new(0.0, scale).map_err(|e| Error::invalid(format!("scale {scale}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..context_count(vocab, order)?)
            .map(|_| LogitVector::new((0..vocab).map(|_| normal.sample(&mut rng)).collect()))
            .collect::<Result<Vec<_>>>()?;
        TabularLM::new(vocab, order, rows)
    }

    pub fn uniform(vocab: usize, order: usize) -> Result<Self> {
        let rows = (0..context_count(vocab, order)?)
            .map(|_| LogitVector::zeros(vocab))
            .collect::<Result<Vec<_>>>()?;
        TabularLM::new(vocab, order, rows)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn rows(&self) -> &[LogitVector] {
        &self.rows
    }

    pub fn row(&self, context: usize) -> Option<&LogitVector> {
        self.rows.get(context)
    }

    pub fn row_mut(&mut self, context: usize) -> Option<&mut LogitVector> {
        self.rows.get_mut(context)
    }

    pub fn num_contexts(&self) -> usize {
        self.rows.len()
    }

    /// Context id for predicting the token after `prefix`.
    pub fn context_index(&self, prefix: &[usize]) -> usize {
        let m = prefix.len().min(self.order);
        let offset: usize = (0..m).map(|k| self.vocab.pow(k as u32)).sum();
        let local = prefix[prefix.len() - m..]
            .iter()
            .fold(0usize, |acc, &t| acc * self.vocab + t);
        offset + local
    }

    /// Inverse of [`TabularLM::context_index`]: the real tokens of a context.
    fn context_tokens(&self, mut id: usize) -> Vec<usize> {
        let mut m = 0;
        let mut block = 1;
        while id >= block {
            id -= block;
            m += 1;
            block *= self.vocab;
        }
        let mut tokens = vec![0; m];
        for slot in tokens.iter_mut().rev() {
            *slot = id % self.vocab;
            id /= self.vocab;
        }
        tokens
    }

    fn context_key(&self, id: usize) -> String {
        let tokens = self.context_tokens(id);
        let mut parts: Vec<String> = vec![START.to_string(); self.order - tokens.len()];
        parts.extend(tokens.iter().map(|t| t.to_string()));
        parts.join(",")
    }

    fn parse_context_key(&self, key: &str) -> Result<usize> {
        let bad = || Error::Serde(format!("malformed context key `{key}`"));
        let parts: Vec<&str> = if self.order == 0 {
            if !key.is_empty() {
                return Err(bad());
            }
            Vec::new()
        } else {
            key.split(',').collect()
        };
        if parts.len() != self.order {
            return Err(bad());
        }
        let pads = parts.iter().take_while(|p| **p == START).count();
        let tokens = parts[pads..]
            .iter()
            .map(|p| match p.parse::<usize>() {
                Ok(t) if t < self.vocab => Ok(t),
                _ => Err(bad()),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.context_index(&tokens))
    }

    pub fn to_json(&self) -> Result<String> {
        let rows = (0..self.rows.len())
            .map(|id| (self.context_key(id), self.rows[id].logits().to_vec()))
            .collect();
        let file = ModelFile {
            version: MODEL_FORMAT_VERSION,
            vocab: self.vocab,
            order: self.order,
            rows,
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        if file.version != MODEL_FORMAT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported model version {}",
                file.version
            )));
        }
        if file.vocab < 2 {
            return Err(Error::Serde(format!("vocabulary size {} < 2", file.vocab)));
        }
        let n = context_count(file.vocab, file.order)?;
        let shell = TabularLM {
            vocab: file.vocab,
            order: file.order,
            rows: Vec::new(),
        };
        let mut rows: Vec<Option<LogitVector>> = vec![None; n];
        for (key, logits) in file.rows {
            let id = shell.parse_context_key(&key)?;
            if rows[id].is_some() {
                return Err(Error::Serde(format!("duplicate context `{key}`")));
            }
            rows[id] = Some(LogitVector::new(logits)?);
        }
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(id, r)| {
                r.ok_or_else(|| {
                    Error::Serde(format!("missing context `{}`", shell.context_key(id)))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        TabularLM::new(file.vocab, file.order, rows)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    #[serde(rename = "V")]
    vocab: usize,
    order: usize,
    rows: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() > MAX_SEQUENCE_LEN {
            return Err(Error::invalid(format!(
                "sequence length {} outside [1, {MAX_SEQUENCE_LEN}]",
                tokens.len()
            )));
        }
        Ok(TokenSequence(tokens))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t >= vocab) {
            Some(t) => Err(Error::invalid(format!(
                "token {t} outside vocabulary {vocab}"
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLossReport {
    pub total: f64,
    pub per_token: Vec<DivergenceEval>,
    /// `(w_fkl, w_rkl)` per position; `None` for non-adaptive losses.
    pub per_token_weights: Vec<Option<(f64, f64)>>,
    /// Head/tail/max error of each position under the teacher's mask.
    pub per_token_errors: Vec<crate::toy::ErrorSplit>,
}

fn check_pair(teacher: &TabularLM, student: &TabularLM) -> Result<()> {
    if teacher.vocab != student.vocab || teacher.order != student.order {
        return Err(Error::invalid(format!(
            "teacher is V={} order {}, student is V={} order {}",
            teacher.vocab, teacher.order, student.vocab, student.order
        )));
    }
    Ok(())
}

/// Teacher-forced sum of per-position divergences over `seq`.
pub fn sequence_loss(
    teacher: &TabularLM,
    student: &TabularLM,
    seq: &TokenSequence,
    divergence: Divergence,
    params: &AdaptiveParams,
) -> Result<SequenceLossReport> {
    check_pair(teacher, student)?;
    seq.check_vocab(teacher.vocab)?;
    validate_mu(params.mu)?;
    let tokens = seq.tokens();
    let mut report = SequenceLossReport {
        total: 0.0,
        per_token: Vec::with_capacity(tokens.len()),
        per_token_weights: Vec::with_capacity(tokens.len()),
        per_token_errors: Vec::with_capacity(tokens.len()),
    };
    for t in 0..tokens.len() {
        let ctx = teacher.context_index(&tokens[..t]);
        let (zp, zq) = match (teacher.row(ctx), student.row(ctx)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Internal(format!("no row for context {ctx}"))),
        };
        let p = softmax(zp);
        let ev = divergence.evaluate(&p, zq, params)?;
        let mask = solve_head_mask(&p, params.mu)?;
        report
            .per_token_errors
            .push(error_split(&p, &softmax(zq), &mask));
        report.total += ev.eval.value;
        report.per_token_weights.push(ev.weights);
        report.per_token.push(ev.eval);
    }
    Ok(report)
}

/// Final student together with the training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutcome {
    pub student: TabularLM,
    pub trace: TrainingTrace,
}

/// Occurrence count of every context across the corpus, in context-id order.
pub fn context_counts(model: &TabularLM, corpus: &[TokenSequence]) -> Vec<usize> {
    let mut counts = vec![0usize; model.num_contexts()];
    for seq in corpus {
        let tokens = seq.tokens();
        for t in 0..tokens.len() {
            counts[model.context_index(&tokens[..t])] += 1;
        }
    }
    counts
}

/// Gradient descent on every student row. A row's gradient is the sum of the
/// per-token gradients at all corpus positions using that context, i.e. its
/// occurrence count times the row gradient. Metrics are taken over visited
/// rows: head/tail errors are summed, `max_abs_error` is the max over rows,
/// and the logged weights are token-weighted means.
pub fn distill_sequences(
    teacher: &TabularLM,
    student0: &TabularLM,
    corpus: &[TokenSequence],
    cfg: &TrainConfig,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    check_pair(teacher, student0)?;
    if corpus.is_empty() {
        return Err(Error::invalid("corpus is empty"));
    }
    for seq in corpus {
        seq.check_vocab(teacher.vocab)?;
    }
    let params = cfg.params();
    let counts = context_counts(teacher, corpus);
    let visited: Vec<(usize, f64)> = counts
        .iter()
        .enumerate()
        .filter(|(_, c)| **c > 0)
        .map(|(id, c)| (id, *c as f64))
        .collect();
    let total_tokens: f64 = visited.iter().map(|(_, c)| c).sum();
    let targets: Vec<(Distribution, crate::adaptive::HeadMask)> = visited
        .iter()
        .map(|&(id, _)| {
            let p = softmax(&teacher.rows[id]);
            let m = solve_head_mask(&p, cfg.mu)?;
            Ok((p, m))
        })
        .collect::<Result<_>>()?;

    let mut student = student0.clone();
    let mut trace = TrainingTrace::default();
    for epoch in 0..=cfg.epochs {
        let mut loss = 0.0;
        let mut head = 0.0;
        let mut tail = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut weight_sum = (0.0, 0.0);
        let mut grads = Vec::with_capacity(visited.len());
        for (&(id, count), (p, mask)) in visited.iter().zip(&targets) {
            let zq = &student.rows[id];
            let ev = cfg.divergence.evaluate(p, zq, &params)?;
            check_finite(epoch, ev.eval.value, &ev.eval.grad_student_logits)?;
            let split = error_split(p, &softmax(zq), mask);
            loss += count * ev.eval.value;
            head += split.head;
            tail += split.tail;
            max_abs = max_abs.max(split.max_abs);
            if let Some((wf, wr)) = ev.weights {
                weight_sum.0 += count * wf;
                weight_sum.1 += count * wr;
            }
            let g: Vec<f64> = ev
                .eval
                .grad_student_logits
                .iter()
                .map(|g| count * g)
                .collect();
            grads.push(g);
        }
        let weights = cfg
            .divergence
            .is_adaptive()
            .then(|| (weight_sum.0 / total_tokens, weight_sum.1 / total_tokens));
        trace.records.push(EpochRecord {
            epoch,
            loss,
            head_error: head,
            tail_error: tail,
            max_abs_error: max_abs,
            weights,
        });
        if trace.converged_at.is_none() && max_abs < cfg.convergence_tol {
            trace.converged_at = Some(epoch);
        }
        if epoch < cfg.epochs {
            for (&(id, _), g) in visited.iter().zip(&grads) {
                student.rows[id]
                    .descend(g, cfg.learning_rate)
                    .map_err(|e| Error::Numerical {
                        epoch,
                        message: e.to_string(),
                    })?;
            }
        }
    }
    Ok(DistillOutcome { student, trace })
}

/// Ancestral sampling of `count` sequences of exactly `max_len` tokens.
pub fn sample_corpus(
    model: &TabularLM,
    count: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    if count == 0 || max_len == 0 || max_len > MAX_SEQUENCE_LEN {
        return Err(Error::invalid(format!(
            "count {count} and length {max_len} must be positive (length ≤ {MAX_SEQUENCE_LEN})"
        )));
    }
    let samplers = model
        .rows
        .iter()
        .map(|r| {
            WeightedIndex::new(softmax(r).probs())
                .map_err(|e| Error::Internal(format!("row is not samplable: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut tokens = Vec::with_capacity(max_len);
            for _ in 0..max_len {
                let ctx = model.context_index(&tokens);
                tokens.push(samplers[ctx].sample(&mut rng));
            }
            TokenSequence::new(tokens)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::{fkl, rkl};

    #[test]
    fn context_indexing() {
        let m = TabularLM::uniform(3, 2).unwrap();
        assert_eq!(m.num_contexts(), 1 + 3 + 9);
        assert_eq!(m.context_index(&[]), 0);
        assert_eq!(m.context_index(&[2]), 3);
        assert_eq!(m.context_index(&[1, 2]), 4 + 5);
        assert_eq!(m.context_index(&[0, 0, 1, 2]), 4 + 5);
        for id in 0..m.num_contexts() {
            let key = m.context_key(id);
            assert_eq!(m.parse_context_key(&key).unwrap(), id, "{key}");
        }
        assert_eq!(m.context_key(0), "<s>,<s>");
        assert_eq!(m.context_key(3), "<s>,2");
        assert!(m.parse_context_key("1,<s>").is_err());
        assert!(m.parse_context_key("3,0").is_err());

        let unigram = TabularLM::uniform(4, 0).unwrap();
        assert_eq!(unigram.num_contexts(), 1);
        assert_eq!(unigram.context_index(&[1, 2, 3]), 0);
    }

    #[test]
    fn identical_models_give_zero_loss() {
        let m = TabularLM::random(5, 2, 1.5, 1).unwrap();
        let seq = TokenSequence::new(vec![0, 4, 2, 2, 1, 3]).unwrap();
        for d in Divergence::ALL {
            let r = sequence_loss(&m, &m, &seq, d, &AdaptiveParams::default()).unwrap();
            assert_eq!(r.total, 0.0, "{d}");
            assert_eq!(r.per_token.len(), 6);
        }
    }

    #[test]
    fn single_token_equals_single_divergence() {
        let t = TabularLM::random(4, 1, 1.0, 2).unwrap();
        let s = TabularLM::random(4, 1, 1.0, 3).unwrap();
        let seq = TokenSequence::new(vec![2]).unwrap();
        let r = sequence_loss(&t, &s, &seq, Divergence::Rkl, &AdaptiveParams::default()).unwrap();
        let p = softmax(t.row(0).unwrap());
        let q = softmax(s.row(0).unwrap());
        assert_eq!(r.total, rkl(&p, &q).unwrap());
        let r = sequence_loss(&t, &s, &seq, Divergence::Fkl, &AdaptiveParams::default()).unwrap();
        assert_eq!(r.total, fkl(&p, &q).unwrap());
    }

    #[test]
    fn vocabulary_mismatch_rejected() {
        let t = TabularLM::uniform(4, 1).unwrap();
        let s = TabularLM::uniform(5, 1).unwrap();
        let seq = TokenSequence::new(vec![0]).unwrap();
        assert!(sequence_loss(&t, &s, &seq, Divergence::Fkl, &AdaptiveParams::default()).is_err());
        let bad = TokenSequence::new(vec![4]).unwrap();
        assert!(sequence_loss(&t, &t, &bad, Divergence::Fkl, &AdaptiveParams::default()).is_err());
        assert!(TokenSequence::new(vec![]).is_err());
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let m = TabularLM::random(3, 2, 2.0, 11).unwrap();
        let back = TabularLM::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let bits = |x: &TabularLM| -> Vec<u64> {
            x.rows()
                .iter()
                .flat_map(|r| r.logits().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn json_rejects_bad_files() {
        let m = TabularLM::random(2, 1, 1.0, 0).unwrap();
        let text = m.to_json().unwrap();
        let v2 = text.replacen("\"version\": 1", "\"version\": 2", 1);
        assert!(TabularLM::from_json(&v2).is_err());
        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value["rows"].as_object_mut().unwrap().remove("<s>");
        assert!(TabularLM::from_json(&value.to_string()).is_err());
    }

    #[test]
    fn saturated_row_always_emits_its_token() {
        let rows = vec![
            LogitVector::new(vec![40.0, -40.0]).unwrap(),
            LogitVector::new(vec![40.0, -40.0]).unwrap(),
            LogitVector::new(vec![0.0, 0.0]).unwrap(),
        ];
        let m = TabularLM::new(2, 1, rows).unwrap();
        let corpus = sample_corpus(&m, 50, 8, 5).unwrap();
        assert!(corpus.iter().all(|s| s.tokens().iter().all(|&t| t == 0)));
        assert_eq!(corpus, sample_corpus(&m, 50, 8, 5).unwrap());
        assert!(corpus.iter().all(|s| s.len() == 8));
    }

    #[test]
    fn uniform_model_unigram_frequencies() {
        let m = TabularLM::uniform(4, 1).unwrap();
        let corpus = sample_corpus(&m, 1000, 10, 2024).unwrap();
        let mut freq = [0usize; 4];
        for s in &corpus {
            for &t in s.tokens() {
                freq[t] += 1;
            }
        }
        for f in freq {
            let rate = f as f64 / 10_000.0;
            assert!((rate - 0.25).abs() < 0.02, "{rate}");
        }
    }

    #[test]
    fn distilling_from_teacher_is_a_no_op() {
        let t = TabularLM::random(3, 1, 1.0, 4).unwrap();
        let corpus = sample_corpus(&t, 5, 6, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let out = distill_sequences(&t, &t, &corpus, &cfg).unwrap();
        assert_eq!(out.student, t);
        assert_eq!(out.trace.converged_at, Some(0));
        assert!(out.trace.records.iter().all(|r| r.loss == 0.0));
    }

    #[test]
    fn unvisited_rows_are_untouched() {
        let t = TabularLM::random(3, 1, 1.0, 8).unwrap();
        let s0 = TabularLM::random(3, 1, 1.0, 9).unwrap();
        // context "2" never appears as a prefix
        let corpus = vec![
            TokenSequence::new(vec![0, 1, 0, 1, 2]).unwrap(),
            TokenSequence::new(vec![1, 0, 2]).unwrap(),
        ];
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let out = distill_sequences(&t, &s0, &corpus, &cfg).unwrap();
        let c2 = t.context_index(&[2]);
        assert_eq!(out.student.row(c2), s0.row(c2));
        assert_ne!(
            out.student.row(t.context_index(&[0])),
            s0.row(t.context_index(&[0]))
        );
    }
}
