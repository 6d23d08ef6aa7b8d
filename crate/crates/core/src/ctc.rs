//! CTC loss, greedy best-path decoding, and edit-distance error rates.
//!
//! The loss runs the standard blank-augmented forward recursion in
//! log space (f64 internally regardless of tensor dtype) and backs
//! propagates through the alpha-beta posterior: d loss / d logit[t][k] =
//! p_t[k] - gamma_t[k]. A brute-force alignment enumerator serves as the
//! independent oracle on small instances.
//!
//! Blank is index 0 everywhere.

use serde::Serialize;

use crate::dataio::BLANK_INDEX;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{make_op, Tensor};

const NEG_INF: f64 = f64::NEG_INFINITY;

fn lse2(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_softmax_rows(logits: &[f64], t: usize, v: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * v];
    for row in 0..t {
        let r = &logits[row * v..(row + 1) * v];
        let mx = r.iter().cloned().fold(NEG_INF, f64::max);
        let lse = mx + r.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
        for k in 0..v {
            out[row * v + k] = r[k] - lse;
        }
    }
    out
}

/// Minimum number of frames that can emit `target`: its length plus one
/// forced blank per adjacent repeat.
pub fn min_frames_for(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

fn validate_target(target: &[usize], vocab: usize) -> Result<()> {
    for &k in target {
        if k == BLANK_INDEX || k >= vocab {
            return Err(Error::Ctc(format!(
                "target token {k} outside [1, {vocab})"
            )));
        }
    }
    Ok(())
}

fn state_label(target: &[usize], s: usize) -> usize {
    if s % 2 == 0 {
        BLANK_INDEX
    } else {
        target[(s - 1) / 2]
    }
}

/// Alpha recursion over the blank-augmented state lattice; returns
/// (alpha, log_probs, logP).
fn ctc_alpha(
    log_probs: &[f64],
    t_len: usize,
    v: usize,
    target: &[usize],
) -> (Vec<f64>, f64) {
    let s_len = 2 * target.len() + 1;
    let mut alpha = vec![NEG_INF; t_len * s_len];
    alpha[0] = log_probs[BLANK_INDEX];
    if s_len > 1 {
        alpha[1] = log_probs[state_label(target, 1)];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let lab = state_label(target, s);
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = lse2(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && lab != BLANK_INDEX && lab != state_label(target, s - 2) {
                acc = lse2(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = acc + log_probs[t * v + lab];
        }
    }
    let mut log_p = alpha[(t_len - 1) * s_len + s_len - 1];
    if s_len >= 2 {
        log_p = lse2(log_p, alpha[(t_len - 1) * s_len + s_len - 2]);
    }
    (alpha, log_p)
}

/// Beta recursion matching [`ctc_alpha`]'s convention: beta_t(s) covers
/// emissions from t+1 on, so alpha_t(s) + beta_t(s) sums full paths
/// through state s at frame t.
fn ctc_beta(log_probs: &[f64], t_len: usize, v: usize, target: &[usize]) -> Vec<f64> {
    let s_len = 2 * target.len() + 1;
    let mut beta = vec![NEG_INF; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len >= 2 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s] + log_probs[(t + 1) * v + state_label(target, s)];
            if s + 1 < s_len {
                acc = lse2(
                    acc,
                    beta[(t + 1) * s_len + s + 1]
                        + log_probs[(t + 1) * v + state_label(target, s + 1)],
                );
            }
            if s + 2 < s_len {
                let lab2 = state_label(target, s + 2);
                if lab2 != BLANK_INDEX && lab2 != state_label(target, s) {
                    acc = lse2(
                        acc,
                        beta[(t + 1) * s_len + s + 2] + log_probs[(t + 1) * v + lab2],
                    );
                }
            }
            beta[t * s_len + s] = acc;
        }
    }
    beta
}

/// Differentiable CTC negative log-likelihood of `target` under
/// `[T, vocab]` logits.
pub fn ctc_loss<S: Scalar>(logits: &Tensor<S>, target: &[usize]) -> Result<Tensor<S>> {
    let (t_len, v) = (logits.rows(), logits.cols());
    validate_target(target, v)?;
    let min_t = min_frames_for(target);
    if t_len < min_t {
        return Err(Error::Ctc(format!(
            "inadmissible target: {t_len} frames cannot emit a target needing {min_t}"
        )));
    }

    let raw: Vec<f64> = logits.data().iter().map(|x| x.to_f64()).collect();
    let log_probs = log_softmax_rows(&raw, t_len, v);
    let (_, log_p) = ctc_alpha(&log_probs, t_len, v, target);
    let loss = -log_p;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("CTC loss is not finite: {loss}")));
    }

    let target_owned: Vec<usize> = target.to_vec();
    Ok(make_op(
        "ctc_loss",
        vec![1],
        vec![S::from_f64(loss)],
        vec![logits.clone()],
        Box::new(move |g, _out, parents| {
            let raw: Vec<f64> = parents[0].data().iter().map(|x| x.to_f64()).collect();
            let log_probs = log_softmax_rows(&raw, t_len, v);
            let (alpha, log_p) = ctc_alpha(&log_probs, t_len, v, &target_owned);
            let beta = ctc_beta(&log_probs, t_len, v, &target_owned);
            let s_len = 2 * target_owned.len() + 1;
            let go = g[0].to_f64();
            parents[0].accum_grad_with(|gl| {
                for t in 0..t_len {
                    // gamma_t[k] = sum over states labelled k of the
                    // posterior at (t, s).
                    let mut gamma = vec![0.0f64; v];
                    for s in 0..s_len {
                        let w = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
                        if w > -700.0 {
                            gamma[state_label(&target_owned, s)] += w.exp();
                        }
                    }
                    for k in 0..v {
                        let p = log_probs[t * v + k].exp();
                        gl[t * v + k] += S::from_f64(go * (p - gamma[k]));
                    }
                }
            });
        }),
    ))
}

/// Brute-force oracle: enumerate every length-T label sequence, sum the
/// probabilities of those that collapse to `target`. Requires
/// `vocab^T <= 1e6`. Returns +inf for impossible targets.
pub fn ctc_loss_bruteforce(logits: &[f64], t_len: usize, v: usize, target: &[usize]) -> Result<f64> {
    validate_target(target, v)?;
    let combos = (v as f64).powi(t_len as i32);
    if combos > 1e6 {
        return Err(Error::Ctc(format!(
            "brute-force instance too large: {v}^{t_len} paths"
        )));
    }
    let log_probs = log_softmax_rows(logits, t_len, v);
    let mut total = NEG_INF;
    let mut seq = vec![0usize; t_len];
    loop {
        // Collapse: drop repeats then blanks.
        let mut collapsed = Vec::new();
        let mut prev = usize::MAX;
        for &k in &seq {
            if k != prev && k != BLANK_INDEX {
                collapsed.push(k);
            }
            prev = k;
        }
        if collapsed == target {
            let mut lp = 0.0;
            for (t, &k) in seq.iter().enumerate() {
                lp += log_probs[t * v + k];
            }
            total = lse2(total, lp);
        }
        // Next sequence in base-v counting order.
        let mut pos = 0;
        loop {
            if pos == t_len {
                return Ok(-total);
            }
            seq[pos] += 1;
            if seq[pos] < v {
                break;
            }
            seq[pos] = 0;
            pos += 1;
        }
    }
}

/// Per-frame argmax (ties to the lower index), collapse repeats, drop
/// blanks.
pub fn greedy_decode<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let (t_len, v) = (logits.rows(), logits.cols());
    let d = logits.data();
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..t_len {
        let row = &d[t * v..(t + 1) * v];
        let mut best = 0;
        for (k, &val) in row.iter().enumerate() {
            if val > row[best] {
                best = k;
            }
        }
        if best != prev && best != BLANK_INDEX {
            out.push(best);
        }
        prev = best;
    }
    out
}

// ---------------------------------------------------------------------------
// Edit distance and error rates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Levenshtein distance with unit costs and a deterministic backtrace:
/// diagonal (match/substitution) is preferred over deletion, deletion
/// over insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let m = reference.len();
    let n = hypothesis.len();
    let mut d = vec![0usize; (m + 1) * (n + 1)];
    for i in 0..=m {
        d[i * (n + 1)] = i;
    }
    for j in 0..=n {
        d[j] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            let sub = d[(i - 1) * (n + 1) + j - 1] + cost;
            let del = d[(i - 1) * (n + 1) + j] + 1;
            let ins = d[i * (n + 1) + j - 1] + 1;
            d[i * (n + 1) + j] = sub.min(del).min(ins);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let here = d[i * (n + 1) + j];
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if here == d[(i - 1) * (n + 1) + j - 1] + cost {
                if cost == 1 {
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * (n + 1) + j] + 1 {
            counts.deletions += 1;
            i -= 1;
            continue;
        }
        counts.insertions += 1;
        j -= 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorUnit {
    Char,
    Word,
}

impl ErrorUnit {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorUnit::Char => "char",
            ErrorUnit::Word => "word",
        }
    }
}

/// Corpus-pooled error-rate report: `(S + I + D) / N` over all pairs.
/// Serializes with the short field names of the report format.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorRateReport {
    pub unit: String,
    #[serde(rename = "S")]
    pub substitutions: usize,
    #[serde(rename = "I")]
    pub insertions: usize,
    #[serde(rename = "D")]
    pub deletions: usize,
    #[serde(rename = "N")]
    pub reference_tokens: usize,
    pub error_rate: f64,
}

fn char_tokens(s: &str, strip_space: bool) -> Vec<char> {
    s.chars()
        .filter(|c| !strip_space || !c.is_whitespace())
        .collect()
}

fn word_tokens(s: &str) -> Vec<&str> {
    s.split(' ').filter(|w| !w.is_empty()).collect()
}

/// Pooled corpus scoring. `strip_space` removes whitespace before
/// character-level scoring and is ignored for words.
pub fn error_rate(
    pairs: &[(String, String)],
    unit: ErrorUnit,
    strip_space: bool,
) -> Result<ErrorRateReport> {
    let mut counts = EditCounts::default();
    let mut n_ref = 0usize;
    for (reference, hypothesis) in pairs {
        let c = match unit {
            ErrorUnit::Char => {
                let r = char_tokens(reference, strip_space);
                let h = char_tokens(hypothesis, strip_space);
                n_ref += r.len();
                edit_distance(&r, &h)
            }
            ErrorUnit::Word => {
                let r = word_tokens(reference);
                let h = word_tokens(hypothesis);
                n_ref += r.len();
                edit_distance(&r, &h)
            }
        };
        counts.substitutions += c.substitutions;
        counts.insertions += c.insertions;
        counts.deletions += c.deletions;
    }
    if n_ref == 0 {
        return Err(Error::Ctc("all references are empty".into()));
    }
    Ok(ErrorRateReport {
        unit: unit.as_str().to_string(),
        substitutions: counts.substitutions,
        insertions: counts.insertions,
        deletions: counts.deletions,
        reference_tokens: n_ref,
        error_rate: counts.total() as f64 / n_ref as f64,
    })
}
