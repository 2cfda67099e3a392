//! Synthetic task generators: deterministic, balanced, desk-scale stand-ins
//! for single-sentence classification, sentence-pair classification and
//! regression.
//!
//! Vocabulary convention: id 0 is PAD, 1 is the pair separator, 2 is a
//! reserved start token; content tokens are >= 3. Binary tasks use ids 3
//! ("zero" bit) and 4 ("one" bit).

use crate::error::{Error, Result};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, Write};

pub const PAD: usize = 0;
pub const SEP: usize = 1;
pub const START: usize = 2;
pub const FIRST_CONTENT: usize = 3;
const BIT_ZERO: usize = 3;
const BIT_ONE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SingleClassify,
    PairClassify,
    Regression,
}

/// Declarative description of a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub generator_seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".into()));
        }
        match self.kind {
            TaskKind::SingleClassify => {
                if self.vocab_size <= BIT_ONE {
                    return Err(Error::Config("classification tasks need vocab_size > 4".into()));
                }
                if self.num_classes != 2 {
                    return Err(Error::Config("the parity task is binary: num_classes must be 2".into()));
                }
            }
            TaskKind::PairClassify => {
                if self.seq_len % 2 != 0 {
                    return Err(Error::Config("pair tasks need an even seq_len".into()));
                }
                if self.vocab_size < 8 {
                    return Err(Error::Config("pair tasks need vocab_size >= 8".into()));
                }
                if self.num_classes != 2 {
                    return Err(Error::Config("the pair-match task is binary: num_classes must be 2".into()));
                }
            }
            TaskKind::Regression => {
                if self.vocab_size <= BIT_ONE {
                    return Err(Error::Config("the regression task needs vocab_size > 4".into()));
                }
                if self.num_classes != 1 {
                    return Err(Error::Config("regression tasks must set num_classes = 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// Class id or regression target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Value(_) => None,
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            Label::Class(c) => *c as f64,
            Label::Value(v) => *v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub label: Label,
}

/// Random binary sequences labeled by the parity of the count of "one"
/// bits. Balance is enforced by construction: for even `n`, exactly `n/2`
/// per class; sequences are unique within the returned set.
pub fn gen_parity(n: usize, l: usize, seed: u64) -> Vec<Sample> {
    assert!(l >= 2, "parity needs l >= 2");
    // each parity class holds 2^(l-1) distinct sequences
    assert!(n.div_ceil(2) <= 1 << (l - 1), "cannot draw {n} unique balanced sequences at l={l}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut quota = [n - n / 2, n / 2];
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let tokens: Vec<usize> =
            (0..l).map(|_| if rng.gen::<bool>() { BIT_ONE } else { BIT_ZERO }).collect();
        let label = tokens.iter().filter(|&&t| t == BIT_ONE).count() % 2;
        if quota[label] == 0 || !seen.insert(tokens.clone()) {
            continue;
        }
        quota[label] -= 1;
        out.push(Sample { tokens, label: Label::Class(label) });
    }
    out
}

/// Sentence-pair task: `seq1 SEP seq2`, padded to `l`. Label 1 iff the
/// second sequence is a permutation of the first sequence's content
/// tokens. Positives are shuffled copies; negatives are independent draws
/// rejected until their multiset differs.
pub fn gen_pair_match(n: usize, l: usize, vocab: usize, seed: u64) -> Vec<Sample> {
    assert!(l % 2 == 0 && l >= 4, "pair task needs even l >= 4");
    assert!(vocab >= 8, "pair task needs vocab >= 8");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = (l - 1) / 2; // seq1 and seq2 length; layout m + 1 + m <= l
    let content = FIRST_CONTENT..vocab;
    let mut quota = [n - n / 2, n / 2];
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let seq1: Vec<usize> = (0..m).map(|_| rng.gen_range(content.clone())).collect();
        let positive = rng.gen::<bool>();
        let seq2 = if positive {
            let mut s = seq1.clone();
            s.shuffle(&mut rng);
            s
        } else {
            loop {
                let cand: Vec<usize> = (0..m).map(|_| rng.gen_range(content.clone())).collect();
                if multiset(&cand) != multiset(&seq1) {
                    break cand;
                }
            }
        };
        let label = usize::from(positive);
        let mut tokens = Vec::with_capacity(l);
        tokens.extend_from_slice(&seq1);
        tokens.push(SEP);
        tokens.extend_from_slice(&seq2);
        tokens.resize(l, PAD);
        if quota[label] == 0 || !seen.insert(tokens.clone()) {
            continue;
        }
        quota[label] -= 1;
        out.push(Sample { tokens, label: Label::Class(label) });
    }
    out
}

fn multiset(tokens: &[usize]) -> Vec<usize> {
    let mut s = tokens.to_vec();
    s.sort_unstable();
    s
}

/// Recompute a pair-match label from the tokens alone; the independent
/// rule used by tests to cross-check the generator.
pub fn pair_match_rule(tokens: &[usize]) -> Result<usize> {
    let sep = tokens
        .iter()
        .position(|&t| t == SEP)
        .ok_or_else(|| Error::Input("pair sample without separator".into()))?;
    let seq1 = &tokens[..sep];
    let rest = &tokens[sep + 1..];
    let end = rest.iter().position(|&t| t == PAD).unwrap_or(rest.len());
    let seq2 = &rest[..end];
    Ok(usize::from(multiset(seq1) == multiset(seq2)))
}

/// Regression task: binary sequences with target `count(one bits) / l`.
pub fn gen_regression(n: usize, l: usize, seed: u64) -> Vec<Sample> {
    assert!(l >= 2, "regression needs l >= 2");
    assert!(n <= 1 << l, "cannot draw {n} unique length-{l} binary sequences");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let tokens: Vec<usize> =
            (0..l).map(|_| if rng.gen::<bool>() { BIT_ONE } else { BIT_ZERO }).collect();
        if !seen.insert(tokens.clone()) {
            continue;
        }
        let ones = tokens.iter().filter(|&&t| t == BIT_ONE).count();
        let target = ones as f64 / l as f64;
        out.push(Sample { tokens, label: Label::Value(target) });
    }
    out
}

/// Generate disjoint train/eval splits for a task. Uniqueness within one
/// generated set makes the splits disjoint; classification splits are
/// stratified so both stay balanced.
pub fn generate_splits(
    spec: &TaskSpec,
    n_train: usize,
    n_eval: usize,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    spec.validate()?;
    if n_train == 0 || n_eval == 0 {
        return Err(Error::Config("train and eval sizes must be positive".into()));
    }
    let total = n_train + n_eval;
    let all = match spec.kind {
        TaskKind::SingleClassify => gen_parity(total, spec.seq_len, spec.generator_seed),
        TaskKind::PairClassify => {
            gen_pair_match(total, spec.seq_len, spec.vocab_size, spec.generator_seed)
        }
        TaskKind::Regression => gen_regression(total, spec.seq_len, spec.generator_seed),
    };
    match spec.kind {
        TaskKind::Regression => {
            let eval = all[..n_eval].to_vec();
            let train = all[n_eval..].to_vec();
            Ok((train, eval))
        }
        _ => {
            // stratified: route the first per-class quota into eval
            let mut eval_quota = [n_eval - n_eval / 2, n_eval / 2];
            let mut train = Vec::with_capacity(n_train);
            let mut eval = Vec::with_capacity(n_eval);
            for s in all {
                let c = s.label.class().expect("classification sample");
                if eval_quota[c] > 0 {
                    eval_quota[c] -= 1;
                    eval.push(s);
                } else {
                    train.push(s);
                }
            }
            Ok((train, eval))
        }
    }
}

/// Deterministic shuffled index batches. `drop_last` discards a trailing
/// partial batch so every batch has the full size.
pub fn batches(
    n_samples: usize,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(
            "batch_size must be at least 2 (negative sampling needs another sample)".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if drop_last {
        out.retain(|b| b.len() == batch_size);
    }
    Ok(out)
}

/// Write samples as line-delimited JSON `{"tokens": [...], "label": ...}`.
pub fn export_jsonl<W: Write>(samples: &[Sample], mut w: W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Read samples back from line-delimited JSON. Blank lines are skipped.
pub fn import_jsonl<R: BufRead>(r: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)?;
        out.push(s);
    }
    Ok(out)
}

/// Parse from an in-memory string; the entry point the fuzz harness drives.
pub fn import_jsonl_str(text: &str) -> Result<Vec<Sample>> {
    import_jsonl(std::io::BufReader::new(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parity_trivial_labels() {
        // all-"zero" sequence has label 0, a single "one" flips it
        let zeros = vec![BIT_ZERO; 8];
        assert_eq!(zeros.iter().filter(|&&t| t == BIT_ONE).count() % 2, 0);
        let mut one = zeros.clone();
        one[3] = BIT_ONE;
        assert_eq!(one.iter().filter(|&&t| t == BIT_ONE).count() % 2, 1);
        // and the generator agrees with the rule on every sample
        for s in gen_parity(200, 8, 3) {
            let rule = s.tokens.iter().filter(|&&t| t == BIT_ONE).count() % 2;
            assert_eq!(s.label, Label::Class(rule));
        }
    }

    #[test]
    fn parity_exactly_balanced() {
        let samples = gen_parity(1000, 16, 7);
        let ones = samples.iter().filter(|s| s.label == Label::Class(1)).count();
        assert_eq!(ones, 500);
        assert_eq!(samples.len(), 1000);
    }

    #[test]
    fn parity_deterministic() {
        assert_eq!(gen_parity(64, 10, 5), gen_parity(64, 10, 5));
        assert_ne!(gen_parity(64, 10, 5), gen_parity(64, 10, 6));
    }

    #[test]
    fn pair_match_oracle_recheck() {
        let samples = gen_pair_match(400, 16, 12, 9);
        for s in &samples {
            let rule = pair_match_rule(&s.tokens).unwrap();
            assert_eq!(s.label, Label::Class(rule), "tokens {:?}", s.tokens);
        }
        let ones = samples.iter().filter(|s| s.label == Label::Class(1)).count();
        assert_eq!(ones, 200);
    }

    #[test]
    fn pair_match_identity_and_disjoint_cases() {
        // identical halves are a permutation
        let mut tokens = vec![5, 6, 7, SEP, 5, 6, 7];
        tokens.resize(8, PAD);
        assert_eq!(pair_match_rule(&tokens).unwrap(), 1);
        // disjoint token sets are not
        let mut tokens = vec![5, 6, 7, SEP, 8, 9, 10];
        tokens.resize(8, PAD);
        assert_eq!(pair_match_rule(&tokens).unwrap(), 0);
    }

    #[test]
    fn regression_targets() {
        for s in gen_regression(100, 10, 4) {
            let ones = s.tokens.iter().filter(|&&t| t == BIT_ONE).count();
            assert_eq!(s.label, Label::Value(ones as f64 / 10.0));
        }
        // extremes: all ones -> 1.0, all zeros -> 0.0, half -> 0.5
        let all_ones = vec![BIT_ONE; 4];
        assert_eq!(all_ones.iter().filter(|&&t| t == BIT_ONE).count() as f64 / 4.0, 1.0);
        let half: Vec<usize> = vec![BIT_ONE, BIT_ZERO, BIT_ONE, BIT_ZERO];
        assert_eq!(half.iter().filter(|&&t| t == BIT_ONE).count() as f64 / 4.0, 0.5);
    }

    #[test]
    fn batch_counts() {
        assert_eq!(batches(32, 16, 0, true).unwrap().len(), 2);
        assert_eq!(batches(17, 16, 0, true).unwrap().len(), 1);
        assert_eq!(batches(17, 16, 0, false).unwrap().len(), 2);
        assert!(matches!(batches(10, 1, 0, true), Err(Error::Config(_))));
    }

    #[test]
    fn batches_are_seed_deterministic() {
        assert_eq!(batches(100, 16, 3, true).unwrap(), batches(100, 16, 3, true).unwrap());
        assert_ne!(batches(100, 16, 3, true).unwrap(), batches(100, 16, 4, true).unwrap());
    }

    #[test]
    fn splits_are_disjoint_and_balanced() {
        let spec = TaskSpec {
            name: "parity".into(),
            kind: TaskKind::SingleClassify,
            vocab_size: 8,
            seq_len: 12,
            num_classes: 2,
            generator_seed: 11,
        };
        let (train, eval) = generate_splits(&spec, 600, 100).unwrap();
        assert_eq!(train.len(), 600);
        assert_eq!(eval.len(), 100);
        let train_set: HashSet<_> = train.iter().map(|s| s.tokens.clone()).collect();
        assert!(eval.iter().all(|s| !train_set.contains(&s.tokens)));
        let eval_pos = eval.iter().filter(|s| s.label == Label::Class(1)).count();
        assert_eq!(eval_pos, 50);
        let train_pos = train.iter().filter(|s| s.label == Label::Class(1)).count();
        assert_eq!(train_pos, 300);
    }

    #[test]
    fn jsonl_roundtrip_preserves_labels() {
        let spec_samples = vec![
            Sample { tokens: vec![3, 4, 3], label: Label::Class(1) },
            Sample { tokens: vec![4, 4, 4], label: Label::Value(0.75) },
        ];
        let mut buf = Vec::new();
        export_jsonl(&spec_samples, &mut buf).unwrap();
        let back = import_jsonl_str(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, spec_samples);
    }

    #[test]
    fn import_rejects_garbage() {
        assert!(import_jsonl_str("{\"tokens\": \"nope\"}").is_err());
        assert!(import_jsonl_str("not json at all").is_err());
        assert!(import_jsonl_str("").unwrap().is_empty());
    }
}
