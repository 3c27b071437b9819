//! Plugin surface between engine back-ends and use-case logic, plus Word-Count.

use std::ops::Range;

/// Bytes handed to `UseCase::map` for one task.
///
/// `data` holds the task's nominal byte range `body` plus context: at most one
/// byte before it (absent for the first task) and, after it, whatever the
/// engine read to reach the next separator or end of input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInput {
    pub data: Vec<u8>,
    pub body: Range<usize>,
}

impl TaskInput {
    /// A task that covers all of `data` with no context (a whole input).
    pub fn whole(data: Vec<u8>) -> Self {
        let body = 0..data.len();
        TaskInput { data, body }
    }

    pub fn body_len(&self) -> usize {
        self.body.len()
    }
}

/// Map/Reduce functions of a job. Implementations must be reentrant: the
/// engine calls them concurrently from every worker.
pub trait UseCase: Send + Sync {
    /// Emits zero or more `(key, value)` pairs for one task. Keys must be
    /// non-empty.
    fn map(&self, input: &TaskInput, emit: &mut dyn FnMut(&[u8], &[u8]));

    /// Folds `value` into `acc`. Must be associative and commutative.
    fn reduce(&self, key: &[u8], acc: &mut Vec<u8>, value: &[u8]);

    /// Fold used by Local Reduce while mapping.
    fn reduce_local(&self, key: &[u8], acc: &mut Vec<u8>, value: &[u8]) {
        self.reduce(key, acc, value)
    }

    /// Whether `byte` ends a record, so that a task may be extended past its
    /// nominal end up to (not including) the first such byte.
    fn is_separator(&self, byte: u8) -> bool;
}

/// Counts occurrences of lower-cased ASCII alphanumeric words.
#[derive(Clone, Copy, Debug, Default)]
pub struct WordCount;

impl WordCount {
    pub fn encode_count(n: u64) -> [u8; 8] {
        n.to_le_bytes()
    }

    pub fn decode_count(v: &[u8]) -> u64 {
        u64::from_le_bytes(v.try_into().expect("word counts are 8 bytes"))
    }
}

#[inline]
fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric()
}

/// Tokenizes a task body, honoring the boundary rule: a leading token that
/// continues from before the body belongs to the previous task, and the last
/// token starting inside the body runs on into the context until it ends.
pub fn for_each_token(input: &TaskInput, mut f: impl FnMut(&[u8])) {
    let data = &input.data;
    let mut i = input.body.start;
    let end = input.body.end;
    if i > 0 && i < data.len() && is_word_byte(data[i - 1]) {
        while i < data.len() && is_word_byte(data[i]) {
            i += 1;
        }
    }
    while i < end {
        if !is_word_byte(data[i]) {
            i += 1;
            continue;
        }
        let start = i;
        while i < data.len() && is_word_byte(data[i]) {
            i += 1;
        }
        f(&data[start..i]);
    }
}

impl UseCase for WordCount {
    fn map(&self, input: &TaskInput, emit: &mut dyn FnMut(&[u8], &[u8])) {
        let one = Self::encode_count(1);
        let mut lower = Vec::with_capacity(32);
        for_each_token(input, |tok| {
            lower.clear();
            lower.extend(tok.iter().map(u8::to_ascii_lowercase));
            emit(&lower, &one);
        });
    }

    fn reduce(&self, _key: &[u8], acc: &mut Vec<u8>, value: &[u8]) {
        let sum = Self::decode_count(acc)
            .checked_add(Self::decode_count(value))
            .expect("word count overflow");
        acc.copy_from_slice(&sum.to_le_bytes());
    }

    fn is_separator(&self, byte: u8) -> bool {
        !is_word_byte(byte)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::task_input_from_slice;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn counts(input: &TaskInput) -> BTreeMap<Vec<u8>, u64> {
        let mut m = BTreeMap::new();
        WordCount.map(input, &mut |k, v| {
            *m.entry(k.to_vec()).or_insert(0) += WordCount::decode_count(v);
        });
        m
    }

    fn reduce(a: u64, b: u64) -> u64 {
        let mut acc = a.to_le_bytes().to_vec();
        WordCount.reduce(b"k", &mut acc, &b.to_le_bytes());
        WordCount::decode_count(&acc)
    }

    #[test]
    fn hand_tokenized() {
        let c = counts(&TaskInput::whole(b"the cat and the dog".to_vec()));
        let expect: BTreeMap<Vec<u8>, u64> = [("and", 1), ("cat", 1), ("dog", 1), ("the", 2)]
            .into_iter()
            .map(|(k, v)| (k.as_bytes().to_vec(), v))
            .collect();
        assert_eq!(c, expect);
        assert!(counts(&TaskInput::whole(Vec::new())).is_empty());
    }

    #[test]
    fn case_folding_and_invalid_utf8_separate() {
        let c = counts(&TaskInput::whole(b"The\xffTHE the-dog".to_vec()));
        assert_eq!(c[&b"the"[..]], 3);
        assert_eq!(c[&b"dog"[..]], 1);
    }

    #[test]
    fn split_invariance_all_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let alphabet = b"abcXYZ019 \n,.-";
        let corpus: Vec<u8> = (0..1024)
            .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
            .collect();
        let whole = counts(&TaskInput::whole(corpus.clone()));
        for split in 0..=corpus.len() {
            let mut merged = BTreeMap::new();
            for range in [0..split, split..corpus.len()] {
                if range.is_empty() {
                    continue;
                }
                let input = task_input_from_slice(&corpus, range, &WordCount);
                for (k, v) in counts(&input) {
                    *merged.entry(k).or_insert(0) += v;
                }
            }
            assert_eq!(merged, whole, "split at {split}");
        }
    }

    #[test]
    fn reduce_vectors() {
        assert_eq!(reduce(1, 1), 2);
        assert_eq!(reduce(3, 4), 7);
    }

    #[test]
    fn reduce_local_matches_reduce() {
        for (a, b) in [(1u64, 1u64), (3, 4), (10, 0)] {
            let mut acc = a.to_le_bytes().to_vec();
            WordCount.reduce_local(b"k", &mut acc, &b.to_le_bytes());
            assert_eq!(WordCount::decode_count(&acc), reduce(a, b));
        }
    }

    #[test]
    fn fold_of_ones_in_any_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut parts: Vec<u64> = vec![1; 500];
        for _ in 0..10 {
            parts.shuffle(&mut rng);
            // fold pairs in a random tree shape
            let mut xs = parts.clone();
            while xs.len() > 1 {
                let i = rng.gen_range(0..xs.len() - 1);
                let b = xs.remove(i + 1);
                xs[i] = reduce(xs[i], b);
            }
            assert_eq!(xs[0], 500);
        }
    }

    #[test]
    fn associative_and_commutative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let (a, b, c) = (
                rng.gen_range(1..1u64 << 40),
                rng.gen_range(1..1u64 << 40),
                rng.gen_range(1..1u64 << 40),
            );
            assert_eq!(reduce(reduce(a, b), c), reduce(a, reduce(b, c)));
            assert_eq!(reduce(a, b), reduce(b, a));
        }
    }

    #[test]
    #[should_panic(expected = "overflow")]
    fn overflow_aborts() {
        reduce(u64::MAX, 1);
    }
}
