//! Overlapping one-second tokens and channel-respecting sequence sampling.
//!
//! Channel (or clean-segment) ends are kept as boundary markers on the
//! [`TokenStream`]; they never become numeric tokens.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("signal of {len} samples is shorter than one token ({token_len})")]
    SignalTooShort { len: usize, token_len: usize },
    #[error("no run of {seq_len} consecutive tokens inside one channel")]
    NoValidWindow { seq_len: usize },
    #[error("invalid tokenizer parameters: {0}")]
    InvalidParams(String),
}

type Result<T> = std::result::Result<T, TokenizerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerParams {
    pub token_len: usize,
    pub overlap: usize,
}

impl Default for TokenizerParams {
    fn default() -> Self {
        Self {
            token_len: 128,
            overlap: 32,
        }
    }
}

impl TokenizerParams {
    pub fn new(token_len: usize, overlap: usize) -> Result<Self> {
        if token_len == 0 || overlap >= token_len {
            return Err(TokenizerError::InvalidParams(format!(
                "need 0 <= overlap ({overlap}) < token_len ({token_len})"
            )));
        }
        Ok(Self { token_len, overlap })
    }

    pub fn stride(&self) -> usize {
        self.token_len - self.overlap
    }

    /// `floor((len - token_len) / stride) + 1`, or 0 when `len < token_len`.
    pub fn token_count(&self, len: usize) -> usize {
        if len < self.token_len {
            0
        } else {
            (len - self.token_len) / self.stride() + 1
        }
    }
}

/// Splits `x` into `L` tokens; token `i` is `x[i*stride .. i*stride + token_len]`.
pub fn tokenize(x: &[f64], params: &TokenizerParams) -> Result<Vec<Vec<f64>>> {
    if x.len() < params.token_len {
        return Err(TokenizerError::SignalTooShort {
            len: x.len(),
            token_len: params.token_len,
        });
    }
    let stride = params.stride();
    Ok((0..params.token_count(x.len()))
        .map(|i| x[i * stride..i * stride + params.token_len].to_vec())
        .collect())
}

/// Tokens from many channels/segments, stored flat, with end-of-channel markers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenStream {
    token_len: usize,
    data: Vec<f64>,
    /// Token indices after which a channel ends, strictly increasing.
    boundaries: Vec<usize>,
    /// Segments dropped for being shorter than one token.
    pub skipped_segments: usize,
}

impl TokenStream {
    pub fn new(token_len: usize) -> Self {
        Self {
            token_len,
            ..Self::default()
        }
    }

    /// Builds a stream from raw tokens and boundary positions.
    pub fn from_parts(token_len: usize, tokens: &[Vec<f64>], boundaries: Vec<usize>) -> Result<Self> {
        if tokens.iter().any(|t| t.len() != token_len) {
            return Err(TokenizerError::InvalidParams("token length mismatch".into()));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) || boundaries.last().is_some_and(|&b| b >= tokens.len()) {
            return Err(TokenizerError::InvalidParams(
                "boundaries must be strictly increasing and in range".into(),
            ));
        }
        Ok(Self {
            token_len,
            data: tokens.concat(),
            boundaries,
            skipped_segments: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.token_len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn token_len(&self) -> usize {
        self.token_len
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.token_len..(i + 1) * self.token_len]
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Appends the tokens of one segment followed by a boundary.
    pub fn push_segment(&mut self, segment: &[f64], params: &TokenizerParams) {
        match tokenize(segment, params) {
            Ok(tokens) => {
                for t in &tokens {
                    self.data.extend_from_slice(t);
                }
                self.boundaries.push(self.len() - 1);
            }
            Err(_) => self.skipped_segments += 1,
        }
    }

    /// Concatenates another stream, keeping its boundaries.
    pub fn extend(&mut self, other: &TokenStream) {
        let offset = self.len();
        self.data.extend_from_slice(&other.data);
        self.boundaries.extend(other.boundaries.iter().map(|b| b + offset));
        self.skipped_segments += other.skipped_segments;
    }

    /// Token count of the longest boundary-free run.
    pub fn longest_run(&self) -> usize {
        let n = self.len();
        let mut prev = 0;
        let mut best = 0;
        for &b in &self.boundaries {
            best = best.max(b + 1 - prev);
            prev = b + 1;
        }
        best.max(n - prev.min(n))
    }

    /// Every start index whose `seq_len` window stays inside one channel.
    pub fn valid_starts(&self, seq_len: usize) -> Vec<usize> {
        let n = self.len();
        if seq_len == 0 || seq_len > n {
            return Vec::new();
        }
        // Runs between boundaries; the stream end closes the last run.
        let mut starts = Vec::new();
        let mut run_start = 0;
        let ends = self
            .boundaries
            .iter()
            .map(|&b| b + 1)
            .chain((self.boundaries.last().map_or(0, |&b| b + 1) < n).then_some(n));
        for run_end in ends {
            if run_end - run_start >= seq_len {
                starts.extend(run_start..=run_end - seq_len);
            }
            run_start = run_end;
        }
        starts
    }

    /// `count` windows of `seq_len` consecutive tokens, each a flat
    /// `seq_len * token_len` vector. Windows never cross a boundary.
    pub fn sample_sequences(&self, seq_len: usize, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let starts = self.sample_starts(seq_len, count, &mut rng)?;
        Ok(starts.into_iter().map(|s| self.window(s, seq_len)).collect())
    }

    /// Start indices drawn uniformly over valid windows; without replacement
    /// when `count` does not exceed the number of valid windows.
    pub fn sample_starts<R: Rng>(&self, seq_len: usize, count: usize, rng: &mut R) -> Result<Vec<usize>> {
        if seq_len == 0 {
            return Err(TokenizerError::InvalidParams("seq_len must be >= 1".into()));
        }
        let valid = self.valid_starts(seq_len);
        if valid.is_empty() {
            return Err(TokenizerError::NoValidWindow { seq_len });
        }
        Ok(if count <= valid.len() {
            index::sample(rng, valid.len(), count)
                .into_iter()
                .map(|i| valid[i])
                .collect()
        } else {
            (0..count).map(|_| valid[rng.random_range(0..valid.len())]).collect()
        })
    }

    pub fn window(&self, start: usize, seq_len: usize) -> Vec<f64> {
        self.data[start * self.token_len..(start + seq_len) * self.token_len].to_vec()
    }
}

/// Tokenizes each segment in order, recording a boundary after each one.
/// Segments shorter than one token are skipped and counted.
pub fn build_stream(segments: &[Vec<f64>], params: &TokenizerParams) -> TokenStream {
    let mut stream = TokenStream::new(params.token_len);
    for seg in segments {
        stream.push_segment(seg, params);
    }
    stream
}

/// Free-function form of [`TokenStream::sample_sequences`].
pub fn sample_sequences(stream: &TokenStream, seq_len: usize, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    stream.sample_sequences(seq_len, count, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64).collect()
    }

    /// Every window start `s` with `s + 128 <= len`, stepping by 96.
    fn brute_force_windows(len: usize) -> Vec<usize> {
        let mut starts = Vec::new();
        let mut s = 0;
        while s + 128 <= len {
            starts.push(s);
            s += 96;
        }
        starts
    }

    #[test]
    fn token_counts() {
        let p = TokenizerParams::default();
        assert_eq!(tokenize(&ramp(128), &p).unwrap().len(), 1);
        let two = tokenize(&ramp(224), &p).unwrap();
        assert_eq!(two.len(), brute_force_windows(224).len());
        assert_eq!(two[1][0], 96.0);
        assert_eq!(&two[0][96..], &two[1][..32]);
        assert_eq!(
            tokenize(&ramp(127), &p),
            Err(TokenizerError::SignalTooShort {
                len: 127,
                token_len: 128
            })
        );
    }

    #[test]
    fn stream_boundaries() {
        let p = TokenizerParams::default();
        let s = build_stream(&[ramp(128), ramp(128)], &p);
        assert_eq!(s.len(), 2);
        assert_eq!(s.boundaries(), &[0, 1]);

        let s = build_stream(&[ramp(224), ramp(100), ramp(128)], &p);
        assert_eq!(s.len(), 3);
        assert_eq!(s.boundaries(), &[1, 2]);
        assert_eq!(s.skipped_segments, 1);

        let s = build_stream(&[], &p);
        assert!(s.is_empty());
        assert!(s.boundaries().is_empty());
    }

    fn stream_10_with_boundary_after_4() -> TokenStream {
        let tokens: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64; 4]).collect();
        TokenStream::from_parts(4, &tokens, vec![4]).unwrap()
    }

    #[test]
    fn valid_windows_respect_boundaries() {
        let s = stream_10_with_boundary_after_4();
        assert_eq!(s.valid_starts(5), vec![0, 5]);
        assert_eq!(s.valid_starts(1), (0..10).collect::<Vec<_>>());
        assert_eq!(s.valid_starts(6), Vec::<usize>::new());
    }

    #[test]
    fn no_window_too_long() {
        let tokens: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64; 4]).collect();
        let s = TokenStream::from_parts(4, &tokens, vec![9]).unwrap();
        assert_eq!(
            s.sample_sequences(11, 1, 0),
            Err(TokenizerError::NoValidWindow { seq_len: 11 })
        );
    }

    #[test]
    fn sampling_without_replacement_then_with() {
        let s = stream_10_with_boundary_after_4();
        let mut seqs = s.sample_sequences(5, 2, 3).unwrap();
        seqs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(seqs[0][0], 0.0);
        assert_eq!(seqs[1][0], 5.0);
        let many = s.sample_sequences(5, 9, 3).unwrap();
        assert_eq!(many.len(), 9);
        assert!(many.iter().all(|w| w[0] == 0.0 || w[0] == 5.0));
        assert_eq!(s.sample_sequences(5, 9, 3).unwrap(), many);
    }

    #[test]
    fn sampled_windows_never_span_boundaries_exhaustive() {
        // All boundary subsets of an 8-token stream.
        for mask in 0u32..(1 << 8) {
            let boundaries: Vec<usize> = (0..8).filter(|b| mask & (1 << b) != 0).collect();
            let tokens: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
            let s = TokenStream::from_parts(1, &tokens, boundaries.clone()).unwrap();
            for seq_len in 1..=8 {
                let expected: Vec<usize> = (0..=8 - seq_len)
                    .filter(|&st| !boundaries.iter().any(|&b| b >= st && b < st + seq_len - 1))
                    .collect();
                assert_eq!(s.valid_starts(seq_len), expected, "mask {mask:b} len {seq_len}");
            }
        }
    }

    proptest! {
        #[test]
        fn coverage_and_overlap(len in 128usize..3000) {
            let p = TokenizerParams::default();
            let x = ramp(len);
            let tokens = tokenize(&x, &p).unwrap();
            prop_assert_eq!(tokens.len(), brute_force_windows(len).len());
            for w in tokens.windows(2) {
                prop_assert_eq!(&w[0][96..], &w[1][..32]);
            }
            let mut rebuilt: Vec<f64> = tokens[..tokens.len() - 1]
                .iter()
                .flat_map(|t| t[..96].iter().copied())
                .collect();
            rebuilt.extend_from_slice(tokens.last().unwrap());
            let covered = (tokens.len() - 1) * 96 + 128;
            prop_assert_eq!(&rebuilt[..], &x[..covered]);
        }
    }
}
