//! Coordinate <-> digit-token codec.
//!
//! Coordinates are rendered through a fixed text template (default
//! `[0.abc, 0.def]`) with K digits per axis. Quantization truncates toward
//! zero at resolution 10^-K; values at or above `1 - 10^-K` clamp to the
//! maximal representable string. The factorized posterior over the digit
//! tokens treats the template scaffolding as given and renormalizes the
//! model's distribution over the ten digit symbols at each slot.

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

/// Template config constant; two `%s` slots receive the digit runs.
pub const DEFAULT_TEMPLATE: &str = "[0.%s, 0.%s]";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// One position of the rendered coordinate answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateSlot {
    /// Scaffolding character, forced during constrained decoding.
    Literal(char),
    /// Digit `index` (0-based) of `axis`, chosen by the decoding strategy.
    Digit { axis: Axis, index: usize },
}

#[derive(Debug, Clone)]
pub struct CoordCodec {
    k: usize,
    prefix: String,
    mid: String,
    suffix: String,
}

/// Guard added before truncation so values that are decimal grid points up to
/// binary representation error land on their intended digits.
const TRUNC_GUARD: f64 = 1e-9;

impl CoordCodec {
    pub fn new(k: usize, template: &str) -> Result<Self> {
        if k == 0 || k > 9 {
            return Err(Error::Config(format!("digit count K={k} out of range 1..=9")));
        }
        let parts: Vec<&str> = template.split("%s").collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "coordinate template {template:?} must contain exactly two %s slots"
            )));
        }
        Ok(CoordCodec {
            k,
            prefix: parts[0].to_string(),
            mid: parts[1].to_string(),
            suffix: parts[2].to_string(),
        })
    }

    pub fn with_k(k: usize) -> Result<Self> {
        Self::new(k, DEFAULT_TEMPLATE)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Truncate a coordinate to K digits. Inputs at or above the largest
    /// representable value clamp to it; negative or non-finite inputs are
    /// domain errors.
    pub fn quantize(&self, v: f64) -> Result<Vec<u8>> {
        if !v.is_finite() {
            return Err(Error::Domain(format!("coordinate {v} is not finite")));
        }
        if v < 0.0 {
            return Err(Error::Domain(format!("coordinate {v} is negative")));
        }
        let scale = 10f64.powi(self.k as i32);
        let max_code = scale as u64 - 1;
        let code = ((v * scale + TRUNC_GUARD).floor() as u64).min(max_code);
        let mut digits = vec![0u8; self.k];
        let mut rem = code;
        for i in (0..self.k).rev() {
            digits[i] = (rem % 10) as u8;
            rem /= 10;
        }
        Ok(digits)
    }

    /// Value represented by a digit run: 0.d1 d2 ... dK.
    pub fn digits_to_value(&self, digits: &[u8]) -> f64 {
        debug_assert_eq!(digits.len(), self.k);
        let mut code = 0u64;
        for &d in digits {
            code = code * 10 + d as u64;
        }
        code as f64 / 10f64.powi(self.k as i32)
    }

    fn digit_string(&self, digits: &[u8]) -> String {
        digits.iter().map(|&d| char::from(b'0' + d)).collect()
    }

    /// Render `(x, y)` through the template.
    pub fn encode(&self, x: f64, y: f64) -> Result<String> {
        let xd = self.quantize(x)?;
        let yd = self.quantize(y)?;
        Ok(format!(
            "{}{}{}{}{}",
            self.prefix,
            self.digit_string(&xd),
            self.mid,
            self.digit_string(&yd),
            self.suffix
        ))
    }

    /// Extract the first template match from `text`.
    pub fn parse(&self, text: &str) -> Result<(f64, f64)> {
        let bytes = text.as_bytes();
        let mut first_candidate: Option<usize> = None;
        let mut start = 0;
        while let Some(pos) = text[start..].find(&self.prefix) {
            let at = start + pos;
            if first_candidate.is_none() {
                first_candidate = Some(at);
            }
            if let Some(parsed) = self.try_parse_at(bytes, at) {
                return Ok(parsed);
            }
            start = at + 1;
        }
        let offending = match first_candidate {
            Some(at) => {
                let end = (at + self.prefix.len() + 2 * self.k + self.mid.len() + self.suffix.len())
                    .min(text.len());
                text[at..end].to_string()
            }
            None => {
                let end = text.len().min(60);
                text[..end].to_string()
            }
        };
        Err(Error::Parse {
            message: format!(
                "no coordinate template match with K={} digits per axis",
                self.k
            ),
            offending,
        })
    }

    fn try_parse_at(&self, bytes: &[u8], at: usize) -> Option<(f64, f64)> {
        let mut pos = at + self.prefix.len();
        let x = self.read_digits(bytes, &mut pos)?;
        if !bytes[pos..].starts_with(self.mid.as_bytes()) {
            return None;
        }
        pos += self.mid.len();
        let y = self.read_digits(bytes, &mut pos)?;
        if !bytes[pos..].starts_with(self.suffix.as_bytes()) {
            return None;
        }
        Some((self.digits_to_value(&x), self.digits_to_value(&y)))
    }

    /// Exactly K digits; a digit in the following position means the run is
    /// too long for the template and the match fails.
    fn read_digits(&self, bytes: &[u8], pos: &mut usize) -> Option<Vec<u8>> {
        let mut digits = Vec::with_capacity(self.k);
        for _ in 0..self.k {
            let b = *bytes.get(*pos)?;
            if !b.is_ascii_digit() {
                return None;
            }
            digits.push(b - b'0');
            *pos += 1;
        }
        if bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
            return None;
        }
        Some(digits)
    }

    /// Token-level layout of the rendered answer, for constrained decoding.
    pub fn slots(&self) -> Vec<TemplateSlot> {
        let mut out = Vec::new();
        for c in self.prefix.chars() {
            out.push(TemplateSlot::Literal(c));
        }
        for i in 0..self.k {
            out.push(TemplateSlot::Digit { axis: Axis::X, index: i });
        }
        for c in self.mid.chars() {
            out.push(TemplateSlot::Literal(c));
        }
        for i in 0..self.k {
            out.push(TemplateSlot::Digit { axis: Axis::Y, index: i });
        }
        for c in self.suffix.chars() {
            out.push(TemplateSlot::Literal(c));
        }
        out
    }

    /// Number of tokens in a rendered answer.
    pub fn answer_len(&self) -> usize {
        self.prefix.chars().count()
            + self.mid.chars().count()
            + self.suffix.chars().count()
            + 2 * self.k
    }
}

/// Yields a probability distribution over the vocabulary for any token
/// prefix. Implemented by the model's inference session and by the fixed
/// test sources.
pub trait TokenDistribution {
    fn distribution(&mut self, prefix: &[TokenId]) -> Vec<f64>;
}

/// Renormalized digit probability: mass on a digit divided by the total mass
/// on the ten digit symbols.
fn digit_prob(vocab: &Vocabulary, dist: &[f64], digit: u8) -> f64 {
    let base = vocab.digit_base();
    let total: f64 = dist[base..base + 10].iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    dist[base + digit as usize] / total
}

fn push_text(vocab: &Vocabulary, context: &mut Vec<TokenId>, text: &str) -> Result<()> {
    context.extend(vocab.encode_text(text)?);
    Ok(())
}

/// Probability of the x-axis digit run given the prompt, under the
/// factorized posterior. Template scaffolding is consumed as given context
/// and contributes no factors.
pub fn x_axis_posterior(
    codec: &CoordCodec,
    vocab: &Vocabulary,
    source: &mut dyn TokenDistribution,
    prompt: &[TokenId],
    x_digits: &[u8],
) -> Result<f64> {
    let mut context = prompt.to_vec();
    push_text(vocab, &mut context, &codec.prefix)?;
    Ok(digit_run_probability(vocab, source, &mut context, x_digits))
}

/// Probability of the y-axis digit run given the prompt and the x digits.
pub fn y_axis_posterior(
    codec: &CoordCodec,
    vocab: &Vocabulary,
    source: &mut dyn TokenDistribution,
    prompt: &[TokenId],
    x_digits: &[u8],
    y_digits: &[u8],
) -> Result<f64> {
    let mut context = prompt.to_vec();
    push_text(vocab, &mut context, &codec.prefix)?;
    for &d in x_digits {
        context.push(vocab.digit_id(d));
    }
    push_text(vocab, &mut context, &codec.mid)?;
    Ok(digit_run_probability(vocab, source, &mut context, y_digits))
}

/// Probability of a full coordinate string: the product of all 2K digit
/// factors.
pub fn coord_posterior(
    codec: &CoordCodec,
    vocab: &Vocabulary,
    source: &mut dyn TokenDistribution,
    prompt: &[TokenId],
    x_digits: &[u8],
    y_digits: &[u8],
) -> Result<f64> {
    let px = x_axis_posterior(codec, vocab, source, prompt, x_digits)?;
    let py = y_axis_posterior(codec, vocab, source, prompt, x_digits, y_digits)?;
    Ok(px * py)
}

fn digit_run_probability(
    vocab: &Vocabulary,
    source: &mut dyn TokenDistribution,
    context: &mut Vec<TokenId>,
    digits: &[u8],
) -> f64 {
    let mut p = 1.0;
    for &d in digits {
        let dist = source.distribution(context);
        p *= digit_prob(vocab, &dist, d);
        context.push(vocab.digit_id(d));
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn codec3() -> CoordCodec {
        CoordCodec::with_k(3).unwrap()
    }

    #[test]
    fn encode_matches_template() {
        assert_eq!(codec3().encode(0.123, 0.456).unwrap(), "[0.123, 0.456]");
    }

    #[test]
    fn boundary_clamps_to_max_representable() {
        assert_eq!(codec3().encode(1.0, 0.0).unwrap(), "[0.999, 0.000]");
    }

    #[test]
    fn negative_and_non_finite_are_domain_errors() {
        assert!(codec3().encode(-0.1, 0.5).is_err());
        assert!(codec3().encode(f64::NAN, 0.5).is_err());
        assert!(codec3().encode(0.5, f64::INFINITY).is_err());
    }

    #[test]
    fn parse_plain_and_embedded() {
        assert_eq!(codec3().parse("[0.500, 0.250]").unwrap(), (0.5, 0.25));
        assert_eq!(
            codec3().parse("answer: [0.120, 0.340].").unwrap(),
            (0.12, 0.34)
        );
    }

    #[test]
    fn parse_rejects_wrong_digit_count() {
        let err = codec3().parse("[0.5, 0.25]").unwrap_err();
        match err {
            Error::Parse { offending, .. } => assert!(offending.starts_with("[0.5")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn parse_skips_false_starts() {
        // The first prefix occurrence fails; a later full match is found.
        assert_eq!(
            codec3().parse("[0.x] then [0.100, 0.900]").unwrap(),
            (0.1, 0.9)
        );
    }

    #[test]
    fn exhaustive_grid_round_trips() {
        // 10^4 grid points; the independent oracle computes truncation in
        // integer arithmetic.
        let codec = codec3();
        for i in 0..10_000u64 {
            let original = i as f64 / 10_000.0;
            let text = codec.encode(original, original).unwrap();
            let (x, _) = codec.parse(&text).unwrap();
            let truncated_code = i / 10; // exact integer truncation to 3 digits
            let truncated = truncated_code as f64 / 1000.0;
            assert_eq!(x, truncated, "grid point {original}");
            assert!((x - original).abs() < 1e-3);
        }
    }

    #[test]
    fn slots_cover_template() {
        let slots = codec3().slots();
        assert_eq!(slots.len(), codec3().answer_len());
        let digit_slots = slots
            .iter()
            .filter(|s| matches!(s, TemplateSlot::Digit { .. }))
            .count();
        assert_eq!(digit_slots, 6);
        assert_eq!(slots[0], TemplateSlot::Literal('['));
    }

    /// Source that always returns the same distribution.
    struct FixedSource(Vec<f64>);
    impl TokenDistribution for FixedSource {
        fn distribution(&mut self, _prefix: &[TokenId]) -> Vec<f64> {
            self.0.clone()
        }
    }

    #[test]
    fn uniform_digit_source_gives_uniform_strings() {
        let vocab = Vocabulary::default_charset();
        let codec = codec3();
        let mut dist = vec![0.0; vocab.size()];
        for d in 0..10u8 {
            dist[vocab.digit_id(d)] = 0.1;
        }
        let mut source = FixedSource(dist);
        let p = x_axis_posterior(&codec, &vocab, &mut source, &[], &[1, 2, 3]).unwrap();
        assert!((p - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn degenerate_source_concentrates_on_one_string() {
        let vocab = Vocabulary::default_charset();
        let codec = codec3();
        let mut dist = vec![0.0; vocab.size()];
        dist[vocab.digit_id(7)] = 1.0;
        let mut source = FixedSource(dist);
        let p777 = x_axis_posterior(&codec, &vocab, &mut source, &[], &[7, 7, 7]).unwrap();
        assert_eq!(p777, 1.0);
        let p778 = x_axis_posterior(&codec, &vocab, &mut source, &[], &[7, 7, 8]).unwrap();
        assert_eq!(p778, 0.0);
    }

    #[test]
    fn posterior_renormalizes_over_digits() {
        // Mass on digits is 0.5 of the vocabulary; renormalization must make
        // per-axis probabilities sum to 1 by brute-force enumeration (K=2).
        let vocab = Vocabulary::default_charset();
        let codec = CoordCodec::with_k(2).unwrap();
        let mut dist = vec![0.5 / (vocab.size() as f64 - 10.0); vocab.size()];
        for d in 0..10u8 {
            dist[vocab.digit_id(d)] = 0.05 * (d as f64 + 1.0) / 5.5;
        }
        let mut source = FixedSource(dist);
        let mut total = 0.0;
        for a in 0..10u8 {
            for b in 0..10u8 {
                total +=
                    x_axis_posterior(&codec, &vocab, &mut source, &[], &[a, b]).unwrap();
            }
        }
        assert!((total - 1.0).abs() < 1e-9, "total {total}");
    }

    proptest! {
        /// encode -> tokenize -> detokenize -> parse is identity up to
        /// truncation at 10^-K for K in 1..=5.
        #[test]
        fn round_trip_truncates(x in 0.0f64..1.0, y in 0.0f64..1.0, k in 1usize..=5) {
            let codec = CoordCodec::with_k(k).unwrap();
            let vocab = Vocabulary::default_charset();
            let text = codec.encode(x, y).unwrap();
            let ids = vocab.encode_text(&text).unwrap();
            let back = vocab.decode(&ids).unwrap();
            let (px, py) = codec.parse(&back).unwrap();
            let res = 10f64.powi(-(k as i32));
            prop_assert!((px - x).abs() < res + 1e-9);
            prop_assert!((py - y).abs() < res + 1e-9);
            prop_assert!(px <= x + 1e-9);
            prop_assert!(py <= y + 1e-9);
        }
    }
}
