//! Base −2 encoding of rank identifiers.
//!
//! A rank `r` of a `p`-rank collective is written with `s = log2 p`
//! negabinary digits. Ranks up to [`max_positive`]`(s)` use their own
//! value, larger ranks use the value `r - p`, so the `p` codes cover the
//! `p` consecutive integers representable on `s` digits.

use std::fmt;

use crate::{steps_for, Error, Rank, Result};

/// Bits at odd positions; odd powers of −2 are negative.
const ODD_POSITIONS: u64 = 0xAAAA_AAAA_AAAA_AAAA;
const EVEN_POSITIONS: u64 = 0x5555_5555_5555_5555;

/// Widest code we accept; keeps every intermediate inside an `i64`.
pub const MAX_WIDTH: u32 = 62;

/// A fixed-width bit pattern interpreted in base −2.
///
/// The width is part of the value: `010` on three digits and `0010` on four
/// digits are different codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NegabinaryCode {
    bits: u64,
    width: u32,
}

fn low_mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

impl NegabinaryCode {
    pub fn new(bits: u64, width: u32) -> Result<Self> {
        if width == 0 || width > MAX_WIDTH {
            return Err(Error::InvalidCode(format!("width {width} not in 1..={MAX_WIDTH}")));
        }
        if bits & !low_mask(width) != 0 {
            return Err(Error::InvalidCode(format!(
                "bit pattern {bits:#b} has bits above width {width}"
            )));
        }
        Ok(Self { bits, width })
    }

    /// Encodes `value` on `width` digits.
    pub fn encode(value: i64, width: u32) -> Result<Self> {
        if width == 0 || width > MAX_WIDTH {
            return Err(Error::InvalidCode(format!("width {width} not in 1..={MAX_WIDTH}")));
        }
        if value < min_negative(width) || value > max_positive(width) {
            return Err(Error::NotRepresentable { value, width });
        }
        let bits = ((value as u64).wrapping_add(ODD_POSITIONS)) ^ ODD_POSITIONS;
        Ok(Self {
            bits: bits & low_mask(width),
            width,
        })
    }

    pub fn bits(self) -> u64 {
        self.bits
    }

    pub fn width(self) -> u32 {
        self.width
    }

    /// The integer `Σ b_j·(−2)^j`.
    pub fn value(self) -> i64 {
        let odd = ODD_POSITIONS & low_mask(self.width);
        (self.bits ^ odd) as i64 - odd as i64
    }

    pub fn bit(self, position: u32) -> bool {
        position < self.width && (self.bits >> position) & 1 == 1
    }

    /// Flips the `count` least significant digits.
    pub fn flip_low(self, count: u32) -> Self {
        let count = count.min(self.width);
        Self {
            bits: self.bits ^ low_mask(count),
            width: self.width,
        }
    }

    /// Keeps only the `count` most significant digits of the code.
    pub fn high_digits(self, count: u32) -> u64 {
        let count = count.min(self.width);
        self.bits >> (self.width - count)
    }
}

impl fmt::Display for NegabinaryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:0width$b}", self.bits, width = self.width as usize)
    }
}

/// Largest integer representable on `width` negabinary digits (`…0101`).
pub fn max_positive(width: u32) -> i64 {
    (EVEN_POSITIONS & low_mask(width.min(MAX_WIDTH))) as i64
}

/// Smallest integer representable on `width` negabinary digits (`…1010`).
pub fn min_negative(width: u32) -> i64 {
    -((ODD_POSITIONS & low_mask(width.min(MAX_WIDTH))) as i64)
}

/// Negabinary code of rank `r` in a collective over `p` ranks.
pub fn rank2nb(r: Rank, p: u32) -> Result<NegabinaryCode> {
    let width = steps_for(p)?;
    if r >= p {
        return Err(Error::RankOutOfRange { rank: r, p });
    }
    let value = if i64::from(r) <= max_positive(width) {
        i64::from(r)
    } else {
        i64::from(r) - i64::from(p)
    };
    NegabinaryCode::encode(value, width)
}

/// Rank whose negabinary code is `code`; the inverse of [`rank2nb`].
pub fn nb2rank(code: NegabinaryCode, p: u32) -> Result<Rank> {
    let width = steps_for(p)?;
    if code.width() != width {
        return Err(Error::WidthMismatch {
            width: code.width(),
            p,
        });
    }
    Ok(code.value().rem_euclid(i64::from(p)) as Rank)
}

/// Length of the run of identical digits starting at the least significant
/// position.
pub fn trailing_equal_bits(code: NegabinaryCode) -> u32 {
    let lowest = code.bits & 1;
    // digits equal to the lowest one become zeros
    let normalized = if lowest == 1 { !code.bits } else { code.bits } & low_mask(code.width);
    normalized.trailing_zeros().min(code.width)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct positional evaluation, independent of the mask arithmetic.
    fn evaluate(digits: &str) -> i64 {
        digits
            .chars()
            .rev()
            .enumerate()
            .map(|(j, d)| if d == '1' { (-2i64).pow(j as u32) } else { 0 })
            .sum()
    }

    fn code(digits: &str) -> NegabinaryCode {
        NegabinaryCode::new(u64::from_str_radix(digits, 2).unwrap(), digits.len() as u32).unwrap()
    }

    #[test]
    fn encodes_worked_examples() {
        assert_eq!(rank2nb(2, 8).unwrap().to_string(), "110");
        assert_eq!(rank2nb(6, 8).unwrap().to_string(), "010");
        assert_eq!(rank2nb(0, 16).unwrap().bits(), 0);
        assert_eq!(rank2nb(8, 16).unwrap().to_string(), "1000");
    }

    #[test]
    fn decodes_against_direct_evaluation() {
        assert_eq!(evaluate("111"), 3);
        assert_eq!(nb2rank(code("111"), 8).unwrap(), 3);
        assert_eq!(evaluate("011"), -1);
        assert_eq!(nb2rank(code("011"), 8).unwrap(), 7);
    }

    #[test]
    fn max_positive_values() {
        assert_eq!(max_positive(6), 21);
        assert_eq!(max_positive(3), 5);
        assert_eq!(max_positive(1), 1);
        assert_eq!(min_negative(3), -2);
    }

    #[test]
    fn trailing_runs() {
        assert_eq!(trailing_equal_bits(code("1000")), 3);
        assert_eq!(trailing_equal_bits(code("1011")), 2);
        assert_eq!(trailing_equal_bits(code("0000")), 4);
        assert_eq!(trailing_equal_bits(code("1111")), 4);
        assert_eq!(trailing_equal_bits(code("0")), 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(rank2nb(1, 6), Err(Error::UnsupportedRankCount(6))));
        assert!(matches!(rank2nb(8, 8), Err(Error::RankOutOfRange { .. })));
        assert!(matches!(nb2rank(code("0101"), 8), Err(Error::WidthMismatch { .. })));
        assert!(NegabinaryCode::new(0b1000, 3).is_err());
        assert!(NegabinaryCode::encode(6, 3).is_err());
    }

    #[test]
    fn round_trip_every_rank_up_to_two_to_the_sixteen() {
        for s in 1..=16 {
            let p = 1u32 << s;
            for r in 0..p {
                let c = rank2nb(r, p).unwrap();
                assert_eq!(nb2rank(c, p).unwrap(), r, "p={p} r={r}");
            }
        }
    }

    #[test]
    fn rank2nb_is_injective() {
        for s in 1..=12 {
            let p = 1u32 << s;
            let mut seen = vec![false; p as usize];
            for r in 0..p {
                let bits = rank2nb(r, p).unwrap().bits() as usize;
                assert!(!seen[bits], "p={p} collision at r={r}");
                seen[bits] = true;
            }
        }
    }

    #[test]
    fn max_positive_is_largest_nonnegative_code_value() {
        for s in 1..=16u32 {
            let p = 1u32 << s;
            let largest = (0..p)
                .filter(|&r| rank2nb(r, p).unwrap().value() >= 0)
                .max()
                .unwrap();
            assert_eq!(i64::from(largest), max_positive(s), "s={s}");
        }
    }

    #[test]
    fn xor_of_all_ones_prefixes_is_a_basis() {
        for s in 1..=12u32 {
            let basis: Vec<u64> = (1..=s).map(low_mask).collect();
            let mut hit = vec![0u32; 1 << s];
            for subset in 0u64..(1 << s) {
                let x = basis
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| subset >> k & 1 == 1)
                    .fold(0u64, |acc, (_, b)| acc ^ b);
                hit[x as usize] += 1;
            }
            assert!(hit.iter().all(|&h| h == 1), "s={s}");
        }
    }

    proptest::proptest! {
        #[test]
        fn encode_matches_direct_evaluation(width in 1u32..=40, raw in proptest::num::i64::ANY) {
            let lo = min_negative(width);
            let hi = max_positive(width);
            let value = lo + raw.rem_euclid(hi - lo + 1);
            let c = NegabinaryCode::encode(value, width).unwrap();
            proptest::prop_assert_eq!(evaluate(&c.to_string()), value);
            proptest::prop_assert_eq!(c.value(), value);
        }
    }
}
