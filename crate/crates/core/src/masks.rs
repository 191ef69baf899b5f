//! Group partitioning, causal masks, and the long-distance target shift.
//!
//! A target sequence of length `n` is split into consecutive groups of `K`
//! tokens (the last group may be shorter). Decoding is autoregressive across
//! groups and parallel within a group, which needs two ingredients at the
//! decoder input:
//!
//! - a *relaxed* causal mask that lets position `i` attend to every position
//!   in its own group and all earlier groups, and
//! - a shifted input stream that feeds token `y[t-K]` (or a start symbol for
//!   the first group) at position `t`.
//!
//! All indices here are 0-based: `M[i][j] = 1` iff `j < (floor(i/K)+1)*K`.

use crate::error::{Error, Result};

/// Partition of positions `0..n` into consecutive groups of size `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    pub n: usize,
    pub k: usize,
    /// Half-open index ranges, in order; all but the last have length `k`.
    pub groups: Vec<std::ops::Range<usize>>,
}

impl GroupPartition {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }
}

/// Index of the group containing position `t`.
pub fn group_index(t: usize, k: usize) -> usize {
    t / k
}

/// Split positions `0..n` into consecutive groups of `k` tokens.
pub fn partition_groups(n: usize, k: usize) -> Result<GroupPartition> {
    if n == 0 {
        return Err(Error::invalid("partition_groups: n must be >= 1"));
    }
    if k == 0 {
        return Err(Error::invalid("partition_groups: K must be >= 1"));
    }
    let count = (n - 1) / k + 1;
    let groups = (0..count).map(|g| (g * k)..((g + 1) * k).min(n)).collect();
    Ok(GroupPartition { n, k, groups })
}

/// Dense binary attention-visibility matrix; `1` means "may attend".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    n: usize,
    bits: Vec<u8>,
}

impl MaskMatrix {
    pub fn from_fn(n: usize, mut allowed: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = vec![0u8; n * n];
        for i in 0..n {
            for j in 0..n {
                bits[i * n + j] = u8::from(allowed(i, j));
            }
        }
        MaskMatrix { n, bits }
    }

    pub fn side(&self) -> usize {
        self.n
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j] == 1
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.n..(i + 1) * self.n]
    }

    /// Full row-major bit buffer (`n*n` entries).
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Additive form for attention: `0` where visible, `penalty` where masked.
    pub fn to_additive<F: Copy>(&self, zero: F, penalty: F) -> Vec<F> {
        self.bits
            .iter()
            .map(|&b| if b == 1 { zero } else { penalty })
            .collect()
    }
}

/// Standard lower-triangular mask: `M[i][j] = 1` iff `j <= i`.
pub fn strict_causal_mask(n: usize) -> Result<MaskMatrix> {
    if n == 0 {
        return Err(Error::invalid("strict_causal_mask: n must be >= 1"));
    }
    Ok(MaskMatrix::from_fn(n, |i, j| j <= i))
}

/// Coarse-grained lower-triangular mask: position `i` sees everything up to
/// the end of its own group, `M[i][j] = 1` iff `j < (floor(i/K)+1)*K`.
pub fn relaxed_causal_mask(n: usize, k: usize) -> Result<MaskMatrix> {
    if n == 0 {
        return Err(Error::invalid("relaxed_causal_mask: n must be >= 1"));
    }
    if k == 0 {
        return Err(Error::invalid("relaxed_causal_mask: K must be >= 1"));
    }
    Ok(MaskMatrix::from_fn(n, |i, j| j < (i / k + 1) * k))
}

/// Long-distance input shift: position `t` is fed `y[t-K]`, with the first
/// `K` positions fed the start symbol. Output length equals input length.
pub fn shift_targets(y: &[u32], k: usize, bos: u32) -> Vec<u32> {
    debug_assert!(k >= 1);
    (0..y.len())
        .map(|t| if t < k { bos } else { y[t - k] })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(m: &MaskMatrix) -> Vec<String> {
        (0..m.side())
            .map(|i| m.row(i).iter().map(|b| char::from(b'0' + b)).collect())
            .collect()
    }

    #[test]
    fn partition_even_division() {
        let p = partition_groups(6, 2).unwrap();
        assert_eq!(p.groups, vec![0..2, 2..4, 4..6]);
    }

    #[test]
    fn partition_short_last_group() {
        let p = partition_groups(7, 3).unwrap();
        assert_eq!(p.groups, vec![0..3, 3..6, 6..7]);
    }

    #[test]
    fn partition_single_undersized_group() {
        let p = partition_groups(1, 4).unwrap();
        assert_eq!(p.groups, vec![0..1]);
    }

    #[test]
    fn partition_invariants_hold() {
        for n in 1..=20 {
            for k in 1..=20 {
                let p = partition_groups(n, k).unwrap();
                assert_eq!(p.num_groups(), (n - 1) / k + 1);
                let mut cursor = 0;
                for (g, r) in p.groups.iter().enumerate() {
                    assert_eq!(r.start, cursor);
                    cursor = r.end;
                    if g + 1 < p.num_groups() {
                        assert_eq!(r.len(), k);
                    } else {
                        assert!((1..=k).contains(&r.len()));
                    }
                }
                assert_eq!(cursor, n);
            }
        }
    }

    #[test]
    fn partition_rejects_zero_args() {
        assert!(partition_groups(0, 2).is_err());
        assert!(partition_groups(2, 0).is_err());
    }

    #[test]
    fn strict_mask_small() {
        assert_eq!(rows(&strict_causal_mask(1).unwrap()), vec!["1"]);
        assert_eq!(
            rows(&strict_causal_mask(3).unwrap()),
            vec!["100", "110", "111"]
        );
    }

    #[test]
    fn strict_mask_n6() {
        assert_eq!(
            rows(&strict_causal_mask(6).unwrap()),
            vec!["100000", "110000", "111000", "111100", "111110", "111111"]
        );
    }

    #[test]
    fn relaxed_mask_n6_k2() {
        assert_eq!(
            rows(&relaxed_causal_mask(6, 2).unwrap()),
            vec!["110000", "110000", "111100", "111100", "111111", "111111"]
        );
    }

    #[test]
    fn relaxed_mask_k1_equals_strict() {
        for n in 1..=16 {
            assert_eq!(
                relaxed_causal_mask(n, 1).unwrap(),
                strict_causal_mask(n).unwrap()
            );
        }
    }

    #[test]
    fn relaxed_mask_k_at_least_n_is_all_ones() {
        for k in 4..=8 {
            let m = relaxed_causal_mask(4, k).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    assert!(m.allowed(i, j));
                }
            }
        }
    }

    #[test]
    fn relaxed_mask_matches_group_index_oracle() {
        // Brute force: visibility is exactly "j's group is not after i's".
        for n in 1..=16 {
            for k in 1..=16 {
                let m = relaxed_causal_mask(n, k).unwrap();
                for i in 0..n {
                    for j in 0..n {
                        let expect = group_index(j, k) <= group_index(i, k);
                        assert_eq!(m.allowed(i, j), expect, "n={n} k={k} i={i} j={j}");
                    }
                }
            }
        }
    }

    #[test]
    fn relaxed_mask_rows_are_one_prefixes() {
        for n in 1..=16 {
            for k in 1..=16 {
                let m = relaxed_causal_mask(n, k).unwrap();
                for i in 0..n {
                    let prefix = ((i / k + 1) * k).min(n);
                    for j in 0..n {
                        assert_eq!(m.allowed(i, j), j < prefix);
                    }
                }
            }
        }
    }

    #[test]
    fn mask_rejects_zero_args() {
        assert!(strict_causal_mask(0).is_err());
        assert!(relaxed_causal_mask(0, 1).is_err());
        assert!(relaxed_causal_mask(3, 0).is_err());
    }

    #[test]
    fn additive_form_places_penalty_on_zeros() {
        let m = relaxed_causal_mask(4, 2).unwrap();
        let add = m.to_additive(0.0f32, -1e9);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if m.allowed(i, j) { 0.0 } else { -1e9 };
                assert_eq!(add[i * 4 + j], expect);
            }
        }
    }

    #[test]
    fn shift_targets_examples() {
        assert_eq!(shift_targets(&[10, 11, 12, 13], 2, 1), vec![1, 1, 10, 11]);
        assert_eq!(shift_targets(&[10, 11, 12], 1, 1), vec![1, 10, 11]);
        assert_eq!(shift_targets(&[10, 11], 4, 1), vec![1, 1]);
        assert_eq!(shift_targets(&[], 3, 1), Vec::<u32>::new());
    }

    #[test]
    fn shift_feeds_previous_group() {
        // The input at position t comes from group floor(t/K)-1 (or is bos).
        let y: Vec<u32> = (100..120).collect();
        for k in 1..=6 {
            let shifted = shift_targets(&y, k, 1);
            for t in 0..y.len() {
                if t < k {
                    assert_eq!(shifted[t], 1);
                } else {
                    assert_eq!(group_index((t - k) as usize, k), group_index(t, k) - 1);
                    assert_eq!(shifted[t], y[t - k]);
                }
            }
        }
    }
}
