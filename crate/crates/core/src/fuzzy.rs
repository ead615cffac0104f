//! Ratcliff/Obershelp ("gestalt pattern matching") similarity.
//!
//! The matcher finds the longest common contiguous block, then recurses on
//! the unmatched regions to its left and right. Among equally long blocks
//! the one starting earliest in `a` wins, then the one starting earliest in
//! `b`. This is the same block selection as Python's
//! `difflib.SequenceMatcher` with no junk heuristic, so ratios agree with
//! it for inputs shorter than 200 characters.

/// A matched block: `a[a_start..a_start + len] == b[b_start..b_start + len]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchingBlock {
    pub a_start: usize,
    pub b_start: usize,
    pub len: usize,
}

/// Longest common block of `a[alo..ahi]` and `b[blo..bhi]`.
///
/// Dynamic programming over one row of match lengths. A strictly longer
/// block replaces the current best, so the earliest block (in `a`, then `b`)
/// survives ties.
fn longest_match<T: PartialEq>(
    a: &[T],
    b: &[T],
    alo: usize,
    ahi: usize,
    blo: usize,
    bhi: usize,
) -> MatchingBlock {
    let width = bhi - blo;
    let mut prev = vec![0usize; width + 1];
    let mut cur = vec![0usize; width + 1];
    let mut best = MatchingBlock {
        a_start: alo,
        b_start: blo,
        len: 0,
    };
    for i in alo..ahi {
        for j in blo..bhi {
            let col = j - blo + 1;
            if a[i] == b[j] {
                let k = prev[col - 1] + 1;
                cur[col] = k;
                if k > best.len {
                    best = MatchingBlock {
                        a_start: i + 1 - k,
                        b_start: j + 1 - k,
                        len: k,
                    };
                }
            } else {
                cur[col] = 0;
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// All matching blocks in ascending order of position.
pub fn matching_blocks<T: PartialEq>(a: &[T], b: &[T]) -> Vec<MatchingBlock> {
    let mut stack = vec![(0, a.len(), 0, b.len())];
    let mut blocks = Vec::new();
    while let Some((alo, ahi, blo, bhi)) = stack.pop() {
        if alo >= ahi || blo >= bhi {
            continue;
        }
        let m = longest_match(a, b, alo, ahi, blo, bhi);
        if m.len == 0 {
            continue;
        }
        blocks.push(m);
        stack.push((alo, m.a_start, blo, m.b_start));
        stack.push((m.a_start + m.len, ahi, m.b_start + m.len, bhi));
    }
    blocks.sort_by_key(|m| (m.a_start, m.b_start));
    blocks
}

/// Similarity ratio `2 * matched / (|a| + |b|)` over Unicode scalar values.
///
/// Two empty strings compare as identical (1.0).
pub fn fuzzy_ratio(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let total = a.len() + b.len();
    if total == 0 {
        return 1.0;
    }
    let matched: usize = matching_blocks(&a, &b).iter().map(|m| m.len).sum();
    2.0 * matched as f64 / total as f64
}
