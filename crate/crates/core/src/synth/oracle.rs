//! Brute-force reference implementations, kept deliberately naive so they
//! can check the fast paths in tests.

use crate::error::{Error, Result};
use crate::segmenter::reaches_target;
use crate::time::Micros;

pub const ORACLE_MAX_FRAMES: usize = 20;

/// Maximum bipartite matching between boundaries within `tol`, by augmenting
/// paths.
pub fn oracle_boundary_match(hyp: &[Micros], reference: &[Micros], tol: Micros) -> usize {
    let adj: Vec<Vec<usize>> = hyp
        .iter()
        .map(|&h| {
            (0..reference.len())
                .filter(|&j| (h - reference[j]).abs() <= tol)
                .collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; reference.len()];

    fn augment(
        i: usize,
        adj: &[Vec<usize>],
        owner: &mut [Option<usize>],
        seen: &mut [bool],
    ) -> bool {
        for &j in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|k| augment(k, adj, owner, seen)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }

    let mut matched = 0;
    for i in 0..hyp.len() {
        let mut seen = vec![false; reference.len()];
        if augment(i, &adj, &mut owner, &mut seen) {
            matched += 1;
        }
    }
    matched
}

/// Kept-frame mask by subset enumeration: the smallest subset whose mass
/// reaches `p` of the total; among those the heaviest, then the
/// lexicographically smallest index set.
pub fn oracle_threshold(weights: &[f64], p: f64) -> Result<Vec<bool>> {
    let n = weights.len();
    if n > ORACLE_MAX_FRAMES {
        return Err(Error::InvalidArgument(format!(
            "oracle threshold enumerates at most {ORACLE_MAX_FRAMES} frames, got {n}"
        )));
    }
    let total: f64 = weights.iter().filter(|&&w| w > 0.0).sum();
    let mut mask = vec![false; n];
    if total <= 0.0 {
        return Ok(mask);
    }
    for k in 1..=n {
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            let mass: f64 = idx.iter().map(|&i| weights[i].max(0.0)).sum();
            if reaches_target(mass, total, p) && best.as_ref().is_none_or(|(m, _)| mass > *m) {
                best = Some((mass, idx.clone()));
            }
            if !next_combination(&mut idx, n) {
                break;
            }
        }
        if let Some((_, set)) = best {
            for i in set {
                mask[i] = true;
            }
            return Ok(mask);
        }
    }
    unreachable!("the full set always reaches the target")
}

/// Advances `idx` to the next k-combination of `0..n` in lexicographic order.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Edit distance over the full `(|a|+1) x (|b|+1)` table.
#[allow(clippy::needless_range_loop)]
pub fn oracle_levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = (d[i - 1][j - 1] + cost)
                .min(d[i - 1][j] + 1)
                .min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}
