use std::cmp::Ordering;

/// Default sparsity compression ratio.
pub const DEFAULT_COMPRESSION: f64 = 8.0;

/// Number of tokens kept out of `n` at the given compression ratio.
#[inline]
pub fn active_count(n: usize, compression: f64) -> usize {
    if n == 0 {
        return 0;
    }
    let k = (n as f64 / compression.max(1.0)).ceil() as usize;
    k.clamp(1, n)
}

#[inline]
fn rank(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Positions of the top `ceil(n / compression)` scores, in ascending
/// position order. Equal scores prefer the lower position.
pub fn select_active_tokens(scores: &[f64], compression: f64) -> Vec<usize> {
    let mut out = Vec::new();
    select_active_into(scores, compression, &mut out);
    out
}

/// Allocation-reusing form of [`select_active_tokens`].
pub fn select_active_into(scores: &[f64], compression: f64, out: &mut Vec<usize>) {
    out.clear();
    out.extend(0..scores.len());
    let k = active_count(scores.len(), compression);
    if k < scores.len() {
        out.select_nth_unstable_by(k - 1, |&a, &b| rank(scores, a, b));
        out.truncate(k);
    }
    out.sort_unstable();
}

/// Token ids of the top `ceil(n / compression)` `(token_id, score)` pairs,
/// sorted by id. Equal scores prefer the lower token id.
pub fn select_active_ids(scored: &[(u64, f64)], compression: f64) -> Vec<u64> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    let k = active_count(scored.len(), compression);
    let cmp = |&a: &usize, &b: &usize| scored[b].1.total_cmp(&scored[a].1).then(scored[a].0.cmp(&scored[b].0));
    if k < scored.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    let mut ids: Vec<u64> = order.into_iter().map(|i| scored[i].0).collect();
    ids.sort_unstable();
    ids
}

/// Fraction of `current` that also appears in `previous`; both sorted ascending.
pub fn overlap_fraction(previous: &[usize], current: &[usize]) -> f64 {
    if current.is_empty() {
        return 1.0;
    }
    let (mut i, mut j, mut shared) = (0, 0, 0usize);
    while i < previous.len() && j < current.len() {
        match previous[i].cmp(&current[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                shared += 1;
                i += 1;
                j += 1;
            }
        }
    }
    shared as f64 / current.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn compression_one_keeps_all() {
        let s = [0.3, 0.1, 0.2];
        assert_eq!(select_active_tokens(&s, 1.0), vec![0, 1, 2]);
    }

    #[test]
    fn argmax_of_increasing_scores() {
        let s: Vec<f64> = (0..8).map(f64::from).collect();
        assert_eq!(select_active_tokens(&s, 8.0), vec![7]);
        let ids: Vec<(u64, f64)> = s.iter().enumerate().map(|(i, &v)| (i as u64, v)).collect();
        assert_eq!(select_active_ids(&ids, 8.0), vec![7]);
    }

    #[test]
    fn matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s: Vec<f64> = (0..64).map(|_| (rng.gen_range(0..16) as f64) / 4.0).collect();
            let mut sorted: Vec<usize> = (0..64).collect();
            sorted.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
            let mut want = sorted[..8].to_vec();
            want.sort();
            assert_eq!(select_active_tokens(&s, 8.0), want);
        }
    }

    #[test]
    fn ties_prefer_lower_id() {
        let scored = [(9, 1.0), (4, 1.0), (7, 1.0), (2, 0.5)];
        assert_eq!(select_active_ids(&scored, 2.0), vec![4, 7]);
    }

    #[test]
    fn counts() {
        assert_eq!(active_count(0, 8.0), 0);
        assert_eq!(active_count(1, 8.0), 1);
        assert_eq!(active_count(64, 8.0), 8);
        assert_eq!(active_count(65, 8.0), 9);
        assert_eq!(active_count(10, 1.0), 10);
    }

    #[test]
    fn overlap() {
        assert_eq!(overlap_fraction(&[1, 2, 3, 4], &[2, 4, 6, 8]), 0.5);
        assert_eq!(overlap_fraction(&[], &[1]), 0.0);
    }
}
