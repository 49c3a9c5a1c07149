//! Floor-law index maps shared by the degradation pipeline, the
//! reconstruction network, and the interpolation baselines.

/// Indices retained when skipping at factor `m >= 1`:
/// `{ floor(i * m) : i = 0, 1, ... }` while the value stays below `len`,
/// ascending (strictly, since m >= 1) and deduplicated.
pub fn retained_indices(len: usize, m: f64) -> Vec<usize> {
    let mut out = Vec::with_capacity((len as f64 / m).ceil() as usize + 1);
    let mut i = 0usize;
    loop {
        let idx = (i as f64 * m).floor() as usize;
        if idx >= len {
            break;
        }
        if out.last() != Some(&idx) {
            out.push(idx);
        }
        i += 1;
    }
    out
}

/// Source index for each output position under magnification `m >= 1`:
/// `w -> floor(w / m)`, clamped into the source range.
pub fn upscale_source_indices(out_len: usize, in_len: usize, m: f64) -> Vec<usize> {
    (0..out_len)
        .map(|w| (((w as f64) / m).floor() as usize).min(in_len.saturating_sub(1)))
        .collect()
}

/// Output length when magnifying `in_len` samples by `m`: `floor(m * in_len)`.
pub fn upscale_len(in_len: usize, m: f64) -> usize {
    (m * in_len as f64).floor() as usize
}

/// Fractional offset `w/m - floor(w/m)` computed as an exact-as-possible
/// residue so that positions sharing the same residue produce bit-identical
/// values (for integer `m` the sequence is exactly periodic with period `m`).
pub fn fractional_offset(w: usize, m: f64) -> f64 {
    let q = (w as f64 / m).floor();
    let mut frac = (w as f64 - q * m) / m;
    if frac >= 1.0 {
        frac -= 1.0;
    }
    if frac < 0.0 {
        frac = 0.0;
    }
    frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn retained_identity_at_one() {
        assert_eq!(retained_indices(5, 1.0), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn retained_integer_factor() {
        let idx = retained_indices(512, 2.0);
        assert_eq!(idx.len(), 256);
        assert_eq!(idx[0], 0);
        assert_eq!(idx[255], 510);
        assert!(idx.iter().all(|i| i % 2 == 0));
    }

    #[test]
    fn retained_non_integer_factor() {
        // floor(0, 2.5, 5, 7.5) -> {0, 2, 5, 7}
        assert_eq!(retained_indices(10, 2.5), vec![0, 2, 5, 7]);
    }

    #[test]
    fn fractional_offsets_are_periodic_for_integer_m() {
        for m in [2usize, 3, 4] {
            let fr: Vec<f64> = (0..40).map(|w| fractional_offset(w, m as f64)).collect();
            for w in 0..40 - m {
                assert_eq!(fr[w].to_bits(), fr[w + m].to_bits(), "m={} w={}", m, w);
            }
        }
    }

    proptest! {
        #[test]
        fn fractional_offset_in_unit_interval(w in 0usize..10_000, m in 1.0f64..8.0) {
            let f = fractional_offset(w, m);
            prop_assert!((0.0..1.0).contains(&f));
        }

        #[test]
        fn retained_strictly_ascending(len in 1usize..600, m in 1.0f64..8.0) {
            let idx = retained_indices(len, m);
            prop_assert!(!idx.is_empty());
            prop_assert!(idx.windows(2).all(|p| p[0] < p[1]));
            prop_assert!(*idx.last().unwrap() < len);
        }

        #[test]
        fn upscale_indices_stay_in_range(n in 1usize..200, m in 1.0f64..5.0) {
            let out = upscale_len(n, m);
            let map = upscale_source_indices(out, n, m);
            prop_assert_eq!(map.len(), out);
            prop_assert!(map.iter().all(|&i| i < n));
        }
    }
}
