//! Fragment bookkeeping and draws for the consistency/adaption objective.
//!
//! Unlabeled windows are grouped into contiguity runs (same series, each
//! window exactly one stride after the previous), runs are cut into
//! fixed-length fragments, and a draw picks an interior fragment together
//! with neighbours: K windows from inside it (with replacement), plus one
//! window from a strictly earlier and one from a strictly later fragment.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("need at least 3 fragments to draw, have {have}")]
    TooFewFragments { have: usize },
    #[error("internal draw count must be positive")]
    ZeroInternalDraws,
}

/// One draw for the adaption objective. Window fields are indices into the
/// window list the store was built from; `inner_fragment` is the chosen
/// fragment the reference and internals came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencySample {
    pub inner_fragment: usize,
    pub reference: usize,
    pub internal: Vec<usize>,
    pub external: [usize; 2],
}

/// Windows of each fragment, in chronological order. Fragment order is the
/// build order: runs in input order, fragments left to right within a run.
pub struct FragmentStore {
    fragments: Vec<Vec<usize>>,
    fragment_len: usize,
}

impl FragmentStore {
    /// Groups windows into fragments. `windows[i]` is `(series, offset)` for
    /// the i-th unlabeled window; the slice must be sorted by series then
    /// offset. A run breaks when the series changes or the offset step is
    /// not exactly `stride`; trailing windows short of `fragment_len` are
    /// dropped.
    pub fn build(windows: &[(usize, u64)], stride: u64, fragment_len: usize) -> Self {
        assert!(fragment_len >= 2, "fragments must hold at least 2 windows");
        assert!(stride >= 1, "stride must be at least 1");
        let mut fragments = Vec::new();
        let mut run: Vec<usize> = Vec::new();
        let flush = |run: &mut Vec<usize>, fragments: &mut Vec<Vec<usize>>| {
            for chunk in run.chunks_exact(fragment_len) {
                fragments.push(chunk.to_vec());
            }
            run.clear();
        };
        for (i, &(series, offset)) in windows.iter().enumerate() {
            if let Some(&last) = run.last() {
                let (ps, po) = windows[last];
                let contiguous = ps == series && offset == po + stride;
                if !contiguous {
                    flush(&mut run, &mut fragments);
                }
            }
            run.push(i);
        }
        flush(&mut run, &mut fragments);
        FragmentStore { fragments, fragment_len }
    }

    pub fn n_fragments(&self) -> usize {
        self.fragments.len()
    }

    pub fn fragment_len(&self) -> usize {
        self.fragment_len
    }

    pub fn fragment(&self, i: usize) -> &[usize] {
        &self.fragments[i]
    }

    /// Fragment index holding a window, if any (dropped windows have none).
    pub fn fragment_of(&self, window: usize) -> Option<usize> {
        self.fragments.iter().position(|f| f.contains(&window))
    }

    /// One draw. RNG consumption order is fixed: fragment, reference,
    /// K internals, earlier fragment, its window, later fragment, its window.
    pub fn draw<R: Rng>(&self, k: usize, rng: &mut R) -> Result<ConsistencySample, SamplerError> {
        if k == 0 {
            return Err(SamplerError::ZeroInternalDraws);
        }
        let f = self.fragments.len();
        if f < 3 {
            return Err(SamplerError::TooFewFragments { have: f });
        }
        let pick = |frag: &[usize], rng: &mut R| frag[rng.gen_range(0..frag.len())];
        let inner = rng.gen_range(1..f - 1);
        let reference = pick(&self.fragments[inner], rng);
        let internal: Vec<usize> =
            (0..k).map(|_| pick(&self.fragments[inner], rng)).collect();
        let earlier = rng.gen_range(0..inner);
        let ext_before = pick(&self.fragments[earlier], rng);
        let later = rng.gen_range(inner + 1..f);
        let ext_after = pick(&self.fragments[later], rng);
        Ok(ConsistencySample {
            inner_fragment: inner,
            reference,
            internal,
            external: [ext_before, ext_after],
        })
    }

    /// `n` successive draws with one RNG stream.
    pub fn draw_batch<R: Rng>(
        &self,
        n: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<ConsistencySample>, SamplerError> {
        (0..n).map(|_| self.draw(k, rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn contiguous(n: usize) -> Vec<(usize, u64)> {
        (0..n).map(|i| (0, 16 * i as u64)).collect()
    }

    #[test]
    fn hundred_windows_make_ten_fragments() {
        let store = FragmentStore::build(&contiguous(100), 16, 10);
        assert_eq!(store.n_fragments(), 10);
        for i in 0..10 {
            let want: Vec<usize> = (10 * i..10 * (i + 1)).collect();
            assert_eq!(store.fragment(i), &want[..]);
        }
    }

    #[test]
    fn trailing_partial_fragment_is_dropped() {
        let store = FragmentStore::build(&contiguous(25), 16, 10);
        assert_eq!(store.n_fragments(), 2);
        assert_eq!(store.fragment_of(19), Some(1));
        assert_eq!(store.fragment_of(20), None);
        assert_eq!(store.fragment_of(24), None);
    }

    #[test]
    fn offset_gap_breaks_the_run() {
        // 12 contiguous, a hole, then 12 more: fragment_len 10 keeps one
        // fragment per run and never spans the gap.
        let mut windows = contiguous(12);
        for i in 0..12 {
            windows.push((0, 16 * (20 + i) as u64));
        }
        let store = FragmentStore::build(&windows, 16, 10);
        assert_eq!(store.n_fragments(), 2);
        assert_eq!(store.fragment(0), &(0..10).collect::<Vec<_>>()[..]);
        assert_eq!(store.fragment(1), &(12..22).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn series_change_breaks_the_run() {
        // Two series whose offsets would be contiguous if concatenated.
        let mut windows: Vec<(usize, u64)> = (0..10).map(|i| (0, 16 * i)).collect();
        windows.extend((10..20).map(|i| (1, 16 * i)));
        let store = FragmentStore::build(&windows, 16, 10);
        assert_eq!(store.n_fragments(), 2);
        assert!(store.fragment(0).iter().all(|&w| w < 10));
        assert!(store.fragment(1).iter().all(|&w| w >= 10));
    }

    #[test]
    #[should_panic(expected = "at least 2 windows")]
    fn one_window_fragments_are_rejected() {
        FragmentStore::build(&contiguous(10), 16, 1);
    }

    #[test]
    fn short_runs_yield_no_fragments() {
        let store = FragmentStore::build(&contiguous(9), 16, 10);
        assert_eq!(store.n_fragments(), 0);
    }

    #[test]
    fn too_few_fragments_is_an_error() {
        let store = FragmentStore::build(&contiguous(20), 16, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(store.draw(3, &mut rng), Err(SamplerError::TooFewFragments { have: 2 }));
    }

    #[test]
    fn draw_respects_fragment_roles() {
        let store = FragmentStore::build(&contiguous(80), 16, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let s = store.draw(3, &mut rng).unwrap();
            let inner = store.fragment_of(s.reference).unwrap();
            assert_eq!(inner, s.inner_fragment);
            assert!(inner >= 1 && inner <= store.n_fragments() - 2);
            assert_eq!(s.internal.len(), 3);
            for &w in &s.internal {
                assert_eq!(store.fragment_of(w), Some(inner));
            }
            assert!(store.fragment_of(s.external[0]).unwrap() < inner);
            assert!(store.fragment_of(s.external[1]).unwrap() > inner);
        }
    }

    #[test]
    fn inner_fragment_choice_is_uniform() {
        // 5 fragments leave {1,2,3} as interior choices.
        let store = FragmentStore::build(&contiguous(50), 16, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 30_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            let s = store.draw(1, &mut rng).unwrap();
            counts[store.fragment_of(s.reference).unwrap()] += 1;
        }
        assert_eq!(counts[0], 0);
        assert_eq!(counts[4], 0);
        for c in &counts[1..4] {
            let freq = *c as f64 / n as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.01, "freq {freq}");
        }
    }

    #[test]
    fn internal_draws_are_with_replacement() {
        // Eight picks from a two-window fragment are only possible with
        // replacement, and larger fragments show duplicates at the expected
        // rate.
        let store = FragmentStore::build(&contiguous(6), 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = store.draw(8, &mut rng).unwrap();
        assert_eq!(s.internal.len(), 8);
        assert!(s.internal.iter().all(|w| *w == 2 || *w == 3));

        let store = FragmentStore::build(&contiguous(30), 16, 10);
        let mut dup = 0;
        let trials = 4000;
        for _ in 0..trials {
            let s = store.draw(2, &mut rng).unwrap();
            if s.internal[0] == s.internal[1] {
                dup += 1;
            }
        }
        let freq = dup as f64 / trials as f64;
        assert!((freq - 0.1).abs() < 0.02, "duplicate freq {freq}");
    }

    #[test]
    fn draws_are_deterministic_per_seed() {
        let store = FragmentStore::build(&contiguous(60), 16, 10);
        let a = store.draw_batch(24, 3, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = store.draw_batch(24, 3, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let c = store.draw_batch(24, 3, &mut ChaCha8Rng::seed_from_u64(43)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
