use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, FRAME_DIM};

/// Longest masked span in frames.
pub const MAX_SPAN: usize = 30;

/// A contiguous run of masked frames `[start, start + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpan {
    pub start: usize,
    pub len: usize,
}

impl MaskSpan {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, t: usize) -> bool {
        t >= self.start && t < self.end()
    }
}

/// `len ~ U{1..min(30, valid)}`, then `start ~ U{0..valid - len}`.
pub fn sample_mask_span<R: Rng + ?Sized>(valid: usize, rng: &mut R) -> Result<MaskSpan> {
    if valid == 0 {
        return Err(Error::InvalidArgument("cannot mask an empty clip".into()));
    }
    let len = rng.random_range(1..=MAX_SPAN.min(valid));
    let start = rng.random_range(0..=valid - len);
    Ok(MaskSpan { start, len })
}

/// Overwrites every scalar of the spanned frames with an independent
/// standard-normal draw. `frames` is a flat `T * FRAME_DIM` buffer.
pub fn apply_mask<R: Rng + ?Sized>(frames: &mut [f32], span: MaskSpan, rng: &mut R) -> Result<()> {
    let t = frames.len() / FRAME_DIM;
    if span.len == 0 || span.end() > t {
        return Err(Error::InvalidArgument(format!(
            "mask span [{}, {}) outside {t} frames",
            span.start,
            span.end()
        )));
    }
    for v in &mut frames[span.start * FRAME_DIM..span.end() * FRAME_DIM] {
        *v = StandardNormal.sample(rng);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_frame_is_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(
                sample_mask_span(1, &mut rng).unwrap(),
                MaskSpan { start: 0, len: 1 }
            );
        }
        assert!(sample_mask_span(0, &mut rng).is_err());
    }

    #[test]
    fn mask_touches_only_the_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let orig: Vec<f32> = (0..10 * FRAME_DIM).map(|i| i as f32).collect();
        let mut f = orig.clone();
        let span = MaskSpan { start: 3, len: 4 };
        apply_mask(&mut f, span, &mut rng).unwrap();
        let changed = f.iter().zip(&orig).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 4 * FRAME_DIM);
        assert_eq!(&f[..3 * FRAME_DIM], &orig[..3 * FRAME_DIM]);
        assert_eq!(&f[7 * FRAME_DIM..], &orig[7 * FRAME_DIM..]);
        assert!(apply_mask(&mut f, MaskSpan { start: 8, len: 3 }, &mut rng).is_err());
    }
}
