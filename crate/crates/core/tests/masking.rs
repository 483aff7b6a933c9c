//! Span sampling bounds and the noise written into masked frames.

use molang::data::{apply_mask, collate, sample_mask_span, MaskSpan};
use molang::FRAME_DIM;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn spans_respect_every_valid_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for valid in 1..=150 {
        let mut longest = 0;
        for _ in 0..100_000 {
            let s = sample_mask_span(valid, &mut rng).unwrap();
            assert!(s.len >= 1 && s.len <= 30.min(valid));
            assert!(s.end() <= valid);
            longest = longest.max(s.len);
        }
        assert_eq!(longest, 30.min(valid), "length range at {valid}");
    }
    assert_eq!(
        sample_mask_span(1, &mut rng).unwrap(),
        MaskSpan { start: 0, len: 1 }
    );
    assert!(sample_mask_span(0, &mut rng).is_err());
}

#[test]
fn masked_region_is_standard_normal_and_nothing_else_moves() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frames: Vec<f32> = (0..40 * FRAME_DIM)
        .map(|i| (i as f32 * 0.01).sin())
        .collect();
    let mut values = Vec::new();
    for _ in 0..200 {
        let span = sample_mask_span(40, &mut rng).unwrap();
        let mut out = frames.clone();
        apply_mask(&mut out, span, &mut rng).unwrap();
        let changed = out
            .iter()
            .zip(&frames)
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();
        assert_eq!(changed, span.len * FRAME_DIM);
        for t in 0..40 {
            let a = &out[t * FRAME_DIM..(t + 1) * FRAME_DIM];
            let b = &frames[t * FRAME_DIM..(t + 1) * FRAME_DIM];
            if !span.contains(t) {
                assert_eq!(a, b);
            }
        }
        values.extend(
            out[span.start * FRAME_DIM..span.end() * FRAME_DIM]
                .iter()
                .map(|&v| v as f64),
        );
        if values.len() > 10_000 {
            break;
        }
    }
    assert!(values.len() >= 10_000);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.05, "mean {mean}");
    assert!((var - 1.0).abs() < 0.1, "variance {var}");
}

#[test]
fn out_of_range_spans_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut frames = vec![0.0f32; 5 * FRAME_DIM];
    assert!(apply_mask(&mut frames, MaskSpan { start: 3, len: 3 }, &mut rng).is_err());
    assert!(apply_mask(&mut frames, MaskSpan { start: 0, len: 0 }, &mut rng).is_err());
    assert!(frames.iter().all(|&v| v == 0.0));
}

#[test]
fn batch_masking_stays_inside_each_item_and_padding_stays_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clips: Vec<Vec<f32>> = [10usize, 150, 75]
        .iter()
        .map(|&t| vec![0.5f32; t * FRAME_DIM])
        .collect();
    let refs: Vec<&[f32]> = clips.iter().map(Vec::as_slice).collect();
    let mut batch = collate(&refs, 150).unwrap();
    for _ in 0..50 {
        batch.apply_masking(&mut rng).unwrap();
        for (b, &len) in batch.lengths().iter().enumerate() {
            let span = batch.spans()[b].unwrap();
            assert!(span.end() <= len);
            let base = b * 150 * FRAME_DIM;
            assert!(
                batch.motion()[base + len * FRAME_DIM..base + 150 * FRAME_DIM]
                    .iter()
                    .all(|&v| v == 0.0)
            );
        }
    }
    batch.clear_masking();
    assert_eq!(batch.motion(), batch.target());
}
