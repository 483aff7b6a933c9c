//! The packed attention layout (valid tokens only) and the padded layout with
//! key masks compute the same encoder outputs.

mod common;

use common::{random_frames, tiny_motion};
use molang::data::collate;
use molang::geom::SkeletonGraph;
use molang::motion::MotionEncoder;
use molang::nn::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn outputs(
    enc: &MotionEncoder,
    store: &ParamStore<f64>,
    frames: &[Vec<f32>],
    padded: bool,
) -> [Tensor<f64>; 3] {
    let refs: Vec<&[f32]> = frames.iter().map(Vec::as_slice).collect();
    let batch = collate(&refs, 12).unwrap();
    let mut g = Graph::new(store, false);
    let out = enc
        .forward(&mut g, &batch, padded, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    [
        g.value(out.cls).clone(),
        g.value(out.projected).clone(),
        g.value(out.reconstruction).clone(),
    ]
}

#[test]
fn packed_and_padded_layouts_agree() {
    for use_gcb in [false, true] {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let enc = MotionEncoder::new(
            &mut store,
            &tiny_motion(use_gcb, 4),
            &SkeletonGraph::smpl22(),
            &mut rng,
        )
        .unwrap();
        let frames: Vec<Vec<f32>> = [3, 12, 1, 9]
            .iter()
            .map(|&t| random_frames(t, &mut rng))
            .collect();
        let packed = outputs(&enc, &store, &frames, false);
        let padded = outputs(&enc, &store, &frames, true);
        for (a, b) in packed.iter().zip(&padded) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12, "gcb {use_gcb}: {x} vs {y}");
            }
        }
    }
}
