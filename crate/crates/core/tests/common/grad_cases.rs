//! Gradient-check cases, one function per op family, layer or model piece.
//! Each returns labelled reports so the per-case tests and the acceptance
//! run share one definition.

use std::rc::Rc;

use molang::data::{collate, Batch};
use molang::geom::SkeletonGraph;
use molang::model::Model;
use molang::motion::{Gcb, MotionEncoder};
use molang::nn::layers::{
    Embedding, FeedForward, LayerNorm, Linear, MultiHeadSelfAttention, TransformerBlock,
};
use molang::nn::{AttnLayout, JointMixing, ParamStore, Tensor};
use molang::objectives::{cstar_loss, mmp_loss};
use molang::text::Vocab;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    check_gradients, param_id, random_frames, random_tensor, randomize, tiny_model, tiny_motion,
    GradReport,
};

pub const TOL: f64 = 1e-3;

pub type Case = (&'static str, fn() -> Vec<(String, GradReport)>);

pub const ALL: &[Case] = &[
    ("linear op", linear_op),
    ("layer norm op", layer_norm_op),
    ("gelu and softmax", gelu_softmax),
    ("relu", relu),
    ("attention", attention),
    ("gather, concat, joint mix", gather_concat_mix),
    ("contrastive chain", contrastive_chain),
    ("weighted l1, reshape, scale", weighted_l1),
    ("layers", layers),
    ("transformer block", transformer_block),
    ("gcb", gcb),
    ("motion encoder", motion_encoder),
    ("text encoder", text_encoder),
    ("mmp loss", mmp),
    ("cstar loss", cstar),
];

fn one(label: &str, r: GradReport) -> Vec<(String, GradReport)> {
    vec![(label.to_string(), r)]
}

fn store(entries: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (name, shape) in entries {
        s.add(*name, random_tensor(shape, 1.0, &mut rng)).unwrap();
    }
    s
}

pub fn linear_op() -> Vec<(String, GradReport)> {
    let s = store(&[("x", &[3, 4]), ("w", &[4, 5]), ("b", &[5])], 1);
    let r = check_gradients(&s, 7, |g| {
        let (x, w, b) = (
            g.param(param_id(&s, "x")),
            g.param(param_id(&s, "w")),
            g.param(param_id(&s, "b")),
        );
        g.linear(x, w, Some(b))
    })
    .unwrap();
    one("linear", r)
}

pub fn layer_norm_op() -> Vec<(String, GradReport)> {
    let s = store(&[("x", &[4, 6]), ("g", &[6]), ("b", &[6])], 2);
    let r = check_gradients(&s, 8, |g| {
        let (x, gm, b) = (
            g.param(param_id(&s, "x")),
            g.param(param_id(&s, "g")),
            g.param(param_id(&s, "b")),
        );
        g.layer_norm(x, gm, b)
    })
    .unwrap();
    one("layer norm", r)
}

pub fn gelu_softmax() -> Vec<(String, GradReport)> {
    let s = store(&[("x", &[2, 3, 4])], 3);
    (0..3)
        .map(|axis| {
            let r = check_gradients(&s, 9, |g| {
                let x = g.param(param_id(&s, "x"));
                let h = g.gelu(x);
                g.softmax(h, axis)
            })
            .unwrap();
            (format!("gelu+softmax axis {axis}"), r)
        })
        .collect()
}

pub fn relu() -> Vec<(String, GradReport)> {
    let s = store(&[("x", &[5, 5])], 4);
    let r = check_gradients(&s, 10, |g| {
        let x = g.param(param_id(&s, "x"));
        Ok(g.relu(x))
    })
    .unwrap();
    one("relu", r)
}

pub fn attention() -> Vec<(String, GradReport)> {
    let s = store(&[("qkv", &[7, 12])], 5);
    let packed = Rc::new(AttnLayout::packed(&[3, 1, 3]));
    let a = check_gradients(&s, 11, |g| {
        let x = g.param(param_id(&s, "qkv"));
        g.attention(x, &packed, 2)
    })
    .unwrap();
    let s = store(&[("qkv", &[8, 18])], 6);
    let padded = Rc::new(
        AttnLayout::padded(
            2,
            4,
            vec![true, true, false, false, true, true, true, false],
        )
        .unwrap(),
    );
    let b = check_gradients(&s, 12, |g| {
        let x = g.param(param_id(&s, "qkv"));
        g.attention(x, &padded, 3)
    })
    .unwrap();
    vec![
        ("attention packed".into(), a),
        ("attention padded".into(), b),
    ]
}

pub fn gather_concat_mix() -> Vec<(String, GradReport)> {
    let s = store(&[("t", &[5, 6]), ("c", &[2, 6])], 7);
    let mix = Rc::new(
        JointMixing::from_dense(3, &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0]).unwrap(),
    );
    let r = check_gradients(&s, 13, |g| {
        let (t, c) = (g.param(param_id(&s, "t")), g.param(param_id(&s, "c")));
        let rows = g.gather_rows(t, Rc::new(vec![4, 0, 4, 2]))?;
        let cat = g.concat_rows(c, rows)?;
        g.joint_mix(cat, &mix)
    })
    .unwrap();
    one("gather/concat/joint mix", r)
}

pub fn contrastive_chain() -> Vec<(String, GradReport)> {
    let s = store(&[("a", &[4, 5]), ("b", &[4, 5]), ("s", &[1])], 8);
    let r = check_gradients(&s, 14, |g| {
        let (a, b, sc) = (
            g.param(param_id(&s, "a")),
            g.param(param_id(&s, "b")),
            g.param(param_id(&s, "s")),
        );
        let a = g.l2_normalize(a)?;
        let b = g.l2_normalize(b)?;
        let logits = g.matmul_nt(a, b)?;
        let logits = g.scale_exp(logits, sc)?;
        let l1 = g.diag_cross_entropy(logits, false)?;
        let l2 = g.diag_cross_entropy(logits, true)?;
        g.weighted_sum(&[(l1, 0.5), (l2, 0.5)])
    })
    .unwrap();
    one("normalize/similarity/cross entropy", r)
}

pub fn weighted_l1() -> Vec<(String, GradReport)> {
    let s = store(&[("x", &[3, 4])], 9);
    let target = Tensor::from_fn(&[2, 6], |i| (i as f64 * 0.37).sin() * 2.0);
    let r = check_gradients(&s, 15, |g| {
        let x = g.param(param_id(&s, "x"));
        let x = g.scale(x, 1.5);
        let x = g.reshape(x, &[2, 6])?;
        g.weighted_l1(x, &target, vec![0.25, 2.0])
    })
    .unwrap();
    one("weighted l1", r)
}

pub fn layers() -> Vec<(String, GradReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut s = ParamStore::<f64>::new();
    let emb = Embedding::new(&mut s, "emb", 6, 8, &mut rng).unwrap();
    let lin = Linear::new(&mut s, "lin", 8, 8, &mut rng).unwrap();
    let ln = LayerNorm::new(&mut s, "ln", 8).unwrap();
    let attn = MultiHeadSelfAttention::new(&mut s, "attn", 8, 2, &mut rng).unwrap();
    let ffn = FeedForward::new(&mut s, "ffn", 8, 12, &mut rng).unwrap();
    randomize(&mut s, 0.5, 31);
    let layout = Rc::new(AttnLayout::packed(&[2, 3]));
    let r = check_gradients(&s, 32, |g| {
        let x = emb.forward(g, Rc::new(vec![0, 5, 3, 3, 1]))?;
        let x = lin.forward(g, x)?;
        let x = ln.forward(g, x)?;
        let x = attn.forward(g, x, &layout)?;
        ffn.forward(g, x)
    })
    .unwrap();
    one("embedding/linear/layer norm/attention/feed-forward", r)
}

pub fn transformer_block() -> Vec<(String, GradReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut s = ParamStore::<f64>::new();
    let x = s.add("x", random_tensor(&[5, 8], 1.0, &mut rng)).unwrap();
    let block = TransformerBlock::new(&mut s, "blk", 8, 2, 12, 0.2, &mut rng).unwrap();
    randomize(&mut s, 0.5, 34);
    let layout = Rc::new(AttnLayout::packed(&[4, 1]));
    let r = check_gradients(&s, 35, |g| {
        let xv = g.param(x);
        block.forward(g, xv, &layout, &mut ChaCha8Rng::seed_from_u64(36))
    })
    .unwrap();
    one("transformer block with dropout", r)
}

pub fn gcb() -> Vec<(String, GradReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::<f64>::new();
    let x = store
        .add("x", random_tensor(&[3, 16], 1.0, &mut rng))
        .unwrap();
    let gcb = Gcb::new(
        &mut store,
        "gcb",
        16,
        2,
        SkeletonGraph::smpl22().adjacency(),
        &mut rng,
    )
    .unwrap();
    randomize(&mut store, 0.5, 22);
    let r = check_gradients(&store, 3, |g| {
        let xv = g.param(x);
        gcb.forward(g, xv)
    })
    .unwrap();
    one("gcb", r)
}

fn batch(lengths: &[usize], max: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clips: Vec<Vec<f32>> = lengths
        .iter()
        .map(|&t| random_frames(t, &mut rng))
        .collect();
    let refs: Vec<&[f32]> = clips.iter().map(Vec::as_slice).collect();
    collate(&refs, max).unwrap()
}

fn motion_model(use_gcb: bool, seed: u64) -> (ParamStore<f64>, MotionEncoder) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let enc = MotionEncoder::new(
        &mut store,
        &tiny_motion(use_gcb, 2),
        &SkeletonGraph::smpl22(),
        &mut rng,
    )
    .unwrap();
    randomize(&mut store, 0.3, seed + 100);
    (store, enc)
}

pub fn motion_encoder() -> Vec<(String, GradReport)> {
    let b = batch(&[3, 5, 1], 6, 4);
    let mut out = Vec::new();
    for (use_gcb, padded) in [(true, false), (true, true), (false, false)] {
        let (store, enc) = motion_model(use_gcb, 5);
        let r = check_gradients(&store, 6, |g| {
            Ok(enc
                .forward(g, &b, padded, &mut ChaCha8Rng::seed_from_u64(0))?
                .projected)
        })
        .unwrap();
        out.push((
            format!("motion projection gcb={use_gcb} padded={padded}"),
            r,
        ));
        let r = check_gradients(&store, 7, |g| {
            Ok(enc
                .forward(g, &b, padded, &mut ChaCha8Rng::seed_from_u64(0))?
                .reconstruction)
        })
        .unwrap();
        out.push((
            format!("motion reconstruction gcb={use_gcb} padded={padded}"),
            r,
        ));
    }
    out
}

fn paired_model(seed: u64) -> Model<f64> {
    let vocab = Vocab::build(&["a person waves", "someone kicks the ball", "bow down"], 1).unwrap();
    let mut m = Model::<f64>::with_text(&tiny_model(), vocab, seed).unwrap();
    randomize(&mut m.store, 0.3, seed + 100);
    let t = m.text_tower().unwrap().logit_scale;
    m.store.get_mut(t).value.data_mut()[0] = (1.0f64 / 0.2).ln();
    m
}

pub fn text_encoder() -> Vec<(String, GradReport)> {
    let m = paired_model(8);
    let tower = m.text_tower().unwrap();
    let ids = m
        .tokenize(&["a person waves", "bow", "kicks the ball down"])
        .unwrap();
    [false, true]
        .into_iter()
        .map(|padded| {
            let r = check_gradients(&m.store, 9, |g| {
                Ok(tower
                    .encoder
                    .forward(g, &ids, padded, &mut ChaCha8Rng::seed_from_u64(0))?
                    .projected)
            })
            .unwrap();
            (format!("text padded={padded}"), r)
        })
        .collect()
}

pub fn mmp() -> Vec<(String, GradReport)> {
    let (store, enc) = motion_model(true, 10);
    let mut b = batch(&[6, 4, 2], 6, 11);
    b.apply_masking(&mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    [false, true]
        .into_iter()
        .map(|all_valid| {
            let r = check_gradients(&store, 13, |g| {
                let out = enc.forward(g, &b, false, &mut ChaCha8Rng::seed_from_u64(0))?;
                mmp_loss(g, out.reconstruction, &b, all_valid)
            })
            .unwrap();
            (format!("mmp all_valid={all_valid}"), r)
        })
        .collect()
}

pub fn cstar() -> Vec<(String, GradReport)> {
    let m = paired_model(14);
    let tower = m.text_tower().unwrap();
    let b = batch(&[4, 6, 3], 6, 15);
    let ids = m
        .tokenize(&["a person waves", "someone kicks", "bow down"])
        .unwrap();
    [0.0, 10.0]
        .into_iter()
        .map(|alpha| {
            let r = check_gradients(&m.store, 16, |g| {
                let out = m
                    .motion
                    .forward(g, &b, false, &mut ChaCha8Rng::seed_from_u64(0))?;
                let text =
                    tower
                        .encoder
                        .forward(g, &ids, false, &mut ChaCha8Rng::seed_from_u64(0))?;
                let scale = g.param(tower.logit_scale);
                let recon = (alpha > 0.0).then_some((out.reconstruction, &b));
                Ok(cstar_loss(g, out.projected, text.projected, scale, recon, alpha)?.total)
            })
            .unwrap();
            (format!("cstar alpha={alpha} (with temperature)"), r)
        })
        .collect()
}
