//! Test oracles shared by the integration tests.

#![allow(dead_code)]

use molang::nn::{Graph, ParamId, ParamStore, Tensor, Var};
use molang::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod grad_cases;

pub const FD_STEP: f64 = 1e-3;

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
    /// Coordinates whose ±h evaluations crossed a ReLU or L1 kink; the derivative
    /// does not exist there, so they are excluded from the comparison.
    pub kinks: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol && self.kinks * 100 <= self.checked
    }
}

/// Relative error with a floor tied to the tensor's gradient scale, so that
/// entries which are numerically zero do not dominate.
fn rel_err(a: f64, n: f64, scale: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale).max(1e-9)
}

/// Projects the output onto a fixed random direction `r` and differentiates
/// `<r, f(params)>` with respect to every trainable parameter, both through
/// the tape and by central differences of the forward pass alone.
pub fn check_gradients<F>(store: &ParamStore<f64>, seed: u64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::new(store, true);
    let y = f(&mut g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let r = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let grads = g.backward_from(&[(y, r.clone())])?;
    drop(g);

    let base_pattern = g_pattern(store, &f)?;
    let objective = |s: &ParamStore<f64>| -> Result<(f64, bool)> {
        let mut g = Graph::new(s, true);
        let y = f(&mut g)?;
        let v = g
            .value(y)
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok((v, g.kink_pattern() == base_pattern))
    };

    let mut work = store.clone();
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        kinks: 0,
    };
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let scale = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let (up, same_up) = objective(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let (down, same_down) = objective(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            if !(same_up && same_down) {
                report.kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(analytic.data()[i], numeric, scale.max(numeric.abs()));
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!(
                    "{}[{i}]: analytic {} numeric {}",
                    p.name,
                    analytic.data()[i],
                    numeric
                );
            }
        }
    }
    Ok(report)
}

fn g_pattern<F>(store: &ParamStore<f64>, f: &F) -> Result<Vec<bool>>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::new(store, true);
    f(&mut g)?;
    Ok(g.kink_pattern())
}

/// Redraws every parameter uniformly from `[-scale, scale]`. Initial weights
/// are tiny, which lets layer norm turn an `h = 1e-3` step into a large
/// relative perturbation; unit-scale weights keep the check meaningful.
pub fn randomize(store: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

pub fn param_id(store: &ParamStore<f64>, name: &str) -> ParamId {
    store
        .id(name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
}

/// Two-layer, width-16 motion encoder without dropout.
pub fn tiny_motion(use_gcb: bool, joint_dim: usize) -> molang::motion::MotionEncoderConfig {
    molang::motion::MotionEncoderConfig {
        layers: 2,
        heads: 2,
        model_dim: 16,
        ffn_dim: 24,
        dropout: 0.0,
        max_len: 12,
        gcb_after_layer: 1,
        gcb_joint_dim: joint_dim,
        use_gcb,
        projection_dim: 8,
    }
}

pub fn tiny_model() -> molang::model::ModelConfig {
    molang::model::ModelConfig {
        motion: tiny_motion(true, 2),
        text: molang::text::TextEncoderConfig {
            layers: 1,
            heads: 2,
            model_dim: 16,
            ffn_dim: 24,
            dropout: 0.0,
            max_tokens: 8,
            projection_dim: 8,
        },
        tau_init: molang::objectives::TAU_INIT,
    }
}

/// `frames` random frames of unit-scale values.
pub fn random_frames(frames: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..frames * molang::FRAME_DIM)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect()
}

/// Small labelled benchmark: the default classes with `per_class` clips of
/// 30 to `max_frames` frames.
pub fn small_benchmark(
    per_class: usize,
    max_frames: usize,
    seed: u64,
) -> molang::data::SynthDataset {
    let spec = molang::data::SynthSpec {
        clips_per_class: per_class,
        min_frames: 30,
        max_frames,
        ..molang::data::SynthSpec::default()
    };
    molang::data::synth_generate(&spec, seed).expect("synthetic benchmark")
}

/// Narrow two-layer model that still learns the synthetic classes in a few
/// epochs, for training-level tests.
pub fn small_model() -> molang::model::ModelConfig {
    molang::model::ModelConfig {
        motion: molang::motion::MotionEncoderConfig {
            layers: 2,
            heads: 2,
            model_dim: 32,
            ffn_dim: 64,
            dropout: 0.1,
            max_len: molang::MAX_FRAMES,
            gcb_after_layer: 1,
            gcb_joint_dim: 4,
            use_gcb: true,
            projection_dim: 32,
        },
        text: molang::text::TextEncoderConfig {
            layers: 1,
            heads: 2,
            model_dim: 32,
            ffn_dim: 64,
            dropout: 0.1,
            max_tokens: 16,
            projection_dim: 32,
        },
        tau_init: molang::objectives::TAU_INIT,
    }
}

/// Desk defaults for `stage` with the given epochs and batch size.
pub fn stage_config(
    stage: molang::train::Stage,
    epochs: u64,
    batch_size: usize,
) -> molang::train::StageConfig {
    molang::train::StageConfig {
        epochs,
        batch_size,
        ..molang::train::StageConfig::desk(stage)
    }
}

/// Train and test splits of [`small_benchmark`].
pub fn small_splits(
    per_class: usize,
    max_frames: usize,
    seed: u64,
) -> (molang::data::Dataset, molang::data::Dataset) {
    use molang::data::{Dataset, Split};
    let ds = small_benchmark(per_class, max_frames, seed);
    (
        Dataset::from_synth(&ds, Split::Train).unwrap(),
        Dataset::from_synth(&ds, Split::Test).unwrap(),
    )
}
