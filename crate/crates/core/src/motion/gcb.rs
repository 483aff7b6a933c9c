use std::rc::Rc;

use rand::Rng;

use crate::geom::Adjacency;
use crate::nn::init::{truncated_normal, INIT_STD};
use crate::nn::layers::{LayerNorm, Linear};
use crate::nn::{Graph, JointMixing, ParamId, ParamStore, Real, Var};
use crate::Result;

/// Graph convolutional bottleneck over per-frame joint features.
///
/// For a frame token `x`: `h = P_in x` split into 22 joint vectors of width
/// `g`; `y_i = relu(Σ_k a_ik h_k W)`; `out = LN(x + P_out y)`.
#[derive(Debug, Clone)]
pub struct Gcb {
    pub proj_in: Linear,
    pub weight: ParamId,
    pub proj_out: Linear,
    pub norm: LayerNorm,
    pub joints: usize,
    pub joint_dim: usize,
    adjacency: Vec<f64>,
}

impl Gcb {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        joint_dim: usize,
        adjacency: &Adjacency,
        rng: &mut R,
    ) -> Result<Self> {
        let joints = adjacency.len();
        let width = joints * joint_dim;
        Ok(Gcb {
            proj_in: Linear::new(store, &format!("{name}.proj_in"), dim, width, rng)?,
            weight: store.add(
                format!("{name}.weight"),
                truncated_normal(&[joint_dim, joint_dim], INIT_STD, rng),
            )?,
            proj_out: Linear::new(store, &format!("{name}.proj_out"), width, dim, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            joints,
            joint_dim,
            adjacency: (0..joints)
                .flat_map(|i| (0..joints).map(move |k| (i, k)))
                .map(|(i, k)| adjacency.get(i, k) as f64)
                .collect(),
        })
    }

    pub fn num_params(dim: usize, joints: usize, joint_dim: usize) -> usize {
        let w = joints * joint_dim;
        Linear::num_params(dim, w) + joint_dim * joint_dim + Linear::num_params(w, dim) + 2 * dim
    }

    fn mixing<T: Real>(&self) -> Result<Rc<JointMixing<T>>> {
        let a: Vec<T> = self.adjacency.iter().map(|&v| T::lit(v)).collect();
        Ok(Rc::new(JointMixing::from_dense(self.joints, &a)?))
    }

    /// The graph branch alone: `[n, 22 g]` joint features in, `[n, 22 g]` out.
    pub fn graph_branch<T: Real>(&self, g: &mut Graph<'_, T>, h: Var) -> Result<Var> {
        let n = g.shape(h)[0];
        let mixed = g.joint_mix(h, &self.mixing()?)?;
        let per_joint = g.reshape(mixed, &[n * self.joints, self.joint_dim])?;
        let w = g.param(self.weight);
        let y = g.linear(per_joint, w, None)?;
        let y = g.reshape(y, &[n, self.joints * self.joint_dim])?;
        Ok(g.relu(y))
    }

    /// Applies the bottleneck to frame-token rows `x: [n, d]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.proj_in.forward(g, x)?;
        let y = self.graph_branch(g, h)?;
        let y = self.proj_out.forward(g, y)?;
        let r = g.add(x, y)?;
        self.norm.forward(g, r)
    }
}
