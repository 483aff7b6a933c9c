use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::rotation::{six_d_to_matrix, Pose};
use crate::{Error, Result, NUM_JOINTS};

/// 22-joint SMPL subset: `(name, parent, rest offset in metres)`; y up, +x to the body's left.
const SMPL_JOINTS: [(&str, i64, [f64; 3]); NUM_JOINTS] = [
    ("pelvis", -1, [0.0, 0.0, 0.0]),
    ("left_hip", 0, [0.06, -0.09, 0.0]),
    ("right_hip", 0, [-0.06, -0.09, 0.0]),
    ("spine1", 0, [0.0, 0.11, -0.01]),
    ("left_knee", 1, [0.0, -0.40, 0.0]),
    ("right_knee", 2, [0.0, -0.40, 0.0]),
    ("spine2", 3, [0.0, 0.13, 0.0]),
    ("left_ankle", 4, [0.0, -0.42, -0.02]),
    ("right_ankle", 5, [0.0, -0.42, -0.02]),
    ("spine3", 6, [0.0, 0.05, 0.02]),
    ("left_foot", 7, [0.0, -0.05, 0.12]),
    ("right_foot", 8, [0.0, -0.05, 0.12]),
    ("neck", 9, [0.0, 0.21, -0.03]),
    ("left_collar", 9, [0.07, 0.11, -0.01]),
    ("right_collar", 9, [-0.07, 0.11, -0.01]),
    ("head", 12, [0.0, 0.09, 0.05]),
    ("left_shoulder", 13, [0.12, 0.04, -0.01]),
    ("right_shoulder", 14, [-0.12, 0.04, -0.01]),
    ("left_elbow", 16, [0.26, 0.0, -0.02]),
    ("right_elbow", 17, [-0.26, 0.0, -0.02]),
    ("left_wrist", 18, [0.25, 0.0, 0.0]),
    ("right_wrist", 19, [-0.25, 0.0, 0.0]),
];

/// Symmetric 0/1 joint adjacency with self-loops, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    entries: Vec<u8>,
}

impl Adjacency {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, k: usize) -> u8 {
        self.entries[i * self.n + k]
    }

    pub fn nonzeros(&self) -> usize {
        self.entries.iter().filter(|&&a| a != 0).count()
    }

    /// Joints `k` with `a_ik != 0`, ascending (includes `i`).
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&k| self.get(i, k) != 0).collect()
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.entries.chunks(self.n).map(|r| r.to_vec()).collect()
    }

    /// Applies a joint permutation: result `a'[p(i)][p(k)] = a[i][k]`.
    pub fn permuted(&self, perm: &[usize]) -> Adjacency {
        let mut entries = vec![0u8; self.n * self.n];
        for i in 0..self.n {
            for k in 0..self.n {
                entries[perm[i] * self.n + perm[k]] = self.get(i, k);
            }
        }
        Adjacency { n: self.n, entries }
    }
}

fn validate_parents(parents: &[i64]) -> Result<()> {
    let n = parents.len();
    if n == 0 {
        return Err(Error::InvalidSkeleton("empty parent array".into()));
    }
    let roots: Vec<usize> = (0..n).filter(|&j| parents[j] < 0).collect();
    if roots.len() != 1 {
        return Err(Error::InvalidSkeleton(format!(
            "expected exactly one root, found {}",
            roots.len()
        )));
    }
    for (j, &p) in parents.iter().enumerate() {
        if p >= n as i64 || p == j as i64 {
            return Err(Error::InvalidSkeleton(format!(
                "joint {j} has invalid parent {p}"
            )));
        }
    }
    for start in 0..n {
        let mut j = start;
        let mut steps = 0;
        while parents[j] >= 0 {
            j = parents[j] as usize;
            steps += 1;
            if steps > n {
                return Err(Error::InvalidSkeleton(format!(
                    "cycle through joint {start}"
                )));
            }
        }
    }
    Ok(())
}

/// Adjacency of a kinematic tree given by parent indices (`-1` marks the root).
pub fn build_adjacency(parents: &[i64]) -> Result<Adjacency> {
    validate_parents(parents)?;
    let n = parents.len();
    let mut entries = vec![0u8; n * n];
    for (j, &p) in parents.iter().enumerate() {
        entries[j * n + j] = 1;
        if p >= 0 {
            let p = p as usize;
            entries[j * n + p] = 1;
            entries[p * n + j] = 1;
        }
    }
    Ok(Adjacency { n, entries })
}

/// One joint entry of the skeleton JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub id: usize,
    pub name: String,
    pub parent: i64,
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SkeletonDoc {
    joints: Vec<JointSpec>,
}

/// Kinematic tree: parents, rest offsets and the derived adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    joints: Vec<JointSpec>,
    adjacency: Adjacency,
}

impl SkeletonGraph {
    pub fn new(mut joints: Vec<JointSpec>) -> Result<Self> {
        joints.sort_by_key(|j| j.id);
        if joints.iter().enumerate().any(|(i, j)| j.id != i) {
            return Err(Error::InvalidSkeleton("joint ids must be 0..n".into()));
        }
        if joints
            .iter()
            .any(|j| j.offset.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidSkeleton("non-finite rest offset".into()));
        }
        let parents: Vec<i64> = joints.iter().map(|j| j.parent).collect();
        let adjacency = build_adjacency(&parents)?;
        if parents[0] >= 0 {
            return Err(Error::InvalidSkeleton("joint 0 must be the root".into()));
        }
        for (j, &p) in parents.iter().enumerate().skip(1) {
            if p as usize >= j {
                return Err(Error::InvalidSkeleton(format!(
                    "joint {j} must come after its parent {p}"
                )));
            }
        }
        Ok(SkeletonGraph { joints, adjacency })
    }

    /// The standard 22-joint SMPL body subset.
    pub fn smpl22() -> Self {
        let joints = SMPL_JOINTS
            .iter()
            .enumerate()
            .map(|(id, (name, parent, offset))| JointSpec {
                id,
                name: (*name).to_string(),
                parent: *parent,
                offset: *offset,
            })
            .collect();
        SkeletonGraph::new(joints).expect("built-in skeleton is valid")
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        let p = self.joints[j].parent;
        (p >= 0).then_some(p as usize)
    }

    pub fn parents(&self) -> Vec<i64> {
        self.joints.iter().map(|j| j.parent).collect()
    }

    pub fn offset(&self, j: usize) -> [f64; 3] {
        self.joints[j].offset
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SkeletonDoc {
            joints: self.joints.clone(),
        })
        .expect("skeleton serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SkeletonDoc =
            serde_json::from_str(text).map_err(|e| Error::json("skeleton", &e))?;
        SkeletonGraph::new(doc.joints)
    }
}

/// Joint positions in metres with the root at the origin.
pub fn forward_kinematics(pose: &Pose, skel: &SkeletonGraph) -> Result<Vec<[f64; 3]>> {
    let n = skel.num_joints();
    if n != pose.0.len() {
        return Err(Error::shape("forward_kinematics", &[pose.0.len()], &[n]));
    }
    let mut global: Vec<Matrix3<f64>> = Vec::with_capacity(n);
    let mut positions: Vec<Vector3<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let local = six_d_to_matrix(&pose.0[j])?;
        match skel.parent(j) {
            None => {
                global.push(local);
                positions.push(Vector3::zeros());
            }
            Some(p) => {
                let offset = Vector3::from(skel.offset(j));
                positions.push(positions[p] + global[p] * offset);
                global.push(global[p] * local);
            }
        }
    }
    Ok(positions.into_iter().map(|v| [v.x, v.y, v.z]).collect())
}
