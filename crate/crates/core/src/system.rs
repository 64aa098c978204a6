//! A set of independently actuated branches sharing one stacked joint vector.

use std::path::Path;

use crate::chain::{ChainError, ChainFrames, CompositeChain, Kinematics};
use crate::pose::DualQuaternion;

#[derive(Debug, Clone, PartialEq)]
pub struct RobotSystem {
    branches: Vec<CompositeChain>,
    offsets: Vec<usize>,
}

impl RobotSystem {
    pub fn new(branches: Vec<CompositeChain>) -> Self {
        let mut offsets = Vec::with_capacity(branches.len());
        let mut acc = 0;
        for b in &branches {
            offsets.push(acc);
            acc += b.dof();
        }
        RobotSystem { branches, offsets }
    }

    /// Loads each `(chain file, mount pose)` pair as one branch.
    pub fn from_files<P: AsRef<Path>>(files: &[(P, DualQuaternion)]) -> Result<Self, ChainError> {
        let branches = files
            .iter()
            .map(|(p, mount)| CompositeChain::from_file(p.as_ref()).map(|c| c.mounted(*mount)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(branches))
    }

    pub fn branches(&self) -> &[CompositeChain] {
        &self.branches
    }

    pub fn branch(&self, i: usize) -> Option<&CompositeChain> {
        self.branches.get(i)
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn dofs(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.dof()).collect()
    }

    pub fn total_dof(&self) -> usize {
        self.branches.iter().map(|b| b.dof()).sum()
    }

    /// First stacked index of branch `i`.
    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn check_dim(&self, q: &[f64]) -> Result<(), ChainError> {
        let n = self.total_dof();
        if q.len() != n {
            return Err(ChainError::DimensionMismatch { expected: n, got: q.len() });
        }
        Ok(())
    }

    /// Joint values of branch `i` inside the stacked vector.
    pub fn slice<'a>(&self, q: &'a [f64], i: usize) -> &'a [f64] {
        let start = self.offsets[i];
        &q[start..start + self.branches[i].dof()]
    }

    pub fn frames(&self, q: &[f64]) -> Result<Vec<ChainFrames>, ChainError> {
        self.check_dim(q)?;
        self.branches
            .iter()
            .enumerate()
            .map(|(i, b)| b.frames(self.slice(q, i)))
            .collect()
    }

    pub fn tool_poses(&self, q: &[f64]) -> Result<Vec<DualQuaternion>, ChainError> {
        Ok(self.frames(q)?.into_iter().map(|f| f.end).collect())
    }

    pub fn clamp_joints(&self, q: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(q.len());
        for (i, b) in self.branches.iter().enumerate() {
            out.extend(b.clamp_joints(self.slice(q, i)));
        }
        out
    }
}
