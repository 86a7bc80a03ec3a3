use std::sync::Arc;

use super::{SparseMatrix, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Skeleton topology in the form the kinematics kernel needs: parent links,
/// rest joint positions, and a parent-before-child evaluation order.
#[derive(Clone, Debug, PartialEq)]
pub struct JointChain {
    parents: Vec<Option<usize>>,
    joints: Vec<[f64; 3]>,
    order: Vec<usize>,
}

impl JointChain {
    pub fn new(parents: Vec<Option<usize>>, joints: Vec<[f64; 3]>) -> Result<Self, TensorError> {
        let k = parents.len();
        if joints.len() != k {
            return Err(TensorError::Chain(format!(
                "{} parents but {} joints",
                k,
                joints.len()
            )));
        }
        if k == 0 {
            return Err(TensorError::Chain("no joints".into()));
        }
        let roots: Vec<usize> = (0..k).filter(|&i| parents[i].is_none()).collect();
        if roots != [0] {
            return Err(TensorError::Chain(format!(
                "expected joint 0 as the single root, found roots {:?}",
                roots
            )));
        }
        let mut children = vec![Vec::new(); k];
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= k {
                    return Err(TensorError::Chain(format!(
                        "joint {i} has parent {p} out of range"
                    )));
                }
                children[p].push(i);
            }
        }
        let mut order = Vec::with_capacity(k);
        let mut stack = vec![0usize];
        while let Some(j) = stack.pop() {
            order.push(j);
            for &c in children[j].iter().rev() {
                stack.push(c);
            }
        }
        if order.len() != k {
            return Err(TensorError::Chain(
                "parent links contain a cycle or a detached joint".into(),
            ));
        }
        Ok(Self {
            parents,
            joints,
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn joints(&self) -> &[[f64; 3]] {
        &self.joints
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

#[derive(Clone, Debug)]
pub(super) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    TranslateRows(Var),
    Matmul(Var, Var),
    Relu(Var),
    GatherRows(Var, Arc<[usize]>),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Sqrt(Var),
    NormRows(Var),
    CrossRows(Var, Var),
    DotRows(Var, Var),
    NormalizeRows(Var, f64),
    ClampMaxZero(Var),
    BatchedRodrigues(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    SparseMatmul(Arc<SparseMatrix>, Var),
    // Masked entries are exactly zero, so the backward needs no mask.
    SoftmaxRows(Var),
    KinematicChain(Var, Arc<JointChain>),
    Skin {
        positions: Var,
        transforms: Var,
        weights: Var,
    },
}

pub(super) struct Node {
    pub(super) value: Arc<Tensor>,
    pub(super) op: Op,
    pub(super) requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// A tape is confined to one thread; independent workers build independent
/// tapes over shared read-only leaves ([`Tape::shared_leaf`]).
#[derive(Default)]
pub struct Tape {
    pub(super) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, TensorError> {
        self.shared_leaf(Arc::new(value), requires_grad)
    }

    /// Leaf that borrows an existing parameter snapshot without copying it.
    pub fn shared_leaf(
        &mut self,
        value: Arc<Tensor>,
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        value.check_finite("leaf")?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(super) fn push(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        // Nothing downstream of a constant-only subgraph needs its op kept.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    pub(super) fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Arc::new(value), op, rg)
    }

    /// Reverse sweep from a scalar root. Each recorded entry is visited at
    /// most once, in reverse recording order.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        root_value.check_finite("backward root")?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads: Vec::new() });
        }
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    grads[id] = Some(g);
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        let mut out = Vec::with_capacity(grads.len());
        for (id, g) in grads.into_iter().enumerate() {
            let t = match g {
                Some(g) => {
                    let t = Tensor::new(self.nodes[id].value.shape().to_vec(), g)?;
                    t.check_finite("gradient")?;
                    Some(t)
                }
                None => None,
            };
            out.push(t);
        }
        Ok(Gradients { grads: out })
    }
}

/// Gradients of a scalar root with respect to the tape's trainable leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
