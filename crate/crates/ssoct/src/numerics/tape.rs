//! Reverse-mode differentiation over a linear tape.
//!
//! Forward calls append nodes in topological order; `backward` walks the
//! nodes in exact reverse creation order, so every node's gradient is
//! complete before its inputs receive contributions.

use crate::error::{Error, Result};

use super::kernels as k;
use super::kernels::MapGeometry;
use super::param::ParamSet;
use super::tensor::Tensor;

/// Handle to a node on a `Tape`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum OpKind {
    Const,
    Param(usize),
    Conv2d { pad: usize },
    DepthwiseConv2d { pad: usize },
    Dense,
    Relu,
    Sigmoid,
    GlobalAvgPool,
    Add,
    AddChannels,
    Mul,
    MulChannels,
    Sum,
    L1Loss,
    Reshape,
    Crop2d,
    MapFeatures(Box<MapGeometry>),
}

#[derive(Debug)]
struct Node {
    op: OpKind,
    inputs: Vec<usize>,
    value: Tensor,
    grad: Option<Tensor>,
}

/// Records a forward computation and differentiates it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// The accumulated gradient of the last `backward` call, if `v` was on
    /// the path to the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, op: OpKind, inputs: Vec<usize>, value: Tensor) -> Var {
        self.nodes.push(Node { op, inputs, value, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a tensor that does not require gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(OpKind::Const, vec![], value)
    }

    /// Inserts a leaf bound to parameter block `idx`; `backward` adds the
    /// leaf gradient into that block.
    pub fn param(&mut self, params: &ParamSet, idx: usize) -> Var {
        self.push(OpKind::Param(idx), vec![], params.block(idx).value.clone())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let value = k::conv2d_forward(self.value(x), self.value(w), self.value(b), pad)?;
        Ok(self.push(OpKind::Conv2d { pad }, vec![x.0, w.0, b.0], value))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let value = k::depthwise_conv2d_forward(self.value(x), self.value(w), pad)?;
        Ok(self.push(OpKind::DepthwiseConv2d { pad }, vec![x.0, w.0], value))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = k::dense_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(OpKind::Dense, vec![x.0, w.0, b.0], value))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = k::relu_forward(self.value(x));
        self.push(OpKind::Relu, vec![x.0], value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = k::sigmoid_forward(self.value(x));
        self.push(OpKind::Sigmoid, vec![x.0], value)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = k::global_avg_pool_forward(self.value(x))?;
        Ok(self.push(OpKind::GlobalAvgPool, vec![x.0], value))
    }

    /// Element-wise addition. Accepts equal shapes, or a rank-4 tensor plus
    /// its `[B, C]` channel companion (broadcast over the spatial axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() == self.value(b).shape() {
            let data = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect();
            let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
            return Ok(self.push(OpKind::Add, vec![a.0, b.0], value));
        }
        let (big, small) = self.order_broadcast("elementwise_add", a, b)?;
        let value = k::add_channels_forward(self.value(big), self.value(small))?;
        Ok(self.push(OpKind::AddChannels, vec![big.0, small.0], value))
    }

    /// Element-wise multiplication with the same broadcast rules as `add`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() == self.value(b).shape() {
            let data = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect();
            let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
            return Ok(self.push(OpKind::Mul, vec![a.0, b.0], value));
        }
        let (big, small) = self.order_broadcast("elementwise_mul", a, b)?;
        let value = k::mul_channels_forward(self.value(big), self.value(small))?;
        Ok(self.push(OpKind::MulChannels, vec![big.0, small.0], value))
    }

    fn order_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        match (self.value(a).rank(), self.value(b).rank()) {
            (4, 2) => Ok((a, b)),
            (2, 4) => Ok((b, a)),
            _ => Err(Error::shape(
                op,
                format!(
                    "incompatible shapes {:?} and {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            )),
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = k::sum_forward(self.value(x));
        self.push(OpKind::Sum, vec![x.0], value)
    }

    /// Mean absolute difference; rejects mismatched shapes.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = k::l1_forward(self.value(a), self.value(b))?;
        Ok(self.push(OpKind::L1Loss, vec![a.0, b.0], value))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(OpKind::Reshape, vec![x.0], value))
    }

    /// Keeps the top-left `out_h x out_w` window of each spatial plane.
    pub fn crop2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = k::crop2d_forward(self.value(x), out_h, out_w)?;
        Ok(self.push(OpKind::Crop2d, vec![x.0], value))
    }

    /// Contracts per-output-pixel kernels from `kbank` against the padded
    /// neighborhoods of `x` (plus a scalar bias), per `geom`.
    pub fn map_features(&mut self, x: Var, kbank: Var, bias: Var, geom: MapGeometry) -> Result<Var> {
        let value = k::map_features_forward(self.value(x), self.value(kbank), self.value(bias), &geom)?;
        Ok(self.push(OpKind::MapFeatures(Box::new(geom)), vec![x.0, kbank.0, bias.0], value))
    }

    /// Propagates the gradient of a scalar `loss` node to every reachable
    /// parameter leaf, adding into the blocks' `grad` tensors. Repeated
    /// calls accumulate; node-level gradients are reset on each call.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::arg("backward", "tensor is not connected to this tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::arg(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(gout) = self.nodes[i].grad.take() else { continue };
            match &self.nodes[i].op {
                OpKind::Const => {}
                OpKind::Param(idx) => params.block_mut(*idx).grad.add_assign(&gout),
                _ => {
                    let contribs = self.op_backward(i, &gout)?;
                    for (input, tensor) in contribs {
                        self.accumulate(input, tensor);
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: usize, t: Tensor) {
        match &mut self.nodes[id].grad {
            Some(g) => g.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn op_backward(&self, i: usize, gout: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let node = &self.nodes[i];
        let inp = |j: usize| &self.nodes[node.inputs[j]].value;
        Ok(match &node.op {
            OpKind::Const | OpKind::Param(_) => vec![],
            OpKind::Conv2d { pad } => {
                let (dx, dw, db) = k::conv2d_backward(inp(0), inp(1), gout, *pad)?;
                vec![(node.inputs[0], dx), (node.inputs[1], dw), (node.inputs[2], db)]
            }
            OpKind::DepthwiseConv2d { pad } => {
                let (dx, dw) = k::depthwise_conv2d_backward(inp(0), inp(1), gout, *pad)?;
                vec![(node.inputs[0], dx), (node.inputs[1], dw)]
            }
            OpKind::Dense => {
                let (dx, dw, db) = k::dense_backward(inp(0), inp(1), gout)?;
                vec![(node.inputs[0], dx), (node.inputs[1], dw), (node.inputs[2], db)]
            }
            OpKind::Relu => vec![(node.inputs[0], k::relu_backward(inp(0), gout))],
            OpKind::Sigmoid => vec![(node.inputs[0], k::sigmoid_backward(&node.value, gout))],
            OpKind::GlobalAvgPool => {
                vec![(node.inputs[0], k::global_avg_pool_backward(inp(0), gout)?)]
            }
            OpKind::Add => vec![(node.inputs[0], gout.clone()), (node.inputs[1], gout.clone())],
            OpKind::AddChannels => {
                let (dx, ds) = k::add_channels_backward(inp(0), inp(1), gout)?;
                vec![(node.inputs[0], dx), (node.inputs[1], ds)]
            }
            OpKind::Mul => {
                let a = inp(0);
                let b = inp(1);
                let da: Vec<f64> =
                    gout.data().iter().zip(b.data()).map(|(&g, &v)| g * v).collect();
                let db: Vec<f64> =
                    gout.data().iter().zip(a.data()).map(|(&g, &v)| g * v).collect();
                vec![
                    (node.inputs[0], Tensor::new(a.shape().to_vec(), da)?),
                    (node.inputs[1], Tensor::new(b.shape().to_vec(), db)?),
                ]
            }
            OpKind::MulChannels => {
                let (dx, ds) = k::mul_channels_backward(inp(0), inp(1), gout)?;
                vec![(node.inputs[0], dx), (node.inputs[1], ds)]
            }
            OpKind::Sum => {
                let g = gout.scalar_value()?;
                vec![(node.inputs[0], Tensor::filled(inp(0).shape().to_vec(), g))]
            }
            OpKind::L1Loss => {
                let (da, db) = k::l1_backward(inp(0), inp(1), gout.scalar_value()?);
                vec![(node.inputs[0], da), (node.inputs[1], db)]
            }
            OpKind::Reshape => {
                vec![(node.inputs[0], gout.reshaped(inp(0).shape().to_vec())?)]
            }
            OpKind::Crop2d => vec![(node.inputs[0], k::crop2d_backward(inp(0), gout)?)],
            OpKind::MapFeatures(geom) => {
                let (dx, dk, db) = k::map_features_backward(inp(0), inp(1), gout, geom)?;
                vec![(node.inputs[0], dx), (node.inputs[1], dk), (node.inputs[2], db)]
            }
        })
    }
}
