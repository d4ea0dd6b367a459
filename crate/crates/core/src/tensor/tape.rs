//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] records every operation in creation order together with the
//! values backward needs. Named parameters are registered once; registering
//! the same name again returns the original node, which is how the two
//! branches of a Siamese forward share weights and accumulate gradients.
//!
//! A tape is confined to one logical task. Tensors read from it are
//! immutable and may be shared freely.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::ops::{self, BnBatchStats, BnSaved};
use super::{Element, Tensor};
use crate::error::{ensure_contract, Result};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

/// Train/eval switch for mode-dependent operations (batch norm, dropout).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients keyed by parameter name, in lexicographic order.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

enum Op<T: Element> {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv2d {
        input: NodeId,
        weight: NodeId,
        stride: usize,
        padding: usize,
    },
    BatchNormTrain {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: BnSaved<T>,
    },
    BatchNormEval {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
        epsilon: f64,
    },
    Swish {
        input: NodeId,
    },
    GlobalAvgPool {
        input: NodeId,
        h: usize,
        w: usize,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Dropout {
        input: NodeId,
        mask: Vec<T>,
    },
    SoftmaxXent {
        probs: Tensor<T>,
        targets: Vec<usize>,
        logits: NodeId,
    },
    SquaredDiff {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sum {
        input: NodeId,
    },
    WeightedSum {
        input: NodeId,
        weights: Tensor<T>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
    grad_enabled: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    /// A recording tape: operations on grad-requiring values keep the state
    /// their backward pass needs.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that only computes values; backward is unavailable.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        // Without gradient flow there is nothing to save for backward.
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn flows(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Records a constant input (no gradient unless the tensor is marked).
    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        let needs = self.grad_enabled && t.requires_grad();
        self.push(t.clone(), Op::Leaf, needs)
    }

    /// Registers a named parameter. A name maps to exactly one node: the
    /// second registration must carry the same tensor and returns the same
    /// node id, so reuse accumulates gradients.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            ensure_contract!(
                self.nodes[id.0].value.same_storage(t),
                "Tape::param",
                "parameter {name:?} re-registered with a different tensor"
            );
            return Ok(id);
        }
        let needs = self.grad_enabled && t.requires_grad();
        let id = self.push(t.clone(), Op::Leaf, needs);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let out = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let needs = self.flows(input)
            || self.flows(weight)
            || bias.map(|b| self.flows(b)).unwrap_or(false);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            needs,
        ))
    }

    pub fn depthwise_conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let out = ops::depthwise_conv2d(self.value(input), self.value(weight), stride, padding)?;
        let needs = self.flows(input) || self.flows(weight);
        Ok(self.push(
            out,
            Op::DepthwiseConv2d {
                input,
                weight,
                stride,
                padding,
            },
            needs,
        ))
    }

    /// Batch normalization. In train mode the output is normalized by batch
    /// statistics, which are also returned so the caller can update the
    /// running estimates; in eval mode the provided running statistics are
    /// used and `None` is returned.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mode: Mode,
        epsilon: f64,
    ) -> Result<(NodeId, Option<BnBatchStats<T>>)> {
        let needs = self.flows(input) || self.flows(gamma) || self.flows(beta);
        match mode {
            Mode::Train => {
                let out = ops::batch_norm_train(
                    self.value(input),
                    self.value(gamma),
                    self.value(beta),
                    epsilon,
                )?;
                let id = self.push(
                    out.output,
                    Op::BatchNormTrain {
                        input,
                        gamma,
                        beta,
                        saved: out.saved,
                    },
                    needs,
                );
                Ok((id, Some(out.stats)))
            }
            Mode::Eval => {
                let out = ops::batch_norm_eval(
                    self.value(input),
                    self.value(gamma),
                    self.value(beta),
                    running_mean,
                    running_var,
                    epsilon,
                )?;
                let id = self.push(
                    out,
                    Op::BatchNormEval {
                        input,
                        gamma,
                        beta,
                        running_mean: running_mean.clone(),
                        running_var: running_var.clone(),
                        epsilon,
                    },
                    needs,
                );
                Ok((id, None))
            }
        }
    }

    pub fn swish(&mut self, input: NodeId) -> NodeId {
        let out = ops::swish(self.value(input));
        let needs = self.flows(input);
        self.push(out, Op::Swish { input }, needs)
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let (_, _, h, w) = self.value(input).dims4("global_avg_pool")?;
        let out = ops::global_avg_pool(self.value(input))?;
        let needs = self.flows(input);
        Ok(self.push(out, Op::GlobalAvgPool { input, h, w }, needs))
    }

    pub fn linear(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId> {
        let out = ops::linear(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let needs = self.flows(input)
            || self.flows(weight)
            || bias.map(|b| self.flows(b)).unwrap_or(false);
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    /// Inverted dropout: train mode zeroes elements with probability `p` and
    /// scales survivors by `1/(1-p)`; eval mode is the identity.
    pub fn dropout(
        &mut self,
        input: NodeId,
        p: f64,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        ensure_contract!(
            (0.0..1.0).contains(&p),
            "dropout",
            "probability must satisfy 0 <= p < 1, got {p}"
        );
        if mode == Mode::Eval || p == 0.0 {
            return Ok(input);
        }
        let mask = ops::dropout_mask::<T>(self.value(input).numel(), p, rng);
        let out = ops::mul_elementwise(self.value(input), &mask)?;
        let needs = self.flows(input);
        Ok(self.push(out, Op::Dropout { input, mask }, needs))
    }

    /// Fused stable softmax + mean cross-entropy over two-column logits.
    /// Returns the scalar loss node and the row probabilities.
    pub fn softmax_xent(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<(NodeId, Tensor<T>)> {
        let (loss, probs) = ops::softmax_xent(self.value(logits), targets)?;
        let needs = self.flows(logits);
        let id = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                probs: probs.clone(),
                targets: targets.to_vec(),
                logits,
            },
            needs,
        );
        Ok((id, probs))
    }

    /// Elementwise `(a - b)^2`.
    pub fn squared_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::squared_diff(self.value(a), self.value(b))?;
        let needs = self.flows(a) || self.flows(b);
        Ok(self.push(out, Op::SquaredDiff { a, b }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::add(self.value(a), self.value(b))?;
        let needs = self.flows(a) || self.flows(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let out = ops::sum_all(self.value(input));
        let needs = self.flows(input);
        self.push(out, Op::Sum { input }, needs)
    }

    pub fn weighted_sum(&mut self, input: NodeId, weights: &Tensor<T>) -> Result<NodeId> {
        let out = ops::weighted_sum(self.value(input), weights)?;
        let needs = self.flows(input);
        Ok(self.push(
            out,
            Op::WeightedSum {
                input,
                weights: weights.clone(),
            },
            needs,
        ))
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], target: NodeId, contrib: &[T]) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, &c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib.to_vec()),
        }
    }

    fn backprop_node(
        &self,
        id: usize,
        grad: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        let grad_tensor = || Tensor::new(node.value.shape().to_vec(), grad.to_vec());
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let g = grad_tensor()?;
                let (di, dw, db) = ops::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    bias.is_some(),
                    *stride,
                    *padding,
                    &g,
                )?;
                self.accum(grads, *input, di.data());
                self.accum(grads, *weight, dw.data());
                if let (Some(b), Some(db)) = (bias, db) {
                    self.accum(grads, *b, db.data());
                }
            }
            Op::DepthwiseConv2d {
                input,
                weight,
                stride,
                padding,
            } => {
                let g = grad_tensor()?;
                let (di, dw) = ops::depthwise_conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    *stride,
                    *padding,
                    &g,
                )?;
                self.accum(grads, *input, di.data());
                self.accum(grads, *weight, dw.data());
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                saved,
            } => {
                let g = grad_tensor()?;
                let (di, dg, db) =
                    ops::batch_norm_train_backward(saved, self.value(*gamma), &g)?;
                self.accum(grads, *input, di.data());
                self.accum(grads, *gamma, dg.data());
                self.accum(grads, *beta, db.data());
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                running_mean,
                running_var,
                epsilon,
            } => {
                let g = grad_tensor()?;
                let (di, dg, db) = ops::batch_norm_eval_backward(
                    self.value(*input),
                    self.value(*gamma),
                    running_mean,
                    running_var,
                    *epsilon,
                    &g,
                )?;
                self.accum(grads, *input, di.data());
                self.accum(grads, *gamma, dg.data());
                self.accum(grads, *beta, db.data());
            }
            Op::Swish { input } => {
                let g = grad_tensor()?;
                let di = ops::swish_backward(self.value(*input), &g)?;
                self.accum(grads, *input, di.data());
            }
            Op::GlobalAvgPool { input, h, w } => {
                let g = grad_tensor()?;
                let di = ops::global_avg_pool_backward(*h, *w, &g)?;
                self.accum(grads, *input, di.data());
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let g = grad_tensor()?;
                let (di, dw, db) = ops::linear_backward(
                    self.value(*input),
                    self.value(*weight),
                    bias.is_some(),
                    &g,
                )?;
                self.accum(grads, *input, di.data());
                self.accum(grads, *weight, dw.data());
                if let (Some(b), Some(db)) = (bias, db) {
                    self.accum(grads, *b, db.data());
                }
            }
            Op::Dropout { input, mask } => {
                let di: Vec<T> = grad.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.accum(grads, *input, &di);
            }
            Op::SoftmaxXent {
                probs,
                targets,
                logits,
            } => {
                let dl = ops::softmax_xent_backward(probs, targets, grad[0])?;
                self.accum(grads, *logits, dl.data());
            }
            Op::SquaredDiff { a, b } => {
                let g = grad_tensor()?;
                let (da, db) = ops::squared_diff_backward(self.value(*a), self.value(*b), &g)?;
                self.accum(grads, *a, da.data());
                self.accum(grads, *b, db.data());
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, grad);
                self.accum(grads, *b, grad);
            }
            Op::Sum { input } => {
                let di = vec![grad[0]; self.value(*input).numel()];
                self.accum(grads, *input, &di);
            }
            Op::WeightedSum { input, weights } => {
                let di: Vec<T> = weights.data().iter().map(|&w| w * grad[0]).collect();
                self.accum(grads, *input, &di);
            }
        }
        Ok(())
    }

    /// Reverse traversal from a scalar loss. Every registered grad-requiring
    /// parameter receives an entry: its accumulated gradient, or zeros when
    /// the loss does not reach it.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradMap<T>> {
        ensure_contract!(
            self.grad_enabled,
            "backward",
            "tape was created with gradients disabled"
        );
        let loss_shape = self.value(loss).shape().to_vec();
        ensure_contract!(
            self.value(loss).numel() == 1,
            "backward",
            "loss must be a scalar, got shape {loss_shape:?}"
        );

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::ONE]);
            for id in (0..=loss.0).rev() {
                if matches!(self.nodes[id].op, Op::Leaf) {
                    continue;
                }
                let Some(g) = grads[id].take() else { continue };
                self.backprop_node(id, &g, &mut grads)?;
            }
        }

        let mut out = GradMap::new();
        for (name, &id) in &self.params {
            let node = &self.nodes[id.0];
            if !node.value.requires_grad() {
                continue;
            }
            let tensor = match grads[id.0].take() {
                Some(g) => Tensor::new(node.value.shape().to_vec(), g)?,
                None => Tensor::zeros(node.value.shape().to_vec()),
            };
            out.insert(name.clone(), tensor);
        }
        Ok(out)
    }
}

impl<T: Element> std::fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tape {{ nodes: {}, params: {}, grad_enabled: {} }}",
            self.nodes.len(),
            self.params.len(),
            self.grad_enabled
        )
    }
}
