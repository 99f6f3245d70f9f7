//! A small feed-forward network engine: named blocks of layers, a forward
//! pass that keeps what backpropagation needs, and a backward pass that can
//! hand out gradients at any block output.

mod gemm;
pub mod layers;
mod tensor;

use std::collections::BTreeMap;

pub use layers::{BatchNorm, Cache, Conv2d, Layer, Linear, Mode, Pool2d, PoolKind};
pub use tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_shape: (usize, usize, usize),
    pub blocks: Vec<Block>,
}

/// Forward-pass record used by [`Network::backward`].
#[derive(Debug)]
pub struct Trace {
    caches: Vec<Vec<Cache>>,
    pub output: Tensor,
}

/// Result of a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    /// One entry per trainable tensor in [`Network::param_names`] order;
    /// empty when parameter gradients were not requested.
    pub params: Vec<Vec<f64>>,
    /// Gradients with respect to the outputs of the requested blocks.
    pub block_outputs: BTreeMap<usize, Tensor>,
}

impl Network {
    /// Output shape of every block, checking that layers chain.
    pub fn block_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let (mut c, mut h, mut w) = self.input_shape;
        let mut shapes = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            for layer in &block.layers {
                (c, h, w) = layer.output_shape(c, h, w).ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "{} layer in block {} cannot take input {c}x{h}x{w}",
                        layer.kind(),
                        block.name
                    ))
                })?;
            }
            shapes.push((c, h, w));
        }
        Ok(shapes)
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if (x.c, x.h, x.w) != (c, h, w) {
            return Err(Error::InvalidInput(format!(
                "expected input {c}x{h}x{w}, got {}x{}x{}",
                x.c, x.h, x.w
            )));
        }
        Ok(())
    }

    /// Forward pass keeping caches for backpropagation.
    pub fn forward_trace(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Trace> {
        Ok(self.forward_trace_capture(x, mode, &[])?.0)
    }

    /// [`forward_trace`](Self::forward_trace) that also returns the outputs
    /// of the blocks listed in `capture`.
    pub fn forward_trace_capture(
        &self,
        x: &Tensor,
        mode: &mut Mode<'_>,
        capture: &[usize],
    ) -> Result<(Trace, BTreeMap<usize, Tensor>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut captured = BTreeMap::new();
        let mut cur = x.clone();
        for (b, block) in self.blocks.iter().enumerate() {
            let mut block_caches = Vec::with_capacity(block.layers.len());
            for layer in &block.layers {
                let (next, cache) = layer.forward(cur, mode);
                block_caches.push(cache);
                cur = next;
            }
            if capture.contains(&b) {
                captured.insert(b, cur.clone());
            }
            caches.push(block_caches);
        }
        Ok((Trace { caches, output: cur }, captured))
    }

    /// Inference forward pass returning the outputs of the blocks listed in
    /// `capture` and the final output.
    pub fn forward_capture(
        &self,
        x: &Tensor,
        capture: &[usize],
    ) -> Result<(BTreeMap<usize, Tensor>, Tensor)> {
        self.check_input(x)?;
        let mut captured = BTreeMap::new();
        let mut cur = x.clone();
        for (b, block) in self.blocks.iter().enumerate() {
            for layer in &block.layers {
                cur = layer.infer(cur);
            }
            if capture.contains(&b) {
                captured.insert(b, cur.clone());
            }
        }
        Ok((captured, cur))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_capture(x, &[])?.1)
    }

    /// Backpropagates `grad_output` through the trace. Propagation stops as
    /// soon as nothing further down is needed.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_output: &Tensor,
        need_params: bool,
        capture: &[usize],
    ) -> Gradients {
        let lowest = if need_params {
            0
        } else {
            capture
                .iter()
                .map(|&b| b + 1)
                .min()
                .unwrap_or(self.blocks.len())
        };
        let mut block_grads: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.blocks.len()];
        let mut out = Gradients::default();
        let mut grad = grad_output.clone();
        let last = self.blocks.len().saturating_sub(1);
        if capture.contains(&last) {
            out.block_outputs.insert(last, grad.clone());
        }
        for b in (lowest..self.blocks.len()).rev() {
            let block = &self.blocks[b];
            let mut layer_grads = Vec::new();
            for (l, layer) in block.layers.iter().enumerate().rev() {
                let need_input =
                    b > 0 || (l > 0 && block.layers[..l].iter().any(|p| !p.params().is_empty()));
                let (dx, g) = layer.backward(&trace.caches[b][l], &grad, need_input, need_params);
                layer_grads.push(g);
                match dx {
                    Some(dx) => grad = dx,
                    None => break,
                }
            }
            block_grads[b] = layer_grads.into_iter().rev().flatten().collect();
            if b > 0 && capture.contains(&(b - 1)) {
                out.block_outputs.insert(b - 1, grad.clone());
            }
        }
        if need_params {
            out.params = block_grads.into_iter().flatten().collect();
        }
        out
    }

    /// Folds batch statistics from a training-mode trace into running estimates.
    pub fn commit(&mut self, trace: &Trace) {
        for (block, caches) in self.blocks.iter_mut().zip(&trace.caches) {
            for (layer, cache) in block.layers.iter_mut().zip(caches) {
                layer.commit(cache);
            }
        }
    }

    /// `block.layerindex.param` for every trainable tensor.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for block in &self.blocks {
            for (l, layer) in block.layers.iter().enumerate() {
                for (p, _) in layer.params() {
                    names.push(format!("{}.{l}.{p}", block.name));
                }
            }
        }
        names
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        self.blocks
            .iter()
            .flat_map(|b| b.layers.iter())
            .flat_map(|l| l.params().into_iter().map(|(_, p)| p))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.layers.iter_mut())
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Every named tensor that defines the network state, parameters and
    /// buffers alike.
    pub fn state(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for (l, layer) in block.layers.iter().enumerate() {
                for (p, t) in layer.params().into_iter().chain(layer.buffers()) {
                    out.push((format!("{}.{l}.{p}", block.name), t));
                }
            }
        }
        out
    }

    pub fn state_shapes(&self) -> Vec<Vec<usize>> {
        self.blocks
            .iter()
            .flat_map(|b| b.layers.iter())
            .flat_map(|l| l.state_shapes())
            .collect()
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            let name = block.name.clone();
            for (l, layer) in block.layers.iter_mut().enumerate() {
                let names: Vec<&'static str> = layer
                    .params()
                    .into_iter()
                    .chain(layer.buffers())
                    .map(|(p, _)| p)
                    .collect();
                let params = layer_state_mut(layer);
                for (p, t) in names.into_iter().zip(params) {
                    out.push((format!("{name}.{l}.{p}"), t));
                }
            }
        }
        out
    }
}

fn layer_state_mut(layer: &mut Layer) -> Vec<&mut Vec<f64>> {
    match layer {
        Layer::BatchNorm(bn) => vec![
            &mut bn.gamma,
            &mut bn.beta,
            &mut bn.running_mean,
            &mut bn.running_var,
        ],
        other => other.params_mut(),
    }
}

/// Softmax cross-entropy averaged over the batch. Returns the loss and the
/// gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> (f64, Tensor) {
    let k = logits.sample_len();
    let n = logits.n;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate().take(n) {
        let row = grad.sample_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        loss -= row[t].max(f64::MIN_POSITIVE).ln();
        row[t] -= 1.0;
        for v in row.iter_mut().take(k) {
            *v /= n as f64;
        }
    }
    (loss / n as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{rng, stream};
    use rand::Rng as _;

    fn random_vec(len: usize, r: &mut crate::seed::Rng) -> Vec<f64> {
        (0..len).map(|_| r.random_range(-0.5..0.5)).collect()
    }

    fn tiny_net(pool: PoolKind, with_bn: bool, seed: u64) -> Network {
        let mut r = rng(seed, stream::INIT);
        let mut conv2_layers = vec![Layer::Conv(Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
            weight: random_vec(3 * 2 * 9, &mut r),
            bias: Some(random_vec(3, &mut r)),
        })];
        if with_bn {
            let mut bn = BatchNorm::new(3);
            bn.gamma = vec![1.1, 0.9, 1.3];
            bn.beta = vec![0.1, -0.2, 0.05];
            bn.running_mean = vec![0.05, -0.1, 0.2];
            bn.running_var = vec![0.7, 1.2, 0.9];
            conv2_layers.push(Layer::BatchNorm(bn));
        }
        conv2_layers.push(Layer::Tanh);
        conv2_layers.push(Layer::Pool(Pool2d {
            kind: pool,
            kernel: 2,
            stride: 1,
        }));
        Network {
            input_shape: (1, 7, 7),
            blocks: vec![
                Block {
                    name: "first".into(),
                    layers: vec![Layer::Conv(Conv2d {
                        in_channels: 1,
                        out_channels: 2,
                        kernel: 3,
                        stride: 1,
                        padding: 0,
                        weight: random_vec(2 * 9, &mut r),
                        bias: None,
                    })],
                },
                Block {
                    name: "second".into(),
                    layers: conv2_layers,
                },
                Block {
                    name: "head".into(),
                    layers: vec![
                        Layer::Flatten,
                        Layer::Dropout(0.0),
                        Layer::Linear(Linear {
                            in_features: 3 * 2 * 2,
                            out_features: 4,
                            weight: random_vec(12 * 4, &mut r),
                            bias: random_vec(4, &mut r),
                        }),
                        Layer::Tanh,
                    ],
                },
                Block {
                    name: "out".into(),
                    layers: vec![Layer::Linear(Linear {
                        in_features: 4,
                        out_features: 2,
                        weight: random_vec(8, &mut r),
                        bias: random_vec(2, &mut r),
                    })],
                },
            ],
        }
    }

    fn input(n: usize, seed: u64) -> Tensor {
        let mut r = rng(seed, stream::SCENE_NOISE);
        Tensor::from_vec(n, 1, 7, 7, random_vec(n * 49, &mut r)).unwrap()
    }

    fn loss_of(net: &Network, x: &Tensor, train: bool) -> f64 {
        let mut r = rng(0, 0);
        let mut mode = if train {
            Mode::Train(&mut r)
        } else {
            Mode::Eval
        };
        let trace = net.forward_trace(x, &mut mode).unwrap();
        softmax_cross_entropy(&trace.output, &[0, 1, 1][..x.n]).0
    }

    fn check_param_grads(net: &Network, x: &Tensor, train: bool) {
        let mut r = rng(0, 0);
        let mut mode = if train {
            Mode::Train(&mut r)
        } else {
            Mode::Eval
        };
        let trace = net.forward_trace(x, &mut mode).unwrap();
        let (_, g) = softmax_cross_entropy(&trace.output, &[0, 1, 1][..x.n]);
        let grads = net.backward(&trace, &g, true, &[]);
        let names = net.param_names();
        assert_eq!(grads.params.len(), names.len());
        let h = 1e-6;
        for (pi, name) in names.iter().enumerate() {
            for j in 0..grads.params[pi].len() {
                let mut plus = net.clone();
                plus.params_mut()[pi][j] += h;
                let mut minus = net.clone();
                minus.params_mut()[pi][j] -= h;
                let numeric = (loss_of(&plus, x, train) - loss_of(&minus, x, train)) / (2.0 * h);
                let analytic = grads.params[pi][j];
                assert!(
                    (numeric - analytic).abs() < 1e-7 + 1e-5 * numeric.abs(),
                    "{name}[{j}]: numeric {numeric} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let x = input(3, 5);
        check_param_grads(&tiny_net(PoolKind::Average, false, 1), &x, false);
        check_param_grads(&tiny_net(PoolKind::Max, false, 2), &x, false);
        check_param_grads(&tiny_net(PoolKind::Average, true, 3), &x, false);
        check_param_grads(&tiny_net(PoolKind::Max, true, 4), &x, true);
    }

    #[test]
    fn block_output_gradients_match_finite_differences() {
        let net = tiny_net(PoolKind::Max, true, 9);
        let x = input(2, 11);
        // Objective: sum over samples of logit0 - logit1.
        let objective = |tail_from: usize, act: &Tensor| -> f64 {
            let mut cur = act.clone();
            for block in &net.blocks[tail_from..] {
                for layer in &block.layers {
                    cur = layer.infer(cur);
                }
            }
            (0..cur.n)
                .map(|i| cur.sample(i)[0] - cur.sample(i)[1])
                .sum()
        };
        let trace = net.forward_trace(&x, &mut Mode::Eval).unwrap();
        let mut g = Tensor::zeros(2, 2, 1, 1);
        for i in 0..2 {
            g.sample_mut(i).copy_from_slice(&[1.0, -1.0]);
        }
        let grads = net.backward(&trace, &g, false, &[0, 2]);
        assert!(grads.params.is_empty());
        let (acts, _) = net.forward_capture(&x, &[0, 2]).unwrap();
        for b in [0usize, 2] {
            let act = &acts[&b];
            let analytic = &grads.block_outputs[&b];
            assert_eq!(analytic.shape(), act.shape());
            let h = 1e-6;
            for j in 0..act.data.len() {
                let mut plus = act.clone();
                plus.data[j] += h;
                let mut minus = act.clone();
                minus.data[j] -= h;
                let numeric = (objective(b + 1, &plus) - objective(b + 1, &minus)) / (2.0 * h);
                assert!(
                    (numeric - analytic.data[j]).abs() < 1e-7,
                    "block {b} [{j}]: {numeric} vs {}",
                    analytic.data[j]
                );
            }
        }
    }

    #[test]
    fn forward_trace_and_forward_agree_in_eval_mode() {
        let net = tiny_net(PoolKind::Average, true, 3);
        let x = input(3, 4);
        let trace = net.forward_trace(&x, &mut Mode::Eval).unwrap();
        assert_eq!(trace.output, net.forward(&x).unwrap());
    }

    #[test]
    fn batch_norm_commit_uses_unbiased_variance() {
        let mut bn = BatchNorm::new(1);
        let x = Tensor::from_vec(4, 1, 1, 1, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let layer = Layer::BatchNorm(bn.clone());
        let mut r = rng(0, 0);
        let (_, cache) = layer.forward(x, &mut Mode::Train(&mut r));
        let mut layer = layer;
        layer.commit(&cache);
        if let Layer::BatchNorm(updated) = layer {
            bn = updated;
        }
        // mean 3, population variance 3.5, unbiased 14/3.
        assert!((bn.running_mean[0] - 0.3).abs() < 1e-12);
        assert!((bn.running_var[0] - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn dropout_scales_kept_units_and_is_identity_in_eval() {
        let x = Tensor::from_vec(1, 1000, 1, 1, vec![1.0; 1000]).unwrap();
        let layer = Layer::Dropout(0.3);
        let mut r = rng(7, stream::DROPOUT);
        let (out, _) = layer.forward(x.clone(), &mut Mode::Train(&mut r));
        let kept = out.data.iter().filter(|&&v| v != 0.0).count();
        assert!(out
            .data
            .iter()
            .all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
        assert!((600..800).contains(&kept));
        assert_eq!(layer.infer(x.clone()), x);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let net = tiny_net(PoolKind::Max, false, 13);
        let Layer::Conv(conv) = &net.blocks[1].layers[0] else {
            panic!()
        };
        let mut r = rng(3, 3);
        let x = Tensor::from_vec(1, 2, 5, 6, random_vec(60, &mut r)).unwrap();
        let out = Layer::Conv(conv.clone()).infer(x.clone());
        let (ho, wo) = conv.output_size(5, 6).unwrap();
        assert_eq!((out.h, out.w), (ho, wo));
        for o in 0..conv.out_channels {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = conv.bias.as_ref().unwrap()[o];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * 2 + ki) as isize - 1;
                                let ix = (ox * 2 + kj) as isize - 1;
                                if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                    acc += conv.weight[((o * 2 + c) * 3 + ki) * 3 + kj]
                                        * x.data[(c * 5 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = out.data[(o * ho + oy) * wo + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut net = tiny_net(PoolKind::Max, false, 1);
        net.input_shape = (1, 3, 3);
        assert!(net.block_shapes().is_err());
        let net = tiny_net(PoolKind::Max, false, 1);
        assert_eq!(net.block_shapes().unwrap().last(), Some(&(2, 1, 1)));
        assert!(net.forward(&Tensor::zeros(1, 1, 8, 8)).is_err());
    }
}
