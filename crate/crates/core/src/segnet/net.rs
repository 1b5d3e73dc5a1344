//! Node graph construction, parameter layout, forward pass, loss, and exact
//! reverse-mode gradients.
//!
//! Nodes are addressed x{level}_{column}: x{i}_0 is the encoder chain,
//! columns j >= 1 are skip/decoder nodes. Parameters live in one flat f64
//! buffer whose layout is fixed by the topology (node order, then per node
//! conv1 weights, conv1 bias, conv2 weights, conv2 bias, then the 1x1
//! output head) - the same order the checkpoint file uses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use super::tensor::{
    concat, conv1x1_backward_input, conv1x1_backward_params, conv1x1_forward,
    conv3x3_backward_input, conv3x3_backward_params, conv3x3_forward, maxpool2_backward,
    maxpool2_forward, relu_backward, relu_forward, sigmoid, upsample2_backward, upsample2_forward,
    Tensor,
};
use super::Topology;
use crate::error::{Error, Result};
use crate::slicer::Grid;

/// Probabilities are clamped to [eps, 1-eps] inside the loss.
pub const BCE_CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Clone)]
enum NodeInput {
    /// The raw 1-channel image (level-0 encoder).
    Image,
    /// 2x2 max pool of an earlier node's output (encoder chain).
    Pooled(usize),
    /// Concatenation of same-level node outputs and the 2x upsampled
    /// output of the node one level down.
    Skip { same: Vec<usize>, below: usize },
}

#[derive(Debug, Clone)]
struct NodeSpec {
    level: usize,
    column: usize,
    in_ch: usize,
    out_ch: usize,
    input: NodeInput,
}

impl NodeSpec {
    fn name(&self) -> String {
        format!("x{}_{}", self.level, self.column)
    }
}

/// One convolution layer's slot in the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct LayerSlot {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub w_off: usize,
    pub w_len: usize,
    pub b_off: usize,
    pub b_len: usize,
}

/// The static structure of a network: node wiring plus parameter layout.
#[derive(Debug, Clone)]
pub struct Network {
    topology: Topology,
    nodes: Vec<NodeSpec>,
    /// Two slots per node (conv1, conv2), then the output head.
    layers: Vec<LayerSlot>,
    param_count: usize,
}

impl Network {
    pub fn new(topology: Topology) -> Result<Self> {
        topology.validate()?;
        let depth = topology.depth;
        let ch = |lvl: usize| topology.channels(lvl);

        let mut nodes: Vec<NodeSpec> = Vec::new();
        let mut index = std::collections::HashMap::new();
        for i in 0..depth {
            let input = if i == 0 {
                NodeInput::Image
            } else {
                NodeInput::Pooled(index[&(i - 1, 0usize)])
            };
            let in_ch = if i == 0 { 1 } else { ch(i - 1) };
            index.insert((i, 0usize), nodes.len());
            nodes.push(NodeSpec {
                level: i,
                column: 0,
                in_ch,
                out_ch: ch(i),
                input,
            });
        }
        match topology.kind {
            super::TopologyKind::NestedDense => {
                for j in 1..depth {
                    for i in 0..depth - j {
                        let same: Vec<usize> = (0..j).map(|c| index[&(i, c)]).collect();
                        let below = index[&(i + 1, j - 1)];
                        index.insert((i, j), nodes.len());
                        nodes.push(NodeSpec {
                            level: i,
                            column: j,
                            in_ch: j * ch(i) + ch(i + 1),
                            out_ch: ch(i),
                            input: NodeInput::Skip { same, below },
                        });
                    }
                }
            }
            super::TopologyKind::PlainSkip => {
                for i in (0..depth - 1).rev() {
                    let j = depth - 1 - i;
                    let below = index[&(i + 1, depth - 2 - i)];
                    index.insert((i, j), nodes.len());
                    nodes.push(NodeSpec {
                        level: i,
                        column: j,
                        in_ch: ch(i) + ch(i + 1),
                        out_ch: ch(i),
                        input: NodeInput::Skip {
                            same: vec![index[&(i, 0)]],
                            below,
                        },
                    });
                }
            }
        }

        let mut layers = Vec::new();
        let mut off = 0usize;
        let mut push_layer = |name: String, in_ch: usize, out_ch: usize, kernel: usize| {
            let w_len = out_ch * in_ch * kernel * kernel;
            let slot = LayerSlot {
                name,
                in_ch,
                out_ch,
                kernel,
                w_off: off,
                w_len,
                b_off: off + w_len,
                b_len: out_ch,
            };
            off += w_len + out_ch;
            layers.push(slot);
        };
        for node in &nodes {
            push_layer(format!("{}.conv1", node.name()), node.in_ch, node.out_ch, 3);
            push_layer(
                format!("{}.conv2", node.name()),
                node.out_ch,
                node.out_ch,
                3,
            );
        }
        push_layer("head.conv".to_string(), ch(0), 1, 1);

        Ok(Network {
            topology,
            nodes,
            layers,
            param_count: off,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn layers(&self) -> &[LayerSlot] {
        &self.layers
    }

    /// Node names in computation order.
    pub fn node_names(&self) -> Vec<String> {
        self.nodes.iter().map(NodeSpec::name).collect()
    }

    fn node_layers(&self, node_idx: usize) -> (&LayerSlot, &LayerSlot) {
        (&self.layers[2 * node_idx], &self.layers[2 * node_idx + 1])
    }

    fn head_layer(&self) -> &LayerSlot {
        self.layers.last().unwrap()
    }

    /// Seeded initialization: per-layer uniform weights in
    /// +-sqrt(6 / (fan_in + fan_out)), zero biases, drawn in layout order.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut data = vec![0.0f64; self.param_count];
        for layer in &self.layers {
            let k2 = (layer.kernel * layer.kernel) as f64;
            let fan_in = layer.in_ch as f64 * k2;
            let fan_out = layer.out_ch as f64 * k2;
            let bound = (6.0 / (fan_in + fan_out)).sqrt();
            for w in &mut data[layer.w_off..layer.w_off + layer.w_len] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        ModelParams {
            topology: self.topology,
            data,
        }
    }

    fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << (self.topology.depth - 1);
        if h == 0 || w == 0 || !h.is_multiple_of(div) || !w.is_multiple_of(div) {
            return Err(Error::validation(format!(
                "input {}x{} not divisible by 2^(depth-1) = {}",
                h, w, div
            )));
        }
        Ok(())
    }
}

/// Network weights: one flat buffer in the layout fixed by the topology.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub topology: Topology,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn from_flat(topology: Topology, data: Vec<f64>) -> Result<Self> {
        let net = Network::new(topology)?;
        if data.len() != net.param_count() {
            return Err(Error::validation(format!(
                "parameter payload has {} values, topology needs {}",
                data.len(),
                net.param_count()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite parameter"));
        }
        Ok(ModelParams { topology, data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

struct NodeTrace {
    input: Tensor,
    relu1_mask: Vec<u8>,
    hidden: Tensor,
    relu2_mask: Vec<u8>,
    output: Tensor,
    pool_arg: Option<Vec<u32>>,
}

struct ForwardTrace {
    nodes: Vec<NodeTrace>,
    probs: Vec<f64>,
}

fn run_forward(net: &Network, params: &ModelParams, image: &Grid<f64>) -> Result<ForwardTrace> {
    net.check_input(image.h(), image.w())?;
    let p = params.data();
    let mut traces: Vec<NodeTrace> = Vec::with_capacity(net.nodes.len());

    for (idx, node) in net.nodes.iter().enumerate() {
        let (input, pool_arg) = match &node.input {
            NodeInput::Image => (
                Tensor::from_plane(image.h(), image.w(), image.data().to_vec()),
                None,
            ),
            NodeInput::Pooled(src) => {
                let (pooled, arg) = maxpool2_forward(&traces[*src].output);
                (pooled, Some(arg))
            }
            NodeInput::Skip { same, below } => {
                let up = upsample2_forward(&traces[*below].output);
                let mut parts: Vec<&Tensor> = same.iter().map(|&s| &traces[s].output).collect();
                parts.push(&up);
                (concat(&parts), None)
            }
        };
        debug_assert_eq!(input.c, node.in_ch, "{} input channels", node.name());
        let (conv1, conv2) = net.node_layers(idx);
        let mut hidden = conv3x3_forward(
            &input,
            &p[conv1.w_off..conv1.w_off + conv1.w_len],
            &p[conv1.b_off..conv1.b_off + conv1.b_len],
            node.out_ch,
        );
        let relu1_mask = relu_forward(&mut hidden);
        let mut output = conv3x3_forward(
            &hidden,
            &p[conv2.w_off..conv2.w_off + conv2.w_len],
            &p[conv2.b_off..conv2.b_off + conv2.b_len],
            node.out_ch,
        );
        let relu2_mask = relu_forward(&mut output);
        if !output.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite activation at node {}",
                node.name()
            )));
        }
        traces.push(NodeTrace {
            input,
            relu1_mask,
            hidden,
            relu2_mask,
            output,
            pool_arg,
        });
    }

    let head = net.head_layer();
    let logits = conv1x1_forward(
        &traces.last().unwrap().output,
        &p[head.w_off..head.w_off + head.w_len],
        &p[head.b_off..head.b_off + head.b_len],
        1,
    );
    if !logits.is_finite() {
        return Err(Error::numerical("non-finite activation at head.conv"));
    }
    let probs: Vec<f64> = logits.data.iter().map(|&z| sigmoid(z)).collect();
    Ok(ForwardTrace {
        nodes: traces,
        probs,
    })
}

/// Forward pass for one image; returns per-pixel probabilities in (0, 1).
pub fn forward_single(net: &Network, params: &ModelParams, image: &Grid<f64>) -> Result<Grid<f64>> {
    let trace = run_forward(net, params, image)?;
    Ok(Grid::new(image.h(), image.w(), trace.probs))
}

/// Forward over a batch, parallel across samples.
pub fn forward_batch(
    net: &Network,
    params: &ModelParams,
    images: &[&Grid<f64>],
) -> Result<Vec<Grid<f64>>> {
    images
        .par_iter()
        .map(|img| forward_single(net, params, img))
        .collect()
}

/// Mean over pixels of -[w y ln p + (1-w)(1-y) ln(1-p)], probabilities
/// clamped to [eps, 1-eps].
pub fn weighted_bce(probs: &[f64], masks: &[u8], w: f64) -> Result<f64> {
    if probs.len() != masks.len() {
        return Err(Error::validation(format!(
            "shape mismatch: {} probabilities vs {} mask pixels",
            probs.len(),
            masks.len()
        )));
    }
    let mut sum = 0.0;
    for (&p, &y) in probs.iter().zip(masks) {
        let pc = p.clamp(BCE_CLAMP_EPS, 1.0 - BCE_CLAMP_EPS);
        sum -= if y == 1 {
            w * pc.ln()
        } else {
            (1.0 - w) * (1.0 - pc).ln()
        };
    }
    Ok(sum / probs.len() as f64)
}

/// d(loss)/d(logit) per pixel, `scale` = 1 / (total pixels in the batch).
/// Pixels whose probability sits outside the clamp window contribute zero,
/// matching the clamped loss exactly.
pub fn bce_with_logits_grad(probs: &[f64], masks: &[u8], w: f64, scale: f64) -> Vec<f64> {
    probs
        .iter()
        .zip(masks)
        .map(|(&p, &y)| {
            if !(BCE_CLAMP_EPS..=1.0 - BCE_CLAMP_EPS).contains(&p) {
                return 0.0;
            }
            let dl_dp = if y == 1 {
                -w / p
            } else {
                (1.0 - w) / (1.0 - p)
            };
            scale * dl_dp * p * (1.0 - p)
        })
        .collect()
}

fn backward_from_logit_grad(
    net: &Network,
    params: &ModelParams,
    trace: &ForwardTrace,
    dlogits: Vec<f64>,
    grads: &mut [f64],
) {
    let p = params.data();
    let last = trace.nodes.len() - 1;
    let (h, w) = (trace.nodes[last].output.h, trace.nodes[last].output.w);

    let head = net.head_layer();
    let dlogits = Tensor::from_plane(h, w, dlogits);
    {
        let (dw, db) = layer_grad_slices(grads, head);
        conv1x1_backward_params(&trace.nodes[last].output, &dlogits, dw, db);
    }

    let mut d_out: Vec<Option<Tensor>> = (0..net.nodes.len()).map(|_| None).collect();
    d_out[last] = Some(conv1x1_backward_input(
        &dlogits,
        &p[head.w_off..head.w_off + head.w_len],
        head.in_ch,
    ));

    let add_into = |slot: &mut Option<Tensor>, add: Tensor| match slot {
        None => *slot = Some(add),
        Some(t) => {
            for (a, b) in t.data.iter_mut().zip(&add.data) {
                *a += b;
            }
        }
    };

    for idx in (0..net.nodes.len()).rev() {
        let Some(mut dout) = d_out[idx].take() else {
            continue;
        };
        let node = &net.nodes[idx];
        let tr = &trace.nodes[idx];
        let (conv1, conv2) = net.node_layers(idx);

        relu_backward(&mut dout, &tr.relu2_mask);
        {
            let (dw, db) = layer_grad_slices(grads, conv2);
            conv3x3_backward_params(&tr.hidden, &dout, dw, db);
        }
        let mut dhidden = conv3x3_backward_input(
            &dout,
            &p[conv2.w_off..conv2.w_off + conv2.w_len],
            node.out_ch,
        );
        relu_backward(&mut dhidden, &tr.relu1_mask);
        {
            let (dw, db) = layer_grad_slices(grads, conv1);
            conv3x3_backward_params(&tr.input, &dhidden, dw, db);
        }
        let dinput = conv3x3_backward_input(
            &dhidden,
            &p[conv1.w_off..conv1.w_off + conv1.w_len],
            node.in_ch,
        );

        match &node.input {
            NodeInput::Image => {}
            NodeInput::Pooled(src) => {
                let out = &trace.nodes[*src].output;
                let din = maxpool2_backward(&dinput, tr.pool_arg.as_ref().unwrap(), out.h, out.w);
                add_into(&mut d_out[*src], din);
            }
            NodeInput::Skip { same, below } => {
                let (ih, iw) = (dinput.h, dinput.w);
                let plane = ih * iw;
                let mut ch_off = 0usize;
                for &s in same {
                    let c = net.nodes[s].out_ch;
                    let part = Tensor {
                        c,
                        h: ih,
                        w: iw,
                        data: dinput.data[ch_off * plane..(ch_off + c) * plane].to_vec(),
                    };
                    add_into(&mut d_out[s], part);
                    ch_off += c;
                }
                let c_below = net.nodes[*below].out_ch;
                let dup = Tensor {
                    c: c_below,
                    h: ih,
                    w: iw,
                    data: dinput.data[ch_off * plane..(ch_off + c_below) * plane].to_vec(),
                };
                add_into(&mut d_out[*below], upsample2_backward(&dup));
            }
        }
    }
}

/// A layer's weight and bias gradient slices; the ranges are adjacent in
/// the flat buffer, so one split covers both.
fn layer_grad_slices<'a>(grads: &'a mut [f64], l: &LayerSlot) -> (&'a mut [f64], &'a mut [f64]) {
    grads[l.w_off..l.b_off + l.b_len].split_at_mut(l.w_len)
}

/// Loss and exact gradients of `weighted_bce(forward(params, batch))` with
/// respect to every parameter. Samples are processed in parallel and
/// reduced in a fixed order.
pub fn gradients(
    net: &Network,
    params: &ModelParams,
    images: &[&Grid<f64>],
    masks: &[&Grid<u8>],
    w: f64,
) -> Result<(f64, Vec<f64>)> {
    if images.len() != masks.len() || images.is_empty() {
        return Err(Error::validation("batch images and masks must pair up"));
    }
    let pixels_per = images[0].h() * images[0].w();
    let total_pixels = (pixels_per * images.len()) as f64;
    let scale = 1.0 / total_pixels;

    let per_sample: Vec<Result<(f64, Vec<f64>)>> = images
        .par_iter()
        .zip(masks.par_iter())
        .map(|(img, mask)| {
            if (img.h(), img.w()) != (mask.h(), mask.w()) {
                return Err(Error::validation("image and mask shapes differ"));
            }
            let trace = run_forward(net, params, img)?;
            let mut loss_sum = 0.0;
            for (&p, &y) in trace.probs.iter().zip(mask.data()) {
                let pc = p.clamp(BCE_CLAMP_EPS, 1.0 - BCE_CLAMP_EPS);
                loss_sum -= if y == 1 {
                    w * pc.ln()
                } else {
                    (1.0 - w) * (1.0 - pc).ln()
                };
            }
            let dlogits = bce_with_logits_grad(&trace.probs, mask.data(), w, scale);
            let mut grad = vec![0.0f64; net.param_count()];
            backward_from_logit_grad(net, params, &trace, dlogits, &mut grad);
            Ok((loss_sum, grad))
        })
        .collect();

    let mut loss = 0.0;
    let mut grads = vec![0.0f64; net.param_count()];
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss / total_pixels, grads))
}

/// Threshold forward probabilities into binary masks (prob >= threshold).
pub fn predict(
    net: &Network,
    params: &ModelParams,
    images: &[&Grid<f64>],
    threshold: f64,
) -> Result<Vec<Grid<u8>>> {
    images
        .par_iter()
        .map(|img| {
            let probs = forward_single(net, params, img)?;
            let data = probs
                .data()
                .iter()
                .map(|&p| u8::from(p >= threshold))
                .collect();
            Ok(Grid::new(img.h(), img.w(), data))
        })
        .collect()
}
