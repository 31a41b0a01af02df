use super::{UNetConfig, UNetParams};
use crate::error::{Error, Result};
use crate::tensor::{
    concat_channels, conv2d, conv2d_backward, maxpool2, maxpool2_backward, relu, relu_backward,
    softmax_channels, split_channels, upconv2, upconv2_backward, ConvKernel, PoolIndices, Tensor4,
};

/// Intermediates of one conv → ReLU → conv → ReLU block.
#[derive(Clone, Debug)]
struct BlockTape {
    input: Tensor4,
    pre_a: Tensor4,
    act_a: Tensor4,
    pre_b: Tensor4,
}

#[derive(Clone, Debug)]
struct DecoderTape {
    /// Input to the upconv (output of the level below).
    below: Tensor4,
    block: BlockTape,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    encoder: Vec<BlockTape>,
    /// `pools[l]` pooled encoder level `l` into level `l + 1`.
    pools: Vec<PoolIndices>,
    /// Indexed by level, `decoder[l]` for `l < depth - 1`.
    decoder: Vec<DecoderTape>,
    head_input: Tensor4,
}

/// Per-pixel class probabilities. The foreground plane is the
/// probability map the TV penalty and all metrics act on.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap {
    pub probs: Tensor4,
    pub foreground: usize,
}

impl PredictionMap {
    pub fn new(probs: Tensor4) -> Self {
        Self { probs, foreground: 1 }
    }

    pub fn batch_len(&self) -> usize {
        self.probs.shape().n
    }

    pub fn foreground_plane(&self, n: usize) -> &[f64] {
        self.probs.plane(n, self.foreground)
    }
}

struct Kernels<'a> {
    params: &'a UNetParams,
    next: usize,
}

impl<'a> Kernels<'a> {
    fn take(&mut self) -> &'a ConvKernel {
        let k = &self.params.layers[self.next].kernel;
        self.next += 1;
        k
    }
}

fn block_forward(input: Tensor4, a: &ConvKernel, b: &ConvKernel) -> Result<(Tensor4, BlockTape)> {
    let pre_a = conv2d(&input, a, 1)?;
    let act_a = relu(&pre_a);
    let pre_b = conv2d(&act_a, b, 1)?;
    let out = relu(&pre_b);
    Ok((
        out,
        BlockTape {
            input,
            pre_a,
            act_a,
            pre_b,
        },
    ))
}

/// Returns the gradient w.r.t. the block input and (kernel a, kernel b) grads.
fn block_backward(
    tape: &BlockTape,
    a: &ConvKernel,
    b: &ConvKernel,
    grad_out: &Tensor4,
) -> Result<(Tensor4, ConvKernel, ConvKernel)> {
    let g_pre_b = relu_backward(&tape.pre_b, grad_out)?;
    let (g_act_a, gk_b) = conv2d_backward(&tape.act_a, b, &g_pre_b, 1)?;
    let g_pre_a = relu_backward(&tape.pre_a, &g_act_a)?;
    let (g_in, gk_a) = conv2d_backward(&tape.input, a, &g_pre_a, 1)?;
    Ok((g_in, gk_a, gk_b))
}

fn check_input(config: &UNetConfig, batch: &Tensor4) -> Result<()> {
    let s = batch.shape();
    let [h, w] = config.input_size;
    if s.c != config.in_channels || s.h != h || s.w != w {
        return Err(Error::dim(format!(
            "batch {s} does not match network input (n, {}, {h}, {w})",
            config.in_channels
        )));
    }
    Ok(())
}

/// Runs the network and returns logits of shape `(n, K, h, w)`, plus the
/// tape when `record_tape` is set.
pub fn forward(
    params: &UNetParams,
    config: &UNetConfig,
    batch: &Tensor4,
    record_tape: bool,
) -> Result<(Tensor4, Option<Tape>)> {
    check_input(config, batch)?;
    let depth = config.depth;
    let mut kernels = Kernels { params, next: 0 };

    let mut encoder = Vec::with_capacity(depth);
    let mut pools = Vec::with_capacity(depth - 1);
    let mut skips: Vec<Tensor4> = Vec::with_capacity(depth);
    for l in 0..depth {
        let input = if l == 0 {
            batch.clone()
        } else {
            let (pooled, idx) = maxpool2(&skips[l - 1])?;
            pools.push(idx);
            pooled
        };
        let (ka, kb) = (kernels.take(), kernels.take());
        let (out, tape) = block_forward(input, ka, kb)?;
        encoder.push(tape);
        skips.push(out);
    }

    let mut current = skips.pop().expect("depth >= 2");
    let mut decoder: Vec<Option<DecoderTape>> = vec![None; depth - 1];
    for l in (0..depth - 1).rev() {
        let up = kernels.take();
        let upsampled = upconv2(&current, up)?;
        let joined = concat_channels(&upsampled, &skips[l])?;
        let (ka, kb) = (kernels.take(), kernels.take());
        let (out, block) = block_forward(joined, ka, kb)?;
        decoder[l] = Some(DecoderTape {
            below: current,
            block,
        });
        current = out;
    }
    let head = kernels.take();
    let logits = conv2d(&current, head, 0)?;

    let tape = record_tape.then(|| Tape {
        encoder,
        pools,
        decoder: decoder.into_iter().map(|d| d.expect("every level filled")).collect(),
        head_input: current,
    });
    Ok((logits, tape))
}

/// Forward pass followed by a channel softmax.
pub fn predict(params: &UNetParams, config: &UNetConfig, batch: &Tensor4) -> Result<PredictionMap> {
    let (logits, _) = forward(params, config, batch, false)?;
    Ok(PredictionMap::new(softmax_channels(&logits)?))
}

/// Gradients of `⟨logits, grad_logits⟩` with respect to every parameter.
pub fn backward(
    params: &UNetParams,
    config: &UNetConfig,
    tape: Option<&Tape>,
    grad_logits: &Tensor4,
) -> Result<UNetParams> {
    let tape = tape.ok_or_else(|| {
        Error::Usage("backward needs a tape from forward(.., record_tape = true)".into())
    })?;
    let depth = config.depth;
    let layers = &params.layers;
    let mut grads = params.zeros_like();
    // Layer index of the first decoder layer for level l (up, conv_a, conv_b).
    let dec_index = |l: usize| 2 * depth + 3 * (depth - 2 - l);
    let head_index = layers.len() - 1;

    let (mut g_current, gk) =
        conv2d_backward(&tape.head_input, &layers[head_index].kernel, grad_logits, 0)?;
    grads.layers[head_index].kernel = gk;

    let mut skip_grads: Vec<Option<Tensor4>> = vec![None; depth - 1];
    for l in 0..depth - 1 {
        let i = dec_index(l);
        let dec = &tape.decoder[l];
        let (g_joined, gk_a, gk_b) = block_backward(
            &dec.block,
            &layers[i + 1].kernel,
            &layers[i + 2].kernel,
            &g_current,
        )?;
        grads.layers[i + 1].kernel = gk_a;
        grads.layers[i + 2].kernel = gk_b;
        let (g_up, g_skip) = split_channels(&g_joined, config.channels(l))?;
        skip_grads[l] = Some(g_skip);
        let (g_below, gk_up) = upconv2_backward(&dec.below, &layers[i].kernel, &g_up)?;
        grads.layers[i].kernel = gk_up;
        g_current = g_below;
    }

    // g_current now holds the gradient of the bottom encoder output.
    let mut g_out = g_current;
    for l in (0..depth).rev() {
        let enc = &tape.encoder[l];
        let (g_in, gk_a, gk_b) =
            block_backward(enc, &layers[2 * l].kernel, &layers[2 * l + 1].kernel, &g_out)?;
        grads.layers[2 * l].kernel = gk_a;
        grads.layers[2 * l + 1].kernel = gk_b;
        if l == 0 {
            break;
        }
        let below_shape = tape.encoder[l - 1].pre_b.shape();
        let mut g = maxpool2_backward(&tape.pools[l - 1], &g_in, below_shape)?;
        if let Some(skip) = skip_grads[l - 1].take() {
            g.add_assign(&skip)?;
        }
        g_out = g;
    }
    Ok(grads)
}
