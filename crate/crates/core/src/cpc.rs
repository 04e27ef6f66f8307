//! Contrastive predictive coding over feature grids.
//!
//! The context network is row-causal: the context vector at grid row `r` depends only
//! on feature rows strictly above `r`. Block A shifts the grid down one row before a
//! masked convolution whose kernel keeps only rows at or above its center; every later
//! layer keeps the same property.

use log::info;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment_map, center_unit_range, flip_horizontal, flip_vertical, make_cpc_grid_jittered, AugmentConfig, Patch};
use crate::encoder::{Encoder, FeatureGrid};
use crate::error::{argument, config, Error, Result};
use crate::layers::{
    gate, gate_backward, relu, relu_backward, Conv2d, ConvTape, Linear, NormMode, NormTape,
    RowBatchNorm,
};
use crate::params::{zeros_like, Adam, Parameterized};
use crate::profile::Profile;
use crate::registry::Registry;
use crate::tensor::{log_sum_exp, matmul, matmul_a_bt, matmul_at_b_acc, softmax, Nhwc, Tensor};

/// Zero-pad the top row and drop the bottom row of every item.
pub fn pad_downshift(x: &Nhwc) -> Nhwc {
    let mut y = Nhwc::zeros(x.n, x.h, x.w, x.c);
    let row = x.w * x.c;
    for n in 0..x.n {
        let src = x.item(n);
        let base = n * x.item_len();
        if x.h > 1 {
            y.data[base + row..base + x.h * row].copy_from_slice(&src[..(x.h - 1) * row]);
        }
    }
    y
}

fn pad_downshift_backward(dy: &Nhwc) -> Nhwc {
    let mut dx = Nhwc::zeros(dy.n, dy.h, dy.w, dy.c);
    let row = dy.w * dy.c;
    for n in 0..dy.n {
        let base = n * dy.item_len();
        if dy.h > 1 {
            let src = dy.data[base + row..base + dy.h * row].to_vec();
            dx.data[base..base + (dy.h - 1) * row].copy_from_slice(&src);
        }
    }
    dx
}

/// Pad-and-downshift, 7×7 masked convolution, row normalization, gated activation.
#[derive(Clone, Debug)]
pub struct BlockA {
    pub conv: Conv2d,
    pub norm: RowBatchNorm,
}

/// 3×3 masked convolution, row normalization, gated activation, residual add.
#[derive(Clone, Debug)]
pub struct BlockB {
    pub conv: Conv2d,
    pub norm: RowBatchNorm,
}

/// ReLU, 1×1 convolution back to the feature width, row normalization, ReLU.
#[derive(Clone, Debug)]
pub struct HeadBlock {
    pub conv: Conv2d,
    pub norm: RowBatchNorm,
}

pub struct BlockTape {
    conv: ConvTape,
    norm: NormTape,
    normed: Nhwc,
}

pub struct HeadTape {
    input: Nhwc,
    conv: ConvTape,
    norm: NormTape,
    normed: Nhwc,
}

impl BlockA {
    pub fn forward(&self, x: &Nhwc, mode: NormMode) -> Result<(Nhwc, BlockTape)> {
        if x.c != self.conv.cin {
            return Err(config(format!(
                "block A expects {} channels, got {}",
                self.conv.cin, x.c
            )));
        }
        let shifted = pad_downshift(x);
        let (c, conv) = self.conv.forward(&shifted);
        let (normed, norm) = self.norm.forward(&c, mode);
        Ok((gate(&normed), BlockTape { conv, norm, normed }))
    }

    fn backward(&self, tape: &BlockTape, dy: &Nhwc, grads: &mut BlockA) -> Nhwc {
        let dn = gate_backward(&tape.normed, dy);
        let dc = self.norm.backward(&tape.norm, &dn, &mut grads.norm);
        let ds = self
            .conv
            .backward(&tape.conv, &dc, &mut grads.conv, true)
            .expect("input gradient requested");
        pad_downshift_backward(&ds)
    }
}

impl BlockB {
    pub fn forward(&self, x: &Nhwc, mode: NormMode) -> Result<(Nhwc, BlockTape)> {
        if x.c != self.conv.cin {
            return Err(config(format!(
                "block B expects {} channels, got {}",
                self.conv.cin, x.c
            )));
        }
        let (c, conv) = self.conv.forward(x);
        let (normed, norm) = self.norm.forward(&c, mode);
        let mut y = gate(&normed);
        for (o, i) in y.data.iter_mut().zip(&x.data) {
            *o += i;
        }
        Ok((y, BlockTape { conv, norm, normed }))
    }

    fn backward(&self, tape: &BlockTape, dy: &Nhwc, grads: &mut BlockB) -> Nhwc {
        let dn = gate_backward(&tape.normed, dy);
        let dc = self.norm.backward(&tape.norm, &dn, &mut grads.norm);
        let mut dx = self
            .conv
            .backward(&tape.conv, &dc, &mut grads.conv, true)
            .expect("input gradient requested");
        for (d, g) in dx.data.iter_mut().zip(&dy.data) {
            *d += g;
        }
        dx
    }
}

impl HeadBlock {
    fn forward(&self, x: &Nhwc, mode: NormMode) -> (Nhwc, HeadTape) {
        let r = relu(x);
        let (c, conv) = self.conv.forward(&r);
        let (normed, norm) = self.norm.forward(&c, mode);
        let y = relu(&normed);
        (
            y,
            HeadTape {
                input: x.clone(),
                conv,
                norm,
                normed,
            },
        )
    }

    fn backward(&self, tape: &HeadTape, dy: &Nhwc, grads: &mut HeadBlock) -> Nhwc {
        let dn = relu_backward(&tape.normed, dy);
        let dc = self.norm.backward(&tape.norm, &dn, &mut grads.norm);
        let dr = self
            .conv
            .backward(&tape.conv, &dc, &mut grads.conv, true)
            .expect("input gradient requested");
        relu_backward(&tape.input, &dr)
    }
}

/// Masked-convolution context network: block A, `b_blocks` × block B, head block.
#[derive(Clone, Debug)]
pub struct ContextNet {
    pub block_a: BlockA,
    pub blocks_b: Vec<BlockB>,
    pub head: HeadBlock,
}

pub struct ContextTape {
    a: BlockTape,
    b: Vec<BlockTape>,
    head: HeadTape,
}

/// `R × C × D` context vectors, same spatial shape as the feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextGrid {
    pub values: Nhwc,
}

impl ContextNet {
    pub fn new<R: Rng>(profile: &Profile, rng: &mut R) -> Self {
        let d = profile.feature_dim();
        let g = profile.gate_width;
        let rows = profile.grid_size();
        let block_a = BlockA {
            conv: Conv2d::new("context.a.conv", 7, 7, d, 2 * g, true, false, rng),
            norm: RowBatchNorm::new("context.a.norm", rows, 2 * g),
        };
        let blocks_b = (0..profile.b_blocks)
            .map(|i| BlockB {
                conv: Conv2d::new(&format!("context.b{i}.conv"), 3, 3, g, 2 * g, true, false, rng),
                norm: RowBatchNorm::new(&format!("context.b{i}.norm"), rows, 2 * g),
            })
            .collect();
        let head = HeadBlock {
            conv: Conv2d::new("context.head.conv", 1, 1, g, d, false, false, rng),
            norm: RowBatchNorm::new("context.head.norm", rows, d),
        };
        Self {
            block_a,
            blocks_b,
            head,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.block_a.conv.cin
    }

    pub fn layer_count(&self) -> usize {
        2 + self.blocks_b.len()
    }

    pub fn rows(&self) -> usize {
        self.block_a.norm.rows()
    }

    pub fn forward(&self, x: &Nhwc, mode: NormMode) -> Result<(Nhwc, ContextTape)> {
        if x.h != self.rows() {
            return Err(config(format!(
                "context network built for {} rows, got {}",
                self.rows(),
                x.h
            )));
        }
        let (mut h, a) = self.block_a.forward(x, mode)?;
        let mut b = Vec::with_capacity(self.blocks_b.len());
        for blk in &self.blocks_b {
            let (y, t) = blk.forward(&h, mode)?;
            h = y;
            b.push(t);
        }
        let (y, head) = self.head.forward(&h, mode);
        Ok((y, ContextTape { a, b, head }))
    }

    /// Context grid for one feature grid using the frozen running statistics.
    pub fn context_forward(&self, features: &FeatureGrid) -> Result<ContextGrid> {
        let (y, _) = self.forward(&features.values, NormMode::Running)?;
        Ok(ContextGrid { values: y })
    }

    pub fn backward(&self, tape: &ContextTape, dy: &Nhwc, grads: &mut ContextNet) -> Nhwc {
        let mut d = self.head.backward(&tape.head, dy, &mut grads.head);
        for (i, blk) in self.blocks_b.iter().enumerate().rev() {
            d = blk.backward(&tape.b[i], &d, &mut grads.blocks_b[i]);
        }
        self.block_a.backward(&tape.a, &d, &mut grads.block_a)
    }

    pub fn update_running(&mut self, tape: &ContextTape) {
        self.block_a.norm.update_running(&tape.a.norm);
        for (blk, t) in self.blocks_b.iter_mut().zip(&tape.b) {
            blk.norm.update_running(&t.norm);
        }
        self.head.norm.update_running(&tape.head.norm);
    }

    pub fn masks_hold(&self) -> bool {
        self.block_a.conv.mask_holds() && self.blocks_b.iter().all(|b| b.conv.mask_holds())
    }
}

impl Parameterized for ContextNet {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.block_a.conv.params();
        v.extend(self.block_a.norm.params());
        for b in &self.blocks_b {
            v.extend(b.conv.params());
            v.extend(b.norm.params());
        }
        v.extend(self.head.conv.params());
        v.extend(self.head.norm.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.block_a.conv.params_mut();
        v.extend(self.block_a.norm.params_mut());
        for b in self.blocks_b.iter_mut() {
            v.extend(b.conv.params_mut());
            v.extend(b.norm.params_mut());
        }
        v.extend(self.head.conv.params_mut());
        v.extend(self.head.norm.params_mut());
        v
    }

    fn buffers(&self) -> Vec<&Tensor> {
        let mut v = self.block_a.norm.buffers();
        for b in &self.blocks_b {
            v.extend(b.norm.buffers());
        }
        v.extend(self.head.norm.buffers());
        v
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.block_a.norm.buffers_mut();
        for b in self.blocks_b.iter_mut() {
            v.extend(b.norm.buffers_mut());
        }
        v.extend(self.head.norm.buffers_mut());
        v
    }

    fn constrain(&mut self) {
        self.block_a.conv.constrain();
        for b in self.blocks_b.iter_mut() {
            b.conv.constrain();
        }
    }
}

/// One independent affine predictor per row offset `k = 1..=max_offset`.
#[derive(Clone, Debug)]
pub struct PredictionHeads {
    pub heads: Vec<Linear>,
}

impl PredictionHeads {
    pub fn new<R: Rng>(context_dim: usize, feature_dim: usize, max_offset: usize, rng: &mut R) -> Self {
        // Small initial predictions keep the untrained loss at chance level.
        let heads = (1..=max_offset)
            .map(|k| Linear::new(&format!("heads.w{k}"), context_dim, feature_dim, 0.05, rng))
            .collect();
        Self { heads }
    }

    pub fn max_offset(&self) -> usize {
        self.heads.len()
    }

    /// Predicted features for row `t + k`, one vector per column, from context row `t`.
    pub fn predict_future(&self, context: &ContextGrid, t: usize, k: usize) -> Result<Vec<Vec<f64>>> {
        if k == 0 || k > self.max_offset() {
            return Err(argument(format!("offset {k} outside 1..={}", self.max_offset())));
        }
        let rows = context.values.h;
        if t + k >= rows {
            return Err(argument(format!("row {t} + offset {k} beyond {rows} rows")));
        }
        let head = &self.heads[k - 1];
        Ok((0..context.values.w)
            .map(|c| head.forward(context.values.pixel(0, t, c)))
            .collect())
    }
}

impl Parameterized for PredictionHeads {
    fn params(&self) -> Vec<&Tensor> {
        self.heads.iter().flat_map(|h| h.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.heads.iter_mut().flat_map(|h| h.params_mut()).collect()
    }
}

/// Mean over predictions of `-log softmax` of the positive among `{positive} ∪ negatives`.
pub fn info_nce_loss(
    predictions: &[Vec<f64>],
    positives: &[Vec<f64>],
    negatives: &[Vec<Vec<f64>>],
) -> Result<f64> {
    info_nce_with_grad(predictions, positives, negatives).map(|(l, _)| l)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfoNceGrads {
    pub predictions: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<Vec<f64>>>,
}

pub fn info_nce_with_grad(
    predictions: &[Vec<f64>],
    positives: &[Vec<f64>],
    negatives: &[Vec<Vec<f64>>],
) -> Result<(f64, InfoNceGrads)> {
    if predictions.is_empty() {
        return Err(argument("no predictions"));
    }
    if predictions.len() != positives.len() || predictions.len() != negatives.len() {
        return Err(argument("predictions, positives and negatives must align"));
    }
    let d = predictions[0].len();
    let p_count = predictions.len() as f64;
    let mut grads = InfoNceGrads {
        predictions: Vec::new(),
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    let mut total = 0.0;
    for ((pred, pos), negs) in predictions.iter().zip(positives).zip(negatives) {
        if negs.is_empty() {
            return Err(argument("every prediction needs at least one negative"));
        }
        if pred.len() != d || pos.len() != d || negs.iter().any(|n| n.len() != d) {
            return Err(argument("all vectors must share one dimension"));
        }
        let mut scores = Vec::with_capacity(negs.len() + 1);
        scores.push(crate::tensor::dot(pos, pred));
        scores.extend(negs.iter().map(|n| crate::tensor::dot(n, pred)));
        total += log_sum_exp(&scores) - scores[0];
        let pi = softmax(&scores);
        let mut dpred = vec![0.0; d];
        let cands = std::iter::once(pos).chain(negs.iter());
        for (j, cand) in cands.enumerate() {
            let w = (pi[j] - if j == 0 { 1.0 } else { 0.0 }) / p_count;
            for (g, c) in dpred.iter_mut().zip(cand) {
                *g += w * c;
            }
        }
        grads.predictions.push(dpred);
        let scale = |w: f64| pred.iter().map(|v| w * v / p_count).collect::<Vec<f64>>();
        grads.positives.push(scale(pi[0] - 1.0));
        grads
            .negatives
            .push((1..pi.len()).map(|j| scale(pi[j])).collect());
    }
    Ok((total / p_count, grads))
}

/// How negatives are drawn for each prediction out of the batch pool.
pub trait NegativeSampler: Send + Sync {
    fn name(&self) -> String;
    /// `None` means every other pool entry is a negative.
    fn draw(&self, positive: usize, pool: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>>;
    /// Negatives per prediction for a pool of the given size.
    fn negatives_per_prediction(&self, pool: usize) -> usize;
}

pub struct DenseNegatives;

impl NegativeSampler for DenseNegatives {
    fn name(&self) -> String {
        "dense".into()
    }
    fn draw(&self, _positive: usize, _pool: usize, _rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
        None
    }
    fn negatives_per_prediction(&self, pool: usize) -> usize {
        pool - 1
    }
}

pub struct SampledNegatives {
    pub count: usize,
}

impl NegativeSampler for SampledNegatives {
    fn name(&self) -> String {
        format!("sampled:{}", self.count)
    }
    fn draw(&self, positive: usize, pool: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
        let k = self.count.min(pool - 1);
        Some(
            sample(rng, pool - 1, k)
                .into_iter()
                .map(|i| if i >= positive { i + 1 } else { i })
                .collect(),
        )
    }
    fn negatives_per_prediction(&self, pool: usize) -> usize {
        self.count.min(pool - 1)
    }
}

pub fn negative_samplers() -> Registry<dyn NegativeSampler> {
    let mut r: Registry<dyn NegativeSampler> = Registry::new("negative sampler");
    r.register("dense", "all other feature vectors in the mini-batch", |_| {
        Ok(Box::new(DenseNegatives))
    });
    r.register("sampled", "K random negatives from the mini-batch (sampled:K)", |arg| {
        let count = arg
            .ok_or_else(|| config("sampled negatives need a count, e.g. sampled:64"))?
            .parse::<usize>()
            .map_err(|e| config(format!("bad negative count: {e}")))?;
        if count == 0 {
            return Err(config("negative count must be positive"));
        }
        Ok(Box::new(SampledNegatives { count }))
    });
    r
}

/// Batched contrastive loss against a shared pool of feature vectors.
///
/// `predictions` is `P × d`, `pool` is `M × d`, `targets[p]` indexes the positive in
/// the pool. Returns the mean loss and gradients for the predictions and the pool.
pub fn pooled_info_nce(
    predictions: &[f64],
    targets: &[usize],
    pool: &[f64],
    d: usize,
    sampler: &dyn NegativeSampler,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let p = targets.len();
    let m = pool.len() / d;
    if m < 2 {
        return Err(argument("pool needs at least one negative"));
    }
    let inv_p = 1.0 / p as f64;
    let mut dpred = vec![0.0; p * d];
    let mut dpool = vec![0.0; m * d];
    let mut total = 0.0;
    let draws: Vec<Option<Vec<usize>>> =
        targets.iter().map(|&t| sampler.draw(t, m, rng)).collect();
    if draws.iter().all(|d| d.is_none()) {
        let mut scores = vec![0.0; p * m];
        matmul_a_bt(predictions, pool, &mut scores, p, d, m);
        for (i, &t) in targets.iter().enumerate() {
            let row = &mut scores[i * m..(i + 1) * m];
            let lse = log_sum_exp(row);
            total += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp() * inv_p;
            }
            row[t] -= inv_p;
        }
        matmul(&scores, pool, &mut dpred, p, m, d);
        matmul_at_b_acc(&scores, predictions, &mut dpool, p, m, d);
    } else {
        for (i, (&t, draw)) in targets.iter().zip(&draws).enumerate() {
            let mut cands = vec![t];
            cands.extend(draw.clone().unwrap_or_else(|| (0..m).filter(|&j| j != t).collect()));
            let pred = &predictions[i * d..(i + 1) * d];
            let scores: Vec<f64> = cands
                .iter()
                .map(|&j| crate::tensor::dot(&pool[j * d..(j + 1) * d], pred))
                .collect();
            total += log_sum_exp(&scores) - scores[0];
            let pi = softmax(&scores);
            for (j, &c) in cands.iter().enumerate() {
                let w = (pi[j] - if j == 0 { 1.0 } else { 0.0 }) * inv_p;
                for q in 0..d {
                    dpred[i * d + q] += w * pool[c * d + q];
                    dpool[c * d + q] += w * pred[q];
                }
            }
        }
    }
    Ok((total * inv_p, dpred, dpool))
}

/// Encoder, context network and prediction heads trained together.
#[derive(Clone, Debug)]
pub struct CpcModel {
    pub encoder: Encoder,
    pub context: ContextNet,
    pub heads: PredictionHeads,
}

impl CpcModel {
    pub fn new<R: Rng>(profile: &Profile, rng: &mut R) -> Result<Self> {
        profile.validate()?;
        let encoder = Encoder::new(profile, rng);
        let context = ContextNet::new(profile, rng);
        let d = profile.feature_dim();
        let heads = PredictionHeads::new(d, d, profile.max_offset, rng);
        Ok(Self {
            encoder,
            context,
            heads,
        })
    }

    /// Every `(item, t, k, column)` prediction, ordered by item, then offset, row, column.
    fn prediction_index(&self, n: usize, rows: usize, cols: usize) -> Vec<(usize, usize, usize, usize)> {
        let mut idx = Vec::new();
        for b in 0..n {
            for k in 1..=self.heads.max_offset() {
                for t in 0..rows.saturating_sub(k) {
                    for c in 0..cols {
                        idx.push((b, t, k, c));
                    }
                }
            }
        }
        idx
    }

    /// Contrastive loss and gradients for a batch of sub-patch grids.
    ///
    /// `items` holds `n_tiles · rows · cols` sub-patches in tile-major, row-major order.
    pub fn loss_and_grads(
        &self,
        items: &Nhwc,
        n_tiles: usize,
        rows: usize,
        cols: usize,
        mode: NormMode,
        sampler: &dyn NegativeSampler,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, CpcModel, ContextTape)> {
        let d = self.encoder.dim();
        let (z, enc_tape) = self.encoder.forward(items)?;
        let features = Nhwc::from_vec(n_tiles, rows, cols, d, z);
        let (ctx, ctx_tape) = self.context.forward(&features, mode)?;
        let dc = ctx.c;

        let index = self.prediction_index(n_tiles, rows, cols);
        let mut preds = Vec::with_capacity(index.len() * d);
        let mut targets = Vec::with_capacity(index.len());
        let mut spans = Vec::new();
        for k in 1..=self.heads.max_offset() {
            let sel: Vec<usize> = (0..index.len()).filter(|&i| index[i].2 == k).collect();
            let mut inputs = Vec::with_capacity(sel.len() * dc);
            for &i in &sel {
                let (b, t, _, c) = index[i];
                inputs.extend_from_slice(ctx.pixel(b, t, c));
            }
            let out = self.heads.heads[k - 1].forward_batch(&inputs, sel.len());
            spans.push((k, preds.len() / d, sel.len(), inputs));
            preds.extend(out);
            for &i in &sel {
                let (b, t, _, c) = index[i];
                targets.push((b * rows + t + k) * cols + c);
            }
        }

        let (loss, dpred, dpool) =
            pooled_info_nce(&preds, &targets, &features.data, d, sampler, rng)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite contrastive loss {loss}")));
        }

        let mut grads = zeros_like(self);
        let mut dctx = Nhwc::zeros(n_tiles, rows, cols, dc);
        for (k, start, count, inputs) in &spans {
            let dy = &dpred[start * d..(start + count) * d];
            let dx = self.heads.heads[k - 1].backward_batch(inputs, dy, *count, &mut grads.heads.heads[k - 1]);
            let mut j = 0;
            for &(b, t, kk, c) in &index {
                if kk != *k {
                    continue;
                }
                let dst = dctx.pixel_mut(b, t, c);
                for (o, s) in dst.iter_mut().zip(&dx[j * dc..(j + 1) * dc]) {
                    *o += s;
                }
                j += 1;
            }
        }
        let mut dfeat = self.context.backward(&ctx_tape, &dctx, &mut grads.context);
        for (a, b) in dfeat.data.iter_mut().zip(&dpool) {
            *a += b;
        }
        self.encoder.backward(&enc_tape, &dfeat.data, &mut grads.encoder);
        Ok((loss, grads, ctx_tape))
    }

    pub fn loss(
        &self,
        items: &Nhwc,
        n_tiles: usize,
        rows: usize,
        cols: usize,
        mode: NormMode,
        sampler: &dyn NegativeSampler,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        self.loss_and_grads(items, n_tiles, rows, cols, mode, sampler, rng)
            .map(|(l, _, _)| l)
    }
}

impl Parameterized for CpcModel {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.encoder.params();
        v.extend(self.context.params());
        v.extend(self.heads.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.params_mut();
        v.extend(self.context.params_mut());
        v.extend(self.heads.params_mut());
        v
    }
    fn buffers(&self) -> Vec<&Tensor> {
        self.context.buffers()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        self.context.buffers_mut()
    }
    fn constrain(&mut self) {
        self.context.constrain();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpcConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Tiles drawn per epoch; `None` uses the whole corpus.
    pub tiles_per_epoch: Option<usize>,
    pub negatives: String,
    pub tile_flips: bool,
    pub spatial_jitter: usize,
    pub sub_augment: AugmentConfig,
    pub seed: u64,
}

impl Default for CpcConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-3,
            epochs: 20,
            tiles_per_epoch: None,
            negatives: "dense".into(),
            tile_flips: true,
            spatial_jitter: 4,
            sub_augment: AugmentConfig::cpc_default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpcHistory {
    pub epoch_losses: Vec<f64>,
    pub batch_losses: Vec<f64>,
    /// `ln(K + 1)` for the negatives used by a full batch.
    pub chance_loss: f64,
}

/// Build the augmented sub-patch batch for a list of tiles.
fn build_batch(
    tiles: &[&Patch],
    profile: &Profile,
    cfg: &CpcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Nhwc, usize, usize)> {
    let mut grids = Vec::with_capacity(tiles.len());
    let (mut rows, mut cols) = (0, 0);
    for tile in tiles {
        let mut t = (*tile).clone();
        if cfg.tile_flips {
            if rng.gen_bool(0.5) {
                t.pixels = flip_horizontal(&t.pixels);
            }
            if rng.gen_bool(0.5) {
                t.pixels = flip_vertical(&t.pixels);
            }
        }
        let grid = make_cpc_grid_jittered(&t, profile.sub_size, profile.sub_overlap, cfg.spatial_jitter, rng)?;
        rows = grid.rows;
        cols = grid.cols;
        if cfg.sub_augment.is_identity() {
            grids.push(grid.items);
        } else {
            let subs: Vec<Nhwc> = (0..grid.rows * grid.cols)
                .map(|i| {
                    let one = Nhwc::from_vec(1, grid.sub_size, grid.sub_size, 3, grid.items.item(i).to_vec());
                    augment_map(&one, &cfg.sub_augment, rng)
                })
                .collect();
            grids.push(Nhwc::stack(&subs));
        }
    }
    let mut batch = Nhwc::stack(&grids);
    center_unit_range(&mut batch);
    Ok((batch, rows, cols))
}

/// Adam pretraining of encoder, context network and heads on unlabeled tiles.
pub fn cpc_pretrain(
    tiles: &[Patch],
    profile: &Profile,
    mut model: CpcModel,
    cfg: &CpcConfig,
) -> Result<(CpcModel, CpcHistory)> {
    if tiles.is_empty() {
        return Err(argument("CPC needs at least one tile"));
    }
    if cfg.batch_size == 0 {
        return Err(config("batch size must be positive"));
    }
    profile.validate()?;
    if let Some(t) = tiles.iter().find(|t| t.size() != profile.tile_size) {
        return Err(config(format!(
            "tile from {} is {}px, profile expects {}",
            t.source_id,
            t.size(),
            profile.tile_size
        )));
    }
    let sampler = negative_samplers().create(&cfg.negatives)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate);
    let rows = profile.grid_size();
    let full = cfg.batch_size.min(tiles.len()) * rows * rows;
    let mut history = CpcHistory {
        epoch_losses: Vec::new(),
        batch_losses: Vec::new(),
        chance_loss: ((sampler.negatives_per_prediction(full) + 1) as f64).ln(),
    };
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let take = cfg.tiles_per_epoch.unwrap_or(tiles.len()).min(tiles.len());
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order[..take].chunks(cfg.batch_size) {
            let batch_tiles: Vec<&Patch> = chunk.iter().map(|&i| &tiles[i]).collect();
            let (items, r, c) = build_batch(&batch_tiles, profile, cfg, &mut rng)?;
            let result = model.loss_and_grads(&items, chunk.len(), r, c, NormMode::Batch, sampler.as_ref(), &mut rng);
            let (loss, grads, tape) = match result {
                Ok(v) => v,
                Err(Error::Numeric(msg)) => {
                    let ids: Vec<String> = batch_tiles
                        .iter()
                        .map(|t| format!("{}@{:?}", t.source_id, t.origin))
                        .collect();
                    return Err(Error::Numeric(format!(
                        "{msg} at epoch {epoch}; batch tiles: {}",
                        ids.join(" ")
                    )));
                }
                Err(e) => return Err(e),
            };
            opt.step(&mut model, &grads);
            model.context.update_running(&tape);
            history.batch_losses.push(loss);
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches.max(1) as f64;
        info!("cpc epoch {epoch}: loss {mean:.4} (chance {:.4})", history.chance_loss);
        history.epoch_losses.push(mean);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::checksum;

    fn random_map(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> Nhwc {
        Nhwc::from_vec(n, h, w, c, (0..n * h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn pad_downshift_examples() {
        let x = Nhwc::from_vec(1, 2, 1, 1, vec![3.0, 5.0]);
        assert_eq!(pad_downshift(&x).data, vec![0.0, 3.0]);
        let z = Nhwc::zeros(2, 7, 7, 3);
        assert_eq!(pad_downshift(&z), z);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = random_map(&mut rng, 1, 7, 7, 2);
        let s = pad_downshift(&g);
        for c in 0..7 {
            assert_eq!(s.pixel(0, 0, c), &[0.0, 0.0]);
            for r in 1..7 {
                assert_eq!(s.pixel(0, r, c), g.pixel(0, r - 1, c));
            }
        }
    }

    #[test]
    fn block_channel_arithmetic_and_gate_zero() {
        let p = Profile::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = ContextNet::new(&p, &mut rng);
        let x = random_map(&mut rng, 2, 7, 7, 64);
        let (y, _) = net.block_a.forward(&x, NormMode::Batch).unwrap();
        assert_eq!(y.c, 8);
        assert_eq!(net.block_a.conv.cout, 16);
        let g = p.gate_width;
        let cout = net.block_a.conv.cout;
        for (i, w) in net.block_a.conv.weight.data.iter_mut().enumerate() {
            if i % cout < g {
                *w = 0.0;
            }
        }
        let (y0, _) = net.block_a.forward(&x, NormMode::Batch).unwrap();
        assert!(y0.data.iter().all(|v| *v == 0.0));
        assert!(net.block_a.forward(&random_map(&mut rng, 1, 7, 7, 5), NormMode::Batch).is_err());
    }

    #[test]
    fn block_b_zero_is_identity() {
        let p = Profile::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = ContextNet::new(&p, &mut rng);
        let blk = &mut net.blocks_b[0];
        blk.conv.weight.data.fill(0.0);
        blk.norm.gamma.data.fill(0.0);
        blk.norm.beta.data.fill(0.0);
        let x = random_map(&mut rng, 2, 7, 7, 8);
        let (y, _) = blk.forward(&x, NormMode::Batch).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn paper_profile_context_shapes() {
        let p = Profile::paper();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ContextNet::new(&p, &mut rng);
        assert_eq!(net.layer_count(), 12);
        let x = random_map(&mut rng, 1, 7, 7, 1024);
        let ctx = net.context_forward(&FeatureGrid { values: x }).unwrap();
        assert_eq!((ctx.values.h, ctx.values.w, ctx.values.c), (7, 7, 1024));
    }

    #[test]
    fn context_is_row_causal() {
        let p = Profile::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = ContextNet::new(&p, &mut rng);
        for _ in 0..50 {
            let x = random_map(&mut rng, 1, 7, 7, 64);
            let r0 = rng.gen_range(0..7);
            let mut x2 = x.clone();
            for r in r0..7 {
                for c in 0..7 {
                    for v in x2.pixel_mut(0, r, c) {
                        *v += rng.gen_range(-5.0..5.0);
                    }
                }
            }
            let (a, _) = net.forward(&x, NormMode::Running).unwrap();
            let (b, _) = net.forward(&x2, NormMode::Running).unwrap();
            for r in 0..=r0 {
                for c in 0..7 {
                    assert_eq!(a.pixel(0, r, c), b.pixel(0, r, c));
                }
            }
        }
    }

    #[test]
    fn prediction_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut heads = PredictionHeads::new(4, 4, 3, &mut rng);
        let ctx = ContextGrid {
            values: random_map(&mut rng, 1, 5, 3, 4),
        };
        for h in heads.heads.iter_mut() {
            h.weight.data.fill(0.0);
            for i in 0..4 {
                h.weight.data[i * 4 + i] = 1.0;
            }
        }
        let p = heads.predict_future(&ctx, 1, 2).unwrap();
        for c in 0..3 {
            assert_eq!(p[c], ctx.values.pixel(0, 1, c));
        }
        heads.heads[0].weight.data.fill(0.0);
        heads.heads[0].bias.data = vec![1.0, -1.0, 0.5, 2.0];
        let p = heads.predict_future(&ctx, 0, 1).unwrap();
        assert!(p.iter().all(|v| v == &vec![1.0, -1.0, 0.5, 2.0]));
        assert!(heads.predict_future(&ctx, 0, 4).is_err());
        assert!(heads.predict_future(&ctx, 3, 2).is_err());
        assert!(heads.predict_future(&ctx, 0, 0).is_err());
    }

    #[test]
    fn info_nce_closed_forms() {
        let pred = vec![vec![1.0, 0.0]];
        let pos = vec![vec![0.0, 1.0]];
        let negs = vec![vec![vec![0.0, 2.0], vec![0.0, -1.0], vec![0.0, 3.0]]];
        let l = info_nce_loss(&pred, &pos, &negs).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let l = info_nce_loss(&[vec![1.0]], &[vec![2.0]], &[vec![vec![1.0], vec![0.5]]]).unwrap();
        let want = -((2f64).exp() / (2f64.exp() + 1f64.exp() + 0.5f64.exp())).ln();
        assert!((l - want).abs() < 1e-12);
        let big = info_nce_loss(&[vec![1.0]], &[vec![1e3]], &[vec![vec![1.0]]]).unwrap();
        assert!(big >= 0.0 && big < 1e-12);
        assert!(info_nce_loss(&pred, &pos, &[vec![]]).is_err());
    }

    #[test]
    fn pooled_loss_matches_listwise_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 3;
        let pool: Vec<f64> = (0..5 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let preds: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let targets = vec![1, 4];
        let (l, _, _) = pooled_info_nce(&preds, &targets, &pool, d, &DenseNegatives, &mut rng).unwrap();
        let vecs: Vec<Vec<f64>> = pool.chunks(d).map(|c| c.to_vec()).collect();
        let p: Vec<Vec<f64>> = preds.chunks(d).map(|c| c.to_vec()).collect();
        let pos = vec![vecs[1].clone(), vecs[4].clone()];
        let negs = vec![
            vecs.iter().enumerate().filter(|(i, _)| *i != 1).map(|(_, v)| v.clone()).collect(),
            vecs.iter().enumerate().filter(|(i, _)| *i != 4).map(|(_, v)| v.clone()).collect(),
        ];
        let want = info_nce_loss(&p, &pos, &negs).unwrap();
        assert!((l - want).abs() < 1e-12);
        let all = SampledNegatives { count: 100 };
        let (l2, _, _) = pooled_info_nce(&preds, &targets, &pool, d, &all, &mut rng).unwrap();
        assert!((l2 - want).abs() < 1e-12);
    }

    #[test]
    fn sampler_registry() {
        let r = negative_samplers();
        assert_eq!(r.create("dense").unwrap().name(), "dense");
        assert_eq!(r.create("sampled:8").unwrap().negatives_per_prediction(100), 8);
        assert!(r.create("sampled").is_err());
        assert!(r.create("hard").is_err());
        let s = SampledNegatives { count: 5 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = s.draw(3, 10, &mut rng).unwrap();
        assert_eq!(d.len(), 5);
        assert!(d.iter().all(|&i| i != 3 && i < 10));
    }

    fn tiny_tiles(n: usize, seed: u64) -> Vec<Patch> {
        let p = Profile::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| Patch {
                pixels: random_map(&mut rng, 1, p.tile_size, p.tile_size, 3),
                origin: (i, 0),
                source_id: format!("t{i}"),
            })
            .collect()
    }

    #[test]
    fn pretraining_is_deterministic_and_keeps_masks() {
        let p = Profile::tiny();
        let tiles = tiny_tiles(6, 1);
        let cfg = CpcConfig {
            batch_size: 3,
            epochs: 2,
            ..CpcConfig::default()
        };
        let m = CpcModel::new(&p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (a, ha) = cpc_pretrain(&tiles, &p, m.clone(), &cfg).unwrap();
        let (b, hb) = cpc_pretrain(&tiles, &p, m, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(checksum(&a), checksum(&b));
        assert!(a.context.masks_hold());
        assert_eq!(ha.epoch_losses.len(), 2);
    }

    #[test]
    fn untrained_loss_is_near_chance() {
        let p = Profile::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = CpcModel::new(&p, &mut rng).unwrap();
        let items = Nhwc::from_vec(
            4 * 49,
            16,
            16,
            3,
            (0..4 * 49 * 16 * 16 * 3).map(|_| rng.gen::<f64>()).collect(),
        );
        let loss = model
            .loss(&items, 4, 7, 7, NormMode::Batch, &DenseNegatives, &mut rng)
            .unwrap();
        let chance = ((4 * 49) as f64).ln();
        assert!((loss - chance).abs() / chance < 0.05, "loss {loss} chance {chance}");
    }
}
