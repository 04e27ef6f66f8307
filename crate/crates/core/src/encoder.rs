//! Patch encoder, feature grids and the frozen-mode dimension reducer.
//!
//! The encoder is a normalization-free stack of `{3×3 conv, ReLU, 2×2 average pool}`
//! stages followed by a global average pool.

use rand::Rng;

use crate::dataset::{center_unit_range, make_cpc_grid, Patch, PatchGrid};
use crate::error::{config, Result};
use crate::layers::{
    avg_pool2, avg_pool2_backward, global_avg_pool, global_avg_pool_backward, relu,
    relu_backward, Conv2d, ConvTape, Linear,
};
use crate::params::Parameterized;
use crate::profile::Profile;
use crate::tensor::{Nhwc, Tensor};

#[derive(Clone, Debug)]
pub struct Encoder {
    pub convs: Vec<Conv2d>,
    pub input_size: usize,
}

struct StageTape {
    conv: ConvTape,
    pre: Nhwc,
    act_shape: (usize, usize, usize, usize),
}

struct ChunkTape {
    stages: Vec<StageTape>,
    pooled_shape: (usize, usize, usize, usize),
}

/// Per-chunk tapes with each chunk's first item and length.
pub struct EncoderTape {
    chunks: Vec<(usize, usize, ChunkTape)>,
}

const CHUNK_ITEMS: usize = 32;

fn chunk_items(x: &Nhwc) -> Vec<(usize, Nhwc)> {
    let per = x.h * x.w * x.c;
    (0..x.n)
        .step_by(CHUNK_ITEMS)
        .map(|start| {
            let n = CHUNK_ITEMS.min(x.n - start);
            let data = x.data[start * per..(start + n) * per].to_vec();
            (start, Nhwc::from_vec(n, x.h, x.w, x.c, data))
        })
        .collect()
}

impl Encoder {
    pub fn new<R: Rng>(profile: &Profile, rng: &mut R) -> Self {
        let mut cin = 3;
        let convs = profile
            .encoder_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(&format!("encoder.conv{i}"), 3, 3, cin, w, false, true, rng);
                cin = w;
                c
            })
            .collect();
        Self {
            convs,
            input_size: profile.sub_size,
        }
    }

    pub fn dim(&self) -> usize {
        self.convs.last().map_or(0, |c| c.cout)
    }

    fn check(&self, x: &Nhwc) -> Result<()> {
        if x.h != self.input_size || x.w != self.input_size || x.c != 3 {
            return Err(config(format!(
                "encoder expects {s}×{s}×3 input, got {}×{}×{}",
                x.h,
                x.w,
                x.c,
                s = self.input_size
            )));
        }
        Ok(())
    }

    /// Forward pass over a batch; returns `n × dim` embeddings and the backward tape.
    /// Items go through in chunks so intermediate buffers stay cache sized.
    pub fn forward(&self, x: &Nhwc) -> Result<(Vec<f64>, EncoderTape)> {
        self.check(x)?;
        let mut z = Vec::with_capacity(x.n * self.dim());
        let mut chunks = Vec::new();
        for (start, part) in chunk_items(x) {
            let (zc, tape) = self.forward_chunk(&part);
            z.extend_from_slice(&zc);
            chunks.push((start, part.n, tape));
        }
        Ok((z, EncoderTape { chunks }))
    }

    fn forward_chunk(&self, x: &Nhwc) -> (Vec<f64>, ChunkTape) {
        let mut stages = Vec::with_capacity(self.convs.len());
        let mut act: Option<Nhwc> = None;
        for conv in &self.convs {
            let input = act.as_ref().unwrap_or(x);
            let (pre, tape) = conv.forward(input);
            let r = relu(&pre);
            let act_shape = (r.n, r.h, r.w, r.c);
            let pooled = avg_pool2(&r);
            stages.push(StageTape {
                conv: tape,
                pre,
                act_shape,
            });
            act = Some(pooled);
        }
        let last = act.expect("at least one stage");
        let z = global_avg_pool(&last);
        let tape = ChunkTape {
            stages,
            pooled_shape: (last.n, last.h, last.w, last.c),
        };
        (z, tape)
    }

    pub fn encode_batch(&self, x: &Nhwc) -> Result<Vec<f64>> {
        self.forward(x).map(|(z, _)| z)
    }

    pub fn encode_patch(&self, patch: &Patch) -> Result<Vec<f64>> {
        self.encode_batch(&patch.pixels)
    }

    /// Encode every sub-patch of a grid; entry `(r, c)` equals `encode_patch` of `grid[r][c]`.
    pub fn encode_grid(&self, grid: &PatchGrid) -> Result<FeatureGrid> {
        let z = self.encode_batch(&grid.items)?;
        Ok(FeatureGrid {
            values: Nhwc::from_vec(1, grid.rows, grid.cols, self.dim(), z),
        })
    }

    /// Accumulate parameter gradients for upstream gradient `dz` (`n × dim`).
    pub fn backward(&self, tape: &EncoderTape, dz: &[f64], grads: &mut Encoder) {
        let dim = self.dim();
        for (start, n, chunk) in &tape.chunks {
            self.backward_chunk(chunk, &dz[start * dim..(start + n) * dim], grads);
        }
    }

    fn backward_chunk(&self, tape: &ChunkTape, dz: &[f64], grads: &mut Encoder) {
        let mut d = global_avg_pool_backward(tape.pooled_shape, dz);
        for (i, (conv, st)) in self.convs.iter().zip(&tape.stages).enumerate().rev() {
            let dr = avg_pool2_backward(st.act_shape, &d);
            let dpre = relu_backward(&st.pre, &dr);
            match conv.backward(&st.conv, &dpre, &mut grads.convs[i], i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    /// Stack the sub-patch grids of several instance patches into one centered batch.
    pub fn instance_batch(&self, patches: &[&Patch], overlap: f64) -> Result<(Nhwc, usize)> {
        let mut grids = Vec::with_capacity(patches.len());
        let mut per = 0;
        for p in patches {
            let g = make_cpc_grid(p, self.input_size, overlap)?;
            per = g.rows * g.cols;
            grids.push(g.items);
        }
        let mut batch = Nhwc::stack(&grids);
        center_unit_range(&mut batch);
        Ok((batch, per))
    }

    /// Instance embedding: mean of the sub-patch embeddings over the instance's grid.
    pub fn embed_instances(&self, patches: &[&Patch], overlap: f64) -> Result<Vec<f64>> {
        let (batch, per) = self.instance_batch(patches, overlap)?;
        let z = self.encode_batch(&batch)?;
        Ok(mean_groups(&z, self.dim(), per))
    }

    pub fn embed_instances_train(
        &self,
        patches: &[&Patch],
        overlap: f64,
    ) -> Result<(Vec<f64>, InstanceTape)> {
        let (batch, per) = self.instance_batch(patches, overlap)?;
        let (z, tape) = self.forward(&batch)?;
        Ok((mean_groups(&z, self.dim(), per), InstanceTape { tape, per }))
    }

    pub fn backward_instances(&self, tape: &InstanceTape, d_emb: &[f64], grads: &mut Encoder) {
        let d = self.dim();
        let per = tape.per;
        let inv = 1.0 / per as f64;
        let mut dz = Vec::with_capacity(d_emb.len() * per);
        for row in d_emb.chunks(d) {
            for _ in 0..per {
                dz.extend(row.iter().map(|v| v * inv));
            }
        }
        self.backward(&tape.tape, &dz, grads);
    }
}

pub struct InstanceTape {
    tape: EncoderTape,
    per: usize,
}

fn mean_groups(z: &[f64], d: usize, per: usize) -> Vec<f64> {
    let groups = z.len() / (d * per);
    let mut out = vec![0.0; groups * d];
    for g in 0..groups {
        let dst = &mut out[g * d..(g + 1) * d];
        for k in 0..per {
            let src = &z[(g * per + k) * d..(g * per + k + 1) * d];
            for (o, s) in dst.iter_mut().zip(src) {
                *o += s;
            }
        }
        for o in dst.iter_mut() {
            *o /= per as f64;
        }
    }
    out
}

impl Parameterized for Encoder {
    fn params(&self) -> Vec<&Tensor> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

/// `R × C × D` per-location embeddings of one tile.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub values: Nhwc,
}

impl FeatureGrid {
    pub fn rows(&self) -> usize {
        self.values.h
    }
    pub fn cols(&self) -> usize {
        self.values.w
    }
    pub fn dim(&self) -> usize {
        self.values.c
    }
    pub fn at(&self, r: usize, c: usize) -> &[f64] {
        self.values.pixel(0, r, c)
    }
}

/// Trainable affine reduction applied to frozen features.
#[derive(Clone, Debug)]
pub struct Reducer {
    pub linear: Linear,
}

impl Reducer {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new("reducer", in_dim, out_dim, 1.0, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.linear.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.linear.out_dim()
    }

    pub fn reduce_features(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.in_dim() {
            return Err(config(format!(
                "reducer expects length {}, got {}",
                self.in_dim(),
                z.len()
            )));
        }
        Ok(self.linear.forward(z))
    }
}

impl Parameterized for Reducer {
    fn params(&self) -> Vec<&Tensor> {
        self.linear.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.linear.params_mut()
    }
}
