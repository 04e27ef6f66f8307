//! Named geometry and width presets.
//!
//! `paper` keeps the full-scale shapes (7×7×1024 feature grids, 12-layer context
//! network, 256-unit attention). `desk` scales widths by 1/16 so the whole pipeline
//! trains on a CPU. `tiny` exists for finite-difference checks.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    pub image_height: usize,
    pub image_width: usize,
    /// Side of a MIL instance patch, which is also the CPC tile.
    pub tile_size: usize,
    /// Side of a CPC sub-patch; the encoder input.
    pub sub_size: usize,
    pub sub_overlap: f64,
    /// Sub-patch overlap used when embedding a MIL instance.
    pub instance_overlap: f64,
    pub encoder_widths: Vec<usize>,
    pub gate_width: usize,
    pub b_blocks: usize,
    pub max_offset: usize,
    pub attention_hidden: usize,
    pub reduced_dim: usize,
}

impl Profile {
    pub fn paper() -> Self {
        Self {
            name: "paper".into(),
            image_height: 1536,
            image_width: 2048,
            tile_size: 256,
            sub_size: 64,
            sub_overlap: 0.5,
            instance_overlap: 0.5,
            encoder_widths: vec![64, 128, 256, 1024],
            gate_width: 128,
            b_blocks: 10,
            max_offset: 3,
            attention_hidden: 256,
            reduced_dim: 512,
        }
    }

    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            image_height: 512,
            image_width: 512,
            tile_size: 64,
            sub_size: 16,
            sub_overlap: 0.5,
            instance_overlap: 0.0,
            encoder_widths: vec![16, 32, 64],
            gate_width: 8,
            b_blocks: 4,
            max_offset: 3,
            attention_hidden: 16,
            reduced_dim: 32,
        }
    }

    pub fn tiny() -> Self {
        Self {
            name: "tiny".into(),
            image_height: 32,
            image_width: 32,
            tile_size: 16,
            sub_size: 8,
            sub_overlap: 0.5,
            instance_overlap: 0.5,
            encoder_widths: vec![2, 3, 4],
            gate_width: 2,
            b_blocks: 1,
            max_offset: 2,
            attention_hidden: 3,
            reduced_dim: 3,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(config(format!(
                "unknown profile '{other}' (known: {})",
                Self::names().join(", ")
            ))),
        }
    }

    pub fn names() -> Vec<&'static str> {
        vec!["paper", "desk", "tiny"]
    }

    pub fn feature_dim(&self) -> usize {
        *self.encoder_widths.last().expect("encoder needs at least one stage")
    }

    pub fn pre_gate_width(&self) -> usize {
        2 * self.gate_width
    }

    pub fn sub_stride(&self) -> usize {
        stride_for(self.sub_size, self.sub_overlap).unwrap_or(self.sub_size)
    }

    /// Side of the CPC grid cut from one tile.
    pub fn grid_size(&self) -> usize {
        (self.tile_size - self.sub_size) / self.sub_stride() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() {
            return Err(config("encoder needs at least one stage"));
        }
        if self.sub_size > self.tile_size {
            return Err(config("sub-patch larger than tile"));
        }
        let s = stride_for(self.sub_size, self.sub_overlap)?;
        if (self.tile_size - self.sub_size) % s != 0 {
            return Err(config(format!(
                "tile {} not divisible into {}px sub-patches at stride {s}",
                self.tile_size, self.sub_size
            )));
        }
        let si = stride_for(self.sub_size, self.instance_overlap)?;
        if (self.tile_size - self.sub_size) % si != 0 {
            return Err(config("instance sub-patch geometry not divisible"));
        }
        if self.sub_size >> self.encoder_widths.len() == 0 {
            return Err(config("sub-patch too small for the number of pooling stages"));
        }
        if self.max_offset == 0 || self.max_offset >= self.grid_size() {
            return Err(config("prediction offset must be in 1..grid rows"));
        }
        Ok(())
    }
}

/// Stride for a patch of `size` at fractional `overlap`; must be a positive integer.
pub fn stride_for(size: usize, overlap: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(config(format!("overlap {overlap} outside [0, 1)")));
    }
    let s = size as f64 * (1.0 - overlap);
    let r = s.round();
    if (s - r).abs() > 1e-9 || r < 1.0 {
        return Err(config(format!(
            "size {size} at overlap {overlap} gives non-integer stride {s}"
        )));
    }
    Ok(r as usize)
}
