//! Clip patchification and token assembly.
//!
//! A clip is C x T x W x H, row-major. Patchify slices it into s x s
//! spatial cells spanning `temporal_patch` consecutive frames and flattens
//! each cell in (channel, frame, x, y) order; rows are emitted frame-block
//! first, then in x-major spatial raster. The map is a bijection and
//! `unpatchify` inverts it bit-exactly.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Geometry shared by patchify and the token builders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeom {
    pub channels: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    pub temporal_patch: usize,
}

impl PatchGeom {
    pub fn validate(&self) -> Result<()> {
        let &PatchGeom {
            channels,
            frames,
            width,
            height,
            patch_size: s,
            temporal_patch: te,
        } = self;
        if channels == 0 || frames == 0 || width == 0 || height == 0 || s == 0 || te == 0 {
            return Err(Error::Config(format!("zero extent in patch geometry {self:?}")));
        }
        if width % s != 0 || height % s != 0 {
            return Err(Error::Config(format!(
                "patch size {s} must divide frame {width}x{height}"
            )));
        }
        if frames % te != 0 {
            return Err(Error::Config(format!(
                "temporal patch {te} must divide clip length {frames}"
            )));
        }
        Ok(())
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.patch_size
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.patch_size
    }

    /// Patches per frame block.
    pub fn patches_per_frame(&self) -> usize {
        self.grid_w() * self.grid_h()
    }

    pub fn frame_blocks(&self) -> usize {
        self.frames / self.temporal_patch
    }

    pub fn rows(&self) -> usize {
        self.frame_blocks() * self.patches_per_frame()
    }

    /// Flattened values per patch.
    pub fn patch_width(&self) -> usize {
        self.channels * self.temporal_patch * self.patch_size * self.patch_size
    }

    pub fn clip_shape(&self) -> Vec<usize> {
        vec![self.channels, self.frames, self.width, self.height]
    }
}

/// Clip C x T x W x H to a rows x patch_width matrix.
pub fn patchify(clip: &Tensor, geom: &PatchGeom) -> Result<Tensor> {
    geom.validate()?;
    if clip.shape() != geom.clip_shape().as_slice() {
        return Err(Error::Shape {
            op: "patchify",
            lhs: clip.shape().to_vec(),
            rhs: geom.clip_shape(),
        });
    }
    let (c, w, h) = (geom.channels, geom.width, geom.height);
    let (s, te) = (geom.patch_size, geom.temporal_patch);
    let (gw, gh) = (geom.grid_w(), geom.grid_h());
    let pw = geom.patch_width();
    let src = clip.data();
    let mut data = vec![0.0; geom.rows() * pw];
    let mut row = 0;
    for fb in 0..geom.frame_blocks() {
        for gx in 0..gw {
            for gy in 0..gh {
                let out = &mut data[row * pw..(row + 1) * pw];
                let mut o = 0;
                for ch in 0..c {
                    for dt in 0..te {
                        let t = fb * te + dt;
                        for dx in 0..s {
                            let x = gx * s + dx;
                            let base = ((ch * geom.frames + t) * w + x) * h + gy * s;
                            out[o..o + s].copy_from_slice(&src[base..base + s]);
                            o += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Tensor::new(vec![geom.rows(), pw], data)
}

/// Inverse of `patchify`.
pub fn unpatchify(patches: &Tensor, geom: &PatchGeom) -> Result<Tensor> {
    geom.validate()?;
    let expect = [geom.rows(), geom.patch_width()];
    if patches.shape() != expect {
        return Err(Error::Shape {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: expect.to_vec(),
        });
    }
    let (c, w, h) = (geom.channels, geom.width, geom.height);
    let (s, te) = (geom.patch_size, geom.temporal_patch);
    let (gw, gh) = (geom.grid_w(), geom.grid_h());
    let pw = geom.patch_width();
    let src = patches.data();
    let mut data = vec![0.0; c * geom.frames * w * h];
    let mut row = 0;
    for fb in 0..geom.frame_blocks() {
        for gx in 0..gw {
            for gy in 0..gh {
                let pat = &src[row * pw..(row + 1) * pw];
                let mut o = 0;
                for ch in 0..c {
                    for dt in 0..te {
                        let t = fb * te + dt;
                        for dx in 0..s {
                            let x = gx * s + dx;
                            let base = ((ch * geom.frames + t) * w + x) * h + gy * s;
                            data[base..base + s].copy_from_slice(&pat[o..o + s]);
                            o += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Tensor::new(geom.clip_shape(), data)
}

/// Flat token sequence: class token, then embedded patches, plus a
/// positional table covering every row including the class row.
pub fn embed_flat(tape: &mut Tape, patches: Var, w: Var, pos: Var, cls: Var) -> Result<Var> {
    let emb = tape.matmul(patches, w)?;
    let c = tape.shape(emb)[1];
    let cls_row = tape.reshape(cls, &[1, c])?;
    let seq = tape.concat(&[cls_row, emb], 0)?;
    tape.add(seq, pos)
}

/// Token grid (T+1) x (P+1) x C: row 0 is the temporal class row, column 0
/// the spatial class column, and both share the (0,0) corner. Positional
/// tables are added along each axis, class entries included.
#[allow(clippy::too_many_arguments)]
pub fn embed_grid(
    tape: &mut Tape,
    patches: Var,
    frame_blocks: usize,
    per_frame: usize,
    w: Var,
    pos_time: Var,
    pos_space: Var,
    cls_corner: Var,
    cls_temporal: Var,
    cls_spatial: Var,
) -> Result<Var> {
    let emb = tape.matmul(patches, w)?;
    let c = tape.shape(emb)[1];
    let body = tape.reshape(emb, &[frame_blocks, per_frame, c])?;
    let corner = tape.reshape(cls_corner, &[1, 1, c])?;
    let trow = tape.repeat_rows(cls_temporal, per_frame)?;
    let trow = tape.reshape(trow, &[1, per_frame, c])?;
    let top = tape.concat(&[corner, trow], 1)?;
    let scol = tape.repeat_rows(cls_spatial, frame_blocks)?;
    let scol = tape.reshape(scol, &[frame_blocks, 1, c])?;
    let bottom = tape.concat(&[scol, body], 1)?;
    let grid = tape.concat(&[top, bottom], 0)?;
    let grid = tape.add_axis_table(grid, pos_time, 0)?;
    tape.add_axis_table(grid, pos_space, 1)
}

/// Axial token grid (T+1) x (W+1) x (H+1) x C. Class content is additive:
/// an entry receives an axis class vector for each coordinate that is 0,
/// so the corner carries the sum of all three.
#[allow(clippy::too_many_arguments)]
pub fn embed_axial(
    tape: &mut Tape,
    patches: Var,
    frame_blocks: usize,
    grid_w: usize,
    grid_h: usize,
    w: Var,
    pos_time: Var,
    pos_w: Var,
    pos_h: Var,
    cls_time: Var,
    cls_w: Var,
    cls_h: Var,
) -> Result<Var> {
    let emb = tape.matmul(patches, w)?;
    let c = tape.shape(emb)[1];
    let body = tape.reshape(emb, &[frame_blocks, grid_w, grid_h, c])?;
    // Zero-pad index 0 of each spatial/temporal axis, innermost first.
    let zh = tape.constant(Tensor::zeros(&[frame_blocks, grid_w, 1, c]));
    let body = tape.concat(&[zh, body], 2)?;
    let zw = tape.constant(Tensor::zeros(&[frame_blocks, 1, grid_h + 1, c]));
    let body = tape.concat(&[zw, body], 1)?;
    let zt = tape.constant(Tensor::zeros(&[1, grid_w + 1, grid_h + 1, c]));
    let grid = tape.concat(&[zt, body], 0)?;
    // Axis class vectors enter as tables that are zero except at index 0.
    let zeros_t = tape.constant(Tensor::zeros(&[frame_blocks, c]));
    let cls_t_row = tape.reshape(cls_time, &[1, c])?;
    let cls_t_table = tape.concat(&[cls_t_row, zeros_t], 0)?;
    let zeros_w = tape.constant(Tensor::zeros(&[grid_w, c]));
    let cls_w_row = tape.reshape(cls_w, &[1, c])?;
    let cls_w_table = tape.concat(&[cls_w_row, zeros_w], 0)?;
    let zeros_h = tape.constant(Tensor::zeros(&[grid_h, c]));
    let cls_h_row = tape.reshape(cls_h, &[1, c])?;
    let cls_h_table = tape.concat(&[cls_h_row, zeros_h], 0)?;
    let grid = tape.add_axis_table(grid, cls_t_table, 0)?;
    let grid = tape.add_axis_table(grid, cls_w_table, 1)?;
    let grid = tape.add_axis_table(grid, cls_h_table, 2)?;
    let grid = tape.add_axis_table(grid, pos_time, 0)?;
    let grid = tape.add_axis_table(grid, pos_w, 1)?;
    tape.add_axis_table(grid, pos_h, 2)
}

/// Per-frame token sequences for the spatial-only factorization: every
/// frame gets the same class token and spatial positional table.
pub fn embed_frames(
    tape: &mut Tape,
    patches: Var,
    frame_blocks: usize,
    per_frame: usize,
    w: Var,
    pos: Var,
    cls: Var,
) -> Result<Vec<Var>> {
    let emb = tape.matmul(patches, w)?;
    let c = tape.shape(emb)[1];
    let body = tape.reshape(emb, &[frame_blocks, per_frame, c])?;
    let cls_row = tape.reshape(cls, &[1, c])?;
    let mut frames = Vec::with_capacity(frame_blocks);
    for f in 0..frame_blocks {
        let fr = tape.select(body, 0, f)?;
        let seq = tape.concat(&[cls_row, fr], 0)?;
        frames.push(tape.add(seq, pos)?);
    }
    Ok(frames)
}
