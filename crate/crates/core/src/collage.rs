//! Collage construction: `k` images down-scaled by `1/sqrt(k)` and stitched
//! into a `sqrt(k) x sqrt(k)` grid, with annotations mapped into their cell.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{ImageId, ImageRecord, InstanceAnnotation};
use crate::error::CollageError;
use crate::geometry::ExactArea;

/// Boxes below this area (px^2) are dropped by the tiny-box filter.
pub const TINY_BOX_AREA: f64 = 100.0;

/// Number of collage components; one of 1, 4 or 9.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct CollageK(u32);

impl CollageK {
    pub const ONE: CollageK = CollageK(1);
    pub const FOUR: CollageK = CollageK(4);
    pub const NINE: CollageK = CollageK(9);

    pub fn new(k: u32) -> Result<Self, CollageError> {
        match k {
            1 | 4 | 9 => Ok(Self(k)),
            other => Err(CollageError::UnsupportedK(other)),
        }
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// Rows (and columns) of the grid.
    pub fn side(self) -> u32 {
        match self.0 {
            1 => 1,
            4 => 2,
            _ => 3,
        }
    }
}

impl Default for CollageK {
    fn default() -> Self {
        Self::FOUR
    }
}

impl TryFrom<u32> for CollageK {
    type Error = CollageError;

    fn try_from(k: u32) -> Result<Self, Self::Error> {
        Self::new(k)
    }
}

impl From<CollageK> for u32 {
    fn from(k: CollageK) -> u32 {
        k.0
    }
}

impl fmt::Display for CollageK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellAssignment {
    pub source_image_id: ImageId,
    pub source_width: u32,
    pub source_height: u32,
    /// The cell's down-scaling divisor, `sqrt(k)`.
    pub divisor: u32,
    pub offset_x: u32,
    pub offset_y: u32,
}

impl CellAssignment {
    pub fn scale(&self) -> f64 {
        1.0 / self.divisor as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollagePlan {
    pub k: CollageK,
    pub canvas_w: u32,
    pub canvas_h: u32,
    pub cells: Vec<CellAssignment>,
}

impl CollagePlan {
    pub fn cell_size(&self) -> (u32, u32) {
        let side = self.k.side();
        (self.canvas_w / side, self.canvas_h / side)
    }
}

/// Smallest canvas holding every source, rounded up to a multiple of `sqrt(k)`.
pub fn canvas_for(sources: &[&ImageRecord], k: CollageK) -> (u32, u32) {
    let side = k.side();
    let w = sources.iter().map(|s| s.width).max().unwrap_or(side);
    let h = sources.iter().map(|s| s.height).max().unwrap_or(side);
    (w.div_ceil(side) * side, h.div_ceil(side) * side)
}

/// Assigns `sources` to grid cells in row-major order.
///
/// `canvas` is `(width, height)` and must be divisible by `sqrt(k)`. Each
/// source must fit in the canvas so that its down-scaled copy fits its cell.
pub fn plan_collage(
    sources: &[&ImageRecord],
    k: CollageK,
    canvas: (u32, u32),
) -> Result<CollagePlan, CollageError> {
    let side = k.side();
    let (canvas_w, canvas_h) = canvas;
    if sources.len() != k.get() as usize {
        return Err(CollageError::WrongSourceCount {
            expected: k.get() as usize,
            got: sources.len(),
        });
    }
    if canvas_w == 0 || canvas_h == 0 || canvas_w % side != 0 || canvas_h % side != 0 {
        return Err(CollageError::BadCanvas {
            width: canvas_w,
            height: canvas_h,
            side,
        });
    }
    let (cell_w, cell_h) = (canvas_w / side, canvas_h / side);
    let cells = sources
        .iter()
        .enumerate()
        .map(|(i, src)| {
            if src.width > canvas_w || src.height > canvas_h {
                return Err(CollageError::SourceTooLarge {
                    id: src.id,
                    width: src.width,
                    height: src.height,
                });
            }
            let (row, col) = (i as u32 / side, i as u32 % side);
            Ok(CellAssignment {
                source_image_id: src.id,
                source_width: src.width,
                source_height: src.height,
                divisor: side,
                offset_x: col * cell_w,
                offset_y: row * cell_h,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CollagePlan {
        k,
        canvas_w,
        canvas_h,
        cells,
    })
}

/// Maps each box by `(x, y, w, h) -> (x*s + ox, y*s + oy, w*s, h*s)`.
pub fn transform_boxes(
    annos: &[InstanceAnnotation],
    cell: &CellAssignment,
) -> Vec<InstanceAnnotation> {
    annos
        .iter()
        .map(|a| InstanceAnnotation {
            bbox: a
                .bbox
                .downscale_translate(cell.divisor, cell.offset_x, cell.offset_y),
            ..a.clone()
        })
        .collect()
}

pub fn transform_annotations(
    source: &ImageRecord,
    cell: &CellAssignment,
) -> Vec<InstanceAnnotation> {
    transform_boxes(&source.annotations, cell)
}

/// Keeps annotations whose area is at least `min_area`; returns the drop count.
pub fn filter_tiny(
    annos: Vec<InstanceAnnotation>,
    min_area: f64,
) -> (Vec<InstanceAnnotation>, usize) {
    let threshold = ExactArea::from_px2(min_area);
    let before = annos.len();
    let kept: Vec<_> = annos
        .into_iter()
        .filter(|a| a.bbox.exact_area() >= threshold)
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Row-major interleaved 8-bit image.
#[derive(Clone, PartialEq, Eq)]
pub struct PixelBuffer {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl PixelBuffer {
    pub fn zeros(width: u32, height: u32, channels: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0; width as usize * height as usize * channels as usize],
        }
    }

    pub fn from_raw(
        width: u32,
        height: u32,
        channels: u8,
        data: Vec<u8>,
    ) -> Result<Self, CollageError> {
        if channels == 0 || data.len() != width as usize * height as usize * channels as usize {
            return Err(CollageError::BadBuffer {
                len: data.len(),
                width,
                height,
                channels,
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels as usize;
        let start = (y as usize * self.width as usize + x as usize) * c;
        &self.data[start..start + c]
    }

    fn row_stride(&self) -> usize {
        self.width as usize * self.channels as usize
    }
}

impl fmt::Debug for PixelBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PixelBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollageResult {
    pub pixels: PixelBuffer,
    /// Transformed annotations; `image_id` still names the source image.
    pub annotations: Vec<InstanceAnnotation>,
    pub dropped_tiny: usize,
}

/// Renders `plan` into a zero-initialised canvas.
///
/// Each cell samples its source with nearest neighbour at `src = dst * sqrt(k)`.
/// The part of a cell not covered by its down-scaled source stays black.
/// Sources without an entry in `annotations_by_image` contribute no boxes.
pub fn compose_collage(
    plan: &CollagePlan,
    images: &HashMap<ImageId, PixelBuffer>,
    annotations_by_image: &HashMap<ImageId, Vec<InstanceAnnotation>>,
    tiny_filter: bool,
) -> Result<CollageResult, CollageError> {
    let mut channels = None;
    for cell in &plan.cells {
        let id = cell.source_image_id;
        let src = images.get(&id).ok_or(CollageError::MissingPixels(id))?;
        if src.width != cell.source_width || src.height != cell.source_height {
            return Err(CollageError::DimensionMismatch {
                id,
                got_w: src.width,
                got_h: src.height,
                want_w: cell.source_width,
                want_h: cell.source_height,
            });
        }
        let want = *channels.get_or_insert(src.channels);
        if src.channels != want {
            return Err(CollageError::ChannelMismatch {
                id,
                got: src.channels,
                want,
            });
        }
    }
    let channels = channels.unwrap_or(3);

    let mut canvas = PixelBuffer::zeros(plan.canvas_w, plan.canvas_h, channels);
    let (cell_w, cell_h) = plan.cell_size();
    let mut annotations = Vec::new();
    for cell in &plan.cells {
        let src = &images[&cell.source_image_id];
        blit_downscaled(&mut canvas, src, cell, cell_w, cell_h);
        if let Some(annos) = annotations_by_image.get(&cell.source_image_id) {
            annotations.extend(transform_boxes(annos, cell));
        }
    }

    let (annotations, dropped_tiny) = if tiny_filter {
        filter_tiny(annotations, TINY_BOX_AREA)
    } else {
        (annotations, 0)
    };
    Ok(CollageResult {
        pixels: canvas,
        annotations,
        dropped_tiny,
    })
}

fn blit_downscaled(
    canvas: &mut PixelBuffer,
    src: &PixelBuffer,
    cell: &CellAssignment,
    cell_w: u32,
    cell_h: u32,
) {
    let step = cell.divisor as usize;
    let c = canvas.channels as usize;
    let fill_w = cell_w.min(src.width.div_ceil(cell.divisor)) as usize;
    let fill_h = cell_h.min(src.height.div_ceil(cell.divisor)) as usize;
    let dst_stride = canvas.row_stride();
    let src_stride = src.row_stride();
    let (ox, oy) = (cell.offset_x as usize, cell.offset_y as usize);

    for dy in 0..fill_h {
        let sy = (dy * step).min(src.height as usize - 1);
        let src_row = &src.data[sy * src_stride..(sy + 1) * src_stride];
        let dst_start = (oy + dy) * dst_stride + ox * c;
        let dst_row = &mut canvas.data[dst_start..dst_start + fill_w * c];
        if step == 1 {
            dst_row.copy_from_slice(&src_row[..fill_w * c]);
            continue;
        }
        for (dx, out) in dst_row.chunks_exact_mut(c).enumerate() {
            let sx = (dx * step).min(src.width as usize - 1);
            out.copy_from_slice(&src_row[sx * c..sx * c + c]);
        }
    }
}
