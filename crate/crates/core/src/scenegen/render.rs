use super::palette::{background_color, object_color};
use super::{Image, Kind, SceneSpec, Size};
use crate::error::Result;

/// Left/top offset of the 3x3 grid.
pub const CELL_ORIGIN: usize = 1;
/// Side of one grid cell in pixels.
pub const CELL_SIZE: usize = 10;
pub const SMALL_EXTENT: usize = 6;
pub const LARGE_EXTENT: usize = 9;

/// Squared-radius scale for discs, relative to `(extent / 2)^2`.
const DISC_RADIUS_SQ_SCALE: f32 = 0.9;

/// Whether pixel `(dx, dy)` of an `extent`-sized bounding box belongs to the shape.
pub(crate) fn shape_contains(kind: Kind, extent: usize, dx: usize, dy: usize) -> bool {
    match kind {
        Kind::Square => true,
        Kind::Circle => {
            let c = extent as f32 / 2.0;
            let (px, py) = (dx as f32 + 0.5 - c, dy as f32 + 0.5 - c);
            px * px + py * py <= DISC_RADIUS_SQ_SCALE * c * c + 1e-6
        }
        // Right triangle with the right angle at the bottom-left corner.
        Kind::Triangle => dx <= dy,
    }
}

/// Pixel count of one rendered object.
pub fn object_area(kind: Kind, size: Size) -> usize {
    let e = size.extent();
    (0..e * e).filter(|i| shape_contains(kind, e, i % e, i / e)).count()
}

/// Top-left pixel of the object bounding box drawn in `cell`.
pub(crate) fn object_origin(cell: usize, extent: usize) -> (usize, usize) {
    let (row, col) = (cell / 3, cell % 3);
    let inset = (CELL_SIZE - extent) / 2;
    (
        CELL_ORIGIN + col * CELL_SIZE + inset,
        CELL_ORIGIN + row * CELL_SIZE + inset,
    )
}

/// Grid cell of a pixel coordinate, clamping the border margin into the grid.
pub(crate) fn cell_of(x: f32, y: f32) -> usize {
    let idx = |v: f32| (((v - CELL_ORIGIN as f32) / CELL_SIZE as f32).floor().max(0.0) as usize).min(2);
    idx(y) * 3 + idx(x)
}

pub fn render(spec: &SceneSpec) -> Result<Image> {
    spec.validate()?;
    let mut img = Image::filled(background_color(spec.background_idx as usize, spec.brightness));
    let fg = object_color(spec.color_idx as usize);
    let extent = spec.size.extent();
    for cell in spec.cells() {
        let (x0, y0) = object_origin(cell, extent);
        for dy in 0..extent {
            for dx in 0..extent {
                if shape_contains(spec.kind, extent, dx, dy) {
                    img.set_pixel(x0 + dx, y0 + dy, fg);
                }
            }
        }
    }
    Ok(img)
}
