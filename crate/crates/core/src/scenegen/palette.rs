//! Fixed color tables. Object colors are saturated; backgrounds are
//! desaturated, so the two families never coincide at either brightness.

use super::{Brightness, NUM_BACKGROUNDS, NUM_COLORS};

pub const COLOR_NAMES: [&str; NUM_COLORS] = ["red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple"];

/// Object colors in `[0, 1]` RGB.
pub const OBJECT_RGB: [[f32; 3]; NUM_COLORS] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.10, 0.25, 0.95],
    [0.95, 0.90, 0.10],
    [0.90, 0.15, 0.85],
    [0.10, 0.85, 0.90],
    [1.00, 0.55, 0.05],
    [0.55, 0.15, 0.95],
];

/// Bright background colors in `[0, 1]` RGB; dim variants scale these.
pub const BACKGROUND_RGB: [[f32; 3]; NUM_BACKGROUNDS] = [
    [0.70, 0.70, 0.70],
    [0.90, 0.78, 0.50],
    [0.50, 0.68, 0.92],
    [0.55, 0.85, 0.55],
];

/// Map `[0, 1]` to the model's `[-1, 1]` pixel range.
#[inline]
pub fn to_signed(rgb: [f32; 3]) -> [f32; 3] {
    rgb.map(|v| 2.0 * v - 1.0)
}

#[inline]
pub fn to_unit(rgb: [f32; 3]) -> [f32; 3] {
    rgb.map(|v| (v + 1.0) * 0.5)
}

pub fn object_color(idx: usize) -> [f32; 3] {
    to_signed(OBJECT_RGB[idx])
}

pub fn background_color(idx: usize, brightness: Brightness) -> [f32; 3] {
    let f = brightness.factor();
    to_signed(BACKGROUND_RGB[idx].map(|v| v * f))
}

/// Rec. 601 luma of a `[-1, 1]` pixel, reported on the `[0, 1]` scale.
#[inline]
pub fn luminance(rgb: [f32; 3]) -> f32 {
    let [r, g, b] = to_unit(rgb);
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Label of a quantized pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PaletteLabel {
    Object(usize),
    Background(usize, Brightness),
}

/// Joint quantization table: 8 object colors then the 4 backgrounds at both
/// brightness levels, all in `[-1, 1]`.
pub fn quantization_table() -> Vec<(PaletteLabel, [f32; 3])> {
    let mut table: Vec<_> = (0..NUM_COLORS)
        .map(|i| (PaletteLabel::Object(i), object_color(i)))
        .collect();
    for b in 0..NUM_BACKGROUNDS {
        for br in Brightness::ALL {
            table.push((PaletteLabel::Background(b, br), background_color(b, br)));
        }
    }
    table
}
