//! Procedural micro-world: ground-truth scene specs, a hard-edged renderer,
//! a fixed seven-slot caption grammar, and a programmatic verifier that
//! checks an image against a caption.

mod caption;
pub(crate) mod dataset;
pub mod palette;
mod render;
mod verify;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use caption::{Caption, Condition, NULL_TOKEN, SLOT_NAMES, VOCAB, VOCAB_SIZE};
pub use dataset::{
    is_paired_dir, read_images, read_meta, write_images, write_meta, Dataset, MetaRecord, PairedDataset, IMAGES_FILE,
    META_FILE,
};
pub use render::{object_area, render, CELL_ORIGIN, CELL_SIZE, LARGE_EXTENT, SMALL_EXTENT};
pub use verify::{classify_fill_ratio, verify, PredicateReport, MIN_COMPONENT_AREA};

use crate::error::{Error, Result};
use crate::rng;

pub const IMAGE_H: usize = 32;
pub const IMAGE_W: usize = 32;
pub const IMAGE_C: usize = 3;
pub const IMAGE_LEN: usize = IMAGE_H * IMAGE_W * IMAGE_C;

pub const NUM_COLORS: usize = 8;
pub const NUM_BACKGROUNDS: usize = 4;
pub const NUM_CELLS: usize = 9;
pub const MAX_COUNT: u8 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Circle,
    Square,
    Triangle,
}

impl Kind {
    pub const ALL: [Kind; 3] = [Kind::Circle, Kind::Square, Kind::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn extent(self) -> usize {
        match self {
            Size::Small => SMALL_EXTENT,
            Size::Large => LARGE_EXTENT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Brightness {
    Dim,
    Bright,
}

impl Brightness {
    pub const ALL: [Brightness; 2] = [Brightness::Dim, Brightness::Bright];

    /// Multiplier applied to the background palette color.
    pub fn factor(self) -> f32 {
        match self {
            Brightness::Dim => 0.45,
            Brightness::Bright => 1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Brightness::Dim => Brightness::Bright,
            Brightness::Bright => Brightness::Dim,
        }
    }
}

/// Ground truth for one synthetic image. Objects occupy `count` consecutive
/// grid cells in row-major order starting at `cell`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: Kind,
    pub color_idx: u8,
    pub count: u8,
    pub size: Size,
    pub cell: u8,
    pub background_idx: u8,
    pub brightness: Brightness,
}

/// Valid (count, anchor) placements, ordered by count then anchor.
const PLACEMENTS: usize = 9 + 8 + 7;

/// Number of valid scene specs.
pub const SPEC_SPACE: usize = 3 * NUM_COLORS * 2 * NUM_BACKGROUNDS * 2 * PLACEMENTS;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.color_idx as usize >= NUM_COLORS {
            return Err(Error::InvalidSpec(format!(
                "color_idx {} out of range 0..{NUM_COLORS}",
                self.color_idx
            )));
        }
        if !(1..=MAX_COUNT).contains(&self.count) {
            return Err(Error::InvalidSpec(format!("count {} out of range 1..=3", self.count)));
        }
        if self.cell as usize >= NUM_CELLS {
            return Err(Error::InvalidSpec(format!("cell {} out of range 0..9", self.cell)));
        }
        if self.background_idx as usize >= NUM_BACKGROUNDS {
            return Err(Error::InvalidSpec(format!(
                "background_idx {} out of range 0..{NUM_BACKGROUNDS}",
                self.background_idx
            )));
        }
        if !Self::fits(self.cell, self.count) {
            return Err(Error::InvalidSpec(format!(
                "{} objects from cell {} overflow the 3x3 grid",
                self.count, self.cell
            )));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    /// `anchor + count - 1 <= 8`
    pub fn fits(cell: u8, count: u8) -> bool {
        cell as usize + count as usize <= NUM_CELLS
    }

    /// Grid cells occupied by objects.
    pub fn cells(&self) -> impl Iterator<Item = usize> {
        let start = self.cell as usize;
        start..start + self.count as usize
    }

    /// Decode an index in `0..SPEC_SPACE`; the mapping is a bijection.
    pub fn from_index(mut index: usize) -> Self {
        assert!(index < SPEC_SPACE, "spec index {index} out of range");
        let placement = index % PLACEMENTS;
        index /= PLACEMENTS;
        let brightness = Brightness::ALL[index % 2];
        index /= 2;
        let background_idx = (index % NUM_BACKGROUNDS) as u8;
        index /= NUM_BACKGROUNDS;
        let size = Size::ALL[index % 2];
        index /= 2;
        let color_idx = (index % NUM_COLORS) as u8;
        index /= NUM_COLORS;
        let kind = Kind::ALL[index];
        let (count, cell) = match placement {
            p if p < 9 => (1, p),
            p if p < 17 => (2, p - 9),
            p => (3, p - 17),
        };
        SceneSpec {
            kind,
            color_idx,
            count,
            size,
            cell: cell as u8,
            background_idx,
            brightness,
        }
    }

    /// Every valid spec, in index order.
    pub fn enumerate() -> impl Iterator<Item = SceneSpec> {
        (0..SPEC_SPACE).map(SceneSpec::from_index)
    }
}

/// Uniform draw over valid specs.
pub fn sample_spec(seed: u64) -> SceneSpec {
    let mut r = rng::from_seed(seed);
    SceneSpec::from_index(r.random_range(0..SPEC_SPACE))
}

/// A 32x32 RGB image, row-major `(y, x, channel)`, values nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Vec<f32>,
}

impl Image {
    pub fn from_data(data: Vec<f32>) -> Result<Self> {
        if data.len() != IMAGE_LEN {
            return Err(Error::InvalidArgument(format!(
                "image needs {IMAGE_LEN} values, got {}",
                data.len()
            )));
        }
        Ok(Self { data })
    }

    pub fn filled(rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(IMAGE_LEN);
        for _ in 0..IMAGE_H * IMAGE_W {
            data.extend_from_slice(&rgb);
        }
        Self { data }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * IMAGE_W + x) * IMAGE_C;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let o = (y * IMAGE_W + x) * IMAGE_C;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
        self
    }

    /// Number of pixels whose RGB triple differs.
    pub fn pixel_diff_count(&self, other: &Image) -> usize {
        self.data
            .chunks(IMAGE_C)
            .zip(other.data.chunks(IMAGE_C))
            .filter(|(a, b)| a != b)
            .count()
    }
}
