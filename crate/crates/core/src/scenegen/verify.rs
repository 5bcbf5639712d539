//! Programmatic alignment oracle: checks an image against a caption with
//! palette quantization and connected-component analysis. Thresholds are
//! fixed constants calibrated on clean renders; nothing depends on a model.

use serde::{Deserialize, Serialize};

use super::palette::{background_color, luminance, quantization_table, PaletteLabel};
use super::render::{cell_of, object_area};
use super::{Brightness, Caption, Image, Kind, Size, IMAGE_C, IMAGE_H, IMAGE_W, NUM_BACKGROUNDS, NUM_COLORS};

/// Components smaller than this are treated as noise.
pub const MIN_COMPONENT_AREA: usize = 8;
/// Bounding-box fill ratio at or above which a component is a square.
pub const SQUARE_MIN_FILL: f64 = 0.90;
/// Fill ratio at or above which (and below the square cut) a component is a circle.
pub const CIRCLE_MIN_FILL: f64 = 0.60;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateReport {
    pub kind_ok: bool,
    pub color_ok: bool,
    pub count_ok: bool,
    pub position_ok: bool,
    pub size_ok: bool,
    pub background_ok: bool,
    pub brightness_ok: bool,
}

impl PredicateReport {
    pub fn as_array(&self) -> [bool; 7] {
        [
            self.kind_ok,
            self.color_ok,
            self.count_ok,
            self.position_ok,
            self.size_ok,
            self.background_ok,
            self.brightness_ok,
        ]
    }

    pub fn num_true(&self) -> usize {
        self.as_array().iter().filter(|b| **b).count()
    }

    /// Fraction of satisfied predicates.
    pub fn alignment_score(&self) -> f64 {
        self.num_true() as f64 / 7.0
    }

    pub fn all_true(&self) -> bool {
        self.num_true() == 7
    }
}

pub fn classify_fill_ratio(fill: f64) -> Kind {
    if fill >= SQUARE_MIN_FILL {
        Kind::Square
    } else if fill >= CIRCLE_MIN_FILL {
        Kind::Circle
    } else {
        Kind::Triangle
    }
}

#[derive(Debug, Clone)]
struct Component {
    area: usize,
    min_x: usize,
    max_x: usize,
    min_y: usize,
    max_y: usize,
    sum_x: f64,
    sum_y: f64,
    color_hist: [usize; NUM_COLORS],
}

impl Component {
    fn fill_ratio(&self) -> f64 {
        let bw = self.max_x - self.min_x + 1;
        let bh = self.max_y - self.min_y + 1;
        self.area as f64 / (bw * bh) as f64
    }

    fn centroid(&self) -> (f64, f64) {
        (self.sum_x / self.area as f64 + 0.5, self.sum_y / self.area as f64 + 0.5)
    }

    fn dominant_color(&self) -> usize {
        // Ties resolve to the lowest index.
        let mut best = 0;
        for (i, &c) in self.color_hist.iter().enumerate() {
            if c > self.color_hist[best] {
                best = i;
            }
        }
        best
    }
}

fn quantize(img: &Image) -> Vec<PaletteLabel> {
    let table = quantization_table();
    img.data()
        .chunks(IMAGE_C)
        .map(|px| {
            let mut best = (f32::INFINITY, table[0].0);
            for (label, rgb) in &table {
                let d: f32 = px.iter().zip(rgb).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, *label);
                }
            }
            best.1
        })
        .collect()
}

/// 8-connected components of object-palette pixels.
fn components(labels: &[PaletteLabel]) -> Vec<Component> {
    let mut seen = vec![false; labels.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if seen[start] || !matches!(labels[start], PaletteLabel::Object(_)) {
            continue;
        }
        let mut comp = Component {
            area: 0,
            min_x: usize::MAX,
            max_x: 0,
            min_y: usize::MAX,
            max_y: 0,
            sum_x: 0.0,
            sum_y: 0.0,
            color_hist: [0; NUM_COLORS],
        };
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % IMAGE_W, p / IMAGE_W);
            if let PaletteLabel::Object(c) = labels[p] {
                comp.color_hist[c] += 1;
            }
            comp.area += 1;
            comp.min_x = comp.min_x.min(x);
            comp.max_x = comp.max_x.max(x);
            comp.min_y = comp.min_y.min(y);
            comp.max_y = comp.max_y.max(y);
            comp.sum_x += x as f64;
            comp.sum_y += y as f64;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= IMAGE_W as i64 || ny >= IMAGE_H as i64 {
                        continue;
                    }
                    let q = ny as usize * IMAGE_W + nx as usize;
                    if !seen[q] && matches!(labels[q], PaletteLabel::Object(_)) {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Area threshold separating small from large renders of `kind`.
fn size_threshold(kind: Kind) -> f64 {
    (object_area(kind, Size::Small) + object_area(kind, Size::Large)) as f64 / 2.0
}

/// Luminance threshold separating dim from bright renders of background `idx`.
fn brightness_threshold(idx: usize) -> f32 {
    (luminance(background_color(idx, Brightness::Dim)) + luminance(background_color(idx, Brightness::Bright))) / 2.0
}

/// Score `image` against `caption`. Values are clamped to `[-1, 1]` first.
/// Every image produces a report.
pub fn verify(image: &Image, caption: &Caption) -> PredicateReport {
    let image = image.clone().clamped();
    let spec = caption.spec();
    let labels = quantize(&image);

    // Background: the most frequent label overall must be a background entry.
    let mut bg_hist = [[0usize; 2]; NUM_BACKGROUNDS];
    let mut obj_total = 0usize;
    for l in &labels {
        match l {
            PaletteLabel::Background(b, br) => bg_hist[*b][*br as usize] += 1,
            PaletteLabel::Object(_) => obj_total += 1,
        }
    }
    let mut best_bg = (0usize, 0usize);
    for (b, h) in bg_hist.iter().enumerate() {
        for (br, &n) in h.iter().enumerate() {
            if n > bg_hist[best_bg.0][best_bg.1] {
                best_bg = (b, br);
            }
        }
    }
    let majority_is_background = bg_hist[best_bg.0][best_bg.1] >= obj_total;
    let background_ok = majority_is_background && best_bg.0 == spec.background_idx as usize;

    let bg_pixels: Vec<f32> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, PaletteLabel::Background(..)))
        .map(|(i, _)| luminance(image.pixel(i % IMAGE_W, i / IMAGE_W)))
        .collect();
    let brightness_ok = if bg_pixels.is_empty() || spec.background_idx as usize >= NUM_BACKGROUNDS {
        false
    } else {
        let mean = bg_pixels.iter().map(|v| *v as f64).sum::<f64>() / bg_pixels.len() as f64;
        let bright = mean >= brightness_threshold(spec.background_idx as usize) as f64;
        bright == (spec.brightness == Brightness::Bright)
    };

    let objects: Vec<Component> = components(&labels)
        .into_iter()
        .filter(|c| c.area >= MIN_COMPONENT_AREA)
        .collect();

    let count_ok = objects.len() == spec.count as usize;
    let color_ok = !objects.is_empty() && objects.iter().all(|c| c.dominant_color() == spec.color_idx as usize);
    let kind_ok = objects
        .iter()
        .max_by_key(|c| c.area)
        .is_some_and(|c| classify_fill_ratio(c.fill_ratio()) == spec.kind);
    let threshold = size_threshold(spec.kind);
    let size_ok = !objects.is_empty()
        && objects.iter().all(|c| match spec.size {
            Size::Small => (c.area as f64) < threshold,
            Size::Large => (c.area as f64) >= threshold,
        });
    // The anchor is the object whose centroid falls in the earliest cell.
    let position_ok = objects
        .iter()
        .map(|c| {
            let (cx, cy) = c.centroid();
            (cell_of(cx as f32, cy as f32), cx)
        })
        .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)))
        .is_some_and(|(cell, _)| cell == spec.cell as usize);

    PredicateReport {
        kind_ok,
        color_ok,
        count_ok,
        position_ok,
        size_ok,
        background_ok,
        brightness_ok,
    }
}
