//! Rule-based caption editing. A principle owns a set of spec slots; an edit
//! replaces one owned slot with a uniformly drawn valid alternative, so the
//! edited caption always describes a visibly different scene.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scenegen::dataset::{read_jsonl, write_jsonl};
use crate::scenegen::{
    render, verify, Brightness, Caption, Dataset, Kind, MetaRecord, PairedDataset, SceneSpec, Size, MAX_COUNT,
    NUM_BACKGROUNDS, NUM_CELLS, NUM_COLORS,
};

pub const TRIPLETS_FILE: &str = "triplets.jsonl";

/// Largest supported edit budget.
pub const MAX_BUDGET: usize = 3;

/// Redraw limit for a step that would restore the original spec.
const MAX_REDRAWS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditPrinciple {
    Content,
    Attribute,
    Spatial,
    Contextual,
}

impl EditPrinciple {
    pub const ALL: [EditPrinciple; 4] = [
        EditPrinciple::Content,
        EditPrinciple::Attribute,
        EditPrinciple::Spatial,
        EditPrinciple::Contextual,
    ];

    pub fn slots(self) -> &'static [EditSlot] {
        match self {
            EditPrinciple::Content => &[EditSlot::Kind, EditSlot::Count],
            EditPrinciple::Attribute => &[EditSlot::Size, EditSlot::Color],
            EditPrinciple::Spatial => &[EditSlot::Cell],
            EditPrinciple::Contextual => &[EditSlot::Background, EditSlot::Brightness],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| format!("{p:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown edit principle {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EditSlot {
    Kind,
    Count,
    Size,
    Color,
    Cell,
    Background,
    Brightness,
}

/// Every valid spec that differs from `spec` in `slot` only.
pub fn alternatives(spec: &SceneSpec, slot: EditSlot) -> Vec<SceneSpec> {
    let with = |f: &dyn Fn(&mut SceneSpec)| {
        let mut s = *spec;
        f(&mut s);
        s
    };
    let candidates: Vec<SceneSpec> = match slot {
        EditSlot::Kind => Kind::ALL.iter().map(|&k| with(&|s| s.kind = k)).collect(),
        EditSlot::Count => (1..=MAX_COUNT).map(|c| with(&|s| s.count = c)).collect(),
        EditSlot::Size => Size::ALL.iter().map(|&z| with(&|s| s.size = z)).collect(),
        EditSlot::Color => (0..NUM_COLORS as u8).map(|c| with(&|s| s.color_idx = c)).collect(),
        EditSlot::Cell => (0..NUM_CELLS as u8).map(|c| with(&|s| s.cell = c)).collect(),
        EditSlot::Background => (0..NUM_BACKGROUNDS as u8)
            .map(|b| with(&|s| s.background_idx = b))
            .collect(),
        EditSlot::Brightness => Brightness::ALL.iter().map(|&b| with(&|s| s.brightness = b)).collect(),
    };
    candidates.into_iter().filter(|s| s != spec && s.is_valid()).collect()
}

/// One edit under `principle`. The sub-slot is drawn uniformly among the
/// principle's slots that admit an alternative, then the new value uniformly.
pub fn perturb_spec(spec: &SceneSpec, principle: EditPrinciple, seed: u64) -> Result<SceneSpec> {
    perturb_with(spec, principle, &mut rng::from_seed(seed))
}

fn perturb_with(spec: &SceneSpec, principle: EditPrinciple, r: &mut rng::Rng) -> Result<SceneSpec> {
    spec.validate()?;
    let options: Vec<Vec<SceneSpec>> = principle
        .slots()
        .iter()
        .map(|&slot| alternatives(spec, slot))
        .filter(|a| !a.is_empty())
        .collect();
    let slot = options
        .choose(r)
        .ok_or_else(|| Error::InvalidArgument(format!("{principle:?} has no valid alternative for {spec:?}")))?;
    Ok(*slot.choose(r).expect("non-empty alternatives"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditPlan {
    /// Number of sequential edits.
    pub k: usize,
    pub allowed: Vec<EditPrinciple>,
    pub seed: u64,
    pub negatives_per_image: usize,
}

impl Default for EditPlan {
    fn default() -> Self {
        Self::new(1, EditPrinciple::ALL.to_vec(), 0)
    }
}

impl EditPlan {
    pub fn new(k: usize, allowed: Vec<EditPrinciple>, seed: u64) -> Self {
        Self {
            k,
            allowed,
            seed,
            negatives_per_image: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_BUDGET).contains(&self.k) {
            return Err(Error::Config(format!(
                "edit budget k={} must be in 1..={MAX_BUDGET}",
                self.k
            )));
        }
        if self.allowed.is_empty() {
            return Err(Error::Config("edit plan needs at least one allowed principle".into()));
        }
        if self.negatives_per_image == 0 {
            return Err(Error::Config("negatives_per_image must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTriplet {
    pub image_index: usize,
    #[serde(rename = "c_w_tokens")]
    pub c_w: Caption,
    #[serde(rename = "c_l_tokens")]
    pub c_l: Caption,
    pub principles: Vec<EditPrinciple>,
}

impl PreferenceTriplet {
    /// Check the triplet invariants against the clean render of `c_w`.
    pub fn validate(&self) -> Result<()> {
        if self.c_w == self.c_l {
            return Err(Error::InvalidArgument(format!(
                "triplet {}: c_w equals c_l",
                self.image_index
            )));
        }
        let w = self.c_w.spec_of()?;
        self.c_l.spec_of()?;
        if verify(&render(&w)?, &self.c_l).all_true() {
            return Err(Error::InvalidArgument(format!(
                "triplet {}: no predicate distinguishes the captions",
                self.image_index
            )));
        }
        Ok(())
    }
}

/// Apply `plan.k` sequential edits. A step whose result equals the original
/// spec is redrawn.
pub fn make_triplet(spec: &SceneSpec, image_index: usize, plan: &EditPlan) -> Result<PreferenceTriplet> {
    make_triplet_seeded(spec, image_index, plan, rng::mix(plan.seed, image_index as u64))
}

fn make_triplet_seeded(spec: &SceneSpec, image_index: usize, plan: &EditPlan, seed: u64) -> Result<PreferenceTriplet> {
    plan.validate()?;
    spec.validate()?;
    let mut r = rng::from_seed(seed);
    let mut current = *spec;
    let mut principles = Vec::with_capacity(plan.k);
    for _ in 0..plan.k {
        let mut attempt = 0;
        let (principle, next) = loop {
            let p = plan.allowed[r.random_range(0..plan.allowed.len())];
            let next = perturb_with(&current, p, &mut r)?;
            if next != *spec {
                break (p, next);
            }
            attempt += 1;
            if attempt >= MAX_REDRAWS {
                return Err(Error::InvalidArgument(format!(
                    "could not find a non-reverting edit for {spec:?}"
                )));
            }
        };
        principles.push(principle);
        current = next;
    }
    Ok(PreferenceTriplet {
        image_index,
        c_w: Caption::from_spec(spec)?,
        c_l: Caption::from_spec(&current)?,
        principles,
    })
}

/// Triplets for every record, `negatives_per_image` per image, ordered by
/// image index then negative index.
pub fn build_text_pref_dataset(records: &[MetaRecord], plan: &EditPlan) -> Result<Vec<PreferenceTriplet>> {
    plan.validate()?;
    let per_image: Vec<Vec<PreferenceTriplet>> = records
        .par_iter()
        .map(|rec| {
            (0..plan.negatives_per_image)
                .map(|j| {
                    let seed = if j == 0 {
                        rng::mix(plan.seed, rec.index as u64)
                    } else {
                        rng::mix(rng::mix(plan.seed, rec.index as u64), j as u64)
                    };
                    make_triplet_seeded(&rec.spec, rec.index, plan, seed)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Winner = original image, loser = clean render of the edited spec; both
/// share the winner's caption.
pub fn build_image_pair_dataset(dataset: &Dataset, plan: &EditPlan) -> Result<PairedDataset> {
    plan.validate()?;
    let triplets: Vec<PreferenceTriplet> = dataset
        .records
        .par_iter()
        .map(|rec| make_triplet(&rec.spec, rec.index, plan))
        .collect::<Result<_>>()?;
    let losers = triplets
        .par_iter()
        .map(|t| render(&t.c_l.spec()))
        .collect::<Result<Vec<_>>>()?;
    let records = dataset
        .records
        .iter()
        .zip(&triplets)
        .map(|(rec, t)| MetaRecord {
            loser_spec: Some(t.c_l.spec()),
            loser_caption_tokens: Some(t.c_l.tokens().iter().map(|s| s.to_string()).collect()),
            ..rec.clone()
        })
        .collect();
    Ok(PairedDataset {
        winners: dataset.images.clone(),
        losers,
        records,
    })
}

pub fn write_triplets(path: &Path, triplets: &[PreferenceTriplet]) -> Result<()> {
    write_jsonl(path, triplets)
}

pub fn read_triplets(path: &Path) -> Result<Vec<PreferenceTriplet>> {
    read_jsonl(path)
}
