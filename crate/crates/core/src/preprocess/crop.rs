//! Rectangle crops and the per-state crop geometry table.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::ImageRaster;
use crate::synthgen;
use crate::types::{BoundingBox, CycleState};

/// Copies the pixels inside `bbox` verbatim.
pub fn crop(image: &ImageRaster, bbox: &BoundingBox) -> Result<ImageRaster> {
    bbox.validate_for(image.width(), image.height())?;
    let c = image.channels();
    let mut pixels = Vec::with_capacity(bbox.area() * c);
    let src = image.pixels();
    for y in bbox.y_min..bbox.y_max {
        let row = (y * image.width() + bbox.x_min) * c;
        pixels.extend_from_slice(&src[row..row + bbox.width() * c]);
    }
    ImageRaster::new(bbox.width(), bbox.height(), c, pixels)
}

/// Fixed crop rectangles keyed by cycle state, for frames of a given size.
///
/// Serialized as `{"frame_width":W,"frame_height":H,"states":{"4":{...},"9":{...}}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropTable {
    pub frame_width: usize,
    pub frame_height: usize,
    pub states: BTreeMap<u8, BoundingBox>,
}

impl CropTable {
    /// Crop sizes of the reference 720×1080 frames scaled to `width`×`height`,
    /// placed at the generator's anchors.
    pub fn default_for(width: usize, height: usize) -> Result<Self> {
        let mut states = BTreeMap::new();
        for s in [4u8, 9] {
            let state = CycleState::new(s)?;
            states.insert(s, synthgen::crop_rect(state, width, height)?);
        }
        Ok(CropTable {
            frame_width: width,
            frame_height: height,
            states,
        })
    }

    pub fn get(&self, state: CycleState) -> Result<BoundingBox> {
        self.states
            .get(&state.value())
            .copied()
            .ok_or_else(|| Error::invalid(format!("crop table has no entry for state {state}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let table: CropTable = serde_json::from_slice(&fs::read(path)?)?;
        for (s, b) in &table.states {
            CycleState::new(*s)?;
            b.validate_for(table.frame_width, table.frame_height)?;
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

pub fn fixed_crop_for_state(image: &ImageRaster, state: CycleState, table: &CropTable) -> Result<ImageRaster> {
    let rect = table.get(state)?;
    crop(image, &rect)
}
