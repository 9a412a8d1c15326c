//! Domain types shared by every stage of the pipeline.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Number of anomaly classes the classifier distinguishes.
pub const NUM_CLASSES: usize = 5;

/// Number of states in one assembly cycle.
pub const NUM_STATES: u8 = 21;

/// A physical part of the rocket, bottom to top.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Part {
    Body1,
    Body2,
    Nose,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Body1, Part::Body2, Part::Nose];
}

/// Label set with fixed canonical indices.
///
/// Serialized as the integer index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AnomalyClass {
    NoAnomaly = 0,
    NoNose = 1,
    NoNoseNoBody2 = 2,
    NoNoseNoBody2NoBody1 = 3,
    NoBody1 = 4,
}

impl AnomalyClass {
    pub const ALL: [AnomalyClass; NUM_CLASSES] = [
        AnomalyClass::NoAnomaly,
        AnomalyClass::NoNose,
        AnomalyClass::NoNoseNoBody2,
        AnomalyClass::NoNoseNoBody2NoBody1,
        AnomalyClass::NoBody1,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::invalid(format!("anomaly class index {index} out of range 0..5")))
    }

    pub fn name(self) -> &'static str {
        match self {
            AnomalyClass::NoAnomaly => "NoAnomaly",
            AnomalyClass::NoNose => "NoNose",
            AnomalyClass::NoNoseNoBody2 => "NoNose+NoBody2",
            AnomalyClass::NoNoseNoBody2NoBody1 => "NoNose+NoBody2+NoBody1",
            AnomalyClass::NoBody1 => "NoBody1",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::invalid(format!("unknown anomaly class {name:?}")))
    }

    pub fn missing_parts(self) -> &'static [Part] {
        match self {
            AnomalyClass::NoAnomaly => &[],
            AnomalyClass::NoNose => &[Part::Nose],
            AnomalyClass::NoNoseNoBody2 => &[Part::Nose, Part::Body2],
            AnomalyClass::NoNoseNoBody2NoBody1 => &[Part::Nose, Part::Body2, Part::Body1],
            AnomalyClass::NoBody1 => &[Part::Body1],
        }
    }

    pub fn is_missing(self, part: Part) -> bool {
        self.missing_parts().contains(&part)
    }
}

impl fmt::Display for AnomalyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for AnomalyClass {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(*self as u8)
    }
}

impl<'de> Deserialize<'de> for AnomalyClass {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let idx = u8::deserialize(d)?;
        AnomalyClass::from_index(idx as usize).map_err(serde::de::Error::custom)
    }
}

/// One of the 21 phases of an assembly cycle, `1..=21`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct CycleState(u8);

impl CycleState {
    pub fn new(value: u8) -> Result<Self> {
        if (1..=NUM_STATES).contains(&value) {
            Ok(CycleState(value))
        } else {
            Err(Error::invalid(format!("cycle state {value} outside 1..=21")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = CycleState> {
        (1..=NUM_STATES).map(CycleState)
    }
}

impl fmt::Display for CycleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl<'de> Deserialize<'de> for CycleState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        CycleState::new(v).map_err(serde::de::Error::custom)
    }
}

/// Axis-aligned region of interest, inclusive min and exclusive max.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::invalid(format!(
                "empty bounding box ({x_min},{y_min})-({x_max},{y_max})"
            )));
        }
        Ok(BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Box covering a whole `width`×`height` image.
    pub fn full(width: usize, height: usize) -> Self {
        BoundingBox {
            x_min: 0,
            y_min: 0,
            x_max: width,
            y_max: height,
        }
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    /// Checks the box against image bounds, naming the offending edge.
    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::invalid(format!("empty bounding box {self}")));
        }
        if self.x_max > width {
            return Err(Error::invalid(format!(
                "box {self} right edge x_max={} exceeds width {width}",
                self.x_max
            )));
        }
        if self.y_max > height {
            return Err(Error::invalid(format!(
                "box {self} bottom edge y_max={} exceeds height {height}",
                self.y_max
            )));
        }
        Ok(())
    }

    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let x_min = self.x_min.max(other.x_min);
        let y_min = self.y_min.max(other.y_min);
        let x_max = self.x_max.min(other.x_max);
        let y_max = self.y_max.min(other.y_max);
        (x_min < x_max && y_min < y_max).then_some(BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other).map_or(0, |b| b.area()) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        if union == 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Translates the box by a signed offset.
    pub fn translate(&self, dx: isize, dy: isize) -> Result<BoundingBox> {
        let shift = |v: usize, d: isize| {
            v.checked_add_signed(d)
                .ok_or_else(|| Error::invalid(format!("box {self} shifted by ({dx},{dy}) leaves the image")))
        };
        Ok(BoundingBox {
            x_min: shift(self.x_min, dx)?,
            y_min: shift(self.y_min, dy)?,
            x_max: shift(self.x_max, dx)?,
            y_max: shift(self.y_max, dy)?,
        })
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})x[{},{})", self.x_min, self.x_max, self.y_min, self.y_max)
    }
}
