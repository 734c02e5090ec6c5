use std::fmt;

use serde::de::{self, SeqAccess, Visitor};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Features per vehicle row: presence, x, y, vx, vy.
pub const FEATURES: usize = 5;
pub const PRESENCE: usize = 0;

/// `V x F` kinematic observation. Row 0 is the ego vehicle; absent rows are all zero.
#[derive(Clone, PartialEq)]
pub struct Observation {
    vehicles: usize,
    data: Vec<f64>,
}

impl Observation {
    pub fn zeros(vehicles: usize) -> Self {
        Self { vehicles, data: vec![0.0; vehicles * FEATURES] }
    }

    pub fn from_flat(vehicles: usize, data: Vec<f64>) -> Option<Self> {
        (vehicles > 0 && data.len() == vehicles * FEATURES).then_some(Self { vehicles, data })
    }

    pub fn from_rows(rows: &[[f64; FEATURES]]) -> Self {
        Self { vehicles: rows.len(), data: rows.iter().flatten().copied().collect() }
    }

    pub fn vehicles(&self) -> usize {
        self.vehicles
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * FEATURES..(i + 1) * FEATURES]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * FEATURES..(i + 1) * FEATURES]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(FEATURES)
    }

    pub fn present(&self, i: usize) -> bool {
        self.data[i * FEATURES + PRESENCE] != 0.0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Swaps two vehicle rows in place.
    pub fn swap_rows(&mut self, a: usize, b: usize) {
        for f in 0..FEATURES {
            self.data.swap(a * FEATURES + f, b * FEATURES + f);
        }
    }
}

impl fmt::Debug for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.rows()).finish()
    }
}

impl Serialize for Observation {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.vehicles))?;
        for row in self.rows() {
            seq.serialize_element(row)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Observation {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct RowsVisitor;

        impl<'de> Visitor<'de> for RowsVisitor {
            type Value = Observation;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "a non-empty list of {FEATURES}-element vehicle rows")
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Observation, A::Error> {
                let mut data = Vec::with_capacity(seq.size_hint().unwrap_or(15) * FEATURES);
                let mut vehicles = 0;
                while let Some(row) = seq.next_element::<[f64; FEATURES]>()? {
                    data.extend_from_slice(&row);
                    vehicles += 1;
                }
                if vehicles == 0 {
                    return Err(de::Error::invalid_length(0, &self));
                }
                Ok(Observation { vehicles, data })
            }
        }

        deserializer.deserialize_seq(RowsVisitor)
    }
}
