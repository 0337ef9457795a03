use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter storage with a named segment layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParamVector {
    pub fn zeros(shapes: &[(&str, Vec<usize>)]) -> Self {
        let mut layout = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (name, shape) in shapes {
            let seg = Segment {
                name: (*name).to_string(),
                shape: shape.clone(),
                offset,
            };
            offset += seg.len();
            layout.push(seg);
        }
        Self {
            values: vec![0.0; offset],
            layout,
        }
    }

    pub fn from_parts(values: Vec<f64>, layout: Vec<Segment>) -> Result<Self> {
        let total: usize = layout.iter().map(Segment::len).sum();
        if total != values.len() {
            return Err(Error::Shape(format!(
                "layout covers {total} values but {} were supplied",
                values.len()
            )));
        }
        let mut expected = 0;
        for seg in &layout {
            if seg.offset != expected {
                return Err(Error::Shape(format!("segment {} is not contiguous", seg.name)));
            }
            expected += seg.len();
        }
        Ok(Self { values, layout })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn segment(&self, i: usize) -> &[f64] {
        let s = &self.layout[i];
        &self.values[s.offset..s.offset + s.len()]
    }

    pub fn segment_mut(&mut self, i: usize) -> &mut [f64] {
        let s = &self.layout[i];
        let (o, l) = (s.offset, s.len());
        &mut self.values[o..o + l]
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.layout == other.layout
    }

    pub fn require_same_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Shape("parameter layouts differ".into()))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, other: &Self, c: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
