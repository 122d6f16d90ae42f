use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Dense integer class map, row-major, usually `[B, H, W]` or `[H, W]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    shape: Vec<usize>,
    data: Vec<usize>,
}

impl LabelMap {
    pub fn new(shape: &[usize], data: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n == 0 || n != data.len() {
            return Err(Error::shape(
                "label_map",
                format!("shape {shape:?} with {} values", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![0; shape.iter().product()]).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [usize] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max_label(&self) -> usize {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn check_range(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l >= num_classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
            None => Ok(()),
        }
    }

    /// Per-class pixel counts; labels `>= num_classes` are not counted.
    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &l in &self.data {
            if let Some(n) = h.get_mut(l) {
                *n += 1;
            }
        }
        h
    }

    /// Channel argmax of NCHW scores; ties go to the lowest class index.
    pub fn argmax(scores: &Tensor) -> Result<Self> {
        let s = scores.shape();
        if s.len() != 4 {
            return Err(Error::shape("argmax", format!("expected NCHW, got {s:?}")));
        }
        let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
        let x = scores.data();
        let mut out = Vec::with_capacity(b * plane);
        for bi in 0..b {
            for p in 0..plane {
                let mut best = 0;
                for ci in 1..c {
                    if x[(bi * c + ci) * plane + p] > x[(bi * c + best) * plane + p] {
                        best = ci;
                    }
                }
                out.push(best);
            }
        }
        Self::new(&[b, s[2], s[3]], out)
    }

    /// Stacks equally shaped maps along a new leading axis.
    pub fn stack(maps: &[&LabelMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::invalid("label_stack", "no maps"))?;
        let mut data = Vec::with_capacity(first.len() * maps.len());
        for m in maps {
            if m.shape != first.shape {
                return Err(Error::shape(
                    "label_stack",
                    format!("{:?} vs {:?}", m.shape, first.shape),
                ));
            }
            data.extend_from_slice(&m.data);
        }
        let mut shape = vec![maps.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(&shape, data)
    }
}
