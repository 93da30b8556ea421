use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Slide-level class. `Positive` is the class of interest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Negative,
    Positive,
}

impl ClassLabel {
    /// Position of this class in a two-element probability vector.
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Negative => 0,
            ClassLabel::Positive => 1,
        }
    }

    pub fn one_hot<T: Scalar>(self) -> Tensor<T> {
        let mut v = vec![T::zero(); 2];
        v[self.index()] = T::one();
        Tensor::vector(v)
    }

    pub fn is_positive(self) -> bool {
        self == ClassLabel::Positive
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassLabel::Negative => "negative",
            ClassLabel::Positive => "positive",
        })
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" | "pos" | "1" => Ok(ClassLabel::Positive),
            "negative" | "neg" | "0" => Ok(ClassLabel::Negative),
            other => Err(Error::Data(format!("unknown class label {other:?}"))),
        }
    }
}

/// Square 8-bit RGB patch, pixels interleaved row by row.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Patch {
    side: usize,
    rgb: Vec<u8>,
}

impl Patch {
    pub fn new(side: usize, rgb: Vec<u8>) -> Result<Self> {
        if side == 0 || rgb.len() != side * side * 3 {
            return Err(Error::Data(format!(
                "patch of side {side} needs {} bytes, got {}",
                side * side * 3,
                rgb.len()
            )));
        }
        Ok(Patch { side, rgb })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.side + col) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Channel-first tensor `[3×p×p]` with values in `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let p = self.side;
        let scale = T::of(1.0 / 255.0);
        let mut data = vec![T::zero(); 3 * p * p];
        for (i, px) in self.rgb.chunks_exact(3).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                data[c * p * p + i] = T::of(v as f64) * scale;
            }
        }
        Tensor::new(vec![3, p, p], data).expect("patch shape")
    }

    /// Rotation by 90 degrees clockwise.
    pub fn rotate90(&self) -> Patch {
        let p = self.side;
        let mut rgb = vec![0u8; self.rgb.len()];
        for r in 0..p {
            for c in 0..p {
                let src = (r * p + c) * 3;
                let dst = (c * p + (p - 1 - r)) * 3;
                rgb[dst..dst + 3].copy_from_slice(&self.rgb[src..src + 3]);
            }
        }
        Patch { side: p, rgb }
    }
}

/// One tissue location, imaged at every scale of its slide.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub id: usize,
    /// Grid cell `(row, col)` used to place the region in heatmaps.
    pub position: Option<(usize, usize)>,
    /// Whether the generator planted class signal here. Unknown for ingested data.
    pub signal: Option<bool>,
    pub patches: BTreeMap<usize, Patch>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slide {
    pub id: String,
    pub label: ClassLabel,
    /// Index of the slide's domain; every slide is its own domain.
    pub domain: usize,
    pub regions: Vec<Region>,
}

impl Slide {
    /// Scales present at every region.
    pub fn scales(&self) -> Vec<usize> {
        self.regions
            .first()
            .map(|r| r.patches.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn patch_size(&self) -> Option<usize> {
        self.regions
            .first()
            .and_then(|r| r.patches.values().next())
            .map(Patch::side)
    }

    pub fn signal_count(&self) -> usize {
        self.regions.iter().filter(|r| r.signal == Some(true)).count()
    }

    /// Grid extent `(rows, cols)` covering every positioned region.
    pub fn grid_extent(&self) -> Option<(usize, usize)> {
        self.regions.iter().try_fold((0, 0), |(rows, cols), r| {
            r.position.map(|(y, x)| (rows.max(y + 1), cols.max(x + 1)))
        })
    }
}

/// One instance of a bag: a region and its patches at every scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub region_id: usize,
    pub position: Option<(usize, usize)>,
    pub signal: Option<bool>,
    pub patches: BTreeMap<usize, Patch>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub id: String,
    pub slide_id: String,
    pub label: ClassLabel,
    pub domain: usize,
    pub instances: Vec<Instance>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn scales(&self) -> Vec<usize> {
        self.instances
            .first()
            .map(|i| i.patches.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Instance tensors at one scale, in instance order.
    pub fn tensors<T: Scalar>(&self, scale: usize) -> Result<Vec<Tensor<T>>> {
        self.instances
            .iter()
            .map(|inst| {
                inst.patches
                    .get(&scale)
                    .map(Patch::to_tensor)
                    .ok_or_else(|| Error::Data(format!("bag {} has no patches at scale {scale}", self.id)))
            })
            .collect()
    }

    /// Instance tensors stacked into one batch `[n×3×p×p]`.
    pub fn batch<T: Scalar>(&self, scale: usize) -> Result<Tensor<T>> {
        Tensor::stack(&self.tensors(scale)?)
    }
}
