//! Scene matrices: fixed-size stacks of per-object geometry rows.
//!
//! Each row holds a centroid (3), three row-stacked unit axes (9) and the
//! axis-aligned box extents (3), all in meters before normalization. Object
//! labels are kept beside the matrix, aligned by row, and padding rows carry
//! the reserved [`EMPTY_LABEL`].

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMPTY_LABEL: &str = "empty";
/// Default maximum number of objects per scene.
pub const DEFAULT_MAX_OBJECTS: usize = 20;
/// Geometry values per object row.
pub const ROW_DIM: usize = 15;
pub const CENTROID: Range<usize> = 0..3;
pub const AXES: Range<usize> = 3..12;
pub const SIZE: Range<usize> = 12..15;

/// Margin added on each side of the fitted per-dimension range, as a
/// fraction of its width.
const NORMALIZER_MARGIN: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub label: String,
    pub centroid: [f64; 3],
    pub axes: [f64; 9],
    pub size: [f64; 3],
}

impl SceneObject {
    /// An upright object with identity axes.
    pub fn axis_aligned(label: impl Into<String>, centroid: [f64; 3], size: [f64; 3]) -> Self {
        Self {
            label: label.into(),
            centroid,
            axes: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            size,
        }
    }

    pub fn empty() -> Self {
        Self {
            label: EMPTY_LABEL.to_string(),
            centroid: [0.0; 3],
            axes: [0.0; 9],
            size: [0.0; 3],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.label == EMPTY_LABEL
    }

    pub fn to_row(&self) -> [f64; ROW_DIM] {
        let mut row = [0.0; ROW_DIM];
        row[CENTROID].copy_from_slice(&self.centroid);
        row[AXES].copy_from_slice(&self.axes);
        row[SIZE].copy_from_slice(&self.size);
        row
    }

    pub fn from_row(label: impl Into<String>, row: &[f64]) -> Self {
        let mut o = Self::empty();
        o.label = label.into();
        o.centroid.copy_from_slice(&row[CENTROID]);
        o.axes.copy_from_slice(&row[AXES]);
        o.size.copy_from_slice(&row[SIZE]);
        o
    }

    /// Lower and upper corners of the axis-aligned extent.
    pub fn aabb(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for k in 0..3 {
            lo[k] = self.centroid[k] - 0.5 * self.size[k];
            hi[k] = self.centroid[k] + 0.5 * self.size[k];
        }
        (lo, hi)
    }
}

/// Volume in cubic meters; errors on `empty` objects.
pub fn object_volume(obj: &SceneObject) -> Result<f64> {
    if obj.is_empty() {
        return Err(Error::invalid("volume of an empty object is undefined"));
    }
    Ok(obj.size.iter().product())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneMatrix {
    rows: Tensor,
    labels: Vec<String>,
}

impl SceneMatrix {
    pub fn new(rows: Tensor, labels: Vec<String>) -> Result<Self> {
        if rows.shape().len() != 2 || rows.shape()[1] != ROW_DIM || rows.shape()[0] != labels.len() {
            return Err(Error::Shape {
                op: "scene_matrix",
                lhs: rows.shape().to_vec(),
                rhs: vec![labels.len(), ROW_DIM],
            });
        }
        Ok(Self { rows, labels })
    }

    pub fn n_max(&self) -> usize {
        self.labels.len()
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn into_rows(self) -> Tensor {
        self.rows
    }

    pub fn is_empty_row(&self, i: usize) -> bool {
        self.labels[i] == EMPTY_LABEL
    }

    pub fn object_count(&self) -> usize {
        self.labels.iter().filter(|l| *l != EMPTY_LABEL).count()
    }

    pub fn object(&self, i: usize) -> SceneObject {
        SceneObject::from_row(self.labels[i].clone(), self.rows.row(i))
    }

    /// Non-empty objects in row order.
    pub fn objects(&self) -> Vec<SceneObject> {
        (0..self.n_max())
            .filter(|&i| !self.is_empty_row(i))
            .map(|i| self.object(i))
            .collect()
    }

    /// Same labels, different geometry.
    pub fn with_rows(&self, rows: Tensor) -> Result<Self> {
        Self::new(rows, self.labels.clone())
    }
}

/// Places `objects` in rows `0..k` and fills the rest with `empty` rows.
pub fn pad_scene(objects: &[SceneObject], n_max: usize) -> Result<SceneMatrix> {
    if objects.len() > n_max {
        return Err(Error::invalid(format!(
            "scene has {} objects but the matrix holds at most {n_max}",
            objects.len()
        )));
    }
    let mut rows = Tensor::zeros(&[n_max, ROW_DIM]);
    let mut labels = vec![EMPTY_LABEL.to_string(); n_max];
    for (i, o) in objects.iter().enumerate() {
        if !o.is_empty() {
            rows.row_mut(i).copy_from_slice(&o.to_row());
        }
        labels[i] = o.label.clone();
    }
    SceneMatrix::new(rows, labels)
}

/// Per-dimension affine map of geometry onto `[-1, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Result of [`Normalizer::normalize`].
#[derive(Clone, Debug)]
pub struct Normalized {
    pub scene: SceneMatrix,
    /// Entries of non-empty rows that landed outside `[-1, 1]`.
    pub out_of_range: usize,
}

impl Normalizer {
    /// Fits min/max over the non-empty rows of `scenes`, inflated by 1% per side.
    /// A constant dimension gets a half-width of `max(1% of |v|, 1e-3)`.
    pub fn fit(scenes: &[SceneMatrix]) -> Result<Self> {
        let mut min = vec![f64::INFINITY; ROW_DIM];
        let mut max = vec![f64::NEG_INFINITY; ROW_DIM];
        let mut seen = false;
        for s in scenes {
            for i in 0..s.n_max() {
                if s.is_empty_row(i) {
                    continue;
                }
                seen = true;
                for (d, &v) in s.rows.row(i).iter().enumerate() {
                    min[d] = min[d].min(v);
                    max[d] = max[d].max(v);
                }
            }
        }
        if !seen {
            return Err(Error::invalid("cannot fit a normalizer without any objects"));
        }
        for d in 0..ROW_DIM {
            let width = max[d] - min[d];
            let pad = if width > 0.0 {
                NORMALIZER_MARGIN * width
            } else {
                (NORMALIZER_MARGIN * min[d].abs()).max(1e-3)
            };
            min[d] -= pad;
            max[d] += pad;
        }
        Ok(Self { min, max })
    }

    pub fn is_fitted(&self) -> bool {
        self.min.len() == ROW_DIM && self.max.len() == ROW_DIM
    }

    fn check(&self) -> Result<()> {
        if !self.is_fitted() {
            return Err(Error::UnfittedNormalizer);
        }
        Ok(())
    }

    #[inline]
    pub fn normalize_value(&self, dim: usize, v: f64) -> f64 {
        2.0 * (v - self.min[dim]) / (self.max[dim] - self.min[dim]) - 1.0
    }

    #[inline]
    pub fn denormalize_value(&self, dim: usize, v: f64) -> f64 {
        (v + 1.0) * 0.5 * (self.max[dim] - self.min[dim]) + self.min[dim]
    }

    /// Maps every non-empty row into normalized space; empty rows become exact zeros.
    /// Values outside the fitted range are left unclamped and counted.
    pub fn normalize(&self, scene: &SceneMatrix) -> Result<Normalized> {
        self.check()?;
        let mut rows = Tensor::zeros(scene.rows.shape());
        let mut out_of_range = 0;
        for i in 0..scene.n_max() {
            if scene.is_empty_row(i) {
                continue;
            }
            for d in 0..ROW_DIM {
                let v = self.normalize_value(d, scene.rows.get(i, d));
                if !(-1.0..=1.0).contains(&v) {
                    out_of_range += 1;
                }
                rows.set(i, d, v);
            }
        }
        Ok(Normalized {
            scene: scene.with_rows(rows)?,
            out_of_range,
        })
    }

    /// Inverse of [`Normalizer::normalize`]; empty rows become world-space zeros.
    pub fn denormalize(&self, scene: &SceneMatrix) -> Result<SceneMatrix> {
        self.check()?;
        let mut rows = Tensor::zeros(scene.rows.shape());
        for i in 0..scene.n_max() {
            if scene.is_empty_row(i) {
                continue;
            }
            for d in 0..ROW_DIM {
                rows.set(i, d, self.denormalize_value(d, scene.rows.get(i, d)));
            }
        }
        scene.with_rows(rows)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundingBox {
    pub centroid: [f64; 3],
    /// Row-stacked unit axes.
    pub axes: [[f64; 3]; 3],
    pub size: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBox {
    pub label: String,
    pub bbox: BoundingBox,
}

fn unit_axes(raw: &[f64]) -> [[f64; 3]; 3] {
    let mut axes = [[0.0; 3]; 3];
    for (k, axis) in axes.iter_mut().enumerate() {
        let v = &raw[3 * k..3 * k + 3];
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            for j in 0..3 {
                axis[j] = v[j] / n;
            }
        } else {
            axis[k] = 1.0;
        }
    }
    axes
}

/// Decodes a normalized scene into world-space labeled boxes, dropping empty
/// rows. Axis vectors are rescaled to unit length; a zero axis falls back to
/// the corresponding world axis.
pub fn to_bounding_boxes(scene: &SceneMatrix, norm: &Normalizer) -> Result<Vec<LabeledBox>> {
    let world = norm.denormalize(scene)?;
    Ok((0..world.n_max())
        .filter(|&i| !world.is_empty_row(i))
        .map(|i| {
            let row = world.rows.row(i);
            LabeledBox {
                label: world.labels[i].clone(),
                bbox: BoundingBox {
                    centroid: [row[0], row[1], row[2]],
                    axes: unit_axes(&row[AXES]),
                    size: [row[12], row[13], row[14]],
                },
            }
        })
        .collect())
}

/// On-disk scene document. Only non-empty objects are listed; padding is
/// implied by `n_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub n_max: usize,
    pub objects: Vec<SceneObject>,
}

impl SceneFile {
    pub fn from_scene(scene: &SceneMatrix) -> Self {
        Self {
            n_max: scene.n_max(),
            objects: scene.objects(),
        }
    }

    pub fn to_scene(&self) -> Result<SceneMatrix> {
        pad_scene(&self.objects, self.n_max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
