//! Class-mean IoU and Dice over binary predictions.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How logits become hard labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Each channel independently: `sigmoid(x) > 0.5`, i.e. `x > 0`.
    #[default]
    MultiLabel,
    /// One-hot argmax over channels (first maximum wins ties).
    MultiClass,
}

/// Where intersections and unions are summed before dividing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Counts pooled over every image, then one ratio per class.
    #[default]
    Dataset,
    /// Ratio per image, averaged over images.
    PerImage,
}

pub fn binarize_logits<T: Scalar>(logits: &Tensor<T>, mode: LabelMode) -> Tensor<T> {
    match mode {
        LabelMode::MultiLabel => {
            Tensor::from_fn(logits.dims(), |idx| if logits.at(idx) > T::zero() { T::one() } else { T::zero() })
        }
        LabelMode::MultiClass => {
            let [n, k, h, w] = logits.dims();
            let mut out = Tensor::zeros(logits.dims());
            for b in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let best = (0..k)
                            .reduce(|a, c| if logits.at([b, c, i, j]) > logits.at([b, a, i, j]) { c } else { a })
                            .expect("k > 0");
                        out.set([b, best, i, j], T::one());
                    }
                }
            }
            out
        }
    }
}

/// Pixel counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub intersection: u64,
    pub union: u64,
    pub pred: u64,
    pub target: u64,
}

impl ClassCounts {
    /// `|X n Y| / |X u Y|`, 1 when both are empty.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    /// `2 |X n Y| / (|X| + |Y|)`, 1 when both are empty.
    pub fn dice(&self) -> f64 {
        let den = self.pred + self.target;
        if den == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / den as f64
        }
    }

    fn merge(&mut self, o: &ClassCounts) {
        self.intersection += o.intersection;
        self.union += o.union;
        self.pred += o.pred;
        self.target += o.target;
    }
}

/// Per-class confusion counts; merging is associative and commutative.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub classes: Vec<ClassCounts>,
}

fn check_pair<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(shape_err!("prediction {:?} vs target {:?}", pred.dims(), target.dims()));
    }
    for (what, t) in [("prediction", pred), ("target", target)] {
        if let Some(i) = t.data().iter().position(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::Value(format!("{what} element {i} is not binary")));
        }
    }
    Ok(())
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        Self { classes: vec![ClassCounts::default(); classes] }
    }

    pub fn from_masks<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Self> {
        check_pair(pred, target)?;
        let [n, k, h, w] = pred.dims();
        let hw = h * w;
        let mut out = Self::new(k);
        for b in 0..n {
            for (c, counts) in out.classes.iter_mut().enumerate() {
                let base = (b * k + c) * hw;
                let p = &pred.data()[base..base + hw];
                let t = &target.data()[base..base + hw];
                for (&pv, &tv) in p.iter().zip(t) {
                    let (pv, tv) = (pv == T::one(), tv == T::one());
                    counts.intersection += (pv && tv) as u64;
                    counts.union += (pv || tv) as u64;
                    counts.pred += pv as u64;
                    counts.target += tv as u64;
                }
            }
        }
        Ok(out)
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if self.classes.is_empty() {
            self.classes = vec![ClassCounts::default(); other.classes.len()];
        }
        if self.classes.len() != other.classes.len() {
            return Err(shape_err!("merging {} classes with {}", self.classes.len(), other.classes.len()));
        }
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.merge(b);
        }
        Ok(())
    }

    pub fn miou(&self) -> f64 {
        self.classes.iter().map(ClassCounts::iou).sum::<f64>() / self.classes.len() as f64
    }

    pub fn dsc(&self) -> f64 {
        self.classes.iter().map(ClassCounts::dice).sum::<f64>() / self.classes.len() as f64
    }
}

/// Batch-pooled class-mean IoU.
pub fn miou<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, target)?.miou())
}

/// Batch-pooled class-mean Dice.
pub fn dsc<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, target)?.dsc())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub miou: f64,
    pub dsc: f64,
}

/// Accumulates both pooling conventions over a stream of batches.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    pooled: ConfusionCounts,
    image_miou_sum: f64,
    image_dsc_sum: f64,
    images: usize,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<T: Scalar>(&mut self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
        check_pair(pred, target)?;
        for b in 0..pred.dims()[0] {
            let c = ConfusionCounts::from_masks(&pred.batch_slice(b, 1)?, &target.batch_slice(b, 1)?)?;
            self.image_miou_sum += c.miou();
            self.image_dsc_sum += c.dsc();
            self.images += 1;
            self.pooled.merge(&c)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) -> Result<()> {
        self.pooled.merge(&other.pooled)?;
        self.image_miou_sum += other.image_miou_sum;
        self.image_dsc_sum += other.image_dsc_sum;
        self.images += other.images;
        Ok(())
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn counts(&self) -> &ConfusionCounts {
        &self.pooled
    }

    pub fn scores(&self, pooling: Pooling) -> Result<Scores> {
        if self.images == 0 {
            return Err(Error::Dataset("no images were evaluated".into()));
        }
        Ok(match pooling {
            Pooling::Dataset => Scores { miou: self.pooled.miou(), dsc: self.pooled.dsc() },
            Pooling::PerImage => {
                Scores { miou: self.image_miou_sum / self.images as f64, dsc: self.image_dsc_sum / self.images as f64 }
            }
        })
    }
}
