//! Confusion-matrix segmentation metrics.

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};

/// K×K pixel counts; entry `(g, p)` counts pixels of truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    ignore: Option<u32>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// Empty matrix with the default ignore label.
    pub fn new(classes: usize) -> Self {
        Self::with_ignore(classes, Some(IGNORE_LABEL))
    }

    pub fn with_ignore(classes: usize, ignore: Option<u32>) -> Self {
        ConfusionMatrix {
            classes,
            ignore,
            counts: vec![0; classes * classes],
        }
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape(format!(
                "{} counts for a {classes}x{classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix {
            classes,
            ignore: Some(IGNORE_LABEL),
            counts,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    /// Adds every scored pixel of a truth/prediction pair.
    ///
    /// Pixels whose truth is the ignore label are skipped. Any other label
    /// outside `0..classes` is an error and leaves the matrix untouched.
    pub fn accumulate(&mut self, truth: &LabelMap, pred: &LabelMap) -> Result<()> {
        if truth.dims() != pred.dims() {
            return Err(Error::shape(format!(
                "truth {:?} and prediction {:?} differ in shape",
                truth.dims(),
                pred.dims()
            )));
        }
        let k = self.classes as u32;
        let mut delta = vec![0u64; self.counts.len()];
        for (&t, &p) in truth.data().iter().zip(pred.data()) {
            if Some(t) == self.ignore {
                continue;
            }
            if t >= k || p >= k {
                return Err(Error::shape(format!("label pair ({t}, {p}) outside {k} classes")));
            }
            delta[t as usize * self.classes + p as usize] += 1;
        }
        for (c, d) in self.counts.iter_mut().zip(delta) {
            *c += d;
        }
        Ok(())
    }

    /// Elementwise sum of two matrices over the same classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("cannot merge matrices over different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` where the class is absent from both truth and prediction.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..self.classes).map(|p| self.get(k, p)).sum();
                let col: u64 = (0..self.classes).map(|g| self.get(g, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over defined per-class IoUs.
    pub fn mean_iou(&self) -> Result<f64> {
        let defined: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(Error::Undefined("mean IoU of an empty confusion matrix".into()));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// Fraction of scored pixels predicted correctly.
    pub fn global_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Undefined("accuracy of an empty confusion matrix".into()));
        }
        Ok(self.trace() as f64 / total as f64)
    }

    /// Per-class IoU table followed by mIoU and global accuracy rows.
    pub fn to_table(&self, names: Option<&[String]>) -> Result<String> {
        let label = |k: usize| {
            names
                .and_then(|n| n.get(k).cloned())
                .unwrap_or_else(|| format!("class {k}"))
        };
        let width = (0..self.classes).map(|k| label(k).len()).max().unwrap_or(0).max(15);
        let mut s = format!("{:<width$}  {:>8}\n", "class", "IoU");
        for (k, iou) in self.iou_per_class().into_iter().enumerate() {
            let v = iou.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}%", 100.0 * v));
            s.push_str(&format!("{:<width$}  {:>8}\n", label(k), v));
        }
        s.push_str(&format!("{:<width$}  {:>7.2}%\n", "mean IoU", 100.0 * self.mean_iou()?));
        s.push_str(&format!(
            "{:<width$}  {:>7.2}%\n",
            "global accuracy",
            100.0 * self.global_accuracy()?
        ));
        Ok(s)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut s = String::from("class,iou\n");
        for (k, iou) in self.iou_per_class().into_iter().enumerate() {
            match iou {
                Some(v) => s.push_str(&format!("{k},{v:.6}\n")),
                None => s.push_str(&format!("{k},\n")),
            }
        }
        s.push_str(&format!("mean_iou,{:.6}\n", self.mean_iou()?));
        s.push_str(&format!("global_accuracy,{:.6}\n", self.global_accuracy()?));
        Ok(s)
    }
}
