//! Confusion-matrix segmentation metrics: overall accuracy, mean class
//! accuracy and mean intersection-over-union.

use crate::error::{Error, Result};

/// Counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::invalid("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix {
            classes,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let c = self.classes;
        if truth >= c || pred >= c {
            return Err(Error::Index {
                op: "confusion matrix",
                index: truth.max(pred),
                extent: c,
            });
        }
        self.counts[truth * c + pred] += 1;
        Ok(())
    }

    pub fn add_all(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Shape {
                op: "confusion matrix",
                lhs: vec![truth.len()],
                rhs: vec![pred.len()],
            });
        }
        truth.iter().zip(pred).try_for_each(|(&t, &p)| self.add(t, p))
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "class count mismatch");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes).map(<[u64]>::to_vec).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub oa: f64,
    pub macc: f64,
    pub miou: f64,
    /// `None` for classes absent from both truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    /// `None` for classes absent from the truth.
    pub per_class_acc: Vec<Option<f64>>,
}

impl EvalReport {
    /// Derives all metrics. Classes with no support are left out of the
    /// means rather than counted as zero.
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        let total = confusion.total();
        if total == 0 {
            return Err(Error::data("cannot score an empty confusion matrix"));
        }
        let c = confusion.classes();
        let tp: Vec<u64> = (0..c).map(|k| confusion.get(k, k)).collect();
        let truth: Vec<u64> = (0..c).map(|k| (0..c).map(|p| confusion.get(k, p)).sum()).collect();
        let pred: Vec<u64> = (0..c).map(|k| (0..c).map(|t| confusion.get(t, k)).sum()).collect();

        let per_class_acc: Vec<Option<f64>> = (0..c)
            .map(|k| (truth[k] > 0).then(|| tp[k] as f64 / truth[k] as f64))
            .collect();
        let per_class_iou: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let union = truth[k] + pred[k] - tp[k];
                (union > 0).then(|| tp[k] as f64 / union as f64)
            })
            .collect();
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            present.iter().sum::<f64>() / present.len() as f64
        };
        Ok(EvalReport {
            oa: tp.iter().sum::<u64>() as f64 / total as f64,
            macc: mean(&per_class_acc),
            miou: mean(&per_class_iou),
            per_class_iou,
            per_class_acc,
            confusion,
        })
    }

    pub fn from_predictions(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        let mut cm = ConfusionMatrix::new(classes);
        cm.add_all(truth, pred)?;
        Self::from_confusion(cm)
    }
}
