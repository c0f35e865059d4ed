use crate::error::{Error, Result};
use crate::tensor::IGNORE_LABEL;

/// Pixel confusion matrix; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetricState {
    num_classes: usize,
    counts: Vec<u64>,
}

impl MetricState {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::dim("confusion matrix must be C×C"));
        }
        Ok(Self { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Scores one prediction map; ignored labels are skipped.
    pub fn update(&mut self, pred: &[u8], labels: &[u8]) -> Result<()> {
        if pred.len() != labels.len() {
            return Err(Error::dim(format!("{} predictions for {} labels", pred.len(), labels.len())));
        }
        for (&p, &t) in pred.iter().zip(labels) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.num_classes || t >= self.num_classes {
                return Err(Error::Data(format!("class index {} out of range", p.max(t))));
            }
            self.counts[t * self.num_classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricState) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::dim("cannot merge confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let correct: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| correct as f64 / total as f64)
    }
}

/// Per-class IoU (`None` for classes with empty union) and their mean.
pub fn miou(conf: &MetricState) -> Result<(Vec<Option<f64>>, f64)> {
    let n = conf.num_classes();
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let tp = conf.get(c, c);
            let fp: u64 = (0..n).filter(|&t| t != c).map(|t| conf.get(t, c)).sum();
            let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| conf.get(c, p)).sum();
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::Data("mIoU undefined: every class has an empty union".into()));
    }
    Ok((per_class.clone(), scored.iter().sum::<f64>() / scored.len() as f64))
}
