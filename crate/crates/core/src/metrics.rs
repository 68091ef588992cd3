//! Confusion matrices and intersection-over-union scores.

use std::fmt::Write as _;
use std::ops::AddAssign;

use crate::error::{MadanError, Result};

/// `L×L` pixel counts; entry `(g, p)` counts pixels with ground truth `g`
/// predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Builds a matrix from rows indexed by ground truth.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let l = rows.len();
        if rows.iter().any(|r| r.len() != l) {
            return Err(MadanError::range("confusion matrix", "rows must form a square matrix"));
        }
        Ok(Self {
            classes: l,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one pixel per position of `pred`/`gt`.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(MadanError::range(
                "prediction",
                format!("{} predicted pixels for {} labels", pred.len(), gt.len()),
            ));
        }
        let l = self.classes;
        if let Some(&bad) = pred.iter().chain(gt).find(|&&c| c as usize >= l) {
            return Err(MadanError::range("class", format!("{bad} outside [0, {l})")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g as usize * l + p as usize] += 1;
        }
        Ok(())
    }

    /// Per-class IoU (`None` where a class is absent from both prediction
    /// and ground truth) and their mean over defined classes.
    pub fn iou(&self) -> Result<Iou> {
        if self.total() == 0 {
            return Err(MadanError::range("confusion matrix", "no pixels evaluated"));
        }
        let l = self.classes;
        let per_class: Vec<Option<f64>> = (0..l)
            .map(|c| {
                let row: u64 = (0..l).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..l).map(|g| self.get(g, c)).sum();
                let tp = self.get(c, c);
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = defined.iter().sum::<f64>() / defined.len() as f64;
        Ok(Iou { per_class, miou })
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        assert_eq!(self.classes, rhs.classes, "class count mismatch");
        for (a, b) in self.counts.iter_mut().zip(&rhs.counts) {
            *a += b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Iou {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// CSV header: class names followed by `miou`.
pub fn report_header(class_names: &[&str]) -> String {
    let mut s = class_names.join(",");
    s.push_str(",miou");
    s
}

/// One CSV row of per-class IoU and mIoU with three decimals. Undefined
/// classes are written as `nan`.
pub fn report(cm: &ConfusionMatrix, class_names: &[&str]) -> Result<String> {
    if class_names.len() != cm.classes() {
        return Err(MadanError::range(
            "class names",
            format!("{} names for {} classes", class_names.len(), cm.classes()),
        ));
    }
    let iou = cm.iou()?;
    let mut row = String::new();
    for v in &iou.per_class {
        match v {
            Some(v) => write!(row, "{v:.3},").expect("string write"),
            None => row.push_str("nan,"),
        }
    }
    write!(row, "{:.3}", iou.miou).expect("string write");
    Ok(row)
}

/// Nearest-neighbour resize of a row-major label map.
pub fn resize_nearest(labels: &[u8], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = y * h / out_h;
        for x in 0..out_w {
            out.push(labels[sy * w + x * w / out_w]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![1, 3]]).unwrap();
        let iou = cm.iou().unwrap();
        assert_eq!(iou.per_class, vec![Some(0.6), Some(0.6)]);
        assert!((iou.miou - 0.6).abs() < 1e-15);
        assert_eq!(report(&cm, &["a", "b"]).unwrap(), "0.600,0.600,0.600");
    }

    #[test]
    fn diagonal_accumulation() {
        let mut cm = ConfusionMatrix::new(5);
        cm.accumulate(&[3; 100], &[3; 100]).unwrap();
        assert_eq!(cm.get(3, 3), 100);
        assert_eq!(cm.total(), 100);
        let iou = cm.iou().unwrap();
        assert_eq!(iou.per_class[3], Some(1.0));
        assert_eq!(iou.per_class.iter().flatten().count(), 1);
        assert_eq!(iou.miou, 1.0);
        assert_eq!(
            report(&cm, &["a", "b", "c", "d", "e"]).unwrap(),
            "nan,nan,nan,1.000,nan,1.000"
        );
    }

    #[test]
    fn errors() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.iou().is_err());
        assert!(cm.accumulate(&[0, 2], &[0, 1]).is_err());
        assert!(cm.accumulate(&[0], &[0, 1]).is_err());
        cm.accumulate(&[0], &[1]).unwrap();
        assert!(report(&cm, &["a"]).is_err());
    }

    #[test]
    fn header_shape() {
        assert_eq!(report_header(&["road", "sky"]), "road,sky,miou");
    }

    #[test]
    fn resize_identity_and_upsample() {
        let l = vec![1, 2, 3, 4];
        assert_eq!(resize_nearest(&l, 2, 2, 2, 2), l);
        assert_eq!(
            resize_nearest(&l, 2, 2, 4, 4),
            vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]
        );
    }
}
