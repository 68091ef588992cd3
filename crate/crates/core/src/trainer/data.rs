//! In-memory domain tensors and per-step batch assembly.

use madan_nn::Tensor;

use crate::datagen::Dataset;
use crate::error::{MadanError, Result};
use crate::rng::{self, Rng};

/// One domain's images as a `[N, 3, H, W]` tensor in `[-1, 1]`, plus labels
/// (`N×H×W`) for labeled domains.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<u8>>,
}

impl DomainData {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(MadanError::Rejected(format!(
                "dataset `{}` is empty",
                ds.manifest.domain_id
            )));
        }
        let parts: Vec<Tensor<f32>> = ds
            .iter()
            .map(|s| {
                let t = s.image.to_tensor::<f32>();
                let shape = [1, 3, s.image.height, s.image.width];
                t.reshape(&shape)
            })
            .collect::<std::result::Result<_, _>>()?;
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        let images = Tensor::stack_batch(&refs)?;
        let labels = ds.is_labeled().then(|| {
            ds.iter()
                .flat_map(|s| s.label.as_ref().expect("labeled").data.iter().copied())
                .collect()
        });
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    /// Concatenation of several domains (all labeled or all unlabeled).
    pub fn concat(parts: &[&DomainData]) -> Result<Self> {
        let imgs: Vec<&Tensor<f32>> = parts.iter().map(|d| &d.images).collect();
        let images = Tensor::stack_batch(&imgs)?;
        let labels = if parts.iter().all(|d| d.labels.is_some()) {
            Some(parts.iter().flat_map(|d| d.labels.clone().expect("checked")).collect())
        } else {
            None
        };
        Ok(Self { images, labels })
    }

    /// Gathers `indices`, optionally taking a random `crop × crop` window
    /// per sample.
    pub fn batch(&self, indices: &[usize], crop: Option<(usize, &mut Rng)>) -> Result<(Tensor<f32>, Option<Vec<u8>>)> {
        let (h, w) = (self.height(), self.width());
        let (ch, cw, mut rng) = match crop {
            Some((c, r)) if c < h || c < w => {
                if c > h || c > w {
                    return Err(MadanError::range("crop", format!("{c} larger than {h}x{w}")));
                }
                (c, c, Some(r))
            }
            _ => (h, w, None),
        };
        let mut img = Vec::with_capacity(indices.len() * 3 * ch * cw);
        let mut lab = self
            .labels
            .as_ref()
            .map(|_| Vec::with_capacity(indices.len() * ch * cw));
        let src = self.images.data();
        for &i in indices {
            let (oy, ox) = match rng.as_deref_mut() {
                Some(r) => (
                    rng::int_in(r, 0, (h - ch) as i64) as usize,
                    rng::int_in(r, 0, (w - cw) as i64) as usize,
                ),
                None => (0, 0),
            };
            for c in 0..3 {
                for y in 0..ch {
                    let row = ((i * 3 + c) * h + oy + y) * w + ox;
                    img.extend_from_slice(&src[row..row + cw]);
                }
            }
            if let (Some(out), Some(all)) = (lab.as_mut(), self.labels.as_ref()) {
                for y in 0..ch {
                    let row = (i * h + oy + y) * w + ox;
                    out.extend_from_slice(&all[row..row + cw]);
                }
            }
        }
        Ok((Tensor::from_vec(&[indices.len(), 3, ch, cw], img)?, lab))
    }
}

/// Batch positions of one epoch: step `s` covers `[s·b, min((s+1)·b, n))`
/// of a reference size `n`; each domain maps positions through its own
/// permutation, wrapping when it is smaller than `n`.
#[derive(Clone, Debug)]
pub struct EpochOrder {
    pub perm: Vec<usize>,
}

impl EpochOrder {
    pub fn new(r: &mut Rng, len: usize) -> Self {
        Self {
            perm: rng::permutation(r, len),
        }
    }

    pub fn indices(&self, step: usize, batch: usize, reference: usize) -> Vec<usize> {
        let start = step * batch;
        let end = ((step + 1) * batch).min(reference);
        (start..end).map(|p| self.perm[p % self.perm.len()]).collect()
    }
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn domain(n: usize, h: usize, w: usize) -> DomainData {
        let data = (0..n * 3 * h * w).map(|i| i as f32).collect();
        DomainData {
            images: Tensor::from_vec(&[n, 3, h, w], data).unwrap(),
            labels: Some((0..n * h * w).map(|i| (i % 5) as u8).collect()),
        }
    }

    #[test]
    fn full_batch_gathers_samples() {
        let d = domain(3, 2, 2);
        let (x, y) = d.batch(&[2, 0], None).unwrap();
        assert_eq!(x.shape(), &[2, 3, 2, 2]);
        assert_eq!(x.data()[0], 24.0);
        assert_eq!(x.data()[12], 0.0);
        assert_eq!(y.unwrap(), vec![3, 4, 0, 1, 0, 1, 2, 3]);
    }

    #[test]
    fn crops_align_images_and_labels() {
        let d = domain(2, 8, 8);
        let mut r = rng::stream(1, 2);
        let (x, y) = d.batch(&[1], Some((4, &mut r))).unwrap();
        let y = y.unwrap();
        assert_eq!(x.shape(), &[1, 3, 4, 4]);
        // channel-0 value encodes the absolute pixel, which fixes the label
        for p in 0..16 {
            let v = x.data()[p] as usize - 3 * 64;
            assert_eq!(y[p] as usize, (64 + v) % 5);
        }
    }

    #[test]
    fn order_covers_reference_and_wraps() {
        let mut r = rng::stream(3, 0);
        let o = EpochOrder::new(&mut r, 5);
        let all: Vec<usize> = (0..steps_per_epoch(5, 2)).flat_map(|s| o.indices(s, 2, 5)).collect();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        let small = EpochOrder::new(&mut r, 2);
        assert_eq!(small.indices(1, 2, 5).len(), 2);
        assert_eq!(small.indices(2, 2, 5).len(), 1);
    }
}
