//! Dataset ingestion, preprocessing, consensus relabeling, synthetic data
//! generation and the on-disk format.

mod io;
mod synth;

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::metrics::{Provenance, SoftMap};
use crate::{Error, Result};

pub use io::{load_case, load_dataset, load_prediction, save_case, save_dataset, save_prediction};
pub use synth::{synth_generate, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "MR")]
    Mr,
    #[serde(rename = "CT")]
    Ct,
}

/// Rectangle of the original content inside a padded image; allows exact
/// inversion of [`pad_to_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropRecord {
    pub fn identity(height: usize, width: usize) -> Self {
        CropRecord {
            top: 0,
            left: 0,
            height,
            width,
        }
    }
}

/// One image with its rater masks.
#[derive(Debug, Clone)]
pub struct CaseRecord {
    pub case_id: String,
    pub modality: Modality,
    /// `(C, H, W)`
    pub image: Array3<f32>,
    /// N binary masks, each `(H, W)` with values 0/1.
    pub raters: Vec<Array2<u8>>,
    /// Present when the case was padded by preprocessing.
    pub crop: Option<CropRecord>,
}

impl CaseRecord {
    pub fn validate(&self) -> Result<()> {
        let (_, h, w) = self.image.dim();
        for (i, m) in self.raters.iter().enumerate() {
            if m.dim() != (h, w) {
                return Err(Error::Dataset {
                    case_id: self.case_id.clone(),
                    message: format!(
                        "rater {i} mask shape {:?} does not match image ({h}, {w})",
                        m.dim()
                    ),
                });
            }
            if m.iter().any(|&v| v > 1) {
                return Err(Error::Dataset {
                    case_id: self.case_id.clone(),
                    message: format!("rater {i} mask is not strictly binary"),
                });
            }
        }
        Ok(())
    }

    pub fn n_raters(&self) -> usize {
        self.raters.len()
    }
}

/// Consensus-level masks: level k marks the pixels where at least k of the
/// N raters agree, so levels are nested.
#[derive(Debug, Clone)]
pub struct ConsensusLabels {
    /// Per-pixel agreement counts in `0..=N`.
    pub counts: Array2<u8>,
    pub n_raters: usize,
}

impl ConsensusLabels {
    /// The binary mask of consensus level `k` (1-based).
    pub fn level(&self, k: usize) -> Array2<u8> {
        assert!(k >= 1 && k <= self.n_raters, "level {k} out of range");
        let k = k as u8;
        self.counts.mapv(|c| u8::from(c >= k))
    }

    pub fn levels(&self) -> Vec<Array2<u8>> {
        (1..=self.n_raters).map(|k| self.level(k)).collect()
    }

    /// One-hot `(n_classes, H, W)` encoding of a level mask.
    pub fn level_one_hot(&self, k: usize, n_classes: usize) -> Array3<f64> {
        one_hot_from_mask(&self.level(k), n_classes)
    }
}

/// Binary mask -> one-hot map with the foreground in class 1.
pub fn one_hot_from_mask(mask: &Array2<u8>, n_classes: usize) -> Array3<f64> {
    assert!(n_classes >= 2);
    let (h, w) = mask.dim();
    let mut t = Array3::<f64>::zeros((n_classes, h, w));
    for y in 0..h {
        for x in 0..w {
            let c = usize::from(mask[[y, x]] > 0);
            t[[c, y, x]] = 1.0;
        }
    }
    t
}

/// Standardizes each channel to mean 0 and population standard deviation 1.
pub fn zscore_normalize(image: &Array3<f32>) -> Result<Array3<f32>> {
    let (c, h, w) = image.dim();
    let m = (h * w) as f64;
    let mut out = image.clone();
    for ci in 0..c {
        let plane = image.slice(s![ci, .., ..]);
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / m;
        let var = plane
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / m;
        if var == 0.0 {
            return Err(Error::Numeric(format!(
                "channel {ci} is constant; z-score normalization undefined"
            )));
        }
        let std = var.sqrt();
        out.slice_mut(s![ci, .., ..])
            .mapv_inplace(|v| ((v as f64 - mean) / std) as f32);
    }
    Ok(out)
}

/// Clips to the intensity window `[lo, hi]` and rescales affinely to [0, 1].
pub fn ct_rescale(image: &Array3<f32>, roi_window: (f32, f32)) -> Result<Array3<f32>> {
    let (lo, hi) = roi_window;
    if lo >= hi || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "CT window low {lo} must be below high {hi}"
        )));
    }
    let span = (hi - lo) as f64;
    Ok(image.mapv(|v| {
        let c = v.clamp(lo, hi);
        ((c - lo) as f64 / span) as f32
    }))
}

fn padded_extent(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Zero-pads a bare image symmetrically up to the next multiple, extra pixel
/// on the bottom/right for odd remainders.
pub fn pad_image(image: &Array3<f32>, multiple: usize) -> (Array3<f32>, CropRecord) {
    let (c, h, w) = image.dim();
    let (ph, pw) = (padded_extent(h, multiple), padded_extent(w, multiple));
    let top = (ph - h) / 2;
    let left = (pw - w) / 2;
    let crop = CropRecord {
        top,
        left,
        height: h,
        width: w,
    };
    if (ph, pw) == (h, w) {
        return (image.clone(), crop);
    }
    let mut out = Array3::<f32>::zeros((c, ph, pw));
    out.slice_mut(s![.., top..top + h, left..left + w])
        .assign(image);
    (out, crop)
}

/// Zero-pads the image and all masks symmetrically up to the next multiple.
/// Returns the padded case and the crop record for exact inversion.
pub fn pad_to_grid(case: &CaseRecord, multiple: usize) -> (CaseRecord, CropRecord) {
    let (image, crop) = pad_image(&case.image, multiple);
    if crop == CropRecord::identity(case.image.dim().1, case.image.dim().2)
        && image.dim() == case.image.dim()
    {
        return (case.clone(), crop);
    }
    let (ph, pw) = (image.dim().1, image.dim().2);
    let raters = case
        .raters
        .iter()
        .map(|m| {
            let mut out = Array2::<u8>::zeros((ph, pw));
            out.slice_mut(s![
                crop.top..crop.top + crop.height,
                crop.left..crop.left + crop.width
            ])
            .assign(m);
            out
        })
        .collect();
    (
        CaseRecord {
            case_id: case.case_id.clone(),
            modality: case.modality,
            image,
            raters,
            crop: Some(crop),
        },
        crop,
    )
}

/// Cuts the original content back out of a padded 2D map.
pub fn unpad_map<T: Clone + Copy>(values: &Array2<T>, crop: &CropRecord) -> Array2<T> {
    values
        .slice(s![
            crop.top..crop.top + crop.height,
            crop.left..crop.left + crop.width
        ])
        .to_owned()
}

/// Integer agreement counts; level k equals thresholding the float average
/// at k/N with >= semantics, but no floating comparison is involved.
pub fn relabel_consensus(raters: &[Array2<u8>]) -> Result<ConsensusLabels> {
    if raters.is_empty() {
        return Err(Error::InvalidConfig("need at least one rater".into()));
    }
    let dim = raters[0].dim();
    let mut counts = Array2::<u8>::zeros(dim);
    for (i, m) in raters.iter().enumerate() {
        if m.dim() != dim {
            return Err(Error::shape(
                format!("rater masks of shape {dim:?}"),
                format!("rater {i} has {:?}", m.dim()),
            ));
        }
        counts.zip_mut_with(m, |c, &v| *c += u8::from(v > 0));
    }
    Ok(ConsensusLabels {
        counts,
        n_raters: raters.len(),
    })
}

/// Per-pixel mean of the binary rater masks; values in `{0, 1/N, ..., 1}`.
pub fn average_annotations(raters: &[Array2<u8>]) -> Result<SoftMap> {
    let labels = relabel_consensus(raters)?;
    let n = labels.n_raters as f32;
    SoftMap::new(
        labels.counts.mapv(|c| c as f32 / n),
        Provenance::RaterAverage,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn case(image: Array3<f32>, raters: Vec<Array2<u8>>) -> CaseRecord {
        CaseRecord {
            case_id: "t".into(),
            modality: Modality::Mr,
            image,
            raters,
            crop: None,
        }
    }

    #[test]
    fn zscore_matches_hand_computed_example() {
        let img = Array3::from_shape_vec((1, 1, 3), vec![2.0, 4.0, 6.0]).unwrap();
        let out = zscore_normalize(&img).unwrap();
        // mean 4, population sigma = sqrt(8/3)
        let expect = [-1.224744871, 0.0, 1.224744871];
        for (o, e) in out.iter().zip(&expect) {
            assert!((f64::from(*o) - e).abs() < 1e-6, "{o} vs {e}");
        }
        // idempotent on already standardized data
        let again = zscore_normalize(&out).unwrap();
        for (a, b) in again.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        // constant image has zero variance
        let flat = Array3::from_elem((1, 2, 2), 3.5);
        assert!(zscore_normalize(&flat).is_err());
    }

    #[test]
    fn ct_rescale_examples() {
        let img = Array3::from_shape_vec((1, 1, 3), vec![50.0, -500.0, 100.0]).unwrap();
        let out = ct_rescale(&img, (0.0, 100.0)).unwrap();
        assert_eq!(out[[0, 0, 0]], 0.5);
        assert_eq!(out[[0, 0, 1]], 0.0);
        assert_eq!(out[[0, 0, 2]], 1.0);
        let wide = ct_rescale(&img, (-100.0, 300.0)).unwrap();
        assert_eq!(wide[[0, 0, 2]], 0.5); // (100 - (-100)) / 400
        assert!(ct_rescale(&img, (10.0, 10.0)).is_err());
    }

    #[test]
    fn pad_to_grid_examples_and_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Array3::from_shape_simple_fn((1, 50, 60), || rng.gen_range(-1.0f32..1.0));
        let mask = Array2::from_shape_simple_fn((50, 60), || rng.gen_range(0..=1u8));
        let c = case(img.clone(), vec![mask.clone()]);
        let (padded, crop) = pad_to_grid(&c, 16);
        assert_eq!(padded.image.dim(), (1, 64, 64));
        assert_eq!(
            crop,
            CropRecord {
                top: 7,
                left: 2,
                height: 50,
                width: 60
            }
        );
        // bit-exact inversion
        let plane = padded.image.index_axis(ndarray::Axis(0), 0).to_owned();
        let restored = unpad_map(&plane, &crop);
        let orig = img.index_axis(ndarray::Axis(0), 0).to_owned();
        assert_eq!(restored, orig);
        assert_eq!(unpad_map(&padded.raters[0], &crop), mask);

        // already aligned stays unchanged with an identity crop
        let aligned = case(Array3::zeros((1, 64, 64)), vec![]);
        let (same, crop) = pad_to_grid(&aligned, 16);
        assert_eq!(same.image, aligned.image);
        assert_eq!(crop, CropRecord::identity(64, 64));
    }

    #[test]
    fn consensus_levels_from_votes() {
        // votes [1,1,0] -> count 2: in levels 1 and 2 but not 3
        let r1 = arr2(&[[1u8]]);
        let r2 = arr2(&[[1u8]]);
        let r3 = arr2(&[[0u8]]);
        let labels = relabel_consensus(&[r1, r2, r3]).unwrap();
        assert_eq!(labels.counts[[0, 0]], 2);
        assert_eq!(labels.level(1)[[0, 0]], 1);
        assert_eq!(labels.level(2)[[0, 0]], 1);
        assert_eq!(labels.level(3)[[0, 0]], 0);

        // unanimous pixel is present in all levels
        let ones = vec![arr2(&[[1u8]]); 4];
        let labels = relabel_consensus(&ones).unwrap();
        for k in 1..=4 {
            assert_eq!(labels.level(k)[[0, 0]], 1);
        }
    }

    #[test]
    fn consensus_matches_rational_threshold_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=7usize {
            let raters: Vec<Array2<u8>> = (0..n)
                .map(|_| Array2::from_shape_simple_fn((9, 11), || rng.gen_range(0..=1u8)))
                .collect();
            let labels = relabel_consensus(&raters).unwrap();
            for k in 1..=n {
                let level = labels.level(k);
                for y in 0..9 {
                    for x in 0..11 {
                        // exact rational comparison: count/n >= k/n  <=>  count >= k
                        let count: usize = raters.iter().map(|r| r[[y, x]] as usize).sum();
                        let expect = u8::from(count * n >= k * n);
                        assert_eq!(level[[y, x]], expect);
                    }
                }
                if k > 1 {
                    // nesting: level k is a subset of level k-1
                    let prev = labels.level(k - 1);
                    for (a, b) in level.iter().zip(prev.iter()) {
                        assert!(*a <= *b);
                    }
                }
            }
        }
    }

    #[test]
    fn average_annotations_counts() {
        let r1 = arr2(&[[1u8, 0]]);
        let r2 = arr2(&[[1u8, 0]]);
        let r3 = arr2(&[[0u8, 0]]);
        let avg = average_annotations(&[r1.clone(), r2, r3]).unwrap();
        assert!((avg.values[[0, 0]] - 2.0f32 / 3.0).abs() < 1e-7);
        assert_eq!(avg.values[[0, 1]], 0.0);
        assert_eq!(avg.provenance, Provenance::RaterAverage);

        // all raters identical -> the map equals that mask
        let same = average_annotations(&[r1.clone(), r1.clone()]).unwrap();
        for (v, m) in same.values.iter().zip(r1.iter()) {
            assert_eq!(*v, *m as f32);
        }

        // N=6: mean equals per-pixel count/6
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raters: Vec<Array2<u8>> = (0..6)
            .map(|_| Array2::from_shape_simple_fn((5, 5), || rng.gen_range(0..=1u8)))
            .collect();
        let avg = average_annotations(&raters).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let count: u32 = raters.iter().map(|r| r[[y, x]] as u32).sum();
                assert_eq!(avg.values[[y, x]], count as f32 / 6.0);
            }
        }
    }

    #[test]
    fn consensus_levels_sum_back_to_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raters: Vec<Array2<u8>> = (0..5)
            .map(|_| Array2::from_shape_simple_fn((6, 6), || rng.gen_range(0..=1u8)))
            .collect();
        let labels = relabel_consensus(&raters).unwrap();
        let avg = average_annotations(&raters).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let level_sum: u32 = (1..=5).map(|k| labels.level(k)[[y, x]] as u32).sum();
                assert_eq!(level_sum as f32 / 5.0, avg.values[[y, x]]);
            }
        }
    }

    #[test]
    fn validates_mask_shapes_and_binarity() {
        let img = Array3::<f32>::zeros((1, 4, 4));
        let bad_shape = case(img.clone(), vec![Array2::zeros((3, 4))]);
        let err = bad_shape.validate().unwrap_err();
        assert!(err.to_string().contains('t'));
        let mut mask = Array2::<u8>::zeros((4, 4));
        mask[[0, 0]] = 2;
        let not_binary = case(img, vec![mask]);
        assert!(not_binary.validate().is_err());
    }
}
