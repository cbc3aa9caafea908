//! Pairwise agreement between binary masks: Intersection over Union and
//! Coverage Ratio, assembled into per-image matrices and aggregated
//! (overall or per class) with a deterministic reduction order.

use crate::attribution::Method;
use crate::error::{Error, Result};
use crate::maskpipe::BinaryMask;

/// Which agreement measure a matrix holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Iou,
    Cr,
}

impl Metric {
    pub fn id(self) -> &'static str {
        match self {
            Metric::Iou => "iou",
            Metric::Cr => "cr",
        }
    }
}

/// A `K x K` agreement matrix over an ordered method list. Entries with
/// `n_pairs == 0` are undefined (excluded everywhere they would be used);
/// for aggregates, `n_pairs` records how many per-image values each mean
/// entry covers.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementMatrix {
    pub metric: Metric,
    pub methods: Vec<Method>,
    values: Vec<f64>,
    n_pairs: Vec<usize>,
}

impl AgreementMatrix {
    pub fn k(&self) -> usize {
        self.methods.len()
    }

    /// Entry value, or `None` when the entry is undefined/excluded.
    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        let k = self.k();
        if self.n_pairs[i * k + j] == 0 {
            None
        } else {
            Some(self.values[i * k + j])
        }
    }

    /// Number of per-image values behind entry `(i, j)`.
    pub fn n_pairs(&self, i: usize, j: usize) -> usize {
        self.n_pairs[i * self.k() + j]
    }

    /// Build a matrix from explicit entries (`None` = excluded); entry
    /// count must be `methods.len()^2`. Mostly used by tests and the CSV
    /// reader.
    pub fn from_entries(
        metric: Metric,
        methods: Vec<Method>,
        entries: Vec<Option<f64>>,
    ) -> Result<Self> {
        let k = methods.len();
        if entries.len() != k * k {
            return Err(Error::Shape(format!(
                "{} entries for a {k}x{k} matrix",
                entries.len()
            )));
        }
        let mut values = vec![0.0; k * k];
        let mut n_pairs = vec![0usize; k * k];
        for (i, e) in entries.into_iter().enumerate() {
            if let Some(v) = e {
                values[i] = v;
                n_pairs[i] = 1;
            }
        }
        Ok(AgreementMatrix { metric, methods, values, n_pairs })
    }
}

fn check_dims(m1: &BinaryMask, m2: &BinaryMask) -> Result<()> {
    if m1.dims() != m2.dims() {
        return Err(Error::Shape(format!(
            "mask dimensions {:?} vs {:?} differ",
            m1.dims(),
            m2.dims()
        )));
    }
    Ok(())
}

/// Intersection over union of the foreground sets. Two empty masks agree
/// perfectly by convention (they both claim "nothing relevant"): 1.0.
pub fn iou(m1: &BinaryMask, m2: &BinaryMask) -> Result<f64> {
    check_dims(m1, m2)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in m1.data().iter().zip(m2.data()) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Coverage ratio: the fraction of `m1`'s foreground also claimed by
/// `m2`. Asymmetric; undefined (an error) when `m1` is empty — callers
/// exclude such pairs and count the exclusion.
pub fn cr(m1: &BinaryMask, m2: &BinaryMask) -> Result<f64> {
    check_dims(m1, m2)?;
    let mut inter = 0usize;
    let mut size1 = 0usize;
    for (&a, &b) in m1.data().iter().zip(m2.data()) {
        size1 += a as usize;
        inter += (a && b) as usize;
    }
    if size1 == 0 {
        return Err(Error::Validation(
            "coverage ratio undefined: covered mask is empty".into(),
        ));
    }
    Ok(inter as f64 / size1 as f64)
}

/// Both agreement matrices for one image, one mask per method.
/// `cr[i][j]` covers mask `i` with mask `j` (rows = covered mask); rows of
/// an empty mask are excluded.
pub fn pairwise_matrices(masks: &[BinaryMask]) -> Result<(AgreementMatrix, AgreementMatrix)> {
    if masks.len() < 2 {
        return Err(Error::Validation(format!(
            "pairwise agreement needs at least 2 masks, got {}",
            masks.len()
        )));
    }
    for m in &masks[1..] {
        check_dims(&masks[0], m)?;
    }
    let k = masks.len();
    let methods: Vec<Method> = masks.iter().map(|m| m.method).collect();
    let mut iou_values = vec![0.0; k * k];
    let mut iou_pairs = vec![0usize; k * k];
    let mut cr_values = vec![0.0; k * k];
    let mut cr_pairs = vec![0usize; k * k];
    for i in 0..k {
        let empty_i = masks[i].count_true() == 0;
        for j in 0..k {
            iou_values[i * k + j] = iou(&masks[i], &masks[j])?;
            iou_pairs[i * k + j] = 1;
            if !empty_i {
                cr_values[i * k + j] = cr(&masks[i], &masks[j])?;
                cr_pairs[i * k + j] = 1;
            }
        }
    }
    Ok((
        AgreementMatrix {
            metric: Metric::Iou,
            methods: methods.clone(),
            values: iou_values,
            n_pairs: iou_pairs,
        },
        AgreementMatrix {
            metric: Metric::Cr,
            methods,
            values: cr_values,
            n_pairs: cr_pairs,
        },
    ))
}

/// Element-wise mean over the defined entries of per-image matrices, in
/// the order given (callers pass image-index order for determinism).
/// `n_pairs` of the result records each entry's denominator; entries
/// defined in no input stay excluded.
pub fn aggregate(matrices: &[AgreementMatrix]) -> Result<AgreementMatrix> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Validation("aggregate needs at least one matrix".into()))?;
    let k = first.k();
    for m in matrices {
        if m.metric != first.metric || m.methods != first.methods {
            return Err(Error::Validation(
                "aggregate requires matrices with identical metric and method list".into(),
            ));
        }
    }
    let mut sums = vec![0.0; k * k];
    let mut counts = vec![0usize; k * k];
    for m in matrices {
        for idx in 0..k * k {
            let n = m.n_pairs[idx];
            if n > 0 {
                // weight by n so aggregates of aggregates stay consistent
                sums[idx] += m.values[idx] * n as f64;
                counts[idx] += n;
            }
        }
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    Ok(AgreementMatrix {
        metric: first.metric,
        methods: first.methods.clone(),
        values,
        n_pairs: counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn mask(h: usize, w: usize, truths: &[(usize, usize)], method: Method) -> BinaryMask {
        let mut data = vec![false; h * w];
        for &(r, c) in truths {
            data[r * w + c] = true;
        }
        BinaryMask::new(h, w, data, method).unwrap()
    }

    fn random_mask(rng: &mut Rng, h: usize, w: usize) -> BinaryMask {
        let fill = rng.uniform(0.0, 1.0);
        let data = (0..h * w).map(|_| rng.next_f64() < fill).collect();
        BinaryMask::new(h, w, data, Method::Lime).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)], Method::Lime);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);

        let b = mask(4, 4, &[(3, 3)], Method::KernelShap);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);

        // 2x2 blocks at (0,0) and (1,1): intersection 1, union 7
        let c = mask(4, 4, &[(1, 1), (1, 2), (2, 1), (2, 2)], Method::KernelShap);
        assert!((iou(&a, &c).unwrap() - 1.0 / 7.0).abs() <= 1e-15);

        let empty = mask(4, 4, &[], Method::Lime);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);

        let wrong = mask(3, 3, &[], Method::Lime);
        assert!(iou(&a, &wrong).is_err());
    }

    #[test]
    fn cr_examples() {
        let small = mask(4, 4, &[(0, 0), (0, 1)], Method::Lime);
        let big = mask(4, 4, &[(0, 0), (0, 1), (2, 2)], Method::KernelShap);
        assert_eq!(cr(&small, &big).unwrap(), 1.0);

        let empty = mask(4, 4, &[], Method::KernelShap);
        assert_eq!(cr(&small, &empty).unwrap(), 0.0);
        assert!(cr(&empty, &small).is_err());

        // |m1| = 4, m2 covers half of it
        let m1 = mask(4, 4, &[(0, 0), (0, 1), (0, 2), (0, 3)], Method::Lime);
        let m2 = mask(4, 4, &[(0, 0), (0, 1)], Method::KernelShap);
        assert_eq!(cr(&m1, &m2).unwrap(), 0.5);
        assert_eq!(cr(&m2, &m1).unwrap(), 1.0);
    }

    #[test]
    fn metrics_match_counting_oracle() {
        let mut rng = Rng::new(21);
        for _ in 0..200 {
            let h = 1 + rng.next_below(16) as usize;
            let w = 1 + rng.next_below(16) as usize;
            let m1 = random_mask(&mut rng, h, w);
            let m2 = random_mask(&mut rng, h, w);

            let mut inter = 0usize;
            let mut union = 0usize;
            let mut count1 = 0usize;
            for r in 0..h {
                for c in 0..w {
                    let (a, b) = (m1.at(r, c), m2.at(r, c));
                    if a && b {
                        inter += 1;
                    }
                    if a || b {
                        union += 1;
                    }
                    if a {
                        count1 += 1;
                    }
                }
            }
            let want_iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            assert_eq!(iou(&m1, &m2).unwrap(), want_iou);
            if count1 > 0 {
                let got = cr(&m1, &m2).unwrap();
                assert_eq!(got, inter as f64 / count1 as f64);
                // IoU <= CR for non-empty m1
                assert!(iou(&m1, &m2).unwrap() <= got + 1e-15);
            }
        }
    }

    #[test]
    fn cr_intersection_identity() {
        let mut rng = Rng::new(22);
        for _ in 0..100 {
            let m1 = random_mask(&mut rng, 8, 8);
            let m2 = random_mask(&mut rng, 8, 8);
            let (c1, c2) = (m1.count_true(), m2.count_true());
            if c1 == 0 || c2 == 0 {
                continue;
            }
            let lhs = cr(&m1, &m2).unwrap() * c1 as f64;
            let rhs = cr(&m2, &m1).unwrap() * c2 as f64;
            assert!((lhs - rhs).abs() <= 1e-12);
            assert!((lhs - lhs.round()).abs() <= 1e-12, "not an integer count");
        }
    }

    #[test]
    fn pairwise_identical_masks_give_all_ones() {
        let m = mask(4, 4, &[(1, 1), (2, 2)], Method::Lime);
        let mut m2 = m.clone();
        m2.method = Method::KernelShap;
        let (iou_m, cr_m) = pairwise_matrices(&[m, m2]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(iou_m.value(i, j), Some(1.0));
                assert_eq!(cr_m.value(i, j), Some(1.0));
            }
        }
        assert_eq!(iou_m.methods, vec![Method::Lime, Method::KernelShap]);
    }

    #[test]
    fn pairwise_iou_is_symmetric_and_cr_counts_intersections() {
        let mut rng = Rng::new(23);
        let masks: Vec<BinaryMask> = Method::ALL[..4]
            .iter()
            .map(|&method| {
                let mut m = random_mask(&mut rng, 8, 8);
                m.method = method;
                m
            })
            .collect();
        let (iou_m, cr_m) = pairwise_matrices(&masks).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(iou_m.value(i, j), iou_m.value(j, i));
                if let (Some(vij), Some(vji)) = (cr_m.value(i, j), cr_m.value(j, i)) {
                    let inter_ij = vij * masks[i].count_true() as f64;
                    let inter_ji = vji * masks[j].count_true() as f64;
                    assert!((inter_ij - inter_ji).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn pairwise_excludes_rows_of_empty_masks() {
        let empty = mask(4, 4, &[], Method::Lime);
        let full = mask(4, 4, &[(0, 0)], Method::KernelShap);
        let (iou_m, cr_m) = pairwise_matrices(&[empty, full]).unwrap();
        assert_eq!(cr_m.value(0, 0), None);
        assert_eq!(cr_m.value(0, 1), None);
        assert_eq!(cr_m.value(1, 0), Some(0.0));
        assert_eq!(cr_m.value(1, 1), Some(1.0));
        // IoU stays defined everywhere
        assert_eq!(iou_m.value(0, 1), Some(0.0));
        assert_eq!(iou_m.value(0, 0), Some(1.0)); // empty vs empty
    }

    #[test]
    fn pairwise_needs_two_masks() {
        let m = mask(4, 4, &[(0, 0)], Method::Lime);
        assert!(pairwise_matrices(std::slice::from_ref(&m)).is_err());
    }

    fn entry_matrix(vals: &[Option<f64>]) -> AgreementMatrix {
        AgreementMatrix::from_entries(
            Metric::Cr,
            vec![Method::Lime, Method::KernelShap],
            vals.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn aggregate_examples() {
        let single = entry_matrix(&[Some(0.25), Some(0.5), Some(0.75), Some(1.0)]);
        let agg = aggregate(std::slice::from_ref(&single)).unwrap();
        assert_eq!(agg.value(0, 0), Some(0.25));
        assert_eq!(agg.value(1, 1), Some(1.0));

        let a = entry_matrix(&[Some(0.2), Some(0.2), Some(0.2), Some(0.2)]);
        let b = entry_matrix(&[Some(0.6), Some(0.6), Some(0.6), Some(0.6)]);
        let agg = aggregate(&[a, b]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((agg.value(i, j).unwrap() - 0.4).abs() <= 1e-15);
                assert_eq!(agg.n_pairs(i, j), 2);
            }
        }

        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn aggregate_skips_excluded_entries() {
        let a = entry_matrix(&[None, Some(0.4), Some(0.2), Some(0.0)]);
        let b = entry_matrix(&[None, None, Some(0.6), Some(1.0)]);
        let agg = aggregate(&[a, b]).unwrap();
        assert_eq!(agg.value(0, 0), None);
        assert_eq!(agg.n_pairs(0, 0), 0);
        assert_eq!(agg.value(0, 1), Some(0.4));
        assert_eq!(agg.n_pairs(0, 1), 1);
        assert!((agg.value(1, 0).unwrap() - 0.4).abs() <= 1e-15);
        assert_eq!(agg.n_pairs(1, 0), 2);
    }

    #[test]
    fn aggregate_matches_sequential_loop_oracle() {
        let mut rng = Rng::new(24);
        let mats: Vec<AgreementMatrix> = (0..100)
            .map(|_| {
                let entries: Vec<Option<f64>> = (0..4)
                    .map(|_| {
                        if rng.next_f64() < 0.1 {
                            None
                        } else {
                            Some(rng.uniform(0.0, 1.0))
                        }
                    })
                    .collect();
                entry_matrix(&entries)
            })
            .collect();
        let agg = aggregate(&mats).unwrap();
        for idx in 0..4 {
            let (i, j) = (idx / 2, idx % 2);
            let mut sum = 0.0;
            let mut count = 0usize;
            for m in &mats {
                if let Some(v) = m.value(i, j) {
                    sum += v;
                    count += 1;
                }
            }
            if count == 0 {
                assert_eq!(agg.value(i, j), None);
            } else {
                assert!((agg.value(i, j).unwrap() - sum / count as f64).abs() <= 1e-12);
                assert_eq!(agg.n_pairs(i, j), count);
            }
        }
    }

    #[test]
    fn aggregate_rejects_mixed_method_lists() {
        let a = entry_matrix(&[Some(0.1), Some(0.1), Some(0.1), Some(0.1)]);
        let b = AgreementMatrix::from_entries(
            Metric::Cr,
            vec![Method::Lime, Method::IntegratedGradients],
            vec![Some(0.1); 4],
        )
        .unwrap();
        assert!(aggregate(&[a, b]).is_err());
    }
}
